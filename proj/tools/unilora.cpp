// Copyright 2026 The unilora Authors
// SPDX-License-Identifier: Apache-2.0

// unilora command-line driver: gen, replay, train, serve, migrate, report.

#include <atomic>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <thread>

#include "CLI11.hpp"
#include "unilora/unilora.hpp"

namespace fs = std::filesystem;
using namespace unilora;

namespace {

constexpr int kExitFailure = 1;
constexpr int kExitConfig = 2;
constexpr int kExitTrace = 3;

// Flags shared by the run subcommands; unset flags leave the file values.
struct Overrides {
  std::string config_path;
  std::string mode;
  std::string precision;
  std::uint64_t seed = 0;
  double rps = 0;
  std::size_t requests = 0;
  std::size_t budget = 0;
  std::size_t interleave = 0;
  double slo_wait = 0, slo_mean = 0, slo_max = 0;
  double bucket_ms = 0;
  double duration_ms = 0;
  std::string mix;

  CLI::App* app = nullptr;
  bool set(const char* flag) const { return app->count(flag) > 0; }
};

void add_run_flags(CLI::App* sub, Overrides& o) {
  o.app = sub;
  sub->add_option("--config", o.config_path, "run configuration (JSON)");
  sub->add_option("--mode", o.mode, "infer | finetune | unified | mutable");
  sub->add_option("--precision", o.precision, "single | double");
  sub->add_option("--seed", o.seed, "seed for weights, traces and tokens");
  sub->add_option("--budget", o.budget, "max rows per step");
  sub->add_option("--interleave", o.interleave, "forwards per fine-tune backward");
  sub->add_option("--slo-wait", o.slo_wait, "max waiting time (s)");
  sub->add_option("--slo-mean-ms", o.slo_mean, "mean decoding latency (ms)");
  sub->add_option("--slo-max-ms", o.slo_max, "max decoding latency (ms)");
  sub->add_option("--bucket-ms", o.bucket_ms, "metrics bucket width (ms)");
  sub->add_option("--duration-ms", o.duration_ms, "stop the clock here (0: drain)");
}

void add_workload_flags(CLI::App* sub, Overrides& o) {
  sub->add_option("--rps", o.rps, "Poisson arrival rate");
  sub->add_option("--requests", o.requests, "number of requests");
  sub->add_option("--mix", o.mix, "adapter weights, e.g. a=1,b=3");
}

std::map<std::string, double> parse_mix(const std::string& text) {
  std::map<std::string, double> mix;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    const auto eq = item.find('=');
    if (eq == std::string::npos || eq == 0) throw ConfigError("--mix: expected id=weight, got '" + item + "'");
    try {
      std::size_t pos = 0;
      const double w = std::stod(item.substr(eq + 1), &pos);
      if (pos != item.size() - eq - 1) throw std::invalid_argument("trailing");
      mix[item.substr(0, eq)] = w;
    } catch (const std::exception&) {
      throw ConfigError("--mix: bad weight in '" + item + "'");
    }
  }
  return mix;
}

RunConfig resolve(const Overrides& o) {
  RunConfig c = o.config_path.empty() ? RunConfig{} : load_run_config(o.config_path);
  if (o.set("--mode")) c.mode = o.mode;
  if (o.set("--precision")) c.precision = o.precision;
  if (o.set("--seed")) c.seed = o.seed;
  if (o.set("--budget")) c.budget = o.budget;
  if (o.set("--interleave")) c.interleave = o.interleave;
  if (o.set("--slo-wait")) c.slo.max_waiting_time_s = o.slo_wait;
  if (o.set("--slo-mean-ms")) c.slo.mean_decoding_latency_ms = o.slo_mean;
  if (o.set("--slo-max-ms")) c.slo.max_decoding_latency_ms = o.slo_max;
  if (o.set("--bucket-ms")) c.bucket_ms = o.bucket_ms;
  if (o.set("--duration-ms")) c.duration_ms = o.duration_ms;
  if (o.app->get_option_no_throw("--rps") && o.set("--rps")) c.workload.rps = o.rps;
  if (o.app->get_option_no_throw("--requests") && o.set("--requests")) c.workload.requests = o.requests;
  if (o.app->get_option_no_throw("--mix") && o.set("--mix")) c.workload.mix = parse_mix(o.mix);
  c = resolve_defaults(c);
  c.validate();
  return c;
}

template <typename Fn>
int with_precision(const RunConfig& c, Fn&& fn) {
  if (c.precision == "double") return fn.template operator()<double>();
  return fn.template operator()<float>();
}

void print_summary(const nlohmann::json& s) {
  std::printf("config_hash=%s requests=%zu attained=%zu slo_attainment=%.6f decode_tokens=%zu finetune_tokens=%zu "
              "eval_tokens=%zu\n",
              s.at("config_hash").get<std::string>().c_str(), s.at("requests").get<std::size_t>(),
              s.at("attained").get<std::size_t>(), s.at("slo_attainment").get<double>(),
              s.at("decode_tokens").get<std::size_t>(), s.at("finetune_tokens").get<std::size_t>(),
              s.at("eval_tokens").get<std::size_t>());
}

int cmd_gen(const Overrides& o, const std::string& out, const std::string& format) {
  const RunConfig c = resolve(o);
  const auto trace = generate_workload(c.workload, c.seed);
  std::ostringstream ss;
  if (format == "csv") {
    ss << "arrival_ms,kind,adapter_id,prompt_len,max_new_tokens,label_len\n";
    for (const auto& r : trace) {
      ss << r.arrival_ms << ',' << r.kind << ',' << r.adapter_id << ',' << r.prompt_len << ',' << r.max_new_tokens
         << ',' << r.label_len << '\n';
    }
  } else {
    write_trace_jsonl(ss, trace);
  }
  if (out.empty() || out == "-") {
    std::cout << ss.str();
  } else {
    write_text(out, ss.str());
    std::fprintf(stderr, "wrote %zu records to %s\n", trace.size(), out.c_str());
  }
  return 0;
}

int cmd_replay(const Overrides& o, const std::string& trace_path, const std::string& out) {
  const RunConfig c = resolve(o);
  const auto trace = trace_path.empty() ? generate_workload(c.workload, c.seed) : load_trace(trace_path);
  return with_precision(c, [&]<typename T>() {
    const auto r = replay<T>(trace, c);
    write_replay_outputs(r, out);
    print_summary(r.summary);
    return 0;
  });
}

int cmd_serve(const Overrides& o, const std::string& trace_path, const std::string& out, double speed) {
  if (!(speed > 0.0)) throw ConfigError("--speed must be positive");
  const RunConfig c = resolve(o);
  const auto trace = trace_path.empty() ? generate_workload(c.workload, c.seed) : load_trace(trace_path);
  return with_precision(c, [&]<typename T>() {
    auto rt = build_runtime<T>(c, load_base<T>(c));
    const auto requests = make_requests(trace, c, rt->base().config.vocab_size);
    const auto t0 = std::chrono::steady_clock::now();
    auto clock_ms = [&] {
      return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count() * speed;
    };
    std::atomic<bool> producer_done{false};
    std::thread producer([&] {
      for (const auto& r : requests) {
        const double wait = (r.arrival_ms - clock_ms()) / speed;
        if (wait > 0) std::this_thread::sleep_for(std::chrono::duration<double, std::milli>(wait));
        rt->admit(r);
      }
      producer_done = true;
    });
    while (true) {
      const double now = clock_ms();
      if (c.duration_ms > 0.0 && now >= c.duration_ms) break;
      const auto rep = rt->step(now);
      if (rep.rows == 0) {
        if (producer_done && !rt->has_pending_inference() && !(c.mode == "finetune" && rt->has_training_work())) break;
        std::this_thread::sleep_for(std::chrono::milliseconds(1));
      } else if (producer_done && !rt->has_pending_inference() && c.mode != "finetune" && !requests.empty()) {
        break;
      }
    }
    producer.join();
    rt->finalize();
    const auto r = collect_results(*rt, c);
    write_replay_outputs(r, out);
    print_summary(r.summary);
    return 0;
  });
}

int cmd_train(const Overrides& o, const std::string& out, std::uint64_t steps) {
  RunConfig c = resolve(o);
  if (c.jobs.empty()) throw ConfigError("train: config has no fine-tune jobs");
  c.mode = "finetune";
  return with_precision(c, [&]<typename T>() {
    auto rt = build_runtime<T>(c, load_base<T>(c));
    double now = 0.0;
    for (std::uint64_t i = 0; steps == 0 || i < steps; ++i) {
      const auto rep = rt->step(now);
      if (rep.rows == 0) break;
      now = rep.end_ms;
    }
    fs::create_directories(out);
    std::string losses = "job_id,micro_step,loss\n";
    nlohmann::json jobs = nlohmann::json::array();
    for (const auto* t : rt->trainers()) {
      for (std::size_t i = 0; i < t->losses.size(); ++i) {
        losses += t->config.job_id + "," + std::to_string(i) + "," + format_fixed(static_cast<double>(t->losses[i]), 9) + "\n";
      }
      const auto* a = rt->registry().at(t->vm_id).find(t->config.adapter_id);
      write_bytes((fs::path(out) / (t->config.adapter_id + ".ulora")).string(), a->serialize());
      jobs.push_back({{"job_id", t->config.job_id}, {"micro_steps", t->micro_steps}, {"optimizer_steps", t->optimizer_steps}});
      std::printf("%s: micro_steps=%llu optimizer_steps=%llu last_loss=%.6f\n", t->config.job_id.c_str(),
                  static_cast<unsigned long long>(t->micro_steps), static_cast<unsigned long long>(t->optimizer_steps),
                  t->losses.empty() ? 0.0 : static_cast<double>(t->losses.back()));
    }
    write_text(fs::path(out) / "losses.csv", "# config_hash=" + config_hash(c) + "\n" + losses);
    write_text(fs::path(out) / "summary.json", nlohmann::json{{"config_hash", config_hash(c)}, {"jobs", jobs}}.dump(2) + "\n");
    return 0;
  });
}

// Trains `split` micro-steps in one runtime, voids the job's instance to a
// file, unvoids it into a second runtime and finishes there; compares the
// result with an uninterrupted run.
int cmd_migrate(const Overrides& o, const std::string& out, std::uint64_t steps, std::uint64_t split) {
  RunConfig c = resolve(o);
  if (c.jobs.empty()) throw ConfigError("migrate: config has no fine-tune jobs");
  if (split > steps) throw ConfigError("migrate: --split must not exceed --steps");
  c.mode = "finetune";
  const std::string job = c.jobs.front().job_id;
  return with_precision(c, [&]<typename T>() {
    const auto base = load_base<T>(c);
    auto run = [&](Runtime<T>& rt, std::uint64_t n) {
      for (std::uint64_t i = 0; i < n; ++i)
        if (rt.step(0.0).rows == 0) break;
    };
    auto reference = build_runtime<T>(c, base);
    run(*reference, steps);

    auto first = build_runtime<T>(c, base);
    run(*first, split);
    first->pause_trainer(job);
    fs::create_directories(out);
    const fs::path bundle_path = fs::path(out) / "bundle.ulb";
    first->void_model(job).save(bundle_path.string());

    Runtime<T> second(base, RuntimeConfig{c.budget, c.interleave, c.slo, c.cost});
    second.unvoid(VoidedAdapterBundle::load(bundle_path.string()));
    second.resume_trainer(job);
    run(second, steps - split);

    auto bytes_of = [&](const Runtime<T>& rt) {
      const auto& t = rt.trainer(job);
      return rt.registry().at(t.vm_id).find(t.config.adapter_id)->serialize();
    };
    const bool same = bytes_of(*reference) == bytes_of(second) &&
                      reference->trainer(job).micro_steps == second.trainer(job).micro_steps;
    std::printf("bundle=%s bytes=%zu split=%llu/%llu identical=%s\n", bundle_path.string().c_str(),
                static_cast<std::size_t>(fs::file_size(bundle_path)), static_cast<unsigned long long>(split),
                static_cast<unsigned long long>(steps), same ? "true" : "false");
    return same ? 0 : kExitFailure;
  });
}

int cmd_report(const std::string& ledger_path, double bucket_ms, const std::string& out) {
  std::ifstream f(ledger_path);
  if (!f) throw ConfigError("cannot open ledger '" + ledger_path + "'");
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(f);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("ledger is not valid JSON: ") + e.what());
  }
  if (!(bucket_ms > 0.0)) throw ConfigError("--bucket-ms must be positive");
  const auto snap = ledger_from_json(j);
  const std::string csv = metrics_csv(bucketize(snap, bucket_ms), j.value("config_hash", std::string("unknown")));
  if (out.empty() || out == "-") {
    std::cout << csv;
  } else {
    write_text(out, csv);
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"unilora: unified LoRA fine-tuning and inference runtime"};
  app.require_subcommand(1);

  Overrides gen_o, replay_o, serve_o, train_o, migrate_o;
  std::string gen_out, gen_format = "jsonl";
  auto* gen = app.add_subcommand("gen", "generate a Poisson workload trace");
  add_run_flags(gen, gen_o);
  add_workload_flags(gen, gen_o);
  gen->add_option("--out", gen_out, "trace file (default: stdout)");
  gen->add_option("--format", gen_format, "jsonl | csv")->check(CLI::IsMember({"jsonl", "csv"}));

  std::string replay_trace, replay_out = "out";
  auto* rep = app.add_subcommand("replay", "replay a trace on the virtual clock");
  add_run_flags(rep, replay_o);
  add_workload_flags(rep, replay_o);
  rep->add_option("--trace", replay_trace, "trace file (.jsonl or .csv); default: generate");
  rep->add_option("--out", replay_out, "output directory");

  std::string serve_trace, serve_out = "out";
  double speed = 1.0;
  auto* serve = app.add_subcommand("serve", "run a trace against the wall clock");
  add_run_flags(serve, serve_o);
  add_workload_flags(serve, serve_o);
  serve->add_option("--trace", serve_trace, "trace file; default: generate");
  serve->add_option("--out", serve_out, "output directory");
  serve->add_option("--speed", speed, "clock speed-up factor");

  std::string train_out = "out";
  std::uint64_t train_steps = 0;
  auto* train = app.add_subcommand("train", "fine-tune the configured jobs");
  add_run_flags(train, train_o);
  train->add_option("--out", train_out, "output directory");
  train->add_option("--steps", train_steps, "stop after this many steps (0: run to completion)");

  std::string migrate_out = "out";
  std::uint64_t migrate_steps = 20, migrate_split = 10;
  auto* mig = app.add_subcommand("migrate", "void a training instance into a file and resume it elsewhere");
  add_run_flags(mig, migrate_o);
  mig->add_option("--out", migrate_out, "directory for the bundle");
  mig->add_option("--steps", migrate_steps, "total micro-steps");
  mig->add_option("--split", migrate_split, "micro-steps before migration");

  std::string ledger_path, report_out;
  double report_bucket = 1000.0;
  auto* report = app.add_subcommand("report", "re-bucket a run ledger into metrics CSV");
  report->add_option("--ledger", ledger_path, "ledger.json from a run")->required();
  report->add_option("--bucket-ms", report_bucket, "bucket width (ms)");
  report->add_option("--out", report_out, "CSV file (default: stdout)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : kExitConfig;
  }

  try {
    if (*gen) return cmd_gen(gen_o, gen_out, gen_format);
    if (*rep) return cmd_replay(replay_o, replay_trace, replay_out);
    if (*serve) return cmd_serve(serve_o, serve_trace, serve_out, speed);
    if (*train) return cmd_train(train_o, train_out, train_steps);
    if (*mig) return cmd_migrate(migrate_o, migrate_out, migrate_steps, migrate_split);
    if (*report) return cmd_report(ledger_path, report_bucket, report_out);
  } catch (const TraceError& e) {
    std::fprintf(stderr, "trace error: %s\n", e.what());
    return kExitTrace;
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return kExitConfig;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitFailure;
  }
  return kExitFailure;
}
