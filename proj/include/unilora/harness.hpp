// Copyright 2026 The unilora Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

// Workload traces, run configuration, virtual-clock replay and metrics
// export.

#include <cinttypes>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <istream>
#include <map>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "unilora/model.hpp"
#include "unilora/rng.hpp"
#include "unilora/runtime.hpp"
#include "unilora/trainer.hpp"

namespace unilora {

/// Invalid run configuration (CLI exit code 2).
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Malformed trace input (CLI exit code 3).
class TraceError : public Error {
 public:
  using Error::Error;
};

struct TraceRecord {
  std::int64_t arrival_ms = 0;
  std::string kind = "infer";  // infer | evaluate | finetune ("prefill" is read as infer)
  std::string adapter_id;
  std::size_t prompt_len = 1;
  std::size_t max_new_tokens = 1;
  std::size_t label_len = 0;

  friend bool operator==(const TraceRecord&, const TraceRecord&) = default;
};

inline nlohmann::ordered_json to_json(const TraceRecord& r) {
  return {{"arrival_ms", r.arrival_ms},         {"kind", r.kind},
          {"adapter_id", r.adapter_id},         {"prompt_len", r.prompt_len},
          {"max_new_tokens", r.max_new_tokens}, {"label_len", r.label_len}};
}

namespace detail {

inline std::string trace_where(const std::string& source, std::size_t line) {
  return source + ":" + std::to_string(line) + ": ";
}

inline void validate_record(TraceRecord& r, const std::string& where, std::int64_t prev_arrival) {
  if (r.kind == "prefill") r.kind = "infer";
  if (r.kind != "infer" && r.kind != "evaluate" && r.kind != "finetune") {
    throw TraceError(where + "unknown kind '" + r.kind + "'");
  }
  if (r.arrival_ms < 0) throw TraceError(where + "negative arrival_ms");
  if (r.arrival_ms < prev_arrival) throw TraceError(where + "arrival_ms decreases");
  if (r.prompt_len == 0) throw TraceError(where + "prompt_len must be >= 1");
  if (r.kind == "infer" && r.max_new_tokens == 0) throw TraceError(where + "max_new_tokens must be >= 1");
  if (r.kind != "infer" && r.label_len == 0) throw TraceError(where + "label_len must be >= 1");
}

template <typename I>
I json_uint(const nlohmann::json& j, const char* key, const std::string& where, bool required) {
  if (!j.contains(key)) {
    if (required) throw TraceError(where + "missing key '" + key + "'");
    return I{};
  }
  const auto& v = j.at(key);
  if (!v.is_number_integer()) throw TraceError(where + "'" + key + "' must be an integer");
  if constexpr (std::is_unsigned_v<I>) {
    if (v.get<std::int64_t>() < 0) throw TraceError(where + "'" + key + "' must be nonnegative");
  }
  return v.get<I>();
}

}  // namespace detail

/// One JSON object per line; blank lines are skipped.
inline std::vector<TraceRecord> parse_trace_jsonl(std::istream& in, const std::string& source = "trace") {
  std::vector<TraceRecord> out;
  std::string line;
  std::size_t lineno = 0;
  std::int64_t prev = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const std::string where = detail::trace_where(source, lineno);
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw TraceError(where + "invalid JSON (" + e.what() + ")");
    }
    if (!j.is_object()) throw TraceError(where + "record must be a JSON object");
    TraceRecord r;
    r.arrival_ms = detail::json_uint<std::int64_t>(j, "arrival_ms", where, true);
    if (!j.contains("kind") || !j.at("kind").is_string()) throw TraceError(where + "missing string key 'kind'");
    r.kind = j.at("kind").get<std::string>();
    if (j.contains("adapter_id")) {
      if (!j.at("adapter_id").is_string()) throw TraceError(where + "'adapter_id' must be a string");
      r.adapter_id = j.at("adapter_id").get<std::string>();
    }
    r.prompt_len = detail::json_uint<std::size_t>(j, "prompt_len", where, true);
    r.max_new_tokens = detail::json_uint<std::size_t>(j, "max_new_tokens", where, false);
    r.label_len = detail::json_uint<std::size_t>(j, "label_len", where, false);
    detail::validate_record(r, where, prev);
    prev = r.arrival_ms;
    out.push_back(std::move(r));
  }
  return out;
}

inline void write_trace_jsonl(std::ostream& out, const std::vector<TraceRecord>& trace) {
  for (const auto& r : trace) out << to_json(r).dump() << '\n';
}

/// CSV with a header naming the TraceRecord columns (any order).
inline std::vector<TraceRecord> parse_trace_csv(std::istream& in, const std::string& source = "trace") {
  auto split = [](const std::string& s) {
    std::vector<std::string> cells;
    std::string cell;
    std::istringstream ss(s);
    while (std::getline(ss, cell, ',')) {
      while (!cell.empty() && (cell.back() == '\r' || cell.back() == ' ')) cell.pop_back();
      while (!cell.empty() && cell.front() == ' ') cell.erase(cell.begin());
      cells.push_back(cell);
    }
    if (!s.empty() && s.back() == ',') cells.emplace_back();
    return cells;
  };
  std::string line;
  std::size_t lineno = 0;
  std::map<std::string, std::size_t> col;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const auto cells = split(line);
    for (std::size_t i = 0; i < cells.size(); ++i) col[cells[i]] = i;
    break;
  }
  for (const char* k : {"arrival_ms", "kind", "prompt_len"}) {
    if (!col.contains(k)) throw TraceError(source + ": CSV header lacks column '" + k + "'");
  }
  std::vector<TraceRecord> out;
  std::int64_t prev = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const std::string where = detail::trace_where(source, lineno);
    const auto cells = split(line);
    if (cells.size() != col.size()) throw TraceError(where + "expected " + std::to_string(col.size()) + " cells");
    auto integer = [&](const char* key, bool required) -> std::int64_t {
      auto it = col.find(key);
      if (it == col.end() || cells[it->second].empty()) {
        if (required) throw TraceError(where + "missing value for '" + key + "'");
        return 0;
      }
      const std::string& c = cells[it->second];
      std::size_t pos = 0;
      std::int64_t v = 0;
      try {
        v = std::stoll(c, &pos);
      } catch (const std::exception&) {
        throw TraceError(where + "'" + key + "' is not an integer");
      }
      if (pos != c.size()) throw TraceError(where + "'" + key + "' is not an integer");
      if (v < 0) throw TraceError(where + "'" + key + "' must be nonnegative");
      return v;
    };
    TraceRecord r;
    r.arrival_ms = integer("arrival_ms", true);
    r.kind = cells[col.at("kind")];
    if (auto it = col.find("adapter_id"); it != col.end()) r.adapter_id = cells[it->second];
    r.prompt_len = static_cast<std::size_t>(integer("prompt_len", true));
    r.max_new_tokens = static_cast<std::size_t>(integer("max_new_tokens", false));
    r.label_len = static_cast<std::size_t>(integer("label_len", false));
    detail::validate_record(r, where, prev);
    prev = r.arrival_ms;
    out.push_back(std::move(r));
  }
  return out;
}

/// Reads a trace file; ".csv" goes through the CSV converter.
inline std::vector<TraceRecord> load_trace(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw TraceError("cannot open trace '" + path + "'");
  if (std::filesystem::path(path).extension() == ".csv") return parse_trace_csv(f, path);
  return parse_trace_jsonl(f, path);
}

struct AdapterSpec {
  std::string adapter_id;
  std::string vm_id = "serve";
  std::size_t rank = 8;
  double alpha = 16.0;
  std::vector<std::string> targets = {"q", "k", "v", "o", "up", "gate", "down"};
  std::uint64_t seed = 1;
  double std_a = 0.02;
  double std_b = 0.02;
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(AdapterSpec, adapter_id, vm_id, rank, alpha, targets, seed, std_a, std_b)

struct PhaseSpec {
  double rps = 1.0;
  double start_s = 0.0;
  double duration_s = 0.0;
  std::size_t requests = 0;  // 0: rps × duration
  std::string adapter_id;    // empty: draw from the mix
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(PhaseSpec, rps, start_s, duration_s, requests, adapter_id)

struct WorkloadSpec {
  double rps = 1.0;
  std::size_t requests = 100;
  std::map<std::string, double> mix;  // adapter id -> weight; empty: base only
  std::size_t prompt_len_min = 8;
  std::size_t prompt_len_max = 24;
  std::size_t new_tokens_min = 8;
  std::size_t new_tokens_max = 24;
  double eval_fraction = 0.0;
  std::size_t eval_label_len = 8;
  std::vector<PhaseSpec> phases;  // nonempty: overrides rps / requests
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(WorkloadSpec, rps, requests, mix, prompt_len_min, prompt_len_max,
                                                new_tokens_min, new_tokens_max, eval_fraction, eval_label_len, phases)

/// The four-phase ramp: RPS 1 / 2.5 / 2 / 1 over 120 / 60 / 120 / 120 s,
/// each phase served by its own adapter.
inline std::vector<PhaseSpec> ramp_phases(const std::vector<std::string>& adapters) {
  if (adapters.size() < 4) throw ConfigError("ramp workload needs 4 adapters");
  return {{1.0, 0.0, 120.0, 120, adapters[0]},
          {2.5, 120.0, 60.0, 150, adapters[1]},
          {2.0, 180.0, 120.0, 240, adapters[2]},
          {1.0, 300.0, 120.0, 120, adapters[3]}};
}

inline std::vector<TraceRecord> generate_workload(const WorkloadSpec& w, std::uint64_t seed) {
  for (const auto& [id, weight] : w.mix) {
    if (!std::isfinite(weight) || weight < 0.0) throw ConfigError("mix weight for '" + id + "' must be finite and >= 0");
  }
  double total_weight = 0.0;
  for (const auto& [id, weight] : w.mix) total_weight += weight;
  if (!w.mix.empty() && !(total_weight > 0.0)) throw ConfigError("mix weights sum to zero");
  if (w.prompt_len_min == 0 || w.prompt_len_min > w.prompt_len_max) throw ConfigError("bad prompt length range");
  if (w.new_tokens_min == 0 || w.new_tokens_min > w.new_tokens_max) throw ConfigError("bad new-token range");
  if (w.eval_fraction < 0.0 || w.eval_fraction > 1.0) throw ConfigError("eval_fraction must be in [0, 1]");

  std::vector<PhaseSpec> phases = w.phases;
  if (phases.empty()) phases.push_back(PhaseSpec{w.rps, 0.0, 0.0, w.requests, {}});
  Rng rng(seed);
  std::vector<TraceRecord> out;
  for (const auto& ph : phases) {
    if (!(ph.rps > 0.0) || !std::isfinite(ph.rps)) throw ConfigError("rps must be positive");
    const std::size_t n = ph.requests ? ph.requests : static_cast<std::size_t>(std::llround(ph.rps * ph.duration_s));
    double t = ph.start_s * 1000.0;
    for (std::size_t i = 0; i < n; ++i) {
      t += rng.exponential(ph.rps / 1000.0);
      TraceRecord r;
      r.arrival_ms = static_cast<std::int64_t>(std::floor(t));
      r.adapter_id = ph.adapter_id;
      if (r.adapter_id.empty() && !w.mix.empty()) {
        double u = rng.uniform() * total_weight;
        for (const auto& [id, weight] : w.mix) {
          r.adapter_id = id;
          if (u < weight) break;
          u -= weight;
        }
      }
      r.prompt_len = static_cast<std::size_t>(rng.uniform_int(w.prompt_len_min, w.prompt_len_max));
      r.max_new_tokens = static_cast<std::size_t>(rng.uniform_int(w.new_tokens_min, w.new_tokens_max));
      if (w.eval_fraction > 0.0 && rng.uniform() < w.eval_fraction) {
        r.kind = "evaluate";
        r.label_len = w.eval_label_len;
        r.max_new_tokens = 0;
      }
      out.push_back(std::move(r));
    }
  }
  std::stable_sort(out.begin(), out.end(), [](const auto& a, const auto& b) { return a.arrival_ms < b.arrival_ms; });
  return out;
}

struct RunConfig {
  std::string mode = "unified";      // infer | finetune | unified | mutable
  std::string precision = "single";  // single | double
  ModelConfig model;
  std::string model_path;  // optional weight file; otherwise seeded random base
  std::uint64_t seed = 0;
  std::vector<AdapterSpec> adapters;
  std::vector<FinetuneJobConfig> jobs;
  SloPolicy slo;
  std::size_t budget = 256;
  std::size_t interleave = 4;
  CostModel cost;
  double bucket_ms = 1000.0;
  double duration_ms = 0.0;  // 0: run until the trace drains
  WorkloadSpec workload;

  void validate() const {
    try {
      if (mode != "infer" && mode != "finetune" && mode != "unified" && mode != "mutable") {
        throw ConfigError("mode must be infer, finetune, unified or mutable");
      }
      if (precision != "single" && precision != "double") throw ConfigError("precision must be single or double");
      model.validate();
      slo.validate();
      cost.validate();
      if (budget == 0) throw ConfigError("budget must be >= 1");
      if (interleave == 0) throw ConfigError("interleave must be >= 1");
      if (!(bucket_ms > 0.0)) throw ConfigError("bucket_ms must be positive");
      if (duration_ms < 0.0) throw ConfigError("duration_ms must be >= 0");
      std::set<std::string> ids;
      for (const auto& a : adapters) {
        if (a.adapter_id.empty() || !ids.insert(a.adapter_id).second) throw ConfigError("adapter ids must be unique and nonempty");
        if (a.rank == 0 || !(a.alpha > 0.0)) throw ConfigError("adapter '" + a.adapter_id + "': bad rank or alpha");
        TargetSet::from_names(a.targets);
      }
      for (const auto& j : jobs) {
        j.validate(model);
        if (!ids.insert(j.adapter_id).second) throw ConfigError("adapter id '" + j.adapter_id + "' used twice");
        if (j.micro_batch_rows() > budget) throw ConfigError("job '" + j.job_id + "': micro-batch exceeds the budget");
      }
      if (mode == "finetune" && jobs.empty()) throw ConfigError("finetune mode needs at least one job");
    } catch (const ConfigError&) {
      throw;
    } catch (const Error& e) {
      throw ConfigError(e.what());
    }
  }
};

inline void to_json(nlohmann::json& j, const RunConfig& c) {
  j = {{"mode", c.mode},   {"precision", c.precision}, {"model", c.model},         {"model_path", c.model_path},
       {"seed", c.seed},   {"adapters", c.adapters},   {"jobs", c.jobs},           {"slo", c.slo},
       {"budget", c.budget}, {"interleave", c.interleave}, {"cost", c.cost},     {"bucket_ms", c.bucket_ms},
       {"duration_ms", c.duration_ms}, {"workload", c.workload}};
}

inline void from_json(const nlohmann::json& j, RunConfig& c) {
  static const std::set<std::string> known = {"mode",   "precision", "model",      "model_path", "seed",
                                              "adapters", "jobs",    "slo",        "budget",     "interleave",
                                              "cost",   "bucket_ms", "duration_ms", "workload"};
  for (const auto& [k, v] : j.items()) {
    if (!known.contains(k)) throw ConfigError("unknown config key '" + k + "'");
  }
  RunConfig d;
  c.mode = j.value("mode", d.mode);
  c.precision = j.value("precision", d.precision);
  c.model = j.value("model", d.model);
  c.model_path = j.value("model_path", d.model_path);
  c.seed = j.value("seed", d.seed);
  c.adapters = j.value("adapters", d.adapters);
  c.jobs = j.value("jobs", d.jobs);
  c.slo = j.value("slo", d.slo);
  c.budget = j.value("budget", d.budget);
  c.interleave = j.value("interleave", d.interleave);
  c.cost = j.value("cost", d.cost);
  c.bucket_ms = j.value("bucket_ms", d.bucket_ms);
  c.duration_ms = j.value("duration_ms", d.duration_ms);
  c.workload = j.value("workload", d.workload);
}

inline RunConfig parse_run_config(const std::string& text) {
  try {
    return nlohmann::json::parse(text).get<RunConfig>();
  } catch (const ConfigError&) {
    throw;
  } catch (const std::exception& e) {
    throw ConfigError(std::string("invalid config: ") + e.what());
  }
}

inline RunConfig load_run_config(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot open config '" + path + "'");
  std::stringstream ss;
  ss << f.rdbuf();
  return parse_run_config(ss.str());
}

/// FNV-1a of the canonical (key-sorted) config JSON.
inline std::string config_hash(const RunConfig& c) {
  Fnv1a h;
  h.update(nlohmann::json(c).dump());
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016" PRIx64, h.digest());
  return buf;
}

/// Fills in adapters for a mode that needs them and the ramp phases for
/// mutable mode.
inline RunConfig resolve_defaults(RunConfig c) {
  if (c.mode == "mutable") {
    if (c.adapters.empty()) {
      for (int i = 0; i < 4; ++i) c.adapters.push_back(AdapterSpec{"lora-" + std::to_string(i), "serve", 8, 16.0, {}, std::uint64_t(100 + i)});
      for (auto& a : c.adapters) a.targets = AdapterSpec{}.targets;
    }
    if (c.workload.phases.empty()) {
      std::vector<std::string> ids;
      for (const auto& a : c.adapters) ids.push_back(a.adapter_id);
      c.workload.phases = ramp_phases(ids);
    }
  }
  return c;
}

inline std::vector<TokenId> synth_tokens(std::uint64_t seed, std::string_view request_id, std::size_t n, std::size_t vocab) {
  Fnv1a h;
  h.update(request_id);
  Rng rng(mix_keys(seed, h.digest()));
  std::vector<TokenId> out(n);
  for (auto& t : out) t = static_cast<TokenId>(rng.uniform_int(0, vocab - 1));
  return out;
}

/// Trace record → runtime request with synthesized tokens.
inline Request make_request(const TraceRecord& r, std::size_t index, std::uint64_t seed, std::size_t vocab) {
  Request q;
  q.request_id = "req-" + std::to_string(index);
  q.adapter_id = r.adapter_id;
  q.arrival_ms = static_cast<double>(r.arrival_ms);
  if (r.kind == "infer") {
    q.kind = RequestKind::infer;
    q.tokens = synth_tokens(seed, q.request_id, r.prompt_len, vocab);
    q.max_new_tokens = r.max_new_tokens;
  } else {
    q.kind = r.kind == "evaluate" ? RequestKind::evaluate : RequestKind::finetune;
    q.tokens = synth_tokens(seed, q.request_id, r.prompt_len + r.label_len, vocab);
    q.labels = q.tokens;
    for (std::size_t i = 0; i < r.prompt_len; ++i) q.labels[i] = kIgnoreLabel;
    q.max_new_tokens = 0;
  }
  return q;
}

struct MetricsRow {
  double bucket_start_ms = 0.0;
  double rps = 0.0, dtps = 0.0, ftps = 0.0, etps = 0.0;
  double slo_attainment_cum = 1.0;
};

/// Fixed-width buckets over [0, end]. Token events land in the bucket of
/// their timestamp; requests count in the bucket where they finished, and
/// unfinished ones in the last bucket.
inline std::vector<MetricsRow> bucketize(const LedgerSnapshot& s, double bucket_ms) {
  if (!(bucket_ms > 0.0)) throw Error("bucket width must be positive");
  const double end = s.end_ms();
  const bool any = !s.decode_tokens.empty() || !s.finetune_tokens.empty() || !s.eval_tokens.empty() ||
                   !s.verdicts.empty() || !s.steps.empty();
  if (!any) return {};
  const auto n = static_cast<std::size_t>(std::floor(end / bucket_ms)) + 1;
  auto index = [&](double t) { return std::min(n - 1, static_cast<std::size_t>(std::floor(std::max(0.0, t) / bucket_ms))); };
  std::vector<double> dec(n), fin(n), ev(n), done(n);
  std::vector<std::size_t> total(n), ok(n);
  for (const auto& e : s.decode_tokens) dec[index(e.t_ms)] += static_cast<double>(e.count);
  for (const auto& e : s.finetune_tokens) fin[index(e.t_ms)] += static_cast<double>(e.count);
  for (const auto& e : s.eval_tokens) ev[index(e.t_ms)] += static_cast<double>(e.count);
  for (const auto& v : s.verdicts) {
    const std::size_t b = v.finished_ms >= 0.0 ? index(v.finished_ms) : n - 1;
    if (v.finished_ms >= 0.0) done[b] += 1.0;
    ++total[b];
    ok[b] += v.verdict.attained ? 1 : 0;
  }
  const double secs = bucket_ms / 1000.0;
  std::vector<MetricsRow> rows(n);
  std::size_t cum_total = 0, cum_ok = 0;
  for (std::size_t i = 0; i < n; ++i) {
    cum_total += total[i];
    cum_ok += ok[i];
    rows[i] = MetricsRow{static_cast<double>(i) * bucket_ms, done[i] / secs, dec[i] / secs, fin[i] / secs, ev[i] / secs,
                         cum_total ? static_cast<double>(cum_ok) / static_cast<double>(cum_total) : 1.0};
  }
  return rows;
}

/// Per-bucket mean of the fine-tune row allowance over steps starting there.
inline std::vector<double> finetune_allocation_series(const LedgerSnapshot& s, double bucket_ms, double end_ms) {
  const auto n = static_cast<std::size_t>(std::ceil(end_ms / bucket_ms));
  std::vector<double> sum(n), cnt(n);
  for (const auto& st : s.steps) {
    const auto b = static_cast<std::size_t>(std::floor(st.start_ms / bucket_ms));
    if (b >= n) continue;
    sum[b] += static_cast<double>(st.allocation.finetune_rows);
    cnt[b] += 1.0;
  }
  for (std::size_t i = 0; i < n; ++i) sum[i] = cnt[i] > 0.0 ? sum[i] / cnt[i] : 0.0;
  return sum;
}

inline std::string format_fixed(double v, int digits = 6) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.*f", digits, v);
  return buf;
}

inline std::string metrics_csv(const std::vector<MetricsRow>& rows, const std::string& hash) {
  std::string out = "# config_hash=" + hash + "\n";
  out += "bucket_start_ms,rps,dtps,ftps,etps,slo_attainment_cum\n";
  MetricsRow sum;
  for (const auto& r : rows) {
    out += format_fixed(r.bucket_start_ms, 0) + "," + format_fixed(r.rps) + "," + format_fixed(r.dtps) + "," +
           format_fixed(r.ftps) + "," + format_fixed(r.etps) + "," + format_fixed(r.slo_attainment_cum) + "\n";
    sum.rps += r.rps;
    sum.dtps += r.dtps;
    sum.ftps += r.ftps;
    sum.etps += r.etps;
  }
  const double final_att = rows.empty() ? 1.0 : rows.back().slo_attainment_cum;
  out += "total," + format_fixed(sum.rps) + "," + format_fixed(sum.dtps) + "," + format_fixed(sum.ftps) + "," +
         format_fixed(sum.etps) + "," + format_fixed(final_att) + "\n";
  return out;
}

inline std::string verdicts_csv(const LedgerSnapshot& s, const std::string& hash) {
  std::string out = "# config_hash=" + hash + "\n";
  out += "request_id,adapter_id,arrival_ms,first_scheduled_ms,finished_ms,tokens,wait_ms,mean_gap_ms,max_gap_ms,attained,reasons\n";
  for (const auto& v : s.verdicts) {
    std::string reasons;
    for (const auto& r : v.verdict.reasons) reasons += (reasons.empty() ? "" : ";") + r;
    out += v.request_id + "," + v.adapter_id + "," + format_fixed(v.arrival_ms, 3) + "," +
           format_fixed(v.first_scheduled_ms, 3) + "," + format_fixed(v.finished_ms, 3) + "," +
           std::to_string(v.tokens) + "," +
           (std::isfinite(v.verdict.wait_ms) ? format_fixed(v.verdict.wait_ms, 3) : std::string("inf")) + "," +
           format_fixed(v.verdict.mean_gap_ms, 3) + "," + format_fixed(v.verdict.max_gap_ms, 3) + "," +
           (v.verdict.attained ? "1" : "0") + "," + reasons + "\n";
  }
  return out;
}

inline nlohmann::json ledger_to_json(const LedgerSnapshot& s) {
  auto events = [](const std::vector<TokenEvent>& ev) {
    nlohmann::json a = nlohmann::json::array();
    for (const auto& e : ev) a.push_back({e.t_ms, e.count});
    return a;
  };
  nlohmann::json verdicts = nlohmann::json::array();
  for (const auto& v : s.verdicts) {
    verdicts.push_back({{"request_id", v.request_id},
                        {"adapter_id", v.adapter_id},
                        {"arrival_ms", v.arrival_ms},
                        {"first_scheduled_ms", v.first_scheduled_ms},
                        {"finished_ms", v.finished_ms},
                        {"tokens", v.tokens},
                        {"attained", v.verdict.attained},
                        {"reasons", v.verdict.reasons},
                        {"wait_ms", std::isfinite(v.verdict.wait_ms) ? nlohmann::json(v.verdict.wait_ms) : nlohmann::json()},
                        {"mean_gap_ms", v.verdict.mean_gap_ms},
                        {"max_gap_ms", v.verdict.max_gap_ms}});
  }
  nlohmann::json steps = nlohmann::json::array();
  for (const auto& st : s.steps) {
    steps.push_back({st.start_ms, st.end_ms, st.rows, st.finetune_rows, st.allocation.finetune_rows,
                     st.allocation.prefill_rows, st.allocation.decode_slots, st.allocation.prefill_count});
  }
  return {{"decode_tokens", events(s.decode_tokens)},
          {"finetune_tokens", events(s.finetune_tokens)},
          {"eval_tokens", events(s.eval_tokens)},
          {"verdicts", verdicts},
          {"steps", steps}};
}

inline LedgerSnapshot ledger_from_json(const nlohmann::json& j) {
  LedgerSnapshot s;
  try {
    auto events = [](const nlohmann::json& a) {
      std::vector<TokenEvent> ev;
      for (const auto& e : a) ev.push_back({e.at(0).get<double>(), e.at(1).get<std::size_t>()});
      return ev;
    };
    s.decode_tokens = events(j.at("decode_tokens"));
    s.finetune_tokens = events(j.at("finetune_tokens"));
    s.eval_tokens = events(j.at("eval_tokens"));
    for (const auto& v : j.at("verdicts")) {
      VerdictRecord r;
      r.request_id = v.at("request_id").get<std::string>();
      r.adapter_id = v.at("adapter_id").get<std::string>();
      r.arrival_ms = v.at("arrival_ms").get<double>();
      r.first_scheduled_ms = v.at("first_scheduled_ms").get<double>();
      r.finished_ms = v.at("finished_ms").get<double>();
      r.tokens = v.at("tokens").get<std::size_t>();
      r.verdict.attained = v.at("attained").get<bool>();
      r.verdict.reasons = v.at("reasons").get<std::vector<std::string>>();
      r.verdict.wait_ms = v.at("wait_ms").is_null() ? std::numeric_limits<double>::infinity() : v.at("wait_ms").get<double>();
      r.verdict.mean_gap_ms = v.at("mean_gap_ms").get<double>();
      r.verdict.max_gap_ms = v.at("max_gap_ms").get<double>();
      s.verdicts.push_back(std::move(r));
    }
    for (const auto& st : j.at("steps")) {
      StepSample x;
      x.start_ms = st.at(0).get<double>();
      x.end_ms = st.at(1).get<double>();
      x.rows = st.at(2).get<std::size_t>();
      x.finetune_rows = st.at(3).get<std::size_t>();
      x.allocation = Allocation{st.at(4).get<std::size_t>(), st.at(5).get<std::size_t>(), st.at(6).get<std::size_t>(),
                                st.at(7).get<std::size_t>()};
      s.steps.push_back(x);
    }
  } catch (const nlohmann::json::exception& e) {
    throw Error(std::string("ledger: malformed input (") + e.what() + ")");
  }
  return s;
}

struct ReplayResult {
  LedgerSnapshot ledger;
  std::vector<MetricsRow> rows;
  nlohmann::json summary;
  std::string hash;
  std::string metrics_csv;
  std::string verdicts_csv;
};

template <typename T>
std::shared_ptr<const BaseWeights<T>> load_base(const RunConfig& c) {
  if (!c.model_path.empty()) return std::make_shared<const BaseWeights<T>>(BaseWeights<T>::load(c.model_path));
  return std::make_shared<const BaseWeights<T>>(BaseWeights<T>::random(c.model, c.seed));
}

/// Builds a runtime with the configured adapters and (unless inference-only)
/// fine-tune jobs.
template <typename T>
std::unique_ptr<Runtime<T>> build_runtime(const RunConfig& c, std::shared_ptr<const BaseWeights<T>> base) {
  auto rt = std::make_unique<Runtime<T>>(std::move(base), RuntimeConfig{c.budget, c.interleave, c.slo, c.cost});
  if (c.mode != "finetune") {
    for (const auto& a : c.adapters) {
      if (!rt->registry().find(a.vm_id)) rt->create_virtual_model(a.vm_id, VmMode::inference);
      rt->attach_adapter(a.vm_id, LoraAdapter<T>::random(a.adapter_id, rt->base().config, a.rank, a.alpha,
                                                         TargetSet::from_names(a.targets), a.seed, a.std_a, a.std_b));
    }
  }
  if (c.mode != "infer") {
    for (const auto& j : c.jobs) rt->add_finetune_job(j);
  }
  return rt;
}

/// Trace records accepted by the run mode, turned into runtime requests.
inline std::vector<Request> make_requests(const std::vector<TraceRecord>& trace, const RunConfig& c, std::size_t vocab) {
  std::vector<Request> out;
  for (std::size_t i = 0; i < trace.size(); ++i) {
    const auto& r = trace[i];
    if (c.mode == "infer" && r.kind == "finetune") continue;
    if (c.mode == "finetune" && r.kind != "finetune") continue;
    out.push_back(make_request(r, i, c.seed, vocab));
  }
  return out;
}

/// Ledger, metrics and summary of a finished (finalized) runtime.
template <typename T>
ReplayResult collect_results(const Runtime<T>& rt, const RunConfig& c) {
  ReplayResult out;
  out.hash = config_hash(c);
  out.ledger = rt.ledger().snapshot();
  out.rows = bucketize(out.ledger, c.bucket_ms);
  out.metrics_csv = metrics_csv(out.rows, out.hash);
  out.verdicts_csv = verdicts_csv(out.ledger, out.hash);
  std::size_t attained = 0;
  for (const auto& v : out.ledger.verdicts) attained += v.verdict.attained ? 1 : 0;
  nlohmann::json jobs = nlohmann::json::array();
  for (const auto* t : rt.trainers()) {
    jobs.push_back({{"job_id", t->config.job_id},
                    {"micro_steps", t->micro_steps},
                    {"optimizer_steps", t->optimizer_steps},
                    {"status", trainer_status_name(t->status)},
                    {"last_loss", t->losses.empty() ? 0.0 : static_cast<double>(t->losses.back())}});
  }
  out.summary = {{"config_hash", out.hash},
                 {"config", c},
                 {"requests", out.ledger.verdicts.size()},
                 {"attained", attained},
                 {"slo_attainment", out.ledger.attainment()},
                 {"decode_tokens", out.ledger.total(out.ledger.decode_tokens)},
                 {"finetune_tokens", out.ledger.total(out.ledger.finetune_tokens)},
                 {"eval_tokens", out.ledger.total(out.ledger.eval_tokens)},
                 {"steps", out.ledger.steps.size()},
                 {"end_ms", out.ledger.end_ms()},
                 {"jobs", jobs}};
  return out;
}

/// Runs a trace on the virtual clock: arrivals are admitted once the clock
/// reaches them, idle gaps jump to the next arrival. Without a duration the
/// run ends when the trace is drained (fine-tune mode: when training ends).
template <typename T>
ReplayResult replay(const std::vector<TraceRecord>& trace, const RunConfig& raw_config) {
  const RunConfig c = resolve_defaults(raw_config);
  c.validate();
  auto rt = build_runtime<T>(c, load_base<T>(c));
  const std::vector<Request> requests = make_requests(trace, c, rt->base().config.vocab_size);

  double now = 0.0;
  std::size_t next = 0;
  while (true) {
    while (next < requests.size() && requests[next].arrival_ms <= now) rt->admit(requests[next++]);
    if (c.duration_ms > 0.0 && now >= c.duration_ms) break;
    const auto rep = rt->step(now);
    if (rep.rows == 0) {
      if (next < requests.size()) {
        now = std::max(now, requests[next].arrival_ms);
        continue;
      }
      break;
    }
    now = rep.end_ms;
    if (next >= requests.size() && !rt->has_pending_inference() && c.mode != "finetune" && !requests.empty()) break;
  }
  rt->finalize();
  return collect_results(*rt, c);
}

inline void write_text(const std::filesystem::path& p, const std::string& text) {
  std::ofstream f(p, std::ios::binary | std::ios::trunc);
  if (!f) throw Error("cannot write '" + p.string() + "'");
  f << text;
}

/// metrics.csv, requests.csv, summary.json and ledger.json under `dir`.
inline void write_replay_outputs(const ReplayResult& r, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  write_text(dir / "metrics.csv", r.metrics_csv);
  write_text(dir / "requests.csv", r.verdicts_csv);
  write_text(dir / "summary.json", r.summary.dump(2) + "\n");
  nlohmann::json ledger = ledger_to_json(r.ledger);
  ledger["config_hash"] = r.hash;
  write_text(dir / "ledger.json", ledger.dump() + "\n");
}

}  // namespace unilora
