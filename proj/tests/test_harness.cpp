// Copyright 2026 The unilora Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <sstream>

#include "test_support.hpp"

using namespace unilora;
using namespace unilora::testing;

namespace {

RunConfig small_run(const std::string& mode = "infer") {
  RunConfig c;
  c.mode = mode;
  c.precision = "double";
  c.model = tiny_config(16, 1, 32, 2, 32, 128);
  c.budget = 64;
  c.adapters = {AdapterSpec{"a", "serve", 2, 4.0, {"q", "v"}, 1}};
  c.workload.requests = 30;
  c.workload.rps = 5;
  c.workload.prompt_len_min = 2;
  c.workload.prompt_len_max = 6;
  c.workload.new_tokens_min = 1;
  c.workload.new_tokens_max = 4;
  c.workload.mix = {{"a", 1.0}, {"", 1.0}};
  return c;
}

std::vector<std::vector<std::string>> csv_rows(const std::string& text) {
  std::vector<std::vector<std::string>> out;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    std::vector<std::string> cells;
    std::stringstream ls(line);
    std::string cell;
    while (std::getline(ls, cell, ',')) cells.push_back(cell);
    out.push_back(cells);
  }
  return out;
}

}  // namespace

TEST(Workload, ZeroRequestsGivesEmptyTrace) {
  WorkloadSpec w;
  w.requests = 0;
  EXPECT_TRUE(generate_workload(w, 1).empty());
}

TEST(Workload, SeedDeterminism) {
  WorkloadSpec w;
  w.mix = {{"x", 1}, {"y", 3}};
  w.eval_fraction = 0.2;
  const auto a = generate_workload(w, 7), b = generate_workload(w, 7), c = generate_workload(w, 8);
  std::ostringstream sa, sb, sc;
  write_trace_jsonl(sa, a);
  write_trace_jsonl(sb, b);
  write_trace_jsonl(sc, c);
  EXPECT_EQ(sa.str(), sb.str());
  EXPECT_NE(sa.str(), sc.str());
}

TEST(Workload, PoissonMeanInterArrival) {
  WorkloadSpec w;
  w.requests = 10000;
  w.rps = 1.0;
  const auto t = generate_workload(w, 3);
  ASSERT_EQ(t.size(), 10000u);
  const double mean_gap_ms = static_cast<double>(t.back().arrival_ms) / 10000.0;
  EXPECT_NEAR(mean_gap_ms, 1000.0, 30.0);
  for (std::size_t i = 1; i < t.size(); ++i) EXPECT_LE(t[i - 1].arrival_ms, t[i].arrival_ms);
}

TEST(Workload, RangesAndMixWeights) {
  WorkloadSpec w;
  w.requests = 4000;
  w.mix = {{"x", 1}, {"y", 3}};
  w.prompt_len_min = 3;
  w.prompt_len_max = 5;
  const auto t = generate_workload(w, 4);
  std::size_t y = 0;
  for (const auto& r : t) {
    EXPECT_GE(r.prompt_len, 3u);
    EXPECT_LE(r.prompt_len, 5u);
    y += r.adapter_id == "y";
  }
  EXPECT_NEAR(static_cast<double>(y) / 4000.0, 0.75, 0.03);
  w.mix = {{"x", -1}};
  EXPECT_THROW(generate_workload(w, 1), ConfigError);
  w.mix = {};
  w.prompt_len_min = 0;
  EXPECT_THROW(generate_workload(w, 1), ConfigError);
}

TEST(Workload, RampPhasesUseTheirAdapters) {
  WorkloadSpec w;
  w.phases = ramp_phases({"l0", "l1", "l2", "l3"});
  ASSERT_EQ(w.phases.size(), 4u);
  const auto t = generate_workload(w, 5);
  std::size_t total = 0;
  for (const auto& p : w.phases) total += p.requests;
  EXPECT_EQ(t.size(), total);
  for (const auto& r : t) {
    if (r.arrival_ms < 120000) EXPECT_EQ(r.adapter_id, "l0");
  }
  EXPECT_GE(t.back().arrival_ms, 300000);
}

TEST(Trace, JsonlRoundTrip) {
  WorkloadSpec w;
  w.requests = 50;
  w.mix = {{"a", 1}};
  w.eval_fraction = 0.3;
  const auto t = generate_workload(w, 6);
  std::stringstream s;
  write_trace_jsonl(s, t);
  const auto back = parse_trace_jsonl(s);
  ASSERT_EQ(back.size(), t.size());
  for (std::size_t i = 0; i < t.size(); ++i) {
    EXPECT_EQ(back[i].arrival_ms, t[i].arrival_ms);
    EXPECT_EQ(back[i].kind, t[i].kind);
    EXPECT_EQ(back[i].adapter_id, t[i].adapter_id);
    EXPECT_EQ(back[i].prompt_len, t[i].prompt_len);
    EXPECT_EQ(back[i].label_len, t[i].label_len);
  }
}

TEST(Trace, CsvParses) {
  std::istringstream in(
      "arrival_ms,kind,adapter_id,prompt_len,max_new_tokens,label_len\n"
      "0,infer,a,4,2,0\n"
      "5,prefill,,3,1,0\n"
      "9,evaluate,a,4,0,2\n");
  const auto t = parse_trace_csv(in);
  ASSERT_EQ(t.size(), 3u);
  EXPECT_EQ(t[1].kind, "infer");
  EXPECT_EQ(t[1].adapter_id, "");
  EXPECT_EQ(t[2].label_len, 2u);
}

TEST(Trace, ErrorsCarryLineNumbers) {
  auto message = [](const std::string& text) {
    std::istringstream in(text);
    try {
      parse_trace_jsonl(in, "t.jsonl");
    } catch (const TraceError& e) {
      return std::string(e.what());
    }
    return std::string("no error");
  };
  const std::string ok = R"({"arrival_ms":0,"kind":"infer","prompt_len":2,"max_new_tokens":1})";
  EXPECT_NE(message(ok + "\n{bad json\n").find(":2"), std::string::npos);
  EXPECT_NE(message(ok + "\n" + R"({"arrival_ms":-1,"kind":"infer","prompt_len":2,"max_new_tokens":1})").find(":2"),
            std::string::npos);
  EXPECT_NE(message(R"({"arrival_ms":5,"kind":"infer","prompt_len":2,"max_new_tokens":1})" "\n" + ok).find(":2"), std::string::npos);
  EXPECT_NE(message(R"({"arrival_ms":0,"kind":"train","prompt_len":2,"max_new_tokens":1})").find(":1"),
            std::string::npos);
  EXPECT_NE(message(R"({"arrival_ms":0,"kind":"infer","prompt_len":0,"max_new_tokens":1})").find(":1"), std::string::npos);
  EXPECT_NE(message(R"({"kind":"infer","prompt_len":2,"max_new_tokens":1})").find(":1"), std::string::npos);
  EXPECT_EQ(message(ok + "\n\n" + ok), "no error");
  std::istringstream bad_csv("arrival_ms,kind\n0,infer\n");
  EXPECT_THROW(parse_trace_csv(bad_csv), TraceError);
  EXPECT_THROW(load_trace("/nonexistent/trace.jsonl"), TraceError);
}

TEST(Config, JsonRoundTripAndHash) {
  auto c = small_run();
  const auto text = nlohmann::json(c).dump();
  const auto back = parse_run_config(text);
  EXPECT_EQ(config_hash(back), config_hash(c));
  EXPECT_EQ(config_hash(c).size(), 16u);
  c.seed += 1;
  EXPECT_NE(config_hash(back), config_hash(c));
}

TEST(Config, Validation) {
  EXPECT_THROW(parse_run_config(R"({"mode":"infer","bogus":1})"), ConfigError);
  EXPECT_THROW(parse_run_config("{not json"), ConfigError);
  EXPECT_THROW(parse_run_config(R"({"budget":"many"})"), ConfigError);
  auto c = small_run();
  c.mode = "sometimes";
  EXPECT_THROW(c.validate(), ConfigError);
  c = small_run();
  c.budget = 0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = small_run("finetune");
  EXPECT_THROW(c.validate(), ConfigError);  // no jobs
  c = small_run();
  c.model.n_heads = 3;
  EXPECT_THROW(c.validate(), ConfigError);
  c = small_run();
  c.adapters.push_back(c.adapters[0]);
  EXPECT_THROW(c.validate(), ConfigError);
  EXPECT_THROW(load_run_config("/nonexistent/config.json"), ConfigError);
  EXPECT_NO_THROW(small_run().validate());
}

TEST(Config, MutableModeDefaults) {
  RunConfig c;
  c.mode = "mutable";
  const auto r = resolve_defaults(c);
  ASSERT_EQ(r.adapters.size(), 4u);
  EXPECT_EQ(r.adapters[3].adapter_id, "lora-3");
  ASSERT_EQ(r.workload.phases.size(), 4u);
  EXPECT_EQ(r.workload.phases[2].adapter_id, "lora-2");
}

TEST(Requests, SynthesisIsDeterministicAndLabelled) {
  TraceRecord e{10, "evaluate", "a", 3, 0, 4};
  const auto q = make_request(e, 7, 1, 32);
  EXPECT_EQ(q.request_id, "req-7");
  EXPECT_EQ(q.tokens.size(), 7u);
  for (std::size_t i = 0; i < 3; ++i) EXPECT_EQ(q.labels[i], kIgnoreLabel);
  EXPECT_EQ(q.labels[5], q.tokens[5]);
  EXPECT_EQ(make_request(e, 7, 1, 32).tokens, q.tokens);
  EXPECT_NE(make_request(e, 8, 1, 32).tokens, q.tokens);
  auto c = small_run("infer");
  const std::vector<TraceRecord> trace{{0, "infer", "", 2, 1, 0}, {1, "finetune", "x", 2, 0, 2}};
  EXPECT_EQ(make_requests(trace, c, 32).size(), 1u);
  c.mode = "finetune";
  EXPECT_EQ(make_requests(trace, c, 32).size(), 1u);
  EXPECT_EQ(make_requests(trace, c, 32)[0].request_id, "req-1");
}

TEST(Replay, EmptyTraceGivesZeroSummary) {
  const auto r = replay<double>({}, small_run());
  EXPECT_EQ(r.summary["requests"], 0);
  EXPECT_EQ(r.summary["decode_tokens"], 0);
  EXPECT_EQ(r.summary["slo_attainment"], 1.0);
  EXPECT_TRUE(r.rows.empty());
  const auto rows = csv_rows(r.metrics_csv);
  ASSERT_EQ(rows.size(), 2u);
  EXPECT_EQ(rows[1][0], "total");
}

TEST(Replay, TotalsRowEqualsBucketSums) {
  const auto c = small_run();
  const auto r = replay<double>(generate_workload(c.workload, c.seed), c);
  EXPECT_EQ(r.summary["requests"], 30);
  const auto rows = csv_rows(r.metrics_csv);
  ASSERT_GE(rows.size(), 3u);
  EXPECT_EQ(rows[0][0], "bucket_start_ms");
  double sums[4] = {0, 0, 0, 0};
  for (std::size_t i = 1; i + 1 < rows.size(); ++i)
    for (int k = 0; k < 4; ++k) sums[k] += std::stod(rows[i][1 + k]);
  const auto& total = rows.back();
  EXPECT_EQ(total[0], "total");
  for (int k = 0; k < 4; ++k) EXPECT_NEAR(std::stod(total[1 + k]), sums[k], 1e-5);
  EXPECT_EQ(total[5], rows[rows.size() - 2][5]);
  // Inference only: no fine-tune or evaluation throughput.
  EXPECT_EQ(std::stod(total[3]), 0.0);
  EXPECT_EQ(std::stod(total[4]), 0.0);
  // Decode throughput summed over 1 s buckets equals the token count.
  EXPECT_NEAR(std::stod(total[2]), r.summary["decode_tokens"].get<double>(), 1e-5);
}

TEST(Replay, CumulativeAttainmentMatchesVerdicts) {
  auto c = small_run();
  c.slo.max_waiting_time_s = 0.001;  // most requests wait a little
  const auto r = replay<double>(generate_workload(c.workload, c.seed), c);
  std::size_t ok = 0;
  for (const auto& v : r.ledger.verdicts) ok += v.verdict.attained;
  EXPECT_NEAR(r.rows.back().slo_attainment_cum, static_cast<double>(ok) / 30.0, 1e-12);
  EXPECT_EQ(r.summary["attained"], ok);
  for (std::size_t i = 0; i < r.rows.size(); ++i) EXPECT_GE(r.rows[i].slo_attainment_cum, 0.0);
}

TEST(Replay, DeterministicOutputs) {
  auto c = small_run("unified");
  FinetuneJobConfig j;
  j.job_id = "j";
  j.adapter_id = "j-lora";
  j.rank = 2;
  j.batch_size = 1;
  j.seq_len = 8;
  j.label_len = 4;
  j.dataset_size = 6;
  c.jobs = {j};
  c.workload.eval_fraction = 0.2;
  const auto trace = generate_workload(c.workload, c.seed);
  const auto a = replay<double>(trace, c), b = replay<double>(trace, c);
  EXPECT_EQ(a.metrics_csv, b.metrics_csv);
  EXPECT_EQ(a.verdicts_csv, b.verdicts_csv);
  EXPECT_EQ(a.summary.dump(), b.summary.dump());
  EXPECT_GT(a.summary["finetune_tokens"].get<std::size_t>(), 0u);
  EXPECT_GT(a.summary["eval_tokens"].get<std::size_t>(), 0u);
}

TEST(Replay, FinetuneModeRunsJobsToCompletion) {
  auto c = small_run("finetune");
  FinetuneJobConfig j;
  j.job_id = "j";
  j.adapter_id = "j-lora";
  j.rank = 2;
  j.batch_size = 2;
  j.seq_len = 8;
  j.label_len = 4;
  j.dataset_size = 8;
  c.jobs = {j};
  const auto r = replay<double>({}, c);
  EXPECT_EQ(r.summary["jobs"][0]["micro_steps"], 4);
  EXPECT_EQ(r.summary["jobs"][0]["status"], "finished");
  EXPECT_EQ(r.summary["finetune_tokens"], 4 * 2 * 8);
}

TEST(Ledger, JsonRoundTrip) {
  const auto c = small_run();
  const auto r = replay<double>(generate_workload(c.workload, c.seed), c);
  const auto back = ledger_from_json(ledger_to_json(r.ledger));
  EXPECT_EQ(metrics_csv(bucketize(back, 1000.0), "h"), metrics_csv(bucketize(r.ledger, 1000.0), "h"));
  EXPECT_EQ(verdicts_csv(back, "h"), verdicts_csv(r.ledger, "h"));
}

TEST(Metrics, BucketizeHandExample) {
  LedgerSnapshot s;
  s.decode_tokens = {{100, 2}, {1500, 3}, {2999, 1}};
  s.finetune_tokens = {{900, 16}};
  VerdictRecord ok, bad;
  ok.finished_ms = 500;
  ok.verdict.attained = true;
  bad.finished_ms = 2500;
  s.verdicts = {ok, bad};
  const auto rows = bucketize(s, 1000.0);
  ASSERT_EQ(rows.size(), 3u);
  EXPECT_DOUBLE_EQ(rows[0].dtps, 2);
  EXPECT_DOUBLE_EQ(rows[0].ftps, 16);
  EXPECT_DOUBLE_EQ(rows[1].dtps, 3);
  EXPECT_DOUBLE_EQ(rows[2].dtps, 1);
  EXPECT_DOUBLE_EQ(rows[0].slo_attainment_cum, 1.0);
  EXPECT_DOUBLE_EQ(rows[2].slo_attainment_cum, 0.5);
  EXPECT_DOUBLE_EQ(rows[0].rps + rows[1].rps + rows[2].rps, 2);
  EXPECT_THROW(bucketize(s, 0.0), Error);
  EXPECT_EQ(format_fixed(1.0 / 3), "0.333333");
}
