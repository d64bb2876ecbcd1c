// Copyright 2026 The unilora Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

// Request admission, capacity allocation, the unified step loop,
// interruptible trainers and SLO / throughput accounting.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <deque>
#include <limits>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "unilora/flow.hpp"
#include "unilora/model.hpp"
#include "unilora/trainer.hpp"
#include "unilora/virtual_module.hpp"

namespace unilora {

struct SloPolicy {
  double max_waiting_time_s = 6.0;
  double mean_decoding_latency_ms = 200.0;
  double max_decoding_latency_ms = 1000.0;

  void validate() const {
    for (double v : {max_waiting_time_s, mean_decoding_latency_ms, max_decoding_latency_ms}) {
      if (!(v > 0.0) || !std::isfinite(v)) throw Error("SLO thresholds must be positive and finite");
    }
  }
  friend bool operator==(const SloPolicy&, const SloPolicy&) = default;
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(SloPolicy, max_waiting_time_s, mean_decoding_latency_ms,
                                                max_decoding_latency_ms)

/// Virtual step duration: a fixed launch cost, a per-row forward cost and an
/// extra per-row cost for rows that also run backward.
struct CostModel {
  double step_base_ms = 20.0;
  double per_row_ms = 0.5;
  double per_finetune_row_ms = 1.0;

  double step_ms(std::size_t rows, std::size_t finetune_rows) const {
    return step_base_ms + per_row_ms * static_cast<double>(rows) +
           per_finetune_row_ms * static_cast<double>(finetune_rows);
  }
  void validate() const {
    if (step_base_ms < 0.0 || per_row_ms < 0.0 || per_finetune_row_ms < 0.0) throw Error("cost model: negative cost");
    if (step_base_ms + per_row_ms <= 0.0) throw Error("cost model: steps must take time");
  }
  friend bool operator==(const CostModel&, const CostModel&) = default;
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(CostModel, step_base_ms, per_row_ms, per_finetune_row_ms)

enum class RequestKind { infer, evaluate, finetune };

inline std::string_view request_kind_name(RequestKind k) {
  switch (k) {
    case RequestKind::infer: return "infer";
    case RequestKind::evaluate: return "evaluate";
    case RequestKind::finetune: return "finetune";
  }
  return "?";
}

struct Request {
  std::string request_id;
  RequestKind kind = RequestKind::infer;
  std::string adapter_id;  // empty: base only
  double dynamic_scale = 1.0;
  std::vector<TokenId> tokens;
  std::vector<TokenId> labels;  // evaluate / finetune
  std::size_t max_new_tokens = 1;
  double arrival_ms = 0.0;

  std::optional<double> first_scheduled_ms;
  std::optional<double> first_token_ms;
  std::optional<double> finished_ms;
  std::vector<double> token_ms;
  std::vector<TokenId> output;
  std::optional<double> eval_loss;
};

struct SloVerdict {
  bool attained = false;
  std::vector<std::string> reasons;  // "waiting", "mean_decode", "max_decode", "unfinished"
  double wait_ms = 0.0;
  double mean_gap_ms = 0.0;
  double max_gap_ms = 0.0;
};

/// Waiting time is first scheduling minus arrival; decode latency is the gap
/// between consecutive emitted tokens, averaged over the request lifetime.
inline SloVerdict slo_verdict(const Request& r, const SloPolicy& p) {
  SloVerdict v;
  if (!r.first_scheduled_ms) {
    v.wait_ms = std::numeric_limits<double>::infinity();
    v.reasons.emplace_back("waiting");
  } else {
    v.wait_ms = *r.first_scheduled_ms - r.arrival_ms;
    if (v.wait_ms > p.max_waiting_time_s * 1000.0) v.reasons.emplace_back("waiting");
  }
  if (r.token_ms.size() >= 2) {
    double sum = 0.0;
    for (std::size_t i = 1; i < r.token_ms.size(); ++i) {
      const double g = r.token_ms[i] - r.token_ms[i - 1];
      sum += g;
      v.max_gap_ms = std::max(v.max_gap_ms, g);
    }
    v.mean_gap_ms = sum / static_cast<double>(r.token_ms.size() - 1);
  }
  if (v.mean_gap_ms > p.mean_decoding_latency_ms) v.reasons.emplace_back("mean_decode");
  if (v.max_gap_ms > p.max_decoding_latency_ms) v.reasons.emplace_back("max_decode");
  if (!r.finished_ms) v.reasons.emplace_back("unfinished");
  v.attained = v.reasons.empty();
  return v;
}

/// Inputs of one allocation decision.
struct QueueState {
  std::size_t pending_decodes = 0;
  std::vector<std::size_t> prompt_rows;  // queued prefill / evaluate prompts, oldest first
};

struct Allocation {
  std::size_t finetune_rows = 0;
  std::size_t prefill_rows = 0;
  std::size_t decode_slots = 0;
  std::size_t prefill_count = 0;  // prompts admitted from the head of the queue

  friend bool operator==(const Allocation&, const Allocation&) = default;
};

/// Decode first, then head-of-line prompts, fine-tuning gets what is left.
/// A prompt joins only while it fits and, when it would share the step
/// with other inference rows, keeps the projected step time within the max
/// decoding latency. Fine-tuning gets nothing while prompts stay queued and
/// is capped by the same latency bound when inference rows are present.
inline Allocation allocate_capacity(const QueueState& q, std::size_t budget, const CostModel& cost, const SloPolicy& slo) {
  if (budget == 0) throw Error("allocate_capacity: budget must be >= 1");
  Allocation a;
  a.decode_slots = std::min(q.pending_decodes, budget);
  std::size_t remaining = budget - a.decode_slots;
  std::size_t infer_rows = a.decode_slots;
  for (std::size_t rows : q.prompt_rows) {
    if (rows > remaining) break;
    if (infer_rows > 0 && cost.step_ms(infer_rows + rows, 0) > slo.max_decoding_latency_ms) break;
    infer_rows += rows;
    remaining -= rows;
    a.prefill_rows += rows;
    ++a.prefill_count;
  }
  if (a.prefill_count < q.prompt_rows.size()) return a;
  std::size_t f = remaining;
  if (infer_rows > 0 && f > 0) {
    const double slack = slo.max_decoding_latency_ms - cost.step_ms(infer_rows, 0);
    const double per = cost.per_row_ms + cost.per_finetune_row_ms;
    if (slack <= 0.0) {
      f = 0;
    } else if (per > 0.0) {
      f = std::min<std::size_t>(f, static_cast<std::size_t>(std::floor(slack / per)));
    }
  }
  a.finetune_rows = f;
  return a;
}

struct VerdictRecord {
  std::string request_id;
  std::string adapter_id;
  double arrival_ms = 0.0;
  double first_scheduled_ms = -1.0;
  double finished_ms = -1.0;
  std::size_t tokens = 0;
  SloVerdict verdict;
};

struct StepSample {
  double start_ms = 0.0;
  double end_ms = 0.0;
  std::size_t rows = 0;
  std::size_t finetune_rows = 0;  // rows actually run
  Allocation allocation;
};

struct TokenEvent {
  double t_ms = 0.0;
  std::size_t count = 0;
};

/// Raw accounting events; bucketing happens at report time.
struct LedgerSnapshot {
  std::vector<TokenEvent> decode_tokens, finetune_tokens, eval_tokens;
  std::vector<VerdictRecord> verdicts;  // in completion order
  std::vector<StepSample> steps;

  std::size_t total(const std::vector<TokenEvent>& ev) const {
    std::size_t n = 0;
    for (const auto& e : ev) n += e.count;
    return n;
  }
  double attainment() const {
    if (verdicts.empty()) return 1.0;
    std::size_t ok = 0;
    for (const auto& v : verdicts) ok += v.verdict.attained ? 1 : 0;
    return static_cast<double>(ok) / static_cast<double>(verdicts.size());
  }
  double end_ms() const {
    double t = 0.0;
    for (const auto* ev : {&decode_tokens, &finetune_tokens, &eval_tokens})
      for (const auto& e : *ev) t = std::max(t, e.t_ms);
    for (const auto& v : verdicts) t = std::max(t, v.finished_ms);
    for (const auto& s : steps) t = std::max(t, s.end_ms);
    return t;
  }
};

class MetricsLedger {
 public:
  void record_tokens(RowKind kind, double t_ms, std::size_t n) {
    if (n == 0) return;
    std::lock_guard lock(mu_);
    auto& ev = kind == RowKind::finetune ? data_.finetune_tokens
               : kind == RowKind::evaluate ? data_.eval_tokens
                                           : data_.decode_tokens;
    ev.push_back({t_ms, n});
  }
  void record_verdict(VerdictRecord v) {
    std::lock_guard lock(mu_);
    data_.verdicts.push_back(std::move(v));
  }
  void record_step(const StepSample& s) {
    std::lock_guard lock(mu_);
    data_.steps.push_back(s);
  }
  LedgerSnapshot snapshot() const {
    std::lock_guard lock(mu_);
    return data_;
  }

 private:
  mutable std::mutex mu_;
  LedgerSnapshot data_;
};

struct RuntimeConfig {
  std::size_t budget = 256;
  std::size_t interleave = 4;
  SloPolicy slo;
  CostModel cost;

  void validate() const {
    if (budget == 0) throw Error("runtime: budget must be >= 1");
    if (interleave == 0) throw Error("runtime: interleave must be >= 1");
    slo.validate();
    cost.validate();
  }
};

template <typename T>
struct StepReport {
  std::uint64_t index = 0;
  double start_ms = 0.0;
  double end_ms = 0.0;
  std::size_t rows = 0;
  std::size_t finetune_rows = 0;
  std::size_t eval_rows = 0;
  std::size_t prefill_rows = 0;
  std::size_t decode_rows = 0;
  Allocation allocation;
  std::vector<JobLoss<T>> losses;
  std::vector<std::string> optimizer_steps;  // job ids whose optimizer ran
  std::vector<std::string> finished;         // request ids retired this step
};

enum class PauseOutcome { paused, deferred };

template <typename T>
class Runtime {
 public:
  Runtime(std::shared_ptr<const BaseWeights<T>> base, RuntimeConfig cfg = {})
      : base_(std::move(base)), cfg_(std::move(cfg)), registry_(base_) {
    cfg_.validate();
  }
  Runtime(const Runtime&) = delete;
  Runtime& operator=(const Runtime&) = delete;

  const RuntimeConfig& config() const { return cfg_; }
  const BaseWeights<T>& base() const { return *base_; }
  const ModelRegistry<T>& registry() const { return registry_; }

  // Registry mutations take effect at step boundaries: callers drive them
  // from the executor thread between steps.
  VirtualModel<T>& create_virtual_model(const std::string& id, VmMode mode = VmMode::inference) {
    std::lock_guard exec(exec_mu_);
    return registry_.create_virtual_model(id, mode);
  }

  LoraAdapter<T>& attach_adapter(const std::string& vm_id, LoraAdapter<T> adapter) {
    std::lock_guard exec(exec_mu_);
    auto& a = registry_.attach_adapter(vm_id, std::move(adapter));
    std::lock_guard lock(inbox_mu_);
    known_adapters_.insert(a.id());
    return a;
  }

  LoraAdapter<T> detach_adapter(const std::string& vm_id, const std::string& adapter_id) {
    std::lock_guard exec(exec_mu_);
    drain_inbox();
    for (const auto& t : trainers_) {
      if (t->config.adapter_id == adapter_id) throw Error("detach: adapter '" + adapter_id + "' is being trained");
    }
    if (registry_.at(vm_id).in_flight() != 0) throw Error("detach: virtual model '" + vm_id + "' has requests in flight");
    auto a = registry_.detach_adapter(vm_id, adapter_id);
    std::lock_guard lock(inbox_mu_);
    known_adapters_.erase(adapter_id);
    return a;
  }

  /// Creates a training instance named after the job with a fresh adapter.
  TrainerState<T>& add_finetune_job(const FinetuneJobConfig& job) {
    std::lock_guard exec(exec_mu_);
    job.validate(base_->config);
    if (find_trainer(job.job_id)) throw Error("duplicate fine-tune job '" + job.job_id + "'");
    auto& vm = registry_.create_virtual_model(job.job_id, VmMode::training);
    auto& a = registry_.attach_adapter(vm.id(), LoraAdapter<T>::for_training(job.adapter_id, base_->config, job.rank,
                                                                           job.alpha, TargetSet::from_names(job.targets),
                                                                           job.seed, job.init_std));
    trainers_.push_back(std::make_unique<TrainerState<T>>(job, vm.id(), a, base_->config.vocab_size));
    std::lock_guard lock(inbox_mu_);
    known_adapters_.insert(a.id());
    trained_adapters_.insert(a.id());
    return *trainers_.back();
  }

  /// Thread-safe. Validates and queues; the request joins the schedule at
  /// the next step.
  void admit(Request r) {
    if (r.request_id.empty()) throw Error("admit: empty request id");
    if (!std::isfinite(r.arrival_ms) || r.arrival_ms < 0.0) throw Error("admit: bad arrival time");
    if (!std::isfinite(r.dynamic_scale) || r.dynamic_scale <= 0.0) throw Error("admit: bad dynamic scale");
    const auto& mc = base_->config;
    for (TokenId t : r.tokens)
      if (t < 0 || static_cast<std::size_t>(t) >= mc.vocab_size) throw Error("admit: token out of vocabulary");
    switch (r.kind) {
      case RequestKind::infer:
        if (r.tokens.empty() || r.max_new_tokens == 0) throw Error("admit: infer request needs a prompt and max_new_tokens");
        if (r.tokens.size() + r.max_new_tokens > mc.max_seq) throw Error("admit: request exceeds max_seq");
        if (r.tokens.size() > cfg_.budget) throw Error("admit: prompt longer than the row budget");
        break;
      case RequestKind::evaluate:
      case RequestKind::finetune:
        if (r.tokens.size() < 2 || r.labels.size() != r.tokens.size()) throw Error("admit: labelled request needs >= 2 tokens and matching labels");
        if (r.tokens.size() > mc.max_seq || r.tokens.size() > cfg_.budget) throw Error("admit: labelled request too long");
        break;
    }
    std::lock_guard lock(inbox_mu_);
    if (!r.adapter_id.empty() && !known_adapters_.contains(r.adapter_id)) {
      throw Error("admit: unknown adapter '" + r.adapter_id + "'");
    }
    if (r.kind == RequestKind::finetune && !trained_adapters_.contains(r.adapter_id)) {
      throw Error("admit: no fine-tune job trains adapter '" + r.adapter_id + "'");
    }
    if (!request_ids_.insert(r.request_id).second) throw Error("admit: duplicate request id '" + r.request_id + "'");
    inbox_.push_back(std::move(r));
  }

  /// Pauses at the next micro-step boundary; immediate between steps.
  PauseOutcome pause_trainer(const std::string& job_id) {
    std::lock_guard lock(control_mu_);
    auto& t = trainer_mut(job_id);
    if (stepping_) {
      deferred_pauses_.insert(job_id);
      return PauseOutcome::deferred;
    }
    if (t.status == TrainerStatus::running) t.status = TrainerStatus::paused;
    return PauseOutcome::paused;
  }

  void resume_trainer(const std::string& job_id) {
    std::lock_guard lock(control_mu_);
    auto& t = trainer_mut(job_id);
    deferred_pauses_.erase(job_id);
    if (t.status == TrainerStatus::paused) t.status = TrainerStatus::running;
  }

  const TrainerState<T>& trainer(const std::string& job_id) const {
    if (const auto* t = find_trainer(job_id)) return *t;
    throw Error("unknown fine-tune job '" + job_id + "'");
  }
  std::vector<const TrainerState<T>*> trainers() const {
    std::vector<const TrainerState<T>*> out;
    for (const auto& t : trainers_) out.push_back(t.get());
    return out;
  }

  /// Serializes a quiescent instance with its trainers and removes both.
  VoidedAdapterBundle void_model(const std::string& vm_id) {
    std::lock_guard exec(exec_mu_);
    drain_inbox();
    auto& vm = registry_.at(vm_id);
    std::vector<TrainingSnapshot<T>> snaps;
    std::vector<std::string> jobs;
    for (const auto& t : trainers_) {
      if (t->vm_id == vm_id) {
        snaps.push_back(t->snapshot());
        jobs.push_back(t->config.job_id);
      }
    }
    const auto ids = [&] {
      std::vector<std::string> v;
      for (const auto* a : vm.adapters()) v.push_back(a->id());
      return v;
    }();
    VoidedAdapterBundle bundle = unilora::void_model(vm, snaps);
    registry_.destroy(vm_id);
    std::erase_if(trainers_, [&](const auto& t) { return t->vm_id == vm_id; });
    std::lock_guard lock(inbox_mu_);
    for (const auto& id : ids) {
      known_adapters_.erase(id);
      trained_adapters_.erase(id);
    }
    return bundle;
  }

  /// Recreates a voided instance (same id unless given) and its trainers.
  VirtualModel<T>& unvoid(const VoidedAdapterBundle& bundle, std::optional<std::string> vm_id = std::nullopt) {
    std::lock_guard exec(exec_mu_);
    const auto meta = decode_container<T>(bundle.bytes).metadata;
    if (meta.value("kind", "") != "bundle") throw Error("unvoid: not an adapter bundle");
    const std::string id = vm_id.value_or(meta.at("vm_id").template get<std::string>());
    for (const auto& a : meta.at("adapters")) {
      if (registry_.owner_of(a.at("adapter_id").template get<std::string>())) {
        throw Error("unvoid: adapter id already bound in this runtime");
      }
    }
    auto& vm = registry_.create_virtual_model(id, parse_vm_mode(meta.at("mode").template get<std::string>()));
    std::vector<TrainingSnapshot<T>> snaps;
    try {
      snaps = unvoid_into(bundle, vm);
    } catch (...) {
      registry_.destroy(id);
      throw;
    }
    std::lock_guard lock(inbox_mu_);
    for (const auto* a : vm.adapters()) known_adapters_.insert(a->id());
    for (const auto& s : snaps) {
      const auto cfg = s.metadata.at("config").template get<FinetuneJobConfig>();
      const auto* a = vm.find(cfg.adapter_id);
      if (a == nullptr) throw Error("unvoid: trainer '" + s.job_id + "' lost its adapter");
      auto st = TrainerState<T>::restore(s, *a);
      st.vm_id = id;
      trainers_.push_back(std::make_unique<TrainerState<T>>(std::move(st)));
      trained_adapters_.insert(cfg.adapter_id);
    }
    return vm;
  }

  bool has_pending_inference() const {
    std::lock_guard lock(inbox_mu_);
    for (const auto& r : inbox_)
      if (r.kind != RequestKind::finetune) return true;
    return !prompts_.empty() || !decodes_.empty();
  }
  bool has_training_work() const {
    for (const auto& t : trainers_)
      if (t->has_work()) return true;
    return false;
  }

  const MetricsLedger& ledger() const { return ledger_; }
  const std::vector<Request>& finished() const { return finished_; }
  std::uint64_t step_count() const { return step_index_; }

  /// Records failed verdicts for requests still queued or decoding.
  void finalize() {
    std::lock_guard exec(exec_mu_);
    drain_inbox();
    for (auto* q : {&prompts_, &decodes_}) {
      for (auto& a : *q) {
        if (a->vm) a->vm->unpin();
        retire_unfinished(a->req);
      }
    }
    prompts_.clear();
    decodes_.clear();
  }

  StepReport<T> step(double now_ms) {
    std::lock_guard exec(exec_mu_);
    {
      std::lock_guard lock(control_mu_);
      stepping_ = true;
    }
    struct Boundary {
      Runtime* rt;
      ~Boundary() { rt->end_step(); }
    } boundary{this};

    drain_inbox();
    StepReport<T> rep;
    rep.index = step_index_;
    rep.start_ms = rep.end_ms = now_ms;

    const auto table = registry_.all_adapters();
    std::map<std::string, std::size_t> slot_of;
    for (std::size_t i = 0; i < table.size(); ++i) slot_of[table[i]->id()] = i;
    auto binding_for = [&](const Request& r) {
      AdapterBinding b;
      if (!r.adapter_id.empty()) b.slot = slot_of.at(r.adapter_id);
      b.dynamic_scale = r.dynamic_scale;
      return b;
    };

    QueueState qs;
    qs.pending_decodes = decodes_.size();
    for (const auto& p : prompts_) qs.prompt_rows.push_back(p->req.tokens.size());
    rep.allocation = allocate_capacity(qs, cfg_.budget, cfg_.cost, cfg_.slo);
    const Allocation& alloc = rep.allocation;

    std::vector<BatchRequest<T>> requests;
    const bool inference_rows = alloc.decode_slots + alloc.prefill_count > 0;
    const bool gate_open = !inference_rows || step_index_ % cfg_.interleave == 0;
    std::vector<TrainerState<T>*> ran;
    if (gate_open) {
      std::size_t left = alloc.finetune_rows;
      for (auto& t : trainers_) {
        if (!t->has_work() || t->config.micro_batch_rows() > left) continue;
        left -= t->config.micro_batch_rows();
        requests.emplace_back(t->next_micro_batch(slot_of.at(t->config.adapter_id)));
        ran.push_back(t.get());
      }
    }
    std::vector<Active*> prompts(alloc.prefill_count);
    for (std::size_t i = 0; i < alloc.prefill_count; ++i) {
      Active* a = prompts_[i].get();
      prompts[i] = a;
      if (a->req.kind == RequestKind::evaluate) {
        requests.emplace_back(EvaluateInput{a->req.request_id, binding_for(a->req), a->req.tokens, a->req.labels, 1});
      } else {
        a->cache = KvCache<T>(base_->config);
        requests.emplace_back(PrefillInput<T>{a->req.request_id, binding_for(a->req), a->req.tokens, &a->cache});
      }
    }
    for (std::size_t i = 0; i < alloc.decode_slots; ++i) {
      Active* a = decodes_[i].get();
      requests.emplace_back(DecodeInput<T>{a->req.request_id, binding_for(a->req), a->req.output.back(), &a->cache});
    }
    if (requests.empty()) return rep;

    const auto batch = assemble_batch<T>(requests, table, cfg_.budget);
    const auto report = causal_lm_forward(batch, *base_, table);
    rep.rows = batch.rows();
    rep.finetune_rows = batch.finetune_rows;
    rep.eval_rows = batch.eval_rows;
    rep.prefill_rows = batch.prefill_rows;
    rep.decode_rows = batch.decode_count;
    rep.losses = report.losses;
    const double end = now_ms + cfg_.cost.step_ms(batch.rows(), batch.finetune_rows);
    rep.end_ms = end;

    if (!ran.empty()) {
      GradMasks masks;
      for (auto* t : ran) masks[t->config.job_id] = {slot_of.at(t->config.adapter_id)};
      auto grads = backward_finetune(report, *base_, table, masks);
      for (auto* t : ran) {
        auto& adapter = *registry_.owner_of(t->config.adapter_id)->find_mut(t->config.adapter_id);
        const auto& loss = report.loss_of(t->config.job_id);
        if (t->tick(adapter, grads.at(slot_of.at(t->config.adapter_id)), loss.loss)) {
          rep.optimizer_steps.push_back(t->config.job_id);
        }
      }
      ledger_.record_tokens(RowKind::finetune, end, batch.finetune_rows);
    }

    std::size_t emitted = 0;
    for (Active* a : prompts) {
      a->req.first_scheduled_ms = now_ms;
      const auto logits = request_logits(batch, report.logits, a->req.request_id);
      if (a->req.kind == RequestKind::evaluate) {
        a->req.eval_loss = static_cast<double>(report.loss_of(a->req.request_id).loss);
        a->req.finished_ms = end;
        ledger_.record_tokens(RowKind::evaluate, end, a->req.tokens.size());
        continue;
      }
      const T* last = logits.row(logits.rows() - 1);
      emit(*a, static_cast<TokenId>(argmax(std::span<const T>(last, logits.cols()))), end);
      ++emitted;
    }
    for (std::size_t i = 0; i < alloc.decode_slots; ++i) {
      Active* a = decodes_[i].get();
      const auto logits = request_logits(batch, report.logits, a->req.request_id);
      emit(*a, static_cast<TokenId>(argmax(std::span<const T>(logits.row(0), logits.cols()))), end);
      ++emitted;
    }
    ledger_.record_tokens(RowKind::decode, end, emitted);

    // Retire and move prefilled prompts to the decode queue, preserving order.
    std::deque<std::unique_ptr<Active>> still_decoding;
    for (std::size_t i = 0; i < decodes_.size(); ++i) {
      if (decodes_[i]->req.finished_ms) retire(std::move(decodes_[i]), rep);
      else still_decoding.push_back(std::move(decodes_[i]));
    }
    for (std::size_t i = 0; i < alloc.prefill_count; ++i) {
      auto a = std::move(prompts_.front());
      prompts_.pop_front();
      if (a->req.finished_ms) retire(std::move(a), rep);
      else still_decoding.push_back(std::move(a));
    }
    decodes_ = std::move(still_decoding);

    ledger_.record_step(StepSample{now_ms, end, batch.rows(), batch.finetune_rows, alloc});
    ++step_index_;
    return rep;
  }

 private:
  struct Active {
    Request req;
    KvCache<T> cache;
    VirtualModel<T>* vm = nullptr;
  };

  TrainerState<T>* find_trainer(const std::string& job_id) const {
    for (const auto& t : trainers_)
      if (t->config.job_id == job_id) return t.get();
    return nullptr;
  }
  TrainerState<T>& trainer_mut(const std::string& job_id) {
    if (auto* t = find_trainer(job_id)) return *t;
    throw Error("unknown fine-tune job '" + job_id + "'");
  }

  void drain_inbox() {
    std::deque<Request> in;
    {
      std::lock_guard lock(inbox_mu_);
      in.swap(inbox_);
    }
    for (auto& r : in) {
      if (r.kind == RequestKind::finetune) {
        for (auto& t : trainers_) {
          if (t->config.adapter_id == r.adapter_id) {
            t->extra_samples.push_back(TrainingSample{r.tokens, r.labels});
            break;
          }
        }
        continue;
      }
      auto a = std::make_unique<Active>();
      a->req = std::move(r);
      if (!a->req.adapter_id.empty()) {
        a->vm = registry_.owner_of(a->req.adapter_id);
        if (a->vm == nullptr) {
          retire_unfinished(a->req);
          continue;
        }
        a->vm->pin();
      }
      prompts_.push_back(std::move(a));
    }
  }

  void emit(Active& a, TokenId tok, double t_ms) {
    a.req.output.push_back(tok);
    a.req.token_ms.push_back(t_ms);
    if (!a.req.first_token_ms) a.req.first_token_ms = t_ms;
    if (a.req.output.size() >= a.req.max_new_tokens) a.req.finished_ms = t_ms;
  }

  void retire(std::unique_ptr<Active> a, StepReport<T>& rep) {
    if (a->vm) a->vm->unpin();
    rep.finished.push_back(a->req.request_id);
    if (a->req.kind == RequestKind::infer) record(a->req);
    finished_.push_back(std::move(a->req));
  }

  void retire_unfinished(Request& r) {
    if (r.kind == RequestKind::infer) record(r);
    finished_.push_back(r);
  }

  void retire_unfinished(Request&& r) { retire_unfinished(r); }

  void record(const Request& r) {
    VerdictRecord v;
    v.request_id = r.request_id;
    v.adapter_id = r.adapter_id;
    v.arrival_ms = r.arrival_ms;
    v.first_scheduled_ms = r.first_scheduled_ms.value_or(-1.0);
    v.finished_ms = r.finished_ms.value_or(-1.0);
    v.tokens = r.output.size();
    v.verdict = slo_verdict(r, cfg_.slo);
    ledger_.record_verdict(std::move(v));
  }

  void end_step() {
    std::lock_guard lock(control_mu_);
    stepping_ = false;
    for (const auto& id : deferred_pauses_) {
      if (auto* t = find_trainer(id); t && t->status == TrainerStatus::running) t->status = TrainerStatus::paused;
    }
    deferred_pauses_.clear();
  }

  std::shared_ptr<const BaseWeights<T>> base_;
  RuntimeConfig cfg_;
  ModelRegistry<T> registry_;
  std::vector<std::unique_ptr<TrainerState<T>>> trainers_;

  std::mutex exec_mu_;
  mutable std::mutex inbox_mu_;
  std::deque<Request> inbox_;
  std::set<std::string> known_adapters_;
  std::set<std::string> trained_adapters_;
  std::set<std::string> request_ids_;

  std::mutex control_mu_;
  bool stepping_ = false;
  std::set<std::string> deferred_pauses_;

  std::deque<std::unique_ptr<Active>> prompts_;  // prefill + evaluate, FIFO
  std::deque<std::unique_ptr<Active>> decodes_;  // after prefill, FIFO
  std::vector<Request> finished_;
  MetricsLedger ledger_;
  std::uint64_t step_index_ = 0;
};

}  // namespace unilora
