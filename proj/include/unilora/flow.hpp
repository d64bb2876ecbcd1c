// Copyright 2026 The unilora Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

// Unified computation flow. Fine-tune (F), evaluation (E), prefill (P) and
// decode (D) rows are packed into one batch in F, E, P, D order. Every
// linear runs once over all rows through SMLM; attention splits into a
// gradient-tracking branch for F rows, a prompt branch for E and P rows
// (P rows write their KV caches) and a cached single-row branch for D rows.
// Per-job losses are tracked separately and one reverse sweep over their
// scaled sum yields LoRA gradients for every fine-tuning job.

#include <map>
#include <memory>
#include <optional>
#include <set>
#include <string>
#include <variant>
#include <vector>

#include "unilora/mixed_lora.hpp"
#include "unilora/model.hpp"
#include "unilora/tensor.hpp"

namespace unilora {

inline constexpr TokenId kIgnoreLabel = -100;

struct FinetuneInput {
  std::string job_id;
  AdapterBinding binding;
  std::size_t batch = 1;
  std::size_t seq_len = 0;
  std::vector<TokenId> tokens;  // batch × seq_len, sequence-major
  std::vector<TokenId> labels;  // same layout; kIgnoreLabel masks a position
  std::size_t accumulation = 1;
  DropoutSpec dropout;
};

struct EvaluateInput {
  std::string job_id;
  AdapterBinding binding;
  std::vector<TokenId> tokens;
  std::vector<TokenId> labels;
  std::size_t accumulation = 1;
};

template <typename T>
struct PrefillInput {
  std::string request_id;
  AdapterBinding binding;
  std::vector<TokenId> tokens;
  KvCache<T>* cache = nullptr;
};

template <typename T>
struct DecodeInput {
  std::string request_id;
  AdapterBinding binding;
  TokenId token = 0;
  KvCache<T>* cache = nullptr;
};

template <typename T>
using BatchRequest = std::variant<FinetuneInput, EvaluateInput, PrefillInput<T>, DecodeInput<T>>;

enum class RowKind { finetune, evaluate, prefill, decode };

inline std::string_view row_kind_name(RowKind k) {
  switch (k) {
    case RowKind::finetune: return "finetune";
    case RowKind::evaluate: return "evaluate";
    case RowKind::prefill: return "prefill";
    case RowKind::decode: return "decode";
  }
  return "?";
}

/// Where one request's rows live in the packed batch.
struct RowSpan {
  RowKind kind;
  std::string id;
  std::size_t row_start = 0;
  std::size_t row_count = 0;
};

/// A labelled job (F or E) as seen by the loss computation.
struct LossJob {
  std::string id;
  RowKind kind;
  std::size_t row_start = 0;
  std::size_t batch = 1;
  std::size_t seq_len = 0;
  std::size_t accumulation = 1;
  std::optional<std::size_t> slot;
  std::vector<TokenId> labels;
};

template <typename T>
struct UnifiedBatch {
  std::vector<TokenId> tokens;          // one per row
  std::vector<std::size_t> positions;   // absolute position of each row
  std::vector<std::pair<std::size_t, std::size_t>> finetune_shapes;  // F: (batch, seq_len)
  std::vector<std::size_t> eval_lens;     // E
  std::vector<std::size_t> prefill_lens;  // P
  std::size_t decode_count = 0;           // D
  std::vector<LossJob> loss_jobs;         // F jobs, then E jobs
  std::vector<KvCache<T>*> prefill_caches;
  std::vector<KvCache<T>*> decode_caches;
  SegmentMap segments;
  std::vector<RowSpan> origins;
  std::size_t finetune_rows = 0;
  std::size_t eval_rows = 0;
  std::size_t prefill_rows = 0;

  std::size_t rows() const { return tokens.size(); }
  std::size_t finetune_job_count() const { return finetune_shapes.size(); }

  const RowSpan& origin(std::string_view id) const {
    for (const auto& o : origins)
      if (o.id == id) return o;
    throw Error("batch: no request '" + std::string(id) + "'");
  }
};

namespace detail {

inline void check_binding(const AdapterBinding& b, std::size_t table_size, const std::string& who,
                          const std::vector<bool>& bound) {
  if (!std::isfinite(b.dynamic_scale) || b.dynamic_scale <= 0.0) throw Error("request '" + who + "': bad dynamic scale");
  if (!b.slot) return;
  if (*b.slot >= table_size || !bound[*b.slot]) {
    throw Error("request '" + who + "': adapter slot " + std::to_string(*b.slot) + " is not bound");
  }
}

inline bool can_merge(const Segment& a, const Segment& b) {
  return a.slot == b.slot && a.dynamic_scale == b.dynamic_scale && !a.dropout.active() && !b.dropout.active();
}

}  // namespace detail

/// Packs requests into F, E, P, D order (stable within each kind) and
/// builds the segment map and row-origin map.
template <typename T>
UnifiedBatch<T> assemble_batch(std::span<const BatchRequest<T>> requests, const AdapterTable<T>& table,
                               std::optional<std::size_t> max_rows = std::nullopt) {
  if (requests.empty()) throw Error("assemble_batch: no requests");
  std::vector<bool> bound(table.size());
  for (std::size_t i = 0; i < table.size(); ++i) bound[i] = table[i] != nullptr;

  UnifiedBatch<T> b;
  std::vector<Segment> segs;
  // F segments are never merged so the F prefix stays separable for backward.
  auto add_rows = [&](RowKind kind, const std::string& id, const AdapterBinding& binding, std::span<const TokenId> toks,
                      std::size_t pos_start, std::size_t seq_len, const DropoutSpec& dropout) {
    const std::size_t start = b.rows();
    for (std::size_t i = 0; i < toks.size(); ++i) {
      b.tokens.push_back(toks[i]);
      b.positions.push_back(pos_start + (seq_len ? i % seq_len : i));
    }
    b.origins.push_back(RowSpan{kind, id, start, toks.size()});
    Segment s{start, toks.size(), binding.slot, binding.dynamic_scale, dropout};
    if (kind != RowKind::finetune && !segs.empty() && start > b.finetune_rows && detail::can_merge(segs.back(), s))
      segs.back().row_count += s.row_count;
    else segs.push_back(s);
  };

  for (const auto& r : requests) {
    if (const auto* f = std::get_if<FinetuneInput>(&r)) {
      detail::check_binding(f->binding, table.size(), f->job_id, bound);
      if (f->batch == 0 || f->seq_len < 2) throw Error("finetune '" + f->job_id + "': need batch >= 1 and seq_len >= 2");
      if (f->tokens.size() != f->batch * f->seq_len || f->labels.size() != f->tokens.size()) {
        throw Error("finetune '" + f->job_id + "': tokens/labels do not match batch x seq_len");
      }
      if (f->accumulation == 0) throw Error("finetune '" + f->job_id + "': accumulation must be >= 1");
      b.finetune_shapes.emplace_back(f->batch, f->seq_len);
      b.loss_jobs.push_back(LossJob{f->job_id, RowKind::finetune, b.rows(), f->batch, f->seq_len, f->accumulation,
                                    f->binding.slot, f->labels});
      add_rows(RowKind::finetune, f->job_id, f->binding, f->tokens, 0, f->seq_len, f->dropout);
      b.finetune_rows += f->tokens.size();
    }
  }
  for (const auto& r : requests) {
    if (const auto* e = std::get_if<EvaluateInput>(&r)) {
      detail::check_binding(e->binding, table.size(), e->job_id, bound);
      if (e->tokens.size() < 2 || e->labels.size() != e->tokens.size()) {
        throw Error("evaluate '" + e->job_id + "': need >= 2 tokens and matching labels");
      }
      if (e->accumulation == 0) throw Error("evaluate '" + e->job_id + "': accumulation must be >= 1");
      b.eval_lens.push_back(e->tokens.size());
      b.loss_jobs.push_back(LossJob{e->job_id, RowKind::evaluate, b.rows(), 1, e->tokens.size(), e->accumulation,
                                    e->binding.slot, e->labels});
      add_rows(RowKind::evaluate, e->job_id, e->binding, e->tokens, 0, 0, {});
      b.eval_rows += e->tokens.size();
    }
  }
  for (const auto& r : requests) {
    if (const auto* p = std::get_if<PrefillInput<T>>(&r)) {
      detail::check_binding(p->binding, table.size(), p->request_id, bound);
      if (p->tokens.empty()) throw Error("prefill '" + p->request_id + "': empty prompt");
      if (p->cache == nullptr || !p->cache->empty()) throw Error("prefill '" + p->request_id + "': needs an empty cache");
      p->cache->check_room(p->tokens.size());
      b.prefill_lens.push_back(p->tokens.size());
      b.prefill_caches.push_back(p->cache);
      add_rows(RowKind::prefill, p->request_id, p->binding, p->tokens, 0, 0, {});
      b.prefill_rows += p->tokens.size();
    }
  }
  for (const auto& r : requests) {
    if (const auto* d = std::get_if<DecodeInput<T>>(&r)) {
      detail::check_binding(d->binding, table.size(), d->request_id, bound);
      if (d->cache == nullptr || d->cache->empty()) throw Error("decode '" + d->request_id + "': needs a primed cache");
      d->cache->check_room(1);
      const TokenId tok[1] = {d->token};
      add_rows(RowKind::decode, d->request_id, d->binding, tok, d->cache->length(), 0, {});
      b.decode_caches.push_back(d->cache);
      ++b.decode_count;
    }
  }
  if (max_rows && b.rows() > *max_rows) {
    throw Error("assemble_batch: " + std::to_string(b.rows()) + " rows exceed the budget of " +
                std::to_string(*max_rows));
  }
  b.segments = SegmentMap(std::move(segs));
  return b;
}

/// Activations of the F-row prefix needed by the reverse sweep.
template <typename T>
struct LayerTape {
  Matrix<T> h_in, a_in, q, k, v, att, h_mid, m_in, up, gate;
  std::vector<std::vector<Matrix<T>>> probs;  // per F sequence, per head
};

template <typename T>
struct ForwardTape {
  std::size_t rows = 0;
  SegmentMap segments;
  std::vector<std::size_t> positions;
  std::vector<std::pair<std::size_t, std::size_t>> finetune_shapes;
  std::vector<LayerTape<T>> layers;
  Matrix<T> h_final;
};

namespace detail {

inline std::uint64_t linear_salt(std::size_t layer, Target t) {
  return static_cast<std::uint64_t>(layer) * kNumTargets + static_cast<std::size_t>(t) + 1;
}

template <typename T>
Matrix<T> batch_linear(const Matrix<T>& x, const BaseWeights<T>& w, const AdapterTable<T>& table,
                       const SegmentMap& seg, std::size_t layer, Target t) {
  const auto slots = linear_slots(table, layer, t);
  return smlm_forward(x, w.layers[layer].linear(t), seg, std::span<const LinearSlot<T>>(slots), linear_salt(layer, t));
}

}  // namespace detail

/// One attention layer over a packed batch: joint Q/K/V projection, the
/// three attention branches, concatenation in F, E/P, D order, joint O
/// projection. P and D rows stage their K/V into the request caches; the
/// caller commits them once every layer has run.
template <typename T>
Matrix<T> attention_layer_forward(const UnifiedBatch<T>& batch, const BaseWeights<T>& w, const AdapterTable<T>& table,
                                  std::size_t layer, const Matrix<T>& x, LayerTape<T>* tape = nullptr) {
  const auto& cfg = w.config;
  if (x.rows() != batch.rows() || x.cols() != cfg.hidden) throw Error("attention_layer_forward: input shape mismatch");
  Matrix<T> q = detail::batch_linear(x, w, table, batch.segments, layer, Target::q);
  Matrix<T> k = detail::batch_linear(x, w, table, batch.segments, layer, Target::k);
  const Matrix<T> v = detail::batch_linear(x, w, table, batch.segments, layer, Target::v);
  apply_rope(q, batch.positions, cfg);
  apply_rope(k, batch.positions, cfg);

  Matrix<T> att(batch.rows(), cfg.hidden);
  std::size_t row = 0;

  // F branch: full self-attention per sequence, probabilities kept for backward.
  if (!batch.finetune_shapes.empty()) {
    if (tape) tape->probs.clear();
    for (auto [nseq, len] : batch.finetune_shapes) {
      for (std::size_t s = 0; s < nseq; ++s, row += len) {
        std::vector<Matrix<T>> probs;
        causal_attention(q.row(row), len, k.row(row), v.row(row), 0, cfg, att.row(row), tape ? &probs : nullptr);
        if (tape) tape->probs.push_back(std::move(probs));
      }
    }
  }

  // E/P branch: prompt attention; P rows initialise their caches, E rows keep nothing.
  if (!batch.eval_lens.empty() || !batch.prefill_lens.empty()) {
    for (std::size_t len : batch.eval_lens) {
      causal_attention(q.row(row), len, k.row(row), v.row(row), 0, cfg, att.row(row));
      row += len;
    }
    for (std::size_t i = 0; i < batch.prefill_lens.size(); ++i) {
      const std::size_t len = batch.prefill_lens[i];
      KvCache<T>& cache = *batch.prefill_caches[i];
      cache.append(layer, k, row, v, row, len);
      causal_attention(q.row(row), len, cache.keys(layer), cache.values(layer), 0, cfg, att.row(row));
      row += len;
    }
  }

  // D branch: append one K/V row, attend over the whole cache.
  if (batch.decode_count > 0) {
    for (std::size_t i = 0; i < batch.decode_count; ++i, ++row) {
      KvCache<T>& cache = *batch.decode_caches[i];
      cache.append(layer, k, row, v, row, 1);
      causal_attention(q.row(row), 1, cache.keys(layer), cache.values(layer), cache.length(), cfg, att.row(row));
    }
  }

  if (tape) {
    const std::size_t n = batch.finetune_rows;
    tape->a_in = x.slice_rows(0, n);
    tape->q = q.slice_rows(0, n);
    tape->k = k.slice_rows(0, n);
    tape->v = v.slice_rows(0, n);
    tape->att = att.slice_rows(0, n);
  }
  return detail::batch_linear(att, w, table, batch.segments, layer, Target::o);
}

template <typename T>
struct ForwardOutput {
  Matrix<T> logits;
  std::shared_ptr<const ForwardTape<T>> tape;  // set when the batch has F rows
};

/// Full model forward over a packed batch. Commits P/D caches on success
/// and discards staged rows on failure.
template <typename T>
ForwardOutput<T> unified_forward(const UnifiedBatch<T>& batch, const BaseWeights<T>& w, const AdapterTable<T>& table) {
  const auto& cfg = w.config;
  for (const auto* a : table)
    if (a) a->check_compatible(cfg);
  const bool record = batch.finetune_rows > 0;
  auto tape = record ? std::make_shared<ForwardTape<T>>() : nullptr;
  if (tape) {
    tape->rows = batch.finetune_rows;
    tape->segments = batch.segments.prefix(batch.finetune_rows);
    tape->positions.assign(batch.positions.begin(), batch.positions.begin() + batch.finetune_rows);
    tape->finetune_shapes = batch.finetune_shapes;
    tape->layers.resize(cfg.n_layers);
  }
  const std::size_t nf = batch.finetune_rows;
  const T eps = static_cast<T>(cfg.norm_eps);
  try {
    Matrix<T> h = embedding(w.embedding, batch.tokens);
    for (std::size_t l = 0; l < cfg.n_layers; ++l) {
      const auto& lw = w.layers[l];
      LayerTape<T>* lt = tape ? &tape->layers[l] : nullptr;
      const Matrix<T> a_in = rms_norm(h, std::span<const T>(lw.attn_norm), eps);
      const Matrix<T> o = attention_layer_forward(batch, w, table, l, a_in, lt);
      if (lt) lt->h_in = h.slice_rows(0, nf);
      h += o;
      const Matrix<T> m_in = rms_norm(h, std::span<const T>(lw.mlp_norm), eps);
      const Matrix<T> up = detail::batch_linear(m_in, w, table, batch.segments, l, Target::up);
      const Matrix<T> gate = detail::batch_linear(m_in, w, table, batch.segments, l, Target::gate);
      const Matrix<T> down = detail::batch_linear(hadamard(silu(gate), up), w, table, batch.segments, l, Target::down);
      if (lt) {
        lt->h_mid = h.slice_rows(0, nf);
        lt->m_in = m_in.slice_rows(0, nf);
        lt->up = up.slice_rows(0, nf);
        lt->gate = gate.slice_rows(0, nf);
      }
      h += down;
    }
    if (tape) tape->h_final = h.slice_rows(0, nf);
    Matrix<T> logits = detail::lm_logits(h, w);
    for (std::size_t i = 0; i < batch.prefill_caches.size(); ++i) batch.prefill_caches[i]->commit(batch.prefill_lens[i]);
    for (auto* c : batch.decode_caches) c->commit(1);
    return {std::move(logits), std::move(tape)};
  } catch (...) {
    for (auto* c : batch.prefill_caches) c->discard_staged();
    for (auto* c : batch.decode_caches) c->discard_staged();
    throw;
  }
}

template <typename T>
struct JobLoss {
  std::string job_id;
  RowKind kind;
  T loss;         // mean token cross-entropy of the job
  T scaled_loss;  // loss / accumulation
  std::size_t accumulation;
  std::size_t supervised_tokens;
};

template <typename T>
struct LossReport {
  std::vector<JobLoss<T>> losses;  // F jobs then E jobs
  Matrix<T> logits;
  std::shared_ptr<const ForwardTape<T>> tape;
  Matrix<T> dlogits;  // d(Σ scaled F losses)/d logits over the F prefix
  std::vector<LossJob> finetune_jobs;

  const JobLoss<T>& loss_of(std::string_view job) const {
    for (const auto& l : losses)
      if (l.job_id == job) return l;
    throw Error("loss report: no job '" + std::string(job) + "'");
  }
};

/// Forward plus per-job shifted cross-entropy. Each F/E job's loss is
/// divided by its own accumulation step; P/D rows yield logits only.
template <typename T>
LossReport<T> causal_lm_forward(const UnifiedBatch<T>& batch, const BaseWeights<T>& w, const AdapterTable<T>& table) {
  for (const auto& job : batch.loss_jobs) {
    if (job.labels.size() != job.batch * job.seq_len) throw Error("causal_lm_forward: missing labels for '" + job.id + "'");
  }
  auto out = unified_forward(batch, w, table);
  LossReport<T> report;
  report.logits = std::move(out.logits);
  report.tape = std::move(out.tape);
  report.dlogits = Matrix<T>(batch.finetune_rows, w.config.vocab_size);
  for (const auto& job : batch.loss_jobs) {
    T sum = 0;
    std::size_t count = 0;
    std::vector<Matrix<T>> grads;
    for (std::size_t s = 0; s < job.batch; ++s) {
      const std::size_t start = job.row_start + s * job.seq_len;
      const Matrix<T> logits = report.logits.slice_rows(start, job.seq_len);
      Matrix<T> d(job.seq_len, logits.cols());
      auto [part, n] = cross_entropy_shifted_sum(
          logits, std::span<const TokenId>(job.labels).subspan(s * job.seq_len, job.seq_len), kIgnoreLabel, d);
      sum += part;
      count += n;
      grads.push_back(std::move(d));
    }
    if (count == 0) throw Error("empty loss support for job '" + job.id + "'");
    const T loss = sum / T(count);
    report.losses.push_back(JobLoss<T>{job.id, job.kind, loss, loss / T(job.accumulation), job.accumulation, count});
    if (job.kind != RowKind::finetune) continue;
    report.finetune_jobs.push_back(job);
    const T coef = T(1) / (T(count) * T(job.accumulation));
    for (std::size_t s = 0; s < job.batch; ++s) {
      grads[s] *= coef;
      const std::size_t start = job.row_start + s * job.seq_len;
      for (std::size_t i = 0; i < job.seq_len; ++i)
        std::copy(grads[s].row(i), grads[s].row(i) + grads[s].cols(), report.dlogits.row(start + i));
    }
  }
  return report;
}

/// LoRA gradients for one adapter, laid out like the adapter itself.
template <typename T>
using AdapterGrads = std::vector<LayerPairs<T>>;

/// Per-job parameter masks: the adapter slots whose gradients a job may own.
using GradMasks = std::map<std::string, std::set<std::size_t>>;

/// Single reverse sweep over the sum of all F jobs' scaled losses. Returns
/// gradients keyed by adapter slot for every masked-in slot; the base model
/// receives nothing.
template <typename T>
std::map<std::size_t, AdapterGrads<T>> backward_finetune(const LossReport<T>& report, const BaseWeights<T>& w,
                                                         const AdapterTable<T>& table,
                                                         std::optional<GradMasks> masks = std::nullopt) {
  const auto& cfg = w.config;
  std::map<std::size_t, AdapterGrads<T>> result;
  if (report.finetune_jobs.empty()) return result;
  if (!report.tape) throw Error("backward_finetune: report carries no forward tape");
  const ForwardTape<T>& tape = *report.tape;

  GradMasks m;
  if (masks) {
    m = *masks;
  } else {
    for (const auto& job : report.finetune_jobs)
      if (job.slot) m[job.id].insert(*job.slot);
  }
  std::map<std::size_t, std::string> owner;
  for (const auto& [job_id, slots] : m) {
    const LossJob* job = nullptr;
    for (const auto& j : report.finetune_jobs)
      if (j.id == job_id) job = &j;
    if (job == nullptr) throw Error("backward_finetune: mask for unknown job '" + job_id + "'");
    for (std::size_t s : slots) {
      if (auto it = owner.find(s); it != owner.end()) {
        throw Error("ambiguous ownership: adapter slot " + std::to_string(s) + " masked by jobs '" + it->second +
                    "' and '" + job_id + "'");
      }
      owner[s] = job_id;
    }
  }
  for (const auto& [slot, job_id] : owner) {
    bool own = false;
    for (const auto& j : report.finetune_jobs)
      if (j.id == job_id && j.slot == slot) own = true;
    if (!own) throw Error("backward_finetune: job '" + job_id + "' masks adapter slot it does not own");
  }
  std::set<std::size_t> mask;
  for (const auto& [slot, job] : owner) mask.insert(slot);

  for (std::size_t slot : mask) {
    if (slot >= table.size() || table[slot] == nullptr) throw Error("backward_finetune: masked slot is unbound");
    AdapterGrads<T> g(cfg.n_layers);
    table[slot]->for_each_pair([&](std::size_t l, Target t, const LoraPair<T>& p) {
      g[l][static_cast<std::size_t>(t)] = LoraPair<T>{Matrix<T>(p.a.rows(), p.a.cols()), Matrix<T>(p.b.rows(), p.b.cols())};
    });
    result.emplace(slot, std::move(g));
  }

  const T eps = static_cast<T>(cfg.norm_eps);
  const SegmentMap& seg = tape.segments;
  auto linear_back = [&](const Matrix<T>& x, const Matrix<T>& dy, std::size_t l, Target t) {
    const auto slots = linear_slots(table, l, t);
    auto g = smlm_backward_lora(x, dy, w.layers[l].linear(t), seg, std::span<const LinearSlot<T>>(slots), mask,
                                detail::linear_salt(l, t));
    for (std::size_t s : mask) {
      if (!g.adapters[s]) continue;
      auto& dst = result.at(s)[l][static_cast<std::size_t>(t)];
      dst->a += g.adapters[s]->a;
      dst->b += g.adapters[s]->b;
    }
    return std::move(g.dx);
  };

  const Matrix<T> dhn = matmul(report.dlogits, w.lm_head);
  Matrix<T> dh = rms_norm_backward(tape.h_final, std::span<const T>(w.final_norm), eps, dhn);
  for (std::size_t li = cfg.n_layers; li-- > 0;) {
    const auto& lw = w.layers[li];
    const LayerTape<T>& lt = tape.layers[li];
    const Matrix<T> silu_gate = silu(lt.gate);
    const Matrix<T> d_act = linear_back(hadamard(silu_gate, lt.up), dh, li, Target::down);
    const Matrix<T> d_up = hadamard(d_act, silu_gate);
    const Matrix<T> d_gate = silu_backward(lt.gate, hadamard(d_act, lt.up));
    Matrix<T> dm_in = linear_back(lt.m_in, d_up, li, Target::up);
    dm_in += linear_back(lt.m_in, d_gate, li, Target::gate);
    Matrix<T> dh_mid = dh;
    dh_mid += rms_norm_backward(lt.h_mid, std::span<const T>(lw.mlp_norm), eps, dm_in);

    const Matrix<T> d_att = linear_back(lt.att, dh_mid, li, Target::o);
    Matrix<T> dq(tape.rows, cfg.hidden), dk(tape.rows, cfg.hidden), dv(tape.rows, cfg.hidden);
    std::size_t row = 0, seq = 0;
    for (auto [nseq, len] : tape.finetune_shapes) {
      for (std::size_t s = 0; s < nseq; ++s, ++seq, row += len) {
        Matrix<T> sq, sk, sv;
        causal_attention_backward(lt.q.slice_rows(row, len), lt.k.slice_rows(row, len), lt.v.slice_rows(row, len),
                                  lt.probs[seq], d_att.slice_rows(row, len), cfg, sq, sk, sv);
        dq.set_rows(row, sq);
        dk.set_rows(row, sk);
        dv.set_rows(row, sv);
      }
    }
    apply_rope(dq, tape.positions, cfg, /*inverse=*/true);
    apply_rope(dk, tape.positions, cfg, /*inverse=*/true);
    Matrix<T> da_in = linear_back(lt.a_in, dq, li, Target::q);
    da_in += linear_back(lt.a_in, dk, li, Target::k);
    da_in += linear_back(lt.a_in, dv, li, Target::v);
    dh = std::move(dh_mid);
    dh += rms_norm_backward(lt.h_in, std::span<const T>(lw.attn_norm), eps, da_in);
  }
  return result;
}

/// Logits rows belonging to one request.
template <typename T>
Matrix<T> request_logits(const UnifiedBatch<T>& batch, const Matrix<T>& logits, std::string_view id) {
  const RowSpan& o = batch.origin(id);
  return logits.slice_rows(o.row_start, o.row_count);
}

}  // namespace unilora
