// Copyright 2026 The unilora Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

// Optimizers, synthetic training data and the per-job trainer state used by
// the runtime's interruptible fine-tuning.

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "json.hpp"
#include "unilora/flow.hpp"
#include "unilora/mixed_lora.hpp"
#include "unilora/rng.hpp"
#include "unilora/virtual_module.hpp"

namespace unilora {

struct OptimizerConfig {
  std::string kind = "adamw";  // "adamw" | "sgd"
  double lr = 2e-5;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;

  void validate() const {
    if (kind != "adamw" && kind != "sgd") throw Error("optimizer: unknown kind '" + kind + "'");
    if (!(lr > 0.0) || !std::isfinite(lr)) throw Error("optimizer: lr must be positive");
    if (beta1 < 0.0 || beta1 >= 1.0 || beta2 < 0.0 || beta2 >= 1.0) throw Error("optimizer: betas must be in [0, 1)");
    if (!(eps > 0.0) || weight_decay < 0.0) throw Error("optimizer: bad eps or weight decay");
  }
  friend bool operator==(const OptimizerConfig&, const OptimizerConfig&) = default;
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(OptimizerConfig, kind, lr, beta1, beta2, eps, weight_decay)

template <typename T>
AdapterGrads<T> zero_grads_like(const LoraAdapter<T>& a) {
  AdapterGrads<T> g(a.n_layers());
  a.for_each_pair([&](std::size_t l, Target t, const LoraPair<T>& p) {
    g[l][static_cast<std::size_t>(t)] = LoraPair<T>{Matrix<T>(p.a.rows(), p.a.cols()), Matrix<T>(p.b.rows(), p.b.cols())};
  });
  return g;
}

template <typename T>
void add_grads(AdapterGrads<T>& dst, const AdapterGrads<T>& src) {
  if (dst.size() != src.size()) throw Error("add_grads: layer count mismatch");
  for (std::size_t l = 0; l < dst.size(); ++l) {
    for (std::size_t t = 0; t < kNumTargets; ++t) {
      if (!src[l][t]) continue;
      if (!dst[l][t]) throw Error("add_grads: target mismatch");
      dst[l][t]->a += src[l][t]->a;
      dst[l][t]->b += src[l][t]->b;
    }
  }
}

/// Flattens grads-shaped state into named tensors "<prefix>L<l>.<t>.A|B".
template <typename T>
void export_grads(const AdapterGrads<T>& g, const std::string& prefix, std::vector<std::pair<std::string, Matrix<T>>>& out) {
  for (std::size_t l = 0; l < g.size(); ++l) {
    for (Target t : kAllTargets) {
      const auto& p = g[l][static_cast<std::size_t>(t)];
      if (!p) continue;
      const std::string stem = prefix + LoraAdapter<T>::tensor_stem(l, t);
      out.emplace_back(stem + ".A", p->a);
      out.emplace_back(stem + ".B", p->b);
    }
  }
}

template <typename T>
void import_grads(AdapterGrads<T>& g, const std::string& prefix, const std::vector<std::pair<std::string, Matrix<T>>>& in) {
  auto find = [&](const std::string& n) -> const Matrix<T>& {
    for (const auto& [name, m] : in)
      if (name == n) return m;
    throw Error("training snapshot: missing tensor '" + n + "'");
  };
  for (std::size_t l = 0; l < g.size(); ++l) {
    for (Target t : kAllTargets) {
      auto& p = g[l][static_cast<std::size_t>(t)];
      if (!p) continue;
      const std::string stem = prefix + LoraAdapter<T>::tensor_stem(l, t);
      const Matrix<T>& a = find(stem + ".A");
      const Matrix<T>& b = find(stem + ".B");
      if (a.rows() != p->a.rows() || a.cols() != p->a.cols() || b.rows() != p->b.rows() || b.cols() != p->b.cols()) {
        throw Error("training snapshot: tensor shape mismatch at " + stem);
      }
      p->a = a;
      p->b = b;
    }
  }
}

/// AdamW (bias-corrected moments, decoupled weight decay) or plain SGD over
/// one adapter's tensors.
template <typename T>
class AdapterOptimizer {
 public:
  AdapterOptimizer() = default;
  AdapterOptimizer(OptimizerConfig cfg, const LoraAdapter<T>& adapter) : cfg_(std::move(cfg)) {
    cfg_.validate();
    if (cfg_.kind == "adamw") {
      m_ = zero_grads_like(adapter);
      v_ = zero_grads_like(adapter);
    }
  }

  const OptimizerConfig& config() const { return cfg_; }
  std::uint64_t steps() const { return t_; }

  void apply(LoraAdapter<T>& adapter, const AdapterGrads<T>& grads) {
    ++t_;
    const double lr = cfg_.lr;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    adapter.for_each_pair_mut([&](std::size_t l, Target t, LoraPair<T>& p) {
      const auto ti = static_cast<std::size_t>(t);
      const auto& g = grads.at(l)[ti];
      if (!g) throw Error("optimizer: missing gradient for " + LoraAdapter<T>::tensor_stem(l, t));
      if (cfg_.kind == "sgd") {
        sgd(p.a, g->a, lr);
        sgd(p.b, g->b, lr);
      } else {
        adamw(p.a, g->a, m_[l][ti]->a, v_[l][ti]->a, lr, bc1, bc2);
        adamw(p.b, g->b, m_[l][ti]->b, v_[l][ti]->b, lr, bc1, bc2);
      }
    });
  }

  void export_state(std::vector<std::pair<std::string, Matrix<T>>>& out) const {
    if (cfg_.kind != "adamw") return;
    export_grads(m_, "m/", out);
    export_grads(v_, "v/", out);
  }
  void import_state(const std::vector<std::pair<std::string, Matrix<T>>>& in, std::uint64_t steps) {
    t_ = steps;
    if (cfg_.kind != "adamw") return;
    import_grads(m_, "m/", in);
    import_grads(v_, "v/", in);
  }

 private:
  void sgd(Matrix<T>& p, const Matrix<T>& g, double lr) const {
    auto& ps = p.storage();
    const auto& gs = g.storage();
    const double wd = cfg_.weight_decay;
    for (std::size_t i = 0; i < ps.size(); ++i) {
      double x = static_cast<double>(ps[i]);
      x -= lr * (static_cast<double>(gs[i]) + wd * x);
      ps[i] = static_cast<T>(x);
    }
  }

  void adamw(Matrix<T>& p, const Matrix<T>& g, Matrix<T>& m, Matrix<T>& v, double lr, double bc1, double bc2) const {
    auto& ps = p.storage();
    auto& ms = m.storage();
    auto& vs = v.storage();
    const auto& gs = g.storage();
    for (std::size_t i = 0; i < ps.size(); ++i) {
      const double gi = static_cast<double>(gs[i]);
      const double mi = cfg_.beta1 * static_cast<double>(ms[i]) + (1.0 - cfg_.beta1) * gi;
      const double vi = cfg_.beta2 * static_cast<double>(vs[i]) + (1.0 - cfg_.beta2) * gi * gi;
      ms[i] = static_cast<T>(mi);
      vs[i] = static_cast<T>(vi);
      double x = static_cast<double>(ps[i]);
      x -= lr * cfg_.weight_decay * x;
      x -= lr * (mi / bc1) / (std::sqrt(vi / bc2) + cfg_.eps);
      ps[i] = static_cast<T>(x);
    }
  }

  OptimizerConfig cfg_;
  std::uint64_t t_ = 0;
  AdapterGrads<T> m_, v_;
};

struct FinetuneJobConfig {
  std::string job_id;
  std::string adapter_id;
  std::size_t rank = 8;
  double alpha = 16.0;
  std::vector<std::string> targets = {"q", "k", "v", "o", "up", "gate", "down"};
  std::size_t batch_size = 2;
  std::size_t seq_len = 32;
  std::size_t label_len = 16;
  std::size_t accumulation = 4;
  std::size_t epochs = 1;
  std::size_t dataset_size = 64;
  double dropout = 0.05;
  std::uint64_t seed = 1;
  double init_std = 0.02;
  OptimizerConfig optimizer;

  std::size_t micro_batch_rows() const { return batch_size * seq_len; }
  std::size_t micro_steps_per_epoch() const { return std::max<std::size_t>(1, dataset_size / batch_size); }

  void validate(const ModelConfig& m) const {
    if (job_id.empty() || adapter_id.empty()) throw Error("finetune job: job_id and adapter_id are required");
    if (rank == 0 || !(alpha > 0.0)) throw Error("finetune job '" + job_id + "': bad rank or alpha");
    if (batch_size == 0 || seq_len < 2 || seq_len > m.max_seq) throw Error("finetune job '" + job_id + "': bad shape");
    if (label_len == 0 || label_len >= seq_len) throw Error("finetune job '" + job_id + "': label_len must be in [1, seq_len)");
    if (accumulation == 0 || epochs == 0 || dataset_size == 0) throw Error("finetune job '" + job_id + "': counts must be >= 1");
    if (dropout < 0.0 || dropout >= 1.0) throw Error("finetune job '" + job_id + "': dropout must be in [0, 1)");
    TargetSet::from_names(targets);
    optimizer.validate();
  }
  friend bool operator==(const FinetuneJobConfig&, const FinetuneJobConfig&) = default;
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(FinetuneJobConfig, job_id, adapter_id, rank, alpha, targets, batch_size,
                                                seq_len, label_len, accumulation, epochs, dataset_size, dropout, seed,
                                                init_std, optimizer)

struct TrainingSample {
  std::vector<TokenId> tokens;
  std::vector<TokenId> labels;
  friend bool operator==(const TrainingSample&, const TrainingSample&) = default;
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE(TrainingSample, tokens, labels)

/// Deterministic toy sample: an arithmetic progression mod V from a seeded
/// start and stride, supervised on its last `label_len` positions.
inline TrainingSample synthetic_sample(std::uint64_t seed, std::size_t index, std::size_t seq_len, std::size_t label_len,
                                       std::size_t vocab) {
  Rng rng(mix_keys(seed, index));
  const auto start = static_cast<std::size_t>(rng.uniform_int(0, vocab - 1));
  const auto stride = static_cast<std::size_t>(rng.uniform_int(1, vocab - 1));
  TrainingSample s;
  for (std::size_t j = 0; j < seq_len; ++j) s.tokens.push_back(static_cast<TokenId>((start + j * stride) % vocab));
  s.labels = s.tokens;
  for (std::size_t j = 0; j + label_len < seq_len; ++j) s.labels[j] = kIgnoreLabel;
  return s;
}

enum class TrainerStatus { running, paused, migrating, finished };

inline std::string_view trainer_status_name(TrainerStatus s) {
  switch (s) {
    case TrainerStatus::running: return "running";
    case TrainerStatus::paused: return "paused";
    case TrainerStatus::migrating: return "migrating";
    case TrainerStatus::finished: return "finished";
  }
  return "?";
}

inline TrainerStatus parse_trainer_status(std::string_view s) {
  for (auto st : {TrainerStatus::running, TrainerStatus::paused, TrainerStatus::migrating, TrainerStatus::finished})
    if (trainer_status_name(st) == s) return st;
  throw Error("unknown trainer status '" + std::string(s) + "'");
}

/// One fine-tuning job: data cursor, accumulation partials, optimizer
/// moments and the dropout stream cursor. Optimizer state covers this job's
/// adapter tensors only.
template <typename T>
struct TrainerState {
  FinetuneJobConfig config;
  std::string vm_id;
  TrainerStatus status = TrainerStatus::running;
  std::size_t cursor = 0;  // samples consumed
  std::uint64_t micro_steps = 0;
  std::uint64_t optimizer_steps = 0;
  std::size_t accum_count = 0;
  Rng rng;  // dropout stream
  AdapterGrads<T> accum;
  AdapterOptimizer<T> optimizer;
  std::vector<TrainingSample> extra_samples;  // admitted at runtime
  std::vector<T> losses;                      // per micro-step, unscaled
  std::size_t vocab = 0;

  TrainerState() = default;
  TrainerState(FinetuneJobConfig cfg, std::string vm, const LoraAdapter<T>& adapter, std::size_t vocab_size)
      : config(std::move(cfg)),
        vm_id(std::move(vm)),
        rng(mix_keys(config.seed, 0xD509u)),
        accum(zero_grads_like(adapter)),
        optimizer(config.optimizer, adapter),
        vocab(vocab_size) {}

  std::size_t dataset_size() const { return config.dataset_size + extra_samples.size(); }
  std::uint64_t total_micro_steps() const {
    return static_cast<std::uint64_t>(config.epochs) * std::max<std::size_t>(1, dataset_size() / config.batch_size);
  }
  bool has_work() const { return status == TrainerStatus::running && micro_steps < total_micro_steps(); }

  TrainingSample sample(std::size_t index) const {
    const std::size_t i = index % dataset_size();
    if (i < config.dataset_size) return synthetic_sample(config.seed, i, config.seq_len, config.label_len, vocab);
    return extra_samples[i - config.dataset_size];
  }

  /// Next micro-batch as a fine-tune request; advances cursor and stream.
  FinetuneInput next_micro_batch(std::size_t slot) {
    FinetuneInput f;
    f.job_id = config.job_id;
    f.binding.slot = slot;
    f.batch = config.batch_size;
    f.seq_len = config.seq_len;
    f.accumulation = config.accumulation;
    for (std::size_t b = 0; b < config.batch_size; ++b) {
      const auto s = sample(cursor++);
      f.tokens.insert(f.tokens.end(), s.tokens.begin(), s.tokens.end());
      f.labels.insert(f.labels.end(), s.labels.begin(), s.labels.end());
    }
    const std::uint64_t dseed = rng.next_u64();
    if (config.dropout > 0.0) f.dropout = DropoutSpec{config.dropout, dseed};
    return f;
  }

  /// Folds one micro-step's gradients in; steps the optimizer once every
  /// `accumulation` micro-steps or on the final micro-step. Returns true
  /// when the optimizer ran.
  bool tick(LoraAdapter<T>& adapter, const AdapterGrads<T>& grads, T loss) {
    add_grads(accum, grads);
    ++micro_steps;
    ++accum_count;
    losses.push_back(loss);
    bool stepped = false;
    if (accum_count == config.accumulation || micro_steps >= total_micro_steps()) {
      optimizer.apply(adapter, accum);
      ++optimizer_steps;
      accum_count = 0;
      accum = zero_grads_like(adapter);
      stepped = true;
    }
    if (micro_steps >= total_micro_steps()) status = TrainerStatus::finished;
    return stepped;
  }

  TrainingSnapshot<T> snapshot() const {
    TrainingSnapshot<T> s;
    s.job_id = config.job_id;
    nlohmann::json losses_json = nlohmann::json::array();
    for (T l : losses) losses_json.push_back(static_cast<double>(l));
    s.metadata = {{"config", config},
                  {"vm_id", vm_id},
                  {"status", trainer_status_name(status)},
                  {"cursor", cursor},
                  {"micro_steps", micro_steps},
                  {"optimizer_steps", optimizer_steps},
                  {"optimizer_t", optimizer.steps()},
                  {"accum_count", accum_count},
                  {"rng_cursor", rng.state()},
                  {"extra_samples", extra_samples},
                  {"losses", losses_json},
                  {"vocab", vocab}};
    export_grads(accum, "acc/", s.tensors);
    optimizer.export_state(s.tensors);
    return s;
  }

  static TrainerState restore(const TrainingSnapshot<T>& s, const LoraAdapter<T>& adapter) {
    const auto& m = s.metadata;
    TrainerState st(m.at("config").template get<FinetuneJobConfig>(), m.at("vm_id").template get<std::string>(), adapter,
                    m.at("vocab").template get<std::size_t>());
    st.status = parse_trainer_status(m.at("status").template get<std::string>());
    st.cursor = m.at("cursor").template get<std::size_t>();
    st.micro_steps = m.at("micro_steps").template get<std::uint64_t>();
    st.optimizer_steps = m.at("optimizer_steps").template get<std::uint64_t>();
    st.accum_count = m.at("accum_count").template get<std::size_t>();
    st.rng.set_state(m.at("rng_cursor").template get<std::uint64_t>());
    st.extra_samples = m.at("extra_samples").template get<std::vector<TrainingSample>>();
    for (const auto& l : m.at("losses")) st.losses.push_back(static_cast<T>(l.template get<double>()));
    import_grads(st.accum, "acc/", s.tensors);
    st.optimizer.import_state(s.tensors, m.at("optimizer_t").template get<std::uint64_t>());
    return st;
  }
};

}  // namespace unilora
