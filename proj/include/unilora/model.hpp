// Copyright 2026 The unilora Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

// Llama-shaped toy causal LM: RMSNorm pre-norm, rotary attention, SwiGLU
// MLP, untied LM head, no biases. Also the per-sequence KV cache and the
// single-sequence reference paths (full forward, prefill, decode).

#include <cmath>
#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "unilora/container.hpp"
#include "unilora/mixed_lora.hpp"
#include "unilora/model_config.hpp"
#include "unilora/rng.hpp"
#include "unilora/tensor.hpp"

namespace unilora {

template <typename T>
struct LayerWeights {
  Matrix<T> wq, wk, wv, wo;  // [H, H], stored [out, in]
  Matrix<T> w_up, w_gate;    // [M, H]
  Matrix<T> w_down;          // [H, M]
  std::vector<T> attn_norm, mlp_norm;

  const Matrix<T>& linear(Target t) const {
    switch (t) {
      case Target::q: return wq;
      case Target::k: return wk;
      case Target::v: return wv;
      case Target::o: return wo;
      case Target::up: return w_up;
      case Target::gate: return w_gate;
      case Target::down: return w_down;
    }
    throw Error("linear: bad target");
  }
  Matrix<T>& linear(Target t) { return const_cast<Matrix<T>&>(std::as_const(*this).linear(t)); }
};

/// Frozen base model. Shared read-only between every virtual model; nothing
/// in the library mutates it after construction.
template <typename T>
class BaseWeights {
 public:
  ModelConfig config;
  Matrix<T> embedding;  // [V, H]
  std::vector<LayerWeights<T>> layers;
  std::vector<T> final_norm;
  Matrix<T> lm_head;  // [V, H], stored [out, in]

  static BaseWeights random(const ModelConfig& cfg, std::uint64_t seed, double init_std = 0.02) {
    cfg.validate();
    Rng rng(seed);
    auto gaussian = [&](std::size_t r, std::size_t c) {
      Matrix<T> m(r, c);
      for (auto& x : m.storage()) x = static_cast<T>(init_std * rng.normal());
      return m;
    };
    BaseWeights w;
    w.config = cfg;
    w.embedding = gaussian(cfg.vocab_size, cfg.hidden);
    for (std::size_t l = 0; l < cfg.n_layers; ++l) {
      LayerWeights<T> lw;
      lw.wq = gaussian(cfg.hidden, cfg.hidden);
      lw.wk = gaussian(cfg.hidden, cfg.hidden);
      lw.wv = gaussian(cfg.hidden, cfg.hidden);
      lw.wo = gaussian(cfg.hidden, cfg.hidden);
      lw.w_up = gaussian(cfg.mlp_hidden, cfg.hidden);
      lw.w_gate = gaussian(cfg.mlp_hidden, cfg.hidden);
      lw.w_down = gaussian(cfg.hidden, cfg.mlp_hidden);
      lw.attn_norm.assign(cfg.hidden, T(1));
      lw.mlp_norm.assign(cfg.hidden, T(1));
      w.layers.push_back(std::move(lw));
    }
    w.final_norm.assign(cfg.hidden, T(1));
    w.lm_head = gaussian(cfg.vocab_size, cfg.hidden);
    return w;
  }

  TensorContainer<T> to_container() const {
    TensorContainer<T> c;
    c.metadata = {{"kind", "base"}, {"config", config}};
    c.add("embedding", embedding);
    auto vec = [](const std::vector<T>& v) { return Matrix<T>(1, v.size(), v); };
    for (std::size_t l = 0; l < layers.size(); ++l) {
      const std::string p = "L" + std::to_string(l) + ".";
      for (Target t : kAllTargets) c.add(p + std::string(target_name(t)), layers[l].linear(t));
      c.add(p + "attn_norm", vec(layers[l].attn_norm));
      c.add(p + "mlp_norm", vec(layers[l].mlp_norm));
    }
    c.add("final_norm", vec(final_norm));
    c.add("lm_head", lm_head);
    return c;
  }

  static BaseWeights from_container(const TensorContainer<T>& c) {
    BaseWeights w;
    w.config = c.metadata.at("config").template get<ModelConfig>();
    w.config.validate();
    auto expect = [](const Matrix<T>& m, std::size_t r, std::size_t cols, const std::string& name) {
      if (m.rows() != r || m.cols() != cols) throw Error("weights: tensor '" + name + "' has wrong shape");
      return m;
    };
    const auto& cfg = w.config;
    w.embedding = expect(c.at("embedding"), cfg.vocab_size, cfg.hidden, "embedding");
    for (std::size_t l = 0; l < cfg.n_layers; ++l) {
      const std::string p = "L" + std::to_string(l) + ".";
      LayerWeights<T> lw;
      for (Target t : kAllTargets) {
        auto [in, out] = target_shape(cfg, t);
        const std::string name = p + std::string(target_name(t));
        lw.linear(t) = expect(c.at(name), out, in, name);
      }
      lw.attn_norm = expect(c.at(p + "attn_norm"), 1, cfg.hidden, p + "attn_norm").storage();
      lw.mlp_norm = expect(c.at(p + "mlp_norm"), 1, cfg.hidden, p + "mlp_norm").storage();
      w.layers.push_back(std::move(lw));
    }
    w.final_norm = expect(c.at("final_norm"), 1, cfg.hidden, "final_norm").storage();
    w.lm_head = expect(c.at("lm_head"), cfg.vocab_size, cfg.hidden, "lm_head");
    return w;
  }

  std::vector<std::byte> serialize() const { return encode_container(to_container()); }
  static BaseWeights deserialize(std::span<const std::byte> b) { return from_container(decode_container<T>(b)); }
  void save(const std::string& path) const { write_bytes(path, serialize()); }
  static BaseWeights load(const std::string& path) { return deserialize(read_bytes(path)); }

  std::size_t parameter_count() const {
    std::size_t n = embedding.size() + final_norm.size() + lm_head.size();
    for (const auto& lw : layers) {
      for (Target t : kAllTargets) n += lw.linear(t).size();
      n += lw.attn_norm.size() + lw.mlp_norm.size();
    }
    return n;
  }
  std::size_t byte_size() const { return parameter_count() * sizeof(T); }

  /// FNV-1a over every weight byte, in a fixed order.
  std::uint64_t content_hash() const {
    Fnv1a h;
    h.update_values(embedding.flat());
    for (const auto& lw : layers) {
      for (Target t : kAllTargets) h.update_values(lw.linear(t).flat());
      h.update_values(std::span<const T>(lw.attn_norm));
      h.update_values(std::span<const T>(lw.mlp_norm));
    }
    h.update_values(std::span<const T>(final_norm));
    h.update_values(lm_head.flat());
    return h.digest();
  }
};

/// Rotates each head's (i, i + d/2) pairs by pos·θ^(-2i/d). With `inverse`
/// the rotation is undone, which is also the backward of the forward map.
template <typename T>
void apply_rope(Matrix<T>& x, std::span<const std::size_t> positions, const ModelConfig& cfg, bool inverse = false) {
  if (positions.size() != x.rows() || x.cols() != cfg.hidden) throw Error("apply_rope: shape mismatch");
  const std::size_t hd = cfg.head_dim();
  const std::size_t half = hd / 2;
  std::vector<double> inv_freq(half);
  for (std::size_t i = 0; i < half; ++i)
    inv_freq[i] = std::pow(cfg.rope_theta, -2.0 * static_cast<double>(i) / static_cast<double>(hd));
  std::vector<T> cs(half), sn(half);
  for (std::size_t r = 0; r < x.rows(); ++r) {
    for (std::size_t i = 0; i < half; ++i) {
      const double ang = static_cast<double>(positions[r]) * inv_freq[i];
      cs[i] = static_cast<T>(std::cos(ang));
      sn[i] = static_cast<T>(inverse ? -std::sin(ang) : std::sin(ang));
    }
    T* row = x.row(r);
    for (std::size_t h = 0; h < cfg.n_heads; ++h) {
      T* head = row + h * hd;
      for (std::size_t i = 0; i < half; ++i) {
        const T a = head[i];
        const T b = head[i + half];
        head[i] = a * cs[i] - b * sn[i];
        head[i + half] = a * sn[i] + b * cs[i];
      }
    }
  }
}

/// Cached keys/values of one sequence, one [len, H] block per layer.
template <typename T>
class KvCache {
 public:
  KvCache() = default;
  explicit KvCache(const ModelConfig& cfg)
      : n_layers_(cfg.n_layers), width_(cfg.hidden), max_seq_(cfg.max_seq), keys_(cfg.n_layers), values_(cfg.n_layers) {}

  std::size_t length() const { return length_; }
  std::size_t max_seq() const { return max_seq_; }
  bool empty() const { return length_ == 0; }
  std::size_t n_layers() const { return n_layers_; }

  /// Throws unless `n` more tokens fit.
  void check_room(std::size_t n) const {
    if (length_ + n > max_seq_) {
      throw Error("KV cache overflow: length " + std::to_string(length_) + " + " + std::to_string(n) + " > max_seq " +
                  std::to_string(max_seq_));
    }
  }

  /// Stages rows [length, length + n) of one layer; visible via keys()/values()
  /// immediately, counted in length() after commit().
  void append(std::size_t layer, const Matrix<T>& k, std::size_t k_row, const Matrix<T>& v, std::size_t v_row,
              std::size_t n) {
    if (layer >= n_layers_) throw Error("KvCache::append: bad layer");
    if (k.cols() != width_ || v.cols() != width_) throw Error("KvCache::append: width mismatch");
    auto& kl = keys_[layer];
    auto& vl = values_[layer];
    if (kl.size() / width_ + n > max_seq_) throw Error("KV cache overflow at layer " + std::to_string(layer));
    kl.insert(kl.end(), k.row(k_row), k.row(k_row) + n * width_);
    vl.insert(vl.end(), v.row(v_row), v.row(v_row) + n * width_);
  }

  void commit(std::size_t n) {
    check_room(n);
    for (std::size_t l = 0; l < n_layers_; ++l) {
      if (keys_[l].size() != (length_ + n) * width_) throw Error("KvCache::commit: layer " + std::to_string(l) + " not staged");
    }
    length_ += n;
  }

  /// Drops rows staged since the last commit.
  void discard_staged() {
    for (std::size_t l = 0; l < n_layers_; ++l) {
      keys_[l].resize(length_ * width_);
      values_[l].resize(length_ * width_);
    }
  }

  /// Rows currently stored for a layer (committed + staged).
  std::size_t layer_rows(std::size_t layer) const { return keys_[layer].size() / width_; }
  const T* keys(std::size_t layer) const { return keys_[layer].data(); }
  const T* values(std::size_t layer) const { return values_[layer].data(); }

  std::size_t byte_size() const {
    std::size_t n = 0;
    for (std::size_t l = 0; l < n_layers_; ++l) n += (keys_[l].size() + values_[l].size()) * sizeof(T);
    return n;
  }

 private:
  std::size_t n_layers_ = 0;
  std::size_t width_ = 0;
  std::size_t max_seq_ = 0;
  std::size_t length_ = 0;
  std::vector<std::vector<T>> keys_;
  std::vector<std::vector<T>> values_;
};

/// Multi-head causal attention for `n` query rows at absolute positions
/// pos0..pos0+n-1 over key/value rows 0..pos0+n-1 (row width H). Writes
/// into `out` (n × H). When `probs` is given it receives one [n, pos0+n]
/// matrix per head, zero above the causal boundary.
template <typename T>
void causal_attention(const T* q, std::size_t n, const T* k, const T* v, std::size_t pos0, const ModelConfig& cfg,
                      T* out, std::vector<Matrix<T>>* probs = nullptr) {
  const std::size_t hd = cfg.head_dim();
  const std::size_t width = cfg.hidden;
  const std::size_t m = pos0 + n;
  const T scale = T(1) / std::sqrt(static_cast<T>(hd));
  if (probs) probs->assign(cfg.n_heads, Matrix<T>(n, m));
  std::vector<T> scores(m);
  for (std::size_t h = 0; h < cfg.n_heads; ++h) {
    for (std::size_t i = 0; i < n; ++i) {
      const T* qi = q + i * width + h * hd;
      const std::size_t len = pos0 + i + 1;
      for (std::size_t j = 0; j < len; ++j) scores[j] = detail::dot(qi, k + j * width + h * hd, hd);
      softmax_row_inplace(scores.data(), len, scale);
      T* oi = out + i * width + h * hd;
      std::fill(oi, oi + hd, T(0));
      for (std::size_t j = 0; j < len; ++j) detail::axpy(scores[j], v + j * width + h * hd, oi, hd);
      if (probs) std::copy(scores.begin(), scores.begin() + len, (*probs)[h].row(i));
    }
  }
}

/// Gradients of causal_attention for a self-contained sequence (pos0 = 0).
/// q, k, v are [S, H]; probs as produced by the forward; dout is [S, H].
template <typename T>
void causal_attention_backward(const Matrix<T>& q, const Matrix<T>& k, const Matrix<T>& v,
                               const std::vector<Matrix<T>>& probs, const Matrix<T>& dout, const ModelConfig& cfg,
                               Matrix<T>& dq, Matrix<T>& dk, Matrix<T>& dv) {
  const std::size_t s = q.rows();
  const std::size_t hd = cfg.head_dim();
  const T scale = T(1) / std::sqrt(static_cast<T>(hd));
  dq = Matrix<T>(s, cfg.hidden);
  dk = Matrix<T>(s, cfg.hidden);
  dv = Matrix<T>(s, cfg.hidden);
  auto head_block = [&](const Matrix<T>& src, std::size_t h) {
    Matrix<T> b(s, hd);
    for (std::size_t i = 0; i < s; ++i) std::copy(src.row(i) + h * hd, src.row(i) + (h + 1) * hd, b.row(i));
    return b;
  };
  auto scatter = [&](Matrix<T>& dst, const Matrix<T>& b, std::size_t h) {
    for (std::size_t i = 0; i < s; ++i) std::copy(b.row(i), b.row(i) + hd, dst.row(i) + h * hd);
  };
  for (std::size_t h = 0; h < cfg.n_heads; ++h) {
    const Matrix<T> qh = head_block(q, h), kh = head_block(k, h), vh = head_block(v, h);
    const Matrix<T> doh = head_block(dout, h);
    const Matrix<T>& p = probs[h];
    const Matrix<T> dvh = matmul_tn(p, doh);
    const Matrix<T> dp = matmul_nt(doh, vh);
    const Matrix<T> dscores = softmax_rows_backward(p, dp, scale);
    scatter(dq, matmul(dscores, kh), h);
    scatter(dk, matmul_tn(dscores, qh), h);
    scatter(dv, dvh, h);
  }
}

/// Single-adapter binding used by the reference paths.
template <typename T>
struct AdapterView {
  const LoraAdapter<T>* adapter = nullptr;
  double dynamic_scale = 1.0;
};

namespace detail {

template <typename T>
Matrix<T> reference_linear(const Matrix<T>& x, const BaseWeights<T>& w, std::size_t layer, Target t,
                           const AdapterView<T>& view) {
  Matrix<T> y = matmul_nt(x, w.layers[layer].linear(t));
  if (view.adapter == nullptr) return y;
  const LoraPair<T>* p = view.adapter->pair(layer, t);
  if (p == nullptr) return y;
  const Matrix<T> delta = matmul_nt(matmul_nt(x, p->a), p->b);
  const T scale = view.adapter->scaling() * static_cast<T>(view.dynamic_scale);
  for (std::size_t i = 0; i < y.size(); ++i) y.storage()[i] += scale * delta.storage()[i];
  return y;
}

template <typename T>
Matrix<T> mlp_block(const Matrix<T>& h, const BaseWeights<T>& w, std::size_t l, const AdapterView<T>& view) {
  const auto& lw = w.layers[l];
  const T eps = static_cast<T>(w.config.norm_eps);
  const Matrix<T> m_in = rms_norm(h, std::span<const T>(lw.mlp_norm), eps);
  const Matrix<T> up = reference_linear(m_in, w, l, Target::up, view);
  const Matrix<T> gate = reference_linear(m_in, w, l, Target::gate, view);
  return reference_linear(hadamard(silu(gate), up), w, l, Target::down, view);
}

template <typename T>
Matrix<T> lm_logits(const Matrix<T>& h, const BaseWeights<T>& w) {
  const Matrix<T> hn = rms_norm(h, std::span<const T>(w.final_norm), static_cast<T>(w.config.norm_eps));
  return matmul_nt(hn, w.lm_head);
}

// Runs new tokens through the model, reading and extending the cache.
template <typename T>
Matrix<T> extend_sequence(const BaseWeights<T>& w, std::span<const TokenId> tokens, KvCache<T>& cache,
                          const AdapterView<T>& view) {
  const auto& cfg = w.config;
  const std::size_t n = tokens.size();
  const std::size_t pos0 = cache.length();
  cache.check_room(n);
  std::vector<std::size_t> positions(n);
  for (std::size_t i = 0; i < n; ++i) positions[i] = pos0 + i;
  const T eps = static_cast<T>(cfg.norm_eps);
  Matrix<T> h = embedding(w.embedding, tokens);
  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    const auto& lw = w.layers[l];
    const Matrix<T> a_in = rms_norm(h, std::span<const T>(lw.attn_norm), eps);
    Matrix<T> q = reference_linear(a_in, w, l, Target::q, view);
    Matrix<T> k = reference_linear(a_in, w, l, Target::k, view);
    const Matrix<T> v = reference_linear(a_in, w, l, Target::v, view);
    apply_rope(q, positions, cfg);
    apply_rope(k, positions, cfg);
    cache.append(l, k, 0, v, 0, n);
    Matrix<T> att(n, cfg.hidden);
    causal_attention(q.row(0), n, cache.keys(l), cache.values(l), pos0, cfg, att.row(0));
    h += reference_linear(att, w, l, Target::o, view);
    h += mlp_block(h, w, l, view);
  }
  cache.commit(n);
  return lm_logits(h, w);
}

}  // namespace detail

/// Cache-free causal forward over a whole sequence. Scores are formed as a
/// full S×S product and each row is normalized over its causal prefix.
template <typename T>
Matrix<T> forward_full(const BaseWeights<T>& w, std::span<const TokenId> tokens, const AdapterView<T>& view = {}) {
  const auto& cfg = w.config;
  const std::size_t s = tokens.size();
  if (s == 0) throw Error("forward_full: empty sequence");
  if (s > cfg.max_seq) throw Error("forward_full: sequence length " + std::to_string(s) + " exceeds max_seq");
  if (view.adapter) view.adapter->check_compatible(cfg);
  std::vector<std::size_t> positions(s);
  for (std::size_t i = 0; i < s; ++i) positions[i] = i;
  const std::size_t hd = cfg.head_dim();
  const T scale = T(1) / std::sqrt(static_cast<T>(hd));
  const T eps = static_cast<T>(cfg.norm_eps);

  Matrix<T> h = embedding(w.embedding, tokens);
  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    const auto& lw = w.layers[l];
    const Matrix<T> a_in = rms_norm(h, std::span<const T>(lw.attn_norm), eps);
    Matrix<T> q = detail::reference_linear(a_in, w, l, Target::q, view);
    Matrix<T> k = detail::reference_linear(a_in, w, l, Target::k, view);
    const Matrix<T> v = detail::reference_linear(a_in, w, l, Target::v, view);
    apply_rope(q, positions, cfg);
    apply_rope(k, positions, cfg);
    Matrix<T> att(s, cfg.hidden);
    for (std::size_t hh = 0; hh < cfg.n_heads; ++hh) {
      Matrix<T> qh(s, hd), kh(s, hd), vh(s, hd);
      for (std::size_t i = 0; i < s; ++i) {
        std::copy(q.row(i) + hh * hd, q.row(i) + (hh + 1) * hd, qh.row(i));
        std::copy(k.row(i) + hh * hd, k.row(i) + (hh + 1) * hd, kh.row(i));
        std::copy(v.row(i) + hh * hd, v.row(i) + (hh + 1) * hd, vh.row(i));
      }
      const Matrix<T> scores = matmul_nt(qh, kh);
      for (std::size_t i = 0; i < s; ++i) {
        Matrix<T> prefix(1, i + 1, std::vector<T>(scores.row(i), scores.row(i) + i + 1));
        const Matrix<T> p = softmax_rows(prefix, scale);
        const Matrix<T> o = matmul(p, vh.slice_rows(0, i + 1));
        std::copy(o.row(0), o.row(0) + hd, att.row(i) + hh * hd);
      }
    }
    h += detail::reference_linear(att, w, l, Target::o, view);
    h += detail::mlp_block(h, w, l, view);
  }
  return detail::lm_logits(h, w);
}

/// Fills an empty cache with the prompt and returns the last row's logits.
template <typename T>
std::vector<T> prefill(const BaseWeights<T>& w, std::span<const TokenId> tokens, KvCache<T>& cache,
                       const AdapterView<T>& view = {}) {
  if (!cache.empty()) throw Error("prefill: cache is not empty");
  if (tokens.empty()) throw Error("prefill: empty prompt");
  if (view.adapter) view.adapter->check_compatible(w.config);
  const Matrix<T> logits = detail::extend_sequence(w, tokens, cache, view);
  const T* last = logits.row(logits.rows() - 1);
  return std::vector<T>(last, last + logits.cols());
}

/// Appends one token to a primed cache and returns next-token logits.
template <typename T>
std::vector<T> decode_step(const BaseWeights<T>& w, TokenId token, KvCache<T>& cache, const AdapterView<T>& view = {}) {
  if (cache.empty()) throw Error("decode_step: cache is empty (prefill first)");
  const TokenId one[1] = {token};
  const Matrix<T> logits = detail::extend_sequence(w, std::span<const TokenId>(one, 1), cache, view);
  return std::vector<T>(logits.row(0), logits.row(0) + logits.cols());
}

}  // namespace unilora
