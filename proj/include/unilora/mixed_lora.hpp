// Copyright 2026 The unilora Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

// LoRA adapters stored per linear layer, the row segmentation of a packed
// batch, and segmented multi-LoRA multiplication (SMLM) with its backward.

#include <cmath>
#include <cstdint>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "unilora/container.hpp"
#include "unilora/model_config.hpp"
#include "unilora/rng.hpp"
#include "unilora/tensor.hpp"

namespace unilora {

class TargetSet {
 public:
  constexpr TargetSet() = default;
  constexpr TargetSet(std::initializer_list<Target> ts) {
    for (Target t : ts) insert(t);
  }
  static constexpr TargetSet all() { return TargetSet(0x7F); }
  /// The MLP-only set {up, gate, down}.
  static constexpr TargetSet mlp() { return TargetSet{Target::up, Target::gate, Target::down}; }

  constexpr void insert(Target t) { bits_ |= bit(t); }
  constexpr bool contains(Target t) const { return (bits_ & bit(t)) != 0; }
  constexpr bool empty() const { return bits_ == 0; }
  constexpr std::uint8_t bits() const { return bits_; }

  std::vector<std::string> names() const {
    std::vector<std::string> out;
    for (Target t : kAllTargets)
      if (contains(t)) out.emplace_back(target_name(t));
    return out;
  }
  static TargetSet from_names(const std::vector<std::string>& names) {
    TargetSet s;
    for (const auto& n : names) s.insert(parse_target(n));
    return s;
  }

  friend constexpr bool operator==(TargetSet, TargetSet) = default;

 private:
  constexpr explicit TargetSet(std::uint8_t b) : bits_(b) {}
  static constexpr std::uint8_t bit(Target t) { return static_cast<std::uint8_t>(1u << static_cast<unsigned>(t)); }
  std::uint8_t bits_ = 0;
};

/// Low-rank pair for one linear: delta(x) = (x·Aᵀ)·Bᵀ with A [r, in], B [out, r].
template <typename T>
struct LoraPair {
  Matrix<T> a;
  Matrix<T> b;

  std::size_t rank() const { return a.rows(); }
  std::size_t in_features() const { return a.cols(); }
  std::size_t out_features() const { return b.rows(); }
  friend bool operator==(const LoraPair&, const LoraPair&) = default;
};

template <typename T>
using LayerPairs = std::array<std::optional<LoraPair<T>>, kNumTargets>;

template <typename T>
class LoraAdapter {
 public:
  LoraAdapter() = default;
  LoraAdapter(std::string id, std::size_t rank, double alpha, std::vector<LayerPairs<T>> layers, bool baked = false)
      : id_(std::move(id)), rank_(rank), alpha_(alpha), baked_(baked), layers_(std::move(layers)) {
    if (rank_ == 0) throw Error("LoraAdapter: rank must be >= 1");
    if (!std::isfinite(alpha_) || alpha_ <= 0.0) throw Error("LoraAdapter: alpha must be positive");
    for (const auto& layer : layers_) {
      for (const auto& p : layer) {
        if (!p) continue;
        if (p->a.rows() != rank_ || p->b.cols() != rank_) throw Error("LoraAdapter '" + id_ + "': pair rank mismatch");
      }
    }
  }

  /// Standard fine-tuning init: A ~ N(0, init_std²), B = 0.
  static LoraAdapter for_training(std::string id, const ModelConfig& cfg, std::size_t rank, double alpha,
                                  TargetSet targets, std::uint64_t seed, double init_std = 0.02) {
    return make(std::move(id), cfg, rank, alpha, targets, seed, init_std, 0.0);
  }

  /// Both factors Gaussian. Used for inference adapters and tests.
  static LoraAdapter random(std::string id, const ModelConfig& cfg, std::size_t rank, double alpha, TargetSet targets,
                            std::uint64_t seed, double std_a = 0.02, double std_b = 0.02) {
    return make(std::move(id), cfg, rank, alpha, targets, seed, std_a, std_b);
  }

  const std::string& id() const { return id_; }
  void set_id(std::string id) { id_ = std::move(id); }
  std::size_t rank() const { return rank_; }
  double alpha() const { return alpha_; }
  bool baked() const { return baked_; }
  std::size_t n_layers() const { return layers_.size(); }

  double nominal_scaling() const { return alpha_ / static_cast<double>(rank_); }
  /// Scale applied at runtime: 1 once the static scale is folded into B.
  T scaling() const { return baked_ ? T(1) : static_cast<T>(nominal_scaling()); }

  TargetSet targets() const {
    TargetSet s;
    for (const auto& layer : layers_)
      for (Target t : kAllTargets)
        if (layer[static_cast<std::size_t>(t)]) s.insert(t);
    return s;
  }

  const LoraPair<T>* pair(std::size_t layer, Target t) const {
    if (layer >= layers_.size()) return nullptr;
    const auto& p = layers_[layer][static_cast<std::size_t>(t)];
    return p ? &*p : nullptr;
  }
  LoraPair<T>* mutable_pair(std::size_t layer, Target t) {
    if (layer >= layers_.size()) return nullptr;
    auto& p = layers_[layer][static_cast<std::size_t>(t)];
    return p ? &*p : nullptr;
  }
  const std::vector<LayerPairs<T>>& layers() const { return layers_; }

  template <typename Fn>
  void for_each_pair(Fn&& fn) const {
    for (std::size_t l = 0; l < layers_.size(); ++l)
      for (Target t : kAllTargets)
        if (const auto* p = pair(l, t)) fn(l, t, *p);
  }
  template <typename Fn>
  void for_each_pair_mut(Fn&& fn) {
    for (std::size_t l = 0; l < layers_.size(); ++l)
      for (Target t : kAllTargets)
        if (auto* p = mutable_pair(l, t)) fn(l, t, *p);
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for_each_pair([&](std::size_t, Target, const LoraPair<T>& p) { n += p.a.size() + p.b.size(); });
    return n;
  }
  std::size_t byte_size() const { return parameter_count() * sizeof(T); }

  /// Throws unless every pair fits the base model's linear shapes.
  void check_compatible(const ModelConfig& cfg) const {
    if (layers_.size() != cfg.n_layers) {
      throw Error("adapter '" + id_ + "' has " + std::to_string(layers_.size()) + " layers, base has " +
                  std::to_string(cfg.n_layers));
    }
    for_each_pair([&](std::size_t l, Target t, const LoraPair<T>& p) {
      auto [in, out] = target_shape(cfg, t);
      if (p.a.cols() != in || p.b.rows() != out) {
        throw Error("adapter '" + id_ + "': shape mismatch at layer " + std::to_string(l) + " target " +
                    std::string(target_name(t)));
      }
    });
  }

  /// Folds the static scale into B. Throws if already folded.
  void bake() {
    if (baked_) throw Error("adapter '" + id_ + "' is already baked");
    const T s = static_cast<T>(nominal_scaling());
    for_each_pair_mut([&](std::size_t, Target, LoraPair<T>& p) { p.b *= s; });
    baked_ = true;
  }

  nlohmann::json metadata() const {
    return {{"adapter_id", id_}, {"rank", rank_},     {"alpha", alpha_},
            {"baked", baked_},   {"targets", targets().names()}, {"n_layers", layers_.size()}};
  }

  /// Appends "<prefix>L<l>.<target>.A|B" tensors.
  void export_tensors(TensorContainer<T>& c, const std::string& prefix = {}) const {
    for_each_pair([&](std::size_t l, Target t, const LoraPair<T>& p) {
      const std::string base = prefix + tensor_stem(l, t);
      c.add(base + ".A", p.a);
      c.add(base + ".B", p.b);
    });
  }

  static LoraAdapter import_tensors(const TensorContainer<T>& c, const nlohmann::json& meta,
                                    const std::string& prefix = {}) {
    const auto n_layers = meta.at("n_layers").get<std::size_t>();
    std::vector<LayerPairs<T>> layers(n_layers);
    const auto targets = TargetSet::from_names(meta.at("targets").get<std::vector<std::string>>());
    for (std::size_t l = 0; l < n_layers; ++l) {
      for (Target t : kAllTargets) {
        if (!targets.contains(t)) continue;
        const std::string base = prefix + tensor_stem(l, t);
        const auto* a = c.find(base + ".A");
        const auto* b = c.find(base + ".B");
        if ((a == nullptr) != (b == nullptr)) throw Error("adapter container: unpaired tensor " + base);
        if (a) layers[l][static_cast<std::size_t>(t)] = LoraPair<T>{*a, *b};
      }
    }
    return LoraAdapter(meta.at("adapter_id").get<std::string>(), meta.at("rank").get<std::size_t>(),
                       meta.at("alpha").get<double>(), std::move(layers), meta.at("baked").get<bool>());
  }

  std::vector<std::byte> serialize() const {
    TensorContainer<T> c;
    export_tensors(c);
    c.metadata = metadata();
    return encode_container(c);
  }

  static LoraAdapter deserialize(std::span<const std::byte> bytes) {
    auto c = decode_container<T>(bytes);
    return import_tensors(c, c.metadata);
  }

  static std::string tensor_stem(std::size_t layer, Target t) {
    return "L" + std::to_string(layer) + "." + std::string(target_name(t));
  }

  friend bool operator==(const LoraAdapter&, const LoraAdapter&) = default;

 private:
  static LoraAdapter make(std::string id, const ModelConfig& cfg, std::size_t rank, double alpha, TargetSet targets,
                          std::uint64_t seed, double std_a, double std_b) {
    if (targets.empty()) throw Error("LoraAdapter: empty target set");
    Rng rng(seed);
    std::vector<LayerPairs<T>> layers(cfg.n_layers);
    for (std::size_t l = 0; l < cfg.n_layers; ++l) {
      for (Target t : kAllTargets) {
        if (!targets.contains(t)) continue;
        auto [in, out] = target_shape(cfg, t);
        LoraPair<T> p{Matrix<T>(rank, in), Matrix<T>(out, rank)};
        for (auto& x : p.a.storage()) x = static_cast<T>(std_a * rng.normal());
        for (auto& x : p.b.storage()) x = static_cast<T>(std_b == 0.0 ? 0.0 : std_b * rng.normal());
        layers[l][static_cast<std::size_t>(t)] = std::move(p);
      }
    }
    return LoraAdapter(std::move(id), rank, alpha, std::move(layers));
  }

  std::string id_;
  std::size_t rank_ = 1;
  double alpha_ = 1.0;
  bool baked_ = false;
  std::vector<LayerPairs<T>> layers_;
};

/// Returns a copy with the static scale folded into every B.
template <typename T>
LoraAdapter<T> bake_static_scaling(LoraAdapter<T> adapter) {
  adapter.bake();
  return adapter;
}

/// Inverted dropout on the LoRA input, fine-tune rows only. The keep mask is
/// a pure function of (seed, salt, row within segment, column).
struct DropoutSpec {
  double p = 0.0;
  std::uint64_t seed = 0;

  bool active() const { return p > 0.0; }
};

/// Row span of a packed batch bound to one adapter slot (or base only).
struct Segment {
  std::size_t row_start = 0;
  std::size_t row_count = 0;
  std::optional<std::size_t> slot;
  double dynamic_scale = 1.0;
  DropoutSpec dropout;
};

class SegmentMap {
 public:
  SegmentMap() = default;
  explicit SegmentMap(std::vector<Segment> segments) : segments_(std::move(segments)) {
    std::size_t next = 0;
    for (const auto& s : segments_) {
      if (s.row_start != next) throw Error("SegmentMap: segments must be contiguous and ordered");
      if (s.row_count == 0) throw Error("SegmentMap: empty segment");
      if (!(s.dynamic_scale > 0.0) || !std::isfinite(s.dynamic_scale)) throw Error("SegmentMap: bad dynamic scale");
      if (s.dropout.p < 0.0 || s.dropout.p >= 1.0) throw Error("SegmentMap: dropout must be in [0, 1)");
      next += s.row_count;
    }
    total_rows_ = next;
  }

  /// One segment per maximal run of equal slots.
  static SegmentMap from_row_slots(const std::vector<std::optional<std::size_t>>& slots) {
    std::vector<Segment> segs;
    for (std::size_t i = 0; i < slots.size(); ++i) {
      if (!segs.empty() && segs.back().slot == slots[i]) {
        ++segs.back().row_count;
      } else {
        segs.push_back(Segment{i, 1, slots[i], 1.0, {}});
      }
    }
    return SegmentMap(std::move(segs));
  }

  const std::vector<Segment>& segments() const { return segments_; }
  std::size_t total_rows() const { return total_rows_; }

  /// Segments entirely inside [0, rows), for prefix-restricted passes.
  SegmentMap prefix(std::size_t rows) const {
    std::vector<Segment> out;
    for (const auto& s : segments_) {
      if (s.row_start + s.row_count <= rows) out.push_back(s);
      else if (s.row_start < rows) throw Error("SegmentMap::prefix: boundary splits a segment");
    }
    return SegmentMap(std::move(out));
  }

 private:
  std::vector<Segment> segments_;
  std::size_t total_rows_ = 0;
};

/// One adapter slot as seen by a single linear layer.
template <typename T>
struct LinearSlot {
  const LoraPair<T>* pair = nullptr;  // null: adapter does not target this linear
  T scale = T(1);
};

/// Adapter table indexed by slot; a slot may be null (unused).
template <typename T>
using AdapterTable = std::vector<const LoraAdapter<T>*>;

template <typename T>
std::vector<LinearSlot<T>> linear_slots(const AdapterTable<T>& table, std::size_t layer, Target t) {
  std::vector<LinearSlot<T>> out(table.size());
  for (std::size_t s = 0; s < table.size(); ++s) {
    if (table[s] == nullptr) continue;
    out[s] = LinearSlot<T>{table[s]->pair(layer, t), table[s]->scaling()};
  }
  return out;
}

/// Request-scoped binding of rows to an adapter slot.
struct AdapterBinding {
  std::optional<std::size_t> slot;
  double dynamic_scale = 1.0;
};

/// Multiplies the effective adapter scale for this request's rows.
inline void apply_dynamic_scale(AdapterBinding& binding, double scale) {
  if (!std::isfinite(scale) || scale <= 0.0) throw Error("dynamic scale must be finite and > 0");
  binding.dynamic_scale *= scale;
}

namespace detail {

inline std::uint64_t dropout_key(const DropoutSpec& d, std::uint64_t salt, std::size_t row, std::size_t col) {
  return mix_keys(mix_keys(d.seed, salt), (static_cast<std::uint64_t>(row) << 32) ^ col);
}

template <typename T>
Matrix<T> dropout_rows(const Matrix<T>& x, std::size_t start, std::size_t count, const DropoutSpec& d,
                       std::uint64_t salt) {
  Matrix<T> xs = x.slice_rows(start, count);
  if (!d.active()) return xs;
  const T keep_scale = static_cast<T>(1.0 / (1.0 - d.p));
  for (std::size_t i = 0; i < count; ++i)
    for (std::size_t j = 0; j < xs.cols(); ++j)
      xs(i, j) = to_unit(dropout_key(d, salt, i, j)) < d.p ? T(0) : xs(i, j) * keep_scale;
  return xs;
}

template <typename T>
void check_slot(const SegmentMap& seg, const Segment& s, std::size_t n_slots) {
  if (s.slot && *s.slot >= n_slots) {
    throw Error("smlm: adapter slot " + std::to_string(*s.slot) + " out of range (" + std::to_string(n_slots) +
                " slots)");
  }
  (void)seg;
}

template <typename T>
void check_pair(const LoraPair<T>& p, std::size_t in, std::size_t out) {
  if (p.a.cols() != in || p.b.rows() != out || p.a.rows() != p.b.cols()) throw Error("smlm: adapter shape mismatch");
}

}  // namespace detail

/// Y = X·Wᵀ over all rows at once, then each adapter segment adds
/// scale·(X_s·Aᵀ)·Bᵀ using the low-rank two-step order.
template <typename T>
Matrix<T> smlm_forward(const Matrix<T>& x, const Matrix<T>& base_w, const SegmentMap& seg,
                       std::span<const LinearSlot<T>> slots, std::uint64_t dropout_salt = 0) {
  if (x.cols() != base_w.cols()) throw Error("smlm_forward: input width != base in_features");
  if (seg.total_rows() != x.rows()) throw Error("smlm_forward: segment map does not cover the batch");
  Matrix<T> y = matmul_nt(x, base_w);
  const std::size_t out = base_w.rows();
  for (const Segment& s : seg.segments()) {
    detail::check_slot<T>(seg, s, slots.size());
    if (!s.slot) continue;
    const LinearSlot<T>& slot = slots[*s.slot];
    if (slot.pair == nullptr) continue;
    detail::check_pair(*slot.pair, x.cols(), out);
    const Matrix<T> xs = detail::dropout_rows(x, s.row_start, s.row_count, s.dropout, dropout_salt);
    const Matrix<T> down = matmul_nt(xs, slot.pair->a);
    const Matrix<T> delta = matmul_nt(down, slot.pair->b);
    const T scale = slot.scale * static_cast<T>(s.dynamic_scale);
    for (std::size_t i = 0; i < s.row_count; ++i) detail::axpy(scale, delta.row(i), y.row(s.row_start + i), out);
  }
  ensure_finite(y, "smlm_forward");
  return y;
}

template <typename T>
struct SmlmGrads {
  Matrix<T> dx;
  /// Indexed by slot; set for every slot whose pair this linear uses.
  std::vector<std::optional<LoraPair<T>>> adapters;
};

/// Backward of smlm_forward. dX always flows through every segment; only
/// slots in `grad_mask` accumulate dA/dB, the rest stay exactly zero.
template <typename T>
SmlmGrads<T> smlm_backward_lora(const Matrix<T>& x, const Matrix<T>& dy, const Matrix<T>& base_w,
                                const SegmentMap& seg, std::span<const LinearSlot<T>> slots,
                                const std::set<std::size_t>& grad_mask, std::uint64_t dropout_salt = 0) {
  if (x.rows() != dy.rows() || dy.cols() != base_w.rows() || x.cols() != base_w.cols()) {
    throw Error("smlm_backward_lora: shape mismatch");
  }
  if (seg.total_rows() != x.rows()) throw Error("smlm_backward_lora: segment map does not cover the batch");
  SmlmGrads<T> g{matmul(dy, base_w), std::vector<std::optional<LoraPair<T>>>(slots.size())};
  const std::size_t in = x.cols();
  for (const Segment& s : seg.segments()) {
    detail::check_slot<T>(seg, s, slots.size());
    if (!s.slot) continue;
    const LinearSlot<T>& slot = slots[*s.slot];
    if (slot.pair == nullptr) continue;
    const LoraPair<T>& p = *slot.pair;
    detail::check_pair(p, in, base_w.rows());
    auto& acc = g.adapters[*s.slot];
    if (!acc) acc = LoraPair<T>{Matrix<T>(p.a.rows(), p.a.cols()), Matrix<T>(p.b.rows(), p.b.cols())};

    const T scale = slot.scale * static_cast<T>(s.dynamic_scale);
    const Matrix<T> dys = dy.slice_rows(s.row_start, s.row_count);
    const Matrix<T> up = matmul(dys, p.b);  // [n, r]
    Matrix<T> dxs = matmul(up, p.a);        // [n, in]
    if (s.dropout.active()) {
      const T keep_scale = static_cast<T>(1.0 / (1.0 - s.dropout.p));
      for (std::size_t i = 0; i < s.row_count; ++i)
        for (std::size_t j = 0; j < in; ++j)
          dxs(i, j) = to_unit(detail::dropout_key(s.dropout, dropout_salt, i, j)) < s.dropout.p ? T(0)
                                                                                                 : dxs(i, j) * keep_scale;
    }
    for (std::size_t i = 0; i < s.row_count; ++i) detail::axpy(scale, dxs.row(i), g.dx.row(s.row_start + i), in);

    if (!grad_mask.contains(*s.slot)) continue;
    const Matrix<T> xs = detail::dropout_rows(x, s.row_start, s.row_count, s.dropout, dropout_salt);
    const Matrix<T> down = matmul_nt(xs, p.a);  // [n, r]
    Matrix<T> db = matmul_tn(dys, down);        // [out, r]
    Matrix<T> da = matmul_tn(up, xs);           // [r, in]
    db *= scale;
    da *= scale;
    acc->a += da;
    acc->b += db;
  }
  return g;
}

}  // namespace unilora
