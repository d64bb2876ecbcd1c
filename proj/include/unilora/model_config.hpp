// Copyright 2026 The unilora Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <array>
#include <cstddef>
#include <string>
#include <string_view>
#include <utility>

#include "json.hpp"
#include "unilora/tensor.hpp"

namespace unilora {

struct ModelConfig {
  std::size_t vocab_size = 256;
  std::size_t hidden = 64;
  std::size_t n_layers = 4;
  std::size_t n_heads = 4;
  std::size_t mlp_hidden = 128;
  std::size_t max_seq = 512;
  double rope_theta = 10000.0;
  double norm_eps = 1e-6;

  std::size_t head_dim() const { return hidden / n_heads; }

  void validate() const {
    if (n_heads == 0 || hidden == 0 || hidden % n_heads != 0) throw Error("ModelConfig: hidden must be divisible by n_heads");
    if (head_dim() % 2 != 0) throw Error("ModelConfig: head_dim must be even for rotary encoding");
    if (vocab_size < 4) throw Error("ModelConfig: vocab_size must be >= 4");
    if (max_seq < 2) throw Error("ModelConfig: max_seq must be >= 2");
    if (n_layers == 0 || mlp_hidden == 0) throw Error("ModelConfig: n_layers and mlp_hidden must be positive");
    if (!(rope_theta > 0.0)) throw Error("ModelConfig: rope_theta must be positive");
  }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(ModelConfig, vocab_size, hidden, n_layers, n_heads, mlp_hidden,
                                                max_seq, rope_theta, norm_eps)

/// The seven adaptable linear layers of a decoder block.
enum class Target : std::uint8_t { q = 0, k, v, o, up, gate, down };

inline constexpr std::size_t kNumTargets = 7;
inline constexpr std::array<Target, kNumTargets> kAllTargets = {Target::q,  Target::k,    Target::v,   Target::o,
                                                                  Target::up, Target::gate, Target::down};

inline constexpr std::string_view target_name(Target t) {
  constexpr std::array<std::string_view, kNumTargets> names = {"q", "k", "v", "o", "up", "gate", "down"};
  return names[static_cast<std::size_t>(t)];
}

inline Target parse_target(std::string_view s) {
  for (Target t : kAllTargets) {
    if (target_name(t) == s) return t;
  }
  throw Error("unknown LoRA target '" + std::string(s) + "'");
}

/// (in_features, out_features) of a target linear.
inline std::pair<std::size_t, std::size_t> target_shape(const ModelConfig& c, Target t) {
  switch (t) {
    case Target::q:
    case Target::k:
    case Target::v:
    case Target::o:
      return {c.hidden, c.hidden};
    case Target::up:
    case Target::gate:
      return {c.hidden, c.mlp_hidden};
    case Target::down:
      return {c.mlp_hidden, c.hidden};
  }
  throw Error("target_shape: bad target");
}

}  // namespace unilora
