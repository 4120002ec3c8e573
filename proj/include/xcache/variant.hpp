/* Copyright 2026 The xcache Authors. All Rights Reserved.

Licensed under the Apache License, Version 2.0 (the "License");
you may not use this file except in compliance with the License.
You may obtain a copy of the License at

    http://www.apache.org/licenses/LICENSE-2.0

Unless required by applicable law or agreed to in writing, software
distributed under the License is distributed on an "AS IS" BASIS,
WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
See the License for the specific language governing permissions and
limitations under the License.
==============================================================================*/

#pragma once

#include <algorithm>
#include <array>
#include <cstddef>
#include <string>
#include <string_view>

#include "xcache/errors.hpp"

namespace xcache {

// The six interchangeable cache backends.
enum class Variant {
  Fp16Kv,   // K (pre-RoPE) and V in full precision
  KiviKv,   // KIVI*: per-channel pre-RoPE K, per-token V
  XqMha,    // quantized X, K/V rematerialized through W_k, W_v
  XqGqa,    // quantized latents X U_k (per-channel), X U_v (per-token)
  XqclMha,  // quantized cross-layer deltas of X
  XqclGqa,  // quantized cross-layer deltas projected onto U_kv
};

inline constexpr std::array<Variant, 6> kAllVariants = {
    Variant::Fp16Kv, Variant::KiviKv,  Variant::XqMha,
    Variant::XqGqa,  Variant::XqclMha, Variant::XqclGqa};

inline constexpr std::string_view variant_name(Variant v) {
  switch (v) {
    case Variant::Fp16Kv: return "fp16";
    case Variant::KiviKv: return "kivi";
    case Variant::XqMha: return "xq_mha";
    case Variant::XqGqa: return "xq_gqa";
    case Variant::XqclMha: return "xqcl_mha";
    case Variant::XqclGqa: return "xqcl_gqa";
  }
  return "?";
}

inline Variant parse_variant(std::string_view name) {
  for (Variant v : kAllVariants)
    if (variant_name(v) == name) return v;
  throw ConfigError("unknown variant '" + std::string(name) +
                    "' (expected fp16|kivi|xq_mha|xq_gqa|xqcl_mha|xqcl_gqa)");
}

inline constexpr bool is_cross_layer(Variant v) {
  return v == Variant::XqclMha || v == Variant::XqclGqa;
}

inline constexpr bool is_latent(Variant v) {
  return v == Variant::XqGqa || v == Variant::XqclGqa;
}

// Per-layer bit schedule. The first `high_precision_prefix` layers are held at
// no less than `prefix_bits`; for cross-layer variants the first
// `base_layers` layers cache X directly and the last of them seeds the
// accumulator.
struct LayerPolicy {
  std::size_t high_precision_prefix = 3;
  int prefix_bits = 4;
  std::size_t base_layers = 3;

  static LayerPolicy uniform() { return {0, 16, 1}; }

  int bits_for(std::size_t layer, int bits) const {
    return layer < high_precision_prefix ? std::max(bits, prefix_bits) : bits;
  }

  bool is_delta_layer(std::size_t layer) const { return layer >= base_layers; }

  void validate() const {
    if (base_layers < 1)
      throw ConfigError("policy.base_layers must be >= 1");
    if (high_precision_prefix > 0 && base_layers > high_precision_prefix)
      throw ConfigError("policy.base_layers must not exceed high_precision_prefix");
  }
};

}  // namespace xcache
