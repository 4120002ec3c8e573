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

#include <cstddef>
#include <optional>
#include <string>
#include <vector>

#include "xcache/errors.hpp"
#include "xcache/quant.hpp"
#include "xcache/variant.hpp"

// Analytical roofline and memory model for the cache backends. All FLOP and
// byte counts are per layer for one decode step over a context of l tokens.
namespace xcache::sysmodel {

struct HardwareProfile {
  double peak_flops = 0.0;  // FLOP/s
  double mem_bw = 0.0;      // bytes/s

  double ridge_point() const {
    if (!(mem_bw > 0.0)) throw ConfigError("hardware mem_bw must be > 0");
    return peak_flops / mem_bw;
  }

  static HardwareProfile h100() { return {756e12, 2e12}; }
};

// Bytes of weights streamed per layer; rematerialization is assumed to
// overlap with this traffic.
enum class WeightBytes {
  None,
  Mha12,    // 2*12*d^2
  GqaSvd13, // 2*13*d^2 + 2*2*(d/g)^2 (W_k, W_v held in factored form)
  Custom,
};

struct VariantModel {
  Variant variant = Variant::XqMha;
  double d = 4096;
  double g = 1;
  int e = 16;    // cache bits
  int e_b = 4;   // accumulator bits
  std::size_t n_layers = 32;
  std::size_t group_size = kDefaultGroupSize;
  LayerPolicy policy = LayerPolicy::uniform();
  bool fp16_outlier_channel = false;
  WeightBytes weights = WeightBytes::None;
  double custom_weight_bytes = 0.0;
  // xq_gqa cache traffic: false uses the single (e/8) l d/g term that
  // reproduces the published 40.6K breakeven; true uses 2 (e/8) l d/g.
  bool eq4_text_variant = false;

  void validate() const {
    if (e != 2 && e != 3 && e != 4 && e != 8 && e != 16)
      throw ConfigError("e must be one of {2,3,4,8,16}, got " + std::to_string(e));
    if (!(g >= 1.0)) throw ConfigError("g must be >= 1");
    if (!(d >= 1.0)) throw ConfigError("d must be >= 1");
    if (n_layers < 1) throw ConfigError("n_layers must be >= 1");
    if (group_size < 1) throw ConfigError("group_size must be >= 1");
  }
};

inline double arithmetic_intensity(double flops, double bytes) {
  if (!(bytes > 0.0))
    throw ConfigError("arithmetic intensity undefined for zero bytes");
  return flops / bytes;
}

inline double remat_flops(const VariantModel& m, double l) {
  const double d = m.d;
  const double n = m.d / m.g;
  switch (m.variant) {
    case Variant::Fp16Kv:
    case Variant::KiviKv:
      return 0.0;
    case Variant::XqMha:
      return 2.0 * 2.0 * l * d * n;
    case Variant::XqGqa:
      return 2.0 * 2.0 * l * n * n;
    case Variant::XqclMha:
      return 2.0 * 2.0 * l * d * n + 2.0 * l * d;
    case Variant::XqclGqa:
      return 2.0 * 4.0 * l * n * d;
  }
  return 0.0;
}

inline double cache_bytes(const VariantModel& m, double l) {
  const double d = m.d;
  const double n = m.d / m.g;
  const double e = m.e / 8.0;
  const double acc = m.e_b / 8.0 * l * d;
  switch (m.variant) {
    case Variant::Fp16Kv:
      return 2.0 * 2.0 * l * n;
    case Variant::KiviKv:
      return 2.0 * e * l * n;
    case Variant::XqMha:
      return e * l * d;
    case Variant::XqGqa:
      return (m.eq4_text_variant ? 2.0 : 1.0) * e * l * n;
    case Variant::XqclMha:
      return e * l * d + acc;
    case Variant::XqclGqa:
      return 2.0 * e * l * n + acc;
  }
  return 0.0;
}

inline double weight_bytes(const VariantModel& m) {
  const double d = m.d;
  const double n = m.d / m.g;
  switch (m.weights) {
    case WeightBytes::None: return 0.0;
    case WeightBytes::Mha12: return 2.0 * 12.0 * d * d;
    case WeightBytes::GqaSvd13: return 2.0 * 13.0 * d * d + 2.0 * 2.0 * n * n;
    case WeightBytes::Custom: return m.custom_weight_bytes;
  }
  return 0.0;
}

// Largest l with remat_flops(l) / (cache_bytes(l) + weight_bytes) <= P.
// Both counts are linear in l, so P = a l / (b l + c) solves to
// l = P c / (a - P b). nullopt ("unbounded") when a <= P b: intensity never
// reaches the ridge point.
inline std::optional<double> breakeven_length(const HardwareProfile& hw,
                                              const VariantModel& m) {
  m.validate();
  const double p = hw.ridge_point();
  const double a = remat_flops(m, 1.0);
  const double b = cache_bytes(m, 1.0);
  const double c = weight_bytes(m);
  const double slack = a - p * b;
  if (slack <= 0.0) return std::nullopt;
  return p * c / slack;
}

// Cache bits per token per layer for a given layer's bit width.
inline double stored_bits_per_token(Variant v, int bits, double d, double g,
                                    std::size_t group_size, bool outlier) {
  const double n = d / g;
  QuantConfig cfg;
  cfg.bits = bits;
  cfg.group_size = group_size;
  const double bpe = bits_per_element(cfg);
  switch (v) {
    case Variant::Fp16Kv: return 2.0 * n * 16.0;
    case Variant::KiviKv: return 2.0 * n * bpe;
    case Variant::XqMha:
    case Variant::XqclMha: return d * bpe;
    case Variant::XqGqa: return 2.0 * n * bpe + (outlier ? 16.0 - bits : 0.0);
    case Variant::XqclGqa: return 2.0 * n * bpe;
  }
  return 0.0;
}

// Cache footprint relative to an FP16 KV cache of the same model, averaged
// over layers. Residual-token overhead is not included.
inline double normalized_kv_size(Variant v, const LayerPolicy& policy, int bits,
                                 double d, double g, std::size_t n_layers,
                                 std::size_t group_size = kDefaultGroupSize,
                                 bool fp16_outlier_channel = false) {
  if (n_layers < 1) throw ConfigError("n_layers must be >= 1");
  const double fp16 = 2.0 * (d / g) * 16.0;
  double total = 0.0;
  for (std::size_t layer = 0; layer < n_layers; ++layer) {
    const int e = v == Variant::Fp16Kv ? 16 : policy.bits_for(layer, bits);
    total += stored_bits_per_token(v, e, d, g, group_size, fp16_outlier_channel);
  }
  return total / static_cast<double>(n_layers) / fp16;
}

inline double normalized_kv_size(const VariantModel& m) {
  m.validate();
  return normalized_kv_size(m.variant, m.policy, m.e, m.d, m.g, m.n_layers,
                            m.group_size, m.fp16_outlier_channel);
}

struct ReportConfig {
  std::string name;
  VariantModel model;
  double seq_len = 4096;
};

struct ReportRow {
  std::string name;
  Variant variant;
  int bits;
  double d;
  double g;
  double normalized_size;
  std::optional<double> breakeven;
  double seq_len;
  double flops;
  double bytes;  // cache + weights
  double intensity;
};

inline std::vector<ReportRow> report_variants(
    const HardwareProfile& hw, const std::vector<ReportConfig>& configs) {
  if (configs.empty()) throw ConfigError("report needs at least one variant");
  std::vector<ReportRow> rows;
  rows.reserve(configs.size());
  for (const auto& c : configs) {
    const VariantModel& m = c.model;
    m.validate();
    ReportRow r{c.name, m.variant, m.e, m.d, m.g, normalized_kv_size(m),
                breakeven_length(hw, m), c.seq_len,
                remat_flops(m, c.seq_len),
                cache_bytes(m, c.seq_len) + weight_bytes(m), 0.0};
    r.intensity = r.bytes > 0.0 ? arithmetic_intensity(r.flops, r.bytes) : 0.0;
    rows.push_back(std::move(r));
  }
  return rows;
}

}  // namespace xcache::sysmodel
