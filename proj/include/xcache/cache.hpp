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
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "xcache/errors.hpp"
#include "xcache/linalg.hpp"
#include "xcache/matrix.hpp"
#include "xcache/quant.hpp"
#include "xcache/variant.hpp"

namespace xcache {

// Projection weights of one decoder layer plus the offline factorizations the
// latent backends rematerialize through.
struct LayerWeights {
  Matrix w_q;     // d x d
  Matrix w_k;     // d x d/g
  Matrix w_v;     // d x d/g
  Matrix w_o;     // d x d
  Matrix w_up;    // d x d_ff
  Matrix w_down;  // d_ff x d
  std::vector<double> attn_norm;
  std::vector<double> mlp_norm;

  SvdFactors svd_k;  // of w_k
  SvdFactors svd_v;  // of w_v
  LatentBasis kv;    // of [w_k | w_v]; only the basis and fused factor are kept

  void prepare_factors() {
    svd_k = svd_thin(w_k);
    svd_v = svd_thin(w_v);
    kv = latent_basis(hcat(w_k, w_v));
  }

  std::size_t kv_width() const { return w_k.cols(); }
};

// Running X-hat for cross-layer variants. Full precision in compute; e_b is
// the precision charged by the bandwidth model.
struct Accumulator {
  Matrix x_hat;
  int e_b = 4;
};

struct KvGeometry {
  std::size_t head_dim = 0;
  double rope_theta = kDefaultRopeTheta;
};

// A quantized tensor that grows by rows. Buffered payloads keep the newest
// rows in a ResidualBuffer until a whole group is available.
class Payload {
 public:
  Payload() = default;
  Payload(std::size_t cols, const QuantConfig& cfg, bool buffered)
      : q_(make_empty(cols, cfg)),
        buffer_(cols, cfg.group_size),
        buffered_(buffered && !cfg.passthrough()) {}

  void append(const Matrix& rows) {
    append(rows, [](const Matrix& block, std::size_t) { return block; });
  }

  // `on_flush(block, first_row)` maps rows to what is quantized at the moment
  // they leave full precision; buffered rows are kept as given.
  template <typename OnFlush>
  void append(const Matrix& rows, OnFlush on_flush) {
    if (rows.cols() != q_.cols)
      throw ShapeError("payload append: width " + std::to_string(rows.cols()) +
                       " != " + std::to_string(q_.cols));
    if (!buffered_) {
      if (rows.rows() > 0) append_block(q_, on_flush(rows, q_.rows));
      return;
    }
    for (std::size_t r = 0; r < rows.rows(); ++r) {
      buffer_.tokens.append_row(rows.row(r));
      if (buffer_.size() >= buffer_.capacity) {
        append_block(q_, on_flush(buffer_.tokens, q_.rows));
        buffer_.tokens.clear_rows();
      }
    }
  }

  Matrix dequantize() const {
    Matrix out = xcache::dequantize(q_);
    if (out.rows() == 0) out = Matrix(0, q_.cols);
    out.append_rows(buffer_.tokens);
    return out;
  }

  std::size_t tokens() const { return q_.rows + buffer_.size(); }
  std::size_t cols() const { return q_.cols; }
  const QuantizedTensor& quantized() const { return q_; }
  const ResidualBuffer& residual() const { return buffer_; }
  bool buffered() const { return buffered_; }

 private:
  QuantizedTensor q_;
  ResidualBuffer buffer_;
  bool buffered_ = false;
};

struct CacheOptions {
  int bits = 4;
  std::size_t group_size = kDefaultGroupSize;
  // Cross-layer variants only: false for the leading base layers.
  bool delta = false;
};

// Per-(sequence, layer) cache contents. Which payloads are live depends on the
// variant:
//   fp16      k = pre-RoPE K, v = V (16-bit)
//   kivi      k = pre-RoPE K per-channel + residual, v = V per-token + residual
//   xq_mha    x = X per-token
//   xq_gqa    k = X U_k per-channel + residual, v = X U_v per-token
//   xqcl_mha  x = delta (or X on base layers) per-token
//   xqcl_gqa  x = latent delta on U_kv per-channel; residual rows hold
//             exact latents until their group is quantized
class CacheState {
 public:
  CacheState(Variant variant, const CacheOptions& opts, const LayerWeights& w)
      : variant_(variant), opts_(opts) {
    const std::size_t d = w.w_k.rows();
    const std::size_t n = w.kv_width();
    auto cfg = [&](Axis axis) {
      QuantConfig c;
      c.bits = opts.bits;
      c.axis = axis;
      c.group_size = opts.group_size;
      c.validate();
      return c;
    };
    QuantConfig full = cfg(Axis::PerToken);
    full.bits = kPassthroughBits;
    switch (variant) {
      case Variant::Fp16Kv:
        k_ = Payload(n, full, false);
        v_ = Payload(n, full, false);
        break;
      case Variant::KiviKv:
        k_ = Payload(n, cfg(Axis::PerChannel), true);
        v_ = Payload(n, cfg(Axis::PerToken), true);
        break;
      case Variant::XqMha:
      case Variant::XqclMha:
        x_ = Payload(d, cfg(Axis::PerToken), false);
        break;
      case Variant::XqGqa:
        k_ = Payload(w.svd_k.u.cols(), cfg(Axis::PerChannel), true);
        v_ = Payload(w.svd_v.u.cols(), cfg(Axis::PerToken), false);
        break;
      case Variant::XqclGqa:
        x_ = Payload(w.kv.basis.cols(), cfg(Axis::PerChannel), true);
        break;
    }
  }

  Variant variant() const noexcept { return variant_; }
  const CacheOptions& options() const noexcept { return opts_; }
  std::size_t tokens() const noexcept { return tokens_; }
  bool fp16_outlier_channel() const noexcept { return outlier_channel_; }

  const Payload& k_payload() const { return k_; }
  const Payload& v_payload() const { return v_; }
  const Payload& x_payload() const { return x_; }
  const Matrix& outlier_channel_values() const { return outlier_values_; }

 private:
  friend void append(CacheState&, const Matrix&, const LayerWeights&,
                     Accumulator*);
  friend std::pair<Matrix, Matrix> rematerialize(const CacheState&,
                                                 const LayerWeights&,
                                                 const KvGeometry&,
                                                 std::span<const std::size_t>,
                                                 const Accumulator*);
  friend Matrix latent_keys(const CacheState&);
  friend void fp16_outlier_channel_variant(CacheState&, bool);

  Variant variant_;
  CacheOptions opts_;
  Payload k_, v_, x_;
  bool outlier_channel_ = false;
  Matrix outlier_values_;
  std::size_t tokens_ = 0;
};

// Keep channel 0 of X U_k in full precision (charged at 16 bits) and quantize
// the remaining latent channels. Must be set before any token is cached.
inline void fp16_outlier_channel_variant(CacheState& state, bool enable) {
  if (state.variant_ != Variant::XqGqa)
    throw UsageError("fp16 outlier channel requires the xq_gqa variant, got " +
                     std::string(variant_name(state.variant_)));
  if (state.tokens_ != 0)
    throw UsageError("fp16 outlier channel must be chosen before caching");
  if (enable == state.outlier_channel_) return;
  const std::size_t width =
      state.k_.cols() + (state.outlier_channel_ ? 1 : 0) - (enable ? 1 : 0);
  state.outlier_channel_ = enable;
  state.k_ = Payload(width, state.k_.quantized().config, true);
  state.outlier_values_ = Matrix(0, 1);
}

// The contribution this layer's cache makes to X-hat: deq(X) on base
// layers, deq(delta) on delta layers (up-projected by U_kv^T for GQA). The
// GQA residual buffer holds exact latents, whose delta is taken against
// `prev_x_hat`, the X-hat this layer was appended on top of.
inline Matrix cross_layer_contribution(const CacheState& s,
                                       const LayerWeights& w,
                                       const Matrix* prev_x_hat) {
  switch (s.variant()) {
    case Variant::XqclMha:
      return s.x_payload().dequantize();
    case Variant::XqclGqa: {
      Matrix latent = s.x_payload().dequantize();
      const std::size_t quantized = s.x_payload().quantized().rows;
      if (s.options().delta && latent.rows() > quantized) {
        if (prev_x_hat == nullptr || prev_x_hat->rows() != latent.rows())
          throw UsageError("cross_layer_contribution: buffered rows need the previous X-hat");
        const Matrix prev = matmul(slice_rows(*prev_x_hat, quantized, latent.rows()), w.kv.basis);
        for (std::size_t r = quantized; r < latent.rows(); ++r)
          for (std::size_t c = 0; c < latent.cols(); ++c)
            latent(r, c) -= prev(r - quantized, c);
      }
      return matmul(latent, transpose(w.kv.basis));
    }
    default:
      throw UsageError("cross_layer_contribution requires an xqcl variant");
  }
}

// Cache the post-norm layer input rows `x` (prefill: all prompt rows;
// decode: one row). Cross-layer variants read and update `acc`: on entry it
// holds X-hat of the previous layer for every token including the new rows;
// on exit it holds X-hat of this layer.
inline void append(CacheState& s, const Matrix& x, const LayerWeights& w,
                   Accumulator* acc) {
  const std::size_t d = w.w_k.rows();
  if (x.cols() != d)
    throw ShapeError("cache append: input width " + std::to_string(x.cols()) +
                     " != hidden size " + std::to_string(d));
  if (is_cross_layer(s.variant_) && acc == nullptr)
    throw UsageError("cross-layer variant " +
                     std::string(variant_name(s.variant_)) +
                     " requires an accumulator");
  const std::size_t total = s.tokens_ + x.rows();

  switch (s.variant_) {
    case Variant::Fp16Kv:
    case Variant::KiviKv:
      s.k_.append(matmul(x, w.w_k));
      s.v_.append(matmul(x, w.w_v));
      break;
    case Variant::XqMha:
      s.x_.append(x);
      break;
    case Variant::XqGqa: {
      Matrix xk = matmul(x, w.svd_k.u);
      if (s.outlier_channel_) {
        s.outlier_values_.append_rows(slice_cols(xk, 0, 1));
        xk = slice_cols(xk, 1, xk.cols());
      }
      s.k_.append(xk);
      s.v_.append(matmul(x, w.svd_v.u));
      break;
    }
    case Variant::XqclMha: {
      if (!s.opts_.delta) {
        s.x_.append(x);
        acc->x_hat = s.x_.dequantize();
        break;
      }
      if (acc->x_hat.rows() != total || acc->x_hat.cols() != d)
        throw UsageError("accumulator holds " +
                         std::to_string(acc->x_hat.rows()) +
                         " rows, expected " + std::to_string(total));
      s.x_.append(subtract(x, slice_rows(acc->x_hat, s.tokens_, total)));
      acc->x_hat = add(acc->x_hat, s.x_.dequantize());
      break;
    }
    case Variant::XqclGqa: {
      const Matrix& basis = w.kv.basis;
      if (!s.opts_.delta) {
        s.x_.append(matmul(x, basis));
        acc->x_hat = matmul(s.x_.dequantize(), transpose(basis));
        break;
      }
      if (acc->x_hat.rows() != total || acc->x_hat.cols() != d)
        throw UsageError("accumulator holds " +
                         std::to_string(acc->x_hat.rows()) +
                         " rows, expected " + std::to_string(total));
      const Matrix prev = matmul(acc->x_hat, basis);
      s.x_.append(matmul(x, basis), [&](const Matrix& block, std::size_t first) {
        return subtract(block, slice_rows(prev, first, first + block.rows()));
      });
      acc->x_hat = add(acc->x_hat, cross_layer_contribution(s, w, &acc->x_hat));
      break;
    }
  }
  s.tokens_ = total;
}

inline void prefill(CacheState& s, const Matrix& x_postnorm,
                    const LayerWeights& w, Accumulator* acc = nullptr) {
  append(s, x_postnorm, w, acc);
}

inline void decode_append(CacheState& s, std::span<const double> x_token,
                          const LayerWeights& w, Accumulator* acc = nullptr) {
  Matrix row(0, x_token.size());
  row.append_row(x_token);
  append(s, row, w, acc);
}

// Dequantized X U_k with the full-precision outlier channel restored.
inline Matrix latent_keys(const CacheState& s) {
  if (s.variant_ != Variant::XqGqa)
    throw UsageError("latent_keys requires the xq_gqa variant");
  Matrix rest = s.k_.dequantize();
  if (!s.outlier_channel_) return rest;
  if (rest.rows() == 0) rest = Matrix(s.outlier_values_.rows(), rest.cols());
  return hcat(s.outlier_values_, rest);
}

// Recompute K (with RoPE at absolute `positions`) and V for every cached
// token. Cross-layer variants read X-hat from `acc`, which must already
// include this layer's deltas.
inline std::pair<Matrix, Matrix> rematerialize(
    const CacheState& s, const LayerWeights& w, const KvGeometry& geom,
    std::span<const std::size_t> positions, const Accumulator* acc) {
  if (positions.size() != s.tokens_)
    throw ShapeError("rematerialize: " + std::to_string(positions.size()) +
                     " positions for " + std::to_string(s.tokens_) + " tokens");
  auto rope = [&](const Matrix& k) {
    return apply_rope(k, positions, geom.rope_theta, geom.head_dim);
  };
  switch (s.variant_) {
    case Variant::Fp16Kv:
    case Variant::KiviKv:
      return {rope(s.k_.dequantize()), s.v_.dequantize()};
    case Variant::XqMha: {
      const Matrix x_hat = s.x_.dequantize();
      return {rope(matmul(x_hat, w.w_k)), matmul(x_hat, w.w_v)};
    }
    case Variant::XqGqa:
      return {rope(matmul(latent_keys(s), w.svd_k.fused)),
              matmul(s.v_.dequantize(), w.svd_v.fused)};
    case Variant::XqclMha:
    case Variant::XqclGqa: {
      if (acc == nullptr)
        throw UsageError("cross-layer rematerialize requires an accumulator");
      if (acc->x_hat.rows() != s.tokens_)
        throw UsageError("accumulator row count does not match cache");
      if (s.variant_ == Variant::XqclMha)
        return {rope(matmul(acc->x_hat, w.w_k)), matmul(acc->x_hat, w.w_v)};
      const Matrix kv = matmul(matmul(acc->x_hat, w.kv.basis), w.kv.fused);
      const std::size_t n = w.kv_width();
      return {rope(slice_cols(kv, 0, n)), slice_cols(kv, n, 2 * n)};
    }
  }
  throw InvariantError("rematerialize: unhandled variant");
}

}  // namespace xcache
