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

#include <gtest/gtest.h>

#include <cmath>
#include <numeric>
#include <vector>

#include "xcache/cache.hpp"
#include "xcache/rng.hpp"
#include "support/oracles.hpp"

using namespace xcache;
using namespace xcache::testing_support;

namespace {

Matrix random_matrix(Rng& rng, std::size_t r, std::size_t c, double spread = 1.0) {
  Matrix m(r, c);
  for (double& v : m.data()) v = spread * rng.normal();
  return m;
}

LayerWeights make_weights(Rng& rng, std::size_t d, std::size_t g) {
  LayerWeights w;
  w.w_k = random_matrix(rng, d, d / g, 1.0 / std::sqrt(double(d)));
  w.w_v = random_matrix(rng, d, d / g, 1.0 / std::sqrt(double(d)));
  w.prepare_factors();
  return w;
}

std::vector<std::size_t> positions(std::size_t n) {
  std::vector<std::size_t> p(n);
  std::iota(p.begin(), p.end(), std::size_t{0});
  return p;
}

CacheOptions opts(int bits, std::size_t group = 128, bool delta = false) {
  CacheOptions o;
  o.bits = bits;
  o.group_size = group;
  o.delta = delta;
  return o;
}

const KvGeometry kGeom{8, kDefaultRopeTheta};

std::pair<Matrix, Matrix> direct_kv(const Matrix& x, const LayerWeights& w) {
  const auto pos = positions(x.rows());
  return {apply_rope(matmul(x, w.w_k), pos, kGeom.rope_theta, kGeom.head_dim),
          matmul(x, w.w_v)};
}

// Single base layer: prefill and rematerialize one cache.
std::pair<Matrix, Matrix> run_one(Variant v, const CacheOptions& o,
                                  const Matrix& x, const LayerWeights& w) {
  CacheState s(v, o, w);
  Accumulator acc;
  prefill(s, x, w, &acc);
  return rematerialize(s, w, kGeom, positions(x.rows()), &acc);
}

}  // namespace

TEST(Cache, PassthroughXqMhaBitEqualsFp16) {
  Rng rng(1);
  const LayerWeights w = make_weights(rng, 32, 1);
  const Matrix x = random_matrix(rng, 20, 32);
  const auto fp = run_one(Variant::Fp16Kv, opts(16), x, w);
  const auto xq = run_one(Variant::XqMha, opts(16), x, w);
  EXPECT_EQ(fp.first, xq.first);
  EXPECT_EQ(fp.second, xq.second);
}

TEST(Cache, EveryVariantLosslessAtSixteenBits) {
  Rng rng(2);
  for (std::size_t g : {1u, 2u, 4u}) {
    const LayerWeights w = make_weights(rng, 32, g);
    const Matrix x = random_matrix(rng, 16, 32);
    const auto [k_ref, v_ref] = direct_kv(x, w);
    for (Variant v : kAllVariants) {
      const auto [k, val] = run_one(v, opts(16), x, w);
      EXPECT_LE(max_abs_diff(k, k_ref), 1e-9 * max_abs(k_ref)) << variant_name(v) << " g=" << g;
      EXPECT_LE(max_abs_diff(val, v_ref), 1e-9 * max_abs(v_ref)) << variant_name(v) << " g=" << g;
    }
  }
}

TEST(Cache, XqclGqaLosslessOnDeltaLayer) {
  Rng rng(3);
  for (std::size_t g : {1u, 4u}) {
    const LayerWeights w0 = make_weights(rng, 32, g), w1 = make_weights(rng, 32, g);
    const Matrix x0 = random_matrix(rng, 16, 32), x1 = random_matrix(rng, 16, 32);
    Accumulator acc;
    CacheState base(Variant::XqclGqa, opts(16), w0);
    prefill(base, x0, w0, &acc);
    CacheState delta(Variant::XqclGqa, opts(16, 128, true), w1);
    prefill(delta, x1, w1, &acc);
    const auto [k, v] = rematerialize(delta, w1, kGeom, positions(16), &acc);
    const auto [k_ref, v_ref] = direct_kv(x1, w1);
    EXPECT_LE(max_abs_diff(k, k_ref), 1e-8 * max_abs(k_ref));
    EXPECT_LE(max_abs_diff(v, v_ref), 1e-8 * max_abs(v_ref));
  }
}

TEST(Cache, ZeroDeltaLeavesAccumulatorUnchanged) {
  Rng rng(4);
  const LayerWeights w = make_weights(rng, 16, 1);
  const Matrix x = random_matrix(rng, 6, 16);
  Accumulator acc;
  acc.x_hat = x;
  CacheState s(Variant::XqclMha, opts(2, 8, true), w);
  prefill(s, x, w, &acc);
  EXPECT_EQ(acc.x_hat, x);
  const QuantizedTensor& q = s.x_payload().quantized();
  for (std::uint32_t c : q.codes.unpack()) EXPECT_EQ(c, 0u);
  EXPECT_EQ(max_abs(s.x_payload().dequantize()), 0.0);
}

TEST(Cache, CrossLayerWithoutAccumulatorIsUsageError) {
  Rng rng(5);
  const LayerWeights w = make_weights(rng, 16, 1);
  for (Variant v : {Variant::XqclMha, Variant::XqclGqa}) {
    CacheState s(v, opts(4), w);
    EXPECT_THROW(prefill(s, Matrix(2, 16), w), UsageError);
  }
  CacheState s(Variant::XqclMha, opts(4, 128, true), w);
  Accumulator wrong;
  wrong.x_hat = Matrix(1, 16);
  EXPECT_THROW(prefill(s, Matrix(2, 16), w, &wrong), UsageError);
}

TEST(Cache, ShapeErrors) {
  Rng rng(6);
  const LayerWeights w = make_weights(rng, 16, 1);
  CacheState s(Variant::XqMha, opts(4), w);
  EXPECT_THROW(prefill(s, Matrix(2, 15), w), ShapeError);
  prefill(s, Matrix(2, 16), w);
  const auto pos = positions(3);
  EXPECT_THROW(rematerialize(s, w, kGeom, pos, nullptr), ShapeError);
}

TEST(Cache, DecodeMatchesPrefillForPerTokenPayloads) {
  Rng rng(7);
  const LayerWeights w = make_weights(rng, 32, 1);
  const Matrix x = random_matrix(rng, 24, 32);
  for (Variant v : {Variant::XqMha, Variant::KiviKv, Variant::XqGqa}) {
    CacheState full(v, opts(3, 8), w), split(v, opts(3, 8), w);
    prefill(full, x, w);
    prefill(split, slice_rows(x, 0, 10), w);
    for (std::size_t t = 10; t < 24; ++t) decode_append(split, x.row(t), w);
    const Payload& a = v == Variant::XqMha ? full.x_payload() : full.v_payload();
    const Payload& b = v == Variant::XqMha ? split.x_payload() : split.v_payload();
    EXPECT_EQ(a.quantized().codes.words(), b.quantized().codes.words()) << variant_name(v);
    const auto kv_full = rematerialize(full, w, kGeom, positions(24), nullptr);
    const auto kv_split = rematerialize(split, w, kGeom, positions(24), nullptr);
    EXPECT_EQ(kv_full.first, kv_split.first) << variant_name(v);
    EXPECT_EQ(kv_full.second, kv_split.second) << variant_name(v);
  }
}

TEST(Cache, CrossLayerDecodeMatchesPrefill) {
  Rng rng(8);
  for (Variant v : {Variant::XqclMha, Variant::XqclGqa}) {
    const LayerWeights w0 = make_weights(rng, 32, 4), w1 = make_weights(rng, 32, 4);
    const Matrix x0 = random_matrix(rng, 20, 32), x1 = random_matrix(rng, 20, 32);
    CacheState b_full(v, opts(2, 8), w0), d_full(v, opts(2, 8, true), w1);
    Accumulator acc_full;
    prefill(b_full, x0, w0, &acc_full);
    prefill(d_full, x1, w1, &acc_full);

    CacheState b_split(v, opts(2, 8), w0), d_split(v, opts(2, 8, true), w1);
    Accumulator acc;
    prefill(b_split, slice_rows(x0, 0, 5), w0, &acc);
    prefill(d_split, slice_rows(x1, 0, 5), w1, &acc);
    for (std::size_t t = 5; t < 20; ++t) {
      decode_append(b_split, x0.row(t), w0, &acc);
      decode_append(d_split, x1.row(t), w1, &acc);
    }
    EXPECT_EQ(max_abs_diff(acc.x_hat, acc_full.x_hat), 0.0) << variant_name(v);
  }
}

TEST(Cache, FirstDecodedPerChannelTokenStaysFullPrecision) {
  Rng rng(9);
  const LayerWeights w = make_weights(rng, 32, 1);
  const Matrix x = random_matrix(rng, 9, 32);
  for (int bits : {2, 8}) {
    CacheState s(Variant::KiviKv, opts(bits, 8), w);
    prefill(s, slice_rows(x, 0, 8), w);
    decode_append(s, x.row(8), w);
    EXPECT_EQ(s.k_payload().residual().size(), 1u);
    const auto [k, v] = rematerialize(s, w, kGeom, positions(9), nullptr);
    const auto [k_ref, v_ref] = direct_kv(x, w);
    for (std::size_t c = 0; c < 32; ++c) {
      EXPECT_EQ(k(8, c), k_ref(8, c));
      EXPECT_EQ(v(8, c), v_ref(8, c));
    }
  }
}

TEST(Cache, FlushAtGroupBoundaryKeepsErrorBound) {
  Rng rng(10);
  const LayerWeights w = make_weights(rng, 32, 1);
  const Matrix x = random_matrix(rng, 16, 32);
  CacheState s(Variant::KiviKv, opts(4, 8), w);
  for (std::size_t t = 0; t < 16; ++t) {
    decode_append(s, x.row(t), w);
    EXPECT_EQ(s.k_payload().residual().size(), (t + 1) % 8);
  }
  const QuantizedTensor& q = s.k_payload().quantized();
  ASSERT_EQ(q.rows, 16u);
  const Matrix k_pre = matmul(x, w.w_k);
  const Matrix back = dequantize(q);
  for (std::size_t r = 0; r < 16; ++r)
    for (std::size_t c = 0; c < 32; ++c)
      EXPECT_LE(std::abs(back(r, c) - k_pre(r, c)), q.scales[q.group_of(r, c)] / 2 + 1e-12);
}

TEST(Cache, XqMhaErrorPropagationBound) {
  Rng rng(11);
  const LayerWeights w = make_weights(rng, 32, 1);
  const Matrix x = random_matrix(rng, 12, 32);
  CacheState s(Variant::XqMha, opts(4, 32), w);
  prefill(s, x, w);
  const auto [k, v] = rematerialize(s, w, kGeom, positions(12), nullptr);
  const auto [k_ref, v_ref] = direct_kv(x, w);
  const QuantizedTensor& q = s.x_payload().quantized();
  const double half_step = *std::max_element(q.scales.begin(), q.scales.end()) / 2;
  auto col_l1 = [](const Matrix& m, std::size_t c) {
    double s = 0.0;
    for (std::size_t i = 0; i < m.rows(); ++i) s += std::abs(m(i, c));
    return s;
  };
  for (std::size_t t = 0; t < 12; ++t)
    for (std::size_t c = 0; c < 32; c += 2) {
      EXPECT_LE(std::abs(v(t, c) - v_ref(t, c)), half_step * col_l1(w.w_v, c) + 1e-12);
      const double bk = half_step * std::hypot(col_l1(w.w_k, c), col_l1(w.w_k, c + 1));
      EXPECT_LE(std::hypot(k(t, c) - k_ref(t, c), k(t, c + 1) - k_ref(t, c + 1)), bk + 1e-12);
    }
}

TEST(OutlierChannel, RequiresXqGqaBeforeCaching) {
  Rng rng(12);
  const LayerWeights w = make_weights(rng, 16, 2);
  CacheState kivi(Variant::KiviKv, opts(4), w);
  EXPECT_THROW(fp16_outlier_channel_variant(kivi, true), UsageError);
  CacheState s(Variant::XqGqa, opts(4), w);
  prefill(s, Matrix(1, 16), w);
  EXPECT_THROW(fp16_outlier_channel_variant(s, true), UsageError);
}

TEST(OutlierChannel, SixteenBitsUnchanged) {
  Rng rng(13);
  const LayerWeights w = make_weights(rng, 32, 4);
  const Matrix x = random_matrix(rng, 10, 32);
  CacheState a(Variant::XqGqa, opts(16), w), b(Variant::XqGqa, opts(16), w);
  fp16_outlier_channel_variant(b, true);
  prefill(a, x, w);
  prefill(b, x, w);
  const auto pa = rematerialize(a, w, kGeom, positions(10), nullptr);
  const auto pb = rematerialize(b, w, kGeom, positions(10), nullptr);
  EXPECT_EQ(pa.first, pb.first);
  EXPECT_EQ(pa.second, pb.second);
}

TEST(OutlierChannel, ChannelZeroExactAndKeysImprove) {
  Rng rng(14);
  const std::size_t d = 32;
  const LayerWeights w = make_weights(rng, d, 4);
  // Rows dominated by the first left singular direction of w_k.
  Matrix x(64, d);
  for (std::size_t t = 0; t < 64; ++t) {
    const double alpha = 20.0 * (1.0 + rng.uniform());
    for (std::size_t i = 0; i < d; ++i) x(t, i) = alpha * w.svd_k.u(i, 0) + 0.3 * rng.normal();
  }
  CacheState plain(Variant::XqGqa, opts(2, 16), w), kept(Variant::XqGqa, opts(2, 16), w);
  fp16_outlier_channel_variant(kept, true);
  prefill(plain, x, w);
  prefill(kept, x, w);
  const Matrix latent = matmul(x, w.svd_k.u);
  const Matrix restored = latent_keys(kept);
  for (std::size_t t = 0; t < 64; ++t) EXPECT_EQ(restored(t, 0), latent(t, 0));
  const auto k_ref = direct_kv(x, w).first;
  const auto k_plain = rematerialize(plain, w, kGeom, positions(64), nullptr).first;
  const auto k_kept = rematerialize(kept, w, kGeom, positions(64), nullptr).first;
  EXPECT_LT(max_abs_diff(k_kept, k_ref), max_abs_diff(k_plain, k_ref));
}

TEST(Accumulator, MatchesFromScratchSum) {
  Rng rng(15);
  const std::size_t layers = 6, d = 32, tokens = 40;
  for (Variant v : {Variant::XqclMha, Variant::XqclGqa}) {
    std::vector<LayerWeights> ws;
    std::vector<CacheState> caches;
    for (std::size_t i = 0; i < layers; ++i) ws.push_back(make_weights(rng, d, 4));
    for (std::size_t i = 0; i < layers; ++i)
      caches.emplace_back(v, opts(i < 2 ? 4 : 2, 16, i >= 2), ws[i]);
    Accumulator acc;
    Matrix x = random_matrix(rng, tokens, d);
    for (std::size_t i = 0; i < layers; ++i) {
      prefill(caches[i], x, ws[i], &acc);
      // base X-hat of layer 1, then every delta layer's reconstruction in turn
      Matrix sum = contribution_oracle(caches[std::min<std::size_t>(i, 1)],
                                       ws[std::min<std::size_t>(i, 1)], Matrix());
      for (std::size_t j = 2; j <= i; ++j)
        sum = add(sum, contribution_oracle(caches[j], ws[j], sum));
      EXPECT_LE(max_abs_diff(acc.x_hat, sum), 1e-12 * std::max(1.0, max_abs(sum)))
          << variant_name(v) << " layer " << i;
      x = add(x, random_matrix(rng, tokens, d, 0.05));
    }
  }
}
