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
#include <cmath>
#include <cstddef>
#include <numeric>
#include <span>
#include <vector>

#include "xcache/errors.hpp"
#include "xcache/linalg.hpp"
#include "xcache/matrix.hpp"
#include "xcache/model.hpp"
#include "xcache/rng.hpp"

// Latent-channel statistics and calibration-free prediction of the Keys'
// outlier channel from the first row of the right singular factor of W_k.
namespace xcache::analysis {

struct ChannelStats {
  std::vector<double> mean_abs;  // per column, mean over rows
  std::size_t argmax = 0;        // ties -> lowest index
};

inline ChannelStats channel_stats(const Matrix& m) {
  ChannelStats s;
  s.mean_abs.assign(m.cols(), 0.0);
  for (std::size_t r = 0; r < m.rows(); ++r)
    for (std::size_t c = 0; c < m.cols(); ++c) s.mean_abs[c] += std::abs(m(r, c));
  if (m.rows() > 0)
    for (double& v : s.mean_abs) v /= static_cast<double>(m.rows());
  for (std::size_t c = 1; c < s.mean_abs.size(); ++c)
    if (s.mean_abs[c] > s.mean_abs[s.argmax]) s.argmax = c;
  return s;
}

inline ChannelStats latent_stats(const Matrix& x, const Matrix& u) {
  if (x.cols() != u.rows())
    throw ShapeError("latent_stats: x width " + std::to_string(x.cols()) +
                     " != basis rows " + std::to_string(u.rows()));
  return channel_stats(matmul(x, u));
}

struct OutlierPrediction {
  std::vector<std::size_t> indices;  // descending |b_t(0, j)|
  std::size_t k = 0;

  bool contains(std::size_t channel) const {
    return std::find(indices.begin(), indices.end(), channel) != indices.end();
  }
};

// Top-k columns of the first row of B^T by magnitude (ties -> lowest index).
inline OutlierPrediction predict_outlier_channels(const SvdFactors& svd_k,
                                                  std::size_t k) {
  const Matrix& bt = svd_k.b_t;
  if (k > bt.cols())
    throw ConfigError("predict_outlier_channels: k=" + std::to_string(k) +
                      " exceeds " + std::to_string(bt.cols()) + " channels");
  OutlierPrediction p;
  p.k = k;
  if (k == 0 || bt.rows() == 0) return p;
  std::vector<std::size_t> order(bt.cols());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return std::abs(bt(0, a)) > std::abs(bt(0, b));
  });
  p.indices.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k));
  return p;
}

// Ground truth: the Keys channel (pre-RoPE, K = X W_k) with the largest mean
// absolute magnitude.
inline std::size_t key_outlier_channel(const Matrix& x, const Matrix& w_k) {
  return channel_stats(matmul(x, w_k)).argmax;
}

struct LayerSample {
  Matrix w_k;
  SvdFactors svd_k;
  Matrix x;  // post-norm layer inputs
};

inline LayerSample make_sample(Matrix w_k, Matrix x) {
  SvdFactors f = svd_thin(w_k);
  return {std::move(w_k), std::move(f), std::move(x)};
}

// Fraction of layers whose ground-truth outlier channel is in the top-k
// prediction.
inline double evaluate_prediction(std::span<const LayerSample> layers,
                                  std::size_t k) {
  if (layers.empty()) throw ConfigError("evaluate_prediction: no layers");
  std::size_t hits = 0;
  for (const auto& l : layers)
    if (predict_outlier_channels(l.svd_k, k).contains(key_outlier_channel(l.x, l.w_k)))
      ++hits;
  return static_cast<double>(hits) / static_cast<double>(layers.size());
}

inline double evaluate_prediction(const Model& model,
                                  std::span<const Matrix> layer_inputs,
                                  std::size_t k) {
  if (layer_inputs.empty() || layer_inputs.size() != model.layers.size())
    throw ConfigError("evaluate_prediction: need one input matrix per layer");
  std::size_t hits = 0;
  for (std::size_t i = 0; i < model.layers.size(); ++i) {
    const auto& w = model.layers[i];
    if (predict_outlier_channels(w.svd_k, k)
            .contains(key_outlier_channel(layer_inputs[i], w.w_k)))
      ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(model.layers.size());
}

// ---------------------------------------------------------------------------
// Synthetic constructions with a known answer.
// ---------------------------------------------------------------------------

inline Matrix random_orthonormal(Rng& rng, std::size_t rows, std::size_t cols) {
  Matrix q(rows, cols);
  for (std::size_t j = 0; j < cols; ++j) {
    std::vector<double> v(rows);
    for (double& x : v) x = rng.normal();
    for (int pass = 0; pass < 2; ++pass)
      for (std::size_t k = 0; k < j; ++k) {
        double dot = 0.0;
        for (std::size_t i = 0; i < rows; ++i) dot += q(i, k) * v[i];
        for (std::size_t i = 0; i < rows; ++i) v[i] -= dot * q(i, k);
      }
    double n = 0.0;
    for (double x : v) n += x * x;
    n = std::sqrt(n);
    for (std::size_t i = 0; i < rows; ++i) q(i, j) = v[i] / n;
  }
  return q;
}

// Orthogonal r x r matrix whose leading rows are the given orthonormal
// vectors; remaining rows completed by Gram-Schmidt on the standard basis.
inline Matrix orthogonal_with_rows(const std::vector<std::vector<double>>& lead,
                                   std::size_t r) {
  Matrix cols(r, r);  // built column-wise, transposed at the end
  for (std::size_t j = 0; j < lead.size(); ++j)
    for (std::size_t i = 0; i < r; ++i) cols(i, j) = lead[j][i];
  for (std::size_t j = lead.size(); j < r; ++j) detail::complete_column(cols, j);
  return transpose(cols);
}

inline std::vector<double> normalized(std::vector<double> v) {
  double n = 0.0;
  for (double x : v) n += x * x;
  n = std::sqrt(n);
  for (double& x : v) x /= n;
  return v;
}

inline Matrix compose(const Matrix& u, std::span<const double> sigma,
                      const Matrix& b_t) {
  Matrix us = u;
  for (std::size_t i = 0; i < us.rows(); ++i)
    for (std::size_t j = 0; j < us.cols(); ++j) us(i, j) *= sigma[j];
  return matmul(us, b_t);
}

struct Construction {
  LayerSample sample;
  std::size_t planted_channel;  // argmax of |first row of B^T|
};

// W_k = U diag(sigma) B^T with dominant sigma_0 and a first row of B^T whose
// largest entry sits at a random channel; X rows are alpha u_0 + small noise.
// The Keys' outlier channel equals the planted first-row argmax.
inline Construction construct_dominant(Rng& rng, std::size_t d, std::size_t r,
                                       std::size_t tokens) {
  const Matrix u = random_orthonormal(rng, d, r);
  const std::size_t planted = static_cast<std::size_t>(rng.below(r));
  std::vector<double> b0(r);
  double peak = 0.0;
  for (double& x : b0) {
    x = rng.normal();
    peak = std::max(peak, std::abs(x));
  }
  b0[planted] = (rng.uniform() < 0.5 ? -1.0 : 1.0) * (peak + 1.0);
  const Matrix b_t = orthogonal_with_rows({normalized(b0)}, r);

  std::vector<double> sigma(r);
  sigma[0] = 10.0;
  for (std::size_t j = 1; j < r; ++j)
    sigma[j] = 1.0 - 0.5 * static_cast<double>(j) / static_cast<double>(r);
  Matrix w_k = compose(u, sigma, b_t);

  Matrix x(tokens, d);
  for (std::size_t t = 0; t < tokens; ++t) {
    const double alpha = (rng.uniform() < 0.5 ? -1.0 : 1.0) * (8.0 + 4.0 * rng.uniform());
    for (std::size_t i = 0; i < d; ++i) x(t, i) = alpha * u(i, 0) + 0.01 * rng.normal();
  }
  return {make_sample(std::move(w_k), std::move(x)), planted};
}

enum class FailureKind {
  // A later right-singular row concentrates a secondary latent channel on a
  // different Keys channel, which then outgrows the predicted one.
  CompetingChannel,
  // The second latent channel enters the predicted Keys channel with the
  // opposite sign and cancels most of it.
  SignCancellation,
};

inline Construction construct_failure(Rng& rng, std::size_t d, std::size_t r,
                                      std::size_t tokens, FailureKind kind) {
  if (r < 4) throw ConfigError("construct_failure: needs r >= 4");
  const Matrix u = random_orthonormal(rng, d, r);
  const std::size_t planted = static_cast<std::size_t>(rng.below(r));
  const std::size_t rival = (planted + 1 + rng.below(r - 1)) % r;

  std::vector<double> b0(r), w(r, 0.0);
  std::vector<double> sigma(r, 0.1);
  double beta = 1.0;
  if (kind == FailureKind::CompetingChannel) {
    for (double& x : b0) x = 1.0;
    b0[planted] = 1.2;
    w[rival] = 1.0;
    sigma[0] = 2.0;
    sigma[1] = 1.8;
  } else {
    for (double& x : b0) x = 0.2;
    b0[planted] = 1.0;
    b0[rival] = 0.9;
    w[planted] = -1.0;
    w[rival] = 0.3;
    sigma[0] = 2.0;
    sigma[1] = 1.9;
    beta = 1.5;
  }
  b0 = normalized(b0);
  double dot = 0.0;
  for (std::size_t i = 0; i < r; ++i) dot += w[i] * b0[i];
  for (std::size_t i = 0; i < r; ++i) w[i] -= dot * b0[i];
  const Matrix b_t = orthogonal_with_rows({b0, normalized(w)}, r);
  Matrix w_k = compose(u, sigma, b_t);

  Matrix x(tokens, d);
  for (std::size_t t = 0; t < tokens; ++t) {
    const double s = rng.uniform() < 0.5 ? -1.0 : 1.0;
    for (std::size_t i = 0; i < d; ++i)
      x(t, i) = s * (u(i, 0) + beta * u(i, 1)) + 0.01 * rng.normal();
  }
  return {make_sample(std::move(w_k), std::move(x)), planted};
}

}  // namespace xcache::analysis
