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
#include <string>
#include <vector>

#include "xcache/errors.hpp"
#include "xcache/matrix.hpp"
#include "xcache/rng.hpp"

namespace xcache {

inline constexpr double kDefaultRopeTheta = 10000.0;

// Each row scaled to row * gamma / sqrt(mean(row^2) + eps).
inline Matrix rms_norm(const Matrix& x, std::span<const double> gamma,
                       double eps) {
  if (gamma.size() != x.cols()) throw ShapeError("rms_norm: gamma length");
  if (eps < 0.0) throw ConfigError("rms_norm: eps must be non-negative");
  Matrix y(x.rows(), x.cols());
  for (std::size_t r = 0; r < x.rows(); ++r) {
    const auto in = x.row(r);
    double ss = 0.0;
    for (double v : in) ss += v * v;
    const double mean = x.cols() ? ss / static_cast<double>(x.cols()) : 0.0;
    const double denom = std::sqrt(mean + eps);
    auto out = y.row(r);
    for (std::size_t c = 0; c < x.cols(); ++c)
      out[c] = denom > 0.0 ? in[c] * gamma[c] / denom : 0.0;
  }
  return y;
}

// Rotary embedding on consecutive pairs (2j, 2j+1) of every head_dim-wide
// head. Row r is rotated for position positions[r]; inverse applies the
// negated angles.
inline Matrix apply_rope(const Matrix& m, std::span<const std::size_t> positions,
                         double theta_base, std::size_t head_dim,
                         bool inverse = false) {
  if (head_dim == 0 || head_dim % 2 != 0)
    throw ConfigError("apply_rope: head_dim must be even and positive, got " +
                      std::to_string(head_dim));
  if (m.cols() % head_dim != 0)
    throw ShapeError("apply_rope: width " + std::to_string(m.cols()) +
                     " not divisible by head_dim " + std::to_string(head_dim));
  if (positions.size() != m.rows())
    throw ShapeError("apply_rope: positions length mismatch");

  const std::size_t half = head_dim / 2;
  std::vector<double> inv_freq(half);
  for (std::size_t j = 0; j < half; ++j)
    inv_freq[j] = std::pow(theta_base, -2.0 * static_cast<double>(j) /
                                           static_cast<double>(head_dim));

  Matrix out = m;
  const double sign = inverse ? -1.0 : 1.0;
  for (std::size_t r = 0; r < m.rows(); ++r) {
    auto row = out.row(r);
    const double pos = static_cast<double>(positions[r]);
    for (std::size_t j = 0; j < half; ++j) {
      const double angle = sign * pos * inv_freq[j];
      const double c = std::cos(angle);
      const double s = std::sin(angle);
      for (std::size_t h = 0; h < m.cols(); h += head_dim) {
        const double x0 = row[h + 2 * j];
        const double x1 = row[h + 2 * j + 1];
        row[h + 2 * j] = x0 * c - x1 * s;
        row[h + 2 * j + 1] = x0 * s + x1 * c;
      }
    }
  }
  return out;
}

// Thin SVD w = u * diag(sigma) * b_t of a tall matrix, plus the fused
// diag(sigma) * b_t used as the rematerialization weight.
struct SvdFactors {
  Matrix u;                   // m x r, orthonormal columns
  std::vector<double> sigma;  // r, descending
  Matrix b_t;                 // r x n, orthonormal rows
  Matrix fused;               // r x n
};

inline Matrix fuse_sigma_bt(const SvdFactors& f) {
  if (f.sigma.size() != f.b_t.rows())
    throw ShapeError("fuse_sigma_bt: sigma length != b_t rows");
  Matrix out = f.b_t;
  for (std::size_t i = 0; i < out.rows(); ++i)
    for (double& v : out.row(i)) v *= f.sigma[i];
  return out;
}

struct JacobiOptions {
  double tolerance = 1e-12;  // off-diagonal cosine threshold
  int max_sweeps = 60;
};

namespace detail {

inline double column_dot(const Matrix& a, std::size_t p, std::size_t q) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.rows(); ++i) s += a(i, p) * a(i, q);
  return s;
}

inline void rotate_columns(Matrix& a, std::size_t p, std::size_t q, double c,
                           double s) {
  for (std::size_t i = 0; i < a.rows(); ++i) {
    const double ap = a(i, p);
    const double aq = a(i, q);
    a(i, p) = c * ap - s * aq;
    a(i, q) = s * ap + c * aq;
  }
}

// Fill column j of u with a unit vector orthogonal to columns [0, j).
inline void complete_column(Matrix& u, std::size_t j) {
  for (std::size_t e = 0; e < u.rows(); ++e) {
    std::vector<double> v(u.rows(), 0.0);
    v[e] = 1.0;
    for (int pass = 0; pass < 2; ++pass) {
      for (std::size_t k = 0; k < j; ++k) {
        double d = 0.0;
        for (std::size_t i = 0; i < u.rows(); ++i) d += u(i, k) * v[i];
        for (std::size_t i = 0; i < u.rows(); ++i) v[i] -= d * u(i, k);
      }
    }
    double n = 0.0;
    for (double x : v) n += x * x;
    n = std::sqrt(n);
    if (n > 0.5) {
      for (std::size_t i = 0; i < u.rows(); ++i) u(i, j) = v[i] / n;
      return;
    }
  }
  throw InvariantError("complete_column: no independent basis vector");
}

}  // namespace detail

// One-sided (Hestenes) Jacobi SVD. Requires w.rows() >= w.cols().
// Sign convention: the largest-magnitude entry of each u column is positive
// (lowest index wins ties); equal singular values keep Jacobi order.
inline SvdFactors svd_thin(const Matrix& w, JacobiOptions opts = {}) {
  const std::size_t m = w.rows();
  const std::size_t n = w.cols();
  if (m < n)
    throw ShapeError("svd_thin: expects a tall matrix, got " +
                     std::to_string(m) + "x" + std::to_string(n));
  if (!all_finite(w)) throw DataError("svd_thin: non-finite input");

  Matrix a = w;
  Matrix v = Matrix::identity(n);
  bool converged = n < 2;
  double worst = 0.0;
  for (int sweep = 0; sweep < opts.max_sweeps && !converged; ++sweep) {
    worst = 0.0;
    for (std::size_t p = 0; p + 1 < n; ++p) {
      for (std::size_t q = p + 1; q < n; ++q) {
        const double alpha = detail::column_dot(a, p, p);
        const double beta = detail::column_dot(a, q, q);
        const double gamma = detail::column_dot(a, p, q);
        if (gamma == 0.0 || alpha == 0.0 || beta == 0.0) continue;
        const double ratio = std::abs(gamma) / std::sqrt(alpha * beta);
        worst = std::max(worst, ratio);
        if (ratio <= opts.tolerance) continue;
        const double zeta = (beta - alpha) / (2.0 * gamma);
        const double t = (zeta >= 0.0 ? 1.0 : -1.0) /
                         (std::abs(zeta) + std::sqrt(1.0 + zeta * zeta));
        const double c = 1.0 / std::sqrt(1.0 + t * t);
        const double s = c * t;
        detail::rotate_columns(a, p, q, c, s);
        detail::rotate_columns(v, p, q, c, s);
      }
    }
    converged = worst <= opts.tolerance;
  }
  if (!converged)
    throw NumericalError("svd_thin: Jacobi did not converge in " +
                             std::to_string(opts.max_sweeps) + " sweeps",
                         worst);

  std::vector<double> norms(n);
  for (std::size_t j = 0; j < n; ++j)
    norms[j] = std::sqrt(detail::column_dot(a, j, j));
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t x, std::size_t y) {
    return norms[x] > norms[y];
  });

  SvdFactors f;
  f.u = Matrix(m, n);
  f.b_t = Matrix(n, n);
  f.sigma.resize(n);
  const double sigma_max = n ? norms[order[0]] : 0.0;
  const double cutoff = sigma_max * 1e-14;
  for (std::size_t j = 0; j < n; ++j) {
    const std::size_t src = order[j];
    const double s = norms[src];
    const bool null_direction = s <= cutoff || s == 0.0;
    f.sigma[j] = null_direction ? 0.0 : s;
    for (std::size_t k = 0; k < n; ++k) f.b_t(j, k) = v(k, src);
    if (!null_direction)
      for (std::size_t i = 0; i < m; ++i) f.u(i, j) = a(i, src) / s;
  }
  for (std::size_t j = 0; j < n; ++j)
    if (f.sigma[j] == 0.0) detail::complete_column(f.u, j);

  for (std::size_t j = 0; j < n; ++j) {
    std::size_t arg = 0;
    double best = -1.0;
    for (std::size_t i = 0; i < m; ++i) {
      if (std::abs(f.u(i, j)) > best) {
        best = std::abs(f.u(i, j));
        arg = i;
      }
    }
    if (f.u(arg, j) < 0.0) {
      for (std::size_t i = 0; i < m; ++i) f.u(i, j) = -f.u(i, j);
      for (std::size_t k = 0; k < n; ++k) f.b_t(j, k) = -f.b_t(j, k);
    }
  }
  f.fused = fuse_sigma_bt(f);
  return f;
}

// Left basis plus fused right factor for any projection w (d x n):
// w = basis * fused with basis orthonormal. Tall w uses svd_thin directly;
// wide w factors the transpose, so the latent width is min(d, n).
struct LatentBasis {
  Matrix basis;  // d x r
  Matrix fused;  // r x n
};

inline LatentBasis latent_basis(const Matrix& w) {
  if (w.rows() >= w.cols()) {
    SvdFactors f = svd_thin(w);
    return {std::move(f.u), std::move(f.fused)};
  }
  // w^T = U' S B'^T  =>  w = B' (S U'^T)
  SvdFactors f = svd_thin(transpose(w));
  Matrix fused = transpose(f.u);
  for (std::size_t i = 0; i < fused.rows(); ++i)
    for (double& x : fused.row(i)) x *= f.sigma[i];
  return {transpose(f.b_t), std::move(fused)};
}

// i.i.d. N(0, (scale/sqrt(cols))^2) entries, row-major from the generator.
inline Matrix gen_weights(Rng& rng, std::size_t rows, std::size_t cols,
                          double scale) {
  if (!(scale > 0.0)) throw ConfigError("gen_weights: scale must be > 0");
  if (cols == 0) throw ConfigError("gen_weights: cols must be >= 1");
  const double stddev = scale / std::sqrt(static_cast<double>(cols));
  Matrix m(rows, cols);
  for (double& v : m.data()) v = rng.normal() * stddev;
  return m;
}

}  // namespace xcache
