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
#include <cstdint>
#include <limits>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "xcache/binary_io.hpp"
#include "xcache/cache.hpp"
#include "xcache/errors.hpp"
#include "xcache/linalg.hpp"
#include "xcache/matrix.hpp"
#include "xcache/rng.hpp"
#include "xcache/sysmodel.hpp"
#include "xcache/variant.hpp"

namespace xcache {

struct ModelConfig {
  std::size_t d = 64;
  std::size_t n_layers = 8;
  std::size_t n_heads = 8;
  std::size_t g = 1;  // query heads per KV head
  std::size_t vocab = 256;
  std::size_t d_ff = 128;
  // Std multiplier of w_o and w_down; small values make each layer a small
  // refinement of the residual stream.
  double mlp_scale = 1.0;
  std::uint64_t seed = 1;
  double rope_theta = kDefaultRopeTheta;
  double norm_eps = 1e-6;

  std::size_t head_dim() const { return d / n_heads; }
  std::size_t n_kv_heads() const { return n_heads / g; }
  std::size_t kv_width() const { return d / g; }

  void validate() const {
    if (d < 1 || n_layers < 1 || n_heads < 1 || g < 1 || vocab < 1 || d_ff < 1)
      throw ConfigError("model: all counts must be >= 1");
    if (d % n_heads != 0)
      throw ConfigError("model: d=" + std::to_string(d) +
                        " not divisible by n_heads=" + std::to_string(n_heads));
    if (n_heads % g != 0)
      throw ConfigError("model: n_heads=" + std::to_string(n_heads) +
                        " not divisible by g=" + std::to_string(g));
    if (head_dim() % 2 != 0)
      throw ConfigError("model: head_dim must be even for RoPE");
    if (mlp_scale < 0.0) throw ConfigError("model: mlp_scale must be >= 0");
  }
};

struct Model {
  ModelConfig cfg;
  Matrix embed;  // vocab x d
  std::vector<LayerWeights> layers;
  std::vector<double> final_norm;
  Matrix lm_head;  // d x vocab

  KvGeometry geometry() const { return {cfg.head_dim(), cfg.rope_theta}; }
};

namespace detail {

// Weights are rounded to float so XQW1 files (f32 payload) round-trip exactly.
inline Matrix f32_exact(Matrix m) {
  for (double& v : m.data()) v = static_cast<double>(static_cast<float>(v));
  return m;
}

inline Matrix gen_or_zero(Rng& rng, std::size_t rows, std::size_t cols,
                          double scale) {
  if (scale == 0.0) return Matrix(rows, cols);
  return f32_exact(gen_weights(rng, rows, cols, scale));
}

}  // namespace detail

inline Model build_model(const ModelConfig& cfg) {
  cfg.validate();
  Model m;
  m.cfg = cfg;
  Rng rng(cfg.seed);
  const std::size_t d = cfg.d;
  m.embed = detail::gen_or_zero(rng, cfg.vocab, d, std::sqrt(double(d)));
  for (std::size_t i = 0; i < cfg.n_layers; ++i) {
    LayerWeights w;
    w.w_q = detail::gen_or_zero(rng, d, d, 1.0);
    w.w_k = detail::gen_or_zero(rng, d, cfg.kv_width(), std::sqrt(double(cfg.kv_width()) / d));
    w.w_v = detail::gen_or_zero(rng, d, cfg.kv_width(), std::sqrt(double(cfg.kv_width()) / d));
    w.w_o = detail::gen_or_zero(rng, d, d, cfg.mlp_scale);
    w.w_up = detail::gen_or_zero(rng, d, cfg.d_ff, std::sqrt(double(cfg.d_ff) / d));
    w.w_down = detail::gen_or_zero(rng, cfg.d_ff, d, cfg.mlp_scale);
    w.attn_norm.assign(d, 1.0);
    w.mlp_norm.assign(d, 1.0);
    w.prepare_factors();
    m.layers.push_back(std::move(w));
  }
  m.final_norm.assign(d, 1.0);
  m.lm_head = detail::gen_or_zero(rng, d, cfg.vocab, std::sqrt(double(cfg.vocab) / d));
  return m;
}

// Causal softmax attention of `q` rows at positions first_pos.. over all
// cached K/V rows. Query head h reads KV head h / (n_heads / n_kv_heads).
inline Matrix causal_attention(const Matrix& q, const Matrix& k, const Matrix& v,
                               std::size_t first_pos, std::size_t n_heads,
                               std::size_t n_kv_heads, std::size_t head_dim) {
  if (k.rows() != v.rows() || k.cols() != n_kv_heads * head_dim ||
      v.cols() != k.cols() || q.cols() != n_heads * head_dim)
    throw ShapeError("causal_attention: inconsistent shapes");
  if (first_pos + q.rows() > k.rows())
    throw ShapeError("causal_attention: queries beyond cached keys");
  const std::size_t group = n_heads / n_kv_heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(head_dim));
  Matrix out(q.rows(), q.cols());
  std::vector<double> scores;
  for (std::size_t t = 0; t < q.rows(); ++t) {
    const std::size_t visible = first_pos + t + 1;
    scores.resize(visible);
    for (std::size_t h = 0; h < n_heads; ++h) {
      const std::size_t qo = h * head_dim;
      const std::size_t ko = (h / group) * head_dim;
      double best = -std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j < visible; ++j) {
        double s = 0.0;
        for (std::size_t c = 0; c < head_dim; ++c) s += q(t, qo + c) * k(j, ko + c);
        scores[j] = s * scale;
        best = std::max(best, scores[j]);
      }
      double total = 0.0;
      for (double& s : scores) {
        s = std::exp(s - best);
        total += s;
      }
      for (std::size_t j = 0; j < visible; ++j) {
        const double p = scores[j] / total;
        for (std::size_t c = 0; c < head_dim; ++c) out(t, qo + c) += p * v(j, ko + c);
      }
    }
  }
  return out;
}

struct RunOptions {
  Variant variant = Variant::Fp16Kv;
  int bits = 16;
  LayerPolicy policy = LayerPolicy::uniform();
  std::size_t group_size = kDefaultGroupSize;
  bool fp16_outlier_channel = false;
};

// One sequence running through the model with a chosen cache backend.
// forward() appends tokens (prefill when given many, decode when given one)
// and returns their logits.
class Session {
 public:
  Session(const Model& model, const RunOptions& opts)
      : model_(&model), opts_(opts) {
    opts_.policy.validate();
    for (std::size_t i = 0; i < model.layers.size(); ++i) {
      CacheOptions co;
      co.bits = opts.variant == Variant::Fp16Kv
                    ? kPassthroughBits
                    : opts.policy.bits_for(i, opts.bits);
      co.group_size = opts.group_size;
      co.delta = opts.policy.is_delta_layer(i);
      caches_.emplace_back(opts.variant, co, model.layers[i]);
      if (opts.fp16_outlier_channel)
        fp16_outlier_channel_variant(caches_.back(), true);
    }
  }

  // When set, the post-norm attention input of every layer is appended here
  // (one Matrix per layer) on each forward call.
  void capture_layer_inputs(std::vector<Matrix>* sink) { capture_ = sink; }

  Matrix forward(std::span<const int> tokens) {
    const ModelConfig& cfg = model_->cfg;
    const std::size_t first = position_;
    Matrix h(tokens.size(), cfg.d);
    for (std::size_t t = 0; t < tokens.size(); ++t) {
      if (tokens[t] < 0 || static_cast<std::size_t>(tokens[t]) >= cfg.vocab)
        throw DataError("token " + std::to_string(tokens[t]) + " outside vocab");
      const auto src = model_->embed.row(static_cast<std::size_t>(tokens[t]));
      std::copy(src.begin(), src.end(), h.row(t).begin());
    }
    position_ += tokens.size();
    std::vector<std::size_t> all(position_);
    std::iota(all.begin(), all.end(), std::size_t{0});
    const std::span<const std::size_t> fresh(all.data() + first, tokens.size());
    const KvGeometry geom = model_->geometry();
    if (capture_ && capture_->size() < model_->layers.size())
      capture_->resize(model_->layers.size(), Matrix(0, cfg.d));

    for (std::size_t i = 0; i < model_->layers.size(); ++i) {
      const LayerWeights& w = model_->layers[i];
      const Matrix x = rms_norm(h, w.attn_norm, cfg.norm_eps);
      if (capture_) (*capture_)[i].append_rows(x);
      append(caches_[i], x, w, &acc_);
      const auto [k, v] = rematerialize(caches_[i], w, geom, all, &acc_);
      const Matrix q = apply_rope(matmul(x, w.w_q), fresh, cfg.rope_theta,
                                  cfg.head_dim());
      const Matrix attn = causal_attention(q, k, v, first, cfg.n_heads,
                                           cfg.n_kv_heads(), cfg.head_dim());
      h = add(h, matmul(attn, w.w_o));
      Matrix up = matmul(rms_norm(h, w.mlp_norm, cfg.norm_eps), w.w_up);
      for (double& u : up.data()) u = u / (1.0 + std::exp(-u));  // SiLU
      h = add(h, matmul(up, w.w_down));
    }
    Matrix logits = matmul(rms_norm(h, model_->final_norm, cfg.norm_eps),
                           model_->lm_head);
    if (!all_finite(logits))
      throw NumericalError("forward produced non-finite logits", 0.0);
    return logits;
  }

  std::size_t position() const noexcept { return position_; }
  const CacheState& cache(std::size_t layer) const { return caches_.at(layer); }
  const Accumulator& accumulator() const noexcept { return acc_; }
  const RunOptions& options() const noexcept { return opts_; }

 private:
  const Model* model_;
  RunOptions opts_;
  std::vector<CacheState> caches_;
  Accumulator acc_;
  std::size_t position_ = 0;
  std::vector<Matrix>* capture_ = nullptr;
};

struct EvalReport {
  Variant variant = Variant::Fp16Kv;
  int bits = 16;
  double max_logit_err = 0.0;
  double mean_logit_err = 0.0;
  double nll_delta = 0.0;
  double normalized_cache_bits = 1.0;
};

// Mean next-token negative log-likelihood under teacher forcing.
inline double mean_nll(const Matrix& logits, std::span<const int> tokens) {
  if (tokens.size() < 2) return 0.0;
  double total = 0.0;
  for (std::size_t t = 0; t + 1 < tokens.size(); ++t) {
    const auto row = logits.row(t);
    const double mx = *std::max_element(row.begin(), row.end());
    double z = 0.0;
    for (double v : row) z += std::exp(v - mx);
    total += std::log(z) + mx - row[static_cast<std::size_t>(tokens[t + 1])];
  }
  return total / static_cast<double>(tokens.size() - 1);
}

inline Matrix teacher_forced_logits(const Model& model, std::span<const int> tokens,
                                    const RunOptions& opts) {
  Session s(model, opts);
  return s.forward(tokens);
}

inline EvalReport compare_logits(const Matrix& logits, const Matrix& reference,
                                 std::span<const int> tokens,
                                 const Model& model, const RunOptions& opts) {
  EvalReport r;
  r.variant = opts.variant;
  r.bits = opts.variant == Variant::Fp16Kv ? 16 : opts.bits;
  double sum = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    const double e = std::abs(logits.data()[i] - reference.data()[i]);
    r.max_logit_err = std::max(r.max_logit_err, e);
    sum += e;
  }
  r.mean_logit_err = logits.size() ? sum / static_cast<double>(logits.size()) : 0.0;
  r.nll_delta = mean_nll(logits, tokens) - mean_nll(reference, tokens);
  r.normalized_cache_bits = sysmodel::normalized_kv_size(
      opts.variant, opts.policy, r.bits, static_cast<double>(model.cfg.d),
      static_cast<double>(model.cfg.g), model.cfg.n_layers, opts.group_size,
      opts.fp16_outlier_channel);
  return r;
}

struct TeacherForcedResult {
  Matrix logits;
  EvalReport report;
};

// Prefill all tokens with the chosen backend and compare against a fresh
// FP16 KV run of the same weights.
inline TeacherForcedResult forward_teacher_forced(const Model& model,
                                                  std::span<const int> tokens,
                                                  const RunOptions& opts) {
  RunOptions fp;
  fp.group_size = opts.group_size;
  const Matrix reference = teacher_forced_logits(model, tokens, fp);
  Matrix logits = teacher_forced_logits(model, tokens, opts);
  EvalReport report = compare_logits(logits, reference, tokens, model, opts);
  return {std::move(logits), report};
}

inline int argmax_token(std::span<const double> row) {
  return static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin());
}

struct GenerateResult {
  std::vector<int> tokens;  // newly generated tokens only
  Matrix step_logits;       // row j produced tokens[j]
};

// Greedy decoding: prefill the prompt, then decode one token at a time.
inline GenerateResult generate(const Model& model, std::span<const int> prompt,
                               std::size_t n_new, const RunOptions& opts) {
  if (n_new < 1) throw ConfigError("generate: n_new must be >= 1");
  if (prompt.empty()) throw ConfigError("generate: prompt must be non-empty");
  Session s(model, opts);
  GenerateResult out;
  out.step_logits = Matrix(0, model.cfg.vocab);
  Matrix logits = s.forward(prompt);
  std::vector<double> last(logits.row(logits.rows() - 1).begin(),
                           logits.row(logits.rows() - 1).end());
  for (std::size_t i = 0; i < n_new; ++i) {
    out.step_logits.append_row(last);
    const int next = argmax_token(last);
    out.tokens.push_back(next);
    if (i + 1 == n_new) break;
    const int one[1] = {next};
    const Matrix step = s.forward(one);
    last.assign(step.row(0).begin(), step.row(0).end());
  }
  return out;
}

inline std::vector<int> random_tokens(std::size_t count, std::size_t vocab,
                                      std::uint64_t seed) {
  Rng rng(seed);
  std::vector<int> t(count);
  for (int& x : t) x = static_cast<int>(rng.below(vocab));
  return t;
}

// XQW1 weight file: magic "XQW1"; d, n_layers, n_heads, g, vocab, d_ff as
// u32 LE; then f32 LE matrices in order: embed, per layer {attn_norm, w_q,
// w_k, w_v, w_o, mlp_norm, w_up, w_down}, final_norm, lm_head.
inline std::vector<std::uint8_t> save_weights(const Model& m) {
  io::ByteWriter w;
  w.magic("XQW1");
  for (std::size_t v : {m.cfg.d, m.cfg.n_layers, m.cfg.n_heads, m.cfg.g,
                        m.cfg.vocab, m.cfg.d_ff})
    w.u32(static_cast<std::uint32_t>(v));
  auto put = [&](std::span<const double> values) {
    for (double v : values) w.f32(static_cast<float>(v));
  };
  put(m.embed.data());
  for (const auto& l : m.layers) {
    put(l.attn_norm);
    put(l.w_q.data());
    put(l.w_k.data());
    put(l.w_v.data());
    put(l.w_o.data());
    put(l.mlp_norm);
    put(l.w_up.data());
    put(l.w_down.data());
  }
  put(m.final_norm);
  put(m.lm_head.data());
  return w.bytes();
}

inline Model load_weights(std::span<const std::uint8_t> bytes) {
  io::ByteReader r(bytes);
  r.expect_magic("XQW1");
  ModelConfig cfg;
  const std::size_t header_at = r.offset();
  cfg.d = r.u32("d");
  cfg.n_layers = r.u32("n_layers");
  cfg.n_heads = r.u32("n_heads");
  cfg.g = r.u32("g");
  cfg.vocab = r.u32("vocab");
  cfg.d_ff = r.u32("d_ff");
  try {
    cfg.validate();
  } catch (const ConfigError& e) {
    throw FormatError(std::string("inconsistent header: ") + e.what(), header_at);
  }
  auto take = [&](std::size_t rows, std::size_t cols, const char* what) {
    Matrix m(rows, cols);
    for (double& v : m.data()) v = static_cast<double>(r.f32(what));
    return m;
  };
  auto take_vec = [&](std::size_t n, const char* what) {
    std::vector<double> v(n);
    for (double& x : v) x = static_cast<double>(r.f32(what));
    return v;
  };
  Model m;
  m.cfg = cfg;
  const std::size_t d = cfg.d;
  m.embed = take(cfg.vocab, d, "embed");
  for (std::size_t i = 0; i < cfg.n_layers; ++i) {
    LayerWeights w;
    w.attn_norm = take_vec(d, "attn_norm");
    w.w_q = take(d, d, "w_q");
    w.w_k = take(d, cfg.kv_width(), "w_k");
    w.w_v = take(d, cfg.kv_width(), "w_v");
    w.w_o = take(d, d, "w_o");
    w.mlp_norm = take_vec(d, "mlp_norm");
    w.w_up = take(d, cfg.d_ff, "w_up");
    w.w_down = take(cfg.d_ff, d, "w_down");
    m.layers.push_back(std::move(w));
  }
  m.final_norm = take_vec(d, "final_norm");
  m.lm_head = take(d, cfg.vocab, "lm_head");
  if (r.remaining() != 0) throw FormatError("trailing bytes", r.offset());
  for (auto& w : m.layers) {
    if (!all_finite(w.w_k) || !all_finite(w.w_v))
      throw DataError("non-finite projection weights");
    w.prepare_factors();
  }
  return m;
}

}  // namespace xcache
