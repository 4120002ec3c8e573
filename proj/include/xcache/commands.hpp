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
#include <atomic>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "xcache/analysis.hpp"
#include "xcache/binary_io.hpp"
#include "xcache/config.hpp"
#include "xcache/errors.hpp"
#include "xcache/model.hpp"
#include "xcache/sysmodel.hpp"
#include "xcache/variant.hpp"

// Implementation of the xcache subcommands. Each run_* function takes a
// parsed JSON config and returns the report text; tools/xcache.cpp handles
// files and exit codes.
namespace xcache::cli {

using config::Fields;
using config::json;

enum ExitCode : int {
  kExitOk = 0,
  kExitConfig = 2,
  kExitNumerical = 3,
  kExitInvariant = 4,
};

struct CommandOptions {
  std::optional<std::uint64_t> seed;
  bool eq4_text_variant = false;
};

// 17 significant digits: round-trips every double.
inline std::string fmt_real(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline std::size_t worker_count(std::size_t jobs) {
  std::size_t n = std::max<std::size_t>(1, std::thread::hardware_concurrency());
  if (const char* env = std::getenv("XCACHE_THREADS")) {
    const long cap = std::strtol(env, nullptr, 10);
    if (cap >= 1) n = std::min(n, static_cast<std::size_t>(cap));
  }
  return std::min(n, std::max<std::size_t>(jobs, 1));
}

// Runs job(i) for i in [0, jobs) on a small pool; results are stored by index
// by the caller so output order does not depend on scheduling.
template <typename Job>
void parallel_for(std::size_t jobs, Job job) {
  const std::size_t workers = worker_count(jobs);
  if (workers <= 1) {
    for (std::size_t i = 0; i < jobs; ++i) job(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::exception_ptr> errors(jobs);
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < workers; ++w)
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < jobs; i = next++) {
        try {
          job(i);
        } catch (...) {
          errors[i] = std::current_exception();
        }
      }
    });
  for (auto& t : pool) t.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

inline ModelConfig parse_model(Fields f) {
  ModelConfig c;
  c.d = f.count("d", c.d);
  c.n_layers = f.count("n_layers", c.n_layers);
  c.n_heads = f.count("n_heads", c.n_heads);
  c.g = f.count("g", c.g);
  c.vocab = f.count("vocab", c.vocab);
  c.d_ff = f.count("d_ff", c.d_ff);
  c.mlp_scale = f.real("mlp_scale", c.mlp_scale);
  c.seed = f.count("seed", c.seed, 0);
  c.rope_theta = f.real("rope_theta", c.rope_theta);
  f.finish();
  try {
    c.validate();
  } catch (const ConfigError& e) {
    f.fail("", e.what());
  }
  return c;
}

inline LayerPolicy parse_policy(Fields& parent, const std::string& key) {
  const json& v = parent.raw(key);
  if (v.is_string()) {
    const auto s = v.get<std::string>();
    if (s == "uniform") return LayerPolicy::uniform();
    if (s == "default") return LayerPolicy{};
    parent.fail(key, "expected \"uniform\", \"default\" or an object");
  }
  Fields f(v, parent.child_path(key));
  LayerPolicy p;
  p.high_precision_prefix = f.count("high_precision_prefix", p.high_precision_prefix, 0);
  p.prefix_bits = static_cast<int>(f.count("prefix_bits", p.prefix_bits, 2));
  p.base_layers = f.count("base_layers", p.base_layers, 1);
  f.finish();
  try {
    p.validate();
  } catch (const ConfigError& e) {
    f.fail("", e.what());
  }
  return p;
}

inline int parse_bits(const json& v, const Fields& f, const std::string& key) {
  if (!v.is_number_integer()) f.fail(key, "bit widths must be integers");
  const int b = v.get<int>();
  if (b != 2 && b != 3 && b != 4 && b != 8 && b != 16)
    f.fail(key, "bit width " + std::to_string(b) + " not in {2,3,4,8,16}");
  return b;
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

struct EvalPlan {
  Model model;
  std::vector<Variant> variants;
  std::vector<int> bits;
  LayerPolicy policy;
  std::size_t seq_len = 256;
  std::size_t decode_steps = 0;
  std::size_t group_size = kDefaultGroupSize;
  std::uint64_t seed = 1;
  bool fp16_outlier_channel = false;
};

inline EvalPlan parse_eval(const json& j, const CommandOptions& opts) {
  Fields f(j, "");
  config::check_schema(f);
  EvalPlan p;
  const bool has_model = f.has("model");
  const bool has_weights = f.has("weights");
  if (has_model == has_weights)
    f.fail("model", "exactly one of 'model' or 'weights' is required");
  if (has_model) {
    p.model = build_model(parse_model(Fields(f.raw("model"), "model")));
  } else {
    const auto path = f.text("weights", "");
    p.model = load_weights(io::read_file(path));
  }
  for (const auto& v : f.array("variants")) {
    if (!v.is_string()) f.fail("variants", "expected variant names");
    try {
      p.variants.push_back(parse_variant(v.get<std::string>()));
    } catch (const ConfigError& e) {
      f.fail("variants", e.what());
    }
  }
  for (const auto& b : f.array("bits")) p.bits.push_back(parse_bits(b, f, "bits"));
  p.policy = f.has("policy") ? parse_policy(f, "policy") : LayerPolicy::uniform();
  p.seq_len = f.count("seq_len", p.seq_len);
  p.decode_steps = f.count("decode_steps", 0, 0);
  p.group_size = f.count("group_size", p.group_size);
  p.seed = f.count("seed", p.seed, 0);
  p.fp16_outlier_channel = f.flag("fp16_outlier_channel", false);
  f.finish();
  if (opts.seed) p.seed = *opts.seed;
  if (p.fp16_outlier_channel)
    for (Variant v : p.variants)
      if (v != Variant::XqGqa)
        f.fail("fp16_outlier_channel", "only valid when every variant is xq_gqa");
  return p;
}

inline std::string run_eval(const json& j, const CommandOptions& opts = {}) {
  const EvalPlan plan = parse_eval(j, opts);
  const auto tokens = random_tokens(plan.seq_len, plan.model.cfg.vocab, plan.seed);

  RunOptions fp;
  fp.group_size = plan.group_size;
  const Matrix reference = teacher_forced_logits(plan.model, tokens, fp);
  std::vector<int> fp_generated;
  if (plan.decode_steps > 0)
    fp_generated = generate(plan.model, tokens, plan.decode_steps, fp).tokens;

  struct Row {
    RunOptions opts;
    EvalReport report;
    double decode_match = 0.0;
  };
  std::vector<Row> rows;
  for (Variant v : plan.variants)
    for (int b : plan.bits) {
      // fp16 has a single row whatever the bit list
      if (v == Variant::Fp16Kv && b != plan.bits.front()) continue;
      Row r;
      r.opts.variant = v;
      r.opts.bits = b;
      r.opts.policy = plan.policy;
      r.opts.group_size = plan.group_size;
      r.opts.fp16_outlier_channel = plan.fp16_outlier_channel;
      rows.push_back(r);
    }

  parallel_for(rows.size(), [&](std::size_t i) {
    Row& r = rows[i];
    const Matrix logits = teacher_forced_logits(plan.model, tokens, r.opts);
    r.report = compare_logits(logits, reference, tokens, plan.model, r.opts);
    if (r.report.bits == 16 && r.report.max_logit_err > 1e-8 * std::max(1.0, max_abs(reference)))
      throw InvariantError("16-bit " + std::string(variant_name(r.opts.variant)) +
                           " deviates from the FP baseline by " +
                           fmt_real(r.report.max_logit_err));
    if (plan.decode_steps > 0) {
      const auto gen = generate(plan.model, tokens, plan.decode_steps, r.opts).tokens;
      std::size_t same = 0;
      for (std::size_t t = 0; t < gen.size(); ++t) same += gen[t] == fp_generated[t];
      r.decode_match = static_cast<double>(same) / static_cast<double>(gen.size());
    }
  });

  std::ostringstream out;
  out << "variant,bits,max_logit_err,mean_logit_err,nll_delta,normalized_cache_size";
  if (plan.decode_steps > 0) out << ",decode_match";
  out << "\n";
  for (const Row& r : rows) {
    out << variant_name(r.opts.variant) << ',' << r.report.bits << ','
        << fmt_real(r.report.max_logit_err) << ','
        << fmt_real(r.report.mean_logit_err) << ','
        << fmt_real(r.report.nll_delta) << ','
        << fmt_real(r.report.normalized_cache_bits);
    if (plan.decode_steps > 0) out << ',' << fmt_real(r.decode_match);
    out << "\n";
  }
  return out.str();
}

// ---------------------------------------------------------------------------
// roofline
// ---------------------------------------------------------------------------

inline sysmodel::HardwareProfile parse_hardware(Fields& parent) {
  const json& v = parent.raw("hardware");
  if (v.is_string()) {
    if (v.get<std::string>() == "h100") return sysmodel::HardwareProfile::h100();
    parent.fail("hardware", "unknown profile name (known: h100)");
  }
  Fields f(v, "hardware");
  sysmodel::HardwareProfile hw;
  hw.peak_flops = f.require_real("peak_flops");
  hw.mem_bw = f.require_real("mem_bw");
  f.finish();
  if (!(hw.peak_flops > 0.0)) f.fail("peak_flops", "must be > 0");
  if (!(hw.mem_bw > 0.0)) f.fail("mem_bw", "must be > 0");
  return hw;
}

inline sysmodel::ReportConfig parse_roofline_row(const json& j,
                                                 const std::string& path,
                                                 const CommandOptions& opts) {
  Fields f(j, path);
  sysmodel::ReportConfig rc;
  auto& m = rc.model;
  try {
    m.variant = parse_variant(f.require_text("variant"));
  } catch (const ConfigError& e) {
    f.fail("variant", e.what());
  }
  rc.name = f.text("name", std::string(variant_name(m.variant)));
  m.d = static_cast<double>(f.require_count("d"));
  m.g = static_cast<double>(f.count("g", 1));
  m.e = parse_bits(f.raw("bits"), f, "bits");
  m.e_b = static_cast<int>(f.count("e_b", 4));
  m.n_layers = f.count("n_layers", 32);
  m.group_size = f.count("group_size", kDefaultGroupSize);
  m.fp16_outlier_channel = f.flag("fp16_outlier_channel", false);
  m.eq4_text_variant = f.flag("eq4_text_variant", opts.eq4_text_variant);
  m.policy = f.has("policy") ? parse_policy(f, "policy") : LayerPolicy::uniform();
  rc.seq_len = f.real("seq_len", rc.seq_len);
  if (f.has("weights")) {
    const json& w = f.raw("weights");
    if (w.is_number()) {
      m.weights = sysmodel::WeightBytes::Custom;
      m.custom_weight_bytes = w.get<double>();
    } else if (w == "none") {
      m.weights = sysmodel::WeightBytes::None;
    } else if (w == "mha12") {
      m.weights = sysmodel::WeightBytes::Mha12;
    } else if (w == "gqa_svd13") {
      m.weights = sysmodel::WeightBytes::GqaSvd13;
    } else {
      f.fail("weights", "expected none|mha12|gqa_svd13 or a byte count");
    }
  }
  f.finish();
  try {
    m.validate();
  } catch (const ConfigError& e) {
    f.fail("", e.what());
  }
  return rc;
}

inline std::string run_roofline(const json& j, const CommandOptions& opts = {}) {
  Fields f(j, "");
  config::check_schema(f);
  const auto hw = parse_hardware(f);
  std::vector<sysmodel::ReportConfig> configs;
  const json& rows = f.array("variants");
  for (std::size_t i = 0; i < rows.size(); ++i)
    configs.push_back(parse_roofline_row(rows[i], "variants[" + std::to_string(i) + "]", opts));
  f.finish();

  std::ostringstream out;
  out << "name,variant,bits,d,g,normalized_kv_size,breakeven_length,seq_len,"
         "remat_flops,bytes,intensity,ridge_point\n";
  for (const auto& r : sysmodel::report_variants(hw, configs)) {
    out << r.name << ',' << variant_name(r.variant) << ',' << r.bits << ','
        << fmt_real(r.d) << ',' << fmt_real(r.g) << ','
        << fmt_real(r.normalized_size) << ','
        << (r.breakeven ? fmt_real(*r.breakeven) : std::string("unbounded"))
        << ',' << fmt_real(r.seq_len) << ',' << fmt_real(r.flops) << ','
        << fmt_real(r.bytes) << ',' << fmt_real(r.intensity) << ','
        << fmt_real(hw.ridge_point()) << "\n";
  }
  return out.str();
}

// ---------------------------------------------------------------------------
// outliers
// ---------------------------------------------------------------------------

inline std::string run_outliers(const json& j, const CommandOptions& opts = {}) {
  Fields f(j, "");
  config::check_schema(f);
  const std::string source = f.text("source", "dominant");
  std::uint64_t seed = f.count("seed", 1, 0);
  if (opts.seed) seed = *opts.seed;
  const std::size_t tokens = f.count("tokens", 64);
  std::vector<std::size_t> ks;
  if (f.has("k")) {
    for (const auto& k : f.array("k")) {
      if (!k.is_number_integer() || k.get<std::int64_t>() < 0)
        f.fail("k", "expected non-negative integers");
      ks.push_back(k.get<std::size_t>());
    }
  } else {
    ks = {1, 2, 4, 8};
  }

  std::vector<analysis::LayerSample> samples;
  if (source == "model") {
    ModelConfig mc = parse_model(Fields(f.raw("model"), "model"));
    const Model model = build_model(mc);
    Session s(model, RunOptions{});
    std::vector<Matrix> inputs;
    s.capture_layer_inputs(&inputs);
    s.forward(random_tokens(tokens, mc.vocab, seed));
    for (std::size_t i = 0; i < model.layers.size(); ++i)
      samples.push_back({model.layers[i].w_k, model.layers[i].svd_k, inputs[i]});
  } else {
    const std::size_t layers = f.count("layers", 8);
    const std::size_t d = f.count("d", 64);
    const std::size_t r = f.count("latent", 16);
    if (r > d) f.fail("latent", "must not exceed d");
    Rng rng(seed);
    for (std::size_t i = 0; i < layers; ++i) {
      if (source == "dominant") {
        samples.push_back(analysis::construct_dominant(rng, d, r, tokens).sample);
      } else if (source == "competing") {
        samples.push_back(analysis::construct_failure(
            rng, d, r, tokens, analysis::FailureKind::CompetingChannel).sample);
      } else if (source == "sign_cancellation") {
        samples.push_back(analysis::construct_failure(
            rng, d, r, tokens, analysis::FailureKind::SignCancellation).sample);
      } else {
        f.fail("source", "expected dominant|competing|sign_cancellation|model");
      }
    }
  }
  f.finish();
  const std::size_t width = samples.front().svd_k.b_t.cols();
  for (std::size_t k : ks)
    if (k > width) f.fail("k", "k=" + std::to_string(k) + " exceeds latent width " + std::to_string(width));

  std::ostringstream out;
  out << "layer,ground_truth,k,predicted,correct\n";
  for (std::size_t k : ks) {
    for (std::size_t i = 0; i < samples.size(); ++i) {
      const auto& s = samples[i];
      const std::size_t truth = analysis::key_outlier_channel(s.x, s.w_k);
      const auto pred = analysis::predict_outlier_channels(s.svd_k, k);
      out << i << ',' << truth << ',' << k << ',';
      for (std::size_t p = 0; p < pred.indices.size(); ++p)
        out << (p ? ";" : "") << pred.indices[p];
      out << ',' << (pred.contains(truth) ? 1 : 0) << "\n";
    }
    out << "all,," << k << ",," << fmt_real(analysis::evaluate_prediction(samples, k)) << "\n";
  }
  return out.str();
}

// ---------------------------------------------------------------------------
// weights
// ---------------------------------------------------------------------------

inline std::vector<std::uint8_t> weights_save(const json& j,
                                              const CommandOptions& opts = {}) {
  Fields f(j, "");
  config::check_schema(f);
  ModelConfig mc = parse_model(Fields(f.raw("model"), "model"));
  f.finish();
  if (opts.seed) mc.seed = *opts.seed;
  return save_weights(build_model(mc));
}

inline std::string weights_inspect(std::span<const std::uint8_t> bytes) {
  const Model m = load_weights(bytes);
  std::ostringstream out;
  out << "magic XQW1\n"
      << "d " << m.cfg.d << "\n"
      << "n_layers " << m.cfg.n_layers << "\n"
      << "n_heads " << m.cfg.n_heads << "\n"
      << "g " << m.cfg.g << "\n"
      << "vocab " << m.cfg.vocab << "\n"
      << "d_ff " << m.cfg.d_ff << "\n"
      << "bytes " << bytes.size() << "\n";
  return out.str();
}

}  // namespace xcache::cli
