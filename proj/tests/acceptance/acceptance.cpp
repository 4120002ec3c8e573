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

// Standalone acceptance run: one PASS/FAIL line per criterion, non-zero exit
// if any criterion fails.

#include <sys/wait.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <sstream>
#include <string>
#include <unistd.h>
#include <vector>

#include "../support/oracles.hpp"
#include "xcache/analysis.hpp"
#include "xcache/cache.hpp"
#include "xcache/commands.hpp"
#include "xcache/linalg.hpp"
#include "xcache/model.hpp"
#include "xcache/quant.hpp"
#include "xcache/sysmodel.hpp"

using namespace xcache;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool ok = true;
  std::string detail;

  void require(bool cond, const std::string& what) {
    if (!cond && ok) {
      ok = false;
      detail = what;
    }
  }
};

struct Criterion {
  int id;
  const char* title;
  double budget_s;
  std::function<Outcome()> body;
};

std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.6g", v);
  return buf;
}

fs::path scratch_dir() {
  static const fs::path dir = [] {
    fs::path p = fs::temp_directory_path() / ("xcache_acceptance_" + std::to_string(::getpid()));
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
  }();
  return dir;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::string write_file(const std::string& name, const std::string& text) {
  const fs::path p = scratch_dir() / name;
  std::ofstream(p, std::ios::binary) << text;
  return p.string();
}

int run_cli(const std::string& args, const std::string& out_name) {
  const std::string cmd = std::string("\"") + XCACHE_BIN + "\" " + args + " >\"" +
                          (scratch_dir() / out_name).string() + "\" 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::vector<std::vector<std::string>> csv_rows(const std::string& text) {
  std::vector<std::vector<std::string>> rows;
  std::istringstream in(text);
  std::string line;
  std::getline(in, line);
  while (std::getline(in, line)) {
    std::vector<std::string> cells;
    std::istringstream ls(line);
    std::string c;
    while (std::getline(ls, c, ',')) cells.push_back(c);
    rows.push_back(cells);
  }
  return rows;
}

bool within(double v, double target, double rel) { return std::abs(v - target) <= rel * target; }

// ---------------------------------------------------------------------------

const char* kRooflineConfig = R"({"schema": 1, "hardware": "h100", "variants": [
  {"name": "mha", "variant": "xq_mha", "d": 4096, "bits": 2, "weights": "mha12"},
  {"name": "gqa", "variant": "xq_gqa", "d": 4096, "g": 4, "bits": 2, "weights": "gqa_svd13"}]})";

Outcome breakeven() {
  Outcome o;
  const auto cfg = write_file("roofline.json", kRooflineConfig);
  const int rc = run_cli("roofline --config " + cfg, "roofline.csv");
  o.require(rc == 0, "roofline exit code " + std::to_string(rc));
  if (!o.ok) return o;
  const auto rows = csv_rows(slurp(scratch_dir() / "roofline.csv"));
  o.require(rows.size() == 2, "expected two rows");
  if (!o.ok) return o;
  const double mha = std::stod(rows[0][6]), gqa = std::stod(rows[1][6]);
  o.detail = "mha=" + fmt(mha) + " gqa=" + fmt(gqa);
  o.require(within(mha, 2281.0, 0.01), "mha breakeven " + fmt(mha));
  o.require(within(gqa, 40627.0, 0.01), "gqa breakeven " + fmt(gqa));
  return o;
}

Outcome kv_sizes() {
  Outcome o;
  const auto u = LayerPolicy::uniform();
  const LayerPolicy p{3, 4, 3};
  struct Case {
    Variant v;
    const LayerPolicy* policy;
    int bits;
    double expect;
  };
  const Case cases[] = {
      {Variant::Fp16Kv, &u, 16, 1.00}, {Variant::KiviKv, &u, 4, 0.27}, {Variant::XqMha, &u, 8, 0.26},
      {Variant::KiviKv, &u, 3, 0.20},  {Variant::KiviKv, &u, 2, 0.14}, {Variant::XqMha, &u, 4, 0.13},
      {Variant::XqMha, &u, 3, 0.10},   {Variant::KiviKv, &p, 4, 0.27}, {Variant::KiviKv, &p, 3, 0.21},
      {Variant::KiviKv, &p, 2, 0.15},  {Variant::XqclMha, &p, 4, 0.13}, {Variant::XqclMha, &p, 3, 0.10},
      {Variant::XqclMha, &p, 2, 0.08},
  };
  for (const auto& c : cases) {
    const double got = sysmodel::normalized_kv_size(c.v, *c.policy, c.bits, 4096, 1, 32);
    o.require(std::abs(got - c.expect) <= 0.005,
              std::string(variant_name(c.v)) + " " + std::to_string(c.bits) + "-bit " + fmt(got) +
                  " vs " + fmt(c.expect));
  }
  if (o.ok) o.detail = std::to_string(std::size(cases)) + " reference sizes";
  return o;
}

Outcome lossless() {
  Outcome o;
  double worst = 0.0;
  for (std::size_t g : {1u, 4u}) {
    ModelConfig c;
    c.g = g;
    const Model m = build_model(c);
    const auto tokens = random_tokens(256, c.vocab, 3);
    const Matrix ref = teacher_forced_logits(m, tokens, RunOptions{});
    const double scale = std::max(1.0, max_abs(ref));
    for (Variant v : kAllVariants)
      for (const LayerPolicy& policy : {LayerPolicy::uniform(), LayerPolicy{}}) {
        RunOptions r;
        r.variant = v;
        r.bits = 16;
        r.policy = policy;
        const double rel = max_abs_diff(teacher_forced_logits(m, tokens, r), ref) / scale;
        worst = std::max(worst, rel);
        o.require(rel <= 1e-8, std::string(variant_name(v)) + " g=" + std::to_string(g) +
                                   " relative error " + fmt(rel));
      }
  }
  if (o.ok) o.detail = "worst relative error " + fmt(worst);
  return o;
}

Outcome quantizer() {
  Outcome o;
  Rng rng(4);
  std::size_t groups = 0;
  for (int bits : {2, 3, 4, 8})
    for (Axis axis : {Axis::PerToken, Axis::PerChannel})
      for (std::size_t gs : {8u, 32u, 128u}) {
        QuantConfig cfg;
        cfg.bits = bits;
        cfg.axis = axis;
        cfg.group_size = gs;
        const std::size_t rows = axis == Axis::PerToken ? 256 : gs * 4, cols = axis == Axis::PerToken ? gs * 3 : 48;
        Matrix t(rows, cols);
        for (double& v : t.data()) v = rng.normal() * std::exp(rng.normal());
        const QuantizedTensor q = quantize(t, cfg);
        groups += q.group_count();
        const Matrix d = dequantize(q);
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t c = 0; c < cols; ++c) {
            const double s = q.scales[q.group_of(r, c)];
            o.require(std::abs(d(r, c) - t(r, c)) <= s / 2 + 1e-12,
                      "group error above scale/2 at bits=" + std::to_string(bits));
            o.require(q.code(r, c) < (1u << bits), "code out of range");
          }

        // token-at-a-time with a residual buffer
        QuantizedTensor streamed = make_empty(cols, cfg);
        ResidualBuffer buf(cols, axis == Axis::PerChannel ? gs : 1);
        for (std::size_t r = 0; r < rows; ++r) append_token(streamed, buf, t.row(r));
        o.require(buf.size() == 0, "residual buffer not drained");
        o.require(streamed.rows == q.rows && streamed.scales == q.scales &&
                      streamed.zero_points == q.zero_points &&
                      streamed.codes.words() == q.codes.words(),
                  "stream/batch mismatch at bits=" + std::to_string(bits));

        std::vector<std::uint32_t> values(1000);
        for (auto& v : values) v = static_cast<std::uint32_t>(rng.below(1u << bits));
        PackedCodes packed(bits);
        for (auto v : values) packed.push_back(v);
        o.require(packed.unpack() == values, "packing round-trip at bits=" + std::to_string(bits));
        o.require(packed.words().size() == PackedCodes::words_for(values.size(), bits),
                  "packed word count");
      }
  o.require(groups >= 10000, "only " + std::to_string(groups) + " groups checked");
  if (o.ok) o.detail = std::to_string(groups) + " groups";
  return o;
}

Outcome accumulator() {
  using testing_support::contribution_oracle;
  Outcome o;
  Rng rng(5);
  const std::size_t layers = 8, d = 64, tokens = 256, base = 3;
  double worst = 0.0;
  for (Variant v : {Variant::XqclMha, Variant::XqclGqa}) {
    std::vector<LayerWeights> ws(layers);
    for (auto& w : ws) {
      w.w_k = gen_weights(rng, d, d, 1.0 / std::sqrt(double(d)));
      w.w_v = gen_weights(rng, d, d, 1.0 / std::sqrt(double(d)));
      w.prepare_factors();
    }
    std::vector<CacheState> caches;
    for (std::size_t i = 0; i < layers; ++i) {
      CacheOptions co;
      co.bits = i < base ? 4 : 2;
      co.group_size = 32;
      co.delta = i >= base;
      caches.emplace_back(v, co, ws[i]);
    }
    std::vector<Matrix> xs;
    Matrix x(tokens, d);
    for (double& e : x.data()) e = rng.normal();
    for (std::size_t i = 0; i < layers; ++i) {
      xs.push_back(x);
      Matrix step(tokens, d);
      for (double& e : step.data()) e = 0.05 * rng.normal();
      x = add(x, step);
    }
    // a prefill chunk, then single tokens, each run through every layer
    std::vector<std::pair<std::size_t, std::size_t>> chunks = {{0, tokens - 37}};
    for (std::size_t t = tokens - 37; t < tokens; ++t) chunks.push_back({t, t + 1});
    Accumulator acc;
    for (const auto& [lo, hi] : chunks)
      for (std::size_t i = 0; i < layers; ++i) {
        append(caches[i], slice_rows(xs[i], lo, hi), ws[i], &acc);
        const std::size_t b = std::min(i, base - 1);
        Matrix sum = contribution_oracle(caches[b], ws[b], Matrix());
        for (std::size_t j = base; j <= i; ++j)
          sum = add(sum, contribution_oracle(caches[j], ws[j], sum));
        const double diff = max_abs_diff(acc.x_hat, sum) / std::max(1.0, max_abs(sum));
        worst = std::max(worst, diff);
        o.require(diff <= 1e-12, std::string(variant_name(v)) + " layer " + std::to_string(i) +
                                     " at token " + std::to_string(hi) + " differs by " + fmt(diff));
      }
  }
  if (o.ok) o.detail = "worst " + fmt(worst);
  return o;
}

Outcome cl_advantage() {
  Outcome o;
  ModelConfig c;
  c.mlp_scale = 0.03;
  const Model m = build_model(c);
  const auto tokens = random_tokens(256, c.vocab, 6);
  auto err = [&](Variant v, int bits, const LayerPolicy& p) {
    RunOptions r;
    r.variant = v;
    r.bits = bits;
    r.policy = p;
    return forward_teacher_forced(m, tokens, r).report.mean_logit_err;
  };
  const LayerPolicy policy;
  const double xq = err(Variant::XqMha, 2, policy), xqcl = err(Variant::XqclMha, 2, policy);
  const double xqg = err(Variant::XqGqa, 2, policy), xqclg = err(Variant::XqclGqa, 2, policy);
  o.require(xqcl < xq, "xqcl_mha " + fmt(xqcl) + " not below xq_mha " + fmt(xq));
  o.require(xqclg < xqg, "xqcl_gqa " + fmt(xqclg) + " not below xq_gqa " + fmt(xqg));
  for (const LayerPolicy& p : {LayerPolicy::uniform(), LayerPolicy{}})
    for (Variant v : kAllVariants) {
      double prev = -1.0;
      for (int bits : {8, 4, 3, 2}) {
        const double e = err(v, bits, p);
        o.require(e >= prev, std::string(variant_name(v)) + " not monotone at " +
                                 std::to_string(bits) + " bits");
        prev = e;
      }
    }
  if (o.ok) o.detail = "2-bit mean err xq_mha=" + fmt(xq) + " xqcl_mha=" + fmt(xqcl) +
                       " xq_gqa=" + fmt(xqg) + " xqcl_gqa=" + fmt(xqclg);
  return o;
}

Outcome outliers() {
  using namespace analysis;
  Outcome o;
  Rng rng(7);
  std::vector<LayerSample> dominant;
  for (int i = 0; i < 50; ++i) dominant.push_back(construct_dominant(rng, 64, 16, 64).sample);
  const double dom = evaluate_prediction(dominant, 1);
  o.require(dom == 1.0, "dominant top-1 accuracy " + fmt(dom));

  std::string failures;
  for (FailureKind kind : {FailureKind::CompetingChannel, FailureKind::SignCancellation}) {
    std::vector<LayerSample> layers;
    for (int i = 0; i < 20; ++i) layers.push_back(construct_failure(rng, 64, 16, 64, kind).sample);
    const double acc = evaluate_prediction(layers, 1);
    o.require(acc < 1.0, "failure construction reached top-1 accuracy 1.0");
    failures += " " + fmt(acc);
  }

  // same weights, unrelated activations: identical predictions
  for (const auto& s : dominant) {
    Matrix other(s.x.rows() + 5, s.x.cols());
    for (double& e : other.data()) e = rng.normal();
    const LayerSample again = make_sample(s.w_k, other);
    o.require(predict_outlier_channels(again.svd_k, 3).indices ==
                  predict_outlier_channels(s.svd_k, 3).indices,
              "prediction changed with activations");
  }
  if (o.ok) o.detail = "dominant=" + fmt(dom) + " failures=" + failures.substr(1);
  return o;
}

Outcome svd() {
  Outcome o;
  Rng rng(8);
  double worst_rec = 0.0, worst_orth = 0.0;
  for (int i = 0; i < 100; ++i) {
    const std::size_t n = 1 + rng.below(32);
    const std::size_t m = n + rng.below(129 - n);
    Matrix w(m, n);
    for (double& e : w.data()) e = rng.normal();
    const SvdFactors f = svd_thin(w);
    const double rec = max_abs_diff(matmul(f.u, fuse_sigma_bt(f)), w) / std::max(1e-300, max_abs(w));
    const double orth = std::max(max_abs_diff(matmul(transpose(f.u), f.u), Matrix::identity(n)),
                                 max_abs_diff(matmul(f.b_t, transpose(f.b_t)), Matrix::identity(n)));
    worst_rec = std::max(worst_rec, rec);
    worst_orth = std::max(worst_orth, orth);
    o.require(rec <= 1e-8, "reconstruction " + fmt(rec) + " on " + std::to_string(m) + "x" + std::to_string(n));
    o.require(orth <= 1e-10, "orthonormality " + fmt(orth));
    o.require(std::is_sorted(f.sigma.rbegin(), f.sigma.rend()), "sigma not descending");
  }
  if (o.ok) o.detail = "reconstruction " + fmt(worst_rec) + " orthonormality " + fmt(worst_orth);
  return o;
}

Outcome determinism() {
  Outcome o;
  const auto eval = write_file("eval.json", R"({"schema": 1,
    "model": {"d": 64, "n_layers": 4, "n_heads": 4, "g": 2, "mlp_scale": 0.03},
    "variants": ["fp16", "kivi", "xq_mha", "xq_gqa", "xqcl_mha", "xqcl_gqa"],
    "bits": [2, 4], "policy": "default", "seq_len": 64, "decode_steps": 4})");
  const auto roof = write_file("roofline2.json", kRooflineConfig);
  const auto outl = write_file("outliers.json", R"({"schema": 1, "source": "competing", "k": [1, 2]})");
  const auto model = write_file("model.json", R"({"schema": 1, "model": {"d": 64, "n_layers": 2}})");
  const std::pair<std::string, std::string> jobs[] = {
      {"eval --config " + eval, "eval"},
      {"roofline --config " + roof, "roof"},
      {"outliers --config " + outl, "outl"},
  };
  for (const auto& [args, tag] : jobs) {
    const int a = run_cli(args, tag + "_a.csv"), b = run_cli(args, tag + "_b.csv");
    o.require(a == 0 && b == 0, tag + " exited with " + std::to_string(a) + "/" + std::to_string(b));
    const auto x = slurp(scratch_dir() / (tag + "_a.csv"));
    o.require(!x.empty() && x == slurp(scratch_dir() / (tag + "_b.csv")), tag + " output differs");
  }
  const auto dir = scratch_dir().string();
  for (const char* name : {"w_a.xqw", "w_b.xqw"})
    o.require(run_cli("weights save --config " + model + " --out " + dir + "/" + name, "w.log") == 0,
              "weights save failed");
  const auto wa = slurp(scratch_dir() / "w_a.xqw");
  o.require(!wa.empty() && wa == slurp(scratch_dir() / "w_b.xqw"), "XQW1 files differ");
  if (o.ok) o.detail = "3 CSV reports and 1 XQW1 file";
  return o;
}

}  // namespace

int main() {
  const Criterion criteria[] = {
      {1, "breakeven lengths", 1.0, breakeven},
      {2, "normalized KV sizes", 1.0, kv_sizes},
      {3, "16-bit paths are lossless", 30.0, lossless},
      {4, "quantizer contract", 30.0, quantizer},
      {5, "accumulator equals from-scratch sum", 10.0, accumulator},
      {6, "cross-layer advantage and monotone bits", 120.0, cl_advantage},
      {7, "outlier-channel prediction", 10.0, outliers},
      {8, "SVD numerics", 10.0, svd},
      {9, "deterministic CLI artifacts", 0.0, determinism},
  };
  int failed = 0;
  for (const auto& c : criteria) {
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = c.body();
    } catch (const std::exception& e) {
      o.ok = false;
      o.detail = std::string("exception: ") + e.what();
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (o.ok && c.budget_s > 0.0 && secs > c.budget_s) {
      o.ok = false;
      o.detail = "took " + fmt(secs) + " s, budget " + fmt(c.budget_s) + " s";
    }
    if (!o.ok) ++failed;
    std::cout << (o.ok ? "PASS" : "FAIL") << " criterion " << c.id << ": " << c.title << " ("
              << o.detail << "; " << fmt(secs) << " s)" << std::endl;
  }
  fs::remove_all(scratch_dir());
  return failed == 0 ? 0 : 1;
}
