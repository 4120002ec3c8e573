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

#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "xcache/commands.hpp"

namespace {

using namespace xcache;

void emit(const std::string& text, const std::string& out) {
  if (out.empty() || out == "-") {
    std::cout << text;
    return;
  }
  std::ofstream f(out, std::ios::binary);
  if (!f) throw ConfigError("cannot open output '" + out + "'");
  f << text;
  if (!f) throw ConfigError("failed writing '" + out + "'");
}

int fail(const char* kind, const std::exception& e, int code) {
  std::cerr << "xcache: ";
  if (kind) std::cerr << kind << ": ";
  std::cerr << e.what() << "\n";
  return code;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"xcache: activation-cache quantization experiments"};
  app.require_subcommand(1);

  std::string config_path, out_path, in_path, action;
  std::optional<std::uint64_t> seed;
  bool eq4_text = false;

  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--out", out_path, "output path (default stdout)");
    sub->add_option("--seed", seed, "override the config seed");
  };

  auto* eval = app.add_subcommand("eval", "logit error of each cache backend vs FP");
  eval->add_option("--config", config_path)->required();
  add_common(eval);

  auto* roofline = app.add_subcommand("roofline", "breakeven lengths and cache sizes");
  roofline->add_option("--config", config_path)->required();
  roofline->add_flag("--eq4-text-variant", eq4_text,
                     "count both latent K and V in xq_gqa cache traffic");
  add_common(roofline);

  auto* outliers = app.add_subcommand("outliers", "Keys outlier-channel prediction");
  outliers->add_option("--config", config_path)->required();
  add_common(outliers);

  auto* weights = app.add_subcommand("weights", "save, load or inspect XQW1 files");
  weights->add_option("action", action)->required()->check(
      CLI::IsMember({"save", "load", "inspect"}));
  weights->add_option("--config", config_path, "model config (save)");
  weights->add_option("--in", in_path, "XQW1 file (load, inspect)");
  add_common(weights);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : cli::kExitConfig;
  }

  cli::CommandOptions opts;
  opts.seed = seed;
  opts.eq4_text_variant = eq4_text;

  try {
    if (eval->parsed()) {
      emit(cli::run_eval(config::parse_file(config_path), opts), out_path);
    } else if (roofline->parsed()) {
      emit(cli::run_roofline(config::parse_file(config_path), opts), out_path);
    } else if (outliers->parsed()) {
      emit(cli::run_outliers(config::parse_file(config_path), opts), out_path);
    } else if (action == "save") {
      if (config_path.empty()) throw ConfigError("weights save needs --config");
      if (out_path.empty()) throw ConfigError("weights save needs --out");
      io::write_file(out_path, cli::weights_save(config::parse_file(config_path), opts));
    } else {
      if (in_path.empty()) throw ConfigError("weights " + action + " needs --in");
      const auto bytes = io::read_file(in_path);
      if (action == "inspect") {
        emit(cli::weights_inspect(bytes), out_path);
      } else {
        const Model m = load_weights(bytes);
        if (!out_path.empty()) io::write_file(out_path, save_weights(m));
      }
    }
  } catch (const ConfigError& e) {
    return fail(nullptr, e, cli::kExitConfig);
  } catch (const FormatError& e) {
    return fail("format error", e, cli::kExitConfig);
  } catch (const UsageError& e) {
    return fail("usage error", e, cli::kExitConfig);
  } catch (const NumericalError& e) {
    return fail("numerical error", e, cli::kExitNumerical);
  } catch (const DataError& e) {
    return fail("data error", e, cli::kExitNumerical);
  } catch (const InvariantError& e) {
    return fail("invariant violated", e, cli::kExitInvariant);
  } catch (const std::exception& e) {
    return fail("internal error", e, cli::kExitInvariant);
  }
  return cli::kExitOk;
}
