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

#include <cstdint>
#include <fstream>
#include <set>
#include <string>
#include <vector>

#include "json.hpp"
#include "xcache/errors.hpp"

namespace xcache::config {

using json = nlohmann::json;

inline json parse_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config '" + path + "'");
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError("config '" + path + "' is not valid JSON: " + e.what());
  }
}

// Typed, path-aware view of one JSON object. Every key read is recorded;
// finish() rejects keys nobody asked for.
class Fields {
 public:
  Fields(const json& j, std::string path) : j_(&j), path_(std::move(path)) {
    if (!j.is_object()) fail("", "expected an object");
  }

  bool has(const std::string& key) const { return j_->contains(key); }

  const json& raw(const std::string& key) {
    seen_.insert(key);
    if (!j_->contains(key)) fail(key, "missing required field");
    return j_->at(key);
  }

  std::uint64_t count(const std::string& key, std::uint64_t def,
                      std::uint64_t min = 1) {
    if (!mark(key)) return def;
    const json& v = j_->at(key);
    if (!v.is_number_integer() || v.get<std::int64_t>() < static_cast<std::int64_t>(min))
      fail(key, "expected an integer >= " + std::to_string(min));
    return v.get<std::uint64_t>();
  }

  std::uint64_t require_count(const std::string& key, std::uint64_t min = 1) {
    if (!has(key)) fail(key, "missing required field");
    return count(key, 0, min);
  }

  double real(const std::string& key, double def) {
    if (!mark(key)) return def;
    const json& v = j_->at(key);
    if (!v.is_number()) fail(key, "expected a number");
    return v.get<double>();
  }

  double require_real(const std::string& key) {
    if (!has(key)) fail(key, "missing required field");
    return real(key, 0.0);
  }

  bool flag(const std::string& key, bool def) {
    if (!mark(key)) return def;
    const json& v = j_->at(key);
    if (!v.is_boolean()) fail(key, "expected true or false");
    return v.get<bool>();
  }

  std::string text(const std::string& key, const std::string& def) {
    if (!mark(key)) return def;
    const json& v = j_->at(key);
    if (!v.is_string()) fail(key, "expected a string");
    return v.get<std::string>();
  }

  std::string require_text(const std::string& key) {
    if (!has(key)) fail(key, "missing required field");
    return text(key, "");
  }

  const json& array(const std::string& key) {
    const json& v = raw(key);
    if (!v.is_array() || v.empty()) fail(key, "expected a non-empty array");
    return v;
  }

  std::string child_path(const std::string& key) const {
    return path_.empty() ? key : path_ + "." + key;
  }

  [[noreturn]] void fail(const std::string& key, const std::string& msg) const {
    const std::string where = key.empty() ? path_ : child_path(key);
    throw ConfigError("config error at '" + (where.empty() ? "<root>" : where) +
                      "': " + msg);
  }

  void finish() const {
    for (auto it = j_->begin(); it != j_->end(); ++it)
      if (!seen_.count(it.key())) fail(it.key(), "unknown key");
  }

 private:
  bool mark(const std::string& key) {
    seen_.insert(key);
    return j_->contains(key);
  }

  const json* j_;
  std::string path_;
  std::set<std::string> seen_;
};

inline void check_schema(Fields& f) {
  if (!f.has("schema")) f.fail("schema", "missing required field (expected 1)");
  if (f.count("schema", 0, 0) != 1) f.fail("schema", "unsupported schema version");
}

}  // namespace xcache::config
