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
#include <span>
#include <string>
#include <vector>

#include "xcache/binary_io.hpp"
#include "xcache/errors.hpp"
#include "xcache/matrix.hpp"

namespace xcache {

// PerToken groups run along a row (channels of one token); PerChannel groups
// run down a column (one channel across group_size tokens).
enum class Axis : std::uint32_t { PerToken = 0, PerChannel = 1 };

inline constexpr int kPassthroughBits = 16;
inline constexpr std::size_t kDefaultGroupSize = 128;

struct QuantConfig {
  int bits = 4;
  Axis axis = Axis::PerToken;
  std::size_t group_size = kDefaultGroupSize;
  int scale_bits = 16;
  int zp_bits = 16;

  bool passthrough() const noexcept { return bits == kPassthroughBits; }

  void validate() const {
    if (bits != 2 && bits != 3 && bits != 4 && bits != 8 && bits != 16)
      throw ConfigError("quant bits must be one of {2,3,4,8,16}, got " +
                        std::to_string(bits));
    if (group_size < 1) throw ConfigError("quant group_size must be >= 1");
  }

  friend bool operator==(const QuantConfig&, const QuantConfig&) = default;
};

// Storage cost per element including 16-bit scale and zero point per group.
inline double bits_per_element(const QuantConfig& cfg) {
  cfg.validate();
  if (cfg.passthrough()) return 16.0;
  return cfg.bits + static_cast<double>(cfg.scale_bits + cfg.zp_bits) /
                        static_cast<double>(cfg.group_size);
}

// Little-endian bit stream over 64-bit words; code i occupies bits
// [i*bits, (i+1)*bits) of the stream.
class PackedCodes {
 public:
  PackedCodes() = default;
  explicit PackedCodes(int bits) : bits_(bits) {
    if (bits < 1 || bits > 32) throw ConfigError("PackedCodes: bad bit width");
  }

  int bits() const noexcept { return bits_; }
  std::size_t size() const noexcept { return count_; }
  const std::vector<std::uint64_t>& words() const noexcept { return words_; }

  static std::size_t words_for(std::size_t count, int bits) {
    return (count * static_cast<std::size_t>(bits) + 63) / 64;
  }

  void push_back(std::uint32_t code) {
    const std::size_t pos = count_ * static_cast<std::size_t>(bits_);
    const std::size_t word = pos / 64;
    const unsigned offset = pos % 64;
    if (words_.size() < words_for(count_ + 1, bits_)) words_.push_back(0);
    const std::uint64_t c = code & mask();
    words_[word] |= c << offset;
    if (offset + static_cast<unsigned>(bits_) > 64)
      words_[word + 1] |= c >> (64 - offset);
    ++count_;
  }

  std::uint32_t operator[](std::size_t i) const {
    const std::size_t pos = i * static_cast<std::size_t>(bits_);
    const std::size_t word = pos / 64;
    const unsigned offset = pos % 64;
    std::uint64_t v = words_[word] >> offset;
    if (offset + static_cast<unsigned>(bits_) > 64)
      v |= words_[word + 1] << (64 - offset);
    return static_cast<std::uint32_t>(v & mask());
  }

  std::vector<std::uint32_t> unpack() const {
    std::vector<std::uint32_t> out(count_);
    for (std::size_t i = 0; i < count_; ++i) out[i] = (*this)[i];
    return out;
  }

  static PackedCodes pack(std::span<const std::uint32_t> codes, int bits) {
    PackedCodes p(bits);
    p.words_.reserve(words_for(codes.size(), bits));
    for (std::uint32_t c : codes) p.push_back(c);
    return p;
  }

  static PackedCodes from_words(std::vector<std::uint64_t> words,
                                std::size_t count, int bits) {
    PackedCodes p(bits);
    if (words.size() != words_for(count, bits))
      throw ShapeError("PackedCodes: word count mismatch");
    p.words_ = std::move(words);
    p.count_ = count;
    return p;
  }

  friend bool operator==(const PackedCodes&, const PackedCodes&) = default;

 private:
  std::uint64_t mask() const noexcept {
    return bits_ >= 64 ? ~0ULL : ((1ULL << bits_) - 1);
  }

  int bits_ = 1;
  std::size_t count_ = 0;
  std::vector<std::uint64_t> words_;
};

// Grouped asymmetric uniform quantization of a rows x cols tensor. Scale and
// zero point are kept as doubles; their 16-bit storage cost only enters the
// bit accounting. A 16-bit config stores the input verbatim in `raw`.
struct QuantizedTensor {
  std::size_t rows = 0;
  std::size_t cols = 0;
  QuantConfig config;
  std::vector<double> scales;
  std::vector<double> zero_points;
  PackedCodes codes;
  Matrix raw;

  std::size_t group_count() const {
    if (config.passthrough()) return 0;
    const std::size_t g = config.group_size;
    if (config.axis == Axis::PerToken) return rows * ((cols + g - 1) / g);
    return ((rows + g - 1) / g) * cols;
  }

  std::size_t group_of(std::size_t r, std::size_t c) const {
    const std::size_t g = config.group_size;
    if (config.axis == Axis::PerToken) return r * ((cols + g - 1) / g) + c / g;
    return (r / g) * cols + c;
  }

  std::uint32_t code(std::size_t r, std::size_t c) const {
    return codes[r * cols + c];
  }
};

inline QuantizedTensor make_empty(std::size_t cols, const QuantConfig& cfg) {
  cfg.validate();
  QuantizedTensor q;
  q.cols = cols;
  q.config = cfg;
  if (cfg.passthrough()) {
    q.raw = Matrix(0, cols);
  } else {
    q.codes = PackedCodes(cfg.bits);
  }
  return q;
}

inline QuantizedTensor quantize(const Matrix& t, const QuantConfig& cfg) {
  cfg.validate();
  if (!all_finite(t)) throw DataError("quantize: non-finite input");
  QuantizedTensor q = make_empty(t.cols(), cfg);
  q.rows = t.rows();
  if (cfg.passthrough()) {
    q.raw = t;
    return q;
  }

  const std::size_t groups = q.group_count();
  std::vector<double> lo(groups, std::numeric_limits<double>::infinity());
  std::vector<double> hi(groups, -std::numeric_limits<double>::infinity());
  for (std::size_t r = 0; r < t.rows(); ++r)
    for (std::size_t c = 0; c < t.cols(); ++c) {
      const std::size_t g = q.group_of(r, c);
      lo[g] = std::min(lo[g], t(r, c));
      hi[g] = std::max(hi[g], t(r, c));
    }

  const double levels = static_cast<double>((1u << cfg.bits) - 1);
  q.scales.resize(groups);
  q.zero_points.resize(groups);
  for (std::size_t g = 0; g < groups; ++g) {
    q.zero_points[g] = lo[g];
    q.scales[g] = hi[g] > lo[g] ? (hi[g] - lo[g]) / levels : 1.0;
  }

  std::vector<std::uint32_t> codes(t.size());
  for (std::size_t r = 0; r < t.rows(); ++r)
    for (std::size_t c = 0; c < t.cols(); ++c) {
      const std::size_t g = q.group_of(r, c);
      double level = 0.0;
      if (hi[g] > lo[g])
        level = std::clamp(std::round((t(r, c) - lo[g]) / q.scales[g]), 0.0,
                           levels);
      codes[r * t.cols() + c] = static_cast<std::uint32_t>(level);
    }
  q.codes = PackedCodes::pack(codes, cfg.bits);
  return q;
}

inline Matrix dequantize(const QuantizedTensor& q) {
  if (q.config.passthrough()) return q.raw;
  Matrix out(q.rows, q.cols);
  for (std::size_t r = 0; r < q.rows; ++r)
    for (std::size_t c = 0; c < q.cols; ++c) {
      const std::size_t g = q.group_of(r, c);
      out(r, c) = q.code(r, c) * q.scales[g] + q.zero_points[g];
    }
  return out;
}

// Quantize `block` on its own and append it below q. Per-channel tensors only
// accept appends on a group boundary so group layout matches a one-shot
// quantize of the concatenation.
inline void append_block(QuantizedTensor& q, const Matrix& block) {
  if (block.cols() != q.cols)
    throw ShapeError("append_block: width " + std::to_string(block.cols()) +
                     " != " + std::to_string(q.cols));
  if (q.config.axis == Axis::PerChannel && !q.config.passthrough() &&
      q.rows % q.config.group_size != 0)
    throw UsageError("append_block: per-channel tensor not on group boundary");
  if (block.rows() == 0) return;
  QuantizedTensor b = quantize(block, q.config);
  if (q.config.passthrough()) {
    q.raw.append_rows(b.raw);
  } else {
    q.scales.insert(q.scales.end(), b.scales.begin(), b.scales.end());
    q.zero_points.insert(q.zero_points.end(), b.zero_points.begin(),
                         b.zero_points.end());
    for (std::size_t i = 0; i < b.codes.size(); ++i)
      q.codes.push_back(b.codes[i]);
  }
  q.rows += block.rows();
}

// Most recent tokens held in full precision until a whole group exists.
struct ResidualBuffer {
  Matrix tokens;
  std::size_t capacity = kDefaultGroupSize;

  ResidualBuffer() = default;
  ResidualBuffer(std::size_t cols, std::size_t cap)
      : tokens(0, cols), capacity(cap) {}

  std::size_t size() const noexcept { return tokens.rows(); }
};

// Append one token; flush the buffer into q when it reaches capacity.
inline void append_token(QuantizedTensor& q, ResidualBuffer& r,
                         std::span<const double> token) {
  if (token.size() != q.cols)
    throw ShapeError("append_token: token length " +
                     std::to_string(token.size()) + " != " +
                     std::to_string(q.cols));
  r.tokens.append_row(token);
  if (r.tokens.rows() >= r.capacity) {
    append_block(q, r.tokens);
    r.tokens.clear_rows();
  }
}

// XQT1 dump: magic, rows, cols, bits, axis, group_size (u32 LE), then
// scales and zero points (f64, one per group), then the packed code words
// (u64 LE). 16-bit tensors store rows*cols raw f64 values instead.
inline std::vector<std::uint8_t> serialize(const QuantizedTensor& q) {
  io::ByteWriter w;
  w.magic("XQT1");
  w.u32(static_cast<std::uint32_t>(q.rows));
  w.u32(static_cast<std::uint32_t>(q.cols));
  w.u32(static_cast<std::uint32_t>(q.config.bits));
  w.u32(static_cast<std::uint32_t>(q.config.axis));
  w.u32(static_cast<std::uint32_t>(q.config.group_size));
  if (q.config.passthrough()) {
    for (double v : q.raw.data()) w.f64(v);
    return w.bytes();
  }
  for (double s : q.scales) w.f64(s);
  for (double z : q.zero_points) w.f64(z);
  for (std::uint64_t word : q.codes.words()) w.u64(word);
  return w.bytes();
}

inline QuantizedTensor deserialize_xqt(std::span<const std::uint8_t> bytes) {
  io::ByteReader r(bytes);
  r.expect_magic("XQT1");
  QuantConfig cfg;
  const std::uint32_t rows = r.u32("rows");
  const std::uint32_t cols = r.u32("cols");
  const std::size_t bits_at = r.offset();
  cfg.bits = static_cast<int>(r.u32("bits"));
  const std::uint32_t axis = r.u32("axis");
  cfg.group_size = r.u32("group_size");
  if (axis > 1) throw FormatError("unknown axis " + std::to_string(axis), bits_at + 4);
  cfg.axis = static_cast<Axis>(axis);
  try {
    cfg.validate();
  } catch (const ConfigError& e) {
    throw FormatError(e.what(), bits_at);
  }
  QuantizedTensor q = make_empty(cols, cfg);
  q.rows = rows;
  if (cfg.passthrough()) {
    std::vector<double> data(static_cast<std::size_t>(rows) * cols);
    for (double& v : data) v = r.f64("raw values");
    q.raw = Matrix(rows, cols, std::move(data));
  } else {
    const std::size_t groups = q.group_count();
    q.scales.resize(groups);
    q.zero_points.resize(groups);
    for (double& s : q.scales) s = r.f64("scales");
    for (double& z : q.zero_points) z = r.f64("zero points");
    const std::size_t count = static_cast<std::size_t>(rows) * cols;
    std::vector<std::uint64_t> words(PackedCodes::words_for(count, cfg.bits));
    for (auto& word : words) word = r.u64("packed codes");
    q.codes = PackedCodes::from_words(std::move(words), count, cfg.bits);
  }
  if (r.remaining() != 0) throw FormatError("trailing bytes", r.offset());
  return q;
}

}  // namespace xcache
