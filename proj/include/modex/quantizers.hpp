#pragma once

// INT4 (per-channel symmetric, per-token asymmetric) and OCP MXFP4 codecs.
//
// Rounding is round-half-to-even everywhere. Codes are stored packed, two per
// byte, low nibble first. Dequantization depends only on (codes, scales,
// zero points); there is no hidden state.

#include <algorithm>
#include <array>
#include <cfenv>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "modex/errors.hpp"
#include "modex/numerics.hpp"

namespace modex {

enum class QuantKind : std::uint8_t {
  int4_sym_per_channel = 0,
  int4_asym_per_token = 1,
  mxfp4 = 2,
};

/// For MXFP4: `rows` groups 32 consecutive rows of one column (weights, whose
/// rows are input channels); `cols` groups 32 consecutive columns of one row
/// (activations, whose columns are channels).
enum class GroupAxis : std::uint8_t { rows = 0, cols = 1 };

struct QuantScheme {
  QuantKind kind = QuantKind::int4_sym_per_channel;
  std::size_t group_size = 0;
  GroupAxis axis = GroupAxis::rows;

  static QuantScheme int4_sym() { return {QuantKind::int4_sym_per_channel, 0, GroupAxis::rows}; }
  static QuantScheme int4_asym() { return {QuantKind::int4_asym_per_token, 0, GroupAxis::cols}; }
  static QuantScheme mxfp4(GroupAxis axis = GroupAxis::rows) {
    return {QuantKind::mxfp4, 32, axis};
  }

  bool operator==(const QuantScheme&) const = default;
};

inline std::string to_string(QuantKind k) {
  switch (k) {
    case QuantKind::int4_sym_per_channel: return "int4_sym_per_channel";
    case QuantKind::int4_asym_per_token: return "int4_asym_per_token";
    case QuantKind::mxfp4: return "mxfp4";
  }
  return "unknown";
}

// ---------------------------------------------------------------------------
// E2M1 element format
// ---------------------------------------------------------------------------

/// Non-negative half of the E2M1 codebook, indexed by the 3 magnitude bits.
inline constexpr std::array<double, 8> e2m1_magnitudes = {0.0, 0.5, 1.0, 1.5, 2.0, 3.0, 4.0, 6.0};
inline constexpr int e2m1_emax = 2;
inline constexpr std::size_t mx_group_size = 32;

/// Value of a 4-bit E2M1 code (bit 3 = sign).
inline double e2m1_value(std::uint8_t code) {
  const double mag = e2m1_magnitudes[code & 0x7];
  return (code & 0x8) ? -mag : mag;
}

/// Nearest E2M1 code to v; ties go to the even magnitude index; saturates at ±6.
inline std::uint8_t e2m1_encode(double v) {
  const double a = std::abs(v);
  std::uint8_t best = 7;
  if (a < e2m1_magnitudes[7]) {
    for (std::uint8_t i = 0; i < 7; ++i) {
      const double lo = e2m1_magnitudes[i];
      const double hi = e2m1_magnitudes[i + 1];
      if (a <= hi) {
        const double dlo = a - lo;
        const double dhi = hi - a;
        if (dlo < dhi) best = i;
        else if (dhi < dlo) best = i + 1;
        else best = (i % 2 == 0) ? i : i + 1;
        break;
      }
    }
  }
  if (best == 0) return 0;
  return v < 0.0 ? static_cast<std::uint8_t>(best | 0x8) : best;
}

inline double e8m0_scale(std::uint8_t code) { return std::ldexp(1.0, static_cast<int>(code) - 127); }

// ---------------------------------------------------------------------------
// Nibble packing
// ---------------------------------------------------------------------------

inline std::vector<std::uint8_t> pack_nibbles(std::span<const std::uint8_t> codes) {
  std::vector<std::uint8_t> out((codes.size() + 1) / 2, 0);
  for (std::size_t i = 0; i < codes.size(); ++i) {
    const std::uint8_t c = codes[i] & 0xF;
    out[i / 2] |= (i % 2 == 0) ? c : static_cast<std::uint8_t>(c << 4);
  }
  return out;
}

inline std::vector<std::uint8_t> unpack_nibbles(std::span<const std::uint8_t> packed, std::size_t n) {
  std::vector<std::uint8_t> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = (packed[i / 2] >> ((i % 2) * 4)) & 0xF;
  return out;
}

namespace detail {

inline double rne(double v) {
  // nearbyint honours the current rounding mode, which is round-to-nearest-even
  // unless the caller changed it.
  return std::nearbyint(v);
}

inline int clamp_int(double v, int lo, int hi) {
  return static_cast<int>(std::clamp(v, static_cast<double>(lo), static_cast<double>(hi)));
}

// Scales of the symmetric weight grid are rounded to binary32 so the stored
// (f32) form reproduces dequantization exactly.
inline double to_storable_scale(double s) {
  const float f = static_cast<float>(s);
  return (f > 0.0f && std::isfinite(f)) ? static_cast<double>(f) : s;
}

// Asymmetric scales round up to binary32: the fitted range stays covered, and
// 15·scale is exact, so re-quantizing a dequantized row recovers the same scale.
inline double to_storable_scale_up(double s) {
  float f = static_cast<float>(s);
  if (!(f > 0.0f) || !std::isfinite(f)) return s;
  if (static_cast<double>(f) < s) f = std::nextafter(f, std::numeric_limits<float>::infinity());
  return static_cast<double>(f);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// QuantizedTensor
// ---------------------------------------------------------------------------

class QuantizedTensor {
 public:
  QuantizedTensor() = default;
  QuantizedTensor(std::size_t rows, std::size_t cols, QuantScheme scheme)
      : rows_(rows), cols_(cols), scheme_(scheme), packed_((rows * cols + 1) / 2, 0) {
    if (scheme.kind == QuantKind::mxfp4 && scheme.group_size != mx_group_size)
      throw invalid_argument("mxfp4 requires group_size 32");
    switch (scheme.kind) {
      case QuantKind::int4_sym_per_channel: scales_.assign(cols, 1.0); break;
      case QuantKind::int4_asym_per_token:
        scales_.assign(rows, 1.0);
        zero_points_.assign(rows, 0);
        break;
      case QuantKind::mxfp4: exponents_.assign(group_count(), 127); break;
    }
  }

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  const QuantScheme& scheme() const { return scheme_; }

  std::span<const std::uint8_t> packed_codes() const { return packed_; }
  std::span<std::uint8_t> packed_codes() { return packed_; }
  /// int4 sym: per column; int4 asym: per row. Empty for mxfp4.
  std::span<const double> scales() const { return scales_; }
  std::span<double> scales() { return scales_; }
  std::span<const int> zero_points() const { return zero_points_; }
  std::span<int> zero_points() { return zero_points_; }
  /// E8M0 codes, one per 32-element group (mxfp4 only).
  std::span<const std::uint8_t> exponents() const { return exponents_; }
  std::span<std::uint8_t> exponents() { return exponents_; }

  std::size_t groups_along() const {
    const std::size_t len = scheme_.axis == GroupAxis::rows ? rows_ : cols_;
    return (len + mx_group_size - 1) / mx_group_size;
  }
  std::size_t group_count() const {
    if (scheme_.kind != QuantKind::mxfp4) return 0;
    return groups_along() * (scheme_.axis == GroupAxis::rows ? cols_ : rows_);
  }
  std::size_t group_of(std::size_t r, std::size_t c) const {
    return scheme_.axis == GroupAxis::rows ? (r / mx_group_size) * cols_ + c
                                           : r * groups_along() + c / mx_group_size;
  }

  std::uint8_t nibble(std::size_t r, std::size_t c) const {
    const std::size_t i = r * cols_ + c;
    return (packed_[i / 2] >> ((i % 2) * 4)) & 0xF;
  }
  void set_nibble(std::size_t r, std::size_t c, std::uint8_t v) {
    const std::size_t i = r * cols_ + c;
    std::uint8_t& byte = packed_[i / 2];
    if (i % 2 == 0) byte = static_cast<std::uint8_t>((byte & 0xF0) | (v & 0xF));
    else byte = static_cast<std::uint8_t>((byte & 0x0F) | ((v & 0xF) << 4));
  }

  /// Logical code: signed [-8, 7] for int4 sym, [0, 15] for asym, the raw
  /// E2M1 nibble for mxfp4.
  int code(std::size_t r, std::size_t c) const {
    const std::uint8_t n = nibble(r, c);
    if (scheme_.kind == QuantKind::int4_sym_per_channel) return n >= 8 ? int(n) - 16 : int(n);
    return n;
  }
  void set_code(std::size_t r, std::size_t c, int code) {
    set_nibble(r, c, static_cast<std::uint8_t>(code & 0xF));
  }

  double step_scale(std::size_t r, std::size_t c) const {
    switch (scheme_.kind) {
      case QuantKind::int4_sym_per_channel: return scales_[c];
      case QuantKind::int4_asym_per_token: return scales_[r];
      case QuantKind::mxfp4: return e8m0_scale(exponents_[group_of(r, c)]);
    }
    return 1.0;
  }

  double dequant_value(std::size_t r, std::size_t c) const {
    switch (scheme_.kind) {
      case QuantKind::int4_sym_per_channel: return code(r, c) * scales_[c];
      case QuantKind::int4_asym_per_token: return (code(r, c) - zero_points_[r]) * scales_[r];
      case QuantKind::mxfp4:
        return e2m1_value(nibble(r, c)) * e8m0_scale(exponents_[group_of(r, c)]);
    }
    return 0.0;
  }

  /// Code for value x at (r, c) under the already-chosen scales.
  int encode_value(std::size_t r, std::size_t c, double x) const {
    switch (scheme_.kind) {
      case QuantKind::int4_sym_per_channel:
        return detail::clamp_int(detail::rne(x / scales_[c]), -8, 7);
      case QuantKind::int4_asym_per_token:
        return detail::clamp_int(detail::rne(x / scales_[r]) + zero_points_[r], 0, 15);
      case QuantKind::mxfp4:
        return e2m1_encode(x / e8m0_scale(exponents_[group_of(r, c)]));
    }
    return 0;
  }

  /// Throws numeric_error if any stored field is outside its valid range.
  void validate() const {
    if (packed_.size() != (rows_ * cols_ + 1) / 2)
      throw numeric_error("quantized tensor: packed code length mismatch");
    for (double s : scales_)
      if (!(s > 0.0) || !std::isfinite(s)) throw numeric_error("quantized tensor: invalid scale");
    for (int z : zero_points_)
      if (z < 0 || z > 15) throw numeric_error("quantized tensor: zero point out of range");
    for (std::uint8_t e : exponents_)
      if (e == 0xFF) throw numeric_error("quantized tensor: E8M0 NaN exponent");
    switch (scheme_.kind) {
      case QuantKind::int4_sym_per_channel:
        if (scales_.size() != cols_ || !zero_points_.empty() || !exponents_.empty())
          throw numeric_error("quantized tensor: bad int4 sym metadata");
        break;
      case QuantKind::int4_asym_per_token:
        if (scales_.size() != rows_ || zero_points_.size() != rows_ || !exponents_.empty())
          throw numeric_error("quantized tensor: bad int4 asym metadata");
        break;
      case QuantKind::mxfp4:
        if (!scales_.empty() || exponents_.size() != group_count())
          throw numeric_error("quantized tensor: bad mxfp4 metadata");
        break;
    }
  }

  bool operator==(const QuantizedTensor&) const = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  QuantScheme scheme_{};
  std::vector<std::uint8_t> packed_;
  std::vector<double> scales_;
  std::vector<int> zero_points_;
  std::vector<std::uint8_t> exponents_;
};

// ---------------------------------------------------------------------------
// Quantizers
// ---------------------------------------------------------------------------

namespace detail {

inline void require_finite(const Tensor& t, const char* who) {
  if (!all_finite(t)) throw numeric_error(std::string(who) + ": input contains NaN or Inf");
}

inline void fill_codes(QuantizedTensor& q, const Tensor& t) {
  for (std::size_t r = 0; r < t.rows(); ++r)
    for (std::size_t c = 0; c < t.cols(); ++c) q.set_code(r, c, q.encode_value(r, c, t(r, c)));
}

}  // namespace detail

/// Channels are columns (output channels of an in×out weight).
/// scale_c = max|w_c| / 7, or 1 for an all-zero channel.
inline QuantizedTensor quantize_int4_sym_per_channel(const Tensor& w) {
  detail::require_finite(w, "quantize_int4_sym_per_channel");
  QuantizedTensor q(w.rows(), w.cols(), QuantScheme::int4_sym());
  auto scales = q.scales();
  for (std::size_t c = 0; c < w.cols(); ++c) {
    double mx = 0.0;
    for (std::size_t r = 0; r < w.rows(); ++r) mx = std::max(mx, std::abs(w(r, c)));
    scales[c] = mx == 0.0 ? 1.0 : detail::to_storable_scale(mx / 7.0);
  }
  detail::fill_codes(q, w);
  return q;
}

/// Tokens are rows. The range is widened to include zero; a constant row c
/// gets scale |c| so it reconstructs exactly.
inline QuantizedTensor quantize_int4_asym_per_token(const Tensor& x) {
  detail::require_finite(x, "quantize_int4_asym_per_token");
  QuantizedTensor q(x.rows(), x.cols(), QuantScheme::int4_asym());
  auto scales = q.scales();
  auto zps = q.zero_points();
  for (std::size_t r = 0; r < x.rows(); ++r) {
    const auto row = x.row(r);
    if (row.empty()) continue;
    const auto [mn_it, mx_it] = std::minmax_element(row.begin(), row.end());
    const double mn = *mn_it;
    const double mx = *mx_it;
    if (mn == mx) {
      scales[r] = mn == 0.0 ? 1.0 : std::abs(mn);
      zps[r] = mn < 0.0 ? 1 : 0;
      continue;
    }
    const double lo = std::min(mn, 0.0);
    const double hi = std::max(mx, 0.0);
    scales[r] = detail::to_storable_scale_up((hi - lo) / 15.0);
    zps[r] = detail::clamp_int(detail::rne(-lo / scales[r]), 0, 15);
  }
  detail::fill_codes(q, x);
  return q;
}

/// Shared exponent per 32-element group: floor(log2(max|t|)) − 2, clamped to
/// the E8M0 range; all-zero groups get exponent code 127.
inline QuantizedTensor quantize_mxfp4(const Tensor& t, GroupAxis axis = GroupAxis::rows) {
  detail::require_finite(t, "quantize_mxfp4");
  QuantizedTensor q(t.rows(), t.cols(), QuantScheme::mxfp4(axis));
  std::vector<double> gmax(q.group_count(), 0.0);
  for (std::size_t r = 0; r < t.rows(); ++r)
    for (std::size_t c = 0; c < t.cols(); ++c) {
      double& g = gmax[q.group_of(r, c)];
      g = std::max(g, std::abs(t(r, c)));
    }
  auto exps = q.exponents();
  for (std::size_t g = 0; g < gmax.size(); ++g) {
    if (gmax[g] == 0.0) {
      exps[g] = 127;
      continue;
    }
    int ex = 0;
    std::frexp(gmax[g], &ex);  // gmax = f·2^ex, f in [0.5, 1)
    const int e = std::clamp(ex - 1 - e2m1_emax, -127, 127);
    exps[g] = static_cast<std::uint8_t>(e + 127);
  }
  detail::fill_codes(q, t);
  return q;
}

inline QuantizedTensor quantize(const Tensor& t, const QuantScheme& scheme) {
  switch (scheme.kind) {
    case QuantKind::int4_sym_per_channel: return quantize_int4_sym_per_channel(t);
    case QuantKind::int4_asym_per_token: return quantize_int4_asym_per_token(t);
    case QuantKind::mxfp4: return quantize_mxfp4(t, scheme.axis);
  }
  throw invalid_argument("unknown quantization scheme");
}

inline Tensor dequantize(const QuantizedTensor& q) {
  q.validate();
  Tensor out(q.rows(), q.cols());
  for (std::size_t r = 0; r < q.rows(); ++r)
    for (std::size_t c = 0; c < q.cols(); ++c) out(r, c) = q.dequant_value(r, c);
  return out;
}

inline Tensor fake_quantize(const Tensor& t, const QuantScheme& scheme) {
  return dequantize(quantize(t, scheme));
}

/// Δ: the largest rounding error for in-range inputs. Half a step for INT4;
/// for MXFP4 half the widest codebook gap (4 -> 6) at the group scale.
inline double max_rounding_error(const QuantizedTensor& q) {
  double delta = 0.0;
  switch (q.scheme().kind) {
    case QuantKind::int4_sym_per_channel:
    case QuantKind::int4_asym_per_token:
      for (double s : q.scales()) delta = std::max(delta, s / 2.0);
      break;
    case QuantKind::mxfp4:
      for (std::uint8_t e : q.exponents())
        delta = std::max(delta, 0.5 * (e2m1_magnitudes[7] - e2m1_magnitudes[6]) * e8m0_scale(e));
      break;
  }
  return delta;
}

/// Largest error the quantizer can make on any input inside the range its
/// scales were chosen for. Equal to max_rounding_error for INT4. For MXFP4 the
/// shared-exponent rule admits group values up to 8·scale while the largest
/// code is 6·scale, so saturation can cost up to 2·scale.
inline double max_saturating_error(const QuantizedTensor& q) {
  if (q.scheme().kind != QuantKind::mxfp4) return max_rounding_error(q);
  double delta = 0.0;
  for (std::uint8_t e : q.exponents())
    delta = std::max(delta, (8.0 - e2m1_magnitudes[7]) * e8m0_scale(e));
  return delta;
}

// ---------------------------------------------------------------------------
// Volume accounting
// ---------------------------------------------------------------------------

/// One block of parameters for volume accounting. No scheme means raw BF16.
struct VolumeEntry {
  std::uint64_t params = 0;
  std::optional<QuantScheme> scheme;
  std::uint64_t channels = 0;  // int4 per-channel: number of stored channel scales
  std::uint64_t groups = 0;    // mxfp4: number of groups; 0 means ceil(params / 32)
};

inline constexpr std::uint64_t bf16_bits = 16;
inline constexpr std::uint64_t int4_scale_bits = 16;
inline constexpr std::uint64_t e8m0_bits = 8;

/// Total stored bits. Per-token activation scales are runtime values and are
/// not counted.
inline std::uint64_t volume_bits(std::span<const VolumeEntry> entries) {
  std::uint64_t bits = 0;
  for (const auto& e : entries) {
    if (!e.scheme) {
      bits += bf16_bits * e.params;
      continue;
    }
    bits += 4 * e.params;
    switch (e.scheme->kind) {
      case QuantKind::int4_sym_per_channel: bits += int4_scale_bits * e.channels; break;
      case QuantKind::int4_asym_per_token: break;
      case QuantKind::mxfp4: {
        const std::uint64_t g = e.groups != 0 ? e.groups : (e.params + mx_group_size - 1) / mx_group_size;
        bits += e8m0_bits * g;
        break;
      }
    }
  }
  return bits;
}

/// Reduction factor of a quantized model relative to storing `reference_params` in BF16.
inline double volume_ratio(double reference_params, double quantized_bits) {
  return bf16_bits * reference_params / quantized_bits;
}

}  // namespace modex
