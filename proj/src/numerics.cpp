// SPDX-License-Identifier: Apache-2.0

#include "circuitquant/numerics.hpp"

#include <cmath>
#include <limits>
#include <stdexcept>

namespace cq {

namespace {

constexpr uint8_t kF8NanBits = 0x7F;
constexpr double kF8Max = 448.0;
// Value of subnormal mantissa unit: 2^(1 - bias - 3) = 2^-9.
constexpr double kF8SubnormalUnit = 0x1p-9;

// Round to the nearest integer, ties to even. The argument is exact
// (a power-of-two scaling of the input), so this realizes one correctly
// rounded step.
int64_t round_half_even(double q) {
  double fl = std::floor(q);
  double frac = q - fl;
  auto lo = static_cast<int64_t>(fl);
  if (frac > 0.5) return lo + 1;
  if (frac < 0.5) return lo;
  return (lo % 2 == 0) ? lo : lo + 1;
}

}  // namespace

const char* precision_name(Precision p) {
  switch (p) {
    case Precision::P8: return "fp8";
    case Precision::P16: return "bf16";
    case Precision::P32: return "fp32";
  }
  return "?";
}

F8E4M3 encode_f8(double x) {
  if (std::isnan(x)) return F8E4M3{kF8NanBits};
  uint8_t sign = std::signbit(x) ? 0x80 : 0x00;
  double a = std::fabs(x);
  if (a == 0.0) return F8E4M3{sign};
  if (a > kF8Max) return F8E4M3{static_cast<uint8_t>(sign | 0x7E)};
  if (a < 0x1p-6) {
    // Subnormal range: grid of multiples of 2^-9.
    int64_t m = round_half_even(a / kF8SubnormalUnit);
    if (m == 0) return F8E4M3{sign};
    if (m >= 8) return F8E4M3{static_cast<uint8_t>(sign | 0x08)};  // 2^-6
    return F8E4M3{static_cast<uint8_t>(sign | m)};
  }
  int e = std::ilogb(a);
  // Mantissa in eighths: q in [8, 16).
  int64_t m = round_half_even(std::ldexp(a, 3 - e));
  if (m == 16) {
    m = 8;
    ++e;
  }
  if (e > 8) return F8E4M3{static_cast<uint8_t>(sign | 0x7E)};
  auto field = static_cast<uint8_t>((e + 7) << 3);
  return F8E4M3{static_cast<uint8_t>(sign | field | (m - 8))};
}

double decode_f8(F8E4M3 v) {
  uint8_t exp_field = (v.bits >> 3) & 0x0F;
  uint8_t mant = v.bits & 0x07;
  double sign = (v.bits & 0x80) ? -1.0 : 1.0;
  if (exp_field == 0x0F && mant == 0x07) return std::numeric_limits<double>::quiet_NaN();
  if (exp_field == 0) return sign * static_cast<double>(mant) * kF8SubnormalUnit;
  return sign * (1.0 + static_cast<double>(mant) / 8.0) * std::ldexp(1.0, exp_field - 7);
}

bool is_nan_f8(F8E4M3 v) { return (v.bits & 0x7F) == kF8NanBits; }

F8E4M3 add_f8(F8E4M3 a, F8E4M3 b) {
  if (is_nan_f8(a) || is_nan_f8(b)) return F8E4M3{kF8NanBits};
  // Both operands are small dyadic rationals, so the double sum is exact
  // and the encode performs the single rounding step.
  return encode_f8(decode_f8(a) + decode_f8(b));
}

BF16 encode_bf16(float x) {
  uint32_t u;
  static_assert(sizeof(u) == sizeof(x));
  __builtin_memcpy(&u, &x, sizeof(u));
  if (std::isnan(x)) {
    return BF16{static_cast<uint16_t>(((u >> 16) & 0x8000u) | 0x7FC0u)};
  }
  uint32_t lsb = (u >> 16) & 1u;
  u += 0x7FFFu + lsb;
  return BF16{static_cast<uint16_t>(u >> 16)};
}

float decode_bf16(BF16 v) {
  uint32_t u = static_cast<uint32_t>(v.bits) << 16;
  float f;
  __builtin_memcpy(&f, &u, sizeof(f));
  return f;
}

namespace {

template <typename T>
QuantParams quantize_rtn_impl(std::span<T> values, int n_bits) {
  if (n_bits != 4 && n_bits != 8 && n_bits != 16) {
    throw std::invalid_argument("quantize_rtn: n_bits must be 4, 8, or 16");
  }
  double max_abs = 0.0;
  for (T v : values) max_abs = std::max(max_abs, std::fabs(static_cast<double>(v)));
  QuantParams params{n_bits, 0.0};
  if (max_abs == 0.0) return params;
  params.delta = max_abs / std::ldexp(1.0, n_bits - 1);
  for (T& v : values) {
    double q = static_cast<double>(v) / params.delta;
    v = static_cast<T>(params.delta * static_cast<double>(round_half_even(q)));
  }
  return params;
}

}  // namespace

QuantParams quantize_rtn(std::span<double> values, int n_bits) {
  return quantize_rtn_impl(values, n_bits);
}

QuantParams quantize_rtn(std::span<float> values, int n_bits) {
  return quantize_rtn_impl(values, n_bits);
}

double step_size(Precision p) {
  switch (p) {
    case Precision::P8: return 0x1p-6;
    case Precision::P16: return 0x1p-126;
    case Precision::P32: return 0x1p-126;
  }
  throw std::invalid_argument("step_size: unknown precision");
}

float round_f8(float x) { return static_cast<float>(decode_f8(encode_f8(x))); }

float round_bf16(float x) { return decode_bf16(encode_bf16(x)); }

}  // namespace cq
