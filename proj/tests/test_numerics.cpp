// SPDX-License-Identifier: Apache-2.0
//
// Exhaustive and property tests for the small-float emulation layer.
// The E4M3 oracles here are independent of the implementation: the value
// table is assembled from the bit layout, and rounding is checked by
// brute-force nearest-grid search with ties to even mantissa.

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <chrono>
#include <cmath>
#include <cstdint>
#include <limits>
#include <random>
#include <set>
#include <vector>

#include "circuitquant/numerics.hpp"

using namespace cq;

namespace {

// Independent decode: assemble the value of a bit pattern from the layout
// (1 sign, 4 exponent with bias 7, 3 mantissa, subnormal unit 2^-9).
double table_decode(uint8_t bits) {
  double sign = (bits & 0x80) ? -1.0 : 1.0;
  int exp_field = (bits >> 3) & 0x0F;
  int mant = bits & 0x07;
  if (exp_field == 0x0F && mant == 0x07) return std::numeric_limits<double>::quiet_NaN();
  if (exp_field == 0) return sign * mant * std::ldexp(1.0, -9);  // signed zero preserved
  return sign * (8 + mant) * std::ldexp(1.0, exp_field - 7 - 3);
}

bool table_is_nan(uint8_t bits) { return (bits & 0x7F) == 0x7F; }

// Brute-force correctly rounded encode: nearest finite grid value, ties
// resolved toward the even mantissa field, saturating beyond +-448.
uint8_t oracle_encode(double x) {
  if (std::isnan(x)) return 0x7F;
  if (x > 448.0) return 0x7E;
  if (x < -448.0) return 0xFE;
  double best_err = std::numeric_limits<double>::infinity();
  uint8_t best = 0;
  for (int b = 0; b < 256; ++b) {
    auto bits = static_cast<uint8_t>(b);
    if (table_is_nan(bits)) continue;
    double v = table_decode(bits);
    double err = std::fabs(v - x);
    bool better = err < best_err;
    if (err == best_err) {
      // Tie: prefer the even mantissa field; at +-0 prefer matching sign.
      if (v == 0.0 && table_decode(best) == 0.0) {
        better = (std::signbit(x) == ((bits & 0x80) != 0));
      } else {
        better = (bits & 1) == 0 && (best & 1) == 1;
      }
    }
    if (better) {
      best_err = err;
      best = bits;
    }
  }
  return best;
}

}  // namespace

TEST_CASE("e4m3 decode matches the independent bit-layout table for all 256 patterns") {
  int nan_count = 0;
  std::set<double> positive_finite;
  for (int b = 0; b < 256; ++b) {
    auto bits = static_cast<uint8_t>(b);
    double expect = table_decode(bits);
    double got = decode_f8(F8E4M3{bits});
    if (std::isnan(expect)) {
      CHECK(std::isnan(got));
      CHECK(is_nan_f8(F8E4M3{bits}));
      ++nan_count;
    } else {
      CHECK(got == expect);
      if (!(bits & 0x80)) positive_finite.insert(expect);
    }
  }
  CHECK(nan_count == 2);
  // 0 plus 126 distinct positive finite values.
  CHECK(positive_finite.size() == 127);
  CHECK(*positive_finite.rbegin() == 448.0);
}

TEST_CASE("e4m3 encode(decode(p)) round-trips every finite pattern") {
  for (int b = 0; b < 256; ++b) {
    auto bits = static_cast<uint8_t>(b);
    if (table_is_nan(bits)) {
      CHECK(is_nan_f8(encode_f8(decode_f8(F8E4M3{bits}))));
      continue;
    }
    CHECK(encode_f8(decode_f8(F8E4M3{bits})).bits == bits);
  }
}

TEST_CASE("e4m3 format landmarks") {
  CHECK(decode_f8(encode_f8(448.0)) == 448.0);
  CHECK(encode_f8(448.0).bits == 0x7E);
  CHECK(encode_f8(1000.0).bits == 0x7E);    // saturation
  CHECK(encode_f8(-1000.0).bits == 0xFE);
  CHECK(decode_f8(encode_f8(0x1p-9)) == 0x1p-9);    // smallest subnormal
  CHECK(decode_f8(encode_f8(0x1p-6)) == 0x1p-6);    // smallest normal
  CHECK(encode_f8(0.015625).bits == 0x08);          // 2^-6, exponent field 1
  CHECK(encode_f8(0.3) == encode_f8(0.3125));       // nearest grid point
  CHECK(decode_f8(encode_f8(0.3)) == 0.3125);
  CHECK(encode_f8(0.0).bits == 0x00);
  CHECK(is_nan_f8(encode_f8(std::numeric_limits<double>::quiet_NaN())));
  // Values at or below half the smallest subnormal flush to zero.
  CHECK(encode_f8(0x1p-11).bits == 0x00);
  CHECK(encode_f8(0x1p-10).bits == 0x00);            // tie at half-subnormal, even is 0
  CHECK(decode_f8(encode_f8(0x1.8p-10)) == 0x1p-9);  // 0.75 * 2^-9 rounds up
}

TEST_CASE("e4m3 encode is correctly rounded for random reals (ties to even)") {
  std::mt19937_64 rng(20240817);
  std::uniform_real_distribution<double> dist(-448.0, 448.0);
  for (int i = 0; i < 100000; ++i) {
    double x = dist(rng);
    CHECK(encode_f8(x).bits == oracle_encode(x));
  }
  // Exact midpoints exercise the tie rule in both directions.
  CHECK(encode_f8(0.5 * (table_decode(0x30) + table_decode(0x31))).bits == 0x30);
  CHECK(encode_f8(0.5 * (table_decode(0x31) + table_decode(0x32))).bits == 0x32);
}

TEST_CASE("add_f8 equals the brute-force correctly rounded oracle on all pairs") {
  auto start = std::chrono::steady_clock::now();
  for (int a = 0; a < 256; ++a) {
    for (int b = 0; b < 256; ++b) {
      auto pa = static_cast<uint8_t>(a);
      auto pb = static_cast<uint8_t>(b);
      F8E4M3 got = add_f8(F8E4M3{pa}, F8E4M3{pb});
      if (table_is_nan(pa) || table_is_nan(pb)) {
        CHECK(is_nan_f8(got));
        continue;
      }
      uint8_t expect = oracle_encode(table_decode(pa) + table_decode(pb));
      CHECK(got.bits == expect);
    }
  }
  auto elapsed = std::chrono::steady_clock::now() - start;
  CHECK(std::chrono::duration_cast<std::chrono::milliseconds>(elapsed).count() < 1000);
}

TEST_CASE("add_f8 absorption under large exponent gaps") {
  CHECK(decode_f8(add_f8(encode_f8(16.0), encode_f8(0.125))) == 16.0);
  CHECK(decode_f8(add_f8(encode_f8(1.0), encode_f8(0.125))) == 1.125);
  // A same-sign addend five binades down is strictly below half an ulp of
  // the larger operand and disappears. An opposite-sign addend can pull
  // the sum across a binade boundary, where the grid step halves, so full
  // absorption there needs a gap of six.
  CHECK(decode_f8(add_f8(encode_f8(0.125), encode_f8(-3 * 0x1p-9))) == 0.1171875);
  for (int a = 0; a < 256; ++a) {
    auto pa = static_cast<uint8_t>(a);
    if (table_is_nan(pa)) continue;
    double va = table_decode(pa);
    if (va == 0.0) continue;
    for (int b = 0; b < 256; ++b) {
      auto pb = static_cast<uint8_t>(b);
      if (table_is_nan(pb)) continue;
      double vb = table_decode(pb);
      if (vb == 0.0) {
        CHECK(decode_f8(add_f8(F8E4M3{pa}, F8E4M3{pb})) == va);
        continue;
      }
      int gap = std::ilogb(std::fabs(va)) - std::ilogb(std::fabs(vb));
      bool same_sign = std::signbit(va) == std::signbit(vb);
      if (gap >= 5 + (same_sign ? 0 : 1)) {
        CHECK(decode_f8(add_f8(F8E4M3{pa}, F8E4M3{pb})) == va);
      }
    }
  }
}

TEST_CASE("add_f8 at exponent gap 3 loses most addend bits (measured)") {
  // The three-bit mantissa leaves at most one significant bit of a gap-3
  // addend; the mean relative contribution error is large.
  double total_rel_err = 0.0;
  int n = 0;
  for (int a = 0; a < 256; ++a) {
    auto pa = static_cast<uint8_t>(a);
    if (table_is_nan(pa) || table_decode(pa) == 0.0) continue;
    double va = table_decode(pa);
    for (int b = 0; b < 256; ++b) {
      auto pb = static_cast<uint8_t>(b);
      if (table_is_nan(pb) || table_decode(pb) == 0.0) continue;
      double vb = table_decode(pb);
      if (std::ilogb(std::fabs(vb)) != std::ilogb(std::fabs(va)) - 3) continue;
      double r = decode_f8(add_f8(F8E4M3{pa}, F8E4M3{pb}));
      total_rel_err += std::fabs(r - (va + vb)) / std::fabs(vb);
      ++n;
    }
  }
  REQUIRE(n > 0);
  CHECK(total_rel_err / n > 0.1);
}

TEST_CASE("bf16 round-trip and rounding behaviour") {
  // Values already representable survive bitwise.
  for (uint32_t hi : {0x3F80u, 0xBF80u, 0x0000u, 0x7F80u, 0x4049u, 0x0001u}) {
    BF16 v{static_cast<uint16_t>(hi)};
    CHECK(encode_bf16(decode_bf16(v)).bits == v.bits);
  }
  // Ties to even on the 7-bit mantissa boundary.
  CHECK(decode_bf16(encode_bf16(1.0f + 0x1p-8f)) == 1.0f);             // tie -> even
  CHECK(decode_bf16(encode_bf16(1.0f + 3 * 0x1p-9f)) == 1.0f + 0x1p-7f);
  CHECK(decode_bf16(encode_bf16(0x1p-126f)) == 0x1p-126f);             // full exponent range
  CHECK(std::isinf(decode_bf16(encode_bf16(std::numeric_limits<float>::infinity()))));
  CHECK(std::isnan(decode_bf16(encode_bf16(std::numeric_limits<float>::quiet_NaN()))));
  // Rounding can carry into the exponent.
  CHECK(decode_bf16(encode_bf16(1.9999999f)) == 2.0f);
}

TEST_CASE("quantize_rtn frozen examples") {
  {
    std::vector<double> w{1.0, -2.0, 0.3};
    QuantParams p = quantize_rtn(std::span<double>(w), 8);
    CHECK(p.delta == 2.0 / 128.0);
    CHECK(w[0] == 1.0);
    CHECK(w[1] == -2.0);
    CHECK(w[2] == 0.296875);  // 19 * 0.015625
  }
  {
    std::vector<double> w{1.0, -2.0, 0.3};
    QuantParams p = quantize_rtn(std::span<double>(w), 16);
    CHECK(p.delta == 2.0 / 32768.0);
    CHECK(w[2] == 0.29998779296875);  // 4915 * 2^-14
  }
  {
    std::vector<double> w{0.0, 0.0};
    QuantParams p = quantize_rtn(std::span<double>(w), 4);
    CHECK(p.delta == 0.0);
    CHECK(w[0] == 0.0);
  }
  std::vector<double> w{1.0};
  CHECK_THROWS_AS(quantize_rtn(std::span<double>(w), 7), std::invalid_argument);
}

TEST_CASE("quantize_rtn properties: idempotence and error bound") {
  std::mt19937_64 rng(7);
  std::uniform_real_distribution<double> dist(-3.0, 3.0);
  for (int n_bits : {4, 8, 16}) {
    for (int trial = 0; trial < 50; ++trial) {
      std::vector<double> w(37);
      for (double& v : w) v = dist(rng);
      std::vector<double> orig = w;
      QuantParams p = quantize_rtn(std::span<double>(w), n_bits);
      for (size_t i = 0; i < w.size(); ++i) {
        CHECK(std::fabs(w[i] - orig[i]) <= p.delta * 0.5 + 1e-15);
      }
      std::vector<double> again = w;
      QuantParams p2 = quantize_rtn(std::span<double>(again), n_bits);
      CHECK(p2.delta == p.delta);
      for (size_t i = 0; i < w.size(); ++i) CHECK(again[i] == w[i]);
    }
  }
}

TEST_CASE("precision order and step sizes") {
  CHECK(static_cast<int>(Precision::P8) < static_cast<int>(Precision::P16));
  CHECK(static_cast<int>(Precision::P16) < static_cast<int>(Precision::P32));
  CHECK(step_size(Precision::P8) == 0x1p-6);
  CHECK(step_size(Precision::P16) == 0x1p-126);
  CHECK(step_size(Precision::P32) == 0x1p-126);
}

TEST_CASE("round-trip error is monotone in precision fidelity") {
  std::mt19937_64 rng(99);
  std::uniform_real_distribution<float> dist(-448.0f, 448.0f);
  double max8 = 0.0, max16 = 0.0, max32 = 0.0;
  for (int i = 0; i < 20000; ++i) {
    float x = dist(rng);
    max8 = std::max(max8, std::fabs(static_cast<double>(round_f8(x) - x)));
    max16 = std::max(max16, std::fabs(static_cast<double>(round_bf16(x) - x)));
    max32 = std::max(max32, 0.0);
  }
  CHECK(max8 >= max16);
  CHECK(max16 >= max32);
  CHECK(max8 > 0.0);
}
