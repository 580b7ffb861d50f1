// SPDX-License-Identifier: Apache-2.0
//
// Software emulation of the small float formats used throughout the engine:
// FP8 E4M3 (OCP convention: bias 7, no infinities, single NaN pattern per
// sign, max finite 448), BF16, and integer-grid round-to-nearest
// quantization. All operations are deterministic and bit-exact.

#pragma once

#include <cstdint>
#include <span>
#include <utility>
#include <vector>

namespace cq {

// Compute precision levels, ordered by representational fidelity.
enum class Precision : uint8_t { P8 = 0, P16 = 1, P32 = 2 };

const char* precision_name(Precision p);

// Interpretation of the P8 slot: E4M3 float emulation or the 4-bit
// integer grid (there is no packed 4-bit float format).
enum class LowMode : uint8_t { E4m3 = 0, Rtn4 = 1 };

// One FP8 E4M3 value. Bit layout: 1 sign, 4 exponent (bias 7), 3 mantissa.
// Exponent field 15 with mantissa 7 is NaN; every other pattern is finite.
struct F8E4M3 {
  uint8_t bits = 0;
  friend bool operator==(F8E4M3 a, F8E4M3 b) { return a.bits == b.bits; }
};

// Rounds a real to the nearest E4M3 value, ties to even mantissa.
// |x| > 448 saturates to +-448; NaN maps to the NaN pattern.
F8E4M3 encode_f8(double x);

// Exact value of an E4M3 pattern. NaN patterns decode to a quiet NaN.
double decode_f8(F8E4M3 v);

bool is_nan_f8(F8E4M3 v);

// Correctly rounded E4M3 sum: the exact real sum of the two operands,
// rounded once to the E4M3 grid. NaN operands propagate.
F8E4M3 add_f8(F8E4M3 a, F8E4M3 b);

// One BF16 value: 1 sign, 8 exponent, 7 mantissa (the top half of an FP32).
struct BF16 {
  uint16_t bits = 0;
  friend bool operator==(BF16 a, BF16 b) { return a.bits == b.bits; }
};

// Rounds an FP32 value to BF16, ties to even. NaN stays NaN, infinities
// are preserved; the exponent range equals FP32's.
BF16 encode_bf16(float x);

float decode_bf16(BF16 v);

// Scale parameters chosen by quantize_rtn.
struct QuantParams {
  int n_bits = 0;
  double delta = 0.0;
};

// Uniform-grid round-to-nearest quantization: delta = max|w| / 2^(n_bits-1),
// each element maps to delta * round(w / delta) with ties to even.
// n_bits must be 4, 8, or 16; an all-zero input yields delta 0 and is
// returned unchanged.
QuantParams quantize_rtn(std::span<double> values, int n_bits);
QuantParams quantize_rtn(std::span<float> values, int n_bits);

// Smallest positive normal value of a precision level. P8 reports 2^-6,
// the E4M3 normal-range boundary (subnormals reach 2^-9, but underflow
// analysis keys on where relative accuracy collapses); BF16 shares FP32's
// exponent range, so both report 2^-126.
double step_size(Precision p);

// Convenience element rounders used by the tensor kernels.
float round_f8(float x);    // decode(encode(x))
float round_bf16(float x);  // decode(encode(x))

}  // namespace cq
