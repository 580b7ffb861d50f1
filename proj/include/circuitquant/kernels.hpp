// SPDX-License-Identifier: Apache-2.0
//
// Compute kernels behind the forward pass. Every kernel has a serial
// reference path and an OpenMP path that computes each output element
// with the identical accumulation order, so results are bitwise equal
// for any worker count. Accumulation is FP32 throughout.

#pragma once

#include <cstdint>
#include <span>

#include "circuitquant/numerics.hpp"
#include "circuitquant/tensor.hpp"

namespace cq {

enum class Exec : uint8_t { Serial, Parallel };

// Worker cap from CIRCUITQUANT_THREADS (0 means unlimited); read once.
int worker_cap();
// Applies the cap to the OpenMP runtime. Safe to call repeatedly.
void apply_worker_cap();

// out(M x N) = a(M x K) * w(K x N), FP32 accumulate in k order.
void matmul(const Tensor& a, const Tensor& w, Tensor& out, Exec exec);

// out(M x (c1-c0)) = a * w[:, c0:c1]: column-slice product used for
// per-head Q/K/V projections.
void matmul_cols(const Tensor& a, const Tensor& w, int64_t c0, int64_t c1, Tensor& out, Exec exec);

// out(M x N) = a(M x K) * w[r0:r0+K, :]: row-slice product used for
// per-head output projections.
void matmul_rows(const Tensor& a, const Tensor& w, int64_t r0, Tensor& out, Exec exec);

// Row-wise layer normalization at FP32: gamma * (x - mean) / sqrt(var + eps) + beta.
void layer_norm(const Tensor& x, std::span<const float> gamma, std::span<const float> beta,
                float eps, Tensor& out, Exec exec);

// Causal scaled-dot-product attention for one head at FP32.
// q, k, v are (S x d_k); z is (S x d_k); probs (S x S) is optional.
void causal_attention(const Tensor& q, const Tensor& k, const Tensor& v, Tensor& z,
                      Tensor* probs, Exec exec);

// Exact GELU (erf form), elementwise at FP32.
void gelu(Tensor& x, Exec exec);

// Rounds every element of the span onto the grid of the given precision.
// P32 is the identity; P8 with Rtn4 uses the span's own max for the grid
// scale, so the span must be exactly one quantization group.
void quantize_span(std::span<float> xs, Precision p, LowMode mode);

// Rounds a whole tensor as a single quantization group.
void quantize_tensor(Tensor& t, Precision p, LowMode mode);

}  // namespace cq
