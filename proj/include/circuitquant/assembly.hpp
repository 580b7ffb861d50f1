// SPDX-License-Identifier: Apache-2.0
//
// Mixed-precision head assembly: overwrite one head's slice of a batched
// per-head tensor with a separately computed high-precision slice.

#pragma once

#include "circuitquant/tensor.hpp"

namespace cq {

// low: (S, H, d_k) per-head projections, high: (S, d_k) replacement for
// head `target`. Returns low with the target slice overwritten.
Tensor mixed_assembly(const Tensor& low, const Tensor& high, int target);

// heads: (S, H, d_k) -> (S, H * d_k) row-major concatenation.
Tensor concat_heads(const Tensor& heads);

// x: (S, H * d_k) -> (S, H, d_k).
Tensor split_heads(const Tensor& x, int n_heads);

}  // namespace cq
