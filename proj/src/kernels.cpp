// SPDX-License-Identifier: Apache-2.0

#include "circuitquant/kernels.hpp"

#include <omp.h>

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <limits>
#include <stdexcept>

namespace cq {

int worker_cap() {
  static const int cap = [] {
    const char* env = std::getenv("CIRCUITQUANT_THREADS");
    if (env == nullptr || *env == '\0') return 0;
    int v = std::atoi(env);
    return v > 0 ? v : 1;
  }();
  return cap;
}

void apply_worker_cap() {
  int cap = worker_cap();
  if (cap > 0) omp_set_num_threads(cap);
}

namespace {

void check_matmul_shapes(const Tensor& a, const Tensor& w, int64_t wk, int64_t n, const Tensor& out) {
  if (a.rank() != 2 || w.rank() != 2 || out.rank() != 2) {
    throw std::invalid_argument("matmul: rank-2 tensors required");
  }
  if (a.dim(1) != wk) throw std::invalid_argument("matmul: inner dimensions disagree");
  if (out.dim(0) != a.dim(0) || out.dim(1) != n) {
    throw std::invalid_argument("matmul: output shape mismatch");
  }
}

// Single-element dot product; the k-order accumulation fixes the result
// bits regardless of how (m, n) pairs are distributed over workers.
inline float dot_col(const float* a_row, const float* w, int64_t k_dim, int64_t n_stride,
                     int64_t col) {
  float acc = 0.0f;
  const float* wp = w + col;
  for (int64_t k = 0; k < k_dim; ++k) {
    acc += a_row[k] * wp[static_cast<size_t>(k * n_stride)];
  }
  return acc;
}

}  // namespace

void matmul(const Tensor& a, const Tensor& w, Tensor& out, Exec exec) {
  check_matmul_shapes(a, w, w.dim(0), w.dim(1), out);
  const int64_t m_dim = a.dim(0), k_dim = a.dim(1), n_dim = w.dim(1);
  const float* ap = a.data();
  const float* wp = w.data();
  float* op = out.data();
  if (exec == Exec::Serial) {
    for (int64_t m = 0; m < m_dim; ++m) {
      for (int64_t n = 0; n < n_dim; ++n) {
        op[m * n_dim + n] = dot_col(ap + m * k_dim, wp, k_dim, n_dim, n);
      }
    }
    return;
  }
#pragma omp parallel for schedule(static)
  for (int64_t m = 0; m < m_dim; ++m) {
    for (int64_t n = 0; n < n_dim; ++n) {
      op[m * n_dim + n] = dot_col(ap + m * k_dim, wp, k_dim, n_dim, n);
    }
  }
}

void matmul_cols(const Tensor& a, const Tensor& w, int64_t c0, int64_t c1, Tensor& out, Exec exec) {
  if (c0 < 0 || c1 <= c0 || c1 > w.dim(1)) throw std::invalid_argument("matmul_cols: bad column range");
  check_matmul_shapes(a, w, w.dim(0), c1 - c0, out);
  const int64_t m_dim = a.dim(0), k_dim = a.dim(1), n_dim = w.dim(1), cols = c1 - c0;
  const float* ap = a.data();
  const float* wp = w.data();
  float* op = out.data();
  if (exec == Exec::Serial) {
    for (int64_t m = 0; m < m_dim; ++m) {
      for (int64_t n = 0; n < cols; ++n) {
        op[m * cols + n] = dot_col(ap + m * k_dim, wp, k_dim, n_dim, c0 + n);
      }
    }
    return;
  }
#pragma omp parallel for schedule(static)
  for (int64_t m = 0; m < m_dim; ++m) {
    for (int64_t n = 0; n < cols; ++n) {
      op[m * cols + n] = dot_col(ap + m * k_dim, wp, k_dim, n_dim, c0 + n);
    }
  }
}

void matmul_rows(const Tensor& a, const Tensor& w, int64_t r0, Tensor& out, Exec exec) {
  const int64_t k_dim = a.dim(1);
  if (r0 < 0 || r0 + k_dim > w.dim(0)) throw std::invalid_argument("matmul_rows: bad row range");
  check_matmul_shapes(a, w, k_dim + 0, w.dim(1), out);
  const int64_t m_dim = a.dim(0), n_dim = w.dim(1);
  const float* ap = a.data();
  const float* wp = w.data() + r0 * n_dim;
  float* op = out.data();
  if (exec == Exec::Serial) {
    for (int64_t m = 0; m < m_dim; ++m) {
      for (int64_t n = 0; n < n_dim; ++n) {
        op[m * n_dim + n] = dot_col(ap + m * k_dim, wp, k_dim, n_dim, n);
      }
    }
    return;
  }
#pragma omp parallel for schedule(static)
  for (int64_t m = 0; m < m_dim; ++m) {
    for (int64_t n = 0; n < n_dim; ++n) {
      op[m * n_dim + n] = dot_col(ap + m * k_dim, wp, k_dim, n_dim, n);
    }
  }
}

namespace {

inline void layer_norm_row(const float* x, const float* gamma, const float* beta, float eps,
                           int64_t d, float* out) {
  float mean = 0.0f;
  for (int64_t i = 0; i < d; ++i) mean += x[i];
  mean /= static_cast<float>(d);
  float var = 0.0f;
  for (int64_t i = 0; i < d; ++i) {
    float c = x[i] - mean;
    var += c * c;
  }
  var /= static_cast<float>(d);
  float inv = 1.0f / std::sqrt(var + eps);
  for (int64_t i = 0; i < d; ++i) {
    out[i] = gamma[i] * ((x[i] - mean) * inv) + beta[i];
  }
}

}  // namespace

void layer_norm(const Tensor& x, std::span<const float> gamma, std::span<const float> beta,
                float eps, Tensor& out, Exec exec) {
  if (x.rank() != 2 || !out.same_shape(x)) throw std::invalid_argument("layer_norm: shape mismatch");
  const int64_t rows = x.dim(0), d = x.dim(1);
  if (static_cast<int64_t>(gamma.size()) != d || static_cast<int64_t>(beta.size()) != d) {
    throw std::invalid_argument("layer_norm: parameter length mismatch");
  }
  if (exec == Exec::Serial) {
    for (int64_t r = 0; r < rows; ++r) {
      layer_norm_row(x.data() + r * d, gamma.data(), beta.data(), eps, d, out.data() + r * d);
    }
    return;
  }
#pragma omp parallel for schedule(static)
  for (int64_t r = 0; r < rows; ++r) {
    layer_norm_row(x.data() + r * d, gamma.data(), beta.data(), eps, d, out.data() + r * d);
  }
}

namespace {

inline void attention_row(const Tensor& q, const Tensor& k, const Tensor& v, int64_t i,
                          float scale, float* probs_row, float* z_row) {
  const int64_t s = q.dim(0), dk = q.dim(1);
  // Causal scores for query position i over keys 0..i.
  float max_score = -std::numeric_limits<float>::infinity();
  for (int64_t j = 0; j <= i; ++j) {
    float acc = 0.0f;
    for (int64_t t = 0; t < dk; ++t) acc += q.at(i, t) * k.at(j, t);
    probs_row[j] = acc * scale;
    max_score = std::max(max_score, probs_row[j]);
  }
  float denom = 0.0f;
  for (int64_t j = 0; j <= i; ++j) {
    probs_row[j] = std::exp(probs_row[j] - max_score);
    denom += probs_row[j];
  }
  for (int64_t j = 0; j <= i; ++j) probs_row[j] /= denom;
  for (int64_t j = i + 1; j < s; ++j) probs_row[j] = 0.0f;
  for (int64_t t = 0; t < dk; ++t) {
    float acc = 0.0f;
    for (int64_t j = 0; j <= i; ++j) acc += probs_row[j] * v.at(j, t);
    z_row[t] = acc;
  }
}

}  // namespace

void causal_attention(const Tensor& q, const Tensor& k, const Tensor& v, Tensor& z,
                      Tensor* probs, Exec exec) {
  if (!q.same_shape(k) || !q.same_shape(v) || !z.same_shape(q)) {
    throw std::invalid_argument("causal_attention: q/k/v/z shapes must agree");
  }
  const int64_t s = q.dim(0), dk = q.dim(1);
  const float scale = 1.0f / std::sqrt(static_cast<float>(dk));
  Tensor local_probs;
  Tensor* pp = probs;
  if (pp == nullptr) {
    local_probs = Tensor(s, s);
    pp = &local_probs;
  } else if (pp->rank() != 2 || pp->dim(0) != s || pp->dim(1) != s) {
    throw std::invalid_argument("causal_attention: probs shape mismatch");
  }
  if (exec == Exec::Serial) {
    for (int64_t i = 0; i < s; ++i) {
      attention_row(q, k, v, i, scale, pp->data() + i * s, z.data() + i * dk);
    }
    return;
  }
#pragma omp parallel for schedule(static)
  for (int64_t i = 0; i < s; ++i) {
    attention_row(q, k, v, i, scale, pp->data() + i * s, z.data() + i * dk);
  }
}

void gelu(Tensor& x, Exec exec) {
  float* p = x.data();
  const int64_t n = x.size();
  if (exec == Exec::Serial) {
    for (int64_t i = 0; i < n; ++i) {
      p[i] = 0.5f * p[i] * (1.0f + std::erf(p[i] * 0.70710678118654752f));
    }
    return;
  }
#pragma omp parallel for schedule(static)
  for (int64_t i = 0; i < n; ++i) {
    p[i] = 0.5f * p[i] * (1.0f + std::erf(p[i] * 0.70710678118654752f));
  }
}

void quantize_span(std::span<float> xs, Precision p, LowMode mode) {
  switch (p) {
    case Precision::P32:
      return;
    case Precision::P16:
      for (float& v : xs) v = round_bf16(v);
      return;
    case Precision::P8:
      if (mode == LowMode::E4m3) {
        for (float& v : xs) v = round_f8(v);
      } else {
        quantize_rtn(xs, 4);
      }
      return;
  }
}

void quantize_tensor(Tensor& t, Precision p, LowMode mode) { quantize_span(t.flat(), p, mode); }

}  // namespace cq
