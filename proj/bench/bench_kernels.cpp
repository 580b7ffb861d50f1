// SPDX-License-Identifier: Apache-2.0
//
// Kernel benchmark: times every forward-pass kernel on its serial
// reference path and its OpenMP path at transformer-realistic shapes,
// checks the two paths agree bitwise, and prints one table row per
// kernel. Optional argv: [reps] (default 5).
#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "circuitquant/kernels.hpp"
#include "circuitquant/tensor.hpp"

namespace {

using namespace cq;

void fill(Tensor& t, std::mt19937& rng) {
  std::normal_distribution<float> dist(0.0f, 1.0f);
  for (int64_t i = 0; i < t.size(); ++i) t.at(i) = dist(rng);
}

double time_ms(int reps, const std::function<void()>& fn) {
  fn();  // warm-up, also primes the OpenMP pool
  auto t0 = std::chrono::steady_clock::now();
  for (int r = 0; r < reps; ++r) fn();
  std::chrono::duration<double, std::milli> dt =
      std::chrono::steady_clock::now() - t0;
  return dt.count() / reps;
}

struct Row {
  std::string kernel;
  std::string shape;
  double serial_ms = 0.0;
  double parallel_ms = 0.0;
  bool bitwise = false;
};

Row bench(const std::string& kernel, const std::string& shape, int reps,
          Tensor& serial_out, Tensor& parallel_out,
          const std::function<void(Exec, Tensor&)>& run) {
  Row row{kernel, shape};
  row.serial_ms = time_ms(reps, [&] { run(Exec::Serial, serial_out); });
  row.parallel_ms = time_ms(reps, [&] { run(Exec::Parallel, parallel_out); });
  row.bitwise = serial_out.bitwise_equal(parallel_out);
  return row;
}

}  // namespace

int main(int argc, char** argv) {
  int reps = argc > 1 ? std::atoi(argv[1]) : 5;
  if (reps < 1) reps = 1;
  apply_worker_cap();
  std::mt19937 rng(7);

  const int64_t s = 256, d = 768, dk = 64, ffn = 4 * d;
  Tensor a(s, d), w(d, d), w_ffn(d, ffn), q(s, dk), k(s, dk), v(s, dk);
  Tensor gamma_t = Tensor::vec(d), beta_t = Tensor::vec(d);
  for (Tensor* t : {&a, &w, &w_ffn, &q, &k, &v, &gamma_t, &beta_t}) fill(*t, rng);

  std::vector<Row> rows;
  {
    Tensor o1(s, d), o2(s, d);
    rows.push_back(bench("matmul", "256x768 * 768x768", reps, o1, o2,
                         [&](Exec e, Tensor& o) { matmul(a, w, o, e); }));
  }
  {
    Tensor o1(s, dk), o2(s, dk);
    rows.push_back(
        bench("matmul_cols", "256x768 * 768x[0:64]", reps, o1, o2,
              [&](Exec e, Tensor& o) { matmul_cols(a, w, 0, dk, o, e); }));
  }
  {
    Tensor z(s, dk);
    fill(z, rng);
    Tensor o1(s, d), o2(s, d);
    rows.push_back(
        bench("matmul_rows", "256x64 * 768[0:64,:]", reps, o1, o2,
              [&](Exec e, Tensor& o) { matmul_rows(z, w, 0, o, e); }));
  }
  {
    Tensor o1(s, d), o2(s, d);
    rows.push_back(bench("layer_norm", "256x768", reps, o1, o2,
                         [&](Exec e, Tensor& o) {
                           layer_norm(a, gamma_t.flat(), beta_t.flat(), 1e-5f,
                                      o, e);
                         }));
  }
  {
    Tensor o1(s, dk), o2(s, dk);
    rows.push_back(
        bench("causal_attention", "S=256 d_k=64", reps, o1, o2,
              [&](Exec e, Tensor& o) { causal_attention(q, k, v, o, nullptr, e); }));
  }
  {
    Tensor base(s, ffn);
    fill(base, rng);
    Tensor o1 = base, o2 = base;
    rows.push_back(bench("gelu", "256x3072", reps, o1, o2,
                         [&](Exec e, Tensor& o) {
                           o = base;  // elementwise in place, reset first
                           gelu(o, e);
                         }));
  }

  std::printf("%-18s %-22s %12s %12s %9s %8s\n", "kernel", "shape",
              "serial ms", "parallel ms", "speedup", "bitwise");
  bool all_bitwise = true;
  for (const Row& r : rows) {
    std::printf("%-18s %-22s %12.3f %12.3f %8.2fx %8s\n", r.kernel.c_str(),
                r.shape.c_str(), r.serial_ms, r.parallel_ms,
                r.serial_ms / r.parallel_ms, r.bitwise ? "ok" : "MISMATCH");
    all_bitwise = all_bitwise && r.bitwise;
  }
  if (!all_bitwise) {
    std::fprintf(stderr, "bench_kernels: serial and parallel paths disagree\n");
    return 1;
  }
  return 0;
}
