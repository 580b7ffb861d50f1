// SPDX-License-Identifier: Apache-2.0
//
// Minimal dense row-major float tensor, rank 1 to 3. All model state is
// held in FP32 storage; lower precisions are value subsets of FP32.

#pragma once

#include <cstdint>
#include <cstring>
#include <span>
#include <stdexcept>
#include <vector>

namespace cq {

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::vector<int64_t> shape) : shape_(std::move(shape)) {
    int64_t n = 1;
    for (int64_t d : shape_) {
      if (d <= 0) throw std::invalid_argument("Tensor: dimensions must be positive");
      n *= d;
    }
    data_.assign(static_cast<size_t>(n), 0.0f);
  }
  Tensor(int64_t d0, int64_t d1) : Tensor(std::vector<int64_t>{d0, d1}) {}
  Tensor(int64_t d0, int64_t d1, int64_t d2) : Tensor(std::vector<int64_t>{d0, d1, d2}) {}
  static Tensor vec(int64_t d0) { return Tensor(std::vector<int64_t>{d0}); }

  int rank() const { return static_cast<int>(shape_.size()); }
  int64_t dim(int i) const { return shape_.at(static_cast<size_t>(i)); }
  const std::vector<int64_t>& shape() const { return shape_; }
  int64_t size() const { return static_cast<int64_t>(data_.size()); }
  bool empty() const { return data_.empty(); }

  float* data() { return data_.data(); }
  const float* data() const { return data_.data(); }

  float& at(int64_t i) { return data_[static_cast<size_t>(i)]; }
  float at(int64_t i) const { return data_[static_cast<size_t>(i)]; }
  float& at(int64_t i, int64_t j) { return data_[static_cast<size_t>(i * shape_[1] + j)]; }
  float at(int64_t i, int64_t j) const { return data_[static_cast<size_t>(i * shape_[1] + j)]; }
  float& at(int64_t i, int64_t j, int64_t k) {
    return data_[static_cast<size_t>((i * shape_[1] + j) * shape_[2] + k)];
  }
  float at(int64_t i, int64_t j, int64_t k) const {
    return data_[static_cast<size_t>((i * shape_[1] + j) * shape_[2] + k)];
  }

  // Contiguous row of a rank-2 tensor.
  std::span<float> row(int64_t i) { return {data() + i * shape_[1], static_cast<size_t>(shape_[1])}; }
  std::span<const float> row(int64_t i) const {
    return {data() + i * shape_[1], static_cast<size_t>(shape_[1])};
  }

  std::span<float> flat() { return {data(), data_.size()}; }
  std::span<const float> flat() const { return {data(), data_.size()}; }

  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }
  bool bitwise_equal(const Tensor& o) const {
    return same_shape(o) &&
           std::memcmp(data_.data(), o.data_.data(), data_.size() * sizeof(float)) == 0;
  }

 private:
  std::vector<int64_t> shape_;
  std::vector<float> data_;
};

}  // namespace cq
