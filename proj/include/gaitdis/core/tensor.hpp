#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "gaitdis/core/error.hpp"

namespace gaitdis {

/// Numeric storage. Eigen peels unaligned heads off vectorized loops, so the
/// summation order (and the last bits of results) would otherwise depend on
/// where malloc happened to place a buffer.
template <typename T>
using AlignedVector = std::vector<T, Eigen::aligned_allocator<T>>;

/// Dense NCHW tensor. Rank is fixed at 4; vectors use (N, C, 1, 1).
template <typename T>
class Tensor {
 public:
  Tensor() = default;
  Tensor(int n, int c, int h, int w, T fill = T(0))
      : shape_{n, c, h, w}, data_(static_cast<std::size_t>(n) * c * h * w, fill) {}

  int n() const { return shape_[0]; }
  int c() const { return shape_[1]; }
  int h() const { return shape_[2]; }
  int w() const { return shape_[3]; }
  const std::array<int, 4>& shape() const { return shape_; }
  std::size_t size() const { return data_.size(); }
  std::size_t plane() const { return static_cast<std::size_t>(shape_[2]) * shape_[3]; }
  std::size_t per_item() const { return static_cast<std::size_t>(shape_[1]) * plane(); }

  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }
  std::span<T> span() { return data_; }
  std::span<const T> span() const { return data_; }
  AlignedVector<T>& vec() { return data_; }
  const AlignedVector<T>& vec() const { return data_; }

  T* item(int i) { return data_.data() + i * per_item(); }
  const T* item(int i) const { return data_.data() + i * per_item(); }

  T& operator()(int i, int ch, int y, int x) {
    return data_[((static_cast<std::size_t>(i) * shape_[1] + ch) * shape_[2] + y) * shape_[3] + x];
  }
  const T& operator()(int i, int ch, int y, int x) const {
    return data_[((static_cast<std::size_t>(i) * shape_[1] + ch) * shape_[2] + y) * shape_[3] + x];
  }

  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }
  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  /// Reinterprets the shape without moving data.
  Tensor reshaped(int n, int c, int h, int w) const {
    if (static_cast<std::size_t>(n) * c * h * w != data_.size())
      throw ShapeError("reshape element count mismatch");
    Tensor t = *this;
    t.shape_ = {n, c, h, w};
    return t;
  }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](T v) { return std::isfinite(v); });
  }

  std::string shape_str() const {
    return std::to_string(shape_[0]) + "x" + std::to_string(shape_[1]) + "x" +
           std::to_string(shape_[2]) + "x" + std::to_string(shape_[3]);
  }

 private:
  std::array<int, 4> shape_{0, 0, 0, 0};
  AlignedVector<T> data_;
};

template <typename To, typename From>
Tensor<To> tensor_cast(const Tensor<From>& t) {
  Tensor<To> out(t.n(), t.c(), t.h(), t.w());
  std::transform(t.data(), t.data() + t.size(), out.data(), [](From v) { return static_cast<To>(v); });
  return out;
}

}  // namespace gaitdis
