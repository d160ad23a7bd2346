#pragma once

#include <random>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "gaitdis/core/tensor.hpp"

namespace gaitdis {

template <typename T>
using MatX = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using VecX = Eigen::Matrix<T, Eigen::Dynamic, 1>;
template <typename T>
using MatMap = Eigen::Map<MatX<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const MatX<T>>;

using Rng = std::mt19937_64;

/// A trainable array with its gradient accumulator.
template <typename T>
struct Param {
  std::string name;
  std::vector<int> shape;
  AlignedVector<T> value;
  AlignedVector<T> grad;

  Param() = default;
  Param(std::string n, std::vector<int> s) : name(std::move(n)), shape(std::move(s)) {
    std::size_t count = 1;
    for (int d : shape) count *= static_cast<std::size_t>(d);
    value.assign(count, T(0));
    grad.assign(count, T(0));
  }
  std::size_t size() const { return value.size(); }
  void zero_grad() { std::fill(grad.begin(), grad.end(), T(0)); }

  MatMap<T> mat(int rows, int cols) { return MatMap<T>(value.data(), rows, cols); }
  ConstMatMap<T> mat(int rows, int cols) const { return ConstMatMap<T>(value.data(), rows, cols); }
  MatMap<T> gmat(int rows, int cols) { return MatMap<T>(grad.data(), rows, cols); }
};

/// Non-trainable state that still belongs in a checkpoint (batch-norm running
/// statistics).
template <typename T>
struct Buffer {
  std::string name;
  AlignedVector<T> value;
};

template <typename T>
void fill_normal(AlignedVector<T>& v, double stddev, Rng& rng) {
  std::normal_distribution<double> dist(0.0, stddev);
  for (auto& x : v) x = static_cast<T>(dist(rng));
}

/// Fills a square block with an orthogonal matrix (QR of a Gaussian matrix,
/// sign-corrected so the distribution is uniform over O(n)).
template <typename T>
MatX<T> random_orthogonal(int n, Rng& rng) {
  std::normal_distribution<double> dist(0.0, 1.0);
  Eigen::MatrixXd a(n, n);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) a(i, j) = dist(rng);
  Eigen::HouseholderQR<Eigen::MatrixXd> qr(a);
  Eigen::MatrixXd q = qr.householderQ();
  const Eigen::MatrixXd r = qr.matrixQR();
  for (int j = 0; j < n; ++j)
    if (r(j, j) < 0) q.col(j) = -q.col(j);
  return q.cast<T>();
}

}  // namespace gaitdis
