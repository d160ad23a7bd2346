#pragma once

// Linear read-out probes on frozen features: ridge regression for continuous
// targets, one-vs-rest ridge for classification.

#include <cmath>
#include <map>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "gaitdis/core/error.hpp"

namespace gaitdis {

struct RidgeModel {
  Eigen::VectorXd mean;   // feature centring
  Eigen::MatrixXd coef;   // d x k
  Eigen::RowVectorXd bias;

  Eigen::MatrixXd predict(const Eigen::MatrixXd& x) const {
    return ((x.rowwise() - mean.transpose()) * coef).rowwise() + bias;
  }
};

inline RidgeModel fit_ridge(const Eigen::MatrixXd& x, const Eigen::MatrixXd& y, double lambda = 1e-3) {
  if (x.rows() != y.rows() || x.rows() < 2) throw InvalidInput("ridge: need matching rows, at least two");
  RidgeModel m;
  m.mean = x.colwise().mean().transpose();
  const Eigen::MatrixXd xc = x.rowwise() - m.mean.transpose();
  m.bias = y.colwise().mean();
  const Eigen::MatrixXd yc = y.rowwise() - m.bias;
  // Scale the penalty with the feature energy so lambda is unit-free.
  const double scale = std::max(1e-12, xc.squaredNorm() / static_cast<double>(x.cols()));
  Eigen::MatrixXd gram = xc.transpose() * xc;
  gram.diagonal().array() += lambda * scale;
  m.coef = gram.ldlt().solve(xc.transpose() * yc);
  return m;
}

/// Coefficient of determination averaged over target columns.
inline double r_squared(const Eigen::MatrixXd& pred, const Eigen::MatrixXd& y) {
  double total = 0;
  for (Eigen::Index c = 0; c < y.cols(); ++c) {
    const double mu = y.col(c).mean();
    const double ss_tot = (y.col(c).array() - mu).square().sum();
    const double ss_res = (y.col(c) - pred.col(c)).squaredNorm();
    total += ss_tot > 0 ? 1.0 - ss_res / ss_tot : 0.0;
  }
  return total / static_cast<double>(y.cols());
}

/// Held-out R^2 of a linear map from features to targets.
inline double regression_probe(const Eigen::MatrixXd& x_train, const Eigen::MatrixXd& y_train,
                               const Eigen::MatrixXd& x_test, const Eigen::MatrixXd& y_test, double lambda = 1e-3) {
  return r_squared(fit_ridge(x_train, y_train, lambda).predict(x_test), y_test);
}

/// Angles as (cos, sin) rows, so regression does not see the wrap-around.
inline Eigen::MatrixXd circular_targets(const std::vector<double>& radians) {
  Eigen::MatrixXd y(static_cast<Eigen::Index>(radians.size()), 2);
  for (std::size_t i = 0; i < radians.size(); ++i) {
    y(static_cast<Eigen::Index>(i), 0) = std::cos(radians[i]);
    y(static_cast<Eigen::Index>(i), 1) = std::sin(radians[i]);
  }
  return y;
}

/// Held-out accuracy of one-vs-rest ridge classification.
inline double classification_probe(const Eigen::MatrixXd& x_train, const std::vector<std::string>& y_train,
                                   const Eigen::MatrixXd& x_test, const std::vector<std::string>& y_test,
                                   double lambda = 1e-3) {
  std::map<std::string, int> cls;
  for (const auto& s : y_train) cls.try_emplace(s, static_cast<int>(cls.size()));
  std::vector<std::string> names(cls.size());
  for (const auto& [s, k] : cls) names[k] = s;
  Eigen::MatrixXd onehot = Eigen::MatrixXd::Zero(x_train.rows(), static_cast<Eigen::Index>(cls.size()));
  for (std::size_t i = 0; i < y_train.size(); ++i) onehot(static_cast<Eigen::Index>(i), cls.at(y_train[i])) = 1;
  const Eigen::MatrixXd scores = fit_ridge(x_train, onehot, lambda).predict(x_test);
  int hits = 0;
  for (Eigen::Index i = 0; i < scores.rows(); ++i) {
    Eigen::Index best;
    scores.row(i).maxCoeff(&best);
    hits += names[best] == y_test[i];
  }
  return static_cast<double>(hits) / static_cast<double>(scores.rows());
}

}  // namespace gaitdis
