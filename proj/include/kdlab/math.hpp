#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <limits>

namespace kdlab {

template <typename Scalar>
using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

template <typename Scalar>
using RowMatrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// log(sum(exp(x))) with max-shift. Returns -inf for an all -inf input.
template <typename Derived>
typename Derived::Scalar log_sum_exp(const Eigen::MatrixBase<Derived>& x) {
  using Scalar = typename Derived::Scalar;
  const Scalar m = x.maxCoeff();
  if (!std::isfinite(m)) return m;
  return m + std::log((x.array() - m).exp().sum());
}

// Softmax of logits / temperature.
template <typename Derived>
Vector<typename Derived::Scalar> softmax(const Eigen::MatrixBase<Derived>& logits,
                                         typename Derived::Scalar temperature = 1) {
  using Scalar = typename Derived::Scalar;
  Vector<Scalar> z = logits / temperature;
  z.array() -= z.maxCoeff();
  z = z.array().exp();
  return z / z.sum();
}

// log softmax of logits / temperature.
template <typename Derived>
Vector<typename Derived::Scalar> log_softmax(const Eigen::MatrixBase<Derived>& logits,
                                             typename Derived::Scalar temperature = 1) {
  using Scalar = typename Derived::Scalar;
  Vector<Scalar> z = logits / temperature;
  z.array() -= log_sum_exp(z);
  return z;
}

}  // namespace kdlab
