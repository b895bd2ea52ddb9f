#pragma once

// Direct, unoptimised reference computations used by `kdlab verify` and the
// tests as second routes to the same quantities as the production code.

#include "kdlab/core_policy.hpp"
#include "kdlab/kl_token.hpp"
#include "kdlab/math.hpp"

#include <Eigen/Dense>

namespace kdlab::reference {

// -sum_y p(y) grad_z log q(y), summed token by token.
Eigen::VectorXd forward_kl_grad_expectation(const TokenDist& student, const TokenDist& teacher,
                                            double temperature);

// sum_y q(y) (log q(y) - log p(y)) grad_z log q(y), summed token by token.
Eigen::VectorXd reverse_kl_grad_score_sum(const TokenDist& student, const TokenDist& teacher,
                                          double temperature);

// J^T (log q + 1 - log p) with the softmax Jacobian J = (diag q - q q^T) / T,
// i.e. the chain rule applied to the expanded sum q log q - q log p.
Eigen::VectorXd reverse_kl_grad_jacobian(const TokenDist& student, const TokenDist& teacher,
                                         double temperature);

// Materialises both logit vectors and both softmaxes, then sums the KL.
template <typename DWT, typename DHT, typename DWS, typename DHS>
double dense_token_kl(KLDirection direction, const Eigen::MatrixBase<DWT>& teacher_weights,
                      const Eigen::MatrixBase<DWS>& student_weights,
                      const Eigen::MatrixBase<DHT>& h_teacher,
                      const Eigen::MatrixBase<DHS>& h_student) {
  const Eigen::VectorXd zt =
      teacher_weights.template cast<double>() * h_teacher.template cast<double>();
  const Eigen::VectorXd zs =
      student_weights.template cast<double>() * h_student.template cast<double>();
  const Eigen::VectorXd log_p = log_softmax(zt);
  const Eigen::VectorXd log_q = log_softmax(zs);
  const Eigen::VectorXd p = log_p.array().exp();
  const Eigen::VectorXd q = log_q.array().exp();
  if (direction == KLDirection::Forward) return (p.array() * (log_p - log_q).array()).sum();
  return (q.array() * (log_q - log_p).array()).sum();
}

}  // namespace kdlab::reference
