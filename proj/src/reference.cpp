#include "kdlab/reference.hpp"

#include <cmath>

namespace kdlab::reference {

namespace {
Eigen::VectorXd score(const TokenDist& q, Token y, double temperature) {
  Eigen::VectorXd s = -q.probs() / temperature;
  s[y] += 1.0 / temperature;
  return s;
}
}  // namespace

Eigen::VectorXd forward_kl_grad_expectation(const TokenDist& student, const TokenDist& teacher,
                                            double temperature) {
  Eigen::VectorXd g = Eigen::VectorXd::Zero(student.size());
  for (Token y = 0; y < teacher.size(); ++y) {
    if (teacher[y] > 0.0) g -= teacher[y] * score(student, y, temperature);
  }
  return g;
}

Eigen::VectorXd reverse_kl_grad_score_sum(const TokenDist& student, const TokenDist& teacher,
                                          double temperature) {
  Eigen::VectorXd g = Eigen::VectorXd::Zero(student.size());
  for (Token y = 0; y < student.size(); ++y) {
    if (student[y] == 0.0) continue;
    const double a = std::log(student[y]) - std::log(teacher[y]);
    g += student[y] * a * score(student, y, temperature);
  }
  return g;
}

Eigen::VectorXd reverse_kl_grad_jacobian(const TokenDist& student, const TokenDist& teacher,
                                         double temperature) {
  const Eigen::VectorXd& q = student.probs();
  const Eigen::MatrixXd jacobian =
      (Eigen::MatrixXd(q.asDiagonal()) - q * q.transpose()) / temperature;
  const Eigen::VectorXd outer =
      q.array().log() + 1.0 - teacher.probs().array().log();
  return jacobian.transpose() * outer;
}

}  // namespace kdlab::reference
