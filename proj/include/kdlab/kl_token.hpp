#pragma once

// Exact token-level divergences, KL mixing, the log-ratio reward and the
// single-sample reverse-KL estimators k1, k2, k3. All logs are natural.

#include "kdlab/core_policy.hpp"

namespace kdlab {

enum class KLDirection { Forward, Reverse };

enum class EstimatorKind { K1, K2, K3 };

const char* to_string(KLDirection d);
const char* to_string(EstimatorKind k);

// Weight on the reverse direction; 0 is pure forward, 1 pure reverse.
class MixWeight {
 public:
  constexpr MixWeight() = default;
  explicit MixWeight(double lambda);

  double value() const { return lambda_; }

 private:
  double lambda_ = 0.0;
};

// KL(p || q) = sum_y p(y) (log p(y) - log q(y)). Throws InfiniteDivergence when
// q(y) = 0 < p(y).
double forward_kl(const TokenDist& p, const TokenDist& q);

// KL(q || p), the student-weighted direction.
double reverse_kl(const TokenDist& q, const TokenDist& p);

// lambda KL(q || p) + (1 - lambda) KL(p || q). Endpoints skip the unused term.
double mixed_kl(const TokenDist& p, const TokenDist& q, MixWeight lambda);

// Token-level KL in the requested direction between teacher p and student q.
double token_kl(KLDirection direction, const TokenDist& teacher, const TokenDist& student);

// log p(y) - log q(y).
double log_ratio_reward(const TokenDist& p, const TokenDist& q, Token y);

// Estimator evaluated at rho = p(y) / q(y): k1 = -log rho, k2 = (log rho)^2 / 2,
// k3 = rho - 1 - log rho.
double estimator_sample(EstimatorKind kind, const TokenDist& p, const TokenDist& q, Token y);

// sum_y q(y) estimator_sample(kind, p, q, y), by full summation.
double estimator_expectation(EstimatorKind kind, const TokenDist& p, const TokenDist& q);

}  // namespace kdlab
