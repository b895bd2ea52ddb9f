#include "kdlab/kl_token.hpp"

#include <cmath>
#include <string>

namespace kdlab {

const char* to_string(KLDirection d) {
  return d == KLDirection::Forward ? "forward" : "reverse";
}

const char* to_string(EstimatorKind k) {
  switch (k) {
    case EstimatorKind::K1:
      return "k1";
    case EstimatorKind::K2:
      return "k2";
    case EstimatorKind::K3:
      return "k3";
  }
  return "?";
}

MixWeight::MixWeight(double lambda) : lambda_(lambda) {
  if (!(lambda >= 0.0 && lambda <= 1.0)) {
    throw Error("mixing weight must lie in [0, 1], got " + std::to_string(lambda));
  }
}

namespace {

void check_sizes(const TokenDist& a, const TokenDist& b) {
  if (a.size() != b.size()) throw Error("distributions over different vocabularies");
}

// sum_y a(y) log(a(y) / b(y)).
double kl_divergence(const TokenDist& a, const TokenDist& b) {
  check_sizes(a, b);
  double kl = 0.0;
  for (int y = 0; y < a.size(); ++y) {
    const double ay = a[y];
    if (ay == 0.0) continue;
    const double by = b[y];
    if (by == 0.0) {
      throw InfiniteDivergence("KL is infinite: reference probability is 0 at token " +
                               std::to_string(y));
    }
    kl += ay * (std::log(ay) - std::log(by));
  }
  // Rounding can leave a tiny negative value for a == b up to the last bit.
  return kl < 0.0 ? 0.0 : kl;
}

double log_rho(const TokenDist& p, const TokenDist& q, Token y) {
  check_sizes(p, q);
  if (y < 0 || y >= p.size()) throw InvalidToken("token outside vocabulary");
  if (p[y] <= 0.0 || q[y] <= 0.0) {
    throw InfiniteDivergence("log ratio undefined: zero probability at token " +
                             std::to_string(y));
  }
  return std::log(p[y]) - std::log(q[y]);
}

}  // namespace

double forward_kl(const TokenDist& p, const TokenDist& q) { return kl_divergence(p, q); }

double reverse_kl(const TokenDist& q, const TokenDist& p) { return kl_divergence(q, p); }

double mixed_kl(const TokenDist& p, const TokenDist& q, MixWeight lambda) {
  const double l = lambda.value();
  if (l == 0.0) return forward_kl(p, q);
  if (l == 1.0) return reverse_kl(q, p);
  return l * reverse_kl(q, p) + (1.0 - l) * forward_kl(p, q);
}

double token_kl(KLDirection direction, const TokenDist& teacher, const TokenDist& student) {
  return direction == KLDirection::Forward ? forward_kl(teacher, student)
                                           : reverse_kl(student, teacher);
}

double log_ratio_reward(const TokenDist& p, const TokenDist& q, Token y) {
  return log_rho(p, q, y);
}

double estimator_sample(EstimatorKind kind, const TokenDist& p, const TokenDist& q, Token y) {
  const double lr = log_rho(p, q, y);
  switch (kind) {
    case EstimatorKind::K1:
      return -lr;
    case EstimatorKind::K2:
      return 0.5 * lr * lr;
    case EstimatorKind::K3:
      // expm1 keeps k3 >= 0 and accurate near rho = 1.
      return std::expm1(lr) - lr;
  }
  return 0.0;
}

double estimator_expectation(EstimatorKind kind, const TokenDist& p, const TokenDist& q) {
  check_sizes(p, q);
  double total = 0.0;
  for (int y = 0; y < q.size(); ++y) {
    if (q[y] == 0.0) continue;
    total += q[y] * estimator_sample(kind, p, q, y);
  }
  return total;
}

}  // namespace kdlab
