#include "doctest.h"

#include "kdlab/kl_token.hpp"
#include "oracles.hpp"

#include <cmath>
#include <numbers>

using namespace kdlab;
using testing::naive_kl;
using testing::random_dist;
using testing::to_std;

namespace {
TokenDist dist2(double a, double b) {
  Eigen::VectorXd p(2);
  p << a, b;
  return TokenDist(p);
}
}  // namespace

TEST_CASE("forward_kl examples") {
  Rng rng(3);
  const TokenDist p = random_dist(16, rng);
  const TokenDist q = random_dist(16, rng);
  CHECK(forward_kl(p, p) == 0.0);
  CHECK(forward_kl(dist2(1.0, 0.0), dist2(0.5, 0.5)) ==
        doctest::Approx(std::numbers::ln2).epsilon(1e-15));
  CHECK(std::abs(forward_kl(p, q) - naive_kl(to_std(p), to_std(q))) <= 1e-12);
}

TEST_CASE("reverse_kl examples") {
  Rng rng(4);
  const TokenDist q = random_dist(16, rng);
  const TokenDist p = random_dist(16, rng);
  CHECK(reverse_kl(q, q) == 0.0);
  CHECK(reverse_kl(q, p) == forward_kl(q, p));
  CHECK(std::abs(reverse_kl(q, p) - naive_kl(to_std(q), to_std(p))) <= 1e-12);
}

TEST_CASE("zero reference probability is an explicit error") {
  CHECK_THROWS_AS(forward_kl(dist2(0.5, 0.5), dist2(1.0, 0.0)), InfiniteDivergence);
  CHECK_THROWS_AS(reverse_kl(dist2(0.5, 0.5), dist2(1.0, 0.0)), InfiniteDivergence);
  CHECK_THROWS_AS(log_ratio_reward(dist2(1.0, 0.0), dist2(0.5, 0.5), 1), InfiniteDivergence);
  CHECK_THROWS_AS(estimator_sample(EstimatorKind::K3, dist2(0.5, 0.5), dist2(1.0, 0.0), 1),
                  InfiniteDivergence);
  // Zero on the weighting side is fine.
  CHECK(forward_kl(dist2(1.0, 0.0), dist2(0.25, 0.75)) == doctest::Approx(std::log(4.0)));
}

TEST_CASE("mixed_kl endpoints and linearity") {
  Rng rng(6);
  for (int trial = 0; trial < 50; ++trial) {
    const int v = 2 + static_cast<int>(rng.below(20));
    const TokenDist p = random_dist(v, rng);
    const TokenDist q = random_dist(v, rng);
    CHECK(mixed_kl(p, q, MixWeight(1.0)) == reverse_kl(q, p));
    CHECK(mixed_kl(p, q, MixWeight(0.0)) == forward_kl(p, q));
    CHECK(mixed_kl(p, q, MixWeight(0.5)) ==
          doctest::Approx(0.5 * (reverse_kl(q, p) + forward_kl(p, q))).epsilon(1e-14));
  }
  CHECK_THROWS_AS(MixWeight(1.5), Error);
  CHECK_THROWS_AS(MixWeight(-0.1), Error);
}

TEST_CASE("log-ratio reward") {
  Rng rng(7);
  const TokenDist p = random_dist(5, rng);
  for (Token y = 0; y < 5; ++y) CHECK(log_ratio_reward(p, p, y) == 0.0);
  CHECK(log_ratio_reward(dist2(0.8, 0.2), dist2(0.2, 0.8), 0) ==
        doctest::Approx(std::log(4.0)).epsilon(1e-15));
  const TokenDist q = random_dist(5, rng);
  for (Token y = 0; y < 5; ++y) {
    CHECK(log_ratio_reward(p, q, y) == -estimator_sample(EstimatorKind::K1, p, q, y));
  }
}

TEST_CASE("estimator samples at fixed ratios") {
  const TokenDist half = dist2(0.5, 0.5);
  for (EstimatorKind k : {EstimatorKind::K1, EstimatorKind::K2, EstimatorKind::K3}) {
    CHECK(estimator_sample(k, half, half, 0) == 0.0);
  }
  // rho = e: log rho = 1.
  const double e = std::numbers::e;
  const TokenDist p = dist2(e / 4, 1 - e / 4);
  const TokenDist q = dist2(0.25, 0.75);
  CHECK(estimator_sample(EstimatorKind::K1, p, q, 0) == doctest::Approx(-1.0).epsilon(1e-14));
  CHECK(estimator_sample(EstimatorKind::K2, p, q, 0) == doctest::Approx(0.5).epsilon(1e-14));
  CHECK(estimator_sample(EstimatorKind::K3, p, q, 0) == doctest::Approx(e - 2.0).epsilon(1e-14));
  // rho = 2
  CHECK(estimator_sample(EstimatorKind::K3, dist2(0.8, 0.2), dist2(0.4, 0.6), 0) ==
        doctest::Approx(1.0 - std::numbers::ln2).epsilon(1e-14));
}

TEST_CASE("estimator expectations") {
  Rng rng(5);
  const TokenDist p = random_dist(8, rng);
  const TokenDist q = random_dist(8, rng);
  const double kl = naive_kl(to_std(q), to_std(p));
  CHECK(std::abs(estimator_expectation(EstimatorKind::K1, p, q) - kl) <= 1e-12);
  CHECK(std::abs(estimator_expectation(EstimatorKind::K3, p, q) - kl) <= 1e-12);
  CHECK(estimator_expectation(EstimatorKind::K2, p, p) == 0.0);
}

TEST_CASE("divergences are non-negative and vanish only at equality") {
  Rng rng(10);
  for (int trial = 0; trial < 10000; ++trial) {
    const int v = 2 + static_cast<int>(rng.below(63));
    const TokenDist p = random_dist(v, rng, 0.1 + 2.0 * rng.uniform());
    const TokenDist q = random_dist(v, rng, 0.1 + 2.0 * rng.uniform());
    const MixWeight l(rng.uniform());
    REQUIRE(forward_kl(p, q) >= 0.0);
    REQUIRE(reverse_kl(q, p) >= 0.0);
    REQUIRE(mixed_kl(p, q, l) >= 0.0);
    REQUIRE(std::abs(forward_kl(p, p)) <= 1e-12);
    REQUIRE(std::abs(mixed_kl(q, q, l)) <= 1e-12);
    if ((p.probs() - q.probs()).cwiseAbs().maxCoeff() > 1e-3) REQUIRE(forward_kl(p, q) > 1e-12);
  }
}

TEST_CASE("k3 is non-negative per sample; k1 and k3 unbiased; k2 biased") {
  Rng rng(11);
  bool k2_biased_somewhere = false;
  for (int trial = 0; trial < 2000; ++trial) {
    const int v = 2 + static_cast<int>(rng.below(31));
    const TokenDist p = random_dist(v, rng, 2.5);
    const TokenDist q = random_dist(v, rng, 2.5);
    const Token y = static_cast<Token>(rng.below(static_cast<std::size_t>(v)));
    REQUIRE(estimator_sample(EstimatorKind::K3, p, q, y) >= 0.0);
    const double kl = reverse_kl(q, p);
    REQUIRE(std::abs(estimator_expectation(EstimatorKind::K1, p, q) - kl) <= 1e-12);
    REQUIRE(std::abs(estimator_expectation(EstimatorKind::K3, p, q) - kl) <= 1e-12);
    if (std::abs(estimator_expectation(EstimatorKind::K2, p, q) - kl) > 1e-6) {
      k2_biased_somewhere = true;
    }
  }
  CHECK(k2_biased_somewhere);
}

TEST_CASE("k2 bias is third order in the perturbation") {
  Rng rng(12);
  const int v = 10;
  const Eigen::VectorXd base = testing::random_logits(v, rng);
  const Eigen::VectorXd delta = testing::random_logits(v, rng, 1.0);
  const TokenDist p = TokenDist::from_logits(base);
  std::vector<double> log_eps;
  std::vector<double> log_bias;
  for (double eps : {1e-1, 1e-2, 1e-3}) {
    const TokenDist q = TokenDist::from_logits(base + eps * delta);
    const double bias =
        std::abs(estimator_expectation(EstimatorKind::K2, p, q) - reverse_kl(q, p));
    log_eps.push_back(std::log(eps));
    log_bias.push_back(std::log(bias));
  }
  const double slope = testing::fit_slope(log_eps, log_bias);
  INFO("slope = " << slope);
  CHECK(slope >= 2.8);
}

TEST_CASE("Monte Carlo k1 error shrinks as N^-1/2") {
  Rng rng(13);
  const TokenDist p = random_dist(8, rng);
  const TokenDist q = random_dist(8, rng);
  const double kl = reverse_kl(q, p);
  std::vector<double> log_n;
  std::vector<double> log_rmse;
  const int replicates = 40;
  for (int n : {100, 1000, 10000, 100000}) {
    double sq = 0.0;
    for (int r = 0; r < replicates; ++r) {
      Rng draw = rng.split(static_cast<std::uint64_t>(n), static_cast<std::uint64_t>(r));
      double mean = 0.0;
      for (int i = 0; i < n; ++i) mean += estimator_sample(EstimatorKind::K1, p, q, sample(q, draw));
      mean /= n;
      sq += (mean - kl) * (mean - kl);
    }
    log_n.push_back(std::log(static_cast<double>(n)));
    log_rmse.push_back(0.5 * std::log(sq / replicates));
  }
  const double slope = testing::fit_slope(log_n, log_rmse);
  INFO("slope = " << slope);
  CHECK(std::abs(slope + 0.5) <= 0.1);
}
