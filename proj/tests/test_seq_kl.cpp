#include "doctest.h"

#include "kdlab/seq_kl.hpp"
#include "oracles.hpp"

#include <cmath>

using namespace kdlab;

namespace {

// Odometer enumeration in probability space, one token_dist call per step.
double naive_sequence_kl(KLDirection dir, const NGramPolicy& teacher, const NGramPolicy& student,
                         const Sequence& prompt, int length) {
  const int v = teacher.vocab_size();
  std::vector<Token> y(static_cast<std::size_t>(length), 0);
  double total = 0.0;
  while (true) {
    double p = 1.0;
    double q = 1.0;
    for (int t = 0; t < length; ++t) {
      const Prefix s{prompt, Sequence(y.begin(), y.begin() + t)};
      p *= token_dist(teacher, s)[y[static_cast<std::size_t>(t)]];
      q *= token_dist(student, s)[y[static_cast<std::size_t>(t)]];
    }
    total += dir == KLDirection::Forward ? p * std::log(p / q) : q * std::log(q / p);
    int i = length - 1;
    while (i >= 0 && ++y[static_cast<std::size_t>(i)] == v) y[static_cast<std::size_t>(i--)] = 0;
    if (i < 0) break;
  }
  return total;
}

struct Pair {
  NGramPolicy teacher;
  NGramPolicy student;
};

Pair random_pair(int v, int order, std::uint64_t seed, double scale = 1.0) {
  Rng rng(seed);
  const Vocabulary vocab{v, std::nullopt};
  NGramPolicy t = NGramPolicy::random(vocab, order, scale, rng);
  NGramPolicy s = NGramPolicy::random(vocab, order, scale, rng);
  return {std::move(t), std::move(s)};
}

}  // namespace

TEST_CASE("sequence_kl examples") {
  const Pair pr = random_pair(3, 1, 42);
  const EnumerationSpec spec{Vocabulary{3, std::nullopt}, 4, {1}};
  SUBCASE("teacher = student gives zero") {
    CHECK(sequence_kl(KLDirection::Forward, pr.teacher, pr.teacher, spec) == 0.0);
    CHECK(sequence_kl(KLDirection::Reverse, pr.student, pr.student, spec) == 0.0);
  }
  SUBCASE("T=1 is the token KL at the prompt") {
    const EnumerationSpec one{spec.vocab, 1, {1}};
    const Prefix s{{1}, {}};
    const TokenDist p = token_dist(pr.teacher, s);
    const TokenDist q = token_dist(pr.student, s);
    CHECK(sequence_kl(KLDirection::Forward, pr.teacher, pr.student, one) ==
          doctest::Approx(forward_kl(p, q)).epsilon(1e-13));
    CHECK(sequence_kl(KLDirection::Reverse, pr.teacher, pr.student, one) ==
          doctest::Approx(reverse_kl(q, p)).epsilon(1e-13));
  }
  SUBCASE("V=3, T=4, seed 42 golden values") {
    const double fwd = sequence_kl(KLDirection::Forward, pr.teacher, pr.student, spec);
    const double rev = sequence_kl(KLDirection::Reverse, pr.teacher, pr.student, spec);
    CHECK(std::abs(fwd - naive_sequence_kl(KLDirection::Forward, pr.teacher, pr.student, {1}, 4)) <= 1e-12);
    CHECK(std::abs(rev - naive_sequence_kl(KLDirection::Reverse, pr.teacher, pr.student, {1}, 4)) <= 1e-12);
    // Frozen after the first run.
    CHECK(fwd == doctest::Approx(2.4329005129043146).epsilon(1e-12));
    CHECK(rev == doctest::Approx(2.6634200555171628).epsilon(1e-12));
  }
  SUBCASE("budget guard refuses with the required count") {
    const EnumerationSpec big{Vocabulary{3, std::nullopt}, 4, {1}, 50.0};
    try {
      sequence_kl(KLDirection::Forward, pr.teacher, pr.student, big);
      FAIL("expected BudgetExceeded");
    } catch (const BudgetExceeded& e) {
      CHECK(e.required() == 81.0);
      CHECK(e.budget() == 50.0);
    }
    // Step 4 needs 27 prefixes.
    const EnumerationSpec tight{Vocabulary{3, std::nullopt}, 4, {1}, 20.0};
    CHECK_THROWS_AS(prefix_distribution(PrefixSource::Teacher, pr.teacher, pr.student, tight, 4),
                    BudgetExceeded);
    CHECK_NOTHROW(prefix_distribution(PrefixSource::Teacher, pr.teacher, pr.student, tight, 3));
  }
}

TEST_CASE("prefix_distribution examples") {
  const Pair pr = random_pair(3, 2, 7);
  const EnumerationSpec spec{Vocabulary{3, std::nullopt}, 4, {0, 2}};
  SUBCASE("t=1 is a point mass on the bare prompt") {
    const PrefixDistribution d = prefix_distribution(PrefixSource::Student, pr.teacher, pr.student, spec, 1);
    REQUIRE(d.weights.size() == 1);
    CHECK(d.weights.begin()->first.empty());
    CHECK(d.weights.begin()->second == 1.0);
  }
  SUBCASE("deterministic policy is a point mass on its greedy prefix") {
    NGramPolicy det(Vocabulary{3, std::nullopt}, 1);
    for (int c = 0; c < 3; ++c) det.logits()(c, (c + 1) % 3) = 1e4;
    const PrefixDistribution d = prefix_distribution(PrefixSource::Teacher, det, pr.student,
                                                     EnumerationSpec{det.vocab(), 4, {0}}, 4);
    REQUIRE(d.weights.size() >= 1);
    CHECK(d.weights.at(Sequence{1, 2, 0}) == doctest::Approx(1.0).epsilon(1e-12));
  }
  SUBCASE("uniform policy, V=2, t=3") {
    const NGramPolicy u(Vocabulary{2, std::nullopt}, 1);
    const PrefixDistribution d =
        prefix_distribution(PrefixSource::Student, u, u, EnumerationSpec{u.vocab(), 3, {0}}, 3);
    CHECK(d.weights.size() == 4);
    for (const auto& [prefix, w] : d.weights) {
      CHECK(prefix.size() == 2);
      CHECK(w == doctest::Approx(0.25).epsilon(1e-15));
    }
  }
  SUBCASE("weights sum to one") {
    for (int t = 1; t <= 4; ++t) {
      for (PrefixSource src : {PrefixSource::Teacher, PrefixSource::Student}) {
        CHECK(std::abs(prefix_distribution(src, pr.teacher, pr.student, spec, t).total() - 1.0) <= 1e-10);
      }
    }
  }
  SUBCASE("t beyond the horizon is an error") {
    CHECK_THROWS_AS(prefix_distribution(PrefixSource::Teacher, pr.teacher, pr.student, spec, 5), Error);
  }
}

TEST_CASE("decomposition_check examples") {
  const Pair pr = random_pair(3, 1, 42);
  const EnumerationSpec spec{Vocabulary{3, std::nullopt}, 4, {1}};
  const DecompositionResult same = decomposition_check(KLDirection::Forward, pr.teacher, pr.teacher, spec);
  CHECK(same.lhs == 0.0);
  CHECK(same.rhs == 0.0);
  for (KLDirection dir : {KLDirection::Forward, KLDirection::Reverse}) {
    const DecompositionResult r = decomposition_check(dir, pr.teacher, pr.student, spec);
    CHECK(r.lhs > 0.0);
    CHECK(r.gap <= 1e-10);
  }
}

TEST_CASE("decomposition holds on 50 random instances in both directions") {
  double worst = 0.0;
  for (std::uint64_t i = 0; i < 50; ++i) {
    Rng pick(500 + i);
    const int v = 2 + static_cast<int>(pick.below(2));
    const int len = 1 + static_cast<int>(pick.below(5));
    const int order = static_cast<int>(pick.below(3));
    const Pair pr = random_pair(v, order, 600 + i, 1.5);
    Sequence prompt;
    for (std::size_t k = 0, n = 1 + pick.below(2); k < n; ++k) {
      prompt.push_back(static_cast<Token>(pick.below(static_cast<std::size_t>(v))));
    }
    const EnumerationSpec spec{Vocabulary{v, std::nullopt}, len, prompt};
    for (KLDirection dir : {KLDirection::Forward, KLDirection::Reverse}) {
      const DecompositionResult r = decomposition_check(dir, pr.teacher, pr.student, spec);
      CHECK(r.lhs >= 0.0);
      worst = std::max(worst, r.gap);
    }
  }
  INFO("worst gap " << worst);
  CHECK(worst <= 1e-10);
}

TEST_CASE("forward KL under the student's prefixes is the wrong decomposition") {
  const Pair pr = random_pair(3, 1, 42, 1.5);
  const EnumerationSpec spec{Vocabulary{3, std::nullopt}, 4, {1}};
  const double lhs = sequence_kl(KLDirection::Forward, pr.teacher, pr.student, spec);
  const double wrong = expected_token_kl_sum(KLDirection::Forward, PrefixSource::Student,
                                             pr.teacher, pr.student, spec);
  CHECK(std::abs(lhs - wrong) > 1e-3);
  const double wrong_rev = expected_token_kl_sum(KLDirection::Reverse, PrefixSource::Teacher,
                                                 pr.teacher, pr.student, spec);
  CHECK(std::abs(sequence_kl(KLDirection::Reverse, pr.teacher, pr.student, spec) - wrong_rev) > 1e-3);
}

TEST_CASE("order-0 policies: sequence KL is non-decreasing in T") {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const Pair pr = random_pair(3, 0, 900 + seed);
    double prev = 0.0;
    for (int len = 1; len <= 6; ++len) {
      const double kl = sequence_kl(KLDirection::Reverse, pr.teacher, pr.student,
                                    EnumerationSpec{Vocabulary{3, std::nullopt}, len, {}});
      CHECK(kl >= prev - 1e-12);
      // i.i.d. steps: exactly T times the per-step KL.
      CHECK(kl == doctest::Approx(len * reverse_kl(pr.student.dist(0), pr.teacher.dist(0))).epsilon(1e-12));
      prev = kl;
    }
  }
}

TEST_CASE("eos makes later positions absorbing") {
  Rng rng(31);
  const Vocabulary vocab{3, Token{2}};
  const NGramPolicy t = NGramPolicy::random(vocab, 1, 1.0, rng);
  const NGramPolicy s = NGramPolicy::random(vocab, 1, 1.0, rng);
  const EnumerationSpec spec{vocab, 4, {0}};
  for (KLDirection dir : {KLDirection::Forward, KLDirection::Reverse}) {
    const DecompositionResult r = decomposition_check(dir, t, s, spec);
    CHECK(r.gap <= 1e-10);
    // Strictly below the fixed-length value: post-eos steps contribute nothing.
    const double fixed = sequence_kl(dir, t, s, EnumerationSpec{Vocabulary{3, std::nullopt}, 4, {0}});
    CHECK(r.lhs < fixed);
  }
}
