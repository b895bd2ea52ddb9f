#pragma once

// Exact sequence-level KL by exhaustive enumeration, the prefix (state)
// distributions induced by teacher and student rollouts, and the check that
// sequence KL equals the sum over steps of expected token-level KL.

#include "kdlab/core_policy.hpp"
#include "kdlab/kl_token.hpp"

#include <map>

namespace kdlab {

// Which policy generates the prefixes s_t = (x, y_<t).
enum class PrefixSource { Teacher, Student };

const char* to_string(PrefixSource s);

struct EnumerationSpec {
  // When vocab.eos is set, sequences stop at eos; later positions are absorbing
  // with probability 1 under both policies and contribute no KL.
  Vocabulary vocab;
  int length = 1;
  Sequence prompt;
  double budget = 1e6;

  void validate() const;
  // Number of length-T sequences, V^T.
  double sequence_count() const;
};

struct PrefixDistribution {
  int step = 1;
  std::map<Sequence, double> weights;

  double total() const;
};

double sequence_kl(KLDirection direction, const NGramPolicy& teacher,
                   const NGramPolicy& student, const EnumerationSpec& spec);

// Exact marginal over the first t-1 generated tokens under the named policy.
PrefixDistribution prefix_distribution(PrefixSource source, const NGramPolicy& teacher,
                                       const NGramPolicy& student, const EnumerationSpec& spec,
                                       int t);

// sum_{t=1..T} E_{s_t ~ d^t}[token KL at s_t] with d^t induced by `states`.
// Prefixes that already emitted eos contribute 0.
double expected_token_kl_sum(KLDirection direction, PrefixSource states,
                             const NGramPolicy& teacher, const NGramPolicy& student,
                             const EnumerationSpec& spec);

struct DecompositionResult {
  double lhs = 0.0;
  double rhs = 0.0;
  double gap = 0.0;
};

// lhs = sequence_kl; rhs uses teacher prefixes for Forward and student prefixes
// for Reverse.
DecompositionResult decomposition_check(KLDirection direction, const NGramPolicy& teacher,
                                        const NGramPolicy& student,
                                        const EnumerationSpec& spec);

}  // namespace kdlab
