#include "kdlab/seq_kl.hpp"

#include <cmath>
#include <functional>

namespace kdlab {

const char* to_string(PrefixSource s) { return s == PrefixSource::Teacher ? "teacher" : "student"; }

void EnumerationSpec::validate() const {
  vocab.validate();
  if (length < 1) throw Error("enumeration length must be >= 1");
  for (Token t : prompt) vocab.check_token(t);
}

double EnumerationSpec::sequence_count() const {
  return std::pow(static_cast<double>(vocab.size), length);
}

double PrefixDistribution::total() const {
  double s = 0.0;
  for (const auto& [prefix, w] : weights) s += w;
  return s;
}

namespace {

void check_setup(const NGramPolicy& teacher, const NGramPolicy& student,
                 const EnumerationSpec& spec) {
  spec.validate();
  if (teacher.vocab_size() != spec.vocab.size || student.vocab_size() != spec.vocab.size) {
    throw Error("policies and enumeration spec disagree on vocabulary size");
  }
}

void check_budget(double required, double budget) {
  if (required > budget) throw BudgetExceeded(required, budget);
}

// Log-probability tables of both policies at one context.
struct StepLogProbs {
  Eigen::VectorXd teacher;
  Eigen::VectorXd student;
};

StepLogProbs step_log_probs(const NGramPolicy& teacher, const NGramPolicy& student,
                            const Sequence& history) {
  return {log_softmax(teacher.logits().row(
                          static_cast<Eigen::Index>(teacher.context_index(history))).transpose(),
                      teacher.temperature()),
          log_softmax(student.logits().row(
                          static_cast<Eigen::Index>(student.context_index(history))).transpose(),
                      student.temperature())};
}

bool is_eos(const EnumerationSpec& spec, Token y) { return spec.vocab.eos && *spec.vocab.eos == y; }

}  // namespace

double sequence_kl(KLDirection direction, const NGramPolicy& teacher,
                   const NGramPolicy& student, const EnumerationSpec& spec) {
  check_setup(teacher, student, spec);
  check_budget(spec.sequence_count(), spec.budget);

  const int v = spec.vocab.size;
  Sequence history = spec.prompt;
  double total = 0.0;

  // Depth-first over sequences; log-probabilities of the whole sequence are
  // accumulated additively along the path.
  std::function<void(int, double, double)> visit = [&](int depth, double logp, double logq) {
    const StepLogProbs lp = step_log_probs(teacher, student, history);
    for (Token y = 0; y < v; ++y) {
      const double lp_y = logp + lp.teacher[y];
      const double lq_y = logq + lp.student[y];
      if (depth + 1 == spec.length || is_eos(spec, y)) {
        if (direction == KLDirection::Forward) {
          const double p = std::exp(lp_y);
          if (p > 0.0) total += p * (lp_y - lq_y);
        } else {
          const double q = std::exp(lq_y);
          if (q > 0.0) total += q * (lq_y - lp_y);
        }
        continue;
      }
      history.push_back(y);
      visit(depth + 1, lp_y, lq_y);
      history.pop_back();
    }
  };
  visit(0, 0.0, 0.0);
  return total;
}

PrefixDistribution prefix_distribution(PrefixSource source, const NGramPolicy& teacher,
                                       const NGramPolicy& student, const EnumerationSpec& spec,
                                       int t) {
  check_setup(teacher, student, spec);
  if (t < 1 || t > spec.length) throw Error("prefix step t must lie in [1, T]");
  check_budget(std::pow(static_cast<double>(spec.vocab.size), t - 1), spec.budget);

  const NGramPolicy& policy = source == PrefixSource::Teacher ? teacher : student;
  PrefixDistribution out;
  out.step = t;
  Sequence history = spec.prompt;
  Sequence generated;

  std::function<void(double)> visit = [&](double logw) {
    if (static_cast<int>(generated.size()) == t - 1 ||
        (!generated.empty() && is_eos(spec, generated.back()))) {
      out.weights[generated] += std::exp(logw);
      return;
    }
    const Eigen::VectorXd lp = log_softmax(
        policy.logits().row(static_cast<Eigen::Index>(policy.context_index(history))).transpose(),
        policy.temperature());
    for (Token y = 0; y < spec.vocab.size; ++y) {
      history.push_back(y);
      generated.push_back(y);
      visit(logw + lp[y]);
      generated.pop_back();
      history.pop_back();
    }
  };
  visit(0.0);
  return out;
}

double expected_token_kl_sum(KLDirection direction, PrefixSource states,
                             const NGramPolicy& teacher, const NGramPolicy& student,
                             const EnumerationSpec& spec) {
  check_setup(teacher, student, spec);
  double total = 0.0;
  for (int t = 1; t <= spec.length; ++t) {
    const PrefixDistribution d = prefix_distribution(states, teacher, student, spec, t);
    for (const auto& [generated, w] : d.weights) {
      if (!generated.empty() && is_eos(spec, generated.back())) continue;
      const Prefix prefix{spec.prompt, generated};
      total += w * token_kl(direction, token_dist(teacher, prefix), token_dist(student, prefix));
    }
  }
  return total;
}

DecompositionResult decomposition_check(KLDirection direction, const NGramPolicy& teacher,
                                        const NGramPolicy& student,
                                        const EnumerationSpec& spec) {
  DecompositionResult r;
  r.lhs = sequence_kl(direction, teacher, student, spec);
  r.rhs = expected_token_kl_sum(
      direction, direction == KLDirection::Forward ? PrefixSource::Teacher : PrefixSource::Student,
      teacher, student, spec);
  r.gap = std::abs(r.lhs - r.rhs);
  return r;
}

}  // namespace kdlab
