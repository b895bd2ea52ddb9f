#pragma once

// Closed-form gradients of token-level KL losses for tabular softmax policies,
// the REINFORCE estimator with the log-ratio reward, and a central-difference
// oracle.
//
// Sign convention: every grad_* function returns the descent gradient of the
// named loss with respect to the student's logit table. reinforce_grad_estimate
// returns the ascent direction of the expected log-ratio reward, whose
// expectation is -grad_reverse_kl.

#include "kdlab/core_policy.hpp"
#include "kdlab/kl_token.hpp"

#include <Eigen/Dense>

#include <cstddef>
#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <vector>

namespace kdlab {

// Gradient with the shape of NGramPolicy::logits, stored sparsely by context row.
class GradTable {
 public:
  GradTable() = default;
  GradTable(std::size_t num_contexts, int vocab_size)
      : num_contexts_(num_contexts), vocab_size_(vocab_size) {}

  static GradTable like(const NGramPolicy& policy) {
    return GradTable(policy.num_contexts(), policy.vocab_size());
  }

  std::size_t num_contexts() const { return num_contexts_; }
  int vocab_size() const { return vocab_size_; }
  const std::map<std::size_t, Eigen::VectorXd>& rows() const { return rows_; }

  // Zero-initialised on first access.
  Eigen::VectorXd& row(std::size_t context);
  double operator()(std::size_t context, Token y) const;

  GradTable& add_row(std::size_t context, const Eigen::Ref<const Eigen::VectorXd>& g,
                     double scale = 1.0);
  GradTable& operator+=(const GradTable& other);
  GradTable& operator*=(double s);

  double squared_norm() const;
  double norm() const;
  // Largest |entry| over all stored rows.
  double max_abs() const;

  RowMatrix<double> to_dense() const;

  // logits -= step * gradient.
  void apply_descent(NGramPolicy& policy, double step) const;

 private:
  std::size_t num_contexts_ = 0;
  int vocab_size_ = 0;
  std::map<std::size_t, Eigen::VectorXd> rows_;
};

GradTable operator-(const GradTable& g);
GradTable operator*(double s, GradTable g);

// d KL(p_T || q_theta) / d logits: row (q - p) / T at the active context.
GradTable grad_forward_kl(const NGramPolicy& student, const TokenDist& teacher_dist,
                          const Prefix& prefix);

// d KL(q_theta || p_T) / d logits: row q * (a - E_q a) / T with a = log q - log p.
// Throws InfiniteDivergence when the teacher is 0 where the student is positive.
GradTable grad_reverse_kl(const NGramPolicy& student, const TokenDist& teacher_dist,
                          const Prefix& prefix);

// lambda grad_reverse_kl + (1 - lambda) grad_forward_kl.
GradTable grad_mixed_kl(const NGramPolicy& student, const TokenDist& teacher_dist,
                        const Prefix& prefix, MixWeight lambda);

// Row-level helpers on explicit distributions; these are what the GradTable
// variants place into the active row.
Eigen::VectorXd forward_kl_logit_grad(const TokenDist& student, const TokenDist& teacher,
                                      double temperature);
Eigen::VectorXd reverse_kl_logit_grad(const TokenDist& student, const TokenDist& teacher,
                                      double temperature);
Eigen::VectorXd mixed_kl_logit_grad(const TokenDist& student, const TokenDist& teacher,
                                    double temperature, MixWeight lambda);

enum class Baseline { None, MeanReward };

struct ReinforceConfig {
  int n_samples = 1;
  Baseline baseline = Baseline::None;
  std::uint64_t seed = 0;
  // Replace sampling with the exact expectation over y ~ q.
  bool enumerate = false;
};

// (1/N) sum_i (r(y_i) - b_i) grad log q(y_i) with y_i ~ q_theta and
// r = log p_T - log q_theta held constant. The MeanReward baseline in sampling
// mode is the leave-one-out mean of the other N-1 rewards so the estimate stays
// unbiased; in enumeration mode it is E_q[r].
GradTable reinforce_grad_estimate(const NGramPolicy& student, const TokenDist& teacher_dist,
                                  const Prefix& prefix, const ReinforceConfig& cfg);

using PolicyLoss = std::function<double(const NGramPolicy&)>;

// Central differences (L(theta + h e) - L(theta - h e)) / 2h. When contexts is
// given only those rows are perturbed; otherwise every parameter is. Throws on
// a non-finite loss.
GradTable finite_diff_grad(const PolicyLoss& loss, const NGramPolicy& student, double h,
                           std::optional<std::vector<std::size_t>> contexts = std::nullopt);

}  // namespace kdlab
