#include "kdlab/grad_engine.hpp"

#include <cmath>
#include <string>

namespace kdlab {

Eigen::VectorXd& GradTable::row(std::size_t context) {
  if (context >= num_contexts_) throw Error("gradient row out of range");
  auto it = rows_.find(context);
  if (it == rows_.end()) it = rows_.emplace(context, Eigen::VectorXd::Zero(vocab_size_)).first;
  return it->second;
}

double GradTable::operator()(std::size_t context, Token y) const {
  const auto it = rows_.find(context);
  return it == rows_.end() ? 0.0 : it->second[y];
}

GradTable& GradTable::add_row(std::size_t context, const Eigen::Ref<const Eigen::VectorXd>& g,
                              double scale) {
  if (g.size() != vocab_size_) throw Error("gradient row has wrong width");
  row(context) += scale * g;
  return *this;
}

GradTable& GradTable::operator+=(const GradTable& other) {
  if (other.num_contexts_ != num_contexts_ || other.vocab_size_ != vocab_size_) {
    throw Error("gradient tables of different shape");
  }
  for (const auto& [c, g] : other.rows_) row(c) += g;
  return *this;
}

GradTable& GradTable::operator*=(double s) {
  for (auto& [c, g] : rows_) g *= s;
  return *this;
}

double GradTable::squared_norm() const {
  double s = 0.0;
  for (const auto& [c, g] : rows_) s += g.squaredNorm();
  return s;
}

double GradTable::norm() const { return std::sqrt(squared_norm()); }

double GradTable::max_abs() const {
  double m = 0.0;
  for (const auto& [c, g] : rows_) m = std::max(m, g.cwiseAbs().maxCoeff());
  return m;
}

RowMatrix<double> GradTable::to_dense() const {
  RowMatrix<double> dense =
      RowMatrix<double>::Zero(static_cast<Eigen::Index>(num_contexts_), vocab_size_);
  for (const auto& [c, g] : rows_) dense.row(static_cast<Eigen::Index>(c)) = g.transpose();
  return dense;
}

void GradTable::apply_descent(NGramPolicy& policy, double step) const {
  if (policy.num_contexts() != num_contexts_ || policy.vocab_size() != vocab_size_) {
    throw Error("gradient table does not match policy shape");
  }
  for (const auto& [c, g] : rows_) {
    policy.logits().row(static_cast<Eigen::Index>(c)) -= step * g.transpose();
  }
}

GradTable operator-(const GradTable& g) { return -1.0 * g; }

GradTable operator*(double s, GradTable g) {
  g *= s;
  return g;
}

Eigen::VectorXd forward_kl_logit_grad(const TokenDist& student, const TokenDist& teacher,
                                      double temperature) {
  if (student.size() != teacher.size()) throw Error("distributions over different vocabularies");
  return (student.probs() - teacher.probs()) / temperature;
}

Eigen::VectorXd reverse_kl_logit_grad(const TokenDist& student, const TokenDist& teacher,
                                      double temperature) {
  if (student.size() != teacher.size()) throw Error("distributions over different vocabularies");
  const int v = student.size();
  Eigen::VectorXd advantage = Eigen::VectorXd::Zero(v);
  double mean = 0.0;
  for (int y = 0; y < v; ++y) {
    const double q = student[y];
    if (q == 0.0) continue;
    if (teacher[y] == 0.0) {
      throw InfiniteDivergence("reverse KL gradient undefined: teacher is 0 at token " +
                               std::to_string(y));
    }
    advantage[y] = std::log(q) - std::log(teacher[y]);
    mean += q * advantage[y];
  }
  // The "+1" from differentiating q log q multiplies sum_y grad q(y) = 0 and is dropped.
  return (student.probs().array() * (advantage.array() - mean)).matrix() / temperature;
}

Eigen::VectorXd mixed_kl_logit_grad(const TokenDist& student, const TokenDist& teacher,
                                    double temperature, MixWeight lambda) {
  const double l = lambda.value();
  if (l == 0.0) return forward_kl_logit_grad(student, teacher, temperature);
  if (l == 1.0) return reverse_kl_logit_grad(student, teacher, temperature);
  return l * reverse_kl_logit_grad(student, teacher, temperature) +
         (1.0 - l) * forward_kl_logit_grad(student, teacher, temperature);
}

namespace {

template <typename RowFn>
GradTable single_row(const NGramPolicy& student, const Prefix& prefix, RowFn&& fn) {
  const std::size_t ctx = student.context_index(prefix);
  GradTable g = GradTable::like(student);
  g.add_row(ctx, fn(student.dist(ctx)));
  return g;
}

}  // namespace

GradTable grad_forward_kl(const NGramPolicy& student, const TokenDist& teacher_dist,
                          const Prefix& prefix) {
  return single_row(student, prefix, [&](const TokenDist& q) {
    return forward_kl_logit_grad(q, teacher_dist, student.temperature());
  });
}

GradTable grad_reverse_kl(const NGramPolicy& student, const TokenDist& teacher_dist,
                          const Prefix& prefix) {
  return single_row(student, prefix, [&](const TokenDist& q) {
    return reverse_kl_logit_grad(q, teacher_dist, student.temperature());
  });
}

GradTable grad_mixed_kl(const NGramPolicy& student, const TokenDist& teacher_dist,
                        const Prefix& prefix, MixWeight lambda) {
  return single_row(student, prefix, [&](const TokenDist& q) {
    return mixed_kl_logit_grad(q, teacher_dist, student.temperature(), lambda);
  });
}

GradTable reinforce_grad_estimate(const NGramPolicy& student, const TokenDist& teacher_dist,
                                  const Prefix& prefix, const ReinforceConfig& cfg) {
  if (cfg.n_samples < 1) throw Error("REINFORCE needs n_samples >= 1");
  const std::size_t ctx = student.context_index(prefix);
  const TokenDist q = student.dist(ctx);
  const double inv_t = 1.0 / student.temperature();
  const int v = q.size();

  // grad_z log q(y) = (e_y - q) / T.
  auto score = [&](Token y) {
    Eigen::VectorXd s = -q.probs() * inv_t;
    s[y] += inv_t;
    return s;
  };

  Eigen::VectorXd acc = Eigen::VectorXd::Zero(v);
  if (cfg.enumerate) {
    double baseline = 0.0;
    if (cfg.baseline == Baseline::MeanReward) {
      for (Token y = 0; y < v; ++y) {
        if (q[y] > 0.0) baseline += q[y] * log_ratio_reward(teacher_dist, q, y);
      }
    }
    for (Token y = 0; y < v; ++y) {
      if (q[y] == 0.0) continue;
      acc += q[y] * (log_ratio_reward(teacher_dist, q, y) - baseline) * score(y);
    }
  } else {
    Rng rng(cfg.seed);
    const auto n = static_cast<std::size_t>(cfg.n_samples);
    std::vector<Token> ys(n);
    std::vector<double> rewards(n);
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      ys[i] = sample(q, rng);
      rewards[i] = log_ratio_reward(teacher_dist, q, ys[i]);
      total += rewards[i];
    }
    for (std::size_t i = 0; i < n; ++i) {
      double baseline = 0.0;
      if (cfg.baseline == Baseline::MeanReward && n > 1) {
        baseline = (total - rewards[i]) / static_cast<double>(n - 1);
      }
      acc += (rewards[i] - baseline) * score(ys[i]);
    }
    acc /= static_cast<double>(n);
  }
  GradTable g = GradTable::like(student);
  g.add_row(ctx, acc);
  return g;
}

GradTable finite_diff_grad(const PolicyLoss& loss, const NGramPolicy& student, double h,
                           std::optional<std::vector<std::size_t>> contexts) {
  if (!(h > 0.0)) throw Error("finite-difference step must be positive");
  std::vector<std::size_t> rows;
  if (contexts) {
    rows = *contexts;
  } else {
    rows.resize(student.num_contexts());
    for (std::size_t c = 0; c < rows.size(); ++c) rows[c] = c;
  }
  NGramPolicy probe = student;
  GradTable g = GradTable::like(student);
  auto eval = [&]() {
    const double l = loss(probe);
    if (!std::isfinite(l)) throw Error("finite differences: loss is not finite");
    return l;
  };
  for (std::size_t c : rows) {
    Eigen::VectorXd row = Eigen::VectorXd::Zero(student.vocab_size());
    for (int y = 0; y < student.vocab_size(); ++y) {
      double& theta = probe.logits()(static_cast<Eigen::Index>(c), y);
      const double saved = theta;
      theta = saved + h;
      const double up = eval();
      theta = saved - h;
      const double down = eval();
      theta = saved;
      row[y] = (up - down) / (2.0 * h);
    }
    if (!contexts && row.isZero(0.0)) continue;
    g.add_row(c, row);
  }
  return g;
}

}  // namespace kdlab
