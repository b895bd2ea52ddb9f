#include "kdlab/verify.hpp"

#include "kdlab/fused_kl.hpp"
#include "kdlab/grad_engine.hpp"
#include "kdlab/reference.hpp"
#include "kdlab/seq_kl.hpp"

#include <cmath>
#include <cstdio>
#include <ostream>
#include <string>

namespace kdlab {

namespace {

class Report {
 public:
  explicit Report(std::ostream& out) : out_(out) {}

  void line(const std::string& name, bool pass, const std::string& detail) {
    char buf[256];
    std::snprintf(buf, sizeof buf, "%-4s %-34s %s", pass ? "PASS" : "FAIL", name.c_str(),
                  detail.c_str());
    out_ << buf << '\n';
    ok_ = ok_ && pass;
  }
  bool ok() const { return ok_; }

 private:
  std::ostream& out_;
  bool ok_ = true;
};

std::string fmt(const char* f, double a, double b = 0, double c = 0) {
  char buf[160];
  std::snprintf(buf, sizeof buf, f, a, b, c);
  return buf;
}

TokenDist random_dist(int v, Rng& rng, double scale = 1.5) {
  Eigen::VectorXd z(v);
  for (int i = 0; i < v; ++i) z[i] = scale * rng.normal();
  return TokenDist::from_logits(z);
}

double rel_err(const Eigen::VectorXd& a, const Eigen::VectorXd& b) {
  return (a - b).norm() / std::max(1e-300, std::max(a.norm(), b.norm()));
}

}  // namespace

bool run_verification(std::ostream& out, std::uint64_t seed) {
  Report report(out);
  Rng rng(seed);

  // Sequence KL equals the sum of expected token KLs under the matching prefix distribution.
  for (KLDirection dir : {KLDirection::Forward, KLDirection::Reverse}) {
    double worst = 0.0;
    double lhs = 0.0;
    double rhs = 0.0;
    for (int i = 0; i < 10; ++i) {
      Rng inst = rng.split(1, static_cast<std::uint64_t>(i));
      const int v = 2 + i % 2;
      const Vocabulary vocab{v, std::nullopt};
      const NGramPolicy teacher = NGramPolicy::random(vocab, 1, 1.0, inst);
      const NGramPolicy student = NGramPolicy::random(vocab, 1, 1.0, inst);
      const EnumerationSpec spec{vocab, 1 + i % 5, {0}, 1e6};
      const DecompositionResult r = decomposition_check(dir, teacher, student, spec);
      if (r.gap >= worst) {
        worst = r.gap;
        lhs = r.lhs;
        rhs = r.rhs;
      }
    }
    report.line(std::string("decomposition ") + to_string(dir), worst <= 1e-10,
                fmt("lhs=%.12e rhs=%.12e gap=%.3e", lhs, rhs, worst));
  }

  // Token-level gradient identities and finite differences.
  {
    double worst_identity = 0.0;
    double worst_fd = 0.0;
    for (int i = 0; i < 20; ++i) {
      Rng inst = rng.split(2, static_cast<std::uint64_t>(i));
      const int v = 2 + static_cast<int>(inst.below(15));
      const Vocabulary vocab{v, std::nullopt};
      const NGramPolicy student = NGramPolicy::random(vocab, 1, 1.0, inst);
      const TokenDist p = random_dist(v, inst);
      const Prefix prefix{{static_cast<Token>(inst.below(static_cast<std::size_t>(v)))}, {}};
      const std::size_t ctx = student.context_index(prefix);
      const TokenDist q = student.dist(ctx);
      const double t = student.temperature();

      const Eigen::VectorXd gf = grad_forward_kl(student, p, prefix).row(ctx);
      const Eigen::VectorXd gr = grad_reverse_kl(student, p, prefix).row(ctx);
      worst_identity = std::max(
          {worst_identity, rel_err(gf, reference::forward_kl_grad_expectation(q, p, t)),
           rel_err(gr, reference::reverse_kl_grad_score_sum(q, p, t))});

      const auto fd = [&](KLDirection dir) {
        return finite_diff_grad(
                   [&](const NGramPolicy& s) { return token_kl(dir, p, token_dist(s, prefix)); },
                   student, 1e-5, std::vector<std::size_t>{ctx})
            .row(ctx);
      };
      worst_fd = std::max({worst_fd, rel_err(gf, fd(KLDirection::Forward)),
                           rel_err(gr, fd(KLDirection::Reverse))});
    }
    report.line("gradient identities", worst_identity <= 1e-12,
                fmt("max_rel_err=%.3e", worst_identity));
    report.line("gradient finite differences", worst_fd <= 1e-5, fmt("max_rel_err=%.3e", worst_fd));
  }

  // Estimators: k1 and k3 are unbiased for KL(q || p); k3 is non-negative per sample.
  {
    double worst_bias = 0.0;
    double min_k3 = 0.0;
    for (int i = 0; i < 50; ++i) {
      Rng inst = rng.split(3, static_cast<std::uint64_t>(i));
      const int v = 2 + static_cast<int>(inst.below(31));
      const TokenDist p = random_dist(v, inst);
      const TokenDist q = random_dist(v, inst);
      const double kl = reverse_kl(q, p);
      worst_bias = std::max({worst_bias,
                             std::abs(estimator_expectation(EstimatorKind::K1, p, q) - kl),
                             std::abs(estimator_expectation(EstimatorKind::K3, p, q) - kl)});
      for (Token y = 0; y < v; ++y) {
        min_k3 = std::min(min_k3, estimator_sample(EstimatorKind::K3, p, q, y));
      }
    }
    report.line("estimators k1/k3 unbiased", worst_bias <= 1e-12, fmt("max_abs_err=%.3e", worst_bias));
    report.line("estimator k3 non-negative", min_k3 >= 0.0, fmt("min_k3=%.3e", min_k3));
  }

  // Fused streaming KL against the dense reference.
  {
    double worst = 0.0;
    for (Eigen::Index v : {64, 1000}) {
      const Eigen::Index h = 8;
      Rng inst = rng.split(4, static_cast<std::uint64_t>(v));
      HeadWeights<double> wt(v, h);
      HeadWeights<double> ws(v, h);
      Eigen::VectorXd ht(h);
      Eigen::VectorXd hs(h);
      for (Eigen::Index i = 0; i < wt.size(); ++i) {
        wt.data()[i] = inst.normal();
        ws.data()[i] = inst.normal();
      }
      for (Eigen::Index i = 0; i < h; ++i) {
        ht[i] = inst.normal();
        hs[i] = inst.normal();
      }
      for (KLDirection dir : {KLDirection::Forward, KLDirection::Reverse}) {
        const double dense = reference::dense_token_kl(dir, wt, ws, ht, hs);
        for (Eigen::Index tile : {Eigen::Index{1}, Eigen::Index{7}, v}) {
          const double fused = fused_token_kl(dir, wt, ws, ht, hs, TileConfig{tile});
          worst = std::max(worst, std::abs(fused - dense) / std::abs(dense));
        }
      }
    }
    report.line("fused kernel vs dense", worst <= 1e-9, fmt("max_rel_err=%.3e", worst));
  }

  out << (report.ok() ? "all checks passed" : "some checks FAILED") << '\n';
  return report.ok();
}

}  // namespace kdlab
