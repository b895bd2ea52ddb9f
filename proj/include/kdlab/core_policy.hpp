#pragma once

// Vocabularies, tabular n-gram softmax policies, sampling and rollouts.

#include "kdlab/error.hpp"
#include "kdlab/math.hpp"
#include "kdlab/rng.hpp"

#include <Eigen/Dense>

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace kdlab {

using Token = std::int32_t;
using Sequence = std::vector<Token>;

struct Vocabulary {
  int size = 2;
  // Without an eos token rollouts always run to max_len (fixed-length mode).
  std::optional<Token> eos;

  void validate() const;
  void check_token(Token t) const;
};

// Exact probability vector over a vocabulary.
class TokenDist {
 public:
  TokenDist() = default;
  // Validates non-negativity and normalisation (|sum - 1| <= 1e-12).
  explicit TokenDist(Eigen::VectorXd probs);

  static TokenDist from_logits(const Eigen::Ref<const Eigen::VectorXd>& logits,
                               double temperature = 1.0);
  static TokenDist uniform(int size);
  static TokenDist point_mass(int size, Token y);

  int size() const { return static_cast<int>(probs_.size()); }
  double operator[](Token y) const { return probs_[y]; }
  const Eigen::VectorXd& probs() const { return probs_; }

  friend bool operator==(const TokenDist& a, const TokenDist& b) {
    return a.probs_.size() == b.probs_.size() && a.probs_ == b.probs_;
  }

 private:
  Eigen::VectorXd probs_;
};

// Entropy in nats with 0 log 0 = 0.
double entropy(const TokenDist& dist);

// Prompt plus generated tokens; s_t = (x, y_<t).
struct Prefix {
  Sequence prompt;
  Sequence generated;

  std::size_t length() const { return prompt.size() + generated.size(); }
  Token at(std::size_t i) const {
    return i < prompt.size() ? prompt[i] : generated[i - prompt.size()];
  }
};

// Tabular softmax policy over order-k contexts. Row c of the logit table holds
// the logits for the context whose last k tokens encode c in base V (oldest
// token most significant). Contexts shorter than k are left-padded with pad().
class NGramPolicy {
 public:
  using LogitTable = RowMatrix<double>;

  NGramPolicy(Vocabulary vocab, int order, double temperature = 1.0, Token pad = 0);

  // Logits drawn i.i.d. N(0, scale^2).
  static NGramPolicy random(Vocabulary vocab, int order, double scale, Rng& rng,
                            double temperature = 1.0);

  const Vocabulary& vocab() const { return vocab_; }
  int vocab_size() const { return vocab_.size; }
  int order() const { return order_; }
  double temperature() const { return temperature_; }
  Token pad() const { return pad_; }
  std::size_t num_contexts() const { return static_cast<std::size_t>(logits_.rows()); }
  std::size_t num_parameters() const { return static_cast<std::size_t>(logits_.size()); }

  LogitTable& logits() { return logits_; }
  const LogitTable& logits() const { return logits_; }

  // Context row for the last k tokens of a history (prompt followed by generated tokens).
  std::size_t context_index(std::span<const Token> history) const;
  std::size_t context_index(const Prefix& prefix) const;

  TokenDist dist(std::size_t context) const;

 private:
  Vocabulary vocab_;
  int order_;
  double temperature_;
  Token pad_;
  LogitTable logits_;
};

TokenDist token_dist(const NGramPolicy& policy, const Prefix& prefix);

struct SamplerConfig {
  double temperature = 1.0;
  double top_p = 1.0;
  // 0 keeps the full vocabulary.
  int top_k = 0;
  std::uint64_t seed = 0;

  void validate() const;

  // temperature 1.0, top-p 0.95, top-k 20.
  static SamplerConfig teacher_rollout_defaults(std::uint64_t seed = 0);
};

// Sampling distribution after temperature, top-k and top-p truncation, renormalised.
TokenDist truncate(const TokenDist& dist, const SamplerConfig& sampler);

// Inverse-CDF draw.
Token sample(const TokenDist& dist, Rng& rng);

struct Rollout {
  Sequence prompt;
  Sequence response;
  // Entropy of the untruncated policy distribution at each generated position.
  std::vector<double> per_token_entropy;
  bool terminated_by_eos = false;

  friend bool operator==(const Rollout&, const Rollout&) = default;
};

// Samples until eos (when the vocabulary has one) or max_len tokens.
Rollout rollout(const NGramPolicy& policy, const Sequence& prompt, int max_len,
                const SamplerConfig& sampler, Rng& rng);
Rollout rollout(const NGramPolicy& policy, const Sequence& prompt, int max_len,
                const SamplerConfig& sampler);

// Per-token mean of rollout entropies over all generated tokens. Rollout j of
// prompt i uses the child seed derive_seed(sampler.seed, i, j).
double mean_rollout_entropy(const NGramPolicy& policy, std::span<const Sequence> prompts,
                            const SamplerConfig& sampler, int n_rollouts, int max_len);

// Versioned text table; doubles are written with 17 significant digits so the
// round trip is exact.
void save_policy(const NGramPolicy& policy, std::ostream& out);
NGramPolicy load_policy(std::istream& in);
void save_policy(const NGramPolicy& policy, const std::string& path);
NGramPolicy load_policy(const std::string& path);

}  // namespace kdlab
