#include "kdlab/core_policy.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <istream>
#include <numeric>
#include <ostream>
#include <sstream>

namespace kdlab {

void Vocabulary::validate() const {
  if (size < 2) throw Error("vocabulary size must be >= 2, got " + std::to_string(size));
  if (eos && (*eos < 0 || *eos >= size)) {
    throw InvalidToken("eos id " + std::to_string(*eos) + " outside vocabulary of size " +
                       std::to_string(size));
  }
}

void Vocabulary::check_token(Token t) const {
  if (t < 0 || t >= size) {
    throw InvalidToken("token id " + std::to_string(t) + " outside vocabulary of size " +
                       std::to_string(size));
  }
}

TokenDist::TokenDist(Eigen::VectorXd probs) : probs_(std::move(probs)) {
  if (probs_.size() < 1) throw Error("empty distribution");
  for (Eigen::Index i = 0; i < probs_.size(); ++i) {
    if (!(probs_[i] >= 0.0) || !std::isfinite(probs_[i])) {
      throw Error("distribution entry " + std::to_string(i) + " is negative or non-finite");
    }
  }
  if (std::abs(probs_.sum() - 1.0) > 1e-12) {
    std::ostringstream msg;
    msg << std::setprecision(17) << "distribution sums to " << probs_.sum();
    throw Error(msg.str());
  }
}

TokenDist TokenDist::from_logits(const Eigen::Ref<const Eigen::VectorXd>& logits,
                                 double temperature) {
  if (!(temperature > 0.0)) throw Error("temperature must be positive");
  if (!logits.allFinite()) throw Error("non-finite logits");
  return TokenDist(softmax(logits, temperature));
}

TokenDist TokenDist::uniform(int size) {
  return TokenDist(Eigen::VectorXd::Constant(size, 1.0 / size));
}

TokenDist TokenDist::point_mass(int size, Token y) {
  if (y < 0 || y >= size) throw InvalidToken("point mass outside vocabulary");
  Eigen::VectorXd p = Eigen::VectorXd::Zero(size);
  p[y] = 1.0;
  return TokenDist(std::move(p));
}

double entropy(const TokenDist& dist) {
  double h = 0.0;
  for (int y = 0; y < dist.size(); ++y) {
    const double p = dist[y];
    if (p > 0.0) h -= p * std::log(p);
  }
  return h;
}

NGramPolicy::NGramPolicy(Vocabulary vocab, int order, double temperature, Token pad)
    : vocab_(std::move(vocab)), order_(order), temperature_(temperature), pad_(pad) {
  vocab_.validate();
  if (order_ < 0) throw Error("n-gram order must be >= 0");
  if (!(temperature_ > 0.0)) throw Error("temperature must be positive");
  vocab_.check_token(pad_);
  double rows = std::pow(static_cast<double>(vocab_.size), order_);
  if (rows * vocab_.size > 1e8) throw Error("logit table too large");
  logits_ = LogitTable::Zero(static_cast<Eigen::Index>(rows), vocab_.size);
}

NGramPolicy NGramPolicy::random(Vocabulary vocab, int order, double scale, Rng& rng,
                                double temperature) {
  NGramPolicy policy(std::move(vocab), order, temperature);
  for (Eigen::Index r = 0; r < policy.logits_.rows(); ++r) {
    for (Eigen::Index c = 0; c < policy.logits_.cols(); ++c) {
      policy.logits_(r, c) = scale * rng.normal();
    }
  }
  return policy;
}

std::size_t NGramPolicy::context_index(std::span<const Token> history) const {
  std::size_t index = 0;
  const auto n = static_cast<std::ptrdiff_t>(history.size());
  for (std::ptrdiff_t i = n - order_; i < n; ++i) {
    Token t = pad_;
    if (i >= 0) {
      t = history[static_cast<std::size_t>(i)];
      vocab_.check_token(t);
    }
    index = index * static_cast<std::size_t>(vocab_.size) + static_cast<std::size_t>(t);
  }
  return index;
}

std::size_t NGramPolicy::context_index(const Prefix& prefix) const {
  for (Token t : prefix.prompt) vocab_.check_token(t);
  for (Token t : prefix.generated) vocab_.check_token(t);
  std::size_t index = 0;
  const auto n = static_cast<std::ptrdiff_t>(prefix.length());
  for (std::ptrdiff_t i = n - order_; i < n; ++i) {
    const Token t = i >= 0 ? prefix.at(static_cast<std::size_t>(i)) : pad_;
    index = index * static_cast<std::size_t>(vocab_.size) + static_cast<std::size_t>(t);
  }
  return index;
}

TokenDist NGramPolicy::dist(std::size_t context) const {
  return TokenDist::from_logits(logits_.row(static_cast<Eigen::Index>(context)).transpose(),
                                temperature_);
}

TokenDist token_dist(const NGramPolicy& policy, const Prefix& prefix) {
  return policy.dist(policy.context_index(prefix));
}

void SamplerConfig::validate() const {
  if (!(temperature > 0.0)) throw Error("sampler temperature must be positive");
  if (!(top_p > 0.0 && top_p <= 1.0)) throw Error("top_p must be in (0, 1]");
  if (top_k < 0) throw Error("top_k must be positive or 0 for the full vocabulary");
}

SamplerConfig SamplerConfig::teacher_rollout_defaults(std::uint64_t seed) {
  return SamplerConfig{1.0, 0.95, 20, seed};
}

TokenDist truncate(const TokenDist& dist, const SamplerConfig& sampler) {
  sampler.validate();
  const int v = dist.size();
  Eigen::VectorXd p = dist.probs();
  if (sampler.temperature != 1.0) {
    // p^(1/tau) renormalised, done in log space.
    Eigen::VectorXd logp(v);
    for (int i = 0; i < v; ++i) {
      logp[i] = p[i] > 0.0 ? std::log(p[i]) / sampler.temperature
                           : -std::numeric_limits<double>::infinity();
    }
    const double m = logp.maxCoeff();
    for (int i = 0; i < v; ++i) p[i] = std::exp(logp[i] - m);
    p /= p.sum();
  }

  const bool use_k = sampler.top_k > 0 && sampler.top_k < v;
  const bool use_p = sampler.top_p < 1.0;
  if (use_k || use_p) {
    std::vector<int> order(static_cast<std::size_t>(v));
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return p[a] > p[b]; });
    std::size_t keep = use_k ? static_cast<std::size_t>(sampler.top_k) : order.size();
    if (use_p) {
      double mass = 0.0;
      std::size_t n = 0;
      while (n < keep) {
        mass += p[order[n]];
        ++n;
        if (mass >= sampler.top_p) break;
      }
      keep = n;
    }
    Eigen::VectorXd kept = Eigen::VectorXd::Zero(v);
    for (std::size_t i = 0; i < keep; ++i) kept[order[i]] = p[order[i]];
    p = kept;
  }
  p /= p.sum();
  return TokenDist(std::move(p));
}

Token sample(const TokenDist& dist, Rng& rng) {
  const double u = rng.uniform();
  double cdf = 0.0;
  Token last_positive = 0;
  for (int y = 0; y < dist.size(); ++y) {
    if (dist[y] <= 0.0) continue;
    cdf += dist[y];
    last_positive = y;
    if (u < cdf) return y;
  }
  return last_positive;
}

Rollout rollout(const NGramPolicy& policy, const Sequence& prompt, int max_len,
                const SamplerConfig& sampler, Rng& rng) {
  if (max_len < 1) throw Error("max_len must be >= 1");
  sampler.validate();
  Rollout out;
  out.prompt = prompt;
  Sequence history = prompt;
  for (Token t : history) policy.vocab().check_token(t);
  const auto& eos = policy.vocab().eos;
  for (int step = 0; step < max_len; ++step) {
    const TokenDist dist = policy.dist(policy.context_index(history));
    out.per_token_entropy.push_back(entropy(dist));
    const Token y = sample(truncate(dist, sampler), rng);
    out.response.push_back(y);
    history.push_back(y);
    if (eos && y == *eos) {
      out.terminated_by_eos = true;
      break;
    }
  }
  return out;
}

Rollout rollout(const NGramPolicy& policy, const Sequence& prompt, int max_len,
                const SamplerConfig& sampler) {
  Rng rng(sampler.seed);
  return rollout(policy, prompt, max_len, sampler, rng);
}

double mean_rollout_entropy(const NGramPolicy& policy, std::span<const Sequence> prompts,
                            const SamplerConfig& sampler, int n_rollouts, int max_len) {
  if (prompts.empty()) throw Error("mean_rollout_entropy: empty prompt set");
  if (n_rollouts < 1) throw Error("mean_rollout_entropy: n_rollouts must be >= 1");
  double total = 0.0;
  std::size_t tokens = 0;
  for (std::size_t i = 0; i < prompts.size(); ++i) {
    for (int j = 0; j < n_rollouts; ++j) {
      Rng rng(derive_seed(sampler.seed, i, static_cast<std::uint64_t>(j)));
      const Rollout r = rollout(policy, prompts[i], max_len, sampler, rng);
      for (double h : r.per_token_entropy) total += h;
      tokens += r.per_token_entropy.size();
    }
  }
  return total / static_cast<double>(tokens);
}

namespace {
constexpr const char* kPolicyMagic = "kdlab-ngram-policy";
constexpr int kPolicyVersion = 1;

void expect_key(std::istream& in, const std::string& key) {
  std::string got;
  if (!(in >> got) || got != key) {
    throw Error("policy file: expected '" + key + "', got '" + got + "'");
  }
}
}  // namespace

void save_policy(const NGramPolicy& policy, std::ostream& out) {
  out << kPolicyMagic << ' ' << kPolicyVersion << '\n';
  out << "order " << policy.order() << '\n';
  out << "vocab " << policy.vocab_size() << '\n';
  out << "eos ";
  if (policy.vocab().eos) {
    out << *policy.vocab().eos;
  } else {
    out << "none";
  }
  out << '\n';
  out << "pad " << policy.pad() << '\n';
  out << std::setprecision(17);
  out << "temperature " << policy.temperature() << '\n';
  out << "logits " << policy.num_contexts() << ' ' << policy.vocab_size() << '\n';
  const auto& table = policy.logits();
  for (Eigen::Index r = 0; r < table.rows(); ++r) {
    for (Eigen::Index c = 0; c < table.cols(); ++c) {
      out << (c ? " " : "") << table(r, c);
    }
    out << '\n';
  }
}

NGramPolicy load_policy(std::istream& in) {
  expect_key(in, kPolicyMagic);
  int version = 0;
  in >> version;
  if (version != kPolicyVersion) {
    throw Error("policy file: unsupported version " + std::to_string(version));
  }
  int order = 0;
  int vocab_size = 0;
  std::string eos_text;
  Token pad = 0;
  double temperature = 1.0;
  expect_key(in, "order");
  in >> order;
  expect_key(in, "vocab");
  in >> vocab_size;
  expect_key(in, "eos");
  in >> eos_text;
  expect_key(in, "pad");
  in >> pad;
  expect_key(in, "temperature");
  in >> temperature;
  if (!in) throw Error("policy file: malformed header");

  Vocabulary vocab{vocab_size, std::nullopt};
  if (eos_text != "none") vocab.eos = static_cast<Token>(std::stoi(eos_text));
  NGramPolicy policy(vocab, order, temperature, pad);

  std::size_t rows = 0;
  int cols = 0;
  expect_key(in, "logits");
  in >> rows >> cols;
  if (rows != policy.num_contexts() || cols != vocab_size) {
    throw Error("policy file: logit table shape does not match order/vocab");
  }
  auto& table = policy.logits();
  for (Eigen::Index r = 0; r < table.rows(); ++r) {
    for (Eigen::Index c = 0; c < table.cols(); ++c) {
      // operator>> on double may reject subnormals; strtod does not.
      std::string word;
      if (!(in >> word)) throw Error("policy file: truncated logit table");
      table(r, c) = std::strtod(word.c_str(), nullptr);
    }
  }
  return policy;
}

void save_policy(const NGramPolicy& policy, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw Error("cannot open '" + path + "' for writing");
  save_policy(policy, out);
  if (!out) throw Error("write failed for '" + path + "'");
}

NGramPolicy load_policy(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open '" + path + "' for reading");
  return load_policy(in);
}

}  // namespace kdlab
