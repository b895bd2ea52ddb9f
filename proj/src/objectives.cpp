#include "kdlab/objectives.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace kdlab {

namespace {
// Stream ids for derive_seed within one training run.
enum : std::uint64_t {
  kTeacherCacheStream = 1,
  kBatchStream = 2,
  kStudentRolloutStream = 3,
  kEvalStream = 4,
};
}  // namespace

void ObjectiveSpec::validate() const {
  if (horizon < 1) throw Error("objective horizon must be >= 1");
  if (hard_label && lambda.value() != 0.0) {
    throw Error("hard-label distillation is forward-only (lambda must be 0)");
  }
  if (hard_label && source != PrefixSource::Teacher) {
    throw Error("hard-label distillation needs teacher-sampled tokens (teacher prefixes)");
  }
}

TeacherCache build_teacher_cache(const NGramPolicy& teacher, std::span<const Sequence> prompts,
                                 const SamplerConfig& sampler, int horizon, bool with_dists) {
  if (horizon < 1) throw Error("teacher cache horizon must be >= 1");
  TeacherCache cache;
  cache.rollouts.reserve(prompts.size());
  for (std::size_t i = 0; i < prompts.size(); ++i) {
    Rng rng(derive_seed(sampler.seed, i));
    cache.rollouts.push_back(rollout(teacher, prompts[i], horizon, sampler, rng));
  }
  if (!with_dists) return cache;

  auto& dists = cache.cached_dists.emplace();
  dists.reserve(cache.rollouts.size());
  for (const Rollout& r : cache.rollouts) {
    std::vector<TokenDist> row;
    row.reserve(r.response.size());
    Prefix prefix{r.prompt, {}};
    for (Token y : r.response) {
      row.push_back(token_dist(teacher, prefix));
      prefix.generated.push_back(y);
    }
    dists.push_back(std::move(row));
  }
  // Spot check: every 7th rollout against a fresh evaluation.
  for (std::size_t i = 0; i < cache.rollouts.size(); i += 7) {
    Prefix prefix{cache.rollouts[i].prompt, {}};
    for (std::size_t t = 0; t < dists[i].size(); ++t) {
      if (!(dists[i][t] == token_dist(teacher, prefix))) {
        throw Error("teacher cache disagrees with the live teacher");
      }
      prefix.generated.push_back(cache.rollouts[i].response[t]);
    }
  }
  return cache;
}

DistillGradient distill_gradient(const ObjectiveSpec& spec, const NGramPolicy& student,
                                 const DistillData& data, std::span<const std::size_t> batch,
                                 const SamplerConfig& student_sampler) {
  spec.validate();
  if (batch.empty()) throw Error("distillation batch is empty");
  if (spec.source == PrefixSource::Student && data.teacher == nullptr) {
    throw Error("student-prefix distillation needs a live teacher to score student-visited states");
  }
  if (spec.source == PrefixSource::Teacher && data.cache == nullptr) {
    throw Error("teacher-prefix distillation needs a teacher cache");
  }

  DistillGradient out{GradTable::like(student), {}};
  double loss_sum = 0.0;
  for (std::size_t j = 0; j < batch.size(); ++j) {
    const std::size_t idx = batch[j];
    if (idx >= data.prompts.size()) throw Error("batch index outside the prompt set");
    const Sequence& prompt = data.prompts[idx];

    Sequence response;
    const std::vector<TokenDist>* cached = nullptr;
    if (spec.source == PrefixSource::Teacher) {
      if (idx >= data.cache->rollouts.size()) throw Error("batch index outside the teacher cache");
      response = data.cache->rollouts[idx].response;
      if (data.cache->cached_dists) cached = &(*data.cache->cached_dists)[idx];
    } else {
      Rng rng(derive_seed(student_sampler.seed, j));
      response = rollout(student, prompt, spec.horizon, student_sampler, rng).response;
    }

    const std::size_t n = std::min(response.size(), static_cast<std::size_t>(spec.horizon));
    Sequence history = prompt;
    for (std::size_t t = 0; t < n; ++t) {
      const std::size_t ctx = student.context_index(history);
      const TokenDist q = student.dist(ctx);
      TokenDist p;
      if (spec.hard_label) {
        p = TokenDist::point_mass(student.vocab_size(), response[t]);
      } else if (cached != nullptr) {
        p = (*cached)[t];
      } else if (data.teacher != nullptr) {
        p = data.teacher->dist(data.teacher->context_index(history));
      } else {
        throw Error("no teacher distribution available: cache has no dists and no live teacher");
      }
      loss_sum += mixed_kl(p, q, spec.lambda);
      out.grad.add_row(ctx, mixed_kl_logit_grad(q, p, student.temperature(), spec.lambda));
      history.push_back(response[t]);
    }
    out.report.tokens_supervised += static_cast<std::int64_t>(n);
    out.report.max_position = std::max(out.report.max_position, static_cast<int>(n));
  }
  if (out.report.tokens_supervised > 0) {
    const double inv = 1.0 / static_cast<double>(out.report.tokens_supervised);
    out.grad *= inv;
    out.report.mean_loss = loss_sum * inv;
  }
  out.report.grad_norm = out.grad.norm();
  return out;
}

DistillStepReport distill_step(const ObjectiveSpec& spec, NGramPolicy& student,
                               const DistillData& data, std::span<const std::size_t> batch,
                               double learning_rate, const SamplerConfig& student_sampler) {
  if (!(learning_rate > 0.0)) throw Error("learning rate must be positive");
  DistillGradient g = distill_gradient(spec, student, data, batch, student_sampler);
  g.grad.apply_descent(student, learning_rate);
  return g.report;
}

RolloutStats rollout_stats(const NGramPolicy& policy, std::span<const Sequence> prompts,
                           const SamplerConfig& sampler, int n_rollouts, int max_len) {
  if (prompts.empty()) throw Error("rollout_stats: empty prompt set");
  if (n_rollouts < 1) throw Error("rollout_stats: n_rollouts must be >= 1");
  double entropy_sum = 0.0;
  std::size_t tokens = 0;
  std::size_t count = 0;
  for (std::size_t i = 0; i < prompts.size(); ++i) {
    for (int j = 0; j < n_rollouts; ++j) {
      Rng rng(derive_seed(sampler.seed, i, static_cast<std::uint64_t>(j)));
      const Rollout r = rollout(policy, prompts[i], max_len, sampler, rng);
      for (double h : r.per_token_entropy) entropy_sum += h;
      tokens += r.response.size();
      ++count;
    }
  }
  return {entropy_sum / static_cast<double>(tokens),
          static_cast<double>(tokens) / static_cast<double>(count)};
}

void TrainConfig::validate() const {
  if (steps < 1) throw Error("training needs steps >= 1");
  if (batch < 1) throw Error("batch size must be >= 1");
  if (!(lr > 0.0)) throw Error("learning rate must be positive");
  if (eval_every < 1) throw Error("eval_every must be >= 1");
  if (eval_rollouts < 1) throw Error("eval_rollouts must be >= 1");
  if (eval_max_len < 0) throw Error("eval_max_len must be >= 0");
  teacher_sampler.validate();
  student_sampler.validate();
  eval_sampler.validate();
  if (curriculum) curriculum->validate();
}

BatchSampler::BatchSampler(std::size_t n, std::size_t batch, std::uint64_t seed)
    : n_(n), batch_(batch), seed_(seed), order_(n) {
  if (n == 0) throw Error("cannot draw batches from an empty prompt set");
  if (batch == 0) throw Error("batch size must be >= 1");
  reshuffle();
}

void BatchSampler::reshuffle() {
  std::iota(order_.begin(), order_.end(), std::size_t{0});
  Rng rng(derive_seed(seed_, epoch_));
  // Fisher-Yates with the library's own uniform draw for cross-platform stability.
  for (std::size_t i = n_; i > 1; --i) std::swap(order_[i - 1], order_[rng.below(i)]);
  cursor_ = 0;
}

std::vector<std::size_t> BatchSampler::next() {
  std::vector<std::size_t> out;
  out.reserve(batch_);
  while (out.size() < batch_) {
    if (cursor_ == n_) {
      ++epoch_;
      reshuffle();
    }
    out.push_back(order_[cursor_++]);
  }
  return out;
}

TrainResult train(const ObjectiveSpec& spec, NGramPolicy& student, const NGramPolicy& teacher,
                  std::span<const Sequence> prompts, const TrainConfig& cfg,
                  const AccuracyFn& accuracy) {
  spec.validate();
  cfg.validate();
  if (prompts.empty()) throw Error("training needs at least one prompt");

  const int max_horizon = cfg.curriculum ? cfg.curriculum->horizons.back() : spec.horizon;
  std::optional<TeacherCache> cache;
  if (spec.source == PrefixSource::Teacher) {
    SamplerConfig ts = cfg.teacher_sampler;
    ts.seed = derive_seed(cfg.seed, kTeacherCacheStream);
    cache = build_teacher_cache(teacher, prompts, ts, max_horizon, true);
  }
  const DistillData data{prompts, &teacher, cache ? &*cache : nullptr};

  const std::vector<Sequence> eval_prompts =
      cfg.held_out_prompts.empty() ? std::vector<Sequence>(prompts.begin(), prompts.end())
                                   : cfg.held_out_prompts;
  SamplerConfig eval_sampler = cfg.eval_sampler;
  eval_sampler.seed = derive_seed(cfg.seed, kEvalStream);
  const int eval_len = cfg.eval_max_len > 0 ? cfg.eval_max_len : max_horizon;

  BatchSampler batches(prompts.size(), static_cast<std::size_t>(cfg.batch),
                       derive_seed(cfg.seed, kBatchStream));
  CurriculumState curriculum;
  TrainResult result;

  for (int step = 1; step <= cfg.steps; ++step) {
    ObjectiveSpec step_spec = spec;
    if (cfg.curriculum) step_spec.horizon = current_horizon(curriculum, *cfg.curriculum);

    SamplerConfig ss = cfg.student_sampler;
    ss.seed = derive_seed(cfg.seed, kStudentRolloutStream, static_cast<std::uint64_t>(step));
    const std::vector<std::size_t> batch = batches.next();
    const DistillStepReport report = distill_step(step_spec, student, data, batch, cfg.lr, ss);
    result.step_reports.push_back(report);
    result.step_horizons.push_back(step_spec.horizon);
    result.step_max_positions.push_back(report.max_position);

    if (step % cfg.eval_every == 0) {
      const RolloutStats stats =
          rollout_stats(student, eval_prompts, eval_sampler, cfg.eval_rollouts, eval_len);
      result.records.push_back({step, accuracy ? accuracy(student) : 0.0, stats.mean_entropy,
                                stats.mean_len, report.mean_loss});
    }

    if (cfg.curriculum && curriculum.status == CurriculumStatus::Running &&
        step % cfg.curriculum->check_interval == 0) {
      const int horizon = current_horizon(curriculum, *cfg.curriculum);
      const double h = mean_rollout_entropy(student, eval_prompts, eval_sampler,
                                            cfg.eval_rollouts, horizon);
      ObserveResult r = observe(curriculum, *cfg.curriculum, h, step);
      curriculum = std::move(r.state);
      result.curriculum_trace.push_back(
          {step, h, r.decision, current_horizon(curriculum, *cfg.curriculum), curriculum.status});
      if (curriculum.status == CurriculumStatus::Terminated) break;
    }
  }
  return result;
}

}  // namespace kdlab
