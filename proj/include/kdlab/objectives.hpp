#pragma once

// The decoupled distillation objectives as executable training steps: prefixes
// come from the teacher (cached rollouts) or from fresh student rollouts, and
// every visited state is supervised with the lambda-mixed token-level KL.

#include "kdlab/core_policy.hpp"
#include "kdlab/curriculum.hpp"
#include "kdlab/grad_engine.hpp"
#include "kdlab/kl_token.hpp"
#include "kdlab/seq_kl.hpp"

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <vector>

namespace kdlab {

struct ObjectiveSpec {
  PrefixSource source = PrefixSource::Teacher;
  // 1 is pure reverse KL, 0 pure forward KL.
  MixWeight lambda{};
  // Maximum number of supervised response positions per sequence.
  int horizon = 16;
  // Supervise with a point mass on the cached teacher token (SFT). Forward only.
  bool hard_label = false;

  void validate() const;
};

struct TeacherCache {
  // rollouts[i] answers prompts[i] of the prompt set the cache was built from.
  std::vector<Rollout> rollouts;
  // cached_dists[i][t] = token_dist(teacher, (prompt_i, response_i[:t])).
  std::optional<std::vector<std::vector<TokenDist>>> cached_dists;
};

// Rollout i is drawn with seed derive_seed(sampler.seed, i). Cached
// distributions are re-checked against the live teacher on a subset.
TeacherCache build_teacher_cache(const NGramPolicy& teacher, std::span<const Sequence> prompts,
                                 const SamplerConfig& sampler, int horizon, bool with_dists);

struct DistillData {
  std::span<const Sequence> prompts;
  // Live teacher; required for student prefixes and for a cache without dists.
  const NGramPolicy* teacher = nullptr;
  // Required for teacher prefixes; aligned with prompts.
  const TeacherCache* cache = nullptr;
};

struct DistillStepReport {
  double mean_loss = 0.0;
  std::int64_t tokens_supervised = 0;
  double grad_norm = 0.0;
  // Longest supervised response position (1-based); 0 when nothing was supervised.
  int max_position = 0;
};

struct DistillGradient {
  GradTable grad;
  DistillStepReport report;
};

// Mean over supervised tokens of the mixed-KL loss and its logit gradient for
// the prompts batch[j]. Student rollout j uses seed derive_seed(sampler.seed, j).
DistillGradient distill_gradient(const ObjectiveSpec& spec, const NGramPolicy& student,
                                 const DistillData& data, std::span<const std::size_t> batch,
                                 const SamplerConfig& student_sampler);

// distill_gradient followed by one descent step of size learning_rate.
DistillStepReport distill_step(const ObjectiveSpec& spec, NGramPolicy& student,
                               const DistillData& data, std::span<const std::size_t> batch,
                               double learning_rate, const SamplerConfig& student_sampler);

struct DynamicsRecord {
  std::int64_t step = 0;
  double accuracy = 0.0;
  double mean_entropy = 0.0;
  double mean_len = 0.0;
  // Distillation loss for distillation runs, mean reward for GRPO.
  double signal = 0.0;

  friend bool operator==(const DynamicsRecord&, const DynamicsRecord&) = default;
};

struct RolloutStats {
  double mean_entropy = 0.0;
  double mean_len = 0.0;
};

// Per-token mean entropy (same seeding as mean_rollout_entropy) and mean
// response length.
RolloutStats rollout_stats(const NGramPolicy& policy, std::span<const Sequence> prompts,
                           const SamplerConfig& sampler, int n_rollouts, int max_len);

// Learning rate used at full model scale; tabular runs default to 0.1.
inline constexpr double kReferenceLearningRate = 5e-7;

struct TrainConfig {
  int steps = 200;
  int batch = 32;
  double lr = 0.1;
  std::uint64_t seed = 42;
  int eval_every = 20;
  SamplerConfig teacher_sampler = SamplerConfig::teacher_rollout_defaults();
  SamplerConfig student_sampler{};
  SamplerConfig eval_sampler{};
  int eval_rollouts = 1;
  // Response length for evaluation rollouts; 0 means the objective's horizon.
  int eval_max_len = 0;
  std::optional<CurriculumConfig> curriculum;
  // Held-out prompts for the entropy gate and the dynamics diagnostics; the
  // training prompts are used when empty.
  std::vector<Sequence> held_out_prompts;

  void validate() const;
};

using AccuracyFn = std::function<double(const NGramPolicy&)>;

struct TrainResult {
  std::vector<DynamicsRecord> records;
  std::vector<CurriculumTraceEntry> curriculum_trace;
  // Horizon in force and longest supervised position, per executed step.
  std::vector<int> step_horizons;
  std::vector<int> step_max_positions;
  std::vector<DistillStepReport> step_reports;
};

// Runs distill_step for cfg.steps steps (fewer if the curriculum terminates).
// Teacher-prefix runs build one teacher cache up front and shuffle it every
// epoch with the run seed; student-prefix runs draw fresh rollouts every step.
TrainResult train(const ObjectiveSpec& spec, NGramPolicy& student, const NGramPolicy& teacher,
                  std::span<const Sequence> prompts, const TrainConfig& cfg,
                  const AccuracyFn& accuracy = {});

// Epoch-shuffled minibatches over [0, n).
class BatchSampler {
 public:
  BatchSampler(std::size_t n, std::size_t batch, std::uint64_t seed);
  std::vector<std::size_t> next();

 private:
  void reshuffle();

  std::size_t n_;
  std::size_t batch_;
  std::uint64_t seed_;
  std::uint64_t epoch_ = 0;
  std::size_t cursor_ = 0;
  std::vector<std::size_t> order_;
};

}  // namespace kdlab
