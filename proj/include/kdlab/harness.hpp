#pragma once

// Experiment orchestration: verifiable toy tasks, GRPO on outcome reward,
// distill-then-RL pipelines, record files and plot series.

#include "kdlab/core_policy.hpp"
#include "kdlab/curriculum.hpp"
#include "kdlab/grad_engine.hpp"
#include "kdlab/objectives.hpp"

#include <nlohmann/json.hpp>

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace kdlab {

enum class TaskKind { ModSum, Copy };

// Tokens [0, V-2) are digits, V-2 is the separator and V-1 is eos. A prompt is
// prompt_len random digits followed by the separator.
//   ModSum: the answer is (sum of digits) mod (V-2); the first response token is
//           the extracted answer.
//   Copy:   the answer is the digits in order; the first prompt_len response
//           tokens are the extracted answer.
struct ToyTask {
  TaskKind kind = TaskKind::ModSum;
  int vocab_size = 8;
  int prompt_len = 2;

  void validate() const;
  int num_digits() const { return vocab_size - 2; }
  Token separator() const { return vocab_size - 2; }
  Token eos() const { return vocab_size - 1; }
  Vocabulary vocab() const { return {vocab_size, eos()}; }
  // Context length that sees a whole prompt and the separator.
  int solving_order() const { return prompt_len + 1; }

  Sequence sample_prompt(Rng& rng) const;
  std::vector<Sequence> prompts(std::size_t n, std::uint64_t seed) const;
  Sequence answer(const Sequence& prompt) const;
  Sequence extract_answer(const Sequence& response) const;
  bool is_correct(const Sequence& prompt, const Sequence& response) const;
};

const char* to_string(TaskKind k);
TaskKind parse_task_kind(const std::string& s);

// Noisy task-solving teacher of order task.solving_order(): N(0, noise^2)
// logits with `sharpness` added to the correct next token (the next answer
// token, or eos once the answer is complete).
NGramPolicy make_task_teacher(const ToyTask& task, double sharpness, double noise,
                              std::uint64_t seed);

// Fraction of rollouts (one per prompt) whose extracted answer is correct.
// Prompts come from derive_seed(sampler.seed, 0) and rollout i uses
// derive_seed(sampler.seed, 1, i).
double accuracy_eval(const NGramPolicy& policy, const ToyTask& task, int n_prompts,
                     const SamplerConfig& sampler, int max_len);

struct GRPOConfig {
  int group_size = 8;
  int batch = 32;
  int steps = 200;
  double lr = 0.1;
  double temperature = 1.0;
  double top_p = 0.95;
  int max_len = 8;
  double advantage_epsilon = 1e-8;
  // Per-token mean of the score terms instead of the sequence sum.
  bool length_normalize = false;
  std::uint64_t seed = 42;
  int eval_every = 20;
  int eval_prompts = 256;

  void validate() const;
  // group size 8, batch 32, 1000 steps, temperature 1.0, top-p 0.95.
  static GRPOConfig reference_preset();
};

// (r - mean) / (std + eps) with the population std; all zeros when std == 0.
std::vector<double> group_advantages(std::span<const double> rewards, double eps);

struct GRPOBatch {
  std::vector<Rollout> rollouts;  // batch * group_size, group-major
  std::vector<double> rewards;
  std::vector<double> advantages;
  GradTable ascent;  // mean over rollouts of A_i * grad log q(rollout_i)
};

// Samples and scores one GRPO batch for `step` and forms the ascent direction.
GRPOBatch grpo_batch(const NGramPolicy& student, const ToyTask& task, const GRPOConfig& cfg,
                     std::int64_t step);

// One policy-gradient update. The record carries batch accuracy, mean
// per-token entropy, mean length and mean reward.
DynamicsRecord grpo_step(NGramPolicy& student, const ToyTask& task, const GRPOConfig& cfg,
                         std::int64_t step);

struct EvalConfig {
  int every = 20;
  int prompts = 256;
  int rollouts = 1;
  int max_len = 8;
  std::uint64_t seed = 4242;
};

// Evaluation record: accuracy on held-out prompts plus entropy and length.
DynamicsRecord evaluate(const NGramPolicy& policy, const ToyTask& task, const EvalConfig& eval,
                        std::int64_t step, double signal);

// Runs cfg.steps GRPO steps. Records a step-0 evaluation of the initial policy
// and one every cfg.eval_every steps.
std::vector<DynamicsRecord> run_grpo(NGramPolicy& student, const ToyTask& task,
                                     const GRPOConfig& cfg, const EvalConfig& eval);

// ---- configuration ----------------------------------------------------------

// Built-in defaults for every key.
nlohmann::json default_config();
// Named presets: "desk" (defaults), "reference-distill", "reference-grpo".
nlohmann::json preset_config(const std::string& name);
// Deep-merges `patch` into `base`.
void merge_config(nlohmann::json& base, const nlohmann::json& patch);
// Applies "dotted.key=value"; the value is parsed as JSON when possible and
// kept as a string otherwise. Unknown keys are rejected.
void apply_override(nlohmann::json& config, const std::string& assignment);
nlohmann::json load_config_file(const std::string& path);

// Environment variable naming the default output directory.
inline constexpr const char* kOutDirEnv = "KDLAB_OUT_DIR";
std::filesystem::path default_out_dir();

// ---- records ----------------------------------------------------------------

inline constexpr const char* kRecordHeader = "step,accuracy,entropy,length,reward";

void write_records(const std::vector<DynamicsRecord>& records, const std::filesystem::path& path);
std::vector<DynamicsRecord> read_records(const std::filesystem::path& path);

// One "step value" series per diagnostic (accuracy, entropy, length) named
// <run>_<diagnostic>.dat. Returns the paths written.
std::vector<std::filesystem::path> emit_plot_data(const std::vector<DynamicsRecord>& records,
                                                  const std::filesystem::path& out_dir,
                                                  const std::string& run);

// ---- pipeline ---------------------------------------------------------------

struct PipelineArtifacts {
  std::vector<DynamicsRecord> distill_records;
  std::vector<DynamicsRecord> grpo_records;  // empty when GRPO is disabled
  std::vector<CurriculumTraceEntry> curriculum_trace;
  std::vector<std::filesystem::path> files;
};

// Distillation (optionally curriculum-gated) from the task teacher, student
// checkpoint, then optionally GRPO from that checkpoint. Writes config.json,
// distill.csv, student.policy, grpo.csv, student_grpo.policy, curriculum.txt
// and plots/ under out_dir.
PipelineArtifacts run_pipeline(const nlohmann::json& config, const std::filesystem::path& out_dir);

}  // namespace kdlab
