#include "kdlab/harness.hpp"

#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <numeric>
#include <sstream>

namespace kdlab {

using nlohmann::json;
namespace fs = std::filesystem;

// ---- task -------------------------------------------------------------------

void ToyTask::validate() const {
  if (vocab_size < 4) throw Error("toy task needs V >= 4 (two digits, separator, eos)");
  if (prompt_len < 1) throw Error("toy task prompt_len must be >= 1");
}

const char* to_string(TaskKind k) { return k == TaskKind::ModSum ? "modsum" : "copy"; }

TaskKind parse_task_kind(const std::string& s) {
  if (s == "modsum") return TaskKind::ModSum;
  if (s == "copy") return TaskKind::Copy;
  throw Error("unknown task kind '" + s + "' (expected modsum or copy)");
}

Sequence ToyTask::sample_prompt(Rng& rng) const {
  Sequence p;
  p.reserve(static_cast<std::size_t>(prompt_len) + 1);
  for (int i = 0; i < prompt_len; ++i) {
    p.push_back(static_cast<Token>(rng.below(static_cast<std::size_t>(num_digits()))));
  }
  p.push_back(separator());
  return p;
}

std::vector<Sequence> ToyTask::prompts(std::size_t n, std::uint64_t seed) const {
  validate();
  Rng rng(seed);
  std::vector<Sequence> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) out.push_back(sample_prompt(rng));
  return out;
}

Sequence ToyTask::answer(const Sequence& prompt) const {
  if (static_cast<int>(prompt.size()) != prompt_len + 1 || prompt.back() != separator()) {
    throw Error("prompt does not match the task layout");
  }
  if (kind == TaskKind::ModSum) {
    int sum = 0;
    for (int i = 0; i < prompt_len; ++i) sum += prompt[static_cast<std::size_t>(i)];
    return {static_cast<Token>(sum % num_digits())};
  }
  return Sequence(prompt.begin(), prompt.begin() + prompt_len);
}

Sequence ToyTask::extract_answer(const Sequence& response) const {
  const std::size_t n =
      kind == TaskKind::ModSum ? 1 : static_cast<std::size_t>(prompt_len);
  return Sequence(response.begin(), response.begin() + static_cast<std::ptrdiff_t>(
                                                            std::min(n, response.size())));
}

bool ToyTask::is_correct(const Sequence& prompt, const Sequence& response) const {
  return extract_answer(response) == answer(prompt);
}

NGramPolicy make_task_teacher(const ToyTask& task, double sharpness, double noise,
                              std::uint64_t seed) {
  task.validate();
  Rng rng(seed);
  NGramPolicy teacher(task.vocab(), task.solving_order());
  const int k = teacher.order();
  const int v = task.vocab_size;
  const int digits = task.num_digits();
  auto is_digit = [&](Token t) { return t >= 0 && t < digits; };

  std::vector<Token> window(static_cast<std::size_t>(k));
  for (std::size_t ctx = 0; ctx < teacher.num_contexts(); ++ctx) {
    std::size_t rest = ctx;
    for (int i = k - 1; i >= 0; --i) {
      window[static_cast<std::size_t>(i)] = static_cast<Token>(rest % static_cast<std::size_t>(v));
      rest /= static_cast<std::size_t>(v);
    }
    int sep = -1;
    for (int i = 0; i < k; ++i) {
      if (window[static_cast<std::size_t>(i)] == task.separator()) sep = i;
    }
    Token target = task.eos();
    if (sep >= 0) {
      const int after = k - 1 - sep;  // response tokens already emitted
      bool prompt_digits = true;
      for (int i = 0; i < sep; ++i) prompt_digits &= is_digit(window[static_cast<std::size_t>(i)]);
      if (task.kind == TaskKind::ModSum) {
        if (after == 0 && prompt_digits) {
          int sum = 0;
          for (int i = 0; i < sep; ++i) sum += window[static_cast<std::size_t>(i)];
          target = static_cast<Token>(sum % digits);
        }
      } else if (after < task.prompt_len && prompt_digits && sep > 0) {
        target = window[0];
      }
    }
    auto row = teacher.logits().row(static_cast<Eigen::Index>(ctx));
    for (int y = 0; y < v; ++y) row[y] = noise * rng.normal();
    row[target] += sharpness;
  }
  return teacher;
}

double accuracy_eval(const NGramPolicy& policy, const ToyTask& task, int n_prompts,
                     const SamplerConfig& sampler, int max_len) {
  if (n_prompts < 1) throw Error("accuracy_eval needs n_prompts >= 1");
  const std::vector<Sequence> prompts =
      task.prompts(static_cast<std::size_t>(n_prompts), derive_seed(sampler.seed, ~0ULL, 1));
  int correct = 0;
  for (std::size_t i = 0; i < prompts.size(); ++i) {
    Rng rng(derive_seed(sampler.seed, i, 0));
    const Rollout r = rollout(policy, prompts[i], max_len, sampler, rng);
    correct += task.is_correct(prompts[i], r.response) ? 1 : 0;
  }
  return static_cast<double>(correct) / n_prompts;
}

// ---- GRPO -------------------------------------------------------------------

void GRPOConfig::validate() const {
  if (group_size < 2) throw Error("GRPO group size must be >= 2");
  if (batch < 1) throw Error("GRPO batch must be >= 1");
  if (steps < 0) throw Error("GRPO steps must be >= 0");
  if (!(lr > 0.0)) throw Error("GRPO learning rate must be positive");
  if (max_len < 1) throw Error("GRPO max_len must be >= 1");
  if (!(advantage_epsilon >= 0.0)) throw Error("advantage epsilon must be >= 0");
  if (eval_every < 1) throw Error("GRPO eval_every must be >= 1");
  SamplerConfig{temperature, top_p, 0, 0}.validate();
}

GRPOConfig GRPOConfig::reference_preset() {
  GRPOConfig c;
  c.group_size = 8;
  c.batch = 32;
  c.steps = 1000;
  c.temperature = 1.0;
  c.top_p = 0.95;
  c.eval_every = 30;
  return c;
}

std::vector<double> group_advantages(std::span<const double> rewards, double eps) {
  const auto n = static_cast<double>(rewards.size());
  std::vector<double> adv(rewards.size(), 0.0);
  if (rewards.empty()) return adv;
  const double mean = std::accumulate(rewards.begin(), rewards.end(), 0.0) / n;
  double var = 0.0;
  for (double r : rewards) var += (r - mean) * (r - mean);
  const double sd = std::sqrt(var / n);
  if (sd == 0.0) return adv;
  for (std::size_t i = 0; i < rewards.size(); ++i) adv[i] = (rewards[i] - mean) / (sd + eps);
  return adv;
}

GRPOBatch grpo_batch(const NGramPolicy& student, const ToyTask& task, const GRPOConfig& cfg,
                     std::int64_t step) {
  cfg.validate();
  const auto s = static_cast<std::uint64_t>(step);
  const std::vector<Sequence> prompts =
      task.prompts(static_cast<std::size_t>(cfg.batch), derive_seed(cfg.seed, s, 0));
  const SamplerConfig sampler{cfg.temperature, cfg.top_p, 0, 0};
  const auto g = static_cast<std::size_t>(cfg.group_size);

  GRPOBatch out{{}, {}, {}, GradTable::like(student)};
  out.rollouts.reserve(prompts.size() * g);
  for (std::size_t i = 0; i < prompts.size(); ++i) {
    std::vector<double> group_rewards;
    for (std::size_t m = 0; m < g; ++m) {
      Rng rng(derive_seed(cfg.seed, s, 1 + i * g + m));
      out.rollouts.push_back(rollout(student, prompts[i], cfg.max_len, sampler, rng));
      group_rewards.push_back(task.is_correct(prompts[i], out.rollouts.back().response) ? 1.0
                                                                                         : 0.0);
    }
    const std::vector<double> adv = group_advantages(group_rewards, cfg.advantage_epsilon);
    out.rewards.insert(out.rewards.end(), group_rewards.begin(), group_rewards.end());
    out.advantages.insert(out.advantages.end(), adv.begin(), adv.end());
  }

  const double inv_t = 1.0 / student.temperature();
  for (std::size_t i = 0; i < out.rollouts.size(); ++i) {
    const double a = out.advantages[i];
    if (a == 0.0) continue;
    const Rollout& r = out.rollouts[i];
    const double weight =
        cfg.length_normalize ? a / static_cast<double>(r.response.size()) : a;
    Sequence history = r.prompt;
    for (Token y : r.response) {
      const std::size_t ctx = student.context_index(history);
      // grad_z log q(y) = (e_y - q) / T
      Eigen::VectorXd score = -student.dist(ctx).probs() * inv_t;
      score[y] += inv_t;
      out.ascent.add_row(ctx, score, weight);
      history.push_back(y);
    }
  }
  out.ascent *= 1.0 / static_cast<double>(out.rollouts.size());
  return out;
}

DynamicsRecord grpo_step(NGramPolicy& student, const ToyTask& task, const GRPOConfig& cfg,
                         std::int64_t step) {
  const GRPOBatch b = grpo_batch(student, task, cfg, step);
  b.ascent.apply_descent(student, -cfg.lr);

  double entropy_sum = 0.0;
  std::size_t tokens = 0;
  for (const Rollout& r : b.rollouts) {
    for (double h : r.per_token_entropy) entropy_sum += h;
    tokens += r.response.size();
  }
  const double n = static_cast<double>(b.rollouts.size());
  const double mean_reward = std::accumulate(b.rewards.begin(), b.rewards.end(), 0.0) / n;
  return {step, mean_reward, entropy_sum / static_cast<double>(tokens),
          static_cast<double>(tokens) / n, mean_reward};
}

DynamicsRecord evaluate(const NGramPolicy& policy, const ToyTask& task, const EvalConfig& eval,
                        std::int64_t step, double signal) {
  const SamplerConfig sampler{1.0, 1.0, 0, eval.seed};
  const double acc = accuracy_eval(policy, task, eval.prompts, sampler, eval.max_len);
  const std::vector<Sequence> prompts =
      task.prompts(static_cast<std::size_t>(eval.prompts), derive_seed(eval.seed, ~0ULL, 1));
  const RolloutStats stats = rollout_stats(policy, prompts, sampler, eval.rollouts, eval.max_len);
  return {step, acc, stats.mean_entropy, stats.mean_len, signal};
}

std::vector<DynamicsRecord> run_grpo(NGramPolicy& student, const ToyTask& task,
                                     const GRPOConfig& cfg, const EvalConfig& eval) {
  cfg.validate();
  std::vector<DynamicsRecord> records;
  records.push_back(evaluate(student, task, eval, 0, 0.0));
  for (int step = 1; step <= cfg.steps; ++step) {
    const DynamicsRecord r = grpo_step(student, task, cfg, step);
    if (step % cfg.eval_every == 0) records.push_back(evaluate(student, task, eval, step, r.signal));
  }
  return records;
}

// ---- configuration ----------------------------------------------------------

json default_config() {
  return json{
      {"task", {{"kind", "modsum"}, {"vocab", 8}, {"prompt_len", 2}, {"n_prompts", 256}}},
      {"teacher", {{"sharpness", 4.0}, {"noise", 1.0}, {"seed", 7}}},
      {"teacher_sampler", {{"temperature", 1.0}, {"top_p", 0.95}, {"top_k", 20}}},
      {"student", {{"order", 3}, {"init_scale", 1.0}, {"seed", 11}}},
      {"objective",
       {{"source", "teacher"}, {"lambda", 0.0}, {"horizon", 8}, {"hard_label", false}}},
      {"train", {{"steps", 200}, {"batch", 32}, {"lr", 0.1}, {"seed", 42}}},
      {"eval", {{"every", 20}, {"prompts", 256}, {"rollouts", 1}, {"max_len", 8}, {"seed", 4242}}},
      {"curriculum",
       {{"enabled", false},
        {"horizons", {128, 256, 512, 1024, 2048, 4096}},
        {"h_min", 0.2},
        {"on_fail", "hold"},
        {"check_interval", 50}}},
      {"grpo",
       {{"enabled", true},
        {"group_size", 8},
        {"batch", 32},
        {"steps", 200},
        {"lr", 0.1},
        {"temperature", 1.0},
        {"top_p", 0.95},
        {"max_len", 8},
        {"advantage_epsilon", 1e-8},
        {"length_normalize", false},
        {"seed", 42},
        {"eval_every", 20}}},
  };
}

json preset_config(const std::string& name) {
  json c = default_config();
  if (name == "desk") return c;
  if (name == "reference-distill") {
    c["train"]["steps"] = 1000;
    c["train"]["batch"] = 32;
    c["train"]["lr"] = kReferenceLearningRate;
    c["eval"]["every"] = 30;
    c["grpo"]["enabled"] = false;
    return c;
  }
  if (name == "reference-grpo") {
    const GRPOConfig p = GRPOConfig::reference_preset();
    c["grpo"]["group_size"] = p.group_size;
    c["grpo"]["batch"] = p.batch;
    c["grpo"]["steps"] = p.steps;
    c["grpo"]["temperature"] = p.temperature;
    c["grpo"]["top_p"] = p.top_p;
    c["grpo"]["eval_every"] = p.eval_every;
    return c;
  }
  throw Error("unknown preset '" + name + "' (expected desk, reference-distill, reference-grpo)");
}

void merge_config(json& base, const json& patch) {
  if (!patch.is_object()) throw Error("config patch must be an object");
  for (const auto& [key, value] : patch.items()) {
    if (!base.contains(key)) throw Error("unknown config key '" + key + "'");
    if (value.is_object() && base[key].is_object()) {
      merge_config(base[key], value);
    } else {
      base[key] = value;
    }
  }
}

void apply_override(json& config, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) {
    throw Error("override must look like key=value, got '" + assignment + "'");
  }
  const std::string key = assignment.substr(0, eq);
  const std::string text = assignment.substr(eq + 1);
  json value = json::parse(text, nullptr, false);
  if (value.is_discarded()) value = text;

  json* node = &config;
  std::stringstream path(key);
  std::string part;
  std::vector<std::string> parts;
  while (std::getline(path, part, '.')) parts.push_back(part);
  for (std::size_t i = 0; i < parts.size(); ++i) {
    if (!node->is_object() || !node->contains(parts[i])) {
      throw Error("unknown config key '" + key + "'");
    }
    node = &(*node)[parts[i]];
  }
  *node = value;
}

json load_config_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open config file '" + path + "'");
  json patch = json::parse(in, nullptr, false, true);
  if (patch.is_discarded()) throw Error("config file '" + path + "' is not valid JSON");
  json c = default_config();
  merge_config(c, patch);
  return c;
}

fs::path default_out_dir() {
  if (const char* env = std::getenv(kOutDirEnv); env != nullptr && *env != '\0') return env;
  return "runs";
}

// ---- records ----------------------------------------------------------------

namespace {

std::string format_double(double x) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", x);
  return buf;
}

std::ofstream open_for_write(const fs::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot open '" + path.string() + "' for writing");
  return out;
}

void finish_write(std::ofstream& out, const fs::path& path) {
  out.flush();
  if (!out) throw Error("write failed for '" + path.string() + "'");
}

}  // namespace

void write_records(const std::vector<DynamicsRecord>& records, const fs::path& path) {
  std::ofstream out = open_for_write(path);
  out << kRecordHeader << '\n';
  for (const DynamicsRecord& r : records) {
    out << r.step << ',' << format_double(r.accuracy) << ',' << format_double(r.mean_entropy)
        << ',' << format_double(r.mean_len) << ',' << format_double(r.signal) << '\n';
  }
  finish_write(out, path);
}

std::vector<DynamicsRecord> read_records(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open '" + path.string() + "' for reading");
  std::string line;
  if (!std::getline(in, line) || line != kRecordHeader) {
    throw Error("'" + path.string() + "' does not start with the record header");
  }
  std::vector<DynamicsRecord> out;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::stringstream row(line);
    std::string cell;
    std::vector<std::string> cells;
    while (std::getline(row, cell, ',')) cells.push_back(cell);
    if (cells.size() != 5) throw Error("malformed record line '" + line + "'");
    out.push_back({std::stoll(cells[0]), std::strtod(cells[1].c_str(), nullptr),
                   std::strtod(cells[2].c_str(), nullptr), std::strtod(cells[3].c_str(), nullptr),
                   std::strtod(cells[4].c_str(), nullptr)});
  }
  return out;
}

std::vector<fs::path> emit_plot_data(const std::vector<DynamicsRecord>& records,
                                     const fs::path& out_dir, const std::string& run) {
  fs::create_directories(out_dir);
  struct Series {
    const char* name;
    double DynamicsRecord::*field;
  };
  const Series series[] = {{"accuracy", &DynamicsRecord::accuracy},
                           {"entropy", &DynamicsRecord::mean_entropy},
                           {"length", &DynamicsRecord::mean_len}};
  std::vector<fs::path> paths;
  for (const Series& s : series) {
    const fs::path path = out_dir / (run + "_" + s.name + ".dat");
    std::ofstream out = open_for_write(path);
    out << "step " << s.name << '\n';
    for (const DynamicsRecord& r : records) out << r.step << ' ' << format_double(r.*s.field) << '\n';
    finish_write(out, path);
    paths.push_back(path);
  }
  return paths;
}

// ---- pipeline ---------------------------------------------------------------

namespace {

PrefixSource parse_source(const std::string& s) {
  if (s == "teacher") return PrefixSource::Teacher;
  if (s == "student") return PrefixSource::Student;
  throw Error("objective.source must be 'teacher' or 'student', got '" + s + "'");
}

OnGateFailure parse_on_fail(const std::string& s) {
  if (s == "hold") return OnGateFailure::HoldAtLastStable;
  if (s == "terminate") return OnGateFailure::Terminate;
  throw Error("curriculum.on_fail must be 'hold' or 'terminate', got '" + s + "'");
}

template <typename T>
T get(const json& c, const char* section, const char* key) {
  try {
    return c.at(section).at(key).get<T>();
  } catch (const json::exception& e) {
    throw Error(std::string("config key ") + section + "." + key + ": " + e.what());
  }
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out = open_for_write(path);
  out << text;
  finish_write(out, path);
}

}  // namespace

PipelineArtifacts run_pipeline(const json& config, const fs::path& out_dir) {
  ToyTask task;
  task.kind = parse_task_kind(get<std::string>(config, "task", "kind"));
  task.vocab_size = get<int>(config, "task", "vocab");
  task.prompt_len = get<int>(config, "task", "prompt_len");
  task.validate();

  const auto train_seed = get<std::uint64_t>(config, "train", "seed");
  const NGramPolicy teacher =
      make_task_teacher(task, get<double>(config, "teacher", "sharpness"),
                        get<double>(config, "teacher", "noise"),
                        get<std::uint64_t>(config, "teacher", "seed"));
  Rng student_rng(get<std::uint64_t>(config, "student", "seed"));
  NGramPolicy student = NGramPolicy::random(task.vocab(), get<int>(config, "student", "order"),
                                            get<double>(config, "student", "init_scale"),
                                            student_rng);

  ObjectiveSpec spec;
  spec.source = parse_source(get<std::string>(config, "objective", "source"));
  spec.lambda = MixWeight(get<double>(config, "objective", "lambda"));
  spec.horizon = get<int>(config, "objective", "horizon");
  spec.hard_label = get<bool>(config, "objective", "hard_label");
  spec.validate();

  EvalConfig eval;
  eval.every = get<int>(config, "eval", "every");
  eval.prompts = get<int>(config, "eval", "prompts");
  eval.rollouts = get<int>(config, "eval", "rollouts");
  eval.max_len = get<int>(config, "eval", "max_len");
  eval.seed = get<std::uint64_t>(config, "eval", "seed");

  TrainConfig tc;
  tc.steps = get<int>(config, "train", "steps");
  tc.batch = get<int>(config, "train", "batch");
  tc.lr = get<double>(config, "train", "lr");
  tc.seed = train_seed;
  tc.eval_every = eval.every;
  tc.teacher_sampler = {get<double>(config, "teacher_sampler", "temperature"),
                        get<double>(config, "teacher_sampler", "top_p"),
                        get<int>(config, "teacher_sampler", "top_k"), 0};
  tc.eval_rollouts = eval.rollouts;
  tc.eval_max_len = eval.max_len;
  tc.held_out_prompts =
      task.prompts(static_cast<std::size_t>(eval.prompts), derive_seed(eval.seed, ~0ULL, 1));
  if (get<bool>(config, "curriculum", "enabled")) {
    CurriculumConfig cc;
    cc.horizons = config.at("curriculum").at("horizons").get<std::vector<int>>();
    cc.h_min = get<double>(config, "curriculum", "h_min");
    cc.on_fail = parse_on_fail(get<std::string>(config, "curriculum", "on_fail"));
    cc.check_interval = get<int>(config, "curriculum", "check_interval");
    tc.curriculum = cc;
  }

  const std::vector<Sequence> prompts =
      task.prompts(get<std::size_t>(config, "task", "n_prompts"), derive_seed(train_seed, 0xD15));
  const AccuracyFn accuracy = [&](const NGramPolicy& p) {
    return accuracy_eval(p, task, eval.prompts, SamplerConfig{1.0, 1.0, 0, eval.seed},
                         eval.max_len);
  };

  PipelineArtifacts art;
  fs::create_directories(out_dir);
  const fs::path plots = out_dir / "plots";

  write_text(out_dir / "config.json", config.dump(2) + "\n");
  art.files.push_back(out_dir / "config.json");

  TrainResult tr = train(spec, student, teacher, prompts, tc, accuracy);
  art.distill_records = std::move(tr.records);
  art.curriculum_trace = std::move(tr.curriculum_trace);
  write_records(art.distill_records, out_dir / "distill.csv");
  art.files.push_back(out_dir / "distill.csv");
  save_policy(student, (out_dir / "student.policy").string());
  art.files.push_back(out_dir / "student.policy");
  for (const fs::path& p : emit_plot_data(art.distill_records, plots, "distill")) {
    art.files.push_back(p);
  }

  if (tc.curriculum) {
    std::ostringstream text;
    text << "step,entropy,decision,horizon,status\n";
    for (const CurriculumTraceEntry& e : art.curriculum_trace) {
      text << e.step << ',' << format_double(e.entropy) << ',' << to_string(e.decision) << ','
           << e.horizon_after << ',' << to_string(e.status_after) << '\n';
    }
    write_text(out_dir / "curriculum.txt", text.str());
    art.files.push_back(out_dir / "curriculum.txt");
  }

  if (get<bool>(config, "grpo", "enabled")) {
    GRPOConfig gc;
    gc.group_size = get<int>(config, "grpo", "group_size");
    gc.batch = get<int>(config, "grpo", "batch");
    gc.steps = get<int>(config, "grpo", "steps");
    gc.lr = get<double>(config, "grpo", "lr");
    gc.temperature = get<double>(config, "grpo", "temperature");
    gc.top_p = get<double>(config, "grpo", "top_p");
    gc.max_len = get<int>(config, "grpo", "max_len");
    gc.advantage_epsilon = get<double>(config, "grpo", "advantage_epsilon");
    gc.length_normalize = get<bool>(config, "grpo", "length_normalize");
    gc.seed = get<std::uint64_t>(config, "grpo", "seed");
    gc.eval_every = get<int>(config, "grpo", "eval_every");
    art.grpo_records = run_grpo(student, task, gc, eval);
    write_records(art.grpo_records, out_dir / "grpo.csv");
    art.files.push_back(out_dir / "grpo.csv");
    save_policy(student, (out_dir / "student_grpo.policy").string());
    art.files.push_back(out_dir / "student_grpo.policy");
    for (const fs::path& p : emit_plot_data(art.grpo_records, plots, "grpo")) {
      art.files.push_back(p);
    }
  }
  return art;
}

}  // namespace kdlab
