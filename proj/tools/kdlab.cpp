// kdlab: command-line entry point for distillation runs, GRPO, the invariant
// suite, the FLOPs model, curriculum traces and the fused-kernel benchmark.

#include "kdlab/curriculum.hpp"
#include "kdlab/flops.hpp"
#include "kdlab/fused_kl.hpp"
#include "kdlab/harness.hpp"
#include "kdlab/verify.hpp"

#include "CLI11.hpp"

#include <chrono>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>

namespace {

using nlohmann::json;

struct RunOptions {
  std::string config_file;
  std::string preset = "desk";
  std::vector<std::string> overrides;
  std::string out_dir;
};

void add_run_options(CLI::App* cmd, RunOptions& opts) {
  cmd->add_option("-c,--config", opts.config_file, "JSON config file (keys as in the defaults)");
  cmd->add_option("--preset", opts.preset, "desk, reference-distill or reference-grpo")
      ->capture_default_str();
  cmd->add_option("--set", opts.overrides, "Override a config key: section.key=value");
  cmd->add_option("-o,--out", opts.out_dir,
                  std::string("Output directory (default: $") + kdlab::kOutDirEnv + " or runs/)");
}

json resolve_config(const RunOptions& opts) {
  json config = kdlab::preset_config(opts.preset);
  if (!opts.config_file.empty()) {
    std::ifstream in(opts.config_file);
    if (!in) throw kdlab::Error("cannot open config file '" + opts.config_file + "'");
    json patch = json::parse(in, nullptr, false, true);
    if (patch.is_discarded()) throw kdlab::Error("config file is not valid JSON");
    kdlab::merge_config(config, patch);
  }
  for (const std::string& o : opts.overrides) kdlab::apply_override(config, o);
  return config;
}

std::filesystem::path out_dir(const RunOptions& opts, const char* run) {
  if (!opts.out_dir.empty()) return opts.out_dir;
  return kdlab::default_out_dir() / run;
}

void print_records(const char* title, const std::vector<kdlab::DynamicsRecord>& records) {
  std::printf("%s\n%8s %10s %10s %10s %12s\n", title, "step", "accuracy", "entropy", "length",
              "loss/reward");
  for (const auto& r : records) {
    std::printf("%8lld %10.4f %10.4f %10.3f %12.6f\n", static_cast<long long>(r.step), r.accuracy,
                r.mean_entropy, r.mean_len, r.signal);
  }
}

int run_pipeline_cmd(const RunOptions& opts, const char* run, bool grpo) {
  json config = resolve_config(opts);
  config["grpo"]["enabled"] = grpo;
  const auto dir = out_dir(opts, run);
  const auto art = kdlab::run_pipeline(config, dir);
  print_records("distillation", art.distill_records);
  if (!art.grpo_records.empty()) print_records("grpo", art.grpo_records);
  std::printf("wrote %zu files under %s\n", art.files.size(), dir.string().c_str());
  return 0;
}

int run_grpo_cmd(const RunOptions& opts, const std::string& init) {
  const json config = resolve_config(opts);
  kdlab::ToyTask task;
  task.kind = kdlab::parse_task_kind(config["task"]["kind"].get<std::string>());
  task.vocab_size = config["task"]["vocab"].get<int>();
  task.prompt_len = config["task"]["prompt_len"].get<int>();

  kdlab::NGramPolicy student = [&] {
    if (!init.empty()) return kdlab::load_policy(init);
    kdlab::Rng rng(config["student"]["seed"].get<std::uint64_t>());
    return kdlab::NGramPolicy::random(task.vocab(), config["student"]["order"].get<int>(),
                                      config["student"]["init_scale"].get<double>(), rng);
  }();

  const json& g = config["grpo"];
  kdlab::GRPOConfig gc;
  gc.group_size = g["group_size"].get<int>();
  gc.batch = g["batch"].get<int>();
  gc.steps = g["steps"].get<int>();
  gc.lr = g["lr"].get<double>();
  gc.temperature = g["temperature"].get<double>();
  gc.top_p = g["top_p"].get<double>();
  gc.max_len = g["max_len"].get<int>();
  gc.advantage_epsilon = g["advantage_epsilon"].get<double>();
  gc.length_normalize = g["length_normalize"].get<bool>();
  gc.seed = g["seed"].get<std::uint64_t>();
  gc.eval_every = g["eval_every"].get<int>();

  const json& e = config["eval"];
  kdlab::EvalConfig ec;
  ec.prompts = e["prompts"].get<int>();
  ec.rollouts = e["rollouts"].get<int>();
  ec.max_len = e["max_len"].get<int>();
  ec.seed = e["seed"].get<std::uint64_t>();

  const auto records = kdlab::run_grpo(student, task, gc, ec);
  const auto dir = out_dir(opts, "grpo");
  std::filesystem::create_directories(dir);
  kdlab::write_records(records, dir / "grpo.csv");
  kdlab::save_policy(student, (dir / "student_grpo.policy").string());
  kdlab::emit_plot_data(records, dir / "plots", "grpo");
  print_records("grpo", records);
  return 0;
}

kdlab::ModelDims resolve_dims(const std::string& preset, const std::vector<double>& explicit_dims) {
  if (!explicit_dims.empty()) {
    if (explicit_dims.size() != 7) {
      throw kdlab::Error("explicit dims need 7 values: H I N n_heads kv_heads head_dim V");
    }
    return {explicit_dims[0], explicit_dims[1], explicit_dims[2], explicit_dims[3],
            explicit_dims[4], explicit_dims[5], explicit_dims[6]};
  }
  const auto dims = kdlab::model_preset(preset);
  if (!dims) throw kdlab::Error("unknown model preset '" + preset + "'");
  return *dims;
}

std::vector<double> read_entropy_series(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw kdlab::Error("cannot open entropy series '" + path + "'");
  std::vector<double> values;
  std::string line;
  while (std::getline(in, line)) {
    if (line.find_first_not_of(" \t\r") == std::string::npos || line[0] == '#') continue;
    values.push_back(std::stod(line));
  }
  return values;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"kdlab: autoregressive knowledge-distillation laboratory"};
  app.require_subcommand(1);

  RunOptions distill_opts;
  auto* distill = app.add_subcommand("distill", "Distill a student from the toy-task teacher");
  add_run_options(distill, distill_opts);

  RunOptions grpo_opts;
  std::string grpo_init;
  auto* grpo = app.add_subcommand("grpo", "GRPO on the toy task from a policy file");
  add_run_options(grpo, grpo_opts);
  grpo->add_option("--init", grpo_init, "Initial student policy file (default: fresh student)");

  RunOptions pipe_opts;
  auto* pipeline = app.add_subcommand("pipeline", "Distillation followed by GRPO");
  add_run_options(pipeline, pipe_opts);

  std::uint64_t verify_seed = 42;
  auto* verify = app.add_subcommand("verify", "Run the invariant suite");
  verify->add_option("--seed", verify_seed)->capture_default_str();

  std::string student_preset = "qwen3-0.6b";
  std::string teacher_preset = "qwen3-4b";
  std::vector<double> student_dims;
  std::vector<double> teacher_dims;
  kdlab::CostQuery query{32, 92, 128};
  std::string flops_format = "both";
  auto* flops = app.add_subcommand("flops", "Per-step FLOPs of offline vs online distillation");
  flops->add_option("--student", student_preset, "Student preset")->capture_default_str();
  flops->add_option("--teacher", teacher_preset, "Teacher preset")->capture_default_str();
  flops->add_option("--student-dims", student_dims, "H I N n_heads kv_heads head_dim V");
  flops->add_option("--teacher-dims", teacher_dims, "H I N n_heads kv_heads head_dim V");
  flops->add_option("-B,--batch", query.batch)->capture_default_str();
  flops->add_option("-P,--prompt-len", query.prompt_len)->capture_default_str();
  flops->add_option("-R,--response-len", query.response_len)->capture_default_str();
  flops->add_option("--format", flops_format, "text, json or both")
      ->check(CLI::IsMember({"text", "json", "both"}))
      ->capture_default_str();

  std::string entropy_file;
  kdlab::CurriculumConfig curriculum;
  std::string on_fail = "hold";
  auto* csim = app.add_subcommand("curriculum-sim", "Trace the entropy gate over a series");
  csim->add_option("entropies", entropy_file, "Text file with one entropy (nats) per line")
      ->required();
  csim->add_option("--horizons", curriculum.horizons, "Horizon ladder")->capture_default_str();
  csim->add_option("--h-min", curriculum.h_min, "Entropy floor in nats")->capture_default_str();
  csim->add_option("--on-fail", on_fail, "hold or terminate")
      ->check(CLI::IsMember({"hold", "terminate"}))
      ->capture_default_str();
  csim->add_option("--check-interval", curriculum.check_interval)->capture_default_str();

  Eigen::Index bench_vocab = 151936;
  Eigen::Index bench_hidden = 64;
  Eigen::Index bench_tile = 4096;
  std::string bench_direction = "forward";
  int bench_reps = 3;
  std::uint64_t bench_seed = 9;
  auto* bench = app.add_subcommand("kernel-bench", "Time the streaming full-vocabulary KL");
  bench->add_option("--vocab", bench_vocab)->capture_default_str();
  bench->add_option("--hidden", bench_hidden)->capture_default_str();
  bench->add_option("--tile", bench_tile)->capture_default_str();
  bench->add_option("--direction", bench_direction)
      ->check(CLI::IsMember({"forward", "reverse"}))
      ->capture_default_str();
  bench->add_option("--reps", bench_reps)->capture_default_str();
  bench->add_option("--seed", bench_seed)->capture_default_str();

  CLI11_PARSE(app, argc, argv);

  try {
    if (*distill) return run_pipeline_cmd(distill_opts, "distill", false);
    if (*pipeline) return run_pipeline_cmd(pipe_opts, "pipeline", true);
    if (*grpo) return run_grpo_cmd(grpo_opts, grpo_init);
    if (*verify) return kdlab::run_verification(std::cout, verify_seed) ? 0 : 1;

    if (*flops) {
      const auto s = resolve_dims(student_preset, student_dims);
      const auto t = resolve_dims(teacher_preset, teacher_dims);
      if (flops_format != "json") std::cout << kdlab::format_cost_report(s, t, query);
      if (flops_format != "text") std::cout << kdlab::cost_report_json(s, t, query).dump() << '\n';
      return 0;
    }

    if (*csim) {
      curriculum.on_fail =
          on_fail == "hold" ? kdlab::OnGateFailure::HoldAtLastStable : kdlab::OnGateFailure::Terminate;
      const auto trace = kdlab::simulate_curriculum(curriculum, read_entropy_series(entropy_file));
      std::printf("%-8s %-10s %-10s %-8s %s\n", "step", "entropy", "decision", "horizon", "status");
      for (const auto& e : trace) {
        std::printf("%-8lld %-10.4f %-10s %-8d %s\n", static_cast<long long>(e.step), e.entropy,
                    kdlab::to_string(e.decision), e.horizon_after, kdlab::to_string(e.status_after));
      }
      const int final_horizon =
          trace.empty() ? curriculum.horizons.front() : trace.back().horizon_after;
      std::printf("final horizon %d, status %s\n", final_horizon,
                  trace.empty() ? "running" : kdlab::to_string(trace.back().status_after));
      return 0;
    }

    if (*bench) {
      kdlab::Rng rng(bench_seed);
      kdlab::HeadWeights<float> wt(bench_vocab, bench_hidden);
      kdlab::HeadWeights<float> ws(bench_vocab, bench_hidden);
      for (Eigen::Index i = 0; i < wt.size(); ++i) {
        wt.data()[i] = static_cast<float>(0.1 * rng.normal());
        ws.data()[i] = static_cast<float>(0.1 * rng.normal());
      }
      kdlab::Vector<float> ht(bench_hidden);
      kdlab::Vector<float> hs(bench_hidden);
      for (Eigen::Index i = 0; i < bench_hidden; ++i) {
        ht[i] = static_cast<float>(rng.normal());
        hs[i] = static_cast<float>(rng.normal());
      }
      const auto dir =
          bench_direction == "forward" ? kdlab::KLDirection::Forward : kdlab::KLDirection::Reverse;
      const kdlab::TileConfig tiles{bench_tile};
      double loss = 0.0;
      kdlab::ScratchProbe::reset();
      const auto start = std::chrono::steady_clock::now();
      for (int r = 0; r < bench_reps; ++r) loss = kdlab::fused_token_kl(dir, wt, ws, ht, hs, tiles);
      const std::chrono::duration<double> elapsed = std::chrono::steady_clock::now() - start;
      const json report{{"vocab", bench_vocab},
                        {"hidden", bench_hidden},
                        {"tile", bench_tile},
                        {"direction", bench_direction},
                        {"repetitions", bench_reps},
                        {"loss", loss},
                        {"wall_time", elapsed.count() / std::max(1, bench_reps)},
                        {"peak_transient_floats", kdlab::ScratchProbe::peak()}};
      std::cout << report.dump() << '\n';
      return 0;
    }
  } catch (const std::exception& e) {
    std::fprintf(stderr, "kdlab: %s\n", e.what());
    return 2;
  }
  return 0;
}
