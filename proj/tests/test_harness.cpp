#include "doctest.h"

#include "kdlab/harness.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <sstream>

using namespace kdlab;
namespace fs = std::filesystem;

namespace {

fs::path scratch_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("kdlab_test_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream s;
  s << in.rdbuf();
  return s.str();
}

// Deterministic solver: huge logit on the teacher's target token.
NGramPolicy oracle_policy(const ToyTask& task) { return make_task_teacher(task, 1e4, 0.0, 1); }

nlohmann::json small_config() {
  nlohmann::json c = default_config();
  c["train"]["steps"] = 40;
  c["train"]["batch"] = 8;
  c["train"]["lr"] = 1.0;
  c["eval"]["every"] = 10;
  c["eval"]["prompts"] = 64;
  c["grpo"]["steps"] = 20;
  c["grpo"]["batch"] = 8;
  c["grpo"]["eval_every"] = 10;
  return c;
}

}  // namespace

TEST_CASE("toy task layout and answers") {
  ToyTask t;
  CHECK(t.separator() == 6);
  CHECK(t.eos() == 7);
  CHECK(t.answer({4, 5, 6}) == Sequence{3});
  CHECK(t.is_correct({4, 5, 6}, {3, 7}));
  CHECK_FALSE(t.is_correct({4, 5, 6}, {2, 7}));
  CHECK_FALSE(t.is_correct({4, 5, 6}, {}));
  CHECK_THROWS_AS(t.answer({4, 5}), Error);
  ToyTask c{TaskKind::Copy, 8, 3};
  CHECK(c.answer({1, 2, 3, 6}) == Sequence{1, 2, 3});
  CHECK(c.is_correct({1, 2, 3, 6}, {1, 2, 3, 7}));
  CHECK_FALSE(c.is_correct({1, 2, 3, 6}, {1, 2}));
  for (const Sequence& p : t.prompts(100, 3)) {
    REQUIRE(p.size() == 3);
    CHECK(p[2] == t.separator());
    CHECK(p[0] < 6);
  }
  CHECK(parse_task_kind("copy") == TaskKind::Copy);
  CHECK_THROWS_AS(parse_task_kind("sort"), Error);
}

TEST_CASE("accuracy_eval") {
  const ToyTask t;
  const SamplerConfig s{1.0, 1.0, 0, 99};
  SUBCASE("oracle policy scores 1") {
    CHECK(accuracy_eval(oracle_policy(t), t, 200, s, 4) == 1.0);
    const ToyTask c{TaskKind::Copy, 8, 2};
    CHECK(accuracy_eval(oracle_policy(c), c, 200, s, 4) == 1.0);
  }
  SUBCASE("uniform policy sits at chance") {
    const NGramPolicy u(t.vocab(), 3);
    const double acc = accuracy_eval(u, t, 2000, s, 4);
    const double sigma = std::sqrt(0.125 * 0.875 / 2000.0);
    CHECK(std::abs(acc - 0.125) <= 3.0 * sigma);
  }
  SUBCASE("deterministic given the seed") {
    const NGramPolicy teacher = make_task_teacher(t, 2.0, 1.0, 5);
    CHECK(accuracy_eval(teacher, t, 300, s, 4) == accuracy_eval(teacher, t, 300, s, 4));
  }
}

TEST_CASE("group advantages") {
  SUBCASE("one success in eight") {
    const std::vector<double> r{1, 0, 0, 0, 0, 0, 0, 0};
    const std::vector<double> a = group_advantages(r, 1e-8);
    CHECK(std::abs(a[0] - std::sqrt(7.0)) <= 1e-6);
    for (std::size_t i = 1; i < 8; ++i) CHECK(std::abs(a[i] + 1.0 / std::sqrt(7.0)) <= 1e-6);
    const std::vector<double> exact = group_advantages(r, 0.0);
    CHECK(exact[0] == doctest::Approx(std::sqrt(7.0)).epsilon(1e-15));
    CHECK(exact[1] == doctest::Approx(-1.0 / std::sqrt(7.0)).epsilon(1e-15));
  }
  SUBCASE("equal rewards give zeros") {
    for (double v : {0.0, 1.0}) {
      for (double a : group_advantages(std::vector<double>(8, v), 1e-8)) CHECK(a == 0.0);
    }
  }
  SUBCASE("zero mean and unit variance") {
    Rng rng(1);
    for (int trial = 0; trial < 200; ++trial) {
      std::vector<double> r(2 + rng.below(10));
      for (double& x : r) x = double(rng.below(2));
      const std::vector<double> a = group_advantages(r, 1e-8);
      CHECK(std::abs(std::accumulate(a.begin(), a.end(), 0.0)) <= 1e-12);
      double var = 0.0;
      for (double x : a) var += x * x;
      var /= double(a.size());
      if (std::any_of(a.begin(), a.end(), [](double x) { return x != 0.0; })) {
        CHECK(std::abs(var - 1.0) <= 1e-6);
      } else {
        CHECK(var == 0.0);
      }
    }
  }
}

TEST_CASE("GRPO batch") {
  const ToyTask t;
  GRPOConfig cfg;
  cfg.batch = 6;
  cfg.max_len = 4;
  SUBCASE("zero-variance groups contribute no gradient") {
    // The oracle is always right, so every group is all ones.
    const GRPOBatch b = grpo_batch(oracle_policy(t), t, cfg, 1);
    for (double r : b.rewards) CHECK(r == 1.0);
    CHECK(b.ascent.max_abs() == 0.0);
    // A policy that can never answer: all zeros.
    NGramPolicy never(t.vocab(), 1);
    never.logits().col(t.eos()).setConstant(1e4);
    CHECK(grpo_batch(never, t, cfg, 1).ascent.max_abs() == 0.0);
  }
  SUBCASE("ascent equals the advantage-weighted score sum") {
    const NGramPolicy teacher = make_task_teacher(t, 1.5, 1.0, 3);
    const GRPOBatch b = grpo_batch(teacher, t, cfg, 4);
    REQUIRE(b.rollouts.size() == 48);
    RowMatrix<double> expect = RowMatrix<double>::Zero(Eigen::Index(teacher.num_contexts()), 8);
    for (std::size_t i = 0; i < b.rollouts.size(); ++i) {
      Sequence h = b.rollouts[i].prompt;
      for (Token y : b.rollouts[i].response) {
        const auto ctx = Eigen::Index(teacher.context_index(h));
        Eigen::RowVectorXd s = -teacher.dist(std::size_t(ctx)).probs().transpose();
        s[y] += 1.0;
        expect.row(ctx) += b.advantages[i] * s;
        h.push_back(y);
      }
    }
    expect /= 48.0;
    CHECK((b.ascent.to_dense() - expect).cwiseAbs().maxCoeff() <= 1e-14);
    double group_sum = 0.0;
    for (std::size_t i = 0; i < 8; ++i) group_sum += b.advantages[i];
    CHECK(std::abs(group_sum) <= 1e-12);
  }
  SUBCASE("step is deterministic and moves along the ascent") {
    NGramPolicy a = make_task_teacher(t, 1.5, 1.0, 3);
    NGramPolicy c = a;
    const GRPOBatch b = grpo_batch(a, t, cfg, 2);
    const DynamicsRecord ra = grpo_step(a, t, cfg, 2);
    const DynamicsRecord rc = grpo_step(c, t, cfg, 2);
    CHECK(ra == rc);
    CHECK(a.logits() == c.logits());
    const NGramPolicy before = make_task_teacher(t, 1.5, 1.0, 3);
    CHECK((a.logits() - (before.logits() + cfg.lr * b.ascent.to_dense())).cwiseAbs().maxCoeff() <= 1e-15);
    CHECK(ra.signal == doctest::Approx(std::accumulate(b.rewards.begin(), b.rewards.end(), 0.0) / 48.0));
  }
  SUBCASE("config validation") {
    GRPOConfig bad = cfg;
    bad.group_size = 1;
    CHECK_THROWS_AS(bad.validate(), Error);
    const GRPOConfig p = GRPOConfig::reference_preset();
    CHECK(p.group_size == 8);
    CHECK(p.batch == 32);
    CHECK(p.steps == 1000);
    CHECK(p.top_p == 0.95);
  }
}

TEST_CASE("records round-trip and plot series") {
  const fs::path dir = scratch_dir("records");
  const std::vector<DynamicsRecord> recs{{0, 0.125, 1.5, 3.25, 0.0},
                                         {20, 1.0 / 3.0, std::nextafter(0.7, 1.0), 2.0, 1e-300},
                                         {40, 0.5, 0.1, 2.5, -4.0}};
  write_records(recs, dir / "r.csv");
  CHECK(read_records(dir / "r.csv") == recs);
  CHECK(slurp(dir / "r.csv").rfind(std::string(kRecordHeader) + "\n", 0) == 0);

  const auto files = emit_plot_data(recs, dir / "plots", "run");
  REQUIRE(files.size() == 3);
  CHECK(files[0].filename() == "run_accuracy.dat");
  std::ifstream in(files[1]);
  std::string header;
  std::getline(in, header);
  CHECK(header == "step entropy");
  for (const DynamicsRecord& r : recs) {
    std::int64_t step = 0;
    std::string value;
    in >> step >> value;
    CHECK(step == r.step);
    CHECK(std::strtod(value.c_str(), nullptr) == r.mean_entropy);
  }

  const auto empty = emit_plot_data({}, dir / "empty", "none");
  for (const fs::path& p : empty) {
    const std::string text = slurp(p);
    CHECK(std::count(text.begin(), text.end(), '\n') == 1);
  }
  CHECK_THROWS_AS(read_records(dir / "missing.csv"), Error);
}

TEST_CASE("configuration") {
  nlohmann::json c = default_config();
  apply_override(c, "objective.lambda=0.5");
  apply_override(c, "objective.source=student");
  apply_override(c, "curriculum.horizons=[4,8]");
  CHECK(c["objective"]["lambda"].get<double>() == 0.5);
  CHECK(c["objective"]["source"] == "student");
  CHECK(c["curriculum"]["horizons"].size() == 2);
  CHECK_THROWS_AS(apply_override(c, "objective.lamda=1"), Error);
  CHECK_THROWS_AS(apply_override(c, "novalue"), Error);
  CHECK_THROWS_AS(merge_config(c, nlohmann::json{{"bogus", 1}}), Error);
  CHECK(preset_config("reference-distill")["train"]["lr"].get<double>() == kReferenceLearningRate);
  CHECK(preset_config("reference-grpo")["grpo"]["steps"].get<int>() == 1000);
  CHECK_THROWS_AS(preset_config("huge"), Error);

  const fs::path dir = scratch_dir("config");
  std::ofstream(dir / "c.json") << R"({"train": {"steps": 7}})";
  CHECK(load_config_file((dir / "c.json").string())["train"]["steps"].get<int>() == 7);
  std::ofstream(dir / "bad.json") << "{not json";
  CHECK_THROWS_AS(load_config_file((dir / "bad.json").string()), Error);
}

TEST_CASE("pipeline") {
  const nlohmann::json c = small_config();
  SUBCASE("artifacts, schema and byte-identical re-runs") {
    const fs::path a = scratch_dir("pipe_a");
    const fs::path b = scratch_dir("pipe_b");
    const PipelineArtifacts ra = run_pipeline(c, a);
    run_pipeline(c, b);
    REQUIRE(ra.distill_records.size() == 4);
    for (std::size_t i = 0; i < ra.distill_records.size(); ++i) {
      CHECK(ra.distill_records[i].step == std::int64_t(10 * (i + 1)));
    }
    CHECK(ra.grpo_records.size() == 3);
    CHECK(ra.grpo_records.front().step == 0);
    for (const fs::path& f : ra.files) {
      INFO(f.string());
      CHECK(fs::exists(f));
      CHECK(slurp(f) == slurp(b / fs::relative(f, a)));
    }
    CHECK(read_records(a / "distill.csv") == ra.distill_records);
    const NGramPolicy s = load_policy((a / "student.policy").string());
    CHECK(s.order() == 3);
  }
  SUBCASE("distill only with curriculum") {
    nlohmann::json d = c;
    d["grpo"]["enabled"] = false;
    d["curriculum"]["enabled"] = true;
    d["curriculum"]["horizons"] = {2, 4, 8};
    d["curriculum"]["check_interval"] = 10;
    const fs::path dir = scratch_dir("pipe_c");
    const PipelineArtifacts r = run_pipeline(d, dir);
    CHECK(r.grpo_records.empty());
    CHECK_FALSE(fs::exists(dir / "grpo.csv"));
    CHECK(fs::exists(dir / "curriculum.txt"));
    CHECK_FALSE(r.curriculum_trace.empty());
  }
  SUBCASE("bad config values surface as errors") {
    nlohmann::json d = c;
    d["objective"]["source"] = "neither";
    CHECK_THROWS_AS(run_pipeline(d, scratch_dir("pipe_bad")), Error);
  }
}

TEST_CASE("default output directory follows the environment") {
  ::setenv(kOutDirEnv, "/tmp/kdlab_elsewhere", 1);
  CHECK(default_out_dir() == fs::path("/tmp/kdlab_elsewhere"));
  ::unsetenv(kOutDirEnv);
  CHECK(default_out_dir() == fs::path("runs"));
}
