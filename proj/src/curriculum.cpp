#include "kdlab/curriculum.hpp"

#include <cmath>
#include <string>

namespace kdlab {

const char* to_string(OnGateFailure f) {
  return f == OnGateFailure::Terminate ? "terminate" : "hold";
}

const char* to_string(CurriculumStatus s) {
  switch (s) {
    case CurriculumStatus::Running:
      return "running";
    case CurriculumStatus::Frozen:
      return "frozen";
    case CurriculumStatus::Terminated:
      return "terminated";
  }
  return "?";
}

const char* to_string(CurriculumDecision d) {
  switch (d) {
    case CurriculumDecision::Advance:
      return "advance";
    case CurriculumDecision::Hold:
      return "hold";
    case CurriculumDecision::Freeze:
      return "freeze";
    case CurriculumDecision::Terminate:
      return "terminate";
  }
  return "?";
}

void CurriculumConfig::validate() const {
  if (horizons.empty()) throw Error("curriculum needs at least one horizon");
  if (horizons.front() < 1) throw Error("curriculum horizons must be positive");
  for (std::size_t i = 1; i < horizons.size(); ++i) {
    if (horizons[i] <= horizons[i - 1]) throw Error("curriculum horizons must strictly increase");
  }
  if (!(h_min >= 0.0)) throw Error("h_min must be >= 0");
  if (check_interval < 1) throw Error("check_interval must be >= 1");
}

ObserveResult observe(const CurriculumState& state, const CurriculumConfig& config,
                      double held_out_entropy, std::int64_t step) {
  config.validate();
  if (state.status != CurriculumStatus::Running) {
    throw Error(std::string("curriculum is ") + to_string(state.status) +
                "; no further observations accepted");
  }
  if (!std::isfinite(held_out_entropy)) throw Error("held-out entropy must be finite");

  ObserveResult r{state, CurriculumDecision::Hold};
  r.state.entropy_history.push_back({step, held_out_entropy});
  const std::size_t last = config.horizons.size() - 1;
  if (held_out_entropy >= config.h_min) {
    if (state.stage < last) {
      ++r.state.stage;
      r.decision = CurriculumDecision::Advance;
    }
  } else if (config.on_fail == OnGateFailure::HoldAtLastStable) {
    r.state.status = CurriculumStatus::Frozen;
    r.decision = CurriculumDecision::Freeze;
  } else {
    r.state.status = CurriculumStatus::Terminated;
    r.decision = CurriculumDecision::Terminate;
  }
  return r;
}

int current_horizon(const CurriculumState& state, const CurriculumConfig& config) {
  return config.horizons.at(state.stage);
}

std::vector<CurriculumTraceEntry> simulate_curriculum(const CurriculumConfig& config,
                                                      const std::vector<double>& entropies) {
  config.validate();
  std::vector<CurriculumTraceEntry> trace;
  CurriculumState state;
  for (std::size_t i = 0; i < entropies.size(); ++i) {
    if (state.status != CurriculumStatus::Running) break;
    const auto step = static_cast<std::int64_t>(i + 1) * config.check_interval;
    ObserveResult r = observe(state, config, entropies[i], step);
    state = std::move(r.state);
    trace.push_back({step, entropies[i], r.decision, current_horizon(state, config), state.status});
  }
  return trace;
}

}  // namespace kdlab
