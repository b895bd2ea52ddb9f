#pragma once

// Entropy-gated length curriculum: the training horizon climbs a ladder of
// lengths and only advances while held-out mean per-token entropy stays at or
// above a floor.

#include "kdlab/error.hpp"

#include <cstdint>
#include <vector>

namespace kdlab {

enum class OnGateFailure { Terminate, HoldAtLastStable };
enum class CurriculumStatus { Running, Frozen, Terminated };
enum class CurriculumDecision { Advance, Hold, Freeze, Terminate };

const char* to_string(OnGateFailure f);
const char* to_string(CurriculumStatus s);
const char* to_string(CurriculumDecision d);

struct CurriculumConfig {
  // Strictly increasing horizons in tokens.
  std::vector<int> horizons{128, 256, 512, 1024, 2048, 4096};
  double h_min = 0.2;
  OnGateFailure on_fail = OnGateFailure::HoldAtLastStable;
  int check_interval = 50;

  void validate() const;
};

struct EntropyObservation {
  std::int64_t step = 0;
  double entropy = 0.0;
};

struct CurriculumState {
  std::size_t stage = 0;
  CurriculumStatus status = CurriculumStatus::Running;
  std::vector<EntropyObservation> entropy_history;
};

struct ObserveResult {
  CurriculumState state;
  CurriculumDecision decision = CurriculumDecision::Hold;
};

// One gate evaluation. Throws when the state is already Frozen or Terminated.
ObserveResult observe(const CurriculumState& state, const CurriculumConfig& config,
                      double held_out_entropy, std::int64_t step = 0);

int current_horizon(const CurriculumState& state, const CurriculumConfig& config);

struct CurriculumTraceEntry {
  std::int64_t step = 0;
  double entropy = 0.0;
  CurriculumDecision decision = CurriculumDecision::Hold;
  int horizon_after = 0;
  CurriculumStatus status_after = CurriculumStatus::Running;
};

// Feeds a whole entropy series through observe(), stopping at the first
// absorbing state. Observation i is stamped with step (i + 1) * check_interval.
std::vector<CurriculumTraceEntry> simulate_curriculum(const CurriculumConfig& config,
                                                      const std::vector<double>& entropies);

}  // namespace kdlab
