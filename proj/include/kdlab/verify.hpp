#pragma once

#include <cstdint>
#include <iosfwd>

namespace kdlab {

// Runs the invariant suite (sequence-KL decomposition, KL gradient identities,
// estimator properties, fused-kernel equivalence) on seeded random instances
// and prints one fixed-format line per check. Returns true when all pass.
bool run_verification(std::ostream& out, std::uint64_t seed = 42);

}  // namespace kdlab
