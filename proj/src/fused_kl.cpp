#include "kdlab/fused_kl.hpp"

#include "kdlab/rng.hpp"

#include <algorithm>

namespace kdlab {

void TileConfig::validate(Eigen::Index vocab) const {
  if (tile_size < 1 || tile_size > vocab) {
    throw Error("tile size must lie in [1, V]; got " + std::to_string(tile_size) + " for V = " +
                std::to_string(vocab));
  }
}

void RunningStats::push(std::span<const double> logits) {
  if (logits.empty()) return;
  RunningStats tile;
  tile.max_logit = *std::max_element(logits.begin(), logits.end());
  for (double z : logits) tile.sum_exp += std::exp(z - tile.max_logit);
  merge(tile);
}

void RunningStats::merge(const RunningStats& other) {
  if (other.sum_exp == 0.0) return;
  if (sum_exp == 0.0) {
    *this = other;
    return;
  }
  const double m = std::max(max_logit, other.max_logit);
  sum_exp = sum_exp * std::exp(max_logit - m) + other.sum_exp * std::exp(other.max_logit - m);
  max_logit = m;
}

namespace {
thread_local std::size_t scratch_current = 0;
thread_local std::size_t scratch_peak = 0;
}  // namespace

void ScratchProbe::reset() {
  scratch_current = 0;
  scratch_peak = 0;
}

std::size_t ScratchProbe::peak() { return scratch_peak; }
std::size_t ScratchProbe::current() { return scratch_current; }

void ScratchProbe::acquire(std::size_t n) {
  scratch_current += n;
  scratch_peak = std::max(scratch_peak, scratch_current);
}

void ScratchProbe::release(std::size_t n) { scratch_current -= std::min(n, scratch_current); }

const char* to_string(KernelOp op) {
  switch (op) {
    case KernelOp::LogSumExp:
      return "lse";
    case KernelOp::Loss:
      return "loss";
    case KernelOp::LossAndGrad:
      return "grad";
  }
  return "?";
}

MemoryProbeResult memory_probe(KernelOp op, Eigen::Index vocab, Eigen::Index hidden,
                               Eigen::Index tile, std::uint64_t seed) {
  Rng rng(seed);
  HeadWeights<float> wt(vocab, hidden);
  HeadWeights<float> ws(vocab, hidden);
  for (Eigen::Index i = 0; i < wt.size(); ++i) {
    wt.data()[i] = static_cast<float>(0.1 * rng.normal());
    ws.data()[i] = static_cast<float>(0.1 * rng.normal());
  }
  Vector<float> ht(hidden);
  Vector<float> hs(hidden);
  for (Eigen::Index i = 0; i < hidden; ++i) {
    ht[i] = static_cast<float>(rng.normal());
    hs[i] = static_cast<float>(rng.normal());
  }
  const TileConfig tiles{tile};
  ScratchProbe::reset();
  switch (op) {
    case KernelOp::LogSumExp:
      (void)streaming_lse(ws, hs, tiles);
      break;
    case KernelOp::Loss:
      (void)fused_token_kl(KLDirection::Forward, wt, ws, ht, hs, tiles);
      break;
    case KernelOp::LossAndGrad:
      (void)fused_token_kl_grad(KLDirection::Reverse, wt, ws, ht, hs, tiles);
      break;
  }
  return {ScratchProbe::peak()};
}

}  // namespace kdlab
