#pragma once

// Streaming full-vocabulary KL between two linear LM heads.
//
// Logits are produced one vocabulary tile at a time from the head weights and
// the hidden state and never exist as a full V-length vector. Pass 1 builds
// both log-sum-exp normalisers with the online max/rescale recurrence, pass 2
// accumulates sum p (log p - log q) tile by tile, and the gradient adds a third
// pass that streams dL/dz for each tile. Working memory per token is a few tile
// buffers plus one H-vector. Everything accumulates in double whatever the
// input scalar type, and tiles are always visited in ascending order so a given
// tile size is bit-reproducible.

#include "kdlab/error.hpp"
#include "kdlab/kl_token.hpp"
#include "kdlab/math.hpp"

#include <Eigen/Dense>

#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <span>
#include <string>

namespace kdlab {

template <typename Scalar>
using HeadWeights = RowMatrix<Scalar>;  // V x H

struct TileConfig {
  Eigen::Index tile_size = 4096;

  void validate(Eigen::Index vocab) const;
  Eigen::Index num_tiles(Eigen::Index vocab) const { return (vocab + tile_size - 1) / tile_size; }
};

// Online log-sum-exp state: sum_exp is relative to max_logit.
struct RunningStats {
  double max_logit = -std::numeric_limits<double>::infinity();
  double sum_exp = 0.0;

  void push(std::span<const double> logits);
  // Associative merge of two partial states.
  void merge(const RunningStats& other);
  double log_sum_exp() const { return max_logit + std::log(sum_exp); }
};

// Counts scratch doubles held by the kernels on the current thread.
class ScratchProbe {
 public:
  static void reset();
  static std::size_t peak();
  static std::size_t current();

 private:
  friend class ScratchBuffer;
  static void acquire(std::size_t n);
  static void release(std::size_t n);
};

// Kernel working buffer registered with ScratchProbe for its lifetime.
class ScratchBuffer {
 public:
  explicit ScratchBuffer(Eigen::Index n) : data_(n) {
    ScratchProbe::acquire(static_cast<std::size_t>(n));
  }
  ~ScratchBuffer() { ScratchProbe::release(static_cast<std::size_t>(data_.size())); }
  ScratchBuffer(const ScratchBuffer&) = delete;
  ScratchBuffer& operator=(const ScratchBuffer&) = delete;

  Eigen::VectorXd& vec() { return data_; }
  double* data() { return data_.data(); }
  std::span<const double> head(Eigen::Index n) const {
    return {data_.data(), static_cast<std::size_t>(n)};
  }

 private:
  Eigen::VectorXd data_;
};

namespace detail {

// out[i] = <W.row(first + i), h> in double, for i < n.
template <typename DW, typename DH>
void project_tile(const Eigen::MatrixBase<DW>& w, const Eigen::MatrixBase<DH>& h,
                  Eigen::Index first, Eigen::Index n, double* out) {
  for (Eigen::Index i = 0; i < n; ++i) {
    const double z = w.row(first + i).template cast<double>().dot(h.template cast<double>());
    if (!std::isfinite(z)) {
      throw Error("non-finite logit at vocabulary row " + std::to_string(first + i));
    }
    out[i] = z;
  }
}

template <typename DW, typename DH>
void check_head(const Eigen::MatrixBase<DW>& w, const Eigen::MatrixBase<DH>& h) {
  if (h.cols() != 1) throw Error("hidden state must be a column vector");
  if (w.cols() != h.rows()) {
    throw Error("head width " + std::to_string(w.cols()) + " does not match hidden size " +
                std::to_string(h.rows()));
  }
}

}  // namespace detail

// log sum_v exp(<W_v, h>) by streaming over tiles.
template <typename DW, typename DH>
double streaming_lse(const Eigen::MatrixBase<DW>& weights, const Eigen::MatrixBase<DH>& h,
                     const TileConfig& tiles) {
  detail::check_head(weights, h);
  const Eigen::Index v = weights.rows();
  tiles.validate(v);
  ScratchBuffer z(tiles.tile_size);
  RunningStats stats;
  for (Eigen::Index first = 0; first < v; first += tiles.tile_size) {
    const Eigen::Index n = std::min(tiles.tile_size, v - first);
    detail::project_tile(weights, h, first, n, z.data());
    stats.push(z.head(n));
  }
  return stats.log_sum_exp();
}

struct FusedNormalizers {
  double teacher_lse = 0.0;
  double student_lse = 0.0;
};

namespace detail {

template <typename DWT, typename DHT, typename DWS, typename DHS>
void check_pair(const Eigen::MatrixBase<DWT>& wt, const Eigen::MatrixBase<DHT>& ht,
                const Eigen::MatrixBase<DWS>& ws, const Eigen::MatrixBase<DHS>& hs,
                const TileConfig& tiles) {
  check_head(wt, ht);
  check_head(ws, hs);
  if (wt.rows() != ws.rows()) throw Error("teacher and student heads have different V");
  tiles.validate(wt.rows());
}

template <typename DWT, typename DHT, typename DWS, typename DHS>
FusedNormalizers normalizer_pass(const Eigen::MatrixBase<DWT>& wt, const Eigen::MatrixBase<DHT>& ht,
                                 const Eigen::MatrixBase<DWS>& ws, const Eigen::MatrixBase<DHS>& hs,
                                 const TileConfig& tiles, ScratchBuffer& zt, ScratchBuffer& zs) {
  const Eigen::Index v = wt.rows();
  RunningStats st;
  RunningStats ss;
  for (Eigen::Index first = 0; first < v; first += tiles.tile_size) {
    const Eigen::Index n = std::min(tiles.tile_size, v - first);
    project_tile(wt, ht, first, n, zt.data());
    project_tile(ws, hs, first, n, zs.data());
    st.push(zt.head(n));
    ss.push(zs.head(n));
  }
  return {st.log_sum_exp(), ss.log_sum_exp()};
}

template <typename DWT, typename DHT, typename DWS, typename DHS>
double kl_pass(KLDirection direction, const Eigen::MatrixBase<DWT>& wt,
               const Eigen::MatrixBase<DHT>& ht, const Eigen::MatrixBase<DWS>& ws,
               const Eigen::MatrixBase<DHS>& hs, const TileConfig& tiles,
               const FusedNormalizers& norm, ScratchBuffer& zt, ScratchBuffer& zs) {
  const Eigen::Index v = wt.rows();
  double kl = 0.0;
  for (Eigen::Index first = 0; first < v; first += tiles.tile_size) {
    const Eigen::Index n = std::min(tiles.tile_size, v - first);
    project_tile(wt, ht, first, n, zt.data());
    project_tile(ws, hs, first, n, zs.data());
    double tile_sum = 0.0;
    for (Eigen::Index i = 0; i < n; ++i) {
      const double log_p = zt.data()[i] - norm.teacher_lse;
      const double log_q = zs.data()[i] - norm.student_lse;
      if (direction == KLDirection::Forward) {
        tile_sum += std::exp(log_p) * (log_p - log_q);
      } else {
        tile_sum += std::exp(log_q) * (log_q - log_p);
      }
    }
    kl += tile_sum;
  }
  return kl;
}

}  // namespace detail

// KL between softmax(W_t h_t) and softmax(W_s h_s) in the requested direction
// (Forward = KL(teacher || student)), without materialising V-length vectors.
template <typename DWT, typename DHT, typename DWS, typename DHS>
double fused_token_kl(KLDirection direction, const Eigen::MatrixBase<DWT>& teacher_weights,
                      const Eigen::MatrixBase<DWS>& student_weights,
                      const Eigen::MatrixBase<DHT>& h_teacher,
                      const Eigen::MatrixBase<DHS>& h_student, const TileConfig& tiles) {
  detail::check_pair(teacher_weights, h_teacher, student_weights, h_student, tiles);
  ScratchBuffer zt(tiles.tile_size);
  ScratchBuffer zs(tiles.tile_size);
  const FusedNormalizers norm = detail::normalizer_pass(teacher_weights, h_teacher,
                                                        student_weights, h_student, tiles, zt, zs);
  return detail::kl_pass(direction, teacher_weights, h_teacher, student_weights, h_student, tiles,
                         norm, zt, zs);
}

// Receives dL/dz for student logits [first_row, first_row + coeffs.size()).
// The gradient of head row v is coeffs[v - first_row] * h_student.
using HeadRowSink = std::function<void(Eigen::Index first_row, std::span<const double> coeffs)>;

struct FusedKLGrad {
  double loss = 0.0;
  Eigen::VectorXd grad_h_student;
};

// Loss plus its gradient with respect to the student hidden state; head-row
// gradients are streamed to `rows` (may be empty) tile by tile.
template <typename DWT, typename DHT, typename DWS, typename DHS>
FusedKLGrad fused_token_kl_grad(KLDirection direction,
                                const Eigen::MatrixBase<DWT>& teacher_weights,
                                const Eigen::MatrixBase<DWS>& student_weights,
                                const Eigen::MatrixBase<DHT>& h_teacher,
                                const Eigen::MatrixBase<DHS>& h_student, const TileConfig& tiles,
                                const HeadRowSink& rows = {}) {
  detail::check_pair(teacher_weights, h_teacher, student_weights, h_student, tiles);
  const Eigen::Index v = teacher_weights.rows();
  ScratchBuffer zt(tiles.tile_size);
  ScratchBuffer zs(tiles.tile_size);
  ScratchBuffer coeff(tiles.tile_size);
  ScratchBuffer grad_h(h_student.rows());
  const FusedNormalizers norm = detail::normalizer_pass(teacher_weights, h_teacher,
                                                        student_weights, h_student, tiles, zt, zs);
  const double kl = detail::kl_pass(direction, teacher_weights, h_teacher, student_weights,
                                    h_student, tiles, norm, zt, zs);

  grad_h.vec().setZero();
  for (Eigen::Index first = 0; first < v; first += tiles.tile_size) {
    const Eigen::Index n = std::min(tiles.tile_size, v - first);
    detail::project_tile(teacher_weights, h_teacher, first, n, zt.data());
    detail::project_tile(student_weights, h_student, first, n, zs.data());
    for (Eigen::Index i = 0; i < n; ++i) {
      const double log_p = zt.data()[i] - norm.teacher_lse;
      const double log_q = zs.data()[i] - norm.student_lse;
      const double q = std::exp(log_q);
      // Forward: q - p. Reverse: q (log q - log p - KL).
      const double c = direction == KLDirection::Forward ? q - std::exp(log_p)
                                                         : q * (log_q - log_p - kl);
      coeff.data()[i] = c;
      grad_h.vec() += c * student_weights.row(first + i).template cast<double>().transpose();
    }
    if (rows) rows(first, coeff.head(n));
  }
  return {kl, grad_h.vec()};
}

enum class KernelOp { LogSumExp, Loss, LossAndGrad };

const char* to_string(KernelOp op);

struct MemoryProbeResult {
  std::size_t peak_transient_floats = 0;
};

// Runs `op` on random heads of shape V x H and reports the peak number of
// scratch doubles held per token position.
MemoryProbeResult memory_probe(KernelOp op, Eigen::Index vocab, Eigen::Index hidden,
                               Eigen::Index tile, std::uint64_t seed = 1);

}  // namespace kdlab
