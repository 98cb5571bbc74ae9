#pragma once

#include <atomic>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Cholesky>
#include <Eigen/Core>

#include "fastobq/error.hpp"

namespace fastobq {

/// Below this an inverse-Hessian pivot is treated as singular.
inline constexpr double kPivotTolerance = 1e-12;

enum class DampingMode {
  absolute,  // H += damping * I
  relative,  // H += damping * mean(diag(2 X X^T)) * I
};

struct Hessian {
  Eigen::MatrixXd values;
  double damping_applied = 0.0;

  Eigen::Index dim() const { return values.rows(); }
};

/// H = 2 X X^T + damping I for calibration inputs X of shape [d_col, N].
/// Only the upper triangle is accumulated and then mirrored, so the result
/// is exactly symmetric.
inline Hessian build_hessian(const Eigen::MatrixXd& calib, double damping,
                             DampingMode mode = DampingMode::absolute) {
  if (calib.cols() == 0 || calib.rows() == 0) {
    throw Error(ErrorCode::empty_calibration, "calibration set has no samples");
  }
  if (!calib.allFinite()) throw Error(ErrorCode::non_finite, "NaN/Inf in calibration set");
  if (!std::isfinite(damping) || damping < 0.0) {
    throw Error(ErrorCode::invalid_argument, "damping must be finite and >= 0");
  }

  const Eigen::Index d = calib.rows();
  Hessian h;
  h.values = Eigen::MatrixXd::Zero(d, d);
  h.values.selfadjointView<Eigen::Upper>().rankUpdate(calib, 2.0);
  h.values.triangularView<Eigen::StrictlyLower>() = h.values.transpose();

  double lambda = damping;
  if (mode == DampingMode::relative) lambda = damping * h.values.diagonal().mean();
  h.values.diagonal().array() += lambda;
  h.damping_applied = lambda;
  return h;
}

/// Counts live inverse-Hessian-sized buffers so the memory footprint of a
/// quantizer can be asserted exactly instead of sampled from the OS.
class HinvCounter {
 public:
  void acquire(std::size_t bytes) {
    const auto n = ++live_;
    const auto b = (live_bytes_ += bytes);
    raise(peak_, n);
    raise(peak_bytes_, b);
    ++total_;
  }

  void release(std::size_t bytes) {
    --live_;
    live_bytes_ -= bytes;
  }

  std::size_t live() const { return live_; }
  std::size_t peak() const { return peak_; }
  std::size_t peak_bytes() const { return peak_bytes_; }
  std::size_t total() const { return total_; }

 private:
  static void raise(std::atomic<std::size_t>& slot, std::size_t v) {
    auto cur = slot.load();
    while (v > cur && !slot.compare_exchange_weak(cur, v)) {
    }
  }

  std::atomic<std::size_t> live_{0};
  std::atomic<std::size_t> live_bytes_{0};
  std::atomic<std::size_t> peak_{0};
  std::atomic<std::size_t> peak_bytes_{0};
  std::atomic<std::size_t> total_{0};
};

/// H^-1 together with the mask of indices that are still unquantized.
/// Dead rows/columns are held at exactly zero, so the index space never
/// shrinks and column selection stays in original coordinates.
class InverseHessian {
 public:
  InverseHessian() = default;

  explicit InverseHessian(Eigen::MatrixXd values, HinvCounter* counter = nullptr)
      : values_(std::move(values)),
        live_(static_cast<std::size_t>(values_.rows()), 1),
        counter_(counter) {
    track();
  }

  InverseHessian(const InverseHessian& other)
      : values_(other.values_), live_(other.live_), counter_(other.counter_) {
    track();
  }

  InverseHessian(InverseHessian&& other) noexcept
      : values_(std::move(other.values_)),
        live_(std::move(other.live_)),
        counter_(other.counter_),
        tracked_bytes_(other.tracked_bytes_) {
    other.counter_ = nullptr;
    other.tracked_bytes_ = 0;
  }

  InverseHessian& operator=(InverseHessian other) noexcept {
    swap(other);
    return *this;
  }

  ~InverseHessian() { untrack(); }

  void swap(InverseHessian& other) noexcept {
    values_.swap(other.values_);
    live_.swap(other.live_);
    std::swap(counter_, other.counter_);
    std::swap(tracked_bytes_, other.tracked_bytes_);
  }

  Eigen::Index dim() const { return values_.rows(); }
  const Eigen::MatrixXd& values() const { return values_; }
  double operator()(Eigen::Index i, Eigen::Index j) const { return values_(i, j); }
  double diag(Eigen::Index k) const { return values_(k, k); }

  bool is_live(Eigen::Index k) const { return live_[static_cast<std::size_t>(k)] != 0; }
  std::span<const std::uint8_t> live_mask() const { return live_; }
  Eigen::Index live_count() const {
    Eigen::Index n = 0;
    for (auto v : live_) n += v;
    return n;
  }
  std::vector<Eigen::Index> live_indices() const {
    std::vector<Eigen::Index> idx;
    for (std::size_t i = 0; i < live_.size(); ++i) {
      if (live_[i]) idx.push_back(static_cast<Eigen::Index>(i));
    }
    return idx;
  }

  /// Pivot [H^-1]_kk of a live index; throws DeadIndex / SingularPivot.
  double pivot(Eigen::Index k) const {
    check_index(k);
    if (!is_live(k)) throw Error(ErrorCode::dead_index, "index " + std::to_string(k));
    const double d = values_(k, k);
    if (!(d > kPivotTolerance)) {
      throw Error(ErrorCode::singular_pivot, "[H^-1]_kk = " + std::to_string(d));
    }
    return d;
  }

  /// In-place removal of index k:
  ///   H^-1 <- H^-1 - H^-1[:,k] H^-1[k,:] / [H^-1]_kk
  /// which leaves the inverse of H with row/column k deleted on the live
  /// block. Row and column k are then written to exact zeros.
  void downdate(Eigen::Index k) {
    const double d = pivot(k);
    const Eigen::VectorXd col = values_.col(k);
    values_.noalias() -= (col / d) * col.transpose();
    kill(k);
  }

  /// Drop index k without the rank-1 correction (used for near-singular
  /// pivots, where the correction would divide by ~0).
  void retire(Eigen::Index k) {
    check_index(k);
    if (!is_live(k)) throw Error(ErrorCode::dead_index, "index " + std::to_string(k));
    kill(k);
  }

 private:
  void check_index(Eigen::Index k) const {
    if (k < 0 || k >= dim()) {
      throw Error(ErrorCode::invalid_argument, "index " + std::to_string(k) + " out of range");
    }
  }

  void kill(Eigen::Index k) {
    values_.row(k).setZero();
    values_.col(k).setZero();
    live_[static_cast<std::size_t>(k)] = 0;
  }

  void track() {
    if (counter_ != nullptr) {
      tracked_bytes_ = static_cast<std::size_t>(values_.size()) * sizeof(double);
      counter_->acquire(tracked_bytes_);
    }
  }

  void untrack() {
    if (counter_ != nullptr) counter_->release(tracked_bytes_);
    counter_ = nullptr;
    tracked_bytes_ = 0;
  }

  Eigen::MatrixXd values_;
  std::vector<std::uint8_t> live_;
  HinvCounter* counter_ = nullptr;
  std::size_t tracked_bytes_ = 0;
};

/// Cholesky-based inverse of an SPD Hessian. All indices start live.
inline InverseHessian invert_spd(const Hessian& h, HinvCounter* counter = nullptr) {
  const Eigen::Index d = h.dim();
  if (d == 0) throw Error(ErrorCode::invalid_argument, "empty Hessian");
  Eigen::LLT<Eigen::MatrixXd> llt(h.values);
  if (llt.info() != Eigen::Success) {
    throw Error(ErrorCode::not_positive_definite,
                "Cholesky pivot <= 0; increase damping");
  }
  // Rank-deficient Gram matrices can survive the factorization with
  // round-off sized pivots; treat those as failures too.
  const double pivot_floor = static_cast<double>(d) * std::numeric_limits<double>::epsilon() *
                             h.values.diagonal().maxCoeff();
  const Eigen::VectorXd ldiag = llt.matrixLLT().diagonal();
  if ((ldiag.array().square() <= pivot_floor).any()) {
    throw Error(ErrorCode::not_positive_definite,
                "Cholesky pivot at round-off level; increase damping");
  }
  Eigen::MatrixXd inv = llt.solve(Eigen::MatrixXd::Identity(d, d));
  inv = 0.5 * (inv + inv.transpose()).eval();
  if (!inv.allFinite() || (inv.diagonal().array() <= 0.0).any()) {
    throw Error(ErrorCode::not_positive_definite, "inverse is not finite/positive");
  }
  return InverseHessian(std::move(inv), counter);
}

/// Value-returning form of InverseHessian::downdate.
inline InverseHessian downdate_inverse(InverseHessian hinv, Eigen::Index k) {
  hinv.downdate(k);
  return hinv;
}

}  // namespace fastobq
