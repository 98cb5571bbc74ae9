#pragma once

#include <algorithm>
#include <cstddef>
#include <ostream>
#include <vector>

#include <Eigen/Core>

#include "fastobq/error.hpp"
#include "fastobq/linalg.hpp"

namespace fastobq {

/// One quantization step of one row.
struct TraceEntry {
  Eigen::Index step = 0;
  Eigen::Index row = 0;
  Eigen::Index col = 0;
  double sensitivity = 0.0;        // L_q of the step
  double compensated_value = 0.0;  // weight after the compensation update
  double grid_value = 0.0;         // quant(w) the update was aiming for
  bool guarded = false;            // pivot below tolerance, no compensation
};

struct QuantTrace {
  std::vector<TraceEntry> entries;

  /// step,row,col,L_q, for quantization-order heatmaps.
  void write_csv(std::ostream& out) const {
    out << "step,row,col,L_q\n";
    out.precision(17);
    for (const auto& e : entries) {
      out << e.step << ',' << e.row << ',' << e.col << ',' << e.sensitivity << '\n';
    }
  }
};

struct QuantizeOptions {
  unsigned threads = 0;  // 0: FASTOBQ_THREADS or hardware concurrency
  bool record_trace = false;
  // When set, error_total is evaluated on these inputs; otherwise it is
  // recovered from the Hessian with its damping removed.
  const Eigen::MatrixXd* calib = nullptr;
};

struct LayerResult {
  Eigen::MatrixXd quantized;
  double error_total = 0.0;
  std::vector<double> per_column_error;  // indexed by step
  std::vector<Eigen::Index> schedule;    // column order (fastobq) or empty
  double wall_time_ms = 0.0;
  std::size_t hinv_matrices_allocated = 0;
  std::size_t hinv_bytes_peak = 0;
  std::size_t guarded_pivots = 0;
  QuantTrace trace;
};

struct LayerError {
  double total = 0.0;       // ||(W - W_q) X||_F^2
  double normalized = 0.0;  // total / ||W X||_F^2 (0 when W X = 0)
};

inline LayerError layer_error(const Eigen::MatrixXd& weights, const Eigen::MatrixXd& quantized,
                              const Eigen::MatrixXd& calib) {
  if (weights.rows() != quantized.rows() || weights.cols() != quantized.cols() ||
      weights.cols() != calib.rows()) {
    throw Error(ErrorCode::shape_mismatch, "layer_error operands disagree");
  }
  const Eigen::MatrixXd diff = (weights - quantized) * calib;
  const double ref = (weights * calib).squaredNorm();
  LayerError e;
  e.total = diff.squaredNorm();
  e.normalized = ref > 0.0 ? e.total / ref : 0.0;
  return e;
}

/// The same objective from H = 2 X X^T + lambda I:
///   ||D X||_F^2 = 1/2 tr(D (H - lambda I) D^T).
inline double layer_error_from_hessian(const Eigen::MatrixXd& weights,
                                       const Eigen::MatrixXd& quantized, const Hessian& h) {
  const Eigen::MatrixXd diff = weights - quantized;
  Eigen::MatrixXd gram = h.values;
  gram.diagonal().array() -= h.damping_applied;
  return std::max(0.0, 0.5 * (diff * gram).cwiseProduct(diff).sum());
}

}  // namespace fastobq
