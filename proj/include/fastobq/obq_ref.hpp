#pragma once

/**
 * @file obq_ref.hpp
 * @brief Row-wise Optimal Brain Quantization, the reference quantizer.
 *
 * Every row owns a private copy of H^-1 and quantizes its weights one at a
 * time. A step on index k of row w is
 *
 *   q      = quant(w_k)
 *   L_k    = (q - w_k)^2 / (2 [H^-1]_kk)                  sensitivity
 *   w     <- w - (w_k - q) / [H^-1]_kk * H^-1[:, k]       compensation
 *   H^-1  <- H^-1 - H^-1[:, k] H^-1[k, :] / [H^-1]_kk     downdate
 *
 * The order of k is chosen by an OrderingStrategy, either once up front
 * (fixed) or by re-ranking the live indices before each step (greedy).
 */

#include <chrono>
#include <cmath>
#include <vector>

#include <Eigen/Core>

#include "fastobq/error.hpp"
#include "fastobq/grid.hpp"
#include "fastobq/linalg.hpp"
#include "fastobq/ordering.hpp"
#include "fastobq/parallel.hpp"
#include "fastobq/result.hpp"

namespace fastobq {

/// L_j = quant_error(w_j)^2 / (2 [H^-1]_jj) for every live j. Dead entries
/// are reported as 0 and must be filtered with hinv.is_live().
inline Eigen::VectorXd sensitivity_scores(const Eigen::Ref<const Eigen::VectorXd>& w_row,
                                          const InverseHessian& hinv, const QuantGrid& g,
                                          Eigen::Index row) {
  if (w_row.size() != hinv.dim()) {
    throw Error(ErrorCode::shape_mismatch, "row length differs from H^-1 dimension");
  }
  Eigen::VectorXd scores = Eigen::VectorXd::Zero(w_row.size());
  for (Eigen::Index j = 0; j < w_row.size(); ++j) {
    if (!hinv.is_live(j)) continue;
    const double e = quant_error(w_row[j], row, g);
    scores[j] = e * e / (2.0 * hinv.pivot(j));
  }
  return scores;
}

/// Score of every index under `key` for one row (dead entries 0).
inline Eigen::VectorXd ordering_scores(const Eigen::Ref<const Eigen::VectorXd>& w_row,
                                       const InverseHessian& hinv, const QuantGrid& g,
                                       Eigen::Index row, OrderKey key) {
  switch (key) {
    case OrderKey::sensitivity:
      return sensitivity_scores(w_row, hinv, g, row);
    case OrderKey::quant_error_magnitude: {
      Eigen::VectorXd s = Eigen::VectorXd::Zero(w_row.size());
      for (Eigen::Index j = 0; j < w_row.size(); ++j) {
        if (hinv.is_live(j)) s[j] = std::abs(quant_error(w_row[j], row, g));
      }
      return s;
    }
    case OrderKey::weight_magnitude: {
      Eigen::VectorXd s = Eigen::VectorXd::Zero(w_row.size());
      for (Eigen::Index j = 0; j < w_row.size(); ++j) {
        if (hinv.is_live(j)) s[j] = std::abs(w_row[j]);
      }
      return s;
    }
    case OrderKey::none:
      break;
  }
  return Eigen::VectorXd::Zero(w_row.size());
}

/// In-place w <- w - (w_k - q) / [H^-1]_kk * H^-1[:, k]. Both quantizers
/// go through this so their per-row arithmetic is identical.
inline void compensate_inplace(Eigen::Ref<Eigen::VectorXd> w, const InverseHessian& hinv,
                               Eigen::Index k, double q) {
  const double d = hinv.pivot(k);
  const double s = (w[k] - q) / d;
  w.noalias() -= s * hinv.values().col(k);
}

/// Optimal update of a row after forcing w_k onto its grid value. Entries
/// at dead indices do not move because their H^-1 column entries are 0.
inline Eigen::VectorXd compensate(Eigen::VectorXd w_row, const InverseHessian& hinv,
                                  Eigen::Index k, const QuantGrid& g, Eigen::Index row) {
  if (w_row.size() != hinv.dim()) {
    throw Error(ErrorCode::shape_mismatch, "row length differs from H^-1 dimension");
  }
  const double q = quantize_value(w_row[k], row, g);
  compensate_inplace(w_row, hinv, k, q);
  return w_row;
}

/// Round-to-nearest, no cross-weight interaction.
inline Eigen::MatrixXd rtn_quantize_layer(const Eigen::MatrixXd& weights, const QuantGrid& g) {
  if (g.rows() != weights.rows()) {
    throw Error(ErrorCode::shape_mismatch, "grid rows differ from weight rows");
  }
  Eigen::MatrixXd q(weights.rows(), weights.cols());
  for (Eigen::Index c = 0; c < weights.cols(); ++c) {
    for (Eigen::Index r = 0; r < weights.rows(); ++r) q(r, c) = quantize_value(weights(r, c), r, g);
  }
  return q;
}

namespace detail {

inline Eigen::Index pick_greedy(const Eigen::VectorXd& w, const InverseHessian& hinv,
                                const QuantGrid& g, Eigen::Index row,
                                const OrderingStrategy& strategy) {
  Eigen::Index best = -1;
  if (strategy.key == OrderKey::none) {
    for (Eigen::Index j = 0; j < hinv.dim(); ++j) {
      if (hinv.is_live(j)) return j;
    }
    return best;
  }
  // Guarded pivots are scored as 0 rather than raising.
  double best_score = 0.0;
  const bool desc = strategy.direction == OrderDirection::descending;
  for (Eigen::Index j = 0; j < hinv.dim(); ++j) {
    if (!hinv.is_live(j)) continue;
    double s = 0.0;
    const double e = quant_error(w[j], row, g);
    switch (strategy.key) {
      case OrderKey::sensitivity: {
        const double d = hinv.diag(j);
        s = d > kPivotTolerance ? e * e / (2.0 * d) : 0.0;
        break;
      }
      case OrderKey::quant_error_magnitude: s = std::abs(e); break;
      case OrderKey::weight_magnitude: s = std::abs(w[j]); break;
      case OrderKey::none: break;
    }
    // strict comparison keeps the lowest index on ties
    if (best < 0 || (desc ? s > best_score : s < best_score)) {
      best = j;
      best_score = s;
    }
  }
  return best;
}

inline std::vector<Eigen::Index> fixed_row_order(const Eigen::VectorXd& w,
                                                 const InverseHessian& hinv, const QuantGrid& g,
                                                 Eigen::Index row,
                                                 const OrderingStrategy& strategy) {
  if (strategy.key == OrderKey::none) return identity_order(w.size());
  const Eigen::VectorXd s = ordering_scores(w, hinv, g, row, strategy.key);
  return stable_order(std::span<const double>(s.data(), static_cast<std::size_t>(s.size())),
                      strategy.direction);
}

// Quantizes one row in place along `order` (or greedily when order is empty).
inline void quantize_row(Eigen::VectorXd& w, InverseHessian& hinv, const QuantGrid& g,
                         Eigen::Index row, const OrderingStrategy& strategy, bool greedy,
                         const std::vector<Eigen::Index>* order, double* step_loss,
                         std::size_t& guarded, std::vector<TraceEntry>* trace) {
  const Eigen::Index n = w.size();
  std::vector<Eigen::Index> fixed;
  if (order == nullptr && !greedy) {
    fixed = fixed_row_order(w, hinv, g, row, strategy);
    order = &fixed;
  }
  for (Eigen::Index t = 0; t < n; ++t) {
    const Eigen::Index k = order != nullptr ? (*order)[static_cast<std::size_t>(t)]
                                            : pick_greedy(w, hinv, g, row, strategy);
    if (!hinv.is_live(k)) throw Error(ErrorCode::dead_index, "schedule repeats a column");
    const double q = quantize_value(w[k], row, g);
    const double d = hinv.diag(k);
    TraceEntry e{t, row, k, 0.0, 0.0, q, false};
    if (d > kPivotTolerance) {
      const double err = q - w[k];
      e.sensitivity = err * err / (2.0 * d);
      compensate_inplace(w, hinv, k, q);
      e.compensated_value = w[k];
      w[k] = q;
      hinv.downdate(k);
    } else {
      e.guarded = true;
      e.compensated_value = q;
      w[k] = q;
      hinv.retire(k);
      ++guarded;
    }
    step_loss[t] = e.sensitivity;
    if (trace != nullptr) trace->push_back(e);
  }
}

inline LayerResult obq_impl(const Eigen::MatrixXd& weights, const Hessian& h,
                            const QuantGrid& g, const OrderingStrategy& strategy, bool greedy,
                            const std::vector<Eigen::Index>* order,
                            const QuantizeOptions& opts) {
  const auto start = std::chrono::steady_clock::now();
  const Eigen::Index rows = weights.rows();
  const Eigen::Index cols = weights.cols();
  if (h.dim() != cols) throw Error(ErrorCode::shape_mismatch, "Hessian dim differs from d_col");
  if (g.rows() != rows) throw Error(ErrorCode::shape_mismatch, "grid rows differ from d_row");
  if (order != nullptr) validate_permutation(*order, cols);

  HinvCounter counter;
  std::vector<InverseHessian> per_row;
  per_row.reserve(static_cast<std::size_t>(rows));
  // Invert straight into row 0's buffer; the others are copies of it.
  per_row.push_back(invert_spd(h, &counter));
  for (Eigen::Index r = 1; r < rows; ++r) per_row.push_back(per_row.front());

  // Row-major scratch: each row is contiguous.
  Eigen::MatrixXd work = weights.transpose();
  Eigen::MatrixXd step_loss = Eigen::MatrixXd::Zero(cols, rows);
  std::vector<std::size_t> guarded(static_cast<std::size_t>(rows), 0);
  std::vector<std::vector<TraceEntry>> traces(opts.record_trace ? static_cast<std::size_t>(rows) : 0);

  parallel_for(rows, resolve_threads(opts.threads), [&](Eigen::Index begin, Eigen::Index end) {
    for (Eigen::Index r = begin; r < end; ++r) {
      const auto ur = static_cast<std::size_t>(r);
      Eigen::VectorXd w = work.col(r);
      quantize_row(w, per_row[ur], g, r, strategy, greedy, order, step_loss.col(r).data(),
                   guarded[ur], opts.record_trace ? &traces[ur] : nullptr);
      work.col(r) = w;
      per_row[ur] = InverseHessian();
    }
  });

  LayerResult res;
  res.quantized = work.transpose();
  res.hinv_matrices_allocated = counter.peak();
  res.hinv_bytes_peak = counter.peak_bytes();
  res.per_column_error.assign(static_cast<std::size_t>(cols), 0.0);
  for (Eigen::Index t = 0; t < cols; ++t) {
    double s = 0.0;
    for (Eigen::Index r = 0; r < rows; ++r) s += step_loss(t, r);
    res.per_column_error[static_cast<std::size_t>(t)] = s;
  }
  for (auto n : guarded) res.guarded_pivots += n;
  if (opts.record_trace) {
    for (auto& t : traces) {
      res.trace.entries.insert(res.trace.entries.end(), t.begin(), t.end());
    }
  }
  if (order != nullptr) res.schedule = *order;
  res.error_total = opts.calib != nullptr
                        ? layer_error(weights, res.quantized, *opts.calib).total
                        : layer_error_from_hessian(weights, res.quantized, h);
  res.wall_time_ms =
      std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
  return res;
}

}  // namespace detail

/// Reference OBQ over a whole layer. With greedy = false every row is
/// pre-sorted once by `strategy` on its initial weights and full H^-1;
/// with greedy = true the next index is re-ranked among the live ones.
inline LayerResult obq_quantize_layer(const Eigen::MatrixXd& weights, const Hessian& h,
                                      const QuantGrid& g, const OrderingStrategy& strategy,
                                      bool greedy = false, const QuantizeOptions& opts = {}) {
  return detail::obq_impl(weights, h, g, strategy, greedy, nullptr, opts);
}

/// Reference OBQ with one explicit column order shared by every row.
inline LayerResult obq_quantize_layer_ordered(const Eigen::MatrixXd& weights, const Hessian& h,
                                              const QuantGrid& g,
                                              const std::vector<Eigen::Index>& order,
                                              const QuantizeOptions& opts = {}) {
  return detail::obq_impl(weights, h, g, OrderingStrategy{OrderKey::none, {}}, false, &order,
                          opts);
}

}  // namespace fastobq
