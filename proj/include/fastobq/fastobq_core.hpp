#pragma once

/**
 * @file fastobq_core.hpp
 * @brief Row-parallel, column-wise quantization sharing one inverse Hessian.
 *
 * Instead of letting every row choose its own next index (which forces one
 * H^-1 per row), all rows quantize the same column at the same time:
 *
 *   1. invert H once
 *   2. score each column j by S_j = sum_i (quant(w_ij) - w_ij)^2 / (2 [H^-1]_jj)
 *   3. sort columns by the chosen key (static schedule)
 *   4. for each scheduled column k, quantize w_ik in every row and apply the
 *      compensation update to every row, reading the shared column H^-1[:, k]
 *   5. downdate the shared H^-1 once for k
 *
 * Steps 4 and 5 are separated by a barrier: during step 4 the inverse is
 * read-only and each worker writes only its own rows; step 5 runs on a
 * single thread. Row updates never interact, so the result is bitwise
 * independent of the worker count.
 */

#include <atomic>
#include <barrier>
#include <chrono>
#include <exception>
#include <span>
#include <thread>
#include <vector>

#include <Eigen/Core>

#include "fastobq/error.hpp"
#include "fastobq/grid.hpp"
#include "fastobq/linalg.hpp"
#include "fastobq/obq_ref.hpp"
#include "fastobq/ordering.hpp"
#include "fastobq/parallel.hpp"
#include "fastobq/result.hpp"

namespace fastobq {

struct ColumnSchedule {
  std::vector<Eigen::Index> permutation;
  std::vector<double> scores;  // key score per original column
  OrderingStrategy strategy;
};

/// S_j = sum_i L(w_ij) over a fully live H^-1. Columns whose pivot falls
/// under the guard tolerance score 0.
inline Eigen::VectorXd aggregate_column_sensitivity(const Eigen::MatrixXd& weights,
                                                    const InverseHessian& hinv,
                                                    const QuantGrid& g) {
  if (weights.cols() != hinv.dim()) {
    throw Error(ErrorCode::shape_mismatch, "d_col differs from H^-1 dimension");
  }
  if (hinv.live_count() != hinv.dim()) {
    throw Error(ErrorCode::invalid_argument, "column sensitivity needs a fully live H^-1");
  }
  Eigen::VectorXd s = Eigen::VectorXd::Zero(weights.cols());
  for (Eigen::Index j = 0; j < weights.cols(); ++j) {
    const double d = hinv.diag(j);
    if (!(d > kPivotTolerance)) continue;
    const double denom = 2.0 * d;
    double acc = 0.0;
    for (Eigen::Index i = 0; i < weights.rows(); ++i) {
      const double e = quant_error(weights(i, j), i, g);
      acc += e * e / denom;
    }
    s[j] = acc;
  }
  return s;
}

inline ColumnSchedule schedule_columns(const Eigen::VectorXd& sensitivity,
                                       const Eigen::MatrixXd& weights, const QuantGrid& g,
                                       const OrderingStrategy& strategy) {
  if (!sensitivity.allFinite()) throw Error(ErrorCode::non_finite, "column scores not finite");
  const Eigen::Index cols = weights.cols();
  if (sensitivity.size() != cols) {
    throw Error(ErrorCode::shape_mismatch, "one score per column expected");
  }

  ColumnSchedule sched;
  sched.strategy = strategy;
  sched.scores.assign(static_cast<std::size_t>(cols), 0.0);
  for (Eigen::Index j = 0; j < cols; ++j) {
    double v = 0.0;
    switch (strategy.key) {
      case OrderKey::sensitivity:
      case OrderKey::none:
        v = sensitivity[j];
        break;
      case OrderKey::quant_error_magnitude:
        for (Eigen::Index i = 0; i < weights.rows(); ++i) {
          v += std::abs(quant_error(weights(i, j), i, g));
        }
        break;
      case OrderKey::weight_magnitude:
        v = weights.col(j).norm();
        break;
    }
    sched.scores[static_cast<std::size_t>(j)] = v;
  }
  sched.permutation = strategy.key == OrderKey::none
                          ? identity_order(cols)
                          : stable_order(sched.scores, strategy.direction);
  return sched;
}

namespace detail {

inline LayerResult fastobq_impl(const Eigen::MatrixXd& weights, const Hessian& h,
                                const QuantGrid& g, const OrderingStrategy* strategy,
                                const std::vector<Eigen::Index>* explicit_order,
                                const QuantizeOptions& opts) {
  const auto start = std::chrono::steady_clock::now();
  const Eigen::Index rows = weights.rows();
  const Eigen::Index cols = weights.cols();
  if (h.dim() != cols) throw Error(ErrorCode::shape_mismatch, "Hessian dim differs from d_col");
  if (g.rows() != rows) throw Error(ErrorCode::shape_mismatch, "grid rows differ from d_row");

  HinvCounter counter;
  InverseHessian hinv = invert_spd(h, &counter);

  std::vector<Eigen::Index> perm;
  if (explicit_order != nullptr) {
    validate_permutation(*explicit_order, cols);
    perm = *explicit_order;
  } else {
    const Eigen::VectorXd s = aggregate_column_sensitivity(weights, hinv, g);
    perm = schedule_columns(s, weights, g, *strategy).permutation;
  }

  // Column r of `work` is row r of W, so each row update is contiguous.
  Eigen::MatrixXd work = weights.transpose();
  std::vector<double> contrib(static_cast<std::size_t>(rows), 0.0);
  std::vector<std::vector<TraceEntry>> traces(opts.record_trace ? static_cast<std::size_t>(rows) : 0);

  LayerResult res;
  res.per_column_error.assign(static_cast<std::size_t>(cols), 0.0);

  // Phase 1 for rows [begin, end) of step t.
  auto quantize_rows = [&](Eigen::Index t, Eigen::Index begin, Eigen::Index end) {
    const Eigen::Index k = perm[static_cast<std::size_t>(t)];
    const double d = hinv.diag(k);
    const bool guarded = !(d > kPivotTolerance);
    for (Eigen::Index r = begin; r < end; ++r) {
      auto w = work.col(r);
      const double q = quantize_value(w[k], r, g);
      TraceEntry e{t, r, k, 0.0, q, q, guarded};
      if (!guarded) {
        const double delta = w[k] - q;
        e.sensitivity = delta * delta / (2.0 * d);
        compensate_inplace(w, hinv, k, q);
        e.compensated_value = w[k];
      }
      w[k] = q;
      contrib[static_cast<std::size_t>(r)] = e.sensitivity;
      if (opts.record_trace) traces[static_cast<std::size_t>(r)].push_back(e);
    }
  };

  // Phase 2: the single writer.
  auto finish_step = [&](Eigen::Index t) {
    const Eigen::Index k = perm[static_cast<std::size_t>(t)];
    double acc = 0.0;
    for (double c : contrib) acc += c;  // fixed row order
    res.per_column_error[static_cast<std::size_t>(t)] = acc;
    if (hinv.diag(k) > kPivotTolerance) {
      hinv.downdate(k);
    } else {
      hinv.retire(k);
      ++res.guarded_pivots;
    }
  };

  const unsigned workers = static_cast<unsigned>(
      std::clamp<Eigen::Index>(resolve_threads(opts.threads), 1, std::max<Eigen::Index>(rows, 1)));
  if (workers == 1) {
    for (Eigen::Index t = 0; t < cols; ++t) {
      quantize_rows(t, 0, rows);
      finish_step(t);
    }
  } else {
    Eigen::Index step = 0;
    std::atomic<bool> failed{false};
    std::exception_ptr error;
    std::barrier sync(static_cast<std::ptrdiff_t>(workers), [&]() noexcept {
      if (!failed) {
        try {
          finish_step(step);
        } catch (...) {
          error = std::current_exception();
          failed = true;
        }
      }
      ++step;
    });
    std::vector<std::exception_ptr> worker_errors(workers);
    {
      std::vector<std::jthread> pool;
      pool.reserve(workers);
      for (unsigned wid = 0; wid < workers; ++wid) {
        pool.emplace_back([&, wid] {
          const auto [b, e] = slice(rows, wid, workers);
          for (Eigen::Index t = 0; t < cols; ++t) {
            // After a failure every worker keeps arriving so nobody deadlocks.
            if (!failed) {
              try {
                quantize_rows(t, b, e);
              } catch (...) {
                worker_errors[wid] = std::current_exception();
                failed = true;
              }
            }
            sync.arrive_and_wait();
          }
        });
      }
    }
    for (auto& e : worker_errors) {
      if (e) std::rethrow_exception(e);
    }
    if (error) std::rethrow_exception(error);
  }

  res.quantized = work.transpose();
  res.schedule = std::move(perm);
  res.hinv_matrices_allocated = counter.peak();
  res.hinv_bytes_peak = counter.peak_bytes();
  if (opts.record_trace) {
    for (Eigen::Index t = 0; t < cols; ++t) {
      for (auto& tr : traces) res.trace.entries.push_back(tr[static_cast<std::size_t>(t)]);
    }
  }
  res.error_total = opts.calib != nullptr
                        ? layer_error(weights, res.quantized, *opts.calib).total
                        : layer_error_from_hessian(weights, res.quantized, h);
  res.wall_time_ms =
      std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
  return res;
}

}  // namespace detail

/// Column-wise quantization of the whole layer with one shared H^-1 and a
/// static schedule derived from `strategy`.
inline LayerResult fastobq_quantize_layer(const Eigen::MatrixXd& weights, const Hessian& h,
                                          const QuantGrid& g, const OrderingStrategy& strategy,
                                          const QuantizeOptions& opts = {}) {
  return detail::fastobq_impl(weights, h, g, &strategy, nullptr, opts);
}

/// Same, with the column order given explicitly.
inline LayerResult fastobq_quantize_layer_ordered(const Eigen::MatrixXd& weights,
                                                  const Hessian& h, const QuantGrid& g,
                                                  const std::vector<Eigen::Index>& order,
                                                  const QuantizeOptions& opts = {}) {
  return detail::fastobq_impl(weights, h, g, nullptr, &order, opts);
}

}  // namespace fastobq
