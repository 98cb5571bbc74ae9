#pragma once

/**
 * @file grid.hpp
 * @brief Uniform quantization grids.
 *
 *   symmetric : codes in [-(2^(b-1)-1), 2^(b-1)-1], zp = 0, D = max|w| / qmax
 *   asymmetric: codes in [0, 2^b - 1],              D = (hi - lo) / (2^b - 1),
 *               zp = round(-lo / D), with [lo, hi] the row range widened to
 *               contain 0
 *
 *   quant(w) = D * (clamp(round(w / D + zp), qmin, qmax) - zp)
 *
 * Rounding is round-half-to-even. Grids are fit once on the original
 * weights and never re-fit while a quantizer runs.
 */

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Core>
#include <json.hpp>

#include "fastobq/error.hpp"

namespace fastobq {

enum class GridScheme { symmetric, asymmetric };
enum class GridGranularity { per_row, per_tensor };

inline std::string_view to_string(GridScheme s) {
  return s == GridScheme::symmetric ? "sym" : "asym";
}

inline GridScheme parse_scheme(std::string_view s) {
  if (s == "sym" || s == "symmetric") return GridScheme::symmetric;
  if (s == "asym" || s == "asymmetric") return GridScheme::asymmetric;
  throw Error(ErrorCode::invalid_argument, "unknown grid scheme '" + std::string(s) + "'");
}

struct QuantGrid {
  int bits = 4;
  GridScheme scheme = GridScheme::symmetric;
  std::vector<double> scales;            // one per row
  std::vector<std::int32_t> zero_points;  // one per row; 0 for symmetric
  std::int32_t qmin = 0;
  std::int32_t qmax = 0;

  Eigen::Index rows() const { return static_cast<Eigen::Index>(scales.size()); }

  double scale(Eigen::Index row) const { return scales[static_cast<std::size_t>(row)]; }
  std::int32_t zero_point(Eigen::Index row) const {
    return zero_points[static_cast<std::size_t>(row)];
  }

  /// Integer code for w on the given row.
  std::int32_t code(double w, Eigen::Index row) const {
    const double scaled = w / scale(row) + zero_point(row);
    const double r = std::nearbyint(scaled);  // FE_TONEAREST: ties to even
    return static_cast<std::int32_t>(std::clamp(r, double(qmin), double(qmax)));
  }

  double dequantize(std::int32_t code, Eigen::Index row) const {
    return scale(row) * static_cast<double>(code - zero_point(row));
  }

  bool operator==(const QuantGrid&) const = default;
};

inline double quantize_value(double w, Eigen::Index row, const QuantGrid& g) {
  return g.dequantize(g.code(w, row), row);
}

/// Signed error quant(w) - w.
inline double quant_error(double w, Eigen::Index row, const QuantGrid& g) {
  return quantize_value(w, row, g) - w;
}

inline std::int32_t symmetric_qmax(int bits) { return (std::int32_t{1} << (bits - 1)) - 1; }

inline QuantGrid fit_grid(const Eigen::MatrixXd& weights, int bits,
                          GridScheme scheme = GridScheme::symmetric,
                          GridGranularity granularity = GridGranularity::per_row) {
  if (bits < 2 || bits > 8) {
    throw Error(ErrorCode::invalid_argument, "bits must be in [2, 8], got " + std::to_string(bits));
  }
  if (weights.rows() == 0 || weights.cols() == 0) {
    throw Error(ErrorCode::invalid_argument, "empty weight matrix");
  }
  if (!weights.allFinite()) throw Error(ErrorCode::non_finite, "NaN/Inf in weights");

  QuantGrid g;
  g.bits = bits;
  g.scheme = scheme;
  const auto rows = static_cast<std::size_t>(weights.rows());
  g.scales.assign(rows, 1.0);
  g.zero_points.assign(rows, 0);

  const std::int32_t sym_max = symmetric_qmax(bits);
  if (scheme == GridScheme::symmetric) {
    g.qmin = -sym_max;
    g.qmax = sym_max;
  } else {
    g.qmin = 0;
    g.qmax = (std::int32_t{1} << bits) - 1;
  }

  auto fit_range = [&](double lo, double hi, std::size_t r) {
    if (scheme == GridScheme::symmetric) {
      const double amax = std::max(std::abs(lo), std::abs(hi));
      g.scales[r] = amax > 0.0 ? amax / sym_max : 1.0;
      return;
    }
    if (hi == lo) {
      // Constant row: symmetric fit placed in the middle of the code range.
      const double amax = std::abs(lo);
      g.scales[r] = amax > 0.0 ? amax / sym_max : 1.0;
      g.zero_points[r] = sym_max + 1;
      return;
    }
    const double l = std::min(lo, 0.0);
    const double h = std::max(hi, 0.0);
    g.scales[r] = (h - l) / g.qmax;
    const double zp = std::nearbyint(-l / g.scales[r]);
    g.zero_points[r] = static_cast<std::int32_t>(std::clamp(zp, double(g.qmin), double(g.qmax)));
  };

  if (granularity == GridGranularity::per_tensor) {
    const double lo = weights.minCoeff();
    const double hi = weights.maxCoeff();
    fit_range(lo, hi, 0);
    for (std::size_t r = 1; r < rows; ++r) {
      g.scales[r] = g.scales[0];
      g.zero_points[r] = g.zero_points[0];
    }
  } else {
    for (std::size_t r = 0; r < rows; ++r) {
      const auto row = weights.row(static_cast<Eigen::Index>(r));
      fit_range(row.minCoeff(), row.maxCoeff(), r);
    }
  }
  return g;
}

inline nlohmann::json grid_to_json(const QuantGrid& g) {
  return {{"bits", g.bits},
          {"scheme", std::string(to_string(g.scheme))},
          {"qmin", g.qmin},
          {"qmax", g.qmax},
          {"scales", g.scales},
          {"zero_points", g.zero_points}};
}

}  // namespace fastobq
