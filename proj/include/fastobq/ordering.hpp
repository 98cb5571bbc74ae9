#pragma once

#include <algorithm>
#include <numeric>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Core>

#include "fastobq/error.hpp"

namespace fastobq {

enum class OrderKey { sensitivity, quant_error_magnitude, weight_magnitude, none };
enum class OrderDirection { descending, ascending };

/// Which quantity decides the quantization order, and in which direction.
/// Names follow the short form used on the command line: sensi_des,
/// err_asc, w_des, none.
struct OrderingStrategy {
  OrderKey key = OrderKey::sensitivity;
  OrderDirection direction = OrderDirection::descending;

  bool operator==(const OrderingStrategy& o) const {
    if (key == OrderKey::none || o.key == OrderKey::none) return key == o.key;
    return key == o.key && direction == o.direction;
  }
};

inline std::string to_string(const OrderingStrategy& s) {
  std::string out;
  switch (s.key) {
    case OrderKey::sensitivity: out = "sensi"; break;
    case OrderKey::quant_error_magnitude: out = "err"; break;
    case OrderKey::weight_magnitude: out = "w"; break;
    case OrderKey::none: return "none";
  }
  return out + (s.direction == OrderDirection::descending ? "_des" : "_asc");
}

inline OrderingStrategy parse_strategy(std::string_view text) {
  if (text == "none" || text.starts_with("none_")) return {OrderKey::none, OrderDirection::descending};
  const auto us = text.rfind('_');
  if (us == std::string_view::npos) {
    throw Error(ErrorCode::invalid_argument, "strategy must look like <key>_<des|asc>");
  }
  const auto key = text.substr(0, us);
  const auto dir = text.substr(us + 1);
  OrderingStrategy s;
  if (key == "sensi") {
    s.key = OrderKey::sensitivity;
  } else if (key == "err") {
    s.key = OrderKey::quant_error_magnitude;
  } else if (key == "w") {
    s.key = OrderKey::weight_magnitude;
  } else {
    throw Error(ErrorCode::invalid_argument, "unknown ordering key '" + std::string(key) + "'");
  }
  if (dir == "des") {
    s.direction = OrderDirection::descending;
  } else if (dir == "asc") {
    s.direction = OrderDirection::ascending;
  } else {
    throw Error(ErrorCode::invalid_argument, "unknown direction '" + std::string(dir) + "'");
  }
  return s;
}

/// Indices of `scores` sorted by direction; equal scores keep ascending
/// index order. `candidates` restricts the result to a subset (in any order).
inline std::vector<Eigen::Index> stable_order(std::span<const double> scores,
                                              OrderDirection direction,
                                              std::vector<Eigen::Index> candidates) {
  auto by_score = [&](Eigen::Index a, Eigen::Index b) {
    const double sa = scores[static_cast<std::size_t>(a)];
    const double sb = scores[static_cast<std::size_t>(b)];
    if (sa != sb) return direction == OrderDirection::descending ? sa > sb : sa < sb;
    return a < b;
  };
  std::sort(candidates.begin(), candidates.end(), by_score);
  return candidates;
}

inline std::vector<Eigen::Index> stable_order(std::span<const double> scores,
                                              OrderDirection direction) {
  std::vector<Eigen::Index> idx(scores.size());
  std::iota(idx.begin(), idx.end(), Eigen::Index{0});
  return stable_order(scores, direction, std::move(idx));
}

inline std::vector<Eigen::Index> identity_order(Eigen::Index n) {
  std::vector<Eigen::Index> idx(static_cast<std::size_t>(n));
  std::iota(idx.begin(), idx.end(), Eigen::Index{0});
  return idx;
}

/// Throws InvalidArgument unless `perm` is a bijection on [0, n).
inline void validate_permutation(std::span<const Eigen::Index> perm, Eigen::Index n) {
  if (static_cast<Eigen::Index>(perm.size()) != n) {
    throw Error(ErrorCode::invalid_argument, "permutation length differs from d_col");
  }
  std::vector<char> seen(static_cast<std::size_t>(n), 0);
  for (auto k : perm) {
    if (k < 0 || k >= n || seen[static_cast<std::size_t>(k)]) {
      throw Error(ErrorCode::invalid_argument, "not a permutation of the column indices");
    }
    seen[static_cast<std::size_t>(k)] = 1;
  }
}

}  // namespace fastobq
