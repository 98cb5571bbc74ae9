#include <algorithm>
#include <numeric>
#include <random>

#include <gtest/gtest.h>

#include "fastobq/linalg.hpp"
#include "oracles.hpp"

using namespace fastobq;

namespace {

Hessian random_hessian(std::size_t d, std::size_t n, double damping, std::mt19937_64& rng) {
  const auto x = oracle::random_mat(d, n, rng);
  return build_hessian(oracle::to_eigen(x), damping);
}

std::vector<std::size_t> live_of(const InverseHessian& h) {
  std::vector<std::size_t> keep;
  for (auto i : h.live_indices()) keep.push_back(static_cast<std::size_t>(i));
  return keep;
}

double live_block_error(const InverseHessian& hinv, const Hessian& h) {
  const auto keep = live_of(hinv);
  if (keep.empty()) return 0.0;
  const auto expect = oracle::inverse_of_submatrix(oracle::from_eigen(h.values), keep);
  double m = 0.0;
  for (std::size_t i = 0; i < keep.size(); ++i) {
    for (std::size_t j = 0; j < keep.size(); ++j) {
      m = std::max(m, std::abs(hinv(keep[i], keep[j]) - expect[i][j]));
    }
  }
  return m;
}

}  // namespace

TEST(BuildHessian, IdentityCalibration) {
  const Eigen::MatrixXd x = Eigen::MatrixXd::Identity(2, 2);
  const auto h0 = build_hessian(x, 0.0);
  EXPECT_TRUE(h0.values.isApprox(2.0 * Eigen::MatrixXd::Identity(2, 2)));
  const auto h1 = build_hessian(x, 0.1);
  EXPECT_DOUBLE_EQ(h1.values(0, 0), 2.1);
  EXPECT_DOUBLE_EQ(h1.values(1, 1), 2.1);
  EXPECT_DOUBLE_EQ(h1.values(0, 1), 0.0);
  EXPECT_DOUBLE_EQ(h1.damping_applied, 0.1);
}

TEST(BuildHessian, MatchesTripleLoopAndIsExactlySymmetric) {
  std::mt19937_64 rng(7);
  for (int trial = 0; trial < 10; ++trial) {
    const auto x = oracle::random_mat(8, 32, rng);
    const auto h = build_hessian(oracle::to_eigen(x), 0.1);
    const auto expect = oracle::naive_hessian(x, 0.1);
    EXPECT_LE(oracle::max_abs_diff(oracle::from_eigen(h.values), expect), 1e-12);
    EXPECT_EQ((h.values - h.values.transpose()).cwiseAbs().maxCoeff(), 0.0);
  }
}

TEST(BuildHessian, RelativeDamping) {
  const Eigen::MatrixXd x = Eigen::MatrixXd::Identity(3, 3) * 2.0;  // diag(2XX^T) = 8
  const auto h = build_hessian(x, 0.01, DampingMode::relative);
  EXPECT_DOUBLE_EQ(h.damping_applied, 0.08);
  EXPECT_DOUBLE_EQ(h.values(1, 1), 8.08);
}

TEST(BuildHessian, Errors) {
  Eigen::MatrixXd x = Eigen::MatrixXd::Ones(2, 3);
  x(1, 2) = std::numeric_limits<double>::quiet_NaN();
  try {
    build_hessian(x, 0.1);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::non_finite);
  }
  try {
    build_hessian(Eigen::MatrixXd(2, 0), 0.1);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::empty_calibration);
  }
}

TEST(InvertSpd, DiagonalInverse) {
  Hessian h{2.0 * Eigen::MatrixXd::Identity(3, 3), 0.0};
  const auto inv = invert_spd(h);
  EXPECT_TRUE(inv.values().isApprox(0.5 * Eigen::MatrixXd::Identity(3, 3)));
  EXPECT_EQ(inv.live_count(), 3);
}

TEST(InvertSpd, ResidualAgainstGaussJordan) {
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 10; ++trial) {
    const auto h = random_hessian(32, 48, 0.1, rng);
    const auto inv = invert_spd(h);
    const Eigen::MatrixXd resid = h.values * inv.values() - Eigen::MatrixXd::Identity(32, 32);
    EXPECT_LE(resid.cwiseAbs().maxCoeff(), 1e-8);
    const auto gj = oracle::gauss_jordan_inverse(oracle::from_eigen(h.values));
    EXPECT_LE(oracle::max_abs_diff(oracle::from_eigen(inv.values()), gj), 1e-8);
  }
}

TEST(InvertSpd, RankDeficientFails) {
  Eigen::MatrixXd x(2, 1);
  x << 1.0, 1.0;
  const auto h = build_hessian(x, 0.0);
  try {
    invert_spd(h);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::not_positive_definite);
  }
  // Random rank-deficient Gram (N < d_col) with no damping.
  std::mt19937_64 rng(3);
  const auto hr = random_hessian(16, 4, 0.0, rng);
  EXPECT_THROW(invert_spd(hr), Error);
}

TEST(Downdate, IdentityCase) {
  InverseHessian inv(Eigen::MatrixXd::Identity(3, 3));
  inv = downdate_inverse(inv, 0);
  EXPECT_FALSE(inv.is_live(0));
  EXPECT_EQ(inv.values().row(0).cwiseAbs().maxCoeff(), 0.0);
  EXPECT_EQ(inv.values().col(0).cwiseAbs().maxCoeff(), 0.0);
  EXPECT_TRUE(inv.values().bottomRightCorner(2, 2).isIdentity());
}

TEST(Downdate, MatchesInverseOfDeletedSubmatrix) {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 8; ++trial) {
    const auto h = random_hessian(16, 24, 0.1, rng);
    for (Eigen::Index k = 0; k < 16; ++k) {
      auto inv = downdate_inverse(invert_spd(h), k);
      EXPECT_LE(live_block_error(inv, h), 1e-8);
    }
  }
}

TEST(Downdate, ExhaustionLeavesZeroMatrix) {
  std::mt19937_64 rng(9);
  const auto h = random_hessian(10, 20, 0.1, rng);
  auto inv = invert_spd(h);
  std::vector<Eigen::Index> order(10);
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);
  for (auto k : order) inv.downdate(k);
  EXPECT_EQ(inv.values().cwiseAbs().maxCoeff(), 0.0);
  EXPECT_EQ(inv.live_count(), 0);
}

TEST(Downdate, Errors) {
  InverseHessian inv(Eigen::MatrixXd::Identity(2, 2));
  inv.downdate(1);
  try {
    inv.downdate(1);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::dead_index);
  }
  Eigen::MatrixXd tiny = Eigen::MatrixXd::Identity(2, 2);
  tiny(0, 0) = 1e-14;
  InverseHessian sing(tiny);
  try {
    sing.downdate(0);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::singular_pivot);
  }
}

// Iterated downdates agree with direct inversion of the surviving block,
// whatever the removal sequence; live diagonals stay positive.
TEST(DowndateProperty, SchurIdentityOverRandomSequences) {
  std::mt19937_64 rng(21);
  for (int trial = 0; trial < 20; ++trial) {
    std::uniform_int_distribution<std::size_t> dim(2, 64);
    const std::size_t d = dim(rng);
    const auto h = random_hessian(d, d + 4, 0.1, rng);
    auto inv = invert_spd(h);
    std::vector<Eigen::Index> order(d);
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t s = 0; s + 1 < d; ++s) {
      inv.downdate(order[s]);
      for (auto j : inv.live_indices()) ASSERT_GT(inv.diag(j), 0.0);
      if (s % 7 == 0) ASSERT_LE(live_block_error(inv, h), 1e-8) << "d=" << d << " step " << s;
    }
  }
}

TEST(DowndateProperty, OrderIndependenceOfSurvivingBlock) {
  std::mt19937_64 rng(33);
  for (int trial = 0; trial < 20; ++trial) {
    const auto h = random_hessian(12, 20, 0.1, rng);
    std::uniform_int_distribution<Eigen::Index> pick(0, 11);
    const Eigen::Index a = pick(rng);
    Eigen::Index b = pick(rng);
    while (b == a) b = pick(rng);
    auto ab = invert_spd(h);
    ab.downdate(a);
    ab.downdate(b);
    auto ba = invert_spd(h);
    ba.downdate(b);
    ba.downdate(a);
    EXPECT_LE((ab.values() - ba.values()).cwiseAbs().maxCoeff(), 1e-10);
  }
}

TEST(HinvCounter, TracksCopiesAndPeak) {
  HinvCounter counter;
  {
    InverseHessian a(Eigen::MatrixXd::Identity(4, 4), &counter);
    InverseHessian b = a;
    InverseHessian c = std::move(b);
    EXPECT_EQ(counter.live(), 2u);
  }
  EXPECT_EQ(counter.live(), 0u);
  EXPECT_EQ(counter.peak(), 2u);
  EXPECT_EQ(counter.peak_bytes(), 2u * 16u * sizeof(double));
}
