#include <gtest/gtest.h>

#include "modex/numerics.hpp"
#include "modex/rng.hpp"
#include "oracles.hpp"

using namespace modex;

namespace {

void expect_near(const Tensor& a, const Tensor& b, double tol) {
  ASSERT_EQ(a.rows(), b.rows());
  ASSERT_EQ(a.cols(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) EXPECT_NEAR(a(i, j), b(i, j), tol) << i << "," << j;
}

bool is_upper_triangular(const Tensor& r) {
  for (std::size_t i = 0; i < r.rows(); ++i)
    for (std::size_t j = 0; j < std::min(i, r.cols()); ++j)
      if (r(i, j) != 0.0) return false;
  return true;
}

}  // namespace

TEST(Matmul, IdentityLeavesMatrix) {
  const Tensor a = Tensor::from_rows({{1, 2}, {3, 4}});
  EXPECT_EQ(matmul(Tensor::identity(2), a), a);
}

TEST(Matmul, Cancellation) {
  const Tensor r = matmul(Tensor::from_rows({{1, 1}}), Tensor::from_rows({{1}, {-1}}));
  ASSERT_EQ(r.rows(), 1u);
  ASSERT_EQ(r.cols(), 1u);
  EXPECT_EQ(r(0, 0), 0.0);
}

TEST(Matmul, MatchesOuterProductOracle) {
  Rng rng(11);
  const Tensor a = random_normal(5, 3, rng);
  const Tensor b = random_normal(3, 2, rng);
  expect_near(matmul(a, b), oracle::matmul_outer(a, b), 1e-12);
}

TEST(Matmul, DimensionMismatchThrows) {
  EXPECT_THROW(matmul(Tensor(2, 3), Tensor(2, 3)), dimension_mismatch);
}

TEST(Matmul, Associativity) {
  Rng rng(12);
  for (int t = 0; t < 20; ++t) {
    const Tensor a = random_normal(6, 5, rng), b = random_normal(5, 7, rng), c = random_normal(7, 4, rng);
    EXPECT_LE(oracle::rel_frob(matmul(matmul(a, b), c), matmul(a, matmul(b, c))), 1e-9);
  }
}

TEST(Matmul, BitReproducible) {
  Rng rng(13);
  const Tensor a = random_normal(17, 9, rng), b = random_normal(9, 11, rng);
  EXPECT_EQ(matmul(a, b), matmul(a, b));
  expect_near(matmul_tn(a, a), matmul(transpose(a), a), 1e-12);
}

TEST(Qr, IdentityInput) {
  const auto [q, r] = qr_thin(Tensor::identity(3));
  expect_near(q, Tensor::identity(3), 1e-15);
  expect_near(r, Tensor::identity(3), 1e-15);
}

TEST(Qr, SingleColumn) {
  const auto [q, r] = qr_thin(Tensor::from_rows({{3}, {4}}));
  EXPECT_NEAR(q(0, 0), 0.6, 1e-15);
  EXPECT_NEAR(q(1, 0), 0.8, 1e-15);
  EXPECT_NEAR(r(0, 0), 5.0, 1e-14);
}

TEST(Qr, RandomReconstruction) {
  Rng rng(21);
  const Tensor a = random_normal(8, 4, rng);
  const auto [q, r] = qr_thin(a);
  EXPECT_LE(frobenius_norm(matmul(q, r) - a), 1e-9);
  EXPECT_LE(frobenius_norm(matmul_tn(q, q) - Tensor::identity(4)), 1e-10);
  EXPECT_TRUE(is_upper_triangular(r));
}

TEST(Qr, DependentColumnGivesZeroRow) {
  // Third column = first + second.
  Tensor a = Tensor::from_rows({{1, 0, 1}, {0, 1, 1}, {1, 1, 2}, {2, -1, 1}});
  const auto [q, r] = qr_thin(a);
  EXPECT_LE(frobenius_norm(matmul(q, r) - a), 1e-12);
  EXPECT_LE(frobenius_norm(matmul_tn(q, q) - Tensor::identity(3)), 1e-10);
  for (std::size_t j = 0; j < 3; ++j) EXPECT_EQ(r(2, j), 0.0);
}

TEST(Rank, ProportionalRows) { EXPECT_EQ(numeric_rank(Tensor::from_rows({{1, 2}, {2, 4}})), 1u); }

TEST(Rank, Identity) { EXPECT_EQ(numeric_rank(Tensor::identity(4)), 4u); }

TEST(Rank, ProductWithWideFactor) {
  Rng rng(31);
  for (int t = 0; t < 10; ++t) {
    const Tensor left = random_normal(12, 5, rng);
    const Tensor right = random_normal(5, 9, rng);
    EXPECT_EQ(numeric_rank(matmul(left, right)), numeric_rank(left));
    EXPECT_EQ(numeric_rank(left), 5u);
  }
}

TEST(Rank, RankNullityAndZero) {
  Rng rng(32);
  const Tensor x = matmul(random_normal(10, 3, rng), random_normal(3, 7, rng));
  EXPECT_EQ(numeric_rank(x) + numeric_nullity(x), x.cols());
  EXPECT_EQ(numeric_rank(x), 3u);
  EXPECT_EQ(numeric_rank(Tensor(4, 3)), 0u);
  EXPECT_EQ(numeric_nullity(Tensor(4, 3)), 3u);
}

TEST(SingularValues, MatchEigenOracle) {
  Rng rng(33);
  const Tensor a = random_normal(9, 6, rng);
  const auto sv = singular_values(a);
  const auto ref = oracle::singular_values_eig(a);
  ASSERT_EQ(sv.size(), ref.size());
  for (std::size_t i = 0; i < sv.size(); ++i) EXPECT_NEAR(sv[i], ref[i], 1e-8 * ref[0]);
  EXPECT_NEAR(spectral_norm(a), ref[0], 1e-8 * ref[0]);
  // Wide input gives the same spectrum.
  const auto svt = singular_values(transpose(a));
  for (std::size_t i = 0; i < sv.size(); ++i) EXPECT_NEAR(svt[i], sv[i], 1e-10 * sv[0]);
}

TEST(Projector, AxisCase) {
  const Tensor p = orth_complement_projector(Tensor::from_rows({{1}, {0}}));
  expect_near(p, Tensor::from_rows({{0, 0}, {0, 1}}), 1e-15);
  const Tensor e2 = Tensor::from_rows({{0}, {1}});
  expect_near(matmul(p, e2), e2, 1e-15);
}

TEST(Projector, FullSpanIsZero) {
  Rng rng(41);
  const Tensor p = orth_complement_projector(random_normal(3, 3, rng));
  EXPECT_LE(max_abs(p), 1e-12);
}

TEST(Projector, EmptySpanIsIdentity) {
  expect_near(orth_complement_projector(Tensor(4, 0)), Tensor::identity(4), 0.0);
}

TEST(Projector, RandomAnnihilatesColumns) {
  Rng rng(42);
  for (int t = 0; t < 10; ++t) {
    const Tensor a = random_normal(10, 3, rng);
    const Tensor p = orth_complement_projector(a);
    EXPECT_LE(max_abs(matmul(p, a)), 1e-9);
    EXPECT_LE(frobenius_norm(matmul(p, p) - p), 1e-8);
    EXPECT_LE(frobenius_norm(p - transpose(p)), 1e-12);
  }
}

TEST(Cholesky, FactorsAndInverts) {
  Rng rng(51);
  const Tensor x = random_normal(20, 6, rng);
  const Tensor h = matmul_tn(x, x);
  const Tensor l = cholesky_lower(h);
  EXPECT_LE(oracle::rel_frob(matmul(l, transpose(l)), h), 1e-12);
  EXPECT_LE(frobenius_norm(matmul(spd_inverse(h), h) - Tensor::identity(6)), 1e-9);
  EXPECT_LE(frobenius_norm(matmul(lower_triangular_inverse(l), l) - Tensor::identity(6)), 1e-10);
}

TEST(Cholesky, SingularThrows) {
  EXPECT_THROW(cholesky_lower(Tensor::from_rows({{1, 2}, {2, 4}})), cholesky_failure);
}

TEST(Solve, MatchesInverse) {
  Rng rng(52);
  const Tensor a = random_normal(5, 5, rng);
  const Tensor b = random_normal(5, 3, rng);
  const Tensor x = solve(a, b);
  EXPECT_LE(oracle::rel_frob(matmul(a, x), b), 1e-10);
}
