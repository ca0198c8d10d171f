#include <gtest/gtest.h>

#include <cmath>
#include <sstream>

#include "oracles.hpp"
#include "sgdscope/linalg.hpp"

using namespace sgdscope;

namespace {

double rel_frob(const Matrix& a, const Matrix& b) { return (a - b).norm() / std::max(1.0, b.norm()); }

void expect_valid_decomposition(const SymMatrix& m, const EigenDecomposition& e) {
  const Eigen::Index n = m.dim();
  const Matrix recon = e.eigenvectors * e.eigenvalues.asDiagonal() * e.eigenvectors.transpose();
  EXPECT_LE((recon - m.matrix()).norm(), 1e-10 * std::max(1.0, m.matrix().norm()));
  EXPECT_LE((e.eigenvectors.transpose() * e.eigenvectors - Matrix::Identity(n, n)).norm(), 1e-10);
  for (Eigen::Index i = 1; i < n; ++i) EXPECT_LE(e.eigenvalues[i - 1], e.eigenvalues[i]);
}

}  // namespace

TEST(SymMatrix, RejectsAsymmetricInput) {
  Matrix m(2, 2);
  m << 1, 2, 3, 4;
  EXPECT_THROW(SymMatrix{m}, Error);
  EXPECT_THROW(SymMatrix{Matrix(2, 3)}, Error);
}

TEST(SymMatrix, ToleratesRoundingLevelAsymmetry) {
  Matrix m(2, 2);
  m << 1, 0.5, 0.5 + 1e-14, 2;
  EXPECT_NO_THROW(SymMatrix{m});
}

TEST(Eigendecompose, Identity) {
  const auto e = sym_eigendecompose(SymMatrix::identity(2));
  EXPECT_DOUBLE_EQ(e.eigenvalues[0], 1.0);
  EXPECT_DOUBLE_EQ(e.eigenvalues[1], 1.0);
  EXPECT_LE((e.eigenvectors - Matrix::Identity(2, 2)).norm(), 1e-15);
}

TEST(Eigendecompose, DiagonalIsSortedAscending) {
  const auto e = sym_eigendecompose(SymMatrix::diagonal(Vector{{3.0, 1.0}}));
  EXPECT_DOUBLE_EQ(e.eigenvalues[0], 1.0);
  EXPECT_DOUBLE_EQ(e.eigenvalues[1], 3.0);
  EXPECT_NEAR(std::abs(e.eigenvectors(1, 0)), 1.0, 1e-15);
  EXPECT_NEAR(std::abs(e.eigenvectors(0, 1)), 1.0, 1e-15);
}

TEST(Eigendecompose, TwoByTwoHandSolved) {
  // det([[2-λ,1],[1,2-λ]]) = (2-λ)² - 1 → λ = 1, 3.
  Matrix m(2, 2);
  m << 2, 1, 1, 2;
  const SymMatrix s(m);
  const auto e = sym_eigendecompose(s);
  EXPECT_NEAR(e.eigenvalues[0], 1.0, 1e-14);
  EXPECT_NEAR(e.eigenvalues[1], 3.0, 1e-14);
  const double r = 1.0 / std::sqrt(2.0);
  EXPECT_NEAR(e.eigenvectors(0, 0), r, 1e-14);
  EXPECT_NEAR(e.eigenvectors(1, 0), -r, 1e-14);
  EXPECT_NEAR(e.eigenvectors(0, 1), r, 1e-14);
  EXPECT_NEAR(e.eigenvectors(1, 1), r, 1e-14);
  expect_valid_decomposition(s, e);
}

TEST(Eigendecompose, RandomSymmetricMatricesReconstruct) {
  Rng rng(11);
  for (int trial = 0; trial < 30; ++trial) {
    const Eigen::Index n = 1 + static_cast<Eigen::Index>(rng.index(60));
    Matrix a(n, n);
    for (Eigen::Index i = 0; i < n; ++i)
      for (Eigen::Index j = 0; j < n; ++j) a(i, j) = rng.normal();
    const SymMatrix s = SymMatrix::symmetrized(a);
    expect_valid_decomposition(s, sym_eigendecompose(s));
  }
}

TEST(Eigendecompose, ZeroMatrix) {
  const auto e = sym_eigendecompose(SymMatrix::zero(3));
  EXPECT_EQ(e.eigenvalues, Vector::Zero(3));
}

TEST(SqrtSpd, IdentityAndDiagonal) {
  EXPECT_LE((sqrt_spd(SymMatrix::identity(3)) - Matrix::Identity(3, 3)).norm(), 1e-15);
  const Matrix r = sqrt_spd(SymMatrix::diagonal(Vector{{4.0, 9.0}}));
  EXPECT_LE((r * r.transpose() - Matrix(Vector{{4.0, 9.0}}.asDiagonal())).norm(), 1e-12);
  EXPECT_NEAR(std::abs(r(0, 0)), 2.0, 1e-15);
  EXPECT_NEAR(std::abs(r(1, 1)), 3.0, 1e-15);
}

TEST(SqrtSpd, TwoByTwoReconstructs) {
  Matrix m(2, 2);
  m << 2, 1, 1, 2;
  const Matrix r = sqrt_spd(SymMatrix(m));
  EXPECT_LE((r * r.transpose() - m).norm(), 1e-10);
}

TEST(SqrtSpd, RandomSpdUpToDim50) {
  Rng rng(5);
  for (Eigen::Index n : {1, 2, 7, 20, 50}) {
    const SymMatrix s = oracle::random_spd(rng, n, 1e-3);
    const Matrix r = sqrt_spd(s);
    EXPECT_LE(rel_frob(r * r.transpose(), s.matrix()), 1e-8) << "n=" << n;
  }
}

TEST(SqrtSpd, ClampsRoundingNegativesAndRejectsRealOnes) {
  EXPECT_NO_THROW(sqrt_spd(SymMatrix::diagonal(Vector{{1.0, -1e-12}})));
  try {
    sqrt_spd(SymMatrix::diagonal(Vector{{1.0, -0.5}}));
    FAIL() << "expected NotPositiveDefiniteError";
  } catch (const NotPositiveDefiniteError& e) {
    EXPECT_DOUBLE_EQ(e.eigenvalue(), -0.5);
    EXPECT_NE(std::string(e.what()).find("not PSD"), std::string::npos);
  }
}

TEST(Lyapunov, IdentityCase) {
  const SymMatrix g = solve_lyapunov(SymMatrix::identity(3), 2.0 * SymMatrix::identity(3));
  EXPECT_LE((g.matrix() - Matrix::Identity(3, 3)).norm(), 1e-14);
}

TEST(Lyapunov, DiagonalCase) {
  const SymMatrix g = solve_lyapunov(SymMatrix::diagonal(Vector{{1.0, 2.0}}), SymMatrix::diagonal(Vector{{2.0, 8.0}}));
  EXPECT_NEAR(g(0, 0), 1.0, 1e-14);
  EXPECT_NEAR(g(1, 1), 2.0, 1e-14);
  EXPECT_NEAR(g(0, 1), 0.0, 1e-14);
}

TEST(Lyapunov, MatchesKroneckerOracleOnTwoByTwo) {
  Matrix h(2, 2);
  h << 2, 1, 1, 2;
  const SymMatrix hs(h);
  const SymMatrix q = SymMatrix::identity(2);
  const Matrix expected = oracle::lyapunov_kronecker(h, q.matrix());
  const SymMatrix g = solve_lyapunov(hs, q);
  for (Eigen::Index i = 0; i < 2; ++i)
    for (Eigen::Index j = 0; j < 2; ++j) EXPECT_NEAR(g(i, j), expected(i, j), 1e-10);
  // Frozen: the oracle gives [[1/3, -1/6], [-1/6, 1/3]].
  EXPECT_NEAR(expected(0, 0), 1.0 / 3.0, 1e-14);
  EXPECT_NEAR(expected(0, 1), -1.0 / 6.0, 1e-14);
}

TEST(Lyapunov, RejectsIndefiniteHessian) {
  try {
    solve_lyapunov(SymMatrix::diagonal(Vector{{1.0, -1.0}}), SymMatrix::identity(2));
    FAIL();
  } catch (const NotPositiveDefiniteError& e) {
    EXPECT_NE(std::string(e.what()).find("stationary covariance undefined"), std::string::npos);
  }
  EXPECT_THROW(solve_lyapunov(SymMatrix::diagonal(Vector{{1.0, 0.0}}), SymMatrix::identity(2)),
               NotPositiveDefiniteError);
}

TEST(Lyapunov, RandomPairsMatchOracleAndTraceIdentities) {
  Rng rng(2024);
  for (int trial = 0; trial < 40; ++trial) {
    const Eigen::Index n = 1 + static_cast<Eigen::Index>(rng.index(20));
    const SymMatrix h = oracle::random_spd(rng, n, 0.1);
    const SymMatrix q = oracle::random_spd(rng, n, 0.1);
    const SymMatrix g = solve_lyapunov(h, q);
    const Matrix& gm = g.matrix();
    const Matrix& hm = h.matrix();
    const Matrix& qm = q.matrix();
    EXPECT_LT((gm * hm + hm * gm - qm).norm(), 1e-10 * qm.norm());
    EXPECT_LE((gm - oracle::lyapunov_kronecker(hm, qm)).cwiseAbs().maxCoeff(), 1e-9);
    // tr(HΓ) = ½tr(Q) and tr(H²Γ) = ½tr(QH).
    EXPECT_NEAR((hm * gm).trace(), 0.5 * qm.trace(), 1e-10 * qm.trace());
    const double rhs = 0.5 * (qm * hm).trace();
    EXPECT_NEAR((hm * hm * gm).trace(), rhs, 1e-10 * std::abs(rhs));
    // Γ is PD when Q is.
    EXPECT_GT(sym_eigendecompose(g).eigenvalues[0], 0.0);
  }
}

TEST(Trace, Examples) {
  EXPECT_DOUBLE_EQ(trace(SymMatrix::identity(3)), 3.0);
  EXPECT_DOUBLE_EQ(trace(SymMatrix::diagonal(Vector{{1.0, 2.0, 3.0}})), 6.0);
  Matrix m(2, 2);
  m << 2, 1, 1, 2;
  EXPECT_DOUBLE_EQ(trace(SymMatrix(m)), 4.0);
}

TEST(MatrixCsv, WritesDimHeaderAndReadsBack) {
  Matrix m(2, 2);
  m << 0.1, 2, 2, -3.5;
  std::stringstream ss;
  write_matrix_csv(ss, m);
  EXPECT_EQ(ss.str().substr(0, 8), "# dim=2\n");
  EXPECT_EQ(read_matrix_csv(ss), m);
}
