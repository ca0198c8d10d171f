#pragma once

// Test-only oracles. These deliberately avoid the library's own solvers.

#include <cmath>
#include <functional>

#include <Eigen/Dense>

#include "sgdscope/linalg.hpp"
#include "sgdscope/problems.hpp"
#include "sgdscope/rng.hpp"

namespace oracle {

using sgdscope::Matrix;
using sgdscope::Vector;

/// A·Aᵀ + eps·I with A standard normal.
inline sgdscope::SymMatrix random_spd(sgdscope::Rng& rng, Eigen::Index n, double eps) {
  Matrix a(n, n);
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = 0; j < n; ++j) a(i, j) = rng.normal();
  return sgdscope::SymMatrix::symmetrized(a * a.transpose() + eps * Matrix::Identity(n, n));
}

/// Solves ΓH + HΓ = Q as the n²×n² system (H⊗I + I⊗H)·vec(Γ) = vec(Q) by
/// dense LU elimination.
inline Matrix lyapunov_kronecker(const Matrix& h, const Matrix& q) {
  const Eigen::Index n = h.rows();
  Matrix k = Matrix::Zero(n * n, n * n);
  const Matrix id = Matrix::Identity(n, n);
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = 0; j < n; ++j)
      for (Eigen::Index a = 0; a < n; ++a)
        for (Eigen::Index b = 0; b < n; ++b) k(i * n + a, j * n + b) = h(i, j) * id(a, b) + id(i, j) * h(a, b);
  const Eigen::VectorXd rhs = Eigen::Map<const Eigen::VectorXd>(q.data(), n * n);
  const Eigen::VectorXd x = k.partialPivLu().solve(rhs);
  return Eigen::Map<const Matrix>(x.data(), n, n);
}

/// Central finite-difference gradient of a scalar function.
inline Eigen::VectorXd fd_gradient(const std::function<double(const Eigen::VectorXd&)>& f, const Eigen::VectorXd& x,
                                   double h = 1e-5) {
  Eigen::VectorXd g(x.size());
  Eigen::VectorXd xp = x, xm = x;
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    xp[i] = x[i] + h;
    xm[i] = x[i] - h;
    g[i] = (f(xp) - f(xm)) / (2 * h);
    xp[i] = xm[i] = x[i];
  }
  return g;
}

/// Central difference of one gradient coordinate.
inline double fd_partial(const std::function<double(const Eigen::VectorXd&)>& f, const Eigen::VectorXd& x,
                         Eigen::Index i, double h = 1e-5) {
  Eigen::VectorXd xp = x, xm = x;
  xp[i] += h;
  xm[i] -= h;
  return (f(xp) - f(xm)) / (2 * h);
}

/// Second-order central difference for one Hessian entry.
inline double fd_hessian_entry(const std::function<double(const Eigen::VectorXd&)>& f, const Eigen::VectorXd& x,
                               Eigen::Index i, Eigen::Index j, double h = 1e-4) {
  auto at = [&](double si, double sj) {
    Eigen::VectorXd y = x;
    y[i] += si * h;
    y[j] += sj * h;
    return f(y);
  };
  return (at(1, 1) - at(1, -1) - at(-1, 1) + at(-1, -1)) / (4 * h * h);
}

/// Population covariance of column samples.
inline Matrix sample_covariance(const Matrix& cols) {
  const Eigen::VectorXd mean = cols.rowwise().mean();
  const Matrix c = cols.colwise() - mean;
  return c * c.transpose() / static_cast<double>(cols.cols());
}

}  // namespace oracle
