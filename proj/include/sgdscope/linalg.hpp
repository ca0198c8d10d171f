#pragma once

// Dense symmetric linear algebra: Jacobi eigendecomposition, PSD square roots
// and the Lyapunov solve that gives stationary fluctuation covariances.

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "sgdscope/error.hpp"

namespace sgdscope {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

/// Dense symmetric matrix. Construction checks symmetry entrywise to
/// 1e-12 relative; use `symmetrized` when the input is only symmetric up to
/// accumulated rounding.
class SymMatrix {
 public:
  SymMatrix() = default;

  explicit SymMatrix(Matrix m) : m_(std::move(m)) {
    if (m_.rows() < 1 || m_.rows() != m_.cols()) {
      throw Error("linalg", "SymMatrix must be square with dim >= 1, got " +
                                std::to_string(m_.rows()) + "x" + std::to_string(m_.cols()));
    }
    for (Eigen::Index i = 0; i < m_.rows(); ++i) {
      for (Eigen::Index j = i + 1; j < m_.cols(); ++j) {
        const double a = m_(i, j);
        const double b = m_(j, i);
        if (!(std::abs(a - b) <= 1e-12 * std::max(1.0, std::abs(a)))) {
          std::ostringstream os;
          os << "matrix is not symmetric at (" << i << "," << j << "): " << a << " vs " << b;
          throw Error("linalg", os.str());
        }
      }
    }
  }

  static SymMatrix symmetrized(const Matrix& m) { return SymMatrix(Matrix(0.5 * (m + m.transpose()))); }
  static SymMatrix identity(Eigen::Index n) { return SymMatrix(Matrix::Identity(n, n)); }
  static SymMatrix zero(Eigen::Index n) { return SymMatrix(Matrix::Zero(n, n)); }
  static SymMatrix diagonal(const Vector& d) { return SymMatrix(Matrix(d.asDiagonal())); }

  Eigen::Index dim() const { return m_.rows(); }
  const Matrix& matrix() const { return m_; }
  double operator()(Eigen::Index i, Eigen::Index j) const { return m_(i, j); }

  friend SymMatrix operator*(double s, const SymMatrix& a) { return SymMatrix(Matrix(s * a.m_)); }
  friend SymMatrix operator+(const SymMatrix& a, const SymMatrix& b) { return SymMatrix(Matrix(a.m_ + b.m_)); }

 private:
  Matrix m_;
};

struct EigenDecomposition {
  Vector eigenvalues;   // ascending
  Matrix eigenvectors;  // columns, orthonormal
};

inline constexpr int kJacobiMaxSweeps = 100;

/// Cyclic Jacobi eigendecomposition. Eigenvalues come back ascending; each
/// eigenvector is sign-normalized so its first non-negligible component is
/// positive.
inline EigenDecomposition sym_eigendecompose(const SymMatrix& m, const std::string& name = "matrix") {
  const Eigen::Index n = m.dim();
  Matrix a = m.matrix();
  Matrix v = Matrix::Identity(n, n);
  const double norm = a.norm();
  const double tol = 1e-14 * norm;

  auto off_norm = [&] {
    double s = 0.0;
    for (Eigen::Index i = 0; i < n; ++i)
      for (Eigen::Index j = 0; j < n; ++j)
        if (i != j) s += a(i, j) * a(i, j);
    return std::sqrt(s);
  };

  bool converged = off_norm() <= tol;
  for (int sweep = 0; sweep < kJacobiMaxSweeps && !converged; ++sweep) {
    for (Eigen::Index p = 0; p < n - 1; ++p) {
      for (Eigen::Index q = p + 1; q < n; ++q) {
        const double apq = a(p, q);
        if (apq == 0.0) continue;
        const double app = a(p, p);
        const double aqq = a(q, q);
        // Entries below the rounding floor of both diagonals are dropped.
        const double g = 100.0 * std::abs(apq);
        if (sweep > 3 && std::abs(app) + g == std::abs(app) && std::abs(aqq) + g == std::abs(aqq)) {
          a(p, q) = a(q, p) = 0.0;
          continue;
        }
        const double theta = (aqq - app) / (2.0 * apq);
        const double t = (theta >= 0 ? 1.0 : -1.0) / (std::abs(theta) + std::sqrt(theta * theta + 1.0));
        const double c = 1.0 / std::sqrt(t * t + 1.0);
        const double s = t * c;
        for (Eigen::Index k = 0; k < n; ++k) {
          const double akp = a(k, p);
          const double akq = a(k, q);
          a(k, p) = c * akp - s * akq;
          a(k, q) = s * akp + c * akq;
        }
        for (Eigen::Index k = 0; k < n; ++k) {
          const double apk = a(p, k);
          const double aqk = a(q, k);
          a(p, k) = c * apk - s * aqk;
          a(q, k) = s * apk + c * aqk;
        }
        a(p, q) = a(q, p) = 0.0;
        for (Eigen::Index k = 0; k < n; ++k) {
          const double vkp = v(k, p);
          const double vkq = v(k, q);
          v(k, p) = c * vkp - s * vkq;
          v(k, q) = s * vkp + c * vkq;
        }
      }
    }
    converged = off_norm() <= tol;
  }
  if (!converged) {
    throw Error("linalg", "Jacobi eigensolver did not converge for " + name + " within " +
                              std::to_string(kJacobiMaxSweeps) + " sweeps");
  }

  std::vector<Eigen::Index> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), Eigen::Index{0});
  std::stable_sort(order.begin(), order.end(), [&](Eigen::Index i, Eigen::Index j) { return a(i, i) < a(j, j); });

  EigenDecomposition out{Vector(n), Matrix(n, n)};
  for (Eigen::Index k = 0; k < n; ++k) {
    const Eigen::Index src = order[static_cast<std::size_t>(k)];
    out.eigenvalues[k] = a(src, src);
    Vector col = v.col(src);
    for (Eigen::Index i = 0; i < n; ++i) {
      if (std::abs(col[i]) > 1e-12) {
        if (col[i] < 0) col = -col;
        break;
      }
    }
    out.eigenvectors.col(k) = col;
  }
  return out;
}

/// Spectral norm of a symmetric matrix from its eigenvalues.
inline double spectral_norm(const EigenDecomposition& e) {
  return std::max(std::abs(e.eigenvalues[0]), std::abs(e.eigenvalues[e.eigenvalues.size() - 1]));
}

/// Returns R = V·diag(λ)^{1/2} with R·Rᵀ = M. Eigenvalues in
/// [-1e-10·‖M‖₂, 0) are clamped to zero; anything more negative is an error.
inline Matrix sqrt_spd(const SymMatrix& m) {
  const EigenDecomposition e = sym_eigendecompose(m);
  const double floor = -1e-10 * spectral_norm(e);
  Vector root(m.dim());
  for (Eigen::Index i = 0; i < m.dim(); ++i) {
    const double lam = e.eigenvalues[i];
    if (lam < floor) {
      std::ostringstream os;
      os << std::setprecision(17) << "matrix not PSD: eigenvalue " << lam;
      throw NotPositiveDefiniteError(os.str(), lam);
    }
    root[i] = lam > 0.0 ? std::sqrt(lam) : 0.0;
  }
  return e.eigenvectors * root.asDiagonal();
}

/// Solves Γ·H + H·Γ = Q for symmetric positive definite H by diagonalizing H.
inline SymMatrix solve_lyapunov(const SymMatrix& h, const SymMatrix& q) {
  if (h.dim() != q.dim()) {
    throw Error("linalg", "solve_lyapunov: dimension mismatch " + std::to_string(h.dim()) + " vs " +
                              std::to_string(q.dim()));
  }
  const EigenDecomposition e = sym_eigendecompose(h, "Hessian");
  const double lam_min = e.eigenvalues[0];
  if (!(lam_min > 1e-12 * spectral_norm(e))) {
    std::ostringstream os;
    os << std::setprecision(17)
       << "Hessian not positive definite; stationary covariance undefined (min eigenvalue " << lam_min << ")";
    throw NotPositiveDefiniteError(os.str(), lam_min);
  }
  const Matrix& v = e.eigenvectors;
  Matrix qt = v.transpose() * q.matrix() * v;
  const Eigen::Index n = h.dim();
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = 0; j < n; ++j) qt(i, j) /= e.eigenvalues[i] + e.eigenvalues[j];
  return SymMatrix::symmetrized(v * qt * v.transpose());
}

inline double trace(const SymMatrix& m) { return m.matrix().trace(); }

/// Debug CSV: a `# dim=<n>` comment line followed by n comma-separated rows.
inline void write_matrix_csv(std::ostream& os, const Matrix& m) {
  os << "# dim=" << m.rows() << "\n" << std::setprecision(17);
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    for (Eigen::Index j = 0; j < m.cols(); ++j) os << (j ? "," : "") << m(i, j);
    os << "\n";
  }
}

inline Matrix read_matrix_csv(std::istream& is, const std::string& source = "matrix") {
  std::vector<std::vector<double>> rows;
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty() || line[0] == '#') continue;
    std::vector<double> row;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) {
      try {
        row.push_back(std::stod(cell));
      } catch (const std::exception&) {
        throw Error("linalg", source + ": bad matrix entry '" + cell + "'");
      }
    }
    rows.push_back(std::move(row));
  }
  if (rows.empty()) throw Error("linalg", source + ": empty matrix");
  Matrix m(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(rows[0].size()));
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i].size() != rows[0].size()) throw Error("linalg", source + ": ragged rows");
    for (std::size_t j = 0; j < rows[i].size(); ++j)
      m(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = rows[i][j];
  }
  return m;
}

inline Matrix read_matrix_csv_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error("linalg", "cannot open matrix file " + path);
  return read_matrix_csv(in, path);
}

}  // namespace sgdscope
