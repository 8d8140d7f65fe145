#pragma once

// Dense kernels: symmetric tridiagonal eigensolver, Householder reduction,
// block orthonormalization and the dense eigendecomposition oracle.

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "hspec/error.hpp"

namespace hspec {

using Eigen::Index;
using Eigen::MatrixXd;
using Eigen::VectorXd;

/// Symmetric tridiagonal matrix: alpha on the diagonal, beta on both off-diagonals.
struct TridiagonalMatrix {
  std::vector<double> alpha;
  std::vector<double> beta;  // size alpha.size() - 1, entries >= 0

  Index size() const { return static_cast<Index>(alpha.size()); }

  void validate() const {
    if (alpha.empty()) throw UsageError("tridiagonal matrix must have at least one row");
    if (beta.size() + 1 != alpha.size())
      throw UsageError("tridiagonal matrix needs exactly M-1 off-diagonal entries");
    for (double b : beta)
      if (!(b >= 0.0)) throw UsageError("tridiagonal off-diagonal entries must be >= 0");
  }

  MatrixXd dense() const {
    const Index m = size();
    MatrixXd t = MatrixXd::Zero(m, m);
    for (Index i = 0; i < m; ++i) t(i, i) = alpha[i];
    for (Index i = 0; i + 1 < m; ++i) t(i, i + 1) = t(i + 1, i) = beta[i];
    return t;
  }
};

/// Eigenvalues ascending, the first component of every unit eigenvector and,
/// when requested, the eigenvectors as columns.
struct EigenPairs {
  VectorXd values;
  VectorXd first_components;
  std::optional<MatrixXd> vectors;
};

/// Per-eigenvalue implicit QL sweep cap.
inline constexpr int kTridiagonalMaxSweeps = 60;

/// Implicit-shift QL with Wilkinson-type shifts. With want_vectors=false only
/// the first row of the accumulated rotation product is kept (O(M) memory).
inline EigenPairs eig_tridiagonal(const TridiagonalMatrix& t, bool want_vectors = false) {
  t.validate();
  const Index n = t.size();
  std::vector<double> d = t.alpha;
  std::vector<double> e(n, 0.0);
  for (Index i = 0; i + 1 < n; ++i) e[i] = t.beta[i];

  // z holds either the full rotation product or only its first row
  const Index rows = want_vectors ? n : 1;
  MatrixXd z = MatrixXd::Identity(rows, n);

  const double eps = std::numeric_limits<double>::epsilon();
  for (Index l = 0; l < n; ++l) {
    int sweeps = 0;
    Index m;
    do {
      for (m = l; m + 1 < n; ++m) {
        const double dd = std::abs(d[m]) + std::abs(d[m + 1]);
        if (std::abs(e[m]) <= eps * dd) break;
      }
      if (m == l) break;
      if (++sweeps > kTridiagonalMaxSweeps)
        throw NumericalError("eig_tridiagonal: no convergence for eigenvalue " + std::to_string(l) +
                             " after " + std::to_string(kTridiagonalMaxSweeps) + " sweeps");
      double g = (d[l + 1] - d[l]) / (2.0 * e[l]);
      double r = std::hypot(g, 1.0);
      g = d[m] - d[l] + e[l] / (g + std::copysign(r, g));
      double s = 1.0, c = 1.0, p = 0.0;
      bool deflated_early = false;
      for (Index i = m - 1; i >= l; --i) {
        double f = s * e[i];
        const double b = c * e[i];
        r = std::hypot(f, g);
        e[i + 1] = r;
        if (r == 0.0) {
          d[i + 1] -= p;
          e[m] = 0.0;
          deflated_early = true;
          break;
        }
        s = f / r;
        c = g / r;
        g = d[i + 1] - p;
        r = (d[i] - g) * s + 2.0 * c * b;
        p = s * r;
        d[i + 1] = g + p;
        g = c * r - b;
        for (Index k = 0; k < rows; ++k) {
          f = z(k, i + 1);
          z(k, i + 1) = s * z(k, i) + c * f;
          z(k, i) = c * z(k, i) - s * f;
        }
      }
      if (deflated_early) continue;
      d[l] -= p;
      e[l] = g;
      e[m] = 0.0;
    } while (m != l);
  }

  // ascending, ties broken by original index
  std::vector<Index> order(n);
  std::iota(order.begin(), order.end(), Index{0});
  std::stable_sort(order.begin(), order.end(), [&](Index a, Index b) { return d[a] < d[b]; });

  EigenPairs out;
  out.values.resize(n);
  out.first_components.resize(n);
  if (want_vectors) out.vectors = MatrixXd(n, n);
  for (Index j = 0; j < n; ++j) {
    out.values[j] = d[order[j]];
    out.first_components[j] = z(0, order[j]);
    if (want_vectors) out.vectors->col(j) = z.col(order[j]);
  }
  return out;
}

inline double max_abs(const MatrixXd& a) { return a.size() == 0 ? 0.0 : a.cwiseAbs().maxCoeff(); }

inline void require_symmetric(const MatrixXd& a, const char* who, double rel_tol = 1e-12) {
  if (a.rows() != a.cols()) throw UsageError(std::string(who) + ": matrix must be square");
  const double scale = max_abs(a);
  const double asym = max_abs(a - a.transpose());
  if (asym > rel_tol * scale)
    throw UsageError(std::string(who) + ": matrix is not symmetric (max |A - A^T| = " +
                     std::to_string(asym) + ")");
}

struct Tridiagonalization {
  TridiagonalMatrix t;
  MatrixXd q;  // orthogonal, Q^T A Q = T
};

/// Householder reduction of a dense symmetric matrix to tridiagonal form with
/// nonnegative off-diagonals. Columns already in tridiagonal form are left alone.
inline Tridiagonalization householder_tridiagonalize(const MatrixXd& input) {
  require_symmetric(input, "householder_tridiagonalize");
  const Index n = input.rows();
  if (n == 0) throw UsageError("householder_tridiagonalize: empty matrix");
  MatrixXd a = input;
  MatrixXd q = MatrixXd::Identity(n, n);

  for (Index k = 0; k + 2 < n; ++k) {
    const Index len = n - k - 1;
    VectorXd x = a.col(k).tail(len);
    const double tail_norm = x.tail(len - 1).norm();
    if (tail_norm == 0.0) continue;
    const double xnorm = x.norm();
    const double alpha = x[0] > 0 ? -xnorm : xnorm;
    VectorXd v = x;
    v[0] -= alpha;
    v.normalize();

    auto block = a.bottomRightCorner(len, len);
    const VectorXd u = block * v;
    const double kappa = v.dot(u);
    const VectorXd w = u - kappa * v;
    block.noalias() -= 2.0 * v * w.transpose();
    block.noalias() -= 2.0 * w * v.transpose();
    a.col(k).tail(len).setZero();
    a.row(k).tail(len).setZero();
    a(k + 1, k) = a(k, k + 1) = alpha;

    auto qcols = q.rightCols(len);
    const VectorXd qv = qcols * v;
    qcols.noalias() -= 2.0 * qv * v.transpose();
  }

  Tridiagonalization out;
  out.t.alpha.resize(n);
  out.t.beta.resize(n - 1);
  double sign = 1.0;
  for (Index i = 0; i < n; ++i) {
    out.t.alpha[i] = a(i, i);
    if (i + 1 < n) {
      const double b = a(i + 1, i);
      out.t.beta[i] = std::abs(b);
      // signature change so every off-diagonal comes out nonnegative
      const double next_sign = b < 0 ? -sign : sign;
      if (next_sign < 0) q.col(i + 1) *= -1.0;
      sign = next_sign;
    }
  }
  out.q = std::move(q);
  return out;
}

/// Default size cap for the dense oracle.
inline constexpr Index kDenseOracleCap = 4096;

/// Full dense eigendecomposition (ground-truth oracle). Backed by Eigen's
/// self-adjoint solver so it stays independent of eig_tridiagonal.
inline EigenPairs dense_eig(const MatrixXd& a, bool want_vectors = true, Index cap = kDenseOracleCap) {
  require_symmetric(a, "dense_eig");
  if (a.rows() > cap)
    throw UsageError("dense_eig: dimension " + std::to_string(a.rows()) + " exceeds the oracle cap " +
                     std::to_string(cap) + "; use the Lanczos estimators for large operators");
  Eigen::SelfAdjointEigenSolver<MatrixXd> solver(
      a, want_vectors ? Eigen::ComputeEigenvectors : Eigen::EigenvaluesOnly);
  if (solver.info() != Eigen::Success) throw NumericalError("dense_eig: eigensolver did not converge");
  EigenPairs out;
  out.values = solver.eigenvalues();
  if (want_vectors) {
    out.vectors = solver.eigenvectors();
    out.first_components = out.vectors->row(0).transpose();
  }
  return out;
}

struct QrResult {
  MatrixXd q;
  std::vector<Index> deficient;  // columns that vanished; zero in q
};

/// Relative column-norm threshold below which a column counts as dependent.
inline constexpr double kRankTolerance = 1e-14;

/// Modified Gram-Schmidt with one reorthogonalization pass. The span of the
/// non-deficient columns of q equals the span of the corresponding prefix of v.
inline QrResult qr_orthonormalize(const MatrixXd& v) {
  const Index cols = v.cols();
  QrResult out{v, {}};
  double scale = 0.0;
  for (Index j = 0; j < cols; ++j) scale = std::max(scale, v.col(j).norm());
  for (Index j = 0; j < cols; ++j) {
    auto col = out.q.col(j);
    for (int pass = 0; pass < 2; ++pass)
      for (Index i = 0; i < j; ++i) col -= out.q.col(i).dot(col) * out.q.col(i);
    const double norm = col.norm();
    if (!(norm > kRankTolerance * scale)) {
      col.setZero();
      out.deficient.push_back(j);
      continue;
    }
    col /= norm;
  }
  return out;
}

inline double orthonormality_error(const MatrixXd& q) {
  return max_abs(q.transpose() * q - MatrixXd::Identity(q.cols(), q.cols()));
}

}  // namespace hspec
