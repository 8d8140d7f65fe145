#pragma once

// Independent oracles and fixtures shared by the test binaries.

#include <algorithm>
#include <cmath>
#include <vector>

#include <Eigen/Dense>

#include "hspec/hspec.hpp"

namespace hspec::testing {

/// Number of eigenvalues of T strictly below x (Sturm sequence count).
inline int sturm_count(const TridiagonalMatrix& t, double x) {
  int count = 0;
  double q = 1.0;
  for (std::size_t i = 0; i < t.alpha.size(); ++i) {
    const double b2 = i == 0 ? 0.0 : t.beta[i - 1] * t.beta[i - 1];
    q = t.alpha[i] - x - (i == 0 ? 0.0 : b2 / q);
    if (q == 0.0) q = -1e-300;
    if (q < 0.0) ++count;
  }
  return count;
}

/// All eigenvalues of T by bisection on the Sturm count, ascending.
inline std::vector<double> bisection_eigenvalues(const TridiagonalMatrix& t, double tol = 1e-14) {
  const std::size_t n = t.alpha.size();
  double lo = 0.0, hi = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double r = (i > 0 ? t.beta[i - 1] : 0.0) + (i + 1 < n ? t.beta[i] : 0.0);
    lo = std::min(lo, t.alpha[i] - r);
    hi = std::max(hi, t.alpha[i] + r);
  }
  std::vector<double> out;
  for (std::size_t k = 0; k < n; ++k) {
    double a = lo - 1.0, b = hi + 1.0;
    while (b - a > tol * std::max(1.0, std::abs(a) + std::abs(b))) {
      const double mid = 0.5 * (a + b);
      if (mid == a || mid == b) break;
      if (sturm_count(t, mid) > static_cast<int>(k)) b = mid;
      else a = mid;
    }
    out.push_back(0.5 * (a + b));
  }
  return out;
}

inline TridiagonalMatrix random_tridiagonal(Index m, std::uint64_t seed) {
  Rng rng(seed);
  TridiagonalMatrix t;
  for (Index i = 0; i < m; ++i) t.alpha.push_back(rng.normal());
  for (Index i = 0; i + 1 < m; ++i) t.beta.push_back(std::abs(rng.normal()));
  return t;
}

inline MatrixXd random_symmetric(Index p, std::uint64_t seed) {
  Rng rng(seed);
  const MatrixXd g = rng.normal_matrix(p, p);
  return 0.5 * (g + g.transpose());
}

inline double relative_frobenius(const MatrixXd& a, const MatrixXd& b) { return (a - b).norm() / b.norm(); }

/// Small trained-or-not classifier with its data.
struct NetFixture {
  MlpSpec spec;
  ParamVector theta;
  LabeledDataset train;
  LabeledDataset test;
};

/// 3-class GMM in 4 dimensions, tanh MLP 4-6-3 (p = 51), optionally trained.
inline NetFixture small_net(int train_epochs = 0, Activation act = Activation::kTanh, std::uint64_t seed = 3) {
  GmmSpec g;
  g.classes = 3;
  g.input_dim = 4;
  g.train_per_class = 20;
  g.test_per_class = 10;
  g.separation = 3.0;
  g.seed = seed;
  SplitDataset data = gaussian_mixture(g);
  NetFixture f;
  f.spec.layer_dims = {4, 6, 3};
  f.spec.activation = act;
  f.train = std::move(data.train);
  f.test = std::move(data.test);
  TrainConfig cfg;
  cfg.seed = seed;
  cfg.lr = 0.05;
  cfg.batch_size = 16;
  cfg.epochs = std::max(1, train_epochs);
  if (train_epochs == 0) {
    f.theta = initial_checkpoint(f.spec, cfg).theta;
  } else {
    f.theta = train_sgd(f.spec, f.train, cfg).last.theta;
  }
  return f;
}

/// Central finite-difference gradient of the averaged loss.
inline VectorXd fd_gradient(const MlpSpec& spec, const ParamVector& theta, const LabeledDataset& data, double h = 1e-6) {
  VectorXd g(theta.size());
  for (Index k = 0; k < theta.size(); ++k) {
    ParamVector tp = theta, tm = theta;
    tp[k] += h;
    tm[k] -= h;
    g[k] = (loss(spec, tp, data) - loss(spec, tm, data)) / (2.0 * h);
  }
  return g;
}

/// Central finite differences of the analytic gradient, symmetrized.
inline MatrixXd fd_hessian(const MlpSpec& spec, const ParamVector& theta, const LabeledDataset& data, double h = 1e-5) {
  const Index p = theta.size();
  MatrixXd hess(p, p);
  for (Index k = 0; k < p; ++k) {
    ParamVector tp = theta, tm = theta;
    tp[k] += h;
    tm[k] -= h;
    hess.col(k) = (gradient(spec, tp, data) - gradient(spec, tm, data)) / (2.0 * h);
  }
  return 0.5 * (hess + hess.transpose());
}

/// G = Ave J^T (diag p - p p^T) J from explicit logit Jacobians.
inline MatrixXd explicit_gauss_newton(const MlpSpec& spec, const ParamVector& theta, const LabeledDataset& data) {
  const Index p = theta.size();
  MatrixXd g = MatrixXd::Zero(p, p);
  for (Index i = 0; i < data.size(); ++i) {
    const MatrixXd j = logit_jacobian(spec, theta, data.inputs.col(i));
    const VectorXd pr = forward(spec, theta, data.inputs.col(i)).probs;
    const MatrixXd curv = MatrixXd(pr.asDiagonal()) - pr * pr.transpose();
    g += j.transpose() * curv * j;
  }
  return g / static_cast<double>(data.size());
}

/// Exact eigenvalues smoothed like a log-scale estimate: per-eigenvalue curve
/// sum_i g(u - log(|l_i| + eps)) / (p (|l_i| + eps)) on the estimate's grid.
inline VectorXd log_oracle_curve(const SpectralDensity& d, const VectorXd& eigenvalues) {
  const double p = static_cast<double>(eigenvalues.size());
  const VectorXd u = eigenvalues.unaryExpr([&](double l) { return std::log(std::abs(l) + d.epsilon); });
  const VectorXd w = eigenvalues.unaryExpr([&](double l) { return 1.0 / (p * (std::abs(l) + d.epsilon)); });
  return smoothed_point_masses(d.grid, u, d.grid_sigma(), &w);
}

inline VectorXd eigenvalue_axis(const SpectralDensity& d) {
  return d.grid.unaryExpr([&](double u) { return std::exp(u) - d.epsilon; });
}

}  // namespace hspec::testing
