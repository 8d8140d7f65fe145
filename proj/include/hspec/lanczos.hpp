#pragma once

// Lanczos-based spectral density estimation.
//
// fast_lanczos keeps three working vectors (no reorthogonalization);
// slow_lanczos stores the basis and reorthogonalizes, for validation only.
// approx_spectrum / approx_log_spectrum normalize the operator to [-1, 1],
// average Gaussian-smoothed Ritz measures over n_vec start vectors and map
// the result back to eigenvalue units.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <utility>

#include <Eigen/Dense>

#include "hspec/density.hpp"
#include "hspec/error.hpp"
#include "hspec/linalg.hpp"
#include "hspec/operator.hpp"
#include "hspec/random.hpp"

namespace hspec {

struct LanczosRun {
  TridiagonalMatrix t;
  RitzSummary ritz;
  bool breakdown = false;
  MatrixXd basis;  // filled by slow_lanczos only
};

/// beta_m below this fraction of ||A v_m|| counts as an invariant Krylov space.
inline constexpr double kBreakdownTolerance = 1e-12;

/// Largest dimension slow_lanczos accepts.
inline constexpr Index kSlowLanczosCap = 10000;

namespace detail {

/// Three-term recurrence. `visit(m, v_m)` sees each unit basis vector in order.
template <class Visit>
LanczosRun lanczos_recurrence(const SymmetricOperator& op, int iterations, std::uint64_t seed, bool reorthogonalize,
                              Visit&& visit) {
  const Index p = op.dim();
  if (iterations < 1) throw UsageError("lanczos: iteration count must be >= 1");
  if (iterations > p)
    throw UsageError("lanczos: iteration count " + std::to_string(iterations) + " exceeds dimension " +
                     std::to_string(p));

  LanczosRun run;
  if (reorthogonalize) run.basis.resize(p, iterations);

  Rng rng(seed);
  VectorXd v = rng.normal_vector(p);
  v /= v.norm();
  VectorXd v_prev = VectorXd::Zero(p);
  VectorXd v_next(p);
  double beta_prev = 0.0;

  for (int m = 0; m < iterations; ++m) {
    visit(m, v);
    if (reorthogonalize) run.basis.col(m) = v;
    v_next = op.apply(v);
    const double scale = v_next.norm();
    if (m > 0) v_next -= beta_prev * v_prev;
    const double alpha = v_next.dot(v);
    v_next -= alpha * v;
    if (reorthogonalize) {
      auto basis = run.basis.leftCols(m + 1);
      for (int pass = 0; pass < 2; ++pass) v_next -= basis * (basis.transpose() * v_next);
    }
    const double beta = v_next.norm();
    run.t.alpha.push_back(alpha);
    if (m + 1 == iterations) break;
    if (beta <= kBreakdownTolerance * scale) {
      run.breakdown = true;
      break;
    }
    run.t.beta.push_back(beta);
    v_next /= beta;
    v_prev.swap(v);
    v.swap(v_next);
    beta_prev = beta;
  }
  if (reorthogonalize) run.basis.conservativeResize(p, run.t.size());
  return run;
}

inline void fill_ritz(LanczosRun& run, std::uint64_t seed) {
  const EigenPairs eig = eig_tridiagonal(run.t, false);
  run.ritz.seed = seed;
  run.ritz.iterations = static_cast<int>(run.t.size());
  run.ritz.breakdown = run.breakdown;
  run.ritz.theta.assign(eig.values.begin(), eig.values.end());
  run.ritz.weight.resize(eig.values.size());
  for (Index m = 0; m < eig.values.size(); ++m) run.ritz.weight[m] = eig.first_components[m] * eig.first_components[m];
}

}  // namespace detail

/// Lanczos without reorthogonalization; O(p) memory. Stops early (flagged)
/// on breakdown and returns the shorter tridiagonal.
inline LanczosRun fast_lanczos(const SymmetricOperator& op, int iterations, std::uint64_t seed) {
  LanczosRun run = detail::lanczos_recurrence(op, iterations, seed, false, [](int, const VectorXd&) {});
  detail::fill_ritz(run, seed);
  return run;
}

/// Lanczos with full reorthogonalization against the stored basis.
inline LanczosRun slow_lanczos(const SymmetricOperator& op, int iterations, std::uint64_t seed) {
  if (op.dim() > kSlowLanczosCap)
    throw UsageError("slow_lanczos: dimension " + std::to_string(op.dim()) + " exceeds the basis storage cap " +
                     std::to_string(kSlowLanczosCap));
  LanczosRun run = detail::lanczos_recurrence(op, iterations, seed, true, [](int, const VectorXd&) {});
  detail::fill_ritz(run, seed);
  return run;
}

/// Spectrum bracket from extremal Ritz pairs widened by their residual norms,
/// then by tau * (lambda_max - lambda_min) on each side.
///
/// The Ritz vectors y_1 and y_M are rebuilt by replaying the recurrence with
/// the same seed, so memory stays O(p).
inline NormalizationMap estimate_range(const SymmetricOperator& op, int iterations = 32, double tau = 0.05,
                                       std::uint64_t seed = 0) {
  if (iterations < 2) throw UsageError("estimate_range: needs at least 2 Lanczos iterations");
  const int m0 = static_cast<int>(std::min<Index>(iterations, op.dim()));
  const LanczosRun first = detail::lanczos_recurrence(op, m0, seed, false, [](int, const VectorXd&) {});
  const EigenPairs eig = eig_tridiagonal(first.t, true);
  const Index m = first.t.size();
  const VectorXd y_lo = eig.vectors->col(0);
  const VectorXd y_hi = eig.vectors->col(m - 1);

  VectorXd z_lo = VectorXd::Zero(op.dim());
  VectorXd z_hi = VectorXd::Zero(op.dim());
  detail::lanczos_recurrence(op, static_cast<int>(m), seed, false, [&](int k, const VectorXd& v) {
    z_lo += y_lo[k] * v;
    z_hi += y_hi[k] * v;
  });
  z_lo.normalize();
  z_hi.normalize();
  const double theta_lo = eig.values[0];
  const double theta_hi = eig.values[m - 1];
  const double r_lo = (op.apply(z_lo) - theta_lo * z_lo).norm();
  const double r_hi = (op.apply(z_hi) - theta_hi * z_hi).norm();
  return NormalizationMap::from_range(theta_lo - r_lo, theta_hi + r_hi, tau);
}

struct EstimatorConfig {
  int iterations = 128;        // M
  int grid_points = 1024;      // K
  int repetitions = 1;         // n_vec
  double kappa = 3.0;
  int range_iterations = 32;   // M0
  double tau = 0.05;
  double epsilon = 1e-5;       // log mode only
  std::optional<NormalizationMap> forced_range;

  static EstimatorConfig linear_defaults() { return {}; }
  static EstimatorConfig log_defaults() {
    EstimatorConfig cfg;
    cfg.iterations = 2048;
    return cfg;
  }
};

/// Gaussian width in normalized coordinates for M Lanczos steps.
inline double bump_width(int iterations, double kappa) {
  if (iterations < 2) throw UsageError("bump width needs at least 2 Lanczos iterations");
  if (!(kappa > 1.0)) throw UsageError("kappa must exceed 1");
  return 2.0 / ((iterations - 1) * std::sqrt(8.0 * std::log(kappa)));
}

/// Ritz values outside [-1 - delta, 1 + delta] trigger a note.
inline constexpr double kRitzOvershoot = 0.05;

namespace detail {

struct PreparedRuns {
  NormalizationMap map;
  int iterations = 0;
  double sigma = 0.0;
  std::vector<RitzSummary> ritz;
  std::vector<std::string> notes;
};

inline PreparedRuns prepare_runs(const SymmetricOperator& op, const EstimatorConfig& cfg, std::uint64_t seed) {
  if (cfg.grid_points < 2) throw UsageError("density grid needs at least 2 points");
  if (cfg.repetitions < 1) throw UsageError("n_vec must be >= 1");
  PreparedRuns out;
  out.map = cfg.forced_range ? *cfg.forced_range : estimate_range(op, cfg.range_iterations, cfg.tau, derive_seed(seed, 0));
  out.iterations = cfg.iterations;
  if (out.iterations > op.dim()) {
    out.notes.push_back("iterations clamped from " + std::to_string(cfg.iterations) + " to dimension " +
                        std::to_string(op.dim()));
    out.iterations = static_cast<int>(op.dim());
  }
  out.sigma = bump_width(out.iterations, cfg.kappa);
  const SymmetricOperator normalized = affine_operator(op, out.map);
  for (int l = 0; l < cfg.repetitions; ++l) {
    const std::uint64_t run_seed = derive_seed(seed, static_cast<std::uint64_t>(l) + 1);
    LanczosRun run = fast_lanczos(normalized, out.iterations, run_seed);
    if (!run.ritz.theta.empty() &&
        (run.ritz.theta.front() < -1.0 - kRitzOvershoot || run.ritz.theta.back() > 1.0 + kRitzOvershoot))
      out.notes.push_back("repetition " + std::to_string(l) + ": Ritz values outside the normalized range");
    if (run.breakdown)
      out.notes.push_back("repetition " + std::to_string(l) + ": Lanczos breakdown after " +
                          std::to_string(run.t.size()) + " steps");
    out.ritz.push_back(std::move(run.ritz));
  }
  return out;
}

}  // namespace detail

/// Smoothed spectral density of op on K points covering the normalized range.
inline SpectralDensity approx_spectrum(const SymmetricOperator& op, const EstimatorConfig& cfg = {},
                                       std::uint64_t seed = 0) {
  detail::PreparedRuns runs = detail::prepare_runs(op, cfg, seed);
  const VectorXd t = linspace(-1.0, 1.0, cfg.grid_points);
  VectorXd phi = VectorXd::Zero(t.size());
  const double share = 1.0 / cfg.repetitions;
  for (const RitzSummary& r : runs.ritz)
    for (std::size_t m = 0; m < r.theta.size(); ++m) add_bump(t, r.theta[m], share * r.weight[m], runs.sigma, phi);

  SpectralDensity out;
  out.scale = DensityScale::kLinear;
  out.sigma = runs.sigma;
  out.normalization = runs.map;
  out.grid = t.unaryExpr([&](double x) { return runs.map.from_normalized(x); });
  out.values = phi / runs.map.half_width;
  out.ritz = std::move(runs.ritz);
  out.notes = std::move(runs.notes);
  return out;
}

/// Smoothed density of u = log(|lambda| + eps), split by the sign of lambda.
inline SpectralDensity approx_log_spectrum(const SymmetricOperator& op,
                                           const EstimatorConfig& cfg = EstimatorConfig::log_defaults(),
                                           std::uint64_t seed = 0) {
  if (!(cfg.epsilon > 0.0)) throw UsageError("log spectrum needs epsilon > 0");
  detail::PreparedRuns runs = detail::prepare_runs(op, cfg, seed);
  const double eps = cfg.epsilon;

  // log applied to the pre-margin bracket, margin added afterwards
  const double lo = runs.map.lambda_min;
  const double hi = runs.map.lambda_max;
  const double abs_hi = std::max(std::abs(lo), std::abs(hi));
  const double abs_lo = (lo <= 0.0 && hi >= 0.0) ? 0.0 : std::min(std::abs(lo), std::abs(hi));
  const NormalizationMap log_map = NormalizationMap::from_range(std::log(abs_lo + eps), std::log(abs_hi + eps), cfg.tau);

  const VectorXd t = linspace(-1.0, 1.0, cfg.grid_points);
  VectorXd pos = VectorXd::Zero(t.size()), neg = VectorXd::Zero(t.size());
  VectorXd pos_eig = VectorXd::Zero(t.size()), neg_eig = VectorXd::Zero(t.size());
  double negative_mass = 0.0;
  const double share = 1.0 / cfg.repetitions;
  for (const RitzSummary& r : runs.ritz) {
    for (std::size_t m = 0; m < r.theta.size(); ++m) {
      const double lambda = runs.map.from_normalized(r.theta[m]);
      const double magnitude = std::abs(lambda) + eps;
      const double s = log_map.to_normalized(std::log(magnitude));
      const double w = share * r.weight[m];
      if (lambda >= 0.0) {
        add_bump(t, s, w, runs.sigma, pos);
        add_bump(t, s, w / magnitude, runs.sigma, pos_eig);
      } else {
        negative_mass += w;
        add_bump(t, s, w, runs.sigma, neg);
        add_bump(t, s, w / magnitude, runs.sigma, neg_eig);
      }
    }
  }

  SpectralDensity out;
  out.scale = DensityScale::kLog;
  out.epsilon = eps;
  out.sigma = runs.sigma;
  out.normalization = runs.map;
  out.log_normalization = log_map;
  out.grid = t.unaryExpr([&](double x) { return log_map.from_normalized(x); });
  const double d = log_map.half_width;
  out.values = pos / d;
  out.negative_values = neg / d;
  out.eigen_values = pos_eig / d;
  out.negative_eigen_values = neg_eig / d;
  out.negative_mass = negative_mass;
  out.ritz = std::move(runs.ritz);
  out.notes = std::move(runs.notes);
  if (negative_mass > 0.0) out.notes.push_back("negative eigenvalue mass " + std::to_string(negative_mass));
  return out;
}

}  // namespace hspec
