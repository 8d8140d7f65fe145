#pragma once

// Synthetic ensembles for estimator validation, reference densities and
// power-law fitting.

#include <cmath>
#include <cstdint>
#include <numbers>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "hspec/density.hpp"
#include "hspec/error.hpp"
#include "hspec/linalg.hpp"
#include "hspec/random.hpp"

namespace hspec {

enum class EnsembleKind { kSpikedWishart, kParetoWishart, kGoe };

inline std::string to_string(EnsembleKind k) {
  switch (k) {
    case EnsembleKind::kSpikedWishart: return "spiked";
    case EnsembleKind::kParetoWishart: return "pareto";
    case EnsembleKind::kGoe: return "goe";
  }
  return "?";
}

inline EnsembleKind ensemble_from_string(const std::string& s) {
  if (s == "spiked") return EnsembleKind::kSpikedWishart;
  if (s == "pareto") return EnsembleKind::kParetoWishart;
  if (s == "goe") return EnsembleKind::kGoe;
  throw UsageError("unknown ensemble '" + s + "' (expected spiked, pareto or goe)");
}

/// Y = X + (1/n) Z Z^T with X = diag(spikes, 0...) and Z (p x n) standard normal;
/// Y = (1/n) Z Z^T with Z (p x n) i.i.d. Pareto(alpha);
/// GOE scaled so the semicircle support is [-2, 2].
struct EnsembleSpec {
  EnsembleKind kind = EnsembleKind::kSpikedWishart;
  Index p = 2000;
  Index n = 2000;
  std::vector<double> spikes = {5.0, 4.0, 3.0};
  double alpha = 1.0;
  std::uint64_t seed = 0;

  static EnsembleSpec spiked_default() { return {}; }
  static EnsembleSpec pareto_default() { return {EnsembleKind::kParetoWishart, 500, 1000, {}, 1.0, 0}; }
  static EnsembleSpec goe(Index p) { return {EnsembleKind::kGoe, p, p, {}, 1.0, 0}; }

  void validate() const {
    if (p < 1 || n < 1) throw UsageError("ensemble dimensions must be positive");
    if (!(alpha > 0.0)) throw UsageError("Pareto index must be positive");
    if (static_cast<Index>(spikes.size()) > p) throw UsageError("more spikes than dimensions");
    for (double s : spikes)
      if (!std::isfinite(s)) throw UsageError("spikes must be finite");
  }
};

/// Pareto(alpha) with unit scale by inverse CDF: (1 - U)^(-1/alpha).
inline double pareto_draw(Rng& rng, double alpha) { return std::pow(1.0 - rng.uniform(), -1.0 / alpha); }

inline MatrixXd sample(const EnsembleSpec& spec) {
  spec.validate();
  Rng rng(spec.seed);
  switch (spec.kind) {
    case EnsembleKind::kSpikedWishart: {
      const MatrixXd z = rng.normal_matrix(spec.p, spec.n);
      MatrixXd y = MatrixXd::Zero(spec.p, spec.p);
      y.selfadjointView<Eigen::Lower>().rankUpdate(z, 1.0 / static_cast<double>(spec.n));
      y = y.selfadjointView<Eigen::Lower>();
      for (std::size_t k = 0; k < spec.spikes.size(); ++k) y(k, k) += spec.spikes[k];
      return y;
    }
    case EnsembleKind::kParetoWishart: {
      MatrixXd z(spec.p, spec.n);
      for (Index j = 0; j < spec.n; ++j)
        for (Index i = 0; i < spec.p; ++i) z(i, j) = pareto_draw(rng, spec.alpha);
      MatrixXd y = MatrixXd::Zero(spec.p, spec.p);
      y.selfadjointView<Eigen::Lower>().rankUpdate(z, 1.0 / static_cast<double>(spec.n));
      return y.selfadjointView<Eigen::Lower>();
    }
    case EnsembleKind::kGoe: {
      const MatrixXd g = rng.normal_matrix(spec.p, spec.p);
      return (g + g.transpose()) / std::sqrt(2.0 * static_cast<double>(spec.p));
    }
  }
  throw UsageError("unknown ensemble kind");
}

/// Marchenko-Pastur law for (1/n) Z Z^T with entry variance sigma2 and
/// gamma = n / p. The continuous part is returned by mp_density; when
/// gamma < 1 an atom of mass 1 - gamma sits at zero (see atom()).
struct MarchenkoPastur {
  double gamma = 1.0;
  double sigma2 = 1.0;

  MarchenkoPastur(double gamma_, double sigma2_) : gamma(gamma_), sigma2(sigma2_) {
    if (!(gamma > 0.0)) throw UsageError("Marchenko-Pastur ratio must be positive");
    if (!(sigma2 > 0.0)) throw UsageError("Marchenko-Pastur variance must be positive");
  }

  double ratio() const { return 1.0 / gamma; }  // p / n
  double lower() const { return sigma2 * std::pow(1.0 - std::sqrt(ratio()), 2); }
  double upper() const { return sigma2 * std::pow(1.0 + std::sqrt(ratio()), 2); }
  double atom() const { return gamma < 1.0 ? 1.0 - gamma : 0.0; }

  double density(double lambda) const {
    const double a = lower(), b = upper();
    if (lambda <= a || lambda >= b || lambda <= 0.0) return 0.0;
    return std::sqrt((b - lambda) * (lambda - a)) / (2.0 * std::numbers::pi * sigma2 * ratio() * lambda);
  }

  /// Continuous mass on [lo, hi]; the substitution lambda = a + (b-a)(1-cos t)/2
  /// removes the edge singularities before composite Simpson.
  double mass(double lo, double hi, int panels = 4096) const {
    const double a = lower(), b = upper();
    lo = std::max(lo, a);
    hi = std::min(hi, b);
    if (hi <= lo) return 0.0;
    auto t_of = [&](double lambda) { return std::acos(1.0 - 2.0 * (lambda - a) / (b - a)); };
    const double t0 = t_of(lo), t1 = t_of(hi);
    // density * jacobian in closed form: (b-a)^2 s^2 c^2 / (2 pi sigma2 y lambda),
    // s = sin(t/2), c = cos(t/2), lambda = a + (b-a) s^2; finite even when a = 0
    auto f = [&](double t) {
      const double sn = std::sin(t / 2.0), cs = std::cos(t / 2.0);
      const double lambda = a + (b - a) * sn * sn;
      const double num = lambda > 0.0 ? (b - a) * (b - a) * sn * sn * cs * cs / lambda : (b - a) * cs * cs;
      return num / (2.0 * std::numbers::pi * sigma2 * ratio());
    };
    if (panels % 2) ++panels;
    const double h = (t1 - t0) / panels;
    double s = f(t0) + f(t1);
    for (int k = 1; k < panels; ++k) s += (k % 2 ? 4.0 : 2.0) * f(t0 + k * h);
    return s * h / 3.0;
  }
};

inline double mp_density(double gamma, double sigma2, double lambda) {
  return MarchenkoPastur(gamma, sigma2).density(lambda);
}

inline double semicircle_density(double radius, double lambda) {
  if (!(radius > 0.0)) throw UsageError("semicircle radius must be positive");
  if (std::abs(lambda) >= radius) return 0.0;
  return 2.0 / (std::numbers::pi * radius * radius) * std::sqrt(radius * radius - lambda * lambda);
}

struct PowerLawFit {
  double amplitude = 0.0;  // a in phi = a |lambda|^b
  double exponent = 0.0;   // b
  double r2 = 0.0;
  int points = 0;
};

/// Minimum grid points a power-law window must contain.
inline constexpr int kMinPowerLawPoints = 5;

/// Least squares of log phi against log |lambda| on raw (x, phi) samples.
inline PowerLawFit fit_power_law(const VectorXd& lambda, const VectorXd& phi, double lo, double hi) {
  std::vector<double> xs, ys;
  for (Index k = 0; k < lambda.size(); ++k) {
    const double a = std::abs(lambda[k]);
    if (a < lo || a > hi) continue;
    if (!(phi[k] > 0.0)) throw UsageError("fit_power_law: density must be positive on the window");
    xs.push_back(std::log(a));
    ys.push_back(std::log(phi[k]));
  }
  if (static_cast<int>(xs.size()) < kMinPowerLawPoints)
    throw UsageError("fit_power_law: fewer than " + std::to_string(kMinPowerLawPoints) + " grid points in window");
  const double m = static_cast<double>(xs.size());
  double sx = 0, sy = 0;
  for (std::size_t i = 0; i < xs.size(); ++i) sx += xs[i], sy += ys[i];
  const double mx = sx / m, my = sy / m;
  double sxx = 0, sxy = 0, syy = 0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    sxx += (xs[i] - mx) * (xs[i] - mx);
    sxy += (xs[i] - mx) * (ys[i] - my);
    syy += (ys[i] - my) * (ys[i] - my);
  }
  if (!(sxx > 0.0)) throw UsageError("fit_power_law: window spans a single abscissa");
  PowerLawFit fit;
  fit.exponent = sxy / sxx;
  fit.amplitude = std::exp(my - fit.exponent * mx);
  double sse = 0.0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    const double r = ys[i] - (my + fit.exponent * (xs[i] - mx));
    sse += r * r;
  }
  fit.r2 = syy > 0.0 ? 1.0 - sse / syy : 1.0;
  fit.points = static_cast<int>(xs.size());
  return fit;
}

/// Power-law fit of a density over |lambda| in [lo, hi]. Log-scale densities
/// are fitted through their per-eigenvalue curve on lambda = exp(u) - eps.
inline PowerLawFit fit_power_law(const SpectralDensity& density, double lo, double hi) {
  if (density.scale == DensityScale::kLinear) return fit_power_law(density.grid, density.values, lo, hi);
  const VectorXd lambda = density.grid.unaryExpr([&](double u) { return std::exp(u) - density.epsilon; });
  return fit_power_law(lambda, density.eigen_values, lo, hi);
}

}  // namespace hspec
