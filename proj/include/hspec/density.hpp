#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "hspec/error.hpp"
#include "hspec/operator.hpp"

namespace hspec {

/// Ritz values of one Lanczos run and their quadrature weights y_m[1]^2.
struct RitzSummary {
  std::vector<double> theta;
  std::vector<double> weight;
  std::uint64_t seed = 0;
  int iterations = 0;
  bool breakdown = false;

  double weight_sum() const {
    double s = 0.0;
    for (double w : weight) s += w;
    return s;
  }
};

enum class DensityScale { kLinear, kLog };

/// Smoothed spectral density sampled on an ascending grid.
///
/// Linear scale: grid holds eigenvalues, values integrate to 1 over the grid.
/// Log scale: grid holds u = log(|lambda| + epsilon). `values` is the density
/// of u for eigenvalues >= 0 and `negative_values` the density of u for the
/// negative ones; together they integrate to 1. `eigen_values` and
/// `negative_eigen_values` carry the same bumps rescaled by 1/(|theta| + eps),
/// i.e. density per unit eigenvalue evaluated on the log grid.
struct SpectralDensity {
  VectorXd grid;
  VectorXd values;
  double sigma = 0.0;  // bump width in normalized coordinates
  NormalizationMap normalization;
  DensityScale scale = DensityScale::kLinear;
  double epsilon = 0.0;

  NormalizationMap log_normalization;
  VectorXd negative_values;
  VectorXd eigen_values;
  VectorXd negative_eigen_values;
  double negative_mass = 0.0;

  std::vector<RitzSummary> ritz;
  std::vector<std::string> notes;

  double integral() const;
  /// Bump width in grid units.
  double grid_sigma() const {
    return sigma * (scale == DensityScale::kLog ? log_normalization.half_width : normalization.half_width);
  }
};

inline double trapezoid(const VectorXd& x, const VectorXd& y) {
  if (x.size() != y.size()) throw UsageError("trapezoid: size mismatch");
  double s = 0.0;
  for (Index k = 0; k + 1 < x.size(); ++k) s += 0.5 * (x[k + 1] - x[k]) * (y[k] + y[k + 1]);
  return s;
}

/// Trapezoidal mass of y restricted to lo <= x <= hi (grid points only).
inline double trapezoid_window(const VectorXd& x, const VectorXd& y, double lo, double hi) {
  double s = 0.0;
  for (Index k = 0; k + 1 < x.size(); ++k)
    if (x[k] >= lo && x[k + 1] <= hi) s += 0.5 * (x[k + 1] - x[k]) * (y[k] + y[k + 1]);
  return s;
}

inline double SpectralDensity::integral() const {
  double total = trapezoid(grid, values);
  if (negative_values.size() == grid.size()) total += trapezoid(grid, negative_values);
  return total;
}

/// Half the L1 distance between two densities on a common grid.
inline double total_variation(const VectorXd& grid, const VectorXd& a, const VectorXd& b) {
  return 0.5 * trapezoid(grid, (a - b).cwiseAbs());
}

inline VectorXd linspace(double lo, double hi, Index k) {
  if (k < 2) throw UsageError("linspace needs at least two points");
  return VectorXd::LinSpaced(k, lo, hi);
}

/// Bumps beyond this many widths are dropped.
inline constexpr double kBumpCutoff = 6.0;

inline double gaussian(double x, double sigma) {
  const double z = x / sigma;
  return std::exp(-0.5 * z * z) / (sigma * std::sqrt(2.0 * std::numbers::pi));
}

/// out[k] += weight * g_sigma(grid[k] - center) for a uniform grid.
inline void add_bump(const VectorXd& grid, double center, double weight, double sigma, VectorXd& out) {
  const Index k_count = grid.size();
  const double lo = grid[0];
  const double h = (grid[k_count - 1] - lo) / static_cast<double>(k_count - 1);
  const double reach = kBumpCutoff * sigma;
  const double first = std::ceil((center - reach - lo) / h);
  const double last = std::floor((center + reach - lo) / h);
  if (last < 0 || first > static_cast<double>(k_count - 1)) return;
  const Index k0 = std::max<Index>(0, static_cast<Index>(first));
  const Index k1 = std::min<Index>(k_count - 1, static_cast<Index>(last));
  for (Index k = k0; k <= k1; ++k) out[k] += weight * gaussian(grid[k] - center, sigma);
}

/// Point masses smoothed by a Gaussian of width sigma (grid units), untruncated.
inline VectorXd smoothed_point_masses(const VectorXd& grid, const VectorXd& points, double sigma,
                                      const VectorXd* weights = nullptr) {
  VectorXd out = VectorXd::Zero(grid.size());
  const double uniform = 1.0 / static_cast<double>(points.size());
  for (Index i = 0; i < points.size(); ++i) {
    const double w = weights ? (*weights)[i] : uniform;
    for (Index k = 0; k < grid.size(); ++k) out[k] += w * gaussian(grid[k] - points[i], sigma);
  }
  return out;
}

}  // namespace hspec
