#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <utility>

#include <Eigen/Dense>

#include "hspec/error.hpp"
#include "hspec/linalg.hpp"
#include "hspec/random.hpp"

namespace hspec {

/// A p x p symmetric linear map known only through its matvec.
///
/// Operators are immutable once built; the matvec closure captures its data
/// through shared pointers to const, so copies are cheap and concurrent
/// apply() calls are safe.
class SymmetricOperator {
 public:
  using Apply = std::function<VectorXd(const VectorXd&)>;

  SymmetricOperator(Index dim, Apply apply, std::string label)
      : dim_(dim), apply_(std::move(apply)), label_(std::move(label)) {
    if (dim_ <= 0) throw UsageError("operator dimension must be positive");
    if (!apply_) throw UsageError("operator needs a matvec");
  }

  Index dim() const { return dim_; }
  const std::string& label() const { return label_; }

  VectorXd apply(const VectorXd& v) const {
    if (v.size() != dim_)
      throw UsageError("operator '" + label_ + "' expects vectors of length " + std::to_string(dim_) +
                       ", got " + std::to_string(v.size()));
    return apply_(v);
  }

  VectorXd operator()(const VectorXd& v) const { return apply(v); }

  /// Column-by-column assembly; only sensible at oracle scale.
  MatrixXd to_dense() const {
    MatrixXd a(dim_, dim_);
    VectorXd e = VectorXd::Zero(dim_);
    for (Index j = 0; j < dim_; ++j) {
      e[j] = 1.0;
      a.col(j) = apply(e);
      e[j] = 0.0;
    }
    return a;
  }

 private:
  Index dim_;
  Apply apply_;
  std::string label_;
};

/// Range widths at or below this fraction of max(|lambda_min|, |lambda_max|)
/// are treated as a numerically constant spectrum.
inline constexpr double kDegenerateRange = 1e-12;

/// Affine map taking [lambda_min - margin, lambda_max + margin] onto [-1, 1].
/// lambda_min/lambda_max hold the estimates before the margin was added.
struct NormalizationMap {
  double center = 0.0;
  double half_width = 1.0;
  double lambda_min = -1.0;
  double lambda_max = 1.0;
  double margin = 0.0;
  double tau = 0.0;

  static NormalizationMap from_range(double lambda_min, double lambda_max, double tau) {
    if (!(tau >= 0.0 && tau < 1.0)) throw UsageError("normalization margin tau must lie in [0, 1)");
    NormalizationMap map;
    map.lambda_min = lambda_min;
    map.lambda_max = lambda_max;
    map.tau = tau;
    map.margin = tau * (lambda_max - lambda_min);
    const double lo = lambda_min - map.margin;
    const double hi = lambda_max + map.margin;
    map.center = (lo + hi) / 2.0;
    map.half_width = (hi - lo) / 2.0;
    const double scale = std::max(std::abs(lambda_min), std::abs(lambda_max));
    if (!(map.half_width > kDegenerateRange * scale) || !std::isfinite(map.half_width))
      throw NumericalError("normalization: spectrum range has zero width (lambda_min = " +
                           std::to_string(lambda_min) + ", lambda_max = " + std::to_string(lambda_max) +
                           "); the operator is numerically a multiple of the identity");
    return map;
  }

  double to_normalized(double lambda) const { return (lambda - center) / half_width; }
  double from_normalized(double t) const { return half_width * t + center; }
};

inline SymmetricOperator dense_operator(MatrixXd a, std::string label = "dense") {
  require_symmetric(a, "dense_operator");
  auto data = std::make_shared<const MatrixXd>(std::move(a));
  const Index dim = data->rows();
  return SymmetricOperator(
      dim, [data](const VectorXd& v) -> VectorXd { return (*data) * v; }, std::move(label));
}

/// (op - c I) / d
inline SymmetricOperator affine_operator(SymmetricOperator op, const NormalizationMap& map) {
  if (!(map.half_width > 0.0)) throw UsageError("affine_operator: half width must be positive");
  const double c = map.center;
  const double d = map.half_width;
  std::string label = "(" + op.label() + "-cI)/d";
  const Index dim = op.dim();
  return SymmetricOperator(
      dim, [op = std::move(op), c, d](const VectorXd& v) -> VectorXd { return (op.apply(v) - c * v) / d; },
      std::move(label));
}

/// P op P with P = I - Q Q^T; span(Q) is sent to zero.
inline SymmetricOperator deflated_operator(SymmetricOperator op, MatrixXd q) {
  if (q.rows() != op.dim()) throw UsageError("deflated_operator: basis has wrong row count");
  if (q.cols() == 0) return op;
  if (orthonormality_error(q) > 1e-10) throw UsageError("deflated_operator: basis is not orthonormal");
  auto basis = std::make_shared<const MatrixXd>(std::move(q));
  std::string label = "defl" + std::to_string(basis->cols()) + "(" + op.label() + ")";
  const Index dim = op.dim();
  return SymmetricOperator(
      dim,
      [op = std::move(op), basis](const VectorXd& v) -> VectorXd {
        const MatrixXd& b = *basis;
        VectorXd pv = v - b * (b.transpose() * v);
        VectorXd w = op.apply(pv);
        return w - b * (b.transpose() * w);
      },
      std::move(label));
}

inline SymmetricOperator difference_operator(SymmetricOperator a, SymmetricOperator b) {
  if (a.dim() != b.dim())
    throw UsageError("difference_operator: dimension mismatch (" + std::to_string(a.dim()) + " vs " +
                     std::to_string(b.dim()) + ")");
  std::string label = a.label() + "-" + b.label();
  const Index dim = a.dim();
  return SymmetricOperator(
      dim, [a = std::move(a), b = std::move(b)](const VectorXd& v) -> VectorXd { return a.apply(v) - b.apply(v); },
      std::move(label));
}

inline SymmetricOperator sum_operator(SymmetricOperator a, SymmetricOperator b) {
  if (a.dim() != b.dim()) throw UsageError("sum_operator: dimension mismatch");
  std::string label = a.label() + "+" + b.label();
  const Index dim = a.dim();
  return SymmetricOperator(
      dim, [a = std::move(a), b = std::move(b)](const VectorXd& v) -> VectorXd { return a.apply(v) + b.apply(v); },
      std::move(label));
}

inline SymmetricOperator identity_operator(Index dim, double scale = 1.0) {
  return SymmetricOperator(
      dim, [scale](const VectorXd& v) -> VectorXd { return scale * v; },
      scale == 1.0 ? "I" : std::to_string(scale) + "*I");
}

inline SymmetricOperator relabel(SymmetricOperator op, std::string label) {
  const Index dim = op.dim();
  return SymmetricOperator(
      dim, [op = std::move(op)](const VectorXd& v) -> VectorXd { return op.apply(v); }, std::move(label));
}

struct SymmetryReport {
  double worst_ratio = 0.0;  // max |<Au,w> - <u,Aw>| / (||Au|| ||w||)
  bool ok = true;
};

/// Probabilistic symmetry check on `pairs` random unit vector pairs.
inline SymmetryReport symmetry_probe(const SymmetricOperator& op, int pairs = 10, std::uint64_t seed = 7,
                                     double tol = 1e-8) {
  Rng rng(seed);
  SymmetryReport report;
  for (int k = 0; k < pairs; ++k) {
    const VectorXd u = rng.normal_vector(op.dim()).normalized();
    const VectorXd w = rng.normal_vector(op.dim()).normalized();
    const VectorXd au = op.apply(u);
    const VectorXd aw = op.apply(w);
    const double gap = std::abs(au.dot(w) - u.dot(aw));
    const double scale = std::max(au.norm() * w.norm(), u.norm() * aw.norm());
    if (gap == 0.0) continue;
    const double ratio = scale > 0 ? gap / scale : std::numeric_limits<double>::infinity();
    report.worst_ratio = std::max(report.worst_ratio, ratio);
    if (ratio > tol) report.ok = false;
  }
  return report;
}

}  // namespace hspec
