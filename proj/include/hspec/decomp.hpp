#pragma once

// Three-level hierarchical split of the Gauss-Newton matrix,
//
//   G = A1 + A2 + B1 + B2,
//
// built from the per-example vectors g_{i,c'} = J_i^T (p_i - e_{c'}), i.e. the
// gradient example i would have if its label were c'. Every part is a
// nonnegative sum of outer products, stored as a factor F with part = F F^T.
//
// Weights are normalized by the total example count N (equal to n*C for
// balanced data). The class-level covariance Sigma_c is centered at the
// weighted mean g_c, which makes the split an exact identity.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "hspec/deflation.hpp"
#include "hspec/error.hpp"
#include "hspec/lanczos.hpp"
#include "hspec/net.hpp"
#include "hspec/operator.hpp"

namespace hspec {

/// g_{i,c'} for every example (p x C per example) and the softmax outputs.
struct PerExampleVectors {
  std::vector<MatrixXd> vectors;  // vectors[i].col(c') = g_{i,c'}
  MatrixXd probs;                 // C x n
  std::vector<int> labels;
  int num_classes = 0;
  Index dim = 0;
};

inline PerExampleVectors per_example_vectors(const MlpSpec& spec, const ParamVector& theta,
                                             const LabeledDataset& data) {
  detail::check_compatible(spec, theta, data);
  const int classes = spec.num_classes();
  PerExampleVectors out;
  out.num_classes = classes;
  out.dim = spec.param_count();
  out.labels = data.labels;
  out.probs.resize(classes, data.size());
  out.vectors.resize(data.size());
  parallel_for(static_cast<std::size_t>(data.size()), worker_count(), [&](std::size_t idx) {
    const Index i = static_cast<Index>(idx);
    const detail::Trace tr = detail::forward_trace(spec, theta, data.inputs.col(i));
    out.probs.col(i) = tr.probs;
    MatrixXd g(out.dim, classes);
    for (int c = 0; c < classes; ++c) {
      VectorXd cot = tr.probs;
      cot[c] -= 1.0;
      ParamVector col = ParamVector::Zero(out.dim);
      detail::backprop(spec, theta, tr, std::move(cot), col);
      g.col(c) = col;
    }
    out.vectors[i] = std::move(g);
  });
  return out;
}

/// Masses, weighted means and covariance factors of the (c, c') clusters and
/// of the per-class clusters over c' != c.
struct ClusterStats {
  int num_classes = 0;
  Index dim = 0;
  Index total = 0;  // N
  std::vector<Index> class_counts;

  MatrixXd pair_mass;                  // p_{c,c'}
  std::vector<VectorXd> pair_mean;     // g_{c,c'}, index c*C + c'
  std::vector<MatrixXd> pair_factor;   // Sigma_{c,c'} = F F^T; empty when streamed

  VectorXd class_mass;                 // p_c
  std::vector<VectorXd> class_mean;    // g_c
  std::vector<MatrixXd> class_factor;  // Sigma_c = F F^T

  Index pair(int c, int cp) const { return static_cast<Index>(c) * num_classes + cp; }
  bool has_pair_factors() const { return !pair_factor.empty(); }
};

namespace detail {

inline void finish_class_level(ClusterStats& s) {
  const int classes = s.num_classes;
  s.class_mass = VectorXd::Zero(classes);
  s.class_mean.assign(classes, VectorXd::Zero(s.dim));
  s.class_factor.assign(classes, MatrixXd(s.dim, 0));
  for (int c = 0; c < classes; ++c) {
    for (int cp = 0; cp < classes; ++cp)
      if (cp != c) s.class_mass[c] += s.pair_mass(c, cp);
    if (!(s.class_mass[c] > 0.0)) continue;
    for (int cp = 0; cp < classes; ++cp)
      if (cp != c) s.class_mean[c] += s.pair_mass(c, cp) * s.pair_mean[s.pair(c, cp)];
    s.class_mean[c] /= s.class_mass[c];
    MatrixXd f(s.dim, classes - 1);
    Index col = 0;
    for (int cp = 0; cp < classes; ++cp) {
      if (cp == c) continue;
      f.col(col++) = std::sqrt(s.pair_mass(c, cp) / s.class_mass[c]) * (s.pair_mean[s.pair(c, cp)] - s.class_mean[c]);
    }
    s.class_factor[c] = std::move(f);
  }
}

}  // namespace detail

inline ClusterStats cluster_statistics(const PerExampleVectors& ex) {
  const int classes = ex.num_classes;
  ClusterStats s;
  s.num_classes = classes;
  s.dim = ex.dim;
  s.total = static_cast<Index>(ex.labels.size());
  s.class_counts.assign(classes, 0);
  for (int y : ex.labels) ++s.class_counts[y];

  s.pair_mass = MatrixXd::Zero(classes, classes);
  s.pair_mean.assign(static_cast<std::size_t>(classes) * classes, VectorXd::Zero(ex.dim));
  for (std::size_t i = 0; i < ex.labels.size(); ++i) {
    const int c = ex.labels[i];
    for (int cp = 0; cp < classes; ++cp) {
      const double w = ex.probs(cp, static_cast<Index>(i));
      s.pair_mass(c, cp) += w;
      s.pair_mean[s.pair(c, cp)] += w * ex.vectors[i].col(cp);
    }
  }
  for (int c = 0; c < classes; ++c)
    for (int cp = 0; cp < classes; ++cp)
      if (s.pair_mass(c, cp) > 0.0) s.pair_mean[s.pair(c, cp)] /= s.pair_mass(c, cp);

  s.pair_factor.assign(static_cast<std::size_t>(classes) * classes, MatrixXd());
  for (int c = 0; c < classes; ++c)
    for (int cp = 0; cp < classes; ++cp) s.pair_factor[s.pair(c, cp)].resize(ex.dim, s.class_counts[c]);
  std::vector<Index> filled(classes, 0);
  for (std::size_t i = 0; i < ex.labels.size(); ++i) {
    const int c = ex.labels[i];
    for (int cp = 0; cp < classes; ++cp) {
      const double w = ex.probs(cp, static_cast<Index>(i)) / s.pair_mass(c, cp);
      s.pair_factor[s.pair(c, cp)].col(filled[c]) = std::sqrt(w) * (ex.vectors[i].col(cp) - s.pair_mean[s.pair(c, cp)]);
    }
    ++filled[c];
  }
  detail::finish_class_level(s);
  return s;
}

/// F F^T as an operator.
inline SymmetricOperator factor_operator(MatrixXd factor, std::string label) {
  auto f = std::make_shared<const MatrixXd>(std::move(factor));
  const Index dim = f->rows();
  return SymmetricOperator(
      dim, [f](const VectorXd& v) -> VectorXd { return (*f) * (f->transpose() * v); }, std::move(label));
}

inline MatrixXd hstack(const std::vector<const MatrixXd*>& blocks, Index rows) {
  Index cols = 0;
  for (const MatrixXd* b : blocks) cols += b->cols();
  MatrixXd out(rows, cols);
  Index at = 0;
  for (const MatrixXd* b : blocks) {
    out.middleCols(at, b->cols()) = *b;
    at += b->cols();
  }
  return out;
}

struct GaussNewtonParts {
  SymmetricOperator a1, a2, b1, b2;
  std::vector<SymmetricOperator> b2_per_class;
  ClusterStats stats;
  std::vector<double> b2c_traces;  // (1/n_c) tr B_{2,c}
  // low-rank factors of A1, A2, B1 (always small: C, C and C(C-1) columns)
  MatrixXd a1_factor, a2_factor, b1_factor;
};

namespace detail {

inline void build_low_rank_factors(const ClusterStats& s, MatrixXd& a1, MatrixXd& a2, MatrixXd& b1) {
  const int classes = s.num_classes;
  const double n = static_cast<double>(s.total);
  a1.resize(s.dim, classes);
  a2.resize(s.dim, classes);
  std::vector<MatrixXd> b1_blocks;
  for (int c = 0; c < classes; ++c) {
    a1.col(c) = std::sqrt(s.class_mass[c] / n) * s.class_mean[c];
    a2.col(c) = std::sqrt(s.pair_mass(c, c) / n) * s.pair_mean[s.pair(c, c)];
    b1_blocks.push_back(std::sqrt(s.class_mass[c] / n) * s.class_factor[c]);
  }
  std::vector<const MatrixXd*> ptrs;
  for (const MatrixXd& b : b1_blocks) ptrs.push_back(&b);
  b1 = hstack(ptrs, s.dim);
}

}  // namespace detail

/// Component operators from in-memory cluster statistics.
inline GaussNewtonParts build_parts(ClusterStats stats) {
  if (!stats.has_pair_factors()) throw UsageError("build_parts: statistics carry no covariance factors");
  const int classes = stats.num_classes;
  const double n = static_cast<double>(stats.total);
  MatrixXd a1, a2, b1;
  detail::build_low_rank_factors(stats, a1, a2, b1);

  std::vector<MatrixXd> b2c_factors;
  std::vector<double> traces;
  for (int c = 0; c < classes; ++c) {
    std::vector<MatrixXd> blocks;
    for (int cp = 0; cp < classes; ++cp)
      blocks.push_back(std::sqrt(stats.pair_mass(c, cp) / n) * stats.pair_factor[stats.pair(c, cp)]);
    std::vector<const MatrixXd*> ptrs;
    for (const MatrixXd& b : blocks) ptrs.push_back(&b);
    b2c_factors.push_back(hstack(ptrs, stats.dim));
    const double count = static_cast<double>(stats.class_counts[c]);
    traces.push_back(count > 0 ? b2c_factors.back().squaredNorm() / count : 0.0);
  }
  std::vector<const MatrixXd*> ptrs;
  for (const MatrixXd& b : b2c_factors) ptrs.push_back(&b);
  MatrixXd b2 = hstack(ptrs, stats.dim);

  std::vector<SymmetricOperator> per_class;
  for (int c = 0; c < classes; ++c) per_class.push_back(factor_operator(b2c_factors[c], "B2_" + std::to_string(c)));
  return GaussNewtonParts{factor_operator(a1, "A1"),
                          factor_operator(a2, "A2"),
                          factor_operator(b1, "B1"),
                          factor_operator(std::move(b2), "B2"),
                          std::move(per_class),
                          std::move(stats),
                          std::move(traces),
                          std::move(a1),
                          std::move(a2),
                          std::move(b1)};
}

inline GaussNewtonParts build_parts(const MlpSpec& spec, const ParamVector& theta, const LabeledDataset& data) {
  return build_parts(cluster_statistics(per_example_vectors(spec, theta, data)));
}

/// Two-pass variant for datasets too large to hold n*C*p reals: a means pass
/// builds A1, A2, B1; B2 recomputes the per-example vectors on every apply.
inline GaussNewtonParts build_parts_streaming(const MlpSpec& spec, const ParamVector& theta,
                                              const LabeledDataset& data) {
  detail::check_compatible(spec, theta, data);
  const int classes = spec.num_classes();
  const Index dim = spec.param_count();
  ClusterStats s;
  s.num_classes = classes;
  s.dim = dim;
  s.total = data.size();
  s.class_counts.assign(classes, 0);
  for (int y : data.labels) ++s.class_counts[y];
  s.pair_mass = MatrixXd::Zero(classes, classes);
  s.pair_mean.assign(static_cast<std::size_t>(classes) * classes, VectorXd::Zero(dim));

  auto vectors_of = [&spec, &theta, dim](const detail::Trace& tr, int cp) {
    VectorXd cot = tr.probs;
    cot[cp] -= 1.0;
    ParamVector g = ParamVector::Zero(dim);
    detail::backprop(spec, theta, tr, std::move(cot), g);
    return g;
  };

  for (Index i = 0; i < data.size(); ++i) {
    const detail::Trace tr = detail::forward_trace(spec, theta, data.inputs.col(i));
    const int c = data.labels[i];
    for (int cp = 0; cp < classes; ++cp) {
      s.pair_mass(c, cp) += tr.probs[cp];
      s.pair_mean[s.pair(c, cp)] += tr.probs[cp] * vectors_of(tr, cp);
    }
  }
  for (int c = 0; c < classes; ++c)
    for (int cp = 0; cp < classes; ++cp)
      if (s.pair_mass(c, cp) > 0.0) s.pair_mean[s.pair(c, cp)] /= s.pair_mass(c, cp);
  detail::finish_class_level(s);

  MatrixXd a1, a2, b1;
  detail::build_low_rank_factors(s, a1, a2, b1);

  std::vector<double> traces(classes, 0.0);
  const double n = static_cast<double>(s.total);
  for (Index i = 0; i < data.size(); ++i) {
    const detail::Trace tr = detail::forward_trace(spec, theta, data.inputs.col(i));
    const int c = data.labels[i];
    for (int cp = 0; cp < classes; ++cp)
      traces[c] += tr.probs[cp] / n * (vectors_of(tr, cp) - s.pair_mean[s.pair(c, cp)]).squaredNorm();
  }
  for (int c = 0; c < classes; ++c)
    traces[c] = s.class_counts[c] > 0 ? traces[c] / static_cast<double>(s.class_counts[c]) : 0.0;

  auto shared_spec = std::make_shared<const MlpSpec>(spec);
  auto shared_theta = std::make_shared<const ParamVector>(theta);
  auto shared_data = std::make_shared<const LabeledDataset>(data);
  auto means = std::make_shared<const std::vector<VectorXd>>(s.pair_mean);
  auto streamed_b2 = [=](int only_class) {
    return [=](const VectorXd& v) -> VectorXd {
      const MlpSpec& sp = *shared_spec;
      const ParamVector& th = *shared_theta;
      const LabeledDataset& d = *shared_data;
      return detail::dataset_average(d, dim, EvalConfig{}, [&](Index i, VectorXd& acc) {
        const int c = d.labels[i];
        if (only_class >= 0 && c != only_class) return;
        const detail::Trace tr = detail::forward_trace(sp, th, d.inputs.col(i));
        for (int cp = 0; cp < classes; ++cp) {
          VectorXd cot = tr.probs;
          cot[cp] -= 1.0;
          ParamVector g = ParamVector::Zero(dim);
          detail::backprop(sp, th, tr, std::move(cot), g);
          g -= (*means)[static_cast<std::size_t>(c) * classes + cp];
          acc += tr.probs[cp] * g.dot(v) * g;
        }
      });
    };
  };
  std::vector<SymmetricOperator> per_class;
  for (int c = 0; c < classes; ++c) per_class.emplace_back(dim, streamed_b2(c), "B2_" + std::to_string(c));

  return GaussNewtonParts{factor_operator(a1, "A1"),
                          factor_operator(a2, "A2"),
                          factor_operator(b1, "B1"),
                          SymmetricOperator(dim, streamed_b2(-1), "B2"),
                          std::move(per_class),
                          std::move(s),
                          std::move(traces),
                          std::move(a1),
                          std::move(a2),
                          std::move(b1)};
}

inline const std::vector<double>& b2c_traces(const GaussNewtonParts& parts) { return parts.b2c_traces; }

/// Nonzero spectrum of F F^T via the Gram matrix F^T F, descending.
inline std::vector<double> factor_eigenvalues(const MatrixXd& factor) {
  if (factor.cols() == 0) return {};
  const MatrixXd gram = factor.transpose() * factor;
  Eigen::SelfAdjointEigenSolver<MatrixXd> eig(gram, Eigen::EigenvaluesOnly);
  std::vector<double> out(eig.eigenvalues().begin(), eig.eigenvalues().end());
  std::sort(out.rbegin(), out.rend());
  return out;
}

/// Worst ||G v - (A1 + A2 + B1 + B2) v|| / ||G v|| over random probes.
inline double decomposition_residual(const SymmetricOperator& g, const GaussNewtonParts& parts, int probes = 20,
                                     std::uint64_t seed = 11) {
  Rng rng(seed);
  double worst = 0.0;
  for (int k = 0; k < probes; ++k) {
    const VectorXd v = rng.normal_vector(g.dim());
    const VectorXd gv = g.apply(v);
    const VectorXd sum = parts.a1.apply(v) + parts.a2.apply(v) + parts.b1.apply(v) + parts.b2.apply(v);
    const double denom = gv.norm();
    worst = std::max(worst, denom > 0 ? (gv - sum).norm() / denom : (gv - sum).norm());
  }
  return worst;
}

struct AttributionConfig {
  EstimatorConfig estimator = EstimatorConfig::log_defaults();
  bool log_scale = true;
  int top_iterations = 128;
  int probes = 20;
  std::uint64_t seed = 0;
};

struct AttributionReport {
  std::vector<std::pair<std::string, SpectralDensity>> densities;  // G, G-A1, G-A2, G-B1, G-B2
  std::vector<double> g_top;                // top-C of G by subspace iteration
  std::vector<double> g_top_residuals;
  std::vector<double> a1_eigenvalues;       // descending
  std::vector<double> a2_eigenvalues;
  std::vector<double> b1_eigenvalues;
  std::vector<double> a1_a2_b1_eigenvalues; // spectrum of A1 + A2 + B1
  std::vector<double> b2c_traces;
  double identity_residual = 0.0;
  int num_classes = 0;
  Index total = 0;
};

/// Densities of G and of G minus each part, with the low-rank spectra and
/// B_{2,c} traces needed to attribute outliers and bulks.
inline AttributionReport component_attribution(const SymmetricOperator& g, const GaussNewtonParts& parts,
                                               const AttributionConfig& cfg = {}) {
  AttributionReport report;
  report.num_classes = parts.stats.num_classes;
  report.total = parts.stats.total;
  report.identity_residual = decomposition_residual(g, parts, cfg.probes, derive_seed(cfg.seed, 99));

  const std::vector<std::pair<std::string, SymmetricOperator>> targets = {
      {"G", g},
      {"G-A1", difference_operator(g, parts.a1)},
      {"G-A2", difference_operator(g, parts.a2)},
      {"G-B1", difference_operator(g, parts.b1)},
      {"G-B2", difference_operator(g, parts.b2)},
  };
  for (const auto& [name, op] : targets) {
    SpectralDensity dens = cfg.log_scale ? approx_log_spectrum(op, cfg.estimator, cfg.seed)
                                         : approx_spectrum(op, cfg.estimator, cfg.seed);
    report.densities.emplace_back(name, std::move(dens));
  }

  const int rank = std::min<int>(report.num_classes, static_cast<int>(g.dim()) - 1);
  if (rank >= 1) {
    const TopSpectrum top = subspace_iteration(g, rank, cfg.top_iterations, derive_seed(cfg.seed, 7));
    report.g_top = top.values;
    report.g_top_residuals = top.residuals;
  }
  report.a1_eigenvalues = factor_eigenvalues(parts.a1_factor);
  report.a2_eigenvalues = factor_eigenvalues(parts.a2_factor);
  report.b1_eigenvalues = factor_eigenvalues(parts.b1_factor);
  report.a1_a2_b1_eigenvalues =
      factor_eigenvalues(hstack({&parts.a1_factor, &parts.a2_factor, &parts.b1_factor}, parts.stats.dim));
  report.b2c_traces = parts.b2c_traces;
  return report;
}

}  // namespace hspec
