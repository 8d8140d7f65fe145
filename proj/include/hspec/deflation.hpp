#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "hspec/error.hpp"
#include "hspec/linalg.hpp"
#include "hspec/operator.hpp"
#include "hspec/random.hpp"

namespace hspec {

/// Top-C eigenpair estimates, ordered by |value| descending.
struct TopSpectrum {
  std::vector<double> values;
  MatrixXd basis;                  // p x C, orthonormal
  std::vector<double> residuals;   // ||A q - theta q||
  std::vector<double> block_norms; // ||A q_c|| from the last iteration
  int resamples = 0;               // columns redrawn after QR rank loss

  std::size_t rank() const { return values.size(); }
};

/// Resample rounds allowed within a single orthonormalization.
inline constexpr int kMaxResampleRounds = 8;

namespace detail {

inline MatrixXd orthonormalize_with_resampling(MatrixXd v, Rng& rng, int& resamples) {
  for (int round = 0;; ++round) {
    QrResult qr = qr_orthonormalize(v);
    if (qr.deficient.empty()) return std::move(qr.q);
    if (round == kMaxResampleRounds)
      throw NumericalError("subspace_iteration: block stays rank deficient after " +
                           std::to_string(kMaxResampleRounds) + " resampling rounds");
    for (Index c : qr.deficient) {
      qr.q.col(c) = rng.normal_vector(v.rows()).normalized();
      ++resamples;
    }
    v = std::move(qr.q);
  }
}

}  // namespace detail

/// Block power iteration V = A Q, Q = QR(V) for a fixed number of rounds,
/// finished with a Rayleigh-Ritz step so that each returned value is the
/// Rayleigh quotient of its basis column.
inline TopSpectrum subspace_iteration(const SymmetricOperator& op, int rank, int iterations = 128,
                                      std::uint64_t seed = 0) {
  const Index p = op.dim();
  if (rank < 1 || rank >= p)
    throw UsageError("subspace_iteration: rank must satisfy 1 <= C < p (C = " + std::to_string(rank) +
                     ", p = " + std::to_string(p) + ")");
  if (iterations < 0) throw UsageError("subspace_iteration: iteration count must be >= 0");

  TopSpectrum out;
  Rng rng(seed);
  MatrixXd v(p, rank);
  for (int c = 0; c < rank; ++c) v.col(c) = rng.normal_vector(p).normalized();
  MatrixXd q = detail::orthonormalize_with_resampling(std::move(v), rng, out.resamples);

  auto apply_block = [&](const MatrixXd& block) {
    MatrixXd image(p, block.cols());
    for (Index c = 0; c < block.cols(); ++c) image.col(c) = op.apply(block.col(c));
    return image;
  };

  for (int it = 0; it < iterations; ++it) q = detail::orthonormalize_with_resampling(apply_block(q), rng, out.resamples);

  MatrixXd aq = apply_block(q);
  MatrixXd small = q.transpose() * aq;
  small = 0.5 * (small + small.transpose());
  Eigen::SelfAdjointEigenSolver<MatrixXd> rr(small);
  if (rr.info() != Eigen::Success) throw NumericalError("subspace_iteration: Rayleigh-Ritz step failed");
  const MatrixXd rotated_q = q * rr.eigenvectors();
  const MatrixXd rotated_aq = aq * rr.eigenvectors();

  std::vector<Index> order(rank);
  std::iota(order.begin(), order.end(), Index{0});
  const VectorXd ritz = rr.eigenvalues();
  std::stable_sort(order.begin(), order.end(),
                   [&](Index a, Index b) { return std::abs(ritz[a]) > std::abs(ritz[b]); });

  out.basis.resize(p, rank);
  for (int c = 0; c < rank; ++c) {
    const Index src = order[c];
    out.basis.col(c) = rotated_q.col(src);
    const double theta = rotated_q.col(src).dot(rotated_aq.col(src));
    out.values.push_back(theta);
    out.residuals.push_back((rotated_aq.col(src) - theta * rotated_q.col(src)).norm());
    out.block_norms.push_back(rotated_aq.col(src).norm());
  }
  return out;
}

struct Deflation {
  TopSpectrum top;
  SymmetricOperator deflated;
};

/// Extract the top-C pairs and project them out. C = 0 returns op unchanged.
inline Deflation low_rank_deflation(const SymmetricOperator& op, int rank, int iterations = 128,
                                    std::uint64_t seed = 0) {
  if (rank == 0) return {TopSpectrum{{}, MatrixXd(op.dim(), 0), {}, {}, 0}, op};
  TopSpectrum top = subspace_iteration(op, rank, iterations, seed);
  SymmetricOperator deflated = deflated_operator(op, top.basis);
  return {std::move(top), std::move(deflated)};
}

}  // namespace hspec
