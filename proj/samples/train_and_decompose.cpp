// Train a small tanh MLP on a Gaussian mixture, then split the Gauss-Newton
// matrix of the trained net into A1 + A2 + B1 + B2 and report who owns the
// outliers.

#include <cstdio>

#include "hspec/hspec.hpp"

using namespace hspec;

int main() {
  GmmSpec g;
  g.classes = 3;
  g.input_dim = 10;
  g.train_per_class = 100;
  g.test_per_class = 100;
  g.separation = 3.0;
  const SplitDataset data = gaussian_mixture(g);

  MlpSpec spec;
  spec.layer_dims = {10, 16, 3};
  TrainConfig cfg;
  cfg.epochs = 30;
  cfg.batch_size = 32;
  const TrainResult run = train_with_evaluation(spec, data.train, data.test, cfg);
  for (const EpochMetrics& m : run.metrics)
    std::printf("epoch %2d  lr %.4f  train err %.3f  test err %.3f  loss %.4f\n", m.epoch, m.lr, m.train_err,
                m.test_err, m.train_loss);

  const ParamVector& theta = run.last.theta;
  const SymmetricOperator gn = hessian_operator(spec, theta, data.train, CurvatureKind::kG);
  const GaussNewtonParts parts = build_parts(spec, theta, data.train);

  AttributionConfig acfg;
  acfg.estimator.grid_points = 256;
  const AttributionReport rep = component_attribution(gn, parts, acfg);

  std::printf("\nidentity residual %.2e\n", rep.identity_residual);
  std::printf("top eigenvalues of G:");
  for (double v : rep.g_top) std::printf(" %.4f", v);
  std::printf("\nA1:");
  for (double v : rep.a1_eigenvalues) std::printf(" %.4f", v);
  std::printf("\nA1+A2+B1:");
  for (std::size_t k = 0; k < std::min<std::size_t>(6, rep.a1_a2_b1_eigenvalues.size()); ++k)
    std::printf(" %.4f", rep.a1_a2_b1_eigenvalues[k]);
  std::printf("\nB2,c traces:");
  for (double v : rep.b2c_traces) std::printf(" %.4f", v);
  std::printf("\n");

  // compare with the top of G above
  const TopSpectrum without_a1 = subspace_iteration(difference_operator(gn, parts.a1), 1, 128, 5);
  std::printf("largest eigenvalue of G - A1: %.4f\n", without_a1.values[0]);
}
