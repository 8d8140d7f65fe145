// Density of a spiked Wishart matrix, before and after removing its outliers.
//
//   spiked_density [p]
//
// Prints a coarse text histogram of both estimates and the recovered spikes.

#include <cstdio>
#include <cstdlib>

#include "hspec/hspec.hpp"

using namespace hspec;

static void show(const char* title, const SpectralDensity& d) {
  std::printf("%s\n", title);
  const Index bins = 32, width = d.grid.size() / bins;
  VectorXd mass(bins);
  for (Index b = 0; b < bins; ++b) mass[b] = d.values.segment(b * width, width).mean();
  const double peak = mass.maxCoeff();
  for (Index b = 0; b < bins; ++b) {
    const int bar = static_cast<int>(60.0 * mass[b] / peak + 0.5);
    std::printf("%9.3f | %-60.*s %.3g\n", d.grid[b * width + width / 2], bar,
                "############################################################", mass[b]);
  }
}

int main(int argc, char** argv) {
  EnsembleSpec spec = EnsembleSpec::spiked_default();
  if (argc > 1) spec.p = spec.n = std::atol(argv[1]);
  const SymmetricOperator op = dense_operator(sample(spec), "spiked");

  EstimatorConfig cfg;
  cfg.repetitions = 10;
  show("full operator", approx_spectrum(op, cfg, 1));

  const Deflation d = low_rank_deflation(op, 3, 128, 2);
  std::printf("\ntop eigenvalues:");
  for (double v : d.top.values) std::printf(" %.4f", v);
  std::printf("  (bulk edge %.4f)\n\n", MarchenkoPastur(1.0, 1.0).upper());
  show("deflated operator", approx_spectrum(d.deflated, cfg, 1));
}
