// hspec command-line tool: synth, spectrum, decompose, train, replay.

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "hspec/hspec.hpp"
#include "manifest.hpp"

namespace fs = std::filesystem;

namespace hspec::cli {
namespace {

enum ExitCode { kOk = 0, kFailure = 1, kUsage = 2, kFormat = 3, kNumerical = 4 };

// ---------------------------------------------------------------- run config

struct DataSource {
  std::optional<GmmSpec> gmm;
  fs::path train_images, train_labels, test_images, test_labels;
  Index limit_per_class = 0;
};

struct RunConfig {
  std::vector<int> hidden{16};
  Activation activation = Activation::kTanh;
  DataSource data;
  TrainConfig train;
  fs::path path;
};

fs::path resolve(const fs::path& base, const std::string& p) {
  const fs::path q(p);
  return q.is_absolute() ? q : base / q;
}

RunConfig load_run_config(const fs::path& path) {
  RunConfig cfg;
  cfg.path = path;
  const Json j = parse_json(read_bytes(path), path.string());
  require_known_keys(j, {"model", "data", "train"}, "");
  const fs::path base = path.parent_path();
  try {
    if (j.contains("model")) {
      const Json& m = j["model"];
      require_known_keys(m, {"hidden", "activation"}, "model");
      if (m.contains("hidden")) cfg.hidden = m["hidden"].get<std::vector<int>>();
      if (m.contains("activation")) cfg.activation = activation_from_string(m["activation"].get<std::string>());
    }
    if (!j.contains("data")) throw UsageError("config: missing 'data' section");
    const Json& d = j["data"];
    require_known_keys(d, {"gmm", "idx"}, "data");
    if (d.contains("gmm") == d.contains("idx")) throw UsageError("config: 'data' needs exactly one of gmm, idx");
    if (d.contains("gmm")) {
      cfg.data.gmm = gmm_spec_from_json(d["gmm"], "data.gmm");
    } else {
      const Json& x = d["idx"];
      require_known_keys(x, {"train_images", "train_labels", "test_images", "test_labels", "limit_per_class"}, "data.idx");
      cfg.data.train_images = resolve(base, x.at("train_images").get<std::string>());
      cfg.data.train_labels = resolve(base, x.at("train_labels").get<std::string>());
      if (x.contains("test_images")) cfg.data.test_images = resolve(base, x["test_images"].get<std::string>());
      if (x.contains("test_labels")) cfg.data.test_labels = resolve(base, x["test_labels"].get<std::string>());
      if (x.contains("limit_per_class")) cfg.data.limit_per_class = x["limit_per_class"].get<Index>();
    }
  } catch (const Json::exception& e) {
    throw UsageError(std::string("config: ") + e.what());
  }
  if (j.contains("train")) cfg.train = train_config_from_json(j["train"]);
  for (int h : cfg.hidden)
    if (h < 1) throw UsageError("config: hidden widths must be positive");
  return cfg;
}

SplitDataset load_data(const RunConfig& cfg, RunManifest& manifest) {
  manifest.add_input(cfg.path);
  if (cfg.data.gmm) return gaussian_mixture(*cfg.data.gmm);
  SplitDataset out;
  for (const fs::path& p : {cfg.data.train_images, cfg.data.train_labels}) manifest.add_input(p);
  out.train = load_idx(cfg.data.train_images.string(), cfg.data.train_labels.string(), cfg.data.limit_per_class);
  if (!cfg.data.test_images.empty()) {
    for (const fs::path& p : {cfg.data.test_images, cfg.data.test_labels}) manifest.add_input(p);
    out.test = load_idx(cfg.data.test_images.string(), cfg.data.test_labels.string(), cfg.data.limit_per_class);
    out.test.split = Split::kTest;
    out.test.num_classes = std::max(out.test.num_classes, out.train.num_classes);
    out.train.num_classes = out.test.num_classes;
  }
  return out;
}

MlpSpec model_for(const RunConfig& cfg, const LabeledDataset& train) {
  MlpSpec spec;
  spec.activation = cfg.activation;
  spec.layer_dims.push_back(static_cast<int>(train.inputs.rows()));
  for (int h : cfg.hidden) spec.layer_dims.push_back(h);
  spec.layer_dims.push_back(train.num_classes);
  spec.validate();
  return spec;
}

// ---------------------------------------------------------------- estimator flags

struct EstimatorFlags {
  std::optional<int> iterations;
  int grid = 1024;
  int nvec = 1;
  double kappa = 3.0;
  int range_iterations = 32;
  double tau = 0.05;
  double epsilon = 1e-5;

  void add(CLI::App* cmd) {
    cmd->add_option("--iterations,-M", iterations, "Lanczos iterations (default 128, 2048 with --log)");
    cmd->add_option("--grid,-K", grid, "density grid points")->capture_default_str();
    cmd->add_option("--nvec", nvec, "random starting vectors averaged")->capture_default_str();
    cmd->add_option("--kappa", kappa, "bump width parameter")->capture_default_str();
    cmd->add_option("--range-iterations", range_iterations, "Lanczos steps for the range estimate")->capture_default_str();
    cmd->add_option("--tau", tau, "range margin")->capture_default_str();
    cmd->add_option("--epsilon", epsilon, "log-spectrum offset")->capture_default_str();
  }

  EstimatorConfig build(bool log_mode) const {
    EstimatorConfig c = log_mode ? EstimatorConfig::log_defaults() : EstimatorConfig::linear_defaults();
    if (iterations) c.iterations = *iterations;
    c.grid_points = grid;
    c.repetitions = nvec;
    c.kappa = kappa;
    c.range_iterations = range_iterations;
    c.tau = tau;
    c.epsilon = epsilon;
    return c;
  }
};

Json to_json(const EstimatorConfig& c, bool log_mode) {
  Json j{{"iterations", c.iterations}, {"grid_points", c.grid_points}, {"nvec", c.repetitions}, {"kappa", c.kappa},
         {"range_iterations", c.range_iterations}, {"tau", c.tau}, {"log", log_mode}};
  if (log_mode) j["epsilon"] = c.epsilon;
  return j;
}

Json symmetry_json(const SymmetricOperator& op) {
  const SymmetryReport r = symmetry_probe(op);
  return Json{{"worst_ratio", r.worst_ratio}, {"ok", r.ok}};
}

struct Loaded {
  MlpSpec spec;
  Checkpoint checkpoint;
  LabeledDataset data;
};

Loaded load_checkpoint_and_data(const fs::path& checkpoint, const fs::path& config, const std::string& split,
                                RunManifest& manifest) {
  if (split != "train" && split != "test") throw UsageError("--split must be train or test");
  manifest.add_input(checkpoint);
  Loaded out;
  out.checkpoint = read_checkpoint(checkpoint);
  const RunConfig cfg = load_run_config(config);
  SplitDataset data = load_data(cfg, manifest);
  out.data = split == "train" ? std::move(data.train) : std::move(data.test);
  if (out.data.size() == 0) throw UsageError("the " + split + " split is empty");
  out.spec = out.checkpoint.spec;
  if (out.data.inputs.rows() != out.spec.input_dim())
    throw UsageError("checkpoint expects " + std::to_string(out.spec.input_dim()) + " input features, dataset has " +
                     std::to_string(out.data.inputs.rows()));
  if (out.data.num_classes != out.spec.num_classes())
    throw UsageError("checkpoint has " + std::to_string(out.spec.num_classes()) + " classes, dataset has " +
                     std::to_string(out.data.num_classes));
  return out;
}

// ---------------------------------------------------------------- commands

struct SynthArgs {
  std::string kind = "spiked";
  std::optional<Index> p, n;
  std::vector<double> spikes{5.0, 4.0, 3.0};
  double alpha = 1.0;
  std::uint64_t seed = 0;
  bool no_oracle = false;
};

void cmd_synth(const SynthArgs& a, const fs::path& out, RunManifest& manifest) {
  EnsembleSpec spec;
  spec.kind = ensemble_from_string(a.kind);
  if (spec.kind == EnsembleKind::kParetoWishart) spec = EnsembleSpec::pareto_default();
  if (spec.kind == EnsembleKind::kGoe) spec = EnsembleSpec::goe(2000);
  // Wishart kinds keep the default aspect ratio n/p when only p is given
  if (a.p) {
    spec.n = spec.n / spec.p * *a.p;
    spec.p = *a.p;
  }
  if (a.n) spec.n = *a.n;
  spec.spikes = spec.kind == EnsembleKind::kSpikedWishart ? a.spikes : std::vector<double>{};
  spec.alpha = a.alpha;
  spec.seed = a.seed;
  spec.validate();

  manifest.parameters() = Json{{"kind", to_string(spec.kind)}, {"p", spec.p},          {"n", spec.n},
                               {"spikes", spec.spikes},         {"alpha", spec.alpha}, {"oracle", !a.no_oracle}};
  manifest.seeds()["ensemble"] = spec.seed;

  const MatrixXd y = sample(spec);
  manifest.write_output(out, "matrix.hspm", encode_matrix(y));
  if (!a.no_oracle) {
    if (spec.p > kDenseOracleCap) {
      std::cerr << "note: p exceeds the dense oracle cap " << kDenseOracleCap << "; skipping oracle spectrum\n";
    } else {
      const EigenPairs eig = dense_eig(y, false);
      manifest.write_output(out, "oracle_spectrum.csv", eigenvalue_csv(eig.values, kManifestName));
    }
  }
}

struct SpectrumArgs {
  fs::path matrix, checkpoint, config;
  std::string which = "hess";
  std::string split = "train";
  EstimatorFlags est;
  bool log_mode = false;
  int deflate = 0;
  int subspace_iterations = 128;
  std::uint64_t seed = 0;
};

void cmd_spectrum(const SpectrumArgs& a, const fs::path& out, RunManifest& manifest) {
  const bool from_matrix = !a.matrix.empty();
  if (from_matrix == !a.checkpoint.empty())
    throw UsageError("spectrum needs either --matrix or --checkpoint (with --config)");
  if (!from_matrix && a.config.empty()) throw UsageError("--checkpoint needs --config to rebuild the dataset");
  if (a.deflate < 0) throw UsageError("--deflate must be >= 0");

  std::optional<SymmetricOperator> op;
  Json input;
  if (from_matrix) {
    manifest.add_input(a.matrix);
    op = dense_operator(read_matrix(a.matrix), "matrix");
    input = Json{{"matrix", a.matrix.string()}};
  } else {
    Loaded l = load_checkpoint_and_data(a.checkpoint, a.config, a.split, manifest);
    op = hessian_operator(l.spec, l.checkpoint.theta, l.data, curvature_from_string(a.which));
    input = Json{{"checkpoint", a.checkpoint.string()}, {"config", a.config.string()}, {"which", a.which},
                 {"split", a.split}, {"epoch", l.checkpoint.epoch}};
  }

  const EstimatorConfig est = a.est.build(a.log_mode);
  manifest.parameters() = Json{{"input", input},
                               {"estimator", to_json(est, a.log_mode)},
                               {"deflate", a.deflate},
                               {"subspace_iterations", a.subspace_iterations}};
  manifest.seeds() = Json{{"seed", a.seed}, {"estimator", derive_seed(a.seed, 1)}, {"deflation", derive_seed(a.seed, 2)}};

  Json report;
  report["manifest"] = manifest.identity();
  report["operator"] = Json{{"label", op->label()}, {"dim", op->dim()}, {"symmetry", symmetry_json(*op)}};

  SymmetricOperator target = *op;
  if (a.deflate > 0) {
    Deflation d = low_rank_deflation(*op, a.deflate, a.subspace_iterations, derive_seed(a.seed, 2));
    Json top = hspec::to_json(d.top);
    top["manifest"] = manifest.identity();
    manifest.write_output(out, "top_spectrum.json", top.dump(2) + "\n");
    report["deflated_symmetry"] = symmetry_json(d.deflated);
    target = d.deflated;
  }
  const SpectralDensity dens = a.log_mode ? approx_log_spectrum(target, est, derive_seed(a.seed, 1))
                                          : approx_spectrum(target, est, derive_seed(a.seed, 1));
  report["density"] = hspec::to_json(dens);
  manifest.write_output(out, "density.csv", density_csv(dens, kManifestName));
  manifest.write_output(out, "density.json", report.dump(2) + "\n");
}

struct DecomposeArgs {
  fs::path checkpoint, config;
  std::string split = "train";
  EstimatorFlags est;
  bool linear = false;
  int top_iterations = 128;
  int probes = 20;
  std::uint64_t seed = 0;
};

/// Identity residual accepted in the decomposition report.
constexpr double kIdentityTolerance = 1e-10;
/// Above this many stored reals (n * C * p) B2 is recomputed per matvec.
constexpr double kInMemoryLimit = 5e7;

void cmd_decompose(const DecomposeArgs& a, const fs::path& out, RunManifest& manifest) {
  Loaded l = load_checkpoint_and_data(a.checkpoint, a.config, a.split, manifest);
  AttributionConfig cfg;
  cfg.log_scale = !a.linear;
  cfg.estimator = a.est.build(cfg.log_scale);
  cfg.top_iterations = a.top_iterations;
  cfg.probes = a.probes;
  cfg.seed = a.seed;
  const double stored = static_cast<double>(l.data.size()) * l.spec.num_classes() * l.spec.param_count();
  const bool streaming = stored > kInMemoryLimit;
  manifest.parameters() = Json{{"input", Json{{"checkpoint", a.checkpoint.string()}, {"config", a.config.string()},
                                              {"split", a.split}, {"epoch", l.checkpoint.epoch}}},
                               {"estimator", to_json(cfg.estimator, cfg.log_scale)},
                               {"top_iterations", cfg.top_iterations},
                               {"probes", cfg.probes},
                               {"streaming", streaming}};
  manifest.seeds()["seed"] = a.seed;

  const SymmetricOperator g = hessian_operator(l.spec, l.checkpoint.theta, l.data, CurvatureKind::kG);
  const GaussNewtonParts parts = streaming ? build_parts_streaming(l.spec, l.checkpoint.theta, l.data)
                                           : build_parts(l.spec, l.checkpoint.theta, l.data);
  const AttributionReport rep = component_attribution(g, parts, cfg);
  Json j;
  j["manifest"] = manifest.identity();
  j["identity_tolerance"] = kIdentityTolerance;
  j["identity_ok"] = rep.identity_residual <= kIdentityTolerance;
  j["report"] = hspec::to_json(rep);
  manifest.write_output(out, "report.json", j.dump(2) + "\n");
  if (!(rep.identity_residual <= kIdentityTolerance))
    throw NumericalError("decomposition identity residual " + format_double(rep.identity_residual) +
                         " exceeds tolerance");
}

struct TrainArgs {
  fs::path config, resume;
};

std::string checkpoint_name(int epoch) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "checkpoints/epoch_%04d.json", epoch);
  return buf;
}

void cmd_train(const TrainArgs& a, const fs::path& out, RunManifest& manifest) {
  const RunConfig cfg = load_run_config(a.config);
  const SplitDataset data = load_data(cfg, manifest);
  const MlpSpec spec = model_for(cfg, data.train);
  std::optional<Checkpoint> start;
  if (!a.resume.empty()) {
    manifest.add_input(a.resume);
    start = read_checkpoint(a.resume);
    if (start->spec.layer_dims != spec.layer_dims || start->spec.activation != spec.activation)
      throw UsageError("resume checkpoint was produced by a different model");
    if (start->seed != cfg.train.seed) throw UsageError("resume checkpoint was produced with a different seed");
  }
  manifest.parameters() = Json{{"model", hspec::to_json(spec)},
                               {"train", hspec::to_json(cfg.train)},
                               {"train_examples", data.train.size()},
                               {"test_examples", data.test.size()},
                               {"resume_epoch", start ? start->epoch : 0}};
  manifest.seeds()["train"] = cfg.train.seed;
  if (cfg.data.gmm) manifest.seeds()["data"] = cfg.data.gmm->seed;

  const TrainResult result = train_with_evaluation(spec, data.train, data.test, cfg.train, start);
  for (const Checkpoint& c : result.checkpoints)
    manifest.write_output(out, checkpoint_name(c.epoch), hspec::to_json(c).dump() + "\n");
  manifest.write_output(out, "metrics.csv", metrics_csv(result.metrics, kManifestName));
  if (result.diverged) {
    manifest.write_output(out, "last_good.json", hspec::to_json(result.last).dump() + "\n");
    throw NumericalError("training diverged: " + result.failure + " (last good epoch " +
                         std::to_string(result.last.epoch) + ")");
  }
  manifest.write_output(out, "final.json", hspec::to_json(result.last).dump() + "\n");
}

// ---------------------------------------------------------------- dispatch

int run(const std::vector<std::string>& args);

int dispatch(const std::vector<std::string>& args) {
  CLI::App app{"Spectral densities of large symmetric operators and network Hessians"};
  app.require_subcommand(1);
  app.set_version_flag("--version", HSPEC_VERSION);
  fs::path out;
  auto add_out = [&](CLI::App* cmd) { cmd->add_option("--out,-o", out, "output directory")->required(); };

  SynthArgs synth;
  CLI::App* c_synth = app.add_subcommand("synth", "sample a synthetic ensemble and its oracle spectrum");
  c_synth->add_option("--kind", synth.kind, "spiked, pareto or goe")->capture_default_str();
  c_synth->add_option("--p", synth.p, "dimension");
  c_synth->add_option("--n", synth.n, "samples per Wishart draw");
  c_synth->add_option("--spikes", synth.spikes, "spike values")->delimiter(',');
  c_synth->add_option("--alpha", synth.alpha, "Pareto index")->capture_default_str();
  c_synth->add_option("--seed", synth.seed)->capture_default_str();
  c_synth->add_flag("--no-oracle", synth.no_oracle, "skip the dense eigendecomposition");
  add_out(c_synth);

  SpectrumArgs spec_args;
  CLI::App* c_spec = app.add_subcommand("spectrum", "estimate a spectral density");
  c_spec->add_option("--matrix", spec_args.matrix, "dense matrix file");
  c_spec->add_option("--checkpoint", spec_args.checkpoint, "checkpoint file");
  c_spec->add_option("--config", spec_args.config, "run config that produced the checkpoint");
  c_spec->add_option("--which", spec_args.which, "hess, g or h")->capture_default_str();
  c_spec->add_option("--split", spec_args.split, "train or test")->capture_default_str();
  spec_args.est.add(c_spec);
  c_spec->add_flag("--log", spec_args.log_mode, "density of log(|lambda| + epsilon)");
  c_spec->add_option("--deflate", spec_args.deflate, "outliers to remove first")->capture_default_str();
  c_spec->add_option("--subspace-iterations", spec_args.subspace_iterations)->capture_default_str();
  c_spec->add_option("--seed", spec_args.seed)->capture_default_str();
  add_out(c_spec);

  DecomposeArgs dec;
  CLI::App* c_dec = app.add_subcommand("decompose", "attribute G's spectrum to A1, A2, B1, B2");
  c_dec->add_option("--checkpoint", dec.checkpoint)->required();
  c_dec->add_option("--config", dec.config)->required();
  c_dec->add_option("--split", dec.split)->capture_default_str();
  dec.est.add(c_dec);
  c_dec->add_flag("--linear", dec.linear, "linear densities instead of log densities");
  c_dec->add_option("--top-iterations", dec.top_iterations)->capture_default_str();
  c_dec->add_option("--probes", dec.probes)->capture_default_str();
  c_dec->add_option("--seed", dec.seed)->capture_default_str();
  add_out(c_dec);

  TrainArgs tr;
  CLI::App* c_train = app.add_subcommand("train", "train an MLP and write checkpoints");
  c_train->add_option("--config", tr.config, "run config (JSON)")->required();
  c_train->add_option("--resume", tr.resume, "continue from this checkpoint");
  add_out(c_train);

  fs::path manifest_path;
  CLI::App* c_replay = app.add_subcommand("replay", "re-run the command recorded in a manifest");
  c_replay->add_option("--manifest", manifest_path)->required();
  add_out(c_replay);

  std::vector<const char*> argv{"hspec"};
  for (const std::string& s : args) argv.push_back(s.c_str());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::Success& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kUsage;
  }

  if (c_replay->parsed()) {
    const Json m = parse_json(read_bytes(manifest_path), manifest_path.string());
    std::vector<std::string> replay_args;
    try {
      replay_args = m.at("args").get<std::vector<std::string>>();
    } catch (const Json::exception& e) {
      throw FormatError(FormatError::Kind::kSchema, std::string("manifest: ") + e.what());
    }
    replay_args.push_back("--out");
    replay_args.push_back(out.string());
    return run(replay_args);
  }

  // the recorded args omit the output directory so a replay can redirect it
  std::vector<std::string> recorded;
  for (std::size_t i = 0; i < args.size(); ++i) {
    if (args[i] == "--out" || args[i] == "-o") {
      ++i;
      continue;
    }
    if (args[i].rfind("--out=", 0) == 0) continue;
    recorded.push_back(args[i]);
  }
  const std::string command = app.get_subcommands().front()->get_name();
  RunManifest manifest(command, recorded);
  fs::create_directories(out);
  try {
    if (c_synth->parsed()) cmd_synth(synth, out, manifest);
    if (c_spec->parsed()) cmd_spectrum(spec_args, out, manifest);
    if (c_dec->parsed()) cmd_decompose(dec, out, manifest);
    if (c_train->parsed()) cmd_train(tr, out, manifest);
  } catch (const NumericalError&) {
    // partial outputs (last good checkpoint, failing report) still get a manifest
    manifest.finish(out);
    throw;
  }
  manifest.finish(out);
  return kOk;
}

int run(const std::vector<std::string>& args) {
  try {
    return dispatch(args);
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return kUsage;
  } catch (const FormatError& e) {
    std::cerr << "input error: " << e.what() << "\n";
    return kFormat;
  } catch (const NumericalError& e) {
    std::cerr << "numerical failure: " << e.what() << "\n";
    return kNumerical;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kFailure;
  }
}

}  // namespace
}  // namespace hspec::cli

int main(int argc, char** argv) {
  return hspec::cli::run(std::vector<std::string>(argv + 1, argv + argc));
}
