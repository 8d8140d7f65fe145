#pragma once

// File formats: dense matrix files, checkpoints, CSV series and JSON reports.
// Byte layouts are documented in docs/formats.md.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "hspec/decomp.hpp"
#include "hspec/deflation.hpp"
#include "hspec/density.hpp"
#include "hspec/error.hpp"
#include "hspec/net.hpp"
#include "hspec/pipeline.hpp"

namespace hspec {

using Json = nlohmann::ordered_json;

static_assert(std::endian::native == std::endian::little, "file formats assume a little-endian host");

inline constexpr char kMatrixMagic[4] = {'H', 'S', 'P', 'M'};
inline constexpr std::uint32_t kMatrixVersion = 1;
inline constexpr int kCheckpointVersion = 1;
inline constexpr const char* kCsvTag = "hspec-csv v1";

/// Writes to a sibling temporary file, then renames over `path`.
inline void atomic_write(const std::filesystem::path& path, const std::string& bytes) {
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw FormatError(FormatError::Kind::kIo, "cannot write '" + tmp.string() + "'");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw FormatError(FormatError::Kind::kIo, "short write to '" + tmp.string() + "'");
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw FormatError(FormatError::Kind::kIo, "cannot rename onto '" + path.string() + "': " + ec.message());
}

inline std::string read_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError(FormatError::Kind::kIo, "cannot open '" + path.string() + "'");
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

// ---------------------------------------------------------------- matrices

inline std::string encode_matrix(const MatrixXd& a) {
  if (a.rows() != a.cols()) throw UsageError("matrix file holds square matrices only");
  const std::uint64_t dim = static_cast<std::uint64_t>(a.rows());
  std::string out(16 + 8 * dim * dim, '\0');
  std::memcpy(out.data(), kMatrixMagic, 4);
  std::memcpy(out.data() + 4, &kMatrixVersion, 4);
  std::memcpy(out.data() + 8, &dim, 8);
  char* at = out.data() + 16;
  for (Index i = 0; i < a.rows(); ++i)
    for (Index j = 0; j < a.cols(); ++j, at += 8) {
      const double v = a(i, j);
      std::memcpy(at, &v, 8);
    }
  return out;
}

inline MatrixXd decode_matrix(const std::string& bytes) {
  if (bytes.size() < 16) throw FormatError(FormatError::Kind::kTruncated, "matrix file: header truncated");
  if (std::memcmp(bytes.data(), kMatrixMagic, 4) != 0) throw FormatError(FormatError::Kind::kMagic, "matrix file: bad magic");
  std::uint32_t version = 0;
  std::uint64_t dim = 0;
  std::memcpy(&version, bytes.data() + 4, 4);
  std::memcpy(&dim, bytes.data() + 8, 8);
  if (version != kMatrixVersion)
    throw FormatError(FormatError::Kind::kSchema, "matrix file: unsupported version " + std::to_string(version));
  if (dim > (1ULL << 20) || bytes.size() - 16 != 8 * dim * dim)
    throw FormatError(FormatError::Kind::kTruncated, "matrix file: payload does not hold " + std::to_string(dim) + "^2 values");
  MatrixXd a(static_cast<Index>(dim), static_cast<Index>(dim));
  const char* at = bytes.data() + 16;
  for (Index i = 0; i < a.rows(); ++i)
    for (Index j = 0; j < a.cols(); ++j, at += 8) std::memcpy(&a(i, j), at, 8);
  return a;
}

inline void write_matrix(const std::filesystem::path& path, const MatrixXd& a) { atomic_write(path, encode_matrix(a)); }
inline MatrixXd read_matrix(const std::filesystem::path& path) { return decode_matrix(read_bytes(path)); }

// ---------------------------------------------------------------- JSON helpers

inline Json to_json_array(const VectorXd& v) {
  Json a = Json::array();
  for (Index i = 0; i < v.size(); ++i) a.push_back(v[i]);
  return a;
}

inline VectorXd vector_from_json(const Json& a, const std::string& what) {
  if (!a.is_array()) throw FormatError(FormatError::Kind::kSchema, what + ": expected an array");
  VectorXd v(static_cast<Index>(a.size()));
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (!a[i].is_number()) throw FormatError(FormatError::Kind::kSchema, what + ": non-numeric entry");
    v[static_cast<Index>(i)] = a[i].get<double>();
  }
  return v;
}

/// Rejects keys outside `allowed`, naming the first offender with its path.
inline void require_known_keys(const Json& obj, const std::set<std::string>& allowed, const std::string& where) {
  if (!obj.is_object()) throw UsageError((where.empty() ? std::string("config") : where) + ": expected an object");
  for (const auto& item : obj.items())
    if (!allowed.count(item.key()))
      throw UsageError("unknown config key '" + (where.empty() ? "" : where + ".") + item.key() + "'");
}

inline Json to_json(const NormalizationMap& m) {
  return Json{{"center", m.center},       {"half_width", m.half_width}, {"lambda_min", m.lambda_min},
              {"lambda_max", m.lambda_max}, {"margin", m.margin},         {"tau", m.tau}};
}

inline Json to_json(const RitzSummary& r) {
  return Json{{"seed", r.seed},         {"iterations", r.iterations}, {"breakdown", r.breakdown},
              {"weight_sum", r.weight_sum()}, {"theta", r.theta},      {"weight", r.weight}};
}

/// Report form of a density. Ritz values are in normalized coordinates.
inline Json to_json(const SpectralDensity& d) {
  Json j;
  j["scale"] = d.scale == DensityScale::kLog ? "log" : "linear";
  j["sigma"] = d.sigma;
  j["integral"] = d.integral();
  j["normalization"] = to_json(d.normalization);
  if (d.scale == DensityScale::kLog) {
    j["epsilon"] = d.epsilon;
    j["log_normalization"] = to_json(d.log_normalization);
    j["negative_mass"] = d.negative_mass;
  }
  j["grid"] = to_json_array(d.grid);
  j["density"] = to_json_array(d.scale == DensityScale::kLog ? VectorXd(d.values + d.negative_values) : d.values);
  if (d.scale == DensityScale::kLog) {
    j["density_positive"] = to_json_array(d.values);
    j["density_negative"] = to_json_array(d.negative_values);
    j["per_eigenvalue_positive"] = to_json_array(d.eigen_values);
    j["per_eigenvalue_negative"] = to_json_array(d.negative_eigen_values);
  }
  Json ritz = Json::array();
  for (const RitzSummary& r : d.ritz) ritz.push_back(to_json(r));
  j["ritz"] = std::move(ritz);
  j["notes"] = d.notes;
  return j;
}

inline Json to_json(const TopSpectrum& t) {
  return Json{{"rank", t.rank()},
              {"values", t.values},
              {"residuals", t.residuals},
              {"block_norms", t.block_norms},
              {"resamples", t.resamples}};
}

inline Json to_json(const AttributionReport& r) {
  Json j;
  j["num_classes"] = r.num_classes;
  j["examples"] = r.total;
  j["identity_residual"] = r.identity_residual;
  Json dens = Json::object();
  for (const auto& [name, d] : r.densities) dens[name] = to_json(d);
  j["densities"] = std::move(dens);
  j["g_top"] = Json{{"values", r.g_top}, {"residuals", r.g_top_residuals}};
  j["eigenvalues"] = Json{{"A1", r.a1_eigenvalues},
                          {"A2", r.a2_eigenvalues},
                          {"B1", r.b1_eigenvalues},
                          {"A1+A2+B1", r.a1_a2_b1_eigenvalues}};
  j["b2c_traces"] = r.b2c_traces;
  return j;
}

// ---------------------------------------------------------------- models and checkpoints

inline Json to_json(const MlpSpec& s) { return Json{{"layers", s.layer_dims}, {"activation", to_string(s.activation)}}; }

inline MlpSpec mlp_spec_from_json(const Json& j) {
  try {
    MlpSpec s;
    s.layer_dims = j.at("layers").get<std::vector<int>>();
    s.activation = activation_from_string(j.at("activation").get<std::string>());
    s.validate();
    return s;
  } catch (const Json::exception& e) {
    throw FormatError(FormatError::Kind::kSchema, std::string("model spec: ") + e.what());
  }
}

inline Json to_json(const Checkpoint& c) {
  return Json{{"format", "hspec-checkpoint"}, {"version", kCheckpointVersion},
              {"spec", to_json(c.spec)},      {"epoch", c.epoch},
              {"seed", c.seed},               {"theta", to_json_array(c.theta)},
              {"velocity", to_json_array(c.velocity)}};
}

inline Checkpoint checkpoint_from_json(const Json& j) {
  try {
    if (j.at("format").get<std::string>() != "hspec-checkpoint")
      throw FormatError(FormatError::Kind::kMagic, "checkpoint: wrong format tag");
    if (j.at("version").get<int>() != kCheckpointVersion)
      throw FormatError(FormatError::Kind::kSchema, "checkpoint: unsupported version");
    Checkpoint c;
    c.spec = mlp_spec_from_json(j.at("spec"));
    c.epoch = j.at("epoch").get<int>();
    c.seed = j.at("seed").get<std::uint64_t>();
    c.theta = vector_from_json(j.at("theta"), "checkpoint theta");
    c.velocity = vector_from_json(j.at("velocity"), "checkpoint velocity");
    if (c.theta.size() != c.spec.param_count() || c.velocity.size() != c.theta.size())
      throw FormatError(FormatError::Kind::kCountMismatch, "checkpoint: parameter count does not match the model");
    return c;
  } catch (const Json::exception& e) {
    throw FormatError(FormatError::Kind::kSchema, std::string("checkpoint: ") + e.what());
  }
}

inline void write_checkpoint(const std::filesystem::path& path, const Checkpoint& c) {
  atomic_write(path, to_json(c).dump() + "\n");
}

inline Json parse_json(const std::string& text, const std::string& what) {
  try {
    return Json::parse(text);
  } catch (const Json::exception& e) {
    throw FormatError(FormatError::Kind::kSchema, what + ": " + e.what());
  }
}

inline Checkpoint read_checkpoint(const std::filesystem::path& path) {
  return checkpoint_from_json(parse_json(read_bytes(path), path.string()));
}

inline Json to_json(const TrainConfig& c) {
  return Json{{"lr", c.lr},
              {"momentum", c.momentum},
              {"weight_decay", c.weight_decay},
              {"batch_size", c.batch_size},
              {"epochs", c.epochs},
              {"anneal", c.anneal},
              {"seed", c.seed},
              {"checkpoint_epochs", c.checkpoint_set()}};
}

/// Fields present in `j` override the defaults; unknown keys are usage errors.
inline TrainConfig train_config_from_json(const Json& j, const std::string& where = "train") {
  require_known_keys(j, {"lr", "momentum", "weight_decay", "batch_size", "epochs", "anneal", "seed", "checkpoint_epochs"},
                     where);
  TrainConfig c;
  try {
    if (j.contains("lr")) c.lr = j["lr"].get<double>();
    if (j.contains("momentum")) c.momentum = j["momentum"].get<double>();
    if (j.contains("weight_decay")) c.weight_decay = j["weight_decay"].get<double>();
    if (j.contains("batch_size")) c.batch_size = j["batch_size"].get<Index>();
    if (j.contains("epochs")) c.epochs = j["epochs"].get<int>();
    if (j.contains("anneal")) c.anneal = j["anneal"].get<bool>();
    if (j.contains("seed")) c.seed = j["seed"].get<std::uint64_t>();
    if (j.contains("checkpoint_epochs")) c.checkpoint_epochs = j["checkpoint_epochs"].get<std::vector<int>>();
  } catch (const Json::exception& e) {
    throw UsageError(where + ": " + e.what());
  }
  c.validate();
  return c;
}

inline Json to_json(const GmmSpec& g) {
  return Json{{"classes", g.classes},       {"train_per_class", g.train_per_class},
              {"test_per_class", g.test_per_class}, {"input_dim", g.input_dim},
              {"separation", g.separation}, {"std", g.std_dev},
              {"seed", g.seed}};
}

inline GmmSpec gmm_spec_from_json(const Json& j, const std::string& where = "gmm") {
  require_known_keys(j, {"classes", "train_per_class", "test_per_class", "input_dim", "separation", "std", "seed"}, where);
  GmmSpec g;
  try {
    if (j.contains("classes")) g.classes = j["classes"].get<int>();
    if (j.contains("train_per_class")) g.train_per_class = j["train_per_class"].get<Index>();
    if (j.contains("test_per_class")) g.test_per_class = j["test_per_class"].get<Index>();
    if (j.contains("input_dim")) g.input_dim = j["input_dim"].get<int>();
    if (j.contains("separation")) g.separation = j["separation"].get<double>();
    if (j.contains("std")) g.std_dev = j["std"].get<double>();
    if (j.contains("seed")) g.seed = j["seed"].get<std::uint64_t>();
  } catch (const Json::exception& e) {
    throw UsageError(where + ": " + e.what());
  }
  g.validate();
  return g;
}

// ---------------------------------------------------------------- CSV

inline std::string format_double(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

inline std::string csv_header(const std::string& manifest) { return std::string("# ") + kCsvTag + " manifest=" + manifest + "\n"; }

/// grid_value,density; for log densities the grid is u = log(|lambda| + eps)
/// and the density column sums both sign branches.
inline std::string density_csv(const SpectralDensity& d, const std::string& manifest) {
  std::string out = csv_header(manifest) + "grid_value,density\n";
  for (Index k = 0; k < d.grid.size(); ++k) {
    double v = d.values[k];
    if (d.negative_values.size() == d.grid.size()) v += d.negative_values[k];
    out += format_double(d.grid[k]) + "," + format_double(v) + "\n";
  }
  return out;
}

inline std::string eigenvalue_csv(const VectorXd& values, const std::string& manifest) {
  std::string out = csv_header(manifest) + "index,eigenvalue\n";
  for (Index k = 0; k < values.size(); ++k) out += std::to_string(k) + "," + format_double(values[k]) + "\n";
  return out;
}

inline std::string metrics_csv(const std::vector<EpochMetrics>& rows, const std::string& manifest) {
  std::string out = csv_header(manifest) + "epoch,lr,train_err,test_err,train_loss,test_loss\n";
  for (const EpochMetrics& r : rows)
    out += std::to_string(r.epoch) + "," + format_double(r.lr) + "," + format_double(r.train_err) + "," +
           format_double(r.test_err) + "," + format_double(r.train_loss) + "," + format_double(r.test_loss) + "\n";
  return out;
}

}  // namespace hspec
