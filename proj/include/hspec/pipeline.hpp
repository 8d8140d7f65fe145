#pragma once

// Data generation, IDX ingestion and the SGD training loop.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <functional>
#include <iterator>
#include <limits>
#include <numeric>
#include <optional>
#include <random>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "hspec/error.hpp"
#include "hspec/linalg.hpp"
#include "hspec/net.hpp"
#include "hspec/random.hpp"

namespace hspec {

// ---------------------------------------------------------------- GMM data

struct GmmSpec {
  int classes = 3;
  Index train_per_class = 100;
  Index test_per_class = 100;
  int input_dim = 10;
  double separation = 4.0;
  double std_dev = 1.0;
  std::uint64_t seed = 0;

  void validate() const {
    if (classes < 1) throw UsageError("gmm: class count must be >= 1");
    if (input_dim < 1) throw UsageError("gmm: input dimension must be >= 1");
    if (train_per_class < 1 || test_per_class < 0) throw UsageError("gmm: per-class counts must be positive");
    if (!(separation >= 0.0) || !std::isfinite(separation)) throw UsageError("gmm: separation must be >= 0");
    if (!(std_dev >= 0.0) || !std::isfinite(std_dev)) throw UsageError("gmm: std must be >= 0");
    if (classes > input_dim)
      throw UsageError("gmm: " + std::to_string(classes) + " orthonormal class means do not fit in " +
                       std::to_string(input_dim) + " dimensions");
  }
};

struct SplitDataset {
  LabeledDataset train;
  LabeledDataset test;
  MatrixXd means;  // input_dim x C
};

/// Class means separation * q_c with q_c orthonormal; isotropic samples around
/// them. Examples cycle through the classes (label of example k is k mod C).
inline SplitDataset gaussian_mixture(const GmmSpec& spec) {
  spec.validate();
  Rng mean_rng(derive_seed(spec.seed, 0));
  QrResult qr = qr_orthonormalize(mean_rng.normal_matrix(spec.input_dim, spec.classes));
  if (!qr.deficient.empty()) throw NumericalError("gmm: degenerate draw of class directions");
  SplitDataset out;
  out.means = spec.separation * qr.q;

  auto draw = [&](Index per_class, Split split, std::uint64_t stream) {
    Rng rng(derive_seed(spec.seed, stream));
    LabeledDataset d;
    d.num_classes = spec.classes;
    d.split = split;
    const Index n = per_class * spec.classes;
    d.inputs.resize(spec.input_dim, n);
    d.labels.resize(static_cast<std::size_t>(n));
    for (Index k = 0; k < n; ++k) {
      const int c = static_cast<int>(k % spec.classes);
      d.labels[static_cast<std::size_t>(k)] = c;
      d.inputs.col(k) = out.means.col(c) + spec.std_dev * rng.normal_vector(spec.input_dim);
    }
    return d;
  };
  out.train = draw(spec.train_per_class, Split::kTrain, 1);
  out.test = draw(spec.test_per_class, Split::kTest, 2);
  return out;
}

// ---------------------------------------------------------------- IDX files

inline constexpr std::uint32_t kIdxImageMagic = 0x00000803;
inline constexpr std::uint32_t kIdxLabelMagic = 0x00000801;

namespace detail {

inline std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError(FormatError::Kind::kIo, "cannot open '" + path + "'");
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline std::uint32_t big_endian_u32(const std::string& bytes, std::size_t at, const std::string& what) {
  if (bytes.size() < at + 4) throw FormatError(FormatError::Kind::kTruncated, what + ": header truncated");
  std::uint32_t v = 0;
  for (std::size_t k = 0; k < 4; ++k) v = (v << 8) | static_cast<unsigned char>(bytes[at + k]);
  return v;
}

}  // namespace detail

struct IdxImages {
  std::uint32_t count = 0, rows = 0, cols = 0;
  std::string pixels;  // count * rows * cols bytes
};

inline IdxImages parse_idx_images(const std::string& bytes) {
  const std::uint32_t magic = detail::big_endian_u32(bytes, 0, "idx images");
  if (magic != kIdxImageMagic) throw FormatError(FormatError::Kind::kMagic, "idx images: bad magic number");
  IdxImages img;
  img.count = detail::big_endian_u32(bytes, 4, "idx images");
  img.rows = detail::big_endian_u32(bytes, 8, "idx images");
  img.cols = detail::big_endian_u32(bytes, 12, "idx images");
  const std::uint64_t need = std::uint64_t{img.count} * img.rows * img.cols;
  if (bytes.size() - 16 < need)
    throw FormatError(FormatError::Kind::kTruncated, "idx images: payload shorter than " + std::to_string(need) + " bytes");
  img.pixels = bytes.substr(16, need);
  return img;
}

inline std::vector<int> parse_idx_labels(const std::string& bytes) {
  const std::uint32_t magic = detail::big_endian_u32(bytes, 0, "idx labels");
  if (magic != kIdxLabelMagic) throw FormatError(FormatError::Kind::kMagic, "idx labels: bad magic number");
  const std::uint32_t count = detail::big_endian_u32(bytes, 4, "idx labels");
  if (bytes.size() - 8 < count)
    throw FormatError(FormatError::Kind::kTruncated, "idx labels: payload shorter than " + std::to_string(count) + " bytes");
  std::vector<int> labels(count);
  for (std::uint32_t i = 0; i < count; ++i) labels[i] = static_cast<unsigned char>(bytes[8 + i]);
  return labels;
}

/// Flattened images scaled to [0, 1]; keeps the first `limit_per_class`
/// examples of each class in file order (0 keeps everything). The class count
/// is one more than the largest label in the file.
inline LabeledDataset idx_dataset(const IdxImages& images, const std::vector<int>& labels, Index limit_per_class = 0) {
  if (images.count != labels.size())
    throw FormatError(FormatError::Kind::kCountMismatch, "idx: " + std::to_string(images.count) + " images but " +
                                                             std::to_string(labels.size()) + " labels");
  if (limit_per_class < 0) throw UsageError("idx: limit per class must be >= 0");
  LabeledDataset d;
  d.num_classes = labels.empty() ? 0 : *std::max_element(labels.begin(), labels.end()) + 1;
  const Index dim = static_cast<Index>(images.rows) * images.cols;
  std::vector<Index> taken(static_cast<std::size_t>(d.num_classes), 0);
  std::vector<Index> keep;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    Index& t = taken[static_cast<std::size_t>(labels[i])];
    if (limit_per_class > 0 && t >= limit_per_class) continue;
    ++t;
    keep.push_back(static_cast<Index>(i));
  }
  d.inputs.resize(dim, static_cast<Index>(keep.size()));
  for (std::size_t k = 0; k < keep.size(); ++k) {
    const std::size_t base = static_cast<std::size_t>(keep[k] * dim);
    for (Index j = 0; j < dim; ++j)
      d.inputs(j, static_cast<Index>(k)) = static_cast<unsigned char>(images.pixels[base + j]) / 255.0;
    d.labels.push_back(labels[static_cast<std::size_t>(keep[k])]);
  }
  return d;
}

inline LabeledDataset load_idx(const std::string& images_path, const std::string& labels_path,
                               Index limit_per_class = 0) {
  return idx_dataset(parse_idx_images(detail::read_file(images_path)),
                     parse_idx_labels(detail::read_file(labels_path)), limit_per_class);
}

// ---------------------------------------------------------------- training

struct TrainConfig {
  double lr = 0.05;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  Index batch_size = 128;
  int epochs = 30;
  bool anneal = true;  // x0.1 at floor(E/3) and floor(2E/3)
  std::uint64_t seed = 0;
  std::vector<int> checkpoint_epochs;  // empty: {0, 1, 2, 4, ..., epochs}

  void validate() const {
    if (!(lr > 0.0) || !std::isfinite(lr)) throw UsageError("train: lr must be positive");
    if (!(momentum >= 0.0 && momentum < 1.0)) throw UsageError("train: momentum must lie in [0, 1)");
    if (!(weight_decay >= 0.0) || !std::isfinite(weight_decay)) throw UsageError("train: weight_decay must be >= 0");
    if (batch_size < 1) throw UsageError("train: batch_size must be >= 1");
    if (epochs < 1) throw UsageError("train: epochs must be >= 1");
    for (int e : checkpoint_epochs)
      if (e < 0 || e > epochs) throw UsageError("train: checkpoint epoch " + std::to_string(e) + " out of range");
  }

  /// Epochs at which the rate drops by 10; milestones at epoch 0 are skipped.
  std::vector<int> anneal_epochs() const {
    if (!anneal) return {};
    std::vector<int> out;
    for (int m : {epochs / 3, (2 * epochs) / 3})
      if (m > 0) out.push_back(m);
    return out;
  }

  /// Rate used while training epoch `e` (0-based).
  double lr_at(int e) const {
    double r = lr;
    for (int m : anneal_epochs())
      if (e >= m) r *= 0.1;
    return r;
  }

  std::vector<int> checkpoint_set() const {
    if (!checkpoint_epochs.empty()) {
      std::set<int> s(checkpoint_epochs.begin(), checkpoint_epochs.end());
      return {s.begin(), s.end()};
    }
    std::set<int> s{0, epochs};
    for (int e = 1; e < epochs; e *= 2) s.insert(e);
    return {s.begin(), s.end()};
  }
};

/// v <- momentum v + (g + wd theta); theta <- theta - lr v.
inline void sgd_step(ParamVector& theta, ParamVector& velocity, const ParamVector& grad, double lr, double momentum,
                     double weight_decay) {
  velocity = momentum * velocity + (grad + weight_decay * theta);
  theta -= lr * velocity;
}

struct Checkpoint {
  MlpSpec spec;
  ParamVector theta;
  ParamVector velocity;
  int epoch = 0;  // completed epochs
  std::uint64_t seed = 0;
};

struct EpochMetrics {
  int epoch = 0;
  double lr = 0.0;
  double train_err = 0.0;
  double test_err = std::numeric_limits<double>::quiet_NaN();
  double train_loss = 0.0;
  double test_loss = std::numeric_limits<double>::quiet_NaN();
};

struct TrainResult {
  std::vector<Checkpoint> checkpoints;
  std::vector<EpochMetrics> metrics;
  Checkpoint last;  // final state, or the last good one when diverged
  bool diverged = false;
  std::string failure;
};

/// Called once per recorded epoch with the current parameters; fills in
/// held-out metrics. The trainer itself never sees held-out data.
using EpochObserver = std::function<void(const ParamVector& theta, EpochMetrics& row)>;

inline Checkpoint initial_checkpoint(const MlpSpec& spec, const TrainConfig& cfg) {
  spec.validate();
  ParamVector theta = init_params(spec, derive_seed(cfg.seed, 0));
  return {spec, theta, ParamVector::Zero(theta.size()), 0, cfg.seed};
}

namespace detail {

inline LabeledDataset gather(const LabeledDataset& data, const std::vector<Index>& order, Index begin, Index end) {
  LabeledDataset b;
  b.num_classes = data.num_classes;
  b.split = data.split;
  b.inputs.resize(data.inputs.rows(), end - begin);
  for (Index k = begin; k < end; ++k) {
    b.inputs.col(k - begin) = data.inputs.col(order[static_cast<std::size_t>(k)]);
    b.labels.push_back(data.labels[static_cast<std::size_t>(order[static_cast<std::size_t>(k)])]);
  }
  return b;
}

inline bool finite(const ParamVector& v) { return v.allFinite(); }

}  // namespace detail

/// Mini-batch SGD with momentum and weight decay. Example order in epoch e is a
/// shuffle seeded by (seed, e); the run continues from `start` when given, in
/// which case the starting epoch is not recorded again.
inline TrainResult train_sgd(const MlpSpec& spec, const LabeledDataset& train, const TrainConfig& cfg,
                             std::optional<Checkpoint> start = std::nullopt, const EpochObserver& observe = {}) {
  cfg.validate();
  const bool resumed = start.has_value();
  Checkpoint state = start ? std::move(*start) : initial_checkpoint(spec, cfg);
  detail::check_compatible(spec, state.theta, train);
  if (state.velocity.size() != state.theta.size()) throw UsageError("train: checkpoint velocity has the wrong length");
  if (state.epoch < 0 || state.epoch > cfg.epochs)
    throw UsageError("train: checkpoint epoch " + std::to_string(state.epoch) + " outside the configured run");
  if (train.size() == 0) throw UsageError("train: training set is empty");

  const std::vector<int> keep = cfg.checkpoint_set();
  const EvalConfig eval{cfg.batch_size, worker_count()};
  TrainResult result;

  auto record = [&](const Checkpoint& cp) {
    EpochMetrics row;
    row.epoch = cp.epoch;
    row.lr = cfg.lr_at(std::max(0, cp.epoch - 1));
    row.train_loss = loss(spec, cp.theta, train);
    row.train_err = misclassification(spec, cp.theta, train);
    if (observe) observe(cp.theta, row);
    if (!std::isfinite(row.train_loss)) throw NumericalError("non-finite training loss at epoch " + std::to_string(cp.epoch));
    result.metrics.push_back(row);
    if (std::binary_search(keep.begin(), keep.end(), cp.epoch)) result.checkpoints.push_back(cp);
  };

  try {
    if (!resumed) record(state);
  } catch (const NumericalError& e) {
    result.diverged = true;
    result.failure = e.what();
    result.last = state;
    return result;
  }

  std::vector<Index> order(static_cast<std::size_t>(train.size()));
  for (int e = state.epoch; e < cfg.epochs; ++e) {
    Checkpoint next = state;
    try {
      std::iota(order.begin(), order.end(), Index{0});
      std::mt19937_64 shuffle_rng(derive_seed(cfg.seed, 1000 + static_cast<std::uint64_t>(e)));
      std::shuffle(order.begin(), order.end(), shuffle_rng);
      const double lr = cfg.lr_at(e);
      for (Index b = 0; b < train.size(); b += cfg.batch_size) {
        const LabeledDataset batch = detail::gather(train, order, b, std::min(train.size(), b + cfg.batch_size));
        const ParamVector g = gradient(spec, next.theta, batch, eval);
        if (!detail::finite(g)) throw NumericalError("non-finite gradient in epoch " + std::to_string(e + 1));
        sgd_step(next.theta, next.velocity, g, lr, cfg.momentum, cfg.weight_decay);
      }
      if (!detail::finite(next.theta)) throw NumericalError("non-finite parameters after epoch " + std::to_string(e + 1));
      next.epoch = e + 1;
      record(next);
    } catch (const NumericalError& err) {
      result.diverged = true;
      result.failure = err.what();
      break;
    }
    state = std::move(next);
  }
  result.last = std::move(state);
  return result;
}

/// Training with held-out metrics computed by an observer that owns the test split.
inline TrainResult train_with_evaluation(const MlpSpec& spec, const LabeledDataset& train, const LabeledDataset& test,
                                         const TrainConfig& cfg, std::optional<Checkpoint> start = std::nullopt) {
  EpochObserver observe;
  if (test.size() > 0)
    observe = [&](const ParamVector& theta, EpochMetrics& row) {
      row.test_loss = loss(spec, theta, test);
      row.test_err = misclassification(spec, theta, test);
    };
  return train_sgd(spec, train, cfg, std::move(start), observe);
}

}  // namespace hspec
