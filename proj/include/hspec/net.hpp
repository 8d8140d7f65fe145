#pragma once

// Fully connected softmax classifier with exact curvature products.
//
// Parameter layout (stable; checkpoints depend on it): for each layer l in
// order, the weight matrix W_l (out x in, row-major) followed by the bias b_l.
//
// All dataset-level quantities average over every example (Ave over i and c).
// Batches are summed in example order, batch partials are combined by a
// pairwise tree, so results do not depend on the worker count.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <memory>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "hspec/error.hpp"
#include "hspec/operator.hpp"
#include "hspec/parallel.hpp"
#include "hspec/random.hpp"

namespace hspec {

enum class Activation { kTanh, kRelu };

inline std::string to_string(Activation a) { return a == Activation::kTanh ? "tanh" : "relu"; }

inline Activation activation_from_string(const std::string& s) {
  if (s == "tanh") return Activation::kTanh;
  if (s == "relu") return Activation::kRelu;
  throw UsageError("unknown activation '" + s + "' (expected tanh or relu)");
}

struct MlpSpec {
  std::vector<int> layer_dims;  // input, hidden..., classes
  Activation activation = Activation::kTanh;

  int input_dim() const { return layer_dims.front(); }
  int num_classes() const { return layer_dims.back(); }
  int num_layers() const { return static_cast<int>(layer_dims.size()) - 1; }

  void validate() const {
    if (layer_dims.size() < 3) throw UsageError("MLP needs an input, at least one hidden layer and an output");
    for (int d : layer_dims)
      if (d < 1) throw UsageError("MLP layer dimensions must be >= 1");
  }

  Index weight_offset(int layer) const {
    Index off = 0;
    for (int l = 0; l < layer; ++l) off += static_cast<Index>(layer_dims[l + 1]) * (layer_dims[l] + 1);
    return off;
  }
  Index bias_offset(int layer) const {
    return weight_offset(layer) + static_cast<Index>(layer_dims[layer + 1]) * layer_dims[layer];
  }
  Index param_count() const { return weight_offset(num_layers()); }
};

using ParamVector = VectorXd;
using RowMajorMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

inline Eigen::Map<const RowMajorMatrix> weights(const MlpSpec& spec, const ParamVector& theta, int layer) {
  return {theta.data() + spec.weight_offset(layer), spec.layer_dims[layer + 1], spec.layer_dims[layer]};
}
inline Eigen::Map<RowMajorMatrix> weights(const MlpSpec& spec, ParamVector& theta, int layer) {
  return {theta.data() + spec.weight_offset(layer), spec.layer_dims[layer + 1], spec.layer_dims[layer]};
}
inline Eigen::Map<const VectorXd> bias(const MlpSpec& spec, const ParamVector& theta, int layer) {
  return {theta.data() + spec.bias_offset(layer), spec.layer_dims[layer + 1]};
}
inline Eigen::Map<VectorXd> bias(const MlpSpec& spec, ParamVector& theta, int layer) {
  return {theta.data() + spec.bias_offset(layer), spec.layer_dims[layer + 1]};
}

/// Gaussian weights with variance 1/fan_in, zero biases.
inline ParamVector init_params(const MlpSpec& spec, std::uint64_t seed) {
  spec.validate();
  Rng rng(seed);
  ParamVector theta = ParamVector::Zero(spec.param_count());
  for (int l = 0; l < spec.num_layers(); ++l) {
    auto w = weights(spec, theta, l);
    const double scale = 1.0 / std::sqrt(static_cast<double>(spec.layer_dims[l]));
    for (Index i = 0; i < w.rows(); ++i)
      for (Index j = 0; j < w.cols(); ++j) w(i, j) = scale * rng.normal();
  }
  return theta;
}

enum class Split { kTrain, kTest };

inline std::string to_string(Split s) { return s == Split::kTrain ? "train" : "test"; }

struct LabeledDataset {
  MatrixXd inputs;  // input_dim x n, one example per column
  std::vector<int> labels;
  int num_classes = 0;
  Split split = Split::kTrain;

  Index size() const { return static_cast<Index>(labels.size()); }

  std::vector<Index> class_counts() const {
    std::vector<Index> counts(num_classes, 0);
    for (int y : labels) ++counts[y];
    return counts;
  }

  void validate() const {
    if (inputs.cols() != size()) throw UsageError("dataset: input/label count mismatch");
    if (num_classes < 1) throw UsageError("dataset: class count must be >= 1");
    for (int y : labels)
      if (y < 0 || y >= num_classes)
        throw UsageError("dataset: label " + std::to_string(y) + " outside [0, " + std::to_string(num_classes) + ")");
  }

  /// Every example repeated `times` times (consecutively).
  LabeledDataset repeated(int times) const {
    LabeledDataset out{MatrixXd(inputs.rows(), inputs.cols() * times), {}, num_classes, split};
    Index col = 0;
    for (Index i = 0; i < size(); ++i)
      for (int t = 0; t < times; ++t) {
        out.inputs.col(col++) = inputs.col(i);
        out.labels.push_back(labels[i]);
      }
    return out;
  }
};

struct SoftmaxRecord {
  VectorXd logits;
  VectorXd probs;
};

inline VectorXd softmax(const VectorXd& z) {
  const VectorXd e = (z.array() - z.maxCoeff()).exp();
  return e / e.sum();
}

inline double log_sum_exp(const VectorXd& z) {
  const double m = z.maxCoeff();
  return m + std::log((z.array() - m).exp().sum());
}

/// (diag(p) - p p^T) u
inline VectorXd softmax_curvature(const VectorXd& p, const VectorXd& u) {
  return p.cwiseProduct(u) - p * p.dot(u);
}

struct EvalConfig {
  Index batch_size = 1024;
  int workers = worker_count();
};

namespace detail {

/// Forward activations for one example. a[l] feeds layer l; z[l] is its output.
struct Trace {
  std::vector<VectorXd> a;
  std::vector<VectorXd> z;
  VectorXd probs;
};

inline double act(Activation kind, double z) { return kind == Activation::kTanh ? std::tanh(z) : std::max(0.0, z); }

// derivatives expressed through the stored activation value a = act(z)
inline VectorXd act_prime(Activation kind, const VectorXd& z, const VectorXd& a) {
  if (kind == Activation::kTanh) return (1.0 - a.array().square()).matrix();
  return (z.array() > 0.0).cast<double>().matrix();
}
inline VectorXd act_second(Activation kind, const VectorXd& a) {
  if (kind == Activation::kTanh) return (-2.0 * a.array() * (1.0 - a.array().square())).matrix();
  return VectorXd::Zero(a.size());
}

inline Trace forward_trace(const MlpSpec& spec, const ParamVector& theta, const Eigen::Ref<const VectorXd>& x) {
  const int layers = spec.num_layers();
  if (x.size() != spec.input_dim())
    throw UsageError("forward: input has " + std::to_string(x.size()) + " features, model expects " +
                     std::to_string(spec.input_dim()));
  Trace tr;
  tr.a.reserve(layers);
  tr.z.reserve(layers);
  tr.a.emplace_back(x);
  for (int l = 0; l < layers; ++l) {
    VectorXd z = weights(spec, theta, l) * tr.a[l] + bias(spec, theta, l);
    if (!z.allFinite()) throw NumericalError("forward: non-finite activation at layer " + std::to_string(l));
    if (l + 1 < layers) tr.a.emplace_back(z.unaryExpr([&](double v) { return act(spec.activation, v); }));
    tr.z.push_back(std::move(z));
  }
  tr.probs = softmax(tr.z.back());
  return tr;
}

/// Accumulates J^T cot into out (J = d logits / d theta).
inline void backprop(const MlpSpec& spec, const ParamVector& theta, const Trace& tr, VectorXd cot, ParamVector& out) {
  for (int l = spec.num_layers() - 1; l >= 0; --l) {
    weights(spec, out, l).noalias() += cot * tr.a[l].transpose();
    bias(spec, out, l) += cot;
    if (l == 0) break;
    const VectorXd da = weights(spec, theta, l).transpose() * cot;
    cot = da.cwiseProduct(act_prime(spec.activation, tr.z[l - 1], tr.a[l]));
  }
}

/// Directional derivatives R(z_l) of every pre-activation along v.
inline std::vector<VectorXd> forward_tangent(const MlpSpec& spec, const ParamVector& theta, const Trace& tr,
                                             const ParamVector& v) {
  const int layers = spec.num_layers();
  std::vector<VectorXd> rz;
  rz.reserve(layers);
  VectorXd ra = VectorXd::Zero(spec.input_dim());
  for (int l = 0; l < layers; ++l) {
    VectorXd r = weights(spec, v, l) * tr.a[l] + weights(spec, theta, l) * ra + bias(spec, v, l);
    if (l + 1 < layers) ra = act_prime(spec.activation, tr.z[l], tr.a[l + 1]).cwiseProduct(r);
    rz.push_back(std::move(r));
  }
  return rz;
}

/// Forward-over-reverse Hessian-vector product of the example loss.
inline void example_hvp(const MlpSpec& spec, const ParamVector& theta, const Trace& tr, int label,
                        const ParamVector& v, ParamVector& out) {
  const int layers = spec.num_layers();
  const std::vector<VectorXd> rz = forward_tangent(spec, theta, tr, v);
  VectorXd dz = tr.probs;
  dz[label] -= 1.0;
  VectorXd rdz = softmax_curvature(tr.probs, rz.back());
  for (int l = layers - 1; l >= 0; --l) {
    // R(a_l); a_0 is data so its tangent vanishes
    VectorXd ra = l == 0 ? VectorXd::Zero(tr.a[0].size())
                         : VectorXd(act_prime(spec.activation, tr.z[l - 1], tr.a[l]).cwiseProduct(rz[l - 1]));
    weights(spec, out, l).noalias() += rdz * tr.a[l].transpose() + dz * ra.transpose();
    bias(spec, out, l) += rdz;
    if (l == 0) break;
    const auto w = weights(spec, theta, l);
    const VectorXd da = w.transpose() * dz;
    const VectorXd rda = weights(spec, v, l).transpose() * dz + w.transpose() * rdz;
    const VectorXd prime = act_prime(spec.activation, tr.z[l - 1], tr.a[l]);
    const VectorXd second = act_second(spec.activation, tr.a[l]);
    dz = da.cwiseProduct(prime);
    rdz = rda.cwiseProduct(prime) + da.cwiseProduct(second).cwiseProduct(rz[l - 1]);
  }
}

/// Sum over examples of per_example(i, accumulator) / n with fixed reduction order.
template <class PerExample>
VectorXd dataset_average(const LabeledDataset& data, Index dim, const EvalConfig& cfg, PerExample&& per_example) {
  const Index n = data.size();
  if (n == 0) throw UsageError("dataset is empty");
  const Index batch = std::max<Index>(1, cfg.batch_size);
  const std::size_t batches = static_cast<std::size_t>((n + batch - 1) / batch);
  std::vector<VectorXd> partial(batches);
  parallel_for(batches, cfg.workers, [&](std::size_t b) {
    VectorXd acc = VectorXd::Zero(dim);
    const Index end = std::min<Index>(n, static_cast<Index>(b + 1) * batch);
    for (Index i = static_cast<Index>(b) * batch; i < end; ++i) per_example(i, acc);
    partial[b] = std::move(acc);
  });
  return pairwise_sum(std::move(partial)) / static_cast<double>(n);
}

inline void check_compatible(const MlpSpec& spec, const ParamVector& theta, const LabeledDataset& data) {
  spec.validate();
  if (theta.size() != spec.param_count())
    throw UsageError("parameter vector has length " + std::to_string(theta.size()) + ", model needs " +
                     std::to_string(spec.param_count()));
  if (data.inputs.rows() != spec.input_dim())
    throw UsageError("dataset has " + std::to_string(data.inputs.rows()) + " features, model expects " +
                     std::to_string(spec.input_dim()));
  if (data.num_classes != spec.num_classes())
    throw UsageError("dataset has " + std::to_string(data.num_classes) + " classes, model outputs " +
                     std::to_string(spec.num_classes()));
}

}  // namespace detail

inline SoftmaxRecord forward(const MlpSpec& spec, const ParamVector& theta, const Eigen::Ref<const VectorXd>& x) {
  if (theta.size() != spec.param_count()) throw UsageError("forward: parameter vector has the wrong length");
  detail::Trace tr = detail::forward_trace(spec, theta, x);
  return {std::move(tr.z.back()), std::move(tr.probs)};
}

/// Mean cross-entropy over every example.
inline double loss(const MlpSpec& spec, const ParamVector& theta, const LabeledDataset& data) {
  detail::check_compatible(spec, theta, data);
  if (data.size() == 0) throw UsageError("loss: dataset is empty");
  double total = 0.0;
  for (Index i = 0; i < data.size(); ++i) {
    const SoftmaxRecord rec = forward(spec, theta, data.inputs.col(i));
    total += log_sum_exp(rec.logits) - rec.logits[data.labels[i]];
  }
  return total / static_cast<double>(data.size());
}

/// Fraction of examples whose arg-max prediction differs from the label.
inline double misclassification(const MlpSpec& spec, const ParamVector& theta, const LabeledDataset& data) {
  detail::check_compatible(spec, theta, data);
  if (data.size() == 0) return 0.0;
  Index wrong = 0;
  for (Index i = 0; i < data.size(); ++i) {
    const SoftmaxRecord rec = forward(spec, theta, data.inputs.col(i));
    Index arg;
    rec.logits.maxCoeff(&arg);
    if (arg != data.labels[i]) ++wrong;
  }
  return static_cast<double>(wrong) / static_cast<double>(data.size());
}

/// Gradient of one example's loss, as if its label were `label`.
inline ParamVector example_gradient(const MlpSpec& spec, const ParamVector& theta, const Eigen::Ref<const VectorXd>& x,
                                    int label) {
  const detail::Trace tr = detail::forward_trace(spec, theta, x);
  VectorXd cot = tr.probs;
  cot[label] -= 1.0;
  ParamVector g = ParamVector::Zero(spec.param_count());
  detail::backprop(spec, theta, tr, std::move(cot), g);
  return g;
}

/// Logit Jacobian (C x p) of one example, one reverse pass per row.
inline MatrixXd logit_jacobian(const MlpSpec& spec, const ParamVector& theta, const Eigen::Ref<const VectorXd>& x) {
  const detail::Trace tr = detail::forward_trace(spec, theta, x);
  MatrixXd j = MatrixXd::Zero(spec.num_classes(), spec.param_count());
  for (int c = 0; c < spec.num_classes(); ++c) {
    ParamVector row = ParamVector::Zero(spec.param_count());
    detail::backprop(spec, theta, tr, VectorXd::Unit(spec.num_classes(), c), row);
    j.row(c) = row.transpose();
  }
  return j;
}

inline ParamVector gradient(const MlpSpec& spec, const ParamVector& theta, const LabeledDataset& data,
                            const EvalConfig& cfg = {}) {
  detail::check_compatible(spec, theta, data);
  return detail::dataset_average(data, spec.param_count(), cfg, [&](Index i, VectorXd& acc) {
    const detail::Trace tr = detail::forward_trace(spec, theta, data.inputs.col(i));
    VectorXd cot = tr.probs;
    cot[data.labels[i]] -= 1.0;
    detail::backprop(spec, theta, tr, std::move(cot), acc);
  });
}

/// Hess v for the averaged loss.
inline ParamVector hvp(const MlpSpec& spec, const ParamVector& theta, const LabeledDataset& data, const ParamVector& v,
                       const EvalConfig& cfg = {}) {
  detail::check_compatible(spec, theta, data);
  if (v.size() != theta.size()) throw UsageError("hvp: direction has the wrong length");
  return detail::dataset_average(data, spec.param_count(), cfg, [&](Index i, VectorXd& acc) {
    const detail::Trace tr = detail::forward_trace(spec, theta, data.inputs.col(i));
    detail::example_hvp(spec, theta, tr, data.labels[i], v, acc);
  });
}

/// G v = Ave J^T (diag(p) - p p^T) J v, matrix-free.
inline ParamVector gnvp(const MlpSpec& spec, const ParamVector& theta, const LabeledDataset& data, const ParamVector& v,
                        const EvalConfig& cfg = {}) {
  detail::check_compatible(spec, theta, data);
  if (v.size() != theta.size()) throw UsageError("gnvp: direction has the wrong length");
  return detail::dataset_average(data, spec.param_count(), cfg, [&](Index i, VectorXd& acc) {
    const detail::Trace tr = detail::forward_trace(spec, theta, data.inputs.col(i));
    const std::vector<VectorXd> rz = detail::forward_tangent(spec, theta, tr, v);
    detail::backprop(spec, theta, tr, softmax_curvature(tr.probs, rz.back()), acc);
  });
}

/// H v = Hess v - G v.
inline ParamVector hvp_h(const MlpSpec& spec, const ParamVector& theta, const LabeledDataset& data,
                         const ParamVector& v, const EvalConfig& cfg = {}) {
  return hvp(spec, theta, data, v, cfg) - gnvp(spec, theta, data, v, cfg);
}

enum class CurvatureKind { kHess, kG, kH };

inline std::string to_string(CurvatureKind k) {
  switch (k) {
    case CurvatureKind::kHess: return "hess";
    case CurvatureKind::kG: return "g";
    case CurvatureKind::kH: return "h";
  }
  return "?";
}

inline CurvatureKind curvature_from_string(const std::string& s) {
  if (s == "hess") return CurvatureKind::kHess;
  if (s == "g") return CurvatureKind::kG;
  if (s == "h") return CurvatureKind::kH;
  throw UsageError("unknown curvature operator '" + s + "' (expected hess, g or h)");
}

/// Hess, G or H over `data` as a SymmetricOperator labelled "<split>:<which>".
inline SymmetricOperator hessian_operator(const MlpSpec& spec, const ParamVector& theta, const LabeledDataset& data,
                                          CurvatureKind which, const EvalConfig& cfg = {}) {
  detail::check_compatible(spec, theta, data);
  auto s = std::make_shared<const MlpSpec>(spec);
  auto t = std::make_shared<const ParamVector>(theta);
  auto d = std::make_shared<const LabeledDataset>(data);
  std::string label = to_string(data.split) + ":" + to_string(which);
  const Index dim = spec.param_count();
  return SymmetricOperator(
      dim,
      [s, t, d, which, cfg](const VectorXd& v) -> VectorXd {
        switch (which) {
          case CurvatureKind::kHess: return hvp(*s, *t, *d, v, cfg);
          case CurvatureKind::kG: return gnvp(*s, *t, *d, v, cfg);
          case CurvatureKind::kH: return hvp_h(*s, *t, *d, v, cfg);
        }
        return VectorXd();
      },
      std::move(label));
}

}  // namespace hspec
