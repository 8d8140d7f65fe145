#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "support.hpp"

using namespace hspec;

namespace {

std::string be32(std::uint32_t v) {
  std::string s(4, '\0');
  for (int k = 0; k < 4; ++k) s[static_cast<std::size_t>(k)] = static_cast<char>((v >> (24 - 8 * k)) & 0xff);
  return s;
}

// Four 2x3 images, labels 1 0 1 2
std::string idx_images() {
  std::string s = be32(kIdxImageMagic) + be32(4) + be32(2) + be32(3);
  for (int i = 0; i < 4; ++i)
    for (int j = 0; j < 6; ++j) s.push_back(static_cast<char>(static_cast<unsigned char>(i * 60 + j)));
  return s;
}

std::string idx_labels() { return be32(kIdxLabelMagic) + be32(4) + std::string{1, 0, 1, 2}; }

template <class F>
FormatError::Kind format_kind(F&& f) {
  try {
    f();
  } catch (const FormatError& e) {
    return e.kind();
  }
  ADD_FAILURE() << "no FormatError";
  return FormatError::Kind::kIo;
}

MlpSpec mlp(std::vector<int> dims) {
  MlpSpec s;
  s.layer_dims = std::move(dims);
  return s;
}

TrainConfig short_run(int epochs) {
  TrainConfig cfg;
  cfg.epochs = epochs;
  cfg.batch_size = 16;
  cfg.seed = 7;
  return cfg;
}

}  // namespace

TEST(GaussianMixture, Deterministic) {
  GmmSpec g;
  g.seed = 4;
  const SplitDataset a = gaussian_mixture(g), b = gaussian_mixture(g);
  EXPECT_EQ(a.train.inputs, b.train.inputs);
  EXPECT_EQ(a.test.inputs, b.test.inputs);
  EXPECT_EQ(a.train.labels, b.train.labels);
  g.seed = 5;
  EXPECT_NE(a.train.inputs, gaussian_mixture(g).train.inputs);
}

TEST(GaussianMixture, ShapesLabelsAndMeans) {
  GmmSpec g;
  g.classes = 4;
  g.input_dim = 6;
  g.train_per_class = 5;
  g.test_per_class = 2;
  g.separation = 2.5;
  const SplitDataset d = gaussian_mixture(g);
  EXPECT_EQ(d.train.size(), 20);
  EXPECT_EQ(d.test.size(), 8);
  EXPECT_EQ(d.train.inputs.rows(), 6);
  EXPECT_EQ(d.train.num_classes, 4);
  for (std::size_t k = 0; k < d.train.labels.size(); ++k) EXPECT_EQ(d.train.labels[k], static_cast<int>(k % 4));
  const MatrixXd gram = d.means.transpose() * d.means;
  EXPECT_LE((gram - 6.25 * MatrixXd::Identity(4, 4)).cwiseAbs().maxCoeff(), 1e-12);
  EXPECT_EQ(d.train.split, Split::kTrain);
  EXPECT_EQ(d.test.split, Split::kTest);
}

TEST(GaussianMixture, ZeroSpreadSitsOnMeans) {
  GmmSpec g;
  g.std_dev = 0.0;
  g.train_per_class = 3;
  const SplitDataset d = gaussian_mixture(g);
  for (Index k = 0; k < d.train.size(); ++k)
    EXPECT_EQ(d.train.inputs.col(k), d.means.col(d.train.labels[static_cast<std::size_t>(k)]));
}

TEST(GaussianMixture, Validation) {
  GmmSpec g;
  g.classes = 11;
  EXPECT_THROW(gaussian_mixture(g), UsageError);
  g = {};
  g.separation = -1.0;
  EXPECT_THROW(gaussian_mixture(g), UsageError);
  g = {};
  g.train_per_class = 0;
  EXPECT_THROW(gaussian_mixture(g), UsageError);
}

TEST(GaussianMixture, NoSeparationIsChance) {
  GmmSpec g;
  g.separation = 0.0;
  g.train_per_class = 100;
  g.test_per_class = 400;
  g.seed = 2;
  const SplitDataset d = gaussian_mixture(g);
  const MlpSpec spec = mlp({10, 16, 3});
  TrainConfig cfg = short_run(10);
  const TrainResult r = train_sgd(spec, d.train, cfg);
  EXPECT_NEAR(misclassification(spec, r.last.theta, d.test), 2.0 / 3.0, 0.06);
}

TEST(GaussianMixture, SeparatedClassesAreLearned) {
  GmmSpec g;
  g.separation = 6.0;
  g.train_per_class = 50;
  const SplitDataset d = gaussian_mixture(g);
  const MlpSpec spec = mlp({10, 16, 3});
  const TrainResult r = train_sgd(spec, d.train, short_run(10));
  EXPECT_LE(misclassification(spec, r.last.theta, d.train), 0.01);
  EXPECT_LE(misclassification(spec, r.last.theta, d.test), 0.02);
}

TEST(Idx, ParsesImagesAndLabels) {
  const IdxImages img = parse_idx_images(idx_images());
  EXPECT_EQ(img.count, 4u);
  EXPECT_EQ(img.rows, 2u);
  EXPECT_EQ(img.cols, 3u);
  const LabeledDataset d = idx_dataset(img, parse_idx_labels(idx_labels()));
  EXPECT_EQ(d.size(), 4);
  EXPECT_EQ(d.inputs.rows(), 6);
  EXPECT_EQ(d.num_classes, 3);
  EXPECT_EQ(d.labels, (std::vector<int>{1, 0, 1, 2}));
  EXPECT_DOUBLE_EQ(d.inputs(0, 0), 0.0);
  EXPECT_DOUBLE_EQ(d.inputs(5, 3), 185.0 / 255.0);
}

TEST(Idx, LimitPerClassKeepsFileOrder) {
  const LabeledDataset d = idx_dataset(parse_idx_images(idx_images()), parse_idx_labels(idx_labels()), 1);
  EXPECT_EQ(d.labels, (std::vector<int>{1, 0, 2}));
  EXPECT_DOUBLE_EQ(d.inputs(0, 2), 180.0 / 255.0);
  EXPECT_THROW(idx_dataset(parse_idx_images(idx_images()), parse_idx_labels(idx_labels()), -1), UsageError);
}

TEST(Idx, Errors) {
  std::string bad = idx_images();
  bad[3] = 0x01;
  EXPECT_EQ(format_kind([&] { parse_idx_images(bad); }), FormatError::Kind::kMagic);
  EXPECT_EQ(format_kind([&] { parse_idx_labels(idx_images()); }), FormatError::Kind::kMagic);
  EXPECT_EQ(format_kind([&] { parse_idx_images(idx_images().substr(0, 30)); }), FormatError::Kind::kTruncated);
  EXPECT_EQ(format_kind([&] { parse_idx_images(idx_images().substr(0, 10)); }), FormatError::Kind::kTruncated);
  EXPECT_EQ(format_kind([&] { parse_idx_labels(idx_labels().substr(0, 10)); }), FormatError::Kind::kTruncated);
  const std::string three = be32(kIdxLabelMagic) + be32(3) + std::string{1, 0, 1};
  EXPECT_EQ(format_kind([&] { idx_dataset(parse_idx_images(idx_images()), parse_idx_labels(three)); }),
            FormatError::Kind::kCountMismatch);
  EXPECT_EQ(format_kind([&] { load_idx("/nonexistent/images", "/nonexistent/labels"); }), FormatError::Kind::kIo);
}

TEST(Idx, LoadsFromFiles) {
  const auto dir = std::filesystem::temp_directory_path() / "hspec_idx_test";
  std::filesystem::create_directories(dir);
  std::ofstream(dir / "img", std::ios::binary) << idx_images();
  std::ofstream(dir / "lab", std::ios::binary) << idx_labels();
  const LabeledDataset d = load_idx((dir / "img").string(), (dir / "lab").string());
  EXPECT_EQ(d.size(), 4);
  std::filesystem::remove_all(dir);
}

TEST(Sgd, WeightDecayOnlyClosedForm) {
  ParamVector theta(3), v = ParamVector::Zero(3);
  theta << 1.0, -2.0, 0.5;
  const ParamVector start = theta;
  const double lr = 0.1, wd = 0.3;
  for (int k = 0; k < 10; ++k) sgd_step(theta, v, ParamVector::Zero(3), lr, 0.0, wd);
  const ParamVector want = start * std::pow(1.0 - lr * wd, 10);
  EXPECT_LE((theta - want).cwiseAbs().maxCoeff(), 1e-15);
}

TEST(Sgd, MomentumRecurrence) {
  ParamVector theta(1), v = ParamVector::Zero(1), g(1);
  theta << 2.0;
  g << 0.25;
  double x = 2.0, u = 0.0;
  for (int k = 0; k < 5; ++k) {
    sgd_step(theta, v, g, 0.1, 0.9, 0.01);
    u = 0.9 * u + (0.25 + 0.01 * x);
    x -= 0.1 * u;
  }
  EXPECT_DOUBLE_EQ(theta[0], x);
  EXPECT_DOUBLE_EQ(v[0], u);
}

TEST(TrainConfig, Validation) {
  TrainConfig c;
  c.lr = 0.0;
  EXPECT_THROW(c.validate(), UsageError);
  c = {};
  c.momentum = 1.0;
  EXPECT_THROW(c.validate(), UsageError);
  c = {};
  c.batch_size = 0;
  EXPECT_THROW(c.validate(), UsageError);
  c = {};
  c.checkpoint_epochs = {31};
  EXPECT_THROW(c.validate(), UsageError);
  EXPECT_NO_THROW(TrainConfig{}.validate());
}

TEST(TrainConfig, AnnealSchedule) {
  TrainConfig c;
  c.epochs = 30;
  c.lr = 0.1;
  EXPECT_EQ(c.anneal_epochs(), (std::vector<int>{10, 20}));
  EXPECT_DOUBLE_EQ(c.lr_at(9), 0.1);
  EXPECT_DOUBLE_EQ(c.lr_at(10), 0.1 * 0.1);
  EXPECT_DOUBLE_EQ(c.lr_at(29), 0.1 * 0.1 * 0.1);
  c.epochs = 2;
  EXPECT_EQ(c.anneal_epochs(), (std::vector<int>{1}));
  c.anneal = false;
  EXPECT_TRUE(c.anneal_epochs().empty());
  EXPECT_DOUBLE_EQ(c.lr_at(1), 0.1);
}

TEST(TrainConfig, CheckpointSet) {
  TrainConfig c;
  c.epochs = 30;
  EXPECT_EQ(c.checkpoint_set(), (std::vector<int>{0, 1, 2, 4, 8, 16, 30}));
  c.epochs = 1;
  EXPECT_EQ(c.checkpoint_set(), (std::vector<int>{0, 1}));
  c.checkpoint_epochs = {1, 0, 1};
  EXPECT_EQ(c.checkpoint_set(), (std::vector<int>{0, 1}));
}

TEST(Training, MetricsAndCheckpoints) {
  const hspec::testing::NetFixture f = hspec::testing::small_net();
  const TrainResult r = train_with_evaluation(f.spec, f.train, f.test, short_run(6));
  ASSERT_EQ(r.metrics.size(), 7u);
  for (int e = 0; e <= 6; ++e) EXPECT_EQ(r.metrics[static_cast<std::size_t>(e)].epoch, e);
  EXPECT_DOUBLE_EQ(r.metrics[0].lr, 0.05);
  EXPECT_DOUBLE_EQ(r.metrics[6].lr, 0.05 * 0.01);
  EXPECT_TRUE(std::isfinite(r.metrics[3].test_err));
  EXPECT_LT(r.metrics[6].train_loss, r.metrics[0].train_loss);
  std::vector<int> kept;
  for (const Checkpoint& c : r.checkpoints) kept.push_back(c.epoch);
  EXPECT_EQ(kept, (std::vector<int>{0, 1, 2, 4, 6}));
  EXPECT_EQ(r.last.epoch, 6);
  EXPECT_FALSE(r.diverged);
}

TEST(Training, NoHeldOutSetLeavesNaN) {
  const hspec::testing::NetFixture f = hspec::testing::small_net();
  const TrainResult r = train_sgd(f.spec, f.train, short_run(2));
  EXPECT_TRUE(std::isnan(r.metrics.back().test_err));
}

TEST(Training, Deterministic) {
  const hspec::testing::NetFixture f = hspec::testing::small_net();
  const TrainResult a = train_sgd(f.spec, f.train, short_run(4));
  const TrainResult b = train_sgd(f.spec, f.train, short_run(4));
  EXPECT_EQ(a.last.theta, b.last.theta);
  EXPECT_EQ(a.last.velocity, b.last.velocity);
  TrainConfig other = short_run(4);
  other.seed = 8;
  EXPECT_NE(a.last.theta, train_sgd(f.spec, f.train, other).last.theta);
}

TEST(Training, ResumeMatchesUninterruptedRun) {
  const hspec::testing::NetFixture f = hspec::testing::small_net();
  const TrainConfig cfg = short_run(7);
  const TrainResult full = train_sgd(f.spec, f.train, cfg);
  Checkpoint mid;
  for (const Checkpoint& c : full.checkpoints)
    if (c.epoch == 2) mid = c;
  ASSERT_EQ(mid.epoch, 2);
  const TrainResult rest = train_sgd(f.spec, f.train, cfg, mid);
  EXPECT_EQ(rest.last.theta, full.last.theta);
  EXPECT_EQ(rest.last.velocity, full.last.velocity);
  ASSERT_EQ(rest.metrics.size(), 5u);
  EXPECT_EQ(rest.metrics.front().epoch, 3);
  EXPECT_EQ(rest.metrics.back().train_loss, full.metrics.back().train_loss);
}

TEST(Training, RejectsIncompatibleStart) {
  const hspec::testing::NetFixture f = hspec::testing::small_net();
  Checkpoint c = initial_checkpoint(f.spec, short_run(3));
  c.epoch = 4;
  EXPECT_THROW(train_sgd(f.spec, f.train, short_run(3), c), UsageError);
  c.epoch = 0;
  c.velocity.resize(3);
  EXPECT_THROW(train_sgd(f.spec, f.train, short_run(3), c), UsageError);
  EXPECT_THROW(train_sgd(mlp({5, 6, 3}), f.train, short_run(3)), UsageError);
}

TEST(Training, DivergenceIsReported) {
  const hspec::testing::NetFixture f = hspec::testing::small_net();
  TrainConfig cfg = short_run(50);
  cfg.lr = 1e3;
  cfg.weight_decay = 1.0;
  cfg.anneal = false;
  const TrainResult r = train_sgd(f.spec, f.train, cfg);
  EXPECT_TRUE(r.diverged);
  EXPECT_FALSE(r.failure.empty());
  EXPECT_TRUE(r.last.theta.allFinite());
  EXPECT_LT(r.last.epoch, 50);
}
