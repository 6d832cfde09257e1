#include <gtest/gtest.h>

#include <bit>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <set>

#include "dsconv/toynet.hpp"
#include "gradcheck.hpp"

using namespace dsconv;

TEST(ToyNetGradients, MatchCentralDifferences) {
  for (std::uint64_t seed : {11u, 12u, 13u}) {
    auto p = tu::small_grad_problem(seed);
    const auto r = tu::gradient_check(p.net, p.x, p.labels);
    EXPECT_EQ(r.parameters, p.net.parameter_count());
    EXPECT_LT(r.max_rel_error, 1e-4) << "seed " << seed;
  }
}

TEST(ToyNetGradients, DefaultArchitectureSpotCheck) {
  // The three-layer default net on a real synthetic batch.
  SyntheticSpec ds;
  ds.samples = 6;
  const auto data = make_synthetic(ds);
  ToyNet net(ToyNetSpec{}, 5);
  // Zero initial biases put all-zero receptive fields exactly on a ReLU kink.
  std::mt19937_64 rng(5);
  std::normal_distribution<double> n(0.0, 0.1);
  for (std::size_t l = 0; l < net.conv_count(); ++l)
    for (auto& b : net.conv(l).bias) b = n(rng);
  const auto r = tu::gradient_check(net, data.images, data.labels);
  EXPECT_LT(r.max_rel_error, 1e-4);
}

TEST(ToyNetTraining, ZeroLearningRateIsIdentity) {
  auto p = tu::small_grad_problem(3);
  ToyGrads g;
  p.net.loss_and_grad(p.x, p.labels, g);
  ToyNet copy = p.net;
  sgd_step(copy, g, 0.0, nullptr);
  EXPECT_TRUE(copy == p.net);
}

TEST(ToyNetTraining, SgdStepIsExactAndRespectsMasks) {
  auto p = tu::small_grad_problem(4);
  ToyGrads g;
  p.net.loss_and_grad(p.x, p.labels, g);
  Masks masks = full_masks(p.net);
  std::mt19937_64 rng(9);
  for (auto& m : masks)
    for (auto& f : m) f = rng() % 2;
  ToyNet net = p.net;
  net.apply_masks(masks);
  const ToyNet before = net;
  const double lr = 0.125;
  sgd_step(net, g, lr, &masks);
  for (std::size_t l = 0; l < net.conv_count(); ++l) {
    const auto w = net.conv(l).weights.data();
    const auto w0 = before.conv(l).weights.data();
    for (std::size_t i = 0; i < w.size(); ++i) {
      if (masks[l][i]) {
        EXPECT_EQ(w[i], w0[i] - lr * g.conv_w[l].data()[i]);
      } else {
        EXPECT_EQ(w[i], 0.0);
        EXPECT_FALSE(std::signbit(w[i]));
      }
    }
  }
  for (std::size_t i = 0; i < net.dense_weights().size(); ++i)
    EXPECT_EQ(net.dense_weights()[i], before.dense_weights()[i] - lr * g.dense_w[i]);
}

TEST(ToyNetTraining, MaskedWeightsStayZeroThroughTraining) {
  SyntheticSpec ds;
  ds.samples = 200;
  const auto data = make_synthetic(ds);
  ToyNet net(ToyNetSpec{}, 2);
  Masks masks = full_masks(net);
  std::mt19937_64 rng(1);
  for (auto& m : masks)
    for (auto& f : m) f = (rng() % 10) < 3;
  net.apply_masks(masks);
  BatchSampler sampler(data.size(), 16, 3);
  TrainOptions opts;
  opts.steps = 25;
  const auto stats = train_batches(net, &masks, data, sampler, opts);
  ASSERT_EQ(stats.size(), net.conv_count());
  for (std::size_t l = 0; l < net.conv_count(); ++l) {
    const auto w = net.conv(l).weights.data();
    ASSERT_EQ(stats[l].size(), w.size());
    for (std::size_t i = 0; i < w.size(); ++i) {
      if (!masks[l][i]) EXPECT_EQ(std::bit_cast<std::uint64_t>(w[i]), 0u);
      EXPECT_GE(stats[l][i], 0.0);
    }
  }
}

TEST(ToyNetTraining, NonFiniteLossThrowsWithoutApplyingTheStep) {
  SyntheticSpec ds;
  ds.samples = 64;
  const auto data = make_synthetic(ds);
  ToyNet net(ToyNetSpec{}, 2);
  net.dense_bias()[0] = std::numeric_limits<double>::infinity();
  const ToyNet before = net;
  BatchSampler sampler(data.size(), 16, 3);
  EXPECT_THROW(train_batches(net, nullptr, data, sampler, {}), TrainingError);
  EXPECT_TRUE(net.conv(0).weights == before.conv(0).weights);
}

TEST(ToyNetTraining, BaselineLearnsTheSyntheticTask) {
  const auto split = split_validation(make_synthetic({}), 0.2, 1);
  ToyNet net(ToyNetSpec{}, 3);
  train_epochs(net, split.train, 20, 32, 0.05, 4);
  EXPECT_GT(net.accuracy(split.validation), 0.9);
}

TEST(ToyNet, ParameterCountsAndLogitShape) {
  ToyNet net(ToyNetSpec{}, 1);
  // 16·1·9+16, 32·16·16+32, 32·32+32, 4·32+4
  EXPECT_EQ(net.conv_weight_count(), 144u + 8192u + 1024u);
  EXPECT_EQ(net.parameter_count(), 144u + 16u + 8192u + 32u + 1024u + 32u + 128u + 4u);
  Tensor4D<double> x(Extents{3, 1, 12, 12});
  EXPECT_EQ(net.logits(x).size(), 12u);
  EXPECT_THROW(net.logits(Tensor4D<double>(Extents{1, 2, 12, 12})), ShapeError);
}

TEST(Dataset, SyntheticIsSeededAndBalancedEnough) {
  SyntheticSpec s;
  s.samples = 400;
  const auto a = make_synthetic(s);
  const auto b = make_synthetic(s);
  EXPECT_TRUE(a.images == b.images);
  EXPECT_EQ(a.labels, b.labels);
  std::vector<int> count(s.classes, 0);
  for (int l : a.labels) ++count[static_cast<std::size_t>(l)];
  for (int c : count) EXPECT_GT(c, 50);
  s.seed = 8;
  EXPECT_FALSE(make_synthetic(s).images == a.images);
}

TEST(Dataset, SplitIsDisjointAndComplete) {
  SyntheticSpec s;
  s.samples = 100;
  const auto d = make_synthetic(s);
  const auto split = split_validation(d, 0.2, 5);
  EXPECT_EQ(split.validation.size(), 20u);
  EXPECT_EQ(split.train.size(), 80u);
  EXPECT_THROW(split_validation(d.subset(std::vector<std::size_t>{0}), 0.2, 1), ArgumentError);
}

TEST(Dataset, SamplerVisitsEverySampleOncePerEpoch) {
  BatchSampler s(10, 5, 1);
  std::multiset<std::size_t> seen;
  for (int i = 0; i < 2; ++i)
    for (auto v : s.next()) seen.insert(v);
  EXPECT_EQ(seen.size(), 10u);
  EXPECT_EQ(std::set<std::size_t>(seen.begin(), seen.end()).size(), 10u);
}

TEST(Dataset, CifarBinaryLoader) {
  const auto dir = std::filesystem::temp_directory_path() / "dsconv_cifar_test";
  std::filesystem::create_directories(dir);
  const auto file = dir / "batch.bin";
  {
    std::ofstream out(file, std::ios::binary);
    for (int rec = 0; rec < 2; ++rec) {
      out.put(static_cast<char>(rec == 0 ? 7 : 2));
      for (int j = 0; j < 3072; ++j) out.put(static_cast<char>(j == 0 ? 255 : 0));
    }
  }
  const auto d = load_cifar_binary(file, 10);
  EXPECT_EQ(d.size(), 2u);
  EXPECT_EQ(d.labels[0], 7);
  EXPECT_EQ(d.images(1, 0, 0, 0), 1.0);
  EXPECT_THROW(load_cifar_binary(file, 5), FormatError);
  std::filesystem::resize_file(file, 3073 + 100);
  EXPECT_THROW(load_cifar_binary(file, 10), FormatError);
  EXPECT_THROW(load_cifar_binary(dir / "missing.bin", 10), IoError);
  std::filesystem::remove_all(dir);
}
