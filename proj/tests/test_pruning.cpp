#include <gtest/gtest.h>

#include <cstring>
#include <random>

#include "dsconv/csr_kernel.hpp"
#include "dsconv/pruning.hpp"

using namespace dsconv;

namespace {

ToyNet tiny_net(std::uint64_t seed = 1) {
  ToyNetSpec spec;
  spec.height = 8;
  spec.width = 8;
  spec.convs = {{4, 3, 1, 1}, {6, 2, 2, 0}, {6, 1, 1, 0}};
  return ToyNet(spec, seed);
}

Solution solution_at(std::vector<double> sparsity, double accuracy, std::uint64_t seed = 1) {
  Solution s;
  s.net = tiny_net(seed);
  s.sparsity = std::move(sparsity);
  s.accuracy = accuracy;
  refresh_masks(s);
  s.take_snapshot();
  return s;
}

DataSplit tiny_data() {
  SyntheticSpec s;
  s.samples = 160;
  s.height = 8;
  s.width = 8;
  return split_validation(make_synthetic(s), 0.25, 1);
}

}  // namespace

TEST(WeightImportance, Examples) {
  const std::vector<double> w{1.0, -2.0}, g{4.0, 1.0};
  EXPECT_EQ(weight_importance(w, g, 0.5), (std::vector<double>{2.5, 1.5}));
  EXPECT_EQ(weight_importance(w, g, 0.0), (std::vector<double>{1.0, 2.0}));
  EXPECT_EQ(weight_importance(w, g, 1.0), g);
  EXPECT_THROW(weight_importance(w, std::vector<double>{1.0}, 0.5), ShapeError);
}

TEST(RecomputeMask, Examples) {
  const std::vector<double> wg{1, 2, 3, 4};
  EXPECT_EQ(recompute_mask(wg, 0.5), (std::vector<std::uint8_t>{0, 0, 1, 1}));
  EXPECT_EQ(recompute_mask(wg, 0.0), (std::vector<std::uint8_t>{1, 1, 1, 1}));
  EXPECT_EQ(recompute_mask(std::vector<double>{5, 5, 5, 5}, 0.5), (std::vector<std::uint8_t>{1, 1, 0, 0}));
  EXPECT_THROW(recompute_mask(wg, 1.0), ArgumentError);
}

TEST(RecomputeMask, KeepCountIsExactCeiling) {
  // Oracle in integer arithmetic: sparsity a/b keeps ceil((b - a)·n / b).
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 20000; ++trial) {
    const std::size_t n = 1 + rng() % 300, b = 1 + rng() % 200, a = rng() % b;
    const double s = static_cast<double>(a) / static_cast<double>(b);
    const std::size_t want = ((b - a) * n + b - 1) / b;
    ASSERT_EQ(keep_count(n, s), want) << "n=" << n << " s=" << a << "/" << b;
  }
  std::vector<double> wg(257);
  for (auto& v : wg) v = static_cast<double>(rng() % 1000);
  for (double s : {0.0, 0.1, 0.33, 0.5, 0.77, 0.9, 0.95, 0.99}) {
    const auto m = recompute_mask(wg, s);
    EXPECT_EQ(static_cast<std::size_t>(std::count(m.begin(), m.end(), 1)), keep_count(wg.size(), s));
  }
}

TEST(RecomputeMask, KeptEntriesDominatePrunedOnes) {
  std::mt19937_64 rng(5);
  std::vector<double> wg(100);
  for (auto& v : wg) v = std::uniform_real_distribution<double>(0, 1)(rng);
  const auto m = recompute_mask(wg, 0.7);
  double min_kept = 1e9, max_pruned = -1e9;
  for (std::size_t i = 0; i < wg.size(); ++i) (m[i] ? min_kept : max_pruned) = m[i] ? std::min(min_kept, wg[i]) : std::max(max_pruned, wg[i]);
  EXPECT_GE(min_kept, max_pruned);
}

TEST(RecomputeMask, MaskedLayerSparsityWithinOneElement) {
  std::mt19937_64 rng(8);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t K = 1 + rng() % 8, C = 1 + rng() % 8, R = 1 + rng() % 3;
    Tensor4D<float> w(Extents{K, C, R, R});
    std::vector<double> wg(w.size());
    for (std::size_t i = 0; i < w.size(); ++i) {
      w.data()[i] = std::uniform_real_distribution<float>(0.1f, 1.0f)(rng);
      wg[i] = w.data()[i];
    }
    const double s = std::uniform_real_distribution<double>(0.0, 0.99)(rng);
    const auto m = recompute_mask(wg, s);
    for (std::size_t i = 0; i < w.size(); ++i) w.data()[i] *= static_cast<float>(m[i]);
    const double got = analyze_sparsity(w).layer_sparsity;
    EXPECT_LE(std::abs(got - s), 1.0 / static_cast<double>(w.size()) + 1e-12);
  }
}

TEST(Migration, AlphaMapping) {
  const Masks a{{1, 1, 0, 0}}, b{{1, 0, 1, 0}}, flipped{{0, 0, 1, 1}};
  EXPECT_DOUBLE_EQ(check_weights_migration(a, a), 0.05);
  EXPECT_DOUBLE_EQ(check_weights_migration(a, flipped), 0.9);
  EXPECT_DOUBLE_EQ(migration_rate(a, b), 0.5);
  EXPECT_DOUBLE_EQ(check_weights_migration(a, b), 0.5);
  const Masks two{{1, 1}, {0, 0, 0, 0, 0, 0}}, two_b{{1, 0}, {0, 0, 0, 0, 0, 1}};
  EXPECT_DOUBLE_EQ(migration_rate(two, two_b), 2.0 / 8.0);
  EXPECT_THROW(migration_rate(a, two), ShapeError);
}

TEST(ChooseLayers, ThirdOfTheLayersSortedAndDistinct) {
  std::mt19937_64 rng(1);
  for (std::size_t L = 1; L < 20; ++L) {
    const auto idx = choose_layers(L, rng);
    EXPECT_EQ(idx.size(), (L + 2) / 3);
    EXPECT_TRUE(std::is_sorted(idx.begin(), idx.end()));
    EXPECT_EQ(std::adjacent_find(idx.begin(), idx.end()), idx.end());
    for (auto i : idx) EXPECT_LT(i, L);
  }
}

TEST(Mutate, ZeroIncrementIsIdentityAndWeightsUntouched) {
  const auto s = solution_at({0.3, 0.5, 0.7}, 0.5);
  std::mt19937_64 rng(1);
  const auto m = mutate(s, 0.0, rng);
  EXPECT_EQ(m.sparsity, s.sparsity);
  const auto m2 = mutate(s, 0.05, rng);
  EXPECT_TRUE(m2.net == s.net);
  EXPECT_EQ(m2.masks, s.masks);
}

TEST(Mutate, SeededAndInRangeOverManyMutations) {
  auto s = solution_at({0.0, 0.5, 0.99}, 0.5);
  std::mt19937_64 r1(4), r2(4);
  EXPECT_EQ(mutate(s, 0.05, r1).sparsity, mutate(s, 0.05, r2).sparsity);
  std::mt19937_64 rng(9);
  for (int i = 0; i < 10000; ++i) {
    s.sparsity = mutate(s, 0.05, rng).sparsity;
    for (double v : s.sparsity) ASSERT_TRUE(v >= 0.0 && v <= 0.99);
  }
}

TEST(Crossover, ChildLayersComeFromParents) {
  const auto a = solution_at({0.1, 0.2, 0.3}, 0.5, 1);
  const auto b = solution_at({0.6, 0.7, 0.8}, 0.6, 2);
  std::mt19937_64 rng(1);
  for (int i = 0; i < 50; ++i) {
    const auto c = crossover(a, b, rng);
    for (std::size_t l = 0; l < 3; ++l) EXPECT_TRUE(c.sparsity[l] == a.sparsity[l] || c.sparsity[l] == b.sparsity[l]);
    EXPECT_TRUE(c.net == a.net);
  }
  std::mt19937_64 r1(7), r2(7);
  EXPECT_EQ(crossover(a, b, r1).sparsity, crossover(a, b, r2).sparsity);
  EXPECT_EQ(crossover(a, a, rng).sparsity, a.sparsity);
}

TEST(Crossover, ArchitectureMismatchIsRejected) {
  const auto a = solution_at({0.1, 0.2, 0.3}, 0.5);
  Solution b;
  ToyNetSpec spec;
  b.net = ToyNet(spec, 1);
  b.sparsity = {0.1, 0.2, 0.3};
  std::mt19937_64 rng(1);
  EXPECT_THROW(crossover(a, b, rng), ArgumentError);
}

TEST(Snapshot, RewindIsBitIdentical) {
  auto s = solution_at({0.3, 0.5, 0.7}, 0.5);
  const ToyNet net = s.net;
  const Masks masks = s.masks;
  s.net.conv(0).weights.data()[0] += 1.0;
  s.sparsity[1] = 0.9;
  refresh_masks(s);
  s.accuracy = 0.1;
  s.restore_snapshot();
  EXPECT_TRUE(s.net == net);
  EXPECT_EQ(s.masks, masks);
  EXPECT_EQ(s.sparsity, (std::vector<double>{0.3, 0.5, 0.7}));
  EXPECT_EQ(s.accuracy, 0.5);
}

TEST(DifferentiatePool, IdenticalMembersLeaveOneSurvivor) {
  std::vector<Solution> pool;
  for (double acc : {0.4, 0.8, 0.6, 0.5}) pool.push_back(solution_at({0.5, 0.5, 0.5}, acc));
  std::mt19937_64 rng(1);
  int evaluated = 0;
  const auto out = differentiate_pool(pool, 0.05, rng, [&](const ToyNet&) {
    ++evaluated;
    return 0.25;
  });
  ASSERT_EQ(out.size(), pool.size());
  EXPECT_EQ(out[0].accuracy, 0.8);
  EXPECT_EQ(evaluated, 3);
  for (std::size_t i = 1; i < out.size(); ++i) EXPECT_EQ(out[i].accuracy, 0.25);
}

TEST(DifferentiatePool, SeparatedClustersKeepOneRepresentativeEach) {
  std::vector<Solution> pool;
  pool.push_back(solution_at({0.1, 0.1, 0.1}, 0.5));
  pool.push_back(solution_at({0.9, 0.9, 0.9}, 0.7));
  pool.push_back(solution_at({0.12, 0.1, 0.1}, 0.6));
  pool.push_back(solution_at({0.9, 0.88, 0.9}, 0.4));
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    std::mt19937_64 rng(seed);
    const auto out = differentiate_pool(pool, 0.05, rng);
    ASSERT_EQ(out.size(), 4u);
    EXPECT_EQ(out[0].accuracy, 0.7);
    EXPECT_EQ(out[0].sparsity, pool[1].sparsity);
    EXPECT_EQ(out[1].accuracy, 0.6);
    EXPECT_EQ(out[1].sparsity, pool[2].sparsity);
  }
}

TEST(PruneConfig, JsonRoundTripAndValidation) {
  PruneConfig c;
  c.iter_nr = 7;
  c.init_sparsity_lo = 0.2;
  c.init_sparsity_hi = 0.4;
  const auto back = prune_config_from_json(to_json(c));
  EXPECT_EQ(to_json(back), to_json(c));
  EXPECT_THROW(prune_config_from_json(nlohmann::json{{"iter_nr", 1}, {"bogus", 2}}), ArgumentError);
  c.pool_size = 1;
  EXPECT_THROW(c.validate(), ArgumentError);
  c = {};
  c.init_sparsity_lo = 0.8;
  c.init_sparsity_hi = 0.5;
  EXPECT_THROW(c.validate(), ArgumentError);
}

TEST(PruneRun, ZeroIterationsReturnsBestInitialMember) {
  const auto data = tiny_data();
  const ToyNet base = tiny_net();
  PruneConfig c;
  c.iter_nr = 0;
  c.pool_size = 4;
  const auto r = prune_run(c, base, data);
  EXPECT_TRUE(r.history.empty());
  ASSERT_EQ(r.pool.size(), 4u);
  bool found = false;
  for (const auto& s : r.pool) {
    EXPECT_GE(s.accuracy, 0.0);
    EXPECT_LE(s.accuracy, 1.0);
    found |= s.net == r.best.net && s.masks == r.best.masks;
  }
  EXPECT_TRUE(found);
  for (double v : r.best.sparsity) EXPECT_TRUE(v >= 0.5 && v <= 0.75);
}

TEST(PruneRun, SeededHistoryIsReproducible) {
  const auto data = tiny_data();
  const ToyNet base = tiny_net();
  PruneConfig c;
  c.iter_nr = 12;
  c.pool_size = 4;
  c.batch_nr = 2;
  c.batch_size = 16;
  c.stagnation_window = 3;
  const auto a = prune_run(c, base, data);
  const auto b = prune_run(c, base, data);
  ASSERT_EQ(a.history.size(), 12u);
  ASSERT_EQ(b.history.size(), 12u);
  bool differentiated = false;
  for (std::size_t i = 0; i < a.history.size(); ++i) {
    EXPECT_EQ(to_json(a.history[i]), to_json(b.history[i]));
    EXPECT_EQ(a.history[i].iteration, i);
    EXPECT_GE(a.history[i].alpha, c.alpha_min);
    EXPECT_LE(a.history[i].alpha, c.alpha_max);
    differentiated |= a.history[i].differentiated;
  }
  EXPECT_TRUE(differentiated);
  EXPECT_TRUE(a.best.net == b.best.net);
  for (const auto& s : a.pool) {
    EXPECT_GE(s.accuracy, 0.0);
    EXPECT_LE(s.accuracy, 1.0);
    for (std::size_t l = 0; l < s.masks.size(); ++l) {
      const auto w = s.net.conv(l).weights.data();
      for (std::size_t i = 0; i < w.size(); ++i)
        if (!s.masks[l][i]) ASSERT_EQ(w[i], 0.0);
    }
  }
  c.seed = 2;
  const auto d = prune_run(c, base, data);
  bool differs = false;
  for (std::size_t i = 0; i < d.history.size(); ++i) differs |= to_json(d.history[i]) != to_json(a.history[i]);
  EXPECT_TRUE(differs);
}

TEST(PruneRun, TooSmallDatasetIsRejected) {
  auto data = tiny_data();
  data.train = data.train.subset(std::vector<std::size_t>{0, 1, 2});
  PruneConfig c;
  EXPECT_THROW(prune_run(c, tiny_net(), data), ArgumentError);
}
