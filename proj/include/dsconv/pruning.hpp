#pragma once

#include <cstdint>
#include <functional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "dsconv/toynet.hpp"

namespace dsconv {

struct PruneConfig {
  double acc_threshold = -0.01;  // accept when accuracy change exceeds this
  std::size_t iter_nr = 150;
  std::size_t batch_nr = 8;  // SGD steps per iteration
  std::size_t batch_size = 32;
  std::size_t pool_size = 6;
  double init_sparsity_lo = 0.5;
  double init_sparsity_hi = 0.75;
  double mask_increment = 0.05;
  double lr = 0.05;
  double target_sparsity = 0.8;
  std::size_t stagnation_window = 10;
  double alpha_gain = 1.0;
  double alpha_min = 0.05;
  double alpha_max = 0.9;
  double grad_ema = 0.9;
  double sensitivity_ema = 0.9;
  std::uint64_t seed = 1;
  int workers = 0;

  void validate() const;
};

nlohmann::json to_json(const PruneConfig& c);
/// Missing keys keep their defaults; unknown keys are rejected.
PruneConfig prune_config_from_json(const nlohmann::json& j);

struct PruneSnapshot {
  ToyNet net;
  Masks masks;
  std::vector<double> sparsity;
  double accuracy = 0.0;
};

/// One pool member.
struct Solution {
  ToyNet net;
  Masks masks;
  std::vector<double> sparsity;  // per-layer target sparsity
  double accuracy = 0.0;         // validation accuracy of the current state
  std::size_t age = 0;
  GradStats grad_stats;
  double alpha = 0.5;
  PruneSnapshot rewind;  // last accepted state

  void take_snapshot() { rewind = {net, masks, sparsity, accuracy}; }
  void restore_snapshot();
};

/// Fraction of zeros in one mask.
double mask_sparsity(std::span<const std::uint8_t> mask);
/// Parameter-count weighted sparsity over all conv layers.
double weighted_sparsity(const Masks& masks);

/// wg = alpha * grad + (1 - alpha) * |w|.
std::vector<double> weight_importance(std::span<const double> w, std::span<const double> grad, double alpha);

/// ceil((1 - sparsity) * n), computed without floating round-off at exact products.
std::size_t keep_count(std::size_t n, double sparsity);

/// Keeps the keep_count(n, sparsity) largest entries; ties go to the lower index.
std::vector<std::uint8_t> recompute_mask(std::span<const double> wg, double sparsity);

/// Fraction of positions whose keep flag differs.
double migration_rate(const Masks& prev, const Masks& next);
double check_weights_migration(const Masks& prev, const Masks& next, double gain = 1.0, double alpha_min = 0.05,
                               double alpha_max = 0.9);

/// Uniform random subset of ceil(L/3) layer indices, sorted.
std::vector<std::size_t> choose_layers(std::size_t layer_count, std::mt19937_64& rng);

/// Rebuilds every mask from the importance score at the current sparsities and zeroes the pruned weights.
void refresh_masks(Solution& s);

/// Random ±increment on a ceil(L/3) layer subset, clamped to [0, 0.99]. Masks are left for the caller to refresh.
Solution mutate(const Solution& s, double increment, std::mt19937_64& rng);

/// Child keeps a's weights; each layer's sparsity comes from a or b with equal probability.
Solution crossover(const Solution& a, const Solution& b, std::mt19937_64& rng);

using Evaluator = std::function<double(const ToyNet&)>;

/// k-means (k = pool/2) over per-layer sparsity vectors; the best member of
/// every non-empty cluster survives (survivors come first), the rest of the
/// pool is refilled with mutated survivors. Refills get fresh masks and, if
/// `evaluate` is set, a fresh accuracy.
std::vector<Solution> differentiate_pool(std::vector<Solution> pool, double increment, std::mt19937_64& rng,
                                         const Evaluator& evaluate = {});

struct HistoryRecord {
  std::size_t iteration = 0;
  std::size_t member = 0;
  std::string event;  // accept | rewind-mutate | rewind-crossover (with "+error" on a training failure)
  std::vector<std::size_t> layers;
  std::vector<double> sparsity;       // evaluated state
  std::vector<double> next_sparsity;  // after the increment or mutation
  double accuracy = 0.0;
  double weighted_sparsity = 0.0;
  double alpha = 0.0;
  bool differentiated = false;
};

nlohmann::json to_json(const HistoryRecord& r);

struct PruneResult {
  Solution best;
  std::vector<HistoryRecord> history;
  std::vector<Solution> pool;
  std::vector<double> sensitivity;
  double baseline_accuracy = 0.0;
};

/// Evolutionary pruning with retraining starting from a trained dense net.
PruneResult prune_run(const PruneConfig& config, const ToyNet& baseline, const DataSplit& data);

}  // namespace dsconv
