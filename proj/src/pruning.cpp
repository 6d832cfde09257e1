#include "dsconv/pruning.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

namespace dsconv {

void PruneConfig::validate() const {
  if (!(init_sparsity_lo >= 0.0 && init_sparsity_lo <= init_sparsity_hi && init_sparsity_hi < 1.0))
    throw ArgumentError("initial sparsity range must satisfy 0 <= lo <= hi < 1");
  if (pool_size < 2) throw ArgumentError("pool_size must be >= 2");
  if (batch_size == 0) throw ArgumentError("batch_size must be >= 1");
  if (!(mask_increment >= 0.0 && mask_increment < 1.0)) throw ArgumentError("mask_increment must lie in [0, 1)");
  if (!(target_sparsity >= 0.0 && target_sparsity < 1.0)) throw ArgumentError("target_sparsity must lie in [0, 1)");
  if (!(alpha_min >= 0.0 && alpha_min <= alpha_max && alpha_max <= 1.0))
    throw ArgumentError("alpha bounds must satisfy 0 <= min <= max <= 1");
  if (!(lr >= 0.0) || !std::isfinite(lr)) throw ArgumentError("lr must be finite and >= 0");
  if (stagnation_window == 0) throw ArgumentError("stagnation_window must be >= 1");
}

nlohmann::json to_json(const PruneConfig& c) {
  return {{"acc_threshold", c.acc_threshold},
          {"iter_nr", c.iter_nr},
          {"batch_nr", c.batch_nr},
          {"batch_size", c.batch_size},
          {"pool_size", c.pool_size},
          {"initial_sparsity_range", {c.init_sparsity_lo, c.init_sparsity_hi}},
          {"mask_increment", c.mask_increment},
          {"lr", c.lr},
          {"target_sparsity", c.target_sparsity},
          {"stagnation_window", c.stagnation_window},
          {"alpha_gain", c.alpha_gain},
          {"alpha_min", c.alpha_min},
          {"alpha_max", c.alpha_max},
          {"grad_ema", c.grad_ema},
          {"sensitivity_ema", c.sensitivity_ema},
          {"seed", c.seed},
          {"workers", c.workers}};
}

PruneConfig prune_config_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ArgumentError("prune config must be a JSON object");
  PruneConfig c;
  try {
    for (const auto& [key, v] : j.items()) {
      if (key == "acc_threshold") c.acc_threshold = v.get<double>();
      else if (key == "iter_nr") c.iter_nr = v.get<std::size_t>();
      else if (key == "batch_nr") c.batch_nr = v.get<std::size_t>();
      else if (key == "batch_size") c.batch_size = v.get<std::size_t>();
      else if (key == "pool_size") c.pool_size = v.get<std::size_t>();
      else if (key == "initial_sparsity_range") {
        const auto r = v.get<std::vector<double>>();
        if (r.size() != 2) throw ArgumentError("initial_sparsity_range needs two values");
        c.init_sparsity_lo = r[0];
        c.init_sparsity_hi = r[1];
      } else if (key == "mask_increment") c.mask_increment = v.get<double>();
      else if (key == "lr") c.lr = v.get<double>();
      else if (key == "target_sparsity") c.target_sparsity = v.get<double>();
      else if (key == "stagnation_window") c.stagnation_window = v.get<std::size_t>();
      else if (key == "alpha_gain") c.alpha_gain = v.get<double>();
      else if (key == "alpha_min") c.alpha_min = v.get<double>();
      else if (key == "alpha_max") c.alpha_max = v.get<double>();
      else if (key == "grad_ema") c.grad_ema = v.get<double>();
      else if (key == "sensitivity_ema") c.sensitivity_ema = v.get<double>();
      else if (key == "seed") c.seed = v.get<std::uint64_t>();
      else if (key == "workers") c.workers = v.get<int>();
      else throw ArgumentError("unknown prune config key '" + key + "'");
    }
  } catch (const nlohmann::json::exception& e) {
    throw ArgumentError(std::string("prune config: ") + e.what());
  }
  c.validate();
  return c;
}

void Solution::restore_snapshot() {
  net = rewind.net;
  masks = rewind.masks;
  sparsity = rewind.sparsity;
  accuracy = rewind.accuracy;
}

double mask_sparsity(std::span<const std::uint8_t> mask) {
  if (mask.empty()) return 0.0;
  const auto kept = static_cast<std::size_t>(std::count_if(mask.begin(), mask.end(), [](auto f) { return f != 0; }));
  return static_cast<double>(mask.size() - kept) / static_cast<double>(mask.size());
}

double weighted_sparsity(const Masks& masks) {
  std::size_t zeros = 0, total = 0;
  for (const auto& m : masks) {
    total += m.size();
    zeros += static_cast<std::size_t>(std::count(m.begin(), m.end(), std::uint8_t{0}));
  }
  return total == 0 ? 0.0 : static_cast<double>(zeros) / static_cast<double>(total);
}

std::vector<double> weight_importance(std::span<const double> w, std::span<const double> grad, double alpha) {
  if (w.size() != grad.size()) throw ShapeError("weight_importance: size mismatch");
  std::vector<double> wg(w.size());
  for (std::size_t i = 0; i < w.size(); ++i) wg[i] = alpha * grad[i] + (1.0 - alpha) * std::abs(w[i]);
  return wg;
}

std::size_t keep_count(std::size_t n, double sparsity) {
  const double pruned = std::floor(sparsity * static_cast<double>(n) + 1e-9);
  return n - std::min(n, static_cast<std::size_t>(std::max(0.0, pruned)));
}

std::vector<std::uint8_t> recompute_mask(std::span<const double> wg, double sparsity) {
  if (!(sparsity >= 0.0 && sparsity < 1.0)) throw ArgumentError("recompute_mask: sparsity must lie in [0, 1)");
  const std::size_t n = wg.size(), keep = keep_count(n, sparsity);
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return wg[a] > wg[b]; });
  std::vector<std::uint8_t> mask(n, 0);
  for (std::size_t i = 0; i < keep; ++i) mask[order[i]] = 1;
  return mask;
}

double migration_rate(const Masks& prev, const Masks& next) {
  if (prev.size() != next.size()) throw ShapeError("migration: layer count mismatch");
  std::size_t changed = 0, total = 0;
  for (std::size_t l = 0; l < prev.size(); ++l) {
    if (prev[l].size() != next[l].size()) throw ShapeError("migration: mask size mismatch");
    for (std::size_t i = 0; i < prev[l].size(); ++i) changed += (prev[l][i] != 0) != (next[l][i] != 0);
    total += prev[l].size();
  }
  return total == 0 ? 0.0 : static_cast<double>(changed) / static_cast<double>(total);
}

double check_weights_migration(const Masks& prev, const Masks& next, double gain, double alpha_min,
                               double alpha_max) {
  return std::clamp(migration_rate(prev, next) * gain, alpha_min, alpha_max);
}

std::vector<std::size_t> choose_layers(std::size_t layer_count, std::mt19937_64& rng) {
  std::vector<std::size_t> idx(layer_count);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::shuffle(idx.begin(), idx.end(), rng);
  idx.resize((layer_count + 2) / 3);
  std::sort(idx.begin(), idx.end());
  return idx;
}

void refresh_masks(Solution& s) {
  const std::size_t L = s.net.conv_count();
  s.masks.resize(L);
  for (std::size_t l = 0; l < L; ++l) {
    auto w = s.net.conv(l).weights.data();
    std::vector<double> zeros;
    std::span<const double> g;
    if (l < s.grad_stats.size() && s.grad_stats[l].size() == w.size()) {
      g = s.grad_stats[l];
    } else {
      zeros.assign(w.size(), 0.0);
      g = zeros;
    }
    s.masks[l] = recompute_mask(weight_importance(w, g, s.alpha), s.sparsity.at(l));
  }
  s.net.apply_masks(s.masks);
}

Solution mutate(const Solution& s, double increment, std::mt19937_64& rng) {
  Solution out = s;
  std::bernoulli_distribution up(0.5);
  for (std::size_t l : choose_layers(s.sparsity.size(), rng)) {
    const double d = up(rng) ? increment : -increment;
    out.sparsity[l] = std::clamp(out.sparsity[l] + d, 0.0, 0.99);
  }
  return out;
}

Solution crossover(const Solution& a, const Solution& b, std::mt19937_64& rng) {
  if (a.sparsity.size() != b.sparsity.size() || a.net.conv_count() != b.net.conv_count())
    throw ArgumentError("crossover: parents have different architectures");
  for (std::size_t l = 0; l < a.net.conv_count(); ++l)
    if (a.net.conv(l).shape != b.net.conv(l).shape)
      throw ArgumentError("crossover: layer " + std::to_string(l) + " shapes differ");
  Solution child = a;
  std::bernoulli_distribution pick_b(0.5);
  for (std::size_t l = 0; l < child.sparsity.size(); ++l)
    if (pick_b(rng)) child.sparsity[l] = b.sparsity[l];
  return child;
}

namespace {

double sq_dist(const std::vector<double>& a, const std::vector<double>& b) {
  double d = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) d += (a[i] - b[i]) * (a[i] - b[i]);
  return d;
}

// Lloyd's k-means with k-means++ seeding over small point sets; returns assignments.
std::vector<std::size_t> kmeans_points(const std::vector<std::vector<double>>& pts, std::size_t k,
                                       std::mt19937_64& rng) {
  const std::size_t n = pts.size();
  std::vector<std::vector<double>> centers;
  centers.push_back(pts[std::uniform_int_distribution<std::size_t>(0, n - 1)(rng)]);
  while (centers.size() < k) {
    std::vector<double> d2(n);
    for (std::size_t i = 0; i < n; ++i) {
      d2[i] = std::numeric_limits<double>::max();
      for (const auto& c : centers) d2[i] = std::min(d2[i], sq_dist(pts[i], c));
    }
    if (std::accumulate(d2.begin(), d2.end(), 0.0) <= 0.0) break;  // every point already a center
    std::discrete_distribution<std::size_t> pick(d2.begin(), d2.end());
    centers.push_back(pts[pick(rng)]);
  }
  std::vector<std::size_t> assign(n, 0);
  for (int iter = 0; iter < 100; ++iter) {
    bool moved = false;
    for (std::size_t i = 0; i < n; ++i) {
      std::size_t best = 0;
      for (std::size_t c = 1; c < centers.size(); ++c)
        if (sq_dist(pts[i], centers[c]) < sq_dist(pts[i], centers[best])) best = c;
      moved |= best != assign[i];
      assign[i] = best;
    }
    if (!moved && iter > 0) break;
    for (std::size_t c = 0; c < centers.size(); ++c) {
      std::vector<double> sum(pts[0].size(), 0.0);
      std::size_t cnt = 0;
      for (std::size_t i = 0; i < n; ++i)
        if (assign[i] == c) {
          for (std::size_t d = 0; d < sum.size(); ++d) sum[d] += pts[i][d];
          ++cnt;
        }
      if (cnt == 0) continue;
      for (auto& v : sum) v /= static_cast<double>(cnt);
      centers[c] = sum;
    }
  }
  return assign;
}

}  // namespace

std::vector<Solution> differentiate_pool(std::vector<Solution> pool, double increment, std::mt19937_64& rng,
                                         const Evaluator& evaluate) {
  if (pool.empty()) return pool;
  const std::size_t size = pool.size();
  const std::size_t k = std::max<std::size_t>(1, size / 2);
  std::vector<std::vector<double>> pts;
  for (const auto& s : pool) pts.push_back(s.sparsity);
  const auto assign = kmeans_points(pts, k, rng);

  std::vector<std::size_t> best_of(k, size);
  for (std::size_t i = 0; i < size; ++i) {
    auto& b = best_of[assign[i]];
    if (b == size || pool[i].accuracy > pool[b].accuracy) b = i;
  }
  std::vector<Solution> out;
  for (std::size_t c = 0; c < k; ++c)
    if (best_of[c] != size) out.push_back(pool[best_of[c]]);
  std::sort(out.begin(), out.end(), [](const Solution& a, const Solution& b) { return a.accuracy > b.accuracy; });
  const std::size_t survivors = out.size();
  for (std::size_t i = 0; out.size() < size; ++i) {
    Solution child = mutate(out[i % survivors], increment, rng);
    refresh_masks(child);
    if (evaluate) child.accuracy = evaluate(child.net);
    child.age = 0;
    child.take_snapshot();
    out.push_back(std::move(child));
  }
  return out;
}

nlohmann::json to_json(const HistoryRecord& r) {
  return {{"iteration", r.iteration}, {"member", r.member},     {"event", r.event},
          {"layers", r.layers},       {"sparsity", r.sparsity}, {"next_sparsity", r.next_sparsity},
          {"accuracy", r.accuracy},
          {"weighted_sparsity", r.weighted_sparsity},           {"alpha", r.alpha},
          {"differentiated", r.differentiated}};
}

namespace {

bool better_result(const Solution& a, const Solution& b, double target) {
  const double sa = weighted_sparsity(a.masks), sb = weighted_sparsity(b.masks);
  const bool qa = sa >= target - 1e-12, qb = sb >= target - 1e-12;
  if (qa != qb) return qa;
  if (qa) return a.accuracy > b.accuracy || (a.accuracy == b.accuracy && sa > sb);
  return sa > sb || (sa == sb && a.accuracy > b.accuracy);
}

double median_accuracy(const std::vector<Solution>& pool) {
  std::vector<double> acc;
  for (const auto& s : pool) acc.push_back(s.accuracy);
  std::sort(acc.begin(), acc.end());
  const std::size_t n = acc.size();
  return n % 2 ? acc[n / 2] : 0.5 * (acc[n / 2 - 1] + acc[n / 2]);
}

double pool_best(const std::vector<Solution>& pool) {
  double b = -1.0;
  for (const auto& s : pool) b = std::max(b, s.accuracy);
  return b;
}

}  // namespace

PruneResult prune_run(const PruneConfig& config, const ToyNet& baseline, const DataSplit& data) {
  config.validate();
  if (data.train.size() < config.batch_size || data.validation.size() == 0)
    throw ArgumentError("dataset too small for the configured batch size and validation split");
  std::mt19937_64 rng(config.seed);
  const std::size_t L = baseline.conv_count();
  const int workers = config.workers;
  auto evaluate = [&](const ToyNet& net) { return net.accuracy(data.validation, workers); };
  BatchSampler sampler(data.train.size(), config.batch_size, config.seed ^ 0x9e3779b97f4a7c15ull);

  TrainOptions train_opts;
  train_opts.steps = config.batch_nr;
  train_opts.lr = config.lr;
  train_opts.ema_decay = config.grad_ema;
  train_opts.workers = workers;

  PruneResult result;
  result.baseline_accuracy = evaluate(baseline);
  result.sensitivity.assign(L, 0.0);

  // Gradient statistics of the trained dense net seed every member's importance scores.
  GradStats seed_stats;
  {
    ToyNet probe = baseline;
    TrainOptions probe_opts = train_opts;
    probe_opts.lr = 0.0;
    probe_opts.steps = std::max<std::size_t>(1, config.batch_nr);
    seed_stats = train_batches(probe, nullptr, data.train, sampler, probe_opts);
  }

  std::uniform_real_distribution<double> init(config.init_sparsity_lo, config.init_sparsity_hi);
  auto& pool = result.pool;
  for (std::size_t i = 0; i < config.pool_size; ++i) {
    Solution s;
    s.net = baseline;
    s.grad_stats = seed_stats;
    s.alpha = config.alpha_min;
    s.sparsity.resize(L);
    for (auto& v : s.sparsity) v = init(rng);
    refresh_masks(s);
    s.accuracy = evaluate(s.net);
    s.take_snapshot();
    pool.push_back(std::move(s));
  }
  result.best = pool.front();
  for (const auto& s : pool)
    if (better_result(s, result.best, config.target_sparsity)) result.best = s;

  double best_pool_acc = pool_best(pool);
  std::size_t stagnant = 0;
  std::uniform_int_distribution<std::size_t> any(0, config.pool_size - 1);
  auto tournament = [&](std::size_t exclude) {
    std::size_t a = any(rng), b = any(rng);
    if (exclude < pool.size()) {
      while (a == exclude) a = any(rng);
      while (b == exclude) b = any(rng);
    }
    return pool[b].accuracy > pool[a].accuracy ? b : a;
  };

  for (std::size_t it = 0; it < config.iter_nr; ++it) {
    HistoryRecord rec;
    rec.iteration = it;
    const std::size_t idx = tournament(pool.size());
    rec.member = idx;
    rec.layers = choose_layers(L, rng);
    Solution& sol = pool[idx];
    const Masks prev_masks = sol.masks;

    bool failed = false;
    double acc = 0.0;
    try {
      sol.grad_stats = train_batches(sol.net, &sol.masks, data.train, sampler, train_opts);
      acc = evaluate(sol.net);
    } catch (const TrainingError&) {
      failed = true;
    }
    const double delta = failed ? -1.0 : acc - sol.accuracy;
    for (std::size_t l : rec.layers)
      result.sensitivity[l] = config.sensitivity_ema * result.sensitivity[l] + (1.0 - config.sensitivity_ema) * delta;

    if (!failed && delta > config.acc_threshold) {
      sol.accuracy = acc;
      ++sol.age;
      sol.take_snapshot();
      rec.sparsity = sol.sparsity;
      rec.accuracy = acc;
      rec.weighted_sparsity = weighted_sparsity(sol.masks);
      if (better_result(sol, result.best, config.target_sparsity)) result.best = sol;

      // Good enough to displace the weakest other member?
      std::size_t worst = pool.size();
      for (std::size_t i = 0; i < pool.size(); ++i) {
        if (i == idx) continue;
        if (worst == pool.size() || pool[i].accuracy < pool[worst].accuracy) worst = i;
      }
      if (worst < pool.size() && acc >= median_accuracy(pool) &&
          weighted_sparsity(sol.masks) >= weighted_sparsity(pool[worst].masks))
        pool[worst] = sol;

      // Sensitivity rank scales the increment: least harmed layers grow fastest.
      std::vector<std::size_t> rank(L);
      std::iota(rank.begin(), rank.end(), std::size_t{0});
      std::stable_sort(rank.begin(), rank.end(),
                       [&](std::size_t a, std::size_t b) { return result.sensitivity[a] < result.sensitivity[b]; });
      std::vector<double> scale(L, 1.0);
      for (std::size_t r = 0; r < L && L > 1; ++r)
        scale[rank[r]] = 0.5 + static_cast<double>(r) / static_cast<double>(L - 1);
      for (std::size_t l : rec.layers)
        sol.sparsity[l] = std::min(0.99, sol.sparsity[l] + config.mask_increment * scale[l]);
      refresh_masks(sol);
      rec.next_sparsity = sol.sparsity;
      rec.event = "accept";
    } else {
      sol.restore_snapshot();
      std::bernoulli_distribution coin(0.5);
      if (coin(rng)) {
        const Solution& other = pool[tournament(idx)];
        Solution child = crossover(sol, other, rng);
        sol.sparsity = child.sparsity;
        rec.event = "rewind-crossover";
      } else {
        sol.sparsity = mutate(sol, config.mask_increment, rng).sparsity;
        rec.event = "rewind-mutate";
      }
      if (failed) rec.event += "+error";
      refresh_masks(sol);
      sol.accuracy = evaluate(sol.net);
      rec.sparsity = sol.sparsity;
      rec.next_sparsity = sol.sparsity;
      rec.accuracy = sol.accuracy;
      rec.weighted_sparsity = weighted_sparsity(sol.masks);
      if (better_result(sol, result.best, config.target_sparsity)) result.best = sol;
    }
    sol.alpha = check_weights_migration(prev_masks, sol.masks, config.alpha_gain, config.alpha_min, config.alpha_max);

    rec.alpha = sol.alpha;

    const double now = pool_best(pool);
    if (now > best_pool_acc) {
      best_pool_acc = now;
      stagnant = 0;
    } else if (++stagnant >= config.stagnation_window) {
      pool = differentiate_pool(std::move(pool), config.mask_increment, rng, evaluate);
      best_pool_acc = pool_best(pool);
      stagnant = 0;
      rec.differentiated = true;
    }
    result.history.push_back(std::move(rec));
  }
  return result;
}

}  // namespace dsconv
