#include "dsconv/quantizer.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>
#include <set>

#include "dsconv/errors.hpp"

namespace dsconv {

double FixedPointParams::lowest() const { return -std::ldexp(1.0, int_bits); }
double FixedPointParams::highest() const { return std::ldexp(1.0, int_bits) - sigma; }

FixedPointParams fit_fixed_point(std::span<const float> x, int total_bits) {
  if (x.empty()) throw ArgumentError("fit_fixed_point: empty value set");
  if (total_bits < 2 || total_bits > 32) throw ArgumentError("fit_fixed_point: total_bits must lie in [2, 32]");
  double mx = 0.0;
  for (float v : x) {
    if (!std::isfinite(v)) throw ArgumentError("fit_fixed_point: non-finite value");
    mx = std::max(mx, std::abs(static_cast<double>(v)));
  }
  FixedPointParams p;
  p.total_bits = total_bits;
  p.int_bits = mx > 0.0 ? std::max(0, static_cast<int>(std::ceil(std::log2(mx)))) : 0;
  p.int_bits = std::min(p.int_bits, total_bits - 1);
  p.frac_bits = total_bits - p.int_bits - 1;
  p.mu = 0.0;
  p.sigma = std::ldexp(1.0, -p.frac_bits);
  return p;
}

double quantize_fixed(double x, const FixedPointParams& p, bool* saturated) {
  double q = p.mu + p.sigma * std::nearbyint((x - p.mu) / p.sigma);
  const double lo = p.lowest(), hi = p.highest();
  const bool sat = q < lo || q > hi;
  if (saturated) *saturated = sat;
  return std::clamp(q, lo, hi);
}

std::vector<float> quantize_fixed(std::span<const float> x, const FixedPointParams& p, std::size_t* saturated) {
  std::vector<float> out(x.size());
  std::size_t count = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    bool s = false;
    out[i] = static_cast<float>(quantize_fixed(x[i], p, &s));
    count += s;
  }
  if (saturated) *saturated = count;
  return out;
}

std::int64_t AffineIntParams::code_min() const {
  return mode == AffineMode::asymmetric ? 0 : -((std::int64_t{1} << (bits - 1)) - 1);
}

std::int64_t AffineIntParams::code_max() const {
  return mode == AffineMode::asymmetric ? (std::int64_t{1} << bits) - 1 : (std::int64_t{1} << (bits - 1)) - 1;
}

AffineIntParams affine_from_range(double lo, double hi, int bits, AffineMode mode, bool literal_ceil) {
  if (bits < 2 || bits > 32) throw ArgumentError("affine quantization: bits must lie in [2, 32]");
  if (!(lo <= hi)) throw ArgumentError("affine quantization: min > max");
  AffineIntParams p;
  p.bits = bits;
  p.mode = mode;
  p.lo = lo;
  p.hi = hi;
  p.literal_ceil = literal_ceil;
  if (mode == AffineMode::asymmetric) {
    p.mu = lo;
    p.step = hi > lo ? (hi - lo) / static_cast<double>((std::int64_t{1} << bits) - 1) : 1.0;
  } else {
    p.mu = 0.0;
    const double m = std::max(std::abs(lo), std::abs(hi));
    p.step = m > 0.0 ? m / static_cast<double>((std::int64_t{1} << (bits - 1)) - 1) : 1.0;
  }
  p.zero_point = static_cast<std::int64_t>(std::nearbyint(-p.mu / p.step));
  return p;
}

AffineIntParams fit_affine(std::span<const float> x, int bits, AffineMode mode, bool literal_ceil) {
  if (x.empty()) throw ArgumentError("fit_affine: empty value set");
  const auto [mn, mx] = std::minmax_element(x.begin(), x.end());
  return affine_from_range(*mn, *mx, bits, mode, literal_ceil);
}

std::int64_t quantize_affine_int(double x, const AffineIntParams& p) {
  if (p.hi == p.lo && p.mode == AffineMode::asymmetric) return 0;
  const double t = (x - p.mu) / p.step;
  const double r = p.literal_ceil ? std::ceil(t) : std::nearbyint(t);
  const double c = std::clamp(r, static_cast<double>(p.code_min()), static_cast<double>(p.code_max()));
  return static_cast<std::int64_t>(c);
}

double dequantize_affine(std::int64_t code, const AffineIntParams& p) { return p.mu + static_cast<double>(code) * p.step; }

namespace {

double fake_quant_mse(std::span<const float> s, const AffineIntParams& p) {
  double sum = 0.0;
  for (float v : s) {
    const double d = fake_quant_affine(v, p) - v;
    sum += d * d;
  }
  return sum / static_cast<double>(s.size());
}

}  // namespace

SaturationPolicy calibrate_saturation(std::span<const float> samples, std::span<const double> coverage_targets,
                                      int bits, AffineMode mode) {
  if (samples.empty()) throw ArgumentError("calibrate_saturation: empty sample set");
  const auto [mn_it, mx_it] = std::minmax_element(samples.begin(), samples.end());
  const double mn = *mn_it, mx = *mx_it;
  SaturationPolicy pol;
  pol.bits = bits;
  pol.mode = mode;
  pol.hist_lo = mn;
  pol.hist_hi = mx;
  pol.histogram.assign(kHistogramBins, 0);
  const double width = mx > mn ? (mx - mn) / static_cast<double>(kHistogramBins) : 1.0;
  for (float v : samples) {
    auto b = static_cast<std::size_t>((v - mn) / width);
    pol.histogram[std::min(b, kHistogramBins - 1)]++;
  }
  const double total = static_cast<double>(samples.size());

  // Value at which the cumulative histogram mass first reaches `q` (bin edge).
  auto edge_at = [&](double q) {
    double cum = 0.0;
    for (std::size_t b = 0; b < kHistogramBins; ++b) {
      cum += static_cast<double>(pol.histogram[b]);
      if (cum / total >= q) return mn + width * static_cast<double>(b + 1);
    }
    return mx;
  };
  auto lower_edge = [&](double q) {
    double cum = 0.0;
    for (std::size_t b = 0; b < kHistogramBins; ++b) {
      if (cum / total >= q) return mn + width * static_cast<double>(b);
      cum += static_cast<double>(pol.histogram[b]);
    }
    return mx;
  };

  auto params_for = [&](double lo, double hi) { return affine_from_range(lo, hi, bits, mode); };
  pol.clip_lo = mn;
  pol.clip_hi = mx;
  pol.no_clip_mse = fake_quant_mse(samples, params_for(mn, mx));
  pol.mse = pol.no_clip_mse;

  for (double c : coverage_targets) {
    if (!(c > 0.0 && c <= 1.0)) throw ArgumentError("calibrate_saturation: coverage targets must lie in (0, 1]");
    const double drop = 1.0 - c;
    for (double low_share : {0.0, 0.5, 1.0}) {
      const double lo = std::max(mn, lower_edge(drop * low_share));
      const double hi = std::min(mx, edge_at(1.0 - drop * (1.0 - low_share)));
      if (!(lo < hi)) continue;
      const double m = fake_quant_mse(samples, params_for(lo, hi));
      if (m < pol.mse) {
        pol.mse = m;
        pol.clip_lo = lo;
        pol.clip_hi = hi;
      }
    }
  }
  std::size_t inside = 0;
  for (float v : samples) inside += v >= pol.clip_lo && v <= pol.clip_hi;
  pol.coverage = static_cast<double>(inside) / total;
  return pol;
}

unsigned Codebook::index_bits() const {
  unsigned b = 1;
  while ((std::size_t{1} << b) < centroids.size()) ++b;
  return b;
}

std::vector<float> Codebook::decode() const {
  std::vector<float> out(assignments.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = centroids.at(assignments[i]).to_float();
  return out;
}

namespace {

std::size_t nearest(double v, const std::vector<double>& c, std::size_t first) {
  std::size_t best = first;
  for (std::size_t j = first + 1; j < c.size(); ++j)
    if (std::abs(v - c[j]) < std::abs(v - c[best])) best = j;
  return best;
}

}  // namespace

Codebook build_codebook(std::span<const float> w, std::size_t k, const CodebookOptions& opts) {
  if (w.empty()) throw ArgumentError("build_codebook: empty weight set");
  if (k == 0) throw ArgumentError("build_codebook: k must be >= 1");
  Codebook cb;
  cb.requested_k = k;
  cb.zero_pinned = opts.pin_zero;

  // Points to fit: every weight, or only the non-zeros when zero is pinned.
  std::vector<double> pts;
  std::vector<std::size_t> where;
  for (std::size_t i = 0; i < w.size(); ++i) {
    if (opts.pin_zero && w[i] == 0.0f) continue;
    pts.push_back(w[i]);
    where.push_back(i);
  }
  const std::size_t first = opts.pin_zero ? 1 : 0;  // index of the first fitted centroid
  std::set<double> distinct(pts.begin(), pts.end());
  std::size_t fit_k = std::min(k - first, distinct.size());
  if (opts.pin_zero && k < 2 && !pts.empty()) throw ArgumentError("build_codebook: pinning zero needs k >= 2");

  // One seeded k-means++ start followed by Lloyd iterations.
  auto lloyd = [&](std::uint64_t seed, std::vector<double>& sse_history) {
    std::vector<double> c(first, 0.0);
    std::vector<std::uint32_t> assign(pts.size(), 0);
    std::mt19937_64 rng(seed);
    std::vector<double> seeds{pts[std::uniform_int_distribution<std::size_t>(0, pts.size() - 1)(rng)]};
    std::vector<double> d2(pts.size());
    while (seeds.size() < fit_k) {
      for (std::size_t i = 0; i < pts.size(); ++i) {
        double m = std::numeric_limits<double>::max();
        for (double s : seeds) m = std::min(m, (pts[i] - s) * (pts[i] - s));
        d2[i] = m;
      }
      std::discrete_distribution<std::size_t> pick(d2.begin(), d2.end());
      seeds.push_back(pts[pick(rng)]);
    }
    c.insert(c.end(), seeds.begin(), seeds.end());

    double prev = std::numeric_limits<double>::infinity();
    for (std::size_t it = 0; it < opts.max_iters; ++it) {
      for (std::size_t i = 0; i < pts.size(); ++i) assign[i] = static_cast<std::uint32_t>(nearest(pts[i], c, first));
      std::vector<double> sum(c.size(), 0.0);
      std::vector<std::size_t> cnt(c.size(), 0);
      for (std::size_t i = 0; i < pts.size(); ++i) {
        sum[assign[i]] += pts[i];
        cnt[assign[i]]++;
      }
      for (std::size_t j = first; j < c.size(); ++j)
        if (cnt[j]) c[j] = sum[j] / static_cast<double>(cnt[j]);
      // Empty clusters take the point currently worst served.
      for (std::size_t j = first; j < c.size(); ++j) {
        if (cnt[j]) continue;
        std::size_t far = 0;
        double fd = -1.0;
        for (std::size_t i = 0; i < pts.size(); ++i) {
          const double d = std::abs(pts[i] - c[assign[i]]);
          if (d > fd) {
            fd = d;
            far = i;
          }
        }
        c[j] = pts[far];
        assign[far] = static_cast<std::uint32_t>(j);
      }
      double sse = 0.0;
      for (std::size_t i = 0; i < pts.size(); ++i) sse += (pts[i] - c[assign[i]]) * (pts[i] - c[assign[i]]);
      sse_history.push_back(sse);
      if (std::isfinite(prev) && (prev == 0.0 ? sse == 0.0 : std::abs(prev - sse) / prev < opts.tolerance)) break;
      if (sse == 0.0) break;
      prev = sse;
    }
    return c;
  };

  std::vector<double> c(first, 0.0);
  if (fit_k > 0) {
    for (std::size_t r = 0; r < std::max<std::size_t>(opts.restarts, 1); ++r) {
      std::vector<double> hist;
      auto cr = lloyd(opts.seed + r * 0x9e3779b97f4a7c15ull, hist);
      if (r == 0 || hist.back() < cb.sse_history.back()) {
        c = std::move(cr);
        cb.sse_history = std::move(hist);
      }
    }
  }

  // Store centroids in binary16 and re-assign against the stored values.
  cb.centroids.clear();
  std::vector<double> stored;
  for (double v : c) {
    cb.centroids.push_back(Half(static_cast<float>(v)));
    stored.push_back(cb.centroids.back().to_float());
  }
  if (cb.centroids.empty()) {  // pin_zero with no non-zero weights
    cb.centroids.push_back(Half(0.0f));
    stored.push_back(0.0);
  }
  cb.assignments.assign(w.size(), 0);
  cb.final_sse = 0.0;
  for (std::size_t i = 0; i < pts.size(); ++i) {
    const std::size_t j = fit_k > 0 ? nearest(pts[i], stored, first) : 0;
    cb.assignments[where[i]] = static_cast<std::uint32_t>(j);
    cb.final_sse += (pts[i] - stored[j]) * (pts[i] - stored[j]);
  }
  return cb;
}

std::uint64_t codebook_payload_bits(std::size_t nnz, std::size_t k) {
  unsigned b = 1;
  while ((std::size_t{1} << b) < k) ++b;
  return static_cast<std::uint64_t>(nnz) * b + static_cast<std::uint64_t>(k) * 16;
}

std::string QuantScheme::to_string() const {
  switch (kind) {
    case Kind::fixed: return "fixed:" + std::to_string(bits);
    case Kind::affine: return "affine:" + std::to_string(bits);
    case Kind::codebook: return "codebook:" + std::to_string(k);
    case Kind::half: return "half";
  }
  return "?";
}

QuantScheme QuantScheme::parse(const std::string& text) {
  QuantScheme s;
  if (text == "half" || text == "f16") {
    s.kind = Kind::half;
    s.bits = 16;
    return s;
  }
  const auto colon = text.find(':');
  if (colon == std::string::npos) throw ArgumentError("quantization scheme '" + text + "' needs the form name:N");
  const std::string name = text.substr(0, colon), num = text.substr(colon + 1);
  std::size_t n = 0;
  try {
    std::size_t used = 0;
    n = std::stoul(num, &used);
    if (used != num.size()) throw std::invalid_argument("trailing");
  } catch (const std::exception&) {
    throw ArgumentError("quantization scheme '" + text + "': bad number");
  }
  if (name == "fixed" || name == "affine") {
    if (n < 2 || n > 32) throw ArgumentError("quantization bits must lie in [2, 32]");
    s.kind = name == "fixed" ? Kind::fixed : Kind::affine;
    s.bits = static_cast<int>(n);
  } else if (name == "codebook") {
    if (n < 1 || n > 65536) throw ArgumentError("codebook size must lie in [1, 65536]");
    s.kind = Kind::codebook;
    s.k = n;
  } else {
    throw ArgumentError("unknown quantization scheme '" + name + "'");
  }
  return s;
}

}  // namespace dsconv
