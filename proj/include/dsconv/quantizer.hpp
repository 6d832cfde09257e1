#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "dsconv/half.hpp"

namespace dsconv {

/// Signed fixed point: one sign bit, int_bits, frac_bits; grid step sigma.
struct FixedPointParams {
  int total_bits = 16;
  int int_bits = 0;
  int frac_bits = 15;
  double mu = 0.0;
  double sigma = 1.0 / 32768.0;

  double lowest() const;   // -2^int_bits
  double highest() const;  // 2^int_bits - sigma
};

/// int_bits = max(0, ceil(log2 max|x|)); frac_bits = total - int - 1; mu = 0.
FixedPointParams fit_fixed_point(std::span<const float> x, int total_bits);

/// mu + sigma * round((x - mu) / sigma), saturated to the representable range.
double quantize_fixed(double x, const FixedPointParams& p, bool* saturated = nullptr);
std::vector<float> quantize_fixed(std::span<const float> x, const FixedPointParams& p,
                                  std::size_t* saturated = nullptr);

enum class AffineMode { asymmetric, symmetric };

struct AffineIntParams {
  int bits = 8;
  AffineMode mode = AffineMode::asymmetric;
  double mu = 0.0;  // min(X) when asymmetric, 0 when symmetric
  double lo = 0.0, hi = 0.0;
  double step = 1.0;
  std::int64_t zero_point = 0;  // round(-lo / step), informational
  bool literal_ceil = false;    // ceil instead of round-to-nearest

  std::int64_t code_min() const;
  std::int64_t code_max() const;
};

AffineIntParams affine_from_range(double lo, double hi, int bits, AffineMode mode, bool literal_ceil = false);
AffineIntParams fit_affine(std::span<const float> x, int bits, AffineMode mode, bool literal_ceil = false);
std::int64_t quantize_affine_int(double x, const AffineIntParams& p);
double dequantize_affine(std::int64_t code, const AffineIntParams& p);
inline double fake_quant_affine(double x, const AffineIntParams& p) { return dequantize_affine(quantize_affine_int(x, p), p); }

struct SaturationPolicy {
  std::vector<std::uint64_t> histogram;  // 2048 bins over [hist_lo, hist_hi]
  double hist_lo = 0.0, hist_hi = 0.0;
  double clip_lo = 0.0, clip_hi = 0.0;
  double coverage = 1.0;  // fraction of samples inside the clip range
  double mse = 0.0;
  double no_clip_mse = 0.0;
  int bits = 8;
  AffineMode mode = AffineMode::asymmetric;
};

inline constexpr std::size_t kHistogramBins = 2048;

/// Chooses the clip range with the lowest quantize-dequantize MSE on the
/// samples among the full range and, per coverage target, ranges dropping
/// (1 - coverage) of the histogram mass from the low tail, the high tail or
/// both halves. Ties keep the full range.
SaturationPolicy calibrate_saturation(std::span<const float> samples, std::span<const double> coverage_targets,
                                      int bits = 8, AffineMode mode = AffineMode::asymmetric);

/// Scalar k-means codebook with binary16 centroids.
struct Codebook {
  std::vector<Half> centroids;
  std::vector<std::uint32_t> assignments;
  std::size_t requested_k = 0;
  bool zero_pinned = false;
  std::vector<double> sse_history;  // SSE after each Lloyd update (f32 centroids)
  double final_sse = 0.0;           // after rounding centroids to binary16

  std::size_t k() const { return centroids.size(); }
  unsigned index_bits() const;  // ceil(log2 k), at least 1
  std::vector<float> decode() const;
};

struct CodebookOptions {
  std::size_t max_iters = 100;
  double tolerance = 1e-6;  // stop when the relative SSE change falls below
  bool pin_zero = false;    // centroid 0 is exactly 0 and owns exactly the zero weights
  std::size_t restarts = 10;  // independent seedings; the lowest final SSE wins
  std::uint64_t seed = 1;
};

/// k-means++ seeding then Lloyd iterations, best of `restarts`. k is reduced to the number of
/// distinct values when smaller.
Codebook build_codebook(std::span<const float> w, std::size_t k, const CodebookOptions& opts = {});

/// Stored size of a codebook layer: nnz indices of ceil(log2 k) bits plus k binary16 centroids.
std::uint64_t codebook_payload_bits(std::size_t nnz, std::size_t k);

/// Quantization scheme spelled fixed:N, affine:N, codebook:K or half.
struct QuantScheme {
  enum class Kind { fixed, affine, codebook, half } kind = Kind::fixed;
  int bits = 16;        // fixed / affine
  std::size_t k = 16;   // codebook

  std::string to_string() const;
  static QuantScheme parse(const std::string& text);
};

}  // namespace dsconv
