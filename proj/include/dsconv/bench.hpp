#pragma once

#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "dsconv/model.hpp"
#include "dsconv/sparse_engine.hpp"

namespace dsconv {

enum class LayerSource { preset, model };

struct LayerSpec {
  std::string name;
  ConvShape shape;  // batch is set by the harness
  double sparsity = 0.0;
  DType dtype = DType::f32;
  LayerSource source = LayerSource::preset;

  void validate() const;
};

/// Layer lists of the published benchmark tables: vgg16, resnet-1x1,
/// densenet-1x1, cnn-non-static. Throws ArgumentError for other names.
std::vector<LayerSpec> preset_layers(std::string_view preset);
std::vector<std::string> preset_names();

struct BenchRecord {
  std::string layer;
  double sparsity = 0.0;
  Algorithm algorithm = Algorithm::dense_direct;
  DType dtype = DType::f32;
  std::size_t sub_batch_size = 0;  // sparse-direct only
  double median_ms = 0.0;
  double iqr_ms = 0.0;
  double mean_ms = 0.0;
  std::size_t repetitions = 0;
  std::uint64_t macs = 0;
  double max_rel_error = 0.0;  // against the f32 dense-direct reference
  std::string status = "ok";   // ok | skipped | rejected
  std::string note;

  bool ok() const { return status == "ok"; }
};

struct BenchOptions {
  std::size_t batch = 128;
  std::vector<DType> dtypes{DType::f32, DType::f16};
  std::vector<Algorithm> algorithms{Algorithm::sparse_direct, Algorithm::dense_direct, Algorithm::dense_gemm};
  std::vector<std::size_t> sub_batch_candidates{1, 2, 4, 8, 16};
  std::size_t warmups = 2;
  std::size_t repetitions = 5;
  int workers = 0;
  std::uint64_t seed = 1;
  std::uint64_t memory_budget_bytes = std::uint64_t{1} << 30;
  double tolerance_f32 = 1e-4;
  double tolerance_f16 = 1e-2;
  /// Test hook: applied to the sparse kernel before the cross-check.
  std::function<void(CsrKernel<float>&)> sparse_kernel_hook;

  void validate() const;
};

/// Seeded K×C×R×S weights where every output channel holds exactly
/// round((1 - sparsity)·C·R·S) non-zeros at random positions.
Tensor4D<float> synthetic_weights(const ConvShape& shape, double sparsity, std::uint64_t seed);

/// Bytes the harness holds at once for one layer (inputs, staged copy,
/// reference and candidate outputs, im2col buffer).
std::uint64_t bench_memory_estimate(const ConvShape& shape, std::size_t batch);

/// Times every (algorithm, dtype) candidate. Every candidate's output is
/// checked against conv_dense_direct first; a mismatch yields a
/// "rejected" record and no timing. Layers over the memory budget yield a
/// single "skipped" record.
std::vector<BenchRecord> bench_layer(const LayerSpec& spec, const BenchOptions& opts);
std::vector<BenchRecord> bench_layer(const LayerSpec& spec, const Tensor4D<float>& weights,
                                     std::span<const float> bias, const BenchOptions& opts);

/// Throws IntegrityError when rel. error of `candidate` against `reference` exceeds `tol`.
double verify_output(const Tensor4D<float>& candidate, const Tensor4D<float>& reference, double tol,
                     const std::string& what);

struct SweepPoint {
  double sparsity = 0.0;
  double sparse_ms = 0.0;
  double sparse_iqr_ms = 0.0;
  std::size_t sub_batch_size = 0;
  std::uint64_t sparse_macs = 0;
  std::uint64_t dense_macs = 0;
};

struct SweepResult {
  std::string layer;
  std::vector<SweepPoint> points;
  double dense_ms = 0.0;  // best dense baseline (same MACs at every sparsity)
  Algorithm dense_algorithm = Algorithm::dense_gemm;
  std::optional<double> crossover;  // nullopt: sparse never reaches the dense time
  double spearman_rho = 0.0;        // sparse time vs sparsity

  std::string crossover_text() const;
};

/// f32 sweep of sparse-direct over `sparsities` (>= 3 points) against the
/// best dense baseline; the crossover is linearly interpolated.
SweepResult sparsity_sweep(const LayerSpec& spec, std::span<const double> sparsities, const BenchOptions& opts);

struct ConfigureOptions {
  BenchOptions bench;
  /// Sparsity points for a per-layer crossover estimate; empty skips it.
  std::vector<double> crossover_sweep;
  double verify_tolerance = 1e-3;
  std::size_t verify_samples = 8;
};

/// Benchmarks every conv layer at its real sparsity and picks the fastest
/// algorithm (ties go to dense). The configured network is then checked
/// against all-dense inference; a mismatch throws IntegrityError.
NetworkConfig configure_network(const Model& model, const ConfigureOptions& opts,
                                std::vector<BenchRecord>* records = nullptr);

enum class ReportFormat { csv, json, markdown };
ReportFormat parse_report_format(std::string_view s);
/// Format from the file extension (.csv, .json, .md).
ReportFormat report_format_for(const std::filesystem::path& p);

/// Columns: layer, sparsity, subBatchSize, sparse-f32, dense-f32, sparse-f16,
/// dense-f16. Dense cells hold the faster of dense-direct and dense-gemm.
std::string render_report(const std::vector<BenchRecord>& records, ReportFormat format);
void emit_report(const std::vector<BenchRecord>& records, ReportFormat format, const std::filesystem::path& file);

nlohmann::json to_json(const BenchRecord& r);

}  // namespace dsconv
