#pragma once

#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "dsconv/csr_kernel.hpp"
#include "dsconv/dataset.hpp"
#include "dsconv/quantizer.hpp"
#include "dsconv/tensor.hpp"
#include "dsconv/toynet.hpp"

namespace dsconv {

enum class Storage { dense, csr, codebook };
std::string_view to_string(Storage s);
Storage parse_storage(std::string_view s);

/// What was done to a layer's weights.
struct WeightQuant {
  std::string scheme = "none";  // none | fixed | affine | codebook | half
  int bits = 0;
  FixedPointParams fixed;
  AffineIntParams affine;
  std::size_t saturated = 0;
  std::vector<Half> centroids;  // codebook on the classifier (conv layers keep theirs in Codebook)
};

/// Simulated activation quantization applied to a conv layer's input.
struct ActivationQuant {
  std::string scheme = "none";  // none | fixed | affine | half
  int bits = 0;
  double clip_lo = 0.0, clip_hi = 0.0;
  double coverage = 1.0;
  FixedPointParams fixed;
  AffineIntParams affine;

  bool enabled() const { return scheme != "none"; }
  float apply(float v) const;
};

struct ModelConvLayer {
  std::string name;
  ConvShape shape;                 // batch 1
  Tensor4D<float> weights;         // decoded dense view, always populated
  std::vector<float> bias;
  DType dtype = DType::f32;        // f16 when weights were rounded to binary16
  Storage storage = Storage::dense;
  std::optional<CsrKernel<float>> csr;  // present for csr and codebook storage
  std::optional<Codebook> codebook;     // assignments index csr values
  std::vector<std::uint8_t> mask;       // pruning keep-flags (empty: none recorded)
  WeightQuant quant;
  ActivationQuant act;

  double sparsity() const;
  /// Checks the storage views agree with `weights`; throws InvariantError.
  void check_consistency() const;
};

struct Model {
  std::size_t in_channels = 1, height = 1, width = 1;
  std::size_t classes = 2;
  std::vector<ModelConvLayer> convs;
  std::vector<float> dense_w;  // classes × features
  std::vector<float> dense_b;
  WeightQuant dense_quant;
  nlohmann::json provenance = nlohmann::json::object();

  std::size_t features() const { return convs.empty() ? in_channels : convs.back().shape.out_channels; }
  ModelConvLayer& layer(const std::string& name);
  const ModelConvLayer& layer(const std::string& name) const;
  void validate() const;
};

bool same_bits(const Model& a, const Model& b);

Model model_from_toynet(const ToyNet& net, const Masks* masks = nullptr);

/// Switch a layer to CSR storage (canonicalizes -0 to +0 first).
void build_layer_csr(ModelConvLayer& layer);

enum class Algorithm { sparse_direct, dense_direct, dense_gemm };
std::string_view to_string(Algorithm a);
Algorithm parse_algorithm(std::string_view s);

struct LayerPlan {
  std::string layer;
  Algorithm algorithm = Algorithm::dense_direct;
  DType dtype = DType::f32;
  std::size_t sub_batch_size = 4;
  double median_ms = 0.0;  // of the chosen candidate (0 when not measured)
  std::string crossover;   // estimated crossover sparsity for this shape, or "never" / "" (not measured)
  std::string note;

  friend bool operator==(const LayerPlan&, const LayerPlan&) = default;
};

struct NetworkConfig {
  std::size_t batch = 0;
  int workers = 0;
  std::vector<LayerPlan> layers;

  const LayerPlan* find(const std::string& name) const;
  friend bool operator==(const NetworkConfig&, const NetworkConfig&) = default;
};

nlohmann::json to_json(const NetworkConfig& c);
NetworkConfig network_config_from_json(const nlohmann::json& j);
NetworkConfig all_dense_config(const Model& m, Algorithm a = Algorithm::dense_direct);

/// Executes a model under a per-layer plan. Prepared kernels are cached.
class ModelRunner {
 public:
  ModelRunner(const Model& model, NetworkConfig config, int workers = 0);

  /// N×classes logits.
  std::vector<float> logits(const Tensor4D<float>& x) const;
  std::vector<int> predict(const Tensor4D<float>& x) const;
  double accuracy(const Dataset& data) const;

 private:
  struct Prepared;
  const Model& model_;
  NetworkConfig config_;
  int workers_;
  std::vector<std::shared_ptr<const Prepared>> prepared_;
};

struct QuantizeOptions {
  QuantScheme scheme;
  bool weights = true;
  bool activations = false;
  bool include_classifier = true;
  std::vector<double> coverage{0.999, 0.9999};
  const Dataset* calibration = nullptr;
  std::size_t calibration_samples = 256;
  bool literal_ceil = false;
  std::uint64_t seed = 1;
};

struct LayerQuantReport {
  std::string layer;
  std::string scheme;
  std::size_t saturated = 0;
  std::size_t codebook_k = 0;
  std::uint64_t payload_bits = 0;
  double max_abs_error = 0.0;
  double clip_lo = 0.0, clip_hi = 0.0;  // activation entries
};

/// Quantizes weights (values in place; zeros stay zero) and/or inserts
/// calibrated activation quantizers.
std::vector<LayerQuantReport> apply_quantization(Model& model, const QuantizeOptions& opts);

}  // namespace dsconv
