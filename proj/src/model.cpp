#include "dsconv/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <memory>

#include "dsconv/dense_conv.hpp"
#include "dsconv/sparse_engine.hpp"

namespace dsconv {

std::string_view to_string(Storage s) {
  switch (s) {
    case Storage::dense: return "dense";
    case Storage::csr: return "csr";
    case Storage::codebook: return "codebook";
  }
  return "?";
}

Storage parse_storage(std::string_view s) {
  if (s == "dense") return Storage::dense;
  if (s == "csr") return Storage::csr;
  if (s == "codebook") return Storage::codebook;
  throw FormatError("unknown storage '" + std::string(s) + "'");
}

std::string_view to_string(Algorithm a) {
  switch (a) {
    case Algorithm::sparse_direct: return "sparse-direct";
    case Algorithm::dense_direct: return "dense-direct";
    case Algorithm::dense_gemm: return "dense-gemm";
  }
  return "?";
}

Algorithm parse_algorithm(std::string_view s) {
  if (s == "sparse-direct" || s == "sparse") return Algorithm::sparse_direct;
  if (s == "dense-direct") return Algorithm::dense_direct;
  if (s == "dense-gemm" || s == "gemm") return Algorithm::dense_gemm;
  throw ArgumentError("unknown algorithm '" + std::string(s) + "'");
}

float ActivationQuant::apply(float v) const {
  if (scheme == "fixed") return static_cast<float>(quantize_fixed(std::clamp<double>(v, clip_lo, clip_hi), fixed));
  if (scheme == "affine") return static_cast<float>(fake_quant_affine(v, affine));
  if (scheme == "half") return round_to_half(v);
  return v;
}

double ModelConvLayer::sparsity() const {
  const auto w = weights.data();
  if (w.empty()) return 0.0;
  const auto zeros = std::count_if(w.begin(), w.end(), [](float v) { return v == 0.0f; });
  return static_cast<double>(zeros) / static_cast<double>(w.size());
}

void ModelConvLayer::check_consistency() const {
  if (weights.extents() != shape.weight_extents())
    throw InvariantError(name + ": weight extents do not match the layer shape");
  if (bias.size() != shape.out_channels) throw InvariantError(name + ": bias length != K");
  if (!mask.empty() && mask.size() != weights.size()) throw InvariantError(name + ": mask size mismatch");
  for (std::size_t i = 0; i < mask.size(); ++i)
    if (!mask[i] && weights.data()[i] != 0.0f)
      throw InvariantError(name + ": pruned position " + std::to_string(i) + " holds a non-zero weight");
  if (dtype == DType::f16)
    for (float v : weights.data())
      if (round_to_half(v) != v) throw InvariantError(name + ": f16 layer holds a value not representable in binary16");
  if (storage == Storage::dense) return;
  if (!csr) throw InvariantError(name + ": sparse storage without a CSR kernel");
  if (csr->shape().with_batch(1) != shape.with_batch(1)) throw InvariantError(name + ": CSR shape mismatch");
  const auto dense = decompress(*csr);
  if (std::memcmp(dense.data().data(), weights.data().data(), weights.size() * sizeof(float)) != 0)
    throw InvariantError(name + ": CSR kernel does not decompress to the layer weights");
  if (storage == Storage::codebook) {
    if (!codebook) throw InvariantError(name + ": codebook storage without a codebook");
    if (codebook->assignments.size() != csr->values().size())
      throw InvariantError(name + ": codebook assignment count != stored entries");
    const auto dec = codebook->decode();
    if (!std::equal(dec.begin(), dec.end(), csr->values().begin()))
      throw InvariantError(name + ": codebook does not decode to the CSR values");
  }
}

ModelConvLayer& Model::layer(const std::string& name) {
  for (auto& l : convs)
    if (l.name == name) return l;
  throw ArgumentError("no layer named '" + name + "'");
}

const ModelConvLayer& Model::layer(const std::string& name) const {
  return const_cast<Model*>(this)->layer(name);
}

void Model::validate() const {
  std::size_t c = in_channels, h = height, w = width;
  for (const auto& l : convs) {
    const auto& s = l.shape;
    if (s.in_channels != c || s.height != h || s.width != w)
      throw InvariantError(l.name + ": input geometry does not follow the previous layer");
    const auto [e, f] = output_shape(s);
    l.check_consistency();
    c = s.out_channels;
    h = e;
    w = f;
  }
  if (classes < 1 || dense_w.size() != classes * features() || dense_b.size() != classes)
    throw InvariantError("classifier size does not match features × classes");
}

namespace {

bool same_floats(std::span<const float> a, std::span<const float> b) {
  return a.size() == b.size() && std::memcmp(a.data(), b.data(), a.size() * sizeof(float)) == 0;
}

bool same_fixed(const FixedPointParams& a, const FixedPointParams& b) {
  return a.total_bits == b.total_bits && a.int_bits == b.int_bits && a.frac_bits == b.frac_bits && a.mu == b.mu &&
         a.sigma == b.sigma;
}

bool same_affine(const AffineIntParams& a, const AffineIntParams& b) {
  return a.bits == b.bits && a.mode == b.mode && a.mu == b.mu && a.lo == b.lo && a.hi == b.hi && a.step == b.step &&
         a.zero_point == b.zero_point && a.literal_ceil == b.literal_ceil;
}

bool same_quant(const WeightQuant& a, const WeightQuant& b) {
  return a.scheme == b.scheme && a.bits == b.bits && same_fixed(a.fixed, b.fixed) && same_affine(a.affine, b.affine) &&
         a.saturated == b.saturated && a.centroids == b.centroids;
}

bool same_act(const ActivationQuant& a, const ActivationQuant& b) {
  return a.scheme == b.scheme && a.bits == b.bits && a.clip_lo == b.clip_lo && a.clip_hi == b.clip_hi &&
         a.coverage == b.coverage && same_fixed(a.fixed, b.fixed) && same_affine(a.affine, b.affine);
}

}  // namespace

bool same_bits(const Model& a, const Model& b) {
  if (a.in_channels != b.in_channels || a.height != b.height || a.width != b.width || a.classes != b.classes ||
      a.convs.size() != b.convs.size() || !same_floats(a.dense_w, b.dense_w) || !same_floats(a.dense_b, b.dense_b) ||
      !same_quant(a.dense_quant, b.dense_quant) || a.provenance != b.provenance)
    return false;
  for (std::size_t i = 0; i < a.convs.size(); ++i) {
    const auto &x = a.convs[i], &y = b.convs[i];
    if (x.name != y.name || x.shape != y.shape || x.dtype != y.dtype || x.storage != y.storage || x.mask != y.mask ||
        !same_floats(x.weights.data(), y.weights.data()) || !same_floats(x.bias, y.bias) ||
        !same_quant(x.quant, y.quant) || !same_act(x.act, y.act) || x.csr.has_value() != y.csr.has_value() ||
        x.codebook.has_value() != y.codebook.has_value())
      return false;
    if (x.csr) {
      if (!same_floats(x.csr->values(), y.csr->values()) ||
          !std::ranges::equal(x.csr->colidx(), y.csr->colidx()) || !std::ranges::equal(x.csr->rowptr(), y.csr->rowptr()))
        return false;
    }
    if (x.codebook) {
      const auto &p = *x.codebook, &q = *y.codebook;
      if (p.centroids != q.centroids || p.assignments != q.assignments || p.requested_k != q.requested_k ||
          p.zero_pinned != q.zero_pinned)
        return false;
    }
  }
  return true;
}

Model model_from_toynet(const ToyNet& net, const Masks* masks) {
  Model m;
  const auto& spec = net.spec();
  m.in_channels = spec.in_channels;
  m.height = spec.height;
  m.width = spec.width;
  m.classes = spec.classes;
  for (std::size_t i = 0; i < net.conv_count(); ++i) {
    const auto& src = net.conv(i);
    ModelConvLayer l;
    l.name = "conv" + std::to_string(i);
    l.shape = src.shape.with_batch(1);
    l.weights = convert<float>(src.weights);
    for (auto& v : l.weights.data()) v = v == 0.0f ? 0.0f : v;
    l.bias.assign(src.bias.begin(), src.bias.end());
    if (masks) l.mask = masks->at(i);
    m.convs.push_back(std::move(l));
  }
  m.dense_w.assign(net.dense_weights().begin(), net.dense_weights().end());
  m.dense_b.assign(net.dense_bias().begin(), net.dense_bias().end());
  m.validate();
  return m;
}

void build_layer_csr(ModelConvLayer& layer) {
  for (auto& v : layer.weights.data()) v = v == 0.0f ? 0.0f : v;
  layer.csr = build_csr(layer.weights, layer.shape);
  layer.codebook.reset();
  layer.storage = Storage::csr;
}

const LayerPlan* NetworkConfig::find(const std::string& name) const {
  for (const auto& l : layers)
    if (l.layer == name) return &l;
  return nullptr;
}

nlohmann::json to_json(const NetworkConfig& c) {
  nlohmann::json layers = nlohmann::json::array();
  for (const auto& l : c.layers)
    layers.push_back({{"layer", l.layer},
                      {"algorithm", to_string(l.algorithm)},
                      {"dtype", to_string(l.dtype)},
                      {"sub_batch_size", l.sub_batch_size},
                      {"median_ms", l.median_ms},
                      {"crossover", l.crossover},
                      {"note", l.note}});
  return {{"batch", c.batch}, {"workers", c.workers}, {"layers", layers}};
}

NetworkConfig network_config_from_json(const nlohmann::json& j) {
  NetworkConfig c;
  try {
    c.batch = j.at("batch").get<std::size_t>();
    c.workers = j.value("workers", 0);
    for (const auto& l : j.at("layers")) {
      LayerPlan p;
      p.layer = l.at("layer").get<std::string>();
      p.algorithm = parse_algorithm(l.at("algorithm").get<std::string>());
      p.dtype = parse_dtype(l.at("dtype").get<std::string>());
      if (p.dtype == DType::f64) throw FormatError("network config: f64 is not an execution profile");
      p.sub_batch_size = l.value("sub_batch_size", std::size_t{4});
      EnginePlan{p.sub_batch_size, 0}.validate();
      p.median_ms = l.value("median_ms", 0.0);
      p.crossover = l.value("crossover", std::string{});
      p.note = l.value("note", std::string{});
      c.layers.push_back(std::move(p));
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("network config: ") + e.what());
  } catch (const ArgumentError& e) {
    throw FormatError(std::string("network config: ") + e.what());
  }
  return c;
}

NetworkConfig all_dense_config(const Model& m, Algorithm a) {
  NetworkConfig c;
  for (const auto& l : m.convs) {
    LayerPlan p;
    p.layer = l.name;
    p.algorithm = a;
    c.layers.push_back(p);
  }
  return c;
}

struct ModelRunner::Prepared {
  LayerPlan plan;
  ConvLayerDense<float> dense32;
  ConvLayerDense<Half> dense16;
  CsrKernel<float> csr32;
  CsrKernel<Half> csr16;
  bool one_d = false;
};

ModelRunner::ModelRunner(const Model& model, NetworkConfig config, int workers)
    : model_(model), config_(std::move(config)), workers_(workers) {
  model_.validate();
  for (const auto& l : model_.convs) {
    auto p = std::make_shared<Prepared>();
    if (const LayerPlan* lp = config_.find(l.name)) p->plan = *lp;
    else p->plan.layer = l.name;
    if (p->plan.dtype == DType::f64) throw ArgumentError(l.name + ": f64 is not an execution profile");
    const bool half = p->plan.dtype == DType::f16;
    p->one_d = l.shape.height == 1 && l.shape.kernel_h == 1 && l.shape.padding == 0;
    if (p->plan.algorithm == Algorithm::sparse_direct) {
      EnginePlan{p->plan.sub_batch_size, workers_}.validate();
      if (half) p->csr16 = build_csr(convert<Half>(l.weights), l.shape);
      else p->csr32 = l.csr ? *l.csr : build_csr(l.weights, l.shape);
    } else if (half) {
      p->dense16 = {l.shape, convert<Half>(l.weights), l.bias};
    } else {
      p->dense32 = {l.shape, l.weights, l.bias};
    }
    prepared_.push_back(std::move(p));
  }
}

namespace {

template <class T>
Tensor4D<T> run_conv(const Tensor4D<T>& x, const ConvLayerDense<T>& dense, const CsrKernel<T>& csr,
                     std::span<const float> bias, const LayerPlan& plan, bool one_d, int workers) {
  const std::size_t n = x.extents().n;
  if (plan.algorithm == Algorithm::sparse_direct) {
    const auto k = csr.with_batch(n);
    const EnginePlan ep{plan.sub_batch_size, workers};
    return one_d ? conv_sparse_1d<T>(x, k, bias, ep) : conv_sparse<T>(x, k, bias, ep);
  }
  ConvLayerDense<T> l = dense;
  l.shape.batch = n;
  return plan.algorithm == Algorithm::dense_gemm ? conv_dense_gemm(x, l, {workers}) : conv_dense_direct(x, l, {workers});
}

}  // namespace

std::vector<float> ModelRunner::logits(const Tensor4D<float>& x) const {
  const std::size_t N = x.extents().n;
  if (x.extents() != Extents{N, model_.in_channels, model_.height, model_.width})
    throw ShapeError("model input " + to_string(x.extents()) + " does not match the model");
  Tensor4D<float> a = x;
  for (std::size_t i = 0; i < model_.convs.size(); ++i) {
    const auto& l = model_.convs[i];
    const auto& p = *prepared_[i];
    if (l.act.enabled())
      for (auto& v : a.data()) v = l.act.apply(v);
    if (p.plan.dtype == DType::f16) {
      const auto y = run_conv<Half>(convert<Half>(a), p.dense16, p.csr16, l.bias, p.plan, p.one_d, workers_);
      a = convert<float>(y);
    } else {
      a = run_conv<float>(a, p.dense32, p.csr32, l.bias, p.plan, p.one_d, workers_);
    }
    for (auto& v : a.data()) v = v > 0.0f ? v : 0.0f;
  }
  const std::size_t F = model_.features(), M = model_.classes;
  const auto& e = a.extents();
  std::vector<float> out(N * M);
  std::vector<double> feat(F);
  for (std::size_t n = 0; n < N; ++n) {
    for (std::size_t c = 0; c < F; ++c) {
      double s = 0.0;
      for (float v : a.plane(n, c)) s += v;
      feat[c] = s / static_cast<double>(e.h * e.w);
    }
    for (std::size_t m = 0; m < M; ++m) {
      double s = model_.dense_b[m];
      for (std::size_t c = 0; c < F; ++c) s += static_cast<double>(model_.dense_w[m * F + c]) * feat[c];
      out[n * M + m] = static_cast<float>(s);
    }
  }
  return out;
}

std::vector<int> ModelRunner::predict(const Tensor4D<float>& x) const {
  const auto z = logits(x);
  const std::size_t M = model_.classes;
  std::vector<int> out(x.extents().n);
  for (std::size_t n = 0; n < out.size(); ++n) {
    const auto row = z.begin() + static_cast<std::ptrdiff_t>(n * M);
    out[n] = static_cast<int>(std::max_element(row, row + static_cast<std::ptrdiff_t>(M)) - row);
  }
  return out;
}

double ModelRunner::accuracy(const Dataset& data) const {
  if (data.size() == 0) throw ArgumentError("accuracy on an empty dataset");
  constexpr std::size_t chunk = 256;
  std::size_t correct = 0;
  for (std::size_t first = 0; first < data.size(); first += chunk) {
    const std::size_t cnt = std::min(chunk, data.size() - first);
    const auto pred = predict(convert<float>(data.images.slice_batch(first, cnt)));
    for (std::size_t i = 0; i < cnt; ++i) correct += pred[i] == data.labels[first + i];
  }
  return static_cast<double>(correct) / static_cast<double>(data.size());
}

namespace {

struct QuantOutcome {
  std::vector<float> values;
  WeightQuant meta;
  std::size_t codebook_k = 0;
  std::uint64_t payload_bits = 0;
};

float canonical(float v) { return v == 0.0f ? 0.0f : v; }

// Linear schemes and half; exact zeros are left untouched.
QuantOutcome quantize_linear(std::span<const float> w, const QuantScheme& s, bool literal_ceil) {
  QuantOutcome out;
  out.values.assign(w.begin(), w.end());
  std::vector<float> nz;
  for (float v : w)
    if (v != 0.0f) nz.push_back(v);
  out.meta.bits = s.bits;
  switch (s.kind) {
    case QuantScheme::Kind::fixed: {
      out.meta.scheme = "fixed";
      if (nz.empty()) break;
      out.meta.fixed = fit_fixed_point(nz, s.bits);
      for (auto& v : out.values) {
        bool sat = false;
        if (v != 0.0f) v = canonical(static_cast<float>(quantize_fixed(v, out.meta.fixed, &sat)));
        out.meta.saturated += sat;
      }
      break;
    }
    case QuantScheme::Kind::affine: {
      out.meta.scheme = "affine";
      if (nz.empty()) break;
      out.meta.affine = fit_affine(nz, s.bits, AffineMode::asymmetric, literal_ceil);
      for (auto& v : out.values)
        if (v != 0.0f) v = canonical(static_cast<float>(fake_quant_affine(v, out.meta.affine)));
      break;
    }
    case QuantScheme::Kind::half:
      out.meta.scheme = "half";
      for (auto& v : out.values) v = canonical(round_to_half(v));
      break;
    case QuantScheme::Kind::codebook:
      throw ArgumentError("quantize_linear: codebook scheme");
  }
  out.payload_bits = static_cast<std::uint64_t>(nz.size()) * static_cast<std::uint64_t>(s.bits);
  return out;
}

// Input of every conv layer over a calibration batch, flattened per layer.
std::vector<std::vector<float>> capture_conv_inputs(const Model& m, const Tensor4D<float>& x) {
  std::vector<std::vector<float>> caps;
  Tensor4D<float> a = x;
  for (const auto& l : m.convs) {
    caps.emplace_back(a.data().begin(), a.data().end());
    ConvLayerDense<float> d{l.shape.with_batch(a.extents().n), l.weights, l.bias};
    a = conv_dense_direct(a, d);
    for (auto& v : a.data()) v = v > 0.0f ? v : 0.0f;
  }
  return caps;
}

}  // namespace

std::vector<LayerQuantReport> apply_quantization(Model& model, const QuantizeOptions& opts) {
  using Kind = QuantScheme::Kind;
  if (!opts.weights && !opts.activations) throw ArgumentError("quantize: no target selected");
  if (opts.activations && opts.scheme.kind == Kind::codebook)
    throw ArgumentError("quantize: codebook quantization of activations is not supported");
  if (opts.activations && !opts.calibration) throw ArgumentError("quantize: activations need calibration data");
  model.validate();
  std::vector<LayerQuantReport> report;

  if (opts.weights) {
    for (auto& l : model.convs) {
      LayerQuantReport r;
      r.layer = l.name;
      r.scheme = opts.scheme.to_string();
      const Tensor4D<float> before = l.weights;
      if (opts.scheme.kind == Kind::codebook) {
        if (!l.csr) build_layer_csr(l);
        const auto vals = l.csr->values();
        // Only padded zeros stored in the CSR need the pinned centroid.
        const bool has_zero = std::any_of(vals.begin(), vals.end(), [](float v) { return v == 0.0f; });
        CodebookOptions co;
        co.pin_zero = has_zero;
        co.seed = opts.seed;
        if (vals.empty()) {
          l.codebook = Codebook{};
          l.codebook->requested_k = opts.scheme.k;
          l.codebook->centroids.push_back(Half(0.0f));
        } else {
          l.codebook = build_codebook(vals, std::max<std::size_t>(opts.scheme.k, has_zero ? 2 : 1), co);
        }
        auto decoded = l.codebook->decode();
        for (auto& v : decoded) v = canonical(v);
        l.csr->set_values(decoded);
        l.weights = decompress(*l.csr);
        l.storage = Storage::codebook;
        l.quant = {};
        l.quant.scheme = "codebook";
        l.quant.bits = static_cast<int>(l.codebook->index_bits());
        r.codebook_k = l.codebook->k();
        r.payload_bits = codebook_payload_bits(vals.size(), l.codebook->k());
      } else {
        auto q = quantize_linear(l.weights.data(), opts.scheme, opts.literal_ceil);
        std::copy(q.values.begin(), q.values.end(), l.weights.data().begin());
        l.quant = q.meta;
        r.saturated = q.meta.saturated;
        r.payload_bits = q.payload_bits;
        if (opts.scheme.kind == Kind::half) l.dtype = DType::f16;
        if (l.csr) {
          // Structure stays; stored values (including promoted zeros) are replaced in place.
          std::vector<float> vals(l.csr->values().size());
          for (std::size_t k = 0, t = 0; k < l.shape.out_channels; ++k) {
            const auto offs = l.csr->channel_offsets(k);
            for (auto off : offs) {
              const auto tap = l.csr->decode(off);
              vals[t++] = l.weights(k, tap.c, tap.r, tap.s);
            }
          }
          l.csr->set_values(std::move(vals));
          l.codebook.reset();
          l.storage = Storage::csr;
        }
      }
      for (std::size_t i = 0; i < before.size(); ++i)
        r.max_abs_error = std::max(r.max_abs_error,
                                   static_cast<double>(std::abs(before.data()[i] - l.weights.data()[i])));
      report.push_back(r);
    }
    if (opts.include_classifier) {
      LayerQuantReport r;
      r.layer = "classifier";
      r.scheme = opts.scheme.to_string();
      const auto before = model.dense_w;
      if (opts.scheme.kind == Kind::codebook) {
        CodebookOptions co;
        co.seed = opts.seed;
        const auto cb = build_codebook(model.dense_w, opts.scheme.k, co);
        model.dense_w = cb.decode();
        model.dense_quant = {};
        model.dense_quant.scheme = "codebook";
        model.dense_quant.bits = static_cast<int>(cb.index_bits());
        model.dense_quant.centroids = cb.centroids;
        r.codebook_k = cb.k();
        r.payload_bits = codebook_payload_bits(model.dense_w.size(), cb.k());
      } else {
        auto q = quantize_linear(model.dense_w, opts.scheme, opts.literal_ceil);
        model.dense_w = q.values;
        model.dense_quant = q.meta;
        r.saturated = q.meta.saturated;
        r.payload_bits = q.payload_bits;
      }
      for (std::size_t i = 0; i < before.size(); ++i)
        r.max_abs_error = std::max(r.max_abs_error, static_cast<double>(std::abs(before[i] - model.dense_w[i])));
      report.push_back(r);
    }
  }

  if (opts.activations) {
    const auto& cal = *opts.calibration;
    const std::size_t n = std::min(opts.calibration_samples, cal.size());
    if (n == 0) throw ArgumentError("quantize: empty calibration set");
    const auto caps = capture_conv_inputs(model, convert<float>(cal.images.slice_batch(0, n)));
    for (std::size_t i = 0; i < model.convs.size(); ++i) {
      auto& act = model.convs[i].act;
      act = {};
      act.bits = opts.scheme.kind == Kind::half ? 16 : opts.scheme.bits;
      if (opts.scheme.kind == Kind::half) {
        act.scheme = "half";
        const auto [mn, mx] = std::minmax_element(caps[i].begin(), caps[i].end());
        act.clip_lo = *mn;
        act.clip_hi = *mx;
      } else {
        const auto pol = calibrate_saturation(caps[i], opts.coverage, act.bits, AffineMode::asymmetric);
        act.clip_lo = pol.clip_lo;
        act.clip_hi = pol.clip_hi;
        act.coverage = pol.coverage;
        if (opts.scheme.kind == Kind::fixed) {
          act.scheme = "fixed";
          const std::array<float, 2> range{static_cast<float>(pol.clip_lo), static_cast<float>(pol.clip_hi)};
          act.fixed = fit_fixed_point(range, act.bits);
        } else {
          act.scheme = "affine";
          act.affine = affine_from_range(pol.clip_lo, pol.clip_hi, act.bits, AffineMode::asymmetric, opts.literal_ceil);
        }
      }
      LayerQuantReport r;
      r.layer = model.convs[i].name + ".input";
      r.scheme = opts.scheme.to_string();
      r.clip_lo = act.clip_lo;
      r.clip_hi = act.clip_hi;
      report.push_back(r);
    }
  }
  model.validate();
  return report;
}

}  // namespace dsconv
