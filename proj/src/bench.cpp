#include "dsconv/bench.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <numeric>
#include <random>
#include <sstream>

#include "dsconv/dense_conv.hpp"

namespace dsconv {

void LayerSpec::validate() const {
  if (!(sparsity >= 0.0 && sparsity <= 1.0)) throw ArgumentError(name + ": sparsity must lie in [0, 1]");
  if (dtype == DType::f64) throw ArgumentError(name + ": f64 is not a benchmark profile");
  output_shape(shape);
}

void BenchOptions::validate() const {
  if (batch == 0) throw ArgumentError("bench: batch must be positive");
  if (repetitions < 5) throw ArgumentError("bench: at least 5 timed repetitions are required");
  if (warmups < 2) throw ArgumentError("bench: at least two warm-up runs are required");
  if (dtypes.empty() || algorithms.empty()) throw ArgumentError("bench: empty dtype or algorithm list");
  for (auto d : dtypes)
    if (d == DType::f64) throw ArgumentError("bench: f64 is not a benchmark profile");
  if (sub_batch_candidates.empty()) throw ArgumentError("bench: empty sub-batch candidate list");
  for (auto sb : sub_batch_candidates) EnginePlan{sb, workers}.validate();
}

namespace {

LayerSpec conv3x3(std::string name, std::size_t c, std::size_t hw, std::size_t k, double sparsity) {
  LayerSpec s;
  s.name = std::move(name);
  s.shape = {1, c, hw, hw, k, 3, 3, 1, 1};
  s.sparsity = sparsity;
  return s;
}

LayerSpec conv1x1(std::string name, std::size_t c, std::size_t hw, std::size_t k, double sparsity) {
  LayerSpec s;
  s.name = std::move(name);
  s.shape = {1, c, hw, hw, k, 1, 1, 1, 0};
  s.sparsity = sparsity;
  return s;
}

LayerSpec conv1d(std::string name, std::size_t c, std::size_t len, std::size_t k, std::size_t width, double sparsity) {
  LayerSpec s;
  s.name = std::move(name);
  s.shape = {1, c, 1, len, k, 1, width, 1, 0};
  s.sparsity = sparsity;
  return s;
}

std::string percent(double s) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.1f", s * 100.0);
  std::string t = buf;
  if (t.size() > 2 && t.substr(t.size() - 2) == ".0") t.resize(t.size() - 2);
  return t;
}

}  // namespace

std::vector<std::string> preset_names() { return {"vgg16", "resnet-1x1", "densenet-1x1", "cnn-non-static"}; }

std::vector<LayerSpec> preset_layers(std::string_view preset) {
  if (preset == "vgg16") {
    return {conv3x3("vgg16/conv1_1", 3, 224, 64, 0.9),    conv3x3("vgg16/conv1_2", 64, 224, 64, 0.9),
            conv3x3("vgg16/conv2_1", 64, 112, 128, 0.9),  conv3x3("vgg16/conv2_2", 128, 112, 128, 0.9),
            conv3x3("vgg16/conv3_1", 128, 56, 256, 0.9),  conv3x3("vgg16/conv3_2", 256, 56, 256, 0.9),
            conv3x3("vgg16/conv4_1", 256, 28, 512, 0.9),  conv3x3("vgg16/conv4_2", 512, 28, 512, 0.9),
            conv3x3("vgg16/conv5_1", 512, 14, 512, 0.9)};
  }
  if (preset == "resnet-1x1")
    return {conv1x1("resnet50/1x1-64to256", 64, 56, 256, 0.9), conv1x1("resnet50/1x1-256to64", 256, 56, 64, 0.9)};
  if (preset == "densenet-1x1") {
    // Bottleneck 1x1 inputs follow from the growth rates (32 for -121, 48 for -161).
    return {conv1x1("densenet121/block3/layer24@87.5", 992, 14, 128, 0.875),
            conv1x1("densenet121/block3/layer24@91", 992, 14, 128, 0.91),
            conv1x1("densenet161/block4/layer16", 1776, 7, 192, 0.91),
            conv1x1("densenet161/block3/layer16", 1104, 14, 192, 0.93)};
  }
  if (preset == "cnn-non-static") {
    std::vector<LayerSpec> out;
    for (std::size_t width : {2, 3})
      for (double s : {0.77, 0.83, 0.875})
        out.push_back(conv1d("cnn-non-static/k" + std::to_string(width) + "@" + percent(s), 300, 64, 100, width, s));
    return out;
  }
  throw ArgumentError("unknown preset '" + std::string(preset) + "' (vgg16, resnet-1x1, densenet-1x1, cnn-non-static)");
}

Tensor4D<float> synthetic_weights(const ConvShape& shape, double sparsity, std::uint64_t seed) {
  if (!(sparsity >= 0.0 && sparsity <= 1.0)) throw ArgumentError("synthetic_weights: sparsity must lie in [0, 1]");
  Tensor4D<float> w(shape.weight_extents());
  const std::size_t vol = shape.kernel_volume();
  const auto nnz = vol - static_cast<std::size_t>(std::llround(sparsity * static_cast<double>(vol)));
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> mag(0.05f, 1.0f);
  std::vector<std::size_t> idx(vol);
  for (std::size_t k = 0; k < shape.out_channels; ++k) {
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    for (std::size_t i = 0; i < nnz; ++i) {
      std::uniform_int_distribution<std::size_t> pick(i, vol - 1);
      std::swap(idx[i], idx[pick(rng)]);
      const float v = mag(rng);
      w.data()[k * vol + idx[i]] = (rng() & 1u) ? v : -v;
    }
  }
  return w;
}

std::uint64_t bench_memory_estimate(const ConvShape& shape, std::size_t batch) {
  const auto [e, f] = output_shape(shape);
  const std::uint64_t in = batch * shape.in_channels * shape.height * shape.width;
  const std::uint64_t staged = batch * shape.in_channels * shape.padded_h() * shape.padded_w();
  const std::uint64_t out = batch * shape.out_channels * e * f;
  const std::uint64_t col = shape.kernel_volume() * e * f;
  const std::uint64_t weights = shape.out_channels * shape.kernel_volume();
  // f32 input plus its f16 copy, staging, reference and one candidate output.
  return 4 * (in + staged + 2 * out + col + 3 * weights) + 2 * (in + out);
}

double verify_output(const Tensor4D<float>& candidate, const Tensor4D<float>& reference, double tol,
                     const std::string& what) {
  if (candidate.extents() != reference.extents()) throw IntegrityError(what + ": output extents differ");
  const double err = relative_error(candidate, reference);
  if (!(err <= tol)) {
    char buf[160];
    std::snprintf(buf, sizeof buf, ": integrity check failed, relative error %.3g > %.3g", err, tol);
    throw IntegrityError(what + buf);
  }
  return err;
}

namespace {

Tensor4D<float> synthetic_input(const ConvShape& s, std::uint64_t seed) {
  Tensor4D<float> x(s.input_extents());
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> u(-1.0f, 1.0f);
  for (auto& v : x.data()) v = u(rng);
  return x;
}

std::uint64_t name_seed(const std::string& name, std::uint64_t seed) {
  std::uint64_t h = 1469598103934665603ull ^ seed;
  for (unsigned char c : name) h = (h ^ c) * 1099511628211ull;
  return h;
}

bool is_one_d(const ConvShape& s) { return s.height == 1 && s.kernel_h == 1 && s.padding == 0; }

template <class T>
struct Candidate {
  Tensor4D<T> x;
  ConvLayerDense<T> dense;
  CsrKernel<T> csr;
};

template <class T>
Tensor4D<T> run(const Candidate<T>& c, std::span<const float> bias, Algorithm a, std::size_t sb, int workers) {
  switch (a) {
    case Algorithm::sparse_direct: {
      const EnginePlan plan{sb, workers};
      return is_one_d(c.csr.shape()) ? conv_sparse_1d<T>(c.x, c.csr, bias, plan) : conv_sparse<T>(c.x, c.csr, bias, plan);
    }
    case Algorithm::dense_direct: return conv_dense_direct(c.x, c.dense, {workers});
    case Algorithm::dense_gemm: return conv_dense_gemm(c.x, c.dense, {workers});
  }
  return {};
}

template <class T>
void bench_profile(const Candidate<T>& c, std::span<const float> bias, const Tensor4D<float>& ref,
                   const BenchOptions& opts, BenchRecord proto, std::vector<BenchRecord>& out) {
  const double tol = std::is_same_v<T, Half> ? opts.tolerance_f16 : opts.tolerance_f32;
  const auto& shape = c.dense.shape;
  for (auto alg : opts.algorithms) {
    BenchRecord r = proto;
    r.algorithm = alg;
    r.macs = alg == Algorithm::sparse_direct ? sparse_macs(c.csr) : dense_macs(shape);
    const std::string what = r.layer + " " + std::string(to_string(alg)) + "/" + std::string(to_string(r.dtype));
    try {
      const std::size_t sb0 = opts.sub_batch_candidates.front();
      const auto y = run(c, bias, alg, sb0, opts.workers);
      r.max_rel_error = verify_output(convert<float>(y), ref, tol, what);
    } catch (const IntegrityError& e) {
      r.status = "rejected";
      r.note = e.what();
      out.push_back(r);
      continue;
    }
    TimingSummary t;
    if (alg == Algorithm::sparse_direct) {
      TuneOptions to{opts.warmups, opts.repetitions, opts.workers};
      const auto tuned = tune_sub_batch<T>(c.csr, c.x, bias, opts.sub_batch_candidates, to);
      r.sub_batch_size = tuned.best;
      t = tuned.timings.at(tuned.best);
    } else {
      t = time_callable([&] { (void)run(c, bias, alg, 0, opts.workers); }, opts.warmups, opts.repetitions);
    }
    r.median_ms = t.median_ms;
    r.iqr_ms = t.iqr_ms;
    r.mean_ms = t.mean_ms;
    r.repetitions = t.repetitions;
    out.push_back(r);
  }
}

}  // namespace

std::vector<BenchRecord> bench_layer(const LayerSpec& spec, const Tensor4D<float>& weights, std::span<const float> bias,
                                     const BenchOptions& opts) {
  spec.validate();
  opts.validate();
  const ConvShape s = spec.shape.with_batch(opts.batch);
  if (weights.extents() != s.weight_extents()) throw ShapeError(spec.name + ": weights do not match the layer shape");
  if (!bias.empty() && bias.size() != s.out_channels) throw ShapeError(spec.name + ": bias length != K");

  BenchRecord proto;
  proto.layer = spec.name;
  proto.sparsity = analyze_sparsity(weights).layer_sparsity;

  const auto need = bench_memory_estimate(s, opts.batch);
  if (need > opts.memory_budget_bytes) {
    BenchRecord r = proto;
    r.status = "skipped";
    r.note = "needs ~" + std::to_string(need >> 20) + " MiB, over the " + std::to_string(opts.memory_budget_bytes >> 20) +
             " MiB memory budget";
    return {r};
  }

  const auto x = synthetic_input(s, name_seed(spec.name, opts.seed));
  const std::vector<float> b(bias.begin(), bias.end());
  const Tensor4D<float> ref = conv_dense_direct(x, ConvLayerDense<float>{s, weights, b}, {opts.workers});

  auto csr = build_csr(weights, s);
  if (opts.sparse_kernel_hook) opts.sparse_kernel_hook(csr);

  std::vector<BenchRecord> out;
  for (auto dt : opts.dtypes) {
    BenchRecord p = proto;
    p.dtype = dt;
    if (dt == DType::f32) {
      const Candidate<float> c{x, {s, weights, b}, csr};
      bench_profile<float>(c, b, ref, opts, p, out);
    } else {
      std::vector<Half> hv(csr.values().size());
      narrow(csr.values(), hv);
      const CsrKernel<Half> h(s, std::move(hv), std::vector<std::uint32_t>(csr.colidx().begin(), csr.colidx().end()),
                              std::vector<std::uint32_t>(csr.rowptr().begin(), csr.rowptr().end()));
      const Candidate<Half> c{convert<Half>(x), {s, convert<Half>(weights), b}, h};
      bench_profile<Half>(c, b, ref, opts, p, out);
    }
  }
  return out;
}

std::vector<BenchRecord> bench_layer(const LayerSpec& spec, const BenchOptions& opts) {
  spec.validate();
  const auto w = synthetic_weights(spec.shape, spec.sparsity, name_seed(spec.name, opts.seed + 1));
  std::vector<float> bias(spec.shape.out_channels);
  std::mt19937_64 rng(name_seed(spec.name, opts.seed + 2));
  std::uniform_real_distribution<float> u(-0.1f, 0.1f);
  for (auto& v : bias) v = u(rng);
  return bench_layer(spec, w, bias, opts);
}

std::string SweepResult::crossover_text() const {
  if (!crossover) return "never";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4f", *crossover);
  return buf;
}

SweepResult sparsity_sweep(const LayerSpec& spec, std::span<const double> sparsities, const BenchOptions& opts) {
  if (sparsities.size() < 3) throw ArgumentError("sparsity_sweep: needs at least 3 sparsity points");
  if (!std::is_sorted(sparsities.begin(), sparsities.end()))
    throw ArgumentError("sparsity_sweep: sparsities must be ascending");
  SweepResult res;
  res.layer = spec.name;

  BenchOptions dense_opts = opts;
  dense_opts.dtypes = {DType::f32};
  dense_opts.algorithms.clear();
  for (auto a : opts.algorithms)
    if (a != Algorithm::sparse_direct) dense_opts.algorithms.push_back(a);
  if (dense_opts.algorithms.empty()) dense_opts.algorithms = {Algorithm::dense_gemm};
  BenchOptions sparse_opts = opts;
  sparse_opts.dtypes = {DType::f32};
  sparse_opts.algorithms = {Algorithm::sparse_direct};

  // Dense cost does not depend on the zeros: measured once.
  {
    LayerSpec s0 = spec;
    s0.sparsity = sparsities.front();
    bool found = false;
    for (const auto& r : bench_layer(s0, dense_opts)) {
      if (!r.ok()) throw InvariantError("sparsity_sweep: dense baseline failed: " + r.note);
      if (!found || r.median_ms < res.dense_ms) {
        res.dense_ms = r.median_ms;
        res.dense_algorithm = r.algorithm;
        found = true;
      }
    }
  }
  const ConvShape full = spec.shape.with_batch(opts.batch);
  for (double sp : sparsities) {
    LayerSpec si = spec;
    si.sparsity = sp;
    const auto recs = bench_layer(si, sparse_opts);
    const auto& r = recs.front();
    if (!r.ok()) throw InvariantError("sparsity_sweep: " + r.note);
    res.points.push_back({sp, r.median_ms, r.iqr_ms, r.sub_batch_size, r.macs, dense_macs(full)});
  }
  std::vector<double> xs, ys;
  for (const auto& p : res.points) {
    xs.push_back(p.sparsity);
    ys.push_back(p.sparse_ms);
  }
  res.spearman_rho = spearman(xs, ys);
  for (std::size_t i = 0; i < res.points.size(); ++i) {
    if (res.points[i].sparse_ms > res.dense_ms) continue;
    if (i == 0) {
      res.crossover = res.points[0].sparsity;
    } else {
      const auto &a = res.points[i - 1], &b = res.points[i];
      const double t = (a.sparse_ms - res.dense_ms) / (a.sparse_ms - b.sparse_ms);
      res.crossover = a.sparsity + t * (b.sparsity - a.sparsity);
    }
    break;
  }
  return res;
}

NetworkConfig configure_network(const Model& model, const ConfigureOptions& opts, std::vector<BenchRecord>* records) {
  model.validate();
  NetworkConfig cfg;
  cfg.batch = opts.bench.batch;
  cfg.workers = opts.bench.workers;
  for (const auto& l : model.convs) {
    LayerSpec spec;
    spec.name = l.name;
    spec.shape = l.shape;
    spec.sparsity = l.sparsity();
    spec.dtype = l.dtype;
    spec.source = LayerSource::model;

    LayerPlan plan;
    plan.layer = l.name;
    std::vector<BenchRecord> recs;
    try {
      recs = bench_layer(spec, l.weights, l.bias, opts.bench);
    } catch (const Error& e) {
      plan.note = std::string("unmeasured, defaulting to dense-direct: ") + e.what();
    }
    const BenchRecord* best_dense = nullptr;
    const BenchRecord* best_sparse = nullptr;
    for (const auto& r : recs) {
      if (!r.ok()) continue;
      auto*& slot = r.algorithm == Algorithm::sparse_direct ? best_sparse : best_dense;
      if (!slot || r.median_ms < slot->median_ms) slot = &r;
    }
    const BenchRecord* pick = best_dense;
    if (best_sparse && (!best_dense || best_sparse->median_ms < best_dense->median_ms)) pick = best_sparse;
    if (pick) {
      plan.algorithm = pick->algorithm;
      plan.dtype = pick->dtype;
      plan.median_ms = pick->median_ms;
      if (pick->algorithm == Algorithm::sparse_direct) plan.sub_batch_size = pick->sub_batch_size;
    } else if (plan.note.empty()) {
      plan.note = "unmeasured, defaulting to dense-direct";
      for (const auto& r : recs)
        if (!r.note.empty()) plan.note += ": " + r.note;
    }
    if (!opts.crossover_sweep.empty()) {
      try {
        plan.crossover = sparsity_sweep(spec, opts.crossover_sweep, opts.bench).crossover_text();
      } catch (const Error& e) {
        plan.note += std::string(plan.note.empty() ? "" : "; ") + "crossover not measured: " + e.what();
      }
    }
    if (records) records->insert(records->end(), recs.begin(), recs.end());
    cfg.layers.push_back(std::move(plan));
  }

  // The configured network must agree with plain dense inference.
  Tensor4D<float> x(Extents{opts.verify_samples, model.in_channels, model.height, model.width});
  std::mt19937_64 rng(opts.bench.seed);
  std::normal_distribution<float> g(0.0f, 1.0f);
  for (auto& v : x.data()) v = g(rng);
  const auto ref = ModelRunner(model, all_dense_config(model), opts.bench.workers).logits(x);
  const auto got = ModelRunner(model, cfg, opts.bench.workers).logits(x);
  const double err = relative_error(got, ref);
  if (!(err <= opts.verify_tolerance))
    throw IntegrityError("configure: configured network differs from dense inference (relative error " +
                         std::to_string(err) + ")");
  return cfg;
}

ReportFormat parse_report_format(std::string_view s) {
  if (s == "csv") return ReportFormat::csv;
  if (s == "json") return ReportFormat::json;
  if (s == "markdown" || s == "md") return ReportFormat::markdown;
  throw ArgumentError("unknown report format '" + std::string(s) + "'");
}

ReportFormat report_format_for(const std::filesystem::path& p) {
  const auto ext = p.extension().string();
  if (ext == ".csv") return ReportFormat::csv;
  if (ext == ".json") return ReportFormat::json;
  if (ext == ".md" || ext == ".markdown") return ReportFormat::markdown;
  throw ArgumentError("cannot infer report format from '" + p.string() + "' (use .csv, .json or .md)");
}

namespace {

const std::vector<std::string> kColumns{"layer",     "sparsity",   "subBatchSize", "sparse-f32",
                                        "dense-f32", "sparse-f16", "dense-f16"};

struct Row {
  std::string layer;
  double sparsity = 0.0;
  std::optional<std::size_t> sub_batch;
  std::optional<double> cell[4];  // sparse-f32, dense-f32, sparse-f16, dense-f16
};

std::vector<Row> tabulate(const std::vector<BenchRecord>& records) {
  std::vector<Row> rows;
  std::map<std::pair<std::string, double>, std::size_t> where;
  for (const auto& r : records) {
    const auto key = std::make_pair(r.layer, r.sparsity);
    auto it = where.find(key);
    if (it == where.end()) {
      it = where.emplace(key, rows.size()).first;
      rows.push_back({r.layer, r.sparsity, {}, {}});
    }
    if (!r.ok()) continue;
    Row& row = rows[it->second];
    const bool sparse = r.algorithm == Algorithm::sparse_direct;
    const int col = (r.dtype == DType::f16 ? 2 : 0) + (sparse ? 0 : 1);
    auto& cell = row.cell[col];
    if (!cell || r.median_ms < *cell) cell = r.median_ms;
    if (sparse && (r.dtype == DType::f32 || !row.sub_batch)) row.sub_batch = r.sub_batch_size;
  }
  return rows;
}

std::string fmt(double v, const char* spec) {
  char buf[64];
  std::snprintf(buf, sizeof buf, spec, v);
  return buf;
}

std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

}  // namespace

std::string render_report(const std::vector<BenchRecord>& records, ReportFormat format) {
  const auto rows = tabulate(records);
  auto text_cells = [](const Row& r) {
    std::vector<std::optional<std::string>> c;
    c.emplace_back(r.layer);
    c.emplace_back(fmt(r.sparsity, "%.4f"));
    c.push_back(r.sub_batch ? std::optional<std::string>(std::to_string(*r.sub_batch)) : std::nullopt);
    for (const auto& v : r.cell) c.push_back(v ? std::optional<std::string>(fmt(*v, "%.4f")) : std::nullopt);
    return c;
  };
  std::ostringstream out;
  switch (format) {
    case ReportFormat::csv: {
      for (std::size_t i = 0; i < kColumns.size(); ++i) out << (i ? "," : "") << kColumns[i];
      out << "\n";
      for (const auto& r : rows) {
        const auto c = text_cells(r);
        for (std::size_t i = 0; i < c.size(); ++i) out << (i ? "," : "") << (c[i] ? csv_field(*c[i]) : "");
        out << "\n";
      }
      break;
    }
    case ReportFormat::json: {
      nlohmann::ordered_json arr = nlohmann::ordered_json::array();
      for (const auto& r : rows) {
        const auto c = text_cells(r);
        nlohmann::ordered_json o = nlohmann::ordered_json::object();
        o["layer"] = r.layer;
        o["sparsity"] = std::stod(*c[1]);
        o["subBatchSize"] = r.sub_batch ? nlohmann::ordered_json(*r.sub_batch) : nlohmann::ordered_json(nullptr);
        for (std::size_t i = 3; i < c.size(); ++i)
          o[kColumns[i]] = c[i] ? nlohmann::ordered_json(std::stod(*c[i])) : nlohmann::ordered_json(nullptr);
        arr.push_back(std::move(o));
      }
      out << arr.dump(2) << "\n";
      break;
    }
    case ReportFormat::markdown: {
      out << "|";
      for (const auto& h : kColumns) out << " " << h << " |";
      out << "\n|";
      for (std::size_t i = 0; i < kColumns.size(); ++i) out << "---|";
      out << "\n";
      for (const auto& r : rows) {
        out << "|";
        for (const auto& c : text_cells(r)) out << " " << (c ? *c : std::string("-")) << " |";
        out << "\n";
      }
      break;
    }
  }
  return out.str();
}

void emit_report(const std::vector<BenchRecord>& records, ReportFormat format, const std::filesystem::path& file) {
  const auto text = render_report(records, format);
  std::ofstream out(file, std::ios::trunc);
  if (!out) throw IoError("cannot write report " + file.string());
  out << text;
  if (!out) throw IoError("write failed: " + file.string());
}

nlohmann::json to_json(const BenchRecord& r) {
  return {{"layer", r.layer},
          {"sparsity", r.sparsity},
          {"algorithm", to_string(r.algorithm)},
          {"dtype", to_string(r.dtype)},
          {"sub_batch_size", r.sub_batch_size},
          {"median_ms", r.median_ms},
          {"iqr_ms", r.iqr_ms},
          {"mean_ms", r.mean_ms},
          {"repetitions", r.repetitions},
          {"macs", r.macs},
          {"max_rel_error", r.max_rel_error},
          {"status", r.status},
          {"note", r.note}};
}

}  // namespace dsconv
