#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "dsconv/bench.hpp"
#include "dsconv/model_store.hpp"
#include "dsconv/pipeline.hpp"

namespace fs = std::filesystem;
using namespace dsconv;
using nlohmann::json;

namespace {

struct Globals {
  std::uint64_t seed = 1;
  int workers = 0;
  bool seed_set = false;
};

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream in(s);
  for (std::string item; std::getline(in, item, ',');)
    if (!item.empty()) out.push_back(item);
  return out;
}

std::vector<double> parse_sparsities(const std::string& s) {
  std::vector<double> out;
  for (const auto& item : split_list(s)) {
    std::size_t used = 0;
    double v = 0.0;
    try {
      v = std::stod(item, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used != item.size() || !(v >= 0.0 && v <= 1.0)) throw ArgumentError("bad sparsity '" + item + "'");
    out.push_back(v);
  }
  return out;
}

// Relative report paths land in DSCONV_REPORT_DIR when it is set.
fs::path report_path(const std::string& p) {
  fs::path path(p);
  if (path.is_relative())
    if (const char* dir = std::getenv("DSCONV_REPORT_DIR"); dir && *dir) {
      fs::create_directories(dir);
      return fs::path(dir) / path;
    }
  return path;
}

void write_json(const fs::path& p, const json& j) {
  std::ofstream out(p, std::ios::trunc);
  if (!out) throw IoError("cannot write " + p.string());
  out << j.dump(2) << "\n";
}

Dataset tensor_dataset(const Tensor4D<float>& x) {
  Dataset d;
  d.images = convert<double>(x);
  d.labels.assign(x.extents().n, 0);
  d.classes = 1;
  return d;
}

// ---- prune -------------------------------------------------------------------

struct PruneArgs {
  std::string config, out;
};

int cmd_prune(const PruneArgs& a, const Globals& g) {
  PipelineConfig cfg = a.config.empty() ? PipelineConfig{} : load_pipeline_config(a.config);
  if (g.seed_set) {
    cfg.prune.seed = g.seed;
    cfg.init_seed = g.seed;
  }
  cfg.prune.workers = g.workers;
  cfg.validate();
  const auto r = run_prune_pipeline(cfg);
  save_model(r.model, a.out);
  {
    std::ofstream log(fs::path(a.out) / "history.jsonl", std::ios::trunc);
    for (const auto& h : r.prune.history) log << to_json(h).dump() << "\n";
  }
  save_tensor(convert<float>(r.data.validation.images), fs::path(a.out) / "validation.bin");
  write_json(fs::path(a.out) / "validation_labels.json", r.data.validation.labels);
  std::cout << "baseline accuracy " << r.baseline_accuracy << "\n"
            << "pruned accuracy   " << r.prune.best.accuracy << "\n"
            << "weighted sparsity " << weighted_sparsity(r.prune.best.masks) << "\n"
            << "model written to  " << a.out << "\n";
  return 0;
}

// ---- quantize ----------------------------------------------------------------

struct QuantArgs {
  std::string model, out, scheme = "fixed:16", targets = "weights", calibration;
  bool conv_only = false, literal_ceil = false;
  std::size_t samples = 256;
};

int cmd_quantize(const QuantArgs& a, const Globals& g) {
  Model m = load_model(a.model);
  QuantizeOptions o;
  o.scheme = QuantScheme::parse(a.scheme);
  o.weights = o.activations = false;
  for (const auto& t : split_list(a.targets)) {
    if (t == "weights") o.weights = true;
    else if (t == "activations") o.activations = true;
    else throw ArgumentError("unknown quantization target '" + t + "'");
  }
  o.include_classifier = !a.conv_only;
  o.literal_ceil = a.literal_ceil;
  o.calibration_samples = a.samples;
  o.seed = g.seed;

  std::optional<DataSplit> data;
  try {
    data = provenance_data(m);
  } catch (const ArgumentError&) {
  }
  Dataset calib;
  if (!a.calibration.empty()) {
    calib = tensor_dataset(load_tensor(a.calibration));
    o.calibration = &calib;
  } else if (data) {
    o.calibration = &data->train;
  }
  const double before = data ? ModelRunner(m, all_dense_config(m), g.workers).accuracy(data->validation) : -1.0;
  const auto report = apply_quantization(m, o);
  const double after = data ? ModelRunner(m, all_dense_config(m), g.workers).accuracy(data->validation) : -1.0;

  json rep = json::array();
  for (const auto& r : report) {
    rep.push_back({{"layer", r.layer},
                   {"scheme", r.scheme},
                   {"saturated", r.saturated},
                   {"codebook_k", r.codebook_k},
                   {"payload_bits", r.payload_bits},
                   {"max_abs_error", r.max_abs_error},
                   {"clip", {r.clip_lo, r.clip_hi}}});
    if (r.layer.ends_with(".input")) {
      std::cout << r.layer << ": " << r.scheme << ", clip [" << r.clip_lo << ", " << r.clip_hi << "]\n";
      continue;
    }
    std::cout << r.layer << ": " << r.scheme << ", payload " << r.payload_bits << " bits, max |dw| " << r.max_abs_error
              << (r.saturated ? ", saturated " + std::to_string(r.saturated) : "") << "\n";
  }
  m.provenance["quantization"] = {{"scheme", o.scheme.to_string()},
                                  {"targets", a.targets},
                                  {"include_classifier", o.include_classifier},
                                  {"literal_ceil", o.literal_ceil},
                                  {"calibration_samples", o.calibration_samples},
                                  {"layers", rep}};
  if (data) {
    m.provenance["quantization"]["accuracy_before"] = before;
    m.provenance["quantization"]["accuracy_after"] = after;
    std::cout << "validation accuracy " << before << " -> " << after << "\n";
  }
  save_model(m, a.out.empty() ? a.model : a.out);
  return 0;
}

// ---- build-csr ---------------------------------------------------------------

struct CsrArgs {
  std::string model, out;
};

int cmd_build_csr(const CsrArgs& a, const Globals&) {
  Model m = load_model(a.model);
  for (auto& l : m.convs) {
    const auto rep = analyze_sparsity(l.weights);
    if (l.storage == Storage::dense) build_layer_csr(l);
    std::size_t lo = rep.per_channel_nnz.front(), hi = lo;
    for (auto n : rep.per_channel_nnz) {
      lo = std::min(lo, n);
      hi = std::max(hi, n);
    }
    std::cout << l.name << ": sparsity " << rep.layer_sparsity << ", channel nnz " << lo << ".." << hi
              << ", sparse_level " << rep.unified_nnz << ", padded zeros " << rep.padded_zero_count << ", storage "
              << to_string(l.storage) << "\n";
  }
  save_model(m, a.out.empty() ? a.model : a.out);
  return 0;
}

// ---- bench -------------------------------------------------------------------

struct BenchArgs {
  std::string preset, model, dtypes = "f32,f16", report, format, sweep, layers;
  std::size_t batch = 128, reps = 5, warmups = 2;
  std::size_t memory_mib = 1024;
};

BenchOptions bench_options(std::size_t batch, const std::string& dtypes, std::size_t reps, std::size_t warmups,
                           std::size_t memory_mib, const Globals& g) {
  BenchOptions o;
  o.batch = batch;
  o.dtypes.clear();
  for (const auto& d : split_list(dtypes)) o.dtypes.push_back(parse_dtype(d));
  o.repetitions = reps;
  o.warmups = warmups;
  o.memory_budget_bytes = static_cast<std::uint64_t>(memory_mib) << 20;
  o.workers = g.workers;
  o.seed = g.seed;
  o.validate();
  return o;
}

int cmd_bench(const BenchArgs& a, const Globals& g) {
  if (a.preset.empty() == a.model.empty()) throw ArgumentError("bench: give exactly one of --preset or --model");
  const auto opts = bench_options(a.batch, a.dtypes, a.reps, a.warmups, a.memory_mib, g);
  const auto filter = split_list(a.layers);
  auto wanted = [&](const std::string& name) {
    if (filter.empty()) return true;
    for (const auto& f : filter)
      if (name.find(f) != std::string::npos) return true;
    return false;
  };

  std::vector<BenchRecord> records;
  std::vector<LayerSpec> specs;
  if (!a.preset.empty()) {
    for (const auto& s : preset_layers(a.preset))
      if (wanted(s.name)) specs.push_back(s);
    for (const auto& s : specs) {
      std::cerr << "bench " << s.name << "\n";
      const auto r = bench_layer(s, opts);
      records.insert(records.end(), r.begin(), r.end());
    }
  } else {
    const Model m = load_model(a.model);
    for (const auto& l : m.convs) {
      if (!wanted(l.name)) continue;
      LayerSpec s{l.name, l.shape, l.sparsity(), l.dtype, LayerSource::model};
      specs.push_back(s);
      std::cerr << "bench " << s.name << "\n";
      const auto r = bench_layer(s, l.weights, l.bias, opts);
      records.insert(records.end(), r.begin(), r.end());
    }
  }
  for (const auto& r : records)
    if (!r.ok()) std::cerr << r.layer << " " << to_string(r.algorithm) << "/" << to_string(r.dtype) << ": " << r.status
                           << " (" << r.note << ")\n";
  std::cout << render_report(records, ReportFormat::markdown);

  if (!a.sweep.empty()) {
    const auto pts = parse_sparsities(a.sweep);
    for (const auto& s : specs) {
      const auto sw = sparsity_sweep(s, pts, opts);
      std::cout << s.name << ": crossover " << sw.crossover_text() << " (dense " << sw.dense_ms << " ms, spearman "
                << sw.spearman_rho << ")\n";
    }
  }
  if (!a.report.empty()) {
    const auto path = report_path(a.report);
    const auto fmt = a.format.empty() ? report_format_for(path) : parse_report_format(a.format);
    emit_report(records, fmt, path);
    json raw = json::array();
    for (const auto& r : records) raw.push_back(to_json(r));
    write_json(fs::path(path).replace_extension(".records.json"), raw);
    std::cerr << "report written to " << path << "\n";
  }
  return 0;
}

// ---- configure ---------------------------------------------------------------

struct ConfigureArgs {
  std::string model, out, dtypes = "f32", sweep, report;
  std::size_t batch = 128, reps = 5, warmups = 2;
  std::size_t memory_mib = 1024;
};

int cmd_configure(const ConfigureArgs& a, const Globals& g) {
  const Model m = load_model(a.model);
  ConfigureOptions o;
  o.bench = bench_options(a.batch, a.dtypes, a.reps, a.warmups, a.memory_mib, g);
  o.crossover_sweep = parse_sparsities(a.sweep);
  std::vector<BenchRecord> records;
  const auto cfg = configure_network(m, o, &records);
  save_network_config(cfg, a.out);
  for (const auto& l : cfg.layers)
    std::cout << l.layer << ": " << to_string(l.algorithm) << "/" << to_string(l.dtype)
              << (l.algorithm == Algorithm::sparse_direct ? " sub_batch " + std::to_string(l.sub_batch_size) : "")
              << " " << l.median_ms << " ms" << (l.crossover.empty() ? "" : ", crossover " + l.crossover)
              << (l.note.empty() ? "" : " (" + l.note + ")") << "\n";
  if (!a.report.empty()) {
    const auto path = report_path(a.report);
    emit_report(records, report_format_for(path), path);
  }
  std::cout << "network config written to " << a.out << "\n";
  return 0;
}

// ---- infer -------------------------------------------------------------------

struct InferArgs {
  std::string model, config, input, labels, out;
};

int cmd_infer(const InferArgs& a, const Globals& g) {
  const Model m = load_model(a.model);
  const NetworkConfig cfg = a.config.empty() ? all_dense_config(m) : load_network_config(a.config);
  for (const auto& l : cfg.layers) m.layer(l.layer);  // every planned layer must exist
  const auto x = load_tensor(a.input);
  const ModelRunner runner(m, cfg, g.workers);
  const auto logits = runner.logits(x);
  const auto ref = ModelRunner(m, all_dense_config(m), g.workers).logits(x);
  const double err = relative_error(logits, ref);

  const std::size_t N = x.extents().n, M = m.classes;
  std::vector<int> pred(N);
  for (std::size_t n = 0; n < N; ++n) {
    const auto row = logits.begin() + static_cast<std::ptrdiff_t>(n * M);
    pred[n] = static_cast<int>(std::max_element(row, row + static_cast<std::ptrdiff_t>(M)) - row);
  }
  json out{{"samples", N}, {"classes", M}, {"predictions", pred}, {"logits", logits}, {"relative_error_vs_dense", err}};
  std::cout << "samples " << N << "\n" << "relative error vs dense " << err << "\n";
  if (!a.labels.empty()) {
    std::ifstream in(a.labels);
    if (!in) throw IoError("cannot open " + a.labels);
    json lj;
    try {
      in >> lj;
    } catch (const json::exception& e) {
      throw FormatError(a.labels + ": " + e.what());
    }
    const auto labels = lj.get<std::vector<int>>();
    if (labels.size() != N) throw ArgumentError("label count does not match the input batch");
    std::size_t hit = 0;
    for (std::size_t n = 0; n < N; ++n) hit += labels[n] == pred[n];
    out["accuracy"] = static_cast<double>(hit) / static_cast<double>(N);
    std::cout << "accuracy " << out["accuracy"].get<double>() << "\n";
  }
  if (!a.out.empty()) write_json(a.out, out);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"dsconv: pruning, quantization and direct sparse convolution toolkit"};
  app.require_subcommand(1);
  Globals g;
  if (const char* w = std::getenv("DSCONV_WORKERS"); w && *w) g.workers = std::atoi(w);
  app.add_option("--workers", g.workers, "worker threads (0: all; env DSCONV_WORKERS)");
  app.add_option("--seed", g.seed, "seed for every random choice")->each([&](const std::string&) { g.seed_set = true; });

  PruneArgs pa;
  auto* prune = app.add_subcommand("prune", "train a dense baseline and run the evolutionary pruning search");
  prune->add_option("--config", pa.config, "pipeline config (JSON)")->check(CLI::ExistingFile);
  prune->add_option("--out", pa.out, "model directory to write")->required();

  QuantArgs qa;
  auto* quant = app.add_subcommand("quantize", "quantize weights and/or activations of a stored model");
  quant->add_option("--model", qa.model)->required()->check(CLI::ExistingDirectory);
  quant->add_option("--out", qa.out, "output directory (default: in place)");
  quant->add_option("--scheme", qa.scheme, "fixed:N | affine:N | codebook:K | half");
  quant->add_option("--targets", qa.targets, "weights[,activations]");
  quant->add_option("--calibration", qa.calibration, "tensor file for activation calibration");
  quant->add_option("--calibration-samples", qa.samples);
  quant->add_flag("--conv-only", qa.conv_only, "leave the classifier in f32");
  quant->add_flag("--literal-ceil", qa.literal_ceil, "affine codes by ceil instead of round");

  CsrArgs ca;
  auto* csr = app.add_subcommand("build-csr", "convert every conv layer to unified-sparsity CSR storage");
  csr->add_option("--model", ca.model)->required()->check(CLI::ExistingDirectory);
  csr->add_option("--out", ca.out, "output directory (default: in place)");

  BenchArgs ba;
  auto* bench = app.add_subcommand("bench", "time sparse-direct against the dense baselines");
  bench->add_option("--preset", ba.preset, "vgg16 | resnet-1x1 | densenet-1x1 | cnn-non-static");
  bench->add_option("--model", ba.model)->check(CLI::ExistingDirectory);
  bench->add_option("--batch", ba.batch);
  bench->add_option("--dtypes", ba.dtypes, "comma list of f32,f16");
  bench->add_option("--report", ba.report, "report file (.csv, .json, .md)");
  bench->add_option("--format", ba.format, "csv | json | markdown (default: from extension)");
  bench->add_option("--reps", ba.reps, "timed repetitions (>= 5)");
  bench->add_option("--warmups", ba.warmups);
  bench->add_option("--memory-mib", ba.memory_mib, "per-layer memory budget");
  bench->add_option("--sweep", ba.sweep, "comma list of sparsities for a crossover estimate");
  bench->add_option("--layers", ba.layers, "comma list of layer name filters");

  ConfigureArgs fa;
  auto* configure = app.add_subcommand("configure", "choose the fastest algorithm per layer");
  configure->add_option("--model", fa.model)->required()->check(CLI::ExistingDirectory);
  configure->add_option("--out", fa.out, "network config to write")->required();
  configure->add_option("--batch", fa.batch);
  configure->add_option("--dtypes", fa.dtypes, "execution profiles to consider");
  configure->add_option("--reps", fa.reps);
  configure->add_option("--warmups", fa.warmups);
  configure->add_option("--memory-mib", fa.memory_mib);
  configure->add_option("--crossover-sweep", fa.sweep, "sparsities for per-layer crossover estimates");
  configure->add_option("--report", fa.report, "also write the per-layer timing report");

  InferArgs ia;
  auto* infer = app.add_subcommand("infer", "run a stored model under a network config");
  infer->add_option("--model", ia.model)->required()->check(CLI::ExistingDirectory);
  infer->add_option("--config", ia.config, "network config (default: all dense-direct)")->check(CLI::ExistingFile);
  infer->add_option("--input", ia.input, "tensor file")->required()->check(CLI::ExistingFile);
  infer->add_option("--labels", ia.labels, "JSON label list for an accuracy figure")->check(CLI::ExistingFile);
  infer->add_option("--out", ia.out, "write predictions and logits as JSON");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  try {
    if (*prune) return cmd_prune(pa, g);
    if (*quant) return cmd_quantize(qa, g);
    if (*csr) return cmd_build_csr(ca, g);
    if (*bench) return cmd_bench(ba, g);
    if (*configure) return cmd_configure(fa, g);
    if (*infer) return cmd_infer(ia, g);
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return e.exit_code();
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
