#include "dsconv/pipeline.hpp"

#include <fstream>

namespace dsconv {

using nlohmann::json;

void PipelineConfig::validate() const {
  if (!(validation_fraction > 0.0 && validation_fraction < 1.0))
    throw ArgumentError("validation_fraction must lie in (0, 1)");
  if (baseline_batch == 0) throw ArgumentError("baseline batch_size must be positive");
  if (!(baseline_lr >= 0.0)) throw ArgumentError("baseline lr must be non-negative");
  if (net.convs.empty()) throw ArgumentError("network needs at least one conv layer");
  if (cifar_path.empty() && (data.samples == 0 || data.classes < 2)) throw ArgumentError("bad synthetic data spec");
  prune.validate();
}

json to_json(const PipelineConfig& c) {
  json convs = json::array();
  for (const auto& s : c.net.convs) convs.push_back({s.out_channels, s.kernel, s.stride, s.padding});
  json data{{"samples", c.data.samples}, {"classes", c.data.classes},         {"height", c.data.height},
            {"width", c.data.width},     {"noise", c.data.noise},             {"seed", c.data.seed},
            {"validation_fraction", c.validation_fraction}, {"split_seed", c.split_seed}};
  if (!c.cifar_path.empty()) data["cifar_path"] = c.cifar_path;
  return {{"data", data},
          {"network", {{"convs", convs}, {"init_seed", c.init_seed}}},
          {"baseline", {{"epochs", c.baseline_epochs}, {"batch_size", c.baseline_batch}, {"lr", c.baseline_lr}}},
          {"prune", to_json(c.prune)}};
}

namespace {

template <class F>
void each_key(const json& j, const std::string& section, F&& f) {
  if (!j.is_object()) throw ArgumentError(section + ": expected an object");
  for (const auto& [k, v] : j.items())
    if (!f(k, v)) throw ArgumentError(section + ": unknown key '" + k + "'");
}

}  // namespace

PipelineConfig pipeline_config_from_json(const json& j) {
  PipelineConfig c;
  try {
    each_key(j, "config", [&](const std::string& key, const json& v) {
      if (key == "data") {
        each_key(v, "data", [&](const std::string& k, const json& x) {
          if (k == "samples") c.data.samples = x.get<std::size_t>();
          else if (k == "classes") c.data.classes = x.get<std::size_t>();
          else if (k == "height") c.data.height = x.get<std::size_t>();
          else if (k == "width") c.data.width = x.get<std::size_t>();
          else if (k == "noise") c.data.noise = x.get<double>();
          else if (k == "seed") c.data.seed = x.get<std::uint64_t>();
          else if (k == "validation_fraction") c.validation_fraction = x.get<double>();
          else if (k == "split_seed") c.split_seed = x.get<std::uint64_t>();
          else if (k == "cifar_path") c.cifar_path = x.get<std::string>();
          else return false;
          return true;
        });
      } else if (key == "network") {
        each_key(v, "network", [&](const std::string& k, const json& x) {
          if (k == "convs") {
            c.net.convs.clear();
            for (const auto& s : x) {
              if (!s.is_array() || s.size() != 4)
                throw ArgumentError("network.convs: each entry is [out_channels, kernel, stride, padding]");
              c.net.convs.push_back({s[0].get<std::size_t>(), s[1].get<std::size_t>(), s[2].get<std::size_t>(),
                                     s[3].get<std::size_t>()});
            }
          } else if (k == "init_seed") {
            c.init_seed = x.get<std::uint64_t>();
          } else {
            return false;
          }
          return true;
        });
      } else if (key == "baseline") {
        each_key(v, "baseline", [&](const std::string& k, const json& x) {
          if (k == "epochs") c.baseline_epochs = x.get<std::size_t>();
          else if (k == "batch_size") c.baseline_batch = x.get<std::size_t>();
          else if (k == "lr") c.baseline_lr = x.get<double>();
          else return false;
          return true;
        });
      } else if (key == "prune") {
        c.prune = prune_config_from_json(v);
      } else {
        return false;
      }
      return true;
    });
  } catch (const json::exception& e) {
    throw ArgumentError(std::string("config: ") + e.what());
  }
  c.validate();
  return c;
}

PipelineConfig load_pipeline_config(const std::filesystem::path& file) {
  std::ifstream in(file);
  if (!in) throw IoError("cannot open config " + file.string());
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw FormatError(file.string() + ": " + e.what());
  }
  return pipeline_config_from_json(j);
}

DataSplit pipeline_data(const PipelineConfig& c) {
  const Dataset all = c.cifar_path.empty() ? make_synthetic(c.data) : load_cifar_binary(c.cifar_path, c.data.classes);
  return split_validation(all, c.validation_fraction, c.split_seed);
}

PipelineResult run_prune_pipeline(const PipelineConfig& c) {
  c.validate();
  PipelineResult r;
  r.data = pipeline_data(c);
  const auto& e = r.data.train.images.extents();
  ToyNetSpec spec = c.net;
  spec.in_channels = e.c;
  spec.height = e.h;
  spec.width = e.w;
  spec.classes = r.data.train.classes;
  r.baseline = ToyNet(spec, c.init_seed);
  train_epochs(r.baseline, r.data.train, c.baseline_epochs, c.baseline_batch, c.baseline_lr, c.init_seed + 1, nullptr,
               c.prune.workers);
  r.baseline_accuracy = r.baseline.accuracy(r.data.validation, c.prune.workers);

  r.prune = prune_run(c.prune, r.baseline, r.data);
  const auto& best = r.prune.best;
  r.model = model_from_toynet(best.net, &best.masks);
  r.model.provenance = {{"config", to_json(c)},
                        {"baseline_accuracy", r.baseline_accuracy},
                        {"validation_accuracy", best.accuracy},
                        {"weighted_sparsity", weighted_sparsity(best.masks)},
                        {"layer_sparsity", best.sparsity}};
  return r;
}

DataSplit provenance_data(const Model& m) {
  if (!m.provenance.contains("config")) throw ArgumentError("model records no data source");
  const auto c = pipeline_config_from_json(m.provenance.at("config"));
  return pipeline_data(c);
}

}  // namespace dsconv
