#pragma once

#include <filesystem>
#include <string>

#include <json.hpp>

#include "dsconv/model.hpp"
#include "dsconv/pruning.hpp"

namespace dsconv {

/// Everything `prune` needs: data source, network, baseline training and
/// the pruning search. Serialized as one JSON document.
struct PipelineConfig {
  SyntheticSpec data;
  std::string cifar_path;  // when set, replaces the synthetic data
  double validation_fraction = 0.2;
  std::uint64_t split_seed = 1;
  ToyNetSpec net;
  std::uint64_t init_seed = 3;
  std::size_t baseline_epochs = 20;
  std::size_t baseline_batch = 32;
  double baseline_lr = 0.05;
  PruneConfig prune;

  void validate() const;
};

nlohmann::json to_json(const PipelineConfig& c);
/// Sections: data, network, baseline, prune. Missing keys keep defaults;
/// unknown keys throw ArgumentError.
PipelineConfig pipeline_config_from_json(const nlohmann::json& j);
PipelineConfig load_pipeline_config(const std::filesystem::path& file);

/// Dataset and held-out split described by the config.
DataSplit pipeline_data(const PipelineConfig& c);

struct PipelineResult {
  DataSplit data;
  ToyNet baseline;
  double baseline_accuracy = 0.0;
  PruneResult prune;
  Model model;  // pruned model, f32 dense storage, masks and provenance recorded
};

PipelineResult run_prune_pipeline(const PipelineConfig& c);

/// Data split recorded in a model's provenance (synthetic data only).
DataSplit provenance_data(const Model& m);

}  // namespace dsconv
