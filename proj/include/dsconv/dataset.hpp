#pragma once

#include <cstdint>
#include <filesystem>
#include <random>
#include <span>
#include <vector>

#include "dsconv/tensor.hpp"

namespace dsconv {

/// Labelled images, NCHW in double.
struct Dataset {
  Tensor4D<double> images;
  std::vector<int> labels;
  std::size_t classes = 0;

  std::size_t size() const { return labels.size(); }
  Dataset subset(std::span<const std::size_t> idx) const;
};

struct SyntheticSpec {
  std::size_t samples = 1200;
  std::size_t classes = 4;  // at most 8 orientations
  std::size_t height = 12;
  std::size_t width = 12;
  double noise = 1.5;
  std::uint64_t seed = 7;
};

/// Oriented stripe textures (class = orientation) over a random Gaussian
/// blob and additive noise. Deterministic in `seed`.
Dataset make_synthetic(const SyntheticSpec& spec);

struct DataSplit {
  Dataset train;
  Dataset validation;
};

/// Fixed held-out split after a seeded shuffle. Throws ArgumentError when
/// either side would be empty.
DataSplit split_validation(const Dataset& data, double fraction = 0.2, std::uint64_t seed = 1);

/// CIFAR binary batch files: per record one label byte and 3×32×32 bytes.
Dataset load_cifar_binary(const std::filesystem::path& file, std::size_t classes = 10);

/// Endless shuffled mini-batches (reshuffled each epoch).
class BatchSampler {
 public:
  BatchSampler(std::size_t dataset_size, std::size_t batch_size, std::uint64_t seed);
  std::vector<std::size_t> next();

 private:
  std::vector<std::size_t> order_;
  std::size_t batch_;
  std::size_t pos_ = 0;
  std::mt19937_64 rng_;
};

}  // namespace dsconv
