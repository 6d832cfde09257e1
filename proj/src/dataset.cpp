#include "dsconv/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <numeric>

namespace dsconv {

Dataset Dataset::subset(std::span<const std::size_t> idx) const {
  const auto& e = images.extents();
  const std::size_t per = e.c * e.h * e.w;
  Dataset out;
  out.classes = classes;
  out.images = Tensor4D<double>(Extents{idx.size(), e.c, e.h, e.w});
  out.labels.reserve(idx.size());
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] >= size()) throw ArgumentError("dataset index out of range");
    std::copy_n(images.data().begin() + static_cast<std::ptrdiff_t>(idx[i] * per), per,
                out.images.data().begin() + static_cast<std::ptrdiff_t>(i * per));
    out.labels.push_back(labels[idx[i]]);
  }
  return out;
}

Dataset make_synthetic(const SyntheticSpec& spec) {
  if (spec.classes < 2 || spec.classes > 8) throw ArgumentError("synthetic dataset supports 2..8 classes");
  if (spec.samples == 0 || spec.height < 4 || spec.width < 4) throw ArgumentError("synthetic dataset too small");
  std::mt19937_64 rng(spec.seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::normal_distribution<double> noise(0.0, spec.noise);
  const double freq = 2.0 * std::numbers::pi / 4.0;

  Dataset d;
  d.classes = spec.classes;
  d.images = Tensor4D<double>(spec.samples, 1, spec.height, spec.width);
  d.labels.resize(spec.samples);
  for (std::size_t n = 0; n < spec.samples; ++n) {
    const int label = static_cast<int>(n % spec.classes);
    d.labels[n] = label;
    const double angle = std::numbers::pi * label / static_cast<double>(spec.classes);
    const double ca = std::cos(angle), sa = std::sin(angle);
    const double phase = 2.0 * std::numbers::pi * unit(rng);
    const double amp = 0.6 + 0.4 * unit(rng);
    const double by = unit(rng) * static_cast<double>(spec.height - 1);
    const double bx = unit(rng) * static_cast<double>(spec.width - 1);
    const double bamp = 2.0 * unit(rng) - 1.0;
    for (std::size_t y = 0; y < spec.height; ++y)
      for (std::size_t x = 0; x < spec.width; ++x) {
        const double fy = static_cast<double>(y), fx = static_cast<double>(x);
        const double stripe = amp * std::sin(freq * (fx * ca + fy * sa) + phase);
        const double r2 = (fy - by) * (fy - by) + (fx - bx) * (fx - bx);
        const double blob = bamp * std::exp(-r2 / 8.0);
        d.images(n, 0, y, x) = stripe + blob + noise(rng);
      }
  }
  // Interleaved labels are shuffled so any prefix is class balanced only on average.
  std::vector<std::size_t> order(spec.samples);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::shuffle(order.begin(), order.end(), rng);
  return d.subset(order);
}

DataSplit split_validation(const Dataset& data, double fraction, std::uint64_t seed) {
  if (!(fraction > 0.0 && fraction < 1.0)) throw ArgumentError("validation fraction must lie in (0, 1)");
  const auto n_val = static_cast<std::size_t>(std::floor(static_cast<double>(data.size()) * fraction));
  if (n_val == 0 || n_val >= data.size())
    throw ArgumentError("dataset of " + std::to_string(data.size()) + " samples is too small for a validation split");
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);
  const std::span<const std::size_t> all(order);
  return {data.subset(all.subspan(n_val)), data.subset(all.first(n_val))};
}

Dataset load_cifar_binary(const std::filesystem::path& file, std::size_t classes) {
  std::ifstream in(file, std::ios::binary);
  if (!in) throw IoError("cannot open " + file.string());
  constexpr std::size_t record = 1 + 3 * 32 * 32;
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (bytes.empty() || bytes.size() % record != 0)
    throw FormatError(file.string() + ": size is not a multiple of the 3073-byte record");
  const std::size_t n = bytes.size() / record;
  Dataset d;
  d.classes = classes;
  d.images = Tensor4D<double>(n, 3, 32, 32);
  d.labels.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const unsigned char* r = bytes.data() + i * record;
    if (r[0] >= classes) throw FormatError(file.string() + ": label out of range at record " + std::to_string(i));
    d.labels[i] = r[0];
    for (std::size_t j = 0; j < 3 * 32 * 32; ++j) d.images.data()[i * 3072 + j] = r[1 + j] / 255.0;
  }
  return d;
}

BatchSampler::BatchSampler(std::size_t dataset_size, std::size_t batch_size, std::uint64_t seed)
    : order_(dataset_size), batch_(std::min(batch_size, dataset_size)), rng_(seed) {
  if (dataset_size == 0 || batch_size == 0) throw ArgumentError("BatchSampler: empty dataset or batch");
  std::iota(order_.begin(), order_.end(), std::size_t{0});
  std::shuffle(order_.begin(), order_.end(), rng_);
}

std::vector<std::size_t> BatchSampler::next() {
  if (pos_ + batch_ > order_.size()) {
    std::shuffle(order_.begin(), order_.end(), rng_);
    pos_ = 0;
  }
  std::vector<std::size_t> out(order_.begin() + static_cast<std::ptrdiff_t>(pos_),
                               order_.begin() + static_cast<std::ptrdiff_t>(pos_ + batch_));
  pos_ += batch_;
  return out;
}

}  // namespace dsconv
