#pragma once

#include <cstdint>
#include <vector>

#include "dsconv/dataset.hpp"
#include "dsconv/tensor.hpp"

namespace dsconv {

struct ConvSpec {
  std::size_t out_channels = 8;
  std::size_t kernel = 3;
  std::size_t stride = 1;
  std::size_t padding = 1;
};

/// conv+ReLU stack, global average pool, one dense layer, softmax cross-entropy.
struct ToyNetSpec {
  std::size_t in_channels = 1;
  std::size_t height = 12;
  std::size_t width = 12;
  std::size_t classes = 4;
  std::vector<ConvSpec> convs{{16, 3, 1, 1}, {32, 4, 2, 1}, {32, 1, 1, 0}};
};

/// Per conv layer keep-flags over the flattened K×C×R×S weights.
using Masks = std::vector<std::vector<std::uint8_t>>;

struct ToyGrads {
  std::vector<Tensor4D<double>> conv_w;
  std::vector<std::vector<double>> conv_b;
  std::vector<double> dense_w;
  std::vector<double> dense_b;
};

class ToyNet {
 public:
  ToyNet() = default;
  /// He-normal initialization, zero biases.
  ToyNet(const ToyNetSpec& spec, std::uint64_t seed);

  const ToyNetSpec& spec() const { return spec_; }
  std::size_t conv_count() const { return conv_.size(); }
  /// Layer shapes carry batch 1; forward rebinds the batch.
  ConvLayerDense<double>& conv(std::size_t i) { return conv_.at(i); }
  const ConvLayerDense<double>& conv(std::size_t i) const { return conv_.at(i); }
  std::vector<double>& dense_weights() { return dense_w_; }  // classes × features, row major
  const std::vector<double>& dense_weights() const { return dense_w_; }
  std::vector<double>& dense_bias() { return dense_b_; }
  const std::vector<double>& dense_bias() const { return dense_b_; }
  std::size_t feature_count() const { return features_; }
  std::size_t parameter_count() const;
  std::size_t conv_weight_count() const;

  /// N×classes logits, row major.
  std::vector<double> logits(const Tensor4D<double>& x, int workers = 0) const;
  /// Mean cross-entropy over the batch.
  double loss(const Tensor4D<double>& x, std::span<const int> labels, int workers = 0) const;
  /// Loss and exact gradients of every parameter.
  double loss_and_grad(const Tensor4D<double>& x, std::span<const int> labels, ToyGrads& grads,
                       int workers = 0) const;
  std::vector<int> predict(const Tensor4D<double>& x, int workers = 0) const;
  double accuracy(const Dataset& data, int workers = 0) const;

  /// Zero masked-out conv weights (selection, so no -0 survives).
  void apply_masks(const Masks& masks);

  friend bool operator==(const ToyNet&, const ToyNet&);

 private:
  struct Trace;
  std::vector<double> forward(const Tensor4D<double>& x, int workers, Trace* trace) const;

  ToyNetSpec spec_;
  std::vector<ConvLayerDense<double>> conv_;
  std::vector<double> dense_w_, dense_b_;
  std::size_t features_ = 0;
};

/// Full-keep masks matching the net's conv layers.
Masks full_masks(const ToyNet& net);

/// w <- w - lr * grad, restricted to kept positions.
void sgd_step(ToyNet& net, const ToyGrads& grads, double lr, const Masks* masks);

struct TrainOptions {
  std::size_t steps = 1;
  double lr = 0.05;
  double ema_decay = 0.9;
  int workers = 0;
};

/// EMA of |dL/dw| per conv weight over the training window.
using GradStats = std::vector<std::vector<double>>;

/// Runs `steps` SGD mini-batch updates drawn from `sampler`. Masked weights
/// stay exactly zero. Throws TrainingError on a non-finite loss; the failing
/// step is not applied.
GradStats train_batches(ToyNet& net, const Masks* masks, const Dataset& data, BatchSampler& sampler,
                        const TrainOptions& opts);

}  // namespace dsconv

namespace dsconv {

/// Plain full-network training (no masks); returns final validation-free
/// training accuracy on `data`.
double train_epochs(ToyNet& net, const Dataset& data, std::size_t epochs, std::size_t batch_size, double lr,
                    std::uint64_t seed, const Masks* masks = nullptr, int workers = 0);

}  // namespace dsconv
