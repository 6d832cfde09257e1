#include "dsconv/toynet.hpp"

#include <algorithm>
#include <cmath>
#include <random>

#include <cblas.h>

#include "dsconv/dense_conv.hpp"

namespace dsconv {

namespace {

ConvLayerDense<double> rebatch(const ConvLayerDense<double>& l, std::size_t n) {
  ConvLayerDense<double> out = l;
  out.shape.batch = n;
  return out;
}

void relu_inplace(Tensor4D<double>& t) {
  for (auto& v : t.data()) v = v > 0.0 ? v : 0.0;
}

// Column matrix (C·R·S) × (E·F) of one zero-padded sample.
void im2col(const double* xp, const ConvShape& s, std::size_t E, std::size_t F, double* col) {
  const std::size_t Hp = s.padded_h(), Wp = s.padded_w();
  for (std::size_t c = 0; c < s.in_channels; ++c)
    for (std::size_t r = 0; r < s.kernel_h; ++r)
      for (std::size_t q = 0; q < s.kernel_w; ++q) {
        const double* base = xp + c * Hp * Wp + r * Wp + q;
        for (std::size_t i = 0; i < E; ++i)
          for (std::size_t j = 0; j < F; ++j) *col++ = base[i * s.stride * Wp + j * s.stride];
      }
}

void col2im_add(const double* col, const ConvShape& s, std::size_t E, std::size_t F, double* xp) {
  const std::size_t Hp = s.padded_h(), Wp = s.padded_w();
  for (std::size_t c = 0; c < s.in_channels; ++c)
    for (std::size_t r = 0; r < s.kernel_h; ++r)
      for (std::size_t q = 0; q < s.kernel_w; ++q) {
        double* base = xp + c * Hp * Wp + r * Wp + q;
        for (std::size_t i = 0; i < E; ++i)
          for (std::size_t j = 0; j < F; ++j) base[i * s.stride * Wp + j * s.stride] += *col++;
      }
}

// Accumulates dL/dW, dL/db and (optionally) dL/dx of one convolution.
void conv_backward(const Tensor4D<double>& x, const ConvLayerDense<double>& l, const Tensor4D<double>& dy,
                   Tensor4D<double>& dw, std::vector<double>& db, Tensor4D<double>* dx) {
  const ConvShape& s = l.shape;
  const auto [E, F] = output_shape(s);
  const auto xp = pad_input(x, s.padding);
  Tensor4D<double> dxp(dx ? xp.extents() : Extents{});
  const std::size_t N = x.extents().n, K = s.out_channels, CRS = s.kernel_volume(), EF = E * F;
  const std::size_t in_stride = s.in_channels * s.padded_h() * s.padded_w();
  std::vector<double> col(CRS * EF), dcol(dx ? CRS * EF : 0);
  const auto k_ = static_cast<int>(K), crs_ = static_cast<int>(CRS), ef_ = static_cast<int>(EF);
  for (std::size_t n = 0; n < N; ++n) {
    const double* g = &dy(n, 0, 0, 0);
    for (std::size_t k = 0; k < K; ++k)
      for (std::size_t t = 0; t < EF; ++t) db[k] += g[k * EF + t];
    im2col(xp.data().data() + n * in_stride, s, E, F, col.data());
    cblas_dgemm(CblasRowMajor, CblasNoTrans, CblasTrans, k_, crs_, ef_, 1.0, g, ef_, col.data(), ef_, 1.0,
                dw.data().data(), crs_);
    if (dx) {
      cblas_dgemm(CblasRowMajor, CblasTrans, CblasNoTrans, crs_, ef_, k_, 1.0, l.weights.data().data(), crs_, g,
                  ef_, 0.0, dcol.data(), ef_);
      col2im_add(dcol.data(), s, E, F, dxp.data().data() + n * in_stride);
    }
  }
  if (dx) {
    const std::size_t p = s.padding;
    *dx = Tensor4D<double>(x.extents());
    for (std::size_t n = 0; n < N; ++n)
      for (std::size_t c = 0; c < s.in_channels; ++c)
        for (std::size_t h = 0; h < s.height; ++h)
          std::copy_n(&dxp(n, c, h + p, p), s.width, &(*dx)(n, c, h, 0));
  }
}

}  // namespace

struct ToyNet::Trace {
  std::vector<Tensor4D<double>> inputs;  // input of each conv layer
  std::vector<Tensor4D<double>> pre;     // pre-activation output of each conv layer
  std::vector<double> features;          // N×features after pooling
};

ToyNet::ToyNet(const ToyNetSpec& spec, std::uint64_t seed) : spec_(spec) {
  if (spec.convs.empty()) throw ArgumentError("ToyNet needs at least one conv layer");
  if (spec.classes < 2) throw ArgumentError("ToyNet needs at least two classes");
  std::mt19937_64 rng(seed);
  std::size_t c = spec.in_channels, h = spec.height, w = spec.width;
  for (const auto& cs : spec.convs) {
    ConvShape s;
    s.in_channels = c;
    s.height = h;
    s.width = w;
    s.out_channels = cs.out_channels;
    s.kernel_h = s.kernel_w = cs.kernel;
    s.stride = cs.stride;
    s.padding = cs.padding;
    const auto [e, f] = output_shape(s);
    ConvLayerDense<double> layer{s, Tensor4D<double>(s.weight_extents()), std::vector<double>(s.out_channels, 0.0)};
    std::normal_distribution<double> init(0.0, std::sqrt(2.0 / static_cast<double>(s.kernel_volume())));
    for (auto& v : layer.weights.data()) v = init(rng);
    conv_.push_back(std::move(layer));
    c = cs.out_channels;
    h = e;
    w = f;
  }
  features_ = c;
  dense_w_.resize(spec.classes * features_);
  dense_b_.assign(spec.classes, 0.0);
  std::normal_distribution<double> init(0.0, std::sqrt(1.0 / static_cast<double>(features_)));
  for (auto& v : dense_w_) v = init(rng);
}

std::size_t ToyNet::conv_weight_count() const {
  std::size_t n = 0;
  for (const auto& l : conv_) n += l.weights.size();
  return n;
}

std::size_t ToyNet::parameter_count() const {
  std::size_t n = conv_weight_count() + dense_w_.size() + dense_b_.size();
  for (const auto& l : conv_) n += l.bias.size();
  return n;
}

std::vector<double> ToyNet::forward(const Tensor4D<double>& x, int workers, Trace* trace) const {
  const std::size_t N = x.extents().n;
  if (x.extents() != Extents{N, spec_.in_channels, spec_.height, spec_.width})
    throw ShapeError("ToyNet input " + to_string(x.extents()) + " does not match the network");
  Tensor4D<double> a = x;
  for (const auto& l : conv_) {
    auto z = conv_dense_gemm(a, rebatch(l, N), {workers});
    if (trace) {
      trace->inputs.push_back(std::move(a));
      trace->pre.push_back(z);
    }
    relu_inplace(z);
    a = std::move(z);
  }
  const auto& e = a.extents();
  const double inv = 1.0 / static_cast<double>(e.h * e.w);
  std::vector<double> feat(N * features_);
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t c = 0; c < features_; ++c) {
      double s = 0.0;
      for (double v : a.plane(n, c)) s += v;
      feat[n * features_ + c] = s * inv;
    }
  const std::size_t M = spec_.classes;
  std::vector<double> out(N * M);
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t m = 0; m < M; ++m) {
      double s = dense_b_[m];
      for (std::size_t f = 0; f < features_; ++f) s += dense_w_[m * features_ + f] * feat[n * features_ + f];
      out[n * M + m] = s;
    }
  if (trace) trace->features = std::move(feat);
  return out;
}

std::vector<double> ToyNet::logits(const Tensor4D<double>& x, int workers) const { return forward(x, workers, nullptr); }

namespace {

// Softmax in place per row; returns mean cross-entropy.
double softmax_xent(std::vector<double>& z, std::span<const int> labels, std::size_t M) {
  const std::size_t N = labels.size();
  double loss = 0.0;
  for (std::size_t n = 0; n < N; ++n) {
    double* row = z.data() + n * M;
    const double mx = *std::max_element(row, row + M);
    double sum = 0.0;
    for (std::size_t m = 0; m < M; ++m) sum += std::exp(row[m] - mx);
    const double lse = mx + std::log(sum);
    if (labels[n] < 0 || static_cast<std::size_t>(labels[n]) >= M) throw ArgumentError("label out of range");
    loss += lse - row[labels[n]];
    for (std::size_t m = 0; m < M; ++m) row[m] = std::exp(row[m] - lse);
  }
  return loss / static_cast<double>(N);
}

}  // namespace

double ToyNet::loss(const Tensor4D<double>& x, std::span<const int> labels, int workers) const {
  if (labels.size() != x.extents().n) throw ShapeError("label count does not match batch");
  auto z = forward(x, workers, nullptr);
  return softmax_xent(z, labels, spec_.classes);
}

double ToyNet::loss_and_grad(const Tensor4D<double>& x, std::span<const int> labels, ToyGrads& g,
                             int workers) const {
  const std::size_t N = x.extents().n, M = spec_.classes, Fe = features_;
  if (labels.size() != N) throw ShapeError("label count does not match batch");
  Trace tr;
  auto p = forward(x, workers, &tr);
  const double loss = softmax_xent(p, labels, M);

  g.conv_w.clear();
  g.conv_b.clear();
  for (const auto& l : conv_) {
    g.conv_w.emplace_back(l.weights.extents());
    g.conv_b.emplace_back(l.shape.out_channels, 0.0);
  }
  g.dense_w.assign(dense_w_.size(), 0.0);
  g.dense_b.assign(M, 0.0);

  // dL/dlogits = (softmax - onehot) / N
  for (std::size_t n = 0; n < N; ++n) p[n * M + static_cast<std::size_t>(labels[n])] -= 1.0;
  for (auto& v : p) v /= static_cast<double>(N);

  std::vector<double> dfeat(N * Fe, 0.0);
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t m = 0; m < M; ++m) {
      const double d = p[n * M + m];
      g.dense_b[m] += d;
      for (std::size_t f = 0; f < Fe; ++f) {
        g.dense_w[m * Fe + f] += d * tr.features[n * Fe + f];
        dfeat[n * Fe + f] += d * dense_w_[m * Fe + f];
      }
    }

  const auto& last = tr.pre.back().extents();
  Tensor4D<double> da(last);
  const double inv = 1.0 / static_cast<double>(last.h * last.w);
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t c = 0; c < Fe; ++c)
      for (auto& v : da.plane(n, c)) v = dfeat[n * Fe + c] * inv;

  for (std::size_t li = conv_.size(); li-- > 0;) {
    const auto& z = tr.pre[li];
    for (std::size_t i = 0; i < da.size(); ++i)
      if (!(z.data()[i] > 0.0)) da.data()[i] = 0.0;
    Tensor4D<double> dx;
    conv_backward(tr.inputs[li], rebatch(conv_[li], N), da, g.conv_w[li], g.conv_b[li], li > 0 ? &dx : nullptr);
    da = std::move(dx);
  }
  return loss;
}

std::vector<int> ToyNet::predict(const Tensor4D<double>& x, int workers) const {
  const auto z = logits(x, workers);
  const std::size_t M = spec_.classes;
  std::vector<int> out(x.extents().n);
  for (std::size_t n = 0; n < out.size(); ++n)
    out[n] = static_cast<int>(std::max_element(z.begin() + static_cast<std::ptrdiff_t>(n * M),
                                               z.begin() + static_cast<std::ptrdiff_t>((n + 1) * M)) -
                              (z.begin() + static_cast<std::ptrdiff_t>(n * M)));
  return out;
}

double ToyNet::accuracy(const Dataset& data, int workers) const {
  if (data.size() == 0) throw ArgumentError("accuracy on an empty dataset");
  constexpr std::size_t chunk = 256;
  std::size_t correct = 0;
  for (std::size_t first = 0; first < data.size(); first += chunk) {
    const std::size_t cnt = std::min(chunk, data.size() - first);
    const auto pred = predict(data.images.slice_batch(first, cnt), workers);
    for (std::size_t i = 0; i < cnt; ++i) correct += pred[i] == data.labels[first + i];
  }
  return static_cast<double>(correct) / static_cast<double>(data.size());
}

void ToyNet::apply_masks(const Masks& masks) {
  if (masks.size() != conv_.size()) throw ShapeError("mask count does not match conv layers");
  for (std::size_t l = 0; l < conv_.size(); ++l) {
    auto w = conv_[l].weights.data();
    if (masks[l].size() != w.size()) throw ShapeError("mask size does not match layer " + std::to_string(l));
    for (std::size_t i = 0; i < w.size(); ++i) w[i] = masks[l][i] ? w[i] : 0.0;
  }
}

bool operator==(const ToyNet& a, const ToyNet& b) {
  if (a.conv_.size() != b.conv_.size() || a.dense_w_ != b.dense_w_ || a.dense_b_ != b.dense_b_) return false;
  for (std::size_t i = 0; i < a.conv_.size(); ++i)
    if (a.conv_[i].weights != b.conv_[i].weights || a.conv_[i].bias != b.conv_[i].bias) return false;
  return true;
}

Masks full_masks(const ToyNet& net) {
  Masks m;
  for (std::size_t i = 0; i < net.conv_count(); ++i) m.emplace_back(net.conv(i).weights.size(), 1);
  return m;
}

void sgd_step(ToyNet& net, const ToyGrads& g, double lr, const Masks* masks) {
  for (std::size_t l = 0; l < net.conv_count(); ++l) {
    auto w = net.conv(l).weights.data();
    auto gw = g.conv_w.at(l).data();
    for (std::size_t i = 0; i < w.size(); ++i) {
      const bool keep = !masks || (*masks)[l][i];
      w[i] = keep ? w[i] - lr * gw[i] : 0.0;
    }
    auto& b = net.conv(l).bias;
    for (std::size_t k = 0; k < b.size(); ++k) b[k] -= lr * g.conv_b[l][k];
  }
  for (std::size_t i = 0; i < net.dense_weights().size(); ++i) net.dense_weights()[i] -= lr * g.dense_w[i];
  for (std::size_t i = 0; i < net.dense_bias().size(); ++i) net.dense_bias()[i] -= lr * g.dense_b[i];
}

GradStats train_batches(ToyNet& net, const Masks* masks, const Dataset& data, BatchSampler& sampler,
                        const TrainOptions& opts) {
  GradStats stats;
  for (std::size_t l = 0; l < net.conv_count(); ++l) stats.emplace_back(net.conv(l).weights.size(), 0.0);
  ToyGrads g;
  for (std::size_t step = 0; step < opts.steps; ++step) {
    const auto idx = sampler.next();
    const Dataset batch = data.subset(idx);
    const double loss = net.loss_and_grad(batch.images, batch.labels, g, opts.workers);
    if (!std::isfinite(loss)) throw TrainingError("non-finite loss at step " + std::to_string(step));
    for (std::size_t l = 0; l < stats.size(); ++l) {
      auto gw = g.conv_w[l].data();
      for (std::size_t i = 0; i < gw.size(); ++i) {
        const double mag = std::abs(gw[i]);
        stats[l][i] = step == 0 ? mag : opts.ema_decay * stats[l][i] + (1.0 - opts.ema_decay) * mag;
      }
    }
    sgd_step(net, g, opts.lr, masks);
  }
  return stats;
}

}  // namespace dsconv

namespace dsconv {

double train_epochs(ToyNet& net, const Dataset& data, std::size_t epochs, std::size_t batch_size, double lr,
                    std::uint64_t seed, const Masks* masks, int workers) {
  BatchSampler sampler(data.size(), batch_size, seed);
  const std::size_t steps_per_epoch = std::max<std::size_t>(1, data.size() / batch_size);
  TrainOptions opts;
  opts.steps = steps_per_epoch * epochs;
  opts.lr = lr;
  opts.workers = workers;
  if (opts.steps > 0) train_batches(net, masks, data, sampler, opts);
  return net.accuracy(data, workers);
}

}  // namespace dsconv
