#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "dsconv/toynet.hpp"

namespace dsconv::tu {

struct GradCheck {
  std::size_t parameters = 0;
  double max_rel_error = 0.0;
};

/// Every parameter's backprop gradient against central differences.
/// Relative error |g - fd| / max(|g|, |fd|, 1e-6).
inline GradCheck gradient_check(ToyNet net, const Tensor4D<double>& x, const std::vector<int>& labels,
                                double h = 1e-5) {
  ToyGrads g;
  net.loss_and_grad(x, labels, g, 1);
  GradCheck out;
  auto probe = [&](double& p, double analytic) {
    const double saved = p;
    p = saved + h;
    const double up = net.loss(x, labels, 1);
    p = saved - h;
    const double down = net.loss(x, labels, 1);
    p = saved;
    const double fd = (up - down) / (2.0 * h);
    const double rel = std::abs(analytic - fd) / std::max({std::abs(analytic), std::abs(fd), 1e-6});
    out.max_rel_error = std::max(out.max_rel_error, rel);
    ++out.parameters;
  };
  for (std::size_t l = 0; l < net.conv_count(); ++l) {
    auto w = net.conv(l).weights.data();
    for (std::size_t i = 0; i < w.size(); ++i) probe(w[i], g.conv_w[l].data()[i]);
    auto& b = net.conv(l).bias;
    for (std::size_t i = 0; i < b.size(); ++i) probe(b[i], g.conv_b[l][i]);
  }
  for (std::size_t i = 0; i < net.dense_weights().size(); ++i) probe(net.dense_weights()[i], g.dense_w[i]);
  for (std::size_t i = 0; i < net.dense_bias().size(); ++i) probe(net.dense_bias()[i], g.dense_b[i]);
  return out;
}

/// Two conv layers (one strided) and the dense head on a small random batch.
struct GradProblem {
  ToyNet net;
  Tensor4D<double> x;
  std::vector<int> labels;
};

inline GradProblem small_grad_problem(std::uint64_t seed) {
  ToyNetSpec spec;
  spec.in_channels = 2;
  spec.height = 6;
  spec.width = 6;
  spec.classes = 3;
  spec.convs = {{4, 3, 1, 1}, {5, 2, 2, 0}};
  GradProblem p{ToyNet(spec, seed), Tensor4D<double>(Extents{4, 2, 6, 6}), {}};
  std::mt19937_64 rng(seed + 1);
  std::normal_distribution<double> n(0.0, 1.0);
  for (auto& v : p.x.data()) v = n(rng);
  // Non-zero biases keep ReLU inputs away from exact kinks.
  for (std::size_t l = 0; l < p.net.conv_count(); ++l)
    for (auto& b : p.net.conv(l).bias) b = 0.1 * n(rng);
  for (auto& b : p.net.dense_bias()) b = 0.1 * n(rng);
  std::uniform_int_distribution<int> lab(0, 2);
  for (int i = 0; i < 4; ++i) p.labels.push_back(lab(rng));
  return p;
}

}  // namespace dsconv::tu
