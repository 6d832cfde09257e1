#include <gtest/gtest.h>

#include <random>

#include "dsconv/dense_conv.hpp"
#include "test_util.hpp"

using namespace dsconv;
using dsconv::tu::random_layer;
using dsconv::tu::random_tensor;
using dsconv::tu::reference_conv;
using dsconv::tu::relative_to_reference;

namespace {

ConvShape shape_2x3x8x8() {
  ConvShape s;
  s.batch = 2;
  s.in_channels = 3;
  s.height = s.width = 8;
  s.out_channels = 4;
  s.kernel_h = s.kernel_w = 3;
  s.padding = 1;
  return s;
}

std::vector<double> bias_of(const ConvLayerDense<float>& l) { return {l.bias.begin(), l.bias.end()}; }

}  // namespace

TEST(DenseDirect, IdentityKernel) {
  std::mt19937_64 rng(1);
  ConvShape s;
  s.batch = 2;
  s.height = 5;
  s.width = 7;
  auto x = random_tensor<float>(s.input_extents(), rng);
  ConvLayerDense<float> l{s, Tensor4D<float>(s.weight_extents()), {0.f}};
  l.weights(0, 0, 0, 0) = 1.f;
  EXPECT_EQ(conv_dense_direct(x, l), x);
  EXPECT_EQ(conv_dense_gemm(x, l), x);
}

TEST(DenseDirect, ZeroWeightsGiveBias) {
  std::mt19937_64 rng(2);
  auto s = shape_2x3x8x8();
  auto x = random_tensor<float>(s.input_extents(), rng);
  ConvLayerDense<float> l{s, Tensor4D<float>(s.weight_extents()), std::vector<float>(4, 0.75f)};
  const auto direct = conv_dense_direct(x, l);
  const auto gemm = conv_dense_gemm(x, l);
  for (float v : direct.data()) EXPECT_EQ(v, 0.75f);
  for (float v : gemm.data()) EXPECT_EQ(v, 0.75f);
}

TEST(DenseDirect, MatchesReference) {
  std::mt19937_64 rng(3);
  auto s = shape_2x3x8x8();
  auto x = random_tensor<float>(s.input_extents(), rng);
  auto l = random_layer<float>(s, rng);
  auto ref = reference_conv(x, l.weights, bias_of(l), s);
  EXPECT_LT(relative_to_reference(conv_dense_direct(x, l), ref), 1e-5);
  EXPECT_LT(relative_error(conv_dense_gemm(x, l), conv_dense_direct(x, l)), 1e-4);
}

TEST(DenseGemm, PointwiseWide) {
  std::mt19937_64 rng(4);
  ConvShape s;
  s.batch = 2;
  s.in_channels = 64;
  s.height = s.width = 10;
  s.out_channels = 256;
  auto x = random_tensor<float>(s.input_extents(), rng);
  auto l = random_layer<float>(s, rng);
  EXPECT_LT(relative_error(conv_dense_gemm(x, l), conv_dense_direct(x, l)), 1e-4);
}

TEST(DenseConv, RandomShapesAllProfiles) {
  std::mt19937_64 rng(5);
  std::uniform_int_distribution<std::size_t> small(1, 6), ks(1, 3), pad(0, 2), st(1, 2);
  int checked = 0;
  while (checked < 60) {
    ConvShape s;
    s.batch = small(rng) % 3 + 1;
    s.in_channels = small(rng);
    s.out_channels = small(rng);
    s.height = small(rng) + 3;
    s.width = small(rng) + 3;
    s.kernel_h = ks(rng);
    s.kernel_w = ks(rng);
    s.padding = pad(rng);
    s.stride = st(rng);
    try {
      output_shape(s);
    } catch (const ShapeError&) {
      continue;
    }
    ++checked;
    auto x = random_tensor<float>(s.input_extents(), rng);
    auto l = random_layer<float>(s, rng, 0.3);
    auto ref = reference_conv(x, l.weights, bias_of(l), s);
    auto direct = conv_dense_direct(x, l);
    EXPECT_EQ(direct.extents(), s.output_extents());
    EXPECT_LT(relative_to_reference(direct, ref), 1e-5) << to_string(s);
    EXPECT_LT(relative_to_reference(conv_dense_gemm(x, l), ref), 1e-4) << to_string(s);

    auto xd = convert<double>(x);
    ConvLayerDense<double> ld{s, convert<double>(l.weights), {l.bias.begin(), l.bias.end()}};
    EXPECT_LT(relative_to_reference(conv_dense_direct(xd, ld), ref), 1e-12);
    EXPECT_LT(relative_to_reference(conv_dense_gemm(xd, ld), ref), 1e-12);

    auto xh = convert<Half>(x);
    ConvLayerDense<Half> lh{s, convert<Half>(l.weights), l.bias};
    auto ref_h = reference_conv(xh, lh.weights, bias_of(l), s);
    EXPECT_LT(relative_to_reference(conv_dense_direct(xh, lh), ref_h), 1e-2);
    EXPECT_LT(relative_error(conv_dense_gemm(xh, lh), conv_dense_direct(xh, lh)), 1e-2);
  }
}

TEST(DenseConv, Linearity) {
  std::mt19937_64 rng(6);
  auto s = shape_2x3x8x8();
  auto x = random_tensor<double>(s.input_extents(), rng);
  ConvLayerDense<double> l{s, random_tensor<double>(s.weight_extents(), rng), std::vector<double>(4, 0.0)};
  const double alpha = -2.75;
  auto xs = x;
  for (auto& v : xs.data()) v *= alpha;
  auto y = conv_dense_direct(x, l);
  auto ys = conv_dense_direct(xs, l);
  for (auto& v : y.data()) v *= alpha;
  EXPECT_LT(relative_error(ys, y), 1e-13);
}

TEST(DenseConv, WorkerCountDoesNotChangeBits) {
  std::mt19937_64 rng(7);
  auto s = shape_2x3x8x8();
  auto x = random_tensor<float>(s.input_extents(), rng);
  auto l = random_layer<float>(s, rng);
  auto one = conv_dense_direct(x, l, {1});
  EXPECT_TRUE(dsconv::tu::bit_equal(one, conv_dense_direct(x, l, {2})));
  EXPECT_TRUE(dsconv::tu::bit_equal(one, conv_dense_direct(x, l, {0})));
}

TEST(DenseConv, ShapeMismatch) {
  std::mt19937_64 rng(8);
  auto s = shape_2x3x8x8();
  auto l = random_layer<float>(s, rng);
  Tensor4D<float> wrong(2, 3, 8, 9);
  EXPECT_THROW(conv_dense_direct(wrong, l), ShapeError);
  EXPECT_THROW(conv_dense_gemm(wrong, l), ShapeError);
  l.bias.pop_back();
  EXPECT_THROW(conv_dense_direct(Tensor4D<float>(s.input_extents()), l), ShapeError);
}

TEST(DenseConv, MacCount) {
  auto s = shape_2x3x8x8();
  EXPECT_EQ(dense_macs(s), 2u * 4 * 8 * 8 * 3 * 3 * 3);
}
