#include <gtest/gtest.h>

#include <cmath>
#include <cstring>
#include <random>

#include "dsconv/model.hpp"
#include "dsconv/quantizer.hpp"

using namespace dsconv;

namespace {

ToyNet half_pruned_net(std::uint64_t seed = 2) {
  ToyNetSpec spec;
  spec.height = 8;
  spec.width = 8;
  spec.convs = {{4, 3, 1, 1}, {6, 2, 2, 0}};
  ToyNet net(spec, seed);
  for (std::size_t l = 0; l < net.conv_count(); ++l) {
    auto w = net.conv(l).weights.data();
    for (std::size_t i = 0; i < w.size(); i += 2) w[i] = 0.0;
  }
  return net;
}

Dataset small_calibration() {
  SyntheticSpec s;
  s.samples = 40;
  s.height = 8;
  s.width = 8;
  return make_synthetic(s);
}

}  // namespace

TEST(FixedPoint, GridExample) {
  FixedPointParams p;
  p.total_bits = 8;
  p.int_bits = 1;
  p.frac_bits = 6;
  p.sigma = 1.0 / 64.0;
  EXPECT_EQ(quantize_fixed(0.3, p), 0.296875);
  bool sat = false;
  EXPECT_EQ(quantize_fixed(5.0, p, &sat), p.highest());
  EXPECT_TRUE(sat);
  EXPECT_EQ(quantize_fixed(-5.0, p), -2.0);
}

TEST(FixedPoint, FitExamples) {
  const std::vector<float> a{1.5f, -0.2f}, b{-1.0f, 0.5f}, c{0.4f};
  auto pa = fit_fixed_point(a, 8);
  EXPECT_EQ(pa.int_bits, 1);
  EXPECT_EQ(pa.frac_bits, 6);
  auto pb = fit_fixed_point(b, 8);
  EXPECT_EQ(pb.int_bits, 0);
  EXPECT_EQ(pb.frac_bits, 7);
  auto pc = fit_fixed_point(c, 8);
  EXPECT_EQ(pc.int_bits, 0);
  EXPECT_EQ(pc.frac_bits, 7);
  EXPECT_EQ(pc.sigma, 1.0 / 128.0);
}

TEST(FixedPoint, ErrorWithinHalfStepInRange) {
  std::mt19937_64 rng(1);
  std::vector<float> x(2000);
  for (auto& v : x) v = std::uniform_real_distribution<float>(-3.0f, 3.0f)(rng);
  for (int bits : {6, 8, 12, 16}) {
    const auto p = fit_fixed_point(x, bits);
    for (float v : x) {
      if (v > p.highest()) continue;
      ASSERT_LE(std::abs(quantize_fixed(v, p) - v), p.sigma / 2 + 1e-12);
    }
  }
}

TEST(Affine, EndpointsAndGridError) {
  std::mt19937_64 rng(2);
  std::vector<float> x(1000);
  for (auto& v : x) v = std::uniform_real_distribution<float>(-1.0f, 3.0f)(rng);
  x[0] = -1.0f;
  x[1] = 3.0f;
  const auto p = fit_affine(x, 8, AffineMode::asymmetric);
  EXPECT_EQ(quantize_affine_int(-1.0, p), 0);
  EXPECT_EQ(quantize_affine_int(3.0, p), 255);
  for (float v : x) ASSERT_LE(std::abs(fake_quant_affine(v, p) - v), 4.0 / 510.0 + 1e-9);
  const auto unit = affine_from_range(0.0, 1.0, 8, AffineMode::asymmetric);
  for (int i = 0; i <= 1000; ++i) ASSERT_LE(std::abs(fake_quant_affine(i / 1000.0, unit) - i / 1000.0), 1.0 / 510.0 + 1e-12);
  const auto sym = fit_affine(x, 8, AffineMode::symmetric);
  EXPECT_EQ(sym.mu, 0.0);
  EXPECT_EQ(fake_quant_affine(0.0, sym), 0.0);
}

TEST(Calibration, HeavyTailIsClippedForLowerError) {
  // Laplace samples at 4 bits: the sparse tail costs less clipped than it costs in grid resolution.
  std::mt19937_64 rng(3);
  std::exponential_distribution<float> e(1.0f);
  std::vector<float> x(20000);
  for (std::size_t i = 0; i < x.size(); ++i) x[i] = (i % 2 ? 1.0f : -1.0f) * e(rng);
  const std::vector<double> targets{0.99, 0.999};
  const auto pol = calibrate_saturation(x, targets, 4);
  EXPECT_LT(pol.mse, pol.no_clip_mse);
  EXPECT_LT(pol.clip_hi, pol.hist_hi);
  EXPECT_GT(pol.clip_lo, pol.hist_lo);
  EXPECT_LT(pol.coverage, 1.0);
  EXPECT_GE(pol.coverage, 0.99 - 1e-3);
  EXPECT_EQ(pol.histogram.size(), kHistogramBins);
}

TEST(Calibration, FarOutliersAreKeptWhenClippingCostsMore) {
  std::mt19937_64 rng(3);
  std::vector<float> x(10000);
  for (auto& v : x) v = std::uniform_real_distribution<float>(0.0f, 1.0f)(rng);
  for (std::size_t i = 0; i < 100; ++i) x[i * 100] = 100.0f;
  const std::vector<double> targets{0.98};
  const auto pol = calibrate_saturation(x, targets, 8);
  EXPECT_EQ(pol.clip_hi, 100.0);
  EXPECT_LE(pol.mse, pol.no_clip_mse);
}

TEST(Calibration, OnGridSamplesKeepFullRange) {
  std::vector<float> x;
  for (int rep = 0; rep < 4; ++rep)
    for (int i = 0; i <= 255; ++i) x.push_back(static_cast<float>(i) / 255.0f * 2.0f);
  const std::vector<double> targets{0.99, 0.999};
  const auto pol = calibrate_saturation(x, targets, 8);
  EXPECT_EQ(pol.coverage, 1.0);
  EXPECT_EQ(pol.clip_lo, 0.0);
  EXPECT_FLOAT_EQ(static_cast<float>(pol.clip_hi), 2.0f);
}

TEST(Codebook, TwoValuesTwoCentroidsIsExact) {
  const std::vector<float> w{1.0f, 1.0f, 2.0f, -0.5f, 2.0f, -0.5f};
  const auto cb = build_codebook(w, 3);
  EXPECT_EQ(cb.final_sse, 0.0);
  EXPECT_EQ(cb.decode(), w);
  const auto two = build_codebook(std::vector<float>{1.0f, 2.0f, 1.0f}, 16);
  EXPECT_EQ(two.k(), 2u);
  EXPECT_EQ(two.final_sse, 0.0);
}

TEST(Codebook, SingleCentroidIsTheMean) {
  const std::vector<float> w{0.25f, 0.5f, 1.0f, 2.25f};
  const auto cb = build_codebook(w, 1);
  ASSERT_EQ(cb.k(), 1u);
  EXPECT_EQ(cb.centroids[0], Half(1.0f));
  EXPECT_EQ(cb.index_bits(), 1u);
}

TEST(Codebook, LloydSseNeverIncreases) {
  std::mt19937_64 rng(4);
  std::vector<float> w(3000);
  for (auto& v : w) v = std::normal_distribution<float>(0.0f, 1.0f)(rng);
  for (std::size_t k : {4u, 16u, 64u}) {
    CodebookOptions o;
    o.seed = k;
    const auto cb = build_codebook(w, k, o);
    ASSERT_FALSE(cb.sse_history.empty());
    for (std::size_t i = 1; i < cb.sse_history.size(); ++i)
      EXPECT_LE(cb.sse_history[i], cb.sse_history[i - 1] * (1 + 1e-12));
    EXPECT_EQ(cb.assignments.size(), w.size());
  }
}

TEST(Codebook, RestartsNeverRaiseTheFittedSse) {
  std::mt19937_64 rng(6);
  std::vector<float> w(400);
  for (auto& v : w) v = std::normal_distribution<float>(0.0f, 1.0f)(rng);
  CodebookOptions one;
  one.restarts = 1;
  CodebookOptions many;
  many.restarts = 10;
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    one.seed = many.seed = seed;
    const auto a = build_codebook(w, 16, one), b = build_codebook(w, 16, many);
    EXPECT_LE(b.sse_history.back(), a.sse_history.back());
  }
}

TEST(Codebook, PinnedZeroOwnsExactlyTheZeros) {
  std::mt19937_64 rng(5);
  std::vector<float> w(500);
  for (auto& v : w) v = std::normal_distribution<float>(0.0f, 0.01f)(rng);
  for (std::size_t i = 0; i < w.size(); i += 3) w[i] = 0.0f;
  CodebookOptions o;
  o.pin_zero = true;
  const auto cb = build_codebook(w, 8, o);
  EXPECT_TRUE(cb.zero_pinned);
  EXPECT_EQ(cb.centroids[0].bits, 0u);
  for (std::size_t i = 0; i < w.size(); ++i) EXPECT_EQ(cb.assignments[i] == 0, w[i] == 0.0f) << i;
}

TEST(Codebook, PayloadSize) {
  EXPECT_EQ(codebook_payload_bits(1000, 16), 1000u * 4 + 16u * 16);
  EXPECT_EQ(codebook_payload_bits(10, 2), 10u * 1 + 2u * 16);
  EXPECT_EQ(codebook_payload_bits(10, 17), 10u * 5 + 17u * 16);
}

TEST(QuantScheme, ParseAndPrint) {
  for (const char* s : {"fixed:8", "affine:16", "codebook:16", "half"})
    EXPECT_EQ(QuantScheme::parse(s).to_string(), s);
  for (const char* s : {"fixed", "fixed:1", "affine:x", "codebook:0", "float:8", "fixed:8x"})
    EXPECT_THROW(QuantScheme::parse(s), ArgumentError) << s;
}

TEST(ApplyQuantization, FixedWeightsKeepZerosAndStayConsistent) {
  Model m = model_from_toynet(half_pruned_net());
  build_layer_csr(m.convs[1]);
  const Model orig = m;
  QuantizeOptions o;
  o.scheme = QuantScheme::parse("fixed:8");
  const auto rep = apply_quantization(m, o);
  ASSERT_EQ(rep.size(), 3u);  // two convs and the classifier
  EXPECT_EQ(rep.back().layer, "classifier");
  for (std::size_t l = 0; l < m.convs.size(); ++l) {
    const auto& L = m.convs[l];
    L.check_consistency();
    const auto w = L.weights.data(), w0 = orig.convs[l].weights.data();
    for (std::size_t i = 0; i < w.size(); ++i) {
      if (w0[i] == 0.0f) {
        std::uint32_t bits;
        std::memcpy(&bits, &w[i], 4);
        ASSERT_EQ(bits, 0u);
      } else if (w0[i] <= L.quant.fixed.highest()) {
        ASSERT_LE(std::abs(w[i] - w0[i]), L.quant.fixed.sigma / 2 + 1e-7);
      }
    }
    EXPECT_EQ(L.quant.scheme, "fixed");
  }
  m.validate();
}

TEST(ApplyQuantization, AllZeroLayerStaysZero) {
  ToyNet net = half_pruned_net();
  for (auto& v : net.conv(1).weights.data()) v = 0.0;
  Model m = model_from_toynet(net);
  for (const char* scheme : {"fixed:8", "affine:8", "half", "codebook:4"}) {
    Model q = m;
    QuantizeOptions o;
    o.scheme = QuantScheme::parse(scheme);
    apply_quantization(q, o);
    for (float v : q.convs[1].weights.data()) {
      std::uint32_t bits;
      std::memcpy(&bits, &v, 4);
      ASSERT_EQ(bits, 0u) << scheme;
    }
    q.validate();
  }
}

TEST(ApplyQuantization, CodebookAndHalfStorage) {
  Model m = model_from_toynet(half_pruned_net());
  Model cb = m;
  QuantizeOptions o;
  o.scheme = QuantScheme::parse("codebook:4");
  const auto rep = apply_quantization(cb, o);
  for (const auto& L : cb.convs) {
    EXPECT_EQ(L.storage, Storage::codebook);
    ASSERT_TRUE(L.codebook.has_value());
    EXPECT_LE(L.codebook->k(), 4u);
    L.check_consistency();
  }
  EXPECT_EQ(rep[0].codebook_k, cb.convs[0].codebook->k());

  Model h = m;
  o.scheme = QuantScheme::parse("half");
  apply_quantization(h, o);
  for (const auto& L : h.convs) {
    EXPECT_EQ(L.dtype, DType::f16);
    for (float v : L.weights.data()) ASSERT_EQ(round_to_half(v), v);
  }
}

TEST(ApplyQuantization, ActivationsNeedCalibrationAndNoCodebook) {
  Model m = model_from_toynet(half_pruned_net());
  const Dataset calib = small_calibration();
  QuantizeOptions o;
  o.scheme = QuantScheme::parse("codebook:4");
  o.activations = true;
  o.calibration = &calib;
  EXPECT_THROW(apply_quantization(m, o), ArgumentError);
  o.scheme = QuantScheme::parse("fixed:8");
  o.calibration = nullptr;
  EXPECT_THROW(apply_quantization(m, o), ArgumentError);

  o.calibration = &calib;
  o.calibration_samples = 16;
  o.weights = false;
  const auto rep = apply_quantization(m, o);
  bool saw_input = false;
  for (const auto& r : rep) saw_input |= r.layer == "conv0.input";
  EXPECT_TRUE(saw_input);
  for (const auto& L : m.convs) {
    EXPECT_TRUE(L.act.enabled());
    EXPECT_LE(L.act.clip_lo, L.act.clip_hi);
  }
  ModelRunner runner(m, all_dense_config(m));
  const double acc = runner.accuracy(calib);
  EXPECT_GE(acc, 0.0);
  EXPECT_LE(acc, 1.0);
}
