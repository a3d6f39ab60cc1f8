#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>

#include "scanet/adaptive_scale.hpp"
#include "scanet/context_attention.hpp"
#include "scanet/diff_pyramid.hpp"
#include "scanet/encoder.hpp"
#include "scanet/interaction.hpp"
#include "support.hpp"

using namespace scanet;
using scanet::testing::max_grad_error;
using scanet::testing::probe;
using scanet::testing::random_tensor;

namespace {

template <typename Module>
void zero_all_biases(Module& m) {
  for (auto& p : collect_params<double>(m))
    if (p.name.ends_with("bias")) std::fill(p.tensor->values().begin(), p.tensor->values().end(), 0.0);
}

FeaturePyramid<double> random_pyramid(const ModelConfig& cfg, int n, int base, std::mt19937_64& rng) {
  FeaturePyramid<double> p;
  for (int i = 0; i < 4; ++i) p[i] = random_tensor({n, cfg.level_channels[i], base >> i, base >> i}, rng);
  return p;
}

bool equal_values(const Tensor<double>& a, const Tensor<double>& b) {
  return a.shape() == b.shape() && std::equal(a.values().begin(), a.values().end(), b.values().begin());
}

// ---- encoder ----

class EncoderKinds : public ::testing::TestWithParam<BackboneKind> {};

TEST_P(EncoderKinds, PyramidSizesFollowStrides) {
  ModelConfig cfg = ModelConfig::tiny();
  cfg.backbone = GetParam();
  std::mt19937_64 rng(1);
  Encoder<double> enc(cfg, rng);
  auto pyr = enc.encode(random_tensor({2, 3, 64, 96}, rng));
  for (int i = 0; i < 4; ++i) {
    EXPECT_EQ(pyr[i].shape(), (Shape4{2, cfg.level_channels[i], 64 / cfg.level_strides[i], 96 / cfg.level_strides[i]}));
    EXPECT_TRUE(all_finite(std::span<const double>(pyr[i].values())));
  }
}

TEST_P(EncoderKinds, SharedWeightsGiveIdenticalPyramids) {
  ModelConfig cfg = ModelConfig::tiny();
  cfg.backbone = GetParam();
  std::mt19937_64 rng(2);
  Encoder<double> enc(cfg, rng);
  auto x = random_tensor({1, 3, 32, 32}, rng);
  auto [a, b] = enc.encode_pair(x, x);
  for (int i = 0; i < 4; ++i) EXPECT_TRUE(equal_values(a[i], b[i]));
  auto [c, d] = enc.encode_pair(x, random_tensor({1, 3, 32, 32}, rng));
  EXPECT_FALSE(equal_values(c[0], d[0]));
}

INSTANTIATE_TEST_SUITE_P(Backbones, EncoderKinds, ::testing::Values(BackboneKind::mix_transformer, BackboneKind::conv));

TEST(Encoder, RejectsSizesNotDivisibleBy32) {
  std::mt19937_64 rng(3);
  Encoder<double> enc(ModelConfig::tiny(), rng);
  EXPECT_THROW(enc.encode(Tensor<double>({1, 3, 250, 250})), ShapeError);
  EXPECT_THROW(enc.encode(Tensor<double>({1, 4, 64, 64})), ShapeError);
  EXPECT_THROW(enc.encode_pair(Tensor<double>({1, 3, 64, 64}), Tensor<double>({1, 3, 32, 32})), ShapeError);
}

TEST(Encoder, DefaultConfigAt256) {
  std::mt19937_64 rng(4);
  Encoder<float> enc(ModelConfig::desk(), rng);
  auto pyr = enc.encode(Tensor<float>({1, 3, 256, 256}, 0.5f));
  const int sizes[4] = {64, 32, 16, 8};
  for (int i = 0; i < 4; ++i) EXPECT_EQ(pyr[i].shape().h, sizes[i]);
}

// ---- interaction ----

TEST(Lpe, PreservesShapeAndGateRange) {
  std::mt19937_64 rng(5);
  Lpe<double> lpe(32, 4, rng);
  auto x = random_tensor({1, 32, 16, 16}, rng, -5, 5);
  EXPECT_EQ(lpe(x).shape(), x.shape());
  for (double g : lpe.gate(x).values()) {
    EXPECT_GT(g, 0.0);
    EXPECT_LT(g, 1.0);
  }
}

TEST(Lpe, ZeroInputWithZeroBiasesIsIdentity) {
  std::mt19937_64 rng(6);
  Lpe<double> lpe(8, 4, rng);
  zero_all_biases(lpe);
  Tensor<double> zero({1, 8, 6, 6});
  for (double v : lpe(zero).values()) EXPECT_EQ(v, 0.0);
}

TEST(Lpe, Gradient) {
  std::mt19937_64 rng(7);
  Lpe<double> lpe(4, 2, rng);
  auto x = random_tensor({1, 4, 5, 5}, rng);
  auto params = collect_params<double>(lpe);
  std::vector<Tensor<double>*> inputs{&x};
  for (auto& p : params) inputs.push_back(p.tensor);
  EXPECT_LT(max_grad_error<double>(inputs, [&] { return probe(lpe(x)); }), 1e-5);
}

TEST(Gdfa, InternalDimensionRule) {
  EXPECT_EQ(Gdfa<double>::internal_dim(256, 128, 2), 128);
  EXPECT_EQ(Gdfa<double>::internal_dim(128, 128, 2), 128);
  EXPECT_EQ(Gdfa<double>::internal_dim(64, 128, 2), 64);
}

TEST(Gdfa, LargeInputsStayFinite) {
  ModelConfig cfg;
  std::mt19937_64 rng(8);
  Gdfa<float> gdfa(256, cfg, rng);
  EXPECT_EQ(gdfa.internal_dim(), 128);
  auto f1 = random_tensor<float>({1, 256, 4, 4}, rng, -1e3, 1e3, true);
  auto f2 = random_tensor<float>({1, 256, 4, 4}, rng, -1e3, 1e3, true);
  std::mt19937_64 drop(1);
  auto [o1, o2] = gdfa(f1, f2, RunMode::train(drop));
  auto loss = add(sum(o1), sum(o2));
  loss.backward();
  EXPECT_TRUE(std::isfinite(loss.item()));
  EXPECT_TRUE(all_finite(std::span<const float>(f1.grad())));
  EXPECT_TRUE(all_finite(std::span<const float>(f2.grad())));
}

TEST(Gdfa, Gradient) {
  ModelConfig cfg;
  cfg.gdfa_reduction_threshold = 4;
  std::mt19937_64 rng(9);
  Gdfa<double> gdfa(8, cfg, rng);
  EXPECT_EQ(gdfa.internal_dim(), 4);
  auto f1 = random_tensor({2, 8, 3, 3}, rng);
  auto f2 = random_tensor({2, 8, 3, 3}, rng);
  std::vector<Tensor<double>*> inputs{&f1, &f2};
  for (auto& p : collect_params<double>(gdfa)) inputs.push_back(p.tensor);
  EXPECT_LT(max_grad_error<double>(inputs,
                                   [&] {
                                     auto [a, b] = gdfa(f1, f2);
                                     return add(probe(a, 1), probe(b, 2));
                                   }),
            1e-5);
}

TEST(Bi3, ShapesAndSymmetry) {
  ModelConfig cfg = ModelConfig::desk();
  cfg.bi3_iterations = 1;
  std::mt19937_64 rng(10);
  Bi3Layer<double> bi3(cfg, rng);
  auto p = random_pyramid(cfg, 1, 16, rng);
  auto [o1, o2] = bi3(p, p);
  for (int i = 0; i < 4; ++i) {
    EXPECT_EQ(o1[i].shape(), p[i].shape());
    EXPECT_TRUE(equal_values(o1[i], o2[i]));
  }
}

TEST(Bi3, DisabledIsIdentity) {
  ModelConfig cfg = ModelConfig::tiny();
  cfg.ablation.enhanced_bi3 = false;
  std::mt19937_64 rng(11);
  Bi3Layer<double> bi3(cfg, rng);
  EXPECT_TRUE(collect_params<double>(bi3).empty());
  auto p1 = random_pyramid(cfg, 1, 8, rng), p2 = random_pyramid(cfg, 1, 8, rng);
  auto [o1, o2] = bi3(p1, p2);
  for (int i = 0; i < 4; ++i) {
    EXPECT_TRUE(equal_values(o1[i], p1[i]));
    EXPECT_TRUE(equal_values(o2[i], p2[i]));
  }
}

TEST(Bi3, SharedIterationsReuseModules) {
  ModelConfig cfg = ModelConfig::tiny();
  cfg.bi3_iterations = 3;
  std::mt19937_64 r1(12), r2(12);
  Bi3Layer<double> separate(cfg, r1);
  cfg.bi3_shared_iterations = true;
  Bi3Layer<double> shared(cfg, r2);
  EXPECT_EQ(collect_params<double>(separate).size(), 3 * collect_params<double>(shared).size());
}

// ---- difference pyramid ----

TEST(Differences, ElementwiseAbsolute) {
  ModelConfig cfg = ModelConfig::tiny();
  std::mt19937_64 rng(13);
  auto p1 = random_pyramid(cfg, 1, 8, rng), p2 = random_pyramid(cfg, 1, 8, rng);
  p1[0].values()[0] = 3.0;
  p2[0].values()[0] = 1.0;
  p1[0].values()[1] = -2.0;
  p2[0].values()[1] = 1.0;
  auto d = compute_differences(p1, p2);
  EXPECT_EQ(d[0].values()[0], 2.0);
  EXPECT_EQ(d[0].values()[1], 3.0);
  for (const auto& level : d)
    for (double v : level.values()) EXPECT_GE(v, 0.0);
  for (const auto& level : compute_differences(p1, p1))
    for (double v : level.values()) EXPECT_EQ(v, 0.0);
}

class DpbFusionModes : public ::testing::TestWithParam<DpbFusion> {};

TEST_P(DpbFusionModes, IdenticalInputsWithZeroBiasesGiveZero) {
  ModelConfig cfg = ModelConfig::desk();
  cfg.dpb_fusion = GetParam();
  std::mt19937_64 rng(14);
  DifferencePyramidBlock<double> dpb(cfg, rng);
  zero_all_biases(dpb);
  auto p = random_pyramid(cfg, 1, 16, rng);
  auto out = dpb(p, p);
  for (int i = 0; i < 4; ++i) {
    EXPECT_EQ(out.refined[i].shape(), p[i].shape());
    for (double v : out.refined[i].values()) EXPECT_EQ(v, 0.0);
  }
}

TEST_P(DpbFusionModes, LevelFourPerturbationReachesEveryLevel) {
  ModelConfig cfg = ModelConfig::tiny();
  cfg.dpb_fusion = GetParam();
  std::mt19937_64 rng(15);
  DifferencePyramidBlock<double> dpb(cfg, rng);
  auto p1 = random_pyramid(cfg, 1, 16, rng), p2 = random_pyramid(cfg, 1, 16, rng);
  auto before = dpb(p1, p2);
  p1[3].values()[0] += 0.5;
  auto after = dpb(p1, p2);
  for (int i = 0; i < 4; ++i) {
    double delta = 0;
    for (std::size_t k = 0; k < after.refined[i].numel(); ++k)
      delta = std::max(delta, std::abs(after.refined[i].values()[k] - before.refined[i].values()[k]));
    EXPECT_GT(delta, 0.0) << "level " << i + 1;
  }
}

INSTANTIATE_TEST_SUITE_P(Fusion, DpbFusionModes, ::testing::Values(DpbFusion::add, DpbFusion::concat));

// ---- adaptive scale ----

TEST(MultiScaleShape, PreservesShape) {
  std::mt19937_64 rng(16);
  MultiScaleShape<double> m(128, true, rng);
  EXPECT_EQ(m(random_tensor({1, 128, 4, 4}, rng)).shape(), (Shape4{1, 128, 4, 4}));
}

TEST(MultiScaleShape, StripBranchesRespondAlongTheirAxis) {
  std::mt19937_64 rng(17);
  MultiScaleShape<double> m(2, true, rng);
  // Identity-like kernels: every tap copies channel i to channel i.
  for (int b : {3, 4}) {
    auto& conv = m.branch(b);
    auto& w = conv.weight();
    const Shape4 s = w.shape();
    for (int o = 0; o < s.n; ++o)
      for (int i = 0; i < s.c; ++i)
        for (int y = 0; y < s.h; ++y)
          for (int x = 0; x < s.w; ++x) w.at(o, i, y, x) = o == i ? 1.0 : 0.0;
    std::fill(conv.bias().values().begin(), conv.bias().values().end(), 0.0);
  }
  Tensor<double> stripe({1, 2, 11, 11});
  for (int x = 4; x <= 6; ++x) stripe.at(0, 0, 5, x) = 1.0;
  auto footprint = [](const Tensor<double>& t) {
    int y0 = 99, y1 = -1, x0 = 99, x1 = -1;
    for (int y = 0; y < t.shape().h; ++y)
      for (int x = 0; x < t.shape().w; ++x)
        if (t.at(0, 0, y, x) != 0.0) {
          y0 = std::min(y0, y), y1 = std::max(y1, y), x0 = std::min(x0, x), x1 = std::max(x1, x);
        }
    return std::pair{y1 - y0 + 1, x1 - x0 + 1};
  };
  const auto horizontal = footprint(m.branch(3)(stripe));
  const auto vertical = footprint(m.branch(4)(stripe));
  EXPECT_EQ(horizontal, (std::pair{1, 7}));
  EXPECT_EQ(vertical, (std::pair{5, 3}));
}

TEST(MultiScaleShape, DilatedBranchReceptiveField) {
  std::mt19937_64 rng(18);
  MultiScaleShape<double> m(1, true, rng);
  const Conv2dSpec& s = m.branch(2).spec();
  EXPECT_EQ((s.kernel_h - 1) * s.dilation_h + 1, 7);
  EXPECT_EQ(m.branch(0).spec().dilation_h, 1);
  EXPECT_EQ(m.branch(1).spec().dilation_h, 2);
}

TEST(HighResEnhance, ShapeGateRangeAndParameterCount) {
  std::mt19937_64 rng(19);
  HighResEnhance<double> h(32, 4, rng);
  auto x = random_tensor({1, 32, 64, 64}, rng);
  EXPECT_EQ(h(x).shape(), x.shape());
  for (double g : h.gate(x).values()) {
    EXPECT_GT(g, 0.0);
    EXPECT_LT(g, 1.0);
  }
  std::size_t separable = 0;
  for (auto& p : collect_params<double>(h))
    if (p.name.starts_with("depthwise.weight") || p.name.starts_with("pointwise.weight")) separable += p.tensor->numel();
  EXPECT_EQ(separable, 32u * 9 + 32u * 32);
}

TEST(AdaptiveScale, RoutingAndAblation) {
  ModelConfig cfg = ModelConfig::tiny();
  std::mt19937_64 rng(20);
  AdaptiveScale<double> on(cfg, rng);
  auto p = random_pyramid(cfg, 1, 16, rng);
  auto out = on(p);
  const LevelTag expected[4] = {LevelTag::high_res, LevelTag::high_res, LevelTag::shape_aware, LevelTag::shape_aware};
  for (int i = 0; i < 4; ++i) {
    EXPECT_EQ(out.tags[i], expected[i]);
    EXPECT_EQ(out.levels[i].shape(), p[i].shape());
  }
  cfg.ablation.adaptive_multiscale = false;
  AdaptiveScale<double> off(cfg, rng);
  EXPECT_TRUE(collect_params<double>(off).empty());
  auto same = off(p);
  for (int i = 0; i < 4; ++i) EXPECT_TRUE(equal_values(same.levels[i], p[i]));
}

// ---- context attention ----

TEST(Ppm, FusionWidthAndShape) {
  std::mt19937_64 rng(21);
  Ppm<double> ppm(256, 256, {1, 2, 3, 6}, true, rng);
  EXPECT_EQ(ppm.fusion_in_channels(), 512);
  EXPECT_EQ(ppm(random_tensor({1, 256, 8, 8}, rng)).shape(), (Shape4{1, 256, 8, 8}));
}

TEST(Ppm, TinyInputWithLargeBin) {
  std::mt19937_64 rng(22);
  Ppm<double> ppm(16, 16, {1, 2, 3, 6}, true, rng);
  auto y = ppm(random_tensor({1, 16, 2, 2}, rng));
  EXPECT_EQ(y.shape(), (Shape4{1, 16, 2, 2}));
  EXPECT_TRUE(all_finite(std::span<const double>(y.values())));
}

TEST(Ppm, ConstantInputInteriorIsUniform) {
  std::mt19937_64 rng(23);
  Ppm<double> ppm(8, 8, {1, 2, 3, 6}, true, rng);
  auto y = ppm(Tensor<double>({1, 8, 9, 9}, 0.7));
  // The 3x3 fusion sees zero padding at the border, so compare interior cells.
  for (int c = 0; c < 8; ++c)
    for (int r = 1; r < 8; ++r)
      for (int x = 1; x < 8; ++x) EXPECT_NEAR(y.at(0, c, r, x), y.at(0, c, 1, 1), 1e-12);
}

TEST(Ppm, Gradient) {
  std::mt19937_64 rng(24);
  Ppm<double> ppm(4, 4, {1, 2, 3}, true, rng);
  auto x = random_tensor({1, 4, 4, 4}, rng);
  std::vector<Tensor<double>*> inputs{&x};
  for (auto& p : collect_params<double>(ppm)) inputs.push_back(p.tensor);
  EXPECT_LT(max_grad_error<double>(inputs, [&] { return probe(ppm(x)); }), 1e-5);
}

TEST(CsaGate, GatesBoundOutput) {
  std::mt19937_64 rng(25);
  CsaGate<double> g(16, 4, 7, true, rng);
  auto x = random_tensor({2, 16, 8, 8}, rng, -3, 3);
  auto y = g(x);
  for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_LE(std::abs(y.values()[i]), std::abs(x.values()[i]));
  Tensor<double> zero({1, 16, 4, 4});
  for (double v : g(zero).values()) EXPECT_EQ(v, 0.0);
}

TEST(CsaGate, ChannelPermutationEquivariance) {
  std::mt19937_64 rng(26);
  CsaGate<double> a(4, 2, 3, true, rng);
  CsaGate<double> b(4, 2, 3, true, rng);
  const int perm[4] = {2, 0, 3, 1};
  // b gets a's parameters with channels permuted: squeeze input columns and excite output rows.
  std::ranges::copy(a.squeeze().bias().values(), b.squeeze().bias().values().begin());
  std::ranges::copy(a.spatial().weight().values(), b.spatial().weight().values().begin());
  std::ranges::copy(a.spatial().bias().values(), b.spatial().bias().values().begin());
  for (int h = 0; h < 2; ++h)
    for (int c = 0; c < 4; ++c) {
      b.squeeze().weight().at(h, perm[c], 0, 0) = a.squeeze().weight().at(h, c, 0, 0);
      b.excite().weight().at(perm[c], h, 0, 0) = a.excite().weight().at(c, h, 0, 0);
    }
  for (int c = 0; c < 4; ++c) b.excite().bias().values()[perm[c]] = a.excite().bias().values()[c];
  auto x = random_tensor({1, 4, 5, 5}, rng);
  Tensor<double> xp(x.shape());
  for (int c = 0; c < 4; ++c)
    for (int r = 0; r < 5; ++r)
      for (int s = 0; s < 5; ++s) xp.at(0, perm[c], r, s) = x.at(0, c, r, s);
  auto y = a(x), yp = b(xp);
  for (int c = 0; c < 4; ++c)
    for (int r = 0; r < 5; ++r)
      for (int s = 0; s < 5; ++s) EXPECT_NEAR(yp.at(0, perm[c], r, s), y.at(0, c, r, s), 1e-12);
}

TEST(CsaGate, DisabledIsIdentity) {
  std::mt19937_64 rng(27);
  CsaGate<double> g(8, 4, 7, false, rng);
  EXPECT_TRUE(collect_params<double>(g).empty());
  auto x = random_tensor({1, 8, 4, 4}, rng);
  EXPECT_TRUE(equal_values(g(x), x));
}

}  // namespace
