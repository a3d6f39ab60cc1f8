#include <gtest/gtest.h>

#include "scanet/ops.hpp"
#include "support.hpp"

using namespace scanet;
using scanet::testing::max_grad_error;
using scanet::testing::probe;
using scanet::testing::random_tensor;

namespace {

constexpr double kTol = 1e-6;

TEST(Ops, BroadcastArithmeticGradients) {
  std::mt19937_64 rng(1);
  auto a = random_tensor({2, 3, 4, 5}, rng);
  auto gate = random_tensor({2, 3, 1, 1}, rng);
  auto spatial = random_tensor({2, 1, 4, 5}, rng);
  EXPECT_LT(max_grad_error<double>({&a, &gate, &spatial},
                                   [&] { return probe(add(mul(a, gate), sub(spatial, a))); }),
            kTol);
}

TEST(Ops, IncompatibleBroadcastThrows) {
  Tensor<double> a({1, 3, 4, 4}), b({1, 2, 4, 4});
  EXPECT_THROW(add(a, b), ShapeError);
}

TEST(Ops, PointwiseNonlinearityGradients) {
  std::mt19937_64 rng(2);
  auto a = random_tensor({1, 2, 3, 3}, rng, -3, 3);
  auto b = random_tensor({1, 2, 3, 3}, rng, -3, 3);
  EXPECT_LT(max_grad_error<double>({&a, &b}, [&] { return probe(add(gelu(a), sigmoid(abs_diff(a, b)))); }), kTol);
}

TEST(Ops, GeluMatchesDefinition) {
  Tensor<double> x({1, 1, 1, 3}, {-1.0, 0.0, 2.0});
  auto y = gelu(x);
  EXPECT_NEAR(y.values()[0], -0.15865525393145705, 1e-12);
  EXPECT_EQ(y.values()[1], 0.0);
  EXPECT_NEAR(y.values()[2], 1.9544997361036416, 1e-12);
}

struct ConvCase {
  Shape4 input;
  int out;
  Conv2dSpec spec;
};

class ConvGradient : public ::testing::TestWithParam<ConvCase> {};

TEST_P(ConvGradient, MatchesFiniteDifferences) {
  const ConvCase& cc = GetParam();
  std::mt19937_64 rng(3);
  auto x = random_tensor(cc.input, rng);
  auto w = random_tensor({cc.out, cc.input.c / cc.spec.groups, cc.spec.kernel_h, cc.spec.kernel_w}, rng);
  auto b = random_tensor({1, cc.out, 1, 1}, rng);
  EXPECT_LT(max_grad_error<double>({&x, &w, &b}, [&] { return probe(conv2d(x, w, b, cc.spec)); }), kTol);
}

INSTANTIATE_TEST_SUITE_P(Specs, ConvGradient,
                         ::testing::Values(ConvCase{{2, 3, 5, 5}, 4, Conv2dSpec::same(3, 3)},
                                           ConvCase{{1, 2, 8, 8}, 3, Conv2dSpec::strided(3, 2, 1)},
                                           ConvCase{{1, 2, 7, 7}, 2, Conv2dSpec::same(3, 3, 2)},
                                           ConvCase{{1, 2, 6, 6}, 2, Conv2dSpec::same(1, 5)},
                                           ConvCase{{1, 4, 5, 5}, 4, Conv2dSpec::same(3, 3, 1, 4)},
                                           ConvCase{{2, 3, 4, 4}, 5, Conv2dSpec{}},
                                           ConvCase{{1, 3, 8, 8}, 2, Conv2dSpec::strided(7, 4, 3)}));

TEST(Ops, ConvMatchesDirectSum) {
  std::mt19937_64 rng(4);
  auto x = random_tensor({1, 2, 5, 6}, rng);
  auto w = random_tensor({3, 2, 3, 3}, rng);
  const Conv2dSpec spec = Conv2dSpec::same(3, 3, 2);
  auto y = conv2d(x, w, Tensor<double>(), spec);
  for (int o = 0; o < 3; ++o)
    for (int r = 0; r < 5; ++r)
      for (int c = 0; c < 6; ++c) {
        double acc = 0;
        for (int i = 0; i < 2; ++i)
          for (int ky = 0; ky < 3; ++ky)
            for (int kx = 0; kx < 3; ++kx) {
              const int yy = r - 2 + 2 * ky, xx = c - 2 + 2 * kx;
              if (yy >= 0 && yy < 5 && xx >= 0 && xx < 6) acc += x.at(0, i, yy, xx) * w.at(o, i, ky, kx);
            }
        EXPECT_NEAR(y.at(0, o, r, c), acc, 1e-12);
      }
}

TEST(Ops, LayerNormGradient) {
  std::mt19937_64 rng(5);
  auto x = random_tensor({2, 5, 3, 2}, rng);
  auto g = random_tensor({1, 5, 1, 1}, rng);
  auto b = random_tensor({1, 5, 1, 1}, rng);
  EXPECT_LT(max_grad_error<double>({&x, &g, &b}, [&] { return probe(layer_norm_channels(x, g, b)); }), 1e-5);
}

TEST(Ops, ResamplingGradients) {
  std::mt19937_64 rng(6);
  auto x = random_tensor({1, 2, 3, 4}, rng);
  EXPECT_LT(max_grad_error<double>({&x}, [&] { return probe(upsample_bilinear(x, 7, 8)); }), kTol);
  EXPECT_LT(max_grad_error<double>({&x}, [&] { return probe(adaptive_avg_pool(x, 2, 3)); }), kTol);
  EXPECT_LT(max_grad_error<double>({&x}, [&] { return probe(adaptive_avg_pool(x, 6, 6)); }), kTol);
}

TEST(Ops, BilinearUpsampleOfConstantIsConstant) {
  Tensor<double> x({1, 1, 2, 2}, 3.5);
  const auto y = upsample_bilinear(x, 9, 5);
  for (double v : y.values()) EXPECT_DOUBLE_EQ(v, 3.5);
}

TEST(Ops, BilinearUpsampleHalfPixelCentres) {
  Tensor<double> x({1, 1, 1, 2}, {0.0, 1.0});
  auto y = upsample_bilinear(x, 1, 4);
  // Output centres map to -0.25 (clamped), 0.25, 0.75, 1.25 (clamped to the edge).
  EXPECT_DOUBLE_EQ(y.values()[0], 0.0);
  EXPECT_DOUBLE_EQ(y.values()[1], 0.25);
  EXPECT_DOUBLE_EQ(y.values()[2], 0.75);
  EXPECT_DOUBLE_EQ(y.values()[3], 1.0);
}

TEST(Ops, AdaptivePoolLargerThanInputReplicates) {
  Tensor<double> x({1, 1, 2, 2}, {1, 2, 3, 4});
  auto y = adaptive_avg_pool(x, 6, 6);
  EXPECT_EQ(y.shape(), (Shape4{1, 1, 6, 6}));
  EXPECT_DOUBLE_EQ(y.at(0, 0, 0, 0), 1.0);
  EXPECT_DOUBLE_EQ(y.at(0, 0, 5, 5), 4.0);
}

TEST(Ops, ReductionGradients) {
  std::mt19937_64 rng(7);
  auto x = random_tensor({2, 3, 3, 3}, rng);
  EXPECT_LT(max_grad_error<double>({&x}, [&] { return probe(spatial_max(x)); }), kTol);
  EXPECT_LT(max_grad_error<double>({&x}, [&] { return probe(channel_mean(x)); }), kTol);
  EXPECT_LT(max_grad_error<double>({&x}, [&] { return probe(channel_max(x)); }), kTol);
  auto y = random_tensor({2, 2, 3, 3}, rng);
  EXPECT_LT(max_grad_error<double>({&x, &y},
                                   [&] { return probe(slice_channels(concat_channels<double>({x, y, x}), 2, 4)); }),
            kTol);
}

TEST(Ops, AttentionGradient) {
  std::mt19937_64 rng(8);
  auto q = random_tensor({2, 4, 3, 2}, rng);
  auto k = random_tensor({2, 4, 2, 2}, rng);
  auto v = random_tensor({2, 6, 2, 2}, rng);
  AttentionSpec spec{2, 0.5, 0.0};
  EXPECT_LT(max_grad_error<double>({&q, &k, &v}, [&] { return probe(attention(q, k, v, spec)); }), kTol);
}

TEST(Ops, AttentionWithDropoutGradientUnderFixedMask) {
  std::mt19937_64 rng(9);
  auto q = random_tensor({1, 2, 3, 3}, rng);
  auto k = random_tensor({1, 2, 3, 3}, rng);
  auto v = random_tensor({1, 3, 3, 3}, rng);
  AttentionSpec spec{1, 0.7, 0.3};
  auto build = [&] {
    std::mt19937_64 mask_rng(42);
    return probe(attention(q, k, v, spec, &mask_rng));
  };
  EXPECT_LT(max_grad_error<double>({&q, &k, &v}, build), kTol);
}

TEST(Ops, AttentionRowsAreConvexCombinations) {
  // With values equal to a constant, every output equals that constant.
  std::mt19937_64 rng(10);
  auto q = random_tensor({1, 3, 2, 2}, rng, -50, 50);
  auto k = random_tensor({1, 3, 2, 2}, rng, -50, 50);
  Tensor<double> v({1, 1, 2, 2}, 2.0);
  const auto out = attention(q, k, v, AttentionSpec{});
  for (double o : out.values()) EXPECT_NEAR(o, 2.0, 1e-12);
}

TEST(Ops, NoGradGuardSkipsGraph) {
  Tensor<double> a({1, 1, 2, 2}, 1.0);
  a.set_requires_grad(true);
  NoGradGuard guard;
  auto b = add(a, a);
  EXPECT_FALSE(b.requires_grad());
}

}  // namespace
