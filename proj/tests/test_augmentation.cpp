#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "scanet/augmentation.hpp"

using namespace scanet;

namespace {

BitemporalSample random_sample(std::mt19937_64& rng, int h, int w, bool same_dates = false) {
  std::uniform_real_distribution<float> u(0.f, 1.f);
  BitemporalSample s;
  s.id = "r";
  s.image_a = Image(3, h, w);
  for (float& v : s.image_a.data) v = u(rng);
  s.image_b = s.image_a;
  if (!same_dates)
    for (float& v : s.image_b.data) v = u(rng);
  s.mask = LabelMap(1, h, w);
  for (int& v : s.mask.labels) v = std::uniform_int_distribution<int>(0, 2)(rng);
  return s;
}

// Plain index arithmetic for a counter-clockwise quarter turn.
LabelMap rotate_ccw(const LabelMap& m) {
  LabelMap out(1, m.w, m.h);
  for (int i = 0; i < out.h; ++i)
    for (int j = 0; j < out.w; ++j) out.at(i, j) = m.at(j, m.w - 1 - i);
  return out;
}

}  // namespace

TEST(Beta, MomentsMatch) {
  std::mt19937_64 rng(1);
  for (double a : {0.2, 1.0, 3.0}) {
    double sum = 0, sq = 0;
    const int n = 40000;
    for (int i = 0; i < n; ++i) {
      const double x = sample_beta(a, a, rng);
      ASSERT_GE(x, 0.0);
      ASSERT_LE(x, 1.0);
      sum += x;
      sq += x * x;
    }
    const double mean = sum / n, var = sq / n - mean * mean;
    EXPECT_NEAR(mean, 0.5, 0.01) << a;
    EXPECT_NEAR(var, 1.0 / (4 * (2 * a + 1)), 0.01) << a;
  }
}

TEST(Geometric, IdentityLeavesSampleUnchanged) {
  std::mt19937_64 rng(2);
  const auto s = random_sample(rng, 8, 12);
  const auto out = apply_geometric(s, GeometricTransform{});
  EXPECT_EQ(out.image_a, s.image_a);
  EXPECT_EQ(out.image_b, s.image_b);
  EXPECT_EQ(out.mask, s.mask);
}

TEST(Geometric, HorizontalFlipMirrorsColumns) {
  std::mt19937_64 rng(3);
  const auto s = random_sample(rng, 6, 9);
  GeometricTransform t;
  t.hflip = true;
  const auto out = apply_geometric(s, t);
  for (int r = 0; r < 6; ++r)
    for (int c = 0; c < 9; ++c) {
      EXPECT_EQ(out.mask.at(r, c), s.mask.at(r, 8 - c));
      EXPECT_EQ(out.image_b.at(1, r, c), s.image_b.at(1, r, 8 - c));
    }
  t = {};
  t.vflip = true;
  const auto v = apply_geometric(s, t);
  for (int r = 0; r < 6; ++r)
    for (int c = 0; c < 9; ++c) EXPECT_EQ(v.mask.at(r, c), s.mask.at(5 - r, c));
}

TEST(Geometric, QuarterTurnsMatchIndexArithmetic) {
  std::mt19937_64 rng(4);
  const auto s = random_sample(rng, 5, 7);
  LabelMap expected = s.mask;
  for (int k = 1; k <= 4; ++k) {
    expected = rotate_ccw(expected);
    GeometricTransform t;
    t.rot90 = k;
    const auto out = apply_geometric(s, t);
    EXPECT_EQ(out.mask, expected) << k;
    EXPECT_EQ(out.image_a.h, out.mask.h);
  }
  EXPECT_EQ(expected, s.mask);
}

TEST(Geometric, FullCropIsIdentityAndMaskStaysNearest) {
  std::mt19937_64 rng(5);
  const auto s = random_sample(rng, 16, 16);
  GeometricTransform t;
  t.crop = {0, 0, 16, 16};
  const auto full = apply_geometric(s, t);
  EXPECT_EQ(full.mask, s.mask);
  for (std::size_t i = 0; i < s.image_a.data.size(); ++i) EXPECT_NEAR(full.image_a.data[i], s.image_a.data[i], 1e-6);

  t.crop = {4, 2, 8, 8};
  const auto zoom = apply_geometric(s, t);
  for (int y = 0; y < 16; ++y)
    for (int x = 0; x < 16; ++x) EXPECT_EQ(zoom.mask.at(y, x), s.mask.at(4 + y / 2, 2 + x / 2));
  t.crop = {10, 0, 8, 8};
  EXPECT_THROW(apply_geometric(s, t), AugmentationError);
}

TEST(Geometric, NonSquareSamplesKeepTheirExtent) {
  std::mt19937_64 rng(6);
  AugmentationConfig cfg;
  cfg.hflip = cfg.vflip = cfg.crop_resize = false;
  for (int i = 0; i < 50; ++i) {
    const auto t = sample_geometric(8, 16, cfg, rng);
    EXPECT_EQ(t.rot90 % 2, 0);
  }
}

TEST(CutMix, BoxRegionComesFromDonor) {
  std::mt19937_64 rng(7);
  const auto s = random_sample(rng, 12, 12), d = random_sample(rng, 12, 12);
  const CropBox box{3, 4, 5, 6};
  const auto out = paste_box(s, d, box);
  for (int y = 0; y < 12; ++y)
    for (int x = 0; x < 12; ++x) {
      const bool in = y >= 3 && y < 8 && x >= 4 && x < 10;
      EXPECT_EQ(out.mask.at(y, x), in ? d.mask.at(y, x) : s.mask.at(y, x));
      EXPECT_EQ(out.image_a.at(2, y, x), in ? d.image_a.at(2, y, x) : s.image_a.at(2, y, x));
      EXPECT_EQ(out.image_b.at(0, y, x), in ? d.image_b.at(0, y, x) : s.image_b.at(0, y, x));
    }
}

TEST(CutMix, EmptyAndFullBoxes) {
  std::mt19937_64 rng(8);
  const auto s = random_sample(rng, 10, 10), d = random_sample(rng, 10, 10);
  const CropBox empty = cutmix_box(10, 10, 1.0, rng);
  EXPECT_EQ(empty.h * empty.w, 0);
  const auto same = paste_box(s, d, empty);
  EXPECT_EQ(same.mask, s.mask);
  EXPECT_EQ(same.image_a, s.image_a);
  const auto swapped = paste_box(s, d, {0, 0, 10, 10});
  EXPECT_EQ(swapped.mask, d.mask);
  EXPECT_EQ(swapped.image_a, d.image_a);
  EXPECT_EQ(swapped.image_b, d.image_b);
}

TEST(CutMix, BoxAreaTracksLambda) {
  std::mt19937_64 rng(9);
  for (double lambda : {0.5, 0.75, 0.9}) {
    // Only unclipped boxes keep the exact area.
    double area = 0;
    int kept = 0;
    for (int i = 0; i < 200; ++i) {
      const CropBox b = cutmix_box(64, 64, lambda, rng);
      if (b.y0 > 0 && b.x0 > 0 && b.y0 + b.h < 64 && b.x0 + b.w < 64) {
        area += double(b.h * b.w) / (64 * 64);
        ++kept;
      }
    }
    ASSERT_GT(kept, 0);
    EXPECT_NEAR(area / kept, 1 - lambda, 0.03) << lambda;
  }
}

TEST(MixUp, HalfLambdaGivesEvenSoftTarget) {
  BitemporalSample s, o;
  s.image_a = s.image_b = Image(3, 1, 1, 0.f);
  o.image_a = o.image_b = Image(3, 1, 1, 1.f);
  o.image_b.data = {0.2f, 0.4f, 0.6f};
  s.mask = LabelMap(1, 1, 1, 1);
  o.mask = LabelMap(1, 1, 1, 2);
  std::vector<float> soft;
  const auto out = blend_pair(s, o, 0.5, 3, soft);
  EXPECT_EQ(soft, (std::vector<float>{0.f, 0.5f, 0.5f}));
  EXPECT_FLOAT_EQ(out.image_a.data[0], 0.5f);
  EXPECT_FLOAT_EQ(out.image_b.data[2], 0.3f);

  const auto one = blend_pair(s, o, 1.0, 3, soft);
  EXPECT_EQ(one.image_a, s.image_a);
  EXPECT_EQ(one.image_b, s.image_b);
  EXPECT_EQ(one.mask, s.mask);
  EXPECT_EQ(soft, (std::vector<float>{0.f, 1.f, 0.f}));

  blend_pair(s, o, 0.3, 3, soft);
  EXPECT_EQ(blend_pair(s, o, 0.3, 3, soft).mask, o.mask);
}

TEST(MixUp, SameLambdaOnBothDates) {
  std::mt19937_64 rng(10);
  std::vector<BitemporalSample> batch{random_sample(rng, 6, 6), random_sample(rng, 6, 6)};
  const auto out = mixup_pair(batch, 0.2, 3, rng);
  for (std::size_t i = 0; i < 2; ++i) {
    const auto& s = batch[i];
    const auto& o = batch[1 - i];
    // Recover lambda from A and check B obeys it.
    std::size_t k = 0;
    while (std::abs(s.image_a.data[k] - o.image_a.data[k]) < 0.2f) ++k;
    const double lambda = (out.samples[i].image_a.data[k] - o.image_a.data[k]) / (s.image_a.data[k] - o.image_a.data[k]);
    for (std::size_t j = 0; j < s.image_b.data.size(); ++j)
      EXPECT_NEAR(out.samples[i].image_b.data[j], lambda * s.image_b.data[j] + (1 - lambda) * o.image_b.data[j], 1e-4);
  }
}

TEST(Mixing, BatchOfOneIsRejected) {
  std::mt19937_64 rng(11);
  std::vector<BitemporalSample> batch{random_sample(rng, 4, 4)};
  EXPECT_THROW(cutmix_pair(batch, 1.0, rng), AugmentationError);
  EXPECT_THROW(mixup_pair(batch, 0.2, 3, rng), AugmentationError);
}

TEST(Pipeline, CoordinationAndValidityOverRandomDraws) {
  std::mt19937_64 rng(12);
  AugmentationConfig cfg;
  cfg.photometric_jitter = 0.0;
  int seen[4] = {0, 0, 0, 0};
  for (int draw = 0; draw < 200; ++draw) {
    std::vector<BitemporalSample> batch;
    for (int i = 0; i < 3; ++i) batch.push_back(random_sample(rng, 16, 16, true));
    BatchOp op;
    const auto out = augment_batch(batch, cfg, 3, rng(), &op);
    ++seen[int(op)];
    for (const auto& s : out.samples) {
      EXPECT_EQ(s.image_a, s.image_b);
      EXPECT_NO_THROW(check_labels(s.mask, 3, "mask"));
    }
    for (const auto& d : out.soft) {
      const std::size_t plane = 16 * 16;
      for (std::size_t p = 0; p < plane; ++p) EXPECT_NEAR(d[p] + d[plane + p] + d[2 * plane + p], 1.f, 1e-6);
    }
  }
  EXPECT_EQ(seen[int(BatchOp::none)], 0);
  EXPECT_GT(seen[int(BatchOp::geometric)], 70);
  EXPECT_GT(seen[int(BatchOp::cutmix)], 35);
  EXPECT_GT(seen[int(BatchOp::mixup)], 20);
}

TEST(Pipeline, SameSeedSameBatch) {
  std::mt19937_64 rng(13);
  std::vector<BitemporalSample> batch;
  for (int i = 0; i < 4; ++i) batch.push_back(random_sample(rng, 8, 8));
  AugmentationConfig cfg;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const auto x = augment_batch(batch, cfg, 3, seed), y = augment_batch(batch, cfg, 3, seed);
    ASSERT_EQ(x.samples.size(), y.samples.size());
    for (std::size_t i = 0; i < x.samples.size(); ++i) {
      EXPECT_EQ(x.samples[i].image_a, y.samples[i].image_a);
      EXPECT_EQ(x.samples[i].image_b, y.samples[i].image_b);
      EXPECT_EQ(x.samples[i].mask, y.samples[i].mask);
    }
    EXPECT_EQ(x.soft, y.soft);
  }
}

TEST(Pipeline, JitterActsPerImage) {
  std::mt19937_64 rng(14);
  std::vector<BitemporalSample> batch{random_sample(rng, 8, 8, true), random_sample(rng, 8, 8, true)};
  AugmentationConfig cfg;
  cfg.p_geometric = cfg.p_cutmix = cfg.p_mixup = 0.0;
  const auto out = augment_batch(batch, cfg, 3, 5);
  EXPECT_NE(out.samples[0].image_a, out.samples[0].image_b);
  EXPECT_EQ(out.samples[0].mask, batch[0].mask);
  cfg.enabled = false;
  EXPECT_EQ(augment_batch(batch, cfg, 3, 5).samples[0].image_a, batch[0].image_a);
}

TEST(Pipeline, TargetCarriesSoftLabels) {
  std::mt19937_64 rng(15);
  std::vector<BitemporalSample> batch{random_sample(rng, 4, 4), random_sample(rng, 4, 4)};
  const auto mixed = mixup_pair(batch, 0.2, 3, rng);
  const auto t = mixed.target<double>();
  EXPECT_EQ(t.hard.n, 2);
  EXPECT_EQ(t.soft.size(), 2u * 3 * 16);
  EXPECT_FALSE(cutmix_pair(batch, 1.0, rng).target<double>().has_soft());
}
