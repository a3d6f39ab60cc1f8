#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "scanet/config.hpp"
#include "scanet/data.hpp"
#include "scanet/losses.hpp"

namespace scanet {

class AugmentationError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Draw from Beta(a, b) as X / (X + Y) with X ~ Gamma(a), Y ~ Gamma(b).
inline double sample_beta(double a, double b, std::mt19937_64& rng) {
  const double x = std::gamma_distribution<double>(a, 1.0)(rng);
  const double y = std::gamma_distribution<double>(b, 1.0)(rng);
  return x + y > 0 ? x / (x + y) : 0.5;
}

// ---- geometric ----

struct CropBox {
  int y0 = 0, x0 = 0, h = 0, w = 0;  // h == 0 means no crop
  friend bool operator==(const CropBox&, const CropBox&) = default;
};

/// Applied in order: crop-resize, horizontal flip, vertical flip, then
/// `rot90` counter-clockwise quarter turns.
struct GeometricTransform {
  bool hflip = false;
  bool vflip = false;
  int rot90 = 0;
  CropBox crop;

  bool is_identity() const { return !hflip && !vflip && rot90 % 4 == 0 && crop.h == 0; }
  friend bool operator==(const GeometricTransform&, const GeometricTransform&) = default;
};

namespace detail {

// Maps output pixel (y, x) of an h x w raster to the source pixel for flips
// and quarter turns; the source has extent sh x sw.
struct PixelMap {
  bool hflip, vflip;
  int rot, sh, sw;

  void source(int y, int x, int& sy, int& sx) const {
    // Undo the rotation first (output -> flipped), then undo the flips.
    int fy = y, fx = x;
    switch (rot) {
      case 1: fy = x, fx = sw - 1 - y; break;  // out(y, x) = in(x, W-1-y)
      case 2: fy = sh - 1 - y, fx = sw - 1 - x; break;
      case 3: fy = sh - 1 - x, fx = y; break;
      default: break;
    }
    sy = vflip ? sh - 1 - fy : fy;
    sx = hflip ? sw - 1 - fx : fx;
  }
};

inline float bilinear_at(const Image& img, int c, double sy, double sx) {
  sy = std::clamp(sy, 0.0, double(img.h - 1));
  sx = std::clamp(sx, 0.0, double(img.w - 1));
  const int y0 = int(std::floor(sy)), x0 = int(std::floor(sx));
  const int y1 = std::min(y0 + 1, img.h - 1), x1 = std::min(x0 + 1, img.w - 1);
  const double ly = sy - y0, lx = sx - x0;
  return float((1 - ly) * ((1 - lx) * img.at(c, y0, x0) + lx * img.at(c, y0, x1)) +
               ly * ((1 - lx) * img.at(c, y1, x0) + lx * img.at(c, y1, x1)));
}

inline Image crop_resize(const Image& img, const CropBox& box) {
  Image out(img.c, img.h, img.w);
  const double sy = double(box.h) / img.h, sx = double(box.w) / img.w;
  for (int c = 0; c < img.c; ++c)
    for (int y = 0; y < img.h; ++y)
      for (int x = 0; x < img.w; ++x) {
        const double py = std::clamp(box.y0 + (y + 0.5) * sy - 0.5, double(box.y0), double(box.y0 + box.h - 1));
        const double px = std::clamp(box.x0 + (x + 0.5) * sx - 0.5, double(box.x0), double(box.x0 + box.w - 1));
        out.at(c, y, x) = bilinear_at(img, c, py, px);
      }
  return out;
}

inline LabelMap crop_resize(const LabelMap& m, const CropBox& box) {
  LabelMap out(1, m.h, m.w);
  for (int y = 0; y < m.h; ++y)
    for (int x = 0; x < m.w; ++x) {
      const int py = box.y0 + std::min(box.h - 1, int(std::floor((y + 0.5) * box.h / m.h)));
      const int px = box.x0 + std::min(box.w - 1, int(std::floor((x + 0.5) * box.w / m.w)));
      out.at(y, x) = m.at(py, px);
    }
  return out;
}

inline Image remap(const Image& img, const PixelMap& pm) {
  const bool swap = pm.rot % 2 == 1;
  Image out(img.c, swap ? img.w : img.h, swap ? img.h : img.w);
  for (int c = 0; c < img.c; ++c)
    for (int y = 0; y < out.h; ++y)
      for (int x = 0; x < out.w; ++x) {
        int sy, sx;
        pm.source(y, x, sy, sx);
        out.at(c, y, x) = img.at(c, sy, sx);
      }
  return out;
}

inline LabelMap remap(const LabelMap& m, const PixelMap& pm) {
  const bool swap = pm.rot % 2 == 1;
  LabelMap out(1, swap ? m.w : m.h, swap ? m.h : m.w);
  for (int y = 0; y < out.h; ++y)
    for (int x = 0; x < out.w; ++x) {
      int sy, sx;
      pm.source(y, x, sy, sx);
      out.at(y, x) = m.at(sy, sx);
    }
  return out;
}

}  // namespace detail

/// Applies one transform with identical parameters to A, B and the mask
/// (nearest-neighbour for the mask, bilinear for images).
inline BitemporalSample apply_geometric(const BitemporalSample& s, const GeometricTransform& t) {
  BitemporalSample out = s;
  if (t.crop.h > 0) {
    const CropBox& b = t.crop;
    if (b.y0 < 0 || b.x0 < 0 || b.y0 + b.h > s.height() || b.x0 + b.w > s.width() || b.w <= 0)
      throw AugmentationError("crop box outside the sample");
    out.image_a = detail::crop_resize(out.image_a, b);
    out.image_b = detail::crop_resize(out.image_b, b);
    out.mask = detail::crop_resize(out.mask, b);
  }
  const int rot = ((t.rot90 % 4) + 4) % 4;
  if (t.hflip || t.vflip || rot != 0) {
    const detail::PixelMap pm{t.hflip, t.vflip, rot, out.height(), out.width()};
    out.image_a = detail::remap(out.image_a, pm);
    out.image_b = detail::remap(out.image_b, pm);
    out.mask = detail::remap(out.mask, pm);
  }
  return out;
}

/// Draws one transform from the enabled kinds. Quarter turns that would
/// change the extent of a non-square sample become half turns.
inline GeometricTransform sample_geometric(int h, int w, const AugmentationConfig& cfg, std::mt19937_64& rng) {
  std::vector<int> kinds;
  if (cfg.hflip) kinds.push_back(0);
  if (cfg.vflip) kinds.push_back(1);
  if (cfg.rot90) kinds.push_back(2);
  if (cfg.crop_resize) kinds.push_back(3);
  GeometricTransform t;
  if (kinds.empty()) return t;
  const int kind = kinds[std::uniform_int_distribution<std::size_t>(0, kinds.size() - 1)(rng)];
  std::uniform_real_distribution<double> u(0.0, 1.0);
  switch (kind) {
    case 0: t.hflip = true; break;
    case 1: t.vflip = true; break;
    case 2:
      t.rot90 = std::uniform_int_distribution<int>(1, 3)(rng);
      if (h != w && t.rot90 % 2 == 1) t.rot90 = 2;
      break;
    default: {
      const double scale = cfg.crop_min_scale + (1.0 - cfg.crop_min_scale) * u(rng);
      t.crop.h = std::max(1, int(std::lround(h * scale)));
      t.crop.w = std::max(1, int(std::lround(w * scale)));
      t.crop.y0 = std::uniform_int_distribution<int>(0, h - t.crop.h)(rng);
      t.crop.x0 = std::uniform_int_distribution<int>(0, w - t.crop.w)(rng);
    }
  }
  return t;
}

inline BitemporalSample geometric_pair(const BitemporalSample& s, const AugmentationConfig& cfg, std::mt19937_64& rng) {
  return apply_geometric(s, sample_geometric(s.height(), s.width(), cfg, rng));
}

// ---- batch-level mixing ----

/// A batch after mixing. `soft` is empty or holds one [K, h, w] distribution
/// per sample (MixUp); masks then carry the dominant sample's labels.
struct AugmentedBatch {
  std::vector<BitemporalSample> samples;
  std::vector<std::vector<float>> soft;

  bool has_soft() const { return !soft.empty(); }

  template <typename T>
  Target<T> target() const {
    std::vector<const LabelMap*> masks;
    for (const auto& s : samples) masks.push_back(&s.mask);
    Target<T> t{stack_masks(masks), {}};
    for (const auto& d : soft) t.soft.insert(t.soft.end(), d.begin(), d.end());
    return t;
  }
};

/// Box covering a (1 - lambda) share of the area, centred uniformly and
/// clipped to the image.
inline CropBox cutmix_box(int h, int w, double lambda, std::mt19937_64& rng) {
  const double r = std::sqrt(std::clamp(1.0 - lambda, 0.0, 1.0));
  const int bh = int(std::lround(h * r)), bw = int(std::lround(w * r));
  const int cy = std::uniform_int_distribution<int>(0, h - 1)(rng);
  const int cx = std::uniform_int_distribution<int>(0, w - 1)(rng);
  const int y0 = std::clamp(cy - bh / 2, 0, h), y1 = std::clamp(cy - bh / 2 + bh, 0, h);
  const int x0 = std::clamp(cx - bw / 2, 0, w), x1 = std::clamp(cx - bw / 2 + bw, 0, w);
  return {y0, x0, y1 - y0, x1 - x0};
}

/// Pastes the box region of `donor` into `s` in A, B and mask alike.
inline BitemporalSample paste_box(const BitemporalSample& s, const BitemporalSample& donor, const CropBox& box) {
  BitemporalSample out = s;
  for (int y = box.y0; y < box.y0 + box.h; ++y)
    for (int x = box.x0; x < box.x0 + box.w; ++x) {
      for (int c = 0; c < s.image_a.c; ++c) {
        out.image_a.at(c, y, x) = donor.image_a.at(c, y, x);
        out.image_b.at(c, y, x) = donor.image_b.at(c, y, x);
      }
      out.mask.at(y, x) = donor.mask.at(y, x);
    }
  return out;
}

/// Convex combination lambda * s + (1 - lambda) * other applied to both
/// dates; returns the soft target and keeps the dominant hard mask.
inline BitemporalSample blend_pair(const BitemporalSample& s, const BitemporalSample& other, double lambda,
                                   int num_classes, std::vector<float>& soft) {
  BitemporalSample out = s;
  const float l = float(lambda), m = float(1.0 - lambda);
  for (std::size_t i = 0; i < s.image_a.data.size(); ++i) {
    out.image_a.data[i] = l * s.image_a.data[i] + m * other.image_a.data[i];
    out.image_b.data[i] = l * s.image_b.data[i] + m * other.image_b.data[i];
  }
  const std::size_t plane = s.mask.plane();
  soft.assign(std::size_t(num_classes) * plane, 0.f);
  for (std::size_t i = 0; i < plane; ++i) {
    soft[std::size_t(s.mask.labels[i]) * plane + i] += l;
    soft[std::size_t(other.mask.labels[i]) * plane + i] += m;
  }
  if (lambda < 0.5) out.mask = other.mask;
  return out;
}

namespace detail {
inline void require_pairs(const std::vector<BitemporalSample>& batch, const char* op) {
  if (batch.size() < 2) throw AugmentationError(std::string(op) + ": batch too small, need at least 2 samples");
  for (const auto& s : batch)
    if (s.height() != batch.front().height() || s.width() != batch.front().width())
      throw AugmentationError(std::string(op) + ": samples differ in size");
}

// Partner j = (i + shift) mod n with a random non-zero shift.
inline std::size_t partner_shift(std::size_t n, std::mt19937_64& rng) {
  return std::uniform_int_distribution<std::size_t>(1, n - 1)(rng);
}
}  // namespace detail

/// Each sample i takes a box from partner (i + shift) mod n; box area follows
/// Beta(alpha, alpha). Labels stay hard.
inline AugmentedBatch cutmix_pair(const std::vector<BitemporalSample>& batch, double alpha, std::mt19937_64& rng) {
  detail::require_pairs(batch, "cutmix_pair");
  const std::size_t n = batch.size(), shift = detail::partner_shift(n, rng);
  AugmentedBatch out;
  for (std::size_t i = 0; i < n; ++i) {
    const double lambda = sample_beta(alpha, alpha, rng);
    const CropBox box = cutmix_box(batch[i].height(), batch[i].width(), lambda, rng);
    out.samples.push_back(paste_box(batch[i], batch[(i + shift) % n], box));
  }
  return out;
}

/// Each sample i blends with partner (i + shift) mod n under its own
/// lambda ~ Beta(alpha, alpha), shared by both dates.
inline AugmentedBatch mixup_pair(const std::vector<BitemporalSample>& batch, double alpha, int num_classes,
                                 std::mt19937_64& rng) {
  detail::require_pairs(batch, "mixup_pair");
  const std::size_t n = batch.size(), shift = detail::partner_shift(n, rng);
  AugmentedBatch out;
  out.soft.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double lambda = sample_beta(alpha, alpha, rng);
    out.samples.push_back(blend_pair(batch[i], batch[(i + shift) % n], lambda, num_classes, out.soft[i]));
  }
  return out;
}

/// Brightness/contrast change drawn independently for each image.
inline void photometric_jitter(Image& img, double amplitude, std::mt19937_64& rng) {
  if (amplitude <= 0) return;
  std::uniform_real_distribution<double> u(-amplitude, amplitude);
  const float brightness = float(u(rng)), contrast = float(1.0 + u(rng));
  for (float& v : img.data) v = std::clamp((v - 0.5f) * contrast + 0.5f + brightness, 0.f, 1.f);
}

enum class BatchOp { none, geometric, cutmix, mixup };

inline const char* to_string(BatchOp op) {
  switch (op) {
    case BatchOp::geometric: return "geometric";
    case BatchOp::cutmix: return "cutmix";
    case BatchOp::mixup: return "mixup";
    default: return "none";
  }
}

/// Picks at most one op per batch with the configured probabilities.
/// Mixing ops fall back to none for single-sample batches.
inline BatchOp choose_op(const AugmentationConfig& cfg, std::size_t batch_size, std::mt19937_64& rng) {
  const double u = std::uniform_real_distribution<double>(0.0, 1.0)(rng);
  if (u < cfg.p_geometric) return BatchOp::geometric;
  if (u < cfg.p_geometric + cfg.p_cutmix) return batch_size >= 2 ? BatchOp::cutmix : BatchOp::none;
  if (u < cfg.p_geometric + cfg.p_cutmix + cfg.p_mixup) return batch_size >= 2 ? BatchOp::mixup : BatchOp::none;
  return BatchOp::none;
}

/// Full per-batch pipeline; the same (batch, config, seed) always gives the
/// same output.
inline AugmentedBatch augment_batch(const std::vector<BitemporalSample>& batch, const AugmentationConfig& cfg,
                                    int num_classes, std::uint64_t seed, BatchOp* chosen = nullptr) {
  std::mt19937_64 rng(seed);
  AugmentedBatch out;
  const BatchOp op = cfg.enabled ? choose_op(cfg, batch.size(), rng) : BatchOp::none;
  if (chosen) *chosen = op;
  switch (op) {
    case BatchOp::geometric:
      for (const auto& s : batch) out.samples.push_back(geometric_pair(s, cfg, rng));
      break;
    case BatchOp::cutmix: out = cutmix_pair(batch, cfg.cutmix_alpha, rng); break;
    case BatchOp::mixup: out = mixup_pair(batch, cfg.mixup_alpha, num_classes, rng); break;
    default: out.samples = batch;
  }
  if (cfg.enabled)
    for (auto& s : out.samples) {
      photometric_jitter(s.image_a, cfg.photometric_jitter, rng);
      photometric_jitter(s.image_b, cfg.photometric_jitter, rng);
    }
  return out;
}

}  // namespace scanet
