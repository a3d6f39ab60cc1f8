#pragma once

#include <array>
#include <string>
#include <vector>

#include "scanet/encoder.hpp"

namespace scanet {

template <typename T>
struct DifferencePyramid {
  std::array<Tensor<T>, 4> raw;
  std::array<Tensor<T>, 4> refined;
};

/// Per-level |F1 - F2|.
template <typename T>
std::array<Tensor<T>, 4> compute_differences(const FeaturePyramid<T>& p1, const FeaturePyramid<T>& p2) {
  if (!same_shapes(p1, p2)) throw ShapeError("compute_differences: pyramid shapes differ");
  std::array<Tensor<T>, 4> d;
  for (int i = 0; i < 4; ++i) d[i] = abs_diff(p1[i], p2[i]);
  return d;
}

/// Difference pyramid block: 1x1 refinement of every raw difference, then a
/// top-down pass where each level receives the upsampled, channel-projected
/// refined map from the level below it and is smoothed by a 3x3 convolution.
template <typename T>
class DifferencePyramidBlock {
 public:
  DifferencePyramidBlock(const ModelConfig& cfg, std::mt19937_64& rng) : fusion_(cfg.dpb_fusion) {
    const auto& ch = cfg.level_channels;
    for (int i = 0; i < 4; ++i) initial_[i] = Conv2d<T>(ch[i], ch[i], Conv2dSpec{}, rng);
    for (int i = 0; i < 3; ++i) {
      lateral_[i] = Conv2d<T>(ch[i + 1], ch[i], Conv2dSpec{}, rng);
      const int smooth_in = fusion_ == DpbFusion::concat ? 2 * ch[i] : ch[i];
      smooth_[i] = Conv2d<T>(smooth_in, ch[i], Conv2dSpec::same(3, 3), rng);
    }
  }

  DifferencePyramid<T> operator()(const FeaturePyramid<T>& p1, const FeaturePyramid<T>& p2) const {
    return refine(compute_differences(p1, p2));
  }

  DifferencePyramid<T> refine(const std::array<Tensor<T>, 4>& raw) const {
    DifferencePyramid<T> out;
    out.raw = raw;
    std::array<Tensor<T>, 4> init;
    for (int i = 0; i < 4; ++i) init[i] = initial_[i](raw[i]);
    out.refined[3] = init[3];
    for (int i = 2; i >= 0; --i) {
      const Shape4 s = init[i].shape();
      const Tensor<T> from_below = lateral_[i](upsample_bilinear(out.refined[i + 1], s.h, s.w));
      const Tensor<T> merged =
          fusion_ == DpbFusion::concat ? concat_channels<T>({init[i], from_below}) : add(init[i], from_below);
      out.refined[i] = smooth_[i](merged);
    }
    return out;
  }

  void collect(ParamCollector<T>& pc) {
    for (int i = 0; i < 4; ++i) pc.child("init" + std::to_string(i + 1), initial_[i]);
    for (int i = 0; i < 3; ++i) {
      pc.child("lateral" + std::to_string(i + 1), lateral_[i]);
      pc.child("smooth" + std::to_string(i + 1), smooth_[i]);
    }
  }

 private:
  DpbFusion fusion_;
  std::array<Conv2d<T>, 4> initial_;
  std::array<Conv2d<T>, 3> lateral_;
  std::array<Conv2d<T>, 3> smooth_;
};

}  // namespace scanet
