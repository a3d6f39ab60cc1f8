#pragma once

#include <array>
#include <string>

#include "scanet/encoder.hpp"

namespace scanet {

/// Five parallel branches (3x3 at dilation 1, 2, 3; 1x5; 5x1), concatenated
/// and fused back to C channels, with an optional residual connection.
template <typename T>
class MultiScaleShape {
 public:
  static constexpr int kBranches = 5;

  MultiScaleShape(int channels, bool residual, std::mt19937_64& rng) : channels_(channels), residual_(residual) {
    branches_[0] = Conv2d<T>(channels, channels, Conv2dSpec::same(3, 3, 1), rng);
    branches_[1] = Conv2d<T>(channels, channels, Conv2dSpec::same(3, 3, 2), rng);
    branches_[2] = Conv2d<T>(channels, channels, Conv2dSpec::same(3, 3, 3), rng);
    branches_[3] = Conv2d<T>(channels, channels, Conv2dSpec::same(1, 5), rng);
    branches_[4] = Conv2d<T>(channels, channels, Conv2dSpec::same(5, 1), rng);
    fuse_ = Conv2d<T>(kBranches * channels, channels, Conv2dSpec{}, rng);
  }

  Tensor<T> operator()(const Tensor<T>& x) const {
    if (x.shape().c != channels_)
      throw ShapeError("MultiScaleShape: expected " + std::to_string(channels_) + " channels, got " + x.shape().str());
    std::vector<Tensor<T>> outs;
    for (const auto& b : branches_) outs.push_back(b(x));
    const Tensor<T> fused = fuse_(gelu(concat_channels(outs)));
    return residual_ ? add(x, fused) : fused;
  }

  /// Branch order: dilation 1, dilation 2, dilation 3, 1x5, 5x1.
  Conv2d<T>& branch(int i) { return branches_[i]; }
  const Conv2d<T>& branch(int i) const { return branches_[i]; }

  void collect(ParamCollector<T>& pc) {
    static constexpr const char* names[kBranches] = {"dilated1", "dilated2", "dilated3", "conv1x5", "conv5x1"};
    for (int i = 0; i < kBranches; ++i) pc.child(names[i], branches_[i]);
    pc.child("fuse", fuse_);
  }

 private:
  int channels_;
  bool residual_;
  std::array<Conv2d<T>, kBranches> branches_;
  Conv2d<T> fuse_;
};

/// Depthwise 3x3 + pointwise 1x1, then channel attention, residual add.
template <typename T>
class HighResEnhance {
 public:
  HighResEnhance(int channels, int reduction, std::mt19937_64& rng)
      : channels_(channels),
        depthwise_(channels, channels, Conv2dSpec::same(3, 3, 1, channels), rng),
        pointwise_(channels, channels, Conv2dSpec{}, rng),
        attention_(channels, reduction, rng) {}

  Tensor<T> operator()(const Tensor<T>& x) const {
    const Tensor<T> f = features(x);
    return add(x, mul(f, attention_(f)));
  }

  Tensor<T> gate(const Tensor<T>& x) const { return attention_(features(x)); }

  void collect(ParamCollector<T>& pc) {
    pc.child("depthwise", depthwise_);
    pc.child("pointwise", pointwise_);
    pc.child("channel_attention", attention_);
  }

 private:
  Tensor<T> features(const Tensor<T>& x) const {
    if (x.shape().c != channels_)
      throw ShapeError("HighResEnhance: expected " + std::to_string(channels_) + " channels, got " + x.shape().str());
    return gelu(pointwise_(depthwise_(x)));
  }

  int channels_;
  Conv2d<T> depthwise_, pointwise_;
  ChannelGate<T> attention_;
};

enum class LevelTag { identity, high_res, shape_aware };

inline const char* to_string(LevelTag t) {
  switch (t) {
    case LevelTag::high_res: return "high-res";
    case LevelTag::shape_aware: return "shape-aware";
    default: return "identity";
  }
}

template <typename T>
struct ProcessedPyramid {
  FeaturePyramid<T> levels;
  std::array<LevelTag, 4> tags{};
};

/// Routes levels 1-2 through HighResEnhance and levels 3-4 through
/// MultiScaleShape. With the `adaptive_multiscale` flag off it is the identity.
template <typename T>
class AdaptiveScale {
 public:
  AdaptiveScale(const ModelConfig& cfg, std::mt19937_64& rng) : enabled_(cfg.ablation.adaptive_multiscale) {
    if (!enabled_) return;
    for (int i = 0; i < 2; ++i) high_res_.emplace_back(cfg.level_channels[i], cfg.attention_reduction, rng);
    for (int i = 2; i < 4; ++i) shape_.emplace_back(cfg.level_channels[i], cfg.shape_residual, rng);
  }

  ProcessedPyramid<T> operator()(const FeaturePyramid<T>& pyr) const {
    ProcessedPyramid<T> out;
    if (!enabled_) {
      out.levels = pyr;
      out.tags.fill(LevelTag::identity);
      return out;
    }
    for (int i = 0; i < 2; ++i) {
      out.levels[i] = high_res_[i](pyr[i]);
      out.tags[i] = LevelTag::high_res;
    }
    for (int i = 2; i < 4; ++i) {
      out.levels[i] = shape_[i - 2](pyr[i]);
      out.tags[i] = LevelTag::shape_aware;
    }
    return out;
  }

  bool enabled() const { return enabled_; }
  MultiScaleShape<T>& shape_module(int level_index) { return shape_[level_index - 2]; }

  void collect(ParamCollector<T>& pc) {
    for (std::size_t i = 0; i < high_res_.size(); ++i) pc.child("level" + std::to_string(i + 1) + ".highres", high_res_[i]);
    for (std::size_t i = 0; i < shape_.size(); ++i) pc.child("level" + std::to_string(i + 3) + ".shape", shape_[i]);
  }

 private:
  bool enabled_;
  std::vector<HighResEnhance<T>> high_res_;
  std::vector<MultiScaleShape<T>> shape_;
};

}  // namespace scanet
