#pragma once

#include <string>
#include <vector>

#include "scanet/encoder.hpp"

namespace scanet {

/// Pyramid pooling: per bin, adaptive average pool, 1x1 to C/4, bilinear
/// upsample back; concatenated with the input and fused by a 3x3 convolution.
template <typename T>
class Ppm {
 public:
  Ppm(int channels, int out_channels, const std::vector<int>& bins, bool enabled, std::mt19937_64& rng)
      : channels_(channels), bins_(bins), enabled_(enabled) {
    if (!enabled_) return;
    if (channels % 4 != 0) throw ShapeError("PPM: channels must be divisible by 4");
    for (std::size_t i = 0; i < bins.size(); ++i) reduce_.emplace_back(channels, channels / 4, Conv2dSpec{}, rng);
    fuse_ = Conv2d<T>(fusion_in_channels(), out_channels, Conv2dSpec::same(3, 3), rng);
  }

  /// Channel count entering the final fusion convolution.
  int fusion_in_channels() const { return channels_ + int(bins_.size()) * (channels_ / 4); }

  Tensor<T> operator()(const Tensor<T>& x) const {
    if (!enabled_) return x;
    const Shape4 s = x.shape();
    if (s.c != channels_) throw ShapeError("PPM: expected " + std::to_string(channels_) + " channels, got " + s.str());
    std::vector<Tensor<T>> parts{x};
    for (std::size_t i = 0; i < bins_.size(); ++i) {
      const Tensor<T> pooled = gelu(reduce_[i](adaptive_avg_pool(x, bins_[i], bins_[i])));
      parts.push_back(upsample_bilinear(pooled, s.h, s.w));
    }
    return fuse_(concat_channels<T>(parts));
  }

  bool enabled() const { return enabled_; }

  void collect(ParamCollector<T>& pc) {
    for (std::size_t i = 0; i < reduce_.size(); ++i) pc.child("bin" + std::to_string(bins_[i]), reduce_[i]);
    if (enabled_) pc.child("fuse", fuse_);
  }

 private:
  int channels_;
  std::vector<int> bins_;
  bool enabled_;
  std::vector<Conv2d<T>> reduce_;
  Conv2d<T> fuse_;
};

/// Channel-then-spatial multiplicative gate in the CBAM arrangement.
template <typename T>
class CsaGate {
 public:
  struct Gates {
    Tensor<T> channel;  // [n, c, 1, 1]
    Tensor<T> spatial;  // [n, 1, h, w]
  };

  CsaGate(int channels, int reduction, int spatial_kernel, bool enabled, std::mt19937_64& rng)
      : channels_(channels), enabled_(enabled) {
    if (!enabled_) return;
    const int hidden = std::max(1, channels / reduction);
    squeeze_ = Conv2d<T>(channels, hidden, Conv2dSpec{}, rng);
    excite_ = Conv2d<T>(hidden, channels, Conv2dSpec{}, rng);
    spatial_ = Conv2d<T>(2, 1, Conv2dSpec::same(spatial_kernel, spatial_kernel), rng);
  }

  Tensor<T> operator()(const Tensor<T>& x) const {
    if (!enabled_) return x;
    const Gates g = gates(x);
    return mul(mul(x, g.channel), g.spatial);
  }

  Gates gates(const Tensor<T>& x) const {
    if (x.shape().c != channels_)
      throw ShapeError("CSAGate: expected " + std::to_string(channels_) + " channels, got " + x.shape().str());
    auto mlp = [&](const Tensor<T>& v) { return excite_(gelu(squeeze_(v))); };
    Gates g;
    g.channel = sigmoid(add(mlp(adaptive_avg_pool(x, 1, 1)), mlp(spatial_max(x))));
    const Tensor<T> refined = mul(x, g.channel);
    g.spatial = sigmoid(spatial_(concat_channels<T>({channel_mean(refined), channel_max(refined)})));
    return g;
  }

  bool enabled() const { return enabled_; }
  Conv2d<T>& squeeze() { return squeeze_; }
  Conv2d<T>& excite() { return excite_; }
  Conv2d<T>& spatial() { return spatial_; }

  void collect(ParamCollector<T>& pc) {
    if (!enabled_) return;
    pc.child("channel_squeeze", squeeze_);
    pc.child("channel_excite", excite_);
    pc.child("spatial", spatial_);
  }

 private:
  int channels_;
  bool enabled_;
  Conv2d<T> squeeze_, excite_, spatial_;
};

}  // namespace scanet
