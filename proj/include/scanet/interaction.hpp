#pragma once

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "scanet/encoder.hpp"

namespace scanet {

/// Local perception enhancement: 3x3, 5x1 and 1x5 branches, 1x1 fusion,
/// squeeze-and-excitation recalibration, residual add.
template <typename T>
class Lpe {
 public:
  Lpe(int channels, int reduction, std::mt19937_64& rng)
      : channels_(channels),
        square_(channels, channels, Conv2dSpec::same(3, 3), rng),
        vertical_(channels, channels, Conv2dSpec::same(5, 1), rng),
        horizontal_(channels, channels, Conv2dSpec::same(1, 5), rng),
        fuse_(3 * channels, channels, Conv2dSpec{}, rng),
        se_(channels, reduction, rng) {}

  Tensor<T> operator()(const Tensor<T>& x) const {
    const Tensor<T> fused = features(x);
    return add(x, mul(fused, se_(fused)));
  }

  /// The SE gate applied for input `x`, shape [n, c, 1, 1].
  Tensor<T> gate(const Tensor<T>& x) const { return se_(features(x)); }

  void collect(ParamCollector<T>& pc) {
    pc.child("conv3x3", square_);
    pc.child("conv5x1", vertical_);
    pc.child("conv1x5", horizontal_);
    pc.child("fuse", fuse_);
    pc.child("se", se_);
  }

 private:
  Tensor<T> features(const Tensor<T>& x) const {
    if (x.shape().c != channels_)
      throw ShapeError("LPE: expected " + std::to_string(channels_) + " channels, got " + x.shape().str());
    return fuse_(gelu(concat_channels<T>({square_(x), vertical_(x), horizontal_(x)})));
  }

  int channels_;
  Conv2d<T> square_, vertical_, horizontal_, fuse_;
  ChannelGate<T> se_;
};

/// Global difference fusion attention.
///
/// The query is projected from |f1 - f2|; keys and values are projected from
/// each stream with shared weights. Each stream receives, through a residual
/// add, the values of the other stream attended by the difference query.
/// Channel counts above the threshold attend in a reduced dimension.
template <typename T>
class Gdfa {
 public:
  static int internal_dim(int channels, int threshold, int factor) {
    return channels > threshold ? channels / factor : channels;
  }

  Gdfa(int channels, const ModelConfig& cfg, std::mt19937_64& rng)
      : channels_(channels),
        dim_(internal_dim(channels, cfg.gdfa_reduction_threshold, cfg.gdfa_reduction_factor)),
        dropout_(cfg.gdfa_dropout),
        query_(channels, dim_, Conv2dSpec{}, rng, true, true),
        key_(channels, dim_, Conv2dSpec{}, rng, true, true),
        value_(channels, dim_, Conv2dSpec{}, rng, true, true),
        out_(dim_, channels, Conv2dSpec{}, rng, true, true) {}

  std::pair<Tensor<T>, Tensor<T>> operator()(const Tensor<T>& f1, const Tensor<T>& f2,
                                             const RunMode& mode = RunMode::eval()) const {
    if (!(f1.shape() == f2.shape()))
      throw ShapeError("GDFA: stream shapes differ: " + f1.shape().str() + " vs " + f2.shape().str());
    if (f1.shape().c != channels_)
      throw ShapeError("GDFA: expected " + std::to_string(channels_) + " channels, got " + f1.shape().str());
    const Tensor<T> q = query_(abs_diff(f1, f2));
    AttentionSpec spec;
    spec.scale = 1.0 / std::sqrt(double(dim_));
    spec.dropout = mode.training ? dropout_ : 0.0;
    std::mt19937_64* rng = mode.training ? mode.rng : nullptr;
    const Tensor<T> from2 = attention(q, key_(f2), value_(f2), spec, rng);
    const Tensor<T> from1 = attention(q, key_(f1), value_(f1), spec, rng);
    Tensor<T> o1 = add(f1, out_(from2));
    Tensor<T> o2 = add(f2, out_(from1));
    if (!all_finite(std::span<const T>(o1.values())) || !all_finite(std::span<const T>(o2.values())))
      throw NumericalError("GDFA produced non-finite values at " + f1.shape().str());
    return {std::move(o1), std::move(o2)};
  }

  int internal_dim() const { return dim_; }

  void collect(ParamCollector<T>& pc) {
    pc.child("q", query_);
    pc.child("k", key_);
    pc.child("v", value_);
    pc.child("out", out_);
  }

 private:
  int channels_;
  int dim_;
  double dropout_;
  Conv2d<T> query_, key_, value_, out_;
};

/// Bi-temporal iterative interaction over all four pyramid levels.
/// Disabled by the `enhanced_bi3` ablation flag, in which case it has no
/// parameters and passes both pyramids through.
template <typename T>
class Bi3Layer {
 public:
  Bi3Layer(const ModelConfig& cfg, std::mt19937_64& rng)
      : enabled_(cfg.ablation.enhanced_bi3), iterations_(cfg.bi3_iterations) {
    if (!enabled_) return;
    const int distinct = cfg.bi3_shared_iterations ? 1 : cfg.bi3_iterations;
    for (int level = 0; level < 4; ++level) {
      const int c = cfg.level_channels[level];
      for (int it = 0; it < distinct; ++it) {
        lpe_[level].emplace_back(c, cfg.attention_reduction, rng);
        gdfa_[level].emplace_back(c, cfg, rng);
      }
    }
  }

  std::pair<FeaturePyramid<T>, FeaturePyramid<T>> operator()(const FeaturePyramid<T>& p1,
                                                             const FeaturePyramid<T>& p2,
                                                             const RunMode& mode = RunMode::eval()) const {
    if (!same_shapes(p1, p2)) throw ShapeError("BI3: pyramid shapes differ");
    if (!enabled_) return {p1, p2};
    FeaturePyramid<T> o1 = p1, o2 = p2;
    for (int level = 0; level < 4; ++level)
      for (int it = 0; it < iterations_; ++it) {
        const std::size_t k = lpe_[level].size() == 1 ? 0 : std::size_t(it);
        const Tensor<T> a = lpe_[level][k](o1[level]);
        const Tensor<T> b = lpe_[level][k](o2[level]);
        std::tie(o1[level], o2[level]) = gdfa_[level][k](a, b, mode);
      }
    return {o1, o2};
  }

  bool enabled() const { return enabled_; }
  const Gdfa<T>& gdfa(int level, int iteration = 0) const { return gdfa_[level][iteration]; }
  const Lpe<T>& lpe(int level, int iteration = 0) const { return lpe_[level][iteration]; }

  void collect(ParamCollector<T>& pc) {
    for (int level = 0; level < 4; ++level)
      for (std::size_t it = 0; it < lpe_[level].size(); ++it) {
        const std::string tag = "level" + std::to_string(level + 1) + ".iter" + std::to_string(it);
        pc.child(tag + ".lpe", lpe_[level][it]);
        pc.child(tag + ".gdfa", gdfa_[level][it]);
      }
  }

 private:
  bool enabled_;
  int iterations_;
  std::array<std::vector<Lpe<T>>, 4> lpe_;
  std::array<std::vector<Gdfa<T>>, 4> gdfa_;
};

}  // namespace scanet
