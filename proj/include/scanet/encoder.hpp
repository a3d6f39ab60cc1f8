#pragma once

#include <array>
#include <cmath>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "scanet/config.hpp"
#include "scanet/nn.hpp"

namespace scanet {

/// Four feature levels at strides 4, 8, 16 and 32 (level 1 is the finest).
template <typename T>
struct FeaturePyramid {
  std::array<Tensor<T>, 4> levels;

  Tensor<T>& operator[](int i) { return levels[i]; }
  const Tensor<T>& operator[](int i) const { return levels[i]; }
};

template <typename T>
bool same_shapes(const FeaturePyramid<T>& a, const FeaturePyramid<T>& b) {
  for (int i = 0; i < 4; ++i)
    if (!(a[i].shape() == b[i].shape())) return false;
  return true;
}

/// Anything mapping an image batch to a conforming four-level pyramid.
template <typename T>
class Backbone {
 public:
  virtual ~Backbone() = default;
  virtual FeaturePyramid<T> forward(const Tensor<T>& image, const RunMode& mode) const = 0;
  virtual void collect(ParamCollector<T>& pc) = 0;
  virtual std::string kind() const = 0;
};

/// Spatial-reduction self-attention: keys and values come from a strided
/// convolution of the input when the reduction ratio exceeds one.
template <typename T>
class EfficientSelfAttention {
 public:
  EfficientSelfAttention(int channels, int heads, int sr_ratio, std::mt19937_64& rng)
      : heads_(heads),
        channels_(channels),
        sr_ratio_(sr_ratio),
        query_(channels, channels, Conv2dSpec{}, rng, true, true),
        key_(channels, channels, Conv2dSpec{}, rng, true, true),
        value_(channels, channels, Conv2dSpec{}, rng, true, true),
        proj_(channels, channels, Conv2dSpec{}, rng, true, true) {
    if (sr_ratio > 1) {
      reduce_ = Conv2d<T>(channels, channels, Conv2dSpec::strided(sr_ratio, sr_ratio, 0), rng);
      reduce_norm_ = ChannelLayerNorm<T>(channels);
    }
  }

  Tensor<T> operator()(const Tensor<T>& x) const {
    const Tensor<T> q = query_(x);
    Tensor<T> source = x;
    if (sr_ratio_ > 1) source = reduce_norm_(reduce_(x));
    AttentionSpec spec;
    spec.heads = heads_;
    spec.scale = 1.0 / std::sqrt(double(channels_ / heads_));
    return proj_(attention(q, key_(source), value_(source), spec));
  }

  void collect(ParamCollector<T>& pc) {
    pc.child("q", query_);
    pc.child("k", key_);
    pc.child("v", value_);
    pc.child("proj", proj_);
    if (sr_ratio_ > 1) {
      pc.child("sr", reduce_);
      pc.child("sr_norm", reduce_norm_);
    }
  }

 private:
  int heads_;
  int channels_;
  int sr_ratio_;
  Conv2d<T> query_, key_, value_, proj_;
  Conv2d<T> reduce_;
  ChannelLayerNorm<T> reduce_norm_;
};

/// Mix-FFN: pointwise expand, depthwise 3x3, GELU, pointwise project.
template <typename T>
class MixFfn {
 public:
  MixFfn(int channels, int ratio, std::mt19937_64& rng)
      : expand_(channels, channels * ratio, Conv2dSpec{}, rng, true, true),
        depthwise_(channels * ratio, channels * ratio, Conv2dSpec::same(3, 3, 1, channels * ratio), rng),
        project_(channels * ratio, channels, Conv2dSpec{}, rng, true, true) {}

  Tensor<T> operator()(const Tensor<T>& x) const { return project_(gelu(depthwise_(expand_(x)))); }

  void collect(ParamCollector<T>& pc) {
    pc.child("fc1", expand_);
    pc.child("dwconv", depthwise_);
    pc.child("fc2", project_);
  }

 private:
  Conv2d<T> expand_, depthwise_, project_;
};

template <typename T>
class MitBlock {
 public:
  MitBlock(int channels, int heads, int sr_ratio, int mlp_ratio, std::mt19937_64& rng)
      : norm1_(channels), attn_(channels, heads, sr_ratio, rng), norm2_(channels), ffn_(channels, mlp_ratio, rng) {}

  Tensor<T> operator()(const Tensor<T>& x) const {
    const Tensor<T> y = add(x, attn_(norm1_(x)));
    return add(y, ffn_(norm2_(y)));
  }

  void collect(ParamCollector<T>& pc) {
    pc.child("norm1", norm1_);
    pc.child("attn", attn_);
    pc.child("norm2", norm2_);
    pc.child("ffn", ffn_);
  }

 private:
  ChannelLayerNorm<T> norm1_;
  EfficientSelfAttention<T> attn_;
  ChannelLayerNorm<T> norm2_;
  MixFfn<T> ffn_;
};

/// Hierarchical transformer encoder in the SegFormer (MiT) layout:
/// overlapping patch embedding, efficient self-attention and Mix-FFN per stage.
template <typename T>
class MixTransformer final : public Backbone<T> {
 public:
  MixTransformer(const ModelConfig& cfg, std::mt19937_64& rng) {
    int in = cfg.in_channels;
    for (int s = 0; s < 4; ++s) {
      const int c = cfg.level_channels[s];
      Stage stage;
      stage.embed = s == 0 ? Conv2d<T>(in, c, Conv2dSpec::strided(7, 4, 3), rng)
                           : Conv2d<T>(in, c, Conv2dSpec::strided(3, 2, 1), rng);
      stage.embed_norm = ChannelLayerNorm<T>(c);
      for (int d = 0; d < cfg.encoder_depths[s]; ++d)
        stage.blocks.emplace_back(c, cfg.encoder_heads[s], cfg.sr_ratios[s], cfg.mlp_ratio, rng);
      stage.out_norm = ChannelLayerNorm<T>(c);
      stages_.push_back(std::move(stage));
      in = c;
    }
  }

  FeaturePyramid<T> forward(const Tensor<T>& image, const RunMode&) const override {
    FeaturePyramid<T> out;
    Tensor<T> x = image;
    for (int s = 0; s < 4; ++s) {
      const Stage& st = stages_[s];
      x = st.embed_norm(st.embed(x));
      for (const auto& b : st.blocks) x = b(x);
      x = st.out_norm(x);
      out[s] = x;
    }
    return out;
  }

  void collect(ParamCollector<T>& pc) override {
    for (int s = 0; s < 4; ++s) pc.child("stage" + std::to_string(s + 1), stages_[s]);
  }

  std::string kind() const override { return "mix_transformer"; }

 private:
  struct Stage {
    Conv2d<T> embed;
    ChannelLayerNorm<T> embed_norm;
    std::vector<MitBlock<T>> blocks;
    ChannelLayerNorm<T> out_norm;

    void collect(ParamCollector<T>& pc) {
      pc.child("patch_embed", embed);
      pc.child("patch_norm", embed_norm);
      for (std::size_t i = 0; i < blocks.size(); ++i) pc.child("block" + std::to_string(i), blocks[i]);
      pc.child("norm", out_norm);
    }
  };
  std::vector<Stage> stages_;
};

/// Plain four-stage convolutional encoder with the same stride contract.
template <typename T>
class ConvBackbone final : public Backbone<T> {
 public:
  ConvBackbone(const ModelConfig& cfg, std::mt19937_64& rng) {
    int in = cfg.in_channels;
    for (int s = 0; s < 4; ++s) {
      const int c = cfg.level_channels[s];
      Stage st;
      st.down = s == 0 ? Conv2d<T>(in, c, Conv2dSpec::strided(7, 4, 3), rng)
                       : Conv2d<T>(in, c, Conv2dSpec::strided(3, 2, 1), rng);
      st.body = Conv2d<T>(c, c, Conv2dSpec::same(3, 3), rng);
      stages_.push_back(std::move(st));
      in = c;
    }
  }

  FeaturePyramid<T> forward(const Tensor<T>& image, const RunMode&) const override {
    FeaturePyramid<T> out;
    Tensor<T> x = image;
    for (int s = 0; s < 4; ++s) {
      x = gelu(stages_[s].down(x));
      x = add(x, gelu(stages_[s].body(x)));
      out[s] = x;
    }
    return out;
  }

  void collect(ParamCollector<T>& pc) override {
    for (int s = 0; s < 4; ++s) pc.child("stage" + std::to_string(s + 1), stages_[s]);
  }

  std::string kind() const override { return "conv"; }

 private:
  struct Stage {
    Conv2d<T> down, body;
    void collect(ParamCollector<T>& pc) {
      pc.child("down", down);
      pc.child("body", body);
    }
  };
  std::vector<Stage> stages_;
};

/// Siamese encoder: one parameter set applied to both temporal images.
template <typename T>
class Encoder {
 public:
  Encoder(const ModelConfig& cfg, std::mt19937_64& rng) : cfg_(cfg) {
    if (cfg.backbone == BackboneKind::conv)
      backbone_ = std::make_unique<ConvBackbone<T>>(cfg, rng);
    else
      backbone_ = std::make_unique<MixTransformer<T>>(cfg, rng);
  }

  Encoder(const ModelConfig& cfg, std::unique_ptr<Backbone<T>> backbone) : cfg_(cfg), backbone_(std::move(backbone)) {}

  FeaturePyramid<T> encode(const Tensor<T>& image, const RunMode& mode = RunMode::eval()) const {
    const Shape4 s = image.shape();
    if (s.n < 1) throw ShapeError("encode: empty batch");
    if (s.c != cfg_.in_channels)
      throw ShapeError("encode: expected " + std::to_string(cfg_.in_channels) + " channels, got " + s.str());
    if (s.h % 32 != 0 || s.w % 32 != 0)
      throw ShapeError("encode: height and width must be divisible by 32, got " + s.str());
    FeaturePyramid<T> pyr = backbone_->forward(image, mode);
    for (int i = 0; i < 4; ++i) {
      const Shape4 ls = pyr[i].shape();
      const int stride = cfg_.level_strides[i];
      if (ls.n != s.n || ls.c != cfg_.level_channels[i] || ls.h != s.h / stride || ls.w != s.w / stride)
        throw ShapeError("backbone level " + std::to_string(i + 1) + " has shape " + ls.str());
    }
    return pyr;
  }

  std::pair<FeaturePyramid<T>, FeaturePyramid<T>> encode_pair(const Tensor<T>& a, const Tensor<T>& b,
                                                              const RunMode& mode = RunMode::eval()) const {
    if (!(a.shape() == b.shape()))
      throw ShapeError("encode_pair: image shapes differ: " + a.shape().str() + " vs " + b.shape().str());
    return {encode(a, mode), encode(b, mode)};
  }

  void collect(ParamCollector<T>& pc) { backbone_->collect(pc); }
  const Backbone<T>& backbone() const { return *backbone_; }

 private:
  ModelConfig cfg_;
  std::unique_ptr<Backbone<T>> backbone_;
};

}  // namespace scanet
