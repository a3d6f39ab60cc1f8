#pragma once

#include <array>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "scanet/adaptive_scale.hpp"
#include "scanet/context_attention.hpp"
#include "scanet/diff_pyramid.hpp"
#include "scanet/encoder.hpp"
#include "scanet/interaction.hpp"

namespace scanet {

/// FPN-style top-down decoder ending in a 1x1 classifier at input resolution.
template <typename T>
class Decoder {
 public:
  Decoder(const ModelConfig& cfg, std::mt19937_64& rng) {
    const int d = cfg.decoder_channels;
    for (int i = 0; i < 4; ++i) lateral_[i] = Conv2d<T>(cfg.level_channels[i], d, Conv2dSpec{}, rng);
    for (int i = 0; i < 3; ++i) smooth_[i] = Conv2d<T>(d, d, Conv2dSpec::same(3, 3), rng);
    classifier_ = Conv2d<T>(d, cfg.num_classes, Conv2dSpec{}, rng);
  }

  Tensor<T> operator()(const FeaturePyramid<T>& fused, int out_h, int out_w) const {
    Tensor<T> p = lateral_[3](fused[3]);
    for (int i = 2; i >= 0; --i) {
      const Shape4 s = fused[i].shape();
      p = gelu(smooth_[i](add(upsample_bilinear(p, s.h, s.w), lateral_[i](fused[i]))));
    }
    return classifier_(upsample_bilinear(p, out_h, out_w));
  }

  void collect(ParamCollector<T>& pc) {
    for (int i = 0; i < 4; ++i) pc.child("lateral" + std::to_string(i + 1), lateral_[i]);
    for (int i = 0; i < 3; ++i) pc.child("smooth" + std::to_string(i + 1), smooth_[i]);
    pc.child("classifier", classifier_);
  }

 private:
  std::array<Conv2d<T>, 4> lateral_;
  std::array<Conv2d<T>, 3> smooth_;
  Conv2d<T> classifier_;
};

template <typename T>
struct ForwardOutput {
  Tensor<T> logits;      // [n, num_classes, H, W]
  Tensor<T> contrast_a;  // interaction output of stream A at the contrastive level
  Tensor<T> contrast_b;
};

/// The full change detector.
///
/// encode_pair -> BI3 -> (adaptive processing on the stream mean || DPB)
/// -> per-level concat + 1x1 fusion -> CSAGate -> PPM on level 4 -> decoder.
template <typename T>
class ScaNet {
 public:
  /// Top-level submodule names, in forward order.
  static const std::vector<std::string>& submodule_names() {
    static const std::vector<std::string> names{"encoder", "bi3",     "adaptive", "dpb",
                                                "fusion",  "csagate", "ppm",      "decoder"};
    return names;
  }

  explicit ScaNet(const ModelConfig& cfg)
      : cfg_(validate(cfg)),
        rng_(cfg.init_seed),
        encoder_(cfg_, rng_),
        bi3_(cfg_, rng_),
        adaptive_(cfg_, rng_),
        ppm_(cfg_.level_channels[3], cfg_.level_channels[3], cfg_.ppm_bins, cfg_.ablation.attention, rng_),
        decoder_(cfg_, rng_) {
    if (cfg_.ablation.dpb) dpb_.emplace(cfg_, rng_);
    for (int i = 0; i < 4; ++i) {
      const int c = cfg_.level_channels[i];
      fusion_[i] = Conv2d<T>(2 * c, c, Conv2dSpec{}, rng_);
      csa_.emplace_back(c, cfg_.attention_reduction, cfg_.spatial_kernel, cfg_.ablation.attention, rng_);
    }
  }

  ScaNet(ScaNet&&) = default;
  ScaNet& operator=(ScaNet&&) = default;

  const ModelConfig& config() const { return cfg_; }

  ForwardOutput<T> forward(const Tensor<T>& a, const Tensor<T>& b, const RunMode& mode = RunMode::eval()) const {
    auto [p1, p2] = encoder_.encode_pair(a, b, mode);
    auto [q1, q2] = bi3_(p1, p2, mode);
    FeaturePyramid<T> mean_stream;
    for (int i = 0; i < 4; ++i) mean_stream[i] = scale(add(q1[i], q2[i]), T(0.5));
    const ProcessedPyramid<T> processed = adaptive_(mean_stream);
    const DifferencePyramid<T> diffs = differences(q1, q2);
    FeaturePyramid<T> fused = fuse_streams(processed, diffs);
    fused[3] = ppm_(fused[3]);
    ForwardOutput<T> out;
    out.logits = decoder_(fused, a.shape().h, a.shape().w);
    out.contrast_a = q1[cfg_.contrastive_level - 1];
    out.contrast_b = q2[cfg_.contrastive_level - 1];
    return out;
  }

  Tensor<T> logits(const Tensor<T>& a, const Tensor<T>& b, const RunMode& mode = RunMode::eval()) const {
    return forward(a, b, mode).logits;
  }

  /// DPB output, or the raw differences as both fields when DPB is ablated.
  DifferencePyramid<T> differences(const FeaturePyramid<T>& q1, const FeaturePyramid<T>& q2) const {
    if (dpb_) return (*dpb_)(q1, q2);
    DifferencePyramid<T> d;
    d.raw = compute_differences(q1, q2);
    d.refined = d.raw;
    return d;
  }

  /// Per level: concat(refined difference, processed feature) -> 1x1 -> CSAGate.
  FeaturePyramid<T> fuse_streams(const ProcessedPyramid<T>& processed, const DifferencePyramid<T>& diffs) const {
    FeaturePyramid<T> out;
    for (int i = 0; i < 4; ++i) {
      if (!(processed.levels[i].shape() == diffs.refined[i].shape()))
        throw ShapeError("fuse_streams: level " + std::to_string(i + 1) + " shapes differ: " +
                         processed.levels[i].shape().str() + " vs " + diffs.refined[i].shape().str());
      out[i] = csa_[i](fusion_[i](concat_channels<T>({diffs.refined[i], processed.levels[i]})));
    }
    return out;
  }

  const Encoder<T>& encoder() const { return encoder_; }
  const Bi3Layer<T>& bi3() const { return bi3_; }
  const AdaptiveScale<T>& adaptive() const { return adaptive_; }
  const std::optional<DifferencePyramidBlock<T>>& dpb() const { return dpb_; }
  const Ppm<T>& ppm() const { return ppm_; }
  const Decoder<T>& decoder() const { return decoder_; }

  void collect(ParamCollector<T>& pc) {
    pc.child("encoder", encoder_);
    pc.child("bi3", bi3_);
    pc.child("adaptive", adaptive_);
    if (dpb_) pc.child("dpb", *dpb_);
    for (int i = 0; i < 4; ++i) pc.child("fusion.level" + std::to_string(i + 1), fusion_[i]);
    for (int i = 0; i < 4; ++i) pc.child("csagate.level" + std::to_string(i + 1), csa_[i]);
    pc.child("ppm", ppm_);
    pc.child("decoder", decoder_);
  }

  std::vector<NamedParam<T>> parameters() { return collect_params<T>(*this); }

  std::size_t parameter_count() {
    std::size_t n = 0;
    for (auto& p : parameters()) n += p.tensor->numel();
    return n;
  }

  /// Parameter count per top-level submodule (all names present, zero when ablated).
  std::map<std::string, std::size_t> parameter_counts() {
    std::map<std::string, std::size_t> out;
    for (const auto& name : submodule_names()) out[name] = 0;
    for (auto& p : parameters()) out[p.name.substr(0, p.name.find('.'))] += p.tensor->numel();
    return out;
  }

  void zero_biases() {
    for (auto& p : parameters()) {
      const std::string& n = p.name;
      if (n.size() >= 5 && n.compare(n.size() - 5, 5, ".bias") == 0)
        std::fill(p.tensor->values().begin(), p.tensor->values().end(), T(0));
    }
  }

  void zero_grad() {
    for (auto& p : parameters()) p.tensor->zero_grad();
  }

 private:
  ModelConfig cfg_;
  std::mt19937_64 rng_;
  Encoder<T> encoder_;
  Bi3Layer<T> bi3_;
  AdaptiveScale<T> adaptive_;
  std::optional<DifferencePyramidBlock<T>> dpb_;
  std::array<Conv2d<T>, 4> fusion_;
  std::vector<CsaGate<T>> csa_;
  Ppm<T> ppm_;
  Decoder<T> decoder_;
};

}  // namespace scanet
