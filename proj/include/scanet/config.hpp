#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "scanet/schedule.hpp"

namespace scanet {

/// One switch per ablation group: BI3 interaction, adaptive multi-scale
/// processing, the difference pyramid and the PPM + CSAGate attention pair.
struct AblationFlags {
  bool enhanced_bi3 = true;
  bool adaptive_multiscale = true;
  bool dpb = true;
  bool attention = true;

  friend bool operator==(const AblationFlags&, const AblationFlags&) = default;
};

enum class BackboneKind { mix_transformer, conv };
enum class DpbFusion { add, concat };

struct ModelConfig {
  int num_classes = 3;
  int in_channels = 3;
  std::array<int, 4> level_channels{32, 64, 128, 256};
  std::array<int, 4> level_strides{4, 8, 16, 32};

  BackboneKind backbone = BackboneKind::mix_transformer;
  std::array<int, 4> encoder_depths{2, 2, 2, 2};
  std::array<int, 4> encoder_heads{1, 2, 4, 8};
  std::array<int, 4> sr_ratios{8, 4, 2, 1};
  int mlp_ratio = 4;

  int bi3_iterations = 2;
  bool bi3_shared_iterations = false;
  int gdfa_reduction_threshold = 128;
  int gdfa_reduction_factor = 2;
  double gdfa_dropout = 0.1;

  DpbFusion dpb_fusion = DpbFusion::add;
  bool shape_residual = true;
  int attention_reduction = 4;
  int spatial_kernel = 7;
  std::vector<int> ppm_bins{1, 2, 3, 6};
  int decoder_channels = 64;
  int contrastive_level = 1;  // 1-based pyramid level feeding the contrastive term

  AblationFlags ablation;
  std::uint64_t init_seed = 0;

  /// Desk-scale default: widths (32, 64, 128, 256).
  static ModelConfig desk() { return {}; }

  /// Smallest config used by fast tests and the learning check.
  static ModelConfig tiny() {
    ModelConfig c;
    c.level_channels = {16, 32, 64, 128};
    c.encoder_depths = {1, 1, 1, 1};
    c.encoder_heads = {1, 1, 2, 4};
    c.mlp_ratio = 2;
    c.bi3_iterations = 1;
    c.decoder_channels = 32;
    return c;
  }

  /// SegFormer-B1 stage widths.
  static ModelConfig b1() {
    ModelConfig c;
    c.level_channels = {64, 128, 320, 512};
    c.encoder_heads = {1, 2, 5, 8};
    c.decoder_channels = 256;
    return c;
  }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

struct AugmentationConfig {
  bool enabled = true;
  double p_geometric = 0.5;
  double p_cutmix = 0.3;
  double p_mixup = 0.2;
  double mixup_alpha = 0.2;
  double cutmix_alpha = 1.0;
  bool hflip = true;
  bool vflip = true;
  bool rot90 = true;
  bool crop_resize = true;
  double crop_min_scale = 0.6;
  double photometric_jitter = 0.1;

  friend bool operator==(const AugmentationConfig&, const AugmentationConfig&) = default;
};

struct TrainConfig {
  int epochs = 100;
  double base_lr = 1e-3;
  double backbone_lr_multiplier = 0.1;
  double weight_decay = 1e-2;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  int batch_size = 4;
  std::uint64_t seed = 0;
  bool freeze_backbone = false;
  bool cosine_decay = false;
  int early_stopping_patience = 0;  // 0 disables
  double contrastive_margin = 1.0;
  double dice_eps = 1.0;
  PhaseSchedule schedule;
  AugmentationConfig augmentation;
};

struct ConfigIssue {
  std::string field;
  std::string message;
};

class ConfigError : public std::invalid_argument {
 public:
  explicit ConfigError(std::vector<ConfigIssue> issues)
      : std::invalid_argument(render(issues)), issues_(std::move(issues)) {}
  const std::vector<ConfigIssue>& issues() const { return issues_; }

 private:
  static std::string render(const std::vector<ConfigIssue>& issues) {
    std::string s = "invalid configuration:";
    for (const auto& i : issues) s += "\n  " + i.field + ": " + i.message;
    return s;
  }
  std::vector<ConfigIssue> issues_;
};

namespace detail {
inline bool is_probability(double p) { return p >= 0.0 && p <= 1.0; }
inline bool is_power_of_two(int v) { return v > 0 && (v & (v - 1)) == 0; }
}  // namespace detail

/// Every violated invariant of a model config; empty means valid.
inline std::vector<ConfigIssue> check(const ModelConfig& c) {
  std::vector<ConfigIssue> out;
  auto fail = [&](std::string f, std::string m) { out.push_back({std::move(f), std::move(m)}); };
  if (c.num_classes < 2) fail("model.num_classes", "must be at least 2");
  if (c.in_channels < 1) fail("model.in_channels", "must be at least 1");
  for (int i = 0; i < 4; ++i) {
    if (!detail::is_power_of_two(c.level_strides[i]))
      fail("model.level_strides[" + std::to_string(i) + "]", "stride is not a power of two");
  }
  for (int i = 1; i < 4; ++i)
    if (c.level_strides[i] <= c.level_strides[i - 1]) {
      fail("model.level_strides", "strides not strictly increasing");
      break;
    }
  if (c.level_strides != std::array<int, 4>{4, 8, 16, 32})
    fail("model.level_strides", "backbone produces strides (4, 8, 16, 32) only");
  for (int i = 0; i < 4; ++i)
    if (c.level_channels[i] < 8) fail("model.level_channels[" + std::to_string(i) + "]", "channels below 8");
  for (int i = 1; i < 4; ++i)
    if (c.level_channels[i] < c.level_channels[i - 1]) {
      fail("model.level_channels", "channels decrease across levels");
      break;
    }
  if (c.level_channels[3] % 4 != 0) fail("model.level_channels[3]", "must be divisible by 4 for pyramid pooling");
  for (int i = 0; i < 4; ++i) {
    if (c.encoder_depths[i] < 1) fail("model.encoder_depths[" + std::to_string(i) + "]", "must be at least 1");
    if (c.encoder_heads[i] < 1 || c.level_channels[i] % c.encoder_heads[i] != 0)
      fail("model.encoder_heads[" + std::to_string(i) + "]", "must divide the level's channels");
    if (c.sr_ratios[i] < 1) fail("model.sr_ratios[" + std::to_string(i) + "]", "must be at least 1");
  }
  if (c.mlp_ratio < 1) fail("model.mlp_ratio", "must be at least 1");
  if (c.bi3_iterations < 1) fail("model.bi3_iterations", "must be at least 1");
  if (c.gdfa_reduction_threshold < 1) fail("model.gdfa_reduction_threshold", "must be positive");
  if (c.gdfa_reduction_factor < 1) fail("model.gdfa_reduction_factor", "must be at least 1");
  for (int i = 0; i < 4; ++i)
    if (c.level_channels[i] > c.gdfa_reduction_threshold && c.level_channels[i] % c.gdfa_reduction_factor != 0)
      fail("model.gdfa_reduction_factor", "must divide level " + std::to_string(i + 1) + " channels");
  if (!detail::is_probability(c.gdfa_dropout) || c.gdfa_dropout >= 1.0)
    fail("model.gdfa_dropout", "probability out of range");
  if (c.ppm_bins.empty()) fail("model.ppm_bins", "at least one bin required");
  for (int b : c.ppm_bins)
    if (b < 1) fail("model.ppm_bins", "bin sizes must be positive");
  if (c.attention_reduction < 1) fail("model.attention_reduction", "must be at least 1");
  if (c.spatial_kernel < 1 || c.spatial_kernel % 2 == 0) fail("model.spatial_kernel", "must be a positive odd size");
  if (c.decoder_channels < 1) fail("model.decoder_channels", "must be positive");
  if (c.contrastive_level < 1 || c.contrastive_level > 4) fail("model.contrastive_level", "must be in 1..4");
  return out;
}

inline std::vector<ConfigIssue> check(const AugmentationConfig& a) {
  std::vector<ConfigIssue> out;
  auto prob = [&](const char* f, double p) {
    if (!detail::is_probability(p)) out.push_back({std::string("augmentation.") + f, "probability out of range"});
  };
  prob("p_geometric", a.p_geometric);
  prob("p_cutmix", a.p_cutmix);
  prob("p_mixup", a.p_mixup);
  if (a.p_geometric + a.p_cutmix + a.p_mixup > 1.0 + 1e-12)
    out.push_back({"augmentation.p_cutmix", "geometric, cutmix and mixup are exclusive; probabilities sum above 1"});
  if (!(a.mixup_alpha > 0)) out.push_back({"augmentation.mixup_alpha", "must be positive"});
  if (!(a.cutmix_alpha > 0)) out.push_back({"augmentation.cutmix_alpha", "must be positive"});
  if (!(a.crop_min_scale > 0) || a.crop_min_scale > 1)
    out.push_back({"augmentation.crop_min_scale", "must be in (0, 1]"});
  if (!(a.photometric_jitter >= 0) || a.photometric_jitter >= 1)
    out.push_back({"augmentation.photometric_jitter", "must be in [0, 1)"});
  return out;
}

inline std::vector<ConfigIssue> check(const TrainConfig& t) {
  std::vector<ConfigIssue> out;
  if (t.epochs < 1) out.push_back({"train.epochs", "must be at least 1"});
  if (!(t.base_lr > 0)) out.push_back({"train.base_lr", "must be positive"});
  if (!(t.backbone_lr_multiplier > 0)) out.push_back({"train.backbone_lr_multiplier", "must be positive"});
  if (t.backbone_lr_multiplier > 1) out.push_back({"train.backbone_lr_multiplier", "must not exceed 1"});
  if (!(t.weight_decay >= 0)) out.push_back({"train.weight_decay", "must be non-negative"});
  if (!detail::is_probability(t.beta1) || t.beta1 >= 1) out.push_back({"train.beta1", "probability out of range"});
  if (!detail::is_probability(t.beta2) || t.beta2 >= 1) out.push_back({"train.beta2", "probability out of range"});
  if (!(t.adam_eps > 0)) out.push_back({"train.adam_eps", "must be positive"});
  if (t.batch_size < 1) out.push_back({"train.batch_size", "must be at least 1"});
  if (t.early_stopping_patience < 0) out.push_back({"train.early_stopping_patience", "must be non-negative"});
  if (!(t.contrastive_margin > 0)) out.push_back({"train.contrastive_margin", "must be positive"});
  if (!(t.dice_eps >= 0)) out.push_back({"train.dice_eps", "must be non-negative"});
  for (auto& p : t.schedule.problems(t.epochs)) out.push_back({"schedule", p});
  for (auto& i : check(t.augmentation)) out.push_back(i);
  return out;
}

/// Returns the config unchanged when valid; otherwise throws a ConfigError
/// listing every violated invariant.
template <typename Config>
Config validate(const Config& c) {
  auto issues = check(c);
  if (!issues.empty()) throw ConfigError(std::move(issues));
  return c;
}

}  // namespace scanet
