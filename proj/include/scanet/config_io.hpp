#pragma once

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include <algorithm>
#include <array>
#include <cctype>
#include <charconv>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "scanet/config.hpp"

namespace scanet {

/// Version of the key=value file layout written by `format_config`.
inline constexpr int config_schema_version = 1;

struct RunConfig {
  ModelConfig model;
  TrainConfig train;
};

class ConfigFileError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace detail {

namespace pt = boost::property_tree;

template <typename V>
std::string join(const V& values) {
  std::string s;
  for (const auto& v : values) s += (s.empty() ? "" : ",") + std::to_string(v);
  return s;
}

/// Shortest text that reads back to the same double.
inline std::string num(double v) {
  char buf[32];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

inline std::vector<long long> split_ints(const std::string& key, const std::string& text) {
  std::vector<long long> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      std::size_t used = 0;
      out.push_back(std::stoll(item, &used));
      while (used < item.size() && std::isspace(static_cast<unsigned char>(item[used]))) ++used;
      if (used != item.size()) throw std::invalid_argument(item);
    } catch (const std::logic_error&) {
      throw ConfigFileError(key + ": '" + text + "' is not a comma-separated integer list");
    }
  }
  return out;
}

template <std::size_t N>
void read_array(const pt::ptree& t, const std::string& key, std::array<int, N>& out) {
  const auto v = t.get_optional<std::string>(key);
  if (!v) return;
  const auto xs = split_ints(key, *v);
  if (xs.size() != N) throw ConfigFileError(key + ": expected " + std::to_string(N) + " values");
  for (std::size_t i = 0; i < N; ++i) out[i] = int(xs[i]);
}

template <typename V>
void read(const pt::ptree& t, const std::string& key, V& out) {
  const auto text = t.get_optional<std::string>(key);
  if (!text) return;
  std::istringstream is(*text);
  V v{};
  if (!(is >> v) || !(is >> std::ws).eof()) throw ConfigFileError(key + ": cannot parse '" + *text + "'");
  out = v;
}

inline void read_bool(const pt::ptree& t, const std::string& key, bool& out) {
  const auto v = t.get_optional<std::string>(key);
  if (!v) return;
  if (*v == "true" || *v == "1") out = true;
  else if (*v == "false" || *v == "0") out = false;
  else throw ConfigFileError(key + ": expected true or false, got '" + *v + "'");
}

inline const char* backbone_name(BackboneKind k) { return k == BackboneKind::conv ? "conv" : "mix_transformer"; }

}  // namespace detail

/// Renders both configs as an INI document.
inline std::string format_config(const RunConfig& rc) {
  namespace pt = boost::property_tree;
  const ModelConfig& m = rc.model;
  const TrainConfig& t = rc.train;
  pt::ptree tree;
  tree.put("meta.schema_version", config_schema_version);

  tree.put("model.num_classes", m.num_classes);
  tree.put("model.in_channels", m.in_channels);
  tree.put("model.level_channels", detail::join(m.level_channels));
  tree.put("model.level_strides", detail::join(m.level_strides));
  tree.put("model.backbone", detail::backbone_name(m.backbone));
  tree.put("model.encoder_depths", detail::join(m.encoder_depths));
  tree.put("model.encoder_heads", detail::join(m.encoder_heads));
  tree.put("model.sr_ratios", detail::join(m.sr_ratios));
  tree.put("model.mlp_ratio", m.mlp_ratio);
  tree.put("model.bi3_iterations", m.bi3_iterations);
  tree.put("model.bi3_shared_iterations", m.bi3_shared_iterations);
  tree.put("model.gdfa_reduction_threshold", m.gdfa_reduction_threshold);
  tree.put("model.gdfa_reduction_factor", m.gdfa_reduction_factor);
  tree.put("model.gdfa_dropout", detail::num(m.gdfa_dropout));
  tree.put("model.dpb_fusion", m.dpb_fusion == DpbFusion::concat ? "concat" : "add");
  tree.put("model.shape_residual", m.shape_residual);
  tree.put("model.attention_reduction", m.attention_reduction);
  tree.put("model.spatial_kernel", m.spatial_kernel);
  tree.put("model.ppm_bins", detail::join(m.ppm_bins));
  tree.put("model.decoder_channels", m.decoder_channels);
  tree.put("model.contrastive_level", m.contrastive_level);
  tree.put("model.init_seed", m.init_seed);

  tree.put("ablation.enhanced_bi3", m.ablation.enhanced_bi3);
  tree.put("ablation.adaptive_multiscale", m.ablation.adaptive_multiscale);
  tree.put("ablation.dpb", m.ablation.dpb);
  tree.put("ablation.attention", m.ablation.attention);

  tree.put("train.epochs", t.epochs);
  tree.put("train.base_lr", detail::num(t.base_lr));
  tree.put("train.backbone_lr_multiplier", detail::num(t.backbone_lr_multiplier));
  tree.put("train.weight_decay", detail::num(t.weight_decay));
  tree.put("train.beta1", detail::num(t.beta1));
  tree.put("train.beta2", detail::num(t.beta2));
  tree.put("train.adam_eps", detail::num(t.adam_eps));
  tree.put("train.batch_size", t.batch_size);
  tree.put("train.seed", t.seed);
  tree.put("train.freeze_backbone", t.freeze_backbone);
  tree.put("train.cosine_decay", t.cosine_decay);
  tree.put("train.early_stopping_patience", t.early_stopping_patience);
  tree.put("train.contrastive_margin", detail::num(t.contrastive_margin));
  tree.put("train.dice_eps", detail::num(t.dice_eps));

  tree.put("schedule.phases", t.schedule.phases().size());
  for (std::size_t i = 0; i < t.schedule.phases().size(); ++i) {
    const Phase& p = t.schedule.phases()[i];
    const std::string k = "schedule.phase" + std::to_string(i + 1);
    tree.put(k + "_name", p.name);
    tree.put(k + "_start", p.start);
    tree.put(k + "_end", p.end);
    const auto w = p.weights.as_array();
    tree.put(k + "_weights", detail::num(w[0]) + "," + detail::num(w[1]) + "," + detail::num(w[2]) + "," +
                                 detail::num(w[3]));
  }

  const AugmentationConfig& a = t.augmentation;
  tree.put("augmentation.enabled", a.enabled);
  tree.put("augmentation.p_geometric", detail::num(a.p_geometric));
  tree.put("augmentation.p_cutmix", detail::num(a.p_cutmix));
  tree.put("augmentation.p_mixup", detail::num(a.p_mixup));
  tree.put("augmentation.mixup_alpha", detail::num(a.mixup_alpha));
  tree.put("augmentation.cutmix_alpha", detail::num(a.cutmix_alpha));
  tree.put("augmentation.hflip", a.hflip);
  tree.put("augmentation.vflip", a.vflip);
  tree.put("augmentation.rot90", a.rot90);
  tree.put("augmentation.crop_resize", a.crop_resize);
  tree.put("augmentation.crop_min_scale", detail::num(a.crop_min_scale));
  tree.put("augmentation.photometric_jitter", detail::num(a.photometric_jitter));

  std::ostringstream os;
  pt::write_ini(os, tree);
  return os.str();
}

/// Parses an INI document; missing keys keep their defaults. Throws
/// ConfigFileError on syntax or schema problems, ConfigError on invalid values.
inline RunConfig parse_config(const std::string& text, RunConfig rc = {}) {
  namespace pt = boost::property_tree;
  pt::ptree tree;
  std::istringstream is(text);
  try {
    pt::read_ini(is, tree);
  } catch (const pt::ini_parser_error& e) {
    throw ConfigFileError("config syntax error: " + e.message() + " at line " + std::to_string(e.line()));
  }
  const int version = tree.get("meta.schema_version", config_schema_version);
  if (version != config_schema_version)
    throw ConfigFileError("config schema_version " + std::to_string(version) + " is not supported (expected " +
                          std::to_string(config_schema_version) + ")");
  static const std::vector<std::string> sections{"meta", "model", "ablation", "train", "schedule", "augmentation"};
  for (const auto& [name, _] : tree)
    if (std::find(sections.begin(), sections.end(), name) == sections.end())
      throw ConfigFileError("unknown config section [" + name + "]");

  ModelConfig& m = rc.model;
  using detail::read;
  using detail::read_array;
  using detail::read_bool;
  read(tree, "model.num_classes", m.num_classes);
  read(tree, "model.in_channels", m.in_channels);
  read_array(tree, "model.level_channels", m.level_channels);
  read_array(tree, "model.level_strides", m.level_strides);
  if (auto b = tree.get_optional<std::string>("model.backbone")) {
    if (*b == "conv") m.backbone = BackboneKind::conv;
    else if (*b == "mix_transformer") m.backbone = BackboneKind::mix_transformer;
    else throw ConfigFileError("model.backbone: unknown backbone '" + *b + "'");
  }
  read_array(tree, "model.encoder_depths", m.encoder_depths);
  read_array(tree, "model.encoder_heads", m.encoder_heads);
  read_array(tree, "model.sr_ratios", m.sr_ratios);
  read(tree, "model.mlp_ratio", m.mlp_ratio);
  read(tree, "model.bi3_iterations", m.bi3_iterations);
  read_bool(tree, "model.bi3_shared_iterations", m.bi3_shared_iterations);
  read(tree, "model.gdfa_reduction_threshold", m.gdfa_reduction_threshold);
  read(tree, "model.gdfa_reduction_factor", m.gdfa_reduction_factor);
  read(tree, "model.gdfa_dropout", m.gdfa_dropout);
  if (auto f = tree.get_optional<std::string>("model.dpb_fusion")) {
    if (*f == "add") m.dpb_fusion = DpbFusion::add;
    else if (*f == "concat") m.dpb_fusion = DpbFusion::concat;
    else throw ConfigFileError("model.dpb_fusion: unknown fusion '" + *f + "'");
  }
  read_bool(tree, "model.shape_residual", m.shape_residual);
  read(tree, "model.attention_reduction", m.attention_reduction);
  read(tree, "model.spatial_kernel", m.spatial_kernel);
  if (auto bins = tree.get_optional<std::string>("model.ppm_bins")) {
    m.ppm_bins.clear();
    for (long long b : detail::split_ints("model.ppm_bins", *bins)) m.ppm_bins.push_back(int(b));
  }
  read(tree, "model.decoder_channels", m.decoder_channels);
  read(tree, "model.contrastive_level", m.contrastive_level);
  read(tree, "model.init_seed", m.init_seed);

  read_bool(tree, "ablation.enhanced_bi3", m.ablation.enhanced_bi3);
  read_bool(tree, "ablation.adaptive_multiscale", m.ablation.adaptive_multiscale);
  read_bool(tree, "ablation.dpb", m.ablation.dpb);
  read_bool(tree, "ablation.attention", m.ablation.attention);

  TrainConfig& t = rc.train;
  const int old_epochs = t.epochs;
  read(tree, "train.epochs", t.epochs);
  read(tree, "train.base_lr", t.base_lr);
  read(tree, "train.backbone_lr_multiplier", t.backbone_lr_multiplier);
  read(tree, "train.weight_decay", t.weight_decay);
  read(tree, "train.beta1", t.beta1);
  read(tree, "train.beta2", t.beta2);
  read(tree, "train.adam_eps", t.adam_eps);
  read(tree, "train.batch_size", t.batch_size);
  read(tree, "train.seed", t.seed);
  read_bool(tree, "train.freeze_backbone", t.freeze_backbone);
  read_bool(tree, "train.cosine_decay", t.cosine_decay);
  read(tree, "train.early_stopping_patience", t.early_stopping_patience);
  read(tree, "train.contrastive_margin", t.contrastive_margin);
  read(tree, "train.dice_eps", t.dice_eps);

  if (auto n = tree.get_optional<int>("schedule.phases")) {
    std::vector<Phase> phases;
    for (int i = 1; i <= *n; ++i) {
      const std::string k = "schedule.phase" + std::to_string(i);
      Phase p;
      p.name = tree.get(k + "_name", "phase" + std::to_string(i));
      read(tree, k + "_start", p.start);
      read(tree, k + "_end", p.end);
      const auto ws = tree.get_optional<std::string>(k + "_weights");
      if (!ws) throw ConfigFileError(k + "_weights: missing");
      std::vector<double> w;
      std::stringstream ss(*ws);
      std::string item;
      while (std::getline(ss, item, ',')) {
        try {
          w.push_back(std::stod(item));
        } catch (const std::logic_error&) {
          throw ConfigFileError(k + "_weights: '" + *ws + "' is not a list of 4 numbers");
        }
      }
      if (w.size() != 4) throw ConfigFileError(k + "_weights: expected 4 weights");
      p.weights = {w[0], w[1], w[2], w[3]};
      phases.push_back(std::move(p));
    }
    t.schedule = PhaseSchedule(std::move(phases));
  } else if (t.epochs != old_epochs && t.schedule.epochs() == old_epochs) {
    t.schedule = t.schedule.rescaled(t.epochs);
  }

  AugmentationConfig& a = t.augmentation;
  read_bool(tree, "augmentation.enabled", a.enabled);
  read(tree, "augmentation.p_geometric", a.p_geometric);
  read(tree, "augmentation.p_cutmix", a.p_cutmix);
  read(tree, "augmentation.p_mixup", a.p_mixup);
  read(tree, "augmentation.mixup_alpha", a.mixup_alpha);
  read(tree, "augmentation.cutmix_alpha", a.cutmix_alpha);
  read_bool(tree, "augmentation.hflip", a.hflip);
  read_bool(tree, "augmentation.vflip", a.vflip);
  read_bool(tree, "augmentation.rot90", a.rot90);
  read_bool(tree, "augmentation.crop_resize", a.crop_resize);
  read(tree, "augmentation.crop_min_scale", a.crop_min_scale);
  read(tree, "augmentation.photometric_jitter", a.photometric_jitter);

  validate(rc.model);
  validate(rc.train);
  return rc;
}

inline RunConfig load_config(const std::filesystem::path& path, RunConfig defaults = {}) {
  std::ifstream in(path);
  if (!in) throw ConfigFileError("cannot open config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str(), std::move(defaults));
}

}  // namespace scanet
