#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <tuple>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "scanet/training.hpp"

namespace scanet {

/// Environment variables read as fallbacks: SCANET_CONFIG, SCANET_DATA,
/// SCANET_OUT, SCANET_SEED, SCANET_EPOCHS, SCANET_ABLATION, SCANET_DEVICE.
inline constexpr const char* env_prefix = "SCANET_";

enum ExitCode : int { exit_ok = 0, exit_failure = 1, exit_usage = 2 };

/// Thrown for flag values that parse but make no sense; maps to exit 2.
class UsageError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// ---- ablation flags ----

/// Applies "dpb=false,attention=0" style overrides.
inline AblationFlags parse_ablation(const std::string& spec, AblationFlags flags = {}) {
  std::stringstream ss(spec);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.empty()) continue;
    const auto eq = item.find('=');
    if (eq == std::string::npos) throw UsageError("--ablation entry '" + item + "' is not key=value");
    const std::string key = item.substr(0, eq), value = item.substr(eq + 1);
    bool on;
    if (value == "true" || value == "1" || value == "on") on = true;
    else if (value == "false" || value == "0" || value == "off") on = false;
    else throw UsageError("--ablation " + key + ": expected true or false, got '" + value + "'");
    if (key == "enhanced_bi3" || key == "bi3") flags.enhanced_bi3 = on;
    else if (key == "adaptive_multiscale" || key == "adaptive") flags.adaptive_multiscale = on;
    else if (key == "dpb") flags.dpb = on;
    else if (key == "attention") flags.attention = on;
    else throw UsageError("--ablation: unknown flag '" + key + "'");
  }
  return flags;
}

inline std::string format_ablation(const AblationFlags& f) {
  auto b = [](bool v) { return v ? "true" : "false"; };
  return std::string("enhanced_bi3=") + b(f.enhanced_bi3) + ",adaptive_multiscale=" + b(f.adaptive_multiscale) +
         ",dpb=" + b(f.dpb) + ",attention=" + b(f.attention);
}

// ---- inspect ----

struct PyramidRow {
  int level, stride, channels, height, width;
};

inline std::vector<PyramidRow> pyramid_table(const ModelConfig& c, int height, int width) {
  std::vector<PyramidRow> rows;
  for (int i = 0; i < 4; ++i)
    rows.push_back({i + 1, c.level_strides[i], c.level_channels[i], height / c.level_strides[i],
                    width / c.level_strides[i]});
  return rows;
}

/// Structured model summary: per-module counts (two levels deep), total,
/// pyramid shapes and ablation flags.
inline nlohmann::ordered_json inspect_model(const ModelConfig& cfg, int size) {
  ScaNet<float> model(cfg);
  nlohmann::ordered_json j;
  j["schema_version"] = report_schema_version;
  std::size_t total = 0;
  std::map<std::string, std::size_t> children;
  for (auto& p : model.parameters()) {
    total += p.tensor->numel();
    const auto first = p.name.find('.');
    const auto second = p.name.find('.', first + 1);
    if (second != std::string::npos) children[p.name.substr(0, second)] += p.tensor->numel();
  }
  auto& modules = j["modules"];
  modules = nlohmann::ordered_json::array();
  for (const auto& [name, count] : model.parameter_counts()) {
    nlohmann::ordered_json m;
    m["name"] = name;
    m["parameters"] = count;
    auto& sub = m["children"];
    sub = nlohmann::ordered_json::array();
    for (const auto& [child, n] : children)
      if (child.rfind(name + ".", 0) == 0) sub.push_back({{"name", child}, {"parameters", n}});
    modules.push_back(m);
  }
  j["total_parameters"] = total;
  j["input_size"] = size;
  auto& pyr = j["pyramid"];
  pyr = nlohmann::ordered_json::array();
  for (const auto& r : pyramid_table(cfg, size, size))
    pyr.push_back({{"level", r.level},
                   {"stride", r.stride},
                   {"channels", r.channels},
                   {"height", r.height},
                   {"width", r.width}});
  j["ablation"] = {{"enhanced_bi3", cfg.ablation.enhanced_bi3},
                   {"adaptive_multiscale", cfg.ablation.adaptive_multiscale},
                   {"dpb", cfg.ablation.dpb},
                   {"attention", cfg.ablation.attention}};
  return j;
}

inline void print_inspection(const nlohmann::ordered_json& j, std::ostream& out) {
  out << "module tree (parameters)\n";
  for (const auto& m : j["modules"]) {
    out << "  " << std::left << std::setw(34) << m["name"].get<std::string>() << std::right << std::setw(10)
        << m["parameters"].get<std::size_t>() << "\n";
    for (const auto& c : m["children"])
      out << "    " << std::left << std::setw(32) << c["name"].get<std::string>() << std::right << std::setw(10)
          << c["parameters"].get<std::size_t>() << "\n";
  }
  out << "  " << std::left << std::setw(34) << "total" << std::right << std::setw(10)
      << j["total_parameters"].get<std::size_t>() << "\n\n";
  out << "pyramid for " << j["input_size"].get<int>() << "x" << j["input_size"].get<int>() << " input\n";
  out << "  level  stride  channels  size\n";
  for (const auto& r : j["pyramid"])
    out << "  " << std::setw(5) << r["level"].get<int>() << std::setw(8) << r["stride"].get<int>() << std::setw(10)
        << r["channels"].get<int>() << "  " << r["height"].get<int>() << "x" << r["width"].get<int>() << "\n";
  out << "\nablation\n";
  for (const auto& [k, v] : j["ablation"].items()) out << "  " << k << " = " << (v.get<bool>() ? "true" : "false") << "\n";
}

// ---- predict helpers ----

/// Fixed overlay colours (RGBA): background transparent.
inline constexpr std::array<std::array<std::uint8_t, 4>, 3> overlay_colors{{
    {0, 0, 0, 0},
    {255, 170, 0, 200},  // road
    {220, 30, 60, 200},  // building
}};

inline Raster overlay_raster(const LabelMap& classes) {
  Raster r(classes.w, classes.h, 4);
  for (int y = 0; y < classes.h; ++y)
    for (int x = 0; x < classes.w; ++x) {
      const int c = classes.at(y, x);
      const auto& col = overlay_colors[std::size_t(c < 3 ? c : 0)];
      for (int k = 0; k < 4; ++k) r.at(y, x, k) = col[std::size_t(k)];
    }
  return r;
}

inline Raster class_raster(const LabelMap& classes) {
  Raster r(classes.w, classes.h, 1);
  for (std::size_t i = 0; i < classes.labels.size(); ++i) r.pixels[i] = std::uint8_t(classes.labels[i]);
  return r;
}

/// Mirror index without repeating the edge, folded until in range.
inline int reflect_index(int i, int n) {
  if (n == 1) return 0;
  const int period = 2 * (n - 1);
  i %= period;
  if (i < 0) i += period;
  return i < n ? i : period - i;
}

/// Pads bottom/right by reflection up to a multiple of `m`.
inline Image reflect_pad(const Image& img, int m) {
  const int h = (img.h + m - 1) / m * m, w = (img.w + m - 1) / m * m;
  if (h == img.h && w == img.w) return img;
  Image out(img.c, h, w);
  for (int c = 0; c < img.c; ++c)
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) out.at(c, y, x) = img.at(c, reflect_index(y, img.h), reflect_index(x, img.w));
  return out;
}

/// Class map for one pair; pads non-multiples of 32 unless `strict`.
inline LabelMap predict_pair(const ScaNet<float>& model, const Image& a, const Image& b, bool strict) {
  if (a.h != b.h || a.w != b.w) throw ShapeError("predict: A and B differ in size");
  if (strict && (a.h % 32 != 0 || a.w % 32 != 0))
    throw ShapeError("predict: " + std::to_string(a.h) + "x" + std::to_string(a.w) +
                     " is not divisible by 32 (--strict disables padding)");
  const Image pa = reflect_pad(a, 32), pb = reflect_pad(b, 32);
  NoGradGuard no_grad;
  const LabelMap full = argmax_labels(model.logits(stack_images<float>({&pa}), stack_images<float>({&pb})));
  LabelMap out(1, a.h, a.w);
  for (int y = 0; y < a.h; ++y)
    for (int x = 0; x < a.w; ++x) out.at(y, x) = full.at(y, x);
  return out;
}

// ---- commands ----

struct CommonFlags {
  std::string config;
  std::string data;
  std::string out;
  std::uint64_t seed = 0;
  bool seed_given = false;
  int epochs = 0;
  std::string ablation;
  bool strict = false;
  std::string device = "cpu";
};

namespace detail {

inline RunConfig base_config(const CommonFlags& f) {
  RunConfig rc;
  if (!f.config.empty()) rc = load_config(f.config);
  if (!f.ablation.empty()) rc.model.ablation = parse_ablation(f.ablation, rc.model.ablation);
  if (f.seed_given) {
    rc.train.seed = f.seed;
    rc.model.init_seed = f.seed;
  }
  if (f.epochs > 0 && f.epochs != rc.train.epochs) {
    rc.train.schedule = rc.train.schedule.rescaled(f.epochs);
    rc.train.epochs = f.epochs;
  }
  validate(rc.model);
  validate(rc.train);
  return rc;
}

inline void write_text(const std::filesystem::path& p, const std::string& text) {
  std::ofstream os(p);
  if (!os) throw std::runtime_error("cannot write " + p.string());
  os << text;
}

/// Model from a checkpoint's stored config (or `config_override`), with
/// weights restored.
inline ScaNet<float> model_from_checkpoint(const std::string& path, const std::string& config_override) {
  const Checkpoint ck = read_checkpoint(path);
  const RunConfig rc = config_override.empty() ? parse_config(ck.meta.config_text) : load_config(config_override);
  ScaNet<float> model(rc.model);
  restore_checkpoint<float>(ck, model);
  return model;
}

}  // namespace detail

inline int cmd_synth(const fs::path& out, int size, int count, int val_count, std::uint64_t seed,
                     double small_fraction, std::ostream& os) {
  if (size <= 0 || size % 32 != 0) throw UsageError("size must be divisible by 32");
  if (count < 1) throw UsageError("count must be at least 1");
  SyntheticParams p;
  p.size = size;
  p.count = count;
  p.val_count = val_count;
  p.small_fraction = small_fraction;
  generate_synthetic(out, seed, p);
  os << "wrote " << count << " train" << (val_count ? " and " + std::to_string(val_count) + " val" : "")
     << " triples of " << size << "x" << size << " to " << out.string() << " (seed " << seed << ")\n";
  return exit_ok;
}

inline int cmd_train(const CommonFlags& f, const std::string& resume, int max_steps, const std::string& remap,
                     std::ostream& os) {
  if (f.data.empty()) throw UsageError("train needs --data");
  if (f.out.empty()) throw UsageError("train needs --out");
  const RunConfig rc = detail::base_config(f);
  const RemapTable table = remap.empty() ? default_remap() : parse_remap(remap);
  const auto train_manifest = scan_dataset(f.data, "train", table);
  for (const auto& w : train_manifest.warnings) std::cerr << "warning: " << w << "\n";
  const auto train = load_all(train_manifest, rc.model.num_classes);
  std::vector<BitemporalSample> val;
  if (fs::is_directory(fs::path(f.data) / "val")) {
    const auto vm = scan_dataset(f.data, "val", table);
    for (const auto& w : vm.warnings) std::cerr << "warning: " << w << "\n";
    val = load_all(vm, rc.model.num_classes);
  }
  fs::create_directories(f.out);
  const std::string text = format_config(rc);
  detail::write_text(fs::path(f.out) / "config.ini", text);
  ScaNet<float> model(rc.model);
  FitOptions fo;
  fo.out_dir = f.out;
  fo.config_text = text;
  fo.max_steps = max_steps;
  fo.log_to_stdout = true;
  if (!resume.empty()) fo.resume = resume;
  const FitReport rep = fit(model, train, val, rc.train, fo);
  nlohmann::ordered_json summary{{"epochs_run", rep.epochs_run},
                                 {"steps", rep.steps},
                                 {"best_miou", rep.best_miou},
                                 {"best_epoch", rep.best_epoch},
                                 {"stopped_early", rep.stopped_early},
                                 {"checkpoint", (fs::path(f.out) / "best.ckpt").string()}};
  os << summary.dump() << "\n";
  return exit_ok;
}

inline int cmd_eval(const CommonFlags& f, const std::string& checkpoint, const std::string& split,
                    const std::string& remap, std::ostream& os) {
  if (checkpoint.empty()) throw UsageError("eval needs --checkpoint");
  if (f.data.empty()) throw UsageError("eval needs --data");
  ScaNet<float> model = detail::model_from_checkpoint(checkpoint, f.config);
  const auto manifest = scan_dataset(f.data, split, remap.empty() ? default_remap() : parse_remap(remap));
  for (const auto& w : manifest.warnings) std::cerr << "warning: " << w << "\n";
  auto report = to_json(evaluate(model, load_all(manifest, model.config().num_classes)));
  report["split"] = split;
  report["checkpoint"] = checkpoint;
  if (f.out.empty()) {
    os << report.dump(2) << "\n";
  } else {
    detail::write_text(f.out, report.dump(2) + "\n");
    os << "wrote " << f.out << "\n";
  }
  return exit_ok;
}

inline int cmd_predict(const CommonFlags& f, const std::string& checkpoint, const std::string& image_a,
                       const std::string& image_b, const std::string& split, std::ostream& os) {
  if (checkpoint.empty()) throw UsageError("predict needs --checkpoint");
  if (f.out.empty()) throw UsageError("predict needs --out");
  ScaNet<float> model = detail::model_from_checkpoint(checkpoint, f.config);
  std::vector<std::tuple<std::string, fs::path, fs::path>> pairs;
  if (!image_a.empty() || !image_b.empty()) {
    if (image_a.empty() || image_b.empty()) throw UsageError("predict needs both --a and --b");
    pairs.emplace_back(fs::path(image_a).stem().string(), image_a, image_b);
  } else if (!f.data.empty()) {
    const fs::path root = fs::path(f.data) / split;
    std::set<std::string> a_names = detail::png_stems(root / "A"), b_names = detail::png_stems(root / "B");
    for (const auto& n : a_names)
      if (b_names.count(n)) pairs.emplace_back(n, root / "A" / (n + ".png"), root / "B" / (n + ".png"));
    if (pairs.empty()) throw DataError("no A/B pairs under " + root.string());
  } else {
    throw UsageError("predict needs --a and --b, or --data");
  }
  fs::create_directories(f.out);
  for (const auto& [id, pa, pb] : pairs) {
    const Image a = image_from_raster(read_png(pa, 3)), b = image_from_raster(read_png(pb, 3));
    const LabelMap classes = predict_pair(model, a, b, f.strict);
    write_png(fs::path(f.out) / (id + "_class.png"), class_raster(classes));
    write_png(fs::path(f.out) / (id + "_overlay.png"), overlay_raster(classes));
    os << id << ": " << classes.w << "x" << classes.h << "\n";
  }
  return exit_ok;
}

inline int cmd_inspect(const CommonFlags& f, const std::string& checkpoint, int size, bool json,
                       std::ostream& os) {
  if (size <= 0 || size % 32 != 0) throw UsageError("input size must be divisible by 32");
  ModelConfig cfg;
  if (!checkpoint.empty()) {
    cfg = parse_config(read_checkpoint(checkpoint).meta.config_text).model;
    if (!f.ablation.empty()) cfg.ablation = parse_ablation(f.ablation, cfg.ablation);
  } else {
    cfg = detail::base_config(f).model;
  }
  const auto j = inspect_model(cfg, size);
  if (json) os << j.dump(2) << "\n";
  else print_inspection(j, os);
  return exit_ok;
}

/// Parses argv and dispatches. Returns 0 on success, 1 on runtime failure,
/// 2 on usage errors.
inline int run_cli(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"Bi-temporal change detection: synthesize data, train, evaluate, predict and inspect models"};
  app.require_subcommand(1);
  CommonFlags f;
  auto env = [](const char* name) { return std::string(env_prefix) + name; };
  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", f.config, "INI configuration file")->envname(env("CONFIG"));
    sub->add_option("--data", f.data, "dataset root holding train/ and val/")->envname(env("DATA"));
    sub->add_option("--out", f.out, "output directory or file")->envname(env("OUT"));
    sub->add_option("--seed", f.seed, "random seed")->envname(env("SEED"));
    sub->add_option("--epochs", f.epochs, "override the epoch count (schedule rescaled)")->envname(env("EPOCHS"));
    sub->add_option("--ablation", f.ablation, "k=v[,k=v] over enhanced_bi3, adaptive_multiscale, dpb, attention")
        ->envname(env("ABLATION"));
    sub->add_flag("--strict", f.strict, "refuse inputs not divisible by 32 instead of padding");
    sub->add_option("--device", f.device, "compute device (cpu)")->envname(env("DEVICE"));
  };

  auto* synth = app.add_subcommand("synth", "write a seeded synthetic dataset");
  add_common(synth);
  int size = 64, count = 16, val_count = 0;
  double small_fraction = 0.5;
  synth->add_option("--size", size, "tile size in pixels (multiple of 32)");
  synth->add_option("--count", count, "number of train triples");
  synth->add_option("--val-count", val_count, "number of val triples");
  synth->add_option("--small-fraction", small_fraction, "share of buildings below 400 px")
      ->check(CLI::Range(0.0, 1.0));

  auto* train = app.add_subcommand("train", "train a model and keep the best checkpoint");
  add_common(train);
  std::string resume, remap;
  int max_steps = -1;
  train->add_option("--resume", resume, "checkpoint to resume from");
  train->add_option("--max-steps", max_steps, "stop after this many optimizer steps");
  train->add_option("--remap", remap, "raw:class label remap, e.g. 0:0,128:1,255:2");

  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint on a dataset split");
  add_common(eval);
  std::string checkpoint, split = "val";
  eval->add_option("--checkpoint", checkpoint, "checkpoint file")->envname(env("CHECKPOINT"));
  eval->add_option("--split", split, "dataset split");
  eval->add_option("--remap", remap, "raw:class label remap");

  auto* predict = app.add_subcommand("predict", "write class rasters and overlays");
  add_common(predict);
  std::string image_a, image_b;
  predict->add_option("--checkpoint", checkpoint, "checkpoint file")->envname(env("CHECKPOINT"));
  predict->add_option("--a", image_a, "image at time 1");
  predict->add_option("--b", image_b, "image at time 2");
  predict->add_option("--split", split, "dataset split when using --data");

  auto* inspect = app.add_subcommand("inspect", "print module tree, parameter counts and pyramid shapes");
  add_common(inspect);
  int inspect_size = 256;
  bool json = false;
  inspect->add_option("--checkpoint", checkpoint, "read the config stored in a checkpoint");
  inspect->add_option("--size", inspect_size, "input size for the pyramid table");
  inspect->add_flag("--json", json, "structured output");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::ParseError& e) {
    app.exit(e, out, err);
    return exit_usage;
  }
  for (auto* sub : {synth, train, eval, predict, inspect})
    if (sub->parsed()) f.seed_given = sub->count("--seed") > 0;

  try {
    if (f.device != "cpu") throw UsageError("--device " + f.device + " is not available; only cpu is supported");
    if (synth->parsed()) {
      if (f.out.empty()) throw UsageError("synth needs --out");
      return cmd_synth(f.out, size, count, val_count, f.seed, small_fraction, out);
    }
    if (train->parsed()) return cmd_train(f, resume, max_steps, remap, out);
    if (eval->parsed()) return cmd_eval(f, checkpoint, split, remap, out);
    if (predict->parsed()) return cmd_predict(f, checkpoint, image_a, image_b, split, out);
    if (inspect->parsed()) return cmd_inspect(f, checkpoint, inspect_size, json, out);
  } catch (const UsageError& e) {
    err << "usage error: " << e.what() << "\n";
    return exit_usage;
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << "\n";
    return exit_failure;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return exit_failure;
  }
  return exit_usage;
}

}  // namespace scanet
