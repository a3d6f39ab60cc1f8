#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <numeric>
#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"

#include "scanet/augmentation.hpp"
#include "scanet/checkpoint.hpp"
#include "scanet/config_io.hpp"
#include "scanet/data.hpp"
#include "scanet/losses.hpp"
#include "scanet/metrics.hpp"
#include "scanet/model.hpp"
#include "scanet/optimizer.hpp"

namespace scanet {

/// Version of the per-epoch log record and evaluation report documents.
inline constexpr int report_schema_version = 1;

class NonFiniteLoss : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// splitmix64 over (seed, a, b): independent streams per epoch and batch.
inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b = 0) {
  auto mix = [](std::uint64_t z) {
    z += 0x9e3779b97f4a7c15ULL;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  };
  return mix(mix(mix(seed) ^ a) ^ b);
}

template <typename T>
struct BatchTensors {
  Tensor<T> a, b;
  Target<T> target;
};

template <typename T>
BatchTensors<T> to_tensors(const AugmentedBatch& batch, const Normalization& norm = {}) {
  std::vector<const Image*> as, bs;
  for (const auto& s : batch.samples) {
    as.push_back(&s.image_a);
    bs.push_back(&s.image_b);
  }
  return {stack_images<T>(as, norm), stack_images<T>(bs, norm), batch.target<T>()};
}

/// Throws NonFiniteLoss naming the first non-finite component.
inline void check_finite(const LossBreakdown& b, int epoch) {
  const std::pair<const char*, std::optional<double>> parts[] = {
      {"ce", b.ce}, {"dice", b.dice}, {"lovasz", b.lovasz}, {"contrastive", b.contrastive}};
  for (const auto& [name, v] : parts)
    if (v && !std::isfinite(*v))
      throw NonFiniteLoss("non-finite loss in component " + std::string(name) + " (" + std::to_string(*v) +
                          ") at epoch " + std::to_string(epoch));
  if (!std::isfinite(b.total)) throw NonFiniteLoss("non-finite total loss at epoch " + std::to_string(epoch));
}

inline LossOptions loss_options(const TrainConfig& tc, bool report_all = true) {
  LossOptions o;
  o.dice_eps = tc.dice_eps;
  o.contrastive_margin = tc.contrastive_margin;
  o.report_all = report_all;
  return o;
}

/// Forward, composite loss at `epoch`, backward and one AdamW update.
template <typename T>
LossBreakdown train_step(ScaNet<T>& model, ParamGroups<T>& groups, AdamW<T>& opt, const BatchTensors<T>& batch,
                         int epoch, const TrainConfig& tc, std::mt19937_64& dropout_rng, double lr_scale = 1.0,
                         bool report_all = true) {
  model.zero_grad();
  const auto out = model.forward(batch.a, batch.b, RunMode::train(dropout_rng));
  auto loss = composite_loss(out.logits, batch.target, out.contrast_a, out.contrast_b, epoch, tc.schedule,
                             loss_options(tc, report_all));
  check_finite(loss.breakdown, epoch);
  loss.total.backward();
  opt.step(groups, lr_scale);
  return loss.breakdown;
}

/// Argmax predictions of `model` over `samples` accumulated into a report.
template <typename T>
EvalReport evaluate(const ScaNet<T>& model, const std::vector<BitemporalSample>& samples, int batch_size = 4,
                    const Normalization& norm = {}, SmallObjectOptions small = {}) {
  if (samples.empty()) throw TrainingError("evaluate: no samples");
  NoGradGuard no_grad;
  EvalAccumulator acc(model.config().num_classes, small);
  for (std::size_t start = 0; start < samples.size(); start += std::size_t(batch_size)) {
    const std::size_t end = std::min(samples.size(), start + std::size_t(batch_size));
    std::vector<const Image*> as, bs;
    std::vector<const LabelMap*> masks;
    for (std::size_t i = start; i < end; ++i) {
      as.push_back(&samples[i].image_a);
      bs.push_back(&samples[i].image_b);
      masks.push_back(&samples[i].mask);
    }
    const auto logits = model.logits(stack_images<T>(as, norm), stack_images<T>(bs, norm));
    acc.add(stack_masks(masks), argmax_labels(logits));
  }
  return acc.report();
}

inline nlohmann::ordered_json to_json(const EvalReport& r) {
  auto opt = [](const std::optional<double>& v) { return v ? nlohmann::ordered_json(*v) : nlohmann::ordered_json(); };
  nlohmann::ordered_json j;
  j["schema_version"] = report_schema_version;
  j["oa"] = r.oa;
  j["mean_f1"] = r.mean_f1;
  j["miou"] = r.miou;
  j["mean_precision"] = r.mean_precision;
  j["mean_recall"] = r.mean_recall;
  j["small_building_iou"] = r.small_building ? nlohmann::ordered_json(r.small_building->iou()) : nullptr;
  j["small_building_iou_unrestricted"] =
      r.small_building_unrestricted ? nlohmann::ordered_json(r.small_building_unrestricted->iou()) : nullptr;
  if (r.small_building) {
    j["small_building_components"] = r.small_building->small_components;
    j["building_components"] = r.small_building->components;
  }
  auto& pc = j["per_class"];
  pc = nlohmann::ordered_json::array();
  for (std::size_t c = 0; c < r.iou.size(); ++c)
    pc.push_back({{"class", c},
                  {"precision", opt(r.precision[c])},
                  {"recall", opt(r.recall[c])},
                  {"f1", opt(r.f1[c])},
                  {"iou", opt(r.iou[c])}});
  j["present_classes"] = r.present_classes;
  auto& cm = j["confusion"];
  cm = nlohmann::ordered_json::array();
  for (int g = 0; g < r.confusion.num_classes(); ++g) {
    std::vector<std::uint64_t> row;
    for (int p = 0; p < r.confusion.num_classes(); ++p) row.push_back(std::uint64_t(r.confusion.at(g, p)));
    cm.push_back(row);
  }
  return j;
}

struct FitOptions {
  std::filesystem::path out_dir;  // empty: no files written
  std::optional<std::filesystem::path> resume;
  std::string config_text;        // stored in checkpoints
  Normalization norm;
  int max_steps = -1;             // stop after this many optimizer steps (negative: no limit)
  bool log_to_stdout = false;
  std::function<void(const nlohmann::ordered_json&)> on_epoch;
  std::function<void(std::uint64_t, const LossBreakdown&)> on_step;
};

struct FitReport {
  std::vector<nlohmann::ordered_json> rows;
  double best_miou = -1.0;
  int best_epoch = -1;
  int epochs_run = 0;
  std::uint64_t steps = 0;
  bool stopped_early = false;
};

/// Batches of one epoch in a seeded shuffled order; the last may be short.
inline std::vector<std::vector<std::size_t>> epoch_batches(std::size_t n, int batch_size, std::uint64_t seed,
                                                           int epoch) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(derive_seed(seed, std::uint64_t(epoch), 0x5348));
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t i = 0; i < n; i += std::size_t(batch_size))
    out.emplace_back(order.begin() + std::ptrdiff_t(i), order.begin() + std::ptrdiff_t(std::min(n, i + batch_size)));
  return out;
}

/// Full training loop: per epoch augment, step, validate, log and checkpoint.
/// Writes {out_dir}/train_log.jsonl, last.ckpt and best.ckpt.
template <typename T>
FitReport fit(ScaNet<T>& model, const std::vector<BitemporalSample>& train, const std::vector<BitemporalSample>& val,
              const TrainConfig& cfg, const FitOptions& fo = {}) {
  const TrainConfig tc = validate(cfg);
  if (train.empty()) throw TrainingError("training set is empty");
  const auto& eval_set = val.empty() ? train : val;
  ParamGroups<T> groups = build_param_groups<T>(model, tc);
  AdamW<T> opt(tc);
  FitReport report;
  int start_epoch = 0;
  if (fo.resume) {
    const CheckpointMeta meta = load_checkpoint<T>(*fo.resume, model, &opt);
    start_epoch = meta.epoch;
    report.steps = meta.step;
    report.best_miou = meta.best_miou;
    report.best_epoch = meta.best_epoch;
  }
  std::ofstream log;
  if (!fo.out_dir.empty()) {
    std::filesystem::create_directories(fo.out_dir);
    log.open(fo.out_dir / "train_log.jsonl", fo.resume ? std::ios::app : std::ios::trunc);
    if (!log) throw TrainingError("cannot write " + (fo.out_dir / "train_log.jsonl").string());
  }
  auto meta_now = [&](int epochs_done) {
    return CheckpointMeta{fo.config_text, epochs_done, report.steps, report.best_miou, report.best_epoch};
  };
  int since_best = 0;
  for (int epoch = start_epoch; epoch < tc.epochs; ++epoch) {
    if (fo.max_steps >= 0 && report.steps >= std::uint64_t(fo.max_steps)) break;
    const LossWeights w = tc.schedule.weights_at(epoch);
    const double lr_scale = tc.cosine_decay ? cosine_factor(epoch, tc.epochs) : 1.0;
    std::mt19937_64 dropout_rng(derive_seed(tc.seed, std::uint64_t(epoch), 0x4452));
    double sums[4] = {0, 0, 0, 0}, total = 0;
    int counts[4] = {0, 0, 0, 0}, steps = 0;
    const auto batches = epoch_batches(train.size(), tc.batch_size, tc.seed, epoch);
    for (std::size_t bi = 0; bi < batches.size(); ++bi) {
      if (fo.max_steps >= 0 && report.steps >= std::uint64_t(fo.max_steps)) break;
      std::vector<BitemporalSample> raw;
      for (std::size_t i : batches[bi]) raw.push_back(train[i]);
      const AugmentedBatch aug =
          augment_batch(raw, tc.augmentation, model.config().num_classes, derive_seed(tc.seed, std::uint64_t(epoch), bi + 1));
      const auto tensors = to_tensors<T>(aug, fo.norm);
      const LossBreakdown b = train_step(model, groups, opt, tensors, epoch, tc, dropout_rng, lr_scale);
      ++report.steps;
      ++steps;
      const std::optional<double> parts[4] = {b.ce, b.dice, b.lovasz, b.contrastive};
      for (int k = 0; k < 4; ++k)
        if (parts[k]) sums[k] += *parts[k], ++counts[k];
      total += b.total;
      if (fo.on_step) fo.on_step(report.steps, b);
    }
    if (steps == 0) break;
    const EvalReport ev = evaluate(model, eval_set, tc.batch_size, fo.norm);
    ++report.epochs_run;
    const bool improved = ev.miou > report.best_miou;
    if (improved) {
      report.best_miou = ev.miou;
      report.best_epoch = epoch;
      since_best = 0;
    } else {
      ++since_best;
    }

    nlohmann::ordered_json row;
    row["schema_version"] = report_schema_version;
    row["epoch"] = epoch;
    row["phase"] = tc.schedule.phase_at(epoch).name;
    const auto wa = w.as_array();
    for (int k = 0; k < 4; ++k) row["lambda" + std::to_string(k + 1)] = wa[k];
    const char* names[4] = {"ce", "dice", "lovasz", "contrastive"};
    for (int k = 0; k < 4; ++k) row[names[k]] = counts[k] ? nlohmann::ordered_json(sums[k] / counts[k]) : nullptr;
    row["total"] = total / steps;
    row["steps"] = steps;
    row["lr_head"] = groups.head.lr * lr_scale;
    row["lr_backbone"] = groups.backbone.lr * lr_scale;
    row["val_split"] = val.empty() ? "train" : "val";
    row["val_miou"] = ev.miou;
    row["val_oa"] = ev.oa;
    row["val_mean_f1"] = ev.mean_f1;
    row["val_mean_precision"] = ev.mean_precision;
    row["val_mean_recall"] = ev.mean_recall;
    row["val_small_building_iou"] = ev.small_building ? nlohmann::ordered_json(ev.small_building->iou()) : nullptr;
    row["best_miou"] = report.best_miou;
    report.rows.push_back(row);
    if (log) log << row.dump() << "\n" << std::flush;
    if (fo.log_to_stdout) std::cout << row.dump() << "\n" << std::flush;
    if (fo.on_epoch) fo.on_epoch(row);

    if (!fo.out_dir.empty()) {
      if (improved) save_checkpoint<T>(fo.out_dir / "best.ckpt", model, &opt, meta_now(epoch + 1));
      save_checkpoint<T>(fo.out_dir / "last.ckpt", model, &opt, meta_now(epoch + 1));
    }
    if (tc.early_stopping_patience > 0 && since_best >= tc.early_stopping_patience) {
      report.stopped_early = true;
      break;
    }
  }
  return report;
}

}  // namespace scanet
