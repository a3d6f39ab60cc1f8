#pragma once

#include <algorithm>
#include <cstdint>
#include <numeric>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "scanet/labels.hpp"
#include "scanet/tensor.hpp"

namespace scanet {

/// K x K pixel counts; entry (g, p) counts pixels with ground truth g predicted p.
class ConfusionMatrix {
 public:
  ConfusionMatrix() = default;
  explicit ConfusionMatrix(int num_classes) : k_(num_classes), counts_(std::size_t(num_classes) * num_classes, 0) {
    if (num_classes < 1) throw std::invalid_argument("ConfusionMatrix: need at least one class");
  }

  int num_classes() const { return k_; }
  std::int64_t at(int g, int p) const { return counts_[std::size_t(g) * k_ + p]; }
  std::int64_t& at(int g, int p) { return counts_[std::size_t(g) * k_ + p]; }
  const std::vector<std::int64_t>& counts() const { return counts_; }

  std::int64_t total() const { return std::accumulate(counts_.begin(), counts_.end(), std::int64_t(0)); }
  std::int64_t trace() const {
    std::int64_t t = 0;
    for (int i = 0; i < k_; ++i) t += at(i, i);
    return t;
  }
  std::int64_t gt_count(int g) const {
    std::int64_t s = 0;
    for (int p = 0; p < k_; ++p) s += at(g, p);
    return s;
  }
  std::int64_t pred_count(int p) const {
    std::int64_t s = 0;
    for (int g = 0; g < k_; ++g) s += at(g, p);
    return s;
  }

  void accumulate(const LabelMap& gt, const LabelMap& pred) {
    if (!gt.same_extent(pred))
      throw ShapeError("confusion matrix: ground truth and prediction extents differ");
    check_labels(gt, k_, "confusion matrix ground truth");
    check_labels(pred, k_, "confusion matrix prediction");
    for (std::size_t i = 0; i < gt.size(); ++i) ++counts_[std::size_t(gt.labels[i]) * k_ + pred.labels[i]];
  }

  ConfusionMatrix& operator+=(const ConfusionMatrix& o) {
    if (o.k_ != k_) throw std::invalid_argument("confusion matrix: class counts differ");
    for (std::size_t i = 0; i < counts_.size(); ++i) counts_[i] += o.counts_[i];
    return *this;
  }
  friend ConfusionMatrix operator+(ConfusionMatrix a, const ConfusionMatrix& b) { return a += b; }
  friend bool operator==(const ConfusionMatrix&, const ConfusionMatrix&) = default;

 private:
  int k_ = 0;
  std::vector<std::int64_t> counts_;
};

inline ConfusionMatrix accumulate(ConfusionMatrix cm, const LabelMap& gt, const LabelMap& pred) {
  cm.accumulate(gt, pred);
  return cm;
}

/// Counts behind a small-object IoU, summed over images when accumulating.
struct SmallObjectCounts {
  std::int64_t intersection = 0;
  std::int64_t uni = 0;
  int components = 0;        // all ground-truth components of the class
  int small_components = 0;  // those below the area threshold

  /// 1.0 when the union is empty (nothing small and nothing predicted in scope).
  double iou() const { return uni == 0 ? 1.0 : double(intersection) / double(uni); }

  SmallObjectCounts& operator+=(const SmallObjectCounts& o) {
    intersection += o.intersection;
    uni += o.uni;
    components += o.components;
    small_components += o.small_components;
    return *this;
  }
};

struct EvalReport {
  ConfusionMatrix confusion;
  double oa = 0.0;
  double mean_precision = 0.0;
  double mean_recall = 0.0;
  double mean_f1 = 0.0;
  double miou = 0.0;
  // Per class; empty when the class's denominator is zero.
  std::vector<std::optional<double>> precision, recall, f1, iou;
  std::vector<int> present_classes;
  std::optional<SmallObjectCounts> small_building;               // box-restricted protocol
  std::optional<SmallObjectCounts> small_building_unrestricted;  // |P∩S| / |P∪S|
};

/// Per-class precision, recall, F1 and IoU plus OA and macro means over the
/// classes present in the ground truth.
inline EvalReport derive_metrics(const ConfusionMatrix& cm) {
  if (cm.num_classes() == 0 || cm.total() == 0) throw std::invalid_argument("derive_metrics: empty confusion matrix");
  EvalReport r;
  r.confusion = cm;
  const int k = cm.num_classes();
  r.oa = double(cm.trace()) / double(cm.total());
  r.precision.resize(k);
  r.recall.resize(k);
  r.f1.resize(k);
  r.iou.resize(k);
  double sp = 0, sr = 0, sf = 0, si = 0;
  int np = 0, nr = 0, nf = 0, ni = 0;
  for (int c = 0; c < k; ++c) {
    const std::int64_t tp = cm.at(c, c);
    const std::int64_t fp = cm.pred_count(c) - tp;
    const std::int64_t fn = cm.gt_count(c) - tp;
    if (tp + fp > 0) r.precision[c] = double(tp) / double(tp + fp);
    if (tp + fn > 0) r.recall[c] = double(tp) / double(tp + fn);
    if (tp + fp + fn > 0) {
      r.iou[c] = double(tp) / double(tp + fp + fn);
      r.f1[c] = 2.0 * double(tp) / double(2 * tp + fp + fn);
    }
    if (cm.gt_count(c) == 0) continue;
    r.present_classes.push_back(c);
    if (r.precision[c]) sp += *r.precision[c], ++np;
    if (r.recall[c]) sr += *r.recall[c], ++nr;
    if (r.f1[c]) sf += *r.f1[c], ++nf;
    if (r.iou[c]) si += *r.iou[c], ++ni;
  }
  r.mean_precision = np ? sp / np : 0.0;
  r.mean_recall = nr ? sr / nr : 0.0;
  r.mean_f1 = nf ? sf / nf : 0.0;
  r.miou = ni ? si / ni : 0.0;
  return r;
}

struct Component {
  int area = 0;
  int y0 = 0, y1 = 0, x0 = 0, x1 = 0;  // inclusive bounding box
};

struct ComponentLabels {
  std::vector<int> id;  // per pixel, -1 outside the class
  std::vector<Component> components;
};

/// 8-connected components of the pixels equal to `cls` in a single image,
/// two-pass union-find.
inline ComponentLabels connected_components(const LabelMap& image, int cls) {
  if (image.n != 1) throw std::invalid_argument("connected_components: expects a single image");
  const int h = image.h, w = image.w;
  std::vector<int> parent;
  auto find = [&](int a) {
    while (parent[a] != a) a = parent[a] = parent[parent[a]];
    return a;
  };
  auto unite = [&](int a, int b) {
    a = find(a), b = find(b);
    if (a != b) parent[std::max(a, b)] = std::min(a, b);
  };
  std::vector<int> provisional(std::size_t(h) * w, -1);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      if (image.at(y, x) != cls) continue;
      int label = -1;
      const int ny[4] = {y, y - 1, y - 1, y - 1}, nx[4] = {x - 1, x - 1, x, x + 1};
      for (int k = 0; k < 4; ++k) {
        if (ny[k] < 0 || nx[k] < 0 || nx[k] >= w) continue;
        const int other = provisional[std::size_t(ny[k]) * w + nx[k]];
        if (other < 0) continue;
        if (label < 0)
          label = other;
        else
          unite(label, other);
      }
      if (label < 0) {
        label = int(parent.size());
        parent.push_back(label);
      }
      provisional[std::size_t(y) * w + x] = label;
    }
  ComponentLabels out;
  out.id.assign(provisional.size(), -1);
  std::vector<int> compact(parent.size(), -1);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const std::size_t i = std::size_t(y) * w + x;
      if (provisional[i] < 0) continue;
      const int root = find(provisional[i]);
      if (compact[root] < 0) {
        compact[root] = int(out.components.size());
        out.components.push_back(Component{0, y, y, x, x});
      }
      const int c = compact[root];
      out.id[i] = c;
      Component& comp = out.components[c];
      ++comp.area;
      comp.y0 = std::min(comp.y0, y), comp.y1 = std::max(comp.y1, y);
      comp.x0 = std::min(comp.x0, x), comp.x1 = std::max(comp.x1, x);
    }
  return out;
}

struct SmallObjectOptions {
  int cls = 2;  // building in the 3-class layout
  int threshold_px = 400;
  int margin_px = 8;
  bool restricted = true;
};

/// Intersection and union for one image. S = ground-truth components of
/// `cls` with area below the threshold; P = predicted `cls` pixels.
/// Restricted: |P∩S| / |(P∩R) ∪ S| with R the union of the components'
/// bounding boxes grown by the margin. Unrestricted: |P∩S| / |P ∪ S|.
inline SmallObjectCounts small_object_counts(const LabelMap& gt, const LabelMap& pred,
                                             const SmallObjectOptions& opt = {}) {
  if (!gt.same_extent(pred)) throw ShapeError("small_building_iou: ground truth and prediction extents differ");
  SmallObjectCounts total;
  for (int b = 0; b < gt.n; ++b) {
    const LabelMap g = gt.image(b), p = pred.image(b);
    const ComponentLabels cc = connected_components(g, opt.cls);
    std::vector<char> small(cc.components.size(), 0);
    std::vector<char> region(g.plane(), 0);
    SmallObjectCounts counts;
    counts.components = int(cc.components.size());
    for (std::size_t c = 0; c < cc.components.size(); ++c) {
      const Component& comp = cc.components[c];
      if (comp.area >= opt.threshold_px) continue;
      small[c] = 1;
      ++counts.small_components;
      for (int y = std::max(0, comp.y0 - opt.margin_px); y <= std::min(g.h - 1, comp.y1 + opt.margin_px); ++y)
        for (int x = std::max(0, comp.x0 - opt.margin_px); x <= std::min(g.w - 1, comp.x1 + opt.margin_px); ++x)
          region[std::size_t(y) * g.w + x] = 1;
    }
    for (std::size_t i = 0; i < g.plane(); ++i) {
      const bool in_s = cc.id[i] >= 0 && small[cc.id[i]];
      const bool in_p = p.labels[i] == opt.cls && (!opt.restricted || region[i]);
      counts.intersection += in_s && in_p;
      counts.uni += in_s || in_p;
    }
    total += counts;
  }
  return total;
}

inline double small_building_iou(const LabelMap& gt, const LabelMap& pred, const SmallObjectOptions& opt = {}) {
  return small_object_counts(gt, pred, opt).iou();
}

/// Running evaluation over a dataset: confusion matrix plus both
/// small-building protocols, each summed over images.
class EvalAccumulator {
 public:
  explicit EvalAccumulator(int num_classes, SmallObjectOptions opt = {})
      : cm_(num_classes), opt_(opt), small_enabled_(opt.cls >= 0 && opt.cls < num_classes) {}

  void add(const LabelMap& gt, const LabelMap& pred) {
    cm_.accumulate(gt, pred);
    if (!small_enabled_) return;
    SmallObjectOptions o = opt_;
    o.restricted = true;
    restricted_ += small_object_counts(gt, pred, o);
    o.restricted = false;
    unrestricted_ += small_object_counts(gt, pred, o);
  }

  const ConfusionMatrix& confusion() const { return cm_; }

  EvalReport report() const {
    EvalReport r = derive_metrics(cm_);
    if (small_enabled_) {
      r.small_building = restricted_;
      r.small_building_unrestricted = unrestricted_;
    }
    return r;
  }

 private:
  ConfusionMatrix cm_;
  SmallObjectOptions opt_;
  bool small_enabled_;
  SmallObjectCounts restricted_, unrestricted_;
};

/// Per-pixel argmax over classes of [n, K, h, w] scores.
template <typename T>
LabelMap argmax_labels(const Tensor<T>& logits) {
  const Shape4 s = logits.shape();
  LabelMap out(s.n, s.h, s.w);
  const std::size_t plane = s.plane();
  for (int n = 0; n < s.n; ++n)
    for (std::size_t i = 0; i < plane; ++i) {
      int best = 0;
      T best_v = logits.data()[std::size_t(n) * s.c * plane + i];
      for (int c = 1; c < s.c; ++c) {
        const T v = logits.data()[(std::size_t(n) * s.c + c) * plane + i];
        if (v > best_v) best_v = v, best = c;
      }
      out.labels[std::size_t(n) * plane + i] = best;
    }
  return out;
}

}  // namespace scanet
