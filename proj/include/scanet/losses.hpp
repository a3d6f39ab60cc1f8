#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "scanet/labels.hpp"
#include "scanet/ops.hpp"
#include "scanet/schedule.hpp"

namespace scanet {

/// Training target: a hard label map, plus optional per-pixel class
/// distributions [n, K, h, w] (MixUp) that only the CE term consumes.
template <typename T>
struct Target {
  LabelMap hard;
  std::vector<T> soft;

  bool has_soft() const { return !soft.empty(); }
};

namespace detail {

// Per-pixel softmax over the class axis of [n, K, h, w] logits.
template <typename T>
std::vector<T> softmax_classes(const Tensor<T>& logits) {
  const Shape4 s = logits.shape();
  const std::size_t plane = s.plane();
  std::vector<T> p(s.numel());
  for (int n = 0; n < s.n; ++n)
    for (std::size_t i = 0; i < plane; ++i) {
      const std::size_t base = std::size_t(n) * s.c * plane + i;
      T mx = logits.data()[base];
      for (int k = 1; k < s.c; ++k) mx = std::max(mx, logits.data()[base + k * plane]);
      T z = 0;
      for (int k = 0; k < s.c; ++k) {
        const T e = std::exp(logits.data()[base + k * plane] - mx);
        p[base + k * plane] = e;
        z += e;
      }
      for (int k = 0; k < s.c; ++k) p[base + k * plane] /= z;
    }
  return p;
}

// Chains d(loss)/d(prob) into d(loss)/d(logit) and accumulates into `out`.
template <typename T>
void softmax_backward(const Shape4& s, const std::vector<T>& p, const std::vector<T>& dp, T upstream, T* out) {
  const std::size_t plane = s.plane();
  for (int n = 0; n < s.n; ++n)
    for (std::size_t i = 0; i < plane; ++i) {
      const std::size_t base = std::size_t(n) * s.c * plane + i;
      T dot = 0;
      for (int k = 0; k < s.c; ++k) dot += p[base + k * plane] * dp[base + k * plane];
      for (int k = 0; k < s.c; ++k) {
        const std::size_t j = base + k * plane;
        out[j] += upstream * p[j] * (dp[j] - dot);
      }
    }
}

template <typename T>
void check_target(const Tensor<T>& logits, const LabelMap& target, const char* where) {
  const Shape4 s = logits.shape();
  if (target.n != s.n || target.h != s.h || target.w != s.w)
    throw ShapeError(std::string(where) + ": target extent does not match logits " + s.str());
  check_labels(target, s.c, where);
}

template <typename T>
std::vector<int> present_classes(const LabelMap& target, int k) {
  std::vector<char> seen(k, 0);
  for (int v : target.labels) seen[v] = 1;
  std::vector<int> out;
  for (int c = 0; c < k; ++c)
    if (seen[c]) out.push_back(c);
  return out;
}

}  // namespace detail

/// Mean per-pixel cross-entropy against a class distribution [n, K, h, w].
template <typename T>
Tensor<T> ce_loss(const Tensor<T>& logits, const std::vector<T>& soft_target) {
  const Shape4 s = logits.shape();
  if (soft_target.size() != s.numel()) throw ShapeError("ce_loss: soft target size does not match logits " + s.str());
  const std::size_t plane = s.plane();
  const T pixels = T(std::size_t(s.n) * plane);
  std::vector<T> lsm(s.numel());
  T loss = 0;
  for (int n = 0; n < s.n; ++n)
    for (std::size_t i = 0; i < plane; ++i) {
      const std::size_t base = std::size_t(n) * s.c * plane + i;
      T mx = logits.data()[base];
      for (int k = 1; k < s.c; ++k) mx = std::max(mx, logits.data()[base + k * plane]);
      T z = 0;
      for (int k = 0; k < s.c; ++k) z += std::exp(logits.data()[base + k * plane] - mx);
      const T lz = std::log(z) + mx;
      for (int k = 0; k < s.c; ++k) {
        const std::size_t j = base + k * plane;
        lsm[j] = logits.data()[j] - lz;
        loss -= soft_target[j] * lsm[j];
      }
    }
  loss /= pixels;
  return make_result(Shape4{}, Buffer<T>{loss}, {&logits},
                     [lsm = std::move(lsm), soft_target, pixels](Node<T>& self) {
                       T* g = input_grad(self, 0);
                       if (!g) return;
                       const Shape4 s = self.inputs[0]->shape;
                       const std::size_t plane = s.plane();
                       const T up = self.grad[0] / pixels;
                       for (int n = 0; n < s.n; ++n)
                         for (std::size_t i = 0; i < plane; ++i) {
                           const std::size_t base = std::size_t(n) * s.c * plane + i;
                           T mass = 0;
                           for (int k = 0; k < s.c; ++k) mass += soft_target[base + k * plane];
                           for (int k = 0; k < s.c; ++k) {
                             const std::size_t j = base + k * plane;
                             g[j] += up * (std::exp(lsm[j]) * mass - soft_target[j]);
                           }
                         }
                     });
}

template <typename T>
std::vector<T> one_hot(const LabelMap& target, int num_classes) {
  std::vector<T> out(std::size_t(target.n) * num_classes * target.plane(), T(0));
  const std::size_t plane = target.plane();
  for (int n = 0; n < target.n; ++n)
    for (std::size_t i = 0; i < plane; ++i)
      out[(std::size_t(n) * num_classes + target.labels[n * plane + i]) * plane + i] = T(1);
  return out;
}

template <typename T>
Tensor<T> ce_loss(const Tensor<T>& logits, const LabelMap& target) {
  detail::check_target(logits, target, "ce_loss");
  return ce_loss(logits, one_hot<T>(target, logits.shape().c));
}

/// 1 - mean over ground-truth-present classes of (2|P∩G| + eps) / (|P| + |G| + eps)
/// with P the softmax probabilities.
template <typename T>
Tensor<T> dice_loss(const Tensor<T>& logits, const LabelMap& target, T eps = T(1)) {
  detail::check_target(logits, target, "dice_loss");
  const Shape4 s = logits.shape();
  const std::size_t plane = s.plane();
  auto p = detail::softmax_classes(logits);
  const auto classes = detail::present_classes<T>(target, s.c);
  std::vector<T> inter(s.c, 0), psum(s.c, 0), gsum(s.c, 0);
  for (int n = 0; n < s.n; ++n)
    for (std::size_t i = 0; i < plane; ++i) {
      const int y = target.labels[n * plane + i];
      for (int k = 0; k < s.c; ++k) psum[k] += p[(std::size_t(n) * s.c + k) * plane + i];
      inter[y] += p[(std::size_t(n) * s.c + y) * plane + i];
      gsum[y] += 1;
    }
  T mean_dice = 0;
  for (int c : classes) mean_dice += (2 * inter[c] + eps) / (psum[c] + gsum[c] + eps);
  mean_dice /= T(classes.size());
  return make_result(Shape4{}, Buffer<T>{T(1) - mean_dice}, {&logits},
                     [p = std::move(p), classes, inter, psum, gsum, eps, target](Node<T>& self) {
                       T* g = input_grad(self, 0);
                       if (!g) return;
                       const Shape4 s = self.inputs[0]->shape;
                       const std::size_t plane = s.plane();
                       std::vector<T> dp(p.size(), T(0));
                       const T m = T(classes.size());
                       for (int c : classes) {
                         const T den = psum[c] + gsum[c] + eps;
                         const T num = 2 * inter[c] + eps;
                         for (int n = 0; n < s.n; ++n)
                           for (std::size_t i = 0; i < plane; ++i) {
                             const T gi = target.labels[n * plane + i] == c ? T(1) : T(0);
                             dp[(std::size_t(n) * s.c + c) * plane + i] = -(2 * gi * den - num) / (den * den) / m;
                           }
                       }
                       detail::softmax_backward(s, p, dp, self.grad[0], g);
                     });
}

/// Gradient of the Lovasz extension of the Jaccard loss, given ground-truth
/// membership sorted by decreasing error.
template <typename T>
std::vector<T> lovasz_grad(const std::vector<T>& sorted_fg) {
  const std::size_t n = sorted_fg.size();
  std::vector<T> jaccard(n);
  const T gts = std::accumulate(sorted_fg.begin(), sorted_fg.end(), T(0));
  T cum_fg = 0, cum_bg = 0;
  for (std::size_t i = 0; i < n; ++i) {
    cum_fg += sorted_fg[i];
    cum_bg += T(1) - sorted_fg[i];
    const T intersection = gts - cum_fg;
    const T uni = gts + cum_bg;
    jaccard[i] = T(1) - intersection / uni;
  }
  for (std::size_t i = n; i-- > 1;) jaccard[i] -= jaccard[i - 1];
  return jaccard;
}

/// Lovasz-Softmax over all pixels of the batch, averaged over the classes
/// present in the ground truth.
template <typename T>
Tensor<T> lovasz_softmax(const Tensor<T>& logits, const LabelMap& target) {
  detail::check_target(logits, target, "lovasz_softmax");
  const Shape4 s = logits.shape();
  const std::size_t plane = s.plane();
  const std::size_t pixels = std::size_t(s.n) * plane;
  auto p = detail::softmax_classes(logits);
  const auto classes = detail::present_classes<T>(target, s.c);
  // d(loss)/d(prob), filled while the forward value is computed.
  std::vector<T> dp(p.size(), T(0));
  T loss = 0;
  std::vector<T> err(pixels), fg(pixels), sorted_fg(pixels);
  std::vector<std::size_t> order(pixels);
  const T m = T(classes.size());
  for (int c : classes) {
    for (int n = 0; n < s.n; ++n)
      for (std::size_t i = 0; i < plane; ++i) {
        const std::size_t px = std::size_t(n) * plane + i;
        fg[px] = target.labels[px] == c ? T(1) : T(0);
        err[px] = std::abs(fg[px] - p[(std::size_t(n) * s.c + c) * plane + i]);
      }
    std::iota(order.begin(), order.end(), std::size_t(0));
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return err[a] > err[b]; });
    for (std::size_t r = 0; r < pixels; ++r) sorted_fg[r] = fg[order[r]];
    const auto grad = lovasz_grad(sorted_fg);
    for (std::size_t r = 0; r < pixels; ++r) {
      const std::size_t px = order[r];
      loss += err[px] * grad[r] / m;
      const int n = int(px / plane);
      const std::size_t i = px % plane;
      // err = |fg - p|: derivative -1 for foreground pixels, +1 otherwise.
      dp[(std::size_t(n) * s.c + c) * plane + i] = (fg[px] > 0 ? T(-1) : T(1)) * grad[r] / m;
    }
  }
  return make_result(Shape4{}, Buffer<T>{loss}, {&logits}, [p = std::move(p), dp = std::move(dp)](Node<T>& self) {
    T* g = input_grad(self, 0);
    if (!g) return;
    detail::softmax_backward(self.inputs[0]->shape, p, dp, self.grad[0], g);
  });
}

/// Nearest-neighbour downsampling of a label map to (h, w), binarised to
/// changed (label != 0) vs unchanged.
inline std::vector<int> change_mask_at(const LabelMap& mask, int h, int w) {
  std::vector<int> out(std::size_t(mask.n) * h * w);
  for (int n = 0; n < mask.n; ++n)
    for (int y = 0; y < h; ++y) {
      const int sy = int((long(y) * mask.h) / h);
      for (int x = 0; x < w; ++x) {
        const int sx = int((long(x) * mask.w) / w);
        out[(std::size_t(n) * h + y) * w + x] = mask.at(n, sy, sx) != 0 ? 1 : 0;
      }
    }
  return out;
}

/// Margin contrastive loss between L2-normalised feature vectors of the two
/// streams: d^2 on unchanged pixels, max(0, margin - d)^2 on changed pixels.
template <typename T>
Tensor<T> contrastive_loss(const Tensor<T>& f1, const Tensor<T>& f2, const LabelMap& mask, T margin = T(1)) {
  if (!(f1.shape() == f2.shape()))
    throw ShapeError("contrastive_loss: feature shapes differ: " + f1.shape().str() + " vs " + f2.shape().str());
  const Shape4 s = f1.shape();
  if (mask.n != s.n) throw ShapeError("contrastive_loss: mask batch does not match features");
  const auto changed = change_mask_at(mask, s.h, s.w);
  const std::size_t plane = s.plane();
  const T pixels = T(std::size_t(s.n) * plane);
  constexpr T norm_eps = T(1e-12);
  // Per pixel: inverse norms of both streams and the distance d.
  std::vector<T> r1(std::size_t(s.n) * plane), r2(r1.size()), dist(r1.size());
  T loss = 0;
  for (int n = 0; n < s.n; ++n)
    for (std::size_t i = 0; i < plane; ++i) {
      const std::size_t px = std::size_t(n) * plane + i;
      T s1 = 0, s2 = 0;
      for (int c = 0; c < s.c; ++c) {
        const std::size_t j = (std::size_t(n) * s.c + c) * plane + i;
        s1 += f1.data()[j] * f1.data()[j];
        s2 += f2.data()[j] * f2.data()[j];
      }
      r1[px] = T(1) / std::sqrt(s1 + norm_eps);
      r2[px] = T(1) / std::sqrt(s2 + norm_eps);
      T d2 = 0;
      for (int c = 0; c < s.c; ++c) {
        const std::size_t j = (std::size_t(n) * s.c + c) * plane + i;
        const T diff = f1.data()[j] * r1[px] - f2.data()[j] * r2[px];
        d2 += diff * diff;
      }
      dist[px] = std::sqrt(d2);
      if (changed[px]) {
        const T hinge = std::max(T(0), margin - dist[px]);
        loss += hinge * hinge;
      } else {
        loss += d2;
      }
    }
  loss /= pixels;
  return make_result(Shape4{}, Buffer<T>{loss}, {&f1, &f2},
                     [changed, r1 = std::move(r1), r2 = std::move(r2), dist = std::move(dist), margin,
                      pixels](Node<T>& self) {
                       T* g1 = input_grad(self, 0);
                       T* g2 = input_grad(self, 1);
                       const Shape4 s = self.inputs[0]->shape;
                       const T* a = input_value(self, 0);
                       const T* b = input_value(self, 1);
                       const std::size_t plane = s.plane();
                       const T up = self.grad[0] / pixels;
                       std::vector<T> du(s.c);
                       for (int n = 0; n < s.n; ++n)
                         for (std::size_t i = 0; i < plane; ++i) {
                           const std::size_t px = std::size_t(n) * plane + i;
                           // coef * (u1 - u2) is d(term)/d(u1).
                           T coef;
                           if (changed[px]) {
                             const T d = dist[px];
                             coef = (d < margin && d > T(0)) ? T(-2) * (margin - d) / d : T(0);
                           } else {
                             coef = T(2);
                           }
                           if (coef == T(0)) continue;
                           T dot1 = 0, dot2 = 0;
                           for (int c = 0; c < s.c; ++c) {
                             const std::size_t j = (std::size_t(n) * s.c + c) * plane + i;
                             du[c] = coef * (a[j] * r1[px] - b[j] * r2[px]);
                             dot1 += a[j] * du[c];
                             dot2 += b[j] * du[c];
                           }
                           for (int c = 0; c < s.c; ++c) {
                             const std::size_t j = (std::size_t(n) * s.c + c) * plane + i;
                             const T r1c = r1[px] * r1[px] * r1[px];
                             const T r2c = r2[px] * r2[px] * r2[px];
                             if (g1) g1[j] += up * (r1[px] * du[c] - r1c * a[j] * dot1);
                             if (g2) g2[j] -= up * (r2[px] * du[c] - r2c * b[j] * dot2);
                           }
                         }
                     });
}

struct LossOptions {
  double dice_eps = 1.0;
  double contrastive_margin = 1.0;
  bool report_all = false;  // also value zero-weight terms (no graph) for logging
};

/// Per-component values; a component is empty when its weight was zero and it
/// was therefore not evaluated.
struct LossBreakdown {
  LossWeights weights;
  std::optional<double> ce, dice, lovasz, contrastive;
  double total = 0.0;

  /// sum of weight * component over evaluated components.
  double resum() const {
    return weights.ce * ce.value_or(0) + weights.dice * dice.value_or(0) + weights.lovasz * lovasz.value_or(0) +
           weights.contrastive * contrastive.value_or(0);
  }
};

template <typename T>
struct CompositeLoss {
  Tensor<T> total;
  LossBreakdown breakdown;
};

/// Weighted sum of CE, Dice, Lovasz-Softmax and contrastive terms.
template <typename T>
CompositeLoss<T> composite_loss(const Tensor<T>& logits, const Target<T>& target, const Tensor<T>& feat_a,
                                const Tensor<T>& feat_b, const LossWeights& w, const LossOptions& opt = {}) {
  CompositeLoss<T> out;
  out.breakdown.weights = w;
  std::vector<Tensor<T>> terms;
  auto term = [&](double weight, std::optional<double>& slot, auto&& compute) {
    if (weight > 0) {
      Tensor<T> l = compute();
      slot = double(l.item());
      terms.push_back(scale(l, T(weight)));
    } else if (opt.report_all) {
      NoGradGuard no_grad;
      slot = double(compute().item());
    }
  };
  term(w.ce, out.breakdown.ce,
       [&] { return target.has_soft() ? ce_loss(logits, target.soft) : ce_loss(logits, target.hard); });
  term(w.dice, out.breakdown.dice, [&] { return dice_loss(logits, target.hard, T(opt.dice_eps)); });
  term(w.lovasz, out.breakdown.lovasz, [&] { return lovasz_softmax(logits, target.hard); });
  term(w.contrastive, out.breakdown.contrastive,
       [&] { return contrastive_loss(feat_a, feat_b, target.hard, T(opt.contrastive_margin)); });
  if (terms.empty()) throw std::invalid_argument("composite_loss: every weight is zero");
  Tensor<T> total = terms.front();
  for (std::size_t i = 1; i < terms.size(); ++i) total = add(total, terms[i]);
  out.total = total;
  out.breakdown.total = double(total.item());
  return out;
}

template <typename T>
CompositeLoss<T> composite_loss(const Tensor<T>& logits, const Target<T>& target, const Tensor<T>& feat_a,
                                const Tensor<T>& feat_b, int epoch, const PhaseSchedule& schedule,
                                const LossOptions& opt = {}) {
  return composite_loss(logits, target, feat_a, feat_b, schedule.weights_at(epoch), opt);
}

}  // namespace scanet
