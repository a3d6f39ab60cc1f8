#pragma once

#include <cmath>
#include <cstdint>
#include <algorithm>
#include <map>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "scanet/config.hpp"
#include "scanet/nn.hpp"

namespace scanet {

template <typename T>
struct ParamGroup {
  std::string name;
  double lr = 0.0;
  std::vector<NamedParam<T>> params;

  std::size_t numel() const {
    std::size_t n = 0;
    for (const auto& p : params) n += p.tensor->numel();
    return n;
  }
};

/// Backbone (encoder.*) and head groups; a frozen backbone moves the encoder
/// parameters into `frozen`, which the optimizer never touches.
template <typename T>
struct ParamGroups {
  ParamGroup<T> backbone;
  ParamGroup<T> head;
  std::vector<NamedParam<T>> frozen;

  std::size_t numel() const {
    std::size_t n = backbone.numel() + head.numel();
    for (const auto& p : frozen) n += p.tensor->numel();
    return n;
  }
};

inline bool is_backbone_param(const std::string& name) { return name.rfind("encoder.", 0) == 0; }

template <typename T, typename Model>
ParamGroups<T> build_param_groups(Model& model, const TrainConfig& cfg) {
  ParamGroups<T> g;
  g.backbone.name = "backbone";
  g.backbone.lr = cfg.base_lr * cfg.backbone_lr_multiplier;
  g.head.name = "head";
  g.head.lr = cfg.base_lr;
  for (auto& p : model.parameters()) {
    if (!is_backbone_param(p.name)) g.head.params.push_back(p);
    else if (cfg.freeze_backbone) g.frozen.push_back(p);
    else g.backbone.params.push_back(p);
  }
  return g;
}

/// Adam with decoupled weight decay. Moments are keyed by parameter name so
/// they survive a checkpoint round trip.
template <typename T>
class AdamW {
 public:
  struct Moments {
    std::vector<T> m, v;
  };

  explicit AdamW(const TrainConfig& cfg)
      : beta1_(cfg.beta1), beta2_(cfg.beta2), eps_(cfg.adam_eps), weight_decay_(cfg.weight_decay) {}

  /// One update over both groups; `lr_scale` multiplies every group's lr.
  void step(ParamGroups<T>& groups, double lr_scale = 1.0) {
    ++t_;
    const double c1 = 1.0 - std::pow(beta1_, double(t_));
    const double c2 = 1.0 - std::pow(beta2_, double(t_));
    for (ParamGroup<T>* g : {&groups.backbone, &groups.head}) {
      const double lr = g->lr * lr_scale;
      for (auto& p : g->params) {
        Tensor<T>& w = *p.tensor;
        auto values = w.values();
        Moments& st = state_[p.name];
        if (st.m.empty()) {
          st.m.assign(values.size(), T(0));
          st.v.assign(values.size(), T(0));
        }
        if (st.m.size() != values.size())
          throw std::logic_error("AdamW: moment size changed for " + p.name);
        const bool has_grad = w.has_grad();
        const auto grad = has_grad ? w.grad() : std::span<T>{};
        for (std::size_t i = 0; i < values.size(); ++i) {
          const double gi = has_grad ? double(grad[i]) : 0.0;
          const double m = beta1_ * double(st.m[i]) + (1 - beta1_) * gi;
          const double v = beta2_ * double(st.v[i]) + (1 - beta2_) * gi * gi;
          st.m[i] = T(m);
          st.v[i] = T(v);
          double x = double(values[i]) * (1.0 - lr * weight_decay_);
          x -= lr * (m / c1) / (std::sqrt(v / c2) + eps_);
          values[i] = T(x);
        }
      }
    }
  }

  std::uint64_t steps() const { return t_; }
  void set_steps(std::uint64_t t) { t_ = t; }
  const std::map<std::string, Moments>& state() const { return state_; }
  std::map<std::string, Moments>& state() { return state_; }

 private:
  double beta1_, beta2_, eps_, weight_decay_;
  std::uint64_t t_ = 0;
  std::map<std::string, Moments> state_;
};

/// Multiplier on the base lr when cosine decay is on.
inline double cosine_factor(int epoch, int epochs) {
  return 0.5 * (1.0 + std::cos(3.141592653589793 * double(epoch) / double(std::max(1, epochs))));
}

}  // namespace scanet
