#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include "scanet/ops.hpp"

namespace scanet {

template <typename T>
struct NamedParam {
  std::string name;
  Tensor<T>* tensor;
};

/// Walks a module tree and records every parameter under a dotted path.
template <typename T>
class ParamCollector {
 public:
  void add(std::string_view name, Tensor<T>& t) {
    if (t.defined()) params_.push_back({prefix_ + std::string(name), &t});
  }

  template <typename Module>
  void child(std::string_view name, Module& m) {
    const std::size_t saved = prefix_.size();
    prefix_ += std::string(name) + ".";
    m.collect(*this);
    prefix_.resize(saved);
  }

  std::vector<NamedParam<T>>& params() { return params_; }

 private:
  std::string prefix_;
  std::vector<NamedParam<T>> params_;
};

template <typename T, typename Module>
std::vector<NamedParam<T>> collect_params(Module& m) {
  ParamCollector<T> pc;
  m.collect(pc);
  return std::move(pc.params());
}

/// Forward-pass mode. Dropout draws from `rng` only in training mode.
struct RunMode {
  bool training = false;
  std::mt19937_64* rng = nullptr;

  static RunMode eval() { return {}; }
  static RunMode train(std::mt19937_64& r) { return {true, &r}; }
};

namespace init {

/// Normal draw truncated to +-2 standard deviations.
template <typename T>
Tensor<T> truncated_normal(Shape4 shape, double stddev, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, 1.0);
  std::vector<T> v(shape.numel());
  for (auto& e : v) {
    double z = dist(rng);
    while (std::abs(z) > 2.0) z = dist(rng);
    e = T(z * stddev);
  }
  Tensor<T> t(shape, std::move(v));
  t.set_requires_grad(true);
  return t;
}

template <typename T>
Tensor<T> constant(Shape4 shape, T value) {
  Tensor<T> t(shape, value);
  t.set_requires_grad(true);
  return t;
}

}  // namespace init

template <typename T>
class Conv2d {
 public:
  Conv2d() = default;

  /// `projection` selects the small fixed-scale init used for attention and
  /// MLP projections; otherwise the scale follows fan-in.
  Conv2d(int in, int out, Conv2dSpec spec, std::mt19937_64& rng, bool with_bias = true, bool projection = false)
      : spec_(spec), in_(in), out_(out) {
    if (in % spec.groups != 0 || out % spec.groups != 0)
      throw ShapeError("Conv2d: groups must divide channels (" + std::to_string(in) + "->" + std::to_string(out) + ")");
    const int fan_in = (in / spec.groups) * spec.kernel_h * spec.kernel_w;
    const double stddev = projection ? 0.02 : std::sqrt(1.0 / fan_in);
    weight_ = init::truncated_normal<T>({out, in / spec.groups, spec.kernel_h, spec.kernel_w}, stddev, rng);
    if (with_bias) bias_ = init::constant<T>({1, out, 1, 1}, T(0));
  }

  Tensor<T> operator()(const Tensor<T>& x) const {
    if (x.shape().c != in_)
      throw ShapeError("Conv2d: expected " + std::to_string(in_) + " input channels, got " + x.shape().str());
    return conv2d(x, weight_, bias_, spec_);
  }

  void collect(ParamCollector<T>& pc) {
    pc.add("weight", weight_);
    pc.add("bias", bias_);
  }

  int in_channels() const { return in_; }
  int out_channels() const { return out_; }
  const Conv2dSpec& spec() const { return spec_; }
  Tensor<T>& weight() { return weight_; }
  Tensor<T>& bias() { return bias_; }

 private:
  Conv2dSpec spec_;
  int in_ = 0;
  int out_ = 0;
  Tensor<T> weight_;
  Tensor<T> bias_;
};

/// LayerNorm over the channel axis of a [n, c, h, w] map.
template <typename T>
class ChannelLayerNorm {
 public:
  ChannelLayerNorm() = default;
  explicit ChannelLayerNorm(int channels)
      : gamma_(init::constant<T>({1, channels, 1, 1}, T(1))), beta_(init::constant<T>({1, channels, 1, 1}, T(0))) {}

  Tensor<T> operator()(const Tensor<T>& x) const { return layer_norm_channels(x, gamma_, beta_); }

  void collect(ParamCollector<T>& pc) {
    pc.add("weight", gamma_);
    pc.add("bias", beta_);
  }

 private:
  Tensor<T> gamma_;
  Tensor<T> beta_;
};

/// Squeeze-and-excitation gate: global average pool, bottleneck, sigmoid.
/// Returns the [n, c, 1, 1] gate, not the gated map.
template <typename T>
class ChannelGate {
 public:
  ChannelGate() = default;
  ChannelGate(int channels, int reduction, std::mt19937_64& rng)
      : squeeze_(channels, std::max(1, channels / reduction), Conv2dSpec{}, rng),
        excite_(std::max(1, channels / reduction), channels, Conv2dSpec{}, rng) {}

  Tensor<T> operator()(const Tensor<T>& x) const {
    const Tensor<T> pooled = adaptive_avg_pool(x, 1, 1);
    return sigmoid(excite_(gelu(squeeze_(pooled))));
  }

  void collect(ParamCollector<T>& pc) {
    pc.child("squeeze", squeeze_);
    pc.child("excite", excite_);
  }

 private:
  Conv2d<T> squeeze_;
  Conv2d<T> excite_;
};

}  // namespace scanet
