#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "scanet/ops.hpp"

namespace scanet::testing {

template <typename T = double>
Tensor<T> random_tensor(Shape4 s, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0, bool grad = false) {
  std::uniform_real_distribution<double> d(lo, hi);
  std::vector<T> v(s.numel());
  for (auto& e : v) e = T(d(rng));
  Tensor<T> t(s, std::move(v));
  t.set_requires_grad(grad);
  return t;
}

/// Symmetric relative error with a floor to keep 0/0 out.
inline double rel_error(double analytic, double numeric) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-10});
  return std::abs(analytic - numeric) / denom;
}

/// Central difference of `loss` with respect to one entry of `t`.
template <typename T>
double central_difference(Tensor<T>& t, std::size_t i, const std::function<double()>& loss, double step = 1e-3) {
  const T saved = t.values()[i];
  t.values()[i] = saved + T(step);
  const double up = loss();
  t.values()[i] = saved - T(step);
  const double down = loss();
  t.values()[i] = saved;
  return (up - down) / (2.0 * step);
}

/// Maximum relative error over every entry of every tensor in `inputs`,
/// comparing backward() through `build` with central differences.
template <typename T>
double max_grad_error(std::vector<Tensor<T>*> inputs, const std::function<Tensor<T>()>& build, double step = 1e-4) {
  for (auto* t : inputs) {
    t->set_requires_grad(true);
    t->zero_grad();
  }
  Tensor<T> loss = build();
  loss.backward();
  std::vector<std::vector<T>> analytic;
  for (auto* t : inputs) analytic.emplace_back(t->grad().begin(), t->grad().end());
  auto value = [&] {
    NoGradGuard ng;
    return double(build().item());
  };
  double worst = 0;
  for (std::size_t k = 0; k < inputs.size(); ++k)
    for (std::size_t i = 0; i < inputs[k]->numel(); ++i)
      worst = std::max(worst, rel_error(analytic[k][i], central_difference(*inputs[k], i, value, step)));
  return worst;
}

/// sum(x * w) for a fixed random w: a generic scalar probe of an output.
template <typename T>
Tensor<T> probe(const Tensor<T>& x, std::uint64_t seed = 99) {
  std::mt19937_64 rng(seed);
  return sum(mul(x, random_tensor<T>(x.shape(), rng)));
}

}  // namespace scanet::testing
