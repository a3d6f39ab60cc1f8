#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <numbers>
#include <random>
#include <vector>

#include "scanet/tensor.hpp"

namespace scanet {

namespace detail {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;

inline int broadcast_dim(int a, int b, const char* op) {
  if (a == b || b == 1) return a;
  if (a == 1) return b;
  throw ShapeError(std::string(op) + ": incompatible extents " + std::to_string(a) + " and " +
                   std::to_string(b));
}

inline Shape4 broadcast_shape(const Shape4& a, const Shape4& b, const char* op) {
  return {broadcast_dim(a.n, b.n, op), broadcast_dim(a.c, b.c, op), broadcast_dim(a.h, b.h, op),
          broadcast_dim(a.w, b.w, op)};
}

struct Strides4 {
  std::size_t n, c, h, w;
};

inline Strides4 broadcast_strides(const Shape4& s) {
  const std::size_t sw = 1, sh = std::size_t(s.w), sc = std::size_t(s.h) * s.w, sn = sc * s.c;
  return {s.n == 1 ? 0 : sn, s.c == 1 ? 0 : sc, s.h == 1 ? 0 : sh, s.w == 1 ? 0 : sw};
}

// Calls f(out_index, a_index, b_index) over the broadcast output shape.
template <typename F>
void for_each_broadcast(const Shape4& out, const Shape4& a, const Shape4& b, F&& f) {
  if (a == out && b == out) {
    for (std::size_t i = 0; i < out.numel(); ++i) f(i, i, i);
    return;
  }
  const Strides4 sa = broadcast_strides(a), sb = broadcast_strides(b);
  std::size_t o = 0;
  for (int n = 0; n < out.n; ++n)
    for (int c = 0; c < out.c; ++c)
      for (int y = 0; y < out.h; ++y) {
        const std::size_t ia = n * sa.n + c * sa.c + y * sa.h;
        const std::size_t ib = n * sb.n + c * sb.c + y * sb.h;
        for (int x = 0; x < out.w; ++x, ++o) f(o, ia + x * sa.w, ib + x * sb.w);
      }
}

template <typename T, typename Fwd, typename DA, typename DB>
Tensor<T> binary_op(const Tensor<T>& a, const Tensor<T>& b, const char* name, Fwd fwd, DA da, DB db) {
  const Shape4 out = broadcast_shape(a.shape(), b.shape(), name);
  Buffer<T> v(out.numel());
  const T* av = a.data();
  const T* bv = b.data();
  for_each_broadcast(out, a.shape(), b.shape(),
                     [&](std::size_t o, std::size_t ia, std::size_t ib) { v[o] = fwd(av[ia], bv[ib]); });
  const Shape4 as = a.shape(), bs = b.shape();
  return make_result(out, std::move(v), {&a, &b}, [as, bs, da, db](Node<T>& self) {
    T* ga = input_grad(self, 0);
    T* gb = input_grad(self, 1);
    const T* x = input_value(self, 0);
    const T* y = input_value(self, 1);
    const T* g = self.grad.data();
    for_each_broadcast(self.shape, as, bs, [&](std::size_t o, std::size_t ia, std::size_t ib) {
      if (ga) ga[ia] += g[o] * da(x[ia], y[ib]);
      if (gb) gb[ib] += g[o] * db(x[ia], y[ib]);
    });
  });
}

template <typename T, typename Fwd, typename Deriv>
Tensor<T> unary_op(const Tensor<T>& a, Fwd fwd, Deriv deriv) {
  Buffer<T> v(a.numel());
  const T* av = a.data();
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = fwd(av[i]);
  return make_result(a.shape(), std::move(v), {&a}, [deriv](Node<T>& self) {
    T* ga = input_grad(self, 0);
    if (!ga) return;
    const T* x = input_value(self, 0);
    const T* y = self.value.data();
    const T* g = self.grad.data();
    for (std::size_t i = 0; i < self.value.size(); ++i) ga[i] += g[i] * deriv(x[i], y[i]);
  });
}

}  // namespace detail

// Elementwise arithmetic with numpy-style broadcasting over size-1 axes.

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary_op(
      a, b, "add", [](T x, T y) { return x + y; }, [](T, T) { return T(1); }, [](T, T) { return T(1); });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary_op(
      a, b, "sub", [](T x, T y) { return x - y; }, [](T, T) { return T(1); }, [](T, T) { return T(-1); });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary_op(
      a, b, "mul", [](T x, T y) { return x * y; }, [](T, T y) { return y; }, [](T x, T) { return x; });
}

/// |a - b| elementwise; the subgradient at zero is taken as zero.
template <typename T>
Tensor<T> abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
  if (!(a.shape() == b.shape())) throw ShapeError("abs_diff: " + a.shape().str() + " vs " + b.shape().str());
  auto sgn = [](T d) { return d > 0 ? T(1) : (d < 0 ? T(-1) : T(0)); };
  return detail::binary_op(
      a, b, "abs_diff", [](T x, T y) { return std::abs(x - y); }, [sgn](T x, T y) { return sgn(x - y); },
      [sgn](T x, T y) { return -sgn(x - y); });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T s) {
  return detail::unary_op(a, [s](T x) { return x * s; }, [s](T, T) { return s; });
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& a) {
  return detail::unary_op(
      a, [](T x) { return x >= 0 ? T(1) / (T(1) + std::exp(-x)) : std::exp(x) / (T(1) + std::exp(x)); },
      [](T, T y) { return y * (T(1) - y); });
}

template <typename T>
Tensor<T> relu(const Tensor<T>& a) {
  return detail::unary_op(a, [](T x) { return x > 0 ? x : T(0); }, [](T x, T) { return x > 0 ? T(1) : T(0); });
}

/// Exact (erf) GELU.
template <typename T>
Tensor<T> gelu(const Tensor<T>& a) {
  constexpr T inv_sqrt2 = T(0.70710678118654752440);
  constexpr T inv_sqrt_2pi = T(0.39894228040143267794);
  return detail::unary_op(
      a, [](T x) { return T(0.5) * x * (T(1) + std::erf(x * inv_sqrt2)); },
      [](T x, T) { return T(0.5) * (T(1) + std::erf(x * inv_sqrt2)) + x * inv_sqrt_2pi * std::exp(-T(0.5) * x * x); });
}

template <typename T>
Tensor<T> sum(const Tensor<T>& a) {
  T s = 0;
  for (T v : a.values()) s += v;
  return make_result(Shape4{}, Buffer<T>{s}, {&a}, [](Node<T>& self) {
    T* ga = input_grad(self, 0);
    if (!ga) return;
    const T g = self.grad[0];
    for (std::size_t i = 0; i < self.inputs[0]->value.size(); ++i) ga[i] += g;
  });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& a) {
  return scale(sum(a), T(1) / T(a.numel()));
}

/// Concatenates along the channel axis; all inputs share n, h, w.
template <typename T>
Tensor<T> concat_channels(const std::vector<Tensor<T>>& parts) {
  if (parts.empty()) throw ShapeError("concat_channels: no inputs");
  Shape4 out = parts.front().shape();
  out.c = 0;
  for (const auto& p : parts) {
    const Shape4& s = p.shape();
    if (s.n != out.n || s.h != out.h || s.w != out.w)
      throw ShapeError("concat_channels: " + s.str() + " incompatible with " + parts.front().shape().str());
    out.c += s.c;
  }
  Buffer<T> v(out.numel());
  const std::size_t plane = out.plane();
  std::vector<int> offsets;
  int off = 0;
  for (const auto& p : parts) {
    offsets.push_back(off);
    const Shape4& s = p.shape();
    for (int n = 0; n < out.n; ++n)
      std::copy_n(p.data() + std::size_t(n) * s.c * plane, std::size_t(s.c) * plane,
                  v.data() + (std::size_t(n) * out.c + off) * plane);
    off += s.c;
  }
  return make_result_n<T>(out, std::move(v), parts, [offsets](Node<T>& self) {
    const Shape4& o = self.shape;
    const std::size_t plane = o.plane();
    for (std::size_t i = 0; i < self.inputs.size(); ++i) {
      T* gi = input_grad(self, i);
      if (!gi) continue;
      const int c = self.inputs[i]->shape.c;
      for (int n = 0; n < o.n; ++n) {
        const T* src = self.grad.data() + (std::size_t(n) * o.c + offsets[i]) * plane;
        T* dst = gi + std::size_t(n) * c * plane;
        for (std::size_t k = 0; k < std::size_t(c) * plane; ++k) dst[k] += src[k];
      }
    }
  });
}

/// Selects channels [begin, begin + count).
template <typename T>
Tensor<T> slice_channels(const Tensor<T>& a, int begin, int count) {
  const Shape4 s = a.shape();
  if (begin < 0 || count <= 0 || begin + count > s.c) throw ShapeError("slice_channels: out of range");
  Shape4 out = s;
  out.c = count;
  const std::size_t plane = s.plane();
  Buffer<T> v(out.numel());
  for (int n = 0; n < s.n; ++n)
    std::copy_n(a.data() + (std::size_t(n) * s.c + begin) * plane, std::size_t(count) * plane,
                v.data() + std::size_t(n) * count * plane);
  return make_result(out, std::move(v), {&a}, [begin](Node<T>& self) {
    T* ga = input_grad(self, 0);
    if (!ga) return;
    const Shape4& in = self.inputs[0]->shape;
    const Shape4& o = self.shape;
    const std::size_t plane = o.plane();
    for (int n = 0; n < o.n; ++n) {
      const T* src = self.grad.data() + std::size_t(n) * o.c * plane;
      T* dst = ga + (std::size_t(n) * in.c + begin) * plane;
      for (std::size_t k = 0; k < std::size_t(o.c) * plane; ++k) dst[k] += src[k];
    }
  });
}

struct Conv2dSpec {
  int kernel_h = 1;
  int kernel_w = 1;
  int stride_h = 1;
  int stride_w = 1;
  int pad_h = 0;
  int pad_w = 0;
  int dilation_h = 1;
  int dilation_w = 1;
  int groups = 1;

  /// Same-padding, stride 1 convolution with an optional dilation.
  static Conv2dSpec same(int kh, int kw, int dilation = 1, int groups = 1) {
    return {kh, kw, 1, 1, dilation * (kh - 1) / 2, dilation * (kw - 1) / 2, dilation, dilation, groups};
  }
  static Conv2dSpec strided(int k, int stride, int pad) { return {k, k, stride, stride, pad, pad, 1, 1, 1}; }

  int out_h(int h) const { return (h + 2 * pad_h - dilation_h * (kernel_h - 1) - 1) / stride_h + 1; }
  int out_w(int w) const { return (w + 2 * pad_w - dilation_w * (kernel_w - 1) - 1) / stride_w + 1; }
  bool pointwise() const {
    return kernel_h == 1 && kernel_w == 1 && stride_h == 1 && stride_w == 1 && pad_h == 0 && pad_w == 0;
  }
};

namespace detail {

template <typename T>
void im2col(const T* x, int channels, int h, int w, const Conv2dSpec& s, int oh, int ow, T* col) {
  for (int c = 0; c < channels; ++c)
    for (int ky = 0; ky < s.kernel_h; ++ky)
      for (int kx = 0; kx < s.kernel_w; ++kx) {
        T* row = col + ((std::size_t(c) * s.kernel_h + ky) * s.kernel_w + kx) * oh * ow;
        const T* plane = x + std::size_t(c) * h * w;
        for (int oy = 0; oy < oh; ++oy) {
          const int iy = oy * s.stride_h - s.pad_h + ky * s.dilation_h;
          T* dst = row + std::size_t(oy) * ow;
          if (iy < 0 || iy >= h) {
            std::fill_n(dst, ow, T(0));
            continue;
          }
          for (int ox = 0; ox < ow; ++ox) {
            const int ix = ox * s.stride_w - s.pad_w + kx * s.dilation_w;
            dst[ox] = (ix >= 0 && ix < w) ? plane[std::size_t(iy) * w + ix] : T(0);
          }
        }
      }
}

template <typename T>
void col2im(const T* col, int channels, int h, int w, const Conv2dSpec& s, int oh, int ow, T* x) {
  for (int c = 0; c < channels; ++c)
    for (int ky = 0; ky < s.kernel_h; ++ky)
      for (int kx = 0; kx < s.kernel_w; ++kx) {
        const T* row = col + ((std::size_t(c) * s.kernel_h + ky) * s.kernel_w + kx) * oh * ow;
        T* plane = x + std::size_t(c) * h * w;
        for (int oy = 0; oy < oh; ++oy) {
          const int iy = oy * s.stride_h - s.pad_h + ky * s.dilation_h;
          if (iy < 0 || iy >= h) continue;
          for (int ox = 0; ox < ow; ++ox) {
            const int ix = ox * s.stride_w - s.pad_w + kx * s.dilation_w;
            if (ix >= 0 && ix < w) plane[std::size_t(iy) * w + ix] += row[std::size_t(oy) * ow + ox];
          }
        }
      }
}

}  // namespace detail

/// 2-D cross-correlation. weight: [out, in/groups, kh, kw]; bias: [1, out, 1, 1] or undefined.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias, const Conv2dSpec& spec) {
  const Shape4 xs = x.shape();
  const Shape4 ws = weight.shape();
  const int groups = spec.groups;
  if (xs.c % groups != 0 || ws.n % groups != 0 || ws.c * groups != xs.c || ws.h != spec.kernel_h ||
      ws.w != spec.kernel_w) {
    throw ShapeError("conv2d: input " + xs.str() + " incompatible with weight " + ws.str());
  }
  if (bias.defined() && bias.numel() != std::size_t(ws.n)) throw ShapeError("conv2d: bias size mismatch");
  const int oh = spec.out_h(xs.h), ow = spec.out_w(xs.w);
  if (oh <= 0 || ow <= 0) throw ShapeError("conv2d: empty output for input " + xs.str());
  const Shape4 out{xs.n, ws.n, oh, ow};
  const int cin_g = xs.c / groups, cout_g = ws.n / groups;
  const int k = cin_g * spec.kernel_h * spec.kernel_w;
  const int p = oh * ow;
  const bool direct = spec.pointwise();
  Buffer<T> v(out.numel());
  Buffer<T> col(direct ? 0 : std::size_t(k) * p);
  for (int n = 0; n < xs.n; ++n)
    for (int g = 0; g < groups; ++g) {
      const T* xg = x.data() + (std::size_t(n) * xs.c + std::size_t(g) * cin_g) * xs.plane();
      const T* src = xg;
      if (!direct) {
        detail::im2col(xg, cin_g, xs.h, xs.w, spec, oh, ow, col.data());
        src = col.data();
      }
      detail::ConstMatMap<T> wm(weight.data() + std::size_t(g) * cout_g * k, cout_g, k);
      detail::ConstMatMap<T> cm(src, k, p);
      detail::MatMap<T> ym(v.data() + (std::size_t(n) * out.c + std::size_t(g) * cout_g) * p, cout_g, p);
      ym.noalias() = wm * cm;
      if (bias.defined())
        for (int o = 0; o < cout_g; ++o) ym.row(o).array() += bias.data()[g * cout_g + o];
    }
  return make_result(out, std::move(v), {&x, &weight, &bias}, [spec, direct](Node<T>& self) {
    const Shape4 xs = self.inputs[0]->shape;
    const Shape4 ws = self.inputs[1]->shape;
    const Shape4 os = self.shape;
    const int groups = spec.groups;
    const int cin_g = xs.c / groups, cout_g = ws.n / groups;
    const int k = cin_g * spec.kernel_h * spec.kernel_w;
    const int p = os.h * os.w;
    T* gx = input_grad(self, 0);
    T* gw = input_grad(self, 1);
    T* gb = self.inputs[2] ? input_grad(self, 2) : nullptr;
    const T* xv = input_value(self, 0);
    const T* wv = input_value(self, 1);
    Buffer<T> col(direct ? 0 : std::size_t(k) * p);
    Buffer<T> dcol(direct ? 0 : std::size_t(k) * p);
    for (int n = 0; n < xs.n; ++n)
      for (int g = 0; g < groups; ++g) {
        const T* gy = self.grad.data() + (std::size_t(n) * os.c + std::size_t(g) * cout_g) * p;
        detail::ConstMatMap<T> gym(gy, cout_g, p);
        if (gb)
          for (int o = 0; o < cout_g; ++o) gb[g * cout_g + o] += gym.row(o).sum();
        const T* xg = xv + (std::size_t(n) * xs.c + std::size_t(g) * cin_g) * xs.plane();
        if (gw) {
          const T* src = xg;
          if (!direct) {
            detail::im2col(xg, cin_g, xs.h, xs.w, spec, os.h, os.w, col.data());
            src = col.data();
          }
          detail::MatMap<T> gwm(gw + std::size_t(g) * cout_g * k, cout_g, k);
          gwm.noalias() += gym * detail::ConstMatMap<T>(src, k, p).transpose();
        }
        if (gx) {
          detail::ConstMatMap<T> wm(wv + std::size_t(g) * cout_g * k, cout_g, k);
          T* gxg = gx + (std::size_t(n) * xs.c + std::size_t(g) * cin_g) * xs.plane();
          if (direct) {
            detail::MatMap<T>(gxg, k, p).noalias() += wm.transpose() * gym;
          } else {
            detail::MatMap<T>(dcol.data(), k, p).noalias() = wm.transpose() * gym;
            detail::col2im(dcol.data(), cin_g, xs.h, xs.w, spec, os.h, os.w, gxg);
          }
        }
      }
  });
}

/// Normalizes across channels independently at every spatial position.
template <typename T>
Tensor<T> layer_norm_channels(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, T eps = T(1e-6)) {
  const Shape4 s = x.shape();
  if (gamma.numel() != std::size_t(s.c) || beta.numel() != std::size_t(s.c))
    throw ShapeError("layer_norm_channels: affine size mismatch for " + s.str());
  const std::size_t plane = s.plane();
  Buffer<T> v(s.numel());
  // Per position: 1/sigma, kept for backward.
  Buffer<T> inv_std(std::size_t(s.n) * plane);
  Buffer<T> mu(s.c);
  for (int n = 0; n < s.n; ++n) {
    const T* xb = x.data() + std::size_t(n) * s.c * plane;
    T* yb = v.data() + std::size_t(n) * s.c * plane;
    for (std::size_t p = 0; p < plane; ++p) {
      T m = 0;
      for (int c = 0; c < s.c; ++c) m += xb[c * plane + p];
      m /= T(s.c);
      T var = 0;
      for (int c = 0; c < s.c; ++c) {
        const T d = xb[c * plane + p] - m;
        var += d * d;
      }
      var /= T(s.c);
      const T is = T(1) / std::sqrt(var + eps);
      inv_std[std::size_t(n) * plane + p] = is;
      for (int c = 0; c < s.c; ++c)
        yb[c * plane + p] = (xb[c * plane + p] - m) * is * gamma.data()[c] + beta.data()[c];
    }
  }
  return make_result(s, std::move(v), {&x, &gamma, &beta}, [inv_std = std::move(inv_std)](Node<T>& self) {
    const Shape4 s = self.shape;
    const std::size_t plane = s.plane();
    T* gx = input_grad(self, 0);
    T* gg = input_grad(self, 1);
    T* gbeta = input_grad(self, 2);
    const T* xv = input_value(self, 0);
    const T* gamma = input_value(self, 1);
    Buffer<T> xhat(s.c), dxhat(s.c);
    for (int n = 0; n < s.n; ++n) {
      const T* xb = xv + std::size_t(n) * s.c * plane;
      const T* gy = self.grad.data() + std::size_t(n) * s.c * plane;
      for (std::size_t p = 0; p < plane; ++p) {
        const T is = inv_std[std::size_t(n) * plane + p];
        T m = 0;
        for (int c = 0; c < s.c; ++c) m += xb[c * plane + p];
        m /= T(s.c);
        T mean_d = 0, mean_dx = 0;
        for (int c = 0; c < s.c; ++c) {
          xhat[c] = (xb[c * plane + p] - m) * is;
          const T g = gy[c * plane + p];
          if (gg) gg[c] += g * xhat[c];
          if (gbeta) gbeta[c] += g;
          dxhat[c] = g * gamma[c];
          mean_d += dxhat[c];
          mean_dx += dxhat[c] * xhat[c];
        }
        if (!gx) continue;
        mean_d /= T(s.c);
        mean_dx /= T(s.c);
        T* gxb = gx + std::size_t(n) * s.c * plane;
        for (int c = 0; c < s.c; ++c) gxb[c * plane + p] += is * (dxhat[c] - mean_d - xhat[c] * mean_dx);
      }
    }
  });
}

namespace detail {

struct LinearTaps {
  std::vector<int> lo, hi;
  std::vector<double> frac;
};

// Source taps for half-pixel-centred linear resampling (align_corners = false).
inline LinearTaps linear_taps(int in, int out) {
  LinearTaps t;
  t.lo.resize(out);
  t.hi.resize(out);
  t.frac.resize(out);
  const double ratio = double(in) / double(out);
  for (int o = 0; o < out; ++o) {
    double src = std::max(ratio * (o + 0.5) - 0.5, 0.0);
    int lo = std::min(int(src), in - 1);
    t.lo[o] = lo;
    t.hi[o] = lo + (lo < in - 1 ? 1 : 0);
    t.frac[o] = src - lo;
  }
  return t;
}

}  // namespace detail

/// Bilinear resize with half-pixel centres (align_corners = false).
template <typename T>
Tensor<T> upsample_bilinear(const Tensor<T>& x, int out_h, int out_w) {
  const Shape4 s = x.shape();
  const Shape4 out{s.n, s.c, out_h, out_w};
  auto ty = detail::linear_taps(s.h, out_h);
  auto tx = detail::linear_taps(s.w, out_w);
  Buffer<T> v(out.numel());
  for (int nc = 0; nc < s.n * s.c; ++nc) {
    const T* src = x.data() + std::size_t(nc) * s.plane();
    T* dst = v.data() + std::size_t(nc) * out.plane();
    for (int oy = 0; oy < out_h; ++oy) {
      const T fy = T(ty.frac[oy]);
      const T* r0 = src + std::size_t(ty.lo[oy]) * s.w;
      const T* r1 = src + std::size_t(ty.hi[oy]) * s.w;
      for (int ox = 0; ox < out_w; ++ox) {
        const T fx = T(tx.frac[ox]);
        const int x0 = tx.lo[ox], x1 = tx.hi[ox];
        dst[std::size_t(oy) * out_w + ox] = (T(1) - fy) * ((T(1) - fx) * r0[x0] + fx * r0[x1]) +
                                            fy * ((T(1) - fx) * r1[x0] + fx * r1[x1]);
      }
    }
  }
  return make_result(out, std::move(v), {&x}, [ty = std::move(ty), tx = std::move(tx)](Node<T>& self) {
    T* gx = input_grad(self, 0);
    if (!gx) return;
    const Shape4 s = self.inputs[0]->shape;
    const Shape4 o = self.shape;
    for (int nc = 0; nc < s.n * s.c; ++nc) {
      const T* g = self.grad.data() + std::size_t(nc) * o.plane();
      T* dst = gx + std::size_t(nc) * s.plane();
      for (int oy = 0; oy < o.h; ++oy) {
        const T fy = T(ty.frac[oy]);
        T* r0 = dst + std::size_t(ty.lo[oy]) * s.w;
        T* r1 = dst + std::size_t(ty.hi[oy]) * s.w;
        for (int ox = 0; ox < o.w; ++ox) {
          const T fx = T(tx.frac[ox]);
          const T gv = g[std::size_t(oy) * o.w + ox];
          r0[tx.lo[ox]] += gv * (T(1) - fy) * (T(1) - fx);
          r0[tx.hi[ox]] += gv * (T(1) - fy) * fx;
          r1[tx.lo[ox]] += gv * fy * (T(1) - fx);
          r1[tx.hi[ox]] += gv * fy * fx;
        }
      }
    }
  });
}

/// Adaptive average pooling; output bins may exceed the input size, in which
/// case source cells are shared between neighbouring bins.
template <typename T>
Tensor<T> adaptive_avg_pool(const Tensor<T>& x, int out_h, int out_w) {
  const Shape4 s = x.shape();
  const Shape4 out{s.n, s.c, out_h, out_w};
  auto bounds = [](int in, int outn) {
    std::vector<std::pair<int, int>> b(outn);
    for (int i = 0; i < outn; ++i)
      b[i] = {int((long(i) * in) / outn), int((long(i + 1) * in + outn - 1) / outn)};
    return b;
  };
  auto by = bounds(s.h, out_h), bx = bounds(s.w, out_w);
  Buffer<T> v(out.numel());
  for (int nc = 0; nc < s.n * s.c; ++nc) {
    const T* src = x.data() + std::size_t(nc) * s.plane();
    for (int oy = 0; oy < out_h; ++oy)
      for (int ox = 0; ox < out_w; ++ox) {
        T acc = 0;
        for (int y = by[oy].first; y < by[oy].second; ++y)
          for (int xx = bx[ox].first; xx < bx[ox].second; ++xx) acc += src[std::size_t(y) * s.w + xx];
        const int cnt = (by[oy].second - by[oy].first) * (bx[ox].second - bx[ox].first);
        v[std::size_t(nc) * out.plane() + std::size_t(oy) * out_w + ox] = acc / T(cnt);
      }
  }
  return make_result(out, std::move(v), {&x}, [by, bx](Node<T>& self) {
    T* gx = input_grad(self, 0);
    if (!gx) return;
    const Shape4 s = self.inputs[0]->shape;
    const Shape4 o = self.shape;
    for (int nc = 0; nc < s.n * s.c; ++nc) {
      T* dst = gx + std::size_t(nc) * s.plane();
      for (int oy = 0; oy < o.h; ++oy)
        for (int ox = 0; ox < o.w; ++ox) {
          const int cnt = (by[oy].second - by[oy].first) * (bx[ox].second - bx[ox].first);
          const T g = self.grad[std::size_t(nc) * o.plane() + std::size_t(oy) * o.w + ox] / T(cnt);
          for (int y = by[oy].first; y < by[oy].second; ++y)
            for (int xx = bx[ox].first; xx < bx[ox].second; ++xx) dst[std::size_t(y) * s.w + xx] += g;
        }
    }
  });
}

/// Spatial maximum per channel: [n, c, h, w] -> [n, c, 1, 1].
template <typename T>
Tensor<T> spatial_max(const Tensor<T>& x) {
  const Shape4 s = x.shape();
  const Shape4 out{s.n, s.c, 1, 1};
  Buffer<T> v(out.numel());
  std::vector<std::size_t> arg(out.numel());
  for (int nc = 0; nc < s.n * s.c; ++nc) {
    const T* src = x.data() + std::size_t(nc) * s.plane();
    const std::size_t best = std::size_t(std::max_element(src, src + s.plane()) - src);
    v[nc] = src[best];
    arg[nc] = std::size_t(nc) * s.plane() + best;
  }
  return make_result(out, std::move(v), {&x}, [arg = std::move(arg)](Node<T>& self) {
    T* gx = input_grad(self, 0);
    if (!gx) return;
    for (std::size_t i = 0; i < arg.size(); ++i) gx[arg[i]] += self.grad[i];
  });
}

/// Channel-wise mean: [n, c, h, w] -> [n, 1, h, w].
template <typename T>
Tensor<T> channel_mean(const Tensor<T>& x) {
  const Shape4 s = x.shape();
  const Shape4 out{s.n, 1, s.h, s.w};
  const std::size_t plane = s.plane();
  Buffer<T> v(out.numel(), T(0));
  for (int n = 0; n < s.n; ++n)
    for (int c = 0; c < s.c; ++c)
      for (std::size_t p = 0; p < plane; ++p) v[n * plane + p] += x.data()[(std::size_t(n) * s.c + c) * plane + p];
  for (auto& e : v) e /= T(s.c);
  return make_result(out, std::move(v), {&x}, [](Node<T>& self) {
    T* gx = input_grad(self, 0);
    if (!gx) return;
    const Shape4 s = self.inputs[0]->shape;
    const std::size_t plane = s.plane();
    for (int n = 0; n < s.n; ++n)
      for (int c = 0; c < s.c; ++c)
        for (std::size_t p = 0; p < plane; ++p)
          gx[(std::size_t(n) * s.c + c) * plane + p] += self.grad[n * plane + p] / T(s.c);
  });
}

/// Channel-wise maximum: [n, c, h, w] -> [n, 1, h, w].
template <typename T>
Tensor<T> channel_max(const Tensor<T>& x) {
  const Shape4 s = x.shape();
  const Shape4 out{s.n, 1, s.h, s.w};
  const std::size_t plane = s.plane();
  Buffer<T> v(out.numel(), -std::numeric_limits<T>::infinity());
  std::vector<std::size_t> arg(out.numel(), 0);
  for (int n = 0; n < s.n; ++n)
    for (int c = 0; c < s.c; ++c)
      for (std::size_t p = 0; p < plane; ++p) {
        const std::size_t idx = (std::size_t(n) * s.c + c) * plane + p;
        if (x.data()[idx] > v[n * plane + p]) {
          v[n * plane + p] = x.data()[idx];
          arg[n * plane + p] = idx;
        }
      }
  return make_result(out, std::move(v), {&x}, [arg = std::move(arg)](Node<T>& self) {
    T* gx = input_grad(self, 0);
    if (!gx) return;
    for (std::size_t i = 0; i < arg.size(); ++i) gx[arg[i]] += self.grad[i];
  });
}

/// Options for scaled dot-product attention over flattened spatial positions.
struct AttentionSpec {
  int heads = 1;
  double scale = 1.0;
  double dropout = 0.0;
};

/// Multi-head attention on channel-first maps.
///
/// q: [n, d, hq, wq], k: [n, d, hk, wk], v: [n, dv, hk, wk] -> [n, dv, hq, wq].
/// Each of the hq*wq query positions attends over the hk*wk key positions;
/// channels are split into `heads` contiguous groups. Dropout on the
/// attention weights is applied only when `rng` is non-null.
template <typename T>
Tensor<T> attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v, const AttentionSpec& spec,
                    std::mt19937_64* rng = nullptr) {
  const Shape4 qs = q.shape(), ks = k.shape(), vs = v.shape();
  if (qs.n != ks.n || ks.n != vs.n || qs.c != ks.c || ks.h != vs.h || ks.w != vs.w)
    throw ShapeError("attention: q " + qs.str() + ", k " + ks.str() + ", v " + vs.str());
  if (qs.c % spec.heads != 0 || vs.c % spec.heads != 0) throw ShapeError("attention: heads must divide channels");
  const int nq = int(qs.plane()), nk = int(ks.plane());
  const int dh = qs.c / spec.heads, dvh = vs.c / spec.heads;
  const Shape4 out{qs.n, vs.c, qs.h, qs.w};
  const bool use_dropout = rng != nullptr && spec.dropout > 0.0;
  const T keep_scale = use_dropout ? T(1.0 / (1.0 - spec.dropout)) : T(1);
  const std::size_t slab = std::size_t(nq) * nk;
  const std::size_t slabs = std::size_t(qs.n) * spec.heads;
  auto probs = std::make_shared<Buffer<T>>(slabs * slab);
  auto mask = std::make_shared<std::vector<unsigned char>>(use_dropout ? slabs * slab : 0);
  Buffer<T> ov(out.numel());
  detail::RowMat<T> scores(nq, nk);
  std::bernoulli_distribution keep(1.0 - spec.dropout);
  for (int n = 0; n < qs.n; ++n)
    for (int hd = 0; hd < spec.heads; ++hd) {
      const std::size_t id = std::size_t(n) * spec.heads + hd;
      detail::ConstMatMap<T> qm(q.data() + (std::size_t(n) * qs.c + std::size_t(hd) * dh) * nq, dh, nq);
      detail::ConstMatMap<T> km(k.data() + (std::size_t(n) * ks.c + std::size_t(hd) * dh) * nk, dh, nk);
      detail::ConstMatMap<T> vm(v.data() + (std::size_t(n) * vs.c + std::size_t(hd) * dvh) * nk, dvh, nk);
      scores.noalias() = qm.transpose() * km;
      scores *= T(spec.scale);
      detail::MatMap<T> pm(probs->data() + id * slab, nq, nk);
      for (int r = 0; r < nq; ++r) {
        const T mx = scores.row(r).maxCoeff();
        pm.row(r) = (scores.row(r).array() - mx).exp();
        pm.row(r) /= pm.row(r).sum();
      }
      detail::MatMap<T> om(ov.data() + (std::size_t(n) * vs.c + std::size_t(hd) * dvh) * nq, dvh, nq);
      if (use_dropout) {
        unsigned char* mk = mask->data() + id * slab;
        detail::RowMat<T> dropped = pm;
        for (std::size_t i = 0; i < slab; ++i) {
          mk[i] = keep(*rng) ? 1 : 0;
          dropped.data()[i] = mk[i] ? dropped.data()[i] * keep_scale : T(0);
        }
        om.noalias() = vm * dropped.transpose();
      } else {
        om.noalias() = vm * pm.transpose();
      }
    }
  const AttentionSpec sp = spec;
  return make_result(out, std::move(ov), {&q, &k, &v}, [sp, probs, mask, keep_scale](Node<T>& self) {
    const Shape4 qs = self.inputs[0]->shape, ks = self.inputs[1]->shape, vs = self.inputs[2]->shape;
    const int nq = int(qs.plane()), nk = int(ks.plane());
    const int dh = qs.c / sp.heads, dvh = vs.c / sp.heads;
    const std::size_t slab = std::size_t(nq) * nk;
    T* gq = input_grad(self, 0);
    T* gk = input_grad(self, 1);
    T* gv = input_grad(self, 2);
    const T* qv = input_value(self, 0);
    const T* kv = input_value(self, 1);
    const T* vv = input_value(self, 2);
    detail::RowMat<T> dp(nq, nk), used(nq, nk);
    for (int n = 0; n < qs.n; ++n)
      for (int hd = 0; hd < sp.heads; ++hd) {
        const std::size_t id = std::size_t(n) * sp.heads + hd;
        detail::ConstMatMap<T> pm(probs->data() + id * slab, nq, nk);
        detail::ConstMatMap<T> gom(self.grad.data() + (std::size_t(n) * vs.c + std::size_t(hd) * dvh) * nq, dvh,
                                   nq);
        detail::ConstMatMap<T> vm(vv + (std::size_t(n) * vs.c + std::size_t(hd) * dvh) * nk, dvh, nk);
        used = pm;
        if (!mask->empty()) {
          const unsigned char* mk = mask->data() + id * slab;
          for (std::size_t i = 0; i < slab; ++i) used.data()[i] = mk[i] ? used.data()[i] * keep_scale : T(0);
        }
        if (gv) {
          detail::MatMap<T>(gv + (std::size_t(n) * vs.c + std::size_t(hd) * dvh) * nk, dvh, nk).noalias() +=
              gom * used;
        }
        if (!gq && !gk) continue;
        dp.noalias() = gom.transpose() * vm;
        if (!mask->empty()) {
          const unsigned char* mk = mask->data() + id * slab;
          for (std::size_t i = 0; i < slab; ++i) dp.data()[i] = mk[i] ? dp.data()[i] * keep_scale : T(0);
        }
        // softmax backward: dS = P * (dP - rowsum(dP * P))
        for (int r = 0; r < nq; ++r) {
          const T dot = (dp.row(r).array() * pm.row(r).array()).sum();
          dp.row(r) = (pm.row(r).array() * (dp.row(r).array() - dot)) * T(sp.scale);
        }
        if (gq) {
          detail::ConstMatMap<T> km(kv + (std::size_t(n) * ks.c + std::size_t(hd) * dh) * nk, dh, nk);
          detail::MatMap<T>(gq + (std::size_t(n) * qs.c + std::size_t(hd) * dh) * nq, dh, nq).noalias() +=
              km * dp.transpose();
        }
        if (gk) {
          detail::ConstMatMap<T> qm(qv + (std::size_t(n) * qs.c + std::size_t(hd) * dh) * nq, dh, nq);
          detail::MatMap<T>(gk + (std::size_t(n) * ks.c + std::size_t(hd) * dh) * nk, dh, nk).noalias() += qm * dp;
        }
      }
  });
}

}  // namespace scanet
