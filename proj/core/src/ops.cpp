#include "nowcast/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>

#include "nowcast/error.hpp"

#ifdef NOWCAST_CHECK_FINITE
#define NOWCAST_FINITE(t, op) ::nowcast::detail::check_finite(t, op)
#else
#define NOWCAST_FINITE(t, op) ((void)0)
#endif

namespace nowcast::ops {

namespace {

using detail::Autograd;
using i64 = std::int64_t;

// Max selection that lets a NaN win, so non-finite values survive pooling.
template <class T>
bool beats(T candidate, T best) {
  return candidate > best || (std::isnan(candidate) && !std::isnan(best));
}

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MatMap = Eigen::Map<RowMat<T>>;
template <class T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;
// Reductions over fixed lanes. Eigen's own reductions peel to the buffer
// alignment, which would make the summation order depend on addresses.
constexpr i64 kLanes = 16;

template <class T>
T dot(const T* a, const T* b, i64 n) {
  T lane[kLanes] = {};
  i64 i = 0;
  for (; i + kLanes <= n; i += kLanes) {
    for (i64 j = 0; j < kLanes; ++j) lane[j] += a[i + j] * b[i + j];
  }
  T acc = T(0);
  for (; i < n; ++i) acc += a[i] * b[i];
  for (i64 j = 0; j < kLanes; ++j) acc += lane[j];
  return acc;
}

template <class T>
T total(const T* a, i64 n) {
  T lane[kLanes] = {};
  i64 i = 0;
  for (; i + kLanes <= n; i += kLanes) {
    for (i64 j = 0; j < kLanes; ++j) lane[j] += a[i + j];
  }
  T acc = T(0);
  for (; i < n; ++i) acc += a[i];
  for (i64 j = 0; j < kLanes; ++j) acc += lane[j];
  return acc;
}

struct ConvGeom {
  i64 batch, in_c, in_h, in_w;
  i64 out_c, out_h, out_w;
  i64 kernel, stride, pad, groups;
  i64 in_per_group, out_per_group;

  i64 patch() const { return in_per_group * kernel * kernel; }
  i64 out_plane() const { return out_h * out_w; }
  bool pointwise() const { return kernel == 1 && stride == 1 && pad == 0; }
  bool depthwise() const { return in_per_group == 1 && stride == 1; }
};

ConvGeom conv_geometry(const Shape& xs, const Shape& ws, const Conv2dOptions& opt) {
  if (opt.groups < 1 || opt.stride < 1 || opt.padding < 0) {
    throw ShapeError("conv2d: invalid stride/padding/groups");
  }
  if (xs.c % opt.groups != 0) {
    throw ShapeError("conv2d: groups " + std::to_string(opt.groups) + " do not divide " +
                     std::to_string(xs.c) + " input channels");
  }
  if (ws.n % opt.groups != 0) throw ShapeError("conv2d: groups do not divide output channels");
  if (ws.c != xs.c / opt.groups) {
    throw ShapeError("conv2d: weight " + ws.str() + " incompatible with input " + xs.str());
  }
  if (ws.h != ws.w) throw ShapeError("conv2d: only square kernels are supported");
  ConvGeom g{};
  g.batch = xs.n;
  g.in_c = xs.c;
  g.in_h = xs.h;
  g.in_w = xs.w;
  g.out_c = ws.n;
  g.kernel = ws.h;
  g.stride = opt.stride;
  g.pad = opt.padding;
  g.groups = opt.groups;
  g.in_per_group = xs.c / opt.groups;
  g.out_per_group = ws.n / opt.groups;
  const i64 span_h = xs.h + 2 * g.pad - g.kernel;
  const i64 span_w = xs.w + 2 * g.pad - g.kernel;
  if (span_h < 0 || span_w < 0 || span_h % g.stride != 0 || span_w % g.stride != 0) {
    throw ShapeError("conv2d: padding/stride do not yield an integer output size for " +
                     xs.str());
  }
  g.out_h = span_h / g.stride + 1;
  g.out_w = span_w / g.stride + 1;
  return g;
}

template <class T>
void im2col(const T* x, const ConvGeom& g, T* col) {
  const i64 k = g.kernel;
  const i64 plane = g.out_plane();
  for (i64 ci = 0; ci < g.in_per_group; ++ci) {
    const T* xc = x + ci * g.in_h * g.in_w;
    for (i64 ky = 0; ky < k; ++ky) {
      for (i64 kx = 0; kx < k; ++kx) {
        T* row = col + ((ci * k + ky) * k + kx) * plane;
        for (i64 oy = 0; oy < g.out_h; ++oy) {
          const i64 iy = oy * g.stride - g.pad + ky;
          T* dst = row + oy * g.out_w;
          if (iy < 0 || iy >= g.in_h) {
            std::fill(dst, dst + g.out_w, T(0));
            continue;
          }
          for (i64 ox = 0; ox < g.out_w; ++ox) {
            const i64 ix = ox * g.stride - g.pad + kx;
            dst[ox] = (ix >= 0 && ix < g.in_w) ? xc[iy * g.in_w + ix] : T(0);
          }
        }
      }
    }
  }
}

template <class T>
void col2im_add(const T* col, const ConvGeom& g, T* dx) {
  const i64 k = g.kernel;
  const i64 plane = g.out_plane();
  for (i64 ci = 0; ci < g.in_per_group; ++ci) {
    T* dxc = dx + ci * g.in_h * g.in_w;
    for (i64 ky = 0; ky < k; ++ky) {
      for (i64 kx = 0; kx < k; ++kx) {
        const T* row = col + ((ci * k + ky) * k + kx) * plane;
        for (i64 oy = 0; oy < g.out_h; ++oy) {
          const i64 iy = oy * g.stride - g.pad + ky;
          if (iy < 0 || iy >= g.in_h) continue;
          for (i64 ox = 0; ox < g.out_w; ++ox) {
            const i64 ix = ox * g.stride - g.pad + kx;
            if (ix >= 0 && ix < g.in_w) dxc[iy * g.in_w + ix] += row[oy * g.out_w + ox];
          }
        }
      }
    }
  }
}

// Valid output range for a kernel tap offset `d` along one axis (stride 1).
struct TapRange {
  i64 lo, hi;
};
inline TapRange tap_range(i64 d, i64 in_len, i64 out_len) {
  return {std::max<i64>(0, -d), std::min<i64>(out_len, in_len - d)};
}

template <class T>
void depthwise_plane_forward(const T* in, const T* wk, T* out, const ConvGeom& g) {
  const i64 k = g.kernel;
  for (i64 ky = 0; ky < k; ++ky) {
    const i64 dy = ky - g.pad;
    const TapRange ry = tap_range(dy, g.in_h, g.out_h);
    for (i64 kx = 0; kx < k; ++kx) {
      const i64 dx = kx - g.pad;
      const TapRange rx = tap_range(dx, g.in_w, g.out_w);
      const T wv = wk[ky * k + kx];
      for (i64 oy = ry.lo; oy < ry.hi; ++oy) {
        const T* irow = in + (oy + dy) * g.in_w + dx;
        T* orow = out + oy * g.out_w;
        for (i64 ox = rx.lo; ox < rx.hi; ++ox) orow[ox] += wv * irow[ox];
      }
    }
  }
}

template <class T>
void depthwise_plane_backward(const T* in, const T* wk, const T* gout, T* gin, T* gw,
                              const ConvGeom& g) {
  const i64 k = g.kernel;
  for (i64 ky = 0; ky < k; ++ky) {
    const i64 dy = ky - g.pad;
    const TapRange ry = tap_range(dy, g.in_h, g.out_h);
    for (i64 kx = 0; kx < k; ++kx) {
      const i64 dx = kx - g.pad;
      const TapRange rx = tap_range(dx, g.in_w, g.out_w);
      const T wv = wk[ky * k + kx];
      T acc = T(0);
      for (i64 oy = ry.lo; oy < ry.hi; ++oy) {
        const T* grow = gout + oy * g.out_w;
        const i64 ioff = (oy + dy) * g.in_w + dx;
        if (gin != nullptr) {
          T* girow = gin + ioff;
          for (i64 ox = rx.lo; ox < rx.hi; ++ox) girow[ox] += wv * grow[ox];
        }
        if (gw != nullptr) {
          acc += dot(grow + rx.lo, in + ioff + rx.lo, rx.hi - rx.lo);
        }
      }
      if (gw != nullptr) gw[ky * k + kx] += acc;
    }
  }
}

template <class T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + a.shape().str() + " vs " +
                     b.shape().str());
  }
}

}  // namespace

// ---------------------------------------------------------------------------
// conv2d

template <class T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias,
                 Conv2dOptions options) {
  const ConvGeom g = conv_geometry(input.shape(), weight.shape(), options);
  if (bias.defined() && bias.shape() != Shape{g.out_c, 1, 1, 1}) {
    throw ShapeError("conv2d: bias must have shape (C_out, 1, 1, 1), got " + bias.shape().str());
  }
  Tensor<T> out(Shape{g.batch, g.out_c, g.out_h, g.out_w});
  const T* x = input.data().data();
  const T* w = weight.data().data();
  T* y = out.mutable_data().data();
  const i64 in_plane = g.in_h * g.in_w;
  const i64 out_plane = g.out_plane();

  if (g.depthwise()) {
    const i64 mult = g.out_per_group;
    const i64 kk = g.kernel * g.kernel;
    for (i64 b = 0; b < g.batch; ++b) {
      for (i64 o = 0; o < g.out_c; ++o) {
        depthwise_plane_forward(x + (b * g.in_c + o / mult) * in_plane, w + o * kk,
                                y + (b * g.out_c + o) * out_plane, g);
      }
    }
  } else {
    std::vector<T> col(g.pointwise() ? 0 : static_cast<std::size_t>(g.patch() * out_plane));
    for (i64 b = 0; b < g.batch; ++b) {
      for (i64 grp = 0; grp < g.groups; ++grp) {
        const T* xg = x + (b * g.in_c + grp * g.in_per_group) * in_plane;
        const T* src = xg;
        if (!g.pointwise()) {
          im2col(xg, g, col.data());
          src = col.data();
        }
        ConstMatMap<T> wg(w + grp * g.out_per_group * g.patch(), g.out_per_group, g.patch());
        ConstMatMap<T> cm(src, g.patch(), out_plane);
        MatMap<T> ym(y + (b * g.out_c + grp * g.out_per_group) * out_plane, g.out_per_group,
                     out_plane);
        ym.noalias() = wg * cm;
      }
    }
  }
  if (bias.defined()) {
    const T* bv = bias.data().data();
    for (i64 b = 0; b < g.batch; ++b) {
      for (i64 o = 0; o < g.out_c; ++o) {
        T* yp = y + (b * g.out_c + o) * out_plane;
        const T bo = bv[o];
        for (i64 i = 0; i < out_plane; ++i) yp[i] += bo;
      }
    }
  }
  NOWCAST_FINITE(out, "conv2d");

  if (Autograd<T>::should_record({&input, &weight, &bias})) {
    Autograd<T>::record(out, [input, weight, bias, out, g]() mutable {
      const T* gy = out.grad().data();
      std::span<T> gx = Autograd<T>::sink(input);
      std::span<T> gw = Autograd<T>::sink(weight);
      std::span<T> gb = bias.defined() ? Autograd<T>::sink(bias) : std::span<T>{};
      const T* x = input.data().data();
      const T* w = weight.data().data();
      const i64 in_plane = g.in_h * g.in_w;
      const i64 out_plane = g.out_plane();

      if (!gb.empty()) {
        for (i64 b = 0; b < g.batch; ++b) {
          for (i64 o = 0; o < g.out_c; ++o) {
            const T* gp = gy + (b * g.out_c + o) * out_plane;
            gb[o] += total(gp, out_plane);
          }
        }
      }
      if (gx.empty() && gw.empty()) return;

      if (g.depthwise()) {
        const i64 mult = g.out_per_group;
        const i64 kk = g.kernel * g.kernel;
        for (i64 b = 0; b < g.batch; ++b) {
          for (i64 o = 0; o < g.out_c; ++o) {
            const i64 ioff = (b * g.in_c + o / mult) * in_plane;
            depthwise_plane_backward(x + ioff, w + o * kk, gy + (b * g.out_c + o) * out_plane,
                                     gx.empty() ? nullptr : gx.data() + ioff,
                                     gw.empty() ? nullptr : gw.data() + o * kk, g);
          }
        }
        return;
      }

      std::vector<T> col(g.pointwise() ? 0 : static_cast<std::size_t>(g.patch() * out_plane));
      std::vector<T> dcol(col.size());
      for (i64 b = 0; b < g.batch; ++b) {
        for (i64 grp = 0; grp < g.groups; ++grp) {
          const i64 xoff = (b * g.in_c + grp * g.in_per_group) * in_plane;
          ConstMatMap<T> gym(gy + (b * g.out_c + grp * g.out_per_group) * out_plane,
                             g.out_per_group, out_plane);
          ConstMatMap<T> wg(w + grp * g.out_per_group * g.patch(), g.out_per_group, g.patch());
          if (!gw.empty()) {
            const T* src = x + xoff;
            if (!g.pointwise()) {
              im2col(x + xoff, g, col.data());
              src = col.data();
            }
            ConstMatMap<T> cm(src, g.patch(), out_plane);
            MatMap<T> gwm(gw.data() + grp * g.out_per_group * g.patch(), g.out_per_group,
                          g.patch());
            gwm.noalias() += gym * cm.transpose();
          }
          if (!gx.empty()) {
            if (g.pointwise()) {
              MatMap<T> gxm(gx.data() + xoff, g.in_per_group, out_plane);
              gxm.noalias() += wg.transpose() * gym;
            } else {
              MatMap<T> dcm(dcol.data(), g.patch(), out_plane);
              dcm.noalias() = wg.transpose() * gym;
              col2im_add(dcol.data(), g, gx.data() + xoff);
            }
          }
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// batchnorm2d

template <class T>
BatchNormState<T> BatchNormState<T>::make(std::int64_t channels) {
  BatchNormState s;
  const Shape cs{channels, 1, 1, 1};
  s.gamma = Tensor<T>::full(cs, T(1), true);
  s.beta = Tensor<T>::full(cs, T(0), true);
  s.running_mean = Tensor<T>::full(cs, T(0));
  s.running_var = Tensor<T>::full(cs, T(1));
  return s;
}

template <class T>
Tensor<T> batchnorm2d(const Tensor<T>& input, BatchNormState<T>& state, Mode mode) {
  const Shape& s = input.shape();
  if (state.gamma.shape() != Shape{s.c, 1, 1, 1}) {
    throw ShapeError("batchnorm2d: state has " + std::to_string(state.gamma.shape().n) +
                     " channels, input " + s.str());
  }
  const i64 plane = s.plane();
  const i64 count = s.n * plane;
  std::vector<T> mean(static_cast<std::size_t>(s.c));
  std::vector<T> invstd(static_cast<std::size_t>(s.c));
  const T* x = input.data().data();

  if (mode == Mode::Train) {
    T* rm = state.running_mean.mutable_data().data();
    T* rv = state.running_var.mutable_data().data();
    const double mom = state.momentum;
    for (i64 c = 0; c < s.c; ++c) {
      double acc = 0.0;
      for (i64 b = 0; b < s.n; ++b) {
        const T* p = x + (b * s.c + c) * plane;
        for (i64 i = 0; i < plane; ++i) acc += p[i];
      }
      const double mu = acc / static_cast<double>(count);
      double sq = 0.0;
      for (i64 b = 0; b < s.n; ++b) {
        const T* p = x + (b * s.c + c) * plane;
        for (i64 i = 0; i < plane; ++i) {
          const double d = p[i] - mu;
          sq += d * d;
        }
      }
      const double var = sq / static_cast<double>(count);
      mean[c] = static_cast<T>(mu);
      invstd[c] = static_cast<T>(1.0 / std::sqrt(var + state.eps));
      const double unbiased = count > 1 ? sq / static_cast<double>(count - 1) : var;
      rm[c] = static_cast<T>((1.0 - mom) * rm[c] + mom * mu);
      rv[c] = static_cast<T>((1.0 - mom) * rv[c] + mom * unbiased);
    }
  } else {
    const T* rm = state.running_mean.data().data();
    const T* rv = state.running_var.data().data();
    for (i64 c = 0; c < s.c; ++c) {
      mean[c] = rm[c];
      invstd[c] = static_cast<T>(1.0 / std::sqrt(static_cast<double>(rv[c]) + state.eps));
    }
  }

  Tensor<T> out(s);
  T* y = out.mutable_data().data();
  const T* gamma = state.gamma.data().data();
  const T* beta = state.beta.data().data();
  for (i64 b = 0; b < s.n; ++b) {
    for (i64 c = 0; c < s.c; ++c) {
      const T* p = x + (b * s.c + c) * plane;
      T* q = y + (b * s.c + c) * plane;
      const T mu = mean[c];
      const T scale_c = gamma[c] * invstd[c];
      const T shift = beta[c];
      for (i64 i = 0; i < plane; ++i) q[i] = (p[i] - mu) * scale_c + shift;
    }
  }
  NOWCAST_FINITE(out, "batchnorm2d");

  Tensor<T> gamma_t = state.gamma;
  Tensor<T> beta_t = state.beta;
  if (Autograd<T>::should_record({&input, &gamma_t, &beta_t})) {
    Autograd<T>::record(out, [input, gamma_t, beta_t, out, mean = std::move(mean),
                              invstd = std::move(invstd), mode]() mutable {
      const Shape& s = input.shape();
      const i64 plane = s.plane();
      const double count = static_cast<double>(s.n * plane);
      const T* x = input.data().data();
      const T* gy = out.grad().data();
      const T* gamma = gamma_t.data().data();
      std::span<T> gx = Autograd<T>::sink(input);
      std::span<T> gg = Autograd<T>::sink(gamma_t);
      std::span<T> gb = Autograd<T>::sink(beta_t);
      for (i64 c = 0; c < s.c; ++c) {
        double sum_dy = 0.0;
        double sum_dy_xhat = 0.0;
        for (i64 b = 0; b < s.n; ++b) {
          const T* p = x + (b * s.c + c) * plane;
          const T* d = gy + (b * s.c + c) * plane;
          for (i64 i = 0; i < plane; ++i) {
            const double xhat = (static_cast<double>(p[i]) - mean[c]) * invstd[c];
            sum_dy += d[i];
            sum_dy_xhat += d[i] * xhat;
          }
        }
        if (!gg.empty()) gg[c] += static_cast<T>(sum_dy_xhat);
        if (!gb.empty()) gb[c] += static_cast<T>(sum_dy);
        if (gx.empty()) continue;
        const double k = static_cast<double>(gamma[c]) * invstd[c];
        for (i64 b = 0; b < s.n; ++b) {
          const T* p = x + (b * s.c + c) * plane;
          const T* d = gy + (b * s.c + c) * plane;
          T* q = gx.data() + (b * s.c + c) * plane;
          if (mode == Mode::Train) {
            for (i64 i = 0; i < plane; ++i) {
              const double xhat = (static_cast<double>(p[i]) - mean[c]) * invstd[c];
              q[i] += static_cast<T>(k * (d[i] - sum_dy / count - xhat * sum_dy_xhat / count));
            }
          } else {
            for (i64 i = 0; i < plane; ++i) q[i] += static_cast<T>(k * d[i]);
          }
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// elementwise activations

template <class T>
Tensor<T> relu(const Tensor<T>& input) {
  Tensor<T> out(input.shape());
  const auto x = input.data();
  auto y = out.mutable_data();
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = x[i] <= T(0) ? T(0) : x[i];  // NaN passes through
  if (Autograd<T>::should_record({&input})) {
    Autograd<T>::record(out, [input, out]() mutable {
      std::span<T> gx = Autograd<T>::sink(input);
      if (gx.empty()) return;
      const auto x = input.data();
      const auto gy = out.grad();
      for (std::size_t i = 0; i < x.size(); ++i) {
        if (x[i] > T(0)) gx[i] += gy[i];
      }
    });
  }
  return out;
}

template <class T>
Tensor<T> sigmoid(const Tensor<T>& input) {
  Tensor<T> out(input.shape());
  const auto x = input.data();
  auto y = out.mutable_data();
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (x[i] >= T(0)) {
      y[i] = T(1) / (T(1) + std::exp(-x[i]));
    } else {
      const T e = std::exp(x[i]);
      y[i] = e / (T(1) + e);
    }
  }
  if (Autograd<T>::should_record({&input})) {
    Autograd<T>::record(out, [input, out]() mutable {
      std::span<T> gx = Autograd<T>::sink(input);
      if (gx.empty()) return;
      const auto y = out.data();
      const auto gy = out.grad();
      for (std::size_t i = 0; i < y.size(); ++i) gx[i] += gy[i] * y[i] * (T(1) - y[i]);
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// pooling / resampling

template <class T>
Tensor<T> maxpool2(const Tensor<T>& input) {
  const Shape& s = input.shape();
  if (s.h % 2 != 0 || s.w % 2 != 0) {
    throw ShapeError("maxpool2: spatial dims must be even, got " + s.str());
  }
  const Shape os{s.n, s.c, s.h / 2, s.w / 2};
  Tensor<T> out(os);
  std::vector<i64> argmax(static_cast<std::size_t>(os.numel()));
  const T* x = input.data().data();
  T* y = out.mutable_data().data();
  i64 oi = 0;
  for (i64 nc = 0; nc < s.n * s.c; ++nc) {
    const i64 base = nc * s.plane();
    for (i64 oy = 0; oy < os.h; ++oy) {
      for (i64 ox = 0; ox < os.w; ++ox, ++oi) {
        const i64 top = base + (2 * oy) * s.w + 2 * ox;
        const i64 cand[4] = {top, top + 1, top + s.w, top + s.w + 1};
        i64 best = cand[0];
        for (int k = 1; k < 4; ++k) {
          if (beats(x[cand[k]], x[best])) best = cand[k];
        }
        argmax[oi] = best;
        y[oi] = x[best];
      }
    }
  }
  if (Autograd<T>::should_record({&input})) {
    Autograd<T>::record(out, [input, out, argmax = std::move(argmax)]() mutable {
      std::span<T> gx = Autograd<T>::sink(input);
      if (gx.empty()) return;
      const auto gy = out.grad();
      for (std::size_t i = 0; i < argmax.size(); ++i) gx[argmax[i]] += gy[i];
    });
  }
  return out;
}

namespace {

struct LerpTap {
  i64 i0, i1;
  double w0, w1;
};

std::vector<LerpTap> upsample_taps(i64 in_len) {
  std::vector<LerpTap> taps(static_cast<std::size_t>(2 * in_len));
  for (i64 o = 0; o < 2 * in_len; ++o) {
    double src = (static_cast<double>(o) + 0.5) * 0.5 - 0.5;
    if (src < 0.0) src = 0.0;
    const i64 i0 = std::min<i64>(static_cast<i64>(std::floor(src)), in_len - 1);
    const i64 i1 = std::min<i64>(i0 + 1, in_len - 1);
    const double w1 = src - static_cast<double>(i0);
    taps[o] = {i0, i1, 1.0 - w1, w1};
  }
  return taps;
}

}  // namespace

template <class T>
Tensor<T> upsample_bilinear2(const Tensor<T>& input) {
  const Shape& s = input.shape();
  const Shape os{s.n, s.c, 2 * s.h, 2 * s.w};
  Tensor<T> out(os);
  const auto ty = upsample_taps(s.h);
  const auto tx = upsample_taps(s.w);
  const T* x = input.data().data();
  T* y = out.mutable_data().data();
  for (i64 nc = 0; nc < s.n * s.c; ++nc) {
    const T* xp = x + nc * s.plane();
    T* yp = y + nc * os.plane();
    for (i64 oy = 0; oy < os.h; ++oy) {
      const LerpTap& a = ty[oy];
      const T* r0 = xp + a.i0 * s.w;
      const T* r1 = xp + a.i1 * s.w;
      const T wy0 = static_cast<T>(a.w0);
      const T wy1 = static_cast<T>(a.w1);
      for (i64 ox = 0; ox < os.w; ++ox) {
        const LerpTap& b = tx[ox];
        const T wx0 = static_cast<T>(b.w0);
        const T wx1 = static_cast<T>(b.w1);
        yp[oy * os.w + ox] =
            wy0 * (wx0 * r0[b.i0] + wx1 * r0[b.i1]) + wy1 * (wx0 * r1[b.i0] + wx1 * r1[b.i1]);
      }
    }
  }
  if (Autograd<T>::should_record({&input})) {
    Autograd<T>::record(out, [input, out, ty, tx]() mutable {
      std::span<T> gx = Autograd<T>::sink(input);
      if (gx.empty()) return;
      const Shape& s = input.shape();
      const Shape& os = out.shape();
      const T* gy = out.grad().data();
      for (i64 nc = 0; nc < s.n * s.c; ++nc) {
        T* gp = gx.data() + nc * s.plane();
        const T* gyp = gy + nc * os.plane();
        for (i64 oy = 0; oy < os.h; ++oy) {
          const LerpTap& a = ty[oy];
          T* r0 = gp + a.i0 * s.w;
          T* r1 = gp + a.i1 * s.w;
          const T wy0 = static_cast<T>(a.w0);
          const T wy1 = static_cast<T>(a.w1);
          for (i64 ox = 0; ox < os.w; ++ox) {
            const LerpTap& b = tx[ox];
            const T g = gyp[oy * os.w + ox];
            const T wx0 = static_cast<T>(b.w0);
            const T wx1 = static_cast<T>(b.w1);
            r0[b.i0] += wy0 * wx0 * g;
            r0[b.i1] += wy0 * wx1 * g;
            r1[b.i0] += wy1 * wx0 * g;
            r1[b.i1] += wy1 * wx1 * g;
          }
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// channel plumbing

template <class T>
Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b) {
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  if (sa.n != sb.n || sa.h != sb.h || sa.w != sb.w) {
    throw ShapeError("concat_channels: incompatible " + sa.str() + " and " + sb.str());
  }
  const Shape os{sa.n, sa.c + sb.c, sa.h, sa.w};
  Tensor<T> out(os);
  const i64 na = sa.c * sa.plane();
  const i64 nb = sb.c * sb.plane();
  T* y = out.mutable_data().data();
  for (i64 n = 0; n < sa.n; ++n) {
    std::copy_n(a.data().data() + n * na, na, y + n * (na + nb));
    std::copy_n(b.data().data() + n * nb, nb, y + n * (na + nb) + na);
  }
  if (Autograd<T>::should_record({&a, &b})) {
    Autograd<T>::record(out, [a, b, out, na, nb]() mutable {
      std::span<T> ga = Autograd<T>::sink(a);
      std::span<T> gb = Autograd<T>::sink(b);
      const T* gy = out.grad().data();
      const i64 batch = out.shape().n;
      for (i64 n = 0; n < batch; ++n) {
        const T* src = gy + n * (na + nb);
        if (!ga.empty()) {
          for (i64 i = 0; i < na; ++i) ga[n * na + i] += src[i];
        }
        if (!gb.empty()) {
          for (i64 i = 0; i < nb; ++i) gb[n * nb + i] += src[na + i];
        }
      }
    });
  }
  return out;
}

template <class T>
Tensor<T> slice_channels(const Tensor<T>& input, std::int64_t begin, std::int64_t count) {
  const Shape& s = input.shape();
  if (begin < 0 || count <= 0 || begin + count > s.c) {
    throw ShapeError("slice_channels: range [" + std::to_string(begin) + ", " +
                     std::to_string(begin + count) + ") outside " + s.str());
  }
  const Shape os{s.n, count, s.h, s.w};
  Tensor<T> out(os);
  const i64 chunk = count * s.plane();
  for (i64 n = 0; n < s.n; ++n) {
    std::copy_n(input.data().data() + (n * s.c + begin) * s.plane(), chunk,
                out.mutable_data().data() + n * chunk);
  }
  if (Autograd<T>::should_record({&input})) {
    Autograd<T>::record(out, [input, out, begin, chunk]() mutable {
      std::span<T> gx = Autograd<T>::sink(input);
      if (gx.empty()) return;
      const Shape& s = input.shape();
      const T* gy = out.grad().data();
      for (i64 n = 0; n < s.n; ++n) {
        T* dst = gx.data() + (n * s.c + begin) * s.plane();
        for (i64 i = 0; i < chunk; ++i) dst[i] += gy[n * chunk + i];
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// arithmetic

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a, b, "add");
  Tensor<T> out(a.shape());
  auto y = out.mutable_data();
  const auto xa = a.data();
  const auto xb = b.data();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = xa[i] + xb[i];
  if (Autograd<T>::should_record({&a, &b})) {
    Autograd<T>::record(out, [a, b, out]() mutable {
      const auto gy = out.grad();
      std::span<T> ga = Autograd<T>::sink(a);
      std::span<T> gb = Autograd<T>::sink(b);
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += gy[i];
      for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += gy[i];
    });
  }
  return out;
}

template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  auto compatible = [](i64 x, i64 y) { return y == x || y == 1; };
  if (!compatible(sa.n, sb.n) || !compatible(sa.c, sb.c) || !compatible(sa.h, sb.h) ||
      !compatible(sa.w, sb.w)) {
    throw ShapeError("mul: cannot broadcast " + sb.str() + " onto " + sa.str());
  }
  // Strides into b, zero along broadcast dims.
  const i64 st_w = sb.w == 1 ? 0 : 1;
  const i64 st_h = sb.h == 1 ? 0 : sb.w;
  const i64 st_c = sb.c == 1 ? 0 : sb.h * sb.w;
  const i64 st_n = sb.n == 1 ? 0 : sb.c * sb.h * sb.w;
  auto for_each = [=](auto&& fn) {
    i64 ia = 0;
    for (i64 n = 0; n < sa.n; ++n)
      for (i64 c = 0; c < sa.c; ++c)
        for (i64 h = 0; h < sa.h; ++h) {
          const i64 row = n * st_n + c * st_c + h * st_h;
          for (i64 w = 0; w < sa.w; ++w, ++ia) fn(ia, row + w * st_w);
        }
  };
  Tensor<T> out(sa);
  T* y = out.mutable_data().data();
  const T* xa = a.data().data();
  const T* xb = b.data().data();
  for_each([&](i64 ia, i64 ib) { y[ia] = xa[ia] * xb[ib]; });
  NOWCAST_FINITE(out, "mul");
  if (Autograd<T>::should_record({&a, &b})) {
    Autograd<T>::record(out, [a, b, out, for_each]() mutable {
      const T* gy = out.grad().data();
      std::span<T> ga = Autograd<T>::sink(a);
      std::span<T> gb = Autograd<T>::sink(b);
      const T* xa = a.data().data();
      const T* xb = b.data().data();
      if (!ga.empty()) for_each([&](i64 ia, i64 ib) { ga[ia] += gy[ia] * xb[ib]; });
      if (!gb.empty()) for_each([&](i64 ia, i64 ib) { gb[ib] += gy[ia] * xa[ia]; });
    });
  }
  return out;
}

template <class T>
Tensor<T> scale(const Tensor<T>& input, T factor) {
  Tensor<T> out(input.shape());
  auto y = out.mutable_data();
  const auto x = input.data();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = factor * x[i];
  if (Autograd<T>::should_record({&input})) {
    Autograd<T>::record(out, [input, out, factor]() mutable {
      std::span<T> gx = Autograd<T>::sink(input);
      const auto gy = out.grad();
      for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += factor * gy[i];
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// pooled descriptors

template <class T>
Tensor<T> global_avg_pool(const Tensor<T>& input) {
  const Shape& s = input.shape();
  Tensor<T> out(Shape{s.n, s.c, 1, 1});
  const T* x = input.data().data();
  T* y = out.mutable_data().data();
  const i64 plane = s.plane();
  for (i64 nc = 0; nc < s.n * s.c; ++nc) {
    double acc = 0.0;
    for (i64 i = 0; i < plane; ++i) acc += x[nc * plane + i];
    y[nc] = static_cast<T>(acc / static_cast<double>(plane));
  }
  if (Autograd<T>::should_record({&input})) {
    Autograd<T>::record(out, [input, out]() mutable {
      std::span<T> gx = Autograd<T>::sink(input);
      if (gx.empty()) return;
      const i64 plane = input.shape().plane();
      const T* gy = out.grad().data();
      const i64 nc_total = input.shape().n * input.shape().c;
      for (i64 nc = 0; nc < nc_total; ++nc) {
        const T g = gy[nc] / static_cast<T>(plane);
        for (i64 i = 0; i < plane; ++i) gx[nc * plane + i] += g;
      }
    });
  }
  return out;
}

template <class T>
Tensor<T> global_max_pool(const Tensor<T>& input) {
  const Shape& s = input.shape();
  Tensor<T> out(Shape{s.n, s.c, 1, 1});
  const T* x = input.data().data();
  T* y = out.mutable_data().data();
  const i64 plane = s.plane();
  std::vector<i64> argmax(static_cast<std::size_t>(s.n * s.c));
  for (i64 nc = 0; nc < s.n * s.c; ++nc) {
    i64 best = nc * plane;
    for (i64 i = 1; i < plane; ++i) {
      if (beats(x[nc * plane + i], x[best])) best = nc * plane + i;
    }
    argmax[nc] = best;
    y[nc] = x[best];
  }
  if (Autograd<T>::should_record({&input})) {
    Autograd<T>::record(out, [input, out, argmax = std::move(argmax)]() mutable {
      std::span<T> gx = Autograd<T>::sink(input);
      if (gx.empty()) return;
      const T* gy = out.grad().data();
      for (std::size_t i = 0; i < argmax.size(); ++i) gx[argmax[i]] += gy[i];
    });
  }
  return out;
}

template <class T>
Tensor<T> channel_mean(const Tensor<T>& input) {
  const Shape& s = input.shape();
  Tensor<T> out(Shape{s.n, 1, s.h, s.w});
  const T* x = input.data().data();
  T* y = out.mutable_data().data();
  const i64 plane = s.plane();
  const T inv = T(1) / static_cast<T>(s.c);
  for (i64 n = 0; n < s.n; ++n) {
    T* yp = y + n * plane;
    for (i64 c = 0; c < s.c; ++c) {
      const T* xp = x + (n * s.c + c) * plane;
      for (i64 i = 0; i < plane; ++i) yp[i] += xp[i];
    }
    for (i64 i = 0; i < plane; ++i) yp[i] *= inv;
  }
  if (Autograd<T>::should_record({&input})) {
    Autograd<T>::record(out, [input, out, inv]() mutable {
      std::span<T> gx = Autograd<T>::sink(input);
      if (gx.empty()) return;
      const Shape& s = input.shape();
      const i64 plane = s.plane();
      const T* gy = out.grad().data();
      for (i64 n = 0; n < s.n; ++n)
        for (i64 c = 0; c < s.c; ++c) {
          T* gp = gx.data() + (n * s.c + c) * plane;
          for (i64 i = 0; i < plane; ++i) gp[i] += gy[n * plane + i] * inv;
        }
    });
  }
  return out;
}

template <class T>
Tensor<T> channel_max(const Tensor<T>& input) {
  const Shape& s = input.shape();
  Tensor<T> out(Shape{s.n, 1, s.h, s.w});
  const T* x = input.data().data();
  T* y = out.mutable_data().data();
  const i64 plane = s.plane();
  std::vector<i64> argmax(static_cast<std::size_t>(s.n * plane));
  for (i64 n = 0; n < s.n; ++n) {
    for (i64 i = 0; i < plane; ++i) {
      i64 best = n * s.c * plane + i;
      for (i64 c = 1; c < s.c; ++c) {
        const i64 idx = (n * s.c + c) * plane + i;
        if (beats(x[idx], x[best])) best = idx;
      }
      argmax[n * plane + i] = best;
      y[n * plane + i] = x[best];
    }
  }
  if (Autograd<T>::should_record({&input})) {
    Autograd<T>::record(out, [input, out, argmax = std::move(argmax)]() mutable {
      std::span<T> gx = Autograd<T>::sink(input);
      if (gx.empty()) return;
      const T* gy = out.grad().data();
      for (std::size_t i = 0; i < argmax.size(); ++i) gx[argmax[i]] += gy[i];
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// reductions

template <class T>
Tensor<T> sum(const Tensor<T>& input) {
  double acc = 0.0;
  for (T v : input.data()) acc += v;
  Tensor<T> out = Tensor<T>::scalar(static_cast<T>(acc));
  if (Autograd<T>::should_record({&input})) {
    Autograd<T>::record(out, [input, out]() mutable {
      std::span<T> gx = Autograd<T>::sink(input);
      const T g = out.grad()[0];
      for (T& v : gx) v += g;
    });
  }
  return out;
}

template <class T>
Tensor<T> mean(const Tensor<T>& input) {
  double acc = 0.0;
  for (T v : input.data()) acc += v;
  const double n = static_cast<double>(input.numel());
  Tensor<T> out = Tensor<T>::scalar(static_cast<T>(acc / n));
  if (Autograd<T>::should_record({&input})) {
    Autograd<T>::record(out, [input, out, n]() mutable {
      std::span<T> gx = Autograd<T>::sink(input);
      const T g = static_cast<T>(out.grad()[0] / n);
      for (T& v : gx) v += g;
    });
  }
  return out;
}

template <class T>
Tensor<T> mse(const Tensor<T>& prediction, const Tensor<T>& target) {
  require_same_shape(prediction, target, "mse");
  const auto p = prediction.data();
  const auto t = target.data();
  double acc = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double d = static_cast<double>(p[i]) - static_cast<double>(t[i]);
    acc += d * d;
  }
  const double n = static_cast<double>(p.size());
  Tensor<T> out = Tensor<T>::scalar(static_cast<T>(acc / n));
  NOWCAST_FINITE(out, "mse");
  if (Autograd<T>::should_record({&prediction, &target})) {
    Autograd<T>::record(out, [prediction, target, out, n]() mutable {
      const T k = static_cast<T>(2.0 * out.grad()[0] / n);
      const auto p = prediction.data();
      const auto t = target.data();
      std::span<T> gp = Autograd<T>::sink(prediction);
      std::span<T> gt = Autograd<T>::sink(target);
      for (std::size_t i = 0; i < gp.size(); ++i) gp[i] += k * (p[i] - t[i]);
      for (std::size_t i = 0; i < gt.size(); ++i) gt[i] -= k * (p[i] - t[i]);
    });
  }
  return out;
}

// ---------------------------------------------------------------------------

#define NOWCAST_INSTANTIATE_OPS(T)                                                          \
  template Tensor<T> conv2d(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,          \
                            Conv2dOptions);                                                 \
  template struct BatchNormState<T>;                                                        \
  template Tensor<T> batchnorm2d(const Tensor<T>&, BatchNormState<T>&, Mode);               \
  template Tensor<T> relu(const Tensor<T>&);                                                \
  template Tensor<T> sigmoid(const Tensor<T>&);                                             \
  template Tensor<T> maxpool2(const Tensor<T>&);                                            \
  template Tensor<T> upsample_bilinear2(const Tensor<T>&);                                  \
  template Tensor<T> concat_channels(const Tensor<T>&, const Tensor<T>&);                   \
  template Tensor<T> slice_channels(const Tensor<T>&, std::int64_t, std::int64_t);          \
  template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                               \
  template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                               \
  template Tensor<T> scale(const Tensor<T>&, T);                                            \
  template Tensor<T> global_avg_pool(const Tensor<T>&);                                     \
  template Tensor<T> global_max_pool(const Tensor<T>&);                                     \
  template Tensor<T> channel_mean(const Tensor<T>&);                                        \
  template Tensor<T> channel_max(const Tensor<T>&);                                         \
  template Tensor<T> sum(const Tensor<T>&);                                                 \
  template Tensor<T> mean(const Tensor<T>&);                                                \
  template Tensor<T> mse(const Tensor<T>&, const Tensor<T>&);

NOWCAST_INSTANTIATE_OPS(float)
NOWCAST_INSTANTIATE_OPS(double)

#undef NOWCAST_INSTANTIATE_OPS

}  // namespace nowcast::ops
