#pragma once

#include <algorithm>
#include <cmath>

#include "noduleid/rng.hpp"
#include "noduleid/tensor.hpp"

namespace noduleid::nn {

// 3D augmentation on single-sample (C, D, H, W) tensors. Spatial axes are
// indexed 0..2 == (D, H, W).

template <typename T>
Tensor<T> flip_axis(const Tensor<T>& x, int axis) {
  const int c = x.dim(0), d = x.dim(1), h = x.dim(2), w = x.dim(3);
  Tensor<T> y(x.shape());
  for (int cc = 0; cc < c; ++cc)
    for (int zd = 0; zd < d; ++zd)
      for (int zh = 0; zh < h; ++zh)
        for (int zw = 0; zw < w; ++zw) {
          const int sd = axis == 0 ? d - 1 - zd : zd;
          const int sh = axis == 1 ? h - 1 - zh : zh;
          const int sw = axis == 2 ? w - 1 - zw : zw;
          y[((static_cast<std::int64_t>(cc) * d + zd) * h + zh) * w + zw] =
              x[((static_cast<std::int64_t>(cc) * d + sd) * h + sh) * w + sw];
        }
  return y;
}

// Quarter-turn rotation in the plane of two spatial axes (cube inputs).
template <typename T>
Tensor<T> rot90(const Tensor<T>& x, int axis_a, int axis_b) {
  const int c = x.dim(0), d = x.dim(1), h = x.dim(2), w = x.dim(3);
  Tensor<T> y(x.shape());
  const int n = x.dim(1 + axis_a);
  for (int cc = 0; cc < c; ++cc)
    for (int zd = 0; zd < d; ++zd)
      for (int zh = 0; zh < h; ++zh)
        for (int zw = 0; zw < w; ++zw) {
          int idx[3] = {zd, zh, zw};
          const int a = idx[axis_a], b = idx[axis_b];
          idx[axis_a] = b;
          idx[axis_b] = n - 1 - a;
          y[((static_cast<std::int64_t>(cc) * d + zd) * h + zh) * w + zw] =
              x[((static_cast<std::int64_t>(cc) * d + idx[0]) * h + idx[1]) * w + idx[2]];
        }
  return y;
}

// Scale about the center with clamped trilinear sampling; output size is
// unchanged. factor > 1 zooms in.
template <typename T>
Tensor<T> zoom(const Tensor<T>& x, double factor) {
  const int c = x.dim(0), d = x.dim(1), h = x.dim(2), w = x.dim(3);
  Tensor<T> y(x.shape());
  const double cd = (d - 1) / 2.0, ch = (h - 1) / 2.0, cw = (w - 1) / 2.0;
  for (int cc = 0; cc < c; ++cc) {
    const T* xc = x.data() + static_cast<std::int64_t>(cc) * d * h * w;
    const auto sample = [&](double sd, double sh, double sw) {
      sd = std::clamp(sd, 0.0, d - 1.0);
      sh = std::clamp(sh, 0.0, h - 1.0);
      sw = std::clamp(sw, 0.0, w - 1.0);
      const int d0 = static_cast<int>(sd), h0 = static_cast<int>(sh), w0 = static_cast<int>(sw);
      const int d1 = std::min(d0 + 1, d - 1), h1 = std::min(h0 + 1, h - 1),
                w1 = std::min(w0 + 1, w - 1);
      const double fd = sd - d0, fh = sh - h0, fw = sw - w0;
      const auto v = [&](int zd, int zh, int zw) {
        return static_cast<double>(xc[(static_cast<std::int64_t>(zd) * h + zh) * w + zw]);
      };
      const double c00 = v(d0, h0, w0) + fw * (v(d0, h0, w1) - v(d0, h0, w0));
      const double c01 = v(d0, h1, w0) + fw * (v(d0, h1, w1) - v(d0, h1, w0));
      const double c10 = v(d1, h0, w0) + fw * (v(d1, h0, w1) - v(d1, h0, w0));
      const double c11 = v(d1, h1, w0) + fw * (v(d1, h1, w1) - v(d1, h1, w0));
      const double c0 = c00 + fh * (c01 - c00);
      const double c1 = c10 + fh * (c11 - c10);
      return c0 + fd * (c1 - c0);
    };
    for (int zd = 0; zd < d; ++zd)
      for (int zh = 0; zh < h; ++zh)
        for (int zw = 0; zw < w; ++zw)
          y[((static_cast<std::int64_t>(cc) * d + zd) * h + zh) * w + zw] = static_cast<T>(
              sample(cd + (zd - cd) / factor, ch + (zh - ch) / factor, cw + (zw - cw) / factor));
  }
  return y;
}

// Multiplicative intensity jitter, re-clipped to the normalized [0, 1] range.
template <typename T>
Tensor<T> lighting(const Tensor<T>& x, double factor) {
  Tensor<T> y(x.shape());
  for (std::int64_t i = 0; i < x.numel(); ++i)
    y[i] = static_cast<T>(std::clamp(static_cast<double>(x[i]) * factor, 0.0, 1.0));
  return y;
}

struct AugmentFlags {
  bool flip = true;
  bool rotation = true;
  bool zoom = true;
  bool lighting = false;  // classifier recipe only
};

// Random combination of the enabled transforms; identity when all disabled.
template <typename T>
Tensor<T> random_augment(const Tensor<T>& x, Rng& rng, const AugmentFlags& flags) {
  Tensor<T> y = x;
  if (flags.flip) {
    for (int a = 0; a < 3; ++a)
      if (rng.bernoulli(0.5)) y = flip_axis(y, a);
  }
  if (flags.rotation) {
    static constexpr int planes[3][2] = {{0, 1}, {0, 2}, {1, 2}};
    const int p = rng.uniform_int(3);
    const int quarters = rng.uniform_int(4);
    for (int q = 0; q < quarters; ++q) y = rot90(y, planes[p][0], planes[p][1]);
  }
  if (flags.zoom) {
    const double f = rng.uniform(0.9, 1.1);
    y = zoom(y, f);
  }
  if (flags.lighting) {
    const double f = rng.uniform(0.9, 1.1);
    y = lighting(y, f);
  }
  return y;
}

}  // namespace noduleid::nn
