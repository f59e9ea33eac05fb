#pragma once

#include <Eigen/Core>
#include <cmath>
#include <string>
#include <vector>

#include "noduleid/common.hpp"
#include "noduleid/rng.hpp"
#include "noduleid/tensor.hpp"

namespace noduleid::nn {

template <typename T>
using MatRM = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapRM = Eigen::Map<MatRM<T>>;
template <typename T>
using CMapRM = Eigen::Map<const MatRM<T>>;

// Trainable tensor plus its gradient.
template <typename T>
struct Param {
  Tensor<T> v, g;
  std::string name;

  void resize(std::vector<int> shape, std::string n) {
    v = Tensor<T>(shape);
    g = Tensor<T>(std::move(shape));
    name = std::move(n);
  }
  void zero_grad() { g.zero(); }
};

template <typename T>
using ParamRefs = std::vector<Param<T>*>;

// Named non-trainable state (batch-norm running stats), saved in checkpoints.
template <typename T>
struct BufferRef {
  std::string name;
  Tensor<T>* t;
};

// Forward-pass context. Training mode enables caching for backward, batch
// statistics, and dropout; rng drives dropout masks.
struct Ctx {
  bool train = false;
  Rng* rng = nullptr;
};

template <typename T>
void kaiming_normal(Tensor<T>& w, std::int64_t fan_in, Rng& rng) {
  const double stddev = std::sqrt(2.0 / static_cast<double>(fan_in));
  for (std::int64_t i = 0; i < w.numel(); ++i) w[i] = static_cast<T>(rng.normal(0.0, stddev));
}

// ---------------------------------------------------------------------------
// Conv3d: (N, C, D, H, W) -> (N, O, OD, OH, OW); im2col + GEMM.
// ---------------------------------------------------------------------------
template <typename T>
class Conv3d {
 public:
  Conv3d() = default;
  Conv3d(int in_ch, int out_ch, Idx3 kernel, Idx3 stride, Idx3 pad, bool with_bias,
         std::string name)
      : in_ch_(in_ch), out_ch_(out_ch), k_(kernel), s_(stride), p_(pad), has_bias_(with_bias) {
    weight_.resize({out_ch, in_ch, k_[0], k_[1], k_[2]}, name + ".weight");
    if (has_bias_) bias_.resize({out_ch}, name + ".bias");
  }
  Conv3d(int in_ch, int out_ch, int kernel, int stride, int pad, bool with_bias, std::string name)
      : Conv3d(in_ch, out_ch, Idx3{kernel, kernel, kernel}, Idx3{stride, stride, stride},
               Idx3{pad, pad, pad}, with_bias, std::move(name)) {}

  void init(Rng& rng) {
    kaiming_normal(weight_.v, static_cast<std::int64_t>(in_ch_) * k_[0] * k_[1] * k_[2], rng);
    if (has_bias_) bias_.v.zero();
  }

  std::array<int, 3> out_spatial(const std::vector<int>& xshape) const {
    std::array<int, 3> o;
    for (int a = 0; a < 3; ++a) {
      const int in = xshape[static_cast<std::size_t>(2 + a)];
      o[a] = (in + 2 * p_[a] - k_[a]) / s_[a] + 1;
      if (o[a] < 1) throw std::invalid_argument("conv input too small");
    }
    return o;
  }

  Tensor<T> forward(const Tensor<T>& x, const Ctx& ctx) {
    check_input(x);
    const int n = x.dim(0);
    const auto o = out_spatial(x.shape());
    Tensor<T> y({n, out_ch_, o[0], o[1], o[2]});

    const std::int64_t kcols = static_cast<std::int64_t>(in_ch_) * k_[0] * k_[1] * k_[2];
    const std::int64_t nsp = static_cast<std::int64_t>(o[0]) * o[1] * o[2];
    const int chunk = chunk_samples(n, kcols, nsp);
    std::vector<T> col(static_cast<std::size_t>(kcols * nsp * chunk));
    std::vector<T> ybuf(static_cast<std::size_t>(out_ch_ * nsp * chunk));

    CMapRM<T> w(weight_.v.data(), out_ch_, kcols);
    const std::int64_t y_stride = y.numel() / n;
    for (int i0 = 0; i0 < n; i0 += chunk) {
      const int m = std::min(chunk, n - i0);
      const std::int64_t cols = nsp * m;
      for (int i = 0; i < m; ++i) im2col(x, i0 + i, o, col.data(), cols, i * nsp);
      CMapRM<T> cm(col.data(), kcols, cols);
      MapRM<T> ym(ybuf.data(), out_ch_, cols);
      ym.noalias() = w * cm;
      for (int i = 0; i < m; ++i) {
        T* dst = y.data() + static_cast<std::int64_t>(i0 + i) * y_stride;
        for (int c = 0; c < out_ch_; ++c) {
          const T* src = ybuf.data() + static_cast<std::int64_t>(c) * cols + i * nsp;
          if (has_bias_) {
            const T b = bias_.v[c];
            for (std::int64_t j = 0; j < nsp; ++j) dst[j] = src[j] + b;
          } else {
            std::copy(src, src + nsp, dst);
          }
          dst += nsp;
        }
      }
    }
    if (ctx.train) {
      x_cache_ = x;
      out_cache_ = o;
    }
    return y;
  }

  Tensor<T> backward(const Tensor<T>& dy) {
    const Tensor<T>& x = x_cache_;
    const int n = x.dim(0);
    const auto& o = out_cache_;
    Tensor<T> dx(x.shape());

    const std::int64_t kcols = static_cast<std::int64_t>(in_ch_) * k_[0] * k_[1] * k_[2];
    const std::int64_t nsp = static_cast<std::int64_t>(o[0]) * o[1] * o[2];
    const int chunk = chunk_samples(n, kcols, nsp);
    std::vector<T> col(static_cast<std::size_t>(kcols * nsp * chunk));
    std::vector<T> dybuf(static_cast<std::size_t>(out_ch_ * nsp * chunk));
    std::vector<T> dcol(static_cast<std::size_t>(kcols * nsp * chunk));

    CMapRM<T> w(weight_.v.data(), out_ch_, kcols);
    MapRM<T> dw(weight_.g.data(), out_ch_, kcols);
    const std::int64_t dy_stride = dy.numel() / n;
    for (int i0 = 0; i0 < n; i0 += chunk) {
      const int m = std::min(chunk, n - i0);
      const std::int64_t cols = nsp * m;
      for (int i = 0; i < m; ++i) {
        im2col(x, i0 + i, o, col.data(), cols, i * nsp);
        const T* src = dy.data() + static_cast<std::int64_t>(i0 + i) * dy_stride;
        for (int c = 0; c < out_ch_; ++c) {
          std::copy(src, src + nsp, dybuf.data() + static_cast<std::int64_t>(c) * cols + i * nsp);
          src += nsp;
        }
      }
      CMapRM<T> cm(col.data(), kcols, cols);
      CMapRM<T> dym(dybuf.data(), out_ch_, cols);
      dw.noalias() += dym * cm.transpose();
      if (has_bias_)
        for (int c = 0; c < out_ch_; ++c) bias_.g[c] += dym.row(c).sum();
      MapRM<T> dcm(dcol.data(), kcols, cols);
      dcm.noalias() = w.transpose() * dym;
      for (int i = 0; i < m; ++i) col2im(dcol.data(), i0 + i, o, dx, cols, i * nsp);
    }
    return dx;
  }

  void collect(ParamRefs<T>& out) {
    out.push_back(&weight_);
    if (has_bias_) out.push_back(&bias_);
  }

  int out_channels() const { return out_ch_; }
  int in_channels() const { return in_ch_; }

 private:
  void check_input(const Tensor<T>& x) const {
    if (x.ndim() != 5 || x.dim(1) != in_ch_)
      throw std::invalid_argument("conv3d: bad input shape " + x.shape_str());
  }

  // Column stride (total columns in the chunk) and offset let several samples
  // share one col buffer, so the GEMM sees wider matrices.
  void im2col(const Tensor<T>& x, int sample, const std::array<int, 3>& o, T* col,
              std::int64_t col_stride, std::int64_t col_offset) const {
    const int d_in = x.dim(2), h_in = x.dim(3), w_in = x.dim(4);
    const std::int64_t plane_in = static_cast<std::int64_t>(h_in) * w_in;
    const std::int64_t chan_in = static_cast<std::int64_t>(d_in) * plane_in;
    const T* xs = x.data() + sample * static_cast<std::int64_t>(in_ch_) * chan_in;

    std::int64_t row = 0;
    for (int c = 0; c < in_ch_; ++c) {
      const T* xc = xs + c * chan_in;
      for (int kd = 0; kd < k_[0]; ++kd)
        for (int kh = 0; kh < k_[1]; ++kh)
          for (int kw = 0; kw < k_[2]; ++kw, ++row) {
            T* dst = col + row * col_stride + col_offset;
            for (int od = 0; od < o[0]; ++od) {
              const int id = od * s_[0] - p_[0] + kd;
              if (id < 0 || id >= d_in) {
                std::fill(dst, dst + static_cast<std::int64_t>(o[1]) * o[2], T(0));
                dst += static_cast<std::int64_t>(o[1]) * o[2];
                continue;
              }
              for (int oh = 0; oh < o[1]; ++oh) {
                const int ih = oh * s_[1] - p_[1] + kh;
                if (ih < 0 || ih >= h_in) {
                  std::fill(dst, dst + o[2], T(0));
                  dst += o[2];
                  continue;
                }
                const T* src_row = xc + id * plane_in + static_cast<std::int64_t>(ih) * w_in;
                if (s_[2] == 1) {
                  const int iw0 = -p_[2] + kw;
                  const int a = std::max(0, -iw0);
                  const int b = std::min(o[2], w_in - iw0);
                  if (a > 0) std::fill(dst, dst + std::min(a, o[2]), T(0));
                  if (b > a) std::copy(src_row + iw0 + a, src_row + iw0 + b, dst + a);
                  if (b < o[2]) std::fill(dst + std::max(a, b), dst + o[2], T(0));
                  dst += o[2];
                } else {
                  for (int ow = 0; ow < o[2]; ++ow, ++dst) {
                    const int iw = ow * s_[2] - p_[2] + kw;
                    *dst = (iw >= 0 && iw < w_in) ? src_row[iw] : T(0);
                  }
                }
              }
            }
          }
    }
  }

  void col2im(const T* col, int sample, const std::array<int, 3>& o, Tensor<T>& dx,
              std::int64_t col_stride, std::int64_t col_offset) const {
    const int d_in = dx.dim(2), h_in = dx.dim(3), w_in = dx.dim(4);
    const std::int64_t plane_in = static_cast<std::int64_t>(h_in) * w_in;
    const std::int64_t chan_in = static_cast<std::int64_t>(d_in) * plane_in;
    T* xs = dx.data() + sample * static_cast<std::int64_t>(in_ch_) * chan_in;

    std::int64_t row = 0;
    for (int c = 0; c < in_ch_; ++c) {
      T* xc = xs + c * chan_in;
      for (int kd = 0; kd < k_[0]; ++kd)
        for (int kh = 0; kh < k_[1]; ++kh)
          for (int kw = 0; kw < k_[2]; ++kw, ++row) {
            const T* src = col + row * col_stride + col_offset;
            for (int od = 0; od < o[0]; ++od) {
              const int id = od * s_[0] - p_[0] + kd;
              if (id < 0 || id >= d_in) {
                src += static_cast<std::int64_t>(o[1]) * o[2];
                continue;
              }
              for (int oh = 0; oh < o[1]; ++oh) {
                const int ih = oh * s_[1] - p_[1] + kh;
                if (ih < 0 || ih >= h_in) {
                  src += o[2];
                  continue;
                }
                T* dst_row = xc + id * plane_in + static_cast<std::int64_t>(ih) * w_in;
                for (int ow = 0; ow < o[2]; ++ow, ++src) {
                  const int iw = ow * s_[2] - p_[2] + kw;
                  if (iw >= 0 && iw < w_in) dst_row[iw] += *src;
                }
              }
            }
          }
    }
  }

  // Batch samples through one col buffer only while it stays cache-friendly;
  // this widens the tiny deep-layer GEMMs without thrashing on early layers.
  int chunk_samples(int n, std::int64_t kcols, std::int64_t nsp) const {
    const std::int64_t cap = 12ll * 1024 * 1024 / static_cast<std::int64_t>(sizeof(T));
    const std::int64_t per_sample = std::max<std::int64_t>(1, kcols * nsp);
    return std::max(1, static_cast<int>(std::min<std::int64_t>(n, cap / per_sample)));
  }

  int in_ch_ = 0, out_ch_ = 0;
  Idx3 k_{3, 3, 3}, s_{1, 1, 1}, p_{1, 1, 1};
  bool has_bias_ = false;
  Param<T> weight_, bias_;
  Tensor<T> x_cache_;
  std::array<int, 3> out_cache_{0, 0, 0};
};

// ---------------------------------------------------------------------------
// BatchNorm over channel dim 1 of (N, C, ...) tensors (works for (N, C) too).
// Train mode uses batch statistics and updates running estimates; eval mode
// uses the running estimates and touches nothing.
// ---------------------------------------------------------------------------
template <typename T>
class BatchNorm {
 public:
  BatchNorm() = default;
  BatchNorm(int channels, std::string name, double eps = 1e-5, double momentum = 0.1)
      : ch_(channels), eps_(eps), momentum_(momentum), name_(std::move(name)) {
    gamma_.resize({channels}, name_ + ".gamma");
    beta_.resize({channels}, name_ + ".beta");
    gamma_.v.fill(T(1));
    running_mean_ = Tensor<T>({channels});
    running_var_ = Tensor<T>({channels}, T(1));
  }

  Tensor<T> forward(const Tensor<T>& x, const Ctx& ctx) {
    if (x.ndim() < 2 || x.dim(1) != ch_)
      throw std::invalid_argument("batchnorm: bad input shape " + x.shape_str());
    const int n = x.dim(0);
    const std::int64_t spatial = x.numel() / (static_cast<std::int64_t>(n) * ch_);
    const std::int64_t count = static_cast<std::int64_t>(n) * spatial;
    Tensor<T> y(x.shape());

    if (ctx.train) {
      mean_ = Tensor<T>({ch_});
      invstd_ = Tensor<T>({ch_});
      for (int c = 0; c < ch_; ++c) {
        double s = 0.0;
        for (int i = 0; i < n; ++i) {
          const T* p = x.data() + (static_cast<std::int64_t>(i) * ch_ + c) * spatial;
          for (std::int64_t j = 0; j < spatial; ++j) s += static_cast<double>(p[j]);
        }
        const double m = s / static_cast<double>(count);
        double v = 0.0;
        for (int i = 0; i < n; ++i) {
          const T* p = x.data() + (static_cast<std::int64_t>(i) * ch_ + c) * spatial;
          for (std::int64_t j = 0; j < spatial; ++j) {
            const double d = static_cast<double>(p[j]) - m;
            v += d * d;
          }
        }
        v /= static_cast<double>(count);
        mean_[c] = static_cast<T>(m);
        invstd_[c] = static_cast<T>(1.0 / std::sqrt(v + eps_));
        running_mean_[c] = static_cast<T>((1.0 - momentum_) * running_mean_[c] + momentum_ * m);
        const double v_unbiased = count > 1 ? v * count / static_cast<double>(count - 1) : v;
        running_var_[c] =
            static_cast<T>((1.0 - momentum_) * running_var_[c] + momentum_ * v_unbiased);
      }
      xhat_ = Tensor<T>(x.shape());
      for (int i = 0; i < n; ++i)
        for (int c = 0; c < ch_; ++c) {
          const T* p = x.data() + (static_cast<std::int64_t>(i) * ch_ + c) * spatial;
          T* ph = xhat_.data() + (static_cast<std::int64_t>(i) * ch_ + c) * spatial;
          T* py = y.data() + (static_cast<std::int64_t>(i) * ch_ + c) * spatial;
          const T m = mean_[c], is = invstd_[c], g = gamma_.v[c], b = beta_.v[c];
          for (std::int64_t j = 0; j < spatial; ++j) {
            ph[j] = (p[j] - m) * is;
            py[j] = g * ph[j] + b;
          }
        }
      count_cache_ = count;
    } else {
      for (int i = 0; i < n; ++i)
        for (int c = 0; c < ch_; ++c) {
          const T* p = x.data() + (static_cast<std::int64_t>(i) * ch_ + c) * spatial;
          T* py = y.data() + (static_cast<std::int64_t>(i) * ch_ + c) * spatial;
          const T is = static_cast<T>(1.0 / std::sqrt(static_cast<double>(running_var_[c]) + eps_));
          const T m = running_mean_[c], g = gamma_.v[c], b = beta_.v[c];
          for (std::int64_t j = 0; j < spatial; ++j) py[j] = g * (p[j] - m) * is + b;
        }
    }
    return y;
  }

  Tensor<T> backward(const Tensor<T>& dy) {
    const int n = dy.dim(0);
    const std::int64_t spatial = dy.numel() / (static_cast<std::int64_t>(n) * ch_);
    const std::int64_t count = count_cache_;
    Tensor<T> dx(dy.shape());
    for (int c = 0; c < ch_; ++c) {
      double sum_dy = 0.0, sum_dy_xhat = 0.0;
      for (int i = 0; i < n; ++i) {
        const std::int64_t off = (static_cast<std::int64_t>(i) * ch_ + c) * spatial;
        const T* pdy = dy.data() + off;
        const T* ph = xhat_.data() + off;
        for (std::int64_t j = 0; j < spatial; ++j) {
          sum_dy += static_cast<double>(pdy[j]);
          sum_dy_xhat += static_cast<double>(pdy[j]) * ph[j];
        }
      }
      beta_.g[c] += static_cast<T>(sum_dy);
      gamma_.g[c] += static_cast<T>(sum_dy_xhat);
      const double g = static_cast<double>(gamma_.v[c]);
      const double is = static_cast<double>(invstd_[c]);
      const double inv_count = 1.0 / static_cast<double>(count);
      for (int i = 0; i < n; ++i) {
        const std::int64_t off = (static_cast<std::int64_t>(i) * ch_ + c) * spatial;
        const T* pdy = dy.data() + off;
        const T* ph = xhat_.data() + off;
        T* pdx = dx.data() + off;
        for (std::int64_t j = 0; j < spatial; ++j) {
          const double t = static_cast<double>(pdy[j]) -
                           inv_count * (sum_dy + static_cast<double>(ph[j]) * sum_dy_xhat);
          pdx[j] = static_cast<T>(g * is * t);
        }
      }
    }
    return dx;
  }

  void collect(ParamRefs<T>& out) {
    out.push_back(&gamma_);
    out.push_back(&beta_);
  }
  void collect_buffers(std::vector<BufferRef<T>>& out) {
    out.push_back({name_ + ".running_mean", &running_mean_});
    out.push_back({name_ + ".running_var", &running_var_});
  }

 private:
  int ch_ = 0;
  double eps_ = 1e-5, momentum_ = 0.1;
  std::string name_;
  Param<T> gamma_, beta_;
  Tensor<T> running_mean_, running_var_;
  Tensor<T> mean_, invstd_, xhat_;
  std::int64_t count_cache_ = 0;
};

// ---------------------------------------------------------------------------
template <typename T>
class ReLU {
 public:
  Tensor<T> forward(const Tensor<T>& x, const Ctx& ctx) {
    Tensor<T> y(x.shape());
    for (std::int64_t i = 0; i < x.numel(); ++i) y[i] = x[i] > T(0) ? x[i] : T(0);
    if (ctx.train) y_cache_ = y;
    return y;
  }
  Tensor<T> backward(const Tensor<T>& dy) {
    Tensor<T> dx(dy.shape());
    for (std::int64_t i = 0; i < dy.numel(); ++i)
      dx[i] = y_cache_[i] > T(0) ? dy[i] : T(0);
    return dx;
  }

 private:
  Tensor<T> y_cache_;
};

// ---------------------------------------------------------------------------
template <typename T>
class MaxPool3d {
 public:
  MaxPool3d() = default;
  MaxPool3d(int kernel, int stride, int pad) : k_(kernel), s_(stride), p_(pad) {}

  Tensor<T> forward(const Tensor<T>& x, const Ctx& ctx) {
    const int n = x.dim(0), c = x.dim(1);
    std::array<int, 3> in{x.dim(2), x.dim(3), x.dim(4)}, o;
    for (int a = 0; a < 3; ++a) o[a] = (in[a] + 2 * p_ - k_) / s_ + 1;
    Tensor<T> y({n, c, o[0], o[1], o[2]});
    arg_.assign(static_cast<std::size_t>(y.numel()), 0);

    const std::int64_t plane = static_cast<std::int64_t>(in[1]) * in[2];
    const std::int64_t chan = static_cast<std::int64_t>(in[0]) * plane;
    std::int64_t yi = 0;
    for (int i = 0; i < n; ++i)
      for (int cc = 0; cc < c; ++cc) {
        const std::int64_t base = (static_cast<std::int64_t>(i) * c + cc) * chan;
        const T* xp = x.data() + base;
        for (int od = 0; od < o[0]; ++od)
          for (int oh = 0; oh < o[1]; ++oh)
            for (int ow = 0; ow < o[2]; ++ow, ++yi) {
              T best = std::numeric_limits<T>::lowest();
              std::int64_t best_idx = -1;
              for (int kd = 0; kd < k_; ++kd) {
                const int id = od * s_ - p_ + kd;
                if (id < 0 || id >= in[0]) continue;
                for (int kh = 0; kh < k_; ++kh) {
                  const int ih = oh * s_ - p_ + kh;
                  if (ih < 0 || ih >= in[1]) continue;
                  for (int kw = 0; kw < k_; ++kw) {
                    const int iw = ow * s_ - p_ + kw;
                    if (iw < 0 || iw >= in[2]) continue;
                    const std::int64_t idx = id * plane + static_cast<std::int64_t>(ih) * in[2] + iw;
                    if (xp[idx] > best) {
                      best = xp[idx];
                      best_idx = base + idx;
                    }
                  }
                }
              }
              y[yi] = best;
              arg_[static_cast<std::size_t>(yi)] = best_idx;
            }
      }
    if (ctx.train) x_shape_ = x.shape();
    return y;
  }

  Tensor<T> backward(const Tensor<T>& dy) {
    Tensor<T> dx(x_shape_);
    for (std::int64_t i = 0; i < dy.numel(); ++i)
      dx[arg_[static_cast<std::size_t>(i)]] += dy[i];
    return dx;
  }

 private:
  int k_ = 3, s_ = 2, p_ = 1;
  std::vector<std::int64_t> arg_;
  std::vector<int> x_shape_;
};

// ---------------------------------------------------------------------------
// Global average pool (N, C, D, H, W) -> (N, C).
template <typename T>
class GlobalAvgPool {
 public:
  Tensor<T> forward(const Tensor<T>& x, const Ctx& ctx) {
    const int n = x.dim(0), c = x.dim(1);
    const std::int64_t spatial = x.numel() / (static_cast<std::int64_t>(n) * c);
    Tensor<T> y({n, c});
    for (std::int64_t i = 0; i < static_cast<std::int64_t>(n) * c; ++i) {
      const T* p = x.data() + i * spatial;
      double s = 0.0;
      for (std::int64_t j = 0; j < spatial; ++j) s += static_cast<double>(p[j]);
      y[i] = static_cast<T>(s / static_cast<double>(spatial));
    }
    if (ctx.train) x_shape_ = x.shape();
    return y;
  }
  Tensor<T> backward(const Tensor<T>& dy) {
    Tensor<T> dx(x_shape_);
    const int n = dx.dim(0), c = dx.dim(1);
    const std::int64_t spatial = dx.numel() / (static_cast<std::int64_t>(n) * c);
    for (std::int64_t i = 0; i < static_cast<std::int64_t>(n) * c; ++i) {
      const T g = static_cast<T>(static_cast<double>(dy[i]) / static_cast<double>(spatial));
      T* p = dx.data() + i * spatial;
      for (std::int64_t j = 0; j < spatial; ++j) p[j] = g;
    }
    return dx;
  }

 private:
  std::vector<int> x_shape_;
};

// ---------------------------------------------------------------------------
template <typename T>
class Linear {
 public:
  Linear() = default;
  Linear(int in, int out, std::string name) : in_(in), out_(out) {
    weight_.resize({out, in}, name + ".weight");
    bias_.resize({out}, name + ".bias");
  }

  void init(Rng& rng) {
    kaiming_normal(weight_.v, in_, rng);
    bias_.v.zero();
  }

  Tensor<T> forward(const Tensor<T>& x, const Ctx& ctx) {
    if (x.ndim() != 2 || x.dim(1) != in_)
      throw std::invalid_argument("linear: bad input shape " + x.shape_str());
    const int n = x.dim(0);
    Tensor<T> y({n, out_});
    CMapRM<T> xm(x.data(), n, in_), wm(weight_.v.data(), out_, in_);
    MapRM<T> ym(y.data(), n, out_);
    ym.noalias() = xm * wm.transpose();
    for (int i = 0; i < n; ++i)
      for (int c = 0; c < out_; ++c) y[static_cast<std::int64_t>(i) * out_ + c] += bias_.v[c];
    if (ctx.train) x_cache_ = x;
    return y;
  }

  Tensor<T> backward(const Tensor<T>& dy) {
    const int n = dy.dim(0);
    Tensor<T> dx({n, in_});
    CMapRM<T> dym(dy.data(), n, out_), xm(x_cache_.data(), n, in_),
        wm(weight_.v.data(), out_, in_);
    MapRM<T> dxm(dx.data(), n, in_), dwm(weight_.g.data(), out_, in_);
    dwm.noalias() += dym.transpose() * xm;
    dxm.noalias() = dym * wm;
    for (int i = 0; i < n; ++i)
      for (int c = 0; c < out_; ++c) bias_.g[c] += dy[static_cast<std::int64_t>(i) * out_ + c];
    return dx;
  }

  void collect(ParamRefs<T>& out) {
    out.push_back(&weight_);
    out.push_back(&bias_);
  }

  Param<T>& weight() { return weight_; }
  Param<T>& bias() { return bias_; }

 private:
  int in_ = 0, out_ = 0;
  Param<T> weight_, bias_;
  Tensor<T> x_cache_;
};

// ---------------------------------------------------------------------------
template <typename T>
class Dropout {
 public:
  Dropout() = default;
  explicit Dropout(double p) : p_(p) {}

  Tensor<T> forward(const Tensor<T>& x, const Ctx& ctx) {
    if (!ctx.train || p_ <= 0.0) {
      active_ = false;
      return x;
    }
    if (ctx.rng == nullptr) throw std::logic_error("dropout requires an rng in train mode");
    active_ = true;
    mask_.assign(static_cast<std::size_t>(x.numel()), T(0));
    const T scale = static_cast<T>(1.0 / (1.0 - p_));
    Tensor<T> y(x.shape());
    for (std::int64_t i = 0; i < x.numel(); ++i) {
      if (!ctx.rng->bernoulli(p_)) {
        mask_[static_cast<std::size_t>(i)] = scale;
        y[i] = x[i] * scale;
      }
    }
    return y;
  }

  Tensor<T> backward(const Tensor<T>& dy) {
    if (!active_) return dy;
    Tensor<T> dx(dy.shape());
    for (std::int64_t i = 0; i < dy.numel(); ++i) dx[i] = dy[i] * mask_[static_cast<std::size_t>(i)];
    return dx;
  }

 private:
  double p_ = 0.0;
  bool active_ = false;
  std::vector<T> mask_;
};

// ---------------------------------------------------------------------------
// Nearest-neighbour 2x upsampling for the detector decoder.
template <typename T>
class Upsample2x {
 public:
  Tensor<T> forward(const Tensor<T>& x, const Ctx& ctx) {
    const int n = x.dim(0), c = x.dim(1), d = x.dim(2), h = x.dim(3), w = x.dim(4);
    Tensor<T> y({n, c, 2 * d, 2 * h, 2 * w});
    for (int i = 0; i < n; ++i)
      for (int cc = 0; cc < c; ++cc)
        for (int zd = 0; zd < 2 * d; ++zd)
          for (int zh = 0; zh < 2 * h; ++zh)
            for (int zw = 0; zw < 2 * w; ++zw) {
              const std::int64_t src =
                  ((((static_cast<std::int64_t>(i) * c + cc) * d + zd / 2) * h + zh / 2) * w +
                   zw / 2);
              const std::int64_t dst =
                  ((((static_cast<std::int64_t>(i) * c + cc) * 2 * d + zd) * 2 * h + zh) * 2 * w +
                   zw);
              y[dst] = x[src];
            }
    if (ctx.train) x_shape_ = x.shape();
    return y;
  }
  Tensor<T> backward(const Tensor<T>& dy) {
    Tensor<T> dx(x_shape_);
    const int n = dx.dim(0), c = dx.dim(1), d = dx.dim(2), h = dx.dim(3), w = dx.dim(4);
    for (int i = 0; i < n; ++i)
      for (int cc = 0; cc < c; ++cc)
        for (int zd = 0; zd < 2 * d; ++zd)
          for (int zh = 0; zh < 2 * h; ++zh)
            for (int zw = 0; zw < 2 * w; ++zw) {
              const std::int64_t src =
                  ((((static_cast<std::int64_t>(i) * c + cc) * d + zd / 2) * h + zh / 2) * w +
                   zw / 2);
              const std::int64_t dst =
                  ((((static_cast<std::int64_t>(i) * c + cc) * 2 * d + zd) * 2 * h + zh) * 2 * w +
                   zw);
              dx[src] += dy[dst];
            }
    return dx;
  }

 private:
  std::vector<int> x_shape_;
};

// Concatenate two (N, C, D, H, W) tensors along channels.
template <typename T>
Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b) {
  const int n = a.dim(0), ca = a.dim(1), cb = b.dim(1);
  const std::int64_t spatial = a.numel() / (static_cast<std::int64_t>(n) * ca);
  Tensor<T> y({n, ca + cb, a.dim(2), a.dim(3), a.dim(4)});
  for (int i = 0; i < n; ++i) {
    std::copy(a.data() + static_cast<std::int64_t>(i) * ca * spatial,
              a.data() + static_cast<std::int64_t>(i + 1) * ca * spatial,
              y.data() + static_cast<std::int64_t>(i) * (ca + cb) * spatial);
    std::copy(b.data() + static_cast<std::int64_t>(i) * cb * spatial,
              b.data() + static_cast<std::int64_t>(i + 1) * cb * spatial,
              y.data() + (static_cast<std::int64_t>(i) * (ca + cb) + ca) * spatial);
  }
  return y;
}

template <typename T>
void split_channels(const Tensor<T>& dy, int ca, Tensor<T>& da, Tensor<T>& db) {
  const int n = dy.dim(0), c = dy.dim(1);
  const int cb = c - ca;
  const std::int64_t spatial = dy.numel() / (static_cast<std::int64_t>(n) * c);
  da = Tensor<T>({n, ca, dy.dim(2), dy.dim(3), dy.dim(4)});
  db = Tensor<T>({n, cb, dy.dim(2), dy.dim(3), dy.dim(4)});
  for (int i = 0; i < n; ++i) {
    std::copy(dy.data() + static_cast<std::int64_t>(i) * c * spatial,
              dy.data() + (static_cast<std::int64_t>(i) * c + ca) * spatial,
              da.data() + static_cast<std::int64_t>(i) * ca * spatial);
    std::copy(dy.data() + (static_cast<std::int64_t>(i) * c + ca) * spatial,
              dy.data() + static_cast<std::int64_t>(i + 1) * c * spatial,
              db.data() + static_cast<std::int64_t>(i) * cb * spatial);
  }
}

template <typename T>
T sigmoid(T z) {
  if (z >= T(0)) return T(1) / (T(1) + std::exp(-z));
  const T e = std::exp(z);
  return e / (T(1) + e);
}

}  // namespace noduleid::nn
