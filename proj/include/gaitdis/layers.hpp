#pragma once

// Differentiable building blocks. Each layer's forward() is const and
// reentrant; backward() takes the saved forward input and accumulates
// parameter gradients into the layer's Param::grad.

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include "gaitdis/core/linalg.hpp"
#include "gaitdis/core/tensor.hpp"

namespace gaitdis {

inline constexpr double kLeakySlope = 0.2;
inline constexpr double kBatchNormEps = 1e-5;
inline constexpr double kBatchNormMomentum = 0.1;

namespace detail {

/// Largest number of im2col entries materialized at once.
inline constexpr std::size_t kColsBudget = std::size_t{1} << 22;

inline int conv_out(int in, int k, int stride, int pad) { return (in + 2 * pad - k) / stride + 1; }

/// cols[(c*k + ki)*k + kj][col0 + oy*Wo + ox] = img[c][oy*s - p + ki][ox*s - p + kj]
template <typename T>
void im2col(const T* img, int C, int H, int W, int k, int s, int p, int Ho, int Wo, T* cols, std::size_t ld,
            std::size_t col0) {
  for (int c = 0; c < C; ++c)
    for (int ki = 0; ki < k; ++ki)
      for (int kj = 0; kj < k; ++kj) {
        T* row = cols + static_cast<std::size_t>((c * k + ki) * k + kj) * ld + col0;
        for (int oy = 0; oy < Ho; ++oy) {
          const int y = oy * s - p + ki;
          T* dst = row + static_cast<std::size_t>(oy) * Wo;
          if (y < 0 || y >= H) {
            std::fill(dst, dst + Wo, T(0));
            continue;
          }
          const T* src = img + (static_cast<std::size_t>(c) * H + y) * W;
          for (int ox = 0; ox < Wo; ++ox) {
            const int x = ox * s - p + kj;
            dst[ox] = (x >= 0 && x < W) ? src[x] : T(0);
          }
        }
      }
}

/// Adjoint of im2col: scatters-and-adds columns back into the image.
template <typename T>
void col2im(const T* cols, int C, int H, int W, int k, int s, int p, int Ho, int Wo, T* img, std::size_t ld,
            std::size_t col0) {
  for (int c = 0; c < C; ++c)
    for (int ki = 0; ki < k; ++ki)
      for (int kj = 0; kj < k; ++kj) {
        const T* row = cols + static_cast<std::size_t>((c * k + ki) * k + kj) * ld + col0;
        for (int oy = 0; oy < Ho; ++oy) {
          const int y = oy * s - p + ki;
          if (y < 0 || y >= H) continue;
          T* dst = img + (static_cast<std::size_t>(c) * H + y) * W;
          const T* src = row + static_cast<std::size_t>(oy) * Wo;
          for (int ox = 0; ox < Wo; ++ox) {
            const int x = ox * s - p + kj;
            if (x >= 0 && x < W) dst[x] += src[ox];
          }
        }
      }
}

inline int chunk_items(std::size_t per_item_cols, int n) {
  return static_cast<int>(std::clamp<std::size_t>(kColsBudget / std::max<std::size_t>(per_item_cols, 1), 1, n));
}

}  // namespace detail

/// 2-D convolution, square kernel, zero padding, NCHW.
template <typename T>
struct Conv2d {
  int in_ch = 0, out_ch = 0, k = 3, stride = 1, pad = 1;
  bool has_bias = false;
  Param<T> weight;  // out_ch x in_ch x k x k
  Param<T> bias;

  Conv2d() = default;
  Conv2d(std::string name, int in, int out, int stride_, bool bias_ = false, int k_ = 3, int pad_ = 1)
      : in_ch(in), out_ch(out), k(k_), stride(stride_), pad(pad_), has_bias(bias_),
        weight(name + ".weight", {out, in, k_, k_}), bias(bias_ ? Param<T>(name + ".bias", {out}) : Param<T>()) {}

  int out_h(int h) const { return detail::conv_out(h, k, stride, pad); }
  int out_w(int w) const { return detail::conv_out(w, k, stride, pad); }

  Tensor<T> forward(const Tensor<T>& x) const {
    const int N = x.n(), H = x.h(), W = x.w(), Ho = out_h(H), Wo = out_w(W);
    const int ckk = in_ch * k * k;
    const std::size_t hw = static_cast<std::size_t>(Ho) * Wo;
    Tensor<T> y(N, out_ch, Ho, Wo);
    const int chunk = detail::chunk_items(ckk * hw, N);
    AlignedVector<T> cols, prod;
    const auto wm = weight.mat(out_ch, ckk);
    for (int b0 = 0; b0 < N; b0 += chunk) {
      const int nb = std::min(chunk, N - b0);
      const std::size_t ld = nb * hw;
      cols.resize(ckk * ld);
      for (int b = 0; b < nb; ++b)
        detail::im2col(x.item(b0 + b), in_ch, H, W, k, stride, pad, Ho, Wo, cols.data(), ld, b * hw);
      prod.resize(out_ch * ld);
      MatMap<T>(prod.data(), out_ch, ld).noalias() = wm * ConstMatMap<T>(cols.data(), ckk, ld);
      for (int b = 0; b < nb; ++b)
        for (int co = 0; co < out_ch; ++co) {
          const T* src = prod.data() + co * ld + b * hw;
          T* dst = y.item(b0 + b) + co * hw;
          const T bv = has_bias ? bias.value[co] : T(0);
          for (std::size_t i = 0; i < hw; ++i) dst[i] = src[i] + bv;
        }
    }
    return y;
  }

  Tensor<T> backward(const Tensor<T>& x, const Tensor<T>& dy) {
    const int N = x.n(), H = x.h(), W = x.w(), Ho = dy.h(), Wo = dy.w();
    const int ckk = in_ch * k * k;
    const std::size_t hw = static_cast<std::size_t>(Ho) * Wo;
    Tensor<T> dx(N, in_ch, H, W);
    const int chunk = detail::chunk_items(ckk * hw, N);
    AlignedVector<T> cols, dprod, dcols;
    const auto wm = weight.mat(out_ch, ckk);
    auto gw = weight.gmat(out_ch, ckk);
    for (int b0 = 0; b0 < N; b0 += chunk) {
      const int nb = std::min(chunk, N - b0);
      const std::size_t ld = nb * hw;
      cols.resize(ckk * ld);
      for (int b = 0; b < nb; ++b)
        detail::im2col(x.item(b0 + b), in_ch, H, W, k, stride, pad, Ho, Wo, cols.data(), ld, b * hw);
      dprod.resize(out_ch * ld);
      for (int b = 0; b < nb; ++b)
        for (int co = 0; co < out_ch; ++co) {
          const T* src = dy.item(b0 + b) + co * hw;
          std::copy(src, src + hw, dprod.data() + co * ld + b * hw);
        }
      const ConstMatMap<T> dP(dprod.data(), out_ch, ld);
      gw.noalias() += dP * ConstMatMap<T>(cols.data(), ckk, ld).transpose();
      if (has_bias)
        for (int co = 0; co < out_ch; ++co) bias.grad[co] += dP.row(co).sum();
      dcols.resize(ckk * ld);
      MatMap<T>(dcols.data(), ckk, ld).noalias() = wm.transpose() * dP;
      for (int b = 0; b < nb; ++b)
        detail::col2im(dcols.data(), in_ch, H, W, k, stride, pad, Ho, Wo, dx.item(b0 + b), ld, b * hw);
    }
    return dx;
  }
};

/// Transposed 2-D convolution, 3x3, stride 2, padding 1, output padding 1:
/// exactly doubles the spatial size.
template <typename T>
struct ConvTranspose2d {
  int in_ch = 0, out_ch = 0, k = 3, stride = 2, pad = 1;
  bool has_bias = false;
  Param<T> weight;  // in_ch x out_ch x k x k
  Param<T> bias;

  ConvTranspose2d() = default;
  ConvTranspose2d(std::string name, int in, int out, bool bias_ = false)
      : in_ch(in), out_ch(out), has_bias(bias_), weight(name + ".weight", {in, out, 3, 3}),
        bias(bias_ ? Param<T>(name + ".bias", {out}) : Param<T>()) {}

  int out_h(int h) const { return h * stride; }
  int out_w(int w) const { return w * stride; }

  Tensor<T> forward(const Tensor<T>& x) const {
    const int N = x.n(), H = x.h(), W = x.w(), Ho = out_h(H), Wo = out_w(W);
    const int okk = out_ch * k * k;
    const std::size_t hw = static_cast<std::size_t>(H) * W;
    Tensor<T> y(N, out_ch, Ho, Wo);
    const int chunk = detail::chunk_items(okk * hw, N);
    AlignedVector<T> xin, cols;
    const auto wm = weight.mat(in_ch, okk);
    for (int b0 = 0; b0 < N; b0 += chunk) {
      const int nb = std::min(chunk, N - b0);
      const std::size_t ld = nb * hw;
      xin.resize(in_ch * ld);
      for (int b = 0; b < nb; ++b)
        for (int ci = 0; ci < in_ch; ++ci) {
          const T* src = x.item(b0 + b) + ci * hw;
          std::copy(src, src + hw, xin.data() + ci * ld + b * hw);
        }
      cols.resize(okk * ld);
      MatMap<T>(cols.data(), okk, ld).noalias() = wm.transpose() * ConstMatMap<T>(xin.data(), in_ch, ld);
      for (int b = 0; b < nb; ++b)
        detail::col2im(cols.data(), out_ch, Ho, Wo, k, stride, pad, H, W, y.item(b0 + b), ld, b * hw);
    }
    if (has_bias) {
      const std::size_t plane = static_cast<std::size_t>(Ho) * Wo;
      for (int b = 0; b < N; ++b)
        for (int co = 0; co < out_ch; ++co) {
          T* dst = y.item(b) + co * plane;
          for (std::size_t i = 0; i < plane; ++i) dst[i] += bias.value[co];
        }
    }
    return y;
  }

  Tensor<T> backward(const Tensor<T>& x, const Tensor<T>& dy) {
    const int N = x.n(), H = x.h(), W = x.w(), Ho = dy.h(), Wo = dy.w();
    const int okk = out_ch * k * k;
    const std::size_t hw = static_cast<std::size_t>(H) * W;
    Tensor<T> dx(N, in_ch, H, W);
    const int chunk = detail::chunk_items(okk * hw, N);
    AlignedVector<T> xin, dcols, dxin;
    const auto wm = weight.mat(in_ch, okk);
    auto gw = weight.gmat(in_ch, okk);
    for (int b0 = 0; b0 < N; b0 += chunk) {
      const int nb = std::min(chunk, N - b0);
      const std::size_t ld = nb * hw;
      xin.resize(in_ch * ld);
      for (int b = 0; b < nb; ++b)
        for (int ci = 0; ci < in_ch; ++ci) {
          const T* src = x.item(b0 + b) + ci * hw;
          std::copy(src, src + hw, xin.data() + ci * ld + b * hw);
        }
      dcols.resize(okk * ld);
      for (int b = 0; b < nb; ++b)
        detail::im2col(dy.item(b0 + b), out_ch, Ho, Wo, k, stride, pad, H, W, dcols.data(), ld, b * hw);
      const ConstMatMap<T> dC(dcols.data(), okk, ld);
      gw.noalias() += ConstMatMap<T>(xin.data(), in_ch, ld) * dC.transpose();
      dxin.resize(in_ch * ld);
      MatMap<T>(dxin.data(), in_ch, ld).noalias() = wm * dC;
      for (int b = 0; b < nb; ++b)
        for (int ci = 0; ci < in_ch; ++ci) {
          const T* src = dxin.data() + ci * ld + b * hw;
          std::copy(src, src + hw, dx.item(b0 + b) + ci * hw);
        }
    }
    if (has_bias) {
      const std::size_t plane = static_cast<std::size_t>(Ho) * Wo;
      for (int b = 0; b < N; ++b)
        for (int co = 0; co < out_ch; ++co) {
          const T* src = dy.item(b) + co * plane;
          T acc = 0;
          for (std::size_t i = 0; i < plane; ++i) acc += src[i];
          bias.grad[co] += acc;
        }
    }
    return dx;
  }
};

/// 3x3 / stride 2 / padding 1 max pooling (padding never wins).
template <typename T>
struct MaxPool2d {
  int k = 3, stride = 2, pad = 1;

  int out_h(int h) const { return detail::conv_out(h, k, stride, pad); }
  int out_w(int w) const { return detail::conv_out(w, k, stride, pad); }

  /// `argmax` (optional) receives the flat input index of each output.
  Tensor<T> forward(const Tensor<T>& x, std::vector<int>* argmax = nullptr) const {
    const int N = x.n(), C = x.c(), H = x.h(), W = x.w(), Ho = out_h(H), Wo = out_w(W);
    Tensor<T> y(N, C, Ho, Wo);
    if (argmax) argmax->assign(y.size(), 0);
    std::size_t o = 0;
    for (int b = 0; b < N; ++b)
      for (int c = 0; c < C; ++c) {
        const std::size_t base = (static_cast<std::size_t>(b) * C + c) * H * W;
        for (int oy = 0; oy < Ho; ++oy)
          for (int ox = 0; ox < Wo; ++ox, ++o) {
            T best = -std::numeric_limits<T>::infinity();
            int best_i = -1;
            for (int ki = 0; ki < k; ++ki) {
              const int y_ = oy * stride - pad + ki;
              if (y_ < 0 || y_ >= H) continue;
              for (int kj = 0; kj < k; ++kj) {
                const int x_ = ox * stride - pad + kj;
                if (x_ < 0 || x_ >= W) continue;
                const T v = x.data()[base + y_ * W + x_];
                if (v > best || best_i < 0) {
                  best = v;
                  best_i = static_cast<int>(base + y_ * W + x_);
                }
              }
            }
            y.data()[o] = best;
            if (argmax) (*argmax)[o] = best_i;
          }
      }
    return y;
  }

  Tensor<T> backward(const Tensor<T>& x, const std::vector<int>& argmax, const Tensor<T>& dy) const {
    Tensor<T> dx(x.n(), x.c(), x.h(), x.w());
    for (std::size_t o = 0; o < dy.size(); ++o) dx.data()[argmax[o]] += dy.data()[o];
    return dx;
  }
};

/// Per-channel batch normalization over (N, H, W).
template <typename T>
struct BatchNorm2d {
  int channels = 0;
  Param<T> gamma, beta;
  Buffer<T> running_mean, running_var;

  struct Cache {
    AlignedVector<T> mean, inv_std;
    std::vector<double> var;
    bool training = false;
  };

  BatchNorm2d() = default;
  BatchNorm2d(std::string name, int c)
      : channels(c), gamma(name + ".gamma", {c}), beta(name + ".beta", {c}),
        running_mean{name + ".running_mean", AlignedVector<T>(c, T(0))},
        running_var{name + ".running_var", AlignedVector<T>(c, T(1))} {
    std::fill(gamma.value.begin(), gamma.value.end(), T(1));
  }

  /// Training mode normalizes with batch statistics and returns them in
  /// `cache`; call update_running() to fold them into the running stats.
  Tensor<T> forward(const Tensor<T>& x, bool training, Cache* cache = nullptr) const {
    const int N = x.n(), C = x.c();
    const std::size_t plane = x.plane();
    AlignedVector<T> mean(C), inv_std(C);
    std::vector<double> var(training ? C : 0);
    if (training) {
      const double count = static_cast<double>(N) * plane;
      for (int c = 0; c < C; ++c) {
        double s = 0, s2 = 0;
        for (int b = 0; b < N; ++b) {
          const T* p = x.item(b) + c * plane;
          for (std::size_t i = 0; i < plane; ++i) s += p[i];
        }
        const double m = s / count;
        for (int b = 0; b < N; ++b) {
          const T* p = x.item(b) + c * plane;
          for (std::size_t i = 0; i < plane; ++i) s2 += (p[i] - m) * (p[i] - m);
        }
        mean[c] = static_cast<T>(m);
        var[c] = s2 / count;
        inv_std[c] = static_cast<T>(1.0 / std::sqrt(var[c] + kBatchNormEps));
      }
    } else {
      for (int c = 0; c < C; ++c) {
        mean[c] = running_mean.value[c];
        inv_std[c] = static_cast<T>(1.0 / std::sqrt(static_cast<double>(running_var.value[c]) + kBatchNormEps));
      }
    }
    Tensor<T> y(N, C, x.h(), x.w());
    for (int b = 0; b < N; ++b)
      for (int c = 0; c < C; ++c) {
        const T* p = x.item(b) + c * plane;
        T* q = y.item(b) + c * plane;
        const T g = gamma.value[c] * inv_std[c], m = mean[c], bt = beta.value[c];
        for (std::size_t i = 0; i < plane; ++i) q[i] = (p[i] - m) * g + bt;
      }
    if (cache) *cache = Cache{std::move(mean), std::move(inv_std), std::move(var), training};
    return y;
  }

  void update_running(const Tensor<T>& x, const Cache& cache) {
    const double count = static_cast<double>(x.n()) * x.plane();
    for (int c = 0; c < channels; ++c) {
      const double var = cache.var[c];
      const double unbiased = count > 1 ? var * count / (count - 1) : var;
      running_mean.value[c] = static_cast<T>((1 - kBatchNormMomentum) * running_mean.value[c] +
                                             kBatchNormMomentum * cache.mean[c]);
      running_var.value[c] =
          static_cast<T>((1 - kBatchNormMomentum) * running_var.value[c] + kBatchNormMomentum * unbiased);
    }
  }

  Tensor<T> backward(const Tensor<T>& x, const Cache& cache, const Tensor<T>& dy) {
    const int N = x.n(), C = x.c();
    const std::size_t plane = x.plane();
    const double count = static_cast<double>(N) * plane;
    Tensor<T> dx(N, C, x.h(), x.w());
    for (int c = 0; c < C; ++c) {
      const double m = cache.mean[c], is = cache.inv_std[c];
      double sum_dy = 0, sum_dy_xhat = 0;
      for (int b = 0; b < N; ++b) {
        const T* p = x.item(b) + c * plane;
        const T* d = dy.item(b) + c * plane;
        for (std::size_t i = 0; i < plane; ++i) {
          sum_dy += d[i];
          sum_dy_xhat += d[i] * (p[i] - m) * is;
        }
      }
      gamma.grad[c] += static_cast<T>(sum_dy_xhat);
      beta.grad[c] += static_cast<T>(sum_dy);
      const double g = gamma.value[c];
      for (int b = 0; b < N; ++b) {
        const T* p = x.item(b) + c * plane;
        const T* d = dy.item(b) + c * plane;
        T* q = dx.item(b) + c * plane;
        for (std::size_t i = 0; i < plane; ++i) {
          if (cache.training) {
            const double xhat = (p[i] - m) * is;
            q[i] = static_cast<T>(g * is * (d[i] - sum_dy / count - xhat * sum_dy_xhat / count));
          } else {
            q[i] = static_cast<T>(g * is * d[i]);
          }
        }
      }
    }
    return dx;
  }
};

/// Fully connected layer on row-major batches: y = x W^T + b.
template <typename T>
struct Linear {
  int in = 0, out = 0;
  Param<T> weight;  // out x in
  Param<T> bias;    // out

  Linear() = default;
  Linear(std::string name, int in_, int out_)
      : in(in_), out(out_), weight(name + ".weight", {out_, in_}), bias(name + ".bias", {out_}) {}

  template <typename F>
  void visit_params(F&& f) {
    f(weight);
    f(bias);
  }

  MatX<T> forward(const MatX<T>& x) const {
    if (x.cols() != in)
      throw ShapeError(weight.name + ": input width " + std::to_string(x.cols()) + ", expected " + std::to_string(in));
    MatX<T> y = x * weight.mat(out, in).transpose();
    y.rowwise() += Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>>(bias.value.data(), out);
    return y;
  }

  /// Accumulates dW, db; returns dx.
  MatX<T> backward(const MatX<T>& x, const MatX<T>& dy) {
    weight.gmat(out, in).noalias() += dy.transpose() * x;
    MatMap<T>(bias.grad.data(), 1, out) += dy.colwise().sum();
    return dy * weight.mat(out, in);
  }
};

template <typename T>
void leaky_relu_inplace(Tensor<T>& t) {
  for (auto& v : t.vec()) v = v > 0 ? v : static_cast<T>(kLeakySlope) * v;
}

/// dy *= f'(pre) for the leaky ReLU, given the pre-activation.
template <typename T>
void leaky_relu_backward_inplace(const Tensor<T>& pre, Tensor<T>& dy) {
  for (std::size_t i = 0; i < dy.size(); ++i)
    if (!(pre.data()[i] > 0)) dy.data()[i] *= static_cast<T>(kLeakySlope);
}

template <typename T>
T sigmoid(T v) {
  return v >= 0 ? T(1) / (T(1) + std::exp(-v)) : std::exp(v) / (T(1) + std::exp(v));
}

}  // namespace gaitdis
