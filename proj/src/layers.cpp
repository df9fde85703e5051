// Copyright 2026 the cmkd authors
//
// Licensed under the Apache License, Version 2.0

#include "cmkd/layers.hpp"

#include <Eigen/Dense>
#include <cmath>
#include <limits>
#include <stdexcept>

namespace cmkd::nn {
namespace {

using RowMat = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using CMapMat = Eigen::Map<const RowMat>;

inline float sigmoidf(float x) { return 1.0f / (1.0f + std::exp(-x)); }

std::int64_t rows_of(const Tensor& x) {
  // Collapse all but the last dimension.
  std::int64_t r = 1;
  for (std::size_t i = 0; i + 1 < x.ndim(); ++i) r *= x.shape()[i];
  return r;
}

}  // namespace

void init_he_normal(Tensor& t, std::int64_t fan_in, Rng& rng) {
  const double stddev = std::sqrt(2.0 / static_cast<double>(fan_in));
  for (std::int64_t i = 0; i < t.numel(); ++i)
    t[i] = static_cast<float>(rng.gaussian(0.0, stddev));
}

void init_trunc_normal(Tensor& t, double stddev, Rng& rng) {
  for (std::int64_t i = 0; i < t.numel(); ++i) {
    double z;
    do {
      z = rng.gaussian();
    } while (std::abs(z) > 2.0);
    t[i] = static_cast<float>(z * stddev);
  }
}

// ---------------------------------------------------------------------------
// Linear

Linear::Linear(std::int64_t in, std::int64_t out, Rng& rng, bool bias)
    : weight({out, in}),
      bias(bias ? Tensor({out}) : Tensor()),
      d_weight({out, in}),
      d_bias(bias ? Tensor({out}) : Tensor()),
      has_bias_(bias) {
  init_trunc_normal(weight, 0.02, rng);
}

Tensor Linear::forward(const Tensor& x, Mode mode) {
  const std::int64_t in = weight.dim(1), out = weight.dim(0);
  if (x.shape().back() != in)
    throw std::invalid_argument("linear input dim mismatch: got " + x.shape_str());
  x_ = x;
  const std::int64_t r = rows_of(x);
  auto out_shape = x.shape();
  out_shape.back() = out;
  Tensor y(out_shape);
  CMapMat xm(x.data(), r, in);
  CMapMat wm(weight.data(), out, in);
  MapMat ym(y.data(), r, out);
  ym.noalias() = xm * wm.transpose();
  if (has_bias_) {
    for (std::int64_t i = 0; i < r; ++i)
      for (std::int64_t j = 0; j < out; ++j) y[i * out + j] += bias[j];
  }
  return y;
}

Tensor Linear::backward(const Tensor& dy) {
  const std::int64_t in = weight.dim(1), out = weight.dim(0);
  const std::int64_t r = rows_of(dy);
  CMapMat dym(dy.data(), r, out);
  CMapMat xm(x_.data(), r, in);
  CMapMat wm(weight.data(), out, in);
  MapMat dwm(d_weight.data(), out, in);
  dwm.noalias() += dym.transpose() * xm;
  if (has_bias_)
    for (std::int64_t i = 0; i < r; ++i)
      for (std::int64_t j = 0; j < out; ++j) d_bias[j] += dy[i * out + j];
  Tensor dx(x_.shape());
  MapMat dxm(dx.data(), r, in);
  dxm.noalias() = dym * wm;
  return dx;
}

void Linear::collect(const std::string& prefix, std::vector<ParamRef>& out) {
  out.push_back({prefix + ".weight", &weight, &d_weight, true});
  if (has_bias_) out.push_back({prefix + ".bias", &bias, &d_bias, true});
}

// ---------------------------------------------------------------------------
// Conv2d

Conv2d::Conv2d(std::int64_t cin_, std::int64_t cout_, int kernel_, int stride_,
               int padding_, std::int64_t groups_, Rng& rng, bool bias_flag)
    : weight({cout_, cin_ / groups_, kernel_, kernel_}),
      bias(bias_flag ? Tensor({cout_}) : Tensor()),
      d_weight({cout_, cin_ / groups_, kernel_, kernel_}),
      d_bias(bias_flag ? Tensor({cout_}) : Tensor()),
      cin(cin_),
      cout(cout_),
      groups(groups_),
      kernel(kernel_),
      stride(stride_),
      padding(padding_),
      has_bias_(bias_flag) {
  if (cin_ % groups_ != 0 || cout_ % groups_ != 0)
    throw std::invalid_argument("conv channels not divisible by groups");
  init_he_normal(weight, (cin_ / groups_) * kernel_ * kernel_, rng);
}

Tensor Conv2d::forward(const Tensor& x, Mode mode) {
  if (x.ndim() != 4 || x.dim(1) != cin)
    throw std::invalid_argument("conv input shape mismatch: got " + x.shape_str());
  x_ = x;
  const std::int64_t b = x.dim(0), h = x.dim(2), w = x.dim(3);
  const std::int64_t ho = (h + 2 * padding - kernel) / stride + 1;
  const std::int64_t wo = (w + 2 * padding - kernel) / stride + 1;
  Tensor y({b, cout, ho, wo});

  if (kernel == 1 && stride == 1 && padding == 0 && groups == 1) {
    // Pointwise: a plain GEMM per sample.
    const std::int64_t hw = h * w;
    CMapMat wm(weight.data(), cout, cin);
    for (std::int64_t bi = 0; bi < b; ++bi) {
      CMapMat xm(x.data() + bi * cin * hw, cin, hw);
      MapMat ym(y.data() + bi * cout * hw, cout, hw);
      ym.noalias() = wm * xm;
    }
  } else {
    const std::int64_t cig = cin / groups, cog = cout / groups;
    for (std::int64_t bi = 0; bi < b; ++bi) {
      for (std::int64_t co = 0; co < cout; ++co) {
        const std::int64_t g = co / cog;
        const float* wbase = weight.data() + co * cig * kernel * kernel;
        for (std::int64_t oh = 0; oh < ho; ++oh) {
          for (std::int64_t ow = 0; ow < wo; ++ow) {
            float acc = 0.0f;
            for (std::int64_t ci = 0; ci < cig; ++ci) {
              const float* xbase = x.data() + ((bi * cin + g * cig + ci) * h) * w;
              const float* wrow = wbase + ci * kernel * kernel;
              for (int kh = 0; kh < kernel; ++kh) {
                const std::int64_t ih = oh * stride - padding + kh;
                if (ih < 0 || ih >= h) continue;
                for (int kw = 0; kw < kernel; ++kw) {
                  const std::int64_t iw = ow * stride - padding + kw;
                  if (iw < 0 || iw >= w) continue;
                  acc += wrow[kh * kernel + kw] * xbase[ih * w + iw];
                }
              }
            }
            y.at(bi, co, oh, ow) = acc;
          }
        }
      }
    }
  }
  if (has_bias_) {
    const std::int64_t hw = ho * wo;
    for (std::int64_t bi = 0; bi < b; ++bi)
      for (std::int64_t co = 0; co < cout; ++co) {
        float* p = y.data() + (bi * cout + co) * hw;
        for (std::int64_t i = 0; i < hw; ++i) p[i] += bias[co];
      }
  }
  return y;
}

Tensor Conv2d::backward(const Tensor& dy) {
  const std::int64_t b = x_.dim(0), h = x_.dim(2), w = x_.dim(3);
  const std::int64_t ho = dy.dim(2), wo = dy.dim(3);
  Tensor dx = needs_input_grad_ ? Tensor(x_.shape()) : Tensor();

  if (has_bias_) {
    const std::int64_t hw = ho * wo;
    for (std::int64_t bi = 0; bi < b; ++bi)
      for (std::int64_t co = 0; co < cout; ++co) {
        const float* p = dy.data() + (bi * cout + co) * hw;
        float acc = 0.0f;
        for (std::int64_t i = 0; i < hw; ++i) acc += p[i];
        d_bias[co] += acc;
      }
  }

  if (kernel == 1 && stride == 1 && padding == 0 && groups == 1) {
    const std::int64_t hw = h * w;
    CMapMat wm(weight.data(), cout, cin);
    MapMat dwm(d_weight.data(), cout, cin);
    for (std::int64_t bi = 0; bi < b; ++bi) {
      CMapMat dym(dy.data() + bi * cout * hw, cout, hw);
      CMapMat xm(x_.data() + bi * cin * hw, cin, hw);
      dwm.noalias() += dym * xm.transpose();
      if (needs_input_grad_) {
        MapMat dxm(dx.data() + bi * cin * hw, cin, hw);
        dxm.noalias() = wm.transpose() * dym;
      }
    }
    return dx;
  }

  const std::int64_t cig = cin / groups, cog = cout / groups;
  for (std::int64_t bi = 0; bi < b; ++bi) {
    for (std::int64_t co = 0; co < cout; ++co) {
      const std::int64_t g = co / cog;
      float* dwbase = d_weight.data() + co * cig * kernel * kernel;
      for (std::int64_t oh = 0; oh < ho; ++oh) {
        for (std::int64_t ow = 0; ow < wo; ++ow) {
          const float go = dy.at(bi, co, oh, ow);
          if (go == 0.0f) continue;
          for (std::int64_t ci = 0; ci < cig; ++ci) {
            const float* xbase = x_.data() + ((bi * cin + g * cig + ci) * h) * w;
            float* dxbase =
                needs_input_grad_ ? dx.data() + ((bi * cin + g * cig + ci) * h) * w : nullptr;
            const float* wrow = weight.data() + (co * cig + ci) * kernel * kernel;
            float* dwrow = dwbase + ci * kernel * kernel;
            for (int kh = 0; kh < kernel; ++kh) {
              const std::int64_t ih = oh * stride - padding + kh;
              if (ih < 0 || ih >= h) continue;
              for (int kw = 0; kw < kernel; ++kw) {
                const std::int64_t iw = ow * stride - padding + kw;
                if (iw < 0 || iw >= w) continue;
                dwrow[kh * kernel + kw] += go * xbase[ih * w + iw];
                if (dxbase) dxbase[ih * w + iw] += go * wrow[kh * kernel + kw];
              }
            }
          }
        }
      }
    }
  }
  return dx;
}

void Conv2d::collect(const std::string& prefix, std::vector<ParamRef>& out) {
  out.push_back({prefix + ".weight", &weight, &d_weight, true});
  if (has_bias_) out.push_back({prefix + ".bias", &bias, &d_bias, true});
}

// ---------------------------------------------------------------------------
// BatchNorm2d

BatchNorm2d::BatchNorm2d(std::int64_t channels, double momentum, double eps)
    : gamma({channels}, 1.0f),
      beta({channels}),
      d_gamma({channels}),
      d_beta({channels}),
      running_mean({channels}),
      running_var({channels}, 1.0f),
      c_(channels),
      momentum_(momentum),
      eps_(eps) {}

Tensor BatchNorm2d::forward(const Tensor& x, Mode mode) {
  if (x.ndim() != 4 || x.dim(1) != c_)
    throw std::invalid_argument("batchnorm input shape mismatch");
  mode_ = mode;
  const std::int64_t b = x.dim(0), h = x.dim(2), w = x.dim(3);
  const std::int64_t n = b * h * w;
  const std::int64_t hw = h * w;
  Tensor y(x.shape());
  mean_.assign(static_cast<std::size_t>(c_), 0.0);
  inv_std_.assign(static_cast<std::size_t>(c_), 0.0);

  if (mode == Mode::kTrain) {
    x_ = x;
    xhat_ = Tensor(x.shape());
    for (std::int64_t c = 0; c < c_; ++c) {
      double sum = 0.0, sq = 0.0;
      for (std::int64_t bi = 0; bi < b; ++bi) {
        const float* p = x.data() + (bi * c_ + c) * hw;
        for (std::int64_t i = 0; i < hw; ++i) {
          sum += p[i];
          sq += static_cast<double>(p[i]) * p[i];
        }
      }
      const double mean = sum / static_cast<double>(n);
      const double var = std::max(0.0, sq / static_cast<double>(n) - mean * mean);
      mean_[static_cast<std::size_t>(c)] = mean;
      inv_std_[static_cast<std::size_t>(c)] = 1.0 / std::sqrt(var + eps_);
      const double unbiased = n > 1 ? var * n / static_cast<double>(n - 1) : var;
      running_mean[c] = static_cast<float>((1.0 - momentum_) * running_mean[c] + momentum_ * mean);
      running_var[c] = static_cast<float>((1.0 - momentum_) * running_var[c] + momentum_ * unbiased);
      const float g = gamma[c], bt = beta[c];
      const float m = static_cast<float>(mean), is = static_cast<float>(inv_std_[static_cast<std::size_t>(c)]);
      for (std::int64_t bi = 0; bi < b; ++bi) {
        const float* p = x.data() + (bi * c_ + c) * hw;
        float* ph = xhat_.data() + (bi * c_ + c) * hw;
        float* py = y.data() + (bi * c_ + c) * hw;
        for (std::int64_t i = 0; i < hw; ++i) {
          ph[i] = (p[i] - m) * is;
          py[i] = g * ph[i] + bt;
        }
      }
    }
  } else {
    for (std::int64_t c = 0; c < c_; ++c) {
      const float is = 1.0f / std::sqrt(running_var[c] + static_cast<float>(eps_));
      const float m = running_mean[c], g = gamma[c], bt = beta[c];
      inv_std_[static_cast<std::size_t>(c)] = is;
      for (std::int64_t bi = 0; bi < b; ++bi) {
        const float* p = x.data() + (bi * c_ + c) * hw;
        float* py = y.data() + (bi * c_ + c) * hw;
        for (std::int64_t i = 0; i < hw; ++i) py[i] = g * (p[i] - m) * is + bt;
      }
    }
  }
  return y;
}

Tensor BatchNorm2d::backward(const Tensor& dy) {
  const std::int64_t b = dy.dim(0), h = dy.dim(2), w = dy.dim(3);
  const std::int64_t hw = h * w, n = b * hw;
  Tensor dx(dy.shape());

  if (mode_ == Mode::kEval) {
    for (std::int64_t c = 0; c < c_; ++c) {
      const float k = gamma[c] * static_cast<float>(inv_std_[static_cast<std::size_t>(c)]);
      for (std::int64_t bi = 0; bi < b; ++bi) {
        const float* pd = dy.data() + (bi * c_ + c) * hw;
        float* px = dx.data() + (bi * c_ + c) * hw;
        for (std::int64_t i = 0; i < hw; ++i) px[i] = pd[i] * k;
      }
    }
    return dx;
  }

  for (std::int64_t c = 0; c < c_; ++c) {
    double sum_dy = 0.0, sum_dy_xhat = 0.0;
    for (std::int64_t bi = 0; bi < b; ++bi) {
      const float* pd = dy.data() + (bi * c_ + c) * hw;
      const float* ph = xhat_.data() + (bi * c_ + c) * hw;
      for (std::int64_t i = 0; i < hw; ++i) {
        sum_dy += pd[i];
        sum_dy_xhat += static_cast<double>(pd[i]) * ph[i];
      }
    }
    d_gamma[c] += static_cast<float>(sum_dy_xhat);
    d_beta[c] += static_cast<float>(sum_dy);
    const double g = gamma[c];
    const double is = inv_std_[static_cast<std::size_t>(c)];
    const double inv_n = 1.0 / static_cast<double>(n);
    for (std::int64_t bi = 0; bi < b; ++bi) {
      const float* pd = dy.data() + (bi * c_ + c) * hw;
      const float* ph = xhat_.data() + (bi * c_ + c) * hw;
      float* px = dx.data() + (bi * c_ + c) * hw;
      for (std::int64_t i = 0; i < hw; ++i) {
        const double t = static_cast<double>(pd[i]) - inv_n * sum_dy -
                         static_cast<double>(ph[i]) * inv_n * sum_dy_xhat;
        px[i] = static_cast<float>(g * is * t);
      }
    }
  }
  return dx;
}

void BatchNorm2d::collect(const std::string& prefix, std::vector<ParamRef>& out) {
  out.push_back({prefix + ".gamma", &gamma, &d_gamma, true});
  out.push_back({prefix + ".beta", &beta, &d_beta, true});
  out.push_back({prefix + ".running_mean", &running_mean, nullptr, false});
  out.push_back({prefix + ".running_var", &running_var, nullptr, false});
}

// ---------------------------------------------------------------------------
// LayerNorm

LayerNorm::LayerNorm(std::int64_t dim, double eps)
    : gamma({dim}, 1.0f), beta({dim}), d_gamma({dim}), d_beta({dim}), d_(dim), eps_(eps) {}

Tensor LayerNorm::forward(const Tensor& x, Mode mode) {
  if (x.shape().back() != d_) throw std::invalid_argument("layernorm dim mismatch");
  const std::int64_t r = rows_of(x);
  Tensor y(x.shape());
  xhat_ = Tensor(x.shape());
  inv_std_.assign(static_cast<std::size_t>(r), 0.0f);
  for (std::int64_t i = 0; i < r; ++i) {
    const float* p = x.data() + i * d_;
    double sum = 0.0;
    for (std::int64_t j = 0; j < d_; ++j) sum += p[j];
    const double mean = sum / static_cast<double>(d_);
    double var = 0.0;
    for (std::int64_t j = 0; j < d_; ++j) {
      const double dv = p[j] - mean;
      var += dv * dv;
    }
    var /= static_cast<double>(d_);
    const float is = static_cast<float>(1.0 / std::sqrt(var + eps_));
    inv_std_[static_cast<std::size_t>(i)] = is;
    float* ph = xhat_.data() + i * d_;
    float* py = y.data() + i * d_;
    for (std::int64_t j = 0; j < d_; ++j) {
      ph[j] = (p[j] - static_cast<float>(mean)) * is;
      py[j] = gamma[j] * ph[j] + beta[j];
    }
  }
  return y;
}

Tensor LayerNorm::backward(const Tensor& dy) {
  const std::int64_t r = rows_of(dy);
  Tensor dx(dy.shape());
  for (std::int64_t i = 0; i < r; ++i) {
    const float* pd = dy.data() + i * d_;
    const float* ph = xhat_.data() + i * d_;
    float* px = dx.data() + i * d_;
    double sum_dxh = 0.0, sum_dxh_xh = 0.0;
    for (std::int64_t j = 0; j < d_; ++j) {
      const double dxh = static_cast<double>(pd[j]) * gamma[j];
      sum_dxh += dxh;
      sum_dxh_xh += dxh * ph[j];
      d_gamma[j] += pd[j] * ph[j];
      d_beta[j] += pd[j];
    }
    const double is = inv_std_[static_cast<std::size_t>(i)];
    const double inv_d = 1.0 / static_cast<double>(d_);
    for (std::int64_t j = 0; j < d_; ++j) {
      const double dxh = static_cast<double>(pd[j]) * gamma[j];
      px[j] = static_cast<float>(is * (dxh - inv_d * sum_dxh - ph[j] * inv_d * sum_dxh_xh));
    }
  }
  return dx;
}

void LayerNorm::collect(const std::string& prefix, std::vector<ParamRef>& out) {
  out.push_back({prefix + ".gamma", &gamma, &d_gamma, true});
  out.push_back({prefix + ".beta", &beta, &d_beta, true});
}

// ---------------------------------------------------------------------------
// Activations

Tensor ReLU::forward(const Tensor& x, Mode mode) {
  x_ = x;
  Tensor y(x.shape());
  for (std::int64_t i = 0; i < x.numel(); ++i) y[i] = x[i] > 0.0f ? x[i] : 0.0f;
  return y;
}

Tensor ReLU::backward(const Tensor& dy) {
  Tensor dx(dy.shape());
  for (std::int64_t i = 0; i < dy.numel(); ++i) dx[i] = x_[i] > 0.0f ? dy[i] : 0.0f;
  return dx;
}

Tensor SiLU::forward(const Tensor& x, Mode mode) {
  x_ = x;
  Tensor y(x.shape());
  for (std::int64_t i = 0; i < x.numel(); ++i) y[i] = x[i] * sigmoidf(x[i]);
  return y;
}

Tensor SiLU::backward(const Tensor& dy) {
  Tensor dx(dy.shape());
  for (std::int64_t i = 0; i < dy.numel(); ++i) {
    const float s = sigmoidf(x_[i]);
    dx[i] = dy[i] * s * (1.0f + x_[i] * (1.0f - s));
  }
  return dx;
}

Tensor GELU::forward(const Tensor& x, Mode mode) {
  x_ = x;
  Tensor y(x.shape());
  for (std::int64_t i = 0; i < x.numel(); ++i) {
    const float phi = 0.5f * (1.0f + std::erf(x[i] * static_cast<float>(M_SQRT1_2)));
    y[i] = x[i] * phi;
  }
  return y;
}

Tensor GELU::backward(const Tensor& dy) {
  Tensor dx(dy.shape());
  constexpr float kInvSqrt2Pi = 0.3989422804014327f;
  for (std::int64_t i = 0; i < dy.numel(); ++i) {
    const float x = x_[i];
    const float phi = 0.5f * (1.0f + std::erf(x * static_cast<float>(M_SQRT1_2)));
    const float pdf = kInvSqrt2Pi * std::exp(-0.5f * x * x);
    dx[i] = dy[i] * (phi + x * pdf);
  }
  return dx;
}

// ---------------------------------------------------------------------------
// Pooling

Tensor GlobalMeanPool2d::forward(const Tensor& x, Mode mode) {
  in_shape_ = x.shape();
  const std::int64_t b = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  Tensor y({b, c});
  for (std::int64_t bi = 0; bi < b; ++bi)
    for (std::int64_t ci = 0; ci < c; ++ci) {
      const float* p = x.data() + (bi * c + ci) * hw;
      double acc = 0.0;
      for (std::int64_t i = 0; i < hw; ++i) acc += p[i];
      y.at(bi, ci) = static_cast<float>(acc / static_cast<double>(hw));
    }
  return y;
}

Tensor GlobalMeanPool2d::backward(const Tensor& dy) {
  Tensor dx(in_shape_);
  const std::int64_t b = in_shape_[0], c = in_shape_[1], hw = in_shape_[2] * in_shape_[3];
  const float inv = 1.0f / static_cast<float>(hw);
  for (std::int64_t bi = 0; bi < b; ++bi)
    for (std::int64_t ci = 0; ci < c; ++ci) {
      const float g = dy.at(bi, ci) * inv;
      float* p = dx.data() + (bi * c + ci) * hw;
      for (std::int64_t i = 0; i < hw; ++i) p[i] = g;
    }
  return dx;
}

AvgPool2d::AvgPool2d(int kernel, int stride) : kernel_(kernel), stride_(stride) {}

Tensor AvgPool2d::forward(const Tensor& x, Mode mode) {
  in_shape_ = x.shape();
  const std::int64_t b = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const std::int64_t ho = (h - kernel_) / stride_ + 1, wo = (w - kernel_) / stride_ + 1;
  Tensor y({b, c, ho, wo});
  const float inv = 1.0f / static_cast<float>(kernel_ * kernel_);
  for (std::int64_t bi = 0; bi < b; ++bi)
    for (std::int64_t ci = 0; ci < c; ++ci)
      for (std::int64_t oh = 0; oh < ho; ++oh)
        for (std::int64_t ow = 0; ow < wo; ++ow) {
          float acc = 0.0f;
          for (int kh = 0; kh < kernel_; ++kh)
            for (int kw = 0; kw < kernel_; ++kw)
              acc += x.at(bi, ci, oh * stride_ + kh, ow * stride_ + kw);
          y.at(bi, ci, oh, ow) = acc * inv;
        }
  return y;
}

Tensor AvgPool2d::backward(const Tensor& dy) {
  Tensor dx(in_shape_);
  const std::int64_t b = dy.dim(0), c = dy.dim(1), ho = dy.dim(2), wo = dy.dim(3);
  const float inv = 1.0f / static_cast<float>(kernel_ * kernel_);
  for (std::int64_t bi = 0; bi < b; ++bi)
    for (std::int64_t ci = 0; ci < c; ++ci)
      for (std::int64_t oh = 0; oh < ho; ++oh)
        for (std::int64_t ow = 0; ow < wo; ++ow) {
          const float g = dy.at(bi, ci, oh, ow) * inv;
          for (int kh = 0; kh < kernel_; ++kh)
            for (int kw = 0; kw < kernel_; ++kw)
              dx.at(bi, ci, oh * stride_ + kh, ow * stride_ + kw) += g;
        }
  return dx;
}

MaxPool2d::MaxPool2d(int kernel, int stride, int padding)
    : kernel_(kernel), stride_(stride), padding_(padding) {}

Tensor MaxPool2d::forward(const Tensor& x, Mode mode) {
  in_shape_ = x.shape();
  const std::int64_t b = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const std::int64_t ho = (h + 2 * padding_ - kernel_) / stride_ + 1;
  const std::int64_t wo = (w + 2 * padding_ - kernel_) / stride_ + 1;
  Tensor y({b, c, ho, wo});
  argmax_.assign(static_cast<std::size_t>(y.numel()), 0);
  std::int64_t idx = 0;
  for (std::int64_t bi = 0; bi < b; ++bi)
    for (std::int64_t ci = 0; ci < c; ++ci)
      for (std::int64_t oh = 0; oh < ho; ++oh)
        for (std::int64_t ow = 0; ow < wo; ++ow, ++idx) {
          float best = -std::numeric_limits<float>::infinity();
          std::int64_t best_i = -1;
          for (int kh = 0; kh < kernel_; ++kh) {
            const std::int64_t ih = oh * stride_ - padding_ + kh;
            if (ih < 0 || ih >= h) continue;
            for (int kw = 0; kw < kernel_; ++kw) {
              const std::int64_t iw = ow * stride_ - padding_ + kw;
              if (iw < 0 || iw >= w) continue;
              const std::int64_t fi = ((bi * c + ci) * h + ih) * w + iw;
              const float v = x[fi];
              if (v > best) {
                best = v;
                best_i = fi;
              }
            }
          }
          y[idx] = best;
          argmax_[static_cast<std::size_t>(idx)] = best_i;
        }
  return y;
}

Tensor MaxPool2d::backward(const Tensor& dy) {
  Tensor dx(in_shape_);
  for (std::int64_t i = 0; i < dy.numel(); ++i)
    dx[argmax_[static_cast<std::size_t>(i)]] += dy[i];
  return dx;
}

// ---------------------------------------------------------------------------
// MultiHeadSelfAttention

MultiHeadSelfAttention::MultiHeadSelfAttention(std::int64_t dim, int heads, Rng& rng)
    : d_(dim), heads_(heads), dk_(dim / heads), qkv_(dim, 3 * dim, rng), proj_(dim, dim, rng) {
  if (dim % heads != 0) throw std::invalid_argument("dim not divisible by heads");
}

Tensor MultiHeadSelfAttention::forward(const Tensor& x, Mode mode, bool capture) {
  const std::int64_t b = x.dim(0), t = x.dim(1);
  Tensor qkv = qkv_.forward(x, mode);  // [B, T, 3D]

  q_ = Tensor({b, heads_, t, dk_});
  k_ = Tensor({b, heads_, t, dk_});
  v_ = Tensor({b, heads_, t, dk_});
  for (std::int64_t bi = 0; bi < b; ++bi)
    for (std::int64_t ti = 0; ti < t; ++ti) {
      const float* row = qkv.data() + (bi * t + ti) * 3 * d_;
      for (int hi = 0; hi < heads_; ++hi)
        for (std::int64_t di = 0; di < dk_; ++di) {
          q_.at(bi, hi, ti, di) = row[hi * dk_ + di];
          k_.at(bi, hi, ti, di) = row[d_ + hi * dk_ + di];
          v_.at(bi, hi, ti, di) = row[2 * d_ + hi * dk_ + di];
        }
    }

  const float scale = 1.0f / std::sqrt(static_cast<float>(dk_));
  attn_ = Tensor({b, heads_, t, t});
  ctx_ = Tensor({b, heads_, t, dk_});
  for (std::int64_t bi = 0; bi < b; ++bi)
    for (int hi = 0; hi < heads_; ++hi) {
      CMapMat qm(q_.data() + ((bi * heads_ + hi) * t) * dk_, t, dk_);
      CMapMat km(k_.data() + ((bi * heads_ + hi) * t) * dk_, t, dk_);
      CMapMat vm(v_.data() + ((bi * heads_ + hi) * t) * dk_, t, dk_);
      MapMat am(attn_.data() + ((bi * heads_ + hi) * t) * t, t, t);
      MapMat cm(ctx_.data() + ((bi * heads_ + hi) * t) * dk_, t, dk_);
      am.noalias() = qm * km.transpose() * scale;
      // Row softmax.
      for (std::int64_t r = 0; r < t; ++r) {
        float* row = attn_.data() + (((bi * heads_ + hi) * t) + r) * t;
        float m = row[0];
        for (std::int64_t j = 1; j < t; ++j) m = std::max(m, row[j]);
        double sum = 0.0;
        for (std::int64_t j = 0; j < t; ++j) {
          row[j] = std::exp(row[j] - m);
          sum += row[j];
        }
        const float inv = static_cast<float>(1.0 / sum);
        for (std::int64_t j = 0; j < t; ++j) row[j] *= inv;
      }
      cm.noalias() = am * vm;
    }

  if (capture) captured_ = attn_;

  // Merge heads back to [B, T, D] and project.
  Tensor merged({b, t, d_});
  for (std::int64_t bi = 0; bi < b; ++bi)
    for (std::int64_t ti = 0; ti < t; ++ti) {
      float* row = merged.data() + (bi * t + ti) * d_;
      for (int hi = 0; hi < heads_; ++hi)
        for (std::int64_t di = 0; di < dk_; ++di) row[hi * dk_ + di] = ctx_.at(bi, hi, ti, di);
    }
  return proj_.forward(merged, mode);
}

Tensor MultiHeadSelfAttention::backward(const Tensor& dy) {
  const std::int64_t b = dy.dim(0), t = dy.dim(1);
  Tensor dmerged = proj_.backward(dy);  // [B, T, D]

  Tensor dctx({b, heads_, t, dk_});
  for (std::int64_t bi = 0; bi < b; ++bi)
    for (std::int64_t ti = 0; ti < t; ++ti) {
      const float* row = dmerged.data() + (bi * t + ti) * d_;
      for (int hi = 0; hi < heads_; ++hi)
        for (std::int64_t di = 0; di < dk_; ++di) dctx.at(bi, hi, ti, di) = row[hi * dk_ + di];
    }

  const float scale = 1.0f / std::sqrt(static_cast<float>(dk_));
  Tensor dq({b, heads_, t, dk_}), dk({b, heads_, t, dk_}), dv({b, heads_, t, dk_});
  Tensor ds({t, t});
  for (std::int64_t bi = 0; bi < b; ++bi)
    for (int hi = 0; hi < heads_; ++hi) {
      const std::int64_t off_t_dk = ((bi * heads_ + hi) * t) * dk_;
      const std::int64_t off_t_t = ((bi * heads_ + hi) * t) * t;
      CMapMat qm(q_.data() + off_t_dk, t, dk_);
      CMapMat km(k_.data() + off_t_dk, t, dk_);
      CMapMat vm(v_.data() + off_t_dk, t, dk_);
      CMapMat am(attn_.data() + off_t_t, t, t);
      CMapMat dcm(dctx.data() + off_t_dk, t, dk_);
      MapMat dqm(dq.data() + off_t_dk, t, dk_);
      MapMat dkm(dk.data() + off_t_dk, t, dk_);
      MapMat dvm(dv.data() + off_t_dk, t, dk_);
      MapMat dsm(ds.data(), t, t);

      dvm.noalias() = am.transpose() * dcm;
      dsm.noalias() = dcm * vm.transpose();  // dA
      // Softmax backward row-wise: dS = A * (dA - rowsum(dA .* A)).
      for (std::int64_t r = 0; r < t; ++r) {
        double dot = 0.0;
        const float* arow = attn_.data() + off_t_t + r * t;
        float* dsrow = ds.data() + r * t;
        for (std::int64_t j = 0; j < t; ++j) dot += static_cast<double>(dsrow[j]) * arow[j];
        for (std::int64_t j = 0; j < t; ++j)
          dsrow[j] = arow[j] * (dsrow[j] - static_cast<float>(dot));
      }
      dqm.noalias() = dsm * km * scale;
      dkm.noalias() = dsm.transpose() * qm * scale;
    }

  Tensor dqkv({b, t, 3 * d_});
  for (std::int64_t bi = 0; bi < b; ++bi)
    for (std::int64_t ti = 0; ti < t; ++ti) {
      float* row = dqkv.data() + (bi * t + ti) * 3 * d_;
      for (int hi = 0; hi < heads_; ++hi)
        for (std::int64_t di = 0; di < dk_; ++di) {
          row[hi * dk_ + di] = dq.at(bi, hi, ti, di);
          row[d_ + hi * dk_ + di] = dk.at(bi, hi, ti, di);
          row[2 * d_ + hi * dk_ + di] = dv.at(bi, hi, ti, di);
        }
    }
  return qkv_.backward(dqkv);
}

void MultiHeadSelfAttention::collect(const std::string& prefix, std::vector<ParamRef>& out) {
  qkv_.collect(prefix + ".qkv", out);
  proj_.collect(prefix + ".proj", out);
}

// ---------------------------------------------------------------------------
// EncoderBlock

EncoderBlock::EncoderBlock(std::int64_t dim, int heads, int mlp_ratio, Rng& rng)
    : ln1_(dim),
      ln2_(dim),
      attn_(dim, heads, rng),
      fc1_(dim, dim * mlp_ratio, rng),
      fc2_(dim * mlp_ratio, dim, rng) {}

Tensor EncoderBlock::forward(const Tensor& x, Mode mode, bool capture) {
  Tensor h = attn_.forward(ln1_.forward(x, mode), mode, capture);
  Tensor x1(x.shape());
  for (std::int64_t i = 0; i < x.numel(); ++i) x1[i] = x[i] + h[i];
  Tensor m = fc2_.forward(gelu_.forward(fc1_.forward(ln2_.forward(x1, mode), mode), mode), mode);
  Tensor y(x.shape());
  for (std::int64_t i = 0; i < x.numel(); ++i) y[i] = x1[i] + m[i];
  return y;
}

Tensor EncoderBlock::backward(const Tensor& dy) {
  Tensor dm = fc2_.backward(dy);
  Tensor dx1 = ln2_.backward(fc1_.backward(gelu_.backward(dm)));
  for (std::int64_t i = 0; i < dy.numel(); ++i) dx1[i] += dy[i];
  Tensor dh = attn_.backward(dx1);
  Tensor dx = ln1_.backward(dh);
  for (std::int64_t i = 0; i < dy.numel(); ++i) dx[i] += dx1[i];
  return dx;
}

void EncoderBlock::collect(const std::string& prefix, std::vector<ParamRef>& out) {
  ln1_.collect(prefix + ".ln1", out);
  attn_.collect(prefix + ".attn", out);
  ln2_.collect(prefix + ".ln2", out);
  fc1_.collect(prefix + ".mlp.fc1", out);
  fc2_.collect(prefix + ".mlp.fc2", out);
}

// ---------------------------------------------------------------------------
// SqueezeExcite

SqueezeExcite::SqueezeExcite(std::int64_t channels, std::int64_t reduced, Rng& rng)
    : fc1_(channels, reduced, rng, true), fc2_(reduced, channels, rng, true) {}

Tensor SqueezeExcite::forward(const Tensor& x, Mode mode) {
  x_ = x;
  const std::int64_t b = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  pooled_ = Tensor({b, c});
  for (std::int64_t bi = 0; bi < b; ++bi)
    for (std::int64_t ci = 0; ci < c; ++ci) {
      const float* p = x.data() + (bi * c + ci) * hw;
      double acc = 0.0;
      for (std::int64_t i = 0; i < hw; ++i) acc += p[i];
      pooled_.at(bi, ci) = static_cast<float>(acc / static_cast<double>(hw));
    }
  mid_ = fc1_.forward(pooled_, mode);  // pre-activation
  Tensor act(mid_.shape());
  for (std::int64_t i = 0; i < mid_.numel(); ++i) act[i] = mid_[i] * sigmoidf(mid_[i]);
  Tensor z = fc2_.forward(act, mode);
  gate_ = Tensor(z.shape());
  for (std::int64_t i = 0; i < z.numel(); ++i) gate_[i] = sigmoidf(z[i]);

  Tensor y(x.shape());
  for (std::int64_t bi = 0; bi < b; ++bi)
    for (std::int64_t ci = 0; ci < c; ++ci) {
      const float g = gate_.at(bi, ci);
      const float* p = x.data() + (bi * c + ci) * hw;
      float* py = y.data() + (bi * c + ci) * hw;
      for (std::int64_t i = 0; i < hw; ++i) py[i] = p[i] * g;
    }
  return y;
}

Tensor SqueezeExcite::backward(const Tensor& dy) {
  const std::int64_t b = x_.dim(0), c = x_.dim(1), hw = x_.dim(2) * x_.dim(3);
  Tensor dgate({b, c});
  Tensor dx(x_.shape());
  for (std::int64_t bi = 0; bi < b; ++bi)
    for (std::int64_t ci = 0; ci < c; ++ci) {
      const float g = gate_.at(bi, ci);
      const float* pd = dy.data() + (bi * c + ci) * hw;
      const float* px = x_.data() + (bi * c + ci) * hw;
      float* pdx = dx.data() + (bi * c + ci) * hw;
      double acc = 0.0;
      for (std::int64_t i = 0; i < hw; ++i) {
        pdx[i] = pd[i] * g;
        acc += static_cast<double>(pd[i]) * px[i];
      }
      dgate.at(bi, ci) = static_cast<float>(acc);
    }
  // Through the sigmoid gate and the two fully connected layers.
  Tensor dz(dgate.shape());
  for (std::int64_t i = 0; i < dz.numel(); ++i) {
    const float g = gate_[i];
    dz[i] = dgate[i] * g * (1.0f - g);
  }
  Tensor dact = fc2_.backward(dz);
  Tensor dmid(dact.shape());
  for (std::int64_t i = 0; i < dmid.numel(); ++i) {
    const float s = sigmoidf(mid_[i]);
    dmid[i] = dact[i] * s * (1.0f + mid_[i] * (1.0f - s));
  }
  Tensor dpooled = fc1_.backward(dmid);
  const float inv = 1.0f / static_cast<float>(hw);
  for (std::int64_t bi = 0; bi < b; ++bi)
    for (std::int64_t ci = 0; ci < c; ++ci) {
      const float g = dpooled.at(bi, ci) * inv;
      float* pdx = dx.data() + (bi * c + ci) * hw;
      for (std::int64_t i = 0; i < hw; ++i) pdx[i] += g;
    }
  return dx;
}

void SqueezeExcite::collect(const std::string& prefix, std::vector<ParamRef>& out) {
  fc1_.collect(prefix + ".fc1", out);
  fc2_.collect(prefix + ".fc2", out);
}

}  // namespace cmkd::nn
