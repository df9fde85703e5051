// Copyright 2026 the cmkd authors
// Neural network primitives with explicit forward/backward passes.
//
// Licensed under the Apache License, Version 2.0

#pragma once

#include <memory>
#include <string>
#include <vector>

#include "cmkd/rng.hpp"
#include "cmkd/tensor.hpp"

namespace cmkd::nn {

enum class Mode { kTrain, kEval };

/// Named view of a parameter (or statistics buffer) owned by a layer.
/// Buffers have no grad and are excluded from optimization, but are part of
/// checkpoint state and weight averaging.
struct ParamRef {
  std::string name;
  Tensor* value = nullptr;
  Tensor* grad = nullptr;
  bool trainable = true;
};

class Layer {
 public:
  virtual ~Layer() = default;
  virtual Tensor forward(const Tensor& x, Mode mode) = 0;
  virtual Tensor backward(const Tensor& dy) = 0;
  virtual void collect(const std::string& prefix, std::vector<ParamRef>& out) {}
};

// ---------------------------------------------------------------------------
// Dense / conv layers

/// y = x W^T + b over the last dimension; accepts [B, I] or [B, T, I].
class Linear : public Layer {
 public:
  Linear(std::int64_t in, std::int64_t out, Rng& rng, bool bias = true);
  Tensor forward(const Tensor& x, Mode mode) override;
  Tensor backward(const Tensor& dy) override;
  void collect(const std::string& prefix, std::vector<ParamRef>& out) override;

  Tensor weight, bias, d_weight, d_bias;

 private:
  bool has_bias_;
  Tensor x_;  // stashed input
};

/// 2-D convolution on [B, C, H, W]; groups == in_channels gives depthwise.
class Conv2d : public Layer {
 public:
  Conv2d(std::int64_t cin, std::int64_t cout, int kernel, int stride, int padding,
         std::int64_t groups, Rng& rng, bool bias = false);
  Tensor forward(const Tensor& x, Mode mode) override;
  Tensor backward(const Tensor& dy) override;
  void collect(const std::string& prefix, std::vector<ParamRef>& out) override;

  /// First-layer convs can skip the input gradient.
  void set_needs_input_grad(bool v) { needs_input_grad_ = v; }

  Tensor weight, bias, d_weight, d_bias;  // weight [Cout, Cin/groups, k, k]
  std::int64_t cin, cout, groups;
  int kernel, stride, padding;

 private:
  bool has_bias_;
  bool needs_input_grad_ = true;
  Tensor x_;
};

class BatchNorm2d : public Layer {
 public:
  explicit BatchNorm2d(std::int64_t channels, double momentum = 0.1, double eps = 1e-5);
  Tensor forward(const Tensor& x, Mode mode) override;
  Tensor backward(const Tensor& dy) override;
  void collect(const std::string& prefix, std::vector<ParamRef>& out) override;

  Tensor gamma, beta, d_gamma, d_beta;
  Tensor running_mean, running_var;

 private:
  std::int64_t c_;
  double momentum_, eps_;
  Mode mode_ = Mode::kTrain;
  Tensor x_, xhat_;
  std::vector<double> mean_, inv_std_;
};

/// Layer normalization over the last dimension of [B, T, D].
class LayerNorm : public Layer {
 public:
  explicit LayerNorm(std::int64_t dim, double eps = 1e-6);
  Tensor forward(const Tensor& x, Mode mode) override;
  Tensor backward(const Tensor& dy) override;
  void collect(const std::string& prefix, std::vector<ParamRef>& out) override;

  Tensor gamma, beta, d_gamma, d_beta;

 private:
  std::int64_t d_;
  double eps_;
  Tensor xhat_;
  std::vector<float> inv_std_;
};

// ---------------------------------------------------------------------------
// Elementwise activations

class ReLU : public Layer {
 public:
  Tensor forward(const Tensor& x, Mode mode) override;
  Tensor backward(const Tensor& dy) override;

 private:
  Tensor x_;
};

class SiLU : public Layer {
 public:
  Tensor forward(const Tensor& x, Mode mode) override;
  Tensor backward(const Tensor& dy) override;

 private:
  Tensor x_;
};

class GELU : public Layer {
 public:
  Tensor forward(const Tensor& x, Mode mode) override;
  Tensor backward(const Tensor& dy) override;

 private:
  Tensor x_;
};

// ---------------------------------------------------------------------------
// Pooling

/// Mean over H and W: [B, C, H, W] -> [B, C].
class GlobalMeanPool2d : public Layer {
 public:
  Tensor forward(const Tensor& x, Mode mode) override;
  Tensor backward(const Tensor& dy) override;

 private:
  std::vector<std::int64_t> in_shape_;
};

class AvgPool2d : public Layer {
 public:
  explicit AvgPool2d(int kernel, int stride);
  Tensor forward(const Tensor& x, Mode mode) override;
  Tensor backward(const Tensor& dy) override;

 private:
  int kernel_, stride_;
  std::vector<std::int64_t> in_shape_;
};

class MaxPool2d : public Layer {
 public:
  explicit MaxPool2d(int kernel, int stride, int padding);
  Tensor forward(const Tensor& x, Mode mode) override;
  Tensor backward(const Tensor& dy) override;

 private:
  int kernel_, stride_, padding_;
  std::vector<std::int64_t> in_shape_;
  std::vector<std::int64_t> argmax_;
};

// ---------------------------------------------------------------------------
// Attention

/// Multi-head self-attention over [B, T, D] with optional capture of the
/// post-softmax attention maps [B, heads, T, T].
class MultiHeadSelfAttention : public Layer {
 public:
  MultiHeadSelfAttention(std::int64_t dim, int heads, Rng& rng);
  Tensor forward(const Tensor& x, Mode mode) override { return forward(x, mode, false); }
  Tensor forward(const Tensor& x, Mode mode, bool capture);
  Tensor backward(const Tensor& dy) override;
  void collect(const std::string& prefix, std::vector<ParamRef>& out) override;

  const Tensor& captured_attention() const { return captured_; }

 private:
  std::int64_t d_;
  int heads_;
  std::int64_t dk_;
  Linear qkv_, proj_;
  Tensor q_, k_, v_, attn_, ctx_;  // stashed per-forward
  Tensor captured_;
};

/// Pre-norm transformer encoder block: x += MHSA(LN(x)); x += MLP(LN(x)).
class EncoderBlock : public Layer {
 public:
  EncoderBlock(std::int64_t dim, int heads, int mlp_ratio, Rng& rng);
  Tensor forward(const Tensor& x, Mode mode) override { return forward(x, mode, false); }
  Tensor forward(const Tensor& x, Mode mode, bool capture);
  Tensor backward(const Tensor& dy) override;
  void collect(const std::string& prefix, std::vector<ParamRef>& out) override;

  const Tensor& captured_attention() const { return attn_.captured_attention(); }

 private:
  LayerNorm ln1_, ln2_;
  MultiHeadSelfAttention attn_;
  Linear fc1_, fc2_;
  GELU gelu_;
};

/// Squeeze-excitation channel gate for [B, C, H, W].
class SqueezeExcite : public Layer {
 public:
  SqueezeExcite(std::int64_t channels, std::int64_t reduced, Rng& rng);
  Tensor forward(const Tensor& x, Mode mode) override;
  Tensor backward(const Tensor& dy) override;
  void collect(const std::string& prefix, std::vector<ParamRef>& out) override;

 private:
  Linear fc1_, fc2_;
  Tensor x_, pooled_, mid_, gate_;
};

// ---------------------------------------------------------------------------
// Initializers

void init_he_normal(Tensor& t, std::int64_t fan_in, Rng& rng);
void init_trunc_normal(Tensor& t, double stddev, Rng& rng);

}  // namespace cmkd::nn
