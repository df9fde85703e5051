// Copyright 2026 the cmkd authors
// Model zoo: CNN (inverted-bottleneck stack), spectrogram Transformer, and
// CNN-attention hybrid, plus patch extraction and checkpoint channel
// adaptation.
//
// Licensed under the Apache License, Version 2.0

#pragma once

#include <memory>
#include <string>
#include <vector>

#include "cmkd/features.hpp"
#include "cmkd/layers.hpp"

namespace cmkd::models {

using nn::Mode;

enum class Family { kCnn, kAst, kHybrid };

struct ModelSpec {
  Family family = Family::kCnn;
  std::string preset;
  int num_classes = 0;
  int repr_dim = 0;    // d
  int layers = 0;      // encoder depth / conv blocks
  int heads = 0;       // attention families
  int downsample = 0;  // c, cnn/hybrid
  int patch_size = 16;
  int patch_stride = 10;
  bool separate_head = false;
  std::int64_t input_frames = 100;
};

/// Fills in architecture fields for a named preset. Known presets:
/// effnet-b0/b2/b6, densenet-121, ast-tiny/small/base, hybrid-b0/b2,
/// mini-cnn, mini-ast, mini-hybrid, micro-cnn, micro-ast.
ModelSpec make_model_spec(const std::string& preset, int num_classes,
                          std::int64_t input_frames, bool separate_head = false);

struct PatchGrid {
  int n_freq = 0;
  int n_time = 0;
  int total() const { return n_freq * n_time; }
};

/// Stride-10 16x16 patch grid over a [bins x frames] matrix, no padding.
/// For the standard 128-bin input this gives 12 frequency rows and
/// ceil((T-16)/10) time columns.
PatchGrid patch_grid(std::int64_t bins, std::int64_t frames);

/// Extracts the patch tiles in row-major (frequency-major) order.
std::pair<std::vector<Tensor>, PatchGrid> patchify(const features::Spectrogram& spec);

/// Averages a 3-input-channel conv kernel [out x 3 x kh x kw] down to one
/// channel, the adaptation applied to vision checkpoints before audio use.
Tensor adapt_input_channels(const Tensor& kernel3);

struct ModelOutput {
  std::vector<float> logits;
  std::vector<float> dis_logits;      // only with a separate head
  std::vector<float> penult;          // pooled CNN feature or CLS embedding
  std::vector<Tensor> attention;      // per layer [heads, tokens, tokens]
};

struct BatchOutput {
  Tensor logits;                  // [B, C]
  Tensor dis_logits;              // [B, C] or empty
  Tensor penult;                  // [B, d]
  std::vector<Tensor> attention;  // per layer [B, heads, tokens, tokens]
};

class Model {
 public:
  explicit Model(ModelSpec spec) : spec_(std::move(spec)) {}
  virtual ~Model() = default;

  const ModelSpec& spec() const { return spec_; }

  /// Batched forward on [B, 128, T]. Train mode stashes activations for a
  /// following backward; eval mode is deterministic.
  virtual BatchOutput forward(const Tensor& batch, Mode mode,
                              bool capture_attention = false) = 0;

  /// Backpropagates loss gradients w.r.t. the output logits (and the
  /// distillation head logits when present), accumulating parameter grads.
  virtual void backward(const Tensor& d_logits, const Tensor* d_dis_logits = nullptr) = 0;

  /// Eval-style convenience wrapper for a single spectrogram. Mutates only
  /// internal scratch, so it is usable on frozen teachers.
  ModelOutput forward_one(const features::Spectrogram& spec, Mode mode,
                          bool capture_attention = false) const;

  std::vector<nn::ParamRef> parameters();
  std::vector<nn::ParamRef> state();
  void zero_grad();
  std::int64_t parameter_count();

 protected:
  virtual void collect(std::vector<nn::ParamRef>& out) = 0;
  ModelSpec spec_;
};

/// Builds and initializes a model; identical seeds give bitwise-identical
/// initial parameters.
std::unique_ptr<Model> build_model(const ModelSpec& spec, Rng& rng);

/// Packs spectrograms into a [B, 128, T] batch tensor.
Tensor pack_batch(const std::vector<features::Spectrogram>& specs);

}  // namespace cmkd::models
