// Copyright 2026 the cmkd authors
// Log-mel spectrogram front end and training-time augmentations.
//
// Licensed under the Apache License, Version 2.0

#pragma once

#include <cstdint>
#include <utility>
#include <vector>

#include "cmkd/rng.hpp"
#include "cmkd/tensor.hpp"

namespace cmkd::features {

inline constexpr int kSampleRate = 16000;
inline constexpr int kMelBins = 128;
inline constexpr double kWindowMs = 25.0;  // Hanning
inline constexpr double kHopMs = 10.0;
inline constexpr double kFminHz = 0.0;
inline constexpr double kFmaxHz = 8000.0;
/// ln(1e-10); the value silent frames take and the pad fill for short clips.
inline const float kLogFloor = -23.025850929940457f;

struct Waveform {
  std::vector<float> samples;
  int sample_rate = kSampleRate;

  double duration_s() const {
    return static_cast<double>(samples.size()) / sample_rate;
  }
};

/// 128 x T log-mel energy matrix; frames are 25 ms windows every 10 ms.
struct Spectrogram {
  Tensor values;  // [kMelBins x frames]

  std::int64_t bins() const { return values.empty() ? 0 : values.dim(0); }
  std::int64_t frames() const { return values.empty() ? 0 : values.dim(1); }
};

enum class Task { kSingleLabel, kMultiLabel };

struct LabelTarget {
  std::vector<float> probs;  // length C
  Task task = Task::kMultiLabel;
};

enum class NoiseMode {
  kPerClipAmplitude,  // a ~ U(0, amp_max) per clip scales i.i.d. U(0,1) entries
  kPerEntryDirect,    // each entry perturbed by an independent U(0, amp_max)
};

/// Augmentation magnitudes; defaults are the FSD50K/AudioSet recipe.
struct AugmentSpec {
  int freq_mask_max = 48;
  int time_mask_max = 192;
  double mixup_ratio = 0.5;
  double noise_amp_max = 0.05;
  int shift_max_frames = 10;
  double label_smoothing = 0.1;
  NoiseMode noise_mode = NoiseMode::kPerClipAmplitude;
  bool shift_wrap = true;  // circular roll; false zero-fills with the log floor
};

enum class Axis { kFreq, kTime };

/// Waveform -> 128-bin log-mel spectrogram at 10 ms hop. Deterministic;
/// a whole-second clip of t seconds yields exactly 100*t frames.
Spectrogram compute_fbank(const Waveform& w);

/// Pad (with the log floor) or trim the time axis to exactly `frames`.
Spectrogram pad_or_trim(Spectrogram spec, std::int64_t frames);

/// SpecAugment-style mask: one contiguous band of width ~ U{0..max_width}
/// along `axis` set to the per-spectrogram mean.
Spectrogram mask(const Spectrogram& spec, Axis axis, int max_width, Rng& rng);

/// Circular time roll by s ~ U{-shift_max..+shift_max} frames.
Spectrogram time_shift(const Spectrogram& spec, int shift_max, Rng& rng,
                       bool wrap = true);

/// Shift by a fixed frame count (positive moves content toward later frames).
Spectrogram time_shift_by(const Spectrogram& spec, int shift, bool wrap = true);

Spectrogram add_noise(const Spectrogram& spec, double amp_max, Rng& rng,
                      NoiseMode mode = NoiseMode::kPerClipAmplitude);

/// Convex blend of two samples: mu*a + (1-mu)*b for spectrogram and labels.
std::pair<Spectrogram, LabelTarget> mixup(const Spectrogram& spec_a,
                                          const LabelTarget& label_a,
                                          const Spectrogram& spec_b,
                                          const LabelTarget& label_b, double mu);

/// Single-label: y*(1-eps) + eps/C. Multi-label: y*(1-eps) + eps/2.
LabelTarget smooth_labels(const LabelTarget& y, double eps);

/// Draws the mixup blend weight, Beta(10, 10).
double draw_mixup_weight(Rng& rng);

/// Batch policy: each sample is mixed with a random partner with probability
/// `spec.mixup_ratio`, then shifted, noised and masked (one frequency band,
/// one time band). Labels are smoothed last. Everything is driven by `rng`
/// in sample order, so a fixed seed reproduces the batch bitwise.
void augment_batch(std::vector<Spectrogram>& specs,
                   std::vector<LabelTarget>& labels, const AugmentSpec& spec,
                   Rng& rng);

}  // namespace cmkd::features
