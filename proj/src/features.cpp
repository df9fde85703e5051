// Copyright 2026 the cmkd authors
//
// Licensed under the Apache License, Version 2.0

#include "cmkd/features.hpp"

#include <cmath>
#include <complex>
#include <stdexcept>

namespace cmkd::features {
namespace {

constexpr int kWindowSamples = 400;  // 25 ms at 16 kHz
constexpr int kHopSamples = 160;     // 10 ms
constexpr int kFftSize = 512;
constexpr int kFftBins = kFftSize / 2 + 1;

// In-place iterative radix-2 Cooley-Tukey. n must be a power of two.
void fft_inplace(std::vector<std::complex<double>>& a) {
  const std::size_t n = a.size();
  for (std::size_t i = 1, j = 0; i < n; ++i) {
    std::size_t bit = n >> 1;
    for (; j & bit; bit >>= 1) j ^= bit;
    j ^= bit;
    if (i < j) std::swap(a[i], a[j]);
  }
  for (std::size_t len = 2; len <= n; len <<= 1) {
    const double ang = -2.0 * M_PI / static_cast<double>(len);
    const std::complex<double> wl(std::cos(ang), std::sin(ang));
    for (std::size_t i = 0; i < n; i += len) {
      std::complex<double> w(1.0, 0.0);
      for (std::size_t k = 0; k < len / 2; ++k) {
        const auto u = a[i + k];
        const auto v = a[i + k + len / 2] * w;
        a[i + k] = u + v;
        a[i + k + len / 2] = u - v;
        w *= wl;
      }
    }
  }
}

double hz_to_mel(double hz) { return 2595.0 * std::log10(1.0 + hz / 700.0); }

// Triangular HTK-mel filterbank, kMelBins filters over [kFminHz, kFmaxHz],
// evaluated at the kFftBins FFT bin frequencies. Built once.
const std::vector<float>& mel_filterbank() {
  static const std::vector<float> fb = [] {
    std::vector<float> f(static_cast<std::size_t>(kMelBins) * kFftBins, 0.0f);
    const double mel_lo = hz_to_mel(kFminHz);
    const double mel_hi = hz_to_mel(kFmaxHz);
    std::vector<double> mel_pts(kMelBins + 2);
    for (int i = 0; i < kMelBins + 2; ++i)
      mel_pts[static_cast<std::size_t>(i)] =
          mel_lo + (mel_hi - mel_lo) * i / (kMelBins + 1);
    for (int m = 0; m < kMelBins; ++m) {
      const double left = mel_pts[static_cast<std::size_t>(m)];
      const double center = mel_pts[static_cast<std::size_t>(m + 1)];
      const double right = mel_pts[static_cast<std::size_t>(m + 2)];
      for (int k = 0; k < kFftBins; ++k) {
        const double mel_k =
            hz_to_mel(static_cast<double>(k) * kSampleRate / kFftSize);
        double v = 0.0;
        if (mel_k > left && mel_k < center)
          v = (mel_k - left) / (center - left);
        else if (mel_k >= center && mel_k < right)
          v = (right - mel_k) / (right - center);
        f[static_cast<std::size_t>(m) * kFftBins + static_cast<std::size_t>(k)] =
            static_cast<float>(v);
      }
    }
    return f;
  }();
  return fb;
}

const std::vector<double>& hann_window() {
  static const std::vector<double> win = [] {
    std::vector<double> w(kWindowSamples);
    for (int i = 0; i < kWindowSamples; ++i)
      w[static_cast<std::size_t>(i)] =
          0.5 - 0.5 * std::cos(2.0 * M_PI * i / (kWindowSamples - 1));
    return w;
  }();
  return win;
}

}  // namespace

Spectrogram compute_fbank(const Waveform& w) {
  if (w.samples.empty()) throw std::invalid_argument("empty input");
  if (w.sample_rate != kSampleRate)
    throw std::invalid_argument("unsupported sample rate");

  // Frame count covers every hop start inside the clip; the tail window is
  // zero-padded. A whole-second clip of t seconds gives exactly 100*t frames.
  const std::int64_t n = static_cast<std::int64_t>(w.samples.size());
  const std::int64_t frames = (n + kHopSamples - 1) / kHopSamples;

  Tensor out({kMelBins, frames});
  const auto& fb = mel_filterbank();
  const auto& win = hann_window();

  std::vector<std::complex<double>> buf(kFftSize);
  std::vector<double> power(kFftBins);
  for (std::int64_t t = 0; t < frames; ++t) {
    const std::int64_t start = t * kHopSamples;
    for (int i = 0; i < kFftSize; ++i) {
      const std::int64_t idx = start + i;
      const double s = (i < kWindowSamples && idx < n)
                           ? static_cast<double>(w.samples[static_cast<std::size_t>(idx)]) *
                                 win[static_cast<std::size_t>(i)]
                           : 0.0;
      buf[static_cast<std::size_t>(i)] = {s, 0.0};
    }
    fft_inplace(buf);
    for (int k = 0; k < kFftBins; ++k)
      power[static_cast<std::size_t>(k)] = std::norm(buf[static_cast<std::size_t>(k)]);
    for (int m = 0; m < kMelBins; ++m) {
      double e = 0.0;
      const float* row = fb.data() + static_cast<std::size_t>(m) * kFftBins;
      for (int k = 0; k < kFftBins; ++k) e += row[k] * power[static_cast<std::size_t>(k)];
      out.at(m, t) = static_cast<float>(std::log(std::max(e, 1e-10)));
    }
  }
  return Spectrogram{std::move(out)};
}

Spectrogram pad_or_trim(Spectrogram spec, std::int64_t frames) {
  const std::int64_t t0 = spec.frames();
  if (t0 == frames) return spec;
  Tensor out({spec.bins(), frames}, kLogFloor);
  const std::int64_t keep = std::min(t0, frames);
  for (std::int64_t m = 0; m < spec.bins(); ++m)
    for (std::int64_t t = 0; t < keep; ++t) out.at(m, t) = spec.values.at(m, t);
  return Spectrogram{std::move(out)};
}

Spectrogram mask(const Spectrogram& spec, Axis axis, int max_width, Rng& rng) {
  const std::int64_t len = axis == Axis::kFreq ? spec.bins() : spec.frames();
  if (max_width < 0 || max_width > len)
    throw std::invalid_argument("mask wider than axis");

  Spectrogram out{spec.values};
  const auto width = rng.uniform_int(0, max_width);
  if (width == 0) return out;
  const auto start = rng.uniform_int(0, len - width);

  double sum = 0.0;
  for (auto v : spec.values.vec()) sum += v;
  const float fill = static_cast<float>(sum / static_cast<double>(spec.values.numel()));

  if (axis == Axis::kFreq) {
    for (std::int64_t m = start; m < start + width; ++m)
      for (std::int64_t t = 0; t < spec.frames(); ++t) out.values.at(m, t) = fill;
  } else {
    for (std::int64_t m = 0; m < spec.bins(); ++m)
      for (std::int64_t t = start; t < start + width; ++t) out.values.at(m, t) = fill;
  }
  return out;
}

Spectrogram time_shift_by(const Spectrogram& spec, int shift, bool wrap) {
  const std::int64_t frames = spec.frames();
  if (shift == 0) return Spectrogram{spec.values};
  Tensor out({spec.bins(), frames}, kLogFloor);
  for (std::int64_t m = 0; m < spec.bins(); ++m) {
    for (std::int64_t t = 0; t < frames; ++t) {
      std::int64_t src = t - shift;
      if (wrap) {
        src = ((src % frames) + frames) % frames;
      } else if (src < 0 || src >= frames) {
        continue;  // stays at the log floor
      }
      out.at(m, t) = spec.values.at(m, src);
    }
  }
  return Spectrogram{std::move(out)};
}

Spectrogram time_shift(const Spectrogram& spec, int shift_max, Rng& rng, bool wrap) {
  if (shift_max >= spec.frames())
    throw std::invalid_argument("time shift bound exceeds frame count");
  const int shift = static_cast<int>(rng.uniform_int(-shift_max, shift_max));
  return time_shift_by(spec, shift, wrap);
}

Spectrogram add_noise(const Spectrogram& spec, double amp_max, Rng& rng, NoiseMode mode) {
  if (amp_max < 0) throw std::invalid_argument("negative noise amplitude");
  Spectrogram out{spec.values};
  if (amp_max == 0.0) return out;
  if (mode == NoiseMode::kPerClipAmplitude) {
    const double a = rng.uniform(0.0, amp_max);
    for (auto& v : out.values.vec()) v += static_cast<float>(a * rng.uniform());
  } else {
    for (auto& v : out.values.vec()) v += static_cast<float>(rng.uniform(0.0, amp_max));
  }
  return out;
}

std::pair<Spectrogram, LabelTarget> mixup(const Spectrogram& spec_a,
                                          const LabelTarget& label_a,
                                          const Spectrogram& spec_b,
                                          const LabelTarget& label_b, double mu) {
  if (!spec_a.values.same_shape(spec_b.values) ||
      label_a.probs.size() != label_b.probs.size())
    throw std::invalid_argument("mixup shape mismatch");
  Spectrogram spec{spec_a.values};
  const float* pb = spec_b.values.data();
  float* pa = spec.values.data();
  const auto fm = static_cast<float>(mu);
  for (std::int64_t i = 0; i < spec.values.numel(); ++i)
    pa[i] = fm * pa[i] + (1.0f - fm) * pb[i];
  LabelTarget label = label_a;
  for (std::size_t c = 0; c < label.probs.size(); ++c)
    label.probs[c] = fm * label_a.probs[c] + (1.0f - fm) * label_b.probs[c];
  return {std::move(spec), std::move(label)};
}

LabelTarget smooth_labels(const LabelTarget& y, double eps) {
  if (eps < 0.0 || eps >= 1.0) throw std::invalid_argument("label smoothing out of range");
  LabelTarget out = y;
  if (eps == 0.0) return out;
  const double keep = 1.0 - eps;
  const double add = y.task == Task::kSingleLabel
                         ? eps / static_cast<double>(y.probs.size())
                         : eps / 2.0;
  for (auto& p : out.probs) p = static_cast<float>(keep * p + add);
  return out;
}

double draw_mixup_weight(Rng& rng) { return rng.beta_int(10, 10); }

void augment_batch(std::vector<Spectrogram>& specs,
                   std::vector<LabelTarget>& labels, const AugmentSpec& spec,
                   Rng& rng) {
  const std::size_t batch = specs.size();
  if (labels.size() != batch) throw std::invalid_argument("batch label count mismatch");

  if (spec.mixup_ratio > 0.0 && batch > 1) {
    // Blend against the pre-mixup batch so partner content is well defined.
    const std::vector<Spectrogram> base_specs = specs;
    const std::vector<LabelTarget> base_labels = labels;
    for (std::size_t i = 0; i < batch; ++i) {
      if (rng.uniform() >= spec.mixup_ratio) continue;
      std::size_t j = static_cast<std::size_t>(
          rng.uniform_int(0, static_cast<std::int64_t>(batch) - 2));
      if (j >= i) ++j;
      const double mu = draw_mixup_weight(rng);
      auto mixed = mixup(base_specs[i], base_labels[i], base_specs[j], base_labels[j], mu);
      specs[i] = std::move(mixed.first);
      labels[i] = std::move(mixed.second);
    }
  }

  for (std::size_t i = 0; i < batch; ++i) {
    if (spec.shift_max_frames > 0)
      specs[i] = time_shift(specs[i], spec.shift_max_frames, rng, spec.shift_wrap);
    if (spec.noise_amp_max > 0.0)
      specs[i] = add_noise(specs[i], spec.noise_amp_max, rng, spec.noise_mode);
    if (spec.freq_mask_max > 0) specs[i] = mask(specs[i], Axis::kFreq, spec.freq_mask_max, rng);
    if (spec.time_mask_max > 0) specs[i] = mask(specs[i], Axis::kTime, spec.time_mask_max, rng);
    if (spec.label_smoothing > 0.0) labels[i] = smooth_labels(labels[i], spec.label_smoothing);
  }
}

}  // namespace cmkd::features
