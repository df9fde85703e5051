// Copyright 2026 the cmkd authors
// Dataset ingestion: 16 kHz mono PCM WAV + CSV manifest, with an optional
// flat-binary spectrogram cache.
//
// Licensed under the Apache License, Version 2.0

#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "cmkd/features.hpp"

namespace cmkd::data {

struct ManifestEntry {
  std::string path;            // .wav or cached .fbk, relative to manifest dir
  std::vector<int> label_ids;  // class indices
  std::optional<int> fold;
};

struct Dataset {
  std::filesystem::path root;
  std::vector<ManifestEntry> entries;
  features::Task task = features::Task::kMultiLabel;
  int num_classes = 0;
  std::int64_t frames = 0;  // all clips pad/trim to this many frames

  std::size_t size() const { return entries.size(); }

  /// Loads entry i: spectrogram (from WAV via fbank, or from cache) padded or
  /// trimmed to `frames`, plus its hard label vector.
  std::pair<features::Spectrogram, features::LabelTarget> load(std::size_t i) const;
};

/// Reads `path,label_ids,fold` rows; label_ids are ';'-separated ints, fold
/// may be empty. The header row is required.
std::vector<ManifestEntry> read_manifest(const std::filesystem::path& csv);

void write_manifest(const std::filesystem::path& csv,
                    const std::vector<ManifestEntry>& entries);

Dataset open_dataset(const std::filesystem::path& manifest_csv, features::Task task,
                     int num_classes, std::int64_t frames);

/// 16 kHz mono 16-bit PCM WAV. Anything else is rejected.
features::Waveform read_wav(const std::filesystem::path& path);
void write_wav(const std::filesystem::path& path, const features::Waveform& w);

/// Flat binary spectrogram cache: u32 magic 'FBNK', u32 rows, u32 cols,
/// then rows*cols little-endian float32, row-major.
features::Spectrogram read_fbank_cache(const std::filesystem::path& path);
void write_fbank_cache(const std::filesystem::path& path, const features::Spectrogram& spec);

}  // namespace cmkd::data
