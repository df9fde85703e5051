// Copyright 2026 the cmkd authors
//
// Licensed under the Apache License, Version 2.0

#include "cmkd/dataset.hpp"

#include <cstring>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace cmkd::data {
namespace {

template <class T>
T read_le(std::istream& in) {
  unsigned char b[sizeof(T)];
  in.read(reinterpret_cast<char*>(b), sizeof(T));
  T v = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i) v |= static_cast<T>(b[i]) << (8 * i);
  return v;
}

template <class T>
void write_le(std::ostream& out, T v) {
  unsigned char b[sizeof(T)];
  for (std::size_t i = 0; i < sizeof(T); ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  out.write(reinterpret_cast<const char*>(b), sizeof(T));
}

constexpr std::uint32_t kFbankMagic = 0x4b4e4246;  // "FBNK"

}  // namespace

features::Waveform read_wav(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open wav file: " + path.string());

  char tag[4];
  in.read(tag, 4);
  if (std::memcmp(tag, "RIFF", 4) != 0) throw std::runtime_error("not a RIFF file: " + path.string());
  read_le<std::uint32_t>(in);  // riff size
  in.read(tag, 4);
  if (std::memcmp(tag, "WAVE", 4) != 0) throw std::runtime_error("not a WAVE file: " + path.string());

  int channels = 0, bits = 0, rate = 0;
  std::vector<float> samples;
  bool have_fmt = false, have_data = false;
  while (in.read(tag, 4)) {
    const auto chunk_size = read_le<std::uint32_t>(in);
    if (std::memcmp(tag, "fmt ", 4) == 0) {
      const auto format = read_le<std::uint16_t>(in);
      channels = read_le<std::uint16_t>(in);
      rate = static_cast<int>(read_le<std::uint32_t>(in));
      read_le<std::uint32_t>(in);  // byte rate
      read_le<std::uint16_t>(in);  // block align
      bits = read_le<std::uint16_t>(in);
      if (chunk_size > 16) in.seekg(chunk_size - 16, std::ios::cur);
      if (format != 1) throw std::runtime_error("only PCM wav supported: " + path.string());
      have_fmt = true;
    } else if (std::memcmp(tag, "data", 4) == 0) {
      if (!have_fmt) throw std::runtime_error("wav data chunk before fmt: " + path.string());
      if (channels != 1) throw std::runtime_error("only mono wav supported: " + path.string());
      if (bits != 16) throw std::runtime_error("only 16-bit PCM wav supported: " + path.string());
      const std::size_t n = chunk_size / 2;
      samples.resize(n);
      for (std::size_t i = 0; i < n; ++i) {
        const auto raw = static_cast<std::int16_t>(read_le<std::uint16_t>(in));
        samples[i] = static_cast<float>(raw) / 32768.0f;
      }
      have_data = true;
    } else {
      in.seekg(chunk_size + (chunk_size & 1), std::ios::cur);
    }
  }
  if (!have_data) throw std::runtime_error("wav file has no data chunk: " + path.string());
  if (rate != features::kSampleRate) throw std::invalid_argument("unsupported sample rate");
  return features::Waveform{std::move(samples), rate};
}

void write_wav(const std::filesystem::path& path, const features::Waveform& w) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write wav file: " + path.string());
  const auto n = static_cast<std::uint32_t>(w.samples.size());
  out.write("RIFF", 4);
  write_le<std::uint32_t>(out, 36 + 2 * n);
  out.write("WAVE", 4);
  out.write("fmt ", 4);
  write_le<std::uint32_t>(out, 16);
  write_le<std::uint16_t>(out, 1);  // PCM
  write_le<std::uint16_t>(out, 1);  // mono
  write_le<std::uint32_t>(out, static_cast<std::uint32_t>(w.sample_rate));
  write_le<std::uint32_t>(out, static_cast<std::uint32_t>(w.sample_rate) * 2);
  write_le<std::uint16_t>(out, 2);
  write_le<std::uint16_t>(out, 16);
  out.write("data", 4);
  write_le<std::uint32_t>(out, 2 * n);
  for (float s : w.samples) {
    const float clamped = std::max(-1.0f, std::min(1.0f, s));
    write_le<std::uint16_t>(out, static_cast<std::uint16_t>(
                                     static_cast<std::int16_t>(std::lrint(clamped * 32767.0f))));
  }
}

features::Spectrogram read_fbank_cache(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open fbank cache: " + path.string());
  if (read_le<std::uint32_t>(in) != kFbankMagic)
    throw std::runtime_error("bad fbank cache magic: " + path.string());
  const auto rows = static_cast<std::int64_t>(read_le<std::uint32_t>(in));
  const auto cols = static_cast<std::int64_t>(read_le<std::uint32_t>(in));
  Tensor t({rows, cols});
  for (std::int64_t i = 0; i < t.numel(); ++i) {
    const auto bits = read_le<std::uint32_t>(in);
    float f;
    std::memcpy(&f, &bits, 4);
    t[i] = f;
  }
  if (!in) throw std::runtime_error("truncated fbank cache: " + path.string());
  return features::Spectrogram{std::move(t)};
}

void write_fbank_cache(const std::filesystem::path& path, const features::Spectrogram& spec) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write fbank cache: " + path.string());
  write_le<std::uint32_t>(out, kFbankMagic);
  write_le<std::uint32_t>(out, static_cast<std::uint32_t>(spec.bins()));
  write_le<std::uint32_t>(out, static_cast<std::uint32_t>(spec.frames()));
  for (std::int64_t i = 0; i < spec.values.numel(); ++i) {
    std::uint32_t bits;
    std::memcpy(&bits, &spec.values[i], 4);
    write_le<std::uint32_t>(out, bits);
  }
}

std::vector<ManifestEntry> read_manifest(const std::filesystem::path& csv) {
  std::ifstream in(csv);
  if (!in) throw std::runtime_error("cannot open manifest: " + csv.string());
  std::string line;
  if (!std::getline(in, line)) throw std::runtime_error("empty manifest: " + csv.string());
  if (line.ends_with('\r')) line.pop_back();
  if (line != "path,label_ids,fold")
    throw std::runtime_error("manifest header must be 'path,label_ids,fold', got: " + line);

  std::vector<ManifestEntry> entries;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.ends_with('\r')) line.pop_back();
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string path, ids, fold;
    std::getline(ss, path, ',');
    std::getline(ss, ids, ',');
    std::getline(ss, fold, ',');
    ManifestEntry e;
    e.path = path;
    std::stringstream idstream(ids);
    std::string id;
    while (std::getline(idstream, id, ';'))
      if (!id.empty()) e.label_ids.push_back(std::stoi(id));
    if (e.label_ids.empty())
      throw std::runtime_error("manifest line " + std::to_string(lineno) + " has no labels");
    if (!fold.empty()) e.fold = std::stoi(fold);
    entries.push_back(std::move(e));
  }
  return entries;
}

void write_manifest(const std::filesystem::path& csv, const std::vector<ManifestEntry>& entries) {
  std::ofstream out(csv);
  if (!out) throw std::runtime_error("cannot write manifest: " + csv.string());
  out << "path,label_ids,fold\n";
  for (const auto& e : entries) {
    out << e.path << ',';
    for (std::size_t i = 0; i < e.label_ids.size(); ++i) {
      if (i) out << ';';
      out << e.label_ids[i];
    }
    out << ',';
    if (e.fold) out << *e.fold;
    out << '\n';
  }
}

Dataset open_dataset(const std::filesystem::path& manifest_csv, features::Task task,
                     int num_classes, std::int64_t frames) {
  Dataset ds;
  ds.root = manifest_csv.parent_path();
  ds.entries = read_manifest(manifest_csv);
  ds.task = task;
  ds.num_classes = num_classes;
  ds.frames = frames;
  for (const auto& e : ds.entries)
    for (int id : e.label_ids)
      if (id < 0 || id >= num_classes)
        throw std::runtime_error("label id " + std::to_string(id) + " out of range in " + e.path);
  if (task == features::Task::kSingleLabel)
    for (const auto& e : ds.entries)
      if (e.label_ids.size() != 1)
        throw std::runtime_error("single-label dataset has multi-label entry: " + e.path);
  return ds;
}

std::pair<features::Spectrogram, features::LabelTarget> Dataset::load(std::size_t i) const {
  const auto& e = entries.at(i);
  const auto full = root / e.path;
  features::Spectrogram spec;
  if (full.extension() == ".fbk") {
    spec = read_fbank_cache(full);
  } else {
    spec = features::compute_fbank(read_wav(full));
  }
  spec = features::pad_or_trim(std::move(spec), frames);
  features::LabelTarget label;
  label.task = task;
  label.probs.assign(static_cast<std::size_t>(num_classes), 0.0f);
  for (int id : e.label_ids) label.probs[static_cast<std::size_t>(id)] = 1.0f;
  return {std::move(spec), std::move(label)};
}

}  // namespace cmkd::data
