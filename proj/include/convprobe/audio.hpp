#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

namespace convprobe {

struct PhoneInterval {
  std::string phone;
  std::size_t start_sample = 0;  // index into the padded waveform
  std::size_t end_sample = 0;    // exclusive
  bool operator==(const PhoneInterval&) const = default;
};

struct AudioToken {
  std::string token_id;
  std::string word;
  std::vector<float> samples;
  std::size_t sample_rate = 16000;
  std::vector<PhoneInterval> intervals;
  bool normalized = false;  // samples already divided by the PCM full scale
};

struct CorpusSplit {
  std::vector<AudioToken> train;
  std::vector<AudioToken> test;
  std::uint64_t seed = 0;
};

enum class WavEncoding { pcm8, pcm16, float32 };

// Mono PCM (8-bit unsigned, 16-bit signed) or 32-bit float WAV. Integer data
// is divided by its full scale; the token id is the file stem.
AudioToken load_wav(const std::filesystem::path& path);
void write_wav(const std::filesystem::path& path, std::span<const float> samples,
               std::size_t sample_rate, WavEncoding enc = WavEncoding::pcm16);

// Divides raw integer-scaled samples by full_scale once; throws if the token
// is already normalized.
void normalize_full_scale(AudioToken& token, double full_scale);

std::size_t left_pad_samples(std::size_t sample_rate);

// 25 ms of leading zeros, raw, then trailing zeros up to target_len.
AudioToken pad_token(std::span<const float> raw, std::size_t sample_rate, std::size_t target_len);

// Per-class split. Train counts are apportioned by largest remainder so the
// overall train size is round(ratio * N) and each class is within one token
// of ratio * n_class.
CorpusSplit split_corpus(const std::vector<AudioToken>& tokens, double ratio, std::uint64_t seed);

struct ClassTemplate {
  std::string word;
  double tone1_hz = 0;
  double noise_center_hz = 0;
  double noise_bandwidth_hz = 0;
  double tone2_hz = 0;
  std::string noise_phone;  // label of the noise segment interval
};

// Each token is tone1 -> band-limited noise -> tone2. Durations are jittered
// by up to 10%, amplitude by up to 20%, and tone phases are random.
struct SynthConfig {
  std::size_t sample_rate = 16000;
  std::size_t target_len = 4096;
  std::size_t base_duration = 2400;  // samples before jitter
  double tone1_fraction = 0.4;
  double noise_fraction = 0.3;       // remaining fraction is tone2
  double amplitude = 0.5;
  std::size_t noise_partials = 48;
  std::vector<ClassTemplate> templates;

  // n_classes distinct templates (n_classes <= 16).
  static SynthConfig standard(std::size_t n_classes);
  // Classes 0 and 1 share both tones and differ only in the noise band.
  static SynthConfig contrast(std::size_t n_classes);
};

void to_json(nlohmann::json& j, const ClassTemplate& t);
void from_json(const nlohmann::json& j, ClassTemplate& t);
void to_json(nlohmann::json& j, const SynthConfig& c);
void from_json(const nlohmann::json& j, SynthConfig& c);

// Unpadded waveform of one class; jitter draws come from rng unless clean.
std::vector<float> synth_raw(const SynthConfig& cfg, std::size_t cls, std::mt19937_64* rng,
                             std::size_t* noise_begin, std::size_t* noise_end);

// tokens_per_class padded tokens per template, each carrying the noise interval.
std::vector<AudioToken> synth_toy_corpus(const SynthConfig& cfg, std::size_t tokens_per_class,
                                         std::uint64_t seed);
std::vector<AudioToken> synth_toy_corpus(std::size_t n_classes, std::size_t tokens_per_class,
                                         std::size_t sample_rate, std::uint64_t seed);

// Annotation CSV: token_id,phone,start_sample,end_sample
std::string annotations_csv(const std::vector<AudioToken>& tokens);
std::vector<std::pair<std::string, PhoneInterval>> parse_annotations(const std::string& csv_text);

// Corpus manifest: {"sample_rate", "input_len", "tokens": [{token_id, word,
// path, split, intervals}]}. Paths are relative to the manifest's directory.
struct ManifestEntry {
  std::string token_id;
  std::string word;
  std::string path;
  std::string split;  // "train", "test" or empty
  std::vector<PhoneInterval> intervals;
};

struct Manifest {
  std::size_t sample_rate = 16000;
  std::size_t input_len = 4096;
  std::uint64_t seed = 0;
  std::vector<ManifestEntry> tokens;
};

void to_json(nlohmann::json& j, const Manifest& m);
void from_json(const nlohmann::json& j, Manifest& m);
Manifest read_manifest(const std::filesystem::path& path);

// Loads every WAV listed, pads to input_len and groups by split.
CorpusSplit load_corpus(const std::filesystem::path& manifest_path);

}  // namespace convprobe
