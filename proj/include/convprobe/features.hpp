#pragma once

#include <cstddef>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "convprobe/audio.hpp"
#include "convprobe/network.hpp"

namespace convprobe {

struct LayerSeries {
  std::string token_id;
  std::string word;
  std::size_t layer_index = 0;   // 1-based conv layer
  std::vector<double> values;    // native resolution
  std::vector<double> upsampled; // display view of length input_len, or empty
};

struct IntervalSeries {
  std::string token_id;
  std::string word;
  std::string phone;
  std::size_t layer_index = 0;
  std::size_t first_index = 0;   // native index of values[0]
  std::vector<double> values;
  std::vector<double> norm_time; // 0 .. 1, strictly increasing
};

// Channel mean of a (1, C, T) activation: out[t] = (1/C) sum_i act[0, i, t].
template <typename T>
std::vector<double> average_feature_maps(const BasicTensor3<T>& act);

// Linear interpolation at target_len equally spaced positions over [0, L-1].
std::vector<double> upsample_linear(std::span<const double> series, std::size_t target_len);

struct Extraction {
  std::vector<LayerSeries> layers;
  std::vector<float> logits;
};

// Q-network pass with capture on and phase shuffle off.
Extraction extract_all_layers(const AudioToken& token, const StackParams<float>& q,
                              const NetConfig& cfg, bool upsample = true);
// Batched form for many tokens; results are in token order.
std::vector<Extraction> extract_tokens(const std::vector<AudioToken>& tokens,
                                       const StackParams<float>& q, const NetConfig& cfg,
                                       bool upsample = true);

// Native index range [floor(start / stride^l), ceil(end / stride^l)). Fewer
// than two points is an error since the time axis cannot be normalized.
IntervalSeries slice_to_interval(const LayerSeries& ls, const PhoneInterval& iv, std::size_t stride);

// CSV columns: token_id,word,layer,sample_index,value (layer series) or
// token_id,word,phone,layer,sample_index,norm_time,value (interval series).
std::string layer_table_csv(const std::vector<LayerSeries>& series);
std::string interval_table_csv(const std::vector<IntervalSeries>& series);
void export_table(const std::vector<LayerSeries>& series, const std::filesystem::path& path);
void export_table(const std::vector<IntervalSeries>& series, const std::filesystem::path& path);

std::vector<LayerSeries> read_layer_table(const std::string& csv_text);
std::vector<IntervalSeries> read_interval_table(const std::string& csv_text);

}  // namespace convprobe
