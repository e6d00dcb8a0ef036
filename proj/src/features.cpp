#include "convprobe/features.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <tuple>

#include "convprobe/error.hpp"
#include "convprobe/io.hpp"

namespace convprobe {

template <typename T>
std::vector<double> average_feature_maps(const BasicTensor3<T>& act) {
  if (act.batch() != 1) {
    throw DimensionError("average_feature_maps expects one token, got " + act.shape_string());
  }
  if (act.channels() == 0) throw DimensionError("average_feature_maps: no feature maps");
  std::vector<double> out(act.time(), 0.0);
  for (std::size_t c = 0; c < act.channels(); ++c) {
    const auto row = act.row(0, c);
    for (std::size_t t = 0; t < out.size(); ++t) out[t] += row[t];
  }
  const double inv = 1.0 / static_cast<double>(act.channels());
  for (double& v : out) v *= inv;
  return out;
}

template std::vector<double> average_feature_maps(const BasicTensor3<float>&);
template std::vector<double> average_feature_maps(const BasicTensor3<double>&);

std::vector<double> upsample_linear(std::span<const double> series, std::size_t target_len) {
  const std::size_t n = series.size();
  if (n < 2) throw PreconditionError("upsample_linear needs at least 2 points");
  if (target_len < n) throw PreconditionError("upsample_linear target shorter than input");
  std::vector<double> out(target_len);
  const double span = static_cast<double>(n - 1);
  const double denom = static_cast<double>(target_len - 1);
  for (std::size_t i = 0; i < target_len; ++i) {
    const double pos = static_cast<double>(i) * span / denom;
    const auto k = std::min(static_cast<std::size_t>(pos), n - 1);
    if (k == n - 1) {
      out[i] = series[n - 1];
      continue;
    }
    const double f = pos - static_cast<double>(k);
    out[i] = series[k] + f * (series[k + 1] - series[k]);
  }
  return out;
}

std::vector<Extraction> extract_tokens(const std::vector<AudioToken>& tokens,
                                       const StackParams<float>& q, const NetConfig& cfg,
                                       bool upsample) {
  constexpr std::size_t chunk = 16;
  std::vector<Extraction> out(tokens.size());
  const std::size_t width = q.outputs;
  for (std::size_t b = 0; b < tokens.size(); b += chunk) {
    const std::size_t e = std::min(tokens.size(), b + chunk);
    Tensor3 x(e - b, 1, cfg.input_len);
    for (std::size_t i = b; i < e; ++i) {
      if (tokens[i].samples.size() != cfg.input_len) {
        throw DimensionError("token " + tokens[i].token_id + " is not padded to input_len");
      }
      std::copy(tokens[i].samples.begin(), tokens[i].samples.end(), x.item(i - b).begin());
    }
    const QNetOutput res = q_network_forward(x, q, cfg, true, false);
    for (std::size_t i = b; i < e; ++i) {
      Extraction& ex = out[i];
      ex.logits.assign(res.logits.begin() + static_cast<long>((i - b) * width),
                       res.logits.begin() + static_cast<long>((i - b + 1) * width));
      for (std::size_t l = 0; l < res.layer_activations.size(); ++l) {
        const Tensor3& act = res.layer_activations[l];
        Tensor3 one(1, act.channels(), act.time());
        std::copy(act.item(i - b).begin(), act.item(i - b).end(), one.flat().begin());
        LayerSeries ls;
        ls.token_id = tokens[i].token_id;
        ls.word = tokens[i].word;
        ls.layer_index = l + 1;
        ls.values = average_feature_maps(one);
        if (upsample && ls.values.size() >= 2) ls.upsampled = upsample_linear(ls.values, cfg.input_len);
        ex.layers.push_back(std::move(ls));
      }
    }
  }
  return out;
}

Extraction extract_all_layers(const AudioToken& token, const StackParams<float>& q,
                              const NetConfig& cfg, bool upsample) {
  return std::move(extract_tokens({token}, q, cfg, upsample).front());
}

IntervalSeries slice_to_interval(const LayerSeries& ls, const PhoneInterval& iv, std::size_t stride) {
  if (iv.start_sample >= iv.end_sample) throw PreconditionError("empty phone interval");
  std::size_t factor = 1;
  for (std::size_t l = 0; l < ls.layer_index; ++l) factor *= stride;
  const std::size_t lo = iv.start_sample / factor;
  const std::size_t hi = std::min((iv.end_sample + factor - 1) / factor, ls.values.size());
  if (lo >= ls.values.size() || iv.end_sample > ls.values.size() * factor) {
    throw PreconditionError("interval lies outside the padded length");
  }
  if (hi <= lo + 1) {
    throw IntervalTooShortError("interval [" + std::to_string(iv.start_sample) + ", " +
                                    std::to_string(iv.end_sample) + ") covers " +
                                    std::to_string(hi - lo) + " point(s) at Conv" +
                                    std::to_string(ls.layer_index),
                                static_cast<int>(ls.layer_index));
  }
  IntervalSeries out;
  out.token_id = ls.token_id;
  out.word = ls.word;
  out.phone = iv.phone;
  out.layer_index = ls.layer_index;
  out.first_index = lo;
  out.values.assign(ls.values.begin() + static_cast<long>(lo), ls.values.begin() + static_cast<long>(hi));
  const double denom = static_cast<double>(hi - lo - 1);
  for (std::size_t i = 0; i < hi - lo; ++i) out.norm_time.push_back(static_cast<double>(i) / denom);
  return out;
}

namespace {

void check_field(const std::string& s) {
  if (s.find_first_of(",\n\r") != std::string::npos) {
    throw FormatError("field '" + s + "' contains a separator");
  }
}

std::vector<std::vector<std::string>> rows_with_header(const std::string& text,
                                                       const std::string& header) {
  const auto lines = split_lines(text);
  if (lines.empty() || lines[0] != header) throw FormatError("expected CSV header " + header);
  std::vector<std::vector<std::string>> rows;
  const std::size_t ncol = split_fields(header).size();
  for (std::size_t i = 1; i < lines.size(); ++i) {
    if (lines[i].empty()) continue;
    auto f = split_fields(lines[i]);
    if (f.size() != ncol) throw FormatError("CSV line " + std::to_string(i + 1) + ": wrong field count");
    rows.push_back(std::move(f));
  }
  return rows;
}

double to_double(const std::string& s) {
  try {
    std::size_t used = 0;
    const double v = std::stod(s, &used);
    if (used != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw FormatError("not a number: '" + s + "'");
  }
}

std::size_t to_index(const std::string& s) {
  const double v = to_double(s);
  if (v < 0 || v != std::floor(v)) throw FormatError("not an index: '" + s + "'");
  return static_cast<std::size_t>(v);
}

// Significant digits written to CSV.
constexpr int kDigits = 10;
constexpr const char* kLayerHeader = "token_id,word,layer,sample_index,value";
constexpr const char* kIntervalHeader = "token_id,word,phone,layer,sample_index,norm_time,value";

}  // namespace

std::string layer_table_csv(const std::vector<LayerSeries>& series) {
  std::string out = std::string(kLayerHeader) + "\n";
  for (const auto& s : series) {
    check_field(s.token_id);
    check_field(s.word);
    const std::string prefix = s.token_id + "," + s.word + "," + std::to_string(s.layer_index) + ",";
    for (std::size_t i = 0; i < s.values.size(); ++i) {
      out += prefix + std::to_string(i) + "," + format_g(s.values[i], kDigits) + "\n";
    }
  }
  return out;
}

std::string interval_table_csv(const std::vector<IntervalSeries>& series) {
  std::string out = std::string(kIntervalHeader) + "\n";
  for (const auto& s : series) {
    check_field(s.token_id);
    check_field(s.word);
    check_field(s.phone);
    const std::string prefix =
        s.token_id + "," + s.word + "," + s.phone + "," + std::to_string(s.layer_index) + ",";
    for (std::size_t i = 0; i < s.values.size(); ++i) {
      out += prefix + std::to_string(s.first_index + i) + "," + format_g(s.norm_time[i], kDigits) + "," +
             format_g(s.values[i], kDigits) + "\n";
    }
  }
  return out;
}

void export_table(const std::vector<LayerSeries>& series, const std::filesystem::path& path) {
  write_file_atomic(path, layer_table_csv(series));
}

void export_table(const std::vector<IntervalSeries>& series, const std::filesystem::path& path) {
  write_file_atomic(path, interval_table_csv(series));
}

std::vector<LayerSeries> read_layer_table(const std::string& csv_text) {
  std::vector<LayerSeries> out;
  std::map<std::pair<std::string, std::size_t>, std::size_t> index;
  for (const auto& f : rows_with_header(csv_text, kLayerHeader)) {
    const std::size_t layer = to_index(f[2]);
    auto [it, fresh] = index.emplace(std::pair{f[0], layer}, out.size());
    if (fresh) out.push_back({f[0], f[1], layer, {}, {}});
    LayerSeries& s = out[it->second];
    if (to_index(f[3]) != s.values.size()) throw FormatError("layer table rows out of order for " + f[0]);
    s.values.push_back(to_double(f[4]));
  }
  return out;
}

std::vector<IntervalSeries> read_interval_table(const std::string& csv_text) {
  std::vector<IntervalSeries> out;
  std::map<std::tuple<std::string, std::string, std::size_t>, std::size_t> index;
  for (const auto& f : rows_with_header(csv_text, kIntervalHeader)) {
    const std::size_t layer = to_index(f[3]);
    auto [it, fresh] = index.emplace(std::tuple{f[0], f[2], layer}, out.size());
    if (fresh) {
      IntervalSeries s;
      s.token_id = f[0];
      s.word = f[1];
      s.phone = f[2];
      s.layer_index = layer;
      s.first_index = to_index(f[4]);
      out.push_back(std::move(s));
    }
    IntervalSeries& s = out[it->second];
    s.values.push_back(to_double(f[6]));
    s.norm_time.push_back(to_double(f[5]));
  }
  return out;
}

}  // namespace convprobe
