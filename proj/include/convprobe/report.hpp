#pragma once

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "convprobe/features.hpp"
#include "convprobe/gamm.hpp"

namespace convprobe {

enum class TableStyle { text, csv, latex };

TableStyle parse_table_style(const std::string& s);

// Fixed 4 decimals; negative zero prints as 0.0000.
std::string format_fixed4(double v);
// "< 0.0001" below 1e-4, else fixed 4 decimals.
std::string format_p(double p);

// Text style is ampersand separated without markup; latex wraps the same
// rows in a tabular and writes "$<$" for the small-p marker.
std::string render_table(const TestReport& report, TableStyle style);
void render_table(const TestReport& report, TableStyle style, const std::filesystem::path& out);

// Inverse of the csv style. Values come back at 4 decimals; "< 0.0001" reads
// as 0.
TestReport parse_table_csv(const std::string& csv_text);

struct LayerPlotInput {
  std::string token_id;
  std::vector<float> waveform;
  std::vector<LayerSeries> layers;  // ascending layer_index
  std::vector<float> logits;
};

// Waveform on top, one trace per layer, logits last. Each trace is scaled to
// unit max-abs and offset by 1.5 units; the x axis is in input samples.
std::string render_layer_plot(const LayerPlotInput& in);

struct PredictionCurve {
  std::string label;
  std::vector<double> grid;
  Prediction pred;
};

// One curve per level over n points spanning the fitted covariate range.
std::vector<PredictionCurve> prediction_curves(const GammFit& fit, const std::vector<std::string>& levels,
                                               std::size_t n);

std::string render_prediction_plot(const std::vector<PredictionCurve>& curves, const std::string& title);
std::string render_diff_plot(const DifferenceCurve& curve, const std::string& title);

std::string difference_csv(const DifferenceCurve& curve);
std::string regions_csv(const std::vector<Region>& regions);

struct RunManifest {
  std::string command;
  nlohmann::json config = nlohmann::json::object();
  std::vector<std::string> inputs;
  std::vector<std::string> outputs;
  std::uint64_t seed = 0;
  std::string tool_version;
  double wall_seconds = 0;
};

void to_json(nlohmann::json& j, const RunManifest& m);
void from_json(const nlohmann::json& j, RunManifest& m);

// Collects outputs as they are written and writes the manifest last.
class RunRecorder {
 public:
  RunRecorder(std::string command, std::uint64_t seed, std::string tool_version);

  void config(const nlohmann::json& c) { manifest_.config = c; }
  void input(const std::filesystem::path& p);
  void write(const std::filesystem::path& p, const std::string& bytes);
  // For files produced by other writers (already atomic).
  void output(const std::filesystem::path& p);
  const RunManifest& manifest() const { return manifest_; }
  void finish(const std::filesystem::path& manifest_path);

 private:
  RunManifest manifest_;
  std::chrono::steady_clock::time_point start_;
};

}  // namespace convprobe
