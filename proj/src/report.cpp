#include "convprobe/report.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>

#include "convprobe/error.hpp"
#include "convprobe/io.hpp"

namespace convprobe {

namespace {

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

std::string px(double v) {
  std::string s = fmt("%.2f", v);
  if (s == "-0.00") s = "0.00";
  return s;
}

std::string latex_escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    if (c == '_' || c == '&' || c == '%' || c == '#' || c == '$') out += '\\';
    out += c;
  }
  return out;
}

std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

std::vector<std::string> csv_split_quoted(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    char c = line[i];
    if (quoted) {
      if (c == '"' && i + 1 < line.size() && line[i + 1] == '"') {
        cur += '"';
        ++i;
      } else if (c == '"') {
        quoted = false;
      } else {
        cur += c;
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      out.push_back(cur);
      cur.clear();
    } else {
      cur += c;
    }
  }
  if (quoted) throw FormatError("table csv: unterminated quote");
  out.push_back(cur);
  return out;
}

double parse_cell(const std::string& s) {
  if (s == "< 0.0001") return 0.0;
  std::size_t used = 0;
  double v = 0;
  try {
    v = std::stod(s, &used);
  } catch (const std::exception&) {
    throw FormatError("table csv: bad number '" + s + "'");
  }
  if (used != s.size()) throw FormatError("table csv: bad number '" + s + "'");
  return v;
}

struct Row4 {
  std::string name;
  std::string a, b, c, p;
};

std::vector<Row4> parametric_cells(const TestReport& r) {
  std::vector<Row4> rows;
  for (const auto& x : r.parametric)
    rows.push_back({x.name, format_fixed4(x.estimate), format_fixed4(x.se), format_fixed4(x.t), format_p(x.p)});
  return rows;
}

std::vector<Row4> smooth_cells(const TestReport& r) {
  std::vector<Row4> rows;
  for (const auto& x : r.smooth)
    rows.push_back({x.name, format_fixed4(x.edf), format_fixed4(x.ref_df), format_fixed4(x.F), format_p(x.p)});
  return rows;
}

const char* kParamHeader = "A. parametric coefficients & Estimate & Std. Error & t-value & p-value";
const char* kSmoothHeader = "B. smooth terms & edf & Ref.df & F-value & p-value";

std::string join_row(const Row4& r, const std::string& name, const std::string& p) {
  return name + " & " + r.a + " & " + r.b + " & " + r.c + " & " + p;
}

struct Frame {
  double width, height, left, right, top, bottom;
  double x0, x1, y0, y1;
  double x(double v) const { return left + (v - x0) / (x1 - x0) * (width - left - right); }
  double y(double v) const { return top + (y1 - v) / (y1 - y0) * (height - top - bottom); }
};

std::string svg_open(double w, double h) {
  return "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" + px(w) + "\" height=\"" + px(h) +
         "\" viewBox=\"0 0 " + px(w) + " " + px(h) + "\" font-family=\"sans-serif\" font-size=\"11\">\n"
         "<rect x=\"0\" y=\"0\" width=\"" + px(w) + "\" height=\"" + px(h) + "\" fill=\"white\"/>\n";
}

std::string xml_escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '&': out += "&amp;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

std::string text(double x, double y, const std::string& s, const char* anchor = "start") {
  return "<text x=\"" + px(x) + "\" y=\"" + px(y) + "\" text-anchor=\"" + anchor + "\">" + xml_escape(s) +
         "</text>\n";
}

std::string line(double x0, double y0, double x1, double y1, const std::string& attrs) {
  return "<line x1=\"" + px(x0) + "\" y1=\"" + px(y0) + "\" x2=\"" + px(x1) + "\" y2=\"" + px(y1) + "\" " +
         attrs + "/>\n";
}

std::string points(const Frame& f, std::span<const double> xs, std::span<const double> ys) {
  std::string s;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    if (i) s += ' ';
    s += px(f.x(xs[i])) + "," + px(f.y(ys[i]));
  }
  return s;
}

std::string band(const Frame& f, std::span<const double> xs, std::span<const double> lo,
                 std::span<const double> hi, const std::string& attrs) {
  std::string s = "<polygon " + attrs + " points=\"";
  for (std::size_t i = 0; i < xs.size(); ++i) s += px(f.x(xs[i])) + "," + px(f.y(hi[i])) + " ";
  for (std::size_t i = xs.size(); i-- > 0;) {
    s += px(f.x(xs[i])) + "," + px(f.y(lo[i]));
    if (i) s += ' ';
  }
  return s + "\"/>\n";
}

std::string axes(const Frame& f, const std::string& xlabel, const std::string& ylabel) {
  std::string s;
  double bx = f.height - f.bottom;
  s += line(f.left, bx, f.width - f.right, bx, "stroke=\"black\"");
  s += line(f.left, f.top, f.left, bx, "stroke=\"black\"");
  for (int i = 0; i <= 4; ++i) {
    double v = f.x0 + (f.x1 - f.x0) * i / 4.0;
    s += line(f.x(v), bx, f.x(v), bx + 4, "stroke=\"black\"");
    s += text(f.x(v), bx + 16, format_g(v, 4), "middle");
    double w = f.y0 + (f.y1 - f.y0) * i / 4.0;
    s += line(f.left - 4, f.y(w), f.left, f.y(w), "stroke=\"black\"");
    s += text(f.left - 6, f.y(w) + 4, format_g(w, 3), "end");
  }
  s += text((f.left + f.width - f.right) / 2, f.height - 6, xlabel, "middle");
  s += "<text x=\"14\" y=\"" + px((f.top + bx) / 2) + "\" text-anchor=\"middle\" transform=\"rotate(-90 14 " +
       px((f.top + bx) / 2) + ")\">" + xml_escape(ylabel) + "</text>\n";
  return s;
}

const char* kPalette[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e",
                          "#8c564b", "#e377c2", "#17becf", "#7f7f7f", "#bcbd22"};

void widen(double& lo, double& hi) {
  if (!(hi > lo)) {
    lo -= 1;
    hi += 1;
    return;
  }
  double pad = 0.05 * (hi - lo);
  lo -= pad;
  hi += pad;
}

std::vector<double> normalized(std::span<const double> v) {
  double m = 0;
  for (double x : v) m = std::max(m, std::fabs(x));
  std::vector<double> out(v.begin(), v.end());
  if (m > 0)
    for (double& x : out) x /= m;
  return out;
}

}  // namespace

TableStyle parse_table_style(const std::string& s) {
  if (s == "text") return TableStyle::text;
  if (s == "csv") return TableStyle::csv;
  if (s == "latex") return TableStyle::latex;
  throw SpecError("unknown table style '" + s + "' (text, csv, latex)");
}

std::string format_fixed4(double v) {
  std::string s = fmt("%.4f", v);
  if (s == "-0.0000") s = "0.0000";
  return s;
}

std::string format_p(double p) { return p < 1e-4 ? "< 0.0001" : format_fixed4(p); }

std::string render_table(const TestReport& report, TableStyle style) {
  if (report.parametric.empty() && report.smooth.empty())
    throw PreconditionError("render_table: empty report");
  auto prows = parametric_cells(report);
  auto srows = smooth_cells(report);
  std::string out;
  switch (style) {
    case TableStyle::text:
      out += std::string(kParamHeader) + "\n";
      for (const auto& r : prows) out += join_row(r, r.name, r.p) + "\n";
      out += "\n" + std::string(kSmoothHeader) + "\n";
      for (const auto& r : srows) out += join_row(r, r.name, r.p) + "\n";
      break;
    case TableStyle::csv:
      out += "section,term,estimate_or_edf,se_or_ref_df,statistic,p_value\n";
      for (const auto& r : prows)
        out += "parametric," + csv_field(r.name) + "," + r.a + "," + r.b + "," + r.c + "," + r.p + "\n";
      for (const auto& r : srows)
        out += "smooth," + csv_field(r.name) + "," + r.a + "," + r.b + "," + r.c + "," + r.p + "\n";
      break;
    case TableStyle::latex: {
      auto lp = [](const std::string& p) { return p.rfind("< ", 0) == 0 ? "$<$" + p.substr(1) : p; };
      out += "\\begin{tabular}{lrrrr}\n   \\hline \\hline\n";
      out += std::string(kParamHeader) + " \\\\  \\hline\n";
      for (const auto& r : prows) out += "  " + join_row(r, latex_escape(r.name), lp(r.p)) + " \\\\ \n";
      out += "   \\hline\n";
      out += std::string(kSmoothHeader) + " \\\\  \\hline\n";
      for (const auto& r : srows) out += "  " + join_row(r, latex_escape(r.name), lp(r.p)) + " \\\\ \n";
      out += "   \\hline \\hline\n\\end{tabular}\n";
      break;
    }
  }
  return out;
}

void render_table(const TestReport& report, TableStyle style, const std::filesystem::path& out) {
  write_file_atomic(out, render_table(report, style));
}

TestReport parse_table_csv(const std::string& csv_text) {
  auto lines = split_lines(csv_text);
  if (lines.empty() || lines[0] != "section,term,estimate_or_edf,se_or_ref_df,statistic,p_value")
    throw FormatError("table csv: missing header");
  TestReport r;
  for (std::size_t i = 1; i < lines.size(); ++i) {
    auto f = csv_split_quoted(lines[i]);
    if (f.size() != 6) throw FormatError("table csv: line " + std::to_string(i + 1) + " has wrong field count");
    double a = parse_cell(f[2]), b = parse_cell(f[3]), c = parse_cell(f[4]), p = parse_cell(f[5]);
    if (f[0] == "parametric")
      r.parametric.push_back({f[1], a, b, c, p});
    else if (f[0] == "smooth")
      r.smooth.push_back({f[1], a, b, c, p});
    else
      throw FormatError("table csv: unknown section '" + f[0] + "'");
  }
  return r;
}

std::string render_layer_plot(const LayerPlotInput& in) {
  const std::size_t len = in.waveform.size();
  if (len == 0) throw PreconditionError("layer plot: empty waveform");
  for (const auto& ls : in.layers)
    if (ls.token_id != in.token_id)
      throw PreconditionError("layer plot: series from token '" + ls.token_id + "' mixed with '" + in.token_id + "'");

  struct Trace {
    std::string label;
    std::vector<double> x, y;
  };
  std::vector<Trace> traces;
  Trace w{"waveform", {}, {}};
  std::vector<double> wave(in.waveform.begin(), in.waveform.end());
  w.y = normalized(wave);
  for (std::size_t i = 0; i < len; ++i) w.x.push_back(static_cast<double>(i));
  traces.push_back(std::move(w));
  for (const auto& ls : in.layers) {
    Trace t{"Conv" + std::to_string(ls.layer_index), {}, {}};
    std::vector<double> up = ls.upsampled.size() == len ? ls.upsampled : upsample_linear(ls.values, len);
    t.y = normalized(up);
    t.x = traces[0].x;
    traces.push_back(std::move(t));
  }
  {
    Trace t{"logits", {}, {}};
    std::vector<double> lg(in.logits.begin(), in.logits.end());
    auto ny = normalized(lg);
    double seg = static_cast<double>(len) / static_cast<double>(std::max<std::size_t>(ny.size(), 1));
    for (std::size_t c = 0; c < ny.size(); ++c) {
      t.x.push_back(seg * static_cast<double>(c));
      t.y.push_back(ny[c]);
      t.x.push_back(seg * static_cast<double>(c + 1));
      t.y.push_back(ny[c]);
    }
    traces.push_back(std::move(t));
  }

  const double unit = 40.0;
  const double offset = 1.5;
  const double n = static_cast<double>(traces.size());
  Frame f{900, 40 + 30 + unit * (offset * (n - 1) + 2), 80, 20, 30, 40,
          0, static_cast<double>(len), -offset * (n - 1) - 1, 1};
  std::string s = svg_open(f.width, f.height);
  s += "<g class=\"layer-plot\" data-token=\"" + xml_escape(in.token_id) + "\" data-x-extent=\"" +
       std::to_string(len) + "\" data-offset=\"1.5\">\n";
  s += text(f.left, 18, "token " + in.token_id);
  double bx = f.height - f.bottom;
  s += line(f.left, bx, f.width - f.right, bx, "stroke=\"black\"");
  for (int i = 0; i <= 4; ++i) {
    double v = f.x0 + (f.x1 - f.x0) * i / 4.0;
    s += line(f.x(v), bx, f.x(v), bx + 4, "stroke=\"black\"");
    s += text(f.x(v), bx + 16, format_g(v, 6), "middle");
  }
  s += text((f.left + f.width - f.right) / 2, f.height - 6, "sample", "middle");
  for (std::size_t k = 0; k < traces.size(); ++k) {
    double base = -offset * static_cast<double>(k);
    std::vector<double> ys(traces[k].y.size());
    for (std::size_t i = 0; i < ys.size(); ++i) ys[i] = base + traces[k].y[i];
    s += line(f.x(f.x0), f.y(base), f.x(f.x1), f.y(base), "stroke=\"#cccccc\" stroke-width=\"0.5\"");
    s += text(f.left - 6, f.y(base) + 4, traces[k].label, "end");
    s += "<polyline class=\"trace\" data-label=\"" + traces[k].label +
         "\" fill=\"none\" stroke=\"" + kPalette[k % 10] + "\" stroke-width=\"0.8\" points=\"" +
         points(f, traces[k].x, ys) + "\"/>\n";
  }
  s += "</g>\n</svg>\n";
  return s;
}

std::vector<PredictionCurve> prediction_curves(const GammFit& fit, const std::vector<std::string>& levels,
                                               std::size_t n) {
  std::vector<PredictionCurve> out;
  auto grid = linspace(fit.x_min, fit.x_max, n);
  for (const auto& lv : levels) {
    std::vector<std::string> lvs(grid.size(), lv);
    out.push_back({lv, grid, predict_with_ci(fit, lvs, grid)});
  }
  return out;
}

std::string render_prediction_plot(const std::vector<PredictionCurve>& curves, const std::string& title) {
  if (curves.empty()) throw PreconditionError("prediction plot: no curves");
  double x0 = curves[0].grid.front(), x1 = curves[0].grid.back();
  double lo = curves[0].pred.lower.front(), hi = lo;
  for (const auto& c : curves) {
    x0 = std::min(x0, c.grid.front());
    x1 = std::max(x1, c.grid.back());
    for (double v : c.pred.lower) lo = std::min(lo, v);
    for (double v : c.pred.upper) hi = std::max(hi, v);
  }
  if (!(x1 > x0)) x1 = x0 + 1;
  widen(lo, hi);
  Frame f{820, 520, 70, 150, 40, 50, x0, x1, lo, hi};
  std::string s = svg_open(f.width, f.height);
  s += text(f.left, 20, title);
  s += axes(f, "time", "predicted value");
  for (std::size_t k = 0; k < curves.size(); ++k) {
    const auto& c = curves[k];
    std::string col = kPalette[k % 10];
    s += band(f, c.grid, c.pred.lower, c.pred.upper,
              "class=\"band\" fill=\"" + col + "\" fill-opacity=\"0.15\" stroke=\"none\"");
    s += "<polyline class=\"curve\" data-label=\"" + xml_escape(c.label) + "\" fill=\"none\" stroke=\"" + col +
         "\" stroke-width=\"1.5\" points=\"" + points(f, c.grid, c.pred.mean) + "\"/>\n";
    double ly = f.top + 14 * static_cast<double>(k);
    s += line(f.width - f.right + 10, ly, f.width - f.right + 30, ly, "stroke=\"" + col + "\" stroke-width=\"2\"");
    s += text(f.width - f.right + 34, ly + 4, c.label);
  }
  s += "</svg>\n";
  return s;
}

std::string render_diff_plot(const DifferenceCurve& c, const std::string& title) {
  if (c.grid.empty()) throw PreconditionError("diff plot: empty grid");
  double lo = 0, hi = 0;
  for (double v : c.lower) lo = std::min(lo, v);
  for (double v : c.upper) hi = std::max(hi, v);
  widen(lo, hi);
  double x0 = c.grid.front(), x1 = c.grid.back();
  if (!(x1 > x0)) x1 = x0 + 1;
  Frame f{820, 420, 70, 20, 40, 50, x0, x1, lo, hi};
  std::string s = svg_open(f.width, f.height);
  s += text(f.left, 20, title);
  for (const auto& r : c.significant_regions) {
    double a = f.x(r.begin), b = f.x(r.end);
    s += "<rect class=\"region\" data-begin=\"" + format_g(r.begin, 17) + "\" data-end=\"" + format_g(r.end, 17) +
         "\" x=\"" + px(a) + "\" y=\"" + px(f.top) + "\" width=\"" + px(b - a) + "\" height=\"" +
         px(f.height - f.top - f.bottom) + "\" fill=\"#f4a582\" fill-opacity=\"0.4\" stroke=\"none\"/>\n";
  }
  s += axes(f, "time", "difference");
  s += band(f, c.grid, c.lower, c.upper, "class=\"band\" fill=\"#4d4d4d\" fill-opacity=\"0.2\" stroke=\"none\"");
  s += line(f.x(x0), f.y(0), f.x(x1), f.y(0), "class=\"zero\" stroke=\"black\" stroke-dasharray=\"4 3\"");
  s += "<polyline class=\"curve\" fill=\"none\" stroke=\"black\" stroke-width=\"1.5\" points=\"" +
       points(f, c.grid, c.diff) + "\"/>\n";
  s += "</svg>\n";
  return s;
}

std::string difference_csv(const DifferenceCurve& c) {
  std::string out = "x,diff,lower,upper,significant\n";
  for (std::size_t i = 0; i < c.grid.size(); ++i) {
    bool sig = c.lower[i] > 0 || c.upper[i] < 0;
    out += format_g(c.grid[i], 10) + "," + format_g(c.diff[i], 10) + "," + format_g(c.lower[i], 10) + "," +
           format_g(c.upper[i], 10) + "," + (sig ? "1" : "0") + "\n";
  }
  return out;
}

std::string regions_csv(const std::vector<Region>& regions) {
  std::string out = "begin,end\n";
  for (const auto& r : regions) out += format_g(r.begin, 17) + "," + format_g(r.end, 17) + "\n";
  return out;
}

void to_json(nlohmann::json& j, const RunManifest& m) {
  j = nlohmann::json{{"command", m.command},         {"config", m.config},
                     {"inputs", m.inputs},           {"outputs", m.outputs},
                     {"seed", m.seed},               {"tool_version", m.tool_version},
                     {"wall_seconds", m.wall_seconds}};
}

void from_json(const nlohmann::json& j, RunManifest& m) {
  m.command = j.at("command").get<std::string>();
  m.config = j.at("config");
  m.inputs = j.at("inputs").get<std::vector<std::string>>();
  m.outputs = j.at("outputs").get<std::vector<std::string>>();
  m.seed = j.at("seed").get<std::uint64_t>();
  m.tool_version = j.at("tool_version").get<std::string>();
  m.wall_seconds = j.at("wall_seconds").get<double>();
}

RunRecorder::RunRecorder(std::string command, std::uint64_t seed, std::string tool_version)
    : start_(std::chrono::steady_clock::now()) {
  manifest_.command = std::move(command);
  manifest_.seed = seed;
  manifest_.tool_version = std::move(tool_version);
}

void RunRecorder::input(const std::filesystem::path& p) { manifest_.inputs.push_back(p.string()); }

void RunRecorder::write(const std::filesystem::path& p, const std::string& bytes) {
  write_file_atomic(p, bytes);
  output(p);
}

void RunRecorder::output(const std::filesystem::path& p) {
  auto s = p.string();
  if (std::find(manifest_.outputs.begin(), manifest_.outputs.end(), s) == manifest_.outputs.end())
    manifest_.outputs.push_back(s);
}

void RunRecorder::finish(const std::filesystem::path& manifest_path) {
  manifest_.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
  nlohmann::json j = manifest_;
  write_file_atomic(manifest_path, j.dump(2) + "\n");
}

}  // namespace convprobe
