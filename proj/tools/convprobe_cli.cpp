#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "convprobe/audio.hpp"
#include "convprobe/error.hpp"
#include "convprobe/features.hpp"
#include "convprobe/gamm.hpp"
#include "convprobe/io.hpp"
#include "convprobe/report.hpp"
#include "convprobe/training.hpp"

#ifndef CONVPROBE_VERSION
#define CONVPROBE_VERSION "0.0.0"
#endif

namespace fs = std::filesystem;
using namespace convprobe;
using nlohmann::json;

namespace {

struct Common {
  std::optional<std::uint64_t> seed;
  std::string config;
  std::string run_manifest;
};

void add_common(CLI::App* app, Common& c) {
  app->add_option("--seed", c.seed, "Random seed (falls back to CONVPROBE_SEED, then 0)");
  app->add_option("--config", c.config, "JSON (or key=value) file whose keys name options of this command");
  app->add_option("--run-manifest", c.run_manifest, "Where to write the run manifest");
}

std::uint64_t resolve_seed(const Common& c) {
  if (c.seed) return *c.seed;
  if (const char* env = std::getenv("CONVPROBE_SEED"); env && *env) {
    try {
      std::size_t used = 0;
      unsigned long long v = std::stoull(env, &used);
      if (used == std::string(env).size()) return v;
    } catch (const std::exception&) {
    }
    throw SpecError(std::string("CONVPROBE_SEED is not an unsigned integer: '") + env + "'");
  }
  return 0;
}

std::string manifest_path(const Common& c, const fs::path& fallback) {
  return c.run_manifest.empty() ? fallback.string() : c.run_manifest;
}

// Values from --config become leading arguments of the subcommand so that
// flags given on the command line take precedence.
std::vector<std::string> config_args(const std::vector<std::string>& args) {
  std::string path;
  for (std::size_t i = 0; i < args.size(); ++i) {
    if (args[i] == "--config" && i + 1 < args.size()) path = args[i + 1];
    if (args[i].rfind("--config=", 0) == 0) path = args[i].substr(9);
  }
  if (path.empty()) return {};
  json j = parse_config_text(read_file(path));
  if (!j.is_object()) throw SpecError("config must be an object");
  std::vector<std::string> out;
  for (const auto& [key, value] : j.items()) {
    std::string name = key;
    for (char& ch : name)
      if (ch == '_') ch = '-';
    if (name == "config") continue;
    if (value.is_boolean()) {
      if (value.get<bool>()) out.push_back("--" + name);
    } else if (value.is_string()) {
      out.push_back("--" + name + "=" + value.get<std::string>());
    } else if (value.is_number()) {
      out.push_back("--" + name + "=" + value.dump());
    } else {
      throw SpecError("config key '" + key + "' must be a string, number or boolean");
    }
  }
  return out;
}

json options_snapshot(const CLI::App* app) {
  json j = json::object();
  for (const CLI::Option* o : app->get_options()) {
    if (o->get_lnames().empty()) continue;
    const std::string& name = o->get_lnames().front();
    if (name == "help" || name == "run-manifest") continue;
    auto r = o->results();
    if (r.empty()) {
      if (!o->get_default_str().empty()) j[name] = o->get_default_str();
      continue;
    }
    j[name] = r.back();
  }
  return j;
}

NetConfig net_from(const std::string& preset, const std::string& code, std::size_t width) {
  NetConfig net;
  if (preset == "desk")
    net = NetConfig::desk_preset();
  else if (preset == "full")
    net = NetConfig::full_preset();
  else
    throw SpecError("unknown preset '" + preset + "' (desk, full)");
  if (code == "categorical")
    net.code.kind = CodeKind::categorical;
  else if (code == "binary")
    net.code.kind = CodeKind::binary;
  else
    throw SpecError("unknown code kind '" + code + "' (categorical, binary)");
  if (width) net.code.width = width;
  net.validate();
  return net;
}

std::vector<AudioToken> select_split(const CorpusSplit& c, const std::string& which) {
  if (which == "train") return c.train;
  if (which == "test") return c.test;
  if (which == "all") {
    auto v = c.train;
    v.insert(v.end(), c.test.begin(), c.test.end());
    std::sort(v.begin(), v.end(), [](const AudioToken& a, const AudioToken& b) { return a.token_id < b.token_id; });
    return v;
  }
  throw SpecError("unknown split '" + which + "' (train, test, all)");
}

std::set<std::size_t> parse_layers(const std::string& spec, std::size_t n_layers) {
  std::set<std::size_t> out;
  if (spec == "all") {
    for (std::size_t l = 1; l <= n_layers; ++l) out.insert(l);
    return out;
  }
  for (const auto& f : split_fields(spec)) {
    std::size_t l = 0;
    try {
      l = std::stoul(f);
    } catch (const std::exception&) {
      throw SpecError("bad layer '" + f + "'");
    }
    if (l < 1 || l > n_layers)
      throw SpecError("layer " + f + " outside 1.." + std::to_string(n_layers));
    out.insert(l);
  }
  return out;
}

// Raw waveform without the left pad and trailing zeros; pad_token restores it
// exactly.
std::vector<float> unpad(const AudioToken& t) {
  std::size_t left = left_pad_samples(t.sample_rate);
  std::size_t end = t.samples.size();
  while (end > left && t.samples[end - 1] == 0.0f) --end;
  return {t.samples.begin() + static_cast<long>(left), t.samples.begin() + static_cast<long>(end)};
}

Manifest manifest_for(const CorpusSplit& split, std::size_t sample_rate, std::size_t input_len,
                      std::uint64_t seed, const std::map<std::string, std::string>& paths) {
  Manifest m;
  m.sample_rate = sample_rate;
  m.input_len = input_len;
  m.seed = seed;
  auto add = [&](const std::vector<AudioToken>& ts, const char* which) {
    for (const auto& t : ts) m.tokens.push_back({t.token_id, t.word, paths.at(t.token_id), which, t.intervals});
  };
  add(split.train, "train");
  add(split.test, "test");
  std::sort(m.tokens.begin(), m.tokens.end(),
            [](const ManifestEntry& a, const ManifestEntry& b) { return a.token_id < b.token_id; });
  return m;
}

std::vector<std::string> split_words(const std::string& s) {
  std::vector<std::string> out;
  for (auto& w : split_fields(s))
    if (!w.empty()) out.push_back(w);
  return out;
}

std::string losses_csv(const std::vector<LossRow>& rows) {
  std::string out = "step,d_loss,g_loss,q_loss\n";
  for (const auto& r : rows)
    out += std::to_string(r.step) + "," + format_g(r.d_loss, 10) + "," + format_g(r.g_loss, 10) + "," +
           format_g(r.q_loss, 10) + "\n";
  return out;
}

std::string eval_csv(const QEvaluation& ev) {
  std::string out = "class,matched_code";
  std::size_t codes = ev.confusion.empty() ? 0 : ev.confusion[0].size();
  for (std::size_t c = 0; c < codes; ++c) out += ",code_" + std::to_string(c);
  out += "\n";
  for (std::size_t i = 0; i < ev.classes.size(); ++i) {
    out += ev.classes[i] + "," + std::to_string(ev.code_for_class[i]);
    for (auto n : ev.confusion[i]) out += "," + std::to_string(n);
    out += "\n";
  }
  out += "accuracy," + format_g(ev.accuracy, 10) + "\n";
  return out;
}

DataTable load_data(const std::string& path, const std::string& layer, const std::string& phone,
                    const std::string& words) {
  DataTable t = read_table(path);
  if (!layer.empty()) {
    if (!t.has("layer")) throw SpecError(path + ": --layer given but the table has no layer column");
    t = filter_rows(t, "layer", layer);
  }
  if (!phone.empty()) {
    if (!t.has("phone")) throw SpecError(path + ": --phone given but the table has no phone column");
    t = filter_rows(t, "phone", phone);
  }
  if (!words.empty()) {
    DataTable keep;
    keep.names = t.names;
    keep.columns.assign(t.names.size(), {});
    std::set<std::string> ws;
    for (auto& w : split_words(words)) ws.insert(w);
    const auto& wc = t.text("word");
    for (std::size_t r = 0; r < t.rows(); ++r)
      if (ws.count(wc[r]))
        for (std::size_t c = 0; c < t.names.size(); ++c) keep.columns[c].push_back(t.columns[c][r]);
    t = std::move(keep);
  }
  if (t.rows() == 0)
    throw PreconditionError(path + ": data has 0 rows after filtering; a fit needs at least one row");
  return t;
}

}  // namespace

int main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  CLI::App app{"Feature-map probing of GAN word classifiers with additive mixed models", "convprobe"};
  app.set_version_flag("--version", CONVPROBE_VERSION);
  app.require_subcommand(1);
  app.option_defaults()->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);

  // synth-data
  Common c_synth;
  std::string synth_out;
  std::size_t synth_classes = 4, synth_per_class = 60, synth_len = 4096, synth_rate = 16000;
  double synth_ratio = 0.8;
  bool synth_contrast = false;
  auto* synth = app.add_subcommand("synth-data", "Write a synthetic word corpus (WAVs, manifest, annotations)");
  synth->add_option("--out", synth_out, "Output directory")->required();
  synth->add_option("--classes", synth_classes, "Number of word classes")->capture_default_str();
  synth->add_option("--per-class", synth_per_class, "Tokens per class")->capture_default_str();
  synth->add_option("--input-len", synth_len, "Padded token length")->capture_default_str();
  synth->add_option("--sample-rate", synth_rate, "Sample rate in Hz")->capture_default_str();
  synth->add_option("--split-ratio", synth_ratio, "Train fraction")->capture_default_str();
  synth->add_flag("--contrast", synth_contrast, "Classes 0 and 1 differ only in the noise segment");
  add_common(synth, c_synth);

  // ingest
  Common c_ingest;
  std::string ing_dir, ing_labels, ing_ann, ing_out;
  std::size_t ing_len = 4096;
  double ing_ratio = 0.8;
  auto* ingest = app.add_subcommand("ingest", "Pad, split and annotate a directory of WAV tokens");
  ingest->add_option("--wav-dir", ing_dir, "Directory of mono WAV files")->required();
  ingest->add_option("--labels", ing_labels, "CSV token_id,word (default: stem up to the last '_')");
  ingest->add_option("--annotations", ing_ann, "CSV token_id,phone,start_sample,end_sample (padded indices)");
  ingest->add_option("--out", ing_out, "Manifest path to write")->required();
  ingest->add_option("--input-len", ing_len, "Padded token length")->capture_default_str();
  ingest->add_option("--split-ratio", ing_ratio, "Train fraction")->capture_default_str();
  add_common(ingest, c_ingest);

  // train
  Common c_train;
  std::string tr_manifest, tr_out, tr_preset = "desk", tr_code = "categorical", tr_resume;
  std::size_t tr_width = 0;
  TrainConfig tc;
  auto* train_cmd = app.add_subcommand("train", "Train generator, critic and Q-network");
  train_cmd->add_option("--manifest", tr_manifest, "Corpus manifest")->required();
  train_cmd->add_option("--out", tr_out, "Output directory")->required();
  train_cmd->add_option("--preset", tr_preset, "desk or full")->capture_default_str();
  train_cmd->add_option("--code", tr_code, "categorical or binary")->capture_default_str();
  train_cmd->add_option("--code-width", tr_width, "Code width (default from preset)");
  train_cmd->add_option("--resume", tr_resume, "Checkpoint to continue from");
  train_cmd->add_option("--steps", tc.steps)->capture_default_str();
  train_cmd->add_option("--batch-size", tc.batch_size)->capture_default_str();
  train_cmd->add_option("--n-critic", tc.n_critic)->capture_default_str();
  train_cmd->add_option("--lambda-gp", tc.lambda_gp)->capture_default_str();
  train_cmd->add_option("--lr-d", tc.lr_d)->capture_default_str();
  train_cmd->add_option("--lr-g", tc.lr_g)->capture_default_str();
  train_cmd->add_option("--lr-q", tc.lr_q)->capture_default_str();
  train_cmd->add_option("--beta1", tc.beta1)->capture_default_str();
  train_cmd->add_option("--beta2", tc.beta2)->capture_default_str();
  train_cmd->add_option("--q-weight", tc.q_weight)->capture_default_str();
  train_cmd->add_option("--checkpoint-interval", tc.checkpoint_interval)->capture_default_str();
  train_cmd->add_option("--eval-interval", tc.eval_interval)->capture_default_str();
  train_cmd->add_option("--collapse-floor", tc.collapse_floor)->capture_default_str();
  train_cmd->add_option("--collapse-warmup", tc.collapse_warmup)->capture_default_str();
  add_common(train_cmd, c_train);

  // eval
  Common c_eval;
  std::string ev_ckpt, ev_manifest, ev_split = "test", ev_out;
  auto* eval_cmd = app.add_subcommand("eval", "Q-network accuracy under the best code-to-class matching");
  eval_cmd->add_option("--checkpoint", ev_ckpt)->required();
  eval_cmd->add_option("--manifest", ev_manifest)->required();
  eval_cmd->add_option("--split", ev_split, "train, test or all")->capture_default_str();
  eval_cmd->add_option("--out", ev_out, "Confusion matrix CSV")->required();
  add_common(eval_cmd, c_eval);

  // extract
  Common c_ext;
  std::string ex_ckpt, ex_manifest, ex_layers = "all", ex_split = "all", ex_out, ex_phone, ex_interval_out;
  auto* extract = app.add_subcommand("extract", "Averaged feature-map series for every token and layer");
  extract->add_option("--checkpoint", ex_ckpt)->required();
  extract->add_option("--manifest", ex_manifest)->required();
  extract->add_option("--layers", ex_layers, "all or a comma list")->capture_default_str();
  extract->add_option("--split", ex_split, "train, test or all")->capture_default_str();
  extract->add_option("--out", ex_out, "Layer series CSV")->required();
  extract->add_option("--phone", ex_phone, "Also slice every layer to intervals with this phone label");
  extract->add_option("--interval-out", ex_interval_out, "Interval series CSV (with --phone)");
  add_common(extract, c_ext);

  // gamm-fit
  Common c_fit;
  std::string gf_data, gf_layer, gf_phone, gf_words, gf_formula, gf_reference, gf_out, gf_report, gf_style = "text",
                                                                                      gf_plot;
  bool gf_gcv = false;
  std::size_t gf_points = 200;
  auto* gfit = app.add_subcommand("gamm-fit", "Fit an additive mixed model to a series table");
  gfit->add_option("--data", gf_data, "CSV table")->required();
  gfit->add_option("--layer", gf_layer, "Keep rows with this layer");
  gfit->add_option("--phone", gf_phone, "Keep rows with this phone");
  gfit->add_option("--words", gf_words, "Keep rows with these words (comma list)");
  gfit->add_option("--formula", gf_formula, "Model formula")->required();
  gfit->add_option("--reference", gf_reference, "Reference level of the factor");
  gfit->add_flag("--gcv", gf_gcv, "Select smoothing parameters by GCV instead of REML");
  gfit->add_option("--out", gf_out, "Fit file")->required();
  gfit->add_option("--report", gf_report, "Test table path");
  gfit->add_option("--style", gf_style, "text, csv or latex")->capture_default_str();
  gfit->add_option("--prediction-plot", gf_plot, "SVG of per-level predictions");
  gfit->add_option("--points", gf_points, "Grid points for plots")->capture_default_str();
  add_common(gfit, c_fit);

  // gamm-test
  Common c_test;
  std::string gt_fit, gt_out, gt_style = "text", gt_plot, gt_words;
  std::size_t gt_points = 200;
  auto* gtest = app.add_subcommand("gamm-test", "Parametric and smooth-term tests of a saved fit");
  gtest->add_option("--fit", gt_fit)->required();
  gtest->add_option("--out", gt_out, "Test table path")->required();
  gtest->add_option("--style", gt_style, "text, csv or latex")->capture_default_str();
  gtest->add_option("--prediction-plot", gt_plot, "SVG of per-level predictions");
  gtest->add_option("--words", gt_words, "Levels to plot (default: all)");
  gtest->add_option("--points", gt_points)->capture_default_str();
  add_common(gtest, c_test);

  // diff-plot
  Common c_diff;
  std::string df_fit, df_a, df_b, df_out, df_csv, df_regions;
  std::size_t df_points = 200;
  double df_level = 0.95;
  auto* diff = app.add_subcommand("diff-plot", "Difference curve of two levels with significant regions");
  diff->add_option("--fit", df_fit)->required();
  diff->add_option("--a", df_a, "First level")->required();
  diff->add_option("--b", df_b, "Second level")->required();
  diff->add_option("--out", df_out, "SVG path")->required();
  diff->add_option("--csv", df_csv, "Curve CSV path");
  diff->add_option("--regions", df_regions, "Significant regions CSV path");
  diff->add_option("--points", df_points)->capture_default_str();
  diff->add_option("--level", df_level, "Band level")->capture_default_str();
  add_common(diff, c_diff);

  // layer-plot
  Common c_lp;
  std::string lp_ckpt, lp_manifest, lp_token, lp_out;
  auto* lplot = app.add_subcommand("layer-plot", "Stacked waveform, layer series and logits of one token");
  lplot->add_option("--checkpoint", lp_ckpt)->required();
  lplot->add_option("--manifest", lp_manifest)->required();
  lplot->add_option("--token", lp_token)->required();
  lplot->add_option("--out", lp_out, "SVG path")->required();
  add_common(lplot, c_lp);

  try {
    if (!args.empty() && args[0].rfind("-", 0) != 0) {
      auto injected = config_args(args);
      args.insert(args.begin() + 1, injected.begin(), injected.end());
    }
    std::vector<std::string> rev(args.rbegin(), args.rend());
    app.parse(rev);
  } catch (const CLI::ParseError& e) {
    int code = app.exit(e);
    if (code == 0) return 0;
    std::cerr << app.help();
    return 1;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n" << app.help();
    return 1;
  }

  try {
    if (synth->parsed()) {
      std::uint64_t seed = resolve_seed(c_synth);
      RunRecorder rec("synth-data", seed, CONVPROBE_VERSION);
      rec.config(options_snapshot(synth));
      SynthConfig sc = synth_contrast ? SynthConfig::contrast(synth_classes) : SynthConfig::standard(synth_classes);
      sc.base_duration = sc.base_duration * synth_rate / sc.sample_rate;
      sc.sample_rate = synth_rate;
      sc.target_len = synth_len;
      auto tokens = synth_toy_corpus(sc, synth_per_class, seed);
      auto split = split_corpus(tokens, synth_ratio, seed);
      fs::path dir = synth_out;
      fs::create_directories(dir / "wav");
      std::map<std::string, std::string> paths;
      for (const auto& t : tokens) {
        std::string rel = "wav/" + t.token_id + ".wav";
        auto raw = unpad(t);
        write_wav(dir / rel, raw, t.sample_rate, WavEncoding::float32);
        rec.output(dir / rel);
        paths[t.token_id] = rel;
      }
      json m = manifest_for(split, synth_rate, synth_len, seed, paths);
      rec.write(dir / "manifest.json", m.dump(2) + "\n");
      rec.write(dir / "annotations.csv", annotations_csv(tokens));
      json sj = sc;
      rec.write(dir / "synth_config.json", sj.dump(2) + "\n");
      rec.finish(manifest_path(c_synth, dir / "run.json"));
      std::cout << tokens.size() << " tokens (" << split.train.size() << " train, " << split.test.size()
                << " test) in " << dir.string() << "\n";
    } else if (ingest->parsed()) {
      std::uint64_t seed = resolve_seed(c_ingest);
      RunRecorder rec("ingest", seed, CONVPROBE_VERSION);
      rec.config(options_snapshot(ingest));
      std::map<std::string, std::string> labels;
      if (!ing_labels.empty()) {
        rec.input(ing_labels);
        auto lines = split_lines(read_file(ing_labels));
        for (std::size_t i = 1; i < lines.size(); ++i) {
          auto f = split_fields(lines[i]);
          if (f.size() != 2) throw FormatError(ing_labels + ": line " + std::to_string(i + 1) + " needs token_id,word");
          labels[f[0]] = f[1];
        }
      }
      std::vector<fs::path> files;
      for (const auto& e : fs::directory_iterator(ing_dir))
        if (e.is_regular_file() && e.path().extension() == ".wav") files.push_back(e.path());
      std::sort(files.begin(), files.end());
      if (files.empty()) throw PreconditionError(ing_dir + ": no .wav files");
      fs::path out = ing_out;
      fs::path base = out.parent_path().empty() ? fs::path(".") : out.parent_path();
      std::vector<AudioToken> tokens;
      std::map<std::string, std::string> paths;
      std::size_t rate = 0;
      for (const auto& f : files) {
        AudioToken raw = load_wav(f);
        rec.input(f);
        if (rate && raw.sample_rate != rate) throw FormatError(f.string() + ": mixed sample rates");
        rate = raw.sample_rate;
        AudioToken t = pad_token(raw.samples, raw.sample_rate, ing_len);
        t.token_id = raw.token_id;
        t.normalized = true;
        if (!labels.empty()) {
          auto it = labels.find(t.token_id);
          if (it == labels.end()) throw FormatError(t.token_id + ": missing from labels");
          t.word = it->second;
        } else {
          auto us = t.token_id.rfind('_');
          t.word = us == std::string::npos ? t.token_id : t.token_id.substr(0, us);
        }
        paths[t.token_id] = fs::relative(fs::absolute(f), fs::absolute(base)).generic_string();
        tokens.push_back(std::move(t));
      }
      if (!ing_ann.empty()) {
        rec.input(ing_ann);
        std::map<std::string, AudioToken*> by_id;
        for (auto& t : tokens) by_id[t.token_id] = &t;
        for (auto& [id, iv] : parse_annotations(read_file(ing_ann))) {
          auto it = by_id.find(id);
          if (it == by_id.end()) throw FormatError(ing_ann + ": unknown token '" + id + "'");
          if (iv.end_sample > ing_len) throw FormatError(ing_ann + ": interval of '" + id + "' exceeds input length");
          it->second->intervals.push_back(iv);
        }
      }
      auto split = split_corpus(tokens, ing_ratio, seed);
      json m = manifest_for(split, rate, ing_len, seed, paths);
      rec.write(out, m.dump(2) + "\n");
      rec.finish(manifest_path(c_ingest, out.string() + ".run.json"));
      std::cout << tokens.size() << " tokens (" << split.train.size() << " train, " << split.test.size()
                << " test)\n";
    } else if (train_cmd->parsed()) {
      std::uint64_t seed = resolve_seed(c_train);
      RunRecorder rec("train", seed, CONVPROBE_VERSION);
      rec.config(options_snapshot(train_cmd));
      rec.input(tr_manifest);
      CorpusSplit corpus = load_corpus(tr_manifest);
      fs::path dir = tr_out;
      fs::create_directories(dir);
      std::vector<LossRow> rows;
      TrainHooks hooks;
      hooks.on_step = [&](const LossRow& r) {
        rows.push_back(r);
        if (r.step % 100 == 0)
          std::cerr << "step " << r.step << " d " << format_g(r.d_loss, 5) << " g " << format_g(r.g_loss, 5)
                    << " q " << format_g(r.q_loss, 5) << "\n";
      };
      hooks.on_checkpoint = [&](const TrainState& s) {
        char name[64];
        std::snprintf(name, sizeof name, "checkpoint_%07zu.bin", s.step);
        save_checkpoint(dir / name, s);
        rec.output(dir / name);
      };
      hooks.on_best = [&](const TrainState& s, double acc) {
        save_checkpoint(dir / "best.bin", s);
        rec.output(dir / "best.bin");
        std::cerr << "held-out accuracy " << format_g(acc, 4) << " at step " << s.step << "\n";
      };
      TrainResult res;
      if (!tr_resume.empty()) {
        rec.input(tr_resume);
        TrainState st = load_checkpoint(tr_resume);
        res = resume(std::move(st), corpus, tc.steps, hooks);
      } else {
        tc.seed = seed;
        NetConfig net = net_from(tr_preset, tr_code, tr_width);
        if (!corpus.train.empty() && corpus.train[0].samples.size() != net.input_len)
          throw SpecError("corpus input_len " + std::to_string(corpus.train[0].samples.size()) +
                          " differs from the network's " + std::to_string(net.input_len));
        res = train(corpus, net, tc, hooks);
      }
      save_checkpoint(dir / "final.bin", res.state);
      rec.output(dir / "final.bin");
      rec.write(dir / "losses.csv", losses_csv(rows));
      auto ev = eval_q_accuracy(corpus.test, res.state.q, res.state.net);
      rec.write(dir / "eval.csv", eval_csv(ev));
      rec.finish(manifest_path(c_train, dir / "run.json"));
      std::cout << "status " << res.message << "; held-out accuracy " << format_g(ev.accuracy, 4) << "\n";
      if (res.status != TrainStatus::completed) return 2;
    } else if (eval_cmd->parsed()) {
      std::uint64_t seed = resolve_seed(c_eval);
      RunRecorder rec("eval", seed, CONVPROBE_VERSION);
      rec.config(options_snapshot(eval_cmd));
      rec.input(ev_ckpt);
      rec.input(ev_manifest);
      TrainState st = load_checkpoint(ev_ckpt);
      auto tokens = select_split(load_corpus(ev_manifest), ev_split);
      auto ev = eval_q_accuracy(tokens, st.q, st.net);
      rec.write(ev_out, eval_csv(ev));
      rec.finish(manifest_path(c_eval, ev_out + ".run.json"));
      std::cout << "accuracy " << format_g(ev.accuracy, 4) << " on " << tokens.size() << " tokens\n";
    } else if (extract->parsed()) {
      std::uint64_t seed = resolve_seed(c_ext);
      RunRecorder rec("extract", seed, CONVPROBE_VERSION);
      rec.config(options_snapshot(extract));
      rec.input(ex_ckpt);
      rec.input(ex_manifest);
      TrainState st = load_checkpoint(ex_ckpt);
      auto tokens = select_split(load_corpus(ex_manifest), ex_split);
      auto layers = parse_layers(ex_layers, st.net.n_layers);
      auto ext = extract_tokens(tokens, st.q, st.net, false);
      std::vector<LayerSeries> series;
      std::vector<IntervalSeries> slices;
      for (std::size_t i = 0; i < ext.size(); ++i)
        for (auto& ls : ext[i].layers) {
          if (!layers.count(ls.layer_index)) continue;
          if (!ex_phone.empty())
            for (const auto& iv : tokens[i].intervals)
              if (iv.phone == ex_phone) slices.push_back(slice_to_interval(ls, iv, st.net.stride));
          series.push_back(std::move(ls));
        }
      rec.write(ex_out, layer_table_csv(series));
      if (!ex_phone.empty()) {
        if (slices.empty()) throw PreconditionError("no token carries an interval labelled '" + ex_phone + "'");
        std::string path = ex_interval_out.empty() ? ex_out + ".intervals.csv" : ex_interval_out;
        rec.write(path, interval_table_csv(slices));
      }
      rec.finish(manifest_path(c_ext, ex_out + ".run.json"));
      std::cout << series.size() << " layer series from " << tokens.size() << " tokens\n";
    } else if (gfit->parsed()) {
      std::uint64_t seed = resolve_seed(c_fit);
      RunRecorder rec("gamm-fit", seed, CONVPROBE_VERSION);
      rec.config(options_snapshot(gfit));
      rec.input(gf_data);
      GammSpec spec = parse_formula(gf_formula);
      if (!gf_reference.empty()) spec.reference = gf_reference;
      if (gf_gcv) spec.criterion = Criterion::gcv;
      DataTable data = load_data(gf_data, gf_layer, gf_phone, gf_words);
      TableStyle style = parse_table_style(gf_style);
      GammFit fit = fit_gamm(spec, data);
      for (const auto& w : fit.warnings) std::cerr << "warning: " << w << "\n";
      save_fit(gf_out, fit);
      rec.output(gf_out);
      TestReport report = test_report(fit);
      std::string table = render_table(report, style);
      if (!gf_report.empty()) rec.write(gf_report, table);
      if (!gf_plot.empty() && !fit.levels.empty())
        rec.write(gf_plot, render_prediction_plot(prediction_curves(fit, fit.levels, gf_points), gf_formula));
      rec.finish(manifest_path(c_fit, gf_out + ".run.json"));
      std::cout << table;
    } else if (gtest->parsed()) {
      std::uint64_t seed = resolve_seed(c_test);
      RunRecorder rec("gamm-test", seed, CONVPROBE_VERSION);
      rec.config(options_snapshot(gtest));
      rec.input(gt_fit);
      TableStyle style = parse_table_style(gt_style);
      GammFit fit = load_fit(gt_fit);
      std::string table = render_table(test_report(fit), style);
      rec.write(gt_out, table);
      if (!gt_plot.empty()) {
        auto words = gt_words.empty() ? fit.levels : split_words(gt_words);
        rec.write(gt_plot, render_prediction_plot(prediction_curves(fit, words, gt_points), fit.spec.response));
      }
      rec.finish(manifest_path(c_test, gt_out + ".run.json"));
      std::cout << table;
    } else if (diff->parsed()) {
      std::uint64_t seed = resolve_seed(c_diff);
      RunRecorder rec("diff-plot", seed, CONVPROBE_VERSION);
      rec.config(options_snapshot(diff));
      rec.input(df_fit);
      GammFit fit = load_fit(df_fit);
      auto grid = linspace(fit.x_min, fit.x_max, df_points);
      auto curve = difference_curve(fit, df_a, df_b, grid, df_level);
      rec.write(df_out, render_diff_plot(curve, df_a + " - " + df_b));
      if (!df_csv.empty()) rec.write(df_csv, difference_csv(curve));
      if (!df_regions.empty()) rec.write(df_regions, regions_csv(curve.significant_regions));
      rec.finish(manifest_path(c_diff, df_out + ".run.json"));
      std::cout << curve.significant_regions.size() << " significant region(s)\n";
      for (const auto& r : curve.significant_regions)
        std::cout << "  [" << format_g(r.begin, 6) << ", " << format_g(r.end, 6) << "]\n";
    } else if (lplot->parsed()) {
      std::uint64_t seed = resolve_seed(c_lp);
      RunRecorder rec("layer-plot", seed, CONVPROBE_VERSION);
      rec.config(options_snapshot(lplot));
      rec.input(lp_ckpt);
      rec.input(lp_manifest);
      TrainState st = load_checkpoint(lp_ckpt);
      auto tokens = select_split(load_corpus(lp_manifest), "all");
      auto it = std::find_if(tokens.begin(), tokens.end(), [&](const AudioToken& t) { return t.token_id == lp_token; });
      if (it == tokens.end()) throw PreconditionError("token '" + lp_token + "' not in manifest");
      auto ex = extract_all_layers(*it, st.q, st.net, true);
      LayerPlotInput in{it->token_id, it->samples, ex.layers, ex.logits};
      rec.write(lp_out, render_layer_plot(in));
      rec.finish(manifest_path(c_lp, lp_out + ".run.json"));
    }
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const CLI::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const fs::filesystem_error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "numeric/internal error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
