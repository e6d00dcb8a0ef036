#include "convprobe/audio.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <map>
#include <numbers>

#include "convprobe/error.hpp"
#include "convprobe/io.hpp"

namespace convprobe {

namespace {

std::uint32_t u32(const std::string& b, std::size_t pos) {
  std::uint32_t v;
  std::memcpy(&v, b.data() + pos, 4);
  return v;
}

std::uint16_t u16(const std::string& b, std::size_t pos) {
  std::uint16_t v;
  std::memcpy(&v, b.data() + pos, 2);
  return v;
}

void put_u32(std::string& out, std::uint32_t v) { out.append(reinterpret_cast<char*>(&v), 4); }
void put_u16(std::string& out, std::uint16_t v) { out.append(reinterpret_cast<char*>(&v), 2); }

std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

std::size_t parse_index(const std::string& field, const std::string& what) {
  try {
    std::size_t used = 0;
    const long long v = std::stoll(field, &used);
    if (used != field.size() || v < 0) throw std::invalid_argument(field);
    return static_cast<std::size_t>(v);
  } catch (const std::exception&) {
    throw FormatError(what + ": not a non-negative integer: '" + field + "'");
  }
}

}  // namespace

AudioToken load_wav(const std::filesystem::path& path) {
  const std::string b = read_file(path);
  const std::string name = path.string();
  if (b.size() < 12 || b.compare(0, 4, "RIFF") != 0 || b.compare(8, 4, "WAVE") != 0) {
    throw FormatError(name + ": not a RIFF/WAVE file");
  }
  std::uint16_t format = 0, channels = 0, bits = 0;
  std::uint32_t rate = 0;
  bool have_fmt = false;
  std::size_t data_pos = 0, data_len = 0;
  bool have_data = false;
  std::size_t pos = 12;
  while (pos + 8 <= b.size()) {
    const std::string id = b.substr(pos, 4);
    const std::size_t len = u32(b, pos + 4);
    const std::size_t body = pos + 8;
    if (id == "fmt ") {
      if (len < 16 || body + len > b.size()) throw FormatError(name + ": truncated fmt chunk");
      format = u16(b, body);
      channels = u16(b, body + 2);
      rate = u32(b, body + 4);
      bits = u16(b, body + 14);
      if (format == 0xFFFE) {
        if (len < 26) throw FormatError(name + ": truncated extensible fmt chunk");
        format = u16(b, body + 24);
      }
      have_fmt = true;
    } else if (id == "data") {
      data_pos = body;
      data_len = std::min(len, b.size() - body);
      have_data = true;
      break;
    }
    pos = body + len + (len & 1);
  }
  if (!have_fmt) throw FormatError(name + ": missing fmt chunk");
  if (!have_data) throw FormatError(name + ": missing data chunk");
  if (rate == 0) throw FormatError(name + ": zero sample rate");
  if (channels != 1) {
    throw UnsupportedFormatError(name + ": " + std::to_string(channels) +
                                 " channels; only mono is supported");
  }

  AudioToken tok;
  tok.token_id = path.stem().string();
  tok.sample_rate = rate;
  if (format == 1 && bits == 8) {
    tok.samples.resize(data_len);
    for (std::size_t i = 0; i < data_len; ++i) {
      tok.samples[i] = static_cast<float>(static_cast<unsigned char>(b[data_pos + i])) - 128.0f;
    }
    normalize_full_scale(tok, 128.0);
  } else if (format == 1 && bits == 16) {
    tok.samples.resize(data_len / 2);
    for (std::size_t i = 0; i < tok.samples.size(); ++i) {
      tok.samples[i] = static_cast<std::int16_t>(u16(b, data_pos + 2 * i));
    }
    normalize_full_scale(tok, 32768.0);
  } else if (format == 3 && bits == 32) {
    tok.samples.resize(data_len / 4);
    std::memcpy(tok.samples.data(), b.data() + data_pos, tok.samples.size() * 4);
    for (float v : tok.samples) {
      if (!(v >= -1.0f && v <= 1.0f)) throw FormatError(name + ": float sample outside [-1, 1]");
    }
    tok.normalized = true;
  } else {
    throw UnsupportedFormatError(name + ": unsupported encoding (format " +
                                 std::to_string(format) + ", " + std::to_string(bits) + " bits)");
  }
  return tok;
}

void write_wav(const std::filesystem::path& path, std::span<const float> samples,
               std::size_t sample_rate, WavEncoding enc) {
  const std::uint16_t bits = enc == WavEncoding::pcm8 ? 8 : enc == WavEncoding::pcm16 ? 16 : 32;
  const std::uint32_t bytes_per = bits / 8;
  const auto data_len = static_cast<std::uint32_t>(samples.size() * bytes_per);
  std::string out = "RIFF";
  put_u32(out, 36 + data_len + (data_len & 1));
  out += "WAVEfmt ";
  put_u32(out, 16);
  put_u16(out, enc == WavEncoding::float32 ? 3 : 1);
  put_u16(out, 1);
  put_u32(out, static_cast<std::uint32_t>(sample_rate));
  put_u32(out, static_cast<std::uint32_t>(sample_rate * bytes_per));
  put_u16(out, static_cast<std::uint16_t>(bytes_per));
  put_u16(out, bits);
  out += "data";
  put_u32(out, data_len);
  for (float v : samples) {
    const double c = std::clamp(static_cast<double>(v), -1.0, 1.0);
    if (enc == WavEncoding::pcm8) {
      out.push_back(static_cast<char>(std::clamp(std::lround(c * 128.0) + 128, 0L, 255L)));
    } else if (enc == WavEncoding::pcm16) {
      put_u16(out, static_cast<std::uint16_t>(
                       static_cast<std::int16_t>(std::clamp(std::lround(c * 32768.0), -32768L, 32767L))));
    } else {
      out.append(reinterpret_cast<const char*>(&v), 4);
    }
  }
  if (data_len & 1) out.push_back('\0');
  write_file_atomic(path, out);
}

void normalize_full_scale(AudioToken& token, double full_scale) {
  if (token.normalized) throw PreconditionError("token " + token.token_id + " is already normalized");
  if (!(full_scale > 0)) throw PreconditionError("full scale must be positive");
  for (float& v : token.samples) v = static_cast<float>(v / full_scale);
  token.normalized = true;
}

std::size_t left_pad_samples(std::size_t sample_rate) {
  return static_cast<std::size_t>(std::lround(0.025 * static_cast<double>(sample_rate)));
}

AudioToken pad_token(std::span<const float> raw, std::size_t sample_rate, std::size_t target_len) {
  const std::size_t left = left_pad_samples(sample_rate);
  if (left + raw.size() > target_len) {
    const long overflow = static_cast<long>(left + raw.size()) - static_cast<long>(target_len);
    throw LengthError("token of " + std::to_string(raw.size()) + " samples plus " +
                          std::to_string(left) + " pad exceeds " + std::to_string(target_len) +
                          " by " + std::to_string(overflow),
                      overflow);
  }
  AudioToken tok;
  tok.sample_rate = sample_rate;
  tok.samples.assign(target_len, 0.0f);
  std::copy(raw.begin(), raw.end(), tok.samples.begin() + static_cast<long>(left));
  return tok;
}

CorpusSplit split_corpus(const std::vector<AudioToken>& tokens, double ratio, std::uint64_t seed) {
  if (!(ratio > 0 && ratio < 1)) throw PreconditionError("split ratio must lie in (0, 1)");
  std::map<std::string, std::vector<std::size_t>> classes;
  for (std::size_t i = 0; i < tokens.size(); ++i) classes[tokens[i].word].push_back(i);
  for (const auto& [word, idx] : classes) {
    if (idx.size() < 2) {
      throw StratificationError("class '" + word + "' has " + std::to_string(idx.size()) +
                                " token; at least 2 are needed");
    }
  }

  struct Quota {
    const std::string* word;
    std::size_t n_train;
    double frac;
  };
  std::vector<Quota> quotas;
  long assigned = 0;
  for (const auto& [word, idx] : classes) {
    const double q = ratio * static_cast<double>(idx.size());
    const double fl = std::floor(q);
    quotas.push_back({&word, static_cast<std::size_t>(fl), q - fl});
    assigned += static_cast<long>(fl);
  }
  long remaining = std::llround(ratio * static_cast<double>(tokens.size())) - assigned;
  std::vector<std::size_t> order(quotas.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return quotas[a].frac > quotas[b].frac; });
  for (std::size_t i = 0; i < order.size() && remaining > 0; ++i, --remaining) {
    ++quotas[order[i]].n_train;
  }

  CorpusSplit split;
  split.seed = seed;
  std::vector<std::size_t> train_idx, test_idx;
  std::size_t qi = 0;
  for (const auto& [word, idx] : classes) {
    const std::size_t n_train = std::clamp<std::size_t>(quotas[qi++].n_train, 1, idx.size() - 1);
    std::vector<std::size_t> perm = idx;
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(fnv1a(word))};
    std::mt19937_64 rng(seq);
    std::shuffle(perm.begin(), perm.end(), rng);
    train_idx.insert(train_idx.end(), perm.begin(), perm.begin() + static_cast<long>(n_train));
    test_idx.insert(test_idx.end(), perm.begin() + static_cast<long>(n_train), perm.end());
  }
  std::sort(train_idx.begin(), train_idx.end());
  std::sort(test_idx.begin(), test_idx.end());
  for (std::size_t i : train_idx) split.train.push_back(tokens[i]);
  for (std::size_t i : test_idx) split.test.push_back(tokens[i]);
  return split;
}

SynthConfig SynthConfig::standard(std::size_t n_classes) {
  if (n_classes == 0 || n_classes > 16) {
    throw PreconditionError("synthetic corpus supports 1 to 16 classes, got " +
                            std::to_string(n_classes));
  }
  SynthConfig cfg;
  for (std::size_t c = 0; c < n_classes; ++c) {
    ClassTemplate t;
    t.word = "w" + std::to_string(c);
    t.tone1_hz = 300.0 + 550.0 * static_cast<double>(c % 8) + 120.0 * static_cast<double>(c / 8);
    t.noise_center_hz = 2500.0 + 300.0 * static_cast<double>((c * 5) % 16);
    t.noise_bandwidth_hz = 1200.0;
    t.tone2_hz = 1000.0 + 450.0 * static_cast<double>((3 * c + 1) % 8) + 60.0 * static_cast<double>(c / 8);
    t.noise_phone = "fric";
    cfg.templates.push_back(t);
  }
  return cfg;
}

SynthConfig SynthConfig::contrast(std::size_t n_classes) {
  if (n_classes < 2) throw PreconditionError("contrast corpus needs at least 2 classes");
  SynthConfig cfg = standard(n_classes);
  ClassTemplate& a = cfg.templates[0];
  ClassTemplate& b = cfg.templates[1];
  b.tone1_hz = a.tone1_hz;
  b.tone2_hz = a.tone2_hz;
  a.noise_center_hz = 6000.0;
  b.noise_center_hz = 3500.0;
  a.noise_phone = "s";
  b.noise_phone = "sh";
  return cfg;
}

void to_json(nlohmann::json& j, const ClassTemplate& t) {
  j = {{"word", t.word},
       {"tone1_hz", t.tone1_hz},
       {"noise_center_hz", t.noise_center_hz},
       {"noise_bandwidth_hz", t.noise_bandwidth_hz},
       {"tone2_hz", t.tone2_hz},
       {"noise_phone", t.noise_phone}};
}

void from_json(const nlohmann::json& j, ClassTemplate& t) {
  t.word = j.at("word").get<std::string>();
  t.tone1_hz = j.at("tone1_hz").get<double>();
  t.noise_center_hz = j.at("noise_center_hz").get<double>();
  t.noise_bandwidth_hz = j.at("noise_bandwidth_hz").get<double>();
  t.tone2_hz = j.at("tone2_hz").get<double>();
  t.noise_phone = j.value("noise_phone", std::string("fric"));
}

void to_json(nlohmann::json& j, const SynthConfig& c) {
  j = {{"sample_rate", c.sample_rate},     {"target_len", c.target_len},
       {"base_duration", c.base_duration}, {"tone1_fraction", c.tone1_fraction},
       {"noise_fraction", c.noise_fraction}, {"amplitude", c.amplitude},
       {"noise_partials", c.noise_partials}, {"templates", c.templates}};
}

void from_json(const nlohmann::json& j, SynthConfig& c) {
  SynthConfig d;
  c.sample_rate = j.value("sample_rate", d.sample_rate);
  c.target_len = j.value("target_len", d.target_len);
  c.base_duration = j.value("base_duration", d.base_duration);
  c.tone1_fraction = j.value("tone1_fraction", d.tone1_fraction);
  c.noise_fraction = j.value("noise_fraction", d.noise_fraction);
  c.amplitude = j.value("amplitude", d.amplitude);
  c.noise_partials = j.value("noise_partials", d.noise_partials);
  c.templates = j.at("templates").get<std::vector<ClassTemplate>>();
}

std::vector<float> synth_raw(const SynthConfig& cfg, std::size_t cls, std::mt19937_64* rng,
                             std::size_t* noise_begin, std::size_t* noise_end) {
  if (cls >= cfg.templates.size()) throw PreconditionError("class index out of range");
  const ClassTemplate& t = cfg.templates[cls];
  const double sr = static_cast<double>(cfg.sample_rate);
  const double nyquist = sr / 2;
  if (t.tone1_hz >= nyquist || t.tone2_hz >= nyquist ||
      t.noise_center_hz + t.noise_bandwidth_hz / 2 >= nyquist) {
    throw PreconditionError("template " + t.word + " exceeds the Nyquist frequency");
  }
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  // Clean templates use a fixed per-class noise realisation and no jitter.
  std::mt19937_64 fixed(0x5EED0000ULL + cls);
  std::mt19937_64& g = rng ? *rng : fixed;
  const double dur_scale = rng ? 0.9 + 0.2 * unit(g) : 1.0;
  const double amp = cfg.amplitude * (rng ? 0.8 + 0.4 * unit(g) : 1.0);
  const double phase1 = rng ? 2 * std::numbers::pi * unit(g) : 0.0;
  const double phase2 = rng ? 2 * std::numbers::pi * unit(g) : 0.0;

  const auto n = static_cast<std::size_t>(std::lround(static_cast<double>(cfg.base_duration) * dur_scale));
  const auto n1 = static_cast<std::size_t>(std::lround(static_cast<double>(n) * cfg.tone1_fraction));
  const auto n2 = static_cast<std::size_t>(std::lround(static_cast<double>(n) * cfg.noise_fraction));
  const std::size_t n3 = n - n1 - n2;

  std::vector<double> freqs(cfg.noise_partials), phases(cfg.noise_partials);
  for (std::size_t p = 0; p < cfg.noise_partials; ++p) {
    freqs[p] = t.noise_center_hz + t.noise_bandwidth_hz * (unit(g) - 0.5);
    phases[p] = 2 * std::numbers::pi * unit(g);
  }
  const double noise_gain = 1.2 / std::sqrt(static_cast<double>(std::max<std::size_t>(cfg.noise_partials, 1)));

  // Raised-cosine ramps at segment edges.
  const auto ramp = [](std::size_t i, std::size_t len) {
    const std::size_t r = std::min<std::size_t>(64, len / 2);
    if (r == 0) return 1.0;
    const std::size_t d = std::min(i, len - 1 - i);
    return d >= r ? 1.0 : 0.5 - 0.5 * std::cos(std::numbers::pi * static_cast<double>(d) / r);
  };

  std::vector<float> out(n);
  for (std::size_t i = 0; i < n1; ++i) {
    out[i] = static_cast<float>(amp * ramp(i, n1) *
                                std::sin(2 * std::numbers::pi * t.tone1_hz * i / sr + phase1));
  }
  for (std::size_t i = 0; i < n2; ++i) {
    double s = 0;
    for (std::size_t p = 0; p < freqs.size(); ++p) {
      s += std::sin(2 * std::numbers::pi * freqs[p] * i / sr + phases[p]);
    }
    out[n1 + i] = static_cast<float>(amp * noise_gain * ramp(i, n2) * s);
  }
  for (std::size_t i = 0; i < n3; ++i) {
    out[n1 + n2 + i] = static_cast<float>(
        amp * ramp(i, n3) * std::sin(2 * std::numbers::pi * t.tone2_hz * i / sr + phase2));
  }
  for (float& v : out) v = std::clamp(v, -1.0f, 1.0f);
  if (noise_begin) *noise_begin = n1;
  if (noise_end) *noise_end = n1 + n2;
  return out;
}

std::vector<AudioToken> synth_toy_corpus(const SynthConfig& cfg, std::size_t tokens_per_class,
                                         std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  const std::size_t left = left_pad_samples(cfg.sample_rate);
  std::vector<AudioToken> tokens;
  tokens.reserve(cfg.templates.size() * tokens_per_class);
  for (std::size_t c = 0; c < cfg.templates.size(); ++c) {
    for (std::size_t i = 0; i < tokens_per_class; ++i) {
      std::size_t nb = 0, ne = 0;
      const std::vector<float> raw = synth_raw(cfg, c, &rng, &nb, &ne);
      AudioToken tok = pad_token(raw, cfg.sample_rate, cfg.target_len);
      char id[64];
      std::snprintf(id, sizeof id, "%s_%03zu", cfg.templates[c].word.c_str(), i);
      tok.token_id = id;
      tok.word = cfg.templates[c].word;
      tok.normalized = true;
      tok.intervals.push_back({cfg.templates[c].noise_phone, left + nb, left + ne});
      tokens.push_back(std::move(tok));
    }
  }
  return tokens;
}

std::vector<AudioToken> synth_toy_corpus(std::size_t n_classes, std::size_t tokens_per_class,
                                         std::size_t sample_rate, std::uint64_t seed) {
  SynthConfig cfg = SynthConfig::standard(n_classes);
  cfg.base_duration = cfg.base_duration * sample_rate / cfg.sample_rate;
  cfg.sample_rate = sample_rate;
  return synth_toy_corpus(cfg, tokens_per_class, seed);
}

std::string annotations_csv(const std::vector<AudioToken>& tokens) {
  std::string out = "token_id,phone,start_sample,end_sample\n";
  for (const auto& t : tokens) {
    for (const auto& iv : t.intervals) {
      out += t.token_id + "," + iv.phone + "," + std::to_string(iv.start_sample) + "," +
             std::to_string(iv.end_sample) + "\n";
    }
  }
  return out;
}

std::vector<std::pair<std::string, PhoneInterval>> parse_annotations(const std::string& csv_text) {
  const auto lines = split_lines(csv_text);
  if (lines.empty() || lines[0] != "token_id,phone,start_sample,end_sample") {
    throw FormatError("annotation CSV must start with token_id,phone,start_sample,end_sample");
  }
  std::vector<std::pair<std::string, PhoneInterval>> out;
  for (std::size_t i = 1; i < lines.size(); ++i) {
    if (lines[i].empty()) continue;
    const auto f = split_fields(lines[i]);
    const std::string where = "annotation line " + std::to_string(i + 1);
    if (f.size() != 4) throw FormatError(where + ": expected 4 fields");
    PhoneInterval iv{f[1], parse_index(f[2], where), parse_index(f[3], where)};
    if (iv.start_sample >= iv.end_sample) throw FormatError(where + ": empty interval");
    out.emplace_back(f[0], iv);
  }
  return out;
}

void to_json(nlohmann::json& j, const Manifest& m) {
  j = {{"sample_rate", m.sample_rate}, {"input_len", m.input_len}, {"seed", m.seed}};
  j["tokens"] = nlohmann::json::array();
  for (const auto& e : m.tokens) {
    nlohmann::json ivs = nlohmann::json::array();
    for (const auto& iv : e.intervals) {
      ivs.push_back({{"phone", iv.phone}, {"start_sample", iv.start_sample}, {"end_sample", iv.end_sample}});
    }
    j["tokens"].push_back({{"token_id", e.token_id},
                           {"word", e.word},
                           {"path", e.path},
                           {"split", e.split},
                           {"intervals", ivs}});
  }
}

void from_json(const nlohmann::json& j, Manifest& m) {
  m.sample_rate = j.value("sample_rate", std::size_t{16000});
  m.input_len = j.value("input_len", std::size_t{4096});
  m.seed = j.value("seed", std::uint64_t{0});
  m.tokens.clear();
  for (const auto& t : j.at("tokens")) {
    ManifestEntry e;
    e.token_id = t.at("token_id").get<std::string>();
    e.word = t.at("word").get<std::string>();
    e.path = t.at("path").get<std::string>();
    e.split = t.value("split", std::string());
    for (const auto& iv : t.value("intervals", nlohmann::json::array())) {
      e.intervals.push_back({iv.at("phone").get<std::string>(),
                             iv.at("start_sample").get<std::size_t>(),
                             iv.at("end_sample").get<std::size_t>()});
    }
    m.tokens.push_back(std::move(e));
  }
}

Manifest read_manifest(const std::filesystem::path& path) {
  try {
    return nlohmann::json::parse(read_file(path)).get<Manifest>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path.string() + ": invalid manifest: " + e.what());
  }
}

CorpusSplit load_corpus(const std::filesystem::path& manifest_path) {
  const Manifest m = read_manifest(manifest_path);
  const auto dir = manifest_path.parent_path();
  CorpusSplit split;
  split.seed = m.seed;
  for (const auto& e : m.tokens) {
    const AudioToken raw = load_wav(dir / e.path);
    if (raw.sample_rate != m.sample_rate) {
      throw FormatError(e.path + ": sample rate " + std::to_string(raw.sample_rate) +
                        " differs from manifest " + std::to_string(m.sample_rate));
    }
    AudioToken tok = pad_token(raw.samples, raw.sample_rate, m.input_len);
    tok.token_id = e.token_id;
    tok.word = e.word;
    tok.normalized = true;
    for (const auto& iv : e.intervals) {
      if (iv.start_sample >= iv.end_sample || iv.end_sample > m.input_len) {
        throw FormatError(e.token_id + ": interval outside padded length");
      }
      tok.intervals.push_back(iv);
    }
    if (e.split == "train") {
      split.train.push_back(std::move(tok));
    } else if (e.split == "test") {
      split.test.push_back(std::move(tok));
    } else {
      throw FormatError(e.token_id + ": manifest entry has no train/test split");
    }
  }
  return split;
}

}  // namespace convprobe
