#include "convprobe/training.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <sstream>

#include "convprobe/error.hpp"
#include "convprobe/io.hpp"

namespace convprobe {

LatentBatch sample_latent(const NetConfig& cfg, std::size_t batch, std::mt19937_64& rng) {
  LatentBatch lb;
  lb.batch = batch;
  const std::size_t dim = cfg.latent_dim();
  lb.latent.assign(batch * dim, 0.0f);
  std::uniform_real_distribution<float> uni(-1.0f, 1.0f);
  std::uniform_int_distribution<std::size_t> cat(0, cfg.code.width - 1);
  std::bernoulli_distribution coin(0.5);
  if (cfg.code.kind == CodeKind::binary) lb.bits.assign(batch * cfg.code.width, 0);
  for (std::size_t b = 0; b < batch; ++b) {
    float* row = lb.latent.data() + b * dim;
    for (std::size_t i = 0; i < cfg.latent_z_dim; ++i) row[i] = uni(rng);
    float* code = row + cfg.latent_z_dim;
    if (cfg.code.kind == CodeKind::categorical) {
      const std::size_t c = cat(rng);
      lb.categories.push_back(c);
      code[c] = 1.0f;
    } else {
      for (std::size_t i = 0; i < cfg.code.width; ++i) {
        const bool bit = coin(rng);
        lb.bits[b * cfg.code.width + i] = bit;
        code[i] = bit ? 1.0f : 0.0f;
      }
    }
  }
  return lb;
}

template <typename T>
BasicTensor3<T> interpolate(const BasicTensor3<T>& real, const BasicTensor3<T>& fake,
                            std::mt19937_64& rng) {
  if (!real.same_shape(fake)) {
    throw DimensionError("interpolate: real " + real.shape_string() + " vs fake " +
                         fake.shape_string());
  }
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  BasicTensor3<T> out(real.batch(), real.channels(), real.time());
  for (std::size_t b = 0; b < real.batch(); ++b) {
    const T eps = static_cast<T>(unit(rng));
    const auto r = real.item(b);
    const auto f = fake.item(b);
    auto o = out.item(b);
    for (std::size_t i = 0; i < o.size(); ++i) o[i] = eps * r[i] + (T(1) - eps) * f[i];
  }
  return out;
}

template <typename T>
DLossResult<T> d_loss_wgan_gp(const NetConfig& cfg, const StackParams<T>& critic,
                              const BasicTensor3<T>& real, const BasicTensor3<T>& fake,
                              double lambda, std::mt19937_64& rng, bool shuffle,
                              std::type_identity_t<StackParams<T>>* grads) {
  if (critic.outputs != 1) throw DimensionError("critic must have a single output");
  if (!real.same_shape(fake)) {
    throw DimensionError("d_loss: real " + real.shape_string() + " vs fake " + fake.shape_string());
  }
  const std::size_t batch = real.batch();
  const ForwardOptions opt{false, shuffle, &rng};
  DLossResult<T> res;
  const auto side = [&](const BasicTensor3<T>& x, T sign) {
    StackTrace<T> trace;
    const auto out = stack_forward(cfg, critic, x, opt, grads ? &trace : nullptr);
    double mean = 0;
    for (T v : out.logits) mean += v;
    mean /= static_cast<double>(batch);
    if (grads) {
      const std::vector<T> dl(batch, sign / static_cast<T>(batch));
      stack_backward<T>(cfg, critic, trace, dl, grads, false);
    }
    return mean;
  };
  res.mean_fake = side(fake, T(1));
  res.mean_real = side(real, T(-1));
  const BasicTensor3<T> x_hat = interpolate(real, fake, rng);
  res.penalty = gradient_penalty(cfg, critic, x_hat, lambda, opt, grads).penalty;
  res.loss = res.mean_fake - res.mean_real + res.penalty;
  if (!std::isfinite(res.loss)) throw NumericError("critic loss is not finite");
  return res;
}

GQLoss g_q_loss(std::span<const double> fake_logits_d, std::span<const double> q_logits,
                const LatentBatch& code, const CodeSpec& spec, double q_weight) {
  const std::size_t batch = fake_logits_d.size();
  const std::size_t width = spec.width;
  if (q_logits.size() != batch * width) {
    throw DimensionError("g_q_loss: expected " + std::to_string(batch * width) + " Q logits, got " +
                         std::to_string(q_logits.size()));
  }
  if (batch == 0) throw DimensionError("g_q_loss: empty batch");
  const double inv = 1.0 / static_cast<double>(batch);
  GQLoss out;
  out.d_fake_logits.assign(batch, -inv);
  out.d_q_logits.assign(batch * width, 0.0);
  for (double v : fake_logits_d) out.adversarial -= v * inv;
  for (std::size_t b = 0; b < batch; ++b) {
    const double* z = q_logits.data() + b * width;
    double* g = out.d_q_logits.data() + b * width;
    if (spec.kind == CodeKind::categorical) {
      if (code.categories.size() != batch) throw DimensionError("g_q_loss: missing categorical codes");
      const std::size_t c = code.categories[b];
      const double mx = *std::max_element(z, z + width);
      double sum = 0;
      for (std::size_t i = 0; i < width; ++i) sum += std::exp(z[i] - mx);
      const double lse = mx + std::log(sum);
      out.q_term += (lse - z[c]) * inv;
      for (std::size_t i = 0; i < width; ++i) {
        g[i] = q_weight * inv * (std::exp(z[i] - lse) - (i == c ? 1.0 : 0.0));
      }
    } else {
      if (code.bits.size() != batch * width) throw DimensionError("g_q_loss: missing binary codes");
      for (std::size_t i = 0; i < width; ++i) {
        const double x = z[i];
        const double y = code.bits[b * width + i];
        out.q_term += (std::max(x, 0.0) - x * y + std::log1p(std::exp(-std::abs(x)))) * inv;
        g[i] = q_weight * inv * (1.0 / (1.0 + std::exp(-x)) - y);
      }
    }
  }
  out.total = out.adversarial + q_weight * out.q_term;
  return out;
}

void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = {{"steps", c.steps},
       {"batch_size", c.batch_size},
       {"n_critic", c.n_critic},
       {"lambda_gp", c.lambda_gp},
       {"lr_d", c.lr_d},
       {"lr_g", c.lr_g},
       {"lr_q", c.lr_q},
       {"beta1", c.beta1},
       {"beta2", c.beta2},
       {"q_weight", c.q_weight},
       {"checkpoint_interval", c.checkpoint_interval},
       {"eval_interval", c.eval_interval},
       {"collapse_floor", c.collapse_floor},
       {"collapse_warmup", c.collapse_warmup},
       {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, TrainConfig& c) {
  const TrainConfig d;
  static const char* known[] = {"steps",     "batch_size",          "n_critic",      "lambda_gp",
                                "lr_d",      "lr_g",                "lr_q",          "beta1",
                                "beta2",     "q_weight",            "checkpoint_interval",
                                "eval_interval", "collapse_floor", "collapse_warmup", "seed"};
  for (const auto& [key, value] : j.items()) {
    if (std::find(std::begin(known), std::end(known), key) == std::end(known)) {
      throw SpecError("unknown training option '" + key + "'");
    }
  }
  c.steps = j.value("steps", d.steps);
  c.batch_size = j.value("batch_size", d.batch_size);
  c.n_critic = j.value("n_critic", d.n_critic);
  c.lambda_gp = j.value("lambda_gp", d.lambda_gp);
  c.lr_d = j.value("lr_d", d.lr_d);
  c.lr_g = j.value("lr_g", d.lr_g);
  c.lr_q = j.value("lr_q", d.lr_q);
  c.beta1 = j.value("beta1", d.beta1);
  c.beta2 = j.value("beta2", d.beta2);
  c.q_weight = j.value("q_weight", d.q_weight);
  c.checkpoint_interval = j.value("checkpoint_interval", d.checkpoint_interval);
  c.eval_interval = j.value("eval_interval", d.eval_interval);
  c.collapse_floor = j.value("collapse_floor", d.collapse_floor);
  c.collapse_warmup = j.value("collapse_warmup", d.collapse_warmup);
  c.seed = j.value("seed", d.seed);
  if (c.batch_size == 0) throw SpecError("batch_size must be positive");
  if (c.n_critic == 0) throw SpecError("n_critic must be positive");
}

nlohmann::json parse_config_text(const std::string& text) {
  const auto first = text.find_first_not_of(" \t\r\n");
  if (first != std::string::npos && text[first] == '{') {
    try {
      return nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& e) {
      throw SpecError(std::string("config is not valid JSON: ") + e.what());
    }
  }
  nlohmann::json j = nlohmann::json::object();
  std::size_t lineno = 0;
  for (std::string line : split_lines(text)) {
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    const auto trim = [](std::string s) {
      const auto b = s.find_first_not_of(" \t");
      if (b == std::string::npos) return std::string();
      const auto e = s.find_last_not_of(" \t");
      return s.substr(b, e - b + 1);
    };
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw SpecError("config line " + std::to_string(lineno) + ": expected key=value");
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    try {
      j[key] = nlohmann::json::parse(value);
    } catch (const nlohmann::json::exception&) {
      j[key] = value;
    }
  }
  return j;
}

namespace {

template <typename P>
void adam_update(P& params, P& grads, AdamMoments<P>& mom, double lr, double beta1, double beta2) {
  constexpr double eps = 1e-8;
  ++mom.t;
  const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(mom.t));
  const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(mom.t));
  auto p = param_refs(params, "p");
  auto g = param_refs(grads, "g");
  auto m = param_refs(mom.m, "m");
  auto v = param_refs(mom.v, "v");
  for (std::size_t r = 0; r < p.size(); ++r) {
    if (!all_finite<float>(g[r].values)) throw NumericError("non-finite gradient in " + p[r].name);
    for (std::size_t i = 0; i < p[r].values.size(); ++i) {
      const double gi = g[r].values[i];
      const double mi = beta1 * m[r].values[i] + (1 - beta1) * gi;
      const double vi = beta2 * v[r].values[i] + (1 - beta2) * gi * gi;
      m[r].values[i] = static_cast<float>(mi);
      v[r].values[i] = static_cast<float>(vi);
      const double step = lr * (mi / bc1) / (std::sqrt(vi / bc2) + eps);
      p[r].values[i] = static_cast<float>(p[r].values[i] - step);
    }
  }
}

Tensor3 sample_real(const std::vector<AudioToken>& set, std::size_t batch, std::size_t input_len,
                    std::mt19937_64& rng) {
  std::uniform_int_distribution<std::size_t> pick(0, set.size() - 1);
  Tensor3 x(batch, 1, input_len);
  for (std::size_t b = 0; b < batch; ++b) {
    const auto& s = set[pick(rng)].samples;
    if (s.size() != input_len) throw DimensionError("training token length differs from input_len");
    std::copy(s.begin(), s.end(), x.item(b).begin());
  }
  return x;
}

GeneratedBatch generate(TrainState& s, std::size_t batch) {
  GeneratedBatch gen;
  gen.code = sample_latent(s.net, batch, s.rng);
  gen.audio = generator_forward<float>(s.net, s.g, gen.code.latent, batch, &gen.trace);
  return gen;
}

// The only path by which the Q-network is evaluated during training.
StackOutput<float> q_forward_generated(TrainState& s, const GeneratedBatch& gen,
                                       StackTrace<float>* trace) {
  ++s.q_calls_generated;
  return stack_forward(s.net, s.q, gen.audio, {false, true, &s.rng}, trace);
}

double sample_spread(const Tensor3& x) {
  const std::size_t batch = x.batch();
  if (batch < 2) return std::numeric_limits<double>::infinity();
  double total = 0;
  for (std::size_t a = 0; a < batch; ++a) {
    for (std::size_t b = a + 1; b < batch; ++b) {
      double d = 0;
      const auto xa = x.item(a), xb = x.item(b);
      for (std::size_t i = 0; i < xa.size(); ++i) d += (xa[i] - xb[i]) * (xa[i] - xb[i]);
      total += std::sqrt(d / static_cast<double>(xa.size()));
    }
  }
  return total / static_cast<double>(batch * (batch - 1) / 2);
}

}  // namespace

TrainState init_train_state(const NetConfig& net, const TrainConfig& train) {
  net.validate();
  TrainState s;
  s.net = net;
  s.train = train;
  s.rng.seed(train.seed);
  s.g = make_generator<float>(net);
  s.d = make_stack<float>(net, 1);
  s.q = make_stack<float>(net, net.code.width);
  init_params(param_refs(s.g, "G"), s.rng);
  init_params(param_refs(s.d, "D"), s.rng);
  init_params(param_refs(s.q, "Q"), s.rng);
  s.adam_g = {make_generator<float>(net), make_generator<float>(net), 0};
  s.adam_d = {make_stack<float>(net, 1), make_stack<float>(net, 1), 0};
  s.adam_q = {make_stack<float>(net, net.code.width), make_stack<float>(net, net.code.width), 0};
  return s;
}

namespace {

double train_step_impl(TrainState& s, const std::vector<AudioToken>& train_set, LossRow& row) {
  const NetConfig& net = s.net;
  const TrainConfig& tc = s.train;
  const std::size_t batch = tc.batch_size;
  if (train_set.empty()) throw PreconditionError("training set is empty");

  double d_loss = 0;
  for (std::size_t i = 0; i < tc.n_critic; ++i) {
    const Tensor3 real = sample_real(train_set, batch, net.input_len, s.rng);
    const LatentBatch lat = sample_latent(net, batch, s.rng);
    const Tensor3 fake = generator_forward<float>(net, s.g, lat.latent, batch);
    auto grads = make_stack<float>(net, 1);
    d_loss = d_loss_wgan_gp(net, s.d, real, fake, tc.lambda_gp, s.rng, true, &grads).loss;
    adam_update(s.d, grads, s.adam_d, tc.lr_d, tc.beta1, tc.beta2);
  }

  GeneratedBatch gen = generate(s, batch);
  StackTrace<float> d_trace;
  const auto d_out = stack_forward(net, s.d, gen.audio, {false, true, &s.rng}, &d_trace);
  StackTrace<float> q_trace;
  const auto q_out = q_forward_generated(s, gen, &q_trace);
  const std::vector<double> d_logits(d_out.logits.begin(), d_out.logits.end());
  const std::vector<double> q_logits(q_out.logits.begin(), q_out.logits.end());
  const GQLoss loss = g_q_loss(d_logits, q_logits, gen.code, net.code, tc.q_weight);
  if (!std::isfinite(loss.total)) throw NumericError("generator loss is not finite");

  const std::vector<float> dd(loss.d_fake_logits.begin(), loss.d_fake_logits.end());
  const std::vector<float> dq(loss.d_q_logits.begin(), loss.d_q_logits.end());
  Tensor3 gout = stack_backward<float>(net, s.d, d_trace, dd, nullptr, true);
  auto q_grads = make_stack<float>(net, net.code.width);
  const Tensor3 gq = stack_backward<float>(net, s.q, q_trace, dq, &q_grads, true);
  for (std::size_t i = 0; i < gout.size(); ++i) gout.flat()[i] += gq.flat()[i];
  auto g_grads = make_generator<float>(net);
  generator_backward<float>(net, s.g, gen.trace, gout, &g_grads);
  adam_update(s.g, g_grads, s.adam_g, tc.lr_g, tc.beta1, tc.beta2);
  adam_update(s.q, q_grads, s.adam_q, tc.lr_q, tc.beta1, tc.beta2);

  ++s.step;
  row = {s.step, d_loss, loss.adversarial, loss.q_term};
  s.history.push_back(row);
  while (s.history.size() > TrainState::kHistory) s.history.pop_front();
  return sample_spread(gen.audio);
}

bool row_finite(const LossRow& r) {
  return std::isfinite(r.d_loss) && std::isfinite(r.g_loss) && std::isfinite(r.q_loss);
}

}  // namespace

LossRow train_step(TrainState& s, const std::vector<AudioToken>& train_set) {
  LossRow row;
  train_step_impl(s, train_set, row);
  return row;
}

TrainResult resume(TrainState state, const CorpusSplit& corpus, std::size_t target_step,
                   const TrainHooks& hooks) {
  if (corpus.train.empty()) throw PreconditionError("training set is empty");
  const TrainConfig& tc = state.train;
  TrainState last_good = state;
  while (state.step < target_step) {
    LossRow row;
    double spread = 0;
    try {
      spread = train_step_impl(state, corpus.train, row);
    } catch (const NumericError& e) {
      return {TrainStatus::diverged,
              "diverged at step " + std::to_string(state.step + 1) + ": " + e.what(), last_good};
    }
    if (!row_finite(row)) {
      return {TrainStatus::diverged, "non-finite loss at step " + std::to_string(row.step), last_good};
    }
    if (hooks.on_step) hooks.on_step(row);
    if (tc.eval_interval > 0 && state.step % tc.eval_interval == 0 && !corpus.test.empty()) {
      const double acc = eval_q_accuracy(corpus.test, state.q, state.net).accuracy;
      if (acc > state.best_accuracy) {
        state.best_accuracy = acc;
        state.best_step = state.step;
        if (hooks.on_best) hooks.on_best(state, acc);
      }
    }
    if (tc.checkpoint_interval > 0 && state.step % tc.checkpoint_interval == 0) {
      last_good = state;
      if (hooks.on_checkpoint) hooks.on_checkpoint(state);
    }
    if (tc.collapse_floor > 0 && state.step > tc.collapse_warmup && spread < tc.collapse_floor) {
      return {TrainStatus::collapsed,
              "generated samples collapsed at step " + std::to_string(state.step), state};
    }
  }
  return {TrainStatus::completed, "completed " + std::to_string(state.step) + " steps", state};
}

TrainResult train(const CorpusSplit& corpus, const NetConfig& net, const TrainConfig& train_cfg,
                  const TrainHooks& hooks) {
  if (corpus.train.empty()) throw PreconditionError("training set is empty");
  return resume(init_train_state(net, train_cfg), corpus, train_cfg.steps, hooks);
}

namespace {

template <typename P>
void export_params(P& p, const std::string& prefix, Container& c) {
  for (const auto& r : param_refs(p, prefix)) {
    c.arrays.push_back({r.name, r.shape, std::vector<double>(r.values.begin(), r.values.end())});
  }
}

template <typename P>
void import_params(P& p, const std::string& prefix, const Container& c) {
  for (auto& r : param_refs(p, prefix)) {
    const NamedArray& a = c.at(r.name);
    if (a.shape != r.shape) throw FormatError("checkpoint array " + r.name + " has the wrong shape");
    std::copy(a.values.begin(), a.values.end(), r.values.begin());
  }
}

}  // namespace

Container checkpoint_container(const TrainState& state) {
  TrainState s = state;
  Container c;
  c.dtype = BlobType::f32;
  std::ostringstream rng;
  rng << s.rng;
  nlohmann::json hist = nlohmann::json::array();
  for (const auto& r : s.history) hist.push_back({r.step, r.d_loss, r.g_loss, r.q_loss});
  c.meta = {{"kind", "checkpoint"},
            {"net", s.net},
            {"train", s.train},
            {"step", s.step},
            {"rng", rng.str()},
            {"adam_t", {s.adam_g.t, s.adam_d.t, s.adam_q.t}},
            {"q_calls_generated", s.q_calls_generated},
            {"q_calls_real", s.q_calls_real},
            {"best_accuracy", s.best_accuracy},
            {"best_step", s.best_step},
            {"history", hist}};
  export_params(s.g, "G", c);
  export_params(s.d, "D", c);
  export_params(s.q, "Q", c);
  export_params(s.adam_g.m, "adam_m.G", c);
  export_params(s.adam_g.v, "adam_v.G", c);
  export_params(s.adam_d.m, "adam_m.D", c);
  export_params(s.adam_d.v, "adam_v.D", c);
  export_params(s.adam_q.m, "adam_m.Q", c);
  export_params(s.adam_q.v, "adam_v.Q", c);
  return c;
}

TrainState state_from_container(const Container& c) {
  if (c.meta.value("kind", "") != "checkpoint") throw FormatError("container is not a checkpoint");
  try {
    TrainState s = init_train_state(c.meta.at("net").get<NetConfig>(),
                                    c.meta.at("train").get<TrainConfig>());
    s.step = c.meta.at("step").get<std::size_t>();
    std::istringstream rng(c.meta.at("rng").get<std::string>());
    rng >> s.rng;
    if (!rng) throw FormatError("checkpoint rng state is corrupt");
    const auto t = c.meta.at("adam_t");
    s.adam_g.t = t.at(0).get<std::uint64_t>();
    s.adam_d.t = t.at(1).get<std::uint64_t>();
    s.adam_q.t = t.at(2).get<std::uint64_t>();
    s.q_calls_generated = c.meta.at("q_calls_generated").get<std::uint64_t>();
    s.q_calls_real = c.meta.at("q_calls_real").get<std::uint64_t>();
    s.best_accuracy = c.meta.at("best_accuracy").get<double>();
    s.best_step = c.meta.at("best_step").get<std::size_t>();
    for (const auto& r : c.meta.at("history")) {
      s.history.push_back({r.at(0).get<std::size_t>(), r.at(1).get<double>(), r.at(2).get<double>(),
                           r.at(3).get<double>()});
    }
    import_params(s.g, "G", c);
    import_params(s.d, "D", c);
    import_params(s.q, "Q", c);
    import_params(s.adam_g.m, "adam_m.G", c);
    import_params(s.adam_g.v, "adam_v.G", c);
    import_params(s.adam_d.m, "adam_m.D", c);
    import_params(s.adam_d.v, "adam_v.D", c);
    import_params(s.adam_q.m, "adam_m.Q", c);
    import_params(s.adam_q.v, "adam_v.Q", c);
    return s;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("checkpoint metadata is incomplete: ") + e.what());
  }
}

void save_checkpoint(const std::filesystem::path& path, const TrainState& s) {
  write_container(path, checkpoint_container(s));
}

TrainState load_checkpoint(const std::filesystem::path& path) {
  return state_from_container(read_container(path));
}

std::size_t code_count(const CodeSpec& spec) {
  if (spec.kind == CodeKind::categorical) return spec.width;
  if (spec.width >= 63) throw SpecError("binary code too wide to enumerate");
  return std::size_t{1} << spec.width;
}

std::vector<std::size_t> predicted_codes(std::span<const float> logits, const CodeSpec& spec) {
  const std::size_t width = spec.width;
  if (width == 0 || logits.size() % width != 0) throw DimensionError("logit count is not a multiple of code width");
  std::vector<std::size_t> codes(logits.size() / width);
  for (std::size_t b = 0; b < codes.size(); ++b) {
    const float* z = logits.data() + b * width;
    if (spec.kind == CodeKind::categorical) {
      codes[b] = static_cast<std::size_t>(std::max_element(z, z + width) - z);
    } else {
      std::size_t c = 0;
      for (std::size_t i = 0; i < width; ++i) {
        if (z[i] > 0) c |= std::size_t{1} << i;
      }
      codes[b] = c;
    }
  }
  return codes;
}

std::vector<std::size_t> hungarian_max(const std::vector<std::vector<double>>& weight) {
  const std::size_t n = weight.size();
  if (n == 0) return {};
  const std::size_t m = weight[0].size();
  if (m < n) throw DimensionError("hungarian_max needs rows <= columns");
  // Shortest augmenting path formulation on cost = -weight, 1-based.
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> u(n + 1, 0), v(m + 1, 0);
  std::vector<std::size_t> p(m + 1, 0), way(m + 1, 0);
  for (std::size_t i = 1; i <= n; ++i) {
    p[0] = i;
    std::size_t j0 = 0;
    std::vector<double> minv(m + 1, inf);
    std::vector<bool> used(m + 1, false);
    do {
      used[j0] = true;
      const std::size_t i0 = p[j0];
      double delta = inf;
      std::size_t j1 = 0;
      for (std::size_t j = 1; j <= m; ++j) {
        if (used[j]) continue;
        const double cur = -weight[i0 - 1][j - 1] - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (std::size_t j = 0; j <= m; ++j) {
        if (used[j]) {
          u[p[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (p[j0] != 0);
    do {
      const std::size_t j1 = way[j0];
      p[j0] = p[j1];
      j0 = j1;
    } while (j0 != 0);
  }
  std::vector<std::size_t> assign(n, 0);
  for (std::size_t j = 1; j <= m; ++j) {
    if (p[j] != 0) assign[p[j] - 1] = j - 1;
  }
  return assign;
}

QEvaluation evaluate_codes(const std::vector<std::string>& labels,
                           const std::vector<std::size_t>& codes, std::size_t n_codes) {
  if (labels.empty()) throw PreconditionError("evaluation set is empty");
  if (labels.size() != codes.size()) throw DimensionError("label and code counts differ");
  QEvaluation ev;
  std::map<std::string, std::size_t> cls;
  for (const auto& l : labels) cls.emplace(l, 0);
  for (auto& [name, idx] : cls) {
    idx = ev.classes.size();
    ev.classes.push_back(name);
  }
  ev.confusion.assign(ev.classes.size(), std::vector<std::size_t>(n_codes, 0));
  // Only observed codes can contribute to the matching.
  std::vector<std::size_t> observed;
  std::map<std::size_t, std::size_t> col;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (codes[i] >= n_codes) throw DimensionError("code index out of range");
    ++ev.confusion[cls.at(labels[i])][codes[i]];
    if (col.emplace(codes[i], observed.size()).second) observed.push_back(codes[i]);
  }
  const std::size_t rows = ev.classes.size();
  const std::size_t cols = std::max(rows, observed.size());
  std::vector<std::vector<double>> w(rows, std::vector<double>(cols, 0.0));
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t k = 0; k < observed.size(); ++k) {
      w[r][k] = static_cast<double>(ev.confusion[r][observed[k]]);
    }
  }
  const auto assign = hungarian_max(w);
  std::size_t matched = 0;
  ev.code_for_class.assign(rows, -1);
  for (std::size_t r = 0; r < rows; ++r) {
    if (assign[r] < observed.size()) {
      ev.code_for_class[r] = static_cast<long>(observed[assign[r]]);
      matched += ev.confusion[r][observed[assign[r]]];
    }
  }
  ev.accuracy = static_cast<double>(matched) / static_cast<double>(labels.size());
  return ev;
}

Tensor3 batch_tokens(const std::vector<AudioToken>& tokens, std::size_t begin, std::size_t end,
                     std::size_t input_len) {
  Tensor3 x(end - begin, 1, input_len);
  for (std::size_t i = begin; i < end; ++i) {
    if (tokens[i].samples.size() != input_len) {
      throw DimensionError("token " + tokens[i].token_id + " has " +
                           std::to_string(tokens[i].samples.size()) + " samples, expected " +
                           std::to_string(input_len));
    }
    std::copy(tokens[i].samples.begin(), tokens[i].samples.end(), x.item(i - begin).begin());
  }
  return x;
}

QEvaluation eval_q_accuracy(const std::vector<AudioToken>& test, const StackParams<float>& q,
                            const NetConfig& cfg) {
  if (test.empty()) throw PreconditionError("test set is empty");
  constexpr std::size_t chunk = 32;
  std::vector<float> logits;
  std::vector<std::string> labels;
  for (std::size_t b = 0; b < test.size(); b += chunk) {
    const std::size_t e = std::min(test.size(), b + chunk);
    const auto out = q_network_forward(batch_tokens(test, b, e, cfg.input_len), q, cfg, false, false);
    logits.insert(logits.end(), out.logits.begin(), out.logits.end());
  }
  for (const auto& t : test) labels.push_back(t.word);
  return evaluate_codes(labels, predicted_codes(logits, cfg.code), code_count(cfg.code));
}

template BasicTensor3<float> interpolate(const BasicTensor3<float>&, const BasicTensor3<float>&,
                                         std::mt19937_64&);
template BasicTensor3<double> interpolate(const BasicTensor3<double>&, const BasicTensor3<double>&,
                                          std::mt19937_64&);
template DLossResult<float> d_loss_wgan_gp(const NetConfig&, const StackParams<float>&,
                                           const Tensor3&, const Tensor3&, double,
                                           std::mt19937_64&, bool, StackParams<float>*);
template DLossResult<double> d_loss_wgan_gp(const NetConfig&, const StackParams<double>&,
                                            const BasicTensor3<double>&,
                                            const BasicTensor3<double>&, double, std::mt19937_64&,
                                            bool, StackParams<double>*);

}  // namespace convprobe
