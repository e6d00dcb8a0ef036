#include "convprobe/network.hpp"

#include <algorithm>
#include <cmath>

#include "convprobe/kernels.hpp"

namespace convprobe {

NetConfig NetConfig::full_preset() { return NetConfig{}; }

NetConfig NetConfig::desk_preset() {
  NetConfig cfg;
  cfg.input_len = 4096;
  cfg.n_layers = 4;
  cfg.base_channels = 16;
  cfg.code = {CodeKind::categorical, 4};
  return cfg;
}

std::size_t NetConfig::layer_len(std::size_t layer) const {
  std::size_t len = input_len;
  for (std::size_t l = 0; l < layer; ++l) len /= stride;
  return len;
}

void NetConfig::validate() const {
  if (stride < 2) throw SpecError("NetConfig: stride must be >= 2");
  if (n_layers == 0) throw SpecError("NetConfig: n_layers must be positive");
  if (phase_shuffle_n < 0) throw SpecError("NetConfig: phase_shuffle_n must be >= 0");
  if (kernel_width < stride) throw SpecError("NetConfig: kernel_width must be >= stride");
  if (base_channels == 0) throw SpecError("NetConfig: base_channels must be positive");
  if (code.width == 0) throw SpecError("NetConfig: code width must be positive");
  std::size_t len = input_len;
  for (std::size_t l = 0; l < n_layers; ++l) {
    if (len % stride != 0) {
      throw SpecError("NetConfig: input_len " + std::to_string(input_len) +
                      " is not divisible by stride^n_layers");
    }
    len /= stride;
  }
  if (len == 0) throw SpecError("NetConfig: input_len too short for n_layers");
  // The shuffle on the deepest shuffled layer must fit inside the series.
  if (n_layers > 1 && static_cast<std::size_t>(phase_shuffle_n) >= layer_len(n_layers - 1)) {
    throw SpecError("NetConfig: phase_shuffle_n too large for layer length");
  }
}

void to_json(nlohmann::json& j, const NetConfig& cfg) {
  j = nlohmann::json{{"input_len", cfg.input_len},
                     {"n_layers", cfg.n_layers},
                     {"base_channels", cfg.base_channels},
                     {"kernel_width", cfg.kernel_width},
                     {"stride", cfg.stride},
                     {"leaky_slope", cfg.leaky_slope},
                     {"phase_shuffle_n", cfg.phase_shuffle_n},
                     {"latent_z_dim", cfg.latent_z_dim},
                     {"code_kind", cfg.code.kind == CodeKind::binary ? "binary" : "categorical"},
                     {"code_width", cfg.code.width}};
}

void from_json(const nlohmann::json& j, NetConfig& cfg) {
  NetConfig d;
  cfg.input_len = j.value("input_len", d.input_len);
  cfg.n_layers = j.value("n_layers", d.n_layers);
  cfg.base_channels = j.value("base_channels", d.base_channels);
  cfg.kernel_width = j.value("kernel_width", d.kernel_width);
  cfg.stride = j.value("stride", d.stride);
  cfg.leaky_slope = j.value("leaky_slope", d.leaky_slope);
  cfg.phase_shuffle_n = j.value("phase_shuffle_n", d.phase_shuffle_n);
  cfg.latent_z_dim = j.value("latent_z_dim", d.latent_z_dim);
  const std::string kind = j.value("code_kind", std::string("categorical"));
  if (kind != "categorical" && kind != "binary") {
    throw SpecError("NetConfig: code_kind must be categorical or binary, got " + kind);
  }
  cfg.code.kind = kind == "binary" ? CodeKind::binary : CodeKind::categorical;
  cfg.code.width = j.value("code_width", d.code.width);
}

namespace {

template <typename T>
void add_conv_refs(std::vector<ParamRef<T>>& refs, std::vector<ConvLayerParams<T>>& layers,
                   const std::string& prefix, const std::string& kind) {
  for (std::size_t l = 0; l < layers.size(); ++l) {
    auto& layer = layers[l];
    const std::string base = prefix + "." + kind + std::to_string(l + 1);
    refs.push_back({base + ".w",
                    {layer.w.batch(), layer.w.channels(), layer.w.time()},
                    layer.w.flat()});
    refs.push_back({base + ".b", {layer.b.size()}, layer.b});
  }
}

template <typename T>
ConvLayerParams<T> conv_layer(std::size_t d0, std::size_t d1, std::size_t k, std::size_t bias) {
  return {BasicTensor3<T>(d0, d1, k), std::vector<T>(bias, T(0))};
}

}  // namespace

template <typename T>
std::vector<ParamRef<T>> param_refs(StackParams<T>& p, const std::string& prefix) {
  std::vector<ParamRef<T>> refs;
  add_conv_refs(refs, p.conv, prefix, "conv");
  const std::size_t in = p.outputs == 0 ? 0 : p.dense_w.size() / p.outputs;
  refs.push_back({prefix + ".dense.w", {p.outputs, in}, p.dense_w});
  refs.push_back({prefix + ".dense.b", {p.outputs}, p.dense_b});
  return refs;
}

template <typename T>
std::vector<ParamRef<T>> param_refs(GeneratorParams<T>& p, const std::string& prefix) {
  std::vector<ParamRef<T>> refs;
  const std::size_t out = p.dense_b.size();
  refs.push_back({prefix + ".dense.w", {out, out == 0 ? 0 : p.dense_w.size() / out}, p.dense_w});
  refs.push_back({prefix + ".dense.b", {out}, p.dense_b});
  add_conv_refs(refs, p.deconv, prefix, "deconv");
  return refs;
}

template <typename T>
StackParams<T> make_stack(const NetConfig& cfg, std::size_t outputs) {
  cfg.validate();
  StackParams<T> p;
  std::size_t c_in = 1;
  for (std::size_t l = 1; l <= cfg.n_layers; ++l) {
    p.conv.push_back(conv_layer<T>(cfg.channels(l), c_in, cfg.kernel_width, cfg.channels(l)));
    c_in = cfg.channels(l);
  }
  p.outputs = outputs;
  p.dense_w.assign(outputs * cfg.feature_dim(), T(0));
  p.dense_b.assign(outputs, T(0));
  return p;
}

template <typename T>
GeneratorParams<T> make_generator(const NetConfig& cfg) {
  cfg.validate();
  GeneratorParams<T> p;
  p.dense_w.assign(cfg.feature_dim() * cfg.latent_dim(), T(0));
  p.dense_b.assign(cfg.feature_dim(), T(0));
  for (std::size_t l = cfg.n_layers; l >= 1; --l) {
    const std::size_t c_out = l == 1 ? 1 : cfg.channels(l - 1);
    p.deconv.push_back(conv_layer<T>(cfg.channels(l), c_out, cfg.kernel_width, c_out));
  }
  return p;
}

template <typename T>
void init_params(std::vector<ParamRef<T>> refs, std::mt19937_64& rng) {
  for (auto& ref : refs) {
    if (ref.shape.size() == 1) {
      std::fill(ref.values.begin(), ref.values.end(), T(0));
      continue;
    }
    // Conv (d0, d1, K): fans are d1*K and d0*K. Dense (out, in): in and out.
    const double k = ref.shape.size() == 3 ? static_cast<double>(ref.shape[2]) : 1.0;
    const double fan_sum = (static_cast<double>(ref.shape[0]) + static_cast<double>(ref.shape[1])) * k;
    const double limit = std::sqrt(6.0 / fan_sum);
    std::uniform_real_distribution<double> dist(-limit, limit);
    for (T& v : ref.values) v = static_cast<T>(dist(rng));
  }
}

namespace {

template <typename To, typename From>
std::vector<To> cast_vec(const std::vector<From>& v) {
  return std::vector<To>(v.begin(), v.end());
}

template <typename To, typename From>
BasicTensor3<To> cast_tensor(const BasicTensor3<From>& t) {
  BasicTensor3<To> out(t.batch(), t.channels(), t.time());
  std::copy(t.flat().begin(), t.flat().end(), out.flat().begin());
  return out;
}

template <typename To, typename From>
std::vector<ConvLayerParams<To>> cast_layers(const std::vector<ConvLayerParams<From>>& layers) {
  std::vector<ConvLayerParams<To>> out;
  for (const auto& l : layers) out.push_back({cast_tensor<To>(l.w), cast_vec<To>(l.b)});
  return out;
}

}  // namespace

template <typename To, typename From>
StackParams<To> cast_params(const StackParams<From>& p) {
  return {cast_layers<To>(p.conv), cast_vec<To>(p.dense_w), cast_vec<To>(p.dense_b), p.outputs};
}

template <typename To, typename From>
GeneratorParams<To> cast_params(const GeneratorParams<From>& p) {
  return {cast_vec<To>(p.dense_w), cast_vec<To>(p.dense_b), cast_layers<To>(p.deconv)};
}

template <typename T>
StackOutput<T> stack_forward(const NetConfig& cfg, const StackParams<T>& p,
                             const BasicTensor3<T>& x, const ForwardOptions& opt,
                             StackTrace<T>* trace) {
  if (x.channels() != 1 || x.time() != cfg.input_len) {
    throw DimensionError("conv stack expects (B, 1, " + std::to_string(cfg.input_len) +
                         "), got " + x.shape_string());
  }
  const bool shuffle = opt.shuffle && cfg.phase_shuffle_n > 0;
  if (shuffle && opt.rng == nullptr) throw PreconditionError("phase shuffle requires an rng");
  const T slope = static_cast<T>(cfg.leaky_slope);
  StackOutput<T> out;
  if (trace) *trace = StackTrace<T>{};
  BasicTensor3<T> a = x;
  const std::size_t n_layers = p.conv.size();
  for (std::size_t l = 0; l < n_layers; ++l) {
    BasicTensor3<T> pre =
        kernels::conv1d<T>(a, p.conv[l].w, p.conv[l].b, cfg.stride, cfg.pad());
    BasicTensor3<T> h = kernels::leaky_relu(pre, slope);
    require_finite(h, "Conv" + std::to_string(l + 1));
    if (opt.capture) out.layer_activations.push_back(h);
    std::vector<int> shifts;
    if (shuffle && l + 1 < n_layers) {
      shifts = draw_shifts(h.batch(), cfg.phase_shuffle_n, *opt.rng);
      h = kernels::phase_shuffle<T>(h, shifts);
    }
    if (trace) {
      trace->inputs.push_back(std::move(a));
      trace->pre.push_back(std::move(pre));
      trace->shifts.push_back(std::move(shifts));
    }
    a = std::move(h);
  }
  out.logits = kernels::dense<T>(a.flat(), a.batch(), p.dense_w, p.dense_b, p.outputs);
  if (!all_finite<T>(out.logits)) throw NumericError("non-finite values at logits");
  if (trace) trace->features = std::move(a);
  return out;
}

template <typename T>
BasicTensor3<T> stack_backward(const NetConfig& cfg, const StackParams<T>& p,
                               const StackTrace<T>& trace, std::span<const T> dlogits,
                               StackParams<T>* grads, bool want_input_grad) {
  const auto& feat = trace.features;
  const std::size_t batch = feat.batch();
  const std::size_t in = feat.channels() * feat.time();
  if (dlogits.size() != batch * p.outputs) throw DimensionError("stack_backward: dlogits size");
  const T slope = static_cast<T>(cfg.leaky_slope);

  if (grads) {
    kernels::dense_weight_grad<T>(feat.flat(), dlogits, batch, p.outputs, in, grads->dense_w,
                                  grads->dense_b);
  }
  BasicTensor3<T> ga(batch, feat.channels(), feat.time());
  const auto gfeat = kernels::dense_input_grad<T>(dlogits, batch, p.dense_w, p.outputs, in);
  std::copy(gfeat.begin(), gfeat.end(), ga.flat().begin());

  for (std::size_t l = p.conv.size(); l-- > 0;) {
    if (!trace.shifts[l].empty()) ga = kernels::phase_shuffle_adjoint<T>(ga, trace.shifts[l]);
    BasicTensor3<T> gz = kernels::leaky_relu_grad(trace.pre[l], ga, slope);
    if (grads) {
      kernels::conv1d_weight_grad(trace.inputs[l], gz, cfg.stride, cfg.pad(), grads->conv[l].w);
      kernels::bias_grad<T>(gz, grads->conv[l].b);
    }
    if (l > 0 || want_input_grad) {
      ga = kernels::conv1d_input_grad(gz, p.conv[l].w, cfg.stride, cfg.pad(),
                                      trace.inputs[l].time());
    }
  }
  if (!want_input_grad) return {};
  return ga;
}

template <typename T>
PenaltyResult gradient_penalty(const NetConfig& cfg, const StackParams<T>& critic,
                               const BasicTensor3<T>& x_hat, double lambda,
                               const ForwardOptions& opt, StackParams<T>* grads) {
  if (critic.outputs != 1) throw DimensionError("gradient_penalty: critic must have one output");
  StackTrace<T> trace;
  ForwardOptions fwd = opt;
  fwd.capture = false;
  stack_forward(cfg, critic, x_hat, fwd, &trace);

  const std::size_t batch = x_hat.batch();
  const std::size_t n_layers = critic.conv.size();
  const T slope = static_cast<T>(cfg.leaky_slope);

  // Input gradient of each item's output, keeping the masked conv-output
  // gradients (delta_z) of every layer.
  std::vector<BasicTensor3<T>> delta_z(n_layers);
  const auto& feat = trace.features;
  BasicTensor3<T> da(batch, feat.channels(), feat.time());
  for (std::size_t b = 0; b < batch; ++b) {
    std::copy(critic.dense_w.begin(), critic.dense_w.end(), da.item(b).begin());
  }
  for (std::size_t l = n_layers; l-- > 0;) {
    if (!trace.shifts[l].empty()) da = kernels::phase_shuffle_adjoint<T>(da, trace.shifts[l]);
    delta_z[l] = kernels::leaky_relu_grad(trace.pre[l], da, slope);
    da = kernels::conv1d_input_grad(delta_z[l], critic.conv[l].w, cfg.stride, cfg.pad(),
                                    trace.inputs[l].time());
  }

  PenaltyResult result;
  result.grad_norms.resize(batch);
  BasicTensor3<T> u(batch, 1, x_hat.time());
  for (std::size_t b = 0; b < batch; ++b) {
    double sq = 0;
    for (T v : da.item(b)) sq += static_cast<double>(v) * static_cast<double>(v);
    const double norm = std::sqrt(sq);
    result.grad_norms[b] = norm;
    result.penalty += lambda * (norm - 1.0) * (norm - 1.0) / static_cast<double>(batch);
    if (norm > 0) {
      const double scale = 2.0 * lambda * (norm - 1.0) / (norm * static_cast<double>(batch));
      auto src = da.item(b);
      auto dst = u.item(b);
      for (std::size_t i = 0; i < src.size(); ++i) dst[i] = static_cast<T>(scale * src[i]);
    }
  }
  if (!std::isfinite(result.penalty)) throw NumericError("non-finite gradient penalty");
  if (!grads) return result;

  // Adjoint of the input-gradient computation, run in forward order.
  BasicTensor3<T> ua = std::move(u);
  for (std::size_t l = 0; l < n_layers; ++l) {
    kernels::conv1d_weight_grad(ua, delta_z[l], cfg.stride, cfg.pad(), grads->conv[l].w);
    BasicTensor3<T> uz = kernels::conv1d<T>(ua, critic.conv[l].w, {}, cfg.stride, cfg.pad());
    ua = kernels::leaky_relu_grad(trace.pre[l], uz, slope);
    if (!trace.shifts[l].empty()) ua = kernels::phase_shuffle<T>(ua, trace.shifts[l]);
  }
  for (std::size_t b = 0; b < batch; ++b) {
    const auto src = ua.item(b);
    for (std::size_t i = 0; i < src.size(); ++i) grads->dense_w[i] += src[i];
  }
  return result;
}

template <typename T>
BasicTensor3<T> generator_forward(const NetConfig& cfg, const GeneratorParams<T>& p,
                                  std::span<const T> latent, std::size_t batch,
                                  GeneratorTrace<T>* trace) {
  if (latent.size() != batch * cfg.latent_dim()) {
    throw DimensionError("generator: latent size " + std::to_string(latent.size()) +
                         " != batch x " + std::to_string(cfg.latent_dim()));
  }
  const T slope = static_cast<T>(cfg.leaky_slope);
  const std::size_t top_c = cfg.channels(cfg.n_layers);
  const std::size_t top_t = cfg.layer_len(cfg.n_layers);
  const auto h = kernels::dense<T>(latent, batch, p.dense_w, p.dense_b, top_c * top_t);
  BasicTensor3<T> dense_pre(batch, top_c, top_t);
  std::copy(h.begin(), h.end(), dense_pre.flat().begin());
  BasicTensor3<T> a = kernels::leaky_relu(dense_pre, slope);
  if (trace) {
    *trace = GeneratorTrace<T>{};
    trace->batch = batch;
    trace->latent.assign(latent.begin(), latent.end());
    trace->dense_pre = dense_pre;
  }
  const std::size_t n = p.deconv.size();
  for (std::size_t l = 0; l < n; ++l) {
    const std::size_t target = a.time() * cfg.stride;
    const std::size_t natural =
        conv_transposed_out_len(a.time(), cfg.kernel_width, cfg.stride, cfg.pad());
    if (natural > target) throw DimensionError("generator: transposed conv overshoots");
    BasicTensor3<T> pre = kernels::conv1d_transposed<T>(a, p.deconv[l].w, p.deconv[l].b,
                                                        cfg.stride, cfg.pad(), target - natural);
    BasicTensor3<T> next;
    if (l + 1 < n) {
      next = kernels::leaky_relu(pre, slope);
    } else {
      next = pre;
      for (T& v : next.flat()) v = std::tanh(v);
    }
    require_finite(next, "generator layer " + std::to_string(l + 1));
    if (trace) {
      trace->inputs.push_back(std::move(a));
      trace->pre.push_back(std::move(pre));
    }
    a = std::move(next);
  }
  if (trace) trace->output = a;
  return a;
}

template <typename T>
std::vector<T> generator_backward(const NetConfig& cfg, const GeneratorParams<T>& p,
                                  const GeneratorTrace<T>& trace, const BasicTensor3<T>& gout,
                                  GeneratorParams<T>* grads) {
  if (!gout.same_shape(trace.output)) throw DimensionError("generator_backward: shape mismatch");
  const T slope = static_cast<T>(cfg.leaky_slope);
  BasicTensor3<T> g = gout;
  {
    const auto y = trace.output.flat();
    auto gf = g.flat();
    for (std::size_t i = 0; i < gf.size(); ++i) gf[i] *= T(1) - y[i] * y[i];
  }
  for (std::size_t l = p.deconv.size(); l-- > 0;) {
    const auto& input = trace.inputs[l];
    if (grads) {
      kernels::bias_grad<T>(g, grads->deconv[l].b);
      kernels::conv1d_weight_grad(g, input, cfg.stride, cfg.pad(), grads->deconv[l].w);
    }
    BasicTensor3<T> gin = kernels::conv1d<T>(g, p.deconv[l].w, {}, cfg.stride, cfg.pad());
    const BasicTensor3<T>& pre = l > 0 ? trace.pre[l - 1] : trace.dense_pre;
    g = kernels::leaky_relu_grad(pre, gin, slope);
  }
  const std::size_t out = g.channels() * g.time();
  const std::size_t in = cfg.latent_dim();
  if (grads) {
    kernels::dense_weight_grad<T>(trace.latent, g.flat(), trace.batch, out, in, grads->dense_w,
                                  grads->dense_b);
  }
  return kernels::dense_input_grad<T>(g.flat(), trace.batch, p.dense_w, out, in);
}

QNetOutput q_network_forward(const Tensor3& x, const StackParams<float>& params,
                             const NetConfig& cfg, bool capture, bool shuffle_enabled,
                             std::mt19937_64* rng) {
  ForwardOptions opt{capture, shuffle_enabled, rng};
  auto out = stack_forward(cfg, params, x, opt);
  return {std::move(out.logits), std::move(out.layer_activations)};
}

#define CONVPROBE_NET_INSTANTIATE(T)                                                           \
  template std::vector<ParamRef<T>> param_refs(StackParams<T>&, const std::string&);           \
  template std::vector<ParamRef<T>> param_refs(GeneratorParams<T>&, const std::string&);       \
  template StackParams<T> make_stack<T>(const NetConfig&, std::size_t);                        \
  template GeneratorParams<T> make_generator<T>(const NetConfig&);                             \
  template void init_params(std::vector<ParamRef<T>>, std::mt19937_64&);                       \
  template StackOutput<T> stack_forward(const NetConfig&, const StackParams<T>&,               \
                                        const BasicTensor3<T>&, const ForwardOptions&,         \
                                        StackTrace<T>*);                                       \
  template BasicTensor3<T> stack_backward(const NetConfig&, const StackParams<T>&,             \
                                          const StackTrace<T>&, std::span<const T>,            \
                                          StackParams<T>*, bool);                              \
  template PenaltyResult gradient_penalty(const NetConfig&, const StackParams<T>&,             \
                                          const BasicTensor3<T>&, double,                      \
                                          const ForwardOptions&, StackParams<T>*);             \
  template BasicTensor3<T> generator_forward(const NetConfig&, const GeneratorParams<T>&,      \
                                             std::span<const T>, std::size_t,                  \
                                             GeneratorTrace<T>*);                              \
  template std::vector<T> generator_backward(const NetConfig&, const GeneratorParams<T>&,      \
                                             const GeneratorTrace<T>&, const BasicTensor3<T>&, \
                                             GeneratorParams<T>*);

CONVPROBE_NET_INSTANTIATE(float)
CONVPROBE_NET_INSTANTIATE(double)

template StackParams<double> cast_params<double, float>(const StackParams<float>&);
template StackParams<float> cast_params<float, double>(const StackParams<double>&);
template GeneratorParams<double> cast_params<double, float>(const GeneratorParams<float>&);
template GeneratorParams<float> cast_params<float, double>(const GeneratorParams<double>&);

}  // namespace convprobe
