#include "convprobe/network.hpp"
#include "doctest.h"
#include "test_util.hpp"

using namespace convprobe;

namespace {

NetConfig tiny_config() {
  NetConfig cfg;
  cfg.input_len = 64;
  cfg.n_layers = 2;
  cfg.base_channels = 2;
  cfg.kernel_width = 5;
  cfg.stride = 4;
  cfg.phase_shuffle_n = 1;
  cfg.latent_z_dim = 3;
  cfg.code = {CodeKind::categorical, 2};
  return cfg;
}

template <typename P>
void randomize(P& params, std::uint64_t seed, double scale = 1.0) {
  std::mt19937_64 rng(seed);
  init_params(param_refs(params, "p"), rng);
  std::normal_distribution<double> bias(0.0, 0.1);
  for (auto& ref : param_refs(params, "p")) {
    if (ref.shape.size() == 1) {
      for (auto& v : ref.values) v = static_cast<std::decay_t<decltype(v)>>(bias(rng));
    } else {
      for (auto& v : ref.values) v *= scale;
    }
  }
}

// Finite differences are only meaningful when no pre-activation sits within
// the probe step of the Leaky ReLU kink.
BasicTensor3<double> input_clear_of_kinks(const NetConfig& cfg, const StackParams<double>& p,
                                          std::size_t batch, std::mt19937_64& rng,
                                          std::uint64_t shuffle_seed) {
  for (;;) {
    auto x = testutil::random_tensor<double>(batch, 1, cfg.input_len, rng);
    StackTrace<double> trace;
    std::mt19937_64 srng(shuffle_seed);
    stack_forward(cfg, p, x, {false, true, &srng}, &trace);
    double closest = 1e9;
    for (const auto& pre : trace.pre) {
      for (double v : pre.flat()) closest = std::min(closest, std::abs(v));
    }
    if (closest > 1e-3) return x;
  }
}

}  // namespace

TEST_CASE("config presets validate and give the documented layer lengths") {
  const auto full = NetConfig::full_preset();
  full.validate();
  CHECK(full.pad() == 11);
  std::vector<std::size_t> lens;
  for (std::size_t l = 1; l <= full.n_layers; ++l) lens.push_back(full.layer_len(l));
  CHECK(lens == std::vector<std::size_t>{4096, 1024, 256, 64, 16});

  const auto desk = NetConfig::desk_preset();
  desk.validate();
  CHECK(desk.channels(1) == 16);
  CHECK(desk.channels(4) == 128);
  CHECK(desk.layer_len(4) == 16);

  NetConfig bad = desk;
  bad.input_len = 4000;
  CHECK_THROWS_AS(bad.validate(), SpecError);
  bad = desk;
  bad.stride = 1;
  CHECK_THROWS_AS(bad.validate(), SpecError);

  nlohmann::json j = desk;
  CHECK(j.get<NetConfig>() == desk);
}

TEST_CASE("q_network_forward shapes at both presets") {
  for (const auto& cfg : {NetConfig::desk_preset(), NetConfig::full_preset()}) {
    auto q = make_stack<float>(cfg, cfg.code.width);
    std::mt19937_64 rng(1);
    init_params(param_refs(q, "Q"), rng);
    auto x = testutil::random_tensor<float>(1, 1, cfg.input_len, rng, 0.3);
    const auto out = q_network_forward(x, q, cfg, true, false);
    REQUIRE(out.layer_activations.size() == cfg.n_layers);
    for (std::size_t l = 0; l < cfg.n_layers; ++l) {
      CHECK(out.layer_activations[l].time() == cfg.input_len / static_cast<std::size_t>(std::pow(cfg.stride, l + 1)));
      CHECK(out.layer_activations[l].channels() == cfg.channels(l + 1));
    }
    CHECK(out.logits.size() == cfg.code.width);

    const auto no_capture = q_network_forward(x, q, cfg, false, false);
    CHECK(no_capture.layer_activations.empty());
    CHECK(no_capture.logits == out.logits);
  }
}

TEST_CASE("q_network_forward is deterministic without shuffle and rejects bad input") {
  const auto cfg = NetConfig::desk_preset();
  auto q = make_stack<float>(cfg, 4);
  std::mt19937_64 rng(9);
  init_params(param_refs(q, "Q"), rng);
  const auto x = testutil::random_tensor<float>(2, 1, cfg.input_len, rng, 0.3);
  const auto a = q_network_forward(x, q, cfg, true, false);
  const auto b = q_network_forward(x, q, cfg, true, false);
  CHECK(a.logits == b.logits);
  for (std::size_t l = 0; l < cfg.n_layers; ++l) CHECK(a.layer_activations[l] == b.layer_activations[l]);

  std::mt19937_64 s1(4), s2(4);
  CHECK(q_network_forward(x, q, cfg, false, true, &s1).logits ==
        q_network_forward(x, q, cfg, false, true, &s2).logits);

  CHECK_THROWS_AS(q_network_forward(Tensor3(1, 1, 100), q, cfg, false, false), DimensionError);
  Tensor3 bad = x;
  bad.flat()[10] = std::numeric_limits<float>::infinity();
  CHECK_THROWS_AS(q_network_forward(bad, q, cfg, false, false), NumericError);
}

TEST_CASE("generator output length, tanh bound and zero weights") {
  const auto cfg = NetConfig::desk_preset();
  auto g = make_generator<float>(cfg);
  std::vector<float> z(3 * cfg.latent_dim(), 0.5f);
  const auto zero_out = generator_forward<float>(cfg, g, z, 3);
  CHECK(zero_out.time() == cfg.input_len);
  CHECK(zero_out.channels() == 1);
  for (float v : zero_out.flat()) CHECK(v == 0.0f);

  std::mt19937_64 rng(2);
  init_params(param_refs(g, "G"), rng);
  for (auto& ref : param_refs(g, "G")) {
    for (auto& v : ref.values) v *= 8.0f;  // drive the output into saturation
  }
  const auto out = generator_forward<float>(cfg, g, z, 3);
  float max_abs = 0;
  for (float v : out.flat()) max_abs = std::max(max_abs, std::abs(v));
  CHECK(max_abs <= 1.0f);
  CHECK(max_abs > 0.1f);

  auto tiny = tiny_config();
  tiny.input_len = 40;
  CHECK_THROWS_AS(make_generator<double>(tiny), SpecError);
  auto gt = make_generator<double>(tiny_config());
  std::vector<double> zt(tiny.latent_dim() + 1, 0.1);
  CHECK_THROWS_AS(generator_forward<double>(tiny_config(), gt, zt, 1), DimensionError);
}

TEST_CASE("stack gradients match finite differences") {
  const auto cfg = tiny_config();
  auto p = make_stack<double>(cfg, 3);
  randomize(p, 21);
  std::mt19937_64 rng(5);
  auto x = input_clear_of_kinks(cfg, p, 2, rng, 99);
  const auto r = testutil::random_vector<double>(2 * 3, rng);

  auto loss = [&] {
    std::mt19937_64 srng(99);
    const auto out = stack_forward(cfg, p, x, {false, true, &srng});
    return testutil::dot<double>(out.logits, r);
  };
  StackTrace<double> trace;
  std::mt19937_64 srng(99);
  stack_forward(cfg, p, x, {false, true, &srng}, &trace);
  auto grads = make_stack<double>(cfg, 3);
  const auto gx = stack_backward<double>(cfg, p, trace, r, &grads, true);

  auto refs = param_refs(p, "p");
  auto grefs = param_refs(grads, "p");
  std::mt19937_64 pick(3);
  for (std::size_t i = 0; i < refs.size(); ++i) {
    for (int probe = 0; probe < 20; ++probe) {
      const std::size_t j = pick() % refs[i].values.size();
      const double fd = testutil::central_difference(refs[i].values, j, loss);
      INFO(refs[i].name << "[" << j << "]");
      CHECK(testutil::rel_err(grefs[i].values[j], fd) < 1e-3);
    }
  }
  for (int probe = 0; probe < 20; ++probe) {
    const std::size_t j = pick() % x.size();
    CHECK(testutil::rel_err(gx.flat()[j], testutil::central_difference(x.flat(), j, loss)) < 1e-3);
  }
}

TEST_CASE("generator gradients match finite differences") {
  const auto cfg = tiny_config();
  auto g = make_generator<double>(cfg);
  randomize(g, 8, 1.5);
  std::mt19937_64 rng(6);
  auto z = testutil::random_vector<double>(2 * cfg.latent_dim(), rng);

  auto sum_loss = [&] {
    const auto out = generator_forward<double>(cfg, g, z, 2);
    double s = 0;
    for (double v : out.flat()) s += v;
    return s;
  };
  GeneratorTrace<double> trace;
  const auto out = generator_forward<double>(cfg, g, z, 2, &trace);
  BasicTensor3<double> ones(out.batch(), out.channels(), out.time(), 1.0);
  auto grads = make_generator<double>(cfg);
  const auto dz = generator_backward<double>(cfg, g, trace, ones, &grads);
  for (std::size_t j = 0; j < z.size(); ++j) {
    CHECK(testutil::rel_err(dz[j], testutil::central_difference<double>(z, j, sum_loss)) < 1e-3);
  }
  auto refs = param_refs(g, "G");
  auto grefs = param_refs(grads, "G");
  std::mt19937_64 pick(4);
  for (std::size_t i = 0; i < refs.size(); ++i) {
    for (int probe = 0; probe < 20; ++probe) {
      const std::size_t j = pick() % refs[i].values.size();
      INFO(refs[i].name << "[" << j << "]");
      CHECK(testutil::rel_err(grefs[i].values[j],
                              testutil::central_difference(refs[i].values, j, sum_loss)) < 1e-3);
    }
  }
}

TEST_CASE("gradient penalty parameter gradient matches finite differences") {
  const auto cfg = tiny_config();
  auto critic = make_stack<double>(cfg, 1);
  randomize(critic, 31, 1.3);
  std::mt19937_64 rng(7);
  const auto x_hat = input_clear_of_kinks(cfg, critic, 3, rng, 12);
  const double lambda = 10.0;

  auto penalty = [&] {
    std::mt19937_64 srng(12);
    return gradient_penalty<double>(cfg, critic, x_hat, lambda, {false, true, &srng}, nullptr)
        .penalty;
  };
  auto grads = make_stack<double>(cfg, 1);
  std::mt19937_64 srng(12);
  const auto res =
      gradient_penalty<double>(cfg, critic, x_hat, lambda, {false, true, &srng}, &grads);
  CHECK(res.penalty == doctest::Approx(penalty()).epsilon(1e-14));

  auto refs = param_refs(critic, "D");
  auto grefs = param_refs(grads, "D");
  std::mt19937_64 pick(8);
  for (std::size_t i = 0; i < refs.size(); ++i) {
    for (int probe = 0; probe < 20; ++probe) {
      const std::size_t j = pick() % refs[i].values.size();
      INFO(refs[i].name << "[" << j << "]");
      // Biases only move the activation pattern, so their gradient is zero.
      CHECK(testutil::rel_err(grefs[i].values[j],
                              testutil::central_difference(refs[i].values, j, penalty), 1e-6) <
            1e-3);
    }
  }
}

TEST_CASE("gradient penalty of a linear critic is lambda (||w|| - 1)^2") {
  auto cfg = tiny_config();
  cfg.leaky_slope = 1.0;  // identity activation: the stack is linear in x
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 5; ++trial) {
    auto critic = make_stack<double>(cfg, 1);
    randomize(critic, 100 + trial);
    // Effective weight vector by probing basis directions.
    BasicTensor3<double> zero(1, 1, cfg.input_len);
    const double d0 = stack_forward(cfg, critic, zero, {}).logits[0];
    double w_norm_sq = 0;
    for (std::size_t i = 0; i < cfg.input_len; ++i) {
      BasicTensor3<double> e(1, 1, cfg.input_len);
      e.flat()[i] = 1.0;
      const double wi = stack_forward(cfg, critic, e, {}).logits[0] - d0;
      w_norm_sq += wi * wi;
    }
    const double expected = 10.0 * (std::sqrt(w_norm_sq) - 1.0) * (std::sqrt(w_norm_sq) - 1.0);
    const auto x_hat = testutil::random_tensor<double>(4, 1, cfg.input_len, rng);
    const auto res = gradient_penalty<double>(cfg, critic, x_hat, 10.0, {}, nullptr);
    CHECK(std::abs(res.penalty - expected) < 1e-6);
  }
}
