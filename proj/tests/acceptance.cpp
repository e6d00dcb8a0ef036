#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <functional>
#include <iostream>
#include <map>
#include <random>
#include <set>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <Eigen/Dense>

#include "convprobe/audio.hpp"
#include "convprobe/error.hpp"
#include "convprobe/features.hpp"
#include "convprobe/gamm.hpp"
#include "convprobe/io.hpp"
#include "convprobe/kernels.hpp"
#include "convprobe/network.hpp"
#include "convprobe/report.hpp"
#include "convprobe/training.hpp"
#include "gamm_sim.hpp"
#include "test_util.hpp"

namespace fs = std::filesystem;
using namespace convprobe;
using Eigen::Index;
using Eigen::MatrixXd;
using Eigen::VectorXd;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(double v, int digits = 4) { return format_g(v, digits); }

// ---------------------------------------------------------------- shared setup

struct TrainSetup {
  std::size_t steps = 1200;
  std::size_t batch = 16;
  std::size_t n_critic = 2;
  double lr = 1e-3;
  double q_weight = 10.0;
};

TrainConfig train_config(const TrainSetup& s, std::uint64_t seed) {
  TrainConfig tc;
  tc.steps = s.steps;
  tc.batch_size = s.batch;
  tc.n_critic = s.n_critic;
  tc.lr_d = tc.lr_g = tc.lr_q = s.lr;
  tc.q_weight = s.q_weight;
  tc.checkpoint_interval = 0;
  tc.eval_interval = 0;
  tc.seed = seed;
  return tc;
}

// ---------------------------------------------------------------- criterion 1

Outcome class_emergence(const TrainSetup& setup, std::size_t seeds) {
  auto t0 = Clock::now();
  std::size_t passing = 0;
  std::string accs;
  for (std::uint64_t seed = 0; seed < seeds; ++seed) {
    NetConfig net = NetConfig::desk_preset();
    auto tokens = synth_toy_corpus(SynthConfig::standard(4), 60, 1000 + seed);
    auto split = split_corpus(tokens, 0.8, seed);
    auto res = train(split, net, train_config(setup, seed));
    double acc = res.status == TrainStatus::completed ? eval_q_accuracy(split.test, res.state.q, net).accuracy : 0.0;
    passing += acc > 0.80;
    accs += (accs.empty() ? "" : " ") + fmt(acc, 3);
    std::fprintf(stderr, "  [1] seed %llu: accuracy %.3f (%s)\n", static_cast<unsigned long long>(seed), acc,
                 res.message.c_str());
  }
  double minutes = seconds_since(t0) / 60;
  return {passing >= 3, "accuracy > 0.80 in " + std::to_string(passing) + "/" + std::to_string(seeds) +
                            " seeds (need >= 3) [" + accs + "], " + std::to_string(setup.steps) + " steps, " +
                            fmt(minutes, 3) + " min"};
}

// ---------------------------------------------------------------- criterion 2

Outcome extraction_oracle() {
  std::mt19937_64 rng(2);
  double worst = 0;
  for (int trial = 0; trial < 100; ++trial) {
    std::size_t c = 1 + rng() % 64, t = 1 + rng() % 200;
    auto act = testutil::random_tensor<float>(1, c, t, rng, 3.0);
    auto got = average_feature_maps(act);
    if (got.size() != t) return {false, "series length " + std::to_string(got.size()) + " != " + std::to_string(t)};
    for (std::size_t i = 0; i < t; ++i) {
      double s = 0;
      for (std::size_t k = 0; k < c; ++k) s += act(0, k, i);
      worst = std::max(worst, std::fabs(got[i] - s / static_cast<double>(c)));
    }
  }
  bool lengths_ok = true;
  std::string lens;
  for (const NetConfig& cfg : {NetConfig::desk_preset(), NetConfig::full_preset()}) {
    auto q = make_stack<float>(cfg, cfg.code.width);
    std::mt19937_64 prng(11);
    init_params(param_refs(q, "Q"), prng);
    AudioToken tok;
    tok.token_id = "probe";
    tok.word = "w";
    tok.samples.resize(cfg.input_len);
    std::normal_distribution<float> g(0, 0.3f);
    for (float& v : tok.samples) v = g(prng);
    auto ex = extract_all_layers(tok, q, cfg, false);
    lengths_ok &= ex.layers.size() == cfg.n_layers;
    std::size_t expect = cfg.input_len;
    lens += (lens.empty() ? "" : "; ") + std::to_string(cfg.input_len) + ":";
    for (const auto& ls : ex.layers) {
      expect /= cfg.stride;
      lengths_ok &= ls.values.size() == expect;
      lens += " " + std::to_string(ls.values.size());
    }
  }
  return {worst <= 1e-7 && lengths_ok,
          "max |mean - naive| = " + fmt(worst, 3) + " over 100 tensors (tol 1e-7); layer lengths " + lens};
}

// ---------------------------------------------------------------- criterion 3

Outcome adjointness() {
  std::mt19937_64 rng(3);
  double worst = 0;
  for (int trial = 0; trial < 50; ++trial) {
    std::uniform_int_distribution<std::size_t> u(1, 6);
    std::size_t b = u(rng), cin = u(rng), cout = u(rng), stride = 1 + rng() % 4;
    std::size_t k = stride + rng() % 8;
    std::size_t pad = rng() % k;
    std::size_t t = k + stride * (3 + rng() % 20);
    auto x = testutil::random_tensor<double>(b, cin, t, rng);
    auto w = testutil::random_tensor<double>(cout, cin, k, rng);
    auto y = kernels::conv1d<double>(x, w, {}, stride, pad);
    auto r = testutil::random_tensor<double>(b, cout, y.time(), rng);
    std::size_t natural = conv_transposed_out_len(y.time(), k, stride, pad);
    auto xt = kernels::conv1d_transposed<double>(r, w, {}, stride, pad, t - natural);
    if (xt.time() != t) return {false, "transposed length mismatch"};
    double lhs = 0, rhs = 0;
    for (std::size_t i = 0; i < y.size(); ++i) lhs += y.flat()[i] * r.flat()[i];
    for (std::size_t i = 0; i < x.size(); ++i) rhs += x.flat()[i] * xt.flat()[i];
    worst = std::max(worst, std::fabs(lhs - rhs) / std::max(1.0, std::fabs(lhs)));
  }
  return {worst <= 1e-6, "max |<Ax,r> - <x,A'r>| / max(1,|<Ax,r>|) = " + fmt(worst, 3) + " over 50 cases (tol 1e-6)"};
}

// ---------------------------------------------------------------- criterion 4

struct GradCheck {
  std::string name;
  double worst = 0;
  std::size_t probes = 0;
};

double rel(double a, double b) { return std::fabs(a - b) / std::max({std::fabs(a), std::fabs(b), 1e-8}); }

template <typename F>
double fd(std::span<double> v, std::size_t i, F&& f) {
  const double eps = 1e-4, saved = v[i];
  v[i] = saved + eps;
  double up = f();
  v[i] = saved - eps;
  double down = f();
  v[i] = saved;
  return (up - down) / (2 * eps);
}

double dotv(std::span<const double> a, std::span<const double> b) {
  double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

Outcome gradient_checks() {
  std::mt19937_64 rng(4);
  const std::size_t probes = 24;
  std::vector<GradCheck> checks;
  auto probe = [&](const std::string& name, std::span<double> v, std::span<const double> analytic,
                   const std::function<double()>& loss) {
    GradCheck g{name, 0, 0};
    for (std::size_t p = 0; p < probes; ++p) {
      std::size_t i = rng() % v.size();
      g.worst = std::max(g.worst, rel(analytic[i], fd(v, i, loss)));
      ++g.probes;
    }
    checks.push_back(g);
  };

  const std::size_t b = 3, cin = 3, cout = 4, k = 7, stride = 3, pad = 3, t = 30;
  auto x = testutil::random_tensor<double>(b, cin, t, rng);
  auto w = testutil::random_tensor<double>(cout, cin, k, rng);
  auto bias = testutil::random_vector<double>(cout, rng);
  auto y0 = kernels::conv1d<double>(x, w, bias, stride, pad);
  auto r = testutil::random_tensor<double>(b, cout, y0.time(), rng);
  auto conv_loss = [&] { return dotv(kernels::conv1d<double>(x, w, bias, stride, pad).flat(), r.flat()); };
  BasicTensor3<double> gw(cout, cin, k);
  kernels::conv1d_weight_grad<double>(x, r, stride, pad, gw);
  auto gx = kernels::conv1d_input_grad<double>(r, w, stride, pad, t);
  std::vector<double> gb(cout, 0.0);
  kernels::bias_grad<double>(r, gb);
  probe("conv1d/x", x.flat(), gx.flat(), conv_loss);
  probe("conv1d/w", w.flat(), gw.flat(), conv_loss);
  probe("conv1d/b", bias, gb, conv_loss);

  // Transposed: (b, cout, ts) -> (b, cin, .); bias has cin entries.
  auto xs = testutil::random_tensor<double>(b, cout, 9, rng);
  auto tb = testutil::random_vector<double>(cin, rng);
  auto yt0 = kernels::conv1d_transposed<double>(xs, w, tb, stride, pad, 1);
  auto rt = testutil::random_tensor<double>(b, cin, yt0.time(), rng);
  auto convt_loss = [&] { return dotv(kernels::conv1d_transposed<double>(xs, w, tb, stride, pad, 1).flat(), rt.flat()); };
  BasicTensor3<double> gwt(cout, cin, k);
  kernels::conv1d_weight_grad<double>(rt, xs, stride, pad, gwt);
  auto gxs = kernels::conv1d<double>(rt, w, {}, stride, pad);
  std::vector<double> gtb(cin, 0.0);
  kernels::bias_grad<double>(rt, gtb);
  probe("conv1d_transposed/x", xs.flat(), gxs.flat(), convt_loss);
  probe("conv1d_transposed/w", w.flat(), gwt.flat(), convt_loss);
  probe("conv1d_transposed/b", tb, gtb, convt_loss);

  auto lx = testutil::random_tensor<double>(3, 2, 20, rng);
  for (double& v : lx.flat()) v += v >= 0 ? 0.05 : -0.05;
  auto lr = testutil::random_tensor<double>(3, 2, 20, rng);
  auto relu_loss = [&] { return dotv(kernels::leaky_relu<double>(lx, 0.2).flat(), lr.flat()); };
  auto glx = kernels::leaky_relu_grad<double>(lx, lr, 0.2);
  probe("leaky_relu", lx.flat(), glx.flat(), relu_loss);

  auto sx = testutil::random_tensor<double>(3, 2, 20, rng);
  std::vector<int> shifts{2, -2, 1};
  auto sr = testutil::random_tensor<double>(3, 2, 20, rng);
  auto shuffle_loss = [&] { return dotv(kernels::phase_shuffle<double>(sx, shifts).flat(), sr.flat()); };
  auto gsx = kernels::phase_shuffle_adjoint<double>(sr, shifts);
  probe("phase_shuffle", sx.flat(), gsx.flat(), shuffle_loss);

  const std::size_t in = 9, out = 5;
  auto dx = testutil::random_vector<double>(b * in, rng);
  auto dw = testutil::random_vector<double>(out * in, rng);
  auto db = testutil::random_vector<double>(out, rng);
  auto dr = testutil::random_vector<double>(b * out, rng);
  auto dense_loss = [&] { return dotv(kernels::dense<double>(dx, b, dw, db, out), dr); };
  std::vector<double> gdw(out * in, 0.0), gdb(out, 0.0);
  kernels::dense_weight_grad<double>(dx, dr, b, out, in, gdw, gdb);
  auto gdx = kernels::dense_input_grad<double>(dr, b, dw, out, in);
  probe("dense/x", dx, gdx, dense_loss);
  probe("dense/w", dw, gdw, dense_loss);
  probe("dense/b", db, gdb, dense_loss);

  bool ok = true;
  double worst = 0;
  std::string worst_name;
  for (const auto& c : checks) {
    ok &= c.worst < 1e-3 && c.probes >= 20;
    if (c.worst >= worst) {
      worst = c.worst;
      worst_name = c.name;
    }
  }
  return {ok, std::to_string(checks.size()) + " gradients x " + std::to_string(probes) +
                  " probes, worst relative error " + fmt(worst, 3) + " (" + worst_name + "), tol 1e-3"};
}

// ---------------------------------------------------------------- criterion 5

Outcome wgan_gp_linear() {
  NetConfig cfg;
  cfg.input_len = 64;
  cfg.n_layers = 2;
  cfg.base_channels = 2;
  cfg.kernel_width = 5;
  cfg.stride = 4;
  cfg.latent_z_dim = 3;
  cfg.code = {CodeKind::categorical, 2};
  cfg.leaky_slope = 1.0;
  cfg.phase_shuffle_n = 0;
  std::mt19937_64 rng(5);
  double worst = 0;
  int cases = 0;
  for (double target : {0.25, 0.8, 1.0, 1.7, 3.0}) {
    auto d = make_stack<double>(cfg, 1);
    init_params(param_refs(d, "D"), rng);
    // Effective weights w_i = D(e_i) - D(0).
    auto weights = [&] {
      BasicTensor3<double> probe(cfg.input_len + 1, 1, cfg.input_len);
      for (std::size_t i = 0; i < cfg.input_len; ++i) probe(i + 1, 0, i) = 1.0;
      auto o = stack_forward(cfg, d, probe, {});
      double n2 = 0;
      for (std::size_t i = 0; i < cfg.input_len; ++i) n2 += std::pow(o.logits[i + 1] - o.logits[0], 2);
      return std::sqrt(n2);
    };
    double n0 = weights();
    for (double& v : d.dense_w) v *= target / n0;
    double wn = weights();
    double expect = 10.0 * (wn - 1) * (wn - 1);
    auto real = testutil::random_tensor<double>(6, 1, cfg.input_len, rng);
    auto fake = testutil::random_tensor<double>(6, 1, cfg.input_len, rng);
    auto res = d_loss_wgan_gp(cfg, d, real, fake, 10.0, rng, false, nullptr);
    worst = std::max(worst, std::fabs(res.penalty - expect));
    auto direct = gradient_penalty<double>(cfg, d, real, 10.0, {}, nullptr);
    worst = std::max(worst, std::fabs(direct.penalty - expect));
    cases += 2;
  }
  return {worst <= 1e-6, "max |penalty - lambda (||w|| - 1)^2| = " + fmt(worst, 3) + " over " +
                             std::to_string(cases) + " critics, ||w|| in {0.25..3} (tol 1e-6)"};
}

// ---------------------------------------------------------------- criterion 6

Outcome sin_recovery() {
  auto t0 = Clock::now();
  int passing = 0, rmse_ok = 0, offset_ok = 0, cover_ok = 0;
  double mean_cov = 0;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    auto o = sim::sin_case(seed);
    passing += o.pass;
    rmse_ok += o.rmse < 0.05;
    offset_ok += std::fabs(o.offset - 0.5) <= 2 * o.offset_se;
    cover_ok += o.coverage >= 0.9;
    mean_cov += o.coverage / 20;
  }
  double secs = seconds_since(t0);
  return {passing >= 18 && secs <= 60,
          std::to_string(passing) + "/20 seeds pass all three (need >= 18): rmse " + std::to_string(rmse_ok) +
              "/20, offset " + std::to_string(offset_ok) + "/20, band coverage >= 0.9 " + std::to_string(cover_ok) +
              "/20 (mean coverage " + fmt(mean_cov, 3) + "); " + fmt(secs, 3) + " s"};
}

// ---------------------------------------------------------------- criterion 7

Outcome pls_oracle() {
  std::mt19937_64 rng(7);
  std::normal_distribution<double> g(0, 1);
  auto rnd = [&](Index r, Index c) {
    MatrixXd m(r, c);
    for (Index i = 0; i < r; ++i)
      for (Index j = 0; j < c; ++j) m(i, j) = g(rng);
    return m;
  };
  double worst_beta = 0, worst_edf = 0;
  for (int inst = 0; inst < 50; ++inst) {
    Index n = 25 + static_cast<Index>(rng() % 40), p = 3 + static_cast<Index>(rng() % 10);
    MatrixXd X = rnd(n, p);
    VectorXd y = rnd(n, 1);
    std::vector<Penalty> pens;
    std::vector<double> lam;
    for (Index b = 1; b < p;) {
      Index m = std::min<Index>(p - b, 1 + static_cast<Index>(rng() % 5));
      MatrixXd A = rnd(std::max<Index>(1, m - 1), m);
      pens.push_back(make_penalty(static_cast<std::size_t>(b), A.transpose() * A, "p"));
      lam.push_back(std::exp(std::uniform_real_distribution<double>(-5, 5)(rng)));
      b += m;
    }
    auto res = fit_pls(X, y, pens, lam);
    MatrixXd H = X.transpose() * X;
    for (std::size_t j = 0; j < pens.size(); ++j) {
      Index b = static_cast<Index>(pens[j].begin), m = pens[j].S.rows();
      H.block(b, b, m, m) += lam[j] * pens[j].S;
    }
    Eigen::FullPivLU<MatrixXd> lu(H);
    VectorXd oracle = lu.solve(X.transpose() * y);
    worst_beta = std::max(worst_beta, (res.beta - oracle).norm() / std::max(1.0, oracle.norm()));
    MatrixXd A = X * lu.inverse() * X.transpose();
    worst_edf = std::max(worst_edf, std::fabs(res.edf.sum() - A.trace()));
  }

  // Fitted GAMM: block edfs add up to the total.
  auto c = sim::bump_pair(71, 120, 1.0, 0.1);
  GammFit fit = fit_gamm(parse_formula("value ~ word + s(x, k=10) + s(x, by=word, k=10)"), sim::to_table(c));
  double block_sum = 0;
  for (const auto& s : fit.block_stats) block_sum += s.edf;
  worst_edf = std::max(worst_edf, std::fabs(block_sum - fit.edf_total));

  // lambda -> 1e12: the smooth is affine, so its second differences vanish.
  sim::Columns sc;
  std::normal_distribution<double> noise(0, 0.1);
  for (int i = 0; i < 300; ++i) {
    double x = std::uniform_real_distribution<double>(0, 1)(rng);
    sc.x.push_back(x);
    sc.value.push_back(sim::sin_truth(x) + noise(rng));
  }
  auto spec = parse_formula("value ~ s(x, k=10)");
  Design d = assemble_design(spec, sim::to_table(sc));
  std::vector<double> big{1e12};
  auto res = fit_pls(d.X, d.y, d.penalties, big);
  auto grid = linspace(0, 1, 201);
  MatrixXd B = d.bases[0].evaluate(grid);
  VectorXd f = B * res.beta.segment(static_cast<Index>(d.blocks[1].begin), B.cols());
  double curv = 0;
  for (Index i = 1; i + 1 < f.size(); ++i) curv = std::max(curv, std::fabs(f(i + 1) - 2 * f(i) + f(i - 1)));

  return {worst_beta <= 1e-8 && worst_edf <= 1e-8 && curv < 1e-6,
          "beta rel err " + fmt(worst_beta, 3) + " (tol 1e-8) on 50 instances; edf additivity " + fmt(worst_edf, 3) +
              " (tol 1e-8); max second difference at lambda=1e12 " + fmt(curv, 3) + " (tol 1e-6)"};
}

// ---------------------------------------------------------------- criterion 8

double lag1_by_group(const VectorXd& e, const std::vector<std::size_t>& starts) {
  double num = 0, den = 0;
  for (std::size_t g = 0; g + 1 < starts.size(); ++g)
    for (std::size_t i = starts[g]; i < starts[g + 1]; ++i) {
      den += e(static_cast<Index>(i)) * e(static_cast<Index>(i));
      if (i > starts[g]) num += e(static_cast<Index>(i)) * e(static_cast<Index>(i - 1));
    }
  return num / den;
}

Outcome ar1_suite() {
  auto small = sim::to_table(sim::ar1_series(81, 20, 50, 0.5, 0.1));
  auto plain = fit_gamm(parse_formula("value ~ s(x, k=10)"), small);
  auto zero = fit_gamm(parse_formula("value ~ s(x, k=10) + ar1(0)"), small);
  bool identical = plain.beta.size() == zero.beta.size() &&
                   std::memcmp(plain.beta.data(), zero.beta.data(), sizeof(double) * plain.beta.size()) == 0 &&
                   std::memcmp(plain.Vb.data(), zero.Vb.data(), sizeof(double) * plain.Vb.size()) == 0 &&
                   plain.lambda == zero.lambda && plain.sigma2 == zero.sigma2;

  auto big = sim::to_table(sim::ar1_series(82, 50, 100, 0.8, 0.1));
  auto fit = fit_gamm(parse_formula("value ~ s(x, k=10) + ar1(auto)"), big);
  double r1 = lag1_by_group(fit.residuals, fit.group_starts);
  bool ok = identical && fit.rho >= 0.75 && fit.rho <= 0.85 && std::fabs(r1) < 0.05;
  return {ok, std::string("rho=0 refit ") + (identical ? "bit-identical" : "DIFFERS") + "; rho-hat " + fmt(fit.rho) +
                  " (need [0.75, 0.85]); prewhitened r1 " + fmt(r1, 3) + " (need |r1| < 0.05)"};
}

// ---------------------------------------------------------------- criterion 9

struct ContrastSetup {
  std::size_t steps = 1200;
  std::size_t per_class = 40;
};

// Adds a whole-utterance interval so that slices keep the context around the
// noise segment.
void add_word_interval(AudioToken& t) {
  std::size_t left = left_pad_samples(t.sample_rate);
  std::size_t end = t.samples.size();
  while (end > left && t.samples[end - 1] == 0.0f) --end;
  t.intervals.push_back({"word", left, end});
}

DataTable interval_table(const std::vector<IntervalSeries>& rows, const std::map<std::string, std::string>& relabel) {
  DataTable t;
  t.names = {"value", "norm_time", "word", "token_id"};
  t.columns.assign(4, {});
  for (const auto& s : rows) {
    auto it = relabel.find(s.token_id);
    std::string w = it == relabel.end() ? s.word : it->second;
    for (std::size_t i = 0; i < s.values.size(); ++i) {
      t.columns[0].push_back(format_g(s.values[i], 17));
      t.columns[1].push_back(format_g(s.norm_time[i], 17));
      t.columns[2].push_back(w);
      t.columns[3].push_back(s.token_id);
    }
  }
  return t;
}

const char* kContrastFormula =
    "value ~ word + s(norm_time, k=10) + s(norm_time, by=word, k=10) + fs(norm_time, token_id) + ar1(auto)";

Outcome contrast_detection(const TrainSetup& base, const ContrastSetup& cs) {
  auto t0 = Clock::now();
  const std::uint64_t seed = 9;
  SynthConfig sc = SynthConfig::contrast(4);
  auto tokens = synth_toy_corpus(sc, cs.per_class, 900);
  for (auto& t : tokens) add_word_interval(t);
  auto split = split_corpus(tokens, 0.8, seed);
  TrainSetup ts = base;
  ts.steps = cs.steps;
  NetConfig net = NetConfig::desk_preset();
  auto res = train(split, net, train_config(ts, seed));

  const std::string& wa = sc.templates[0].word;
  const std::string& wb = sc.templates[1].word;
  std::vector<AudioToken> pair;
  for (const auto& t : tokens)
    if (t.word == wa || t.word == wb) pair.push_back(t);
  auto ext = extract_tokens(pair, res.state.q, net, false);

  // Support of the noise segment in the word's normalized time.
  double seg_lo = 1, seg_hi = 0;
  for (const auto& t : pair) {
    const auto& noise = t.intervals[0];
    const auto& word = t.intervals[1];
    double span = static_cast<double>(word.end_sample - word.start_sample);
    seg_lo = std::min(seg_lo, static_cast<double>(noise.start_sample - word.start_sample) / span);
    seg_hi = std::max(seg_hi, static_cast<double>(noise.end_sample - word.start_sample) / span);
  }

  std::string detail;
  bool found = false;
  std::size_t best_layer = 0;
  double best_p = 1;
  std::vector<std::vector<IntervalSeries>> by_layer(net.n_layers + 1);
  for (std::size_t i = 0; i < pair.size(); ++i)
    for (const auto& ls : ext[i].layers) {
      try {
        by_layer[ls.layer_index].push_back(slice_to_interval(ls, pair[i].intervals[1], net.stride));
      } catch (const IntervalTooShortError&) {
      }
    }
  for (std::size_t layer = 1; layer <= net.n_layers; ++layer) {
    if (by_layer[layer].size() != pair.size()) continue;
    try {
      GammFit fit = fit_gamm(parse_formula(kContrastFormula), interval_table(by_layer[layer], {}));
      SmoothRow row = test_smooth(fit, "s(norm_time):word=" + wb);
      auto grid = linspace(0, 1, 200);
      auto curve = difference_smooth(fit, wb, wa, grid);
      bool overlap = false;
      for (const auto& r : curve.significant_regions) overlap |= r.end >= seg_lo && r.begin <= seg_hi;
      std::fprintf(stderr, "  [9] layer %zu: F %.3f p %.3g, %zu region(s), overlap %d\n", layer, row.F, row.p,
                   curve.significant_regions.size(), overlap ? 1 : 0);
      if (row.p < 0.01 && overlap && (!found || row.p < best_p)) {
        found = true;
        best_layer = layer;
        best_p = row.p;
      }
    } catch (const std::exception& e) {
      std::fprintf(stderr, "  [9] layer %zu: %s\n", layer, e.what());
    }
  }
  if (!found) return {false, "no layer gives p < 0.01 with regions overlapping the segment [" + fmt(seg_lo, 3) + ", " +
                                 fmt(seg_hi, 3) + "]; " + fmt(seconds_since(t0) / 60, 3) + " min"};

  // Null pair: tokens of one word split at random into two pseudo-words.
  int null_ok = 0;
  std::string ps;
  std::vector<IntervalSeries> same;
  for (const auto& s : by_layer[best_layer])
    if (s.word == wa) same.push_back(s);
  for (std::uint64_t ns = 0; ns < 5; ++ns) {
    std::vector<std::string> ids;
    for (const auto& s : same) ids.push_back(s.token_id);
    std::mt19937_64 rng(500 + ns);
    std::shuffle(ids.begin(), ids.end(), rng);
    std::map<std::string, std::string> relabel;
    for (std::size_t i = 0; i < ids.size(); ++i) relabel[ids[i]] = i < ids.size() / 2 ? "pa" : "pb";
    GammFit fit = fit_gamm(parse_formula(kContrastFormula), interval_table(same, relabel));
    double p = test_smooth(fit, "s(norm_time):word=pb").p;
    null_ok += p > 0.05;
    ps += (ps.empty() ? "" : " ") + fmt(p, 3);
  }
  return {null_ok >= 4, "contrast layer " + std::to_string(best_layer) + " p " + fmt(best_p, 3) +
                            " with regions overlapping [" + fmt(seg_lo, 3) + ", " + fmt(seg_hi, 3) +
                            "]; null pair p > 0.05 in " + std::to_string(null_ok) + "/5 (need >= 4) [" + ps + "]; " +
                            fmt(seconds_since(t0) / 60, 3) + " min"};
}

// ---------------------------------------------------------------- criterion 10

Outcome report_fidelity() {
  TestReport r;
  r.parametric.push_back({"(Intercept)", 0.6832, 0.0215, 31.7138, 1e-150});
  r.parametric.push_back({"Word=greasy", 0.6323, 0.0314, 20.1116, 1e-80});
  auto latex = split_lines(render_table(r, TableStyle::latex));
  auto text = split_lines(render_table(r, TableStyle::text));
  auto has = [](const std::vector<std::string>& lines, const std::string& want) {
    return std::find(lines.begin(), lines.end(), want) != lines.end();
  };
  bool ok = has(latex, "  (Intercept) & 0.6832 & 0.0215 & 31.7138 & $<$ 0.0001 \\\\ ") &&
            has(latex, "  Word=greasy & 0.6323 & 0.0314 & 20.1116 & $<$ 0.0001 \\\\ ") &&
            has(text, "(Intercept) & 0.6832 & 0.0215 & 31.7138 & < 0.0001") &&
            has(text, "Word=greasy & 0.6323 & 0.0314 & 20.1116 & < 0.0001");
  return {ok, ok ? "Intercept and Word=greasy rows byte-exact (latex and text styles)" : "row mismatch"};
}

// ---------------------------------------------------------------- criterion 11

int run_in(const fs::path& dir, const std::string& cli, const std::string& args) {
  std::string cmd = "cd '" + dir.string() + "' && '" + cli + "' " + args + " > cli.log 2>&1";
  return std::system(cmd.c_str());
}

Outcome determinism(const std::string& cli_arg, const fs::path& work) {
  if (cli_arg.empty() || !fs::exists(cli_arg)) return {false, "CLI binary not found: '" + cli_arg + "'"};
  const std::string cli = fs::absolute(cli_arg).string();
  const std::vector<std::pair<std::string, std::string>> steps = {
      {"synth-data", "synth-data --out corpus --classes 2 --per-class 6 --seed 5 --contrast"},
      {"ingest", "ingest --wav-dir corpus/wav --annotations corpus/annotations.csv --out ingest/manifest.json --seed 5"},
      {"train", "train --manifest corpus/manifest.json --out train --steps 3 --batch-size 4 --n-critic 2 "
                "--eval-interval 1 --checkpoint-interval 2 --seed 5"},
      {"eval", "eval --checkpoint train/final.bin --manifest corpus/manifest.json --split all --out eval.csv --seed 5"},
      {"extract", "extract --checkpoint train/final.bin --manifest corpus/manifest.json --layers 1,2 --phone s "
                  "--out acts.csv --seed 5"},
      {"gamm-fit", "gamm-fit --data acts.csv --layer 2 --formula \"value ~ word + s(sample, k=8) + s(sample, by=word, "
                   "k=8) + ar1(auto)\" --out fit.bin --report table.csv --style csv --prediction-plot pred.svg --seed 5"},
      {"gamm-test", "gamm-test --fit fit.bin --out table.tex --style latex --prediction-plot pred2.svg --seed 5"},
      {"diff-plot", "diff-plot --fit fit.bin --a w1 --b w0 --out diff.svg --csv diff.csv --regions regions.csv --seed 5"},
      {"layer-plot", "layer-plot --checkpoint train/final.bin --manifest corpus/manifest.json --token w0_001 "
                     "--out layers.svg --seed 5"},
  };
  std::vector<fs::path> dirs{work / "det_a", work / "det_b"};
  for (const auto& d : dirs) {
    fs::remove_all(d);
    fs::create_directories(d);
    for (const auto& [name, args] : steps)
      if (int rc = run_in(d, cli, args); rc != 0)
        return {false, name + " failed in " + d.string() + " (status " + std::to_string(rc) + ")"};
  }
  std::size_t compared = 0;
  std::vector<std::string> differ;
  std::set<std::string> kinds;
  for (const auto& e : fs::recursive_directory_iterator(dirs[0])) {
    if (!e.is_regular_file()) continue;
    auto rel = fs::relative(e.path(), dirs[0]);
    std::string name = rel.filename().string();
    if (name == "cli.log" || name == "run.json" || name.ends_with(".run.json")) continue;
    ++compared;
    kinds.insert(rel.extension().string());
    auto other = dirs[1] / rel;
    if (!fs::exists(other) || read_file(e.path()) != read_file(other)) differ.push_back(rel.string());
  }
  std::string kind_list;
  for (const auto& k : kinds) kind_list += (kind_list.empty() ? "" : ",") + k;
  std::string detail = "9 subcommands run twice; " + std::to_string(compared) + " outputs (" + kind_list + ") compared";
  if (!differ.empty()) detail += "; differing: " + differ.front() + (differ.size() > 1 ? " ..." : "");
  return {differ.empty() && compared > 0, detail};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance checks, one line per criterion"};
  std::string only, cli, work = (fs::temp_directory_path() / "convprobe_acceptance").string();
  TrainSetup setup;
  ContrastSetup cs;
  std::size_t seeds = 5;
  app.add_option("--only", only, "Comma list of criteria to run (default: all)");
  app.add_option("--cli", cli, "Path to the convprobe binary");
  app.add_option("--workdir", work, "Scratch directory");
  app.add_option("--train-steps", setup.steps, "Training steps for criterion 1")->capture_default_str();
  app.add_option("--train-seeds", seeds, "Seeds for criterion 1")->capture_default_str();
  app.add_option("--batch", setup.batch)->capture_default_str();
  app.add_option("--n-critic", setup.n_critic)->capture_default_str();
  app.add_option("--lr", setup.lr)->capture_default_str();
  app.add_option("--q-weight", setup.q_weight)->capture_default_str();
  app.add_option("--contrast-steps", cs.steps, "Training steps for criterion 9")->capture_default_str();
  app.add_option("--contrast-per-class", cs.per_class)->capture_default_str();
  CLI11_PARSE(app, argc, argv);

  std::set<int> run;
  if (only.empty())
    for (int i = 1; i <= 11; ++i) run.insert(i);
  else
    for (const auto& f : split_fields(only)) run.insert(std::stoi(f));
  fs::create_directories(work);

  const std::map<int, std::string> names = {
      {1, "unsupervised class emergence"}, {2, "feature-map averaging oracle"}, {3, "conv adjointness"},
      {4, "kernel gradient checks"},       {5, "WGAN-GP linear critic"},        {6, "GAMM sin-curve recovery"},
      {7, "penalized solve oracle"},       {8, "AR(1) suite"},                  {9, "contrast detection"},
      {10, "report fidelity"},             {11, "CLI determinism"}};
  const std::map<int, std::function<Outcome()>> checks = {
      {1, [&] { return class_emergence(setup, seeds); }},
      {2, extraction_oracle},
      {3, adjointness},
      {4, gradient_checks},
      {5, wgan_gp_linear},
      {6, sin_recovery},
      {7, pls_oracle},
      {8, ar1_suite},
      {9, [&] { return contrast_detection(setup, cs); }},
      {10, report_fidelity},
      {11, [&] { return determinism(cli, work); }}};

  int failed = 0;
  for (int id : run) {
    auto t0 = Clock::now();
    Outcome o;
    try {
      o = checks.at(id)();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failed += !o.pass;
    std::printf("criterion %2d %s  %-30s %s (%.1f s)\n", id, o.pass ? "PASS" : "FAIL", names.at(id).c_str(),
                o.detail.c_str(), seconds_since(t0));
    std::fflush(stdout);
  }
  std::printf("%zu criteria, %d passed, %d failed\n", run.size(), static_cast<int>(run.size()) - failed, failed);
  return failed ? 1 : 0;
}
