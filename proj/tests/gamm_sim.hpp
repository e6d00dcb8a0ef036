#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <string>
#include <vector>

#include "convprobe/gamm.hpp"
#include "convprobe/io.hpp"

namespace convprobe::sim {

struct Columns {
  std::vector<double> value;
  std::vector<double> x;
  std::vector<std::string> word;
  std::vector<std::string> token;
};

inline DataTable to_table(const Columns& c) {
  DataTable t;
  t.names = {"value", "x", "word", "token_id"};
  t.columns.assign(4, {});
  for (std::size_t i = 0; i < c.value.size(); ++i) {
    t.columns[0].push_back(format_g(c.value[i], 17));
    t.columns[1].push_back(format_g(c.x[i], 17));
    t.columns[2].push_back(c.word.empty() ? "a" : c.word[i]);
    t.columns[3].push_back(c.token.empty() ? "t0" : c.token[i]);
  }
  return t;
}

inline double sin_truth(double x) { return std::sin(2 * std::numbers::pi * x); }

struct SinOutcome {
  double rmse = 0;
  double offset = 0;
  double offset_se = 0;
  double coverage = 0;
  bool pass = false;
};

// y = 0.5 * I(word = b) + sin(2 pi x) + N(0, 0.1^2), n = 500, k = 10.
inline SinOutcome sin_case(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> ux(0, 1);
  std::normal_distribution<double> noise(0, 0.1);
  Columns c;
  const double offset = 0.5;
  for (int i = 0; i < 500; ++i) {
    double x = ux(rng);
    std::string w = i % 2 ? "b" : "a";
    c.x.push_back(x);
    c.word.push_back(w);
    c.value.push_back((w == "b" ? offset : 0.0) + sin_truth(x) + noise(rng));
  }
  GammFit fit = fit_gamm(parse_formula("value ~ word + s(x, k=10)"), to_table(c));
  auto grid = linspace(fit.x_min, fit.x_max, 200);
  std::vector<std::string> lv(grid.size(), "a");
  auto pred = predict_with_ci(fit, lv, grid);
  SinOutcome out;
  double se2 = 0;
  std::size_t covered = 0;
  for (std::size_t i = 0; i < grid.size(); ++i) {
    double truth = sin_truth(grid[i]);
    se2 += (pred.mean[i] - truth) * (pred.mean[i] - truth);
    if (pred.lower[i] <= truth && truth <= pred.upper[i]) ++covered;
  }
  out.rmse = std::sqrt(se2 / static_cast<double>(grid.size()));
  out.coverage = static_cast<double>(covered) / static_cast<double>(grid.size());
  const auto& b = fit.block("word=b");
  out.offset = fit.beta(static_cast<Eigen::Index>(b.begin));
  out.offset_se = std::sqrt(fit.Vb(static_cast<Eigen::Index>(b.begin), static_cast<Eigen::Index>(b.begin)));
  out.pass = out.rmse < 0.05 && std::fabs(out.offset - offset) <= 2 * out.offset_se &&
             out.coverage >= 0.9;
  return out;
}

// Per-token AR(1) errors around a shared sin curve.
inline Columns ar1_series(std::uint64_t seed, std::size_t tokens, std::size_t len, double rho,
                          double sd) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> innov(0, sd);
  Columns c;
  for (std::size_t t = 0; t < tokens; ++t) {
    double e = innov(rng) / std::sqrt(1 - rho * rho);
    for (std::size_t i = 0; i < len; ++i) {
      if (i) e = rho * e + innov(rng);
      double x = static_cast<double>(i) / static_cast<double>(len - 1);
      c.x.push_back(x);
      c.value.push_back(sin_truth(x) + e);
      c.token.push_back("t" + std::to_string(1000 + t));
      c.word.push_back("a");
    }
  }
  return c;
}

// Two words on a shared x grid; word b adds a Gaussian bump of the given
// height centred at 0.5 with sd 0.05.
inline Columns bump_pair(std::uint64_t seed, std::size_t per_word, double height, double sd,
                         bool shared_noise = false) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> noise(0, sd);
  Columns c;
  std::vector<double> eps(per_word);
  for (auto& e : eps) e = noise(rng);
  for (int w = 0; w < 2; ++w) {
    for (std::size_t i = 0; i < per_word; ++i) {
      double x = static_cast<double>(i) / static_cast<double>(per_word - 1);
      double bump = w == 1 ? height * std::exp(-0.5 * std::pow((x - 0.5) / 0.05, 2)) : 0.0;
      c.x.push_back(x);
      c.value.push_back(sin_truth(x) + bump + (shared_noise ? eps[i] : noise(rng)));
      c.word.push_back(w ? "b" : "a");
      c.token.push_back(w ? "tb" : "ta");
    }
  }
  return c;
}

}  // namespace convprobe::sim
