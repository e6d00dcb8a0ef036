#include <algorithm>
#include <cmath>

#include <boost/math/distributions/fisher_f.hpp>
#include <boost/math/distributions/normal.hpp>
#include <boost/math/distributions/students_t.hpp>

#include "convprobe/container.hpp"
#include "convprobe/error.hpp"
#include "convprobe/gamm.hpp"

namespace convprobe {

namespace {

using Eigen::Index;
using Eigen::MatrixXd;
using Eigen::VectorXd;

double clamp01(double p) { return std::clamp(p, 0.0, 1.0); }

double z_quantile(double level) {
  if (!(level > 0 && level < 1)) throw PreconditionError("confidence level must lie in (0, 1)");
  return boost::math::quantile(boost::math::normal(), 0.5 + level / 2);
}

bool is_smooth(BlockKind k) {
  return k == BlockKind::reference || k == BlockKind::difference || k == BlockKind::factor_random;
}

}  // namespace

double residual_df(const GammFit& fit) { return static_cast<double>(fit.n) - fit.edf_total; }

ParametricRow parametric_row(const std::string& name, double estimate, double se, double df) {
  ParametricRow r;
  r.name = name;
  r.estimate = estimate;
  r.se = se;
  if (se > 0) {
    r.t = estimate / se;
  } else {
    r.t = estimate == 0 ? 0 : std::copysign(std::numeric_limits<double>::infinity(), estimate);
  }
  if (!(df > 0)) throw DegenerateTestError("no residual degrees of freedom left for a t test");
  if (std::isinf(r.t)) {
    r.p = 0;
  } else {
    boost::math::students_t dist(df);
    r.p = clamp01(2 * boost::math::cdf(boost::math::complement(dist, std::fabs(r.t))));
  }
  return r;
}

std::vector<ParametricRow> test_parametric(const GammFit& fit) {
  std::vector<ParametricRow> rows;
  double df = residual_df(fit);
  for (const auto& b : fit.blocks) {
    if (b.kind != BlockKind::intercept && b.kind != BlockKind::parametric) continue;
    const Index c = static_cast<Index>(b.begin);
    rows.push_back(parametric_row(b.name, fit.beta(c), std::sqrt(std::max(0.0, fit.Vb(c, c))), df));
  }
  return rows;
}

SmoothRow test_smooth(const GammFit& fit, const std::string& term) {
  const DesignBlock& b = fit.block(term);
  if (!is_smooth(b.kind)) throw PreconditionError("'" + term + "' is not a smooth term");
  const BlockStats* st = nullptr;
  for (const auto& s : fit.block_stats) {
    if (s.name == term) st = &s;
  }
  if (!st) throw SpecError("fit has no statistics for '" + term + "'");
  const Index b0 = static_cast<Index>(b.begin);
  const Index m = static_cast<Index>(b.end - b.begin);
  VectorXd beta = fit.beta.segment(b0, m);
  MatrixXd V = fit.Vb.block(b0, b0, m, m);
  V = 0.5 * (V + V.transpose()).eval();
  Eigen::SelfAdjointEigenSolver<MatrixXd> es(V);
  const VectorXd& ev = es.eigenvalues();  // ascending
  double top = ev.size() ? ev(ev.size() - 1) : 0.0;
  Index numeric_rank = 0;
  for (Index i = 0; i < ev.size(); ++i) {
    if (ev(i) > top * 1e-12 && ev(i) > 0) ++numeric_rank;
  }
  if (numeric_rank == 0) throw DegenerateTestError("covariance of '" + term + "' has rank zero");
  double df2 = residual_df(fit);
  if (!(df2 > 0)) throw DegenerateTestError("no residual degrees of freedom left for an F test");
  Index r = static_cast<Index>(std::llround(st->ref_df));
  r = std::clamp<Index>(r, 1, numeric_rank);
  double stat = 0;
  for (Index i = 0; i < r; ++i) {
    Index col = ev.size() - 1 - i;
    double proj = es.eigenvectors().col(col).dot(beta);
    stat += proj * proj / ev(col);
  }
  SmoothRow row;
  row.name = term;
  row.edf = st->edf;
  row.ref_df = st->ref_df;
  row.F = stat / static_cast<double>(r);
  boost::math::fisher_f dist(static_cast<double>(r), df2);
  row.p = clamp01(boost::math::cdf(boost::math::complement(dist, row.F)));
  return row;
}

TestReport test_report(const GammFit& fit) {
  TestReport rep;
  rep.parametric = test_parametric(fit);
  for (const auto& b : fit.blocks) {
    if (is_smooth(b.kind)) rep.smooth.push_back(test_smooth(fit, b.name));
  }
  return rep;
}

Eigen::RowVectorXd design_row(const GammFit& fit, const std::string& level, double x) {
  Eigen::RowVectorXd row = Eigen::RowVectorXd::Zero(fit.beta.size());
  if (!fit.spec.factor.empty() &&
      std::find(fit.levels.begin(), fit.levels.end(), level) == fit.levels.end())
    throw PredictionError("unknown level '" + level + "' of factor '" + fit.spec.factor + "'");
  for (const auto& b : fit.blocks) {
    const Index c = static_cast<Index>(b.begin);
    switch (b.kind) {
      case BlockKind::intercept: row(c) = 1; break;
      case BlockKind::parametric: row(c) = b.level == level ? 1 : 0; break;
      case BlockKind::reference:
        row.segment(c, static_cast<Index>(b.end - b.begin)) =
            fit.bases[static_cast<std::size_t>(b.basis)].evaluate({&x, 1}).row(0);
        break;
      case BlockKind::difference:
        if (b.level == level)
          row.segment(c, static_cast<Index>(b.end - b.begin)) =
              fit.bases[static_cast<std::size_t>(b.basis)].evaluate({&x, 1}).row(0);
        break;
      case BlockKind::factor_random: break;
    }
  }
  return row;
}

Prediction predict_with_ci(const GammFit& fit, const std::vector<std::string>& levels,
                           std::span<const double> x, double level) {
  if (levels.size() != x.size()) throw DimensionError("levels and covariate lengths differ");
  double z = z_quantile(level);
  Prediction out;
  for (std::size_t i = 0; i < x.size(); ++i) {
    auto row = design_row(fit, levels[i], x[i]);
    double mean = row.dot(fit.beta);
    double var = std::max(0.0, (row * fit.Vb * row.transpose())(0, 0));
    double se = std::sqrt(var);
    out.mean.push_back(mean);
    out.se.push_back(se);
    out.lower.push_back(mean - z * se);
    out.upper.push_back(mean + z * se);
    if (x[i] < fit.x_min || x[i] > fit.x_max) out.extrapolated = true;
  }
  return out;
}

std::vector<Region> significant_regions(std::span<const double> grid, std::span<const double> lower,
                                        std::span<const double> upper) {
  std::vector<Region> out;
  auto sign = [&](std::size_t i) { return lower[i] > 0 ? 1 : (upper[i] < 0 ? -1 : 0); };
  std::size_t i = 0;
  while (i < grid.size()) {
    int s = sign(i);
    if (s == 0) {
      ++i;
      continue;
    }
    std::size_t j = i;
    while (j + 1 < grid.size() && sign(j + 1) == s) ++j;
    out.push_back({grid[i], grid[j]});
    i = j + 1;
  }
  return out;
}

DifferenceCurve difference_curve(const GammFit& fit, const std::string& level_a,
                                 const std::string& level_b, std::span<const double> grid,
                                 double level) {
  double z = z_quantile(level);
  DifferenceCurve out;
  out.grid.assign(grid.begin(), grid.end());
  for (double x : grid) {
    Eigen::RowVectorXd c = design_row(fit, level_a, x) - design_row(fit, level_b, x);
    double d = c.dot(fit.beta);
    double se = std::sqrt(std::max(0.0, (c * fit.Vb * c.transpose())(0, 0)));
    out.diff.push_back(d);
    out.lower.push_back(d - z * se);
    out.upper.push_back(d + z * se);
  }
  out.significant_regions = significant_regions(out.grid, out.lower, out.upper);
  return out;
}

DifferenceCurve difference_smooth(const GammFit& fit, const std::string& level_a,
                                  const std::string& level_b, std::span<const double> grid,
                                  double level) {
  if (level_a == level_b) throw ContrastError("difference of level '" + level_a + "' with itself is empty");
  return difference_curve(fit, level_a, level_b, grid, level);
}

std::vector<double> linspace(double a, double b, std::size_t n) {
  std::vector<double> out(n);
  if (n == 1) {
    out[0] = a;
    return out;
  }
  for (std::size_t i = 0; i < n; ++i)
    out[i] = a + (b - a) * static_cast<double>(i) / static_cast<double>(n - 1);
  if (n) out[n - 1] = b;
  return out;
}

// Serialization.

namespace {

const char* kind_name(BlockKind k) {
  switch (k) {
    case BlockKind::intercept: return "intercept";
    case BlockKind::parametric: return "parametric";
    case BlockKind::reference: return "reference";
    case BlockKind::difference: return "difference";
    case BlockKind::factor_random: return "factor_random";
  }
  return "parametric";
}

BlockKind kind_from(const std::string& s) {
  if (s == "intercept") return BlockKind::intercept;
  if (s == "parametric") return BlockKind::parametric;
  if (s == "reference") return BlockKind::reference;
  if (s == "difference") return BlockKind::difference;
  if (s == "factor_random") return BlockKind::factor_random;
  throw FormatError("unknown block kind '" + s + "'");
}

NamedArray matrix_array(const std::string& name, const MatrixXd& m) {
  NamedArray a;
  a.name = name;
  a.shape = {static_cast<std::size_t>(m.rows()), static_cast<std::size_t>(m.cols())};
  a.values.reserve(static_cast<std::size_t>(m.size()));
  for (Index r = 0; r < m.rows(); ++r)
    for (Index c = 0; c < m.cols(); ++c) a.values.push_back(m(r, c));
  return a;
}

MatrixXd array_matrix(const NamedArray& a) {
  if (a.shape.size() != 2) throw FormatError("array '" + a.name + "' is not a matrix");
  MatrixXd m(static_cast<Index>(a.shape[0]), static_cast<Index>(a.shape[1]));
  std::size_t k = 0;
  for (Index r = 0; r < m.rows(); ++r)
    for (Index c = 0; c < m.cols(); ++c) m(r, c) = a.values[k++];
  return m;
}

}  // namespace

void save_fit(const std::filesystem::path& path, const GammFit& fit) {
  Container c;
  c.dtype = BlobType::f64;
  nlohmann::json m;
  m["kind"] = "gamm_fit";
  m["spec"] = fit.spec;
  m["column_names"] = fit.column_names;
  nlohmann::json blocks = nlohmann::json::array();
  for (const auto& b : fit.blocks) {
    blocks.push_back({{"name", b.name},
                      {"kind", kind_name(b.kind)},
                      {"level", b.level},
                      {"begin", b.begin},
                      {"end", b.end},
                      {"basis", b.basis},
                      {"penalties", b.penalties}});
  }
  m["blocks"] = blocks;
  m["levels"] = fit.levels;
  m["group_levels"] = fit.group_levels;
  m["lambda"] = fit.lambda;
  m["lambda_names"] = fit.lambda_names;
  m["sigma2"] = fit.sigma2;
  m["rho"] = fit.rho;
  m["edf_total"] = fit.edf_total;
  m["deviance"] = fit.deviance;
  m["score"] = fit.score;
  m["n"] = fit.n;
  m["iterations"] = fit.iterations;
  m["converged"] = fit.converged;
  nlohmann::json stats = nlohmann::json::array();
  for (const auto& s : fit.block_stats)
    stats.push_back({{"name", s.name}, {"kind", kind_name(s.kind)}, {"edf", s.edf}, {"ref_df", s.ref_df}});
  m["block_stats"] = stats;
  m["warnings"] = fit.warnings;
  m["x_min"] = fit.x_min;
  m["x_max"] = fit.x_max;
  nlohmann::json bases = nlohmann::json::array();
  for (std::size_t i = 0; i < fit.bases.size(); ++i) {
    const auto& b = fit.bases[i];
    bases.push_back({{"k", b.tprs.k},
                     {"x_min", b.tprs.x_min},
                     {"x_range", b.tprs.x_range},
                     {"constrained", b.constrained},
                     {"null_space_dim", b.null_space_dim}});
    std::string pre = "basis." + std::to_string(i) + ".";
    c.arrays.push_back(matrix_array(pre + "knots", b.tprs.knots));
    c.arrays.push_back(matrix_array(pre + "uz", b.tprs.uz));
    c.arrays.push_back(matrix_array(pre + "penalty", b.tprs.penalty));
    c.arrays.push_back(matrix_array(pre + "S", b.S));
    if (b.constrained) c.arrays.push_back(matrix_array(pre + "constraint", b.constraint));
  }
  m["bases"] = bases;
  c.meta = m;
  c.arrays.push_back(matrix_array("beta", fit.beta));
  c.arrays.push_back(matrix_array("Vb", fit.Vb));
  write_container(path, c);
}

GammFit load_fit(const std::filesystem::path& path) {
  Container c = read_container(path);
  const auto& m = c.meta;
  if (m.value("kind", std::string()) != "gamm_fit")
    throw FormatError(path.string() + " is not a fitted model file");
  GammFit fit;
  try {
    fit.spec = m.at("spec").get<GammSpec>();
    fit.column_names = m.at("column_names").get<std::vector<std::string>>();
    for (const auto& jb : m.at("blocks")) {
      DesignBlock b;
      b.name = jb.at("name").get<std::string>();
      b.kind = kind_from(jb.at("kind").get<std::string>());
      b.level = jb.at("level").get<std::string>();
      b.begin = jb.at("begin").get<std::size_t>();
      b.end = jb.at("end").get<std::size_t>();
      b.basis = jb.at("basis").get<long>();
      b.penalties = jb.at("penalties").get<std::vector<std::size_t>>();
      fit.blocks.push_back(b);
    }
    fit.levels = m.at("levels").get<std::vector<std::string>>();
    fit.group_levels = m.at("group_levels").get<std::vector<std::string>>();
    fit.lambda = m.at("lambda").get<std::vector<double>>();
    fit.lambda_names = m.at("lambda_names").get<std::vector<std::string>>();
    fit.sigma2 = m.at("sigma2").get<double>();
    fit.rho = m.at("rho").get<double>();
    fit.edf_total = m.at("edf_total").get<double>();
    fit.deviance = m.at("deviance").get<double>();
    fit.score = m.at("score").get<double>();
    fit.n = m.at("n").get<std::size_t>();
    fit.iterations = m.at("iterations").get<std::size_t>();
    fit.converged = m.at("converged").get<bool>();
    for (const auto& js : m.at("block_stats")) {
      BlockStats s;
      s.name = js.at("name").get<std::string>();
      s.kind = kind_from(js.at("kind").get<std::string>());
      s.edf = js.at("edf").get<double>();
      s.ref_df = js.at("ref_df").get<double>();
      fit.block_stats.push_back(s);
    }
    fit.warnings = m.at("warnings").get<std::vector<std::string>>();
    fit.x_min = m.at("x_min").get<double>();
    fit.x_max = m.at("x_max").get<double>();
    const auto& jbases = m.at("bases");
    for (std::size_t i = 0; i < jbases.size(); ++i) {
      SmoothBasis b;
      b.tprs.k = jbases[i].at("k").get<std::size_t>();
      b.tprs.x_min = jbases[i].at("x_min").get<double>();
      b.tprs.x_range = jbases[i].at("x_range").get<double>();
      b.constrained = jbases[i].at("constrained").get<bool>();
      b.null_space_dim = jbases[i].at("null_space_dim").get<std::size_t>();
      std::string pre = "basis." + std::to_string(i) + ".";
      b.tprs.knots = array_matrix(c.at(pre + "knots"));
      b.tprs.uz = array_matrix(c.at(pre + "uz"));
      b.tprs.penalty = array_matrix(c.at(pre + "penalty"));
      b.S = array_matrix(c.at(pre + "S"));
      if (b.constrained) b.constraint = array_matrix(c.at(pre + "constraint"));
      fit.bases.push_back(std::move(b));
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path.string() + ": malformed fit header: " + e.what());
  }
  fit.beta = array_matrix(c.at("beta"));
  fit.Vb = array_matrix(c.at("Vb"));
  if (fit.beta.size() != static_cast<Index>(fit.column_names.size()) ||
      fit.Vb.rows() != fit.beta.size() || fit.Vb.cols() != fit.beta.size())
    throw DimensionError(path.string() + ": coefficient and covariance sizes disagree");
  return fit;
}

}  // namespace convprobe
