#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <numbers>

#include "convprobe/error.hpp"
#include "convprobe/gamm.hpp"

namespace convprobe {

namespace {

using Eigen::Index;
using Eigen::MatrixXd;
using Eigen::VectorXd;

void check_lambda(const std::vector<Penalty>& pens, std::span<const double> lambda) {
  if (lambda.size() != pens.size())
    throw PreconditionError("expected " + std::to_string(pens.size()) + " smoothing parameters, got " +
                            std::to_string(lambda.size()));
  for (double l : lambda) {
    if (!(l >= 0) || !std::isfinite(l)) throw PreconditionError("smoothing parameters must be >= 0");
  }
}

MatrixXd penalized_hessian(const QrParts& qr, const std::vector<Penalty>& pens,
                           std::span<const double> lambda) {
  MatrixXd H = qr.R.transpose() * qr.R;
  for (std::size_t j = 0; j < pens.size(); ++j) {
    const Index b = static_cast<Index>(pens[j].begin);
    const Index m = pens[j].S.rows();
    H.block(b, b, m, m) += lambda[j] * pens[j].S;
  }
  return H;
}

// Cholesky with up to 1e-8 relative diagonal jitter on failure.
Eigen::LLT<MatrixXd> cholesky(const MatrixXd& H, double& jitter) {
  Eigen::LLT<MatrixXd> llt(H);
  if (llt.info() == Eigen::Success) return llt;
  double top = H.diagonal().cwiseAbs().maxCoeff();
  for (double rel = 1e-12; rel <= 1e-8 * 1.0001; rel *= 10) {
    MatrixXd Hj = H;
    Hj.diagonal().array() += rel * top;
    llt.compute(Hj);
    if (llt.info() == Eigen::Success) {
      jitter = std::max(jitter, rel);
      return llt;
    }
  }
  throw NumericError("penalized Hessian is not positive definite even with jitter");
}

double penalty_quad(const std::vector<Penalty>& pens, std::span<const double> lambda,
                    const VectorXd& beta, std::vector<double>* per_term = nullptr) {
  double total = 0;
  for (std::size_t j = 0; j < pens.size(); ++j) {
    const Index b = static_cast<Index>(pens[j].begin);
    const Index m = pens[j].S.rows();
    auto bj = beta.segment(b, m);
    double q = bj.dot(pens[j].S * bj);
    if (per_term) per_term->push_back(q);
    total += lambda[j] * q;
  }
  return total;
}

thread_local double g_jitter = 0;

}  // namespace

QrParts qr_parts(const MatrixXd& X, const VectorXd& y) {
  const Index n = X.rows();
  const Index p = X.cols();
  if (y.size() != n) throw DimensionError("response length does not match the design rows");
  QrParts q;
  q.n = static_cast<std::size_t>(n);
  Eigen::HouseholderQR<MatrixXd> qr(X);
  VectorXd qty = qr.householderQ().adjoint() * y;
  const Index m = std::min(n, p);
  q.R = MatrixXd::Zero(p, p);
  q.R.topRows(m) = qr.matrixQR().topRows(m).triangularView<Eigen::Upper>();
  q.f = VectorXd::Zero(p);
  q.f.head(m) = qty.head(m);
  q.rss0 = n > m ? qty.tail(n - m).squaredNorm() : 0.0;
  return q;
}

PlsResult fit_pls(const QrParts& qr, const std::vector<Penalty>& pens, std::span<const double> lambda,
                  const std::vector<std::string>& column_names) {
  check_lambda(pens, lambda);
  const Index p = qr.R.cols();
  Index extra = 0;
  for (const auto& pen : pens) extra += static_cast<Index>(pen.rank);
  MatrixXd A = MatrixXd::Zero(p + extra, p);
  VectorXd rhs = VectorXd::Zero(p + extra);
  A.topRows(p) = qr.R;
  rhs.head(p) = qr.f;
  Index row = p;
  for (std::size_t j = 0; j < pens.size(); ++j) {
    const Index r = pens[j].root.rows();
    A.block(row, static_cast<Index>(pens[j].begin), r, pens[j].root.cols()) =
        std::sqrt(lambda[j]) * pens[j].root;
    row += r;
  }
  Eigen::ColPivHouseholderQR<MatrixXd> cq(A);
  cq.setThreshold(1e-11);
  if (cq.rank() < p) {
    std::vector<std::string> aliased;
    for (Index i = cq.rank(); i < p; ++i) {
      Index c = cq.colsPermutation().indices()(i);
      aliased.push_back(static_cast<std::size_t>(c) < column_names.size()
                            ? column_names[static_cast<std::size_t>(c)]
                            : "column " + std::to_string(c));
    }
    std::string msg = "penalized system is rank deficient; aliased:";
    for (const auto& a : aliased) msg += " " + a;
    throw RankError(msg, aliased);
  }
  PlsResult res;
  VectorXd qtb = cq.householderQ().adjoint() * rhs;
  auto R1 = cq.matrixQR().topLeftCorner(p, p).triangularView<Eigen::Upper>();
  VectorXd z = R1.solve(qtb.head(p));
  res.beta = cq.colsPermutation() * z;
  MatrixXd Rinv = R1.solve(MatrixXd::Identity(p, p));
  MatrixXd Hp = Rinv * Rinv.transpose();
  res.Hinv = cq.colsPermutation() * Hp * cq.colsPermutation().transpose();
  res.Hinv = 0.5 * (res.Hinv + res.Hinv.transpose()).eval();
  MatrixXd F = res.Hinv * (qr.R.transpose() * qr.R);
  res.edf = F.diagonal();
  res.ref_diag.resize(p);
  for (Index i = 0; i < p; ++i) res.ref_diag(i) = 2 * F(i, i) - F.row(i).dot(F.col(i));
  res.trace = res.edf.sum();
  res.rss = qr.rss0 + (qr.f - qr.R * res.beta).squaredNorm();
  double dof = static_cast<double>(qr.n) - res.trace;
  res.sigma2 = dof > 0 ? res.rss / dof : 0.0;
  res.Vb = res.Hinv * res.sigma2;
  return res;
}

PlsResult fit_pls(const MatrixXd& X, const VectorXd& y, const std::vector<Penalty>& pens,
                  std::span<const double> lambda, std::span<const double> weights,
                  const std::vector<std::string>& column_names) {
  if (!weights.empty() && weights.size() != static_cast<std::size_t>(X.rows()))
    throw DimensionError("weights length does not match the design rows");
  PlsResult res;
  if (weights.empty()) {
    res = fit_pls(qr_parts(X, y), pens, lambda, column_names);
  } else {
    VectorXd sw(X.rows());
    for (Index i = 0; i < X.rows(); ++i) {
      if (!(weights[static_cast<std::size_t>(i)] >= 0)) throw PreconditionError("weights must be >= 0");
      sw(i) = std::sqrt(weights[static_cast<std::size_t>(i)]);
    }
    MatrixXd Xw = sw.asDiagonal() * X;
    VectorXd yw = sw.asDiagonal() * y;
    res = fit_pls(qr_parts(Xw, yw), pens, lambda, column_names);
  }
  res.fitted = X * res.beta;
  VectorXd r = y - res.fitted;
  if (weights.empty()) {
    res.rss = r.squaredNorm();
  } else {
    res.rss = 0;
    for (Index i = 0; i < r.size(); ++i) res.rss += weights[static_cast<std::size_t>(i)] * r(i) * r(i);
  }
  double dof = static_cast<double>(X.rows()) - res.trace;
  res.sigma2 = dof > 0 ? res.rss / dof : 0.0;
  res.Vb = res.Hinv * res.sigma2;
  return res;
}

double reml_score(const QrParts& qr, const std::vector<Penalty>& pens, std::span<const double> lambda,
                  VectorXd* grad) {
  check_lambda(pens, lambda);
  const Index p = qr.R.cols();
  MatrixXd H = penalized_hessian(qr, pens, lambda);
  auto llt = cholesky(H, g_jitter);
  VectorXd beta = llt.solve(qr.R.transpose() * qr.f);
  std::vector<double> quad;
  double pen = penalty_quad(pens, lambda, beta, &quad);
  double D = qr.rss0 + (qr.f - qr.R * beta).squaredNorm() + pen;
  D = std::max(D, std::numeric_limits<double>::min());
  double rank_total = 0;
  double log_s = 0;
  for (std::size_t j = 0; j < pens.size(); ++j) {
    rank_total += static_cast<double>(pens[j].rank);
    log_s += static_cast<double>(pens[j].rank) * std::log(lambda[j]) + pens[j].log_det_plus;
  }
  double nm = static_cast<double>(qr.n) - (static_cast<double>(p) - rank_total);
  if (nm <= 0) throw PreconditionError("too few rows for the unpenalized part of the model");
  double log_det_h = 2.0 * llt.matrixLLT().diagonal().array().log().sum();
  double score = 0.5 * nm * (1.0 + std::log(2.0 * std::numbers::pi * D / nm)) + 0.5 * log_det_h -
                 0.5 * log_s;
  if (grad) {
    grad->resize(static_cast<Index>(pens.size()));
    MatrixXd Hinv = llt.solve(MatrixXd::Identity(p, p));
    for (std::size_t j = 0; j < pens.size(); ++j) {
      const Index b = static_cast<Index>(pens[j].begin);
      const Index m = pens[j].S.rows();
      double tr = Hinv.block(b, b, m, m).cwiseProduct(pens[j].S).sum();
      (*grad)(static_cast<Index>(j)) = 0.5 * nm * lambda[j] * quad[j] / D + 0.5 * lambda[j] * tr -
                                       0.5 * static_cast<double>(pens[j].rank);
    }
  }
  return score;
}

double gcv_score(const QrParts& qr, const std::vector<Penalty>& pens, std::span<const double> lambda) {
  check_lambda(pens, lambda);
  const Index p = qr.R.cols();
  MatrixXd H = penalized_hessian(qr, pens, lambda);
  auto llt = cholesky(H, g_jitter);
  VectorXd beta = llt.solve(qr.R.transpose() * qr.f);
  double rss = qr.rss0 + (qr.f - qr.R * beta).squaredNorm();
  MatrixXd F = llt.solve(qr.R.transpose() * qr.R);
  double tr = F.trace();
  double n = static_cast<double>(qr.n);
  double dof = n - tr;
  if (dof <= 0) return std::numeric_limits<double>::infinity();
  (void)p;
  return n * rss / (dof * dof);
}

namespace {

using Objective = std::function<double(const VectorXd& rho, VectorXd& grad)>;

// Box-constrained BFGS over log smoothing parameters.
SmoothingResult bfgs(const Objective& fn, VectorXd rho, double tol, std::size_t max_iter) {
  const Index m = rho.size();
  auto clamp = [&](VectorXd v) {
    for (Index i = 0; i < m; ++i) v(i) = std::clamp(v(i), kLogLambdaMin, kLogLambdaMax);
    return v;
  };
  auto projected = [&](const VectorXd& x, const VectorXd& g) {
    VectorXd pg = g;
    for (Index i = 0; i < m; ++i) {
      if ((x(i) <= kLogLambdaMin && g(i) > 0) || (x(i) >= kLogLambdaMax && g(i) < 0)) pg(i) = 0;
    }
    return pg;
  };
  rho = clamp(rho);
  VectorXd g;
  double f = fn(rho, g);
  // Coarse scan of a common shift so the search does not start on a plateau.
  VectorXd base = rho;
  for (double shift = kLogLambdaMin - kLogLambdaMax; shift <= kLogLambdaMax - kLogLambdaMin; shift += 2) {
    VectorXd x1 = clamp(base.array() + shift);
    VectorXd g1;
    double f1 = fn(x1, g1);
    if (std::isfinite(f1) && f1 < f) {
      f = f1;
      g = g1;
      rho = x1;
    }
  }
  MatrixXd B = MatrixXd::Identity(m, m);
  bool scaled = false;
  SmoothingResult res;
  std::size_t it = 0;
  for (; it < max_iter; ++it) {
    VectorXd pg = projected(rho, g);
    if (pg.cwiseAbs().maxCoeff() < tol) {
      res.converged = true;
      break;
    }
    bool accepted = false;
    for (int attempt = 0; attempt < 2 && !accepted; ++attempt) {
      VectorXd d = -(B * pg);
      for (Index i = 0; i < m; ++i) {
        if (pg(i) == 0) d(i) = 0;
      }
      if (d.dot(pg) >= 0) {
        B.setIdentity();
        scaled = false;
        d = -pg;
      }
      double big = d.cwiseAbs().maxCoeff();
      if (big > 5) d *= 5 / big;
      double alpha = 1;
      for (int ls = 0; ls < 40; ++ls) {
        VectorXd x1 = clamp(rho + alpha * d);
        VectorXd g1;
        double f1 = fn(x1, g1);
        VectorXd s = x1 - rho;
        if (std::isfinite(f1) && f1 <= f + 1e-4 * g.dot(s)) {
          VectorXd yv = g1 - g;
          double sy = s.dot(yv);
          if (sy > 1e-10 * s.norm() * yv.norm()) {
            if (!scaled) {
              B = MatrixXd::Identity(m, m) * (sy / yv.squaredNorm());
              scaled = true;
            }
            double r = 1.0 / sy;
            MatrixXd I = MatrixXd::Identity(m, m);
            B = (I - r * s * yv.transpose()) * B * (I - r * yv * s.transpose()) + r * s * s.transpose();
          }
          rho = x1;
          g = g1;
          f = f1;
          accepted = true;
          break;
        }
        alpha *= 0.5;
      }
      if (!accepted) {
        B.setIdentity();
        scaled = false;
      }
    }
    if (!accepted) break;
  }
  res.iterations = it;
  res.score = f;
  res.grad_norm = projected(rho, g).cwiseAbs().maxCoeff();
  if (res.grad_norm < tol) res.converged = true;
  res.lambda.resize(static_cast<std::size_t>(m));
  for (Index i = 0; i < m; ++i) res.lambda[static_cast<std::size_t>(i)] = std::exp(rho(i));
  return res;
}

VectorXd log_lambda0(const std::vector<Penalty>& pens, std::span<const double> lambda0) {
  if (lambda0.size() != pens.size())
    throw PreconditionError("initial smoothing parameter count does not match the penalties");
  VectorXd rho(static_cast<Index>(pens.size()));
  for (std::size_t j = 0; j < pens.size(); ++j) {
    if (!(lambda0[j] > 0)) throw PreconditionError("initial smoothing parameters must be > 0");
    rho(static_cast<Index>(j)) = std::log(lambda0[j]);
  }
  return rho;
}

}  // namespace

SmoothingResult optimize_reml(const QrParts& qr, const std::vector<Penalty>& pens,
                              std::span<const double> lambda0, double tol, std::size_t max_iter) {
  VectorXd rho = log_lambda0(pens, lambda0);
  g_jitter = 0;
  if (pens.empty()) {
    SmoothingResult r;
    r.converged = true;
    r.score = reml_score(qr, pens, {});
    return r;
  }
  Objective fn = [&](const VectorXd& x, VectorXd& grad) {
    std::vector<double> lam(static_cast<std::size_t>(x.size()));
    for (Index i = 0; i < x.size(); ++i) lam[static_cast<std::size_t>(i)] = std::exp(x(i));
    return reml_score(qr, pens, lam, &grad);
  };
  auto res = bfgs(fn, rho, tol, max_iter);
  res.jitter = g_jitter;
  return res;
}

SmoothingResult optimize_gcv(const QrParts& qr, const std::vector<Penalty>& pens,
                             std::span<const double> lambda0, double tol, std::size_t max_iter) {
  VectorXd rho = log_lambda0(pens, lambda0);
  g_jitter = 0;
  if (pens.empty()) {
    SmoothingResult r;
    r.converged = true;
    r.score = gcv_score(qr, pens, {});
    return r;
  }
  auto eval = [&](const VectorXd& x) {
    std::vector<double> lam(static_cast<std::size_t>(x.size()));
    for (Index i = 0; i < x.size(); ++i) lam[static_cast<std::size_t>(i)] = std::exp(x(i));
    return gcv_score(qr, pens, lam);
  };
  Objective fn = [&](const VectorXd& x, VectorXd& grad) {
    double f = eval(x);
    grad.resize(x.size());
    const double h = 1e-5;
    for (Index i = 0; i < x.size(); ++i) {
      VectorXd a = x, b = x;
      a(i) += h;
      b(i) -= h;
      grad(i) = (eval(a) - eval(b)) / (2 * h);
    }
    return f;
  };
  auto res = bfgs(fn, rho, tol, max_iter);
  res.jitter = g_jitter;
  return res;
}

double pooled_lag1(std::span<const double> e, const std::vector<std::size_t>& starts) {
  double num = 0;
  double den = 0;
  for (std::size_t g = 0; g + 1 < starts.size(); ++g) {
    for (std::size_t t = starts[g]; t < starts[g + 1]; ++t) {
      den += e[t] * e[t];
      if (t > starts[g]) num += e[t] * e[t - 1];
    }
  }
  return den > 0 ? num / den : 0.0;
}

void ar1_transform(MatrixXd& X, VectorXd& y, const std::vector<std::size_t>& starts, double rho) {
  if (!(std::fabs(rho) < 1)) throw StabilityError("AR(1) coefficient " + std::to_string(rho) +
                                                  " is not inside (-1, 1)");
  const double head = std::sqrt(1 - rho * rho);
  for (std::size_t g = 0; g + 1 < starts.size(); ++g) {
    const Index a = static_cast<Index>(starts[g]);
    const Index b = static_cast<Index>(starts[g + 1]);
    if (a >= b) continue;
    for (Index t = b - 1; t > a; --t) {
      X.row(t) -= rho * X.row(t - 1);
      y(t) -= rho * y(t - 1);
    }
    X.row(a) *= head;
    y(a) *= head;
  }
}

const DesignBlock& GammFit::block(const std::string& name) const {
  for (const auto& b : blocks) {
    if (b.name == name) return b;
  }
  throw SpecError("fit has no term '" + name + "'");
}

namespace {

struct Pass {
  PlsResult pls;
  SmoothingResult sm;
};

Pass run_pass(const Design& d, const MatrixXd& X, const VectorXd& y, Criterion crit,
              const FitOptions& opt) {
  Pass out;
  QrParts qr = qr_parts(X, y);
  std::vector<double> lam0(d.penalties.size(), opt.lambda0);
  out.sm = crit == Criterion::reml ? optimize_reml(qr, d.penalties, lam0, opt.tol, opt.max_iter)
                                   : optimize_gcv(qr, d.penalties, lam0, opt.tol, opt.max_iter);
  out.pls = fit_pls(qr, d.penalties, out.sm.lambda, d.column_names);
  out.pls.fitted = X * out.pls.beta;
  out.pls.rss = (y - out.pls.fitted).squaredNorm();
  double dof = static_cast<double>(X.rows()) - out.pls.trace;
  out.pls.sigma2 = dof > 0 ? out.pls.rss / dof : 0.0;
  out.pls.Vb = out.pls.Hinv * out.pls.sigma2;
  return out;
}

}  // namespace

GammFit fit_gamm(const GammSpec& spec_in, const DataTable& data, const FitOptions& opt) {
  GammFit fit;
  fit.spec = spec_in;
  Design d = assemble_design(fit.spec, data);
  const std::size_t n = static_cast<std::size_t>(d.X.rows());
  if (static_cast<std::size_t>(d.X.cols()) >= n)
    throw PreconditionError("data has " + std::to_string(n) + " rows but the model has " +
                            std::to_string(d.X.cols()) + " coefficients");

  Pass pass = run_pass(d, d.X, d.y, fit.spec.criterion, opt);
  VectorXd resid = d.y - pass.pls.fitted;
  if (fit.spec.ar1 != Ar1Mode::off) {
    double rho = fit.spec.ar1 == Ar1Mode::fixed
                     ? fit.spec.rho
                     : pooled_lag1({resid.data(), static_cast<std::size_t>(resid.size())}, d.group_starts);
    if (!(std::fabs(rho) < 1))
      throw StabilityError("estimated AR(1) coefficient " + std::to_string(rho) + " is not inside (-1, 1)");
    MatrixXd Xw = d.X;
    VectorXd yw = d.y;
    ar1_transform(Xw, yw, d.group_starts, rho);
    pass = run_pass(d, Xw, yw, fit.spec.criterion, opt);
    resid = yw - pass.pls.fitted;
    fit.rho = rho;
  }

  fit.column_names = d.column_names;
  fit.blocks = d.blocks;
  fit.bases = d.bases;
  for (auto& b : fit.bases) b.X.resize(0, 0);
  fit.levels = d.levels;
  fit.group_levels = d.group_levels;
  fit.beta = pass.pls.beta;
  fit.Vb = pass.pls.Vb;
  fit.lambda = pass.sm.lambda;
  for (const auto& p : d.penalties) fit.lambda_names.push_back(p.name);
  fit.sigma2 = pass.pls.sigma2;
  fit.edf_total = pass.pls.trace;
  fit.deviance = pass.pls.rss;
  fit.score = pass.sm.score;
  fit.n = n;
  fit.iterations = pass.sm.iterations;
  fit.converged = pass.sm.converged;
  fit.warnings = d.warnings;
  if (!pass.sm.converged)
    fit.warnings.push_back("smoothing parameter search stopped after " +
                           std::to_string(pass.sm.iterations) + " iterations with gradient " +
                           std::to_string(pass.sm.grad_norm) + "; using the best value found");
  if (pass.sm.jitter > 0)
    fit.warnings.push_back("Cholesky factorization needed relative jitter " +
                           std::to_string(pass.sm.jitter));
  for (const auto& b : d.blocks) {
    BlockStats st;
    st.name = b.name;
    st.kind = b.kind;
    for (std::size_t c = b.begin; c < b.end; ++c) {
      st.edf += pass.pls.edf(static_cast<Index>(c));
      st.ref_df += pass.pls.ref_diag(static_cast<Index>(c));
    }
    fit.block_stats.push_back(st);
  }
  if (!fit.spec.smooths.empty()) {
    auto x = data.numeric(fit.spec.smooths.front().covariate);
    auto [lo, hi] = std::minmax_element(x.begin(), x.end());
    fit.x_min = *lo;
    fit.x_max = *hi;
  }
  fit.residuals = resid;
  fit.group_starts = d.group_starts;
  return fit;
}

}  // namespace convprobe
