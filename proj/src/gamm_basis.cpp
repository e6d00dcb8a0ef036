#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <set>
#include <tuple>

#include "convprobe/error.hpp"
#include "convprobe/gamm.hpp"

namespace convprobe {

namespace {

double eta(double r) { return r * r * r / 12.0; }

}  // namespace

Eigen::MatrixXd TprsBasis::raw(std::span<const double> x) const {
  const Eigen::Index nk = knots.size();
  Eigen::MatrixXd out(static_cast<Eigen::Index>(x.size()), static_cast<Eigen::Index>(k));
  Eigen::RowVectorXd e(nk);
  for (std::size_t i = 0; i < x.size(); ++i) {
    double u = (x[i] - x_min) / x_range;
    for (Eigen::Index j = 0; j < nk; ++j) e(j) = eta(std::fabs(u - knots(j)));
    auto row = out.row(static_cast<Eigen::Index>(i));
    row.head(static_cast<Eigen::Index>(k - 2)) = e * uz;
    row(static_cast<Eigen::Index>(k - 2)) = 1.0;
    row(static_cast<Eigen::Index>(k - 1)) = u;
  }
  return out;
}

TprsBasis make_tprs(std::span<const double> x, std::size_t k, std::size_t max_knots) {
  if (k < 3) throw BasisError("thin plate basis needs k >= 3, got " + std::to_string(k));
  if (x.empty()) throw BasisError("thin plate basis on an empty covariate");
  auto [lo, hi] = std::minmax_element(x.begin(), x.end());
  std::vector<double> uniq(x.begin(), x.end());
  std::sort(uniq.begin(), uniq.end());
  uniq.erase(std::unique(uniq.begin(), uniq.end()), uniq.end());
  if (uniq.size() < k)
    throw BasisError("basis dimension " + std::to_string(k) + " needs at least " +
                     std::to_string(k) + " distinct covariate values, got " +
                     std::to_string(uniq.size()));

  TprsBasis b;
  b.k = k;
  b.x_min = *lo;
  b.x_range = *hi - *lo;

  std::vector<double> chosen;
  if (uniq.size() > max_knots) {
    for (std::size_t i = 0; i < max_knots; ++i) {
      std::size_t idx = (i * (uniq.size() - 1) + (max_knots - 1) / 2) / (max_knots - 1);
      chosen.push_back(uniq[idx]);
    }
  } else {
    chosen = uniq;
  }
  const Eigen::Index nk = static_cast<Eigen::Index>(chosen.size());
  b.knots.resize(nk);
  for (Eigen::Index i = 0; i < nk; ++i) b.knots(i) = (chosen[i] - b.x_min) / b.x_range;

  Eigen::MatrixXd E(nk, nk);
  for (Eigen::Index i = 0; i < nk; ++i)
    for (Eigen::Index j = 0; j < nk; ++j) E(i, j) = eta(std::fabs(b.knots(i) - b.knots(j)));

  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(E);
  if (es.info() != Eigen::Success) throw NumericError("eigendecomposition of the spline kernel failed");
  std::vector<Eigen::Index> order(static_cast<std::size_t>(nk));
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](Eigen::Index a, Eigen::Index c) {
    return std::fabs(es.eigenvalues()(a)) > std::fabs(es.eigenvalues()(c));
  });
  const Eigen::Index kk = static_cast<Eigen::Index>(k);
  Eigen::MatrixXd Uk(nk, kk);
  Eigen::VectorXd Dk(kk);
  for (Eigen::Index j = 0; j < kk; ++j) {
    Uk.col(j) = es.eigenvectors().col(order[static_cast<std::size_t>(j)]);
    Dk(j) = es.eigenvalues()(order[static_cast<std::size_t>(j)]);
  }

  Eigen::MatrixXd T(nk, 2);
  T.col(0).setOnes();
  T.col(1) = b.knots;
  Eigen::MatrixXd C = Uk.transpose() * T;  // k x 2
  Eigen::HouseholderQR<Eigen::MatrixXd> qr(C);
  Eigen::MatrixXd Q = qr.householderQ() * Eigen::MatrixXd::Identity(kk, kk);
  Eigen::MatrixXd Z = Q.rightCols(kk - 2);

  b.uz = Uk * Z;
  Eigen::MatrixXd Sw = Z.transpose() * Dk.asDiagonal() * Z;
  Sw = 0.5 * (Sw + Sw.transpose()).eval();
  b.penalty = Eigen::MatrixXd::Zero(kk, kk);
  b.penalty.topLeftCorner(kk - 2, kk - 2) = Sw;

  return b;
}

Eigen::MatrixXd SmoothBasis::evaluate(std::span<const double> x) const {
  Eigen::MatrixXd r = tprs.raw(x);
  if (!constrained) return r;
  return r * constraint;
}

SmoothBasis build_tprs_basis(std::span<const double> x, std::size_t k, bool centre) {
  SmoothBasis sb;
  sb.tprs = make_tprs(x, k);
  Eigen::MatrixXd Xr = sb.tprs.raw(x);
  if (!centre) {
    sb.X = std::move(Xr);
    sb.S = sb.tprs.penalty;
    sb.null_space_dim = 2;
    sb.constrained = false;
    return sb;
  }
  const Eigen::Index kk = static_cast<Eigen::Index>(k);
  Eigen::MatrixXd Ct = Xr.colwise().sum().transpose();  // k x 1
  Eigen::HouseholderQR<Eigen::MatrixXd> qr(Ct);
  Eigen::MatrixXd Q = qr.householderQ() * Eigen::MatrixXd::Identity(kk, kk);
  sb.constraint = Q.rightCols(kk - 1);
  sb.X = Xr * sb.constraint;
  sb.S = sb.constraint.transpose() * sb.tprs.penalty * sb.constraint;
  sb.S = 0.5 * (sb.S + sb.S.transpose()).eval();
  sb.null_space_dim = 1;
  sb.constrained = true;
  return sb;
}

Penalty make_penalty(std::size_t begin, const Eigen::MatrixXd& S, std::string name) {
  Penalty p;
  p.begin = begin;
  p.S = 0.5 * (S + S.transpose());
  p.name = std::move(name);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(p.S);
  if (es.info() != Eigen::Success) throw NumericError("eigendecomposition of a penalty failed");
  const auto& ev = es.eigenvalues();
  double top = ev.cwiseAbs().maxCoeff();
  double thresh = top * 1e-10;
  std::vector<Eigen::Index> keep;
  for (Eigen::Index i = 0; i < ev.size(); ++i) {
    if (ev(i) > thresh) keep.push_back(i);
  }
  p.rank = keep.size();
  p.root.resize(static_cast<Eigen::Index>(keep.size()), p.S.cols());
  for (std::size_t r = 0; r < keep.size(); ++r) {
    p.root.row(static_cast<Eigen::Index>(r)) =
        std::sqrt(ev(keep[r])) * es.eigenvectors().col(keep[r]).transpose();
    p.log_det_plus += std::log(ev(keep[r]));
  }
  return p;
}

namespace {

Penalty replicate_penalty(const Penalty& one, std::size_t copies, std::size_t begin,
                          std::string name) {
  const Eigen::Index m = one.S.rows();
  const Eigen::Index r = one.root.rows();
  const Eigen::Index c = static_cast<Eigen::Index>(copies);
  Penalty p;
  p.begin = begin;
  p.name = std::move(name);
  p.S = Eigen::MatrixXd::Zero(m * c, m * c);
  p.root = Eigen::MatrixXd::Zero(r * c, m * c);
  for (Eigen::Index i = 0; i < c; ++i) {
    p.S.block(i * m, i * m, m, m) = one.S;
    p.root.block(i * r, i * m, r, m) = one.root;
  }
  p.rank = one.rank * copies;
  p.log_det_plus = one.log_det_plus * static_cast<double>(copies);
  return p;
}

std::vector<std::string> sorted_levels(const std::vector<std::string>& col) {
  std::set<std::string> s(col.begin(), col.end());
  return {s.begin(), s.end()};
}

}  // namespace

Design assemble_design(GammSpec& spec, const DataTable& data) {
  Design d;
  const std::size_t n = data.rows();
  if (n == 0) throw PreconditionError("data has 0 rows; nothing to fit");
  data.index(spec.response);
  if (!spec.factor.empty()) data.index(spec.factor);
  std::string group_col;
  for (const auto& t : spec.smooths) {
    data.index(t.covariate);
    if (t.k < 4) throw SpecError("basis dimension k must be at least 4, got " + std::to_string(t.k));
    if (t.type == SmoothType::difference) {
      if (t.by != spec.factor)
        throw SpecError("difference smooth by '" + t.by + "' must use the parametric factor '" +
                        spec.factor + "'");
      bool matched = std::any_of(spec.smooths.begin(), spec.smooths.end(), [&](const SmoothTerm& r) {
        return r.type == SmoothType::reference && r.covariate == t.covariate;
      });
      if (!matched)
        throw SpecError("difference smooth on '" + t.covariate + "' has no reference smooth");
    }
    if (t.type == SmoothType::factor_random) {
      data.index(t.by);
      if (!group_col.empty() && group_col != t.by)
        throw SpecError("factor smooths must share one grouping factor");
      group_col = t.by;
    }
  }
  if (group_col.empty() && data.has("token")) group_col = "token";

  // Row order: by group, then by covariate, stable.
  std::vector<double> order_key;
  if (!spec.smooths.empty()) order_key = data.numeric(spec.smooths.front().covariate);
  d.row_order.resize(n);
  std::iota(d.row_order.begin(), d.row_order.end(), std::size_t{0});
  if (!group_col.empty()) {
    const auto& g = data.text(group_col);
    std::stable_sort(d.row_order.begin(), d.row_order.end(), [&](std::size_t a, std::size_t b) {
      if (g[a] != g[b]) return g[a] < g[b];
      if (!order_key.empty()) return order_key[a] < order_key[b];
      return false;
    });
    d.group_levels = sorted_levels(g);
    d.group_starts.push_back(0);
    for (std::size_t i = 1; i < n; ++i) {
      if (g[d.row_order[i]] != g[d.row_order[i - 1]]) d.group_starts.push_back(i);
    }
    d.group_starts.push_back(n);
  } else {
    d.group_starts = {0, n};
  }
  auto reorder_num = [&](const std::string& col) {
    auto v = data.numeric(col);
    std::vector<double> out(n);
    for (std::size_t i = 0; i < n; ++i) out[i] = v[d.row_order[i]];
    return out;
  };
  auto reorder_text = [&](const std::string& col) {
    const auto& v = data.text(col);
    std::vector<std::string> out(n);
    for (std::size_t i = 0; i < n; ++i) out[i] = v[d.row_order[i]];
    return out;
  };

  std::vector<double> y = reorder_num(spec.response);
  std::vector<std::string> fac;
  if (!spec.factor.empty()) {
    fac = reorder_text(spec.factor);
    auto lv = sorted_levels(fac);
    if (spec.reference.empty()) spec.reference = lv.front();
    if (std::find(lv.begin(), lv.end(), spec.reference) == lv.end())
      throw SpecError("reference level '" + spec.reference + "' does not occur in column '" +
                      spec.factor + "'");
    d.levels.push_back(spec.reference);
    for (const auto& l : lv) {
      if (l != spec.reference) d.levels.push_back(l);
    }
  }

  struct PendingBlock {
    DesignBlock block;
    Eigen::MatrixXd cols;
  };
  std::vector<PendingBlock> pending;
  std::vector<std::pair<std::size_t, Eigen::MatrixXd>> pending_pen;  // block index, S
  std::vector<std::string> pending_pen_names;

  {
    DesignBlock b;
    b.name = "(Intercept)";
    b.kind = BlockKind::intercept;
    pending.push_back({b, Eigen::MatrixXd::Ones(static_cast<Eigen::Index>(n), 1)});
  }
  for (std::size_t l = 1; l < d.levels.size(); ++l) {
    DesignBlock b;
    b.name = spec.factor + "=" + d.levels[l];
    b.kind = BlockKind::parametric;
    b.level = d.levels[l];
    Eigen::MatrixXd c(static_cast<Eigen::Index>(n), 1);
    for (std::size_t i = 0; i < n; ++i) c(static_cast<Eigen::Index>(i), 0) = fac[i] == d.levels[l];
    pending.push_back({b, c});
  }

  std::map<std::tuple<std::string, std::size_t, bool>, std::size_t> basis_cache;
  auto get_basis = [&](const std::string& cov, std::size_t k, bool centre) -> std::size_t {
    auto x = reorder_num(cov);
    std::set<double> distinct(x.begin(), x.end());
    std::size_t keff = k;
    if (distinct.size() < k) {
      keff = distinct.size() - 1;
      d.warnings.push_back("s(" + cov + "): only " + std::to_string(distinct.size()) +
                           " distinct values, basis dimension reduced from " + std::to_string(k) +
                           " to " + std::to_string(keff));
    }
    auto key = std::make_tuple(cov, keff, centre);
    auto it = basis_cache.find(key);
    if (it != basis_cache.end()) return it->second;
    d.bases.push_back(build_tprs_basis(x, keff, centre));
    basis_cache[key] = d.bases.size() - 1;
    return d.bases.size() - 1;
  };

  for (const auto& t : spec.smooths) {
    if (t.type == SmoothType::reference) {
      std::size_t bi = get_basis(t.covariate, t.k, true);
      DesignBlock b;
      b.name = "s(" + t.covariate + ")";
      b.kind = BlockKind::reference;
      b.basis = static_cast<long>(bi);
      pending.push_back({b, d.bases[bi].X});
      pending_pen.emplace_back(pending.size() - 1, d.bases[bi].S);
      pending_pen_names.push_back(b.name);
    } else if (t.type == SmoothType::difference) {
      std::size_t bi = get_basis(t.covariate, t.k, true);
      for (std::size_t l = 1; l < d.levels.size(); ++l) {
        DesignBlock b;
        b.name = "s(" + t.covariate + "):" + spec.factor + "=" + d.levels[l];
        b.kind = BlockKind::difference;
        b.level = d.levels[l];
        b.basis = static_cast<long>(bi);
        Eigen::MatrixXd c = d.bases[bi].X;
        for (std::size_t i = 0; i < n; ++i) {
          if (fac[i] != d.levels[l]) c.row(static_cast<Eigen::Index>(i)).setZero();
        }
        pending.push_back({b, c});
        pending_pen.emplace_back(pending.size() - 1, d.bases[bi].S);
        pending_pen_names.push_back(b.name);
      }
    } else {
      std::size_t bi = get_basis(t.covariate, t.k, false);
      const SmoothBasis& sb = d.bases[bi];
      const Eigen::Index m = sb.X.cols();
      const Eigen::Index ng = static_cast<Eigen::Index>(d.group_levels.size());
      DesignBlock b;
      b.name = "fs(" + t.covariate + "," + t.by + ")";
      b.kind = BlockKind::factor_random;
      b.basis = static_cast<long>(bi);
      Eigen::MatrixXd c = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(n), m * ng);
      for (Eigen::Index g = 0; g < ng; ++g) {
        for (std::size_t i = d.group_starts[static_cast<std::size_t>(g)];
             i < d.group_starts[static_cast<std::size_t>(g) + 1]; ++i) {
          c.block(static_cast<Eigen::Index>(i), g * m, 1, m) = sb.X.row(static_cast<Eigen::Index>(i));
        }
      }
      pending.push_back({b, c});
      // Wiggliness and null-space penalties, each shared by all groups.
      Eigen::MatrixXd Sn = Eigen::MatrixXd::Zero(m, m);
      double wig_rank = static_cast<double>(m - 2);
      double scale = sb.S.trace() / wig_rank;
      Sn(m - 2, m - 2) = scale;
      Sn(m - 1, m - 1) = scale;
      pending_pen.emplace_back(pending.size() - 1, sb.S);
      pending_pen_names.push_back(b.name + ".wiggle");
      pending_pen.emplace_back(pending.size() - 1, Sn);
      pending_pen_names.push_back(b.name + ".null");
    }
  }

  std::size_t p = 0;
  for (auto& pb : pending) {
    pb.block.begin = p;
    p += static_cast<std::size_t>(pb.cols.cols());
    pb.block.end = p;
  }
  d.X.resize(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(p));
  for (auto& pb : pending) {
    d.X.middleCols(static_cast<Eigen::Index>(pb.block.begin), pb.cols.cols()) = pb.cols;
    for (Eigen::Index c = 0; c < pb.cols.cols(); ++c) {
      if (pb.block.kind == BlockKind::factor_random) {
        Eigen::Index m = d.bases[static_cast<std::size_t>(pb.block.basis)].X.cols();
        d.column_names.push_back(pb.block.name + "." + d.group_levels[static_cast<std::size_t>(c / m)] +
                                 "." + std::to_string(c % m + 1));
      } else if (pb.cols.cols() == 1) {
        d.column_names.push_back(pb.block.name);
      } else {
        d.column_names.push_back(pb.block.name + "." + std::to_string(c + 1));
      }
    }
  }
  for (std::size_t i = 0; i < pending_pen.size(); ++i) {
    auto& [bi, S] = pending_pen[i];
    DesignBlock& b = pending[bi].block;
    // Scale so that lambda = 1 weighs the penalty like the data on its
    // penalized columns.
    const Eigen::MatrixXd& cols = pending[bi].cols;
    const Eigen::Index m = S.rows();
    double dx = 0, ds = 0;
    std::size_t used = 0;
    for (Eigen::Index c = 0; c < cols.cols(); ++c) {
      if (S(c % m, c % m) <= 0) continue;
      dx += cols.col(c).squaredNorm();
      ds += S(c % m, c % m);
      ++used;
    }
    if (used && ds > 0 && dx > 0) S *= dx / ds;
    if (b.kind == BlockKind::factor_random) {
      Penalty one = make_penalty(0, S, pending_pen_names[i]);
      std::size_t copies = (b.end - b.begin) / static_cast<std::size_t>(S.rows());
      d.penalties.push_back(replicate_penalty(one, copies, b.begin, pending_pen_names[i]));
    } else {
      d.penalties.push_back(make_penalty(b.begin, S, pending_pen_names[i]));
    }
    b.penalties.push_back(d.penalties.size() - 1);
  }
  for (auto& pb : pending) d.blocks.push_back(std::move(pb.block));
  d.y = Eigen::Map<const Eigen::VectorXd>(y.data(), static_cast<Eigen::Index>(n));
  return d;
}

}  // namespace convprobe
