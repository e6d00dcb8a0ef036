#pragma once

#include <cstddef>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

namespace convprobe {

// Long-format table; every cell is kept as text and parsed on demand.
// Column lookup accepts "sample" for sample_index and "token" for token_id.
struct DataTable {
  std::vector<std::string> names;
  std::vector<std::vector<std::string>> columns;

  std::size_t rows() const { return columns.empty() ? 0 : columns.front().size(); }
  bool has(const std::string& name) const;
  std::size_t index(const std::string& name) const;  // SpecError when missing
  const std::vector<std::string>& text(const std::string& name) const;
  std::vector<double> numeric(const std::string& name) const;
};

DataTable parse_table(const std::string& csv_text);
DataTable read_table(const std::filesystem::path& path);
DataTable filter_rows(const DataTable& t, const std::string& column, const std::string& value);

enum class SmoothType { reference, difference, factor_random };
enum class Ar1Mode { off, fixed, automatic };
enum class Criterion { reml, gcv };

struct SmoothTerm {
  std::string covariate;
  std::string by;  // factor for difference and factor_random smooths
  std::size_t k = 10;
  SmoothType type = SmoothType::reference;
};

struct GammSpec {
  std::string response;
  std::string factor;     // parametric treatment-coded factor, may be empty
  std::string reference;  // reference level; empty picks the first sorted level
  std::vector<SmoothTerm> smooths;
  Ar1Mode ar1 = Ar1Mode::off;
  double rho = 0;  // used when ar1 is fixed
  Criterion criterion = Criterion::reml;
};

inline constexpr std::size_t kDefaultSmoothK = 10;
inline constexpr std::size_t kDefaultFactorSmoothK = 5;

// value ~ word + s(sample, k=10) + s(sample, by=word, k=10) + fs(sample, token) + ar1(auto)
GammSpec parse_formula(const std::string& formula);
std::string format_formula(const GammSpec& spec);

void to_json(nlohmann::json& j, const GammSpec& s);
void from_json(const nlohmann::json& j, GammSpec& s);

// One-dimensional thin plate regression spline with eta(r) = r^3 / 12 on
// covariate values mapped to [0, 1]. Raw columns: k - 2 range-space columns,
// then 1 and u.
struct TprsBasis {
  std::size_t k = 0;
  double x_min = 0;
  double x_range = 1;
  Eigen::VectorXd knots;     // mapped to [0, 1]
  Eigen::MatrixXd uz;        // knots x (k - 2)
  Eigen::MatrixXd penalty;   // k x k, zero on the two null-space columns

  Eigen::MatrixXd raw(std::span<const double> x) const;
};

inline constexpr std::size_t kMaxKnots = 300;

TprsBasis make_tprs(std::span<const double> x, std::size_t k, std::size_t max_knots = kMaxKnots);

struct SmoothBasis {
  TprsBasis tprs;
  Eigen::MatrixXd constraint;  // k x (k - 1) when centred, empty otherwise
  Eigen::MatrixXd X;           // n x k_j
  Eigen::MatrixXd S;           // k_j x k_j
  std::size_t null_space_dim = 2;
  bool constrained = false;

  Eigen::MatrixXd evaluate(std::span<const double> x) const;
};

// Fewer than k distinct covariate values is a BasisError.
SmoothBasis build_tprs_basis(std::span<const double> x, std::size_t k, bool centre = true);

struct Penalty {
  std::size_t begin = 0;  // first design column
  Eigen::MatrixXd S;      // square, covering columns [begin, begin + S.rows())
  Eigen::MatrixXd root;   // rank x size with root^T root = S
  std::size_t rank = 0;
  double log_det_plus = 0;  // log of the product of the positive eigenvalues
  std::string name;
};

Penalty make_penalty(std::size_t begin, const Eigen::MatrixXd& S, std::string name);

enum class BlockKind { intercept, parametric, reference, difference, factor_random };

struct DesignBlock {
  std::string name;
  BlockKind kind = BlockKind::parametric;
  std::string level;  // factor level for parametric and difference blocks
  std::size_t begin = 0;
  std::size_t end = 0;
  long basis = -1;    // index into Design::bases for smooth blocks
  std::vector<std::size_t> penalties;
};

struct Design {
  Eigen::MatrixXd X;
  Eigen::VectorXd y;
  std::vector<std::string> column_names;
  std::vector<DesignBlock> blocks;
  std::vector<Penalty> penalties;
  std::vector<SmoothBasis> bases;
  std::vector<std::string> levels;        // factor levels, reference first
  std::vector<std::string> group_levels;  // token levels, sorted
  std::vector<std::size_t> group_starts;  // row ranges per token, plus n
  std::vector<std::size_t> row_order;     // original row of each design row
  std::vector<std::string> warnings;
};

// Validates spec against data, resolving the reference level, and orders
// rows by token then covariate.
Design assemble_design(GammSpec& spec, const DataTable& data);

struct PlsResult {
  Eigen::VectorXd beta;
  Eigen::MatrixXd Vb;
  double sigma2 = 0;
  double rss = 0;
  double trace = 0;               // tr(A)
  Eigen::VectorXd edf;            // per column: diag of (X'X + S)^-1 X'X
  Eigen::VectorXd ref_diag;       // per column: diag of 2F - F^2
  Eigen::VectorXd fitted;         // when the design matrix was given
  Eigen::MatrixXd Hinv;           // (X'X + S)^-1
};

// Triangular factor of the (weighted) design: X = Q R, f = Q'y, and the
// residual sum of squares of y outside the column space.
struct QrParts {
  Eigen::MatrixXd R;
  Eigen::VectorXd f;
  double rss0 = 0;
  std::size_t n = 0;
};

QrParts qr_parts(const Eigen::MatrixXd& X, const Eigen::VectorXd& y);

// Minimizes |y - X b|^2 + sum_j lambda_j b' S_j b. Throws RankError naming
// the aliased columns when the penalized system is singular.
PlsResult fit_pls(const Eigen::MatrixXd& X, const Eigen::VectorXd& y,
                  const std::vector<Penalty>& penalties, std::span<const double> lambda,
                  std::span<const double> weights = {},
                  const std::vector<std::string>& column_names = {});
PlsResult fit_pls(const QrParts& qr, const std::vector<Penalty>& penalties,
                  std::span<const double> lambda,
                  const std::vector<std::string>& column_names = {});

// Gaussian REML with the scale profiled out.
double reml_score(const QrParts& qr, const std::vector<Penalty>& penalties,
                  std::span<const double> lambda, Eigen::VectorXd* grad_log_lambda = nullptr);
double gcv_score(const QrParts& qr, const std::vector<Penalty>& penalties,
                 std::span<const double> lambda);

struct SmoothingResult {
  std::vector<double> lambda;
  double score = 0;
  std::size_t iterations = 0;
  bool converged = false;
  double grad_norm = 0;
  double jitter = 0;  // largest diagonal jitter added to a Cholesky factor
};

inline constexpr double kLogLambdaMin = -20;
inline constexpr double kLogLambdaMax = 25;

SmoothingResult optimize_reml(const QrParts& qr, const std::vector<Penalty>& penalties,
                              std::span<const double> lambda0, double tol = 1e-6,
                              std::size_t max_iter = 200);
SmoothingResult optimize_gcv(const QrParts& qr, const std::vector<Penalty>& penalties,
                             std::span<const double> lambda0, double tol = 1e-6,
                             std::size_t max_iter = 200);

// Pooled lag-1 autocorrelation within groups: sum e_t e_{t-1} / sum e_t^2.
double pooled_lag1(std::span<const double> e, const std::vector<std::size_t>& group_starts);

// Within each group the first row is scaled by sqrt(1 - rho^2) and later
// rows become row_t - rho row_{t-1}. |rho| >= 1 is a StabilityError.
void ar1_transform(Eigen::MatrixXd& X, Eigen::VectorXd& y,
                   const std::vector<std::size_t>& group_starts, double rho);

struct BlockStats {
  std::string name;
  BlockKind kind = BlockKind::parametric;
  double edf = 0;
  double ref_df = 0;
};

struct GammFit {
  GammSpec spec;
  std::vector<std::string> column_names;
  std::vector<DesignBlock> blocks;
  std::vector<SmoothBasis> bases;  // evaluation data only; X and S are not kept
  std::vector<std::string> levels;
  std::vector<std::string> group_levels;
  Eigen::VectorXd beta;
  Eigen::MatrixXd Vb;
  std::vector<double> lambda;
  std::vector<std::string> lambda_names;
  double sigma2 = 0;
  double rho = 0;
  double edf_total = 0;
  double deviance = 0;  // residual sum of squares of the final (whitened) fit
  double score = 0;     // REML or GCV score at the optimum
  std::size_t n = 0;
  std::size_t iterations = 0;
  bool converged = true;
  std::vector<BlockStats> block_stats;
  std::vector<std::string> warnings;
  double x_min = 0;
  double x_max = 0;

  // In-memory only: final working residuals in design row order.
  Eigen::VectorXd residuals;
  std::vector<std::size_t> group_starts;

  const DesignBlock& block(const std::string& name) const;
};

struct FitOptions {
  double lambda0 = 1.0;
  double tol = 1e-6;
  std::size_t max_iter = 200;
};

GammFit fit_gamm(const GammSpec& spec, const DataTable& data, const FitOptions& opt = {});

struct ParametricRow {
  std::string name;
  double estimate = 0;
  double se = 0;
  double t = 0;
  double p = 1;
};

struct SmoothRow {
  std::string name;
  double edf = 0;
  double ref_df = 0;
  double F = 0;
  double p = 1;
};

struct TestReport {
  std::vector<ParametricRow> parametric;
  std::vector<SmoothRow> smooth;
};

double residual_df(const GammFit& fit);
ParametricRow parametric_row(const std::string& name, double estimate, double se, double df);
std::vector<ParametricRow> test_parametric(const GammFit& fit);
SmoothRow test_smooth(const GammFit& fit, const std::string& term);
TestReport test_report(const GammFit& fit);

struct Prediction {
  std::vector<double> mean;
  std::vector<double> lower;
  std::vector<double> upper;
  std::vector<double> se;
  bool extrapolated = false;
};

// Population-level row of the design: factor-random blocks are left at zero.
Eigen::RowVectorXd design_row(const GammFit& fit, const std::string& level, double x);

Prediction predict_with_ci(const GammFit& fit, const std::vector<std::string>& levels,
                           std::span<const double> x, double level = 0.95);

struct Region {
  double begin = 0;
  double end = 0;
};

struct DifferenceCurve {
  std::vector<double> grid;
  std::vector<double> diff;
  std::vector<double> lower;
  std::vector<double> upper;
  std::vector<Region> significant_regions;
};

// Maximal runs of grid points whose band excludes zero.
std::vector<Region> significant_regions(std::span<const double> grid, std::span<const double> lower,
                                        std::span<const double> upper);
// Curve of level_a minus level_b; identical levels give an exact zero curve.
DifferenceCurve difference_curve(const GammFit& fit, const std::string& level_a,
                                 const std::string& level_b, std::span<const double> grid,
                                 double level = 0.95);
// As difference_curve, but an identical pair is an error.
DifferenceCurve difference_smooth(const GammFit& fit, const std::string& level_a,
                                  const std::string& level_b, std::span<const double> grid,
                                  double level = 0.95);

std::vector<double> linspace(double a, double b, std::size_t n);

void save_fit(const std::filesystem::path& path, const GammFit& fit);
GammFit load_fit(const std::filesystem::path& path);

}  // namespace convprobe
