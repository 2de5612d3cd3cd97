#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

namespace mixpanel {

using Eigen::Index;
using Eigen::MatrixXd;
using Eigen::VectorXd;

// ---------------------------------------------------------------------------
// Errors
// ---------------------------------------------------------------------------

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Malformed or inconsistent input data (maps to CLI exit code 2).
class DataError : public Error {
 public:
  using Error::Error;
};

/// Invalid model specification or configuration (CLI exit code 1).
class SpecError : public Error {
 public:
  using Error::Error;
};

/// Estimation could not produce a usable fit (CLI exit code 3).
class EstimationError : public Error {
 public:
  EstimationError(const std::string& what, std::vector<std::string> diagnostics = {})
      : Error(what), diagnostics_(std::move(diagnostics)) {}
  const std::vector<std::string>& diagnostics() const { return diagnostics_; }

 private:
  std::vector<std::string> diagnostics_;
};

/// Rank-deficient design; names the offending columns.
class SingularError : public EstimationError {
 public:
  SingularError(const std::string& what, std::vector<std::string> columns)
      : EstimationError(what), columns_(std::move(columns)) {}
  const std::vector<std::string>& columns() const { return columns_; }

 private:
  std::vector<std::string> columns_;
};

// ---------------------------------------------------------------------------
// Enumerations
// ---------------------------------------------------------------------------

enum class Family { gaussian, bernoulli };
enum class Link { identity, logit, probit };

/// How the dependence between covariates and the random intercept is handled.
///   FM    - plain discrete mixture, covariate-independent masses
///   FMQP  - discrete mixture on the within/between decomposed design
///   COV   - discrete mixture with multinomial-logit masses in unit means
///   PAR   - Gaussian random intercept by adaptive quadrature
///   PARQP - PAR on the within/between decomposed design
///   FE    - fixed effects (demeaning or per-unit dummies)
enum class Treatment { FM, FMQP, COV, PAR, PARQP, FE };

enum class KRule { fixed, lik_threshold, aic, bic };

inline std::string to_string(Family f) { return f == Family::gaussian ? "gaussian" : "bernoulli"; }

inline std::string to_string(Link l) {
  switch (l) {
    case Link::identity: return "identity";
    case Link::logit: return "logit";
    case Link::probit: return "probit";
  }
  return "?";
}

inline std::string to_string(Treatment t) {
  switch (t) {
    case Treatment::FM: return "FM";
    case Treatment::FMQP: return "FMQP";
    case Treatment::COV: return "COV";
    case Treatment::PAR: return "PAR";
    case Treatment::PARQP: return "PARQP";
    case Treatment::FE: return "FE";
  }
  return "?";
}

inline std::string to_string(KRule r) {
  switch (r) {
    case KRule::fixed: return "fixed";
    case KRule::lik_threshold: return "lik";
    case KRule::aic: return "aic";
    case KRule::bic: return "bic";
  }
  return "?";
}

inline Family parse_family(const std::string& s) {
  if (s == "gaussian") return Family::gaussian;
  if (s == "bernoulli" || s == "binomial") return Family::bernoulli;
  throw SpecError("unknown family '" + s + "'");
}

inline Link parse_link(const std::string& s) {
  if (s == "identity") return Link::identity;
  if (s == "logit") return Link::logit;
  if (s == "probit") return Link::probit;
  throw SpecError("unknown link '" + s + "'");
}

inline Treatment parse_treatment(const std::string& s) {
  std::string u = s;
  std::transform(u.begin(), u.end(), u.begin(), [](unsigned char c) { return std::toupper(c); });
  if (u == "FM") return Treatment::FM;
  if (u == "FMQP") return Treatment::FMQP;
  if (u == "COV") return Treatment::COV;
  if (u == "PAR") return Treatment::PAR;
  if (u == "PARQP") return Treatment::PARQP;
  if (u == "FE") return Treatment::FE;
  if (u == "FEBC") throw SpecError("FEbc (bias-corrected fixed effects) is not implemented: out of scope, see README");
  throw SpecError("unknown treatment '" + s + "'");
}

inline KRule parse_k_rule(const std::string& s) {
  if (s == "fixed") return KRule::fixed;
  if (s == "lik" || s == "lik_threshold" || s == "likelihood") return KRule::lik_threshold;
  if (s == "aic" || s == "AIC") return KRule::aic;
  if (s == "bic" || s == "BIC") return KRule::bic;
  throw SpecError("unknown k-rule '" + s + "'");
}

// ---------------------------------------------------------------------------
// PanelDataset
// ---------------------------------------------------------------------------

/// Unbalanced longitudinal sample {y_it, x_it}.
///
/// Observations are stored observation-major with a per-observation unit
/// index. The constructor stable-sorts observations by unit so that each
/// unit occupies a contiguous block; units keep the order of `unit_ids`.
/// The model intercept is implicit: `X` never carries a constant column.
class PanelDataset {
 public:
  PanelDataset() = default;

  PanelDataset(std::vector<std::string> unit_ids, std::vector<Index> obs_unit, VectorXd y, MatrixXd X,
               std::vector<std::string> covariate_names, std::vector<int> time_index = {})
      : unit_ids_(std::move(unit_ids)), names_(std::move(covariate_names)) {
    const Index N = y.size();
    if (static_cast<Index>(obs_unit.size()) != N) throw DataError("obs_unit length differs from y length");
    if (X.rows() != N) throw DataError("X row count differs from y length");
    if (static_cast<Index>(names_.size()) != X.cols()) throw DataError("covariate_names length differs from X columns");
    if (!time_index.empty() && static_cast<Index>(time_index.size()) != N)
      throw DataError("time_index length differs from y length");
    const Index n = static_cast<Index>(unit_ids_.size());
    for (Index u : obs_unit)
      if (u < 0 || u >= n) throw DataError("obs_unit entry out of range");

    std::vector<Index> order(N);
    std::iota(order.begin(), order.end(), Index{0});
    std::stable_sort(order.begin(), order.end(), [&](Index a, Index b) { return obs_unit[a] < obs_unit[b]; });

    y_.resize(N);
    X_.resize(N, X.cols());
    obs_unit_.resize(N);
    time_.resize(N);
    for (Index j = 0; j < N; ++j) {
      const Index src = order[j];
      y_(j) = y(src);
      X_.row(j) = X.row(src);
      obs_unit_[j] = obs_unit[src];
      time_[j] = time_index.empty() ? 0 : time_index[src];
    }
    if (time_index.empty()) {
      // occasion counter within unit
      for (Index j = 0; j < N; ++j) time_[j] = (j > 0 && obs_unit_[j] == obs_unit_[j - 1]) ? time_[j - 1] + 1 : 0;
    }
    offsets_.assign(n + 1, 0);
    for (Index u : obs_unit_) ++offsets_[u + 1];
    for (Index i = 0; i < n; ++i) offsets_[i + 1] += offsets_[i];
  }

  Index n_units() const { return static_cast<Index>(unit_ids_.size()); }
  Index n_obs() const { return y_.size(); }
  Index n_covariates() const { return X_.cols(); }

  Index unit_begin(Index i) const { return offsets_[i]; }
  Index unit_size(Index i) const { return offsets_[i + 1] - offsets_[i]; }

  const VectorXd& y() const { return y_; }
  const MatrixXd& X() const { return X_; }
  const std::vector<Index>& obs_unit() const { return obs_unit_; }
  const std::vector<std::string>& unit_ids() const { return unit_ids_; }
  const std::vector<std::string>& covariate_names() const { return names_; }
  const std::vector<int>& time_index() const { return time_; }

  bool balanced() const {
    for (Index i = 1; i < n_units(); ++i)
      if (unit_size(i) != unit_size(0)) return false;
    return true;
  }

  /// Same units and responses, different design.
  PanelDataset with_design(MatrixXd X, std::vector<std::string> names) const {
    if (X.rows() != n_obs()) throw DataError("replacement design has wrong row count");
    if (static_cast<Index>(names.size()) != X.cols()) throw DataError("replacement names do not match columns");
    PanelDataset out = *this;
    out.X_ = std::move(X);
    out.names_ = std::move(names);
    return out;
  }

  /// Observations of the listed units, re-indexed in the given order.
  PanelDataset subset_units(const std::vector<Index>& units) const {
    std::vector<std::string> ids;
    std::vector<Index> ou;
    std::vector<int> ti;
    Index N = 0;
    for (Index u : units) N += unit_size(u);
    VectorXd y(N);
    MatrixXd X(N, n_covariates());
    Index r = 0;
    for (std::size_t k = 0; k < units.size(); ++k) {
      const Index u = units[k];
      ids.push_back(unit_ids_[u]);
      for (Index j = unit_begin(u); j < unit_begin(u) + unit_size(u); ++j, ++r) {
        y(r) = y_(j);
        X.row(r) = X_.row(j);
        ou.push_back(static_cast<Index>(k));
        ti.push_back(time_[j]);
      }
    }
    return PanelDataset(std::move(ids), std::move(ou), std::move(y), std::move(X), names_, std::move(ti));
  }

 private:
  std::vector<std::string> unit_ids_;
  std::vector<std::string> names_;
  std::vector<Index> obs_unit_;
  std::vector<int> time_;
  std::vector<Index> offsets_;
  VectorXd y_;
  MatrixXd X_;
};

// ---------------------------------------------------------------------------
// ModelSpec
// ---------------------------------------------------------------------------

struct ModelSpec {
  Family family = Family::gaussian;
  Link link = Link::identity;
  Treatment treatment = Treatment::FM;
  KRule k_rule = KRule::fixed;
  int k = 2;      // used when k_rule == fixed
  int k_max = 6;  // upper end of the K search
  /// Covariate columns whose unit means drive the concomitant weight model.
  /// Empty selects the unit means of every time-varying column.
  std::vector<std::string> weight_covariates;
  /// Restrict the concomitant model to intercepts only (all slopes zero).
  bool weight_intercept_only = false;
  double em_tol = 1e-8;
  int max_iter = 500;
  int n_starts = 10;
  std::uint64_t seed = 20240501;
  int quadrature_nodes = 15;
};

// ---------------------------------------------------------------------------
// MixtureParams
// ---------------------------------------------------------------------------

/// Covariate-independent masses pi (a K-simplex).
struct ConstantWeights {
  VectorXd pi;
};

/// Multinomial-logit masses. Row k holds (intercept, slopes) of component k
/// for k = 0..K-2; the last component is the reference with an implicit zero
/// row.
struct LogisticWeights {
  MatrixXd gamma;
};

using WeightModel = std::variant<ConstantWeights, LogisticWeights>;

struct MixtureParams {
  VectorXd beta;           // slopes on the model design (no intercept column)
  double intercept = 0.0;  // global intercept; 0 when absorbed in zeta (K >= 2)
  VectorXd zeta;           // component locations, ascending
  WeightModel weights = ConstantWeights{VectorXd::Ones(1)};
  double sigma_e = std::numeric_limits<double>::quiet_NaN();  // gaussian only

  Index n_components() const { return zeta.size(); }
  bool logistic() const { return std::holds_alternative<LogisticWeights>(weights); }
};

/// log pi_ik for unit covariate row z (without leading 1) under `w`, K components.
inline void log_prior_row(const WeightModel& w, Index K, const double* z, Index q, double* out) {
  if (const auto* c = std::get_if<ConstantWeights>(&w)) {
    for (Index k = 0; k < K; ++k) out[k] = std::log(c->pi(k));
    return;
  }
  const auto& g = std::get<LogisticWeights>(w).gamma;
  double mx = 0.0;  // reference score
  for (Index k = 0; k + 1 < K; ++k) {
    double s = g(k, 0);
    for (Index l = 0; l < q; ++l) s += g(k, l + 1) * z[l];
    out[k] = s;
    mx = std::max(mx, s);
  }
  out[K - 1] = 0.0;
  double tot = 0.0;
  for (Index k = 0; k < K; ++k) tot += std::exp(out[k] - mx);
  const double lse = mx + std::log(tot);
  for (Index k = 0; k < K; ++k) out[k] -= lse;
}

// ---------------------------------------------------------------------------
// FitResult
// ---------------------------------------------------------------------------

struct KPathEntry {
  int k = 0;
  double loglik = 0.0;
  int npar = 0;
  double aic = 0.0;
  double bic = 0.0;
  bool converged = false;
};

struct FitResult {
  Treatment treatment = Treatment::FM;
  MixtureParams params;
  double sigma_u = std::numeric_limits<double>::quiet_NaN();  // PAR / PARQP only
  double loglik = -std::numeric_limits<double>::infinity();
  int npar = 0;
  double aic = 0.0;
  double bic = 0.0;
  MatrixXd tau;  // n x K posteriors
  bool converged = false;
  int iterations = 0;
  int start_index = 0;
  std::vector<double> loglik_history;
  double max_loglik_drop = 0.0;  // largest per-iteration decrease over every start
  std::vector<KPathEntry> k_path;
  std::vector<std::string> flags;
  std::vector<std::string> term_names;  // design columns behind params.beta
  std::vector<std::string> weight_names;  // concomitant covariates (COV)
  Index n_units = 0;

  void flag(const std::string& f) {
    if (std::find(flags.begin(), flags.end(), f) == flags.end()) flags.push_back(f);
  }
  bool has_flag(const std::string& f) const { return std::find(flags.begin(), flags.end(), f) != flags.end(); }
};

inline double aic_value(double loglik, int npar) { return -2.0 * loglik + 2.0 * npar; }
inline double bic_value(double loglik, int npar, Index n_units) {
  return -2.0 * loglik + std::log(static_cast<double>(n_units)) * npar;
}

// ---------------------------------------------------------------------------
// Operations
// ---------------------------------------------------------------------------

/// Number of free parameters. `p` counts design slopes (no intercept), `q`
/// counts concomitant covariates (COV only). K = 1 is a plain GLM: p slopes +
/// intercept (+ sigma).
inline int npar(const ModelSpec& spec, int K, int p, int q) {
  if (K < 1) throw SpecError("npar: K must be >= 1");
  const int sigma = spec.family == Family::gaussian ? 1 : 0;
  int weights = 0;
  if (K > 1) weights = spec.treatment == Treatment::COV ? (K - 1) * (q + 1) : (K - 1);
  return p + K + weights + sigma;
}

/// Joint data/spec admissibility check. Throws SpecError for spec problems
/// and DataError for data problems, each listing every violation found.
inline void validate(const PanelDataset& data, const ModelSpec& spec) {
  std::vector<std::string> spec_problems, data_problems;
  const bool gauss = spec.family == Family::gaussian;
  if (gauss && spec.link != Link::identity)
    spec_problems.push_back("link/family mismatch: gaussian requires identity link");
  if (!gauss && spec.link == Link::identity)
    spec_problems.push_back("link/family mismatch: bernoulli requires logit or probit link");
  if (spec.k_rule == KRule::fixed && spec.k < 1) spec_problems.push_back("fixed K must be >= 1");
  if (spec.k_rule != KRule::fixed && spec.k_max < 1) spec_problems.push_back("k_max must be >= 1");
  if (spec.treatment == Treatment::COV && spec.k_rule != KRule::fixed && spec.k_max < 2)
    spec_problems.push_back("COV requires k_max >= 2");
  if (!(spec.em_tol > 0.0)) spec_problems.push_back("em_tol must be positive");
  if (spec.max_iter < 1) spec_problems.push_back("max_iter must be >= 1");
  if (spec.n_starts < 1) spec_problems.push_back("n_starts must be >= 1");
  if (spec.quadrature_nodes < 1) spec_problems.push_back("quadrature_nodes must be >= 1");

  if (data.n_units() == 0) data_problems.push_back("panel has no units");
  int empty_units = 0;
  for (Index i = 0; i < data.n_units(); ++i) {
    if (data.unit_size(i) == 0 && ++empty_units <= 5)
      data_problems.push_back("unit '" + data.unit_ids()[i] + "' has zero observations");
  }
  Index bad_y = -1, nonfinite = -1;
  for (Index j = 0; j < data.n_obs(); ++j) {
    const double v = data.y()(j);
    if (!std::isfinite(v) || !data.X().row(j).allFinite()) {
      if (nonfinite < 0) nonfinite = j;
      continue;
    }
    if (!gauss && v != 0.0 && v != 1.0 && bad_y < 0) bad_y = j;
  }
  if (nonfinite >= 0) data_problems.push_back("missing or non-finite value at observation " + std::to_string(nonfinite));
  if (bad_y >= 0)
    data_problems.push_back("non-binary response at observation " + std::to_string(bad_y) + " (unit '" +
                            data.unit_ids()[data.obs_unit()[bad_y]] + "')");

  auto join = [](const std::vector<std::string>& v) {
    std::ostringstream os;
    for (std::size_t k = 0; k < v.size(); ++k) os << (k ? "; " : "") << v[k];
    return os.str();
  };
  if (!spec_problems.empty()) throw SpecError(join(spec_problems));
  if (!data_problems.empty()) throw DataError(join(data_problems));
}

}  // namespace mixpanel
