#pragma once

#include "mixpanel/comparators.hpp"
#include "mixpanel/em.hpp"
#include "mixpanel/inference.hpp"
#include "mixpanel/parallel.hpp"

#include <array>
#include <map>
#include <random>

namespace mixpanel {

enum class Scenario { S1_1, S1_2, S1_3, S2, S3, S4 };

inline std::string to_string(Scenario s) {
  switch (s) {
    case Scenario::S1_1: return "S1_1";
    case Scenario::S1_2: return "S1_2";
    case Scenario::S1_3: return "S1_3";
    case Scenario::S2: return "S2";
    case Scenario::S3: return "S3";
    case Scenario::S4: return "S4";
  }
  return "?";
}

inline Scenario parse_scenario(std::string s) {
  std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return std::toupper(c); });
  std::replace(s.begin(), s.end(), '.', '_');
  if (s == "S1_1" || s == "1_1") return Scenario::S1_1;
  if (s == "S1_2" || s == "1_2") return Scenario::S1_2;
  if (s == "S1_3" || s == "1_3") return Scenario::S1_3;
  if (s == "S2" || s == "2") return Scenario::S2;
  if (s == "S3" || s == "3") return Scenario::S3;
  if (s == "S4" || s == "4") return Scenario::S4;
  throw SpecError("unknown scenario '" + s + "'");
}

inline bool is_s1(Scenario s) { return s == Scenario::S1_1 || s == Scenario::S1_2 || s == Scenario::S1_3; }

/// Correlation interval of the S1 sub-scenarios: (0, 0.2], (0.2, 0.5], (0.5, 0.8].
inline std::pair<double, double> default_rho_interval(Scenario s) {
  switch (s) {
    case Scenario::S1_1: return {0.0, 0.2};
    case Scenario::S1_2: return {0.2, 0.5};
    case Scenario::S1_3: return {0.5, 0.8};
    default: return {0.0, 0.0};
  }
}

struct ScenarioConfig {
  Family family = Family::gaussian;
  Scenario scenario = Scenario::S1_3;
  int n = 250;
  int T = 10;
  int B = 250;
  std::uint64_t seed = 20240501;
  std::pair<double, double> beta0_range{-0.6, -0.2};
  std::pair<double, double> beta1_range{0.25, 0.75};
  double mu_x = 0.0;
  double r_x = 0.64;
  std::optional<std::pair<double, double>> rho_interval;  // S1 override
  double gamma0 = 0.0;  // S2 / S4
  double gamma1 = 1.0;
  std::array<double, 3> zeta{-2.0, 0.0, 1.0};  // S3
  std::array<double, 3> phi0{0.0, 0.5, -3.5};
  std::array<double, 3> phi1{0.0, -3.5, 3.0};
  double sigma_e = 1.0;
  double sigma_u = 1.0;
  // fitting controls used by run_study
  int n_starts = 2;
  int k_max = 6;
  int max_iter = 2000;
  double em_tol = 1e-8;
  int quadrature_nodes = 15;
  bool score_check = false;  // record standardized gradients of selected fits

  std::pair<double, double> rho_range() const { return rho_interval ? *rho_interval : default_rho_interval(scenario); }
  Link link() const { return family == Family::gaussian ? Link::identity : Link::probit; }
};

inline void validate(const ScenarioConfig& c) {
  std::vector<std::string> bad;
  if (c.scenario == Scenario::S4 && c.family != Family::bernoulli) bad.push_back("scenario S4 requires the bernoulli family");
  if (c.n < 1 || c.T < 1) bad.push_back("n and T must be >= 1");
  if (c.B < 1) bad.push_back("B must be >= 1");
  if (!(c.r_x >= 0.0 && c.r_x < 1.0)) bad.push_back("r_x must lie in [0, 1)");
  if (!(c.sigma_e > 0.0) && c.family == Family::gaussian) bad.push_back("sigma_e must be positive");
  if (!(c.sigma_u >= 0.0)) bad.push_back("sigma_u must be nonnegative");
  if (c.beta0_range.first > c.beta0_range.second || c.beta1_range.first > c.beta1_range.second)
    bad.push_back("coefficient ranges must be ordered");
  if (is_s1(c.scenario)) {
    const auto [lo, hi] = c.rho_range();
    if (!(lo > -1.0 && hi < 1.0 && lo <= hi)) bad.push_back("rho interval must be an ordered subset of (-1, 1)");
    const double bound = std::sqrt(c.r_x);
    if (std::max(std::abs(lo), std::abs(hi)) > bound + 1e-12)
      bad.push_back("rho up to " + std::to_string(std::max(std::abs(lo), std::abs(hi))) +
                    " is infeasible with r_x = " + std::to_string(c.r_x) + " (need |rho| <= sqrt(r_x))");
  }
  if (c.n_starts < 1 || c.k_max < 1 || c.max_iter < 1) bad.push_back("fitting controls must be positive");
  if (!bad.empty()) {
    std::string s;
    for (std::size_t i = 0; i < bad.size(); ++i) s += (i ? "; " : "") + bad[i];
    throw SpecError("scenario configuration: " + s);
  }
}

// ---------------------------------------------------------------------------
// Data-generating processes
// ---------------------------------------------------------------------------

struct Covariates {
  MatrixXd X;       // n x T
  VectorXd factor;  // common factor a_i
};

/// Rows iid MVN_T(mu 1, (1 - r) I + r J) through x_it = mu + sqrt(r) a_i + sqrt(1 - r) e_it.
inline Covariates draw_covariates(int n, int T, double mu_x, double r_x, std::mt19937_64& rng) {
  std::normal_distribution<double> nd(0.0, 1.0);
  Covariates c;
  c.X.resize(n, T);
  c.factor.resize(n);
  const double a = std::sqrt(r_x), b = std::sqrt(1.0 - r_x);
  for (int i = 0; i < n; ++i) {
    c.factor(i) = nd(rng);
    for (int t = 0; t < T; ++t) c.X(i, t) = mu_x + a * c.factor(i) + b * nd(rng);
  }
  return c;
}

/// Component probabilities of S3 at unit mean xbar (softmax, component 1
/// as the zero reference).
inline std::array<double, 3> s3_probabilities(const ScenarioConfig& c, double xbar) {
  std::array<double, 3> lp{};
  double mx = -std::numeric_limits<double>::infinity();
  for (int k = 0; k < 3; ++k) {
    lp[k] = c.phi0[k] + c.phi1[k] * xbar;
    mx = std::max(mx, lp[k]);
  }
  double s = 0.0;
  for (double& v : lp) s += (v = std::exp(v - mx));
  for (double& v : lp) v /= s;
  return lp;
}

/// Random intercepts for the configured scenario given drawn covariates.
/// `rho` is the S1 correlation of the replicate (ignored otherwise).
inline VectorXd draw_random_effects(const ScenarioConfig& c, const Covariates& cov, double rho, std::mt19937_64& rng) {
  std::normal_distribution<double> nd(0.0, 1.0);
  std::uniform_real_distribution<double> ud(0.0, 1.0);
  const Index n = cov.X.rows();
  VectorXd u(n);
  switch (c.scenario) {
    case Scenario::S1_1:
    case Scenario::S1_2:
    case Scenario::S1_3: {
      if (c.r_x <= 0.0 && rho != 0.0) throw SpecError("scenario S1: rho != 0 needs r_x > 0");
      const double lambda = c.r_x > 0.0 ? rho / std::sqrt(c.r_x) : 0.0;
      if (std::abs(lambda) > 1.0) throw SpecError("scenario S1: |rho| exceeds sqrt(r_x)");
      const double rest = std::sqrt(1.0 - lambda * lambda);
      for (Index i = 0; i < n; ++i) u(i) = c.sigma_u * (lambda * cov.factor(i) + rest * nd(rng));
      break;
    }
    case Scenario::S2:
      for (Index i = 0; i < n; ++i) u(i) = std::exp(c.gamma0 + c.gamma1 * cov.X.row(i).mean()) + nd(rng);
      break;
    case Scenario::S3:
      for (Index i = 0; i < n; ++i) {
        const auto p = s3_probabilities(c, cov.X.row(i).mean());
        const double v = ud(rng);
        const int k = v < p[0] ? 0 : (v < p[0] + p[1] ? 1 : 2);
        u(i) = c.zeta[k];
      }
      break;
    case Scenario::S4:
      for (Index i = 0; i < n; ++i) u(i) = c.gamma0 + c.gamma1 * cov.X.row(i).maxCoeff() + nd(rng);
      break;
  }
  return u;
}

inline std::mt19937_64 replicate_rng(std::uint64_t seed, int replicate) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed & 0xffffffffu), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(replicate), 0x73696du};
  return std::mt19937_64(seq);
}

struct Sample {
  PanelDataset data;  // one covariate "x"
  double beta0 = 0.0;
  double beta1 = 0.0;
  double rho = 0.0;
  VectorXd u;
};

/// One replicate: coefficients and (S1) rho drawn uniformly, then
/// covariates, random intercepts and responses. Deterministic in
/// (cfg.seed, replicate).
inline Sample generate_sample(const ScenarioConfig& c, int replicate) {
  auto rng = replicate_rng(c.seed, replicate);
  std::uniform_real_distribution<double> ud(0.0, 1.0);
  std::normal_distribution<double> nd(0.0, 1.0);
  Sample s;
  s.beta0 = c.beta0_range.first + (c.beta0_range.second - c.beta0_range.first) * ud(rng);
  s.beta1 = c.beta1_range.first + (c.beta1_range.second - c.beta1_range.first) * ud(rng);
  if (is_s1(c.scenario)) {
    const auto [lo, hi] = c.rho_range();
    s.rho = lo + (hi - lo) * ud(rng);
  }
  const Covariates cov = draw_covariates(c.n, c.T, c.mu_x, c.r_x, rng);
  s.u = draw_random_effects(c, cov, s.rho, rng);
  const Index N = static_cast<Index>(c.n) * c.T;
  VectorXd y(N);
  MatrixXd X(N, 1);
  std::vector<std::string> ids;
  std::vector<Index> ou;
  std::vector<int> ti;
  for (int i = 0; i < c.n; ++i) {
    ids.push_back(std::to_string(i + 1));
    for (int t = 0; t < c.T; ++t) {
      const Index j = static_cast<Index>(i) * c.T + t;
      X(j, 0) = cov.X(i, t);
      const double eta = s.beta0 + s.beta1 * cov.X(i, t) + s.u(i);
      if (c.family == Family::gaussian)
        y(j) = eta + c.sigma_e * nd(rng);
      else
        y(j) = ud(rng) < norm_cdf(eta) ? 1.0 : 0.0;
      ou.push_back(i);
      ti.push_back(t + 1);
    }
  }
  s.data = PanelDataset(std::move(ids), std::move(ou), std::move(y), std::move(X), {"x"}, std::move(ti));
  return s;
}

// ---------------------------------------------------------------------------
// Replication study
// ---------------------------------------------------------------------------

/// A column of the result tables: a treatment, and for mixtures the rule
/// choosing K.
struct Estimator {
  Treatment treatment = Treatment::FM;
  KRule criterion = KRule::lik_threshold;

  bool mixture() const {
    return treatment == Treatment::FM || treatment == Treatment::FMQP || treatment == Treatment::COV;
  }
  std::string label() const { return to_string(treatment) + (mixture() ? ":" + to_string(criterion) : ""); }
  bool operator<(const Estimator& o) const {
    return std::pair(static_cast<int>(treatment), static_cast<int>(criterion)) <
           std::pair(static_cast<int>(o.treatment), static_cast<int>(o.criterion));
  }
  bool operator==(const Estimator& o) const { return !(*this < o) && !(o < *this); }
};

/// "FM:lik", "COV:bic", "PARQP", "FE"; a mixture without ":rule" expands
/// to all three rules.
inline std::vector<Estimator> parse_estimators(const std::string& spec) {
  std::vector<Estimator> out;
  std::stringstream ss(spec);
  std::string tok;
  while (std::getline(ss, tok, ',')) {
    tok.erase(std::remove_if(tok.begin(), tok.end(), ::isspace), tok.end());
    if (tok.empty()) continue;
    const auto colon = tok.find(':');
    Estimator e;
    e.treatment = parse_treatment(tok.substr(0, colon));
    if (e.mixture()) {
      if (colon == std::string::npos) {
        for (KRule r : {KRule::lik_threshold, KRule::aic, KRule::bic}) out.push_back({e.treatment, r});
        continue;
      }
      e.criterion = parse_k_rule(tok.substr(colon + 1));
      if (e.criterion == KRule::fixed) throw SpecError("estimator '" + tok + "': K rule must be lik, aic or bic");
    } else if (colon != std::string::npos) {
      throw SpecError("estimator '" + tok + "' takes no K rule");
    } else {
      e.criterion = KRule::fixed;
    }
    out.push_back(e);
  }
  std::sort(out.begin(), out.end());
  out.erase(std::unique(out.begin(), out.end()), out.end());
  return out;
}

inline std::vector<Estimator> all_estimators(Family family) {
  std::vector<Estimator> out;
  for (Treatment t : {Treatment::FM, Treatment::FMQP, Treatment::COV})
    for (KRule r : {KRule::lik_threshold, KRule::aic, KRule::bic}) out.push_back({t, r});
  out.push_back({Treatment::PAR, KRule::fixed});
  out.push_back({Treatment::PARQP, KRule::fixed});
  if (family == Family::bernoulli) out.push_back({Treatment::FE, KRule::fixed});
  std::sort(out.begin(), out.end());
  return out;
}

struct EstimateRecord {
  bool ok = false;
  bool converged = false;
  double beta1 = std::numeric_limits<double>::quiet_NaN();
  double beta0 = std::numeric_limits<double>::quiet_NaN();  // FM and PAR only
  int k = 0;
  double loglik = std::numeric_limits<double>::quiet_NaN();
  double score = std::numeric_limits<double>::quiet_NaN();  // standardized gradient, when checked
  std::string message;
};

struct ReplicateRecord {
  int index = 0;
  double beta0 = 0.0;
  double beta1 = 0.0;
  double rho = 0.0;
  std::map<Estimator, EstimateRecord> estimates;
};

struct MetricsRow {
  Estimator estimator;
  std::string coef;  // "beta1" or "beta0"
  int b_effective = 0;
  double ase = 0.0;
  double bias = 0.0;
  double sd = std::numeric_limits<double>::quiet_NaN();  // absent when b_effective < 2
};

struct StudyResult {
  ScenarioConfig config;
  std::vector<Estimator> estimators;
  std::vector<MetricsRow> rows;
  std::vector<ReplicateRecord> replicates;
  std::vector<std::string> warnings;

  const MetricsRow* find(const Estimator& e, const std::string& coef = "beta1") const {
    for (const auto& r : rows)
      if (r.estimator == e && r.coef == coef) return &r;
    return nullptr;
  }
};

/// bias = mean error, sd = sample sd of errors, ASE = mean squared error
/// (so ASE = bias^2 + sd^2 (B-1)/B).
inline MetricsRow summarize(const Estimator& e, const std::string& coef, const std::vector<double>& err) {
  MetricsRow r;
  r.estimator = e;
  r.coef = coef;
  r.b_effective = static_cast<int>(err.size());
  if (err.empty()) {
    r.ase = r.bias = std::numeric_limits<double>::quiet_NaN();
    return r;
  }
  const double B = static_cast<double>(err.size());
  double s = 0.0, ss = 0.0;
  for (double v : err) {
    s += v;
    ss += v * v;
  }
  r.bias = s / B;
  r.ase = ss / B;
  if (err.size() >= 2) {
    double d = 0.0;
    for (double v : err) d += (v - r.bias) * (v - r.bias);
    r.sd = std::sqrt(d / (B - 1.0));
  }
  return r;
}

namespace detail {

inline EstimateRecord record_fit(const FitResult& fit, const ModelFrame& f, const ModelSpec& spec, bool score) {
  EstimateRecord r;
  r.ok = true;
  r.converged = fit.converged;
  r.beta1 = fit.params.beta(0);
  r.k = static_cast<int>(fit.params.n_components());
  r.loglik = fit.loglik;
  if (fit.treatment == Treatment::FM || fit.treatment == Treatment::PAR) {
    if (fit.params.n_components() == 1) {
      r.beta0 = fit.params.intercept;
    } else {
      const auto& pi = std::get<ConstantWeights>(fit.params.weights).pi;
      r.beta0 = pi.dot(fit.params.zeta);
    }
  }
  if (score && fit.converged) r.score = standardized_gradient(likelihood_model(f, fit, spec));
  return r;
}

inline ModelSpec study_spec(const ScenarioConfig& c, Treatment t) {
  ModelSpec s;
  s.family = c.family;
  s.link = c.link();
  s.treatment = t;
  s.k_rule = KRule::lik_threshold;
  s.k_max = c.k_max;
  s.n_starts = c.n_starts;
  s.max_iter = c.max_iter;
  s.em_tol = c.em_tol;
  s.seed = c.seed;
  s.quadrature_nodes = c.quadrature_nodes;
  return s;
}

inline ReplicateRecord run_replicate(const ScenarioConfig& c, const std::vector<Estimator>& est, int b) {
  const Sample smp = generate_sample(c, b);
  ReplicateRecord rec;
  rec.index = b;
  rec.beta0 = smp.beta0;
  rec.beta1 = smp.beta1;
  rec.rho = smp.rho;
  std::vector<Treatment> treatments;
  for (const auto& e : est)
    if (std::find(treatments.begin(), treatments.end(), e.treatment) == treatments.end())
      treatments.push_back(e.treatment);
  for (Treatment t : treatments) {
    ModelSpec spec = study_spec(c, t);
    spec.seed = c.seed ^ (0x9e3779b97f4a7c15ULL * static_cast<std::uint64_t>(b + 1));
    std::vector<Estimator> mine;
    for (const auto& e : est)
      if (e.treatment == t) mine.push_back(e);
    try {
      if (t == Treatment::FE) {
        const FeFit fe = c.family == Family::gaussian ? fe_gaussian_fit(smp.data) : fe_probit_fit(smp.data, c.link());
        EstimateRecord r;
        r.ok = true;
        r.converged = fe.converged;
        r.beta1 = fe.beta(0);
        r.loglik = fe.loglik;
        rec.estimates[mine[0]] = r;
        continue;
      }
      const ModelFrame f = make_frame(smp.data, spec);
      if (t == Treatment::PAR || t == Treatment::PARQP) {
        rec.estimates[mine[0]] = record_fit(agh_fit(f, spec), f, spec, c.score_check);
        continue;
      }
      const KPath path = fit_k_path(f, spec, false);
      std::map<int, EstimateRecord> by_k;
      for (const auto& e : mine) {
        const int K = e.criterion == KRule::lik_threshold ? path.selected_lik
                      : e.criterion == KRule::aic        ? path.selected_aic
                                                         : path.selected_bic;
        if (!by_k.count(K)) by_k[K] = record_fit(path.fits[K - 1], f, spec, c.score_check);
        rec.estimates[e] = by_k[K];
      }
    } catch (const Error& ex) {
      for (const auto& e : mine) {
        EstimateRecord r;
        r.message = ex.what();
        rec.estimates[e] = r;
      }
    }
  }
  return rec;
}

}  // namespace detail

/// Runs B replicates over the estimators, replicates spread over `threads`
/// workers, and aggregates bias / ASE / sd of the slope (and of the
/// intercept for FM and PAR). Replicates where an estimator failed or did
/// not converge are left out of that estimator's rows.
inline StudyResult run_study(const ScenarioConfig& c, std::vector<Estimator> estimators, int threads = worker_count()) {
  validate(c);
  if (estimators.empty()) throw SpecError("run_study: empty estimator list");
  std::sort(estimators.begin(), estimators.end());
  estimators.erase(std::unique(estimators.begin(), estimators.end()), estimators.end());
  StudyResult out;
  out.config = c;
  out.estimators = estimators;
  out.replicates.resize(static_cast<std::size_t>(c.B));
  parallel_for(c.B, threads, [&](int b) { out.replicates[b] = detail::run_replicate(c, estimators, b); });
  for (const auto& e : estimators) {
    std::vector<double> e1, e0;
    int failed = 0;
    for (const auto& rep : out.replicates) {
      const auto& r = rep.estimates.at(e);
      if (!r.ok || !r.converged) {
        ++failed;
        continue;
      }
      e1.push_back(r.beta1 - rep.beta1);
      if (std::isfinite(r.beta0)) e0.push_back(r.beta0 - rep.beta0);
    }
    out.rows.push_back(summarize(e, "beta1", e1));
    if (!e0.empty()) out.rows.push_back(summarize(e, "beta0", e0));
    if (failed > 0.2 * c.B)
      out.warnings.push_back(e.label() + ": " + std::to_string(failed) + " of " + std::to_string(c.B) +
                             " replicates failed or did not converge");
  }
  return out;
}

}  // namespace mixpanel
