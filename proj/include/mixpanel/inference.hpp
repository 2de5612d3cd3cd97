#pragma once

#include "mixpanel/comparators.hpp"
#include "mixpanel/decomp.hpp"
#include "mixpanel/em.hpp"
#include "mixpanel/model.hpp"
#include "mixpanel/optim.hpp"

#include <boost/math/distributions/chi_squared.hpp>

#include <memory>

namespace mixpanel {

/// sum_i log sum_k pi_ik prod_t f(y_it | ., zeta_k), evaluated directly from
/// the component log-likelihoods with per-unit max subtraction and a
/// compensated sum over units.
inline double marginal_loglik(const ModelFrame& f, const MixtureParams& m) {
  const MatrixXd A = component_loglik(f, m) + log_priors(f, m);
  double s = 0.0, c = 0.0;
  for (Index i = 0; i < A.rows(); ++i) {
    const double mx = A.row(i).maxCoeff();
    const double li = mx + std::log((A.row(i).array() - mx).exp().sum());
    const double y = li - c;
    const double t = s + y;
    c = (t - s) - y;
    s = t;
  }
  return s;
}

/// MAP component per row (1-based); ties go to the lower index.
inline std::vector<int> classify(const MatrixXd& tau) {
  std::vector<int> out(static_cast<std::size_t>(tau.rows()));
  for (Index i = 0; i < tau.rows(); ++i) {
    Index best = 0;
    for (Index k = 1; k < tau.cols(); ++k)
      if (tau(i, k) > tau(i, best)) best = k;
    out[i] = static_cast<int>(best) + 1;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Likelihood on an unconstrained scale
// ---------------------------------------------------------------------------

/// A fitted model seen as per-unit log-likelihood contributions of an
/// unconstrained vector theta, plus the map to the reported parameters.
struct LikelihoodModel {
  VectorXd theta;
  std::function<VectorXd(const VectorXd&)> unit_loglik;
  std::function<VectorXd(const VectorXd&)> natural;
  std::vector<std::string> names;  // one per entry of natural(theta)
  Index n_units = 0;

  double loglik(const VectorXd& th) const {
    const VectorXd l = unit_loglik(th);
    double s = 0.0, c = 0.0;
    for (Index i = 0; i < l.size(); ++i) {
      const double y = l(i) - c;
      const double t = s + y;
      c = (t - s) - y;
      s = t;
    }
    return s;
  }
};

namespace detail {

inline MixtureParams unpack_mixture(const VectorXd& th, const MixtureParams& shape, Index p, Index q, bool gaussian) {
  MixtureParams m = shape;
  const Index K = shape.n_components();
  Index r = 0;
  if (K == 1) {
    m.intercept = th(r++);
    m.beta = th.segment(r, p);
    r += p;
    m.zeta = VectorXd::Zero(1);
  } else {
    m.intercept = 0.0;
    m.beta = th.segment(r, p);
    r += p;
    m.zeta = th.segment(r, K);
    r += K;
    if (shape.logistic()) {
      MatrixXd g(K - 1, q + 1);
      for (Index k = 0; k + 1 < K; ++k)
        for (Index l = 0; l <= q; ++l) g(k, l) = th(r++);
      m.weights = LogisticWeights{g};
    } else {
      VectorXd lp(K);
      for (Index k = 0; k + 1 < K; ++k) lp(k) = th(r++);
      lp(K - 1) = 0.0;
      const double mx = lp.maxCoeff();
      VectorXd pi = (lp.array() - mx).exp();
      m.weights = ConstantWeights{pi / pi.sum()};
    }
  }
  if (gaussian) m.sigma_e = std::exp(th(r++));
  return m;
}

}  // namespace detail

/// Mixture fits: theta = (beta, zeta, log(pi_k / pi_K) or gamma, log sigma_e);
/// reported as (beta, zeta, pi_1..pi_{K-1} or gamma, sigma_e). K = 1 uses
/// (intercept, beta, log sigma_e).
inline LikelihoodModel mixture_model(const ModelFrame& f, const FitResult& fit) {
  const MixtureParams shape = fit.params;
  const Index K = shape.n_components(), p = f.p(), q = f.q();
  const bool gauss = f.gaussian();
  LikelihoodModel lm;
  lm.n_units = f.n();
  std::vector<double> th;
  const auto& terms = f.panel.covariate_names();
  if (K == 1) {
    th.push_back(shape.intercept);
    lm.names.push_back("(Intercept)");
  }
  for (Index j = 0; j < p; ++j) {
    th.push_back(shape.beta(j));
    lm.names.push_back(terms[j]);
  }
  if (K > 1) {
    for (Index k = 0; k < K; ++k) {
      th.push_back(shape.zeta(k));
      lm.names.push_back("location:" + std::to_string(k + 1));
    }
    if (const auto* lw = std::get_if<LogisticWeights>(&shape.weights)) {
      for (Index k = 0; k + 1 < K; ++k)
        for (Index l = 0; l <= q; ++l) {
          th.push_back(lw->gamma(k, l));
          lm.names.push_back("prior:" + std::to_string(k + 1) + ":" +
                             (l == 0 ? std::string("(Intercept)") : f.weight_names[l - 1]));
        }
    } else {
      const auto& pi = std::get<ConstantWeights>(shape.weights).pi;
      for (Index k = 0; k + 1 < K; ++k) {
        th.push_back(std::log(pi(k) / pi(K - 1)));
        lm.names.push_back("mass:" + std::to_string(k + 1));
      }
    }
  }
  if (gauss) {
    th.push_back(std::log(shape.sigma_e));
    lm.names.push_back("sigma_e");
  }
  lm.theta = Eigen::Map<VectorXd>(th.data(), static_cast<Index>(th.size()));
  lm.unit_loglik = [f, shape, p, q, gauss](const VectorXd& t) {
    return e_step(f, detail::unpack_mixture(t, shape, p, q, gauss)).unit_loglik;
  };
  lm.natural = [shape, p, q, gauss, K](const VectorXd& t) {
    VectorXd out = t;
    if (K > 1 && !shape.logistic()) {
      const MixtureParams m = detail::unpack_mixture(t, shape, p, q, gauss);
      const auto& pi = std::get<ConstantWeights>(m.weights).pi;
      out.segment(p + K, K - 1) = pi.head(K - 1);
    }
    if (gauss) out(out.size() - 1) = std::exp(t(t.size() - 1));
    return out;
  };
  return lm;
}

/// PAR / PARQP fits: theta = (intercept, beta, log sigma_u[, log sigma_e]).
inline LikelihoodModel agh_model(const ModelFrame& f, const FitResult& fit, int nodes) {
  auto lik = std::make_shared<AghLikelihood>(f.panel, f.fl, nodes);
  LikelihoodModel lm;
  lm.n_units = f.n();
  lm.theta = agh_pack(fit);
  lm.names.push_back("(Intercept)");
  for (const auto& s : f.panel.covariate_names()) lm.names.push_back(s);
  lm.names.push_back("sigma_u");
  if (f.gaussian()) lm.names.push_back("sigma_e");
  const Index p = f.p();
  lm.unit_loglik = [lik](const VectorXd& t) { return lik->unit_loglik(t); };
  lm.natural = [p](const VectorXd& t) {
    VectorXd out = t;
    for (Index j = p + 1; j < t.size(); ++j) out(j) = std::exp(t(j));
    return out;
  };
  return lm;
}

inline LikelihoodModel likelihood_model(const ModelFrame& f, const FitResult& fit, const ModelSpec& spec) {
  if (fit.treatment == Treatment::PAR || fit.treatment == Treatment::PARQP)
    return agh_model(f, fit, spec.quadrature_nodes);
  if (fit.treatment == Treatment::FE) throw SpecError("likelihood_model: fixed-effects fits have no marginal likelihood");
  return mixture_model(f, fit);
}

// ---------------------------------------------------------------------------
// Information and standard errors
// ---------------------------------------------------------------------------

/// Negative numerical Hessian of the log-likelihood in theta, steps
/// 1e-4 * max(1, |theta_j|).
inline MatrixXd observed_information(const LikelihoodModel& lm) {
  MatrixXd H = -numeric_hessian([&](const VectorXd& t) { return lm.loglik(t); }, lm.theta, 1e-4);
  return 0.5 * (H + H.transpose());
}

/// n x d matrix of per-unit numerical scores.
inline MatrixXd unit_scores(const LikelihoodModel& lm) { return numeric_jacobian(lm.unit_loglik, lm.theta, 1e-5); }

/// Max-abs numerical gradient of the per-unit average log-likelihood.
inline double standardized_gradient(const LikelihoodModel& lm) {
  const double n = static_cast<double>(lm.n_units);
  const VectorXd g = numeric_gradient([&](const VectorXd& t) { return lm.loglik(t) / n; }, lm.theta, 1e-5);
  return g.cwiseAbs().maxCoeff();
}

/// Throws EstimationError naming the worst coordinate when the standardized
/// gradient exceeds `tol`; returns the max-abs component otherwise.
inline double check_gradient(const LikelihoodModel& lm, double tol = 1e-4) {
  const double n = static_cast<double>(lm.n_units);
  const VectorXd g = numeric_gradient([&](const VectorXd& t) { return lm.loglik(t) / n; }, lm.theta, 1e-5);
  Index j = 0;
  const double worst = g.cwiseAbs().maxCoeff(&j);
  if (!(worst <= tol)) {
    const std::string name = j < static_cast<Index>(lm.names.size()) ? lm.names[j] : std::to_string(j);
    throw EstimationError("gradient check failed: standardized score " + std::to_string(worst) + " for '" + name +
                          "' exceeds " + std::to_string(tol) + "; not at a maximum");
  }
  return worst;
}

namespace detail {

struct Inverse {
  MatrixXd inv;
  double condition = 0.0;
  double min_eigenvalue = 0.0;
};

inline Inverse checked_inverse(const MatrixXd& H, const std::vector<std::string>& names) {
  Eigen::SelfAdjointEigenSolver<MatrixXd> es(H);
  Inverse out;
  const VectorXd ev = es.eigenvalues();
  out.min_eigenvalue = ev.minCoeff();
  const double amax = ev.cwiseAbs().maxCoeff(), amin = ev.cwiseAbs().minCoeff();
  out.condition = amin > 0.0 ? amax / amin : std::numeric_limits<double>::infinity();
  if (!H.allFinite() || !(out.condition < 1e14)) {
    std::vector<std::string> cols;
    if (H.allFinite()) {
      Index k;
      ev.cwiseAbs().minCoeff(&k);
      const VectorXd v = es.eigenvectors().col(k);
      for (Index j = 0; j < v.size(); ++j)
        if (std::abs(v(j)) > 0.1 && j < static_cast<Index>(names.size())) cols.push_back(names[j]);
    }
    throw SingularError("information matrix is singular (condition number " + std::to_string(out.condition) +
                            (cols.empty() ? std::string(")") : "; weakly identified: " + join(cols) + ")"),
                        cols);
  }
  out.inv = es.eigenvectors() * ev.cwiseInverse().asDiagonal() * es.eigenvectors().transpose();
  out.inv = 0.5 * (out.inv + out.inv.transpose());
  return out;
}

}  // namespace detail

/// Sandwich H^-1 J H^-1 on the theta scale.
inline MatrixXd sandwich_vcov(const LikelihoodModel& lm, const MatrixXd& info) {
  const auto inv = detail::checked_inverse(info, lm.names);
  const MatrixXd S = unit_scores(lm);
  const MatrixXd J = S.transpose() * S;
  MatrixXd V = inv.inv * J * inv.inv;
  return 0.5 * (V + V.transpose());
}

inline MatrixXd sandwich_vcov(const LikelihoodModel& lm) { return sandwich_vcov(lm, observed_information(lm)); }

struct SEReport {
  std::vector<std::string> names;
  VectorXd estimate;
  VectorXd se_observed;
  VectorXd se_sandwich;
  MatrixXd vcov_observed;  // reported scale
  MatrixXd vcov_sandwich;
  MatrixXd information;    // theta scale
  double condition_number = 0.0;
  double min_eigenvalue = 0.0;
  bool reliable = true;
  std::vector<std::string> flags;
};

/// Observed-information and sandwich standard errors, delta-mapped from the
/// unconstrained scale to the reported parameters.
inline SEReport standard_errors(const LikelihoodModel& lm) {
  SEReport r;
  r.names = lm.names;
  r.estimate = lm.natural(lm.theta);
  r.information = observed_information(lm);
  const auto inv = detail::checked_inverse(r.information, lm.names);
  r.condition_number = inv.condition;
  r.min_eigenvalue = inv.min_eigenvalue;
  if (inv.min_eigenvalue <= 0.0) {
    r.reliable = false;
    r.flags.push_back("observed information not positive definite (smallest eigenvalue " +
                      std::to_string(inv.min_eigenvalue) + "); standard errors unreliable");
  }
  const MatrixXd S = unit_scores(lm);
  MatrixXd Vs = inv.inv * (S.transpose() * S) * inv.inv;
  Vs = 0.5 * (Vs + Vs.transpose());
  const MatrixXd D = numeric_jacobian(lm.natural, lm.theta, 1e-6);
  r.vcov_observed = D * inv.inv * D.transpose();
  r.vcov_sandwich = D * Vs * D.transpose();
  r.vcov_observed = 0.5 * (r.vcov_observed + r.vcov_observed.transpose());
  r.vcov_sandwich = 0.5 * (r.vcov_sandwich + r.vcov_sandwich.transpose());
  auto se = [](const MatrixXd& V) {
    VectorXd s(V.rows());
    for (Index j = 0; j < V.rows(); ++j) s(j) = V(j, j) >= 0.0 ? std::sqrt(V(j, j)) : std::numeric_limits<double>::quiet_NaN();
    return s;
  };
  r.se_observed = se(r.vcov_observed);
  r.se_sandwich = se(r.vcov_sandwich);
  return r;
}

/// Two-sided normal p-value of estimate / se.
inline double wald_pvalue(double estimate, double se) {
  if (!(se > 0.0)) return std::numeric_limits<double>::quiet_NaN();
  return std::erfc(std::abs(estimate / se) / std::numbers::sqrt2);
}

/// "**" for p <= 0.05, "*" for 0.05 < p <= 0.10, blank otherwise.
inline std::string significance_label(double p) {
  if (!std::isfinite(p)) return "";
  if (p <= 0.05) return "**";
  if (p <= 0.10) return "*";
  return "";
}

// ---------------------------------------------------------------------------
// Mundlak exogeneity test
// ---------------------------------------------------------------------------

struct WaldTest {
  double statistic = 0.0;
  int df = 0;
  double pvalue = 1.0;
  VectorXd delta;
  MatrixXd vcov;
  std::vector<std::string> names;
  FitResult fit;
};

/// Fits the parametric random intercept on the design augmented with unit
/// means of the time-varying covariates and tests that every mean
/// coefficient is zero with a sandwich-based Wald statistic.
inline WaldTest mundlak_exogeneity_test(const PanelDataset& data, const ModelSpec& spec) {
  ModelSpec s = spec;
  s.treatment = Treatment::PAR;
  validate(data, s);
  MundlakPanel mp = mundlak_augment(data);
  if (mp.mean_columns.empty()) throw DataError("exogeneity test: no time-varying covariate");
  ModelFrame f = make_frame(mp.panel, s);
  WaldTest w;
  w.fit = agh_fit(f, s);
  const LikelihoodModel lm = agh_model(f, w.fit, s.quadrature_nodes);
  const MatrixXd V = sandwich_vcov(lm);
  const Index m = static_cast<Index>(mp.mean_columns.size());
  w.delta.resize(m);
  w.vcov.resize(m, m);
  for (Index a = 0; a < m; ++a) {
    const Index ia = 1 + mp.mean_columns[a];
    w.delta(a) = lm.theta(ia);
    w.names.push_back(lm.names[ia]);
    for (Index b = 0; b < m; ++b) w.vcov(a, b) = V(ia, 1 + mp.mean_columns[b]);
  }
  w.statistic = w.delta.dot(w.vcov.ldlt().solve(w.delta));
  w.df = static_cast<int>(m);
  const boost::math::chi_squared_distribution<double> chi(static_cast<double>(m));
  w.pvalue = boost::math::cdf(boost::math::complement(chi, std::max(w.statistic, 0.0)));
  return w;
}

}  // namespace mixpanel
