#pragma once

#include "mixpanel/decomp.hpp"
#include "mixpanel/em.hpp"
#include "mixpanel/model.hpp"
#include "mixpanel/optim.hpp"

#include <boost/math/distributions/normal.hpp>

namespace mixpanel {

// ---------------------------------------------------------------------------
// Gauss-Hermite quadrature
// ---------------------------------------------------------------------------

/// Nodes and weights for expectations under N(0, 1): E g(Z) ~ sum_q w_q g(z_q).
struct QuadratureRule {
  VectorXd nodes;
  VectorXd weights;
};

/// Golub-Welsch on the Jacobi matrix of the probabilists' Hermite
/// polynomials (zero diagonal, off-diagonal sqrt(k)).
inline QuadratureRule gauss_hermite(int Q) {
  if (Q < 1) throw SpecError("gauss_hermite: Q must be >= 1");
  MatrixXd J = MatrixXd::Zero(Q, Q);
  for (int k = 1; k < Q; ++k) J(k, k - 1) = J(k - 1, k) = std::sqrt(static_cast<double>(k));
  Eigen::SelfAdjointEigenSolver<MatrixXd> es(J);
  QuadratureRule r;
  r.nodes = es.eigenvalues();
  r.weights = es.eigenvectors().row(0).transpose().array().square();
  r.weights /= r.weights.sum();
  // exact symmetry
  for (int a = 0, b = Q - 1; a < b; ++a, --b) {
    const double z = 0.5 * (r.nodes(b) - r.nodes(a));
    const double w = 0.5 * (r.weights(a) + r.weights(b));
    r.nodes(a) = -z;
    r.nodes(b) = z;
    r.weights(a) = r.weights(b) = w;
  }
  if (Q % 2 == 1) r.nodes(Q / 2) = 0.0;
  return r;
}

// ---------------------------------------------------------------------------
// Parametric random intercept by adaptive quadrature
// ---------------------------------------------------------------------------

/// Marginal likelihood of y_it | u_i ~ f(. | intercept + x_it'beta + sigma_u u_i),
/// u_i ~ N(0, 1), as a function of the unconstrained vector
/// theta = (intercept, beta, log sigma_u[, log sigma_e]).
///
/// Each unit's integral is recentred at the mode of its integrand with the
/// Laplace scale, recomputed at every evaluation so that the approximation
/// is a smooth function of theta.
class AghLikelihood {
 public:
  AghLikelihood(PanelDataset panel, FamilyLink fl, int nodes)
      : panel_(std::move(panel)), fl_(fl), rule_(gauss_hermite(nodes)) {
    log_phi_.resize(rule_.nodes.size());
    for (Index q = 0; q < rule_.nodes.size(); ++q) log_phi_(q) = norm_logpdf(rule_.nodes(q));
  }

  Index dim() const { return panel_.n_covariates() + 2 + (gaussian() ? 1 : 0); }
  bool gaussian() const { return fl_.family == Family::gaussian; }
  const PanelDataset& panel() const { return panel_; }
  const FamilyLink& family_link() const { return fl_; }

  VectorXd unit_loglik(const VectorXd& theta) const {
    const Index p = panel_.n_covariates();
    VectorXd eta = panel_.X() * theta.segment(1, p);
    eta.array() += theta(0);
    const double su = std::exp(theta(p + 1));
    const double se = gaussian() ? std::exp(theta(p + 2)) : 1.0;
    VectorXd out(panel_.n_units());
    for (Index i = 0; i < panel_.n_units(); ++i) out(i) = unit_integral(i, eta, su, se);
    return out;
  }

  double loglik(const VectorXd& theta) const {
    const VectorXd l = unit_loglik(theta);
    double s = 0.0, c = 0.0;
    for (Index i = 0; i < l.size(); ++i) {
      const double y = l(i) - c;
      const double t = s + y;
      c = (t - s) - y;
      s = t;
    }
    return s;
  }

 private:
  // g(u) = sum_t log f(y_t | eta_t + su u) + log phi(u), with derivatives
  double integrand(Index b, Index T, const VectorXd& eta, double su, double se, double u, double* d1,
                   double* d2) const {
    double v = norm_logpdf(u), g1 = -u, g2 = -1.0;
    for (Index j = b; j < b + T; ++j) {
      const LogDensity ld = fl_.eval(panel_.y()(j), eta(j) + su * u, se);
      v += ld.value;
      g1 += su * ld.d1;
      g2 += su * su * ld.d2;
    }
    if (d1) *d1 = g1;
    if (d2) *d2 = g2;
    return v;
  }

  double unit_integral(Index i, const VectorXd& eta, double su, double se) const {
    const Index b = panel_.unit_begin(i), T = panel_.unit_size(i);
    double u = 0.0, g1, g2;
    double g = integrand(b, T, eta, su, se, u, &g1, &g2);
    for (int it = 0; it < 100; ++it) {
      const double step = -g1 / g2;  // g2 <= -1
      double t = 1.0, un = u + step, gn1, gn2;
      double gn = integrand(b, T, eta, su, se, un, &gn1, &gn2);
      for (int h = 0; h < 30 && !(gn >= g - 1e-14 * std::abs(g)); ++h) {
        t *= 0.5;
        un = u + t * step;
        gn = integrand(b, T, eta, su, se, un, &gn1, &gn2);
      }
      const double moved = std::abs(un - u);
      u = un;
      g = gn;
      g1 = gn1;
      g2 = gn2;
      if (moved < 1e-12 * (1.0 + std::abs(u))) break;
    }
    const double s = 1.0 / std::sqrt(-g2);
    const Index Q = rule_.nodes.size();
    double mx = -std::numeric_limits<double>::infinity();
    std::vector<double> terms(static_cast<std::size_t>(Q));
    for (Index q = 0; q < Q; ++q) {
      const double z = rule_.nodes(q);
      terms[q] = std::log(rule_.weights(q)) + integrand(b, T, eta, su, se, u + s * z, nullptr, nullptr) - log_phi_(q);
      mx = std::max(mx, terms[q]);
    }
    double acc = 0.0;
    for (double t : terms) acc += std::exp(t - mx);
    return std::log(s) + mx + std::log(acc);
  }

  PanelDataset panel_;
  FamilyLink fl_;
  QuadratureRule rule_;
  VectorXd log_phi_;
};

namespace detail {

/// Starting values: pooled GLM with a variance split (gaussian) or a
/// probit-scale inflation for sigma_u = 1 (bernoulli).
inline VectorXd agh_start(const ModelFrame& f) {
  const Baseline b = fit_baseline(f);
  const Index p = f.p();
  VectorXd th(p + 2 + (f.gaussian() ? 1 : 0));
  if (f.gaussian()) {
    const double tot = b.sigma * b.sigma;
    double Tbar = static_cast<double>(f.panel.n_obs()) / static_cast<double>(f.n());
    const double between = b.scale * b.scale;
    double se2 = std::max((tot - between) * Tbar / std::max(Tbar - 1.0, 1.0), 0.05 * tot);
    double su2 = std::max(between - se2 / Tbar, 0.05 * tot);
    th(0) = b.intercept;
    th.segment(1, p) = b.beta;
    th(p + 1) = 0.5 * std::log(su2);
    th(p + 2) = 0.5 * std::log(se2);
  } else {
    const double k = std::sqrt(2.0);
    th(0) = k * b.intercept;
    th.segment(1, p) = k * b.beta;
    th(p + 1) = 0.0;
  }
  return th;
}

}  // namespace detail

/// Natural-scale parameters from the unconstrained AGH vector.
inline void agh_unpack(const VectorXd& th, Index p, bool gaussian, FitResult& r) {
  r.params.intercept = th(0);
  r.params.beta = th.segment(1, p);
  r.params.zeta = VectorXd::Zero(1);
  r.params.weights = ConstantWeights{VectorXd::Ones(1)};
  r.sigma_u = std::exp(th(p + 1));
  r.params.sigma_e = gaussian ? std::exp(th(p + 2)) : std::numeric_limits<double>::quiet_NaN();
}

inline VectorXd agh_pack(const FitResult& r) {
  const Index p = r.params.beta.size();
  const bool gaussian = std::isfinite(r.params.sigma_e);
  VectorXd th(p + 2 + (gaussian ? 1 : 0));
  th(0) = r.params.intercept;
  th.segment(1, p) = r.params.beta;
  th(p + 1) = std::log(r.sigma_u);
  if (gaussian) th(p + 2) = std::log(r.params.sigma_e);
  return th;
}

/// Gaussian random-intercept model (PAR) or the same on the within/between
/// design (PARQP), fitted by BFGS on the adaptive-quadrature likelihood.
inline FitResult agh_fit(const ModelFrame& f, const ModelSpec& spec) {
  if (f.treatment != Treatment::PAR && f.treatment != Treatment::PARQP)
    throw SpecError("agh_fit: treatment must be PAR or PARQP");
  AghLikelihood lik(f.panel, f.fl, spec.quadrature_nodes);
  const VectorXd th0 = detail::agh_start(f);
  OptimOptions opt;
  opt.grad_tol = 1e-6;
  opt.max_iter = 300;
  OptimResult o = maximize_bfgs([&](const VectorXd& t) { return lik.loglik(t); }, th0, opt);
  FitResult r;
  r.treatment = f.treatment;
  agh_unpack(o.x, f.p(), f.gaussian(), r);
  r.loglik = o.value;
  r.converged = o.converged;
  r.iterations = o.iterations;
  r.loglik_history = {o.value};
  r.tau = MatrixXd::Ones(f.n(), 1);
  r.npar = static_cast<int>(lik.dim());
  r.aic = aic_value(r.loglik, r.npar);
  r.bic = bic_value(r.loglik, r.npar, f.n());
  r.n_units = f.n();
  r.term_names = f.panel.covariate_names();
  const double scale = f.gaussian() ? r.params.sigma_e : 1.0;
  if (r.sigma_u < 1e-4 * scale) r.flag("boundary_sigma_u");
  if (!o.converged) r.flag("not_converged: gradient " + std::to_string(o.gradient_norm));
  return r;
}

inline FitResult agh_fit(const PanelDataset& data, const ModelSpec& spec) {
  validate(data, spec);
  return agh_fit(make_frame(data, spec), spec);
}

// ---------------------------------------------------------------------------
// Fixed effects
// ---------------------------------------------------------------------------

struct FeFit {
  VectorXd beta;  // time-varying columns only
  std::vector<std::string> names;
  VectorXd se;         // model-based
  VectorXd se_robust;  // clustered by unit
  double sigma_e = std::numeric_limits<double>::quiet_NaN();
  double loglik = 0.0;
  std::vector<double> loglik_history;
  Index dropped_units = 0;
  Index used_units = 0;
  int iterations = 0;
  bool converged = false;
  std::vector<std::string> flags;
};

namespace detail {

inline std::pair<MatrixXd, std::vector<std::string>> time_varying_design(const PanelDataset& data) {
  const auto tv = time_varying_indices(data);
  if (tv.empty()) throw DataError("fixed effects: no time-varying covariate, no within effect is estimable");
  MatrixXd X(data.n_obs(), static_cast<Index>(tv.size()));
  std::vector<std::string> names;
  for (std::size_t a = 0; a < tv.size(); ++a) {
    X.col(static_cast<Index>(a)) = data.X().col(tv[a]);
    names.push_back(data.covariate_names()[tv[a]]);
  }
  return {X, names};
}

}  // namespace detail

/// OLS of demeaned y on demeaned time-varying covariates.
inline FeFit fe_gaussian_fit(const PanelDataset& data) {
  auto [X, names] = detail::time_varying_design(data);
  const Index N = data.n_obs(), n = data.n_units(), p = X.cols();
  VectorXd y = data.y();
  for (Index i = 0; i < n; ++i) {
    const Index b = data.unit_begin(i), T = data.unit_size(i);
    y.segment(b, T).array() -= y.segment(b, T).mean();
    for (Index c = 0; c < p; ++c) X.col(c).segment(b, T).array() -= X.col(c).segment(b, T).mean();
  }
  Eigen::ColPivHouseholderQR<MatrixXd> qr(X);
  qr.setThreshold(1e-10);
  if (qr.rank() < p) {
    auto cols = detail::collinear_columns(X, names);
    throw SingularError("fe_gaussian_fit: demeaned design is rank deficient (" + detail::join(cols) + ")", cols);
  }
  FeFit r;
  r.names = names;
  r.beta = qr.solve(y);
  const VectorXd res = y - X * r.beta;
  const double dof = static_cast<double>(N - n - p);
  r.sigma_e = std::sqrt(res.squaredNorm() / std::max(dof, 1.0));
  const MatrixXd XtXi = (X.transpose() * X).inverse();
  r.se = (r.sigma_e * r.sigma_e * XtXi.diagonal()).array().sqrt();
  MatrixXd meat = MatrixXd::Zero(p, p);
  for (Index i = 0; i < n; ++i) {
    const Index b = data.unit_begin(i), T = data.unit_size(i);
    const VectorXd s = X.middleRows(b, T).transpose() * res.segment(b, T);
    meat += s * s.transpose();
  }
  r.se_robust = (XtXi * meat * XtXi).diagonal().array().sqrt();
  const double s2ml = res.squaredNorm() / static_cast<double>(N);
  r.loglik = -0.5 * static_cast<double>(N) * (std::log(2.0 * std::numbers::pi * s2ml) + 1.0);
  r.loglik_history = {r.loglik};
  r.used_units = n;
  r.converged = true;
  r.iterations = 1;
  return r;
}

/// Probit (or logit) with one intercept per unit. Units whose responses are
/// all 0 or all 1 are dropped. Newton on (beta, alpha) with the unit
/// intercepts eliminated through their diagonal block, plus step halving.
inline FeFit fe_probit_fit(const PanelDataset& data, Link link = Link::probit) {
  const FamilyLink fl(Family::bernoulli, link);
  std::vector<Index> keep;
  for (Index i = 0; i < data.n_units(); ++i) {
    const auto ys = data.y().segment(data.unit_begin(i), data.unit_size(i));
    const double s = ys.sum();
    if (s > 0.0 && s < static_cast<double>(ys.size())) keep.push_back(i);
  }
  FeFit r;
  r.dropped_units = data.n_units() - static_cast<Index>(keep.size());
  if (keep.empty()) throw EstimationError("fe_probit_fit: every unit has a constant response");
  const PanelDataset d = data.subset_units(keep);
  auto [X, names] = detail::time_varying_design(d);
  r.names = names;
  r.used_units = d.n_units();
  const Index n = d.n_units(), p = X.cols();
  const VectorXd& y = d.y();

  VectorXd beta = VectorXd::Zero(p), alpha(n);
  const boost::math::normal_distribution<double> N01;
  for (Index i = 0; i < n; ++i) {
    const double m = std::clamp(y.segment(d.unit_begin(i), d.unit_size(i)).mean(), 0.05, 0.95);
    alpha(i) = link == Link::probit ? boost::math::quantile(N01, m) : std::log(m / (1.0 - m));
  }

  auto loglik = [&](const VectorXd& b, const VectorXd& a) {
    const VectorXd xb = X * b;
    double s = 0.0;
    for (Index i = 0; i < n; ++i)
      for (Index j = d.unit_begin(i); j < d.unit_begin(i) + d.unit_size(i); ++j) s += fl.eval(y(j), xb(j) + a(i)).value;
    return s;
  };

  double ll = loglik(beta, alpha);
  r.loglik_history.push_back(ll);
  VectorXd ga(n), haa(n), gb(p);
  MatrixXd hab(p, n), hbb(p, p);
  for (int it = 0; it < 100; ++it) {
    const VectorXd xb = X * beta;
    ga.setZero();
    haa.setZero();
    gb.setZero();
    hab.setZero();
    hbb.setZero();
    for (Index i = 0; i < n; ++i)
      for (Index j = d.unit_begin(i); j < d.unit_begin(i) + d.unit_size(i); ++j) {
        const LogDensity ld = fl.eval(y(j), xb(j) + alpha(i));
        ga(i) += ld.d1;
        haa(i) += ld.d2;
        gb.noalias() += ld.d1 * X.row(j).transpose();
        hab.col(i).noalias() += ld.d2 * X.row(j).transpose();
        hbb.noalias() += ld.d2 * X.row(j).transpose() * X.row(j);
      }
    const double gnorm = std::max(ga.cwiseAbs().maxCoeff(), gb.cwiseAbs().maxCoeff());
    r.iterations = it;
    if (gnorm <= 1e-8) {
      r.converged = true;
      break;
    }
    for (Index i = 0; i < n; ++i) haa(i) = std::min(haa(i), -1e-12);
    // Schur complement of the diagonal alpha block
    MatrixXd S = hbb;
    VectorXd rhs = gb;
    for (Index i = 0; i < n; ++i) {
      S.noalias() -= hab.col(i) * hab.col(i).transpose() / haa(i);
      rhs.noalias() -= hab.col(i) * (ga(i) / haa(i));
    }
    const VectorXd db = (-S).ldlt().solve(rhs);
    VectorXd da(n);
    for (Index i = 0; i < n; ++i) da(i) = -(ga(i) + hab.col(i).dot(db)) / haa(i);
    // near the optimum the predicted gain drops below the rounding noise of
    // the objective; Newton is then taken unguarded, where it is quadratic
    const double predicted = 0.5 * (gb.dot(db) + ga.dot(da));
    if (!(predicted > 1e-30)) {
      r.converged = gnorm <= 1e-6;
      break;
    }
    if (predicted < 1e-12 * (1.0 + std::abs(ll))) {
      beta += db;
      alpha += da;
      ll = loglik(beta, alpha);
      r.loglik_history.push_back(ll);
      continue;
    }
    bool accepted = false;
    double t = 1.0;
    for (int h = 0; h < 40; ++h, t *= 0.5) {
      const VectorXd nb = beta + t * db, na = alpha + t * da;
      const double nl = loglik(nb, na);
      if (nl >= ll) {
        beta = nb;
        alpha = na;
        accepted = true;
        ll = nl;
        break;
      }
    }
    r.loglik_history.push_back(ll);
    if (!accepted) {
      r.converged = gnorm <= 1e-6;
      break;
    }
  }
  r.beta = beta;
  r.loglik = ll;

  // information for beta with the unit intercepts profiled out
  const VectorXd xb = X * beta;
  MatrixXd S = MatrixXd::Zero(p, p), meat = MatrixXd::Zero(p, p);
  for (Index i = 0; i < n; ++i) {
    double a2 = 0.0;
    VectorXd c = VectorXd::Zero(p), xs(p);
    for (Index j = d.unit_begin(i); j < d.unit_begin(i) + d.unit_size(i); ++j) {
      const LogDensity ld = fl.eval(y(j), xb(j) + alpha(i));
      a2 += ld.d2;
      c.noalias() += ld.d2 * X.row(j).transpose();
      S.noalias() -= ld.d2 * X.row(j).transpose() * X.row(j);
    }
    a2 = std::min(a2, -1e-12);
    S.noalias() += c * c.transpose() / a2;
    xs = c / a2;  // d2-weighted unit mean of x
    VectorXd si = VectorXd::Zero(p);
    for (Index j = d.unit_begin(i); j < d.unit_begin(i) + d.unit_size(i); ++j)
      si.noalias() += fl.eval(y(j), xb(j) + alpha(i)).d1 * (X.row(j).transpose() - xs);
    meat += si * si.transpose();
  }
  const MatrixXd Si = S.ldlt().solve(MatrixXd::Identity(p, p));
  r.se = Si.diagonal().array().sqrt();
  r.se_robust = (Si * meat * Si).diagonal().array().sqrt();
  const double big = std::max(beta.cwiseAbs().maxCoeff(), alpha.cwiseAbs().maxCoeff());
  if (big > 30.0) r.flags.push_back("separation");
  if (!r.converged) r.flags.push_back("not_converged");
  if (r.dropped_units > 0) r.flags.push_back("dropped_units: " + std::to_string(r.dropped_units));
  return r;
}

}  // namespace mixpanel
