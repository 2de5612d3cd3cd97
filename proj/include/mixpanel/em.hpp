#pragma once

#include "mixpanel/core.hpp"
#include "mixpanel/families.hpp"
#include "mixpanel/model.hpp"

#include <numeric>
#include <random>

namespace mixpanel {

// ---------------------------------------------------------------------------
// M-steps
// ---------------------------------------------------------------------------

struct LocationStep {
  VectorXd beta;
  VectorXd zeta;
  bool collapsed = false;  // some component has sum_i tau_ik < 1e-10
  int empty_component = -1;
  int iterations = 0;
};

inline constexpr double kCollapseMass = 1e-10;

namespace detail {

inline int empty_component(const MatrixXd& tau) {
  const VectorXd mass = tau.colwise().sum().transpose();
  for (Index k = 0; k < mass.size(); ++k)
    if (mass(k) < kCollapseMass) return static_cast<int>(k);
  return -1;
}

/// Q(beta, zeta) = sum_i sum_k tau_ik sum_t log f(y_it | eta_it + zeta_k) with
/// optional gradient and Hessian over (beta, zeta).
inline double location_objective(const ModelFrame& f, const MatrixXd& tau, const VectorXd& beta,
                                 const VectorXd& zeta, VectorXd* grad, MatrixXd* hess) {
  const Index p = f.p(), K = zeta.size(), N = f.panel.n_obs();
  const MatrixXd& X = f.panel.X();
  const VectorXd eta = X * beta;
  const VectorXd& y = f.panel.y();
  const bool want = grad || hess;
  MatrixXd G, D;
  if (want) {
    G.setZero(N, K);
    D.setZero(N, K);
  }
  double Q = 0.0;
  for (Index i = 0; i < f.n(); ++i) {
    const Index b = f.panel.unit_begin(i), T = f.panel.unit_size(i);
    for (Index k = 0; k < K; ++k) {
      const double w = tau(i, k);
      if (w == 0.0) continue;
      for (Index j = b; j < b + T; ++j) {
        const LogDensity ld = f.fl.eval(y(j), eta(j) + zeta(k));
        Q += w * ld.value;
        if (want) {
          G(j, k) = w * ld.d1;
          D(j, k) = w * ld.d2;
        }
      }
    }
  }
  if (grad) {
    grad->resize(p + K);
    const VectorXd g1 = G.rowwise().sum();
    if (p) grad->head(p) = X.transpose() * g1;
    grad->tail(K) = G.colwise().sum().transpose();
  }
  if (hess) {
    hess->setZero(p + K, p + K);
    const VectorXd h1 = D.rowwise().sum();
    if (p) {
      hess->topLeftCorner(p, p) = X.transpose() * h1.asDiagonal() * X;
      hess->topRightCorner(p, K) = X.transpose() * D;
      hess->bottomLeftCorner(K, p) = hess->topRightCorner(p, K).transpose();
    }
    hess->bottomRightCorner(K, K).diagonal() = D.colwise().sum().transpose();
  }
  return Q;
}

}  // namespace detail

/// Joint (beta, zeta) update: a weighted GLM fit on the K-fold expanded data
/// where every observation appears once per component with weight tau_ik and
/// design [x_it | e_k]. Gaussian: exact normal equations. Bernoulli: Newton
/// with step halving from the current values, at most `max_inner` steps,
/// stopping once the Newton decrement falls below decrement_tol * (1 + |Q|).
inline LocationStep m_step_locations_beta(const ModelFrame& f, const MatrixXd& tau, const VectorXd& beta0,
                                          const VectorXd& zeta0, int max_inner = 25, double decrement_tol = 1e-20) {
  const Index p = f.p(), K = tau.cols();
  LocationStep out;
  out.empty_component = detail::empty_component(tau);
  if (out.empty_component >= 0) {
    out.collapsed = true;
    out.beta = beta0;
    out.zeta = zeta0;
    return out;
  }
  const auto& X = f.panel.X();
  const auto& y = f.panel.y();
  if (f.gaussian()) {
    MatrixXd A = MatrixXd::Zero(p + K, p + K);
    VectorXd rhs = VectorXd::Zero(p + K);
    if (p) {
      A.topLeftCorner(p, p) = X.transpose() * X;
      rhs.head(p) = X.transpose() * y;
    }
    for (Index i = 0; i < f.n(); ++i) {
      const Index b = f.panel.unit_begin(i), T = f.panel.unit_size(i);
      const double sy = y.segment(b, T).sum();
      VectorXd sx = p ? VectorXd(X.middleRows(b, T).colwise().sum().transpose()) : VectorXd();
      for (Index k = 0; k < K; ++k) {
        const double w = tau(i, k);
        A(p + k, p + k) += w * static_cast<double>(T);
        rhs(p + k) += w * sy;
        if (p) A.block(0, p + k, p, 1) += w * sx;
      }
    }
    A.bottomLeftCorner(K, p) = A.topRightCorner(p, K).transpose();
    Eigen::LDLT<MatrixXd> ldlt(A);
    if (ldlt.info() != Eigen::Success || !ldlt.isPositive() ||
        ldlt.vectorD().minCoeff() <= 1e-12 * std::max(1.0, ldlt.vectorD().maxCoeff())) {
      std::vector<std::string> names = f.panel.covariate_names();
      for (Index k = 0; k < K; ++k) names.push_back("component " + std::to_string(k + 1));
      auto cols = detail::collinear_columns(A, names);
      throw SingularError("m_step_locations_beta: expanded design is rank deficient (" + detail::join(cols) + ")",
                          cols);
    }
    const VectorXd sol = ldlt.solve(rhs);
    out.beta = sol.head(p);
    out.zeta = sol.tail(K);
    out.iterations = 1;
    return out;
  }

  VectorXd beta = beta0, zeta = zeta0;
  VectorXd g;
  MatrixXd H;
  double Q = detail::location_objective(f, tau, beta, zeta, &g, &H);
  for (int it = 0; it < max_inner; ++it) {
    if (g.cwiseAbs().maxCoeff() <= 1e-10) break;
    MatrixXd A = -H;
    A.diagonal().array() += 1e-10 * (1.0 + A.diagonal().array().abs());
    const VectorXd step = A.ldlt().solve(g);
    if (!step.allFinite()) break;
    if (0.5 * g.dot(step) < decrement_tol * (1.0 + std::abs(Q))) break;
    double t = 1.0;
    bool accepted = false;
    for (int h = 0; h < 40; ++h, t *= 0.5) {
      VectorXd nb = beta + t * step.head(p);
      VectorXd nz = zeta + t * step.tail(K);
      VectorXd ng;
      MatrixXd nH;
      const double nQ = detail::location_objective(f, tau, nb, nz, &ng, &nH);
      if (nQ >= Q) {
        beta = std::move(nb);
        zeta = std::move(nz);
        g = std::move(ng);
        H = std::move(nH);
        const double gain = nQ - Q;
        Q = nQ;
        accepted = true;
        out.iterations = it + 1;
        if (gain < 1e-13 * (1.0 + std::abs(Q)) && t * step.cwiseAbs().maxCoeff() < 1e-10) it = max_inner;
        break;
      }
    }
    if (!accepted) break;
  }
  out.beta = beta;
  out.zeta = zeta;
  return out;
}

/// sigma^2 = sum_i sum_k tau_ik sum_t (y_it - x_it'beta - zeta_k)^2 / N.
/// Returns the unfloored estimate; the caller applies any floor.
inline double m_step_sigma(const ModelFrame& f, const MatrixXd& tau, const VectorXd& beta, const VectorXd& zeta,
                           double intercept = 0.0) {
  if (!f.gaussian()) throw SpecError("m_step_sigma: gaussian family only");
  const VectorXd eta = f.panel.X() * beta;
  const VectorXd& y = f.panel.y();
  double rss = 0.0;
  for (Index i = 0; i < f.n(); ++i) {
    const Index b = f.panel.unit_begin(i), T = f.panel.unit_size(i);
    for (Index k = 0; k < zeta.size(); ++k) {
      const double w = tau(i, k);
      if (w == 0.0) continue;
      double s = 0.0;
      for (Index j = b; j < b + T; ++j) {
        const double r = y(j) - eta(j) - intercept - zeta(k);
        s += r * r;
      }
      rss += w * s;
    }
  }
  const double s2 = rss / static_cast<double>(f.panel.n_obs());
  if (s2 < 1e-10) throw EstimationError("m_step_sigma: degenerate fit, residual variance " + std::to_string(s2));
  return std::sqrt(s2);
}

/// pi_k = (1/n) sum_i tau_ik.
inline VectorXd m_step_weights_constant(const MatrixXd& tau) {
  return tau.colwise().sum().transpose() / static_cast<double>(tau.rows());
}

struct LogitStep {
  MatrixXd gamma;  // (K-1) x (q+1)
  bool converged = false;
  bool ridge = false;  // separation detected, ridge-stabilized refit used
  int iterations = 0;
  double gradient_norm = 0.0;
};

namespace detail {

/// sum_i sum_k tau_ik log pi_k(z_i) - ridge * ||gamma||^2 with gradient and
/// Hessian over vec(gamma) (row-major: component-major).
inline double logit_objective(const MatrixXd& tau, const MatrixXd& Z, const MatrixXd& gamma, double ridge,
                              VectorXd* grad, MatrixXd* hess) {
  const Index n = tau.rows(), K = tau.cols(), q = Z.cols(), d = q + 1, m = (K - 1) * d;
  if (grad) grad->setZero(m);
  if (hess) hess->setZero(m, m);
  VectorXd lp(K), pi(K), zt(d);
  double obj = 0.0;
  for (Index i = 0; i < n; ++i) {
    zt(0) = 1.0;
    for (Index l = 0; l < q; ++l) zt(l + 1) = Z(i, l);
    double mx = 0.0;
    for (Index k = 0; k + 1 < K; ++k) {
      lp(k) = gamma.row(k).dot(zt);
      mx = std::max(mx, lp(k));
    }
    lp(K - 1) = 0.0;
    double s = 0.0;
    for (Index k = 0; k < K; ++k) s += std::exp(lp(k) - mx);
    const double lse = mx + std::log(s);
    for (Index k = 0; k < K; ++k) {
      pi(k) = std::exp(lp(k) - lse);
      if (tau(i, k) > 0.0) obj += tau(i, k) * (lp(k) - lse);
    }
    if (grad)
      for (Index k = 0; k + 1 < K; ++k) grad->segment(k * d, d) += (tau(i, k) - pi(k)) * zt;
    if (hess) {
      const MatrixXd zz = zt * zt.transpose();
      for (Index a = 0; a + 1 < K; ++a)
        for (Index b = 0; b + 1 < K; ++b) {
          const double c = (a == b ? pi(a) : 0.0) - pi(a) * pi(b);
          hess->block(a * d, b * d, d, d) -= c * zz;
        }
    }
  }
  if (ridge > 0.0) {
    for (Index k = 0; k + 1 < K; ++k)
      for (Index l = 0; l < d; ++l) {
        const double v = gamma(k, l);
        obj -= ridge * v * v;
        if (grad) (*grad)(k * d + l) -= 2.0 * ridge * v;
        if (hess) (*hess)(k * d + l, k * d + l) -= 2.0 * ridge;
      }
  }
  return obj;
}

inline LogitStep newton_logit(const MatrixXd& tau, const MatrixXd& Z, MatrixXd gamma, double ridge, int max_iter,
                              double tol) {
  const Index K = tau.cols(), d = Z.cols() + 1;
  LogitStep out;
  VectorXd g;
  MatrixXd H;
  double f = logit_objective(tau, Z, gamma, ridge, &g, &H);
  for (int it = 0; it < max_iter; ++it) {
    out.gradient_norm = g.cwiseAbs().maxCoeff();
    out.iterations = it;
    if (out.gradient_norm <= tol) {
      out.converged = true;
      break;
    }
    MatrixXd A = -H;
    A.diagonal().array() += 1e-10 * (1.0 + A.diagonal().array().abs());
    const VectorXd step = A.ldlt().solve(g);
    if (!step.allFinite()) break;
    double t = 1.0;
    bool accepted = false;
    for (int h = 0; h < 40; ++h, t *= 0.5) {
      MatrixXd ng = gamma;
      for (Index k = 0; k + 1 < K; ++k) ng.row(k) += t * step.segment(k * d, d).transpose();
      VectorXd gg;
      MatrixXd HH;
      const double nf = logit_objective(tau, Z, ng, ridge, &gg, &HH);
      if (nf >= f) {
        gamma = std::move(ng);
        g = std::move(gg);
        H = std::move(HH);
        const bool tiny = nf - f < 1e-15 * (1.0 + std::abs(f)) && t * step.cwiseAbs().maxCoeff() < 1e-12;
        f = nf;
        accepted = true;
        if (tiny) it = max_iter;
        break;
      }
    }
    if (!accepted) break;
  }
  out.gamma = gamma;
  out.gradient_norm = g.cwiseAbs().maxCoeff();
  if (out.gradient_norm <= tol) out.converged = true;
  return out;
}

}  // namespace detail

/// Weighted multinomial-logit regression of fractional responses tau on
/// [1 | Z]; the last component is the reference. Newton-Raphson from `start`
/// (zeros when empty). Separation (max |gamma| > 30) triggers a refit with a
/// 1e-6 ridge penalty. Of the ridge and unpenalized solutions the one with
/// the higher unpenalized objective is kept, and `start` is kept when neither
/// improves on it.
inline LogitStep m_step_weights_logit(const MatrixXd& tau, const MatrixXd& Z, const MatrixXd& start = MatrixXd(),
                                      int max_iter = 100, double tol = 1e-8) {
  const Index K = tau.cols(), d = Z.cols() + 1;
  if (Z.rows() != tau.rows()) throw SpecError("m_step_weights_logit: Z must have one row per unit");
  MatrixXd g0 = start.size() ? start : MatrixXd::Zero(K - 1, d);
  if (K == 1) return {MatrixXd(0, d), true, false, 0, 0.0};
  LogitStep s = detail::newton_logit(tau, Z, g0, 0.0, max_iter, tol);
  if (s.gamma.cwiseAbs().maxCoeff() > 30.0) {
    LogitStep r = detail::newton_logit(tau, Z, g0, 1e-6, max_iter, tol);
    const double base = detail::logit_objective(tau, Z, g0, 0.0, nullptr, nullptr);
    const double fr = detail::logit_objective(tau, Z, r.gamma, 0.0, nullptr, nullptr);
    const double fs = detail::logit_objective(tau, Z, s.gamma, 0.0, nullptr, nullptr);
    r.ridge = true;
    // the ridge may trail the unpenalized step once gamma is already large;
    // taking the better one keeps Q rising, so EM does not stall there
    if (fs > fr) r.gamma = s.gamma;
    if (!(std::max(fr, fs) >= base)) r.gamma = g0;
    return r;
  }
  return s;
}

// ---------------------------------------------------------------------------
// Canonical ordering
// ---------------------------------------------------------------------------

/// Full K x (q+1) logit matrix (reference row included, zero).
inline MatrixXd full_logits(const LogisticWeights& w, Index K, Index d) {
  MatrixXd L = MatrixXd::Zero(K, d);
  if (K > 1) L.topRows(K - 1) = w.gamma;
  return L;
}

inline LogisticWeights from_full_logits(const MatrixXd& L) {
  const Index K = L.rows();
  MatrixXd g = L.topRows(K - 1);
  for (Index k = 0; k + 1 < K; ++k) g.row(k) -= L.row(K - 1);
  return {g};
}

/// Sorts components by location and permutes tau columns and weights to
/// match; the largest location becomes the logit reference.
inline void canonicalize(MixtureParams& m, MatrixXd* tau, Index q) {
  const Index K = m.n_components();
  std::vector<Index> order(K);
  std::iota(order.begin(), order.end(), Index{0});
  std::stable_sort(order.begin(), order.end(), [&](Index a, Index b) { return m.zeta(a) < m.zeta(b); });
  VectorXd z(K);
  for (Index k = 0; k < K; ++k) z(k) = m.zeta(order[k]);
  m.zeta = z;
  if (tau && tau->cols() == K) {
    MatrixXd t(tau->rows(), K);
    for (Index k = 0; k < K; ++k) t.col(k) = tau->col(order[k]);
    *tau = std::move(t);
  }
  if (auto* c = std::get_if<ConstantWeights>(&m.weights)) {
    VectorXd p(K);
    for (Index k = 0; k < K; ++k) p(k) = c->pi(order[k]);
    c->pi = p;
  } else {
    auto& lw = std::get<LogisticWeights>(m.weights);
    const MatrixXd L = full_logits(lw, K, q + 1);
    MatrixXd P(K, q + 1);
    for (Index k = 0; k < K; ++k) P.row(k) = L.row(order[k]);
    lw = from_full_logits(P);
  }
}

// ---------------------------------------------------------------------------
// Initialization
// ---------------------------------------------------------------------------

/// K = 1 fit used to seed every mixture start.
struct Baseline {
  double intercept = 0.0;
  VectorXd beta;
  double sigma = std::numeric_limits<double>::quiet_NaN();
  VectorXd unit_resid;  // per-unit mean working residual
  double scale = 1.0;   // sd of unit_resid (1 when degenerate)
  bool separated = false;
};

inline double quantile7(std::vector<double> v, double p) {
  std::sort(v.begin(), v.end());
  const double h = (static_cast<double>(v.size()) - 1.0) * p;
  const auto lo = static_cast<std::size_t>(std::floor(h));
  const std::size_t hi = std::min(lo + 1, v.size() - 1);
  return v[lo] + (h - static_cast<double>(lo)) * (v[hi] - v[lo]);
}

inline Baseline fit_baseline(const ModelFrame& f) {
  const Index N = f.panel.n_obs(), p = f.p();
  MatrixXd D(N, p + 1);
  D.col(0).setOnes();
  D.rightCols(p) = f.panel.X();
  std::vector<std::string> names{"(Intercept)"};
  for (const auto& s : f.panel.covariate_names()) names.push_back(s);
  GlmFit g = weighted_glm_fit(f.panel.y(), D, VectorXd::Ones(N), VectorXd::Zero(N), f.fl, {}, names);
  Baseline b;
  b.intercept = g.coef(0);
  b.beta = g.coef.tail(p);
  b.separated = g.separated;
  const VectorXd eta = D * g.coef;
  VectorXd wr(N);
  double rss = 0.0;
  for (Index j = 0; j < N; ++j) {
    const double mu = f.fl.mean(eta(j));
    const double dm = std::max(f.fl.dmean(eta(j)), 1e-10);
    wr(j) = (f.panel.y()(j) - mu) / dm;
    rss += (f.panel.y()(j) - mu) * (f.panel.y()(j) - mu);
  }
  if (f.gaussian()) b.sigma = std::sqrt(std::max(rss / static_cast<double>(N), 1e-20));
  b.unit_resid.resize(f.n());
  for (Index i = 0; i < f.n(); ++i)
    b.unit_resid(i) = wr.segment(f.panel.unit_begin(i), f.panel.unit_size(i)).mean();
  const double mean = b.unit_resid.mean();
  const double var = f.n() > 1 ? (b.unit_resid.array() - mean).square().sum() / static_cast<double>(f.n() - 1) : 0.0;
  b.scale = var > 1e-20 ? std::sqrt(var) : 1.0;
  return b;
}

inline std::mt19937_64 start_rng(std::uint64_t seed, int K, int start_index) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed & 0xffffffffu), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(K), static_cast<std::uint32_t>(start_index), 0x6d6978u};
  return std::mt19937_64(seq);
}

/// Deterministic given (seed, K, start_index): locations at the k/(K+1)
/// quantiles of per-unit mean working residuals around the baseline
/// intercept, uniform masses, zero logit coefficients. Odd starts jitter
/// locations and slopes with N(0, 0.1 * scale) noise; even starts from 2 on
/// take locations and slopes from one M-step on a random hard partition of
/// the units, which reaches basins the jittered starts miss on small panels.
inline MixtureParams initialize(const ModelFrame& f, const Baseline& base, const ModelSpec& spec, int K,
                                int start_index) {
  MixtureParams m;
  if (K < 1) throw SpecError("initialize: K must be >= 1");
  m.beta = base.beta;
  m.sigma_e = base.sigma;
  if (K == 1) {
    m.intercept = base.intercept;
    m.zeta = VectorXd::Zero(1);
    m.weights = ConstantWeights{VectorXd::Ones(1)};
    return m;
  }
  if (spec.treatment == Treatment::COV)
    m.weights = LogisticWeights{MatrixXd::Zero(K - 1, f.q() + 1)};
  else
    m.weights = ConstantWeights{VectorXd::Constant(K, 1.0 / K)};
  if (start_index >= 2 && start_index % 2 == 0 && f.n() >= K) {
    // hard random partition, every component seeded with at least one unit
    auto rng = start_rng(spec.seed, K, start_index);
    std::vector<Index> units(static_cast<std::size_t>(f.n()));
    std::iota(units.begin(), units.end(), Index{0});
    std::shuffle(units.begin(), units.end(), rng);
    std::uniform_int_distribution<int> pick(0, K - 1);
    MatrixXd tau = MatrixXd::Zero(f.n(), K);
    for (std::size_t a = 0; a < units.size(); ++a)
      tau(units[a], a < static_cast<std::size_t>(K) ? static_cast<Index>(a) : pick(rng)) = 1.0;
    try {
      const LocationStep ls =
          m_step_locations_beta(f, tau, base.beta, VectorXd::Constant(K, base.intercept));
      if (!ls.collapsed && ls.beta.allFinite() && ls.zeta.allFinite()) {
        m.beta = ls.beta;
        m.zeta = ls.zeta;
        return m;
      }
    } catch (const EstimationError&) {
      // fall back to the quantile start below
    }
  }
  std::vector<double> r(base.unit_resid.data(), base.unit_resid.data() + base.unit_resid.size());
  m.zeta.resize(K);
  for (int k = 0; k < K; ++k) m.zeta(k) = base.intercept + quantile7(r, static_cast<double>(k + 1) / (K + 1));
  if (start_index > 0) {
    auto rng = start_rng(spec.seed, K, start_index);
    std::normal_distribution<double> nd(0.0, 1.0);
    for (int k = 0; k < K; ++k) m.zeta(k) += 0.1 * base.scale * nd(rng);
    for (Index j = 0; j < m.beta.size(); ++j) m.beta(j) += 0.1 * std::max(std::abs(base.beta(j)), 0.1) * nd(rng);
  }
  return m;
}

/// Starts derived from a (K-1)-component solution: component `j` is split
/// into two halves at zeta_j -/+ offset, each with half of its mass.
inline MixtureParams split_component(const MixtureParams& prev, Index j, double offset, Index q, bool logistic) {
  const Index Kp = prev.n_components();
  MixtureParams m = prev;
  VectorXd zp = prev.zeta;
  if (Kp == 1) {
    zp(0) += prev.intercept;
    m.intercept = 0.0;
  }
  m.zeta.resize(Kp + 1);
  Index r = 0;
  for (Index k = 0; k < Kp; ++k) {
    if (k == j) {
      m.zeta(r++) = zp(k) - offset;
      m.zeta(r++) = zp(k) + offset;
    } else {
      m.zeta(r++) = zp(k);
    }
  }
  MatrixXd L;
  if (const auto* lw = std::get_if<LogisticWeights>(&prev.weights)) {
    L = full_logits(*lw, Kp, q + 1);
  } else {
    const auto& pi = std::get<ConstantWeights>(prev.weights).pi;
    L = MatrixXd::Zero(Kp, q + 1);
    for (Index k = 0; k < Kp; ++k) L(k, 0) = std::log(pi(k));
  }
  MatrixXd L2(Kp + 1, q + 1);
  r = 0;
  for (Index k = 0; k < Kp; ++k) {
    L2.row(r++) = L.row(k);
    if (k == j) {
      L2(r - 1, 0) -= std::log(2.0);
      L2.row(r) = L2.row(r - 1);
      ++r;
    }
  }
  if (logistic) {
    m.weights = from_full_logits(L2);
  } else {
    VectorXd pi(Kp + 1);
    for (Index k = 0; k <= Kp; ++k) pi(k) = std::exp(L2(k, 0));
    pi /= pi.sum();
    m.weights = ConstantWeights{pi};
  }
  canonicalize(m, nullptr, q);
  return m;
}

// ---------------------------------------------------------------------------
// EM
// ---------------------------------------------------------------------------

struct EMRun {
  MixtureParams params;
  MatrixXd tau;
  double loglik = -std::numeric_limits<double>::infinity();
  std::vector<double> loglik_history;
  int iterations = 0;
  bool converged = false;
  bool collapsed = false;
  bool sigma_floor = false;
  bool ridge = false;
  std::string failure;
};

/// Alternates e_step and the M-steps from `start` until the absolute change
/// in log-likelihood drops below spec.em_tol or spec.max_iter is reached.
inline EMRun run_em(const ModelFrame& f, const ModelSpec& spec, MixtureParams start, int max_inner = 25) {
  EMRun run;
  double sigma_floor = 0.0;
  if (f.gaussian()) {
    const VectorXd& y = f.panel.y();
    const double var = (y.array() - y.mean()).square().sum() / std::max<Index>(1, y.size() - 1);
    sigma_floor = 1e-6 * std::sqrt(var);
  }
  MixtureParams m = std::move(start);
  EStep e = e_step(f, m);
  run.loglik_history.push_back(e.loglik);
  for (int it = 1; it <= spec.max_iter; ++it) {
    // a partial M-step suffices once the remaining gain is far below em_tol
    const LocationStep ls = m_step_locations_beta(f, e.tau, m.beta, m.zeta, max_inner, 1e-12);
    if (ls.collapsed) {
      run.collapsed = true;
      run.failure = "component " + std::to_string(ls.empty_component + 1) + " collapsed at iteration " +
                    std::to_string(it);
      break;
    }
    m.beta = ls.beta;
    m.zeta = ls.zeta;
    if (f.gaussian()) {
      double s;
      try {
        s = m_step_sigma(f, e.tau, m.beta, m.zeta, m.intercept);
      } catch (const EstimationError&) {
        s = 0.0;
      }
      if (s < sigma_floor) {
        s = sigma_floor;
        run.sigma_floor = true;
      }
      m.sigma_e = s;
    }
    if (auto* c = std::get_if<ConstantWeights>(&m.weights)) {
      c->pi = m_step_weights_constant(e.tau);
    } else {
      auto& lw = std::get<LogisticWeights>(m.weights);
      LogitStep st = m_step_weights_logit(e.tau, f.Z, lw.gamma);
      lw.gamma = st.gamma;
      run.ridge = run.ridge || st.ridge;
    }
    EStep ne = e_step(f, m);
    const double change = ne.loglik - e.loglik;
    e = std::move(ne);
    run.loglik_history.push_back(e.loglik);
    run.iterations = it;
    if (std::abs(change) < spec.em_tol) {
      run.converged = true;
      break;
    }
  }
  run.loglik = e.loglik;
  run.tau = std::move(e.tau);
  if (!run.collapsed && detail::empty_component(run.tau) >= 0) run.collapsed = true;
  canonicalize(m, &run.tau, f.q());
  run.params = std::move(m);
  return run;
}

namespace detail {

inline void finish_result(FitResult& r, const ModelFrame& f, const ModelSpec& spec, int K) {
  r.npar = npar(spec, K, static_cast<int>(f.p()), static_cast<int>(f.q()));
  r.aic = aic_value(r.loglik, r.npar);
  r.bic = bic_value(r.loglik, r.npar, f.n());
  r.n_units = f.n();
  r.treatment = spec.treatment;
  r.term_names = f.panel.covariate_names();
  r.weight_names = f.weight_names;
}

}  // namespace detail

/// K = 1: no unobserved heterogeneity, a plain GLM with intercept.
inline FitResult fit_glm(const ModelFrame& f, const ModelSpec& spec) {
  const Baseline b = fit_baseline(f);
  FitResult r;
  r.params.beta = b.beta;
  r.params.intercept = b.intercept;
  r.params.zeta = VectorXd::Zero(1);
  r.params.weights = ConstantWeights{VectorXd::Ones(1)};
  if (spec.treatment == Treatment::COV) r.params.weights = LogisticWeights{MatrixXd(0, f.q() + 1)};
  r.params.sigma_e = b.sigma;
  const EStep e = e_step(f, r.params);
  r.loglik = e.loglik;
  r.tau = e.tau;
  r.loglik_history = {e.loglik};
  r.converged = true;
  if (b.separated) r.flag("separation");
  detail::finish_result(r, f, spec, 1);
  return r;
}

/// Multi-start EM for a fixed K on a prepared frame. `previous`, when given,
/// is a fitted (K-1)-component solution used for additional split starts.
inline FitResult fit_em(const ModelFrame& f, const ModelSpec& spec, int K, const MixtureParams* previous = nullptr) {
  if (K < 1) throw SpecError("fit_em: K must be >= 1");
  if (K == 1) return fit_glm(f, spec);
  const Baseline base = fit_baseline(f);
  const bool logistic = spec.treatment == Treatment::COV;

  std::vector<MixtureParams> starts;
  for (int s = 0; s < spec.n_starts; ++s) starts.push_back(initialize(f, base, spec, K, s));
  if (previous && previous->n_components() == K - 1) {
    // split the (up to) three heaviest components, then an exact duplicate
    const Index Kp = previous->n_components();
    VectorXd mass(Kp);
    if (const auto* c = std::get_if<ConstantWeights>(&previous->weights)) {
      mass = c->pi;
    } else {
      const MatrixXd lp = log_priors(f, *previous);
      mass = lp.array().exp().colwise().mean().transpose();
    }
    std::vector<Index> order(Kp);
    std::iota(order.begin(), order.end(), Index{0});
    std::stable_sort(order.begin(), order.end(), [&](Index a, Index b) { return mass(a) > mass(b); });
    const double offset = 0.5 * base.scale;
    for (Index a = 0; a < std::min<Index>(3, Kp); ++a)
      starts.push_back(split_component(*previous, order[a], offset, f.q(), logistic));
    starts.push_back(split_component(*previous, order[0], 0.0, f.q(), logistic));
  }

  FitResult best;
  std::vector<std::string> diagnostics;
  bool have = false;
  double max_drop = 0.0;
  for (std::size_t s = 0; s < starts.size(); ++s) {
    EMRun run;
    try {
      run = run_em(f, spec, starts[s]);
    } catch (const EstimationError& ex) {
      diagnostics.push_back("start " + std::to_string(s) + ": " + ex.what());
      continue;
    }
    for (std::size_t r = 1; r < run.loglik_history.size(); ++r)
      max_drop = std::max(max_drop, run.loglik_history[r - 1] - run.loglik_history[r]);
    if (run.collapsed) {
      diagnostics.push_back("start " + std::to_string(s) + ": " +
                            (run.failure.empty() ? std::string("component collapse") : run.failure));
      continue;
    }
    if (!have || run.loglik > best.loglik + 1e-10) {
      have = true;
      best = FitResult{};
      best.params = run.params;
      best.loglik = run.loglik;
      best.tau = run.tau;
      best.converged = run.converged;
      best.iterations = run.iterations;
      best.start_index = static_cast<int>(s);
      best.loglik_history = run.loglik_history;
      if (run.sigma_floor) best.flag("sigma_floor");
      if (run.ridge) best.flag("weight_separation_ridge");
    }
  }
  if (!have) throw EstimationError("fit_em: every start degenerated at K=" + std::to_string(K), diagnostics);
  for (const auto& d : diagnostics) best.flag("collapsed_start: " + d);
  if (!best.converged) best.flag("not_converged");
  best.max_loglik_drop = max_drop;
  detail::finish_result(best, f, spec, K);
  return best;
}

inline FitResult fit_em(const PanelDataset& data, const ModelSpec& spec, int K) {
  validate(data, spec);
  return fit_em(make_frame(data, spec), spec, K);
}

// ---------------------------------------------------------------------------
// Choice of K
// ---------------------------------------------------------------------------

/// Fits along K = 1..k_max with split starts seeded from the previous K.
struct KPath {
  std::vector<FitResult> fits;  // fits[K-1]
  int selected_lik = 0;         // K chosen by each rule
  int selected_aic = 0;
  int selected_bic = 0;
  bool lik_triggered = false;
};

inline double lik_threshold(const ModelSpec& spec, int K, const ModelFrame& f) {
  return 1e-7 * npar(spec, K, static_cast<int>(f.p()), static_cast<int>(f.q()));
}

/// With `stop_at_lik`, the path ends as soon as the likelihood-increment rule
/// fires (the AIC/BIC choices are then over the truncated path).
inline KPath fit_k_path(const ModelFrame& f, const ModelSpec& spec, bool stop_at_lik) {
  KPath path;
  for (int K = 1; K <= spec.k_max; ++K) {
    FitResult fit;
    try {
      fit = fit_em(f, spec, K, path.fits.empty() ? nullptr : &path.fits.back().params);
    } catch (const EstimationError&) {
      if (path.fits.empty()) throw;
      path.fits.back().flag("path_truncated_at_K" + std::to_string(K));
      break;
    }
    path.fits.push_back(std::move(fit));
    if (K >= 2 && !path.lik_triggered) {
      const double inc = path.fits[K - 1].loglik - path.fits[K - 2].loglik;
      if (inc < lik_threshold(spec, K - 1, f)) {
        path.lik_triggered = true;
        path.selected_lik = K - 1;
        if (stop_at_lik) break;
      }
    }
  }
  const int last = static_cast<int>(path.fits.size());
  if (!path.lik_triggered) path.selected_lik = last;
  path.selected_aic = path.selected_bic = 1;
  for (int K = 1; K <= last; ++K) {
    if (path.fits[K - 1].aic < path.fits[path.selected_aic - 1].aic) path.selected_aic = K;
    if (path.fits[K - 1].bic < path.fits[path.selected_bic - 1].bic) path.selected_bic = K;
  }
  std::vector<KPathEntry> entries;
  for (const auto& ft : path.fits)
    entries.push_back({static_cast<int>(ft.params.n_components()), ft.loglik, ft.npar, ft.aic, ft.bic, ft.converged});
  for (auto& ft : path.fits) ft.k_path = entries;
  return path;
}

inline FitResult select_k(const ModelFrame& f, const ModelSpec& spec) {
  if (spec.k_rule == KRule::fixed) throw SpecError("select_k: k_rule is fixed");
  KPath path = fit_k_path(f, spec, spec.k_rule == KRule::lik_threshold);
  int K = spec.k_rule == KRule::lik_threshold ? path.selected_lik
          : spec.k_rule == KRule::aic        ? path.selected_aic
                                             : path.selected_bic;
  FitResult r = path.fits[K - 1];
  if (spec.k_rule == KRule::lik_threshold && !path.lik_triggered) r.flag("k_max_reached");
  return r;
}

inline FitResult select_k(const PanelDataset& data, const ModelSpec& spec) {
  validate(data, spec);
  return select_k(make_frame(data, spec), spec);
}

}  // namespace mixpanel
