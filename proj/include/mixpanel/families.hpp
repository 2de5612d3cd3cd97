#pragma once

#include "mixpanel/core.hpp"

#include <cmath>
#include <numbers>

namespace mixpanel {

/// Standard normal CDF through erfc (full double accuracy in both tails).
inline double norm_cdf(double x) { return 0.5 * std::erfc(-x / std::numbers::sqrt2); }

inline double norm_pdf(double x) { return std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi); }

inline double norm_logpdf(double x) { return -0.5 * x * x - 0.5 * std::log(2.0 * std::numbers::pi); }

/// Value and first two eta-derivatives of a log-density.
struct LogDensity {
  double value;
  double d1;
  double d2;
};

/// Response family plus link: mean function g^{-1}, its derivative and the
/// variance function.
struct FamilyLink {
  Family family = Family::gaussian;
  Link link = Link::identity;

  static constexpr double logit_clamp = 35.0;
  static constexpr double probit_clamp = 8.0;

  FamilyLink() = default;
  FamilyLink(Family f, Link l) : family(f), link(l) {
    if ((f == Family::gaussian) != (l == Link::identity)) throw SpecError("link/family mismatch");
  }

  double mean(double eta) const {
    switch (link) {
      case Link::identity: return eta;
      case Link::logit: return 1.0 / (1.0 + std::exp(-eta));
      case Link::probit: return norm_cdf(eta);
    }
    return eta;
  }

  /// d mu / d eta
  double dmean(double eta) const {
    switch (link) {
      case Link::identity: return 1.0;
      case Link::logit: {
        const double m = mean(eta);
        return m * (1.0 - m);
      }
      case Link::probit: return norm_pdf(eta);
    }
    return 1.0;
  }

  double variance(double mu) const { return family == Family::gaussian ? 1.0 : mu * (1.0 - mu); }

  /// Log-density and derivatives in eta. For bernoulli, eta is clamped to
  /// [-35, 35] (logit) or [-8, 8] (probit); derivatives vanish beyond.
  LogDensity eval(double y, double eta, double sigma = 1.0) const {
    if (family == Family::gaussian) {
      const double r = y - eta;
      const double s2 = sigma * sigma;
      return {-0.5 * std::log(2.0 * std::numbers::pi * s2) - r * r / (2.0 * s2), r / s2, -1.0 / s2};
    }
    if (link == Link::logit) {
      const bool clamped = std::abs(eta) > logit_clamp;
      const double e = std::clamp(eta, -logit_clamp, logit_clamp);
      // log m(e) = -log1p(exp(-e)); log(1-m(e)) = -log1p(exp(e))
      const double lm = e >= 0 ? -std::log1p(std::exp(-e)) : e - std::log1p(std::exp(e));
      const double l1m = e >= 0 ? -e - std::log1p(std::exp(-e)) : -std::log1p(std::exp(e));
      const double m = std::exp(lm);
      const double v = y * lm + (1.0 - y) * l1m;
      if (clamped) return {v, 0.0, 0.0};
      return {v, y - m, -m * (1.0 - m)};
    }
    // probit: with s = 2y-1, log f = log Phi(s*eta)
    const bool clamped = std::abs(eta) > probit_clamp;
    const double e = std::clamp(eta, -probit_clamp, probit_clamp);
    const double s = 2.0 * y - 1.0;
    const double a = s * e;
    const double P = norm_cdf(a);
    const double v = y == 0.0 || y == 1.0 ? std::log(P) : y * std::log(norm_cdf(e)) + (1.0 - y) * std::log(norm_cdf(-e));
    if (clamped) return {v, 0.0, 0.0};
    if (y != 0.0 && y != 1.0) {
      // fractional response (never produced by validated data)
      const double p1 = norm_cdf(e), p0 = norm_cdf(-e), ph = norm_pdf(e);
      const double l1 = ph / p1, l0 = ph / p0;
      return {v, y * l1 - (1.0 - y) * l0, -y * l1 * (e + l1) - (1.0 - y) * l0 * (l0 - e)};
    }
    const double lam = norm_pdf(a) / P;  // inverse Mills ratio
    return {v, s * lam, -lam * (a + lam)};
  }
};

/// Log-density of one observation. `sigma` is required for gaussian and must
/// be absent otherwise.
inline double log_density(const FamilyLink& fl, double y, double eta, std::optional<double> sigma = std::nullopt) {
  if (!std::isfinite(y) || !std::isfinite(eta)) throw DataError("log_density: non-finite input");
  if (fl.family == Family::gaussian) {
    if (!sigma || !(*sigma > 0.0) || !std::isfinite(*sigma)) throw SpecError("log_density: gaussian needs sigma > 0");
    return fl.eval(y, eta, *sigma).value;
  }
  if (sigma) throw SpecError("log_density: sigma given for a bernoulli family");
  return fl.eval(y, eta).value;
}

// ---------------------------------------------------------------------------
// Weighted GLM
// ---------------------------------------------------------------------------

struct GlmOptions {
  int max_iter = 50;
  double grad_tol = 1e-10;
  double separation_bound = 30.0;
};

struct GlmFit {
  VectorXd coef;
  bool converged = false;
  bool separated = false;  // max |coef| > separation bound
  int iterations = 0;
  double gradient_norm = 0.0;  // max-abs weighted score at coef
  double objective = 0.0;      // sum_j w_j log f(y_j | offset_j + x_j'coef)
};

namespace detail {

inline std::vector<std::string> collinear_columns(const MatrixXd& A, const std::vector<std::string>& names) {
  Eigen::ColPivHouseholderQR<MatrixXd> qr(A);
  qr.setThreshold(1e-10);
  std::vector<std::string> out;
  const auto& perm = qr.colsPermutation().indices();
  for (Index c = qr.rank(); c < A.cols(); ++c) {
    const Index col = perm(c);
    out.push_back(col < static_cast<Index>(names.size()) ? names[col] : "column " + std::to_string(col));
  }
  return out;
}

inline std::string join(const std::vector<std::string>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? ", " : "") + v[i];
  return s;
}

}  // namespace detail

/// Maximizes sum_j w_j log f(y_j | offset_j + x_j' b). The gaussian case is
/// closed-form weighted least squares (sigma does not enter the argmax);
/// bernoulli links use Newton with step halving.
inline GlmFit weighted_glm_fit(const VectorXd& y, const MatrixXd& X, const VectorXd& w, const VectorXd& offset,
                               const FamilyLink& fl, const GlmOptions& opt = {},
                               const std::vector<std::string>& names = {}, const VectorXd* start = nullptr) {
  const Index N = y.size(), p = X.cols();
  if (X.rows() != N || w.size() != N || offset.size() != N) throw SpecError("weighted_glm_fit: size mismatch");
  if ((w.array() < 0.0).any()) throw SpecError("weighted_glm_fit: negative weight");
  if (!(w.sum() > 0.0)) throw SpecError("weighted_glm_fit: weights sum to zero");

  // rank check on the weighted support
  {
    MatrixXd Xw = w.array().sqrt().matrix().asDiagonal() * X;
    Eigen::ColPivHouseholderQR<MatrixXd> qr(Xw);
    qr.setThreshold(1e-10);
    if (qr.rank() < p) {
      auto cols = detail::collinear_columns(Xw, names);
      throw SingularError("weighted_glm_fit: rank-deficient design (collinear: " + detail::join(cols) + ")", cols);
    }
  }

  auto objective = [&](const VectorXd& b) {
    const VectorXd eta = offset + X * b;
    double s = 0.0;
    for (Index j = 0; j < N; ++j)
      if (w(j) > 0.0) s += w(j) * fl.eval(y(j), eta(j)).value;
    return s;
  };

  GlmFit fit;
  if (fl.family == Family::gaussian) {
    const MatrixXd XtW = X.transpose() * w.asDiagonal();
    fit.coef = (XtW * X).ldlt().solve(XtW * (y - offset));
    const VectorXd r = y - offset - X * fit.coef;
    fit.gradient_norm = p ? (XtW * r).cwiseAbs().maxCoeff() : 0.0;
    fit.objective = objective(fit.coef);
    fit.converged = true;
    fit.iterations = 1;
    fit.separated = p && fit.coef.cwiseAbs().maxCoeff() > opt.separation_bound;
    return fit;
  }

  VectorXd b = start ? *start : VectorXd::Zero(p);
  double f = objective(b);
  VectorXd g(p);
  MatrixXd H(p, p);
  for (int it = 0; it <= opt.max_iter; ++it) {
    g.setZero();
    H.setZero();
    const VectorXd eta = offset + X * b;
    for (Index j = 0; j < N; ++j) {
      if (w(j) <= 0.0) continue;
      const LogDensity ld = fl.eval(y(j), eta(j));
      g.noalias() += (w(j) * ld.d1) * X.row(j).transpose();
      H.noalias() += (w(j) * ld.d2) * X.row(j).transpose() * X.row(j);
    }
    fit.gradient_norm = p ? g.cwiseAbs().maxCoeff() : 0.0;
    fit.iterations = it;
    if (fit.gradient_norm <= opt.grad_tol) {
      fit.converged = true;
      break;
    }
    if (it == opt.max_iter) break;
    // -H is positive semidefinite; a tiny ridge covers clamped observations
    MatrixXd A = -H;
    A.diagonal().array() += 1e-12 * (1.0 + A.diagonal().array().abs());
    VectorXd step = A.ldlt().solve(g);
    double t = 1.0;
    VectorXd nb = b + step;
    double nf = objective(nb);
    int halvings = 0;
    while (!(nf >= f) && halvings < 40) {
      t *= 0.5;
      nb = b + t * step;
      nf = objective(nb);
      ++halvings;
    }
    if (!(nf >= f)) break;  // no ascent possible: numerically at the optimum
    const double change = (nb - b).cwiseAbs().maxCoeff();
    b = nb;
    f = nf;
    if (change < 1e-14 * (1.0 + b.cwiseAbs().maxCoeff())) {
      fit.converged = true;
      break;
    }
  }
  fit.coef = b;
  fit.objective = f;
  fit.separated = p && b.cwiseAbs().maxCoeff() > opt.separation_bound;
  return fit;
}

}  // namespace mixpanel
