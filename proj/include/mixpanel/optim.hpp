#pragma once

#include "mixpanel/core.hpp"

#include <functional>

namespace mixpanel {

using Objective = std::function<double(const VectorXd&)>;

/// Central-difference gradient with steps h * max(1, |x_j|).
inline VectorXd numeric_gradient(const Objective& f, const VectorXd& x, double h = 1e-5) {
  VectorXd g(x.size());
  VectorXd xp = x;
  for (Index j = 0; j < x.size(); ++j) {
    const double hj = h * std::max(1.0, std::abs(x(j)));
    xp(j) = x(j) + hj;
    const double fp = f(xp);
    xp(j) = x(j) - hj;
    const double fm = f(xp);
    xp(j) = x(j);
    g(j) = (fp - fm) / (2.0 * hj);
  }
  return g;
}

/// Five-point central-difference gradient (error O(h^4)) with steps
/// h * max(1, |x_j|); accurate enough to test gradient norms near 1e-6 on
/// log-likelihoods summed over thousands of observations.
inline VectorXd numeric_gradient5(const std::function<double(const VectorXd&)>& f, const VectorXd& x,
                                  double h = 1e-3) {
  VectorXd g(x.size());
  VectorXd xp = x;
  for (Index j = 0; j < x.size(); ++j) {
    const double hj = h * std::max(1.0, std::abs(x(j)));
    double v[4];
    const double off[4] = {2.0, 1.0, -1.0, -2.0};
    for (int k = 0; k < 4; ++k) {
      xp(j) = x(j) + off[k] * hj;
      v[k] = f(xp);
    }
    xp(j) = x(j);
    g(j) = (-v[0] + 8.0 * v[1] - 8.0 * v[2] + v[3]) / (12.0 * hj);
  }
  return g;
}

/// Central-difference Jacobian of a vector-valued map, one row per output.
inline MatrixXd numeric_jacobian(const std::function<VectorXd(const VectorXd&)>& f, const VectorXd& x,
                                 double h = 1e-5) {
  const VectorXd f0 = f(x);
  MatrixXd J(f0.size(), x.size());
  VectorXd xp = x;
  for (Index j = 0; j < x.size(); ++j) {
    const double hj = h * std::max(1.0, std::abs(x(j)));
    xp(j) = x(j) + hj;
    const VectorXd fp = f(xp);
    xp(j) = x(j) - hj;
    const VectorXd fm = f(xp);
    xp(j) = x(j);
    J.col(j) = (fp - fm) / (2.0 * hj);
  }
  return J;
}

/// Symmetric central-difference Hessian. Off-diagonal entries use the
/// four-point formula, diagonal entries the three-point one.
inline MatrixXd numeric_hessian(const Objective& f, const VectorXd& x, double h = 1e-4) {
  const Index d = x.size();
  MatrixXd H(d, d);
  VectorXd hs(d);
  for (Index j = 0; j < d; ++j) hs(j) = h * std::max(1.0, std::abs(x(j)));
  const double f0 = f(x);
  VectorXd xp = x;
  for (Index a = 0; a < d; ++a) {
    xp(a) = x(a) + hs(a);
    const double fp = f(xp);
    xp(a) = x(a) - hs(a);
    const double fm = f(xp);
    xp(a) = x(a);
    H(a, a) = (fp - 2.0 * f0 + fm) / (hs(a) * hs(a));
    for (Index b = 0; b < a; ++b) {
      double s = 0.0;
      for (int sa : {1, -1})
        for (int sb : {1, -1}) {
          xp(a) = x(a) + sa * hs(a);
          xp(b) = x(b) + sb * hs(b);
          s += sa * sb * f(xp);
        }
      xp(a) = x(a);
      xp(b) = x(b);
      H(a, b) = H(b, a) = s / (4.0 * hs(a) * hs(b));
    }
  }
  return H;
}

struct OptimOptions {
  double grad_tol = 1e-6;
  int max_iter = 200;
  double grad_step = 1e-3;  // five-point stencil
};

struct OptimResult {
  VectorXd x;
  double value = 0.0;
  double gradient_norm = 0.0;
  int iterations = 0;
  int evaluations = 0;
  bool converged = false;
};

namespace detail {

/// Inverse of the negated Hessian when it is positive definite, else a
/// scaled identity.
inline MatrixXd initial_inverse(const Objective& f, const VectorXd& x, const VectorXd& g) {
  const MatrixXd A = -numeric_hessian(f, x);
  Eigen::LLT<MatrixXd> llt(A);
  if (llt.info() == Eigen::Success && A.allFinite()) return llt.solve(MatrixXd::Identity(x.size(), x.size()));
  const double s = 1.0 / std::max(1.0, g.cwiseAbs().maxCoeff());
  return s * MatrixXd::Identity(x.size(), x.size());
}

}  // namespace detail

/// BFGS maximization with five-point numerical gradients and a backtracking Armijo
/// line search. The inverse-Hessian approximation starts from the numerical
/// Hessian and is rebuilt from it whenever the line search stalls.
inline OptimResult maximize_bfgs(const Objective& fun, VectorXd x, const OptimOptions& opt = {}) {
  OptimResult r;
  Objective f = [&](const VectorXd& v) {
    ++r.evaluations;
    return fun(v);
  };
  double fx = f(x);
  if (!std::isfinite(fx)) throw EstimationError("maximize_bfgs: objective not finite at the starting point");
  VectorXd g = numeric_gradient5(f, x, opt.grad_step);
  MatrixXd Hinv = detail::initial_inverse(f, x, g);
  bool rebuilt = true;
  for (int it = 0; it < opt.max_iter; ++it) {
    r.iterations = it;
    r.gradient_norm = g.cwiseAbs().maxCoeff();
    if (r.gradient_norm <= opt.grad_tol) {
      r.converged = true;
      break;
    }
    VectorXd dir = Hinv * g;
    double slope = g.dot(dir);
    if (!(slope > 0.0)) {
      Hinv = detail::initial_inverse(f, x, g);
      dir = Hinv * g;
      slope = g.dot(dir);
      if (!(slope > 0.0)) {
        dir = g;
        slope = g.squaredNorm();
      }
    }
    double t = 1.0, fn = -std::numeric_limits<double>::infinity();
    VectorXd xn;
    bool ok = false;
    // when the predicted gain is below the rounding level of f, the Armijo
    // test cannot be resolved; a full step that does not lose more than the
    // rounding level is taken instead
    const double noise = 1e-12 * (1.0 + std::abs(fx));
    const bool at_floor = 0.5 * slope < 100.0 * noise;
    for (int h = 0; h < 50; ++h, t *= 0.5) {
      xn = x + t * dir;
      fn = f(xn);
      if (std::isfinite(fn) && (fn >= fx + 1e-4 * t * slope || (at_floor && h == 0 && fn >= fx - noise))) {
        ok = true;
        break;
      }
    }
    if (!ok) {
      // accept any non-decreasing step before giving up on this direction
      if (std::isfinite(fn) && fn >= fx && (xn - x).cwiseAbs().maxCoeff() > 0.0) {
        ok = true;
      } else if (!rebuilt) {
        Hinv = detail::initial_inverse(f, x, g);
        rebuilt = true;
        continue;
      } else {
        break;
      }
    }
    const VectorXd gn = numeric_gradient5(f, xn, opt.grad_step);
    const VectorXd s = xn - x;
    const VectorXd yv = g - gn;  // gradient of -f changes by -(gn - g)
    const double sy = s.dot(yv);
    if (sy > 1e-12 * s.norm() * yv.norm()) {
      const double rho = 1.0 / sy;
      const MatrixXd I = MatrixXd::Identity(x.size(), x.size());
      Hinv = (I - rho * s * yv.transpose()) * Hinv * (I - rho * yv * s.transpose()) + rho * s * s.transpose();
    }
    rebuilt = false;
    x = xn;
    fx = fn;
    g = gn;
  }
  r.gradient_norm = g.cwiseAbs().maxCoeff();
  if (r.gradient_norm <= opt.grad_tol) r.converged = true;
  r.x = x;
  r.value = fx;
  return r;
}

}  // namespace mixpanel
