#pragma once

#include "mixpanel/core.hpp"
#include "mixpanel/decomp.hpp"
#include "mixpanel/families.hpp"

namespace mixpanel {

/// A panel prepared for one model: the design after the treatment has been
/// applied, plus the concomitant covariates of the weight model.
struct ModelFrame {
  PanelDataset panel;
  MatrixXd Z;  // n x q unit-level weight covariates (COV only)
  std::vector<std::string> weight_names;
  FamilyLink fl;
  Treatment treatment = Treatment::FM;
  std::vector<std::string> warnings;

  Index p() const { return panel.n_covariates(); }
  Index q() const { return Z.cols(); }
  Index n() const { return panel.n_units(); }
  bool gaussian() const { return fl.family == Family::gaussian; }
};

/// Unit means of the selected columns (default: every time-varying column).
inline std::pair<MatrixXd, std::vector<std::string>> weight_covariate_matrix(const PanelDataset& data,
                                                                           const std::vector<std::string>& select) {
  const MatrixXd m = unit_means(data);
  std::vector<Index> cols;
  if (select.empty()) {
    cols = time_varying_indices(data);
  } else {
    for (const auto& name : select) {
      const auto& names = data.covariate_names();
      auto it = std::find(names.begin(), names.end(), name);
      if (it == names.end()) throw SpecError("weight covariate '" + name + "' is not a design column");
      cols.push_back(static_cast<Index>(it - names.begin()));
    }
  }
  MatrixXd Z(data.n_units(), static_cast<Index>(cols.size()));
  std::vector<std::string> names;
  for (std::size_t a = 0; a < cols.size(); ++a) {
    Z.col(static_cast<Index>(a)) = m.col(cols[a]);
    names.push_back("mean:" + data.covariate_names()[cols[a]]);
  }
  return {Z, names};
}

inline ModelFrame make_frame(const PanelDataset& data, const ModelSpec& spec) {
  ModelFrame f;
  f.fl = FamilyLink(spec.family, spec.link);
  f.treatment = spec.treatment;
  if (spec.treatment == Treatment::FMQP || spec.treatment == Treatment::PARQP) {
    QpPanel qp = qp_transform(data);
    f.panel = std::move(qp.panel);
    f.warnings = std::move(qp.design.warnings);
  } else {
    f.panel = data;
  }
  if (spec.treatment == Treatment::COV) {
    if (spec.weight_intercept_only) {
      f.Z.resize(data.n_units(), 0);
    } else {
      auto [Z, names] = weight_covariate_matrix(data, spec.weight_covariates);
      f.Z = std::move(Z);
      f.weight_names = std::move(names);
    }
  } else {
    f.Z.resize(data.n_units(), 0);
  }
  return f;
}

/// intercept + x_j' beta for every observation.
inline VectorXd linear_predictor(const ModelFrame& f, const MixtureParams& m) {
  VectorXd eta = f.panel.X() * m.beta;
  eta.array() += m.intercept;
  return eta;
}

/// n x K matrix of sum_t log f(y_it | x_it'beta + intercept + zeta_k).
inline MatrixXd component_loglik(const ModelFrame& f, const MixtureParams& m) {
  const Index n = f.n(), K = m.n_components();
  const VectorXd eta = linear_predictor(f, m);
  const VectorXd& y = f.panel.y();
  MatrixXd L(n, K);
  if (f.gaussian()) {
    const double s2 = m.sigma_e * m.sigma_e;
    const double c = -0.5 * std::log(2.0 * std::numbers::pi * s2);
    for (Index i = 0; i < n; ++i) {
      const Index b = f.panel.unit_begin(i), T = f.panel.unit_size(i);
      double sr = 0.0, srr = 0.0;
      for (Index j = b; j < b + T; ++j) {
        const double r = y(j) - eta(j);
        sr += r;
        srr += r * r;
      }
      for (Index k = 0; k < K; ++k) {
        const double z = m.zeta(k);
        L(i, k) = T * c - (srr - 2.0 * z * sr + T * z * z) / (2.0 * s2);
      }
    }
    return L;
  }
  L.setZero();
  for (Index i = 0; i < n; ++i) {
    const Index b = f.panel.unit_begin(i), T = f.panel.unit_size(i);
    for (Index k = 0; k < K; ++k) {
      double s = 0.0;
      for (Index j = b; j < b + T; ++j) s += f.fl.eval(y(j), eta(j) + m.zeta(k)).value;
      L(i, k) = s;
    }
  }
  return L;
}

/// n x K matrix of log pi_ik.
inline MatrixXd log_priors(const ModelFrame& f, const MixtureParams& m) {
  const Index n = f.n(), K = m.n_components(), q = f.q();
  MatrixXd P(n, K);
  std::vector<double> z(static_cast<std::size_t>(q)), out(static_cast<std::size_t>(K));
  for (Index i = 0; i < n; ++i) {
    for (Index l = 0; l < q; ++l) z[l] = f.Z(i, l);
    log_prior_row(m.weights, K, z.data(), q, out.data());
    for (Index k = 0; k < K; ++k) P(i, k) = out[k];
  }
  return P;
}

struct EStep {
  MatrixXd tau;        // n x K posteriors
  VectorXd unit_loglik;  // per-unit marginal log-likelihood
  double loglik = 0.0;
};

/// Posterior membership probabilities and the marginal log-likelihood,
/// computed in log space with per-unit max subtraction.
inline EStep e_step(const ModelFrame& f, const MixtureParams& m) {
  const Index n = f.n(), K = m.n_components();
  MatrixXd A = component_loglik(f, m) + log_priors(f, m);
  EStep e;
  e.tau.resize(n, K);
  e.unit_loglik.resize(n);
  double total = 0.0, comp = 0.0;  // Kahan
  for (Index i = 0; i < n; ++i) {
    const double mx = A.row(i).maxCoeff();
    if (!std::isfinite(mx))
      throw EstimationError("e_step: non-finite log-likelihood for unit '" + f.panel.unit_ids()[i] + "'");
    double s = 0.0;
    for (Index k = 0; k < K; ++k) {
      e.tau(i, k) = std::exp(A(i, k) - mx);
      s += e.tau(i, k);
    }
    e.tau.row(i) /= s;
    const double li = mx + std::log(s);
    e.unit_loglik(i) = li;
    const double yk = li - comp;
    const double t = total + yk;
    comp = (t - total) - yk;
    total = t;
  }
  e.loglik = total;
  return e;
}

}  // namespace mixpanel
