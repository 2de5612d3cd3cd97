#pragma once

#include "mixpanel/core.hpp"

namespace mixpanel {

/// Per-unit covariate means, n x p.
inline MatrixXd unit_means(const PanelDataset& data) {
  MatrixXd m = MatrixXd::Zero(data.n_units(), data.n_covariates());
  for (Index i = 0; i < data.n_units(); ++i) {
    const Index T = data.unit_size(i);
    if (T == 0) continue;
    m.row(i) = data.X().middleRows(data.unit_begin(i), T).colwise().sum() / static_cast<double>(T);
  }
  return m;
}

/// A column is time-invariant when its within-unit variance is below 1e-12
/// in every unit.
inline std::vector<bool> time_invariant_columns(const PanelDataset& data, double tol = 1e-12) {
  const MatrixXd m = unit_means(data);
  std::vector<bool> inv(data.n_covariates(), true);
  for (Index c = 0; c < data.n_covariates(); ++c) {
    for (Index i = 0; i < data.n_units() && inv[c]; ++i) {
      const Index T = data.unit_size(i);
      if (T < 2) continue;
      const auto col = data.X().col(c).segment(data.unit_begin(i), T);
      const double var = (col.array() - m(i, c)).square().sum() / static_cast<double>(T);
      if (var >= tol) inv[c] = false;
    }
  }
  return inv;
}

inline std::vector<Index> time_varying_indices(const PanelDataset& data) {
  const auto inv = time_invariant_columns(data);
  std::vector<Index> out;
  for (Index c = 0; c < data.n_covariates(); ++c)
    if (!inv[c]) out.push_back(c);
  return out;
}

/// Within/between split of a design.
struct DecomposedDesign {
  MatrixXd within;   // N x p_w, deviations from unit means
  MatrixXd between;  // N x p_b, unit means expanded to observations
  std::vector<std::string> within_names;   // "within:<name>"
  std::vector<std::string> between_names;  // "between:<name>"
  std::vector<Index> within_source;        // original column of each within column
  std::vector<Index> between_source;
  std::vector<std::string> time_invariant;  // original names moved wholly to between
  std::vector<std::string> warnings;
};

namespace detail {

inline void constant_column_warnings(const MatrixXd& X, const std::vector<std::string>& names,
                                     std::vector<std::string>& out) {
  for (Index c = 0; c < X.cols(); ++c) {
    if (X.rows() == 0) break;
    if ((X.col(c).array() - X(0, c)).abs().maxCoeff() < 1e-12)
      out.push_back("collinearity: column '" + names[c] + "' is constant across the sample (confounded with intercept)");
  }
}

}  // namespace detail

inline DecomposedDesign decompose(const PanelDataset& data) {
  DecomposedDesign d;
  const MatrixXd m = unit_means(data);
  const auto inv = time_invariant_columns(data);
  const Index N = data.n_obs(), p = data.n_covariates();
  std::vector<Index> tv;
  for (Index c = 0; c < p; ++c) {
    if (inv[c])
      d.time_invariant.push_back(data.covariate_names()[c]);
    else
      tv.push_back(c);
  }
  d.within.resize(N, static_cast<Index>(tv.size()));
  d.between.resize(N, p);
  for (Index i = 0; i < data.n_units(); ++i) {
    for (Index j = data.unit_begin(i); j < data.unit_begin(i) + data.unit_size(i); ++j) {
      for (std::size_t a = 0; a < tv.size(); ++a) d.within(j, static_cast<Index>(a)) = data.X()(j, tv[a]) - m(i, tv[a]);
      d.between.row(j) = m.row(i);
    }
  }
  for (Index c : tv) {
    d.within_names.push_back("within:" + data.covariate_names()[c]);
    d.within_source.push_back(c);
  }
  for (Index c = 0; c < p; ++c) {
    d.between_names.push_back("between:" + data.covariate_names()[c]);
    d.between_source.push_back(c);
  }
  detail::constant_column_warnings(data.X(), data.covariate_names(), d.warnings);
  return d;
}

/// Panel whose design is [within | between]. Time-invariant columns appear
/// only in the between block. The intercept stays implicit.
struct QpPanel {
  PanelDataset panel;
  DecomposedDesign design;
};

inline QpPanel qp_transform(const PanelDataset& data) {
  DecomposedDesign d = decompose(data);
  MatrixXd X(data.n_obs(), d.within.cols() + d.between.cols());
  X << d.within, d.between;
  std::vector<std::string> names = d.within_names;
  names.insert(names.end(), d.between_names.begin(), d.between_names.end());
  return {data.with_design(std::move(X), std::move(names)), std::move(d)};
}

/// Original design augmented with unit means of its time-varying columns,
/// tagged "mean:<name>". Means of time-invariant columns would duplicate the
/// column itself and are not added.
struct MundlakPanel {
  PanelDataset panel;
  std::vector<Index> mean_columns;  // positions of the "mean:" columns in panel.X()
  std::vector<std::string> warnings;
};

inline MundlakPanel mundlak_augment(const PanelDataset& data) {
  const MatrixXd m = unit_means(data);
  const auto tv = time_varying_indices(data);
  const Index p = data.n_covariates();
  MatrixXd X(data.n_obs(), p + static_cast<Index>(tv.size()));
  X.leftCols(p) = data.X();
  for (Index i = 0; i < data.n_units(); ++i)
    for (Index j = data.unit_begin(i); j < data.unit_begin(i) + data.unit_size(i); ++j)
      for (std::size_t a = 0; a < tv.size(); ++a) X(j, p + static_cast<Index>(a)) = m(i, tv[a]);
  std::vector<std::string> names = data.covariate_names();
  MundlakPanel out;
  for (std::size_t a = 0; a < tv.size(); ++a) {
    names.push_back("mean:" + data.covariate_names()[tv[a]]);
    out.mean_columns.push_back(p + static_cast<Index>(a));
  }
  detail::constant_column_warnings(data.X(), data.covariate_names(), out.warnings);
  out.panel = data.with_design(std::move(X), std::move(names));
  return out;
}

}  // namespace mixpanel
