#include "mixpanel/em.hpp"
#include "test_util.hpp"

#include <gtest/gtest.h>

using namespace mixpanel;

namespace {

ModelFrame frame(const PanelDataset& d, Treatment tr = Treatment::FM, Family fam = Family::gaussian,
                 Link link = Link::identity) {
  ModelSpec s;
  s.family = fam;
  s.link = link;
  s.treatment = tr;
  return make_frame(d, s);
}

MixtureParams two_point(double z1, double z2, double p1, VectorXd beta, double sigma = 1.0) {
  MixtureParams m;
  m.beta = std::move(beta);
  m.zeta.resize(2);
  m.zeta << z1, z2;
  VectorXd pi(2);
  pi << p1, 1.0 - p1;
  m.weights = ConstantWeights{pi};
  m.sigma_e = sigma;
  return m;
}

}  // namespace

// ---------------------------------------------------------------------------
// e_step
// ---------------------------------------------------------------------------

TEST(EStep, SingleComponentIsPlainLikelihood) {
  std::mt19937_64 rng(1);
  auto d = testutil::random_panel(rng, 10, 3, Family::gaussian);
  auto f = frame(d);
  MixtureParams m;
  m.beta = VectorXd::Constant(1, 0.3);
  m.intercept = -0.2;
  m.zeta = VectorXd::Zero(1);
  m.sigma_e = 1.4;
  const EStep e = e_step(f, m);
  double direct = 0.0;
  for (Index j = 0; j < d.n_obs(); ++j)
    direct += log_density(f.fl, d.y()(j), -0.2 + 0.3 * d.X()(j, 0), 1.4);
  EXPECT_NEAR(e.loglik, direct, 1e-10);
  EXPECT_TRUE((e.tau.array() == 1.0).all());
}

TEST(EStep, IdenticalComponentsSplitEvenly) {
  std::mt19937_64 rng(2);
  auto f = frame(testutil::random_panel(rng, 8, 3, Family::gaussian));
  const EStep e = e_step(f, two_point(0.4, 0.4, 0.5, VectorXd::Constant(1, 0.1)));
  EXPECT_LE((e.tau.array() - 0.5).abs().maxCoeff(), 1e-15);
}

TEST(EStep, TinyHandCase) {
  VectorXd y = VectorXd::Zero(1);
  MatrixXd X(1, 0);
  auto f = frame(testutil::balanced_panel(1, 1, y, X));
  const EStep e = e_step(f, two_point(-1.0, 1.0, 0.5, VectorXd()));
  const double phi1 = std::exp(-0.5) / std::sqrt(2.0 * std::numbers::pi);
  EXPECT_NEAR(e.loglik, std::log(phi1), 1e-12);
  EXPECT_NEAR(e.loglik, -1.4189385, 1e-7);
  EXPECT_NEAR(e.tau(0, 0), 0.5, 1e-15);
}

TEST(EStep, NonFiniteUnitIsNamed) {
  VectorXd y(2);
  y << 0.0, 1.0;
  auto f = frame(testutil::balanced_panel(2, 1, y, MatrixXd(2, 0)));
  MixtureParams m = two_point(0.0, 1.0, 0.5, VectorXd());
  m.weights = ConstantWeights{VectorXd::Zero(2)};
  try {
    e_step(f, m);
    FAIL();
  } catch (const EstimationError& e) {
    EXPECT_NE(std::string(e.what()).find("'u0'"), std::string::npos);
  }
}

TEST(EStep, LabelPermutationLeavesLoglikUnchanged) {
  std::mt19937_64 rng(4);
  auto d = testutil::random_panel(rng, 40, 4, Family::bernoulli);
  ModelSpec s;
  s.family = Family::bernoulli;
  s.link = Link::probit;
  s.treatment = Treatment::COV;
  auto f = make_frame(d, s);
  MixtureParams m;
  m.beta = VectorXd::Constant(1, 0.4);
  m.zeta.resize(3);
  m.zeta << -1.0, 0.2, 1.3;
  MatrixXd g(2, 2);
  g << 0.3, -0.8, -0.5, 1.1;
  m.weights = LogisticWeights{g};
  const double base = e_step(f, m).loglik;
  // reverse the component order; reference becomes old component 0
  MixtureParams r = m;
  r.zeta << 1.3, 0.2, -1.0;
  MatrixXd L = full_logits(std::get<LogisticWeights>(m.weights), 3, 2);
  MatrixXd P(3, 2);
  P << L.row(2), L.row(1), L.row(0);
  r.weights = from_full_logits(P);
  EXPECT_NEAR(e_step(f, r).loglik, base, 1e-10);
  canonicalize(r, nullptr, 1);
  EXPECT_NEAR(e_step(f, r).loglik, base, 1e-10);
  EXPECT_LE((r.zeta - m.zeta).cwiseAbs().maxCoeff(), 1e-15);
}

TEST(EStep, LocationShiftIdentifiability) {
  std::mt19937_64 rng(6);
  auto f = frame(testutil::random_panel(rng, 30, 3, Family::gaussian));
  MixtureParams m = two_point(-0.7, 0.9, 0.35, VectorXd::Constant(1, 0.2), 0.9);
  m.intercept = 0.4;
  const double base = e_step(f, m).loglik;
  m.zeta.array() += 1.7;
  m.intercept -= 1.7;
  EXPECT_NEAR(e_step(f, m).loglik, base, 1e-10);
}

// ---------------------------------------------------------------------------
// M-steps
// ---------------------------------------------------------------------------

TEST(MStepLocations, SingleComponentIsGlm) {
  std::mt19937_64 rng(8);
  for (auto fam : {Family::gaussian, Family::bernoulli}) {
    auto d = testutil::random_panel(rng, 50, 4, fam);
    auto f = frame(d, Treatment::FM, fam, fam == Family::gaussian ? Link::identity : Link::logit);
    const MatrixXd tau = MatrixXd::Ones(d.n_units(), 1);
    auto ls = m_step_locations_beta(f, tau, VectorXd::Zero(1), VectorXd::Zero(1), 100);
    MatrixXd D(d.n_obs(), 2);
    D.col(0).setOnes();
    D.col(1) = d.X().col(0);
    auto g = weighted_glm_fit(d.y(), D, VectorXd::Ones(d.n_obs()), VectorXd::Zero(d.n_obs()), f.fl);
    EXPECT_NEAR(ls.zeta(0), g.coef(0), 1e-8);
    EXPECT_NEAR(ls.beta(0), g.coef(1), 1e-8);
  }
}

TEST(MStepLocations, EmptyComponentSignalsCollapse) {
  std::mt19937_64 rng(9);
  auto d = testutil::random_panel(rng, 10, 3, Family::gaussian);
  MatrixXd tau = MatrixXd::Zero(10, 2);
  tau.col(0).setOnes();
  auto ls = m_step_locations_beta(frame(d), tau, VectorXd::Zero(1), VectorXd::Zero(2));
  EXPECT_TRUE(ls.collapsed);
  EXPECT_EQ(ls.empty_component, 1);
}

TEST(MStepLocations, HardAssignmentGivesGroupIntercepts) {
  // two units, one per component, intercept only: zeta_k = group mean
  VectorXd y(6);
  y << 1, 2, 3, 10, 12, 14;
  auto d = testutil::balanced_panel(2, 3, y, MatrixXd(6, 0));
  MatrixXd tau(2, 2);
  tau << 1, 0, 0, 1;
  auto ls = m_step_locations_beta(frame(d), tau, VectorXd(), VectorXd::Zero(2));
  EXPECT_NEAR(ls.zeta(0), 2.0, 1e-12);
  EXPECT_NEAR(ls.zeta(1), 12.0, 1e-12);
}

TEST(MStepLocations, HardAssignmentWithSharedSlope) {
  // oracle: OLS of y on [group dummies | x] over the pooled sample
  std::mt19937_64 rng(10);
  auto d = testutil::random_panel(rng, 6, 4, Family::gaussian);
  MatrixXd tau = MatrixXd::Zero(6, 2);
  for (Index i = 0; i < 6; ++i) tau(i, i % 2) = 1.0;
  auto ls = m_step_locations_beta(frame(d), tau, VectorXd::Zero(1), VectorXd::Zero(2));
  MatrixXd D = MatrixXd::Zero(d.n_obs(), 3);
  for (Index j = 0; j < d.n_obs(); ++j) {
    D(j, d.obs_unit()[j] % 2) = 1.0;
    D(j, 2) = d.X()(j, 0);
  }
  const VectorXd c = D.colPivHouseholderQr().solve(d.y());
  EXPECT_NEAR(ls.zeta(0), c(0), 1e-10);
  EXPECT_NEAR(ls.zeta(1), c(1), 1e-10);
  EXPECT_NEAR(ls.beta(0), c(2), 1e-10);
}

TEST(MStepSigma, ExactFitIsDegenerate) {
  VectorXd y(4);
  y << 1, 1, 3, 3;
  auto d = testutil::balanced_panel(2, 2, y, MatrixXd(4, 0));
  MatrixXd tau(2, 2);
  tau << 1, 0, 0, 1;
  VectorXd z(2);
  z << 1, 3;
  EXPECT_THROW(m_step_sigma(frame(d), tau, VectorXd(), z), EstimationError);
}

TEST(MStepSigma, SingleComponentIsRssOverN) {
  std::mt19937_64 rng(12);
  auto d = testutil::random_panel(rng, 20, 3, Family::gaussian);
  const VectorXd r = d.y() - (0.1 + 0.5 * d.X().col(0).array()).matrix();
  const double s = m_step_sigma(frame(d), MatrixXd::Ones(20, 1), VectorXd::Constant(1, 0.5), VectorXd::Constant(1, 0.1));
  EXPECT_NEAR(s * s, r.squaredNorm() / d.n_obs(), 1e-12);
}

TEST(MStepSigma, HardGroupsWithUnitResiduals) {
  VectorXd y(4);
  y << 0, 2, 4, 6;
  auto d = testutil::balanced_panel(2, 2, y, MatrixXd(4, 0));
  MatrixXd tau(2, 2);
  tau << 1, 0, 0, 1;
  VectorXd z(2);
  z << 1, 5;
  EXPECT_NEAR(m_step_sigma(frame(d), tau, VectorXd(), z), 1.0, 1e-14);
}

TEST(MStepWeightsConstant, Counting) {
  MatrixXd t1(2, 2);
  t1 << 1, 0, 0, 1;
  EXPECT_NEAR(m_step_weights_constant(t1)(0), 0.5, 1e-15);
  MatrixXd t2(4, 2);
  t2.col(0).setConstant(0.3);
  t2.col(1).setConstant(0.7);
  EXPECT_NEAR(m_step_weights_constant(t2)(1), 0.7, 1e-15);
  MatrixXd t3(3, 2);
  t3 << 1, 0, 1, 0, 0, 1;
  EXPECT_NEAR(m_step_weights_constant(t3)(0), 2.0 / 3.0, 1e-15);
  EXPECT_NEAR(m_step_weights_constant(t3)(1), 1.0 / 3.0, 1e-15);
}

TEST(MStepWeightsLogit, ConstantTauGivesLogRatios) {
  const Index n = 50;
  MatrixXd tau(n, 3);
  tau.col(0).setConstant(0.2);
  tau.col(1).setConstant(0.5);
  tau.col(2).setConstant(0.3);
  MatrixXd Z(n, 1);
  for (Index i = 0; i < n; ++i) Z(i, 0) = std::sin(1.7 * i);
  auto s = m_step_weights_logit(tau, Z);
  EXPECT_TRUE(s.converged);
  EXPECT_NEAR(s.gamma(0, 0), std::log(0.2 / 0.3), 1e-8);
  EXPECT_NEAR(s.gamma(1, 0), std::log(0.5 / 0.3), 1e-8);
  EXPECT_NEAR(s.gamma(0, 1), 0.0, 1e-8);
  EXPECT_NEAR(s.gamma(1, 1), 0.0, 1e-8);
}

TEST(MStepWeightsLogit, RecoversGeneratingLogistic) {
  // tau_i2 = logistic(z_i); with component 2 as reference, component 1 has
  // logit -z_i relative to it, so gamma row 0 = (0, -1).
  const Index n = 200;
  MatrixXd Z(n, 1), tau(n, 2);
  for (Index i = 0; i < n; ++i) {
    Z(i, 0) = -3.0 + 6.0 * i / (n - 1.0);
    tau(i, 1) = 1.0 / (1.0 + std::exp(-Z(i, 0)));
    tau(i, 0) = 1.0 - tau(i, 1);
  }
  auto s = m_step_weights_logit(tau, Z);
  EXPECT_NEAR(s.gamma(0, 0), 0.0, 1e-6);
  EXPECT_NEAR(s.gamma(0, 1), -1.0, 1e-6);
  // with the columns swapped the reference flips and gamma = (0, 1)
  MatrixXd sw(n, 2);
  sw << tau.col(1), tau.col(0);
  auto t = m_step_weights_logit(sw, Z);
  EXPECT_NEAR(t.gamma(0, 0), 0.0, 1e-6);
  EXPECT_NEAR(t.gamma(0, 1), 1.0, 1e-6);
}

TEST(MStepWeightsLogit, InterceptOnlyMatchesConstantWeights) {
  std::mt19937_64 rng(13);
  std::uniform_real_distribution<double> ud(0.05, 1.0);
  MatrixXd tau(40, 4);
  for (Index i = 0; i < 40; ++i) {
    for (Index k = 0; k < 4; ++k) tau(i, k) = ud(rng);
    tau.row(i) /= tau.row(i).sum();
  }
  auto s = m_step_weights_logit(tau, MatrixXd(40, 0));
  const VectorXd pi = m_step_weights_constant(tau);
  VectorXd lp(4);
  log_prior_row(LogisticWeights{s.gamma}, 4, nullptr, 0, lp.data());
  for (Index k = 0; k < 4; ++k) EXPECT_NEAR(std::exp(lp(k)), pi(k), 1e-8);
}

TEST(MStepWeightsLogit, SeparationTriggersRidge) {
  const Index n = 20;
  MatrixXd Z(n, 1), tau = MatrixXd::Zero(n, 2);
  for (Index i = 0; i < n; ++i) {
    Z(i, 0) = i - 9.5;
    tau(i, Z(i, 0) > 0 ? 1 : 0) = 1.0;
  }
  auto s = m_step_weights_logit(tau, Z);
  EXPECT_TRUE(s.ridge);
  EXPECT_TRUE(s.gamma.allFinite());
}

// Component 1 is separated by z while 2 and 3 mix. The ridge refit trails the
// unpenalized step there; keeping it would stall EM short of stationarity.
TEST(MStepWeightsLogit, SeparationKeepsTheBetterStep) {
  const Index n = 20;
  MatrixXd Z(n, 1), tau = MatrixXd::Zero(n, 3);
  for (Index i = 0; i < n; ++i) {
    Z(i, 0) = 0.01 * (i - 9.5);
    if (Z(i, 0) < 0) {
      tau(i, 0) = 1.0;
    } else {
      tau(i, 1) = 0.3;
      tau(i, 2) = 0.7;
    }
  }
  MatrixXd start = m_step_weights_logit(tau, Z).gamma;
  start(1, 0) += 1.0;
  const auto s = m_step_weights_logit(tau, Z, start);
  const auto plain = detail::newton_logit(tau, Z, start, 0.0, 100, 1e-8);
  const double f0 = detail::logit_objective(tau, Z, start, 0.0, nullptr, nullptr);
  const double f1 = detail::logit_objective(tau, Z, s.gamma, 0.0, nullptr, nullptr);
  const double fp = detail::logit_objective(tau, Z, plain.gamma, 0.0, nullptr, nullptr);
  EXPECT_TRUE(s.ridge);
  EXPECT_GT(fp, f0);
  EXPECT_GE(f1, fp);
}

// ---------------------------------------------------------------------------
// initialize
// ---------------------------------------------------------------------------

TEST(Initialize, DeterministicPerSeedAndStart) {
  std::mt19937_64 rng(14);
  auto f = frame(testutil::random_panel(rng, 30, 3, Family::gaussian));
  ModelSpec s;
  const Baseline b = fit_baseline(f);
  auto a = initialize(f, b, s, 3, 4);
  auto c = initialize(f, b, s, 3, 4);
  EXPECT_EQ(a.zeta, c.zeta);
  EXPECT_EQ(a.beta, c.beta);
  auto other = initialize(f, b, s, 3, 5);
  EXPECT_NE(a.zeta, other.zeta);
}

TEST(Initialize, SingleComponentIsUnjitteredGlm) {
  std::mt19937_64 rng(15);
  auto f = frame(testutil::random_panel(rng, 30, 3, Family::gaussian));
  const Baseline b = fit_baseline(f);
  auto m = initialize(f, b, ModelSpec{}, 1, 0);
  EXPECT_EQ(m.beta, b.beta);
  EXPECT_EQ(m.intercept, b.intercept);
}

TEST(Initialize, SeparatedUnitMeansGiveOpposedLocations) {
  // half the units around -3, half around +3, no covariates
  const Index n = 20, T = 4;
  VectorXd y(n * T);
  for (Index i = 0; i < n; ++i)
    for (Index t = 0; t < T; ++t) y(i * T + t) = (i < n / 2 ? -3.0 : 3.0) + 0.1 * ((t % 2) ? 1 : -1);
  auto f = frame(testutil::balanced_panel(n, T, y, MatrixXd(n * T, 0)));
  const Baseline b = fit_baseline(f);
  auto m = initialize(f, b, ModelSpec{}, 2, 0);
  EXPECT_LT(m.zeta(0), 0.0);
  EXPECT_GT(m.zeta(1), 0.0);
  // type-7 quantiles of {-3 x10, 3 x10} at 1/3 and 2/3
  EXPECT_NEAR(m.zeta(0), -3.0, 1e-12);
  EXPECT_NEAR(m.zeta(1), 3.0, 1e-12);
}

// ---------------------------------------------------------------------------
// fit_em
// ---------------------------------------------------------------------------

TEST(FitEm, SingleComponentGaussianIsOls) {
  std::mt19937_64 rng(16);
  auto d = testutil::random_panel(rng, 40, 5, Family::gaussian);
  ModelSpec s;
  auto r = fit_em(d, s, 1);
  MatrixXd D(d.n_obs(), 2);
  D.col(0).setOnes();
  D.col(1) = d.X().col(0);
  const VectorXd c = D.colPivHouseholderQr().solve(d.y());
  const double s2 = (d.y() - D * c).squaredNorm() / d.n_obs();
  EXPECT_NEAR(r.params.intercept, c(0), 1e-8);
  EXPECT_NEAR(r.params.beta(0), c(1), 1e-8);
  EXPECT_NEAR(r.params.sigma_e, std::sqrt(s2), 1e-8);
  EXPECT_EQ(r.npar, 3);
}

TEST(FitEm, LoglikHistoryIsMonotone) {
  std::mt19937_64 rng(17);
  for (auto fam : {Family::gaussian, Family::bernoulli}) {
    auto d = testutil::random_panel(rng, 80, 5, fam, -0.4, 0.5, 0.3, 1.0, 1.0, true);
    ModelSpec s;
    s.family = fam;
    s.link = fam == Family::gaussian ? Link::identity : Link::probit;
    s.n_starts = 3;
    for (int K : {2, 3}) {
      auto r = fit_em(d, s, K);
      EXPECT_LE(r.max_loglik_drop, 1e-8) << to_string(fam) << " K=" << K;
      for (std::size_t i = 1; i < r.loglik_history.size(); ++i)
        EXPECT_GE(r.loglik_history[i], r.loglik_history[i - 1] - 1e-8);
      EXPECT_TRUE(std::is_sorted(r.params.zeta.data(), r.params.zeta.data() + K));
    }
  }
}

TEST(FitEm, CovWithInterceptOnlyWeightsMatchesFm) {
  std::mt19937_64 rng(18);
  auto d = testutil::random_panel(rng, 60, 4, Family::gaussian, -0.4, 0.5, 0.0, 1.0, 0.7, true);
  ModelSpec fm;
  fm.n_starts = 4;
  fm.em_tol = 1e-12;
  fm.max_iter = 5000;
  ModelSpec cov = fm;
  cov.treatment = Treatment::COV;
  cov.weight_intercept_only = true;
  for (int K : {2, 3}) {
    auto a = fit_em(d, fm, K);
    auto b = fit_em(d, cov, K);
    EXPECT_NEAR(a.loglik, b.loglik, 1e-6) << "K=" << K;
  }
}

TEST(FitEm, DetectsTwoPointHeterogeneity) {
  std::mt19937_64 rng(19);
  auto d = testutil::random_panel(rng, 300, 6, Family::gaussian, -0.4, 0.5, 0.0, 1.0, 0.5, true);
  ModelSpec s;
  s.n_starts = 3;
  auto r = fit_em(d, s, 2);
  EXPECT_NEAR(r.params.beta(0), 0.5, 0.05);
  EXPECT_NEAR(r.params.zeta(0), -1.9, 0.15);
  EXPECT_NEAR(r.params.zeta(1), 0.6, 0.15);
}

TEST(SelectK, PathIsNondecreasingAndAicAtLeastBic) {
  for (int rep = 0; rep < 10; ++rep) {
    std::mt19937_64 rng(100 + rep);
    auto d = testutil::random_panel(rng, 80, 5, Family::gaussian, -0.4, 0.5, 0.4);
    ModelSpec s;
    s.n_starts = 2;
    s.k_max = 4;
    auto path = fit_k_path(make_frame(d, s), s, false);
    for (std::size_t k = 1; k < path.fits.size(); ++k)
      EXPECT_GE(path.fits[k].loglik, path.fits[k - 1].loglik - 1e-6) << "rep " << rep;
    EXPECT_GE(path.selected_aic, path.selected_bic);
  }
}

TEST(SelectK, BicPrefersOneComponentWithoutHeterogeneity) {
  int ones = 0;
  for (int rep = 0; rep < 20; ++rep) {
    std::mt19937_64 rng(500 + rep);
    auto d = testutil::random_panel(rng, 100, 5, Family::gaussian, -0.4, 0.5, 0.0, 0.0, 1.0);
    ModelSpec s;
    s.k_rule = KRule::bic;
    s.n_starts = 2;
    s.k_max = 3;
    if (select_k(d, s).params.n_components() == 1) ++ones;
  }
  EXPECT_GE(ones, 16);
}

TEST(SelectK, KmaxWithoutTriggerIsFlagged) {
  std::mt19937_64 rng(21);
  auto d = testutil::random_panel(rng, 100, 5, Family::gaussian, -0.4, 0.5, 0.0, 1.0, 0.3, true);
  ModelSpec s;
  s.k_rule = KRule::lik_threshold;
  s.k_max = 1;
  EXPECT_TRUE(select_k(d, s).has_flag("k_max_reached"));
}
