// Acceptance run: one PASS/FAIL line per criterion. Exit status 1 when any
// criterion fails. Optional arguments select criteria by number.

#include "mixpanel/mixpanel.hpp"

#include <chrono>
#include <cstdio>
#include <iostream>
#include <set>
#include <sstream>

using namespace mixpanel;

namespace {

struct Line {
  int id;
  bool pass;
  std::string text;
};

std::vector<Line> lines;

void report(int id, bool pass, const std::string& text) {
  lines.push_back({id, pass, text});
  std::printf("[%s] criterion %d: %s\n", pass ? "PASS" : "FAIL", id, text.c_str());
  std::fflush(stdout);
}

std::string fmt(double v, int prec = 4) {
  std::ostringstream s;
  s.setf(std::ios::fixed);
  s.precision(prec);
  s << v;
  return s.str();
}

std::string sci(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2e", v);
  return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

const MetricsRow& row(const StudyResult& r, const std::string& label) {
  const auto e = parse_estimators(label);
  const MetricsRow* m = r.find(e.at(0));
  if (!m) throw std::runtime_error("no metrics row for " + label);
  return *m;
}

std::string describe(const MetricsRow& m) {
  return m.estimator.label() + " bias=" + fmt(m.bias) + " (B=" + std::to_string(m.b_effective) + ")";
}

// scores of converged fits, for the gradient criterion
struct ScoreLog {
  int fits = 0;
  int missing = 0;
  double worst = 0.0;
  std::string worst_where;
  void add(const StudyResult& r, const std::string& study) {
    for (const auto& rep : r.replicates)
      for (const auto& [e, rec] : rep.estimates) {
        if (!rec.ok || !rec.converged || e.treatment == Treatment::FE) continue;
        ++fits;
        if (!std::isfinite(rec.score)) {
          ++missing;
          continue;
        }
        if (rec.score > worst) {
          worst = rec.score;
          worst_where = study + " replicate " + std::to_string(rep.index) + " " + e.label();
        }
      }
  }
};

ScoreLog scores;

StudyResult study(ScenarioConfig c, const std::string& estimators, const std::string& name) {
  c.score_check = true;
  const auto t0 = std::chrono::steady_clock::now();
  StudyResult r = run_study(c, parse_estimators(estimators), worker_count());
  std::printf("  (%s: %s %s n=%d T=%d B=%d, %.0f s)\n", name.c_str(), to_string(c.family).c_str(),
              to_string(c.scenario).c_str(), c.n, c.T, c.B, seconds_since(t0));
  for (const auto& w : r.warnings) std::printf("  warning: %s\n", w.c_str());
  scores.add(r, name);
  return r;
}

StudyResult run_all(const ScenarioConfig& c, const std::string& name) {
  std::string list;
  for (const auto& e : all_estimators(c.family)) list += (list.empty() ? "" : ",") + e.label();
  return study(c, list, name);
}

// ---------------------------------------------------------------------------

void criterion1() {
  ScenarioConfig c;
  c.family = Family::gaussian;
  c.scenario = Scenario::S1_3;
  c.n = 250;
  c.T = 10;
  c.B = 50;
  const StudyResult r = study(c, "FM:lik,COV:lik,FMQP:lik,PAR,PARQP", "criterion 1");
  const auto& fm = row(r, "FM:lik");
  const auto& cov = row(r, "COV:lik");
  const auto& qp = row(r, "FMQP:lik");
  const auto& par = row(r, "PAR");
  const auto& parqp = row(r, "PARQP");
  const bool ok = fm.bias >= 0.15 && fm.bias <= 0.35 && std::abs(cov.bias) <= 0.03 && std::abs(qp.bias) <= 0.03 &&
                  std::abs(parqp.bias) <= 0.02 && par.bias >= 0.15 && par.bias <= 0.35;
  report(1, ok,
         "gaussian S1.3 n=250 T=10 B=50: " + describe(fm) + " in [0.15,0.35]; " + describe(cov) + " |.|<=0.03; " +
             describe(qp) + " |.|<=0.03; " + describe(parqp) + " |.|<=0.02; " + describe(par) + " in [0.15,0.35]");
}

void criterion2() {
  ScenarioConfig c;
  c.family = Family::gaussian;
  c.scenario = Scenario::S1_1;
  c.n = 500;
  c.T = 10;
  c.B = 50;
  const StudyResult r = run_all(c, "criterion 2");
  bool ok = true;
  double worst = 0.0;
  std::string worst_label;
  for (const auto& m : r.rows) {
    if (m.coef != "beta1") continue;
    if (!(std::abs(m.bias) <= 0.03)) ok = false;
    if (!(std::abs(m.bias) <= worst)) {
      worst = std::abs(m.bias);
      worst_label = m.estimator.label();
    }
  }
  const auto& fm = row(r, "FM:lik");
  const auto& cov = row(r, "COV:lik");
  ok = ok && cov.ase <= fm.ase;
  report(2, ok,
         "gaussian S1.1 n=500 T=10 B=50: max |bias| over " + std::to_string(r.estimators.size()) +
             " estimators = " + fmt(worst) + " (" + worst_label + ") <= 0.03; ASE COV:lik=" + fmt(cov.ase, 5) +
             " <= FM:lik=" + fmt(fm.ase, 5));
}

void criterion3() {
  ScenarioConfig c;
  c.family = Family::bernoulli;
  c.scenario = Scenario::S1_3;
  c.n = 250;
  c.T = 10;
  c.B = 25;
  const auto t0 = std::chrono::steady_clock::now();
  const StudyResult r = study(c, "PAR,COV:lik,PARQP,FE", "criterion 3");
  const double secs = seconds_since(t0);
  const auto& par = row(r, "PAR");
  const auto& cov = row(r, "COV:lik");
  const auto& parqp = row(r, "PARQP");
  const auto& fe = row(r, "FE");
  const bool ok = par.bias >= 0.2 && std::abs(cov.bias) <= 0.06 && std::abs(parqp.bias) <= 0.06 && fe.bias > 0.0 &&
                  secs <= 45.0 * 60.0;
  report(3, ok,
         "bernoulli probit S1.3 n=250 T=10 B=25: " + describe(par) + " >= 0.2; " + describe(cov) + " |.|<=0.06; " +
             describe(parqp) + " |.|<=0.06; " + describe(fe) + " > 0; runtime " + fmt(secs / 60.0, 1) +
             " min <= 45");
}

void criterion4() {
  ScenarioConfig c;
  c.family = Family::gaussian;
  c.scenario = Scenario::S1_3;
  c.seed = 4004;
  double worst = 0.0;
  for (int b = 0; b < 20; ++b) {
    const Sample s = generate_sample(c, b);
    const FeFit fe = fe_gaussian_fit(s.data);
    ModelSpec spec;
    spec.treatment = Treatment::PARQP;
    const ModelFrame f = make_frame(s.data, spec);
    const FitResult r = agh_fit(f, spec);
    const auto& names = f.panel.covariate_names();
    const Index j = std::find(names.begin(), names.end(), "within:x") - names.begin();
    worst = std::max(worst, std::abs(r.params.beta(j) - fe.beta(0)) / std::abs(fe.beta(0)));
  }
  report(4, worst <= 1e-6,
         "20 balanced gaussian panels: max relative |PARQP within - FE| = " + sci(worst) + " <= 1e-6");
}

void criterion5() {
  std::mt19937_64 rng(5005);
  std::uniform_int_distribution<int> pick(0, 2);
  long iterations = 0;
  int violations = 0, fits = 0;
  double worst = 0.0;
  for (int a = 0; a < 200; ++a) {
    const Family fam = a % 2 ? Family::bernoulli : Family::gaussian;
    const Treatment tr = std::array{Treatment::FM, Treatment::FMQP, Treatment::COV}[pick(rng)];
    const int K = 2 + pick(rng);
    ScenarioConfig c;
    c.family = fam;
    c.scenario = a % 3 == 0 ? Scenario::S3 : Scenario::S1_2;
    c.n = 80;
    c.T = 5;
    c.seed = 5005 + a;
    const Sample s = generate_sample(c, 0);
    ModelSpec spec;
    spec.family = fam;
    spec.link = c.link();
    spec.treatment = tr;
    spec.n_starts = 3;
    spec.seed = 9000 + a;
    try {
      const FitResult r = fit_em(s.data, spec, K);
      ++fits;
      iterations += static_cast<long>(r.loglik_history.size());
      worst = std::max(worst, r.max_loglik_drop);
      if (r.max_loglik_drop > 1e-8) ++violations;
    } catch (const EstimationError& e) {
      // every start degenerated; the recorded runs are still checked through
      // the per-start diagnostics, which carry no histories
      std::printf("  note: fit %d (%s K=%d) failed: %s\n", a, to_string(tr).c_str(), K, e.what());
    }
  }
  report(5, violations == 0 && fits == 200,
         std::to_string(fits) + "/200 randomized fits, largest per-iteration loglik drop over all starts = " +
             sci(worst) + ", violations of -1e-8: " + std::to_string(violations));
}

// log-likelihood of a two-component gaussian mixture with sigma profiled out
double profiled_loglik(const PanelDataset& d, double z1, double z2, double b, double p1) {
  const Index n = d.n_units();
  std::vector<std::array<double, 2>> rss(static_cast<std::size_t>(n));
  for (Index i = 0; i < n; ++i) {
    double r1 = 0.0, r2 = 0.0;
    for (Index j = d.unit_begin(i); j < d.unit_begin(i) + d.unit_size(i); ++j) {
      const double e = d.y()(j) - b * d.X()(j, 0);
      r1 += (e - z1) * (e - z1);
      r2 += (e - z2) * (e - z2);
    }
    rss[i] = {r1, r2};
  }
  const double N = static_cast<double>(d.n_obs());
  const double lp1 = std::log(p1), lp2 = std::log(1.0 - p1);
  auto ll = [&](double ls) {
    const double s2 = std::exp(2.0 * ls);
    double t = -N * (ls + 0.5 * std::log(2.0 * std::numbers::pi));
    for (const auto& r : rss) {
      const double a = lp1 - r[0] / (2.0 * s2), c = lp2 - r[1] / (2.0 * s2);
      const double m = std::max(a, c);
      t += m + std::log(std::exp(a - m) + std::exp(c - m));
    }
    return t;
  };
  // coarse scan then golden section on log sigma
  double best = -1e300, at = 0.0;
  for (double ls = -7.0; ls <= 3.0; ls += 0.25) {
    const double v = ll(ls);
    if (v > best) {
      best = v;
      at = ls;
    }
  }
  double lo = at - 0.25, hi = at + 0.25;
  const double g = 0.5 * (std::sqrt(5.0) - 1.0);
  double x1 = hi - g * (hi - lo), x2 = lo + g * (hi - lo), f1 = ll(x1), f2 = ll(x2);
  for (int it = 0; it < 60; ++it) {
    if (f1 < f2) {
      lo = x1;
      x1 = x2;
      f1 = f2;
      x2 = lo + g * (hi - lo);
      f2 = ll(x2);
    } else {
      hi = x2;
      x2 = x1;
      f2 = f1;
      x1 = hi - g * (hi - lo);
      f1 = ll(x1);
    }
  }
  return std::max({best, f1, f2});
}

void criterion6() {
  std::mt19937_64 rng(6006);
  std::normal_distribution<double> nd;
  double worst = -1e300;
  int failures = 0;
  for (int inst = 0; inst < 25; ++inst) {
    const Index n = 3 + inst % 2, T = 2;
    const double z1 = -1.0, z2 = 1.0, b = 0.5, p1 = 0.5, sigma = 0.5;
    VectorXd y(n * T);
    MatrixXd X(n * T, 1);
    std::vector<std::string> ids;
    std::vector<Index> ou;
    for (Index i = 0; i < n; ++i) {
      ids.push_back("u" + std::to_string(i));
      const double z = std::uniform_real_distribution<double>(0.0, 1.0)(rng) < p1 ? z1 : z2;
      for (Index t = 0; t < T; ++t) {
        X(i * T + t, 0) = nd(rng);
        y(i * T + t) = z + b * X(i * T + t, 0) + sigma * nd(rng);
        ou.push_back(i);
      }
    }
    const PanelDataset d(ids, ou, y, X, {"x"});
    double grid = -1e300;
    for (int a = -12; a <= 12; ++a)
      for (int c = -12; c <= 12; ++c)
        for (int e = -12; e <= 12; ++e)
          for (int p = 1; p <= 19; ++p)
            grid = std::max(grid, profiled_loglik(d, z1 + 0.05 * a, z2 + 0.05 * c, b + 0.05 * e, 0.05 * p));
    ModelSpec spec;
    spec.seed = 6006 + inst;
    const FitResult r = fit_em(d, spec, 2);
    const double gap = r.loglik - grid;
    worst = std::max(worst, -gap);
    if (gap < -1e-3) ++failures;
  }
  report(6, failures == 0,
         "25 tiny gaussian instances (n<=4, T=2, K=2): largest (grid max - EM loglik) = " + sci(worst) +
             " <= 1e-3 on a 0.05 grid over (zeta1, zeta2, beta1, pi1) with sigma profiled");
}

void criterion7() {
  double worst = 0.0;
  for (int a = 0; a < 10; ++a) {
    ScenarioConfig c;
    c.family = a % 2 ? Family::bernoulli : Family::gaussian;
    c.scenario = Scenario::S3;
    c.n = 150;
    c.T = 5;
    c.seed = 7007 + a;
    const Sample s = generate_sample(c, 0);
    const int K = 2 + a % 2;
    ModelSpec fm;
    fm.family = c.family;
    fm.link = c.link();
    fm.treatment = Treatment::FM;
    fm.seed = 77 + a;
    ModelSpec cov = fm;
    cov.treatment = Treatment::COV;
    cov.weight_intercept_only = true;
    const FitResult r1 = fit_em(s.data, fm, K);
    const FitResult r2 = fit_em(s.data, cov, K);
    worst = std::max(worst, std::abs(r1.loglik - r2.loglik));
  }
  report(7, worst <= 1e-6,
         "10 datasets: max |loglik(COV, slopes fixed at 0) - loglik(FM)| = " + sci(worst) + " <= 1e-6");
}

double exchangeable_loglik(const PanelDataset& d, const VectorXd& th) {
  const double b0 = th(0), b1 = th(1), su2 = std::exp(2.0 * th(2)), se2 = std::exp(2.0 * th(3));
  double total = 0.0;
  for (Index i = 0; i < d.n_units(); ++i) {
    const Index T = d.unit_size(i);
    double rr = 0.0, rs = 0.0;
    for (Index j = d.unit_begin(i); j < d.unit_begin(i) + T; ++j) {
      const double r = d.y()(j) - b0 - b1 * d.X()(j, 0);
      rr += r * r;
      rs += r;
    }
    const double a = se2 + T * su2;
    total += -0.5 * (T * std::log(2.0 * std::numbers::pi) + (T - 1) * std::log(se2) + std::log(a) +
                     (rr - su2 * rs * rs / a) / se2);
  }
  return total;
}

void criterion8() {
  double gauss = 0.0, probit = 0.0;
  for (int a = 0; a < 10; ++a) {
    ScenarioConfig c;
    c.scenario = Scenario::S1_2;
    c.n = 100;
    c.T = 5;
    c.seed = 8008 + a;
    const Sample s = generate_sample(c, 0);
    ModelSpec spec;
    spec.treatment = Treatment::PAR;
    const ModelFrame f = make_frame(s.data, spec);
    const FitResult r = agh_fit(f, spec);
    const VectorXd th = agh_pack(r);
    gauss = std::max(gauss, std::abs(AghLikelihood(f.panel, f.fl, 15).loglik(th) - exchangeable_loglik(s.data, th)));

    c.family = Family::bernoulli;
    const Sample sb = generate_sample(c, 0);
    ModelSpec bs = spec;
    bs.family = Family::bernoulli;
    bs.link = Link::probit;
    const ModelFrame fb = make_frame(sb.data, bs);
    const VectorXd tb = agh_pack(agh_fit(fb, bs));
    probit = std::max(probit, std::abs(AghLikelihood(fb.panel, fb.fl, 15).loglik(tb) -
                                       AghLikelihood(fb.panel, fb.fl, 30).loglik(tb)));
  }
  report(8, gauss <= 1e-6 && probit < 1e-6,
         "10 panels (n=100, T=5): max |AGH - closed form| gaussian = " + sci(gauss) +
             " <= 1e-6; max |loglik(Q=15) - loglik(Q=30)| probit = " + sci(probit) + " < 1e-6");

  // the same check on longer panels, for the record
  double longer = 0.0;
  for (int a = 0; a < 10; ++a) {
    ScenarioConfig c;
    c.family = Family::bernoulli;
    c.scenario = Scenario::S1_3;
    const Sample s = generate_sample(c, a);
    ModelSpec spec;
    spec.family = Family::bernoulli;
    spec.link = Link::probit;
    spec.treatment = Treatment::PAR;
    const ModelFrame f = make_frame(s.data, spec);
    const VectorXd th = agh_pack(agh_fit(f, spec));
    longer = std::max(longer, std::abs(AghLikelihood(f.panel, f.fl, 15).loglik(th) -
                                       AghLikelihood(f.panel, f.fl, 30).loglik(th)));
  }
  std::printf("  info: probit S1.3 panels (n=250, T=10): max |loglik(Q=15) - loglik(Q=30)| = %s\n",
              sci(longer).c_str());
}

void criterion9() {
  report(9, scores.fits > 0 && scores.missing == 0 && scores.worst <= 1e-4,
         std::to_string(scores.fits) + " converged fits from criteria 1-3: max standardized score = " +
             sci(scores.worst) + (scores.worst_where.empty() ? "" : " (" + scores.worst_where + ")") +
             " <= 1e-4" + (scores.missing ? ", missing " + std::to_string(scores.missing) : ""));
}

void criterion10() {
  auto rate = [](Scenario sc, std::optional<std::pair<double, double>> rho, std::uint64_t seed) {
    ScenarioConfig c;
    c.scenario = sc;
    c.rho_interval = rho;
    c.n = 250;
    c.T = 10;
    c.seed = seed;
    ModelSpec spec;
    spec.treatment = Treatment::PAR;
    int rejected = 0, done = 0;
    for (int b = 0; b < 100; ++b) {
      const Sample s = generate_sample(c, b);
      try {
        const WaldTest w = mundlak_exogeneity_test(s.data, spec);
        ++done;
        if (w.pvalue < 0.05) ++rejected;
      } catch (const Error& e) {
        std::printf("  note: exogeneity test failed on replicate %d: %s\n", b, e.what());
      }
    }
    return std::pair(rejected, done);
  };
  const auto [r0, n0] = rate(Scenario::S1_1, std::pair(0.0, 0.0), 10010);
  const auto [r1, n1] = rate(Scenario::S1_3, std::nullopt, 10011);
  const double size = static_cast<double>(r0) / n0, power = static_cast<double>(r1) / n1;
  report(10, n0 == 100 && n1 == 100 && size >= 0.01 && size <= 0.12 && power >= 0.95,
         "gaussian n=250 T=10, 100 replicates each: size at rho=0 = " + fmt(size, 2) + " in [0.01,0.12]; power in S1.3 = " +
             fmt(power, 2) + " >= 0.95");
}

}  // namespace

int main(int argc, char** argv) {
  std::set<int> want;
  for (int a = 1; a < argc; ++a) want.insert(std::atoi(argv[a]));
  auto on = [&](int k) { return want.empty() || want.count(k); };
  const auto t0 = std::chrono::steady_clock::now();
  std::printf("acceptance run, %d worker thread(s)\n", worker_count());
  const std::vector<std::pair<int, void (*)()>> all{{1, criterion1}, {2, criterion2}, {3, criterion3},
                                                    {4, criterion4}, {5, criterion5}, {6, criterion6},
                                                    {7, criterion7}, {8, criterion8}, {10, criterion10}};
  for (const auto& [k, fn] : all) {
    if (!on(k)) continue;
    try {
      fn();
    } catch (const std::exception& e) {
      report(k, false, std::string("error: ") + e.what());
    }
  }
  if (on(9) && (on(1) || on(2) || on(3))) criterion9();
  int failed = 0;
  for (const auto& l : lines) failed += !l.pass;
  std::printf("%d of %zu criteria passed (%.0f s)\n", static_cast<int>(lines.size()) - failed, lines.size(),
              seconds_since(t0));
  return failed ? 1 : 0;
}
