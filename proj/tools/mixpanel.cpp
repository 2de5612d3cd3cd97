// mixpanel: fit, select-k, test-exogeneity and simulate from the command line.
//
// Settings come from built-in defaults, then an optional JSON --config, then
// flags; each layer overrides the previous one key by key.

#include "mixpanel/io.hpp"
#include "mixpanel/mixpanel.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <chrono>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>

using namespace mixpanel;
using nlohmann::ordered_json;
namespace fs = std::filesystem;

namespace {

// ---------------------------------------------------------------------------
// configuration
// ---------------------------------------------------------------------------

const std::vector<std::string> kStringKeys{"input",  "id_col", "time_col", "response", "covariates", "weight_covariates",
                                           "family", "link",   "treatment", "k_rule",  "scenario",   "out",
                                           "estimators"};
const std::vector<std::string> kIntKeys{"k", "k_max", "starts", "n", "t", "b", "max_iter", "quadrature_nodes"};
const std::vector<std::string> kOtherKeys{"seed", "em_tol", "weight_intercept_only"};

bool known_key(const std::string& k) {
  for (const auto* v : {&kStringKeys, &kIntKeys, &kOtherKeys})
    if (std::find(v->begin(), v->end(), k) != v->end()) return true;
  return false;
}

std::vector<std::string> split_list(const ordered_json& v) {
  std::vector<std::string> out;
  if (v.is_null()) return out;
  if (v.is_array()) {
    for (const auto& e : v) out.push_back(e.get<std::string>());
    return out;
  }
  std::stringstream ss(v.get<std::string>());
  std::string tok;
  while (std::getline(ss, tok, ',')) {
    tok = detail::trim(tok);
    if (!tok.empty()) out.push_back(tok);
  }
  return out;
}

struct Settings {
  ordered_json j = ordered_json::object();

  bool has(const std::string& k) const { return j.contains(k) && !j[k].is_null(); }
  std::string str(const std::string& k, const std::string& def = "") const {
    return has(k) ? j[k].get<std::string>() : def;
  }
  int integer(const std::string& k, int def) const { return has(k) ? j[k].get<int>() : def; }
};

void load_config(Settings& s, const std::string& path) {
  std::ifstream in(path);
  if (!in) throw SpecError("cannot open config '" + path + "'");
  ordered_json cfg;
  try {
    cfg = ordered_json::parse(in);
  } catch (const ordered_json::parse_error& e) {
    throw SpecError("config '" + path + "': " + e.what());
  }
  if (!cfg.is_object()) throw SpecError("config '" + path + "' must hold a JSON object");
  for (auto it = cfg.begin(); it != cfg.end(); ++it) {
    std::string key = it.key();
    std::replace(key.begin(), key.end(), '-', '_');
    if (!known_key(key)) throw SpecError("config '" + path + "': unknown key '" + it.key() + "'");
    s.j[key] = it.value();
  }
  // type checks up front so mistakes surface as usage errors
  for (const auto& k : kIntKeys)
    if (s.has(k) && !s.j[k].is_number_integer()) throw SpecError("config key '" + k + "' must be an integer");
  for (const auto& k : kStringKeys)
    if (s.has(k) && !s.j[k].is_string() && !(s.j[k].is_array() && (k == "covariates" || k == "weight_covariates")))
      throw SpecError("config key '" + k + "' must be a string");
  if (s.has("seed") && !s.j["seed"].is_number_unsigned() && !s.j["seed"].is_number_integer())
    throw SpecError("config key 'seed' must be a nonnegative integer");
  if (s.has("em_tol") && !s.j["em_tol"].is_number()) throw SpecError("config key 'em_tol' must be a number");
  if (s.has("weight_intercept_only") && !s.j["weight_intercept_only"].is_boolean())
    throw SpecError("config key 'weight_intercept_only' must be true or false");
}

std::uint64_t seed_of(const Settings& s, std::uint64_t def) {
  if (!s.has("seed")) return def;
  const auto& v = s.j["seed"];
  if (v.is_number_unsigned()) return v.get<std::uint64_t>();
  if (v.is_number_integer() && v.get<std::int64_t>() >= 0) return static_cast<std::uint64_t>(v.get<std::int64_t>());
  throw SpecError("seed must be a nonnegative integer");
}

ModelSpec model_spec(const Settings& s, bool select) {
  ModelSpec m;
  m.family = parse_family(s.str("family", "gaussian"));
  m.link = s.has("link") ? parse_link(s.str("link")) : (m.family == Family::gaussian ? Link::identity : Link::probit);
  m.treatment = parse_treatment(s.str("treatment", "FM"));
  m.k = s.integer("k", m.k);
  m.k_max = s.integer("k_max", m.k_max);
  if (s.has("k_rule"))
    m.k_rule = parse_k_rule(s.str("k_rule"));
  else
    m.k_rule = s.has("k") && !select ? KRule::fixed : KRule::lik_threshold;
  m.n_starts = s.integer("starts", m.n_starts);
  m.seed = seed_of(s, m.seed);
  m.max_iter = s.integer("max_iter", m.max_iter);
  m.quadrature_nodes = s.integer("quadrature_nodes", m.quadrature_nodes);
  if (s.has("em_tol")) m.em_tol = s.j["em_tol"].get<double>();
  m.weight_covariates = split_list(s.has("weight_covariates") ? s.j["weight_covariates"] : ordered_json());
  if (s.has("weight_intercept_only")) m.weight_intercept_only = s.j["weight_intercept_only"].get<bool>();
  if (m.k < 1) throw SpecError("k must be >= 1");
  if (m.k_max < 1) throw SpecError("k-max must be >= 1");
  if (m.n_starts < 1) throw SpecError("starts must be >= 1");
  if (m.max_iter < 1) throw SpecError("max-iter must be >= 1");
  if (m.quadrature_nodes < 1) throw SpecError("quadrature-nodes must be >= 1");
  if (!(m.em_tol > 0.0)) throw SpecError("em-tol must be positive");
  return m;
}

PanelDataset load_data(const Settings& s) {
  if (!s.has("input")) throw SpecError("--input is required");
  ColumnRoles roles;
  roles.id = s.str("id_col");
  roles.time = s.str("time_col");
  roles.response = s.str("response");
  roles.covariates = split_list(s.has("covariates") ? s.j["covariates"] : ordered_json());
  if (roles.id.empty()) throw SpecError("--id-col is required");
  if (roles.response.empty()) throw SpecError("--response is required");
  return ingest_csv(s.str("input"), roles);
}

// ---------------------------------------------------------------------------
// output helpers
// ---------------------------------------------------------------------------

std::string utc_timestamp() {
  const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

// 17 significant digits: enough to read every double back exactly
std::string num17(double v) {
  if (!std::isfinite(v)) return "NA";
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string num6(double v) {
  if (!std::isfinite(v)) return "";
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.6g", v);
  return buf;
}

ordered_json jnum(double v) { return std::isfinite(v) ? ordered_json(v) : ordered_json(); }

std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string q = "\"";
  for (char c : s) q += c == '"' ? std::string("\"\"") : std::string(1, c);
  return q + "\"";
}

fs::path out_dir(const Settings& s) {
  fs::path d = s.str("out", ".");
  fs::create_directories(d);
  return d;
}

void write_text(const fs::path& p, const std::string& text) {
  std::ofstream o(p, std::ios::binary);
  if (!o) throw DataError("cannot write '" + p.string() + "'");
  o << text;
}

// JSON numbers are emitted with 17 significant digits
std::string dump17(const ordered_json& j) {
  std::string out;
  std::function<void(const ordered_json&, int)> rec = [&](const ordered_json& v, int ind) {
    const std::string pad(static_cast<std::size_t>(ind) * 2, ' '), pad2(static_cast<std::size_t>(ind + 1) * 2, ' ');
    if (v.is_object()) {
      if (v.empty()) {
        out += "{}";
        return;
      }
      out += "{\n";
      bool first = true;
      for (auto it = v.begin(); it != v.end(); ++it) {
        if (!first) out += ",\n";
        first = false;
        out += pad2 + ordered_json(it.key()).dump() + ": ";
        rec(it.value(), ind + 1);
      }
      out += "\n" + pad + "}";
    } else if (v.is_array()) {
      if (v.empty()) {
        out += "[]";
        return;
      }
      bool scalars = std::all_of(v.begin(), v.end(), [](const ordered_json& e) { return e.is_primitive(); });
      if (scalars) {
        out += "[";
        for (std::size_t a = 0; a < v.size(); ++a) {
          if (a) out += ", ";
          rec(v[a], ind + 1);
        }
        out += "]";
        return;
      }
      out += "[\n";
      for (std::size_t a = 0; a < v.size(); ++a) {
        if (a) out += ",\n";
        out += pad2;
        rec(v[a], ind + 1);
      }
      out += "\n" + pad + "]";
    } else if (v.is_number_float()) {
      out += num17(v.get<double>());
    } else {
      out += v.dump();
    }
  };
  rec(j, 0);
  return out + "\n";
}

// ---------------------------------------------------------------------------
// fit
// ---------------------------------------------------------------------------

struct Term {
  std::string name;
  double estimate = 0.0;
  double se_observed = std::numeric_limits<double>::quiet_NaN();
  double se_sandwich = std::numeric_limits<double>::quiet_NaN();
  bool testable = true;  // a zero null makes sense for this parameter

  double pvalue() const { return testable ? wald_pvalue(estimate, se_sandwich) : std::numeric_limits<double>::quiet_NaN(); }
  std::string label() const { return significance_label(pvalue()); }
};

bool testable_name(const std::string& n) {
  return n.rfind("mass:", 0) != 0 && n != "sigma_e" && n != "sigma_u";
}

std::vector<Term> terms_from(const SEReport& se) {
  std::vector<Term> out;
  for (std::size_t a = 0; a < se.names.size(); ++a) {
    const Index j = static_cast<Index>(a);
    out.push_back({se.names[a], se.estimate(j), se.se_observed(j), se.se_sandwich(j), testable_name(se.names[a])});
  }
  return out;
}

std::string cell(const Term* t) {
  if (!t) return "";
  std::string s = num6(t->estimate);
  if (std::isfinite(t->se_sandwich)) s += " (" + num6(t->se_sandwich) + ")";
  const std::string l = t->label();
  return l.empty() ? s : s + " " + l;
}

void print_row(const std::vector<std::string>& cells, const std::vector<int>& widths) {
  for (std::size_t a = 0; a < cells.size(); ++a) std::printf("%-*s", widths[a], cells[a].c_str());
  std::printf("\n");
}

void print_terms(const std::vector<Term>& terms) {
  std::printf("\n%-28s%16s%16s%16s  %s\n", "term", "estimate", "se_observed", "se_sandwich", "sig");
  for (const auto& t : terms)
    std::printf("%-28s%16s%16s%16s  %s\n", t.name.c_str(), num6(t.estimate).c_str(), num6(t.se_observed).c_str(),
                num6(t.se_sandwich).c_str(), t.label().c_str());
}

// within and between effects side by side, one row per original covariate
void print_within_between(const std::vector<Term>& terms) {
  std::vector<std::string> vars;
  auto find = [&](const std::string& n) -> const Term* {
    for (const auto& t : terms)
      if (t.name == n) return &t;
    return nullptr;
  };
  for (const auto& t : terms)
    for (const std::string pre : {"within:", "between:"})
      if (t.name.rfind(pre, 0) == 0) {
        const std::string v = t.name.substr(pre.size());
        if (std::find(vars.begin(), vars.end(), v) == vars.end()) vars.push_back(v);
      }
  std::printf("\nwithin / between effects (sandwich SE; ** p<=0.05, * p<=0.10)\n");
  const std::vector<int> w{24, 34, 34};
  print_row({"covariate", "within", "between"}, w);
  for (const auto& v : vars) print_row({v, cell(find("within:" + v)), cell(find("between:" + v))}, w);
}

// prior-probability model: one column per component, reference left blank
void print_prior_table(const std::vector<Term>& terms, const FitResult& fit) {
  const Index K = fit.params.n_components();
  std::vector<std::string> rows{"(Intercept)"};
  for (const auto& w : fit.weight_names) rows.push_back(w);
  std::printf("\nprior probability model, multinomial logit (component %ld is the reference)\n", static_cast<long>(K));
  std::vector<int> w{24};
  std::vector<std::string> head{"term"};
  for (Index k = 1; k <= K; ++k) {
    head.push_back("component " + std::to_string(k));
    w.push_back(30);
  }
  print_row(head, w);
  for (const auto& r : rows) {
    std::vector<std::string> line{r};
    for (Index k = 1; k <= K; ++k) {
      const std::string name = "prior:" + std::to_string(k) + ":" + r;
      const Term* t = nullptr;
      for (const auto& x : terms)
        if (x.name == name) t = &x;
      line.push_back(cell(t));
    }
    print_row(line, w);
  }
}

ordered_json k_path_json(const std::vector<KPathEntry>& path) {
  ordered_json a = ordered_json::array();
  for (const auto& e : path)
    a.push_back({{"K", e.k}, {"loglik", jnum(e.loglik)}, {"npar", e.npar}, {"aic", jnum(e.aic)}, {"bic", jnum(e.bic)},
                 {"converged", e.converged}});
  return a;
}

ordered_json params_json(const FitResult& fit, const ModelFrame& f) {
  ordered_json p;
  const auto& m = fit.params;
  const auto& names = f.panel.covariate_names();
  ordered_json beta = ordered_json::object();
  for (Index j = 0; j < m.beta.size(); ++j) beta[names[j]] = jnum(m.beta(j));
  const bool agh = fit.treatment == Treatment::PAR || fit.treatment == Treatment::PARQP;
  if (agh || m.n_components() == 1) p["intercept"] = jnum(m.intercept);
  p["beta"] = beta;
  if (!agh) {
    p["zeta"] = std::vector<double>(m.zeta.data(), m.zeta.data() + m.zeta.size());
    if (const auto* c = std::get_if<ConstantWeights>(&m.weights)) {
      p["pi"] = std::vector<double>(c->pi.data(), c->pi.data() + c->pi.size());
    } else {
      const auto& g = std::get<LogisticWeights>(m.weights).gamma;
      ordered_json rows = ordered_json::array();
      for (Index k = 0; k < g.rows(); ++k) {
        std::vector<double> r;
        for (Index l = 0; l < g.cols(); ++l) r.push_back(g(k, l));
        rows.push_back(r);
      }
      std::vector<std::string> cols{"(Intercept)"};
      for (const auto& w : fit.weight_names) cols.push_back(w);
      p["gamma"] = {{"columns", cols}, {"rows", rows}, {"reference_component", m.n_components()}};
    }
  }
  if (f.gaussian()) p["sigma_e"] = jnum(m.sigma_e);
  if (agh) p["sigma_u"] = jnum(fit.sigma_u);
  return p;
}

void write_estimates(const fs::path& path, const std::vector<Term>& terms) {
  std::string s = "term,estimate,se_observed,se_sandwich,significance\n";
  for (const auto& t : terms)
    s += csv_field(t.name) + "," + num17(t.estimate) + "," + num17(t.se_observed) + "," + num17(t.se_sandwich) + "," +
         t.label() + "\n";
  write_text(path, s);
}

ordered_json terms_json(const std::vector<Term>& terms) {
  ordered_json a = ordered_json::array();
  for (const auto& t : terms)
    a.push_back({{"term", t.name},
                 {"estimate", jnum(t.estimate)},
                 {"se_observed", jnum(t.se_observed)},
                 {"se_sandwich", jnum(t.se_sandwich)},
                 {"pvalue", jnum(t.pvalue())},
                 {"significance", t.label()}});
  return a;
}

ordered_json base_json(const std::string& command, const Settings& s) {
  ordered_json j;
  j["command"] = command;
  j["timestamp"] = utc_timestamp();
  j["config"] = s.j;
  return j;
}

int cmd_fit(const Settings& s) {
  const PanelDataset data = load_data(s);
  ModelSpec spec = model_spec(s, false);
  validate(data, spec);
  const fs::path out = out_dir(s);
  ordered_json j = base_json("fit", s);
  j["seed"] = spec.seed;
  j["family"] = to_string(spec.family);
  j["link"] = to_string(spec.link);
  j["treatment"] = to_string(spec.treatment);
  j["n_units"] = data.n_units();
  j["n_obs"] = data.n_obs();
  j["balanced"] = data.balanced();

  std::vector<Term> terms;
  std::vector<std::string> flags;
  std::printf("%s %s/%s fit: n = %ld units, N = %ld observations\n", to_string(spec.treatment).c_str(),
              to_string(spec.family).c_str(), to_string(spec.link).c_str(), static_cast<long>(data.n_units()),
              static_cast<long>(data.n_obs()));

  if (spec.treatment == Treatment::FE) {
    const FeFit fe = spec.family == Family::gaussian ? fe_gaussian_fit(data) : fe_probit_fit(data, spec.link);
    for (std::size_t a = 0; a < fe.names.size(); ++a) {
      const Index i = static_cast<Index>(a);
      terms.push_back({fe.names[a], fe.beta(i), fe.se(i), fe.se_robust(i), true});
    }
    if (spec.family == Family::gaussian) terms.push_back({"sigma_e", fe.sigma_e, NAN, NAN, false});
    j["loglik"] = jnum(fe.loglik);
    j["npar"] = terms.size();
    j["incidental_parameters"] = data.n_units() - fe.dropped_units;
    j["dropped_units"] = fe.dropped_units;
    j["converged"] = fe.converged;
    j["terms"] = terms_json(terms);
    std::printf("loglik %s (unit effects profiled out)\n", num6(fe.loglik).c_str());
  } else {
    const ModelFrame f = make_frame(data, spec);
    FitResult fit;
    const bool mixture = spec.treatment == Treatment::FM || spec.treatment == Treatment::FMQP ||
                         spec.treatment == Treatment::COV;
    if (!mixture) {
      fit = agh_fit(f, spec);
    } else if (spec.k_rule == KRule::fixed) {
      fit = fit_em(f, spec, spec.k);
    } else {
      fit = select_k(f, spec);
    }
    fit.treatment = spec.treatment;
    for (const auto& w : f.warnings) flags.push_back(w);
    for (const auto& fl : fit.flags) flags.push_back(fl);
    double grad = std::numeric_limits<double>::quiet_NaN();
    try {
      const LikelihoodModel lm = likelihood_model(f, fit, spec);
      grad = standardized_gradient(lm);
      const SEReport se = standard_errors(lm);
      terms = terms_from(se);
      for (const auto& fl : se.flags) flags.push_back(fl);
      j["information_condition_number"] = jnum(se.condition_number);
    } catch (const EstimationError& e) {
      // estimates are still reported; standard errors are left empty
      flags.push_back(std::string("standard errors unavailable: ") + e.what());
      const LikelihoodModel lm = likelihood_model(f, fit, spec);
      const VectorXd est = lm.natural(lm.theta);
      for (std::size_t a = 0; a < lm.names.size(); ++a)
        terms.push_back({lm.names[a], est(static_cast<Index>(a)), NAN, NAN, testable_name(lm.names[a])});
    }
    const Index K = fit.params.n_components();
    if (mixture) {
      j["K"] = K;
      j["k_rule"] = to_string(spec.k_rule);
    }
    j["loglik"] = jnum(fit.loglik);
    j["npar"] = fit.npar;
    j["aic"] = jnum(fit.aic);
    j["bic"] = jnum(fit.bic);
    j["converged"] = fit.converged;
    j["iterations"] = fit.iterations;
    j["start_index"] = fit.start_index;
    j["standardized_gradient"] = jnum(grad);
    j["params"] = params_json(fit, f);
    j["terms"] = terms_json(terms);
    if (mixture) {
      std::vector<int> sizes(static_cast<std::size_t>(K), 0);
      for (int c : classify(fit.tau)) ++sizes[static_cast<std::size_t>(c - 1)];
      j["class_sizes"] = sizes;
      if (!fit.k_path.empty()) j["k_path"] = k_path_json(fit.k_path);
    }
    if (mixture) std::printf("K = %ld, ", static_cast<long>(K));
    std::printf("loglik %s, npar %d, AIC %s, BIC %s, %s after %d iterations\n", num6(fit.loglik).c_str(), fit.npar,
                num6(fit.aic).c_str(), num6(fit.bic).c_str(), fit.converged ? "converged" : "NOT converged",
                fit.iterations);
    if (terms.size() != static_cast<std::size_t>(fit.npar))
      flags.push_back("term count " + std::to_string(terms.size()) + " differs from npar " + std::to_string(fit.npar));
    print_terms(terms);
    if (spec.treatment == Treatment::FMQP || spec.treatment == Treatment::PARQP) print_within_between(terms);
    if (spec.treatment == Treatment::COV) print_prior_table(terms, fit);
  }
  if (spec.treatment == Treatment::FE) print_terms(terms);
  j["flags"] = flags;
  for (const auto& fl : flags) std::printf("note: %s\n", fl.c_str());
  write_estimates(out / "estimates.csv", terms);
  write_text(out / "model.json", dump17(j));
  std::printf("\nwrote %s and %s\n", (out / "model.json").string().c_str(), (out / "estimates.csv").string().c_str());
  return 0;
}

// ---------------------------------------------------------------------------
// select-k
// ---------------------------------------------------------------------------

int cmd_select_k(const Settings& s) {
  const PanelDataset data = load_data(s);
  ModelSpec spec = model_spec(s, true);
  if (spec.treatment != Treatment::FM && spec.treatment != Treatment::FMQP && spec.treatment != Treatment::COV)
    throw SpecError("select-k needs a mixture treatment (FM, FMQP or COV)");
  validate(data, spec);
  const ModelFrame f = make_frame(data, spec);
  const KPath path = fit_k_path(f, spec, false);
  const fs::path out = out_dir(s);
  std::string csv = "K,loglik,npar,AIC,BIC,converged,selected_lik,selected_aic,selected_bic\n";
  std::printf("%4s%18s%6s%18s%18s  %s\n", "K", "loglik", "npar", "AIC", "BIC", "selected by");
  for (const auto& fit : path.fits) {
    const int K = static_cast<int>(fit.params.n_components());
    const bool l = K == path.selected_lik, a = K == path.selected_aic, b = K == path.selected_bic;
    csv += std::to_string(K) + "," + num17(fit.loglik) + "," + std::to_string(fit.npar) + "," + num17(fit.aic) + "," +
           num17(fit.bic) + "," + (fit.converged ? "1" : "0") + "," + (l ? "1" : "0") + "," + (a ? "1" : "0") + "," +
           (b ? "1" : "0") + "\n";
    std::string by;
    for (const auto& [on, name] : {std::pair(l, "lik"), std::pair(a, "aic"), std::pair(b, "bic")})
      if (on) by += (by.empty() ? "" : ", ") + std::string(name);
    std::printf("%4d%18s%6d%18s%18s  %s\n", K, num6(fit.loglik).c_str(), fit.npar, num6(fit.aic).c_str(),
                num6(fit.bic).c_str(), by.c_str());
  }
  if (!path.lik_triggered) std::printf("note: the likelihood rule did not fire before k-max\n");
  write_text(out / "kpath.csv", csv);
  std::printf("wrote %s\n", (out / "kpath.csv").string().c_str());
  return 0;
}

// ---------------------------------------------------------------------------
// test-exogeneity
// ---------------------------------------------------------------------------

int cmd_test_exogeneity(const Settings& s) {
  const PanelDataset data = load_data(s);
  ModelSpec spec = model_spec(s, false);
  const WaldTest w = mundlak_exogeneity_test(data, spec);
  const fs::path out = out_dir(s);
  ordered_json j = base_json("test-exogeneity", s);
  j["seed"] = spec.seed;
  j["statistic"] = jnum(w.statistic);
  j["df"] = w.df;
  j["pvalue"] = jnum(w.pvalue);
  ordered_json d = ordered_json::array();
  for (std::size_t a = 0; a < w.names.size(); ++a) {
    const Index i = static_cast<Index>(a);
    d.push_back({{"term", w.names[a]}, {"estimate", jnum(w.delta(i))}, {"se_sandwich", jnum(std::sqrt(w.vcov(i, i)))}});
  }
  j["delta"] = d;
  j["converged"] = w.fit.converged;
  write_text(out / "exogeneity.json", dump17(j));
  std::printf("Mundlak-Wald test of exogeneity (sandwich covariance)\n");
  for (const auto& e : d)
    std::printf("  %-24s%14s  (%s)\n", e["term"].get<std::string>().c_str(), num6(e["estimate"].get<double>()).c_str(),
                num6(e["se_sandwich"].get<double>()).c_str());
  std::printf("W = %s on %d df, p = %s\n", num6(w.statistic).c_str(), w.df, num6(w.pvalue).c_str());
  std::printf("wrote %s\n", (out / "exogeneity.json").string().c_str());
  return 0;
}

// ---------------------------------------------------------------------------
// simulate
// ---------------------------------------------------------------------------

int cmd_simulate(const Settings& s) {
  ScenarioConfig c;
  c.family = parse_family(s.str("family", "gaussian"));
  c.scenario = parse_scenario(s.str("scenario", "S1_3"));
  c.n = s.integer("n", c.n);
  c.T = s.integer("t", c.T);
  c.B = s.integer("b", c.B);
  c.seed = seed_of(s, c.seed);
  c.n_starts = s.integer("starts", c.n_starts);
  c.k_max = s.integer("k_max", c.k_max);
  c.max_iter = s.integer("max_iter", c.max_iter);
  c.quadrature_nodes = s.integer("quadrature_nodes", c.quadrature_nodes);
  if (s.has("em_tol")) c.em_tol = s.j["em_tol"].get<double>();
  if (s.has("link") && parse_link(s.str("link")) != c.link())
    throw SpecError("simulate generates " + to_string(c.family) + " data with the " + to_string(c.link()) + " link");
  validate(c);
  const auto est = s.has("estimators") ? parse_estimators(s.str("estimators")) : all_estimators(c.family);
  const int threads = worker_count();
  std::printf("simulating %s %s: n = %d, T = %d, B = %d, %zu estimators, %d worker(s)\n", to_string(c.family).c_str(),
              to_string(c.scenario).c_str(), c.n, c.T, c.B, est.size(), threads);
  const StudyResult r = run_study(c, est, threads);
  const fs::path out = out_dir(s);

  std::string csv = "scenario,family,n,T,B_effective,estimator,criterion,coef,ASE,bias,sd\n";
  for (const auto& row : r.rows)
    csv += to_string(c.scenario) + "," + to_string(c.family) + "," + std::to_string(c.n) + "," + std::to_string(c.T) +
           "," + std::to_string(row.b_effective) + "," + to_string(row.estimator.treatment) + "," +
           (row.estimator.mixture() ? to_string(row.estimator.criterion) : "") + "," + row.coef + "," +
           num17(row.ase) + "," + num17(row.bias) + "," + num17(row.sd) + "\n";
  write_text(out / "metrics.csv", csv);

  ordered_json j = base_json("simulate", s);
  j["scenario_config"] = {{"family", to_string(c.family)},
                          {"link", to_string(c.link())},
                          {"scenario", to_string(c.scenario)},
                          {"n", c.n},
                          {"T", c.T},
                          {"B", c.B},
                          {"seed", c.seed},
                          {"beta0_range", {c.beta0_range.first, c.beta0_range.second}},
                          {"beta1_range", {c.beta1_range.first, c.beta1_range.second}},
                          {"rho_interval", {c.rho_range().first, c.rho_range().second}},
                          {"mu_x", c.mu_x},
                          {"r_x", c.r_x},
                          {"sigma_e", c.sigma_e},
                          {"sigma_u", c.sigma_u},
                          {"n_starts", c.n_starts},
                          {"k_max", c.k_max},
                          {"max_iter", c.max_iter},
                          {"em_tol", c.em_tol},
                          {"quadrature_nodes", c.quadrature_nodes}};
  std::vector<std::string> labels;
  for (const auto& e : r.estimators) labels.push_back(e.label());
  j["estimators"] = labels;
  ordered_json reps = ordered_json::array();
  for (const auto& rep : r.replicates) {
    ordered_json fits = ordered_json::object();
    for (const auto& [e, rec] : rep.estimates) {
      ordered_json x = {{"ok", rec.ok},       {"converged", rec.converged}, {"beta1", jnum(rec.beta1)},
                        {"beta0", jnum(rec.beta0)}, {"K", rec.k},         {"loglik", jnum(rec.loglik)}};
      if (!rec.message.empty()) x["message"] = rec.message;
      fits[e.label()] = x;
    }
    reps.push_back({{"replicate", rep.index},
                    {"beta0", jnum(rep.beta0)},
                    {"beta1", jnum(rep.beta1)},
                    {"rho", jnum(rep.rho)},
                    {"fits", fits}});
  }
  j["replicates"] = reps;
  j["warnings"] = r.warnings;
  write_text(out / "study.json", dump17(j));

  std::printf("\n%-10s%-6s%8s%6s%14s%14s%14s\n", "estimator", "rule", "coef", "B", "bias", "ASE", "sd");
  for (const auto& row : r.rows)
    std::printf("%-10s%-6s%8s%6d%14s%14s%14s\n", to_string(row.estimator.treatment).c_str(),
                row.estimator.mixture() ? to_string(row.estimator.criterion).c_str() : "", row.coef.c_str(),
                row.b_effective, num6(row.bias).c_str(), num6(row.ase).c_str(), num6(row.sd).c_str());
  for (const auto& w : r.warnings) std::printf("warning: %s\n", w.c_str());
  std::printf("wrote %s and %s\n", (out / "metrics.csv").string().c_str(), (out / "study.json").string().c_str());
  return 0;
}

// ---------------------------------------------------------------------------

int fail(int code, const std::string& type, const std::string& message, const std::vector<std::string>& details,
         const std::string& out) {
  ordered_json e = {{"error", {{"type", type}, {"message", message}, {"exit_code", code}}}};
  if (!details.empty()) e["error"]["details"] = details;
  std::cerr << e.dump(2) << std::endl;
  if (!out.empty()) {
    std::error_code ec;
    fs::create_directories(out, ec);
    if (!ec) {
      std::ofstream o(fs::path(out) / "error.json");
      o << e.dump(2) << "\n";
    }
  }
  return code;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Finite-mixture and random-effect models for longitudinal data"};
  app.require_subcommand(1, 1);
  app.fallthrough();

  std::string config;
  app.add_option("--config", config, "JSON file with any of the settings below; flags override it");
  std::map<std::string, std::string> flag_values;
  std::map<std::string, CLI::Option*> flag_opts;
  const std::vector<std::pair<std::string, std::string>> flags{
      {"input", "panel CSV (header row, comma separated)"},
      {"id-col", "unit identifier column"},
      {"time-col", "occasion column, used to order observations within units"},
      {"response", "response column"},
      {"covariates", "comma-separated covariates; a*b adds a product term (default: all other columns)"},
      {"weight-covariates", "covariates whose unit means enter the COV weight model (default: all time-varying)"},
      {"family", "gaussian | bernoulli"},
      {"link", "identity | logit | probit"},
      {"treatment", "FM | FMQP | COV | PAR | PARQP | FE"},
      {"k", "number of components (implies --k-rule fixed)"},
      {"k-rule", "fixed | lik | aic | bic"},
      {"k-max", "largest K searched"},
      {"starts", "EM starts per K"},
      {"seed", "random seed"},
      {"scenario", "simulation scenario: S1_1 S1_2 S1_3 S2 S3 S4"},
      {"n", "units per simulated sample"},
      {"t", "occasions per unit"},
      {"b", "replicates"},
      {"out", "output directory (default: current directory)"},
      {"estimators", "simulate: e.g. FM:lik,COV,PARQP (default: all)"},
      {"em-tol", "EM convergence tolerance on the log-likelihood"},
      {"max-iter", "EM iteration cap"},
      {"quadrature-nodes", "Gauss-Hermite nodes for PAR / PARQP"}};
  for (const auto& [name, help] : flags) flag_opts[name] = app.add_option("--" + name, flag_values[name], help);
  bool intercept_only = false;
  auto* io_flag = app.add_flag("--weight-intercept-only", intercept_only, "COV weights with intercepts only");

  auto* fit = app.add_subcommand("fit", "fit one model and report estimates with standard errors");
  auto* sel = app.add_subcommand("select-k", "fit K = 1..k-max and report every selection rule");
  auto* exo = app.add_subcommand("test-exogeneity", "Mundlak-Wald test of random-intercept exogeneity");
  auto* sim = app.add_subcommand("simulate", "run a replication study and write bias / ASE tables");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);
    return fail(1, "UsageError", e.what(), {}, "");
  }

  std::string out;
  try {
    Settings s;
    if (!config.empty()) load_config(s, config);
    for (const auto& [name, opt] : flag_opts) {
      if (!opt->count()) continue;
      std::string key = name;
      std::replace(key.begin(), key.end(), '-', '_');
      const std::string& v = flag_values[name];
      if (std::find(kIntKeys.begin(), kIntKeys.end(), key) != kIntKeys.end()) {
        try {
          std::size_t used = 0;
          const long long x = std::stoll(v, &used);
          if (used != v.size()) throw std::invalid_argument(v);
          s.j[key] = x;
        } catch (const std::exception&) {
          throw SpecError("--" + name + " expects an integer, got '" + v + "'");
        }
      } else if (key == "seed") {
        try {
          std::size_t used = 0;
          if (!v.empty() && v[0] == '-') throw std::invalid_argument(v);
          s.j[key] = static_cast<std::uint64_t>(std::stoull(v, &used));
          if (used != v.size()) throw std::invalid_argument(v);
        } catch (const std::exception&) {
          throw SpecError("--seed expects a nonnegative integer, got '" + v + "'");
        }
      } else if (key == "em_tol") {
        try {
          s.j[key] = std::stod(v);
        } catch (const std::exception&) {
          throw SpecError("--em-tol expects a number, got '" + v + "'");
        }
      } else {
        s.j[key] = v;
      }
    }
    if (io_flag->count()) s.j["weight_intercept_only"] = intercept_only;
    out = s.str("out", ".");
    if (*fit) return cmd_fit(s);
    if (*sel) return cmd_select_k(s);
    if (*exo) return cmd_test_exogeneity(s);
    if (*sim) return cmd_simulate(s);
    return fail(1, "UsageError", "no command given", {}, "");
  } catch (const SpecError& e) {
    return fail(1, "SpecError", e.what(), {}, out);
  } catch (const DataError& e) {
    return fail(2, "DataError", e.what(), {}, out);
  } catch (const SingularError& e) {
    return fail(3, "SingularError", e.what(), e.columns(), out);
  } catch (const EstimationError& e) {
    return fail(3, "EstimationError", e.what(), e.diagnostics(), out);
  } catch (const ordered_json::exception& e) {
    return fail(1, "SpecError", std::string("configuration: ") + e.what(), {}, out);
  } catch (const fs::filesystem_error& e) {
    return fail(2, "DataError", e.what(), {}, out);
  } catch (const std::exception& e) {
    return fail(3, "Error", e.what(), {}, out);
  }
}
