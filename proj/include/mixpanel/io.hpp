#pragma once

#include "mixpanel/core.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

namespace mixpanel {

/// Header plus string cells; `line[r]` is the 1-based file line of row r.
struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;
  std::vector<int> line;

  int column(const std::string& name) const {
    for (std::size_t c = 0; c < header.size(); ++c)
      if (header[c] == name) return static_cast<int>(c);
    return -1;
  }
};

namespace detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

// one record; double quotes may wrap a field and "" escapes a quote
inline std::vector<std::string> split_record(const std::string& text, int line) {
  std::vector<std::string> out;
  std::string cur;
  bool quoted = false, was_quoted = false;
  for (std::size_t a = 0; a < text.size(); ++a) {
    const char ch = text[a];
    if (quoted) {
      if (ch == '"' && a + 1 < text.size() && text[a + 1] == '"') {
        cur += '"';
        ++a;
      } else if (ch == '"') {
        quoted = false;
      } else {
        cur += ch;
      }
    } else if (ch == '"') {
      quoted = was_quoted = true;
    } else if (ch == ',') {
      out.push_back(was_quoted ? cur : trim(cur));
      cur.clear();
      was_quoted = false;
    } else {
      cur += ch;
    }
  }
  if (quoted) throw DataError("line " + std::to_string(line) + ": unterminated quoted field");
  out.push_back(was_quoted ? cur : trim(cur));
  return out;
}

inline bool is_missing(const std::string& s) {
  return s.empty() || s == "NA" || s == "na" || s == "N/A" || s == "NaN" || s == "nan" || s == "." || s == "null";
}

}  // namespace detail

inline CsvTable read_csv(std::istream& in) {
  CsvTable t;
  std::string text;
  int line = 0;
  bool have_header = false;
  while (std::getline(in, text)) {
    ++line;
    if (!text.empty() && text.back() == '\r') text.pop_back();
    if (line == 1 && text.size() >= 3 && text.compare(0, 3, "\xEF\xBB\xBF") == 0) text.erase(0, 3);
    if (detail::trim(text).empty()) continue;
    auto cells = detail::split_record(text, line);
    if (!have_header) {
      for (std::size_t c = 0; c < cells.size(); ++c) {
        if (cells[c].empty()) throw DataError("line " + std::to_string(line) + ": empty header in column " + std::to_string(c + 1));
        for (std::size_t d = 0; d < c; ++d)
          if (cells[d] == cells[c]) throw DataError("line " + std::to_string(line) + ": duplicate header '" + cells[c] + "'");
      }
      t.header = std::move(cells);
      have_header = true;
      continue;
    }
    if (cells.size() != t.header.size())
      throw DataError("line " + std::to_string(line) + ": expected " + std::to_string(t.header.size()) + " fields, found " +
                      std::to_string(cells.size()));
    t.rows.push_back(std::move(cells));
    t.line.push_back(line);
  }
  if (!have_header) throw DataError("missing header row");
  return t;
}

inline CsvTable read_csv_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open '" + path + "'");
  return read_csv(in);
}

/// Which CSV columns play which part. Covariates may name products "a*b",
/// which are appended as derived columns. An empty covariate list takes
/// every column other than id, time and response.
struct ColumnRoles {
  std::string id;
  std::string time;  // optional
  std::string response;
  std::vector<std::string> covariates;
};

inline double parse_number(const std::string& cell, int line, const std::string& column) {
  if (detail::is_missing(cell))
    throw DataError("line " + std::to_string(line) + ", column '" + column + "': missing value" +
                    (cell.empty() ? std::string() : " '" + cell + "'"));
  double v = 0.0;
  const char* b = cell.data();
  const char* e = b + cell.size();
  if (*b == '+') ++b;
  const auto [p, ec] = std::from_chars(b, e, v);
  if (ec != std::errc() || p != e || !std::isfinite(v))
    throw DataError("line " + std::to_string(line) + ", column '" + column + "': cannot parse '" + cell + "' as a number");
  return v;
}

/// Groups rows by id (units in order of first appearance) and sorts each
/// unit by the time column when one is given.
inline PanelDataset to_panel(const CsvTable& t, const ColumnRoles& roles) {
  auto need = [&](const std::string& name, const std::string& role) {
    const int c = t.column(name);
    if (c < 0) throw DataError(role + " column '" + name + "' not found in header");
    return c;
  };
  if (roles.id.empty()) throw SpecError("the id column is required");
  if (roles.response.empty()) throw SpecError("the response column is required");
  const int cid = need(roles.id, "id");
  const int cy = need(roles.response, "response");
  const int ct = roles.time.empty() ? -1 : need(roles.time, "time");

  std::vector<std::string> covs = roles.covariates;
  if (covs.empty())
    for (std::size_t c = 0; c < t.header.size(); ++c)
      if (static_cast<int>(c) != cid && static_cast<int>(c) != cy && static_cast<int>(c) != ct) covs.push_back(t.header[c]);
  std::vector<std::vector<int>> factors;
  for (const auto& name : covs) {
    std::vector<int> f;
    if (t.column(name) >= 0) {
      factors.push_back({t.column(name)});
      continue;
    }
    std::stringstream ss(name);
    std::string part;
    while (std::getline(ss, part, '*')) f.push_back(need(detail::trim(part), "covariate"));
    if (f.empty()) throw SpecError("empty covariate term");
    factors.push_back(std::move(f));
  }

  const Index N = static_cast<Index>(t.rows.size());
  if (N == 0) throw DataError("no data rows");
  std::vector<std::string> ids;
  std::map<std::string, Index> unit_of;
  std::vector<Index> ou(static_cast<std::size_t>(N));
  std::vector<int> time(static_cast<std::size_t>(N), 0);
  VectorXd y(N);
  MatrixXd X(N, static_cast<Index>(covs.size()));
  std::map<std::pair<Index, int>, int> seen;
  for (Index r = 0; r < N; ++r) {
    const auto& row = t.rows[r];
    const int line = t.line[r];
    const std::string& id = row[cid];
    if (detail::is_missing(id)) throw DataError("line " + std::to_string(line) + ", column '" + roles.id + "': missing id");
    auto [it, fresh] = unit_of.emplace(id, static_cast<Index>(ids.size()));
    if (fresh) ids.push_back(id);
    ou[r] = it->second;
    y(r) = parse_number(row[cy], line, roles.response);
    if (ct >= 0) {
      const double tv = parse_number(row[ct], line, roles.time);
      if (tv != std::round(tv) || std::abs(tv) > 1e9)
        throw DataError("line " + std::to_string(line) + ", column '" + roles.time + "': time must be an integer");
      time[r] = static_cast<int>(tv);
      const auto [d, ok] = seen.emplace(std::pair(ou[r], time[r]), line);
      if (!ok)
        throw DataError("line " + std::to_string(line) + ": duplicate (id, time) pair (" + id + ", " +
                        std::to_string(time[r]) + "), first seen on line " + std::to_string(d->second));
    }
    for (std::size_t a = 0; a < factors.size(); ++a) {
      double v = 1.0;
      for (int c : factors[a]) v *= parse_number(row[c], line, t.header[c]);
      X(r, static_cast<Index>(a)) = v;
    }
  }
  // stable order: unit of first appearance, then time
  std::vector<Index> order(static_cast<std::size_t>(N));
  std::iota(order.begin(), order.end(), Index{0});
  std::stable_sort(order.begin(), order.end(), [&](Index a, Index b) {
    return ou[a] != ou[b] ? ou[a] < ou[b] : (ct >= 0 && time[a] < time[b]);
  });
  VectorXd ys(N);
  MatrixXd Xs(N, X.cols());
  std::vector<Index> ous(static_cast<std::size_t>(N));
  std::vector<int> ts(static_cast<std::size_t>(N));
  for (Index j = 0; j < N; ++j) {
    ys(j) = y(order[j]);
    Xs.row(j) = X.row(order[j]);
    ous[j] = ou[order[j]];
    ts[j] = time[order[j]];
  }
  return PanelDataset(std::move(ids), std::move(ous), std::move(ys), std::move(Xs), std::move(covs),
                      ct >= 0 ? std::move(ts) : std::vector<int>{});
}

inline PanelDataset ingest_csv(const std::string& path, const ColumnRoles& roles) {
  return to_panel(read_csv_file(path), roles);
}

/// Writes id, time, response and covariates with 17 significant digits, so
/// that reading the file back reproduces every value exactly.
inline void write_panel_csv(std::ostream& out, const PanelDataset& d, const std::string& response = "y") {
  auto quote = [](const std::string& s) {
    if (s.find_first_of(",\"\n") == std::string::npos) return s;
    std::string q = "\"";
    for (char c : s) q += c == '"' ? std::string("\"\"") : std::string(1, c);
    return q + "\"";
  };
  out << "id,time," << quote(response);
  for (const auto& n : d.covariate_names()) out << ',' << quote(n);
  out << '\n';
  char buf[40];
  for (Index j = 0; j < d.n_obs(); ++j) {
    out << quote(d.unit_ids()[d.obs_unit()[j]]) << ',' << d.time_index()[j];
    std::snprintf(buf, sizeof buf, "%.17g", d.y()(j));
    out << ',' << buf;
    for (Index c = 0; c < d.n_covariates(); ++c) {
      std::snprintf(buf, sizeof buf, "%.17g", d.X()(j, c));
      out << ',' << buf;
    }
    out << '\n';
  }
}

}  // namespace mixpanel
