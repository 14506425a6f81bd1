#pragma once

// File plumbing for the command-line tool: CSV ingestion into experiments and
// potential-outcome tables, atomic output files, and a minimal SVG line chart.
//
// CSV dialect: comma separated, header row required, "." decimal point, no
// locale. Fields may be double-quoted. Row numbers in messages count data
// rows from 1 (the header is row 0). Categorical covariates must already be
// numerically encoded.

#include <Eigen/Dense>

#include <charconv>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <unistd.h>

#include "loop/common.hpp"
#include "loop/core.hpp"
#include "loop/oracle.hpp"

namespace loop::io {

struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  std::optional<std::size_t> column(const std::string& name) const {
    for (std::size_t j = 0; j < header.size(); ++j)
      if (header[j] == name) return j;
    return std::nullopt;
  }
  std::size_t require(const std::string& name) const {
    if (auto j = column(name)) return *j;
    throw Error(ErrorKind::MissingColumn, "column '" + name + "' not found in the header");
  }
};

namespace detail {

inline std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

inline std::vector<std::string> split_line(const std::string& line, std::size_t row) {
  std::vector<std::string> out;
  std::string field;
  bool quoted = false, was_quoted = false;
  for (std::size_t k = 0; k < line.size(); ++k) {
    const char ch = line[k];
    if (quoted) {
      if (ch == '"' && k + 1 < line.size() && line[k + 1] == '"') {
        field.push_back('"');
        ++k;
      } else if (ch == '"') {
        quoted = false;
      } else {
        field.push_back(ch);
      }
    } else if (ch == '"') {
      quoted = was_quoted = true;
    } else if (ch == ',') {
      out.push_back(was_quoted ? field : trim(field));
      field.clear();
      was_quoted = false;
    } else {
      field.push_back(ch);
    }
  }
  if (quoted) throw Error(ErrorKind::ParseError, "row " + std::to_string(row) + ": unterminated quoted field");
  out.push_back(was_quoted ? field : trim(field));
  return out;
}

inline bool is_missing(const std::string& s) { return s.empty() || s == "NA" || s == "NaN" || s == "nan"; }

inline std::optional<double> to_number(const std::string& s) {
  double v = 0.0;
  const char* first = s.data();
  const char* last = s.data() + s.size();
  if (first != last && *first == '+') ++first;
  const auto [ptr, ec] = std::from_chars(first, last, v);
  if (ec != std::errc() || ptr != last || !std::isfinite(v)) return std::nullopt;
  return v;
}

}  // namespace detail

/// Shortest text that parses back to the same double.
inline std::string format_number(double v) {
  if (std::isnan(v)) return "nan";
  char buf[64];
  const auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, ptr);
}

inline CsvTable parse_csv(std::istream& in) {
  CsvTable table;
  std::string line;
  std::size_t row = 0;
  bool have_header = false;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (!have_header) {
      if (line.size() >= 3 && line.compare(0, 3, "\xEF\xBB\xBF") == 0) line.erase(0, 3);
      if (detail::trim(line).empty()) continue;
      table.header = detail::split_line(line, 0);
      have_header = true;
      continue;
    }
    ++row;
    if (detail::trim(line).empty()) continue;
    auto fields = detail::split_line(line, row);
    if (fields.size() != table.header.size())
      throw Error(ErrorKind::ParseError, "row " + std::to_string(row) + ": expected " +
                                             std::to_string(table.header.size()) + " fields, found " +
                                             std::to_string(fields.size()));
    table.rows.push_back(std::move(fields));
  }
  if (!have_header) throw Error(ErrorKind::ParseError, "file is empty (a header row is required)");
  std::map<std::string, int> seen;
  for (const auto& h : table.header) {
    if (h.empty()) throw Error(ErrorKind::ParseError, "header contains an empty column name");
    if (++seen[h] > 1) throw Error(ErrorKind::ParseError, "header repeats column '" + h + "'");
  }
  return table;
}

inline CsvTable read_csv(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::Io, "cannot open " + path.string());
  return parse_csv(in);
}

/// Column selection for read_experiment. An empty covariate list means every
/// remaining numeric column.
struct ExperimentColumns {
  std::string outcome = "y";
  std::string treatment = "t";
  std::optional<std::string> probability_column;
  std::optional<double> p;
  std::optional<std::vector<std::string>> covariates;
  std::vector<std::string> label_columns;  // strata / block / pair columns, never covariates
};

struct LoadedExperiment {
  Experiment exp;
  std::vector<std::string> covariates;
  std::map<std::string, std::vector<std::int64_t>> labels;  // by column name
};

namespace detail {

/// Rejects rows with a missing value in any used column, listing them all.
inline void reject_missing(const CsvTable& t, const std::vector<std::size_t>& used) {
  std::vector<std::size_t> bad;
  for (std::size_t r = 0; r < t.rows.size(); ++r)
    for (auto j : used)
      if (is_missing(t.rows[r][j])) {
        bad.push_back(r + 1);
        break;
      }
  if (bad.empty()) return;
  std::string list;
  for (std::size_t k = 0; k < bad.size() && k < 50; ++k) list += (k ? ", " : "") + std::to_string(bad[k]);
  if (bad.size() > 50) list += ", ...";
  throw Error(ErrorKind::ParseError, "missing values in rows " + list);
}

inline double number_at(const CsvTable& t, std::size_t r, std::size_t j) {
  if (auto v = to_number(t.rows[r][j])) return *v;
  throw Error(ErrorKind::ParseError, "row " + std::to_string(r + 1) + ", column '" + t.header[j] +
                                         "': cannot read '" + t.rows[r][j] + "' as a number");
}

inline std::vector<double> numbers(const CsvTable& t, std::size_t j) {
  std::vector<double> out(t.rows.size());
  for (std::size_t r = 0; r < t.rows.size(); ++r) out[r] = number_at(t, r, j);
  return out;
}

inline std::vector<std::int64_t> integer_labels(const CsvTable& t, std::size_t j) {
  std::vector<std::int64_t> out(t.rows.size());
  for (std::size_t r = 0; r < t.rows.size(); ++r) {
    const auto& s = t.rows[r][j];
    std::int64_t v = 0;
    const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || ptr != s.data() + s.size())
      throw Error(ErrorKind::ParseError, "row " + std::to_string(r + 1) + ", column '" + t.header[j] +
                                             "': labels must be integers, found '" + s + "'");
    out[r] = v;
  }
  return out;
}

inline bool numeric_column(const CsvTable& t, std::size_t j) {
  for (const auto& row : t.rows)
    if (!is_missing(row[j]) && !to_number(row[j])) return false;
  return true;
}

inline std::vector<double> probabilities(const CsvTable& t, const ExperimentColumns& cols,
                                         std::vector<std::size_t>& used) {
  if (cols.probability_column.has_value() == cols.p.has_value())
    throw Error(ErrorKind::InvalidConfig, "give exactly one of a probability column and a constant p");
  std::vector<double> p;
  if (cols.p) {
    if (!(*cols.p > 0.0 && *cols.p < 1.0))
      throw Error(ErrorKind::ProbabilityOutOfRange, "p = " + format_number(*cols.p) + " must lie in (0,1)");
    p.assign(t.rows.size(), *cols.p);
    return p;
  }
  const auto j = t.require(*cols.probability_column);
  used.push_back(j);
  reject_missing(t, {j});
  p = numbers(t, j);
  for (std::size_t r = 0; r < p.size(); ++r)
    if (!(p[r] > 0.0 && p[r] < 1.0))
      throw Error(ErrorKind::ProbabilityOutOfRange, "row " + std::to_string(r + 1) + ": probability " +
                                                        t.rows[r][j] + " must lie in (0,1)");
  return p;
}

inline std::vector<std::size_t> covariate_columns(const CsvTable& t, const ExperimentColumns& cols,
                                                  const std::vector<std::size_t>& reserved) {
  std::vector<std::size_t> chosen;
  if (cols.covariates) {
    for (const auto& name : *cols.covariates) chosen.push_back(t.require(name));
  } else {
    for (std::size_t j = 0; j < t.header.size(); ++j) {
      if (std::find(reserved.begin(), reserved.end(), j) != reserved.end()) continue;
      if (numeric_column(t, j)) chosen.push_back(j);
    }
  }
  return chosen;
}

inline Eigen::MatrixXd covariate_matrix(const CsvTable& t, const std::vector<std::size_t>& chosen,
                                        std::vector<std::string>& names) {
  Eigen::MatrixXd z(static_cast<Eigen::Index>(t.rows.size()), static_cast<Eigen::Index>(chosen.size()));
  for (std::size_t k = 0; k < chosen.size(); ++k) {
    names.push_back(t.header[chosen[k]]);
    for (std::size_t r = 0; r < t.rows.size(); ++r)
      z(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(k)) = number_at(t, r, chosen[k]);
  }
  return z;
}

}  // namespace detail

/// Builds an experiment from a parsed CSV. The design is left as Bernoulli;
/// callers attach the design once labels are known.
inline LoadedExperiment read_experiment(const CsvTable& t, const ExperimentColumns& cols) {
  LoadedExperiment out;
  const auto jy = t.require(cols.outcome);
  const auto jt = t.require(cols.treatment);
  std::vector<std::size_t> reserved{jy, jt};
  if (cols.probability_column) reserved.push_back(t.require(*cols.probability_column));
  for (const auto& name : cols.label_columns) reserved.push_back(t.require(name));

  const auto covariates = detail::covariate_columns(t, cols, reserved);
  std::vector<std::size_t> used = reserved;
  used.insert(used.end(), covariates.begin(), covariates.end());
  detail::reject_missing(t, used);

  auto& exp = out.exp;
  exp.y = detail::numbers(t, jy);
  exp.t.resize(t.rows.size());
  for (std::size_t r = 0; r < t.rows.size(); ++r) {
    const auto& s = t.rows[r][jt];
    const auto v = detail::to_number(s);
    if (!v || (*v != 0.0 && *v != 1.0))
      throw Error(ErrorKind::NonBinaryTreatment,
                  "row " + std::to_string(r + 1) + ": treatment '" + s + "' is not 0 or 1");
    exp.t[r] = *v == 1.0;
  }
  exp.p = detail::probabilities(t, cols, used);
  exp.z = detail::covariate_matrix(t, covariates, out.covariates);
  for (const auto& name : cols.label_columns) out.labels[name] = detail::integer_labels(t, t.require(name));
  return out;
}

inline LoadedExperiment read_experiment(const std::filesystem::path& path, const ExperimentColumns& cols) {
  return read_experiment(read_csv(path), cols);
}

/// Potential-outcome table: one column per potential outcome, plus
/// probabilities and covariates chosen as for experiments.
inline PotentialOutcomesTable read_table(const CsvTable& t, const std::string& treated_column,
                                         const std::string& control_column, ExperimentColumns cols,
                                         std::map<std::string, std::vector<std::int64_t>>* labels = nullptr,
                                         std::vector<std::string>* covariate_names = nullptr) {
  const auto j1 = t.require(treated_column);
  const auto j0 = t.require(control_column);
  std::vector<std::size_t> reserved{j1, j0};
  if (cols.probability_column) reserved.push_back(t.require(*cols.probability_column));
  for (const auto& name : cols.label_columns) reserved.push_back(t.require(name));
  const auto covariates = detail::covariate_columns(t, cols, reserved);
  std::vector<std::size_t> used = reserved;
  used.insert(used.end(), covariates.begin(), covariates.end());
  detail::reject_missing(t, used);

  PotentialOutcomesTable po;
  po.t = detail::numbers(t, j1);
  po.c = detail::numbers(t, j0);
  po.p = detail::probabilities(t, cols, used);
  std::vector<std::string> names;
  po.z = detail::covariate_matrix(t, covariates, names);
  if (covariate_names) *covariate_names = names;
  if (labels)
    for (const auto& name : cols.label_columns) (*labels)[name] = detail::integer_labels(t, t.require(name));
  return po;
}

// ---------------------------------------------------------------------------
// Output
// ---------------------------------------------------------------------------

inline std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char ch : s) {
    if (ch == '"') out.push_back('"');
    out.push_back(ch);
  }
  return out + "\"";
}

inline std::string csv_row(const std::vector<std::string>& fields) {
  std::string out;
  for (std::size_t k = 0; k < fields.size(); ++k) out += (k ? "," : "") + csv_field(fields[k]);
  return out;
}

/// Files written by one run. Each file goes to a temporary sibling first and
/// is renamed into place; rollback() removes everything written so far.
class OutputSet {
 public:
  void write(const std::filesystem::path& path, const std::string& content) {
    namespace fs = std::filesystem;
    const fs::path target = path.empty() ? path : fs::absolute(path);
    if (target.has_parent_path() && !fs::exists(target.parent_path()))
      throw Error(ErrorKind::Io, "directory " + target.parent_path().string() + " does not exist");
    fs::path temp = target;
    temp += ".tmp." + std::to_string(::getpid());
    {
      std::ofstream out(temp, std::ios::binary | std::ios::trunc);
      if (!out) throw Error(ErrorKind::Io, "cannot write " + temp.string());
      out << content;
      out.flush();
      if (!out) {
        out.close();
        std::error_code ec;
        fs::remove(temp, ec);
        throw Error(ErrorKind::Io, "write to " + temp.string() + " failed");
      }
    }
    std::error_code ec;
    fs::rename(temp, target, ec);
    if (ec) {
      fs::remove(temp, ec);
      throw Error(ErrorKind::Io, "cannot move output into place at " + target.string());
    }
    written_.push_back(target);
  }

  void rollback() {
    std::error_code ec;
    for (const auto& p : written_) std::filesystem::remove(p, ec);
    written_.clear();
  }

  const std::vector<std::filesystem::path>& written() const { return written_; }

 private:
  std::vector<std::filesystem::path> written_;
};

// ---------------------------------------------------------------------------
// SVG
// ---------------------------------------------------------------------------

struct Series {
  std::string name;
  std::vector<double> y;
};

/// Polyline chart with axis labels, tick values at the data points and a
/// plain-text legend.
inline std::string svg_line_chart(const std::string& title, const std::string& x_label, const std::string& y_label,
                                  const std::vector<double>& x, const std::vector<Series>& series) {
  constexpr double W = 640, H = 420, left = 70, right = 170, top = 40, bottom = 60;
  const char* colors[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e"};
  double x_lo = x.empty() ? 0 : *std::min_element(x.begin(), x.end());
  double x_hi = x.empty() ? 1 : *std::max_element(x.begin(), x.end());
  double y_lo = 1e300, y_hi = -1e300;
  for (const auto& s : series)
    for (double v : s.y)
      if (std::isfinite(v)) {
        y_lo = std::min(y_lo, v);
        y_hi = std::max(y_hi, v);
      }
  if (y_lo > y_hi) y_lo = 0, y_hi = 1;
  if (x_hi == x_lo) x_hi = x_lo + 1;
  const double pad = (y_hi - y_lo) * 0.08 + 1e-9;
  y_lo -= pad;
  y_hi += pad;
  auto px = [&](double v) { return left + (v - x_lo) / (x_hi - x_lo) * (W - left - right); };
  auto py = [&](double v) { return H - bottom - (v - y_lo) / (y_hi - y_lo) * (H - top - bottom); };
  auto num = [](double v) {
    std::ostringstream s;
    s.precision(4);
    s << v;
    return s.str();
  };

  std::ostringstream o;
  o << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
  o << "<text x=\"" << W / 2 << "\" y=\"22\" text-anchor=\"middle\" font-size=\"14\">" << title << "</text>\n";
  o << "<line x1=\"" << left << "\" y1=\"" << H - bottom << "\" x2=\"" << W - right << "\" y2=\"" << H - bottom
    << "\" stroke=\"black\"/>\n";
  o << "<line x1=\"" << left << "\" y1=\"" << top << "\" x2=\"" << left << "\" y2=\"" << H - bottom
    << "\" stroke=\"black\"/>\n";
  for (double v : x)
    o << "<text x=\"" << px(v) << "\" y=\"" << H - bottom + 16 << "\" text-anchor=\"middle\">" << num(v)
      << "</text>\n";
  for (int k = 0; k <= 4; ++k) {
    const double v = y_lo + (y_hi - y_lo) * k / 4;
    o << "<text x=\"" << left - 6 << "\" y=\"" << py(v) + 4 << "\" text-anchor=\"end\">" << num(v) << "</text>\n";
  }
  o << "<text x=\"" << (left + W - right) / 2 << "\" y=\"" << H - 18 << "\" text-anchor=\"middle\">" << x_label
    << "</text>\n";
  o << "<text x=\"18\" y=\"" << (top + H - bottom) / 2 << "\" text-anchor=\"middle\" transform=\"rotate(-90 18 "
    << (top + H - bottom) / 2 << ")\">" << y_label << "</text>\n";
  for (std::size_t s = 0; s < series.size(); ++s) {
    const char* color = colors[s % 5];
    o << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"2\" points=\"";
    for (std::size_t k = 0; k < x.size() && k < series[s].y.size(); ++k)
      if (std::isfinite(series[s].y[k])) o << (k ? " " : "") << px(x[k]) << "," << py(series[s].y[k]);
    o << "\"/>\n";
    o << "<text x=\"" << W - right + 12 << "\" y=\"" << top + 18 * (s + 1) << "\" fill=\"" << color << "\">"
      << series[s].name << "</text>\n";
  }
  o << "</svg>\n";
  return o.str();
}

}  // namespace loop::io
