#pragma once

// Run configuration and the three batch commands (estimate, simulate,
// oracle). Configuration comes from a JSON document and/or command-line
// flags; both use the same kebab-case field names listed in config_fields().

#include <filesystem>
#include <iostream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "loop/designs.hpp"
#include "loop/estimator.hpp"
#include "loop/io.hpp"
#include "loop/oracle.hpp"
#include "loop/simulation.hpp"

namespace loop::cli {

using json = nlohmann::ordered_json;

enum class FieldType { String, Number, Integer, Bool, StringList, NumberList };

enum CommandMask : unsigned { Estimate = 1, Simulate = 2, Oracle = 4, All = 7 };

struct FieldSpec {
  std::string name;
  FieldType type;
  unsigned commands;
  std::string help;
};

inline const std::vector<FieldSpec>& config_fields() {
  static const std::vector<FieldSpec> fields = {
      {"input", FieldType::String, Estimate | Oracle, "input CSV file"},
      {"outcome", FieldType::String, Estimate, "outcome column (default y)"},
      {"treatment", FieldType::String, Estimate, "treatment column with values 0/1 (default t)"},
      {"treated-outcome", FieldType::String, Oracle, "potential outcome under treatment (default y1)"},
      {"control-outcome", FieldType::String, Oracle, "potential outcome under control (default y0)"},
      {"probability-column", FieldType::String, Estimate | Oracle, "column of assignment probabilities"},
      {"p", FieldType::Number, Estimate | Oracle, "constant assignment probability"},
      {"covariates", FieldType::StringList, Estimate | Oracle,
       "covariate columns (default: all remaining numeric columns)"},
      {"imputer", FieldType::String, Estimate, "mean | strata | ols | forest (default mean)"},
      {"imputers", FieldType::StringList, Oracle, "imputers to enumerate (default mean,ols)"},
      {"strata-column", FieldType::String, Estimate | Oracle, "stratum labels for the strata imputer"},
      {"empty-arm", FieldType::String, Estimate | Oracle,
       "error | pool: behaviour when an arm has no other unit (default: error for estimate, pool for oracle)"},
      {"trees", FieldType::Integer, All, "forest size (default 500)"},
      {"min-node-size", FieldType::Integer, All, "smallest splittable node (default 5)"},
      {"mtry", FieldType::Integer, All, "features tried per split (default max(1, q/3))"},
      {"max-depth", FieldType::Integer, All, "maximum tree depth (default unlimited)"},
      {"forest-mode", FieldType::String, Estimate | Oracle, "oob | exact-loo (default oob)"},
      {"seed", FieldType::Integer, All, "random seed (default 0)"},
      {"design", FieldType::String, Estimate | Oracle, "bernoulli | complete | blocked | paired (default bernoulli)"},
      {"block-column", FieldType::String, Estimate | Oracle, "block labels for the blocked design"},
      {"pair-column", FieldType::String, Estimate | Oracle, "pair labels for the paired design"},
      {"random-drop", FieldType::String, Estimate | Oracle,
       "auto | none | expectation | sampled | exhaustive (default auto)"},
      {"drop-reps", FieldType::Integer, Estimate | Oracle, "repetitions for sampled random drop (default 20)"},
      {"denominator", FieldType::String, Estimate, "arm-count | expected (default arm-count)"},
      {"gamma-diagnostic", FieldType::Bool, Estimate, "estimate the average pairwise covariance"},
      {"pair-budget", FieldType::Integer, Estimate, "sample this many pairs for the covariance diagnostic"},
      {"ci-level", FieldType::Number, Estimate, "confidence level (default 0.95)"},
      {"per-unit", FieldType::Bool, Estimate, "include per-unit effects in the report"},
      {"output", FieldType::String, Estimate | Oracle, "report path (estimate: JSON, oracle: CSV)"},
      {"units-output", FieldType::String, Estimate | Oracle, "per-unit CSV path"},
      {"condition", FieldType::Bool, Oracle, "skip assignments where the imputer is undefined"},
      {"sim", FieldType::Integer, Simulate, "1 (fixed 30-unit table) or 2 (binary-response sweeps)"},
      {"reps", FieldType::Integer, Simulate, "assignment draws for simulation 1 (default 1000)"},
      {"trials", FieldType::Integer, Simulate, "assignment draws per sweep point (default 200)"},
      {"sweep", FieldType::String, Simulate, "k | n | c | all (default all)"},
      {"values", FieldType::NumberList, Simulate, "grid for a single sweep axis"},
      {"n-units", FieldType::Integer, Simulate, "units when N is not swept (default 200)"},
      {"k", FieldType::Integer, Simulate, "noise covariates when k is not swept (default 50)"},
      {"c", FieldType::Number, Simulate, "signal strength when c is not swept (default 3)"},
      {"out-dir", FieldType::String, Simulate, "directory for CSV, JSON and SVG outputs (default .)"},
      {"svg", FieldType::Bool, Simulate, "write SVG charts of the sweeps (default true)"},
      {"threads", FieldType::Integer, All, "worker threads, 0 = hardware (default 0)"},
  };
  return fields;
}

struct RunConfig {
  std::string command;
  std::optional<std::string> input;
  std::string outcome = "y";
  std::string treatment = "t";
  std::string treated_outcome = "y1";
  std::string control_outcome = "y0";
  std::optional<std::string> probability_column;
  std::optional<double> p;
  std::optional<std::vector<std::string>> covariates;
  std::string imputer = "mean";
  std::vector<std::string> imputers = {"mean", "ols"};
  std::optional<std::string> strata_column;
  std::optional<std::string> empty_arm;
  std::size_t trees = 500;
  std::size_t min_node_size = 5;
  std::optional<std::size_t> mtry;
  std::optional<std::size_t> max_depth;
  std::string forest_mode = "oob";
  std::uint64_t seed = 0;
  std::string design = "bernoulli";
  std::optional<std::string> block_column;
  std::optional<std::string> pair_column;
  std::string random_drop = "auto";
  std::size_t drop_reps = 20;
  std::string denominator = "arm-count";
  bool gamma_diagnostic = false;
  std::optional<std::size_t> pair_budget;
  double ci_level = 0.95;
  bool per_unit = false;
  std::optional<std::string> output;
  std::optional<std::string> units_output;
  bool condition = false;
  int sim = 1;
  std::size_t reps = 1000;
  std::size_t trials = 200;
  std::string sweep = "all";
  std::optional<std::vector<double>> values;
  std::size_t n_units = 200;
  std::size_t k = 50;
  double c = 3.0;
  std::string out_dir = ".";
  bool svg = true;
  std::size_t threads = 0;
};

namespace detail {

inline const FieldSpec* find_field(const std::string& name) {
  for (const auto& f : config_fields())
    if (f.name == name) return &f;
  return nullptr;
}

inline unsigned command_mask(const std::string& command) {
  if (command == "estimate") return Estimate;
  if (command == "simulate") return Simulate;
  if (command == "oracle") return Oracle;
  throw Error(ErrorKind::InvalidConfig, "unknown command '" + command + "' (estimate, simulate or oracle)");
}

inline bool type_matches(FieldType type, const json& v) {
  switch (type) {
    case FieldType::String: return v.is_string();
    case FieldType::Number: return v.is_number();
    case FieldType::Integer: return v.is_number_integer() && v.get<long long>() >= 0;
    case FieldType::Bool: return v.is_boolean();
    case FieldType::StringList:
      return v.is_array() && std::all_of(v.begin(), v.end(), [](const json& e) { return e.is_string(); });
    case FieldType::NumberList:
      return v.is_array() && std::all_of(v.begin(), v.end(), [](const json& e) { return e.is_number(); });
  }
  return false;
}

inline double parse_number(const std::string& name, const std::string& text) {
  if (auto v = io::detail::to_number(text)) return *v;
  throw Error(ErrorKind::InvalidConfig, "--" + name + ": '" + text + "' is not a number");
}

}  // namespace detail

/// Converts raw command-line text for a field into its JSON value.
inline json coerce_flag(const std::string& name, const std::vector<std::string>& raw) {
  const auto* f = detail::find_field(name);
  if (!f) throw Error(ErrorKind::InvalidConfig, "unknown option --" + name);
  const std::string text = raw.empty() ? std::string() : raw.back();
  switch (f->type) {
    case FieldType::String: return text;
    case FieldType::Number: return detail::parse_number(name, text);
    case FieldType::Integer: {
      std::uint64_t v = 0;
      const auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
      if (ec != std::errc() || ptr != text.data() + text.size())
        throw Error(ErrorKind::InvalidConfig, "--" + name + ": '" + text + "' is not a non-negative integer");
      return v;
    }
    case FieldType::Bool:
      if (text.empty() || text == "true" || text == "1") return true;
      if (text == "false" || text == "0") return false;
      throw Error(ErrorKind::InvalidConfig, "--" + name + ": expected true or false");
    case FieldType::StringList: return raw;
    case FieldType::NumberList: {
      json out = json::array();
      for (const auto& s : raw) out.push_back(detail::parse_number(name, s));
      return out;
    }
  }
  return nullptr;
}

inline json load_config_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::Io, "cannot open config file " + path.string());
  try {
    auto doc = json::parse(in);
    if (!doc.is_object()) throw Error(ErrorKind::InvalidConfig, "config file must hold a JSON object");
    return doc;
  } catch (const json::parse_error& e) {
    throw Error(ErrorKind::InvalidConfig, "config file " + path.string() + ": " + e.what());
  }
}

/// Builds a RunConfig from a JSON object whose keys are field names (plus an
/// optional "command"). Unknown keys, wrongly typed values and fields that do
/// not apply to the command are rejected.
inline RunConfig config_from_json(const json& doc, const std::string& command) {
  RunConfig cfg;
  cfg.command = command;
  if (doc.contains("command") && doc["command"] != command)
    throw Error(ErrorKind::InvalidConfig, "config is for command '" + doc["command"].dump() + "', not " + command);
  const unsigned mask = detail::command_mask(command);
  for (const auto& [key, value] : doc.items()) {
    if (key == "command") continue;
    const auto* f = detail::find_field(key);
    if (!f) throw Error(ErrorKind::InvalidConfig, "unknown config field '" + key + "'");
    if (!(f->commands & mask)) throw Error(ErrorKind::InvalidConfig, "field '" + key + "' does not apply to " + command);
    if (!detail::type_matches(f->type, value))
      throw Error(ErrorKind::InvalidConfig, "field '" + key + "' has the wrong type");
  }
  auto str = [&](const char* k, std::string& dst) {
    if (doc.contains(k)) dst = doc[k].get<std::string>();
  };
  auto ostr = [&](const char* k, std::optional<std::string>& dst) {
    if (doc.contains(k)) dst = doc[k].get<std::string>();
  };
  auto count = [&](const char* k, std::size_t& dst) {
    if (doc.contains(k)) dst = doc[k].get<std::size_t>();
  };
  auto ocount = [&](const char* k, std::optional<std::size_t>& dst) {
    if (doc.contains(k)) dst = doc[k].get<std::size_t>();
  };
  auto flag = [&](const char* k, bool& dst) {
    if (doc.contains(k)) dst = doc[k].get<bool>();
  };
  ostr("input", cfg.input);
  str("outcome", cfg.outcome);
  str("treatment", cfg.treatment);
  str("treated-outcome", cfg.treated_outcome);
  str("control-outcome", cfg.control_outcome);
  ostr("probability-column", cfg.probability_column);
  if (doc.contains("p")) cfg.p = doc["p"].get<double>();
  if (doc.contains("covariates")) cfg.covariates = doc["covariates"].get<std::vector<std::string>>();
  str("imputer", cfg.imputer);
  if (doc.contains("imputers")) cfg.imputers = doc["imputers"].get<std::vector<std::string>>();
  ostr("strata-column", cfg.strata_column);
  ostr("empty-arm", cfg.empty_arm);
  count("trees", cfg.trees);
  count("min-node-size", cfg.min_node_size);
  ocount("mtry", cfg.mtry);
  ocount("max-depth", cfg.max_depth);
  str("forest-mode", cfg.forest_mode);
  if (doc.contains("seed")) cfg.seed = doc["seed"].get<std::uint64_t>();
  str("design", cfg.design);
  ostr("block-column", cfg.block_column);
  ostr("pair-column", cfg.pair_column);
  str("random-drop", cfg.random_drop);
  count("drop-reps", cfg.drop_reps);
  str("denominator", cfg.denominator);
  flag("gamma-diagnostic", cfg.gamma_diagnostic);
  ocount("pair-budget", cfg.pair_budget);
  if (doc.contains("ci-level")) cfg.ci_level = doc["ci-level"].get<double>();
  flag("per-unit", cfg.per_unit);
  ostr("output", cfg.output);
  ostr("units-output", cfg.units_output);
  flag("condition", cfg.condition);
  if (doc.contains("sim")) cfg.sim = doc["sim"].get<int>();
  count("reps", cfg.reps);
  count("trials", cfg.trials);
  str("sweep", cfg.sweep);
  if (doc.contains("values")) cfg.values = doc["values"].get<std::vector<double>>();
  count("n-units", cfg.n_units);
  count("k", cfg.k);
  if (doc.contains("c")) cfg.c = doc["c"].get<double>();
  str("out-dir", cfg.out_dir);
  flag("svg", cfg.svg);
  count("threads", cfg.threads);
  return cfg;
}

// ---------------------------------------------------------------------------
// Building library inputs from a config
// ---------------------------------------------------------------------------

namespace detail {

inline std::vector<std::string> label_columns(const RunConfig& cfg) {
  std::vector<std::string> out;
  for (const auto* col : {&cfg.strata_column, &cfg.block_column, &cfg.pair_column})
    if (*col && std::find(out.begin(), out.end(), **col) == out.end()) out.push_back(**col);
  return out;
}

inline io::ExperimentColumns columns(const RunConfig& cfg) {
  io::ExperimentColumns cols;
  cols.outcome = cfg.outcome;
  cols.treatment = cfg.treatment;
  cols.probability_column = cfg.probability_column;
  cols.p = cfg.p;
  cols.covariates = cfg.covariates;
  cols.label_columns = label_columns(cfg);
  return cols;
}

inline const std::vector<std::int64_t>& labels_for(const std::map<std::string, std::vector<std::int64_t>>& labels,
                                                   const std::optional<std::string>& column, const char* what) {
  if (!column) throw Error(ErrorKind::InvalidConfig, std::string(what) + " needs its label column");
  return labels.at(*column);
}

inline EmptyArmPolicy empty_arm_policy(const RunConfig& cfg) {
  const std::string v = cfg.empty_arm.value_or(cfg.command == "oracle" ? "pool" : "error");
  if (v == "error") return EmptyArmPolicy::Error;
  if (v == "pool") return EmptyArmPolicy::Pool;
  throw Error(ErrorKind::InvalidConfig, "empty-arm must be error or pool, not '" + v + "'");
}

inline ForestParams forest_params(const RunConfig& cfg) {
  ForestParams p;
  p.n_trees = cfg.trees;
  p.min_node_size = cfg.min_node_size;
  p.mtry = cfg.mtry;
  p.max_depth = cfg.max_depth;
  p.seed = cfg.seed;
  p.n_threads = cfg.threads;
  return p;
}

inline ImputerMethod imputer_method(const RunConfig& cfg, const std::string& kind,
                                    const std::map<std::string, std::vector<std::int64_t>>& labels) {
  const auto policy = empty_arm_policy(cfg);
  if (kind == "mean") return MeanImputer{policy};
  if (kind == "strata") return StrataImputer{labels_for(labels, cfg.strata_column, "the strata imputer"), policy};
  if (kind == "ols") return OlsImputer{};
  if (kind == "forest") {
    ForestMode mode;
    if (cfg.forest_mode == "oob") {
      mode = ForestMode::Oob;
    } else if (cfg.forest_mode == "exact-loo") {
      mode = ForestMode::ExactLoo;
    } else {
      throw Error(ErrorKind::InvalidConfig, "forest-mode must be oob or exact-loo");
    }
    return ForestImputer{forest_params(cfg), mode};
  }
  throw Error(ErrorKind::InvalidConfig, "imputer must be mean, strata, ols or forest, not '" + kind + "'");
}

/// Random drop for dependent designs. "auto" picks the closed form where it
/// exists; otherwise sampled drops for estimates and full enumeration for the
/// oracle.
inline std::optional<RandomDropOptions> drop_options(const RunConfig& cfg, const Design& design,
                                                     const ImputerMethod& method) {
  if (!is_dependent(design)) return std::nullopt;
  RandomDropOptions opts;
  opts.reps = cfg.drop_reps;
  opts.seed = cfg.seed;
  const std::string& mode = cfg.random_drop;
  if (mode == "none") return std::nullopt;
  if (mode == "expectation") {
    opts.mode = DropMode::Expectation;
  } else if (mode == "sampled") {
    opts.mode = DropMode::Sampled;
  } else if (mode == "exhaustive") {
    opts.mode = DropMode::Exhaustive;
  } else if (mode == "auto") {
    const auto* mean = std::get_if<MeanImputer>(&method);
    const auto* strata = std::get_if<StrataImputer>(&method);
    const bool closed = (mean && mean->empty_arm == EmptyArmPolicy::Error) ||
                        (strata && strata->empty_arm == EmptyArmPolicy::Error);
    opts.mode = closed ? DropMode::Expectation : (cfg.command == "oracle" ? DropMode::Exhaustive : DropMode::Sampled);
  } else {
    throw Error(ErrorKind::InvalidConfig, "random-drop must be auto, none, expectation, sampled or exhaustive");
  }
  return opts;
}

/// Treated count implied by a constant probability over `units` units.
inline std::size_t implied_count(const std::vector<double>& p, const std::vector<std::size_t>& units,
                                 const std::string& where) {
  double total = 0.0;
  for (auto i : units) total += p[i];
  const double rounded = std::round(total);
  if (std::abs(total - rounded) > 1e-9)
    throw Error(ErrorKind::InvalidConfig, "probabilities in " + where + " do not imply a whole number of treated units");
  return static_cast<std::size_t>(rounded);
}

/// Design from config. Observed data fixes the treated counts of complete
/// and blocked designs; potential-outcome tables (no treatment column) take
/// them from the probabilities.
inline Design make_design(const RunConfig& cfg, const std::map<std::string, std::vector<std::int64_t>>& labels,
                          const std::vector<double>& p, const std::vector<std::uint8_t>* observed) {
  if (cfg.design == "bernoulli") return Bernoulli{};
  if (cfg.design == "complete") {
    if (observed) return CompleteRandomization{static_cast<std::size_t>(std::count(observed->begin(), observed->end(), 1))};
    std::vector<std::size_t> all(p.size());
    for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
    return CompleteRandomization{implied_count(p, all, "the sample")};
  }
  if (cfg.design == "blocked") {
    Blocked b{labels_for(labels, cfg.block_column, "the blocked design"), {}};
    if (!observed)
      for (const auto& [label, members] : loop::detail::group_by(b.block))
        b.treated[label] = implied_count(p, members, "block " + std::to_string(label));
    return b;
  }
  if (cfg.design == "paired") return Paired{labels_for(labels, cfg.pair_column, "the paired design")};
  throw Error(ErrorKind::InvalidConfig, "design must be bernoulli, complete, blocked or paired");
}

inline json finite_or_null(double v) { return std::isfinite(v) ? json(v) : json(nullptr); }

inline std::string fmt(double v, int precision = 6) {
  std::ostringstream s;
  s.precision(precision);
  s << v;
  return s.str();
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Commands
// ---------------------------------------------------------------------------

struct CommandOutput {
  std::string stdout_text;
};

inline json estimate_report_json(const RunConfig& cfg, const io::LoadedExperiment& data, const EstimateReport& r) {
  json j;
  j["schema_version"] = 1;
  j["command"] = "estimate";
  j["input"] = cfg.input.value_or("");
  j["seed"] = cfg.seed;
  j["n_units"] = data.exp.size();
  j["n_treated"] = r.n_treated;
  j["n_control"] = r.n_control;
  j["covariates"] = data.covariates;
  j["design"] = design_name(data.exp.design);
  j["imputer"] = r.imputer_id;
  j["tau_hat"] = detail::finite_or_null(r.tau_hat);
  if (r.variance) {
    j["se"] = detail::finite_or_null(*r.se);
    j["var_hat"] = detail::finite_or_null(r.variance->var_hat);
    j["m_t_hat"] = detail::finite_or_null(r.variance->m_t_hat);
    j["m_c_hat"] = detail::finite_or_null(r.variance->m_c_hat);
    j["variance_denominator"] = cfg.denominator;
    j["ci"] = {{"level", r.ci_level},
               {"lower", detail::finite_or_null(r.ci->lower)},
               {"upper", detail::finite_or_null(r.ci->upper)}};
  } else {
    j["se"] = nullptr;
    j["var_hat"] = nullptr;
    j["m_t_hat"] = nullptr;
    j["m_c_hat"] = nullptr;
    j["variance_denominator"] = nullptr;
    j["ci"] = nullptr;
  }
  if (r.random_drop) {
    j["random_drop"] = {{"mode", to_string(r.random_drop->mode)},
                        {"reps", r.random_drop->reps},
                        {"mc_se", r.random_drop->mc_se ? detail::finite_or_null(*r.random_drop->mc_se) : json(nullptr)}};
  } else {
    j["random_drop"] = nullptr;
  }
  if (r.gamma) {
    const double n = static_cast<double>(data.exp.size());
    json g = {{"gamma_bar_hat", detail::finite_or_null(r.gamma->gamma_bar_hat)},
              {"pairs", r.gamma->gamma_hat.size()},
              {"total_pairs", r.gamma->total_pairs},
              {"refits", r.gamma->refits}};
    if (r.variance) g["var_hat_with_gamma"] = detail::finite_or_null(r.variance->var_hat + (n - 1) / n * r.gamma->gamma_bar_hat);
    j["gamma_diagnostic"] = g;
  } else {
    j["gamma_diagnostic"] = nullptr;
  }
  j["pooled_fallbacks"] = r.imputed.pooled_fallbacks;
  j["rank_deficient_fits"] = r.imputed.rank_deficient_fits;
  j["caveats"] = r.caveats;
  if (cfg.per_unit) {
    json units = json::array();
    for (double v : r.tau_units) units.push_back(detail::finite_or_null(v));
    j["tau_units"] = units;
  }
  return j;
}

inline std::string units_csv(const Experiment& exp, const EstimateReport& r) {
  std::string out = "unit,treatment,y,t_hat,c_hat,m_hat,tau_hat\n";
  for (std::size_t i = 0; i < exp.size(); ++i) {
    out += std::to_string(i + 1) + "," + std::to_string(exp.t[i]) + "," + io::format_number(exp.y[i]) + "," +
           io::format_number(r.imputed.t_hat[i]) + "," + io::format_number(r.imputed.c_hat[i]) + "," +
           io::format_number(r.imputed.m_hat[i]) + "," + io::format_number(r.tau_units[i]) + "\n";
  }
  return out;
}

inline CommandOutput run_estimate(const RunConfig& cfg, io::OutputSet& outputs) {
  if (!cfg.input) throw Error(ErrorKind::InvalidConfig, "estimate needs --input");
  auto data = io::read_experiment(*cfg.input, detail::columns(cfg));
  data.exp.design = detail::make_design(cfg, data.labels, data.exp.p, &data.exp.t);

  const auto method = detail::imputer_method(cfg, cfg.imputer, data.labels);
  ImputerSpec spec{method, detail::drop_options(cfg, data.exp.design, method)};
  EstimateOptions options;
  options.ci_level = cfg.ci_level;
  if (cfg.denominator == "arm-count") {
    options.denominator = MseDenominator::ArmCount;
  } else if (cfg.denominator == "expected") {
    options.denominator = MseDenominator::Expected;
  } else {
    throw Error(ErrorKind::InvalidConfig, "denominator must be arm-count or expected");
  }
  const bool constant_p = constant_probability(data.exp.p).has_value();
  options.variance = constant_p;
  options.gamma_diagnostic = cfg.gamma_diagnostic;
  options.pair_budget = cfg.pair_budget;
  options.seed = cfg.seed;

  auto report = estimate(data.exp, spec, options);
  if (!constant_p) report.caveats.emplace_back("variance_unavailable_nonconstant_p");

  const auto doc = estimate_report_json(cfg, data, report);
  const std::string text = doc.dump(2) + "\n";
  CommandOutput out;
  if (cfg.units_output) outputs.write(*cfg.units_output, units_csv(data.exp, report));
  std::string summary = "tau_hat=" + detail::fmt(report.tau_hat);
  if (report.se) {
    summary += " se=" + detail::fmt(*report.se) + " ci" + detail::fmt(100 * report.ci_level, 4) + "=[" +
               detail::fmt(report.ci->lower) + ", " + detail::fmt(report.ci->upper) + "]";
  }
  summary += " n=" + std::to_string(data.exp.size()) + " (" + std::to_string(report.n_treated) + " treated) imputer=" +
             report.imputer_id;
  if (!report.caveats.empty()) {
    summary += " caveats=";
    for (std::size_t k = 0; k < report.caveats.size(); ++k) summary += (k ? "," : "") + report.caveats[k];
  }
  if (cfg.output) {
    outputs.write(*cfg.output, text);
    out.stdout_text = summary + "\n";
  } else {
    out.stdout_text = text;
  }
  return out;
}

namespace detail {

inline json summary_json(const MonteCarloSummary& s) {
  json j;
  j["reps"] = s.reps;
  j["seed"] = s.seed;
  j["resamples"] = s.resamples;
  j["tau_bar"] = finite_or_null(s.tau_bar);
  if (!s.axis.empty()) j["axis"] = s.axis;
  json est = json::array();
  for (const auto& e : s.estimators)
    est.push_back({{"name", e.name},
                   {"mean_point", finite_or_null(e.mean_point)},
                   {"bias", finite_or_null(e.bias)},
                   {"bias_mc_se", finite_or_null(e.bias_mc_se)},
                   {"mean_nominal_se", finite_or_null(e.mean_nominal_se)},
                   {"true_se", finite_or_null(e.true_se)}});
  j["estimators"] = est;
  return j;
}

inline std::vector<SweepAxis> sweep_axes(const std::string& sweep) {
  if (sweep == "k") return {SweepAxis::NoiseCovariates};
  if (sweep == "n") return {SweepAxis::Units};
  if (sweep == "c") return {SweepAxis::Signal};
  if (sweep == "all") return {SweepAxis::NoiseCovariates, SweepAxis::Units, SweepAxis::Signal};
  throw Error(ErrorKind::InvalidConfig, "sweep must be k, n, c or all");
}

}  // namespace detail

inline CommandOutput run_simulate(const RunConfig& cfg, io::OutputSet& outputs) {
  namespace fs = std::filesystem;
  const fs::path dir = cfg.out_dir;
  if (!fs::is_directory(dir)) throw Error(ErrorKind::InvalidConfig, "out-dir " + dir.string() + " is not a directory");
  const auto forest = detail::forest_params(cfg);
  CommandOutput out;
  const std::string head = "estimator,reps,seed,resamples,tau_bar,mean_point,bias,bias_mc_se,mean_nominal_se,true_se";
  auto row = [](const MonteCarloSummary& s, const EstimatorSummary& e) {
    return io::csv_row({e.name, std::to_string(s.reps), std::to_string(s.seed), std::to_string(s.resamples),
                    io::format_number(s.tau_bar), io::format_number(e.mean_point), io::format_number(e.bias),
                    io::format_number(e.bias_mc_se), io::format_number(e.mean_nominal_se),
                    io::format_number(e.true_se)});
  };

  if (cfg.sim == 1) {
    const auto po = gen_sim1(cfg.seed);
    MonteCarloOptions mc;
    mc.reps = cfg.reps;
    mc.seed = cfg.seed;
    mc.threads = cfg.threads;
    const auto summary = monte_carlo(po, sweep_estimators(forest), mc);
    std::string csv = head + "\n";
    for (const auto& e : summary.estimators) csv += row(summary, e) + "\n";
    json doc;
    doc["schema_version"] = 1;
    doc["command"] = "simulate";
    doc["sim"] = 1;
    doc["seed"] = cfg.seed;
    doc["summary"] = detail::summary_json(summary);
    outputs.write(dir / "sim1.csv", csv);
    outputs.write(dir / "sim1.json", doc.dump(2) + "\n");
    for (const auto& e : summary.estimators)
      out.stdout_text += e.name + ": bias=" + detail::fmt(e.bias) + " (mc se " + detail::fmt(e.bias_mc_se) +
                         ") nominal_se=" + detail::fmt(e.mean_nominal_se) + " true_se=" + detail::fmt(e.true_se) + "\n";
    return out;
  }
  if (cfg.sim != 2) throw Error(ErrorKind::InvalidConfig, "sim must be 1 or 2");

  const auto axes = detail::sweep_axes(cfg.sweep);
  if (cfg.values && axes.size() != 1) throw Error(ErrorKind::InvalidConfig, "values need a single sweep axis");
  for (auto axis : axes) {
    SweepOptions opts;
    opts.axis = axis;
    if (cfg.values) opts.values = *cfg.values;
    opts.n_units = cfg.n_units;
    opts.k = cfg.k;
    opts.c = cfg.c;
    opts.trials = cfg.trials;
    opts.seed = cfg.seed;
    opts.forest = forest;
    opts.threads = cfg.threads;
    const auto result = sweep_sim2(opts);
    const std::string name = to_string(axis);

    std::string csv = "axis,value," + head + ",relative_true_se,relative_nominal_se\n";
    json points = json::array();
    for (const auto& point : result.points) {
      for (std::size_t e = 0; e < point.summary.estimators.size(); ++e)
        csv += name + "," + io::format_number(point.value) + "," + row(point.summary, point.summary.estimators[e]) +
               "," + io::format_number(point.relative_true_se[e]) + "," +
               io::format_number(point.relative_nominal_se[e]) + "\n";
      auto pj = detail::summary_json(point.summary);
      pj["value"] = point.value;
      pj["relative_true_se"] = point.relative_true_se;
      pj["relative_nominal_se"] = point.relative_nominal_se;
      points.push_back(pj);
    }
    json doc;
    doc["schema_version"] = 1;
    doc["command"] = "simulate";
    doc["sim"] = 2;
    doc["seed"] = cfg.seed;
    doc["axis"] = name;
    doc["estimators"] = result.estimators;
    doc["points"] = points;
    outputs.write(dir / ("sim2_" + name + ".csv"), csv);
    outputs.write(dir / ("sim2_" + name + ".json"), doc.dump(2) + "\n");
    if (cfg.svg) {
      std::vector<double> xs;
      std::vector<io::Series> series(result.estimators.size());
      for (std::size_t e = 0; e < series.size(); ++e) series[e].name = result.estimators[e];
      for (const auto& point : result.points) {
        xs.push_back(point.value);
        for (std::size_t e = 0; e < series.size(); ++e) series[e].y.push_back(point.relative_true_se[e]);
      }
      const std::string x_label = axis == SweepAxis::NoiseCovariates ? "noise covariates k"
                                  : axis == SweepAxis::Units         ? "units N"
                                                                     : "signal strength c";
      outputs.write(dir / ("sim2_" + name + ".svg"),
                    io::svg_line_chart("True SE relative to the simple difference", x_label, "relative true SE", xs,
                                       series));
    }
    for (const auto& point : result.points) {
      out.stdout_text += name + "=" + detail::fmt(point.value) + ":";
      for (std::size_t e = 0; e < result.estimators.size(); ++e)
        out.stdout_text += " " + result.estimators[e] + "=" + detail::fmt(point.relative_true_se[e], 4);
      out.stdout_text += "\n";
    }
  }
  return out;
}

inline CommandOutput run_oracle(const RunConfig& cfg, io::OutputSet& outputs) {
  if (!cfg.input) throw Error(ErrorKind::InvalidConfig, "oracle needs --input");
  if (!cfg.output) throw Error(ErrorKind::InvalidConfig, "oracle needs --output");
  std::map<std::string, std::vector<std::int64_t>> labels;
  auto po = io::read_table(io::read_csv(*cfg.input), cfg.treated_outcome, cfg.control_outcome, detail::columns(cfg),
                           &labels);
  po.design = detail::make_design(cfg, labels, po.p, nullptr);
  OracleOptions opts;
  opts.allow_conditioning = cfg.condition;
  opts.threads = cfg.threads;

  std::string table =
      "imputer,support_size,defined_probability,tau_bar,exact_mean_tau_hat,exact_bias,exact_var_tau_hat,exact_se,"
      "expected_var_hat,expected_se_hat\n";
  std::string units = "imputer,unit,tau,exact_mean_tau_hat,exact_var_tau_hat,mse_m_hat\n";
  CommandOutput out;
  for (const auto& kind : cfg.imputers) {
    const auto method = detail::imputer_method(cfg, kind, labels);
    const ImputerSpec spec{method, detail::drop_options(cfg, po.design, method)};
    const auto s = enumerate_oracle(po, spec, opts);
    const std::string id = imputer_id(method) + (spec.random_drop ? "+drop(" + to_string(spec.random_drop->mode) + ")" : "");
    const double ev = s.expected_var_hat.value_or(std::nan(""));
    table += io::csv_field(id) + "," + std::to_string(s.support_size) + "," + io::format_number(s.defined_probability) +
             "," + io::format_number(s.tau_bar) + "," + io::format_number(s.mean_tau_hat) + "," +
             io::format_number(s.mean_tau_hat - s.tau_bar) + "," + io::format_number(s.var_tau_hat) + "," +
             io::format_number(std::sqrt(s.var_tau_hat)) + "," + io::format_number(ev) + "," +
             io::format_number(std::sqrt(ev)) + "\n";
    for (std::size_t i = 0; i < s.per_unit.size(); ++i) {
      const auto& u = s.per_unit[i];
      units += io::csv_field(id) + "," + std::to_string(i + 1) + "," + io::format_number(u.tau) + "," +
               io::format_number(u.mean_tau_hat) + "," + io::format_number(u.var_tau_hat) + "," +
               io::format_number(u.mse_m) + "\n";
    }
    out.stdout_text += id + ": E[tau_hat]=" + detail::fmt(s.mean_tau_hat, 10) + " tau_bar=" + detail::fmt(s.tau_bar, 10) +
                       " exact_se=" + detail::fmt(std::sqrt(s.var_tau_hat)) +
                       " expected_se_hat=" + detail::fmt(std::sqrt(ev)) + (s.conditioned ? " (conditioned)" : "") +
                       "\n";
  }
  outputs.write(*cfg.output, table);
  if (cfg.units_output) outputs.write(*cfg.units_output, units);
  return out;
}

/// 2 for problems with the input or configuration, 3 for everything else.
inline int exit_code(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::Domain:
    case ErrorKind::InvalidExperiment:
    case ErrorKind::InsufficientArm:
    case ErrorKind::NonConstantP:
    case ErrorKind::StratumTooSmall:
    case ErrorKind::UnsupportedImputer:
    case ErrorKind::EmptyOppositeArm:
    case ErrorKind::ParseError:
    case ErrorKind::MissingColumn:
    case ErrorKind::NonBinaryTreatment:
    case ErrorKind::ProbabilityOutOfRange:
    case ErrorKind::InvalidConfig:
      return 2;
    default:
      return 3;
  }
}

inline std::string error_json(std::string_view kind, const std::string& message, int code) {
  json j;
  j["schema_version"] = 1;
  j["error"] = {{"kind", kind}, {"message", message}, {"exit_code", code}};
  return j.dump() + "\n";
}

/// Runs one command. Output files appear only if the whole command succeeds.
inline int run(const RunConfig& cfg, std::ostream& out, std::ostream& err) {
  io::OutputSet outputs;
  try {
    CommandOutput result;
    if (cfg.command == "estimate") {
      result = run_estimate(cfg, outputs);
    } else if (cfg.command == "simulate") {
      result = run_simulate(cfg, outputs);
    } else if (cfg.command == "oracle") {
      result = run_oracle(cfg, outputs);
    } else {
      throw Error(ErrorKind::InvalidConfig, "unknown command '" + cfg.command + "'");
    }
    out << result.stdout_text;
    return 0;
  } catch (const Error& e) {
    outputs.rollback();
    const int code = exit_code(e.kind());
    err << error_json(to_string(e.kind()), e.what(), code);
    return code;
  } catch (const std::exception& e) {
    outputs.rollback();
    err << error_json("Internal", e.what(), 3);
    return 3;
  }
}

}  // namespace loop::cli
