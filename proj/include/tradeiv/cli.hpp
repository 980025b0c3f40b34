#pragma once

#include <CLI11.hpp>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <json.hpp>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "tradeiv/csv.hpp"
#include "tradeiv/datamodel.hpp"
#include "tradeiv/diagnostics.hpp"
#include "tradeiv/error.hpp"
#include "tradeiv/estimate.hpp"
#include "tradeiv/gravity.hpp"
#include "tradeiv/ingest.hpp"
#include "tradeiv/magnitude.hpp"
#include "tradeiv/shiftshare.hpp"
#include "tradeiv/simulate.hpp"

namespace tradeiv::cli {

using nlohmann::json;

// ---------------------------------------------------------------------------
// Key-value configuration files: '[section]' headers, 'key = value' lines,
// '#' comments. Unknown keys are rejected so typos fail loudly.
// ---------------------------------------------------------------------------

using KvSections = std::map<std::string, std::vector<std::pair<std::string, std::string>>>;

namespace detail {

inline std::string trim(const std::string& s) {
  const auto a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  const auto b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

inline KvSections parse_kv_file(const std::string& path) {
  std::ifstream in(path);
  require(in.good(), "cannot open config file '", path, "'");
  KvSections out;
  std::string line, section;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const std::string t = trim(line);
    if (t.empty() || t[0] == '#') continue;
    if (t.front() == '[') {
      require(t.back() == ']', "config '", path, "' line ", lineno, ": malformed section header");
      section = trim(t.substr(1, t.size() - 2));
      out[section];
      continue;
    }
    const auto eq = t.find('=');
    require(eq != std::string::npos, "config '", path, "' line ", lineno,
            ": expected key = value");
    out[section].push_back({trim(t.substr(0, eq)), trim(t.substr(eq + 1))});
  }
  return out;
}

inline double to_real(const std::string& key, const std::string& value) {
  try {
    std::size_t pos = 0;
    const double v = std::stod(value, &pos);
    require(pos == value.size(), "");
    return v;
  } catch (...) {
    fail("key '", key, "': '", value, "' is not a number");
  }
}

inline long long to_int(const std::string& key, const std::string& value) {
  try {
    std::size_t pos = 0;
    const long long v = std::stoll(value, &pos);
    require(pos == value.size(), "");
    return v;
  } catch (...) {
    fail("key '", key, "': '", value, "' is not an integer");
  }
}

inline bool to_bool(const std::string& key, const std::string& value) {
  if (value == "true" || value == "1" || value == "yes") return true;
  if (value == "false" || value == "0" || value == "no") return false;
  fail("key '", key, "': '", value, "' is not a boolean");
}

inline std::vector<std::string> split_list(const std::string& value) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : value) {
    if (c == ',') {
      if (!trim(cur).empty()) out.push_back(trim(cur));
      cur.clear();
    } else {
      cur += c;
    }
  }
  if (!trim(cur).empty()) out.push_back(trim(cur));
  return out;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Pipeline configuration.
// ---------------------------------------------------------------------------

struct PipelineConfig {
  std::map<std::string, std::string> paths;  // named input files, plus output_dir
  std::string focal = "USA";
  std::vector<std::string> competitors;
  double sigma = 3.0;
  int observed_lag = 1;
  int giv_lag = 3;
  double winsor_lo = 0.005;
  double winsor_hi = 0.995;
  bool winsor_per_period = false;
  std::string weight_column = "weight";
  std::string cluster_column = "cluster";
  int threads = 1;
};

inline PipelineConfig load_config(const std::string& path) {
  static const std::set<std::string> path_keys = {
      "flows",  "tariffs",  "price_index", "crosswalk",  "exclusions", "limits",
      "panel",  "exposure", "production",  "netexport",  "output_dir"};
  PipelineConfig cfg;
  for (const auto& [section, entries] : detail::parse_kv_file(path)) {
    for (const auto& [key, value] : entries) {
      if (section == "paths") {
        require(path_keys.count(key), "unknown key '", key, "' in section [paths]");
        cfg.paths[key] = value;
      } else if (section == "gravity") {
        if (key == "sigma")
          cfg.sigma = detail::to_real(key, value);
        else if (key == "focal")
          cfg.focal = value;
        else if (key == "competitors")
          cfg.competitors = detail::split_list(value);
        else
          fail("unknown key '", key, "' in section [gravity]");
      } else if (section == "shiftshare") {
        if (key == "observed_lag")
          cfg.observed_lag = static_cast<int>(detail::to_int(key, value));
        else if (key == "giv_lag")
          cfg.giv_lag = static_cast<int>(detail::to_int(key, value));
        else
          fail("unknown key '", key, "' in section [shiftshare]");
      } else if (section == "estimate") {
        if (key == "winsor_lo")
          cfg.winsor_lo = detail::to_real(key, value);
        else if (key == "winsor_hi")
          cfg.winsor_hi = detail::to_real(key, value);
        else if (key == "winsor_per_period")
          cfg.winsor_per_period = detail::to_bool(key, value);
        else if (key == "weight")
          cfg.weight_column = value;
        else if (key == "cluster")
          cfg.cluster_column = value;
        else
          fail("unknown key '", key, "' in section [estimate]");
      } else if (section == "run") {
        if (key == "threads")
          cfg.threads = static_cast<int>(detail::to_int(key, value));
        else
          fail("unknown key '", key, "' in section [run]");
      } else {
        fail("unknown section [", section, "] in '", path, "'");
      }
    }
  }
  require(cfg.sigma > 1.0, "sigma must exceed 1, got ", cfg.sigma);
  require(cfg.observed_lag >= 1, "observed_lag must be positive, got ", cfg.observed_lag);
  require(cfg.giv_lag >= 1, "giv_lag must be positive, got ", cfg.giv_lag);
  require(cfg.winsor_lo >= 0.0 && cfg.winsor_lo < cfg.winsor_hi && cfg.winsor_hi <= 1.0,
          "winsor quantiles must satisfy 0 <= lo < hi <= 1");
  require(cfg.threads >= 1, "threads must be positive");
  return cfg;
}

// Regression specification file: flat key = value.
inline RegressionSpec load_regression_spec(const std::string& path) {
  RegressionSpec spec;
  std::optional<double> wlo, whi;
  bool wpp = false;
  for (const auto& [section, entries] : detail::parse_kv_file(path)) {
    require(section.empty(), "regression spec '", path, "' must not contain sections, found [",
            section, "]");
    for (const auto& [key, value] : entries) {
      if (key == "outcome")
        spec.outcome = value;
      else if (key == "endogenous")
        spec.endogenous = detail::split_list(value);
      else if (key == "instruments")
        spec.instruments = detail::split_list(value);
      else if (key == "controls")
        spec.controls = detail::split_list(value);
      else if (key == "weight")
        spec.weight = value;
      else if (key == "cluster")
        spec.cluster = value;
      else if (key == "periods")
        spec.periods = detail::split_list(value);
      else if (key == "interact_periods")
        spec.interact_with_period = detail::to_bool(key, value);
      else if (key == "flag_interaction")
        spec.flag_interaction = value;
      else if (key == "winsor_lo")
        wlo = detail::to_real(key, value);
      else if (key == "winsor_hi")
        whi = detail::to_real(key, value);
      else if (key == "winsor_per_period")
        wpp = detail::to_bool(key, value);
      else
        fail("unknown key '", key, "' in regression spec '", path, "'");
    }
  }
  require(!spec.outcome.empty(), "regression spec needs an outcome");
  require(!spec.endogenous.empty(), "regression spec needs endogenous regressors");
  require(!spec.instruments.empty(), "regression spec needs instruments");
  require(!spec.periods.empty(), "regression spec needs periods");
  require(wlo.has_value() == whi.has_value(),
          "winsor_lo and winsor_hi must be given together");
  if (wlo) {
    spec.winsor = WinsorRule{*wlo, *whi, wpp};
    validate(*spec.winsor);
  }
  return spec;
}

inline simulate::ScenarioConfig load_scenario(const std::string& path) {
  simulate::ScenarioConfig c;
  for (const auto& [section, entries] : detail::parse_kv_file(path)) {
    require(section.empty(), "scenario config must not contain sections, found [", section, "]");
    for (const auto& [key, value] : entries) {
      if (key == "competitors")
        c.n_competitors = static_cast<int>(detail::to_int(key, value));
      else if (key == "destinations")
        c.n_destinations = static_cast<int>(detail::to_int(key, value));
      else if (key == "industries")
        c.n_industries = static_cast<int>(detail::to_int(key, value));
      else if (key == "regions")
        c.n_regions = static_cast<int>(detail::to_int(key, value));
      else if (key == "counties_per_region")
        c.counties_per_region = static_cast<int>(detail::to_int(key, value));
      else if (key == "first_year")
        c.first_year = static_cast<int>(detail::to_int(key, value));
      else if (key == "years")
        c.n_years = static_cast<int>(detail::to_int(key, value));
      else if (key == "sigma")
        c.sigma_true = detail::to_real(key, value);
      else if (key == "tariff_volatility")
        c.tariff_volatility = detail::to_real(key, value);
      else if (key == "fe_industry_sd")
        c.fe_industry_sd = detail::to_real(key, value);
      else if (key == "fe_country_sd")
        c.fe_country_sd = detail::to_real(key, value);
      else if (key == "fe_pair_sd")
        c.fe_pair_sd = detail::to_real(key, value);
      else if (key == "fe_demand_sd")
        c.fe_demand_sd = detail::to_real(key, value);
      else if (key == "flow_noise_sd")
        c.flow_noise_sd = detail::to_real(key, value);
      else if (key == "first_stage_slope")
        c.first_stage_slope = detail::to_real(key, value);
      else if (key == "structural_slope")
        c.structural_slope = detail::to_real(key, value);
      else if (key == "structural_slope_bust")
        c.structural_slope_bust = detail::to_real(key, value);
      else if (key == "confounder_loading")
        c.confounder_loading = detail::to_real(key, value);
      else if (key == "credit_noise_sd")
        c.credit_noise_sd = detail::to_real(key, value);
      else if (key == "employment_noise_sd")
        c.employment_noise_sd = detail::to_real(key, value);
      else if (key == "seed")
        c.seed = static_cast<std::uint64_t>(detail::to_int(key, value));
      else
        fail("unknown key '", key, "' in scenario config '", path, "'");
    }
  }
  simulate::validate(c);
  return c;
}

// ---------------------------------------------------------------------------
// JSON serialization.
// ---------------------------------------------------------------------------

inline json to_json(const estimate::EstimationResult& r) {
  json coeffs = json::array();
  for (std::size_t i = 0; i < r.labels.size(); ++i) {
    coeffs.push_back({{"name", r.labels[i].name},
                      {"period", r.labels[i].period},
                      {"coef", r.coef(static_cast<Eigen::Index>(i))},
                      {"se", std::sqrt(r.vcov(static_cast<Eigen::Index>(i),
                                              static_cast<Eigen::Index>(i)))}});
  }
  return {{"method", r.method},
          {"n", r.n},
          {"clusters", r.n_clusters},
          {"coefficients", coeffs}};
}

inline json to_json(const diagnostics::DiagnosticsReport& d) {
  json out;
  out["robust_f"] = json::array();
  for (const auto& f : d.robust_f)
    out["robust_f"].push_back(
        {{"name", f.endogenous.name}, {"period", f.endogenous.period}, {"value", f.value}});
  out["sw_f"] = json::array();
  for (const auto& f : d.sw_f)
    out["sw_f"].push_back(
        {{"name", f.endogenous.name}, {"period", f.endogenous.period}, {"value", f.value}});
  out["efficient_f"] = json::array();
  for (const auto& e : d.efficient_f)
    out["efficient_f"].push_back({{"period", e.period}, {"value", e.value}});
  out["joint_strength_p"] = json::array();
  for (const auto& e : d.joint_strength_p)
    out["joint_strength_p"].push_back({{"period", e.period}, {"value", e.value}});
  out["equality"] = json::array();
  for (const auto& e : d.equality)
    out["equality"].push_back({{"a_name", e.a.name},
                               {"a_period", e.a.period},
                               {"b_name", e.b.name},
                               {"b_period", e.b.period},
                               {"chi2", e.statistic},
                               {"dof", e.dof},
                               {"p", e.p_value}});
  return out;
}

inline json results_json(const RegressionSpec& spec, const estimate::SpecRun& run,
                         const diagnostics::DiagnosticsReport& report) {
  json winsor = json::array();
  for (const auto& w : run.winsor_applied)
    winsor.push_back({{"period", w.period}, {"lo", w.bounds.lo}, {"hi", w.bounds.hi}});
  json first_stages = json::array();
  for (const auto& fs : run.iv.first_stages) first_stages.push_back(to_json(fs));
  json spec_json = {{"outcome", spec.outcome},
                    {"endogenous", spec.endogenous},
                    {"instruments", spec.instruments},
                    {"controls", spec.controls},
                    {"weight", spec.weight},
                    {"cluster", spec.cluster},
                    {"periods", spec.periods},
                    {"interact_periods", spec.interact_with_period}};
  if (spec.flag_interaction) spec_json["flag_interaction"] = *spec.flag_interaction;
  return {{"spec", spec_json},
          {"n", run.ols.n},
          {"clusters", run.ols.n_clusters},
          {"winsor", winsor},
          {"panels",
           {{"ols", to_json(run.ols)},
            {"reduced_form", to_json(run.iv.reduced_form)},
            {"first_stage", first_stages},
            {"second_stage", to_json(run.iv.second_stage)}}},
          {"diagnostics", to_json(report)}};
}

inline json to_json(const gravity::GravityFit& fit) {
  return {{"side", fit.side},
          {"sigma", fit.sigma},
          {"beta_own_tariff", fit.beta_own_tariff},
          {"beta_competitor_index", fit.beta_competitor_index},
          {"se_own_tariff", fit.se_own_tariff},
          {"se_competitor_index", fit.se_competitor_index},
          {"residual_variance", fit.residual_variance},
          {"rss", fit.rss},
          {"n_obs", fit.n_obs},
          {"convergence",
           {{"iterations", fit.convergence.iterations},
            {"max_change", fit.convergence.max_change},
            {"converged", fit.convergence.converged}}},
          {"fixed_effects",
           {{"industry_year", fit.fe_industry_year}, {"partner", fit.fe_partner}}}};
}

inline gravity::GravityFit gravity_fit_from_json(const json& j) {
  gravity::GravityFit fit;
  fit.side = j.at("side").get<std::string>();
  fit.sigma = j.at("sigma").get<double>();
  fit.beta_own_tariff = j.at("beta_own_tariff").get<double>();
  fit.beta_competitor_index = j.at("beta_competitor_index").get<double>();
  fit.se_own_tariff = j.at("se_own_tariff").get<double>();
  fit.se_competitor_index = j.at("se_competitor_index").get<double>();
  fit.residual_variance = j.at("residual_variance").get<double>();
  fit.rss = j.at("rss").get<double>();
  fit.n_obs = j.at("n_obs").get<std::size_t>();
  fit.convergence.iterations = j.at("convergence").at("iterations").get<std::size_t>();
  fit.convergence.max_change = j.at("convergence").at("max_change").get<double>();
  fit.convergence.converged = j.at("convergence").at("converged").get<bool>();
  fit.fe_industry_year =
      j.at("fixed_effects").at("industry_year").get<std::map<std::string, double>>();
  fit.fe_partner = j.at("fixed_effects").at("partner").get<std::map<std::string, double>>();
  return fit;
}

namespace detail {

inline void write_json(const std::string& path, const json& j) {
  std::ofstream out(path);
  require(out.good(), "cannot write '", path, "'");
  out << j.dump(2) << "\n";
}

inline json read_json(const std::string& path) {
  std::ifstream in(path);
  require(in.good(), "cannot open '", path, "'");
  json j;
  in >> j;
  return j;
}

inline void ensure_dir(const std::string& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  require(!ec, "cannot create output directory '", dir, "'");
}

inline std::string fmt(double v) { return csv::format_double(v); }

}  // namespace detail

// ---------------------------------------------------------------------------
// Subcommand implementations.
// ---------------------------------------------------------------------------

namespace commands {

inline void deflate(const std::string& input, const std::string& index_path, int base_year,
                    const std::string& out_path) {
  const auto index = ingest::read_price_index(index_path, base_year);
  csv::Schema schema{{{"year", csv::ColumnType::Int}, {"value", csv::ColumnType::Real}}};
  auto table = csv::read_table(input, &schema);
  csv::Writer writer(out_path, table.header);
  for (const auto& row : table.rows) {
    std::vector<std::string> cells;
    for (const auto& col : table.header) {
      if (col == "value") {
        const double deflated = ingest::deflate(
            row.real("value"), static_cast<int>(row.integer("year")), index);
        cells.push_back(detail::fmt(deflated));
      } else {
        cells.push_back(row.str(col));
      }
    }
    writer.row(cells);
  }
}

inline void crosswalk(const std::string& input, const std::string& table_path, bool single_best,
                      bool drop_missing, const std::string& direction,
                      const std::string& out_path) {
  const auto xw = ingest::read_crosswalk(table_path, direction, single_best);
  csv::Schema schema{{{"code", csv::ColumnType::String},
                      {"year", csv::ColumnType::Int},
                      {"value", csv::ColumnType::Real}}};
  auto table = csv::read_table(input, &schema);
  std::map<int, std::map<std::string, double>> by_year;
  for (const auto& row : table.rows)
    by_year[static_cast<int>(row.integer("year"))][row.str("code")] += row.real("value");

  csv::Writer writer(out_path, {"code", "year", "value"});
  std::size_t dropped = 0;
  for (const auto& [year, series] : by_year) {
    const auto result = ingest::apply_crosswalk(
        series, xw,
        drop_missing ? ingest::MissingSource::DropWithWarning : ingest::MissingSource::Error);
    dropped += result.dropped_sources.size();
    for (const auto& [code, value] : result.values)
      writer.row({code, std::to_string(year), detail::fmt(value)});
  }
  if (dropped > 0)
    std::cerr << "crosswalk: dropped " << dropped << " source codes not in the table\n";
}

inline void gravity_fit(const std::string& side_str, double sigma,
                        const std::string& sigma_grid, const std::string& flows_path,
                        const std::string& tariffs_path, const std::string& competitors_csv,
                        const std::string& focal, const std::string& out_path) {
  const auto side = gravity::side_from_string(side_str);
  const auto competitors = detail::split_list(competitors_csv);
  const auto flows = ingest::read_trade_flows(flows_path);
  const auto tariffs = ingest::read_tariffs(tariffs_path);

  gravity::SigmaConfig config;
  config.sigma = sigma;
  json profile_json;
  if (!sigma_grid.empty()) {
    for (const auto& s : detail::split_list(sigma_grid))
      config.grid.push_back(detail::to_real("sigma-grid", s));
    const auto profile =
        gravity::profile_sigma(flows, tariffs, side, focal, competitors, config);
    config.sigma = profile.best_sigma;
    profile_json = json::array();
    for (const auto& p : profile.points)
      profile_json.push_back({{"sigma", p.sigma}, {"rss", p.rss}});
    std::cerr << "sigma grid: selected " << config.sigma << " by residual sum of squares\n";
  }
  validate(config);

  const auto rows =
      gravity::build_design_rows(flows, tariffs, side, focal, competitors, config.sigma);
  const auto fit = gravity::fit_gravity(rows, side, config.sigma);
  json out = to_json(fit);
  out["focal"] = focal;
  out["competitors"] = competitors;
  if (!profile_json.is_null()) out["sigma_profile"] = profile_json;
  detail::write_json(out_path, out);
  std::cerr << "gravity fit (" << side_str << "): beta_own " << fit.beta_own_tariff
            << ", beta_competitor " << fit.beta_competitor_index << ", n " << fit.n_obs << "\n";
}

inline void gravity_predict(const std::string& fit_path, const std::string& flows_path,
                            const std::string& tariffs_path, const std::string& out_path) {
  const json fit_json = detail::read_json(fit_path);
  const auto fit = gravity_fit_from_json(fit_json);
  const auto focal = fit_json.at("focal").get<std::string>();
  const auto competitors = fit_json.at("competitors").get<std::vector<std::string>>();
  const auto side = gravity::side_from_string(fit.side);
  const auto flows = ingest::read_trade_flows(flows_path);
  const auto tariffs = ingest::read_tariffs(tariffs_path);
  const auto rows =
      gravity::build_design_rows(flows, tariffs, side, focal, competitors, fit.sigma);

  csv::Writer writer(out_path, {"product", "partner", "year", "ln_predicted", "predicted"});
  for (const auto& r : rows) {
    const double ln_hat = gravity::predict_flow(fit, r);
    writer.row({r.product, r.partner, std::to_string(r.year), detail::fmt(ln_hat),
                detail::fmt(std::exp(ln_hat))});
  }
}

inline void gravity_aggregate(const std::string& pred_path, const std::string& xw_path,
                              bool single_best, const std::string& out_path) {
  const auto xw = ingest::read_crosswalk(xw_path, "product->industry", single_best);
  csv::Schema schema{{{"product", csv::ColumnType::String},
                      {"partner", csv::ColumnType::String},
                      {"year", csv::ColumnType::Int},
                      {"ln_predicted", csv::ColumnType::Real}}};
  auto table = csv::read_table(pred_path, &schema);
  std::vector<gravity::PredictedFlow> preds;
  preds.reserve(table.rows.size());
  for (const auto& row : table.rows)
    preds.push_back({row.str("product"), row.str("partner"),
                     static_cast<int>(row.integer("year")), row.real("ln_predicted")});
  const auto agg = gravity::aggregate_predicted(preds, xw);
  csv::Writer writer(out_path, {"industry", "year", "value"});
  for (const auto& [key, value] : agg)
    writer.row({key.first, std::to_string(key.second), detail::fmt(value)});
}

// Accepts either an `industry` or a `code` label column, so crosswalk output
// feeds straight in.
inline shiftshare::IndustryYearTable read_industry_year(const std::string& path) {
  csv::Schema schema{{{"year", csv::ColumnType::Int}, {"value", csv::ColumnType::Real}}};
  auto table = csv::read_table(path, &schema);
  const std::string label = table.has_column("industry") ? "industry" : "code";
  require(table.has_column(label), "'", path, "': need an industry or code column");
  shiftshare::IndustryYearTable out;
  for (const auto& row : table.rows)
    out[{row.str(label), static_cast<int>(row.integer("year"))}] += row.real("value");
  return out;
}

// Sums one country's bilateral flows over partners into a (code, year, value)
// series: the export side keeps rows the country ships, the import side rows
// it receives.
inline void netexport_trade(const std::string& flows_path, const std::string& focal,
                            const std::string& side, const std::string& out_path) {
  require(side == "export" || side == "import", "side must be export or import, got '", side,
          "'");
  const auto flows = ingest::read_trade_flows(flows_path);
  std::map<std::pair<std::string, int>, double> sums;
  for (const auto& f : flows) {
    if (side == "export" && f.exporter == focal)
      sums[{f.product, f.year}] += f.value;
    else if (side == "import" && f.importer == focal)
      sums[{f.product, f.year}] += f.value;
  }
  require(!sums.empty(), "no ", side, " flows found for country '", focal, "'");
  csv::Writer writer(out_path, {"code", "year", "value"});
  for (const auto& [key, value] : sums)
    writer.row({key.first, std::to_string(key.second), detail::fmt(value)});
}

inline void netexport_build(const std::string& exports_path, const std::string& imports_path,
                            const std::string& production_path, const std::string& out_path) {
  csv::Schema prod_schema{{{"industry", csv::ColumnType::String},
                           {"value", csv::ColumnType::Real}}};
  auto prod_table = csv::read_table(production_path, &prod_schema);
  std::map<std::string, double> production;
  for (const auto& row : prod_table.rows) production[row.str("industry")] = row.real("value");

  const auto series = shiftshare::build_net_export(read_industry_year(exports_path),
                                                   read_industry_year(imports_path), production);
  csv::Writer writer(out_path, {"industry", "year", "value"});
  for (const auto& s : series)
    writer.row({s.industry, std::to_string(s.year), detail::fmt(s.net_export_ratio)});
}

inline std::vector<RegionExposure> read_exposure(const std::string& path) {
  csv::Schema schema{{{"region", csv::ColumnType::String},
                      {"industry", csv::ColumnType::String},
                      {"share", csv::ColumnType::Real},
                      {"base_year", csv::ColumnType::Int}}};
  auto table = csv::read_table(path, &schema);
  std::vector<RegionExposure> out;
  out.reserve(table.rows.size());
  for (const auto& row : table.rows)
    out.push_back({row.str("region"), row.str("industry"), row.real("share"),
                   static_cast<int>(row.integer("base_year"))});
  return out;
}

inline void shiftshare_aggregate(const std::string& netexport_path,
                                 const std::string& exposure_path, int from_year, int to_year,
                                 int lag, const std::string& kind_str,
                                 const std::string& out_path) {
  const auto series = read_industry_year(netexport_path);
  const auto kind = shiftshare::kind_from_string(kind_str);
  std::vector<RegionExposure> exposure;
  for (auto& e : read_exposure(exposure_path))
    if (e.base_year == from_year - lag) exposure.push_back(std::move(e));
  require(!exposure.empty(), "no exposure rows with base year ", from_year - lag);
  const auto changes =
      shiftshare::aggregate_regions(series, exposure, from_year, to_year, lag, kind);
  csv::Writer writer(out_path, {"region", "period", "value", "kind"});
  const std::string period = std::to_string(from_year) + "-" + std::to_string(to_year);
  for (const auto& ch : changes)
    writer.row({ch.region, period, detail::fmt(ch.value), kind_str});
}

inline void cohort(const std::string& input, int groups, std::optional<int> base_year,
                   const std::string& out_path) {
  csv::Schema schema{{{"unit", csv::ColumnType::String},
                      {"year", csv::ColumnType::Int},
                      {"value", csv::ColumnType::Real},
                      {"weight", csv::ColumnType::Real},
                      {"sort_key", csv::ColumnType::Real}}};
  auto table = csv::read_table(input, &schema);
  std::vector<shiftshare::CohortObservation> panel;
  std::map<std::string, double> sort_key;
  for (const auto& row : table.rows) {
    const std::string unit = row.str("unit");
    const double key = row.real("sort_key");
    if (auto it = sort_key.find(unit); it != sort_key.end())
      require(it->second == key, "sort_key for unit '", unit, "' is not constant");
    sort_key[unit] = key;
    panel.push_back({unit, static_cast<int>(row.integer("year")), row.real("value"),
                     row.real("weight")});
  }
  const auto series = shiftshare::cohort_series(panel, sort_key, groups, base_year);
  csv::Writer writer(out_path, {"group", "year", "value"});
  for (const auto& s : series)
    for (const auto& [year, value] : s.values)
      writer.row({s.group, std::to_string(year), detail::fmt(value)});
}

inline void estimate_cmd(const std::string& spec_path, const std::string& panel_path,
                         const std::string& out_path) {
  const auto spec = load_regression_spec(spec_path);
  std::set<std::string> flag_columns;
  if (spec.flag_interaction) flag_columns.insert(*spec.flag_interaction);
  auto rows = ingest::read_panel(panel_path, flag_columns);

  // The cluster id defaults to the panel's `cluster` column; a spec may name
  // a different numeric column instead.
  if (!spec.cluster.empty() && spec.cluster != "cluster") {
    for (auto& row : rows) {
      auto it = row.values.find(spec.cluster);
      require(it != row.values.end(), "cluster column '", spec.cluster,
              "' missing for unit '", row.unit, "'");
      row.cluster = csv::format_double(it->second);
    }
  }

  const auto report = validate_panel(rows, spec);
  if (!report.ok()) {
    std::string msg = "panel validation failed:";
    for (std::size_t i = 0; i < report.violations.size() && i < 5; ++i)
      msg += "\n  row " + std::to_string(report.violations[i].row) + ": " +
             report.violations[i].message;
    if (report.violations.size() > 5)
      msg += "\n  (+" + std::to_string(report.violations.size() - 5) + " more)";
    fail(msg);
  }

  const auto run = estimate::run_spec(rows, spec);
  const auto diag = diagnostics::build_report(run);
  detail::write_json(out_path, results_json(spec, run, diag));
  std::cerr << "estimate: n " << run.ols.n << ", clusters " << run.ols.n_clusters << ", wrote "
            << out_path << "\n";
}

inline void diagnose(const std::string& results_path, std::ostream& out = std::cout) {
  const json j = detail::read_json(results_path);
  require(j.contains("diagnostics"), "'", results_path, "' has no diagnostics section");
  const json& d = j.at("diagnostics");
  out << "First-stage strength\n";
  for (const auto& f : d.at("robust_f"))
    out << "  robust F  " << f.at("name").get<std::string>() << "["
        << f.at("period").get<std::string>() << "] = " << f.at("value").get<double>() << "\n";
  for (const auto& f : d.at("efficient_f"))
    out << "  efficient F [" << f.at("period").get<std::string>()
        << "] = " << f.at("value").get<double>() << "\n";
  for (const auto& f : d.at("sw_f"))
    out << "  SW F      " << f.at("name").get<std::string>() << "["
        << f.at("period").get<std::string>() << "] = " << f.at("value").get<double>() << "\n";
  for (const auto& f : d.at("joint_strength_p"))
    out << "  joint strength p [" << f.at("period").get<std::string>()
        << "] = " << f.at("value").get<double>() << "\n";
  if (!d.at("equality").empty()) {
    out << "Coefficient equality\n";
    for (const auto& e : d.at("equality"))
      out << "  " << e.at("a_name").get<std::string>() << "["
          << e.at("a_period").get<std::string>() << "] vs " << e.at("b_name").get<std::string>()
          << "[" << e.at("b_period").get<std::string>() << "]: chi2("
          << e.at("dof").get<int>() << ") = " << e.at("chi2").get<double>()
          << ", p = " << e.at("p").get<double>() << "\n";
  }
}

inline void magnitude_cmd(double coef, double sd_x, double sd_y, int years_x, int years_y,
                          bool scale100, std::optional<double> claimed,
                          std::ostream& out = std::cout) {
  magnitude::MagnitudeInput in;
  in.coefficient = coef;
  in.sd_x = sd_x;
  in.sd_y = sd_y;
  in.years_x = years_x;
  in.years_y = years_y;
  in.scale_per_100 = scale100;
  in.claimed_effect_per_year = claimed;
  const auto r = magnitude::explained_share(in);
  json j = {{"effect_per_year", r.effect_per_year},
            {"cumulative_effect", r.cumulative_effect},
            {"cumulative_outcome_sd", r.cumulative_outcome_sd},
            {"explained_share_pct", r.explained_share_pct},
            {"sentence", magnitude::sentence(r, years_y)}};
  if (r.claimed_effect_per_year) {
    j["claimed_effect_per_year"] = *r.claimed_effect_per_year;
    j["claim_consistent"] = r.claim_consistent;
  }
  out << j.dump(2) << "\n";
}

inline void write_dataset(const simulate::ScenarioConfig& c, const simulate::Dataset& d,
                          const std::string& dir) {
  detail::ensure_dir(dir);
  const auto path = [&](const std::string& name) { return dir + "/" + name; };

  {
    csv::Writer w(path("flows.csv"), {"exporter", "importer", "product", "year", "value"});
    for (const auto& f : d.trade.flows)
      w.row({f.exporter, f.importer, f.product, std::to_string(f.year), detail::fmt(f.value)});
  }
  {
    csv::Writer w(path("tariffs.csv"), {"imposer", "partner", "product", "year", "gross_rate"});
    for (const auto& t : d.trade.tariffs)
      w.row({t.imposer, t.partner, t.product, std::to_string(t.year),
             detail::fmt(t.gross_rate)});
  }
  {
    csv::Writer w(path("price_index.csv"), {"year", "index"});
    for (int y = 0; y < c.n_years; ++y)
      w.row({std::to_string(c.first_year + y), "100"});
    // The simulator works in real terms; include the base year if the window
    // does not cover it so downstream deflation stays a no-op.
    if (2007 < c.first_year || 2007 >= c.first_year + c.n_years) w.row({"2007", "100"});
  }
  {
    csv::Writer w(path("crosswalk.csv"), {"source", "target", "weight"});
    for (int s = 0; s < c.n_industries; ++s)
      w.row({simulate::industry_name(s), simulate::industry_name(s), "1"});
  }
  {
    csv::Writer w(path("production.csv"), {"industry", "value"});
    for (const auto& [industry, value] : d.production)
      w.row({industry, detail::fmt(value)});
  }
  {
    csv::Writer w(path("exposure.csv"), {"region", "industry", "share", "base_year"});
    for (const auto& e : d.exposure_rows)
      w.row({e.region, e.industry, detail::fmt(e.share), std::to_string(e.base_year)});
  }
  {
    csv::Writer w(path("panel.csv"), {"unit", "cluster", "period", "emp_growth",
                                      "credit_growth", "giv_change", "netexp_change", "weight"});
    for (const auto& row : d.panel)
      w.row({row.unit, row.cluster, row.period, detail::fmt(row.values.at("emp_growth")),
             detail::fmt(row.values.at("credit_growth")),
             detail::fmt(row.values.at("giv_change")),
             detail::fmt(row.values.at("netexp_change")),
             detail::fmt(row.values.at("weight"))});
  }
  {
    const auto w = simulate::windows(c);
    detail::write_json(path("truth.json"),
                       {{"first_stage_slope", d.truth.first_stage_slope},
                        {"structural_slope_boom", d.truth.structural_slope_boom},
                        {"structural_slope_bust", d.truth.structural_slope_bust},
                        {"sigma", c.sigma_true},
                        {"windows",
                         {{"boom", {{"t1", w.boom.t1}, {"t2", w.boom.t2}}},
                          {"bust", {{"t1", w.bust.t1}, {"t2", w.bust.t2}}}}},
                        {"seed", c.seed}});
  }
}

inline void simulate_cmd(const std::string& config_path, std::size_t reps,
                         const std::string& out_dir, int threads) {
  simulate::ScenarioConfig c;
  if (!config_path.empty()) c = load_scenario(config_path);
  simulate::validate(c);
  detail::ensure_dir(out_dir);

  const auto dataset = simulate::build_dataset(c, 0);
  write_dataset(c, dataset, out_dir);

  const auto report = simulate::monte_carlo(c, reps, threads);
  json outcomes = json::array();
  for (const auto& o : report.outcomes)
    outcomes.push_back({{"tsls_boom", o.tsls_boom},
                        {"tsls_boom_se", o.tsls_boom_se},
                        {"tsls_bust", o.tsls_bust},
                        {"tsls_bust_se", o.tsls_bust_se},
                        {"ols_boom", o.ols_boom},
                        {"robust_f_boom", o.robust_f_boom},
                        {"ci_covers_boom", o.ci_covers_boom}});
  detail::write_json(out_dir + "/mc_report.json",
                     {{"reps", report.reps},
                      {"coverage_95", report.coverage_95},
                      {"median_abs_bias_ols", report.median_abs_bias_ols},
                      {"median_abs_bias_tsls", report.median_abs_bias_tsls},
                      {"f_median", report.f_median},
                      {"f_q10", report.f_q10},
                      {"f_q90", report.f_q90},
                      {"outcomes", outcomes}});
  std::cerr << "simulate: " << reps << " replications, coverage " << report.coverage_95
            << ", median F " << report.f_median << ", wrote " << out_dir << "\n";
}

}  // namespace commands

// ---------------------------------------------------------------------------
// Dispatch.
// ---------------------------------------------------------------------------

// Exit codes: 0 success, 1 validation/data error, 2 usage error.
inline int dispatch(std::vector<std::string> args, std::ostream& out = std::cout) {
  CLI::App app{"Trade-instrument construction and stacked IV estimation toolkit"};
  app.require_subcommand(1);
  int threads = 1;
  app.add_option("--threads", threads, "Worker threads for replication loops")
      ->check(CLI::PositiveNumber);

  // deflate
  auto* deflate = app.add_subcommand("deflate", "Convert nominal values to base-year units");
  std::string d_input, d_index, d_out;
  int d_base = 2007;
  deflate->add_option("--input", d_input, "CSV with year,value columns")->required();
  deflate->add_option("--index", d_index, "Price index CSV (year,index)")->required();
  deflate->add_option("--base-year", d_base, "Base year of the index");
  deflate->add_option("--out", d_out, "Output CSV")->required();

  // crosswalk
  auto* xw = app.add_subcommand("crosswalk", "Map a coded series through a weighted crosswalk");
  std::string x_input, x_table, x_out, x_direction = "crosswalk";
  bool x_single = false, x_drop = false;
  xw->add_option("--input", x_input, "CSV with code,year,value columns")->required();
  xw->add_option("--table", x_table, "Crosswalk CSV (source,target,weight)")->required();
  xw->add_option("--direction", x_direction, "Label used in error messages");
  xw->add_flag("--single-best", x_single, "Keep only the highest-weight target per source");
  xw->add_flag("--drop-missing", x_drop, "Drop unmapped source codes with a warning");
  xw->add_option("--out", x_out, "Output CSV")->required();

  // gravity fit|predict|aggregate
  auto* grav = app.add_subcommand("gravity", "Tariff-based trade regressions and predictions");
  grav->require_subcommand(1);
  auto* gfit = grav->add_subcommand("fit", "Fit the tariff regression for one side");
  std::string g_side, g_flows, g_tariffs, g_competitors, g_focal = "USA", g_out, g_grid;
  double g_sigma = 3.0;
  gfit->add_option("--side", g_side, "export or import")->required();
  gfit->add_option("--sigma", g_sigma, "Elasticity of substitution (> 1)");
  gfit->add_option("--sigma-grid", g_grid, "Comma list to profile; best RSS wins");
  gfit->add_option("--flows", g_flows, "Trade flow CSV")->required();
  gfit->add_option("--tariffs", g_tariffs, "Tariff CSV")->required();
  gfit->add_option("--competitors", g_competitors, "Comma list of competitor countries")
      ->required();
  gfit->add_option("--focal", g_focal, "Focal country code");
  gfit->add_option("--out", g_out, "Output fit JSON")->required();

  auto* gpred = grav->add_subcommand("predict", "Purged predictions from a stored fit");
  std::string p_fit, p_flows, p_tariffs, p_out;
  gpred->add_option("--fit", p_fit, "Fit JSON from gravity fit")->required();
  gpred->add_option("--flows", p_flows, "Trade flow CSV")->required();
  gpred->add_option("--tariffs", p_tariffs, "Tariff CSV")->required();
  gpred->add_option("--out", p_out, "Output CSV")->required();

  auto* gagg = grav->add_subcommand("aggregate",
                                    "Sum predictions over partners and crosswalk to industries");
  std::string a_pred, a_xw, a_out;
  bool a_single = false;
  gagg->add_option("--pred", a_pred, "Predictions CSV from gravity predict")->required();
  gagg->add_option("--crosswalk", a_xw, "Product-to-industry crosswalk CSV")->required();
  gagg->add_flag("--single-best", a_single, "Use single-best crosswalk mode");
  gagg->add_option("--out", a_out, "Output CSV (industry,year,value)")->required();

  // netexport trade|build
  auto* netexp = app.add_subcommand("netexport", "Industry net-export ratios");
  netexp->require_subcommand(1);
  auto* ntrade =
      netexp->add_subcommand("trade", "Sum one country's bilateral flows over partners");
  std::string t_flows, t_focal = "USA", t_side, t_out;
  ntrade->add_option("--flows", t_flows, "Trade flow CSV")->required();
  ntrade->add_option("--focal", t_focal, "Country whose flows are summed");
  ntrade->add_option("--side", t_side, "export or import")->required();
  ntrade->add_option("--out", t_out, "Output CSV (code,year,value)")->required();
  auto* nbuild = netexp->add_subcommand("build", "(exports - imports) / base production");
  std::string n_exports, n_imports, n_production, n_out;
  nbuild->add_option("--exports", n_exports, "CSV (industry,year,value)")->required();
  nbuild->add_option("--imports", n_imports, "CSV (industry,year,value)")->required();
  nbuild->add_option("--production", n_production, "CSV (industry,value)")->required();
  nbuild->add_option("--out", n_out, "Output CSV")->required();

  // shiftshare aggregate
  auto* ss = app.add_subcommand("shiftshare", "Regional exposure-weighted changes");
  ss->require_subcommand(1);
  auto* sagg = ss->add_subcommand("aggregate", "Aggregate industry changes to regions");
  std::string s_netexport, s_exposure, s_kind = "observed", s_out;
  int s_from = 0, s_to = 0, s_lag = 1;
  sagg->add_option("--netexport", s_netexport, "CSV (industry,year,value)")->required();
  sagg->add_option("--exposure", s_exposure, "CSV (region,industry,share,base_year)")
      ->required();
  sagg->add_option("--from", s_from, "Window start year")->required();
  sagg->add_option("--to", s_to, "Window end year")->required();
  sagg->add_option("--lag", s_lag, "Exposure lag: 1 observed, 3 for the instrument");
  sagg->add_option("--kind", s_kind, "observed or giv");
  sagg->add_option("--out", s_out, "Output CSV (region,period,value,kind)")->required();

  // cohort
  auto* coh = app.add_subcommand("cohort", "Quantile cohort time series");
  std::string c_input, c_out;
  int c_groups = 5, c_base = 0;
  coh->add_option("--input", c_input, "CSV (unit,year,value,weight,sort_key)")->required();
  coh->add_option("--groups", c_groups, "Number of quantile groups");
  auto* base_opt =
      coh->add_option("--base-year", c_base, "Scale each group by its value in this year");
  coh->add_option("--out", c_out, "Output CSV (group,year,value)")->required();

  // estimate
  auto* est = app.add_subcommand("estimate", "Run a declared regression specification");
  std::string e_spec, e_panel, e_out;
  est->add_option("--spec", e_spec, "Regression spec config file")->required();
  est->add_option("--panel", e_panel, "Panel CSV (unit,cluster,period,...)")->required();
  est->add_option("--out", e_out, "Results JSON")->required();

  // diagnose
  auto* diag = app.add_subcommand("diagnose", "Print the diagnostics block of a results file");
  std::string dg_results;
  diag->add_option("--results", dg_results, "Results JSON from estimate")->required();

  // magnitude
  auto* mag = app.add_subcommand("magnitude", "Explained-share arithmetic for one coefficient");
  double m_coef = 0.0, m_sdx = 0.0, m_sdy = 0.0, m_claimed = 0.0;
  int m_years_x = 1, m_years_y = 1;
  bool m_scale100 = false;
  mag->add_option("--coef", m_coef, "Coefficient (annualized)")->required();
  mag->add_option("--sd-x", m_sdx, "Cross-sectional SD of the annualized regressor, percent")
      ->required();
  mag->add_option("--sd-y", m_sdy, "Cross-sectional SD of the annualized outcome, percent")
      ->required();
  mag->add_option("--years-x", m_years_x, "Regressor horizon in years");
  mag->add_option("--years-y", m_years_y, "Outcome horizon in years");
  mag->add_flag("--scale100", m_scale100, "Coefficient comes from a x100 outcome");
  auto* claim_opt =
      mag->add_option("--claimed-per-year", m_claimed, "Printed per-year effect to audit");

  // simulate
  auto* sim = app.add_subcommand("simulate", "Generate synthetic data and run the pipeline");
  std::string sim_config, sim_out;
  std::size_t sim_reps = 1;
  sim->add_option("--config", sim_config, "Scenario config file (defaults when omitted)");
  sim->add_option("--reps", sim_reps, "Replications for the Monte Carlo report");
  sim->add_option("--out", sim_out, "Output directory")->required();

  for (auto* sub : app.get_subcommands({})) sub->fallthrough();

  try {
    std::reverse(args.begin(), args.end());
    app.parse(args);
  } catch (const CLI::CallForHelp& e) {
    out << app.help();
    return 0;
  } catch (const CLI::ParseError& e) {
    std::cerr << e.what() << "\n";
    std::cerr << "run with --help for usage\n";
    return 2;
  }

  try {
    if (*deflate) commands::deflate(d_input, d_index, d_base, d_out);
    if (*xw) commands::crosswalk(x_input, x_table, x_single, x_drop, x_direction, x_out);
    if (*grav && *gfit)
      commands::gravity_fit(g_side, g_sigma, g_grid, g_flows, g_tariffs, g_competitors, g_focal,
                            g_out);
    if (*grav && *gpred) commands::gravity_predict(p_fit, p_flows, p_tariffs, p_out);
    if (*grav && *gagg) commands::gravity_aggregate(a_pred, a_xw, a_single, a_out);
    if (*netexp && *ntrade) commands::netexport_trade(t_flows, t_focal, t_side, t_out);
    if (*netexp && *nbuild) commands::netexport_build(n_exports, n_imports, n_production, n_out);
    if (*ss && *sagg)
      commands::shiftshare_aggregate(s_netexport, s_exposure, s_from, s_to, s_lag, s_kind,
                                     s_out);
    if (*coh)
      commands::cohort(c_input, c_groups,
                       base_opt->count() > 0 ? std::optional<int>(c_base) : std::nullopt,
                       c_out);
    if (*est) commands::estimate_cmd(e_spec, e_panel, e_out);
    if (*diag) commands::diagnose(dg_results, out);
    if (*mag)
      commands::magnitude_cmd(m_coef, m_sdx, m_sdy, m_years_x, m_years_y, m_scale100,
                              claim_opt->count() > 0 ? std::optional<double>(m_claimed)
                                                     : std::nullopt,
                              out);
    if (*sim) commands::simulate_cmd(sim_config, sim_reps, sim_out, threads);
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}

}  // namespace tradeiv::cli
