#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include "tradeiv/datamodel.hpp"
#include "tradeiv/diagnostics.hpp"
#include "tradeiv/error.hpp"
#include "tradeiv/estimate.hpp"
#include "tradeiv/gravity.hpp"
#include "tradeiv/ingest.hpp"
#include "tradeiv/rng.hpp"
#include "tradeiv/shiftshare.hpp"

namespace tradeiv::simulate {

// ---------------------------------------------------------------------------
// Scenario configuration.
// ---------------------------------------------------------------------------

struct ScenarioConfig {
  int n_competitors = 4;
  int n_destinations = 6;
  int n_industries = 24;
  int n_regions = 40;
  int counties_per_region = 5;
  int first_year = 1999;
  int n_years = 10;

  double sigma_true = 3.0;
  double tariff_volatility = 0.4;   // SD of the half-normal log gross tariff draws
  double fe_industry_sd = 0.1;      // focal industry-year shifter dispersion
  double fe_country_sd = 0.2;       // country-level dispersion
  double fe_pair_sd = 0.2;          // bilateral trade-cost dispersion
  double fe_demand_sd = 1.2;        // destination-market shifter dispersion
  double flow_noise_sd = 0.0;       // log-normal multiplicative noise on flows

  double first_stage_slope = 22.0;   // net-export change -> credit growth
  double structural_slope = 0.5;     // credit growth -> employment growth, boom
  double structural_slope_bust = -0.5;
  double confounder_loading = 0.8;   // county confounder entering both equations
  double credit_noise_sd = 0.4;
  double employment_noise_sd = 0.5;

  std::uint64_t seed = 1;
};

inline void validate(const ScenarioConfig& c) {
  require(c.n_competitors >= 2, "need at least 2 competitor countries");
  require(c.n_destinations >= 2, "need at least 2 destination countries");
  require(c.n_industries >= 2, "need at least 2 industries");
  require(c.n_regions >= 2, "need at least 2 regions");
  require(c.counties_per_region >= 1, "need at least 1 county per region");
  require(c.n_years >= 10, "need at least 10 years to cover the boom and bust windows");
  require(c.sigma_true > 1.0, "sigma_true must exceed 1");
  for (double v : {c.tariff_volatility, c.fe_industry_sd, c.fe_country_sd, c.fe_pair_sd,
                   c.fe_demand_sd, c.flow_noise_sd, c.confounder_loading, c.credit_noise_sd,
                   c.employment_noise_sd})
    require(v >= 0.0, "dispersions must be nonnegative");
}

struct Window {
  int t1 = 0;
  int t2 = 0;
  int years() const { return t2 - t1; }
};

struct Windows {
  Window boom;
  Window bust;
};

// Six-year boom exposure window followed by a three-year bust window.
inline Windows windows(const ScenarioConfig& c) {
  return {{c.first_year, c.first_year + 6}, {c.first_year + 6, c.first_year + 9}};
}

inline constexpr int kObservedLag = 1;
inline constexpr int kGivLag = 3;

// Band the default calibration keeps the median first-stage F inside.
inline constexpr double kCalibratedFMedianLo = 10.0;
inline constexpr double kCalibratedFMedianHi = 18.0;

// ---------------------------------------------------------------------------
// Entity naming.
// ---------------------------------------------------------------------------

inline std::string focal_country() { return "USA"; }

inline std::string competitor_name(int i) { return "C" + std::to_string(i + 1); }

inline std::string destination_name(int j) { return "D" + std::to_string(j + 1); }

inline std::string industry_name(int s) { return "IND" + std::to_string(s + 1); }

inline std::string region_name(int m) { return "R" + std::to_string(m + 1); }

inline std::string county_name(int m, int k) {
  return region_name(m) + "-" + std::to_string(k + 1);
}

inline std::vector<std::string> competitor_list(const ScenarioConfig& c) {
  std::vector<std::string> out;
  for (int i = 0; i < c.n_competitors; ++i) out.push_back(competitor_name(i));
  return out;
}

// ---------------------------------------------------------------------------
// Trade generation from the constant-elasticity structure.
// ---------------------------------------------------------------------------

namespace tag {
inline constexpr std::uint64_t tariff_export = 1, tariff_import = 2, dist_export = 3,
                               dist_import = 4, mu_competitor = 5, nu_export = 6, phi_demand = 7,
                               a_focal = 8, b_exporter = 9, eta_market = 10, nu_import = 11,
                               m_focal = 12, noise_export = 13, noise_import = 14, exposure = 15,
                               production = 16, confounder = 17, credit_noise = 18,
                               employment_noise = 19, county_weight = 20;
}  // namespace tag

struct TradeData {
  std::vector<TradeFlowRecord> flows;
  std::vector<TariffRecord> tariffs;
};

namespace detail {

inline double draw_normal(const ScenarioConfig& c, std::uint64_t rep, std::uint64_t tag_id,
                          std::initializer_list<std::uint64_t> ids, double sd) {
  if (sd == 0.0) return 0.0;
  rng::Stream s(c.seed, {rep, tag_id});
  rng::Stream keyed(s.next_u64(), ids);
  return keyed.normal(0.0, sd);
}

inline double draw_half_normal(const ScenarioConfig& c, std::uint64_t rep, std::uint64_t tag_id,
                               std::initializer_list<std::uint64_t> ids, double sd) {
  if (sd == 0.0) return 0.0;
  rng::Stream s(c.seed, {rep, tag_id});
  rng::Stream keyed(s.next_u64(), ids);
  return keyed.half_normal(sd);
}

inline double draw_uniform(const ScenarioConfig& c, std::uint64_t rep, std::uint64_t tag_id,
                           std::initializer_list<std::uint64_t> ids, double lo, double hi) {
  rng::Stream s(c.seed, {rep, tag_id});
  rng::Stream keyed(s.next_u64(), ids);
  return keyed.uniform(lo, hi);
}

// Exporter index 0 is the focal country, 1..C are competitors.
inline std::uint64_t exporter_id(int competitor_index) {
  return static_cast<std::uint64_t>(competitor_index + 1);
}

}  // namespace detail

// Log gross tariff set by destination j on exporter e (export side).
inline double export_tariff_log(const ScenarioConfig& c, std::uint64_t rep, int j, int e_index,
                                int s, int t) {
  return detail::draw_half_normal(c, rep, tag::tariff_export,
                                  {static_cast<std::uint64_t>(j), detail::exporter_id(e_index),
                                   static_cast<std::uint64_t>(s), static_cast<std::uint64_t>(t)},
                                  c.tariff_volatility);
}

// Log gross tariff set by destination-market i (focal or competitor) on
// origin country j (import side).
inline double import_tariff_log(const ScenarioConfig& c, std::uint64_t rep, int i_index, int j,
                                int s, int t) {
  return detail::draw_half_normal(c, rep, tag::tariff_import,
                                  {detail::exporter_id(i_index), static_cast<std::uint64_t>(j),
                                   static_cast<std::uint64_t>(s), static_cast<std::uint64_t>(t)},
                                  c.tariff_volatility);
}

// Flows on both sides of the ledger, generated exactly from the
// constant-elasticity structure. Competitor-country shifters are separable
// (country effect plus industry-year effect) so the unobserved aggregate term
// is absorbed exactly by the two fixed-effect families; the focal country's
// own shifters vary freely by industry-year.
inline TradeData generate_trade(const ScenarioConfig& c, std::uint64_t rep = 0) {
  validate(c);
  TradeData out;
  const double one_minus_sigma = 1.0 - c.sigma_true;

  for (int s = 0; s < c.n_industries; ++s) {
    const std::string product = industry_name(s);
    for (int y = 0; y < c.n_years; ++y) {
      const int year = c.first_year + y;
      const auto su = static_cast<std::uint64_t>(s);
      const auto tu = static_cast<std::uint64_t>(year);

      const double a_focal = detail::draw_normal(c, rep, tag::a_focal, {su, tu}, c.fe_industry_sd);
      const double nu_x = detail::draw_normal(c, rep, tag::nu_export, {su, tu}, c.fe_industry_sd);
      const double m_focal = detail::draw_normal(c, rep, tag::m_focal, {su, tu}, c.fe_industry_sd);
      const double nu_m = detail::draw_normal(c, rep, tag::nu_import, {su, tu}, c.fe_industry_sd);

      for (int j = 0; j < c.n_destinations; ++j) {
        const auto ju = static_cast<std::uint64_t>(j);
        const std::string dest = destination_name(j);
        const double phi =
            detail::draw_normal(c, rep, tag::phi_demand, {ju, su, tu}, c.fe_demand_sd);
        const double b_exp =
            detail::draw_normal(c, rep, tag::b_exporter, {ju, su, tu}, c.fe_demand_sd);

        // Export side: focal and competitors sell to destination j.
        for (int e = -1; e < c.n_competitors; ++e) {
          const int e_index = e;  // -1 encodes the focal country
          const std::uint64_t eu = detail::exporter_id(e_index);
          const std::string exporter = e_index < 0 ? focal_country() : competitor_name(e_index);
          const double shifter =
              e_index < 0 ? a_focal
                          : detail::draw_normal(c, rep, tag::mu_competitor, {eu},
                                                c.fe_country_sd) +
                                nu_x;
          const double dist =
              detail::draw_normal(c, rep, tag::dist_export, {eu, ju}, c.fe_pair_sd);
          const double tariff_log = export_tariff_log(c, rep, j, e_index, s, year);
          const double noise = detail::draw_normal(c, rep, tag::noise_export, {eu, ju, su, tu},
                                                   c.flow_noise_sd);
          const double log_value =
              shifter + phi + one_minus_sigma * (dist + tariff_log) + noise;
          out.flows.push_back({exporter, dest, product, year, std::exp(log_value)});
          out.tariffs.push_back({dest, exporter, product, year, std::exp(tariff_log)});
        }

        // Import side: destination-country j sells to the focal country and
        // to the competitor markets.
        for (int i = -1; i < c.n_competitors; ++i) {
          const int i_index = i;
          const std::uint64_t iu = detail::exporter_id(i_index);
          const std::string market = i_index < 0 ? focal_country() : competitor_name(i_index);
          const double market_shifter =
              i_index < 0
                  ? m_focal
                  : detail::draw_normal(c, rep, tag::eta_market, {iu}, c.fe_country_sd) + nu_m;
          const double dist =
              detail::draw_normal(c, rep, tag::dist_import, {ju, iu}, c.fe_pair_sd);
          const double tariff_log = import_tariff_log(c, rep, i_index, j, s, year);
          const double noise = detail::draw_normal(c, rep, tag::noise_import, {ju, iu, su, tu},
                                                   c.flow_noise_sd);
          const double log_value =
              b_exp + market_shifter + one_minus_sigma * (dist + tariff_log) + noise;
          out.flows.push_back({dest, market, product, year, std::exp(log_value)});
          out.tariffs.push_back({market, dest, product, year, std::exp(tariff_log)});
        }
      }
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Exposure, production, and the net-export series.
// ---------------------------------------------------------------------------

inline std::map<std::string, double> base_production(const ScenarioConfig& c,
                                                     std::uint64_t rep = 0) {
  std::map<std::string, double> out;
  for (int s = 0; s < c.n_industries; ++s)
    out[industry_name(s)] = detail::draw_uniform(c, rep, tag::production,
                                                 {static_cast<std::uint64_t>(s)}, 50.0, 500.0);
  return out;
}

// Industry shares per region, normalized to sum to one. The same shares are
// emitted for every requested base-year label: they are predetermined.
inline std::vector<RegionExposure> exposures(const ScenarioConfig& c,
                                             const std::vector<int>& base_years,
                                             std::uint64_t rep = 0) {
  std::vector<RegionExposure> out;
  for (int m = 0; m < c.n_regions; ++m) {
    std::vector<double> raw(static_cast<std::size_t>(c.n_industries));
    double total = 0.0;
    for (int s = 0; s < c.n_industries; ++s) {
      const double u = detail::draw_uniform(
          c, rep, tag::exposure, {static_cast<std::uint64_t>(m), static_cast<std::uint64_t>(s)},
          0.0, 1.0);
      raw[static_cast<std::size_t>(s)] = u * u;  // squared to concentrate shares
      total += raw[static_cast<std::size_t>(s)];
    }
    for (int by : base_years)
      for (int s = 0; s < c.n_industries; ++s)
        out.push_back({region_name(m), industry_name(s),
                       raw[static_cast<std::size_t>(s)] / total, by});
  }
  return out;
}

inline shiftshare::IndustryYearTable observed_trade_table(const TradeData& trade, bool exports) {
  shiftshare::IndustryYearTable out;
  for (const auto& f : trade.flows) {
    if (exports && f.exporter == focal_country())
      out[{f.product, f.year}] += f.value;
    else if (!exports && f.importer == focal_country())
      out[{f.product, f.year}] += f.value;
  }
  return out;
}

inline ingest::CrosswalkTable identity_crosswalk(const ScenarioConfig& c) {
  ingest::CrosswalkTable xw;
  xw.direction = "identity";
  for (int s = 0; s < c.n_industries; ++s)
    xw.entries[industry_name(s)] = {{industry_name(s), 1.0}};
  return xw;
}

// ---------------------------------------------------------------------------
// County panel generation.
// ---------------------------------------------------------------------------

struct PanelTruth {
  double first_stage_slope = 0.0;
  double structural_slope_boom = 0.0;
  double structural_slope_bust = 0.0;
};

struct RegionChanges {
  std::map<std::string, double> observed_boom, observed_bust, giv_boom, giv_bust;
};

// Credit responds to the observed net-export change plus a county confounder;
// employment responds to credit plus the same confounder, so plain OLS is
// biased away from the structural slope. Clusters are regions; analytic
// weights are log-uniform.
inline std::pair<std::vector<CountyPanelRow>, PanelTruth> generate_panel(
    const ScenarioConfig& c, const RegionChanges& changes, std::uint64_t rep = 0) {
  validate(c);
  std::vector<CountyPanelRow> rows;
  PanelTruth truth{c.first_stage_slope, c.structural_slope, c.structural_slope_bust};

  for (int m = 0; m < c.n_regions; ++m) {
    const std::string region = region_name(m);
    const auto mu = static_cast<std::uint64_t>(m);
    for (int k = 0; k < c.counties_per_region; ++k) {
      const auto ku = static_cast<std::uint64_t>(k);
      const double confounder =
          c.confounder_loading *
          detail::draw_normal(c, rep, tag::confounder, {mu, ku}, 1.0);
      const double weight =
          detail::draw_uniform(c, rep, tag::county_weight, {mu, ku}, std::log(50.0),
                               std::log(5000.0));
      const std::string unit = county_name(m, k);

      const struct {
        const char* period;
        double shift;
        double giv;
        double slope;
        std::uint64_t pid;
      } periods[] = {
          {"boom", changes.observed_boom.at(region), changes.giv_boom.at(region),
           c.structural_slope, 0},
          {"bust", changes.observed_bust.at(region), changes.giv_bust.at(region),
           c.structural_slope_bust, 1},
      };
      for (const auto& p : periods) {
        const double u =
            detail::draw_normal(c, rep, tag::credit_noise, {mu, ku, p.pid}, c.credit_noise_sd);
        const double eta = detail::draw_normal(c, rep, tag::employment_noise, {mu, ku, p.pid},
                                               c.employment_noise_sd);
        const double credit = c.first_stage_slope * p.shift + confounder + u;
        const double employment = p.slope * credit + confounder + eta;
        CountyPanelRow row;
        row.unit = unit;
        row.cluster = region;
        row.period = p.period;
        row.values = {{"emp_growth", employment},
                      {"credit_growth", credit},
                      {"giv_change", p.giv},
                      {"netexp_change", p.shift},
                      {"weight", weight}};
        rows.push_back(std::move(row));
      }
    }
  }
  return {std::move(rows), truth};
}

inline RegressionSpec panel_spec() {
  RegressionSpec spec;
  spec.outcome = "emp_growth";
  spec.endogenous = {"credit_growth"};
  spec.instruments = {"giv_change"};
  spec.weight = "weight";
  spec.cluster = "cluster";
  spec.periods = {"boom", "bust"};
  return spec;
}

// ---------------------------------------------------------------------------
// Full pipeline for one replication.
// ---------------------------------------------------------------------------

struct Dataset {
  TradeData trade;
  std::map<std::string, double> production;
  std::vector<RegionExposure> exposure_rows;
  std::vector<IndustryNetExportSeries> observed_series;
  std::vector<IndustryNetExportSeries> giv_series;
  RegionChanges changes;
  std::vector<CountyPanelRow> panel;
  PanelTruth truth;
  gravity::GravityFit export_fit;
  gravity::GravityFit import_fit;
};

// Runs generation plus the instrument-construction pipeline: gravity fits on
// both sides, purged predictions, identity crosswalk aggregation, net-export
// series, and exposure-weighted regional changes.
inline Dataset build_dataset(const ScenarioConfig& c, std::uint64_t rep = 0) {
  validate(c);
  Dataset d;
  d.trade = generate_trade(c, rep);
  d.production = base_production(c, rep);

  const Windows w = windows(c);
  d.exposure_rows = exposures(
      c, {w.boom.t1 - kObservedLag, w.boom.t1 - kGivLag, w.bust.t1 - kObservedLag,
          w.bust.t1 - kGivLag},
      rep);

  const auto competitors = competitor_list(c);
  const auto xw = identity_crosswalk(c);

  auto export_rows = gravity::build_design_rows(d.trade.flows, d.trade.tariffs,
                                                gravity::Side::Export, focal_country(),
                                                competitors, c.sigma_true);
  auto import_rows = gravity::build_design_rows(d.trade.flows, d.trade.tariffs,
                                                gravity::Side::Import, focal_country(),
                                                competitors, c.sigma_true);
  d.export_fit = gravity::fit_gravity(export_rows, gravity::Side::Export, c.sigma_true);
  d.import_fit = gravity::fit_gravity(import_rows, gravity::Side::Import, c.sigma_true);

  const auto predicted_exports =
      gravity::aggregate_predicted(gravity::predict_all(d.export_fit, export_rows), xw);
  const auto predicted_imports =
      gravity::aggregate_predicted(gravity::predict_all(d.import_fit, import_rows), xw);

  d.observed_series = shiftshare::build_net_export(observed_trade_table(d.trade, true),
                                                   observed_trade_table(d.trade, false),
                                                   d.production);
  d.giv_series = shiftshare::build_net_export(predicted_exports, predicted_imports, d.production);

  const auto observed_table = shiftshare::to_table(d.observed_series);
  const auto giv_table = shiftshare::to_table(d.giv_series);

  auto select = [&](const std::vector<RegionExposure>& all, int base_year) {
    std::vector<RegionExposure> out;
    for (const auto& e : all)
      if (e.base_year == base_year) out.push_back(e);
    return out;
  };
  auto to_map = [](const std::vector<shiftshare::ShiftShareChange>& v) {
    std::map<std::string, double> out;
    for (const auto& ch : v) out[ch.region] = ch.value;
    return out;
  };

  d.changes.observed_boom = to_map(shiftshare::aggregate_regions(
      observed_table, select(d.exposure_rows, w.boom.t1 - kObservedLag), w.boom.t1, w.boom.t2,
      kObservedLag, shiftshare::SeriesKind::Observed));
  d.changes.observed_bust = to_map(shiftshare::aggregate_regions(
      observed_table, select(d.exposure_rows, w.bust.t1 - kObservedLag), w.bust.t1, w.bust.t2,
      kObservedLag, shiftshare::SeriesKind::Observed));
  d.changes.giv_boom = to_map(shiftshare::aggregate_regions(
      giv_table, select(d.exposure_rows, w.boom.t1 - kGivLag), w.boom.t1, w.boom.t2, kGivLag,
      shiftshare::SeriesKind::Giv));
  d.changes.giv_bust = to_map(shiftshare::aggregate_regions(
      giv_table, select(d.exposure_rows, w.bust.t1 - kGivLag), w.bust.t1, w.bust.t2, kGivLag,
      shiftshare::SeriesKind::Giv));

  auto [panel, truth] = generate_panel(c, d.changes, rep);
  d.panel = std::move(panel);
  d.truth = truth;
  return d;
}

// ---------------------------------------------------------------------------
// Monte Carlo.
// ---------------------------------------------------------------------------

struct RepOutcome {
  double tsls_boom = 0.0, tsls_boom_se = 0.0;
  double tsls_bust = 0.0, tsls_bust_se = 0.0;
  double ols_boom = 0.0;
  double robust_f_boom = 0.0;
  bool ci_covers_boom = false;
};

inline RepOutcome run_once(const ScenarioConfig& c, std::uint64_t rep) {
  const Dataset d = build_dataset(c, rep);
  const auto run = estimate::run_spec(d.panel, panel_spec());
  const auto report = diagnostics::build_report(run);

  RepOutcome out;
  const DesignLabel boom{"credit_growth", "boom"};
  const DesignLabel bust{"credit_growth", "bust"};
  out.tsls_boom = run.iv.second_stage.coef_of(boom);
  out.tsls_boom_se = run.iv.second_stage.se_of(boom);
  out.tsls_bust = run.iv.second_stage.coef_of(bust);
  out.tsls_bust_se = run.iv.second_stage.se_of(bust);
  out.ols_boom = run.ols.coef_of(boom);
  for (const auto& f : report.robust_f)
    if (f.endogenous == boom) out.robust_f_boom = f.value;
  out.ci_covers_boom =
      std::abs(out.tsls_boom - d.truth.structural_slope_boom) <= 1.96 * out.tsls_boom_se;
  return out;
}

struct McReport {
  std::size_t reps = 0;
  double coverage_95 = 0.0;          // share of reps whose boom CI covers the truth
  double median_abs_bias_ols = 0.0;
  double median_abs_bias_tsls = 0.0;
  double f_median = 0.0;
  double f_q10 = 0.0;
  double f_q90 = 0.0;
  std::vector<RepOutcome> outcomes;
};

namespace detail {

inline double median_of(std::vector<double> v) {
  require(!v.empty(), "median of empty vector");
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 == 1 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

inline double quantile_of(std::vector<double> v, double p) {
  std::sort(v.begin(), v.end());
  const double h = static_cast<double>(v.size() - 1) * p;
  const auto lo = static_cast<std::size_t>(h);
  if (lo + 1 >= v.size()) return v.back();
  return v[lo] + (h - lo) * (v[lo + 1] - v[lo]);
}

}  // namespace detail

// Independent replications of the full pipeline. Streams are keyed by
// replication id, so scheduling across threads never changes any draw and
// the aggregation is order-independent.
inline McReport monte_carlo(const ScenarioConfig& c, std::size_t reps, int threads = 1) {
  require(reps >= 1, "need at least one replication");
  validate(c);
  McReport report;
  report.reps = reps;
  report.outcomes.resize(reps);

  const int n_threads = std::max(1, std::min<int>(threads, static_cast<int>(reps)));
  if (n_threads == 1) {
    for (std::size_t r = 0; r < reps; ++r) report.outcomes[r] = run_once(c, r);
  } else {
    std::vector<std::thread> pool;
    std::vector<std::string> errors(static_cast<std::size_t>(n_threads));
    for (int t = 0; t < n_threads; ++t) {
      pool.emplace_back([&, t]() {
        try {
          for (std::size_t r = static_cast<std::size_t>(t); r < reps;
               r += static_cast<std::size_t>(n_threads))
            report.outcomes[r] = run_once(c, r);
        } catch (const std::exception& e) {
          errors[static_cast<std::size_t>(t)] = e.what();
        }
      });
    }
    for (auto& th : pool) th.join();
    for (const auto& e : errors)
      require(e.empty(), "replication failed: ", e);
  }

  std::vector<double> ols_bias, tsls_bias, fstats;
  std::size_t covered = 0;
  for (const auto& o : report.outcomes) {
    ols_bias.push_back(std::abs(o.ols_boom - c.structural_slope));
    tsls_bias.push_back(std::abs(o.tsls_boom - c.structural_slope));
    fstats.push_back(o.robust_f_boom);
    covered += o.ci_covers_boom ? 1 : 0;
  }
  report.coverage_95 = static_cast<double>(covered) / static_cast<double>(reps);
  report.median_abs_bias_ols = detail::median_of(ols_bias);
  report.median_abs_bias_tsls = detail::median_of(tsls_bias);
  report.f_median = detail::median_of(fstats);
  report.f_q10 = detail::quantile_of(fstats, 0.10);
  report.f_q90 = detail::quantile_of(fstats, 0.90);
  return report;
}

}  // namespace tradeiv::simulate
