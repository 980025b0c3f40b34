#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "tradeiv/error.hpp"

namespace tradeiv {

// ---------------------------------------------------------------------------
// Core domain records shared across the pipeline.
// ---------------------------------------------------------------------------

// One bilateral export value for (exporter, importer, product, year).
struct TradeFlowRecord {
  std::string exporter;
  std::string importer;
  std::string product;
  int year = 0;
  double value = 0.0;  // nominal currency units, >= 0
};

// Ad-valorem gross tariff factor set by `imposer` on imports from `partner`.
struct TariffRecord {
  std::string imposer;
  std::string partner;
  std::string product;
  int year = 0;
  double gross_rate = 1.0;  // >= 1, so its log is >= 0
};

// Net-export ratio for a coarse industry-year: (export - import) scaled by
// base-year domestic production.
struct IndustryNetExportSeries {
  std::string industry;
  int year = 0;
  double net_export_ratio = 0.0;
  double base_production = 0.0;  // > 0
};

// Lagged employment share of one industry in one region.
struct RegionExposure {
  std::string region;
  std::string industry;
  double share = 0.0;  // in [0, 1]
  int base_year = 0;
};

inline void validate(const TradeFlowRecord& r) {
  require(r.value >= 0.0, "trade flow ", r.exporter, "->", r.importer, " ", r.product, " ",
          r.year, ": negative value");
  require(r.exporter != r.importer, "trade flow ", r.product, " ", r.year,
          ": exporter equals importer '", r.exporter, "'");
}

inline void validate(const TariffRecord& r) {
  require(r.gross_rate >= 1.0, "tariff ", r.imposer, " on ", r.partner, " ", r.product, " ",
          r.year, ": gross rate ", r.gross_rate, " below 1");
}

inline void validate(const RegionExposure& r) {
  require(r.share >= 0.0 && r.share <= 1.0, "exposure ", r.region, "/", r.industry,
          ": share ", r.share, " outside [0,1]");
}

// ---------------------------------------------------------------------------
// County panel and regression specification.
// ---------------------------------------------------------------------------

// One county-period observation. Numeric columns are stored by name; the
// RegressionSpec decides which of them act as outcome, regressors,
// instruments, or weight.
struct CountyPanelRow {
  std::string unit;
  std::string cluster;
  std::string period;
  std::map<std::string, double> values;
  std::map<std::string, bool> flags;
};

struct WinsorRule {
  double lo = 0.0;
  double hi = 1.0;
  bool per_period = false;
};

inline void validate(const WinsorRule& r) {
  require(r.lo >= 0.0 && r.lo < r.hi && r.hi <= 1.0, "winsor rule: need 0 <= lo < hi <= 1, got (",
          r.lo, ", ", r.hi, ")");
}

// Declarative description of a (possibly stacked) IV regression.
struct RegressionSpec {
  std::string outcome;
  std::vector<std::string> endogenous;
  std::vector<std::string> instruments;
  std::vector<std::string> controls;
  std::string weight;
  std::string cluster;
  std::optional<WinsorRule> winsor;          // applied to the outcome only
  std::vector<std::string> periods;          // stacking order; one entry = plain cross-section
  bool interact_with_period = true;          // interact key regressors and controls with period dummies
  std::optional<std::string> flag_interaction;  // interact endogenous and instruments with this flag
};

// Structured column label so tests can address coefficients symbolically.
struct DesignLabel {
  std::string name;
  std::string period;  // empty when the column is not period-specific

  bool operator==(const DesignLabel&) const = default;
  bool operator<(const DesignLabel& o) const {
    return name != o.name ? name < o.name : period < o.period;
  }
};

inline std::string to_string(const DesignLabel& l) {
  return l.period.empty() ? l.name : l.name + "[" + l.period + "]";
}

// Design matrices ready for estimation. X holds period dummies, endogenous
// interactions, and control interactions; Z holds the excluded instruments.
struct DesignBundle {
  Eigen::VectorXd y;
  Eigen::MatrixXd X;
  Eigen::MatrixXd Z;
  Eigen::VectorXd weights;
  std::vector<std::string> clusters;
  std::vector<DesignLabel> x_labels;
  std::vector<DesignLabel> z_labels;
  std::vector<std::size_t> endogenous_cols;  // indices into X
  std::vector<std::string> periods;

  std::size_t x_index(const DesignLabel& l) const {
    for (std::size_t i = 0; i < x_labels.size(); ++i)
      if (x_labels[i] == l) return i;
    fail("design has no column ", to_string(l));
  }
};

namespace detail {

inline double panel_value(const CountyPanelRow& row, const std::string& name) {
  if (auto it = row.values.find(name); it != row.values.end()) return it->second;
  if (auto it = row.flags.find(name); it != row.flags.end()) return it->second ? 1.0 : 0.0;
  fail("unknown column '", name, "' for unit '", row.unit, "' period '", row.period, "'");
}

// Interaction names are rendered as base*flag; the flag value multiplies the
// base column.
struct ColumnTerm {
  std::string name;
  std::string base;
  std::optional<std::string> flag;

  double eval(const CountyPanelRow& row) const {
    double v = panel_value(row, base);
    if (flag) v *= panel_value(row, *flag);
    return v;
  }
};

}  // namespace detail

// Expands rows into the stacked design: one period-dummy column per period,
// then each key regressor and control replaced by per-period interaction
// columns. Instruments expand the same way into Z.
inline DesignBundle build_stacked_panel(const std::vector<CountyPanelRow>& rows,
                                        const RegressionSpec& spec) {
  require(!spec.periods.empty(), "spec lists no periods");
  require(!spec.outcome.empty(), "spec has no outcome");
  require(spec.instruments.size() >= spec.endogenous.size(),
          "order condition fails: ", spec.instruments.size(), " instruments for ",
          spec.endogenous.size(), " endogenous regressors");

  const std::set<std::string> period_set(spec.periods.begin(), spec.periods.end());
  std::vector<const CountyPanelRow*> kept;
  std::set<std::pair<std::string, std::string>> seen;
  std::map<std::string, std::size_t> period_counts;
  for (const auto& row : rows) {
    if (!period_set.count(row.period)) continue;
    auto key = std::make_pair(row.unit, row.period);
    require(!seen.count(key), "duplicate observation for unit '", row.unit, "' in period '",
            row.period, "'");
    seen.insert(key);
    ++period_counts[row.period];
    kept.push_back(&row);
  }
  for (const auto& p : spec.periods)
    require(period_counts.count(p), "period '", p, "' has no rows");

  std::vector<detail::ColumnTerm> key_terms;
  for (const auto& e : spec.endogenous) key_terms.push_back({e, e, std::nullopt});
  if (spec.flag_interaction)
    for (const auto& e : spec.endogenous)
      key_terms.push_back({e + "*" + *spec.flag_interaction, e, spec.flag_interaction});

  std::vector<detail::ColumnTerm> instrument_terms;
  for (const auto& z : spec.instruments) instrument_terms.push_back({z, z, std::nullopt});
  if (spec.flag_interaction)
    for (const auto& z : spec.instruments)
      instrument_terms.push_back({z + "*" + *spec.flag_interaction, z, spec.flag_interaction});

  std::vector<detail::ColumnTerm> control_terms;
  for (const auto& c : spec.controls) control_terms.push_back({c, c, std::nullopt});
  // The flag's main effect is kept as a control so its interactions are not
  // picking up level differences.
  if (spec.flag_interaction)
    control_terms.push_back({*spec.flag_interaction, *spec.flag_interaction, std::nullopt});

  const std::size_t n = kept.size();
  const std::size_t p_count = spec.periods.size();
  const bool interact = spec.interact_with_period && p_count > 0;
  const std::size_t reps = interact ? p_count : 1;

  DesignBundle out;
  out.periods = spec.periods;
  out.y.resize(n);
  out.weights.resize(n);
  out.clusters.resize(n);

  for (const auto& p : spec.periods) out.x_labels.push_back({"intercept", p});
  for (const auto& term : key_terms) {
    for (std::size_t r = 0; r < reps; ++r)
      out.x_labels.push_back({term.name, interact ? spec.periods[r] : std::string()});
  }
  const std::size_t endo_offset = p_count;
  for (std::size_t i = 0; i < key_terms.size() * reps; ++i)
    out.endogenous_cols.push_back(endo_offset + i);
  for (const auto& term : control_terms) {
    for (std::size_t r = 0; r < reps; ++r)
      out.x_labels.push_back({term.name, interact ? spec.periods[r] : std::string()});
  }
  for (const auto& term : instrument_terms) {
    for (std::size_t r = 0; r < reps; ++r)
      out.z_labels.push_back({term.name, interact ? spec.periods[r] : std::string()});
  }

  out.X = Eigen::MatrixXd::Zero(n, out.x_labels.size());
  out.Z = Eigen::MatrixXd::Zero(n, out.z_labels.size());

  auto period_index = [&](const std::string& p) {
    for (std::size_t i = 0; i < spec.periods.size(); ++i)
      if (spec.periods[i] == p) return i;
    fail("period lookup failed for '", p, "'");
  };

  for (std::size_t i = 0; i < n; ++i) {
    const CountyPanelRow& row = *kept[i];
    const std::size_t pi = period_index(row.period);
    out.y(i) = detail::panel_value(row, spec.outcome);
    out.weights(i) = spec.weight.empty() ? 1.0 : detail::panel_value(row, spec.weight);
    out.clusters[i] = row.cluster;

    std::size_t col = 0;
    for (std::size_t p = 0; p < p_count; ++p) out.X(i, col++) = (p == pi) ? 1.0 : 0.0;
    for (const auto& term : key_terms) {
      const double v = term.eval(row);
      if (interact) {
        for (std::size_t p = 0; p < p_count; ++p) out.X(i, col++) = (p == pi) ? v : 0.0;
      } else {
        out.X(i, col++) = v;
      }
    }
    for (const auto& term : control_terms) {
      const double v = term.eval(row);
      if (interact) {
        for (std::size_t p = 0; p < p_count; ++p) out.X(i, col++) = (p == pi) ? v : 0.0;
      } else {
        out.X(i, col++) = v;
      }
    }
    std::size_t zcol = 0;
    for (const auto& term : instrument_terms) {
      const double v = term.eval(row);
      if (interact) {
        for (std::size_t p = 0; p < p_count; ++p) out.Z(i, zcol++) = (p == pi) ? v : 0.0;
      } else {
        out.Z(i, zcol++) = v;
      }
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Panel validation (report-only, never mutates input).
// ---------------------------------------------------------------------------

struct PanelViolation {
  std::size_t row = 0;
  std::string message;
};

struct PanelValidationReport {
  std::vector<PanelViolation> violations;
  std::vector<std::size_t> clean_rows;
  std::vector<std::size_t> dirty_rows;
  std::size_t excludable = 0;  // rows whose unit appears on an exclusion list

  bool ok() const { return violations.empty(); }
};

inline PanelValidationReport validate_panel(const std::vector<CountyPanelRow>& rows,
                                            const RegressionSpec& spec,
                                            const std::set<std::string>* excludable_units = nullptr) {
  PanelValidationReport report;
  std::set<std::pair<std::string, std::string>> seen;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const auto& row = rows[i];
    bool dirty = false;
    auto flag = [&](const std::string& msg) {
      report.violations.push_back({i, msg});
      dirty = true;
    };

    if (!spec.weight.empty()) {
      auto it = row.values.find(spec.weight);
      if (it == row.values.end())
        flag("missing weight column '" + spec.weight + "'");
      else if (!(it->second > 0.0))
        flag("non-positive weight");
    }
    std::vector<std::string> needed = {spec.outcome};
    needed.insert(needed.end(), spec.endogenous.begin(), spec.endogenous.end());
    needed.insert(needed.end(), spec.instruments.begin(), spec.instruments.end());
    needed.insert(needed.end(), spec.controls.begin(), spec.controls.end());
    for (const auto& name : needed) {
      if (name.empty()) continue;
      if (!row.values.count(name) && !row.flags.count(name))
        flag("missing value for column '" + name + "'");
    }
    if (spec.flag_interaction && !row.flags.count(*spec.flag_interaction) &&
        !row.values.count(*spec.flag_interaction))
      flag("missing flag column '" + *spec.flag_interaction + "'");

    auto key = std::make_pair(row.unit, row.period);
    if (seen.count(key))
      flag("duplicate (unit, period) = ('" + row.unit + "', '" + row.period + "')");
    seen.insert(key);

    if (excludable_units && excludable_units->count(row.unit)) ++report.excludable;

    (dirty ? report.dirty_rows : report.clean_rows).push_back(i);
  }
  return report;
}

}  // namespace tradeiv
