#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "tradeiv/datamodel.hpp"
#include "tradeiv/error.hpp"

namespace tradeiv::shiftshare {

enum class SeriesKind { Observed, Giv };

inline std::string to_string(SeriesKind k) { return k == SeriesKind::Observed ? "observed" : "giv"; }

inline SeriesKind kind_from_string(const std::string& s) {
  if (s == "observed") return SeriesKind::Observed;
  if (s == "giv") return SeriesKind::Giv;
  fail("unknown series kind '", s, "' (expected observed or giv)");
}

// Region-level exposure change over one window.
struct ShiftShareChange {
  std::string region;
  int t1 = 0;
  int t2 = 0;
  double value = 0.0;
  SeriesKind kind = SeriesKind::Observed;
};

using IndustryYearTable = std::map<std::pair<std::string, int>, double>;

// ---------------------------------------------------------------------------
// Industry net-export series.
// ---------------------------------------------------------------------------

// (export - import) / base-year production, per industry-year. Inputs must be
// in base-year dollars already; a side absent for an industry-year counts as
// zero trade.
inline std::vector<IndustryNetExportSeries> build_net_export(
    const IndustryYearTable& exports, const IndustryYearTable& imports,
    const std::map<std::string, double>& base_production) {
  std::set<std::pair<std::string, int>> keys;
  for (const auto& [k, v] : exports) keys.insert(k);
  for (const auto& [k, v] : imports) keys.insert(k);

  std::vector<IndustryNetExportSeries> out;
  out.reserve(keys.size());
  for (const auto& [industry, year] : keys) {
    auto it = base_production.find(industry);
    require(it != base_production.end() && it->second > 0.0,
            "zero or missing base production for industry '", industry, "'");
    auto value = [](const IndustryYearTable& t, const std::pair<std::string, int>& k) {
      auto f = t.find(k);
      return f == t.end() ? 0.0 : f->second;
    };
    IndustryNetExportSeries s;
    s.industry = industry;
    s.year = year;
    s.base_production = it->second;
    s.net_export_ratio =
        (value(exports, {industry, year}) - value(imports, {industry, year})) / it->second;
    out.push_back(std::move(s));
  }
  return out;
}

inline IndustryYearTable to_table(const std::vector<IndustryNetExportSeries>& series) {
  IndustryYearTable out;
  for (const auto& s : series) out[{s.industry, s.year}] = s.net_export_ratio;
  return out;
}

// ---------------------------------------------------------------------------
// Regional aggregation with predetermined shares.
// ---------------------------------------------------------------------------

// Weighted sum of industry-level changes for one region, using employment
// shares dated t1 - lag. Missing series values for a positive-share industry
// are a hard error; a silent zero would shrink the exposure invisibly.
inline ShiftShareChange aggregate_region(const IndustryYearTable& series,
                                         const std::vector<RegionExposure>& exposures, int t1,
                                         int t2, int lag, SeriesKind kind) {
  require(t1 < t2, "window must satisfy t1 < t2, got (", t1, ", ", t2, ")");
  require(lag >= 1, "exposure lag must be positive, got ", lag);
  require(!exposures.empty(), "no exposure rows given");

  const std::string& region = exposures.front().region;
  const int expected_base = t1 - lag;
  double total = 0.0;
  std::vector<std::string> missing;
  double share_sum = 0.0;
  for (const auto& e : exposures) {
    validate(e);
    require(e.region == region, "exposure rows span regions '", region, "' and '", e.region, "'");
    require(e.base_year == expected_base, "exposure base-year mismatch for region '", region,
            "': expected ", expected_base, ", got ", e.base_year);
    share_sum += e.share;
    if (e.share == 0.0) continue;
    const auto a = series.find({e.industry, t1});
    const auto b = series.find({e.industry, t2});
    if (a == series.end() || b == series.end()) {
      missing.push_back(e.industry);
      continue;
    }
    total += e.share * (b->second - a->second);
  }
  require(share_sum <= 1.0 + 1e-9, "region '", region, "' shares sum to ", share_sum,
          ", above 1");
  if (!missing.empty()) {
    std::string list;
    for (const auto& m : missing) list += (list.empty() ? "" : ", ") + m;
    fail("missing series values in window (", t1, ", ", t2, ") for industries: ", list);
  }
  return {region, t1, t2, total, kind};
}

// Groups exposure rows by region and aggregates each.
inline std::vector<ShiftShareChange> aggregate_regions(const IndustryYearTable& series,
                                                       const std::vector<RegionExposure>& exposures,
                                                       int t1, int t2, int lag, SeriesKind kind) {
  std::map<std::string, std::vector<RegionExposure>> by_region;
  for (const auto& e : exposures) by_region[e.region].push_back(e);
  std::vector<ShiftShareChange> out;
  out.reserve(by_region.size());
  for (const auto& [region, rows] : by_region)
    out.push_back(aggregate_region(series, rows, t1, t2, lag, kind));
  return out;
}

// Linear annualization: a multi-year change divided by the period length.
inline double annualize(double value, int years) {
  require(years >= 1, "annualize needs years >= 1, got ", years);
  return value / static_cast<double>(years);
}

// ---------------------------------------------------------------------------
// Quantile cohort series.
// ---------------------------------------------------------------------------

struct CohortObservation {
  std::string unit;
  int year = 0;
  double value = 0.0;
  double weight = 0.0;  // > 0
};

struct CohortSeries {
  std::string group;           // "q1" .. "qG", ascending in the sort key
  std::map<int, double> values;  // year -> weighted mean (scaled if base year set)
  std::optional<int> base_year;
};

// Splits units into quantile groups by a per-unit sort key (ties broken by
// unit id, ascending), then takes weighted means per group-year. With a base
// year, each series is rescaled so it equals 1 there.
inline std::vector<CohortSeries> cohort_series(const std::vector<CohortObservation>& panel,
                                               const std::map<std::string, double>& sort_key,
                                               int groups,
                                               std::optional<int> base_year = std::nullopt) {
  require(groups >= 1, "need at least one group");
  std::set<std::string> unit_set;
  for (const auto& obs : panel) {
    require(obs.weight > 0.0, "non-positive weight for unit '", obs.unit, "' year ", obs.year);
    unit_set.insert(obs.unit);
  }
  require(unit_set.size() >= static_cast<std::size_t>(groups), "fewer units (", unit_set.size(),
          ") than groups (", groups, ")");

  std::vector<std::string> units(unit_set.begin(), unit_set.end());
  for (const auto& u : units)
    require(sort_key.count(u), "no sort key for unit '", u, "'");
  std::sort(units.begin(), units.end(), [&](const std::string& a, const std::string& b) {
    const double ka = sort_key.at(a), kb = sort_key.at(b);
    return ka != kb ? ka < kb : a < b;
  });

  std::map<std::string, int> group_of;
  const std::size_t n = units.size();
  for (std::size_t i = 0; i < n; ++i)
    group_of[units[i]] = static_cast<int>(i * static_cast<std::size_t>(groups) / n);

  std::vector<std::map<int, std::pair<double, double>>> acc(static_cast<std::size_t>(groups));
  for (const auto& obs : panel) {
    auto& cell = acc[static_cast<std::size_t>(group_of.at(obs.unit))][obs.year];
    cell.first += obs.weight * obs.value;
    cell.second += obs.weight;
  }

  std::vector<CohortSeries> out;
  for (int g = 0; g < groups; ++g) {
    CohortSeries s;
    s.group = "q" + std::to_string(g + 1);
    s.base_year = base_year;
    for (const auto& [year, cell] : acc[static_cast<std::size_t>(g)])
      s.values[year] = cell.first / cell.second;
    if (base_year) {
      auto it = s.values.find(*base_year);
      require(it != s.values.end(), "group ", s.group, " has no observations in base year ",
              *base_year);
      require(it->second != 0.0, "group ", s.group, " base-year value is zero, cannot scale");
      const double base = it->second;
      for (auto& [year, v] : s.values) v /= base;
    }
    out.push_back(std::move(s));
  }
  return out;
}

}  // namespace tradeiv::shiftshare
