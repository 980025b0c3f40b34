#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "tradeiv/csv.hpp"
#include "tradeiv/datamodel.hpp"
#include "tradeiv/error.hpp"

namespace tradeiv::ingest {

// ---------------------------------------------------------------------------
// Price deflation.
// ---------------------------------------------------------------------------

struct PriceIndexSeries {
  std::map<int, double> index;  // year -> index value, all > 0
  int base_year = 2007;
};

inline void validate(const PriceIndexSeries& s) {
  require(s.index.count(s.base_year), "price index is missing its base year ", s.base_year);
  for (const auto& [year, v] : s.index)
    require(v > 0.0, "price index for ", year, " must be positive, got ", v);
}

// Converts a nominal amount into base-year units: value * index(base) / index(year).
inline double deflate(double value, int year, const PriceIndexSeries& series) {
  auto at = [&](int y) {
    auto it = series.index.find(y);
    require(it != series.index.end(), "price index has no entry for year ", y);
    return it->second;
  };
  return value * at(series.base_year) / at(year);
}

// ---------------------------------------------------------------------------
// Code crosswalks.
// ---------------------------------------------------------------------------

struct CrosswalkEntry {
  std::string target;
  double weight = 0.0;
};

// Maps source codes to weighted target codes. Proportional tables must have
// weights summing to 1 per source; single-best tables carry exactly one
// target with weight 1 (the highest-value-share match).
struct CrosswalkTable {
  std::map<std::string, std::vector<CrosswalkEntry>> entries;
  std::string direction;  // e.g. "HS6->SIC4"
  bool single_best = false;
};

inline void validate(const CrosswalkTable& xw) {
  for (const auto& [source, targets] : xw.entries) {
    require(!targets.empty(), "crosswalk ", xw.direction, ": source '", source, "' has no targets");
    if (xw.single_best) {
      require(targets.size() == 1 && targets.front().weight == 1.0, "crosswalk ", xw.direction,
              ": single-best mode requires exactly one weight-1 target for '", source, "'");
      continue;
    }
    double sum = 0.0;
    for (const auto& t : targets) {
      require(t.weight >= 0.0 && t.weight <= 1.0, "crosswalk ", xw.direction, ": weight ",
              t.weight, " for '", source, "' outside [0,1]");
      sum += t.weight;
    }
    require(std::abs(sum - 1.0) <= 1e-9, "crosswalk ", xw.direction, ": weights for '", source,
            "' sum to ", sum);
  }
}

enum class MissingSource { Error, DropWithWarning };

struct CrosswalkResult {
  std::map<std::string, double> values;
  std::vector<std::string> dropped_sources;
};

// Pushes a source-coded series through the table. With mass-conserving
// weights the total is preserved up to rounding.
inline CrosswalkResult apply_crosswalk(const std::map<std::string, double>& series,
                                       const CrosswalkTable& xw,
                                       MissingSource on_missing = MissingSource::Error) {
  validate(xw);
  CrosswalkResult out;
  for (const auto& [source, value] : series) {
    auto it = xw.entries.find(source);
    if (it == xw.entries.end()) {
      if (on_missing == MissingSource::Error)
        fail("crosswalk ", xw.direction, ": source code '", source, "' not in table");
      out.dropped_sources.push_back(source);
      continue;
    }
    for (const auto& t : it->second) out.values[t.target] += value * t.weight;
  }
  return out;
}

// Keeps only the highest-weight target per source, as used for tariff series
// where splitting a rate makes no sense. Ties break on target code.
inline CrosswalkTable to_single_best(const CrosswalkTable& xw) {
  CrosswalkTable out;
  out.direction = xw.direction + " (single-best)";
  out.single_best = true;
  for (const auto& [source, targets] : xw.entries) {
    const CrosswalkEntry* best = nullptr;
    for (const auto& t : targets) {
      if (!best || t.weight > best->weight || (t.weight == best->weight && t.target < best->target))
        best = &t;
    }
    require(best, "crosswalk: empty target list for '", source, "'");
    out.entries[source] = {{best->target, 1.0}};
  }
  return out;
}

// ---------------------------------------------------------------------------
// Mortgage size classification.
// ---------------------------------------------------------------------------

struct ConformingLimitTable {
  std::map<std::pair<int, std::string>, double> county_limits;  // (year, county) -> limit
  std::map<int, double> national_limits;                        // fallback, pre-2008 years
};

enum class MortgageClass { NonJumbo, Jumbo };

inline double resolve_limit(int year, const std::string& county, const ConformingLimitTable& t) {
  if (auto it = t.county_limits.find({year, county}); it != t.county_limits.end()) {
    require(it->second > 0.0, "conforming limit for ", year, "/", county, " must be positive");
    return it->second;
  }
  if (auto it = t.national_limits.find(year); it != t.national_limits.end()) {
    require(it->second > 0.0, "national conforming limit for ", year, " must be positive");
    return it->second;
  }
  fail("no conforming loan limit for year ", year, ", county '", county, "'");
}

// Boundary amounts count as non-jumbo: borderline loans land in the category
// that works against finding an effect.
inline MortgageClass classify_mortgage(double amount, int year, const std::string& county,
                                       const ConformingLimitTable& limits) {
  return amount <= resolve_limit(year, county, limits) ? MortgageClass::NonJumbo
                                                       : MortgageClass::Jumbo;
}

// ---------------------------------------------------------------------------
// Exclusion lists (e.g. hurricane-affected counties).
// ---------------------------------------------------------------------------

struct ExclusionList {
  std::set<std::string> codes;  // 5-character numeric FIPS strings
  std::string label;
};

inline void validate(const ExclusionList& list) {
  for (const auto& code : list.codes) {
    bool ok = code.size() == 5 && std::all_of(code.begin(), code.end(),
                                              [](unsigned char c) { return std::isdigit(c); });
    require(ok, "exclusion list '", list.label, "': '", code, "' is not a 5-digit FIPS code");
  }
}

template <class T>
struct FilterReport {
  std::vector<T> retained;
  std::size_t removed = 0;
  std::string label;
};

template <class T, class IdFn>
FilterReport<T> filter_excluded(const std::vector<T>& units, const ExclusionList& list, IdFn id) {
  FilterReport<T> report;
  report.label = list.label;
  for (const auto& u : units) {
    if (list.codes.count(id(u)))
      ++report.removed;
    else
      report.retained.push_back(u);
  }
  return report;
}

inline FilterReport<std::string> filter_excluded(const std::vector<std::string>& units,
                                                 const ExclusionList& list) {
  return filter_excluded(units, list, [](const std::string& s) { return s; });
}

// ---------------------------------------------------------------------------
// Typed CSV readers for the documented schemas.
// ---------------------------------------------------------------------------

inline std::vector<TradeFlowRecord> read_trade_flows(const std::string& path) {
  csv::Schema schema{{{"exporter", csv::ColumnType::String},
                      {"importer", csv::ColumnType::String},
                      {"product", csv::ColumnType::String},
                      {"year", csv::ColumnType::Int},
                      {"value", csv::ColumnType::Real}}};
  auto table = csv::read_table(path, &schema);
  std::vector<TradeFlowRecord> out;
  out.reserve(table.rows.size());
  for (const auto& row : table.rows) {
    TradeFlowRecord r{row.str("exporter"), row.str("importer"), row.str("product"),
                      static_cast<int>(row.integer("year")), row.real("value")};
    validate(r);
    out.push_back(std::move(r));
  }
  return out;
}

inline std::vector<TariffRecord> read_tariffs(const std::string& path) {
  csv::Schema schema{{{"imposer", csv::ColumnType::String},
                      {"partner", csv::ColumnType::String},
                      {"product", csv::ColumnType::String},
                      {"year", csv::ColumnType::Int},
                      {"gross_rate", csv::ColumnType::Real}}};
  auto table = csv::read_table(path, &schema);
  std::vector<TariffRecord> out;
  out.reserve(table.rows.size());
  for (const auto& row : table.rows) {
    TariffRecord r{row.str("imposer"), row.str("partner"), row.str("product"),
                   static_cast<int>(row.integer("year")), row.real("gross_rate")};
    validate(r);
    out.push_back(std::move(r));
  }
  return out;
}

inline PriceIndexSeries read_price_index(const std::string& path, int base_year = 2007) {
  csv::Schema schema{{{"year", csv::ColumnType::Int}, {"index", csv::ColumnType::Real}}};
  auto table = csv::read_table(path, &schema);
  PriceIndexSeries out;
  out.base_year = base_year;
  for (const auto& row : table.rows)
    out.index[static_cast<int>(row.integer("year"))] = row.real("index");
  validate(out);
  return out;
}

inline CrosswalkTable read_crosswalk(const std::string& path, const std::string& direction,
                                     bool single_best = false) {
  csv::Schema schema{{{"source", csv::ColumnType::String},
                      {"target", csv::ColumnType::String},
                      {"weight", csv::ColumnType::Real}}};
  auto table = csv::read_table(path, &schema);
  CrosswalkTable out;
  out.direction = direction;
  for (const auto& row : table.rows)
    out.entries[row.str("source")].push_back({row.str("target"), row.real("weight")});
  if (single_best) out = to_single_best(out);
  validate(out);
  return out;
}

inline ExclusionList read_exclusion_list(const std::string& path) {
  csv::Schema schema{{{"fips", csv::ColumnType::String},
                      {"label", csv::ColumnType::String, false}}};
  auto table = csv::read_table(path, &schema);
  ExclusionList out;
  for (const auto& row : table.rows) {
    out.codes.insert(row.str("fips"));
    if (out.label.empty() && row.cells.count("label")) out.label = row.str("label");
  }
  validate(out);
  return out;
}

inline ConformingLimitTable read_conforming_limits(const std::string& path) {
  csv::Schema schema{{{"year", csv::ColumnType::Int},
                      {"county", csv::ColumnType::String},
                      {"limit", csv::ColumnType::Real}}};
  auto table = csv::read_table(path, &schema);
  ConformingLimitTable out;
  for (const auto& row : table.rows) {
    const int year = static_cast<int>(row.integer("year"));
    const double limit = row.real("limit");
    require(limit > 0.0, "line ", row.line, ": conforming limit must be positive");
    const std::string county = row.str("county");
    // An empty county cell (or "*") is the national limit for that year.
    if (county.empty() || county == "*")
      out.national_limits[year] = limit;
    else
      out.county_limits[{year, county}] = limit;
  }
  return out;
}

// Panel rows: requires unit, cluster, period columns; every other numeric
// column is kept by name. Columns listed in `flag_columns` are parsed as 0/1.
inline std::vector<CountyPanelRow> read_panel(const std::string& path,
                                              const std::set<std::string>& flag_columns = {}) {
  csv::Schema schema{{{"unit", csv::ColumnType::String},
                      {"cluster", csv::ColumnType::String},
                      {"period", csv::ColumnType::String}}};
  auto table = csv::read_table(path, &schema);
  std::vector<CountyPanelRow> out;
  out.reserve(table.rows.size());
  for (const auto& row : table.rows) {
    CountyPanelRow r;
    r.unit = row.str("unit");
    r.cluster = row.str("cluster");
    r.period = row.str("period");
    for (const auto& col : table.header) {
      if (col == "unit" || col == "cluster" || col == "period") continue;
      if (flag_columns.count(col)) {
        const long long v = row.integer(col);
        require(v == 0 || v == 1, "line ", row.line, ": flag column '", col, "' must be 0 or 1");
        r.flags[col] = v == 1;
      } else {
        r.values[col] = row.real(col);
      }
    }
    out.push_back(std::move(r));
  }
  return out;
}

}  // namespace tradeiv::ingest
