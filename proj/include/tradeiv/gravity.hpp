#pragma once

#include <Eigen/Dense>
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
#include "tradeiv/ingest.hpp"

namespace tradeiv::gravity {

enum class Side { Export, Import };

inline std::string to_string(Side s) { return s == Side::Export ? "export" : "import"; }

inline Side side_from_string(const std::string& s) {
  if (s == "export") return Side::Export;
  if (s == "import") return Side::Import;
  fail("unknown gravity side '", s, "' (expected export or import)");
}

struct SigmaConfig {
  double sigma = 3.0;          // elasticity of substitution, > 1
  std::vector<double> grid;    // optional profiling grid
};

inline void validate(const SigmaConfig& c) {
  require(c.sigma > 1.0, "sigma must exceed 1, got ", c.sigma);
  for (double s : c.grid) require(s > 1.0, "sigma grid entry ", s, " must exceed 1");
}

// ---------------------------------------------------------------------------
// Competitor tariff index.
// ---------------------------------------------------------------------------

// Power mean of competitor gross tariffs with trade-share weights:
// T = ( sum_i share_i * tau_i^(sigma-1) )^(1/(sigma-1)), returned as ln T.
inline double competitor_tariff_index(const std::vector<std::pair<double, double>>& flow_tariff,
                                      double sigma) {
  require(sigma > 1.0, "sigma must exceed 1, got ", sigma);
  double total = 0.0;
  for (const auto& [flow, tariff] : flow_tariff) {
    require(flow >= 0.0, "negative competitor flow ", flow);
    require(tariff >= 1.0, "gross tariff ", tariff, " below 1");
    total += flow;
  }
  require(total > 0.0, "zero total competitor flow");
  double acc = 0.0;
  for (const auto& [flow, tariff] : flow_tariff)
    acc += (flow / total) * std::pow(tariff, sigma - 1.0);
  // The power mean of gross tariffs is >= 1; clamp the floating-point noise
  // that all-unit tariffs can leave just below zero.
  return std::max(0.0, std::log(acc) / (sigma - 1.0));
}

// ---------------------------------------------------------------------------
// Fixed-effect absorption by alternating within-group demeaning.
// ---------------------------------------------------------------------------

struct FeConvergence {
  std::size_t iterations = 0;
  double max_change = 0.0;
  bool converged = false;
};

struct GroupIndex {
  std::vector<int> group_of_row;
  std::vector<std::string> levels;
};

inline GroupIndex index_groups(const std::vector<std::string>& ids) {
  GroupIndex out;
  std::map<std::string, int> seen;
  out.group_of_row.reserve(ids.size());
  for (const auto& id : ids) {
    auto [it, inserted] = seen.emplace(id, static_cast<int>(out.levels.size()));
    if (inserted) out.levels.push_back(id);
    out.group_of_row.push_back(it->second);
  }
  return out;
}

struct Absorbed {
  Eigen::MatrixXd demeaned;
  // Per family: (levels x columns) matrix of accumulated group offsets, so
  // original = demeaned + sum over families of offsets[family](group, col).
  std::vector<Eigen::MatrixXd> offsets;
  FeConvergence convergence;
};

// Alternately sweeps group means out of every column until the largest
// adjustment in a full sweep falls below `tol`. Converges geometrically when
// the group graph is connected.
inline Absorbed absorb_fixed_effects(const Eigen::MatrixXd& columns,
                                     const std::vector<GroupIndex>& families,
                                     double tol = 1e-10, std::size_t max_iterations = 10000) {
  require(!families.empty(), "need at least one fixed-effect family");
  const auto n = columns.rows();
  for (const auto& fam : families) {
    require(static_cast<Eigen::Index>(fam.group_of_row.size()) == n,
            "fixed-effect family length mismatch");
    require(!fam.levels.empty(), "fixed-effect family has no groups");
  }

  Absorbed out;
  out.demeaned = columns;
  for (const auto& fam : families)
    out.offsets.push_back(
        Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(fam.levels.size()), columns.cols()));

  for (std::size_t iter = 1; iter <= max_iterations; ++iter) {
    double max_change = 0.0;
    for (std::size_t f = 0; f < families.size(); ++f) {
      const auto& fam = families[f];
      const auto n_groups = static_cast<Eigen::Index>(fam.levels.size());
      Eigen::MatrixXd sums = Eigen::MatrixXd::Zero(n_groups, columns.cols());
      Eigen::VectorXd counts = Eigen::VectorXd::Zero(n_groups);
      for (Eigen::Index i = 0; i < n; ++i) {
        sums.row(fam.group_of_row[static_cast<std::size_t>(i)]) += out.demeaned.row(i);
        counts(fam.group_of_row[static_cast<std::size_t>(i)]) += 1.0;
      }
      for (Eigen::Index g = 0; g < n_groups; ++g) sums.row(g) /= counts(g);
      max_change = std::max(max_change, sums.cwiseAbs().maxCoeff());
      for (Eigen::Index i = 0; i < n; ++i)
        out.demeaned.row(i) -= sums.row(fam.group_of_row[static_cast<std::size_t>(i)]);
      out.offsets[f] += sums;
    }
    out.convergence.iterations = iter;
    out.convergence.max_change = max_change;
    if (max_change < tol) {
      out.convergence.converged = true;
      return out;
    }
  }
  fail("fixed-effect absorption did not converge within ", max_iterations,
       " iterations (last sweep adjustment ", out.convergence.max_change, ")");
}

// ---------------------------------------------------------------------------
// Gravity regression.
// ---------------------------------------------------------------------------

// One observation of the tariff regression: the response is the log focal
// flow, the offset (log competitor aggregate) carries a coefficient pinned
// at 1, and two fixed-effect families absorb supply/demand shocks and
// bilateral trade costs.
struct GravityDesignRow {
  std::string product;
  std::string partner;
  int year = 0;
  double focal_flow_log = 0.0;
  double offset_log = 0.0;
  double own_tariff_log = 0.0;
  double competitor_index_log = 0.0;
  std::string fe_industry_year;
  std::string fe_partner;
};

struct GravityFit {
  std::string side;
  double sigma = 0.0;
  double beta_own_tariff = 0.0;        // estimates 1 - sigma
  double beta_competitor_index = 0.0;  // estimates sigma - 1
  double se_own_tariff = 0.0;
  double se_competitor_index = 0.0;
  double residual_variance = 0.0;
  double rss = 0.0;
  std::size_t n_obs = 0;
  std::map<std::string, double> fe_industry_year;
  std::map<std::string, double> fe_partner;
  FeConvergence convergence;
};

inline GravityFit fit_gravity(const std::vector<GravityDesignRow>& rows, Side side,
                              double sigma = 0.0, double tol = 1e-10,
                              std::size_t max_iterations = 10000) {
  require(rows.size() >= 3, "gravity fit needs at least 3 rows, got ", rows.size());
  const auto n = static_cast<Eigen::Index>(rows.size());

  std::vector<std::string> iy_ids, partner_ids;
  iy_ids.reserve(rows.size());
  partner_ids.reserve(rows.size());
  Eigen::MatrixXd data(n, 3);  // [adjusted response, own tariff, competitor index]
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto& r = rows[static_cast<std::size_t>(i)];
    require(std::isfinite(r.offset_log), "non-finite offset in gravity row");
    require(r.own_tariff_log >= 0.0, "own tariff log must be nonnegative");
    require(r.competitor_index_log >= 0.0, "competitor index log must be nonnegative");
    data(i, 0) = r.focal_flow_log - r.offset_log;  // offset coefficient pinned at 1
    data(i, 1) = r.own_tariff_log;
    data(i, 2) = r.competitor_index_log;
    iy_ids.push_back(r.fe_industry_year);
    partner_ids.push_back(r.fe_partner);
  }

  const GroupIndex iy = index_groups(iy_ids);
  const GroupIndex partner = index_groups(partner_ids);
  Absorbed abs = absorb_fixed_effects(data, {iy, partner}, tol, max_iterations);

  for (int c : {1, 2}) {
    const double scale = data.col(c).cwiseAbs().maxCoeff();
    const double remaining = abs.demeaned.col(c).cwiseAbs().maxCoeff();
    require(remaining > 1e-9 * std::max(1.0, scale), "no variation in ",
            c == 1 ? "own tariff" : "competitor tariff index",
            " after removing fixed effects");
  }

  const Eigen::VectorXd y = abs.demeaned.col(0);
  const Eigen::MatrixXd X = abs.demeaned.rightCols(2);
  Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(X);
  qr.setThreshold(1e-12);
  require(qr.rank() == 2,
          "own tariff and competitor index are collinear after fixed effects");
  const Eigen::VectorXd beta = qr.solve(y);
  const Eigen::VectorXd resid = y - X * beta;

  GravityFit fit;
  fit.side = to_string(side);
  fit.sigma = sigma;
  fit.beta_own_tariff = beta(0);
  fit.beta_competitor_index = beta(1);
  fit.n_obs = rows.size();
  fit.rss = resid.squaredNorm();
  // Degrees of freedom assume connected group graphs: one redundancy between
  // the two families plus the grand mean.
  const double dof_fe =
      static_cast<double>(iy.levels.size()) + static_cast<double>(partner.levels.size()) - 1.0;
  const double dof = static_cast<double>(n) - 2.0 - dof_fe;
  require(dof > 0.0, "gravity fit has no residual degrees of freedom");
  fit.residual_variance = fit.rss / dof;
  const Eigen::MatrixXd xtx_inv =
      (X.transpose() * X).ldlt().solve(Eigen::MatrixXd::Identity(2, 2));
  fit.se_own_tariff = std::sqrt(fit.residual_variance * xtx_inv(0, 0));
  fit.se_competitor_index = std::sqrt(fit.residual_variance * xtx_inv(1, 1));
  fit.convergence = abs.convergence;

  // Recovered fixed effects for the response equation: the accumulated
  // response offsets minus what the tariff terms explain of them.
  for (std::size_t g = 0; g < iy.levels.size(); ++g) {
    const auto gi = static_cast<Eigen::Index>(g);
    fit.fe_industry_year[iy.levels[g]] =
        abs.offsets[0](gi, 0) - abs.offsets[0](gi, 1) * beta(0) - abs.offsets[0](gi, 2) * beta(1);
  }
  for (std::size_t g = 0; g < partner.levels.size(); ++g) {
    const auto gi = static_cast<Eigen::Index>(g);
    fit.fe_partner[partner.levels[g]] =
        abs.offsets[1](gi, 0) - abs.offsets[1](gi, 1) * beta(0) - abs.offsets[1](gi, 2) * beta(1);
  }
  return fit;
}

// Predicted log flow purged of both fixed-effect families:
// offset + b1 * ln(own tariff) + b2 * ln(competitor index).
inline double predict_flow(const GravityFit& fit, const GravityDesignRow& row) {
  require(fit.convergence.converged, "gravity fit did not converge");
  return row.offset_log + fit.beta_own_tariff * row.own_tariff_log +
         fit.beta_competitor_index * row.competitor_index_log;
}

// ---------------------------------------------------------------------------
// Design-row construction from raw records.
// ---------------------------------------------------------------------------

namespace detail {

struct FlowKey {
  std::string exporter, importer, product;
  int year;
  bool operator<(const FlowKey& o) const {
    return std::tie(exporter, importer, product, year) <
           std::tie(o.exporter, o.importer, o.product, o.year);
  }
};

struct TariffKey {
  std::string imposer, partner, product;
  int year;
  bool operator<(const TariffKey& o) const {
    return std::tie(imposer, partner, product, year) <
           std::tie(o.imposer, o.partner, o.product, o.year);
  }
};

}  // namespace detail

// Builds the regression rows for one side. Zero or missing focal flows are
// dropped (their log is undefined); missing tariffs default to a gross rate
// of 1. Export side: the focal country sells to partner j against competitor
// exporters. Import side: partner j sells to the focal country against
// competitor destinations.
inline std::vector<GravityDesignRow> build_design_rows(
    const std::vector<TradeFlowRecord>& flows, const std::vector<TariffRecord>& tariffs,
    Side side, const std::string& focal, const std::vector<std::string>& competitors,
    double sigma) {
  require(sigma > 1.0, "sigma must exceed 1, got ", sigma);
  require(!competitors.empty(), "competitor country list is empty");
  for (const auto& c : competitors)
    require(c != focal, "focal country '", focal, "' cannot be its own competitor");

  std::map<detail::FlowKey, double> flow_map;
  std::set<std::pair<std::string, int>> product_years;
  std::set<std::string> partners;
  for (const auto& f : flows) {
    validate(f);
    flow_map[{f.exporter, f.importer, f.product, f.year}] += f.value;
    product_years.insert({f.product, f.year});
    if (side == Side::Export && f.exporter == focal && f.importer != focal)
      partners.insert(f.importer);
    if (side == Side::Import && f.importer == focal && f.exporter != focal)
      partners.insert(f.exporter);
  }
  std::map<detail::TariffKey, double> tariff_map;
  for (const auto& t : tariffs) {
    validate(t);
    tariff_map[{t.imposer, t.partner, t.product, t.year}] = t.gross_rate;
  }
  auto flow_at = [&](const std::string& ex, const std::string& im, const std::string& p, int y) {
    auto it = flow_map.find({ex, im, p, y});
    return it == flow_map.end() ? 0.0 : it->second;
  };
  auto tariff_at = [&](const std::string& imposer, const std::string& partner,
                       const std::string& p, int y) {
    auto it = tariff_map.find({imposer, partner, p, y});
    return it == tariff_map.end() ? 1.0 : it->second;
  };

  std::vector<GravityDesignRow> rows;
  for (const auto& [product, year] : product_years) {
    for (const auto& j : partners) {
      if (j == focal) continue;
      const double focal_value = side == Side::Export ? flow_at(focal, j, product, year)
                                                      : flow_at(j, focal, product, year);
      if (focal_value <= 0.0) continue;

      std::vector<std::pair<double, double>> competitor_pairs;
      double total = 0.0;
      for (const auto& c : competitors) {
        if (c == j) continue;
        const double v = side == Side::Export ? flow_at(c, j, product, year)
                                              : flow_at(j, c, product, year);
        const double tau = side == Side::Export ? tariff_at(j, c, product, year)
                                                : tariff_at(c, j, product, year);
        competitor_pairs.push_back({v, tau});
        total += v;
      }
      if (total <= 0.0) continue;

      GravityDesignRow row;
      row.product = product;
      row.partner = j;
      row.year = year;
      row.focal_flow_log = std::log(focal_value);
      row.offset_log = std::log(total);
      row.own_tariff_log = std::log(side == Side::Export ? tariff_at(j, focal, product, year)
                                                         : tariff_at(focal, j, product, year));
      row.competitor_index_log = competitor_tariff_index(competitor_pairs, sigma);
      row.fe_industry_year = product + ":" + std::to_string(year);
      row.fe_partner = j;
      rows.push_back(std::move(row));
    }
  }
  return rows;
}

// ---------------------------------------------------------------------------
// Aggregation of predictions to industry-year level.
// ---------------------------------------------------------------------------

struct PredictedFlow {
  std::string product;
  std::string partner;
  int year = 0;
  double log_value = 0.0;
};

// Exponentiates predictions, sums over partners per (product, year), then
// pushes product codes through the crosswalk. Result keyed by
// (industry, year).
inline std::map<std::pair<std::string, int>, double> aggregate_predicted(
    const std::vector<PredictedFlow>& predictions, const ingest::CrosswalkTable& xw,
    const std::set<std::string>* partner_filter = nullptr,
    ingest::MissingSource on_missing = ingest::MissingSource::Error) {
  std::map<int, std::map<std::string, double>> by_year;
  for (const auto& p : predictions) {
    if (partner_filter && !partner_filter->count(p.partner)) continue;
    by_year[p.year][p.product] += std::exp(p.log_value);
  }
  std::map<std::pair<std::string, int>, double> out;
  for (const auto& [year, series] : by_year) {
    const auto walked = ingest::apply_crosswalk(series, xw, on_missing);
    for (const auto& [industry, value] : walked.values) out[{industry, year}] += value;
  }
  return out;
}

// Convenience: predictions for every design row of a fit.
inline std::vector<PredictedFlow> predict_all(const GravityFit& fit,
                                              const std::vector<GravityDesignRow>& rows) {
  std::vector<PredictedFlow> out;
  out.reserve(rows.size());
  for (const auto& r : rows)
    out.push_back({r.product, r.partner, r.year, predict_flow(fit, r)});
  return out;
}

// ---------------------------------------------------------------------------
// Sigma profiling.
// ---------------------------------------------------------------------------

struct SigmaProfilePoint {
  double sigma = 0.0;
  double rss = 0.0;
};

struct SigmaProfile {
  double best_sigma = 0.0;
  std::vector<SigmaProfilePoint> points;
};

// Refits over the grid and keeps the sigma minimizing the residual sum of
// squares. The response set is identical across grid points (only the
// competitor index changes), so the comparison is meaningful.
inline SigmaProfile profile_sigma(const std::vector<TradeFlowRecord>& flows,
                                  const std::vector<TariffRecord>& tariffs, Side side,
                                  const std::string& focal,
                                  const std::vector<std::string>& competitors,
                                  const SigmaConfig& config) {
  validate(config);
  std::vector<double> grid = config.grid;
  if (grid.empty()) grid.push_back(config.sigma);
  SigmaProfile profile;
  for (double s : grid) {
    auto rows = build_design_rows(flows, tariffs, side, focal, competitors, s);
    auto fit = fit_gravity(rows, side, s);
    profile.points.push_back({s, fit.rss});
  }
  const auto best = std::min_element(
      profile.points.begin(), profile.points.end(),
      [](const SigmaProfilePoint& a, const SigmaProfilePoint& b) { return a.rss < b.rss; });
  profile.best_sigma = best->sigma;
  return profile;
}

}  // namespace tradeiv::gravity
