#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "tradeiv/datamodel.hpp"
#include "tradeiv/error.hpp"

namespace tradeiv::estimate {

// ---------------------------------------------------------------------------
// Winsorization.
// ---------------------------------------------------------------------------

// Fractional-rank quantile: linear interpolation at position (n-1)*p of the
// sorted sample.
inline double quantile(std::vector<double> values, double p) {
  require(!values.empty(), "quantile of empty vector");
  require(p >= 0.0 && p <= 1.0, "quantile level ", p, " outside [0,1]");
  std::sort(values.begin(), values.end());
  const double h = static_cast<double>(values.size() - 1) * p;
  const auto lo = static_cast<std::size_t>(h);
  const double frac = h - static_cast<double>(lo);
  if (lo + 1 >= values.size()) return values.back();
  return values[lo] + frac * (values[lo + 1] - values[lo]);
}

struct WinsorBounds {
  double lo = 0.0;
  double hi = 0.0;
};

inline WinsorBounds winsor_bounds(const std::vector<double>& values, const WinsorRule& rule) {
  validate(rule);
  return {quantile(values, rule.lo), quantile(values, rule.hi)};
}

// Replaces each tail value with the most extreme observation retained inside
// the quantile bounds. Re-applying the same rule is then an exact no-op: the
// replacement value sits at the bound's rank, so recomputed bounds clip
// nothing new. If no observation lies inside the bounds (tiny samples with
// wide tails) the vector is returned unchanged.
inline std::vector<double> winsorize(const std::vector<double>& values, const WinsorRule& rule) {
  require(!values.empty(), "winsorize of empty vector");
  const WinsorBounds b = winsor_bounds(values, rule);
  double lo_repl = std::numeric_limits<double>::infinity();
  double hi_repl = -std::numeric_limits<double>::infinity();
  for (double v : values) {
    if (v >= b.lo) lo_repl = std::min(lo_repl, v);
    if (v <= b.hi) hi_repl = std::max(hi_repl, v);
  }
  if (!(lo_repl <= hi_repl)) return values;
  std::vector<double> out;
  out.reserve(values.size());
  for (double v : values) out.push_back(std::clamp(v, lo_repl, hi_repl));
  return out;
}

// Per-period variant: when the rule is flagged per-period, quantiles are
// computed within each period independently.
inline std::vector<double> winsorize(const std::vector<double>& values, const WinsorRule& rule,
                                     const std::vector<std::string>& period_ids) {
  if (!rule.per_period) return winsorize(values, rule);
  require(period_ids.size() == values.size(), "winsorize: ", values.size(), " values but ",
          period_ids.size(), " period ids");
  std::map<std::string, std::vector<std::size_t>> groups;
  for (std::size_t i = 0; i < values.size(); ++i) groups[period_ids[i]].push_back(i);
  std::vector<double> out = values;
  for (const auto& [period, idx] : groups) {
    std::vector<double> slice;
    slice.reserve(idx.size());
    for (auto i : idx) slice.push_back(values[i]);
    auto clipped = winsorize(slice, {rule.lo, rule.hi, false});
    for (std::size_t j = 0; j < idx.size(); ++j) out[idx[j]] = clipped[j];
  }
  return out;
}

// ---------------------------------------------------------------------------
// Estimation results.
// ---------------------------------------------------------------------------

struct EstimationResult {
  std::string method;
  std::string weight_column;
  std::vector<DesignLabel> labels;
  Eigen::VectorXd coef;
  Eigen::MatrixXd vcov;       // cluster-robust
  Eigen::VectorXd residuals;  // structural residuals, unweighted scale
  std::size_t n = 0;
  std::size_t n_clusters = 0;
  std::size_t n_params = 0;

  std::size_t index_of(const DesignLabel& label) const {
    for (std::size_t i = 0; i < labels.size(); ++i)
      if (labels[i] == label) return i;
    fail("result has no coefficient ", to_string(label));
  }
  double coef_of(const DesignLabel& label) const {
    return coef(static_cast<Eigen::Index>(index_of(label)));
  }
  double se_of(const DesignLabel& label) const {
    const auto i = static_cast<Eigen::Index>(index_of(label));
    return std::sqrt(vcov(i, i));
  }
};

namespace detail {

inline void check_psd(const Eigen::MatrixXd& v) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(v, Eigen::EigenvaluesOnly);
  const double scale = std::max(1.0, v.diagonal().cwiseAbs().maxCoeff());
  require(es.eigenvalues().minCoeff() >= -1e-10 * scale,
          "covariance matrix is not positive semidefinite");
}

inline Eigen::MatrixXd scale_rows(const Eigen::MatrixXd& m, const Eigen::VectorXd& s) {
  return s.asDiagonal() * m;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Cluster-robust sandwich covariance.
// ---------------------------------------------------------------------------

// CR1 small-sample factor G/(G-1) * (N-1)/(N-k).
inline double cr1_factor(std::size_t n_clusters, std::size_t n, std::size_t k) {
  require(n > k, "cluster covariance needs n > k, got n=", n, " k=", k);
  const double g = static_cast<double>(n_clusters);
  const double nn = static_cast<double>(n);
  const double kk = static_cast<double>(k);
  return g / (g - 1.0) * (nn - 1.0) / (nn - kk);
}

// Sandwich on an already weighted design: design and residuals must be on the
// sqrt-weight scale (and, for 2SLS, the design must be the projected one).
inline Eigen::MatrixXd cluster_vcov(const Eigen::MatrixXd& design_w,
                                    const Eigen::VectorXd& residuals_w,
                                    const std::vector<std::string>& clusters) {
  const auto n = static_cast<std::size_t>(design_w.rows());
  const auto k = static_cast<std::size_t>(design_w.cols());
  require(residuals_w.size() == design_w.rows(), "cluster_vcov: residual length mismatch");
  require(clusters.size() == n, "cluster_vcov: cluster id length mismatch");

  std::map<std::string, std::vector<Eigen::Index>> groups;
  for (std::size_t i = 0; i < n; ++i) groups[clusters[i]].push_back(static_cast<Eigen::Index>(i));
  require(groups.size() >= 2, "cluster covariance needs at least 2 clusters, got ", groups.size());

  Eigen::MatrixXd xtx = design_w.transpose() * design_w;
  Eigen::LDLT<Eigen::MatrixXd> ldlt(xtx);
  require(ldlt.info() == Eigen::Success, "cluster_vcov: singular design");

  Eigen::MatrixXd meat = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(k),
                                               static_cast<Eigen::Index>(k));
  for (const auto& [id, idx] : groups) {
    Eigen::VectorXd score = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(k));
    for (auto i : idx) score += design_w.row(i).transpose() * residuals_w(i);
    meat += score * score.transpose();
  }
  Eigen::MatrixXd bread = ldlt.solve(Eigen::MatrixXd::Identity(static_cast<Eigen::Index>(k),
                                                               static_cast<Eigen::Index>(k)));
  Eigen::MatrixXd v = cr1_factor(groups.size(), n, k) * bread * meat * bread;
  v = ((v + v.transpose()) * 0.5).eval();
  detail::check_psd(v);
  return v;
}

// ---------------------------------------------------------------------------
// Weighted least squares.
// ---------------------------------------------------------------------------

inline void check_weights(const Eigen::VectorXd& w) {
  for (Eigen::Index i = 0; i < w.size(); ++i)
    require(w(i) > 0.0, "non-positive analytic weight ", w(i), " at row ", i,
            " (weights must be strictly positive)");
}

// Minimizes sum w_i (y_i - x_i beta)^2; equivalent to unweighted least squares
// on rows scaled by sqrt(w).
inline EstimationResult fit_wls(const Eigen::VectorXd& y, const Eigen::MatrixXd& X,
                                const Eigen::VectorXd& w,
                                const std::vector<DesignLabel>& labels,
                                const std::vector<std::string>& clusters,
                                const std::string& method = "wls") {
  const auto n = static_cast<std::size_t>(y.size());
  require(X.rows() == y.size(), "fit_wls: X has ", X.rows(), " rows for ", n, " responses");
  require(static_cast<std::size_t>(X.cols()) == labels.size(), "fit_wls: label count mismatch");
  require(n > static_cast<std::size_t>(X.cols()), "fit_wls: need more rows than parameters");
  check_weights(w);

  const Eigen::VectorXd sw = w.cwiseSqrt();
  const Eigen::MatrixXd Xw = detail::scale_rows(X, sw);
  const Eigen::VectorXd yw = sw.cwiseProduct(y);

  Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(Xw);
  qr.setThreshold(1e-10);
  if (qr.rank() < X.cols()) {
    const auto perm = qr.colsPermutation().indices();
    const auto dependent = static_cast<std::size_t>(perm(qr.rank()));
    fail("design is rank deficient: column ", to_string(labels[dependent]),
         " is collinear with the others");
  }
  EstimationResult res;
  res.method = method;
  res.labels = labels;
  res.coef = qr.solve(yw);
  res.residuals = y - X * res.coef;
  res.n = n;
  res.n_params = static_cast<std::size_t>(X.cols());
  const Eigen::VectorXd rw = sw.cwiseProduct(res.residuals);
  res.vcov = cluster_vcov(Xw, rw, clusters);
  std::map<std::string, int> uniq;
  for (const auto& c : clusters) uniq[c] = 1;
  res.n_clusters = uniq.size();
  return res;
}

// ---------------------------------------------------------------------------
// Two-stage least squares.
// ---------------------------------------------------------------------------

struct TwoSlsResult {
  EstimationResult second_stage;
  EstimationResult reduced_form;
  std::vector<EstimationResult> first_stages;  // one per endogenous column
  std::vector<DesignLabel> excluded_instruments;
};

// Standard 2SLS with analytic weights folded in. The covariance uses the
// structural residuals y - X*beta, not the mechanical second-stage residuals,
// which would understate the variance.
inline TwoSlsResult fit_2sls(const DesignBundle& d) {
  const auto n = static_cast<std::size_t>(d.y.size());
  require(!d.endogenous_cols.empty(), "fit_2sls: no endogenous regressors");
  require(static_cast<std::size_t>(d.Z.cols()) >= d.endogenous_cols.size(),
          "under-identified: ", d.Z.cols(), " excluded instruments for ",
          d.endogenous_cols.size(), " endogenous regressors");
  check_weights(d.weights);

  std::vector<std::size_t> exog_cols;
  {
    std::vector<bool> is_endo(static_cast<std::size_t>(d.X.cols()), false);
    for (auto c : d.endogenous_cols) is_endo[c] = true;
    for (std::size_t c = 0; c < static_cast<std::size_t>(d.X.cols()); ++c)
      if (!is_endo[c]) exog_cols.push_back(c);
  }

  Eigen::MatrixXd z_full(d.y.size(), d.Z.cols() + static_cast<Eigen::Index>(exog_cols.size()));
  std::vector<DesignLabel> z_full_labels;
  z_full.leftCols(d.Z.cols()) = d.Z;
  for (const auto& l : d.z_labels) z_full_labels.push_back(l);
  for (std::size_t j = 0; j < exog_cols.size(); ++j) {
    z_full.col(d.Z.cols() + static_cast<Eigen::Index>(j)) =
        d.X.col(static_cast<Eigen::Index>(exog_cols[j]));
    z_full_labels.push_back(d.x_labels[exog_cols[j]]);
  }

  {
    const Eigen::VectorXd sw = d.weights.cwiseSqrt();
    Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(detail::scale_rows(z_full, sw));
    qr.setThreshold(1e-10);
    if (qr.rank() < z_full.cols()) {
      const auto perm = qr.colsPermutation().indices();
      const auto dependent = static_cast<std::size_t>(perm(qr.rank()));
      fail("collinear instruments: column ", to_string(z_full_labels[dependent]),
           " adds no information");
    }
  }

  TwoSlsResult out;
  out.excluded_instruments = d.z_labels;

  // First stage per endogenous column; projected values replace the column.
  Eigen::MatrixXd x_hat = d.X;
  for (auto c : d.endogenous_cols) {
    const Eigen::VectorXd target = d.X.col(static_cast<Eigen::Index>(c));
    EstimationResult fs =
        fit_wls(target, z_full, d.weights, z_full_labels, d.clusters, "first-stage");
    fs.method = "first-stage:" + to_string(d.x_labels[c]);
    x_hat.col(static_cast<Eigen::Index>(c)) = z_full * fs.coef;
    out.first_stages.push_back(std::move(fs));
  }

  // Second stage on the projected design.
  const Eigen::VectorXd sw = d.weights.cwiseSqrt();
  const Eigen::MatrixXd xhat_w = detail::scale_rows(x_hat, sw);
  const Eigen::VectorXd yw = sw.cwiseProduct(d.y);
  Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(xhat_w);
  qr.setThreshold(1e-10);
  if (qr.rank() < x_hat.cols()) {
    const auto perm = qr.colsPermutation().indices();
    const auto dependent = static_cast<std::size_t>(perm(qr.rank()));
    fail("projected design is rank deficient at column ", to_string(d.x_labels[dependent]));
  }

  EstimationResult ss;
  ss.method = "2sls";
  ss.labels = d.x_labels;
  ss.coef = qr.solve(yw);
  ss.residuals = d.y - d.X * ss.coef;  // structural residuals
  ss.n = n;
  ss.n_params = static_cast<std::size_t>(d.X.cols());
  ss.vcov = cluster_vcov(xhat_w, sw.cwiseProduct(ss.residuals), d.clusters);
  std::map<std::string, int> uniq;
  for (const auto& c : d.clusters) uniq[c] = 1;
  ss.n_clusters = uniq.size();
  out.second_stage = std::move(ss);

  out.reduced_form = fit_wls(d.y, z_full, d.weights, z_full_labels, d.clusters, "reduced-form");
  return out;
}

// ---------------------------------------------------------------------------
// Full specification runner.
// ---------------------------------------------------------------------------

struct AppliedWinsor {
  std::string period;  // empty when pooled
  WinsorBounds bounds;
};

struct SpecRun {
  DesignBundle design;
  std::vector<AppliedWinsor> winsor_applied;
  EstimationResult ols;
  TwoSlsResult iv;
};

// Applies winsorization (dependent variable only, before stacking), builds
// the stacked design, and produces the four panels: OLS, reduced form, first
// stage(s), and 2SLS.
inline SpecRun run_spec(const std::vector<CountyPanelRow>& rows, const RegressionSpec& spec) {
  std::vector<CountyPanelRow> working = rows;
  SpecRun run;

  if (spec.winsor) {
    const std::set<std::string> period_set(spec.periods.begin(), spec.periods.end());
    std::vector<std::size_t> idx;
    std::vector<double> outcome;
    std::vector<std::string> periods;
    for (std::size_t i = 0; i < working.size(); ++i) {
      if (!period_set.count(working[i].period)) continue;
      auto it = working[i].values.find(spec.outcome);
      require(it != working[i].values.end(), "unknown column '", spec.outcome, "' for unit '",
              working[i].unit, "'");
      idx.push_back(i);
      outcome.push_back(it->second);
      periods.push_back(working[i].period);
    }
    require(!outcome.empty(), "no rows in the spec's periods");
    const auto clipped = winsorize(outcome, *spec.winsor, periods);
    for (std::size_t j = 0; j < idx.size(); ++j)
      working[idx[j]].values[spec.outcome] = clipped[j];

    if (spec.winsor->per_period) {
      std::map<std::string, std::vector<double>> by_period;
      for (std::size_t j = 0; j < outcome.size(); ++j) by_period[periods[j]].push_back(outcome[j]);
      for (const auto& [p, vals] : by_period)
        run.winsor_applied.push_back({p, winsor_bounds(vals, *spec.winsor)});
    } else {
      run.winsor_applied.push_back({"", winsor_bounds(outcome, *spec.winsor)});
    }
  }

  run.design = build_stacked_panel(working, spec);
  run.ols = fit_wls(run.design.y, run.design.X, run.design.weights, run.design.x_labels,
                    run.design.clusters, "ols");
  run.iv = fit_2sls(run.design);
  return run;
}

}  // namespace tradeiv::estimate
