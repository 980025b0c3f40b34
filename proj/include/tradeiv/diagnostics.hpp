#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "tradeiv/datamodel.hpp"
#include "tradeiv/error.hpp"
#include "tradeiv/estimate.hpp"

namespace tradeiv::diagnostics {

namespace detail {

// Regularized incomplete gamma functions, relative tolerance 1e-12. Series
// expansion below a+1, Lentz continued fraction above.
inline double gamma_p_series(double a, double x) {
  double term = 1.0 / a;
  double sum = term;
  for (int n = 1; n < 10000; ++n) {
    term *= x / (a + n);
    sum += term;
    if (std::abs(term) < std::abs(sum) * 1e-14) break;
  }
  return sum * std::exp(-x + a * std::log(x) - std::lgamma(a));
}

inline double gamma_q_contfrac(double a, double x) {
  const double tiny = 1e-300;
  double b = x + 1.0 - a;
  double c = 1.0 / tiny;
  double d = 1.0 / b;
  double h = d;
  for (int i = 1; i < 10000; ++i) {
    const double an = -i * (i - a);
    b += 2.0;
    d = an * d + b;
    if (std::abs(d) < tiny) d = tiny;
    c = b + an / c;
    if (std::abs(c) < tiny) c = tiny;
    d = 1.0 / d;
    const double delta = d * c;
    h *= delta;
    if (std::abs(delta - 1.0) < 1e-14) break;
  }
  return h * std::exp(-x + a * std::log(x) - std::lgamma(a));
}

inline double gamma_q(double a, double x) {
  require(a > 0.0, "gamma_q: shape must be positive");
  if (x <= 0.0) return 1.0;
  if (x < a + 1.0) return 1.0 - gamma_p_series(a, x);
  return gamma_q_contfrac(a, x);
}

}  // namespace detail

// Upper-tail probability of the chi-square distribution with `dof` degrees of
// freedom.
inline double chi_square_sf(double x, double dof) {
  require(dof > 0.0, "chi_square_sf: dof must be positive");
  if (x <= 0.0) return 1.0;
  return detail::gamma_q(dof / 2.0, x / 2.0);
}

namespace detail {

struct WaldForm {
  double statistic = 0.0;
  int rank = 0;  // identified restrictions actually tested
};

// Wald quadratic form b' V^+ b over the identified directions of the
// covariance block. Interaction-style first stages can pin some instrument
// coefficients exactly (zero sampling variance); those directions carry no
// information and are excluded from the form. A dropped direction with real
// coefficient mass would mean the test is degenerate, so that errors out.
inline WaldForm wald_form(const Eigen::VectorXd& b, const Eigen::MatrixXd& v) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(v);
  require(es.info() == Eigen::Success, "Wald test: eigendecomposition failed");
  const double lmax = es.eigenvalues().maxCoeff();
  require(lmax > 0.0, "Wald test: zero covariance block");

  WaldForm out;
  const double b_scale = std::max(b.cwiseAbs().maxCoeff(), 1e-300);
  for (Eigen::Index i = 0; i < b.size(); ++i) {
    const double lambda = es.eigenvalues()(i);
    const double mass = es.eigenvectors().col(i).dot(b);
    if (lambda > 1e-11 * lmax) {
      out.statistic += mass * mass / lambda;
      ++out.rank;
    } else {
      require(std::abs(mass) <= 1e-6 * b_scale,
              "Wald test: a zero-variance direction carries coefficient mass (covariance "
              "block is singular; often too few clusters for the number of restrictions)");
    }
  }
  require(out.rank >= 1, "Wald test: no identified restrictions");
  require(std::isfinite(out.statistic), "Wald statistic is not finite");
  out.statistic = std::max(out.statistic, 0.0);
  return out;
}

inline WaldForm wald_quadratic_form(const estimate::EstimationResult& res,
                                    const std::vector<DesignLabel>& subset) {
  require(!subset.empty(), "Wald test needs at least one coefficient");
  const auto m = static_cast<Eigen::Index>(subset.size());
  Eigen::VectorXd b(m);
  Eigen::MatrixXd v(m, m);
  std::vector<Eigen::Index> idx;
  for (const auto& label : subset)
    idx.push_back(static_cast<Eigen::Index>(res.index_of(label)));
  for (Eigen::Index i = 0; i < m; ++i) {
    b(i) = res.coef(idx[i]);
    for (Eigen::Index j = 0; j < m; ++j) v(i, j) = res.vcov(idx[i], idx[j]);
  }
  return wald_form(b, v);
}

inline double wald_quadratic(const estimate::EstimationResult& res,
                             const std::vector<DesignLabel>& subset) {
  return wald_quadratic_form(res, subset).statistic;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// First-stage strength statistics.
// ---------------------------------------------------------------------------

// Wald statistic on the excluded-instrument coefficients of a first stage,
// using the clustered covariance, divided by the number of excluded
// instruments. In the just-identified single-instrument case this is the
// squared clustered t-statistic.
inline double robust_first_stage_f(const estimate::EstimationResult& first_stage,
                                   const std::vector<DesignLabel>& excluded) {
  return detail::wald_quadratic(first_stage, excluded) / static_cast<double>(excluded.size());
}

inline double robust_first_stage_f_pvalue(const estimate::EstimationResult& first_stage,
                                          const std::vector<DesignLabel>& excluded) {
  const auto form = detail::wald_quadratic_form(first_stage, excluded);
  return chi_square_sf(form.statistic, static_cast<double>(form.rank));
}

// In the just-identified single-endogenous configuration the efficient
// F-statistic coincides with the robust F; other configurations are refused
// rather than silently approximated.
inline double efficient_f(const estimate::EstimationResult& first_stage,
                          const std::vector<DesignLabel>& excluded,
                          std::size_t n_endogenous = 1) {
  require(n_endogenous == 1 && excluded.size() == 1,
          "efficient F is only supported in the just-identified single-endogenous case (got ",
          excluded.size(), " instruments, ", n_endogenous, " endogenous)");
  return robust_first_stage_f(first_stage, excluded);
}

// Conditional first-stage F for one endogenous regressor in a
// multi-endogenous system: the target is residualized on the instrument-
// fitted values of the other endogenous regressors plus the included
// exogenous columns, the first stage is re-run on that residual, and the
// Wald statistic is scaled by (instruments - endogenous + 1).
inline double sw_f(const DesignBundle& d, std::size_t target_endogenous_col) {
  const std::size_t n_endo = d.endogenous_cols.size();
  const auto n_excl = static_cast<std::size_t>(d.Z.cols());
  require(n_endo >= 1, "sw_f: no endogenous regressors");
  require(n_excl >= n_endo, "under-identified: ", n_excl, " instruments for ", n_endo,
          " endogenous regressors");
  bool found = false;
  for (auto c : d.endogenous_cols) found = found || c == target_endogenous_col;
  require(found, "sw_f: column ", target_endogenous_col, " is not endogenous");

  {
    const Eigen::VectorXd sw = d.weights.cwiseSqrt();
    Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(sw.asDiagonal() * d.X);
    qr.setThreshold(1e-10);
    if (qr.rank() < d.X.cols()) {
      const auto perm = qr.colsPermutation().indices();
      const auto dependent = static_cast<std::size_t>(perm(qr.rank()));
      fail("collinear endogenous block: column ", to_string(d.x_labels[dependent]),
           " is linearly dependent");
    }
  }

  std::vector<std::size_t> exog_cols;
  {
    std::vector<bool> is_endo(static_cast<std::size_t>(d.X.cols()), false);
    for (auto c : d.endogenous_cols) is_endo[c] = true;
    for (std::size_t c = 0; c < static_cast<std::size_t>(d.X.cols()); ++c)
      if (!is_endo[c]) exog_cols.push_back(c);
  }

  Eigen::MatrixXd z_full(d.y.size(), d.Z.cols() + static_cast<Eigen::Index>(exog_cols.size()));
  std::vector<DesignLabel> z_full_labels = d.z_labels;
  z_full.leftCols(d.Z.cols()) = d.Z;
  for (std::size_t j = 0; j < exog_cols.size(); ++j) {
    z_full.col(d.Z.cols() + static_cast<Eigen::Index>(j)) =
        d.X.col(static_cast<Eigen::Index>(exog_cols[j]));
    z_full_labels.push_back(d.x_labels[exog_cols[j]]);
  }

  Eigen::VectorXd target = d.X.col(static_cast<Eigen::Index>(target_endogenous_col));

  if (n_endo > 1) {
    // Partialling coefficients come from the regression of the target on the
    // instrument-fitted values of the other endogenous regressors (plus the
    // exogenous columns); the residual then subtracts the actual columns, so
    // their first-stage noise stays in and the conditional first stage is
    // never degenerate.
    std::vector<std::size_t> others;
    for (auto c : d.endogenous_cols)
      if (c != target_endogenous_col) others.push_back(c);
    Eigen::MatrixXd fitted(d.y.size(),
                           static_cast<Eigen::Index>(others.size() + exog_cols.size()));
    Eigen::MatrixXd actual = fitted;
    std::vector<DesignLabel> partial_labels;
    for (std::size_t j = 0; j < others.size(); ++j) {
      const Eigen::VectorXd other = d.X.col(static_cast<Eigen::Index>(others[j]));
      auto fs = estimate::fit_wls(other, z_full, d.weights, z_full_labels, d.clusters,
                                  "sw-projection");
      fitted.col(static_cast<Eigen::Index>(j)) = z_full * fs.coef;
      actual.col(static_cast<Eigen::Index>(j)) = other;
      partial_labels.push_back(d.x_labels[others[j]]);
    }
    for (std::size_t j = 0; j < exog_cols.size(); ++j) {
      const Eigen::VectorXd col = d.X.col(static_cast<Eigen::Index>(exog_cols[j]));
      fitted.col(static_cast<Eigen::Index>(others.size() + j)) = col;
      actual.col(static_cast<Eigen::Index>(others.size() + j)) = col;
      partial_labels.push_back(d.x_labels[exog_cols[j]]);
    }
    auto res = estimate::fit_wls(target, fitted, d.weights, partial_labels, d.clusters,
                                 "sw-partial");
    target = target - actual * res.coef;
  }

  auto fs = estimate::fit_wls(target, z_full, d.weights, z_full_labels, d.clusters, "sw-first");
  const double wald = detail::wald_quadratic(fs, d.z_labels);
  return wald / static_cast<double>(n_excl - n_endo + 1);
}

// ---------------------------------------------------------------------------
// Coefficient equality test.
// ---------------------------------------------------------------------------

struct WaldEqualityResult {
  double statistic = 0.0;
  int dof = 1;
  double p_value = 1.0;
};

inline WaldEqualityResult wald_equality(const estimate::EstimationResult& res,
                                        const DesignLabel& a, const DesignLabel& b) {
  const auto i = static_cast<Eigen::Index>(res.index_of(a));
  const auto j = static_cast<Eigen::Index>(res.index_of(b));
  const double diff = res.coef(i) - res.coef(j);
  const double var = res.vcov(i, i) + res.vcov(j, j) - 2.0 * res.vcov(i, j);
  require(var > 0.0, "equality test: contrast of ", to_string(a), " and ", to_string(b),
          " has zero variance");
  WaldEqualityResult out;
  out.statistic = diff * diff / var;
  out.dof = 1;
  out.p_value = chi_square_sf(out.statistic, 1.0);
  return out;
}

// ---------------------------------------------------------------------------
// Joint instrument strength across stages.
// ---------------------------------------------------------------------------

// Joint Wald significance test of all excluded-instrument coefficients across
// the first stages, in the just-identified multi-endogenous case. The joint
// covariance stacks per-cluster scores across stages, so cross-stage error
// correlation is accounted for. P-value from chi-square(E*Z).
inline double joint_strength_pvalue(const DesignBundle& d) {
  const std::size_t n_endo = d.endogenous_cols.size();
  const auto n_excl = static_cast<std::size_t>(d.Z.cols());
  require(n_endo >= 1, "joint strength: no endogenous regressors");
  require(n_endo == n_excl,
          "joint strength test is only supported in the just-identified case (got ", n_excl,
          " instruments, ", n_endo, " endogenous)");
  estimate::check_weights(d.weights);

  std::vector<std::size_t> exog_cols;
  {
    std::vector<bool> is_endo(static_cast<std::size_t>(d.X.cols()), false);
    for (auto c : d.endogenous_cols) is_endo[c] = true;
    for (std::size_t c = 0; c < static_cast<std::size_t>(d.X.cols()); ++c)
      if (!is_endo[c]) exog_cols.push_back(c);
  }
  const auto k = d.Z.cols() + static_cast<Eigen::Index>(exog_cols.size());
  Eigen::MatrixXd z_full(d.y.size(), k);
  z_full.leftCols(d.Z.cols()) = d.Z;
  for (std::size_t j = 0; j < exog_cols.size(); ++j)
    z_full.col(d.Z.cols() + static_cast<Eigen::Index>(j)) =
        d.X.col(static_cast<Eigen::Index>(exog_cols[j]));

  const Eigen::VectorXd sw = d.weights.cwiseSqrt();
  const Eigen::MatrixXd zw = estimate::detail::scale_rows(z_full, sw);
  Eigen::LDLT<Eigen::MatrixXd> ldlt(zw.transpose() * zw);
  require(ldlt.info() == Eigen::Success, "joint strength: singular instrument design");
  const Eigen::MatrixXd bread = ldlt.solve(Eigen::MatrixXd::Identity(k, k));

  const auto e_count = static_cast<Eigen::Index>(n_endo);
  std::vector<Eigen::VectorXd> gammas;
  std::vector<Eigen::VectorXd> resid_w;
  for (auto c : d.endogenous_cols) {
    const Eigen::VectorXd xw = sw.cwiseProduct(d.X.col(static_cast<Eigen::Index>(c)));
    Eigen::VectorXd g = ldlt.solve(zw.transpose() * xw);
    resid_w.push_back(xw - zw * g);
    gammas.push_back(std::move(g));
  }

  std::map<std::string, std::vector<Eigen::Index>> groups;
  for (std::size_t i = 0; i < d.clusters.size(); ++i)
    groups[d.clusters[i]].push_back(static_cast<Eigen::Index>(i));
  require(groups.size() >= 2, "joint strength: need at least 2 clusters");

  const auto dim = e_count * static_cast<Eigen::Index>(n_excl);
  Eigen::MatrixXd joint_meat = Eigen::MatrixXd::Zero(e_count * k, e_count * k);
  for (const auto& [id, idx] : groups) {
    Eigen::VectorXd score = Eigen::VectorXd::Zero(e_count * k);
    for (Eigen::Index e = 0; e < e_count; ++e) {
      for (auto i : idx)
        score.segment(e * k, k) += zw.row(i).transpose() * resid_w[static_cast<std::size_t>(e)](i);
    }
    joint_meat += score * score.transpose();
  }
  const double factor =
      estimate::cr1_factor(groups.size(), static_cast<std::size_t>(d.y.size()),
                           static_cast<std::size_t>(k));

  Eigen::MatrixXd joint_v(dim, dim);
  Eigen::VectorXd b(dim);
  for (Eigen::Index e = 0; e < e_count; ++e) {
    b.segment(e * static_cast<Eigen::Index>(n_excl), static_cast<Eigen::Index>(n_excl)) =
        gammas[static_cast<std::size_t>(e)].head(static_cast<Eigen::Index>(n_excl));
    for (Eigen::Index f = 0; f < e_count; ++f) {
      const Eigen::MatrixXd block =
          factor * bread * joint_meat.block(e * k, f * k, k, k) * bread;
      joint_v.block(e * static_cast<Eigen::Index>(n_excl), f * static_cast<Eigen::Index>(n_excl),
                    static_cast<Eigen::Index>(n_excl), static_cast<Eigen::Index>(n_excl)) =
          block.topLeftCorner(static_cast<Eigen::Index>(n_excl),
                              static_cast<Eigen::Index>(n_excl));
    }
  }
  joint_v = ((joint_v + joint_v.transpose()) * 0.5).eval();
  // Structurally pinned coefficients (interaction first stages) leave
  // zero-variance directions; the test runs over the identified ones and the
  // reference distribution uses their count.
  const auto form = detail::wald_form(b, joint_v);
  return chi_square_sf(form.statistic, static_cast<double>(form.rank));
}

// ---------------------------------------------------------------------------
// Assembled report.
// ---------------------------------------------------------------------------

struct NamedF {
  DesignLabel endogenous;
  double value = 0.0;
};

struct PeriodStat {
  std::string period;  // empty for pooled designs
  double value = 0.0;
};

struct EqualityEntry {
  DesignLabel a;
  DesignLabel b;
  double statistic = 0.0;
  int dof = 1;
  double p_value = 1.0;
};

struct DiagnosticsReport {
  std::vector<NamedF> robust_f;        // per endogenous regressor
  std::vector<NamedF> sw_f;            // per endogenous regressor
  std::vector<PeriodStat> efficient_f;        // where just-identified with one endogenous
  std::vector<PeriodStat> joint_strength_p;   // where the instrument block is square
  std::vector<EqualityEntry> equality;
};

namespace detail {

// Rows and columns of one period block of a fully interacted stacked design.
// The blocks are structurally independent (every cross-period column is zero
// on the block's rows), so first-stage statistics are computed within them;
// pooled over periods the cross coefficients are identically zero with zero
// variance and every Wald form would be singular.
inline DesignBundle period_block(const DesignBundle& d, const std::string& period) {
  std::vector<Eigen::Index> rows;
  const auto dummy_col = static_cast<Eigen::Index>(d.x_index({"intercept", period}));
  for (Eigen::Index i = 0; i < d.X.rows(); ++i)
    if (d.X(i, dummy_col) == 1.0) rows.push_back(i);

  DesignBundle out;
  out.periods = {period};
  std::vector<std::size_t> x_cols;
  for (std::size_t c = 0; c < d.x_labels.size(); ++c)
    if (d.x_labels[c].period == period || d.x_labels[c].period.empty()) x_cols.push_back(c);
  std::vector<std::size_t> z_cols;
  for (std::size_t c = 0; c < d.z_labels.size(); ++c)
    if (d.z_labels[c].period == period || d.z_labels[c].period.empty()) z_cols.push_back(c);

  out.y.resize(static_cast<Eigen::Index>(rows.size()));
  out.weights.resize(static_cast<Eigen::Index>(rows.size()));
  out.X.resize(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(x_cols.size()));
  out.Z.resize(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(z_cols.size()));
  for (std::size_t r = 0; r < rows.size(); ++r) {
    const auto i = rows[r];
    out.y(static_cast<Eigen::Index>(r)) = d.y(i);
    out.weights(static_cast<Eigen::Index>(r)) = d.weights(i);
    out.clusters.push_back(d.clusters[static_cast<std::size_t>(i)]);
    for (std::size_t c = 0; c < x_cols.size(); ++c)
      out.X(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) =
          d.X(i, static_cast<Eigen::Index>(x_cols[c]));
    for (std::size_t c = 0; c < z_cols.size(); ++c)
      out.Z(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) =
          d.Z(i, static_cast<Eigen::Index>(z_cols[c]));
  }
  for (std::size_t c = 0; c < x_cols.size(); ++c) {
    out.x_labels.push_back(d.x_labels[x_cols[c]]);
    for (auto ec : d.endogenous_cols)
      if (ec == x_cols[c]) out.endogenous_cols.push_back(c);
  }
  for (std::size_t c = 0; c < z_cols.size(); ++c) out.z_labels.push_back(d.z_labels[z_cols[c]]);
  return out;
}

inline bool is_period_interacted(const DesignBundle& d) {
  for (const auto& l : d.z_labels)
    if (!l.period.empty()) return true;
  return false;
}

}  // namespace detail

// Builds the standard report for a completed run: per-endogenous robust and
// SW F statistics, the efficient F where a block is just-identified with one
// endogenous regressor, the joint strength p-value where a block's
// instrument matrix is square, and equality tests across periods of each
// endogenous name. Period-interacted designs are decomposed into their
// independent period blocks first.
inline DiagnosticsReport build_report(const estimate::SpecRun& run) {
  DiagnosticsReport report;
  const DesignBundle& d = run.design;

  std::vector<DesignBundle> blocks;
  if (d.periods.size() > 1 && detail::is_period_interacted(d)) {
    for (const auto& p : d.periods) blocks.push_back(detail::period_block(d, p));
  } else {
    blocks.push_back(d);
  }

  for (const auto& block : blocks) {
    const std::size_t n_endo = block.endogenous_cols.size();
    const auto n_excl = static_cast<std::size_t>(block.Z.cols());
    const std::string period_label = block.periods.size() == 1 && blocks.size() > 1
                                         ? block.periods.front()
                                         : std::string();
    auto iv = estimate::fit_2sls(block);
    for (std::size_t e = 0; e < n_endo; ++e) {
      const auto& label = block.x_labels[block.endogenous_cols[e]];
      report.robust_f.push_back({label, robust_first_stage_f(iv.first_stages[e], block.z_labels)});
      report.sw_f.push_back({label, sw_f(block, block.endogenous_cols[e])});
    }
    if (n_endo == 1 && n_excl == 1)
      report.efficient_f.push_back(
          {period_label, efficient_f(iv.first_stages[0], block.z_labels, 1)});
    if (n_endo == n_excl && n_endo >= 1)
      report.joint_strength_p.push_back({period_label, joint_strength_pvalue(block)});
  }

  // Equality of the same endogenous name across periods, from the full
  // stacked covariance.
  std::map<std::string, std::vector<DesignLabel>> by_name;
  for (auto c : d.endogenous_cols) {
    const auto& l = d.x_labels[c];
    if (!l.period.empty()) by_name[l.name].push_back(l);
  }
  for (const auto& [name, labels] : by_name) {
    for (std::size_t i = 0; i + 1 < labels.size(); ++i) {
      for (std::size_t j = i + 1; j < labels.size(); ++j) {
        const auto eq = wald_equality(run.iv.second_stage, labels[i], labels[j]);
        report.equality.push_back({labels[i], labels[j], eq.statistic, eq.dof, eq.p_value});
      }
    }
  }
  return report;
}

}  // namespace tradeiv::diagnostics
