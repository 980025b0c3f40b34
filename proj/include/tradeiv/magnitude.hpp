#pragma once

#include <cmath>
#include <iomanip>
#include <optional>
#include <sstream>
#include <string>

#include "tradeiv/error.hpp"

namespace tradeiv::magnitude {

// Inputs for one explained-share chain. Standard deviations are
// cross-sectional SDs of ANNUALIZED quantities, in percent. `scale_per_100`
// marks coefficients from regressions whose dependent variable was multiplied
// by 100. `claimed_effect_per_year` is an externally printed per-year effect
// to audit against the recomputation.
struct MagnitudeInput {
  double coefficient = 0.0;
  double sd_x = 0.0;
  double sd_y = 0.0;
  int years_x = 1;
  int years_y = 1;
  bool scale_per_100 = false;
  std::optional<double> claimed_effect_per_year;
};

inline void validate(const MagnitudeInput& in) {
  require(in.sd_x > 0.0, "sd_x must be positive, got ", in.sd_x);
  require(in.sd_y > 0.0, "sd_y must be positive, got ", in.sd_y);
  require(in.years_x >= 1 && in.years_y >= 1, "horizons must be >= 1 year");
}

struct MagnitudeReport {
  double effect_per_year = 0.0;        // sd_x * coefficient (scaled), percent per year
  double cumulative_effect = 0.0;      // effect_per_year * years_y
  double cumulative_outcome_sd = 0.0;  // sd_y * years_y
  double explained_share_pct = 0.0;    // 100 * |cumulative| / cumulative SD
  std::optional<double> claimed_effect_per_year;
  bool claim_consistent = true;
};

// One standard deviation of the regressor, pushed through the coefficient and
// cumulated over the outcome horizon, as a share of one cumulative standard
// deviation of the outcome. Annualized quantities are multiplied by the
// outcome-period length on both sides, so the share does not depend on it.
inline MagnitudeReport explained_share(const MagnitudeInput& in) {
  validate(in);
  MagnitudeReport out;
  out.effect_per_year = in.sd_x * in.coefficient * (in.scale_per_100 ? 0.01 : 1.0);
  out.cumulative_effect = out.effect_per_year * static_cast<double>(in.years_y);
  out.cumulative_outcome_sd = in.sd_y * static_cast<double>(in.years_y);
  out.explained_share_pct = 100.0 * std::abs(out.cumulative_effect) / out.cumulative_outcome_sd;
  if (in.claimed_effect_per_year) {
    out.claimed_effect_per_year = in.claimed_effect_per_year;
    // Printed chains round to about three decimals; anything beyond a 1%
    // relative band is a real inconsistency, not rounding.
    const double tol = std::max(0.005, 0.01 * std::abs(out.effect_per_year));
    out.claim_consistent = std::abs(*in.claimed_effect_per_year - out.effect_per_year) <= tol;
  }
  return out;
}

struct BoomBustReport {
  MagnitudeReport boom;
  MagnitudeReport bust;
};

// Same regressor shock evaluated against two outcome windows of different
// lengths (e.g. a six-year boom and a three-year bust).
inline BoomBustReport boom_bust_pair(const MagnitudeInput& boom, const MagnitudeInput& bust) {
  return {explained_share(boom), explained_share(bust)};
}

inline std::string sentence(const MagnitudeReport& r, int years_y) {
  std::ostringstream os;
  os.precision(3);
  os << std::fixed;
  os << "One SD of the regressor moves the outcome by " << r.effect_per_year
     << "% per year, " << r.cumulative_effect << "% over " << years_y
     << " years, explaining " << std::setprecision(2) << r.explained_share_pct
     << "% of one cumulative SD (" << std::setprecision(3) << r.cumulative_outcome_sd
     << "%) of the outcome.";
  if (r.claimed_effect_per_year && !r.claim_consistent) {
    os << " Note: the claimed per-year effect " << *r.claimed_effect_per_year
       << "% is inconsistent with the recomputed " << r.effect_per_year
       << "%; the recomputed value is used.";
  }
  return os.str();
}

}  // namespace tradeiv::magnitude
