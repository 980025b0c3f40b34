#include <catch2/catch.hpp>
#include <cmath>
#include <functional>
#include <map>
#include <set>

#include "tradeiv/gravity.hpp"
#include "tradeiv/rng.hpp"

using namespace tradeiv;
using namespace tradeiv::gravity;

TEST_CASE("competitor tariff index") {
  SECTION("unit tariffs give zero") {
    CHECK(competitor_tariff_index({{1.0, 1.0}, {2.5, 1.0}}, 3.0) == Approx(0.0).margin(1e-15));
  }
  SECTION("a single competitor collapses the power mean to its tariff") {
    for (double sigma : {1.5, 3.0, 7.0})
      CHECK(competitor_tariff_index({{4.2, 1.1}}, sigma) == Approx(std::log(1.1)).margin(1e-12));
  }
  SECTION("two competitors with equal shares, evaluated directly") {
    // T = (0.5 * 1 + 0.5 * 1.21^2)^(1/2) at sigma = 3.
    const double expected = std::log(std::sqrt(0.5 * 1.0 + 0.5 * 1.4641));
    CHECK(competitor_tariff_index({{3.0, 1.0}, {3.0, 1.21}}, 3.0) ==
          Approx(expected).margin(1e-12));
  }
  SECTION("errors") {
    CHECK_THROWS_WITH(competitor_tariff_index({{0.0, 1.1}}, 3.0),
                      Catch::Contains("zero total competitor flow"));
    CHECK_THROWS_WITH(competitor_tariff_index({{1.0, 1.1}}, 1.0),
                      Catch::Contains("sigma must exceed 1"));
    CHECK_THROWS_WITH(competitor_tariff_index({{1.0, 0.9}}, 3.0),
                      Catch::Contains("below 1"));
  }
  SECTION("nonnegative for gross tariffs") {
    rng::Stream rng(5, {31});
    for (int trial = 0; trial < 20; ++trial) {
      std::vector<std::pair<double, double>> pairs;
      for (int i = 0; i < 4; ++i)
        pairs.push_back({rng.uniform(0.1, 5.0), 1.0 + rng.uniform(0.0, 0.4)});
      CHECK(competitor_tariff_index(pairs, 2.0 + rng.uniform(0.0, 3.0)) >= -1e-15);
    }
  }
}

namespace {

GroupIndex groups_of(const std::vector<int>& ids) {
  std::vector<std::string> s;
  for (int i : ids) s.push_back("g" + std::to_string(i));
  return index_groups(s);
}

// Dense oracle: least squares with explicit dummy columns for both families
// (all levels of the first, all but one level of the second, plus an
// intercept). Valid whenever the bipartite group graph is connected.
Eigen::VectorXd dense_dummy_coefficients(const Eigen::VectorXd& y, const Eigen::MatrixXd& X,
                                         const GroupIndex& f1, const GroupIndex& f2) {
  const auto n = y.size();
  const auto k = X.cols();
  const auto l1 = static_cast<Eigen::Index>(f1.levels.size());
  const auto l2 = static_cast<Eigen::Index>(f2.levels.size());
  Eigen::MatrixXd D = Eigen::MatrixXd::Zero(n, k + l1 + (l2 - 1));
  D.leftCols(k) = X;
  for (Eigen::Index i = 0; i < n; ++i) {
    D(i, k + f1.group_of_row[static_cast<std::size_t>(i)]) = 1.0;
    const int g2 = f2.group_of_row[static_cast<std::size_t>(i)];
    if (g2 > 0) D(i, k + l1 + g2 - 1) = 1.0;
  }
  const Eigen::VectorXd full = D.colPivHouseholderQr().solve(y);
  return full.head(k);
}

bool connected(const GroupIndex& f1, const GroupIndex& f2) {
  // Union-find over the union of level sets.
  const std::size_t total = f1.levels.size() + f2.levels.size();
  std::vector<std::size_t> parent(total);
  for (std::size_t i = 0; i < total; ++i) parent[i] = i;
  std::function<std::size_t(std::size_t)> find = [&](std::size_t a) {
    while (parent[a] != a) a = parent[a] = parent[parent[a]];
    return a;
  };
  for (std::size_t i = 0; i < f1.group_of_row.size(); ++i) {
    const auto a = find(static_cast<std::size_t>(f1.group_of_row[i]));
    const auto b = find(f1.levels.size() + static_cast<std::size_t>(f2.group_of_row[i]));
    parent[a] = b;
  }
  std::set<std::size_t> roots;
  for (std::size_t i = 0; i < total; ++i) roots.insert(find(i));
  return roots.size() == 1;
}

}  // namespace

TEST_CASE("fixed-effect absorption") {
  SECTION("single family demeans exactly in one sweep") {
    Eigen::MatrixXd cols(6, 2);
    cols << 1, 10, 2, 20, 3, 30, 4, 40, 5, 50, 6, 60;
    auto fam = groups_of({0, 0, 1, 1, 2, 2});
    auto abs = absorb_fixed_effects(cols, {fam});
    CHECK(abs.convergence.converged);
    for (int g = 0; g < 3; ++g) {
      double mean0 = (abs.demeaned(2 * g, 0) + abs.demeaned(2 * g + 1, 0)) / 2.0;
      CHECK(mean0 == Approx(0.0).margin(1e-12));
    }
  }
  SECTION("columns constant within every group vanish") {
    Eigen::MatrixXd cols(4, 1);
    cols << 7, 7, -3, -3;
    auto fam = groups_of({0, 0, 1, 1});
    auto abs = absorb_fixed_effects(cols, {fam});
    CHECK(abs.demeaned.cwiseAbs().maxCoeff() < 1e-12);
  }
  SECTION("two-family absorption matches the dense dummy oracle") {
    rng::Stream rng(17, {32});
    for (int trial = 0; trial < 10; ++trial) {
      const int n = 20;
      std::vector<int> g1(n), g2(n);
      GroupIndex f1, f2;
      do {
        for (int i = 0; i < n; ++i) {
          g1[i] = static_cast<int>(rng.uniform(0, 4));
          g2[i] = static_cast<int>(rng.uniform(0, 3));
        }
        f1 = groups_of(g1);
        f2 = groups_of(g2);
      } while (!connected(f1, f2));

      Eigen::VectorXd y(n);
      Eigen::MatrixXd X(n, 2);
      for (int i = 0; i < n; ++i) {
        X(i, 0) = rng.normal();
        X(i, 1) = rng.normal();
        y(i) = 1.5 * X(i, 0) - 0.7 * X(i, 1) + 0.5 * g1[i] - 0.9 * g2[i] + rng.normal();
      }
      Eigen::MatrixXd data(n, 3);
      data.col(0) = y;
      data.rightCols(2) = X;
      auto abs = absorb_fixed_effects(data, {f1, f2});
      const Eigen::VectorXd beta =
          abs.demeaned.rightCols(2).colPivHouseholderQr().solve(abs.demeaned.col(0));
      const Eigen::VectorXd oracle = dense_dummy_coefficients(y, X, f1, f2);
      CHECK(beta(0) == Approx(oracle(0)).margin(1e-8));
      CHECK(beta(1) == Approx(oracle(1)).margin(1e-8));

      // Residual group means vanish for every family.
      for (const auto& fam : {f1, f2}) {
        std::map<int, std::pair<double, int>> acc;
        for (int i = 0; i < n; ++i) {
          acc[fam.group_of_row[static_cast<std::size_t>(i)]].first += abs.demeaned(i, 0);
          acc[fam.group_of_row[static_cast<std::size_t>(i)]].second += 1;
        }
        for (const auto& [g, cell] : acc)
          CHECK(std::abs(cell.first / cell.second) <= 1e-9);
      }
    }
  }
  SECTION("iteration cap raises a non-convergence error") {
    Eigen::MatrixXd cols(4, 1);
    cols << 1, 2, 3, 4;
    auto f1 = groups_of({0, 0, 1, 1});
    auto f2 = groups_of({0, 1, 0, 1});
    CHECK_THROWS_WITH(absorb_fixed_effects(cols, {f1, f2}, 1e-10, 1),
                      Catch::Contains("did not converge"));
  }
}

namespace {

struct AnalyticWorld {
  std::vector<TradeFlowRecord> flows;
  std::vector<TariffRecord> tariffs;
  std::vector<std::string> competitors;
  double sigma;
};

// Flows generated exactly from the constant-elasticity structure: competitor
// country shifters separate into country and industry-year effects, the focal
// shifter varies freely, and a destination demand term cancels against the
// offset.
AnalyticWorld analytic_world(std::uint64_t seed, double sigma, double noise_sd = 0.0,
                             double scale = 1.0) {
  AnalyticWorld w;
  w.sigma = sigma;
  w.competitors = {"C1", "C2", "C3", "C4"};
  const std::vector<std::string> destinations = {"D1", "D2", "D3", "D4"};
  const std::vector<std::string> industries = {"A", "B", "C", "D"};
  const std::vector<int> years = {2000, 2001, 2002};
  rng::Stream rng(seed, {33});
  std::vector<std::string> exporters = {"USA"};
  exporters.insert(exporters.end(), w.competitors.begin(), w.competitors.end());

  std::map<std::string, double> mu;
  for (const auto& c : w.competitors) mu[c] = rng.normal(0.0, 0.6);
  std::map<std::pair<std::string, std::string>, double> dist;
  for (const auto& e : exporters)
    for (const auto& j : destinations) dist[{e, j}] = rng.normal(0.0, 0.4);

  for (const auto& s : industries) {
    for (int t : years) {
      const double a_focal = rng.normal(0.0, 0.5);
      const double nu = rng.normal(0.0, 0.5);
      for (const auto& j : destinations) {
        const double phi = rng.normal(0.0, 0.5);
        for (const auto& e : exporters) {
          const double log_tariff = std::abs(rng.normal(0.0, 0.15));
          const double shifter = e == "USA" ? a_focal : mu[e] + nu;
          const double noise = noise_sd > 0.0 ? rng.normal(0.0, noise_sd) : 0.0;
          const double log_value =
              shifter + phi + (1.0 - sigma) * (dist[{e, j}] + log_tariff) + noise;
          w.flows.push_back({e, j, s, t, scale * std::exp(log_value)});
          w.tariffs.push_back({j, e, s, t, std::exp(log_tariff)});
        }
      }
    }
  }
  return w;
}

}  // namespace

TEST_CASE("gravity recovers the tariff elasticities from exact data") {
  auto w = analytic_world(1, 3.0);
  auto rows = build_design_rows(w.flows, w.tariffs, Side::Export, "USA", w.competitors, 3.0);
  REQUIRE(rows.size() == 4 * 3 * 4);
  auto fit = fit_gravity(rows, Side::Export, 3.0);

  CHECK(fit.beta_own_tariff == Approx(-2.0).margin(1e-8));
  CHECK(fit.beta_competitor_index == Approx(2.0).margin(1e-8));
  CHECK(fit.beta_own_tariff + fit.beta_competitor_index == Approx(0.0).margin(1e-8));
  CHECK(fit.rss < 1e-12);
  CHECK(fit.convergence.converged);

  SECTION("prediction differs from the actual flow by the omitted effects only") {
    // ln X - ln Xhat must be constant within each (industry-year, partner)
    // cell; with singleton cells, check constancy via the recovered effects.
    for (const auto& r : rows) {
      const double gap = r.focal_flow_log - predict_flow(fit, r);
      const double fe_sum =
          fit.fe_industry_year.at(r.fe_industry_year) + fit.fe_partner.at(r.fe_partner);
      CHECK(gap == Approx(fe_sum).margin(1e-8));
    }
  }
  SECTION("doubling all flow levels leaves the elasticities unchanged") {
    auto w2 = analytic_world(1, 3.0, 0.0, 2.0);
    auto rows2 = build_design_rows(w2.flows, w2.tariffs, Side::Export, "USA", w2.competitors, 3.0);
    auto fit2 = fit_gravity(rows2, Side::Export, 3.0);
    CHECK(fit2.beta_own_tariff == Approx(fit.beta_own_tariff).margin(1e-10));
    CHECK(fit2.beta_competitor_index == Approx(fit.beta_competitor_index).margin(1e-10));
  }
  SECTION("relabeling fixed-effect ids changes nothing but bookkeeping") {
    auto rows2 = rows;
    for (auto& r : rows2) {
      r.fe_industry_year = "X" + r.fe_industry_year;
      r.fe_partner = "Y" + r.fe_partner;
    }
    auto fit2 = fit_gravity(rows2, Side::Export, 3.0);
    CHECK(fit2.beta_own_tariff == Approx(fit.beta_own_tariff).margin(1e-14));
    CHECK(fit2.beta_competitor_index == Approx(fit.beta_competitor_index).margin(1e-14));
  }
}

TEST_CASE("all-unit tariffs leave no variation to fit") {
  auto w = analytic_world(2, 3.0);
  for (auto& t : w.tariffs) t.gross_rate = 1.0;
  // Rebuild flows with unit tariffs so the data are consistent.
  for (auto& f : w.flows) f.value = f.value;  // values irrelevant for the error path
  auto rows = build_design_rows(w.flows, w.tariffs, Side::Export, "USA", w.competitors, 3.0);
  CHECK_THROWS_WITH(fit_gravity(rows, Side::Export, 3.0), Catch::Contains("no variation"));
}

TEST_CASE("absorbed gravity regression matches a dense dummy oracle") {
  // Five exporting countries, four industries, three years, with noise: the
  // absorbed estimate must equal the regression with one dummy per
  // fixed-effect level.
  auto w = analytic_world(3, 3.0, 0.25);
  auto rows = build_design_rows(w.flows, w.tariffs, Side::Export, "USA", w.competitors, 3.0);
  auto fit = fit_gravity(rows, Side::Export, 3.0);

  std::vector<std::string> iy, partner;
  const auto n = static_cast<Eigen::Index>(rows.size());
  Eigen::VectorXd y(n);
  Eigen::MatrixXd X(n, 2);
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto& r = rows[static_cast<std::size_t>(i)];
    y(i) = r.focal_flow_log - r.offset_log;
    X(i, 0) = r.own_tariff_log;
    X(i, 1) = r.competitor_index_log;
    iy.push_back(r.fe_industry_year);
    partner.push_back(r.fe_partner);
  }
  const auto oracle =
      dense_dummy_coefficients(y, X, index_groups(iy), index_groups(partner));
  CHECK(fit.beta_own_tariff == Approx(oracle(0)).margin(1e-8));
  CHECK(fit.beta_competitor_index == Approx(oracle(1)).margin(1e-8));
}

TEST_CASE("import-side recovery from exact data") {
  // Reuse the export construction with roles swapped: destinations export to
  // the focal country and the competitor markets.
  const double sigma = 3.0;
  rng::Stream rng(4, {34});
  std::vector<TradeFlowRecord> flows;
  std::vector<TariffRecord> tariffs;
  const std::vector<std::string> competitors = {"C1", "C2", "C3"};
  const std::vector<std::string> origins = {"D1", "D2", "D3", "D4"};

  std::map<std::string, double> eta;
  for (const auto& c : competitors) eta[c] = rng.normal(0.0, 0.6);
  std::map<std::pair<std::string, std::string>, double> dist;
  for (const auto& j : origins)
    for (const auto& i : {std::string("USA"), competitors[0], competitors[1], competitors[2]})
      dist[{j, i}] = rng.normal(0.0, 0.4);

  for (const auto& s : {std::string("A"), std::string("B"), std::string("C")}) {
    for (int t : {2000, 2001}) {
      const double m_focal = rng.normal(0.0, 0.5);
      const double nu = rng.normal(0.0, 0.5);
      for (const auto& j : origins) {
        const double b_exp = rng.normal(0.0, 0.5);
        for (const auto& i :
             {std::string("USA"), competitors[0], competitors[1], competitors[2]}) {
          const double log_tariff = std::abs(rng.normal(0.0, 0.15));
          const double market = i == "USA" ? m_focal : eta[i] + nu;
          const double log_value =
              b_exp + market + (1.0 - sigma) * (dist[{j, i}] + log_tariff);
          flows.push_back({j, i, s, t, std::exp(log_value)});
          tariffs.push_back({i, j, s, t, std::exp(log_tariff)});
        }
      }
    }
  }
  auto rows = build_design_rows(flows, tariffs, Side::Import, "USA", competitors, sigma);
  auto fit = fit_gravity(rows, Side::Import, sigma);
  CHECK(fit.beta_own_tariff == Approx(1.0 - sigma).margin(1e-8));
  CHECK(fit.beta_competitor_index == Approx(sigma - 1.0).margin(1e-8));
}

TEST_CASE("predict_flow degenerate cases") {
  GravityFit fit;
  fit.convergence.converged = true;
  GravityDesignRow row;
  row.offset_log = 1.7;
  row.own_tariff_log = 0.2;
  row.competitor_index_log = 0.05;

  SECTION("zero coefficients leave only the offset") {
    CHECK(predict_flow(fit, row) == 1.7);
  }
  SECTION("unit own tariff removes the own-tariff term") {
    fit.beta_own_tariff = -2.0;
    fit.beta_competitor_index = 2.0;
    row.own_tariff_log = 0.0;
    CHECK(predict_flow(fit, row) == Approx(1.7 + 2.0 * 0.05));
  }
  SECTION("monotone decreasing in the own tariff when the coefficient is negative") {
    fit.beta_own_tariff = -2.0;
    double prev = predict_flow(fit, row);
    for (double tau : {0.25, 0.3, 0.4}) {
      row.own_tariff_log = tau;
      const double cur = predict_flow(fit, row);
      CHECK(cur < prev);
      prev = cur;
    }
  }
  SECTION("unconverged fits are refused") {
    fit.convergence.converged = false;
    CHECK_THROWS_WITH(predict_flow(fit, row), Catch::Contains("did not converge"));
  }
}

TEST_CASE("aggregate_predicted") {
  ingest::CrosswalkTable identity;
  identity.direction = "identity";
  identity.entries = {{"A", {{"A", 1.0}}}, {"B", {{"B", 1.0}}}, {"C", {{"C", 1.0}}}};

  SECTION("one product, one partner, identity crosswalk") {
    std::vector<PredictedFlow> preds = {{"A", "D1", 2000, std::log(4.5)}};
    auto out = aggregate_predicted(preds, identity);
    CHECK(out.at({"A", 2000}) == Approx(4.5).margin(1e-12));
  }
  SECTION("two partners sum in levels") {
    std::vector<PredictedFlow> preds = {{"A", "D1", 2000, std::log(3.0)},
                                        {"A", "D2", 2000, std::log(7.0)}};
    auto out = aggregate_predicted(preds, identity);
    CHECK(out.at({"A", 2000}) == Approx(10.0).margin(1e-12));
  }
  SECTION("three products split across two industries with weights") {
    ingest::CrosswalkTable xw;
    xw.direction = "t";
    xw.entries = {{"A", {{"S1", 1.0}}},
                  {"B", {{"S1", 0.25}, {"S2", 0.75}}},
                  {"C", {{"S2", 1.0}}}};
    std::vector<PredictedFlow> preds = {{"A", "D1", 2000, std::log(8.0)},
                                        {"B", "D1", 2000, std::log(4.0)},
                                        {"C", "D1", 2000, std::log(2.0)}};
    auto out = aggregate_predicted(preds, xw);
    CHECK(out.at({"S1", 2000}) == Approx(8.0 + 0.25 * 4.0).margin(1e-12));
    CHECK(out.at({"S2", 2000}) == Approx(0.75 * 4.0 + 2.0).margin(1e-12));
  }
  SECTION("partner filter restricts the sum") {
    std::vector<PredictedFlow> preds = {{"A", "D1", 2000, std::log(3.0)},
                                        {"A", "D2", 2000, std::log(7.0)}};
    std::set<std::string> only = {"D2"};
    auto out = aggregate_predicted(preds, identity, &only);
    CHECK(out.at({"A", 2000}) == Approx(7.0).margin(1e-12));
  }
}

TEST_CASE("sigma profiling finds the generating sigma on exact data") {
  auto w = analytic_world(6, 3.0);
  SigmaConfig config;
  config.sigma = 3.0;
  config.grid = {2.0, 2.5, 3.0, 3.5, 4.0};
  auto profile = profile_sigma(w.flows, w.tariffs, Side::Export, "USA", w.competitors, config);
  CHECK(profile.best_sigma == 3.0);
  REQUIRE(profile.points.size() == 5);
  for (const auto& p : profile.points)
    if (p.sigma != 3.0) CHECK(p.rss > profile.points[2].rss);
}
