#include <catch2/catch.hpp>

#include "tradeiv/datamodel.hpp"

using namespace tradeiv;

namespace {

CountyPanelRow make_row(const std::string& unit, const std::string& period, double y, double x,
                        double c, double w = 1.0) {
  CountyPanelRow row;
  row.unit = unit;
  row.cluster = "M-" + unit;
  row.period = period;
  row.values = {{"y", y}, {"x", x}, {"c", c}, {"w", w}};
  return row;
}

RegressionSpec base_spec(std::vector<std::string> periods) {
  RegressionSpec spec;
  spec.outcome = "y";
  spec.endogenous = {"x"};
  spec.instruments = {"z"};
  spec.controls = {"c"};
  spec.weight = "w";
  spec.periods = std::move(periods);
  return spec;
}

}  // namespace

TEST_CASE("single-period stacking is the identity design") {
  std::vector<CountyPanelRow> rows;
  for (int i = 0; i < 3; ++i) {
    auto r = make_row("u" + std::to_string(i), "p1", i + 0.5, 2.0 * i, 10.0 + i);
    r.values["z"] = 1.0 + i;
    rows.push_back(r);
  }
  auto d = build_stacked_panel(rows, base_spec({"p1"}));

  REQUIRE(d.X.rows() == 3);
  REQUIRE(d.x_labels.size() == 3);
  CHECK(d.x_labels[0] == DesignLabel{"intercept", "p1"});
  CHECK(d.x_labels[1] == DesignLabel{"x", "p1"});
  CHECK(d.x_labels[2] == DesignLabel{"c", "p1"});
  for (int i = 0; i < 3; ++i) {
    CHECK(d.X(i, 0) == 1.0);
    CHECK(d.X(i, 1) == 2.0 * i);
    CHECK(d.X(i, 2) == 10.0 + i);
    CHECK(d.y(i) == i + 0.5);
    CHECK(d.Z(i, 0) == 1.0 + i);
  }
  CHECK(d.endogenous_cols == std::vector<std::size_t>{1});
}

TEST_CASE("two-period stacking enumerated by hand") {
  // Values chosen so every cell of the 4x6 matrix is distinct.
  std::vector<CountyPanelRow> rows;
  auto add = [&](const std::string& unit, const std::string& period, double x, double c,
                 double z) {
    auto r = make_row(unit, period, 0.0, x, c);
    r.values["z"] = z;
    rows.push_back(r);
  };
  add("u1", "p1", 1, 5, 11);
  add("u2", "p1", 2, 6, 12);
  add("u1", "p2", 3, 7, 13);
  add("u2", "p2", 4, 8, 14);

  auto d = build_stacked_panel(rows, base_spec({"p1", "p2"}));
  REQUIRE(d.X.rows() == 4);
  REQUIRE(d.X.cols() == 6);
  std::vector<DesignLabel> expected = {{"intercept", "p1"}, {"intercept", "p2"}, {"x", "p1"},
                                       {"x", "p2"},         {"c", "p1"},         {"c", "p2"}};
  CHECK(d.x_labels == expected);

  const double want[4][6] = {
      {1, 0, 1, 0, 5, 0},
      {1, 0, 2, 0, 6, 0},
      {0, 1, 0, 3, 0, 7},
      {0, 1, 0, 4, 0, 8},
  };
  for (int i = 0; i < 4; ++i)
    for (int j = 0; j < 6; ++j) CHECK(d.X(i, j) == want[i][j]);

  // Instrument matrix mirrors the interaction layout.
  REQUIRE(d.Z.cols() == 2);
  CHECK(d.Z(0, 0) == 11);
  CHECK(d.Z(0, 1) == 0);
  CHECK(d.Z(3, 0) == 0);
  CHECK(d.Z(3, 1) == 14);

  SECTION("period dummies partition unity and absent periods are exactly zero") {
    for (int i = 0; i < 4; ++i) {
      CHECK(d.X(i, 0) + d.X(i, 1) == 1.0);
      const int dead_x = d.X(i, 0) == 1.0 ? 3 : 2;
      const int dead_c = d.X(i, 0) == 1.0 ? 5 : 4;
      CHECK(d.X(i, dead_x) == 0.0);
      CHECK(d.X(i, dead_c) == 0.0);
    }
  }
}

TEST_CASE("selecting one period of a stacked design reproduces the single-period design") {
  std::vector<CountyPanelRow> rows;
  for (int i = 0; i < 5; ++i) {
    for (const auto* p : {"p1", "p2"}) {
      auto r = make_row("u" + std::to_string(i), p, 0.1 * i, 1.0 + i, 3.0 - i);
      r.values["z"] = 0.5 * i + (p == std::string("p2") ? 7.0 : 0.0);
      rows.push_back(r);
    }
  }
  auto stacked = build_stacked_panel(rows, base_spec({"p1", "p2"}));
  auto single = build_stacked_panel(rows, base_spec({"p2"}));

  // Rows of period p2 in the stacked design, in order.
  std::vector<Eigen::Index> p2_rows;
  for (Eigen::Index i = 0; i < stacked.X.rows(); ++i)
    if (stacked.X(i, 1) == 1.0) p2_rows.push_back(i);
  REQUIRE(p2_rows.size() == 5);

  for (const auto& label : single.x_labels) {
    const auto sc = single.x_index(label);
    const auto fc = stacked.x_index(label);
    for (std::size_t r = 0; r < p2_rows.size(); ++r)
      CHECK(stacked.X(p2_rows[r], static_cast<Eigen::Index>(fc)) ==
            single.X(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(sc)));
  }
}

TEST_CASE("flag interactions expand endogenous and instrument columns") {
  std::vector<CountyPanelRow> rows;
  for (int i = 0; i < 4; ++i) {
    auto r = make_row("u" + std::to_string(i), "p1", 0.0, 1.0 + i, 2.0);
    r.values["z"] = 3.0 + i;
    r.flags["apl"] = i % 2 == 1;
    rows.push_back(r);
  }
  auto spec = base_spec({"p1"});
  spec.flag_interaction = "apl";
  auto d = build_stacked_panel(rows, spec);

  // x, x*apl endogenous; z, z*apl instruments; apl joins the controls.
  REQUIRE(d.endogenous_cols.size() == 2);
  CHECK(d.x_labels[d.endogenous_cols[0]] == DesignLabel{"x", "p1"});
  CHECK(d.x_labels[d.endogenous_cols[1]] == DesignLabel{"x*apl", "p1"});
  REQUIRE(d.Z.cols() == 2);
  CHECK(d.z_labels[1] == DesignLabel{"z*apl", "p1"});
  CHECK(d.X(1, d.x_index({"x*apl", "p1"})) == 2.0);
  CHECK(d.X(0, d.x_index({"x*apl", "p1"})) == 0.0);
  CHECK(d.Z(3, 1) == 6.0);
  CHECK(d.X(1, d.x_index({"apl", "p1"})) == 1.0);
}

TEST_CASE("pooled stacking keeps period dummies but single coefficient columns") {
  std::vector<CountyPanelRow> rows;
  for (int i = 0; i < 4; ++i) {
    auto r = make_row("u" + std::to_string(i), i % 2 == 0 ? "p1" : "p2", 0.5, 1.0 + i, 2.0 - i);
    r.values["z"] = 3.0 + i;
    rows.push_back(r);
  }
  auto spec = base_spec({"p1", "p2"});
  spec.interact_with_period = false;
  auto d = build_stacked_panel(rows, spec);

  std::vector<DesignLabel> expected = {
      {"intercept", "p1"}, {"intercept", "p2"}, {"x", ""}, {"c", ""}};
  CHECK(d.x_labels == expected);
  REQUIRE(d.Z.cols() == 1);
  CHECK(d.z_labels[0] == DesignLabel{"z", ""});
  for (int i = 0; i < 4; ++i) {
    CHECK(d.X(i, 2) == 1.0 + i);  // no period masking
    CHECK(d.X(i, 0) + d.X(i, 1) == 1.0);
  }
}

TEST_CASE("stacking errors") {
  std::vector<CountyPanelRow> rows = {make_row("u1", "p1", 1, 2, 3)};
  rows[0].values["z"] = 1.0;

  SECTION("unknown column") {
    auto spec = base_spec({"p1"});
    spec.controls = {"nope"};
    CHECK_THROWS_WITH(build_stacked_panel(rows, spec), Catch::Contains("unknown column 'nope'"));
  }
  SECTION("duplicate unit-period") {
    rows.push_back(rows[0]);
    CHECK_THROWS_WITH(build_stacked_panel(rows, base_spec({"p1"})),
                      Catch::Contains("duplicate"));
  }
  SECTION("empty period") {
    CHECK_THROWS_WITH(build_stacked_panel(rows, base_spec({"p1", "ghost"})),
                      Catch::Contains("period 'ghost' has no rows"));
  }
}

TEST_CASE("validate_panel reports violations without mutating input") {
  auto spec = base_spec({"p1"});
  std::vector<CountyPanelRow> rows;
  for (int i = 0; i < 4; ++i) {
    auto r = make_row("u" + std::to_string(i), "p1", 1, 2, 3);
    r.values["z"] = 1.0;
    rows.push_back(r);
  }

  SECTION("all valid") {
    auto report = validate_panel(rows, spec);
    CHECK(report.ok());
    CHECK(report.clean_rows.size() == 4);
  }
  SECTION("zero weight flagged") {
    rows[2].values["w"] = 0.0;
    const auto copy = rows;
    auto report = validate_panel(rows, spec);
    REQUIRE(report.violations.size() == 1);
    CHECK(report.violations[0].row == 2);
    CHECK(report.violations[0].message == "non-positive weight");
    CHECK(report.dirty_rows == std::vector<std::size_t>{2});
    // Purity: input unchanged, second call identical.
    CHECK(rows[2].values.at("w") == copy[2].values.at("w"));
    auto again = validate_panel(rows, spec);
    CHECK(again.violations.size() == report.violations.size());
    CHECK(again.dirty_rows == report.dirty_rows);
  }
  SECTION("duplicate unit-period pairs are flagged") {
    rows.push_back(rows[1]);
    auto report = validate_panel(rows, spec);
    REQUIRE(report.violations.size() == 1);
    CHECK(report.violations[0].row == 4);
    CHECK(report.violations[0].message.find("duplicate") != std::string::npos);
  }
  SECTION("missing named columns are flagged per row") {
    rows[1].values.erase("z");
    auto report = validate_panel(rows, spec);
    REQUIRE(report.violations.size() == 1);
    CHECK(report.violations[0].message.find("'z'") != std::string::npos);
  }
  SECTION("excludable units are counted") {
    std::vector<CountyPanelRow> many;
    std::set<std::string> listed;
    for (int i = 0; i < 712; ++i) {
      char code[8];
      std::snprintf(code, sizeof(code), "%05d", 10000 + i);
      auto r = make_row(code, "p1", 1, 2, 3);
      r.values["z"] = 1.0;
      many.push_back(r);
      if (i < 7) listed.insert(code);
    }
    auto report = validate_panel(many, spec, &listed);
    CHECK(report.ok());
    CHECK(report.excludable == 7);
  }
}
