#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>

#include "provshift/metrics.hpp"
#include "provshift/random.hpp"
#include "test_util.hpp"

using namespace provshift;

namespace {

// Rows as (y, z, p1).
Dataset rows_dataset(const std::vector<std::array<double, 3>>& rows, Eigen::MatrixXd& proba) {
  Dataset d;
  d.dim = 1;
  proba.resize(static_cast<Eigen::Index>(rows.size()), 2);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const auto& r = rows[i];
    d.examples.push_back({{0.0}, static_cast<int>(r[0]), static_cast<int>(r[1]), "s" + std::to_string(i), "e" + std::to_string(i)});
    proba(static_cast<Eigen::Index>(i), 1) = r[2];
    proba(static_cast<Eigen::Index>(i), 0) = 1 - r[2];
  }
  return d;
}

}  // namespace

TEST(WorstGroup, MinimumOverPresentGroups) {
  EXPECT_EQ(worst_group({0.9, 0.4, 0.7, 0.8}), 0.4);
  EXPECT_EQ(worst_group({0.9, std::nullopt, 0.7}), 0.7);
  EXPECT_ERROR_CODE(worst_group({std::nullopt, std::nullopt}), "no-groups");
}

TEST(Auprc, HandExamples) {
  EXPECT_EQ(*auprc({0.9, 0.8, 0.7, 0.6}, {1, 0, 1, 0}), 0.5 * (1.0 + 2.0 / 3.0));
  EXPECT_NEAR(*auprc({0.9, 0.8, 0.7, 0.6}, {1, 0, 1, 0}), 0.8333, 1e-4);
  EXPECT_EQ(*auprc({0.9, 0.8, 0.2, 0.1}, {1, 1, 0, 0}), 1.0);
  // One tied threshold holding everything: precision = prevalence.
  EXPECT_DOUBLE_EQ(*auprc({0.5, 0.5, 0.5, 0.5}, {1, 0, 0, 0}), 0.25);
  EXPECT_FALSE(auprc({0.3, 0.6}, {1, 1}).has_value());
  EXPECT_FALSE(auprc({0.3, 0.6}, {0, 0}).has_value());
}

TEST(Auprc, RandomScoresApproachPrevalence) {
  Rng rng = make_rng(1, "auprc");
  std::vector<double> s;
  std::vector<int> y;
  for (int i = 0; i < 10000; ++i) {
    s.push_back(uniform01(rng));
    y.push_back(uniform01(rng) < 0.3 ? 1 : 0);
  }
  const double prevalence = static_cast<double>(std::count(y.begin(), y.end(), 1)) / 10000.0;
  EXPECT_NEAR(*auprc(s, y), prevalence, 0.02);
}

TEST(Ece, HandBinning) {
  EXPECT_DOUBLE_EQ(ece({0.9, 0.9, 0.6, 0.6}, {1, 1, 1, 0}), 0.1);
  EXPECT_EQ(ece({1.0, 1.0}, {1, 1}), 0.0);
  EXPECT_EQ(ece({}, {}), 0.0);
}

TEST(Ece, CalibratedPredictorIsNearZero) {
  Rng rng = make_rng(2, "ece");
  std::vector<double> p1;
  std::vector<int> y;
  for (int i = 0; i < 10000; ++i) {
    const double p = uniform01(rng);
    p1.push_back(p);
    y.push_back(uniform01(rng) < p ? 1 : 0);
  }
  const double e = ece_from_p1(p1, y);
  EXPECT_LE(e, 0.02);
  EXPECT_GE(e, 0.0);
}

TEST(Evaluate, PerfectPredictions) {
  Eigen::MatrixXd p;
  const Dataset d = rows_dataset({{0, 0, 0.0}, {1, 0, 1.0}, {0, 1, 0.0}, {1, 1, 1.0}}, p);
  const EvalReport r = evaluate(p, d);
  EXPECT_EQ(r.micro.accuracy, 1.0);
  EXPECT_EQ(r.micro.f1, 1.0);
  EXPECT_EQ(*r.micro.auprc, 1.0);
  EXPECT_EQ(r.micro.ece, 0.0);
  EXPECT_EQ(r.wga, 1.0);
  EXPECT_TRUE(r.flags.empty());
}

TEST(Evaluate, LevelsAndInvariants) {
  Eigen::MatrixXd p;
  // z = 0: 3/4 right; z = 1: 1/2 right.
  const Dataset d = rows_dataset({{0, 0, 0.2}, {0, 0, 0.7}, {1, 0, 0.9}, {1, 0, 0.8}, {0, 1, 0.1}, {1, 1, 0.3}}, p);
  const EvalReport r = evaluate(p, d);
  // cells are indexed 2y + z
  EXPECT_DOUBLE_EQ(*r.cell_accuracy[0], 0.5);
  EXPECT_DOUBLE_EQ(*r.cell_accuracy[2], 1.0);
  EXPECT_DOUBLE_EQ(*r.cell_accuracy[3], 0.0);
  EXPECT_DOUBLE_EQ(r.provenance[0]->accuracy, 0.75);
  EXPECT_DOUBLE_EQ(r.provenance[1]->accuracy, 0.5);
  EXPECT_DOUBLE_EQ(r.wga, 0.5);
  EXPECT_EQ(r.worst_provenance, 1);
  EXPECT_DOUBLE_EQ(r.worst_cell_accuracy, 0.0);
  EXPECT_DOUBLE_EQ(r.macro.accuracy, 0.625);
  EXPECT_DOUBLE_EQ(r.micro.accuracy, 4.0 / 6.0);
  EXPECT_LE(r.wga, r.macro.accuracy);
  for (const auto& c : r.cell_accuracy)
    if (c) EXPECT_GE(*c, r.worst_cell_accuracy);
  EXPECT_EQ(r.cell_counts[0] + r.cell_counts[1] + r.cell_counts[2] + r.cell_counts[3], 6);
}

TEST(Evaluate, RelabelingProvenancesPermutes) {
  Eigen::MatrixXd p;
  const std::vector<std::array<double, 3>> rows = {{0, 0, 0.2}, {0, 0, 0.7}, {1, 0, 0.9}, {1, 1, 0.8}, {0, 1, 0.6}, {1, 1, 0.3}, {0, 1, 0.4}};
  const Dataset d = rows_dataset(rows, p);
  std::vector<std::array<double, 3>> swapped = rows;
  for (auto& r : swapped) r[1] = 1 - r[1];
  Eigen::MatrixXd q;
  const Dataset e = rows_dataset(swapped, q);
  const EvalReport a = evaluate(p, d), b = evaluate(q, e);
  EXPECT_DOUBLE_EQ(a.micro.accuracy, b.micro.accuracy);
  EXPECT_DOUBLE_EQ(a.macro.accuracy, b.macro.accuracy);
  EXPECT_DOUBLE_EQ(a.macro.f1, b.macro.f1);
  EXPECT_DOUBLE_EQ(a.wga, b.wga);
  EXPECT_DOUBLE_EQ(a.provenance[0]->accuracy, b.provenance[1]->accuracy);
  EXPECT_DOUBLE_EQ(a.log_alpha, -b.log_alpha);
}

TEST(Evaluate, AbsentGroupsAreFlaggedNotZero) {
  Eigen::MatrixXd p;
  const Dataset d = rows_dataset({{1, 0, 0.9}, {1, 0, 0.8}, {1, 1, 0.2}, {1, 1, 0.7}}, p);
  const EvalReport r = evaluate(p, d);
  EXPECT_FALSE(r.cell_accuracy[0].has_value());
  EXPECT_DOUBLE_EQ(r.worst_cell_accuracy, 0.5);
  EXPECT_FALSE(r.micro.auprc.has_value());
  EXPECT_FALSE(r.alpha_defined);
  auto has = [&](const std::string& f) { return std::find(r.flags.begin(), r.flags.end(), f) != r.flags.end(); };
  EXPECT_TRUE(has("empty-cell-y0-z0"));
  EXPECT_TRUE(has("micro-auprc-undefined"));
  EXPECT_TRUE(has("alpha-undefined"));
}

TEST(Evaluate, InputValidation) {
  Eigen::MatrixXd p(1, 2);
  EXPECT_ERROR_CODE(evaluate(p, Dataset{}), "empty-dataset");
  Eigen::MatrixXd q;
  const Dataset d = rows_dataset({{0, 0, 0.1}, {1, 1, 0.9}}, q);
  EXPECT_ERROR_CODE(evaluate(p, d), "argument");
}

TEST(Evaluate, Deterministic) {
  Eigen::MatrixXd p;
  const Dataset d = rows_dataset({{0, 0, 0.2}, {1, 1, 0.7}, {1, 0, 0.4}, {0, 1, 0.55}}, p);
  EXPECT_EQ(to_json(evaluate(p, d)).dump(), to_json(evaluate(p, d)).dump());
  EXPECT_EQ(report_values(evaluate(p, d)).size(), report_columns().size());
}

TEST(LineFit, HandOls) {
  const LineFit f = fit_alpha_line({{0, 1}, {1, 3}, {2, 5}});
  EXPECT_EQ(f.slope, 2.0);
  EXPECT_EQ(f.intercept, 1.0);
  EXPECT_EQ(f.r2, 1.0);
  const LineFit flat = fit_alpha_line({{0, 0.7}, {1, 0.7}, {2, 0.7}});
  EXPECT_EQ(flat.slope, 0.0);
  EXPECT_EQ(flat.r2, 0.0);
  EXPECT_ERROR_CODE(fit_alpha_line({{1, 0}, {1, 2}, {1, 3}}), "rank-deficient");
  EXPECT_ERROR_CODE(fit_alpha_line({{0, 1}, {1, 2}}), "argument");
}

TEST(LineFit, OrderInvariant) {
  std::vector<std::pair<double, double>> pts = {{-1, 0.9}, {-0.5, 0.8}, {0, 0.72}, {0.5, 0.6}, {1, 0.55}};
  const LineFit a = fit_alpha_line(pts);
  std::reverse(pts.begin(), pts.end());
  std::swap(pts[1], pts[3]);
  const LineFit b = fit_alpha_line(pts);
  EXPECT_EQ(a.slope, b.slope);
  EXPECT_EQ(a.intercept, b.intercept);
  EXPECT_EQ(a.r2, b.r2);
  EXPECT_GT(a.r2, 0.9);
  EXPECT_LT(a.slope, 0.0);
}

TEST(ClassMetrics, F1UndefinedIsFlagged) {
  std::vector<std::string> flags;
  const ClassMetrics m = class_metrics({0.1, 0.2}, {0, 0}, &flags, "x-");
  EXPECT_EQ(m.accuracy, 1.0);
  EXPECT_EQ(m.f1, 0.0);
  EXPECT_NE(std::find(flags.begin(), flags.end(), "x-f1-undefined"), flags.end());
  bool defined = true;
  EXPECT_DOUBLE_EQ(binary_f1({1, 1, 0, 0}, {1, 0, 1, 0}, &defined), 0.5);
  EXPECT_TRUE(defined);
}
