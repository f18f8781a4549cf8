#pragma once

#include <array>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "provshift/datamodel.hpp"

namespace provshift {

struct ClassMetrics {
  std::size_t count = 0;
  double accuracy = 0.0;
  double f1 = 0.0;
  std::optional<double> auprc;  // undefined when one class is absent
  double ece = 0.0;
};

struct EvalReport {
  // Cells indexed by GroupKey::index() = 2y + z.
  std::array<long long, 4> cell_counts{};
  std::array<std::optional<double>, 4> cell_accuracy;
  std::array<std::optional<ClassMetrics>, 2> provenance;
  ClassMetrics micro;
  ClassMetrics macro;
  // Worst level: minimum over provenances with examples.
  double wga = 0.0;
  int worst_provenance = -1;
  // Minimum over nonempty (y, z) cells, kept alongside the worst level.
  double worst_cell_accuracy = 0.0;
  double log_alpha = 0.0;
  bool alpha_defined = false;
  std::vector<std::string> flags;
};

// proba: n x 2 class probabilities aligned with data.examples.
EvalReport evaluate(const Eigen::MatrixXd& proba, const Dataset& data);

ClassMetrics class_metrics(const std::vector<double>& p1, const std::vector<int>& labels, std::vector<std::string>* flags = nullptr,
                           const std::string& scope = "");
// Minimum over present groups; throws "no-groups" when nothing is present.
double worst_group(const std::vector<std::optional<double>>& accuracies);

// Average precision of scores for the positive class; equal scores form one
// threshold. nullopt when either class is missing.
std::optional<double> auprc(const std::vector<double>& scores, const std::vector<int>& labels);
// Expected calibration error over 10 equal-width bins of max-class confidence.
double ece(const std::vector<double>& confidence, const std::vector<int>& correct, int bins = 10);
double ece_from_p1(const std::vector<double>& p1, const std::vector<int>& labels, int bins = 10);
double binary_f1(const std::vector<int>& predicted, const std::vector<int>& labels, bool* defined = nullptr);

struct LineFit {
  double slope = 0.0;
  double intercept = 0.0;
  double r2 = 0.0;
};
// Ordinary least squares. R^2 is 0 when the responses are constant.
LineFit fit_alpha_line(std::vector<std::pair<double, double>> points);

nlohmann::json to_json(const EvalReport& r);
nlohmann::json to_json(const LineFit& f);
// Flat CSV record with a stable column order.
std::vector<std::string> report_columns();
std::vector<std::string> report_values(const EvalReport& r);

}  // namespace provshift
