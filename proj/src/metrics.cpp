#include "provshift/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "provshift/dataset_io.hpp"
#include "provshift/error.hpp"

namespace provshift {

namespace {

int predict(double p1) { return p1 > 0.5 ? 1 : 0; }

std::string fmt(const std::optional<double>& v) { return v ? format_double(*v) : ""; }

nlohmann::json opt_json(const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(nullptr); }

nlohmann::json metrics_json(const ClassMetrics& m) {
  return {{"count", m.count}, {"accuracy", m.accuracy}, {"f1", m.f1}, {"auprc", opt_json(m.auprc)}, {"ece", m.ece}};
}

}  // namespace

std::optional<double> auprc(const std::vector<double>& scores, const std::vector<int>& labels) {
  if (scores.size() != labels.size()) throw argument_error("scores and labels differ in length");
  const auto positives = static_cast<double>(std::count(labels.begin(), labels.end(), 1));
  if (positives == 0 || positives == static_cast<double>(labels.size())) return std::nullopt;
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  double tp = 0, fp = 0, ap = 0, prev_recall = 0;
  for (std::size_t k = 0; k < order.size();) {
    std::size_t end = k;
    while (end < order.size() && scores[order[end]] == scores[order[k]]) {
      (labels[order[end]] == 1 ? tp : fp) += 1;
      ++end;
    }
    const double recall = tp / positives;
    ap += (tp / (tp + fp)) * (recall - prev_recall);
    prev_recall = recall;
    k = end;
  }
  return ap;
}

double ece(const std::vector<double>& confidence, const std::vector<int>& correct, int bins) {
  if (confidence.size() != correct.size()) throw argument_error("confidence and correctness differ in length");
  if (confidence.empty()) return 0.0;
  std::vector<double> conf_sum(static_cast<std::size_t>(bins), 0.0), hit_sum(static_cast<std::size_t>(bins), 0.0);
  std::vector<double> count(static_cast<std::size_t>(bins), 0.0);
  for (std::size_t i = 0; i < confidence.size(); ++i) {
    const auto b = static_cast<std::size_t>(std::clamp(static_cast<int>(std::floor(confidence[i] * bins)), 0, bins - 1));
    conf_sum[b] += confidence[i];
    hit_sum[b] += correct[i];
    count[b] += 1;
  }
  const double n = static_cast<double>(confidence.size());
  double total = 0;
  for (std::size_t b = 0; b < count.size(); ++b)
    if (count[b] > 0) total += count[b] / n * std::abs(hit_sum[b] / count[b] - conf_sum[b] / count[b]);
  return total;
}

double ece_from_p1(const std::vector<double>& p1, const std::vector<int>& labels, int bins) {
  std::vector<double> conf(p1.size());
  std::vector<int> correct(p1.size());
  for (std::size_t i = 0; i < p1.size(); ++i) {
    conf[i] = std::max(p1[i], 1.0 - p1[i]);
    correct[i] = predict(p1[i]) == labels[i] ? 1 : 0;
  }
  return ece(conf, correct, bins);
}

double binary_f1(const std::vector<int>& predicted, const std::vector<int>& labels, bool* defined) {
  double tp = 0, fp = 0, fn = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (predicted[i] == 1 && labels[i] == 1) tp += 1;
    if (predicted[i] == 1 && labels[i] == 0) fp += 1;
    if (predicted[i] == 0 && labels[i] == 1) fn += 1;
  }
  const double denom = 2 * tp + fp + fn;
  if (defined) *defined = denom > 0;
  return denom > 0 ? 2 * tp / denom : 0.0;
}

ClassMetrics class_metrics(const std::vector<double>& p1, const std::vector<int>& labels, std::vector<std::string>* flags,
                           const std::string& scope) {
  ClassMetrics m;
  m.count = labels.size();
  if (labels.empty()) return m;
  std::vector<int> pred(p1.size());
  double hits = 0;
  for (std::size_t i = 0; i < p1.size(); ++i) {
    pred[i] = predict(p1[i]);
    hits += pred[i] == labels[i] ? 1 : 0;
  }
  m.accuracy = hits / static_cast<double>(labels.size());
  bool f1_defined = true;
  m.f1 = binary_f1(pred, labels, &f1_defined);
  m.auprc = auprc(p1, labels);
  m.ece = ece_from_p1(p1, labels);
  if (flags && !m.auprc) flags->push_back(scope + "auprc-undefined");
  if (flags && !f1_defined) flags->push_back(scope + "f1-undefined");
  return m;
}

double worst_group(const std::vector<std::optional<double>>& accuracies) {
  double worst = std::numeric_limits<double>::infinity();
  for (const auto& a : accuracies)
    if (a) worst = std::min(worst, *a);
  if (std::isinf(worst)) throw Error("no-groups", "no group has examples");
  return worst;
}

EvalReport evaluate(const Eigen::MatrixXd& proba, const Dataset& data) {
  if (data.examples.empty()) throw Error("empty-dataset", "cannot evaluate on an empty dataset");
  if (proba.rows() != static_cast<Eigen::Index>(data.examples.size()) || proba.cols() != 2)
    throw argument_error("probability matrix does not match the dataset");
  EvalReport r;
  std::array<std::vector<double>, 2> p_by_z;
  std::array<std::vector<int>, 2> y_by_z;
  std::vector<double> p_all;
  std::vector<int> y_all;
  std::array<double, 4> hits{};
  for (std::size_t i = 0; i < data.examples.size(); ++i) {
    const auto& ex = data.examples[i];
    const double p1 = proba(static_cast<Eigen::Index>(i), 1);
    const auto cell = static_cast<std::size_t>(GroupKey{ex.label, ex.provenance}.index());
    r.cell_counts[cell] += 1;
    hits[cell] += predict(p1) == ex.label ? 1 : 0;
    p_by_z[static_cast<std::size_t>(ex.provenance)].push_back(p1);
    y_by_z[static_cast<std::size_t>(ex.provenance)].push_back(ex.label);
    p_all.push_back(p1);
    y_all.push_back(ex.label);
  }
  std::vector<std::optional<double>> cells;
  for (std::size_t c = 0; c < 4; ++c) {
    if (r.cell_counts[c] > 0) {
      r.cell_accuracy[c] = hits[c] / static_cast<double>(r.cell_counts[c]);
    } else {
      const GroupKey g = GroupKey::from_index(static_cast<int>(c));
      r.flags.push_back("empty-cell-y" + std::to_string(g.y) + "-z" + std::to_string(g.z));
    }
    cells.push_back(r.cell_accuracy[c]);
  }
  r.worst_cell_accuracy = worst_group(cells);

  std::vector<std::optional<double>> prov_acc;
  double present = 0;
  r.macro = ClassMetrics{};
  bool macro_auprc = true;
  double macro_auprc_sum = 0;
  for (std::size_t z = 0; z < 2; ++z) {
    if (y_by_z[z].empty()) {
      r.flags.push_back("empty-provenance-z" + std::to_string(z));
      prov_acc.push_back(std::nullopt);
      continue;
    }
    const ClassMetrics m = class_metrics(p_by_z[z], y_by_z[z], &r.flags, "z" + std::to_string(z) + "-");
    r.provenance[z] = m;
    prov_acc.push_back(m.accuracy);
    present += 1;
    r.macro.count += m.count;
    r.macro.accuracy += m.accuracy;
    r.macro.f1 += m.f1;
    r.macro.ece += m.ece;
    if (m.auprc)
      macro_auprc_sum += *m.auprc;
    else
      macro_auprc = false;
  }
  r.macro.accuracy /= present;
  r.macro.f1 /= present;
  r.macro.ece /= present;
  if (macro_auprc) r.macro.auprc = macro_auprc_sum / present;
  r.micro = class_metrics(p_all, y_all, &r.flags, "micro-");
  r.wga = worst_group(prov_acc);
  for (int z = 0; z < 2; ++z)
    if (prov_acc[static_cast<std::size_t>(z)] && *prov_acc[static_cast<std::size_t>(z)] == r.wga) {
      r.worst_provenance = z;
      break;
    }
  const JointTable joint = empirical_joint(data);
  r.alpha_defined = joint.alpha_defined();
  r.log_alpha = joint.log_alpha();
  if (!r.alpha_defined) r.flags.push_back("alpha-undefined");
  return r;
}

LineFit fit_alpha_line(std::vector<std::pair<double, double>> points) {
  if (points.size() < 3) throw argument_error("line fit needs at least three points");
  std::sort(points.begin(), points.end());
  const double n = static_cast<double>(points.size());
  double sx = 0, sy = 0;
  for (const auto& [x, y] : points) {
    sx += x;
    sy += y;
  }
  const double mx = sx / n, my = sy / n;
  double sxx = 0, sxy = 0, syy = 0;
  for (const auto& [x, y] : points) {
    sxx += (x - mx) * (x - mx);
    sxy += (x - mx) * (y - my);
    syy += (y - my) * (y - my);
  }
  if (!(sxx > 0)) throw Error("rank-deficient", "abscissae are not distinct");
  LineFit f;
  f.slope = sxy / sxx;
  f.intercept = my - f.slope * mx;
  double ss_res = 0;
  for (const auto& [x, y] : points) {
    const double e = y - (f.intercept + f.slope * x);
    ss_res += e * e;
  }
  f.r2 = syy > 0 ? 1.0 - ss_res / syy : 0.0;
  return f;
}

nlohmann::json to_json(const EvalReport& r) {
  nlohmann::json cells = nlohmann::json::object();
  for (int c = 0; c < 4; ++c) {
    const GroupKey g = GroupKey::from_index(c);
    const std::string key = "y" + std::to_string(g.y) + "_z" + std::to_string(g.z);
    cells[key] = {{"count", r.cell_counts[static_cast<std::size_t>(c)]}, {"accuracy", opt_json(r.cell_accuracy[static_cast<std::size_t>(c)])}};
  }
  nlohmann::json prov = nlohmann::json::object();
  for (int z = 0; z < 2; ++z) {
    const auto& m = r.provenance[static_cast<std::size_t>(z)];
    prov["z" + std::to_string(z)] = m ? metrics_json(*m) : nlohmann::json(nullptr);
  }
  return {{"cells", cells},
          {"provenance", prov},
          {"micro", metrics_json(r.micro)},
          {"macro", metrics_json(r.macro)},
          {"wga", r.wga},
          {"worst_provenance", r.worst_provenance},
          {"worst_cell_accuracy", r.worst_cell_accuracy},
          {"log_alpha", r.alpha_defined ? nlohmann::json(r.log_alpha) : nlohmann::json(nullptr)},
          {"log_alpha_base", kLogAlphaBase},
          {"flags", r.flags}};
}

nlohmann::json to_json(const LineFit& f) { return {{"slope", f.slope}, {"intercept", f.intercept}, {"r2", f.r2}}; }

std::vector<std::string> report_columns() {
  std::vector<std::string> cols = {"log_alpha", "n", "wga", "worst_cell_accuracy"};
  for (const char* s : {"micro", "macro", "z0", "z1"})
    for (const char* m : {"accuracy", "f1", "auprc", "ece"}) cols.push_back(std::string(s) + "_" + m);
  for (const char* c : {"y0_z0", "y0_z1", "y1_z0", "y1_z1"}) cols.push_back(std::string("acc_") + c);
  return cols;
}

std::vector<std::string> report_values(const EvalReport& r) {
  std::vector<std::string> v = {r.alpha_defined ? format_double(r.log_alpha) : "", std::to_string(r.micro.count),
                                format_double(r.wga), format_double(r.worst_cell_accuracy)};
  auto push = [&](const std::optional<ClassMetrics>& m) {
    if (!m) {
      for (int k = 0; k < 4; ++k) v.push_back("");
      return;
    }
    v.push_back(format_double(m->accuracy));
    v.push_back(format_double(m->f1));
    v.push_back(fmt(m->auprc));
    v.push_back(format_double(m->ece));
  };
  push(r.micro);
  push(r.macro);
  push(r.provenance[0]);
  push(r.provenance[1]);
  for (const auto& a : r.cell_accuracy) v.push_back(fmt(a));
  return v;
}

}  // namespace provshift
