#include "provshift/datamodel.hpp"

#include <unordered_set>

#include "provshift/error.hpp"

namespace provshift {

namespace {

double compute_log_alpha(const std::array<std::array<double, 2>, 2>& p,
                         const std::array<double, 2>& mz) {
  constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();
  if (mz[0] <= 0.0 || mz[1] <= 0.0) return kNaN;
  const double c1 = p[1][1] / mz[1];
  const double c0 = p[1][0] / mz[0];
  if (!(c1 > 0.0 && c1 < 1.0 && c0 > 0.0 && c0 < 1.0)) return kNaN;
  return std::log10(c1) - std::log10(c0);
}

}  // namespace

JointTable::JointTable(const std::array<std::array<double, 2>, 2>& p) : p_(p) {
  double total = 0.0;
  for (const auto& row : p_) {
    for (double v : row) {
      if (!(v >= 0.0) || !std::isfinite(v)) {
        throw Error("invalid-joint", "joint table entries must be finite and nonnegative");
      }
      total += v;
    }
  }
  if (std::abs(total - 1.0) > 1e-12) {
    throw Error("invalid-joint", "joint table entries must sum to 1, got " + std::to_string(total));
  }
  marginal_y_ = {p_[0][0] + p_[0][1], p_[1][0] + p_[1][1]};
  marginal_z_ = {p_[0][0] + p_[1][0], p_[0][1] + p_[1][1]};
  log_alpha_ = compute_log_alpha(p_, marginal_z_);
}

JointTable JointTable::from_counts(const CellCounts& counts) {
  long long n = 0;
  for (const auto& row : counts) {
    for (long long c : row) n += c;
  }
  if (n <= 0) throw Error("empty-dataset", "cannot estimate a joint from zero examples");
  std::array<std::array<double, 2>, 2> p{};
  for (int y = 0; y < 2; ++y) {
    for (int z = 0; z < 2; ++z) p[y][z] = static_cast<double>(counts[y][z]) / static_cast<double>(n);
  }
  // Rounding can leave the total 1 ulp away from 1; the check tolerates 1e-12.
  return JointTable(p);
}

JointTable JointTable::uniform() { return JointTable(); }

double JointTable::conditional_y1(int z) const {
  if (marginal_z_[z] <= 0.0) return std::numeric_limits<double>::quiet_NaN();
  return p_[1][z] / marginal_z_[z];
}

JointTable JointTable::swap_z() const {
  return JointTable({{{p_[0][1], p_[0][0]}, {p_[1][1], p_[1][0]}}});
}

JointTable JointTable::swap_y() const {
  return JointTable({{{p_[1][0], p_[1][1]}, {p_[0][0], p_[0][1]}}});
}

CellCounts cell_counts(const Dataset& dataset) {
  CellCounts counts{};
  for (const auto& ex : dataset.examples) ++counts[ex.label][ex.provenance];
  return counts;
}

JointTable empirical_joint(const Dataset& dataset) {
  if (dataset.empty()) throw Error("empty-dataset", "dataset '" + dataset.name + "' has no examples");
  return JointTable::from_counts(cell_counts(dataset));
}

double log_alpha_of(const JointTable& joint) {
  if (!joint.alpha_defined()) {
    throw Error("undefined-alpha", "a conditional P(Y=1|Z=z) is 0, 1 or undefined");
  }
  return joint.log_alpha();
}

void validate_dataset(const Dataset& dataset) {
  std::unordered_set<std::string> ids;
  ids.reserve(dataset.size());
  for (std::size_t i = 0; i < dataset.size(); ++i) {
    const Example& ex = dataset.examples[i];
    const std::string where = "example " + std::to_string(i) + " ('" + ex.example_id + "')";
    if (ex.label != 0 && ex.label != 1) throw Error("invalid-dataset", where + ": label must be 0 or 1");
    if (ex.provenance != 0 && ex.provenance != 1) {
      throw Error("invalid-dataset", where + ": provenance must be 0 or 1");
    }
    if (ex.features.size() != dataset.dim) {
      throw Error("invalid-dataset", where + ": expected " + std::to_string(dataset.dim) +
                                         " features, got " + std::to_string(ex.features.size()));
    }
    if (!ids.insert(ex.example_id).second) throw Error("invalid-dataset", where + ": duplicate example_id");
  }
}

}  // namespace provshift
