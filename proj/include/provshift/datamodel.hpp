#pragma once

#include <array>
#include <cmath>
#include <cstddef>
#include <limits>
#include <string>
#include <vector>

namespace provshift {

// log alpha is a base-10 log ratio of P(Y=1|Z=1) to P(Y=1|Z=0). The base is
// recorded in every serialized output under this key.
inline constexpr const char* kLogAlphaBase = "log10";

struct Example {
  std::vector<double> features;
  int label = 0;       // y in {0, 1}
  int provenance = 0;  // z in {0, 1}
  std::string subject_id;
  std::string example_id;

  bool operator==(const Example&) const = default;
};

struct Dataset {
  std::vector<Example> examples;
  std::size_t dim = 0;
  std::string name;

  std::size_t size() const { return examples.size(); }
  bool empty() const { return examples.empty(); }
  bool operator==(const Dataset&) const = default;
};

struct GroupKey {
  int y = 0;
  int z = 0;
  bool operator==(const GroupKey&) const = default;
  // Cells are enumerated as index = 2*y + z.
  int index() const { return 2 * y + z; }
  static GroupKey from_index(int i) { return {i / 2, i % 2}; }
};

using CellCounts = std::array<std::array<long long, 2>, 2>;  // [y][z]

// A 2x2 probability table over (Y, Z) indexed p[y][z].
class JointTable {
 public:
  JointTable() = default;
  // Validates nonnegativity and unit mass; derives marginals and log alpha.
  explicit JointTable(const std::array<std::array<double, 2>, 2>& p);

  static JointTable from_counts(const CellCounts& counts);
  static JointTable uniform();

  double p(int y, int z) const { return p_[y][z]; }
  const std::array<std::array<double, 2>, 2>& cells() const { return p_; }
  const std::array<double, 2>& marginal_y() const { return marginal_y_; }
  const std::array<double, 2>& marginal_z() const { return marginal_z_; }
  // P(Y=1 | Z=z); NaN when P(Z=z) == 0.
  double conditional_y1(int z) const;
  // NaN sentinel when either conditional is 0, 1 or undefined.
  double log_alpha() const { return log_alpha_; }
  bool alpha_defined() const { return std::isfinite(log_alpha_); }

  // Relabelings, used by property tests and for symmetric constructions.
  JointTable swap_z() const;
  JointTable swap_y() const;

 private:
  std::array<std::array<double, 2>, 2> p_{{{0.25, 0.25}, {0.25, 0.25}}};
  std::array<double, 2> marginal_y_{0.5, 0.5};
  std::array<double, 2> marginal_z_{0.5, 0.5};
  double log_alpha_ = 0.0;
};

CellCounts cell_counts(const Dataset& dataset);

// Empirical P(Y, Z). Throws "empty-dataset".
JointTable empirical_joint(const Dataset& dataset);

// log10 P(Y=1|Z=1) - log10 P(Y=1|Z=0). Throws "undefined-alpha".
double log_alpha_of(const JointTable& joint);

// Checks label/provenance range, feature width and example_id uniqueness.
// Throws "invalid-dataset" naming the first offending example.
void validate_dataset(const Dataset& dataset);

}  // namespace provshift
