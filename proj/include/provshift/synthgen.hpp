#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <vector>

#include "provshift/datamodel.hpp"

namespace provshift {

// Anti-causal generator for the graph X <- Z -> Y: Y drives the core
// dimensions, Z drives the spurious dimensions, noise dimensions carry
// nothing. Every feature is mean + N(0, 1).
struct GenConfig {
  std::size_t n = 1000;
  JointTable joint;
  std::size_t d_core = 4;
  std::size_t d_spur = 2;
  std::size_t d_noise = 2;
  double core_strength = 1.0;  // mean separation between y = 0 and y = 1
  double spur_strength = 1.0;  // mean separation between z = 0 and z = 1
  std::size_t subjects = 100;
  std::uint64_t seed = 0;
  std::string name = "synthetic";

  std::size_t dim() const { return d_core + d_spur + d_noise; }
  void validate() const;
};

// The standard-normal draws behind one example, kept so the example can be
// regenerated under an intervention on Z.
struct NoiseRecord {
  std::string example_id;
  std::vector<double> eps;
};

Dataset generate(const GenConfig& config, std::vector<NoiseRecord>* noise = nullptr);

// X(z'): spurious dims recomputed for new_z with the same noise draws; label,
// core and noise dims are copied bit-for-bit. Throws "missing-noise".
Example counterfactual_flip(const Example& example, const GenConfig& config, int new_z,
                            const NoiseRecord* noise);

// Bayes-optimal predictor that reads only the core dimensions (P(Y=1|x_core)
// under the generator with uniform P(Y) unless prior_y1 is given).
std::vector<double> core_only_predict(const Dataset& data, const GenConfig& config, double prior_y1 = 0.5);

// A finite world over binary features, Y and Z, with an explicit joint table.
// Feature bits are split into Y-driven ("core") and Z-driven ("spurious")
// groups; the table index is ((x_bits * 2) + y) * 2 + z.
struct DiscreteWorld {
  std::size_t n_core = 0;
  std::size_t n_spur = 0;
  std::vector<double> table;

  std::size_t n_bits() const { return n_core + n_spur; }
  std::size_t n_x() const { return std::size_t{1} << n_bits(); }
  double prob(std::size_t x, int y, int z) const { return table[(x * 2 + static_cast<std::size_t>(y)) * 2 + static_cast<std::size_t>(z)]; }
  // Spurious bits occupy the high bits of x.
  std::size_t spur_bits(std::size_t x) const { return x >> n_core; }
  std::size_t core_bits(std::size_t x) const { return x & ((std::size_t{1} << n_core) - 1); }
};

struct WorldParams {
  JointTable joint;
  std::vector<std::array<double, 2>> core_p1;  // P(bit=1 | y) per core bit
  std::vector<std::array<double, 2>> spur_p1;  // P(bit=1 | z) per spurious bit
};

DiscreteWorld build_world(const WorldParams& params);
// Random anti-causal world with at most 12 bits in total.
DiscreteWorld random_world(std::size_t n_core, std::size_t n_spur, std::uint64_t seed,
                           std::optional<JointTable> joint = std::nullopt);
WorldParams random_world_params(std::size_t n_core, std::size_t n_spur, std::uint64_t seed,
                                std::optional<JointTable> joint = std::nullopt);

// Max over spurious-bit values x of |P(Y=1|x) - sum_z P(Y=1|z) P(z|x)|,
// all by exact enumeration. Throws "not-Y-invariant" when the spurious bits
// are not independent of Y given Z.
double decomposition_oracle(const DiscreteWorld& world);

// Classification risk E[1{f(X) != Y}] of a deterministic predictor over the
// world's full joint. The predictor maps x (all bits) to a label.
double population_risk(const DiscreteWorld& world, const std::function<int(std::size_t)>& predictor);

}  // namespace provshift
