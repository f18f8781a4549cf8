#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "provshift/datamodel.hpp"

namespace provshift {

struct SplitSpec {
  double log_alpha_train = -0.6;
  double log_alpha_val = -0.6;
  std::vector<double> sweep;  // test log alpha targets
  std::array<double, 2> marginal_y{0.5, 0.5};
  std::array<double, 2> marginal_z{0.5, 0.5};
  std::array<double, 3> ratios{6.0, 2.0, 2.0};  // train : val : test pools
  std::uint64_t seed = 0;

  void validate() const;
};

struct SplitStats {
  std::string split;
  double target_log_alpha = 0.0;
  double achieved_log_alpha = 0.0;  // NaN when undefined
  std::size_t size = 0;
  std::size_t pool_size = 0;
  JointTable target;
  JointTable achieved;
};

struct TestSplit {
  double log_alpha_target = 0.0;
  Dataset data;
};

struct SplitResult {
  Dataset train;
  Dataset val;
  std::vector<TestSplit> tests;
  // One entry per split in the order train, val, tests...
  std::vector<SplitStats> report;

  // Test split whose target is within 1e-9 of log_alpha; nullptr when absent.
  const TestSplit* find_test(double log_alpha) const;
};

// Joint with the requested marginals and log alpha. Throws "infeasible-joint".
JointTable solve_joint(double log_alpha, const std::array<double, 2>& marginal_y,
                       const std::array<double, 2>& marginal_z);

// Largest N with round(N * p[y][z]) <= available[y][z] for every cell.
// Throws "cell-starved" naming a cell with demand but no supply.
long long max_feasible_size(const CellCounts& available, const JointTable& target);

// Per-cell quotas for a split of exactly n examples: round half to even,
// then the total is repaired by adjusting the largest cell (or the next
// largest cell that still has supply).
CellCounts cell_quotas(long long n, const JointTable& target, const CellCounts& available);

// Arithmetic progression with both endpoints. Throws on steps < 2 or lo >= hi.
std::vector<double> sweep_specs(double lo, double hi, int steps);

// Parses "lo:hi:steps".
std::vector<double> parse_sweep(const std::string& text);

SplitResult make_splits(const Dataset& dataset, const SplitSpec& spec);

enum class RebalanceMode { kUp, kDown };

// Equalizes the four (y,z) cells: down truncates to the smallest cell
// without replacement, up keeps every example and tops up to the largest
// cell by drawing with replacement. Duplicates get "~k" suffixed ids.
Dataset rebalance(const Dataset& dataset, RebalanceMode mode, std::uint64_t seed);

// Order-sensitive hash of the example ids, used to check split identity.
std::uint64_t membership_hash(const Dataset& dataset);

}  // namespace provshift
