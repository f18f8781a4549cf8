#include "provshift/sampler.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numeric>
#include <unordered_set>

#include "provshift/error.hpp"
#include "provshift/random.hpp"

namespace provshift {

namespace {

const char* cell_name(int y, int z) {
  static const char* kNames[2][2] = {{"(y=0,z=0)", "(y=0,z=1)"}, {"(y=1,z=0)", "(y=1,z=1)"}};
  return kNames[y][z];
}

bool valid_marginal(const std::array<double, 2>& m) {
  return m[0] >= 0.0 && m[1] >= 0.0 && std::abs(m[0] + m[1] - 1.0) <= 1e-12;
}

// Pool index of a subject: 0 train, 1 val, 2 test.
int pool_of(const std::string& subject, std::uint64_t seed, const std::array<double, 3>& cumulative) {
  const double u = static_cast<double>(splitmix64(derive_seed(seed, "pool") ^ fnv1a64(subject)) >> 11) * 0x1.0p-53;
  if (u < cumulative[0]) return 0;
  if (u < cumulative[1]) return 1;
  return 2;
}

struct Pool {
  std::array<std::array<std::vector<std::size_t>, 2>, 2> cells;  // indices into the dataset

  CellCounts counts() const {
    CellCounts c{};
    for (int y = 0; y < 2; ++y) {
      for (int z = 0; z < 2; ++z) c[y][z] = static_cast<long long>(cells[y][z].size());
    }
    return c;
  }
  std::size_t size() const {
    std::size_t n = 0;
    for (const auto& row : cells) {
      for (const auto& c : row) n += c.size();
    }
    return n;
  }
};

Dataset sample_split(const Dataset& source, const Pool& pool, const JointTable& target, std::uint64_t seed,
                     std::string_view tag, std::uint64_t index, const std::string& name) {
  const CellCounts available = pool.counts();
  const long long n = max_feasible_size(available, target);
  const CellCounts quota = cell_quotas(n, target, available);

  // Largest-deficit-first order; each cell has its own stream so the order
  // only fixes the output layout, not which examples are drawn.
  std::array<int, 4> order{0, 1, 2, 3};
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
    return quota[a / 2][a % 2] > quota[b / 2][b % 2];
  });
  std::vector<std::size_t> chosen;
  chosen.reserve(static_cast<std::size_t>(n));
  for (int cell : order) {
    const int y = cell / 2;
    const int z = cell % 2;
    std::vector<std::size_t> members = pool.cells[y][z];
    Rng rng = make_rng(derive_seed(seed, tag, index), "cell", static_cast<std::uint64_t>(cell));
    std::shuffle(members.begin(), members.end(), rng);
    members.resize(static_cast<std::size_t>(quota[y][z]));
    chosen.insert(chosen.end(), members.begin(), members.end());
  }
  std::sort(chosen.begin(), chosen.end());

  Dataset out;
  out.dim = source.dim;
  out.name = name;
  out.examples.reserve(chosen.size());
  for (std::size_t i : chosen) out.examples.push_back(source.examples[i]);
  return out;
}

SplitStats stats_for(const std::string& name, double target_alpha, const JointTable& target, const Dataset& split,
                     std::size_t pool_size) {
  SplitStats s;
  s.split = name;
  s.target_log_alpha = target_alpha;
  s.target = target;
  s.size = split.size();
  s.pool_size = pool_size;
  if (!split.empty()) {
    s.achieved = empirical_joint(split);
    s.achieved_log_alpha = s.achieved.log_alpha();
  } else {
    s.achieved_log_alpha = std::numeric_limits<double>::quiet_NaN();
  }
  return s;
}

}  // namespace

void SplitSpec::validate() const {
  for (double r : ratios) {
    if (!(r > 0.0) || !std::isfinite(r)) throw argument_error("split ratios must be positive");
  }
  if (sweep.empty()) throw argument_error("sweep must contain at least one test log alpha");
  if (!valid_marginal(marginal_y) || !valid_marginal(marginal_z)) {
    throw argument_error("marginals must be nonnegative and sum to 1");
  }
}

const TestSplit* SplitResult::find_test(double log_alpha) const {
  for (const auto& t : tests) {
    if (std::abs(t.log_alpha_target - log_alpha) <= 1e-9) return &t;
  }
  return nullptr;
}

JointTable solve_joint(double log_alpha, const std::array<double, 2>& marginal_y,
                       const std::array<double, 2>& marginal_z) {
  if (!valid_marginal(marginal_y) || !valid_marginal(marginal_z)) {
    throw argument_error("marginals must be nonnegative and sum to 1");
  }
  if (!std::isfinite(log_alpha) || std::abs(log_alpha) >= 6.0) {
    throw argument_error("|log alpha| must be < 6");
  }
  if (marginal_z[0] <= 0.0 || marginal_z[1] <= 0.0) {
    throw Error("infeasible-joint", "both provenances need positive mass for alpha to be defined");
  }
  const double r = std::pow(10.0, log_alpha);
  // P(Y=1|Z=1) = r * P(Y=1|Z=0) and P(Z=1) c1 + P(Z=0) c0 = P(Y=1).
  const double c0 = marginal_y[1] / (marginal_z[1] * r + marginal_z[0]);
  const double c1 = r * c0;
  if (c0 > 1.0 || c1 > 1.0) {
    throw Error("infeasible-joint", "no joint in [0,1] has log alpha " + std::to_string(log_alpha) +
                                        " with the requested marginals");
  }
  std::array<std::array<double, 2>, 2> p{};
  p[1][1] = c1 * marginal_z[1];
  p[1][0] = c0 * marginal_z[0];
  p[0][1] = (1.0 - c1) * marginal_z[1];
  p[0][0] = (1.0 - c0) * marginal_z[0];
  return JointTable(p);
}

long long max_feasible_size(const CellCounts& available, const JointTable& target) {
  double best = std::numeric_limits<double>::infinity();
  for (int y = 0; y < 2; ++y) {
    for (int z = 0; z < 2; ++z) {
      const double p = target.p(y, z);
      if (p <= 0.0) continue;
      if (available[y][z] <= 0) {
        throw Error("cell-starved", std::string("cell ") + cell_name(y, z) +
                                        " has target mass but no available examples");
      }
      best = std::min(best, static_cast<double>(available[y][z]) / p);
    }
  }
  if (!std::isfinite(best)) return 0;
  long long n = static_cast<long long>(std::floor(best));
  // Guard against floor(c/p)*p rounding just above c.
  while (n > 0) {
    bool ok = true;
    for (int y = 0; y < 2 && ok; ++y) {
      for (int z = 0; z < 2 && ok; ++z) {
        if (std::nearbyint(static_cast<double>(n) * target.p(y, z)) > static_cast<double>(available[y][z])) ok = false;
      }
    }
    if (ok) break;
    --n;
  }
  return n;
}

CellCounts cell_quotas(long long n, const JointTable& target, const CellCounts& available) {
  CellCounts q{};
  long long total = 0;
  for (int y = 0; y < 2; ++y) {
    for (int z = 0; z < 2; ++z) {
      // nearbyint under the default rounding mode is round-half-to-even.
      q[y][z] = std::min<long long>(static_cast<long long>(std::nearbyint(static_cast<double>(n) * target.p(y, z))),
                                    available[y][z]);
      total += q[y][z];
    }
  }
  std::array<int, 4> order{0, 1, 2, 3};
  std::stable_sort(order.begin(), order.end(),
                   [&](int a, int b) { return target.p(a / 2, a % 2) > target.p(b / 2, b % 2); });
  while (total != n) {
    const long long step = total < n ? 1 : -1;
    bool adjusted = false;
    for (int cell : order) {
      auto& slot = q[cell / 2][cell % 2];
      if (target.p(cell / 2, cell % 2) <= 0.0) continue;
      if (step > 0 && slot + 1 > available[cell / 2][cell % 2]) continue;
      if (step < 0 && slot == 0) continue;
      slot += step;
      total += step;
      adjusted = true;
      break;
    }
    if (!adjusted) break;
  }
  return q;
}

std::vector<double> sweep_specs(double lo, double hi, int steps) {
  if (steps < 2) throw argument_error("sweep needs at least 2 steps");
  if (!(lo < hi)) throw argument_error("sweep needs lo < hi");
  std::vector<double> out(static_cast<std::size_t>(steps));
  const double denom = static_cast<double>(steps - 1);
  for (int i = 0; i < steps; ++i) {
    out[static_cast<std::size_t>(i)] = (lo * static_cast<double>(steps - 1 - i) + hi * static_cast<double>(i)) / denom;
  }
  return out;
}

std::vector<double> parse_sweep(const std::string& text) {
  const auto first = text.find(':');
  const auto second = first == std::string::npos ? std::string::npos : text.find(':', first + 1);
  if (second == std::string::npos) throw argument_error("sweep must look like lo:hi:steps, got '" + text + "'");
  try {
    const double lo = std::stod(text.substr(0, first));
    const double hi = std::stod(text.substr(first + 1, second - first - 1));
    std::size_t used = 0;
    const std::string tail = text.substr(second + 1);
    const int steps = std::stoi(tail, &used);
    if (used != tail.size()) throw std::invalid_argument("steps");
    return sweep_specs(lo, hi, steps);
  } catch (const std::logic_error&) {
    throw argument_error("sweep must look like lo:hi:steps, got '" + text + "'");
  }
}

SplitResult make_splits(const Dataset& dataset, const SplitSpec& spec) {
  spec.validate();
  if (dataset.empty()) throw Error("empty-dataset", "cannot split an empty dataset");
  {
    std::unordered_set<std::string> ids;
    ids.reserve(dataset.size());
    for (const auto& ex : dataset.examples) {
      if (ex.subject_id.empty()) throw Error("subject-conflict", "example '" + ex.example_id + "' has no subject id");
      if (!ids.insert(ex.example_id).second) {
        throw Error("subject-conflict", "example id '" + ex.example_id + "' appears more than once");
      }
    }
  }

  const double total = spec.ratios[0] + spec.ratios[1] + spec.ratios[2];
  const std::array<double, 3> cumulative{spec.ratios[0] / total, (spec.ratios[0] + spec.ratios[1]) / total, 1.0};
  std::array<Pool, 3> pools;
  for (std::size_t i = 0; i < dataset.size(); ++i) {
    const Example& ex = dataset.examples[i];
    pools[pool_of(ex.subject_id, spec.seed, cumulative)].cells[ex.label][ex.provenance].push_back(i);
  }

  SplitResult result;
  const JointTable train_target = solve_joint(spec.log_alpha_train, spec.marginal_y, spec.marginal_z);
  const JointTable val_target = solve_joint(spec.log_alpha_val, spec.marginal_y, spec.marginal_z);
  result.train = sample_split(dataset, pools[0], train_target, spec.seed, "train", 0, dataset.name + "-train");
  result.val = sample_split(dataset, pools[1], val_target, spec.seed, "val", 0, dataset.name + "-val");
  result.report.push_back(stats_for("train", spec.log_alpha_train, train_target, result.train, pools[0].size()));
  result.report.push_back(stats_for("val", spec.log_alpha_val, val_target, result.val, pools[1].size()));
  for (std::size_t k = 0; k < spec.sweep.size(); ++k) {
    const double a = spec.sweep[k];
    const JointTable target = solve_joint(a, spec.marginal_y, spec.marginal_z);
    TestSplit t;
    t.log_alpha_target = a;
    // Stream keyed by the target value: results do not depend on sweep order.
    std::uint64_t key = 0;
    std::memcpy(&key, &a, sizeof key);
    t.data = sample_split(dataset, pools[2], target, spec.seed, "test", key,
                          dataset.name + "-test" + std::to_string(k));
    result.report.push_back(stats_for("test" + std::to_string(k), a, target, t.data, pools[2].size()));
    result.tests.push_back(std::move(t));
  }
  return result;
}

Dataset rebalance(const Dataset& dataset, RebalanceMode mode, std::uint64_t seed) {
  std::array<std::vector<std::size_t>, 4> cells;
  for (std::size_t i = 0; i < dataset.size(); ++i) {
    const auto& ex = dataset.examples[i];
    cells[GroupKey{ex.label, ex.provenance}.index()].push_back(i);
  }
  std::size_t lo = dataset.size();
  std::size_t hi = 0;
  for (int c = 0; c < 4; ++c) {
    if (cells[c].empty()) {
      const auto g = GroupKey::from_index(c);
      throw Error("cell-starved", std::string("cell ") + cell_name(g.y, g.z) + " is empty; cannot rebalance");
    }
    lo = std::min(lo, cells[c].size());
    hi = std::max(hi, cells[c].size());
  }

  Dataset out;
  out.dim = dataset.dim;
  out.name = dataset.name + (mode == RebalanceMode::kDown ? "-down" : "-up");
  for (int c = 0; c < 4; ++c) {
    Rng rng = make_rng(seed, mode == RebalanceMode::kDown ? "rebalance-down" : "rebalance-up",
                       static_cast<std::uint64_t>(c));
    auto& members = cells[c];
    if (mode == RebalanceMode::kDown) {
      std::shuffle(members.begin(), members.end(), rng);
      members.resize(lo);
      std::sort(members.begin(), members.end());
      for (std::size_t i : members) out.examples.push_back(dataset.examples[i]);
    } else {
      for (std::size_t i : members) out.examples.push_back(dataset.examples[i]);
      std::vector<int> copies(members.size(), 0);
      std::uniform_int_distribution<std::size_t> pick(0, members.size() - 1);
      for (std::size_t k = members.size(); k < hi; ++k) {
        const std::size_t j = pick(rng);
        Example dup = dataset.examples[members[j]];
        dup.example_id += "~" + std::to_string(++copies[j]);
        out.examples.push_back(std::move(dup));
      }
    }
  }
  return out;
}

std::uint64_t membership_hash(const Dataset& dataset) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const auto& ex : dataset.examples) {
    h = fnv1a64(ex.example_id, h);
    h = fnv1a64("\n", h);
  }
  return h;
}

}  // namespace provshift
