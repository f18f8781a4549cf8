#include "provshift/synthgen.hpp"

#include <cmath>
#include <random>

#include "provshift/error.hpp"
#include "provshift/random.hpp"

namespace provshift {

namespace {

std::string example_name(const GenConfig& config, std::size_t i) {
  std::string digits = std::to_string(i);
  const std::size_t width = std::to_string(config.n > 0 ? config.n - 1 : 0).size();
  if (digits.size() < width) digits.insert(0, width - digits.size(), '0');
  return config.name + "-" + digits;
}

double spur_mean(const GenConfig& config, int z) {
  return (z == 1 ? 0.5 : -0.5) * config.spur_strength;
}

double core_mean(const GenConfig& config, int y) {
  return (y == 1 ? 0.5 : -0.5) * config.core_strength;
}

}  // namespace

void GenConfig::validate() const {
  if (dim() < 1) throw argument_error("generator needs at least one feature dimension");
  if (subjects < 1 || n < subjects) throw argument_error("generator needs n >= subjects >= 1");
  if (!(core_strength >= 0.0 && core_strength <= 5.0)) throw argument_error("core_strength must lie in [0, 5]");
  if (!(spur_strength >= 0.0 && spur_strength <= 5.0)) throw argument_error("spur_strength must lie in [0, 5]");
}

Dataset generate(const GenConfig& config, std::vector<NoiseRecord>* noise) {
  config.validate();
  Rng rng = make_rng(config.seed, "generate");
  std::normal_distribution<double> normal(0.0, 1.0);
  const double pz1 = config.joint.marginal_z()[1];
  const std::array<double, 2> py1{config.joint.conditional_y1(0), config.joint.conditional_y1(1)};

  Dataset ds;
  ds.dim = config.dim();
  ds.name = config.name;
  ds.examples.reserve(config.n);
  if (noise) {
    noise->clear();
    noise->reserve(config.n);
  }
  for (std::size_t i = 0; i < config.n; ++i) {
    Example ex;
    ex.example_id = example_name(config, i);
    ex.subject_id = "subj-" + std::to_string(i % config.subjects);
    ex.provenance = uniform01(rng) < pz1 ? 1 : 0;
    ex.label = uniform01(rng) < py1[ex.provenance] ? 1 : 0;
    NoiseRecord rec;
    rec.example_id = ex.example_id;
    rec.eps.resize(ds.dim);
    for (double& e : rec.eps) e = normal(rng);
    ex.features.resize(ds.dim);
    std::size_t k = 0;
    for (std::size_t j = 0; j < config.d_core; ++j, ++k) ex.features[k] = core_mean(config, ex.label) + rec.eps[k];
    for (std::size_t j = 0; j < config.d_spur; ++j, ++k) ex.features[k] = spur_mean(config, ex.provenance) + rec.eps[k];
    for (std::size_t j = 0; j < config.d_noise; ++j, ++k) ex.features[k] = rec.eps[k];
    ds.examples.push_back(std::move(ex));
    if (noise) noise->push_back(std::move(rec));
  }
  return ds;
}

Example counterfactual_flip(const Example& example, const GenConfig& config, int new_z, const NoiseRecord* noise) {
  if (noise == nullptr || noise->eps.size() != config.dim() || noise->example_id != example.example_id) {
    throw Error("missing-noise", "no noise record for example '" + example.example_id + "'");
  }
  Example out = example;
  out.provenance = new_z;
  for (std::size_t j = 0; j < config.d_spur; ++j) {
    const std::size_t k = config.d_core + j;
    out.features[k] = spur_mean(config, new_z) + noise->eps[k];
  }
  return out;
}

std::vector<double> core_only_predict(const Dataset& data, const GenConfig& config, double prior_y1) {
  // Log-likelihood ratio of y=1 vs y=0 for unit-variance Gaussians with
  // means +-s/2 is s * x per core dimension.
  const double prior_logit = std::log(prior_y1) - std::log1p(-prior_y1);
  std::vector<double> out;
  out.reserve(data.size());
  for (const auto& ex : data.examples) {
    double logit = prior_logit;
    for (std::size_t j = 0; j < config.d_core; ++j) logit += config.core_strength * ex.features[j];
    out.push_back(1.0 / (1.0 + std::exp(-logit)));
  }
  return out;
}

DiscreteWorld build_world(const WorldParams& params) {
  DiscreteWorld w;
  w.n_core = params.core_p1.size();
  w.n_spur = params.spur_p1.size();
  if (w.n_bits() > 12) throw argument_error("discrete worlds are limited to 12 binary dims");
  w.table.assign(w.n_x() * 4, 0.0);
  for (std::size_t x = 0; x < w.n_x(); ++x) {
    for (int y = 0; y < 2; ++y) {
      for (int z = 0; z < 2; ++z) {
        double p = params.joint.p(y, z);
        for (std::size_t b = 0; b < w.n_core; ++b) {
          const double p1 = params.core_p1[b][y];
          p *= ((x >> b) & 1U) ? p1 : 1.0 - p1;
        }
        for (std::size_t b = 0; b < w.n_spur; ++b) {
          const double p1 = params.spur_p1[b][z];
          p *= ((x >> (w.n_core + b)) & 1U) ? p1 : 1.0 - p1;
        }
        w.table[(x * 2 + static_cast<std::size_t>(y)) * 2 + static_cast<std::size_t>(z)] = p;
      }
    }
  }
  return w;
}

WorldParams random_world_params(std::size_t n_core, std::size_t n_spur, std::uint64_t seed,
                                std::optional<JointTable> joint) {
  Rng rng = make_rng(seed, "discrete-world");
  auto prob = [&] { return 0.05 + 0.9 * uniform01(rng); };
  WorldParams params;
  if (joint) {
    params.joint = *joint;
  } else {
    std::array<std::array<double, 2>, 2> p{};
    double total = 0.0;
    for (auto& row : p) {
      for (double& v : row) {
        v = prob();
        total += v;
      }
    }
    for (auto& row : p) {
      for (double& v : row) v /= total;
    }
    const double drift = 1.0 - (p[0][0] + p[0][1] + p[1][0] + p[1][1]);
    p[0][0] += drift;
    params.joint = JointTable(p);
  }
  params.core_p1.resize(n_core);
  for (auto& c : params.core_p1) c = {prob(), prob()};
  params.spur_p1.resize(n_spur);
  for (auto& s : params.spur_p1) s = {prob(), prob()};
  return params;
}

DiscreteWorld random_world(std::size_t n_core, std::size_t n_spur, std::uint64_t seed,
                           std::optional<JointTable> joint) {
  return build_world(random_world_params(n_core, n_spur, seed, joint));
}

double decomposition_oracle(const DiscreteWorld& world) {
  const std::size_t n_s = std::size_t{1} << world.n_spur;
  // Marginalize onto (x_spur, y, z).
  std::vector<double> m(n_s * 4, 0.0);
  for (std::size_t x = 0; x < world.n_x(); ++x) {
    const std::size_t s = world.spur_bits(x);
    for (int y = 0; y < 2; ++y) {
      for (int z = 0; z < 2; ++z) m[(s * 2 + static_cast<std::size_t>(y)) * 2 + static_cast<std::size_t>(z)] += world.prob(x, y, z);
    }
  }
  auto at = [&](std::size_t s, int y, int z) { return m[(s * 2 + static_cast<std::size_t>(y)) * 2 + static_cast<std::size_t>(z)]; };

  std::array<std::array<double, 2>, 2> yz{};
  for (std::size_t s = 0; s < n_s; ++s) {
    for (int y = 0; y < 2; ++y) {
      for (int z = 0; z < 2; ++z) yz[y][z] += at(s, y, z);
    }
  }
  const std::array<double, 2> pz{yz[0][0] + yz[1][0], yz[0][1] + yz[1][1]};
  const std::array<double, 2> py1_given_z{yz[1][0] / pz[0], yz[1][1] / pz[1]};

  // Precondition: P(x_s, y | z) = P(x_s | z) P(y | z).
  for (std::size_t s = 0; s < n_s; ++s) {
    for (int z = 0; z < 2; ++z) {
      const double ps_given_z = (at(s, 0, z) + at(s, 1, z)) / pz[z];
      for (int y = 0; y < 2; ++y) {
        const double lhs = at(s, y, z) / pz[z];
        const double rhs = ps_given_z * (yz[y][z] / pz[z]);
        if (std::abs(lhs - rhs) > 1e-12) {
          throw Error("not-Y-invariant", "spurious bits depend on Y given Z (residual " + std::to_string(lhs - rhs) + ")");
        }
      }
    }
  }

  double worst = 0.0;
  for (std::size_t s = 0; s < n_s; ++s) {
    const double ps = at(s, 0, 0) + at(s, 0, 1) + at(s, 1, 0) + at(s, 1, 1);
    if (ps <= 0.0) continue;
    const double lhs = (at(s, 1, 0) + at(s, 1, 1)) / ps;
    double rhs = 0.0;
    for (int z = 0; z < 2; ++z) {
      const double pz_given_s = (at(s, 0, z) + at(s, 1, z)) / ps;
      rhs += py1_given_z[z] * pz_given_s;
    }
    worst = std::max(worst, std::abs(lhs - rhs));
  }
  return worst;
}

double population_risk(const DiscreteWorld& world, const std::function<int(std::size_t)>& predictor) {
  double risk = 0.0;
  for (std::size_t x = 0; x < world.n_x(); ++x) {
    const int pred = predictor(x);
    for (int z = 0; z < 2; ++z) risk += world.prob(x, 1 - pred, z);
  }
  return risk;
}

}  // namespace provshift
