#include <gtest/gtest.h>

#include <cmath>

#include "provshift/metrics.hpp"
#include "provshift/sampler.hpp"
#include "provshift/synthgen.hpp"
#include "test_util.hpp"

using namespace provshift;

namespace {

double correlation(const std::vector<double>& a, const std::vector<double>& b) {
  const double n = static_cast<double>(a.size());
  double ma = 0, mb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) ma += a[i] / n, mb += b[i] / n;
  double sab = 0, saa = 0, sbb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    sab += (a[i] - ma) * (b[i] - mb);
    saa += (a[i] - ma) * (a[i] - ma);
    sbb += (b[i] - mb) * (b[i] - mb);
  }
  return sab / std::sqrt(saa * sbb);
}

GenConfig base_config(std::size_t n) {
  GenConfig g;
  g.n = n;
  g.subjects = n;
  g.joint = JointTable::uniform();
  return g;
}

double accuracy_of(const std::vector<double>& p1, const Dataset& d) {
  double hits = 0;
  for (std::size_t i = 0; i < d.size(); ++i) hits += ((p1[i] >= 0.5) == (d.examples[i].label == 1));
  return hits / static_cast<double>(d.size());
}

}  // namespace

TEST(Generate, NoSpuriousSignalMeansNoCorrelation) {
  GenConfig g = base_config(10000);
  g.spur_strength = 0;
  g.joint = solve_joint(-0.6, {0.5, 0.5}, {0.5, 0.5});
  const Dataset d = generate(g);
  std::vector<double> z;
  for (const auto& e : d.examples) z.push_back(e.provenance);
  for (std::size_t k = 0; k < g.d_spur; ++k) {
    std::vector<double> f;
    for (const auto& e : d.examples) f.push_back(e.features[g.d_core + k]);
    EXPECT_LT(std::abs(correlation(f, z)), 0.05);
  }
}

TEST(Generate, NoInformationCapsAccuracyAtPrior) {
  GenConfig g = base_config(10000);
  g.core_strength = 0;
  g.spur_strength = 0;
  const Dataset d = generate(g);
  // Best possible rule knows nothing about y beyond the prior.
  const double prior = static_cast<double>(cell_counts(d)[1][0] + cell_counts(d)[1][1]) / static_cast<double>(d.size());
  EXPECT_NEAR(accuracy_of(core_only_predict(d, g), d), std::max(prior, 1 - prior), 0.03);
  // Even a rule reading every feature's sign cannot do better.
  std::vector<double> p1;
  for (const auto& e : d.examples) p1.push_back(e.features[0] + e.features[g.d_core] > 0 ? 1.0 : 0.0);
  EXPECT_NEAR(accuracy_of(p1, d), 0.5, 0.03);
}

TEST(Generate, TargetAlphaReached) {
  GenConfig g = base_config(10000);
  g.joint = solve_joint(-0.6, {0.5, 0.5}, {0.5, 0.5});
  EXPECT_NEAR(log_alpha_of(empirical_joint(generate(g))), -0.6, 0.05);
}

TEST(Generate, DeterministicPerSeedAndShaped) {
  GenConfig g = base_config(500);
  g.subjects = 50;
  const Dataset a = generate(g), b = generate(g);
  EXPECT_EQ(a, b);
  EXPECT_EQ(a.dim, g.dim());
  g.seed = 1;
  EXPECT_NE(generate(g), a);
  std::set<std::string> subjects;
  for (const auto& e : a.examples) subjects.insert(e.subject_id);
  EXPECT_EQ(subjects.size(), 50u);
}

TEST(Generate, InvalidConfigRejected) {
  GenConfig g = base_config(10);
  g.subjects = 11;
  EXPECT_THROW(generate(g), Error);
  g = base_config(10);
  g.d_core = g.d_spur = g.d_noise = 0;
  EXPECT_THROW(generate(g), Error);
  g = base_config(10);
  g.spur_strength = 6;
  EXPECT_THROW(generate(g), Error);
}

TEST(Decomposition, ResidualTinyOnRandomWorlds) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const std::size_t n_core = seed % 5, n_spur = 1 + seed % 4;
    EXPECT_LE(decomposition_oracle(random_world(n_core, n_spur, seed)), 1e-12);
  }
}

TEST(Decomposition, IndependentConfounderGivesConstantPosterior) {
  const DiscreteWorld w = random_world(2, 3, 9, JointTable::uniform());
  EXPECT_LE(decomposition_oracle(w), 1e-12);
  const std::size_t n_s = std::size_t{1} << w.n_spur;
  for (std::size_t s = 0; s < n_s; ++s) {
    double py1 = 0, px = 0;
    for (std::size_t x = 0; x < w.n_x(); ++x) {
      if (w.spur_bits(x) != s) continue;
      for (int z = 0; z < 2; ++z) {
        py1 += w.prob(x, 1, z);
        px += w.prob(x, 0, z) + w.prob(x, 1, z);
      }
    }
    EXPECT_NEAR(py1 / px, 0.5, 1e-12);
  }
}

TEST(Decomposition, ViolationDetected) {
  DiscreteWorld w;
  w.n_core = 0;
  w.n_spur = 1;
  // Spurious bit tracks y, not z.
  w.table = {0.2, 0.2, 0.05, 0.05, 0.05, 0.05, 0.2, 0.2};
  EXPECT_ERROR_CODE(decomposition_oracle(w), "not-Y-invariant");
}

TEST(Counterfactual, IdentityAndNoMechanism) {
  GenConfig g = base_config(200);
  std::vector<NoiseRecord> noise;
  const Dataset d = generate(g, &noise);
  for (std::size_t i = 0; i < d.size(); ++i) {
    const Example& e = d.examples[i];
    EXPECT_EQ(counterfactual_flip(e, g, e.provenance, &noise[i]), e);
  }
  g.spur_strength = 0;
  noise.clear();
  const Dataset d0 = generate(g, &noise);
  for (std::size_t i = 0; i < d0.size(); ++i) {
    const Example f = counterfactual_flip(d0.examples[i], g, 1 - d0.examples[i].provenance, &noise[i]);
    EXPECT_EQ(f.features, d0.examples[i].features);
    EXPECT_EQ(f.provenance, 1 - d0.examples[i].provenance);
  }
  EXPECT_ERROR_CODE(counterfactual_flip(d.examples[0], g, 1, nullptr), "missing-noise");
}

TEST(Counterfactual, OnlySpuriousDimsChangeAndCoreOnlyIsInvariant) {
  GenConfig g = base_config(1000);
  g.spur_strength = 3;
  std::vector<NoiseRecord> noise;
  const Dataset d = generate(g, &noise);
  Dataset flipped = d;
  for (std::size_t i = 0; i < d.size(); ++i) {
    flipped.examples[i] = counterfactual_flip(d.examples[i], g, 1 - d.examples[i].provenance, &noise[i]);
    const auto& a = d.examples[i].features;
    const auto& b = flipped.examples[i].features;
    EXPECT_EQ(flipped.examples[i].label, d.examples[i].label);
    for (std::size_t k = 0; k < g.dim(); ++k) {
      const bool spurious = k >= g.d_core && k < g.d_core + g.d_spur;
      if (!spurious) EXPECT_EQ(std::memcmp(&a[k], &b[k], sizeof(double)), 0);
    }
  }
  EXPECT_EQ(core_only_predict(d, g), core_only_predict(flipped, g));
}

TEST(CoreOnly, FlatAcrossSweep) {
  GenConfig g = base_config(20000);
  g.d_core = 12;
  g.d_noise = 4;
  g.core_strength = 0.5;
  g.spur_strength = 3;
  const Dataset d = generate(g);
  SplitSpec spec;
  spec.sweep = sweep_specs(-1, 1, 11);
  const SplitResult r = make_splits(d, spec);
  double lo = 1, hi = 0;
  for (const auto& t : r.tests) {
    const double acc = accuracy_of(core_only_predict(t.data, g), t.data);
    lo = std::min(lo, acc);
    hi = std::max(hi, acc);
  }
  EXPECT_LE(hi - lo, 0.02);
}
