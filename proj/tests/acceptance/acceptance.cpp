// End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
// exits nonzero when any criterion fails.
//
//   acceptance [demo-config] [work-dir]

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "gradcheck.hpp"
#include "provshift/algorithms.hpp"
#include "provshift/harness.hpp"
#include "provshift/hparams.hpp"
#include "provshift/metrics.hpp"
#include "provshift/random.hpp"
#include "provshift/sampler.hpp"
#include "provshift/synthgen.hpp"

using namespace provshift;
namespace fs = std::filesystem;

#ifndef PROVSHIFT_DEMO_CONFIG
#define PROVSHIFT_DEMO_CONFIG "configs/demo.json"
#endif

namespace {

struct Outcome {
  bool ok = true;
  std::string detail;
};

class Detail {
 public:
  template <class T>
  Detail& operator<<(const T& v) {
    s_ << v;
    return *this;
  }
  std::string str() const { return s_.str(); }

 private:
  std::ostringstream s_;
};

std::string fmt(double v, int digits = 4) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

int failures = 0;

void run(int id, const std::string& name, double limit_s, const std::function<Outcome()>& body) {
  const auto t0 = std::chrono::steady_clock::now();
  Outcome o;
  try {
    o = body();
  } catch (const std::exception& e) {
    o = {false, std::string("exception: ") + e.what()};
  }
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  const bool in_time = limit_s <= 0 || secs <= limit_s;
  const bool pass = o.ok && in_time;
  if (!pass) ++failures;
  std::printf("%s criterion %d (%s): %s | %.1fs", pass ? "PASS" : "FAIL", id, name.c_str(), o.detail.c_str(), secs);
  if (limit_s > 0) std::printf(" (limit %.0fs%s)", limit_s, in_time ? "" : ", exceeded");
  std::printf("\n");
  std::fflush(stdout);
}

bool near(double a, double b, double tol = 1e-9) { return std::abs(a - b) <= tol; }

// ---- criterion 1 ----

Outcome alpha_fidelity() {
  GenConfig g;
  g.n = 20000;
  g.subjects = 20000;
  g.joint = JointTable::uniform();
  g.seed = 11;
  const Dataset data = generate(g);
  const std::vector<double> targets = {-1.0, -0.6, 0.0, 0.6, 1.0};
  Outcome o;
  double worst_alpha = 0, worst_marginal = 0;
  int checked = 0;
  for (double t : targets) {
    SplitSpec spec;
    spec.log_alpha_train = t;
    spec.log_alpha_val = t;
    spec.sweep = targets;
    spec.seed = 3;
    const SplitResult r = make_splits(data, spec);
    for (const auto& s : r.report) {
      if (s.size < 400) continue;
      ++checked;
      const double da = std::isfinite(s.achieved_log_alpha) ? std::abs(s.achieved_log_alpha - s.target_log_alpha) : 1e9;
      double dm = 0;
      for (int k = 0; k < 2; ++k)
        dm = std::max({dm, std::abs(s.achieved.marginal_y()[k] - 0.5), std::abs(s.achieved.marginal_z()[k] - 0.5)});
      worst_alpha = std::max(worst_alpha, da);
      worst_marginal = std::max(worst_marginal, dm);
    }
  }
  // At log alpha = -0.6 with uniform marginals P(Y=1|Z=1) : P(Y=1|Z=0) is 1:4.
  const JointTable j = solve_joint(-0.6, {0.5, 0.5}, {0.5, 0.5});
  const double ratio = j.conditional_y1(1) / j.conditional_y1(0);
  o.ok = checked > 0 && worst_alpha <= 0.05 && worst_marginal <= 0.03 && std::abs(ratio - 0.25) <= 0.005 &&
         near(log_alpha_of(j), -0.6, 1e-12);
  o.detail = (Detail() << checked << " splits, max |alpha err| " << fmt(worst_alpha) << ", max marginal err "
                       << fmt(worst_marginal) << ", P(Y=1|Z=1)/P(Y=1|Z=0) at -0.6 = " << fmt(ratio))
                 .str();
  return o;
}

// ---- criterion 2 ----

Outcome decomposition() {
  double worst = 0;
  for (std::uint64_t w = 0; w < 50; ++w) {
    Rng rng = make_rng(w, "acceptance-world");
    const std::size_t n_core = 1 + rng() % 6;
    const std::size_t n_spur = 1 + rng() % (12 - n_core);
    worst = std::max(worst, decomposition_oracle(random_world(n_core, n_spur, w)));
  }
  return {worst <= 1e-12, (Detail() << "50 worlds, max residual " << worst).str()};
}

// ---- criteria 3 and 4 ----

struct CoreOnlyRun {
  std::uint64_t seed = 0;
  double spread = 0, slope = 0, id_wga = 0, ood_wga = 0;
  std::size_t min_test = 0;
  ModelPredictor model;
  std::vector<TestSplit> sweep;
};

std::vector<CoreOnlyRun> generalization_runs;

Outcome generalization_gap(const ExperimentConfig& cfg) {
  const GenConfig& base = *cfg.data.synthetic;
  Outcome o;
  if (!near(base.core_strength, 0.5) || !near(base.spur_strength, 3.0) || !near(cfg.spec.log_alpha_train, -0.6) ||
      cfg.spec.sweep.size() != 11) {
    return {false, "demo config is not the core 0.5 / spur 3 / train -0.6 / 11-point sweep world"};
  }
  double max_spread = 0, max_slope = 0, min_gap = 1;
  std::size_t min_test = SIZE_MAX;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    GenConfig g = base;
    g.seed = seed;
    const Dataset data = generate(g);
    SplitSpec spec = cfg.spec;
    spec.seed = seed;
    const SplitResult splits = make_splits(data, spec);
    CoreOnlyRun run;
    run.seed = seed;
    double lo = 1, hi = 0;
    std::vector<std::pair<double, double>> pts;
    for (const auto& t : splits.tests) {
      const auto p = core_only_predict(t.data, g);
      double hits = 0;
      for (std::size_t i = 0; i < p.size(); ++i) hits += ((p[i] > 0.5) == (t.data.examples[i].label == 1));
      const double acc = hits / static_cast<double>(p.size());
      lo = std::min(lo, acc);
      hi = std::max(hi, acc);
      pts.emplace_back(t.log_alpha_target, acc);
      min_test = std::min(min_test, t.data.size());
    }
    run.spread = hi - lo;
    run.slope = fit_alpha_line(pts).slope;
    TrialOptions opt = cfg.options;
    TrialRecord erm = run_trial(AlgorithmKind::kERM, {}, splits, seed, opt);
    if (!erm.ok() || !erm.model) return {false, "ERM failed at seed " + std::to_string(seed) + ": " + erm.error};
    for (const auto& sp : erm.sweep) {
      if (near(sp.log_alpha_target, -0.6)) run.id_wga = sp.report.wga;
      if (near(sp.log_alpha_target, 0.6)) run.ood_wga = sp.report.wga;
    }
    run.model = *erm.model;
    run.sweep = splits.tests;
    max_spread = std::max(max_spread, run.spread);
    max_slope = std::max(max_slope, std::abs(run.slope));
    min_gap = std::min(min_gap, run.id_wga - run.ood_wga);
    generalization_runs.push_back(std::move(run));
  }
  o.ok = max_spread <= 0.02 && max_slope <= 0.03 && min_gap >= 0.15;
  o.detail = (Detail() << "5 seeds, test splits >= " << min_test << " examples; core-only max spread " << fmt(max_spread)
                       << ", max |slope| " << fmt(max_slope) << "; ERM min ID-OOD WGA gap " << fmt(min_gap))
                 .str();
  return o;
}

Outcome alpha_line() {
  if (generalization_runs.size() != 5) return {false, "criterion-3 models unavailable"};
  double min_r2 = 1;
  std::string slopes;
  for (const auto& run : generalization_runs) {
    const StressResult s = stress_test(run.model, run.sweep);
    min_r2 = std::min(min_r2, s.fit.r2);
    slopes += (slopes.empty() ? "" : " ") + fmt(s.fit.r2, 3);
  }
  return {min_r2 >= 0.8, "R2 per seed: " + slopes};
}

// ---- criterion 5 ----

Batch random_batch(std::size_t n, std::size_t d, Rng& rng, bool weighted) {
  Batch b;
  b.x = MatrixXd(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(d));
  for (Eigen::Index i = 0; i < b.x.size(); ++i) b.x(i) = 2 * uniform01(rng) - 1;
  for (std::size_t i = 0; i < n; ++i) {
    b.y.push_back(static_cast<int>(rng() % 2));
    b.z.push_back(static_cast<int>(i % 2));
    b.source.push_back(static_cast<long>(i));
  }
  b.targets = one_hot(b.y);
  b.weights = VectorXd::Ones(static_cast<Eigen::Index>(n));
  if (weighted)
    for (Eigen::Index i = 0; i < b.weights.size(); ++i) b.weights(i) = 0.1 + uniform01(rng);
  return b;
}

Outcome gradients() {
  std::size_t checked = 0, failed_entries = 0;
  int failed_configs = 0;
  double worst = 0;
  for (int cfg = 0; cfg < 20; ++cfg) {
    Rng rng = make_rng(static_cast<std::uint64_t>(cfg), "acceptance-gradcheck");
    const std::size_t d = 1 + rng() % 6, h = 1 + rng() % 8, n = 2 + rng() % 10;
    const Activation act = cfg % 3 == 0 ? Activation::kTanh : cfg % 3 == 1 ? Activation::kRelu : Activation::kLinear;
    const LossKind kind = cfg % 4 == 3 ? LossKind::gce(0.3 + 0.1 * (cfg % 5)) : LossKind::ce();
    ModelState m = ModelState::create(d, h, act, rng);
    const Batch b = random_batch(n, d, rng, cfg % 2 == 0);
    const LossAndGrad lg = loss_and_grad(m, b, kind);
    const auto res = provshift::testing::check_gradients(m.params, lg.grads, [&](const ParameterSet& p) {
      ModelState s = m;
      s.params = p;
      return loss_and_grad(s, b, kind).loss;
    });
    checked += res.checked;
    failed_entries += res.failures;
    failed_configs += res.failures > 0;
    worst = std::max(worst, res.max_rel_error);
  }
  return {failed_configs == 0, (Detail() << "20 configs, " << checked << " entries, " << failed_entries
                                         << " outside tolerance, max rel err " << worst)
                                   .str()};
}

// ---- criterion 6 ----

Outcome degenerate_equivalence() {
  GenConfig g;
  g.n = 1500;
  g.subjects = 1500;
  g.core_strength = 0.5;
  g.spur_strength = 3;
  g.joint = solve_joint(-0.6, {0.5, 0.5}, {0.5, 0.5});
  const auto data = std::make_shared<const Dataset>(generate(g));
  TrainSettings s;
  s.hidden = 16;
  s.per_provenance = 16;
  s.steps = 100;
  auto trajectory = [&](AlgorithmKind kind, const HParams& hp) {
    TrainContext ctx = make_context(kind, hp, data, s, 7);
    std::vector<ParameterSet> out;
    for (int i = 0; i < 100; ++i) {
      train_step(ctx, next_batch(ctx));
      out.push_back(ctx.model.params);
    }
    return out;
  };
  const auto erm = trajectory(AlgorithmKind::kERM, {});
  const std::vector<std::pair<AlgorithmKind, HParams>> cases = {
      {AlgorithmKind::kDANN, {{"lambda", 0.0}, {"beta1", 0.9}}},
      {AlgorithmKind::kCDANN, {{"lambda", 0.0}, {"beta1", 0.9}}},
      {AlgorithmKind::kIRM, {{"lambda", 0.0}, {"anneal_iters", 0.0}}},
      {AlgorithmKind::kCORAL, {{"gamma", 0.0}}},
      {AlgorithmKind::kMMD, {{"gamma", 0.0}}},
      {AlgorithmKind::kGroupDRO, {{"eta", 0.0}}},
  };
  Outcome o;
  std::string names;
  for (const auto& [kind, hp] : cases) {
    const auto run = trajectory(kind, hp);
    bool same = run.size() == erm.size();
    for (std::size_t i = 0; same && i < run.size(); ++i) same = run[i] == erm[i];
    names += std::string(names.empty() ? "" : ", ") + to_string(kind) + (same ? "" : " (differs)");
    o.ok = o.ok && same;
  }
  o.detail = "100 steps bit-exact vs ERM: " + names;
  return o;
}

// ---- criteria 7, 8, 10 ----

struct DemoRun {
  bool done = false;
  ExperimentConfig cfg;
  fs::path dir;
  BenchmarkResult result;
};

DemoRun demo;

std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

double mean_ood(const SeedSummary& s, double ood) {
  for (std::size_t i = 0; i < s.sweep_alphas.size(); ++i)
    if (near(s.sweep_alphas[i], ood)) return s.wga_by_alpha[i].mean;
  throw Error("missing-target", "OOD target absent from the sweep", ErrorCategory::kUsage);
}

Outcome rebalancing(const fs::path& work) {
  demo.dir = work / "demo";
  fs::remove_all(demo.dir);
  demo.result = run_benchmark(demo.cfg, demo.dir);
  demo.done = true;
  std::map<AlgorithmKind, double> ood;
  for (const auto& s : demo.result.summaries) ood[s.kind] = mean_ood(s, demo.cfg.options.trace.ood_log_alpha);
  if (!ood.count(AlgorithmKind::kERM) || !ood.count(AlgorithmKind::kUpSampling) || !ood.count(AlgorithmKind::kDownSampling))
    return {false, "demo config lacks ERM, UpSampling or DownSampling"};
  const double erm = ood[AlgorithmKind::kERM], up = ood[AlgorithmKind::kUpSampling], down = ood[AlgorithmKind::kDownSampling];
  return {up - erm >= 0.05 && down - erm >= 0.05,
          (Detail() << "mean OOD WGA over " << demo.cfg.seeds << " seeds: ERM " << fmt(erm) << ", UpSampling " << fmt(up)
                    << " (+" << fmt(up - erm) << "), DownSampling " << fmt(down) << " (+" << fmt(down - erm) << ")")
              .str()};
}

Outcome protocol() {
  if (!demo.done) return {false, "benchmark run unavailable"};
  std::vector<std::string> problems;
  auto problem = [&](const std::string& p) {
    if (problems.size() < 5) problems.push_back(p);
  };

  const PatienceOutcome hand = apply_patience({0.5, 0.6, 0.6, 0.6, 0.6}, 3);
  if (hand.selected != 1 || hand.stop_after != 5 || !hand.stopped) problem("hand patience trace");

  const Budget& budget = demo.cfg.options.budget;
  if (budget.checkpoints != 10 || budget.patience != 3 || demo.cfg.trials != 16) problem("demo budget is not 16/10/3");

  std::size_t checked = 0, stopped = 0;
  auto check_trial = [&](const TrialRecord& t, const std::string& where) {
    if (!t.ok()) return problem(where + " failed: " + t.error);
    ++checked;
    const long planned = is_two_stage(t.kind) ? 2 * budget.steps : budget.steps;
    if (t.planned_steps != planned) problem(where + " planned " + std::to_string(t.planned_steps));
    const auto steps = checkpoint_steps(t.planned_steps, budget.checkpoints);
    if (steps.size() != 10) problem(where + " checkpoint count");
    std::vector<double> vals;
    for (std::size_t i = 0; i < t.trace.size(); ++i) {
      vals.push_back(t.trace[i].val.wga);
      if (i >= steps.size() || t.trace[i].step != steps[i]) problem(where + " checkpoint step");
    }
    if (!is_two_stage(t.kind)) {
      const PatienceOutcome p = apply_patience(vals, budget.patience);
      if (p.selected != t.selected) problem(where + " selection");
      if (p.stopped != t.early_stopped || (p.stopped && static_cast<int>(t.trace.size()) != p.stop_after) ||
          (!p.stopped && t.trace.size() != steps.size()))
        problem(where + " early stopping");
    } else {
      // Two-stage replay: the counter restarts when the stage changes and
      // stopping is only allowed in the second stage.
      double best = -1;
      int bad = 0, stage = 1;
      std::size_t stop_after = t.trace.size();
      bool stops = false;
      for (std::size_t i = 0; i < t.trace.size(); ++i) {
        if (t.trace[i].stage != stage) {
          stage = t.trace[i].stage;
          bad = 0;
        }
        if (vals[i] > best) {
          best = vals[i];
          bad = 0;
        } else {
          ++bad;
        }
        if (stage == 2 && bad >= budget.patience) {
          stop_after = i + 1;
          stops = true;
          break;
        }
      }
      if (stops != t.early_stopped || stop_after != t.trace.size() || (!stops && t.trace.size() != steps.size()))
        problem(where + " early stopping");
      if (t.stage_switches != 1 && t.trace.size() == steps.size()) problem(where + " stage switches");
    }
    const auto argmax = std::max_element(vals.begin(), vals.end()) - vals.begin();
    if (argmax != t.selected) problem(where + " not the validation argmax");
    stopped += t.early_stopped;
  };

  std::map<std::uint64_t, std::pair<std::uint64_t, std::uint64_t>> hashes;
  for (std::size_t a = 0; a < demo.result.searches.size(); ++a) {
    const std::string name = to_string(demo.result.summaries[a].kind);
    const auto& trials = demo.result.searches[a].trials;
    if (trials.size() != 16) problem(name + " has " + std::to_string(trials.size()) + " search trials");
    for (std::size_t i = 0; i < trials.size(); ++i) {
      char file[128];
      std::snprintf(file, sizeof file, "trials/%s_search_%02zu.json", name.c_str(), i);
      if (!fs::exists(demo.dir / file)) problem(std::string("missing ") + file);
      check_trial(trials[i], name + " search " + std::to_string(i));
    }
    for (const auto& t : demo.result.summaries[a].trials) {
      check_trial(t, name + " seed " + std::to_string(t.seed));
      auto [it, fresh] = hashes.emplace(t.seed, std::make_pair(t.train_hash, t.val_hash));
      if (!fresh && it->second != std::make_pair(t.train_hash, t.val_hash)) problem(name + " split hash at seed " + std::to_string(t.seed));
    }
  }
  if (demo.result.split_hashes.size() != static_cast<std::size_t>(demo.cfg.seeds)) problem("split hash count");

  std::string detail = (Detail() << demo.result.searches.size() << " algorithms x 16 trials, " << checked
                                 << " trials checked (" << stopped << " early-stopped), split hashes equal across algorithms")
                           .str();
  for (const auto& p : problems) detail += "; " + p;
  return {problems.empty(), detail};
}

Outcome determinism(const fs::path& work) {
  if (!demo.done) return {false, "benchmark run unavailable"};
  const ExperimentConfig again = load_experiment(demo.dir / "MANIFEST.json");
  const fs::path dir = work / "demo-rerun";
  fs::remove_all(dir);
  run_benchmark(again, dir);
  const std::string a = read_file(demo.dir / "summary.csv"), b = read_file(dir / "summary.csv");
  return {!a.empty() && a == b, (Detail() << "summary.csv " << a.size() << " bytes, rerun from MANIFEST.json "
                                          << (a == b ? "byte-identical" : "differs"))
                                    .str()};
}

// ---- criterion 9 ----

Outcome metric_hand_values() {
  std::vector<std::string> bad;
  const auto ap = auprc({0.9, 0.8, 0.7, 0.6}, {1, 0, 1, 0});
  if (!ap || !near(*ap, 5.0 / 6.0, 1e-12) || !near(*ap, 0.8333, 1e-4)) bad.push_back("AUPRC");
  if (!near(ece({0.9, 0.9, 0.6, 0.6}, {1, 1, 1, 0}), 0.1, 1e-12)) bad.push_back("ECE");
  if (worst_group({0.9, 0.4, 0.7, 0.8}) != 0.4) bad.push_back("WGA");
  const LineFit f = fit_alpha_line({{0, 1}, {1, 3}, {2, 5}});
  if (!near(f.slope, 2, 1e-12) || !near(f.intercept, 1, 1e-12) || !near(f.r2, 1, 1e-12)) bad.push_back("OLS");
  std::string detail = (Detail() << "AUPRC " << fmt(ap.value_or(-1), 6) << ", ECE " << fmt(ece({0.9, 0.9, 0.6, 0.6}, {1, 1, 1, 0}), 6)
                                 << ", WGA min, OLS slope " << f.slope << " intercept " << f.intercept << " R2 " << f.r2)
                           .str();
  for (const auto& b : bad) detail += "; " + b + " mismatch";
  return {bad.empty(), detail};
}

}  // namespace

int main(int argc, char** argv) {
  const fs::path config = argc > 1 ? fs::path(argv[1]) : fs::path(PROVSHIFT_DEMO_CONFIG);
  const fs::path work = argc > 2 ? fs::path(argv[2]) : fs::temp_directory_path() / "provshift-acceptance";
  fs::create_directories(work);
  try {
    demo.cfg = load_experiment(config);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "cannot load %s: %s\n", config.string().c_str(), e.what());
    return 2;
  }

  run(1, "alpha fidelity", 5, alpha_fidelity);
  run(2, "decomposition oracle", 10, decomposition);
  run(3, "core-only invariance and ERM gap", 120, [] { return generalization_gap(demo.cfg); });
  run(4, "alpha line", 300, alpha_line);
  run(5, "gradient correctness", 30, gradients);
  run(6, "degenerate-weight equivalence", 60, degenerate_equivalence);
  run(7, "rebalancing efficacy", 600, [&] { return rebalancing(work); });
  run(8, "protocol conformance", 0, protocol);
  run(9, "metric hand values", 1, metric_hand_values);
  run(10, "determinism", 600, [&] { return determinism(work); });

  std::printf("%d of 10 criteria failed\n", failures);
  return failures == 0 ? 0 : 1;
}
