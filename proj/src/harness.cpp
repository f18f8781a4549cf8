#include "provshift/harness.hpp"

#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <exception>
#include <algorithm>
#include <limits>
#include <fstream>
#include <map>
#include <mutex>
#include <set>
#include <sstream>
#include <thread>

#include "provshift/dataset_io.hpp"
#include "provshift/error.hpp"

namespace provshift {

namespace {

constexpr const char* kVersion = "0.1.0";

std::string fixed(double v, int digits = 6) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

std::string hex64(std::uint64_t v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

std::string csv_quote(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

std::string hparam_string(const HParams& hp) {
  std::string out;
  for (const auto& [k, v] : hp) out += (out.empty() ? "" : ";") + k + "=" + format_hvalue(v);
  return out;
}

CheckpointRecord checkpoint_at(const TrainContext& ctx, const SplitResult& splits, const TrialOptions& options, int id,
                               double loss, const ModelPredictor& predictor) {
  CheckpointRecord c;
  c.id = id;
  c.step = ctx.step;
  c.progress = static_cast<double>(ctx.step) / static_cast<double>(ctx.total_steps);
  c.stage = ctx.stage;
  c.train_loss = loss;
  c.val = evaluate_predictor(predictor, splits.val);
  if (const TestSplit* t = splits.find_test(options.trace.id_log_alpha)) c.id_wga = evaluate_predictor(predictor, t->data).wga;
  if (const TestSplit* t = splits.find_test(options.trace.ood_log_alpha)) c.ood_wga = evaluate_predictor(predictor, t->data).wga;
  return c;
}

nlohmann::json opt(const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(nullptr); }

template <typename T>
T take(const nlohmann::json& j, const char* key, T fallback) {
  return j.contains(key) ? j.at(key).get<T>() : fallback;
}

void reject_unknown(const nlohmann::json& j, const std::set<std::string>& allowed, const std::string& where) {
  if (!j.is_object()) throw usage_error(where + " must be an object");
  for (auto it = j.begin(); it != j.end(); ++it)
    if (!allowed.count(it.key())) throw usage_error("unknown key '" + it.key() + "' in " + where);
}

}  // namespace

double TrialRecord::selected_val_wga() const {
  if (selected < 0 || static_cast<std::size_t>(selected) >= trace.size()) return -1.0;
  return trace[static_cast<std::size_t>(selected)].val.wga;
}

EvalReport evaluate_predictor(const ModelPredictor& predictor, const Dataset& data) {
  return evaluate(predict_proba(predictor, data), data);
}

PatienceOutcome apply_patience(const std::vector<double>& val_wga, int patience) {
  PatienceOutcome out;
  out.stop_after = static_cast<int>(val_wga.size());
  double best = -std::numeric_limits<double>::infinity();
  int bad = 0;
  for (std::size_t i = 0; i < val_wga.size(); ++i) {
    if (val_wga[i] > best) {
      best = val_wga[i];
      out.selected = static_cast<int>(i);
      bad = 0;
    } else {
      ++bad;
    }
    if (patience > 0 && bad >= patience) {
      out.stop_after = static_cast<int>(i) + 1;
      out.stopped = true;
      break;
    }
  }
  return out;
}

std::vector<long> checkpoint_steps(long planned, int checkpoints) {
  if (checkpoints < 1 || planned < checkpoints) throw argument_error("need 1 <= checkpoints <= planned steps");
  std::vector<long> steps;
  for (int k = 1; k <= checkpoints; ++k) steps.push_back(std::lround(static_cast<double>(planned) * k / checkpoints));
  return steps;
}

TrialRecord run_trial(AlgorithmKind kind, const HParams& hp, const SplitResult& splits, std::uint64_t seed,
                      const TrialOptions& options) {
  const auto t0 = std::chrono::steady_clock::now();
  TrialRecord rec;
  rec.kind = kind;
  rec.seed = seed;
  rec.train_hash = membership_hash(splits.train);
  rec.val_hash = membership_hash(splits.val);
  rec.hp = hp;
  try {
    rec.hp = complete_hparams(kind, hp, options.profile);
    TrainSettings settings = options.settings;
    settings.steps = options.budget.steps;
    TrainContext ctx = make_context(kind, rec.hp, std::make_shared<const Dataset>(splits.train), settings, seed, options.profile);
    rec.planned_steps = ctx.total_steps;
    rec.stage_boundary = ctx.stage_boundary;
    const auto marks = checkpoint_steps(ctx.total_steps, options.budget.checkpoints);

    rec.initial = checkpoint_at(ctx, splits, options, 0, 0.0, make_predictor(ctx));
    double best = -std::numeric_limits<double>::infinity();
    int bad = 0;
    double loss_sum = 0;
    long loss_n = 0;
    std::size_t next_mark = 0;
    const bool two_stage = is_two_stage(kind);
    while (ctx.step < ctx.total_steps) {
      const int stage_before = ctx.stage;
      Batch b = next_batch(ctx);
      Diagnostics d = train_step(ctx, b);
      loss_sum += d["loss"];
      ++loss_n;
      if (ctx.stage != stage_before) {
        ++rec.stage_switches;
        bad = 0;
      }
      if (next_mark < marks.size() && ctx.step == marks[next_mark]) {
        ++next_mark;
        ModelPredictor p = make_predictor(ctx);
        CheckpointRecord c = checkpoint_at(ctx, splits, options, static_cast<int>(rec.trace.size()) + 1,
                                           loss_sum / static_cast<double>(loss_n), p);
        loss_sum = 0;
        loss_n = 0;
        const double v = c.val.wga;
        rec.trace.push_back(std::move(c));
        if (v > best) {
          best = v;
          rec.selected = static_cast<int>(rec.trace.size()) - 1;
          if (options.keep_model) rec.model = std::move(p);
          bad = 0;
        } else {
          ++bad;
        }
        const bool may_stop = !two_stage || ctx.stage == 2;
        if (options.budget.patience > 0 && may_stop && bad >= options.budget.patience) {
          rec.early_stopped = true;
          break;
        }
      }
    }
    rec.steps_run = ctx.step;
    if (rec.model) {
      for (const auto& t : splits.tests) rec.sweep.push_back({t.log_alpha_target, evaluate_predictor(*rec.model, t.data)});
    }
  } catch (const Error& e) {
    rec.status = "failed";
    rec.error = e.what();
  }
  rec.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return rec;
}

std::vector<HParams> draw_search_space(AlgorithmKind kind, int n_trials, std::uint64_t seed, Profile profile) {
  if (n_trials < 1) throw argument_error("n_trials must be at least 1");
  Rng rng = make_rng(seed, "search:" + to_string(kind));
  std::vector<HParams> out;
  for (int i = 0; i < n_trials; ++i) out.push_back(sample_hparams(kind, rng, profile));
  return out;
}

SearchResult random_search(AlgorithmKind kind, int n_trials, const SplitResult& splits, std::uint64_t seed,
                           const TrialOptions& options, int workers) {
  const auto draws = draw_search_space(kind, n_trials, seed, options.profile);
  SearchResult res;
  res.trials.resize(draws.size());
  parallel_for(draws.size(), workers, [&](std::size_t i) { res.trials[i] = run_trial(kind, draws[i], splits, seed, options); });
  double best = -std::numeric_limits<double>::infinity();
  bool any = false;
  for (std::size_t i = 0; i < res.trials.size(); ++i) {
    if (!res.trials[i].ok() || res.trials[i].selected < 0) continue;
    const double v = res.trials[i].selected_val_wga();
    if (!any || v > best) {
      best = v;
      res.best = i;
      any = true;
    }
  }
  if (!any) {
    const std::string message = "all " + std::to_string(n_trials) + " trials of " + to_string(kind) +
                                " failed (first error: " + res.trials.front().error + ")";
    throw SearchFailed(message, std::move(res.trials));
  }
  res.best_hp = res.trials[res.best].hp;
  return res;
}

MetricSummary summarize(const std::vector<double>& values) {
  MetricSummary s;
  if (values.empty()) return s;
  if (std::all_of(values.begin(), values.end(), [&](double v) { return v == values.front(); })) {
    s.mean = values.front();
    return s;
  }
  double sum = 0;
  for (double v : values) sum += v;
  s.mean = sum / static_cast<double>(values.size());
  if (values.size() > 1) {
    double ss = 0;
    for (double v : values) ss += (v - s.mean) * (v - s.mean);
    s.std = std::sqrt(ss / static_cast<double>(values.size() - 1));
  }
  return s;
}

SeedSummary multi_seed(AlgorithmKind kind, const HParams& hp, const std::vector<std::uint64_t>& seeds,
                       const std::function<const SplitResult&(std::uint64_t)>& splits_for_seed,
                       const TrialOptions& options, int workers) {
  SeedSummary s;
  s.kind = kind;
  std::vector<const SplitResult*> splits;
  for (auto seed : seeds) splits.push_back(&splits_for_seed(seed));
  s.trials.resize(seeds.size());
  parallel_for(seeds.size(), workers, [&](std::size_t i) { s.trials[i] = run_trial(kind, hp, *splits[i], seeds[i], options); });
  for (const auto& t : s.trials) {
    if (!t.ok()) {
      ++s.failed;
      continue;
    }
    if (s.sweep_alphas.empty())
      for (const auto& p : t.sweep) s.sweep_alphas.push_back(p.log_alpha_target);
  }
  for (std::size_t a = 0; a < s.sweep_alphas.size(); ++a) {
    std::vector<double> wga, acc;
    for (const auto& t : s.trials) {
      if (!t.ok() || a >= t.sweep.size()) continue;
      wga.push_back(t.sweep[a].report.wga);
      acc.push_back(t.sweep[a].report.micro.accuracy);
    }
    s.wga_by_alpha.push_back(summarize(wga));
    s.accuracy_by_alpha.push_back(summarize(acc));
  }
  return s;
}

std::vector<DynamicsRow> dynamics_trace(const TrialRecord& trial) {
  std::vector<DynamicsRow> rows;
  auto push = [&](const CheckpointRecord& c) {
    if (!c.id_wga || !c.ood_wga) throw argument_error("trial was not traced on the ID and OOD splits");
    rows.push_back({c.progress, *c.id_wga, *c.ood_wga});
  };
  if (trial.initial) push(*trial.initial);
  for (const auto& c : trial.trace) push(c);
  return rows;
}

StressResult stress_test(const std::function<Eigen::MatrixXd(const Dataset&)>& predict, const std::vector<TestSplit>& sweep) {
  if (sweep.size() < 3) throw argument_error("stress test needs at least three sweep splits");
  StressResult r;
  std::vector<std::pair<double, double>> pts;
  for (const auto& t : sweep) {
    r.points.push_back({t.log_alpha_target, evaluate(predict(t.data), t.data)});
    pts.emplace_back(t.log_alpha_target, r.points.back().report.wga);
  }
  r.fit = fit_alpha_line(pts);
  return r;
}

StressResult stress_test(const ModelPredictor& predictor, const std::vector<TestSplit>& sweep) {
  return stress_test([&](const Dataset& d) { return predict_proba(predictor, d); }, sweep);
}

nlohmann::json to_json(const CheckpointRecord& c) {
  return {{"id", c.id},          {"step", c.step},     {"progress", c.progress}, {"stage", c.stage},
          {"train_loss", c.train_loss}, {"val", to_json(c.val)}, {"id_wga", opt(c.id_wga)}, {"ood_wga", opt(c.ood_wga)}};
}

nlohmann::json to_json(const TrialRecord& t) {
  nlohmann::json trace = nlohmann::json::array();
  for (const auto& c : t.trace) trace.push_back(to_json(c));
  nlohmann::json sweep = nlohmann::json::array();
  for (const auto& p : t.sweep) sweep.push_back({{"log_alpha_target", p.log_alpha_target}, {"report", to_json(p.report)}});
  return {{"algorithm", to_string(t.kind)},
          {"hparams", to_json(t.hp)},
          {"seed", t.seed},
          {"status", t.status},
          {"error", t.error},
          {"planned_steps", t.planned_steps},
          {"steps_run", t.steps_run},
          {"early_stopped", t.early_stopped},
          {"stage_boundary", t.stage_boundary},
          {"stage_switches", t.stage_switches},
          {"initial", t.initial ? to_json(*t.initial) : nlohmann::json(nullptr)},
          {"trace", trace},
          {"selected_checkpoint", t.selected >= 0 ? nlohmann::json(t.trace[static_cast<std::size_t>(t.selected)].id) : nlohmann::json(nullptr)},
          {"selected_val_wga", t.selected >= 0 ? nlohmann::json(t.selected_val_wga()) : nlohmann::json(nullptr)},
          {"sweep", sweep},
          {"train_hash", hex64(t.train_hash)},
          {"val_hash", hex64(t.val_hash)},
          {"wall_seconds", t.wall_seconds}};
}

void parallel_for(std::size_t n, int workers, const std::function<void(std::size_t)>& task) {
  const std::size_t threads = std::min<std::size_t>(n, static_cast<std::size_t>(std::max(1, workers)));
  if (threads <= 1) {
    for (std::size_t i = 0; i < n; ++i) task(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::exception_ptr> errors(n);
  std::vector<std::thread> pool;
  for (std::size_t t = 0; t < threads; ++t)
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < n; i = next++) {
        try {
          task(i);
        } catch (...) {
          errors[i] = std::current_exception();
        }
      }
    });
  for (auto& th : pool) th.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

ExperimentConfig parse_experiment(const nlohmann::json& root, const std::filesystem::path& base_dir) {
  try {
    const nlohmann::json& j = root.contains("command") && root.contains("config") ? root.at("config") : root;
    reject_unknown(j, {"data", "spec", "algorithms", "trials", "seeds", "search_seed", "budget", "model", "profile", "trace",
                       "workers", "output"},
                   "experiment config");
    ExperimentConfig c;
    const auto& data = j.at("data");
    reject_unknown(data, {"synthetic", "file"}, "data");
    if (data.contains("synthetic") == data.contains("file")) throw usage_error("data needs exactly one of 'synthetic' or 'file'");
    if (data.contains("synthetic")) {
      const auto& s = data.at("synthetic");
      reject_unknown(s, {"n", "d_core", "d_spur", "d_noise", "core_strength", "spur_strength", "subjects", "seed", "log_alpha",
                         "marginal_y", "marginal_z", "name"},
                     "data.synthetic");
      GenConfig g;
      g.n = take<std::size_t>(s, "n", 20000);
      g.d_core = take<std::size_t>(s, "d_core", g.d_core);
      g.d_spur = take<std::size_t>(s, "d_spur", g.d_spur);
      g.d_noise = take<std::size_t>(s, "d_noise", g.d_noise);
      g.core_strength = take<double>(s, "core_strength", g.core_strength);
      g.spur_strength = take<double>(s, "spur_strength", g.spur_strength);
      g.subjects = take<std::size_t>(s, "subjects", g.n);
      g.seed = take<std::uint64_t>(s, "seed", 0);
      g.name = take<std::string>(s, "name", g.name);
      const auto my = take<std::array<double, 2>>(s, "marginal_y", {0.5, 0.5});
      const auto mz = take<std::array<double, 2>>(s, "marginal_z", {0.5, 0.5});
      g.joint = solve_joint(take<double>(s, "log_alpha", 0.0), my, mz);
      g.validate();
      c.data.synthetic = g;
    } else {
      std::filesystem::path p = data.at("file").get<std::string>();
      if (p.is_relative() && !base_dir.empty()) p = base_dir / p;
      c.data.file = p;
    }
    const nlohmann::json spec = j.value("spec", nlohmann::json::object());
    reject_unknown(spec, {"log_alpha_train", "log_alpha_val", "sweep", "ratios", "marginal_y", "marginal_z"}, "spec");
    c.spec.log_alpha_train = take<double>(spec, "log_alpha_train", -0.6);
    c.spec.log_alpha_val = take<double>(spec, "log_alpha_val", c.spec.log_alpha_train);
    if (!spec.contains("sweep"))
      c.spec.sweep = sweep_specs(-1, 1, 11);
    else if (spec.at("sweep").is_string())
      c.spec.sweep = parse_sweep(spec.at("sweep").get<std::string>());
    else
      c.spec.sweep = spec.at("sweep").get<std::vector<double>>();
    c.spec.ratios = take<std::array<double, 3>>(spec, "ratios", {6, 2, 2});
    c.spec.marginal_y = take<std::array<double, 2>>(spec, "marginal_y", {0.5, 0.5});
    c.spec.marginal_z = take<std::array<double, 2>>(spec, "marginal_z", {0.5, 0.5});
    c.spec.validate();

    if (!j.contains("algorithms") || (j.at("algorithms").is_string() && j.at("algorithms").get<std::string>() == "all")) {
      c.algorithms = all_algorithms();
    } else {
      for (const auto& a : j.at("algorithms")) c.algorithms.push_back(parse_algorithm(a.get<std::string>()));
    }
    if (c.algorithms.empty()) throw usage_error("no algorithms selected");
    c.trials = take<int>(j, "trials", 16);
    c.seeds = take<int>(j, "seeds", 5);
    c.search_seed = take<std::uint64_t>(j, "search_seed", 0);
    if (c.trials < 1 || c.seeds < 1) throw usage_error("trials and seeds must be positive");

    const nlohmann::json budget = j.value("budget", nlohmann::json::object());
    reject_unknown(budget, {"steps", "checkpoints", "patience"}, "budget");
    c.options.budget.steps = take<long>(budget, "steps", 500);
    c.options.budget.checkpoints = take<int>(budget, "checkpoints", 10);
    c.options.budget.patience = take<int>(budget, "patience", 3);
    if (c.options.budget.steps < c.options.budget.checkpoints) throw usage_error("budget.steps must be at least budget.checkpoints");

    const nlohmann::json model = j.value("model", nlohmann::json::object());
    reject_unknown(model, {"hidden", "activation", "per_provenance", "optimizer"}, "model");
    c.options.settings.hidden = take<std::size_t>(model, "hidden", 32);
    c.options.settings.activation = parse_activation(take<std::string>(model, "activation", "tanh"));
    c.options.settings.per_provenance = take<std::size_t>(model, "per_provenance", 32);
    const auto optimizer = take<std::string>(model, "optimizer", "adam");
    if (optimizer != "adam" && optimizer != "sgd") throw usage_error("model.optimizer must be adam or sgd");
    c.options.settings.optimizer = optimizer == "adam" ? OptimizerConfig::kAdam : OptimizerConfig::kSgd;

    c.options.profile = parse_profile(take<std::string>(j, "profile", "desk"));
    const nlohmann::json trace = j.value("trace", nlohmann::json::object());
    reject_unknown(trace, {"id_log_alpha", "ood_log_alpha"}, "trace");
    c.options.trace.id_log_alpha = take<double>(trace, "id_log_alpha", c.spec.log_alpha_train);
    c.options.trace.ood_log_alpha = take<double>(trace, "ood_log_alpha", -c.spec.log_alpha_train);
    c.workers = take<int>(j, "workers", 1);
    c.output = take<std::string>(j, "output", "");
    c.raw = normalized_config(c);
    return c;
  } catch (const nlohmann::json::exception& e) {
    throw usage_error(std::string("malformed experiment config: ") + e.what());
  }
}

ExperimentConfig load_experiment(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw usage_error("cannot read config " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw usage_error(path.string() + ": " + e.what());
  }
  return parse_experiment(j, path.parent_path());
}

nlohmann::json normalized_config(const ExperimentConfig& c) {
  nlohmann::json data;
  if (c.data.synthetic) {
    const auto& g = *c.data.synthetic;
    data["synthetic"] = {{"n", g.n},
                         {"d_core", g.d_core},
                         {"d_spur", g.d_spur},
                         {"d_noise", g.d_noise},
                         {"core_strength", g.core_strength},
                         {"spur_strength", g.spur_strength},
                         {"subjects", g.subjects},
                         {"seed", g.seed},
                         {"name", g.name},
                         {"log_alpha", g.joint.log_alpha()},
                         {"marginal_y", g.joint.marginal_y()},
                         {"marginal_z", g.joint.marginal_z()}};
  } else {
    data["file"] = c.data.file->string();
  }
  nlohmann::json algs = nlohmann::json::array();
  for (auto k : c.algorithms) algs.push_back(to_string(k));
  return {{"data", data},
          {"spec",
           {{"log_alpha_train", c.spec.log_alpha_train},
            {"log_alpha_val", c.spec.log_alpha_val},
            {"sweep", c.spec.sweep},
            {"ratios", c.spec.ratios},
            {"marginal_y", c.spec.marginal_y},
            {"marginal_z", c.spec.marginal_z}}},
          {"algorithms", algs},
          {"trials", c.trials},
          {"seeds", c.seeds},
          {"search_seed", c.search_seed},
          {"budget", {{"steps", c.options.budget.steps}, {"checkpoints", c.options.budget.checkpoints}, {"patience", c.options.budget.patience}}},
          {"model",
           {{"hidden", c.options.settings.hidden},
            {"activation", to_string(c.options.settings.activation)},
            {"per_provenance", c.options.settings.per_provenance},
            {"optimizer", c.options.settings.optimizer == OptimizerConfig::kAdam ? "adam" : "sgd"}}},
          {"profile", to_string(c.options.profile)},
          {"trace", {{"id_log_alpha", c.options.trace.id_log_alpha}, {"ood_log_alpha", c.options.trace.ood_log_alpha}}},
          {"workers", c.workers},
          {"output", c.output}};
}

std::string config_hash(const nlohmann::json& normalized) {
  nlohmann::json copy = normalized;
  // Worker count and output location never change results.
  copy.erase("workers");
  copy.erase("output");
  return hex64(fnv1a64(copy.dump()));
}

Dataset load_source(const DataSource& source) {
  if (source.synthetic) return generate(*source.synthetic);
  if (source.file) return load_dataset(*source.file);
  throw usage_error("no data source configured");
}

nlohmann::json manifest(const std::string& command, const nlohmann::json& config, const std::vector<std::uint64_t>& seeds,
                        const nlohmann::json& extra) {
  nlohmann::json m = {{"tool", "provshift"},
                      {"version", kVersion},
                      {"command", command},
                      {"log_alpha_base", kLogAlphaBase},
                      {"seeds", seeds},
                      {"config_hash", config_hash(config)},
                      {"config", config},
                      {"eigen", std::to_string(EIGEN_WORLD_VERSION) + "." + std::to_string(EIGEN_MAJOR_VERSION) + "." +
                                    std::to_string(EIGEN_MINOR_VERSION)},
                      {"compiler", __VERSION__}};
  for (auto it = extra.begin(); it != extra.end(); ++it) m[it.key()] = it.value();
  return m;
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("io-error", "cannot write " + path.string());
  out << text;
  if (!out) throw Error("io-error", "failed writing " + path.string());
}

std::string summary_csv(const BenchmarkResult& result) {
  std::ostringstream s;
  s << "algorithm,trials,seeds,failed_seeds,id_wga_mean,id_wga_std,ood_wga_mean,ood_wga_std,id_accuracy_mean,"
       "id_accuracy_std,ood_accuracy_mean,ood_accuracy_std,val_wga_mean,val_wga_std,best_hparams\n";
  for (std::size_t a = 0; a < result.summaries.size(); ++a) {
    const SeedSummary& sum = result.summaries[a];
    const SearchResult& search = result.searches[a];
    auto pick = [&](double target, bool wga) {
      std::vector<double> v;
      for (const auto& t : sum.trials) {
        if (!t.ok()) continue;
        for (const auto& p : t.sweep)
          if (std::abs(p.log_alpha_target - target) < 1e-9) v.push_back(wga ? p.report.wga : p.report.micro.accuracy);
      }
      return summarize(v);
    };
    std::vector<double> val;
    for (const auto& t : sum.trials)
      if (t.ok()) val.push_back(t.selected_val_wga());
    const auto& tr = result.trace_targets;
    const MetricSummary idw = pick(tr.id_log_alpha, true), oodw = pick(tr.ood_log_alpha, true);
    const MetricSummary ida = pick(tr.id_log_alpha, false), ooda = pick(tr.ood_log_alpha, false);
    const MetricSummary vw = summarize(val);
    s << to_string(sum.kind) << ',' << search.trials.size() << ',' << sum.trials.size() << ',' << sum.failed;
    for (const auto& m : {idw, oodw, ida, ooda, vw}) s << ',' << fixed(m.mean) << ',' << fixed(m.std);
    s << ',' << csv_quote(hparam_string(search.best_hp)) << '\n';
  }
  return s.str();
}

nlohmann::json to_json(const ModelDocument& doc) {
  return {{"format", "provshift-model"}, {"version", 1},        {"algorithm", to_string(doc.kind)},
          {"seed", doc.seed},            {"config", doc.config}, {"predictor", to_json(doc.predictor)}};
}

ModelDocument load_model_document(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("io-error", "cannot read model " + path.string());
  try {
    nlohmann::json j;
    in >> j;
    if (j.value("format", "") != "provshift-model") throw Error("parse-error", path.string() + " is not a provshift model file");
    ModelDocument d;
    d.kind = parse_algorithm(j.at("algorithm").get<std::string>());
    d.seed = j.at("seed").get<std::uint64_t>();
    d.config = j.at("config");
    d.predictor = predictor_from_json(j.at("predictor"));
    return d;
  } catch (const nlohmann::json::exception& e) {
    throw Error("parse-error", path.string() + ": " + e.what());
  }
}

BenchmarkResult run_benchmark(const ExperimentConfig& cfg, const std::filesystem::path& out, const std::function<void(const std::string&)>& log) {
  auto say = [&](const std::string& m) {
    if (log) log(m);
  };
  const Dataset dataset = load_source(cfg.data);
  validate_dataset(dataset);
  std::vector<std::uint64_t> seeds;
  for (int s = 0; s < cfg.seeds; ++s) seeds.push_back(static_cast<std::uint64_t>(s));

  std::map<std::uint64_t, SplitResult> splits;
  auto splits_for = [&](std::uint64_t seed) -> const SplitResult& {
    auto it = splits.find(seed);
    if (it != splits.end()) return it->second;
    SplitSpec spec = cfg.spec;
    spec.seed = seed;
    return splits.emplace(seed, make_splits(dataset, spec)).first->second;
  };
  splits_for(cfg.search_seed);
  for (auto s : seeds) splits_for(s);

  BenchmarkResult result;
  result.trace_targets = cfg.options.trace;
  nlohmann::json split_hashes = nlohmann::json::object();
  for (const auto& [seed, sr] : splits) {
    std::uint64_t h = membership_hash(sr.train);
    h = fnv1a64(hex64(membership_hash(sr.val)), h);
    for (const auto& t : sr.tests) h = fnv1a64(hex64(membership_hash(t.data)), h);
    split_hashes[std::to_string(seed)] = hex64(h);
    if (std::find(seeds.begin(), seeds.end(), seed) != seeds.end()) result.split_hashes.push_back(h);
  }

  std::ostringstream dyn, sweep, fits;
  dyn << "algorithm,seed,checkpoint,step,progress,stage,val_wga,id_wga,ood_wga\n";
  sweep << "algorithm,seed,log_alpha_target,log_alpha_achieved,n,wga,worst_cell_accuracy,micro_accuracy,macro_accuracy,macro_f1\n";
  fits << "algorithm,seed,slope,intercept,r2\n";
  for (AlgorithmKind kind : cfg.algorithms) {
    const std::string name = to_string(kind);
    say("search " + name + " (" + std::to_string(cfg.trials) + " trials)");
    auto write_search = [&](const std::vector<TrialRecord>& trials) {
      for (std::size_t i = 0; i < trials.size(); ++i) {
        char file[128];
        std::snprintf(file, sizeof file, "trials/%s_search_%02zu.json", name.c_str(), i);
        write_text(out / file, to_json(trials[i]).dump(1) + "\n");
      }
    };
    SearchResult search;
    try {
      search = random_search(kind, cfg.trials, splits_for(cfg.search_seed), cfg.search_seed, cfg.options, cfg.workers);
    } catch (const SearchFailed& e) {
      write_search(e.trials);
      throw;
    }
    write_search(search.trials);
    say("rerun " + name + " best configuration at " + std::to_string(seeds.size()) + " seeds");
    SeedSummary sum = multi_seed(kind, search.best_hp, seeds, splits_for, cfg.options, cfg.workers);
    for (std::size_t i = 0; i < sum.trials.size(); ++i) {
      const TrialRecord& t = sum.trials[i];
      const std::string stem = "trials/" + name + "_seed" + std::to_string(t.seed);
      write_text(out / (stem + ".json"), to_json(t).dump(1) + "\n");
      if (t.model) write_text(out / (stem + ".model.json"), to_json(ModelDocument{kind, t.seed, cfg.raw, *t.model}).dump() + "\n");
      if (!t.ok()) continue;
      auto row = [&](const CheckpointRecord& c) {
        dyn << name << ',' << t.seed << ',' << c.id << ',' << c.step << ',' << fixed(c.progress) << ',' << c.stage << ','
            << fixed(c.val.wga) << ',' << (c.id_wga ? fixed(*c.id_wga) : "") << ',' << (c.ood_wga ? fixed(*c.ood_wga) : "")
            << '\n';
      };
      if (t.initial) row(*t.initial);
      for (const auto& c : t.trace) row(c);
      std::vector<std::pair<double, double>> pts;
      for (const auto& p : t.sweep) {
        sweep << name << ',' << t.seed << ',' << format_double(p.log_alpha_target) << ','
              << (p.report.alpha_defined ? fixed(p.report.log_alpha) : "") << ',' << p.report.micro.count << ','
              << fixed(p.report.wga) << ',' << fixed(p.report.worst_cell_accuracy) << ',' << fixed(p.report.micro.accuracy)
              << ',' << fixed(p.report.macro.accuracy) << ',' << fixed(p.report.macro.f1) << '\n';
        pts.emplace_back(p.log_alpha_target, p.report.wga);
      }
      if (pts.size() >= 3) {
        const LineFit f = fit_alpha_line(pts);
        fits << name << ',' << t.seed << ',' << fixed(f.slope) << ',' << fixed(f.intercept) << ',' << fixed(f.r2) << '\n';
      }
    }
    result.searches.push_back(std::move(search));
    result.summaries.push_back(std::move(sum));
  }
  write_text(out / "summary.csv", summary_csv(result));
  write_text(out / "dynamics.csv", dyn.str());
  write_text(out / "sweep.csv", sweep.str());
  write_text(out / "fits.csv", fits.str());
  nlohmann::json extra = {{"search_seed", cfg.search_seed},
                          {"split_hashes", split_hashes},
                          {"search_protocol", "random search at search_seed, best configuration rerun at each of seeds"}};
  write_text(out / "MANIFEST.json", manifest("benchmark", cfg.raw, seeds, extra).dump(2) + "\n");
  return result;
}

}  // namespace provshift
