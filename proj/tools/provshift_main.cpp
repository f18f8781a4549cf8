#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "provshift/dataset_io.hpp"
#include "provshift/error.hpp"
#include "provshift/harness.hpp"

namespace fs = std::filesystem;
using namespace provshift;

namespace {

std::string fixed(double v, int digits = 6) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

// Output directories must be fresh unless --force.
void prepare_dir(const fs::path& dir, bool force) {
  if (dir.empty()) throw usage_error("an output directory is required (--out)");
  if (fs::exists(dir)) {
    if (!fs::is_directory(dir)) throw usage_error(dir.string() + " exists and is not a directory");
    if (!fs::is_empty(dir) && !force) throw usage_error(dir.string() + " is not empty; pass --force to overwrite");
  }
  fs::create_directories(dir);
}

void prepare_file(const fs::path& file, bool force) {
  if (file.empty()) throw usage_error("an output file is required (--out)");
  if (fs::exists(file) && !force) throw usage_error(file.string() + " exists; pass --force to overwrite");
}

std::array<double, 3> parse_ratios(const std::string& text) {
  std::array<double, 3> r{};
  std::stringstream ss(text);
  std::string part;
  int i = 0;
  while (std::getline(ss, part, ':')) {
    if (i >= 3) throw usage_error("--ratios takes three values a:b:c");
    r[static_cast<std::size_t>(i++)] = parse_double(part);
  }
  if (i != 3) throw usage_error("--ratios takes three values a:b:c");
  return r;
}

HParams parse_hparam_overrides(AlgorithmKind kind, const std::vector<std::string>& items, Profile profile) {
  HParams out;
  const auto specs = registry(kind, profile);
  for (const auto& item : items) {
    const auto eq = item.find('=');
    if (eq == std::string::npos) throw usage_error("--hparam expects name=value, got '" + item + "'");
    const std::string name = item.substr(0, eq), value = item.substr(eq + 1);
    const HParamSpec* spec = nullptr;
    for (const auto& s : specs)
      if (s.name == name) spec = &s;
    if (!spec) throw usage_error("unknown hyperparameter '" + name + "' for " + to_string(kind));
    if (std::holds_alternative<bool>(spec->default_value))
      out[name] = value == "true" || value == "1";
    else if (std::holds_alternative<std::string>(spec->default_value))
      out[name] = value;
    else
      out[name] = parse_double(value);
  }
  return out;
}

nlohmann::json joint_json(const JointTable& t) {
  return {{"p", t.cells()}, {"marginal_y", t.marginal_y()}, {"marginal_z", t.marginal_z()},
          {"log_alpha", t.alpha_defined() ? nlohmann::json(t.log_alpha()) : nlohmann::json(nullptr)}};
}

std::string split_file_name(const SplitStats& s) {
  if (s.split == "train" || s.split == "val") return s.split + ".tsv";
  return "test_" + format_double(s.target_log_alpha) + ".tsv";
}

int cmd_synth(const fs::path& config, const fs::path& out, const fs::path& noise_out, bool force) {
  const ExperimentConfig cfg = load_experiment(config);
  if (!cfg.data.synthetic) throw usage_error("synth needs a config with data.synthetic");
  prepare_file(out, force);
  const fs::path manifest_path = out.string() + ".MANIFEST.json";
  prepare_file(manifest_path, force);
  if (!noise_out.empty()) prepare_file(noise_out, force);
  std::vector<NoiseRecord> noise;
  const Dataset d = generate(*cfg.data.synthetic, noise_out.empty() ? nullptr : &noise);
  if (out.has_parent_path()) fs::create_directories(out.parent_path());
  save_dataset(d, out);
  if (!noise_out.empty()) {
    std::ostringstream s;
    for (const auto& r : noise) {
      s << r.example_id << '\t';
      for (std::size_t i = 0; i < r.eps.size(); ++i) s << (i ? "," : "") << format_double(r.eps[i]);
      s << '\n';
    }
    write_text(noise_out, s.str());
  }
  write_text(manifest_path, manifest("synth", cfg.raw, {cfg.data.synthetic->seed},
                                     {{"output", out.string()}, {"examples", d.size()}, {"membership_hash", std::to_string(membership_hash(d))}})
                                .dump(2) +
                                "\n");
  std::cerr << "wrote " << d.size() << " examples to " << out << "\n";
  return 0;
}

int cmd_split(const fs::path& data, SplitSpec spec, const std::string& sweep, const std::string& ratios, const fs::path& out,
              bool force) {
  spec.sweep = parse_sweep(sweep);
  spec.ratios = parse_ratios(ratios);
  spec.validate();
  const Dataset d = load_dataset(data);
  validate_dataset(d);
  const SplitResult r = make_splits(d, spec);
  prepare_dir(out, force);
  nlohmann::json splits = nlohmann::json::array();
  std::vector<const Dataset*> parts{&r.train, &r.val};
  for (const auto& t : r.tests) parts.push_back(&t.data);
  for (std::size_t i = 0; i < r.report.size(); ++i) {
    const SplitStats& s = r.report[i];
    const std::string file = split_file_name(s);
    save_dataset(*parts[i], out / file);
    splits.push_back({{"split", s.split},
                      {"file", file},
                      {"target_log_alpha", s.target_log_alpha},
                      {"achieved_log_alpha", std::isfinite(s.achieved_log_alpha) ? nlohmann::json(s.achieved_log_alpha) : nlohmann::json(nullptr)},
                      {"size", s.size},
                      {"pool_size", s.pool_size},
                      {"target", joint_json(s.target)},
                      {"achieved", joint_json(s.achieved)},
                      {"membership_hash", std::to_string(membership_hash(*parts[i]))}});
  }
  nlohmann::json report = {{"log_alpha_base", kLogAlphaBase},
                           {"note", "log alpha = log10 P(Y=1|Z=1) - log10 P(Y=1|Z=0)"},
                           {"seed", spec.seed},
                           {"splits", splits}};
  write_text(out / "report.json", report.dump(2) + "\n");
  const nlohmann::json config = {{"data", data.string()},
                                 {"log_alpha_train", spec.log_alpha_train},
                                 {"log_alpha_val", spec.log_alpha_val},
                                 {"sweep", spec.sweep},
                                 {"ratios", spec.ratios},
                                 {"seed", spec.seed}};
  write_text(out / "MANIFEST.json", manifest("split", config, {spec.seed}).dump(2) + "\n");
  std::cerr << "wrote " << r.report.size() << " splits to " << out << "\n";
  return 0;
}

SplitResult splits_from_config(const ExperimentConfig& cfg, std::uint64_t seed) {
  const Dataset d = load_source(cfg.data);
  validate_dataset(d);
  SplitSpec spec = cfg.spec;
  spec.seed = seed;
  return make_splits(d, spec);
}

int cmd_train(const fs::path& config, const std::string& algorithm, const std::vector<std::string>& hp_items,
              std::uint64_t seed, const fs::path& out, bool force) {
  const ExperimentConfig cfg = load_experiment(config);
  const AlgorithmKind kind = parse_algorithm(algorithm);
  const HParams hp = complete_hparams(kind, parse_hparam_overrides(kind, hp_items, cfg.options.profile), cfg.options.profile);
  prepare_dir(out, force);
  const SplitResult splits = splits_from_config(cfg, seed);
  const TrialRecord t = run_trial(kind, hp, splits, seed, cfg.options);
  write_text(out / "trial.json", to_json(t).dump(1) + "\n");
  if (t.model) write_text(out / "model.json", to_json(ModelDocument{kind, seed, cfg.raw, *t.model}).dump() + "\n");
  write_text(out / "MANIFEST.json",
             manifest("train", cfg.raw, {seed}, {{"algorithm", to_string(kind)}, {"hparams", to_json(hp)}}).dump(2) + "\n");
  if (!t.ok()) {
    std::cerr << "training failed: " << t.error << "\n";
    return 3;
  }
  std::cerr << to_string(kind) << ": selected checkpoint " << t.trace[static_cast<std::size_t>(t.selected)].id
            << ", validation WGA " << fixed(t.selected_val_wga(), 4) << "\n";
  return 0;
}

int cmd_benchmark(const fs::path& config, fs::path out, int workers, std::optional<std::uint64_t> seed, bool force) {
  ExperimentConfig cfg = load_experiment(config);
  if (workers > 0) cfg.workers = workers;
  if (seed) cfg.search_seed = *seed;
  if (out.empty()) out = cfg.output;
  if (out.empty()) throw usage_error("no output directory: pass --out or set 'output' in the config");
  cfg.output = out.string();
  cfg.raw = normalized_config(cfg);
  prepare_dir(out, force);
  run_benchmark(cfg, out, [](const std::string& m) { std::cerr << m << "\n"; });
  std::cerr << "wrote " << (out / "summary.csv") << "\n";
  return 0;
}

int cmd_stress(const fs::path& model_path, const std::string& sweep, std::optional<std::uint64_t> seed, const fs::path& out,
               bool force) {
  const ModelDocument doc = load_model_document(model_path);
  ExperimentConfig cfg = parse_experiment(doc.config, model_path.parent_path());
  cfg.spec.sweep = parse_sweep(sweep);
  const std::uint64_t s = seed.value_or(doc.seed);
  prepare_dir(out, force);
  const SplitResult splits = splits_from_config(cfg, s);
  const StressResult r = stress_test(doc.predictor, splits.tests);
  std::ostringstream csv;
  csv << "log_alpha_target,log_alpha_achieved,n,wga,worst_cell_accuracy,micro_accuracy,macro_f1\n";
  for (const auto& p : r.points)
    csv << format_double(p.log_alpha_target) << ',' << (p.report.alpha_defined ? fixed(p.report.log_alpha) : "") << ','
        << p.report.micro.count << ',' << fixed(p.report.wga) << ',' << fixed(p.report.worst_cell_accuracy) << ','
        << fixed(p.report.micro.accuracy) << ',' << fixed(p.report.macro.f1) << '\n';
  csv << "# slope=" << fixed(r.fit.slope) << ",intercept=" << fixed(r.fit.intercept) << ",r2=" << fixed(r.fit.r2) << '\n';
  write_text(out / "sweep.csv", csv.str());
  write_text(out / "MANIFEST.json",
             manifest("stress", cfg.raw, {s}, {{"model", model_path.string()}, {"algorithm", to_string(doc.kind)}, {"sweep", cfg.spec.sweep}})
                     .dump(2) +
                 "\n");
  std::cerr << "slope " << fixed(r.fit.slope, 4) << ", R^2 " << fixed(r.fit.r2, 4) << "\n";
  return 0;
}

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (quoted) {
      if (c == '"' && i + 1 < line.size() && line[i + 1] == '"') {
        cur += '"';
        ++i;
      } else if (c == '"') {
        quoted = false;
      } else {
        cur += c;
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      out.push_back(cur);
      cur.clear();
    } else {
      cur += c;
    }
  }
  out.push_back(cur);
  return out;
}

std::vector<std::map<std::string, std::string>> read_csv(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("io-error", "cannot read " + path.string());
  std::string line;
  std::getline(in, line);
  const auto header = split_csv_line(line);
  std::vector<std::map<std::string, std::string>> rows;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    const auto cells = split_csv_line(line);
    std::map<std::string, std::string> row;
    for (std::size_t i = 0; i < header.size() && i < cells.size(); ++i) row[header[i]] = cells[i];
    rows.push_back(std::move(row));
  }
  return rows;
}

int cmd_report(const fs::path& run, fs::path out, bool force) {
  if (out.empty()) out = run / "report";
  const auto summary = read_csv(run / "summary.csv");
  std::map<std::string, std::vector<double>> slopes, r2s;
  if (fs::exists(run / "fits.csv"))
    for (const auto& row : read_csv(run / "fits.csv")) {
      slopes[row.at("algorithm")].push_back(parse_double(row.at("slope")));
      r2s[row.at("algorithm")].push_back(parse_double(row.at("r2")));
    }
  prepare_dir(out, force);
  auto pm = [](const std::map<std::string, std::string>& row, const std::string& m) {
    return fixed(100 * parse_double(row.at(m + "_mean")), 1) + " ± " + fixed(100 * parse_double(row.at(m + "_std")), 1);
  };
  std::ostringstream md;
  md << "| Algorithm | ID WGA | OOD WGA | ID Acc | OOD Acc | slope | R^2 |\n|---|---|---|---|---|---|---|\n";
  for (const auto& row : summary) {
    const std::string& a = row.at("algorithm");
    const MetricSummary sl = summarize(slopes[a]), r2 = summarize(r2s[a]);
    md << "| " << a << " | " << pm(row, "id_wga") << " | " << pm(row, "ood_wga") << " | " << pm(row, "id_accuracy") << " | "
       << pm(row, "ood_accuracy") << " | " << (slopes[a].empty() ? "" : fixed(sl.mean, 3)) << " | "
       << (r2s[a].empty() ? "" : fixed(r2.mean, 3)) << " |\n";
  }
  write_text(out / "report.md", md.str());
  nlohmann::json config = {{"run", run.string()}};
  std::vector<std::uint64_t> seeds;
  if (std::ifstream mf(run / "MANIFEST.json"); mf) {
    nlohmann::json m;
    mf >> m;
    config["run_config_hash"] = m.value("config_hash", "");
    seeds = m.value("seeds", std::vector<std::uint64_t>{});
  }
  write_text(out / "MANIFEST.json", manifest("report", config, seeds).dump(2) + "\n");
  std::cerr << "wrote " << (out / "report.md") << "\n";
  return 0;
}

int exit_code(const Error& e) {
  switch (e.category()) {
    case ErrorCategory::kUsage:
      return 1;
    case ErrorCategory::kData:
      return 2;
    case ErrorCategory::kDivergence:
      return 3;
  }
  return 2;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"provshift: provenance-shift benchmark toolkit"};
  app.require_subcommand(1);
  bool force = false;
  app.add_flag("--force", force, "Overwrite existing outputs");

  std::string config, out, data, noise, sweep = "-1:1:11", ratios = "6:2:2", algorithm = "ERM", model, run;
  std::vector<std::string> hp_items;
  std::uint64_t seed = 0;
  int workers = 0;
  SplitSpec spec;
  bool val_given = false;

  auto* synth = app.add_subcommand("synth", "Generate a synthetic annotated dataset");
  synth->add_option("--config", config, "Experiment config with data.synthetic")->required()->check(CLI::ExistingFile);
  synth->add_option("--out", out, "Dataset output file")->required();
  synth->add_option("--emit-noise", noise, "Also write the per-example noise draws");
  synth->add_flag("--force", force);

  auto* split = app.add_subcommand("split", "Build train/val/test splits at target log alpha");
  split->add_option("--data", data, "Dataset file")->required()->check(CLI::ExistingFile);
  split->add_option("--log-alpha-train", spec.log_alpha_train, "Train log10 alpha");
  auto* val_opt = split->add_option("--log-alpha-val", spec.log_alpha_val, "Validation log10 alpha (defaults to train)");
  split->add_option("--sweep", sweep, "Test sweep lo:hi:steps or comma list");
  split->add_option("--ratios", ratios, "Pool ratios train:val:test");
  split->add_option("--seed", seed, "Split seed");
  split->add_option("--out", out, "Output directory")->required();
  split->add_flag("--force", force);

  auto* train = app.add_subcommand("train", "Train one algorithm with fixed hyperparameters");
  train->add_option("--config", config, "Experiment config")->required()->check(CLI::ExistingFile);
  train->add_option("--algorithm", algorithm, "Algorithm name");
  train->add_option("--hparam", hp_items, "Hyperparameter override name=value (repeatable)");
  train->add_option("--seed", seed, "Run seed");
  train->add_option("--out", out, "Output directory")->required();
  train->add_flag("--force", force);

  auto* bench = app.add_subcommand("benchmark", "Random search plus multi-seed rerun for every configured algorithm");
  bench->add_option("--config", config, "Experiment config or a previous MANIFEST.json")->required()->check(CLI::ExistingFile);
  bench->add_option("--out", out, "Output directory (defaults to the config's output)");
  bench->add_option("--workers", workers, "Worker threads")->check(CLI::PositiveNumber);
  auto* bench_seed = bench->add_option("--seed", seed, "Search seed");
  bench->add_flag("--force", force);

  auto* stress = app.add_subcommand("stress", "Evaluate a trained model across a log alpha sweep");
  stress->add_option("--model", model, "Model file written by train or benchmark")->required()->check(CLI::ExistingFile);
  stress->add_option("--sweep", sweep, "Sweep lo:hi:steps or comma list");
  auto* stress_seed = stress->add_option("--seed", seed, "Split seed (defaults to the model's seed)");
  stress->add_option("--out", out, "Output directory")->required();
  stress->add_flag("--force", force);

  auto* report = app.add_subcommand("report", "Render a benchmark run as a mean ± std table");
  report->add_option("--run", run, "Benchmark output directory")->required()->check(CLI::ExistingDirectory);
  report->add_option("--out", out, "Output directory (defaults to <run>/report)");
  report->add_flag("--force", force);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }
  val_given = val_opt->count() > 0;

  try {
    if (*synth) return cmd_synth(config, out, noise, force);
    if (*split) {
      if (!val_given) spec.log_alpha_val = spec.log_alpha_train;
      spec.seed = seed;
      return cmd_split(data, spec, sweep, ratios, out, force);
    }
    if (*train) return cmd_train(config, algorithm, hp_items, seed, out, force);
    if (*bench)
      return cmd_benchmark(config, out, workers, bench_seed->count() ? std::optional<std::uint64_t>(seed) : std::nullopt, force);
    if (*stress) return cmd_stress(model, sweep, stress_seed->count() ? std::optional<std::uint64_t>(seed) : std::nullopt, out, force);
    if (*report) return cmd_report(run, out, force);
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return exit_code(e);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 1;
}
