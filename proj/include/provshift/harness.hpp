#pragma once

#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "provshift/algorithms.hpp"
#include "provshift/error.hpp"
#include "provshift/metrics.hpp"
#include "provshift/sampler.hpp"
#include "provshift/synthgen.hpp"

namespace provshift {

struct Budget {
  long steps = 500;      // single-stage budget; two-stage methods get 2x
  int checkpoints = 10;
  int patience = 3;      // <= 0 disables early stopping
};

// Evaluation targets tracked at every checkpoint besides validation.
struct TraceTargets {
  double id_log_alpha = -0.6;
  double ood_log_alpha = 0.6;
};

struct CheckpointRecord {
  int id = 0;  // 1-based; 0 is the untrained model
  long step = 0;
  double progress = 0.0;  // step / planned steps
  int stage = 1;
  double train_loss = 0.0;
  EvalReport val;
  std::optional<double> id_wga;
  std::optional<double> ood_wga;
};

struct SweepPoint {
  double log_alpha_target = 0.0;
  EvalReport report;
};

struct TrialRecord {
  AlgorithmKind kind = AlgorithmKind::kERM;
  HParams hp;
  std::uint64_t seed = 0;
  std::string status = "ok";  // ok | failed
  std::string error;
  long planned_steps = 0;
  long steps_run = 0;
  bool early_stopped = false;
  long stage_boundary = -1;
  int stage_switches = 0;
  std::optional<CheckpointRecord> initial;
  std::vector<CheckpointRecord> trace;
  int selected = -1;  // index into trace
  std::vector<SweepPoint> sweep;
  std::uint64_t train_hash = 0;
  std::uint64_t val_hash = 0;
  double wall_seconds = 0.0;
  std::optional<ModelPredictor> model;  // selected checkpoint

  bool ok() const { return status == "ok"; }
  double selected_val_wga() const;
};

struct TrialOptions {
  TrainSettings settings;
  Budget budget;
  Profile profile = Profile::kDesk;
  TraceTargets trace;
  bool keep_model = true;
};

EvalReport evaluate_predictor(const ModelPredictor& predictor, const Dataset& data);

// Index of the first strict maximum of the validation WGA trace and the
// number of checkpoints after which early stopping fires (trace size when
// it never fires). Exposed for protocol tests.
struct PatienceOutcome {
  int selected = -1;
  int stop_after = 0;
  bool stopped = false;
};
PatienceOutcome apply_patience(const std::vector<double>& val_wga, int patience);

// Evenly spaced checkpoint steps over the planned budget.
std::vector<long> checkpoint_steps(long planned, int checkpoints);

TrialRecord run_trial(AlgorithmKind kind, const HParams& hp, const SplitResult& splits, std::uint64_t seed,
                      const TrialOptions& options);

struct SearchResult {
  std::size_t best = 0;
  HParams best_hp;
  std::vector<TrialRecord> trials;
};

// Thrown by random_search when every trial failed; carries the records.
class SearchFailed : public Error {
 public:
  SearchFailed(const std::string& message, std::vector<TrialRecord> records)
      : Error("search-failed", message, ErrorCategory::kDivergence), trials(std::move(records)) {}
  std::vector<TrialRecord> trials;
};

// Draws n_trials configurations from the registry (deterministic in seed),
// trains each on the given splits, returns the best by selected validation
// WGA. Throws "search-failed" when every trial failed.
std::vector<HParams> draw_search_space(AlgorithmKind kind, int n_trials, std::uint64_t seed, Profile profile);
SearchResult random_search(AlgorithmKind kind, int n_trials, const SplitResult& splits, std::uint64_t seed,
                           const TrialOptions& options, int workers = 1);

struct MetricSummary {
  double mean = 0.0;
  double std = 0.0;  // sample standard deviation, 0 for a single value
};
MetricSummary summarize(const std::vector<double>& values);

struct SeedSummary {
  AlgorithmKind kind = AlgorithmKind::kERM;
  std::vector<TrialRecord> trials;  // one per seed
  std::vector<double> sweep_alphas;
  std::vector<MetricSummary> wga_by_alpha;
  std::vector<MetricSummary> accuracy_by_alpha;
  std::size_t failed = 0;
};

// Reruns fixed hyperparameters at each seed; splits_for_seed(s) must depend
// on the seed only so every algorithm sees the same data at a given seed.
SeedSummary multi_seed(AlgorithmKind kind, const HParams& hp, const std::vector<std::uint64_t>& seeds,
                       const std::function<const SplitResult&(std::uint64_t)>& splits_for_seed,
                       const TrialOptions& options, int workers = 1);

struct DynamicsRow {
  double progress = 0.0;
  double id_wga = 0.0;
  double ood_wga = 0.0;
};
std::vector<DynamicsRow> dynamics_trace(const TrialRecord& trial);

struct StressResult {
  std::vector<SweepPoint> points;
  LineFit fit;
};
StressResult stress_test(const ModelPredictor& predictor, const std::vector<TestSplit>& sweep);
StressResult stress_test(const std::function<Eigen::MatrixXd(const Dataset&)>& predict, const std::vector<TestSplit>& sweep);

nlohmann::json to_json(const TrialRecord& t);
nlohmann::json to_json(const CheckpointRecord& c);

// Runs independent tasks on up to `workers` threads; results are indexed by
// task so collection order never depends on scheduling.
void parallel_for(std::size_t n, int workers, const std::function<void(std::size_t)>& task);

// ---- experiment files ----

struct DataSource {
  std::optional<GenConfig> synthetic;
  std::optional<std::filesystem::path> file;
};

struct ExperimentConfig {
  DataSource data;
  SplitSpec spec;  // spec.seed is replaced per run seed
  std::vector<AlgorithmKind> algorithms;
  int trials = 16;
  int seeds = 5;
  std::uint64_t search_seed = 0;
  TrialOptions options;
  int workers = 1;
  std::string output;
  nlohmann::json raw;  // normalized config, hashed into the manifest
};

ExperimentConfig parse_experiment(const nlohmann::json& j, const std::filesystem::path& base_dir = {});
ExperimentConfig load_experiment(const std::filesystem::path& path);
nlohmann::json normalized_config(const ExperimentConfig& cfg);
std::string config_hash(const nlohmann::json& normalized);
Dataset load_source(const DataSource& source);

struct BenchmarkResult {
  std::vector<SearchResult> searches;  // one per algorithm
  std::vector<SeedSummary> summaries;
  std::vector<std::uint64_t> split_hashes;  // per seed, train+val+tests
  TraceTargets trace_targets;
};

// Search at the search seed, rerun the best configuration at seeds
// 0..seeds-1, and write trials/, summary.csv, dynamics.csv, sweep.csv,
// fits.csv and MANIFEST.json under out_dir.
BenchmarkResult run_benchmark(const ExperimentConfig& cfg, const std::filesystem::path& out_dir,
                              const std::function<void(const std::string&)>& log = {});

std::string summary_csv(const BenchmarkResult& result);

// A trained predictor plus what is needed to rebuild its data splits.
struct ModelDocument {
  AlgorithmKind kind = AlgorithmKind::kERM;
  std::uint64_t seed = 0;
  nlohmann::json config;  // normalized experiment config
  ModelPredictor predictor;
};
nlohmann::json to_json(const ModelDocument& doc);
ModelDocument load_model_document(const std::filesystem::path& path);

// MANIFEST.json body shared by every command.
nlohmann::json manifest(const std::string& command, const nlohmann::json& config, const std::vector<std::uint64_t>& seeds,
                        const nlohmann::json& extra = nlohmann::json::object());
void write_text(const std::filesystem::path& path, const std::string& text);

}  // namespace provshift
