// Experiment configuration, single runs, seed sweeps, the on-disk run store,
// statistics, reports and external-feature ingestion.
#pragma once

#include "emcomm/analysis.hpp"
#include "emcomm/metrics.hpp"
#include "emcomm/training.hpp"

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace emcomm {

enum class Method { kIteratedLearning, kLazImpa };
Method parse_method(const std::string& s);
std::string method_name(Method m);

struct ExperimentConfig {
  std::string name = "default";
  std::string domain = "spring_mass";
  std::size_t scenes_per_cell = 12;
  std::uint64_t data_seed = 0;
  std::string features_path;  // ingested external features (optional)
  std::string manifest_path;  // manifest for external features
  std::string frozen_encoder = "random_mlp";  // or "identity"

  SenderConfig sender;
  AssignmentMode assignment = AssignmentMode::kSequential;
  Method method = Method::kIteratedLearning;
  TrainingConfig training;

  double posdis_threshold = 0.4;
  std::size_t transfer_epochs = 200;
  std::size_t regression_epochs = 200;
  std::size_t regression_agent = 0;
  std::size_t regression_attribute = 0;
  std::size_t downstream_epochs = 200;
  bool save_checkpoints = true;
  std::vector<std::uint64_t> seeds{1};

  /// Throws std::invalid_argument naming the offending field.
  void validate() const;
  /// Canonical `key=value` lines (sorted, seeds and name excluded).
  std::string canonical() const;
  /// FNV-1a of canonical(), as 16 hex digits.
  std::string hash() const;

  static ExperimentConfig parse(const std::string& text);
  static ExperimentConfig load(const std::filesystem::path& path);
  /// Applies one `key=value` assignment; unknown keys throw.
  void set(const std::string& key, const std::string& value);
};

/// Every key accepted by ExperimentConfig::set (short aliases K and V aside).
const std::vector<std::string>& config_keys();

/// Seed lists: "1,2,3", "1-10" or a mix ("1-3,7").
std::vector<std::uint64_t> parse_seed_list(const std::string& s);

struct ExperimentRecord {
  std::string condition;
  std::string config_hash;
  std::uint64_t seed = 0;
  bool complete = false;
  std::string failed_stage;
  std::string error;

  double oracle_holdout_both = 0.0;
  std::vector<double> oracle_holdout;
  Accuracy holdout;
  Accuracy train_eval;
  std::size_t resets = 0;
  Instability instability;
  std::vector<EpochLog> logs;

  bool has_metrics = false;
  MetricReport report;        // full dataset
  MetricReport report_train;  // train split only
  MetricReport report_test;   // test split only

  std::optional<RelevanceSummary> relevance;        // holdout pairs
  std::optional<RelevanceSummary> relevance_train;  // train pairs
  std::optional<SelectivityResult> selectivity;
  std::optional<TransferResult> transfer;
  std::optional<RegressionResult> regression;
  std::optional<DownstreamResult> downstream;
  double runtime_seconds = 0.0;

  /// Flat key=value text: provenance, results, analyses.
  KeyValues summary(const ExperimentConfig& cfg) const;
};

/// Root for run outputs: $EMCOMM_STORE, else `fallback`.
std::filesystem::path store_root(const std::filesystem::path& fallback = "emcomm_store");

/// Layout: <store>/<condition>/run.<seed>.{meta,epochs.csv,report,protocol.csv}
/// and <store>/<condition>/run.<seed>.ckpt/. The meta file is written last
/// (atomically), so its presence marks a complete run.
std::filesystem::path run_meta_path(const std::filesystem::path& store, const std::string& condition,
                                    std::uint64_t seed);

/// Builds the dataset (generated or ingested) and standardizes it with
/// train-split statistics. Deterministic in (config, seed).
struct PreparedTask {
  Dataset data;
  DatasetSplit split;
  FrozenRandomEncoder frozen;
  FeatureBank bank;
};
PreparedTask prepare_task(const ExperimentConfig& cfg, std::uint64_t seed);

/// Runs oracle pretraining, sender training, metrics and analyses; persists
/// when `store` is non-empty. Trained oracles are cached under
/// <store>/oracles/<hash> and reused across conditions with the same seed.
ExperimentRecord run_experiment(const ExperimentConfig& cfg, std::uint64_t seed,
                                const std::filesystem::path& store = {});

/// Reads a completed run back (meta + report); nullopt when incomplete.
std::optional<KeyValues> read_run_meta(const std::filesystem::path& store, const std::string& condition,
                                       std::uint64_t seed);

/// Rebuilds the config recorded in a run's meta file (name = its directory).
ExperimentConfig config_from_meta(const std::filesystem::path& meta);

struct RestoredRun {
  PreparedTask task;
  SenderGroup sender;
  std::vector<Receiver> receivers;
  KeyValues manifest;
};
/// Reloads the sender and receiver population saved by run_experiment.
RestoredRun restore_run(const ExperimentConfig& cfg, std::uint64_t seed, const std::filesystem::path& store);
/// Re-runs evaluation, metrics and analyses on restored agents.
ExperimentRecord analyze_restored(const ExperimentConfig& cfg, std::uint64_t seed, RestoredRun& run);

// ---- statistics ----------------------------------------------------------------

struct SampleStats {
  std::size_t n = 0;
  double mean = 0.0;
  double stddev = 0.0;  // sample (n-1)
};
SampleStats describe(std::span<const double> xs);

struct WelchResult {
  double t = 0.0;
  double df = 0.0;
  double p = 1.0;  // two-sided
};
WelchResult welch_t_test(std::span<const double> a, std::span<const double> b);
/// Pooled-SD Cohen's d, (mean_a - mean_b) / s_pooled.
double cohens_d(std::span<const double> a, std::span<const double> b);

struct ConditionSummary {
  std::string condition;
  std::string config_hash;
  std::size_t n_agents = 0;
  std::size_t positions = 0;
  std::size_t vocab = 0;
  std::vector<std::uint64_t> seeds;
  std::vector<double> holdout;
  std::vector<double> posdis;
  std::vector<double> oracle;
  SampleStats holdout_stats;
  SampleStats posdis_stats;
  double compositional_rate_03 = 0.0;
  double compositional_rate = 0.0;  // threshold 0.4
  double compositional_rate_05 = 0.0;
  std::size_t compositional_count = 0;
  std::size_t instabilities = 0;
};

struct Comparison {
  std::string a, b;
  std::string measure;
  WelchResult welch;
  double cohens_d = 0.0;
  std::size_t n_a = 0, n_b = 0;
};

struct SweepSummary {
  std::vector<ConditionSummary> conditions;
  std::vector<Comparison> comparisons;
};

/// Runs every (config, seed) with up to `workers` concurrent runs, skipping
/// runs already complete in the store with a matching config hash.
SweepSummary sweep(const std::vector<ExperimentConfig>& configs, const std::filesystem::path& store,
                   std::size_t workers = 1);

/// Aggregates completed runs. Throws if one condition mixes config hashes.
/// Empty `conditions` selects every condition directory in the store.
SweepSummary summarize_store(const std::filesystem::path& store, const std::vector<std::string>& conditions = {});

/// Welch tests and Cohen's d on holdout and posdis for every condition pair.
void add_comparisons(SweepSummary& s);

/// Writes table.csv, table.txt, comparisons.csv, posdis_hist_<cond>.csv and
/// mi_<cond>_seed<s>.csv under `out`. Throws on an empty selection.
void write_report(const SweepSummary& s, const std::filesystem::path& store, const std::filesystem::path& out);

// ---- external features ------------------------------------------------------------

/// Layout: magic "EMCFEAT\0", u32 version (1), u32 T, u32 D, u32 n, u32 dtype
/// (4 = float32, 8 = float64), then n*T*D little-endian values, row-major.
void write_external_features(const std::filesystem::path& path, const Dataset& data, std::size_t dtype = 8);

/// Scenes come from the manifest (id, cell, seed); features from the file.
Dataset ingest_external_features(const std::filesystem::path& features, const std::filesystem::path& manifest);

}  // namespace emcomm
