#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "futcr/analysis.hpp"
#include "futcr/futcr.hpp"
#include "futcr/panoptic.hpp"
#include "futcr/segmenter.hpp"
#include "futcr/stream.hpp"

// Config-driven continual runs: build the stream, train step by step with
// checkpoints, evaluate on C^{<=t}, and write metrics, diagnostics and tables.
namespace futcr::experiment {

enum class Variant { Baseline, RegionContrast, Repulsion, Full };

std::string to_string(Variant v);
Variant variant_from_string(const std::string& s);

struct ExperimentConfig {
  // synthetic dataset
  int num_classes = 8;
  int num_stuff = 3;
  int height = 64;
  int width = 64;
  int num_images = 600;
  std::uint64_t dataset_seed = 1;
  double val_fraction = 0.15;
  double test_fraction = 0.15;
  std::uint64_t split_seed = 2;

  // class schedule and stream
  int base_count = 6;
  int increment_size = 1;
  std::uint64_t class_order_seed = 3;
  int max_steps = 0;  // > 0 truncates the schedule to its first max_steps steps
  stream::StreamConfig stream;

  // model and optimiser
  seg::ModelConfig model;
  std::uint64_t model_seed = 4;
  seg::AdamWConfig optimizer;
  seg::LossWeights loss;
  int batch_size = 8;
  int base_iterations = 500;
  int increment_iterations = 200;
  double increment_lr_scale = 1.0;  // lr multiplier for steps t > 1
  std::uint64_t train_seed = 5;

  // regularisers; the variant switches below override the matching futcr fields
  future::FutcrConfig futcr;
  bool variant_rc = true;
  bool variant_kfr = true;
  bool variant_aux = false;

  // evaluation
  seg::InferenceSettings inference;
  std::string diagnostics_split = "val";

  std::string out_dir = "runs/default";

  /// FutcrConfig with the variant switches applied.
  future::FutcrConfig effective_futcr() const;
  /// Model config with canvas, classes and aux head width filled in.
  seg::ModelConfig effective_model() const;
  void validate() const;
};

/// Flat `key = value` text; `#` starts a comment. Unknown keys and malformed
/// values throw std::invalid_argument naming the line.
ExperimentConfig parse_config(const std::string& text);
ExperimentConfig load_config(const std::filesystem::path& path);
void apply_setting(ExperimentConfig& cfg, const std::string& key, const std::string& value);

/// Every key with its current value, one per line, in a fixed order.
std::string config_to_text(const ExperimentConfig& cfg);

struct ConfigKey {
  std::string key;
  std::string doc;
};
const std::vector<ConfigKey>& config_keys();

/// FNV-1a of the canonical text, excluding the output directory.
std::string config_hash(const ExperimentConfig& cfg);

void apply_variant(ExperimentConfig& cfg, Variant v);
/// Re-derives every seed in the config from one root.
void apply_seed_override(ExperimentConfig& cfg, std::uint64_t root);

// Run records ------------------------------------------------------------------

struct StepEvaluation {
  int step = 0;
  int train_images = 0;
  panoptic::MetricReport val;
  panoptic::MetricReport test;
  std::optional<analysis::ConfusionProfile> confusion;  // absent once no future class remains
  std::optional<double> congruence_mean;                // data centroids of base classes vs step 1
  std::optional<double> classifier_congruence_mean;
  std::map<int, double> congruence;
  double retention = 0.0;
  std::optional<double> pq_new;
};

struct RunRecord {
  std::string config_hash;
  std::string variant;
  std::string stream_mode;
  int num_steps = 0;
  std::vector<StepEvaluation> steps;
  std::vector<future::StepRecord> train_log;
  std::vector<int> train_log_step;  // continual step of each train_log entry
  std::map<int, std::vector<double>> base_prototypes;       // step-1 data centroids
  std::map<int, std::vector<double>> base_classifier_rows;  // step-1 unit classifier rows
  double wall_seconds = 0.0;  // not persisted in metrics files

  bool complete() const { return num_steps > 0 && static_cast<int>(steps.size()) == num_steps; }
  const StepEvaluation& final_step() const { return steps.back(); }
};

struct RunOptions {
  bool resume = false;
  int stop_after_step = 0;  // > 0: return once this step is persisted (simulates an interruption)
  bool quiet = true;
};

/// Executes (or resumes) the continual protocol for `cfg` under cfg.out_dir.
RunRecord run_experiment(const ExperimentConfig& cfg, const RunOptions& options = {});

std::string record_to_json(const RunRecord& r);
RunRecord record_from_json(const std::string& text);
RunRecord load_record(const std::filesystem::path& run_dir);

// Suites --------------------------------------------------------------------

struct AblationRow {
  Variant variant = Variant::Baseline;
  std::map<std::string, RunRecord> by_stream;  // "overlap", "disjoint"
};

struct AblationTable {
  std::vector<AblationRow> rows;
};

/// Four variants × two streams, sharing every seed; runs under out_dir/ablation.
AblationTable run_ablation_suite(const ExperimentConfig& cfg, const RunOptions& options = {});
std::string render_ablation_csv(const AblationTable& table);

struct SweepPoint {
  double fraction = 1.0;
  std::string stream_mode;
  double mean_images_per_increment = 0.0;
  RunRecord record;
};

/// One run per (fraction, stream) under out_dir/sweep.
std::vector<SweepPoint> run_reduced_supervision_sweep(const ExperimentConfig& cfg, const std::vector<double>& fractions,
                                                      const RunOptions& options = {});
std::string render_sweep_csv(const std::vector<SweepPoint>& points);

// Reports -------------------------------------------------------------------

struct LabeledRecord {
  std::string label;
  RunRecord record;
};

/// File name → contents. Incomplete records yield rows with empty cells and
/// complete=0 rather than an error.
std::map<std::string, std::string> render_report(const std::vector<LabeledRecord>& records);
void write_report(const std::filesystem::path& dir, const std::vector<LabeledRecord>& records);

/// Per-run files written after every step.
std::string metrics_csv(const RunRecord& r);
std::string diagnostics_csv(const RunRecord& r);
std::string train_log_csv(const RunRecord& r);

}  // namespace futcr::experiment
