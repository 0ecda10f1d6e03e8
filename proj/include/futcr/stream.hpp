#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "futcr/panoptic.hpp"
#include "futcr/scenes.hpp"

namespace futcr::stream {

using panoptic::ClassSet;

struct ClassSchedule {
  std::vector<int> base;                     // C^1
  std::vector<std::vector<int>> increments;  // C^2 .. C^T

  int num_steps() const { return 1 + static_cast<int>(increments.size()); }
  /// C^t for t in 1..T.
  ClassSet current(int step) const;
  /// C^{<=t}.
  ClassSet known(int step) const;
  /// C^{2:t}; empty for t = 1.
  ClassSet new_up_to(int step) const;
  ClassSet base_set() const { return ClassSet(base.begin(), base.end()); }

  bool operator==(const ClassSchedule&) const = default;
};

/// Seeded permutation of 1..K; the first `base_count` ids are the base step,
/// the rest are chunked into groups of `increment_size`.
ClassSchedule build_schedule(int num_classes, int base_count, int increment_size, std::uint64_t class_order_seed);

/// Same as build_schedule but with ids in natural order.
ClassSchedule build_schedule_identity(int num_classes, int base_count, int increment_size);

enum class StreamMode { Overlap, Disjoint };

std::string to_string(StreamMode m);
StreamMode stream_mode_from_string(const std::string& s);

struct StreamConfig {
  StreamMode mode = StreamMode::Overlap;
  double subsample_fraction = 1.0;
  int images_per_increment = 0;        // 0 = all eligible; otherwise a target mean
  double disjoint_base_fraction = 0.7; // share of step-1-eligible images reserved for the base pool
  std::uint64_t seed = 0;

  bool operator==(const StreamConfig&) const = default;
};

struct StepSample {
  int image_id = 0;  // index into the source dataset
  panoptic::PanopticMap training;  // masked to C^t
};

struct StepDataset {
  int step = 1;
  std::vector<StepSample> samples;
  ClassSet current;
  ClassSet known;

  std::vector<int> image_ids() const;
};

panoptic::PanopticMap mask_labels(const panoptic::PanopticMap& annotation, const ClassSet& keep);

std::vector<StepDataset> assign_images(const std::vector<scenes::SceneSample>& dataset, const ClassSchedule& schedule,
                                       const StreamConfig& config);

/// Keeps round(fraction × |step|) images in each step t > 1; the base step
/// is untouched. Every current class keeps at least one image.
std::vector<StepDataset> subsample_steps(const std::vector<StepDataset>& streams, double fraction, std::uint64_t seed);

/// Fraction that brings the mean incremental step size to `target`.
double fraction_for_target(const std::vector<StepDataset>& streams, int target);

/// Held-out split: seeded permutation; the first n_val ids are validation,
/// the next n_test are test, the rest train.
struct Split {
  std::vector<int> train, val, test;
};
Split split_dataset(int n_images, double val_fraction, double test_fraction, std::uint64_t seed);

// Manifest (JSON text) ------------------------------------------------------

struct StreamManifest {
  StreamConfig config;
  ClassSchedule schedule;
  std::vector<std::vector<int>> step_image_ids;
  std::string split_rule;

  bool operator==(const StreamManifest&) const = default;
};

StreamManifest make_manifest(const std::vector<StepDataset>& steps, const ClassSchedule& schedule,
                             const StreamConfig& config, std::string split_rule);
std::string manifest_to_json(const StreamManifest& m);
StreamManifest manifest_from_json(const std::string& text);

}  // namespace futcr::stream
