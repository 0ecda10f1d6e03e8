#pragma once

#include <map>
#include <optional>
#include <set>
#include <span>
#include <vector>

#include "futcr/panoptic.hpp"
#include "futcr/scenes.hpp"
#include "futcr/segmenter.hpp"

// Read-only diagnostics over a frozen model: where future-class pixels go,
// how far class prototypes drift across steps, and the retention / new-class
// trajectory of a continual run.
namespace futcr::analysis {

struct ConfusionProfile {
  int step = 0;
  double to_old = 0.0;
  double to_background = 0.0;
  double to_future = 0.0;
  long long future_pixels = 0;
};

/// Pixels whose gt class is a real class outside `known`, split by what the
/// prediction says: a known class, void, or another non-known class.
/// Throws when no such pixel exists.
ConfusionProfile confusion_from_maps(const std::vector<panoptic::PanopticMap>& predictions,
                                     const std::vector<const panoptic::PanopticMap*>& ground_truth,
                                     const panoptic::ClassSet& known);

/// Runs panoptic inference on every eval image (original annotations) and profiles it.
ConfusionProfile future_confusion_profile(const seg::QueryModel& model, const std::vector<scenes::SceneSample>& eval,
                                          const panoptic::ClassSet& known, const panoptic::LabelSpace& space,
                                          const seg::InferenceSettings& settings = {});

struct PrototypeSet {
  std::map<int, std::vector<double>> prototypes;
  std::map<int, long long> pixel_counts;
  std::set<int> missing;  // requested classes with no labelled cell
};

/// Mean feature per class over feature cells whose majority gt label is that
/// class. Features are per-image C × P maps; annotations at full resolution.
PrototypeSet class_prototypes(const std::vector<std::span<const double>>& features, int channels,
                              const std::vector<const panoptic::PanopticMap*>& annotations, int factor,
                              const panoptic::ClassSet& classes);

PrototypeSet class_prototypes_from_data(const seg::QueryModel& model, const std::vector<scenes::SceneSample>& eval,
                                        const panoptic::ClassSet& classes);

/// Unit-normalised classifier rows, for the secondary congruence series.
PrototypeSet classifier_prototypes(const seg::QueryModel& model, const panoptic::ClassSet& classes);

struct CongruenceRecord {
  int step = 0;
  std::map<int, double> cosine;
  std::optional<double> mean;  // over classes present in both sets
  std::set<int> excluded;      // zero-norm or missing on one side
};

/// Throws when the two sets share no class.
CongruenceRecord prototype_congruence(const PrototypeSet& current, const PrototypeSet& reference);

struct TrajectoryPoint {
  int step = 0;
  double retention = 0.0;  // PQ_base(t) / PQ_base(1), 0 when PQ_base(1) = 0
  std::optional<double> pq_new;
};

/// One point per step t ≥ 2. `history` maps step → report and must hold 1..T.
std::vector<TrajectoryPoint> stability_plasticity(const std::map<int, panoptic::MetricReport>& history);

}  // namespace futcr::analysis
