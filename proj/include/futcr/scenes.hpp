#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "futcr/panoptic.hpp"

namespace futcr::scenes {

enum class Shape { Disk, Rectangle, Triangle };

struct ClassAppearance {
  Shape shape = Shape::Disk;         // things only
  double color[3] = {0.5, 0.5, 0.5};  // mean RGB in [0,1]
  double jitter = 0.04;               // per-instance uniform color offset bound
  double noise = 0.03;                // per-pixel gaussian texture sd
  int size_min = 8;                   // pixels (diameter / side)
  int size_max = 20;
  double weight = 1.0;                // sampling weight
};

struct SceneSpec {
  int height = 64;
  int width = 64;
  panoptic::LabelSpace label_space;
  std::vector<ClassAppearance> appearance;  // index c-1
  int min_things = 1;
  int max_things = 6;
  int max_instances_per_class = 2;
  int min_stuff_regions = 1;
  int max_stuff_regions = 2;
  int min_visible_pixels = 20;
  int max_retries = 200;
  double min_color_margin = 0.15;  // pairwise L-inf distance between class color means

  /// Throws std::invalid_argument when the spec is inconsistent.
  void validate() const;
  std::vector<int> thing_classes() const;
  std::vector<int> stuff_classes() const;
};

/// Default toy space: `num_stuff` stuff classes followed by thing classes,
/// colors spread over the RGB cube.
SceneSpec default_spec(int num_classes = 8, int num_stuff = 3, int height = 64, int width = 64);

struct SceneSample {
  int height = 0;
  int width = 0;
  std::vector<double> image;  // 3×H×W, channel-major, values in [0,1]
  panoptic::PanopticMap annotation;
  panoptic::ClassSet present_classes;
  std::uint64_t seed = 0;

  bool operator==(const SceneSample&) const = default;
};

/// Deterministic in (spec, seed). `required` classes are guaranteed to appear.
SceneSample generate_scene(const SceneSpec& spec, std::uint64_t seed, const std::vector<int>& required = {});

/// Per-sample seeds derive from (seed, index). When a presence plan is given,
/// class c appears in at least plan[c] images.
std::vector<SceneSample> generate_dataset(const SceneSpec& spec, int n_images, std::uint64_t seed,
                                          const std::map<int, int>& presence_plan = {});

std::uint64_t sample_seed(std::uint64_t dataset_seed, int index);

// Persistence: <dir>/sample_<i>.bin plus <dir>/manifest.json.
void save_dataset(const std::filesystem::path& dir, const std::vector<SceneSample>& samples,
                  const panoptic::LabelSpace& space);
std::vector<SceneSample> load_dataset(const std::filesystem::path& dir);

}  // namespace futcr::scenes
