#include <algorithm>
#include <cmath>

#include "doctest.h"
#include "futcr/scenes.hpp"
#include "futcr/stream.hpp"

using namespace futcr;
using namespace futcr::stream;

namespace {

const std::vector<scenes::SceneSample>& toy_dataset() {
  static const auto data = scenes::generate_dataset(scenes::default_spec(), 200, 17);
  return data;
}

bool has_any(const panoptic::ClassSet& present, const panoptic::ClassSet& wanted) {
  return std::any_of(wanted.begin(), wanted.end(), [&](int c) { return present.count(c) > 0; });
}

// A step of n single-pixel samples cycling through `classes`.
StepDataset synthetic_step(int step, int n, const std::vector<int>& classes) {
  StepDataset sd;
  sd.step = step;
  sd.current = ClassSet(classes.begin(), classes.end());
  for (int i = 0; i < n; ++i) {
    panoptic::PanopticMap m(1, 1);
    m.semantic[0] = classes[static_cast<std::size_t>(i) % classes.size()];
    sd.samples.push_back({i, m});
  }
  return sd;
}

}  // namespace

TEST_CASE("schedules partition the label space") {
  const auto s11 = build_schedule(150, 100, 5, 0);
  CHECK(s11.num_steps() == 11);
  for (const auto& inc : s11.increments) CHECK(inc.size() == 5);
  CHECK(build_schedule(150, 100, 50, 0).num_steps() == 2);
  CHECK(build_schedule(150, 100, 10, 0).num_steps() == 6);

  const auto id = build_schedule_identity(8, 6, 1);
  CHECK(id.num_steps() == 3);
  CHECK(id.increments == std::vector<std::vector<int>>{{7}, {8}});

  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const auto s = build_schedule(8, 6, 1, seed);
    CHECK(s.known(s.num_steps()) == ClassSet{1, 2, 3, 4, 5, 6, 7, 8});
    std::size_t total = s.base.size();
    for (const auto& inc : s.increments) total += inc.size();
    CHECK(total == 8);
    CHECK(s == build_schedule(8, 6, 1, seed));
  }
  CHECK_THROWS_AS(build_schedule(8, 8, 1, 0), std::invalid_argument);
  CHECK_THROWS_AS(build_schedule(8, 6, 0, 0), std::invalid_argument);
}

TEST_CASE("mask_labels keeps exactly the requested classes") {
  panoptic::PanopticMap m(3, 3);
  const int cls[9] = {3, 3, 5, 5, 9, 9, 0, 5, 3};
  for (int i = 0; i < 9; ++i) {
    m.semantic[static_cast<std::size_t>(i)] = cls[i];
    m.instance[static_cast<std::size_t>(i)] = cls[i] == 0 ? 0 : 1;
  }
  const auto k5 = mask_labels(m, {5});
  for (int i = 0; i < 9; ++i) {
    CHECK(k5.semantic[static_cast<std::size_t>(i)] == (cls[i] == 5 ? 5 : 0));
    CHECK(k5.instance[static_cast<std::size_t>(i)] == (cls[i] == 5 ? 1 : 0));
  }
  CHECK(mask_labels(m, {3, 5, 9}) == m);
  CHECK(mask_labels(m, {}) == panoptic::PanopticMap(3, 3));
  CHECK(mask_labels(k5, {5}) == k5);
}

TEST_CASE("step eligibility equals a scan of present classes") {
  const auto& data = toy_dataset();
  const auto schedule = build_schedule(8, 6, 1, 3);
  const auto steps = assign_images(data, schedule, {StreamMode::Overlap});
  REQUIRE(steps.size() == 3);
  for (const auto& sd : steps) {
    std::vector<int> expect;
    for (int i = 0; i < static_cast<int>(data.size()); ++i)
      if (has_any(data[static_cast<std::size_t>(i)].present_classes, sd.current)) expect.push_back(i);
    CHECK(sd.image_ids() == expect);
    for (const auto& s : sd.samples)
      for (int c : s.training.classes()) CHECK(sd.current.count(c) == 1);
  }
}

TEST_CASE("disjoint streams never reuse base images") {
  const auto& data = toy_dataset();
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const auto schedule = build_schedule(8, 6, 1, seed);
    StreamConfig cfg{StreamMode::Disjoint};
    cfg.seed = seed;
    const auto steps = assign_images(data, schedule, cfg);
    const auto base = steps[0].image_ids();
    for (std::size_t t = 1; t < steps.size(); ++t)
      for (int id : steps[t].image_ids()) CHECK(std::find(base.begin(), base.end(), id) == base.end());
  }
}

TEST_CASE("disjoint mode names a class confined to the base pool") {
  auto data = std::vector<scenes::SceneSample>(toy_dataset().begin(), toy_dataset().begin() + 3);
  // class 8 only in image 0, which carries every base class so it is base-eligible
  for (auto& s : data) s.present_classes = {1, 2};
  data[0].present_classes = {1, 2, 8};
  StreamConfig cfg{StreamMode::Disjoint};
  cfg.disjoint_base_fraction = 1.0;
  try {
    assign_images(data, build_schedule_identity(8, 7, 1), cfg);
    FAIL("expected an error");
  } catch (const std::invalid_argument& e) {
    CHECK(std::string(e.what()).find("class") != std::string::npos);
  }
}

TEST_CASE("subsampling keeps round(fraction × |step|) images") {
  const auto& data = toy_dataset();
  const auto schedule = build_schedule(8, 6, 1, 1);
  const auto steps = assign_images(data, schedule, {StreamMode::Overlap});
  CHECK(subsample_steps(steps, 1.0, 3)[1].image_ids() == steps[1].image_ids());
  for (double f : {0.9, 0.5, 100.0 / 700.0}) {
    const auto sub = subsample_steps(steps, f, 3);
    CHECK(sub[0].image_ids() == steps[0].image_ids());
    for (std::size_t t = 1; t < steps.size(); ++t) {
      const double expect = std::round(f * static_cast<double>(steps[t].samples.size()));
      CHECK(std::abs(static_cast<double>(sub[t].samples.size()) - expect) <= 1.0);
      for (int c : sub[t].current) {
        bool found = false;
        for (const auto& s : sub[t].samples) found = found || s.training.classes().count(c) > 0;
        CHECK(found);
      }
    }
    CHECK(subsample_steps(steps, f, 3)[1].image_ids() == sub[1].image_ids());
  }
  CHECK_THROWS_AS(subsample_steps(steps, 1e-6, 3), std::invalid_argument);
  CHECK_THROWS_AS(subsample_steps(steps, 0.0, 3), std::invalid_argument);
}

TEST_CASE("reduced supervision hits the 700 to 400 per-step counts") {
  // ~700/step row of the 100-5 overlap stream and its ~400/step reduction
  const std::vector<int> full{573, 297, 617, 598, 581, 941, 903, 1475, 617, 953};
  const std::vector<int> reduced{327, 170, 353, 342, 332, 538, 516, 843, 353, 545};
  std::vector<StepDataset> steps{synthetic_step(1, 10, {1})};
  for (std::size_t i = 0; i < full.size(); ++i)
    steps.push_back(synthetic_step(static_cast<int>(i) + 2, full[i], {100 + static_cast<int>(i) * 5, 101 + static_cast<int>(i) * 5}));
  const auto sub = subsample_steps(steps, 4.0 / 7.0, 9);
  for (std::size_t i = 0; i < full.size(); ++i)
    CHECK(std::abs(static_cast<int>(sub[i + 1].samples.size()) - reduced[i]) <= 2);
}

TEST_CASE("held-out split and manifest round-trip") {
  const auto split = split_dataset(100, 0.1, 0.1, 4);
  CHECK(split.val.size() == 10);
  CHECK(split.test.size() == 10);
  CHECK(split.train.size() == 80);
  std::vector<int> all = split.train;
  all.insert(all.end(), split.val.begin(), split.val.end());
  all.insert(all.end(), split.test.begin(), split.test.end());
  std::sort(all.begin(), all.end());
  for (int i = 0; i < 100; ++i) CHECK(all[static_cast<std::size_t>(i)] == i);

  const auto schedule = build_schedule(8, 6, 1, 2);
  StreamConfig cfg{StreamMode::Disjoint, 0.5, 0, 0.7, 11};
  const auto steps = assign_images(toy_dataset(), schedule, cfg);
  const auto m = make_manifest(steps, schedule, cfg, "seeded permutation");
  CHECK(manifest_from_json(manifest_to_json(m)) == m);
}
