#include "futcr/stream.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "futcr/rng.hpp"
#include "json.hpp"

namespace futcr::stream {

ClassSet ClassSchedule::current(int step) const {
  if (step < 1 || step > num_steps()) throw std::out_of_range("step outside schedule");
  const auto& v = step == 1 ? base : increments[static_cast<std::size_t>(step - 2)];
  return ClassSet(v.begin(), v.end());
}

ClassSet ClassSchedule::known(int step) const {
  ClassSet s;
  for (int t = 1; t <= step; ++t) {
    const auto c = current(t);
    s.insert(c.begin(), c.end());
  }
  return s;
}

ClassSet ClassSchedule::new_up_to(int step) const {
  ClassSet s;
  for (int t = 2; t <= step; ++t) {
    const auto c = current(t);
    s.insert(c.begin(), c.end());
  }
  return s;
}

namespace {

ClassSchedule chunk(const std::vector<int>& order, int base_count, int increment_size) {
  ClassSchedule s;
  s.base.assign(order.begin(), order.begin() + base_count);
  for (std::size_t i = static_cast<std::size_t>(base_count); i < order.size(); i += static_cast<std::size_t>(increment_size)) {
    const auto end = std::min(order.size(), i + static_cast<std::size_t>(increment_size));
    s.increments.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(i), order.begin() + static_cast<std::ptrdiff_t>(end));
  }
  return s;
}

void check_schedule_args(int num_classes, int base_count, int increment_size) {
  if (base_count < 1 || base_count >= num_classes)
    throw std::invalid_argument("base_count must be in [1, K)");
  if (increment_size < 1) throw std::invalid_argument("increment_size must be >= 1");
}

}  // namespace

ClassSchedule build_schedule(int num_classes, int base_count, int increment_size, std::uint64_t class_order_seed) {
  check_schedule_args(num_classes, base_count, increment_size);
  std::vector<int> order(static_cast<std::size_t>(num_classes));
  for (int i = 0; i < num_classes; ++i) order[static_cast<std::size_t>(i)] = i + 1;
  Rng rng(derive_seed(class_order_seed, {0xC1A55}));
  rng.shuffle(order);
  return chunk(order, base_count, increment_size);
}

ClassSchedule build_schedule_identity(int num_classes, int base_count, int increment_size) {
  check_schedule_args(num_classes, base_count, increment_size);
  std::vector<int> order(static_cast<std::size_t>(num_classes));
  for (int i = 0; i < num_classes; ++i) order[static_cast<std::size_t>(i)] = i + 1;
  return chunk(order, base_count, increment_size);
}

std::string to_string(StreamMode m) { return m == StreamMode::Overlap ? "overlap" : "disjoint"; }

StreamMode stream_mode_from_string(const std::string& s) {
  if (s == "overlap") return StreamMode::Overlap;
  if (s == "disjoint") return StreamMode::Disjoint;
  throw std::invalid_argument("unknown stream mode '" + s + "'");
}

std::vector<int> StepDataset::image_ids() const {
  std::vector<int> ids;
  ids.reserve(samples.size());
  for (const auto& s : samples) ids.push_back(s.image_id);
  return ids;
}

panoptic::PanopticMap mask_labels(const panoptic::PanopticMap& annotation, const ClassSet& keep) {
  panoptic::PanopticMap out = annotation;
  for (std::size_t i = 0; i < out.semantic.size(); ++i) {
    if (out.semantic[i] != 0 && !keep.count(out.semantic[i])) {
      out.semantic[i] = 0;
      out.instance[i] = 0;
    }
  }
  return out;
}

namespace {

bool intersects(const ClassSet& a, const ClassSet& b) {
  for (auto c : a)
    if (b.count(c)) return true;
  return false;
}

}  // namespace

std::vector<StepDataset> assign_images(const std::vector<scenes::SceneSample>& dataset, const ClassSchedule& schedule,
                                       const StreamConfig& config) {
  const int n = static_cast<int>(dataset.size());
  for (auto c : schedule.known(schedule.num_steps())) {
    const bool found = std::any_of(dataset.begin(), dataset.end(),
                                   [c](const auto& s) { return s.present_classes.count(c) > 0; });
    if (!found) throw std::invalid_argument("class " + std::to_string(c) + " does not appear in any image");
  }

  std::vector<int> base_pool;
  const auto c1 = schedule.current(1);
  for (int i = 0; i < n; ++i)
    if (intersects(dataset[static_cast<std::size_t>(i)].present_classes, c1)) base_pool.push_back(i);

  std::vector<bool> in_base(static_cast<std::size_t>(n), false);
  if (config.mode == StreamMode::Disjoint) {
    Rng rng(derive_seed(config.seed, {0xD15}));
    const int keep = static_cast<int>(std::lround(config.disjoint_base_fraction * static_cast<double>(base_pool.size())));
    const auto picks = rng.sample_without_replacement(static_cast<int>(base_pool.size()), keep);
    std::vector<int> reserved;
    for (int p : picks) reserved.push_back(base_pool[static_cast<std::size_t>(p)]);
    std::sort(reserved.begin(), reserved.end());
    base_pool = std::move(reserved);
  }
  for (int i : base_pool) in_base[static_cast<std::size_t>(i)] = true;

  std::vector<StepDataset> steps;
  for (int t = 1; t <= schedule.num_steps(); ++t) {
    StepDataset sd;
    sd.step = t;
    sd.current = schedule.current(t);
    sd.known = schedule.known(t);
    std::vector<int> ids;
    if (t == 1) {
      ids = base_pool;
    } else {
      for (int i = 0; i < n; ++i) {
        if (config.mode == StreamMode::Disjoint && in_base[static_cast<std::size_t>(i)]) continue;
        if (intersects(dataset[static_cast<std::size_t>(i)].present_classes, sd.current)) ids.push_back(i);
      }
      if (config.mode == StreamMode::Disjoint) {
        for (auto c : sd.current) {
          const bool found = std::any_of(ids.begin(), ids.end(), [&](int i) {
            return dataset[static_cast<std::size_t>(i)].present_classes.count(c) > 0;
          });
          if (!found)
            throw std::invalid_argument("disjoint stream: class " + std::to_string(c) +
                                        " appears only in base-pool images");
        }
      }
    }
    for (int i : ids) sd.samples.push_back({i, mask_labels(dataset[static_cast<std::size_t>(i)].annotation, sd.current)});
    steps.push_back(std::move(sd));
  }
  return steps;
}

std::vector<StepDataset> subsample_steps(const std::vector<StepDataset>& streams, double fraction, std::uint64_t seed) {
  if (!(fraction > 0.0 && fraction <= 1.0)) throw std::invalid_argument("subsample fraction must be in (0, 1]");
  std::vector<StepDataset> out = streams;
  if (fraction == 1.0) return out;
  for (auto& sd : out) {
    if (sd.step == 1) continue;
    const int n = static_cast<int>(sd.samples.size());
    const int k = static_cast<int>(std::lround(fraction * n));
    if (k < 1) throw std::invalid_argument("subsample fraction leaves step " + std::to_string(sd.step) + " empty");
    Rng rng(derive_seed(seed, {0x5B5, static_cast<std::uint64_t>(sd.step)}));
    auto order = rng.sample_without_replacement(n, n);  // full permutation; first k are kept
    std::vector<ClassSet> present(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) present[static_cast<std::size_t>(i)] = sd.samples[static_cast<std::size_t>(i)].training.classes();

    auto covered_by = [&](int c, int upto, int skip) {
      for (int j = 0; j < upto; ++j)
        if (j != skip && present[static_cast<std::size_t>(order[static_cast<std::size_t>(j)])].count(c)) return true;
      return false;
    };
    for (auto c : sd.current) {
      if (covered_by(c, k, -1)) continue;
      int donor = -1;
      for (int j = k; j < n && donor < 0; ++j)
        if (present[static_cast<std::size_t>(order[static_cast<std::size_t>(j)])].count(c)) donor = j;
      if (donor < 0) continue;  // class absent from the step entirely
      int victim = -1;
      for (int j = k - 1; j >= 0 && victim < 0; --j) {
        bool redundant = true;
        for (auto c2 : present[static_cast<std::size_t>(order[static_cast<std::size_t>(j)])])
          if (sd.current.count(c2) && !covered_by(c2, k, j)) redundant = false;
        if (redundant) victim = j;
      }
      if (victim < 0)
        throw std::invalid_argument("subsample of step " + std::to_string(sd.step) + " cannot cover class " +
                                    std::to_string(c));
      std::swap(order[static_cast<std::size_t>(victim)], order[static_cast<std::size_t>(donor)]);
    }
    std::vector<int> kept(order.begin(), order.begin() + k);
    std::sort(kept.begin(), kept.end());
    std::vector<StepSample> samples;
    for (int j : kept) samples.push_back(sd.samples[static_cast<std::size_t>(j)]);
    sd.samples = std::move(samples);
  }
  return out;
}

double fraction_for_target(const std::vector<StepDataset>& streams, int target) {
  double total = 0.0;
  int count = 0;
  for (const auto& s : streams)
    if (s.step > 1) {
      total += static_cast<double>(s.samples.size());
      ++count;
    }
  if (count == 0 || total == 0.0 || target <= 0) return 1.0;
  return std::clamp(target / (total / count), 1e-9, 1.0);
}

Split split_dataset(int n_images, double val_fraction, double test_fraction, std::uint64_t seed) {
  if (val_fraction < 0 || test_fraction < 0 || val_fraction + test_fraction >= 1.0)
    throw std::invalid_argument("held-out fractions must be non-negative and sum below 1");
  Rng rng(derive_seed(seed, {0x5917}));
  auto order = rng.sample_without_replacement(n_images, n_images);
  const int nv = static_cast<int>(std::lround(val_fraction * n_images));
  const int nt = static_cast<int>(std::lround(test_fraction * n_images));
  Split s;
  s.val.assign(order.begin(), order.begin() + nv);
  s.test.assign(order.begin() + nv, order.begin() + nv + nt);
  s.train.assign(order.begin() + nv + nt, order.end());
  std::sort(s.val.begin(), s.val.end());
  std::sort(s.test.begin(), s.test.end());
  std::sort(s.train.begin(), s.train.end());
  return s;
}

StreamManifest make_manifest(const std::vector<StepDataset>& steps, const ClassSchedule& schedule,
                             const StreamConfig& config, std::string split_rule) {
  StreamManifest m;
  m.config = config;
  m.schedule = schedule;
  m.split_rule = std::move(split_rule);
  for (const auto& s : steps) m.step_image_ids.push_back(s.image_ids());
  return m;
}

std::string manifest_to_json(const StreamManifest& m) {
  nlohmann::json j;
  j["mode"] = to_string(m.config.mode);
  j["seed"] = m.config.seed;
  j["subsample_fraction"] = m.config.subsample_fraction;
  j["images_per_increment"] = m.config.images_per_increment;
  j["disjoint_base_fraction"] = m.config.disjoint_base_fraction;
  j["split_rule"] = m.split_rule;
  j["steps"] = nlohmann::json::array();
  for (int t = 1; t <= m.schedule.num_steps(); ++t) {
    const auto cur = m.schedule.current(t);
    const auto known = m.schedule.known(t);
    nlohmann::json s;
    s["step"] = t;
    s["current_classes"] = t == 1 ? m.schedule.base : m.schedule.increments[static_cast<std::size_t>(t - 2)];
    s["known_classes"] = std::vector<int>(known.begin(), known.end());
    s["image_ids"] = static_cast<std::size_t>(t - 1) < m.step_image_ids.size()
                         ? m.step_image_ids[static_cast<std::size_t>(t - 1)]
                         : std::vector<int>{};
    j["steps"].push_back(s);
  }
  return j.dump(2);
}

StreamManifest manifest_from_json(const std::string& text) {
  const auto j = nlohmann::json::parse(text);
  StreamManifest m;
  m.config.mode = stream_mode_from_string(j.at("mode").get<std::string>());
  m.config.seed = j.at("seed").get<std::uint64_t>();
  m.config.subsample_fraction = j.at("subsample_fraction").get<double>();
  m.config.images_per_increment = j.at("images_per_increment").get<int>();
  m.config.disjoint_base_fraction = j.at("disjoint_base_fraction").get<double>();
  m.split_rule = j.at("split_rule").get<std::string>();
  for (const auto& s : j.at("steps")) {
    auto cur = s.at("current_classes").get<std::vector<int>>();
    if (s.at("step").get<int>() == 1)
      m.schedule.base = std::move(cur);
    else
      m.schedule.increments.push_back(std::move(cur));
    m.step_image_ids.push_back(s.at("image_ids").get<std::vector<int>>());
  }
  return m;
}

}  // namespace futcr::stream
