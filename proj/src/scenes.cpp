#include "futcr/scenes.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <stdexcept>

#include "json.hpp"

#include "futcr/binary_io.hpp"
#include "futcr/rng.hpp"

namespace futcr::scenes {

using panoptic::PanopticMap;

void SceneSpec::validate() const {
  label_space.validate();
  if (height <= 0 || width <= 0) throw std::invalid_argument("scene canvas must be positive");
  if (static_cast<int>(appearance.size()) != label_space.num_classes)
    throw std::invalid_argument("appearance table must cover every class");
  const int side = std::min(height, width);
  for (int c = 1; c <= label_space.num_classes; ++c) {
    const auto& a = appearance[static_cast<std::size_t>(c - 1)];
    if (label_space.thing(c) && (a.size_min <= 0 || a.size_max < a.size_min || a.size_max > side))
      throw std::invalid_argument("class " + std::to_string(c) + ": size range must be positive and fit the canvas");
    if (a.weight <= 0.0) throw std::invalid_argument("class " + std::to_string(c) + ": sampling weight must be positive");
  }
  for (int a = 0; a < label_space.num_classes; ++a)
    for (int b = a + 1; b < label_space.num_classes; ++b) {
      double d = 0.0;
      for (int ch = 0; ch < 3; ++ch)
        d = std::max(d, std::abs(appearance[static_cast<std::size_t>(a)].color[ch] -
                                 appearance[static_cast<std::size_t>(b)].color[ch]));
      if (d < min_color_margin)
        throw std::invalid_argument("classes " + std::to_string(a + 1) + " and " + std::to_string(b + 1) +
                                    " have color means closer than the margin");
    }
  if (min_things < 0 || max_things < min_things) throw std::invalid_argument("bad thing count range");
  if (min_stuff_regions < 0 || max_stuff_regions < min_stuff_regions) throw std::invalid_argument("bad stuff count range");
  if (min_stuff_regions > 0 && stuff_classes().empty()) throw std::invalid_argument("stuff regions requested but no stuff classes");
  if (min_things > 0 && thing_classes().empty()) throw std::invalid_argument("things requested but no thing classes");
  if (max_instances_per_class < 1) throw std::invalid_argument("max_instances_per_class must be >= 1");
}

std::vector<int> SceneSpec::thing_classes() const {
  std::vector<int> v;
  for (int c = 1; c <= label_space.num_classes; ++c)
    if (label_space.thing(c)) v.push_back(c);
  return v;
}

std::vector<int> SceneSpec::stuff_classes() const {
  std::vector<int> v;
  for (int c = 1; c <= label_space.num_classes; ++c)
    if (!label_space.thing(c)) v.push_back(c);
  return v;
}

SceneSpec default_spec(int num_classes, int num_stuff, int height, int width) {
  static const double palette[8][3] = {
      {0.55, 0.35, 0.15}, {0.30, 0.65, 0.30}, {0.45, 0.60, 0.90}, {0.90, 0.15, 0.15},
      {0.95, 0.85, 0.15}, {0.15, 0.20, 0.80}, {0.85, 0.30, 0.85}, {0.10, 0.90, 0.80},
  };
  SceneSpec spec;
  spec.height = height;
  spec.width = width;
  spec.label_space.num_classes = num_classes;
  const int side = std::min(height, width);
  for (int c = 1; c <= num_classes; ++c) {
    const bool thing = c > num_stuff;
    spec.label_space.is_thing.push_back(thing);
    spec.label_space.names.push_back((thing ? "thing" : "stuff") + std::to_string(c));
    ClassAppearance a;
    if (num_classes <= 8) {
      std::copy(palette[c - 1], palette[c - 1] + 3, a.color);
    } else {
      // hue wheel with three brightness rings
      const double h = std::fmod((c - 1) * 0.61803398875, 1.0) * 6.0;
      const double v = 0.55 + 0.2 * ((c - 1) % 3);
      const double x = v * (1.0 - std::abs(std::fmod(h, 2.0) - 1.0));
      const int sector = static_cast<int>(h);
      const double rgb[6][3] = {{v, x, 0}, {x, v, 0}, {0, v, x}, {0, x, v}, {x, 0, v}, {v, 0, x}};
      std::copy(rgb[sector % 6], rgb[sector % 6] + 3, a.color);
    }
    const int k = (c - num_stuff - 1) % 3;
    a.shape = k == 0 ? Shape::Disk : (k == 1 ? Shape::Rectangle : Shape::Triangle);
    a.size_min = std::max(4, side / 8);
    a.size_max = std::max(a.size_min, side * 3 / 8);
    spec.appearance.push_back(a);
  }
  if (num_classes > 8) spec.min_color_margin = 0.0;
  spec.max_things = std::min(spec.max_things, 2 * (num_classes - num_stuff));
  spec.max_stuff_regions = std::min(spec.max_stuff_regions, num_stuff);
  spec.min_stuff_regions = std::min(spec.min_stuff_regions, num_stuff);
  if (num_stuff == num_classes) spec.min_things = spec.max_things = 0;
  return spec;
}

std::uint64_t sample_seed(std::uint64_t dataset_seed, int index) {
  return derive_seed(dataset_seed, {0x5CE9E, static_cast<std::uint64_t>(index)});
}

namespace {

int weighted_pick(Rng& rng, const std::vector<int>& classes, const SceneSpec& spec) {
  double total = 0.0;
  for (int c : classes) total += spec.appearance[static_cast<std::size_t>(c - 1)].weight;
  double u = rng.uniform() * total;
  for (int c : classes) {
    u -= spec.appearance[static_cast<std::size_t>(c - 1)].weight;
    if (u < 0.0) return c;
  }
  return classes.back();
}

struct Placed {
  int class_id;
  Shape shape;
  double cy, cx, size, aspect;
};

bool inside(const Placed& p, double y, double x) {
  const double half = p.size / 2.0;
  switch (p.shape) {
    case Shape::Disk: {
      const double dy = y - p.cy, dx = x - p.cx;
      return dy * dy + dx * dx <= half * half;
    }
    case Shape::Rectangle:
      return std::abs(y - p.cy) <= half * p.aspect && std::abs(x - p.cx) <= half;
    case Shape::Triangle: {
      // apex up; base at cy+half
      const double top = p.cy - half, bottom = p.cy + half;
      if (y < top || y > bottom) return false;
      const double frac = (y - top) / (bottom - top);
      return std::abs(x - p.cx) <= frac * half;
    }
  }
  return false;
}

}  // namespace

SceneSample generate_scene(const SceneSpec& spec, std::uint64_t seed, const std::vector<int>& required) {
  spec.validate();
  Rng rng(seed);
  const int H = spec.height, W = spec.width;
  const auto stuff = spec.stuff_classes();
  const auto things = spec.thing_classes();

  std::vector<int> req_stuff, req_things;
  for (int c : required) {
    if (!spec.label_space.contains(c)) throw std::invalid_argument("required class outside label space");
    (spec.label_space.thing(c) ? req_things : req_stuff).push_back(c);
  }
  std::sort(req_stuff.begin(), req_stuff.end());
  req_stuff.erase(std::unique(req_stuff.begin(), req_stuff.end()), req_stuff.end());
  std::sort(req_things.begin(), req_things.end());
  req_things.erase(std::unique(req_things.begin(), req_things.end()), req_things.end());
  if (static_cast<int>(req_stuff.size()) > spec.max_stuff_regions ||
      static_cast<int>(req_things.size()) > spec.max_things)
    throw std::invalid_argument("required classes exceed per-image capacity");

  for (int attempt = 0; attempt < spec.max_retries; ++attempt) {
    PanopticMap ann(H, W);
    std::vector<int> region(static_cast<std::size_t>(H * W), -1);  // painted region index
    std::vector<double> region_offset;                              // 3 per region

    // stuff layers: first fills the canvas, later ones fill a random half-plane
    std::vector<int> stuff_list = req_stuff;
    const int n_stuff = std::max(static_cast<int>(stuff_list.size()),
                                 rng.between(spec.min_stuff_regions, spec.max_stuff_regions));
    while (static_cast<int>(stuff_list.size()) < n_stuff) {
      std::vector<int> avail;
      for (int c : stuff)
        if (std::find(stuff_list.begin(), stuff_list.end(), c) == stuff_list.end()) avail.push_back(c);
      if (avail.empty()) break;
      stuff_list.push_back(weighted_pick(rng, avail, spec));
    }
    rng.shuffle(stuff_list);
    for (std::size_t s = 0; s < stuff_list.size(); ++s) {
      const int ridx = static_cast<int>(region_offset.size() / 3);
      const double jit = spec.appearance[static_cast<std::size_t>(stuff_list[s] - 1)].jitter;
      for (int ch = 0; ch < 3; ++ch) region_offset.push_back(rng.uniform(-jit, jit));
      const double th = rng.uniform(0.0, 2.0 * 3.14159265358979323846);
      const double y0 = rng.uniform(0.25, 0.75) * H, x0 = rng.uniform(0.25, 0.75) * W;
      for (int r = 0; r < H; ++r)
        for (int c = 0; c < W; ++c) {
          const bool covered = s == 0 || (r + 0.5 - y0) * std::sin(th) + (c + 0.5 - x0) * std::cos(th) > 0.0;
          if (!covered) continue;
          const auto i = static_cast<std::size_t>(r * W + c);
          ann.semantic[i] = stuff_list[s];
          ann.instance[i] = 0;
          region[i] = ridx;
        }
    }

    // things
    std::vector<int> thing_list = req_things;
    const int n_things = std::max(static_cast<int>(thing_list.size()), rng.between(spec.min_things, spec.max_things));
    while (static_cast<int>(thing_list.size()) < n_things) {
      std::vector<int> avail;
      for (int c : things)
        if (std::count(thing_list.begin(), thing_list.end(), c) < spec.max_instances_per_class) avail.push_back(c);
      if (avail.empty()) break;
      thing_list.push_back(weighted_pick(rng, avail, spec));
    }
    rng.shuffle(thing_list);  // occlusion order: later is in front
    std::vector<Placed> placed;
    std::vector<int> inst_region;
    std::map<int, int> next_instance;
    std::vector<std::pair<int, int>> inst_ids;  // (class, instance)
    for (int c : thing_list) {
      const auto& a = spec.appearance[static_cast<std::size_t>(c - 1)];
      Placed p;
      p.class_id = c;
      p.shape = a.shape;
      p.size = rng.between(a.size_min, a.size_max);
      p.aspect = rng.uniform(0.6, 1.0);
      const double half = p.size / 2.0;
      p.cy = rng.uniform(half, H - half);
      p.cx = rng.uniform(half, W - half);
      const int ridx = static_cast<int>(region_offset.size() / 3);
      for (int ch = 0; ch < 3; ++ch) region_offset.push_back(rng.uniform(-a.jitter, a.jitter));
      const int inst = ++next_instance[c];
      inst_ids.emplace_back(c, inst);
      for (int r = 0; r < H; ++r)
        for (int col = 0; col < W; ++col)
          if (inside(p, r + 0.5, col + 0.5)) {
            const auto i = static_cast<std::size_t>(r * W + col);
            ann.semantic[i] = c;
            ann.instance[i] = inst;
            region[i] = ridx;
          }
      placed.push_back(p);
      inst_region.push_back(ridx);
    }

    // visibility check
    std::map<std::pair<int, int>, int> visible;
    for (int i = 0; i < H * W; ++i) {
      const auto c = ann.semantic[static_cast<std::size_t>(i)];
      if (c != 0) ++visible[{c, ann.instance[static_cast<std::size_t>(i)]}];
    }
    bool ok = true;
    for (const auto& key : inst_ids)
      if (visible[key] < spec.min_visible_pixels) ok = false;
    for (int c : req_stuff)
      if (visible[{c, 0}] < spec.min_visible_pixels) ok = false;
    if (!ok) continue;

    SceneSample s;
    s.height = H;
    s.width = W;
    s.seed = seed;
    s.image.assign(static_cast<std::size_t>(3 * H * W), 0.0);
    const double fy = rng.uniform(0.2, 0.6), fx = rng.uniform(0.2, 0.6), ph = rng.uniform(0.0, 6.28);
    for (int r = 0; r < H; ++r)
      for (int c = 0; c < W; ++c) {
        const auto i = static_cast<std::size_t>(r * W + c);
        const int cls = ann.semantic[i];
        for (int ch = 0; ch < 3; ++ch) {
          double v = 0.0;
          if (cls != 0) {
            const auto& a = spec.appearance[static_cast<std::size_t>(cls - 1)];
            v = a.color[ch] + region_offset[static_cast<std::size_t>(3 * region[i] + ch)] + a.noise * rng.normal();
            if (!spec.label_space.thing(cls)) v += 0.02 * std::sin(fy * r + fx * c + ph);
          }
          s.image[static_cast<std::size_t>(ch) * static_cast<std::size_t>(H * W) + i] = std::clamp(v, 0.0, 1.0);
        }
      }
    s.annotation = std::move(ann);
    s.present_classes = s.annotation.classes();
    return s;
  }
  throw std::runtime_error("scene generation failed: could not place required instances after " +
                           std::to_string(spec.max_retries) + " retries");
}

std::vector<SceneSample> generate_dataset(const SceneSpec& spec, int n_images, std::uint64_t seed,
                                          const std::map<int, int>& presence_plan) {
  if (n_images < 1) throw std::invalid_argument("n_images must be >= 1");
  spec.validate();
  std::vector<std::vector<int>> required(static_cast<std::size_t>(n_images));
  std::vector<int> forced_things(static_cast<std::size_t>(n_images), 0), forced_stuff(static_cast<std::size_t>(n_images), 0);
  Rng plan_rng(derive_seed(seed, {0x91A7}));
  for (const auto& [c, count] : presence_plan) {
    if (!spec.label_space.contains(c)) throw std::invalid_argument("presence plan names unknown class " + std::to_string(c));
    const bool thing = spec.label_space.thing(c);
    const int cap = thing ? spec.max_things : spec.max_stuff_regions;
    std::vector<int> order(static_cast<std::size_t>(n_images));
    for (int i = 0; i < n_images; ++i) order[static_cast<std::size_t>(i)] = i;
    plan_rng.shuffle(order);
    int assigned = 0;
    for (int i : order) {
      if (assigned >= count) break;
      auto& used = thing ? forced_things[static_cast<std::size_t>(i)] : forced_stuff[static_cast<std::size_t>(i)];
      if (used >= cap) continue;
      ++used;
      required[static_cast<std::size_t>(i)].push_back(c);
      ++assigned;
    }
    if (assigned < count)
      throw std::invalid_argument("presence plan infeasible for class " + std::to_string(c) + ": needs " +
                                  std::to_string(count) + " images, capacity allows " + std::to_string(assigned));
  }
  std::vector<SceneSample> out(static_cast<std::size_t>(n_images));
#pragma omp parallel for schedule(dynamic)
  for (int i = 0; i < n_images; ++i)
    out[static_cast<std::size_t>(i)] = generate_scene(spec, sample_seed(seed, i), required[static_cast<std::size_t>(i)]);
  return out;
}

namespace {
constexpr char kSampleMagic[4] = {'S', 'S', 'M', 'P'};
}

void save_dataset(const std::filesystem::path& dir, const std::vector<SceneSample>& samples,
                  const panoptic::LabelSpace& space) {
  std::filesystem::create_directories(dir);
  nlohmann::json manifest;
  manifest["num_classes"] = space.num_classes;
  manifest["is_thing"] = space.is_thing;
  manifest["names"] = space.names;
  manifest["samples"] = nlohmann::json::array();
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const auto& s = samples[i];
    char name[32];
    std::snprintf(name, sizeof name, "sample_%05zu.bin", i);
    std::ofstream os(dir / name, std::ios::binary);
    os.write(kSampleMagic, 4);
    io::put_u32(os, 1);
    io::put_u64(os, s.seed);
    io::put_u32(os, static_cast<std::uint32_t>(s.height));
    io::put_u32(os, static_cast<std::uint32_t>(s.width));
    io::put_f64s(os, s.image);
    panoptic::write_map(os, s.annotation, space);
    if (!os) throw std::runtime_error("failed writing sample " + std::string(name));
    manifest["samples"].push_back({{"id", i}, {"file", name}, {"seed", s.seed},
                                   {"present_classes", std::vector<int>(s.present_classes.begin(), s.present_classes.end())}});
  }
  std::ofstream(dir / "manifest.json") << manifest.dump(2) << '\n';
}

std::vector<SceneSample> load_dataset(const std::filesystem::path& dir) {
  std::ifstream ms(dir / "manifest.json");
  if (!ms) throw std::runtime_error("missing dataset manifest in " + dir.string());
  const auto manifest = nlohmann::json::parse(ms);
  std::vector<SceneSample> out;
  for (const auto& entry : manifest.at("samples")) {
    std::ifstream is(dir / entry.at("file").get<std::string>(), std::ios::binary);
    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, kSampleMagic, 4) != 0) throw std::runtime_error("bad sample file");
    if (io::get_u32(is) != 1) throw std::runtime_error("unsupported sample version");
    SceneSample s;
    s.seed = io::get_u64(is);
    s.height = static_cast<int>(io::get_u32(is));
    s.width = static_cast<int>(io::get_u32(is));
    s.image = io::get_f64s(is);
    s.annotation = panoptic::read_map(is).first;
    s.present_classes = s.annotation.classes();
    out.push_back(std::move(s));
  }
  return out;
}

}  // namespace futcr::scenes
