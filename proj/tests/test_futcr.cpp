#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>

#include "doctest.h"
#include "futcr/futcr.hpp"
#include "futcr/scenes.hpp"
#include "futcr/stream.hpp"
#include "support/instances.hpp"
#include "support/oracles.hpp"

using namespace futcr;
using namespace futcr::future;
using namespace futcr::testing;
using doctest::Approx;

namespace {

double cosine(const double* a, const double* b, int n) {
  double ab = 0.0, aa = 0.0, bb = 0.0;
  for (int i = 0; i < n; ++i) {
    ab += a[i] * b[i];
    aa += a[i] * a[i];
    bb += b[i] * b[i];
  }
  return ab / std::sqrt(aa * bb);
}

// Output with a single feature-resolution geometry and no masks; enough for pixel sampling.
seg::ModelOutput blank_output(int h, int w, int factor) {
  seg::ModelOutput o;
  o.height = h;
  o.width = w;
  o.feat_h = h / factor;
  o.feat_w = w / factor;
  return o;
}

struct ToyBatch {
  std::vector<scenes::SceneSample> scenes;
  std::vector<panoptic::PanopticMap> masked;
  panoptic::LabelSpace space;

  seg::TrainBatch batch() const {
    seg::TrainBatch b;
    for (std::size_t i = 0; i < scenes.size(); ++i) {
      b.images.emplace_back(scenes[i].image);
      b.annotations.push_back(&masked[i]);
    }
    return b;
  }
};

ToyBatch toy_batch(const seg::ModelConfig& cfg, const panoptic::ClassSet& current, int n, std::uint64_t seed) {
  ToyBatch t;
  const auto spec = scenes::default_spec(cfg.num_classes, 2, cfg.image_height, cfg.image_width);
  t.space = spec.label_space;
  for (int i = 0; i < n; ++i) {
    t.scenes.push_back(scenes::generate_scene(spec, derive_seed(seed, {static_cast<std::uint64_t>(i)})));
    t.masked.push_back(stream::mask_labels(t.scenes.back().annotation, current));
  }
  return t;
}

}  // namespace

TEST_CASE("config validation") {
  FutcrConfig c;
  CHECK_NOTHROW(c.validate());
  auto bad = c;
  bad.temperature = 0.0;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  bad = c;
  bad.tau_mask = 1.0;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  bad = c;
  bad.majority_fraction = 0.4;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  bad = c;
  bad.pixels_per_region = 0;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
}

TEST_CASE("region prototypes pool the thresholded support") {
  // C = 2, P = 3, features stored channel-major
  const std::vector<double> f{1.0, 0.0, 7.0, 0.0, 1.0, 7.0};
  auto r = region_prototype(f, 2, std::vector<double>{0.9, 0.8, 0.1}, 0.5);
  CHECK(r.support == std::vector<int>{0, 1});
  CHECK(r.prototype == std::vector<double>{0.5, 0.5});
  r = region_prototype(f, 2, std::vector<double>{0.6, 0.4, 0.5}, 0.5);
  CHECK(r.support == std::vector<int>{0});
  CHECK(r.prototype == std::vector<double>{1.0, 0.0});
  const std::vector<double> constant{2.5, 2.5, 2.5, -1.0, -1.0, -1.0};
  CHECK(region_prototype(constant, 2, std::vector<double>{0.7, 0.7, 0.7}, 0.5).prototype == std::vector<double>{2.5, -1.0});
  CHECK_THROWS_AS(region_prototype(f, 2, std::vector<double>{0.1, 0.2, 0.3}, 0.5), std::invalid_argument);
}

TEST_CASE("discovery selects confident, large, mostly unlabeled queries") {
  FutcrConfig cfg;
  const int h = 32, w = 32, f = 4;
  seg::ModelOutput o = blank_output(h, w, f);
  o.num_queries = 2;
  o.masks.assign(static_cast<std::size_t>(2 * h * w), 0.0);
  panoptic::PanopticMap ann(h, w);
  // query 0: 0.9 over rows 0..19 (50 cells), all unlabeled
  // query 1: 0.9 over rows 12..31 (50 cells); class 1 labels rows 12..23, i.e. 60% of its support
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const int i = y * w + x;
      if (y < 20 && x < 20) o.masks[static_cast<std::size_t>(i)] = 0.9;
      if (y >= 12 && x < 20) o.masks[static_cast<std::size_t>(h * w + i)] = 0.9;
      if (y >= 12 && y < 24) ann.semantic[static_cast<std::size_t>(i)] = 1;
    }
  const auto regions = discover_future_regions({o}, {&ann}, {1}, cfg);
  REQUIRE(regions.size() == 1);
  CHECK(regions[0].query == 0);
  CHECK(regions[0].support.size() == 25);
  // with class 1 no longer known its pixels count as unlabeled
  CHECK(discover_future_regions({o}, {&ann}, {2}, cfg).size() == 2);
}

TEST_CASE("discovery matches a pixel-counting oracle") {
  FutcrConfig cfg;
  cfg.min_region_pixels = 6;
  const auto space = scenes::default_spec(5, 2, 32, 32).label_space;
  std::size_t selected = 0;
  for (std::uint64_t trial = 0; trial < 100; ++trial) {
    Rng rng(derive_seed(71, {trial}));
    std::vector<seg::ModelOutput> outs;
    std::vector<panoptic::PanopticMap> maps;
    for (int b = 0; b < 2; ++b) {
      outs.push_back(synthetic_output(rng, 32, 32, 4, 16));
      maps.push_back(random_rect_map(rng, 32, 32, 5, 5, space));
    }
    std::vector<const panoptic::PanopticMap*> anns{&maps[0], &maps[1]};
    const panoptic::ClassSet known{1, 2, 3};
    const auto regions = discover_future_regions(outs, anns, known, cfg);
    std::vector<std::pair<int, int>> got;
    for (const auto& r : regions) got.emplace_back(r.image, r.query);
    CHECK(got == oracle_discovery(outs, anns, known, cfg));
    selected += got.size();
  }
  MESSAGE("selected " << selected << " of 3200 queries");
  CHECK(selected > 100);
  CHECK(selected < 3100);
}

TEST_CASE("anchor sampling") {
  Rng rng(5);
  std::vector<int> support(70);
  std::iota(support.begin(), support.end(), 100);
  auto a = sample_anchors(support, 70, rng);
  std::sort(a.begin(), a.end());
  CHECK(a == support);

  a = sample_anchors({4, 9, 11}, 70, rng);
  CHECK(a.size() == 70);
  for (int v : a) CHECK((v == 4 || v == 9 || v == 11));

  std::vector<int> big(200);
  std::iota(big.begin(), big.end(), 0);
  std::vector<int> hits(200, 0);
  const int reps = 10000;
  for (int r = 0; r < reps; ++r) {
    Rng local(derive_seed(9, {static_cast<std::uint64_t>(r)}));
    const auto s = sample_anchors(big, 70, local);
    CHECK(std::set<int>(s.begin(), s.end()).size() == 70);
    for (int v : s) ++hits[static_cast<std::size_t>(v)];
  }
  const double mean = std::accumulate(hits.begin(), hits.end(), 0.0) / (200.0 * reps);
  CHECK(std::abs(mean - 0.35) <= 0.02);
  for (int hcount : hits) CHECK(std::abs(hcount / static_cast<double>(reps) - 0.35) <= 0.02);

  Rng r1(3), r2(3);
  CHECK(sample_anchors(big, 70, r1) == sample_anchors(big, 70, r2));
  CHECK_THROWS_AS(sample_anchors({}, 5, rng), std::invalid_argument);
}

TEST_CASE("region contrast analytic values") {
  const std::vector<double> anchors{0.3, -2.0, 1.0, 4.0, 0.5, 0.5};
  const std::vector<int> tags{0, 0, 0};
  CHECK(region_contrast_loss(anchors, tags, std::vector<double>{1.0, 2.0}, 2, 0.07).value == 0.0);

  // equal cosine to both prototypes
  const std::vector<int> t0{0};
  CHECK(region_contrast_loss(std::vector<double>{1.0, 1.0}, t0, std::vector<double>{1.0, 0.0, 0.0, 1.0}, 2, 0.07).value ==
        Approx(std::log(2.0)).epsilon(1e-12));

  // cosine 1 to the positive, 0 to the negative
  const double expect = std::log1p(std::exp(-1.0 / 0.07));
  const auto r = region_contrast_loss(std::vector<double>{2.0, 0.0}, t0, std::vector<double>{1.0, 0.0, 0.0, 3.0}, 2, 0.07);
  CHECK(r.value == Approx(expect).epsilon(1e-9));
  CHECK(expect == Approx(6.2e-7).epsilon(0.02));

  CHECK_THROWS_AS(region_contrast_loss(std::vector<double>{0.0, 0.0}, t0, std::vector<double>{1.0, 0.0}, 2, 0.07),
                  std::invalid_argument);
  CHECK_THROWS_AS(region_contrast_loss(std::vector<double>{1.0, 0.0}, t0, std::vector<double>{0.0, 0.0}, 2, 0.07),
                  std::invalid_argument);
}

TEST_CASE("region contrast is non-negative and scale invariant") {
  for (std::uint64_t s = 0; s < 50; ++s) {
    Rng rng(s);
    const int C = 8, R = 3, N = 12;
    auto anchors = random_vector(rng, static_cast<std::size_t>(N * C));
    auto protos = random_vector(rng, static_cast<std::size_t>(R * C));
    std::vector<int> tags(static_cast<std::size_t>(N));
    for (auto& t : tags) t = static_cast<int>(rng.below(R));
    const double base = region_contrast_loss(anchors, tags, protos, C, 0.07).value;
    CHECK(base >= 0.0);
    const int n = static_cast<int>(rng.below(N)), k = static_cast<int>(rng.below(R));
    const double alpha = rng.uniform(0.1, 10.0);
    for (int c = 0; c < C; ++c) {
      anchors[static_cast<std::size_t>(n * C + c)] *= alpha;
      protos[static_cast<std::size_t>(k * C + c)] *= alpha;
    }
    CHECK(region_contrast_loss(anchors, tags, protos, C, 0.07).value == Approx(base).epsilon(1e-12));
  }
}

TEST_CASE("known-class prototypes are unit classifier rows") {
  seg::ModelConfig cfg = tiny_model_config();
  cfg.feature_dim = cfg.query_dim = 2;
  seg::QueryModel model(cfg, 1);
  auto W = model.block(model.layout().classifier);
  W[0] = 3.0;
  W[1] = 4.0;
  W[2] = 0.6;
  W[3] = 0.8;
  const auto p = known_class_prototypes(model, {1, 2});
  CHECK(p.at(1)[0] == Approx(0.6));
  CHECK(p.at(1)[1] == Approx(0.8));
  CHECK(p.at(2)[0] == Approx(0.6).epsilon(1e-15));
  CHECK(p.at(2)[1] == Approx(0.8).epsilon(1e-15));
  CHECK(p.count(3) == 0);

  seg::QueryModel big(tiny_model_config(), 4);
  const auto q = known_class_prototypes(big, {1, 2, 3, 4});
  CHECK(q.size() == 4);
  for (const auto& [c, v] : q) CHECK(std::sqrt(std::inner_product(v.begin(), v.end(), v.begin(), 0.0)) == Approx(1.0).epsilon(1e-6));

  W[0] = W[1] = 0.0;
  CHECK_THROWS_AS(known_class_prototypes(model, {1}), std::invalid_argument);
  CHECK_THROWS_AS(known_class_prototypes(model, {}), std::invalid_argument);
}

TEST_CASE("unlabeled pixel sampling") {
  const std::vector<seg::ModelOutput> outs{blank_output(16, 16, 4)};
  panoptic::PanopticMap full(16, 16);
  std::fill(full.semantic.begin(), full.semantic.end(), 2);
  Rng rng(1);
  CHECK(sample_unlabeled_pixels(outs, {&full}, {2}, 8, rng).empty());

  panoptic::PanopticMap empty(16, 16);
  const auto four = sample_unlabeled_pixels(outs, {&empty}, {2}, 4, rng);
  CHECK(four.size() == 4);
  std::set<int> distinct;
  for (const auto& p : four) distinct.insert(p.pixel);
  CHECK(distinct.size() == 4);

  for (std::uint64_t s = 0; s < 20; ++s) {
    Rng r(s);
    panoptic::PanopticMap half(16, 16);
    for (int y = 0; y < 16; ++y)
      for (int x = 0; x < 8; ++x) half.semantic[static_cast<std::size_t>(y * 16 + x)] = 2;
    for (const auto& p : sample_unlabeled_pixels(outs, {&half}, {2}, 6, r)) {
      const int cy = p.pixel / 4, cx = p.pixel % 4;
      int labeled = 0;
      for (int dy = 0; dy < 4; ++dy)
        for (int dx = 0; dx < 4; ++dx) labeled += half.semantic[static_cast<std::size_t>((cy * 4 + dy) * 16 + cx * 4 + dx)] != 0;
      CHECK(labeled < 8);
    }
  }
}

TEST_CASE("repulsion analytic values") {
  const std::vector<double> w{1.0, 0.0, 0.0, 1.0};
  CHECK(repulsion_loss(std::vector<double>{-1.0, -1.0}, w, 2, 0.0).value == 0.0);
  CHECK(repulsion_loss(std::vector<double>{0.0, 5.0}, w, 2, 0.0).value == Approx(1.0).epsilon(1e-15));
  // max sims 0.3 and -0.2 against the single row (1, 0)
  const std::vector<double> z{0.3, std::sqrt(1 - 0.09), -0.2, std::sqrt(1 - 0.04)};
  CHECK(repulsion_loss(z, std::vector<double>{1.0, 0.0}, 2, 0.0).value == Approx(0.15).epsilon(1e-12));
  CHECK(repulsion_loss({}, w, 2, 0.0).value == 0.0);
  CHECK_THROWS_AS(repulsion_loss(std::vector<double>{0.0, 0.0}, w, 2, 0.0), std::invalid_argument);
  // ties go to the lowest row
  CHECK(repulsion_loss(std::vector<double>{1.0, 1.0}, w, 2, 0.0).nearest == std::vector<int>{0});
}

TEST_CASE("repulsion bounds, scale and argmax invariance") {
  for (std::uint64_t s = 0; s < 50; ++s) {
    Rng rng(s);
    const int C = 8, K = 4, U = 10;
    auto z = random_vector(rng, static_cast<std::size_t>(U * C));
    auto w = random_vector(rng, static_cast<std::size_t>(K * C));
    const double gamma = rng.uniform(-1.0, 1.0);
    const auto base = repulsion_loss(z, w, C, gamma);
    CHECK(base.value >= 0.0);
    CHECK(base.value <= 1.0 - gamma + 1e-12);
    for (auto& v : z) v *= rng.uniform(0.1, 10.0) > 0 ? 3.7 : 1.0;
    const double a = rng.uniform(0.1, 10.0);
    for (auto& v : w) v *= a;
    const auto scaled = repulsion_loss(z, w, C, gamma);
    CHECK(scaled.value == Approx(base.value).epsilon(1e-12));
    CHECK(scaled.nearest == base.nearest);
  }
}

TEST_CASE("a gradient step on repulsion lowers the max cosine") {
  for (std::uint64_t s = 0; s < 50; ++s) {
    Rng rng(s);
    const int C = 8, K = 4;
    auto w = random_vector(rng, static_cast<std::size_t>(K * C));
    auto z = random_vector(rng, static_cast<std::size_t>(C));
    auto max_cos = [&](const std::vector<double>& v) {
      double m = -2.0;
      for (int k = 0; k < K; ++k) m = std::max(m, cosine(v.data(), w.data() + k * C, C));
      return m;
    };
    const double before = max_cos(z);
    const double gamma = before - 0.5;
    const auto r = repulsion_loss(z, w, C, gamma);
    REQUIRE(r.value > 0.0);
    for (int c = 0; c < C; ++c) z[static_cast<std::size_t>(c)] -= 1e-2 * r.grad_features[static_cast<std::size_t>(c)];
    CHECK(max_cos(z) < before);
  }
}

TEST_CASE("total loss") {
  CHECK(total_loss(1.7, 0.4, 0.2, 0.0, 0.0) == 1.7);
  CHECK(total_loss(1.0, 0.4, 0.2, 0.5, 0.5) == Approx(1.3).epsilon(1e-15));
  Rng rng(2);
  for (int i = 0; i < 100; ++i) {
    const double p = rng.uniform(), r = rng.uniform(), q = rng.uniform(), a = rng.uniform(), b = rng.uniform();
    CHECK(std::abs(total_loss(p, r, q, a, b) - (b * q + (a * r + p))) <= 1e-12);
  }
  CHECK_THROWS_AS(total_loss(NAN, 0, 0, 1, 1), std::invalid_argument);
  CHECK_THROWS_AS(total_loss(1, INFINITY, 0, 1, 1), std::invalid_argument);
}

TEST_CASE("auxiliary loss values") {
  // logits strongly aligned with labels and a balanced batch
  const std::vector<int> labels{0, 1};
  const auto a = aux_loss(std::vector<double>{40.0, 0.0, 0.0, 40.0}, labels, 2, 1.0);
  CHECK(a.value == Approx(0.0).epsilon(1e-12));
  CHECK(a.value < 1e-12);
  const auto b = aux_loss(std::vector<double>{60.0, 0.0, 60.0, 0.0}, std::vector<int>{0, 0}, 2, 1.0);
  CHECK(b.kl == Approx(std::log(2.0)).epsilon(1e-12));
  const auto u = aux_loss(std::vector<double>{0.3, 0.3, -1.0, -1.0}, labels, 2, 1.0);
  CHECK(u.kl == Approx(0.0).epsilon(1e-15));
  CHECK(u.ce == Approx(std::log(2.0)).epsilon(1e-12));
  CHECK_THROWS_AS(aux_loss(std::vector<double>{1.0}, std::vector<int>{0}, 1, 1.0), std::invalid_argument);
  Rng rng(8);
  for (int i = 0; i < 50; ++i) {
    const auto logits = random_vector(rng, 12, 3.0);
    CHECK(aux_loss(logits, std::vector<int>{0, 1, 2, 0}, 3, 0.5).kl >= 0.0);
  }
}

TEST_CASE("spherical k-means") {
  const int C = 3;
  std::vector<double> pts{1.0, 0.2, 0.0, 0.5, 0.0, 0.4, 2.0, 1.0, 1.0};
  const auto one = spherical_kmeans(pts, C, 1, 4);
  std::vector<double> mean(C, 0.0);
  for (int i = 0; i < 3; ++i) {
    const double n = std::sqrt(pts[i * 3] * pts[i * 3] + pts[i * 3 + 1] * pts[i * 3 + 1] + pts[i * 3 + 2] * pts[i * 3 + 2]);
    for (int c = 0; c < C; ++c) mean[static_cast<std::size_t>(c)] += pts[static_cast<std::size_t>(i * C + c)] / n;
  }
  const double mn = std::sqrt(std::inner_product(mean.begin(), mean.end(), mean.begin(), 0.0));
  for (int c = 0; c < C; ++c) CHECK(one.centers[static_cast<std::size_t>(c)] == Approx(mean[static_cast<std::size_t>(c)] / mn).epsilon(1e-12));

  const std::vector<double> same{0.0, 3.0, 4.0, 0.0, 3.0, 4.0, 0.0, 3.0, 4.0, 0.0, 3.0, 4.0};
  const auto s = spherical_kmeans(same, C, 1, 2);
  CHECK(s.centers[1] == Approx(0.6));
  CHECK(s.centers[2] == Approx(0.8));
  CHECK(s.labels == std::vector<int>{0, 0, 0, 0});

  // two antipodal tight clusters against the best 2-partition found exhaustively
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng rng(seed);
    const int n = 6 + static_cast<int>(rng.below(7));
    auto dir = random_vector(rng, C);
    std::vector<double> p;
    for (int i = 0; i < n; ++i) {
      const double sign = i % 2 == 0 ? 1.0 : -1.0;
      for (int c = 0; c < C; ++c) p.push_back(sign * dir[static_cast<std::size_t>(c)] + 0.05 * rng.normal());
    }
    auto unit_sum = [&](unsigned mask, bool member) {
      std::vector<double> acc(C, 0.0);
      for (int i = 0; i < n; ++i) {
        if (static_cast<bool>(mask >> i & 1u) != member) continue;
        const double* v = p.data() + i * C;
        const double nv = std::sqrt(v[0] * v[0] + v[1] * v[1] + v[2] * v[2]);
        for (int c = 0; c < C; ++c) acc[static_cast<std::size_t>(c)] += v[c] / nv;
      }
      return acc;
    };
    auto len = [](const std::vector<double>& v) { return std::sqrt(std::inner_product(v.begin(), v.end(), v.begin(), 0.0)); };
    unsigned best = 0;
    double best_obj = -1.0;
    for (unsigned mask = 1; mask + 1 < (1u << n); ++mask) {
      const double obj = len(unit_sum(mask, true)) + len(unit_sum(mask, false));
      if (obj > best_obj) {
        best_obj = obj;
        best = mask;
      }
    }
    const auto km = spherical_kmeans(p, C, 2, seed);
    for (bool member : {true, false}) {
      auto m = unit_sum(best, member);
      const double l = len(m);
      double err = 1e9;
      for (int k = 0; k < 2; ++k) {
        double d = 0.0;
        for (int c = 0; c < C; ++c) d = std::max(d, std::abs(km.centers[static_cast<std::size_t>(k * C + c)] - m[static_cast<std::size_t>(c)] / l));
        err = std::min(err, d);
      }
      CHECK(err <= 1e-3);
    }
    CHECK(spherical_kmeans(p, C, 2, seed).centers == km.centers);
  }
  CHECK(assign_cluster(std::vector<double>{1.0, 1.0, 0.0}, std::vector<double>{1.0, 0.0, 0.0, 0.0, 1.0, 0.0}, C) == 0);
  CHECK_THROWS_AS(spherical_kmeans(pts, C, 4, 0), std::invalid_argument);
}

TEST_CASE("zero weights reduce the step to the plain baseline") {
  const auto mcfg = tiny_model_config();
  const panoptic::ClassSet current{1, 2, 3};
  const auto toy = toy_batch(mcfg, current, 4, 12);
  const auto batch = toy.batch();
  seg::AdamWConfig acfg;
  acfg.lr = 1e-3;
  seg::QueryModel plain(mcfg, 21), ours(mcfg, 21);
  auto opt_plain = seg::make_optimizer(plain.params().size(), acfg);
  auto opt_ours = opt_plain;
  FutcrConfig cfg;
  cfg.lambda_reg = cfg.lambda_rep = 0.0;
  AuxState aux;
  bool identical = true;
  for (int it = 0; it < 100; ++it) {
    seg::train_step(plain, opt_plain, batch, toy.space, current);
    StepContext ctx{&toy.space, current, current, 1, 99, it};
    const auto rec = train_step(ours, opt_ours, batch, ctx, cfg, aux);
    CHECK(rec.loss_total == rec.loss_pan);
    identical = identical && plain.params() == ours.params();
  }
  CHECK(identical);
  CHECK(opt_plain == opt_ours);

  // switching the components off has the same effect
  cfg = FutcrConfig{};
  cfg.region_contrast = cfg.repulsion = false;
  seg::QueryModel a(mcfg, 3), b(mcfg, 3);
  auto oa = seg::make_optimizer(a.params().size(), acfg), ob = oa;
  for (int it = 0; it < 5; ++it) {
    seg::train_step(a, oa, batch, toy.space, current);
    train_step(b, ob, batch, StepContext{&toy.space, current, current, 2, 5, it}, cfg, aux);
  }
  CHECK(a.params() == b.params());
}

TEST_CASE("fully labeled batches produce no regions and no unlabeled pixels") {
  const auto mcfg = tiny_model_config();
  seg::QueryModel model(mcfg, 2);
  auto opt = seg::make_optimizer(model.params().size(), {});
  panoptic::LabelSpace space = scenes::default_spec(mcfg.num_classes, 2, 32, 32).label_space;
  std::vector<double> image(static_cast<std::size_t>(3 * 32 * 32), 0.3);
  panoptic::PanopticMap ann(32, 32);
  std::fill(ann.semantic.begin(), ann.semantic.end(), 1);
  seg::TrainBatch batch;
  batch.images.emplace_back(image);
  batch.annotations.push_back(&ann);
  AuxState aux;
  const auto rec = train_step(model, opt, batch, StepContext{&space, {1}, {1}, 1, 0, 0}, FutcrConfig{}, aux);
  CHECK(rec.num_regions == 0);
  CHECK(rec.num_unlabeled == 0);
  CHECK(rec.loss_reg == 0.0);
  CHECK(rec.loss_rep == 0.0);
  CHECK(rec.loss_total == rec.loss_pan);
}

TEST_CASE("old-class pixels masked out of the supervision are not unlabeled") {
  const auto mcfg = tiny_model_config();
  panoptic::LabelSpace space = scenes::default_spec(mcfg.num_classes, 2, 32, 32).label_space;
  std::vector<double> image(static_cast<std::size_t>(3 * 32 * 32), 0.3);
  // step 2 with class 2 current: the left half is old class 1, the right half is future class 3
  panoptic::PanopticMap original(32, 32);
  for (int y = 0; y < 32; ++y)
    for (int x = 0; x < 32; ++x) original.semantic[static_cast<std::size_t>(y * 32 + x)] = x < 16 ? 1 : 3;
  const auto training = stream::mask_labels(original, {2});
  const auto view = stream::mask_labels(original, {1, 2});
  seg::TrainBatch batch;
  batch.images.emplace_back(image);
  batch.annotations.push_back(&training);

  FutcrConfig cfg;
  cfg.unlabeled_samples = 1000;
  seg::QueryModel a(mcfg, 2);
  auto oa = seg::make_optimizer(a.params().size(), {});
  AuxState aux;
  const StepContext ctx{&space, {2}, {1, 2}, 2, 0, 0};
  CHECK(train_step(a, oa, batch, ctx, cfg, aux).num_unlabeled == 64);

  batch.known_view.push_back(&view);
  seg::QueryModel b(mcfg, 2);
  auto ob = seg::make_optimizer(b.params().size(), {});
  CHECK(train_step(b, ob, batch, ctx, cfg, aux).num_unlabeled == 32);
  const auto regions = discover_future_regions(std::vector<seg::ModelOutput>{seg::forward(b, image)}, batch.known_view, {1, 2}, cfg);
  for (const auto& r : regions)
    for (int p : r.support) CHECK(p % 8 >= 4);
}

TEST_CASE("smoke run: the total loss trace is finite and falls") {
  const auto mcfg = tiny_model_config(3);
  const panoptic::ClassSet current{1, 2};
  const auto toy = toy_batch(mcfg, current, 4, 40);
  const auto batch = toy.batch();
  seg::AdamWConfig acfg;
  acfg.lr = 2e-3;
  seg::QueryModel model(mcfg, 8);
  auto opt = seg::make_optimizer(model.params().size(), acfg);
  FutcrConfig cfg;
  cfg.min_region_pixels = 4;
  cfg.confidence_min = 0.55;
  cfg.unlabeled_samples = 32;
  cfg.aux.enabled = true;
  cfg.aux.clusters = 3;
  cfg.aux.buffer_capacity = 32;
  cfg.aux.refresh_period = 10;
  AuxState aux;
  std::vector<double> trace;
  int with_regions = 0, with_unlabeled = 0;
  for (int it = 0; it < 50; ++it) {
    const auto rec = train_step(model, opt, batch, StepContext{&toy.space, current, current, 1, 7, it}, cfg, aux);
    REQUIRE(std::isfinite(rec.loss_total));
    trace.push_back(rec.loss_total);
    with_regions += rec.num_regions > 0;
    with_unlabeled += rec.num_unlabeled > 0;
  }
  auto ma = [&](int end) { return std::accumulate(trace.begin() + end - 5, trace.begin() + end, 0.0) / 5.0; };
  CHECK(ma(50) < ma(5));
  CHECK(with_unlabeled == 50);
  MESSAGE("steps with future regions: " << with_regions);
}
