#include <cmath>
#include <sstream>

#include "doctest.h"
#include "futcr/scenes.hpp"
#include "futcr/segmenter.hpp"
#include "support/oracles.hpp"

using namespace futcr;
using namespace futcr::seg;

namespace {

// Output with Q queries over an h×w canvas and K+1 logits, masks from mask logits.
ModelOutput hand_output(int q, int h, int w, int k) {
  ModelOutput o;
  o.height = h;
  o.width = w;
  o.feat_h = h / 4;
  o.feat_w = w / 4;
  o.num_queries = q;
  o.num_logits = k + 1;
  o.logits.assign(static_cast<std::size_t>(q * (k + 1)), 0.0);
  o.mask_logits.assign(static_cast<std::size_t>(q * h * w), -30.0);
  o.masks.assign(o.mask_logits.size(), 0.0);
  return o;
}

void refresh_masks(ModelOutput& o) {
  for (std::size_t i = 0; i < o.masks.size(); ++i) o.masks[i] = 1.0 / (1.0 + std::exp(-o.mask_logits[i]));
}

panoptic::LabelSpace small_space() {
  panoptic::LabelSpace s;
  s.num_classes = 3;
  s.is_thing = {false, true, true};
  s.names = {"a", "b", "c"};
  return s;
}

}  // namespace

TEST_CASE("forward shapes and determinism at the toy size") {
  ModelConfig cfg;
  QueryModel model(cfg, 5);
  const auto spec = scenes::default_spec();
  const auto scene = scenes::generate_scene(spec, 2);
  const auto a = forward(model, scene.image);
  const auto b = forward(model, scene.image);
  CHECK(a.features.size() == 32u * 16 * 16);
  CHECK(a.query_features.size() == 16u * 32);
  CHECK(a.masks.size() == 16u * 64 * 64);
  CHECK(a.logits.size() == 16u * 9);
  CHECK(a.masks == b.masks);
  CHECK(a.logits == b.logits);
  CHECK(a.features == b.features);
  for (double m : a.masks) {
    CHECK(m >= 0.0);
    CHECK(m <= 1.0);
  }
  CHECK_THROWS_AS(forward(model, std::vector<double>(10, 0.0)), std::invalid_argument);
}

TEST_CASE("zero mask head gives uniform one-half masks") {
  ModelConfig cfg;
  cfg.image_height = cfg.image_width = 32;
  QueryModel model(cfg, 1);
  for (auto* b : {&model.layout().mask_w, &model.layout().mask_b})
    for (auto& v : model.block(*b)) v = 0.0;
  std::vector<double> img(3u * 32 * 32, 0.3);
  const auto out = forward(model, img);
  for (double m : out.masks) CHECK(m == 0.5);
}

TEST_CASE("duplicate batch images give identical outputs") {
  ModelConfig cfg;
  cfg.image_height = cfg.image_width = 32;
  QueryModel model(cfg, 3);
  const auto scene = scenes::generate_scene(scenes::default_spec(8, 3, 32, 32), 4);
  TrainBatch batch;
  batch.images = {scene.image, scene.image};
  batch.annotations = {&scene.annotation, &scene.annotation};
  const auto outs = forward_batch(model, batch);
  CHECK(outs[0].masks == outs[1].masks);
  CHECK(outs[0].logits == outs[1].logits);
}

TEST_CASE("hungarian equals brute-force assignment") {
  Rng rng(12);
  for (int trial = 0; trial < 200; ++trial) {
    const int rows = rng.between(1, 5), cols = rng.between(rows, 8);
    std::vector<double> cost(static_cast<std::size_t>(rows * cols));
    for (auto& c : cost) c = rng.uniform(-2.0, 3.0);
    const auto a = hungarian(cost, rows, cols);
    std::set<int> distinct(a.begin(), a.end());
    CHECK(distinct.size() == static_cast<std::size_t>(rows));
    double got = 0.0;
    for (int r = 0; r < rows; ++r) got += cost[static_cast<std::size_t>(r * cols + a[static_cast<std::size_t>(r)])];
    CHECK(got == testing::brute_force_assignment(cost, rows, cols));
  }
}

TEST_CASE("matching examples") {
  auto o = hand_output(4, 8, 8, 3);
  refresh_masks(o);
  CHECK(hungarian_match(o, {}, {}).empty());

  panoptic::Segment seg{2, 1, {}};
  for (int i = 0; i < 16; ++i) seg.pixels.push_back(i);
  for (int i : seg.pixels) o.mask_logits[static_cast<std::size_t>(2 * 64 + i)] = 30.0;
  o.logits[2 * 4 + 1] = 20.0;
  refresh_masks(o);
  const auto a = hungarian_match(o, {seg}, {});
  REQUIRE(a.size() == 1);
  CHECK(a[0] == 2);

  std::vector<panoptic::Segment> many(5, seg);
  CHECK_THROWS_AS(hungarian_match(o, many, {}), std::invalid_argument);
}

TEST_CASE("panoptic loss at the optimum and on void annotations") {
  const auto space = small_space();
  panoptic::PanopticMap ann(8, 8);
  for (int i = 0; i < 20; ++i) {
    ann.semantic[static_cast<std::size_t>(i)] = 2;
    ann.instance[static_cast<std::size_t>(i)] = 1;
  }
  for (int i = 40; i < 64; ++i) ann.semantic[static_cast<std::size_t>(i)] = 1;

  auto o = hand_output(4, 8, 8, 3);
  for (int q = 0; q < 4; ++q) o.logits[static_cast<std::size_t>(q * 4 + 3)] = 30.0;
  o.logits[0 * 4 + 3] = 0.0;
  o.logits[0 * 4 + 1] = 30.0;
  o.logits[1 * 4 + 3] = 0.0;
  o.logits[1 * 4 + 0] = 30.0;
  for (int i = 0; i < 20; ++i) o.mask_logits[static_cast<std::size_t>(i)] = 30.0;
  for (int i = 40; i < 64; ++i) o.mask_logits[static_cast<std::size_t>(64 + i)] = 30.0;
  refresh_masks(o);
  const auto best = panoptic_loss(o, ann, space, {1, 2, 3});
  CHECK(best.total < 1e-3);

  panoptic::PanopticMap empty(8, 8);
  const auto v = panoptic_loss(o, empty, space, {1, 2, 3});
  CHECK(v.bce == 0.0);
  CHECK(v.dice == 0.0);
  CHECK(v.cls > 0.0);
  CHECK(v.total == doctest::Approx(2.0 * v.cls).epsilon(1e-15));

  o.logits[0] = std::nan("");
  CHECK_THROWS_AS(panoptic_loss(o, ann, space, {1, 2, 3}), std::invalid_argument);
}

TEST_CASE("panoptic inference") {
  const auto space = small_space();
  auto o = hand_output(3, 8, 8, 3);
  for (int q = 0; q < 3; ++q) o.logits[static_cast<std::size_t>(q * 4 + 3)] = 10.0;
  refresh_masks(o);
  const auto none = panoptic_inference(o, space);
  CHECK(none == panoptic::PanopticMap(8, 8));

  // a single confident query with a binary mask paints exactly that mask
  o.logits[0 * 4 + 3] = 0.0;
  o.logits[0 * 4 + 1] = 10.0;
  for (int i = 0; i < 10; ++i) o.mask_logits[static_cast<std::size_t>(i)] = 30.0;
  refresh_masks(o);
  const auto one = panoptic_inference(o, space);
  for (int i = 0; i < 64; ++i) {
    CHECK(one.semantic[static_cast<std::size_t>(i)] == (i < 10 ? 2 : 0));
    CHECK(one.instance[static_cast<std::size_t>(i)] == (i < 10 ? 1 : 0));
  }

  // two overlapping queries: each pixel goes to the larger probability × mask
  Rng rng(8);
  for (int trial = 0; trial < 20; ++trial) {
    auto t = hand_output(2, 8, 8, 3);
    t.logits = {0, 6, 0, 0, 0, 0, 4, 0};
    for (auto& v : t.mask_logits) v = rng.uniform(-1.0, 4.0);
    refresh_masks(t);
    const auto map = panoptic_inference(t, space);
    auto prob = [&](int q) {
      const double* l = t.logits.data() + q * 4;
      double z = 0.0;
      for (int k = 0; k < 4; ++k) z += std::exp(l[k]);
      return std::exp(l[q == 0 ? 1 : 2]) / z;
    };
    for (int i = 0; i < 64; ++i) {
      const double a = prob(0) * t.mask(0, i), b = prob(1) * t.mask(1, i);
      const bool ea = t.mask(0, i) >= 0.5, eb = t.mask(1, i) >= 0.5;
      int expect = 0;
      if (ea && (!eb || a >= b)) expect = 2;
      else if (eb) expect = 3;
      CHECK(map.semantic[static_cast<std::size_t>(i)] == expect);
    }
  }
}

TEST_CASE("AdamW behaviour") {
  std::vector<double> p{1.0, -2.0};
  auto st = make_optimizer(2, {1e-2, 0.9, 0.999, 1e-8, 0.0});
  adamw_step(p, std::vector<double>{0.0, 0.0}, st);
  CHECK(p == std::vector<double>{1.0, -2.0});

  std::vector<double> q{0.0};
  auto s2 = make_optimizer(1, {1e-3, 0.9, 0.999, 1e-8, 0.0});
  double prev = 0.0;
  for (int i = 0; i < 3000; ++i) {
    prev = q[0];
    adamw_step(q, std::vector<double>{0.7}, s2);
  }
  CHECK(prev - q[0] == doctest::Approx(1e-3).epsilon(1e-3));

  // 1-D bowl (x - 3)²
  std::vector<double> x{0.0};
  auto s3 = make_optimizer(1, {1e-2, 0.9, 0.999, 1e-8, 0.0});
  int steps = 0;
  while (std::abs(x[0] - 3.0) > 1e-3 && steps < 2000) {
    adamw_step(x, std::vector<double>{2.0 * (x[0] - 3.0)}, s3);
    ++steps;
  }
  CHECK(std::abs(x[0] - 3.0) <= 1e-3);

  CHECK_THROWS(adamw_step(x, std::vector<double>{std::nan("")}, s3));
}

TEST_CASE("checkpoint round-trip") {
  ModelConfig cfg;
  cfg.image_height = cfg.image_width = 32;
  cfg.aux_clusters = 3;
  QueryModel model(cfg, 9);
  Checkpoint ck{cfg, model.params(), make_optimizer(model.params().size(), {}), 2, "abc"};
  ck.optimizer.m[3] = 0.25;
  ck.optimizer.step = 17;
  std::stringstream ss;
  write_checkpoint(ss, ck);
  CHECK(read_checkpoint(ss) == ck);

  std::stringstream bad("not a checkpoint");
  CHECK_THROWS(read_checkpoint(bad));
}

TEST_CASE("training on a fixed toy set reduces the panoptic loss") {
  const auto spec = scenes::default_spec();
  const auto data = scenes::generate_dataset(spec, 10, 21);
  QueryModel model(ModelConfig{}, 21);
  auto opt = make_optimizer(model.params().size(), {1e-3, 0.9, 0.999, 1e-8, 0.05});
  TrainBatch batch;
  for (const auto& s : data) {
    batch.images.emplace_back(s.image);
    batch.annotations.push_back(&s.annotation);
  }
  const double first = train_step(model, opt, batch, spec.label_space, spec.label_space.all()).loss_pan;
  double last = first;
  for (int i = 1; i < 500; ++i) last = train_step(model, opt, batch, spec.label_space, spec.label_space.all()).loss_pan;
  INFO("initial " << first << " final " << last);
  CHECK(last <= 0.2 * first);
}
