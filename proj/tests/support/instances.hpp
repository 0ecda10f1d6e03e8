#pragma once

#include <cstdint>
#include <vector>

#include "futcr/futcr.hpp"
#include "futcr/rng.hpp"
#include "futcr/scenes.hpp"
#include "futcr/segmenter.hpp"
#include "gradcheck.hpp"

// Small random instances shared by the unit tests and the acceptance runner.
namespace futcr::testing {

inline seg::ModelConfig tiny_model_config(int aux_clusters = 0) {
  seg::ModelConfig c;
  c.image_height = c.image_width = 32;
  c.stage1_channels = 4;
  c.stage2_channels = 8;
  c.feature_dim = c.query_dim = 8;
  c.num_queries = 8;
  c.num_classes = 4;
  c.aux_clusters = aux_clusters;
  c.aux_hidden = 6;
  return c;
}

inline std::vector<double> random_vector(Rng& rng, std::size_t n, double scale = 1.0) {
  std::vector<double> v(n);
  for (auto& x : v) x = scale * rng.normal();
  return v;
}

// Up to `per_block` coordinates from every parameter block.
inline std::vector<std::size_t> block_coords(const seg::ParamLayout& l, Rng& rng, int per_block) {
  std::vector<std::size_t> out;
  for (const auto* b : {&l.conv1_w, &l.conv1_b, &l.conv2_w, &l.conv2_b, &l.conv3_w, &l.conv3_b, &l.queries, &l.mask_w,
                        &l.mask_b, &l.classifier, &l.aux_w1, &l.aux_b1, &l.aux_w2, &l.aux_b2}) {
    if (b->size == 0) continue;
    const int k = std::min<int>(per_block, static_cast<int>(b->size));
    for (int i : rng.sample_without_replacement(static_cast<int>(b->size), k)) out.push_back(b->offset + static_cast<std::size_t>(i));
  }
  return out;
}

// L_pan through the full model on a random 32×32 scene.
inline GradCheck pan_gradient_check(std::uint64_t seed) {
  Rng rng(seed);
  const auto cfg = tiny_model_config();
  const auto spec = scenes::default_spec(cfg.num_classes, 2, cfg.image_height, cfg.image_width);
  const auto scene = scenes::generate_scene(spec, seed);
  const auto current = spec.label_space.all();
  seg::QueryModel model(cfg, seed);
  auto loss_at = [&](const std::vector<double>& p) {
    seg::QueryModel m(cfg, p);
    return seg::panoptic_loss(seg::forward(m, scene.image), scene.annotation, spec.label_space, current).total;
  };
  const auto out = seg::forward(model, scene.image);
  const auto pl = seg::panoptic_loss(out, scene.annotation, spec.label_space, current);
  std::vector<double> grad(model.layout().total, 0.0);
  seg::backward(model, out, pl.grads, grad);
  auto params = model.params();
  return check_gradient(params, grad, loss_at, block_coords(model.layout(), rng, 12));
}

struct FeatureInstance {
  int channels = 8;
  int pixels = 16;
  std::vector<std::vector<double>> maps;
  std::vector<future::FutureRegion> regions;

  future::FeatureMaps views() const {
    future::FeatureMaps v;
    for (const auto& m : maps) v.emplace_back(m);
    return v;
  }
};

inline FeatureInstance random_feature_instance(Rng& rng, int images = 2, int max_regions = 3) {
  FeatureInstance inst;
  for (int b = 0; b < images; ++b) inst.maps.push_back(random_vector(rng, static_cast<std::size_t>(inst.channels * inst.pixels)));
  const int R = 1 + static_cast<int>(rng.below(static_cast<std::uint64_t>(max_regions)));
  for (int r = 0; r < R; ++r) {
    future::FutureRegion reg;
    reg.image = static_cast<int>(rng.below(static_cast<std::uint64_t>(images)));
    reg.query = r;
    const int size = 2 + static_cast<int>(rng.below(7));
    reg.support = rng.sample_without_replacement(inst.pixels, size);
    std::sort(reg.support.begin(), reg.support.end());
    reg.anchor_pixels = future::sample_anchors(reg.support, 5, rng);
    inst.regions.push_back(std::move(reg));
  }
  return inst;
}

// Flattened (image-major) feature vector and its mapping back to maps.
inline std::vector<double> flatten(const std::vector<std::vector<double>>& maps) {
  std::vector<double> x;
  for (const auto& m : maps) x.insert(x.end(), m.begin(), m.end());
  return x;
}

inline std::vector<std::vector<double>> unflatten(const std::vector<double>& x, std::size_t images) {
  std::vector<std::vector<double>> maps(images);
  const std::size_t n = x.size() / images;
  for (std::size_t b = 0; b < images; ++b) maps[b].assign(x.begin() + static_cast<std::ptrdiff_t>(b * n), x.begin() + static_cast<std::ptrdiff_t>((b + 1) * n));
  return maps;
}

inline future::FeatureMaps views_of(const std::vector<std::vector<double>>& maps) {
  future::FeatureMaps v;
  for (const auto& m : maps) v.emplace_back(m);
  return v;
}

inline GradCheck reg_gradient_check(std::uint64_t seed) {
  Rng rng(seed);
  const auto inst = random_feature_instance(rng);
  const double tau = 0.07 + 0.5 * rng.uniform();
  const auto res = future::region_contrast_on_features(inst.views(), inst.channels, inst.regions, tau);
  auto x = flatten(inst.maps);
  const auto g = flatten(res.grad_features);
  auto f = [&](const std::vector<double>& v) {
    const auto maps = unflatten(v, inst.maps.size());
    return future::region_contrast_on_features(views_of(maps), inst.channels, inst.regions, tau).value;
  };
  return check_gradient(x, g, f, all_coords(x.size()));
}

inline std::vector<double> unit_rows(Rng& rng, int rows, int channels) {
  auto w = random_vector(rng, static_cast<std::size_t>(rows * channels));
  for (int k = 0; k < rows; ++k) {
    double n = 0.0;
    for (int c = 0; c < channels; ++c) n += w[static_cast<std::size_t>(k * channels + c)] * w[static_cast<std::size_t>(k * channels + c)];
    n = std::sqrt(n);
    for (int c = 0; c < channels; ++c) w[static_cast<std::size_t>(k * channels + c)] /= n;
  }
  return w;
}

// Coordinates of the map vector whose pixel sits near a hinge or argmax kink.
inline GradCheck rep_gradient_check(std::uint64_t seed) {
  Rng rng(seed);
  const auto inst = random_feature_instance(rng);
  const int K = 4;
  const auto w = unit_rows(rng, K, inst.channels);
  const double margin = 0.4 * rng.uniform() - 0.2;
  std::vector<future::PixelRef> picks;
  for (int b = 0; b < 2; ++b)
    for (int p : rng.sample_without_replacement(inst.pixels, 5)) picks.push_back({b, p});
  const auto res = future::repulsion_on_features(inst.views(), inst.channels, picks, w, margin);
  auto x = flatten(inst.maps);
  const auto g = flatten(res.grad_features);
  auto f = [&](const std::vector<double>& v) {
    const auto maps = unflatten(v, inst.maps.size());
    return future::repulsion_on_features(views_of(maps), inst.channels, picks, w, margin).value;
  };
  return check_gradient(x, g, f, all_coords(x.size()));
}

// L_aux with respect to the feature maps (through pooled prototypes) and the head parameters.
inline GradCheck aux_gradient_check(std::uint64_t seed) {
  Rng rng(seed);
  const auto cfg = tiny_model_config(3);
  seg::QueryModel model(cfg, seed);
  for (auto* b : {&model.layout().aux_b1, &model.layout().aux_b2})
    for (auto& v : model.block(*b)) v = 0.1 * rng.normal();
  const auto inst = random_feature_instance(rng);
  std::vector<int> labels;
  for (std::size_t r = 0; r < inst.regions.size(); ++r) labels.push_back(static_cast<int>(rng.below(3)));
  const double lambda_bal = 0.5 + rng.uniform();

  std::vector<double> head(model.layout().total, 0.0);
  const auto res = future::aux_on_features(model, inst.views(), inst.regions, labels, lambda_bal, 1.0, head);

  auto x = flatten(inst.maps);
  const auto g = flatten(res.grad_features);
  auto f = [&](const std::vector<double>& v) {
    const auto maps = unflatten(v, inst.maps.size());
    std::vector<double> scratch(model.layout().total, 0.0);
    return future::aux_on_features(model, views_of(maps), inst.regions, labels, lambda_bal, 1.0, scratch).value;
  };
  auto r = check_gradient(x, g, f, all_coords(x.size()));

  auto params = model.params();
  auto fp = [&](const std::vector<double>& p) {
    seg::QueryModel m(cfg, p);
    std::vector<double> scratch(m.layout().total, 0.0);
    return future::aux_on_features(m, inst.views(), inst.regions, labels, lambda_bal, 1.0, scratch).value;
  };
  std::vector<std::size_t> coords;
  const auto& L = model.layout();
  for (const auto* b : {&L.aux_w1, &L.aux_b1, &L.aux_w2, &L.aux_b2})
    for (std::size_t i = 0; i < b->size; ++i) coords.push_back(b->offset + i);
  r.merge(check_gradient(params, head, fp, coords));
  return r;
}

}  // namespace futcr::testing
