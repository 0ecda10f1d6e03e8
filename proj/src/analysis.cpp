#include "futcr/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

namespace futcr::analysis {

ConfusionProfile confusion_from_maps(const std::vector<panoptic::PanopticMap>& predictions,
                                     const std::vector<const panoptic::PanopticMap*>& ground_truth,
                                     const panoptic::ClassSet& known) {
  if (predictions.size() != ground_truth.size()) throw std::invalid_argument("predictions and ground truth differ in length");
  long long old = 0, bg = 0, fut = 0;
  for (std::size_t b = 0; b < predictions.size(); ++b) {
    const auto& pred = predictions[b];
    const auto& gt = *ground_truth[b];
    if (pred.size() != gt.size()) throw std::invalid_argument("prediction and ground truth differ in size");
    for (std::size_t i = 0; i < gt.semantic.size(); ++i) {
      const int g = gt.semantic[i];
      if (g == 0 || known.count(g)) continue;
      const int p = pred.semantic[i];
      if (p == 0)
        ++bg;
      else if (known.count(p))
        ++old;
      else
        ++fut;
    }
  }
  ConfusionProfile r;
  r.future_pixels = old + bg + fut;
  if (r.future_pixels == 0) throw std::invalid_argument("no future-class pixels in the evaluation set");
  const auto n = static_cast<double>(r.future_pixels);
  r.to_old = static_cast<double>(old) / n;
  r.to_background = static_cast<double>(bg) / n;
  r.to_future = static_cast<double>(fut) / n;
  return r;
}

ConfusionProfile future_confusion_profile(const seg::QueryModel& model, const std::vector<scenes::SceneSample>& eval,
                                          const panoptic::ClassSet& known, const panoptic::LabelSpace& space,
                                          const seg::InferenceSettings& settings) {
  std::vector<panoptic::PanopticMap> preds(eval.size());
  std::vector<const panoptic::PanopticMap*> gts(eval.size());
#pragma omp parallel for schedule(static)
  for (int i = 0; i < static_cast<int>(eval.size()); ++i) {
    const auto& s = eval[static_cast<std::size_t>(i)];
    preds[static_cast<std::size_t>(i)] = seg::panoptic_inference(seg::forward(model, s.image), space, settings);
    gts[static_cast<std::size_t>(i)] = &s.annotation;
  }
  return confusion_from_maps(preds, gts, known);
}

PrototypeSet class_prototypes(const std::vector<std::span<const double>>& features, int channels,
                              const std::vector<const panoptic::PanopticMap*>& annotations, int factor,
                              const panoptic::ClassSet& classes) {
  if (features.size() != annotations.size()) throw std::invalid_argument("features and annotations differ in length");
  std::map<int, std::vector<double>> sums;
  std::map<int, long long> counts;
  for (int c : classes) {
    sums[c].assign(static_cast<std::size_t>(channels), 0.0);
    counts[c] = 0;
  }
  for (std::size_t b = 0; b < features.size(); ++b) {
    const auto labels = seg::cell_labels(*annotations[b], factor);
    const auto P = labels.size();
    if (features[b].size() != P * static_cast<std::size_t>(channels)) throw std::invalid_argument("feature map size mismatch");
    for (std::size_t p = 0; p < P; ++p) {
      const auto it = sums.find(labels[p]);
      if (it == sums.end()) continue;
      ++counts[labels[p]];
      for (int c = 0; c < channels; ++c) it->second[static_cast<std::size_t>(c)] += features[b][static_cast<std::size_t>(c) * P + p];
    }
  }
  PrototypeSet out;
  for (auto& [c, s] : sums) {
    const long long n = counts[c];
    if (n == 0) {
      out.missing.insert(c);
      continue;
    }
    for (auto& v : s) v /= static_cast<double>(n);
    out.prototypes[c] = std::move(s);
    out.pixel_counts[c] = n;
  }
  return out;
}

PrototypeSet class_prototypes_from_data(const seg::QueryModel& model, const std::vector<scenes::SceneSample>& eval,
                                        const panoptic::ClassSet& classes) {
  std::vector<std::vector<double>> feats(eval.size());
#pragma omp parallel for schedule(static)
  for (int i = 0; i < static_cast<int>(eval.size()); ++i)
    feats[static_cast<std::size_t>(i)] = seg::forward(model, eval[static_cast<std::size_t>(i)].image).features;
  std::vector<std::span<const double>> views;
  std::vector<const panoptic::PanopticMap*> anns;
  for (std::size_t i = 0; i < eval.size(); ++i) {
    views.emplace_back(feats[i]);
    anns.push_back(&eval[i].annotation);
  }
  const auto& cfg = model.config();
  return class_prototypes(views, cfg.feature_dim, anns, cfg.image_height / cfg.feature_height(), classes);
}

PrototypeSet classifier_prototypes(const seg::QueryModel& model, const panoptic::ClassSet& classes) {
  PrototypeSet out;
  for (int c : classes) {
    const auto row = model.classifier_row(c - 1);
    double n = 0.0;
    for (double v : row) n += v * v;
    n = std::sqrt(n);
    if (n == 0.0) {
      out.missing.insert(c);
      continue;
    }
    std::vector<double> w(row.begin(), row.end());
    for (auto& v : w) v /= n;
    out.prototypes[c] = std::move(w);
  }
  return out;
}

CongruenceRecord prototype_congruence(const PrototypeSet& current, const PrototypeSet& reference) {
  CongruenceRecord r;
  bool shared = false;
  double sum = 0.0;
  for (const auto& [c, a] : current.prototypes) {
    const auto it = reference.prototypes.find(c);
    if (it == reference.prototypes.end()) {
      r.excluded.insert(c);
      continue;
    }
    shared = true;
    const auto& b = it->second;
    if (a.size() != b.size()) throw std::invalid_argument("prototype dimensions differ for class " + std::to_string(c));
    double ab = 0.0, aa = 0.0, bb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
      ab += a[i] * b[i];
      aa += a[i] * a[i];
      bb += b[i] * b[i];
    }
    if (aa == 0.0 || bb == 0.0) {
      r.excluded.insert(c);
      continue;
    }
    const double cs = std::clamp(ab / std::sqrt(aa * bb), -1.0, 1.0);
    r.cosine[c] = cs;
    sum += cs;
  }
  for (const auto& [c, b] : reference.prototypes)
    if (!current.prototypes.count(c)) r.excluded.insert(c);
  if (!shared) throw std::invalid_argument("prototype sets share no class");
  if (!r.cosine.empty()) r.mean = sum / static_cast<double>(r.cosine.size());
  return r;
}

std::vector<TrajectoryPoint> stability_plasticity(const std::map<int, panoptic::MetricReport>& history) {
  if (history.empty() || history.begin()->first != 1) throw std::invalid_argument("history must start at step 1");
  const int last = history.rbegin()->first;
  for (int t = 1; t <= last; ++t)
    if (!history.count(t)) throw std::invalid_argument("history is missing step " + std::to_string(t));
  const double base1 = history.at(1).pq_base;
  std::vector<TrajectoryPoint> out;
  for (int t = 2; t <= last; ++t) {
    const auto& rep = history.at(t);
    out.push_back({t, base1 > 0.0 ? rep.pq_base / base1 : 0.0, rep.pq_new});
  }
  return out;
}

}  // namespace futcr::analysis
