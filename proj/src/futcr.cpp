#include "futcr/futcr.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

#include "futcr/kernels.hpp"

namespace futcr::future {

namespace {

double dot(const double* a, const double* b, int n) {
  double s = 0.0;
  for (int i = 0; i < n; ++i) s += a[i] * b[i];
  return s;
}

double norm(const double* a, int n) { return std::sqrt(dot(a, a, n)); }

}  // namespace

void FutcrConfig::validate() const {
  if (!(temperature > 0.0)) throw std::invalid_argument("futcr.temperature must be > 0");
  if (!(tau_mask > 0.0 && tau_mask < 1.0)) throw std::invalid_argument("futcr.tau_mask must be in (0, 1)");
  if (!(majority_fraction >= 0.5 && majority_fraction <= 1.0))
    throw std::invalid_argument("futcr.majority_fraction must be in [0.5, 1]");
  if (pixels_per_region < 1 || min_region_pixels < 1 || unlabeled_samples < 1)
    throw std::invalid_argument("futcr counts must be positive");
  if (aux.enabled && (aux.clusters < 2 || aux.buffer_capacity < aux.clusters || aux.refresh_period < 1))
    throw std::invalid_argument("futcr.aux: need clusters >= 2, buffer >= clusters, refresh period >= 1");
}

std::vector<bool> unlabeled_cells(const panoptic::PanopticMap& annotation, const panoptic::ClassSet& known, int factor) {
  std::vector<double> ind(static_cast<std::size_t>(annotation.size()));
  for (std::size_t i = 0; i < ind.size(); ++i) {
    const int c = annotation.semantic[i];
    ind[i] = (c == 0 || !known.count(c)) ? 1.0 : 0.0;
  }
  std::vector<double> ratio(static_cast<std::size_t>((annotation.height / factor) * (annotation.width / factor)));
  kernels::area_downsample(ind, 1, annotation.height, annotation.width, factor, ratio);
  std::vector<bool> out(ratio.size());
  for (std::size_t i = 0; i < ratio.size(); ++i) out[i] = ratio[i] >= 0.5;
  return out;
}

std::vector<FutureRegion> discover_future_regions(const std::vector<seg::ModelOutput>& outputs,
                                                  const std::vector<const panoptic::PanopticMap*>& annotations,
                                                  const panoptic::ClassSet& known, const FutcrConfig& cfg) {
  if (outputs.size() != annotations.size()) throw std::invalid_argument("outputs and annotations differ in length");
  std::vector<std::vector<FutureRegion>> per_image(outputs.size());
#pragma omp parallel for schedule(static)
  for (int b = 0; b < static_cast<int>(outputs.size()); ++b) {
    const auto& out = outputs[static_cast<std::size_t>(b)];
    const int factor = out.height / out.feat_h;
    const auto unl = unlabeled_cells(*annotations[static_cast<std::size_t>(b)], known, factor);
    for (int q = 0; q < out.num_queries; ++q) {
      const auto low = seg::downsample_mask(out, q);
      std::vector<int> support;
      double conf = 0.0;
      int n_unl = 0;
      for (int p = 0; p < static_cast<int>(low.size()); ++p)
        if (low[static_cast<std::size_t>(p)] > cfg.tau_mask) {
          support.push_back(p);
          conf += low[static_cast<std::size_t>(p)];
          n_unl += unl[static_cast<std::size_t>(p)] ? 1 : 0;
        }
      const auto n = static_cast<int>(support.size());
      if (n < cfg.min_region_pixels) continue;
      if (conf / n < cfg.confidence_min) continue;
      if (!(static_cast<double>(n_unl) > cfg.majority_fraction * n)) continue;
      per_image[static_cast<std::size_t>(b)].push_back(FutureRegion{b, q, std::move(support), {}, {}});
    }
  }
  std::vector<FutureRegion> all;
  for (auto& v : per_image)
    for (auto& r : v) all.push_back(std::move(r));
  return all;
}

RegionPrototype region_prototype(std::span<const double> features, int channels, std::span<const double> mask,
                                 double tau_mask) {
  const auto pixels = static_cast<int>(mask.size());
  if (static_cast<int>(features.size()) != channels * pixels) throw std::invalid_argument("feature/mask size mismatch");
  RegionPrototype r;
  for (int p = 0; p < pixels; ++p)
    if (mask[static_cast<std::size_t>(p)] > tau_mask) r.support.push_back(p);
  if (r.support.empty()) throw std::invalid_argument("empty region support");
  r.prototype.assign(static_cast<std::size_t>(channels), 0.0);
  for (int c = 0; c < channels; ++c) {
    double s = 0.0;
    for (int p : r.support) s += features[static_cast<std::size_t>(c * pixels + p)];
    r.prototype[static_cast<std::size_t>(c)] = s / static_cast<double>(r.support.size());
  }
  return r;
}

std::vector<int> sample_anchors(const std::vector<int>& support, int n, Rng& rng) {
  if (support.empty()) throw std::invalid_argument("cannot sample anchors from an empty support");
  const auto m = static_cast<int>(support.size());
  std::vector<int> out;
  out.reserve(static_cast<std::size_t>(n));
  if (m >= n) {
    for (int i : rng.sample_without_replacement(m, n)) out.push_back(support[static_cast<std::size_t>(i)]);
  } else {
    for (int i = 0; i < n; ++i) out.push_back(support[static_cast<std::size_t>(rng.below(static_cast<std::uint64_t>(m)))]);
  }
  return out;
}

ContrastResult region_contrast_loss(std::span<const double> anchors, std::span<const int> tags,
                                    std::span<const double> prototypes, int channels, double temperature) {
  const int N = static_cast<int>(tags.size());
  const int R = static_cast<int>(prototypes.size()) / channels;
  if (static_cast<int>(anchors.size()) != N * channels) throw std::invalid_argument("anchor matrix size mismatch");
  if (R < 1) throw std::invalid_argument("need at least one prototype");
  ContrastResult res;
  res.grad_anchors.assign(anchors.size(), 0.0);
  res.grad_prototypes.assign(prototypes.size(), 0.0);
  if (N == 0) return res;

  std::vector<double> pn(static_cast<std::size_t>(R));
  for (int k = 0; k < R; ++k) {
    pn[static_cast<std::size_t>(k)] = norm(prototypes.data() + k * channels, channels);
    if (pn[static_cast<std::size_t>(k)] == 0.0) throw std::invalid_argument("zero-norm prototype");
  }
  std::vector<double> cosv(static_cast<std::size_t>(R)), sm(static_cast<std::size_t>(R));
  for (int n = 0; n < N; ++n) {
    const int r = tags[static_cast<std::size_t>(n)];
    if (r < 0 || r >= R) throw std::invalid_argument("anchor tag out of range");
    const double* f = anchors.data() + n * channels;
    const double fn = norm(f, channels);
    if (fn == 0.0) throw std::invalid_argument("zero-norm anchor");
    double mx = -std::numeric_limits<double>::infinity();
    for (int k = 0; k < R; ++k) {
      cosv[static_cast<std::size_t>(k)] = dot(f, prototypes.data() + k * channels, channels) / (fn * pn[static_cast<std::size_t>(k)]);
      mx = std::max(mx, cosv[static_cast<std::size_t>(k)] / temperature);
    }
    double z = 0.0;
    for (int k = 0; k < R; ++k) {
      sm[static_cast<std::size_t>(k)] = std::exp(cosv[static_cast<std::size_t>(k)] / temperature - mx);
      z += sm[static_cast<std::size_t>(k)];
    }
    res.value += (mx + std::log(z) - cosv[static_cast<std::size_t>(r)] / temperature) / N;
    for (int k = 0; k < R; ++k) {
      const double ds = (sm[static_cast<std::size_t>(k)] / z - (k == r ? 1.0 : 0.0)) / (N * temperature);
      if (ds == 0.0) continue;
      const double* p = prototypes.data() + k * channels;
      const double pk = pn[static_cast<std::size_t>(k)], ck = cosv[static_cast<std::size_t>(k)];
      double* gf = res.grad_anchors.data() + n * channels;
      double* gp = res.grad_prototypes.data() + k * channels;
      for (int c = 0; c < channels; ++c) {
        const double fh = f[c] / fn, ph = p[c] / pk;
        gf[c] += ds * (ph - ck * fh) / fn;
        gp[c] += ds * (fh - ck * ph) / pk;
      }
    }
  }
  return res;
}

std::map<int, std::vector<double>> known_class_prototypes(const seg::QueryModel& model, const panoptic::ClassSet& known) {
  if (known.empty()) throw std::invalid_argument("known class set is empty");
  std::map<int, std::vector<double>> out;
  for (int c : known) {
    const auto row = model.classifier_row(c - 1);
    const double n = norm(row.data(), static_cast<int>(row.size()));
    if (n == 0.0) throw std::invalid_argument("zero-norm classifier row for class " + std::to_string(c));
    std::vector<double> w(row.begin(), row.end());
    for (auto& v : w) v /= n;
    out[c] = std::move(w);
  }
  return out;
}

std::vector<PixelRef> sample_unlabeled_pixels(const std::vector<seg::ModelOutput>& outputs,
                                              const std::vector<const panoptic::PanopticMap*>& annotations,
                                              const panoptic::ClassSet& known, int n, Rng& rng) {
  std::vector<PixelRef> pool;
  for (std::size_t b = 0; b < outputs.size(); ++b) {
    const int factor = outputs[b].height / outputs[b].feat_h;
    const auto unl = unlabeled_cells(*annotations[b], known, factor);
    for (int p = 0; p < static_cast<int>(unl.size()); ++p)
      if (unl[static_cast<std::size_t>(p)]) pool.push_back({static_cast<int>(b), p});
  }
  std::vector<PixelRef> out;
  for (int i : rng.sample_without_replacement(static_cast<int>(pool.size()), n)) out.push_back(pool[static_cast<std::size_t>(i)]);
  return out;
}

RepulsionResult repulsion_loss(std::span<const double> features, std::span<const double> prototypes, int channels,
                               double margin) {
  const int U = static_cast<int>(features.size()) / channels;
  const int K = static_cast<int>(prototypes.size()) / channels;
  if (K < 1) throw std::invalid_argument("need at least one known-class prototype");
  RepulsionResult r;
  r.grad_features.assign(features.size(), 0.0);
  r.nearest.assign(static_cast<std::size_t>(U), 0);
  if (U == 0) return r;
  std::vector<double> wn(static_cast<std::size_t>(K));
  for (int k = 0; k < K; ++k) {
    wn[static_cast<std::size_t>(k)] = norm(prototypes.data() + k * channels, channels);
    if (wn[static_cast<std::size_t>(k)] == 0.0) throw std::invalid_argument("zero-norm known-class prototype");
  }
  for (int u = 0; u < U; ++u) {
    const double* z = features.data() + u * channels;
    const double zn = norm(z, channels);
    if (zn == 0.0) throw std::invalid_argument("zero-norm unlabeled feature");
    int best = 0;
    double best_s = -std::numeric_limits<double>::infinity();
    for (int k = 0; k < K; ++k) {
      const double s = dot(z, prototypes.data() + k * channels, channels) / (zn * wn[static_cast<std::size_t>(k)]);
      if (s > best_s) {
        best_s = s;
        best = k;
      }
    }
    r.nearest[static_cast<std::size_t>(u)] = best;
    if (best_s <= margin) continue;
    r.value += (best_s - margin) / U;
    const double* w = prototypes.data() + best * channels;
    double* g = r.grad_features.data() + u * channels;
    for (int c = 0; c < channels; ++c)
      g[c] = (w[c] / wn[static_cast<std::size_t>(best)] - best_s * z[c] / zn) / (zn * U);
  }
  return r;
}

double total_loss(double pan, double reg, double rep, double lambda_reg, double lambda_rep) {
  for (double v : {pan, reg, rep, lambda_reg, lambda_rep})
    if (!std::isfinite(v)) throw std::invalid_argument("non-finite loss term");
  return pan + lambda_reg * reg + lambda_rep * rep;
}

// ---------------------------------------------------------------------------

int assign_cluster(std::span<const double> point, std::span<const double> centers, int channels) {
  const int K = static_cast<int>(centers.size()) / channels;
  const double pn = norm(point.data(), channels);
  int best = 0;
  double best_s = -std::numeric_limits<double>::infinity();
  for (int k = 0; k < K; ++k) {
    const double cn = norm(centers.data() + k * channels, channels);
    const double s = (pn == 0.0 || cn == 0.0) ? 0.0 : dot(point.data(), centers.data() + k * channels, channels) / (pn * cn);
    if (s > best_s) {
      best_s = s;
      best = k;
    }
  }
  return best;
}

KMeansResult spherical_kmeans(std::span<const double> points, int channels, int k, std::uint64_t seed,
                              int max_iterations) {
  const int n = static_cast<int>(points.size()) / channels;
  if (k < 1 || n < k) throw std::invalid_argument("k-means needs at least k points");
  std::vector<double> unit(points.begin(), points.end());
  for (int i = 0; i < n; ++i) {
    double* p = unit.data() + i * channels;
    const double pn = norm(p, channels);
    if (pn > 0.0)
      for (int c = 0; c < channels; ++c) p[c] /= pn;
  }
  auto cos_to = [&](int i, const double* center) { return dot(unit.data() + i * channels, center, channels); };

  KMeansResult res;
  res.centers.assign(static_cast<std::size_t>(k * channels), 0.0);
  Rng rng(seed);
  const int first = static_cast<int>(rng.below(static_cast<std::uint64_t>(n)));
  std::copy_n(unit.data() + first * channels, channels, res.centers.data());
  for (int j = 1; j < k; ++j) {
    int far = 0;
    double far_s = std::numeric_limits<double>::infinity();
    for (int i = 0; i < n; ++i) {
      double s = -std::numeric_limits<double>::infinity();
      for (int m = 0; m < j; ++m) s = std::max(s, cos_to(i, res.centers.data() + m * channels));
      if (s < far_s) {
        far_s = s;
        far = i;
      }
    }
    std::copy_n(unit.data() + far * channels, channels, res.centers.data() + j * channels);
  }

  res.labels.assign(static_cast<std::size_t>(n), -1);
  for (int it = 0; it < max_iterations; ++it) {
    res.iterations = it + 1;
    bool changed = false;
    for (int i = 0; i < n; ++i) {
      const int a = assign_cluster({unit.data() + i * channels, static_cast<std::size_t>(channels)}, res.centers, channels);
      if (a != res.labels[static_cast<std::size_t>(i)]) changed = true;
      res.labels[static_cast<std::size_t>(i)] = a;
    }
    if (!changed && it > 0) break;
    std::vector<double> sums(static_cast<std::size_t>(k * channels), 0.0);
    std::vector<int> counts(static_cast<std::size_t>(k), 0);
    for (int i = 0; i < n; ++i) {
      const int a = res.labels[static_cast<std::size_t>(i)];
      ++counts[static_cast<std::size_t>(a)];
      for (int c = 0; c < channels; ++c) sums[static_cast<std::size_t>(a * channels + c)] += unit[static_cast<std::size_t>(i * channels + c)];
    }
    for (int j = 0; j < k; ++j) {
      double* center = res.centers.data() + j * channels;
      if (counts[static_cast<std::size_t>(j)] == 0) {
        // re-seed from the point least similar to its own centre
        int far = 0;
        double far_s = std::numeric_limits<double>::infinity();
        for (int i = 0; i < n; ++i) {
          const double s = cos_to(i, res.centers.data() + res.labels[static_cast<std::size_t>(i)] * channels);
          if (s < far_s) {
            far_s = s;
            far = i;
          }
        }
        std::copy_n(unit.data() + far * channels, channels, center);
        continue;
      }
      const double sn = norm(sums.data() + j * channels, channels);
      if (sn == 0.0) continue;
      for (int c = 0; c < channels; ++c) center[c] = sums[static_cast<std::size_t>(j * channels + c)] / sn;
    }
  }
  return res;
}

AuxLossResult aux_loss(std::span<const double> logits, std::span<const int> labels, int k, double lambda_bal) {
  if (k < 2) throw std::invalid_argument("auxiliary loss needs at least two clusters");
  const int R = static_cast<int>(labels.size());
  if (static_cast<int>(logits.size()) != R * k) throw std::invalid_argument("aux logits size mismatch");
  AuxLossResult res;
  res.grad_logits.assign(logits.size(), 0.0);
  if (R == 0) return res;
  std::vector<double> prob(logits.size());
  for (int r = 0; r < R; ++r) {
    const double* g = logits.data() + r * k;
    const double mx = *std::max_element(g, g + k);
    double z = 0.0;
    for (int j = 0; j < k; ++j) z += std::exp(g[j] - mx);
    for (int j = 0; j < k; ++j) prob[static_cast<std::size_t>(r * k + j)] = std::exp(g[j] - mx) / z;
    const int l = labels[static_cast<std::size_t>(r)];
    if (l < 0 || l >= k) throw std::invalid_argument("pseudo-label out of range");
    res.ce += (mx + std::log(z) - g[l]) / R;
    for (int j = 0; j < k; ++j)
      res.grad_logits[static_cast<std::size_t>(r * k + j)] = (prob[static_cast<std::size_t>(r * k + j)] - (j == l ? 1.0 : 0.0)) / R;
  }
  std::vector<double> mean(static_cast<std::size_t>(k), 0.0), logm(static_cast<std::size_t>(k));
  for (int r = 0; r < R; ++r)
    for (int j = 0; j < k; ++j) mean[static_cast<std::size_t>(j)] += prob[static_cast<std::size_t>(r * k + j)] / R;
  for (int j = 0; j < k; ++j) {
    const double m = mean[static_cast<std::size_t>(j)];
    if (m > 0.0) res.kl += m * std::log(m * k);
    logm[static_cast<std::size_t>(j)] = std::log(std::max(m, 1e-300));
  }
  for (int r = 0; r < R; ++r) {
    const double* q = prob.data() + r * k;
    double avg = 0.0;
    for (int j = 0; j < k; ++j) avg += q[j] * logm[static_cast<std::size_t>(j)];
    for (int j = 0; j < k; ++j)
      res.grad_logits[static_cast<std::size_t>(r * k + j)] += lambda_bal * q[j] * (logm[static_cast<std::size_t>(j)] - avg) / R;
  }
  res.value = res.ce + lambda_bal * res.kl;
  return res;
}

std::vector<double> aux_head_forward(const seg::QueryModel& model, std::span<const double> prototypes, int count,
                                     std::vector<double>* hidden) {
  const auto& cfg = model.config();
  const auto& L = model.layout();
  const int C = cfg.feature_dim, Hd = cfg.aux_hidden, K = cfg.aux_clusters;
  if (K < 1) throw std::invalid_argument("model has no auxiliary head");
  std::vector<double> h(static_cast<std::size_t>(count * Hd));
  kernels::matmul_abt(prototypes, model.block(L.aux_w1), h, count, C, Hd);
  const auto b1 = model.block(L.aux_b1);
  for (int r = 0; r < count; ++r)
    for (int j = 0; j < Hd; ++j) {
      auto& v = h[static_cast<std::size_t>(r * Hd + j)];
      v = std::max(0.0, v + b1[static_cast<std::size_t>(j)]);
    }
  std::vector<double> g(static_cast<std::size_t>(count * K));
  kernels::matmul_abt(h, model.block(L.aux_w2), g, count, Hd, K);
  const auto b2 = model.block(L.aux_b2);
  for (int r = 0; r < count; ++r)
    for (int j = 0; j < K; ++j) g[static_cast<std::size_t>(r * K + j)] += b2[static_cast<std::size_t>(j)];
  if (hidden) *hidden = std::move(h);
  return g;
}

std::vector<double> aux_head_backward(const seg::QueryModel& model, std::span<const double> prototypes, int count,
                                      const std::vector<double>& hidden, std::span<const double> grad_logits,
                                      std::span<double> param_grad) {
  const auto& cfg = model.config();
  const auto& L = model.layout();
  const int C = cfg.feature_dim, Hd = cfg.aux_hidden, K = cfg.aux_clusters;
  std::vector<double> tmp(static_cast<std::size_t>(K * Hd));
  kernels::matmul_atb(grad_logits, hidden, tmp, K, count, Hd);
  for (std::size_t i = 0; i < tmp.size(); ++i) param_grad[L.aux_w2.offset + i] += tmp[i];
  for (int r = 0; r < count; ++r)
    for (int j = 0; j < K; ++j) param_grad[L.aux_b2.offset + static_cast<std::size_t>(j)] += grad_logits[static_cast<std::size_t>(r * K + j)];
  std::vector<double> dh(static_cast<std::size_t>(count * Hd));
  kernels::matmul_ab(grad_logits, model.block(L.aux_w2), dh, count, K, Hd);
  for (std::size_t i = 0; i < dh.size(); ++i)
    if (hidden[i] <= 0.0) dh[i] = 0.0;
  std::vector<double> tmp1(static_cast<std::size_t>(Hd * C));
  kernels::matmul_atb(dh, prototypes, tmp1, Hd, count, C);
  for (std::size_t i = 0; i < tmp1.size(); ++i) param_grad[L.aux_w1.offset + i] += tmp1[i];
  for (int r = 0; r < count; ++r)
    for (int j = 0; j < Hd; ++j) param_grad[L.aux_b1.offset + static_cast<std::size_t>(j)] += dh[static_cast<std::size_t>(r * Hd + j)];
  std::vector<double> dp(static_cast<std::size_t>(count * C));
  kernels::matmul_ab(dh, model.block(L.aux_w1), dp, count, Hd, C);
  return dp;
}

// ---------------------------------------------------------------------------

std::vector<double> pooled_prototypes(const FeatureMaps& features, int channels, const std::vector<FutureRegion>& regions) {
  std::vector<double> out(regions.size() * static_cast<std::size_t>(channels), 0.0);
  for (std::size_t r = 0; r < regions.size(); ++r) {
    const auto& reg = regions[r];
    if (reg.support.empty()) throw std::invalid_argument("empty region support");
    const auto F = features[static_cast<std::size_t>(reg.image)];
    const auto P = F.size() / static_cast<std::size_t>(channels);
    for (int c = 0; c < channels; ++c) {
      double s = 0.0;
      for (int p : reg.support) s += F[static_cast<std::size_t>(c) * P + static_cast<std::size_t>(p)];
      out[r * static_cast<std::size_t>(channels) + static_cast<std::size_t>(c)] = s / static_cast<double>(reg.support.size());
    }
  }
  return out;
}

namespace {

std::vector<std::vector<double>> zero_like(const FeatureMaps& features) {
  std::vector<std::vector<double>> g;
  g.reserve(features.size());
  for (const auto& f : features) g.emplace_back(f.size(), 0.0);
  return g;
}

// Spreads d/dp_r evenly over Ω_r.
void scatter_pooled(std::vector<std::vector<double>>& grad, int channels, const FutureRegion& reg, const double* g,
                    double scale) {
  auto& dF = grad[static_cast<std::size_t>(reg.image)];
  const auto P = dF.size() / static_cast<std::size_t>(channels);
  const double inv = scale / static_cast<double>(reg.support.size());
  for (int c = 0; c < channels; ++c)
    for (int p : reg.support) dF[static_cast<std::size_t>(c) * P + static_cast<std::size_t>(p)] += g[c] * inv;
}

}  // namespace

FeatureLoss region_contrast_on_features(const FeatureMaps& features, int channels,
                                        const std::vector<FutureRegion>& regions, double temperature) {
  FeatureLoss out;
  out.grad_features = zero_like(features);
  if (regions.empty()) return out;
  const auto protos = pooled_prototypes(features, channels, regions);
  std::vector<double> anchors;
  std::vector<int> tags;
  for (std::size_t r = 0; r < regions.size(); ++r) {
    const auto F = features[static_cast<std::size_t>(regions[r].image)];
    const auto P = F.size() / static_cast<std::size_t>(channels);
    for (int p : regions[r].anchor_pixels) {
      for (int c = 0; c < channels; ++c) anchors.push_back(F[static_cast<std::size_t>(c) * P + static_cast<std::size_t>(p)]);
      tags.push_back(static_cast<int>(r));
    }
  }
  const auto cr = region_contrast_loss(anchors, tags, protos, channels, temperature);
  out.value = cr.value;
  std::size_t n = 0;
  for (std::size_t r = 0; r < regions.size(); ++r) {
    auto& dF = out.grad_features[static_cast<std::size_t>(regions[r].image)];
    const auto P = dF.size() / static_cast<std::size_t>(channels);
    for (int p : regions[r].anchor_pixels) {
      for (int c = 0; c < channels; ++c)
        dF[static_cast<std::size_t>(c) * P + static_cast<std::size_t>(p)] += cr.grad_anchors[n * static_cast<std::size_t>(channels) + static_cast<std::size_t>(c)];
      ++n;
    }
    scatter_pooled(out.grad_features, channels, regions[r], cr.grad_prototypes.data() + r * static_cast<std::size_t>(channels), 1.0);
  }
  return out;
}

FeatureLoss repulsion_on_features(const FeatureMaps& features, int channels, const std::vector<PixelRef>& pixels,
                                  std::span<const double> prototypes, double margin) {
  FeatureLoss out;
  out.grad_features = zero_like(features);
  if (pixels.empty()) return out;
  std::vector<double> z;
  z.reserve(pixels.size() * static_cast<std::size_t>(channels));
  for (const auto& pr : pixels) {
    const auto F = features[static_cast<std::size_t>(pr.image)];
    const auto P = F.size() / static_cast<std::size_t>(channels);
    for (int c = 0; c < channels; ++c) z.push_back(F[static_cast<std::size_t>(c) * P + static_cast<std::size_t>(pr.pixel)]);
  }
  const auto rr = repulsion_loss(z, prototypes, channels, margin);
  out.value = rr.value;
  for (std::size_t u = 0; u < pixels.size(); ++u) {
    auto& dF = out.grad_features[static_cast<std::size_t>(pixels[u].image)];
    const auto P = dF.size() / static_cast<std::size_t>(channels);
    for (int c = 0; c < channels; ++c)
      dF[static_cast<std::size_t>(c) * P + static_cast<std::size_t>(pixels[u].pixel)] += rr.grad_features[u * static_cast<std::size_t>(channels) + static_cast<std::size_t>(c)];
  }
  return out;
}

FeatureLoss aux_on_features(const seg::QueryModel& model, const FeatureMaps& features,
                            const std::vector<FutureRegion>& regions, std::span<const int> labels, double lambda_bal,
                            double weight, std::span<double> param_grad) {
  const int C = model.config().feature_dim;
  const int K = model.config().aux_clusters;
  const int R = static_cast<int>(regions.size());
  FeatureLoss out;
  out.grad_features = zero_like(features);
  if (R == 0) return out;
  const auto protos = pooled_prototypes(features, C, regions);
  std::vector<double> hidden;
  const auto logits = aux_head_forward(model, protos, R, &hidden);
  const auto al = aux_loss(logits, labels, K, lambda_bal);
  out.value = al.value;
  std::vector<double> gl = al.grad_logits;
  for (auto& v : gl) v *= weight;
  const auto dp = aux_head_backward(model, protos, R, hidden, gl, param_grad);
  for (int r = 0; r < R; ++r) scatter_pooled(out.grad_features, C, regions[static_cast<std::size_t>(r)], dp.data() + r * C, 1.0);
  return out;
}

// ---------------------------------------------------------------------------

namespace {

std::vector<double> class_centroid_rows(const std::vector<seg::ModelOutput>& outputs, const seg::TrainBatch& batch,
                                        const seg::QueryModel& model, const panoptic::ClassSet& known) {
  // batch centroids of labeled cells; classifier rows for classes absent from the batch
  auto protos = known_class_prototypes(model, known);
  const int C = model.config().feature_dim;
  std::map<int, std::vector<double>> sums;
  for (std::size_t b = 0; b < outputs.size(); ++b) {
    const int P = outputs[b].feat_h * outputs[b].feat_w;
    const auto lab = seg::cell_labels(*batch.annotations[b], outputs[b].height / outputs[b].feat_h);
    for (int p = 0; p < P; ++p) {
      const int c = lab[static_cast<std::size_t>(p)];
      if (c <= 0 || !known.count(c)) continue;
      auto& s = sums[c];
      s.resize(static_cast<std::size_t>(C), 0.0);
      for (int k = 0; k < C; ++k) s[static_cast<std::size_t>(k)] += outputs[b].features[static_cast<std::size_t>(k * P + p)];
    }
  }
  for (auto& [c, s] : sums) {
    const double n = norm(s.data(), C);
    if (n == 0.0) continue;
    for (auto& v : s) v /= n;
    protos[c] = s;
  }
  std::vector<double> rows;
  for (const auto& [c, v] : protos) rows.insert(rows.end(), v.begin(), v.end());
  return rows;
}

void add_into(std::vector<seg::OutputGrads>& grads, const FeatureLoss& loss, double scale) {
  for (std::size_t b = 0; b < grads.size(); ++b) {
    auto& dst = grads[b].features;
    const auto& src = loss.grad_features[b];
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += scale * src[i];
  }
}

}  // namespace

StepRecord train_step(seg::QueryModel& model, seg::OptimizerState& opt, const seg::TrainBatch& batch,
                      const StepContext& ctx, const FutcrConfig& cfg, AuxState& aux, const seg::LossWeights& weights) {
  StepRecord rec;
  rec.iteration = ctx.iteration;
  const auto outputs = seg::forward_batch(model, batch);
  auto pan = seg::panoptic_loss_batch(outputs, batch, *ctx.space, ctx.current, weights);
  rec.loss_pan = pan.value;
  std::vector<seg::OutputGrads> grads;
  grads.reserve(outputs.size());
  for (auto& pl : pan.per_image) grads.push_back(std::move(pl.grads));

  const int C = model.config().feature_dim;
  const double lreg = cfg.effective_lambda_reg(ctx.continual_step);
  const double lrep = cfg.effective_lambda_rep(ctx.continual_step);
  const bool use_aux = cfg.aux.enabled && model.config().aux_clusters >= 2 && (!cfg.base_only || ctx.continual_step == 1);
  Rng rng(derive_seed(ctx.seed, {0xF7C8, static_cast<std::uint64_t>(ctx.iteration)}));

  FeatureMaps fmaps;
  for (const auto& o : outputs) fmaps.emplace_back(o.features);

  // discovery is read-only and always runs so the record is comparable across variants
  auto regions = discover_future_regions(outputs, batch.unlabeled_reference(), ctx.known, cfg);
  rec.num_regions = static_cast<int>(regions.size());

  if (lreg != 0.0 && !regions.empty()) {
    for (auto& r : regions) r.anchor_pixels = sample_anchors(r.support, cfg.pixels_per_region, rng);
    const auto reg = region_contrast_on_features(fmaps, C, regions, cfg.temperature);
    rec.loss_reg = reg.value;
    add_into(grads, reg, lreg);
  }

  if (lrep != 0.0) {
    const auto picks = sample_unlabeled_pixels(outputs, batch.unlabeled_reference(), ctx.known, cfg.unlabeled_samples, rng);
    rec.num_unlabeled = static_cast<int>(picks.size());
    if (!picks.empty()) {
      std::vector<double> w;
      if (cfg.known_source == KnownPrototypeSource::ClassifierRows) {
        for (const auto& [c, v] : known_class_prototypes(model, ctx.known)) w.insert(w.end(), v.begin(), v.end());
      } else {
        w = class_centroid_rows(outputs, batch, model, ctx.known);
      }
      const auto rep = repulsion_on_features(fmaps, C, picks, w, cfg.margin);
      rec.loss_rep = rep.value;
      add_into(grads, rep, lrep);
    }
  }

  std::vector<double> head_grad;
  if (use_aux && !regions.empty()) {
    const int K = model.config().aux_clusters;
    const auto protos = pooled_prototypes(fmaps, C, regions);
    aux.buffer.insert(aux.buffer.end(), protos.begin(), protos.end());
    const auto cap = static_cast<std::size_t>(cfg.aux.buffer_capacity * C);
    if (aux.buffer.size() > cap)
      aux.buffer.erase(aux.buffer.begin(), aux.buffer.begin() + static_cast<std::ptrdiff_t>(aux.buffer.size() - cap));
    const int nbuf = static_cast<int>(aux.buffer.size()) / C;
    if (nbuf >= K && (aux.centers.empty() || aux.iterations % cfg.aux.refresh_period == 0))
      aux.centers = spherical_kmeans(aux.buffer, C, K, derive_seed(ctx.seed, {0xA0C, static_cast<std::uint64_t>(ctx.iteration)}),
                                     cfg.aux.kmeans_iterations)
                        .centers;
    if (!aux.centers.empty()) {
      std::vector<int> labels(regions.size());
      for (std::size_t r = 0; r < regions.size(); ++r)
        labels[r] = assign_cluster({protos.data() + r * static_cast<std::size_t>(C), static_cast<std::size_t>(C)}, aux.centers, C);
      head_grad.assign(model.layout().total, 0.0);
      const auto al = aux_on_features(model, fmaps, regions, labels, cfg.aux.lambda_bal, cfg.aux.weight, head_grad);
      rec.loss_aux = al.value;
      add_into(grads, al, 1.0);
    }
  }
  if (use_aux) ++aux.iterations;

  rec.loss_total = total_loss(rec.loss_pan, rec.loss_reg, rec.loss_rep, lreg, lrep) +
                   (use_aux ? cfg.aux.weight * rec.loss_aux : 0.0);

  auto g = seg::backward_batch(model, outputs, grads);
  if (!head_grad.empty())
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += head_grad[i];
  seg::adamw_step(model.params(), g, opt);
  return rec;
}

}  // namespace futcr::future
