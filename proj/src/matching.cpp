#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

#include "futcr/segmenter.hpp"

namespace futcr::seg {

std::vector<int> hungarian(std::span<const double> cost, int rows, int cols) {
  if (rows > cols) throw std::invalid_argument("hungarian: more rows than columns");
  if (rows == 0) return {};
  const double inf = std::numeric_limits<double>::infinity();
  auto a = [&](int i, int j) { return cost[static_cast<std::size_t>((i - 1) * cols + (j - 1))]; };
  std::vector<double> u(static_cast<std::size_t>(rows + 1), 0.0), v(static_cast<std::size_t>(cols + 1), 0.0);
  std::vector<int> p(static_cast<std::size_t>(cols + 1), 0), way(static_cast<std::size_t>(cols + 1), 0);
  for (int i = 1; i <= rows; ++i) {
    p[0] = i;
    int j0 = 0;
    std::vector<double> minv(static_cast<std::size_t>(cols + 1), inf);
    std::vector<bool> used(static_cast<std::size_t>(cols + 1), false);
    do {
      used[static_cast<std::size_t>(j0)] = true;
      const int i0 = p[static_cast<std::size_t>(j0)];
      double delta = inf;
      int j1 = 0;
      for (int j = 1; j <= cols; ++j) {
        if (used[static_cast<std::size_t>(j)]) continue;
        const double cur = a(i0, j) - u[static_cast<std::size_t>(i0)] - v[static_cast<std::size_t>(j)];
        if (cur < minv[static_cast<std::size_t>(j)]) {
          minv[static_cast<std::size_t>(j)] = cur;
          way[static_cast<std::size_t>(j)] = j0;
        }
        if (minv[static_cast<std::size_t>(j)] < delta) {
          delta = minv[static_cast<std::size_t>(j)];
          j1 = j;
        }
      }
      for (int j = 0; j <= cols; ++j) {
        if (used[static_cast<std::size_t>(j)]) {
          u[static_cast<std::size_t>(p[static_cast<std::size_t>(j)])] += delta;
          v[static_cast<std::size_t>(j)] -= delta;
        } else {
          minv[static_cast<std::size_t>(j)] -= delta;
        }
      }
      j0 = j1;
    } while (p[static_cast<std::size_t>(j0)] != 0);
    do {
      const int j1 = way[static_cast<std::size_t>(j0)];
      p[static_cast<std::size_t>(j0)] = p[static_cast<std::size_t>(j1)];
      j0 = j1;
    } while (j0 != 0);
  }
  std::vector<int> assign(static_cast<std::size_t>(rows), -1);
  for (int j = 1; j <= cols; ++j)
    if (p[static_cast<std::size_t>(j)] != 0) assign[static_cast<std::size_t>(p[static_cast<std::size_t>(j)] - 1)] = j - 1;
  return assign;
}

namespace {

double softplus(double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))); }

struct QueryStats {
  std::vector<double> softplus_sum;  // Σ_p softplus(l_qp)
  std::vector<double> mask_sum;      // Σ_p m_qp
  std::vector<double> probs;         // softmax rows, Q × (K+1)
};

QueryStats query_stats(const ModelOutput& out) {
  const int Q = out.num_queries, HW = out.height * out.width, K1 = out.num_logits;
  QueryStats s;
  s.softplus_sum.assign(static_cast<std::size_t>(Q), 0.0);
  s.mask_sum.assign(static_cast<std::size_t>(Q), 0.0);
  s.probs.resize(static_cast<std::size_t>(Q * K1));
  for (int q = 0; q < Q; ++q) {
    const double* l = out.mask_logits.data() + static_cast<std::size_t>(q * HW);
    const double* m = out.masks.data() + static_cast<std::size_t>(q * HW);
    double sp = 0.0, ms = 0.0;
    for (int i = 0; i < HW; ++i) {
      sp += softplus(l[i]);
      ms += m[i];
    }
    s.softplus_sum[static_cast<std::size_t>(q)] = sp;
    s.mask_sum[static_cast<std::size_t>(q)] = ms;
    const double* z = out.logits.data() + static_cast<std::size_t>(q * K1);
    const double mx = *std::max_element(z, z + K1);
    double sum = 0.0;
    for (int k = 0; k < K1; ++k) sum += std::exp(z[k] - mx);
    for (int k = 0; k < K1; ++k) s.probs[static_cast<std::size_t>(q * K1 + k)] = std::exp(z[k] - mx) / sum;
  }
  return s;
}

std::vector<double> cost_matrix(const ModelOutput& out, const std::vector<panoptic::Segment>& gt, const LossWeights& w,
                                const QueryStats& st) {
  const int Q = out.num_queries, HW = out.height * out.width, K1 = out.num_logits;
  const auto S = static_cast<int>(gt.size());
  std::vector<double> cost(static_cast<std::size_t>(S * Q));
  for (int s = 0; s < S; ++s) {
    const auto& seg = gt[static_cast<std::size_t>(s)];
    const double area = static_cast<double>(seg.pixels.size());
    for (int q = 0; q < Q; ++q) {
      const double* l = out.mask_logits.data() + static_cast<std::size_t>(q * HW);
      const double* m = out.masks.data() + static_cast<std::size_t>(q * HW);
      double lin = 0.0, inter = 0.0;
      for (int p : seg.pixels) {
        lin += l[p];
        inter += m[p];
      }
      const double bce = (st.softplus_sum[static_cast<std::size_t>(q)] - lin) / HW;
      const double dice = 1.0 - (2.0 * inter + 1.0) / (st.mask_sum[static_cast<std::size_t>(q)] + area + 1.0);
      const double prob = st.probs[static_cast<std::size_t>(q * K1 + seg.class_id - 1)];
      cost[static_cast<std::size_t>(s * Q + q)] = -w.cls * prob + w.bce * bce + w.dice * dice;
    }
  }
  return cost;
}

void check_finite(const ModelOutput& out) {
  for (double v : out.logits)
    if (!std::isfinite(v)) throw std::invalid_argument("non-finite logits");
  for (double v : out.mask_logits)
    if (!std::isfinite(v)) throw std::invalid_argument("non-finite mask logits");
}

std::vector<panoptic::Segment> supervised_segments(const panoptic::PanopticMap& ann, const panoptic::LabelSpace& space,
                                                   const panoptic::ClassSet& current) {
  auto segs = panoptic::segments_from_map(ann, space);
  std::erase_if(segs, [&](const panoptic::Segment& s) { return !current.count(s.class_id); });
  return segs;
}

}  // namespace

std::vector<double> matching_cost(const ModelOutput& out, const std::vector<panoptic::Segment>& gt,
                                  const LossWeights& w) {
  return cost_matrix(out, gt, w, query_stats(out));
}

std::vector<int> hungarian_match(const ModelOutput& out, const std::vector<panoptic::Segment>& gt,
                                 const LossWeights& w) {
  if (static_cast<int>(gt.size()) > out.num_queries)
    throw std::invalid_argument("more ground-truth segments than queries");
  if (gt.empty()) return {};
  return hungarian(matching_cost(out, gt, w), static_cast<int>(gt.size()), out.num_queries);
}

PanopticLoss panoptic_loss(const ModelOutput& out, const panoptic::PanopticMap& annotation,
                           const panoptic::LabelSpace& space, const panoptic::ClassSet& current,
                           const LossWeights& w) {
  check_finite(out);
  if (annotation.height != out.height || annotation.width != out.width)
    throw std::invalid_argument("annotation does not match output canvas");
  const auto gt = supervised_segments(annotation, space, current);
  const int Q = out.num_queries, HW = out.height * out.width, K1 = out.num_logits;
  const auto S = static_cast<int>(gt.size());
  if (S > Q) throw std::invalid_argument("more ground-truth segments than queries");

  const auto st = query_stats(out);
  PanopticLoss r;
  r.grads = OutputGrads::zeros(out);
  r.assignment = S > 0 ? hungarian(cost_matrix(out, gt, w, st), S, Q) : std::vector<int>{};

  std::vector<int> target(static_cast<std::size_t>(Q), K1 - 1);
  for (int s = 0; s < S; ++s)
    target[static_cast<std::size_t>(r.assignment[static_cast<std::size_t>(s)])] = gt[static_cast<std::size_t>(s)].class_id - 1;

  // classification: weighted CE, unmatched queries target no-object
  double wsum = 0.0;
  for (int q = 0; q < Q; ++q) wsum += target[static_cast<std::size_t>(q)] == K1 - 1 ? w.no_object : 1.0;
  for (int q = 0; q < Q; ++q) {
    const auto tq = static_cast<std::size_t>(target[static_cast<std::size_t>(q)]);
    const double wq = static_cast<int>(tq) == K1 - 1 ? w.no_object : 1.0;
    const double p = st.probs[static_cast<std::size_t>(q * K1) + tq];
    r.cls += wq * -std::log(std::max(p, 1e-300)) / wsum;
    for (int k = 0; k < K1; ++k) {
      const double onehot = static_cast<std::size_t>(k) == tq ? 1.0 : 0.0;
      r.grads.logits[static_cast<std::size_t>(q * K1 + k)] =
          w.cls * wq / wsum * (st.probs[static_cast<std::size_t>(q * K1 + k)] - onehot);
    }
  }

  // masks: BCE + dice averaged over matched pairs
  if (S > 0) {
    std::vector<double> tgt(static_cast<std::size_t>(HW));
    for (int s = 0; s < S; ++s) {
      const int q = r.assignment[static_cast<std::size_t>(s)];
      const auto& seg = gt[static_cast<std::size_t>(s)];
      std::fill(tgt.begin(), tgt.end(), 0.0);
      for (int p : seg.pixels) tgt[static_cast<std::size_t>(p)] = 1.0;
      const double* l = out.mask_logits.data() + static_cast<std::size_t>(q * HW);
      const double* m = out.masks.data() + static_cast<std::size_t>(q * HW);
      double* g = r.grads.mask_logits.data() + static_cast<std::size_t>(q * HW);
      double inter = 0.0;
      for (int p : seg.pixels) inter += m[p];
      const double msum = st.mask_sum[static_cast<std::size_t>(q)];
      const double area = static_cast<double>(seg.pixels.size());
      double lin = 0.0;
      for (int p : seg.pixels) lin += l[p];
      const double bce = (st.softplus_sum[static_cast<std::size_t>(q)] - lin) / HW;
      const double den = msum + area + 1.0;
      const double dice = 1.0 - (2.0 * inter + 1.0) / den;
      r.bce += bce / S;
      r.dice += dice / S;
      const double kb = w.bce / (S * static_cast<double>(HW));
      const double kd = w.dice / S;
      for (int i = 0; i < HW; ++i) {
        const double t = tgt[static_cast<std::size_t>(i)];
        const double dd = -(2.0 * t * den - (2.0 * inter + 1.0)) / (den * den);
        g[i] = kb * (m[i] - t) + kd * dd * m[i] * (1.0 - m[i]);
      }
    }
  }
  r.total = w.cls * r.cls + w.bce * r.bce + w.dice * r.dice;
  return r;
}

}  // namespace futcr::seg
