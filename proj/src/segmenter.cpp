#include "futcr/segmenter.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <istream>
#include <map>
#include <ostream>
#include <stdexcept>

#include "futcr/binary_io.hpp"
#include "futcr/kernels.hpp"
#include "futcr/rng.hpp"

namespace futcr::seg {

void ModelConfig::validate() const {
  if (image_height % 4 != 0 || image_width % 4 != 0 || image_height <= 0 || image_width <= 0)
    throw std::invalid_argument("image size must be a positive multiple of 4");
  if (feature_dim != query_dim) throw std::invalid_argument("feature_dim must equal query_dim");
  if (num_queries < 1 || num_classes < 1 || feature_dim < 1 || stage1_channels < 1 || stage2_channels < 1)
    throw std::invalid_argument("model sizes must be positive");
  if (aux_clusters < 0 || aux_hidden < 1) throw std::invalid_argument("bad auxiliary head size");
}

ParamLayout ParamLayout::make(const ModelConfig& c) {
  ParamLayout l;
  std::size_t off = 0;
  auto take = [&off](std::size_t n) {
    ParamLayout::Block b{off, n};
    off += n;
    return b;
  };
  const auto k9 = std::size_t{9};
  l.conv1_w = take(static_cast<std::size_t>(c.stage1_channels * c.in_channels) * k9);
  l.conv1_b = take(static_cast<std::size_t>(c.stage1_channels));
  l.conv2_w = take(static_cast<std::size_t>(c.stage2_channels * c.stage1_channels) * k9);
  l.conv2_b = take(static_cast<std::size_t>(c.stage2_channels));
  l.conv3_w = take(static_cast<std::size_t>(c.feature_dim * c.stage2_channels) * k9);
  l.conv3_b = take(static_cast<std::size_t>(c.feature_dim));
  l.queries = take(static_cast<std::size_t>(c.num_queries * c.query_dim));
  l.mask_w = take(static_cast<std::size_t>(c.feature_dim * c.query_dim));
  l.mask_b = take(static_cast<std::size_t>(c.feature_dim));
  l.classifier = take(static_cast<std::size_t>((c.num_classes + 1) * c.query_dim));
  l.aux_w1 = take(static_cast<std::size_t>(c.aux_clusters > 0 ? c.aux_hidden * c.feature_dim : 0));
  l.aux_b1 = take(static_cast<std::size_t>(c.aux_clusters > 0 ? c.aux_hidden : 0));
  l.aux_w2 = take(static_cast<std::size_t>(c.aux_clusters * c.aux_hidden));
  l.aux_b2 = take(static_cast<std::size_t>(c.aux_clusters));
  l.total = off;
  return l;
}

QueryModel::QueryModel(const ModelConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
  cfg_.validate();
  layout_ = ParamLayout::make(cfg_);
  params_.assign(layout_.total, 0.0);
  Rng rng(derive_seed(seed, {0x1417}));
  auto fill = [&](const ParamLayout::Block& b, double sd) {
    for (std::size_t i = 0; i < b.size; ++i) params_[b.offset + i] = sd * rng.normal();
  };
  fill(layout_.conv1_w, std::sqrt(2.0 / (cfg_.in_channels * 9)));
  fill(layout_.conv2_w, std::sqrt(2.0 / (cfg_.stage1_channels * 9)));
  fill(layout_.conv3_w, std::sqrt(1.0 / (cfg_.stage2_channels * 9)));
  fill(layout_.queries, 1.0);
  fill(layout_.mask_w, 1.0 / std::sqrt(cfg_.query_dim));
  fill(layout_.classifier, 1.0 / std::sqrt(cfg_.query_dim));
  fill(layout_.aux_w1, std::sqrt(2.0 / cfg_.feature_dim));
  fill(layout_.aux_w2, 1.0 / std::sqrt(cfg_.aux_hidden));
}

QueryModel::QueryModel(const ModelConfig& cfg, std::vector<double> params) : cfg_(cfg), params_(std::move(params)) {
  cfg_.validate();
  layout_ = ParamLayout::make(cfg_);
  if (params_.size() != layout_.total) throw std::invalid_argument("parameter vector does not match model layout");
}

std::span<const double> QueryModel::classifier_row(int c) const {
  if (c < 0 || c > cfg_.num_classes) throw std::out_of_range("classifier row out of range");
  return {params_.data() + layout_.classifier.offset + static_cast<std::size_t>(c * cfg_.query_dim),
          static_cast<std::size_t>(cfg_.query_dim)};
}

namespace {

kernels::Conv2dShape conv1_shape(const ModelConfig& c) {
  return {c.in_channels, c.image_height, c.image_width, c.stage1_channels, 3, 2, 1};
}
kernels::Conv2dShape conv2_shape(const ModelConfig& c) {
  return {c.stage1_channels, c.image_height / 2, c.image_width / 2, c.stage2_channels, 3, 2, 1};
}
kernels::Conv2dShape conv3_shape(const ModelConfig& c) {
  return {c.stage2_channels, c.feature_height(), c.feature_width(), c.feature_dim, 3, 1, 1};
}

double sigmoid(double x) { return x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x)); }

}  // namespace

ModelOutput forward(const QueryModel& model, std::span<const double> image) {
  const auto& c = model.config();
  const auto& L = model.layout();
  const auto expected = static_cast<std::size_t>(c.in_channels * c.image_height * c.image_width);
  if (image.size() != expected) throw std::invalid_argument("image does not match the model canvas");

  ModelOutput o;
  o.height = c.image_height;
  o.width = c.image_width;
  o.feat_h = c.feature_height();
  o.feat_w = c.feature_width();
  o.feat_dim = c.feature_dim;
  o.num_queries = c.num_queries;
  o.num_logits = c.num_classes + 1;
  const int P = c.feature_pixels(), Q = c.num_queries, D = c.query_dim, HW = c.image_height * c.image_width;
  o.input.assign(image.begin(), image.end());

  const auto s1 = conv1_shape(c), s2 = conv2_shape(c), s3 = conv3_shape(c);
  o.act1.resize(static_cast<std::size_t>(s1.output_size()));
  kernels::conv2d_forward(s1, o.input, model.block(L.conv1_w), model.block(L.conv1_b), o.act1);
  for (auto& v : o.act1) v = std::max(v, 0.0);
  o.act2.resize(static_cast<std::size_t>(s2.output_size()));
  kernels::conv2d_forward(s2, o.act1, model.block(L.conv2_w), model.block(L.conv2_b), o.act2);
  for (auto& v : o.act2) v = std::max(v, 0.0);
  o.features.resize(static_cast<std::size_t>(s3.output_size()));
  kernels::conv2d_forward(s3, o.act2, model.block(L.conv3_w), model.block(L.conv3_b), o.features);

  const auto E = model.block(L.queries);
  o.attention.resize(static_cast<std::size_t>(Q * P));
  kernels::matmul_ab(E, o.features, o.attention, Q, D, P);
  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(D));
  for (int q = 0; q < Q; ++q) {
    double* row = o.attention.data() + static_cast<std::size_t>(q * P);
    double mx = -INFINITY;
    for (int p = 0; p < P; ++p) mx = std::max(mx, row[p] * inv_sqrt_d);
    double sum = 0.0;
    for (int p = 0; p < P; ++p) {
      row[p] = std::exp(row[p] * inv_sqrt_d - mx);
      sum += row[p];
    }
    for (int p = 0; p < P; ++p) row[p] /= sum;
  }
  o.query_features.resize(static_cast<std::size_t>(Q * D));
  kernels::matmul_abt(o.attention, o.features, o.query_features, Q, P, D);
  for (std::size_t i = 0; i < o.query_features.size(); ++i) o.query_features[i] += E[i];

  o.logits.resize(static_cast<std::size_t>(Q * o.num_logits));
  kernels::matmul_abt(o.query_features, model.block(L.classifier), o.logits, Q, D, o.num_logits);

  o.mask_embed.resize(static_cast<std::size_t>(Q * c.feature_dim));
  kernels::matmul_abt(o.query_features, model.block(L.mask_w), o.mask_embed, Q, D, c.feature_dim);
  const auto mb = model.block(L.mask_b);
  for (int q = 0; q < Q; ++q)
    for (int k = 0; k < c.feature_dim; ++k) o.mask_embed[static_cast<std::size_t>(q * c.feature_dim + k)] += mb[static_cast<std::size_t>(k)];

  o.mask_logits_low.resize(static_cast<std::size_t>(Q * P));
  kernels::matmul_ab(o.mask_embed, o.features, o.mask_logits_low, Q, c.feature_dim, P);
  o.mask_logits.resize(static_cast<std::size_t>(Q * HW));
  kernels::bilinear_resize(o.mask_logits_low, Q, o.feat_h, o.feat_w, o.mask_logits, o.height, o.width);
  o.masks.resize(o.mask_logits.size());
  for (std::size_t i = 0; i < o.masks.size(); ++i) o.masks[i] = sigmoid(o.mask_logits[i]);
  return o;
}

OutputGrads OutputGrads::zeros(const ModelOutput& out) {
  OutputGrads g;
  g.logits.assign(out.logits.size(), 0.0);
  g.mask_logits.assign(out.mask_logits.size(), 0.0);
  g.features.assign(out.features.size(), 0.0);
  return g;
}

void backward(const QueryModel& model, const ModelOutput& o, const OutputGrads& g, std::span<double> pg) {
  const auto& c = model.config();
  const auto& L = model.layout();
  if (pg.size() != L.total) throw std::invalid_argument("gradient buffer size mismatch");
  const int P = c.feature_pixels(), Q = c.num_queries, D = c.query_dim, C = c.feature_dim, K1 = o.num_logits;
  auto sub = [&pg](const ParamLayout::Block& b) { return pg.subspan(b.offset, b.size); };
  auto add_into = [](std::span<double> dst, const std::vector<double>& src) {
    for (std::size_t i = 0; i < src.size(); ++i) dst[i] += src[i];
  };

  std::vector<double> d_low(static_cast<std::size_t>(Q * P));
  kernels::bilinear_resize_backward(g.mask_logits, Q, o.feat_h, o.feat_w, d_low, o.height, o.width);

  std::vector<double> d_embed(static_cast<std::size_t>(Q * C));
  kernels::matmul_abt(d_low, o.features, d_embed, Q, P, C);
  std::vector<double> dF(static_cast<std::size_t>(C * P));
  kernels::matmul_atb(o.mask_embed, d_low, dF, C, Q, P);

  std::vector<double> tmp(static_cast<std::size_t>(C * D));
  kernels::matmul_atb(d_embed, o.query_features, tmp, C, Q, D);
  add_into(sub(L.mask_w), tmp);
  auto dmb = sub(L.mask_b);
  for (int q = 0; q < Q; ++q)
    for (int k = 0; k < C; ++k) dmb[static_cast<std::size_t>(k)] += d_embed[static_cast<std::size_t>(q * C + k)];

  std::vector<double> dh(static_cast<std::size_t>(Q * D));
  kernels::matmul_ab(d_embed, model.block(L.mask_w), dh, Q, C, D);
  std::vector<double> dW(static_cast<std::size_t>(K1 * D));
  kernels::matmul_atb(g.logits, o.query_features, dW, K1, Q, D);
  add_into(sub(L.classifier), dW);
  std::vector<double> dh2(static_cast<std::size_t>(Q * D));
  kernels::matmul_ab(g.logits, model.block(L.classifier), dh2, Q, K1, D);
  for (std::size_t i = 0; i < dh.size(); ++i) dh[i] += dh2[i];

  auto dE = sub(L.queries);
  for (std::size_t i = 0; i < dh.size(); ++i) dE[i] += dh[i];

  // h = E + A Fᵀ
  std::vector<double> dA(static_cast<std::size_t>(Q * P));
  kernels::matmul_ab(dh, o.features, dA, Q, C, P);
  std::vector<double> dF2(static_cast<std::size_t>(C * P));
  kernels::matmul_atb(dh, o.attention, dF2, C, Q, P);
  for (std::size_t i = 0; i < dF.size(); ++i) dF[i] += dF2[i];

  // A = softmax(E F / √d)
  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(D));
  std::vector<double> dS(static_cast<std::size_t>(Q * P));
  for (int q = 0; q < Q; ++q) {
    const double* a = o.attention.data() + static_cast<std::size_t>(q * P);
    const double* da = dA.data() + static_cast<std::size_t>(q * P);
    double dot = 0.0;
    for (int p = 0; p < P; ++p) dot += a[p] * da[p];
    for (int p = 0; p < P; ++p) dS[static_cast<std::size_t>(q * P + p)] = a[p] * (da[p] - dot) * inv_sqrt_d;
  }
  std::vector<double> dE2(static_cast<std::size_t>(Q * D));
  kernels::matmul_abt(dS, o.features, dE2, Q, P, D);
  for (std::size_t i = 0; i < dE2.size(); ++i) dE[i] += dE2[i];
  kernels::matmul_atb(model.block(L.queries), dS, dF2, C, Q, P);
  for (std::size_t i = 0; i < dF.size(); ++i) dF[i] += dF2[i] + g.features[i];

  const auto s1 = conv1_shape(c), s2 = conv2_shape(c), s3 = conv3_shape(c);
  std::vector<double> d_act2(o.act2.size());
  kernels::conv2d_backward(s3, o.act2, model.block(L.conv3_w), dF, d_act2, sub(L.conv3_w), sub(L.conv3_b));
  for (std::size_t i = 0; i < d_act2.size(); ++i)
    if (o.act2[i] <= 0.0) d_act2[i] = 0.0;
  std::vector<double> d_act1(o.act1.size());
  kernels::conv2d_backward(s2, o.act1, model.block(L.conv2_w), d_act2, d_act1, sub(L.conv2_w), sub(L.conv2_b));
  for (std::size_t i = 0; i < d_act1.size(); ++i)
    if (o.act1[i] <= 0.0) d_act1[i] = 0.0;
  kernels::conv2d_backward(s1, o.input, model.block(L.conv1_w), d_act1, {}, sub(L.conv1_w), sub(L.conv1_b));
}

std::vector<double> downsample_mask(const ModelOutput& out, int q) {
  std::vector<double> low(static_cast<std::size_t>(out.feat_h * out.feat_w));
  const int factor = out.height / out.feat_h;
  kernels::area_downsample(std::span<const double>(out.masks).subspan(static_cast<std::size_t>(q * out.height * out.width),
                                                                       static_cast<std::size_t>(out.height * out.width)),
                           1, out.height, out.width, factor, low);
  return low;
}

std::vector<double> unlabeled_ratio(const panoptic::PanopticMap& annotation, int factor) {
  std::vector<double> ind(static_cast<std::size_t>(annotation.size()));
  for (std::size_t i = 0; i < ind.size(); ++i) ind[i] = annotation.semantic[i] == 0 ? 1.0 : 0.0;
  std::vector<double> out(static_cast<std::size_t>((annotation.height / factor) * (annotation.width / factor)));
  kernels::area_downsample(ind, 1, annotation.height, annotation.width, factor, out);
  return out;
}

std::vector<int> cell_labels(const panoptic::PanopticMap& annotation, int factor) {
  const int fh = annotation.height / factor, fw = annotation.width / factor;
  std::vector<int> out(static_cast<std::size_t>(fh * fw), -1);
  std::map<int, int> count;
  for (int y = 0; y < fh; ++y)
    for (int x = 0; x < fw; ++x) {
      count.clear();
      for (int dy = 0; dy < factor; ++dy)
        for (int dx = 0; dx < factor; ++dx)
          ++count[annotation.semantic[static_cast<std::size_t>((y * factor + dy) * annotation.width + x * factor + dx)]];
      for (const auto& [c, n] : count)
        if (2 * n > factor * factor) out[static_cast<std::size_t>(y * fw + x)] = c;
    }
  return out;
}

panoptic::PanopticMap panoptic_inference(const ModelOutput& out, const panoptic::LabelSpace& space,
                                         const InferenceSettings& s) {
  const int Q = out.num_queries, K1 = out.num_logits, HW = out.height * out.width;
  std::vector<int> label(static_cast<std::size_t>(Q), 0);
  std::vector<double> score(static_cast<std::size_t>(Q), 0.0);
  std::vector<int> kept;
  for (int q = 0; q < Q; ++q) {
    const double* l = out.logits.data() + static_cast<std::size_t>(q * K1);
    const double mx = *std::max_element(l, l + K1);
    double sum = 0.0;
    for (int k = 0; k < K1; ++k) sum += std::exp(l[k] - mx);
    int best = 0;
    for (int k = 1; k < K1 - 1; ++k)
      if (l[k] > l[best]) best = k;
    const double p = std::exp(l[best] - mx) / sum;
    if (p >= s.score_threshold) {
      label[static_cast<std::size_t>(q)] = best + 1;
      score[static_cast<std::size_t>(q)] = p;
      kept.push_back(q);
    }
  }
  panoptic::PanopticMap map(out.height, out.width);
  std::vector<int> owner(static_cast<std::size_t>(HW), -1);
  for (int i = 0; i < HW; ++i) {
    int best = -1;
    double best_v = -1.0;
    for (int q : kept) {
      const double m = out.masks[static_cast<std::size_t>(q * HW + i)];
      if (m < s.mask_threshold) continue;
      const double v = score[static_cast<std::size_t>(q)] * m;
      if (v > best_v) {
        best_v = v;
        best = q;
      }
    }
    owner[static_cast<std::size_t>(i)] = best;
  }
  // thing queries get per-class instance ids in query order; stuff merges
  std::vector<int> instance_of(static_cast<std::size_t>(Q), 0);
  std::vector<int> next_id(static_cast<std::size_t>(space.num_classes + 1), 0);
  std::vector<bool> used(static_cast<std::size_t>(Q), false);
  for (int i = 0; i < HW; ++i)
    if (owner[static_cast<std::size_t>(i)] >= 0) used[static_cast<std::size_t>(owner[static_cast<std::size_t>(i)])] = true;
  for (int q : kept) {
    if (!used[static_cast<std::size_t>(q)]) continue;
    const int cls = label[static_cast<std::size_t>(q)];
    if (space.thing(cls)) instance_of[static_cast<std::size_t>(q)] = ++next_id[static_cast<std::size_t>(cls)];
  }
  for (int i = 0; i < HW; ++i) {
    const int q = owner[static_cast<std::size_t>(i)];
    if (q < 0) continue;
    map.semantic[static_cast<std::size_t>(i)] = label[static_cast<std::size_t>(q)];
    map.instance[static_cast<std::size_t>(i)] = instance_of[static_cast<std::size_t>(q)];
  }
  return map;
}

OptimizerState make_optimizer(std::size_t num_params, const AdamWConfig& cfg) {
  OptimizerState s;
  s.m.assign(num_params, 0.0);
  s.v.assign(num_params, 0.0);
  s.config = cfg;
  return s;
}

void adamw_step(std::span<double> params, std::span<const double> grads, OptimizerState& st) {
  if (params.size() != grads.size() || st.m.size() != params.size())
    throw std::invalid_argument("optimizer shape mismatch");
  for (double g : grads)
    if (!std::isfinite(g)) throw std::runtime_error("non-finite gradient");
  const auto& c = st.config;
  ++st.step;
  const double bc1 = 1.0 - std::pow(c.beta1, static_cast<double>(st.step));
  const double bc2 = 1.0 - std::pow(c.beta2, static_cast<double>(st.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    st.m[i] = c.beta1 * st.m[i] + (1.0 - c.beta1) * grads[i];
    st.v[i] = c.beta2 * st.v[i] + (1.0 - c.beta2) * grads[i] * grads[i];
    const double mhat = st.m[i] / bc1, vhat = st.v[i] / bc2;
    params[i] -= c.lr * (mhat / (std::sqrt(vhat) + c.eps) + c.weight_decay * params[i]);
  }
}

std::vector<ModelOutput> forward_batch(const QueryModel& model, const TrainBatch& batch) {
  std::vector<ModelOutput> out(batch.images.size());
#pragma omp parallel for schedule(static)
  for (int b = 0; b < static_cast<int>(batch.images.size()); ++b)
    out[static_cast<std::size_t>(b)] = forward(model, batch.images[static_cast<std::size_t>(b)]);
  return out;
}

BatchPanopticLoss panoptic_loss_batch(const std::vector<ModelOutput>& outputs, const TrainBatch& batch,
                                      const panoptic::LabelSpace& space, const panoptic::ClassSet& current,
                                      const LossWeights& w) {
  BatchPanopticLoss r;
  const auto B = outputs.size();
  r.per_image.resize(B);
#pragma omp parallel for schedule(static)
  for (int b = 0; b < static_cast<int>(B); ++b)
    r.per_image[static_cast<std::size_t>(b)] =
        panoptic_loss(outputs[static_cast<std::size_t>(b)], *batch.annotations[static_cast<std::size_t>(b)], space, current, w);
  const double inv = 1.0 / static_cast<double>(B);
  for (auto& pl : r.per_image) {
    r.value += pl.total;
    for (auto& v : pl.grads.logits) v *= inv;
    for (auto& v : pl.grads.mask_logits) v *= inv;
  }
  r.value *= inv;
  return r;
}

std::vector<double> backward_batch(const QueryModel& model, const std::vector<ModelOutput>& outputs,
                                   const std::vector<OutputGrads>& grads) {
  const auto n = model.layout().total;
  std::vector<std::vector<double>> per(outputs.size(), std::vector<double>(n, 0.0));
#pragma omp parallel for schedule(static)
  for (int b = 0; b < static_cast<int>(outputs.size()); ++b)
    backward(model, outputs[static_cast<std::size_t>(b)], grads[static_cast<std::size_t>(b)], per[static_cast<std::size_t>(b)]);
  std::vector<double> total(n, 0.0);
  for (const auto& g : per)
    for (std::size_t i = 0; i < n; ++i) total[i] += g[i];
  return total;
}

StepResult train_step(QueryModel& model, OptimizerState& opt, const TrainBatch& batch,
                      const panoptic::LabelSpace& space, const panoptic::ClassSet& current, const LossWeights& w) {
  const auto outputs = forward_batch(model, batch);
  auto pan = panoptic_loss_batch(outputs, batch, space, current, w);
  std::vector<OutputGrads> grads;
  grads.reserve(outputs.size());
  for (auto& pl : pan.per_image) grads.push_back(std::move(pl.grads));
  const auto g = backward_batch(model, outputs, grads);
  adamw_step(model.params(), g, opt);
  return {pan.value};
}

namespace {
constexpr char kCkptMagic[8] = {'F', 'T', 'C', 'R', 'C', 'K', 'P', 'T'};
constexpr std::uint32_t kCkptVersion = 1;
}  // namespace

void write_checkpoint(std::ostream& os, const Checkpoint& ck) {
  using namespace io;
  os.write(kCkptMagic, 8);
  put_u32(os, kCkptVersion);
  const auto& c = ck.config;
  for (int v : {c.image_height, c.image_width, c.in_channels, c.stage1_channels, c.stage2_channels, c.feature_dim,
                c.num_queries, c.query_dim, c.num_classes, c.aux_clusters, c.aux_hidden})
    put_i32(os, v);
  put_f64s(os, ck.params);
  put_f64s(os, ck.optimizer.m);
  put_f64s(os, ck.optimizer.v);
  put_u64(os, static_cast<std::uint64_t>(ck.optimizer.step));
  const auto& a = ck.optimizer.config;
  for (double v : {a.lr, a.beta1, a.beta2, a.eps, a.weight_decay}) put_f64(os, v);
  put_i32(os, ck.step_index);
  put_string(os, ck.config_hash);
  if (!os) throw std::runtime_error("failed writing checkpoint");
}

Checkpoint read_checkpoint(std::istream& is) {
  using namespace io;
  char magic[8];
  is.read(magic, 8);
  if (!is || std::memcmp(magic, kCkptMagic, 8) != 0) throw std::runtime_error("not a checkpoint file");
  if (get_u32(is) != kCkptVersion) throw std::runtime_error("unsupported checkpoint version");
  Checkpoint ck;
  auto& c = ck.config;
  for (int* v : {&c.image_height, &c.image_width, &c.in_channels, &c.stage1_channels, &c.stage2_channels,
                 &c.feature_dim, &c.num_queries, &c.query_dim, &c.num_classes, &c.aux_clusters, &c.aux_hidden})
    *v = get_i32(is);
  ck.params = get_f64s(is);
  ck.optimizer.m = get_f64s(is);
  ck.optimizer.v = get_f64s(is);
  ck.optimizer.step = static_cast<std::int64_t>(get_u64(is));
  auto& a = ck.optimizer.config;
  for (double* v : {&a.lr, &a.beta1, &a.beta2, &a.eps, &a.weight_decay}) *v = get_f64(is);
  ck.step_index = get_i32(is);
  ck.config_hash = get_string(is);
  if (ck.params.size() != ParamLayout::make(c).total) throw std::runtime_error("checkpoint parameter count mismatch");
  return ck;
}

}  // namespace futcr::seg
