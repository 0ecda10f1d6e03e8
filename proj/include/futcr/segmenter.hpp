#pragma once

#include <cstdint>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "futcr/panoptic.hpp"

namespace futcr::seg {

struct ModelConfig {
  int image_height = 64;
  int image_width = 64;
  int in_channels = 3;
  int stage1_channels = 16;
  int stage2_channels = 32;
  int feature_dim = 32;  // C_f; equals query_dim because queries read features additively
  int num_queries = 16;
  int query_dim = 32;
  int num_classes = 8;  // K; classifier has K+1 rows, the last is "no object"
  int aux_clusters = 0; // auxiliary head width (0 disables the head's parameters)
  int aux_hidden = 16;

  int feature_height() const { return image_height / 4; }
  int feature_width() const { return image_width / 4; }
  int feature_pixels() const { return feature_height() * feature_width(); }
  void validate() const;
  bool operator==(const ModelConfig&) const = default;
};

/// Offsets of every parameter block inside the flat parameter vector.
struct ParamLayout {
  struct Block {
    std::size_t offset = 0;
    std::size_t size = 0;
  };
  Block conv1_w, conv1_b, conv2_w, conv2_b, conv3_w, conv3_b;
  Block queries, mask_w, mask_b, classifier;
  Block aux_w1, aux_b1, aux_w2, aux_b2;
  std::size_t total = 0;

  static ParamLayout make(const ModelConfig& cfg);
};

/// Tiny query-based panoptic model: 3-stage conv backbone (stride 4) → dense
/// features F; queries read F with one softmax-attention pass; masks are
/// sigmoid((W_m h_q + b_m) · F) upsampled; logits are h Wᵀ over K+1 classes.
class QueryModel {
 public:
  QueryModel() = default;
  QueryModel(const ModelConfig& cfg, std::uint64_t seed);
  QueryModel(const ModelConfig& cfg, std::vector<double> params);

  const ModelConfig& config() const { return cfg_; }
  const ParamLayout& layout() const { return layout_; }
  std::vector<double>& params() { return params_; }
  const std::vector<double>& params() const { return params_; }

  std::span<double> block(const ParamLayout::Block& b) { return {params_.data() + b.offset, b.size}; }
  std::span<const double> block(const ParamLayout::Block& b) const { return {params_.data() + b.offset, b.size}; }

  /// Row c (0-based, c = K is no-object) of the classifier.
  std::span<const double> classifier_row(int c) const;

 private:
  ModelConfig cfg_;
  ParamLayout layout_;
  std::vector<double> params_;
};

struct ModelOutput {
  int feat_h = 0, feat_w = 0, feat_dim = 0;
  int height = 0, width = 0;
  int num_queries = 0, num_logits = 0;

  std::vector<double> features;        // C_f × H'W'
  std::vector<double> query_features;  // Q × d
  std::vector<double> mask_logits;     // Q × H × W (upsampled)
  std::vector<double> masks;           // Q × H × W, sigmoid(mask_logits)
  std::vector<double> logits;          // Q × (K+1)

  // activations kept for the backward pass
  std::vector<double> input, act1, act2, attention, mask_embed, mask_logits_low;

  double mask(int q, int pixel) const { return masks[static_cast<std::size_t>(q * height * width + pixel)]; }
};

struct OutputGrads {
  std::vector<double> logits;       // Q × (K+1)
  std::vector<double> mask_logits;  // Q × H × W
  std::vector<double> features;     // C_f × H'W'

  static OutputGrads zeros(const ModelOutput& out);
};

ModelOutput forward(const QueryModel& model, std::span<const double> image);

/// Accumulates dL/dθ into `param_grad` (size = layout().total).
void backward(const QueryModel& model, const ModelOutput& out, const OutputGrads& grads, std::span<double> param_grad);

/// Feature-resolution view of a full-resolution mask (block averages).
std::vector<double> downsample_mask(const ModelOutput& out, int q);

/// Fraction of class-0 pixels per feature cell of an annotation.
std::vector<double> unlabeled_ratio(const panoptic::PanopticMap& annotation, int factor);

/// Class covering strictly more than half of each feature cell, or -1.
std::vector<int> cell_labels(const panoptic::PanopticMap& annotation, int factor);

// Matching and losses ---------------------------------------------------------

/// Rectangular assignment (rows ≤ cols) minimising Σ cost[r, assign[r]].
std::vector<int> hungarian(std::span<const double> cost, int rows, int cols);

struct LossWeights {
  double cls = 2.0;
  double bce = 5.0;
  double dice = 5.0;
  double no_object = 0.1;  // CE weight of unmatched queries
};

/// cost[s, q] for gt segment s and query q.
std::vector<double> matching_cost(const ModelOutput& out, const std::vector<panoptic::Segment>& gt,
                                  const LossWeights& w);

/// Query index for each gt segment. Throws if there are more segments than queries.
std::vector<int> hungarian_match(const ModelOutput& out, const std::vector<panoptic::Segment>& gt,
                                 const LossWeights& w);

struct PanopticLoss {
  double total = 0.0, cls = 0.0, bce = 0.0, dice = 0.0;
  std::vector<int> assignment;  // per gt segment
  OutputGrads grads;            // d total / d outputs (features untouched)
};

/// L_pan for one image given a label-masked annotation. Only segments whose
/// class is in `current` are supervised.
PanopticLoss panoptic_loss(const ModelOutput& out, const panoptic::PanopticMap& annotation,
                           const panoptic::LabelSpace& space, const panoptic::ClassSet& current,
                           const LossWeights& w = {});

struct InferenceSettings {
  double score_threshold = 0.5;
  double mask_threshold = 0.5;
};

panoptic::PanopticMap panoptic_inference(const ModelOutput& out, const panoptic::LabelSpace& space,
                                         const InferenceSettings& s = {});

// Optimiser -------------------------------------------------------------------

struct AdamWConfig {
  double lr = 5e-5;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.05;

  bool operator==(const AdamWConfig&) const = default;
};

struct OptimizerState {
  std::vector<double> m, v;
  std::int64_t step = 0;
  AdamWConfig config;

  bool operator==(const OptimizerState&) const = default;
};

OptimizerState make_optimizer(std::size_t num_params, const AdamWConfig& cfg);

/// Decoupled-weight-decay Adam update. Throws on a non-finite gradient.
void adamw_step(std::span<double> params, std::span<const double> grads, OptimizerState& state);

// Training ------------------------------------------------------------------------

struct TrainBatch {
  std::vector<std::span<const double>> images;
  std::vector<const panoptic::PanopticMap*> annotations;  // label-masked to C^t
  // Original annotations masked to C^{<=t}; decides which pixels are unlabeled.
  // Empty means `annotations` (the two agree at t = 1).
  std::vector<const panoptic::PanopticMap*> known_view;

  const std::vector<const panoptic::PanopticMap*>& unlabeled_reference() const {
    return known_view.empty() ? annotations : known_view;
  }
};

std::vector<ModelOutput> forward_batch(const QueryModel& model, const TrainBatch& batch);

/// Mean L_pan over the batch, with per-image output gradients already scaled by 1/B.
struct BatchPanopticLoss {
  double value = 0.0;
  std::vector<PanopticLoss> per_image;
};
BatchPanopticLoss panoptic_loss_batch(const std::vector<ModelOutput>& outputs, const TrainBatch& batch,
                                      const panoptic::LabelSpace& space, const panoptic::ClassSet& current,
                                      const LossWeights& w = {});

/// Backpropagates every image's output gradients; per-image parameter
/// gradients are summed in image order.
std::vector<double> backward_batch(const QueryModel& model, const std::vector<ModelOutput>& outputs,
                                   const std::vector<OutputGrads>& grads);

struct StepResult {
  double loss_pan = 0.0;
};

/// Plain supervised step on L_pan.
StepResult train_step(QueryModel& model, OptimizerState& opt, const TrainBatch& batch,
                      const panoptic::LabelSpace& space, const panoptic::ClassSet& current,
                      const LossWeights& w = {});

// Checkpoints -------------------------------------------------------------------

struct Checkpoint {
  ModelConfig config;
  std::vector<double> params;
  OptimizerState optimizer;
  int step_index = 0;          // completed continual step
  std::string config_hash;

  bool operator==(const Checkpoint&) const = default;
};

void write_checkpoint(std::ostream& os, const Checkpoint& ck);
Checkpoint read_checkpoint(std::istream& is);

}  // namespace futcr::seg
