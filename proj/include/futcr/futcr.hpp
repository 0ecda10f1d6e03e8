#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <vector>

#include "futcr/panoptic.hpp"
#include "futcr/rng.hpp"
#include "futcr/segmenter.hpp"

// Future-targeted regularisers: discovery of future-like query regions,
// pixel-to-region contrast, known-class repulsion, the optional auxiliary
// prototype-clustering branch, and the combined training step.
namespace futcr::future {

enum class KnownPrototypeSource { ClassifierRows, ClassCentroids };

struct AuxConfig {
  bool enabled = false;
  int clusters = 4;           // K_aux
  int buffer_capacity = 256;
  double lambda_bal = 1.0;
  double weight = 0.5;        // weight of L_aux in the total
  int refresh_period = 50;    // iterations between k-means refreshes
  int kmeans_iterations = 50;
};

struct FutcrConfig {
  double tau_mask = 0.5;
  double temperature = 0.07;
  double margin = 0.0;  // γ
  double lambda_reg = 0.5;
  double lambda_rep = 0.5;
  int pixels_per_region = 70;
  int min_region_pixels = 10;
  double confidence_min = 0.7;
  double majority_fraction = 0.5;  // strict
  int unlabeled_samples = 256;
  bool region_contrast = true;     // RC switch
  bool repulsion = true;           // KFR switch
  bool base_only = false;          // apply the regularisers at step 1 only
  KnownPrototypeSource known_source = KnownPrototypeSource::ClassifierRows;
  AuxConfig aux;

  void validate() const;
  double effective_lambda_reg(int step) const { return region_contrast && (!base_only || step == 1) ? lambda_reg : 0.0; }
  double effective_lambda_rep(int step) const { return repulsion && (!base_only || step == 1) ? lambda_rep : 0.0; }
};

struct FutureRegion {
  int image = 0;
  int query = 0;
  std::vector<int> support;        // Ω_r, feature-resolution pixel indices
  std::vector<double> prototype;   // p_r (filled by region_prototype)
  std::vector<int> anchor_pixels;  // sampled from Ω_r
};

/// Per feature cell: true when the cell is unlabeled w.r.t. `known` (at least
/// half of its pixels carry class 0 or a class outside `known`).
std::vector<bool> unlabeled_cells(const panoptic::PanopticMap& annotation, const panoptic::ClassSet& known, int factor);

/// Queries that are large (|Ω| ≥ min_region_pixels), confident (mean mask
/// over Ω ≥ confidence_min) and mostly on unlabeled cells (strictly more than
/// majority_fraction of Ω). Ω = {cells with downsampled mask > τ_mask}.
std::vector<FutureRegion> discover_future_regions(const std::vector<seg::ModelOutput>& outputs,
                                                  const std::vector<const panoptic::PanopticMap*>& annotations,
                                                  const panoptic::ClassSet& known, const FutcrConfig& cfg);

struct RegionPrototype {
  std::vector<int> support;
  std::vector<double> prototype;
};

/// Ω = {i : mask[i] > τ_mask}; p = mean of F(:, i) over Ω. F is C × P.
RegionPrototype region_prototype(std::span<const double> features, int channels, std::span<const double> mask,
                                 double tau_mask);

/// Without replacement when |Ω| ≥ n, with replacement otherwise.
std::vector<int> sample_anchors(const std::vector<int>& support, int n, Rng& rng);

struct ContrastResult {
  double value = 0.0;
  std::vector<double> grad_anchors;     // N × C
  std::vector<double> grad_prototypes;  // R × C
};

/// InfoNCE over cosine similarities: anchors N × C with region tags, prototypes R × C.
ContrastResult region_contrast_loss(std::span<const double> anchors, std::span<const int> tags,
                                    std::span<const double> prototypes, int channels, double temperature);

/// Unit-normalised classifier rows for the known classes, keyed by class id.
std::map<int, std::vector<double>> known_class_prototypes(const seg::QueryModel& model, const panoptic::ClassSet& known);

struct PixelRef {
  int image = 0;
  int pixel = 0;  // feature-resolution index
};

/// Uniform draw (without replacement) over unlabeled feature cells across the batch.
std::vector<PixelRef> sample_unlabeled_pixels(const std::vector<seg::ModelOutput>& outputs,
                                              const std::vector<const panoptic::PanopticMap*>& annotations,
                                              const panoptic::ClassSet& known, int n, Rng& rng);

struct RepulsionResult {
  double value = 0.0;
  std::vector<double> grad_features;  // U × C; prototypes are constants
  std::vector<int> nearest;           // c*(u) as an index into the prototype rows
};

/// mean_u max(0, max_c cos(z_u, w_c) − γ); ties in the argmax go to the lowest row.
RepulsionResult repulsion_loss(std::span<const double> features, std::span<const double> prototypes, int channels,
                               double margin);

/// L_pan + λ_reg L_reg + λ_rep L_rep. Throws on non-finite terms.
double total_loss(double pan, double reg, double rep, double lambda_reg, double lambda_rep);

/// A loss evaluated on per-image feature maps (each C × P) with its gradient
/// with respect to every map.
struct FeatureLoss {
  double value = 0.0;
  std::vector<std::vector<double>> grad_features;
};

using FeatureMaps = std::vector<std::span<const double>>;

/// Prototypes pooled from each region's support; anchors read at
/// `anchor_pixels`. Gradients reach F through both anchors and prototypes.
FeatureLoss region_contrast_on_features(const FeatureMaps& features, int channels,
                                        const std::vector<FutureRegion>& regions, double temperature);

/// L_rep for the referenced pixels against unit prototype rows (K × C).
FeatureLoss repulsion_on_features(const FeatureMaps& features, int channels, const std::vector<PixelRef>& pixels,
                                  std::span<const double> prototypes, double margin);

/// Mean of F over each region's support, rows in region order.
std::vector<double> pooled_prototypes(const FeatureMaps& features, int channels, const std::vector<FutureRegion>& regions);

// Auxiliary clustering ------------------------------------------------------------

struct KMeansResult {
  std::vector<double> centers;  // K × C, unit norm
  std::vector<int> labels;
  int iterations = 0;
};

/// Spherical k-means with farthest-point seeding (first seed drawn from `seed`).
KMeansResult spherical_kmeans(std::span<const double> points, int channels, int k, std::uint64_t seed,
                              int max_iterations = 100);

/// Pseudo-label: argmax_k cos(p, c_k), ties to the lowest k.
int assign_cluster(std::span<const double> point, std::span<const double> centers, int channels);

struct AuxLossResult {
  double value = 0.0;
  double ce = 0.0;
  double kl = 0.0;
  std::vector<double> grad_logits;  // R × K
};

/// mean CE(g_r, ℓ_r) + λ_bal KL(p̄ ‖ uniform). Throws when K < 2.
AuxLossResult aux_loss(std::span<const double> logits, std::span<const int> labels, int k, double lambda_bal);

/// Two-layer head g = W2 relu(W1 p + b1) + b2 stored in the model's aux blocks.
std::vector<double> aux_head_forward(const seg::QueryModel& model, std::span<const double> prototypes, int count,
                                     std::vector<double>* hidden = nullptr);
/// Accumulates head parameter gradients; returns d/d prototypes.
std::vector<double> aux_head_backward(const seg::QueryModel& model, std::span<const double> prototypes, int count,
                                      const std::vector<double>& hidden, std::span<const double> grad_logits,
                                      std::span<double> param_grad);

/// L_aux on pooled region prototypes through the model's auxiliary head.
/// Head gradients are accumulated into `param_grad` (scaled by `weight`).
FeatureLoss aux_on_features(const seg::QueryModel& model, const FeatureMaps& features,
                            const std::vector<FutureRegion>& regions, std::span<const int> labels, double lambda_bal,
                            double weight, std::span<double> param_grad);

struct AuxState {
  std::vector<double> buffer;   // FIFO of detached prototypes, row-major
  std::vector<double> centers;  // current cluster centres (empty until first refresh)
  std::int64_t iterations = 0;
};

// Training step -------------------------------------------------------------------

struct StepRecord {
  std::int64_t iteration = 0;
  double loss_pan = 0.0;
  double loss_reg = 0.0;
  double loss_rep = 0.0;
  double loss_aux = 0.0;
  double loss_total = 0.0;
  int num_regions = 0;    // |R^fut|
  int num_unlabeled = 0;  // |I^unlb|
};

struct StepContext {
  const panoptic::LabelSpace* space = nullptr;
  panoptic::ClassSet current;
  panoptic::ClassSet known;
  int continual_step = 1;
  std::uint64_t seed = 0;       // sampling seed for this iteration
  std::int64_t iteration = 0;
};

/// One optimisation step: forward, L_pan, discovery, prototypes and anchors,
/// L_reg, unlabeled sampling, L_rep, optional L_aux, update.
StepRecord train_step(seg::QueryModel& model, seg::OptimizerState& opt, const seg::TrainBatch& batch,
                      const StepContext& ctx, const FutcrConfig& cfg, AuxState& aux,
                      const seg::LossWeights& weights = {});

}  // namespace futcr::future
