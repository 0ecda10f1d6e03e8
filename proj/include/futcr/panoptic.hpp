#pragma once

#include <cstdint>
#include <iosfwd>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

namespace futcr::panoptic {

using ClassId = int;
using ClassSet = std::set<ClassId>;

/// Classes are 1..K; id 0 is void/background and never part of the space.
struct LabelSpace {
  int num_classes = 0;
  std::vector<bool> is_thing;  // index c-1
  std::vector<std::string> names;

  bool thing(ClassId c) const { return is_thing.at(static_cast<std::size_t>(c - 1)); }
  bool contains(ClassId c) const { return c >= 1 && c <= num_classes; }
  ClassSet all() const;
  void validate() const;
};

/// Per-pixel semantic + instance grids, row-major, (row, col) from top-left.
struct PanopticMap {
  int height = 0;
  int width = 0;
  std::vector<std::int32_t> semantic;
  std::vector<std::int32_t> instance;

  PanopticMap() = default;
  PanopticMap(int h, int w) : height(h), width(w), semantic(static_cast<std::size_t>(h * w), 0), instance(static_cast<std::size_t>(h * w), 0) {}

  int size() const { return height * width; }
  int index(int r, int c) const { return r * width + c; }
  ClassSet classes() const;

  /// Throws std::invalid_argument when a structural invariant is violated.
  void validate(const LabelSpace& space) const;

  bool operator==(const PanopticMap&) const = default;
};

struct Segment {
  ClassId class_id = 0;
  int instance_id = 0;
  std::vector<int> pixels;  // sorted linear indices
};

/// One segment per distinct (class, instance) pair over non-void pixels,
/// ordered by (class, instance).
std::vector<Segment> segments_from_map(const PanopticMap& map, const LabelSpace& space);

/// Paints segments onto an all-void canvas.
PanopticMap paint_segments(const std::vector<Segment>& segments, int height, int width);

/// |a ∩ b| / |a ∪ b| over sorted pixel lists; 0 when the union is empty.
double iou(const std::vector<int>& a, const std::vector<int>& b);

struct SegmentMatch {
  int pred = -1;
  int gt = -1;
  double iou = 0.0;
};

struct Matching {
  std::vector<SegmentMatch> pairs;
  std::vector<int> unmatched_pred;
  std::vector<int> unmatched_gt;
};

/// Same-class pairs with IoU strictly above 0.5. Pixels listed in `gt_void`
/// (sorted) are removed from prediction areas before computing the union.
Matching match_segments(const std::vector<Segment>& pred, const std::vector<Segment>& gt,
                        const std::vector<int>& gt_void = {});

struct ClassCounts {
  int tp = 0;
  int fp = 0;
  int fn = 0;
  double iou_sum = 0.0;
  std::int64_t intersection = 0;  // semantic pixel counts for mIoU
  std::int64_t union_ = 0;

  bool has_segments() const { return tp + fp + fn > 0; }
  double pq() const;
  double semantic_iou() const;
};

/// Dataset-level accumulator: PQ sums over all images before dividing, as in
/// the usual panoptic evaluation.
class PanopticEvaluator {
 public:
  explicit PanopticEvaluator(LabelSpace space);

  /// Adds one image. Predicted segments lying mostly (>0.5) on gt void are
  /// not counted as false positives.
  void add(const PanopticMap& pred, const PanopticMap& gt);

  const std::map<ClassId, ClassCounts>& counts() const { return counts_; }
  const LabelSpace& space() const { return space_; }

 private:
  LabelSpace space_;
  std::map<ClassId, ClassCounts> counts_;
};

struct MetricReport {
  std::map<ClassId, double> per_class_pq;
  std::map<ClassId, double> per_class_iou;
  std::map<ClassId, ClassCounts> counts;
  double pq_base = 0.0, pq_all = 0.0, miou_base = 0.0, miou_all = 0.0;
  std::optional<double> pq_new, miou_new;  // absent when there are no new classes
};

/// Mean of per-class PQ over `classes`, skipping classes with no gt and no
/// pred segments. Throws on an empty subset. Returns nullopt if every class
/// was skipped.
std::optional<double> mean_pq(const std::map<ClassId, ClassCounts>& counts, const ClassSet& classes);
std::optional<double> mean_semantic_iou(const std::map<ClassId, ClassCounts>& counts, const ClassSet& classes);

MetricReport make_report(const PanopticEvaluator& eval, const ClassSet& base, const ClassSet& new_classes);

/// Single-image PQ over `classes`.
double panoptic_quality(const PanopticMap& pred, const PanopticMap& gt, const LabelSpace& space,
                        const ClassSet& classes);

/// Single-image semantic mIoU over `classes` (instances ignored).
double mean_iou(const PanopticMap& pred, const PanopticMap& gt, const LabelSpace& space,
                const ClassSet& classes);

// Serialization ------------------------------------------------------------

void write_map(std::ostream& os, const PanopticMap& map, const LabelSpace& space);
std::pair<PanopticMap, LabelSpace> read_map(std::istream& is);

/// Flat key/value view: pq_base, pq_new, pq_all, miou_*, pq_class_<id>, iou_class_<id>.
std::vector<std::pair<std::string, std::optional<double>>> report_fields(const MetricReport& r);

}  // namespace futcr::panoptic
