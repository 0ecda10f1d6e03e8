#include "futcr/panoptic.hpp"

#include <algorithm>
#include <cstring>
#include <istream>
#include <ostream>
#include <stdexcept>
#include <unordered_map>

#include "futcr/binary_io.hpp"

namespace futcr::panoptic {

ClassSet LabelSpace::all() const {
  ClassSet s;
  for (int c = 1; c <= num_classes; ++c) s.insert(c);
  return s;
}

void LabelSpace::validate() const {
  if (num_classes <= 0) throw std::invalid_argument("label space must have at least one class");
  if (static_cast<int>(is_thing.size()) != num_classes)
    throw std::invalid_argument("label space: thing flags do not cover every class");
  if (!names.empty() && static_cast<int>(names.size()) != num_classes)
    throw std::invalid_argument("label space: names do not cover every class");
}

ClassSet PanopticMap::classes() const {
  ClassSet s;
  for (auto v : semantic)
    if (v != 0) s.insert(v);
  return s;
}

void PanopticMap::validate(const LabelSpace& space) const {
  if (height <= 0 || width <= 0) throw std::invalid_argument("panoptic map has empty canvas");
  const auto n = static_cast<std::size_t>(height) * static_cast<std::size_t>(width);
  if (semantic.size() != n || instance.size() != n)
    throw std::invalid_argument("panoptic map grids do not match canvas size");
  for (std::size_t i = 0; i < n; ++i) {
    const int c = semantic[i];
    const int k = instance[i];
    if (k < 0) throw std::invalid_argument("negative instance id");
    if (c == 0) {
      if (k != 0) throw std::invalid_argument("void pixel carries an instance id");
      continue;
    }
    if (!space.contains(c)) throw std::invalid_argument("class id " + std::to_string(c) + " outside label space");
    if (space.thing(c) && k < 1) throw std::invalid_argument("thing pixel without instance id");
    if (!space.thing(c) && k != 0) throw std::invalid_argument("stuff pixel with instance id > 0");
  }
}

std::vector<Segment> segments_from_map(const PanopticMap& map, const LabelSpace& space) {
  map.validate(space);
  std::map<std::pair<int, int>, std::vector<int>> groups;
  for (int i = 0; i < map.size(); ++i) {
    const int c = map.semantic[static_cast<std::size_t>(i)];
    if (c == 0) continue;
    groups[{c, map.instance[static_cast<std::size_t>(i)]}].push_back(i);
  }
  std::vector<Segment> out;
  out.reserve(groups.size());
  for (auto& [key, px] : groups) out.push_back(Segment{key.first, key.second, std::move(px)});
  return out;
}

PanopticMap paint_segments(const std::vector<Segment>& segments, int height, int width) {
  PanopticMap m(height, width);
  for (const auto& s : segments)
    for (int p : s.pixels) {
      m.semantic[static_cast<std::size_t>(p)] = s.class_id;
      m.instance[static_cast<std::size_t>(p)] = s.instance_id;
    }
  return m;
}

namespace {

std::size_t intersection_size(const std::vector<int>& a, const std::vector<int>& b) {
  std::size_t i = 0, j = 0, n = 0;
  while (i < a.size() && j < b.size()) {
    if (a[i] < b[j]) {
      ++i;
    } else if (b[j] < a[i]) {
      ++j;
    } else {
      ++n;
      ++i;
      ++j;
    }
  }
  return n;
}

}  // namespace

double iou(const std::vector<int>& a, const std::vector<int>& b) {
  const auto inter = intersection_size(a, b);
  const auto uni = a.size() + b.size() - inter;
  if (uni == 0) return 0.0;
  return static_cast<double>(inter) / static_cast<double>(uni);
}

Matching match_segments(const std::vector<Segment>& pred, const std::vector<Segment>& gt,
                        const std::vector<int>& gt_void) {
  Matching m;
  std::vector<bool> pred_used(pred.size(), false), gt_used(gt.size(), false);
  for (std::size_t p = 0; p < pred.size(); ++p) {
    const auto pred_area = pred[p].pixels.size() - intersection_size(pred[p].pixels, gt_void);
    for (std::size_t g = 0; g < gt.size(); ++g) {
      if (gt_used[g] || pred[p].class_id != gt[g].class_id) continue;
      const auto inter = intersection_size(pred[p].pixels, gt[g].pixels);
      const auto uni = pred_area + gt[g].pixels.size() - inter;
      if (uni == 0) continue;
      const double v = static_cast<double>(inter) / static_cast<double>(uni);
      if (v > 0.5) {
        m.pairs.push_back({static_cast<int>(p), static_cast<int>(g), v});
        pred_used[p] = gt_used[g] = true;
        break;
      }
    }
  }
  for (std::size_t p = 0; p < pred.size(); ++p)
    if (!pred_used[p]) m.unmatched_pred.push_back(static_cast<int>(p));
  for (std::size_t g = 0; g < gt.size(); ++g)
    if (!gt_used[g]) m.unmatched_gt.push_back(static_cast<int>(g));
  return m;
}

double ClassCounts::pq() const {
  const double denom = tp + 0.5 * fp + 0.5 * fn;
  return denom > 0.0 ? iou_sum / denom : 0.0;
}

double ClassCounts::semantic_iou() const {
  return union_ > 0 ? static_cast<double>(intersection) / static_cast<double>(union_) : 0.0;
}

PanopticEvaluator::PanopticEvaluator(LabelSpace space) : space_(std::move(space)) { space_.validate(); }

void PanopticEvaluator::add(const PanopticMap& pred, const PanopticMap& gt) {
  if (pred.height != gt.height || pred.width != gt.width)
    throw std::invalid_argument("prediction and ground truth differ in canvas size");
  const auto pred_segs = segments_from_map(pred, space_);
  const auto gt_segs = segments_from_map(gt, space_);
  std::vector<int> gt_void;
  for (int i = 0; i < gt.size(); ++i)
    if (gt.semantic[static_cast<std::size_t>(i)] == 0) gt_void.push_back(i);

  const auto m = match_segments(pred_segs, gt_segs, gt_void);
  for (const auto& pr : m.pairs) {
    auto& cc = counts_[gt_segs[static_cast<std::size_t>(pr.gt)].class_id];
    cc.tp += 1;
    cc.iou_sum += pr.iou;
  }
  for (int g : m.unmatched_gt) counts_[gt_segs[static_cast<std::size_t>(g)].class_id].fn += 1;
  for (int p : m.unmatched_pred) {
    const auto& seg = pred_segs[static_cast<std::size_t>(p)];
    const auto on_void = intersection_size(seg.pixels, gt_void);
    if (2 * on_void > seg.pixels.size()) continue;
    counts_[seg.class_id].fp += 1;
  }

  std::unordered_map<int, std::int64_t> inter, pred_area, gt_area;
  for (int i = 0; i < gt.size(); ++i) {
    const int a = pred.semantic[static_cast<std::size_t>(i)];
    const int b = gt.semantic[static_cast<std::size_t>(i)];
    if (a != 0) ++pred_area[a];
    if (b != 0) ++gt_area[b];
    if (a != 0 && a == b) ++inter[a];
  }
  for (int c = 1; c <= space_.num_classes; ++c) {
    const auto i = inter.count(c) ? inter[c] : 0;
    const auto u = (pred_area.count(c) ? pred_area[c] : 0) + (gt_area.count(c) ? gt_area[c] : 0) - i;
    if (u == 0) continue;
    auto& cc = counts_[c];
    cc.intersection += i;
    cc.union_ += u;
  }
}

std::optional<double> mean_pq(const std::map<ClassId, ClassCounts>& counts, const ClassSet& classes) {
  if (classes.empty()) throw std::invalid_argument("empty class subset");
  double sum = 0.0;
  int n = 0;
  for (auto c : classes) {
    auto it = counts.find(c);
    if (it == counts.end() || !it->second.has_segments()) continue;
    sum += it->second.pq();
    ++n;
  }
  if (n == 0) return std::nullopt;
  return sum / n;
}

std::optional<double> mean_semantic_iou(const std::map<ClassId, ClassCounts>& counts, const ClassSet& classes) {
  if (classes.empty()) throw std::invalid_argument("empty class subset");
  double sum = 0.0;
  int n = 0;
  for (auto c : classes) {
    auto it = counts.find(c);
    if (it == counts.end() || it->second.union_ == 0) continue;
    sum += it->second.semantic_iou();
    ++n;
  }
  if (n == 0) return std::nullopt;
  return sum / n;
}

MetricReport make_report(const PanopticEvaluator& eval, const ClassSet& base, const ClassSet& new_classes) {
  MetricReport r;
  ClassSet all = base;
  all.insert(new_classes.begin(), new_classes.end());
  for (auto c : all) {
    auto it = eval.counts().find(c);
    if (it == eval.counts().end()) continue;
    r.counts[c] = it->second;
    if (it->second.has_segments()) r.per_class_pq[c] = it->second.pq();
    if (it->second.union_ > 0) r.per_class_iou[c] = it->second.semantic_iou();
  }
  r.pq_base = mean_pq(eval.counts(), base).value_or(0.0);
  r.miou_base = mean_semantic_iou(eval.counts(), base).value_or(0.0);
  r.pq_all = mean_pq(eval.counts(), all).value_or(0.0);
  r.miou_all = mean_semantic_iou(eval.counts(), all).value_or(0.0);
  if (!new_classes.empty()) {
    r.pq_new = mean_pq(eval.counts(), new_classes).value_or(0.0);
    r.miou_new = mean_semantic_iou(eval.counts(), new_classes).value_or(0.0);
  }
  return r;
}

double panoptic_quality(const PanopticMap& pred, const PanopticMap& gt, const LabelSpace& space,
                        const ClassSet& classes) {
  if (classes.empty()) throw std::invalid_argument("empty class subset");
  PanopticEvaluator ev(space);
  ev.add(pred, gt);
  return mean_pq(ev.counts(), classes).value_or(0.0);
}

double mean_iou(const PanopticMap& pred, const PanopticMap& gt, const LabelSpace& space, const ClassSet& classes) {
  if (classes.empty()) throw std::invalid_argument("empty class subset");
  PanopticEvaluator ev(space);
  ev.add(pred, gt);
  return mean_semantic_iou(ev.counts(), classes).value_or(0.0);
}

namespace {
constexpr char kMapMagic[4] = {'P', 'M', 'A', 'P'};
constexpr std::uint32_t kMapVersion = 1;
}  // namespace

void write_map(std::ostream& os, const PanopticMap& map, const LabelSpace& space) {
  using namespace futcr::io;
  os.write(kMapMagic, 4);
  put_u32(os, kMapVersion);
  put_u32(os, static_cast<std::uint32_t>(space.num_classes));
  for (int c = 1; c <= space.num_classes; ++c) {
    put_u8(os, space.thing(c) ? 1 : 0);
    put_string(os, space.names.empty() ? std::string{} : space.names[static_cast<std::size_t>(c - 1)]);
  }
  put_u32(os, static_cast<std::uint32_t>(map.height));
  put_u32(os, static_cast<std::uint32_t>(map.width));
  for (auto v : map.semantic) put_i32(os, v);
  for (auto v : map.instance) put_i32(os, v);
  if (!os) throw std::runtime_error("failed writing panoptic map");
}

std::pair<PanopticMap, LabelSpace> read_map(std::istream& is) {
  using namespace futcr::io;
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, kMapMagic, 4) != 0) throw std::runtime_error("not a panoptic map container");
  if (get_u32(is) != kMapVersion) throw std::runtime_error("unsupported panoptic map version");
  LabelSpace space;
  space.num_classes = static_cast<int>(get_u32(is));
  for (int c = 0; c < space.num_classes; ++c) {
    space.is_thing.push_back(get_u8(is) != 0);
    space.names.push_back(get_string(is));
  }
  const int h = static_cast<int>(get_u32(is));
  const int w = static_cast<int>(get_u32(is));
  PanopticMap map(h, w);
  for (auto& v : map.semantic) v = get_i32(is);
  for (auto& v : map.instance) v = get_i32(is);
  map.validate(space);
  return {std::move(map), std::move(space)};
}

std::vector<std::pair<std::string, std::optional<double>>> report_fields(const MetricReport& r) {
  std::vector<std::pair<std::string, std::optional<double>>> f = {
      {"pq_base", r.pq_base}, {"pq_new", r.pq_new}, {"pq_all", r.pq_all},
      {"miou_base", r.miou_base}, {"miou_new", r.miou_new}, {"miou_all", r.miou_all}};
  for (const auto& [c, v] : r.per_class_pq) f.emplace_back("pq_class_" + std::to_string(c), v);
  for (const auto& [c, v] : r.per_class_iou) f.emplace_back("iou_class_" + std::to_string(c), v);
  return f;
}

}  // namespace futcr::panoptic
