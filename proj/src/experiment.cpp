#include "futcr/experiment.hpp"

#include <chrono>
#include <cstdio>
#include <fstream>
#include <functional>
#include <iostream>
#include <sstream>
#include <stdexcept>

#include "futcr/rng.hpp"
#include "futcr/scenes.hpp"
#include "json.hpp"

namespace futcr::experiment {

namespace fs = std::filesystem;
using json = nlohmann::json;

std::string to_string(Variant v) {
  switch (v) {
    case Variant::Baseline: return "baseline";
    case Variant::RegionContrast: return "rc";
    case Variant::Repulsion: return "kfr";
    case Variant::Full: return "full";
  }
  return "full";
}

Variant variant_from_string(const std::string& s) {
  if (s == "baseline") return Variant::Baseline;
  if (s == "rc") return Variant::RegionContrast;
  if (s == "kfr") return Variant::Repulsion;
  if (s == "full") return Variant::Full;
  throw std::invalid_argument("unknown variant '" + s + "' (expected baseline, rc, kfr or full)");
}

future::FutcrConfig ExperimentConfig::effective_futcr() const {
  auto f = futcr;
  f.region_contrast = variant_rc;
  f.repulsion = variant_kfr;
  f.aux.enabled = variant_aux;
  return f;
}

seg::ModelConfig ExperimentConfig::effective_model() const {
  auto m = model;
  m.image_height = height;
  m.image_width = width;
  m.num_classes = num_classes;
  m.query_dim = m.feature_dim;
  m.aux_clusters = variant_aux ? futcr.aux.clusters : 0;
  return m;
}

void ExperimentConfig::validate() const {
  if (num_classes < 2 || num_stuff < 0 || num_stuff > num_classes) throw std::invalid_argument("dataset: bad class counts");
  if (num_images < 10) throw std::invalid_argument("dataset.images must be >= 10");
  if (val_fraction <= 0.0 || test_fraction <= 0.0 || val_fraction + test_fraction >= 1.0)
    throw std::invalid_argument("split fractions must be positive and sum below 1");
  if (base_count < 1 || base_count >= num_classes || increment_size < 1)
    throw std::invalid_argument("schedule: need 1 <= base_count < num_classes and increment_size >= 1");
  if (max_steps < 0) throw std::invalid_argument("schedule.max_steps must be >= 0");
  if (!(stream.subsample_fraction > 0.0 && stream.subsample_fraction <= 1.0))
    throw std::invalid_argument("stream.subsample_fraction must be in (0, 1]");
  if (batch_size < 1 || base_iterations < 1 || increment_iterations < 1)
    throw std::invalid_argument("optim: batch size and iteration counts must be positive");
  if (!(optimizer.lr > 0.0) || !(increment_lr_scale > 0.0))
    throw std::invalid_argument("optim.lr and optim.increment_lr_scale must be positive");
  if (diagnostics_split != "val" && diagnostics_split != "test")
    throw std::invalid_argument("eval.diagnostics_split must be val or test");
  effective_model().validate();
  effective_futcr().validate();
}

// Config keys ---------------------------------------------------------------------

namespace {

std::string fmt_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string fmt_opt(const std::optional<double>& v) { return v ? fmt_double(*v) : std::string(); }

std::string format_value(int v) { return std::to_string(v); }
std::string format_value(double v) { return fmt_double(v); }
std::string format_value(bool v) { return v ? "true" : "false"; }
std::string format_value(std::uint64_t v) { return std::to_string(v); }
std::string format_value(const std::string& v) { return v; }
std::string format_value(stream::StreamMode v) { return stream::to_string(v); }
std::string format_value(future::KnownPrototypeSource v) {
  return v == future::KnownPrototypeSource::ClassifierRows ? "classifier" : "centroid";
}

[[noreturn]] void bad_value(const std::string& key, const std::string& v, const char* what) {
  throw std::invalid_argument("config key '" + key + "': cannot parse '" + v + "' as " + what);
}

void parse_into(const std::string& key, const std::string& v, int& out) {
  std::size_t pos = 0;
  try {
    out = std::stoi(v, &pos);
  } catch (const std::exception&) {
    bad_value(key, v, "an integer");
  }
  if (pos != v.size()) bad_value(key, v, "an integer");
}

void parse_into(const std::string& key, const std::string& v, double& out) {
  std::size_t pos = 0;
  try {
    out = std::stod(v, &pos);
  } catch (const std::exception&) {
    bad_value(key, v, "a number");
  }
  if (pos != v.size()) bad_value(key, v, "a number");
}

void parse_into(const std::string& key, const std::string& v, std::uint64_t& out) {
  std::size_t pos = 0;
  if (!v.empty() && v[0] == '-') bad_value(key, v, "an unsigned integer");
  try {
    out = std::stoull(v, &pos);
  } catch (const std::exception&) {
    bad_value(key, v, "an unsigned integer");
  }
  if (pos != v.size()) bad_value(key, v, "an unsigned integer");
}

void parse_into(const std::string& key, const std::string& v, bool& out) {
  if (v == "true" || v == "1" || v == "on") out = true;
  else if (v == "false" || v == "0" || v == "off") out = false;
  else bad_value(key, v, "a boolean");
}

void parse_into(const std::string&, const std::string& v, std::string& out) { out = v; }

void parse_into(const std::string& key, const std::string& v, stream::StreamMode& out) {
  try {
    out = stream::stream_mode_from_string(v);
  } catch (const std::exception&) {
    bad_value(key, v, "overlap or disjoint");
  }
}

void parse_into(const std::string& key, const std::string& v, future::KnownPrototypeSource& out) {
  if (v == "classifier") out = future::KnownPrototypeSource::ClassifierRows;
  else if (v == "centroid") out = future::KnownPrototypeSource::ClassCentroids;
  else bad_value(key, v, "classifier or centroid");
}

struct Entry {
  ConfigKey info;
  std::function<std::string(const ExperimentConfig&)> get;
  std::function<void(ExperimentConfig&, const std::string&)> set;
};

template <typename Ref>
Entry entry(std::string key, std::string doc, Ref ref) {
  Entry e;
  e.info = {key, std::move(doc)};
  e.get = [ref](const ExperimentConfig& c) { return format_value(ref(c)); };
  e.set = [ref, key](ExperimentConfig& c, const std::string& v) { parse_into(key, v, ref(c)); };
  return e;
}

#define FIELD(path) [](auto& c) -> auto& { return c.path; }

const std::vector<Entry>& entries() {
  static const std::vector<Entry> table = {
      entry("dataset.num_classes", "K, total classes", FIELD(num_classes)),
      entry("dataset.num_stuff", "classes without instances", FIELD(num_stuff)),
      entry("dataset.height", "canvas height (multiple of 4)", FIELD(height)),
      entry("dataset.width", "canvas width (multiple of 4)", FIELD(width)),
      entry("dataset.images", "scenes generated before splitting", FIELD(num_images)),
      entry("dataset.seed", "scene generator seed", FIELD(dataset_seed)),
      entry("split.val_fraction", "held-out validation share", FIELD(val_fraction)),
      entry("split.test_fraction", "held-out test share", FIELD(test_fraction)),
      entry("split.seed", "split permutation seed", FIELD(split_seed)),
      entry("schedule.base_count", "classes in the base step", FIELD(base_count)),
      entry("schedule.increment_size", "classes per incremental step", FIELD(increment_size)),
      entry("schedule.class_order_seed", "class order permutation seed", FIELD(class_order_seed)),
      entry("schedule.max_steps", "run only the first T steps (0 = all)", FIELD(max_steps)),
      entry("stream.mode", "overlap or disjoint", FIELD(stream.mode)),
      entry("stream.subsample_fraction", "share of each incremental step kept", FIELD(stream.subsample_fraction)),
      entry("stream.images_per_increment", "target mean images per increment (0 = use the fraction)",
            FIELD(stream.images_per_increment)),
      entry("stream.disjoint_base_fraction", "share of base-eligible images reserved for step 1 in disjoint mode",
            FIELD(stream.disjoint_base_fraction)),
      entry("stream.seed", "stream sampling seed", FIELD(stream.seed)),
      entry("model.stage1_channels", "first conv width", FIELD(model.stage1_channels)),
      entry("model.stage2_channels", "second conv width", FIELD(model.stage2_channels)),
      entry("model.dim", "feature and query width (C_f = d)", FIELD(model.feature_dim)),
      entry("model.queries", "Q, number of queries", FIELD(model.num_queries)),
      entry("model.aux_hidden", "hidden width of the auxiliary head", FIELD(model.aux_hidden)),
      entry("model.seed", "parameter initialisation seed", FIELD(model_seed)),
      entry("optim.lr", "AdamW learning rate", FIELD(optimizer.lr)),
      entry("optim.beta1", "AdamW beta1", FIELD(optimizer.beta1)),
      entry("optim.beta2", "AdamW beta2", FIELD(optimizer.beta2)),
      entry("optim.eps", "AdamW epsilon", FIELD(optimizer.eps)),
      entry("optim.weight_decay", "AdamW decoupled weight decay", FIELD(optimizer.weight_decay)),
      entry("optim.batch_size", "images per iteration", FIELD(batch_size)),
      entry("optim.base_iterations", "iterations in step 1", FIELD(base_iterations)),
      entry("optim.increment_iterations", "iterations in each later step", FIELD(increment_iterations)),
      entry("optim.increment_lr_scale", "learning-rate multiplier for steps after the first", FIELD(increment_lr_scale)),
      entry("train.seed", "batch sampling and regulariser sampling seed", FIELD(train_seed)),
      entry("loss.cls", "classification weight in L_pan and matching", FIELD(loss.cls)),
      entry("loss.bce", "mask BCE weight", FIELD(loss.bce)),
      entry("loss.dice", "mask dice weight", FIELD(loss.dice)),
      entry("loss.no_object", "CE weight of unmatched queries", FIELD(loss.no_object)),
      entry("futcr.tau_mask", "mask threshold for region support", FIELD(futcr.tau_mask)),
      entry("futcr.temperature", "contrast temperature", FIELD(futcr.temperature)),
      entry("futcr.margin", "repulsion margin gamma", FIELD(futcr.margin)),
      entry("futcr.lambda_reg", "region contrast weight", FIELD(futcr.lambda_reg)),
      entry("futcr.lambda_rep", "repulsion weight", FIELD(futcr.lambda_rep)),
      entry("futcr.pixels_per_region", "anchors sampled per region", FIELD(futcr.pixels_per_region)),
      entry("futcr.min_region_pixels", "minimum support size (feature cells)", FIELD(futcr.min_region_pixels)),
      entry("futcr.confidence_min", "minimum mean mask probability over the support", FIELD(futcr.confidence_min)),
      entry("futcr.majority_fraction", "unlabeled share of the support must exceed this", FIELD(futcr.majority_fraction)),
      entry("futcr.unlabeled_samples", "unlabeled cells sampled per batch", FIELD(futcr.unlabeled_samples)),
      entry("futcr.base_only", "apply the regularisers in step 1 only", FIELD(futcr.base_only)),
      entry("futcr.known_source", "classifier or centroid known-class prototypes", FIELD(futcr.known_source)),
      entry("futcr.aux.clusters", "K_aux", FIELD(futcr.aux.clusters)),
      entry("futcr.aux.buffer_capacity", "prototype FIFO length", FIELD(futcr.aux.buffer_capacity)),
      entry("futcr.aux.lambda_bal", "balance weight", FIELD(futcr.aux.lambda_bal)),
      entry("futcr.aux.weight", "weight of L_aux in the total", FIELD(futcr.aux.weight)),
      entry("futcr.aux.refresh_period", "iterations between k-means refreshes", FIELD(futcr.aux.refresh_period)),
      entry("futcr.aux.kmeans_iterations", "k-means iteration cap", FIELD(futcr.aux.kmeans_iterations)),
      entry("variant.rc", "region contrast on", FIELD(variant_rc)),
      entry("variant.kfr", "known-class repulsion on", FIELD(variant_kfr)),
      entry("variant.aux", "auxiliary clustering branch on", FIELD(variant_aux)),
      entry("eval.score_threshold", "minimum class probability for a kept query", FIELD(inference.score_threshold)),
      entry("eval.mask_threshold", "mask probability threshold at inference", FIELD(inference.mask_threshold)),
      entry("eval.diagnostics_split", "val or test", FIELD(diagnostics_split)),
      entry("run.out_dir", "output directory", FIELD(out_dir)),
  };
  return table;
}

#undef FIELD

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + p.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const fs::path& p, const std::string& text) {
  const fs::path tmp = p.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + tmp.string());
    out << text;
  }
  fs::rename(tmp, p);
}

}  // namespace

const std::vector<ConfigKey>& config_keys() {
  static const std::vector<ConfigKey> keys = [] {
    std::vector<ConfigKey> k;
    for (const auto& e : entries()) k.push_back(e.info);
    return k;
  }();
  return keys;
}

void apply_setting(ExperimentConfig& cfg, const std::string& key, const std::string& value) {
  for (const auto& e : entries())
    if (e.info.key == key) return e.set(cfg, value);
  throw std::invalid_argument("unknown config key '" + key + "'");
}

ExperimentConfig parse_config(const std::string& text) {
  ExperimentConfig cfg;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    line = trim(line.substr(0, line.find('#')));
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw std::invalid_argument("config line " + std::to_string(lineno) + ": expected key = value");
    try {
      apply_setting(cfg, trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
    } catch (const std::invalid_argument& e) {
      throw std::invalid_argument("config line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  return cfg;
}

ExperimentConfig load_config(const fs::path& path) { return parse_config(read_file(path)); }

std::string config_to_text(const ExperimentConfig& cfg) {
  std::string out;
  for (const auto& e : entries()) out += e.info.key + " = " + e.get(cfg) + "\n";
  return out;
}

std::string config_hash(const ExperimentConfig& cfg) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const auto& e : entries()) {
    if (e.info.key == "run.out_dir") continue;
    for (unsigned char ch : e.info.key + "=" + e.get(cfg) + "\n") {
      h ^= ch;
      h *= 0x100000001b3ULL;
    }
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

void apply_variant(ExperimentConfig& cfg, Variant v) {
  cfg.variant_rc = v == Variant::RegionContrast || v == Variant::Full;
  cfg.variant_kfr = v == Variant::Repulsion || v == Variant::Full;
}

void apply_seed_override(ExperimentConfig& cfg, std::uint64_t root) {
  cfg.dataset_seed = derive_seed(root, {1});
  cfg.split_seed = derive_seed(root, {2});
  cfg.class_order_seed = derive_seed(root, {3});
  cfg.model_seed = derive_seed(root, {4});
  cfg.train_seed = derive_seed(root, {5});
  cfg.stream.seed = derive_seed(root, {6});
}

// Record serialization -----------------------------------------------------------------

namespace {

json opt_json(const std::optional<double>& v) { return v ? json(*v) : json(nullptr); }
std::optional<double> opt_from(const json& j) {
  if (j.is_null()) return std::nullopt;
  return j.get<double>();
}

template <typename V>
json int_map(const std::map<int, V>& m) {
  json j = json::object();
  for (const auto& [k, v] : m) j[std::to_string(k)] = v;
  return j;
}

template <typename V>
std::map<int, V> int_map_from(const json& j) {
  std::map<int, V> m;
  for (auto it = j.begin(); it != j.end(); ++it) m[std::stoi(it.key())] = it.value().get<V>();
  return m;
}

json report_json(const panoptic::MetricReport& r) {
  json counts = json::object();
  for (const auto& [c, k] : r.counts)
    counts[std::to_string(c)] = {{"tp", k.tp}, {"fp", k.fp}, {"fn", k.fn}, {"iou_sum", k.iou_sum},
                                 {"intersection", k.intersection}, {"union", k.union_}};
  return {{"pq_base", r.pq_base},       {"pq_new", opt_json(r.pq_new)},     {"pq_all", r.pq_all},
          {"miou_base", r.miou_base},   {"miou_new", opt_json(r.miou_new)}, {"miou_all", r.miou_all},
          {"per_class_pq", int_map(r.per_class_pq)}, {"per_class_iou", int_map(r.per_class_iou)}, {"counts", counts}};
}

panoptic::MetricReport report_from(const json& j) {
  panoptic::MetricReport r;
  r.pq_base = j.at("pq_base").get<double>();
  r.pq_new = opt_from(j.at("pq_new"));
  r.pq_all = j.at("pq_all").get<double>();
  r.miou_base = j.at("miou_base").get<double>();
  r.miou_new = opt_from(j.at("miou_new"));
  r.miou_all = j.at("miou_all").get<double>();
  r.per_class_pq = int_map_from<double>(j.at("per_class_pq"));
  r.per_class_iou = int_map_from<double>(j.at("per_class_iou"));
  for (auto it = j.at("counts").begin(); it != j.at("counts").end(); ++it) {
    const auto& v = it.value();
    panoptic::ClassCounts k;
    k.tp = v.at("tp").get<int>();
    k.fp = v.at("fp").get<int>();
    k.fn = v.at("fn").get<int>();
    k.iou_sum = v.at("iou_sum").get<double>();
    k.intersection = v.at("intersection").get<std::int64_t>();
    k.union_ = v.at("union").get<std::int64_t>();
    r.counts[std::stoi(it.key())] = k;
  }
  return r;
}

}  // namespace

std::string record_to_json(const RunRecord& r) {
  json steps = json::array();
  for (const auto& s : r.steps) {
    json conf = nullptr;
    if (s.confusion)
      conf = {{"to_old", s.confusion->to_old}, {"to_background", s.confusion->to_background},
              {"to_future", s.confusion->to_future}, {"future_pixels", s.confusion->future_pixels}};
    steps.push_back({{"step", s.step},
                     {"train_images", s.train_images},
                     {"val", report_json(s.val)},
                     {"test", report_json(s.test)},
                     {"confusion", conf},
                     {"congruence_mean", opt_json(s.congruence_mean)},
                     {"classifier_congruence_mean", opt_json(s.classifier_congruence_mean)},
                     {"congruence", int_map(s.congruence)},
                     {"retention", s.retention},
                     {"pq_new", opt_json(s.pq_new)}});
  }
  json train = json::array();
  for (std::size_t i = 0; i < r.train_log.size(); ++i) {
    const auto& t = r.train_log[i];
    train.push_back({r.train_log_step[i], t.iteration, t.loss_pan, t.loss_reg, t.loss_rep, t.loss_aux, t.loss_total,
                     t.num_regions, t.num_unlabeled});
  }
  const json j = {{"config_hash", r.config_hash},
                  {"variant", r.variant},
                  {"stream_mode", r.stream_mode},
                  {"num_steps", r.num_steps},
                  {"steps", steps},
                  {"train_log", train},
                  {"base_prototypes", int_map(r.base_prototypes)},
                  {"base_classifier_rows", int_map(r.base_classifier_rows)}};
  return j.dump(1) + "\n";
}

RunRecord record_from_json(const std::string& text) {
  const auto j = json::parse(text);
  RunRecord r;
  r.config_hash = j.at("config_hash").get<std::string>();
  r.variant = j.at("variant").get<std::string>();
  r.stream_mode = j.at("stream_mode").get<std::string>();
  r.num_steps = j.at("num_steps").get<int>();
  for (const auto& s : j.at("steps")) {
    StepEvaluation e;
    e.step = s.at("step").get<int>();
    e.train_images = s.at("train_images").get<int>();
    e.val = report_from(s.at("val"));
    e.test = report_from(s.at("test"));
    if (!s.at("confusion").is_null()) {
      const auto& c = s.at("confusion");
      analysis::ConfusionProfile p;
      p.step = e.step;
      p.to_old = c.at("to_old").get<double>();
      p.to_background = c.at("to_background").get<double>();
      p.to_future = c.at("to_future").get<double>();
      p.future_pixels = c.at("future_pixels").get<long long>();
      e.confusion = p;
    }
    e.congruence_mean = opt_from(s.at("congruence_mean"));
    e.classifier_congruence_mean = opt_from(s.at("classifier_congruence_mean"));
    e.congruence = int_map_from<double>(s.at("congruence"));
    e.retention = s.at("retention").get<double>();
    e.pq_new = opt_from(s.at("pq_new"));
    r.steps.push_back(std::move(e));
  }
  for (const auto& t : j.at("train_log")) {
    future::StepRecord s;
    r.train_log_step.push_back(t.at(0).get<int>());
    s.iteration = t.at(1).get<std::int64_t>();
    s.loss_pan = t.at(2).get<double>();
    s.loss_reg = t.at(3).get<double>();
    s.loss_rep = t.at(4).get<double>();
    s.loss_aux = t.at(5).get<double>();
    s.loss_total = t.at(6).get<double>();
    s.num_regions = t.at(7).get<int>();
    s.num_unlabeled = t.at(8).get<int>();
    r.train_log.push_back(s);
  }
  r.base_prototypes = int_map_from<std::vector<double>>(j.at("base_prototypes"));
  r.base_classifier_rows = int_map_from<std::vector<double>>(j.at("base_classifier_rows"));
  return r;
}

RunRecord load_record(const fs::path& run_dir) { return record_from_json(read_file(run_dir / "metrics.json")); }

std::string metrics_csv(const RunRecord& r) {
  std::string out = "step,split,train_images,pq_base,pq_new,pq_all,miou_base,miou_new,miou_all\n";
  for (const auto& s : r.steps)
    for (const auto& [name, rep] : {std::pair<const char*, const panoptic::MetricReport*>{"val", &s.val}, {"test", &s.test}})
      out += std::to_string(s.step) + "," + name + "," + std::to_string(s.train_images) + "," + fmt_double(rep->pq_base) +
             "," + fmt_opt(rep->pq_new) + "," + fmt_double(rep->pq_all) + "," + fmt_double(rep->miou_base) + "," +
             fmt_opt(rep->miou_new) + "," + fmt_double(rep->miou_all) + "\n";
  return out;
}

std::string diagnostics_csv(const RunRecord& r) {
  std::string out =
      "step,conf_to_old,conf_to_bg,conf_to_future,proto_congruence_mean,classifier_congruence_mean,retention,pq_new\n";
  for (const auto& s : r.steps) {
    out += std::to_string(s.step) + ",";
    if (s.confusion)
      out += fmt_double(s.confusion->to_old) + "," + fmt_double(s.confusion->to_background) + "," +
             fmt_double(s.confusion->to_future) + ",";
    else
      out += ",,,";
    out += fmt_opt(s.congruence_mean) + "," + fmt_opt(s.classifier_congruence_mean) + "," + fmt_double(s.retention) + "," +
           fmt_opt(s.pq_new) + "\n";
  }
  return out;
}

std::string train_log_csv(const RunRecord& r) {
  std::string out = "step,iteration,loss_pan,loss_reg,loss_rep,loss_aux,loss_total,num_regions,num_unlabeled\n";
  for (std::size_t i = 0; i < r.train_log.size(); ++i) {
    const auto& t = r.train_log[i];
    out += std::to_string(r.train_log_step[i]) + "," + std::to_string(t.iteration) + "," + fmt_double(t.loss_pan) + "," +
           fmt_double(t.loss_reg) + "," + fmt_double(t.loss_rep) + "," + fmt_double(t.loss_aux) + "," +
           fmt_double(t.loss_total) + "," + std::to_string(t.num_regions) + "," + std::to_string(t.num_unlabeled) + "\n";
  }
  return out;
}

// Running --------------------------------------------------------------------------

namespace {

struct World {
  scenes::SceneSpec spec;
  std::vector<scenes::SceneSample> train, val, test;
  stream::ClassSchedule schedule;
  std::vector<stream::StepDataset> steps;
  stream::StreamManifest manifest;
};

World build_world(const ExperimentConfig& cfg) {
  World w;
  w.spec = scenes::default_spec(cfg.num_classes, cfg.num_stuff, cfg.height, cfg.width);
  const auto data = scenes::generate_dataset(w.spec, cfg.num_images, cfg.dataset_seed);
  const auto split = stream::split_dataset(cfg.num_images, cfg.val_fraction, cfg.test_fraction, cfg.split_seed);
  for (int i : split.train) w.train.push_back(data[static_cast<std::size_t>(i)]);
  for (int i : split.val) w.val.push_back(data[static_cast<std::size_t>(i)]);
  for (int i : split.test) w.test.push_back(data[static_cast<std::size_t>(i)]);
  w.schedule = stream::build_schedule(cfg.num_classes, cfg.base_count, cfg.increment_size, cfg.class_order_seed);
  if (cfg.max_steps > 0 && cfg.max_steps < w.schedule.num_steps())
    w.schedule.increments.resize(static_cast<std::size_t>(cfg.max_steps - 1));
  w.steps = stream::assign_images(w.train, w.schedule, cfg.stream);
  double fraction = cfg.stream.subsample_fraction;
  if (cfg.stream.images_per_increment > 0) fraction = stream::fraction_for_target(w.steps, cfg.stream.images_per_increment);
  if (fraction < 1.0) w.steps = stream::subsample_steps(w.steps, fraction, derive_seed(cfg.stream.seed, {0x5B5}));
  w.manifest = stream::make_manifest(w.steps, w.schedule, cfg.stream, "ids index the train split of split_dataset");
  return w;
}

struct SplitPass {
  std::vector<panoptic::PanopticMap> predictions;
  std::vector<std::vector<double>> features;
};

SplitPass run_split(const seg::QueryModel& model, const std::vector<scenes::SceneSample>& samples,
                    const panoptic::LabelSpace& space, const seg::InferenceSettings& inf) {
  SplitPass p;
  p.predictions.resize(samples.size());
  p.features.resize(samples.size());
#pragma omp parallel for schedule(static)
  for (int i = 0; i < static_cast<int>(samples.size()); ++i) {
    auto out = seg::forward(model, samples[static_cast<std::size_t>(i)].image);
    p.predictions[static_cast<std::size_t>(i)] = seg::panoptic_inference(out, space, inf);
    p.features[static_cast<std::size_t>(i)] = std::move(out.features);
  }
  return p;
}

panoptic::MetricReport evaluate(const SplitPass& pass, const std::vector<scenes::SceneSample>& samples,
                                const panoptic::LabelSpace& space, const stream::ClassSchedule& schedule, int step) {
  panoptic::PanopticEvaluator ev(space);
  for (std::size_t i = 0; i < samples.size(); ++i) ev.add(pass.predictions[i], samples[i].annotation);
  return panoptic::make_report(ev, schedule.base_set(), schedule.new_up_to(step));
}

seg::TrainBatch sample_batch(const stream::StepDataset& sd, const std::vector<panoptic::PanopticMap>& known_view,
                             const std::vector<scenes::SceneSample>& train, int batch_size, Rng& rng) {
  const auto n = static_cast<int>(sd.samples.size());
  std::vector<int> picks;
  if (n >= batch_size) {
    picks = rng.sample_without_replacement(n, batch_size);
  } else {
    for (int i = 0; i < batch_size; ++i) picks.push_back(static_cast<int>(rng.below(static_cast<std::uint64_t>(n))));
  }
  seg::TrainBatch b;
  for (int i : picks) {
    const auto& s = sd.samples[static_cast<std::size_t>(i)];
    b.images.emplace_back(train[static_cast<std::size_t>(s.image_id)].image);
    b.annotations.push_back(&s.training);
    if (!known_view.empty()) b.known_view.push_back(&known_view[static_cast<std::size_t>(i)]);
  }
  return b;
}

fs::path checkpoint_path(const fs::path& dir, int step) { return dir / "checkpoints" / ("step_" + std::to_string(step) + ".ckpt"); }

void persist(const fs::path& dir, const RunRecord& rec) {
  write_file(dir / "metrics.json", record_to_json(rec));
  write_file(dir / "metrics.csv", metrics_csv(rec));
  write_file(dir / "diagnostics.csv", diagnostics_csv(rec));
  write_file(dir / "train_log.csv", train_log_csv(rec));
}

}  // namespace

RunRecord run_experiment(const ExperimentConfig& cfg, const RunOptions& options) {
  cfg.validate();
  const auto t0 = std::chrono::steady_clock::now();
  const fs::path dir = cfg.out_dir;
  fs::create_directories(dir / "checkpoints");
  const auto hash = config_hash(cfg);

  RunRecord rec;
  if (fs::exists(dir / "metrics.json")) {
    if (!options.resume) throw std::runtime_error(dir.string() + " already holds a run; pass --resume to continue it");
    rec = load_record(dir);
    if (rec.config_hash != hash)
      throw std::runtime_error("config hash " + hash + " does not match the run in " + dir.string() + " (" +
                               rec.config_hash + "); refusing to resume");
  }
  const auto mcfg = cfg.effective_model();
  const auto fcfg = cfg.effective_futcr();
  const World w = build_world(cfg);
  const auto& space = w.spec.label_space;
  rec.config_hash = hash;
  rec.variant = cfg.variant_rc && cfg.variant_kfr ? "full" : cfg.variant_rc ? "rc" : cfg.variant_kfr ? "kfr" : "baseline";
  if (cfg.variant_aux) rec.variant += "+aux";
  rec.stream_mode = stream::to_string(cfg.stream.mode);
  rec.num_steps = w.schedule.num_steps();
  write_file(dir / "config.txt", config_to_text(cfg));
  write_file(dir / "manifest.json", stream::manifest_to_json(w.manifest));

  seg::QueryModel model(mcfg, cfg.model_seed);
  const int done = static_cast<int>(rec.steps.size());
  if (done > 0) {
    std::ifstream in(checkpoint_path(dir, done), std::ios::binary);
    if (!in) throw std::runtime_error("missing checkpoint for completed step " + std::to_string(done));
    const auto ck = seg::read_checkpoint(in);
    if (ck.config_hash != hash || ck.step_index != done || !(ck.config == mcfg))
      throw std::runtime_error("checkpoint does not belong to this run");
    model = seg::QueryModel(mcfg, ck.params);
  }

  for (int t = done + 1; t <= w.schedule.num_steps(); ++t) {
    const auto& sd = w.steps[static_cast<std::size_t>(t - 1)];
    // each step starts from the previous step's weights with a fresh optimiser
    auto acfg = cfg.optimizer;
    if (t > 1) acfg.lr *= cfg.increment_lr_scale;
    auto opt = seg::make_optimizer(model.params().size(), acfg);
    future::AuxState aux;
    future::StepContext ctx{&space, w.schedule.current(t), w.schedule.known(t), t,
                            derive_seed(cfg.train_seed, {0x57E9, static_cast<std::uint64_t>(t)}), 0};
    const int iterations = t == 1 ? cfg.base_iterations : cfg.increment_iterations;
    // old-class pixels are masked out of the supervision but are not unlabeled
    std::vector<panoptic::PanopticMap> known_view;
    if (t > 1)
      for (const auto& s : sd.samples)
        known_view.push_back(stream::mask_labels(w.train[static_cast<std::size_t>(s.image_id)].annotation, ctx.known));
    for (int it = 0; it < iterations; ++it) {
      Rng rng(derive_seed(cfg.train_seed, {0xBA7C, static_cast<std::uint64_t>(t), static_cast<std::uint64_t>(it)}));
      const auto batch = sample_batch(sd, known_view, w.train, cfg.batch_size, rng);
      ctx.iteration = it;
      rec.train_log.push_back(future::train_step(model, opt, batch, ctx, fcfg, aux, cfg.loss));
      rec.train_log_step.push_back(t);
    }

    StepEvaluation ev;
    ev.step = t;
    ev.train_images = static_cast<int>(sd.samples.size());
    const auto val_pass = run_split(model, w.val, space, cfg.inference);
    const auto test_pass = run_split(model, w.test, space, cfg.inference);
    ev.val = evaluate(val_pass, w.val, space, w.schedule, t);
    ev.test = evaluate(test_pass, w.test, space, w.schedule, t);

    const bool diag_val = cfg.diagnostics_split == "val";
    const auto& dpass = diag_val ? val_pass : test_pass;
    const auto& dsamples = diag_val ? w.val : w.test;
    std::vector<const panoptic::PanopticMap*> gts;
    std::vector<std::span<const double>> feats;
    for (std::size_t i = 0; i < dsamples.size(); ++i) {
      gts.push_back(&dsamples[i].annotation);
      feats.emplace_back(dpass.features[i]);
    }
    if (w.schedule.known(t).size() < static_cast<std::size_t>(cfg.num_classes)) {
      try {
        ev.confusion = analysis::confusion_from_maps(dpass.predictions, gts, w.schedule.known(t));
        ev.confusion->step = t;
      } catch (const std::invalid_argument&) {
        // no future-class pixel in this split
      }
    }
    const auto base = w.schedule.base_set();
    const auto protos = analysis::class_prototypes(feats, mcfg.feature_dim, gts, mcfg.image_height / mcfg.feature_height(), base);
    const auto rows = analysis::classifier_prototypes(model, base);
    if (t == 1) {
      rec.base_prototypes = protos.prototypes;
      rec.base_classifier_rows = rows.prototypes;
    }
    analysis::PrototypeSet ref_data, ref_rows;
    ref_data.prototypes = rec.base_prototypes;
    ref_rows.prototypes = rec.base_classifier_rows;
    try {
      const auto cong = analysis::prototype_congruence(protos, ref_data);
      ev.congruence = cong.cosine;
      ev.congruence_mean = cong.mean;
    } catch (const std::invalid_argument&) {
    }
    try {
      ev.classifier_congruence_mean = analysis::prototype_congruence(rows, ref_rows).mean;
    } catch (const std::invalid_argument&) {
    }
    const double base1 = t == 1 ? ev.val.pq_base : rec.steps.front().val.pq_base;
    ev.retention = base1 > 0.0 ? ev.val.pq_base / base1 : 0.0;
    ev.pq_new = ev.val.pq_new;
    rec.steps.push_back(std::move(ev));

    {
      seg::Checkpoint ck{mcfg, model.params(), opt, t, hash};
      const auto path = checkpoint_path(dir, t);
      std::ofstream out(path.string() + ".tmp", std::ios::binary);
      seg::write_checkpoint(out, ck);
      out.close();
      fs::rename(path.string() + ".tmp", path);
    }
    persist(dir, rec);
    if (!options.quiet)
      std::cerr << "[" << dir.string() << "] step " << t << "/" << w.schedule.num_steps() << " val PQ_all "
                << rec.steps.back().val.pq_all << "\n";
    if (options.stop_after_step == t) break;
  }

  rec.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  write_file(dir / "timing.json", json{{"wall_seconds_last_session", rec.wall_seconds}}.dump() + "\n");
  return rec;
}

// Suites --------------------------------------------------------------------------

AblationTable run_ablation_suite(const ExperimentConfig& cfg, const RunOptions& options) {
  AblationTable table;
  for (auto v : {Variant::Baseline, Variant::RegionContrast, Variant::Repulsion, Variant::Full}) {
    AblationRow row;
    row.variant = v;
    for (auto mode : {stream::StreamMode::Overlap, stream::StreamMode::Disjoint}) {
      auto c = cfg;
      c.stream.mode = mode;
      apply_variant(c, v);
      c.out_dir = (fs::path(cfg.out_dir) / "ablation" / stream::to_string(mode) / to_string(v)).string();
      row.by_stream[stream::to_string(mode)] = run_experiment(c, options);
    }
    table.rows.push_back(std::move(row));
  }
  return table;
}

std::string render_ablation_csv(const AblationTable& table) {
  std::string out =
      "variant,rc,kfr,overlap_pq_base,overlap_pq_new,overlap_pq_all,disjoint_pq_base,disjoint_pq_new,disjoint_pq_all,"
      "avg_pq_all\n";
  for (const auto& row : table.rows) {
    const bool rc = row.variant == Variant::RegionContrast || row.variant == Variant::Full;
    const bool kfr = row.variant == Variant::Repulsion || row.variant == Variant::Full;
    out += to_string(row.variant) + "," + (rc ? "1" : "0") + "," + (kfr ? "1" : "0");
    double sum = 0.0;
    int n = 0;
    for (const char* mode : {"overlap", "disjoint"}) {
      const auto it = row.by_stream.find(mode);
      if (it == row.by_stream.end() || it->second.steps.empty()) {
        out += ",,,";
        continue;
      }
      const auto& v = it->second.final_step().val;
      out += "," + fmt_double(v.pq_base) + "," + fmt_opt(v.pq_new) + "," + fmt_double(v.pq_all);
      sum += v.pq_all;
      ++n;
    }
    out += "," + (n == 2 ? fmt_double(sum / 2.0) : std::string()) + "\n";
  }
  return out;
}

std::vector<SweepPoint> run_reduced_supervision_sweep(const ExperimentConfig& cfg, const std::vector<double>& fractions,
                                                      const RunOptions& options) {
  for (double f : fractions)
    if (!(f > 0.0 && f <= 1.0)) throw std::invalid_argument("sweep fractions must lie in (0, 1]");
  std::vector<SweepPoint> points;
  for (auto mode : {stream::StreamMode::Overlap, stream::StreamMode::Disjoint})
    for (double f : fractions) {
      auto c = cfg;
      c.stream.mode = mode;
      c.stream.subsample_fraction = f;
      c.stream.images_per_increment = 0;
      char tag[32];
      std::snprintf(tag, sizeof tag, "f%.4g", f);
      c.out_dir = (fs::path(cfg.out_dir) / "sweep" / (stream::to_string(mode) + "_" + tag)).string();
      SweepPoint p;
      p.fraction = f;
      p.stream_mode = stream::to_string(mode);
      p.record = run_experiment(c, options);
      double total = 0.0;
      int n = 0;
      for (const auto& s : p.record.steps)
        if (s.step > 1) {
          total += s.train_images;
          ++n;
        }
      p.mean_images_per_increment = n > 0 ? total / n : 0.0;
      points.push_back(std::move(p));
    }
  return points;
}

std::string render_sweep_csv(const std::vector<SweepPoint>& points) {
  std::string out = "stream,fraction,mean_images_per_increment,final_pq_all_test,final_pq_all_val\n";
  for (const auto& p : points) {
    out += p.stream_mode + "," + fmt_double(p.fraction) + "," + fmt_double(p.mean_images_per_increment) + ",";
    if (p.record.complete())
      out += fmt_double(p.record.final_step().test.pq_all) + "," + fmt_double(p.record.final_step().val.pq_all);
    else
      out += ",";
    out += "\n";
  }
  return out;
}

// Reports -----------------------------------------------------------------------

std::map<std::string, std::string> render_report(const std::vector<LabeledRecord>& records) {
  std::map<std::string, std::string> files;
  std::string main = "label,variant,stream,complete,step,split,pq_base,pq_new,pq_all,miou_base,miou_new,miou_all\n";
  std::string conf = "label,step,conf_to_old,conf_to_bg,conf_to_future\n";
  std::string cong = "label,step,proto_congruence_mean,classifier_congruence_mean\n";
  std::string cong_cls = "label,step,class,cosine\n";
  std::string traj = "label,step,retention,pq_new\n";
  for (const auto& [label, r] : records) {
    const std::string head = label + "," + r.variant + "," + r.stream_mode + "," + (r.complete() ? "1" : "0") + ",";
    if (r.steps.empty()) {
      main += head + ",test,,,,,,\n" + head + ",val,,,,,,\n";
    } else {
      const auto& s = r.final_step();
      for (const auto& [name, rep] : {std::pair<const char*, const panoptic::MetricReport*>{"test", &s.test}, {"val", &s.val}})
        main += head + std::to_string(s.step) + "," + name + "," + fmt_double(rep->pq_base) + "," + fmt_opt(rep->pq_new) + "," +
                fmt_double(rep->pq_all) + "," + fmt_double(rep->miou_base) + "," + fmt_opt(rep->miou_new) + "," +
                fmt_double(rep->miou_all) + "\n";
    }
    for (const auto& s : r.steps) {
      const std::string st = label + "," + std::to_string(s.step) + ",";
      if (s.confusion)
        conf += st + fmt_double(s.confusion->to_old) + "," + fmt_double(s.confusion->to_background) + "," +
                fmt_double(s.confusion->to_future) + "\n";
      else
        conf += st + ",,\n";
      cong += st + fmt_opt(s.congruence_mean) + "," + fmt_opt(s.classifier_congruence_mean) + "\n";
      for (const auto& [c, v] : s.congruence) cong_cls += st + std::to_string(c) + "," + fmt_double(v) + "\n";
      if (s.step > 1) traj += st + fmt_double(s.retention) + "," + fmt_opt(s.pq_new) + "\n";
    }
  }
  files["main_table.csv"] = main;
  files["confusion_profile.csv"] = conf;
  files["congruence.csv"] = cong;
  files["congruence_classes.csv"] = cong_cls;
  files["trajectory.csv"] = traj;
  return files;
}

void write_report(const fs::path& dir, const std::vector<LabeledRecord>& records) {
  fs::create_directories(dir);
  for (const auto& [name, text] : render_report(records)) write_file(dir / name, text);
}

}  // namespace futcr::experiment
