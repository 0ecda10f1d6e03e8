#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>

#include "CLI11.hpp"
#include "futcr/experiment.hpp"

namespace fs = std::filesystem;
using namespace futcr::experiment;

namespace {

ExperimentConfig load(const std::string& path, const std::string& out, std::optional<std::uint64_t> seed,
                      const std::string& variant) {
  ExperimentConfig cfg = path.empty() ? ExperimentConfig{} : load_config(path);
  if (seed) apply_seed_override(cfg, *seed);
  if (!variant.empty()) apply_variant(cfg, variant_from_string(variant));
  if (!out.empty()) cfg.out_dir = out;
  cfg.validate();
  return cfg;
}

std::vector<LabeledRecord> collect_runs(const std::vector<std::string>& dirs, const fs::path& root) {
  std::vector<fs::path> found;
  for (const auto& d : dirs) found.emplace_back(d);
  if (found.empty() && fs::exists(root))
    for (const auto& e : fs::recursive_directory_iterator(root))
      if (e.is_regular_file() && e.path().filename() == "metrics.json") found.push_back(e.path().parent_path());
  std::sort(found.begin(), found.end());
  std::vector<LabeledRecord> out;
  for (const auto& d : found) {
    const auto rel = root.empty() ? d : fs::relative(d, root);
    out.push_back({rel.empty() || rel == "." ? d.filename().string() : rel.generic_string(), load_record(d)});
  }
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Continual panoptic segmentation lab with future-targeted regularisers"};
  app.require_subcommand(1);

  std::string config_path, out_dir, variant;
  std::optional<std::uint64_t> seed;
  bool resume = false;
  auto add_common = [&](CLI::App* cmd) {
    cmd->add_option("--config", config_path, "flat key = value config file");
    cmd->add_option("--out", out_dir, "output directory (overrides run.out_dir)");
    cmd->add_option("--seed", seed, "re-derive every seed from this root");
    cmd->add_option("--variant", variant, "baseline, rc, kfr or full")
        ->check(CLI::IsMember({"baseline", "rc", "kfr", "full"}));
  };

  auto* run = app.add_subcommand("run", "train and evaluate one continual run");
  add_common(run);
  run->add_flag("--resume", resume, "continue from the last completed step");

  auto* ablate = app.add_subcommand("ablate", "four variants x two streams");
  add_common(ablate);
  ablate->add_flag("--resume", resume, "continue interrupted runs");

  std::vector<double> fractions{1.0, 0.5, 0.25};
  auto* sweep = app.add_subcommand("sweep", "reduced-supervision sweep over both streams");
  add_common(sweep);
  sweep->add_flag("--resume", resume, "continue interrupted runs");
  sweep->add_option("--fractions", fractions, "kept share of each incremental step")->delimiter(',');

  std::vector<std::string> run_dirs;
  auto* report = app.add_subcommand("report", "render tables from persisted runs");
  report->add_option("--out", out_dir, "where to write the tables (default: report/ under the first run's parent)");
  report->add_option("runs", run_dirs, "run directories (default: every run found under --runs-root)");
  std::string runs_root = "runs";
  report->add_option("--runs-root", runs_root, "directory scanned for metrics.json when no run is listed");

  auto* validate = app.add_subcommand("validate-config", "parse, validate and print the effective config");
  add_common(validate);
  bool list_keys = false;
  validate->add_flag("--keys", list_keys, "list every key with its documentation");

  CLI11_PARSE(app, argc, argv);

  try {
    RunOptions opts;
    opts.resume = resume;
    opts.quiet = false;
    if (*run) {
      const auto cfg = load(config_path, out_dir, seed, variant);
      const auto rec = run_experiment(cfg, opts);
      const auto& last = rec.final_step().test;
      std::cout << "final test PQ_base " << last.pq_base << " PQ_new " << (last.pq_new ? std::to_string(*last.pq_new) : "-")
                << " PQ_all " << last.pq_all << "  (" << rec.wall_seconds << " s)\n";
    } else if (*ablate) {
      const auto cfg = load(config_path, out_dir, seed, variant);
      const auto table = run_ablation_suite(cfg, opts);
      const auto csv = render_ablation_csv(table);
      std::ofstream(fs::path(cfg.out_dir) / "ablation" / "ablation_table.csv") << csv;
      std::cout << csv;
    } else if (*sweep) {
      const auto cfg = load(config_path, out_dir, seed, variant);
      const auto points = run_reduced_supervision_sweep(cfg, fractions, opts);
      const auto csv = render_sweep_csv(points);
      std::ofstream(fs::path(cfg.out_dir) / "sweep" / "sweep.csv") << csv;
      std::cout << csv;
    } else if (*report) {
      const auto records = collect_runs(run_dirs, run_dirs.empty() ? fs::path(runs_root) : fs::path());
      if (records.empty()) throw std::runtime_error("no runs found");
      const fs::path dest = out_dir.empty() ? fs::path(runs_root) / "report" : fs::path(out_dir);
      write_report(dest, records);
      std::cout << "wrote " << records.size() << " run(s) to " << dest.string() << "\n";
    } else if (*validate) {
      if (list_keys) {
        for (const auto& k : config_keys()) std::cout << k.key << "\t" << k.doc << "\n";
        return 0;
      }
      const auto cfg = load(config_path, out_dir, seed, variant);
      std::cout << config_to_text(cfg) << "# hash " << config_hash(cfg) << "\n";
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
