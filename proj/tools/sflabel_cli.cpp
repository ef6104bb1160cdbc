// Command-line front end: batch pseudo-label generation, label evaluation,
// synthetic scene materialization and the pipeline benchmark.

#include <algorithm>
#include <atomic>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <mutex>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <CLI11.hpp>

#include "sflabel/config.hpp"
#include "sflabel/pipeline.hpp"
#include "sflabel/scenespec.hpp"

namespace fs = std::filesystem;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUsage = 1;
constexpr int kExitRuntime = 2;

struct CommonFlags {
  std::string config_path;
  std::string out_dir;
  std::optional<std::uint64_t> seed;
  std::optional<int> workers;
  std::optional<int> k_aug;
};

sflabel::PipelineConfig resolve_config(const CommonFlags& flags) {
  sflabel::PipelineConfig cfg;
  if (!flags.config_path.empty()) cfg = sflabel::load_config(flags.config_path);
  if (flags.seed) cfg.seed = *flags.seed;
  if (flags.workers) cfg.workers = *flags.workers;
  if (flags.k_aug) cfg.augment.variants = *flags.k_aug;
  cfg.validate();
  return cfg;
}

std::vector<std::pair<fs::path, fs::path>> resolve_pairs(const std::string& input_dir,
                                                         const std::string& pairs_file) {
  std::vector<std::pair<fs::path, fs::path>> pairs;
  if (!pairs_file.empty()) {
    std::ifstream in(pairs_file);
    if (!in) throw sflabel::io_error("cannot open pairs file " + pairs_file);
    std::string line;
    while (std::getline(in, line)) {
      std::istringstream ls(line);
      std::string a, b;
      if (!(ls >> a >> b)) continue;
      pairs.emplace_back(a, b);
    }
    return pairs;
  }
  std::vector<fs::path> frames;
  for (const auto& entry : fs::directory_iterator(input_dir)) {
    if (!entry.is_regular_file()) continue;
    const std::string ext = entry.path().extension().string();
    if (ext == ".bin" || ext == ".ply") frames.push_back(entry.path());
  }
  std::sort(frames.begin(), frames.end());
  for (std::size_t i = 0; i + 1 < frames.size(); ++i) pairs.emplace_back(frames[i], frames[i + 1]);
  return pairs;
}

std::string pair_id_of(const fs::path& a, const fs::path& b) {
  return a.stem().string() + "_" + b.stem().string();
}

int cmd_label(const CommonFlags& flags, const std::string& input_dir,
              const std::string& pairs_file) {
  const sflabel::PipelineConfig cfg = resolve_config(flags);
  const auto pairs = resolve_pairs(input_dir, pairs_file);
  if (pairs.empty()) {
    std::cerr << "error: no pairs resolved\n";
    return kExitRuntime;
  }
  const fs::path out_dir = flags.out_dir.empty() ? fs::path("labels") : fs::path(flags.out_dir);

  struct Row {
    std::string pair_id;
    std::size_t labels = 0;
    double final_loss = 0.0;
    double wall_ms = 0.0;
    std::string error;
  };
  std::vector<Row> rows(pairs.size());
  std::atomic<std::size_t> next{0};
  const int workers = std::min<int>(cfg.workers, static_cast<int>(pairs.size()));

  const auto run_worker = [&]() {
    while (true) {
      const std::size_t i = next.fetch_add(1);
      if (i >= pairs.size()) break;
      Row& row = rows[i];
      row.pair_id = pair_id_of(pairs[i].first, pairs[i].second);
      try {
        const sflabel::PointCloud src = sflabel::read_point_file(pairs[i].first);
        const sflabel::PointCloud tgt = sflabel::read_point_file(pairs[i].second);
        const sflabel::PairResult res =
            sflabel::label_pair_clouds(src, tgt, row.pair_id, cfg, out_dir);
        row.labels = res.labels_emitted;
        row.final_loss = res.history.empty() ? 0.0 : res.history.back().total;
        row.wall_ms = res.wall_ms;
      } catch (const std::exception& e) {
        row.error = e.what();
      }
    }
  };

  const auto t0 = std::chrono::steady_clock::now();
  std::vector<std::thread> pool;
  for (int w = 1; w < workers; ++w) pool.emplace_back(run_worker);
  run_worker();
  for (auto& t : pool) t.join();
  const double wall_s =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

  std::size_t labels = 0, failures = 0;
  double loss_sum = 0.0;
  for (const Row& row : rows) {
    if (!row.error.empty()) {
      ++failures;
      std::cerr << "pair " << row.pair_id << ": " << row.error << "\n";
      continue;
    }
    labels += row.labels;
    loss_sum += row.final_loss;
    std::cout << row.pair_id << ": " << row.labels << " labels, final loss "
              << std::setprecision(6) << row.final_loss << ", " << std::fixed
              << std::setprecision(0) << row.wall_ms << " ms\n"
              << std::defaultfloat << std::setprecision(6);
  }
  const std::size_t ok = pairs.size() - failures;
  std::cout << "pairs: " << pairs.size() << "  labels: " << labels << "  mean loss: "
            << (ok ? loss_sum / static_cast<double>(ok) : 0.0) << "  wall: " << std::fixed
            << std::setprecision(1) << wall_s << " s\n";
  return failures == 0 ? kExitOk : kExitRuntime;
}

int cmd_eval(const std::string& pred_dir, const std::string& gt_dir, const std::string& csv_out) {
  const auto stems_of = [](const fs::path& dir) {
    std::vector<std::string> stems;
    for (const auto& entry : fs::directory_iterator(dir))
      if (entry.is_regular_file() && entry.path().extension() == ".sfl")
        stems.push_back(entry.path().stem().string());
    std::sort(stems.begin(), stems.end());
    return stems;
  };
  const auto pred_stems = stems_of(pred_dir), gt_stems = stems_of(gt_dir);
  std::vector<std::string> matched;
  std::set_intersection(pred_stems.begin(), pred_stems.end(), gt_stems.begin(), gt_stems.end(),
                        std::back_inserter(matched));
  for (const auto& s : pred_stems)
    if (!std::binary_search(gt_stems.begin(), gt_stems.end(), s))
      std::cerr << "warning: " << s << " missing in ground-truth dir, skipped\n";
  for (const auto& s : gt_stems)
    if (!std::binary_search(pred_stems.begin(), pred_stems.end(), s))
      std::cerr << "warning: " << s << " missing in prediction dir, skipped\n";
  if (matched.empty()) {
    std::cerr << "error: no matching pair ids\n";
    return kExitRuntime;
  }

  std::ofstream csv(csv_out, std::ios::trunc);
  if (!csv) {
    std::cerr << "error: cannot write " << csv_out << "\n";
    return kExitRuntime;
  }
  csv << "pair_id,epe3d,acc3ds,acc3dr,outliers\n" << std::setprecision(10);
  std::cout << std::left << std::setw(28) << "pair_id" << std::right << std::setw(10) << "epe3d"
            << std::setw(10) << "acc3ds" << std::setw(10) << "acc3dr" << std::setw(10)
            << "outliers" << "\n";
  sflabel::MetricsRecord mean;
  std::size_t evaluated = 0;
  for (const std::string& id : matched) {
    const auto pred = sflabel::read_label_file(fs::path(pred_dir) / (id + ".sfl"));
    const auto gt = sflabel::read_label_file(fs::path(gt_dir) / (id + ".sfl"));
    if (pred.flow.size() != gt.flow.size()) {
      std::cerr << "warning: " << id << " point count mismatch, skipped\n";
      continue;
    }
    sflabel::FlowLabel p, g;
    for (const auto& v : pred.flow) p.flow.push_back(v.cast<double>());
    for (const auto& v : gt.flow) g.flow.push_back(v.cast<double>());
    const sflabel::MetricsRecord m = sflabel::compute_metrics(p, g);
    csv << id << ',' << m.epe3d << ',' << m.acc3ds << ',' << m.acc3dr << ',' << m.outliers << "\n";
    std::cout << std::left << std::setw(28) << id << std::right << std::fixed
              << std::setprecision(4) << std::setw(10) << m.epe3d << std::setw(10) << m.acc3ds
              << std::setw(10) << m.acc3dr << std::setw(10) << m.outliers << "\n"
              << std::defaultfloat << std::setprecision(6);
    mean.epe3d += m.epe3d;
    mean.acc3ds += m.acc3ds;
    mean.acc3dr += m.acc3dr;
    mean.outliers += m.outliers;
    ++evaluated;
  }
  if (evaluated == 0) {
    std::cerr << "error: nothing evaluated\n";
    return kExitRuntime;
  }
  const double inv = 1.0 / static_cast<double>(evaluated);
  csv << "summary," << mean.epe3d * inv << ',' << mean.acc3ds * inv << ',' << mean.acc3dr * inv
      << ',' << mean.outliers * inv << "\n";
  std::cout << "mean over " << evaluated << " pairs: epe3d " << mean.epe3d * inv << "  acc3ds "
            << mean.acc3ds * inv << "  acc3dr " << mean.acc3dr * inv << "  outliers "
            << mean.outliers * inv << "\n";
  return kExitOk;
}

int cmd_synth(const std::string& spec_file, const std::string& out_dir) {
  const auto specs = sflabel::load_scene_specs(spec_file);
  for (std::size_t s = 0; s < specs.size(); ++s) {
    std::ostringstream id;
    id << "scene" << std::setw(3) << std::setfill('0') << s;
    sflabel::write_synthetic_scene(sflabel::generate_synthetic_scene(specs[s]), out_dir, id.str());
  }
  std::cout << "wrote " << specs.size() << " scenes to " << out_dir << "\n";
  return kExitOk;
}

int cmd_bench(const CommonFlags& flags, const std::string& spec_file) {
  const sflabel::PipelineConfig cfg = resolve_config(flags);
  const auto specs = sflabel::load_scene_specs(spec_file);
  const sflabel::PipelineEvaluation ev = sflabel::evaluate_pipeline(specs, cfg);
  const fs::path csv =
      flags.out_dir.empty() ? fs::path("bench.csv") : fs::path(flags.out_dir) / "bench.csv";
  if (csv.has_parent_path()) fs::create_directories(csv.parent_path());
  sflabel::write_evaluation_csv(ev, csv);
  for (const auto& s : ev.scenes) {
    std::cout << s.scene_id << ": epe3d " << std::fixed << std::setprecision(4) << s.metrics.epe3d
              << "  yaw_err " << s.yaw_error_deg << " deg  t_err " << s.translation_error
              << " m  dyn " << s.dynamic_boxes_detected << "/" << s.dynamic_boxes_total << "  "
              << std::setprecision(0) << s.runtime_ms << " ms\n"
              << std::defaultfloat << std::setprecision(6);
  }
  std::cout << "mean epe3d " << ev.mean.epe3d << "  median epe3d " << ev.median.epe3d
            << "  report: " << csv.string() << "\n";
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Rigid-motion pseudo-labeller for LiDAR scene flow"};
  app.require_subcommand(1);

  CommonFlags flags;
  std::string input_dir, pairs_file, pred_dir, gt_dir, spec_file, csv_out = "metrics.csv";

  auto* label = app.add_subcommand("label", "Generate flow labels for frame pairs");
  label->add_option("input", input_dir, "Directory of .bin/.ply frames");
  label->add_option("--pairs", pairs_file, "Explicit pair list file (src tgt per line)");
  label->add_option("--config", flags.config_path, "Pipeline config JSON");
  label->add_option("--out", flags.out_dir, "Output directory");
  label->add_option("--seed", flags.seed, "Override config seed");
  label->add_option("--workers", flags.workers, "Override worker count");
  label->add_option("--k-aug", flags.k_aug, "Override augmentation variants per pair");

  auto* eval = app.add_subcommand("eval", "Compare predicted labels against ground truth");
  eval->add_option("pred", pred_dir, "Directory of predicted .sfl files")->required();
  eval->add_option("gt", gt_dir, "Directory of ground-truth .sfl files")->required();
  eval->add_option("--out", csv_out, "Metrics CSV path");

  auto* synth = app.add_subcommand("synth", "Materialize synthetic oracle scenes");
  synth->add_option("spec", spec_file, "Scene spec JSON")->required();
  synth->add_option("--out", flags.out_dir, "Output directory")->required();

  auto* bench = app.add_subcommand("bench", "Run the pipeline benchmark on synthetic scenes");
  bench->add_option("spec", spec_file, "Scene spec JSON")->required();
  bench->add_option("--config", flags.config_path, "Pipeline config JSON");
  bench->add_option("--out", flags.out_dir, "Report directory");
  bench->add_option("--seed", flags.seed, "Override config seed");
  bench->add_option("--workers", flags.workers, "Override worker count");

  auto* defaults = app.add_subcommand("print-default-config", "Dump the default config JSON");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (app.got_subcommand(label)) {
      if (input_dir.empty() && pairs_file.empty()) {
        std::cerr << "error: label needs an input directory or --pairs file\n";
        return kExitUsage;
      }
      return cmd_label(flags, input_dir, pairs_file);
    }
    if (app.got_subcommand(eval)) return cmd_eval(pred_dir, gt_dir, csv_out);
    if (app.got_subcommand(synth)) return cmd_synth(spec_file, flags.out_dir);
    if (app.got_subcommand(bench)) return cmd_bench(flags, spec_file);
    if (app.got_subcommand(defaults)) {
      std::cout << sflabel::to_json(sflabel::PipelineConfig{}).dump(2) << "\n";
      return kExitOk;
    }
  } catch (const sflabel::config_error& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
  return kExitUsage;
}
