#pragma once

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <limits>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "sflabel/config.hpp"
#include "sflabel/evalkit.hpp"
#include "sflabel/labelgen.hpp"
#include "sflabel/optim.hpp"

namespace sflabel {

/// A cleaned, normalized frame plus the index of every surviving point in the
/// raw input.
struct ProcessedCloud {
  PointCloud cloud;
  NormalField normals;
  std::vector<std::size_t> original_indices;
};

/// front-view crop -> ground removal -> fixed-size sampling -> normals.
inline ProcessedCloud preprocess_cloud(const PointCloud& raw, const IngestConfig& cfg,
                                       std::uint64_t seed) {
  raw.validate();
  ProcessedCloud out;
  out.original_indices.resize(raw.size());
  std::iota(out.original_indices.begin(), out.original_indices.end(), std::size_t{0});
  out.cloud = raw;

  const auto compose = [&](const FilterResult& fr) {
    std::vector<std::size_t> composed(fr.kept.size());
    for (std::size_t i = 0; i < fr.kept.size(); ++i)
      composed[i] = out.original_indices[fr.kept[i]];
    out.original_indices = std::move(composed);
    out.cloud = fr.cloud;
  };

  if (cfg.front_view) compose(crop_front_view(out.cloud));
  if (cfg.ground.enabled) {
    GroundConfig gc = cfg.ground;
    gc.seed = derive_seed(seed, 0x67726e64ull);
    compose(remove_ground(out.cloud, gc));
  }
  compose(sample_points(out.cloud, cfg.sample_n, derive_seed(seed, 0x736d706cull)));
  out.normals = estimate_normals(out.cloud, cfg.normals_k);
  return out;
}

inline void write_loss_history_csv(const std::vector<LossBreakdown>& history,
                                   const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw io_error("cannot open " + path.string() + " for writing");
  out << "iteration,bg,fg,dim,heading,angle,mass,total\n";
  out << std::setprecision(17);
  for (std::size_t i = 0; i < history.size(); ++i) {
    const LossBreakdown& l = history[i];
    out << i << ',' << l.l_bg << ',' << l.l_fg << ',' << l.l_dim << ',' << l.l_heading << ','
        << l.l_angle << ',' << l.l_mass << ',' << l.total << '\n';
  }
}

struct PairResult {
  std::string pair_id;
  SceneMotion motion;
  std::vector<LossBreakdown> history;
  std::size_t labels_emitted = 0;
  std::vector<LabelFilePair> files;
  double wall_ms = 0.0;
};

/// Runs the full labelling pipeline on one frame pair. Deterministic for a
/// given (config seed, pair_id), independent of any other pair.
inline PairResult label_pair_clouds(const PointCloud& src_raw, const PointCloud& tgt_raw,
                                    const std::string& pair_id, const PipelineConfig& cfg,
                                    const std::filesystem::path& out_dir,
                                    bool write_files = true) {
  const auto t0 = std::chrono::steady_clock::now();
  const std::uint64_t pair_seed = derive_seed(cfg.seed, fnv1a64(pair_id));

  const ProcessedCloud src = preprocess_cloud(src_raw, cfg.ingest, derive_seed(pair_seed, 1));
  const ProcessedCloud tgt = preprocess_cloud(tgt_raw, cfg.ingest, derive_seed(pair_seed, 2));

  AnchorSet anchors = init_anchor_grid(src.cloud, cfg.anchor);
  anchors = prune_boxes(anchors, src.cloud, cfg.anchor.min_points);
  anchors = refine_anchors(anchors, src.cloud, cfg.anchor);

  OptimResult opt = optimize_scene(src.cloud, src.normals, tgt.cloud, tgt.normals, anchors,
                                   cfg.optim);

  AugmentPolicy policy = cfg.augment;
  policy.seed = derive_seed(pair_seed, 3);
  const std::vector<AugmentedScene> variants =
      augment_scene(opt.motion, policy, cfg.labelgen.threshold);

  PairResult result;
  result.pair_id = pair_id;
  result.motion = opt.motion;
  result.history = std::move(opt.history);

  for (std::size_t v = 0; v < variants.size(); ++v) {
    const AugmentedScene& aug = variants[v];
    LabelRecord record;
    record.source = src.cloud;
    record.target = synthesize_target(src.cloud, opt.motion.boxes, aug, cfg.labelgen.threshold);
    record.flow = compute_flow_labels(src.cloud, record.target);
    record.boxes = opt.motion.boxes.boxes;
    record.ego = aug.ego;
    record.per_box = aug.per_box;
    record.p_m = aug.p_m;
    record.threshold = cfg.labelgen.threshold;
    record.provenance = aug.provenance;
    record.seed = aug.provenance.variant_seed;
    record.validate();
    if (write_files) {
      std::ostringstream name;
      name << pair_id << "_aug" << std::setw(2) << std::setfill('0') << v;
      result.files.push_back(write_label_pair(record, out_dir, name.str()));
    }
    ++result.labels_emitted;
  }
  if (write_files && cfg.labelgen.dump_loss_history)
    write_loss_history_csv(result.history, out_dir / (pair_id + ".loss.csv"));

  result.wall_ms = std::chrono::duration<double, std::milli>(
                       std::chrono::steady_clock::now() - t0).count();
  return result;
}

// ---------------------------------------------------------------------------
// Synthetic benchmark evaluation
// ---------------------------------------------------------------------------

struct SceneEvaluation {
  std::string scene_id;
  MetricsRecord metrics;
  double runtime_ms = 0.0;
  double yaw_error_deg = 0.0;
  double translation_error = 0.0;
  double epe_dynamic = std::numeric_limits<double>::quiet_NaN();
  double epe_static = std::numeric_limits<double>::quiet_NaN();
  int dynamic_boxes_total = 0;
  int dynamic_boxes_detected = 0;
  double initial_total_loss = 0.0;
  double final_total_loss = 0.0;
};

struct PipelineEvaluation {
  std::vector<SceneEvaluation> scenes;
  MetricsRecord mean;
  MetricsRecord median;
};

/// An object counts as truly dynamic when its box motion is distinguishable
/// from riding along with the ego frame.
inline bool object_is_dynamic(const RigidTransform& motion) {
  return motion.translation.norm() > 0.05 || so3_log(motion.rotation).angle() > 0.01;
}

/// Oracle scene -> full pipeline -> metrics against the exact flow.
inline SceneEvaluation evaluate_scene(const SyntheticSceneSpec& spec, const PipelineConfig& cfg,
                                      const std::string& scene_id) {
  const SyntheticScene scene = generate_synthetic_scene(spec);
  SceneEvaluation ev;
  ev.scene_id = scene_id;

  const auto t0 = std::chrono::steady_clock::now();
  const std::uint64_t pair_seed = derive_seed(cfg.seed, fnv1a64(scene_id));
  const ProcessedCloud src = preprocess_cloud(scene.source, cfg.ingest, derive_seed(pair_seed, 1));
  const ProcessedCloud tgt = preprocess_cloud(scene.target, cfg.ingest, derive_seed(pair_seed, 2));

  AnchorSet anchors = init_anchor_grid(src.cloud, cfg.anchor);
  anchors = prune_boxes(anchors, src.cloud, cfg.anchor.min_points);
  anchors = refine_anchors(anchors, src.cloud, cfg.anchor);
  const OptimResult opt = optimize_scene(src.cloud, src.normals, tgt.cloud, tgt.normals, anchors,
                                         cfg.optim);

  // Labels from the recovered motion, no augmentation noise.
  const AugmentedScene plain = AugmentedScene::from_motion(opt.motion);
  const PointCloud pred_target =
      synthesize_target(src.cloud, opt.motion.boxes, plain, cfg.labelgen.threshold);
  const FlowLabel pred = compute_flow_labels(src.cloud, pred_target);
  ev.runtime_ms = std::chrono::duration<double, std::milli>(
                      std::chrono::steady_clock::now() - t0).count();

  FlowLabel gt;
  gt.flow.reserve(src.cloud.size());
  for (std::size_t i = 0; i < src.cloud.size(); ++i)
    gt.flow.push_back(scene.gt_flow.flow[src.original_indices[i]]);
  ev.metrics = compute_metrics(pred, gt);

  ev.yaw_error_deg = std::abs(wrap_angle(opt.motion.ego.rotation.yaw() -
                                         scene.truth.ego.rotation.yaw())) * 180.0 / kPi;
  ev.translation_error = (opt.motion.ego.translation - scene.truth.ego.translation).norm();
  ev.initial_total_loss = opt.history.front().total;
  ev.final_total_loss = opt.history.back().total;

  // Split per-point EPE by ground-truth dynamics.
  std::vector<double> epe_dyn, epe_stat;
  for (std::size_t i = 0; i < src.cloud.size(); ++i) {
    const double e = (pred.flow[i] - gt.flow[i]).norm();
    const int obj = scene.point_object[src.original_indices[i]];
    const bool dynamic = obj >= 0 && object_is_dynamic(scene.truth.per_box[static_cast<std::size_t>(obj)]);
    (dynamic ? epe_dyn : epe_stat).push_back(e);
  }
  ev.epe_dynamic = median(epe_dyn);
  ev.epe_static = median(epe_stat);

  // Detection: map each truly-dynamic object to the anchor holding most of its
  // processed points and check that anchor's motion probability.
  for (std::size_t o = 0; o < scene.truth.per_box.size(); ++o) {
    if (!object_is_dynamic(scene.truth.per_box[o])) continue;
    ++ev.dynamic_boxes_total;
    std::vector<std::uint8_t> of_object(src.cloud.size(), 0);
    for (std::size_t i = 0; i < src.cloud.size(); ++i)
      if (scene.point_object[src.original_indices[i]] == static_cast<int>(o)) of_object[i] = 1;
    std::size_t best_overlap = 0, best_box = 0;
    for (std::size_t b = 0; b < opt.motion.boxes.size(); ++b) {
      std::size_t overlap = 0;
      for (std::size_t idx : opt.motion.boxes.members[b]) overlap += of_object[idx];
      if (overlap > best_overlap) {
        best_overlap = overlap;
        best_box = b;
      }
    }
    if (best_overlap > 0 && opt.motion.p_m[best_box] >= cfg.labelgen.threshold)
      ++ev.dynamic_boxes_detected;
  }
  return ev;
}

/// Runs every scene spec through the pipeline and aggregates the metrics.
inline PipelineEvaluation evaluate_pipeline(const std::vector<SyntheticSceneSpec>& specs,
                                            const PipelineConfig& cfg) {
  if (specs.empty()) throw std::invalid_argument("evaluate_pipeline: no scenes");
  PipelineEvaluation ev;
  std::vector<double> epe, acc_s, acc_r, outl;
  for (std::size_t s = 0; s < specs.size(); ++s) {
    std::ostringstream id;
    id << "scene" << std::setw(3) << std::setfill('0') << s;
    ev.scenes.push_back(evaluate_scene(specs[s], cfg, id.str()));
    const MetricsRecord& m = ev.scenes.back().metrics;
    epe.push_back(m.epe3d);
    acc_s.push_back(m.acc3ds);
    acc_r.push_back(m.acc3dr);
    outl.push_back(m.outliers);
    ev.mean.epe3d += m.epe3d;
    ev.mean.acc3ds += m.acc3ds;
    ev.mean.acc3dr += m.acc3dr;
    ev.mean.outliers += m.outliers;
  }
  const double inv = 1.0 / static_cast<double>(specs.size());
  ev.mean.epe3d *= inv;
  ev.mean.acc3ds *= inv;
  ev.mean.acc3dr *= inv;
  ev.mean.outliers *= inv;
  ev.median.epe3d = median(epe);
  ev.median.acc3ds = median(acc_s);
  ev.median.acc3dr = median(acc_r);
  ev.median.outliers = median(outl);
  return ev;
}

inline void write_evaluation_csv(const PipelineEvaluation& ev, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw io_error("cannot open " + path.string() + " for writing");
  out << "scene_id,epe3d,acc3ds,acc3dr,outliers,runtime_ms\n";
  out << std::setprecision(10);
  for (const SceneEvaluation& s : ev.scenes) {
    out << s.scene_id << ',' << s.metrics.epe3d << ',' << s.metrics.acc3ds << ','
        << s.metrics.acc3dr << ',' << s.metrics.outliers << ',' << s.runtime_ms << '\n';
  }
  double runtime = 0.0;
  for (const SceneEvaluation& s : ev.scenes) runtime += s.runtime_ms;
  runtime /= static_cast<double>(ev.scenes.size());
  out << "summary," << ev.mean.epe3d << ',' << ev.mean.acc3ds << ',' << ev.mean.acc3dr << ','
      << ev.mean.outliers << ',' << runtime << '\n';
}

/// Materializes one oracle scene as on-disk frames plus its exact label.
inline void write_synthetic_scene(const SyntheticScene& scene, const std::filesystem::path& dir,
                                  const std::string& scene_id) {
  std::filesystem::create_directories(dir);
  write_point_binary(dir / (scene_id + "_src.bin"), scene.source);
  write_point_binary(dir / (scene_id + "_tgt.bin"), scene.target);
  LabelRecord record;
  record.source = scene.source;
  record.target.points.resize(scene.source.size());
  for (std::size_t i = 0; i < scene.source.size(); ++i)
    record.target.points[i] = scene.source.points[i] + scene.gt_flow.flow[i];
  record.flow = scene.gt_flow;
  record.boxes = scene.truth.boxes.boxes;
  record.ego = scene.truth.ego;
  record.per_box = scene.truth.per_box;
  record.p_m = scene.truth.p_m;
  record.provenance.box_rotation.resize(scene.truth.boxes.size());
  record.provenance.box_translation.resize(scene.truth.boxes.size());
  record.provenance.probability_noise.assign(scene.truth.boxes.size(), 0.0);
  write_label_pair(record, dir, scene_id + "_gt");
}

}  // namespace sflabel
