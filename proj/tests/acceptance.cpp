// Acceptance suite: one pass/fail line per criterion, nonzero exit on any
// failure. Criterion 8 shells out to the CLI binary (--cli <path>).

#include <chrono>
#include <cmath>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "sflabel/config.hpp"
#include "sflabel/evalkit.hpp"
#include "sflabel/pipeline.hpp"
#include "sflabel/scenespec.hpp"

using namespace sflabel;
namespace fs = std::filesystem;

namespace {

int g_failures = 0;

void report(int criterion, bool pass, const std::string& detail) {
  std::cout << (pass ? "[PASS]" : "[FAIL]") << " criterion " << criterion << ": " << detail
            << std::endl;
  if (!pass) ++g_failures;
}

double seconds_since(const std::chrono::steady_clock::time_point& t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

Mat3 quaternion_rotation(double angle, const Vec3& axis) {
  const Vec3 u = axis.normalized();
  const double w = std::cos(0.5 * angle);
  const double x = std::sin(0.5 * angle) * u.x();
  const double y = std::sin(0.5 * angle) * u.y();
  const double z = std::sin(0.5 * angle) * u.z();
  Mat3 m;
  m << 1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
      2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
      2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y);
  return m;
}

PipelineConfig acceptance_config() {
  PipelineConfig cfg;
  cfg.seed = 2024;
  cfg.anchor.stride = 2.0;  // finer tiling than the 4 m default to cover objects
  return cfg;
}

// ---------------------------------------------------------------------------

void criterion_1() {
  const auto t0 = std::chrono::steady_clock::now();
  Rng rng(101);
  double worst = 0.0;
  bool props = true;
  for (int i = 0; i < 1000; ++i) {
    const double angle = rng.uniform(0.0, kPi);
    const Vec3 axis = rng.unit_sphere();
    const Vec3 xi = angle * axis;
    const Mat3 got = so3_exp(xi).matrix();
    worst = std::max(worst, (got - quaternion_rotation(angle, axis)).cwiseAbs().maxCoeff());
    const Mat3 inv = (so3_exp(xi) * so3_exp(Vec3(-xi))).matrix();
    if ((inv - Mat3::Identity()).cwiseAbs().maxCoeff() > 1e-9) props = false;
    if (RotationMatrix::orthonormality_error(got) > 1e-9) props = false;
  }
  if ((so3_exp(Vec3::Zero()).matrix() - Mat3::Identity()).cwiseAbs().maxCoeff() != 0.0)
    props = false;
  const double dt = seconds_since(t0);
  std::ostringstream os;
  os << "rotation map vs quaternion oracle, max |diff| " << std::scientific
     << std::setprecision(2) << worst << ", identity/inverse " << (props ? "ok" : "violated")
     << ", " << std::fixed << std::setprecision(2) << dt << " s";
  report(1, worst < 1e-9 && props && dt < 1.0, os.str());
}

void criterion_2() {
  const auto t0 = std::chrono::steady_clock::now();
  Rng rng(202);
  double worst_match = 0.0, worst_consistency = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t n = 512 + rng.uniform_index(3584);  // <= 4096
    PointCloud cloud;
    for (std::size_t i = 0; i < n; ++i)
      cloud.points.emplace_back(rng.uniform(-18, 18), rng.uniform(-10, 10), rng.uniform(-1.5, 2));

    AnchorSet anchors;
    const std::size_t k = 1 + rng.uniform_index(5);
    for (std::size_t b = 0; b < k; ++b) {
      BoxParams box;
      box.center = Vec3(rng.uniform(-12, 12), rng.uniform(-7, 7), rng.uniform(-0.5, 0.5));
      box.size = Vec3(rng.uniform(2, 6), rng.uniform(1.5, 4), rng.uniform(1.2, 2.5));
      box.heading = rng.uniform(-kPi, kPi);
      anchors.boxes.push_back(box);
      anchors.members.emplace_back();
    }
    SceneMotion motion = SceneMotion::identity_for(anchors);
    AugmentedScene aug = AugmentedScene::from_motion(motion);
    aug.ego.rotation = so3_exp(Vec3(rng.uniform(0, 0.12) * rng.unit_sphere()));
    aug.ego.translation = Vec3(rng.uniform(-2, 2), rng.uniform(-1, 1), rng.uniform(-0.2, 0.2));
    for (std::size_t b = 0; b < k; ++b) {
      aug.per_box[b].rotation = RotationMatrix::rotation_z(rng.uniform(-0.3, 0.3));
      aug.per_box[b].translation =
          Vec3(rng.uniform(-1.5, 1.5), rng.uniform(-1.5, 1.5), rng.uniform(-0.1, 0.1));
      aug.p_m[b] = rng.uniform();
    }

    const PointCloud target = synthesize_target(cloud, anchors, aug, 0.5);
    const PointCloud oracle = oracle_warp_target(cloud, anchors.boxes, aug, 0.5);
    const FlowLabel flow = compute_flow_labels(cloud, target);
    for (std::size_t i = 0; i < n; ++i) {
      worst_match = std::max(worst_match, (target.points[i] - oracle.points[i]).norm());
      worst_consistency = std::max(
          worst_consistency, ((cloud.points[i] + flow.flow[i]) - target.points[i]).norm());
    }
  }
  const double dt = seconds_since(t0);
  std::ostringstream os;
  os << "label exactness: |labelgen - oracle| " << std::scientific << std::setprecision(2)
     << worst_match << ", |src+flow-target| " << worst_consistency << ", " << std::fixed
     << std::setprecision(2) << dt << " s";
  report(2, worst_match < 1e-9 && worst_consistency < 1e-6 && dt < 10.0, os.str());
}

SceneBatchSpec ego_only_batch() {
  SceneBatchSpec batch;
  batch.count = 20;
  batch.seed = 303;
  batch.points = 8192;
  batch.noise_sigma = 0.02;
  batch.ego_yaw_deg_max = 5.0;
  batch.ego_forward_min = 0.5;
  batch.ego_forward_max = 2.0;
  batch.ego_lateral_max = 0.3;
  return batch;
}

SceneBatchSpec dynamic_batch() {
  SceneBatchSpec batch = ego_only_batch();
  batch.seed = 404;
  batch.objects_min = 2;
  batch.objects_max = 4;
  batch.object_translation_min = 0.4;
  batch.object_translation_max = 1.5;
  batch.object_spin_deg_max = 10.0;
  return batch;
}

void criterion_3(const PipelineEvaluation& ev) {
  std::vector<double> epe, yaw_err;
  double worst_runtime = 0.0;
  for (const auto& s : ev.scenes) {
    epe.push_back(s.metrics.epe3d);
    yaw_err.push_back(s.yaw_error_deg);
    worst_runtime = std::max(worst_runtime, s.runtime_ms);
  }
  const double med_epe = median(epe);
  const double med_yaw = median(yaw_err);
  std::ostringstream os;
  os << "ego recovery over " << ev.scenes.size() << " scenes: median epe3d " << std::fixed
     << std::setprecision(4) << med_epe << " m, median yaw error " << med_yaw
     << " deg, max runtime " << std::setprecision(1) << worst_runtime / 1000.0 << " s";
  report(3, med_epe <= 0.05 && med_yaw <= 0.5 && worst_runtime <= 60000.0, os.str());
}

void criterion_4(const PipelineEvaluation& ev) {
  std::vector<double> epe_dyn, epe_stat;
  int detected = 0, total = 0;
  for (const auto& s : ev.scenes) {
    if (!std::isnan(s.epe_dynamic)) epe_dyn.push_back(s.epe_dynamic);
    if (!std::isnan(s.epe_static)) epe_stat.push_back(s.epe_static);
    detected += s.dynamic_boxes_detected;
    total += s.dynamic_boxes_total;
  }
  const double rate = total > 0 ? static_cast<double>(detected) / total : 0.0;
  const double med_dyn = median(epe_dyn);
  const double med_stat = median(epe_stat);
  std::ostringstream os;
  os << "dynamic recovery: P_M detection " << detected << "/" << total << " (" << std::fixed
     << std::setprecision(1) << rate * 100.0 << "%), median dynamic epe " << std::setprecision(4)
     << med_dyn << " m, median static epe " << med_stat << " m";
  report(4, rate >= 0.8 && med_dyn <= 0.10 && med_stat <= 0.05, os.str());
}

void criterion_5(const PipelineEvaluation& ego_ev, const PipelineEvaluation& dyn_ev) {
  // (a) final < initial on every criterion-3/4 scene
  bool monotone = true;
  for (const auto* ev : {&ego_ev, &dyn_ev})
    for (const auto& s : ev->scenes)
      if (!(s.final_total_loss < s.initial_total_loss)) monotone = false;

  // (b) warm start at the ground truth stays put (data terms only, noise-free)
  SyntheticSceneSpec spec;
  spec.walls.push_back({Vec3(-15, 8, -1.1), Vec3(30, 0, 0), Vec3(0, 0, 3.5)});
  spec.walls.push_back({Vec3(-15, -8, -1.1), Vec3(30, 0, 0), Vec3(0, 0, 3.5)});
  spec.walls.push_back({Vec3(15, -8, -1.1), Vec3(0, 16, 0), Vec3(0, 0, 3.5)});
  spec.background_points = 3000;
  spec.noise_sigma = 0.0;
  spec.seed = 505;
  spec.ego.rotation = RotationMatrix::rotation_z(0.04);
  spec.ego.translation = Vec3(1.2, 0.15, 0.0);
  SceneObject obj;
  obj.box.center = Vec3(4, 2, -0.2);
  obj.box.size = Vec3(4.0, 1.8, 1.6);
  obj.box.heading = 0.3;
  obj.motion.translation = Vec3(std::cos(0.3), std::sin(0.3), 0.0);
  obj.point_count = 400;
  spec.objects.push_back(obj);
  const SyntheticScene scene = generate_synthetic_scene(spec);

  NormalField tgt_n;
  tgt_n.normals.resize(scene.source.size());
  for (std::size_t i = 0; i < scene.source.size(); ++i) {
    RotationMatrix r = spec.ego.rotation;
    if (scene.point_object[i] == 0) r = compose_rotation(obj.motion.rotation, r);
    tgt_n.normals[i] = r * scene.source_normals.normals[i];
  }
  OptimConfig wcfg;
  wcfg.iterations = 120;
  wcfg.warmup_iterations = 30;
  wcfg.weights.dim = wcfg.weights.heading = wcfg.weights.angle = wcfg.weights.mass = 0.0;
  wcfg.anneal_tau = false;
  SceneMotion truth = scene.truth;
  const OptimResult wres = optimize_scene(scene.source, scene.source_normals, scene.target,
                                          tgt_n, truth.boxes, wcfg, &truth);
  double drift = (wres.motion.ego.translation - truth.ego.translation).norm();
  drift = std::max(drift, (wres.motion.ego.rotation.matrix() - truth.ego.rotation.matrix())
                              .cwiseAbs().maxCoeff());
  for (std::size_t b = 0; b < truth.box_count(); ++b) {
    drift = std::max(drift,
                     (wres.motion.per_box[b].translation - truth.per_box[b].translation).norm());
    drift = std::max(drift, (wres.motion.per_box[b].rotation.matrix() -
                             truth.per_box[b].rotation.matrix()).cwiseAbs().maxCoeff());
    drift = std::max(drift,
                     (wres.motion.boxes.boxes[b].center - truth.boxes.boxes[b].center).norm());
    drift = std::max(drift, (wres.motion.boxes.boxes[b].size - truth.boxes.boxes[b].size).norm());
    drift = std::max(drift, std::abs(wres.motion.boxes.boxes[b].heading -
                                     truth.boxes.boxes[b].heading));
  }

  // (c) analytic gradients vs central differences at 100 random points on a
  // 512-point scene, associations frozen on both sides
  SyntheticSceneSpec gspec;
  gspec.walls.push_back({Vec3(-10, 5, -1.1), Vec3(20, 0, 0), Vec3(0, 0, 2.5)});
  gspec.walls.push_back({Vec3(-10, -5, -1.1), Vec3(20, 0, 0), Vec3(0, 0, 2.5)});
  gspec.background_points = 312;
  SceneObject ga, gb;
  ga.box.center = Vec3(3, 1.5, 0);
  ga.box.heading = 0.5;
  ga.motion.translation = Vec3(0.8, 0.3, 0);
  ga.point_count = 100;
  gb.box.center = Vec3(-4, -2, 0);
  gb.box.heading = -1.1;
  gb.motion.translation = Vec3(-0.5, 0.6, 0);
  gb.motion.rotation = RotationMatrix::rotation_z(0.1);
  gb.point_count = 100;
  gspec.objects = {ga, gb};
  gspec.seed = 606;
  gspec.noise_sigma = 0.01;
  const SyntheticScene gscene = generate_synthetic_scene(gspec);
  const NormalField gsn = estimate_normals(gscene.source, 12);
  const NormalField gtn = estimate_normals(gscene.target, 12);
  OptimConfig gcfg;
  gcfg.tau_nn = 3.0;
  TargetIndex gindex(gscene.target, gtn, gcfg.lambda_normal);
  Rng grng(707);
  double worst_rel = 0.0;

  const auto nudge_rot = [](RotationMatrix& r, int axis, double h) {
    Vec3 d = Vec3::Zero();
    d[axis] = h;
    r = compose_rotation(so3_exp(d), r);
  };
  for (int trial = 0; trial < 100; ++trial) {
    SceneMotion motion = SceneMotion::identity_for(gscene.truth.boxes);
    motion.ego.rotation = so3_exp(Vec3(grng.uniform(0.0, 0.06) * grng.unit_sphere()));
    motion.ego.translation =
        Vec3(grng.uniform(-0.8, 0.8), grng.uniform(-0.8, 0.8), grng.uniform(-0.1, 0.1));
    for (std::size_t b = 0; b < motion.box_count(); ++b) {
      motion.per_box[b].rotation = so3_exp(Vec3(grng.uniform(0.0, 0.1) * grng.unit_sphere()));
      motion.per_box[b].translation = Vec3(grng.uniform(0.4, 1.0), grng.uniform(0.3, 0.9), 0.0);
      motion.p_m[b] = grng.uniform(0.2, 1.0);
      motion.boxes.boxes[b].center += Vec3(grng.uniform(-0.3, 0.3), grng.uniform(-0.3, 0.3), 0.0);
      motion.boxes.boxes[b].heading += grng.uniform(-0.2, 0.2);
    }
    const double alpha = grng.uniform(2.0, 8.0);
    const FrozenAssoc assoc =
        freeze_associations(motion, gscene.source, gsn, gscene.target, gindex, gcfg.tau_nn);
    MotionGrad grad;
    eval_frozen(motion, gscene.source, gsn, gscene.target, gtn, assoc, gcfg, alpha, &grad);

    const auto value = [&](const SceneMotion& m) {
      return eval_frozen(m, gscene.source, gsn, gscene.target, gtn, assoc, gcfg, alpha).total;
    };
    const double h = 1e-6;
    double num2 = 0.0, diff2 = 0.0;
    const auto probe = [&](double analytic, const std::function<void(SceneMotion&, double)>& mod) {
      SceneMotion mp = motion, mm = motion;
      mod(mp, h);
      mod(mm, -h);
      const double fd = (value(mp) - value(mm)) / (2.0 * h);
      num2 += fd * fd;
      diff2 += (analytic - fd) * (analytic - fd);
    };
    for (int a = 0; a < 3; ++a) {
      probe(grad.ego_rotation[a],
            [&, a](SceneMotion& m, double hh) { nudge_rot(m.ego.rotation, a, hh); });
      probe(grad.ego_translation[a],
            [&, a](SceneMotion& m, double hh) { m.ego.translation[a] += hh; });
    }
    for (std::size_t b = 0; b < motion.box_count(); ++b) {
      for (int a = 0; a < 3; ++a) {
        probe(grad.boxes[b].rotation[a],
              [&, a, b](SceneMotion& m, double hh) { nudge_rot(m.per_box[b].rotation, a, hh); });
        probe(grad.boxes[b].translation[a],
              [&, a, b](SceneMotion& m, double hh) { m.per_box[b].translation[a] += hh; });
        probe(grad.boxes[b].center[a],
              [&, a, b](SceneMotion& m, double hh) { m.boxes.boxes[b].center[a] += hh; });
        probe(grad.boxes[b].size[a],
              [&, a, b](SceneMotion& m, double hh) { m.boxes.boxes[b].size[a] += hh; });
      }
      probe(grad.boxes[b].heading,
            [&, b](SceneMotion& m, double hh) { m.boxes.boxes[b].heading += hh; });
    }
    worst_rel = std::max(worst_rel, std::sqrt(diff2) / std::max(std::sqrt(num2), 1e-12));
  }

  std::ostringstream os;
  os << "optimization sanity: loss decreased on all scenes " << (monotone ? "yes" : "NO")
     << ", warm-start drift " << std::scientific << std::setprecision(2) << drift
     << ", gradcheck worst rel err " << worst_rel;
  report(5, monotone && drift < 1e-3 && worst_rel < 1e-4, os.str());
}

void criterion_6() {
  const auto t0 = std::chrono::steady_clock::now();

  // zero-noise augmentation reproduces the plain labels bitwise
  Rng rng(808);
  PointCloud cloud;
  for (int i = 0; i < 2048; ++i)
    cloud.points.emplace_back(rng.uniform(-15, 15), rng.uniform(-8, 8), rng.uniform(-1.2, 2));
  AnchorSet anchors;
  BoxParams box_a, box_b;
  box_a.center = Vec3(5, 1, 0);
  box_b.center = Vec3(-6, -2, 0);
  anchors.boxes = {box_a, box_b};
  anchors.members = {{}, {}};
  SceneMotion motion = SceneMotion::identity_for(anchors);
  motion.ego.rotation = RotationMatrix::rotation_z(0.03);
  motion.ego.translation = Vec3(1.1, 0.1, 0.0);
  motion.per_box[0].translation = Vec3(0.8, 0.2, 0.0);
  motion.p_m = {0.9, 0.2};

  AugmentPolicy zero;
  zero.sigma_rotation = zero.sigma_translation = zero.sigma_probability = 0.0;
  zero.sigma_rotation_ego = zero.sigma_translation_ego = 0.0;
  zero.variants = 3;
  zero.seed = 909;
  bool zero_bitwise = true;
  const PointCloud plain_target =
      synthesize_target(cloud, anchors, AugmentedScene::from_motion(motion), 0.5);
  for (const AugmentedScene& aug : augment_scene(motion, zero, 0.5)) {
    const PointCloud aug_target = synthesize_target(cloud, anchors, aug, 0.5);
    for (std::size_t i = 0; i < cloud.size(); ++i)
      if (std::memcmp(aug_target.points[i].data(), plain_target.points[i].data(),
                      3 * sizeof(double)) != 0)
        zero_bitwise = false;
  }

  // static boxes bit-identical under noisy augmentation
  AugmentPolicy noisy;
  noisy.seed = 910;
  noisy.variants = 16;
  bool static_bitwise = true;
  for (const AugmentedScene& aug : augment_scene(motion, noisy, 0.5)) {
    if (std::memcmp(aug.per_box[1].rotation.matrix().data(),
                    motion.per_box[1].rotation.matrix().data(), 9 * sizeof(double)) != 0)
      static_bitwise = false;
    if (std::memcmp(aug.per_box[1].translation.data(), motion.per_box[1].translation.data(),
                    3 * sizeof(double)) != 0)
      static_bitwise = false;
  }

  // Monte-Carlo noise statistics, 1e4 draws per channel
  Rng mc(911);
  const int n = 10000;
  double rot_sum = 0, rot_sum2 = 0, tr_sum = 0, tr_sum2 = 0, pr_sum = 0, pr_sum2 = 0;
  for (int i = 0; i < n; ++i) {
    RotationDraw rd;
    perturb_rotation(RotationMatrix::identity(), 0.035, mc, &rd);
    rot_sum += rd.angle;
    rot_sum2 += rd.angle * rd.angle;
    Vec3 td;
    perturb_translation(Vec3::Zero(), 0.3, mc, &td);
    tr_sum += td.x();
    tr_sum2 += td.x() * td.x();
    double pd;
    perturb_probability(0.5, 0.05, mc, &pd);
    pr_sum += pd;
    pr_sum2 += pd * pd;
  }
  const auto sample_std = [n](double s, double s2) {
    const double mean = s / n;
    return std::sqrt(s2 / n - mean * mean);
  };
  // truncation at 3 sigma shrinks the std by ~1.3%, well inside the 10% band
  const double rot_std = sample_std(rot_sum, rot_sum2);
  const double tr_std = sample_std(tr_sum, tr_sum2);
  const double pr_std = sample_std(pr_sum, pr_sum2);
  const bool stats_ok = std::abs(rot_std - 0.035) / 0.035 < 0.10 &&
                        std::abs(tr_std - 0.3) / 0.3 < 0.10 &&
                        std::abs(pr_std - 0.05) / 0.05 < 0.10 &&
                        std::abs(rot_sum / n) < 3.0 * 0.035 / std::sqrt(double(n)) &&
                        std::abs(tr_sum / n) < 3.0 * 0.3 / std::sqrt(double(n));

  const double dt = seconds_since(t0);
  std::ostringstream os;
  os << "augmentation contracts: zero-noise bitwise " << (zero_bitwise ? "ok" : "BROKEN")
     << ", static boxes bitwise " << (static_bitwise ? "ok" : "BROKEN") << ", noise std ("
     << std::fixed << std::setprecision(4) << rot_std << ", " << tr_std << ", " << pr_std
     << ") vs (0.035, 0.3, 0.05), " << std::setprecision(2) << dt << " s";
  report(6, zero_bitwise && static_bitwise && stats_ok && dt < 5.0, os.str());
}

void criterion_7() {
  Rng rng(1001);
  bool exact = true;
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t n = 1 + rng.uniform_index(400);
    FlowLabel pred, gt;
    for (std::size_t i = 0; i < n; ++i) {
      gt.flow.emplace_back(rng.uniform(-2, 2), rng.uniform(-2, 2), rng.uniform(-1, 1));
      pred.flow.push_back(gt.flow.back() + Vec3(rng.uniform(-0.4, 0.4), rng.uniform(-0.4, 0.4),
                                                rng.uniform(-0.2, 0.2)));
    }
    MetricsRecord naive;
    std::size_t n_s = 0, n_r = 0, n_o = 0;
    for (std::size_t i = 0; i < n; ++i) {
      const double e = (pred.flow[i] - gt.flow[i]).norm();
      const double r = e / std::max(gt.flow[i].norm(), 1e-9);
      naive.epe3d += e;
      if (e < 0.05 || r < 0.05) ++n_s;
      if (e < 0.1 || r < 0.1) ++n_r;
      if (e > 0.3 || r > 0.1) ++n_o;
    }
    naive.epe3d /= static_cast<double>(n);
    naive.acc3ds = static_cast<double>(n_s) / static_cast<double>(n);
    naive.acc3dr = static_cast<double>(n_r) / static_cast<double>(n);
    naive.outliers = static_cast<double>(n_o) / static_cast<double>(n);
    const MetricsRecord got = compute_metrics(pred, gt);
    if (got.epe3d != naive.epe3d || got.acc3ds != naive.acc3ds || got.acc3dr != naive.acc3dr ||
        got.outliers != naive.outliers)
      exact = false;
  }

  const auto threshold_case = [](double err) {
    FlowLabel pred, gt;
    gt.flow = {Vec3(1, 0, 0)};
    pred.flow = {Vec3(1 + err, 0, 0)};
    return compute_metrics(pred, gt);
  };
  const MetricsRecord a = threshold_case(0.04);
  const MetricsRecord b = threshold_case(0.2);
  const MetricsRecord c = threshold_case(0.35);
  const bool thresholds_ok = a.acc3ds == 1.0 && a.acc3dr == 1.0 && a.outliers == 0.0 &&
                             b.acc3ds == 0.0 && b.acc3dr == 0.0 && b.outliers == 1.0 &&
                             c.acc3ds == 0.0 && c.acc3dr == 0.0 && c.outliers == 1.0;
  std::ostringstream os;
  os << "metric fidelity: oracle equality " << (exact ? "exact" : "BROKEN")
     << ", threshold cases (0.04/0.2/0.35 m) " << (thresholds_ok ? "ok" : "BROKEN");
  report(7, exact && thresholds_ok, os.str());
}

void criterion_8(const std::string& cli) {
  const fs::path root = fs::temp_directory_path() / "sflabel_acceptance_cli";
  fs::remove_all(root);
  fs::create_directories(root / "frames");

  // five frames: successive warps of one wall scene, so four pairs
  SyntheticSceneSpec spec;
  spec.walls.push_back({Vec3(-12, 6, -1.1), Vec3(24, 0, 0), Vec3(0, 0, 3)});
  spec.walls.push_back({Vec3(-12, -6, -1.1), Vec3(24, 0, 0), Vec3(0, 0, 3)});
  spec.walls.push_back({Vec3(12, -6, -1.1), Vec3(0, 12, 0), Vec3(0, 0, 3)});
  spec.background_points = 2048;
  spec.seed = 1111;
  const SyntheticScene scene = generate_synthetic_scene(spec);
  RigidTransform step;
  step.rotation = RotationMatrix::rotation_z(0.01);
  step.translation = Vec3(0.5, 0.05, 0.0);
  PointCloud frame = scene.source;
  for (int f = 0; f < 5; ++f) {
    std::ostringstream name;
    name << std::setw(6) << std::setfill('0') << f << ".bin";
    write_point_binary(root / "frames" / name.str(), frame);
    frame = transform_points(frame, step);
  }

  const fs::path cfg_path = root / "cfg.json";
  {
    PipelineConfig cfg;
    cfg.seed = 77;
    cfg.ingest.sample_n = 2048;
    cfg.ingest.ground.enabled = false;
    cfg.anchor.stride = 2.0;
    cfg.optim.iterations = 60;
    cfg.optim.warmup_iterations = 20;
    cfg.augment.variants = 2;
    std::ofstream out(cfg_path);
    out << to_json(cfg).dump(2);
  }

  const auto run = [&](const std::string& out_dir, int workers) {
    std::ostringstream cmd;
    cmd << cli << " label " << (root / "frames") << " --config " << cfg_path << " --out "
        << (root / out_dir) << " --workers " << workers << " > " << (root / (out_dir + ".log"))
        << " 2>&1";
    return std::system(cmd.str().c_str());
  };
  const int rc1 = run("out_a", 1);
  const int rc2 = run("out_b", 1);
  const int rc3 = run("out_c", 8);

  const auto read_bytes = [](const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  };
  bool identical = rc1 == 0 && rc2 == 0 && rc3 == 0;
  std::size_t files = 0;
  if (identical) {
    for (const auto& entry : fs::directory_iterator(root / "out_a")) {
      if (entry.path().extension() != ".sfl") continue;
      ++files;
      const std::string base = read_bytes(entry.path());
      if (base.empty() || base != read_bytes(root / "out_b" / entry.path().filename()) ||
          base != read_bytes(root / "out_c" / entry.path().filename()))
        identical = false;
    }
    if (files != 8) identical = false;  // 4 pairs x 2 variants
  }
  std::ostringstream os;
  os << "reproducibility: " << files
     << " label files byte-identical across reruns and workers 1 vs 8: "
     << (identical ? "yes" : "NO");
  report(8, identical, os.str());
}

}  // namespace

int main(int argc, char** argv) {
  std::string cli = "./tools/sflabel";
  for (int i = 1; i + 1 < argc; ++i)
    if (std::string(argv[i]) == "--cli") cli = argv[i + 1];

  criterion_1();
  criterion_2();

  const PipelineConfig cfg = acceptance_config();
  const auto t_ego = std::chrono::steady_clock::now();
  const PipelineEvaluation ego_ev = evaluate_pipeline(make_scene_batch(ego_only_batch()), cfg);
  std::cout << "  (ego batch took " << std::fixed << std::setprecision(1) << seconds_since(t_ego)
            << " s)" << std::endl;
  criterion_3(ego_ev);

  const auto t_dyn = std::chrono::steady_clock::now();
  const PipelineEvaluation dyn_ev = evaluate_pipeline(make_scene_batch(dynamic_batch()), cfg);
  std::cout << "  (dynamic batch took " << std::fixed << std::setprecision(1)
            << seconds_since(t_dyn) << " s)" << std::endl;
  criterion_4(dyn_ev);

  criterion_5(ego_ev, dyn_ev);
  criterion_6();
  criterion_7();
  criterion_8(cli);

  if (g_failures == 0) {
    std::cout << "acceptance: all criteria passed" << std::endl;
    return 0;
  }
  std::cout << "acceptance: " << g_failures << " criterion(s) failed" << std::endl;
  return 1;
}
