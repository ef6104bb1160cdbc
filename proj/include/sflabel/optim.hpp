#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <stdexcept>
#include <vector>

#include "sflabel/anchor.hpp"
#include "sflabel/geom.hpp"
#include "sflabel/kdtree.hpp"
#include "sflabel/pointcloud.hpp"

namespace sflabel {

/// Full rigid decomposition of a scene: global ego-motion, one rigid motion
/// and one motion probability per surviving anchor box.
struct SceneMotion {
  RigidTransform ego;
  std::vector<RigidTransform> per_box;
  std::vector<double> p_m;
  AnchorSet boxes;

  std::size_t box_count() const { return boxes.size(); }

  void validate() const {
    if (per_box.size() != boxes.size() || p_m.size() != boxes.size())
      throw std::invalid_argument("scene motion: per_box/p_m/boxes length mismatch");
    for (double p : p_m)
      if (!(p >= 0.0 && p <= 1.0)) throw std::invalid_argument("scene motion: p_m outside [0,1]");
  }

  static SceneMotion identity_for(const AnchorSet& anchors) {
    SceneMotion m;
    m.boxes = anchors;
    m.per_box.assign(anchors.size(), RigidTransform::identity());
    m.p_m.assign(anchors.size(), 0.5);
    return m;
  }
};

struct LossWeights {
  double bg = 1.0;
  double fg = 1.0;
  double dim = 0.1;
  double heading = 0.1;
  double angle = 0.1;
  double mass = 0.5;
};

struct LossBreakdown {
  double l_bg = 0.0;
  double l_fg = 0.0;
  double l_dim = 0.0;
  double l_heading = 0.0;
  double l_angle = 0.0;
  double l_mass = 0.0;
  double total = 0.0;

  void finalize(const LossWeights& w) {
    total = w.bg * l_bg + w.fg * l_fg + w.dim * l_dim + w.heading * l_heading +
            w.angle * l_angle + w.mass * l_mass;
  }
};

struct OptimConfig {
  int iterations = 300;
  int warmup_iterations = 50;     // phase 1: ego only, background loss only
  int generation_length = 25;     // motion-probability / slope refresh cadence
  double lr_rotation = 0.02;      // radians
  double lr_translation = 0.05;   // meters
  double lr_geometry = 0.01;      // box center/size/heading
  double lr_decay_floor = 0.05;   // joint-phase rates decay linearly to this fraction
  double tau_nn = 2.0;            // NN distance cap, meters
  bool anneal_tau = true;         // start wider during warm-up
  double lambda_normal = 0.5;     // meters per unit of normal mismatch
  double delta_weight = 1.0;      // weighting of the chamfer term against kappa
  double t_still = 0.2;           // heading term active above this |t_perbox|
  Vec3 size_prior = Vec3(4.0, 1.8, 1.6);
  LossWeights weights;
  double tolerance = 1e-6;        // early stop on loss plateau; <= 0 disables
  double eta = 20.0;              // residual-contrast sharpness for motion probabilities
  double alpha_base = 5.0;
  double alpha_min = 0.5;
  double alpha_max = 50.0;
  bool member_refresh = true;     // reassign box members once per generation
  double member_capture_scale = 1.25;
  int member_min_points = 30;     // keep the old assignment below this count

  void validate() const {
    if (iterations < 1) throw std::invalid_argument("optim.iterations must be >= 1");
    if (warmup_iterations < 0) throw std::invalid_argument("optim.warmup_iterations must be >= 0");
    if (generation_length < 1) throw std::invalid_argument("optim.generation_length must be >= 1");
    if (!(lr_rotation > 0.0 && lr_translation > 0.0 && lr_geometry > 0.0))
      throw std::invalid_argument("optim.learning rates must be > 0");
    if (!(lr_decay_floor > 0.0 && lr_decay_floor <= 1.0))
      throw std::invalid_argument("optim.lr_decay_floor must be in (0, 1]");
    if (!(tau_nn > 0.0)) throw std::invalid_argument("optim.tau_nn must be > 0");
    if (!(lambda_normal >= 0.0)) throw std::invalid_argument("optim.lambda_normal must be >= 0");
    if (!(delta_weight >= 0.0)) throw std::invalid_argument("optim.delta_weight must be >= 0");
    if (!(t_still >= 0.0)) throw std::invalid_argument("optim.t_still must be >= 0");
    if ((size_prior.array() <= 0.0).any()) throw std::invalid_argument("optim.size_prior must be > 0");
    if (!(eta > 0.0)) throw std::invalid_argument("optim.eta must be > 0");
    if (!(alpha_min > 0.0 && alpha_base >= alpha_min && alpha_max >= alpha_base))
      throw std::invalid_argument("optim.alpha bounds must satisfy 0 < min <= base <= max");
    if (!(member_capture_scale >= 1.0))
      throw std::invalid_argument("optim.member_capture_scale must be >= 1");
    if (member_min_points < 1) throw std::invalid_argument("optim.member_min_points must be >= 1");
  }
};

struct Correspondence {
  std::size_t index = 0;
  double distance = 0.0;
};

/// Immutable spatial index over the target frame; built once per pair.
struct TargetIndex {
  KdTree3 position;
  KdTree6 fused;  // (p, lambda * n)
  double lambda;

  TargetIndex(const PointCloud& cloud, const NormalField& normals, double lambda_normal)
      : position(cloud.points),
        fused(make_fused(cloud, normals, lambda_normal)),
        lambda(lambda_normal) {}

 private:
  static std::vector<Eigen::Matrix<double, 6, 1>> make_fused(const PointCloud& cloud,
                                                             const NormalField& normals,
                                                             double lambda) {
    if (normals.size() != cloud.size())
      throw std::invalid_argument("target index: normals size mismatch");
    std::vector<Eigen::Matrix<double, 6, 1>> pts(cloud.size());
    for (std::size_t i = 0; i < cloud.size(); ++i) {
      pts[i].head<3>() = cloud.points[i];
      pts[i].tail<3>() = lambda * normals.normals[i];
    }
    return pts;
  }
};

/// Nearest target point per query point under the fused metric
/// ||dp||^2 + lambda^2 ||dn||^2; reported distance is min(sqrt(.), tau).
inline std::vector<Correspondence> nn_correspondences(const PointCloud& query,
                                                      const NormalField& query_normals,
                                                      const PointCloud& target,
                                                      const NormalField& target_normals,
                                                      double lambda, double tau) {
  query.validate();
  target.validate();
  if (query_normals.size() != query.size() || target_normals.size() != target.size())
    throw std::invalid_argument("nn_correspondences: normals size mismatch");
  TargetIndex index(target, target_normals, lambda);
  std::vector<Correspondence> out(query.size());
  Eigen::Matrix<double, 6, 1> q;
  for (std::size_t i = 0; i < query.size(); ++i) {
    q.head<3>() = query.points[i];
    q.tail<3>() = lambda * query_normals.normals[i];
    const auto hit = index.fused.nearest(q);
    out[i] = {hit.index, std::min(std::sqrt(hit.sq_dist), tau)};
  }
  return out;
}

// ---------------------------------------------------------------------------
// Frozen-correspondence machinery. Associations are recomputed once per
// iteration; with them held fixed the objective is smooth, which is what the
// analytic gradients (and the finite-difference check) differentiate.
// ---------------------------------------------------------------------------

struct PairAssoc {
  std::int32_t target = -1;
  std::uint8_t truncated = 0;
};

struct BoxAssoc {
  std::vector<PairAssoc> kappa;                            // per member
  std::vector<PairAssoc> fwd;                              // per member
  std::vector<std::pair<std::int32_t, std::int32_t>> bwd;  // (target idx, member slot)
};

struct FrozenAssoc {
  double tau = 2.0;
  std::vector<PairAssoc> bg_kappa;  // per source point
  std::vector<PairAssoc> bg_fwd;    // per source point
  std::vector<PairAssoc> bg_bwd;    // per target point -> warped source index
  std::vector<BoxAssoc> boxes;
};

struct BoxGrad {
  Vec3 rotation = Vec3::Zero();  // left axis-angle increment
  Vec3 translation = Vec3::Zero();
  Vec3 center = Vec3::Zero();
  Vec3 size = Vec3::Zero();
  double heading = 0.0;
};

struct MotionGrad {
  Vec3 ego_rotation = Vec3::Zero();
  Vec3 ego_translation = Vec3::Zero();
  std::vector<BoxGrad> boxes;

  void resize(std::size_t k) {
    ego_rotation.setZero();
    ego_translation.setZero();
    boxes.assign(k, BoxGrad{});
  }
};

/// Which loss terms feed the gradient (values are always computed).
struct GradMask {
  bool background = true;
  bool foreground = true;
  bool regularizers = true;
};

namespace detail {

struct WarpedScene {
  std::vector<Vec3> bg_points;    // ego-warped source points
  std::vector<Vec3> bg_normals;   // ego-rotated source normals
  std::vector<Vec3> ego_centers;  // ego-warped box centers
  // per box: members warped by ego then the box motion about the warped center
  std::vector<std::vector<Vec3>> box_points;
  std::vector<std::vector<Vec3>> box_normals;
};

inline WarpedScene warp_scene(const SceneMotion& motion, const PointCloud& src,
                              const NormalField& src_normals) {
  WarpedScene w;
  const Mat3& re = motion.ego.rotation.matrix();
  const Vec3& te = motion.ego.translation;
  w.bg_points.resize(src.size());
  w.bg_normals.resize(src.size());
  for (std::size_t i = 0; i < src.size(); ++i) {
    w.bg_points[i] = re * src.points[i] + te;
    w.bg_normals[i] = re * src_normals.normals[i];
  }
  const std::size_t k = motion.box_count();
  w.ego_centers.resize(k);
  w.box_points.resize(k);
  w.box_normals.resize(k);
  for (std::size_t b = 0; b < k; ++b) {
    const auto& members = motion.boxes.members[b];
    const Mat3& rb = motion.per_box[b].rotation.matrix();
    const Vec3& tb = motion.per_box[b].translation;
    const Vec3 ce = re * motion.boxes.boxes[b].center + te;
    w.ego_centers[b] = ce;
    auto& pts = w.box_points[b];
    auto& nrm = w.box_normals[b];
    pts.resize(members.size());
    nrm.resize(members.size());
    for (std::size_t m = 0; m < members.size(); ++m) {
      const std::size_t idx = members[m];
      pts[m] = rb * (w.bg_points[idx] - ce) + ce + tb;
      nrm[m] = rb * w.bg_normals[idx];
    }
  }
  return w;
}

}  // namespace detail

/// Recomputes all nearest-neighbour associations at the current parameters.
inline FrozenAssoc freeze_associations(const SceneMotion& motion, const PointCloud& src,
                                       const NormalField& src_normals, const PointCloud& tgt,
                                       const TargetIndex& index, double tau) {
  FrozenAssoc assoc;
  assoc.tau = tau;
  const detail::WarpedScene w = detail::warp_scene(motion, src, src_normals);
  const double lambda = index.lambda;

  assoc.bg_kappa.resize(src.size());
  assoc.bg_fwd.resize(src.size());
  Eigen::Matrix<double, 6, 1> q6;
  for (std::size_t i = 0; i < src.size(); ++i) {
    q6.head<3>() = w.bg_points[i];
    q6.tail<3>() = lambda * w.bg_normals[i];
    const auto hit6 = index.fused.nearest(q6);
    assoc.bg_kappa[i] = {static_cast<std::int32_t>(hit6.index),
                         static_cast<std::uint8_t>(std::sqrt(hit6.sq_dist) >= tau)};
    const auto hit3 = index.position.nearest(w.bg_points[i]);
    assoc.bg_fwd[i] = {static_cast<std::int32_t>(hit3.index),
                       static_cast<std::uint8_t>(std::sqrt(hit3.sq_dist) >= tau)};
  }

  // Backward direction: nearest ego-warped source point for every target point.
  KdTree3 warped_tree(w.bg_points);
  assoc.bg_bwd.resize(tgt.size());
  std::vector<double> bg_bwd_dist(tgt.size());
  for (std::size_t j = 0; j < tgt.size(); ++j) {
    const auto hit = warped_tree.nearest(tgt.points[j]);
    bg_bwd_dist[j] = std::sqrt(hit.sq_dist);
    assoc.bg_bwd[j] = {static_cast<std::int32_t>(hit.index),
                       static_cast<std::uint8_t>(bg_bwd_dist[j] >= tau)};
  }

  const std::size_t k = motion.box_count();
  assoc.boxes.resize(k);
  std::vector<std::size_t> candidates;
  for (std::size_t b = 0; b < k; ++b) {
    const auto& pts = w.box_points[b];
    if (pts.empty()) continue;
    BoxAssoc& ba = assoc.boxes[b];
    ba.kappa.resize(pts.size());
    ba.fwd.resize(pts.size());
    for (std::size_t m = 0; m < pts.size(); ++m) {
      q6.head<3>() = pts[m];
      q6.tail<3>() = lambda * w.box_normals[b][m];
      const auto hit6 = index.fused.nearest(q6);
      ba.kappa[m] = {static_cast<std::int32_t>(hit6.index),
                     static_cast<std::uint8_t>(std::sqrt(hit6.sq_dist) >= tau)};
      const auto hit3 = index.position.nearest(pts[m]);
      ba.fwd[m] = {static_cast<std::int32_t>(hit3.index),
                   static_cast<std::uint8_t>(std::sqrt(hit3.sq_dist) >= tau)};
    }

    // Backward direction: a target point belongs to this box only when the
    // box-warped members explain it strictly better than the ego-warped cloud
    // (and within tau). At perfect alignment no background point qualifies,
    // so a perfectly-fit box contributes zero.
    Vec3 centroid = Vec3::Zero();
    for (const Vec3& p : pts) centroid += p;
    centroid /= static_cast<double>(pts.size());
    double spread = 0.0;
    for (const Vec3& p : pts) spread = std::max(spread, (p - centroid).norm());
    candidates.clear();
    index.position.collect_within(centroid, spread + tau, candidates);
    if (candidates.empty()) continue;
    KdTree3 member_tree(pts);
    for (std::size_t j : candidates) {
      const auto hit = member_tree.nearest(tgt.points[j]);
      const double d = std::sqrt(hit.sq_dist);
      if (d < tau && d < bg_bwd_dist[j])
        ba.bwd.emplace_back(static_cast<std::int32_t>(j), static_cast<std::int32_t>(hit.index));
    }
  }
  return assoc;
}

/// Evaluates the six losses (and optionally their gradients) with the
/// associations held fixed.
inline LossBreakdown eval_frozen(const SceneMotion& motion, const PointCloud& src,
                                 const NormalField& src_normals, const PointCloud& tgt,
                                 const NormalField& tgt_normals, const FrozenAssoc& assoc,
                                 const OptimConfig& cfg, double alpha, MotionGrad* grad = nullptr,
                                 const GradMask& mask = GradMask{}) {
  const std::size_t n = src.size();
  const std::size_t m_tgt = tgt.size();
  const std::size_t k = motion.box_count();
  const double tau = assoc.tau;
  const double lambda = cfg.lambda_normal;
  const detail::WarpedScene w = detail::warp_scene(motion, src, src_normals);
  const Mat3& re = motion.ego.rotation.matrix();

  if (grad) grad->resize(k);

  LossBreakdown out;

  // --- background kappa: mean truncated fused NN distance ------------------
  {
    const double inv_n = 1.0 / static_cast<double>(n);
    double acc = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const PairAssoc& pa = assoc.bg_kappa[i];
      if (pa.truncated) {
        acc += tau;
        continue;
      }
      const Vec3 dp = w.bg_points[i] - tgt.points[pa.target];
      const Vec3 dn = w.bg_normals[i] - tgt_normals.normals[pa.target];
      const double d = std::sqrt(dp.squaredNorm() + lambda * lambda * dn.squaredNorm());
      if (d >= tau) {
        acc += tau;
        continue;
      }
      acc += d;
      if (grad && mask.background && d > 1e-12) {
        const double scale = cfg.weights.bg * inv_n / d;
        const Vec3 gp = scale * dp;
        grad->ego_translation += gp;
        grad->ego_rotation += (re * src.points[i]).cross(gp);
        grad->ego_rotation += w.bg_normals[i].cross(Vec3(scale * lambda * lambda * dn));
      }
    }
    out.l_bg += acc * inv_n;
  }

  // --- background delta: symmetric truncated chamfer on positions ----------
  {
    const double inv_n = 1.0 / static_cast<double>(n);
    double acc = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const PairAssoc& pa = assoc.bg_fwd[i];
      if (pa.truncated) {
        acc += tau;
        continue;
      }
      const Vec3 dp = w.bg_points[i] - tgt.points[pa.target];
      const double d = dp.norm();
      if (d >= tau) {
        acc += tau;
        continue;
      }
      acc += d;
      if (grad && mask.background && d > 1e-12) {
        const double scale = cfg.weights.bg * cfg.delta_weight * inv_n / d;
        const Vec3 gp = scale * dp;
        grad->ego_translation += gp;
        grad->ego_rotation += (re * src.points[i]).cross(gp);
      }
    }
    double chamfer = acc * inv_n;

    const double inv_m = 1.0 / static_cast<double>(m_tgt);
    acc = 0.0;
    for (std::size_t j = 0; j < m_tgt; ++j) {
      const PairAssoc& pa = assoc.bg_bwd[j];
      if (pa.truncated) {
        acc += tau;
        continue;
      }
      const std::size_t i = static_cast<std::size_t>(pa.target);
      const Vec3 dp = w.bg_points[i] - tgt.points[j];  // d(d)/d(w) direction
      const double d = dp.norm();
      if (d >= tau) {
        acc += tau;
        continue;
      }
      acc += d;
      if (grad && mask.background && d > 1e-12) {
        const double scale = cfg.weights.bg * cfg.delta_weight * inv_m / d;
        const Vec3 gp = scale * dp;
        grad->ego_translation += gp;
        grad->ego_rotation += (re * src.points[i]).cross(gp);
      }
    }
    chamfer += acc * inv_m;
    out.l_bg += cfg.delta_weight * chamfer;
  }

  // --- foreground: per-box kappa + chamfer, weighted by motion probability --
  if (k > 0) {
    const double inv_k = 1.0 / static_cast<double>(k);
    double fg_total = 0.0;
    for (std::size_t b = 0; b < k; ++b) {
      const auto& members = motion.boxes.members[b];
      if (members.empty()) continue;
      const double pm = motion.p_m[b];
      const Mat3& rb = motion.per_box[b].rotation.matrix();
      const Vec3 ce = w.ego_centers[b];
      const Vec3 vc = re * motion.boxes.boxes[b].center;  // d(ce)/d(ego rot) lever
      const double inv_mem = 1.0 / static_cast<double>(members.size());
      const auto& pts = w.box_points[b];
      const BoxAssoc& ba = assoc.boxes[b];
      const double common = cfg.weights.fg * pm * inv_k;

      // Shared chain rule for one warped member point u with residual grad g:
      //   t_box += g
      //   box rotation += (rb * (wp - ce)) x g
      //   ego translation += g            (pivot moves with ego)
      //   ego rotation += vw x (rb^T g) - vc x (rb^T g) + vc x g
      //   center += re^T (I - rb^T) g
      const auto push_point_grad = [&](std::size_t mem_slot, const Vec3& g) {
        const std::size_t idx = members[mem_slot];
        const Vec3 vw = re * src.points[idx];
        const Vec3 rbt_g = rb.transpose() * g;
        BoxGrad& bg = grad->boxes[b];
        bg.translation += g;
        bg.rotation += (rb * (w.bg_points[idx] - ce)).cross(g);
        grad->ego_translation += g;
        grad->ego_rotation += vw.cross(rbt_g) - vc.cross(rbt_g) + vc.cross(g);
        bg.center += re.transpose() * (g - rbt_g);
      };

      double box_loss = 0.0;
      // kappa over members
      {
        double acc = 0.0;
        for (std::size_t m = 0; m < members.size(); ++m) {
          const PairAssoc& pa = ba.kappa[m];
          if (pa.truncated) {
            acc += tau;
            continue;
          }
          const Vec3 dp = pts[m] - tgt.points[pa.target];
          const Vec3 dn = w.box_normals[b][m] - tgt_normals.normals[pa.target];
          const double d = std::sqrt(dp.squaredNorm() + lambda * lambda * dn.squaredNorm());
          if (d >= tau) {
            acc += tau;
            continue;
          }
          acc += d;
          if (grad && mask.foreground && d > 1e-12) {
            const double scale = common * inv_mem / d;
            push_point_grad(m, Vec3(scale * dp));
            // normal chain: nu = rb * (re * n); rotations only
            const Vec3 gn = scale * lambda * lambda * dn;
            grad->boxes[b].rotation += w.box_normals[b][m].cross(gn);
            const std::size_t idx = members[m];
            grad->ego_rotation += (re * src_normals.normals[idx]).cross(Vec3(rb.transpose() * gn));
          }
        }
        box_loss += acc * inv_mem;
      }
      // forward chamfer over members
      {
        double acc = 0.0;
        for (std::size_t m = 0; m < members.size(); ++m) {
          const PairAssoc& pa = ba.fwd[m];
          if (pa.truncated) {
            acc += tau;
            continue;
          }
          const Vec3 dp = pts[m] - tgt.points[pa.target];
          const double d = dp.norm();
          if (d >= tau) {
            acc += tau;
            continue;
          }
          acc += d;
          if (grad && mask.foreground && d > 1e-12) {
            const double scale = common * cfg.delta_weight * inv_mem / d;
            push_point_grad(m, Vec3(scale * dp));
          }
        }
        box_loss += cfg.delta_weight * acc * inv_mem;
      }
      // backward chamfer over claimed target points
      if (!ba.bwd.empty()) {
        const double inv_bwd = 1.0 / static_cast<double>(ba.bwd.size());
        double acc = 0.0;
        for (const auto& [tj, mem_slot] : ba.bwd) {
          const Vec3 dp = pts[static_cast<std::size_t>(mem_slot)] - tgt.points[static_cast<std::size_t>(tj)];
          const double d = dp.norm();
          acc += std::min(d, tau);
          if (grad && mask.foreground && d > 1e-12 && d < tau) {
            const double scale = common * cfg.delta_weight * inv_bwd / d;
            push_point_grad(static_cast<std::size_t>(mem_slot), Vec3(scale * dp));
          }
        }
        box_loss += cfg.delta_weight * acc * inv_bwd;
      }
      fg_total += pm * box_loss;
    }
    out.l_fg = fg_total * inv_k;
  }

  // --- regularizers ---------------------------------------------------------
  if (k > 0) {
    const double inv_k = 1.0 / static_cast<double>(k);
    for (std::size_t b = 0; b < k; ++b) {
      const BoxParams& box = motion.boxes.boxes[b];
      const RigidTransform& tf = motion.per_box[b];

      // dimension: ||s - s_prior||^2
      const Vec3 ds = box.size - cfg.size_prior;
      out.l_dim += ds.squaredNorm() * inv_k;
      if (grad && mask.regularizers)
        grad->boxes[b].size += cfg.weights.dim * inv_k * 2.0 * ds;

      // heading: sin^2(angle between heading direction and t_perbox)
      if (tf.translation.norm() > cfg.t_still) {
        const Vec3 h(std::cos(box.heading), std::sin(box.heading), 0.0);
        const double tn = tf.translation.norm();
        const double c = h.dot(tf.translation) / tn;
        out.l_heading += (1.0 - c * c) * inv_k;
        if (grad && mask.regularizers) {
          const Vec3 hp(-std::sin(box.heading), std::cos(box.heading), 0.0);
          const double dc_dtheta = hp.dot(tf.translation) / tn;
          grad->boxes[b].heading += cfg.weights.heading * inv_k * (-2.0 * c * dc_dtheta);
          const Vec3 that = tf.translation / tn;
          const Vec3 dc_dt = (h - c * that) / tn;
          grad->boxes[b].translation += cfg.weights.heading * inv_k * (-2.0 * c) * dc_dt;
        }
      }

      // angle: squared per-box rotation angle
      const Vec3 log_rb = so3_log(tf.rotation).xi;
      out.l_angle += log_rb.squaredNorm() * inv_k;
      if (grad && mask.regularizers)
        grad->boxes[b].rotation += cfg.weights.angle * inv_k * 2.0 * log_rb;

      // mass: 1 - mean membership of assigned points
      const auto& members = motion.boxes.members[b];
      if (!members.empty()) {
        const double inv_mem = 1.0 / static_cast<double>(members.size());
        double mean_w = 0.0;
        for (std::size_t idx : members) {
          if (grad && mask.regularizers) {
            const MembershipGrad mg = membership_weight_grad(src.points[idx], box, alpha);
            mean_w += mg.weight;
            const double scale = -cfg.weights.mass * inv_k * inv_mem;
            grad->boxes[b].center += scale * mg.d_center;
            grad->boxes[b].size += scale * mg.d_size;
            grad->boxes[b].heading += scale * mg.d_heading;
          } else {
            mean_w += membership_weight(src.points[idx], box, alpha);
          }
        }
        out.l_mass += (1.0 - mean_w * inv_mem) * inv_k;
      }
    }
  }

  out.finalize(cfg.weights);
  return out;
}

// ---------------------------------------------------------------------------
// Public loss entry points (fresh associations, value only).
// ---------------------------------------------------------------------------

inline LossBreakdown scene_losses(const SceneMotion& motion, const PointCloud& src,
                                  const NormalField& src_normals, const PointCloud& tgt,
                                  const NormalField& tgt_normals, const OptimConfig& cfg,
                                  double alpha) {
  TargetIndex index(tgt, tgt_normals, cfg.lambda_normal);
  const FrozenAssoc assoc =
      freeze_associations(motion, src, src_normals, tgt, index, cfg.tau_nn);
  return eval_frozen(motion, src, src_normals, tgt, tgt_normals, assoc, cfg, alpha);
}

/// Background alignment loss: kappa + w_delta * chamfer under the current
/// ego-motion.
inline double background_loss(const SceneMotion& motion, const PointCloud& src,
                              const NormalField& src_normals, const PointCloud& tgt,
                              const NormalField& tgt_normals, const OptimConfig& cfg) {
  motion.validate();
  return scene_losses(motion, src, src_normals, tgt, tgt_normals, cfg, cfg.alpha_base).l_bg;
}

/// Motion-probability-weighted per-box alignment loss, averaged over boxes.
inline double foreground_loss(const SceneMotion& motion, const PointCloud& src,
                              const NormalField& src_normals, const PointCloud& tgt,
                              const NormalField& tgt_normals, const OptimConfig& cfg) {
  motion.validate();
  return scene_losses(motion, src, src_normals, tgt, tgt_normals, cfg, cfg.alpha_base).l_fg;
}

struct RegularizerTerms {
  double dim = 0.0;
  double heading = 0.0;
  double angle = 0.0;
  double mass = 0.0;
};

inline RegularizerTerms box_regularizers(const SceneMotion& motion, const PointCloud& src,
                                         const OptimConfig& cfg, double alpha) {
  motion.validate();
  RegularizerTerms terms;
  const std::size_t k = motion.box_count();
  if (k == 0) return terms;
  const double inv_k = 1.0 / static_cast<double>(k);
  for (std::size_t b = 0; b < k; ++b) {
    const BoxParams& box = motion.boxes.boxes[b];
    const RigidTransform& tf = motion.per_box[b];
    terms.dim += (box.size - cfg.size_prior).squaredNorm() * inv_k;
    if (tf.translation.norm() > cfg.t_still) {
      const Vec3 h(std::cos(box.heading), std::sin(box.heading), 0.0);
      const double c = h.dot(tf.translation) / tf.translation.norm();
      terms.heading += (1.0 - c * c) * inv_k;
    }
    terms.angle += so3_log(tf.rotation).xi.squaredNorm() * inv_k;
    const auto& members = motion.boxes.members[b];
    if (!members.empty()) {
      double mean_w = 0.0;
      for (std::size_t idx : members) mean_w += membership_weight(src.points[idx], box, alpha);
      terms.mass += (1.0 - mean_w / static_cast<double>(members.size())) * inv_k;
    }
  }
  return terms;
}

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

namespace detail {

/// Adam state for a fixed-length parameter block.
struct AdamState {
  std::vector<double> m, v;
  int t = 0;

  explicit AdamState(std::size_t n = 0) : m(n, 0.0), v(n, 0.0) {}

  /// Returns the (negated) update steps for the given gradient.
  void step(const double* g, double lr, double* out, std::size_t n) {
    constexpr double b1 = 0.9, b2 = 0.999, eps = 1e-8;
    ++t;
    const double c1 = 1.0 - std::pow(b1, t);
    const double c2 = 1.0 - std::pow(b2, t);
    for (std::size_t i = 0; i < n; ++i) {
      m[i] = b1 * m[i] + (1.0 - b1) * g[i];
      v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
      const double mhat = m[i] / c1;
      const double vhat = v[i] / c2;
      out[i] = lr * mhat / (std::sqrt(vhat) + eps);
    }
  }
};

}  // namespace detail

struct OptimResult {
  SceneMotion motion;
  std::vector<LossBreakdown> history;
  double final_alpha = 0.0;
};

/// Two-phase first-order optimization of the scene motion decomposition.
/// Phase 1 (warm-up) updates the ego-motion alone on the background loss;
/// phase 2 jointly updates ego, box geometry and per-box motions while the
/// motion probabilities and the membership slope refresh once per generation.
inline OptimResult optimize_scene(const PointCloud& src, const NormalField& src_normals,
                                  const PointCloud& tgt, const NormalField& tgt_normals,
                                  const AnchorSet& anchors, const OptimConfig& cfg,
                                  const SceneMotion* warm_start = nullptr) {
  cfg.validate();
  src.validate();
  tgt.validate();
  if (src_normals.size() != src.size() || tgt_normals.size() != tgt.size())
    throw std::invalid_argument("optimize_scene: normals size mismatch");

  SceneMotion motion = warm_start ? *warm_start : SceneMotion::identity_for(anchors);
  motion.validate();
  const std::size_t k = motion.box_count();

  TargetIndex index(tgt, tgt_normals, cfg.lambda_normal);

  SlopeState slope;
  slope.alpha = cfg.alpha_base;
  slope.alpha_base = cfg.alpha_base;
  slope.alpha_min = cfg.alpha_min;
  slope.alpha_max = cfg.alpha_max;

  // Tau schedule: optionally start wide so large offsets are not truncated away.
  double tau_start = cfg.tau_nn;
  if (cfg.anneal_tau) {
    std::vector<double> d0(src.size());
    const detail::WarpedScene w0 = detail::warp_scene(motion, src, src_normals);
    for (std::size_t i = 0; i < src.size(); ++i)
      d0[i] = std::sqrt(index.position.nearest(w0.bg_points[i]).sq_dist);
    std::nth_element(d0.begin(), d0.begin() + static_cast<std::ptrdiff_t>(d0.size() / 2), d0.end());
    tau_start = std::max(cfg.tau_nn, 2.0 * d0[d0.size() / 2]);
  }
  const auto tau_at = [&](int iter) {
    if (!cfg.anneal_tau || iter >= cfg.warmup_iterations || cfg.warmup_iterations == 0)
      return cfg.tau_nn;
    const double f = static_cast<double>(iter) / static_cast<double>(cfg.warmup_iterations);
    return tau_start + (cfg.tau_nn - tau_start) * f;
  };

  detail::AdamState adam_ego_rot(3), adam_ego_trans(3);
  std::vector<detail::AdamState> adam_box_rot(k, detail::AdamState(3));
  std::vector<detail::AdamState> adam_box_trans(k, detail::AdamState(3));
  std::vector<detail::AdamState> adam_box_geom(k, detail::AdamState(7));  // c(3), s(3), theta

  // A rotation step of lr radians moves a point by lr * lever meters, so cap
  // the rotation rate to keep induced point motion at the translation scale.
  double ego_lever = 0.0;
  for (const Vec3& p : src.points) ego_lever += p.norm();
  ego_lever /= static_cast<double>(src.size());
  const double lr_ego_rot = std::min(cfg.lr_rotation, cfg.lr_translation / std::max(ego_lever, 1.0));
  std::vector<double> lr_box_rot(k, cfg.lr_rotation);
  for (std::size_t b = 0; b < k; ++b) {
    double lever = 0.0;
    for (std::size_t idx : motion.boxes.members[b])
      lever = std::max(lever, (src.points[idx] - motion.boxes.boxes[b].center).norm());
    lr_box_rot[b] = std::min(cfg.lr_rotation, cfg.lr_translation / std::max(lever, 0.5));
  }

  OptimResult result;
  result.history.reserve(static_cast<std::size_t>(cfg.iterations) + 1);

  std::vector<SceneMotion> candidates;
  candidates.push_back(motion);

  MotionGrad grad;
  double prev_generation_total = std::numeric_limits<double>::infinity();
  const int warmup = std::min(cfg.warmup_iterations, cfg.iterations);

  // Reassign each box's members from its current geometry (slightly inflated)
  // so the mass term keeps tracking the cluster the box actually covers.
  const auto refresh_members = [&]() {
    for (std::size_t b = 0; b < k; ++b) {
      BoxParams capture = motion.boxes.boxes[b];
      capture.size *= cfg.member_capture_scale;
      const double reach = 0.5 * capture.size.head<2>().norm();
      std::vector<std::size_t> members;
      for (std::size_t i = 0; i < src.size(); ++i) {
        const Vec3& p = src.points[i];
        if (std::abs(p.x() - capture.center.x()) > reach ||
            std::abs(p.y() - capture.center.y()) > reach)
          continue;
        if (point_in_box(p, capture)) members.push_back(i);
      }
      if (members.size() >= static_cast<std::size_t>(cfg.member_min_points))
        motion.boxes.members[b] = std::move(members);
    }
  };

  // Membership-weighted residual-contrast refresh of the motion probabilities.
  const auto refresh_probabilities = [&](double tau) {
    const detail::WarpedScene w = detail::warp_scene(motion, src, src_normals);
    std::vector<double> r_ego_all(src.size());
    for (std::size_t i = 0; i < src.size(); ++i)
      r_ego_all[i] = std::min(std::sqrt(index.position.nearest(w.bg_points[i]).sq_dist), tau);
    slope = adapt_slope(slope, r_ego_all);
    for (std::size_t b = 0; b < k; ++b) {
      const auto& members = motion.boxes.members[b];
      if (members.empty()) {
        motion.p_m[b] = 0.0;
        continue;
      }
      std::vector<double> r_ego(members.size()), r_box(members.size()), weights(members.size());
      for (std::size_t m = 0; m < members.size(); ++m) {
        const std::size_t idx = members[m];
        r_ego[m] = std::sqrt(index.position.nearest(w.bg_points[idx]).sq_dist);
        r_box[m] = std::sqrt(index.position.nearest(w.box_points[b][m]).sq_dist);
        weights[m] = membership_weight(src.points[idx], motion.boxes.boxes[b], slope.alpha);
      }
      motion.p_m[b] =
          box_motion_probability(weights, residual_gains(r_ego, r_box, cfg.eta));
    }
  };

  for (int iter = 0; iter < cfg.iterations; ++iter) {
    const bool joint_phase = iter >= warmup;
    const double tau = tau_at(iter);

    if (joint_phase && (iter - warmup) % cfg.generation_length == 0) {
      // Reassignment runs only through the first half of the joint phase;
      // frozen assignments afterwards let the motions settle.
      if (cfg.member_refresh && (iter - warmup) * 2 <= cfg.iterations - warmup)
        refresh_members();
      refresh_probabilities(tau);
      candidates.push_back(motion);
    }

    const FrozenAssoc assoc = freeze_associations(motion, src, src_normals, tgt, index, tau);
    GradMask mask;
    mask.foreground = joint_phase;
    mask.regularizers = joint_phase;
    const LossBreakdown loss = eval_frozen(motion, src, src_normals, tgt, tgt_normals, assoc,
                                           cfg, slope.alpha, &grad, mask);
    if (!std::isfinite(loss.total))
      throw std::runtime_error("optimize_scene: non-finite loss at iteration " +
                               std::to_string(iter));
    result.history.push_back(loss);

    // Parameter updates. Joint-phase rates decay linearly so the iterates
    // settle instead of orbiting the optimum at a fixed step size.
    double lr_scale = 1.0;
    if (joint_phase && cfg.iterations > warmup) {
      const double f = static_cast<double>(iter - warmup) /
                       static_cast<double>(cfg.iterations - warmup);
      lr_scale = 1.0 - (1.0 - cfg.lr_decay_floor) * f;
    }
    double step[7];
    adam_ego_rot.step(grad.ego_rotation.data(), lr_scale * lr_ego_rot, step, 3);
    motion.ego.rotation = compose_rotation(so3_exp(Vec3(-step[0], -step[1], -step[2])),
                                           motion.ego.rotation);
    adam_ego_trans.step(grad.ego_translation.data(), lr_scale * cfg.lr_translation, step, 3);
    motion.ego.translation -= Vec3(step[0], step[1], step[2]);

    if (joint_phase) {
      for (std::size_t b = 0; b < k; ++b) {
        BoxGrad& bg = grad.boxes[b];
        adam_box_rot[b].step(bg.rotation.data(), lr_scale * lr_box_rot[b], step, 3);
        motion.per_box[b].rotation = compose_rotation(
            so3_exp(Vec3(-step[0], -step[1], -step[2])), motion.per_box[b].rotation);
        adam_box_trans[b].step(bg.translation.data(), lr_scale * cfg.lr_translation, step, 3);
        motion.per_box[b].translation -= Vec3(step[0], step[1], step[2]);

        double geom_grad[7] = {bg.center.x(), bg.center.y(), bg.center.z(),
                               bg.size.x(),   bg.size.y(),   bg.size.z(),  bg.heading};
        adam_box_geom[b].step(geom_grad, lr_scale * cfg.lr_geometry, step, 7);
        BoxParams& box = motion.boxes.boxes[b];
        box.center -= Vec3(step[0], step[1], step[2]);
        box.size = (box.size - Vec3(step[3], step[4], step[5])).cwiseMax(0.1);
        box.heading = wrap_angle(box.heading - step[6]);
      }
    }

    // Early stop on plateau, checked at generation boundaries in the joint phase.
    if (cfg.tolerance > 0.0 && joint_phase &&
        (iter - warmup + 1) % cfg.generation_length == 0) {
      if (std::abs(prev_generation_total - loss.total) < cfg.tolerance) {
        break;
      }
      prev_generation_total = loss.total;
    }
  }

  candidates.push_back(motion);

  // The refreshes change the objective between generations, so re-rank the
  // candidates under the final generation's assignment, probabilities and
  // slope; only the continuous parameters differ between them. The initial
  // parameters are always a candidate, which keeps the final loss <= the
  // initial loss.
  double best_total = std::numeric_limits<double>::infinity();
  std::size_t best_idx = 0;
  LossBreakdown best_loss;
  for (std::size_t c = 0; c < candidates.size(); ++c) {
    SceneMotion& cand = candidates[c];
    cand.p_m = motion.p_m;
    cand.boxes.members = motion.boxes.members;
    const FrozenAssoc assoc =
        freeze_associations(cand, src, src_normals, tgt, index, cfg.tau_nn);
    const LossBreakdown loss =
        eval_frozen(cand, src, src_normals, tgt, tgt_normals, assoc, cfg, slope.alpha);
    if (loss.total < best_total) {
      best_total = loss.total;
      best_idx = c;
      best_loss = loss;
    }
  }
  result.motion = candidates[best_idx];
  result.history.push_back(best_loss);
  result.final_alpha = slope.alpha;
  return result;
}

}  // namespace sflabel
