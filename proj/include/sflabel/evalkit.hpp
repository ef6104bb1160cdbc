#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

#include "sflabel/anchor.hpp"
#include "sflabel/augment.hpp"
#include "sflabel/geom.hpp"
#include "sflabel/labelgen.hpp"
#include "sflabel/optim.hpp"
#include "sflabel/pointcloud.hpp"
#include "sflabel/rng.hpp"

namespace sflabel {

/// EPE3D plus the standard accuracy/outlier fractions.
struct MetricsRecord {
  double epe3d = 0.0;
  double acc3ds = 0.0;
  double acc3dr = 0.0;
  double outliers = 0.0;
};

/// Per point: e = ||pred - gt||, r = e / max(||gt||, 1e-9).
/// acc3ds: e < 0.05 or r < 0.05; acc3dr: e < 0.1 or r < 0.1;
/// outliers: e > 0.3 or r > 0.1.
inline MetricsRecord compute_metrics(const FlowLabel& pred, const FlowLabel& gt) {
  if (pred.size() != gt.size())
    throw std::invalid_argument("compute_metrics: flow count mismatch");
  if (pred.size() == 0) throw std::invalid_argument("compute_metrics: empty flows");
  MetricsRecord out;
  std::size_t n_s = 0, n_r = 0, n_o = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double e = (pred.flow[i] - gt.flow[i]).norm();
    const double r = e / std::max(gt.flow[i].norm(), 1e-9);
    out.epe3d += e;
    if (e < 0.05 || r < 0.05) ++n_s;
    if (e < 0.1 || r < 0.1) ++n_r;
    if (e > 0.3 || r > 0.1) ++n_o;
  }
  const double n = static_cast<double>(pred.size());
  out.epe3d /= n;
  out.acc3ds = static_cast<double>(n_s) / n;
  out.acc3dr = static_cast<double>(n_r) / n;
  out.outliers = static_cast<double>(n_o) / n;
  return out;
}

/// Rectangular background patch spanned by two edge vectors.
struct WallPatch {
  Vec3 origin = Vec3::Zero();
  Vec3 edge_u = Vec3::UnitX();
  Vec3 edge_v = Vec3::UnitZ();
};

struct SceneObject {
  BoxParams box;
  RigidTransform motion;  // applied after ego, about the ego-warped center
  std::size_t point_count = 256;
};

/// True when the yaw-oriented boxes intersect (2D separating axes + z overlap).
inline bool boxes_overlap(const BoxParams& a, const BoxParams& b) {
  const double za0 = a.center.z() - a.half_size().z(), za1 = a.center.z() + a.half_size().z();
  const double zb0 = b.center.z() - b.half_size().z(), zb1 = b.center.z() + b.half_size().z();
  if (za1 < zb0 || zb1 < za0) return false;

  const auto corners = [](const BoxParams& box) {
    std::array<Eigen::Vector2d, 4> cs;
    const double c = std::cos(box.heading), s = std::sin(box.heading);
    int i = 0;
    for (int sx : {-1, 1})
      for (int sy : {-1, 1}) {
        const double lx = sx * box.half_size().x(), ly = sy * box.half_size().y();
        cs[i++] = {box.center.x() + c * lx - s * ly, box.center.y() + s * lx + c * ly};
      }
    return cs;
  };
  const auto axes_of = [](const BoxParams& box) {
    const double c = std::cos(box.heading), s = std::sin(box.heading);
    return std::array<Eigen::Vector2d, 2>{Eigen::Vector2d(c, s), Eigen::Vector2d(-s, c)};
  };
  const auto ca = corners(a), cb = corners(b);
  for (const auto& axes : {axes_of(a), axes_of(b)}) {
    for (const auto& axis : axes) {
      double a_lo = std::numeric_limits<double>::infinity(), a_hi = -a_lo;
      double b_lo = a_lo, b_hi = -a_lo;
      for (const auto& p : ca) {
        a_lo = std::min(a_lo, axis.dot(p));
        a_hi = std::max(a_hi, axis.dot(p));
      }
      for (const auto& p : cb) {
        b_lo = std::min(b_lo, axis.dot(p));
        b_hi = std::max(b_hi, axis.dot(p));
      }
      if (a_hi < b_lo || b_hi < a_lo) return false;
    }
  }
  return true;
}

struct SyntheticSceneSpec {
  RigidTransform ego;
  std::vector<SceneObject> objects;
  std::vector<WallPatch> walls;
  std::size_t background_points = 8192;
  double noise_sigma = 0.0;  // isotropic noise on target points, meters
  std::uint64_t seed = 0;

  void validate() const {
    if (walls.empty() && objects.empty())
      throw std::invalid_argument("synthetic spec: needs walls or objects");
    if (!walls.empty() && background_points == 0)
      throw std::invalid_argument("synthetic spec: background_points must be > 0 with walls");
    for (const auto& o : objects) {
      o.box.validate();
      if (o.point_count == 0) throw std::invalid_argument("synthetic spec: object with zero points");
    }
    if (noise_sigma < 0.0) throw std::invalid_argument("synthetic spec: negative noise");
    for (std::size_t a = 0; a < objects.size(); ++a)
      for (std::size_t b = a + 1; b < objects.size(); ++b)
        if (boxes_overlap(objects[a].box, objects[b].box))
          throw std::invalid_argument("synthetic spec: overlapping objects");
  }
};

/// A generated rigid scene with exact ground truth.
struct SyntheticScene {
  PointCloud source;
  NormalField source_normals;  // exact surface normals, sensor-facing
  PointCloud target;           // noise applied when requested
  FlowLabel gt_flow;           // against the noise-free target
  SceneMotion truth;
  std::vector<int> point_object;  // -1 background, else index into spec.objects
};

/// Independent realization of the static/dynamic warp rule used for label
/// synthesis: every box with p_m >= threshold claims the points it contains
/// (nearest center on overlap); claimed points move with ego followed by the
/// box motion about the ego-warped center, everything else with ego alone.
/// Kept free of the labelgen implementation on purpose: the two are compared
/// against each other in the tests.
inline PointCloud oracle_warp_target(const PointCloud& src, const std::vector<BoxParams>& boxes,
                                     const AugmentedScene& aug, double threshold) {
  if (aug.per_box.size() != boxes.size() || aug.p_m.size() != boxes.size())
    throw std::invalid_argument("oracle_warp_target: motion/box count mismatch");
  PointCloud out;
  out.points.resize(src.size());
  out.intensity = src.intensity;
  const Mat3 re = aug.ego.rotation.matrix();
  const Vec3 te = aug.ego.translation;
  for (std::size_t i = 0; i < src.size(); ++i) {
    const Vec3& p = src.points[i];
    int chosen = -1;
    double best = std::numeric_limits<double>::infinity();
    for (std::size_t b = 0; b < boxes.size(); ++b) {
      if (aug.p_m[b] < threshold) continue;
      const BoxParams& box = boxes[b];
      const double ch = std::cos(box.heading), sh = std::sin(box.heading);
      const double dx = p.x() - box.center.x();
      const double dy = p.y() - box.center.y();
      const double dz = p.z() - box.center.z();
      const double lx = ch * dx + sh * dy;
      const double ly = -sh * dx + ch * dy;
      if (std::abs(lx) > 0.5 * box.size.x() || std::abs(ly) > 0.5 * box.size.y() ||
          std::abs(dz) > 0.5 * box.size.z())
        continue;
      const double cdist = dx * dx + dy * dy + dz * dz;
      if (cdist < best) {
        best = cdist;
        chosen = static_cast<int>(b);
      }
    }
    const Vec3 ego_p = re * p + te;
    if (chosen < 0) {
      out.points[i] = ego_p;
    } else {
      const Vec3 ego_c = re * boxes[static_cast<std::size_t>(chosen)].center + te;
      const auto& m = aug.per_box[static_cast<std::size_t>(chosen)];
      out.points[i] = m.rotation.matrix() * (ego_p - ego_c) + ego_c + m.translation;
    }
  }
  return out;
}

/// Samples the scene, warps it with the ground-truth motions (membership known
/// by construction), optionally adds target noise, and returns the exact flow.
inline SyntheticScene generate_synthetic_scene(const SyntheticSceneSpec& spec) {
  spec.validate();
  Rng rng(derive_seed(spec.seed, 0x7363656e65ull));
  SyntheticScene scene;

  // Background points over wall patches, area-weighted.
  if (!spec.walls.empty()) {
    std::vector<double> areas;
    double total_area = 0.0;
    for (const auto& wall : spec.walls) {
      const double a = wall.edge_u.cross(wall.edge_v).norm();
      if (a <= 0.0) throw std::invalid_argument("synthetic spec: degenerate wall patch");
      areas.push_back(a);
      total_area += a;
    }
    std::vector<std::size_t> counts(spec.walls.size(), 0);
    std::size_t assigned = 0;
    for (std::size_t w = 0; w + 1 < spec.walls.size(); ++w) {
      counts[w] = static_cast<std::size_t>(
          std::floor(static_cast<double>(spec.background_points) * areas[w] / total_area));
      assigned += counts[w];
    }
    counts.back() = spec.background_points - assigned;
    for (std::size_t w = 0; w < spec.walls.size(); ++w) {
      const auto& wall = spec.walls[w];
      Vec3 n = wall.edge_u.cross(wall.edge_v).normalized();
      for (std::size_t i = 0; i < counts[w]; ++i) {
        const Vec3 p = wall.origin + rng.uniform() * wall.edge_u + rng.uniform() * wall.edge_v;
        Vec3 np = n;
        if (np.dot(-p) < 0.0) np = -np;  // sensor at the origin
        scene.source.points.push_back(p);
        scene.source_normals.normals.push_back(np);
        scene.point_object.push_back(-1);
      }
    }
  }

  // Object points on the box surfaces, face area-weighted.
  for (std::size_t o = 0; o < spec.objects.size(); ++o) {
    const BoxParams& box = spec.objects[o].box;
    const Vec3 s = box.size;
    // face order: +x, -x, +y, -y, +z, -z in the box frame
    const double face_area[6] = {s.y() * s.z(), s.y() * s.z(), s.x() * s.z(),
                                 s.x() * s.z(), s.x() * s.y(), s.x() * s.y()};
    double total = 0.0;
    for (double a : face_area) total += a;
    for (std::size_t i = 0; i < spec.objects[o].point_count; ++i) {
      double pick = rng.uniform() * total;
      int face = 0;
      for (; face < 5; ++face) {
        if (pick < face_area[face]) break;
        pick -= face_area[face];
      }
      const int axis = face / 2;
      const double sign = (face % 2 == 0) ? 1.0 : -1.0;
      Vec3 local;
      local[axis] = sign * 0.5 * s[axis];
      const int u = (axis + 1) % 3, v = (axis + 2) % 3;
      local[u] = (rng.uniform() - 0.5) * s[u];
      local[v] = (rng.uniform() - 0.5) * s[v];
      Vec3 local_n = Vec3::Zero();
      local_n[axis] = sign;
      const Vec3 p = box_local_to_world(local, box);
      Vec3 n = box_local_to_world(local_n, box) - box.center;  // rotate only
      if (n.dot(-p) < 0.0) n = -n;
      scene.source.points.push_back(p);
      scene.source_normals.normals.push_back(n);
      scene.point_object.push_back(static_cast<int>(o));
    }
  }
  scene.source.validate();

  // Ground-truth motion bundle.
  scene.truth.ego = spec.ego;
  for (std::size_t o = 0; o < spec.objects.size(); ++o) {
    scene.truth.boxes.boxes.push_back(spec.objects[o].box);
    scene.truth.boxes.members.emplace_back();
    scene.truth.per_box.push_back(spec.objects[o].motion);
    const bool moving = so3_log(spec.objects[o].motion.rotation).angle() > 1e-9 ||
                        spec.objects[o].motion.translation.norm() > 1e-9;
    scene.truth.p_m.push_back(moving ? 1.0 : 0.0);
  }
  for (std::size_t i = 0; i < scene.point_object.size(); ++i)
    if (scene.point_object[i] >= 0)
      scene.truth.boxes.members[static_cast<std::size_t>(scene.point_object[i])].push_back(i);

  // Exact warp with membership known by construction.
  const Mat3 re = spec.ego.rotation.matrix();
  const Vec3 te = spec.ego.translation;
  PointCloud clean_target;
  clean_target.points.resize(scene.source.size());
  for (std::size_t i = 0; i < scene.source.size(); ++i) {
    const Vec3 ego_p = re * scene.source.points[i] + te;
    const int o = scene.point_object[i];
    if (o < 0) {
      clean_target.points[i] = ego_p;
    } else {
      const auto& obj = spec.objects[static_cast<std::size_t>(o)];
      const Vec3 ego_c = re * obj.box.center + te;
      clean_target.points[i] =
          obj.motion.rotation.matrix() * (ego_p - ego_c) + ego_c + obj.motion.translation;
    }
  }

  scene.gt_flow.flow.resize(scene.source.size());
  for (std::size_t i = 0; i < scene.source.size(); ++i)
    scene.gt_flow.flow[i] = clean_target.points[i] - scene.source.points[i];

  scene.target = clean_target;
  if (spec.noise_sigma > 0.0) {
    for (Vec3& p : scene.target.points)
      p += Vec3(spec.noise_sigma * rng.normal(), spec.noise_sigma * rng.normal(),
                spec.noise_sigma * rng.normal());
  }
  return scene;
}

inline double median(std::vector<double> xs) {
  if (xs.empty()) return std::numeric_limits<double>::quiet_NaN();
  const std::size_t mid = xs.size() / 2;
  std::nth_element(xs.begin(), xs.begin() + static_cast<std::ptrdiff_t>(mid), xs.end());
  double hi = xs[mid];
  if (xs.size() % 2 == 0) {
    const double lo = *std::max_element(xs.begin(), xs.begin() + static_cast<std::ptrdiff_t>(mid));
    return 0.5 * (lo + hi);
  }
  return hi;
}

}  // namespace sflabel
