#pragma once

#include <cstdint>
#include <stdexcept>
#include <utility>
#include <vector>

#include "sflabel/geom.hpp"

namespace sflabel {

/// N points in meters, sensor frame. Intensity is optional (empty or size N).
struct PointCloud {
  std::vector<Vec3> points;
  std::vector<float> intensity;

  std::size_t size() const { return points.size(); }

  void validate() const {
    if (points.empty()) throw std::invalid_argument("point cloud: empty (N >= 1 required)");
    for (const Vec3& p : points)
      if (!p.allFinite()) throw std::invalid_argument("point cloud: non-finite coordinate");
    if (!intensity.empty() && intensity.size() != points.size())
      throw std::invalid_argument("point cloud: intensity size mismatch");
  }
};

/// Unit normals, one per point of the owning cloud. `degenerate` flags points
/// whose neighborhood was rank-deficient (empty when none were).
struct NormalField {
  std::vector<Vec3> normals;
  std::vector<std::uint8_t> degenerate;

  std::size_t size() const { return normals.size(); }
};

inline PointCloud transform_points(const PointCloud& cloud, const RigidTransform& tf) {
  PointCloud out;
  out.points.reserve(cloud.size());
  for (const Vec3& p : cloud.points) out.points.push_back(tf.apply(p));
  out.intensity = cloud.intensity;
  return out;
}

inline NormalField rotate_normals(const NormalField& normals, const RotationMatrix& r) {
  NormalField out;
  out.normals.reserve(normals.size());
  for (const Vec3& n : normals.normals) out.normals.push_back(r * n);
  out.degenerate = normals.degenerate;
  return out;
}

}  // namespace sflabel
