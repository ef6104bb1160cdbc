#pragma once

#include <algorithm>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Eigenvalues>

#include "sflabel/geom.hpp"
#include "sflabel/kdtree.hpp"
#include "sflabel/pointcloud.hpp"
#include "sflabel/rng.hpp"

namespace sflabel {

struct format_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct io_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// A filtered cloud plus the original index of each surviving point.
struct FilterResult {
  PointCloud cloud;
  std::vector<std::size_t> kept;
};

struct GroundConfig {
  bool enabled = true;
  double height_prior = -1.2;   // only points below this z seed the plane fit
  int ransac_iterations = 200;
  double inlier_threshold = 0.15;  // tau_g, meters
  double max_tilt_deg = 30.0;      // reject planes steeper than this
  std::uint64_t seed = 0;
};

namespace detail {

inline float load_le_f32(const unsigned char* p) {
  std::uint32_t u = static_cast<std::uint32_t>(p[0]) | static_cast<std::uint32_t>(p[1]) << 8 |
                    static_cast<std::uint32_t>(p[2]) << 16 | static_cast<std::uint32_t>(p[3]) << 24;
  float f;
  std::memcpy(&f, &u, 4);
  return f;
}

inline void store_le_f32(float f, unsigned char* p) {
  std::uint32_t u;
  std::memcpy(&u, &f, 4);
  p[0] = static_cast<unsigned char>(u & 0xff);
  p[1] = static_cast<unsigned char>((u >> 8) & 0xff);
  p[2] = static_cast<unsigned char>((u >> 16) & 0xff);
  p[3] = static_cast<unsigned char>((u >> 24) & 0xff);
}

}  // namespace detail

/// Reads consecutive little-endian float32 (x, y, z, intensity) records.
/// Non-finite records are dropped; the count lands in *dropped when given.
inline PointCloud read_point_binary(const std::filesystem::path& path, std::size_t* dropped = nullptr) {
  std::ifstream in(path, std::ios::binary | std::ios::ate);
  if (!in) throw io_error("cannot open " + path.string());
  const std::streamoff size = in.tellg();
  if (size % 16 != 0)
    throw format_error(path.string() + ": size " + std::to_string(size) + " not divisible by 16");
  in.seekg(0);

  std::vector<unsigned char> raw(static_cast<std::size_t>(size));
  in.read(reinterpret_cast<char*>(raw.data()), size);
  if (!in) throw io_error("short read on " + path.string());

  PointCloud cloud;
  const std::size_t records = raw.size() / 16;
  cloud.points.reserve(records);
  cloud.intensity.reserve(records);
  std::size_t skipped = 0;
  for (std::size_t i = 0; i < records; ++i) {
    const unsigned char* rec = raw.data() + 16 * i;
    const float x = detail::load_le_f32(rec), y = detail::load_le_f32(rec + 4),
                z = detail::load_le_f32(rec + 8), w = detail::load_le_f32(rec + 12);
    if (!std::isfinite(x) || !std::isfinite(y) || !std::isfinite(z)) {
      ++skipped;
      continue;
    }
    cloud.points.emplace_back(x, y, z);
    cloud.intensity.push_back(w);
  }
  if (dropped) *dropped = skipped;
  if (cloud.points.empty()) throw format_error(path.string() + ": no finite points (N >= 1 required)");
  return cloud;
}

inline void write_point_binary(const std::filesystem::path& path, const PointCloud& cloud) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw io_error("cannot open " + path.string() + " for writing");
  unsigned char rec[16];
  for (std::size_t i = 0; i < cloud.size(); ++i) {
    detail::store_le_f32(static_cast<float>(cloud.points[i].x()), rec);
    detail::store_le_f32(static_cast<float>(cloud.points[i].y()), rec + 4);
    detail::store_le_f32(static_cast<float>(cloud.points[i].z()), rec + 8);
    detail::store_le_f32(cloud.intensity.empty() ? 0.0f : cloud.intensity[i], rec + 12);
    out.write(reinterpret_cast<const char*>(rec), 16);
  }
  if (!out) throw io_error("write failed on " + path.string());
}

/// Minimal ASCII PLY reader; needs float x/y/z vertex properties, skips the rest.
inline PointCloud read_point_ply(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw io_error("cannot open " + path.string());
  std::string line;
  std::getline(in, line);
  if (line.rfind("ply", 0) != 0) throw format_error(path.string() + ": missing ply magic");

  std::size_t vertex_count = 0;
  std::vector<std::string> properties;
  bool in_vertex_element = false;
  bool ascii = false;
  while (std::getline(in, line)) {
    std::istringstream ls(line);
    std::string tok;
    ls >> tok;
    if (tok == "format") {
      std::string fmt;
      ls >> fmt;
      ascii = (fmt == "ascii");
    } else if (tok == "element") {
      std::string name;
      std::size_t count = 0;
      ls >> name >> count;
      in_vertex_element = (name == "vertex");
      if (in_vertex_element) vertex_count = count;
    } else if (tok == "property" && in_vertex_element) {
      std::string type, name;
      ls >> type >> name;
      properties.push_back(name);
    } else if (tok == "end_header") {
      break;
    }
  }
  if (!ascii) throw format_error(path.string() + ": only ascii PLY supported");
  const auto find = [&](const char* n) {
    return std::find(properties.begin(), properties.end(), n) - properties.begin();
  };
  const std::ptrdiff_t ix = find("x"), iy = find("y"), iz = find("z");
  const std::ptrdiff_t nprops = static_cast<std::ptrdiff_t>(properties.size());
  if (ix >= nprops || iy >= nprops || iz >= nprops)
    throw format_error(path.string() + ": vertex element lacks x/y/z properties");

  PointCloud cloud;
  cloud.points.reserve(vertex_count);
  std::vector<double> row(properties.size());
  for (std::size_t v = 0; v < vertex_count; ++v) {
    for (double& value : row)
      if (!(in >> value)) throw format_error(path.string() + ": truncated vertex data");
    cloud.points.emplace_back(row[ix], row[iy], row[iz]);
  }
  if (cloud.points.empty()) throw format_error(path.string() + ": no points (N >= 1 required)");
  return cloud;
}

/// Dispatches on extension: .bin (KITTI velodyne layout) or .ply (ascii).
inline PointCloud read_point_file(const std::filesystem::path& path) {
  const std::string ext = path.extension().string();
  if (ext == ".bin") return read_point_binary(path);
  if (ext == ".ply") return read_point_ply(path);
  throw format_error(path.string() + ": unsupported extension (expect .bin or .ply)");
}

/// Keeps points with x > 0 (sensor-frame forward half space).
inline FilterResult crop_front_view(const PointCloud& cloud) {
  FilterResult out;
  for (std::size_t i = 0; i < cloud.size(); ++i) {
    if (cloud.points[i].x() > 0.0) {
      out.cloud.points.push_back(cloud.points[i]);
      if (!cloud.intensity.empty()) out.cloud.intensity.push_back(cloud.intensity[i]);
      out.kept.push_back(i);
    }
  }
  if (out.cloud.points.empty()) throw format_error("front-view crop removed every point");
  return out;
}

/// RANSAC ground-plane removal seeded from points below cfg.height_prior.
/// Falls back to pure height thresholding when a plane cannot be fit.
inline FilterResult remove_ground(const PointCloud& cloud, const GroundConfig& cfg) {
  cloud.validate();
  std::vector<std::size_t> candidates;
  for (std::size_t i = 0; i < cloud.size(); ++i)
    if (cloud.points[i].z() < cfg.height_prior) candidates.push_back(i);

  Vec3 plane_n = Vec3::UnitZ();
  double plane_d = 0.0;  // plane: n.p + d = 0
  bool have_plane = false;

  if (candidates.size() >= 3) {
    Rng rng(derive_seed(cfg.seed, 0x67726f756e64ull));
    const double min_tilt_cos = std::cos(cfg.max_tilt_deg * kPi / 180.0);
    std::size_t best_inliers = 0;
    Vec3 best_n = Vec3::UnitZ();
    double best_d = 0.0;
    for (int it = 0; it < cfg.ransac_iterations; ++it) {
      const std::size_t a = candidates[rng.uniform_index(candidates.size())];
      const std::size_t b = candidates[rng.uniform_index(candidates.size())];
      const std::size_t c = candidates[rng.uniform_index(candidates.size())];
      if (a == b || b == c || a == c) continue;
      const Vec3 n = (cloud.points[b] - cloud.points[a]).cross(cloud.points[c] - cloud.points[a]);
      const double len = n.norm();
      if (len < 1e-9) continue;
      Vec3 un = n / len;
      if (un.z() < 0.0) un = -un;
      if (un.z() < min_tilt_cos) continue;
      const double d = -un.dot(cloud.points[a]);
      std::size_t inliers = 0;
      for (std::size_t idx : candidates)
        if (std::abs(un.dot(cloud.points[idx]) + d) <= cfg.inlier_threshold) ++inliers;
      if (inliers > best_inliers) {
        best_inliers = inliers;
        best_n = un;
        best_d = d;
      }
    }
    if (best_inliers >= 3) {
      // Refine with a PCA fit over the RANSAC inliers.
      std::vector<std::size_t> inliers;
      for (std::size_t idx : candidates)
        if (std::abs(best_n.dot(cloud.points[idx]) + best_d) <= cfg.inlier_threshold)
          inliers.push_back(idx);
      Vec3 centroid = Vec3::Zero();
      for (std::size_t idx : inliers) centroid += cloud.points[idx];
      centroid /= static_cast<double>(inliers.size());
      Mat3 cov = Mat3::Zero();
      for (std::size_t idx : inliers) {
        const Vec3 d = cloud.points[idx] - centroid;
        cov += d * d.transpose();
      }
      Eigen::SelfAdjointEigenSolver<Mat3> eig(cov);
      Vec3 un = eig.eigenvectors().col(0);
      if (un.z() < 0.0) un = -un;
      if (un.z() >= min_tilt_cos) {
        plane_n = un;
        plane_d = -un.dot(centroid);
        have_plane = true;
      } else {
        plane_n = best_n;
        plane_d = best_d;
        have_plane = true;
      }
    }
  }

  FilterResult out;
  for (std::size_t i = 0; i < cloud.size(); ++i) {
    bool is_ground;
    if (have_plane)
      is_ground = std::abs(plane_n.dot(cloud.points[i]) + plane_d) <= cfg.inlier_threshold;
    else
      is_ground = cloud.points[i].z() < cfg.height_prior;
    if (!is_ground) {
      out.cloud.points.push_back(cloud.points[i]);
      if (!cloud.intensity.empty()) out.cloud.intensity.push_back(cloud.intensity[i]);
      out.kept.push_back(i);
    }
  }
  if (out.cloud.points.empty()) throw format_error("ground removal left no points");
  return out;
}

/// Per-point normal from the k-nearest neighborhood covariance, oriented
/// toward the sensor. Rank-deficient neighborhoods get the sensor-facing
/// direction and a degenerate flag.
inline NormalField estimate_normals(const PointCloud& cloud, int k,
                                    const Vec3& sensor_origin = Vec3::Zero()) {
  cloud.validate();
  if (k < 3) throw std::invalid_argument("estimate_normals: k >= 3 required");
  if (cloud.size() <= static_cast<std::size_t>(k))
    throw std::invalid_argument("estimate_normals: need more points than neighbors");

  KdTree3 tree(cloud.points);
  NormalField field;
  field.normals.resize(cloud.size());
  field.degenerate.assign(cloud.size(), 0);

  // Neighborhood = the point itself plus its k nearest neighbors, found by
  // expanding-radius collection on the tree (grows until k+1 candidates).
  struct Neighbor {
    double d2;
    std::size_t idx;
  };
  std::vector<Neighbor> scratch;
  std::vector<std::size_t> found;
  const std::size_t take = static_cast<std::size_t>(k) + 1;

  for (std::size_t i = 0; i < cloud.size(); ++i) {
    double radius = 0.05;
    while (true) {
      found.clear();
      tree.collect_within(cloud.points[i], radius, found);
      if (found.size() >= take) break;
      radius *= 2.0;
    }
    scratch.clear();
    scratch.reserve(found.size());
    for (std::size_t idx : found)
      scratch.push_back({(cloud.points[idx] - cloud.points[i]).squaredNorm(), idx});
    std::nth_element(scratch.begin(), scratch.begin() + static_cast<std::ptrdiff_t>(take) - 1,
                     scratch.end(), [](const Neighbor& a, const Neighbor& b) {
                       return a.d2 < b.d2 || (a.d2 == b.d2 && a.idx < b.idx);
                     });

    Vec3 centroid = Vec3::Zero();
    for (std::size_t j = 0; j < take; ++j) centroid += cloud.points[scratch[j].idx];
    centroid /= static_cast<double>(take);
    Mat3 cov = Mat3::Zero();
    for (std::size_t j = 0; j < take; ++j) {
      const Vec3 d = cloud.points[scratch[j].idx] - centroid;
      cov += d * d.transpose();
    }
    Eigen::SelfAdjointEigenSolver<Mat3> eig(cov);
    const Vec3 evals = eig.eigenvalues();

    const Vec3 to_sensor = sensor_origin - cloud.points[i];
    const double dist = to_sensor.norm();
    const Vec3 sensor_dir = dist > 1e-12 ? Vec3(to_sensor / dist) : Vec3::UnitZ();

    if (evals[1] <= 1e-8 * std::max(evals[2], 1e-300) || evals[2] <= 0.0) {
      field.normals[i] = sensor_dir;
      field.degenerate[i] = 1;
      continue;
    }
    Vec3 n = eig.eigenvectors().col(0);
    if (n.dot(to_sensor) < 0.0) n = -n;
    field.normals[i] = n.normalized();
  }
  return field;
}

/// Uniform subsample without replacement; identity when N <= n. Kept indices
/// are sorted so the output preserves input order.
inline FilterResult sample_points(const PointCloud& cloud, std::size_t n, std::uint64_t seed) {
  cloud.validate();
  FilterResult out;
  if (cloud.size() <= n) {
    out.cloud = cloud;
    out.kept.resize(cloud.size());
    std::iota(out.kept.begin(), out.kept.end(), std::size_t{0});
    return out;
  }
  std::vector<std::size_t> indices(cloud.size());
  std::iota(indices.begin(), indices.end(), std::size_t{0});
  Rng rng(derive_seed(seed, 0x73616d706c65ull));
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t j = i + rng.uniform_index(indices.size() - i);
    std::swap(indices[i], indices[j]);
  }
  indices.resize(n);
  std::sort(indices.begin(), indices.end());
  out.kept = indices;
  out.cloud.points.reserve(n);
  for (std::size_t idx : indices) {
    out.cloud.points.push_back(cloud.points[idx]);
    if (!cloud.intensity.empty()) out.cloud.intensity.push_back(cloud.intensity[idx]);
  }
  return out;
}

}  // namespace sflabel
