#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <limits>
#include <string>
#include <vector>

#include <json.hpp>

#include "sflabel/anchor.hpp"
#include "sflabel/augment.hpp"
#include "sflabel/geom.hpp"
#include "sflabel/ingest.hpp"
#include "sflabel/pointcloud.hpp"

namespace sflabel {

/// Per-point 3D displacement, index-aligned with the source cloud.
struct FlowLabel {
  std::vector<Vec3> flow;

  std::size_t size() const { return flow.size(); }
};

/// Everything one emitted label pair contains.
struct LabelRecord {
  PointCloud source;
  PointCloud target;  // synthesized PC*_T
  FlowLabel flow;
  std::vector<BoxParams> boxes;
  RigidTransform ego;
  std::vector<RigidTransform> per_box;
  std::vector<double> p_m;
  double threshold = 0.5;
  AugmentProvenance provenance;
  std::uint64_t seed = 0;

  void validate() const {
    source.validate();
    if (target.size() != source.size() || flow.size() != source.size())
      throw std::invalid_argument("label record: source/target/flow size mismatch");
    for (std::size_t i = 0; i < source.size(); ++i) {
      if (!flow.flow[i].allFinite()) throw std::invalid_argument("label record: non-finite flow");
      if (((source.points[i] + flow.flow[i]) - target.points[i]).norm() > 1e-6)
        throw std::invalid_argument("label record: source + flow != target");
    }
  }
};

/// Warps the source cloud with the augmented motions: points in a box with
/// P*_M >= threshold move with ego followed by that box's motion about the
/// ego-warped box center; everything else moves with ego alone. A point
/// claimed by several dynamic boxes follows the box with the nearest center.
inline PointCloud synthesize_target(const PointCloud& src, const AnchorSet& anchors,
                                    const AugmentedScene& aug, double threshold) {
  src.validate();
  if (aug.per_box.size() != anchors.size() || aug.p_m.size() != anchors.size())
    throw std::invalid_argument("synthesize_target: augmented scene does not match anchors");

  const Mat3& re = aug.ego.rotation.matrix();
  const Vec3& te = aug.ego.translation;

  std::vector<std::size_t> dynamic_boxes;
  for (std::size_t b = 0; b < anchors.size(); ++b)
    if (aug.p_m[b] >= threshold) dynamic_boxes.push_back(b);

  PointCloud out;
  out.points.resize(src.size());
  out.intensity = src.intensity;
  for (std::size_t i = 0; i < src.size(); ++i) {
    const Vec3& p = src.points[i];
    std::size_t claimed = static_cast<std::size_t>(-1);
    double best_center_dist = std::numeric_limits<double>::infinity();
    for (std::size_t b : dynamic_boxes) {
      if (!point_in_box(p, anchors.boxes[b])) continue;
      const double dist = (p - anchors.boxes[b].center).squaredNorm();
      if (dist < best_center_dist) {
        best_center_dist = dist;
        claimed = b;
      }
    }
    const Vec3 ego_warped = re * p + te;
    if (claimed == static_cast<std::size_t>(-1)) {
      out.points[i] = ego_warped;
    } else {
      const Vec3 center_warped = re * anchors.boxes[claimed].center + te;
      out.points[i] = aug.per_box[claimed].rotation * (ego_warped - center_warped) +
                      center_warped + aug.per_box[claimed].translation;
    }
  }
  return out;
}

/// SF = PC*_T - PC_S, index for index.
inline FlowLabel compute_flow_labels(const PointCloud& src, const PointCloud& target) {
  if (src.size() != target.size())
    throw std::invalid_argument("compute_flow_labels: point count mismatch");
  FlowLabel label;
  label.flow.resize(src.size());
  for (std::size_t i = 0; i < src.size(); ++i) label.flow[i] = target.points[i] - src.points[i];
  return label;
}

namespace detail {

constexpr char kSflMagic[4] = {'3', 'D', 'S', 'F'};
constexpr std::uint32_t kSflVersion = 1;

inline void store_le_u32(std::uint32_t u, unsigned char* p) {
  p[0] = static_cast<unsigned char>(u & 0xff);
  p[1] = static_cast<unsigned char>((u >> 8) & 0xff);
  p[2] = static_cast<unsigned char>((u >> 16) & 0xff);
  p[3] = static_cast<unsigned char>((u >> 24) & 0xff);
}

inline std::uint32_t load_le_u32(const unsigned char* p) {
  return static_cast<std::uint32_t>(p[0]) | static_cast<std::uint32_t>(p[1]) << 8 |
         static_cast<std::uint32_t>(p[2]) << 16 | static_cast<std::uint32_t>(p[3]) << 24;
}

inline nlohmann::json vec3_json(const Vec3& v) { return {v.x(), v.y(), v.z()}; }

inline Vec3 vec3_from_json(const nlohmann::json& j) {
  return Vec3(j.at(0).get<double>(), j.at(1).get<double>(), j.at(2).get<double>());
}

inline nlohmann::json transform_json(const RigidTransform& tf) {
  nlohmann::json rot = nlohmann::json::array();
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 3; ++c) rot.push_back(tf.rotation.matrix()(r, c));
  return {{"rotation", rot}, {"translation", vec3_json(tf.translation)}};
}

inline RigidTransform transform_from_json(const nlohmann::json& j) {
  Mat3 m;
  const auto& rot = j.at("rotation");
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 3; ++c) m(r, c) = rot.at(r * 3 + c);
  return {RotationMatrix::from_matrix(m), vec3_from_json(j.at("translation"))};
}

}  // namespace detail

struct LabelFilePair {
  std::filesystem::path label;     // .sfl
  std::filesystem::path sidecar;   // .meta.json
};

/// Binary layout: "3DSF", u32 version, u32 N, N*3 f32 source, N*3 f32 flow,
/// all little-endian. The sidecar carries boxes, transforms, probabilities,
/// the threshold and the augmentation provenance.
inline LabelFilePair write_label_pair(const LabelRecord& record, const std::filesystem::path& out_dir,
                                      const std::string& pair_id) {
  record.validate();
  std::filesystem::create_directories(out_dir);
  LabelFilePair paths{out_dir / (pair_id + ".sfl"), out_dir / (pair_id + ".meta.json")};

  std::ofstream out(paths.label, std::ios::binary | std::ios::trunc);
  if (!out) throw io_error("cannot open " + paths.label.string() + " for writing");
  unsigned char header[12];
  std::memcpy(header, detail::kSflMagic, 4);
  detail::store_le_u32(detail::kSflVersion, header + 4);
  detail::store_le_u32(static_cast<std::uint32_t>(record.source.size()), header + 8);
  out.write(reinterpret_cast<const char*>(header), 12);
  unsigned char buf[12];
  const auto write_vec = [&](const Vec3& v) {
    detail::store_le_f32(static_cast<float>(v.x()), buf);
    detail::store_le_f32(static_cast<float>(v.y()), buf + 4);
    detail::store_le_f32(static_cast<float>(v.z()), buf + 8);
    out.write(reinterpret_cast<const char*>(buf), 12);
  };
  for (const Vec3& p : record.source.points) write_vec(p);
  for (const Vec3& f : record.flow.flow) write_vec(f);
  if (!out) throw io_error("write failed on " + paths.label.string());
  out.close();

  nlohmann::json meta;
  meta["pair_id"] = pair_id;
  meta["threshold"] = record.threshold;
  meta["seed"] = record.seed;
  meta["ego"] = detail::transform_json(record.ego);
  meta["boxes"] = nlohmann::json::array();
  for (std::size_t b = 0; b < record.boxes.size(); ++b) {
    meta["boxes"].push_back({{"center", detail::vec3_json(record.boxes[b].center)},
                             {"size", detail::vec3_json(record.boxes[b].size)},
                             {"heading", record.boxes[b].heading},
                             {"motion", detail::transform_json(record.per_box[b])},
                             {"p_m", record.p_m[b]}});
  }
  nlohmann::json prov;
  prov["variant_seed"] = record.provenance.variant_seed;
  prov["ego_rotation"] = {{"angle", record.provenance.ego_rotation.angle},
                          {"axis", detail::vec3_json(record.provenance.ego_rotation.axis)}};
  prov["ego_translation"] = detail::vec3_json(record.provenance.ego_translation);
  prov["boxes"] = nlohmann::json::array();
  for (std::size_t b = 0; b < record.provenance.probability_noise.size(); ++b) {
    nlohmann::json jb;
    jb["probability_noise"] = record.provenance.probability_noise[b];
    if (b < record.provenance.box_rotation.size() && record.provenance.box_rotation[b]) {
      jb["rotation"] = {{"angle", record.provenance.box_rotation[b]->angle},
                        {"axis", detail::vec3_json(record.provenance.box_rotation[b]->axis)}};
    }
    if (b < record.provenance.box_translation.size() && record.provenance.box_translation[b])
      jb["translation"] = detail::vec3_json(*record.provenance.box_translation[b]);
    prov["boxes"].push_back(jb);
  }
  meta["provenance"] = prov;

  std::ofstream meta_out(paths.sidecar, std::ios::trunc);
  if (!meta_out) throw io_error("cannot open " + paths.sidecar.string() + " for writing");
  meta_out << meta.dump(2) << "\n";
  if (!meta_out) throw io_error("write failed on " + paths.sidecar.string());
  return paths;
}

/// The float32 arrays as stored on disk.
struct SflData {
  std::vector<Eigen::Vector3f> source;
  std::vector<Eigen::Vector3f> flow;
};

inline SflData read_label_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary | std::ios::ate);
  if (!in) throw io_error("cannot open " + path.string());
  const std::streamoff size = in.tellg();
  if (size < 12) throw format_error(path.string() + ": truncated header");
  in.seekg(0);
  unsigned char header[12];
  in.read(reinterpret_cast<char*>(header), 12);
  if (std::memcmp(header, detail::kSflMagic, 4) != 0)
    throw format_error(path.string() + ": bad magic");
  const std::uint32_t version = detail::load_le_u32(header + 4);
  if (version != detail::kSflVersion)
    throw format_error(path.string() + ": unsupported version " + std::to_string(version));
  const std::uint32_t n = detail::load_le_u32(header + 8);
  const std::streamoff expect = 12 + static_cast<std::streamoff>(n) * 24;
  if (size != expect) throw format_error(path.string() + ": size does not match point count");

  SflData data;
  data.source.resize(n);
  data.flow.resize(n);
  unsigned char buf[12];
  const auto read_vec = [&](Eigen::Vector3f& v) {
    in.read(reinterpret_cast<char*>(buf), 12);
    v.x() = detail::load_le_f32(buf);
    v.y() = detail::load_le_f32(buf + 4);
    v.z() = detail::load_le_f32(buf + 8);
  };
  for (std::uint32_t i = 0; i < n; ++i) read_vec(data.source[i]);
  for (std::uint32_t i = 0; i < n; ++i) read_vec(data.flow[i]);
  if (!in) throw io_error("short read on " + path.string());
  return data;
}

}  // namespace sflabel
