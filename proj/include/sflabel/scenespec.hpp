#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "sflabel/config.hpp"
#include "sflabel/evalkit.hpp"
#include "sflabel/rng.hpp"

namespace sflabel {

/// Ranges for seeded random benchmark scenes: a street-canyon background of
/// wall patches, forward-biased ego-motion, optional yaw-boxed objects moving
/// roughly along their heading.
struct SceneBatchSpec {
  int count = 20;
  std::uint64_t seed = 0;
  std::size_t points = 8192;  // total, objects included
  double noise_sigma = 0.02;
  double ego_yaw_deg_max = 5.0;
  double ego_forward_min = 0.5;
  double ego_forward_max = 2.0;
  double ego_lateral_max = 0.3;
  double ego_vertical_max = 0.05;
  int objects_min = 0;
  int objects_max = 0;
  std::size_t object_points_min = 250;
  std::size_t object_points_max = 500;
  double object_translation_min = 0.3;
  double object_translation_max = 1.5;
  double object_spin_deg_max = 10.0;

  void validate() const {
    if (count < 1) throw config_error("batch.count must be >= 1");
    if (points < 64) throw config_error("batch.points must be >= 64");
    if (noise_sigma < 0.0) throw config_error("batch.noise_sigma must be >= 0");
    if (objects_min < 0 || objects_max < objects_min)
      throw config_error("batch.objects range invalid");
    if (object_points_max < object_points_min)
      throw config_error("batch.object_points range invalid");
    if (object_translation_max < object_translation_min || object_translation_min < 0.0)
      throw config_error("batch.object_translation range invalid");
  }
};

inline SyntheticSceneSpec make_scene_spec(const SceneBatchSpec& batch, int scene_index) {
  Rng rng(derive_seed(batch.seed, 0x626174636830ull, static_cast<std::uint64_t>(scene_index)));
  SyntheticSceneSpec spec;
  spec.seed = derive_seed(batch.seed, 0x7074736eull, static_cast<std::uint64_t>(scene_index));
  spec.noise_sigma = batch.noise_sigma;

  const double half_length = rng.uniform(18.0, 22.0);
  const double half_width = rng.uniform(8.0, 12.0);
  const double z0 = -1.1, wall_h = 4.0;
  const auto wall = [&](Vec3 origin, Vec3 edge_u) {
    spec.walls.push_back({origin, edge_u, Vec3(0.0, 0.0, wall_h)});
  };
  wall(Vec3(-half_length, half_width, z0), Vec3(2.0 * half_length, 0.0, 0.0));
  wall(Vec3(-half_length, -half_width, z0), Vec3(2.0 * half_length, 0.0, 0.0));
  wall(Vec3(half_length, -half_width, z0), Vec3(0.0, 2.0 * half_width, 0.0));
  wall(Vec3(-half_length, -half_width, z0), Vec3(0.0, 2.0 * half_width, 0.0));
  // Two interior facade patches at random yaw; they pin down yaw and x jointly.
  for (int f = 0; f < 2; ++f) {
    const double yaw = rng.uniform(0.0, kPi);
    const double len = rng.uniform(6.0, 10.0);
    const Vec3 center(rng.uniform(-0.6, 0.6) * half_length, rng.uniform(-0.6, 0.6) * half_width, z0);
    const Vec3 dir(std::cos(yaw), std::sin(yaw), 0.0);
    wall(center - 0.5 * len * dir, len * dir);
  }

  const double yaw_max = batch.ego_yaw_deg_max * kPi / 180.0;
  spec.ego.rotation = RotationMatrix::rotation_z(rng.uniform(-yaw_max, yaw_max));
  spec.ego.translation = Vec3(rng.uniform(batch.ego_forward_min, batch.ego_forward_max),
                              rng.uniform(-batch.ego_lateral_max, batch.ego_lateral_max),
                              rng.uniform(-batch.ego_vertical_max, batch.ego_vertical_max));

  const int n_objects = batch.objects_max == 0
                            ? 0
                            : batch.objects_min +
                                  static_cast<int>(rng.uniform_index(
                                      static_cast<std::uint64_t>(batch.objects_max - batch.objects_min + 1)));
  std::size_t object_points_total = 0;
  for (int o = 0; o < n_objects; ++o) {
    SceneObject obj;
    for (int attempt = 0; attempt < 64; ++attempt) {
      obj.box.size = Vec3(rng.uniform(3.5, 4.5), rng.uniform(1.6, 2.0), rng.uniform(1.5, 1.7));
      obj.box.heading = rng.uniform(-kPi, kPi);
      obj.box.center = Vec3(rng.uniform(-0.55, 0.55) * half_length,
                            rng.uniform(-0.6, 0.6) * half_width, rng.uniform(-0.4, 0.2));
      bool clear = true;
      for (const auto& other : spec.objects)
        if (boxes_overlap(obj.box, other.box)) clear = false;
      if (clear) break;
    }
    const double speed = rng.uniform(batch.object_translation_min, batch.object_translation_max);
    const double dir_jitter = rng.uniform(-0.26, 0.26);  // ~15 degrees off heading
    const double move_dir = obj.box.heading + dir_jitter + (rng.uniform() < 0.5 ? 0.0 : kPi);
    obj.motion.translation = Vec3(speed * std::cos(move_dir), speed * std::sin(move_dir), 0.0);
    const double spin_max = batch.object_spin_deg_max * kPi / 180.0;
    obj.motion.rotation = RotationMatrix::rotation_z(rng.uniform(-spin_max, spin_max));
    obj.point_count = batch.object_points_min +
                      rng.uniform_index(batch.object_points_max - batch.object_points_min + 1);
    object_points_total += obj.point_count;
    spec.objects.push_back(obj);
  }
  spec.background_points =
      batch.points > object_points_total ? batch.points - object_points_total : 64;
  return spec;
}

inline std::vector<SyntheticSceneSpec> make_scene_batch(const SceneBatchSpec& batch) {
  batch.validate();
  std::vector<SyntheticSceneSpec> specs;
  specs.reserve(static_cast<std::size_t>(batch.count));
  for (int s = 0; s < batch.count; ++s) specs.push_back(make_scene_spec(batch, s));
  return specs;
}

// ---------------------------------------------------------------------------
// JSON scene-spec files: either {"batch": {...}} or {"scenes": [...]}.
// ---------------------------------------------------------------------------

namespace detail {

inline RigidTransform transform_from_spec_json(const nlohmann::json& j, const std::string& path) {
  RigidTransform tf;
  if (j.contains("yaw_deg")) {
    double yaw = 0.0;
    read_field(j, "yaw_deg", yaw, path);
    tf.rotation = RotationMatrix::rotation_z(yaw * kPi / 180.0);
  }
  read_vec3(j, "translation", tf.translation, path);
  return tf;
}

}  // namespace detail

inline std::vector<SyntheticSceneSpec> load_scene_specs(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw config_error("cannot open scene spec file " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw config_error(path.string() + ": " + e.what());
  }
  using detail::read_field;
  using detail::read_vec3;

  if (j.contains("batch")) {
    const auto& jb = j.at("batch");
    detail::reject_unknown(
        jb, {"count", "seed", "points", "noise_sigma", "ego_yaw_deg_max", "ego_forward_min",
             "ego_forward_max", "ego_lateral_max", "ego_vertical_max", "objects_min", "objects_max",
             "object_points_min", "object_points_max", "object_translation_min",
             "object_translation_max", "object_spin_deg_max"},
        "batch");
    SceneBatchSpec batch;
    read_field(jb, "count", batch.count, "batch");
    read_field(jb, "seed", batch.seed, "batch");
    read_field(jb, "points", batch.points, "batch");
    read_field(jb, "noise_sigma", batch.noise_sigma, "batch");
    read_field(jb, "ego_yaw_deg_max", batch.ego_yaw_deg_max, "batch");
    read_field(jb, "ego_forward_min", batch.ego_forward_min, "batch");
    read_field(jb, "ego_forward_max", batch.ego_forward_max, "batch");
    read_field(jb, "ego_lateral_max", batch.ego_lateral_max, "batch");
    read_field(jb, "ego_vertical_max", batch.ego_vertical_max, "batch");
    read_field(jb, "objects_min", batch.objects_min, "batch");
    read_field(jb, "objects_max", batch.objects_max, "batch");
    read_field(jb, "object_points_min", batch.object_points_min, "batch");
    read_field(jb, "object_points_max", batch.object_points_max, "batch");
    read_field(jb, "object_translation_min", batch.object_translation_min, "batch");
    read_field(jb, "object_translation_max", batch.object_translation_max, "batch");
    read_field(jb, "object_spin_deg_max", batch.object_spin_deg_max, "batch");
    return make_scene_batch(batch);
  }

  if (!j.contains("scenes") || !j.at("scenes").is_array())
    throw config_error(path.string() + ": expected top-level \"batch\" object or \"scenes\" array");

  std::vector<SyntheticSceneSpec> specs;
  std::size_t idx = 0;
  for (const auto& js : j.at("scenes")) {
    const std::string base = "scenes[" + std::to_string(idx) + "]";
    detail::reject_unknown(js, {"seed", "noise_sigma", "background_points", "ego", "walls", "objects"},
                           base);
    SyntheticSceneSpec spec;
    read_field(js, "seed", spec.seed, base);
    read_field(js, "noise_sigma", spec.noise_sigma, base);
    read_field(js, "background_points", spec.background_points, base);
    if (js.contains("ego")) spec.ego = detail::transform_from_spec_json(js.at("ego"), base + ".ego");
    if (js.contains("walls")) {
      std::size_t w = 0;
      for (const auto& jw : js.at("walls")) {
        const std::string wpath = base + ".walls[" + std::to_string(w++) + "]";
        detail::reject_unknown(jw, {"origin", "edge_u", "edge_v"}, wpath);
        WallPatch patch;
        read_vec3(jw, "origin", patch.origin, wpath);
        read_vec3(jw, "edge_u", patch.edge_u, wpath);
        read_vec3(jw, "edge_v", patch.edge_v, wpath);
        spec.walls.push_back(patch);
      }
    }
    if (js.contains("objects")) {
      std::size_t o = 0;
      for (const auto& jo : js.at("objects")) {
        const std::string opath = base + ".objects[" + std::to_string(o++) + "]";
        detail::reject_unknown(jo, {"center", "size", "heading_deg", "points", "motion"}, opath);
        SceneObject obj;
        read_vec3(jo, "center", obj.box.center, opath);
        read_vec3(jo, "size", obj.box.size, opath);
        double heading_deg = 0.0;
        read_field(jo, "heading_deg", heading_deg, opath);
        obj.box.heading = wrap_angle(heading_deg * kPi / 180.0);
        read_field(jo, "points", obj.point_count, opath);
        if (jo.contains("motion"))
          obj.motion = detail::transform_from_spec_json(jo.at("motion"), opath + ".motion");
        spec.objects.push_back(obj);
      }
    }
    try {
      spec.validate();
    } catch (const std::invalid_argument& e) {
      throw config_error(base + ": " + e.what());
    }
    specs.push_back(std::move(spec));
    ++idx;
  }
  if (specs.empty()) throw config_error(path.string() + ": no scenes");
  return specs;
}

}  // namespace sflabel
