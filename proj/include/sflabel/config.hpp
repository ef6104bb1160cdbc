#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>

#include <json.hpp>

#include "sflabel/anchor.hpp"
#include "sflabel/augment.hpp"
#include "sflabel/ingest.hpp"
#include "sflabel/optim.hpp"

namespace sflabel {

struct config_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct IngestConfig {
  GroundConfig ground;
  int normals_k = 16;
  std::size_t sample_n = 8192;
  bool front_view = false;

  void validate() const {
    if (normals_k < 3) throw config_error("ingest.normals_k must be >= 3");
    if (sample_n < 1) throw config_error("ingest.sample_n must be >= 1");
    if (ground.ransac_iterations < 1) throw config_error("ingest.ground.ransac_iterations must be >= 1");
    if (!(ground.inlier_threshold > 0.0)) throw config_error("ingest.ground.inlier_threshold must be > 0");
    if (!(ground.max_tilt_deg > 0.0 && ground.max_tilt_deg <= 90.0))
      throw config_error("ingest.ground.max_tilt_deg must be in (0, 90]");
  }
};

struct LabelgenConfig {
  double threshold = 0.5;  // motion-probability decision threshold
  bool dump_loss_history = false;

  void validate() const {
    if (!(threshold >= 0.0 && threshold <= 1.0))
      throw config_error("labelgen.threshold must be in [0, 1]");
  }
};

struct PipelineConfig {
  std::uint64_t seed = 0;
  int workers = 1;
  IngestConfig ingest;
  GridSpec anchor;
  OptimConfig optim;
  AugmentPolicy augment;
  LabelgenConfig labelgen;

  void validate() const {
    if (workers < 1) throw config_error("workers must be >= 1");
    ingest.validate();
    try {
      anchor.validate();
    } catch (const std::invalid_argument& e) {
      throw config_error(std::string("anchor: ") + e.what());
    }
    try {
      optim.validate();
    } catch (const std::invalid_argument& e) {
      throw config_error(std::string("optim: ") + e.what());
    }
    try {
      augment.validate();
    } catch (const std::invalid_argument& e) {
      throw config_error(std::string("augment: ") + e.what());
    }
    labelgen.validate();
  }
};

namespace detail {

using nlohmann::json;

inline void reject_unknown(const json& j, std::initializer_list<const char*> known,
                           const std::string& path) {
  for (const auto& [key, value] : j.items()) {
    bool ok = false;
    for (const char* k : known)
      if (key == k) ok = true;
    if (!ok) throw config_error(path + "." + key + ": unknown field");
  }
}

template <typename T>
void read_field(const json& j, const char* key, T& target, const std::string& path) {
  if (!j.contains(key)) return;
  try {
    j.at(key).get_to(target);
  } catch (const json::exception& e) {
    throw config_error(path + "." + key + ": " + e.what());
  }
}

inline void read_vec3(const json& j, const char* key, Vec3& target, const std::string& path) {
  if (!j.contains(key)) return;
  const auto& arr = j.at(key);
  if (!arr.is_array() || arr.size() != 3)
    throw config_error(path + "." + key + ": expected an array of 3 numbers");
  try {
    target = Vec3(arr.at(0).get<double>(), arr.at(1).get<double>(), arr.at(2).get<double>());
  } catch (const json::exception& e) {
    throw config_error(path + "." + key + ": " + e.what());
  }
}

}  // namespace detail

inline nlohmann::json to_json(const PipelineConfig& cfg) {
  nlohmann::json j;
  j["seed"] = cfg.seed;
  j["workers"] = cfg.workers;
  j["ingest"] = {
      {"ground",
       {{"enabled", cfg.ingest.ground.enabled},
        {"height_prior", cfg.ingest.ground.height_prior},
        {"ransac_iterations", cfg.ingest.ground.ransac_iterations},
        {"inlier_threshold", cfg.ingest.ground.inlier_threshold},
        {"max_tilt_deg", cfg.ingest.ground.max_tilt_deg}}},
      {"normals_k", cfg.ingest.normals_k},
      {"sample_n", cfg.ingest.sample_n},
      {"front_view", cfg.ingest.front_view}};
  j["anchor"] = {{"stride", cfg.anchor.stride},
                 {"anchor_size", {cfg.anchor.anchor_size.x(), cfg.anchor.anchor_size.y(),
                                  cfg.anchor.anchor_size.z()}},
                 {"headings", cfg.anchor.headings},
                 {"min_points", cfg.anchor.min_points}};
  j["optim"] = {{"iterations", cfg.optim.iterations},
                {"warmup_iterations", cfg.optim.warmup_iterations},
                {"generation_length", cfg.optim.generation_length},
                {"lr_rotation", cfg.optim.lr_rotation},
                {"lr_translation", cfg.optim.lr_translation},
                {"lr_geometry", cfg.optim.lr_geometry},
                {"lr_decay_floor", cfg.optim.lr_decay_floor},
                {"tau_nn", cfg.optim.tau_nn},
                {"anneal_tau", cfg.optim.anneal_tau},
                {"lambda_normal", cfg.optim.lambda_normal},
                {"delta_weight", cfg.optim.delta_weight},
                {"t_still", cfg.optim.t_still},
                {"size_prior", {cfg.optim.size_prior.x(), cfg.optim.size_prior.y(),
                                cfg.optim.size_prior.z()}},
                {"weights",
                 {{"bg", cfg.optim.weights.bg},
                  {"fg", cfg.optim.weights.fg},
                  {"dim", cfg.optim.weights.dim},
                  {"heading", cfg.optim.weights.heading},
                  {"angle", cfg.optim.weights.angle},
                  {"mass", cfg.optim.weights.mass}}},
                {"tolerance", cfg.optim.tolerance},
                {"eta", cfg.optim.eta},
                {"alpha_base", cfg.optim.alpha_base},
                {"alpha_min", cfg.optim.alpha_min},
                {"alpha_max", cfg.optim.alpha_max},
                {"member_refresh", cfg.optim.member_refresh},
                {"member_capture_scale", cfg.optim.member_capture_scale},
                {"member_min_points", cfg.optim.member_min_points}};
  j["augment"] = {{"sigma_rotation", cfg.augment.sigma_rotation},
                  {"sigma_translation", cfg.augment.sigma_translation},
                  {"sigma_probability", cfg.augment.sigma_probability},
                  {"sigma_rotation_ego", cfg.augment.sigma_rotation_ego},
                  {"sigma_translation_ego", cfg.augment.sigma_translation_ego},
                  {"variants", cfg.augment.variants}};
  j["labelgen"] = {{"threshold", cfg.labelgen.threshold},
                   {"dump_loss_history", cfg.labelgen.dump_loss_history}};
  return j;
}

inline PipelineConfig config_from_json(const nlohmann::json& j) {
  using detail::read_field;
  using detail::read_vec3;
  PipelineConfig cfg;
  detail::reject_unknown(j, {"seed", "workers", "ingest", "anchor", "optim", "augment", "labelgen"},
                         "config");
  read_field(j, "seed", cfg.seed, "config");
  read_field(j, "workers", cfg.workers, "config");

  if (j.contains("ingest")) {
    const auto& ji = j.at("ingest");
    detail::reject_unknown(ji, {"ground", "normals_k", "sample_n", "front_view"}, "ingest");
    if (ji.contains("ground")) {
      const auto& jg = ji.at("ground");
      detail::reject_unknown(
          jg, {"enabled", "height_prior", "ransac_iterations", "inlier_threshold", "max_tilt_deg"},
          "ingest.ground");
      read_field(jg, "enabled", cfg.ingest.ground.enabled, "ingest.ground");
      read_field(jg, "height_prior", cfg.ingest.ground.height_prior, "ingest.ground");
      read_field(jg, "ransac_iterations", cfg.ingest.ground.ransac_iterations, "ingest.ground");
      read_field(jg, "inlier_threshold", cfg.ingest.ground.inlier_threshold, "ingest.ground");
      read_field(jg, "max_tilt_deg", cfg.ingest.ground.max_tilt_deg, "ingest.ground");
    }
    read_field(ji, "normals_k", cfg.ingest.normals_k, "ingest");
    read_field(ji, "sample_n", cfg.ingest.sample_n, "ingest");
    read_field(ji, "front_view", cfg.ingest.front_view, "ingest");
  }

  if (j.contains("anchor")) {
    const auto& ja = j.at("anchor");
    detail::reject_unknown(ja, {"stride", "anchor_size", "headings", "min_points"}, "anchor");
    read_field(ja, "stride", cfg.anchor.stride, "anchor");
    read_vec3(ja, "anchor_size", cfg.anchor.anchor_size, "anchor");
    read_field(ja, "headings", cfg.anchor.headings, "anchor");
    read_field(ja, "min_points", cfg.anchor.min_points, "anchor");
  }

  if (j.contains("optim")) {
    const auto& jo = j.at("optim");
    detail::reject_unknown(
        jo, {"iterations", "warmup_iterations", "generation_length", "lr_rotation",
             "lr_translation", "lr_geometry", "lr_decay_floor", "tau_nn", "anneal_tau",
             "lambda_normal", "delta_weight", "t_still", "size_prior", "weights", "tolerance",
             "eta", "alpha_base", "alpha_min", "alpha_max", "member_refresh",
             "member_capture_scale", "member_min_points"},
        "optim");
    read_field(jo, "iterations", cfg.optim.iterations, "optim");
    read_field(jo, "warmup_iterations", cfg.optim.warmup_iterations, "optim");
    read_field(jo, "generation_length", cfg.optim.generation_length, "optim");
    read_field(jo, "lr_rotation", cfg.optim.lr_rotation, "optim");
    read_field(jo, "lr_translation", cfg.optim.lr_translation, "optim");
    read_field(jo, "lr_geometry", cfg.optim.lr_geometry, "optim");
    read_field(jo, "lr_decay_floor", cfg.optim.lr_decay_floor, "optim");
    read_field(jo, "tau_nn", cfg.optim.tau_nn, "optim");
    read_field(jo, "anneal_tau", cfg.optim.anneal_tau, "optim");
    read_field(jo, "lambda_normal", cfg.optim.lambda_normal, "optim");
    read_field(jo, "delta_weight", cfg.optim.delta_weight, "optim");
    read_field(jo, "t_still", cfg.optim.t_still, "optim");
    read_vec3(jo, "size_prior", cfg.optim.size_prior, "optim");
    if (jo.contains("weights")) {
      const auto& jw = jo.at("weights");
      detail::reject_unknown(jw, {"bg", "fg", "dim", "heading", "angle", "mass"}, "optim.weights");
      read_field(jw, "bg", cfg.optim.weights.bg, "optim.weights");
      read_field(jw, "fg", cfg.optim.weights.fg, "optim.weights");
      read_field(jw, "dim", cfg.optim.weights.dim, "optim.weights");
      read_field(jw, "heading", cfg.optim.weights.heading, "optim.weights");
      read_field(jw, "angle", cfg.optim.weights.angle, "optim.weights");
      read_field(jw, "mass", cfg.optim.weights.mass, "optim.weights");
    }
    read_field(jo, "tolerance", cfg.optim.tolerance, "optim");
    read_field(jo, "eta", cfg.optim.eta, "optim");
    read_field(jo, "alpha_base", cfg.optim.alpha_base, "optim");
    read_field(jo, "alpha_min", cfg.optim.alpha_min, "optim");
    read_field(jo, "alpha_max", cfg.optim.alpha_max, "optim");
    read_field(jo, "member_refresh", cfg.optim.member_refresh, "optim");
    read_field(jo, "member_capture_scale", cfg.optim.member_capture_scale, "optim");
    read_field(jo, "member_min_points", cfg.optim.member_min_points, "optim");
  }

  if (j.contains("augment")) {
    const auto& jg = j.at("augment");
    detail::reject_unknown(jg,
                           {"sigma_rotation", "sigma_translation", "sigma_probability",
                            "sigma_rotation_ego", "sigma_translation_ego", "variants"},
                           "augment");
    read_field(jg, "sigma_rotation", cfg.augment.sigma_rotation, "augment");
    read_field(jg, "sigma_translation", cfg.augment.sigma_translation, "augment");
    read_field(jg, "sigma_probability", cfg.augment.sigma_probability, "augment");
    read_field(jg, "sigma_rotation_ego", cfg.augment.sigma_rotation_ego, "augment");
    read_field(jg, "sigma_translation_ego", cfg.augment.sigma_translation_ego, "augment");
    read_field(jg, "variants", cfg.augment.variants, "augment");
  }

  if (j.contains("labelgen")) {
    const auto& jl = j.at("labelgen");
    detail::reject_unknown(jl, {"threshold", "dump_loss_history"}, "labelgen");
    read_field(jl, "threshold", cfg.labelgen.threshold, "labelgen");
    read_field(jl, "dump_loss_history", cfg.labelgen.dump_loss_history, "labelgen");
  }

  cfg.validate();
  return cfg;
}

inline PipelineConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw config_error("cannot open config file " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw config_error(path.string() + ": " + e.what());
  }
  return config_from_json(j);
}

}  // namespace sflabel
