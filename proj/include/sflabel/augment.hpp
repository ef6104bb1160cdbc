#pragma once

#include <cstdint>
#include <optional>
#include <stdexcept>
#include <vector>

#include "sflabel/geom.hpp"
#include "sflabel/optim.hpp"
#include "sflabel/rng.hpp"

namespace sflabel {

/// Noise scales for global-local motion augmentation. All noise is truncated
/// Gaussian (|x| <= 3 sigma); a zero scale leaves the value untouched
/// bit-for-bit.
struct AugmentPolicy {
  double sigma_rotation = 0.035;      // per-box rotation angle, radians
  double sigma_translation = 0.3;     // per-box translation, meters
  double sigma_probability = 0.05;    // motion probability
  double sigma_rotation_ego = 0.017;  // global rotation angle, radians
  double sigma_translation_ego = 0.5; // global translation, meters
  int variants = 8;                   // K_aug
  std::uint64_t seed = 0;

  void validate() const {
    if (sigma_rotation < 0.0 || sigma_translation < 0.0 || sigma_probability < 0.0 ||
        sigma_rotation_ego < 0.0 || sigma_translation_ego < 0.0)
      throw std::invalid_argument("augment: noise scales must be >= 0");
    if (variants < 1) throw std::invalid_argument("augment: variants must be >= 1");
  }
};

/// One recorded rotation draw: angle (signed) and axis.
struct RotationDraw {
  double angle = 0.0;
  Vec3 axis = Vec3::UnitZ();
};

/// Noise actually drawn for one variant; static boxes have no motion draws.
struct AugmentProvenance {
  std::uint64_t variant_seed = 0;
  RotationDraw ego_rotation;
  Vec3 ego_translation = Vec3::Zero();
  std::vector<std::optional<RotationDraw>> box_rotation;
  std::vector<std::optional<Vec3>> box_translation;
  std::vector<double> probability_noise;
};

/// A perturbed copy of the scene motion plus the draws that produced it.
struct AugmentedScene {
  RigidTransform ego;
  std::vector<RigidTransform> per_box;
  std::vector<double> p_m;
  AugmentProvenance provenance;

  static AugmentedScene from_motion(const SceneMotion& motion) {
    AugmentedScene a;
    a.ego = motion.ego;
    a.per_box = motion.per_box;
    a.p_m = motion.p_m;
    a.provenance.box_rotation.resize(motion.box_count());
    a.provenance.box_translation.resize(motion.box_count());
    a.provenance.probability_noise.assign(motion.box_count(), 0.0);
    return a;
  }
};

/// R* = R * exp(a * u) with a ~ N(0, sigma) truncated at 3 sigma and u uniform
/// on the sphere. sigma == 0 returns the input unchanged.
inline RotationMatrix perturb_rotation(const RotationMatrix& r, double sigma, Rng& rng,
                                       RotationDraw* draw = nullptr) {
  if (sigma < 0.0) throw std::invalid_argument("perturb_rotation: sigma must be >= 0");
  if (sigma == 0.0) {
    if (draw) *draw = RotationDraw{};
    return r;
  }
  const double angle = rng.truncated_normal(sigma);
  const Vec3 axis = rng.unit_sphere();
  if (draw) *draw = {angle, axis};
  return compose_rotation(r, so3_exp(Vec3(angle * axis)));
}

/// t + eps with eps ~ N(0, sigma I) truncated per component at 3 sigma.
inline Vec3 perturb_translation(const Vec3& t, double sigma, Rng& rng, Vec3* draw = nullptr) {
  if (sigma < 0.0) throw std::invalid_argument("perturb_translation: sigma must be >= 0");
  if (sigma == 0.0) {
    if (draw) *draw = Vec3::Zero();
    return t;
  }
  const Vec3 eps(rng.truncated_normal(sigma), rng.truncated_normal(sigma),
                 rng.truncated_normal(sigma));
  if (draw) *draw = eps;
  return t + eps;
}

/// clamp(p + eps, 0, 1) with eps ~ N(0, sigma) truncated at 3 sigma.
inline double perturb_probability(double p, double sigma, Rng& rng, double* draw = nullptr) {
  if (sigma < 0.0) throw std::invalid_argument("perturb_probability: sigma must be >= 0");
  if (!(p >= 0.0 && p <= 1.0)) throw std::invalid_argument("perturb_probability: p outside [0,1]");
  if (sigma == 0.0) {
    if (draw) *draw = 0.0;
    return p;
  }
  const double eps = rng.truncated_normal(sigma);
  if (draw) *draw = eps;
  return std::clamp(p + eps, 0.0, 1.0);
}

/// Draws `policy.variants` perturbed copies of the motion. Ego noise applies
/// to every variant; per-box motion noise only to boxes whose motion probability
/// reaches the threshold (static boxes keep their motion bit-identical);
/// probability noise applies to every box. Deterministic for a given seed:
/// variant v uses an independent stream derived from (seed, v).
inline std::vector<AugmentedScene> augment_scene(const SceneMotion& motion,
                                                 const AugmentPolicy& policy, double threshold) {
  policy.validate();
  motion.validate();
  std::vector<AugmentedScene> variants;
  variants.reserve(static_cast<std::size_t>(policy.variants));
  for (int v = 0; v < policy.variants; ++v) {
    const std::uint64_t vseed = derive_seed(policy.seed, 0x766172ull, static_cast<std::uint64_t>(v));
    Rng rng(vseed);
    AugmentedScene aug = AugmentedScene::from_motion(motion);
    aug.provenance.variant_seed = vseed;

    aug.ego.rotation = perturb_rotation(motion.ego.rotation, policy.sigma_rotation_ego, rng,
                                        &aug.provenance.ego_rotation);
    aug.ego.translation = perturb_translation(motion.ego.translation, policy.sigma_translation_ego,
                                              rng, &aug.provenance.ego_translation);

    for (std::size_t b = 0; b < motion.box_count(); ++b) {
      if (motion.p_m[b] >= threshold) {
        RotationDraw rd;
        Vec3 td;
        aug.per_box[b].rotation =
            perturb_rotation(motion.per_box[b].rotation, policy.sigma_rotation, rng, &rd);
        aug.per_box[b].translation =
            perturb_translation(motion.per_box[b].translation, policy.sigma_translation, rng, &td);
        aug.provenance.box_rotation[b] = rd;
        aug.provenance.box_translation[b] = td;
      }
      aug.p_m[b] = perturb_probability(motion.p_m[b], policy.sigma_probability, rng,
                                       &aug.provenance.probability_noise[b]);
    }
    variants.push_back(std::move(aug));
  }
  return variants;
}

}  // namespace sflabel
