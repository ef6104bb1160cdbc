#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <stdexcept>
#include <vector>

namespace sflabel {

using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;

inline constexpr double kPi = 3.14159265358979323846;

inline Mat3 skew(const Vec3& v) {
  Mat3 m;
  m << 0.0, -v.z(), v.y(),
       v.z(), 0.0, -v.x(),
      -v.y(), v.x(), 0.0;
  return m;
}

/// Wraps an angle to (-pi, pi].
inline double wrap_angle(double a) {
  a = std::fmod(a, 2.0 * kPi);
  if (a <= -kPi) a += 2.0 * kPi;
  if (a > kPi) a -= 2.0 * kPi;
  return a;
}

/// Axis-angle element xi = angle * unit_axis (radians).
struct AxisAngle {
  Vec3 xi = Vec3::Zero();

  AxisAngle() = default;
  explicit AxisAngle(const Vec3& v) : xi(v) {}
  AxisAngle(double x, double y, double z) : xi(x, y, z) {}

  double angle() const { return xi.norm(); }

  /// Equivalent element with |xi| in [0, pi].
  AxisAngle canonicalized() const {
    const double a = xi.norm();
    if (a <= kPi || a == 0.0) return *this;
    const double wrapped = wrap_angle(a);  // in (-pi, pi]
    return AxisAngle(xi * (wrapped / a));
  }
};

/// Proper rotation, kept orthonormal with det +1 (checked to 1e-9).
class RotationMatrix {
 public:
  static constexpr double kOrthoTol = 1e-9;

  RotationMatrix() : m_(Mat3::Identity()) {}

  static RotationMatrix identity() { return RotationMatrix(); }

  /// Validating factory; throws std::invalid_argument on a non-rotation.
  static RotationMatrix from_matrix(const Mat3& m) {
    if (!m.allFinite()) throw std::invalid_argument("rotation: non-finite entries");
    if (orthonormality_error(m) > kOrthoTol)
      throw std::invalid_argument("rotation: not orthonormal within 1e-9");
    if (std::abs(m.determinant() - 1.0) > kOrthoTol)
      throw std::invalid_argument("rotation: determinant not +1 within 1e-9");
    return RotationMatrix(m, Unchecked{});
  }

  static RotationMatrix rotation_z(double yaw) {
    const double c = std::cos(yaw), s = std::sin(yaw);
    Mat3 m;
    m << c, -s, 0.0,
         s,  c, 0.0,
         0.0, 0.0, 1.0;
    return RotationMatrix(m, Unchecked{});
  }

  static double orthonormality_error(const Mat3& m) {
    return (m.transpose() * m - Mat3::Identity()).cwiseAbs().maxCoeff();
  }

  const Mat3& matrix() const { return m_; }
  Vec3 operator*(const Vec3& p) const { return m_ * p; }
  RotationMatrix inverse() const { return RotationMatrix(m_.transpose().eval(), Unchecked{}); }

  /// Projects back onto SO(3) via the unit quaternion.
  RotationMatrix renormalized() const {
    Eigen::Quaterniond q(m_);
    q.normalize();
    return RotationMatrix(q.toRotationMatrix(), Unchecked{});
  }

  double yaw() const { return std::atan2(m_(1, 0), m_(0, 0)); }

  struct Unchecked {};
  RotationMatrix(const Mat3& m, Unchecked) : m_(m) {}

 private:
  Mat3 m_;
};

/// Rodrigues exponential map. Falls back to I + [xi]x below 1e-8 rad.
inline RotationMatrix so3_exp(const Vec3& xi) {
  if (!xi.allFinite()) throw std::invalid_argument("so3_exp: non-finite input");
  const double angle = xi.norm();
  if (angle < 1e-8) {
    return RotationMatrix(Mat3(Mat3::Identity() + skew(xi)), RotationMatrix::Unchecked{});
  }
  const Vec3 u = xi / angle;
  const Mat3 k = skew(u);
  Mat3 m = Mat3::Identity() + std::sin(angle) * k + (1.0 - std::cos(angle)) * (k * k);
  return RotationMatrix(m, RotationMatrix::Unchecked{});
}

inline RotationMatrix so3_exp(const AxisAngle& xi) { return so3_exp(xi.xi); }

/// Inverse of so3_exp; returns the canonical element with angle in [0, pi].
inline AxisAngle so3_log(const RotationMatrix& r) {
  const Mat3& m = r.matrix();
  const double tr = m.trace();
  const double cos_a = std::clamp((tr - 1.0) * 0.5, -1.0, 1.0);
  const double angle = std::acos(cos_a);
  const Vec3 axial(m(2, 1) - m(1, 2), m(0, 2) - m(2, 0), m(1, 0) - m(0, 1));
  if (angle < 1e-8) return AxisAngle(Vec3(0.5 * axial));
  if (angle > kPi - 1e-6) {
    // Near pi the axial part vanishes; recover the axis from the diagonal.
    Vec3 u;
    const Mat3 s = 0.5 * (m + Mat3::Identity());
    int k = 0;
    s.diagonal().maxCoeff(&k);
    u[k] = std::sqrt(std::max(s(k, k), 0.0));
    for (int i = 0; i < 3; ++i)
      if (i != k) u[i] = s(k, i) / u[k];
    u.normalize();
    if (axial.dot(u) < 0.0) u = -u;
    return AxisAngle(Vec3(angle * u));
  }
  return AxisAngle(Vec3(angle / (2.0 * std::sin(angle)) * axial));
}

/// R * M, re-orthonormalized if numerical drift exceeds 1e-12.
inline RotationMatrix compose_rotation(const RotationMatrix& r, const RotationMatrix& m) {
  Mat3 p = r.matrix() * m.matrix();
  RotationMatrix out(p, RotationMatrix::Unchecked{});
  if (RotationMatrix::orthonormality_error(p) > 1e-12) out = out.renormalized();
  return out;
}

inline RotationMatrix operator*(const RotationMatrix& a, const RotationMatrix& b) {
  return compose_rotation(a, b);
}

struct RigidTransform {
  RotationMatrix rotation;
  Vec3 translation = Vec3::Zero();

  static RigidTransform identity() { return {}; }

  Vec3 apply(const Vec3& p) const { return rotation * p + translation; }

  RigidTransform inverse() const {
    RotationMatrix rt = rotation.inverse();
    return {rt, Vec3(-(rt * translation))};
  }
};

/// Composition: (a * b).apply(p) == a.apply(b.apply(p)).
inline RigidTransform operator*(const RigidTransform& a, const RigidTransform& b) {
  return {compose_rotation(a.rotation, b.rotation), a.rotation * b.translation + a.translation};
}

/// Yaw-oriented 3D box: center, full size (w, l, h), heading about +z.
struct BoxParams {
  Vec3 center = Vec3::Zero();
  Vec3 size = Vec3(4.0, 1.8, 1.6);
  double heading = 0.0;

  Vec3 half_size() const { return 0.5 * size; }

  void validate() const {
    if (!center.allFinite() || !size.allFinite() || !std::isfinite(heading))
      throw std::invalid_argument("box: non-finite parameters");
    if ((size.array() <= 0.0).any())
      throw std::invalid_argument("box: size must be positive");
  }
};

/// Point expressed in the box frame: Rz(-heading) * (p - center).
inline Vec3 box_local_coords(const Vec3& p, const BoxParams& box) {
  const double c = std::cos(box.heading), s = std::sin(box.heading);
  const Vec3 d = p - box.center;
  return Vec3(c * d.x() + s * d.y(), -s * d.x() + c * d.y(), d.z());
}

/// Inverse of box_local_coords.
inline Vec3 box_local_to_world(const Vec3& local, const BoxParams& box) {
  const double c = std::cos(box.heading), s = std::sin(box.heading);
  return Vec3(c * local.x() - s * local.y() + box.center.x(),
              s * local.x() + c * local.y() + box.center.y(),
              local.z() + box.center.z());
}

inline bool point_in_box(const Vec3& p, const BoxParams& box) {
  const Vec3 d = box_local_coords(p, box).cwiseAbs();
  const Vec3 beta = box.half_size();
  return d.x() <= beta.x() && d.y() <= beta.y() && d.z() <= beta.z();
}

}  // namespace sflabel
