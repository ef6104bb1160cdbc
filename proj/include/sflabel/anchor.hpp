#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numeric>
#include <stdexcept>
#include <vector>

#include "sflabel/geom.hpp"
#include "sflabel/pointcloud.hpp"

namespace sflabel {

/// Bird's-eye-view anchor tiling parameters.
struct GridSpec {
  double stride = 4.0;                        // meters between anchor centers
  Vec3 anchor_size = Vec3(4.0, 1.8, 1.6);     // (w, l, h) of every initial anchor
  std::vector<double> headings = {0.0, kPi / 2.0};
  int min_points = 30;

  void validate() const {
    if (!(stride > 0.0)) throw std::invalid_argument("grid.stride must be > 0");
    if ((anchor_size.array() <= 0.0).any()) throw std::invalid_argument("grid.anchor_size must be > 0");
    if (headings.empty()) throw std::invalid_argument("grid.headings must be non-empty");
    if (min_points < 1) throw std::invalid_argument("grid.min_points must be >= 1");
  }
};

/// Anchor boxes plus the hard point assignment used for pruning, the
/// foreground loss, and the mass term.
struct AnchorSet {
  std::vector<BoxParams> boxes;
  std::vector<std::vector<std::size_t>> members;

  std::size_t size() const { return boxes.size(); }
};

struct Bounds2D {
  double min_x = 0.0, max_x = 0.0, min_y = 0.0, max_y = 0.0;
};

inline Bounds2D xy_bounds(const PointCloud& cloud) {
  Bounds2D b;
  b.min_x = b.max_x = cloud.points.front().x();
  b.min_y = b.max_y = cloud.points.front().y();
  for (const Vec3& p : cloud.points) {
    b.min_x = std::min(b.min_x, p.x());
    b.max_x = std::max(b.max_x, p.x());
    b.min_y = std::min(b.min_y, p.y());
    b.max_y = std::max(b.max_y, p.y());
  }
  return b;
}

/// Tiles anchors over `bounds` at the grid stride, one per heading, and
/// assigns points to every anchor that contains them.
inline AnchorSet init_anchor_grid(const PointCloud& cloud, const Bounds2D& bounds, const GridSpec& spec) {
  spec.validate();
  cloud.validate();
  const double extent_x = bounds.max_x - bounds.min_x;
  const double extent_y = bounds.max_y - bounds.min_y;
  if (!(extent_x >= 0.0) || !(extent_y >= 0.0))
    throw std::invalid_argument("anchor grid: degenerate bounds");

  const auto count_along = [&](double extent) {
    return std::max<std::size_t>(1, static_cast<std::size_t>(std::ceil(extent / spec.stride - 1e-9)));
  };
  const std::size_t nx = count_along(extent_x);
  const std::size_t ny = count_along(extent_y);
  const double start_x = bounds.min_x + 0.5 * (extent_x - (static_cast<double>(nx) - 1.0) * spec.stride);
  const double start_y = bounds.min_y + 0.5 * (extent_y - (static_cast<double>(ny) - 1.0) * spec.stride);

  double z_sum = 0.0;
  for (const Vec3& p : cloud.points) z_sum += p.z();
  const double z_center = z_sum / static_cast<double>(cloud.size());

  AnchorSet anchors;
  anchors.boxes.reserve(nx * ny * spec.headings.size());
  for (std::size_t ix = 0; ix < nx; ++ix) {
    for (std::size_t iy = 0; iy < ny; ++iy) {
      for (double heading : spec.headings) {
        BoxParams box;
        box.center = Vec3(start_x + static_cast<double>(ix) * spec.stride,
                          start_y + static_cast<double>(iy) * spec.stride, z_center);
        box.size = spec.anchor_size;
        box.heading = wrap_angle(heading);
        anchors.boxes.push_back(box);
      }
    }
  }
  if (anchors.boxes.empty()) throw std::invalid_argument("anchor grid: zero boxes produced");

  anchors.members.resize(anchors.boxes.size());
  const double reach = 0.5 * spec.anchor_size.head<2>().norm();
  for (std::size_t b = 0; b < anchors.boxes.size(); ++b) {
    const BoxParams& box = anchors.boxes[b];
    for (std::size_t i = 0; i < cloud.size(); ++i) {
      const Vec3& p = cloud.points[i];
      if (std::abs(p.x() - box.center.x()) > reach || std::abs(p.y() - box.center.y()) > reach)
        continue;
      if (point_in_box(p, box)) anchors.members[b].push_back(i);
    }
  }
  return anchors;
}

inline AnchorSet init_anchor_grid(const PointCloud& cloud, const GridSpec& spec) {
  return init_anchor_grid(cloud, xy_bounds(cloud), spec);
}

/// Drops boxes with fewer than min_points members and re-centers survivors on
/// their member centroid. An empty result is valid (all-background scene).
inline AnchorSet prune_boxes(const AnchorSet& anchors, const PointCloud& cloud, int min_points) {
  AnchorSet out;
  for (std::size_t b = 0; b < anchors.boxes.size(); ++b) {
    if (anchors.members[b].size() < static_cast<std::size_t>(min_points)) continue;
    BoxParams box = anchors.boxes[b];
    Vec3 centroid = Vec3::Zero();
    for (std::size_t idx : anchors.members[b]) centroid += cloud.points[idx];
    centroid /= static_cast<double>(anchors.members[b].size());
    box.center = centroid;
    out.boxes.push_back(box);
    out.members.push_back(anchors.members[b]);
  }
  return out;
}

/// Re-grounds pruned anchors on the cloud: reassign members by the current
/// geometry, re-center on the member centroid, align the heading with the
/// members' principal horizontal axis, and drop boxes that fell under
/// min_points or collapsed onto a better-populated duplicate.
inline AnchorSet refine_anchors(const AnchorSet& anchors, const PointCloud& cloud,
                                const GridSpec& spec, int rounds = 2,
                                double capture_scale = 1.25) {
  AnchorSet current = anchors;
  const double reach = 0.5 * capture_scale * spec.anchor_size.head<2>().norm() + spec.stride;
  for (int round = 0; round < rounds; ++round) {
    AnchorSet next;
    for (std::size_t b = 0; b < current.size(); ++b) {
      BoxParams box = current.boxes[b];
      BoxParams capture = box;
      capture.size *= capture_scale;  // members come from a slightly inflated box
      std::vector<std::size_t> members;
      for (std::size_t i = 0; i < cloud.size(); ++i) {
        const Vec3& p = cloud.points[i];
        if (std::abs(p.x() - box.center.x()) > reach || std::abs(p.y() - box.center.y()) > reach)
          continue;
        if (point_in_box(p, capture)) members.push_back(i);
      }
      if (members.size() < static_cast<std::size_t>(spec.min_points)) continue;

      Vec3 centroid = Vec3::Zero();
      for (std::size_t idx : members) centroid += cloud.points[idx];
      centroid /= static_cast<double>(members.size());
      Eigen::Matrix2d cov = Eigen::Matrix2d::Zero();
      for (std::size_t idx : members) {
        const Eigen::Vector2d d = (cloud.points[idx] - centroid).head<2>();
        cov += d * d.transpose();
      }
      Eigen::SelfAdjointEigenSolver<Eigen::Matrix2d> eig(cov);
      box.center = centroid;
      if (eig.eigenvalues()[1] > 4.0 * eig.eigenvalues()[0]) {
        // clearly elongated cluster: heading follows the major axis
        const Eigen::Vector2d axis = eig.eigenvectors().col(1);
        box.heading = wrap_angle(std::atan2(axis.y(), axis.x()));
      }
      next.boxes.push_back(box);
      next.members.push_back(std::move(members));
    }
    current = std::move(next);
  }

  // Anchors that captured mostly the same points describe the same cluster;
  // keep only the best-populated of each group. Member lists are ascending
  // (built in point order), so the overlap is a linear merge.
  std::vector<std::size_t> order(current.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (current.members[a].size() != current.members[b].size())
      return current.members[a].size() > current.members[b].size();
    return a < b;
  });
  const auto overlap_count = [](const std::vector<std::size_t>& a,
                                const std::vector<std::size_t>& b) {
    std::size_t i = 0, j = 0, n = 0;
    while (i < a.size() && j < b.size()) {
      if (a[i] < b[j])
        ++i;
      else if (b[j] < a[i])
        ++j;
      else {
        ++n;
        ++i;
        ++j;
      }
    }
    return n;
  };
  AnchorSet out;
  for (std::size_t idx : order) {
    bool duplicate = false;
    for (std::size_t kept = 0; kept < out.size() && !duplicate; ++kept) {
      const std::size_t common = overlap_count(out.members[kept], current.members[idx]);
      const std::size_t smaller =
          std::min(out.members[kept].size(), current.members[idx].size());
      if (common * 2 > smaller) duplicate = true;
    }
    if (!duplicate) {
      out.boxes.push_back(current.boxes[idx]);
      out.members.push_back(current.members[idx]);
    }
  }
  return out;
}

inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

namespace detail {

/// One axis of the membership product, normalized so d = 0 gives 1.
/// m(d) = [sigma(a(d+b)) - sigma(a(d-b))] / (2 sigma(ab) - 1)
struct AxisMembership {
  double value;
  double d_value_d_d;     // derivative in the local coordinate
  double d_value_d_beta;  // derivative in the half-size
};

inline AxisMembership axis_membership(double d, double beta, double alpha) {
  const double sp = sigmoid(alpha * (d + beta));
  const double sm = sigmoid(alpha * (d - beta));
  const double s0 = sigmoid(alpha * beta);
  const double norm = 2.0 * s0 - 1.0;
  const double gp = sp * (1.0 - sp);
  const double gm = sm * (1.0 - sm);
  const double g0 = s0 * (1.0 - s0);
  AxisMembership m;
  m.value = (sp - sm) / norm;
  m.d_value_d_d = alpha * (gp - gm) / norm;
  m.d_value_d_beta = alpha * (gp + gm) / norm - m.value * (2.0 * alpha * g0) / norm;
  return m;
}

}  // namespace detail

/// Soft membership weight of one point: per-axis sigmoid differences over
/// box-local coordinates, normalized to 1 at the center.
inline double membership_weight(const Vec3& p, const BoxParams& box, double alpha) {
  const Vec3 d = box_local_coords(p, box);
  const Vec3 beta = box.half_size();
  double w = 1.0;
  for (int a = 0; a < 3; ++a) w *= detail::axis_membership(d[a], beta[a], alpha).value;
  return w;
}

/// Weight plus gradients in box center, size, and heading.
struct MembershipGrad {
  double weight = 0.0;
  Vec3 d_center = Vec3::Zero();
  Vec3 d_size = Vec3::Zero();
  double d_heading = 0.0;
};

inline MembershipGrad membership_weight_grad(const Vec3& p, const BoxParams& box, double alpha) {
  const double c = std::cos(box.heading), s = std::sin(box.heading);
  const Vec3 rel = p - box.center;
  const Vec3 d(c * rel.x() + s * rel.y(), -s * rel.x() + c * rel.y(), rel.z());
  const Vec3 beta = box.half_size();

  detail::AxisMembership ax[3];
  for (int a = 0; a < 3; ++a) ax[a] = detail::axis_membership(d[a], beta[a], alpha);

  MembershipGrad out;
  out.weight = ax[0].value * ax[1].value * ax[2].value;

  // d(local)/d(center) rows: dl0/dc = (-c, -s, 0); dl1/dc = (s, -c, 0); dl2/dc = (0, 0, -1)
  // d(local)/d(heading): dl0 = -s*rel.x + c*rel.y = d1 ; dl1 = -c*rel.x - s*rel.y = -d0 ; dl2 = 0
  const Vec3 dl_dheading(d.y(), -d.x(), 0.0);
  for (int a = 0; a < 3; ++a) {
    double rest = 1.0;
    for (int b = 0; b < 3; ++b)
      if (b != a) rest *= ax[b].value;
    const double dw_dla = ax[a].d_value_d_d * rest;
    Vec3 dla_dc;
    if (a == 0)
      dla_dc = Vec3(-c, -s, 0.0);
    else if (a == 1)
      dla_dc = Vec3(s, -c, 0.0);
    else
      dla_dc = Vec3(0.0, 0.0, -1.0);
    out.d_center += dw_dla * dla_dc;
    out.d_heading += dw_dla * dl_dheading[a];
    out.d_size[a] = ax[a].d_value_d_beta * rest * 0.5;  // beta = size / 2
  }
  return out;
}

/// Membership weights of every cloud point for one box.
inline std::vector<double> soft_membership(const PointCloud& cloud, const BoxParams& box, double alpha) {
  box.validate();
  if (!(alpha > 0.0)) throw std::invalid_argument("soft_membership: alpha must be > 0");
  std::vector<double> weights(cloud.size());
  for (std::size_t i = 0; i < cloud.size(); ++i)
    weights[i] = membership_weight(cloud.points[i], box, alpha);
  return weights;
}

/// Residual-contrast gains: sigma(eta * (r_ego - r_box)) per point. Gains
/// approach 1 where the box's own motion explains the point far better than
/// ego-motion alone.
inline std::vector<double> residual_gains(const std::vector<double>& r_ego,
                                          const std::vector<double>& r_box, double eta) {
  if (r_ego.size() != r_box.size())
    throw std::invalid_argument("residual_gains: size mismatch");
  std::vector<double> gains(r_ego.size());
  for (std::size_t i = 0; i < gains.size(); ++i) gains[i] = sigmoid(eta * (r_ego[i] - r_box[i]));
  return gains;
}

/// Per-box motion probability: membership-weighted mean of the residual
/// gains, clamped to [0, 1]. All-zero weights give 0.
inline double box_motion_probability(const std::vector<double>& weights,
                                     const std::vector<double>& gains) {
  if (weights.empty()) throw std::invalid_argument("box_motion_probability: empty weights");
  if (weights.size() != gains.size())
    throw std::invalid_argument("box_motion_probability: size mismatch");
  double wsum = 0.0, acc = 0.0;
  for (std::size_t i = 0; i < weights.size(); ++i) {
    wsum += weights[i];
    acc += weights[i] * gains[i];
  }
  if (wsum <= 0.0) return 0.0;
  return std::clamp(acc / wsum, 0.0, 1.0);
}

/// Sigmoid slope state with its adaptation bounds. v_ref latches onto the
/// first observed residual variance.
struct SlopeState {
  double alpha = 5.0;
  double alpha_base = 5.0;
  double alpha_min = 0.5;
  double alpha_max = 50.0;
  double v_ref = 0.0;  // 0 means "not yet set"
  std::vector<double> history;
};

/// Population variance.
inline double variance(const std::vector<double>& xs) {
  if (xs.empty()) throw std::invalid_argument("variance: empty input");
  double mean = 0.0;
  for (double x : xs) mean += x;
  mean /= static_cast<double>(xs.size());
  double acc = 0.0;
  for (double x : xs) acc += (x - mean) * (x - mean);
  return acc / static_cast<double>(xs.size());
}

/// alpha_new = clamp(alpha_base * v / v_ref, alpha_min, alpha_max); monotone
/// non-decreasing in the residual variance v.
inline SlopeState adapt_slope(const SlopeState& state, const std::vector<double>& residuals) {
  const double v = variance(residuals);
  SlopeState next = state;
  if (next.v_ref <= 0.0) next.v_ref = std::max(v, 1e-12);
  next.alpha = std::clamp(next.alpha_base * v / next.v_ref, next.alpha_min, next.alpha_max);
  next.history.push_back(v);
  return next;
}

}  // namespace sflabel
