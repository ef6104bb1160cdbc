#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <numeric>
#include <vector>

namespace sflabel {

/// Static KD-tree over fixed-dimension points. Built once, queried read-only,
/// so concurrent queries from multiple threads are safe. Splits on the widest
/// axis at the median; queries are exact.
template <int Dim>
class KdTree {
 public:
  using Point = Eigen::Matrix<double, Dim, 1>;

  struct Hit {
    std::size_t index = static_cast<std::size_t>(-1);
    double sq_dist = std::numeric_limits<double>::infinity();
  };

  explicit KdTree(std::vector<Point> points, int leaf_size = 16)
      : points_(std::move(points)), leaf_size_(std::max(1, leaf_size)) {
    order_.resize(points_.size());
    std::iota(order_.begin(), order_.end(), std::size_t{0});
    if (!points_.empty()) {
      nodes_.reserve(2 * points_.size() / static_cast<std::size_t>(leaf_size_) + 2);
      root_ = build(0, points_.size());
    }
  }

  std::size_t size() const { return points_.size(); }
  const Point& point(std::size_t i) const { return points_[i]; }

  Hit nearest(const Point& q) const {
    Hit best;
    if (!points_.empty()) search(root_, q, best);
    return best;
  }

  /// Appends the indices of all points within `radius` of q.
  void collect_within(const Point& q, double radius, std::vector<std::size_t>& out) const {
    if (!points_.empty()) collect(root_, q, radius * radius, out);
  }

 private:
  struct Node {
    int axis = -1;          // -1 marks a leaf
    double split = 0.0;
    std::int32_t left = -1, right = -1;
    std::uint32_t begin = 0, end = 0;
  };

  std::int32_t build(std::size_t begin, std::size_t end) {
    Node node;
    node.begin = static_cast<std::uint32_t>(begin);
    node.end = static_cast<std::uint32_t>(end);
    const std::size_t count = end - begin;
    if (count <= static_cast<std::size_t>(leaf_size_)) {
      nodes_.push_back(node);
      return static_cast<std::int32_t>(nodes_.size() - 1);
    }

    Point lo = points_[order_[begin]], hi = lo;
    for (std::size_t i = begin + 1; i < end; ++i) {
      lo = lo.cwiseMin(points_[order_[i]]);
      hi = hi.cwiseMax(points_[order_[i]]);
    }
    int axis = 0;
    (hi - lo).maxCoeff(&axis);
    if (hi[axis] - lo[axis] <= 0.0) {  // all points coincide on every axis
      nodes_.push_back(node);
      return static_cast<std::int32_t>(nodes_.size() - 1);
    }

    const std::size_t mid = begin + count / 2;
    std::nth_element(order_.begin() + begin, order_.begin() + mid, order_.begin() + end,
                     [&](std::size_t a, std::size_t b) { return points_[a][axis] < points_[b][axis]; });
    node.axis = axis;
    node.split = points_[order_[mid]][axis];

    nodes_.push_back(node);
    const std::int32_t id = static_cast<std::int32_t>(nodes_.size() - 1);
    const std::int32_t left = build(begin, mid);
    const std::int32_t right = build(mid, end);
    nodes_[id].left = left;
    nodes_[id].right = right;
    return id;
  }

  void search(std::int32_t id, const Point& q, Hit& best) const {
    const Node& node = nodes_[id];
    if (node.axis < 0) {
      for (std::uint32_t i = node.begin; i < node.end; ++i) {
        const std::size_t idx = order_[i];
        const double d2 = (points_[idx] - q).squaredNorm();
        if (d2 < best.sq_dist) {
          best.sq_dist = d2;
          best.index = idx;
        }
      }
      return;
    }
    const double delta = q[node.axis] - node.split;
    const std::int32_t near = delta < 0.0 ? node.left : node.right;
    const std::int32_t far = delta < 0.0 ? node.right : node.left;
    search(near, q, best);
    if (delta * delta < best.sq_dist) search(far, q, best);
  }

  void collect(std::int32_t id, const Point& q, double sq_radius, std::vector<std::size_t>& out) const {
    const Node& node = nodes_[id];
    if (node.axis < 0) {
      for (std::uint32_t i = node.begin; i < node.end; ++i) {
        const std::size_t idx = order_[i];
        if ((points_[idx] - q).squaredNorm() <= sq_radius) out.push_back(idx);
      }
      return;
    }
    const double delta = q[node.axis] - node.split;
    const std::int32_t near = delta < 0.0 ? node.left : node.right;
    const std::int32_t far = delta < 0.0 ? node.right : node.left;
    collect(near, q, sq_radius, out);
    if (delta * delta <= sq_radius) collect(far, q, sq_radius, out);
  }

  std::vector<Point> points_;
  std::vector<std::size_t> order_;
  std::vector<Node> nodes_;
  std::int32_t root_ = -1;
  int leaf_size_;
};

using KdTree3 = KdTree<3>;
using KdTree6 = KdTree<6>;

}  // namespace sflabel
