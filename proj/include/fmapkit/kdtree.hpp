#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <limits>
#include <numeric>
#include <vector>

namespace fmapkit {

/// Exact nearest-neighbour search in R^k with an axis-split tree.
///
/// Distances are squared Euclidean sums accumulated in coordinate order, and
/// ties resolve to the lowest point index, so results are identical to a
/// brute-force scan with the same rules.
class KdTree {
 public:
  using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

  explicit KdTree(RowMatrix points, Eigen::Index leaf_size = 8)
      : points_(std::move(points)), leaf_size_(std::max<Eigen::Index>(1, leaf_size)) {
    order_.resize(static_cast<std::size_t>(points_.rows()));
    std::iota(order_.begin(), order_.end(), Eigen::Index{0});
    if (points_.rows() > 0) root_ = build(0, points_.rows());
  }

  struct Hit {
    Eigen::Index index = -1;
    double squared_distance = std::numeric_limits<double>::infinity();
  };

  Hit nearest(const double* query) const {
    Hit best;
    if (root_ >= 0) search(root_, query, best);
    return best;
  }

  Eigen::Index dim() const { return points_.cols(); }

  static double squared_distance(const double* a, const double* b, Eigen::Index dim) {
    double s = 0.0;
    for (Eigen::Index c = 0; c < dim; ++c) {
      const double d = a[c] - b[c];
      s += d * d;
    }
    return s;
  }

 private:
  struct Node {
    Eigen::Index begin = 0, end = 0;
    Eigen::Index axis = -1;
    double split = 0.0;
    int left = -1, right = -1;
  };

  int build(Eigen::Index begin, Eigen::Index end) {
    Node node;
    node.begin = begin;
    node.end = end;
    if (end - begin > leaf_size_) {
      Eigen::Index axis = 0;
      double widest = -1.0;
      for (Eigen::Index c = 0; c < points_.cols(); ++c) {
        double lo = std::numeric_limits<double>::infinity(), hi = -lo;
        for (Eigen::Index i = begin; i < end; ++i) {
          const double v = points_(order_[static_cast<std::size_t>(i)], c);
          lo = std::min(lo, v);
          hi = std::max(hi, v);
        }
        if (hi - lo > widest) {
          widest = hi - lo;
          axis = c;
        }
      }
      if (widest > 0.0) {
        const Eigen::Index mid = begin + (end - begin) / 2;
        auto first = order_.begin() + begin;
        std::nth_element(first, order_.begin() + mid, order_.begin() + end, [&](Eigen::Index a, Eigen::Index b) {
          return points_(a, axis) < points_(b, axis);
        });
        node.axis = axis;
        node.split = points_(order_[static_cast<std::size_t>(mid)], axis);
        const int id = static_cast<int>(nodes_.size());
        nodes_.push_back(node);
        const int left = build(begin, mid);
        const int right = build(mid, end);
        nodes_[static_cast<std::size_t>(id)].left = left;
        nodes_[static_cast<std::size_t>(id)].right = right;
        return id;
      }
    }
    nodes_.push_back(node);
    return static_cast<int>(nodes_.size()) - 1;
  }

  void search(int id, const double* q, Hit& best) const {
    const Node& node = nodes_[static_cast<std::size_t>(id)];
    if (node.axis < 0) {
      for (Eigen::Index i = node.begin; i < node.end; ++i) {
        const Eigen::Index p = order_[static_cast<std::size_t>(i)];
        const double d = squared_distance(q, points_.row(p).data(), points_.cols());
        if (d < best.squared_distance || (d == best.squared_distance && p < best.index)) {
          best.index = p;
          best.squared_distance = d;
        }
      }
      return;
    }
    // Left holds coordinates <= split, right holds coordinates >= split.
    const double diff = q[node.axis] - node.split;
    const int near = diff < 0.0 ? node.left : node.right;
    const int far = diff < 0.0 ? node.right : node.left;
    search(near, q, best);
    // Points on the far side are at least |diff| away along this axis; the
    // rounded bound never exceeds the rounded full distance, so pruning only
    // on strict excess keeps tie candidates.
    if (diff * diff <= best.squared_distance) search(far, q, best);
  }

  RowMatrix points_;
  Eigen::Index leaf_size_;
  std::vector<Eigen::Index> order_;
  std::vector<Node> nodes_;
  int root_ = -1;
};

}  // namespace fmapkit
