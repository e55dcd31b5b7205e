#pragma once

#include <vector>

#include "marf/geometry.hpp"

namespace marf {

/// Exact nearest-neighbour index over a fixed 3-D point set.
class KdTree {
 public:
  KdTree() = default;
  explicit KdTree(std::vector<Vec3> points);

  struct Hit {
    int index = -1;
    double distance = 0.0;
  };

  /// Nearest stored point (lowest index on ties); index -1 when the tree is empty.
  Hit nearest(const Vec3& query) const;

  bool empty() const { return points_.empty(); }
  std::size_t size() const { return points_.size(); }
  const std::vector<Vec3>& points() const { return points_; }

 private:
  struct Node {
    Vec3 lo, hi;
    int left = -1, right = -1;
    int first = 0, count = 0;  // leaf range in order_
  };

  int build(int first, int count);
  void search(int node, const Vec3& q, int& best, double& best_d2) const;

  std::vector<Vec3> points_;
  std::vector<int> order_;
  std::vector<Vec3> sorted_;  // points_ in order_, for locality
  std::vector<Node> nodes_;
};

}  // namespace marf
