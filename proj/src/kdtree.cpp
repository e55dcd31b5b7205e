#include "marf/kdtree.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

namespace marf {

namespace {

constexpr int kLeafSize = 8;

double box_distance2(const Vec3& q, const Vec3& lo, const Vec3& hi) {
  const Vec3 d = (lo - q).cwiseMax(q - hi).cwiseMax(0.0);
  return d.squaredNorm();
}

}  // namespace

KdTree::KdTree(std::vector<Vec3> points) : points_(std::move(points)) {
  order_.resize(points_.size());
  std::iota(order_.begin(), order_.end(), 0);
  if (!points_.empty()) build(0, static_cast<int>(points_.size()));
  sorted_.reserve(points_.size());
  for (int i : order_) sorted_.push_back(points_[static_cast<std::size_t>(i)]);
}

int KdTree::build(int first, int count) {
  const int id = static_cast<int>(nodes_.size());
  nodes_.emplace_back();
  Vec3 lo = Vec3::Constant(std::numeric_limits<double>::infinity());
  Vec3 hi = -lo;
  for (int i = first; i < first + count; ++i) {
    lo = lo.cwiseMin(points_[static_cast<std::size_t>(order_[static_cast<std::size_t>(i)])]);
    hi = hi.cwiseMax(points_[static_cast<std::size_t>(order_[static_cast<std::size_t>(i)])]);
  }
  nodes_[static_cast<std::size_t>(id)].lo = lo;
  nodes_[static_cast<std::size_t>(id)].hi = hi;
  if (count <= kLeafSize) {
    nodes_[static_cast<std::size_t>(id)].first = first;
    nodes_[static_cast<std::size_t>(id)].count = count;
    return id;
  }
  int axis = 0;
  (hi - lo).maxCoeff(&axis);
  const int mid = first + count / 2;
  std::nth_element(order_.begin() + first, order_.begin() + mid, order_.begin() + first + count, [&](int a, int b) {
    const double pa = points_[static_cast<std::size_t>(a)][axis], pb = points_[static_cast<std::size_t>(b)][axis];
    return pa < pb || (pa == pb && a < b);
  });
  const int l = build(first, mid - first);
  const int r = build(mid, first + count - mid);
  nodes_[static_cast<std::size_t>(id)].left = l;
  nodes_[static_cast<std::size_t>(id)].right = r;
  return id;
}

void KdTree::search(int node, const Vec3& q, int& best, double& best_d2) const {
  const Node& n = nodes_[static_cast<std::size_t>(node)];
  if (n.left < 0) {
    for (int i = n.first; i < n.first + n.count; ++i) {
      const double d2 = (sorted_[static_cast<std::size_t>(i)] - q).squaredNorm();
      const int idx = order_[static_cast<std::size_t>(i)];
      if (d2 < best_d2 || (d2 == best_d2 && idx < best)) {
        best_d2 = d2;
        best = idx;
      }
    }
    return;
  }
  const Node& l = nodes_[static_cast<std::size_t>(n.left)];
  const Node& r = nodes_[static_cast<std::size_t>(n.right)];
  const double dl = box_distance2(q, l.lo, l.hi);
  const double dr = box_distance2(q, r.lo, r.hi);
  const bool left_first = dl <= dr;
  const int first = left_first ? n.left : n.right, second = left_first ? n.right : n.left;
  const double d_first = left_first ? dl : dr, d_second = left_first ? dr : dl;
  if (d_first <= best_d2) search(first, q, best, best_d2);
  if (d_second <= best_d2) search(second, q, best, best_d2);
}

KdTree::Hit KdTree::nearest(const Vec3& query) const {
  if (nodes_.empty()) return {};
  int best = -1;
  double best_d2 = std::numeric_limits<double>::infinity();
  search(0, query, best, best_d2);
  return {best, std::sqrt(best_d2)};
}

}  // namespace marf
