#include "glimpse/knn.hpp"

#include <algorithm>
#include <cmath>
#include <queue>

namespace glimpse {

namespace {
constexpr std::int32_t kLeafSize = 12;

struct Candidate {
  double d2;
  Eigen::Index index;
  bool operator<(const Candidate& o) const { return d2 != o.d2 ? d2 < o.d2 : index < o.index; }
};
}  // namespace

KdTree::KdTree(Eigen::Matrix3Xd points) : points_(std::move(points)) {
  order_.resize(static_cast<std::size_t>(points_.cols()));
  for (Eigen::Index i = 0; i < points_.cols(); ++i) order_[static_cast<std::size_t>(i)] = i;
  if (points_.cols() > 0) {
    nodes_.reserve(static_cast<std::size_t>(2 * points_.cols() / kLeafSize + 2));
    build(0, static_cast<std::int32_t>(points_.cols()));
  }
}

std::int32_t KdTree::build(std::int32_t begin, std::int32_t end) {
  const auto id = static_cast<std::int32_t>(nodes_.size());
  nodes_.push_back({begin, end});
  if (end - begin <= kLeafSize) return id;
  Eigen::Vector3d lo = Eigen::Vector3d::Constant(INFINITY), hi = Eigen::Vector3d::Constant(-INFINITY);
  for (auto i = begin; i < end; ++i) {
    lo = lo.cwiseMin(points_.col(order_[static_cast<std::size_t>(i)]));
    hi = hi.cwiseMax(points_.col(order_[static_cast<std::size_t>(i)]));
  }
  int axis = 0;
  (hi - lo).maxCoeff(&axis);
  const auto mid = begin + (end - begin) / 2;
  std::nth_element(order_.begin() + begin, order_.begin() + mid, order_.begin() + end,
                   [&](Eigen::Index a, Eigen::Index b) {
                     const double pa = points_(axis, a), pb = points_(axis, b);
                     return pa != pb ? pa < pb : a < b;
                   });
  nodes_[static_cast<std::size_t>(id)].axis = static_cast<std::int8_t>(axis);
  nodes_[static_cast<std::size_t>(id)].split = points_(axis, order_[static_cast<std::size_t>(mid)]);
  const auto left = build(begin, mid);
  const auto right = build(mid, end);
  nodes_[static_cast<std::size_t>(id)].left = left;
  nodes_[static_cast<std::size_t>(id)].right = right;
  return id;
}

std::vector<std::pair<double, Eigen::Index>> KdTree::nearest(const Eigen::Vector3d& query, int k) const {
  std::vector<std::pair<double, Eigen::Index>> out;
  if (nodes_.empty() || k <= 0) return out;
  std::priority_queue<Candidate> heap;  // max-heap of the current best k
  const auto kk = static_cast<std::size_t>(k);

  const auto search = [&](auto&& self, std::int32_t id) -> void {
    const Node& n = nodes_[static_cast<std::size_t>(id)];
    if (n.axis < 0) {
      for (auto i = n.begin; i < n.end; ++i) {
        const Eigen::Index p = order_[static_cast<std::size_t>(i)];
        const Candidate c{(points_.col(p) - query).squaredNorm(), p};
        if (heap.size() < kk) {
          heap.push(c);
        } else if (c < heap.top()) {
          heap.pop();
          heap.push(c);
        }
      }
      return;
    }
    const double delta = query[n.axis] - n.split;
    const auto near_child = delta < 0 ? n.left : n.right;
    const auto far_child = delta < 0 ? n.right : n.left;
    self(self, near_child);
    if (heap.size() < kk || delta * delta <= heap.top().d2) self(self, far_child);
  };
  search(search, 0);

  out.resize(heap.size());
  for (auto i = out.size(); i-- > 0;) {
    out[i] = {heap.top().d2, heap.top().index};
    heap.pop();
  }
  return out;
}

Eigen::VectorXd mean_neighbor_distance(const Eigen::Matrix3Xd& points, int k) {
  const KdTree tree(points);
  Eigen::VectorXd out(points.cols());
  for (Eigen::Index i = 0; i < points.cols(); ++i) {
    const auto nn = tree.nearest(points.col(i), k + 1);
    double sum = 0;
    int count = 0;
    for (const auto& [d2, j] : nn) {
      if (j == i) continue;
      if (count == k) break;
      sum += std::sqrt(d2);
      ++count;
    }
    out[i] = count > 0 ? sum / count : 0.0;
  }
  return out;
}

}  // namespace glimpse
