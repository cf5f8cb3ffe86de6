#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <utility>
#include <vector>

namespace glimpse {

/// Static k-d tree over a 3D point set for k-nearest-neighbour queries.
class KdTree {
public:
  KdTree() = default;
  explicit KdTree(Eigen::Matrix3Xd points);

  /// (squared distance, point index) of the k nearest points, ascending;
  /// equal distances are ordered by index.
  std::vector<std::pair<double, Eigen::Index>> nearest(const Eigen::Vector3d& query, int k) const;

  const Eigen::Matrix3Xd& points() const { return points_; }
  Eigen::Index size() const { return points_.cols(); }

private:
  struct Node {
    std::int32_t begin, end;  // range into order_
    std::int32_t left = -1, right = -1;
    std::int8_t axis = -1;
    double split = 0;
  };

  std::int32_t build(std::int32_t begin, std::int32_t end);

  Eigen::Matrix3Xd points_;
  std::vector<Eigen::Index> order_;
  std::vector<Node> nodes_;
};

/// Mean distance from each point to its `k` nearest other points.
Eigen::VectorXd mean_neighbor_distance(const Eigen::Matrix3Xd& points, int k = 3);

}  // namespace glimpse
