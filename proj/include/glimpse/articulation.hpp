#pragma once

#include "glimpse/gaussian.hpp"
#include "glimpse/knn.hpp"
#include "glimpse/types.hpp"

#include <Eigen/Core>

#include <array>
#include <memory>
#include <vector>

namespace glimpse {

inline constexpr int kSmplJoints = 24;
inline constexpr int kIdwNeighbors = 30;

/// Kinematic tree. Parents precede children; joint 0 is the root.
struct Skeleton {
  std::vector<int> parents;  // parents[0] == -1
  Eigen::Matrix3Xd rest;     // canonical joint positions

  int size() const { return static_cast<int>(parents.size()); }
  /// Throws InvalidParameter unless parents form a topologically ordered tree.
  void validate() const;
};

/// SMPL kinematic tree with caller-supplied rest positions.
Skeleton smpl_skeleton(const Eigen::Matrix3Xd& rest);
const std::array<int, kSmplJoints>& smpl_parents();

struct Pose {
  Eigen::Matrix3Xd axis_angles;  // one column per joint
  Eigen::Vector3d translation = Eigen::Vector3d::Zero();

  static Pose zero(int joints);
  /// Wraps every axis-angle magnitude into [0, 2*pi). Throws on non-finite input.
  Pose normalized() const;
};

Eigen::Matrix3d axis_angle_to_rotation(const Eigen::Vector3d& v);

struct JointTransform {
  Eigen::Matrix3d rotation = Eigen::Matrix3d::Identity();
  Eigen::Vector3d translation = Eigen::Vector3d::Zero();
};

/// Rest-relative forward kinematics: x_posed = R_k x_rest + T_k for points rigidly
/// attached to joint k.
std::vector<JointTransform> joint_transforms(const Skeleton& skel, const Pose& pose);

/// Posed joint positions.
Eigen::Matrix3Xd posed_joints(const Skeleton& skel, const Pose& pose);

struct TemplateMesh {
  Eigen::Matrix3Xd vertices;
  Eigen::MatrixXd weights;  // |V| x joints, rows sum to one
  std::vector<Eigen::Vector3i> faces;

  void validate(int joints) const;
};

/// Inverse-distance blend of the nearest template vertices' weights. The optional
/// Jacobian is joints x 3.
class IdwSkinning {
public:
  explicit IdwSkinning(const TemplateMesh& mesh, int neighbors = kIdwNeighbors);

  Eigen::VectorXd weights(const Eigen::Vector3d& x, Eigen::MatrixXd* jacobian = nullptr) const;
  int joints() const { return static_cast<int>(weights_.cols()); }

private:
  KdTree tree_;
  Eigen::MatrixXd weights_;
  int neighbors_;
};

Eigen::VectorXd compute_vertex_weights(const Eigen::Vector3d& query, const TemplateMesh& mesh);

struct SkinningGrid {
  Eigen::Vector3d origin = Eigen::Vector3d::Zero();  // corner of voxel (0,0,0)
  double voxel = 1.0;
  Eigen::Vector3i dims = Eigen::Vector3i::Ones();
  Eigen::MatrixXd weights;  // joints x voxel count

  Eigen::Index voxel_index(int i, int j, int k) const {
    return (static_cast<Eigen::Index>(k) * dims.y() + j) * dims.x() + i;
  }
  Eigen::Vector3d voxel_center(int i, int j, int k) const {
    return origin + voxel * (Eigen::Vector3d(i, j, k).array() + 0.5).matrix();
  }
  int joints() const { return static_cast<int>(weights.rows()); }

  /// Trilinear blend of the surrounding voxel centers, renormalized. Positions
  /// outside the lattice of centers clamp to it.
  Eigen::VectorXd weights_at(const Eigen::Vector3d& x, Eigen::MatrixXd* jacobian = nullptr) const;
};

/// Grid whose longest padded axis has `resolution` voxels.
SkinningGrid bake_skinning_grid(const TemplateMesh& mesh, int resolution = 64, double padding = 0.1);
/// Grid with explicit dimensions covering the padded bounding box.
SkinningGrid bake_skinning_grid(const TemplateMesh& mesh, const Eigen::Vector3i& dims, double padding = 0.1);

Eigen::VectorXd query_weights(const SkinningGrid& grid, const Eigen::Vector3d& x);

/// Posed cloud plus what the backward pass needs.
struct Deformation {
  GaussianCloud<double> cloud;
  std::vector<JointTransform> transforms;
  std::vector<Eigen::Matrix3d> blend_rotations;  // R_wei per Gaussian
  Eigen::MatrixXd weights;                       // joints x Gaussians
  std::vector<Eigen::MatrixXd> weight_jacobians;  // joints x 3 per Gaussian; empty unless requested
};

struct DeformOptions {
  bool keep_jacobians = true;
};

/// Linear blend skinning of a canonical set. Covariances are blended directly;
/// the canonical quaternions are left untouched.
Deformation deform(const GaussianSet<double>& canonical, const Skeleton& skel, const Pose& pose,
                   const SkinningGrid& grid, DeformOptions options = {});
Deformation deform(const GaussianSet<double>& canonical, const Skeleton& skel, const Pose& pose,
                   const IdwSkinning& skinning, DeformOptions options = {});

/// Gradients of the canonical parameters given gradients of the posed cloud.
GaussianGrads<double> deform_backward(const GaussianSet<double>& canonical, const Deformation& forward,
                                      const CloudGrads<double>& grad);

}  // namespace glimpse
