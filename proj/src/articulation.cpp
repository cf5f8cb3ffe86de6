#include "glimpse/articulation.hpp"

#include <Eigen/Geometry>

#include <cmath>
#include <numbers>
#include <string>

namespace glimpse {

void Skeleton::validate() const {
  if (parents.empty()) throw InvalidParameter("skeleton has no joints");
  if (rest.cols() != size()) {
    throw ShapeMismatch("skeleton rest positions: " + std::to_string(rest.cols()) + " columns for " +
                        std::to_string(size()) + " joints");
  }
  if (parents[0] != -1) throw InvalidParameter("joint 0 must be the root");
  for (int k = 1; k < size(); ++k) {
    if (parents[static_cast<std::size_t>(k)] < 0 || parents[static_cast<std::size_t>(k)] >= k) {
      throw InvalidParameter("joint " + std::to_string(k) + " has parent " +
                             std::to_string(parents[static_cast<std::size_t>(k)]) +
                             "; parents must precede children");
    }
  }
  if (!rest.allFinite()) throw InvalidParameter("non-finite rest joint position");
}

const std::array<int, kSmplJoints>& smpl_parents() {
  static const std::array<int, kSmplJoints> parents{-1, 0,  0,  0,  1,  2,  3,  4,  5,  6,  7,  8,
                                                    9,  9,  9,  12, 13, 14, 16, 17, 18, 19, 20, 21};
  return parents;
}

Skeleton smpl_skeleton(const Eigen::Matrix3Xd& rest) {
  Skeleton s;
  s.parents.assign(smpl_parents().begin(), smpl_parents().end());
  s.rest = rest;
  s.validate();
  return s;
}

Pose Pose::zero(int joints) {
  Pose p;
  p.axis_angles = Eigen::Matrix3Xd::Zero(3, joints);
  return p;
}

Pose Pose::normalized() const {
  if (!axis_angles.allFinite() || !translation.allFinite()) throw InvalidParameter("non-finite pose");
  Pose out = *this;
  constexpr double two_pi = 2 * std::numbers::pi;
  for (Eigen::Index k = 0; k < out.axis_angles.cols(); ++k) {
    const double n = out.axis_angles.col(k).norm();
    if (n >= two_pi) out.axis_angles.col(k) *= std::fmod(n, two_pi) / n;
  }
  return out;
}

Eigen::Matrix3d axis_angle_to_rotation(const Eigen::Vector3d& v) {
  const double angle = v.norm();
  if (angle < 1e-14) return Eigen::Matrix3d::Identity();
  return Eigen::AngleAxisd(angle, v / angle).toRotationMatrix();
}

namespace {

struct Chain {
  std::vector<Eigen::Matrix3d> rotation;  // global
  std::vector<Eigen::Vector3d> position;  // posed joint, before root translation
};

Chain forward_kinematics(const Skeleton& skel, const Pose& pose) {
  skel.validate();
  if (pose.axis_angles.cols() != skel.size()) {
    throw ShapeMismatch("pose has " + std::to_string(pose.axis_angles.cols()) + " joints, skeleton has " +
                        std::to_string(skel.size()));
  }
  const Pose p = pose.normalized();
  const auto n = static_cast<std::size_t>(skel.size());
  Chain c{std::vector<Eigen::Matrix3d>(n), std::vector<Eigen::Vector3d>(n)};
  for (std::size_t k = 0; k < n; ++k) {
    const Eigen::Matrix3d local = axis_angle_to_rotation(p.axis_angles.col(static_cast<Eigen::Index>(k)));
    const int parent = skel.parents[k];
    if (parent < 0) {
      c.rotation[k] = local;
      c.position[k] = skel.rest.col(0);
    } else {
      const auto pi = static_cast<std::size_t>(parent);
      c.rotation[k] = c.rotation[pi] * local;
      c.position[k] = c.rotation[pi] * (skel.rest.col(static_cast<Eigen::Index>(k)) - skel.rest.col(parent)) +
                      c.position[pi];
    }
  }
  return c;
}

}  // namespace

std::vector<JointTransform> joint_transforms(const Skeleton& skel, const Pose& pose) {
  const Chain c = forward_kinematics(skel, pose);
  std::vector<JointTransform> out(c.rotation.size());
  for (std::size_t k = 0; k < out.size(); ++k) {
    out[k].rotation = c.rotation[k];
    out[k].translation =
        c.position[k] - c.rotation[k] * skel.rest.col(static_cast<Eigen::Index>(k)) + pose.translation;
  }
  return out;
}

Eigen::Matrix3Xd posed_joints(const Skeleton& skel, const Pose& pose) {
  const Chain c = forward_kinematics(skel, pose);
  Eigen::Matrix3Xd out(3, skel.size());
  for (int k = 0; k < skel.size(); ++k) out.col(k) = c.position[static_cast<std::size_t>(k)] + pose.translation;
  return out;
}

void TemplateMesh::validate(int joints) const {
  if (vertices.cols() == 0) throw InvalidParameter("template mesh has no vertices");
  if (weights.rows() != vertices.cols() || weights.cols() != joints) {
    throw ShapeMismatch("skinning weights are " + std::to_string(weights.rows()) + "x" +
                        std::to_string(weights.cols()) + ", expected " + std::to_string(vertices.cols()) + "x" +
                        std::to_string(joints));
  }
  if (!vertices.allFinite() || !weights.allFinite()) throw InvalidParameter("non-finite template mesh");
  if ((weights.array() < 0).any()) throw InvalidParameter("negative skinning weight");
  const Eigen::VectorXd sums = weights.rowwise().sum();
  if (((sums.array() - 1).abs() > 1e-6).any()) throw InvalidParameter("skinning weight rows must sum to 1");
  for (const auto& f : faces) {
    if ((f.array() < 0).any() || (f.array() >= vertices.cols()).any()) {
      throw IndexError("face references a missing vertex");
    }
  }
}

IdwSkinning::IdwSkinning(const TemplateMesh& mesh, int neighbors)
    : tree_(mesh.vertices), weights_(mesh.weights), neighbors_(neighbors) {
  if (mesh.vertices.cols() == 0) throw InvalidParameter("template mesh has no vertices");
  if (weights_.rows() != mesh.vertices.cols()) throw ShapeMismatch("one weight row per vertex required");
}

Eigen::VectorXd IdwSkinning::weights(const Eigen::Vector3d& x, Eigen::MatrixXd* jacobian) const {
  const auto nn = tree_.nearest(x, neighbors_);
  const auto joints = weights_.cols();
  if (jacobian) jacobian->setZero(joints, 3);
  if (nn.front().first < 1e-16) return weights_.row(nn.front().second).transpose();  // d < 1e-8

  Eigen::VectorXd acc = Eigen::VectorXd::Zero(joints);
  Eigen::MatrixXd dacc;
  Eigen::RowVector3d dnorm = Eigen::RowVector3d::Zero();
  if (jacobian) dacc.setZero(joints, 3);
  double norm = 0;
  for (const auto& [d2, v] : nn) {
    const double d = std::sqrt(d2);
    const double a = 1.0 / d;
    acc += a * weights_.row(v).transpose();
    norm += a;
    if (jacobian) {
      // d(1/d)/dx = -(x - v) / d^3
      const Eigen::RowVector3d da = -(x - tree_.points().col(v)).transpose() * (a * a * a);
      dacc += weights_.row(v).transpose() * da;
      dnorm += da;
    }
  }
  const Eigen::VectorXd w = acc / norm;
  if (jacobian) *jacobian = (dacc - w * dnorm) / norm;
  return w;
}

Eigen::VectorXd compute_vertex_weights(const Eigen::Vector3d& query, const TemplateMesh& mesh) {
  return IdwSkinning(mesh).weights(query);
}

namespace {

SkinningGrid bake(const TemplateMesh& mesh, const Eigen::Vector3d& lo, const Eigen::Vector3d& hi,
                  const Eigen::Vector3i& dims, double voxel) {
  SkinningGrid g;
  g.dims = dims;
  g.voxel = voxel;
  g.origin = 0.5 * (lo + hi) - 0.5 * voxel * dims.cast<double>();
  const IdwSkinning idw(mesh);
  const Eigen::Index count = static_cast<Eigen::Index>(dims.x()) * dims.y() * dims.z();
  g.weights.resize(mesh.weights.cols(), count);
#pragma omp parallel for schedule(dynamic, 256)
  for (Eigen::Index v = 0; v < count; ++v) {
    const int i = static_cast<int>(v % dims.x());
    const int j = static_cast<int>((v / dims.x()) % dims.y());
    const int k = static_cast<int>(v / (static_cast<Eigen::Index>(dims.x()) * dims.y()));
    g.weights.col(v) = idw.weights(g.voxel_center(i, j, k));
  }
  return g;
}

std::pair<Eigen::Vector3d, Eigen::Vector3d> padded_bounds(const TemplateMesh& mesh, double padding) {
  if (mesh.vertices.cols() == 0) throw InvalidParameter("template mesh has no vertices");
  if (!(padding >= 0)) throw InvalidParameter("grid padding must be nonnegative");
  const Eigen::Vector3d lo = mesh.vertices.rowwise().minCoeff().array() - padding;
  const Eigen::Vector3d hi = mesh.vertices.rowwise().maxCoeff().array() + padding;
  return {lo, hi};
}

}  // namespace

SkinningGrid bake_skinning_grid(const TemplateMesh& mesh, int resolution, double padding) {
  if (resolution < 1) throw InvalidParameter("grid resolution must be positive");
  const auto [lo, hi] = padded_bounds(mesh, padding);
  const Eigen::Vector3d extent = hi - lo;
  const double voxel = std::max(extent.maxCoeff(), 1e-9) / resolution;
  Eigen::Vector3i dims;
  for (int a = 0; a < 3; ++a) dims[a] = std::max(1, static_cast<int>(std::ceil(extent[a] / voxel - 1e-9)));
  return bake(mesh, lo, hi, dims, voxel);
}

SkinningGrid bake_skinning_grid(const TemplateMesh& mesh, const Eigen::Vector3i& dims, double padding) {
  if ((dims.array() < 1).any()) throw InvalidParameter("grid dimensions must be positive");
  const auto [lo, hi] = padded_bounds(mesh, padding);
  const Eigen::Vector3d extent = hi - lo;
  const double voxel = std::max((extent.array() / dims.cast<double>().array()).maxCoeff(), 1e-9);
  return bake(mesh, lo, hi, dims, voxel);
}

Eigen::VectorXd SkinningGrid::weights_at(const Eigen::Vector3d& x, Eigen::MatrixXd* jacobian) const {
  // continuous lattice coordinates: voxel center (i,j,k) sits at u = (i,j,k)
  std::array<int, 3> i0{}, i1{};
  Eigen::Vector3d f, df;
  for (int a = 0; a < 3; ++a) {
    const double u = (x[a] - origin[a]) / voxel - 0.5;
    const int n = dims[a];
    df[a] = (u > 0 && u < n - 1) ? 1.0 / voxel : 0.0;
    const double uc = std::clamp(u, 0.0, static_cast<double>(n - 1));
    const int base = std::min(static_cast<int>(std::floor(uc)), std::max(n - 2, 0));
    i0[static_cast<std::size_t>(a)] = base;
    i1[static_cast<std::size_t>(a)] = std::min(base + 1, n - 1);
    f[a] = n > 1 ? uc - base : 0.0;
  }
  Eigen::VectorXd t = Eigen::VectorXd::Zero(joints());
  Eigen::MatrixXd dt;
  if (jacobian) dt.setZero(joints(), 3);
  for (int corner = 0; corner < 8; ++corner) {
    const int bx = corner & 1, by = (corner >> 1) & 1, bz = (corner >> 2) & 1;
    const double wx = bx ? f.x() : 1 - f.x();
    const double wy = by ? f.y() : 1 - f.y();
    const double wz = bz ? f.z() : 1 - f.z();
    const double c = wx * wy * wz;
    const auto col = weights.col(voxel_index(bx ? i1[0] : i0[0], by ? i1[1] : i0[1], bz ? i1[2] : i0[2]));
    t += c * col;
    if (jacobian) {
      const double sx = bx ? 1 : -1, sy = by ? 1 : -1, sz = bz ? 1 : -1;
      dt.col(0) += (sx * wy * wz * df.x()) * col;
      dt.col(1) += (wx * sy * wz * df.y()) * col;
      dt.col(2) += (wx * wy * sz * df.z()) * col;
    }
  }
  const double s = t.sum();
  const Eigen::VectorXd w = t / s;
  if (jacobian) *jacobian = (dt - w * dt.colwise().sum()) / s;
  return w;
}

Eigen::VectorXd query_weights(const SkinningGrid& grid, const Eigen::Vector3d& x) { return grid.weights_at(x); }

namespace {

template <typename Field>
Deformation deform_impl(const GaussianSet<double>& canonical, const Skeleton& skel, const Pose& pose,
                        const Field& field, DeformOptions options) {
  if (canonical.space() != Space::Canonical) throw ContractViolation("deform expects a canonical-space set");
  if (field.joints() != skel.size()) {
    throw ShapeMismatch("skinning field has " + std::to_string(field.joints()) + " joints, skeleton has " +
                        std::to_string(skel.size()));
  }
  Deformation out;
  out.transforms = joint_transforms(skel, pose);
  const auto n = canonical.size();
  const auto joints = skel.size();
  out.cloud.resize(n);
  out.cloud.colors = canonical.colors;
  out.blend_rotations.resize(static_cast<std::size_t>(n));
  out.weights.resize(joints, n);
  if (options.keep_jacobians) out.weight_jacobians.resize(static_cast<std::size_t>(n));

#pragma omp parallel for schedule(static)
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto si = static_cast<std::size_t>(i);
    const Eigen::Vector3d xc = canonical.centers.col(i);
    Eigen::MatrixXd jac;
    const Eigen::VectorXd w = field.weights_at(xc, options.keep_jacobians ? &jac : nullptr);
    Eigen::Vector3d xp = Eigen::Vector3d::Zero();
    Eigen::Matrix3d a = Eigen::Matrix3d::Zero();
    for (int k = 0; k < joints; ++k) {
      if (w[k] == 0) continue;
      const auto& tk = out.transforms[static_cast<std::size_t>(k)];
      xp += w[k] * (tk.rotation * xc + tk.translation);
      a += w[k] * tk.rotation;
    }
    const Eigen::Matrix3d cov = a * canonical.covariance(i) * a.transpose();
    out.cloud.centers.col(i) = xp;
    out.cloud.covariances[si] = 0.5 * (cov + cov.transpose());
    out.cloud.opacities[i] = canonical.opacity(i);
    out.blend_rotations[si] = a;
    out.weights.col(i) = w;
    if (options.keep_jacobians) out.weight_jacobians[si] = std::move(jac);
  }
  return out;
}

struct IdwField {
  const IdwSkinning& idw;
  int joints() const { return idw.joints(); }
  Eigen::VectorXd weights_at(const Eigen::Vector3d& x, Eigen::MatrixXd* jac) const { return idw.weights(x, jac); }
};

}  // namespace

Deformation deform(const GaussianSet<double>& canonical, const Skeleton& skel, const Pose& pose,
                   const SkinningGrid& grid, DeformOptions options) {
  return deform_impl(canonical, skel, pose, grid, options);
}

Deformation deform(const GaussianSet<double>& canonical, const Skeleton& skel, const Pose& pose,
                   const IdwSkinning& skinning, DeformOptions options) {
  return deform_impl(canonical, skel, pose, IdwField{skinning}, options);
}

GaussianGrads<double> deform_backward(const GaussianSet<double>& canonical, const Deformation& forward,
                                      const CloudGrads<double>& grad) {
  const auto n = canonical.size();
  if (grad.size() != n || forward.cloud.size() != n) throw ShapeMismatch("deform_backward: size mismatch");
  const bool with_weights = !forward.weight_jacobians.empty();
  const auto joints = static_cast<int>(forward.transforms.size());
  Eigen::Matrix3Xd d_centers(3, n);
  std::vector<Eigen::Matrix3d> d_covs(static_cast<std::size_t>(n));

#pragma omp parallel for schedule(static)
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto si = static_cast<std::size_t>(i);
    const Eigen::Vector3d gx = grad.centers.col(i);
    const Eigen::Matrix3d& g = grad.covariances[si];
    const Eigen::Matrix3d& a = forward.blend_rotations[si];
    const Eigen::Matrix3d cov_c = canonical.covariance(i);
    d_covs[si] = a.transpose() * g * a;
    Eigen::Vector3d dx = a.transpose() * gx;
    if (with_weights) {
      const Eigen::Matrix3d da = (g + g.transpose()) * a * cov_c;
      const Eigen::Vector3d xc = canonical.centers.col(i);
      Eigen::VectorXd dw(joints);
      for (int k = 0; k < joints; ++k) {
        const auto& tk = forward.transforms[static_cast<std::size_t>(k)];
        dw[k] = gx.dot(tk.rotation * xc + tk.translation) + (da.array() * tk.rotation.array()).sum();
      }
      dx += forward.weight_jacobians[si].transpose() * dw;
    }
    d_centers.col(i) = dx;
  }
  return params_backward<double>(canonical, d_centers, d_covs, grad.colors, grad.opacities);
}

}  // namespace glimpse
