#pragma once

#include "glimpse/articulation.hpp"
#include "glimpse/camera.hpp"
#include "glimpse/gaussian.hpp"

#include <cstdint>
#include <vector>

namespace glimpse::synth {

/// SMPL-ordered joint positions of a 1.7 m figure in A-pose, y up, facing +z.
Eigen::Matrix3Xd a_pose_joints();

/// Capsule body over the SMPL skeleton.
struct Body {
  Skeleton skeleton;
  TemplateMesh mesh;
  GaussianSet<double> truth{Space::Canonical};  // coloured ground-truth Gaussians, one per vertex
};

Body make_body(int vertices, std::uint64_t seed);

/// Ground-truth albedo of the synthetic body at a canonical position.
Eigen::Vector3d body_color(const Eigen::Vector3d& x);

/// Per-frame poses: arm and leg swing with a slow turn about the vertical axis.
std::vector<Pose> walk_track(int frames, int joints = kSmplJoints);

/// `n` random coloured Gaussians inside a box of half-size `extent` at `center`.
GaussianSet<double> random_scene(int n, std::uint64_t seed, const Eigen::Vector3d& center = Eigen::Vector3d::Zero(),
                                 double extent = 0.5);

/// Cameras on a horizontal ring around `target`, looking at it.
std::vector<Camera<double>> ring_cameras(int count, const Eigen::Vector3d& target, double radius, double height,
                                         double focal, int width, int height_px, double phase = 0.0);

}  // namespace glimpse::synth
