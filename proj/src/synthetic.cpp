#include "glimpse/synthetic.hpp"

#include "glimpse/knn.hpp"
#include "glimpse/scene.hpp"

#include <Eigen/Geometry>

#include <cmath>
#include <numbers>
#include <random>

namespace glimpse::synth {

namespace {

constexpr double kPi = std::numbers::pi;

struct Capsule {
  int a, b;  // joint endpoints (b < 0: sphere at a, lifted by `lift`)
  double radius;
  int owner;
  double lift = 0;
};

// Segments follow the bones; each is driven by the bone's parent joint.
const std::vector<Capsule>& capsules() {
  static const std::vector<Capsule> c{
      {0, 3, 0.13, 0},    {1, 2, 0.10, 0},    {3, 6, 0.13, 3},    {6, 9, 0.14, 6},    {9, 12, 0.11, 9},
      {12, 16, 0.06, 13}, {12, 17, 0.06, 14}, {12, 15, 0.05, 12}, {15, -1, 0.10, 15, 0.06},
      {1, 4, 0.075, 1},   {2, 5, 0.075, 2},   {4, 7, 0.05, 4},    {5, 8, 0.05, 5},    {7, 10, 0.045, 7},
      {8, 11, 0.045, 8},  {16, 18, 0.045, 16}, {17, 19, 0.045, 17}, {18, 20, 0.04, 18}, {19, 21, 0.04, 19},
      {20, 22, 0.035, 20}, {21, 23, 0.035, 21},
  };
  return c;
}

std::pair<Eigen::Vector3d, Eigen::Vector3d> endpoints(const Capsule& c, const Eigen::Matrix3Xd& joints) {
  const Eigen::Vector3d a = joints.col(c.a);
  if (c.b < 0) {
    const Eigen::Vector3d p = a + Eigen::Vector3d(0, c.lift, 0);
    return {p, p};
  }
  return {a, joints.col(c.b)};
}

double segment_distance(const Eigen::Vector3d& x, const Eigen::Vector3d& a, const Eigen::Vector3d& b) {
  const Eigen::Vector3d ab = b - a;
  const double len2 = ab.squaredNorm();
  const double s = len2 > 0 ? std::clamp((x - a).dot(ab) / len2, 0.0, 1.0) : 0.0;
  return (x - (a + s * ab)).norm();
}

Eigen::Vector3d mix(const Eigen::Vector3d& a, const Eigen::Vector3d& b, double t) { return a + t * (b - a); }

}  // namespace

Eigen::Matrix3Xd a_pose_joints() {
  const double c = std::cos(kPi / 4), s = std::sin(kPi / 4);
  const double ex = 0.18 + 0.26 * c, ey = 1.42 - 0.26 * s;
  const double wx = ex + 0.22 * c, wy = ey - 0.22 * s;
  const double hx = wx + 0.08 * c, hy = wy - 0.08 * s;
  Eigen::Matrix3Xd j(3, kSmplJoints);
  const double xs[kSmplJoints] = {0,     0.09,  -0.09, 0,    0.10, -0.10, 0,    0.10, -0.10, 0,   0.11, -0.11,
                                  0,     0.07,  -0.07, 0,    0.18, -0.18, ex,   -ex,  wx,    -wx, hx,   -hx};
  const double ys[kSmplJoints] = {0.93, 0.85, 0.85, 1.05, 0.48, 0.48, 1.18, 0.08, 0.08, 1.25, 0.02, 0.02,
                                  1.48, 1.40, 1.40, 1.58, 1.42, 1.42, ey,   ey,   wy,   wy,   hy,   hy};
  for (int k = 0; k < kSmplJoints; ++k) j.col(k) = Eigen::Vector3d(xs[k], ys[k], (k == 10 || k == 11) ? 0.10 : 0.0);
  return j;
}

Eigen::Vector3d body_color(const Eigen::Vector3d& x) {
  const Eigen::Vector3d skin(0.85, 0.64, 0.50), hair(0.22, 0.13, 0.08), shirt(0.16, 0.32, 0.78),
      shirt_light(0.55, 0.70, 0.95), badge(0.95, 0.82, 0.15), pants(0.58, 0.20, 0.14), shoes(0.08, 0.08, 0.10);
  if (x.y() > 1.66) return hair;
  if (x.y() > 1.50) return skin;
  if (x.y() > 0.93) {
    if (std::abs(x.x()) > 0.48) return skin;  // hands
    if (x.z() > 0.06 && std::abs(x.x()) < 0.07 && x.y() > 1.20 && x.y() < 1.34) return badge;
    return mix(shirt, shirt_light, 0.5 + 0.5 * std::sin(22.0 * x.y()));
  }
  if (x.y() > 0.12) return mix(pants, Eigen::Vector3d(0.35, 0.12, 0.30), 0.5 + 0.5 * std::sin(14.0 * x.y() + 3 * x.x()));
  return shoes;
}

Body make_body(int vertices, std::uint64_t seed) {
  if (vertices < 1) throw InvalidParameter("body needs at least one vertex");
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::normal_distribution<double> n(0.0, 1.0);
  Body body;
  body.skeleton = smpl_skeleton(a_pose_joints());
  const Eigen::Matrix3Xd& joints = body.skeleton.rest;
  const auto& caps = capsules();

  std::vector<double> area;
  double total = 0;
  for (const auto& c : caps) {
    const auto [a, b] = endpoints(c, joints);
    total += 2 * kPi * c.radius * (b - a).norm() + 4 * kPi * c.radius * c.radius;
    area.push_back(total);
  }

  body.mesh.vertices.resize(3, vertices);
  body.mesh.weights = Eigen::MatrixXd::Zero(vertices, kSmplJoints);
  for (int v = 0; v < vertices; ++v) {
    const double pick = u(rng) * total;
    const auto ci = static_cast<std::size_t>(std::lower_bound(area.begin(), area.end(), pick) - area.begin());
    const Capsule& c = caps[std::min(ci, caps.size() - 1)];
    const auto [a, b] = endpoints(c, joints);
    const double len = (b - a).norm();
    Eigen::Vector3d dir(n(rng), n(rng), n(rng));
    dir.normalize();
    Eigen::Vector3d p;
    if (len > 0 && u(rng) * (len + 2 * c.radius) < len) {
      const Eigen::Vector3d axis = (b - a) / len;
      const Eigen::Vector3d radial = (dir - dir.dot(axis) * axis).normalized();
      p = a + u(rng) * (b - a) + c.radius * radial;
    } else {
      const bool at_b = len > 0 && u(rng) < 0.5;
      const Eigen::Vector3d base = at_b ? b : a;
      if (len > 0) {
        const Eigen::Vector3d out = at_b ? (b - a) / len : (a - b) / len;
        if (dir.dot(out) < 0) dir -= 2 * dir.dot(out) * out;
      }
      p = base + c.radius * dir;
    }
    body.mesh.vertices.col(v) = p;

    Eigen::VectorXd w = Eigen::VectorXd::Zero(kSmplJoints);
    constexpr double sigma = 0.035;
    for (const auto& other : caps) {
      const auto [oa, ob] = endpoints(other, joints);
      const double d = segment_distance(p, oa, ob) - other.radius;
      w[other.owner] += std::exp(-0.5 * d * d / (sigma * sigma));
    }
    w = (w.array() < 1e-6 * w.maxCoeff()).select(0.0, w);
    body.mesh.weights.row(v) = (w / w.sum()).transpose();
  }

  GaussianSet<double> truth = init_human(body.mesh);
  for (int v = 0; v < vertices; ++v) truth.colors.col(v) = body_color(body.mesh.vertices.col(v));
  truth.opacity_logits.setConstant(logit(0.95));
  truth.log_scales.array() += std::log(1.2);
  body.truth = std::move(truth);
  return body;
}

std::vector<Pose> walk_track(int frames, int joints) {
  std::vector<Pose> track;
  for (int t = 0; t < frames; ++t) {
    Pose p = Pose::zero(joints);
    const double phi = 2 * kPi * t / 20.0;
    const double swing = std::sin(phi);
    if (joints == kSmplJoints) {
      p.axis_angles.col(0) = Eigen::Vector3d(0, 0.05 * t, 0);
      p.axis_angles.col(1) = Eigen::Vector3d(-0.4 * swing, 0, 0);
      p.axis_angles.col(2) = Eigen::Vector3d(0.4 * swing, 0, 0);
      p.axis_angles.col(4) = Eigen::Vector3d(0.6 * std::max(0.0, swing), 0, 0);
      p.axis_angles.col(5) = Eigen::Vector3d(0.6 * std::max(0.0, -swing), 0, 0);
      p.axis_angles.col(16) = Eigen::Vector3d(0.35 * swing, 0, 0);
      p.axis_angles.col(17) = Eigen::Vector3d(-0.35 * swing, 0, 0);
      p.axis_angles.col(18) = Eigen::Vector3d(0, 0.3 * (1 + swing), 0);
      p.axis_angles.col(19) = Eigen::Vector3d(0, -0.3 * (1 - swing), 0);
    }
    track.push_back(p);
  }
  return track;
}

GaussianSet<double> random_scene(int n, std::uint64_t seed, const Eigen::Vector3d& center, double extent) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-1.0, 1.0), col(0.05, 0.95), op(0.5, 3.0),
      logs(std::log(0.04 * extent), std::log(0.12 * extent));
  std::normal_distribution<double> nq(0.0, 1.0);
  GaussianSet<double> set(Space::World);
  for (int i = 0; i < n; ++i) {
    Gaussian3D<double> g;
    g.center = center + extent * Eigen::Vector3d(u(rng), u(rng), u(rng));
    g.rotation = Quat<double>(nq(rng), nq(rng), nq(rng), nq(rng)).normalized();
    g.log_scale = Eigen::Vector3d(logs(rng), logs(rng), logs(rng));
    g.color = Eigen::Vector3d(col(rng), col(rng), col(rng));
    g.opacity_logit = op(rng);
    set.push_back(g);
  }
  return set;
}

std::vector<Camera<double>> ring_cameras(int count, const Eigen::Vector3d& target, double radius, double height,
                                         double focal, int width, int height_px, double phase) {
  std::vector<Camera<double>> cams;
  for (int i = 0; i < count; ++i) {
    const double a = phase + 2 * kPi * i / count;
    const Eigen::Vector3d eye = target + Eigen::Vector3d(radius * std::sin(a), height, radius * std::cos(a));
    cams.push_back(look_at<double>(eye, target, Eigen::Vector3d::UnitY(), focal, width, height_px));
  }
  return cams;
}

}  // namespace glimpse::synth
