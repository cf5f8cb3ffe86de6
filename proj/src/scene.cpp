#include "glimpse/scene.hpp"

#include "glimpse/knn.hpp"

#include <cmath>
#include <numbers>
#include <string>
#include <utility>

namespace glimpse {

const Pose& Human::pose_at(int t) const {
  if (track.empty()) throw ContractViolation("human has an empty pose track");
  return track[static_cast<std::size_t>(t) % track.size()];
}

const Human& Scene::human(int j) const {
  if (j < 0 || j >= slot_count()) {
    throw IndexError("human index " + std::to_string(j) + " out of range [0, " + std::to_string(slot_count()) + ")");
  }
  if (!humans[static_cast<std::size_t>(j)]) throw IndexError("human " + std::to_string(j) + " was removed");
  return *humans[static_cast<std::size_t>(j)];
}

Human& Scene::human(int j) { return const_cast<Human&>(std::as_const(*this).human(j)); }

void Scene::validate() const {
  if (frames < 1) throw InvalidParameter("scene needs at least one frame");
  if (!cameras.empty() && static_cast<int>(cameras.size()) != frames) {
    throw CountMismatch("scene has " + std::to_string(frames) + " frames but " + std::to_string(cameras.size()) +
                        " cameras");
  }
  if (background.space() != Space::World) throw ContractViolation("background must be in world space");
  for (int j = 0; j < slot_count(); ++j) {
    if (!humans[static_cast<std::size_t>(j)]) continue;
    const Human& h = *humans[static_cast<std::size_t>(j)];
    if (h.gaussians.space() != Space::Canonical) throw ContractViolation("human Gaussians must be canonical");
    if (h.track.empty()) throw CountMismatch("human " + std::to_string(j) + " has no poses");
    if (h.grid.joints() != h.skeleton.size()) throw ShapeMismatch("skinning grid / skeleton joint count differ");
  }
}

namespace {

Eigen::VectorXd isotropic_log_scales(const Eigen::Matrix3Xd& points) {
  if (points.cols() == 1) return Eigen::VectorXd::Constant(1, std::log(0.01));
  const Eigen::VectorXd d = mean_neighbor_distance(points, 3);
  return d.cwiseMax(1e-4).array().log();
}

}  // namespace

GaussianSet<double> init_background(const Eigen::Matrix3Xd& points, const Eigen::Matrix3Xd& colors) {
  if (points.cols() == 0) throw InvalidParameter("background point cloud is empty");
  if (colors.cols() != points.cols()) throw ShapeMismatch("one colour per background point required");
  GaussianParams<double> p;
  p.resize(points.cols());
  p.centers = points;
  p.colors = colors;
  p.rotations.colwise() = identity_quat<double>();
  p.log_scales.rowwise() = isotropic_log_scales(points).transpose();
  p.opacity_logits.setConstant(logit(0.5));
  return GaussianSet<double>(Space::World, std::move(p));
}

GaussianSet<double> init_background_sphere(const BackgroundSphere& sphere, int count) {
  if (count < 1) throw InvalidParameter("sphere background needs at least one point");
  if (!(sphere.radius > 0)) throw InvalidParameter("sphere radius must be positive");
  Eigen::Matrix3Xd points(3, count);
  const double golden = std::numbers::pi * (3.0 - std::sqrt(5.0));
  for (int i = 0; i < count; ++i) {
    const double y = 1.0 - 2.0 * (i + 0.5) / count;
    const double r = std::sqrt(std::max(0.0, 1.0 - y * y));
    const double phi = golden * i;
    points.col(i) = sphere.center + sphere.radius * Eigen::Vector3d(r * std::cos(phi), y, r * std::sin(phi));
  }
  return init_background(points, Eigen::Matrix3Xd::Constant(3, count, 0.5));
}

GaussianSet<double> init_human(const TemplateMesh& mesh) {
  if (mesh.vertices.cols() == 0) throw InvalidParameter("template mesh has no vertices");
  GaussianParams<double> p;
  p.resize(mesh.vertices.cols());
  p.centers = mesh.vertices;
  p.colors.setConstant(0.5);
  p.rotations.colwise() = identity_quat<double>();
  p.log_scales.rowwise() = isotropic_log_scales(mesh.vertices).transpose();
  p.opacity_logits.setConstant(logit(0.9));
  return GaussianSet<double>(Space::Canonical, std::move(p));
}

Human make_human(TemplateMesh mesh, Skeleton skeleton, std::vector<Pose> track, int grid_resolution) {
  skeleton.validate();
  mesh.validate(skeleton.size());
  Human h;
  h.gaussians = init_human(mesh);
  h.grid = bake_skinning_grid(mesh, grid_resolution);
  h.skeleton = std::move(skeleton);
  h.mesh = std::move(mesh);
  h.track = std::move(track);
  if (h.track.empty()) h.track.push_back(Pose::zero(h.skeleton.size()));
  return h;
}

namespace {

void append_human(const Human& h, int j, const Pose& pose, DeformOptions options, Composition& c) {
  Composition::Layer layer{j, c.cloud.size(), h.gaussians.size(),
                           deform(h.gaussians, h.skeleton, pose, h.grid, options)};
  c.cloud.append(layer.deformation.cloud);
  c.layers.push_back(std::move(layer));
}

}  // namespace

Composition compose(const Scene& scene, int frame, DeformOptions options) {
  if (frame < 0 || frame >= scene.frames) {
    throw IndexError("frame " + std::to_string(frame) + " out of range [0, " + std::to_string(scene.frames) + ")");
  }
  Composition c;
  c.cloud = make_cloud(scene.background);
  c.background_count = scene.background.size();
  for (int j = 0; j < scene.slot_count(); ++j) {
    if (!scene.humans[static_cast<std::size_t>(j)]) continue;
    const Human& h = *scene.humans[static_cast<std::size_t>(j)];
    append_human(h, j, h.pose_at(frame), options, c);
  }
  return c;
}

Composition compose_human(const Scene& scene, int j, const Pose& pose, DeformOptions options) {
  Composition c;
  append_human(scene.human(j), j, pose, options, c);
  return c;
}

RenderOutput<double> compose_and_render(const Scene& scene, int frame, const Camera<double>& cam,
                                        const RenderSettings& settings) {
  return render(compose(scene, frame, {false}).cloud, cam, settings);
}

SceneGrads zero_grads(const Scene& scene) {
  SceneGrads g;
  g.background.set_zero(scene.background.size());
  g.humans.resize(scene.humans.size());
  for (std::size_t j = 0; j < scene.humans.size(); ++j) {
    if (!scene.humans[j]) continue;
    g.humans[j].emplace();
    g.humans[j]->set_zero(scene.humans[j]->gaussians.size());
  }
  return g;
}

void compose_backward(const Scene& scene, const Composition& composition, const CloudGrads<double>& grad,
                      SceneGrads& out) {
  if (grad.size() != composition.cloud.size()) throw ShapeMismatch("cloud gradient size mismatch");
  if (composition.background_count > 0) {
    out.background += params_backward(scene.background, grad.slice(0, composition.background_count));
  }
  for (const auto& layer : composition.layers) {
    const Human& h = scene.human(layer.human);
    auto& target = out.humans.at(static_cast<std::size_t>(layer.human));
    if (!target) throw ShapeMismatch("gradient slot missing for human " + std::to_string(layer.human));
    *target += deform_backward(h.gaussians, layer.deformation, grad.slice(layer.offset, layer.count));
  }
}

Scene remove_human(Scene scene, int j) {
  scene.human(j);  // validates the index
  scene.humans[static_cast<std::size_t>(j)].reset();
  return scene;
}

Scene retarget_motion(Scene scene, int j, std::vector<Pose> track) {
  Human& h = scene.human(j);
  if (track.empty()) throw InvalidParameter("retarget track must contain at least one pose");
  for (const auto& p : track) {
    if (p.axis_angles.cols() != h.skeleton.size()) {
      throw ShapeMismatch("retarget pose has " + std::to_string(p.axis_angles.cols()) + " joints, human " +
                          std::to_string(j) + " has " + std::to_string(h.skeleton.size()));
    }
  }
  h.track = std::move(track);
  return scene;
}

}  // namespace glimpse
