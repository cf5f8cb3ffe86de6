#pragma once

#include "glimpse/articulation.hpp"
#include "glimpse/camera.hpp"
#include "glimpse/gaussian.hpp"
#include "glimpse/render.hpp"

#include <optional>
#include <vector>

namespace glimpse {

struct Human {
  GaussianSet<double> gaussians{Space::Canonical};
  Skeleton skeleton;
  TemplateMesh mesh;
  SkinningGrid grid;
  std::vector<Pose> track;

  /// Pose for scene frame t. Retargeted tracks shorter or longer than the
  /// scene wrap around.
  const Pose& pose_at(int t) const;
};

struct BackgroundSphere {
  Eigen::Vector3d center = Eigen::Vector3d::Zero();
  double radius = 30.0;
};

struct Scene {
  GaussianSet<double> background{Space::World};
  std::optional<BackgroundSphere> sphere;  // set when the background was initialised as a sphere
  std::vector<std::optional<Human>> humans;  // removed humans leave an empty slot
  std::vector<Camera<double>> cameras;       // one per frame
  int frames = 1;

  int slot_count() const { return static_cast<int>(humans.size()); }
  /// Throws IndexError for out-of-range or removed slots.
  const Human& human(int j) const;
  Human& human(int j);
  void validate() const;
};

/// One Gaussian per point, isotropic scale from the mean 3-NN distance, opacity 0.5.
GaussianSet<double> init_background(const Eigen::Matrix3Xd& points, const Eigen::Matrix3Xd& colors);
/// Fibonacci-lattice sphere of grey Gaussians.
GaussianSet<double> init_background_sphere(const BackgroundSphere& sphere, int count);
/// One grey Gaussian per template vertex, opacity 0.9, identity rotation.
GaussianSet<double> init_human(const TemplateMesh& mesh);

Human make_human(TemplateMesh mesh, Skeleton skeleton, std::vector<Pose> track, int grid_resolution = 64);

/// World-space cloud for one frame: background first, then humans by slot.
struct Composition {
  struct Layer {
    int human;
    Eigen::Index offset, count;
    Deformation deformation;
  };
  GaussianCloud<double> cloud;
  Eigen::Index background_count = 0;
  std::vector<Layer> layers;
};

Composition compose(const Scene& scene, int frame, DeformOptions options = {});
/// Human j alone in the given pose.
Composition compose_human(const Scene& scene, int j, const Pose& pose, DeformOptions options = {});

RenderOutput<double> compose_and_render(const Scene& scene, int frame, const Camera<double>& cam,
                                        const RenderSettings& settings = {});

struct SceneGrads {
  GaussianGrads<double> background;
  std::vector<std::optional<GaussianGrads<double>>> humans;  // parallel to Scene::humans
};

/// Zero gradients shaped like the scene.
SceneGrads zero_grads(const Scene& scene);
/// Accumulates the gradients of a composed cloud into `out`.
void compose_backward(const Scene& scene, const Composition& composition, const CloudGrads<double>& grad,
                      SceneGrads& out);

Scene remove_human(Scene scene, int j);
Scene retarget_motion(Scene scene, int j, std::vector<Pose> track);

}  // namespace glimpse
