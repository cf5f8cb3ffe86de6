#pragma once

#include "glimpse/types.hpp"

#include <Eigen/Geometry>

#include <cmath>

namespace glimpse {

/// Pinhole camera with a world-to-camera rigid transform. Camera frame is
/// x right, y down, z forward; pixel (i, j) is centered at coordinates (i, j).
template <typename Scalar> struct Camera {
  Scalar fx = 1, fy = 1;
  Scalar cx = 0, cy = 0;
  int width = 1, height = 1;
  Mat3<Scalar> rotation = Mat3<Scalar>::Identity();
  Vec3<Scalar> translation = Vec3<Scalar>::Zero();

  void validate() const {
    if (!(fx > 0) || !(fy > 0)) throw InvalidParameter("camera: focal lengths must be positive");
    if (width < 1 || height < 1) throw InvalidParameter("camera: image size must be >= 1");
    if (!rotation.allFinite() || !translation.allFinite() || !std::isfinite(double(cx)) ||
        !std::isfinite(double(cy))) {
      throw InvalidParameter("camera: non-finite parameters");
    }
    const Scalar tol = sizeof(Scalar) == sizeof(float) ? Scalar(1e-5) : Scalar(1e-9);
    if ((rotation * rotation.transpose() - Mat3<Scalar>::Identity()).cwiseAbs().maxCoeff() > tol ||
        rotation.determinant() < 0) {
      throw InvalidParameter("camera: rotation is not orthonormal");
    }
  }

  Vec3<Scalar> to_view(const Vec3<Scalar>& world) const { return rotation * world + translation; }
  Vec3<Scalar> position() const { return -rotation.transpose() * translation; }

  Vec2<Scalar> project(const Vec3<Scalar>& world) const {
    const Vec3<Scalar> t = to_view(world);
    return {fx * t.x() / t.z() + cx, fy * t.y() / t.z() + cy};
  }

  template <typename Other> Camera<Other> cast() const {
    Camera<Other> c;
    c.fx = Other(fx);
    c.fy = Other(fy);
    c.cx = Other(cx);
    c.cy = Other(cy);
    c.width = width;
    c.height = height;
    c.rotation = rotation.template cast<Other>();
    c.translation = translation.template cast<Other>();
    return c;
  }
};

/// Camera at `eye` looking at `target`; `up` is the world up direction.
template <typename Scalar>
Camera<Scalar> look_at(const Vec3<Scalar>& eye, const Vec3<Scalar>& target, const Vec3<Scalar>& up,
                       Scalar focal, int width, int height) {
  const Vec3<Scalar> f = (target - eye).normalized();
  Vec3<Scalar> x = (-up).cross(f);
  if (x.norm() < Scalar(1e-9)) {
    // looking straight along the up axis
    x = Vec3<Scalar>::UnitX().cross(f).cross(f).normalized();
  }
  x.normalize();
  const Vec3<Scalar> y = f.cross(x);
  Camera<Scalar> cam;
  cam.rotation.row(0) = x.transpose();
  cam.rotation.row(1) = y.transpose();
  cam.rotation.row(2) = f.transpose();
  cam.translation = -cam.rotation * eye;
  cam.fx = cam.fy = focal;
  cam.width = width;
  cam.height = height;
  cam.cx = Scalar(width - 1) / Scalar(2);
  cam.cy = Scalar(height - 1) / Scalar(2);
  return cam;
}

}  // namespace glimpse
