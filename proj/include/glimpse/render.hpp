#pragma once

#include "glimpse/camera.hpp"
#include "glimpse/gaussian.hpp"

#include <cstdint>
#include <memory>
#include <vector>

namespace glimpse {

struct RenderSettings {
  Eigen::Vector3d background = Eigen::Vector3d::Zero();
  double near_plane = 0.01;
  /// Added to the diagonal of every projected covariance (pixels^2).
  double low_pass = 0.3;
  /// Contributions with alpha below this are skipped.
  double min_alpha = 1.0 / 255.0;
  /// A pixel stops compositing once its transmittance would drop below this.
  double min_transmittance = 1e-4;
  int tile_size = 16;
};

/// A Gaussian projected to the image plane.
template <typename Scalar> struct Splat2D {
  Vec2<Scalar> mean;
  /// Projected covariance after low-pass dilation.
  Mat2<Scalar> cov;
  /// Inverse of `cov` as (a, b, c) for [[a, b], [b, c]].
  Vec3<Scalar> conic;
  Vec3<Scalar> view;
  Scalar depth = 0;
  /// Screen radius beyond which alpha is below the skip threshold.
  Scalar radius = 0;
  Eigen::Index index = 0;
};

template <typename Scalar>
std::vector<Splat2D<Scalar>> project(const GaussianCloud<Scalar>& cloud, const Camera<Scalar>& cam,
                                     const RenderSettings& settings = {});

/// Ascending depth, ties broken by source index.
template <typename Scalar> std::vector<Splat2D<Scalar>> sort_by_depth(std::vector<Splat2D<Scalar>> splats);

/// Everything the backward pass needs from a forward pass.
template <typename Scalar> struct RasterState {
  struct Packed {
    Scalar mx, my, a, b, c, opacity, min_power;
    Scalar color[3];
  };

  Camera<Scalar> camera;
  RenderSettings settings;
  Eigen::Index cloud_size = 0;
  int tiles_x = 0, tiles_y = 0;
  std::vector<Splat2D<Scalar>> splats;  // sorted front to back
  std::vector<Packed> packed;           // parallel to `splats`
  std::vector<Mat3<Scalar>> world_covariances;  // parallel to `splats`
  std::vector<std::uint32_t> tile_offsets;
  std::vector<std::uint32_t> tile_entries;  // positions into `splats`
  std::vector<Scalar> final_transmittance;  // per pixel
  std::vector<std::uint32_t> last_entry;    // per pixel, one past the last contributor
};

template <typename Scalar> struct RenderOutput {
  Image<Scalar> color;  // 3 channels
  Image<Scalar> alpha;  // 1 channel
  std::shared_ptr<const RasterState<Scalar>> state;
};

/// Front-to-back alpha compositing of depth-sorted splats over tiles.
template <typename Scalar>
RenderOutput<Scalar> rasterize(const std::vector<Splat2D<Scalar>>& sorted_splats,
                               const GaussianCloud<Scalar>& cloud, const Camera<Scalar>& cam,
                               const RenderSettings& settings = {});

/// project + sort_by_depth + rasterize.
template <typename Scalar>
RenderOutput<Scalar> render(const GaussianCloud<Scalar>& cloud, const Camera<Scalar>& cam,
                            const RenderSettings& settings = {});

/// Analytic gradients of a loss given dL/d(color image) and optionally
/// dL/d(alpha map). Gaussians that were culled get zero gradients.
template <typename Scalar>
CloudGrads<Scalar> rasterize_backward(const RenderOutput<Scalar>& forward,
                                      const Image<Scalar>& grad_color,
                                      const Image<Scalar>* grad_alpha = nullptr);

/// Hash of every (pixel, contributing Gaussian) pair of a forward pass.
/// Two renders with equal signatures took the same discrete branches
/// (culling, skip threshold, early termination).
template <typename Scalar> std::uint64_t contribution_signature(const RasterState<Scalar>& state);

}  // namespace glimpse
