#pragma once

#include "glimpse/gaussian.hpp"
#include "glimpse/types.hpp"

#include <memory>

namespace glimpse {

struct LossWeights {
  double rgb = 0.8;
  double ssim = 0.2;
  double lpips = 0.1;  // only used when a perceptual plugin is attached
  double sds = 1.0;
  double hard_factor = 0.1;  // hard-surface weight relative to the reconstruction weight
  double background_reg = 1.0;

  void validate() const;
};

/// Scalar loss and its gradient with respect to the first image argument.
struct LossValue {
  double value = 0;
  ImageD grad;
};

/// Mean squared error over the pixels (and channels) selected by an optional
/// single-channel weight mask.
LossValue mse_loss(const ImageD& render, const ImageD& target, const ImageD* mask = nullptr);

/// 1 - SSIM with an 11x11 Gaussian window (sigma 1.5) over all fully interior
/// windows. A mask weights each window by its value at the window centre.
LossValue ssim_loss(const ImageD& render, const ImageD& target, const ImageD* mask = nullptr);

/// Per-pixel -log(exp(-|a|) + exp(-|1 - a|)) averaged over the alpha map.
LossValue hard_surface_loss(const ImageD& alpha);

/// Sum over Gaussians of (|mu - center| - radius)^2 with its centre gradient.
struct CenterLoss {
  double value = 0;
  Mat3X<double> grad;
};
CenterLoss background_sphere_reg(const GaussianSet<double>& background, double radius, const Vec3<double>& center);

/// External image-to-scalar loss (e.g. a learned perceptual metric).
class PerceptualLoss {
public:
  virtual ~PerceptualLoss() = default;
  virtual LossValue evaluate(const ImageD& render, const ImageD& target) = 0;
};

/// lambda_rgb * MSE + lambda_ssim * (1 - SSIM) [+ lambda_lpips * perceptual].
LossValue reconstruction_loss(const ImageD& render, const ImageD& target, const LossWeights& weights,
                              const ImageD* mask = nullptr, PerceptualLoss* perceptual = nullptr);

/// 1.0 while guidance is inactive, 1e6 * tau_max^2 afterwards.
double recon_weight(int joint_iteration, double tau_max, int guidance_start = 1000);

struct LossTerms {
  double recon = 0;
  double sds = 0;
  double hard = 0;
};

/// Total objective and the factor each term's gradient is scaled by.
struct TotalLoss {
  double value = 0;
  double recon_scale = 0, sds_scale = 0, hard_scale = 0;
};
TotalLoss total_loss(const LossTerms& terms, double lambda_recon, const LossWeights& weights);

}  // namespace glimpse
