#include "glimpse/losses.hpp"

#include <spdlog/spdlog.h>

#include <array>
#include <cmath>
#include <mutex>
#include <string>

namespace glimpse {

void LossWeights::validate() const {
  for (double w : {rgb, ssim, lpips, sds, hard_factor, background_reg}) {
    if (!std::isfinite(w) || w < 0) throw InvalidParameter("loss weights must be finite and nonnegative");
  }
}

namespace {

void check_pair(const ImageD& a, const ImageD& b, const ImageD* mask) {
  if (!a.same_shape(b)) {
    throw ShapeMismatch("image shapes differ: " + std::to_string(a.width) + "x" + std::to_string(a.height) + "x" +
                        std::to_string(a.channels) + " vs " + std::to_string(b.width) + "x" +
                        std::to_string(b.height) + "x" + std::to_string(b.channels));
  }
  if (mask && (mask->width != a.width || mask->height != a.height || mask->channels != 1)) {
    throw ShapeMismatch("mask must be single-channel and match the image size");
  }
}

constexpr int kWindow = 11;
constexpr double kC1 = 0.01 * 0.01;
constexpr double kC2 = 0.03 * 0.03;

const std::array<double, kWindow>& window() {
  static const std::array<double, kWindow> w = [] {
    std::array<double, kWindow> g{};
    double sum = 0;
    for (int i = 0; i < kWindow; ++i) {
      const double d = i - kWindow / 2;
      g[static_cast<std::size_t>(i)] = std::exp(-d * d / (2 * 1.5 * 1.5));
      sum += g[static_cast<std::size_t>(i)];
    }
    for (auto& v : g) v /= sum;
    return g;
  }();
  return w;
}

using Plane = Eigen::ArrayXXd;  // rows = y, cols = x

/// Separable Gaussian filter keeping only fully interior windows.
Plane filter_valid(const Plane& x) {
  const auto& g = window();
  const Eigen::Index h = x.rows(), w = x.cols();
  Plane rows = Plane::Zero(h, w - kWindow + 1);
  for (int k = 0; k < kWindow; ++k) rows += g[static_cast<std::size_t>(k)] * x.middleCols(k, w - kWindow + 1);
  Plane out = Plane::Zero(h - kWindow + 1, w - kWindow + 1);
  for (int k = 0; k < kWindow; ++k) out += g[static_cast<std::size_t>(k)] * rows.middleRows(k, h - kWindow + 1);
  return out;
}

/// Adjoint of filter_valid.
Plane filter_valid_adjoint(const Plane& y, Eigen::Index h, Eigen::Index w) {
  const auto& g = window();
  Plane rows = Plane::Zero(h, y.cols());
  for (int k = 0; k < kWindow; ++k) rows.middleRows(k, y.rows()) += g[static_cast<std::size_t>(k)] * y;
  Plane out = Plane::Zero(h, w);
  for (int k = 0; k < kWindow; ++k) out.middleCols(k, y.cols()) += g[static_cast<std::size_t>(k)] * rows;
  return out;
}

Plane channel(const ImageD& img, int c) {
  Plane p(img.height, img.width);
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x) p(y, x) = img(x, y, c);
  return p;
}

}  // namespace

LossValue mse_loss(const ImageD& render, const ImageD& target, const ImageD* mask) {
  check_pair(render, target, mask);
  LossValue out;
  out.grad = ImageD(render.width, render.height, render.channels);
  double weight_sum = 0;
  double sum = 0;
  for (int y = 0; y < render.height; ++y) {
    for (int x = 0; x < render.width; ++x) {
      const double m = mask ? (*mask)(x, y) : 1.0;
      if (m == 0) continue;
      weight_sum += m * render.channels;
      for (int c = 0; c < render.channels; ++c) {
        const double d = render(x, y, c) - target(x, y, c);
        sum += m * d * d;
        out.grad(x, y, c) = 2 * m * d;
      }
    }
  }
  if (weight_sum == 0) return out;
  out.value = sum / weight_sum;
  out.grad.data /= weight_sum;
  return out;
}

LossValue ssim_loss(const ImageD& render, const ImageD& target, const ImageD* mask) {
  check_pair(render, target, mask);
  if (render.width < kWindow || render.height < kWindow) {
    throw InvalidParameter("SSIM needs images of at least 11x11, got " + std::to_string(render.width) + "x" +
                           std::to_string(render.height));
  }
  const Eigen::Index h = render.height, w = render.width;
  const Eigen::Index vh = h - kWindow + 1, vw = w - kWindow + 1;
  Plane window_weight = Plane::Ones(vh, vw);
  if (mask) {
    // a window counts only as much as its least valid pixel, so masked targets never leak in
    const Plane m = channel(*mask, 0);
    for (Eigen::Index y = 0; y < vh; ++y)
      for (Eigen::Index x = 0; x < vw; ++x) window_weight(y, x) = m.block(y, x, kWindow, kWindow).minCoeff();
  }
  const double total_weight = window_weight.sum() * render.channels;
  LossValue out;
  out.grad = ImageD(render.width, render.height, render.channels);
  if (total_weight == 0) return out;

  double ssim_sum = 0;
  for (int c = 0; c < render.channels; ++c) {
    const Plane x = channel(render, c), y = channel(target, c);
    const Plane mx = filter_valid(x), my = filter_valid(y);
    const Plane sxx = filter_valid(x * x), syy = filter_valid(y * y), sxy = filter_valid(x * y);
    const Plane vx = sxx - mx * mx, vy = syy - my * my, cxy = sxy - mx * my;
    const Plane a1 = 2 * mx * my + kC1, a2 = 2 * cxy + kC2;
    const Plane b1 = mx * mx + my * my + kC1, b2 = vx + vy + kC2;
    const Plane s = (a1 * a2) / (b1 * b2);
    ssim_sum += (window_weight * s).sum();

    // d(loss)/dS per window, then chain through the filtered statistics
    const Plane g = -window_weight / total_weight;
    const Plane ds_dmx = (2 * my * a2 - 2 * my * a1) / (b1 * b2) - s * (2 * mx / b1 - 2 * mx / b2);
    const Plane ds_dsxx = -s / b2;
    const Plane ds_dsxy = 2 * a1 / (b1 * b2);
    const Plane gm = filter_valid_adjoint(g * ds_dmx, h, w);
    const Plane gxx = filter_valid_adjoint(g * ds_dsxx, h, w);
    const Plane gxy = filter_valid_adjoint(g * ds_dsxy, h, w);
    const Plane dx = gm + 2 * x * gxx + y * gxy;
    for (int yy = 0; yy < render.height; ++yy)
      for (int xx = 0; xx < render.width; ++xx) out.grad(xx, yy, c) = dx(yy, xx);
  }
  out.value = 1.0 - ssim_sum / total_weight;
  return out;
}

LossValue hard_surface_loss(const ImageD& alpha) {
  LossValue out;
  out.grad = ImageD(alpha.width, alpha.height, alpha.channels);
  const auto n = alpha.data.size();
  if (n == 0) return out;
  double sum = 0;
  for (Eigen::Index i = 0; i < n; ++i) {
    const double a = alpha.data[i];
    if (!(a >= -1e-9 && a <= 1 + 1e-9)) {
      throw InvalidParameter("hard-surface loss needs alpha in [0, 1], got " + std::to_string(a));
    }
    const double e0 = std::exp(-std::abs(a)), e1 = std::exp(-std::abs(1 - a));
    sum += -std::log(e0 + e1);
    // d/da of -log(e^{-|a|} + e^{-|1-a|}) for a in [0, 1]
    out.grad.data[i] = (e0 - e1) / (e0 + e1) / static_cast<double>(n);
  }
  out.value = sum / static_cast<double>(n);
  return out;
}

CenterLoss background_sphere_reg(const GaussianSet<double>& background, double radius, const Vec3<double>& center) {
  CenterLoss out;
  out.grad = Mat3X<double>::Zero(3, background.size());
  for (Eigen::Index i = 0; i < background.size(); ++i) {
    const Vec3<double> d = background.centers.col(i) - center;
    const double n = d.norm();
    const double r = n - radius;
    out.value += r * r;
    if (n > 0) out.grad.col(i) = 2 * r * d / n;
  }
  return out;
}

LossValue reconstruction_loss(const ImageD& render, const ImageD& target, const LossWeights& weights,
                              const ImageD* mask, PerceptualLoss* perceptual) {
  LossValue out;
  out.grad = ImageD(render.width, render.height, render.channels);
  if (weights.rgb > 0) {
    const auto m = mse_loss(render, target, mask);
    out.value += weights.rgb * m.value;
    out.grad.data += weights.rgb * m.grad.data;
  }
  if (weights.ssim > 0) {
    const auto s = ssim_loss(render, target, mask);
    out.value += weights.ssim * s.value;
    out.grad.data += weights.ssim * s.grad.data;
  }
  if (weights.lpips > 0) {
    if (perceptual) {
      const auto p = perceptual->evaluate(render, target);
      if (!p.grad.same_shape(render)) throw ShapeMismatch("perceptual loss returned a gradient of the wrong shape");
      out.value += weights.lpips * p.value;
      out.grad.data += weights.lpips * p.grad.data;
    } else {
      static std::once_flag warned;
      std::call_once(warned, [] { spdlog::info("no perceptual loss plugin attached; the lpips term is skipped"); });
    }
  }
  return out;
}

double recon_weight(int joint_iteration, double tau_max, int guidance_start) {
  if (joint_iteration < guidance_start) return 1.0;
  return 1e6 * tau_max * tau_max;
}

TotalLoss total_loss(const LossTerms& terms, double lambda_recon, const LossWeights& weights) {
  TotalLoss t;
  t.recon_scale = lambda_recon;
  t.sds_scale = weights.sds;
  t.hard_scale = weights.hard_factor * lambda_recon;
  t.value = t.recon_scale * terms.recon + t.sds_scale * terms.sds + t.hard_scale * terms.hard;
  return t;
}

}  // namespace glimpse
