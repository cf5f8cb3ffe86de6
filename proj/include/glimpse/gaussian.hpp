#pragma once

#include "glimpse/types.hpp"

#include <Eigen/Dense>

#include <cmath>
#include <span>
#include <vector>

namespace glimpse {

template <typename Scalar> Scalar sigmoid(Scalar x) {
  if (x >= Scalar(0)) {
    const Scalar e = std::exp(-x);
    return Scalar(1) / (Scalar(1) + e);
  }
  const Scalar e = std::exp(x);
  return e / (Scalar(1) + e);
}

template <typename Scalar> Scalar logit(Scalar p) { return std::log(p / (Scalar(1) - p)); }

template <typename Scalar> Quat<Scalar> identity_quat() { return Quat<Scalar>(1, 0, 0, 0); }

/// Rotation matrix of q / |q|. Throws InvalidParameter for a zero or
/// non-finite quaternion.
template <typename Scalar> Mat3<Scalar> quat_to_rotation(const Quat<Scalar>& q) {
  const Scalar n = q.norm();
  if (!q.allFinite() || !(n > Scalar(0))) {
    throw InvalidParameter("quat_to_rotation: zero or non-finite quaternion");
  }
  const Quat<Scalar> u = q / n;
  const Scalar w = u[0], x = u[1], y = u[2], z = u[3];
  Mat3<Scalar> r;
  r << 1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
      2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
      2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y);
  return r;
}

/// Pulls dL/dR back to the raw (unnormalized) quaternion.
template <typename Scalar>
Quat<Scalar> quat_to_rotation_backward(const Quat<Scalar>& q, const Mat3<Scalar>& g) {
  const Scalar n = q.norm();
  const Quat<Scalar> u = q / n;
  const Scalar w = u[0], x = u[1], y = u[2], z = u[3];
  Quat<Scalar> gu;
  gu[0] = 2 * (-z * g(0, 1) + y * g(0, 2) + z * g(1, 0) - x * g(1, 2) - y * g(2, 0) + x * g(2, 1));
  gu[1] = 2 * (y * g(0, 1) + z * g(0, 2) + y * g(1, 0) - 2 * x * g(1, 1) - w * g(1, 2) +
               z * g(2, 0) + w * g(2, 1) - 2 * x * g(2, 2));
  gu[2] = 2 * (-2 * y * g(0, 0) + x * g(0, 1) + w * g(0, 2) + x * g(1, 0) + z * g(1, 2) -
               w * g(2, 0) + z * g(2, 1) - 2 * y * g(2, 2));
  gu[3] = 2 * (-2 * z * g(0, 0) - w * g(0, 1) + x * g(0, 2) + w * g(1, 0) - 2 * z * g(1, 1) +
               y * g(1, 2) + x * g(2, 0) + y * g(2, 1));
  return (gu - u * u.dot(gu)) / n;
}

/// Sigma = R S S^T R^T with R = quat_to_rotation(q), S = diag(scale).
template <typename Scalar>
Mat3<Scalar> build_covariance(const Quat<Scalar>& q, const Vec3<Scalar>& scale) {
  if (!scale.allFinite() || !q.allFinite()) {
    throw InvalidParameter("build_covariance: non-finite input");
  }
  if ((scale.array() <= Scalar(0)).any()) {
    throw InvalidParameter("build_covariance: scale must be strictly positive");
  }
  const Mat3<Scalar> m = quat_to_rotation(q) * scale.asDiagonal();
  Mat3<Scalar> cov = m * m.transpose();
  // exact symmetry regardless of summation order
  cov = Scalar(0.5) * (cov + cov.transpose()).eval();
  return cov;
}

template <typename Scalar> struct CovarianceGrad {
  Quat<Scalar> rotation;
  Vec3<Scalar> scale;
};

/// Given dL/dSigma (entries treated independently), returns dL/dq and dL/dscale.
template <typename Scalar>
CovarianceGrad<Scalar> build_covariance_backward(const Quat<Scalar>& q, const Vec3<Scalar>& scale,
                                                 const Mat3<Scalar>& grad_cov) {
  const Mat3<Scalar> r = quat_to_rotation(q);
  const Mat3<Scalar> m = r * scale.asDiagonal();
  const Mat3<Scalar> grad_m = (grad_cov + grad_cov.transpose()) * m;
  CovarianceGrad<Scalar> out;
  out.scale = (r.transpose() * grad_m).diagonal();
  out.rotation = quat_to_rotation_backward<Scalar>(q, grad_m * scale.asDiagonal());
  return out;
}

/// Unnormalized Gaussian weight exp(-0.5 (x-mu)^T Sigma^-1 (x-mu)).
/// Covariances with condition number above 1e12 get 1e-9 tr(Sigma)/3 added
/// to the diagonal before inversion.
template <typename Scalar>
Scalar eval_gaussian(const Vec3<Scalar>& center, const Mat3<Scalar>& cov, const Vec3<Scalar>& x) {
  if (!center.allFinite() || !cov.allFinite() || !x.allFinite()) {
    throw InvalidParameter("eval_gaussian: non-finite input");
  }
  Mat3<Scalar> c = cov;
  Eigen::SelfAdjointEigenSolver<Mat3<Scalar>> eig(c, Eigen::EigenvaluesOnly);
  const Scalar lo = eig.eigenvalues().minCoeff();
  const Scalar hi = eig.eigenvalues().maxCoeff();
  if (!(hi > Scalar(0))) throw DegenerateGaussian("eval_gaussian: covariance is not positive");
  if (lo <= Scalar(0) || hi / lo > Scalar(1e12)) {
    c.diagonal().array() += Scalar(1e-9) * c.trace() / Scalar(3);
  }
  Eigen::LLT<Mat3<Scalar>> llt(c);
  if (llt.info() != Eigen::Success) {
    throw DegenerateGaussian("eval_gaussian: covariance singular after regularization");
  }
  const Vec3<Scalar> d = x - center;
  const Scalar mahalanobis = d.dot(llt.solve(d));
  return std::exp(Scalar(-0.5) * mahalanobis);
}

/// A single Gaussian in its optimization parameterization.
template <typename Scalar> struct Gaussian3D {
  Vec3<Scalar> center = Vec3<Scalar>::Zero();
  Quat<Scalar> rotation = identity_quat<Scalar>();
  Vec3<Scalar> log_scale = Vec3<Scalar>::Zero();
  Vec3<Scalar> color = Vec3<Scalar>::Constant(Scalar(0.5));
  Scalar opacity_logit = Scalar(0);

  Vec3<Scalar> scale() const { return log_scale.array().exp(); }
  Scalar opacity() const { return sigmoid(opacity_logit); }
  Mat3<Scalar> covariance() const { return build_covariance<Scalar>(rotation, scale()); }
};

template <typename Scalar>
Scalar eval_gaussian(const Gaussian3D<Scalar>& g, const Vec3<Scalar>& x) {
  return eval_gaussian<Scalar>(g.center, g.covariance(), x);
}

enum class Space : std::uint8_t { World = 0, Canonical = 1 };

/// Column-per-Gaussian parameter arrays shared by sets and their gradients.
template <typename Scalar> struct GaussianParams {
  Mat3X<Scalar> centers;
  Mat4X<Scalar> rotations;
  Mat3X<Scalar> log_scales;
  Mat3X<Scalar> colors;
  VecX<Scalar> opacity_logits;

  Eigen::Index size() const { return centers.cols(); }

  void resize(Eigen::Index n) {
    centers.resize(3, n);
    rotations.resize(4, n);
    log_scales.resize(3, n);
    colors.resize(3, n);
    opacity_logits.resize(n);
  }

  void set_zero(Eigen::Index n) {
    centers.setZero(3, n);
    rotations.setZero(4, n);
    log_scales.setZero(3, n);
    colors.setZero(3, n);
    opacity_logits.setZero(n);
  }

  bool consistent() const {
    const auto n = centers.cols();
    return rotations.cols() == n && log_scales.cols() == n && colors.cols() == n &&
           opacity_logits.size() == n;
  }

  bool all_finite() const {
    return centers.allFinite() && rotations.allFinite() && log_scales.allFinite() &&
           colors.allFinite() && opacity_logits.allFinite();
  }

  GaussianParams& operator+=(const GaussianParams& o) {
    centers += o.centers;
    rotations += o.rotations;
    log_scales += o.log_scales;
    colors += o.colors;
    opacity_logits += o.opacity_logits;
    return *this;
  }

  GaussianParams& operator*=(Scalar s) {
    centers *= s;
    rotations *= s;
    log_scales *= s;
    colors *= s;
    opacity_logits *= s;
    return *this;
  }

  GaussianParams select(std::span<const Eigen::Index> idx) const {
    GaussianParams out;
    out.resize(static_cast<Eigen::Index>(idx.size()));
    for (Eigen::Index k = 0; k < out.size(); ++k) {
      const auto i = idx[static_cast<std::size_t>(k)];
      out.centers.col(k) = centers.col(i);
      out.rotations.col(k) = rotations.col(i);
      out.log_scales.col(k) = log_scales.col(i);
      out.colors.col(k) = colors.col(i);
      out.opacity_logits[k] = opacity_logits[i];
    }
    return out;
  }

  void append(const GaussianParams& o) {
    const auto n = size();
    const auto m = o.size();
    centers.conservativeResize(3, n + m);
    rotations.conservativeResize(4, n + m);
    log_scales.conservativeResize(3, n + m);
    colors.conservativeResize(3, n + m);
    opacity_logits.conservativeResize(n + m);
    centers.rightCols(m) = o.centers;
    rotations.rightCols(m) = o.rotations;
    log_scales.rightCols(m) = o.log_scales;
    colors.rightCols(m) = o.colors;
    opacity_logits.tail(m) = o.opacity_logits;
  }
};

template <typename Scalar> using GaussianGrads = GaussianParams<Scalar>;

/// Flat collection of Gaussians tagged with the coordinate space they live in.
template <typename Scalar> class GaussianSet : public GaussianParams<Scalar> {
public:
  using Params = GaussianParams<Scalar>;

  explicit GaussianSet(Space space = Space::World) : space_(space) { Params::resize(0); }
  GaussianSet(Space space, Params params) : Params(std::move(params)), space_(space) {
    if (!Params::consistent()) throw ShapeMismatch("GaussianSet: attribute lengths differ");
  }

  Space space() const { return space_; }
  Params& params() { return *this; }
  const Params& params() const { return *this; }

  Gaussian3D<Scalar> gaussian(Eigen::Index i) const {
    Gaussian3D<Scalar> g;
    g.center = this->centers.col(i);
    g.rotation = this->rotations.col(i);
    g.log_scale = this->log_scales.col(i);
    g.color = this->colors.col(i);
    g.opacity_logit = this->opacity_logits[i];
    return g;
  }

  void set(Eigen::Index i, const Gaussian3D<Scalar>& g) {
    this->centers.col(i) = g.center;
    this->rotations.col(i) = g.rotation;
    this->log_scales.col(i) = g.log_scale;
    this->colors.col(i) = g.color;
    this->opacity_logits[i] = g.opacity_logit;
  }

  void push_back(const Gaussian3D<Scalar>& g) {
    const auto n = this->size();
    Params one;
    one.resize(1);
    Params::append(one);
    set(n, g);
  }

  Vec3<Scalar> scale(Eigen::Index i) const { return this->log_scales.col(i).array().exp(); }
  Scalar opacity(Eigen::Index i) const { return sigmoid(this->opacity_logits[i]); }
  Mat3<Scalar> covariance(Eigen::Index i) const {
    return build_covariance<Scalar>(this->rotations.col(i), scale(i));
  }

  void normalize_rotations() {
    for (Eigen::Index i = 0; i < this->size(); ++i) {
      const Scalar n = this->rotations.col(i).norm();
      if (n > Scalar(0)) {
        this->rotations.col(i) /= n;
      } else {
        this->rotations.col(i) = identity_quat<Scalar>();
      }
    }
  }

  GaussianSet subset(std::span<const Eigen::Index> idx) const {
    return GaussianSet(space_, Params::select(idx));
  }

private:
  Space space_;
};

/// Render-ready world-space Gaussians: covariance is carried explicitly
/// because skinned covariances need not factor as R S S^T R^T.
template <typename Scalar> struct GaussianCloud {
  Mat3X<Scalar> centers;
  std::vector<Mat3<Scalar>> covariances;
  Mat3X<Scalar> colors;
  VecX<Scalar> opacities;

  Eigen::Index size() const { return centers.cols(); }

  void resize(Eigen::Index n) {
    centers.resize(3, n);
    covariances.resize(static_cast<std::size_t>(n));
    colors.resize(3, n);
    opacities.resize(n);
  }

  void append(const GaussianCloud& o) {
    const auto n = size();
    const auto m = o.size();
    centers.conservativeResize(3, n + m);
    colors.conservativeResize(3, n + m);
    opacities.conservativeResize(n + m);
    centers.rightCols(m) = o.centers;
    colors.rightCols(m) = o.colors;
    opacities.tail(m) = o.opacities;
    covariances.insert(covariances.end(), o.covariances.begin(), o.covariances.end());
  }

  template <typename Other> GaussianCloud<Other> cast() const {
    GaussianCloud<Other> out;
    out.centers = centers.template cast<Other>();
    out.colors = colors.template cast<Other>();
    out.opacities = opacities.template cast<Other>();
    out.covariances.reserve(covariances.size());
    for (const auto& c : covariances) out.covariances.push_back(c.template cast<Other>());
    return out;
  }
};

/// Gradients of a scalar loss with respect to a GaussianCloud.
template <typename Scalar> struct CloudGrads {
  Mat3X<Scalar> centers;
  std::vector<Mat3<Scalar>> covariances;
  Mat3X<Scalar> colors;
  VecX<Scalar> opacities;
  /// |dL/d(projected mean)| in normalized device coordinates, per Gaussian.
  VecX<Scalar> screen_grad_norm;
  /// Whether the Gaussian survived projection culling.
  Eigen::Matrix<bool, Eigen::Dynamic, 1> visible;

  Eigen::Index size() const { return centers.cols(); }

  void set_zero(Eigen::Index n) {
    centers.setZero(3, n);
    covariances.assign(static_cast<std::size_t>(n), Mat3<Scalar>::Zero());
    colors.setZero(3, n);
    opacities.setZero(n);
    screen_grad_norm.setZero(n);
    visible.setConstant(n, false);
  }

  CloudGrads slice(Eigen::Index offset, Eigen::Index count) const {
    CloudGrads out;
    out.centers = centers.middleCols(offset, count);
    out.covariances.assign(covariances.begin() + offset, covariances.begin() + offset + count);
    out.colors = colors.middleCols(offset, count);
    out.opacities = opacities.segment(offset, count);
    out.screen_grad_norm = screen_grad_norm.segment(offset, count);
    out.visible = visible.segment(offset, count);
    return out;
  }
};

/// World-space cloud of a set (activations applied).
template <typename Scalar> GaussianCloud<Scalar> make_cloud(const GaussianSet<Scalar>& set) {
  GaussianCloud<Scalar> cloud;
  const auto n = set.size();
  cloud.resize(n);
  cloud.centers = set.centers;
  cloud.colors = set.colors;
  for (Eigen::Index i = 0; i < n; ++i) {
    cloud.covariances[static_cast<std::size_t>(i)] = set.covariance(i);
    cloud.opacities[i] = set.opacity(i);
  }
  return cloud;
}

/// Chain rule from cloud gradients back to the set's raw parameters.
/// `grad_centers` / `grad_covs` may come from a deformation rather than
/// the renderer directly.
template <typename Scalar>
GaussianGrads<Scalar> params_backward(const GaussianSet<Scalar>& set,
                                      const Mat3X<Scalar>& grad_centers,
                                      std::span<const Mat3<Scalar>> grad_covs,
                                      const Mat3X<Scalar>& grad_colors,
                                      const VecX<Scalar>& grad_opacities) {
  GaussianGrads<Scalar> out;
  const auto n = set.size();
  out.set_zero(n);
  out.centers = grad_centers;
  out.colors = grad_colors;
  for (Eigen::Index i = 0; i < n; ++i) {
    const Vec3<Scalar> s = set.scale(i);
    const auto cg = build_covariance_backward<Scalar>(set.rotations.col(i), s,
                                                      grad_covs[static_cast<std::size_t>(i)]);
    out.rotations.col(i) = cg.rotation;
    out.log_scales.col(i) = cg.scale.cwiseProduct(s);
    const Scalar o = set.opacity(i);
    out.opacity_logits[i] = grad_opacities[i] * o * (Scalar(1) - o);
  }
  return out;
}

template <typename Scalar>
GaussianGrads<Scalar> params_backward(const GaussianSet<Scalar>& set, const CloudGrads<Scalar>& g) {
  return params_backward<Scalar>(set, g.centers, g.covariances, g.colors, g.opacities);
}

}  // namespace glimpse
