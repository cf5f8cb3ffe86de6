#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <stdexcept>
#include <string>

namespace glimpse {

template <typename Scalar> using Vec2 = Eigen::Matrix<Scalar, 2, 1>;
template <typename Scalar> using Vec3 = Eigen::Matrix<Scalar, 3, 1>;
template <typename Scalar> using Vec4 = Eigen::Matrix<Scalar, 4, 1>;
template <typename Scalar> using Mat2 = Eigen::Matrix<Scalar, 2, 2>;
template <typename Scalar> using Mat3 = Eigen::Matrix<Scalar, 3, 3>;
template <typename Scalar> using Mat3X = Eigen::Matrix<Scalar, 3, Eigen::Dynamic>;
template <typename Scalar> using Mat4X = Eigen::Matrix<Scalar, 4, Eigen::Dynamic>;
template <typename Scalar> using VecX = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

/// Quaternions are stored as (w, x, y, z) 4-vectors so they can live in
/// plain parameter arrays and receive unconstrained gradient updates.
template <typename Scalar> using Quat = Vec4<Scalar>;

// Errors. Every error carries a short machine-readable kind used by the CLI
// as its `error[<kind>]:` prefix.
class Error : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
  virtual const char* kind() const noexcept { return "error"; }
};

#define GLIMPSE_DEFINE_ERROR(Name, tag)                                        \
  class Name : public Error {                                                  \
  public:                                                                      \
    using Error::Error;                                                        \
    const char* kind() const noexcept override { return tag; }                 \
  }

GLIMPSE_DEFINE_ERROR(InvalidParameter, "invalid-parameter");
GLIMPSE_DEFINE_ERROR(DegenerateGaussian, "degenerate-gaussian");
GLIMPSE_DEFINE_ERROR(ShapeMismatch, "shape-mismatch");
GLIMPSE_DEFINE_ERROR(ContractViolation, "contract-violation");
GLIMPSE_DEFINE_ERROR(IndexError, "bad-index");
GLIMPSE_DEFINE_ERROR(IoError, "io");
GLIMPSE_DEFINE_ERROR(FormatError, "malformed");
GLIMPSE_DEFINE_ERROR(CountMismatch, "count-mismatch");
GLIMPSE_DEFINE_ERROR(VersionError, "version");
GLIMPSE_DEFINE_ERROR(TruncationError, "truncated");
GLIMPSE_DEFINE_ERROR(ProviderError, "provider");
GLIMPSE_DEFINE_ERROR(TrainingAborted, "non-finite-loss");

#undef GLIMPSE_DEFINE_ERROR

/// Interleaved (HWC, row-major) image. Pixel (x, y) channel c lives at
/// data[(y * width + x) * channels + c].
template <typename Scalar> struct Image {
  int width = 0;
  int height = 0;
  int channels = 0;
  Eigen::Array<Scalar, Eigen::Dynamic, 1> data;

  Image() = default;
  Image(int w, int h, int c, Scalar fill = Scalar(0))
      : width(w), height(h), channels(c),
        data(Eigen::Array<Scalar, Eigen::Dynamic, 1>::Constant(
            static_cast<Eigen::Index>(w) * h * c, fill)) {}

  Eigen::Index pixel_count() const { return static_cast<Eigen::Index>(width) * height; }
  Eigen::Index index(int x, int y, int c = 0) const {
    return (static_cast<Eigen::Index>(y) * width + x) * channels + c;
  }
  Scalar& operator()(int x, int y, int c = 0) { return data[index(x, y, c)]; }
  Scalar operator()(int x, int y, int c = 0) const { return data[index(x, y, c)]; }

  bool same_shape(const Image& other) const {
    return width == other.width && height == other.height && channels == other.channels;
  }

  template <typename Other> Image<Other> cast() const {
    Image<Other> out;
    out.width = width;
    out.height = height;
    out.channels = channels;
    out.data = data.template cast<Other>();
    return out;
  }
};

using ImageD = Image<double>;
using ImageF = Image<float>;

}  // namespace glimpse
