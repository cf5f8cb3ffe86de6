#pragma once

#include "glimpse/articulation.hpp"
#include "glimpse/camera.hpp"
#include "glimpse/render.hpp"
#include "glimpse/scene.hpp"

#include <chrono>
#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <random>
#include <string>
#include <vector>

namespace glimpse {

enum class ViewTag : std::uint8_t { Front = 0, Side = 1, Back = 2 };
const char* to_string(ViewTag tag);

/// Where a guidance camera points.
enum class ViewMode : std::uint8_t { Full, Head, Upper, Lower };

inline constexpr int kBody25 = 25;

struct GuidanceRequest {
  std::uint32_t person = 0;
  float tau = 0;
  ViewTag tag = ViewTag::Front;
  Eigen::Matrix<float, 3, Eigen::Dynamic> joints;  // (x, y, confidence) per BODY_25 keypoint
  ImageF image;                                    // RGB in [0, 1]
};

struct GuidanceResponse {
  ImageF grad;  // dL/d(image), same shape as the request image
  float diagnostic = 0;
};

/// Image in, gradient image out. Implementations throw ProviderError on failure.
class GuidanceProvider {
public:
  virtual ~GuidanceProvider() = default;
  virtual GuidanceResponse guide(const GuidanceRequest& request) = 0;
  /// False for providers that never contribute (training then skips guidance).
  virtual bool active() const { return true; }
};

class NullProvider final : public GuidanceProvider {
public:
  GuidanceResponse guide(const GuidanceRequest& request) override;
  bool active() const override { return false; }
};

/// Test double: the gradient of 0.5 |R - target|^2 against a per-view-tag target.
/// A missing bucket falls back to the nearest tag (front - side - back).
class MockOracleProvider final : public GuidanceProvider {
public:
  explicit MockOracleProvider(std::map<ViewTag, ImageF> targets);
  GuidanceResponse guide(const GuidanceRequest& request) override;
  const ImageF& target_for(ViewTag tag) const;

private:
  std::map<ViewTag, ImageF> targets_;
};

/// Length-prefixed little-endian messages over a stream socket.
/// Address forms: "unix:/path/to/socket" or "tcp:host:port".
class SocketProvider final : public GuidanceProvider {
public:
  SocketProvider(std::string address, std::chrono::milliseconds timeout = std::chrono::seconds(30));
  ~SocketProvider() override;
  SocketProvider(const SocketProvider&) = delete;
  SocketProvider& operator=(const SocketProvider&) = delete;
  GuidanceResponse guide(const GuidanceRequest& request) override;

private:
  void connect();
  void disconnect();
  std::string address_;
  std::chrono::milliseconds timeout_;
  int fd_ = -1;
};

/// Wire encoding; payloads exclude the u32 length prefix.
std::vector<std::uint8_t> encode_request(const GuidanceRequest& request);
GuidanceRequest decode_request(const std::vector<std::uint8_t>& payload);
std::vector<std::uint8_t> encode_response(const GuidanceResponse& response, std::uint8_t status = 0);
/// Throws ProviderError on a nonzero status.
GuidanceResponse decode_response(const std::vector<std::uint8_t>& payload, int width, int height);

/// Writes/reads one length-prefixed frame on a file descriptor.
void write_frame(int fd, const std::vector<std::uint8_t>& payload);
std::vector<std::uint8_t> read_frame(int fd, std::chrono::milliseconds timeout);

struct CameraSamplerConfig {
  double radius = 2.2;
  double azimuth_min = -3.141592653589793, azimuth_max = 3.141592653589793;
  double elevation_min = -0.3 * 3.141592653589793, elevation_max = 0.3 * 3.141592653589793;
  int width = 128, height = 128;
  double focal = 140.0;        // full-body framing at the sphere radius
  double zoom_focal_factor = 2.0;
};

struct PoseSamplerConfig {
  int zoom_start = 3000;  // guidance iterations before zoomed and mixed views start
};

struct PoseDraw {
  Pose pose;
  bool canonical = false;
  ViewMode mode = ViewMode::Full;
};

/// Early: uniform over the track plus the canonical pose, full body only.
/// Late: canonical full body, posed full body, head, upper and lower body
/// with probability 0.2 each (posed draws are uniform over the track).
PoseDraw sample_guidance_pose(const std::vector<Pose>& track, const Pose& canonical, int guidance_iteration,
                              const PoseSamplerConfig& config, std::mt19937_64& rng);

struct VirtualView {
  Camera<double> camera;
  ViewTag tag = ViewTag::Front;
  double azimuth = 0, elevation = 0;
  Eigen::Vector3d eye, target;
};

/// Camera on a sphere around the pelvis looking at the mode's anchor.
VirtualView sample_virtual_camera(const CameraSamplerConfig& config, const Eigen::Matrix3Xd& posed_joints,
                                  const Eigen::Matrix3d& body_rotation, ViewMode mode, std::mt19937_64& rng);

/// Deterministic camera at a given azimuth/elevation (world frame, +z azimuth 0).
VirtualView virtual_camera_at(const CameraSamplerConfig& config, const Eigen::Matrix3Xd& posed_joints,
                              const Eigen::Matrix3d& body_rotation, ViewMode mode, double azimuth,
                              double elevation);

/// Front within 45 degrees of the body's facing direction, back beyond 135.
ViewTag view_tag(const Eigen::Vector3d& eye, const Eigen::Vector3d& pelvis, const Eigen::Matrix3d& body_rotation);

struct TimestepSchedule {
  double min_start = 0.5, max_start = 0.98;
  double min_end = 0.02, max_end = 0.3;
  int hold = 2000, decay = 2000;

  /// The variant with a fixed lower bound of 0.2 and only the maximum annealed.
  static TimestepSchedule fixed_floor();
};

struct Timestep {
  double tau = 0;
  double tau_min = 0, tau_max = 0;
};
Timestep anneal_timestep(int guidance_iteration, const TimestepSchedule& schedule, std::mt19937_64& rng);
/// Bounds only, no draw.
Timestep timestep_bounds(int guidance_iteration, const TimestepSchedule& schedule);

/// SMPL joints to BODY_25 keypoints projected into the camera.
Eigen::Matrix<float, 3, Eigen::Dynamic> body25_keypoints(const Eigen::Matrix3Xd& smpl_joints,
                                                         const Camera<double>& cam);

struct GuidanceConfig {
  CameraSamplerConfig camera;
  PoseSamplerConfig pose;
  TimestepSchedule timestep;
  Eigen::Vector3d fill = Eigen::Vector3d::Ones();  // background behind the human-only render
};

/// The random choices of one guidance step.
struct GuidanceDraw {
  PoseDraw pose;
  VirtualView view;
  Timestep timestep;
  Eigen::Matrix3Xd joints;  // posed SMPL joints
};
GuidanceDraw draw_guidance(const Human& human, const GuidanceConfig& config, int guidance_iteration,
                           std::mt19937_64& rng);

struct GuidanceOutcome {
  bool applied = false;
  ViewTag tag = ViewTag::Front;
  ViewMode mode = ViewMode::Full;
  double tau = 0, tau_max = 0;
  double diagnostic = 0;
  GaussianGrads<double> grads;  // canonical gradients for the human (unscaled)
};

/// One guidance step for human j. Provider failures are logged and reported
/// as applied == false.
GuidanceOutcome apply_guidance(const Scene& scene, int j, GuidanceProvider& provider, const GuidanceConfig& config,
                               int guidance_iteration, std::mt19937_64& rng);

}  // namespace glimpse
