#include "glimpse/guidance.hpp"

#include <spdlog/spdlog.h>

#include <arpa/inet.h>
#include <netdb.h>
#include <poll.h>
#include <sys/socket.h>
#include <sys/un.h>
#include <unistd.h>

#include <algorithm>
#include <array>
#include <bit>
#include <cerrno>
#include <cmath>
#include <cstring>
#include <numbers>
#include <utility>

namespace glimpse {

const char* to_string(ViewTag tag) {
  switch (tag) {
    case ViewTag::Front: return "front";
    case ViewTag::Side: return "side";
    case ViewTag::Back: return "back";
  }
  return "unknown";
}

GuidanceResponse NullProvider::guide(const GuidanceRequest& request) {
  GuidanceResponse r;
  r.grad = ImageF(request.image.width, request.image.height, request.image.channels);
  return r;
}

MockOracleProvider::MockOracleProvider(std::map<ViewTag, ImageF> targets) : targets_(std::move(targets)) {
  if (targets_.empty()) throw InvalidParameter("mock oracle needs at least one target view");
}

const ImageF& MockOracleProvider::target_for(ViewTag tag) const {
  if (auto it = targets_.find(tag); it != targets_.end()) return it->second;
  // nearest along front - side - back; ties go to the side bucket
  const auto order = [](ViewTag t) { return static_cast<int>(t); };
  const ImageF* best = nullptr;
  int best_distance = 99;
  for (const auto& [t, img] : targets_) {
    const int d = std::abs(order(t) - order(tag));
    if (d < best_distance || (d == best_distance && t == ViewTag::Side)) {
      best = &img;
      best_distance = d;
    }
  }
  return *best;
}

GuidanceResponse MockOracleProvider::guide(const GuidanceRequest& request) {
  const ImageF& target = target_for(request.tag);
  if (!target.same_shape(request.image)) {
    throw ProviderError("mock oracle target is " + std::to_string(target.width) + "x" +
                        std::to_string(target.height) + ", request is " + std::to_string(request.image.width) + "x" +
                        std::to_string(request.image.height));
  }
  GuidanceResponse r;
  r.grad = request.image;
  r.grad.data -= target.data;
  r.diagnostic = 0.5f * r.grad.data.square().sum();
  return r;
}

// ---------------------------------------------------------------- wire format

namespace {

class Writer {
public:
  void u8(std::uint8_t v) { bytes.push_back(v); }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) bytes.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
  std::vector<std::uint8_t> bytes;
};

class Reader {
public:
  explicit Reader(const std::vector<std::uint8_t>& b) : bytes_(b) {}
  std::uint8_t u8() {
    need(1);
    return bytes_[pos_++];
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(bytes_[pos_++]) << (8 * i);
    return v;
  }
  float f32() { return std::bit_cast<float>(u32()); }
  void finish() const {
    if (pos_ != bytes_.size()) throw ProviderError("trailing bytes in guidance message");
  }

private:
  void need(std::size_t n) const {
    if (pos_ + n > bytes_.size()) throw ProviderError("guidance message truncated");
  }
  const std::vector<std::uint8_t>& bytes_;
  std::size_t pos_ = 0;
};

constexpr std::uint32_t kMaxFrame = 1u << 30;

}  // namespace

std::vector<std::uint8_t> encode_request(const GuidanceRequest& request) {
  if (request.image.channels != 3) throw ShapeMismatch("guidance images must be RGB");
  if (request.joints.cols() > 255) throw InvalidParameter("too many joints for the wire format");
  Writer w;
  w.u32(request.person);
  w.f32(request.tau);
  w.u8(static_cast<std::uint8_t>(request.tag));
  w.u32(static_cast<std::uint32_t>(request.image.width));
  w.u32(static_cast<std::uint32_t>(request.image.height));
  w.u8(static_cast<std::uint8_t>(request.joints.cols()));
  for (Eigen::Index k = 0; k < request.joints.cols(); ++k)
    for (int r = 0; r < 3; ++r) w.f32(request.joints(r, k));
  for (Eigen::Index i = 0; i < request.image.data.size(); ++i) w.f32(request.image.data[i]);
  return std::move(w.bytes);
}

GuidanceRequest decode_request(const std::vector<std::uint8_t>& payload) {
  Reader r(payload);
  GuidanceRequest q;
  q.person = r.u32();
  q.tau = r.f32();
  const auto tag = r.u8();
  if (tag > 2) throw ProviderError("unknown view tag " + std::to_string(tag));
  q.tag = static_cast<ViewTag>(tag);
  const auto w = r.u32(), h = r.u32();
  if (static_cast<std::uint64_t>(w) * h * 12 > payload.size()) throw ProviderError("guidance message truncated");
  const int joints = r.u8();
  q.joints.resize(3, joints);
  for (int k = 0; k < joints; ++k)
    for (int c = 0; c < 3; ++c) q.joints(c, k) = r.f32();
  q.image = ImageF(static_cast<int>(w), static_cast<int>(h), 3);
  for (Eigen::Index i = 0; i < q.image.data.size(); ++i) q.image.data[i] = r.f32();
  r.finish();
  return q;
}

std::vector<std::uint8_t> encode_response(const GuidanceResponse& response, std::uint8_t status) {
  Writer w;
  w.u8(status);
  for (Eigen::Index i = 0; i < response.grad.data.size(); ++i) w.f32(response.grad.data[i]);
  w.f32(response.diagnostic);
  return std::move(w.bytes);
}

GuidanceResponse decode_response(const std::vector<std::uint8_t>& payload, int width, int height) {
  Reader r(payload);
  const auto status = r.u8();
  if (status != 0) throw ProviderError("provider reported status " + std::to_string(status));
  GuidanceResponse g;
  g.grad = ImageF(width, height, 3);
  for (Eigen::Index i = 0; i < g.grad.data.size(); ++i) g.grad.data[i] = r.f32();
  g.diagnostic = r.f32();
  r.finish();
  if (!g.grad.data.allFinite()) throw ProviderError("provider returned a non-finite gradient");
  return g;
}

namespace {

void wait_ready(int fd, short events, std::chrono::milliseconds timeout) {
  pollfd p{fd, events, 0};
  const int rc = ::poll(&p, 1, static_cast<int>(timeout.count()));
  if (rc == 0) throw ProviderError("guidance provider timed out");
  if (rc < 0) throw ProviderError(std::string("poll failed: ") + std::strerror(errno));
}

void read_exact(int fd, std::uint8_t* out, std::size_t n, std::chrono::milliseconds timeout) {
  while (n > 0) {
    wait_ready(fd, POLLIN, timeout);
    const ssize_t got = ::read(fd, out, n);
    if (got == 0) throw ProviderError("guidance provider closed the connection");
    if (got < 0) {
      if (errno == EINTR) continue;
      throw ProviderError(std::string("read failed: ") + std::strerror(errno));
    }
    out += got;
    n -= static_cast<std::size_t>(got);
  }
}

}  // namespace

void write_frame(int fd, const std::vector<std::uint8_t>& payload) {
  if (payload.size() > kMaxFrame) throw ProviderError("guidance message too large");
  Writer prefix;
  prefix.u32(static_cast<std::uint32_t>(payload.size()));
  for (const std::vector<std::uint8_t>* buf : {&std::as_const(prefix.bytes), &payload}) {
    const std::uint8_t* p = buf->data();
    std::size_t n = buf->size();
    while (n > 0) {
      const ssize_t sent = ::send(fd, p, n, MSG_NOSIGNAL);
      if (sent < 0) {
        if (errno == EINTR) continue;
        throw ProviderError(std::string("write failed: ") + std::strerror(errno));
      }
      p += sent;
      n -= static_cast<std::size_t>(sent);
    }
  }
}

std::vector<std::uint8_t> read_frame(int fd, std::chrono::milliseconds timeout) {
  std::array<std::uint8_t, 4> len{};
  read_exact(fd, len.data(), 4, timeout);
  const std::uint32_t n = len[0] | (len[1] << 8) | (len[2] << 16) | (static_cast<std::uint32_t>(len[3]) << 24);
  if (n > kMaxFrame) throw ProviderError("guidance message too large");
  std::vector<std::uint8_t> payload(n);
  read_exact(fd, payload.data(), n, timeout);
  return payload;
}

SocketProvider::SocketProvider(std::string address, std::chrono::milliseconds timeout)
    : address_(std::move(address)), timeout_(timeout) {
  if (address_.rfind("unix:", 0) != 0 && address_.rfind("tcp:", 0) != 0) {
    throw InvalidParameter("socket address must start with unix: or tcp:, got '" + address_ + "'");
  }
}

SocketProvider::~SocketProvider() { disconnect(); }

void SocketProvider::disconnect() {
  if (fd_ >= 0) ::close(fd_);
  fd_ = -1;
}

void SocketProvider::connect() {
  if (fd_ >= 0) return;
  if (address_.rfind("unix:", 0) == 0) {
    const std::string path = address_.substr(5);
    sockaddr_un addr{};
    addr.sun_family = AF_UNIX;
    if (path.size() >= sizeof(addr.sun_path)) throw ProviderError("unix socket path too long");
    std::memcpy(addr.sun_path, path.c_str(), path.size() + 1);
    fd_ = ::socket(AF_UNIX, SOCK_STREAM, 0);
    if (fd_ < 0 || ::connect(fd_, reinterpret_cast<sockaddr*>(&addr), sizeof(addr)) != 0) {
      const std::string err = std::strerror(errno);
      disconnect();
      throw ProviderError("cannot connect to " + address_ + ": " + err);
    }
    return;
  }
  const std::string rest = address_.substr(4);
  const auto colon = rest.rfind(':');
  if (colon == std::string::npos) throw ProviderError("tcp address needs host:port");
  const std::string host = rest.substr(0, colon), port = rest.substr(colon + 1);
  addrinfo hints{};
  hints.ai_family = AF_UNSPEC;
  hints.ai_socktype = SOCK_STREAM;
  addrinfo* res = nullptr;
  if (const int rc = ::getaddrinfo(host.c_str(), port.c_str(), &hints, &res); rc != 0) {
    throw ProviderError("cannot resolve " + host + ": " + gai_strerror(rc));
  }
  for (addrinfo* a = res; a; a = a->ai_next) {
    fd_ = ::socket(a->ai_family, a->ai_socktype, a->ai_protocol);
    if (fd_ >= 0 && ::connect(fd_, a->ai_addr, a->ai_addrlen) == 0) break;
    disconnect();
  }
  ::freeaddrinfo(res);
  if (fd_ < 0) throw ProviderError("cannot connect to " + address_);
}

GuidanceResponse SocketProvider::guide(const GuidanceRequest& request) {
  try {
    connect();
    write_frame(fd_, encode_request(request));
    return decode_response(read_frame(fd_, timeout_), request.image.width, request.image.height);
  } catch (const ProviderError&) {
    disconnect();  // resynchronise on the next request
    throw;
  }
}

// ------------------------------------------------------------------ sampling

PoseDraw sample_guidance_pose(const std::vector<Pose>& track, const Pose& canonical, int guidance_iteration,
                              const PoseSamplerConfig& config, std::mt19937_64& rng) {
  PoseDraw d;
  if (track.empty()) {
    d.pose = canonical;
    d.canonical = true;
    return d;
  }
  const auto pick_posed = [&] {
    std::uniform_int_distribution<std::size_t> pick(0, track.size() - 1);
    return track[pick(rng)];
  };
  if (guidance_iteration < config.zoom_start) {
    std::uniform_int_distribution<std::size_t> pick(0, track.size());
    const auto i = pick(rng);
    d.canonical = i == track.size();
    d.pose = d.canonical ? canonical : track[i];
    return d;
  }
  std::uniform_int_distribution<int> mode(0, 4);
  switch (mode(rng)) {
    case 0:
      d.pose = canonical;
      d.canonical = true;
      break;
    case 1: d.pose = pick_posed(); break;
    case 2: d.pose = pick_posed(); d.mode = ViewMode::Head; break;
    case 3: d.pose = pick_posed(); d.mode = ViewMode::Upper; break;
    default: d.pose = pick_posed(); d.mode = ViewMode::Lower; break;
  }
  return d;
}

ViewTag view_tag(const Eigen::Vector3d& eye, const Eigen::Vector3d& pelvis, const Eigen::Matrix3d& body_rotation) {
  Eigen::Vector3d facing = body_rotation * Eigen::Vector3d::UnitZ();
  Eigen::Vector3d to_eye = eye - pelvis;
  facing.y() = 0;
  to_eye.y() = 0;
  if (facing.norm() < 1e-9 || to_eye.norm() < 1e-9) return ViewTag::Side;  // looking straight down or up
  const double angle = std::acos(std::clamp(facing.normalized().dot(to_eye.normalized()), -1.0, 1.0));
  if (angle <= std::numbers::pi / 4) return ViewTag::Front;
  if (angle >= 3 * std::numbers::pi / 4) return ViewTag::Back;
  return ViewTag::Side;
}

namespace {

Eigen::Vector3d anchor(const Eigen::Matrix3Xd& joints, ViewMode mode) {
  switch (mode) {
    case ViewMode::Head: return joints.col(15);
    case ViewMode::Upper: return joints.col(9);
    case ViewMode::Lower: return 0.5 * (joints.col(4) + joints.col(5));
    case ViewMode::Full: break;
  }
  return joints.col(0);
}

}  // namespace

VirtualView virtual_camera_at(const CameraSamplerConfig& config, const Eigen::Matrix3Xd& posed_joints,
                              const Eigen::Matrix3d& body_rotation, ViewMode mode, double azimuth,
                              double elevation) {
  if (posed_joints.cols() < kSmplJoints) throw ShapeMismatch("virtual cameras need the 24 SMPL joints");
  VirtualView v;
  v.azimuth = azimuth;
  v.elevation = elevation;
  const Eigen::Vector3d pelvis = posed_joints.col(0);
  const Eigen::Vector3d dir(std::cos(elevation) * std::sin(azimuth), std::sin(elevation),
                            std::cos(elevation) * std::cos(azimuth));
  v.eye = pelvis + config.radius * dir;
  v.target = anchor(posed_joints, mode);
  const double focal = mode == ViewMode::Full ? config.focal : config.focal * config.zoom_focal_factor;
  v.camera = look_at<double>(v.eye, v.target, Eigen::Vector3d::UnitY(), focal, config.width, config.height);
  v.tag = view_tag(v.eye, pelvis, body_rotation);
  return v;
}

VirtualView sample_virtual_camera(const CameraSamplerConfig& config, const Eigen::Matrix3Xd& posed_joints,
                                  const Eigen::Matrix3d& body_rotation, ViewMode mode, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> az(config.azimuth_min, config.azimuth_max);
  std::uniform_real_distribution<double> el(config.elevation_min, config.elevation_max);
  const double a = az(rng);
  const double e = el(rng);
  return virtual_camera_at(config, posed_joints, body_rotation, mode, a, e);
}

TimestepSchedule TimestepSchedule::fixed_floor() {
  TimestepSchedule s;
  s.min_start = s.min_end = 0.2;
  s.max_start = 0.98;
  s.max_end = 0.3;
  return s;
}

Timestep timestep_bounds(int guidance_iteration, const TimestepSchedule& schedule) {
  double f = 0;
  if (guidance_iteration >= schedule.hold) {
    f = schedule.decay > 0 ? std::min(1.0, double(guidance_iteration - schedule.hold) / schedule.decay) : 1.0;
  }
  Timestep t;
  t.tau_min = (1 - f) * schedule.min_start + f * schedule.min_end;
  t.tau_max = (1 - f) * schedule.max_start + f * schedule.max_end;
  return t;
}

Timestep anneal_timestep(int guidance_iteration, const TimestepSchedule& schedule, std::mt19937_64& rng) {
  Timestep t = timestep_bounds(guidance_iteration, schedule);
  std::uniform_real_distribution<double> u(t.tau_min, t.tau_max);
  t.tau = u(rng);
  return t;
}

Eigen::Matrix<float, 3, Eigen::Dynamic> body25_keypoints(const Eigen::Matrix3Xd& smpl_joints,
                                                         const Camera<double>& cam) {
  // BODY_25 index -> SMPL joint (-1: no counterpart)
  static constexpr std::array<int, kBody25> from_smpl{15, 12, 17, 19, 21, 16, 18, 20, 0,  2,  5,  8, 1,
                                                      4,  7,  -1, -1, -1, -1, 10, 10, 7, 11, 11, 8};
  static constexpr std::array<bool, kBody25> approximate{true,  false, false, false, false, false, false,
                                                         false, false, false, false, false, false, false,
                                                         false, false, false, false, false, false, true,
                                                         true,  false, true,  true};
  Eigen::Matrix<float, 3, Eigen::Dynamic> out = Eigen::Matrix<float, 3, Eigen::Dynamic>::Zero(3, kBody25);
  for (int k = 0; k < kBody25; ++k) {
    const int s = from_smpl[static_cast<std::size_t>(k)];
    if (s < 0 || s >= smpl_joints.cols()) continue;
    const Eigen::Vector3d p = cam.rotation * smpl_joints.col(s) + cam.translation;
    if (p.z() <= 0.01) continue;
    const double u = cam.fx * p.x() / p.z() + cam.cx, v = cam.fy * p.y() / p.z() + cam.cy;
    out(0, k) = static_cast<float>(u);
    out(1, k) = static_cast<float>(v);
    const bool inside = u >= 0 && v >= 0 && u <= cam.width - 1 && v <= cam.height - 1;
    out(2, k) = inside ? (approximate[static_cast<std::size_t>(k)] ? 0.5f : 1.0f) : 0.0f;
  }
  return out;
}

GuidanceDraw draw_guidance(const Human& human, const GuidanceConfig& config, int guidance_iteration,
                           std::mt19937_64& rng) {
  GuidanceDraw d;
  d.pose = sample_guidance_pose(human.track, Pose::zero(human.skeleton.size()), guidance_iteration, config.pose, rng);
  d.joints = posed_joints(human.skeleton, d.pose.pose);
  const Eigen::Matrix3d body_rotation = joint_transforms(human.skeleton, d.pose.pose)[0].rotation;
  d.view = sample_virtual_camera(config.camera, d.joints, body_rotation, d.pose.mode, rng);
  d.timestep = anneal_timestep(guidance_iteration, config.timestep, rng);
  return d;
}

GuidanceOutcome apply_guidance(const Scene& scene, int j, GuidanceProvider& provider, const GuidanceConfig& config,
                               int guidance_iteration, std::mt19937_64& rng) {
  const Human& human = scene.human(j);
  GuidanceOutcome out;
  const GuidanceDraw draw = draw_guidance(human, config, guidance_iteration, rng);
  const VirtualView& view = draw.view;
  out.tag = view.tag;
  out.mode = draw.pose.mode;
  out.tau = draw.timestep.tau;
  out.tau_max = draw.timestep.tau_max;

  const Composition comp = compose_human(scene, j, draw.pose.pose);
  RenderSettings settings;
  settings.background = config.fill;
  const RenderOutput<double> rendered = render(comp.cloud, view.camera, settings);

  GuidanceRequest request;
  request.person = static_cast<std::uint32_t>(j);
  request.tau = static_cast<float>(draw.timestep.tau);
  request.tag = view.tag;
  request.joints = body25_keypoints(draw.joints, view.camera);
  request.image = rendered.color.cast<float>();

  GuidanceResponse response;
  try {
    response = provider.guide(request);
    if (!response.grad.same_shape(request.image)) throw ProviderError("gradient image has the wrong shape");
    if (!response.grad.data.allFinite()) throw ProviderError("gradient image is not finite");
  } catch (const ProviderError& e) {
    spdlog::warn("guidance for human {} skipped: {}", j, e.what());
    return out;
  }
  const CloudGrads<double> cloud_grads = rasterize_backward(rendered, response.grad.cast<double>());
  out.grads = deform_backward(human.gaussians, comp.layers.front().deformation, cloud_grads);
  out.diagnostic = response.diagnostic;
  out.applied = true;
  return out;
}

}  // namespace glimpse
