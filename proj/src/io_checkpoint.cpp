#include "glimpse/io.hpp"

#include <bit>
#include <cstring>
#include <fstream>

namespace glimpse::io {

namespace {

constexpr char kMagic[8] = {'G', 'L', 'I', 'M', 'P', 'S', 'E', '\0'};

constexpr std::uint32_t tag(const char (&s)[5]) {
  return std::uint32_t(std::uint8_t(s[0])) | std::uint32_t(std::uint8_t(s[1])) << 8 |
         std::uint32_t(std::uint8_t(s[2])) << 16 | std::uint32_t(std::uint8_t(s[3])) << 24;
}

constexpr std::uint32_t kMeta = tag("META"), kCameras = tag("CAMS"), kBackground = tag("BGND"),
                        kHuman = tag("HUMN"), kOptimBackground = tag("OPBG"), kOptimHuman = tag("OPHU"),
                        kEnd = tag("END ");

class Writer {
public:
  std::vector<std::uint8_t> bytes;

  void u8(std::uint8_t v) { bytes.push_back(v); }
  void u32(std::uint32_t v) {
    for (int k = 0; k < 4; ++k) bytes.push_back(std::uint8_t(v >> (8 * k)));
  }
  void u64(std::uint64_t v) {
    for (int k = 0; k < 8; ++k) bytes.push_back(std::uint8_t(v >> (8 * k)));
  }
  void i32(std::int32_t v) { u32(static_cast<std::uint32_t>(v)); }
  void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }

  template <typename Derived> void matrix(const Eigen::DenseBase<Derived>& m) {
    u64(static_cast<std::uint64_t>(m.rows()));
    u64(static_cast<std::uint64_t>(m.cols()));
    for (Eigen::Index c = 0; c < m.cols(); ++c)
      for (Eigen::Index r = 0; r < m.rows(); ++r) f64(static_cast<double>(m(r, c)));
  }

  void chunk(std::uint32_t id, const Writer& body) {
    u32(id);
    u64(body.bytes.size());
    bytes.insert(bytes.end(), body.bytes.begin(), body.bytes.end());
  }
};

class Reader {
public:
  Reader(const std::uint8_t* data, std::size_t size) : p_(data), end_(data + size) {}

  std::size_t remaining() const { return static_cast<std::size_t>(end_ - p_); }

  const std::uint8_t* take(std::size_t n) {
    if (remaining() < n) throw TruncationError("checkpoint ends unexpectedly");
    const auto* out = p_;
    p_ += n;
    return out;
  }
  std::uint8_t u8() { return *take(1); }
  std::uint32_t u32() {
    const auto* b = take(4);
    return std::uint32_t(b[0]) | std::uint32_t(b[1]) << 8 | std::uint32_t(b[2]) << 16 | std::uint32_t(b[3]) << 24;
  }
  std::uint64_t u64() {
    const auto* b = take(8);
    std::uint64_t v = 0;
    for (int k = 7; k >= 0; --k) v = (v << 8) | b[k];
    return v;
  }
  std::int32_t i32() { return static_cast<std::int32_t>(u32()); }
  double f64() { return std::bit_cast<double>(u64()); }

  /// Element count bounded by the bytes left, so corrupt sizes fail cleanly.
  Eigen::Index count(std::size_t element_bytes) {
    const auto n = u64();
    if (element_bytes > 0 && n > remaining() / element_bytes) throw TruncationError("checkpoint ends unexpectedly");
    return static_cast<Eigen::Index>(n);
  }

  template <typename M> M matrix() {
    const auto rows = u64();
    const auto cols = u64();
    if (rows != 0 && cols > remaining() / 8 / rows) throw TruncationError("checkpoint ends unexpectedly");
    M m(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
    for (Eigen::Index c = 0; c < m.cols(); ++c)
      for (Eigen::Index r = 0; r < m.rows(); ++r) m(r, c) = static_cast<typename M::Scalar>(f64());
    return m;
  }

private:
  const std::uint8_t* p_;
  const std::uint8_t* end_;
};

template <typename M> M fixed_rows(Reader& r, Eigen::Index rows, const char* what) {
  auto m = r.template matrix<Eigen::MatrixXd>();
  if (m.rows() != rows && m.size() != 0) throw FormatError(std::string("checkpoint: bad ") + what + " shape");
  return M(m);
}

void put_params(Writer& w, const GaussianParams<double>& p) {
  w.matrix(p.centers);
  w.matrix(p.rotations);
  w.matrix(p.log_scales);
  w.matrix(p.colors);
  w.matrix(p.opacity_logits);
}

GaussianParams<double> get_params(Reader& r) {
  GaussianParams<double> p;
  p.centers = fixed_rows<Mat3X<double>>(r, 3, "centre");
  p.rotations = fixed_rows<Mat4X<double>>(r, 4, "rotation");
  p.log_scales = fixed_rows<Mat3X<double>>(r, 3, "scale");
  p.colors = fixed_rows<Mat3X<double>>(r, 3, "colour");
  p.opacity_logits = r.matrix<Eigen::VectorXd>();
  if (!p.consistent()) throw FormatError("checkpoint: Gaussian attribute lengths differ");
  return p;
}

void put_set(Writer& w, const GaussianSet<double>& s) {
  w.u8(static_cast<std::uint8_t>(s.space()));
  put_params(w, s.params());
}

GaussianSet<double> get_set(Reader& r) {
  const auto space = r.u8();
  if (space > 1) throw FormatError("checkpoint: unknown coordinate space");
  return GaussianSet<double>(static_cast<Space>(space), get_params(r));
}

void put_camera(Writer& w, const Camera<double>& c) {
  for (double v : {c.fx, c.fy, c.cx, c.cy}) w.f64(v);
  w.i32(c.width);
  w.i32(c.height);
  w.matrix(c.rotation);
  w.matrix(c.translation);
}

Camera<double> get_camera(Reader& r) {
  Camera<double> c;
  c.fx = r.f64();
  c.fy = r.f64();
  c.cx = r.f64();
  c.cy = r.f64();
  c.width = r.i32();
  c.height = r.i32();
  const auto rot = r.matrix<Eigen::MatrixXd>();
  const auto t = r.matrix<Eigen::MatrixXd>();
  if (rot.rows() != 3 || rot.cols() != 3 || t.size() != 3) throw FormatError("checkpoint: bad camera");
  c.rotation = rot;
  c.translation = Eigen::Map<const Eigen::Vector3d>(t.data());
  return c;
}

void put_human(Writer& w, const Human& h) {
  put_set(w, h.gaussians);
  w.u32(static_cast<std::uint32_t>(h.skeleton.parents.size()));
  for (int p : h.skeleton.parents) w.i32(p);
  w.matrix(h.skeleton.rest);
  w.matrix(h.mesh.vertices);
  w.matrix(h.mesh.weights);
  w.u64(h.mesh.faces.size());
  for (const auto& f : h.mesh.faces)
    for (int k = 0; k < 3; ++k) w.i32(f[k]);
  w.matrix(h.grid.origin);
  w.f64(h.grid.voxel);
  for (int k = 0; k < 3; ++k) w.i32(h.grid.dims[k]);
  w.matrix(h.grid.weights);
  w.u64(h.track.size());
  for (const auto& p : h.track) {
    w.matrix(p.axis_angles);
    w.matrix(p.translation);
  }
}

Human get_human(Reader& r) {
  Human h;
  h.gaussians = get_set(r);
  const auto joints = r.u32();
  if (joints > r.remaining() / 4) throw TruncationError("checkpoint ends unexpectedly");
  for (std::uint32_t j = 0; j < joints; ++j) h.skeleton.parents.push_back(r.i32());
  h.skeleton.rest = fixed_rows<Eigen::Matrix3Xd>(r, 3, "skeleton");
  h.mesh.vertices = fixed_rows<Eigen::Matrix3Xd>(r, 3, "mesh");
  h.mesh.weights = r.matrix<Eigen::MatrixXd>();
  const auto faces = r.count(12);
  for (Eigen::Index f = 0; f < faces; ++f) {
    const int a = r.i32(), b = r.i32(), c = r.i32();
    h.mesh.faces.emplace_back(a, b, c);
  }
  const auto origin = r.matrix<Eigen::MatrixXd>();
  if (origin.size() != 3) throw FormatError("checkpoint: bad grid origin");
  h.grid.origin = Eigen::Map<const Eigen::Vector3d>(origin.data());
  h.grid.voxel = r.f64();
  for (int k = 0; k < 3; ++k) h.grid.dims[k] = r.i32();
  h.grid.weights = r.matrix<Eigen::MatrixXd>();
  const auto poses = r.count(32);
  for (Eigen::Index k = 0; k < poses; ++k) {
    Pose p;
    p.axis_angles = fixed_rows<Eigen::Matrix3Xd>(r, 3, "pose");
    const auto t = r.matrix<Eigen::MatrixXd>();
    if (t.size() != 3) throw FormatError("checkpoint: bad pose translation");
    p.translation = Eigen::Map<const Eigen::Vector3d>(t.data());
    h.track.push_back(std::move(p));
  }
  return h;
}

void put_state(Writer& w, const OptimState& s) {
  put_params(w, s.m);
  put_params(w, s.v);
  w.i32(s.step);
  for (int u : s.updates) w.i32(u);
  const auto& r = s.rates;
  for (double v : {r.center_start, r.center_end, r.color, r.opacity, r.scale, r.rotation}) w.f64(v);
  w.i32(s.decay_steps);
  w.matrix(s.grad_accum);
  w.u64(static_cast<std::uint64_t>(s.views.size()));
  for (Eigen::Index i = 0; i < s.views.size(); ++i) w.i32(s.views[i]);
  w.matrix(s.center_accum);
}

OptimState get_state(Reader& r) {
  OptimState s;
  s.m = get_params(r);
  s.v = get_params(r);
  s.step = r.i32();
  for (auto& u : s.updates) u = r.i32();
  auto& rt = s.rates;
  for (double* v : {&rt.center_start, &rt.center_end, &rt.color, &rt.opacity, &rt.scale, &rt.rotation}) *v = r.f64();
  s.decay_steps = r.i32();
  s.grad_accum = r.matrix<Eigen::VectorXd>();
  s.views.resize(r.count(4));
  for (Eigen::Index i = 0; i < s.views.size(); ++i) s.views[i] = r.i32();
  s.center_accum = fixed_rows<Mat3X<double>>(r, 3, "optimizer");
  return s;
}

}  // namespace

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ck) {
  const auto& scene = ck.scene;
  Writer out;
  out.bytes.insert(out.bytes.end(), kMagic, kMagic + 8);
  out.u32(kCheckpointVersion);

  Writer meta;
  meta.i32(scene.frames);
  meta.u32(static_cast<std::uint32_t>(scene.humans.size()));
  meta.u8(scene.sphere.has_value());
  const BackgroundSphere sphere = scene.sphere.value_or(BackgroundSphere{});
  meta.matrix(sphere.center);
  meta.f64(sphere.radius);
  out.chunk(kMeta, meta);

  Writer cams;
  cams.u64(scene.cameras.size());
  for (const auto& c : scene.cameras) put_camera(cams, c);
  out.chunk(kCameras, cams);

  Writer bg;
  put_set(bg, scene.background);
  out.chunk(kBackground, bg);

  for (std::size_t j = 0; j < scene.humans.size(); ++j) {
    Writer h;
    h.u32(static_cast<std::uint32_t>(j));
    h.u8(scene.humans[j].has_value());
    if (scene.humans[j]) put_human(h, *scene.humans[j]);
    out.chunk(kHuman, h);
  }
  if (ck.background_state) {
    Writer s;
    put_state(s, *ck.background_state);
    out.chunk(kOptimBackground, s);
  }
  for (std::size_t j = 0; j < ck.human_states.size(); ++j) {
    if (!ck.human_states[j]) continue;
    Writer s;
    s.u32(static_cast<std::uint32_t>(j));
    put_state(s, *ck.human_states[j]);
    out.chunk(kOptimHuman, s);
  }
  out.chunk(kEnd, Writer{});
  return std::move(out.bytes);
}

Checkpoint decode_checkpoint(const std::vector<std::uint8_t>& bytes) {
  Reader r(bytes.data(), bytes.size());
  if (bytes.size() < 8) throw TruncationError("checkpoint ends unexpectedly");
  if (std::memcmp(r.take(8), kMagic, 8) != 0) throw FormatError("not a checkpoint file (bad magic)");
  const auto version = r.u32();
  if (version > kCheckpointVersion) {
    throw VersionError("checkpoint format version " + std::to_string(version) + " is newer than supported version " +
                       std::to_string(kCheckpointVersion));
  }
  if (version == 0) throw VersionError("checkpoint format version 0 is invalid");

  Checkpoint ck;
  bool saw_meta = false, saw_end = false;
  while (!saw_end) {
    const auto id = r.u32();
    const auto len = r.u64();
    if (len > r.remaining()) throw TruncationError("checkpoint ends unexpectedly");
    Reader body(r.take(static_cast<std::size_t>(len)), static_cast<std::size_t>(len));
    if (id == kMeta) {
      ck.scene.frames = body.i32();
      ck.scene.humans.resize(body.u32());
      const bool has_sphere = body.u8() != 0;
      const auto c = body.matrix<Eigen::MatrixXd>();
      const double radius = body.f64();
      if (c.size() != 3) throw FormatError("checkpoint: bad sphere centre");
      if (has_sphere) ck.scene.sphere = BackgroundSphere{Eigen::Map<const Eigen::Vector3d>(c.data()), radius};
      saw_meta = true;
    } else if (id == kCameras) {
      const auto n = body.count(4 * 8 + 8);
      for (Eigen::Index k = 0; k < n; ++k) ck.scene.cameras.push_back(get_camera(body));
    } else if (id == kBackground) {
      ck.scene.background = get_set(body);
    } else if (id == kHuman || id == kOptimHuman) {
      const auto slot = body.u32();
      if (!saw_meta || slot >= ck.scene.humans.size()) throw FormatError("checkpoint: human slot out of range");
      if (id == kHuman) {
        if (body.u8()) ck.scene.humans[slot] = get_human(body);
      } else {
        ck.human_states.resize(ck.scene.humans.size());
        ck.human_states[slot] = get_state(body);
      }
    } else if (id == kOptimBackground) {
      ck.background_state = get_state(body);
    } else if (id == kEnd) {
      saw_end = true;
    }
    // unknown chunks are skipped
  }
  if (!saw_meta) throw FormatError("checkpoint has no scene header");
  try {
    ck.scene.validate();
  } catch (const Error& e) {
    throw FormatError(std::string("checkpoint holds an invalid scene: ") + e.what());
  }
  return ck;
}

void save_checkpoint(const fs::path& path, const Checkpoint& checkpoint) {
  const auto bytes = encode_checkpoint(checkpoint);
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw IoError("cannot write " + tmp.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    out.flush();
    if (!out) throw IoError("write failed: " + tmp.string());
  }
  fs::rename(tmp, path);
}

Checkpoint load_checkpoint(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  try {
    return decode_checkpoint(bytes);
  } catch (const TruncationError& e) {
    throw TruncationError(path.string() + ": " + e.what());
  } catch (const VersionError& e) {
    throw VersionError(path.string() + ": " + e.what());
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

}  // namespace glimpse::io
