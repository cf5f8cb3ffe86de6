#include "glimpse/io.hpp"

#include <cctype>
#include <charconv>
#include <cstring>
#include <fstream>
#include <sstream>

namespace glimpse::io {

namespace {

struct Line {
  int number;
  std::vector<std::string_view> tokens;
};

/// Reads a whitespace-separated text file, skipping blanks and '#' comments.
class TextFile {
public:
  explicit TextFile(const fs::path& path) : path_(path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    text_ = ss.str();
    std::size_t pos = 0;
    int number = 0;
    while (pos <= text_.size()) {
      const auto end = std::min(text_.find('\n', pos), text_.size());
      ++number;
      std::string_view line(text_.data() + pos, end - pos);
      if (const auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
      Line l{number, {}};
      std::size_t i = 0;
      while (i < line.size()) {
        while (i < line.size() && std::isspace(static_cast<unsigned char>(line[i]))) ++i;
        const auto start = i;
        while (i < line.size() && !std::isspace(static_cast<unsigned char>(line[i]))) ++i;
        if (i > start) l.tokens.push_back(line.substr(start, i - start));
      }
      if (!l.tokens.empty()) lines_.push_back(std::move(l));
      pos = end + 1;
    }
  }

  const std::vector<Line>& lines() const { return lines_; }

  [[noreturn]] void fail(const Line& line, const std::string& msg) const {
    throw FormatError(path_.string() + ":" + std::to_string(line.number) + ": " + msg);
  }

  void expect_tokens(const Line& line, std::size_t n) const {
    if (line.tokens.size() != n) {
      fail(line, "expected " + std::to_string(n) + " values, found " + std::to_string(line.tokens.size()));
    }
  }

  template <typename T> T number(const Line& line, std::size_t k) const {
    const auto tok = line.tokens[k];
    T value{};
    const auto* first = tok.data();
    if (!tok.empty() && tok.front() == '+') ++first;
    const auto [ptr, ec] = std::from_chars(first, tok.data() + tok.size(), value);
    if (ec != std::errc() || ptr != tok.data() + tok.size()) {
      fail(line, "value " + std::to_string(k + 1) + " ('" + std::string(tok) + "') is not a number");
    }
    if constexpr (std::is_floating_point_v<T>) {
      if (!std::isfinite(value)) fail(line, "value " + std::to_string(k + 1) + " is not finite");
    }
    return value;
  }

private:
  fs::path path_;
  std::string text_;
  std::vector<Line> lines_;
};

/// Shortest round-trip decimal form.
std::string fmt(double v) {
  char buf[32];
  const auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, ptr);
}

std::ofstream open_out(const fs::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  return out;
}

void finish(std::ofstream& out, const fs::path& path) {
  out.flush();
  if (!out) throw IoError("write failed: " + path.string());
}

}  // namespace

std::vector<Camera<double>> read_cameras(const fs::path& path) {
  TextFile f(path);
  std::vector<Camera<double>> out;
  for (const auto& l : f.lines()) {
    f.expect_tokens(l, 18);
    Camera<double> c;
    c.fx = f.number<double>(l, 0);
    c.fy = f.number<double>(l, 1);
    c.cx = f.number<double>(l, 2);
    c.cy = f.number<double>(l, 3);
    c.width = f.number<int>(l, 4);
    c.height = f.number<int>(l, 5);
    for (int k = 0; k < 9; ++k) c.rotation(k / 3, k % 3) = f.number<double>(l, 6 + static_cast<std::size_t>(k));
    for (int k = 0; k < 3; ++k) c.translation[k] = f.number<double>(l, 15 + static_cast<std::size_t>(k));
    try {
      c.validate();
    } catch (const InvalidParameter& e) {
      f.fail(l, e.what());
    }
    out.push_back(c);
  }
  return out;
}

void write_cameras(const fs::path& path, const std::vector<Camera<double>>& cameras) {
  auto out = open_out(path);
  out << "# fx fy cx cy width height R(row-major, world to camera) t\n";
  for (const auto& c : cameras) {
    out << fmt(c.fx) << ' ' << fmt(c.fy) << ' ' << fmt(c.cx) << ' ' << fmt(c.cy) << ' ' << c.width << ' '
        << c.height;
    for (int k = 0; k < 9; ++k) out << ' ' << fmt(c.rotation(k / 3, k % 3));
    for (int k = 0; k < 3; ++k) out << ' ' << fmt(c.translation[k]);
    out << '\n';
  }
  finish(out, path);
}

std::vector<Pose> read_poses(const fs::path& path, int joints) {
  TextFile f(path);
  std::vector<Pose> out;
  const auto n = static_cast<std::size_t>(3 * joints + 3);
  for (const auto& l : f.lines()) {
    f.expect_tokens(l, n);
    Pose p = Pose::zero(joints);
    for (int j = 0; j < joints; ++j)
      for (int a = 0; a < 3; ++a) p.axis_angles(a, j) = f.number<double>(l, static_cast<std::size_t>(3 * j + a));
    for (int a = 0; a < 3; ++a) p.translation[a] = f.number<double>(l, static_cast<std::size_t>(3 * joints + a));
    out.push_back(p.normalized());
  }
  return out;
}

void write_poses(const fs::path& path, const std::vector<Pose>& poses) {
  auto out = open_out(path);
  out << "# per frame: axis-angle per joint (x y z), then root translation\n";
  for (const auto& p : poses) {
    for (Eigen::Index j = 0; j < p.axis_angles.cols(); ++j)
      for (int a = 0; a < 3; ++a) out << fmt(p.axis_angles(a, j)) << ' ';
    out << fmt(p.translation.x()) << ' ' << fmt(p.translation.y()) << ' ' << fmt(p.translation.z()) << '\n';
  }
  finish(out, path);
}

Skeleton read_skeleton(const fs::path& path) {
  TextFile f(path);
  Skeleton s;
  s.rest.resize(3, static_cast<Eigen::Index>(f.lines().size()));
  Eigen::Index j = 0;
  for (const auto& l : f.lines()) {
    f.expect_tokens(l, 4);
    s.parents.push_back(f.number<int>(l, 0));
    for (int a = 0; a < 3; ++a) s.rest(a, j) = f.number<double>(l, 1 + static_cast<std::size_t>(a));
    ++j;
  }
  try {
    s.validate();
  } catch (const Error& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
  return s;
}

void write_skeleton(const fs::path& path, const Skeleton& skeleton) {
  auto out = open_out(path);
  out << "# parent x y z\n";
  for (std::size_t j = 0; j < skeleton.parents.size(); ++j) {
    const auto c = static_cast<Eigen::Index>(j);
    out << skeleton.parents[j] << ' ' << fmt(skeleton.rest(0, c)) << ' ' << fmt(skeleton.rest(1, c)) << ' '
        << fmt(skeleton.rest(2, c)) << '\n';
  }
  finish(out, path);
}

TemplateMesh read_obj(const fs::path& path) {
  TextFile f(path);
  std::vector<Eigen::Vector3d> verts;
  TemplateMesh mesh;
  std::vector<const Line*> face_lines;
  for (const auto& l : f.lines()) {
    if (l.tokens[0] == "v") {
      if (l.tokens.size() < 4) f.fail(l, "vertex needs three coordinates");
      verts.emplace_back(f.number<double>(l, 1), f.number<double>(l, 2), f.number<double>(l, 3));
    } else if (l.tokens[0] == "f") {
      face_lines.push_back(&l);
    }
  }
  const auto nv = static_cast<int>(verts.size());
  for (const Line* l : face_lines) {
    if (l->tokens.size() < 4) f.fail(*l, "face needs at least three vertices");
    std::vector<int> idx;
    for (std::size_t k = 1; k < l->tokens.size(); ++k) {
      auto tok = l->tokens[k];
      tok = tok.substr(0, tok.find('/'));
      int v = 0;
      const auto [ptr, ec] = std::from_chars(tok.data(), tok.data() + tok.size(), v);
      if (ec != std::errc() || ptr != tok.data() + tok.size() || v == 0) f.fail(*l, "bad face index");
      v = v > 0 ? v - 1 : nv + v;  // negative indices count from the end
      if (v < 0 || v >= nv) f.fail(*l, "face index out of range");
      idx.push_back(v);
    }
    for (std::size_t k = 1; k + 1 < idx.size(); ++k) mesh.faces.emplace_back(idx[0], idx[k], idx[k + 1]);
  }
  mesh.vertices.resize(3, nv);
  for (int i = 0; i < nv; ++i) mesh.vertices.col(i) = verts[static_cast<std::size_t>(i)];
  return mesh;
}

void write_obj(const fs::path& path, const TemplateMesh& mesh) {
  auto out = open_out(path);
  for (Eigen::Index i = 0; i < mesh.vertices.cols(); ++i) {
    out << "v " << fmt(mesh.vertices(0, i)) << ' ' << fmt(mesh.vertices(1, i)) << ' ' << fmt(mesh.vertices(2, i))
        << '\n';
  }
  for (const auto& f : mesh.faces) out << "f " << f[0] + 1 << ' ' << f[1] + 1 << ' ' << f[2] + 1 << '\n';
  finish(out, path);
}

Eigen::MatrixXd read_weights(const fs::path& path) {
  TextFile f(path);
  const auto& lines = f.lines();
  if (lines.empty()) return {};
  const auto cols = lines.front().tokens.size();
  Eigen::MatrixXd w(static_cast<Eigen::Index>(lines.size()), static_cast<Eigen::Index>(cols));
  for (std::size_t r = 0; r < lines.size(); ++r) {
    f.expect_tokens(lines[r], cols);
    for (std::size_t c = 0; c < cols; ++c) {
      w(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = f.number<double>(lines[r], c);
    }
  }
  return w;
}

void write_weights(const fs::path& path, const Eigen::MatrixXd& weights) {
  auto out = open_out(path);
  for (Eigen::Index r = 0; r < weights.rows(); ++r) {
    for (Eigen::Index c = 0; c < weights.cols(); ++c) out << (c ? " " : "") << fmt(weights(r, c));
    out << '\n';
  }
  finish(out, path);
}

PointCloud read_points(const fs::path& path) {
  TextFile f(path);
  PointCloud pc;
  const auto n = static_cast<Eigen::Index>(f.lines().size());
  pc.points.resize(3, n);
  pc.colors.resize(3, n);
  Eigen::Index i = 0;
  for (const auto& l : f.lines()) {
    f.expect_tokens(l, 6);
    for (int a = 0; a < 3; ++a) {
      pc.points(a, i) = f.number<double>(l, static_cast<std::size_t>(a));
      pc.colors(a, i) = f.number<double>(l, static_cast<std::size_t>(3 + a));
    }
    ++i;
  }
  return pc;
}

void write_points(const fs::path& path, const PointCloud& cloud) {
  auto out = open_out(path);
  out << "# x y z r g b\n";
  for (Eigen::Index i = 0; i < cloud.points.cols(); ++i) {
    for (int a = 0; a < 3; ++a) out << fmt(cloud.points(a, i)) << ' ';
    out << fmt(cloud.colors(0, i)) << ' ' << fmt(cloud.colors(1, i)) << ' ' << fmt(cloud.colors(2, i)) << '\n';
  }
  finish(out, path);
}

void write_raw(const fs::path& path, const ImageD& image) {
  auto out = open_out(path);
  out << image.width << ' ' << image.height << ' ' << image.channels << '\n';
  for (Eigen::Index i = 0; i < image.data.size(); ++i) {
    const float v = static_cast<float>(image.data[i]);
    std::uint32_t bits;
    std::memcpy(&bits, &v, 4);
    const char b[4] = {char(bits & 0xff), char((bits >> 8) & 0xff), char((bits >> 16) & 0xff), char(bits >> 24)};
    out.write(b, 4);
  }
  finish(out, path);
}

}  // namespace glimpse::io
