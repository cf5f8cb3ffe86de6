#include "glimpse/io.hpp"

#include <json.hpp>

#include <algorithm>
#include <fstream>
#include <set>
#include <sstream>

namespace glimpse::io {

namespace {

using nlohmann::json;

constexpr int kDefaultSphereCount = 2000;

/// Reads keys out of a JSON object and rejects any it never asked about.
class Fields {
public:
  Fields(const json& obj, std::string where) : obj_(obj), where_(std::move(where)) {
    if (!obj.is_object()) throw FormatError(where_ + ": expected an object");
  }

  bool has(const std::string& key) {
    seen_.insert(key);
    return obj_.contains(key);
  }

  template <typename T> void get(const std::string& key, T& out) {
    if (!has(key)) return;
    try {
      out = obj_.at(key).get<T>();
    } catch (const json::exception&) {
      throw FormatError(where_ + "." + key + ": wrong type");
    }
  }

  const json& at(const std::string& key) {
    if (!has(key)) throw FormatError(where_ + ": missing \"" + key + "\"");
    return obj_.at(key);
  }

  std::string path(const std::string& key) const { return where_ + "." + key; }

  void finish() const {
    for (const auto& [key, value] : obj_.items()) {
      if (!seen_.count(key)) throw FormatError(where_ + ": unknown key \"" + key + "\"");
    }
  }

private:
  const json& obj_;
  std::string where_;
  std::set<std::string> seen_;
};

Eigen::Vector3d vec3(const json& j, const std::string& where) {
  if (!j.is_array() || j.size() != 3) throw FormatError(where + ": expected [x, y, z]");
  Eigen::Vector3d v;
  for (int k = 0; k < 3; ++k) {
    if (!j[k].is_number()) throw FormatError(where + ": expected numbers");
    v[k] = j[k].get<double>();
  }
  return v;
}

void apply_overrides(const json& j, TrainConfig& c) {
  Fields f(j, "config");
  if (f.has("schedule")) {
    Fields s(f.at("schedule"), f.path("schedule"));
    auto& v = c.schedule;
    s.get("background_iterations", v.background_iterations);
    s.get("background_densify_interval", v.background_densify_interval);
    s.get("background_densify_start", v.background_densify_start);
    s.get("background_densify_until", v.background_densify_until);
    s.get("warmup_iterations", v.warmup_iterations);
    s.get("joint_iterations", v.joint_iterations);
    s.get("center_freeze", v.center_freeze);
    s.get("opacity_clamp", v.opacity_clamp);
    s.get("human_densify", v.human_densify);
    s.get("prune_interval", v.prune_interval);
    s.finish();
  }
  if (f.has("weights")) {
    Fields s(f.at("weights"), f.path("weights"));
    auto& v = c.weights;
    s.get("rgb", v.rgb);
    s.get("ssim", v.ssim);
    s.get("lpips", v.lpips);
    s.get("sds", v.sds);
    s.get("hard_factor", v.hard_factor);
    s.get("background_reg", v.background_reg);
    s.finish();
  }
  if (f.has("rates")) {
    Fields s(f.at("rates"), f.path("rates"));
    auto& v = c.rates;
    s.get("center_start", v.center_start);
    s.get("center_end", v.center_end);
    s.get("color", v.color);
    s.get("opacity", v.opacity);
    s.get("scale", v.scale);
    s.get("rotation", v.rotation);
    s.finish();
  }
  if (f.has("densify")) {
    Fields s(f.at("densify"), f.path("densify"));
    auto& v = c.densify;
    s.get("grad_threshold", v.grad_threshold);
    s.get("split_fraction", v.split_fraction);
    s.get("prune_opacity", v.prune_opacity);
    s.get("human_max_scale", v.human_max_scale);
    s.get("background_scale_fraction", v.background_scale_fraction);
    s.finish();
  }
  if (f.has("guidance")) {
    Fields g(f.at("guidance"), f.path("guidance"));
    auto& v = c.guidance;
    if (g.has("camera")) {
      Fields s(g.at("camera"), g.path("camera"));
      auto& cam = v.camera;
      s.get("radius", cam.radius);
      s.get("azimuth_min", cam.azimuth_min);
      s.get("azimuth_max", cam.azimuth_max);
      s.get("elevation_min", cam.elevation_min);
      s.get("elevation_max", cam.elevation_max);
      s.get("width", cam.width);
      s.get("height", cam.height);
      s.get("focal", cam.focal);
      s.get("zoom_focal_factor", cam.zoom_focal_factor);
      s.finish();
    }
    if (g.has("zoom_start")) g.get("zoom_start", v.pose.zoom_start);
    if (g.has("timestep")) {
      Fields s(g.at("timestep"), g.path("timestep"));
      auto& ts = v.timestep;
      std::string variant;
      s.get("variant", variant);
      if (variant == "fixed_floor") ts = TimestepSchedule::fixed_floor();
      else if (!variant.empty() && variant != "annealed") throw FormatError(s.path("variant") + ": unknown variant");
      s.get("min_start", ts.min_start);
      s.get("max_start", ts.max_start);
      s.get("min_end", ts.min_end);
      s.get("max_end", ts.max_end);
      s.get("hold", ts.hold);
      s.get("decay", ts.decay);
      s.finish();
    }
    if (g.has("fill")) v.fill = vec3(g.at("fill"), g.path("fill"));
    g.finish();
  }
  if (f.has("render")) {
    Fields s(f.at("render"), f.path("render"));
    auto& v = c.render;
    if (s.has("background")) v.background = vec3(s.at("background"), s.path("background"));
    s.get("near_plane", v.near_plane);
    s.get("low_pass", v.low_pass);
    s.get("min_alpha", v.min_alpha);
    s.get("min_transmittance", v.min_transmittance);
    s.get("tile_size", v.tile_size);
    s.finish();
  }
  f.get("seed", c.seed);
  f.finish();
}

json parse_json_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  const std::string text = ss.str();
  try {
    return json::parse(text);
  } catch (const json::parse_error& e) {
    const auto upto = text.substr(0, std::min<std::size_t>(e.byte, text.size()));
    const auto line = 1 + std::count(upto.begin(), upto.end(), '\n');
    throw FormatError(path.string() + ":" + std::to_string(line) + ": invalid JSON");
  }
}

fs::path resolve(const fs::path& base, const json& j, const std::string& where) {
  if (!j.is_string()) throw FormatError(where + ": expected a path string");
  const fs::path p = j.get<std::string>();
  const fs::path full = p.is_absolute() ? p : base / p;
  if (!fs::exists(full)) throw IoError(where + ": missing file " + full.string());
  return full;
}

std::vector<fs::path> path_list(const fs::path& base, const json& j, const std::string& where) {
  if (!j.is_array()) throw FormatError(where + ": expected a list of paths");
  std::vector<fs::path> out;
  for (std::size_t i = 0; i < j.size(); ++i)
    out.push_back(resolve(base, j[i], where + "[" + std::to_string(i) + "]"));
  return out;
}

/// Mean posed root position over every human and frame.
std::optional<Eigen::Vector3d> mean_human_position(const Scene& scene) {
  Eigen::Vector3d sum = Eigen::Vector3d::Zero();
  int n = 0;
  for (const auto& h : scene.humans) {
    if (!h) continue;
    for (const auto& pose : h->track) {
      sum += posed_joints(h->skeleton, pose).col(0);
      ++n;
    }
  }
  if (n == 0) return std::nullopt;
  return Eigen::Vector3d(sum / n);
}

}  // namespace

void apply_config(const std::string& json_text, TrainConfig& config) {
  json j;
  try {
    j = json::parse(json_text);
  } catch (const json::parse_error&) {
    throw FormatError("config: invalid JSON");
  }
  apply_overrides(j, config);
}

Manifest load_manifest(const fs::path& path) {
  const json root = parse_json_file(path);
  const fs::path base = path.parent_path();
  const std::string where = path.string();
  Fields f(root, where);
  Manifest m;
  Scene& scene = m.scene;

  const auto frames = path_list(base, f.at("frames"), f.path("frames"));
  if (frames.empty()) throw FormatError(f.path("frames") + ": at least one frame is required");
  const int T = static_cast<int>(frames.size());
  scene.frames = T;

  scene.cameras = read_cameras(resolve(base, f.at("cameras"), f.path("cameras")));
  if (static_cast<int>(scene.cameras.size()) != T) {
    throw CountMismatch(where + ": " + std::to_string(scene.cameras.size()) + " cameras for " + std::to_string(T) +
                        " frames");
  }

  std::vector<fs::path> valid, people;
  for (auto [key, list] : {std::pair{"valid_masks", &valid}, std::pair{"people_masks", &people}}) {
    if (!f.has(key)) continue;
    *list = path_list(base, f.at(key), f.path(key));
    if (static_cast<int>(list->size()) != T) {
      throw CountMismatch(where + ": " + std::to_string(list->size()) + " " + key + " for " + std::to_string(T) +
                          " frames");
    }
  }

  if (f.has("humans")) {
    const json& humans = f.at("humans");
    if (!humans.is_array()) throw FormatError(f.path("humans") + ": expected a list");
    for (std::size_t j = 0; j < humans.size(); ++j) {
      const std::string hw = f.path("humans") + "[" + std::to_string(j) + "]";
      Fields h(humans[j], hw);
      TemplateMesh mesh = read_obj(resolve(base, h.at("mesh"), h.path("mesh")));
      mesh.weights = read_weights(resolve(base, h.at("weights"), h.path("weights")));
      Skeleton skeleton = read_skeleton(resolve(base, h.at("skeleton"), h.path("skeleton")));
      auto poses = read_poses(resolve(base, h.at("poses"), h.path("poses")), skeleton.size());
      if (static_cast<int>(poses.size()) != T) {
        throw CountMismatch(where + ": human " + std::to_string(j) + " has " + std::to_string(poses.size()) +
                            " poses for " + std::to_string(T) + " frames");
      }
      int resolution = 64;
      h.get("grid_resolution", resolution);
      h.finish();
      try {
        scene.humans.emplace_back(make_human(std::move(mesh), std::move(skeleton), std::move(poses), resolution));
      } catch (const InvalidParameter& e) {
        throw FormatError(hw + ": " + e.what());
      } catch (const ShapeMismatch& e) {
        throw FormatError(hw + ": " + e.what());
      }
    }
  }

  bool sphere = true;
  BackgroundSphere sphere_cfg;
  int sphere_count = kDefaultSphereCount;
  std::optional<Eigen::Vector3d> sphere_center;
  if (f.has("background")) {
    Fields b(f.at("background"), f.path("background"));
    if (b.has("points")) {
      const auto cloud = read_points(resolve(base, b.at("points"), b.path("points")));
      scene.background = init_background(cloud.points, cloud.colors);
      sphere = false;
    } else if (b.has("sphere")) {
      Fields s(b.at("sphere"), b.path("sphere"));
      s.get("radius", sphere_cfg.radius);
      s.get("count", sphere_count);
      if (s.has("center")) sphere_center = vec3(s.at("center"), s.path("center"));
      s.finish();
    }
    b.finish();
  }
  if (sphere) {
    if (!sphere_center) sphere_center = mean_human_position(scene);
    if (!sphere_center) {
      Eigen::Vector3d sum = Eigen::Vector3d::Zero();
      for (const auto& c : scene.cameras) sum += c.position();
      sphere_center = Eigen::Vector3d(sum / T);
    }
    sphere_cfg.center = *sphere_center;
    scene.background = init_background_sphere(sphere_cfg, sphere_count);
    scene.sphere = sphere_cfg;
  }

  if (f.has("config")) apply_overrides(f.at("config"), m.config);
  f.finish();
  scene.validate();

  m.observations.resize(static_cast<std::size_t>(T));
  for (int t = 0; t < T; ++t) {
    auto& o = m.observations[static_cast<std::size_t>(t)];
    o.image = read_png(frames[static_cast<std::size_t>(t)], 3);
    const auto& cam = scene.cameras[static_cast<std::size_t>(t)];
    if (o.image.width != cam.width || o.image.height != cam.height) {
      throw ShapeMismatch(frames[static_cast<std::size_t>(t)].string() + ": image size differs from camera " +
                          std::to_string(t));
    }
    if (!valid.empty()) o.valid = read_png(valid[static_cast<std::size_t>(t)], 1);
    if (!people.empty()) o.people = read_png(people[static_cast<std::size_t>(t)], 1);
  }
  return m;
}

std::unique_ptr<GuidanceProvider> make_provider(const std::string& spec) {
  if (spec.empty() || spec == "none") return std::make_unique<NullProvider>();
  if (spec.rfind("mock:", 0) == 0) {
    const fs::path dir = spec.substr(5);
    std::map<ViewTag, ImageF> targets;
    for (auto tag : {ViewTag::Front, ViewTag::Side, ViewTag::Back}) {
      const fs::path p = dir / (std::string(to_string(tag)) + ".png");
      if (fs::exists(p)) targets.emplace(tag, read_png(p, 3).cast<float>());
    }
    if (targets.empty()) throw IoError("mock guidance: no front/side/back PNG in " + dir.string());
    return std::make_unique<MockOracleProvider>(std::move(targets));
  }
  if (spec.rfind("socket:", 0) == 0) return std::make_unique<SocketProvider>(spec.substr(7));
  throw InvalidParameter("unknown guidance spec \"" + spec + "\" (expected none, mock:<dir> or socket:<addr>)");
}

}  // namespace glimpse::io
