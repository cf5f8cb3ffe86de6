#pragma once

#include "glimpse/articulation.hpp"
#include "glimpse/camera.hpp"
#include "glimpse/guidance.hpp"
#include "glimpse/optimize.hpp"
#include "glimpse/scene.hpp"

#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <vector>

namespace glimpse::io {

namespace fs = std::filesystem;

// Plain-text formats. Blank lines and lines starting with '#' are ignored.
// Parse errors throw FormatError naming "path:line".

/// One camera per line: fx fy cx cy width height r00 r01 r02 r10 r11 r12 r20 r21 r22 tx ty tz
/// (world-to-camera rotation, row-major, then translation).
std::vector<Camera<double>> read_cameras(const fs::path& path);
void write_cameras(const fs::path& path, const std::vector<Camera<double>>& cameras);

/// One pose per line: 72 axis-angle values (24 joints x 3) then 3 translation values.
std::vector<Pose> read_poses(const fs::path& path, int joints = kSmplJoints);
void write_poses(const fs::path& path, const std::vector<Pose>& poses);

/// One joint per line: parent x y z (parent -1 for the root).
Skeleton read_skeleton(const fs::path& path);
void write_skeleton(const fs::path& path, const Skeleton& skeleton);

/// Wavefront OBJ vertices and faces (polygons are fan-triangulated; other records ignored).
TemplateMesh read_obj(const fs::path& path);
void write_obj(const fs::path& path, const TemplateMesh& mesh);

/// |V| rows of per-joint skinning weights.
Eigen::MatrixXd read_weights(const fs::path& path);
void write_weights(const fs::path& path, const Eigen::MatrixXd& weights);

/// Points with colours: x y z r g b per line, colours in [0, 1].
struct PointCloud {
  Eigen::Matrix3Xd points, colors;
};
PointCloud read_points(const fs::path& path);
void write_points(const fs::path& path, const PointCloud& cloud);

/// 8- or 16-bit PNG to [0, 1]. `channels` 0 keeps gray as 1 channel and
/// drops alpha from RGBA; 1 or 3 converts.
ImageD read_png(const fs::path& path, int channels = 0);
/// Clamps to [0, 1] and quantizes to 8 bits (round to nearest).
void write_png(const fs::path& path, const ImageD& image);
void write_png(const fs::path& path, const ImageF& image);
/// Raw little-endian float32 dump with a "W H C" text header line.
void write_raw(const fs::path& path, const ImageD& image);

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  Scene scene;
  std::optional<OptimState> background_state;
  std::vector<std::optional<OptimState>> human_states;  // empty or parallel to scene.humans
};

void save_checkpoint(const fs::path& path, const Checkpoint& checkpoint);
/// Throws VersionError for newer formats, TruncationError for short files,
/// FormatError for anything else that does not parse.
Checkpoint load_checkpoint(const fs::path& path);

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& checkpoint);
Checkpoint decode_checkpoint(const std::vector<std::uint8_t>& bytes);

/// A scene ready to fit.
struct Manifest {
  Scene scene;
  std::vector<Observation> observations;
  TrainConfig config;
};

/// JSON manifest; relative paths resolve against the manifest's directory.
///
///   {
///     "frames": ["rgb/0000.png", ...],
///     "valid_masks": [...], "people_masks": [...],       (optional)
///     "cameras": "cameras.txt",
///     "background": {"points": "points.txt"}              (optional; absent means a sphere)
///       or {"sphere": {"radius": 30, "count": 2000, "center": [x, y, z]}},
///     "humans": [{"mesh": "body.obj", "weights": "weights.txt",
///                 "skeleton": "skeleton.txt", "poses": "poses.txt", "grid_resolution": 64}],
///     "config": {"schedule": {...}, "weights": {...}, "rates": {...}, "densify": {...},
///                "guidance": {...}, "render": {...}, "seed": 0}
///   }
Manifest load_manifest(const fs::path& path);

/// Applies "config" overrides onto `config`; unknown keys throw FormatError.
void apply_config(const std::string& json_text, TrainConfig& config);

/// "none", "mock:<dir>" (front/side/back PNG targets) or "socket:<unix:path|tcp:host:port>".
std::unique_ptr<GuidanceProvider> make_provider(const std::string& spec);

}  // namespace glimpse::io
