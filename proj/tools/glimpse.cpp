#include "glimpse/bench.hpp"
#include "glimpse/io.hpp"
#include "glimpse/synthetic.hpp"

#include <CLI11.hpp>
#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <numbers>
#include <random>

using namespace glimpse;
namespace fs = std::filesystem;

namespace {

void setup_logging() {
  spdlog::set_default_logger(spdlog::stderr_color_mt("glimpse"));
  spdlog::set_pattern("[%l] %v");
  spdlog::set_level(spdlog::level::info);
  if (const char* env = std::getenv("GLIMPSE_LOG")) {
    const auto level = spdlog::level::from_str(env);
    // from_str maps unknown names to "off"; only honour it when asked for
    if (level != spdlog::level::off || std::string(env) == "off") spdlog::set_level(level);
    else spdlog::warn("GLIMPSE_LOG={} is not a log level; using info", env);
  }
}

std::string frame_name(const std::string& prefix, int k) {
  char buf[16];
  std::snprintf(buf, sizeof(buf), "%04d", k);
  return prefix + "_" + buf;
}

void write_image(const fs::path& dir, const std::string& stem, const ImageD& image, bool raw) {
  io::write_png(dir / (stem + ".png"), image);
  if (raw) io::write_raw(dir / (stem + ".f32"), image);
}

/// Centre the orbit on the people if there are any, else on the background.
Eigen::Vector3d scene_focus(const Scene& scene, int frame) {
  Eigen::Vector3d sum = Eigen::Vector3d::Zero();
  int n = 0;
  for (int j = 0; j < scene.slot_count(); ++j) {
    if (!scene.humans[static_cast<std::size_t>(j)]) continue;
    const auto& h = scene.human(j);
    sum += posed_joints(h.skeleton, h.pose_at(frame)).col(0);
    ++n;
  }
  if (n) return sum / n;
  if (scene.background.size()) return scene.background.centers.rowwise().mean();
  return Eigen::Vector3d::Zero();
}

/// `count` cameras sharing `base`'s intrinsics, circling `focus` at base's
/// distance and height.
std::vector<Camera<double>> orbit(const Camera<double>& base, const Eigen::Vector3d& focus, int count) {
  const Eigen::Vector3d eye = base.position();
  const Eigen::Vector3d offset = eye - focus;
  const double radius = std::hypot(offset.x(), offset.z());
  const double phase = std::atan2(offset.x(), offset.z());
  std::vector<Camera<double>> cams;
  for (int k = 0; k < count; ++k) {
    const double a = phase + 2.0 * std::numbers::pi * k / count;
    const Eigen::Vector3d pos = focus + Eigen::Vector3d(radius * std::sin(a), offset.y(), radius * std::cos(a));
    Camera<double> c = base;
    const Eigen::Vector3d z = (focus - pos).normalized();
    // image y points down, world y up
    Eigen::Vector3d x = Eigen::Vector3d(0, -1, 0).cross(z);
    if (x.norm() < 1e-9) x = Eigen::Vector3d::UnitX();
    x.normalize();
    const Eigen::Vector3d y = z.cross(x);
    c.rotation.row(0) = x.transpose();
    c.rotation.row(1) = y.transpose();
    c.rotation.row(2) = z.transpose();
    c.translation = -c.rotation * pos;
    cams.push_back(c);
  }
  return cams;
}

// ---------------------------------------------------------------- fit

struct FitArgs {
  std::string manifest, out, guidance = "none";
  int iters = -1, background_iters = -1, checkpoint_every = 0;
  std::optional<std::uint64_t> seed;
};

int run_fit(const FitArgs& a) {
  auto m = io::load_manifest(a.manifest);
  auto& cfg = m.config;
  if (a.seed) cfg.seed = *a.seed;
  const bool has_humans = std::any_of(m.scene.humans.begin(), m.scene.humans.end(), [](auto& h) { return h.has_value(); });
  if (a.background_iters >= 0) cfg.schedule.background_iterations = a.background_iters;
  if (a.iters >= 0) {
    auto& s = cfg.schedule;
    if (has_humans) {
      s.warmup_iterations = std::min(s.warmup_iterations, a.iters);
      s.joint_iterations = a.iters - s.warmup_iterations;
    } else {
      s.background_iterations = a.iters;
    }
  }
  const auto provider = io::make_provider(a.guidance);

  const fs::path out = a.out;
  fs::create_directories(out);
  std::ofstream metrics(out / "metrics.jsonl");
  if (!metrics) throw IoError("cannot write " + (out / "metrics.jsonl").string());

  spdlog::info("fitting {} frames, {} background Gaussians, {} human slots", m.scene.frames,
               m.scene.background.size(), m.scene.slot_count());
  TrainHooks hooks;
  hooks.on_iteration = [&](const IterationRecord& r) {
    metrics << to_json_line(r) << '\n';
    if (r.iteration % 100 == 0) {
      spdlog::info("{} {:>6}  loss {:.6g}  mse {:.3e}  gaussians {}", r.stage == Stage::Background ? "bg   " : "joint",
                   r.iteration, r.loss, r.mse, r.background_count);
    }
    for (const auto& e : r.events) spdlog::debug("iteration {}: {}", r.iteration, e);
  };
  if (a.checkpoint_every > 0) {
    fs::create_directories(out / "checkpoints");
    hooks.checkpoint_interval = a.checkpoint_every;
    hooks.on_checkpoint = [&](const Scene& scene, Stage stage, int it) {
      const auto path = out / "checkpoints" / (frame_name(stage == Stage::Background ? "bg" : "joint", it) + ".ckpt");
      io::save_checkpoint(path, io::Checkpoint{scene, std::nullopt, {}});
      spdlog::debug("wrote {}", path.string());
    };
  }
  hooks.on_abort = [&](const Scene& scene, const IterationRecord& r) {
    metrics << to_json_line(r) << '\n';
    metrics.flush();
    io::save_checkpoint(out / "aborted.ckpt", io::Checkpoint{scene, std::nullopt, {}});
    spdlog::error("non-finite loss at iteration {}; last finite scene in {}", r.iteration,
                  (out / "aborted.ckpt").string());
  };

  auto result = train(std::move(m.scene), m.observations, cfg, *provider, hooks);
  io::Checkpoint ck{std::move(result.scene), std::move(result.background_state), std::move(result.human_states)};
  io::save_checkpoint(out / "scene.ckpt", ck);
  spdlog::info("wrote {}", (out / "scene.ckpt").string());
  return 0;
}

// ---------------------------------------------------------------- render / animate

struct RenderArgs {
  std::string ckpt, camera, pose, out;
  int camera_index = -1, frame = -1, pose_index = 0, orbit = 0;
  bool raw = false;
};

int run_render(const RenderArgs& a) {
  auto scene = io::load_checkpoint(a.ckpt).scene;
  int frame = a.frame >= 0 ? a.frame : 0;
  if (frame >= scene.frames) {
    throw IndexError("frame " + std::to_string(frame) + " out of range (scene has " + std::to_string(scene.frames) +
                     " frames)");
  }
  if (!a.pose.empty()) {
    const auto poses = io::read_poses(a.pose);
    if (a.pose_index < 0 || a.pose_index >= static_cast<int>(poses.size()))
      throw IndexError("pose index " + std::to_string(a.pose_index) + " out of range");
    for (auto& h : scene.humans)
      if (h) h->track = {poses[static_cast<std::size_t>(a.pose_index)]};
  }

  Camera<double> cam;
  if (!a.camera.empty()) {
    const auto cams = io::read_cameras(a.camera);
    const int k = a.camera_index >= 0 ? a.camera_index : (frame < static_cast<int>(cams.size()) ? frame : 0);
    if (k >= static_cast<int>(cams.size())) throw IndexError("camera index " + std::to_string(k) + " out of range");
    cam = cams[static_cast<std::size_t>(k)];
  } else {
    const int k = a.camera_index >= 0 ? a.camera_index : frame;
    if (k >= static_cast<int>(scene.cameras.size()))
      throw IndexError("camera index " + std::to_string(k) + " out of range");
    cam = scene.cameras[static_cast<std::size_t>(k)];
  }

  const fs::path out = a.out;
  fs::create_directories(out);
  if (a.orbit > 0) {
    const auto cams = orbit(cam, scene_focus(scene, frame), a.orbit);
    for (int k = 0; k < a.orbit; ++k)
      write_image(out, frame_name("orbit", k), compose_and_render(scene, frame, cams[std::size_t(k)]).color, a.raw);
    spdlog::info("wrote {} orbit frames to {}", a.orbit, out.string());
  } else {
    write_image(out, frame_name("frame", frame), compose_and_render(scene, frame, cam).color, a.raw);
    spdlog::info("wrote {}", (out / (frame_name("frame", frame) + ".png")).string());
  }
  return 0;
}

struct AnimateArgs {
  std::string ckpt, camera, out;
  int camera_index = -1, first = 0, last = -1;
  bool raw = false;
};

int run_animate(const AnimateArgs& a) {
  const auto scene = io::load_checkpoint(a.ckpt).scene;
  const int last = a.last >= 0 ? a.last : scene.frames - 1;
  if (a.first < 0 || last >= scene.frames || a.first > last) throw IndexError("frame range out of bounds");
  std::vector<Camera<double>> cams = scene.cameras;
  if (!a.camera.empty()) cams = io::read_cameras(a.camera);
  if (a.camera_index >= static_cast<int>(cams.size())) throw IndexError("camera index out of range");
  const fs::path out = a.out;
  fs::create_directories(out);
  for (int t = a.first; t <= last; ++t) {
    const int k = a.camera_index >= 0 ? a.camera_index : t % static_cast<int>(cams.size());
    write_image(out, frame_name("frame", t), compose_and_render(scene, t, cams[std::size_t(k)]).color, a.raw);
  }
  spdlog::info("wrote {} frames to {}", last - a.first + 1, out.string());
  return 0;
}

// ---------------------------------------------------------------- edit / bench

struct EditArgs {
  std::string ckpt, out, retarget;
  int remove = -1;
};

int run_edit(const EditArgs& a) {
  auto ck = io::load_checkpoint(a.ckpt);
  if (a.remove >= 0) {
    ck.scene = remove_human(std::move(ck.scene), a.remove);
    spdlog::info("removed human {}", a.remove);
  } else {
    const auto colon = a.retarget.find(':');
    if (colon == std::string::npos || colon == 0) throw InvalidParameter("--retarget expects <human>:<posefile>");
    int j = 0;
    const auto head = a.retarget.substr(0, colon);
    const auto [end, ec] = std::from_chars(head.data(), head.data() + head.size(), j);
    if (ec != std::errc() || end != head.data() + head.size())
      throw InvalidParameter("--retarget: bad human index \"" + head + "\"");
    const auto& skel = ck.scene.human(j).skeleton;
    auto track = io::read_poses(a.retarget.substr(colon + 1), skel.size());
    const auto n = track.size();
    ck.scene = retarget_motion(std::move(ck.scene), j, std::move(track));
    spdlog::info("retargeted human {} to {} poses", j, n);
  }
  // optimizer state does not survive an edit
  ck.background_state.reset();
  ck.human_states.clear();
  io::save_checkpoint(a.out, ck);
  return 0;
}

struct BenchArgs {
  std::string ckpt;
  int resolution = 512, reps = 20, human = -1;
};

int run_bench(const BenchArgs& a) {
  const auto scene = io::load_checkpoint(a.ckpt).scene;
  int j = a.human;
  if (j < 0) {
    for (int k = 0; k < scene.slot_count() && j < 0; ++k)
      if (scene.humans[std::size_t(k)] && scene.human(k).gaussians.size() > 0) j = k;
    if (j < 0) throw InvalidParameter("bench: the checkpoint has no human with Gaussians");
  }
  const auto r = bench_render(scene, j, a.resolution, a.reps);
  std::cout << "human " << j << ": " << r.gaussians << " Gaussians at " << r.resolution << "x" << r.resolution
            << ", " << r.seconds.size() << " repetitions\n";
  std::cout << "  mean   " << r.mean_fps << " FPS (" << 1e3 / r.mean_fps << " ms)\n";
  std::cout << "  median " << r.median_fps << " FPS (" << 1e3 / r.median_fps << " ms)\n";
  std::cout << "  peak memory " << r.peak_rss_bytes / (1024.0 * 1024.0) << " MiB resident\n";
  std::cout << "  reference (15k Gaussians, GPU): " << kReferenceFps512 << " FPS at 512x512, " << kReferenceFps1024
            << " FPS at 1024x1024\n";
  return 0;
}

// ---------------------------------------------------------------- synth

struct SynthArgs {
  std::string out, kind = "human";
  int frames = 8, resolution = 64, gaussians = 500, vertices = 400;
  std::uint64_t seed = 0;
};

std::string json_list(const std::vector<std::string>& items) {
  std::string s = "[";
  for (std::size_t k = 0; k < items.size(); ++k) s += (k ? ", \"" : "\"") + items[k] + "\"";
  return s + "]";
}

/// Writes a synthetic dataset with its ground truth and a manifest to fit it.
int run_synth(const SynthArgs& a) {
  if (a.kind != "static" && a.kind != "human") throw InvalidParameter("--kind must be static or human");
  const fs::path out = a.out;
  fs::create_directories(out / "rgb");
  const double focal = 1.1 * a.resolution;
  Scene truth;
  truth.frames = a.frames;
  std::string humans;
  Eigen::Vector3d focus(0, 0, 0);

  if (a.kind == "human") {
    const auto body = synth::make_body(a.vertices, a.seed);
    auto track = synth::walk_track(a.frames);
    Human h = make_human(body.mesh, body.skeleton, track, 32);
    h.gaussians = body.truth;
    truth.humans.emplace_back(std::move(h));
    io::write_obj(out / "body.obj", body.mesh);
    io::write_weights(out / "weights.txt", body.mesh.weights);
    io::write_skeleton(out / "skeleton.txt", body.skeleton);
    io::write_poses(out / "poses.txt", track);
    humans = ",\n  \"humans\": [{\"mesh\": \"body.obj\", \"weights\": \"weights.txt\", \"skeleton\": \"skeleton.txt\", "
             "\"poses\": \"poses.txt\", \"grid_resolution\": 32}]";
    focus = Eigen::Vector3d(0, 0.9, 0);
  }
  truth.background = synth::random_scene(a.gaussians, a.seed + 1, focus + Eigen::Vector3d(0, 0, -2.5), 1.5);
  truth.cameras = synth::ring_cameras(a.frames, focus, 4.0, 0.3, focal, a.resolution, a.resolution);

  // background init: truth centres jittered, colours grey
  std::mt19937_64 rng(a.seed + 2);
  std::normal_distribution<double> n(0.0, 0.02);
  io::PointCloud cloud{truth.background.centers, Eigen::Matrix3Xd::Constant(3, truth.background.size(), 0.5)};
  for (Eigen::Index i = 0; i < cloud.points.size(); ++i) cloud.points.data()[i] += n(rng);
  io::write_points(out / "points.txt", cloud);
  io::write_cameras(out / "cameras.txt", truth.cameras);
  io::save_checkpoint(out / "truth.ckpt", io::Checkpoint{truth, std::nullopt, {}});

  std::vector<std::string> frames;
  for (int t = 0; t < a.frames; ++t) {
    frames.push_back("rgb/" + frame_name("frame", t) + ".png");
    io::write_png(out / frames.back(), compose_and_render(truth, t, truth.cameras[std::size_t(t)]).color);
  }
  std::ofstream(out / "scene.json") << "{\n  \"frames\": " << json_list(frames)
                                    << ",\n  \"cameras\": \"cameras.txt\",\n"
                                    << "  \"background\": {\"points\": \"points.txt\"}" << humans << "\n}\n";
  spdlog::info("wrote {} ({} frames, {})", (out / "scene.json").string(), a.frames, a.kind);
  return 0;
}

std::string one_line(std::string s) {
  std::replace(s.begin(), s.end(), '\n', ' ');
  return s;
}

}  // namespace

int main(int argc, char** argv) {
  setup_logging();
  CLI::App app{"Fit, render and edit articulated Gaussian scenes of people"};
  app.require_subcommand(1);
  app.set_version_flag("--version", "glimpse 0.1.0");

  FitArgs fit;
  auto* fit_cmd = app.add_subcommand("fit", "Fit a scene from a manifest");
  fit_cmd->add_option("--manifest", fit.manifest, "Scene manifest (JSON)")->required()->check(CLI::ExistingFile);
  fit_cmd->add_option("--out", fit.out, "Output directory (scene.ckpt, metrics.jsonl)")->required();
  fit_cmd->add_option("--iters", fit.iters,
                      "Human-stage iterations (warmup + guided), or background iterations for a scene without "
                      "people")
      ->check(CLI::NonNegativeNumber);
  fit_cmd->add_option("--bg-iters", fit.background_iters, "Background pre-optimization iterations")
      ->check(CLI::NonNegativeNumber);
  fit_cmd->add_option("--seed", fit.seed, "Random seed (overrides the manifest)");
  fit_cmd->add_option("--guidance", fit.guidance, "none | mock:<dir> | socket:<unix:path|tcp:host:port>");
  fit_cmd->add_option("--checkpoint-every", fit.checkpoint_every, "Write a checkpoint every N iterations")
      ->check(CLI::NonNegativeNumber);

  RenderArgs render_a;
  auto* render_cmd = app.add_subcommand("render", "Render one frame or an orbit");
  render_cmd->add_option("--ckpt", render_a.ckpt, "Checkpoint")->required()->check(CLI::ExistingFile);
  render_cmd->add_option("--camera", render_a.camera, "Camera file (default: the training cameras)")
      ->check(CLI::ExistingFile);
  render_cmd->add_option("--camera-index", render_a.camera_index, "Camera record to use (default: the frame)");
  auto* frame_opt = render_cmd->add_option("--frame", render_a.frame, "Scene frame (time instant)")
                        ->check(CLI::NonNegativeNumber);
  auto* pose_opt =
      render_cmd->add_option("--pose", render_a.pose, "Pose file applied to every person")->check(CLI::ExistingFile);
  frame_opt->excludes(pose_opt);
  render_cmd->add_option("--pose-index", render_a.pose_index, "Record within the pose file")->needs(pose_opt);
  render_cmd->add_option("--orbit", render_a.orbit, "Render N views circling the scene")->check(CLI::PositiveNumber);
  render_cmd->add_option("--out", render_a.out, "Output directory")->required();
  render_cmd->add_flag("--raw", render_a.raw, "Also write raw float32 images");

  AnimateArgs anim;
  auto* anim_cmd = app.add_subcommand("animate", "Render every frame of the pose tracks");
  anim_cmd->add_option("--ckpt", anim.ckpt, "Checkpoint")->required()->check(CLI::ExistingFile);
  anim_cmd->add_option("--camera", anim.camera, "Camera file (default: the training cameras)")
      ->check(CLI::ExistingFile);
  anim_cmd->add_option("--camera-index", anim.camera_index, "Hold this camera fixed (default: follow the track)");
  anim_cmd->add_option("--first", anim.first, "First frame");
  anim_cmd->add_option("--last", anim.last, "Last frame (default: the final one)");
  anim_cmd->add_option("--out", anim.out, "Output directory")->required();
  anim_cmd->add_flag("--raw", anim.raw, "Also write raw float32 images");

  EditArgs edit;
  auto* edit_cmd = app.add_subcommand("edit", "Remove a person or retarget their motion");
  edit_cmd->add_option("--ckpt", edit.ckpt, "Checkpoint")->required()->check(CLI::ExistingFile);
  auto* remove_opt = edit_cmd->add_option("--remove", edit.remove, "Human slot to remove")->check(CLI::NonNegativeNumber);
  auto* retarget_opt = edit_cmd->add_option("--retarget", edit.retarget, "<human>:<posefile>");
  remove_opt->excludes(retarget_opt);
  edit_cmd->add_option("--out", edit.out, "Output checkpoint")->required();
  edit_cmd->callback([&] {
    if (!remove_opt->count() && !retarget_opt->count())
      throw CLI::ValidationError("edit", "one of --remove or --retarget is required");
  });

  BenchArgs bench;
  auto* bench_cmd = app.add_subcommand("bench", "Time deform + render of a posed person");
  bench_cmd->add_option("--ckpt", bench.ckpt, "Checkpoint")->required()->check(CLI::ExistingFile);
  bench_cmd->add_option("--res", bench.resolution, "Square image size")->check(CLI::PositiveNumber);
  bench_cmd->add_option("--reps", bench.reps, "Timed repetitions")->check(CLI::PositiveNumber);
  bench_cmd->add_option("--human", bench.human, "Human slot (default: the first present one)");

  SynthArgs synth_a;
  auto* synth_cmd = app.add_subcommand("synth", "Generate a synthetic dataset and manifest");
  synth_cmd->add_option("--out", synth_a.out, "Output directory")->required();
  synth_cmd->add_option("--kind", synth_a.kind, "static | human")->check(CLI::IsMember({"static", "human"}));
  synth_cmd->add_option("--frames", synth_a.frames, "Frames")->check(CLI::PositiveNumber);
  synth_cmd->add_option("--res", synth_a.resolution, "Image size")->check(CLI::PositiveNumber);
  synth_cmd->add_option("--gaussians", synth_a.gaussians, "Background Gaussians")->check(CLI::PositiveNumber);
  synth_cmd->add_option("--vertices", synth_a.vertices, "Body template vertices")->check(CLI::PositiveNumber);
  synth_cmd->add_option("--seed", synth_a.seed, "Random seed");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error[usage]: " << one_line(e.what()) << '\n';
    return 2;
  }

  try {
    if (*fit_cmd) return run_fit(fit);
    if (*render_cmd) return run_render(render_a);
    if (*anim_cmd) return run_animate(anim);
    if (*edit_cmd) return run_edit(edit);
    if (*bench_cmd) return run_bench(bench);
    if (*synth_cmd) return run_synth(synth_a);
  } catch (const Error& e) {
    std::cerr << "error[" << e.kind() << "]: " << one_line(e.what()) << '\n';
    return 1;
  } catch (const fs::filesystem_error& e) {
    std::cerr << "error[io]: " << one_line(e.what()) << '\n';
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error[internal]: " << one_line(e.what()) << '\n';
    return 1;
  }
  return 0;
}
