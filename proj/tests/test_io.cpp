#include "glimpse/io.hpp"
#include "glimpse/synthetic.hpp"
#include "oracles.hpp"

#include <gtest/gtest.h>

#include <fstream>
#include <random>

using namespace glimpse;
namespace fs = std::filesystem;

namespace {

class IoTest : public ::testing::Test {
protected:
  void SetUp() override {
    const auto* info = ::testing::UnitTest::GetInstance()->current_test_info();
    dir_ = fs::temp_directory_path() / (std::string("glimpse_io_") + info->test_suite_name() + "_" + info->name());
    fs::remove_all(dir_);
    fs::create_directories(dir_);
  }
  void TearDown() override { fs::remove_all(dir_); }

  fs::path file(const std::string& name) const { return dir_ / name; }
  void write_text(const std::string& name, const std::string& text) const { std::ofstream(file(name)) << text; }

  fs::path dir_;
};

template <typename F> std::string error_message(F&& f) {
  try {
    f();
  } catch (const std::exception& e) {
    return e.what();
  }
  return {};
}

Pose random_pose(std::mt19937_64& rng, int joints = kSmplJoints) {
  std::normal_distribution<double> n(0.0, 0.4);
  Pose p = Pose::zero(joints);
  for (Eigen::Index i = 0; i < p.axis_angles.size(); ++i) p.axis_angles.data()[i] = n(rng);
  p.translation = Eigen::Vector3d(n(rng), n(rng), n(rng));
  return p;
}

Scene random_scene_with_human(std::uint64_t seed, int frames = 3) {
  std::mt19937_64 rng(seed);
  auto body = synth::make_body(60, seed);
  std::vector<Pose> track;
  for (int t = 0; t < frames; ++t) track.push_back(random_pose(rng));
  Scene scene;
  scene.frames = frames;
  scene.background = synth::random_scene(40, seed + 1, Eigen::Vector3d(0, 0, 4), 2.0);
  scene.sphere = BackgroundSphere{Eigen::Vector3d(0.1, -0.2, 3.0), 30.0};
  scene.humans.emplace_back(make_human(body.mesh, body.skeleton, track, 12));
  scene.humans.emplace_back(std::nullopt);  // a removed slot
  scene.humans.emplace_back(make_human(body.mesh, body.skeleton, {track[0]}, 10));
  scene.human(0).gaussians = synth::random_scene(30, seed + 2);
  scene.human(0).gaussians = GaussianSet<double>(Space::Canonical, scene.human(0).gaussians.params());
  scene.cameras = synth::ring_cameras(frames, Eigen::Vector3d(0, 1, 0), 3.0, 1.0, 50.0, 40, 30, 0.3);
  return scene;
}

OptimState random_state(Eigen::Index n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  auto state = make_optim_state(n, LearningRates{}, 1234);
  const auto noise = synth::random_scene(static_cast<int>(n), seed);
  state.m = noise.params();
  state.v = noise.params();
  state.v.centers = state.v.centers.cwiseAbs();
  state.step = 77;
  state.updates = {77, 70, 77, 77, 77};
  state.grad_accum = Eigen::VectorXd::Random(n).cwiseAbs();
  state.views = Eigen::VectorXi::Constant(n, 5);
  state.center_accum = Eigen::Matrix3Xd::Random(3, n);
  return state;
}

io::Checkpoint random_checkpoint(std::uint64_t seed) {
  io::Checkpoint ck;
  ck.scene = random_scene_with_human(seed);
  ck.background_state = random_state(ck.scene.background.size(), seed + 10);
  ck.human_states.resize(3);
  ck.human_states[0] = random_state(ck.scene.human(0).gaussians.size(), seed + 11);
  return ck;
}

void expect_params_equal(const GaussianParams<double>& a, const GaussianParams<double>& b) {
  EXPECT_EQ(a.centers, b.centers);
  EXPECT_EQ(a.rotations, b.rotations);
  EXPECT_EQ(a.log_scales, b.log_scales);
  EXPECT_EQ(a.colors, b.colors);
  EXPECT_EQ(a.opacity_logits, b.opacity_logits);
}

}  // namespace

TEST_F(IoTest, CamerasRoundTripExactly) {
  auto cams = synth::ring_cameras(4, Eigen::Vector3d(0.3, 1.1, -0.2), 3.7, 1.3, 123.456, 64, 48, 0.1);
  cams[2].cx = 31.123456789012345;
  io::write_cameras(file("cams.txt"), cams);
  const auto back = io::read_cameras(file("cams.txt"));
  ASSERT_EQ(back.size(), cams.size());
  for (std::size_t k = 0; k < cams.size(); ++k) {
    EXPECT_EQ(back[k].fx, cams[k].fx);
    EXPECT_EQ(back[k].cx, cams[k].cx);
    EXPECT_EQ(back[k].width, cams[k].width);
    EXPECT_EQ(back[k].height, cams[k].height);
    EXPECT_EQ(back[k].rotation, cams[k].rotation);
    EXPECT_EQ(back[k].translation, cams[k].translation);
  }
}

TEST_F(IoTest, CameraErrorsNameTheLine) {
  write_text("cams.txt", "# fx fy cx cy W H R t\n\n"
                         "50 50 16 16 32 32 1 0 0 0 1 0 0 0 1 0 0 3\n"
                         "50 50 16 16 32 32 1 0 0 0 1 0 0 0 1 0 0\n");
  const auto msg = error_message([&] { io::read_cameras(file("cams.txt")); });
  EXPECT_NE(msg.find("cams.txt:4"), std::string::npos) << msg;
  EXPECT_THROW(io::read_cameras(file("cams.txt")), FormatError);

  write_text("cams.txt", "50 50 16 16 32 32 1 0 0 0 1 0 0 0 1 0 0 x\n");
  EXPECT_THROW(io::read_cameras(file("cams.txt")), FormatError);
  EXPECT_THROW(io::read_cameras(file("absent.txt")), IoError);
}

TEST_F(IoTest, PosesRoundTripAndCheckWidth) {
  std::mt19937_64 rng(3);
  std::vector<Pose> poses{random_pose(rng), random_pose(rng), random_pose(rng)};
  io::write_poses(file("poses.txt"), poses);
  const auto back = io::read_poses(file("poses.txt"));
  ASSERT_EQ(back.size(), 3u);
  for (std::size_t k = 0; k < poses.size(); ++k) {
    EXPECT_EQ(back[k].axis_angles, poses[k].axis_angles);
    EXPECT_EQ(back[k].translation, poses[k].translation);
  }
  write_text("short.txt", "0 0 0\n");
  const auto msg = error_message([&] { io::read_poses(file("short.txt")); });
  EXPECT_NE(msg.find("short.txt:1"), std::string::npos) << msg;
}

TEST_F(IoTest, SkeletonWeightsAndPointsRoundTrip) {
  const auto body = synth::make_body(50, 9);
  io::write_skeleton(file("skel.txt"), body.skeleton);
  const auto skel = io::read_skeleton(file("skel.txt"));
  EXPECT_EQ(skel.parents, body.skeleton.parents);
  EXPECT_EQ(skel.rest, body.skeleton.rest);

  io::write_weights(file("w.txt"), body.mesh.weights);
  EXPECT_EQ(io::read_weights(file("w.txt")), body.mesh.weights);

  io::PointCloud cloud{Eigen::Matrix3Xd::Random(3, 20), (Eigen::Matrix3Xd::Random(3, 20).array() + 1) / 2};
  io::write_points(file("pts.txt"), cloud);
  const auto back = io::read_points(file("pts.txt"));
  EXPECT_EQ(back.points, cloud.points);
  EXPECT_EQ(back.colors, cloud.colors);
}

TEST_F(IoTest, ObjTriangulatesPolygonsAndRoundTrips) {
  write_text("quad.obj", "# a quad\nv 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\nvn 0 0 1\nf 1/1/1 2/2/1 3/3/1 4/4/1\n");
  const auto mesh = io::read_obj(file("quad.obj"));
  EXPECT_EQ(mesh.vertices.cols(), 4);
  ASSERT_EQ(mesh.faces.size(), 2u);
  EXPECT_EQ(mesh.faces[0], Eigen::Vector3i(0, 1, 2));
  EXPECT_EQ(mesh.faces[1], Eigen::Vector3i(0, 2, 3));

  io::write_obj(file("out.obj"), mesh);
  const auto back = io::read_obj(file("out.obj"));
  EXPECT_EQ(back.vertices, mesh.vertices);
  EXPECT_EQ(back.faces, mesh.faces);

  write_text("bad.obj", "v 0 0 0\nf 1 2 9\n");
  const auto msg = error_message([&] { io::read_obj(file("bad.obj")); });
  EXPECT_NE(msg.find("bad.obj:2"), std::string::npos) << msg;
}

TEST_F(IoTest, PngRoundTripWithinOneLevel) {
  ImageD rgb(7, 5, 3);
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> u(-0.1, 1.1);
  for (Eigen::Index i = 0; i < rgb.data.size(); ++i) rgb.data[i] = u(rng);
  io::write_png(file("rgb.png"), rgb);
  const auto back = io::read_png(file("rgb.png"));
  ASSERT_EQ(back.channels, 3);
  ASSERT_EQ(back.width, 7);
  ASSERT_EQ(back.height, 5);
  const Eigen::ArrayXd clamped = rgb.data.array().min(1.0).max(0.0);
  EXPECT_LE((back.data.array() - clamped).abs().maxCoeff(), 1.0 / 255.0);

  const auto gray = io::read_png(file("rgb.png"), 1);
  EXPECT_EQ(gray.channels, 1);
  write_text("junk.png", "not a png");
  EXPECT_THROW(io::read_png(file("junk.png")), FormatError);
  EXPECT_THROW(io::read_png(file("nothing.png")), IoError);
}

TEST(Checkpoint, RoundTripIsBitExact) {
  const auto ck = random_checkpoint(5);
  const auto bytes = io::encode_checkpoint(ck);
  const auto back = io::decode_checkpoint(bytes);
  EXPECT_EQ(io::encode_checkpoint(back), bytes);

  EXPECT_EQ(back.scene.frames, ck.scene.frames);
  ASSERT_EQ(back.scene.humans.size(), 3u);
  EXPECT_FALSE(back.scene.humans[1].has_value());
  expect_params_equal(back.scene.background.params(), ck.scene.background.params());
  expect_params_equal(back.scene.human(0).gaussians.params(), ck.scene.human(0).gaussians.params());
  EXPECT_EQ(back.scene.human(0).gaussians.space(), Space::Canonical);
  EXPECT_EQ(back.scene.human(0).grid.weights, ck.scene.human(0).grid.weights);
  EXPECT_EQ(back.scene.human(0).grid.dims, ck.scene.human(0).grid.dims);
  EXPECT_EQ(back.scene.human(0).mesh.faces, ck.scene.human(0).mesh.faces);
  EXPECT_EQ(back.scene.human(0).track[2].axis_angles, ck.scene.human(0).track[2].axis_angles);
  EXPECT_EQ(back.scene.cameras[1].rotation, ck.scene.cameras[1].rotation);
  ASSERT_TRUE(back.scene.sphere);
  EXPECT_EQ(back.scene.sphere->center, ck.scene.sphere->center);
  ASSERT_TRUE(back.background_state);
  expect_params_equal(back.background_state->v, ck.background_state->v);
  EXPECT_EQ(back.background_state->updates, ck.background_state->updates);
  EXPECT_EQ(back.background_state->center_accum, ck.background_state->center_accum);
  ASSERT_EQ(back.human_states.size(), 3u);
  EXPECT_TRUE(back.human_states[0]);
  EXPECT_FALSE(back.human_states[2]);

  // renders agree bit for bit too
  const auto a = compose_and_render(ck.scene, 1, ck.scene.cameras[1]);
  const auto b = compose_and_render(back.scene, 1, back.scene.cameras[1]);
  EXPECT_TRUE((a.color.data == b.color.data).all());
}

TEST(Checkpoint, FileRoundTrip) {
  const auto path = fs::temp_directory_path() / "glimpse_ckpt_roundtrip.bin";
  const auto ck = random_checkpoint(8);
  io::save_checkpoint(path, ck);
  const auto back = io::load_checkpoint(path);
  EXPECT_EQ(io::encode_checkpoint(back), io::encode_checkpoint(ck));
  fs::remove(path);
}

TEST(Checkpoint, TruncationIsDetected) {
  io::Checkpoint ck;
  ck.scene = random_scene_with_human(2, 2);
  const auto bytes = io::encode_checkpoint(ck);
  std::mt19937_64 rng(0);
  std::uniform_int_distribution<std::size_t> cut(0, bytes.size() - 1);
  std::vector<std::size_t> cuts{0, 4, 8, 11, 12, 20, bytes.size() - 12, bytes.size() - 1};
  for (int k = 0; k < 200; ++k) cuts.push_back(cut(rng));
  for (auto n : cuts) {
    const std::vector<std::uint8_t> prefix(bytes.begin(), bytes.begin() + static_cast<std::ptrdiff_t>(n));
    EXPECT_THROW(io::decode_checkpoint(prefix), TruncationError) << "cut at " << n << " of " << bytes.size();
  }

  const auto path = fs::temp_directory_path() / "glimpse_ckpt_truncated.bin";
  std::ofstream(path, std::ios::binary).write(reinterpret_cast<const char*>(bytes.data()), 100);
  const auto msg = error_message([&] { io::load_checkpoint(path); });
  EXPECT_NE(msg.find(path.string()), std::string::npos) << msg;
  fs::remove(path);
}

TEST(Checkpoint, NewerVersionIsRejected) {
  io::Checkpoint ck;
  ck.scene = random_scene_with_human(3, 1);
  auto bytes = io::encode_checkpoint(ck);
  bytes[8] = static_cast<std::uint8_t>(io::kCheckpointVersion + 1);
  const auto msg = error_message([&] { io::decode_checkpoint(bytes); });
  EXPECT_NE(msg.find("version 2"), std::string::npos) << msg;
  EXPECT_THROW(io::decode_checkpoint(bytes), VersionError);

  auto bad = io::encode_checkpoint(ck);
  bad[0] = 'X';
  EXPECT_THROW(io::decode_checkpoint(bad), FormatError);
}

TEST(Checkpoint, UnknownChunksAreSkipped) {
  io::Checkpoint ck;
  ck.scene = random_scene_with_human(4, 1);
  const auto bytes = io::encode_checkpoint(ck);
  // insert an unknown chunk right after the header
  std::vector<std::uint8_t> extra(bytes.begin(), bytes.begin() + 12);
  const std::uint8_t chunk[] = {'X', 'T', 'R', 'A', 3, 0, 0, 0, 0, 0, 0, 0, 1, 2, 3};
  extra.insert(extra.end(), std::begin(chunk), std::end(chunk));
  extra.insert(extra.end(), bytes.begin() + 12, bytes.end());
  EXPECT_EQ(io::encode_checkpoint(io::decode_checkpoint(extra)), bytes);
}

namespace {

/// Writes a T-frame, one-human manifest and its assets into `dir`.
void write_manifest(const fs::path& dir, int frames, int poses, const std::string& extra = "") {
  const auto body = synth::make_body(40, 1);
  io::write_obj(dir / "body.obj", body.mesh);
  io::write_weights(dir / "weights.txt", body.mesh.weights);
  io::write_skeleton(dir / "skeleton.txt", body.skeleton);
  auto track = synth::walk_track(poses);
  for (auto& p : track) p.translation += Eigen::Vector3d(0.5, 0, 0);
  io::write_poses(dir / "poses.txt", track);
  const auto cams = synth::ring_cameras(frames, Eigen::Vector3d(0, 1, 0), 3.0, 1.0, 30.0, 16, 12);
  io::write_cameras(dir / "cameras.txt", cams);
  std::string list;
  fs::create_directories(dir / "rgb");
  for (int t = 0; t < frames; ++t) {
    const std::string name = "rgb/" + std::to_string(t) + ".png";
    io::write_png(dir / name, ImageD(16, 12, 3, 0.25 * t));
    list += (t ? ", \"" : "\"") + name + "\"";
  }
  std::ofstream(dir / "scene.json") << "{\n  \"frames\": [" << list << "],\n  \"cameras\": \"cameras.txt\",\n"
                                    << "  \"humans\": [{\"mesh\": \"body.obj\", \"weights\": \"weights.txt\",\n"
                                    << "              \"skeleton\": \"skeleton.txt\", \"poses\": \"poses.txt\",\n"
                                    << "              \"grid_resolution\": 8}]" << extra << "\n}\n";
}

}  // namespace

TEST_F(IoTest, ManifestBuildsScene) {
  write_manifest(dir_, 2, 2, ",\n  \"config\": {\"seed\": 42, \"schedule\": {\"joint_iterations\": 7}}");
  const auto m = io::load_manifest(file("scene.json"));
  EXPECT_EQ(m.scene.frames, 2);
  ASSERT_EQ(m.scene.slot_count(), 1);
  EXPECT_EQ(m.scene.human(0).track.size(), 2u);
  EXPECT_EQ(m.scene.human(0).grid.dims.maxCoeff(), 8);
  ASSERT_EQ(m.observations.size(), 2u);
  EXPECT_NEAR(m.observations[1].image.data[0], 0.25, 0.5 / 255.0);
  EXPECT_EQ(m.observations[0].valid.data.size(), 0);
  EXPECT_EQ(m.config.seed, 42u);
  EXPECT_EQ(m.config.schedule.joint_iterations, 7);
  EXPECT_EQ(m.config.schedule.warmup_iterations, Schedule{}.warmup_iterations);
}

TEST_F(IoTest, ManifestWithoutBackgroundUsesSphereOnHumans) {
  write_manifest(dir_, 2, 2);
  const auto m = io::load_manifest(file("scene.json"));
  ASSERT_TRUE(m.scene.sphere);
  EXPECT_EQ(m.scene.sphere->radius, 30.0);
  const auto& h = m.scene.human(0);
  const Eigen::Vector3d mean =
      (posed_joints(h.skeleton, h.track[0]).col(0) + posed_joints(h.skeleton, h.track[1]).col(0)) / 2;
  EXPECT_LT((m.scene.sphere->center - mean).norm(), 1e-12);
  const auto d = (m.scene.background.centers.colwise() - mean).colwise().norm();
  EXPECT_LT((d.array() - 30.0).abs().maxCoeff(), 1e-9);
}

TEST_F(IoTest, ManifestPointBackground) {
  io::PointCloud cloud{Eigen::Matrix3Xd::Random(3, 10), Eigen::Matrix3Xd::Constant(3, 10, 0.5)};
  io::write_points(file("pts.txt"), cloud);
  write_manifest(dir_, 1, 1, ",\n  \"background\": {\"points\": \"pts.txt\"}");
  const auto m = io::load_manifest(file("scene.json"));
  EXPECT_FALSE(m.scene.sphere);
  EXPECT_EQ(m.scene.background.size(), 10);
}

TEST_F(IoTest, ManifestPoseCountMismatchNamesHuman) {
  write_manifest(dir_, 3, 2);
  const auto msg = error_message([&] { io::load_manifest(file("scene.json")); });
  EXPECT_NE(msg.find("human 0"), std::string::npos) << msg;
  EXPECT_THROW(io::load_manifest(file("scene.json")), CountMismatch);
}

TEST_F(IoTest, ManifestErrors) {
  write_manifest(dir_, 1, 1, ",\n  \"config\": {\"schedule\": {\"bogus\": 1}}");
  EXPECT_THROW(io::load_manifest(file("scene.json")), FormatError);

  write_manifest(dir_, 1, 1);
  fs::remove(file("weights.txt"));
  const auto missing = error_message([&] { io::load_manifest(file("scene.json")); });
  EXPECT_NE(missing.find("weights.txt"), std::string::npos) << missing;
  EXPECT_THROW(io::load_manifest(file("scene.json")), IoError);

  write_text("broken.json", "{\n  \"frames\": [\n  oops\n}");
  const auto broken = error_message([&] { io::load_manifest(file("broken.json")); });
  EXPECT_NE(broken.find("broken.json:3"), std::string::npos) << broken;
}

TEST(Config, OverridesAndRejectsUnknownKeys) {
  TrainConfig c;
  io::apply_config(R"({"weights": {"ssim": 0}, "guidance": {"camera": {"azimuth_min": 0.5, "azimuth_max": 0.5},
                       "timestep": {"variant": "fixed_floor"}, "fill": [0, 0, 0]}, "render": {"tile_size": 8}})",
                   c);
  EXPECT_EQ(c.weights.ssim, 0.0);
  EXPECT_EQ(c.weights.rgb, LossWeights{}.rgb);
  EXPECT_EQ(c.guidance.camera.azimuth_min, 0.5);
  EXPECT_EQ(c.guidance.timestep.min_end, TimestepSchedule::fixed_floor().min_end);
  EXPECT_EQ(c.guidance.fill, Eigen::Vector3d::Zero());
  EXPECT_EQ(c.render.tile_size, 8);
  EXPECT_THROW(io::apply_config(R"({"weights": {"rgbb": 1}})", c), FormatError);
  EXPECT_THROW(io::apply_config(R"({"weights": {"rgb": "high"}})", c), FormatError);
  EXPECT_THROW(io::apply_config("{", c), FormatError);
}

TEST_F(IoTest, ProviderSpecs) {
  EXPECT_FALSE(io::make_provider("none")->active());
  EXPECT_THROW(io::make_provider("magic"), InvalidParameter);
  EXPECT_THROW(io::make_provider("mock:" + dir_.string()), IoError);
  io::write_png(file("front.png"), ImageD(8, 8, 3, 0.5));
  auto mock = io::make_provider("mock:" + dir_.string());
  EXPECT_TRUE(mock->active());
  auto* typed = dynamic_cast<MockOracleProvider*>(mock.get());
  ASSERT_NE(typed, nullptr);
  EXPECT_NEAR(typed->target_for(ViewTag::Back).data[0], 0.5, 1.0 / 255.0);
}
