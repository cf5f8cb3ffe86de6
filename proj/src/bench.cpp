#include "glimpse/bench.hpp"

#include "glimpse/guidance.hpp"

#include <sys/resource.h>

#include <algorithm>
#include <chrono>
#include <numeric>

namespace glimpse {

std::size_t peak_rss_bytes() {
  rusage usage{};
  getrusage(RUSAGE_SELF, &usage);
  return static_cast<std::size_t>(usage.ru_maxrss) * 1024;  // Linux reports KiB
}

BenchReport bench_render(const Scene& scene, int j, int resolution, int repetitions, int warmup) {
  if (resolution < 1) throw InvalidParameter("bench: resolution must be >= 1");
  if (repetitions < 1) throw InvalidParameter("bench: repetitions must be >= 1");
  const Human& h = scene.human(j);
  if (h.gaussians.size() == 0) throw InvalidParameter("bench: human " + std::to_string(j) + " has no Gaussians");

  const Pose& pose = h.track.front();
  CameraSamplerConfig framing;
  framing.width = framing.height = resolution;
  framing.focal *= resolution / 128.0;
  const auto joints = posed_joints(h.skeleton, pose);
  const auto view = virtual_camera_at(framing, joints, axis_angle_to_rotation(pose.axis_angles.col(0)),
                                      ViewMode::Full, 0.0, 0.0);
  const Camera<float> cam = view.camera.cast<float>();

  const auto once = [&] {
    const auto d = deform(h.gaussians, h.skeleton, pose, h.grid, DeformOptions{false});
    return render(d.cloud.cast<float>(), cam);
  };
  for (int k = 0; k < warmup; ++k) once();

  BenchReport report;
  report.resolution = resolution;
  report.gaussians = h.gaussians.size();
  for (int k = 0; k < repetitions; ++k) {
    const auto start = std::chrono::steady_clock::now();
    const auto out = once();
    const std::chrono::duration<double> dt = std::chrono::steady_clock::now() - start;
    report.seconds.push_back(dt.count());
  }
  const double mean = std::accumulate(report.seconds.begin(), report.seconds.end(), 0.0) / repetitions;
  auto sorted = report.seconds;
  std::sort(sorted.begin(), sorted.end());
  const auto mid = sorted.size() / 2;
  const double median = sorted.size() % 2 ? sorted[mid] : 0.5 * (sorted[mid - 1] + sorted[mid]);
  report.mean_fps = 1.0 / mean;
  report.median_fps = 1.0 / median;
  report.peak_rss_bytes = peak_rss_bytes();
  return report;
}

}  // namespace glimpse
