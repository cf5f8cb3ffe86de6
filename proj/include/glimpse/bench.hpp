#pragma once

#include "glimpse/scene.hpp"

#include <cstddef>
#include <vector>

namespace glimpse {

/// Published reference timings for a 15k-Gaussian human on a GPU, reported
/// alongside local measurements for context only.
inline constexpr double kReferenceFps512 = 361.01;
inline constexpr double kReferenceFps1024 = 277.01;

struct BenchReport {
  int resolution = 0;
  Eigen::Index gaussians = 0;
  std::vector<double> seconds;  // one deform + render per repetition
  double mean_fps = 0, median_fps = 0;
  std::size_t peak_rss_bytes = 0;
};

/// Times deform + render of human `j` in its first track pose, framed by a
/// square `resolution` camera 2.2 m in front of the pelvis. Renders in single
/// precision. Throws IndexError for a missing human and InvalidParameter for an
/// empty one.
BenchReport bench_render(const Scene& scene, int j, int resolution, int repetitions, int warmup = 1);

/// Peak resident set size of this process.
std::size_t peak_rss_bytes();

}  // namespace glimpse
