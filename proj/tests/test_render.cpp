#include "glimpse/render.hpp"

#include "gradcheck.hpp"
#include "oracles.hpp"

#include <gtest/gtest.h>
#include <omp.h>

#include <algorithm>
#include <random>

namespace glimpse {
namespace {

GaussianCloud<double> single(const Vec3<double>& center, const Mat3<double>& cov, const Vec3<double>& color,
                             double opacity) {
  GaussianCloud<double> c;
  c.resize(1);
  c.centers.col(0) = center;
  c.covariances[0] = cov;
  c.colors.col(0) = color;
  c.opacities[0] = opacity;
  return c;
}

TEST(Project, OnAxisIsotropicGaussian) {
  const double f = 50, sigma = 0.2, z = 4;
  auto cam = oracle::front_camera(33, 33, f);
  const auto cloud = single({0, 0, z}, Mat3<double>::Identity() * sigma * sigma, {1, 1, 1}, 0.8);
  const auto splats = project(cloud, cam);
  ASSERT_EQ(splats.size(), 1u);
  const double expected = std::pow(f * sigma / z, 2) + 0.3;
  EXPECT_NEAR(splats[0].cov(0, 0), expected, 1e-12);
  EXPECT_NEAR(splats[0].cov(1, 1), expected, 1e-12);
  EXPECT_NEAR(splats[0].cov(0, 1), 0.0, 1e-12);
  EXPECT_NEAR(splats[0].mean.x(), cam.cx, 1e-12);
  EXPECT_NEAR(splats[0].mean.y(), cam.cy, 1e-12);
  EXPECT_DOUBLE_EQ(splats[0].depth, z);
}

TEST(Project, CullsBehindCameraAndOutsideFrame) {
  auto cam = oracle::front_camera(32, 32, 30);
  const Mat3<double> cov = Mat3<double>::Identity() * 0.01;
  EXPECT_TRUE(project(single({0, 0, 0}, cov, {1, 1, 1}, 0.5), cam).empty());
  EXPECT_TRUE(project(single({0, 0, -2}, cov, {1, 1, 1}, 0.5), cam).empty());
  EXPECT_TRUE(project(single({50, 0, 2}, cov, {1, 1, 1}, 0.5), cam).empty());
  EXPECT_EQ(project(single({0.1, 0, 2}, cov, {1, 1, 1}, 0.5), cam).size(), 1u);
}

TEST(SortByDepth, OrdersAndBreaksTiesByIndex) {
  std::vector<Splat2D<double>> s(3);
  const double depths[3] = {3, 1, 2};
  for (int i = 0; i < 3; ++i) {
    s[i].depth = depths[i];
    s[i].index = i;
  }
  auto sorted = sort_by_depth(s);
  EXPECT_EQ(sorted[0].depth, 1);
  EXPECT_EQ(sorted[1].depth, 2);
  EXPECT_EQ(sorted[2].depth, 3);

  std::vector<Splat2D<double>> ties(4);
  for (int i = 0; i < 4; ++i) {
    ties[i].depth = 2.0;
    ties[i].index = 3 - i;
  }
  sorted = sort_by_depth(ties);
  for (int i = 0; i < 4; ++i) EXPECT_EQ(sorted[i].index, i);
}

TEST(SortByDepth, MatchesReferenceSortOnRandomDepths) {
  std::mt19937_64 rng(1);
  std::uniform_int_distribution<int> d(0, 500);  // plenty of ties
  std::vector<Splat2D<double>> s(10000);
  for (int i = 0; i < 10000; ++i) {
    s[i].depth = d(rng) * 0.01;
    s[i].index = i;
  }
  std::vector<std::pair<double, Eigen::Index>> ref;
  for (const auto& x : s) ref.emplace_back(x.depth, x.index);
  std::shuffle(s.begin(), s.end(), rng);
  std::stable_sort(ref.begin(), ref.end(), [](auto& a, auto& b) { return a.first < b.first; });
  const auto sorted = sort_by_depth(s);
  for (std::size_t i = 0; i < ref.size(); ++i) {
    EXPECT_EQ(sorted[i].depth, ref[i].first);
    EXPECT_EQ(sorted[i].index, ref[i].second);
  }
}

TEST(Rasterize, SingleSplatOnPixelCenter) {
  auto cam = oracle::front_camera(33, 33, 40);  // principal point lands on pixel (16, 16)
  const Vec3<double> c(0.9, 0.4, 0.1);
  const double o = 0.7;
  const auto out = render(single({0, 0, 3}, Mat3<double>::Identity() * 0.01, c, o), cam);
  for (int ch = 0; ch < 3; ++ch) EXPECT_NEAR(out.color(16, 16, ch), c[ch] * o, 1e-15);
  EXPECT_NEAR(out.alpha(16, 16), o, 1e-15);
}

TEST(Rasterize, TwoCoincidentSplats) {
  auto cam = oracle::front_camera(33, 33, 40);
  GaussianCloud<double> cloud = single({0, 0, 3}, Mat3<double>::Identity() * 0.01, {1, 0, 0}, 0.6);
  cloud.append(single({0, 0, 3.5}, Mat3<double>::Identity() * 0.01, {0, 0.5, 1}, 0.3));
  const auto out = render(cloud, cam);
  const Vec3<double> expected = Vec3<double>(1, 0, 0) * 0.6 + Vec3<double>(0, 0.5, 1) * 0.3 * (1 - 0.6);
  for (int ch = 0; ch < 3; ++ch) EXPECT_NEAR(out.color(16, 16, ch), expected[ch], 1e-15);
}

TEST(Rasterize, EmptySceneIsBackground) {
  auto cam = oracle::front_camera(20, 12, 10);
  RenderSettings settings;
  settings.background = {0.2, 0.3, 0.4};
  const auto out = render(GaussianCloud<double>{}, cam, settings);
  for (int y = 0; y < 12; ++y)
    for (int x = 0; x < 20; ++x) {
      EXPECT_EQ(out.alpha(x, y), 0.0);
      for (int ch = 0; ch < 3; ++ch) EXPECT_EQ(out.color(x, y, ch), settings.background[ch]);
    }
}

TEST(Rasterize, TiledMatchesNaiveOracle) {
  std::mt19937_64 rng(42);
  for (int scene = 0; scene < 5; ++scene) {
    const auto set = oracle::random_set(60 + 30 * scene, rng);
    const auto cloud = make_cloud(set);
    auto cam = oracle::front_camera(45, 37, 30);
    RenderSettings settings;
    settings.background = {0.1, 0.2, 0.05};
    const auto splats = project(cloud, cam, settings);
    const auto out = rasterize(sort_by_depth(splats), cloud, cam, settings);
    const auto [ref_color, ref_alpha] = oracle::naive_composite(splats, cloud, cam, settings);
    EXPECT_LT((out.color.data - ref_color.data).abs().maxCoeff(), 1e-5);
    EXPECT_LT((out.alpha.data - ref_alpha.data).abs().maxCoeff(), 1e-5);
  }
}

TEST(Rasterize, AlphaInUnitRangeAndExactlyZeroWhenUntouched) {
  std::mt19937_64 rng(8);
  auto set = oracle::random_set(30, rng, 0.3);
  auto cam = oracle::front_camera(64, 64, 25);
  const auto out = render(make_cloud(set), cam);
  EXPECT_GE(out.alpha.data.minCoeff(), 0.0);
  EXPECT_LE(out.alpha.data.maxCoeff(), 1.0);
  EXPECT_EQ(out.alpha(0, 0), 0.0);  // the cluster sits near the center
}

TEST(Rasterize, DeterministicAcrossThreadCounts) {
  std::mt19937_64 rng(9);
  const auto cloud = make_cloud(oracle::random_set(150, rng));
  auto cam = oracle::front_camera(64, 48, 40);
  Image<double> weights(64, 48, 3);
  std::uniform_real_distribution<double> u(-1, 1);
  for (auto& v : weights.data) v = u(rng);

  omp_set_num_threads(1);
  const auto a = render(cloud, cam);
  const auto ga = rasterize_backward(a, weights);
  omp_set_num_threads(4);
  const auto b = render(cloud, cam);
  const auto gb = rasterize_backward(b, weights);
  omp_set_num_threads(omp_get_num_procs());
  EXPECT_TRUE((a.color.data == b.color.data).all());
  EXPECT_TRUE(ga.centers == gb.centers);
  EXPECT_TRUE(ga.colors == gb.colors);
  EXPECT_TRUE(ga.opacities == gb.opacities);
  for (std::size_t i = 0; i < ga.covariances.size(); ++i) EXPECT_TRUE(ga.covariances[i] == gb.covariances[i]);
}

TEST(RasterizeBackward, ZeroOutputGradientGivesZeroGradients) {
  std::mt19937_64 rng(2);
  const auto cloud = make_cloud(oracle::random_set(20, rng));
  auto cam = oracle::front_camera(32, 32, 25);
  const auto out = render(cloud, cam);
  const auto g = rasterize_backward(out, Image<double>(32, 32, 3));
  EXPECT_EQ(g.centers.cwiseAbs().maxCoeff(), 0.0);
  EXPECT_EQ(g.colors.cwiseAbs().maxCoeff(), 0.0);
  EXPECT_EQ(g.opacities.cwiseAbs().maxCoeff(), 0.0);
  for (const auto& c : g.covariances) EXPECT_EQ(c.cwiseAbs().maxCoeff(), 0.0);
}

TEST(RasterizeBackward, MissingForwardStateIsContractViolation) {
  RenderOutput<double> empty;
  EXPECT_THROW(rasterize_backward(empty, Image<double>(1, 1, 3)), ContractViolation);
}

TEST(RasterizeBackward, SingleSplatColorGradientMatchesFiniteDifference) {
  auto cam = oracle::front_camera(33, 33, 40);
  const Mat3<double> cov = Mat3<double>::Identity() * 0.02;
  const auto red_at = [&](const Vec3<double>& color) {
    return render(single({0.05, -0.02, 3}, cov, color, 0.6), cam).color(16, 16, 0);
  };
  const Vec3<double> c(0.3, 0.6, 0.9);
  const auto out = render(single({0.05, -0.02, 3}, cov, c, 0.6), cam);
  Image<double> grad(33, 33, 3);
  grad(16, 16, 0) = 1.0;
  const auto g = rasterize_backward(out, grad);
  for (int ch = 0; ch < 3; ++ch) {
    const double numeric = oracle::central_difference(
        [&](double v) {
          Vec3<double> cc = c;
          cc[ch] = v;
          return red_at(cc);
        },
        c[ch], 1e-4);
    EXPECT_TRUE(oracle::grad_close(g.colors(ch, 0), numeric, 1e-4, 1e-12))
        << ch << ": " << g.colors(ch, 0) << " vs " << numeric;
  }
}

class RasterizeGradients : public ::testing::TestWithParam<int> {};

TEST_P(RasterizeGradients, AllParametersMatchFiniteDifferences) {
  std::mt19937_64 rng(100 + GetParam());
  const auto set = oracle::random_set(20, rng, 0.8);
  auto cam = oracle::front_camera(32, 32, 28);
  RenderSettings settings;
  settings.background = {0.3, 0.1, 0.2};
  Image<double> weights(32, 32, 3), alpha_weights(32, 32, 1);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const bool weighted = GetParam() % 2 == 1;
  for (auto& v : weights.data) v = weighted ? u(rng) : 1.0;
  for (auto& v : alpha_weights.data) v = weighted ? u(rng) - 0.5 : 0.0;

  const auto eval = [&](const GaussianSet<double>& s) {
    const auto out = render(make_cloud(s), cam, settings);
    const double loss = (out.color.data * weights.data).sum() + (out.alpha.data * alpha_weights.data).sum();
    return oracle::Evaluation{loss, contribution_signature(*out.state)};
  };
  const auto out = render(make_cloud(set), cam, settings);
  const auto cg = rasterize_backward(out, weights, &alpha_weights);
  const auto grads = params_backward(set, cg);
  const auto report = oracle::check_set_gradients(set, grads, eval);
  EXPECT_EQ(report.failed, 0) << report.first_failure;
  EXPECT_GT(report.checked, 200);
  EXPECT_LT(report.skipped, report.checked / 4);
}

INSTANTIATE_TEST_SUITE_P(RandomScenes, RasterizeGradients, ::testing::Range(0, 4));

TEST(Project, GrazingSplatFootprintIsBounded) {
  auto cam = oracle::front_camera(32, 32, 28);
  // beside the camera, barely in front of it: unclamped footprint would span thousands of pixels
  const auto cloud = single({3, 0, 0.05}, Mat3<double>::Identity() * 0.01, {1, 0, 0}, 0.99);
  const auto out = render(cloud, cam);
  EXPECT_LT(out.alpha(16, 16, 0), 1e-6);
}

TEST(RasterizeBackward, ClampedJacobianGradientsMatchFiniteDifferences) {
  std::mt19937_64 rng(7);
  auto set = oracle::random_set(3, rng);
  auto cam = oracle::front_camera(32, 32, 28);
  // off-frame centres with wide footprints reaching into the image
  set.centers.col(0) = Vec3<double>(1.3, 0.1, 1.0);
  set.centers.col(1) = Vec3<double>(-0.2, -1.4, 1.2);
  set.centers.col(2) = Vec3<double>(0.1, 0.0, 3.0);
  set.log_scales.col(0).setConstant(std::log(0.3));
  set.log_scales.col(1).setConstant(std::log(0.35));
  const auto eval = [&](const GaussianSet<double>& s) {
    const auto out = render(make_cloud(s), cam);
    return oracle::Evaluation{out.color.data.sum() + out.alpha.data.sum(), contribution_signature(*out.state)};
  };
  const auto out = render(make_cloud(set), cam);
  Image<double> ones(32, 32, 3), alpha_ones(32, 32, 1);
  ones.data.setOnes();
  alpha_ones.data.setOnes();
  const auto grads = params_backward(set, rasterize_backward(out, ones, &alpha_ones));
  const auto report = oracle::check_set_gradients(set, grads, eval);
  EXPECT_EQ(report.failed, 0) << report.first_failure;
  EXPECT_GT(report.checked, 20);
}

TEST(Rasterize, FloatAndDoubleAgree) {
  std::mt19937_64 rng(4);
  const auto cloud = make_cloud(oracle::random_set(80, rng));
  auto cam = oracle::front_camera(40, 40, 30);
  const auto d = render(cloud, cam);
  const auto f = render(cloud.cast<float>(), cam.cast<float>());
  EXPECT_LT((d.color.data.cast<float>() - f.color.data).abs().maxCoeff(), 1e-4f);
}

}  // namespace
}  // namespace glimpse
