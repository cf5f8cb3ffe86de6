#include "glimpse/articulation.hpp"
#include "glimpse/render.hpp"

#include "gradcheck.hpp"
#include "oracles.hpp"

#include <gtest/gtest.h>

#include <Eigen/Geometry>

#include <numbers>
#include <random>

namespace glimpse {
namespace {

constexpr double kPi = std::numbers::pi;

Skeleton chain3() {
  Skeleton s;
  s.parents = {-1, 0, 1};
  s.rest.resize(3, 3);
  s.rest << 0.2, 0.2, 0.2,  //
      1.0, 2.0, 3.0,        //
      0.0, 0.0, 0.0;
  return s;
}

Eigen::Matrix3d rot_z(double a) { return Eigen::AngleAxisd(a, Eigen::Vector3d::UnitZ()).toRotationMatrix(); }

/// Random point cloud with smooth, random-but-normalized weights over `joints`.
TemplateMesh random_mesh(int vertices, int joints, std::mt19937_64& rng, double spread = 0.5) {
  std::uniform_real_distribution<double> u(-spread, spread), w(0.0, 1.0);
  TemplateMesh m;
  m.vertices.resize(3, vertices);
  m.weights.resize(vertices, joints);
  for (int v = 0; v < vertices; ++v) {
    m.vertices.col(v) = Eigen::Vector3d(u(rng), u(rng), u(rng));
    for (int k = 0; k < joints; ++k) m.weights(v, k) = w(rng);
    m.weights.row(v) /= m.weights.row(v).sum();
  }
  return m;
}

GaussianSet<double> canonical_from(const GaussianSet<double>& world) {
  return GaussianSet<double>(Space::Canonical, static_cast<const GaussianParams<double>&>(world));
}

TEST(JointTransforms, ZeroPoseIsIdentityPlusRootTranslation) {
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> u(-1, 1);
  Eigen::Matrix3Xd rest(3, kSmplJoints);
  for (int k = 0; k < kSmplJoints; ++k) rest.col(k) = Eigen::Vector3d(u(rng), u(rng), u(rng));
  const Skeleton skel = smpl_skeleton(rest);
  Pose pose = Pose::zero(kSmplJoints);
  pose.translation = Eigen::Vector3d(0.5, -1, 2);
  for (const auto& t : joint_transforms(skel, pose)) {
    EXPECT_LT((t.rotation - Eigen::Matrix3d::Identity()).cwiseAbs().maxCoeff(), 1e-12);
    EXPECT_LT((t.translation - pose.translation).cwiseAbs().maxCoeff(), 1e-12);
  }
}

TEST(JointTransforms, RootRotationMovesWholeChainAboutRoot) {
  const Skeleton skel = chain3();
  Pose pose = Pose::zero(3);
  pose.axis_angles.col(0) = Eigen::Vector3d(0, 0, kPi / 2);
  const auto ts = joint_transforms(skel, pose);
  const Eigen::Matrix3d r = rot_z(kPi / 2);
  const Eigen::Vector3d root = skel.rest.col(0);
  for (int k = 0; k < 3; ++k) {
    EXPECT_LT((ts[static_cast<std::size_t>(k)].rotation - r).cwiseAbs().maxCoeff(), 1e-12);
    // hand-composed: x -> R (x - root) + root
    EXPECT_LT((ts[static_cast<std::size_t>(k)].translation - (root - r * root)).cwiseAbs().maxCoeff(), 1e-12);
  }
  // joint 2 rest (0.2, 3, 0) swings to root + R (0, 2, 0) = (-1.8, 1, 0)
  EXPECT_LT((posed_joints(skel, pose).col(2) - Eigen::Vector3d(-1.8, 1.0, 0.0)).norm(), 1e-12);
}

TEST(JointTransforms, ChildRotationLeavesAncestorsAlone) {
  const Skeleton skel = chain3();
  Pose pose = Pose::zero(3);
  pose.axis_angles.col(2) = Eigen::Vector3d(0.3, -0.7, 1.1);
  const auto ts = joint_transforms(skel, pose);
  for (int k = 0; k < 2; ++k) {
    EXPECT_LT((ts[static_cast<std::size_t>(k)].rotation - Eigen::Matrix3d::Identity()).cwiseAbs().maxCoeff(), 1e-15);
    EXPECT_LT(ts[static_cast<std::size_t>(k)].translation.norm(), 1e-15);
  }
  // the joint itself stays put under its own rotation
  const Eigen::Vector3d j2 = skel.rest.col(2);
  EXPECT_LT((ts[2].rotation * j2 + ts[2].translation - j2).norm(), 1e-12);
}

TEST(JointTransforms, RejectsMalformedInput) {
  Skeleton bad = chain3();
  bad.parents = {-1, 2, 0};
  EXPECT_THROW(joint_transforms(bad, Pose::zero(3)), InvalidParameter);
  EXPECT_THROW(joint_transforms(chain3(), Pose::zero(4)), ShapeMismatch);
  Pose nan = Pose::zero(3);
  nan.axis_angles(0, 1) = std::numeric_limits<double>::quiet_NaN();
  EXPECT_THROW(joint_transforms(chain3(), nan), InvalidParameter);
}

TEST(Pose, NormalizationWrapsLargeAngles) {
  Pose p = Pose::zero(1);
  p.axis_angles.col(0) = Eigen::Vector3d(0, 0, 2 * kPi + 0.25);
  const Pose q = p.normalized();
  EXPECT_NEAR(q.axis_angles.col(0).norm(), 0.25, 1e-12);
  EXPECT_LT((axis_angle_to_rotation(q.axis_angles.col(0)) - axis_angle_to_rotation(p.axis_angles.col(0)))
                .cwiseAbs()
                .maxCoeff(),
            1e-12);
}

TEST(KdTree, MatchesBruteForce) {
  std::mt19937_64 rng(2);
  std::uniform_real_distribution<double> u(-1, 1);
  Eigen::Matrix3Xd pts(3, 2000);
  for (Eigen::Index i = 0; i < pts.cols(); ++i) pts.col(i) = Eigen::Vector3d(u(rng), u(rng), u(rng));
  const KdTree tree(pts);
  for (int q = 0; q < 200; ++q) {
    const Eigen::Vector3d x(u(rng), u(rng), u(rng));
    std::vector<std::pair<double, Eigen::Index>> brute;
    for (Eigen::Index i = 0; i < pts.cols(); ++i) brute.emplace_back((pts.col(i) - x).squaredNorm(), i);
    std::sort(brute.begin(), brute.end());
    brute.resize(30);
    EXPECT_EQ(tree.nearest(x, 30), brute);
  }
}

TEST(VertexWeights, ExactHitReturnsVertexWeights) {
  std::mt19937_64 rng(3);
  const TemplateMesh mesh = random_mesh(100, 5, rng);
  for (int v : {0, 17, 99}) {
    const Eigen::VectorXd w = compute_vertex_weights(mesh.vertices.col(v), mesh);
    EXPECT_EQ(w, mesh.weights.row(v).transpose());
  }
}

TEST(VertexWeights, IdenticalNeighborsGiveThoseWeights) {
  std::mt19937_64 rng(4);
  TemplateMesh mesh = random_mesh(60, 4, rng);
  mesh.weights.rowwise() = Eigen::RowVector4d(0.1, 0.2, 0.3, 0.4);
  const Eigen::VectorXd w = compute_vertex_weights(Eigen::Vector3d(0.05, 0.01, -0.02), mesh);
  EXPECT_LT((w - Eigen::Vector4d(0.1, 0.2, 0.3, 0.4)).cwiseAbs().maxCoeff(), 1e-14);
}

TEST(VertexWeights, MidpointOfTwoOneHotVertices) {
  // two one-hot vertices 0.02 m apart, 28 others on a 100 m shell carrying joint 2
  TemplateMesh mesh;
  mesh.vertices.resize(3, 30);
  mesh.weights = Eigen::MatrixXd::Zero(30, 3);
  mesh.vertices.col(0) = Eigen::Vector3d(-0.01, 0, 0);
  mesh.vertices.col(1) = Eigen::Vector3d(0.01, 0, 0);
  mesh.weights(0, 0) = 1;
  mesh.weights(1, 1) = 1;
  for (int v = 2; v < 30; ++v) {
    const double a = 2 * kPi * v / 28.0;
    mesh.vertices.col(v) = 100.0 * Eigen::Vector3d(std::cos(a), std::sin(a), 0);
    mesh.weights(v, 2) = 1;
  }
  const Eigen::VectorXd w = compute_vertex_weights(Eigen::Vector3d::Zero(), mesh);
  // explicit: 2 * (1/0.01) near vs 28 * (1/100) far
  const double near = 1 / 0.01, far = 28 / 100.0;
  EXPECT_NEAR(w[0], near / (2 * near + far), 1e-12);
  EXPECT_NEAR(w[1], w[0], 1e-12);
  EXPECT_NEAR(w[0], 0.5, 2e-3);
  EXPECT_NEAR(w.sum(), 1.0, 1e-12);
}

TEST(VertexWeights, IdwJacobianMatchesFiniteDifferences) {
  std::mt19937_64 rng(5);
  const TemplateMesh mesh = random_mesh(25, 4, rng);  // fewer than 30: neighbor set never changes
  const IdwSkinning idw(mesh);
  std::uniform_real_distribution<double> u(-0.4, 0.4);
  for (int trial = 0; trial < 20; ++trial) {
    const Eigen::Vector3d x(u(rng), u(rng), u(rng));
    Eigen::MatrixXd jac;
    idw.weights(x, &jac);
    for (int a = 0; a < 3; ++a) {
      Eigen::Vector3d xp = x, xm = x;
      xp[a] += 1e-6;
      xm[a] -= 1e-6;
      const Eigen::VectorXd fd = (idw.weights(xp) - idw.weights(xm)) / 2e-6;
      EXPECT_LT((fd - jac.col(a)).cwiseAbs().maxCoeff(), 1e-5 * (1 + fd.cwiseAbs().maxCoeff()));
    }
  }
}

TEST(SkinningGrid, SingleVoxelHoldsCenterWeights) {
  std::mt19937_64 rng(6);
  const TemplateMesh mesh = random_mesh(80, 5, rng);
  const SkinningGrid g = bake_skinning_grid(mesh, Eigen::Vector3i(1, 1, 1));
  ASSERT_EQ(g.weights.cols(), 1);
  const Eigen::VectorXd expected = compute_vertex_weights(g.voxel_center(0, 0, 0), mesh);
  EXPECT_LT((g.weights.col(0) - expected).cwiseAbs().maxCoeff(), 1e-15);
  // everything clamps to that one voxel
  EXPECT_LT((query_weights(g, Eigen::Vector3d(5, -5, 5)) - expected).cwiseAbs().maxCoeff(), 1e-15);
}

TEST(SkinningGrid, CoversPaddedBoundsAndNormalizes) {
  std::mt19937_64 rng(7);
  const TemplateMesh mesh = random_mesh(300, 6, rng);
  const SkinningGrid g = bake_skinning_grid(mesh, 16);
  const Eigen::Vector3d lo = mesh.vertices.rowwise().minCoeff(), hi = mesh.vertices.rowwise().maxCoeff();
  const Eigen::Vector3d far = g.origin + g.voxel * g.dims.cast<double>();
  EXPECT_TRUE(((lo - g.origin).array() >= 0.1 - 1e-12).all());
  EXPECT_TRUE(((far - hi).array() >= 0.1 - 1e-12).all());
  EXPECT_EQ(g.dims.maxCoeff(), 16);
  EXPECT_LT((g.weights.colwise().sum().array() - 1).abs().maxCoeff(), 1e-5);
  EXPECT_TRUE((g.weights.array() >= 0).all());
}

TEST(SkinningGrid, VoxelCenteredOnVertexTakesItsWeights) {
  std::mt19937_64 rng(8);
  TemplateMesh mesh = random_mesh(50, 3, rng);
  const SkinningGrid probe = bake_skinning_grid(mesh, 8);
  // move a vertex onto a voxel center (bounds unchanged since it stays interior)
  const Eigen::Vector3d c = probe.voxel_center(4, 4, 4);
  mesh.vertices.col(0) = c;
  const SkinningGrid g = bake_skinning_grid(mesh, 8);
  ASSERT_LT((g.voxel_center(4, 4, 4) - c).norm(), 1e-12);
  EXPECT_EQ(g.weights.col(g.voxel_index(4, 4, 4)), mesh.weights.row(0).transpose());
}

TEST(SkinningGrid, InterpolatesNodesAndMidpoints) {
  std::mt19937_64 rng(9);
  const TemplateMesh mesh = random_mesh(200, 4, rng);
  const SkinningGrid g = bake_skinning_grid(mesh, 10);
  const Eigen::VectorXd a = g.weights.col(g.voxel_index(3, 4, 5));
  const Eigen::VectorXd b = g.weights.col(g.voxel_index(4, 4, 5));
  EXPECT_LT((query_weights(g, g.voxel_center(3, 4, 5)) - a / a.sum()).cwiseAbs().maxCoeff(), 1e-14);
  const Eigen::VectorXd mid = query_weights(g, 0.5 * (g.voxel_center(3, 4, 5) + g.voxel_center(4, 4, 5)));
  const Eigen::VectorXd blend = 0.5 * (a + b);
  EXPECT_LT((mid - blend / blend.sum()).cwiseAbs().maxCoeff(), 1e-14);
}

TEST(SkinningGrid, ContinuousAcrossVoxelBoundaries) {
  std::mt19937_64 rng(10);
  const TemplateMesh mesh = random_mesh(200, 4, rng);
  const SkinningGrid g = bake_skinning_grid(mesh, 12);
  for (int a = 0; a < 3; ++a) {
    const Eigen::Vector3d node = g.voxel_center(5, 5, 5);
    Eigen::Vector3d lo = node, hi = node;
    lo[a] -= 1e-12;
    hi[a] += 1e-12;
    EXPECT_LT((query_weights(g, lo) - query_weights(g, hi)).cwiseAbs().maxCoeff(), 1e-9);
  }
}

TEST(SkinningGrid, JacobianMatchesFiniteDifferences) {
  std::mt19937_64 rng(11);
  const TemplateMesh mesh = random_mesh(200, 4, rng);
  const SkinningGrid g = bake_skinning_grid(mesh, 12);
  std::uniform_real_distribution<double> u(-0.4, 0.4);
  for (int trial = 0; trial < 20; ++trial) {
    const Eigen::Vector3d x(u(rng), u(rng), u(rng));
    Eigen::MatrixXd jac;
    g.weights_at(x, &jac);
    for (int a = 0; a < 3; ++a) {
      Eigen::Vector3d xp = x, xm = x;
      xp[a] += 1e-7;
      xm[a] -= 1e-7;
      const Eigen::VectorXd fd = (query_weights(g, xp) - query_weights(g, xm)) / 2e-7;
      EXPECT_LT((fd - jac.col(a)).cwiseAbs().maxCoeff(), 1e-5 * (1 + fd.cwiseAbs().maxCoeff()));
    }
  }
}

TEST(SkinningGrid, AgreesWithExactIdwNearSurface) {
  // 24-joint capsule-ish body: vertices on a few cylinders, weights from joint proximity
  std::mt19937_64 rng(12);
  std::uniform_real_distribution<double> u(0, 1), ang(0, 2 * kPi);
  TemplateMesh mesh;
  const int nv = 3000;
  mesh.vertices.resize(3, nv);
  mesh.weights = Eigen::MatrixXd::Zero(nv, kSmplJoints);
  Eigen::Matrix3Xd joints(3, kSmplJoints);
  for (int k = 0; k < kSmplJoints; ++k) joints.col(k) = Eigen::Vector3d(0.3 * std::sin(k), 1.6 * k / 23.0, 0);
  for (int v = 0; v < nv; ++v) {
    const double h = 1.6 * u(rng), a = ang(rng);
    mesh.vertices.col(v) = Eigen::Vector3d(0.3 * std::sin(h * 23 / 1.6) + 0.12 * std::cos(a), h, 0.12 * std::sin(a));
    Eigen::VectorXd w(kSmplJoints);
    for (int k = 0; k < kSmplJoints; ++k) w[k] = std::exp(-(mesh.vertices.col(v) - joints.col(k)).squaredNorm() / 0.04);
    mesh.weights.row(v) = w.transpose() / w.sum();
  }
  const SkinningGrid g = bake_skinning_grid(mesh, 64);
  double worst = 0;
  std::normal_distribution<double> jitter(0, 0.01);
  for (int i = 0; i < 1000; ++i) {
    const auto v = static_cast<Eigen::Index>(u(rng) * nv) % nv;
    const Eigen::Vector3d x = mesh.vertices.col(v) + Eigen::Vector3d(jitter(rng), jitter(rng), jitter(rng));
    const Eigen::VectorXd exact = oracle::idw_weights(x, mesh.vertices, mesh.weights);
    worst = std::max(worst, (query_weights(g, x) - exact).cwiseAbs().maxCoeff());
  }
  EXPECT_LT(worst, 5e-2);
  RecordProperty("worst", std::to_string(worst));
}

class DeformTest : public ::testing::Test {
protected:
  void SetUp() override {
    std::mt19937_64 rng(13);
    mesh = random_mesh(25, 3, rng, 0.6);
    skel = chain3();
    skel.rest << 0, 0, 0,  //
        -0.4, 0.0, 0.4,    //
        4, 4, 4;
    for (Eigen::Index v = 0; v < mesh.vertices.cols(); ++v) mesh.vertices(2, v) += 4;
    set = canonical_from(oracle::random_set(15, rng, 0.5, 3.6, 4.4));
  }
  TemplateMesh mesh;
  Skeleton skel;
  GaussianSet<double> set{Space::Canonical};
};

TEST_F(DeformTest, ZeroPoseIsIdentity) {
  const IdwSkinning idw(mesh);
  const auto d = deform(set, skel, Pose::zero(3), idw);
  EXPECT_LT((d.cloud.centers - set.centers).cwiseAbs().maxCoeff(), 1e-12);
  for (Eigen::Index i = 0; i < set.size(); ++i) {
    EXPECT_LT((d.cloud.covariances[static_cast<std::size_t>(i)] - set.covariance(i)).cwiseAbs().maxCoeff(), 1e-12);
  }
}

TEST_F(DeformTest, RejectsWorldSpaceInput) {
  const GaussianSet<double> world(Space::World, static_cast<const GaussianParams<double>&>(set));
  EXPECT_THROW(deform(world, skel, Pose::zero(3), IdwSkinning(mesh)), ContractViolation);
}

TEST_F(DeformTest, GlobalRigidPoseIsRigid) {
  const IdwSkinning idw(mesh);
  Pose pose = Pose::zero(3);
  pose.axis_angles.col(0) = Eigen::Vector3d(0.4, -1.2, 0.7);
  pose.translation = Eigen::Vector3d(0.1, 0.2, -0.3);
  const auto ts = joint_transforms(skel, pose);
  const auto d = deform(set, skel, pose, idw);
  for (Eigen::Index i = 0; i < set.size(); ++i) {
    const Eigen::Vector3d expected = ts[0].rotation * set.centers.col(i) + ts[0].translation;
    EXPECT_LT((d.cloud.centers.col(i) - expected).norm(), 1e-12);
    const auto& cov = d.cloud.covariances[static_cast<std::size_t>(i)];
    EXPECT_NEAR(cov.determinant() / set.covariance(i).determinant(), 1.0, 1e-9);
    EXPECT_LT((cov - cov.transpose()).cwiseAbs().maxCoeff(), 1e-12);
  }
}

TEST_F(DeformTest, OneHotWeightIsRigidRotation) {
  TemplateMesh onehot = mesh;
  onehot.weights.setZero();
  onehot.weights.col(2).setOnes();
  Pose pose = Pose::zero(3);
  pose.axis_angles.col(2) = Eigen::Vector3d(0.9, 0.1, -0.5);
  const auto d = deform(set, skel, pose, IdwSkinning(onehot));
  const Eigen::Matrix3d r = joint_transforms(skel, pose)[2].rotation;
  for (Eigen::Index i = 0; i < set.size(); ++i) {
    const auto& cov = d.cloud.covariances[static_cast<std::size_t>(i)];
    EXPECT_LT((cov - r * set.covariance(i) * r.transpose()).cwiseAbs().maxCoeff(), 1e-12);
    EXPECT_NEAR(cov.determinant() / set.covariance(i).determinant(), 1.0, 1e-9);
  }
}

TEST_F(DeformTest, HalfBlendUsesAveragedRotationMatrix) {
  TemplateMesh half = mesh;
  half.weights.setZero();
  half.weights.col(0).setConstant(0.5);
  half.weights.col(2).setConstant(0.5);
  Pose pose = Pose::zero(3);
  pose.axis_angles.col(2) = Eigen::Vector3d(0, 0, kPi / 2);
  const auto d = deform(set, skel, pose, IdwSkinning(half));
  Eigen::Matrix3d avg;
  avg << 0.5, -0.5, 0, 0.5, 0.5, 0, 0, 0, 1;  // (I + Rz(90)) / 2
  for (Eigen::Index i = 0; i < set.size(); ++i) {
    EXPECT_LT((d.blend_rotations[static_cast<std::size_t>(i)] - avg).cwiseAbs().maxCoeff(), 1e-12);
    const Eigen::Matrix3d expected = avg * set.covariance(i) * avg.transpose();
    EXPECT_LT((d.cloud.covariances[static_cast<std::size_t>(i)] - expected).cwiseAbs().maxCoeff(), 1e-12);
  }
  EXPECT_NEAR(avg.determinant(), 0.5, 1e-15);  // shrinks volume, not a rotation
}

TEST_F(DeformTest, BackwardMatchesFiniteDifferencesOnDirectLoss) {
  const IdwSkinning idw(mesh);
  Pose pose = Pose::zero(3);
  pose.axis_angles.col(0) = Eigen::Vector3d(0.2, 0.1, -0.3);
  pose.axis_angles.col(1) = Eigen::Vector3d(-0.5, 0.4, 0.2);
  pose.axis_angles.col(2) = Eigen::Vector3d(0.3, -0.6, 0.8);
  std::mt19937_64 rng(14);
  std::normal_distribution<double> n(0, 1);
  CloudGrads<double> g;
  g.set_zero(set.size());
  for (auto& v : g.centers.reshaped()) v = n(rng);
  for (auto& c : g.covariances)
    for (auto& v : c.reshaped()) v = n(rng);
  for (auto& v : g.colors.reshaped()) v = n(rng);
  for (auto& v : g.opacities) v = n(rng);
  const auto loss = [&](const GaussianSet<double>& s) {
    const auto d = deform(s, skel, pose, idw, {false});
    double l = (d.cloud.centers.array() * g.centers.array()).sum() +
               (d.cloud.colors.array() * g.colors.array()).sum() + d.cloud.opacities.dot(g.opacities);
    for (Eigen::Index i = 0; i < s.size(); ++i) {
      l += (d.cloud.covariances[static_cast<std::size_t>(i)].array() *
            g.covariances[static_cast<std::size_t>(i)].array())
               .sum();
    }
    return oracle::Evaluation{l, 0};
  };
  const auto analytic = deform_backward(set, deform(set, skel, pose, idw), g);
  const auto report = oracle::check_set_gradients(set, analytic, loss, 1e-6);
  EXPECT_EQ(report.failed, 0) << report.first_failure;
  EXPECT_EQ(report.checked, set.size() * 14);
}

TEST_F(DeformTest, BackwardThroughRendererMatchesFiniteDifferences) {
  const IdwSkinning idw(mesh);
  Pose pose = Pose::zero(3);
  pose.axis_angles.col(1) = Eigen::Vector3d(0.1, 0.3, -0.2);
  pose.axis_angles.col(2) = Eigen::Vector3d(-0.2, 0.2, 0.4);
  const Camera<double> cam = oracle::front_camera(32, 32, 40);
  std::mt19937_64 rng(15);
  std::uniform_real_distribution<double> u(0, 1);
  ImageD weights(32, 32, 3);
  for (auto& v : weights.data) v = u(rng);
  const auto eval = [&](const GaussianSet<double>& s) {
    const auto d = deform(s, skel, pose, idw, {false});
    const auto out = render(d.cloud, cam, RenderSettings{});
    return oracle::Evaluation{(out.color.data * weights.data).sum(), contribution_signature(*out.state)};
  };
  const auto d = deform(set, skel, pose, idw);
  const auto out = render(d.cloud, cam, RenderSettings{});
  const auto analytic = deform_backward(set, d, rasterize_backward(out, weights));
  const auto report = oracle::check_set_gradients(set, analytic, eval);
  EXPECT_EQ(report.failed, 0) << report.first_failure;
  EXPECT_GT(report.checked, 100);
}

}  // namespace
}  // namespace glimpse
