#include <cmath>
#include <numbers>

#include <gtest/gtest.h>

#include "grouppose/errors.hpp"
#include "grouppose/geometry.hpp"
#include "grouppose/rng.hpp"

using namespace grouppose;

namespace {

const CameraIntrinsics kCam{100.0, 100.0, 32.0, 32.0};

Mat3 rotation_from_axis_angle(Vec3 axis, double angle) {
  const double n = std::sqrt(axis[0] * axis[0] + axis[1] * axis[1] + axis[2] * axis[2]);
  for (auto& a : axis) a /= n;
  const double c = std::cos(angle), s = std::sin(angle), t = 1.0 - c;
  const auto [x, y, z] = axis;
  return {{{t * x * x + c, t * x * y - s * z, t * x * z + s * y},
           {t * x * y + s * z, t * y * y + c, t * y * z - s * x},
           {t * x * z - s * y, t * y * z + s * x, t * z * z + c}}};
}

Pose3D random_pose(Rng& rng, std::size_t n) {
  Pose3D pose(n);
  for (auto& p : pose) p = {rng.uniform(-80, 80), rng.uniform(-80, 80), rng.uniform(420, 580)};
  return pose;
}

double squared_residual(const Pose3D& a, const Pose3D& b) {
  double total = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) total += distance(a[i], b[i]) * distance(a[i], b[i]);
  return total;
}

}  // namespace

TEST(Camera, DefaultForImageSide) {
  EXPECT_EQ(CameraIntrinsics::for_image(64), kCam);
  EXPECT_EQ(CameraIntrinsics::for_image(128), (CameraIntrinsics{200.0, 200.0, 64.0, 64.0}));
  EXPECT_THROW((CameraIntrinsics{0.0, 1.0, 0.0, 0.0}.validate()), ConfigError);
}

TEST(Recover3d, PrincipalRayOffsetJoint) {
  const auto p = recover_3d({{132.0, 32.0, 0.0}}, kCam, 40.0, 500.0);
  EXPECT_NEAR(p[0][0], 500.0, 1e-12);
  EXPECT_NEAR(p[0][1], 0.0, 1e-12);
  EXPECT_NEAR(p[0][2], 500.0, 1e-12);
}

TEST(Recover3d, RelativeDepthScalesWithS0) {
  // z = 40 * 0.5 + 500 = 520, x = 520 * 50 / 100, y = 520 * -100 / 100
  const auto p = recover_3d({{82.0, -68.0, 0.5}}, kCam, 40.0, 500.0);
  EXPECT_NEAR(p[0][0], 260.0, 1e-12);
  EXPECT_NEAR(p[0][1], -520.0, 1e-12);
  EXPECT_NEAR(p[0][2], 520.0, 1e-12);
}

TEST(Recover3d, NonPositiveDepthNamesJoint) {
  try {
    recover_3d({{32, 32, 0.0}, {32, 32, -20.0}}, kCam, 25.0, 500.0);
    FAIL() << "expected DegenerateError";
  } catch (const DegenerateError& e) {
    EXPECT_NE(std::string(e.what()).find("joint 1"), std::string::npos) << e.what();
  }
  EXPECT_THROW(recover_3d({{32, 32, 0.0}}, kCam, 0.0, 500.0), DegenerateError);
}

TEST(Project, KnownPoint) {
  const auto p = project({{100.0, 0.0, 500.0}}, kCam, 40.0, 480.0);
  EXPECT_NEAR(p[0].u, 52.0, 1e-12);
  EXPECT_NEAR(p[0].v, 32.0, 1e-12);
  EXPECT_NEAR(p[0].z_rel, 0.5, 1e-12);
}

TEST(Project, PointOnCameraPlaneIsDegenerate) {
  EXPECT_THROW(project({{100.0, 0.0, 0.0}}, kCam, 40.0, 500.0), DegenerateError);
  EXPECT_THROW(project({{1.0, 1.0, -3.0}}, kCam, 40.0, 500.0), DegenerateError);
}

TEST(Project, RoundTripWithRecover) {
  Rng rng(11);
  for (int trial = 0; trial < 200; ++trial) {
    const auto pose = random_pose(rng, 21);
    const double s0 = rng.uniform(20, 60), z_root = pose[9][2];
    const CameraIntrinsics cam{rng.uniform(50, 300), rng.uniform(50, 300), rng.uniform(0, 64), rng.uniform(0, 64)};
    const auto back = recover_3d(project(pose, cam, s0, z_root), cam, s0, z_root);
    for (std::size_t i = 0; i < pose.size(); ++i)
      for (int a = 0; a < 3; ++a) EXPECT_NEAR(back[i][a], pose[i][a], 1e-9);
  }
}

TEST(Procrustes, RecoversKnownSimilarity) {
  Rng rng(13);
  for (int trial = 0; trial < 50; ++trial) {
    const auto pred = random_pose(rng, 21);
    SimilarityTransform truth;
    truth.scale = rng.uniform(0.5, 2.0);
    truth.rotation = rotation_from_axis_angle({rng.normal(), rng.normal(), rng.normal()},
                                              rng.uniform(-std::numbers::pi, std::numbers::pi));
    truth.translation = {rng.uniform(-50, 50), rng.uniform(-50, 50), rng.uniform(-50, 50)};
    const auto gt = truth.apply(pred);
    const auto fit = procrustes_align(pred, gt);
    EXPECT_NEAR(fit.transform.scale, truth.scale, 1e-9);
    for (int r = 0; r < 3; ++r) {
      EXPECT_NEAR(fit.transform.translation[r], truth.translation[r], 1e-6);
      for (int c = 0; c < 3; ++c) EXPECT_NEAR(fit.transform.rotation[r][c], truth.rotation[r][c], 1e-9);
    }
    EXPECT_LT(mean_joint_error(fit.aligned, gt), 1e-8);
  }
}

TEST(Procrustes, RotationIsProper) {
  Rng rng(17);
  // A mirrored target must not be matched with a reflection.
  const auto pred = random_pose(rng, 10);
  Pose3D mirrored = pred;
  for (auto& p : mirrored) p[0] = -p[0];
  const auto& r = procrustes_align(pred, mirrored).transform.rotation;
  const double det = r[0][0] * (r[1][1] * r[2][2] - r[1][2] * r[2][1]) -
                     r[0][1] * (r[1][0] * r[2][2] - r[1][2] * r[2][0]) +
                     r[0][2] * (r[1][0] * r[2][1] - r[1][1] * r[2][0]);
  EXPECT_NEAR(det, 1.0, 1e-12);
}

TEST(Procrustes, SquaredResidualNeverIncreases) {
  Rng rng(19);
  for (int trial = 0; trial < 200; ++trial) {
    const auto pred = random_pose(rng, 21);
    const auto gt = random_pose(rng, 21);
    const auto fit = procrustes_align(pred, gt);
    EXPECT_LE(squared_residual(fit.aligned, gt), squared_residual(pred, gt) * (1.0 + 1e-12));
  }
}

TEST(Procrustes, RejectsDegenerateInput) {
  const Pose3D line{{0, 0, 1}, {1, 1, 2}, {2, 2, 3}, {3, 3, 4}};
  EXPECT_THROW(procrustes_align(line, line), DegenerateError);
  EXPECT_THROW(procrustes_align(Pose3D{{0, 0, 1}, {1, 0, 1}}, Pose3D{{0, 0, 1}, {1, 0, 1}}), DegenerateError);
  EXPECT_THROW(procrustes_align(Pose3D(4), Pose3D(5)), ShapeError);
}

TEST(MeanJointError, Example) {
  const Pose3D a{{0, 0, 0}, {0, 0, 0}};
  const Pose3D b{{3, 4, 0}, {0, 0, 1}};
  EXPECT_DOUBLE_EQ(mean_joint_error(a, b), 3.0);
  EXPECT_THROW(mean_joint_error(Pose3D{}, Pose3D{}), ShapeError);
}
