#pragma once

// Perspective camera algebra: lifting 2.5D joints (pixels + relative depth)
// to camera-frame 3D millimeters, the inverse projection, and similarity
// (Procrustes) alignment.

#include <array>
#include <cstddef>
#include <vector>

namespace grouppose {

using Vec3 = std::array<double, 3>;
using Mat3 = std::array<std::array<double, 3>, 3>;

struct CameraIntrinsics {
  double fx = 100.0;
  double fy = 100.0;
  double px = 32.0;
  double py = 32.0;

  void validate() const;
  /// Default camera for a square image: f = 100 * side / 64, principal point at the center.
  static CameraIntrinsics for_image(std::size_t side);

  friend bool operator==(const CameraIntrinsics&, const CameraIntrinsics&) = default;
};

struct Joint2p5D {
  double u = 0.0;      // pixels
  double v = 0.0;      // pixels
  double z_rel = 0.0;  // (z - z_root) / s0
};

using Pose2p5D = std::vector<Joint2p5D>;
using Pose3D = std::vector<Vec3>;  // millimeters, camera frame

/// z = s0 * z_rel + z_root, x = z (u - px) / fx, y = z (v - py) / fy.
/// Throws DegenerateError naming the first joint with non-positive depth.
Pose3D recover_3d(const Pose2p5D& pose, const CameraIntrinsics& cam, double s0, double z_root);

/// Inverse of recover_3d. Throws DegenerateError for joints at z <= 0.
Pose2p5D project(const Pose3D& pose, const CameraIntrinsics& cam, double s0, double z_root);

struct SimilarityTransform {
  double scale = 1.0;
  Mat3 rotation{{{1, 0, 0}, {0, 1, 0}, {0, 0, 1}}};
  Vec3 translation{0, 0, 0};

  Vec3 apply(const Vec3& p) const;
  Pose3D apply(const Pose3D& pose) const;
};

struct Alignment {
  Pose3D aligned;
  SimilarityTransform transform;
};

/// Least-squares similarity transform mapping `pred` onto `gt`, rotation
/// restricted to det = +1. Requires at least 3 non-collinear joints.
Alignment procrustes_align(const Pose3D& pred, const Pose3D& gt);

double distance(const Vec3& a, const Vec3& b);
/// Mean Euclidean distance between corresponding joints.
double mean_joint_error(const Pose3D& a, const Pose3D& b);

}  // namespace grouppose
