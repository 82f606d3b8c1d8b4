#include "grouppose/geometry.hpp"

#include <Eigen/Dense>

#include <cmath>
#include <string>

#include "grouppose/errors.hpp"

namespace grouppose {

void CameraIntrinsics::validate() const {
  if (!(fx > 0.0 && fy > 0.0)) throw ConfigError("camera: focal lengths must be positive");
}

CameraIntrinsics CameraIntrinsics::for_image(std::size_t side) {
  const double s = static_cast<double>(side);
  return CameraIntrinsics{100.0 * s / 64.0, 100.0 * s / 64.0, s / 2.0, s / 2.0};
}

Pose3D recover_3d(const Pose2p5D& pose, const CameraIntrinsics& cam, double s0, double z_root) {
  cam.validate();
  if (!(s0 > 0.0)) throw DegenerateError("recover_3d: scale s0 must be positive");
  Pose3D out(pose.size());
  for (std::size_t i = 0; i < pose.size(); ++i) {
    const double z = s0 * pose[i].z_rel + z_root;
    if (!(z > 0.0)) {
      throw DegenerateError("recover_3d: joint " + std::to_string(i) + " has non-positive depth " + std::to_string(z));
    }
    out[i] = {z * (pose[i].u - cam.px) / cam.fx, z * (pose[i].v - cam.py) / cam.fy, z};
  }
  return out;
}

Pose2p5D project(const Pose3D& pose, const CameraIntrinsics& cam, double s0, double z_root) {
  cam.validate();
  if (!(s0 > 0.0)) throw DegenerateError("project: scale s0 must be positive");
  Pose2p5D out(pose.size());
  for (std::size_t i = 0; i < pose.size(); ++i) {
    const auto& [x, y, z] = pose[i];
    if (!(z > 0.0)) {
      throw DegenerateError("project: joint " + std::to_string(i) + " is behind the camera (z=" + std::to_string(z) + ")");
    }
    out[i] = {cam.fx * x / z + cam.px, cam.fy * y / z + cam.py, (z - z_root) / s0};
  }
  return out;
}

Vec3 SimilarityTransform::apply(const Vec3& p) const {
  Vec3 out{};
  for (int r = 0; r < 3; ++r) {
    out[r] = scale * (rotation[r][0] * p[0] + rotation[r][1] * p[1] + rotation[r][2] * p[2]) + translation[r];
  }
  return out;
}

Pose3D SimilarityTransform::apply(const Pose3D& pose) const {
  Pose3D out;
  out.reserve(pose.size());
  for (const auto& p : pose) out.push_back(apply(p));
  return out;
}

Alignment procrustes_align(const Pose3D& pred, const Pose3D& gt) {
  if (pred.size() != gt.size()) {
    throw ShapeError("procrustes_align: pose sizes differ (" + std::to_string(pred.size()) + " vs " +
                     std::to_string(gt.size()) + ")");
  }
  if (pred.size() < 3) throw DegenerateError("procrustes_align: need at least 3 joints");

  const auto n = static_cast<Eigen::Index>(pred.size());
  Eigen::Matrix<double, Eigen::Dynamic, 3> p(n, 3), g(n, 3);
  for (Eigen::Index i = 0; i < n; ++i)
    for (int c = 0; c < 3; ++c) {
      p(i, c) = pred[static_cast<std::size_t>(i)][c];
      g(i, c) = gt[static_cast<std::size_t>(i)][c];
    }
  const Eigen::RowVector3d p_mean = p.colwise().mean();
  const Eigen::RowVector3d g_mean = g.colwise().mean();
  p.rowwise() -= p_mean;
  g.rowwise() -= g_mean;

  const double p_norm2 = p.squaredNorm();
  // Collinear (or coincident) source points leave the rotation undetermined.
  Eigen::JacobiSVD<Eigen::Matrix3d> spread(p.transpose() * p);
  const auto sv = spread.singularValues();
  if (!(p_norm2 > 0.0) || sv(1) <= 1e-12 * sv(0)) {
    throw DegenerateError("procrustes_align: prediction is collinear, alignment is undetermined");
  }

  const Eigen::Matrix3d cross = p.transpose() * g;
  Eigen::JacobiSVD<Eigen::Matrix3d> svd(cross, Eigen::ComputeFullU | Eigen::ComputeFullV);
  const Eigen::Matrix3d& u = svd.matrixU();
  const Eigen::Matrix3d& v = svd.matrixV();
  Eigen::Vector3d signs(1.0, 1.0, (v * u.transpose()).determinant() < 0.0 ? -1.0 : 1.0);
  const Eigen::Matrix3d r = v * signs.asDiagonal() * u.transpose();
  const double s = svd.singularValues().dot(signs) / p_norm2;
  const Eigen::Vector3d t = g_mean.transpose() - s * r * p_mean.transpose();

  Alignment result;
  result.transform.scale = s;
  for (int a = 0; a < 3; ++a) {
    result.transform.translation[a] = t(a);
    for (int b = 0; b < 3; ++b) result.transform.rotation[a][b] = r(a, b);
  }
  result.aligned = result.transform.apply(pred);
  return result;
}

double distance(const Vec3& a, const Vec3& b) {
  return std::sqrt((a[0] - b[0]) * (a[0] - b[0]) + (a[1] - b[1]) * (a[1] - b[1]) + (a[2] - b[2]) * (a[2] - b[2]));
}

double mean_joint_error(const Pose3D& a, const Pose3D& b) {
  if (a.size() != b.size() || a.empty()) throw ShapeError("mean_joint_error: poses must be non-empty and equal size");
  double total = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) total += distance(a[i], b[i]);
  return total / static_cast<double>(a.size());
}

}  // namespace grouppose
