#pragma once

// Procedural hand benchmark with planted joint groups.
//
// Joint layout (21 joints): wrist 0, then four joints per finger from the
// base outwards (MCP, PIP, DIP, tip) for thumb 1-4, index 5-8, middle 9-12,
// ring 13-16 and pinky 17-20. The root joint is the middle MCP (9) and the
// global scale s0 is the middle MCP-PIP distance (joints 9 and 10).
//
// Planted grouping: one articulation latent drives every joint of a group.
// Group 0 = wrist + thumb, group 1 = index, group 2 = middle + ring + pinky.

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "grouppose/geometry.hpp"
#include "grouppose/rng.hpp"

namespace grouppose {

inline constexpr std::size_t kHandJoints = 21;
inline constexpr std::size_t kRootJoint = 9;
inline constexpr std::size_t kScaleJoint = 10;
inline constexpr std::size_t kPlantedGroups = 3;

std::string_view joint_name(std::size_t joint);

/// Planted group label per joint.
std::vector<std::size_t> planted_grouping();

struct SynthConfig {
  std::size_t image_side = 64;
  CameraIntrinsics camera = CameraIntrinsics::for_image(64);
  /// When false, every finger draws its own latent (no shared group driver).
  bool groups_planted = true;
  double jitter_deg = 4.0;
  double max_tilt_deg = 10.0;  // rotation about the camera x and y axes
  double max_roll_deg = 15.0;  // in-plane rotation
  double offset_mm = 10.0;     // lateral placement noise of the hand center
  double z_root_min = 400.0;
  double z_root_max = 600.0;
  double blob_sigma = 1.5;
  double frame_margin = 2.0;   // joints must project at least this far inside the image
  std::size_t max_retries = 1000;

  void validate() const;
  /// Config for a square image with the default camera scaled to its size.
  static SynthConfig for_image(std::size_t side);
};

/// Articulation and placement of one hand.
struct PoseLatents {
  std::array<double, 5> finger_curl{};  // per finger, in [0, 1]
  std::array<double, kHandJoints> jitter_rad{};
  Mat3 rotation{{{1, 0, 0}, {0, 1, 0}, {0, 0, 1}}};
  Vec3 root{0.0, 0.0, 500.0};  // camera-frame position of the root joint
};

/// Forward kinematics of the fixed skeleton in the camera frame.
Pose3D hand_pose(const PoseLatents& latents);

/// Flat, unarticulated hand in its own frame, root joint at the origin.
Pose3D template_pose();

struct SampledPose {
  Pose3D pose;
  double s0 = 0.0;
  double z_root = 0.0;
  PoseLatents latents;
};

/// Draws latents, runs kinematics and rejects poses that leave the frame.
/// Throws Error after `max_retries` rejections.
SampledPose sample_pose(Rng& rng, const SynthConfig& config);

/// Sum of Gaussian blobs (amplitude 0.5 + 0.5 i / (N - 1) for joint i) clamped
/// to [0, 1]. Pixel (r, c) has center (c + 0.5, r + 0.5). Row-major side x side.
std::vector<float> render_blobs(std::span<const std::array<double, 2>> joints_px, std::size_t side,
                                double sigma = 1.5);

struct SyntheticSample {
  std::vector<float> image;  // side x side, row-major
  Pose3D gt_3d;
  Pose2p5D gt_2p5d;
  double s0 = 0.0;
  double z_root = 0.0;
};

inline constexpr std::uint32_t kDatasetVersion = 1;

struct DatasetHeader {
  std::uint32_t version = kDatasetVersion;
  std::uint64_t count = 0;
  std::uint32_t joints = kHandJoints;
  std::uint32_t image_side = 64;
  CameraIntrinsics camera;
  std::vector<std::size_t> planted;  // label per joint
  bool groups_planted = true;
  std::uint64_t seed = 0;

  friend bool operator==(const DatasetHeader&, const DatasetHeader&) = default;
};

struct Dataset {
  DatasetHeader header;
  std::vector<SyntheticSample> samples;
};

/// Deterministic in (count, seed, config).
Dataset generate_samples(std::size_t count, std::uint64_t seed, const SynthConfig& config);

/// Generates and writes atomically to `path`.
Dataset generate_dataset(std::size_t count, std::uint64_t seed, const std::filesystem::path& path,
                         const SynthConfig& config);

void write_dataset(const std::filesystem::path& path, const Dataset& dataset);

/// Streaming reader. The header is validated on open; every record is
/// validated as it is read, and failures name the record index.
class DatasetReader {
 public:
  explicit DatasetReader(const std::filesystem::path& path);

  const DatasetHeader& header() const { return header_; }
  /// Next sample, or nullopt after the last one.
  std::optional<SyntheticSample> next();

 private:
  std::string bytes_;
  std::size_t offset_ = 0;
  std::uint64_t index_ = 0;
  DatasetHeader header_;
  std::string context_;
};

/// Reads every sample; throws on the first bad record.
Dataset read_dataset(const std::filesystem::path& path);

}  // namespace grouppose
