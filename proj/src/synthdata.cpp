#include "grouppose/synthdata.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "grouppose/binary_io.hpp"
#include "grouppose/errors.hpp"

namespace grouppose {

namespace {

constexpr std::string_view kDatasetMagic = "GPDSET01";
constexpr double kDeg = std::numbers::pi / 180.0;

struct Finger {
  Vec3 base;                    // MCP position in the hand frame (mm), wrist at origin
  Vec3 direction;               // unit extension direction when flat
  Vec3 bend;                    // unit flexion direction, orthogonal to `direction`
  std::array<double, 3> bones;  // base->PIP, PIP->DIP, DIP->tip (mm)
  std::array<double, 3> flex;   // maximum flexion per joint at curl 1 (degrees)
  double metacarpal_flex;       // palm cupping at curl 1 (degrees); moves the MCP about the wrist
};

Vec3 normalized(Vec3 v) {
  const double n = std::sqrt(v[0] * v[0] + v[1] * v[1] + v[2] * v[2]);
  return {v[0] / n, v[1] / n, v[2] / n};
}

// Palm faces the camera (-z is toward the camera); fingers extend along -y.
const std::array<Finger, 5>& fingers() {
  static const std::array<Finger, 5> table{{
      {{-30, -25, 0}, normalized({-0.6, -0.8, 0}), {0.48, -0.36, -0.8}, {32, 28, 24}, {50, 60, 60}, 25},
      {{-24, -78, 0}, normalized({-0.08, -1, 0}), {0, 0, -1}, {40, 24, 20}, {80, 95, 65}, 20},
      // The middle MCP is the root joint and stays put.
      {{-6, -82, 0}, {0, -1, 0}, {0, 0, -1}, {44, 28, 22}, {80, 95, 65}, 0},
      {{11, -78, 0}, normalized({0.08, -1, 0}), {0, 0, -1}, {41, 27, 21}, {80, 95, 65}, 25},
      {{26, -68, 0}, normalized({0.18, -1, 0}), {0, 0, -1}, {32, 20, 18}, {80, 95, 65}, 30},
  }};
  return table;
}

// Flexion of the wrist at curl 1 of the thumb's group (degrees). Swings the
// wrist about the middle MCP so that every joint of group 0 follows its latent.
constexpr double kWristFlex = 35.0;

// Finger index (0 = thumb ... 4 = pinky) -> planted group.
constexpr std::array<std::size_t, 5> kFingerGroup{0, 1, 2, 2, 2};

// Hand-frame joint positions, wrist at the origin.
Pose3D local_kinematics(const PoseLatents& latents) {
  Pose3D joints(kHandJoints, Vec3{0, 0, 0});
  for (std::size_t f = 0; f < 5; ++f) {
    const auto& fg = fingers()[f];
    const std::size_t first = 1 + 4 * f;
    const double cup = latents.finger_curl[f] * fg.metacarpal_flex * kDeg;
    const double reach = std::sqrt(fg.base[0] * fg.base[0] + fg.base[1] * fg.base[1] + fg.base[2] * fg.base[2]);
    Vec3 p;
    for (int a = 0; a < 3; ++a) p[a] = std::cos(cup) * fg.base[a] + std::sin(cup) * reach * fg.bend[a];
    joints[first] = p;
    double angle = cup + latents.jitter_rad[first];  // MCP jitter shifts the whole chain
    for (std::size_t s = 0; s < 3; ++s) {
      angle += latents.finger_curl[f] * fg.flex[s] * kDeg;
      if (s > 0) angle += latents.jitter_rad[first + s];
      const double c = std::cos(angle);
      const double sn = std::sin(angle);
      for (int a = 0; a < 3; ++a) p[a] += fg.bones[s] * (c * fg.direction[a] + sn * fg.bend[a]);
      joints[first + 1 + s] = p;
    }
  }
  const auto& root = fingers()[2].base;
  const double flex = latents.finger_curl[0] * kWristFlex * kDeg;
  joints[0] = {-root[0], -root[1] * std::cos(flex), -root[1] * std::sin(flex)};
  for (int a = 0; a < 3; ++a) joints[0][a] += root[a];
  return joints;
}

Mat3 rotation_from_angles(double tilt_x, double tilt_y, double roll) {
  const double cx = std::cos(tilt_x), sx = std::sin(tilt_x);
  const double cy = std::cos(tilt_y), sy = std::sin(tilt_y);
  const double cz = std::cos(roll), sz = std::sin(roll);
  const Mat3 rx{{{1, 0, 0}, {0, cx, -sx}, {0, sx, cx}}};
  const Mat3 ry{{{cy, 0, sy}, {0, 1, 0}, {-sy, 0, cy}}};
  const Mat3 rz{{{cz, -sz, 0}, {sz, cz, 0}, {0, 0, 1}}};
  auto mul = [](const Mat3& a, const Mat3& b) {
    Mat3 out{};
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j) out[i][j] = a[i][0] * b[0][j] + a[i][1] * b[1][j] + a[i][2] * b[2][j];
    return out;
  };
  return mul(rz, mul(ry, rx));
}

Vec3 rotate(const Mat3& r, const Vec3& p) {
  return {r[0][0] * p[0] + r[0][1] * p[1] + r[0][2] * p[2], r[1][0] * p[0] + r[1][1] * p[1] + r[1][2] * p[2],
          r[2][0] * p[0] + r[2][1] * p[1] + r[2][2] * p[2]};
}

void write_header(io::ByteWriter& w, const DatasetHeader& h) {
  w.raw(kDatasetMagic);
  w.u32(h.version);
  w.u64(h.count);
  w.u32(h.joints);
  w.u32(h.image_side);
  w.f64(h.camera.fx);
  w.f64(h.camera.fy);
  w.f64(h.camera.px);
  w.f64(h.camera.py);
  for (std::size_t i = 0; i < h.joints; ++i) w.u8(static_cast<std::uint8_t>(h.planted.at(i)));
  w.u8(h.groups_planted ? 1 : 0);
  w.u64(h.seed);
}

void write_record(io::ByteWriter& w, const SyntheticSample& s) {
  w.f64(s.s0);
  w.f64(s.z_root);
  for (const auto& p : s.gt_3d)
    for (double x : p) w.f64(x);
  for (const auto& j : s.gt_2p5d) {
    w.f64(j.u);
    w.f64(j.v);
    w.f64(j.z_rel);
  }
  for (float x : s.image) w.f32(x);
}

std::size_t record_size(const DatasetHeader& h) {
  return 8 * 2 + 8 * 3 * h.joints * 2 + 4 * static_cast<std::size_t>(h.image_side) * h.image_side;
}

}  // namespace

std::string_view joint_name(std::size_t joint) {
  static constexpr std::array<std::string_view, kHandJoints> names{
      "wrist",     "thumb_mcp", "thumb_pip", "thumb_dip", "thumb_tip", "index_mcp", "index_pip",
      "index_dip", "index_tip", "middle_mcp", "middle_pip", "middle_dip", "middle_tip", "ring_mcp",
      "ring_pip",  "ring_dip",  "ring_tip",  "pinky_mcp", "pinky_pip", "pinky_dip", "pinky_tip"};
  return joint < names.size() ? names[joint] : "joint";
}

std::vector<std::size_t> planted_grouping() {
  std::vector<std::size_t> labels(kHandJoints, 0);
  for (std::size_t f = 0; f < 5; ++f)
    for (std::size_t j = 0; j < 4; ++j) labels[1 + 4 * f + j] = kFingerGroup[f];
  return labels;
}

void SynthConfig::validate() const {
  camera.validate();
  if (image_side < 8) throw ConfigError("synth config: image side must be >= 8");
  if (!(z_root_min > 0.0 && z_root_max >= z_root_min)) throw ConfigError("synth config: invalid root depth range");
  if (!(blob_sigma > 0.0)) throw ConfigError("synth config: blob sigma must be positive");
  if (jitter_deg < 0.0 || max_tilt_deg < 0.0 || max_roll_deg < 0.0 || offset_mm < 0.0) {
    throw ConfigError("synth config: ranges must be non-negative");
  }
  if (max_retries < 1) throw ConfigError("synth config: max_retries must be >= 1");
}

SynthConfig SynthConfig::for_image(std::size_t side) {
  SynthConfig c;
  c.image_side = side;
  c.camera = CameraIntrinsics::for_image(side);
  return c;
}

Pose3D hand_pose(const PoseLatents& latents) {
  const auto local = local_kinematics(latents);
  Pose3D out(local.size());
  for (std::size_t i = 0; i < local.size(); ++i) {
    const Vec3 rel{local[i][0] - local[kRootJoint][0], local[i][1] - local[kRootJoint][1],
                   local[i][2] - local[kRootJoint][2]};
    const auto r = rotate(latents.rotation, rel);
    out[i] = {r[0] + latents.root[0], r[1] + latents.root[1], r[2] + latents.root[2]};
  }
  return out;
}

Pose3D template_pose() {
  PoseLatents flat;
  flat.root = {0.0, 0.0, 0.0};
  return hand_pose(flat);
}

SampledPose sample_pose(Rng& rng, const SynthConfig& config) {
  config.validate();
  const double side = static_cast<double>(config.image_side);
  // Center of the flat hand relative to the root joint; placement aims it at the optical axis.
  const Vec3 center_offset{6.0, 12.0, 0.0};
  for (std::size_t attempt = 0; attempt < config.max_retries; ++attempt) {
    PoseLatents lat;
    std::array<double, kPlantedGroups> group_curl{};
    for (auto& c : group_curl) c = rng.uniform();
    for (std::size_t f = 0; f < 5; ++f) {
      lat.finger_curl[f] = config.groups_planted ? group_curl[kFingerGroup[f]] : rng.uniform();
    }
    for (auto& j : lat.jitter_rad) j = rng.normal(0.0, config.jitter_deg * kDeg);
    const double tx = rng.uniform(-1.0, 1.0) * config.max_tilt_deg * kDeg;
    const double ty = rng.uniform(-1.0, 1.0) * config.max_tilt_deg * kDeg;
    const double rz = rng.uniform(-1.0, 1.0) * config.max_roll_deg * kDeg;
    lat.rotation = rotation_from_angles(tx, ty, rz);
    const double z_root = rng.uniform(config.z_root_min, config.z_root_max);
    const auto c = rotate(lat.rotation, center_offset);
    lat.root = {-c[0] + rng.uniform(-1.0, 1.0) * config.offset_mm, -c[1] + rng.uniform(-1.0, 1.0) * config.offset_mm,
                z_root};

    auto pose = hand_pose(lat);
    bool inside = true;
    for (const auto& p : pose) {
      if (!(p[2] > 0.0)) {
        inside = false;
        break;
      }
      const double u = config.camera.fx * p[0] / p[2] + config.camera.px;
      const double v = config.camera.fy * p[1] / p[2] + config.camera.py;
      if (u < config.frame_margin || u > side - config.frame_margin || v < config.frame_margin ||
          v > side - config.frame_margin) {
        inside = false;
        break;
      }
    }
    if (!inside) continue;
    const double s0 = distance(pose[kRootJoint], pose[kScaleJoint]);
    return SampledPose{std::move(pose), s0, z_root, lat};
  }
  throw Error("sample_pose: no in-frame pose after " + std::to_string(config.max_retries) + " attempts");
}

std::vector<float> render_blobs(std::span<const std::array<double, 2>> joints_px, std::size_t side, double sigma) {
  const double limit = static_cast<double>(side);
  for (std::size_t i = 0; i < joints_px.size(); ++i) {
    const auto [u, v] = joints_px[i];
    if (!(u >= 0.0 && u < limit && v >= 0.0 && v < limit)) {
      throw ContractError("render_blobs: joint " + std::to_string(i) + " at (" + std::to_string(u) + ", " +
                          std::to_string(v) + ") lies outside the " + std::to_string(side) + "px frame");
    }
  }
  const double inv = 1.0 / (2.0 * sigma * sigma);
  const std::size_t n = joints_px.size();
  std::vector<double> amplitude(n);
  for (std::size_t i = 0; i < n; ++i) {
    amplitude[i] = n > 1 ? 0.5 + 0.5 * static_cast<double>(i) / static_cast<double>(n - 1) : 1.0;
  }
  std::vector<float> image(side * side);
  for (std::size_t r = 0; r < side; ++r) {
    const double py = static_cast<double>(r) + 0.5;
    for (std::size_t c = 0; c < side; ++c) {
      const double px = static_cast<double>(c) + 0.5;
      double total = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        const double du = px - joints_px[i][0];
        const double dv = py - joints_px[i][1];
        total += amplitude[i] * std::exp(-(du * du + dv * dv) * inv);
      }
      image[r * side + c] = static_cast<float>(std::clamp(total, 0.0, 1.0));
    }
  }
  return image;
}

Dataset generate_samples(std::size_t count, std::uint64_t seed, const SynthConfig& config) {
  if (count < 1) throw ConfigError("generate: sample count must be >= 1");
  config.validate();
  Dataset ds;
  ds.header.count = count;
  ds.header.image_side = static_cast<std::uint32_t>(config.image_side);
  ds.header.camera = config.camera;
  ds.header.planted = planted_grouping();
  ds.header.groups_planted = config.groups_planted;
  ds.header.seed = seed;
  ds.samples.reserve(count);
  Rng master(seed);
  for (std::size_t n = 0; n < count; ++n) {
    Rng rng = master.split();
    auto sampled = sample_pose(rng, config);
    SyntheticSample s;
    s.s0 = sampled.s0;
    s.z_root = sampled.z_root;
    s.gt_2p5d = project(sampled.pose, config.camera, s.s0, s.z_root);
    s.gt_3d = std::move(sampled.pose);
    std::vector<std::array<double, 2>> px;
    px.reserve(s.gt_2p5d.size());
    for (const auto& j : s.gt_2p5d) px.push_back({j.u, j.v});
    s.image = render_blobs(px, config.image_side, config.blob_sigma);
    ds.samples.push_back(std::move(s));
  }
  return ds;
}

void write_dataset(const std::filesystem::path& path, const Dataset& dataset) {
  io::ByteWriter w;
  DatasetHeader h = dataset.header;
  h.count = dataset.samples.size();
  write_header(w, h);
  for (const auto& s : dataset.samples) write_record(w, s);
  io::write_file_atomic(path, w.bytes());
}

Dataset generate_dataset(std::size_t count, std::uint64_t seed, const std::filesystem::path& path,
                         const SynthConfig& config) {
  auto ds = generate_samples(count, seed, config);
  write_dataset(path, ds);
  return ds;
}

DatasetReader::DatasetReader(const std::filesystem::path& path)
    : bytes_(io::read_file(path)), context_("dataset '" + path.string() + "'") {
  io::ByteReader r(bytes_, context_ + " header");
  if (r.raw(kDatasetMagic.size()) != kDatasetMagic) throw FormatError(context_ + ": bad magic, not a dataset file");
  header_.version = r.u32();
  if (header_.version != kDatasetVersion) {
    throw FormatError(context_ + ": unsupported format version " + std::to_string(header_.version));
  }
  header_.count = r.u64();
  header_.joints = r.u32();
  header_.image_side = r.u32();
  header_.camera = {r.f64(), r.f64(), r.f64(), r.f64()};
  if (header_.joints < 1 || header_.image_side < 1 || !(header_.camera.fx > 0.0 && header_.camera.fy > 0.0)) {
    throw FormatError(context_ + ": invalid header fields");
  }
  header_.planted.resize(header_.joints);
  for (auto& g : header_.planted) g = r.u8();
  header_.groups_planted = r.u8() != 0;
  header_.seed = r.u64();
  offset_ = r.offset();
}

std::optional<SyntheticSample> DatasetReader::next() {
  if (index_ >= header_.count) {
    if (offset_ != bytes_.size()) throw FormatError(context_ + ": trailing bytes after the last record");
    return std::nullopt;
  }
  const std::string where = context_ + " record " + std::to_string(index_);
  const std::size_t size = record_size(header_);
  if (bytes_.size() - offset_ < size) throw FormatError(where + ": truncated");
  io::ByteReader r(std::string_view(bytes_).substr(offset_, size), where);

  SyntheticSample s;
  s.s0 = r.f64();
  s.z_root = r.f64();
  s.gt_3d.resize(header_.joints);
  for (auto& p : s.gt_3d)
    for (auto& x : p) x = r.f64();
  s.gt_2p5d.resize(header_.joints);
  for (auto& j : s.gt_2p5d) j = {r.f64(), r.f64(), r.f64()};
  s.image.resize(static_cast<std::size_t>(header_.image_side) * header_.image_side);
  for (auto& x : s.image) {
    x = r.f32();
    if (!(x >= 0.0f && x <= 1.0f)) throw FormatError(where + ": image intensity outside [0, 1]");
  }

  if (!(s.s0 > 0.0)) throw FormatError(where + ": non-positive scale s0");
  Pose2p5D reprojected;
  try {
    reprojected = project(s.gt_3d, header_.camera, s.s0, s.z_root);
  } catch (const Error& e) {
    throw FormatError(where + ": " + e.what());
  }
  for (std::size_t i = 0; i < reprojected.size(); ++i) {
    const auto& a = reprojected[i];
    const auto& b = s.gt_2p5d[i];
    if (!(std::abs(a.u - b.u) <= 1e-9 && std::abs(a.v - b.v) <= 1e-9 && std::abs(a.z_rel - b.z_rel) <= 1e-9)) {
      throw FormatError(where + ": 2.5D ground truth inconsistent with 3D ground truth at joint " + std::to_string(i));
    }
  }
  offset_ += size;
  ++index_;
  return s;
}

Dataset read_dataset(const std::filesystem::path& path) {
  DatasetReader reader(path);
  Dataset ds;
  ds.header = reader.header();
  ds.samples.reserve(ds.header.count);
  while (auto s = reader.next()) ds.samples.push_back(std::move(*s));
  return ds;
}

}  // namespace grouppose
