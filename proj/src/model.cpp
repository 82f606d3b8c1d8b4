#include "grouppose/model.hpp"

#include <cmath>
#include <string>

#include "grouppose/binary_io.hpp"
#include "grouppose/errors.hpp"

namespace grouppose {

namespace {

constexpr std::string_view kCheckpointMagic = "GPCKPT01";

Linear make_linear(const std::string& name, std::size_t in, std::size_t out, double stddev, Rng& rng,
                   ad::ParamGroup group = ad::ParamGroup::backbone) {
  std::vector<double> w(in * out);
  for (auto& x : w) x = rng.normal(0.0, stddev);
  return Linear{ad::Parameter(name + ".weight", group, ad::Tensor({in, out}, std::move(w))),
                ad::Parameter(name + ".bias", group, ad::Tensor::zeros({out}))};
}

double he_std(std::size_t fan_in) { return std::sqrt(2.0 / static_cast<double>(fan_in)); }

ad::Tensor weighted_cells(const ad::Tensor& probs, const ad::Tensor& per_cell) {
  return ad::sum_last(ad::multiply(probs, ad::broadcast_to(per_cell, probs.shape())));
}

ad::Tensor combine_channel(std::span<const PoseBatch> poses, ad::Tensor PoseBatch::*field, const ad::Tensor& weights) {
  const auto& first = poses[0].*field;
  const ad::Shape column{first.dim(0), first.dim(1), 1};
  std::vector<ad::Tensor> columns;
  columns.reserve(poses.size());
  for (const auto& p : poses) columns.push_back(ad::reshape(p.*field, column));
  const auto stacked = columns.size() == 1 ? columns[0] : ad::concat(columns);
  return ad::sum_last(ad::multiply(stacked, weights));
}

}  // namespace

void ModelConfig::validate() const {
  auto fail = [](const std::string& what) { throw ConfigError("model config: " + what); };
  if (joints < 1) fail("joints must be >= 1");
  if (groups < 1) fail("groups must be >= 1");
  if (grid < 2) fail("grid must be >= 2");
  if (image_side < 1) fail("image side must be >= 1");
  if (shared_widths.empty() || branch_widths.empty()) fail("shared and branch widths must be non-empty");
  for (auto w : shared_widths)
    if (w < 1) fail("widths must be >= 1");
  for (auto w : branch_widths)
    if (w < 1) fail("widths must be >= 1");
  if (fusion_points > branch_widths.size()) fail("fusion_points exceeds the number of branch blocks");
}

void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = nlohmann::json{{"joints", c.joints},
                     {"groups", c.groups},
                     {"image_side", c.image_side},
                     {"shared_widths", c.shared_widths},
                     {"branch_widths", c.branch_widths},
                     {"fusion_points", c.fusion_points},
                     {"grid", c.grid}};
}

void from_json(const nlohmann::json& j, ModelConfig& c) {
  const ModelConfig defaults;
  c.joints = j.value("joints", defaults.joints);
  c.groups = j.value("groups", defaults.groups);
  c.image_side = j.value("image_side", defaults.image_side);
  c.shared_widths = j.value("shared_widths", defaults.shared_widths);
  c.branch_widths = j.value("branch_widths", defaults.branch_widths);
  c.fusion_points = j.value("fusion_points", std::min(defaults.fusion_points, c.branch_widths.size()));
  c.grid = j.value("grid", defaults.grid);
}

ad::Tensor Linear::forward(const ad::Tensor& x, ad::Tape* tape) {
  const auto w = weight.bind(tape);
  const auto b = bias.bind(tape);
  const auto y = ad::matmul(x, w);
  return ad::add(y, ad::broadcast_to(b, y.shape()));
}

std::vector<ad::Parameter*> ModelParams::parameters() {
  std::vector<ad::Parameter*> out;
  for (auto& l : shared) {
    out.push_back(&l.weight);
    out.push_back(&l.bias);
  }
  for (auto& br : branches) {
    for (auto& l : br.blocks) {
      out.push_back(&l.weight);
      out.push_back(&l.bias);
    }
    for (auto* l : {&br.heatmap_head, &br.depth_head}) {
      out.push_back(&l->weight);
      out.push_back(&l->bias);
    }
  }
  for (auto& point : fusion)
    for (auto& f : point) {
      out.push_back(&f.weight);
      out.push_back(&f.bn.gamma);
      out.push_back(&f.bn.beta);
    }
  out.push_back(&selector.theta);
  return out;
}

std::vector<const ad::Parameter*> ModelParams::parameters() const {
  auto mut = const_cast<ModelParams*>(this)->parameters();
  return {mut.begin(), mut.end()};
}

std::vector<ModelParams::Buffer> ModelParams::buffers() {
  std::vector<Buffer> out;
  for (auto& point : fusion)
    for (auto& f : point) {
      const auto prefix = f.weight.name().substr(0, f.weight.name().size() - std::string(".weight").size());
      out.push_back({prefix + ".bn.running_mean", &f.bn.running_mean});
      out.push_back({prefix + ".bn.running_var", &f.bn.running_var});
    }
  return out;
}

ModelParams init_model(const ModelConfig& config, Rng& rng) {
  config.validate();
  ModelParams params;
  std::size_t width = config.input_size();
  for (std::size_t l = 0; l < config.shared_widths.size(); ++l) {
    params.shared.push_back(
        make_linear("shared." + std::to_string(l), width, config.shared_widths[l], he_std(width), rng));
    width = config.shared_widths[l];
  }
  const std::size_t shared_width = width;
  const std::size_t head_out = config.joints * config.cells();
  for (std::size_t k = 0; k < config.groups; ++k) {
    Branch br;
    const std::string prefix = "branch." + std::to_string(k);
    std::size_t in = shared_width;
    for (std::size_t b = 0; b < config.branch_widths.size(); ++b) {
      br.blocks.push_back(make_linear(prefix + ".block." + std::to_string(b), in, config.branch_widths[b],
                                      he_std(in), rng));
      in = config.branch_widths[b];
    }
    const double head_std = 1.0 / std::sqrt(static_cast<double>(in));
    br.heatmap_head = make_linear(prefix + ".heatmap", in, head_out, head_std, rng);
    br.depth_head = make_linear(prefix + ".depth", in, head_out, head_std, rng);
    params.branches.push_back(std::move(br));
  }
  for (std::size_t p = 0; p < config.fusion_points; ++p) {
    std::vector<FusionLayer> layers;
    for (std::size_t k = 0; k < config.groups; ++k) {
      layers.push_back(init_fusion_weights(config.groups, config.branch_widths[p], k, "fusion.p" + std::to_string(p)));
    }
    params.fusion.push_back(std::move(layers));
  }
  params.selector = init_logits(config.joints, config.groups);
  return params;
}

Pose2p5D PoseBatch::sample(std::size_t b) const {
  Pose2p5D pose(joints());
  for (std::size_t i = 0; i < pose.size(); ++i) pose[i] = {u.at(b, i), v.at(b, i), z_rel.at(b, i)};
  return pose;
}

ad::Tensor shared_extract(const ad::Tensor& images, ModelParams& params, ad::Tape* tape) {
  if (params.shared.empty()) throw ConfigError("shared_extract: no shared layers");
  const std::size_t expected = params.shared.front().weight.shape()[0];
  if (images.rank() != 2 || images.dim(1) != expected) {
    throw ShapeError("shared_extract: images must be B x " + std::to_string(expected) + ", got " +
                     ad::shape_string(images.shape()));
  }
  ad::Tensor h = images;
  for (auto& layer : params.shared) h = ad::relu(layer.forward(h, tape));
  return h;
}

std::vector<ad::Tensor> branches_forward(const ad::Tensor& shared, ModelParams& params, std::size_t fusion_points,
                                         Mode mode, ad::Tape* tape) {
  const std::size_t groups = params.branches.size();
  std::vector<ad::Tensor> features(groups, shared);
  const std::size_t blocks = params.branches.front().blocks.size();
  for (std::size_t b = 0; b < blocks; ++b) {
    for (std::size_t k = 0; k < groups; ++k) {
      features[k] = ad::relu(params.branches[k].blocks[b].forward(features[k], tape));
    }
    if (b < fusion_points) {
      std::vector<ad::Tensor> fused(groups);
      for (std::size_t k = 0; k < groups; ++k) fused[k] = fuse(features, params.fusion[b][k], mode, tape);
      features = std::move(fused);
    }
  }
  return features;
}

PoseBatch decode_soft_argmax(const ad::Tensor& heatmaps, const ad::Tensor& depths, std::size_t joints,
                             std::size_t grid, std::size_t image_side) {
  const std::size_t cells = grid * grid;
  if (heatmaps.rank() < 1 || heatmaps.size() % (joints * cells) != 0) {
    throw ShapeError("decode_soft_argmax: heatmap shape " + ad::shape_string(heatmaps.shape()) +
                     " is not a batch of " + std::to_string(joints) + " x " + std::to_string(grid) + " x " +
                     std::to_string(grid) + " maps");
  }
  if (depths.shape() != heatmaps.shape()) {
    throw ShapeError("decode_soft_argmax: depth shape " + ad::shape_string(depths.shape()) +
                     " differs from heatmap shape " + ad::shape_string(heatmaps.shape()));
  }
  const std::size_t batch = heatmaps.size() / (joints * cells);
  const ad::Shape per_joint{batch, joints, cells};

  const double cell = static_cast<double>(image_side) / static_cast<double>(grid);
  std::vector<double> cu(cells), cv(cells);
  for (std::size_t r = 0; r < grid; ++r)
    for (std::size_t c = 0; c < grid; ++c) {
      cu[r * grid + c] = (static_cast<double>(c) + 0.5) * cell;
      cv[r * grid + c] = (static_cast<double>(r) + 0.5) * cell;
    }

  const auto probs = ad::softmax(ad::reshape(heatmaps, per_joint));
  return PoseBatch{weighted_cells(probs, ad::Tensor({cells}, std::move(cu))),
                   weighted_cells(probs, ad::Tensor({cells}, std::move(cv))),
                   ad::sum_last(ad::multiply(probs, ad::reshape(depths, per_joint)))};
}

PoseBatch combine_groups(std::span<const PoseBatch> branch_poses, const ad::Tensor& selector) {
  if (branch_poses.empty()) throw ShapeError("combine_groups: no branch predictions");
  const std::size_t groups = branch_poses.size();
  const auto& shape = branch_poses[0].u.shape();
  if (shape.size() != 2) throw ShapeError("combine_groups: branch poses must be B x N");
  for (std::size_t k = 0; k < groups; ++k) {
    const auto& p = branch_poses[k];
    if (p.u.shape() != shape || p.v.shape() != shape || p.z_rel.shape() != shape) {
      throw ShapeError("combine_groups: branch " + std::to_string(k) + " has inconsistent shape");
    }
  }
  if (selector.shape() != ad::Shape{shape[1], groups}) {
    throw ShapeError("combine_groups: selector must be " + ad::shape_string({shape[1], groups}) + ", got " +
                     ad::shape_string(selector.shape()));
  }
  const auto weights = ad::broadcast_to(selector, {shape[0], shape[1], groups});
  return PoseBatch{combine_channel(branch_poses, &PoseBatch::u, weights),
                   combine_channel(branch_poses, &PoseBatch::v, weights),
                   combine_channel(branch_poses, &PoseBatch::z_rel, weights)};
}

ForwardResult model_forward(const ad::Tensor& images, const ModelConfig& config, ModelParams& params,
                            const ForwardOptions& options, ad::Tape* tape) {
  const auto shared = shared_extract(images, params, tape);
  const auto features = branches_forward(shared, params, config.fusion_points, options.mode, tape);

  ForwardResult result;
  result.branch_poses.reserve(features.size());
  for (std::size_t k = 0; k < features.size(); ++k) {
    auto& br = params.branches[k];
    result.branch_poses.push_back(decode_soft_argmax(br.heatmap_head.forward(features[k], tape),
                                                     br.depth_head.forward(features[k], tape), config.joints,
                                                     config.grid, config.image_side));
  }

  if (options.mode == Mode::train) {
    ad::Tensor noise;
    if (options.noise != nullptr) {
      noise = *options.noise;
    } else if (options.rng != nullptr) {
      noise = sample_gumbel(*options.rng, config.joints, config.groups);
    } else {
      throw ContractError("model_forward: train mode needs a random stream or explicit noise");
    }
    result.selector = sample_relaxed(params.selector.theta.bind(tape), options.tau, noise);
  } else {
    result.selector = harden(params.selector).matrix();
  }
  result.pose = combine_groups(result.branch_poses, result.selector);
  return result;
}

// ---- checkpoints ------------------------------------------------------------

void save_checkpoint(const std::filesystem::path& path, const ModelConfig& config, const ModelParams& params) {
  io::ByteWriter w;
  w.raw(kCheckpointMagic);
  w.u32(kCheckpointVersion);
  w.str(nlohmann::json(config).dump());
  const auto list = params.parameters();
  w.u32(static_cast<std::uint32_t>(list.size()));
  for (const auto* p : list) {
    w.str(p->name());
    w.str(ad::to_string(p->group()));
    w.u32(static_cast<std::uint32_t>(p->shape().size()));
    for (auto d : p->shape()) w.u64(d);
    for (double x : p->value().data()) w.f64(x);
  }
  auto buffers = const_cast<ModelParams&>(params).buffers();
  w.u32(static_cast<std::uint32_t>(buffers.size()));
  for (const auto& b : buffers) {
    w.str(b.name);
    w.u64(b.values->size());
    for (double x : *b.values) w.f64(x);
  }
  io::write_file_atomic(path, w.bytes());
}

Checkpoint load_checkpoint(const std::filesystem::path& path, const ModelConfig* expected) {
  const std::string bytes = io::read_file(path);
  io::ByteReader r(bytes, "checkpoint '" + path.string() + "'");
  if (r.raw(kCheckpointMagic.size()) != kCheckpointMagic) throw FormatError("checkpoint: bad magic, not a checkpoint file");
  const auto version = r.u32();
  if (version != kCheckpointVersion) {
    throw FormatError("checkpoint: unsupported version " + std::to_string(version) + " (expected " +
                      std::to_string(kCheckpointVersion) + ")");
  }
  Checkpoint ck;
  try {
    ck.config = nlohmann::json::parse(r.str()).get<ModelConfig>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("checkpoint: malformed config: ") + e.what());
  }
  ck.config.validate();
  if (expected != nullptr && !(*expected == ck.config)) {
    throw ConfigError("checkpoint: configuration mismatch (checkpoint " + nlohmann::json(ck.config).dump() +
                      ", run " + nlohmann::json(*expected).dump() + ")");
  }

  Rng rng(0);
  ck.params = init_model(ck.config, rng);
  auto list = ck.params.parameters();
  const auto count = r.u32();
  if (count != list.size()) {
    throw FormatError("checkpoint: holds " + std::to_string(count) + " parameters, configuration needs " +
                      std::to_string(list.size()));
  }
  for (auto* p : list) {
    const auto name = r.str();
    const auto group = r.str();
    if (name != p->name() || group != ad::to_string(p->group())) {
      throw FormatError("checkpoint: expected parameter '" + p->name() + "', found '" + name + "'");
    }
    ad::Shape shape(r.u32());
    for (auto& d : shape) d = r.u64();
    if (shape != p->shape()) {
      throw FormatError("checkpoint: parameter '" + name + "' has shape " + ad::shape_string(shape) + ", expected " +
                        ad::shape_string(p->shape()));
    }
    std::vector<double> data(ad::shape_size(shape));
    for (auto& x : data) x = r.f64();
    p->set_value(std::move(data));
  }
  auto buffers = ck.params.buffers();
  if (r.u32() != buffers.size()) throw FormatError("checkpoint: buffer count mismatch");
  for (auto& b : buffers) {
    const auto name = r.str();
    if (name != b.name) throw FormatError("checkpoint: expected buffer '" + b.name + "', found '" + name + "'");
    if (r.u64() != b.values->size()) throw FormatError("checkpoint: buffer '" + name + "' has the wrong length");
    for (auto& x : *b.values) x = r.f64();
  }
  if (!r.done()) throw FormatError("checkpoint: trailing bytes after the last record");
  return ck;
}

}  // namespace grouppose
