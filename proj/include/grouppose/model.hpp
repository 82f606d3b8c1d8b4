#pragma once

// Grouped pose network:
//   shared extractor -> K branches (fused across groups after each block)
//   -> per-branch heatmap/depth heads -> soft-argmax decoding
//   -> selector-weighted combination of the branch predictions.

#include <cstddef>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "grouppose/autodiff.hpp"
#include "grouppose/fusion.hpp"
#include "grouppose/geometry.hpp"
#include "grouppose/rng.hpp"
#include "grouppose/selector.hpp"

namespace grouppose {

struct ModelConfig {
  std::size_t joints = 21;
  std::size_t groups = 3;
  std::size_t image_side = 64;
  std::vector<std::size_t> shared_widths{512, 256};
  std::vector<std::size_t> branch_widths{256, 256};
  /// Fusion is applied after each of the first `fusion_points` branch blocks.
  std::size_t fusion_points = 2;
  std::size_t grid = 16;

  void validate() const;
  std::size_t cells() const { return grid * grid; }
  std::size_t input_size() const { return image_side * image_side; }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

void to_json(nlohmann::json& j, const ModelConfig& c);
void from_json(const nlohmann::json& j, ModelConfig& c);

/// Fully connected layer y = x W + b.
struct Linear {
  ad::Parameter weight;  // in x out
  ad::Parameter bias;    // out

  ad::Tensor forward(const ad::Tensor& x, ad::Tape* tape);
};

struct Branch {
  std::vector<Linear> blocks;
  Linear heatmap_head;
  Linear depth_head;
};

struct ModelParams {
  std::vector<Linear> shared;
  std::vector<Branch> branches;                  // K
  std::vector<std::vector<FusionLayer>> fusion;  // [fusion point][destination group]
  SelectorLogits selector;

  /// Every trainable parameter in a fixed order.
  std::vector<ad::Parameter*> parameters();
  std::vector<const ad::Parameter*> parameters() const;

  /// Non-trainable state (batch-norm running statistics) in a fixed order.
  struct Buffer {
    std::string name;
    std::vector<double>* values;
  };
  std::vector<Buffer> buffers();
};

/// He-normal weights, zero biases, selector logits at 1/K, fusion at its
/// weighted-sum initialization.
ModelParams init_model(const ModelConfig& config, Rng& rng);

/// Decoded joints for a batch: each tensor is B x N.
struct PoseBatch {
  ad::Tensor u;
  ad::Tensor v;
  ad::Tensor z_rel;

  std::size_t batch() const { return u.dim(0); }
  std::size_t joints() const { return u.dim(1); }
  Pose2p5D sample(std::size_t b) const;
};

ad::Tensor shared_extract(const ad::Tensor& images, ModelParams& params, ad::Tape* tape);

/// K feature batches after the branch blocks and fusion.
std::vector<ad::Tensor> branches_forward(const ad::Tensor& shared, ModelParams& params, std::size_t fusion_points,
                                         Mode mode, ad::Tape* tape);

/// Soft-argmax over each joint's G x G heatmap. `heatmaps` and `depths` are
/// B x (N*G*G) (or B x N x G*G). One softmax per joint weighs both the cell
/// centers (c + 0.5) * side / G and the depth map.
PoseBatch decode_soft_argmax(const ad::Tensor& heatmaps, const ad::Tensor& depths, std::size_t joints,
                             std::size_t grid, std::size_t image_side);

/// Joint i = sum_k selector(i, k) * branch_k joint i, for u, v and z_rel.
/// `selector` is N x K (relaxed or one-hot).
PoseBatch combine_groups(std::span<const PoseBatch> branch_poses, const ad::Tensor& selector);

/// Per-branch heatmap and depth logits (each B x N*G*G).
struct BranchOutput {
  ad::Tensor heatmaps;
  ad::Tensor depths;
};

struct ForwardResult {
  PoseBatch pose;
  std::vector<PoseBatch> branch_poses;
  ad::Tensor selector;  // the N x K matrix that was applied
};

struct ForwardOptions {
  Mode mode = Mode::eval;
  double tau = 1.0;             // train mode only
  Rng* rng = nullptr;           // train mode only: Gumbel noise source
  const ad::Tensor* noise = nullptr;  // train mode: explicit noise overrides rng
};

/// Full forward pass. Train mode samples the relaxed selector at `tau` with
/// fresh Gumbel noise and uses batch statistics; eval mode hardens the
/// selector and uses running statistics.
ForwardResult model_forward(const ad::Tensor& images, const ModelConfig& config, ModelParams& params,
                            const ForwardOptions& options, ad::Tape* tape);

// ---- checkpoints ------------------------------------------------------------

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  ModelConfig config;
  ModelParams params;
};

/// Writes atomically (temp file + rename).
void save_checkpoint(const std::filesystem::path& path, const ModelConfig& config, const ModelParams& params);

/// Reads and validates a checkpoint. When `expected` is given, a differing
/// configuration is rejected with ConfigError.
Checkpoint load_checkpoint(const std::filesystem::path& path, const ModelConfig* expected = nullptr);

}  // namespace grouppose
