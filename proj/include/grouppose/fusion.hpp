#pragma once

// Cross-group feature fusion: every destination group re-embeds the
// concatenation of all K group features through a learnable (K*C) x C map,
// followed by batch normalization.

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "grouppose/autodiff.hpp"

namespace grouppose {

enum class Mode { train, eval };

/// Batch normalization over C features with running statistics.
struct BatchNorm {
  static constexpr double kMomentum = 0.1;

  ad::Parameter gamma;
  ad::Parameter beta;
  std::vector<double> running_mean;
  std::vector<double> running_var;

  static BatchNorm identity(std::size_t channels, const std::string& name, ad::ParamGroup group);

  /// Train mode normalizes with batch statistics and updates the running
  /// ones; eval mode uses the running statistics.
  ad::Tensor forward(const ad::Tensor& x, Mode mode, ad::Tape* tape);
};

struct FusionLayer {
  std::size_t groups = 0;
  std::size_t channels = 0;
  std::size_t destination = 0;
  ad::Parameter weight;  // (K*C) x C
  BatchNorm bn;
};

/// Weight = vertical stack of alpha_i * I_C with alpha_k = 0.9 for the
/// destination group and 0.1 / (K - 1) for the others (alpha = 1 when K = 1).
/// `prefix` names the parameters ("<prefix>.k<destination>.weight", ...).
FusionLayer init_fusion_weights(std::size_t groups, std::size_t channels, std::size_t destination,
                                const std::string& prefix = "fusion");

/// batch_norm(concat(features) * weight). Every feature must be B x C.
ad::Tensor fuse(std::span<const ad::Tensor> features, FusionLayer& layer, Mode mode, ad::Tape* tape);

}  // namespace grouppose
