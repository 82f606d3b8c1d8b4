#include "grouppose/fusion.hpp"

#include <string>

#include "grouppose/errors.hpp"

namespace grouppose {

BatchNorm BatchNorm::identity(std::size_t channels, const std::string& name, ad::ParamGroup group) {
  return BatchNorm{ad::Parameter(name + ".gamma", group, ad::Tensor::full({channels}, 1.0)),
                   ad::Parameter(name + ".beta", group, ad::Tensor::zeros({channels})),
                   std::vector<double>(channels, 0.0),
                   // var + eps == 1, so the eval-mode transform starts as the exact identity.
                   std::vector<double>(channels, 1.0 - ad::kBatchNormEpsilon)};
}

ad::Tensor BatchNorm::forward(const ad::Tensor& x, Mode mode, ad::Tape* tape) {
  const auto g = gamma.bind(tape);
  const auto b = beta.bind(tape);
  if (mode == Mode::eval) return ad::batch_norm_eval(x, g, b, running_mean, running_var);

  auto result = ad::batch_norm_train(x, g, b);
  const double batch = static_cast<double>(x.dim(0));
  // Running variance tracks the unbiased estimate.
  const double correction = batch > 1.0 ? batch / (batch - 1.0) : 1.0;
  for (std::size_t j = 0; j < running_mean.size(); ++j) {
    running_mean[j] = (1.0 - kMomentum) * running_mean[j] + kMomentum * result.batch_mean[j];
    running_var[j] = (1.0 - kMomentum) * running_var[j] + kMomentum * result.batch_var[j] * correction;
  }
  return result.output;
}

FusionLayer init_fusion_weights(std::size_t groups, std::size_t channels, std::size_t destination,
                                const std::string& prefix) {
  if (groups < 1 || channels < 1 || destination >= groups) {
    throw ConfigError("fusion: invalid K=" + std::to_string(groups) + " C=" + std::to_string(channels) +
                      " destination=" + std::to_string(destination));
  }
  const double self = groups == 1 ? 1.0 : 0.9;
  const double other = groups == 1 ? 0.0 : (1.0 - self) / static_cast<double>(groups - 1);
  std::vector<double> w(groups * channels * channels, 0.0);
  for (std::size_t g = 0; g < groups; ++g) {
    const double alpha = g == destination ? self : other;
    for (std::size_t c = 0; c < channels; ++c) w[(g * channels + c) * channels + c] = alpha;
  }
  const std::string name = prefix + ".k" + std::to_string(destination);
  return FusionLayer{groups, channels, destination,
                     ad::Parameter(name + ".weight", ad::ParamGroup::fusion,
                                   ad::Tensor({groups * channels, channels}, std::move(w))),
                     BatchNorm::identity(channels, name + ".bn", ad::ParamGroup::fusion)};
}

ad::Tensor fuse(std::span<const ad::Tensor> features, FusionLayer& layer, Mode mode, ad::Tape* tape) {
  if (features.size() != layer.groups) {
    throw ShapeError("fuse: expected " + std::to_string(layer.groups) + " group features, got " +
                     std::to_string(features.size()));
  }
  for (std::size_t g = 0; g < features.size(); ++g) {
    if (features[g].rank() != 2 || features[g].dim(1) != layer.channels ||
        features[g].shape() != features[0].shape()) {
      throw ShapeError("fuse: group " + std::to_string(g) + " feature has shape " +
                       ad::shape_string(features[g].shape()) + ", expected B x " + std::to_string(layer.channels) +
                       " matching group 0 " + ad::shape_string(features[0].shape()));
    }
  }
  const auto stacked = features.size() == 1 ? features[0] : ad::concat(features);
  const auto mixed = ad::matmul(stacked, layer.weight.bind(tape));
  return layer.bn.forward(mixed, mode, tape);
}

}  // namespace grouppose
