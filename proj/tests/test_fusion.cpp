#include <cmath>
#include <vector>

#include <gtest/gtest.h>

#include "grouppose/errors.hpp"
#include "grouppose/fusion.hpp"
#include "grouppose/rng.hpp"

using namespace grouppose;

namespace {

ad::Tensor random_features(Rng& rng, std::size_t b, std::size_t c) {
  std::vector<double> data(b * c);
  for (auto& x : data) x = rng.normal(0.0, 3.0);
  return ad::Tensor({b, c}, std::move(data));
}

// Scale of block g (rows g*C .. g*C+C-1) if it is alpha * I, else NaN.
double block_scale(const FusionLayer& layer, std::size_t g) {
  const auto& w = layer.weight.value();
  const std::size_t c = layer.channels;
  const double alpha = w.at(g * c, 0);
  for (std::size_t r = 0; r < c; ++r)
    for (std::size_t col = 0; col < c; ++col) {
      const double expected = r == col ? alpha : 0.0;
      if (w.at(g * c + r, col) != expected) return std::nan("");
    }
  return alpha;
}

}  // namespace

TEST(InitFusionWeights, ThreeGroups) {
  const auto layer = init_fusion_weights(3, 4, 1);
  EXPECT_EQ(layer.weight.shape(), (ad::Shape{12, 4}));
  EXPECT_DOUBLE_EQ(block_scale(layer, 0), 0.05);
  EXPECT_DOUBLE_EQ(block_scale(layer, 1), 0.9);
  EXPECT_DOUBLE_EQ(block_scale(layer, 2), 0.05);
  EXPECT_EQ(layer.weight.group(), ad::ParamGroup::fusion);
}

TEST(InitFusionWeights, TwoGroupsAndDegenerateSingleGroup) {
  const auto two = init_fusion_weights(2, 3, 0);
  EXPECT_DOUBLE_EQ(block_scale(two, 0), 0.9);
  EXPECT_NEAR(block_scale(two, 1), 0.1, 1e-16);
  const auto one = init_fusion_weights(1, 5, 0);
  EXPECT_DOUBLE_EQ(block_scale(one, 0), 1.0);
}

TEST(InitFusionWeights, AlphasSumToOne) {
  for (std::size_t k = 1; k <= 6; ++k) {
    for (std::size_t d = 0; d < k; ++d) {
      const auto layer = init_fusion_weights(k, 2, d);
      double total = 0.0;
      for (std::size_t g = 0; g < k; ++g) total += block_scale(layer, g);
      EXPECT_NEAR(total, 1.0, 1e-15);
    }
  }
}

TEST(InitFusionWeights, BatchNormStartsAsIdentity) {
  const auto layer = init_fusion_weights(3, 4, 2);
  for (double g : layer.bn.gamma.value().data()) EXPECT_EQ(g, 1.0);
  for (double b : layer.bn.beta.value().data()) EXPECT_EQ(b, 0.0);
  for (double m : layer.bn.running_mean) EXPECT_EQ(m, 0.0);
  for (double v : layer.bn.running_var) EXPECT_EQ(v + ad::kBatchNormEpsilon, 1.0);
}

TEST(InitFusionWeights, InvalidArguments) {
  EXPECT_THROW(init_fusion_weights(0, 4, 0), ConfigError);
  EXPECT_THROW(init_fusion_weights(3, 0, 0), ConfigError);
  EXPECT_THROW(init_fusion_weights(3, 4, 3), ConfigError);
}

TEST(Fuse, EvalModeAtInitIsTheWeightedSum) {
  Rng rng(3);
  for (std::size_t k : {2u, 3u, 5u}) {
    std::vector<ad::Tensor> features;
    for (std::size_t g = 0; g < k; ++g) features.push_back(random_features(rng, 6, 7));
    for (std::size_t dest = 0; dest < k; ++dest) {
      auto layer = init_fusion_weights(k, 7, dest);
      const auto out = fuse(features, layer, Mode::eval, nullptr);
      const double other = 0.1 / static_cast<double>(k - 1);
      for (std::size_t i = 0; i < out.size(); ++i) {
        double expected = 0.0;
        for (std::size_t g = 0; g < k; ++g) expected += (g == dest ? 0.9 : other) * features[g][i];
        EXPECT_NEAR(out[i], expected, 1e-12);
      }
    }
  }
}

TEST(Fuse, IdenticalFeaturesPassThrough) {
  Rng rng(5);
  const auto f = random_features(rng, 4, 3);
  for (std::size_t k : {1u, 2u, 4u}) {
    auto layer = init_fusion_weights(k, 3, 0);
    const std::vector<ad::Tensor> features(k, f);
    const auto out = fuse(features, layer, Mode::eval, nullptr);
    for (std::size_t i = 0; i < out.size(); ++i) EXPECT_NEAR(out[i], f[i], 1e-12);
  }
}

TEST(Fuse, OutputShapeMatchesInputs) {
  Rng rng(7);
  for (std::size_t k = 1; k <= 4; ++k)
    for (std::size_t c = 1; c <= 5; c += 2) {
      for (std::size_t b : {1u, 2u, 9u}) {
        std::vector<ad::Tensor> features;
        for (std::size_t g = 0; g < k; ++g) features.push_back(random_features(rng, b, c));
        auto layer = init_fusion_weights(k, c, k - 1);
        EXPECT_EQ(fuse(features, layer, Mode::eval, nullptr).shape(), (ad::Shape{b, c}));
        if (b > 1) {
          EXPECT_EQ(fuse(features, layer, Mode::train, nullptr).shape(), (ad::Shape{b, c}));
        }
      }
    }
}

TEST(Fuse, MismatchedFeatureNamesTheGroup) {
  Rng rng(9);
  auto layer = init_fusion_weights(3, 4, 0);
  const std::vector<ad::Tensor> features{random_features(rng, 2, 4), random_features(rng, 2, 4),
                                         random_features(rng, 2, 5)};
  try {
    fuse(features, layer, Mode::eval, nullptr);
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    EXPECT_NE(std::string(e.what()).find("group 2"), std::string::npos) << e.what();
  }
  const std::vector<ad::Tensor> too_few{random_features(rng, 2, 4)};
  EXPECT_THROW(fuse(too_few, layer, Mode::eval, nullptr), ShapeError);
}

TEST(BatchNorm, TrainModeUpdatesRunningStatistics) {
  auto bn = BatchNorm::identity(1, "bn", ad::ParamGroup::fusion);
  const ad::Tensor x({4, 1}, {1.0, 2.0, 3.0, 6.0});  // mean 3, unbiased var 14/3
  bn.forward(x, Mode::train, nullptr);
  EXPECT_NEAR(bn.running_mean[0], 0.1 * 3.0, 1e-15);
  EXPECT_NEAR(bn.running_var[0], 0.9 * (1.0 - ad::kBatchNormEpsilon) + 0.1 * 14.0 / 3.0, 1e-15);
  const auto before = bn.running_mean;
  bn.forward(x, Mode::eval, nullptr);
  EXPECT_EQ(bn.running_mean, before);
}
