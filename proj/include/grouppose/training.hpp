#pragma once

// Balanced l1 pose loss, Adam with per-group learning rates, and the
// training loop.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include <nlohmann/json.hpp>

#include "grouppose/autodiff.hpp"
#include "grouppose/model.hpp"
#include "grouppose/selector.hpp"
#include "grouppose/synthdata.hpp"

namespace grouppose {

struct LearningRates {
  double selector = 1e-2;
  double fusion = 1e-3;
  double backbone = 1e-3;

  double for_group(ad::ParamGroup group) const;
};

struct TrainConfig {
  std::size_t steps = 2000;
  std::size_t batch = 32;
  double beta = 20.0;
  LearningRates lr;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  TemperatureSchedule schedule;
  std::uint64_t seed = 0;
  std::size_t trace_interval = 10;

  void validate() const;
};

void to_json(nlohmann::json& j, const TrainConfig& c);
/// Missing keys keep their defaults.
void from_json(const nlohmann::json& j, TrainConfig& c);

/// mean over the batch of sum_i |u - u_gt| + |v - v_gt| + beta |z_rel - z_gt|.
ad::Tensor pose_loss(const PoseBatch& pred, const PoseBatch& gt, double beta);

struct AdamState {
  std::vector<std::vector<double>> first_moment;
  std::vector<std::vector<double>> second_moment;
  std::uint64_t step = 0;

  static AdamState for_parameters(std::span<ad::Parameter* const> params);
};

/// One bias-corrected Adam update using each parameter's accumulated gradient
/// and the learning rate of its group.
void adam_step(std::span<ad::Parameter* const> params, AdamState& state, const TrainConfig& config);

/// Stacks sample images (B x side^2) and ground truth (B x N each).
ad::Tensor image_batch(std::span<const SyntheticSample* const> samples);
PoseBatch target_batch(std::span<const SyntheticSample* const> samples);

struct TracePoint {
  std::size_t step;
  double loss;
};

struct TrainResult {
  std::vector<TracePoint> trace;
  double final_loss = 0.0;
};

using TrainCallback = std::function<void(std::size_t step, double loss, double tau)>;

/// Minibatch training. Deterministic given config.seed. Throws NumericError
/// (naming the step) if the loss becomes non-finite.
TrainResult train(const ModelConfig& model_config, ModelParams& params, std::span<const SyntheticSample> data,
                  const TrainConfig& config, const TrainCallback& on_trace = {});

}  // namespace grouppose
