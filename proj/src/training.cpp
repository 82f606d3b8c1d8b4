#include "grouppose/training.hpp"

#include <cmath>
#include <numeric>
#include <string>

#include "grouppose/errors.hpp"

namespace grouppose {

double LearningRates::for_group(ad::ParamGroup group) const {
  switch (group) {
    case ad::ParamGroup::selector: return selector;
    case ad::ParamGroup::fusion: return fusion;
    case ad::ParamGroup::backbone: return backbone;
  }
  return backbone;
}

void TrainConfig::validate() const {
  if (steps < 1) throw ConfigError("train config: steps must be >= 1");
  if (batch < 1) throw ConfigError("train config: batch must be >= 1");
  if (!(beta > 0.0)) throw ConfigError("train config: beta must be positive");
  if (lr.selector < 0.0 || lr.fusion < 0.0 || lr.backbone < 0.0) {
    throw ConfigError("train config: learning rates must be non-negative");
  }
  if (!(adam_beta1 >= 0.0 && adam_beta1 < 1.0 && adam_beta2 >= 0.0 && adam_beta2 < 1.0 && adam_eps > 0.0)) {
    throw ConfigError("train config: invalid Adam hyperparameters");
  }
  if (trace_interval < 1) throw ConfigError("train config: trace_interval must be >= 1");
  schedule.validate();
}

void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = nlohmann::json{{"steps", c.steps},
                     {"batch", c.batch},
                     {"beta", c.beta},
                     {"lr_selector", c.lr.selector},
                     {"lr_fusion", c.lr.fusion},
                     {"lr_backbone", c.lr.backbone},
                     {"adam_beta1", c.adam_beta1},
                     {"adam_beta2", c.adam_beta2},
                     {"adam_eps", c.adam_eps},
                     {"tau_init", c.schedule.tau_init},
                     {"tau_decrement", c.schedule.decrement},
                     {"tau_interval", c.schedule.interval},
                     {"tau_min", c.schedule.tau_min},
                     {"seed", c.seed},
                     {"trace_interval", c.trace_interval}};
}

void from_json(const nlohmann::json& j, TrainConfig& c) {
  const TrainConfig d;
  c.steps = j.value("steps", d.steps);
  c.batch = j.value("batch", d.batch);
  c.beta = j.value("beta", d.beta);
  c.lr.selector = j.value("lr_selector", d.lr.selector);
  c.lr.fusion = j.value("lr_fusion", d.lr.fusion);
  c.lr.backbone = j.value("lr_backbone", d.lr.backbone);
  c.adam_beta1 = j.value("adam_beta1", d.adam_beta1);
  c.adam_beta2 = j.value("adam_beta2", d.adam_beta2);
  c.adam_eps = j.value("adam_eps", d.adam_eps);
  c.schedule.tau_init = j.value("tau_init", d.schedule.tau_init);
  c.schedule.decrement = j.value("tau_decrement", d.schedule.decrement);
  c.schedule.interval = j.value("tau_interval", d.schedule.interval);
  c.schedule.tau_min = j.value("tau_min", d.schedule.tau_min);
  c.seed = j.value("seed", d.seed);
  c.trace_interval = j.value("trace_interval", d.trace_interval);
}

ad::Tensor pose_loss(const PoseBatch& pred, const PoseBatch& gt, double beta) {
  if (pred.u.shape() != gt.u.shape() || pred.v.shape() != gt.v.shape() || pred.z_rel.shape() != gt.z_rel.shape()) {
    throw ShapeError("pose_loss: prediction " + ad::shape_string(pred.u.shape()) + " vs target " +
                     ad::shape_string(gt.u.shape()));
  }
  const auto xy = ad::add(ad::sum(ad::abs(ad::subtract(pred.u, gt.u))), ad::sum(ad::abs(ad::subtract(pred.v, gt.v))));
  const auto z = ad::scale(ad::sum(ad::abs(ad::subtract(pred.z_rel, gt.z_rel))), beta);
  return ad::scale(ad::add(xy, z), 1.0 / static_cast<double>(pred.u.dim(0)));
}

AdamState AdamState::for_parameters(std::span<ad::Parameter* const> params) {
  AdamState s;
  for (const auto* p : params) {
    s.first_moment.emplace_back(p->value().size(), 0.0);
    s.second_moment.emplace_back(p->value().size(), 0.0);
  }
  return s;
}

void adam_step(std::span<ad::Parameter* const> params, AdamState& state, const TrainConfig& config) {
  if (state.first_moment.size() != params.size()) throw ShapeError("adam_step: state does not match parameters");
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(config.adam_beta1, t);
  const double c2 = 1.0 - std::pow(config.adam_beta2, t);
  for (std::size_t p = 0; p < params.size(); ++p) {
    auto* param = params[p];
    auto& m = state.first_moment[p];
    auto& v = state.second_moment[p];
    const auto g = param->grad();
    if (m.size() != g.size()) throw ShapeError("adam_step: moment shape mismatch for '" + param->name() + "'");
    const double lr = config.lr.for_group(param->group());
    std::vector<double> value = param->value().to_vector();
    double* __restrict x = value.data();
    double* __restrict m1 = m.data();
    double* __restrict m2 = v.data();
    const double* __restrict grad = g.data();
    const double b1 = config.adam_beta1, b2 = config.adam_beta2, eps = config.adam_eps;
    const double step1 = lr / c1, inv_c2 = 1.0 / c2;
    for (std::size_t i = 0; i < value.size(); ++i) {
      m1[i] = b1 * m1[i] + (1.0 - b1) * grad[i];
      m2[i] = b2 * m2[i] + (1.0 - b2) * grad[i] * grad[i];
      x[i] -= step1 * m1[i] / (std::sqrt(m2[i] * inv_c2) + eps);
    }
    param->set_value(std::move(value));
  }
}

ad::Tensor image_batch(std::span<const SyntheticSample* const> samples) {
  if (samples.empty()) throw ShapeError("image_batch: empty batch");
  const std::size_t pixels = samples[0]->image.size();
  std::vector<double> data;
  data.reserve(samples.size() * pixels);
  for (const auto* s : samples) {
    if (s->image.size() != pixels) throw ShapeError("image_batch: images differ in size");
    data.insert(data.end(), s->image.begin(), s->image.end());
  }
  return ad::Tensor({samples.size(), pixels}, std::move(data));
}

PoseBatch target_batch(std::span<const SyntheticSample* const> samples) {
  if (samples.empty()) throw ShapeError("target_batch: empty batch");
  const std::size_t n = samples[0]->gt_2p5d.size();
  std::vector<double> u, v, z;
  u.reserve(samples.size() * n);
  v.reserve(samples.size() * n);
  z.reserve(samples.size() * n);
  for (const auto* s : samples) {
    if (s->gt_2p5d.size() != n) throw ShapeError("target_batch: joint counts differ");
    for (const auto& j : s->gt_2p5d) {
      u.push_back(j.u);
      v.push_back(j.v);
      z.push_back(j.z_rel);
    }
  }
  const ad::Shape shape{samples.size(), n};
  return PoseBatch{ad::Tensor(shape, std::move(u)), ad::Tensor(shape, std::move(v)), ad::Tensor(shape, std::move(z))};
}

TrainResult train(const ModelConfig& model_config, ModelParams& params, std::span<const SyntheticSample> data,
                  const TrainConfig& config, const TrainCallback& on_trace) {
  config.validate();
  model_config.validate();
  if (data.empty()) throw ConfigError("train: dataset is empty");
  if (data[0].gt_2p5d.size() != model_config.joints || data[0].image.size() != model_config.input_size()) {
    throw ConfigError("train: dataset (" + std::to_string(data[0].gt_2p5d.size()) + " joints, " +
                      std::to_string(data[0].image.size()) + " pixels) does not match the model configuration");
  }

  Rng order_rng(config.seed ^ 0x5EEDF00DULL);
  Rng noise_rng(config.seed ^ 0x6A09E667F3BCC908ULL);
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::size_t cursor = order.size();

  auto params_list = params.parameters();
  AdamState adam = AdamState::for_parameters(params_list);
  TrainResult result;
  std::vector<const SyntheticSample*> batch(config.batch);

  for (std::size_t step = 0; step < config.steps; ++step) {
    for (auto& slot : batch) {
      if (cursor == order.size()) {
        for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[order_rng.below(i)]);
        cursor = 0;
      }
      slot = &data[order[cursor++]];
    }
    const double tau = config.schedule.at(step);

    ad::Tape tape;
    double loss_value = 0.0;
    ad::Gradients grads;
    try {
      ForwardOptions options{Mode::train, tau, &noise_rng, nullptr};
      const auto out = model_forward(image_batch(batch), model_config, params, options, &tape);
      const auto loss = pose_loss(out.pose, target_batch(batch), config.beta);
      loss_value = loss.item();
      grads = tape.backward(loss);
    } catch (const NumericError& e) {
      throw NumericError("train: non-finite value at step " + std::to_string(step) + ": " + e.what());
    }
    if (!std::isfinite(loss_value)) throw NumericError("train: non-finite loss at step " + std::to_string(step));

    for (auto* p : params_list) {
      p->zero_grad();
      p->accumulate_grad(grads);
    }
    adam_step(params_list, adam, config);

    result.final_loss = loss_value;
    if (step % config.trace_interval == 0 || step + 1 == config.steps) {
      result.trace.push_back({step, loss_value});
      if (on_trace) on_trace(step, loss_value, tau);
    }
  }
  return result;
}

}  // namespace grouppose
