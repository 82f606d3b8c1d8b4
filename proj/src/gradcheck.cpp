#include "grouppose/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "grouppose/fusion.hpp"
#include "grouppose/model.hpp"
#include "grouppose/selector.hpp"
#include "grouppose/training.hpp"

namespace grouppose {

namespace {

std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

ad::Tensor uniform_tensor(Rng& rng, ad::Shape shape, double lo, double hi) {
  std::vector<double> data(ad::shape_size(shape));
  for (auto& x : data) x = rng.uniform(lo, hi);
  return ad::Tensor(std::move(shape), std::move(data));
}

std::size_t pick(Rng& rng, std::size_t lo, std::size_t hi) { return lo + rng.below(hi - lo + 1); }

ad::Tensor weighted_sum(const ad::Tensor& t, const ad::Tensor& weight) { return ad::sum(ad::multiply(t, weight)); }

void merge(GradCheckResult& into, const GradCheckResult& one) {
  into.instances += one.instances;
  into.coordinates += one.coordinates;
  into.failures += one.failures;
  into.max_abs_error = std::max(into.max_abs_error, one.max_abs_error);
  into.max_rel_error = std::max(into.max_rel_error, one.max_rel_error);
}

// ---- primitive cases --------------------------------------------------------

struct PrimitiveStorage {
  std::vector<ad::Parameter> vars;
  std::vector<ad::Tensor> constants;
  ad::PrimitiveAttrs attrs;
  ad::Tensor weight;
};

GradCheckCase primitive_case(ad::Primitive kind, Rng& rng) {
  auto st = std::make_shared<PrimitiveStorage>();
  const std::size_t b = pick(rng, 1, 4);
  const std::size_t c = pick(rng, 1, 5);
  auto var = [&](ad::Tensor t) {
    st->vars.emplace_back("x" + std::to_string(st->vars.size()), ad::ParamGroup::backbone, std::move(t));
  };
  using ad::Primitive;
  switch (kind) {
    case Primitive::add:
    case Primitive::subtract:
    case Primitive::multiply:
      var(uniform_tensor(rng, {b, c}, -2, 2));
      var(uniform_tensor(rng, {b, c}, -2, 2));
      break;
    case Primitive::scale:
      var(uniform_tensor(rng, {b, c}, -2, 2));
      st->attrs.factor = rng.uniform(-3, 3);
      break;
    case Primitive::matmul: {
      const std::size_t k = pick(rng, 1, 5);
      var(uniform_tensor(rng, {b, k}, -2, 2));
      var(uniform_tensor(rng, {k, c}, -2, 2));
      break;
    }
    case Primitive::relu:
    case Primitive::abs:
    case Primitive::exp:
    case Primitive::mean:
      var(uniform_tensor(rng, {b, c}, -2, 2));
      break;
    case Primitive::log:
      var(uniform_tensor(rng, {b, c}, 0.2, 3));
      break;
    case Primitive::softmax:
      var(uniform_tensor(rng, {b, c + 1}, -3, 3));
      break;
    case Primitive::concat: {
      const std::size_t parts = pick(rng, 1, 3);
      for (std::size_t p = 0; p < parts; ++p) var(uniform_tensor(rng, {b, pick(rng, 1, 4)}, -2, 2));
      break;
    }
    case Primitive::slice: {
      const std::size_t width = c + 1;
      var(uniform_tensor(rng, {b, width}, -2, 2));
      st->attrs.begin = rng.below(width);
      st->attrs.end = pick(rng, st->attrs.begin + 1, width);
      break;
    }
    case Primitive::sum:
      var(uniform_tensor(rng, {b, c}, -2, 2));
      st->attrs.last_axis = rng.below(2) == 1;
      break;
    case Primitive::batch_norm_train:
      var(uniform_tensor(rng, {pick(rng, 3, 6), c}, -2, 2));
      var(uniform_tensor(rng, {c}, 0.5, 1.5));
      var(uniform_tensor(rng, {c}, -1, 1));
      break;
    case Primitive::batch_norm_eval:
      var(uniform_tensor(rng, {b, c}, -2, 2));
      var(uniform_tensor(rng, {c}, 0.5, 1.5));
      var(uniform_tensor(rng, {c}, -1, 1));
      st->constants.push_back(uniform_tensor(rng, {c}, -1, 1));
      st->constants.push_back(uniform_tensor(rng, {c}, 0.5, 2));
      break;
    case Primitive::broadcast:
      if (rng.below(2) == 0) {
        var(uniform_tensor(rng, {c}, -2, 2));
      } else {
        var(uniform_tensor(rng, {b, 1}, -2, 2));
      }
      st->attrs.shape = {b, c};
      break;
    case Primitive::reshape: {
      const std::size_t d = pick(rng, 1, 3);
      var(uniform_tensor(rng, {b, c * d}, -2, 2));
      st->attrs.shape = {b, c, d};
      break;
    }
  }

  // Output shape from a constant evaluation, then a fixed random weighting so
  // that every output coordinate contributes (a plain sum would make softmax
  // and batch norm gradients vanish).
  std::vector<ad::Tensor> probe;
  for (const auto& v : st->vars) probe.push_back(v.value());
  probe.insert(probe.end(), st->constants.begin(), st->constants.end());
  const auto out = ad::apply_primitive(kind, probe, st->attrs);
  st->weight = uniform_tensor(rng, out.shape(), -1, 1);

  GradCheckCase gc;
  for (auto& v : st->vars) gc.variables.push_back(&v);
  gc.objective = [kind, s = st.get()](ad::Tape* tape) {
    std::vector<ad::Tensor> inputs;
    for (auto& v : s->vars) inputs.push_back(v.bind(tape));
    inputs.insert(inputs.end(), s->constants.begin(), s->constants.end());
    return weighted_sum(ad::apply_primitive(kind, inputs, s->attrs), s->weight);
  };
  gc.storage = st;
  return gc;
}

// ---- composite cases --------------------------------------------------------

struct TensorStorage {
  std::vector<ad::Parameter> vars;
  std::vector<ad::Tensor> constants;
  double scalar = 0.0;
};

GradCheckCase relaxed_case(Rng& rng) {
  auto st = std::make_shared<TensorStorage>();
  const std::size_t n = pick(rng, 1, 5), k = pick(rng, 1, 4);
  st->vars.emplace_back("theta", ad::ParamGroup::selector, uniform_tensor(rng, {n, k}, -1, 1));
  st->constants.push_back(sample_gumbel(rng, n, k));
  st->constants.push_back(uniform_tensor(rng, {n, k}, -1, 1));
  st->scalar = rng.uniform(0.3, 5.0);
  GradCheckCase gc;
  gc.variables = {&st->vars[0]};
  gc.objective = [s = st.get()](ad::Tape* tape) {
    return weighted_sum(sample_relaxed(s->vars[0].bind(tape), s->scalar, s->constants[0]), s->constants[1]);
  };
  gc.storage = st;
  return gc;
}

struct FuseStorage {
  std::vector<ad::Parameter> features;
  FusionLayer layer;
  ad::Tensor weight;
};

GradCheckCase fuse_case(Rng& rng, Mode mode) {
  auto st = std::make_shared<FuseStorage>();
  const std::size_t k = pick(rng, 1, 3), c = pick(rng, 1, 4), b = pick(rng, 3, 6);
  for (std::size_t i = 0; i < k; ++i) {
    st->features.emplace_back("f" + std::to_string(i), ad::ParamGroup::backbone, uniform_tensor(rng, {b, c}, -2, 2));
  }
  st->layer = init_fusion_weights(k, c, rng.below(k));
  st->layer.weight.set_value(uniform_tensor(rng, {k * c, c}, -1, 1).to_vector());
  st->layer.bn.gamma.set_value(uniform_tensor(rng, {c}, 0.5, 1.5).to_vector());
  st->layer.bn.beta.set_value(uniform_tensor(rng, {c}, -1, 1).to_vector());
  st->layer.bn.running_mean = uniform_tensor(rng, {c}, -1, 1).to_vector();
  st->layer.bn.running_var = uniform_tensor(rng, {c}, 0.5, 2).to_vector();
  st->weight = uniform_tensor(rng, {b, c}, -1, 1);
  GradCheckCase gc;
  for (auto& f : st->features) gc.variables.push_back(&f);
  gc.variables.push_back(&st->layer.weight);
  gc.variables.push_back(&st->layer.bn.gamma);
  gc.variables.push_back(&st->layer.bn.beta);
  gc.objective = [s = st.get(), mode](ad::Tape* tape) {
    std::vector<ad::Tensor> inputs;
    for (auto& f : s->features) inputs.push_back(f.bind(tape));
    return weighted_sum(fuse(inputs, s->layer, mode, tape), s->weight);
  };
  gc.storage = st;
  return gc;
}

ad::Tensor weighted_pose(const PoseBatch& p, std::span<const ad::Tensor> w) {
  return ad::add(ad::add(weighted_sum(p.u, w[0]), weighted_sum(p.v, w[1])), weighted_sum(p.z_rel, w[2]));
}

struct DecodeStorage {
  std::vector<ad::Parameter> vars;
  std::vector<ad::Tensor> weights;
  std::size_t joints = 0, grid = 0, side = 0;
};

GradCheckCase decode_case(Rng& rng) {
  auto st = std::make_shared<DecodeStorage>();
  const std::size_t b = pick(rng, 1, 3);
  st->joints = pick(rng, 1, 3);
  st->grid = pick(rng, 2, 4);
  st->side = std::array<std::size_t, 3>{8, 16, 64}[rng.below(3)];
  const std::size_t width = st->joints * st->grid * st->grid;
  st->vars.emplace_back("heatmaps", ad::ParamGroup::backbone, uniform_tensor(rng, {b, width}, -3, 3));
  st->vars.emplace_back("depths", ad::ParamGroup::backbone, uniform_tensor(rng, {b, width}, -1, 1));
  for (int i = 0; i < 3; ++i) st->weights.push_back(uniform_tensor(rng, {b, st->joints}, -1, 1));
  GradCheckCase gc;
  gc.variables = {&st->vars[0], &st->vars[1]};
  gc.objective = [s = st.get()](ad::Tape* tape) {
    const auto pose = decode_soft_argmax(s->vars[0].bind(tape), s->vars[1].bind(tape), s->joints, s->grid, s->side);
    return weighted_pose(pose, s->weights);
  };
  gc.storage = st;
  return gc;
}

GradCheckCase combine_case(Rng& rng) {
  auto st = std::make_shared<DecodeStorage>();
  const std::size_t k = pick(rng, 1, 3), b = pick(rng, 1, 3), n = pick(rng, 1, 4);
  for (std::size_t g = 0; g < k; ++g)
    for (int c = 0; c < 3; ++c) st->vars.emplace_back("branch", ad::ParamGroup::backbone, uniform_tensor(rng, {b, n}, -5, 5));
  st->vars.emplace_back("selector", ad::ParamGroup::selector, uniform_tensor(rng, {n, k}, 0, 1));
  for (int i = 0; i < 3; ++i) st->weights.push_back(uniform_tensor(rng, {b, n}, -1, 1));
  GradCheckCase gc;
  for (auto& v : st->vars) gc.variables.push_back(&v);
  gc.objective = [s = st.get(), k](ad::Tape* tape) {
    std::vector<PoseBatch> branches;
    for (std::size_t g = 0; g < k; ++g) {
      branches.push_back({s->vars[3 * g].bind(tape), s->vars[3 * g + 1].bind(tape), s->vars[3 * g + 2].bind(tape)});
    }
    return weighted_pose(combine_groups(branches, s->vars.back().bind(tape)), s->weights);
  };
  gc.storage = st;
  return gc;
}

GradCheckCase loss_case(Rng& rng) {
  auto st = std::make_shared<TensorStorage>();
  const std::size_t b = pick(rng, 1, 3), n = pick(rng, 1, 4);
  for (int c = 0; c < 3; ++c) {
    st->vars.emplace_back("pred", ad::ParamGroup::backbone, uniform_tensor(rng, {b, n}, -5, 5));
    st->constants.push_back(uniform_tensor(rng, {b, n}, -5, 5));
  }
  st->scalar = rng.uniform(1.0, 30.0);
  GradCheckCase gc;
  for (auto& v : st->vars) gc.variables.push_back(&v);
  gc.objective = [s = st.get()](ad::Tape* tape) {
    const PoseBatch pred{s->vars[0].bind(tape), s->vars[1].bind(tape), s->vars[2].bind(tape)};
    const PoseBatch gt{s->constants[0], s->constants[1], s->constants[2]};
    return pose_loss(pred, gt, s->scalar);
  };
  gc.storage = st;
  return gc;
}

struct ModelStorage {
  ModelConfig config;
  ModelParams params;
  ad::Tensor images;
  ad::Tensor noise;
  PoseBatch target;
  double tau = 1.0;
};

ModelConfig tiny_config() {
  ModelConfig c;
  c.joints = 4;
  c.groups = 2;
  c.image_side = 8;
  c.grid = 4;
  c.shared_widths = {6, 6};
  c.branch_widths = {5, 5};
  c.fusion_points = 2;
  return c;
}

GradCheckCase model_case(Rng& rng) {
  auto st = std::make_shared<ModelStorage>();
  st->config = tiny_config();
  st->params = init_model(st->config, rng);
  // Move away from the symmetric initialization (tied selector logits, zero biases).
  for (auto* p : st->params.parameters()) {
    auto values = p->value().to_vector();
    for (auto& x : values) x += rng.normal(0.0, 0.1);
    p->set_value(std::move(values));
  }
  const std::size_t b = 8, n = st->config.joints;
  const double side = static_cast<double>(st->config.image_side);
  st->images = uniform_tensor(rng, {b, st->config.input_size()}, 0, 1);
  st->noise = sample_gumbel(rng, n, st->config.groups);
  st->target = {uniform_tensor(rng, {b, n}, 0, side), uniform_tensor(rng, {b, n}, 0, side),
                uniform_tensor(rng, {b, n}, -1, 1)};
  st->tau = rng.uniform(0.5, 5.0);
  GradCheckCase gc;
  gc.variables = st->params.parameters();
  gc.objective = [s = st.get()](ad::Tape* tape) {
    const ForwardOptions options{Mode::train, s->tau, nullptr, &s->noise};
    const auto out = model_forward(s->images, s->config, s->params, options, tape);
    return pose_loss(out.pose, s->target, 20.0);
  };
  gc.storage = st;
  return gc;
}

}  // namespace

double kink_distance(const ad::Tape& tape) {
  double best = std::numeric_limits<double>::infinity();
  for (const auto& e : tape.entries()) {
    if (e.kind != ad::Primitive::relu && e.kind != ad::Primitive::abs) continue;
    if (e.inputs.empty() || e.inputs[0] == ad::kNoNode) continue;
    for (double x : tape.value(e.inputs[0]).data()) best = std::min(best, std::abs(x));
  }
  return best;
}

GradCheckResult check_case(const GradCheckCase& c, const GradCheckOptions& options) {
  GradCheckResult r;
  ad::Tape tape;
  const auto out = c.objective(&tape);
  if (kink_distance(tape) < options.kink_margin) return r;
  const auto grads = tape.backward(out);
  for (auto* v : c.variables) {
    v->zero_grad();
    v->accumulate_grad(grads);
  }
  r.instances = 1;
  for (auto* v : c.variables) {
    const std::vector<double> analytic(v->grad().begin(), v->grad().end());
    const ad::Tensor original = v->value();
    const auto numeric = ad::finite_difference_gradient(
        [&](const ad::Tensor& point) {
          v->set_value(point.to_vector());
          return c.objective(nullptr).item();
        },
        original, options.h);
    v->set_value(original.to_vector());
    for (std::size_t i = 0; i < analytic.size(); ++i) {
      const double a = analytic[i], n = numeric[i];
      const double err = std::abs(a - n);
      const double scale = std::max(std::abs(a), std::abs(n));
      ++r.coordinates;
      r.max_abs_error = std::max(r.max_abs_error, err);
      if (err > options.abs_tol) r.max_rel_error = std::max(r.max_rel_error, err / scale);
      if (!(err <= options.abs_tol || err <= options.rel_tol * scale)) ++r.failures;
    }
  }
  return r;
}

GradCheckResult check_operation(const std::string& name, const std::function<GradCheckCase(Rng&)>& make,
                                const GradCheckOptions& options) {
  GradCheckResult total;
  total.name = name;
  Rng rng(options.seed ^ fnv1a(name));
  const std::size_t max_draws = options.instances * 50;
  for (std::size_t draw = 0; draw < max_draws && total.instances < options.instances; ++draw) {
    merge(total, check_case(make(rng), options));
  }
  return total;
}

std::vector<GradCheckResult> run_primitive_checks(const GradCheckOptions& options) {
  std::vector<GradCheckResult> out;
  for (auto kind : ad::kAllPrimitives) {
    out.push_back(check_operation(std::string(ad::to_string(kind)),
                                  [kind](Rng& rng) { return primitive_case(kind, rng); }, options));
  }
  return out;
}

std::vector<GradCheckResult> run_gradient_suite(const GradCheckOptions& options) {
  auto out = run_primitive_checks(options);
  out.push_back(check_operation("sample_relaxed", relaxed_case, options));
  out.push_back(check_operation("fuse[train]", [](Rng& rng) { return fuse_case(rng, Mode::train); }, options));
  out.push_back(check_operation("fuse[eval]", [](Rng& rng) { return fuse_case(rng, Mode::eval); }, options));
  out.push_back(check_operation("decode_soft_argmax", decode_case, options));
  out.push_back(check_operation("combine_groups", combine_case, options));
  out.push_back(check_operation("pose_loss", loss_case, options));
  out.push_back(check_operation("model_forward", model_case, options));
  return out;
}

}  // namespace grouppose
