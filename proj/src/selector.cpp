#include "grouppose/selector.hpp"

#include <cmath>
#include <string>

#include "grouppose/errors.hpp"

namespace grouppose {

SelectorLogits init_logits(std::size_t joints, std::size_t groups) {
  if (joints < 1 || groups < 1) {
    throw ConfigError("selector: need at least one joint and one group, got N=" + std::to_string(joints) +
                      " K=" + std::to_string(groups));
  }
  const double prior = 1.0 / static_cast<double>(groups);
  return SelectorLogits{joints, groups,
                        ad::Parameter("selector.theta", ad::ParamGroup::selector,
                                      ad::Tensor::full({joints, groups}, prior))};
}

double gumbel_noise(double u) {
  if (!(u > 0.0 && u < 1.0)) throw DomainError("gumbel_noise: u must lie in (0, 1), got " + std::to_string(u));
  return -std::log(-std::log(u));
}

ad::Tensor sample_gumbel(Rng& rng, std::size_t joints, std::size_t groups) {
  std::vector<double> noise(joints * groups);
  for (auto& o : noise) o = gumbel_noise(rng.uniform_open());
  return ad::Tensor({joints, groups}, std::move(noise));
}

ad::Tensor sample_relaxed(const ad::Tensor& theta, double tau, const ad::Tensor& noise) {
  if (!(tau > 0.0)) throw DomainError("sample_relaxed: temperature must be positive, got " + std::to_string(tau));
  if (theta.rank() != 2) throw ShapeError("sample_relaxed: logits must be N x K, got " + ad::shape_string(theta.shape()));
  if (noise.shape() != theta.shape()) {
    throw ShapeError("sample_relaxed: noise shape " + ad::shape_string(noise.shape()) + " differs from logits " +
                     ad::shape_string(theta.shape()));
  }
  return ad::softmax(ad::scale(ad::add(theta, noise), 1.0 / tau));
}

BinarySelector::BinarySelector(std::size_t groups, std::vector<std::size_t> assignment)
    : groups_(groups), assignment_(std::move(assignment)) {
  if (groups_ < 1) throw ConfigError("binary selector: need at least one group");
  for (std::size_t i = 0; i < assignment_.size(); ++i) {
    if (assignment_[i] >= groups_) {
      throw ConfigError("binary selector: joint " + std::to_string(i) + " assigned to group " +
                        std::to_string(assignment_[i]) + " of " + std::to_string(groups_));
    }
  }
}

ad::Tensor BinarySelector::matrix() const {
  std::vector<double> m(joints() * groups_, 0.0);
  for (std::size_t i = 0; i < joints(); ++i) m[i * groups_ + assignment_[i]] = 1.0;
  return ad::Tensor({joints(), groups_}, std::move(m));
}

BinarySelector harden(const ad::Tensor& theta) {
  if (theta.rank() != 2 || theta.dim(1) == 0) {
    throw ShapeError("harden: logits must be N x K with K >= 1, got " + ad::shape_string(theta.shape()));
  }
  const std::size_t n = theta.dim(0);
  const std::size_t k = theta.dim(1);
  std::vector<std::size_t> assignment(n, 0);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 1; j < k; ++j) {
      if (theta.at(i, j) > theta.at(i, assignment[i])) assignment[i] = j;
    }
  }
  return BinarySelector(k, std::move(assignment));
}

void TemperatureSchedule::validate() const {
  if (!(tau_min > 0.0 && tau_init > tau_min && decrement > 0.0 && interval >= 1)) {
    throw ConfigError("temperature schedule: require tau_init > tau_min > 0, decrement > 0, interval >= 1");
  }
}

double TemperatureSchedule::at(std::size_t step) const {
  const double drops = static_cast<double>(step / interval);
  return std::max(tau_min, tau_init - decrement * drops);
}

std::vector<std::vector<std::size_t>> group_partition(const BinarySelector& selector) {
  std::vector<std::vector<std::size_t>> groups(selector.groups());
  for (std::size_t i = 0; i < selector.joints(); ++i) groups[selector.group_of(i)].push_back(i);
  return groups;
}

}  // namespace grouppose
