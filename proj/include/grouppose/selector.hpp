#pragma once

// Learnable joint-to-group selectors.
//
// Training draws a relaxed (Concrete / Gumbel-softmax) membership matrix from
// trainable logits; evaluation hardens the logits to a one-hot assignment.

#include <cstddef>
#include <span>
#include <vector>

#include "grouppose/autodiff.hpp"
#include "grouppose/rng.hpp"

namespace grouppose {

/// Trainable N x K logits, tagged with the "selector" learning-rate group.
struct SelectorLogits {
  std::size_t joints = 0;
  std::size_t groups = 0;
  ad::Parameter theta;
};

/// Every logit starts at 1/K, i.e. no prior on the grouping.
SelectorLogits init_logits(std::size_t joints, std::size_t groups);

/// Gumbel(0, 1) variate -log(-log(u)) for u in the open interval (0, 1).
double gumbel_noise(double u);

/// N x K matrix of independent Gumbel variates.
ad::Tensor sample_gumbel(Rng& rng, std::size_t joints, std::size_t groups);

/// Row-wise softmax((theta + noise) / tau). `theta` may be recorded on a tape;
/// gradients then flow back to it. Rows of the result sum to one.
ad::Tensor sample_relaxed(const ad::Tensor& theta, double tau, const ad::Tensor& noise);

/// One-hot assignment: row i selects exactly one group.
class BinarySelector {
 public:
  BinarySelector(std::size_t groups, std::vector<std::size_t> assignment);

  std::size_t joints() const { return assignment_.size(); }
  std::size_t groups() const { return groups_; }
  std::size_t group_of(std::size_t joint) const { return assignment_.at(joint); }
  const std::vector<std::size_t>& assignment() const { return assignment_; }

  /// Dense N x K {0,1} matrix.
  ad::Tensor matrix() const;

 private:
  std::size_t groups_;
  std::vector<std::size_t> assignment_;
};

/// Argmax per row; ties go to the lowest group index.
BinarySelector harden(const ad::Tensor& theta);
inline BinarySelector harden(const SelectorLogits& logits) { return harden(logits.theta.value()); }

/// Annealing schedule max(tau_min, tau_init - decrement * floor(step / interval)).
struct TemperatureSchedule {
  double tau_init = 5.0;
  double decrement = 0.1;
  std::size_t interval = 1000;
  double tau_min = 0.1;

  void validate() const;
  double at(std::size_t step) const;
};

inline double temperature_at(const TemperatureSchedule& schedule, std::size_t step) { return schedule.at(step); }

/// Joint indices per group; group k = { i : selector row i picks k }. Groups
/// may be empty.
std::vector<std::vector<std::size_t>> group_partition(const BinarySelector& selector);

}  // namespace grouppose
