#pragma once

// Reverse-mode vs central-difference gradient checks over every
// differentiable operation of the library.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "grouppose/autodiff.hpp"
#include "grouppose/rng.hpp"

namespace grouppose {

struct GradCheckOptions {
  std::uint64_t seed = 0;
  std::size_t instances = 20;
  double h = 1e-5;
  double rel_tol = 1e-4;
  double abs_tol = 1e-7;
  /// Instances whose relu/abs inputs come closer than this to zero are
  /// redrawn, so the difference quotient never straddles a kink.
  double kink_margin = 1e-3;
};

/// A scalar objective over a set of parameters. `objective(tape)` must bind
/// every variable with Parameter::bind(tape).
struct GradCheckCase {
  std::vector<ad::Parameter*> variables;
  std::function<ad::Tensor(ad::Tape*)> objective;
  std::shared_ptr<void> storage;  // keeps whatever the closure refers to alive
};

struct GradCheckResult {
  std::string name;
  std::size_t instances = 0;
  std::size_t coordinates = 0;
  std::size_t failures = 0;       // coordinates outside tolerance
  double max_abs_error = 0.0;
  double max_rel_error = 0.0;     // over coordinates not within abs_tol

  bool passed() const { return instances > 0 && failures == 0; }
};

/// Smallest |input| over all relu and abs applications on the tape
/// (infinity if there are none).
double kink_distance(const ad::Tape& tape);

/// Compares backward() with central differences for one case. The result
/// has instances = 1, or instances = 0 when the point lies within
/// `kink_margin` of a kink and was not checked.
GradCheckResult check_case(const GradCheckCase& c, const GradCheckOptions& options);

/// Checks `instances` cases drawn by `make(rng)`, redrawing kink-adjacent
/// points (at most 50 redraws per instance).
GradCheckResult check_operation(const std::string& name, const std::function<GradCheckCase(Rng&)>& make,
                                const GradCheckOptions& options);

/// One result per primitive kind, then sample_relaxed, fuse (train and eval),
/// decode_soft_argmax, combine_groups, pose_loss and model_forward on a tiny
/// configuration (N=4, K=2, G=4, side 8).
std::vector<GradCheckResult> run_gradient_suite(const GradCheckOptions& options);

/// The primitive part of the suite only.
std::vector<GradCheckResult> run_primitive_checks(const GradCheckOptions& options);

}  // namespace grouppose
