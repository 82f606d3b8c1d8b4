#pragma once

// Evaluation: end-point errors, PCK curve and its normalized area, and
// agreement between learned and planted joint groups.

#include <cstddef>
#include <span>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "grouppose/model.hpp"
#include "grouppose/synthdata.hpp"

namespace grouppose {

struct PckPoint {
  double threshold_mm;
  double fraction;
};

struct MetricsReport {
  double mean_epe_mm = 0.0;
  double median_epe_mm = 0.0;
  std::vector<PckPoint> pck;
  double auc = 0.0;
  double ari = 0.0;
  bool aligned = false;
  std::size_t samples = 0;
  std::size_t joints = 0;
  std::vector<std::size_t> groups;  // hardened group per joint
};

void to_json(nlohmann::json& j, const MetricsReport& r);
void from_json(const nlohmann::json& j, MetricsReport& r);

/// 20, 20.5, ..., 50 mm.
std::vector<double> default_thresholds();

/// Thresholds lo, lo + step, ..., hi (inclusive within rounding).
std::vector<double> threshold_grid(double lo, double hi, double step);

/// Fraction of errors <= t for each threshold t.
std::vector<PckPoint> pck_curve(std::span<const double> errors, std::span<const double> thresholds);

/// Trapezoidal area under the PCK curve divided by the threshold range.
double pck_auc(std::span<const PckPoint> curve);

/// Lower median (element (n-1)/2 of the sorted values).
double lower_median(std::vector<double> values);

/// Pair-counting adjusted Rand index between two labelings of the same items.
double adjusted_rand_index(std::span<const std::size_t> a, std::span<const std::size_t> b);

/// Aggregates per-joint errors into a report (group fields left empty).
MetricsReport summarize_errors(std::span<const double> joint_errors, std::span<const double> thresholds);

struct EvalOptions {
  std::vector<double> thresholds = default_thresholds();
  bool align = false;
  std::size_t batch = 64;
};

/// Eval-mode forward on every sample; 3D recovery uses each sample's true
/// camera, s0 and root depth. Group agreement compares the hardened selector
/// with `dataset.header.planted`.
MetricsReport evaluate(const ModelConfig& config, ModelParams& params, const Dataset& dataset,
                       const EvalOptions& options = {});

}  // namespace grouppose
