#include "grouppose/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <string>

#include "grouppose/errors.hpp"
#include "grouppose/training.hpp"

namespace grouppose {

void to_json(nlohmann::json& j, const MetricsReport& r) {
  nlohmann::json pck = nlohmann::json::array();
  for (const auto& p : r.pck) pck.push_back({p.threshold_mm, p.fraction});
  j = nlohmann::json{{"mean_epe_mm", r.mean_epe_mm},
                     {"median_epe_mm", r.median_epe_mm},
                     {"auc", r.auc},
                     {"pck", pck},
                     {"ari", r.ari},
                     {"aligned", r.aligned},
                     {"samples", r.samples},
                     {"joints", r.joints},
                     {"groups", r.groups}};
}

void from_json(const nlohmann::json& j, MetricsReport& r) {
  r.mean_epe_mm = j.at("mean_epe_mm").get<double>();
  r.median_epe_mm = j.at("median_epe_mm").get<double>();
  r.auc = j.at("auc").get<double>();
  r.ari = j.at("ari").get<double>();
  r.pck.clear();
  for (const auto& p : j.at("pck")) {
    if (!p.is_array() || p.size() != 2) throw FormatError("metrics: pck entries must be [threshold, value] pairs");
    r.pck.push_back({p[0].get<double>(), p[1].get<double>()});
  }
  r.aligned = j.value("aligned", false);
  r.samples = j.value("samples", std::size_t{0});
  r.joints = j.value("joints", std::size_t{0});
  r.groups = j.value("groups", std::vector<std::size_t>{});
}

std::vector<double> default_thresholds() { return threshold_grid(20.0, 50.0, 0.5); }

std::vector<double> threshold_grid(double lo, double hi, double step) {
  if (!(step > 0.0) || !(hi >= lo)) throw ConfigError("threshold grid: need hi >= lo and step > 0");
  std::vector<double> out;
  const auto count = static_cast<std::size_t>(std::floor((hi - lo) / step + 1e-9));
  for (std::size_t i = 0; i <= count; ++i) out.push_back(lo + static_cast<double>(i) * step);
  return out;
}

std::vector<PckPoint> pck_curve(std::span<const double> errors, std::span<const double> thresholds) {
  if (errors.empty()) throw ConfigError("pck: no errors to summarize");
  if (!std::is_sorted(thresholds.begin(), thresholds.end())) throw ConfigError("pck: thresholds must be ascending");
  std::vector<double> sorted(errors.begin(), errors.end());
  std::sort(sorted.begin(), sorted.end());
  std::vector<PckPoint> curve;
  curve.reserve(thresholds.size());
  for (double t : thresholds) {
    const auto within = std::upper_bound(sorted.begin(), sorted.end(), t) - sorted.begin();
    curve.push_back({t, static_cast<double>(within) / static_cast<double>(sorted.size())});
  }
  return curve;
}

double pck_auc(std::span<const PckPoint> curve) {
  if (curve.empty()) return 0.0;
  if (curve.size() == 1) return curve[0].fraction;
  double area = 0.0;
  for (std::size_t i = 1; i < curve.size(); ++i) {
    area += 0.5 * (curve[i].fraction + curve[i - 1].fraction) * (curve[i].threshold_mm - curve[i - 1].threshold_mm);
  }
  return area / (curve.back().threshold_mm - curve.front().threshold_mm);
}

double lower_median(std::vector<double> values) {
  if (values.empty()) throw ConfigError("median of an empty set");
  const std::size_t mid = (values.size() - 1) / 2;
  std::nth_element(values.begin(), values.begin() + static_cast<std::ptrdiff_t>(mid), values.end());
  return values[mid];
}

double adjusted_rand_index(std::span<const std::size_t> a, std::span<const std::size_t> b) {
  if (a.size() != b.size()) throw ShapeError("adjusted_rand_index: labelings differ in length");
  const std::size_t n = a.size();
  auto pairs = [](double x) { return x * (x - 1.0) / 2.0; };
  std::map<std::pair<std::size_t, std::size_t>, double> table;
  std::map<std::size_t, double> rows, cols;
  for (std::size_t i = 0; i < n; ++i) {
    table[{a[i], b[i]}] += 1.0;
    rows[a[i]] += 1.0;
    cols[b[i]] += 1.0;
  }
  double index = 0.0, sum_rows = 0.0, sum_cols = 0.0;
  for (const auto& [_, c] : table) index += pairs(c);
  for (const auto& [_, c] : rows) sum_rows += pairs(c);
  for (const auto& [_, c] : cols) sum_cols += pairs(c);
  const double total = pairs(static_cast<double>(n));
  if (total == 0.0) return 1.0;
  const double expected = sum_rows * sum_cols / total;
  const double max_index = 0.5 * (sum_rows + sum_cols);
  if (max_index == expected) {
    // Both labelings trivial (one cluster or all singletons): agreement is exact or undefined.
    return index == max_index ? 1.0 : 0.0;
  }
  return (index - expected) / (max_index - expected);
}

MetricsReport summarize_errors(std::span<const double> joint_errors, std::span<const double> thresholds) {
  MetricsReport r;
  double total = 0.0;
  for (double e : joint_errors) total += e;
  r.mean_epe_mm = total / static_cast<double>(joint_errors.size());
  r.median_epe_mm = lower_median({joint_errors.begin(), joint_errors.end()});
  r.pck = pck_curve(joint_errors, thresholds);
  r.auc = pck_auc(r.pck);
  return r;
}

MetricsReport evaluate(const ModelConfig& config, ModelParams& params, const Dataset& dataset,
                       const EvalOptions& options) {
  if (dataset.samples.empty()) throw ConfigError("evaluate: dataset is empty");
  if (options.batch < 1) throw ConfigError("evaluate: batch must be >= 1");
  std::vector<double> errors;
  errors.reserve(dataset.samples.size() * config.joints);
  for (std::size_t start = 0; start < dataset.samples.size(); start += options.batch) {
    const std::size_t end = std::min(dataset.samples.size(), start + options.batch);
    std::vector<const SyntheticSample*> batch;
    for (std::size_t i = start; i < end; ++i) batch.push_back(&dataset.samples[i]);
    const auto out = model_forward(image_batch(batch), config, params, ForwardOptions{}, nullptr);
    for (std::size_t b = 0; b < batch.size(); ++b) {
      const auto& s = *batch[b];
      auto pred = recover_3d(out.pose.sample(b), dataset.header.camera, s.s0, s.z_root);
      if (options.align) pred = procrustes_align(pred, s.gt_3d).aligned;
      for (std::size_t i = 0; i < pred.size(); ++i) errors.push_back(distance(pred[i], s.gt_3d[i]));
    }
  }
  MetricsReport report = summarize_errors(errors, options.thresholds);
  report.aligned = options.align;
  report.samples = dataset.samples.size();
  report.joints = config.joints;
  report.groups = harden(params.selector).assignment();
  if (dataset.header.planted.size() == report.groups.size()) {
    report.ari = adjusted_rand_index(report.groups, dataset.header.planted);
  }
  return report;
}

}  // namespace grouppose
