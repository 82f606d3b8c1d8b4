#include "cli.hpp"

#include <charconv>
#include <optional>
#include <ostream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "grouppose/binary_io.hpp"
#include "grouppose/errors.hpp"
#include "grouppose/gradcheck.hpp"
#include "grouppose/metrics.hpp"
#include "grouppose/model.hpp"
#include "grouppose/synthdata.hpp"
#include "grouppose/training.hpp"

namespace grouppose::cli {

namespace {

using nlohmann::json;

// Bad flag values or config files; reported with exit code 2.
struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

std::string number(double x) {
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof buf, x);
  return std::string(buf, r.ptr);
}

void emit(const std::string& path, const std::string& text, std::ostream& out) {
  if (path.empty() || path == "-") {
    out << text;
  } else {
    io::write_file_atomic(path, text);
  }
}

// ---- gen --------------------------------------------------------------------

struct GenArgs {
  std::string out;
  std::size_t samples = 1024;
  std::uint64_t seed = 0;
  std::size_t side = 64;
  bool planted = true;
};

int cmd_gen(const GenArgs& a, std::ostream& out) {
  auto config = SynthConfig::for_image(a.side);
  config.groups_planted = a.planted;
  try {
    config.validate();
  } catch (const ConfigError& e) {
    throw UsageError(e.what());
  }
  const auto ds = generate_dataset(a.samples, a.seed, a.out, config);
  out << "wrote " << ds.samples.size() << " samples (" << a.side << "x" << a.side << ", seed " << a.seed << ") to "
      << a.out << "\n";
  return kExitOk;
}

// ---- train ------------------------------------------------------------------

struct TrainArgs {
  std::string data;
  std::string out;
  std::string trace;
  std::string config;
  std::optional<std::size_t> k;
  std::optional<std::size_t> steps;
  std::optional<std::size_t> batch;
  std::optional<double> beta;
  std::optional<double> lr_selector;
  std::optional<double> lr_fusion;
  std::optional<double> lr_backbone;
  std::optional<std::uint64_t> seed;
};

void check_keys(const json& section, const json& reference, const std::string& where) {
  if (!section.is_object()) throw UsageError("config: '" + where + "' must be an object");
  for (const auto& [key, _] : section.items()) {
    if (!reference.contains(key)) throw UsageError("config: unknown key '" + where + "." + key + "'");
  }
}

// Reads {"model": {...}, "train": {...}}; absent keys keep their defaults.
json load_config(const std::string& path, ModelConfig& model, TrainConfig& train) {
  json doc;
  try {
    doc = json::parse(io::read_file(path));
  } catch (const json::exception& e) {
    throw UsageError("config " + path + ": " + e.what());
  }
  if (!doc.is_object()) throw UsageError("config " + path + ": top level must be an object");
  for (const auto& [key, _] : doc.items()) {
    if (key != "model" && key != "train") throw UsageError("config: unknown section '" + key + "'");
  }
  try {
    if (doc.contains("model")) {
      check_keys(doc["model"], json(ModelConfig{}), "model");
      model = doc["model"].get<ModelConfig>();
    }
    if (doc.contains("train")) {
      check_keys(doc["train"], json(TrainConfig{}), "train");
      train = doc["train"].get<TrainConfig>();
    }
  } catch (const json::exception& e) {
    throw UsageError("config " + path + ": " + e.what());
  }
  return doc;
}

int cmd_train(const TrainArgs& a, std::ostream& out, std::ostream& err) {
  ModelConfig model;
  TrainConfig config;
  json doc;
  if (!a.config.empty()) doc = load_config(a.config, model, config);
  if (a.k) model.groups = *a.k;
  if (a.steps) config.steps = *a.steps;
  if (a.batch) config.batch = *a.batch;
  if (a.beta) config.beta = *a.beta;
  if (a.lr_selector) config.lr.selector = *a.lr_selector;
  if (a.lr_fusion) config.lr.fusion = *a.lr_fusion;
  if (a.lr_backbone) config.lr.backbone = *a.lr_backbone;
  if (a.seed) config.seed = *a.seed;
  try {
    model.validate();
    config.validate();
  } catch (const ConfigError& e) {
    throw UsageError(e.what());
  }

  const auto dataset = read_dataset(a.data);
  // Input geometry comes from the data; a config file may only confirm it.
  const json model_doc = doc.value("model", json::object());
  if (model_doc.contains("joints") && model.joints != dataset.header.joints) {
    throw ConfigError("config joints (" + std::to_string(model.joints) + ") differ from the dataset (" +
                      std::to_string(dataset.header.joints) + ")");
  }
  if (model_doc.contains("image_side") && model.image_side != dataset.header.image_side) {
    throw ConfigError("config image_side (" + std::to_string(model.image_side) + ") differs from the dataset (" +
                      std::to_string(dataset.header.image_side) + ")");
  }
  model.joints = dataset.header.joints;
  model.image_side = dataset.header.image_side;
  model.validate();

  Rng init_rng(config.seed);
  auto params = init_model(model, init_rng);
  const std::size_t report_every = std::max<std::size_t>(config.steps / 10, 1);
  const auto result = train(model, params, dataset.samples, config, [&](std::size_t step, double loss, double tau) {
    if (step % report_every == 0 || step + 1 == config.steps) {
      err << "step " << step << "  loss " << loss << "  tau " << tau << "\n";
    }
  });
  save_checkpoint(a.out, model, params);
  if (!a.trace.empty()) {
    std::string csv = "step,loss\n";
    for (const auto& p : result.trace) csv += std::to_string(p.step) + "," + number(p.loss) + "\n";
    io::write_file_atomic(a.trace, csv);
  }
  out << "trained " << config.steps << " steps (K=" << model.groups << ", final loss " << number(result.final_loss)
      << "); checkpoint " << a.out << "\n";
  return kExitOk;
}

// ---- eval -------------------------------------------------------------------

struct EvalArgs {
  std::string model;
  std::string data;
  std::string thresholds = "20:50:0.5";
  bool align = false;
  std::string out;
};

double parse_number(const std::string& s) {
  double v = 0.0;
  const auto r = std::from_chars(s.data(), s.data() + s.size(), v);
  if (r.ec != std::errc() || r.ptr != s.data() + s.size()) throw UsageError("invalid number '" + s + "'");
  return v;
}

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> parts;
  std::string part;
  std::istringstream in(s);
  while (std::getline(in, part, sep)) parts.push_back(part);
  return parts;
}

// "lo:hi:step" or an explicit comma-separated ascending list (mm).
std::vector<double> parse_thresholds(const std::string& spec) {
  std::vector<double> values;
  if (spec.find(':') != std::string::npos) {
    const auto parts = split(spec, ':');
    if (parts.size() != 3) throw UsageError("--thresholds: expected lo:hi:step, got '" + spec + "'");
    try {
      values = threshold_grid(parse_number(parts[0]), parse_number(parts[1]), parse_number(parts[2]));
    } catch (const ConfigError& e) {
      throw UsageError(std::string("--thresholds: ") + e.what());
    }
  } else {
    for (const auto& p : split(spec, ',')) values.push_back(parse_number(p));
  }
  if (values.empty()) throw UsageError("--thresholds: empty list");
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (!(values[i] >= 0.0) || (i > 0 && !(values[i] > values[i - 1]))) {
      throw UsageError("--thresholds: values must be non-negative and strictly ascending");
    }
  }
  return values;
}

int cmd_eval(const EvalArgs& a, std::ostream& out) {
  EvalOptions options;
  options.thresholds = parse_thresholds(a.thresholds);
  options.align = a.align;
  auto checkpoint = load_checkpoint(a.model);
  const auto dataset = read_dataset(a.data);
  if (checkpoint.config.joints != dataset.header.joints || checkpoint.config.image_side != dataset.header.image_side) {
    throw ConfigError("model expects " + std::to_string(checkpoint.config.joints) + " joints on " +
                      std::to_string(checkpoint.config.image_side) + "px images; dataset has " +
                      std::to_string(dataset.header.joints) + " joints on " +
                      std::to_string(dataset.header.image_side) + "px");
  }
  const auto report = evaluate(checkpoint.config, checkpoint.params, dataset, options);
  emit(a.out, json(report).dump(2) + "\n", out);
  return kExitOk;
}

// ---- groups -----------------------------------------------------------------

int cmd_groups(const std::string& model_path, bool as_json, std::ostream& out) {
  const auto checkpoint = load_checkpoint(model_path);
  const auto selector = harden(checkpoint.params.selector);
  const auto groups = group_partition(selector);
  const std::size_t n = checkpoint.config.joints;
  auto name = [n](std::size_t i) {
    return n == kHandJoints ? std::string(joint_name(i)) : "joint" + std::to_string(i);
  };
  if (as_json) {
    json joints = json::array();
    for (std::size_t i = 0; i < n; ++i) {
      joints.push_back({{"index", i}, {"name", name(i)}, {"group", selector.group_of(i)}});
    }
    out << json{{"joints", joints}, {"groups", groups}}.dump(2) << "\n";
    return kExitOk;
  }
  out << "joint  name         group\n";
  for (std::size_t i = 0; i < n; ++i) {
    std::string row = std::to_string(i);
    row.resize(7, ' ');
    std::string nm = name(i);
    nm.resize(std::max<std::size_t>(nm.size() + 1, 13), ' ');
    out << row << nm << selector.group_of(i) << "\n";
  }
  for (std::size_t k = 0; k < groups.size(); ++k) {
    out << "group " << k << ":";
    if (groups[k].empty()) out << " (empty)";
    for (auto i : groups[k]) out << " " << name(i);
    out << "\n";
  }
  return kExitOk;
}

// ---- plot-pck ---------------------------------------------------------------

int cmd_plot_pck(const std::string& metrics_path, const std::string& csv_path, std::ostream& out) {
  MetricsReport report;
  try {
    report = json::parse(io::read_file(metrics_path)).get<MetricsReport>();
  } catch (const json::exception& e) {
    throw FormatError(metrics_path + ": not a metrics document (" + e.what() + ")");
  }
  std::string csv = "threshold,pck\n";
  for (const auto& p : report.pck) csv += number(p.threshold_mm) + "," + number(p.fraction) + "\n";
  emit(csv_path, csv, out);
  return kExitOk;
}

// ---- gradcheck --------------------------------------------------------------

int cmd_gradcheck(const GradCheckOptions& options, std::ostream& out) {
  const auto results = run_gradient_suite(options);
  bool ok = true;
  out << "operation              instances  max_rel_error  max_abs_error  status\n";
  for (const auto& r : results) {
    std::string name = r.name;
    name.resize(std::max<std::size_t>(name.size() + 1, 23), ' ');
    char line[128];
    std::snprintf(line, sizeof line, "%9zu  %13.3e  %13.3e  %s", r.instances, r.max_rel_error, r.max_abs_error,
                  r.passed() && r.instances >= options.instances ? "ok" : "FAIL");
    out << name << line << "\n";
    ok = ok && r.passed() && r.instances >= options.instances;
  }
  return ok ? kExitOk : kExitDomain;
}

}  // namespace

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Grouped 2.5D hand pose estimation on synthetic data", "grouppose"};
  app.require_subcommand(1);

  GenArgs gen;
  auto* gen_cmd = app.add_subcommand("gen", "Generate a synthetic dataset file");
  gen_cmd->add_option("--out", gen.out, "Output dataset path")->required();
  gen_cmd->add_option("--samples", gen.samples, "Number of samples")->check(CLI::PositiveNumber)->capture_default_str();
  gen_cmd->add_option("--seed", gen.seed, "Generator seed")->capture_default_str();
  gen_cmd->add_option("--side", gen.side, "Image side in pixels")->check(CLI::Range(8, 4096))->capture_default_str();
  gen_cmd->add_flag("--groups-planted,!--no-groups-planted", gen.planted,
                    "Drive each planted group by one shared curl latent (default on)");

  TrainArgs tr;
  auto* train_cmd = app.add_subcommand("train", "Train a model and write a checkpoint");
  train_cmd->add_option("--data", tr.data, "Training dataset")->required();
  train_cmd->add_option("--out", tr.out, "Output checkpoint path")->required();
  train_cmd->add_option("--trace", tr.trace, "Loss trace CSV (step,loss)");
  train_cmd->add_option("--config", tr.config, "JSON config with optional \"model\" and \"train\" sections");
  train_cmd->add_option("--k", tr.k, "Number of joint groups")->check(CLI::PositiveNumber);
  train_cmd->add_option("--steps", tr.steps, "Optimization steps")->check(CLI::PositiveNumber);
  train_cmd->add_option("--batch", tr.batch, "Batch size")->check(CLI::PositiveNumber);
  train_cmd->add_option("--beta", tr.beta, "Depth weight of the loss")->check(CLI::PositiveNumber);
  train_cmd->add_option("--lr-selector", tr.lr_selector, "Selector learning rate")->check(CLI::NonNegativeNumber);
  train_cmd->add_option("--lr-fusion", tr.lr_fusion, "Fusion learning rate")->check(CLI::NonNegativeNumber);
  train_cmd->add_option("--lr-backbone", tr.lr_backbone, "Backbone learning rate")->check(CLI::NonNegativeNumber);
  train_cmd->add_option("--seed", tr.seed, "Initialization and training seed (default 0)");

  EvalArgs ev;
  auto* eval_cmd = app.add_subcommand("eval", "Evaluate a checkpoint on a dataset");
  eval_cmd->add_option("--model", ev.model, "Checkpoint path")->required();
  eval_cmd->add_option("--data", ev.data, "Dataset path")->required();
  eval_cmd->add_option("--thresholds", ev.thresholds, "PCK thresholds in mm: lo:hi:step or a comma list")
      ->capture_default_str();
  eval_cmd->add_flag("--align", ev.align, "Procrustes-align predictions before measuring errors");
  eval_cmd->add_option("--out", ev.out, "Metrics JSON path (default: standard output)");

  std::string groups_model;
  bool groups_json = false;
  auto* groups_cmd = app.add_subcommand("groups", "Print the learned joint grouping");
  groups_cmd->add_option("--model", groups_model, "Checkpoint path")->required();
  groups_cmd->add_flag("--json", groups_json, "Machine-readable output");

  std::string pck_metrics, pck_csv;
  auto* pck_cmd = app.add_subcommand("plot-pck", "Export the PCK curve of a metrics document as CSV");
  pck_cmd->add_option("--metrics", pck_metrics, "Metrics JSON from eval")->required();
  pck_cmd->add_option("--out-csv", pck_csv, "Output CSV path (default: standard output)");

  GradCheckOptions gc;
  auto* gc_cmd = app.add_subcommand("gradcheck", "Compare reverse-mode gradients with finite differences");
  gc_cmd->add_option("--seed", gc.seed, "Seed for the random instances")->capture_default_str();
  gc_cmd->add_option("--instances", gc.instances, "Instances per operation")->check(CLI::PositiveNumber)
      ->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e, out, err) == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (gen_cmd->parsed()) return cmd_gen(gen, out);
    if (train_cmd->parsed()) return cmd_train(tr, out, err);
    if (eval_cmd->parsed()) return cmd_eval(ev, out);
    if (groups_cmd->parsed()) return cmd_groups(groups_model, groups_json, out);
    if (pck_cmd->parsed()) return cmd_plot_pck(pck_metrics, pck_csv, out);
    if (gc_cmd->parsed()) return cmd_gradcheck(gc, out);
  } catch (const UsageError& e) {
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitDomain;
  }
  return kExitUsage;
}

}  // namespace grouppose::cli
