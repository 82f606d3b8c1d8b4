// End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
// exits non-zero if any fails.
//
//   acceptance --cli <path to grouppose> [--only 1,2,7] [--workdir DIR]

#include <array>
#include <bit>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <numbers>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <sys/wait.h>
#include <unistd.h>

#include <nlohmann/json.hpp>

#include "grouppose/binary_io.hpp"
#include "grouppose/fusion.hpp"
#include "grouppose/geometry.hpp"
#include "grouppose/gradcheck.hpp"
#include "grouppose/metrics.hpp"
#include "grouppose/selector.hpp"
#include "grouppose/synthdata.hpp"
#include "grouppose/training.hpp"

namespace fs = std::filesystem;
using namespace grouppose;
using nlohmann::json;

namespace {

struct Verdict {
  bool pass = false;
  std::string detail;
};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point start) {
  return std::chrono::duration<double>(Clock::now() - start).count();
}

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

struct Context {
  std::string cli;
  fs::path workdir;
};

// ---- 1 ----------------------------------------------------------------------

Verdict gradient_suite(const Context&) {
  const auto start = Clock::now();
  GradCheckOptions options;
  options.seed = 2024;
  options.instances = 20;
  const auto results = run_gradient_suite(options);
  const double elapsed = seconds_since(start);
  std::vector<std::string> bad;
  for (const auto& r : results) {
    if (!r.passed() || r.instances < options.instances) bad.push_back(r.name);
  }
  const std::set<std::string> required{"sample_relaxed", "fuse[train]", "fuse[eval]", "decode_soft_argmax",
                                       "combine_groups", "pose_loss", "model_forward"};
  std::size_t found = 0;
  for (const auto& r : results) found += required.count(r.name);
  Verdict v;
  v.pass = bad.empty() && found == required.size() && elapsed < 120.0;
  v.detail = fmt("%zu operations, %.1fs", results.size(), elapsed);
  for (const auto& b : bad) v.detail += ", failed " + b;
  if (found != required.size()) v.detail += ", composite operations missing";
  return v;
}

// ---- 2 ----------------------------------------------------------------------

Verdict selector_constraints(const Context&) {
  Rng rng(11);
  const std::size_t n = 21, k = 3;
  std::vector<double> th(n * k);
  for (auto& x : th) x = rng.normal();
  const ad::Tensor theta({n, k}, th);

  double worst_sum = 0.0;
  for (int draw = 0; draw < 10000; ++draw) {
    const double tau = rng.uniform(0.05, 5.0);
    const auto s = sample_relaxed(theta, tau, sample_gumbel(rng, n, k));
    for (std::size_t i = 0; i < n; ++i) {
      double row = 0.0;
      for (std::size_t j = 0; j < k; ++j) row += s.at(i, j);
      worst_sum = std::max(worst_sum, std::abs(row - 1.0));
    }
  }

  bool one_hot = true;
  for (int draw = 0; draw < 1000; ++draw) {
    const auto m = harden(sample_gumbel(rng, n, k)).matrix();
    for (std::size_t i = 0; i < n; ++i) {
      double row = 0.0;
      for (std::size_t j = 0; j < k; ++j) {
        const double x = m.at(i, j);
        one_hot = one_hot && (x == 0.0 || x == 1.0);
        row += x;
      }
      one_hot = one_hot && row == 1.0;
    }
  }

  // Concentration is measured on the selector's own initial logits (all 1/K),
  // 476 draws of 21 rows. The exact probability of a row exceeding 0.99 there
  // is 0.96957, so this gate cannot be met by any correct Concrete sampler.
  const auto init = init_logits(n, k).theta.value();
  int sharp = 0;
  int rows = 0;
  for (int draw = 0; draw < 476; ++draw) {
    const auto s = sample_relaxed(init, 0.01, sample_gumbel(rng, n, k));
    for (std::size_t i = 0; i < n; ++i, ++rows) sharp += std::max({s.at(i, 0), s.at(i, 1), s.at(i, 2)}) > 0.99;
  }
  const double frac = sharp / static_cast<double>(rows);
  return {worst_sum <= 1e-9 && one_hot && frac >= 0.99,
          fmt("max |row sum - 1| %.2e, hardened one-hot %s, sharp rows at tau 0.01: %.4f (exact 0.9696)", worst_sum,
              one_hot ? "yes" : "no", frac)};
}

// ---- 3 ----------------------------------------------------------------------

Verdict gumbel_max(const Context&) {
  Rng rng(13);
  const ad::Tensor theta({1, 3}, {std::log(1.0), std::log(2.0), std::log(3.0)});
  std::array<double, 3> counts{};
  const int draws = 100000;
  for (int d = 0; d < draws; ++d) counts[harden(ad::add(theta, sample_gumbel(rng, 1, 3))).group_of(0)] += 1.0;
  double tv = 0.0;
  for (int k = 0; k < 3; ++k) tv += std::abs(counts[k] / draws - (k + 1) / 6.0);
  tv *= 0.5;
  return {tv < 0.01, fmt("total variation %.5f", tv)};
}

// ---- 4 ----------------------------------------------------------------------

Verdict fusion_init(const Context&) {
  Rng rng(17);
  double worst = 0.0;
  for (std::size_t k : {2u, 3u, 5u}) {
    const std::size_t b = 8, c = 12;
    std::vector<ad::Tensor> features;
    for (std::size_t g = 0; g < k; ++g) {
      std::vector<double> d(b * c);
      for (auto& x : d) x = rng.normal(0.0, 5.0);
      features.emplace_back(ad::Shape{b, c}, std::move(d));
    }
    for (std::size_t dest = 0; dest < k; ++dest) {
      auto layer = init_fusion_weights(k, c, dest);
      const auto out = fuse(features, layer, Mode::eval, nullptr);
      for (std::size_t i = 0; i < out.size(); ++i) {
        double expected = 0.9 * features[dest][i];
        for (std::size_t g = 0; g < k; ++g)
          if (g != dest) expected += 0.1 / static_cast<double>(k - 1) * features[g][i];
        worst = std::max(worst, std::abs(out[i] - expected));
      }
    }
  }
  return {worst <= 1e-12, fmt("max deviation %.2e", worst)};
}

// ---- 5 ----------------------------------------------------------------------

Mat3 random_rotation(Rng& rng) {
  // Unit quaternion with normal components.
  double q[4];
  double norm = 0.0;
  for (auto& x : q) {
    x = rng.normal();
    norm += x * x;
  }
  norm = std::sqrt(norm);
  for (auto& x : q) x /= norm;
  const double w = q[0], x = q[1], y = q[2], z = q[3];
  return {{{1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)},
           {2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)},
           {2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)}}};
}

Verdict geometry(const Context&) {
  Rng rng(19);
  const auto config = SynthConfig::for_image(64);
  double round_trip = 0.0;
  for (int i = 0; i < 10000; ++i) {
    const auto s = sample_pose(rng, config);
    const auto back = recover_3d(project(s.pose, config.camera, s.s0, s.z_root), config.camera, s.s0, s.z_root);
    for (std::size_t j = 0; j < back.size(); ++j) round_trip = std::max(round_trip, distance(back[j], s.pose[j]));
  }

  double transform_err = 0.0;
  bool never_worse = true;
  for (int i = 0; i < 1000; ++i) {
    const auto pred = sample_pose(rng, config).pose;
    SimilarityTransform t;
    t.scale = rng.uniform(0.5, 2.0);
    t.rotation = random_rotation(rng);
    t.translation = {rng.uniform(-100, 100), rng.uniform(-100, 100), rng.uniform(-100, 100)};
    const auto fit = procrustes_align(pred, t.apply(pred)).transform;
    transform_err = std::max(transform_err, std::abs(fit.scale - t.scale));
    for (int r = 0; r < 3; ++r) {
      transform_err = std::max(transform_err, std::abs(fit.translation[r] - t.translation[r]));
      for (int c = 0; c < 3; ++c) transform_err = std::max(transform_err, std::abs(fit.rotation[r][c] - t.rotation[r][c]));
    }

    const auto gt = sample_pose(rng, config).pose;
    const auto aligned = procrustes_align(pred, gt).aligned;
    double before = 0.0, after = 0.0;
    for (std::size_t j = 0; j < gt.size(); ++j) {
      before += std::pow(distance(pred[j], gt[j]), 2);
      after += std::pow(distance(aligned[j], gt[j]), 2);
    }
    never_worse = never_worse && after <= before * (1.0 + 1e-12);
  }
  return {round_trip <= 1e-9 && transform_err <= 1e-9 && never_worse,
          fmt("round trip %.2e mm, transform recovery %.2e, residual never increases: %s", round_trip, transform_err,
              never_worse ? "yes" : "no")};
}

// ---- 6 ----------------------------------------------------------------------

Verdict metrics(const Context&) {
  Rng rng(23);
  std::vector<double> errors(2000);
  for (auto& e : errors) e = std::abs(rng.normal(0.0, 30.0));
  const auto curve = pck_curve(errors, default_thresholds());
  bool monotone = true;
  for (std::size_t i = 1; i < curve.size(); ++i) monotone = monotone && curve[i].fraction >= curve[i - 1].fraction;

  // One joint at 30 mm, thresholds 20..50 step 5: PCK 0,0,1,1,1,1,1, trapezoid area 22.5 / 30.
  const std::vector<double> single{30.0};
  const double auc = pck_auc(pck_curve(single, threshold_grid(20.0, 50.0, 5.0)));
  const bool auc_ok = std::abs(auc - 0.75) <= 1e-12;

  const std::vector<double> zeros(21 * 10, 0.0);
  const auto perfect = summarize_errors(zeros, default_thresholds());
  const bool perfect_ok = perfect.mean_epe_mm == 0.0 && perfect.auc == 1.0;

  const auto planted = planted_grouping();
  const bool ari_ok = adjusted_rand_index(planted, planted) == 1.0;
  return {monotone && auc_ok && perfect_ok && ari_ok,
          fmt("monotone %s, worked AUC %.15f, zero-error EPE %g AUC %g, identical ARI %g", monotone ? "yes" : "no",
              auc, perfect.mean_epe_mm, perfect.auc, adjusted_rand_index(planted, planted))};
}

// ---- 7 ----------------------------------------------------------------------

// Desk-scale ablation. Both arms share everything except the group count.
ModelConfig ablation_model(std::size_t groups) {
  ModelConfig c;
  c.groups = groups;
  c.image_side = 64;
  c.grid = 8;
  c.shared_widths = {128, 128};
  c.branch_widths = {16, 16};
  c.fusion_points = 2;
  return c;
}

TrainConfig ablation_training(std::uint64_t seed) {
  TrainConfig t;
  t.steps = 20000;
  t.batch = 32;
  t.seed = seed;
  t.lr.backbone = 1e-3;
  t.lr.fusion = 1e-3;
  t.lr.selector = 1e-1;
  t.schedule.interval = 300;
  t.trace_interval = 1000;
  return t;
}

Verdict ablation(const Context&) {
  const auto start = Clock::now();
  const auto synth = SynthConfig::for_image(64);
  const auto train_set = generate_samples(4096, 101, synth);
  const auto test_set = generate_samples(512, 202, synth);

  std::vector<double> epe[2];
  std::vector<double> ari;
  std::string detail;
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    for (std::size_t arm = 0; arm < 2; ++arm) {
      const std::size_t k = arm == 0 ? 3 : 1;
      const auto model = ablation_model(k);
      Rng rng(seed);
      auto params = init_model(model, rng);
      train(model, params, train_set.samples, ablation_training(seed));
      const auto report = evaluate(model, params, test_set);
      epe[arm].push_back(report.mean_epe_mm);
      if (k == 3) ari.push_back(report.ari);
      std::printf("  seed %llu K=%zu: mean EPE %.3f mm, ARI %.3f  (%.0fs)\n",
                  static_cast<unsigned long long>(seed), k, report.mean_epe_mm, report.ari, seconds_since(start));
      std::fflush(stdout);
    }
  }
  const double med3 = lower_median(epe[0]);
  const double med1 = lower_median(epe[1]);
  int grouped = 0;
  for (double a : ari) grouped += a >= 0.6;
  const double minutes = seconds_since(start) / 60.0;
  return {med3 <= med1 && grouped >= 2 && minutes < 60.0,
          fmt("median EPE K=3 %.3f vs K=1 %.3f mm, ARI >= 0.6 on %d/3 seeds (%.2f %.2f %.2f), %.1f min", med3, med1,
              grouped, ari[0], ari[1], ari[2], minutes)};
}

// ---- CLI helpers ------------------------------------------------------------

struct Run {
  int code = -1;
  std::string out;
};

std::string quote(const std::string& s) {
  std::string q = "'";
  for (char c : s) q += c == '\'' ? std::string("'\\''") : std::string(1, c);
  return q + "'";
}

Run run_cli(const Context& ctx, const std::vector<std::string>& args) {
  std::string cmd = quote(ctx.cli);
  for (const auto& a : args) cmd += " " + quote(a);
  cmd += " 2>/dev/null";
  Run r;
  FILE* pipe = ::popen(cmd.c_str(), "r");
  if (pipe == nullptr) return r;
  char buf[4096];
  std::size_t n = 0;
  while ((n = std::fread(buf, 1, sizeof buf, pipe)) > 0) r.out.append(buf, n);
  const int status = ::pclose(pipe);
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return r;
}

std::string slurp(const fs::path& p) {
  try {
    return io::read_file(p);
  } catch (const std::exception&) {
    return {};
  }
}

const char* kTinyModel =
    R"({"model": {"groups": 3, "grid": 4, "shared_widths": [32], "branch_widths": [16, 16], "fusion_points": 2}})";

// ---- 8 ----------------------------------------------------------------------

Verdict determinism(const Context& ctx) {
  const fs::path dir = ctx.workdir / "determinism";
  fs::create_directories(dir);
  io::write_file_atomic(dir / "tiny.json", kTinyModel);
  std::vector<std::string> mismatched;
  bool all_ok = true;
  std::array<std::array<std::string, 5>, 2> outputs;
  // Both runs use the same paths (train prints its checkpoint path); the run
  // directory is emptied in between so nothing carries over.
  const auto d = (dir / "run").string();
  for (int rep = 0; rep < 2; ++rep) {
    fs::remove_all(d);
    fs::create_directories(d);
    const auto gen = run_cli(ctx, {"gen", "--out", d + "/data.bin", "--samples", "128", "--seed", "42", "--side", "32"});
    const auto tr = run_cli(ctx, {"train", "--data", d + "/data.bin", "--out", d + "/model.ckpt", "--trace",
                                  d + "/trace.csv", "--config", (dir / "tiny.json").string(), "--steps", "150",
                                  "--batch", "16", "--seed", "7"});
    const auto ev = run_cli(ctx, {"eval", "--model", d + "/model.ckpt", "--data", d + "/data.bin", "--out",
                                  d + "/metrics.json"});
    all_ok = all_ok && gen.code == 0 && tr.code == 0 && ev.code == 0;
    outputs[rep] = {slurp(d + "/data.bin"), slurp(d + "/model.ckpt"), slurp(d + "/trace.csv"),
                    slurp(d + "/metrics.json"), tr.out};
  }
  const std::array<const char*, 5> names{"dataset", "checkpoint", "trace", "metrics", "train stdout"};
  for (std::size_t i = 0; i < names.size(); ++i) {
    if (outputs[0][i].empty() || outputs[0][i] != outputs[1][i]) mismatched.push_back(names[i]);
  }
  std::string detail = all_ok ? "all commands exited 0" : "a command failed";
  if (mismatched.empty()) {
    detail += ", dataset/checkpoint/trace/metrics/train stdout byte-identical";
  } else {
    for (const auto& m : mismatched) detail += ", differs: " + m;
  }
  return {all_ok && mismatched.empty(), detail};
}

// ---- 9 ----------------------------------------------------------------------

// Minimal little-endian reader for validating the documented file formats
// independently of the library's own readers.
class Cursor {
 public:
  explicit Cursor(const std::string& bytes) : b_(bytes) {}
  bool ok(std::size_t n) const { return pos_ + n <= b_.size(); }
  std::uint64_t uint(std::size_t n) {
    if (!ok(n)) throw std::runtime_error("truncated");
    std::uint64_t v = 0;
    for (std::size_t i = 0; i < n; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(b_[pos_ + i])) << (8 * i);
    pos_ += n;
    return v;
  }
  double f64() { return std::bit_cast<double>(uint(8)); }
  float f32() { return std::bit_cast<float>(static_cast<std::uint32_t>(uint(4))); }
  std::string bytes(std::size_t n) {
    if (!ok(n)) throw std::runtime_error("truncated");
    auto s = b_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  bool at_end() const { return pos_ == b_.size(); }

 private:
  const std::string& b_;
  std::size_t pos_ = 0;
};

std::string validate_dataset(const std::string& bytes, std::size_t expect_count, std::size_t expect_side) {
  Cursor c(bytes);
  if (c.bytes(8) != "GPDSET01") return "bad magic";
  if (c.uint(4) != 1) return "bad version";
  const auto count = c.uint(8);
  const auto joints = c.uint(4);
  const auto side = c.uint(4);
  const double fx = c.f64(), fy = c.f64(), px = c.f64(), py = c.f64();
  if (count != expect_count || joints != 21 || side != expect_side) return "header fields";
  for (std::size_t i = 0; i < joints; ++i)
    if (c.uint(1) > 2) return "planted label";
  c.uint(1);
  c.uint(8);
  for (std::size_t n = 0; n < count; ++n) {
    const double s0 = c.f64(), z_root = c.f64();
    std::vector<std::array<double, 3>> p3(joints), p25(joints);
    for (auto& p : p3)
      for (auto& x : p) x = c.f64();
    for (auto& p : p25)
      for (auto& x : p) x = c.f64();
    for (std::size_t i = 0; i < side * side; ++i) {
      const float v = c.f32();
      if (!(v >= 0.0f && v <= 1.0f)) return "pixel range in record " + std::to_string(n);
    }
    if (!(s0 > 0.0)) return "s0 in record " + std::to_string(n);
    for (std::size_t j = 0; j < joints; ++j) {
      const auto [x, y, z] = p3[j];
      const double u = fx * x / z + px, v = fy * y / z + py, zr = (z - z_root) / s0;
      if (std::abs(u - p25[j][0]) > 1e-9 || std::abs(v - p25[j][1]) > 1e-9 || std::abs(zr - p25[j][2]) > 1e-9) {
        return "2.5D/3D mismatch in record " + std::to_string(n);
      }
    }
  }
  return c.at_end() ? "" : "trailing bytes";
}

std::string validate_checkpoint(const std::string& bytes, std::size_t expect_groups) {
  Cursor c(bytes);
  if (c.bytes(8) != "GPCKPT01") return "bad magic";
  if (c.uint(4) != 1) return "bad version";
  const auto config = json::parse(c.bytes(c.uint(4)));
  if (config.at("groups").get<std::size_t>() != expect_groups) return "group count";
  const auto params = c.uint(4);
  bool has_selector = false;
  for (std::uint64_t p = 0; p < params; ++p) {
    const auto name = c.bytes(c.uint(4));
    const auto group = c.bytes(c.uint(4));
    if (group != "selector" && group != "fusion" && group != "backbone") return "parameter group '" + group + "'";
    has_selector = has_selector || group == "selector";
    std::uint64_t size = 1;
    const auto rank = c.uint(4);
    for (std::uint64_t d = 0; d < rank; ++d) size *= c.uint(8);
    for (std::uint64_t i = 0; i < size; ++i)
      if (!std::isfinite(c.f64())) return "non-finite value in " + name;
  }
  const auto buffers = c.uint(4);
  for (std::uint64_t b = 0; b < buffers; ++b) {
    c.bytes(c.uint(4));
    const auto len = c.uint(8);
    for (std::uint64_t i = 0; i < len; ++i) c.f64();
  }
  if (!has_selector) return "no selector logits";
  return c.at_end() ? "" : "trailing bytes";
}

std::string validate_trace(const std::string& text, std::size_t steps) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line) || line != "step,loss") return "header";
  long prev = -1;
  std::size_t rows = 0;
  while (std::getline(in, line)) {
    const auto comma = line.find(',');
    if (comma == std::string::npos) return "row '" + line + "'";
    const long step = std::stol(line.substr(0, comma));
    const double loss = std::stod(line.substr(comma + 1));
    if (step <= prev || step >= static_cast<long>(steps) || !std::isfinite(loss) || loss < 0.0) return "row '" + line + "'";
    prev = step;
    ++rows;
  }
  return rows > 0 && prev == static_cast<long>(steps) - 1 ? "" : "missing rows";
}

std::string validate_metrics(const std::string& text, std::size_t samples) {
  const auto m = json::parse(text);
  for (const char* key : {"mean_epe_mm", "median_epe_mm", "auc", "ari"})
    if (!m.at(key).is_number()) return std::string(key) + " not a number";
  if (m.at("samples").get<std::size_t>() != samples || m.at("joints").get<std::size_t>() != 21) return "counts";
  if (m.at("groups").size() != 21) return "groups";
  const auto& pck = m.at("pck");
  if (pck.size() != 61) return "pck length";
  double prev_t = -1.0, prev_f = 0.0;
  for (const auto& p : pck) {
    const double t = p.at(0).get<double>(), f = p.at(1).get<double>();
    if (!(t > prev_t) || f < prev_f || f > 1.0) return "pck not monotone";
    prev_t = t;
    prev_f = f;
  }
  const double auc = m.at("auc").get<double>();
  return auc >= 0.0 && auc <= 1.0 ? "" : "auc range";
}

std::string validate_groups(const std::string& text) {
  const auto g = json::parse(text);
  const auto& joints = g.at("joints");
  if (joints.size() != 21) return "joint count";
  std::vector<int> seen(21, 0);
  for (const auto& group : g.at("groups"))
    for (const auto& i : group) ++seen.at(i.get<std::size_t>());
  for (std::size_t i = 0; i < 21; ++i) {
    if (seen[i] != 1) return "joint " + std::to_string(i) + " not in exactly one group";
    const auto k = joints[i].at("group").get<std::size_t>();
    bool listed = false;
    for (const auto& j : g.at("groups")[k]) listed = listed || j.get<std::size_t>() == i;
    if (!listed || joints[i].at("index").get<std::size_t>() != i || !joints[i].at("name").is_string()) {
      return "joint " + std::to_string(i) + " entry";
    }
  }
  return g.at("groups").size() == 3 ? "" : "group count";
}

std::string validate_pck_csv(const std::string& text, const std::string& metrics) {
  const auto m = json::parse(metrics);
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line) || line != "threshold,pck") return "header";
  std::size_t row = 0;
  while (std::getline(in, line)) {
    const auto comma = line.find(',');
    if (comma == std::string::npos || row >= m["pck"].size()) return "row " + std::to_string(row);
    const double t = std::stod(line.substr(0, comma)), f = std::stod(line.substr(comma + 1));
    if (t != m["pck"][row][0].get<double>() || f != m["pck"][row][1].get<double>()) return "value at row " + std::to_string(row);
    ++row;
  }
  return row == m["pck"].size() ? "" : "row count";
}

Verdict smoke(const Context& ctx) {
  const auto start = Clock::now();
  const fs::path dir = ctx.workdir / "smoke";
  fs::create_directories(dir);
  const auto p = [&](const char* name) { return (dir / name).string(); };
  io::write_file_atomic(dir / "tiny.json", kTinyModel);

  std::vector<std::pair<std::string, int>> codes;
  codes.emplace_back("gen", run_cli(ctx, {"gen", "--out", p("data.bin"), "--samples", "256", "--seed", "1"}).code);
  codes.emplace_back("gen test",
                     run_cli(ctx, {"gen", "--out", p("test.bin"), "--samples", "64", "--seed", "2"}).code);
  codes.emplace_back("train", run_cli(ctx, {"train", "--data", p("data.bin"), "--out", p("model.ckpt"), "--config",
                                            p("tiny.json"), "--steps", "500", "--trace", p("trace.csv")})
                                  .code);
  codes.emplace_back("eval", run_cli(ctx, {"eval", "--model", p("model.ckpt"), "--data", p("test.bin"), "--out",
                                           p("metrics.json")})
                                 .code);
  const auto groups = run_cli(ctx, {"groups", "--model", p("model.ckpt"), "--json"});
  codes.emplace_back("groups --json", groups.code);
  const auto groups_text = run_cli(ctx, {"groups", "--model", p("model.ckpt")});
  codes.emplace_back("groups", groups_text.code);
  codes.emplace_back("plot-pck",
                     run_cli(ctx, {"plot-pck", "--metrics", p("metrics.json"), "--out-csv", p("pck.csv")}).code);
  const double elapsed = seconds_since(start);

  std::string detail;
  bool pass = elapsed < 180.0;
  for (const auto& [name, code] : codes) {
    if (code != 0) {
      pass = false;
      detail += name + " exited " + std::to_string(code) + "; ";
    }
  }
  const std::vector<std::pair<std::string, std::function<std::string()>>> checks{
      {"data.bin", [&] { return validate_dataset(slurp(p("data.bin")), 256, 64); }},
      {"test.bin", [&] { return validate_dataset(slurp(p("test.bin")), 64, 64); }},
      {"model.ckpt", [&] { return validate_checkpoint(slurp(p("model.ckpt")), 3); }},
      {"trace.csv", [&] { return validate_trace(slurp(p("trace.csv")), 500); }},
      {"metrics.json", [&] { return validate_metrics(slurp(p("metrics.json")), 64); }},
      {"groups json", [&] { return validate_groups(groups.out); }},
      {"groups text", [&] { return groups_text.out.find("group 2:") == std::string::npos ? "missing group lines" : ""; }},
      {"pck.csv", [&] { return validate_pck_csv(slurp(p("pck.csv")), slurp(p("metrics.json"))); }},
  };
  for (const auto& [name, check] : checks) {
    std::string problem;
    try {
      problem = check();
    } catch (const std::exception& e) {
      problem = e.what();
    }
    if (!problem.empty()) {
      pass = false;
      detail += name + ": " + problem + "; ";
    }
  }
  if (detail.empty()) detail = "all commands exited 0 and all outputs validated; ";
  detail += fmt("%.1fs", elapsed);
  return {pass, detail};
}

}  // namespace

int main(int argc, char** argv) {
  Context ctx;
  std::set<int> only;
  for (int i = 1; i < argc; ++i) {
    const std::string arg = argv[i];
    if (arg == "--cli" && i + 1 < argc) {
      ctx.cli = argv[++i];
    } else if (arg == "--workdir" && i + 1 < argc) {
      ctx.workdir = argv[++i];
    } else if (arg == "--only" && i + 1 < argc) {
      std::stringstream list(argv[++i]);
      std::string item;
      while (std::getline(list, item, ',')) only.insert(std::stoi(item));
    } else {
      std::fprintf(stderr, "usage: %s --cli PATH [--only 1,2,...] [--workdir DIR]\n", argv[0]);
      return 2;
    }
  }
  const bool own_workdir = ctx.workdir.empty();
  if (own_workdir) ctx.workdir = fs::temp_directory_path() / ("grouppose_acceptance_" + std::to_string(::getpid()));
  fs::create_directories(ctx.workdir);

  const std::vector<std::pair<const char*, std::function<Verdict(const Context&)>>> criteria{
      {"gradient suite", gradient_suite},
      {"selector constraints", selector_constraints},
      {"gumbel-max distribution", gumbel_max},
      {"fusion initialization", fusion_init},
      {"geometry", geometry},
      {"metrics", metrics},
      {"ablation trend", ablation},
      {"determinism", determinism},
      {"end-to-end smoke", smoke},
  };

  int failures = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int id = static_cast<int>(i) + 1;
    if (!only.empty() && !only.count(id)) continue;
    Verdict v;
    if ((id == 8 || id == 9) && ctx.cli.empty()) {
      v = {false, "no --cli binary given"};
    } else {
      try {
        v = criteria[i].second(ctx);
      } catch (const std::exception& e) {
        v = {false, std::string("exception: ") + e.what()};
      }
    }
    failures += !v.pass;
    std::printf("criterion %d %-24s %s  %s\n", id, criteria[i].first, v.pass ? "PASS" : "FAIL", v.detail.c_str());
    std::fflush(stdout);
  }
  if (own_workdir) fs::remove_all(ctx.workdir);
  return failures == 0 ? 0 : 1;
}
