// Copyright 2026 The FPQ Toolkit Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//      http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include "cli.h"

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "fpq/adaround.h"
#include "fpq/analysis.h"
#include "fpq/errors.h"
#include "fpq/fp_format.h"
#include "fpq/quantized_io.h"
#include "fpq/quantizers.h"
#include "fpq/tensor_io.h"
#include "fpq/toy_dit.h"

namespace fpq::cli {
namespace {

namespace fs = std::filesystem;
using nlohmann::json;
using nlohmann::ordered_json;

struct Globals {
  std::uint64_t seed = 0;
  std::string out;
  std::string config;
};

std::vector<std::string> SplitList(const std::string& text) {
  std::vector<std::string> items;
  std::string item;
  std::istringstream is(text);
  while (std::getline(is, item, ',')) {
    if (!item.empty()) items.push_back(item);
  }
  return items;
}

std::optional<FpFormat> ParseOptionalFormat(const std::string& text) {
  if (text.empty() || text == "none") return std::nullopt;
  return FpFormat::Parse(text);
}

// Writes to the --out file, or to `out` when no file was given.
void Emit(const Globals& g, const std::string& text, std::ostream& out) {
  if (g.out.empty() || g.out == "-") {
    out << text;
    return;
  }
  if (fs::path(g.out).has_parent_path()) fs::create_directories(fs::path(g.out).parent_path());
  std::ofstream f(g.out, std::ios::binary);
  if (!f) throw ConfigError("cannot write " + g.out);
  f << text;
}

void WriteText(const fs::path& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw ConfigError("cannot write " + path.string());
  f << text;
}

fs::path RequireOutDir(const Globals& g, const char* command) {
  if (g.out.empty()) throw ConfigError(std::string(command) + " needs --out <dir>");
  fs::create_directories(g.out);
  return g.out;
}

// Keys accepted in a --config file.
struct FileConfig {
  std::optional<std::string> fmt;
  std::optional<std::string> ff1_fmt;
  std::optional<std::string> afmt;
  std::optional<std::string> variant;
  std::optional<int> iters;
  std::optional<double> lr;
  std::optional<double> lambda;
  std::optional<double> beta_start;
  std::optional<double> beta_end;
  std::optional<double> warmup;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> group_size;
};

template <typename T>
void ReadKey(const json& j, const char* key, std::optional<T>& dst) {
  if (!j.contains(key)) return;
  try {
    dst = j.at(key).get<T>();
  } catch (const json::exception&) {
    throw ConfigError(std::string("config key '") + key + "' has the wrong type");
  }
}

FileConfig LoadFileConfig(const std::string& path) {
  FileConfig c;
  if (path.empty()) return c;
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config " + path);
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError("config " + path + ": " + e.what());
  }
  if (!j.is_object()) throw ConfigError("config " + path + " must hold a JSON object");
  static const char* kKnown[] = {"fmt",  "ff1_fmt",    "afmt",     "variant", "iters", "lr",
                                 "lambda", "beta_start", "beta_end", "warmup",  "seed",  "group_size"};
  for (const auto& [key, _] : j.items()) {
    if (std::find(std::begin(kKnown), std::end(kKnown), key) == std::end(kKnown)) {
      throw ConfigError("unknown config key '" + key + "'");
    }
  }
  ReadKey(j, "fmt", c.fmt);
  ReadKey(j, "ff1_fmt", c.ff1_fmt);
  ReadKey(j, "afmt", c.afmt);
  ReadKey(j, "variant", c.variant);
  ReadKey(j, "iters", c.iters);
  ReadKey(j, "lr", c.lr);
  ReadKey(j, "lambda", c.lambda);
  ReadKey(j, "beta_start", c.beta_start);
  ReadKey(j, "beta_end", c.beta_end);
  ReadKey(j, "warmup", c.warmup);
  ReadKey(j, "seed", c.seed);
  ReadKey(j, "group_size", c.group_size);
  return c;
}

// Explicit flags win over the config file, which wins over defaults.
template <typename T, typename U>
void Merge(T& dst, const CLI::Option* flag, const std::optional<U>& from_file) {
  if (flag && flag->count() > 0) return;
  if (from_file) dst = static_cast<T>(*from_file);
}

// Calibration options shared by `calibrate` and `sweep`.
struct CalibFlags {
  std::string variant = "scale-aware";
  int iters = 2500;
  double lr = 1e-2;
  double lambda = 0.01;
  double beta_start = 20.0;
  double beta_end = 2.0;
  double warmup = 0.2;
  CLI::Option* variant_opt = nullptr;
  CLI::Option* iters_opt = nullptr;
  CLI::Option* lr_opt = nullptr;
  CLI::Option* lambda_opt = nullptr;
  CLI::Option* beta_start_opt = nullptr;
  CLI::Option* beta_end_opt = nullptr;
  CLI::Option* warmup_opt = nullptr;

  void Add(CLI::App* app, bool with_variant) {
    if (with_variant) variant_opt = app->add_option("--variant", variant, "original | scale-aware");
    iters_opt = app->add_option("--iters", iters, "Gradient-descent iterations");
    lr_opt = app->add_option("--lr", lr, "Learning rate");
    lambda_opt = app->add_option("--lambda", lambda, "Rounding regularizer weight");
    beta_start_opt = app->add_option("--beta-start", beta_start, "Initial regularizer exponent");
    beta_end_opt = app->add_option("--beta-end", beta_end, "Final regularizer exponent");
    warmup_opt = app->add_option("--warmup", warmup, "Fraction of iterations without the regularizer");
  }

  CalibrationConfig Build(const FileConfig& file, std::uint64_t seed) {
    Merge(variant, variant_opt, file.variant);
    Merge(iters, iters_opt, file.iters);
    Merge(lr, lr_opt, file.lr);
    Merge(lambda, lambda_opt, file.lambda);
    Merge(beta_start, beta_start_opt, file.beta_start);
    Merge(beta_end, beta_end_opt, file.beta_end);
    Merge(warmup, warmup_opt, file.warmup);
    CalibrationConfig c;
    c.variant = ParseVariant(variant);
    c.iters = iters;
    c.lr = lr;
    c.lambda = lambda;
    c.beta = {beta_start, beta_end, warmup};
    c.seed = seed;
    c.Validate();
    return c;
  }
};

std::uint64_t EffectiveSeed(const Globals& g, const CLI::Option* seed_opt, const FileConfig& file) {
  std::uint64_t seed = g.seed;
  Merge(seed, seed_opt, file.seed);
  return seed;
}

int RunGrid(const Globals& g, const std::string& formats, double maxval, std::ostream& out) {
  if (!(maxval > 0.0)) throw ConfigError("--maxval must be positive");
  std::vector<FpFormat> fmts;
  for (const auto& f : SplitList(formats)) fmts.push_back(FpFormat::Parse(f));
  Emit(g, GridReportCsv(fmts, maxval), out);
  return kExitOk;
}

int RunQuantize(const Globals& g, const std::string& in, const std::string& fmt_text, std::size_t group_size,
                const std::string& dequant, std::ostream& out) {
  if (g.out.empty()) throw ConfigError("quantize needs --out <file>");
  const Tensor w = LoadTensor(in);
  const FpFormat fmt = FpFormat::Parse(fmt_text);
  MinMaxResult r;
  if (group_size == 0) {
    r = FpMinMaxQuantize(w, fmt);
  } else {
    if (w.rank() != 2) throw ConfigError("group quantization needs a 2-D tensor");
    r = GroupQuantize(w, fmt, group_size);
  }
  SaveQuantized(g.out, r.quantized);
  if (!dequant.empty()) SaveTensor(dequant, r.values);
  out << "format " << fmt.name() << " groups " << r.quantized.num_groups() << " mse "
      << FormatNumber(MeanSquaredError(w, r.values)) << '\n';
  return kExitOk;
}

int RunInitModel(const Globals& g, ToyDiTConfig config, const std::string& init) {
  if (init == "heavy") {
    config.init = WeightInit::kHeavyTailed;
  } else if (init == "gaussian") {
    config.init = WeightInit::kGaussian;
  } else {
    throw ConfigError("--init must be heavy or gaussian");
  }
  config.Validate();
  SaveModel(RequireOutDir(g, "init-model"), ToyDiT::Create(config, g.seed));
  return kExitOk;
}

int RunStats(const Globals& g, const std::string& model_dir, std::size_t steps) {
  const fs::path dir = RequireOutDir(g, "stats");
  const ToyDiT model = model_dir.empty() ? ToyDiT::Create({}, g.seed) : LoadModel(model_dir);
  TrajectoryConfig tc;
  tc.steps = steps;
  tc.Validate();
  const auto stats = CollectActivationStats(model, MakeTrajectory(model.config, tc, g.seed));
  WriteText(dir / "box_stats.csv", BoxStatsCsv(stats));
  WriteText(dir / "token_absmax.csv", TokenAbsmaxCsv(stats));
  return kExitOk;
}

int RunCost(const Globals& g, const std::string& manifest_name, const std::string& precisions,
            std::size_t group_size, int scale_bits, std::ostream& out) {
  CostManifest manifest;
  if (manifest_name == "pixart") {
    manifest = PixArtAlphaCostManifest(true);
  } else if (manifest_name == "pixart-all") {
    manifest = PixArtAlphaCostManifest(false);
  } else if (manifest_name == "toy") {
    manifest = ToyDiTCostManifest({});
  } else {
    throw ConfigError("--manifest must be pixart, pixart-all or toy");
  }
  if (scale_bits <= 0) throw ConfigError("--scale-bits must be positive");
  std::vector<std::pair<PrecisionSpec, CostReport>> rows;
  for (const auto& p : SplitList(precisions)) {
    const PrecisionSpec spec = PrecisionSpec::Parse(p);
    rows.emplace_back(spec, ComputeCost(manifest, spec, group_size, scale_bits));
  }
  Emit(g, CostCsv(rows, group_size, scale_bits), out);
  return kExitOk;
}

struct SweepFlags {
  std::string variants = "original,scale-aware";
  std::string budgets = "250,500,1000,2000";
  std::string fmt = "E2M1";
  std::size_t group_size = 16;
  std::size_t jobs = 1;
  CLI::Option* fmt_opt = nullptr;
  CLI::Option* group_opt = nullptr;
};

int RunSweep(const Globals& g, SweepFlags& flags, CalibFlags& calib, const CLI::Option* seed_opt,
             std::ostream& out) {
  const FileConfig file = LoadFileConfig(g.config);
  const std::uint64_t seed = EffectiveSeed(g, seed_opt, file);
  Merge(flags.fmt, flags.fmt_opt, file.fmt);
  Merge(flags.group_size, flags.group_opt, file.group_size);
  SweepConfig sc;
  sc.base = calib.Build(file, seed);
  sc.jobs = flags.jobs;
  sc.variants.clear();
  for (const auto& v : SplitList(flags.variants)) sc.variants.push_back(ParseVariant(v));
  sc.budgets.clear();
  for (const auto& b : SplitList(flags.budgets)) {
    try {
      sc.budgets.push_back(std::stoi(b));
    } catch (const std::exception&) {
      throw ConfigError("bad budget '" + b + "'");
    }
    if (sc.budgets.back() <= 0) throw ConfigError("budgets must be positive");
  }
  const SyntheticLayer layer = MakeSyntheticLayer({}, seed);
  const FpFormat fmt = FpFormat::Parse(flags.fmt);
  const MinMaxResult rtn =
      flags.group_size == 0 ? FpMinMaxQuantize(layer.weight, fmt) : GroupQuantize(layer.weight, fmt, flags.group_size);
  Emit(g, SweepCsv(BudgetSweep(layer.weight, rtn, layer.inputs, sc)), out);
  return kExitOk;
}

struct CalibrateFlags {
  std::string model;
  std::string wfmt = "E2M1";
  std::string ff1_fmt = "E3M0";
  std::string afmt = "E3M4";
  std::size_t group_size = 128;
  std::string mode = "layer";
  std::size_t samples = 16;
  std::size_t eval_samples = 4;
  std::size_t steps = 20;
  CLI::Option* wfmt_opt = nullptr;
  CLI::Option* ff1_opt = nullptr;
  CLI::Option* afmt_opt = nullptr;
  CLI::Option* group_opt = nullptr;
};

int RunCalibrate(const Globals& g, CalibrateFlags& flags, CalibFlags& calib, const CLI::Option* seed_opt,
                 std::ostream& out, std::ostream& err) {
  const FileConfig file = LoadFileConfig(g.config);
  const std::uint64_t seed = EffectiveSeed(g, seed_opt, file);
  Merge(flags.wfmt, flags.wfmt_opt, file.fmt);
  Merge(flags.ff1_fmt, flags.ff1_opt, file.ff1_fmt);
  Merge(flags.afmt, flags.afmt_opt, file.afmt);
  Merge(flags.group_size, flags.group_opt, file.group_size);
  if (flags.model.empty()) throw ConfigError("calibrate needs --model <dir>");
  if (flags.samples == 0 || flags.eval_samples == 0) throw ConfigError("sample counts must be positive");
  const fs::path dir = RequireOutDir(g, "calibrate");

  QuantizeModelConfig qc;
  qc.assignment = FormatAssignment::Unified(FpFormat::Parse(flags.wfmt));
  if (auto f = ParseOptionalFormat(flags.ff1_fmt)) qc.assignment.overrides.insert_or_assign(LayerRole::kFf1, *f);
  qc.act_fmt = ParseOptionalFormat(flags.afmt);
  qc.group_size = flags.group_size;
  qc.adaround = calib.Build(file, seed);
  if (flags.mode == "layer") {
    qc.mode = CalibMode::kLayer;
  } else if (flags.mode == "block") {
    qc.mode = CalibMode::kBlock;
  } else {
    throw ConfigError("--mode must be layer or block");
  }

  const ToyDiT model = LoadModel(flags.model);
  TrajectoryConfig tc;
  tc.steps = flags.steps;
  tc.Validate();
  const CalibrationSet calib_set = BuildCalibrationSet(model, flags.samples, tc, seed);
  CaptureFilter blocks_only;
  blocks_only.capture_layers = false;
  const CalibrationSet eval_set = BuildCalibrationSet(model, flags.eval_samples, tc, seed + 1, blocks_only);

  QuantizeModelConfig rtn_cfg = qc;
  rtn_cfg.calibrate = false;
  const QuantizedModel rtn = QuantizeModel(model, rtn_cfg, nullptr);
  const QuantizedModel q = QuantizeModel(model, qc, &calib_set);

  SaveModel(dir / "model", q.model);
  fs::create_directories(dir / "layers");
  ordered_json layers = ordered_json::array();
  bool diverged = false;
  for (const auto& lq : q.layers) {
    const std::string name = "block" + std::to_string(lq.key.block) + "." + std::string(RoleName(lq.key.role));
    SaveQuantized(dir / "layers" / (name + ".fpqq"), lq.result.quantized);
    ordered_json entry;
    entry["layer"] = name;
    entry["format"] = lq.format.name();
    entry["file"] = "layers/" + name + ".fpqq";
    if (lq.report) {
      entry["report"] = ordered_json::parse(CalibrationReportJson(*lq.report));
      diverged = diverged || lq.report->diverged;
      if (lq.report->diverged) err << name << ": " << lq.report->diagnostic << '\n';
    }
    layers.push_back(std::move(entry));
  }
  ordered_json blocks = ordered_json::array();
  for (const auto& r : q.block_reports) {
    blocks.push_back(ordered_json::parse(CalibrationReportJson(r)));
    diverged = diverged || r.diverged;
    if (r.diverged) err << r.target << ": " << r.diagnostic << '\n';
  }
  ordered_json checks = ordered_json::array();
  for (const auto& c : q.block_checks) {
    checks.push_back({{"block", c.block},
                      {"rtn_loss", c.rtn_loss},
                      {"calibrated_loss", c.calibrated_loss},
                      {"reverted", c.reverted}});
  }
  ordered_json report;
  report["seed"] = seed;
  report["group_size"] = flags.group_size;
  report["act_fmt"] = qc.act_fmt ? qc.act_fmt->name() : "none";
  report["mode"] = flags.mode;
  report["layers"] = std::move(layers);
  report["blocks"] = std::move(blocks);
  report["block_checks"] = std::move(checks);
  WriteText(dir / "report.json", report.dump(2) + "\n");

  const auto mse_rtn = BlockOutputMse(model, rtn, eval_set);
  const auto mse_cal = BlockOutputMse(model, q, eval_set);
  std::ostringstream csv;
  csv << "block,rtn_mse,calibrated_mse\n";
  for (std::size_t b = 0; b < mse_cal.size(); ++b) {
    csv << b << ',' << FormatNumber(mse_rtn[b]) << ',' << FormatNumber(mse_cal[b]) << '\n';
  }
  WriteText(dir / "block_mse.csv", csv.str());
  out << csv.str();
  return diverged ? kExitNumeric : kExitOk;
}

}  // namespace

int Run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Floating-point post-training quantization toolkit"};
  app.require_subcommand(1);
  Globals g;
  auto* seed_opt = app.add_option("--seed", g.seed, "Random seed")->capture_default_str();
  app.add_option("--out", g.out, "Output file or directory");
  app.add_option("--config", g.config, "JSON config file");
  // Global flags may also follow the subcommand name.
  app.fallthrough();

  auto* grid = app.add_subcommand("grid", "Representable values and near-zero density per format");
  std::string grid_formats = "E3M0,E2M1,E1M2,E0M3";
  double grid_maxval = 1.0;
  grid->add_option("--formats", grid_formats, "Comma-separated ExMy list")->capture_default_str();
  grid->add_option("--maxval", grid_maxval, "Clipping value")->capture_default_str();

  auto* quantize = app.add_subcommand("quantize", "Min-max FP quantization of a tensor file");
  std::string q_in, q_fmt = "E2M1", q_dequant;
  std::size_t q_group = 128;
  quantize->add_option("--in", q_in, "Input tensor container")->required();
  quantize->add_option("--fmt", q_fmt, "ExMy format")->capture_default_str();
  quantize->add_option("--group-size", q_group, "Group size along rows, 0 for per tensor")->capture_default_str();
  quantize->add_option("--dequant", q_dequant, "Also write the dequantized tensor here");

  auto* init = app.add_subcommand("init-model", "Write a seeded toy model checkpoint");
  ToyDiTConfig init_cfg;
  std::string init_kind = "heavy";
  init->add_option("--embed-dim", init_cfg.embed_dim)->capture_default_str();
  init->add_option("--heads", init_cfg.num_heads)->capture_default_str();
  init->add_option("--tokens", init_cfg.token_count)->capture_default_str();
  init->add_option("--blocks", init_cfg.num_blocks)->capture_default_str();
  init->add_option("--init", init_kind, "heavy | gaussian")->capture_default_str();

  auto* stats = app.add_subcommand("stats", "Activation statistics over one trajectory");
  std::string stats_model;
  std::size_t stats_steps = 20;
  stats->add_option("--model", stats_model, "Checkpoint directory (default: seeded model)");
  stats->add_option("--steps", stats_steps, "Trajectory steps")->capture_default_str();

  auto* cost = app.add_subcommand("cost", "Model size and bit operations");
  std::string cost_manifest = "pixart", cost_precisions = "W16A16,W8A8,W4A8,W4A6";
  std::size_t cost_group = 0;
  int cost_scale_bits = 16;
  cost->add_option("--manifest", cost_manifest, "pixart | pixart-all | toy")->capture_default_str();
  cost->add_option("--precisions", cost_precisions, "Comma-separated WxAy list")->capture_default_str();
  cost->add_option("--group-size", cost_group, "Weight group size, 0 for none")->capture_default_str();
  cost->add_option("--scale-bits", cost_scale_bits, "Bits per group scale")->capture_default_str();

  auto* sweep = app.add_subcommand("sweep", "Calibration budget sweep on a synthetic layer");
  SweepFlags sweep_flags;
  CalibFlags sweep_calib;
  sweep->add_option("--variants", sweep_flags.variants)->capture_default_str();
  sweep->add_option("--budgets", sweep_flags.budgets)->capture_default_str();
  sweep_flags.fmt_opt = sweep->add_option("--fmt", sweep_flags.fmt)->capture_default_str();
  sweep_flags.group_opt = sweep->add_option("--group-size", sweep_flags.group_size)->capture_default_str();
  sweep->add_option("--jobs", sweep_flags.jobs, "Worker threads")->capture_default_str();
  sweep_calib.Add(sweep, false);

  auto* calibrate = app.add_subcommand("calibrate", "Quantize and calibrate a toy model checkpoint");
  CalibrateFlags cal_flags;
  CalibFlags cal_calib;
  calibrate->add_option("--model", cal_flags.model, "Checkpoint directory")->required();
  cal_flags.wfmt_opt = calibrate->add_option("--wfmt", cal_flags.wfmt, "Weight format")->capture_default_str();
  cal_flags.ff1_opt =
      calibrate->add_option("--ff1-fmt", cal_flags.ff1_fmt, "ff1 weight format, none for --wfmt")
          ->capture_default_str();
  cal_flags.afmt_opt =
      calibrate->add_option("--afmt", cal_flags.afmt, "Activation format, none to disable")->capture_default_str();
  cal_flags.group_opt = calibrate->add_option("--group-size", cal_flags.group_size)->capture_default_str();
  calibrate->add_option("--mode", cal_flags.mode, "layer | block")->capture_default_str();
  calibrate->add_option("--samples", cal_flags.samples, "Calibration trajectories")->capture_default_str();
  calibrate->add_option("--eval-samples", cal_flags.eval_samples, "Held-out trajectories")->capture_default_str();
  calibrate->add_option("--steps", cal_flags.steps, "Trajectory steps")->capture_default_str();
  cal_calib.Add(calibrate, true);

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::CallForHelp& e) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << e.what() << '\n';
    return kExitConfig;
  }

  try {
    if (grid->parsed()) return RunGrid(g, grid_formats, grid_maxval, out);
    if (quantize->parsed()) return RunQuantize(g, q_in, q_fmt, q_group, q_dequant, out);
    if (init->parsed()) return RunInitModel(g, init_cfg, init_kind);
    if (stats->parsed()) return RunStats(g, stats_model, stats_steps);
    if (cost->parsed()) return RunCost(g, cost_manifest, cost_precisions, cost_group, cost_scale_bits, out);
    if (sweep->parsed()) return RunSweep(g, sweep_flags, sweep_calib, seed_opt, out);
    if (calibrate->parsed()) return RunCalibrate(g, cal_flags, cal_calib, seed_opt, out, err);
  } catch (const NumericError& e) {
    err << "numeric failure: " << e.what() << '\n';
    return kExitNumeric;
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const ParameterError& e) {
    err << "config error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const DimensionError& e) {
    err << "config error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const InputError& e) {
    // NaN or Inf reaching a quantizer.
    err << "numeric failure: " << e.what() << '\n';
    return kExitNumeric;
  } catch (const FormatError& e) {
    err << "input error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitFailure;
  }
  return kExitFailure;
}

}  // namespace fpq::cli
