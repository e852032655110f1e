#include "icnn/cli.hpp"

#include <CLI11.hpp>
#include <fmt/chrono.h>
#include <fmt/format.h>
#include <fmt/os.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <ctime>
#include <fstream>
#include <iostream>
#include <random>
#include <sstream>

namespace icnn {

namespace fs = std::filesystem;

namespace {

struct Run {
  std::string command;
  RunConfig config;
  json resolved;
  fs::path out;
  std::size_t jobs = 1;
  std::vector<fs::path> artifacts;
  std::ostream& log;
  bool failed = false;
  std::string failure;
  std::string tag;  // distinguishes manifests of one command with different subjects

  fs::path artifact(const std::string& name) {
    artifacts.push_back(name);
    return out / name;
  }
  void fail(std::string why) {
    if (!failed) failure = std::move(why);
    failed = true;
  }
};

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ParseError("cannot read " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  out << text;
  if (!out) throw std::runtime_error("cannot write " + path.string());
}

void write_json(const fs::path& path, const json& j) { write_text(path, j.dump(2) + "\n"); }

json number(double v) { return std::isfinite(v) ? json(v) : json(format_double(v)); }

json to_report(const ConvexityReport& r) {
  return {{"architecture", r.architecture},
          {"probes", r.probes},
          {"violations", r.violations},
          {"max_violation_magnitude", number(r.max_violation_magnitude)},
          {"seed", r.seed}};
}

json to_report(const MonotonicityReport& r) {
  return {{"architecture", r.architecture},
          {"probes", r.probes},
          {"flags", r.flags},
          {"max_decrease", number(r.max_decrease)},
          {"seed", r.seed}};
}

json train_summary(const TrainResult& r) {
  std::size_t nan_epochs = 0;
  for (const auto& t : r.telemetry) nan_epochs += t.finite() ? 0 : 1;
  return {{"epochs", r.telemetry.size()},
          {"best_epoch", r.best_epoch},
          {"best_validation_loss", number(r.best_validation_loss)},
          {"nan_epochs", nan_epochs},
          {"nan_steps", r.nan_steps},
          {"mean_epoch_seconds", r.mean_epoch_seconds()},
          {"failed", r.failed},
          {"failure_reason", r.failure_reason}};
}

double median(std::vector<double> v) {
  if (v.empty()) return std::numeric_limits<double>::quiet_NaN();
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

ModelSpec building_spec(const ModelOverrides& overrides, Architecture arch, std::size_t length) {
  return overrides.apply(default_spec(arch, model_input_features().size(), state_features().size(),
                                      length));
}

// ---------------------------------------------------------------------------

void cmd_fit_surface(Run& run, const std::string& function, const std::string& arch_name) {
  const ToyFunction id = parse_toy_function(function);
  const Architecture arch = parse_architecture(arch_name);
  FitConfig cfg = run.config.fit_surface;
  cfg.seed = run.config.seed;
  cfg.train.seed = run.config.seed;
  const FitResult res = fit_surface(arch, id, cfg);
  const auto& r = res.report;
  const std::string stem = fmt::format("{}_{}", function, cli_name(arch));
  run.tag = stem;
  write_json(run.artifact("fit_" + stem + ".json"),
             {{"function", to_string(r.function)},
              {"architecture", to_string(r.architecture)},
              {"test_mse", number(r.test_mse)},
              {"r2", number(r.r2)},
              {"training_time_seconds", r.training_time_seconds},
              {"mean_epoch_seconds", r.mean_epoch_seconds},
              {"epochs", r.epochs},
              {"training_failed", r.training_failed},
              {"failure_reason", r.failure_reason},
              {"convexity", to_report(res.convexity)}});
  write_grid_csv(run.artifact("grid_" + stem + ".csv"), id, res.grid);
  run.log << fmt::format("fit-surface {} {}: R^2 {:.4f}, test MSE {:.4g}, {} epochs, {} violations\n",
                         function, to_string(arch), r.r2, r.test_mse, r.epochs,
                         res.convexity.violations);
  if (r.training_failed) run.fail("training failed: " + r.failure_reason);
}

GeneratedData building_data(const RunConfig& c, std::size_t days, std::uint64_t seed) {
  return generate_dataset(days, seed, c.plant, c.dataset.excitation, c.dataset.initial_temp);
}

void cmd_gen_data(Run& run) {
  const auto data = building_data(run.config, run.config.dataset.days, run.config.seed);
  write_table_csv(run.artifact("dataset.csv"), data.features, &data.targets);
  run.log << fmt::format("gen-data: {} rows, {} feature and {} target columns\n",
                         data.features.rows(), data.features.names.size(),
                         data.targets.names.size());
}

void cmd_select_features(Run& run) {
  const auto& s = run.config.select_features;
  const auto data = building_data(run.config, run.config.dataset.days, run.config.seed);
  const auto sel = select_features(data.features, data.targets, s.mandatory, s.mi_retain_fraction,
                                   s.rho_threshold, s.bins);
  write_json(run.artifact("feature_selection.json"), to_json(sel));
  write_text(run.artifact("feature_drops.txt"), format_drop_table(sel));
  run.log << fmt::format("select-features: kept {} of {}, dropped {}\n", sel.selected.size(),
                         data.features.names.size(), sel.drops.size());
}

void cmd_train(Run& run) {
  const auto& c = run.config;
  const auto& s = c.train;
  const auto data = building_data(c, c.dataset.days, c.seed);
  const auto inputs = model_input_features();
  const auto windows = make_windows(data.features, data.targets, inputs, s.sequence_length);
  const ModelSpec spec = building_spec(s.model, s.architecture, s.sequence_length);
  auto model = make_model(spec, c.seed);
  TrainConfig tc = s.train;
  tc.seed = c.seed;
  const TrainResult res = train(*model, windows, tc);

  const std::string arch = cli_name(s.architecture);
  run.tag = arch;
  save_checkpoint(*model, res.scaling, run.artifact("model_" + arch + ".json"));
  write_telemetry_csv(run.artifact("telemetry_" + arch + ".csv"), res.telemetry);

  // Held-out days from an independent excitation trace.
  const auto test_data = building_data(c, s.test_days, c.seed + 1);
  const auto test = make_windows(test_data.features, test_data.targets, inputs, s.sequence_length);
  const Tensor pred = predict(*model, res.scaling, test.inputs);
  const std::size_t n = test.size(), d = state_features().size();
  json metrics = json::object();
  for (std::size_t k = 0; k < d; ++k) {
    std::vector<double> truth(n), guess(n);
    double sse = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      truth[i] = test.targets.at(i, k);
      guess[i] = pred.at(i, k);
      sse += (truth[i] - guess[i]) * (truth[i] - guess[i]);
    }
    metrics[test_data.targets.names[k]] = {{"r2", number(r_squared(truth, guess))},
                                           {"rmse", number(std::sqrt(sse / double(n)))}};
  }
  json report = {{"architecture", to_string(s.architecture)},
                 {"spec", spec},
                 {"parameters", model->parameter_count()},
                 {"train_samples", windows.size()},
                 {"test_samples", n},
                 {"training", train_summary(res)},
                 {"test", metrics}};
  write_json(run.artifact("train_report_" + arch + ".json"), report);
  run.log << fmt::format("train {}: {} epochs, best validation MSE {:.4g}\n", to_string(s.architecture),
                         res.telemetry.size(), res.best_validation_loss);
  if (res.failed) run.fail("training failed: " + res.failure_reason);
}

void cmd_stability_sweep(Run& run) {
  const auto& c = run.config;
  const auto& s = c.stability_sweep;
  const auto data = building_data(c, s.days, c.seed);
  const auto inputs = model_input_features();
  TrainConfig tc = s.train;
  tc.seed = c.seed;
  const auto cells = stability_sweep(
      s.architectures, s.lengths,
      [&](std::size_t len) { return make_windows(data.features, data.targets, inputs, len); },
      [&](Architecture a, std::size_t len) { return building_spec(s.model, a, len); }, tc, run.jobs);

  json summary = json::array();
  for (const auto& cell : cells) {
    const std::string file =
        fmt::format("sweep_{}_N{}.csv", cli_name(cell.architecture), cell.sequence_length);
    write_telemetry_csv(run.artifact(file), cell.result.telemetry);
    std::vector<double> norms;
    double peak = 0.0;
    for (const auto& t : cell.result.telemetry)
      if (std::isfinite(t.max_layer_grad_norm)) {
        norms.push_back(t.max_layer_grad_norm);
        peak = std::max(peak, t.max_layer_grad_norm);
      }
    const double med = median(norms);
    json j = train_summary(cell.result);
    j["architecture"] = to_string(cell.architecture);
    j["sequence_length"] = cell.sequence_length;
    j["seed"] = cell.seed;
    j["telemetry"] = file;
    j["max_grad_norm"] = number(peak);
    j["median_grad_norm"] = number(med);
    j["spike_ratio"] = number(norms.empty() ? std::numeric_limits<double>::quiet_NaN() : peak / med);
    j["early_persistent_nan"] = cell.early_persistent_nan;
    j["error"] = cell.error;
    summary.push_back(j);
    run.log << fmt::format("sweep {} N={}: {} NaN epochs, grad peak/median {:.3g}\n",
                           to_string(cell.architecture), cell.sequence_length,
                           j["nan_epochs"].get<std::size_t>(), peak / med);
    if (!cell.error.empty()) run.fail(fmt::format("cell {} N={}: {}", to_string(cell.architecture),
                                                  cell.sequence_length, cell.error));
  }
  write_json(run.artifact("sweep_summary.json"), {{"cells", summary}});
}

fs::path default_checkpoint(const Run& run, Architecture arch) {
  return run.out / ("model_" + cli_name(arch) + ".json");
}

Checkpoint load_required(const fs::path& path) {
  if (!fs::exists(path))
    throw ParseError(fmt::format("checkpoint '{}' does not exist (run `train` first)", path.string()));
  return load_checkpoint(path);
}

MpcProblem make_problem(const RunConfig& c, std::size_t horizon) {
  MpcProblem p;
  p.horizon = horizon;
  p.u_min = c.mpc.u_min;
  p.u_max = c.mpc.u_max;
  p.t_min = c.mpc.t_min;
  p.t_max = c.mpc.t_max;
  p.tariff = c.tariff;
  p.comfort_weight = c.mpc.comfort_weight;
  return p;
}

ClosedLoopConfig make_loop(const RunConfig& c) {
  ClosedLoopConfig l;
  l.steps = c.mpc.steps;
  l.warmup = c.mpc.warmup;
  l.initial_temp = c.mpc.initial_temp;
  l.t_min = c.mpc.t_min;
  l.t_max = c.mpc.t_max;
  l.tariff = c.tariff;
  return l;
}

json loop_summary(const ClosedLoopResult& r) {
  const auto times = r.solver_times();
  double total = 0.0;
  for (double t : times) total += t;
  return {{"controller", r.controller},
          {"bill_eur", r.bill_eur},
          {"degree_hours", r.degree_hours},
          {"failed_solves", r.failed_solves},
          {"steps", r.log.size()},
          {"mean_solver_time_s", times.empty() ? 0.0 : total / double(times.size())}};
}

void cmd_mpc_run(Run& run) {
  const auto& c = run.config;
  const fs::path path =
      c.mpc.checkpoint.empty() ? default_checkpoint(run, c.train.architecture) : fs::path(c.mpc.checkpoint);
  const Checkpoint ck = load_required(path);
  Surrogate surrogate{ck.model.get(), ck.scaling, to_string(ck.model->spec().architecture)};
  SolverOptions options = c.mpc.solver;
  options.seed = c.seed;
  const ClosedLoopConfig loop = make_loop(c);

  MpcController mpc(surrogate, make_problem(c, c.mpc.horizon), options);
  const auto controlled = closed_loop_run(mpc, c.plant, loop);
  ConstantController constant(c.mpc.baseline_setpoint);
  const auto baseline = closed_loop_run(constant, c.plant, loop);

  write_trajectory_csv(run.artifact("trajectory_mpc.csv"), controlled);
  write_trajectory_csv(run.artifact("trajectory_baseline.csv"), baseline);
  write_json(run.artifact("mpc_summary.json"),
             {{"checkpoint", path.string()},
              {"horizon", c.mpc.horizon},
              {"mpc", loop_summary(controlled)},
              {"baseline", loop_summary(baseline)},
              {"bill_savings_eur", controlled.bill_eur - baseline.bill_eur}});
  run.log << fmt::format("mpc-run N={}: bill {:.4f} EUR vs baseline {:.4f}, degree-hours {:.4f} vs {:.4f}\n",
                         c.mpc.horizon, controlled.bill_eur, baseline.bill_eur,
                         controlled.degree_hours, baseline.degree_hours);
  if (controlled.failed_solves == controlled.log.size()) run.fail("every MPC solve failed");
}

void cmd_bench_solver(Run& run) {
  const auto& c = run.config;
  std::map<std::string, std::string> paths = c.bench_solver.checkpoints;
  if (paths.empty())
    for (auto arch : {Architecture::IcEot, Architecture::IcLstm})
      paths[to_string(arch)] = default_checkpoint(run, arch).string();

  std::vector<Checkpoint> checkpoints;
  std::vector<Surrogate> surrogates;
  checkpoints.reserve(paths.size());
  surrogates.reserve(paths.size());
  for (const auto& [label, path] : paths) {
    checkpoints.push_back(load_required(path));
    surrogates.push_back({checkpoints.back().model.get(), checkpoints.back().scaling, label});
  }
  std::vector<const Surrogate*> ptrs;
  for (const auto& s : surrogates) ptrs.push_back(&s);

  SolverOptions options = c.bench_solver.solver;
  options.seed = c.seed;
  const auto cells = bench_solver(ptrs, c.bench_solver.horizons, c.plant, make_loop(c),
                                  make_problem(c, 1), options, run.jobs);
  write_bench_csv(run.artifact("bench_solver.csv"), cells);
  for (const auto& cell : cells) {
    run.log << fmt::format("bench {} N={}: {:.4f} +- {:.4f} s per step{}\n", cell.model,
                           cell.horizon, cell.mean_time_s, cell.std_time_s,
                           cell.error.empty() ? "" : " (" + cell.error + ")");
    if (!cell.error.empty()) run.fail(fmt::format("{} N={}: {}", cell.model, cell.horizon, cell.error));
  }
}

// Windows of uniform points of [-1, 1]^2; the target is f3 at the window mean.
SequenceDataset toy_windows(std::size_t n, std::size_t length, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  SequenceDataset d{Tensor({n, length, 2}), Tensor({n, 1})};
  for (std::size_t i = 0; i < n; ++i) {
    double mx = 0.0, my = 0.0;
    for (std::size_t t = 0; t < length; ++t) {
      mx += d.inputs.at(i, t, 0) = u(rng);
      my += d.inputs.at(i, t, 1) = u(rng);
    }
    d.targets[i] = toy_function(ToyFunction::F3, mx / double(length), my / double(length));
  }
  return d;
}

void cmd_verify_convexity(Run& run) {
  const auto& c = run.config;
  const auto& s = c.verify_convexity;
  const std::size_t dim = 2 * s.sequence_length;
  const auto data = toy_windows(s.n_train, s.sequence_length, c.seed);
  json models = json::array();
  for (std::size_t i = 0; i < s.architectures.size(); ++i) {
    const Architecture arch = s.architectures[i];
    const std::uint64_t seed = c.seed + i;
    auto model = make_model(default_spec(arch, 2, 1, s.sequence_length), seed);
    TrainConfig tc = s.train;
    tc.seed = seed;
    const TrainResult tr = train(*model, data, tc);
    ConvexityReport conv = midpoint_convexity_check(model_function(*model, &tr.scaling), dim,
                                                    s.probes, seed, s.lo, s.hi, s.tolerance);
    conv.architecture = to_string(arch);
    json entry = {{"architecture", to_string(arch)},
                  {"input_convex", is_input_convex(arch)},
                  {"training", train_summary(tr)},
                  {"convexity", to_report(conv)}};
    if (const auto* expanded = dynamic_cast<const ExpandedInputModel*>(model.get());
        expanded && s.monotonicity_probes > 0) {
      MonotonicityReport mono =
          monotonicity_check(expanded_function(*expanded), 2 * dim,
                             positive_half(s.sequence_length, 2), s.monotonicity_probes, seed,
                             s.lo, s.hi);
      mono.architecture = to_string(arch);
      entry["monotonicity_expanded"] = to_report(mono);
    }
    models.push_back(entry);
    run.log << fmt::format("verify-convexity {}: {} of {} probes violate (max {:.3g})\n",
                           to_string(arch), conv.violations, conv.probes,
                           conv.max_violation_magnitude);
  }
  json report = {{"sequence_length", s.sequence_length},
                 {"box", {s.lo, s.hi}},
                 {"tolerance", s.tolerance},
                 {"models", models}};
  if (!s.checkpoint.empty()) {
    const Checkpoint ck = load_required(s.checkpoint);
    const auto& spec = ck.model->spec();
    ConvexityReport conv =
        midpoint_convexity_check(model_function(*ck.model), spec.sequence_length * spec.input_dim,
                                 s.probes, c.seed, s.lo, s.hi, s.tolerance);
    conv.architecture = to_string(spec.architecture);
    report["checkpoint"] = {{"path", s.checkpoint}, {"convexity", to_report(conv)}};
  }
  write_json(run.artifact("convexity_report.json"), report);
}

std::string manifest_name(const std::string& command, const std::string& tag) {
  return tag.empty() ? fmt::format("manifest_{}.json", command)
                     : fmt::format("manifest_{}_{}.json", command, tag);
}

std::string utc_timestamp(std::chrono::system_clock::time_point t) {
  return fmt::format("{:%Y-%m-%dT%H:%M:%SZ}", fmt::gmtime(std::chrono::system_clock::to_time_t(t)));
}

void write_manifest(const Run& run, double wall, const std::string& started, int exit_code) {
  json artifacts = json::array();
  for (const auto& a : run.artifacts) {
    const fs::path p = run.out / a;
    if (!fs::exists(p)) continue;
    const std::string bytes = read_file(p);
    artifacts.push_back({{"path", a.generic_string()}, {"bytes", bytes.size()}, {"sha256", sha256_hex(bytes)}});
  }
  json m = {{"command", run.command},
            {"config_hash", sha256_hex(run.resolved.dump())},
            {"seed", run.config.seed},
            {"jobs", run.jobs},
            {"artifacts", artifacts},
            {"started_at", started},
            {"wall_time_seconds", wall},
            {"exit_code", exit_code},
            {"failure", run.failure},
            {"resolved_config", run.resolved}};
  write_json(run.out / manifest_name(run.command, run.tag), m);
}

}  // namespace

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Input-convex sequence models for building energy MPC", "icnn"};
  app.require_subcommand(1, 1);
  app.set_help_all_flag("--help-all", "Help for every command");

  std::string config_path, function, arch;
  std::size_t jobs = 1;
  auto add = [&](const std::string& name, const std::string& about) {
    auto* sub = app.add_subcommand(name, about);
    sub->add_option("--config", config_path, "JSON run configuration")->required();
    return sub;
  };
  auto* fit = add("fit-surface", "Fit an input-convex model to a 2-D toy surface");
  fit->add_option("--function", function, "Toy surface")->required()->check(CLI::IsMember({"f1", "f2", "f3"}));
  fit->add_option("--arch", arch, "Model architecture")->required()->check(CLI::IsMember({"iceot", "iclstm"}));
  add("gen-data", "Simulate the building and write the dataset");
  add("select-features", "MI ranking and Pearson pruning with an audit trail");
  add("train", "Train a surrogate and write its checkpoint");
  add("stability-sweep", "Train across sequence lengths and record gradient telemetry")
      ->add_option("--jobs", jobs, "Cells run concurrently")->check(CLI::PositiveNumber);
  add("mpc-run", "One closed-loop day against the constant-setpoint baseline");
  add("bench-solver", "Solver time per control step across horizons")
      ->add_option("--jobs", jobs, "Cells run concurrently")->check(CLI::PositiveNumber);
  add("verify-convexity", "Midpoint-convexity probes of trained models");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitUsage;
  }
  const std::string command = app.get_subcommands().front()->get_name();

  const auto started = std::chrono::system_clock::now();
  const auto t0 = std::chrono::steady_clock::now();
  RunConfig config;
  json resolved;
  try {
    const std::string text = read_file(config_path);
    json doc;
    try {
      doc = json::parse(text);
    } catch (const json::parse_error& e) {
      throw ParseError(fmt::format("config '{}': {}", config_path, e.what()));
    }
    config = parse_config(doc);
    config.validate();
    resolved = to_json(config);
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  }

  Run run{command, config, resolved, fs::path(config.output_dir), jobs, {}, out, false, {}, {}};
  try {
    fs::create_directories(run.out);
  } catch (const fs::filesystem_error& e) {
    err << "error: output directory: " << e.what() << "\n";
    return kExitUsage;
  }

  int code = kExitOk;
  try {
    if (command == "fit-surface") cmd_fit_surface(run, function, arch);
    else if (command == "gen-data") cmd_gen_data(run);
    else if (command == "select-features") cmd_select_features(run);
    else if (command == "train") cmd_train(run);
    else if (command == "stability-sweep") cmd_stability_sweep(run);
    else if (command == "mpc-run") cmd_mpc_run(run);
    else if (command == "bench-solver") cmd_bench_solver(run);
    else if (command == "verify-convexity") cmd_verify_convexity(run);
    if (run.failed) {
      err << "error: " << run.failure << "\n";
      code = kExitRunFailure;
    }
  } catch (const ParseError& e) {
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const ContractError& e) {
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    run.fail(e.what());
    code = kExitRunFailure;
  }

  const double wall =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  try {
    write_manifest(run, wall, utc_timestamp(started), code);
  } catch (const std::exception& e) {
    err << "error: manifest: " << e.what() << "\n";
    return kExitRunFailure;
  }
  return code;
}

}  // namespace icnn
