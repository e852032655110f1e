#pragma once

// Run configuration and the command-line driver.

#include <cstdint>
#include <iosfwd>
#include <map>
#include <string>
#include <vector>

#include "icnn/building.hpp"
#include "icnn/convexity.hpp"
#include "icnn/json_io.hpp"
#include "icnn/mpc.hpp"

namespace icnn {

/// Zero keeps the architecture default.
struct ModelOverrides {
  std::size_t model_dim = 0;
  std::size_t ff_dim = 0;
  std::size_t num_heads = 0;
  std::size_t num_layers = 0;
  double r = 0.0;
  double tau = 1.0;

  ModelSpec apply(ModelSpec spec) const;
};

struct DatasetSection {
  std::size_t days = 14;
  double initial_temp = 21.0;
  ExcitationPolicy excitation;
};

struct FeatureSection {
  double mi_retain_fraction = 0.8;
  double rho_threshold = 0.9;
  std::size_t bins = 16;
  std::vector<std::string> mandatory = model_input_features();
};

struct TrainSection {
  Architecture architecture = Architecture::IcEot;
  std::size_t sequence_length = 12;
  std::size_t test_days = 3;
  ModelOverrides model;
  TrainConfig train;

  TrainSection();
};

struct SweepSection {
  std::vector<Architecture> architectures = {Architecture::IcEot, Architecture::IcLstm};
  std::vector<std::size_t> lengths = {5, 10, 15, 20, 25};
  std::size_t days = 7;
  ModelOverrides model;
  TrainConfig train;

  SweepSection();
};

struct MpcSection {
  std::string checkpoint;
  std::size_t horizon = 8;
  double u_min = 16.0, u_max = 26.0;
  double t_min = 19.0, t_max = 24.0;
  double comfort_weight = 10.0;
  double baseline_setpoint = 21.0;
  std::size_t steps = kStepsPerDay;
  std::size_t warmup = 48;
  double initial_temp = 21.0;
  SolverOptions solver;
};

struct BenchSection {
  std::map<std::string, std::string> checkpoints;  // label -> checkpoint path
  std::vector<std::size_t> horizons = {4, 8, 12, 16, 20, 24, 28, 32};
  SolverOptions solver;

  BenchSection();
};

/// Each architecture is trained on windows of uniform points of [-1, 1]^2
/// whose target is f3 at the window mean, then probed over [lo, hi]^(2T).
struct VerifySection {
  /// Also probe this trained checkpoint in its scaled input space when set.
  std::string checkpoint;
  std::vector<Architecture> architectures = {Architecture::Icfnn, Architecture::Icrnn,
                                             Architecture::IcLstm, Architecture::IcEot,
                                             Architecture::Eot,   Architecture::Lstm};
  std::size_t sequence_length = 4;
  std::size_t n_train = 1000;
  TrainConfig train;
  std::size_t probes = 1000;
  std::size_t monotonicity_probes = 500;
  double lo = -2.0, hi = 2.0;
  double tolerance = 1e-8;

  VerifySection();
};

struct RunConfig {
  std::uint64_t seed = 1;
  std::string output_dir = "out";
  RCParams plant = RCParams::defaults();
  TariffSchedule tariff = TariffSchedule::time_of_use();
  DatasetSection dataset;
  FitConfig fit_surface;
  FeatureSection select_features;
  TrainSection train;
  SweepSection stability_sweep;
  MpcSection mpc;
  BenchSection bench_solver;
  VerifySection verify_convexity;

  /// Throws ContractError on values no command could run with.
  void validate() const;
};

/// Strict parse: unknown keys and wrong types throw ParseError naming the
/// dotted path; absent keys keep their defaults.
RunConfig parse_config(const json& document);
/// Fully resolved document; parse_config(to_json(c)) reproduces c.
json to_json(const RunConfig& config);

/// Lower-case command-line spelling ("iceot", "iclstm", ...).
std::string cli_name(Architecture arch);

/// Hex SHA-256 of the bytes.
std::string sha256_hex(const std::string& bytes);

inline constexpr int kExitOk = 0;
inline constexpr int kExitRunFailure = 2;
inline constexpr int kExitUsage = 64;

/// Entry point of the `icnn` tool; returns the process exit code. Every
/// command writes its artifacts and manifest_<command>[_<subject>].json under
/// the configured output directory.
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace icnn
