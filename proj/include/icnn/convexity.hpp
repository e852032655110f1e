#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <string_view>
#include <vector>

#include "icnn/models.hpp"
#include "icnn/training.hpp"

namespace icnn {

/// Batched function of flat points [P, dim] returning [P, d_out].
using BatchFn = std::function<Tensor(const Tensor& points)>;

struct ConvexityReport {
  std::string architecture;
  std::size_t probes = 0;
  std::size_t violations = 0;
  double max_violation_magnitude = 0.0;
  std::uint64_t seed = 0;
};

struct MonotonicityReport {
  std::string architecture;
  std::size_t probes = 0;       // perturbed (point, coordinate) pairs
  std::size_t flags = 0;
  double max_decrease = 0.0;
  std::uint64_t seed = 0;
};

/// Magnitude recorded for probes whose outputs are not finite.
inline constexpr double kViolationSentinel = 1.7976931348623157e308;

/// Checks f(l x + (1-l) y) <= l f(x) + (1-l) f(y) + tol for x, y uniform in
/// [lo, hi]^dim and l uniform in (0, 1), in every output coordinate.
ConvexityReport midpoint_convexity_check(const BatchFn& f, std::size_t dim, std::size_t probes,
                                         std::uint64_t seed, double lo = -2.0, double hi = 2.0,
                                         double tol = 1e-8);

/// Raises each coordinate listed in `coords` by delta at random points of
/// [lo, hi]^dim and flags any output that drops by more than tol.
MonotonicityReport monotonicity_check(const BatchFn& f, std::size_t dim,
                                      const std::vector<std::size_t>& coords, std::size_t probes,
                                      std::uint64_t seed, double lo = -2.0, double hi = 2.0,
                                      double delta = 1e-3, double tol = 1e-10);

/// Model as a function of its flattened input window [P, T * d_in], with
/// optional scaling applied on both ends.
BatchFn model_function(const Model& model, const Scaling* scaling = nullptr);

/// Model as a function of its flattened expanded window [P, T * 2 d_in].
BatchFn expanded_function(const ExpandedInputModel& model);

/// Indices of the +x half of a flattened expanded window.
std::vector<std::size_t> positive_half(std::size_t sequence_length, std::size_t input_dim);

// ---------------------------------------------------------------------------
// Toy surface study.

enum class ToyFunction { F1, F2, F3 };

std::string to_string(ToyFunction id);
/// "f1", "f2" or "f3"; anything else throws ContractError.
ToyFunction parse_toy_function(std::string_view name);

/// f1 = -cos(4x^2 + 4y^2);
/// f2 = max(min(x^2 + y^2, (2x-1)^2 + (2y-1)^2 - 2), -(2x+1)^2 - (2y+1)^2 + 4);
/// f3 = x^2 (4 - 2.1 x^2 + x^(4/3)) - 4 y^2 (1 - y^2) + x y with
/// x^(4/3) = cbrt(x)^4.
double toy_function(ToyFunction id, double x, double y);

struct SurfaceDataset {
  SequenceDataset train, test;  // inputs [n, 1, 2], targets [n, 1]
};

/// n_train + n_test uniform points of [lo, hi]^2, deterministic from seed.
SurfaceDataset make_surface_dataset(ToyFunction id, std::size_t n_train, std::size_t n_test,
                                    std::uint64_t seed, double lo = -1.0, double hi = 1.0);

struct FitConfig {
  std::size_t n_train = 2000;
  std::size_t n_test = 500;
  std::size_t grid_size = 41;
  std::size_t convexity_probes = 1000;
  std::uint64_t seed = 1;
  std::size_t model_dim = 0;  // 0 keeps the architecture default
  std::size_t ff_dim = 0;
  TrainConfig train;

  FitConfig();
};

struct FitReport {
  ToyFunction function = ToyFunction::F1;
  Architecture architecture = Architecture::IcEot;
  double test_mse = 0.0;
  double r2 = 0.0;
  double training_time_seconds = 0.0;
  double mean_epoch_seconds = 0.0;
  std::size_t epochs = 0;
  bool training_failed = false;
  std::string failure_reason;
};

struct GridPoint {
  double x, y, truth, pred;
};

struct FitResult {
  FitReport report;
  ConvexityReport convexity;
  std::vector<GridPoint> grid;
};

/// 1 - SSE / SST; throws ContractError on mismatched or empty input.
double r_squared(const std::vector<double>& truth, const std::vector<double>& pred);

/// Trains an input-convex sequence model on length-1 windows of (x, y) and
/// evaluates it on the held-out points and a regular grid over [-1, 1]^2.
FitResult fit_surface(Architecture arch, ToyFunction id, const FitConfig& config);

void write_grid_csv(const std::filesystem::path& path, ToyFunction id,
                    const std::vector<GridPoint>& grid);

}  // namespace icnn
