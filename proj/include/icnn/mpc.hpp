#pragma once

// Receding-horizon setpoint optimisation through a trained surrogate, the
// closed loop against the RC plant and the solver-time benchmark.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <limits>
#include <memory>
#include <string>
#include <vector>

#include <fmt/format.h>

#include "icnn/building.hpp"
#include "icnn/models.hpp"
#include "icnn/training.hpp"

namespace icnn {

/// A trained next-step model over model_input_features() -> state_features().
struct Surrogate {
  const Model* model = nullptr;
  Scaling scaling;
  std::string name;

  static constexpr std::size_t kStateDim = 11;
  static constexpr std::size_t kControlDim = kApartments;
  static constexpr std::size_t kEnergyIndex = 8;  // Fa_E_All

  std::size_t history_length() const { return model->spec().sequence_length; }
  /// Throws ContractError unless the model and scalers match the layout.
  void validate() const;
};

struct MpcProblem {
  std::size_t horizon = 8;
  double u_min = 16.0, u_max = 26.0;
  double t_min = 19.0, t_max = 24.0;
  TariffSchedule tariff = TariffSchedule::time_of_use();
  double comfort_weight = 10.0;  // EUR per degC per zone-step
  /// Last T observed raw feature rows [T, 15]; the control slot of the final
  /// row is overwritten by the first decision.
  Tensor history;
  std::size_t clock = 0;  // plant step at which the first decision applies

  void validate() const;
};

struct RolloutOutput {
  Var energy;  // [N] kWh
  Var temps;   // [N, 8] degC
};

/// Iterated one-step predictions under the setpoint sequence u [N, 4] (raw
/// degC), built as one graph so gradients w.r.t. u are available. Scaling is
/// applied inside the graph. Throws NumericError on non-finite predictions.
RolloutOutput rollout_predict(const Surrogate& surrogate, const Tensor& history, const Var& u);

struct ObjectiveTerms {
  bool energy = true;
  bool upper_comfort = true;
  bool lower_comfort = true;
};

/// Sum_k E_k price(clock + k) + rho_c Sum_k Sum_z [hinge(T_min - T) + hinge(T - T_max)].
Var mpc_objective(const RolloutOutput& rollout, const MpcProblem& problem,
                  const ObjectiveTerms& terms = {});

struct SolverOptions {
  std::size_t max_iterations = 200;
  double tolerance = 1e-4;  // on the projected-gradient norm
  double initial_step = 1.0;
  double shrink = 0.5;
  double armijo_c1 = 1e-4;
  std::size_t max_backtracks = 30;
  /// Run cold, warm and random starts and keep the best; by default only for
  /// architectures that are not input-convex.
  enum class Multistart { Auto, Always, Never } multistart = Multistart::Auto;
  std::uint64_t seed = 0;
};

/// Scalar objective of a flat decision tensor, as a graph over the leaf.
using ObjectiveFn = std::function<Var(const Var& u)>;

struct PgdResult {
  Tensor u;
  double objective = std::numeric_limits<double>::quiet_NaN();
  double initial_objective = std::numeric_limits<double>::quiet_NaN();
  std::size_t iterations = 0;
  bool converged = false;
  bool finite = false;
};

/// Projected gradient descent on the box [lo, hi] with Armijo backtracking.
/// Every iterate is clamped into the box.
PgdResult projected_gradient_descent(const ObjectiveFn& f, Tensor u0, double lo, double hi,
                                     const SolverOptions& options);

struct SolveResult {
  Tensor u;  // [N, 4]
  double objective = std::numeric_limits<double>::quiet_NaN();
  double initial_objective = std::numeric_limits<double>::quiet_NaN();
  std::size_t iterations = 0;
  double wall_time_seconds = 0.0;
  bool converged = false;
  bool feasible = false;  // at least one start produced a finite objective
  std::string start;      // "cold", "warm" or "random"
  std::vector<double> predicted_energy;
  std::vector<ZoneTemps> predicted_temps;
};

/// Minimises the MPC objective over u in [u_min, u_max]^(N x 4). The cold
/// start is the band midpoint 21 degC; `warm` (if non-empty) is used instead
/// for convex surrogates and as an extra start otherwise.
SolveResult solve(const Surrogate& surrogate, const MpcProblem& problem, const Tensor& warm,
                  const SolverOptions& options);

/// Previous solution shifted one step forward, last row repeated.
Tensor shift_warm_start(const Tensor& previous);

// ---------------------------------------------------------------------------

struct ControlContext {
  std::size_t clock = 0;
  const Tensor& history;  // [T, 15] raw rows, last row carries previous setpoints
  const Setpoints& previous;
};

struct ControlDecision {
  Setpoints u{};
  double solver_time_seconds = 0.0;
  std::size_t iterations = 0;
  double objective = std::numeric_limits<double>::quiet_NaN();
  bool failed = false;
};

class Controller {
 public:
  virtual ~Controller() = default;
  virtual std::string name() const = 0;
  /// Rows of history the controller needs; 0 for model-free controllers.
  virtual std::size_t history_length() const = 0;
  virtual ControlDecision decide(const ControlContext& context) = 0;
};

class ConstantController final : public Controller {
 public:
  explicit ConstantController(double setpoint = 21.0) : setpoint_(setpoint) {}
  std::string name() const override { return fmt::format("constant-{}", setpoint_); }
  std::size_t history_length() const override { return 0; }
  ControlDecision decide(const ControlContext& context) override;

 private:
  double setpoint_;
};

class MpcController final : public Controller {
 public:
  MpcController(const Surrogate& surrogate, MpcProblem problem, SolverOptions options);
  std::string name() const override { return surrogate_.name; }
  std::size_t history_length() const override { return surrogate_.history_length(); }
  ControlDecision decide(const ControlContext& context) override;
  const SolveResult& last_solve() const { return last_; }

 private:
  const Surrogate& surrogate_;
  MpcProblem problem_;
  SolverOptions options_;
  Tensor warm_;
  SolveResult last_;
};

struct ClosedLoopConfig {
  std::size_t steps = kStepsPerDay;
  /// Steps simulated under a constant 21 degC setpoint before logging starts;
  /// the logged run begins at clock `warmup` rounded up to the next midnight.
  std::size_t warmup = 48;
  double initial_temp = 21.0;
  double t_min = 19.0, t_max = 24.0;
  TariffSchedule tariff = TariffSchedule::time_of_use();
};

struct StepLog {
  std::size_t step = 0, clock = 0;
  double price = 0.0;
  Setpoints u{};
  ZoneTemps zones{};       // after the step
  double energy_kwh = 0.0;  // over the step
  double solver_time_seconds = 0.0;
  std::size_t iterations = 0;
  double objective = std::numeric_limits<double>::quiet_NaN();
};

struct ClosedLoopResult {
  std::string controller;
  std::vector<StepLog> log;
  double bill_eur = 0.0;
  double degree_hours = 0.0;
  std::size_t failed_solves = 0;

  std::vector<double> solver_times() const;
};

/// Degree-hours of one zone-temperature sample over one 15-minute step.
double step_degree_hours(const ZoneTemps& zones, double t_min, double t_max);

ClosedLoopResult closed_loop_run(Controller& controller, const RCParams& params,
                                 const ClosedLoopConfig& config);

/// Header `step,clock,price,u1..u4,z1..z8,energy_kwh,solver_time_s,iterations,objective`.
void write_trajectory_csv(const std::filesystem::path& path, const ClosedLoopResult& result);

struct BenchCell {
  std::string model;
  std::size_t horizon = 0;
  double mean_time_s = 0.0, std_time_s = 0.0;
  double bill_eur = 0.0, degree_hours = 0.0;
  std::string error;
};

/// One closed-loop run per (surrogate, horizon); up to `jobs` cells at once.
std::vector<BenchCell> bench_solver(const std::vector<const Surrogate*>& surrogates,
                                    const std::vector<std::size_t>& horizons,
                                    const RCParams& params, const ClosedLoopConfig& loop,
                                    const MpcProblem& problem_template,
                                    const SolverOptions& options, std::size_t jobs = 1);

/// Header `model,horizon,mean_time_s,std_time_s,bill_eur,degree_hours`.
void write_bench_csv(const std::filesystem::path& path, const std::vector<BenchCell>& cells);

}  // namespace icnn
