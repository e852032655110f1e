#include "icnn/mpc.hpp"

#include <fmt/os.h>

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <deque>
#include <numeric>
#include <random>
#include <thread>

namespace icnn {

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

Tensor row_tensor(const std::vector<double>& v) { return Tensor({1, v.size()}, v); }

/// Constants a, b with x_scaled = a * x + b over columns [first, first + n).
std::pair<Var, Var> scale_coeffs(const MinMaxScaler& s, std::size_t first, std::size_t n) {
  std::vector<double> a(n), b(n);
  for (std::size_t j = 0; j < n; ++j) {
    a[j] = 1.0 / s.range(first + j);
    b[j] = -s.lo[first + j] * a[j];
  }
  return {constant(row_tensor(a)), constant(row_tensor(b))};
}

std::pair<Var, Var> unscale_coeffs(const MinMaxScaler& s) {
  std::vector<double> a(s.width()), b(s.lo);
  for (std::size_t j = 0; j < s.width(); ++j) a[j] = s.range(j);
  return {constant(row_tensor(a)), constant(row_tensor(b))};
}

Tensor clamp(Tensor u, double lo, double hi) {
  for (auto& v : u.vec()) v = std::clamp(v, lo, hi);
  return u;
}

/// clamp(u - step * g) into the box.
Tensor projected_step(const Tensor& u, const Tensor& g, double step, double lo, double hi) {
  Tensor out(u.shape());
  for (std::size_t i = 0; i < u.size(); ++i) out[i] = std::clamp(u[i] - step * g[i], lo, hi);
  return out;
}

double projected_gradient_norm(const Tensor& u, const Tensor& g, double lo, double hi) {
  const Tensor p = projected_step(u, g, 1.0, lo, hi);
  double s = 0.0;
  for (std::size_t i = 0; i < u.size(); ++i) s += (p[i] - u[i]) * (p[i] - u[i]);
  return std::sqrt(s);
}

}  // namespace

void Surrogate::validate() const {
  if (!model) throw ContractError("surrogate: no model");
  const auto& spec = model->spec();
  if (spec.input_dim != kStateDim + kControlDim || spec.output_dim != kStateDim)
    throw ContractError(fmt::format("surrogate: model maps {} -> {} features, expected {} -> {}",
                                    spec.input_dim, spec.output_dim, kStateDim + kControlDim, kStateDim));
  if (scaling.input.width() != kStateDim + kControlDim || scaling.target.width() != kStateDim)
    throw ContractError("surrogate: scaler widths do not match the feature layout");
}

void MpcProblem::validate() const {
  if (horizon < 1) throw ContractError("mpc: horizon must be >= 1");
  if (!(u_min < u_max)) throw ContractError("mpc: u_min must be < u_max");
  if (!(t_min < t_max)) throw ContractError("mpc: T_min must be < T_max");
  if (!(comfort_weight >= 0.0)) throw ContractError("mpc: comfort weight must be >= 0");
  tariff.validate();
}

RolloutOutput rollout_predict(const Surrogate& surrogate, const Tensor& history, const Var& u) {
  surrogate.validate();
  constexpr std::size_t S = Surrogate::kStateDim, C = Surrogate::kControlDim, D = S + C;
  const std::size_t T = surrogate.history_length();
  if (history.rank() != 2 || history.dim(0) != T || history.dim(1) != D)
    throw DimensionError(fmt::format("rollout: history must be [{}, {}], got {}", T, D,
                                     shape_str(history.shape())));
  if (u->value.rank() != 2 || u->value.dim(1) != C || u->value.dim(0) < 1)
    throw DimensionError(fmt::format("rollout: u must be [N, {}], got {}", C, shape_str(u->value.shape())));
  const std::size_t N = u->value.dim(0);
  const auto& in = surrogate.scaling.input;

  std::deque<Var> rows;
  for (std::size_t t = 0; t < T; ++t) {
    std::vector<double> r(D);
    for (std::size_t j = 0; j < D; ++j) r[j] = (history.at(t, j) - in.lo[j]) / in.range(j);
    rows.push_back(constant(row_tensor(r)));
  }
  const auto [ua, ub] = scale_coeffs(in, S, C);
  const auto [sa, sb] = scale_coeffs(in, 0, S);
  const auto [ta, tb] = unscale_coeffs(surrogate.scaling.target);
  auto scaled_u = [&](std::size_t k) { return add(mul(slice(u, 0, k, 1), ua), ub); };
  rows.back() = concat({slice(rows.back(), 1, 0, S), scaled_u(0)}, 1);

  std::vector<Var> energy, temps;
  for (std::size_t k = 0; k < N; ++k) {
    auto window = reshape(concat(std::vector<Var>(rows.begin(), rows.end()), 0), {1, T, D});
    auto raw = add(mul(surrogate.model->forward(window), ta), tb);  // [1, S]
    if (!raw->value.all_finite())
      throw NumericError(fmt::format("rollout: non-finite prediction at step {}", k));
    energy.push_back(slice(raw, 1, Surrogate::kEnergyIndex, 1));
    temps.push_back(slice(raw, 1, 0, kZones));
    if (k + 1 < N) {
      rows.pop_front();
      rows.push_back(concat({add(mul(raw, sa), sb), scaled_u(k + 1)}, 1));
    }
  }
  return {reshape(concat(energy, 0), {N}), concat(temps, 0)};
}

Var mpc_objective(const RolloutOutput& rollout, const MpcProblem& problem, const ObjectiveTerms& terms) {
  const std::size_t N = rollout.energy->value.size();
  Var total = constant(Tensor::scalar(0.0));
  if (terms.energy) {
    Tensor prices({N});
    for (std::size_t k = 0; k < N; ++k) prices[k] = tariff_price(problem.clock + k, problem.tariff);
    total = add(total, sum_all(mul(rollout.energy, constant(prices))));
  }
  if (terms.upper_comfort)
    total = add(total, scale(sum_all(relu(add_scalar(rollout.temps, -problem.t_max))), problem.comfort_weight));
  if (terms.lower_comfort)
    total = add(total, scale(sum_all(relu(add_scalar(neg(rollout.temps), problem.t_min))), problem.comfort_weight));
  return total;
}

PgdResult projected_gradient_descent(const ObjectiveFn& f, Tensor u0, double lo, double hi,
                                     const SolverOptions& options) {
  auto value = [&](const Tensor& u) {
    try {
      return f(constant(u))->value.item();
    } catch (const NumericError&) {
      return std::numeric_limits<double>::quiet_NaN();
    }
  };
  auto value_and_grad = [&](const Tensor& u, Tensor& g) {
    try {
      auto J = f(leaf(u, "u"));
      auto grads = backward(J);
      auto it = grads.find("u");
      g = it == grads.end() ? Tensor(u.shape()) : it->second;
      return J->value.item();
    } catch (const NumericError&) {
      return std::numeric_limits<double>::quiet_NaN();
    }
  };

  PgdResult r;
  r.u = clamp(std::move(u0), lo, hi);
  Tensor g;
  double J = value_and_grad(r.u, g);
  r.initial_objective = r.objective = J;
  if (!std::isfinite(J) || !g.all_finite()) return r;
  r.finite = true;

  for (; r.iterations < options.max_iterations; ++r.iterations) {
    if (projected_gradient_norm(r.u, g, lo, hi) < options.tolerance) {
      r.converged = true;
      break;
    }
    double step = options.initial_step;
    bool accepted = false;
    Tensor cand;
    double Jc = 0.0;
    for (std::size_t b = 0; b <= options.max_backtracks; ++b, step *= options.shrink) {
      cand = projected_step(r.u, g, step, lo, hi);
      double descent = 0.0;
      for (std::size_t i = 0; i < cand.size(); ++i) descent += g[i] * (cand[i] - r.u[i]);
      Jc = value(cand);
      if (std::isfinite(Jc) && Jc <= J + options.armijo_c1 * descent) {
        accepted = true;
        break;
      }
    }
    if (!accepted) break;
    Tensor gc;
    const double Jg = value_and_grad(cand, gc);
    if (!std::isfinite(Jg) || !gc.all_finite()) break;
    r.u = std::move(cand);
    J = Jg;
    g = std::move(gc);
    r.objective = J;
  }
  if (r.iterations == options.max_iterations && !r.converged) {
    r.converged = projected_gradient_norm(r.u, g, lo, hi) < options.tolerance;
  }
  return r;
}

Tensor shift_warm_start(const Tensor& previous) {
  if (previous.rank() != 2 || previous.dim(0) == 0) throw DimensionError("warm start: expected [N, 4]");
  Tensor out(previous.shape());
  const std::size_t N = previous.dim(0), C = previous.dim(1);
  for (std::size_t k = 0; k < N; ++k)
    for (std::size_t j = 0; j < C; ++j) out.at(k, j) = previous.at(std::min(k + 1, N - 1), j);
  return out;
}

SolveResult solve(const Surrogate& surrogate, const MpcProblem& problem, const Tensor& warm,
                  const SolverOptions& options) {
  const auto t0 = Clock::now();
  problem.validate();
  surrogate.validate();
  const std::size_t N = problem.horizon, C = Surrogate::kControlDim;
  const Shape shape{N, C};
  const bool have_warm = warm.shape() == shape;
  const bool multi = options.multistart == SolverOptions::Multistart::Always ||
                     (options.multistart == SolverOptions::Multistart::Auto &&
                      !is_input_convex(surrogate.model->spec().architecture));

  std::vector<std::pair<std::string, Tensor>> starts;
  const Tensor cold(shape, 0.5 * (problem.u_min + problem.u_max));
  if (!multi) {
    starts.emplace_back(have_warm ? "warm" : "cold", have_warm ? warm : cold);
  } else {
    starts.emplace_back("cold", cold);
    if (have_warm) starts.emplace_back("warm", warm);
    std::mt19937_64 rng(options.seed ^ (0x9E3779B97F4A7C15ull * (problem.clock + 1)));
    std::uniform_real_distribution<double> dist(problem.u_min, problem.u_max);
    Tensor random(shape);
    for (auto& v : random.vec()) v = dist(rng);
    starts.emplace_back("random", std::move(random));
  }

  const ObjectiveFn f = [&](const Var& u) {
    return mpc_objective(rollout_predict(surrogate, problem.history, u), problem);
  };
  SolveResult out;
  for (auto& [label, init] : starts) {
    auto r = projected_gradient_descent(f, init, problem.u_min, problem.u_max, options);
    out.iterations += r.iterations;
    if (r.finite && (!out.feasible || r.objective < out.objective)) {
      out.feasible = true;
      out.u = std::move(r.u);
      out.objective = r.objective;
      out.initial_objective = r.initial_objective;
      out.converged = r.converged;
      out.start = label;
    }
  }
  if (!out.feasible) {
    out.u = clamp(starts.front().second, problem.u_min, problem.u_max);
    out.start = starts.front().first;
  } else {
    auto roll = rollout_predict(surrogate, problem.history, constant(out.u));
    out.predicted_energy = roll.energy->value.vec();
    for (std::size_t k = 0; k < N; ++k) {
      ZoneTemps z;
      for (std::size_t i = 0; i < kZones; ++i) z[i] = roll.temps->value.at(k, i);
      out.predicted_temps.push_back(z);
    }
  }
  out.wall_time_seconds = std::max(seconds_since(t0), std::numeric_limits<double>::min());
  return out;
}

// ---------------------------------------------------------------------------

ControlDecision ConstantController::decide(const ControlContext&) {
  ControlDecision d;
  d.u.fill(setpoint_);
  return d;
}

MpcController::MpcController(const Surrogate& surrogate, MpcProblem problem, SolverOptions options)
    : surrogate_(surrogate), problem_(std::move(problem)), options_(options) {
  surrogate_.validate();
  problem_.validate();
}

ControlDecision MpcController::decide(const ControlContext& context) {
  problem_.history = context.history;
  problem_.clock = context.clock;
  last_ = solve(surrogate_, problem_, warm_, options_);
  ControlDecision d;
  d.solver_time_seconds = last_.wall_time_seconds;
  d.iterations = last_.iterations;
  d.objective = last_.objective;
  if (!last_.feasible) {
    d.failed = true;
    d.u = context.previous;
    warm_ = Tensor();
    return d;
  }
  for (std::size_t a = 0; a < kApartments; ++a) d.u[a] = last_.u.at(0, a);
  warm_ = shift_warm_start(last_.u);
  return d;
}

std::vector<double> ClosedLoopResult::solver_times() const {
  std::vector<double> t;
  for (const auto& s : log) t.push_back(s.solver_time_seconds);
  return t;
}

double step_degree_hours(const ZoneTemps& zones, double t_min, double t_max) {
  double dh = 0.0;
  for (double t : zones) dh += std::max({0.0, t_min - t, t - t_max}) * kStepHours;
  return dh;
}

namespace {

std::vector<double> feature_row(const PlantState& s, const Setpoints& u) {
  std::vector<double> r(s.zone_temps.begin(), s.zone_temps.end());
  r.push_back(s.step_energy_total);
  r.push_back(s.step_energy_appliances);
  r.push_back(s.hp_return_temp);
  r.insert(r.end(), u.begin(), u.end());
  return r;
}

}  // namespace

ClosedLoopResult closed_loop_run(Controller& controller, const RCParams& params,
                                 const ClosedLoopConfig& config) {
  params.validate();
  config.tariff.validate();
  const std::size_t H = controller.history_length();
  if (config.warmup < H)
    throw ContractError(fmt::format("closed loop: warm-up of {} steps is shorter than the {}-row history",
                                    config.warmup, H));
  const std::size_t start = (config.warmup + kStepsPerDay - 1) / kStepsPerDay * kStepsPerDay;
  PlantState state = initial_state(params, config.initial_temp, start - config.warmup);
  Setpoints u;
  u.fill(21.0);
  std::deque<std::vector<double>> rows;
  for (std::size_t k = 0; k < config.warmup; ++k) {
    rows.push_back(feature_row(state, u));
    if (rows.size() > H) rows.pop_front();
    state = plant_step(state, u, params);
  }

  ClosedLoopResult out;
  out.controller = controller.name();
  constexpr std::size_t D = Surrogate::kStateDim + Surrogate::kControlDim;
  for (std::size_t step = 0; step < config.steps; ++step) {
    Tensor history;
    if (H > 0) {
      // Last H-1 complete rows plus the current state with the previous setpoints.
      history = Tensor({H, D});
      const auto current = feature_row(state, u);
      for (std::size_t t = 0; t < H; ++t) {
        const auto& row = t + 1 == H ? current : rows[rows.size() - (H - 1) + t];
        for (std::size_t j = 0; j < D; ++j) history.at(t, j) = row[j];
      }
    }
    const ControlContext ctx{state.clock, history, u};
    auto decision = controller.decide(ctx);
    if (decision.failed) ++out.failed_solves;
    u = decision.u;
    if (H > 0) {
      rows.push_back(feature_row(state, u));
      if (rows.size() > H) rows.pop_front();
    }
    StepLog log;
    log.step = step;
    log.clock = state.clock;
    log.price = tariff_price(state.clock, config.tariff);
    log.u = u;
    state = plant_step(state, u, params);
    log.zones = state.zone_temps;
    log.energy_kwh = state.step_energy_total;
    log.solver_time_seconds = decision.solver_time_seconds;
    log.iterations = decision.iterations;
    log.objective = decision.objective;
    out.bill_eur += log.price * log.energy_kwh;
    out.degree_hours += step_degree_hours(log.zones, config.t_min, config.t_max);
    out.log.push_back(log);
  }
  return out;
}

void write_trajectory_csv(const std::filesystem::path& path, const ClosedLoopResult& result) {
  auto out = fmt::output_file(path.string());
  out.print("step,clock,price,u1,u2,u3,u4,z1,z2,z3,z4,z5,z6,z7,z8,energy_kwh,solver_time_s,iterations,objective\n");
  for (const auto& s : result.log) {
    out.print("{},{},{}", s.step, s.clock, format_double(s.price));
    for (double v : s.u) out.print(",{}", format_double(v));
    for (double v : s.zones) out.print(",{}", format_double(v));
    out.print(",{},{},{},{}\n", format_double(s.energy_kwh), format_double(s.solver_time_seconds),
              s.iterations, format_double(s.objective));
  }
}

std::vector<BenchCell> bench_solver(const std::vector<const Surrogate*>& surrogates,
                                    const std::vector<std::size_t>& horizons,
                                    const RCParams& params, const ClosedLoopConfig& loop,
                                    const MpcProblem& problem_template,
                                    const SolverOptions& options, std::size_t jobs) {
  std::vector<BenchCell> cells;
  for (const auto* s : surrogates)
    for (auto n : horizons) cells.push_back({s->name, n, 0, 0, 0, 0, {}});
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i; (i = next++) < cells.size();) {
      auto& cell = cells[i];
      try {
        MpcProblem problem = problem_template;
        problem.horizon = cell.horizon;
        problem.t_min = loop.t_min;
        problem.t_max = loop.t_max;
        problem.tariff = loop.tariff;
        MpcController controller(*surrogates[i / horizons.size()], problem, options);
        auto run = closed_loop_run(controller, params, loop);
        const auto times = run.solver_times();
        const double n = static_cast<double>(times.size());
        cell.mean_time_s = std::accumulate(times.begin(), times.end(), 0.0) / n;
        double var = 0.0;
        for (double t : times) var += (t - cell.mean_time_s) * (t - cell.mean_time_s);
        cell.std_time_s = std::sqrt(var / n);
        cell.bill_eur = run.bill_eur;
        cell.degree_hours = run.degree_hours;
      } catch (const std::exception& e) {
        cell.error = e.what();
      }
    }
  };
  const std::size_t threads = std::clamp<std::size_t>(jobs, 1, std::max<std::size_t>(cells.size(), 1));
  std::vector<std::thread> pool;
  for (std::size_t t = 1; t < threads; ++t) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();
  return cells;
}

void write_bench_csv(const std::filesystem::path& path, const std::vector<BenchCell>& cells) {
  auto out = fmt::output_file(path.string());
  out.print("model,horizon,mean_time_s,std_time_s,bill_eur,degree_hours\n");
  for (const auto& c : cells)
    out.print("{},{},{},{},{},{}\n", c.model, c.horizon,
              c.error.empty() ? format_double(c.mean_time_s) : "NaN",
              c.error.empty() ? format_double(c.std_time_s) : "NaN",
              c.error.empty() ? format_double(c.bill_eur) : "NaN",
              c.error.empty() ? format_double(c.degree_hours) : "NaN");
}

}  // namespace icnn
