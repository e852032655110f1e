#include "icnn/convexity.hpp"

#include <fmt/format.h>
#include <fmt/os.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <random>

namespace icnn {

namespace {

constexpr std::size_t kChunk = 1024;

Tensor run_chunked(const Tensor& points, const std::function<Tensor(const Tensor&)>& f) {
  const std::size_t n = points.dim(0), w = points.dim(1);
  Tensor out;
  std::size_t d_out = 0;
  for (std::size_t start = 0; start < n; start += kChunk) {
    const std::size_t m = std::min(kChunk, n - start);
    Tensor chunk({m, w});
    std::copy_n(points.vec().begin() + start * w, m * w, chunk.vec().begin());
    Tensor y = f(chunk);
    if (start == 0) {
      d_out = y.size() / m;
      out = Tensor({n, d_out});
    }
    std::copy(y.vec().begin(), y.vec().end(), out.vec().begin() + start * d_out);
  }
  return out;
}

Tensor uniform_points(std::mt19937_64& rng, std::size_t n, std::size_t dim, double lo, double hi) {
  std::uniform_real_distribution<double> u(lo, hi);
  Tensor t({n, dim});
  for (double& v : t.vec()) v = u(rng);
  return t;
}

}  // namespace

ConvexityReport midpoint_convexity_check(const BatchFn& f, std::size_t dim, std::size_t probes,
                                         std::uint64_t seed, double lo, double hi, double tol) {
  if (probes < 1) throw ContractError("midpoint_convexity_check: probes must be >= 1");
  if (dim < 1) throw ContractError("midpoint_convexity_check: dim must be >= 1");
  std::mt19937_64 rng(seed);
  Tensor xs = uniform_points(rng, probes, dim, lo, hi);
  Tensor ys = uniform_points(rng, probes, dim, lo, hi);
  std::uniform_real_distribution<double> lam_dist(0.0, 1.0);
  std::vector<double> lam(probes);
  Tensor mids({probes, dim});
  for (std::size_t p = 0; p < probes; ++p) {
    double l;
    do l = lam_dist(rng);
    while (l == 0.0);
    lam[p] = l;
    for (std::size_t j = 0; j < dim; ++j)
      mids.at(p, j) = l * xs.at(p, j) + (1.0 - l) * ys.at(p, j);
  }
  const Tensor fx = f(xs), fy = f(ys), fm = f(mids);
  const std::size_t d_out = fx.size() / probes;

  ConvexityReport rep;
  rep.probes = probes;
  rep.seed = seed;
  for (std::size_t p = 0; p < probes; ++p) {
    double worst = 0.0;
    bool violated = false;
    for (std::size_t k = 0; k < d_out; ++k) {
      const double a = fx[p * d_out + k], b = fy[p * d_out + k], m = fm[p * d_out + k];
      if (!std::isfinite(a) || !std::isfinite(b) || !std::isfinite(m)) {
        violated = true;
        worst = kViolationSentinel;
        continue;
      }
      const double gap = m - (lam[p] * a + (1.0 - lam[p]) * b);
      if (gap > tol) {
        violated = true;
        worst = std::max(worst, gap);
      }
    }
    if (violated) {
      ++rep.violations;
      rep.max_violation_magnitude = std::max(rep.max_violation_magnitude, worst);
    }
  }
  return rep;
}

MonotonicityReport monotonicity_check(const BatchFn& f, std::size_t dim,
                                      const std::vector<std::size_t>& coords, std::size_t probes,
                                      std::uint64_t seed, double lo, double hi, double delta,
                                      double tol) {
  if (probes < 1) throw ContractError("monotonicity_check: probes must be >= 1");
  for (auto c : coords)
    if (c >= dim) throw ContractError(fmt::format("monotonicity_check: coordinate {} >= dim {}", c, dim));
  std::mt19937_64 rng(seed);
  Tensor base = uniform_points(rng, probes, dim, lo, hi);
  const std::size_t nc = coords.size();
  Tensor bumped({probes * nc, dim});
  for (std::size_t p = 0; p < probes; ++p)
    for (std::size_t c = 0; c < nc; ++c) {
      for (std::size_t j = 0; j < dim; ++j) bumped.at(p * nc + c, j) = base.at(p, j);
      bumped.at(p * nc + c, coords[c]) += delta;
    }
  const Tensor f0 = f(base), f1 = f(bumped);
  const std::size_t d_out = f0.size() / probes;

  MonotonicityReport rep;
  rep.probes = probes * nc;
  rep.seed = seed;
  for (std::size_t p = 0; p < probes; ++p)
    for (std::size_t c = 0; c < nc; ++c) {
      double drop = 0.0;
      for (std::size_t k = 0; k < d_out; ++k) {
        const double before = f0[p * d_out + k], after = f1[(p * nc + c) * d_out + k];
        const double d = std::isfinite(before) && std::isfinite(after) ? before - after
                                                                       : kViolationSentinel;
        drop = std::max(drop, d);
      }
      if (drop > tol) {
        ++rep.flags;
        rep.max_decrease = std::max(rep.max_decrease, drop);
      }
    }
  return rep;
}

BatchFn model_function(const Model& model, const Scaling* scaling) {
  return [&model, scaling](const Tensor& points) {
    const auto& s = model.spec();
    return run_chunked(points, [&](const Tensor& chunk) {
      Tensor x = chunk.reshaped({chunk.dim(0), s.sequence_length, s.input_dim});
      if (scaling) x = scaling->input.transform(x);
      Tensor y = model.forward(constant(x))->value;
      return scaling ? scaling->target.inverse(y) : y;
    });
  };
}

BatchFn expanded_function(const ExpandedInputModel& model) {
  return [&model](const Tensor& points) {
    const auto& s = model.spec();
    return run_chunked(points, [&](const Tensor& chunk) {
      return model
          .forward_expanded(constant(chunk.reshaped({chunk.dim(0), s.sequence_length, 2 * s.input_dim})))
          ->value;
    });
  };
}

std::vector<std::size_t> positive_half(std::size_t sequence_length, std::size_t input_dim) {
  std::vector<std::size_t> out;
  for (std::size_t t = 0; t < sequence_length; ++t)
    for (std::size_t j = 0; j < input_dim; ++j) out.push_back(t * 2 * input_dim + j);
  return out;
}

// ---------------------------------------------------------------------------

std::string to_string(ToyFunction id) {
  switch (id) {
    case ToyFunction::F1: return "f1";
    case ToyFunction::F2: return "f2";
    case ToyFunction::F3: return "f3";
  }
  return "?";
}

ToyFunction parse_toy_function(std::string_view name) {
  if (name == "f1") return ToyFunction::F1;
  if (name == "f2") return ToyFunction::F2;
  if (name == "f3") return ToyFunction::F3;
  throw ContractError(fmt::format("unknown toy function '{}' (expected f1, f2 or f3)", name));
}

double toy_function(ToyFunction id, double x, double y) {
  switch (id) {
    case ToyFunction::F1: return -std::cos(4.0 * x * x + 4.0 * y * y);
    case ToyFunction::F2: {
      const double inner =
          std::min(x * x + y * y, (2 * x - 1) * (2 * x - 1) + (2 * y - 1) * (2 * y - 1) - 2.0);
      return std::max(inner, -(2 * x + 1) * (2 * x + 1) - (2 * y + 1) * (2 * y + 1) + 4.0);
    }
    case ToyFunction::F3: {
      const double c = std::cbrt(x);
      const double x43 = c * c * c * c;
      return x * x * (4.0 - 2.1 * x * x + x43) - 4.0 * y * y * (1.0 - y * y) + x * y;
    }
  }
  return 0.0;
}

SurfaceDataset make_surface_dataset(ToyFunction id, std::size_t n_train, std::size_t n_test,
                                    std::uint64_t seed, double lo, double hi) {
  if (n_train + n_test < 4) throw ContractError("make_surface_dataset: need at least 4 points");
  if (n_train == 0 || n_test == 0) throw ContractError("make_surface_dataset: empty split");
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(lo, hi);
  auto make = [&](std::size_t n) {
    SequenceDataset d{Tensor({n, 1, 2}), Tensor({n, 1})};
    for (std::size_t i = 0; i < n; ++i) {
      const double x = u(rng);
      const double y = u(rng);
      d.inputs[2 * i] = x;
      d.inputs[2 * i + 1] = y;
      d.targets[i] = toy_function(id, x, y);
    }
    return d;
  };
  SurfaceDataset out;
  out.train = make(n_train);
  out.test = make(n_test);
  return out;
}

FitConfig::FitConfig() {
  train.learning_rate = 1e-3;
  train.batch_size = 32;
  train.max_epochs = 600;
  train.patience = 100;
  train.validation_fraction = 0.2;
  train.seed = 1;
}

double r_squared(const std::vector<double>& truth, const std::vector<double>& pred) {
  if (truth.empty() || truth.size() != pred.size())
    throw ContractError("r_squared: inputs must be non-empty and of equal length");
  double mean = 0.0;
  for (double v : truth) mean += v;
  mean /= static_cast<double>(truth.size());
  double sse = 0.0, sst = 0.0;
  for (std::size_t i = 0; i < truth.size(); ++i) {
    sse += (truth[i] - pred[i]) * (truth[i] - pred[i]);
    sst += (truth[i] - mean) * (truth[i] - mean);
  }
  if (sst == 0.0) return sse == 0.0 ? 1.0 : -std::numeric_limits<double>::infinity();
  return 1.0 - sse / sst;
}

FitResult fit_surface(Architecture arch, ToyFunction id, const FitConfig& config) {
  auto data = make_surface_dataset(id, config.n_train, config.n_test, config.seed);
  ModelSpec spec = default_spec(arch, 2, 1, 1);
  if (config.model_dim) spec.model_dim = config.model_dim;
  if (config.ff_dim) spec.ff_dim = config.ff_dim;
  auto model = make_model(spec, config.seed);

  FitResult out;
  out.report.function = id;
  out.report.architecture = arch;
  const auto start = std::chrono::steady_clock::now();
  TrainResult tr = train(*model, data.train, config.train);
  out.report.training_time_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  out.report.mean_epoch_seconds = tr.mean_epoch_seconds();
  out.report.epochs = tr.telemetry.size();
  out.report.training_failed = tr.failed;
  out.report.failure_reason = tr.failure_reason;

  const Tensor test_pred = predict(*model, tr.scaling, data.test.inputs);
  double mse = 0.0;
  for (std::size_t i = 0; i < test_pred.size(); ++i)
    mse += std::pow(test_pred[i] - data.test.targets[i], 2);
  out.report.test_mse = mse / static_cast<double>(test_pred.size());
  out.report.r2 = r_squared(data.test.targets.vec(), test_pred.vec());

  const std::size_t g = config.grid_size;
  Tensor grid({g * g, 1, 2});
  for (std::size_t i = 0; i < g; ++i)
    for (std::size_t j = 0; j < g; ++j) {
      grid[2 * (i * g + j)] = -1.0 + 2.0 * static_cast<double>(i) / static_cast<double>(g - 1);
      grid[2 * (i * g + j) + 1] = -1.0 + 2.0 * static_cast<double>(j) / static_cast<double>(g - 1);
    }
  const Tensor grid_pred = predict(*model, tr.scaling, grid);
  out.grid.reserve(g * g);
  for (std::size_t k = 0; k < g * g; ++k) {
    const double x = grid[2 * k], y = grid[2 * k + 1];
    out.grid.push_back({x, y, toy_function(id, x, y), grid_pred[k]});
  }

  out.convexity = midpoint_convexity_check(model_function(*model, &tr.scaling), 2,
                                           config.convexity_probes, config.seed, -1.0, 1.0);
  out.convexity.architecture = to_string(arch);
  return out;
}

void write_grid_csv(const std::filesystem::path& path, ToyFunction id,
                    const std::vector<GridPoint>& grid) {
  auto out = fmt::output_file(path.string());
  out.print("# function={} x^(4/3)=cbrt(x)^4 (real branch)\n", to_string(id));
  out.print("x,y,true,pred\n");
  for (const auto& p : grid)
    out.print("{},{},{},{}\n", format_double(p.x), format_double(p.y), format_double(p.truth),
              format_double(p.pred));
}

}  // namespace icnn
