#include "icnn/training.hpp"

#include <fmt/format.h>
#include <fmt/os.h>

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <random>
#include <thread>

#include "icnn/json_io.hpp"

namespace icnn {

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();
constexpr int kCheckpointVersion = 1;
constexpr std::size_t kPersistentNanEpochs = 5;
constexpr std::size_t kEarlyNanWindow = 3;

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point start) {
  const double s = std::chrono::duration<double>(Clock::now() - start).count();
  return std::max(s, 1e-9);
}

Tensor gather_rows(const Tensor& t, const std::vector<std::size_t>& rows) {
  Shape shape = t.shape();
  const std::size_t stride = t.size() / shape[0];
  shape[0] = rows.size();
  Tensor out(shape);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] >= t.dim(0)) throw DimensionError(fmt::format("gather: row {} out of range", rows[i]));
    std::copy_n(t.vec().begin() + rows[i] * stride, stride, out.vec().begin() + i * stride);
  }
  return out;
}

Var squared_error(const Var& pred, const Tensor& target) {
  auto diff = sub(pred, constant(target));
  return mean_all(mul(diff, diff));
}

std::vector<std::size_t> iota_rows(std::size_t begin, std::size_t end) {
  std::vector<std::size_t> rows(end - begin);
  std::iota(rows.begin(), rows.end(), begin);
  return rows;
}

}  // namespace

SequenceDataset SequenceDataset::gather(const std::vector<std::size_t>& rows) const {
  return {gather_rows(inputs, rows), gather_rows(targets, rows)};
}

// ---------------------------------------------------------------------------

MinMaxScaler MinMaxScaler::fit(const Tensor& data) {
  if (data.size() == 0) throw ContractError("MinMaxScaler::fit: empty data");
  const std::size_t w = data.shape().back();
  MinMaxScaler s{std::vector<double>(w, std::numeric_limits<double>::infinity()),
                 std::vector<double>(w, -std::numeric_limits<double>::infinity())};
  for (std::size_t i = 0; i < data.size(); ++i) {
    const double v = data[i];
    if (!std::isfinite(v)) throw NumericError("MinMaxScaler::fit: non-finite value");
    s.lo[i % w] = std::min(s.lo[i % w], v);
    s.hi[i % w] = std::max(s.hi[i % w], v);
  }
  return s;
}

double MinMaxScaler::range(std::size_t j) const {
  const double r = hi[j] - lo[j];
  return r > 0.0 ? r : 1.0;
}

Tensor MinMaxScaler::transform(const Tensor& data) const {
  if (data.shape().back() != width())
    throw DimensionError(fmt::format("MinMaxScaler: expected width {}, got {}", width(),
                                     shape_str(data.shape())));
  Tensor out = data;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = (out[i] - lo[i % width()]) / range(i % width());
  return out;
}

Tensor MinMaxScaler::inverse(const Tensor& data) const {
  if (data.shape().back() != width())
    throw DimensionError(fmt::format("MinMaxScaler: expected width {}, got {}", width(),
                                     shape_str(data.shape())));
  Tensor out = data;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = out[i] * range(i % width()) + lo[i % width()];
  return out;
}

// ---------------------------------------------------------------------------

void TrainConfig::validate() const {
  if (patience < 1) throw ContractError("TrainConfig: patience must be >= 1");
  if (!(validation_fraction > 0.0 && validation_fraction < 1.0))
    throw ContractError("TrainConfig: validation_fraction must lie in (0, 1)");
  if (batch_size < 1) throw ContractError("TrainConfig: batch_size must be >= 1");
  if (!(learning_rate > 0.0)) throw ContractError("TrainConfig: learning_rate must be > 0");
  if (max_epochs < 1) throw ContractError("TrainConfig: max_epochs must be >= 1");
  if (!(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0 && eps > 0.0))
    throw ContractError("TrainConfig: invalid Adam constants");
  if (grad_clip < 0.0) throw ContractError("TrainConfig: grad_clip must be >= 0");
}

bool EpochTelemetry::finite() const {
  return std::isfinite(train_loss) && std::isfinite(validation_loss);
}

double max_layer_grad_norm(const Gradients& grads) {
  double worst = 0.0;
  for (const auto& [name, g] : grads) {
    double sq = 0.0;
    for (double v : g.vec()) sq += v * v;
    const double norm = std::sqrt(sq);
    if (!std::isfinite(norm)) return kNaN;
    worst = std::max(worst, norm);
  }
  return worst;
}

bool adam_step(std::vector<Parameter>& params, const Gradients& grads, AdamState& state,
               const TrainConfig& config) {
  double global_sq = 0.0;
  for (const auto& [name, g] : grads) {
    for (double v : g.vec()) {
      if (!std::isfinite(v)) return false;
      global_sq += v * v;
    }
  }
  if (!std::isfinite(global_sq)) return false;
  double clip = 1.0;
  if (config.grad_clip > 0.0 && std::sqrt(global_sq) > config.grad_clip)
    clip = config.grad_clip / std::sqrt(global_sq);

  if (state.m.size() != params.size()) {
    state.m.clear();
    state.v.clear();
    for (const auto& p : params) {
      state.m.emplace_back(p.value.shape(), 0.0);
      state.v.emplace_back(p.value.shape(), 0.0);
    }
  }
  ++state.step;
  const double bc1 = 1.0 - std::pow(config.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(config.beta2, static_cast<double>(state.step));
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto it = grads.find(params[k].name);
    if (it != grads.end()) {
      const Tensor& g = it->second;
      if (g.shape() != params[k].value.shape())
        throw DimensionError(fmt::format("adam_step: gradient of '{}' has shape {}, expected {}",
                                         params[k].name, shape_str(g.shape()),
                                         shape_str(params[k].value.shape())));
      auto& m = state.m[k].vec();
      auto& v = state.v[k].vec();
      auto& w = params[k].value.vec();
      for (std::size_t i = 0; i < w.size(); ++i) {
        const double gi = g[i] * clip;
        m[i] = config.beta1 * m[i] + (1.0 - config.beta1) * gi;
        v[i] = config.beta2 * v[i] + (1.0 - config.beta2) * gi * gi;
        w[i] -= config.learning_rate * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + config.eps);
      }
    }
    params[k].project();
  }
  return true;
}

// ---------------------------------------------------------------------------

EarlyStopping::EarlyStopping(std::size_t patience) : patience_(patience) {
  if (patience < 1) throw ContractError("EarlyStopping: patience must be >= 1");
}

bool EarlyStopping::update(double validation_loss) {
  ++epoch_;
  improved_ = std::isfinite(validation_loss) && validation_loss < best_;
  if (improved_) {
    best_ = validation_loss;
    best_epoch_ = epoch_;
    stale_ = 0;
  } else {
    ++stale_;
  }
  return stale_ >= patience_;
}

double TrainResult::mean_epoch_seconds() const {
  if (telemetry.empty()) return 0.0;
  double s = 0.0;
  for (const auto& t : telemetry) s += t.wall_time_seconds;
  return s / static_cast<double>(telemetry.size());
}

// ---------------------------------------------------------------------------

double evaluate_mse(const Model& model, const SequenceDataset& scaled, std::size_t batch_size) {
  const std::size_t n = scaled.size();
  if (n == 0) throw ContractError("evaluate_mse: empty dataset");
  double total = 0.0;
  for (std::size_t start = 0; start < n; start += batch_size) {
    const std::size_t end = std::min(n, start + batch_size);
    auto batch = scaled.gather(iota_rows(start, end));
    double loss;
    try {
      loss = squared_error(model.forward(constant(batch.inputs)), batch.targets)->value.item();
    } catch (const NumericError&) {
      return kNaN;
    }
    total += loss * static_cast<double>(end - start);
  }
  return total / static_cast<double>(n);
}

Tensor predict(const Model& model, const Scaling& scaling, const Tensor& raw_inputs,
               std::size_t batch_size) {
  const Tensor x = scaling.input.transform(raw_inputs);
  const std::size_t n = x.dim(0), d_out = model.spec().output_dim;
  Tensor out({n, d_out});
  for (std::size_t start = 0; start < n; start += batch_size) {
    const std::size_t end = std::min(n, start + batch_size);
    auto y = model.forward(constant(gather_rows(x, iota_rows(start, end))))->value;
    std::copy(y.vec().begin(), y.vec().end(), out.vec().begin() + start * d_out);
  }
  return scaling.target.inverse(out);
}

TrainResult train(Model& model, const SequenceDataset& data, const TrainConfig& config,
                  const StepObserver& observer) {
  config.validate();
  const std::size_t n = data.size();
  if (n < 2) throw ContractError("train: dataset needs at least 2 samples");
  if (data.targets.dim(0) != n) throw DimensionError("train: input and target counts differ");
  const std::size_t n_val = std::clamp<std::size_t>(
      static_cast<std::size_t>(std::llround(config.validation_fraction * static_cast<double>(n))), 1,
      n - 1);
  const std::size_t n_train = n - n_val;

  TrainResult result;
  {
    auto train_part = data.gather(iota_rows(0, n_train));
    result.scaling.input = MinMaxScaler::fit(train_part.inputs);
    result.scaling.target = MinMaxScaler::fit(train_part.targets);
  }
  const SequenceDataset scaled{result.scaling.input.transform(data.inputs),
                               result.scaling.target.transform(data.targets)};
  const SequenceDataset val_set = scaled.gather(iota_rows(n_train, n));

  auto& params = model.parameters();
  model.project();
  std::vector<Parameter> last_finite = params;
  result.best_parameters = params;

  AdamState adam;
  EarlyStopping stopper(config.patience);
  std::mt19937_64 rng(config.seed);
  std::vector<std::size_t> order = iota_rows(0, n_train);
  std::size_t nan_run = 0;

  for (std::size_t epoch = 1; epoch <= config.max_epochs; ++epoch) {
    const auto start = Clock::now();
    std::shuffle(order.begin(), order.end(), rng);
    EpochTelemetry tel;
    tel.epoch = epoch;
    double loss_sum = 0.0;
    double grad_norm = 0.0;
    for (std::size_t b = 0; b < n_train; b += config.batch_size) {
      const std::size_t e = std::min(n_train, b + config.batch_size);
      auto batch = scaled.gather({order.begin() + static_cast<std::ptrdiff_t>(b),
                                  order.begin() + static_cast<std::ptrdiff_t>(e)});
      double loss = kNaN;
      Gradients grads;
      try {
        auto loss_var = squared_error(model.forward(constant(batch.inputs)), batch.targets);
        loss = loss_var->value.item();
        if (std::isfinite(loss)) grads = backward(loss_var);
      } catch (const NumericError&) {
        loss = kNaN;
      }
      loss_sum += loss * static_cast<double>(e - b);
      const double step_norm = std::isfinite(loss) ? max_layer_grad_norm(grads) : kNaN;
      grad_norm = std::isnan(grad_norm) || std::isnan(step_norm) ? kNaN : std::max(grad_norm, step_norm);
      if (observer && std::isfinite(loss)) observer(epoch, grads, params);
      if (!std::isfinite(loss) || !adam_step(params, grads, adam, config)) ++result.nan_steps;
    }
    tel.train_loss = loss_sum / static_cast<double>(n_train);
    tel.max_layer_grad_norm = grad_norm;
    tel.validation_loss = evaluate_mse(model, val_set, std::max<std::size_t>(config.batch_size, 1024));
    tel.wall_time_seconds = seconds_since(start);
    result.telemetry.push_back(tel);

    if (tel.finite()) {
      nan_run = 0;
      last_finite = params;
    } else {
      ++nan_run;
      params = last_finite;
      model.project();
      adam = AdamState{};
    }
    const bool stop = stopper.update(tel.validation_loss);
    if (stopper.improved()) result.best_parameters = params;
    if (nan_run >= kPersistentNanEpochs) {
      result.failed = true;
      result.failure_reason = fmt::format("{} consecutive non-finite epochs", nan_run);
      break;
    }
    if (stop) break;
  }

  if (stopper.best_epoch() == 0) {
    result.failed = true;
    if (result.failure_reason.empty()) result.failure_reason = "no epoch produced a finite validation loss";
  } else {
    result.best_epoch = stopper.best_epoch();
    result.best_validation_loss = stopper.best();
  }
  params = result.best_parameters;
  return result;
}

// ---------------------------------------------------------------------------

std::vector<SweepCell> stability_sweep(
    const std::vector<Architecture>& architectures, const std::vector<std::size_t>& lengths,
    const std::function<SequenceDataset(std::size_t length)>& make_data,
    const std::function<ModelSpec(Architecture, std::size_t length)>& make_spec,
    const TrainConfig& config, std::size_t jobs) {
  std::vector<SweepCell> cells;
  for (auto arch : architectures)
    for (auto len : lengths) {
      SweepCell c;
      c.architecture = arch;
      c.sequence_length = len;
      c.seed = config.seed + cells.size();
      cells.push_back(std::move(c));
    }

  // Datasets depend only on the length; build them once, serially.
  std::map<std::size_t, SequenceDataset> datasets;
  for (auto len : lengths)
    if (!datasets.count(len)) datasets.emplace(len, make_data(len));

  auto run_cell = [&](SweepCell& c) {
    try {
      TrainConfig cfg = config;
      cfg.seed = c.seed;
      auto model = make_model(make_spec(c.architecture, c.sequence_length), c.seed);
      c.result = train(*model, datasets.at(c.sequence_length), cfg);
      const std::size_t window = std::min(kEarlyNanWindow, c.result.telemetry.size());
      c.early_persistent_nan =
          window > 0 && std::none_of(c.result.telemetry.begin(),
                                     c.result.telemetry.begin() + static_cast<std::ptrdiff_t>(window),
                                     [](const EpochTelemetry& t) { return t.finite(); });
    } catch (const std::exception& e) {
      c.error = e.what();
      c.result.failed = true;
      c.result.failure_reason = e.what();
    }
  };

  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < cells.size(); i = next++) run_cell(cells[i]);
  };
  const std::size_t threads = std::clamp<std::size_t>(jobs, 1, cells.size());
  std::vector<std::thread> pool;
  for (std::size_t t = 1; t < threads; ++t) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();
  return cells;
}

// ---------------------------------------------------------------------------

std::string format_double(double v) {
  if (std::isnan(v)) return "NaN";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  return fmt::format("{}", v);
}

void write_telemetry_csv(const std::filesystem::path& path,
                         const std::vector<EpochTelemetry>& telemetry) {
  auto out = fmt::output_file(path.string());
  out.print("epoch,train_loss,val_loss,max_grad_norm,wall_time_s\n");
  for (const auto& t : telemetry)
    out.print("{},{},{},{},{}\n", t.epoch, format_double(t.train_loss),
              format_double(t.validation_loss), format_double(t.max_layer_grad_norm),
              format_double(t.wall_time_seconds));
}

void save_checkpoint(const Model& model, const Scaling& scaling, const std::filesystem::path& path) {
  json params = json::array();
  for (const auto& p : model.parameters())
    params.push_back({{"name", p.name},
                      {"shape", p.value.shape()},
                      {"non_negative", p.non_negative},
                      {"payload", encode_doubles(p.value.vec())}});
  json doc = {{"format_version", kCheckpointVersion},
              {"spec", model.spec()},
              {"scaling", {{"input", scaling.input}, {"target", scaling.target}}},
              {"parameters", std::move(params)}};
  std::ofstream out(path);
  if (!out) throw std::runtime_error("save_checkpoint: cannot open " + path.string());
  out << doc.dump(1) << '\n';
  if (!out) throw std::runtime_error("save_checkpoint: write failed for " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ParseError("load_checkpoint: cannot open " + path.string());
  json doc;
  try {
    doc = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ParseError(std::string("load_checkpoint: ") + e.what());
  }
  int version = 0;
  require_field(doc, "format_version", version);
  if (version != kCheckpointVersion)
    throw ParseError(fmt::format("field 'format_version': unsupported version {}", version));
  ModelSpec spec;
  require_field(doc, "spec", spec);
  Checkpoint ck;
  if (!doc.contains("scaling")) throw ParseError("missing field 'scaling'");
  require_field(doc["scaling"], "input", ck.scaling.input);
  require_field(doc["scaling"], "target", ck.scaling.target);
  try {
    ck.model = make_model(spec, 0);
  } catch (const ContractError& e) {
    throw ParseError(std::string("field 'spec': ") + e.what());
  }

  std::vector<json> entries;
  require_field(doc, "parameters", entries);
  std::map<std::string, const json*> by_name;
  for (const auto& e : entries) {
    std::string name;
    require_field(e, "name", name);
    by_name[name] = &e;
  }
  for (auto& p : ck.model->parameters()) {
    auto it = by_name.find(p.name);
    if (it == by_name.end()) throw ParseError(fmt::format("parameters: missing '{}'", p.name));
    const json& e = *it->second;
    Shape shape;
    bool non_negative = false;
    std::string payload;
    require_field(e, "shape", shape);
    require_field(e, "non_negative", non_negative);
    require_field(e, "payload", payload);
    if (shape != p.value.shape())
      throw ParseError(fmt::format("parameters.{}.shape: {} does not match spec {}", p.name,
                                   shape_str(shape), shape_str(p.value.shape())));
    if (non_negative != p.non_negative)
      throw ParseError(fmt::format("parameters.{}.non_negative: mismatch", p.name));
    auto values = decode_doubles(payload);
    if (values.size() != p.value.size())
      throw ParseError(fmt::format("parameters.{}.payload: {} values, expected {}", p.name,
                                   values.size(), p.value.size()));
    p.value = Tensor(shape, std::move(values));
    by_name.erase(it);
  }
  if (!by_name.empty())
    throw ParseError(fmt::format("parameters: unexpected '{}'", by_name.begin()->first));
  return ck;
}

}  // namespace icnn
