#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <limits>
#include <memory>
#include <string>
#include <vector>

#include "icnn/models.hpp"

namespace icnn {

/// Windows of past feature rows and their next-step targets.
struct SequenceDataset {
  Tensor inputs;   // [n, T, d_in]
  Tensor targets;  // [n, d_out]

  std::size_t size() const { return inputs.rank() == 0 ? 0 : inputs.dim(0); }
  SequenceDataset gather(const std::vector<std::size_t>& rows) const;
};

/// Per-column affine map onto [0, 1]; constant columns map to 0.
struct MinMaxScaler {
  std::vector<double> lo, hi;

  /// Column bounds over the last axis of `data`.
  static MinMaxScaler fit(const Tensor& data);
  std::size_t width() const { return lo.size(); }
  double range(std::size_t j) const;
  Tensor transform(const Tensor& data) const;
  Tensor inverse(const Tensor& data) const;
};

struct Scaling {
  MinMaxScaler input, target;
};

struct TrainConfig {
  double learning_rate = 1e-4;
  std::size_t batch_size = 256;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::size_t max_epochs = 100;
  std::size_t patience = 10;
  std::uint64_t seed = 0;
  double validation_fraction = 0.2;
  /// Global-norm clipping threshold; 0 disables clipping.
  double grad_clip = 0.0;

  void validate() const;
};

struct EpochTelemetry {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double validation_loss = 0.0;
  double max_layer_grad_norm = 0.0;
  double wall_time_seconds = 0.0;

  bool finite() const;
};

struct AdamState {
  std::size_t step = 0;
  std::vector<Tensor> m, v;
};

/// Largest per-parameter l2 gradient norm; NaN if any gradient is non-finite.
double max_layer_grad_norm(const Gradients& grads);

/// One bias-corrected Adam update followed by the non-negativity projection.
/// Returns false, leaving parameters and state untouched, when any gradient
/// entry is non-finite.
bool adam_step(std::vector<Parameter>& params, const Gradients& grads, AdamState& state,
               const TrainConfig& config);

/// Validation-loss patience counter.
class EarlyStopping {
 public:
  explicit EarlyStopping(std::size_t patience);
  /// Records one epoch; returns true once `patience` consecutive epochs
  /// failed to improve on the best loss. Non-finite losses never improve.
  bool update(double validation_loss);
  bool improved() const { return improved_; }
  double best() const { return best_; }
  std::size_t best_epoch() const { return best_epoch_; }

 private:
  std::size_t patience_;
  std::size_t epoch_ = 0;
  std::size_t stale_ = 0;
  std::size_t best_epoch_ = 0;
  double best_ = std::numeric_limits<double>::infinity();
  bool improved_ = false;
};

struct TrainResult {
  std::vector<Parameter> best_parameters;
  std::vector<EpochTelemetry> telemetry;
  Scaling scaling;
  std::size_t best_epoch = 0;
  double best_validation_loss = std::numeric_limits<double>::quiet_NaN();
  std::size_t nan_steps = 0;
  bool failed = false;
  std::string failure_reason;

  double mean_epoch_seconds() const;
};

/// Called after every backward pass with the raw gradients, before the
/// optimizer touches the parameters.
using StepObserver = std::function<void(std::size_t epoch, const Gradients& grads,
                                        const std::vector<Parameter>& params)>;

/// Mini-batch Adam on the mean-squared error of min-max scaled targets. The
/// last `validation_fraction` of the samples (in order) is held out. The
/// model ends up holding the best-validation parameters.
TrainResult train(Model& model, const SequenceDataset& data, const TrainConfig& config,
                  const StepObserver& observer = {});

/// Mean-squared error of the model on already scaled data.
double evaluate_mse(const Model& model, const SequenceDataset& scaled, std::size_t batch_size);

/// Model forward on raw inputs with the scaling applied on both ends.
Tensor predict(const Model& model, const Scaling& scaling, const Tensor& raw_inputs,
               std::size_t batch_size = 1024);

struct SweepCell {
  Architecture architecture = Architecture::IcEot;
  std::size_t sequence_length = 0;
  std::uint64_t seed = 0;
  TrainResult result;
  /// Non-finite loss in every one of the first few epochs.
  bool early_persistent_nan = false;
  std::string error;
};

/// Trains every (architecture, length) cell on data from `make_data`. Cell i
/// uses seed config.seed + i for both initialisation and shuffling. Up to
/// `jobs` cells run concurrently; failures are recorded per cell.
std::vector<SweepCell> stability_sweep(
    const std::vector<Architecture>& architectures, const std::vector<std::size_t>& lengths,
    const std::function<SequenceDataset(std::size_t length)>& make_data,
    const std::function<ModelSpec(Architecture, std::size_t length)>& make_spec,
    const TrainConfig& config, std::size_t jobs = 1);

/// Header `epoch,train_loss,val_loss,max_grad_norm,wall_time_s`.
void write_telemetry_csv(const std::filesystem::path& path,
                         const std::vector<EpochTelemetry>& telemetry);

/// Shortest round-trip decimal form; non-finite values as `NaN`/`inf`/`-inf`.
std::string format_double(double v);

struct Checkpoint {
  std::unique_ptr<Model> model;
  Scaling scaling;
};

void save_checkpoint(const Model& model, const Scaling& scaling, const std::filesystem::path& path);
/// Throws ParseError naming the offending field.
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace icnn
