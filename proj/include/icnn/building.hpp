#pragma once

// Four-apartment, eight-zone RC thermal plant with a heat pump, a daily
// time-of-use tariff, dataset generation and the two-stage feature filter.

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "icnn/json_io.hpp"
#include "icnn/training.hpp"

namespace icnn {

inline constexpr std::size_t kZones = 8;
inline constexpr std::size_t kApartments = 4;
inline constexpr std::size_t kStepsPerDay = 96;
inline constexpr double kStepHours = 0.25;

using ZoneTemps = std::array<double, kZones>;
using Setpoints = std::array<double, kApartments>;

struct TariffBlock {
  double start_hour = 0.0;
  double end_hour = 0.0;
  double price = 0.0;  // EUR/kWh
};

struct TariffSchedule {
  std::vector<TariffBlock> blocks;

  /// Off-peak 0.214 (22-6), mid-peak 0.316 (6-16), high-peak 0.502 (16-19),
  /// super-peak 0.605 (19-22).
  static TariffSchedule time_of_use();
  /// Blocks must be ordered, contiguous, cover [0, 24) and carry prices > 0.
  void validate() const;
};

/// Price of the block containing the step's clock time; blocks include their
/// start hour and exclude their end hour.
double tariff_price(std::size_t step, const TariffSchedule& schedule);

struct RCParams {
  ZoneTemps capacitance;  // kWh/degC
  ZoneTemps u_ambient;    // kW/degC
  std::array<ZoneTemps, kZones> coupling;  // kW/degC, symmetric, zero diagonal
  double cop_base = 3.5;
  double cop_slope = 0.05;  // per degC of ambient
  double cop_min = 1.0;
  double capacity_kw = 6.0;        // per apartment
  double thermostat_gain = 5.0;    // kW/degC
  double return_offset = 2.0;      // degC above the mean zone temperature
  double ambient_mean = 6.0;
  double ambient_amplitude = 4.0;
  double ambient_peak_hour = 15.0;
  double ambient_noise = 0.5;      // half-width of the uniform noise
  std::uint64_t noise_seed = 1;
  std::vector<double> appliance_kw;  // one value per step of the day

  static RCParams defaults();
  void validate() const;

  double ambient(std::size_t step) const;
  double appliance(std::size_t step) const;
  double cop(double t_ambient) const;
};

struct PlantState {
  ZoneTemps zone_temps{};
  double hp_return_temp = 0.0;
  double step_energy_total = 0.0;       // kWh over the last step
  double step_energy_appliances = 0.0;  // kWh
  double step_energy_hvac = 0.0;        // kWh electrical
  double step_heat_delivered = 0.0;     // kWh thermal
  std::size_t clock = 0;
};

PlantState initial_state(const RCParams& params, double temperature = 21.0, std::size_t clock = 0);

/// One 15-minute Euler step under the given thermostat setpoints.
PlantState plant_step(const PlantState& state, const Setpoints& setpoints, const RCParams& params);

// ---------------------------------------------------------------------------

/// Column-major table of named double columns.
struct DataTable {
  std::vector<std::string> names;
  std::vector<std::vector<double>> columns;

  std::size_t rows() const { return columns.empty() ? 0 : columns.front().size(); }
  std::size_t index(const std::string& name) const;
  const std::vector<double>& column(const std::string& name) const { return columns[index(name)]; }
  void add(std::string name, std::vector<double> values);
  DataTable select(const std::vector<std::string>& names) const;
};

/// Z01_T..Z08_T, Fa_E_All, Fa_E_Appl, Bd_T_HP_return.
const std::vector<std::string>& state_features();
/// P1_T_Thermostat_sp_out..P4_T_Thermostat_sp_out.
const std::vector<std::string>& control_features();
/// state_features() followed by control_features().
std::vector<std::string> model_input_features();

struct ExcitationPolicy {
  double low = 16.0;
  double high = 26.0;
  std::size_t min_hold = 2;
  std::size_t max_hold = 8;
};

struct GeneratedData {
  /// Row k: state at step k and the setpoints applied over [k, k+1), plus
  /// decoy columns.
  DataTable features;
  /// Row k: state_features() at step k+1, suffixed "_next".
  DataTable targets;
  std::vector<PlantState> trajectory;
};

/// Rolls the plant for days * 96 steps under a random hold-and-jump setpoint
/// excitation; yields days * 96 - 1 rows.
GeneratedData generate_dataset(std::size_t days, std::uint64_t seed, const RCParams& params,
                               const ExcitationPolicy& policy = {}, double initial_temp = 21.0);

/// Sliding windows of `length` rows of `inputs` with the target row aligned
/// to the last window row; days * 96 - length samples for generated data.
SequenceDataset make_windows(const DataTable& features, const DataTable& targets,
                             const std::vector<std::string>& inputs, std::size_t length);

void write_table_csv(const std::filesystem::path& path, const DataTable& a, const DataTable* b = nullptr);

// ---------------------------------------------------------------------------

/// Plug-in estimate on an equal-frequency histogram (tied values share a
/// bin), in nats. A constant column gives 0.
double mutual_information(const std::vector<double>& x, const std::vector<double>& y,
                          std::size_t bins = 16);

double pearson(const std::vector<double>& x, const std::vector<double>& y);

struct PearsonDrop {
  std::string dropped, kept;
  double rho = 0.0;
  double mi_dropped = 0.0, mi_kept = 0.0;
};

struct FeatureSelection {
  std::vector<std::string> selected;
  std::vector<std::pair<std::string, double>> mi_ranking;  // descending
  std::vector<std::string> retained_stage1;
  std::vector<PearsonDrop> drops;
  std::vector<std::string> notes;
};

/// Stage 1 keeps the top ceil(fraction * n) features by maximum MI over the
/// targets plus every mandatory feature; stage 2 visits pairs by descending
/// |rho| and drops the lower-MI member of any pair above the threshold
/// (ties drop the later column, mandatory features are never dropped).
FeatureSelection select_features(const DataTable& table, const DataTable& targets,
                                 const std::vector<std::string>& mandatory,
                                 double mi_retain_fraction = 0.8, double rho_threshold = 0.9,
                                 std::size_t bins = 16);

json to_json(const FeatureSelection& sel);
/// "Dropped Feature | Reason (Correlated with)" table, one row per drop.
std::string format_drop_table(const FeatureSelection& sel);

}  // namespace icnn
