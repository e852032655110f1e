#include "icnn/building.hpp"

#include <fmt/format.h>
#include <fmt/os.h>

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <random>
#include <set>

namespace icnn {

namespace {

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

/// Uniform in [-1, 1), a pure function of its arguments.
double hash_noise(std::uint64_t seed, std::uint64_t step, std::uint64_t channel) {
  const std::uint64_t h = splitmix64(splitmix64(seed ^ (channel * 0x632BE59BD9B4E019ull)) + step);
  return static_cast<double>(h >> 11) * 0x1.0p-52 - 1.0;
}

constexpr std::size_t apartment_of(std::size_t zone) { return zone / 2; }

}  // namespace

// ---------------------------------------------------------------------------

TariffSchedule TariffSchedule::time_of_use() {
  return {{{0.0, 6.0, 0.214},
           {6.0, 16.0, 0.316},
           {16.0, 19.0, 0.502},
           {19.0, 22.0, 0.605},
           {22.0, 24.0, 0.214}}};
}

void TariffSchedule::validate() const {
  if (blocks.empty()) throw ContractError("tariff: no blocks");
  double expected = 0.0;
  for (const auto& b : blocks) {
    if (b.start_hour != expected)
      throw ContractError(fmt::format("tariff: block starting at {} leaves a gap or overlap at {}",
                                      b.start_hour, expected));
    if (!(b.end_hour > b.start_hour)) throw ContractError("tariff: empty block");
    if (!(b.price > 0.0)) throw ContractError("tariff: prices must be > 0");
    expected = b.end_hour;
  }
  if (expected != 24.0) throw ContractError("tariff: blocks must end at hour 24");
}

double tariff_price(std::size_t step, const TariffSchedule& schedule) {
  const double hour = static_cast<double>(step % kStepsPerDay) * kStepHours;
  for (const auto& b : schedule.blocks)
    if (hour >= b.start_hour && hour < b.end_hour) return b.price;
  throw ContractError(fmt::format("tariff: no block covers hour {}", hour));
}

// ---------------------------------------------------------------------------

RCParams RCParams::defaults() {
  RCParams p;
  p.capacitance.fill(4.0);
  p.u_ambient.fill(0.1);
  for (auto& row : p.coupling) row.fill(0.0);
  for (std::size_t a = 0; a < kApartments; ++a) {
    p.coupling[2 * a][2 * a + 1] = p.coupling[2 * a + 1][2 * a] = 0.5;
    if (a + 1 < kApartments)
      for (std::size_t z = 0; z < 2; ++z)
        p.coupling[2 * a + z][2 * a + 2 + z] = p.coupling[2 * a + 2 + z][2 * a + z] = 0.05;
  }
  p.appliance_kw.resize(kStepsPerDay);
  for (std::size_t k = 0; k < kStepsPerDay; ++k) {
    const double h = static_cast<double>(k) * kStepHours;
    double kw = 0.6;
    if (h >= 7.0 && h < 9.0) kw += 0.8;
    if (h >= 18.0 && h < 22.0) kw += 1.2;
    p.appliance_kw[k] = kw;
  }
  return p;
}

void RCParams::validate() const {
  for (std::size_t i = 0; i < kZones; ++i) {
    if (!(capacitance[i] > 0.0)) throw ContractError("RCParams: capacitances must be > 0");
    if (!(u_ambient[i] >= 0.0)) throw ContractError("RCParams: conductances must be >= 0");
    if (coupling[i][i] != 0.0) throw ContractError("RCParams: coupling diagonal must be zero");
    for (std::size_t j = 0; j < kZones; ++j) {
      if (!(coupling[i][j] >= 0.0)) throw ContractError("RCParams: conductances must be >= 0");
      if (coupling[i][j] != coupling[j][i]) throw ContractError("RCParams: coupling must be symmetric");
    }
  }
  if (appliance_kw.empty()) throw ContractError("RCParams: empty appliance profile");
  for (double v : appliance_kw)
    if (!(v >= 0.0)) throw ContractError("RCParams: appliance loads must be >= 0");
  if (!(capacity_kw >= 0.0 && thermostat_gain >= 0.0)) throw ContractError("RCParams: negative heater");
  if (!(cop_min >= 1.0)) throw ContractError("RCParams: COP floor must be >= 1");
}

double RCParams::ambient(std::size_t step) const {
  const double hour = static_cast<double>(step % kStepsPerDay) * kStepHours;
  return ambient_mean +
         ambient_amplitude * std::cos(2.0 * std::numbers::pi * (hour - ambient_peak_hour) / 24.0) +
         ambient_noise * hash_noise(noise_seed, step, 0);
}

double RCParams::appliance(std::size_t step) const {
  return appliance_kw[step % appliance_kw.size()];
}

double RCParams::cop(double t_ambient) const {
  return std::max(cop_min, cop_base + cop_slope * t_ambient);
}

namespace {

double return_temperature(const ZoneTemps& t, const RCParams& p) {
  double num = 0.0, den = 0.0;
  for (std::size_t i = 0; i < kZones; ++i) {
    num += p.capacitance[i] * t[i];
    den += p.capacitance[i];
  }
  return num / den + p.return_offset;
}

}  // namespace

PlantState initial_state(const RCParams& params, double temperature, std::size_t clock) {
  PlantState s;
  s.zone_temps.fill(temperature);
  s.hp_return_temp = return_temperature(s.zone_temps, params);
  s.clock = clock;
  return s;
}

PlantState plant_step(const PlantState& state, const Setpoints& setpoints, const RCParams& p) {
  for (double sp : setpoints)
    if (!(sp >= 10.0 && sp <= 35.0))
      throw ContractError(fmt::format("plant_step: setpoint {} outside [10, 35] degC", sp));
  for (double t : state.zone_temps)
    if (!std::isfinite(t)) throw NumericError("plant_step: non-finite zone temperature");

  const double t_amb = p.ambient(state.clock);
  std::array<double, kApartments> q{};
  for (std::size_t a = 0; a < kApartments; ++a) {
    const std::size_t z0 = 2 * a, z1 = 2 * a + 1;
    const double t_ap = (p.capacitance[z0] * state.zone_temps[z0] + p.capacitance[z1] * state.zone_temps[z1]) /
                        (p.capacitance[z0] + p.capacitance[z1]);
    q[a] = std::min(p.capacity_kw, p.thermostat_gain * std::max(0.0, setpoints[a] - t_ap));
  }

  PlantState next;
  next.clock = state.clock + 1;
  for (std::size_t i = 0; i < kZones; ++i) {
    double flow = 0.5 * q[apartment_of(i)] + p.u_ambient[i] * (t_amb - state.zone_temps[i]);
    for (std::size_t j = 0; j < kZones; ++j)
      flow += p.coupling[i][j] * (state.zone_temps[j] - state.zone_temps[i]);
    next.zone_temps[i] = state.zone_temps[i] + kStepHours / p.capacitance[i] * flow;
    if (!std::isfinite(next.zone_temps[i])) throw NumericError("plant_step: non-finite zone temperature");
  }
  const double q_total = q[0] + q[1] + q[2] + q[3];
  next.step_heat_delivered = q_total * kStepHours;
  next.step_energy_hvac = next.step_heat_delivered / p.cop(t_amb);
  next.step_energy_appliances = p.appliance(state.clock) * kStepHours;
  next.step_energy_total = next.step_energy_hvac + next.step_energy_appliances;
  next.hp_return_temp = return_temperature(next.zone_temps, p);
  return next;
}

// ---------------------------------------------------------------------------

std::size_t DataTable::index(const std::string& name) const {
  auto it = std::find(names.begin(), names.end(), name);
  if (it == names.end()) throw ContractError(fmt::format("table: no column '{}'", name));
  return static_cast<std::size_t>(it - names.begin());
}

void DataTable::add(std::string name, std::vector<double> values) {
  if (!columns.empty() && values.size() != rows())
    throw DimensionError(fmt::format("table: column '{}' has {} rows, expected {}", name,
                                     values.size(), rows()));
  if (std::find(names.begin(), names.end(), name) != names.end())
    throw ContractError(fmt::format("table: duplicate column '{}'", name));
  names.push_back(std::move(name));
  columns.push_back(std::move(values));
}

DataTable DataTable::select(const std::vector<std::string>& wanted) const {
  DataTable out;
  for (const auto& n : wanted) out.add(n, column(n));
  return out;
}

const std::vector<std::string>& state_features() {
  static const std::vector<std::string> names = {"Z01_T", "Z02_T", "Z03_T", "Z04_T",
                                                 "Z05_T", "Z06_T", "Z07_T", "Z08_T",
                                                 "Fa_E_All", "Fa_E_Appl", "Bd_T_HP_return"};
  return names;
}

const std::vector<std::string>& control_features() {
  static const std::vector<std::string> names = {"P1_T_Thermostat_sp_out", "P2_T_Thermostat_sp_out",
                                                 "P3_T_Thermostat_sp_out", "P4_T_Thermostat_sp_out"};
  return names;
}

std::vector<std::string> model_input_features() {
  auto out = state_features();
  out.insert(out.end(), control_features().begin(), control_features().end());
  return out;
}

namespace {

std::vector<double> state_vector(const PlantState& s) {
  std::vector<double> v(s.zone_temps.begin(), s.zone_temps.end());
  v.push_back(s.step_energy_total);
  v.push_back(s.step_energy_appliances);
  v.push_back(s.hp_return_temp);
  return v;
}

}  // namespace

GeneratedData generate_dataset(std::size_t days, std::uint64_t seed, const RCParams& params,
                               const ExcitationPolicy& policy, double initial_temp) {
  if (days < 1) throw ContractError("generate_dataset: days must be >= 1");
  if (!(policy.low < policy.high) || policy.min_hold < 1 || policy.max_hold < policy.min_hold)
    throw ContractError("generate_dataset: invalid excitation policy");
  params.validate();

  const std::size_t steps = days * kStepsPerDay;
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> level(policy.low, policy.high);
  std::uniform_int_distribution<std::size_t> hold(policy.min_hold, policy.max_hold);

  GeneratedData out;
  out.trajectory.reserve(steps);
  out.trajectory.push_back(initial_state(params, initial_temp));
  std::vector<Setpoints> applied;
  Setpoints sp{};
  std::array<std::size_t, kApartments> remaining{};
  for (std::size_t k = 0; k + 1 < steps; ++k) {
    for (std::size_t a = 0; a < kApartments; ++a) {
      if (remaining[a] == 0) {
        sp[a] = level(rng);
        remaining[a] = hold(rng);
      }
      --remaining[a];
    }
    applied.push_back(sp);
    out.trajectory.push_back(plant_step(out.trajectory.back(), sp, params));
  }

  const std::size_t rows = steps - 1;
  const auto& state_names = state_features();
  std::vector<std::vector<double>> feat(state_names.size(), std::vector<double>(rows));
  std::vector<std::vector<double>> targ(state_names.size(), std::vector<double>(rows));
  for (std::size_t k = 0; k < rows; ++k) {
    auto now = state_vector(out.trajectory[k]);
    auto next = state_vector(out.trajectory[k + 1]);
    for (std::size_t c = 0; c < now.size(); ++c) {
      feat[c][k] = now[c];
      targ[c][k] = next[c];
    }
  }
  for (std::size_t c = 0; c < state_names.size(); ++c) {
    out.features.add(state_names[c], feat[c]);
    out.targets.add(state_names[c] + "_next", targ[c]);
  }
  for (std::size_t a = 0; a < kApartments; ++a) {
    std::vector<double> col(rows);
    for (std::size_t k = 0; k < rows; ++k) col[k] = applied[k][a];
    out.features.add(control_features()[a], std::move(col));
  }

  // Decoys: calendar, weather, redundant meters and pure noise.
  std::vector<double> step(rows), month(rows), hour(rows), ext_t(rows), supply(rows), pw_all(rows),
      e_hvac(rows), pw_hp(rows), noise_a(rows), noise_b(rows);
  for (std::size_t k = 0; k < rows; ++k) {
    const auto& s = out.trajectory[k];
    const std::size_t day = (s.clock / kStepsPerDay) % 365;
    step[k] = static_cast<double>(s.clock);
    month[k] = 1.0 + std::floor(static_cast<double>(day) / (365.0 / 12.0));
    hour[k] = static_cast<double>(s.clock % kStepsPerDay) * kStepHours;
    ext_t[k] = params.ambient(s.clock);
    supply[k] = s.hp_return_temp + 3.0 + 0.4 * s.step_energy_hvac / kStepHours +
                0.2 * hash_noise(seed, k, 1);
    pw_all[k] = s.step_energy_total / kStepHours * (1.0 + 0.05 * hash_noise(seed, k, 2));
    e_hvac[k] = s.step_energy_hvac;
    pw_hp[k] = s.step_energy_hvac / kStepHours * (1.0 + 0.05 * hash_noise(seed, k, 3));
    noise_a[k] = hash_noise(seed, k, 4);
    noise_b[k] = hash_noise(seed, k, 5);
  }
  out.features.add("step", std::move(step));
  out.features.add("Month", std::move(month));
  out.features.add("hour", std::move(hour));
  out.features.add("Ext_T", std::move(ext_t));
  out.features.add("Bd_T_HP_supply", std::move(supply));
  out.features.add("Fa_Pw_All", std::move(pw_all));
  out.features.add("Fa_E_HVAC", std::move(e_hvac));
  out.features.add("HVAC_Pw_HP", std::move(pw_hp));
  out.features.add("noise_a", std::move(noise_a));
  out.features.add("noise_b", std::move(noise_b));
  return out;
}

SequenceDataset make_windows(const DataTable& features, const DataTable& targets,
                             const std::vector<std::string>& inputs, std::size_t length) {
  const std::size_t rows = features.rows();
  if (length < 1 || rows < length) throw ContractError("make_windows: too few rows for the window");
  if (targets.rows() != rows) throw DimensionError("make_windows: feature and target row counts differ");
  const std::size_t n = rows - length + 1, d = inputs.size(), d_out = targets.names.size();
  std::vector<const std::vector<double>*> cols;
  for (const auto& name : inputs) cols.push_back(&features.column(name));
  SequenceDataset out{Tensor({n, length, d}), Tensor({n, d_out})};
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t t = 0; t < length; ++t)
      for (std::size_t j = 0; j < d; ++j) out.inputs.at(i, t, j) = (*cols[j])[i + t];
    for (std::size_t j = 0; j < d_out; ++j) out.targets.at(i, j) = targets.columns[j][i + length - 1];
  }
  return out;
}

void write_table_csv(const std::filesystem::path& path, const DataTable& a, const DataTable* b) {
  auto out = fmt::output_file(path.string());
  std::vector<const std::vector<double>*> cols;
  std::vector<std::string> names = a.names;
  for (const auto& c : a.columns) cols.push_back(&c);
  if (b) {
    if (b->rows() != a.rows()) throw DimensionError("write_table_csv: row counts differ");
    names.insert(names.end(), b->names.begin(), b->names.end());
    for (const auto& c : b->columns) cols.push_back(&c);
  }
  out.print("{}\n", fmt::join(names, ","));
  for (std::size_t r = 0; r < a.rows(); ++r) {
    for (std::size_t c = 0; c < cols.size(); ++c)
      out.print("{}{}", c == 0 ? "" : ",", format_double((*cols[c])[r]));
    out.print("\n");
  }
}

// ---------------------------------------------------------------------------

namespace {

std::vector<std::size_t> equal_frequency_bins(const std::vector<double>& x, std::size_t bins) {
  const std::size_t n = x.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return x[a] < x[b]; });
  std::vector<std::size_t> bin(n);
  std::size_t group_bin = 0;
  for (std::size_t r = 0; r < n; ++r) {
    if (r == 0 || x[order[r]] != x[order[r - 1]]) group_bin = r * bins / n;
    bin[order[r]] = group_bin;
  }
  return bin;
}

}  // namespace

double mutual_information(const std::vector<double>& x, const std::vector<double>& y,
                          std::size_t bins) {
  if (x.size() != y.size()) throw DimensionError("mutual_information: column lengths differ");
  if (x.size() < 100) throw ContractError("mutual_information: needs at least 100 samples");
  if (bins < 4) throw ContractError("mutual_information: needs at least 4 bins");
  const std::size_t n = x.size();
  const auto bx = equal_frequency_bins(x, bins), by = equal_frequency_bins(y, bins);
  std::vector<double> joint(bins * bins, 0.0), px(bins, 0.0), py(bins, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    joint[bx[i] * bins + by[i]] += 1.0;
    px[bx[i]] += 1.0;
    py[by[i]] += 1.0;
  }
  const double dn = static_cast<double>(n);
  double mi = 0.0;
  for (std::size_t a = 0; a < bins; ++a)
    for (std::size_t b = 0; b < bins; ++b) {
      const double c = joint[a * bins + b];
      if (c > 0.0) mi += c / dn * std::log(c * dn / (px[a] * py[b]));
    }
  return std::max(0.0, mi);
}

double pearson(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size() || x.empty()) throw DimensionError("pearson: column lengths differ");
  const double n = static_cast<double>(x.size());
  const double mx = std::accumulate(x.begin(), x.end(), 0.0) / n;
  const double my = std::accumulate(y.begin(), y.end(), 0.0) / n;
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxy += (x[i] - mx) * (y[i] - my);
    sxx += (x[i] - mx) * (x[i] - mx);
    syy += (y[i] - my) * (y[i] - my);
  }
  if (sxx == 0.0 || syy == 0.0) return std::numeric_limits<double>::quiet_NaN();
  return sxy / std::sqrt(sxx * syy);
}

FeatureSelection select_features(const DataTable& table, const DataTable& targets,
                                 const std::vector<std::string>& mandatory,
                                 double mi_retain_fraction, double rho_threshold, std::size_t bins) {
  if (!(mi_retain_fraction > 0.0 && mi_retain_fraction <= 1.0))
    throw ContractError("select_features: retain fraction must lie in (0, 1]");
  if (targets.names.empty()) throw ContractError("select_features: no targets");
  const std::set<std::string> must(mandatory.begin(), mandatory.end());
  for (const auto& m : mandatory) table.index(m);

  const std::size_t n = table.names.size();
  std::vector<double> mi(n, 0.0);
  for (std::size_t c = 0; c < n; ++c)
    for (const auto& t : targets.columns)
      mi[c] = std::max(mi[c], mutual_information(table.columns[c], t, bins));

  FeatureSelection sel;
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return mi[a] > mi[b]; });
  for (auto c : order) sel.mi_ranking.emplace_back(table.names[c], mi[c]);

  const auto top = static_cast<std::size_t>(std::ceil(mi_retain_fraction * static_cast<double>(n) - 1e-9));
  std::vector<bool> kept(n, false);
  for (std::size_t r = 0; r < n; ++r)
    if (r < top || must.count(table.names[order[r]])) kept[order[r]] = true;
  for (std::size_t c = 0; c < n; ++c)
    if (kept[c]) sel.retained_stage1.push_back(table.names[c]);

  struct Pair {
    std::size_t i, j;
    double rho;
  };
  std::vector<Pair> pairs;
  std::vector<bool> degenerate(n, false);
  for (std::size_t i = 0; i < n; ++i) {
    if (!kept[i]) continue;
    const auto& col = table.columns[i];
    if (std::all_of(col.begin(), col.end(), [&](double v) { return v == col.front(); })) {
      degenerate[i] = true;
      sel.notes.push_back(fmt::format("{}: zero variance, excluded from Pearson pruning", table.names[i]));
    }
  }
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) {
      if (!kept[i] || !kept[j] || degenerate[i] || degenerate[j]) continue;
      const double rho = pearson(table.columns[i], table.columns[j]);
      if (std::abs(rho) > rho_threshold) pairs.push_back({i, j, rho});
    }
  std::stable_sort(pairs.begin(), pairs.end(),
                   [](const Pair& a, const Pair& b) { return std::abs(a.rho) > std::abs(b.rho); });
  for (const auto& p : pairs) {
    if (!kept[p.i] || !kept[p.j]) continue;
    const bool mi_ = must.count(table.names[p.i]) > 0, mj = must.count(table.names[p.j]) > 0;
    std::size_t drop;
    if (mi_ && mj) {
      sel.notes.push_back(fmt::format("{} and {}: |rho|={:.3f} but both mandatory", table.names[p.i],
                                      table.names[p.j], std::abs(p.rho)));
      continue;
    }
    if (mi_) drop = p.j;
    else if (mj) drop = p.i;
    else drop = mi[p.i] < mi[p.j] ? p.i : p.j;  // equal MI drops the later column
    const std::size_t keep = drop == p.i ? p.j : p.i;
    kept[drop] = false;
    sel.drops.push_back({table.names[drop], table.names[keep], p.rho, mi[drop], mi[keep]});
  }
  for (std::size_t c = 0; c < n; ++c)
    if (kept[c]) sel.selected.push_back(table.names[c]);
  return sel;
}

json to_json(const FeatureSelection& sel) {
  json ranking = json::array();
  for (const auto& [name, mi] : sel.mi_ranking) ranking.push_back({{"feature", name}, {"mi", mi}});
  json drops = json::array();
  for (const auto& d : sel.drops)
    drops.push_back({{"dropped", d.dropped},
                     {"kept", d.kept},
                     {"rho", d.rho},
                     {"mi_dropped", d.mi_dropped},
                     {"mi_kept", d.mi_kept}});
  return {{"mi_ranking", ranking},
          {"retained_stage1", sel.retained_stage1},
          {"pearson_drops", drops},
          {"selected", sel.selected},
          {"notes", sel.notes}};
}

std::string format_drop_table(const FeatureSelection& sel) {
  std::string out = "Dropped Feature | Reason (Correlated with)\n";
  for (const auto& d : sel.drops)
    out += fmt::format("{} | {} (rho={:.3f})\n", d.dropped, d.kept, d.rho);
  return out;
}

}  // namespace icnn
