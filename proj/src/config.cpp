#include "icnn/cli.hpp"

#include <openssl/evp.h>

#include <array>
#include <concepts>
#include <map>
#include <set>
#include <type_traits>

#include <fmt/format.h>

namespace icnn {

ModelSpec ModelOverrides::apply(ModelSpec spec) const {
  if (model_dim) spec.model_dim = model_dim;
  if (ff_dim) spec.ff_dim = ff_dim;
  if (num_heads) spec.num_heads = num_heads;
  if (num_layers) spec.num_layers = num_layers;
  spec.r = r;
  spec.tau = tau;
  return spec;
}

TrainSection::TrainSection() {
  train.learning_rate = 1e-3;
  train.batch_size = 64;
  train.max_epochs = 100;
  train.patience = 10;
}

SweepSection::SweepSection() {
  train.learning_rate = 1e-3;
  train.batch_size = 64;
  train.max_epochs = 30;
  train.patience = 30;
}

BenchSection::BenchSection() { solver.max_iterations = 20; }

VerifySection::VerifySection() {
  train.learning_rate = 1e-3;
  train.batch_size = 32;
  train.max_epochs = 30;
  train.patience = 30;
}

std::string cli_name(Architecture arch) {
  switch (arch) {
    case Architecture::IcEot: return "iceot";
    case Architecture::IcLstm: return "iclstm";
    case Architecture::Eot: return "eot";
    case Architecture::Lstm: return "lstm";
    case Architecture::Icfnn: return "icfnn";
    case Architecture::Icrnn: return "icrnn";
  }
  return "unknown";
}

std::string sha256_hex(const std::string& bytes) {
  std::array<unsigned char, EVP_MAX_MD_SIZE> digest{};
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), digest.data(), &len, EVP_sha256(), nullptr) != 1)
    throw NumericError("sha256: digest failed");
  std::string hex;
  hex.reserve(2 * len);
  for (unsigned int i = 0; i < len; ++i) hex += fmt::format("{:02x}", digest[i]);
  return hex;
}

namespace {

// Each section lists its keys once; Reader and Writer walk the same list.

template <class V, class T>
  requires std::same_as<std::remove_const_t<T>, TariffBlock>
void fields(V& v, T& b) {
  v("start_hour", b.start_hour);
  v("end_hour", b.end_hour);
  v("price", b.price);
}

template <class V, class T>
  requires std::same_as<std::remove_const_t<T>, TariffSchedule>
void fields(V& v, T& s) {
  v("blocks", s.blocks);
}

template <class V, class T>
  requires std::same_as<std::remove_const_t<T>, RCParams>
void fields(V& v, T& p) {
  v("capacitance", p.capacitance);
  v("u_ambient", p.u_ambient);
  v("coupling", p.coupling);
  v("cop_base", p.cop_base);
  v("cop_slope", p.cop_slope);
  v("cop_min", p.cop_min);
  v("capacity_kw", p.capacity_kw);
  v("thermostat_gain", p.thermostat_gain);
  v("return_offset", p.return_offset);
  v("ambient_mean", p.ambient_mean);
  v("ambient_amplitude", p.ambient_amplitude);
  v("ambient_peak_hour", p.ambient_peak_hour);
  v("ambient_noise", p.ambient_noise);
  v("noise_seed", p.noise_seed);
  v("appliance_kw", p.appliance_kw);
}

template <class V, class T>
  requires std::same_as<std::remove_const_t<T>, ExcitationPolicy>
void fields(V& v, T& e) {
  v("low", e.low);
  v("high", e.high);
  v("min_hold", e.min_hold);
  v("max_hold", e.max_hold);
}

template <class V, class T>
  requires std::same_as<std::remove_const_t<T>, DatasetSection>
void fields(V& v, T& d) {
  v("days", d.days);
  v("initial_temp", d.initial_temp);
  v("excitation", d.excitation);
}

// The seed is not a key: every command derives it from the global seed.
template <class V, class T>
  requires std::same_as<std::remove_const_t<T>, TrainConfig>
void fields(V& v, T& c) {
  v("learning_rate", c.learning_rate);
  v("batch_size", c.batch_size);
  v("beta1", c.beta1);
  v("beta2", c.beta2);
  v("eps", c.eps);
  v("max_epochs", c.max_epochs);
  v("patience", c.patience);
  v("validation_fraction", c.validation_fraction);
  v("grad_clip", c.grad_clip);
}

template <class V, class T>
  requires std::same_as<std::remove_const_t<T>, FitConfig>
void fields(V& v, T& c) {
  v("n_train", c.n_train);
  v("n_test", c.n_test);
  v("grid_size", c.grid_size);
  v("convexity_probes", c.convexity_probes);
  v("model_dim", c.model_dim);
  v("ff_dim", c.ff_dim);
  v("train", c.train);
}

template <class V, class T>
  requires std::same_as<std::remove_const_t<T>, FeatureSection>
void fields(V& v, T& f) {
  v("mi_retain_fraction", f.mi_retain_fraction);
  v("rho_threshold", f.rho_threshold);
  v("bins", f.bins);
  v("mandatory", f.mandatory);
}

template <class V, class T>
  requires std::same_as<std::remove_const_t<T>, ModelOverrides>
void fields(V& v, T& m) {
  v("model_dim", m.model_dim);
  v("ff_dim", m.ff_dim);
  v("num_heads", m.num_heads);
  v("num_layers", m.num_layers);
  v("r", m.r);
  v("tau", m.tau);
}

template <class V, class T>
  requires std::same_as<std::remove_const_t<T>, TrainSection>
void fields(V& v, T& s) {
  v("architecture", s.architecture);
  v("sequence_length", s.sequence_length);
  v("test_days", s.test_days);
  v("model", s.model);
  v("train", s.train);
}

template <class V, class T>
  requires std::same_as<std::remove_const_t<T>, SweepSection>
void fields(V& v, T& s) {
  v("architectures", s.architectures);
  v("lengths", s.lengths);
  v("days", s.days);
  v("model", s.model);
  v("train", s.train);
}

template <class V, class T>
  requires std::same_as<std::remove_const_t<T>, SolverOptions>
void fields(V& v, T& o) {
  v("max_iterations", o.max_iterations);
  v("tolerance", o.tolerance);
  v("initial_step", o.initial_step);
  v("shrink", o.shrink);
  v("armijo_c1", o.armijo_c1);
  v("max_backtracks", o.max_backtracks);
  v("multistart", o.multistart);
}

template <class V, class T>
  requires std::same_as<std::remove_const_t<T>, MpcSection>
void fields(V& v, T& m) {
  v("checkpoint", m.checkpoint);
  v("horizon", m.horizon);
  v("u_min", m.u_min);
  v("u_max", m.u_max);
  v("t_min", m.t_min);
  v("t_max", m.t_max);
  v("comfort_weight", m.comfort_weight);
  v("baseline_setpoint", m.baseline_setpoint);
  v("steps", m.steps);
  v("warmup", m.warmup);
  v("initial_temp", m.initial_temp);
  v("solver", m.solver);
}

template <class V, class T>
  requires std::same_as<std::remove_const_t<T>, BenchSection>
void fields(V& v, T& b) {
  v("checkpoints", b.checkpoints);
  v("horizons", b.horizons);
  v("solver", b.solver);
}

template <class V, class T>
  requires std::same_as<std::remove_const_t<T>, VerifySection>
void fields(V& v, T& s) {
  v("checkpoint", s.checkpoint);
  v("architectures", s.architectures);
  v("sequence_length", s.sequence_length);
  v("n_train", s.n_train);
  v("train", s.train);
  v("probes", s.probes);
  v("monotonicity_probes", s.monotonicity_probes);
  v("lo", s.lo);
  v("hi", s.hi);
  v("tolerance", s.tolerance);
}

template <class V, class T>
  requires std::same_as<std::remove_const_t<T>, RunConfig>
void fields(V& v, T& c) {
  v("seed", c.seed);
  v("output_dir", c.output_dir);
  v("plant", c.plant);
  v("tariff", c.tariff);
  v("dataset", c.dataset);
  v("fit_surface", c.fit_surface);
  v("select_features", c.select_features);
  v("train", c.train);
  v("stability_sweep", c.stability_sweep);
  v("mpc", c.mpc);
  v("bench_solver", c.bench_solver);
  v("verify_convexity", c.verify_convexity);
}

struct Reader;
struct Writer;

template <class T>
concept Section = requires(Reader& r, T& t) { fields(r, t); };

const char* multistart_name(SolverOptions::Multistart m) {
  switch (m) {
    case SolverOptions::Multistart::Auto: return "auto";
    case SolverOptions::Multistart::Always: return "always";
    case SolverOptions::Multistart::Never: return "never";
  }
  return "auto";
}

[[noreturn]] void type_error(const std::string& path, const char* expected, const json& j) {
  throw ParseError(fmt::format("config: '{}' must be {}, got {}", path, expected, j.dump()));
}

template <class T>
void read_value(const json& j, T& out, const std::string& path);

struct Reader {
  const json& node;
  std::string path;
  std::set<std::string> known;

  template <class T>
  void operator()(const char* key, T& value) {
    known.insert(key);
    auto it = node.find(key);
    if (it != node.end()) read_value(*it, value, path.empty() ? key : path + "." + key);
  }

  void finish() const {
    for (auto it = node.begin(); it != node.end(); ++it)
      if (!known.count(it.key()))
        throw ParseError(fmt::format("config: unknown key '{}'",
                                     path.empty() ? it.key() : path + "." + it.key()));
  }
};

template <class T>
void read_value(const json& j, T& out, const std::string& path) {
  if constexpr (std::is_same_v<T, double>) {
    if (!j.is_number()) type_error(path, "a number", j);
    out = j.get<double>();
  } else if constexpr (std::is_same_v<T, bool>) {
    if (!j.is_boolean()) type_error(path, "a boolean", j);
    out = j.get<bool>();
  } else if constexpr (std::is_unsigned_v<T>) {
    if (!j.is_number_integer() || (!j.is_number_unsigned() && j.get<std::int64_t>() < 0))
      type_error(path, "a non-negative integer", j);
    out = j.get<T>();
  } else if constexpr (std::is_same_v<T, std::string>) {
    if (!j.is_string()) type_error(path, "a string", j);
    out = j.get<std::string>();
  } else if constexpr (std::is_same_v<T, Architecture>) {
    if (!j.is_string()) type_error(path, "an architecture name", j);
    try {
      out = parse_architecture(j.get<std::string>());
    } catch (const ContractError&) {
      type_error(path, "one of iceot, iclstm, eot, lstm, icfnn, icrnn", j);
    }
  } else if constexpr (std::is_same_v<T, SolverOptions::Multistart>) {
    const std::string s = j.is_string() ? j.get<std::string>() : "";
    if (s == "auto") out = SolverOptions::Multistart::Auto;
    else if (s == "always") out = SolverOptions::Multistart::Always;
    else if (s == "never") out = SolverOptions::Multistart::Never;
    else type_error(path, "one of auto, always, never", j);
  } else if constexpr (Section<T>) {
    if (!j.is_object()) type_error(path, "an object", j);
    Reader r{j, path, {}};
    fields(r, out);
    r.finish();
  } else if constexpr (std::is_same_v<T, std::map<std::string, std::string>>) {
    if (!j.is_object()) type_error(path, "an object of strings", j);
    out.clear();
    for (auto it = j.begin(); it != j.end(); ++it)
      read_value(it.value(), out[it.key()], path + "." + it.key());
  } else {
    // std::vector and std::array
    if (!j.is_array()) type_error(path, "an array", j);
    if constexpr (requires { out.resize(0); }) {
      out.clear();
      out.resize(j.size());
    } else if (j.size() != out.size()) {
      type_error(path, fmt::format("an array of {} entries", out.size()).c_str(), j);
    }
    for (std::size_t i = 0; i < j.size(); ++i)
      read_value(j[i], out[i], fmt::format("{}[{}]", path, i));
  }
}

template <class T>
json write_value(const T& v);

struct Writer {
  json& node;

  template <class T>
  void operator()(const char* key, const T& value) {
    node[key] = write_value(value);
  }
};

template <class T>
json write_value(const T& v) {
  if constexpr (std::is_same_v<T, Architecture>) {
    return cli_name(v);
  } else if constexpr (std::is_same_v<T, SolverOptions::Multistart>) {
    return multistart_name(v);
  } else if constexpr (Section<T>) {
    json j = json::object();
    Writer w{j};
    fields(w, v);
    return j;
  } else if constexpr (std::is_same_v<T, std::map<std::string, std::string>>) {
    json j = json::object();
    for (const auto& [k, s] : v) j[k] = s;
    return j;
  } else if constexpr (std::is_arithmetic_v<T> || std::is_same_v<T, std::string>) {
    return v;
  } else {
    json j = json::array();
    for (const auto& e : v) j.push_back(write_value(e));
    return j;
  }
}

void require(bool ok, const std::string& what) {
  if (!ok) throw ContractError("config: " + what);
}

}  // namespace

RunConfig parse_config(const json& document) {
  RunConfig config;
  read_value(document, config, "");
  return config;
}

json to_json(const RunConfig& config) { return write_value(config); }

void RunConfig::validate() const {
  require(!output_dir.empty(), "output_dir must not be empty");
  plant.validate();
  tariff.validate();
  require(dataset.days >= 1, "dataset.days must be >= 1");
  require(dataset.excitation.low < dataset.excitation.high, "dataset.excitation low < high");
  require(dataset.excitation.min_hold >= 1 &&
              dataset.excitation.min_hold <= dataset.excitation.max_hold,
          "dataset.excitation needs 1 <= min_hold <= max_hold");
  require(fit_surface.n_train >= 2 && fit_surface.n_test >= 2, "fit_surface needs >= 2 samples");
  require(fit_surface.grid_size >= 2, "fit_surface.grid_size must be >= 2");
  require(fit_surface.convexity_probes >= 1, "fit_surface.convexity_probes must be >= 1");
  fit_surface.train.validate();
  require(select_features.mi_retain_fraction > 0.0 && select_features.mi_retain_fraction <= 1.0,
          "select_features.mi_retain_fraction must be in (0, 1]");
  require(select_features.rho_threshold > 0.0 && select_features.rho_threshold <= 1.0,
          "select_features.rho_threshold must be in (0, 1]");
  require(select_features.bins >= 4, "select_features.bins must be >= 4");
  require(train.sequence_length >= 1, "train.sequence_length must be >= 1");
  require(train.test_days >= 1, "train.test_days must be >= 1");
  require(dataset.days * kStepsPerDay > train.sequence_length + 1,
          "dataset too short for train.sequence_length");
  train.train.validate();
  require(!stability_sweep.architectures.empty() && !stability_sweep.lengths.empty(),
          "stability_sweep needs architectures and lengths");
  for (auto n : stability_sweep.lengths)
    require(n >= 1 && stability_sweep.days * kStepsPerDay > n + 1,
            "stability_sweep lengths must fit the dataset");
  stability_sweep.train.validate();
  require(mpc.horizon >= 1, "mpc.horizon must be >= 1");
  require(mpc.u_min < mpc.u_max, "mpc.u_min < mpc.u_max");
  require(mpc.t_min < mpc.t_max, "mpc.t_min < mpc.t_max");
  require(mpc.comfort_weight >= 0.0, "mpc.comfort_weight must be >= 0");
  require(mpc.steps >= 1, "mpc.steps must be >= 1");
  require(mpc.baseline_setpoint >= 10.0 && mpc.baseline_setpoint <= 35.0,
          "mpc.baseline_setpoint must be in [10, 35]");
  for (const auto* s : {&mpc.solver, &bench_solver.solver}) {
    require(s->max_iterations >= 1, "solver.max_iterations must be >= 1");
    require(s->tolerance > 0.0, "solver.tolerance must be > 0");
    require(s->initial_step > 0.0, "solver.initial_step must be > 0");
    require(s->shrink > 0.0 && s->shrink < 1.0, "solver.shrink must be in (0, 1)");
  }
  require(!bench_solver.horizons.empty(), "bench_solver.horizons must not be empty");
  for (auto n : bench_solver.horizons) require(n >= 1, "bench_solver horizons must be >= 1");
  require(verify_convexity.sequence_length >= 1, "verify_convexity.sequence_length must be >= 1");
  require(verify_convexity.n_train >= 2, "verify_convexity.n_train must be >= 2");
  require(verify_convexity.probes >= 1, "verify_convexity.probes must be >= 1");
  require(verify_convexity.lo < verify_convexity.hi, "verify_convexity lo < hi");
  verify_convexity.train.validate();
}

}  // namespace icnn
