#pragma once

// Command-line front end: flat `key = value` configs with `--key value`
// overrides, model construction, dispatch and CSV/JSON emission.

#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <map>
#include <memory>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "sgdscope/engine.hpp"
#include "sgdscope/error.hpp"
#include "sgdscope/estimators.hpp"
#include "sgdscope/experiments.hpp"
#include "sgdscope/linalg.hpp"
#include "sgdscope/parallel.hpp"
#include "sgdscope/problems.hpp"
#include "sgdscope/report_io.hpp"

namespace sgdscope::cli {

inline const std::vector<std::string>& commands() {
  static const std::vector<std::string> c = {"simulate", "flow",     "ou",       "scan",     "scaling",
                                             "clt",      "saddle",   "estimate", "lyapunov", "gen-data"};
  return c;
}

struct RunConfig {
  std::string command;

  // model
  std::string model = "quadratic";
  std::vector<double> hessian_diag;
  std::string hessian_file;
  std::vector<double> noise_diag;
  std::string noise_file;
  bool noise_equals_hessian = false;
  std::vector<double> minimizer;
  std::vector<double> theta0;
  std::string data_file;
  std::size_t n = 512;
  std::size_t d = 10;
  std::size_t classes = 3;
  std::uint64_t data_seed = 1;
  double separation = 2.0;
  std::size_t hidden = 16;
  double l2 = 0.0;
  std::uint64_t init_seed = 7;

  // dynamics
  std::string dynamics = "sgd";
  double learning_rate = 0.01;
  std::size_t batch_size = 10;
  std::int64_t steps = 100000;
  double t_end = 10.0;
  double dt = 0.01;
  double flow_dt = 0.01;
  double burn_in = 0.5;
  std::int64_t record_stride = 10;
  std::string sampling = "with_replacement";
  bool snapshots = false;

  // grids
  std::vector<double> lr_list;
  std::vector<std::int64_t> bs_list;
  std::vector<double> factors = {1.0, 2.0, 4.0};
  std::vector<double> off_lr_list;
  std::vector<std::int64_t> off_bs_list;
  double record_dt = 0.0;

  // estimators
  std::size_t probe_count = 1000;
  std::size_t sample_count = 100000;

  std::size_t replicas = 5;
  std::optional<std::uint64_t> master_seed;
  std::size_t workers = 0;
  std::string outdir = "out";
};

struct KeySpec {
  std::string name;
  std::string type;
  std::string default_text;
  std::string constraint;
  std::string help;
  std::function<void(RunConfig&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

namespace detail {

inline Error config_error(const std::string& key, const std::string& msg) {
  return Error("cli", "config key '" + key + "': " + msg);
}

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

inline double parse_real(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    const double x = std::stod(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return x;
  } catch (const std::exception&) {
    throw config_error(key, "expected a real number, got '" + v + "'");
  }
}

inline std::int64_t parse_int(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    const long long x = std::stoll(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return x;
  } catch (const std::exception&) {
    throw config_error(key, "expected an integer, got '" + v + "'");
  }
}

inline std::uint64_t parse_uint(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    if (!v.empty() && v[0] == '-') throw std::invalid_argument(v);
    const unsigned long long x = std::stoull(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return x;
  } catch (const std::exception&) {
    throw config_error(key, "expected a non-negative integer, got '" + v + "'");
  }
}

inline bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  throw config_error(key, "expected true or false, got '" + v + "'");
}

inline std::vector<std::string> split_list(const std::string& v) {
  std::vector<std::string> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

template <typename T>
std::string fmt(const T& v) {
  std::ostringstream os;
  os << std::setprecision(17) << v;
  return os.str();
}

template <typename T>
std::string fmt_list(const std::vector<T>& v) {
  std::ostringstream os;
  os << std::setprecision(17);
  for (std::size_t i = 0; i < v.size(); ++i) os << (i ? "," : "") << v[i];
  return os.str();
}

// Builders for the registry.
inline KeySpec real_key(std::string name, double RunConfig::*field, std::string def, std::string constraint,
                        std::function<bool(double)> ok, std::string help) {
  return {name, "real", def, constraint, help,
          [=](RunConfig& c, const std::string& v) {
            const double x = parse_real(name, v);
            if (!ok(x)) throw config_error(name, "value " + v + " violates " + constraint);
            c.*field = x;
          },
          [=](const RunConfig& c) { return fmt(c.*field); }};
}

template <typename I>
KeySpec int_key(std::string name, I RunConfig::*field, std::string def, std::string constraint,
                std::function<bool(std::int64_t)> ok, std::string help) {
  return {name, "integer", def, constraint, help,
          [=](RunConfig& c, const std::string& v) {
            const std::int64_t x = parse_int(name, v);
            if (!ok(x)) throw config_error(name, "value " + v + " violates " + constraint);
            c.*field = static_cast<I>(x);
          },
          [=](const RunConfig& c) { return fmt(c.*field); }};
}

inline KeySpec seed_key(std::string name, std::uint64_t RunConfig::*field, std::string def, std::string help) {
  return {name, "uint64", def, "any 64-bit unsigned", help,
          [=](RunConfig& c, const std::string& v) { c.*field = parse_uint(name, v); },
          [=](const RunConfig& c) { return fmt(c.*field); }};
}

inline KeySpec string_key(std::string name, std::string RunConfig::*field, std::string def, std::string constraint,
                          std::vector<std::string> choices, std::string help) {
  return {name, choices.empty() ? "string" : "choice", def, constraint, help,
          [=](RunConfig& c, const std::string& v) {
            if (!choices.empty() && std::find(choices.begin(), choices.end(), v) == choices.end())
              throw config_error(name, "value '" + v + "' violates " + constraint);
            c.*field = v;
          },
          [=](const RunConfig& c) { return c.*field; }};
}

inline KeySpec bool_key(std::string name, bool RunConfig::*field, std::string def, std::string help) {
  return {name, "bool", def, "true|false", help,
          [=](RunConfig& c, const std::string& v) { c.*field = parse_bool(name, v); },
          [=](const RunConfig& c) { return std::string(c.*field ? "true" : "false"); }};
}

inline KeySpec real_list_key(std::string name, std::vector<double> RunConfig::*field, std::string def,
                             std::string constraint, std::function<bool(double)> ok, std::string help) {
  return {name, "real list", def, constraint, help,
          [=](RunConfig& c, const std::string& v) {
            std::vector<double> out;
            for (const auto& item : split_list(v)) {
              const double x = parse_real(name, item);
              if (!ok(x)) throw config_error(name, "entry " + item + " violates " + constraint);
              out.push_back(x);
            }
            c.*field = std::move(out);
          },
          [=](const RunConfig& c) { return fmt_list(c.*field); }};
}

inline KeySpec int_list_key(std::string name, std::vector<std::int64_t> RunConfig::*field, std::string def,
                            std::string constraint, std::function<bool(std::int64_t)> ok, std::string help) {
  return {name, "integer list", def, constraint, help,
          [=](RunConfig& c, const std::string& v) {
            std::vector<std::int64_t> out;
            for (const auto& item : split_list(v)) {
              const std::int64_t x = parse_int(name, item);
              if (!ok(x)) throw config_error(name, "entry " + item + " violates " + constraint);
              out.push_back(x);
            }
            c.*field = std::move(out);
          },
          [=](const RunConfig& c) { return fmt_list(c.*field); }};
}

}  // namespace detail

/// Every accepted config key, in --help order.
inline const std::vector<KeySpec>& config_keys() {
  using namespace detail;
  auto pos = [](double x) { return x > 0.0; };
  auto nonneg = [](double x) { return x >= 0.0; };
  auto any = [](double x) { return std::isfinite(x); };
  auto ipos = [](std::int64_t x) { return x >= 1; };
  auto inonneg = [](std::int64_t x) { return x >= 0; };
  static const std::vector<KeySpec> keys = {
      string_key("command", &RunConfig::command, "(positional)", "one of simulate|flow|ou|scan|scaling|clt|saddle|estimate|lyapunov|gen-data",
                 commands(), "what to run"),
      string_key("model", &RunConfig::model, "quadratic", "one of quadratic|logistic|mlp",
                 {"quadratic", "logistic", "mlp"}, "loss model"),
      real_list_key("hessian_diag", &RunConfig::hessian_diag, "", "finite entries", any,
                    "quadratic Hessian diagonal (also the OU spectrum for `ou`)"),
      string_key("hessian_file", &RunConfig::hessian_file, "", "path to a matrix CSV", {},
                 "quadratic Hessian as a matrix CSV"),
      real_list_key("noise_diag", &RunConfig::noise_diag, "", "entries >= 0", nonneg,
                    "gradient-noise covariance diagonal (Q for `lyapunov`)"),
      string_key("noise_file", &RunConfig::noise_file, "", "path to a matrix CSV", {},
                 "gradient-noise covariance as a matrix CSV"),
      bool_key("noise_equals_hessian", &RunConfig::noise_equals_hessian, "false", "use C = H"),
      real_list_key("minimizer", &RunConfig::minimizer, "0,...", "finite entries", any, "quadratic minimizer"),
      real_list_key("theta0", &RunConfig::theta0, "model-dependent", "finite entries", any,
                    "start point (quadratic: 1,...; logistic: 0,...; mlp: seeded init)"),
      string_key("data_file", &RunConfig::data_file, "", "path to a dataset CSV", {},
                 "dataset CSV (label,f0..); generated blobs when empty"),
      int_key("n", &RunConfig::n, "512", "n >= 1", ipos, "generated example count"),
      int_key("d", &RunConfig::d, "10", "d >= 1", ipos, "generated feature count"),
      int_key("classes", &RunConfig::classes, "3", "classes >= 1", ipos, "generated class count (logistic uses 2)"),
      seed_key("data_seed", &RunConfig::data_seed, "1", "dataset generator seed"),
      real_key("separation", &RunConfig::separation, "2", "separation > 0", pos, "blob center scale"),
      int_key("hidden", &RunConfig::hidden, "16", "hidden >= 1", ipos, "MLP hidden width"),
      real_key("l2", &RunConfig::l2, "0", "l2 >= 0", nonneg, "logistic L2 penalty"),
      seed_key("init_seed", &RunConfig::init_seed, "7", "MLP initialization seed"),
      string_key("dynamics", &RunConfig::dynamics, "sgd", "one of sgd|gaussian|sde", {"sgd", "gaussian", "sde"},
                 "integrator for `simulate`"),
      real_key("learning_rate", &RunConfig::learning_rate, "0.01", "learning_rate > 0", pos, "SGD learning rate"),
      int_key("batch_size", &RunConfig::batch_size, "10", "batch_size >= 1", ipos, "SGD batch size"),
      int_key("steps", &RunConfig::steps, "100000", "steps >= 1", ipos, "SGD steps"),
      real_key("t_end", &RunConfig::t_end, "10", "t_end > 0", pos, "horizon for flow/sde/ou/clt/scaling"),
      real_key("dt", &RunConfig::dt, "0.01", "dt > 0", pos, "time step for sde/ou"),
      real_key("flow_dt", &RunConfig::flow_dt, "0.01", "flow_dt > 0", pos,
               "RK4 step for gradient flow, minimum search and covariance ODE"),
      real_key("burn_in", &RunConfig::burn_in, "0.5", "0 <= burn_in < 1", [](double x) { return x >= 0 && x < 1; },
               "fraction of the run discarded before averaging"),
      int_key("record_stride", &RunConfig::record_stride, "10", "record_stride >= 1", ipos, "steps between records"),
      string_key("sampling", &RunConfig::sampling, "with_replacement", "one of with_replacement|without_replacement",
                 {"with_replacement", "without_replacement"}, "minibatch sampling"),
      bool_key("snapshots", &RunConfig::snapshots, "false", "also write parameter snapshots"),
      real_list_key("lr_list", &RunConfig::lr_list, "", "entries > 0", pos,
                    "learning rates (scan grid; clt ladder, descending)"),
      int_list_key("bs_list", &RunConfig::bs_list, "", "entries >= 1", ipos, "batch sizes (scan grid)"),
      real_list_key("factors", &RunConfig::factors, "1,2,4", "entries > 0", pos, "linear-scaling factors c"),
      real_list_key("off_lr_list", &RunConfig::off_lr_list, "", "entries > 0", pos,
                    "off-ratio learning rates (paired with off_bs_list)"),
      int_list_key("off_bs_list", &RunConfig::off_bs_list, "", "entries >= 1", ipos, "off-ratio batch sizes"),
      real_key("record_dt", &RunConfig::record_dt, "0", "record_dt >= 0", nonneg,
               "scaling curve grid spacing in t (0 = largest lr)"),
      int_key("probe_count", &RunConfig::probe_count, "1000", "probe_count >= 2",
              [](std::int64_t x) { return x >= 2; }, "Hutchinson / randomized trace probes"),
      int_key("sample_count", &RunConfig::sample_count, "100000", "sample_count >= 2",
              [](std::int64_t x) { return x >= 2; }, "gradient draws for synthesized-noise covariance"),
      int_key("replicas", &RunConfig::replicas, "5", "replicas >= 1", ipos, "independent runs per configuration"),
      {"master_seed", "uint64", "(system entropy)", "any 64-bit unsigned", "root of all randomness",
       [](RunConfig& c, const std::string& v) { c.master_seed = parse_uint("master_seed", v); },
       [](const RunConfig& c) { return c.master_seed ? fmt(*c.master_seed) : std::string(); }},
      int_key("workers", &RunConfig::workers, "0", "workers >= 0", inonneg,
              "worker threads; 0 = $SGDSCOPE_WORKERS or logical cores"),
      string_key("outdir", &RunConfig::outdir, "out", "writable directory", {}, "output directory"),
  };
  return keys;
}

inline const KeySpec* find_key(const std::string& name) {
  for (const auto& k : config_keys())
    if (k.name == name) return &k;
  return nullptr;
}

inline void set_key(RunConfig& cfg, const std::string& key, const std::string& value) {
  const KeySpec* spec = find_key(key);
  if (spec == nullptr) throw Error("cli", "unknown config key '" + key + "'");
  spec->set(cfg, value);
}

/// Parses flat `key = value` text (`#` starts a comment) into `cfg`. Relative
/// matrix and data paths are resolved against `base_dir` when it is given.
inline void apply_config_text(RunConfig& cfg, std::istream& in, const std::string& source,
                              const std::filesystem::path& base_dir = {}) {
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw Error("cli", source + ":" + std::to_string(lineno) + ": expected `key = value`");
    const std::string key = detail::trim(line.substr(0, eq));
    std::string value = detail::trim(line.substr(eq + 1));
    const bool is_path = key == "hessian_file" || key == "noise_file" || key == "data_file";
    if (is_path && !value.empty() && !base_dir.empty() && std::filesystem::path(value).is_relative())
      value = (base_dir / value).lexically_normal().string();
    set_key(cfg, key, value);
  }
}

/// Cross-key checks that no single key can make.
inline void validate(const RunConfig& cfg) {
  if (cfg.command.empty()) throw Error("cli", "no command given");
  if (cfg.off_lr_list.size() != cfg.off_bs_list.size())
    throw Error("cli", "config keys 'off_lr_list' and 'off_bs_list' must have the same length");
  if (cfg.command == "scan" && (cfg.lr_list.empty() || cfg.bs_list.empty()))
    throw Error("cli", "config keys 'lr_list' and 'bs_list' are required for scan");
  if (cfg.command == "clt" && cfg.lr_list.empty()) throw Error("cli", "config key 'lr_list' is required for clt");
  if (cfg.command == "simulate" && cfg.dynamics == "sde" && cfg.dt > cfg.learning_rate)
    throw Error("cli", "config key 'dt' violates dt <= learning_rate for sde dynamics");
}

/// Resolves a config from `sgdscope <command> --config <file> [--key value ...]`.
/// Flags override file values regardless of their position.
inline RunConfig parse_config(const std::vector<std::string>& args) {
  RunConfig cfg;
  std::optional<std::string> config_path;
  std::vector<std::pair<std::string, std::string>> overrides;
  for (std::size_t i = 0; i < args.size(); ++i) {
    const std::string& a = args[i];
    if (a.rfind("--", 0) == 0) {
      std::string key = a.substr(2), value;
      if (const auto eq = key.find('='); eq != std::string::npos) {
        value = key.substr(eq + 1);
        key.erase(eq);
      } else {
        if (i + 1 >= args.size()) throw Error("cli", "flag --" + key + " needs a value");
        value = args[++i];
      }
      if (key == "config")
        config_path = value;
      else
        overrides.emplace_back(key, value);
    } else if (cfg.command.empty()) {
      set_key(cfg, "command", a);
    } else {
      throw Error("cli", "unexpected argument '" + a + "'");
    }
  }
  if (config_path) {
    std::ifstream in(*config_path);
    if (!in) throw Error("cli", "cannot open config file " + *config_path);
    const std::string cmd = cfg.command;
    apply_config_text(cfg, in, *config_path, std::filesystem::path(*config_path).parent_path());
    if (!cmd.empty()) cfg.command = cmd;
  }
  for (const auto& [k, v] : overrides) set_key(cfg, k, v);
  validate(cfg);
  return cfg;
}

inline std::string help_text() {
  std::ostringstream os;
  os << "usage: sgdscope <command> --config <file> [--key value ...]\n\n"
     << "commands: simulate flow ou scan scaling clt saddle estimate lyapunov gen-data\n\n"
     << "Config files are flat `key = value` lines; `#` starts a comment. Command-line\n"
     << "flags override file values. Unknown keys are errors.\n\n"
     << "keys:\n";
  for (const auto& k : config_keys()) {
    os << "  " << std::left << std::setw(22) << k.name << std::setw(14) << k.type << "default " << std::setw(18)
       << (k.default_text.empty() ? "(none)" : k.default_text) << k.constraint << "\n"
       << "  " << std::string(22, ' ') << k.help << "\n";
  }
  return os.str();
}

inline std::string resolved_text(const RunConfig& cfg) {
  std::ostringstream os;
  for (const auto& k : config_keys()) os << k.name << " = " << k.get(cfg) << "\n";
  return os.str();
}

inline std::size_t resolve_workers(const RunConfig& cfg) {
  if (cfg.workers > 0) return cfg.workers;
  if (const char* env = std::getenv("SGDSCOPE_WORKERS")) {
    try {
      const long long w = std::stoll(env);
      if (w >= 1) return static_cast<std::size_t>(w);
    } catch (const std::exception&) {
    }
    throw Error("cli", "SGDSCOPE_WORKERS must be a positive integer");
  }
  return default_workers();
}

// ---------------------------------------------------------------------------
// Model construction

struct BuiltModel {
  std::unique_ptr<LossModel> model;
  ParamVector theta0;
};

namespace detail {

inline Matrix matrix_from(const std::vector<double>& diag, const std::string& file, const char* what) {
  if (!file.empty()) return read_matrix_csv_file(file);
  if (!diag.empty()) return Eigen::Map<const Eigen::VectorXd>(diag.data(), static_cast<Eigen::Index>(diag.size())).asDiagonal();
  throw Error("cli", std::string("config needs ") + what);
}

inline SymMatrix hessian_from(const RunConfig& cfg) {
  return SymMatrix(matrix_from(cfg.hessian_diag, cfg.hessian_file, "'hessian_diag' or 'hessian_file'"));
}

inline SymMatrix noise_from(const RunConfig& cfg, const SymMatrix& h) {
  if (cfg.noise_equals_hessian) return h;
  if (cfg.noise_diag.empty() && cfg.noise_file.empty()) return SymMatrix::zero(h.dim());
  return SymMatrix(matrix_from(cfg.noise_diag, cfg.noise_file, "'noise_diag' or 'noise_file'"));
}

inline ParamVector vec(const std::vector<double>& v) {
  return Eigen::Map<const Eigen::VectorXd>(v.data(), static_cast<Eigen::Index>(v.size()));
}

inline Dataset dataset_from(const RunConfig& cfg, int classes) {
  if (!cfg.data_file.empty()) {
    std::ifstream in(cfg.data_file);
    if (!in) throw Error("cli", "cannot open data file " + cfg.data_file);
    return read_dataset_csv(in, cfg.data_file);
  }
  return generate_blobs(cfg.n, static_cast<Eigen::Index>(cfg.d), classes, cfg.data_seed, cfg.separation);
}

}  // namespace detail

inline BuiltModel build_model(const RunConfig& cfg) {
  BuiltModel out;
  if (cfg.model == "quadratic") {
    const SymMatrix h = detail::hessian_from(cfg);
    const SymMatrix c = detail::noise_from(cfg, h);
    const ParamVector minimizer = cfg.minimizer.empty() ? ParamVector::Zero(h.dim()) : detail::vec(cfg.minimizer);
    out.model = std::make_unique<QuadraticModel>(make_quadratic(h, minimizer, c));
    out.theta0 = cfg.theta0.empty() ? ParamVector(minimizer.array() + 1.0) : detail::vec(cfg.theta0);
  } else if (cfg.model == "logistic") {
    const Dataset ds = detail::dataset_from(cfg, 2);
    out.model = std::make_unique<LogisticModel>(make_logistic(ds.features, ds.labels, cfg.l2));
    out.theta0 = cfg.theta0.empty() ? ParamVector::Zero(ds.dim()) : detail::vec(cfg.theta0);
  } else {
    const Dataset ds = detail::dataset_from(cfg, static_cast<int>(cfg.classes));
    auto mlp = std::make_unique<MlpModel>(make_mlp(ds.dim(), static_cast<Eigen::Index>(cfg.hidden),
                                                   static_cast<Eigen::Index>(cfg.classes), ds, cfg.init_seed));
    out.theta0 = cfg.theta0.empty() ? mlp->initial_params() : detail::vec(cfg.theta0);
    out.model = std::move(mlp);
  }
  if (out.theta0.size() != out.model->param_dim())
    throw Error("cli", "config key 'theta0' has " + std::to_string(out.theta0.size()) + " entries, model needs " +
                           std::to_string(out.model->param_dim()));
  return out;
}

// ---------------------------------------------------------------------------
// Dispatch

namespace detail {

inline std::ofstream open_out(const std::filesystem::path& dir, const std::string& name) {
  std::ofstream f(dir / name);
  if (!f) throw Error("cli", "cannot write " + (dir / name).string());
  return f;
}

inline void write_json(const std::filesystem::path& dir, const std::string& name, const nlohmann::json& j) {
  auto f = open_out(dir, name);
  f << j.dump(2) << "\n";
}

inline SgdConfig sgd_config(const RunConfig& cfg, std::uint64_t seed) {
  SgdConfig s;
  s.learning_rate = cfg.learning_rate;
  s.batch_size = cfg.batch_size;
  s.steps = cfg.steps;
  s.seed = seed;
  s.sampling = cfg.sampling == "without_replacement" ? Sampling::without_replacement : Sampling::with_replacement;
  s.record_stride = cfg.record_stride;
  s.snapshots = cfg.snapshots;
  return s;
}

}  // namespace detail

/// Runs one configured command; outputs go to cfg.outdir. Returns the exit
/// status. `log` receives human-readable progress (the seed line included).
inline int run(RunConfig cfg, std::ostream& log = std::cout) {
  namespace fs = std::filesystem;
  if (!cfg.master_seed) {
    std::random_device rd;
    cfg.master_seed = (static_cast<std::uint64_t>(rd()) << 32) ^ rd();
  }
  const std::uint64_t seed = *cfg.master_seed;
  log << "master_seed=" << seed << "\n";
  const std::size_t workers = resolve_workers(cfg);
  const fs::path dir(cfg.outdir);
  fs::create_directories(dir);
  {
    auto f = detail::open_out(dir, "config.resolved");
    f << resolved_text(cfg);
  }

  const std::string& cmd = cfg.command;
  if (cmd == "gen-data") {
    const int classes = cfg.model == "logistic" ? 2 : static_cast<int>(cfg.classes);
    const Dataset ds = generate_blobs(cfg.n, static_cast<Eigen::Index>(cfg.d), classes, cfg.data_seed, cfg.separation);
    auto f = detail::open_out(dir, "data.csv");
    write_dataset_csv(f, ds);
    return 0;
  }

  if (cmd == "lyapunov") {
    const SymMatrix h = detail::hessian_from(cfg);
    const SymMatrix q = detail::noise_from(cfg, h);
    const SymMatrix g = solve_lyapunov(h, q);
    auto f = detail::open_out(dir, "gamma.csv");
    write_matrix_csv(f, g.matrix());
    const double residual = (g.matrix() * h.matrix() + h.matrix() * g.matrix() - q.matrix()).norm();
    detail::write_json(dir, "lyapunov.json",
                       {{"gamma", sgdscope::detail::matrix_json(g.matrix())},
                        {"residual_frobenius", residual},
                        {"trace_h_gamma", (h.matrix() * g.matrix()).trace()},
                        {"half_trace_q", 0.5 * trace(q)}});
    return 0;
  }

  if (cmd == "ou") {
    if (cfg.hessian_diag.empty()) throw Error("cli", "config key 'hessian_diag' is required for ou (the spectrum)");
    const Eigen::VectorXd lambda = detail::vec(cfg.hessian_diag);
    const Trajectory traj = ou_eigenbasis_run(lambda, cfg.learning_rate, cfg.batch_size, cfg.t_end, cfg.dt,
                                              derive_seed(seed, {0}), cfg.record_stride, true);
    auto f = detail::open_out(dir, "trajectory.csv");
    write_trajectory_csv(f, traj);
    const StationaryStats s = stationary_stats(traj, cfg.burn_in);
    nlohmann::json j = to_json(s);
    j["lr"] = cfg.learning_rate;
    j["bs"] = cfg.batch_size;
    j["predicted_coordinate_variance"] = cfg.learning_rate / (2.0 * static_cast<double>(cfg.batch_size));
    j["predicted_loss"] = predict_loss_j2018(cfg.learning_rate, static_cast<double>(cfg.batch_size), lambda.sum());
    detail::write_json(dir, "stats.json", j);
    return 0;
  }

  if (cmd == "saddle") {
    const SymMatrix h = detail::hessian_from(cfg);
    const SymMatrix c = detail::noise_from(cfg, h);
    SaddleOptions o;
    o.steps = cfg.steps;
    o.replicas = cfg.replicas;
    o.seed = seed;
    o.workers = workers;
    const SaddleReport rep = saddle_divergence_experiment(h, c, cfg.learning_rate, cfg.batch_size, o);
    detail::write_json(dir, "saddle.json", to_json(rep));
    log << "verdict=" << to_string(rep.verdict) << "\n";
    return 0;
  }

  BuiltModel built = build_model(cfg);
  const LossModel& model = *built.model;

  if (cmd == "simulate") {
    Trajectory traj;
    if (cfg.dynamics == "sgd") {
      traj = sgd_run(model, built.theta0, detail::sgd_config(cfg, derive_seed(seed, {0})));
    } else if (cfg.dynamics == "gaussian") {
      std::optional<SymMatrix> pinned;
      if (!model.exact_gradient_covariance(built.theta0))
        pinned = gradient_covariance(model, built.theta0, cfg.sample_count, derive_seed(seed, {1}));
      traj = gaussian_sgd_run(model, built.theta0, detail::sgd_config(cfg, derive_seed(seed, {0})), pinned);
    } else {
      SdeConfig s;
      s.learning_rate = cfg.learning_rate;
      s.batch_size = cfg.batch_size;
      s.t_end = cfg.t_end;
      s.dt = cfg.dt;
      s.seed = derive_seed(seed, {0});
      s.record_stride = cfg.record_stride;
      s.snapshots = cfg.snapshots;
      traj = sde_run(model, built.theta0, s);
    }
    auto f = detail::open_out(dir, "trajectory.csv");
    write_trajectory_csv(f, traj);
    if (traj.has_snapshots()) {
      auto sf = detail::open_out(dir, "snapshots.csv");
      write_snapshots_csv(sf, traj);
    }
    nlohmann::json j = to_json(stationary_stats(traj, cfg.burn_in));
    j["dynamics"] = cfg.dynamics;
    j["lr"] = cfg.learning_rate;
    j["bs"] = cfg.batch_size;
    if (auto lmin = model.risk_minimum()) j["excess_loss"] = j["mean_loss"].get<double>() - *lmin;
    detail::write_json(dir, "stats.json", j);
    return 0;
  }

  if (cmd == "flow") {
    const Trajectory traj = gradient_flow(model, built.theta0, cfg.t_end, cfg.flow_dt, cfg.record_stride, cfg.snapshots);
    auto f = detail::open_out(dir, "trajectory.csv");
    write_trajectory_csv(f, traj);
    if (traj.has_snapshots()) {
      auto sf = detail::open_out(dir, "snapshots.csv");
      write_snapshots_csv(sf, traj);
    }
    return 0;
  }

  if (cmd == "estimate") {
    const LocatedMinimum minimum = locate_minimum(model, built.theta0, 0.1);
    if (!minimum.located) log << "warning: minimum not located (|grad| = " << minimum.grad_norm << ")\n";
    EstimatorOptions eo{cfg.probe_count, cfg.sample_count, derive_seed(seed, {0})};
    const PredictionReport r =
        predict_at(model, minimum.theta, cfg.learning_rate, static_cast<double>(cfg.batch_size), eo);
    nlohmann::json j = to_json(r);
    j["minimum_located"] = minimum.located;
    j["grad_norm_at_point"] = minimum.grad_norm;
    detail::write_json(dir, "estimate.json", j);
    auto f = detail::open_out(dir, "estimate.csv");
    f << "lr,bs,tr_h,tr_sigma2,tr_sigma2_h,pred_j2018,pred_w2019_loss,pred_w2019_gradnorm,magnitude_diff\n"
      << std::setprecision(17) << r.learning_rate << "," << r.batch_size << "," << r.tr_h << "," << r.tr_sigma2 << ","
      << r.tr_sigma2_h << "," << r.pred_loss_j2018 << "," << r.pred_excess_loss_w2019 << ","
      << r.pred_gradnorm_w2019 << ",";
    if (r.magnitude_difference) f << *r.magnitude_difference;
    f << "\n";
    auto t = detail::open_out(dir, "estimate.txt");
    write_report_text(t, r);
    return 0;
  }

  if (cmd == "scan") {
    std::vector<LrBs> grid;
    for (auto bs : cfg.bs_list)
      for (double lr : cfg.lr_list) grid.push_back({lr, static_cast<std::size_t>(bs)});
    ScanOptions o;
    o.steps = cfg.steps;
    o.replicas = cfg.replicas;
    o.master_seed = seed;
    o.burn_in_fraction = cfg.burn_in;
    o.record_stride = cfg.record_stride;
    o.sampling = cfg.sampling == "without_replacement" ? Sampling::without_replacement : Sampling::with_replacement;
    o.workers = workers;
    o.estimators = {cfg.probe_count, cfg.sample_count, 0};
    o.flow_dt = 0.1;
    const auto rows = scan_bs_lr(model, built.theta0, grid, o);
    auto f = detail::open_out(dir, "scan.csv");
    write_scan_csv(f, rows);
    detail::write_json(dir, "scan.json", to_json(rows));
    return 0;
  }

  if (cmd == "scaling") {
    std::vector<LrBs> off;
    for (std::size_t i = 0; i < cfg.off_lr_list.size(); ++i)
      off.push_back({cfg.off_lr_list[i], static_cast<std::size_t>(cfg.off_bs_list[i])});
    ScalingOptions o;
    o.t_end = cfg.t_end;
    o.record_dt = cfg.record_dt;
    o.burn_in_fraction = cfg.burn_in;
    o.replicas = cfg.replicas;
    o.seed = seed;
    o.workers = workers;
    const CurveSet set =
        linear_scaling_experiment(model, built.theta0, {cfg.learning_rate, cfg.batch_size}, cfg.factors, off, o);
    auto f = detail::open_out(dir, "curves.csv");
    write_curves_csv(f, set);
    detail::write_json(dir, "scaling.json", to_json(set));
    return 0;
  }

  if (cmd == "clt") {
    const auto* quad = dynamic_cast<const QuadraticModel*>(&model);
    if (quad == nullptr) throw Error("cli", "clt requires model = quadratic");
    CltOptions o;
    o.replicas = cfg.replicas;
    o.seed = seed;
    o.flow_dt = cfg.flow_dt;
    o.workers = workers;
    const CltReport rep = clt_experiment(*quad, built.theta0, cfg.lr_list, cfg.batch_size, cfg.t_end, o);
    detail::write_json(dir, "clt.json", to_json(rep));
    return 0;
  }

  throw Error("cli", "unhandled command " + cmd);
}

/// Entry point shared by the executable and the tests.
inline int main_entry(const std::vector<std::string>& args, std::ostream& out = std::cout,
                      std::ostream& err = std::cerr) {
  try {
    for (const auto& a : args) {
      if (a == "--help" || a == "-h" || a == "help") {
        out << help_text();
        return 0;
      }
    }
    return run(parse_config(args), out);
  } catch (const Error& e) {
    err << "error: " << e.module() << ": " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    err << "error: internal: " << e.what() << "\n";
    return 3;
  }
}

}  // namespace sgdscope::cli
