#pragma once

// Benchmark harness: scenario presets, YAML scenario files, the Monte Carlo driver with its
// error metrics, and CSV/JSON result writers.

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <mutex>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>
#include <yaml-cpp/yaml.h>

#include "ameef/consensus.hpp"
#include "ameef/errors.hpp"
#include "ameef/network.hpp"
#include "ameef/noise.hpp"
#include "ameef/scenario.hpp"

namespace ameef {

// ---------------------------------------------------------------------------------------------
// Presets

/// Kernel settings used by the land-vehicle presets.
inline KernelParams land_vehicle_kernel() {
  KernelParams k;
  k.eta = 0.7;
  k.sigma1 = 100.0;
  k.sigma2 = 100.0;
  k.sigma_max = 100.0;
  k.sigma_min = 1.0;
  return k;
}

/// Four-state constant-velocity vehicle observed by ten linear sensors. Odd sensors (1-based)
/// see position plus velocity, even sensors see position only; both with a sign flip.
inline ScenarioConfig land_vehicle_scenario(const std::vector<Variant>& variants = all_variants()) {
  ScenarioConfig c;
  c.name = "land_vehicle";
  c.dt = 0.3;
  c.f_mat = Matrix::Identity(4, 4);
  c.f_mat(0, 2) = c.dt;
  c.f_mat(1, 3) = c.dt;
  c.q_cov = Eigen::Vector4d(0.01, 0.01, 1.0, 1.0).asDiagonal();
  c.x0 = Eigen::Vector4d(0.0, 0.0, 5.0, 5.0);
  c.x_hat0 = Eigen::Vector4d(1.0, 1.0, 1.0, 1.0);
  c.p0 = Eigen::Vector4d(900.0, 900.0, 4.0, 4.0).asDiagonal();
  c.horizon = 500;
  c.mc_runs = 200;
  c.master_seed = 1;
  c.algorithms = variants;
  c.kernel = land_vehicle_kernel();
  c.report_node = 4;  // node-5 in 1-based numbering
  c.state_groups = {{0, 1}, {2, 3}};
  c.group_names = {"position", "velocity"};
  c.consensus.topology = "ring_chords";

  Matrix h_odd(2, 4);
  h_odd << -1, 0, -1, 0, 0, -1, 0, -1;
  Matrix h_even(2, 4);
  h_even << -1, 0, 0, 0, 0, -1, 0, 0;
  for (int i = 1; i <= 10; ++i) {
    SensorSpec s;
    s.kind = SensorKind::linear;
    s.h = (i % 2 == 1) ? h_odd : h_even;
    s.r_cov = 1e-2 * Matrix::Identity(2, 2);
    s.noise = NoiseSpec::gaussian(0.0, 1e-2);
    c.sensors.push_back(s);
  }
  return c;
}

inline void set_noise(ScenarioConfig& c, const NoiseSpec& noise) {
  for (auto& s : c.sensors) s.noise = noise;
}

/// Named complete scenarios accepted by `run --scenario`.
inline ScenarioConfig scenario_by_name(const std::string& name) {
  ScenarioConfig c = land_vehicle_scenario();
  if (name == "land_vehicle_s5") {
    set_noise(c, scenario_preset("scenario5_mG"));
  } else if (name == "land_vehicle_s4") {
    set_noise(c, scenario_preset("scenario4_bmG"));
  } else if (name == "land_vehicle_gaussian") {
    set_noise(c, NoiseSpec::gaussian(0.0, 1e-2));
  } else if (name == "land_vehicle_rayleigh") {
    set_noise(c, scenario_preset("rayleigh3"));
  } else {
    throw LookupError("unknown scenario '" + name +
                      "' (known: land_vehicle_s4, land_vehicle_s5, land_vehicle_gaussian, land_vehicle_rayleigh)");
  }
  c.name = name;
  return c;
}

// ---------------------------------------------------------------------------------------------
// YAML scenario files

namespace detail {

inline std::string where(const YAML::Node& node, const std::string& field) {
  const auto mark = node.Mark();
  std::string loc = mark.line >= 0 ? "line " + std::to_string(mark.line + 1) + ": " : "";
  return loc + "field '" + field + "'";
}

template <typename T>
T as(const YAML::Node& node, const std::string& field) {
  try {
    return node.as<T>();
  } catch (const YAML::Exception&) {
    throw ConfigError(where(node, field) + ": cannot interpret '" + (node.IsScalar() ? node.Scalar() : "<non-scalar>") +
                      "'");
  }
}

inline Vector as_vector(const YAML::Node& node, const std::string& field) {
  if (!node.IsSequence()) throw ConfigError(where(node, field) + ": expected a list of numbers");
  Vector v(static_cast<Eigen::Index>(node.size()));
  for (std::size_t i = 0; i < node.size(); ++i) v[static_cast<Eigen::Index>(i)] = as<double>(node[i], field);
  return v;
}

/// A matrix written as a list of rows, or as {diag: [...]}.
inline Matrix as_matrix(const YAML::Node& node, const std::string& field) {
  if (node.IsMap()) {
    if (!node["diag"]) throw ConfigError(where(node, field) + ": expected rows or {diag: [...]}");
    return as_vector(node["diag"], field + ".diag").asDiagonal();
  }
  if (!node.IsSequence() || node.size() == 0) throw ConfigError(where(node, field) + ": expected a list of rows");
  const std::size_t rows = node.size();
  if (!node[0].IsSequence()) throw ConfigError(where(node, field) + ": expected a list of rows");
  const std::size_t cols = node[0].size();
  Matrix m(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
  for (std::size_t i = 0; i < rows; ++i) {
    if (!node[i].IsSequence() || node[i].size() != cols) {
      throw ConfigError(where(node[i], field) + ": all rows must have " + std::to_string(cols) + " entries");
    }
    for (std::size_t j = 0; j < cols; ++j) {
      m(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = as<double>(node[i][j], field);
    }
  }
  return m;
}

inline void check_keys(const YAML::Node& node, const std::string& section, const std::vector<std::string>& allowed) {
  if (!node.IsMap()) throw ConfigError(where(node, section) + ": expected a mapping");
  for (const auto& kv : node) {
    const std::string key = kv.first.as<std::string>();
    if (std::find(allowed.begin(), allowed.end(), key) == allowed.end()) {
      throw ConfigError(where(kv.first, section.empty() ? key : section + "." + key) + ": unknown key");
    }
  }
}

inline NoiseSpec parse_noise(const YAML::Node& node, const std::string& field) {
  if (node.IsScalar()) {
    try {
      return scenario_preset(node.as<std::string>());
    } catch (const LookupError& e) {
      throw ConfigError(where(node, field) + ": " + e.what());
    }
  }
  check_keys(node, field, {"kind", "mean", "variance", "tau", "variance1", "variance2", "scale", "components", "preset"});
  if (node["preset"]) return parse_noise(node["preset"], field + ".preset");
  if (!node["kind"]) throw ConfigError(where(node, field) + ": missing 'kind'");
  const std::string kind = as<std::string>(node["kind"], field + ".kind");
  auto num = [&](const char* key, double fallback) {
    return node[key] ? as<double>(node[key], field + "." + key) : fallback;
  };
  NoiseSpec s;
  if (kind == "gaussian") {
    s = NoiseSpec::gaussian(num("mean", 0.0), num("variance", 1.0));
  } else if (kind == "mixed_gaussian") {
    s = NoiseSpec::mixed_gaussian(num("tau", 1.0), num("mean", 0.0), num("variance1", 1.0), num("variance2", 1.0));
  } else if (kind == "rayleigh") {
    s = NoiseSpec::rayleigh(num("scale", 1.0));
  } else if (kind == "mixture") {
    const YAML::Node comps = node["components"];
    if (!comps || !comps.IsSequence()) throw ConfigError(where(node, field) + ": mixture needs 'components'");
    std::vector<MixtureComponent> list;
    for (const auto& c : comps) {
      const Vector v = as_vector(c, field + ".components");
      if (v.size() != 3) throw ConfigError(where(c, field + ".components") + ": expected [weight, mean, variance]");
      list.push_back({v[0], v[1], v[2]});
    }
    s = NoiseSpec::mixture(std::move(list));
  } else {
    throw ConfigError(where(node["kind"], field + ".kind") + ": unknown noise kind '" + kind + "'");
  }
  try {
    s.validate();
  } catch (const ParameterError& e) {
    throw ConfigError(where(node, field) + ": " + e.what());
  }
  return s;
}

}  // namespace detail

/// Builds a scenario from a parsed YAML document. A `preset:` key selects a named scenario that
/// the remaining keys override.
inline ScenarioConfig scenario_from_yaml(const YAML::Node& root) {
  using namespace detail;
  if (!root.IsMap()) throw ConfigError("scenario file: top level must be a mapping");
  check_keys(root, "", {"name", "preset", "dt", "horizon", "mc_runs", "seed", "model", "init", "sensors", "noise", "R",
                        "algorithms", "kernel", "consensus", "report_node", "groups", "inflate_r", "output_dir",
                        "threads"});
  ScenarioConfig c;
  if (root["preset"]) {
    const std::string p = as<std::string>(root["preset"], "preset");
    try {
      c = p == "land_vehicle" ? land_vehicle_scenario() : scenario_by_name(p);
    } catch (const LookupError& e) {
      throw ConfigError(where(root["preset"], "preset") + ": " + e.what());
    }
  }
  if (root["name"]) c.name = as<std::string>(root["name"], "name");
  if (root["dt"]) c.dt = as<double>(root["dt"], "dt");
  if (root["horizon"]) c.horizon = as<int>(root["horizon"], "horizon");
  if (root["mc_runs"]) c.mc_runs = as<int>(root["mc_runs"], "mc_runs");
  if (root["seed"]) c.master_seed = as<std::uint64_t>(root["seed"], "seed");
  if (root["report_node"]) c.report_node = as<std::size_t>(root["report_node"], "report_node");
  if (root["inflate_r"]) c.inflate_r_with_residual = as<bool>(root["inflate_r"], "inflate_r");
  if (root["output_dir"]) c.output_dir = as<std::string>(root["output_dir"], "output_dir");
  if (root["threads"]) c.threads = as<int>(root["threads"], "threads");

  if (const auto m = root["model"]) {
    check_keys(m, "model", {"F", "Q", "constant_velocity"});
    if (m["F"]) c.f_mat = as_matrix(m["F"], "model.F");
    if (m["Q"]) c.q_cov = as_matrix(m["Q"], "model.Q");
  } else if (!root["preset"]) {
    throw ConfigError("scenario file: missing 'model' (or a 'preset')");
  }
  if (root["dt"] && root["preset"] && !(root["model"] && root["model"]["F"])) {
    // Keep a preset's constant-velocity transition consistent with an overridden dt.
    const Eigen::Index half = c.f_mat.rows() / 2;
    if (half > 0) c.f_mat.topRightCorner(half, half) = c.dt * Matrix::Identity(half, half);
  }

  if (const auto in = root["init"]) {
    check_keys(in, "init", {"x0", "x_hat0", "P0"});
    if (in["x0"]) c.x0 = as_vector(in["x0"], "init.x0");
    if (in["x_hat0"]) c.x_hat0 = as_vector(in["x_hat0"], "init.x_hat0");
    if (in["P0"]) c.p0 = as_matrix(in["P0"], "init.P0");
  }
  if (const auto m = root["model"]; m && m["constant_velocity"] &&
                                    as<bool>(m["constant_velocity"], "model.constant_velocity")) {
    const Eigen::Index half = c.x0.size() > 0 ? c.x0.size() / 2 : 2;
    c.f_mat = Matrix::Identity(2 * half, 2 * half);
    c.f_mat.topRightCorner(half, half) = c.dt * Matrix::Identity(half, half);
  }

  std::optional<Matrix> default_r;
  if (root["R"]) default_r = as_matrix(root["R"], "R");
  std::optional<NoiseSpec> default_noise;
  if (root["noise"]) default_noise = parse_noise(root["noise"], "noise");

  if (const auto ss = root["sensors"]) {
    if (!ss.IsSequence()) throw ConfigError(where(ss, "sensors") + ": expected a list");
    c.sensors.clear();
    for (std::size_t i = 0; i < ss.size(); ++i) {
      const auto& sn = ss[i];
      const std::string f = "sensors[" + std::to_string(i) + "]";
      check_keys(sn, f, {"kind", "H", "position", "R", "noise", "repeat"});
      SensorSpec s;
      const std::string kind = sn["kind"] ? as<std::string>(sn["kind"], f + ".kind") : "linear";
      if (kind == "linear") {
        s.kind = SensorKind::linear;
        if (!sn["H"]) throw ConfigError(where(sn, f) + ": linear sensor needs 'H'");
        s.h = as_matrix(sn["H"], f + ".H");
      } else if (kind == "range_bearing") {
        s.kind = SensorKind::range_bearing;
        if (!sn["position"]) throw ConfigError(where(sn, f) + ": range_bearing sensor needs 'position'");
        const Vector p = as_vector(sn["position"], f + ".position");
        if (p.size() != 2) throw ConfigError(where(sn["position"], f + ".position") + ": expected [x, y]");
        s.position = p;
      } else {
        throw ConfigError(where(sn["kind"], f + ".kind") + ": unknown sensor kind '" + kind + "'");
      }
      if (sn["R"]) {
        s.r_cov = as_matrix(sn["R"], f + ".R");
      } else if (default_r) {
        s.r_cov = *default_r;
      } else {
        throw ConfigError(where(sn, f) + ": missing 'R' (no top-level default)");
      }
      if (sn["noise"]) {
        s.noise = parse_noise(sn["noise"], f + ".noise");
      } else if (default_noise) {
        s.noise = *default_noise;
      } else {
        throw ConfigError(where(sn, f) + ": missing 'noise' (no top-level default)");
      }
      const int repeat = sn["repeat"] ? as<int>(sn["repeat"], f + ".repeat") : 1;
      if (repeat < 1) throw ConfigError(where(sn["repeat"], f + ".repeat") + ": must be >= 1");
      for (int r = 0; r < repeat; ++r) c.sensors.push_back(s);
    }
  } else {
    for (auto& s : c.sensors) {
      if (default_r) s.r_cov = *default_r;
      if (default_noise) s.noise = *default_noise;
    }
  }

  if (const auto a = root["algorithms"]) {
    if (!a.IsSequence()) throw ConfigError(where(a, "algorithms") + ": expected a list");
    c.algorithms.clear();
    for (const auto& v : a) {
      try {
        c.algorithms.push_back(parse_variant(as<std::string>(v, "algorithms")));
      } catch (const LookupError& e) {
        throw ConfigError(where(v, "algorithms") + ": " + e.what());
      }
    }
  }

  if (const auto k = root["kernel"]) {
    check_keys(k, "kernel", {"eta", "sigma1", "sigma2", "sigma_min", "sigma_max", "fp_tol", "fp_max_iter", "pi_form",
                             "r_tilde_window", "bandwidth_bound"});
    auto& kp = c.kernel;
    if (k["eta"]) kp.eta = as<double>(k["eta"], "kernel.eta");
    if (k["sigma1"]) kp.sigma1 = as<double>(k["sigma1"], "kernel.sigma1");
    if (k["sigma2"]) kp.sigma2 = as<double>(k["sigma2"], "kernel.sigma2");
    if (k["sigma_min"]) kp.sigma_min = as<double>(k["sigma_min"], "kernel.sigma_min");
    if (k["sigma_max"]) kp.sigma_max = as<double>(k["sigma_max"], "kernel.sigma_max");
    if (k["fp_tol"]) kp.fp_tol = as<double>(k["fp_tol"], "kernel.fp_tol");
    if (k["fp_max_iter"]) kp.fp_max_iter = as<int>(k["fp_max_iter"], "kernel.fp_max_iter");
    if (k["r_tilde_window"]) kp.r_tilde_window = as<std::size_t>(k["r_tilde_window"], "kernel.r_tilde_window");
    if (k["bandwidth_bound"]) kp.bandwidth_bound = as<bool>(k["bandwidth_bound"], "kernel.bandwidth_bound");
    if (k["pi_form"]) {
      const std::string pf = as<std::string>(k["pi_form"], "kernel.pi_form");
      if (pf == "theta") {
        kp.pi_form = PiForm::theta;
      } else if (pf == "eq39") {
        kp.pi_form = PiForm::eq39;
      } else {
        throw ConfigError(where(k["pi_form"], "kernel.pi_form") + ": expected 'theta' or 'eq39'");
      }
    }
  }

  if (const auto cs = root["consensus"]) {
    check_keys(cs, "consensus", {"topology", "graph_file", "alpha", "alpha_fraction", "gamma", "max_rounds", "warm_start"});
    auto& s = c.consensus;
    if (cs["topology"]) s.topology = as<std::string>(cs["topology"], "consensus.topology");
    if (cs["graph_file"]) s.graph_file = as<std::string>(cs["graph_file"], "consensus.graph_file");
    if (cs["alpha"]) s.alpha = as<double>(cs["alpha"], "consensus.alpha");
    if (cs["alpha_fraction"]) s.alpha_fraction = as<double>(cs["alpha_fraction"], "consensus.alpha_fraction");
    if (cs["gamma"]) s.gamma = as<double>(cs["gamma"], "consensus.gamma");
    if (cs["max_rounds"]) s.max_rounds = as<int>(cs["max_rounds"], "consensus.max_rounds");
    if (cs["warm_start"]) s.warm_start = as<bool>(cs["warm_start"], "consensus.warm_start");
  }

  if (const auto g = root["groups"]) {
    if (!g.IsSequence()) throw ConfigError(where(g, "groups") + ": expected a list");
    c.state_groups.clear();
    c.group_names.clear();
    for (const auto& item : g) {
      check_keys(item, "groups", {"name", "states"});
      if (!item["name"] || !item["states"]) throw ConfigError(where(item, "groups") + ": needs 'name' and 'states'");
      c.group_names.push_back(as<std::string>(item["name"], "groups.name"));
      std::vector<Eigen::Index> idx;
      for (const auto& s : item["states"]) idx.push_back(as<Eigen::Index>(s, "groups.states"));
      c.state_groups.push_back(idx);
    }
  }

  c.validate();
  return c;
}

inline ScenarioConfig load_scenario(const std::string& path) {
  YAML::Node root;
  try {
    root = YAML::LoadFile(path);
  } catch (const YAML::BadFile&) {
    throw ConfigError("cannot open scenario file '" + path + "'");
  } catch (const YAML::ParserException& e) {
    throw ConfigError(path + ": line " + std::to_string(e.mark.line + 1) + ": " + e.msg);
  }
  try {
    return scenario_from_yaml(root);
  } catch (const ConfigError& e) {
    throw ConfigError(path + ": " + e.what());
  }
}

// ---------------------------------------------------------------------------------------------
// Metrics

/// Per-run squared and absolute errors of one algorithm at the report node.
struct RunErrors {
  std::vector<Vector> sq;   ///< per group: horizon entries of ||e_group||^2
  std::vector<Vector> abs;  ///< per group: horizon entries of mean |e_k| over the group
};

inline RunErrors run_errors(const Matrix& estimates, const Matrix& truth,
                            const std::vector<std::vector<Eigen::Index>>& groups) {
  RunErrors r;
  const Eigen::Index horizon = truth.rows();
  for (const auto& g : groups) {
    Vector sq(horizon);
    Vector ab(horizon);
    for (Eigen::Index t = 0; t < horizon; ++t) {
      double s = 0.0;
      double a = 0.0;
      for (Eigen::Index k : g) {
        const double e = estimates(t, k) - truth(t, k);
        s += e * e;
        a += std::abs(e);
      }
      sq[t] = s;
      ab[t] = a / static_cast<double>(g.size());
    }
    r.sq.push_back(sq);
    r.abs.push_back(ab);
  }
  return r;
}

struct GroupMetrics {
  std::string name;
  Vector rmse;  ///< per step
  Vector mae;   ///< per step
  double armse = 0.0;
  double mean_mae = 0.0;
  double armse_stderr = 0.0;  ///< standard error of the per-run time-averaged RMS error
};

struct AlgorithmMetrics {
  Variant variant = Variant::dckf;
  std::vector<GroupMetrics> groups;
  int completed_runs = 0;
  int failed_runs = 0;
  std::vector<std::pair<int, std::string>> failures;  ///< (run index, reason)
  std::map<int, long long> iteration_histogram;
  double mean_consensus_rounds = 0.0;
  int max_consensus_rounds = 0;
  long long consensus_failures = 0;
  long long fp_nonconverged = 0;
  double max_fusion_error = 0.0;
  double max_agreement = 0.0;
  double seconds_per_step = 0.0;  ///< informational wall clock

  double completion() const {
    const int total = completed_runs + failed_runs;
    return total > 0 ? static_cast<double>(completed_runs) / total : 0.0;
  }

  const GroupMetrics& group(const std::string& name) const {
    for (const auto& g : groups)
      if (g.name == name) return g;
    throw LookupError("no metric group '" + name + "'");
  }
};

struct MetricsReport {
  std::string scenario;
  std::uint64_t master_seed = 0;
  int mc_runs = 0;
  int horizon = 0;
  std::size_t report_node = 0;
  std::vector<AlgorithmMetrics> algorithms;

  const AlgorithmMetrics& at(Variant v) const {
    for (const auto& a : algorithms)
      if (a.variant == v) return a;
    throw LookupError("algorithm " + variant_name(v) + " not in report");
  }
};

/// Aggregates per-run errors (in run order) into the RMSE/ARMSE/MAE tables of one algorithm.
inline std::vector<GroupMetrics> aggregate_errors(const std::vector<RunErrors>& runs,
                                                  const std::vector<std::string>& names, Eigen::Index horizon) {
  std::vector<GroupMetrics> out;
  for (std::size_t g = 0; g < names.size(); ++g) {
    GroupMetrics gm;
    gm.name = names[g];
    Vector sq = Vector::Zero(horizon);
    Vector ab = Vector::Zero(horizon);
    std::vector<double> per_run;
    for (const auto& r : runs) {
      sq += r.sq[g];
      ab += r.abs[g];
      per_run.push_back(r.sq[g].array().sqrt().mean());
    }
    const double count = static_cast<double>(runs.size());
    if (runs.empty()) {
      gm.rmse = Vector::Constant(horizon, std::numeric_limits<double>::quiet_NaN());
      gm.mae = gm.rmse;
    } else {
      gm.rmse = (sq / count).array().sqrt();
      gm.mae = ab / count;
    }
    gm.armse = gm.rmse.mean();
    gm.mean_mae = gm.mae.mean();
    if (per_run.size() > 1) {
      const double mean = std::accumulate(per_run.begin(), per_run.end(), 0.0) / count;
      double var = 0.0;
      for (double v : per_run) var += (v - mean) * (v - mean);
      gm.armse_stderr = std::sqrt(var / (count - 1.0) / count);
    }
    out.push_back(std::move(gm));
  }
  return out;
}

/// Worker count: configured value, else hardware concurrency, never more than the runs.
inline int worker_count(int configured, int runs) {
  int w = configured > 0 ? configured : static_cast<int>(std::thread::hardware_concurrency());
  return std::max(1, std::min(w, runs));
}

/// Outcome of one Monte Carlo run for every algorithm (common random numbers).
struct RunOutcome {
  std::vector<FilterRecord> records;
  std::vector<RunErrors> errors;
  std::vector<double> seconds;
};

/// Runs config.mc_runs independent runs. Run r uses the stream (master_seed, r); aggregation is
/// ordered by run index, so results do not depend on the number of workers.
inline MetricsReport monte_carlo(const ScenarioConfig& cfg) {
  cfg.validate();
  const FusionNetwork fusion = make_fusion_network(sensor_graph(cfg), cfg.consensus);
  const auto groups = cfg.groups();
  const auto names = cfg.names_of_groups();

  std::vector<RunOutcome> outcomes(static_cast<std::size_t>(cfg.mc_runs));
  std::atomic<int> next{0};
  std::mutex error_mutex;
  std::exception_ptr error;
  auto worker = [&]() {
    for (;;) {
      const int r = next.fetch_add(1);
      if (r >= cfg.mc_runs) return;
      try {
        Rng rng = make_stream(cfg.master_seed, static_cast<std::uint64_t>(r));
        const SimulatedRun sim = simulate(cfg, rng);
        RunOutcome& out = outcomes[static_cast<std::size_t>(r)];
        for (Variant v : cfg.algorithms) {
          const auto t0 = std::chrono::steady_clock::now();
          FilterRecord rec = run_filter(cfg, v, fusion, sim);
          out.seconds.push_back(std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
          out.errors.push_back(rec.diverged ? RunErrors{}
                                            : run_errors(rec.estimates[cfg.report_node], sim.truth, groups));
          rec.estimates.clear();
          out.records.push_back(std::move(rec));
        }
      } catch (...) {
        std::lock_guard<std::mutex> lock(error_mutex);
        if (!error) error = std::current_exception();
      }
    }
  };
  const int workers = worker_count(cfg.threads, cfg.mc_runs);
  if (workers == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (int i = 0; i < workers; ++i) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  if (error) std::rethrow_exception(error);

  MetricsReport rep;
  rep.scenario = cfg.name;
  rep.master_seed = cfg.master_seed;
  rep.mc_runs = cfg.mc_runs;
  rep.horizon = cfg.horizon;
  rep.report_node = cfg.report_node;
  for (std::size_t a = 0; a < cfg.algorithms.size(); ++a) {
    AlgorithmMetrics am;
    am.variant = cfg.algorithms[a];
    std::vector<RunErrors> ok;
    long long rounds_total = 0;
    long long steps = 0;
    double seconds = 0.0;
    for (int r = 0; r < cfg.mc_runs; ++r) {
      const RunOutcome& o = outcomes[static_cast<std::size_t>(r)];
      const FilterRecord& rec = o.records[a];
      seconds += o.seconds[a];
      if (rec.diverged) {
        ++am.failed_runs;
        am.failures.emplace_back(r, rec.failure);
        continue;
      }
      ++am.completed_runs;
      ok.push_back(o.errors[a]);
      for (int it : rec.iterations) ++am.iteration_histogram[it];
      for (int c : rec.consensus_rounds) {
        rounds_total += c;
        am.max_consensus_rounds = std::max(am.max_consensus_rounds, c);
      }
      steps += static_cast<long long>(rec.consensus_rounds.size());
      am.consensus_failures += rec.consensus_failures;
      am.fp_nonconverged += rec.nonconverged_fp;
      am.max_fusion_error = std::max(am.max_fusion_error, rec.max_fusion_error);
      am.max_agreement = std::max(am.max_agreement, rec.max_agreement);
    }
    am.mean_consensus_rounds = steps > 0 ? static_cast<double>(rounds_total) / static_cast<double>(steps) : 0.0;
    am.seconds_per_step = seconds / (static_cast<double>(cfg.mc_runs) * cfg.horizon);
    am.groups = aggregate_errors(ok, names, cfg.horizon);
    rep.algorithms.push_back(std::move(am));
  }
  return rep;
}

// ---------------------------------------------------------------------------------------------
// Output

/// Refuses to replace an existing file unless overwrite is set.
inline void ensure_writable(const std::filesystem::path& path, bool overwrite) {
  if (std::filesystem::exists(path) && !overwrite) {
    throw ConfigError("refusing to overwrite existing '" + path.string() + "' (pass --overwrite)");
  }
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
}

inline std::string format_number(double v) {
  std::ostringstream ss;
  ss.precision(17);
  ss << v;
  return ss.str();
}

/// step, algorithm, group, rmse, mae (steps are 1-based).
inline void write_metrics_csv(const MetricsReport& rep, std::ostream& out) {
  out << "step,algorithm,group,rmse,mae\n";
  for (const auto& a : rep.algorithms) {
    for (const auto& g : a.groups) {
      for (Eigen::Index t = 0; t < g.rmse.size(); ++t) {
        out << (t + 1) << ',' << variant_name(a.variant) << ',' << g.name << ',' << format_number(g.rmse[t]) << ','
            << format_number(g.mae[t]) << '\n';
      }
    }
  }
}

inline nlohmann::json summary_json(const MetricsReport& rep, bool include_timing = true) {
  nlohmann::json j;
  j["scenario"] = rep.scenario;
  j["master_seed"] = rep.master_seed;
  j["mc_runs"] = rep.mc_runs;
  j["horizon"] = rep.horizon;
  j["report_node"] = rep.report_node;
  j["run_seeds"] = "stream(master_seed, run_index) for run_index in [0, mc_runs)";
  nlohmann::json algos = nlohmann::json::array();
  for (const auto& a : rep.algorithms) {
    nlohmann::json x;
    x["algorithm"] = variant_name(a.variant);
    x["completed_runs"] = a.completed_runs;
    x["failed_runs"] = a.failed_runs;
    nlohmann::json fails = nlohmann::json::array();
    for (const auto& [run, why] : a.failures) fails.push_back({{"run", run}, {"reason", why}});
    x["failures"] = fails;
    for (const auto& g : a.groups) {
      x["armse"][g.name] = g.armse;
      x["armse_stderr"][g.name] = g.armse_stderr;
      x["mae"][g.name] = g.mean_mae;
    }
    nlohmann::json hist = nlohmann::json::object();
    for (const auto& [it, count] : a.iteration_histogram) hist[std::to_string(it)] = count;
    x["fixed_point_iterations"] = hist;
    x["fixed_point_nonconverged"] = a.fp_nonconverged;
    x["consensus"] = {{"mean_rounds", a.mean_consensus_rounds},
                      {"max_rounds", a.max_consensus_rounds},
                      {"nonconverged_steps", a.consensus_failures},
                      {"max_fusion_error", a.max_fusion_error},
                      {"max_node_disagreement", a.max_agreement}};
    if (include_timing) x["seconds_per_step"] = a.seconds_per_step;
    algos.push_back(x);
  }
  j["algorithms"] = algos;
  return j;
}

/// Writes metrics.csv, summary.json and per-group two-column series into `dir`.
inline std::vector<std::filesystem::path> write_report(const MetricsReport& rep, const std::filesystem::path& dir,
                                                       bool overwrite) {
  std::vector<std::filesystem::path> written;
  auto open = [&](const std::filesystem::path& p) {
    ensure_writable(p, overwrite);
    std::ofstream f(p);
    if (!f) throw ConfigError("cannot write '" + p.string() + "'");
    written.push_back(p);
    return f;
  };
  // Check every target first so a refusal leaves nothing half-written.
  std::vector<std::filesystem::path> targets{dir / "metrics.csv", dir / "summary.json"};
  for (const auto& a : rep.algorithms)
    for (const auto& g : a.groups)
      for (const char* metric : {"rmse", "mae"})
        targets.push_back(dir / ("series_" + std::string(metric) + "_" + g.name + "_" + variant_name(a.variant) + ".dat"));
  for (const auto& t : targets) {
    if (std::filesystem::exists(t) && !overwrite) ensure_writable(t, false);
  }
  {
    auto f = open(targets[0]);
    write_metrics_csv(rep, f);
  }
  {
    auto f = open(targets[1]);
    f << summary_json(rep).dump(2) << '\n';
  }
  std::size_t k = 2;
  for (const auto& a : rep.algorithms) {
    for (const auto& g : a.groups) {
      for (const Vector* series : {&g.rmse, &g.mae}) {
        auto f = open(targets[k++]);
        f << "# step " << (series == &g.rmse ? "rmse" : "mae") << ' ' << g.name << ' ' << variant_name(a.variant)
          << '\n';
        for (Eigen::Index t = 0; t < series->size(); ++t) f << (t + 1) << ' ' << format_number((*series)[t]) << '\n';
      }
    }
  }
  return written;
}

// ---------------------------------------------------------------------------------------------
// Runtime scaling probe

struct ScalingPoint {
  Eigen::Index n = 0;
  double seconds_per_step = 0.0;
};

struct ScalingResult {
  std::vector<ScalingPoint> points;
  double slope = 0.0;  ///< least-squares slope of log(time) against log(n)
};

/// Times one full local AMEEF update (prediction, regression, fixed point, information
/// statistics) on a random n-state linear model with n/2 measurements.
inline ScalingResult scaling_probe(const std::vector<Eigen::Index>& dims, int steps, std::uint64_t seed) {
  ScalingResult res;
  for (Eigen::Index n : dims) {
    if (n < 2) throw ParameterError("scaling_probe: state dimension must be >= 2");
    Rng rng = make_stream(seed, static_cast<std::uint64_t>(n));
    const Eigen::Index m = std::max<Eigen::Index>(1, n / 2);
    Matrix f = Matrix::Identity(n, n);
    for (Eigen::Index i = 0; i + 1 < n; ++i) f(i, i + 1) = 0.1;
    Matrix h(m, n);
    for (Eigen::Index i = 0; i < m; ++i)
      for (Eigen::Index j = 0; j < n; ++j) h(i, j) = detail::standard_normal(rng);
    NodeRuntime node(0, linear_model(f, h, 0.01 * Matrix::Identity(n, n), Matrix::Identity(m, m)),
                     StateEstimate{Vector::Zero(n), Matrix::Identity(n, n)}, Variant::ameef_dckf, KernelParams{});
    std::vector<Vector> ys;
    for (int t = 0; t < steps; ++t) {
      Vector y(m);
      for (Eigen::Index i = 0; i < m; ++i) y[i] = detail::standard_normal(rng);
      ys.push_back(y);
    }
    const auto t0 = std::chrono::steady_clock::now();
    for (int t = 0; t < steps; ++t) {
      LocalResult lr = local_filter(node, ys[static_cast<std::size_t>(t)]);
      node.estimate = fuse_statistics(lr.prior, lr.packet.d, lr.packet.v);
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    res.points.push_back({n, secs / steps});
  }
  if (res.points.size() >= 2) {
    double sx = 0, sy = 0, sxx = 0, sxy = 0;
    const double k = static_cast<double>(res.points.size());
    for (const auto& p : res.points) {
      const double x = std::log(static_cast<double>(p.n));
      const double y = std::log(p.seconds_per_step);
      sx += x;
      sy += y;
      sxx += x * x;
      sxy += x * y;
    }
    res.slope = (k * sxy - sx * sy) / (k * sxx - sx * sx);
  }
  return res;
}

}  // namespace ameef
