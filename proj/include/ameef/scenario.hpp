#pragma once

// Algorithm variants and the scenario description shared by the network estimator and the
// benchmark harness.

#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "ameef/ckf.hpp"
#include "ameef/errors.hpp"
#include "ameef/kernel_weights.hpp"
#include "ameef/noise.hpp"

namespace ameef {

enum class Variant { dckf, mcc_dckf, mee_dckf, meef_dckf, ameef_dckf };

inline const std::vector<Variant>& all_variants() {
  static const std::vector<Variant> v{Variant::dckf, Variant::mcc_dckf, Variant::mee_dckf, Variant::meef_dckf,
                                      Variant::ameef_dckf};
  return v;
}

inline std::string variant_name(Variant v) {
  switch (v) {
    case Variant::dckf: return "DCKF";
    case Variant::mcc_dckf: return "MCC-DCKF";
    case Variant::mee_dckf: return "MEE-DCKF";
    case Variant::meef_dckf: return "MEEF-DCKF";
    case Variant::ameef_dckf: return "AMEEF-DCKF";
  }
  return "?";
}

inline Variant parse_variant(const std::string& name) {
  std::string key;
  for (char c : name) key += static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
  for (Variant v : all_variants()) {
    const std::string full = variant_name(v);
    if (key == full || key + "-DCKF" == full) return v;
  }
  throw LookupError("unknown algorithm '" + name + "' (known: DCKF, MCC-DCKF, MEE-DCKF, MEEF-DCKF, AMEEF-DCKF)");
}

/// Kernel settings of a variant derived from the shared base settings.
inline KernelParams variant_params(Variant v, const KernelParams& base) {
  KernelParams p = base;
  switch (v) {
    case Variant::dckf:
      p.robust = false;
      p.adaptive = false;
      break;
    case Variant::mcc_dckf:
      p.robust = true;
      p.eta = 1.0;
      p.adaptive = false;
      break;
    case Variant::mee_dckf:
      p.robust = true;
      p.eta = 0.0;
      p.adaptive = false;
      break;
    case Variant::meef_dckf:
      p.robust = true;
      p.adaptive = false;
      break;
    case Variant::ameef_dckf:
      p.robust = true;
      p.adaptive = true;
      break;
  }
  return p;
}

enum class SensorKind { linear, range_bearing };

/// Measurement function of one sensor.
struct SensorSpec {
  SensorKind kind = SensorKind::linear;
  Matrix h;                  ///< linear: m x n
  Eigen::Vector2d position;  ///< range_bearing: sensor location in the plane of states 0 and 1
  Matrix r_cov;              ///< nominal covariance assumed by the filter
  NoiseSpec noise;           ///< applied independently to every measurement component

  Eigen::Index measurement_dim() const { return kind == SensorKind::linear ? h.rows() : 2; }

  VectorMap function() const {
    if (kind == SensorKind::linear) {
      const Matrix hm = h;
      return [hm](const Vector& x) -> Vector { return hm * x; };
    }
    const Eigen::Vector2d pos = position;
    return [pos](const Vector& x) -> Vector {
      const double dx = x[0] - pos[0];
      const double dy = x[1] - pos[1];
      Vector y(2);
      y << std::hypot(dx, dy), std::atan2(dy, dx);
      return y;
    };
  }
};

struct ConsensusSettings {
  std::string topology = "ring_chords";  ///< preset name, or a graph file when graph_file is set
  std::string graph_file;
  std::optional<double> alpha;  ///< absolute step size; otherwise alpha_fraction * bound
  double alpha_fraction = 0.5;
  double gamma = 1e-6;
  int max_rounds = 0;  ///< 0 selects 10 * nodes^2
  bool warm_start = false;
};

struct ScenarioConfig {
  std::string name = "custom";
  Matrix f_mat;             ///< linear transition; ignored when `f` is set
  VectorMap f;              ///< optional nonlinear transition (library use only)
  Matrix q_cov;             ///< process-noise covariance (true and assumed)
  std::vector<SensorSpec> sensors;
  Vector x0;
  Vector x_hat0;
  Matrix p0;
  double dt = 1.0;
  int horizon = 100;
  int mc_runs = 10;
  std::uint64_t master_seed = 1;
  std::vector<Variant> algorithms = all_variants();
  KernelParams kernel;
  bool inflate_r_with_residual = false;
  ConsensusSettings consensus;
  std::size_t report_node = 0;  ///< 0-based node whose metrics are reported
  std::vector<std::vector<Eigen::Index>> state_groups;  ///< metric groups; empty = one group of all states
  std::vector<std::string> group_names;
  std::string output_dir;
  int threads = 0;  ///< 0 selects hardware concurrency

  Eigen::Index state_dim() const { return x0.size(); }
  std::size_t node_count() const { return sensors.size(); }

  VectorMap transition() const {
    if (f) return f;
    const Matrix fm = f_mat;
    return [fm](const Vector& x) -> Vector { return fm * x; };
  }

  SystemModel node_model(std::size_t i) const {
    SystemModel m;
    m.f = transition();
    m.h = sensors.at(i).function();
    m.q_cov = q_cov;
    m.r_cov = sensors.at(i).r_cov;
    m.inflate_r_with_residual = inflate_r_with_residual;
    return m;
  }

  void validate() const {
    const Eigen::Index n = x0.size();
    if (n < 1) throw ConfigError("scenario: x0 must have at least one entry");
    if (!f && (f_mat.rows() != n || f_mat.cols() != n)) throw ConfigError("scenario: F must be n x n");
    if (q_cov.rows() != n || q_cov.cols() != n) throw ConfigError("scenario: Q must be n x n");
    if (x_hat0.size() != n) throw ConfigError("scenario: x_hat0 must have n entries");
    if (p0.rows() != n || p0.cols() != n) throw ConfigError("scenario: P0 must be n x n");
    if (!(dt > 0.0)) throw ConfigError("scenario: dt must be positive");
    if (horizon < 1) throw ConfigError("scenario: horizon must be >= 1");
    if (mc_runs < 1) throw ConfigError("scenario: mc_runs must be >= 1");
    if (sensors.empty()) throw ConfigError("scenario: at least one sensor is required");
    for (std::size_t i = 0; i < sensors.size(); ++i) {
      const auto& s = sensors[i];
      const std::string where = "scenario: sensor " + std::to_string(i);
      if (s.kind == SensorKind::linear && s.h.cols() != n) throw ConfigError(where + ": H must have n columns");
      if (s.kind == SensorKind::range_bearing && n < 2) throw ConfigError(where + ": range_bearing needs n >= 2");
      const Eigen::Index m = s.measurement_dim();
      if (m < 1) throw ConfigError(where + ": empty measurement");
      if (s.r_cov.rows() != m || s.r_cov.cols() != m) throw ConfigError(where + ": R must be m x m");
      try {
        s.noise.validate();
      } catch (const ParameterError& e) {
        throw ConfigError(where + ": " + e.what());
      }
    }
    if (report_node >= sensors.size()) throw ConfigError("scenario: report_node out of range");
    if (algorithms.empty()) throw ConfigError("scenario: no algorithms selected");
    for (const auto& g : state_groups) {
      if (g.empty()) throw ConfigError("scenario: empty state group");
      for (Eigen::Index k : g) {
        if (k < 0 || k >= n) throw ConfigError("scenario: state group index out of range");
      }
    }
    if (!group_names.empty() && group_names.size() != state_groups.size()) {
      throw ConfigError("scenario: group_names must match state_groups");
    }
    if (!(consensus.gamma > 0.0)) throw ConfigError("scenario: consensus gamma must be positive");
    try {
      kernel.validate();
    } catch (const ParameterError& e) {
      throw ConfigError(std::string("scenario: kernel: ") + e.what());
    }
  }

  std::vector<std::vector<Eigen::Index>> groups() const {
    if (!state_groups.empty()) return state_groups;
    std::vector<Eigen::Index> all;
    for (Eigen::Index k = 0; k < x0.size(); ++k) all.push_back(k);
    return {all};
  }

  std::vector<std::string> names_of_groups() const {
    if (!group_names.empty()) return group_names;
    std::vector<std::string> out;
    const auto g = groups();
    for (std::size_t i = 0; i < g.size(); ++i) out.push_back(g.size() == 1 ? "state" : "group" + std::to_string(i));
    return out;
  }
};

}  // namespace ameef
