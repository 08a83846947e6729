#pragma once

// Distributed estimation over a sensor network: each node runs its local MEEF fixed point,
// publishes additive information statistics, and all nodes fuse the network sums obtained by
// leader-follower average consensus.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "ameef/ckf.hpp"
#include "ameef/consensus.hpp"
#include "ameef/errors.hpp"
#include "ameef/kernel_weights.hpp"
#include "ameef/noise.hpp"
#include "ameef/scenario.hpp"

namespace ameef {

/// Additive statistics of one node, stackable into a single consensus vector [D | upper(V)].
struct FusionPacket {
  Vector d;
  Matrix v;

  static Eigen::Index stacked_size(Eigen::Index n) { return n + n * (n + 1) / 2; }

  Vector stack() const {
    const Eigen::Index n = d.size();
    Vector out(stacked_size(n));
    out.head(n) = d;
    Eigen::Index k = n;
    for (Eigen::Index i = 0; i < n; ++i)
      for (Eigen::Index j = i; j < n; ++j) out[k++] = v(i, j);
    return out;
  }

  static FusionPacket unstack(const Eigen::Ref<const Vector>& packed, Eigen::Index n) {
    if (packed.size() != stacked_size(n)) throw ParameterError("FusionPacket::unstack: length mismatch");
    FusionPacket p;
    p.d = packed.head(n);
    p.v.resize(n, n);
    Eigen::Index k = n;
    for (Eigen::Index i = 0; i < n; ++i) {
      for (Eigen::Index j = i; j < n; ++j) {
        p.v(i, j) = packed[k];
        p.v(j, i) = packed[k];
        ++k;
      }
    }
    return p;
  }
};

struct NodeRuntime {
  std::size_t id = 0;
  SystemModel model;
  StateEstimate estimate;
  Variant variant = Variant::dckf;
  KernelParams kernel;
  std::vector<InnovationWindow> windows;  ///< one per measurement channel (adaptive only)

  NodeRuntime() = default;
  NodeRuntime(std::size_t node_id, SystemModel m, StateEstimate init, Variant v, const KernelParams& base)
      : id(node_id), model(std::move(m)), estimate(std::move(init)), variant(v), kernel(variant_params(v, base)) {
    kernel.validate();
  }

  /// Running true-noise variance estimates, or nullopt while any window is still filling.
  std::optional<Vector> r_tilde() const {
    if (!kernel.adaptive || windows.empty()) return std::nullopt;
    Vector out(static_cast<Eigen::Index>(windows.size()));
    for (std::size_t i = 0; i < windows.size(); ++i) {
      const auto v = windows[i].variance();
      out[static_cast<Eigen::Index>(i)] = v.value_or(0.0);
    }
    return out;
  }
};

/// Everything a node computes locally before the consensus phase.
struct LocalResult {
  StateEstimate prior;
  FusionPacket packet;
  int iterations = 0;
  bool converged = true;
  bool degenerate = false;
  bool failed = false;
  std::string failure;
};

inline LocalResult local_filter(NodeRuntime& node, const Vector& y) {
  LocalResult out;
  out.prior = predict(node.estimate, node.model);
  const Eigen::Index n = out.prior.dim();
  try {
    const MeasurementMoments mm = measurement_moments(out.prior, node.model);
    const RegressionModel reg = build_regression(out.prior, y, mm, node.model);
    const FixedPointResult fp = fixed_point_update(reg, out.prior, node.kernel, node.r_tilde());
    out.iterations = fp.iterations;
    out.converged = fp.converged;
    out.degenerate = fp.degenerate;
    if (node.kernel.adaptive) {
      if (node.windows.size() != static_cast<std::size_t>(reg.m())) {
        node.windows.assign(static_cast<std::size_t>(reg.m()), InnovationWindow(node.kernel.r_tilde_window));
      }
      for (Eigen::Index i = 0; i < reg.m(); ++i) node.windows[static_cast<std::size_t>(i)].push(reg.innovation[i]);
    }
    if (fp.degenerate) throw SingularMatrixError("local fixed point degenerate", std::numeric_limits<double>::infinity());
    const Matrix info = measurement_information(reg, fp.pi);
    const LocalStatistics ls = local_statistics(reg.s_mat, info, reg.pseudo_measurement(out.prior.mean));
    out.packet.d = ls.d;
    out.packet.v = ls.v;
  } catch (const Error& e) {
    out.failed = true;
    out.failure = e.what();
    out.packet.d = Vector::Zero(n);
    out.packet.v = Matrix::Zero(n, n);
  }
  return out;
}

/// Consensus wiring for a sensor graph where every node is both leader and follower.
struct FusionNetwork {
  ConsensusNetwork net;
  double gamma = 1e-6;
  int max_rounds = 0;
  bool warm_start = false;

  std::size_t node_count() const { return net.follower_count(); }
};

/// alpha given explicitly, or alpha_fraction times the step-size bound of the sensor graph.
inline FusionNetwork make_fusion_network(const Digraph& sensors, const ConsensusSettings& cs) {
  FusionNetwork fn;
  const Digraph g = self_led(sensors);
  double alpha = 0.0;
  if (cs.alpha) {
    alpha = *cs.alpha;
  } else {
    if (!(cs.alpha_fraction > 0.0 && cs.alpha_fraction < 1.0)) {
      throw ConfigError("consensus: alpha_fraction must lie in (0, 1)");
    }
    const ConsensusNetwork probe = build_weights(g, 1e-12);
    alpha = sensors.node_count > 1 ? cs.alpha_fraction * step_size_bound(probe.l1) : 1.0;
  }
  fn.net = build_weights(g, alpha);
  fn.gamma = cs.gamma;
  fn.max_rounds = cs.max_rounds > 0 ? cs.max_rounds : default_max_rounds(sensors.node_count);
  fn.warm_start = cs.warm_start;
  return fn;
}

struct StepDiagnostics {
  int consensus_rounds = 0;
  bool consensus_converged = true;
  std::string consensus_failure;
  std::vector<int> iterations;  ///< fixed-point iterations per node
  std::vector<char> fp_converged;
  std::vector<char> node_failed;
  std::vector<char> fusion_failed;  ///< fused information unusable; node kept its prior
  double fusion_error = 0.0;  ///< max |m * follower average - sum of packets|
  double agreement = 0.0;     ///< max spread of posterior means across nodes
};

/// Consensus state carried between steps for the warm-start option.
struct ConsensusMemory {
  std::optional<PushSumState> final_state;
  Matrix previous_values;
};

/// One filtering instant across the network.
inline StepDiagnostics distributed_step(std::vector<NodeRuntime>& nodes, const FusionNetwork& fusion,
                                        const std::vector<Vector>& y_all, ConsensusMemory* memory = nullptr) {
  const std::size_t count = nodes.size();
  if (count == 0) throw ParameterError("distributed_step: no nodes");
  if (y_all.size() != count) throw ParameterError("distributed_step: one measurement per node is required");
  if (fusion.node_count() != count) throw ParameterError("distributed_step: network size does not match nodes");
  const Eigen::Index n = nodes.front().estimate.dim();

  StepDiagnostics diag;
  diag.iterations.resize(count);
  diag.fp_converged.resize(count);
  diag.node_failed.resize(count);
  diag.fusion_failed.resize(count);

  std::vector<LocalResult> local;
  local.reserve(count);
  const Eigen::Index k = FusionPacket::stacked_size(n);
  Matrix values(static_cast<Eigen::Index>(count), k);
  for (std::size_t i = 0; i < count; ++i) {
    local.push_back(local_filter(nodes[i], y_all[i]));
    diag.iterations[i] = local.back().iterations;
    diag.fp_converged[i] = local.back().converged ? 1 : 0;
    diag.node_failed[i] = local.back().failed ? 1 : 0;
    values.row(static_cast<Eigen::Index>(i)) = local.back().packet.stack().transpose();
  }

  // Stop tighter than gamma so the recovered sums (m times the average) stay within 10 gamma.
  const double m = static_cast<double>(fusion.net.leader_count());
  const double stop = fusion.gamma / m;
  LfacResult lr;
  if (fusion.warm_start && memory && memory->final_state && memory->previous_values.rows() == values.rows() &&
      memory->previous_values.cols() == values.cols()) {
    lr = run_push_sum(fusion.net, warm_start_state(fusion.net, *memory->final_state, memory->previous_values, values),
                      stop, fusion.max_rounds);
  } else {
    lr = run_lfac(fusion.net, values, stop, fusion.max_rounds);
  }
  if (memory) {
    memory->final_state = lr.final_state;
    memory->previous_values = values;
  }
  diag.consensus_rounds = lr.rounds;
  diag.consensus_converged = lr.converged;
  diag.consensus_failure = lr.failure;

  const Vector exact_sum = values.colwise().sum().transpose();
  for (std::size_t i = 0; i < count; ++i) {
    // Followers are ordered by node id (leader copies are numbered after them).
    const Vector sums = m * lr.beta.row(static_cast<Eigen::Index>(i)).transpose();
    if (sums.allFinite()) diag.fusion_error = std::max(diag.fusion_error, (sums - exact_sum).cwiseAbs().maxCoeff());
    try {
      if (!sums.allFinite()) throw ProtocolError("consensus produced no estimate for this node");
      const FusionPacket total = FusionPacket::unstack(sums, n);
      StateEstimate post = fuse_statistics(local[i].prior, total.d, total.v);
      if (!post.mean.allFinite() || !post.cov.allFinite()) throw ModelError("fused posterior is not finite");
      nodes[i].estimate = std::move(post);
    } catch (const Error&) {
      diag.fusion_failed[i] = 1;
      nodes[i].estimate = local[i].prior;
    }
  }
  for (std::size_t i = 1; i < count; ++i) {
    diag.agreement = std::max(diag.agreement, (nodes[i].estimate.mean - nodes[0].estimate.mean).cwiseAbs().maxCoeff());
  }
  return diag;
}

/// Centralized oracle: the fused posterior from exactly summed packets.
inline StateEstimate centralized_fusion(const StateEstimate& prior, const std::vector<FusionPacket>& packets) {
  if (packets.empty()) return prior;
  const Eigen::Index n = prior.dim();
  Vector d = Vector::Zero(n);
  Matrix v = Matrix::Zero(n, n);
  for (const auto& p : packets) {
    d += p.d;
    v += p.v;
  }
  return fuse_statistics(prior, d, v);
}

/// Truth and measurements of one Monte Carlo run; shared by every algorithm of that run.
struct SimulatedRun {
  Matrix truth;                               ///< horizon x n, row t-1 holds x(t)
  std::vector<std::vector<Vector>> measurements;  ///< [t-1][node]
};

inline SimulatedRun simulate(const ScenarioConfig& cfg, Rng& rng) {
  const Eigen::Index n = cfg.state_dim();
  const VectorMap f = cfg.transition();
  std::vector<VectorMap> h;
  for (const auto& s : cfg.sensors) h.push_back(s.function());
  const Matrix q_chol = robust_cholesky(cfg.q_cov).lower;
  const bool zero_q = cfg.q_cov.cwiseAbs().maxCoeff() == 0.0;

  SimulatedRun run;
  run.truth.resize(cfg.horizon, n);
  run.measurements.resize(static_cast<std::size_t>(cfg.horizon));
  Vector x = cfg.x0;
  for (int t = 0; t < cfg.horizon; ++t) {
    Vector z(n);
    for (Eigen::Index j = 0; j < n; ++j) z[j] = detail::standard_normal(rng);
    x = f(x);
    if (!zero_q) x += q_chol * z;
    run.truth.row(t) = x.transpose();
    auto& ys = run.measurements[static_cast<std::size_t>(t)];
    ys.reserve(cfg.sensors.size());
    for (std::size_t i = 0; i < cfg.sensors.size(); ++i) {
      Vector y = h[i](x);
      y += sample(cfg.sensors[i].noise, rng, y.size());
      ys.push_back(std::move(y));
    }
  }
  return run;
}

/// Per-algorithm outcome of one run.
struct FilterRecord {
  Variant variant = Variant::dckf;
  std::vector<Matrix> estimates;  ///< per node: horizon x n posterior means
  std::vector<int> iterations;    ///< fixed-point iteration counts, all nodes and steps
  std::vector<int> consensus_rounds;
  int nonconverged_fp = 0;
  int node_failures = 0;
  int fusion_failures = 0;
  int consensus_failures = 0;
  double max_fusion_error = 0.0;
  double max_agreement = 0.0;
  bool diverged = false;
  std::string failure;
};

inline std::vector<NodeRuntime> make_nodes(const ScenarioConfig& cfg, Variant variant) {
  std::vector<NodeRuntime> nodes;
  StateEstimate init{cfg.x_hat0, cfg.p0};
  for (std::size_t i = 0; i < cfg.node_count(); ++i) nodes.emplace_back(i, cfg.node_model(i), init, variant, cfg.kernel);
  return nodes;
}

inline Digraph sensor_graph(const ScenarioConfig& cfg) {
  Digraph g;
  if (!cfg.consensus.graph_file.empty()) {
    g = read_graph(cfg.consensus.graph_file);
    if (g.node_count != cfg.node_count()) throw ConfigError("consensus graph node count does not match sensors");
    if (!g.leaders.empty()) throw ConfigError("consensus graph for the filter must not declare leaders");
  } else if (cfg.node_count() == 1) {
    g.node_count = 1;
  } else {
    g = topology_preset(cfg.consensus.topology, cfg.node_count());
  }
  return g;
}

/// Runs one algorithm over a simulated run; failures are recorded, never thrown.
inline FilterRecord run_filter(const ScenarioConfig& cfg, Variant variant, const FusionNetwork& fusion,
                               const SimulatedRun& sim) {
  FilterRecord rec;
  rec.variant = variant;
  const Eigen::Index n = cfg.state_dim();
  rec.estimates.assign(cfg.node_count(), Matrix::Constant(cfg.horizon, n, std::numeric_limits<double>::quiet_NaN()));
  try {
    std::vector<NodeRuntime> nodes = make_nodes(cfg, variant);
    ConsensusMemory memory;
    for (int t = 0; t < cfg.horizon; ++t) {
      const StepDiagnostics d = distributed_step(nodes, fusion, sim.measurements[static_cast<std::size_t>(t)], &memory);
      for (std::size_t i = 0; i < nodes.size(); ++i) {
        rec.estimates[i].row(t) = nodes[i].estimate.mean.transpose();
        rec.iterations.push_back(d.iterations[i]);
        if (!d.fp_converged[i]) ++rec.nonconverged_fp;
        if (d.node_failed[i]) ++rec.node_failures;
        if (d.fusion_failed[i]) ++rec.fusion_failures;
      }
      rec.consensus_rounds.push_back(d.consensus_rounds);
      if (!d.consensus_converged) ++rec.consensus_failures;
      rec.max_fusion_error = std::max(rec.max_fusion_error, d.fusion_error);
      rec.max_agreement = std::max(rec.max_agreement, d.agreement);
      for (const auto& node : nodes) {
        if (!node.estimate.mean.allFinite()) {
          rec.diverged = true;
          rec.failure = "non-finite estimate at step " + std::to_string(t + 1);
          return rec;
        }
      }
    }
  } catch (const std::exception& e) {
    rec.diverged = true;
    rec.failure = e.what();
  }
  return rec;
}

/// Simulates truth and measurements, then filters them with one algorithm.
inline std::pair<SimulatedRun, FilterRecord> run_trajectory(const ScenarioConfig& cfg, Variant variant, Rng& rng) {
  cfg.validate();
  const FusionNetwork fusion = make_fusion_network(sensor_graph(cfg), cfg.consensus);
  SimulatedRun sim = simulate(cfg, rng);
  FilterRecord rec = run_filter(cfg, variant, fusion, sim);
  return {std::move(sim), std::move(rec)};
}

}  // namespace ameef
