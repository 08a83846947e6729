#pragma once

// Leader-follower average consensus over a directed sensor graph using Push-Sum.
//
// Leaders are stationary. At the start of a consensus run every leader pushes its value and a
// unit weight to its follower out-neighbours (A2, column stochastic). Followers then mix sums
// and weights with A1 = I - alpha * L1, where L1 is the out-degree Laplacian of the follower
// subgraph; A1 is column stochastic with the eigenvalue-1 structure, so the total sum and
// weight held by followers are conserved and every ratio s_i / w_i converges to
// sum(leader values) / m.

#include <algorithm>
#include <cmath>
#include <complex>
#include <cstddef>
#include <fstream>
#include <functional>
#include <istream>
#include <limits>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>
#include <Eigen/Eigenvalues>

#include "ameef/errors.hpp"

namespace ameef {

/// Directed graph; an edge (src, dst) means src sends to dst (src is an in-neighbour of dst).
struct Digraph {
  std::size_t node_count = 0;
  std::vector<std::pair<std::size_t, std::size_t>> edges;
  std::vector<std::size_t> leaders;

  void add_undirected(std::size_t a, std::size_t b) {
    edges.emplace_back(a, b);
    edges.emplace_back(b, a);
  }
};

/// Parses the plain-text edge list: one `src dst` pair per line, a `leaders: i,j,k` line and
/// an optional `nodes: N` line. Indices are 0-based; `#` starts a comment.
inline Digraph parse_edge_list(std::istream& in) {
  Digraph g;
  std::size_t max_index = 0;
  bool any_index = false;
  std::optional<std::size_t> declared;
  std::string line;
  int line_no = 0;
  auto note = [&](std::size_t v) {
    max_index = any_index ? std::max(max_index, v) : v;
    any_index = true;
  };
  auto fail = [&](const std::string& why) {
    throw ConfigError("graph line " + std::to_string(line_no) + ": " + why);
  };
  auto parse_index = [&](const std::string& tok) -> std::size_t {
    std::size_t pos = 0;
    long long v = 0;
    try {
      v = std::stoll(tok, &pos);
    } catch (const std::exception&) {
      fail("expected a node index, got '" + tok + "'");
    }
    if (pos != tok.size() || v < 0) fail("expected a non-negative node index, got '" + tok + "'");
    return static_cast<std::size_t>(v);
  };

  while (std::getline(in, line)) {
    ++line_no;
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    const auto first = line.find_first_not_of(" \t\r");
    if (first == std::string::npos) continue;
    line = line.substr(first);
    line.erase(line.find_last_not_of(" \t\r") + 1);

    if (line.rfind("leaders:", 0) == 0) {
      std::string rest = line.substr(8);
      std::replace(rest.begin(), rest.end(), ',', ' ');
      std::istringstream ss(rest);
      std::string tok;
      while (ss >> tok) {
        const std::size_t v = parse_index(tok);
        g.leaders.push_back(v);
        note(v);
      }
      continue;
    }
    if (line.rfind("nodes:", 0) == 0) {
      std::istringstream ss(line.substr(6));
      std::string tok;
      if (!(ss >> tok)) fail("missing node count");
      declared = parse_index(tok);
      continue;
    }
    std::istringstream ss(line);
    std::string a, b, extra;
    if (!(ss >> a >> b) || (ss >> extra)) fail("expected 'src dst'");
    const std::size_t src = parse_index(a);
    const std::size_t dst = parse_index(b);
    g.edges.emplace_back(src, dst);
    note(src);
    note(dst);
  }
  g.node_count = any_index ? max_index + 1 : 0;
  if (declared) {
    if (*declared < g.node_count) throw ConfigError("graph: 'nodes:' is smaller than the largest index used");
    g.node_count = *declared;
  }
  return g;
}

inline Digraph read_graph(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open graph file '" + path + "'");
  return parse_edge_list(in);
}

struct ConsensusNetwork {
  std::size_t n_total = 0;
  std::vector<std::size_t> leaders;    ///< L, ascending
  std::vector<std::size_t> followers;  ///< F, ascending
  double alpha = 0.0;
  Eigen::MatrixXd l1;  ///< follower-subgraph Laplacian (out-degree form, zero column sums)
  Eigen::MatrixXd l2;  ///< follower-leader coupling, -1 per leader->follower edge
  Eigen::MatrixXd a1;  ///< I - alpha * L1
  Eigen::MatrixXd a2;  ///< -alpha * L2 rescaled to column stochastic
  /// Largest |eigenvalue| of A1 apart from the unit one; sets the geometric tail of the ratios.
  double contraction = 0.0;
  /// A1 has no negative entries, so follower weights can never leave the positive orthant.
  bool nonnegative = true;

  std::size_t leader_count() const { return leaders.size(); }
  std::size_t follower_count() const { return followers.size(); }

  /// Full weight matrix in original node order: follower rows [A1 | A2], leader rows identity.
  Eigen::MatrixXd weights() const {
    Eigen::MatrixXd a = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(n_total), static_cast<Eigen::Index>(n_total));
    for (std::size_t i = 0; i < followers.size(); ++i) {
      for (std::size_t j = 0; j < followers.size(); ++j) a(followers[i], followers[j]) = a1(i, j);
      for (std::size_t l = 0; l < leaders.size(); ++l) a(followers[i], leaders[l]) = a2(i, l);
    }
    for (std::size_t l : leaders) a(l, l) = 1.0;
    return a;
  }
};

/// min over eigenvalues of L1 with positive real part of 2 Re / (Re^2 + Im^2).
inline double step_size_bound(const Eigen::MatrixXd& l1) {
  if (l1.rows() != l1.cols() || l1.rows() == 0) throw ParameterError("step_size_bound: L1 must be square and non-empty");
  Eigen::EigenSolver<Eigen::MatrixXd> es(l1, false);
  if (es.info() != Eigen::Success) throw TopologyError("step_size_bound: eigenvalue computation failed");
  const double tol = 1e-12 * std::max(1.0, l1.cwiseAbs().maxCoeff());
  double bound = std::numeric_limits<double>::infinity();
  for (const std::complex<double>& lam : es.eigenvalues()) {
    if (lam.real() > tol) bound = std::min(bound, 2.0 * lam.real() / std::norm(lam));
  }
  if (!std::isfinite(bound)) throw TopologyError("step_size_bound: no eigenvalue with positive real part");
  return bound;
}

namespace detail {

/// True when every node of the adjacency (a(i, j) != 0 means j -> i) reaches every other.
inline bool strongly_connected(const Eigen::MatrixXd& adj) {
  const Eigen::Index n = adj.rows();
  if (n <= 1) return true;
  auto reach = [&](bool forward) {
    std::vector<char> seen(static_cast<std::size_t>(n), 0);
    std::vector<Eigen::Index> stack{0};
    seen[0] = 1;
    while (!stack.empty()) {
      const Eigen::Index u = stack.back();
      stack.pop_back();
      for (Eigen::Index v = 0; v < n; ++v) {
        const double e = forward ? adj(v, u) : adj(u, v);
        if (e != 0.0 && !seen[static_cast<std::size_t>(v)]) {
          seen[static_cast<std::size_t>(v)] = 1;
          stack.push_back(v);
        }
      }
    }
    return std::all_of(seen.begin(), seen.end(), [](char c) { return c != 0; });
  };
  return reach(true) && reach(false);
}

}  // namespace detail

/// Builds L1, L2 and the consensus weights A1, A2 for the graph's leader/follower split.
inline ConsensusNetwork build_weights(const Digraph& graph, double alpha) {
  if (!(alpha > 0.0) || !std::isfinite(alpha)) throw StepSizeError("build_weights: alpha must be positive");
  const std::size_t n = graph.node_count;
  std::set<std::size_t> leader_set;
  for (std::size_t l : graph.leaders) {
    if (l >= n) throw TopologyError("build_weights: leader index " + std::to_string(l) + " out of range");
    if (!leader_set.insert(l).second) throw TopologyError("build_weights: duplicate leader " + std::to_string(l));
  }
  if (leader_set.empty()) throw TopologyError("build_weights: at least one leader is required");
  if (leader_set.size() >= n) throw TopologyError("build_weights: at least one follower is required");

  ConsensusNetwork net;
  net.n_total = n;
  net.alpha = alpha;
  net.leaders.assign(leader_set.begin(), leader_set.end());
  std::vector<long> pos(n, -1);
  std::vector<long> leader_pos(n, -1);
  for (std::size_t i = 0; i < n; ++i) {
    if (!leader_set.count(i)) {
      pos[i] = static_cast<long>(net.followers.size());
      net.followers.push_back(i);
    }
  }
  for (std::size_t l = 0; l < net.leaders.size(); ++l) leader_pos[net.leaders[l]] = static_cast<long>(l);

  const auto nf = static_cast<Eigen::Index>(net.followers.size());
  const auto nl = static_cast<Eigen::Index>(net.leaders.size());
  Eigen::MatrixXd adj = Eigen::MatrixXd::Zero(nf, nf);
  net.l2 = Eigen::MatrixXd::Zero(nf, nl);
  for (const auto& [src, dst] : graph.edges) {
    if (src >= n || dst >= n) throw TopologyError("build_weights: edge endpoint out of range");
    if (src == dst || pos[dst] < 0) continue;  // self loops and edges into leaders carry nothing
    if (pos[src] >= 0) {
      adj(pos[dst], pos[src]) = 1.0;
    } else {
      net.l2(pos[dst], leader_pos[src]) = -1.0;
    }
  }

  for (Eigen::Index l = 0; l < nl; ++l) {
    if (net.l2.col(l).cwiseAbs().sum() == 0.0) {
      throw TopologyError("build_weights: leader " + std::to_string(net.leaders[static_cast<std::size_t>(l)]) +
                          " has no follower out-neighbour");
    }
  }
  if (!detail::strongly_connected(adj)) {
    throw TopologyError("build_weights: follower subgraph is not strongly connected; some follower cannot "
                        "receive every leader's contribution");
  }

  net.l1 = -adj;
  net.l1.diagonal() = adj.colwise().sum().transpose();
  if (nf > 1) {
    const double bound = step_size_bound(net.l1);
    if (alpha >= bound) {
      throw StepSizeError("build_weights: alpha " + std::to_string(alpha) + " is not below the bound " +
                          std::to_string(bound));
    }
  }
  net.a1 = Eigen::MatrixXd::Identity(nf, nf) - alpha * net.l1;
  net.nonnegative = net.a1.minCoeff() >= 0.0;
  if (nf > 1) {
    Eigen::VectorXd mags = net.a1.eigenvalues().cwiseAbs();
    Eigen::Index unit = 0;
    (mags.array() - 1.0).abs().minCoeff(&unit);
    mags[unit] = 0.0;
    net.contraction = mags.maxCoeff();
  }
  net.a2 = -alpha * net.l2;
  for (Eigen::Index l = 0; l < nl; ++l) net.a2.col(l) /= net.a2.col(l).sum();
  return net;
}

/// Sum/weight state of every follower; k parallel scalar problems share the weight vector.
struct PushSumState {
  Eigen::MatrixXd s;     ///< followers x k
  Eigen::VectorXd w;     ///< followers
  Eigen::MatrixXd beta;  ///< s / w; NaN rows while a follower holds no weight yet
  int round = 0;
  bool informed = false;  ///< every follower holds positive weight

  void refresh_ratio() {
    beta.resize(s.rows(), s.cols());
    informed = true;
    for (Eigen::Index i = 0; i < s.rows(); ++i) {
      if (w[i] > 0.0) {
        beta.row(i) = s.row(i) / w[i];
      } else {
        beta.row(i).setConstant(std::numeric_limits<double>::quiet_NaN());
        informed = false;
      }
    }
  }
};

/// Round 0: leaders push their values and unit weights into the followers through A2.
inline PushSumState push_sum_init(const ConsensusNetwork& net, const Eigen::MatrixXd& leader_values) {
  if (leader_values.rows() != static_cast<Eigen::Index>(net.leader_count())) {
    throw ParameterError("push_sum_init: one row of leader values per leader is required");
  }
  PushSumState st;
  st.s = net.a2 * leader_values;
  st.w = net.a2 * Eigen::VectorXd::Ones(static_cast<Eigen::Index>(net.leader_count()));
  st.round = 0;
  st.refresh_ratio();
  return st;
}

/// One synchronous mixing round s <- A1 s, w <- A1 w.
inline PushSumState lfac_round(const PushSumState& state, const ConsensusNetwork& net) {
  PushSumState next;
  next.s = net.a1 * state.s;
  next.w = net.a1 * state.w;
  next.round = state.round + 1;
  if (!next.w.allFinite() || !next.s.allFinite()) throw ProtocolError("lfac_round: non-finite push-sum state");
  // With negative entries in A1 (alpha above 1 / max out-degree) weights may dip transiently;
  // ratios are undefined for those rounds and the stop rule waits.
  if (net.nonnegative && state.informed && (next.w.array() <= 0.0).any()) {
    throw ProtocolError("lfac_round: follower weight became non-positive at round " + std::to_string(next.round));
  }
  if (net.nonnegative && (next.w.array() < 0.0).any()) {
    throw ProtocolError("lfac_round: negative follower weight at round " + std::to_string(next.round));
  }
  next.refresh_ratio();
  return next;
}

struct LfacResult {
  Eigen::MatrixXd beta;  ///< followers x k
  int rounds = 0;
  bool converged = false;
  std::string failure;  ///< empty unless a protocol error stopped the run
  PushSumState final_state;
};

using LfacObserver = std::function<void(const PushSumState&)>;

inline int default_max_rounds(std::size_t node_count) {
  return static_cast<int>(10 * node_count * node_count);
}

/// Remaining-error multiplier of the stop rule: with geometric decay at rate rho a change d in
/// the last round means the iterate is within about d / (1 - rho) of its limit.
inline double tail_factor(const ConsensusNetwork& net) {
  const double rho = net.contraction;
  if (!(rho < 1.0)) return std::numeric_limits<double>::infinity();
  return 1.0 / (1.0 - rho);
}

/// Mixes from `start` until the per-round change of every follower/component, scaled by
/// tail_factor (or by the observed contraction when slower), is at most gamma, or max_rounds is reached.
inline LfacResult run_push_sum(const ConsensusNetwork& net, PushSumState start, double gamma, int max_rounds,
                               const LfacObserver& observer = {}) {
  if (!(gamma > 0.0)) throw ParameterError("run_lfac: gamma must be positive");
  LfacResult res;
  PushSumState st = std::move(start);
  const int first_round = st.round;
  const double tail = tail_factor(net);
  if (observer) observer(st);
  try {
    // Two consecutive quiet rounds: a single small change can be a zero crossing of an
    // oscillating mode. A non-normal A1 can shrink slower than its spectral radius for a
    // while, so the observed ratio of successive changes is used when it is the larger.
    int quiet = 0;
    double last = std::numeric_limits<double>::quiet_NaN();
    while (st.round - first_round < max_rounds) {
      PushSumState next = lfac_round(st, net);
      if (observer) observer(next);
      bool small = false;
      if (st.informed && next.informed) {
        const double delta = (next.beta - st.beta).cwiseAbs().maxCoeff();
        // Changes at rounding level carry no rate information.
        const double floor =
            64.0 * std::numeric_limits<double>::epsilon() * std::max(1.0, next.beta.cwiseAbs().maxCoeff());
        double factor = tail;
        if (delta <= floor) {
          factor = 1.0;
        } else if (tail > 1.0 && last > floor) {
          const double rate = delta / last;
          factor = rate < 1.0 ? std::max(tail, 1.0 / (1.0 - rate)) : std::numeric_limits<double>::infinity();
        }
        small = delta * factor <= gamma;
        last = delta;
      }
      quiet = small ? quiet + 1 : 0;
      st = std::move(next);
      if (quiet >= 2 || (small && tail == 1.0)) {
        res.converged = true;
        break;
      }
    }
  } catch (const ProtocolError& e) {
    res.failure = e.what();
  }
  res.beta = st.beta;
  res.rounds = st.round - first_round;
  res.final_state = std::move(st);
  return res;
}

/// Leader-follower average consensus from a fresh injection of the leader values.
inline LfacResult run_lfac(const ConsensusNetwork& net, const Eigen::MatrixXd& leader_values, double gamma,
                           int max_rounds, const LfacObserver& observer = {}) {
  return run_push_sum(net, push_sum_init(net, leader_values), gamma, max_rounds, observer);
}

/// Restarts from a previous final state after the leaders changed their values from
/// `previous_values` to `leader_values`: only the difference is injected, so the conserved
/// totals match the new values while the ratios start near the previous average.
inline PushSumState warm_start_state(const ConsensusNetwork& net, const PushSumState& previous_final,
                                     const Eigen::MatrixXd& previous_values, const Eigen::MatrixXd& leader_values) {
  if (previous_values.rows() != leader_values.rows() || previous_values.cols() != leader_values.cols() ||
      previous_final.s.cols() != leader_values.cols()) {
    throw ParameterError("warm_start_state: shape mismatch");
  }
  PushSumState st = previous_final;
  st.s += net.a2 * (leader_values - previous_values);
  st.round = 0;
  st.refresh_ratio();
  return st;
}

/// Topology presets over n nodes (undirected, stored as both directions).
inline Digraph topology_preset(const std::string& name, std::size_t n) {
  if (n < 2) throw ParameterError("topology_preset: at least two nodes are required");
  Digraph g;
  g.node_count = n;
  if (name == "complete") {
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = i + 1; j < n; ++j) g.add_undirected(i, j);
  } else if (name == "ring") {
    for (std::size_t i = 0; i < n; ++i) g.add_undirected(i, (i + 1) % n);
  } else if (name == "ring_chords") {
    std::set<std::pair<std::size_t, std::size_t>> seen;
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t hop : {std::size_t{1}, std::size_t{2}}) {
        std::size_t j = (i + hop) % n;
        auto key = std::minmax(i, j);
        if (i != j && seen.insert(key).second) g.add_undirected(i, j);
      }
    }
  } else {
    throw LookupError("unknown topology preset '" + name + "' (known: complete, ring, ring_chords)");
  }
  return g;
}

/// Sensor network in which every node is both a leader (injecting its own value) and a
/// follower: leader copy n + i feeds follower i, followers mix over the sensor graph.
inline Digraph self_led(const Digraph& sensors) {
  if (!sensors.leaders.empty()) throw TopologyError("self_led: sensor graph must not declare leaders");
  Digraph g;
  const std::size_t n = sensors.node_count;
  g.node_count = 2 * n;
  g.edges = sensors.edges;
  for (std::size_t i = 0; i < n; ++i) {
    g.edges.emplace_back(n + i, i);
    g.leaders.push_back(n + i);
  }
  return g;
}

}  // namespace ameef
