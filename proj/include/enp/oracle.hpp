#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <stdexcept>
#include <string>
#include <tuple>
#include <utility>
#include <vector>

#include "enp/env.hpp"
#include "enp/policy.hpp"
#include "enp/tensor.hpp"

namespace enp {

// Exact tabular machinery on small enumerable instances: occupancy measures,
// forward/reverse KL, the policy <-> occupancy bijection, and the lift of the
// neural policy onto enumerable instances.

struct TabularMdp {
  int n_states = 0;
  int n_actions = 0;
  int horizon = 0;
  std::vector<int> next;      // n_states * n_actions, deterministic
  std::vector<double> rho0;   // initial state distribution

  int tr(int s, int a) const { return next[s * n_actions + a]; }
  int& tr(int s, int a) { return next[s * n_actions + a]; }

  void validate() const {
    if (static_cast<int>(next.size()) != n_states * n_actions)
      throw std::invalid_argument("TabularMdp: transition table not total");
    for (int v : next)
      if (v < 0 || v >= n_states) throw std::invalid_argument("TabularMdp: bad transition target");
    double s = 0.0;
    for (double p : rho0) s += p;
    if (std::abs(s - 1.0) > 1e-12)
      throw std::invalid_argument("TabularMdp: rho0 must sum to 1");
  }
};

struct OccupancyTable {
  int n_states = 0;
  int n_actions = 0;
  bool normalized = false;
  std::vector<double> v;

  OccupancyTable() = default;
  OccupancyTable(int s, int a) : n_states(s), n_actions(a), v(static_cast<std::size_t>(s) * a) {}
  double& at(int s, int a) { return v[s * n_actions + a]; }
  double at(int s, int a) const { return v[s * n_actions + a]; }
  double total() const {
    double t = 0.0;
    for (double x : v) t += x;
    return t;
  }
};

using TabularPolicy = std::vector<std::vector<double>>;  // [state][action]

// Forward dynamic program: d_0 = rho0, d_{t+1}(s') = sum_{s,a} d_t(s) pi(a|s)
// [T(s,a) = s']; rho(s,a) = sum_t d_t(s) pi(a|s). Normalized form divides by
// the horizon.
inline OccupancyTable occupancy(const TabularMdp& mdp, const TabularPolicy& policy,
                                bool normalize = true) {
  mdp.validate();
  if (static_cast<int>(policy.size()) != mdp.n_states)
    throw std::invalid_argument("occupancy: policy must cover every state");
  for (const auto& row : policy) {
    if (static_cast<int>(row.size()) != mdp.n_actions)
      throw std::invalid_argument("occupancy: policy row has wrong arity");
    double s = 0.0;
    for (double p : row) {
      if (p < 0.0) throw std::invalid_argument("occupancy: negative action probability");
      s += p;
    }
    if (std::abs(s - 1.0) > 1e-12)
      throw std::invalid_argument("occupancy: policy row does not sum to 1");
  }
  OccupancyTable table(mdp.n_states, mdp.n_actions);
  std::vector<double> d = mdp.rho0;
  std::vector<double> d_next(mdp.n_states);
  for (int t = 0; t < mdp.horizon; ++t) {
    std::fill(d_next.begin(), d_next.end(), 0.0);
    for (int s = 0; s < mdp.n_states; ++s) {
      if (d[s] == 0.0) continue;
      for (int a = 0; a < mdp.n_actions; ++a) {
        double mass = d[s] * policy[s][a];
        table.at(s, a) += mass;
        d_next[mdp.tr(s, a)] += mass;
      }
    }
    d.swap(d_next);
  }
  if (normalize) {
    for (double& x : table.v) x /= mdp.horizon;
    table.normalized = true;
  }
  return table;
}

struct RecoveredPolicy {
  TabularPolicy policy;
  std::vector<bool> visited;  // false rows were filled in as uniform
};

// pi(a|s) = rho(s,a) / sum_a' rho(s,a'); unvisited states get uniform rows.
inline RecoveredPolicy recover_policy(const OccupancyTable& table) {
  RecoveredPolicy out;
  out.policy.assign(table.n_states, std::vector<double>(table.n_actions, 0.0));
  out.visited.assign(table.n_states, false);
  for (int s = 0; s < table.n_states; ++s) {
    double z = 0.0;
    for (int a = 0; a < table.n_actions; ++a) z += table.at(s, a);
    if (z > 0.0) {
      out.visited[s] = true;
      for (int a = 0; a < table.n_actions; ++a) out.policy[s][a] = table.at(s, a) / z;
    } else {
      for (int a = 0; a < table.n_actions; ++a)
        out.policy[s][a] = 1.0 / static_cast<double>(table.n_actions);
    }
  }
  return out;
}

constexpr double kKlSmoothEps = 1e-8;

namespace detail {

inline void check_kl_args(const OccupancyTable& a, const OccupancyTable& b) {
  if (a.n_states != b.n_states || a.n_actions != b.n_actions)
    throw std::invalid_argument("kl: tables have different shapes");
  if (!a.normalized || !b.normalized)
    throw std::invalid_argument("kl: tables must be normalized");
}

inline std::vector<double> smoothed(const OccupancyTable& t, double eps) {
  std::vector<double> out(t.v.size());
  double z = 0.0;
  for (std::size_t i = 0; i < t.v.size(); ++i) z += out[i] = t.v[i] + eps;
  for (double& x : out) x /= z;
  return out;
}

}  // namespace detail

// D_KL(expert || learner), mode-covering direction. 0 log 0 = 0. Without
// smoothing a support gap yields +inf.
inline double forward_kl(const OccupancyTable& expert, const OccupancyTable& learner,
                         bool smooth = true, double eps = kKlSmoothEps) {
  detail::check_kl_args(expert, learner);
  std::vector<double> q =
      smooth ? detail::smoothed(learner, eps) : std::vector<double>(learner.v);
  double kl = 0.0;
  for (std::size_t i = 0; i < expert.v.size(); ++i) {
    double p = expert.v[i];
    if (p == 0.0) continue;
    if (q[i] == 0.0) return std::numeric_limits<double>::infinity();
    kl += p * std::log(p / q[i]);
  }
  return kl;
}

struct ReverseKlResult {
  double kl = 0.0;
  double cross = 0.0;    // -E_{learner}[log expert]
  double entropy = 0.0;  // H(learner)
};

// D_KL(learner || expert) = -E_{learner}[log expert] - H(learner).
inline ReverseKlResult reverse_kl(const OccupancyTable& learner, const OccupancyTable& expert,
                                  bool smooth = true, double eps = kKlSmoothEps) {
  detail::check_kl_args(learner, expert);
  std::vector<double> q =
      smooth ? detail::smoothed(expert, eps) : std::vector<double>(expert.v);
  ReverseKlResult out;
  for (std::size_t i = 0; i < learner.v.size(); ++i) {
    double p = learner.v[i];
    if (p == 0.0) continue;
    if (q[i] == 0.0) {
      out.kl = out.cross = std::numeric_limits<double>::infinity();
      continue;
    }
    out.cross -= p * std::log(q[i]);
    out.entropy -= p * std::log(p);
  }
  if (std::isfinite(out.cross)) out.kl = out.cross - out.entropy;
  return out;
}

inline double occupancy_entropy(const OccupancyTable& t) {
  double h = 0.0;
  for (double p : t.v)
    if (p > 0.0) h -= p * std::log(p);
  return h;
}

// ---------------------------------------------------------------------------
// History-tree instances
//
// Finite-horizon occupancy of a history-dependent policy is only Markov if
// states carry their full history. On a deterministic layout the observation
// history is the cell path, so enumerable states form a tree: one node per
// distinct observation-history, annotated with (cell, heading, step-phase).
// Actions that bounce off walls merge into a single no-op child (their
// observation histories coincide). STOP leads to a shared absorbing terminal
// state where both expert and lifted policies are pinned to STOP.

struct OracleInstance {
  struct TreeNode {
    Cell cell;
    int heading = kUp;
    int t = 0;
    int parent = -1;
  };

  Layout layout;
  EnvConfig env_cfg;
  Instruction instruction;
  Cell start;
  int horizon = 0;
  std::vector<TreeNode> nodes;  // node 0 = root, parents precede children
  TabularMdp mdp;               // states = nodes + terminal

  int terminal_state() const { return static_cast<int>(nodes.size()); }
};

inline OracleInstance build_oracle_instance(const Layout& layout, const EnvConfig& env_cfg,
                                            const Instruction& instruction, Cell start,
                                            int horizon,
                                            bool require_unique_cell_phase = false) {
  if (horizon < 1) throw std::invalid_argument("oracle instance: horizon must be >= 1");
  if (layout.blocked(start)) throw std::invalid_argument("oracle instance: start blocked");
  OracleInstance inst;
  inst.layout = layout;
  inst.env_cfg = env_cfg;
  inst.instruction = instruction;
  inst.start = start;
  inst.horizon = horizon;
  inst.nodes.push_back({start, kUp, 0, -1});

  std::size_t frontier_lo = 0;
  for (int t = 0; t + 1 < horizon; ++t) {
    std::size_t frontier_hi = inst.nodes.size();
    for (std::size_t n = frontier_lo; n < frontier_hi; ++n) {
      // group actions by resulting (cell, heading); bounced moves share a child
      std::map<std::pair<int, int>, int> by_result;  // (cell idx, heading) -> node
      for (int a = 0; a < kNumMoves; ++a) {
        Cell next = move_cell(inst.nodes[n].cell, a);
        Cell dest = inst.nodes[n].cell;
        int heading = inst.nodes[n].heading;
        if (!layout.blocked(next)) {
          dest = next;
          heading = a;
        }
        auto key = std::make_pair(dest.r * layout.width + dest.c, heading);
        if (by_result.find(key) == by_result.end()) {
          by_result[key] = static_cast<int>(inst.nodes.size());
          inst.nodes.push_back({dest, heading, t + 1, static_cast<int>(n)});
        }
      }
    }
    frontier_lo = frontier_hi;
  }

  if (require_unique_cell_phase) {
    std::map<std::pair<int, int>, int> seen;  // (cell idx, t) -> node
    for (std::size_t n = 0; n < inst.nodes.size(); ++n) {
      auto key = std::make_pair(inst.nodes[n].cell.r * layout.width + inst.nodes[n].cell.c,
                                inst.nodes[n].t);
      auto [it, fresh] = seen.emplace(key, static_cast<int>(n));
      if (!fresh)
        throw std::runtime_error(
            "oracle instance: state (cell " + std::to_string(key.first) + ", t " +
            std::to_string(inst.nodes[n].t) + ") is reached by more than one history prefix");
    }
  }

  // transitions, recomputed from the node annotations
  const int n_states = static_cast<int>(inst.nodes.size()) + 1;
  const int terminal = n_states - 1;
  inst.mdp.n_states = n_states;
  inst.mdp.n_actions = kNumActions;
  inst.mdp.horizon = horizon;
  inst.mdp.next.assign(static_cast<std::size_t>(n_states) * kNumActions, terminal);
  inst.mdp.rho0.assign(n_states, 0.0);
  inst.mdp.rho0[0] = 1.0;

  // child lookup: scan nodes once, index by (parent, cell, heading)
  std::map<std::tuple<int, int, int>, int> child_of;
  for (std::size_t n = 1; n < inst.nodes.size(); ++n)
    child_of[{inst.nodes[n].parent, inst.nodes[n].cell.r * layout.width + inst.nodes[n].cell.c,
              inst.nodes[n].heading}] = static_cast<int>(n);
  for (std::size_t n = 0; n < inst.nodes.size(); ++n) {
    if (inst.nodes[n].t + 1 >= horizon) continue;  // deepest decisions fall through to terminal
    for (int a = 0; a < kNumMoves; ++a) {
      Cell next = move_cell(inst.nodes[n].cell, a);
      Cell dest = inst.nodes[n].cell;
      int heading = inst.nodes[n].heading;
      if (!layout.blocked(next)) {
        dest = next;
        heading = a;
      }
      inst.mdp.tr(static_cast<int>(n), a) =
          child_of.at({static_cast<int>(n), dest.r * layout.width + dest.c, heading});
    }
    // STOP already points at terminal
  }
  return inst;
}

inline TabularPolicy expert_tabular_policy(const OracleInstance& inst) {
  TabularPolicy pi(inst.mdp.n_states, std::vector<double>(kNumActions, 0.0));
  for (std::size_t n = 0; n < inst.nodes.size(); ++n)
    pi[n][expert_action(inst.layout, inst.nodes[n].cell, inst.instruction.goal)] = 1.0;
  pi[inst.terminal_state()][kStop] = 1.0;
  return pi;
}

// Evaluates the model's softmax action distribution at every tree node by
// running the encoder along the node's (unique) history prefix.
inline TabularPolicy lift_policy(const PolicyModel& model, const OracleInstance& inst) {
  PolicyGraph g = PolicyGraph::from_model(model);
  TabularPolicy pi(inst.mdp.n_states, std::vector<double>(kNumActions, 0.0));
  std::vector<NodePtr> history(inst.nodes.size());
  for (std::size_t n = 0; n < inst.nodes.size(); ++n) {
    const auto& node = inst.nodes[n];
    NodePtr h_prev = node.parent < 0 ? leaf(Tensor(1, model.dims.D))
                                     : history[static_cast<std::size_t>(node.parent)];
    Observation obs = make_observation(inst.layout, node.cell, node.heading, inst.env_cfg);
    auto [s, h_next] = encode_state_node(g, inst.instruction.tokens, obs.features, h_prev);
    history[n] = h_next;
    pi[n] = softmax_values(action_logits_node(g, s)->value.data);
  }
  pi[inst.terminal_state()][kStop] = 1.0;
  return pi;
}

// ---------------------------------------------------------------------------
// Bimodal expert family
//
// A one-junction MDP: from s0 one of n_goals branch actions leads to an
// absorbing goal state. The expert splits its mass over two far-apart goals;
// a discretized-Gaussian learner family over branch choices then shows the
// mode-covering (forward KL) vs mode-seeking (reverse KL) split.

struct BimodalFamily {
  TabularMdp mdp;
  OccupancyTable expert_occ;
  int n_goals = 0;
  int mode_lo = 0;
  int mode_hi = 0;

  TabularPolicy learner(double mu, double sigma) const {
    TabularPolicy pi(mdp.n_states, std::vector<double>(mdp.n_actions, 0.0));
    double z = 0.0;
    for (int i = 0; i < n_goals; ++i)
      z += pi[0][i] = std::exp(-0.5 * (i - mu) * (i - mu) / (sigma * sigma));
    for (int i = 0; i < n_goals; ++i) pi[0][i] /= z;
    for (int s = 1; s < mdp.n_states; ++s) pi[s][0] = 1.0;
    return pi;
  }
};

inline BimodalFamily make_bimodal_family(int n_goals = 9, int mode_offset = 3) {
  BimodalFamily fam;
  fam.n_goals = n_goals;
  int center = (n_goals - 1) / 2;
  fam.mode_lo = center - mode_offset;
  fam.mode_hi = center + mode_offset;
  fam.mdp.n_states = n_goals + 1;  // s0 + goals
  fam.mdp.n_actions = n_goals;
  fam.mdp.horizon = 2;
  fam.mdp.next.assign(static_cast<std::size_t>(fam.mdp.n_states) * n_goals, 0);
  for (int a = 0; a < n_goals; ++a) fam.mdp.tr(0, a) = 1 + a;
  for (int s = 1; s <= n_goals; ++s)
    for (int a = 0; a < n_goals; ++a) fam.mdp.tr(s, a) = s;
  fam.mdp.rho0.assign(fam.mdp.n_states, 0.0);
  fam.mdp.rho0[0] = 1.0;

  TabularPolicy expert(fam.mdp.n_states, std::vector<double>(n_goals, 0.0));
  expert[0][fam.mode_lo] = 0.5;
  expert[0][fam.mode_hi] = 0.5;
  for (int s = 1; s <= n_goals; ++s) expert[s][0] = 1.0;
  fam.expert_occ = occupancy(fam.mdp, expert, true);
  return fam;
}

}  // namespace enp
