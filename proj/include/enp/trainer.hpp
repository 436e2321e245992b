#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "enp/autodiff.hpp"
#include "enp/ebm.hpp"
#include "enp/env.hpp"
#include "enp/metrics.hpp"
#include "enp/oracle.hpp"
#include "enp/policy.hpp"
#include "enp/rng.hpp"

namespace enp {

// End-to-end training: dataset aggregation, per-step loss assembly
// L_rho = L_pi + L_S, parameter updates; BC / DAgger / ENP and the tabular
// reverse-KL baseline under one harness.

enum class Method { BC, DAGGER, ENP, AIRL_TAB };

inline const char* method_name(Method m) {
  switch (m) {
    case Method::BC: return "bc";
    case Method::DAGGER: return "dagger";
    case Method::ENP: return "enp";
    case Method::AIRL_TAB: return "airl-tab";
  }
  return "?";
}

inline Method parse_method(const std::string& s) {
  if (s == "bc") return Method::BC;
  if (s == "dagger") return Method::DAGGER;
  if (s == "enp") return Method::ENP;
  if (s == "airl-tab") return Method::AIRL_TAB;
  throw std::invalid_argument("unknown method '" + s + "' (bc|dagger|enp|airl-tab)");
}

struct TrainConfig {
  Method method = Method::BC;
  int epochs = 30;
  int batch_size = 8;
  double lr = 0.2;
  double beta = 0.5;      // probability of drawing a batch slot from D+
  double lambda_s = 1.0;  // weight of L_S (ablation only; the paper sums unweighted)
  std::uint64_t seed = 0;
  int aggregate_every = 1;     // epochs between D+ collection passes
  int aggregate_episodes = 40;
  double grad_clip = 10.0;
  int max_steps = 40;       // rollout cap for aggregation and evaluation
  int state_dim = 32;
  int emb_dim = 16;
  int proj_dim = 16;
  int pretrain_epochs = 0;  // epochs run with sgld_iters_pretrain
  int sgld_iters_pretrain = 20;
  int memory_capacity = 100;
  double memory_reinit_prob = 0.05;
  // tabular-instance runs (oracle diagnostics and the AIRL-TAB baseline)
  bool tabular = false;
  std::uint64_t tab_layout_seed = 7;
  int tab_horizon = 6;
  int tab_goal_token = -1;  // -1: lowest landmark token of the layout

  void validate() const {
    if (epochs < 0) throw std::invalid_argument("train: epochs must be >= 0");
    if (batch_size < 1) throw std::invalid_argument("train: batch size must be >= 1");
    if (lr <= 0.0) throw std::invalid_argument("train: learning rate must be > 0");
    if (beta < 0.0 || beta > 1.0) throw std::invalid_argument("train: beta must be in [0,1]");
    if (lambda_s < 0.0 || lambda_s > 10.0)
      throw std::invalid_argument("train: lambda_s must be in [0,10]");
    if (aggregate_every < 1) throw std::invalid_argument("train: aggregate_every must be >= 1");
    if (method == Method::AIRL_TAB && !tabular)
      throw std::invalid_argument("train: airl-tab requires a tabular instance config");
  }
};

struct SplitEval {
  double sr = 0.0, spl = 0.0, ne = 0.0, ndtw = 0.0;
  int episodes = 0;
};

struct EpochRecord {
  int epoch = 0;
  double l_pi = 0.0;
  double l_s = 0.0;
  SplitEval val_seen;
  SplitEval val_unseen;
  bool has_kl = false;
  double forward_kl = 0.0;
  std::uint64_t sgld_aborts = 0;
};

struct RunLog {
  std::vector<EpochRecord> records;
};

// ---------------------------------------------------------------------------
// Losses

// Sum over trajectory steps of -log P(a_t | s_t), encoder unrolled along the
// recorded observations.
inline NodePtr bc_loss_node(const PolicyGraph& g, const Trajectory& traj) {
  if (traj.steps.empty()) throw std::invalid_argument("bc_loss: empty trajectory");
  NodePtr h = leaf(Tensor(1, g.dims.D));
  NodePtr total;
  for (const auto& step : traj.steps) {
    auto [s, h_next] = encode_state_node(g, traj.instruction.tokens, step.obs.features, h);
    h = h_next;
    NodePtr lg = action_logits_node(g, s);
    NodePtr ce = sub(logsumexp(lg), index_select(lg, {static_cast<std::size_t>(step.action)}));
    total = total ? add(total, ce) : ce;
  }
  return total;
}

inline double bc_loss(const PolicyModel& model, const Trajectory& traj) {
  PolicyGraph g = PolicyGraph::from_model(model);
  return bc_loss_node(g, traj)->value.data[0];
}

// ---------------------------------------------------------------------------
// Acting

// Greedy argmax with ties to the lowest action id.
inline int argmax_action(const std::vector<double>& logits) {
  int best = 0;
  for (int k = 1; k < static_cast<int>(logits.size()); ++k)
    if (logits[k] > logits[best]) best = k;
  return best;
}

// Stateful per-episode wrapper: encodes steps value-level and carries H_t.
struct PolicyRunner {
  const PolicyModel* model;
  std::vector<int> tokens;
  HistoryState history;
  int step = 0;

  PolicyRunner(const PolicyModel& m, const Instruction& ins)
      : model(&m), tokens(ins.tokens), history(HistoryState::initial(m.dims.D)) {}

  std::vector<double> step_logits(const Observation& obs) {
    auto [s, h] = encode_state(*model, tokens, obs, history, step++);
    history = h;
    return action_logits(*model, s);
  }
  int greedy(const Observation& obs) { return argmax_action(step_logits(obs)); }
  int sample(const Observation& obs, RngStream& rng) {
    std::vector<double> p = softmax_values(step_logits(obs));
    double u = rng.uniform();
    double acc = 0.0;
    for (int k = 0; k < static_cast<int>(p.size()); ++k) {
      acc += p[k];
      if (u < acc) return k;
    }
    return static_cast<int>(p.size()) - 1;
  }
};

inline std::pair<int, HistoryState> predict_action(const PolicyModel& model,
                                                   const Instruction& instruction,
                                                   const Observation& obs,
                                                   const HistoryState& history) {
  auto [s, h] = encode_state(model, instruction.tokens, obs, history);
  return {argmax_action(action_logits(model, s)), h};
}

// ---------------------------------------------------------------------------
// Aggregation (Algorithm line: visited states by the learner, actions by the
// expert)

// Roll out `sampler`, then relabel every visited state with the expert move.
inline Trajectory aggregate_episode(const Layout& layout, const Instruction& instruction,
                                    const PolicyCallback& sampler, int max_steps,
                                    const EnvConfig& cfg, Cell start) {
  Trajectory traj = rollout(layout, instruction, sampler, max_steps, cfg, start);
  for (auto& step : traj.steps)
    step.action = expert_action(layout, step.cell, instruction.goal);
  return traj;
}

inline std::vector<Trajectory> aggregate(const PolicyModel& model,
                                         const std::vector<Layout>& layouts,
                                         const EnvConfig& cfg, int episodes, int max_steps,
                                         RngStream& env_rng) {
  std::vector<Trajectory> out;
  out.reserve(episodes);
  for (int e = 0; e < episodes; ++e) {
    const Layout& layout = layouts[env_rng.index(layouts.size())];
    Instruction ins = sample_instruction(layout, cfg, env_rng);
    auto cells = free_cells(layout);
    Cell start = cells[env_rng.index(cells.size())];
    for (int tries = 0; start == ins.goal && tries < 64; ++tries)
      start = cells[env_rng.index(cells.size())];
    PolicyRunner runner(model, ins);
    auto sampler = [&](const Observation& obs) { return runner.sample(obs, env_rng); };
    out.push_back(aggregate_episode(layout, ins, sampler, max_steps, cfg, start));
  }
  return out;
}

// ---------------------------------------------------------------------------
// One optimizer step

struct StepOutcome {
  double l_pi = 0.0;
  double l_s = 0.0;
  std::uint64_t sgld_aborts = 0;
};

inline void apply_sgd(PolicyModel& model, const PolicyGraph& g, double lr, double grad_clip) {
  // leaves that never reached the loss keep an empty grad (zero gradient)
  double norm2 = 0.0;
  for (auto& [name, t] : model.params()) {
    const Tensor& grad = g.at(name)->grad;
    for (double v : grad.data) norm2 += v * v;
  }
  double scale = 1.0;
  if (grad_clip > 0.0) {
    double norm = std::sqrt(norm2);
    if (norm > grad_clip) scale = grad_clip / norm;
  }
  for (auto& [name, t] : model.params()) {
    const Tensor& grad = g.at(name)->grad;
    if (grad.size() != t->size()) continue;
    for (std::size_t i = 0; i < t->size(); ++i) t->data[i] -= lr * scale * grad.data[i];
  }
}

// Builds the joint loss over a batch of trajectories and applies one update.
// With use_marginal set, each step runs an SGLD chain seeded from the memory
// and adds the contrastive term; endpoints are stored at the end of the step.
inline StepOutcome train_step(PolicyModel& model, const std::vector<const Trajectory*>& batch,
                              MarginalStateMemory& memory, const SgldConfig& sgld,
                              double lambda_s, double lr, double grad_clip,
                              RngStream& sgld_rng, bool use_marginal) {
  PolicyGraph g = PolicyGraph::from_model(model);
  NodePtr l_pi_sum;
  NodePtr l_s_sum;
  int total_steps = 0;
  StepOutcome out;
  std::vector<Tensor> endpoints;
  const int K = model.dims.K, D = model.dims.D;
  for (const Trajectory* traj : batch) {
    if (traj->steps.empty()) continue;
    NodePtr h = leaf(Tensor(1, D));
    for (const auto& step : traj->steps) {
      auto [s, h_next] = encode_state_node(g, traj->instruction.tokens, step.obs.features, h);
      h = h_next;
      NodePtr lg = action_logits_node(g, s);
      NodePtr ce = sub(logsumexp(lg), index_select(lg, {static_cast<std::size_t>(step.action)}));
      l_pi_sum = l_pi_sum ? add(l_pi_sum, ce) : ce;
      if (use_marginal) {
        Tensor s0 = init_sample(memory, sgld_rng, K, D);
        SgldResult chain = sgld_chain(model, s0, sgld, sgld_rng);
        if (chain.aborted)
          ++out.sgld_aborts;
        else
          endpoints.push_back(chain.state);
        NodePtr ls = marginal_loss(g, s->value, chain.state);
        l_s_sum = l_s_sum ? add(l_s_sum, ls) : ls;
      }
      ++total_steps;
    }
  }
  if (total_steps == 0) return out;
  NodePtr l_pi = scalar_scale(l_pi_sum, 1.0 / total_steps);
  NodePtr root = l_pi;
  NodePtr l_s;
  if (use_marginal) {
    l_s = scalar_scale(l_s_sum, 1.0 / total_steps);
    root = add(l_pi, scalar_scale(l_s, lambda_s));
  }
  backward(root);
  apply_sgd(model, g, lr, grad_clip);
  for (const Tensor& e : endpoints) memory.store(e);
  out.l_pi = l_pi->value.data[0];
  out.l_s = use_marginal ? l_s->value.data[0] : 0.0;
  return out;
}

// ---------------------------------------------------------------------------
// Evaluation

struct EvalOutput {
  SplitEval summary;
  std::vector<EpisodeResult> episodes;
  AggregateMetrics aggregate;
};

inline EvalOutput evaluate_split(const PolicyModel& model, const Dataset& split,
                                 const EnvConfig& cfg, int max_steps, double d_th = 3.0,
                                 int bucket_width = 4) {
  EvalOutput out;
  if (split.trajectories.empty()) return out;
  std::map<std::uint64_t, Layout> layouts;
  for (const Trajectory& ref : split.trajectories) {
    auto it = layouts.find(ref.layout_seed);
    if (it == layouts.end())
      it = layouts.emplace(ref.layout_seed, generate_layout(ref.layout_seed, cfg)).first;
    const Layout& layout = it->second;
    PolicyRunner runner(model, ref.instruction);
    auto greedy = [&](const Observation& obs) { return runner.greedy(obs); };
    Trajectory rolled = rollout(layout, ref.instruction, greedy, max_steps, cfg, ref.start());
    auto dist = bfs_distances(layout, ref.instruction.goal);
    EpisodeResult res;
    res.path = rolled.path_cells();
    res.reference = ref.path_cells();
    res.goal = ref.instruction.goal;
    res.shortest_distance = dist[ref.start().r * layout.width + ref.start().c];
    res.final_goal_distance = dist[rolled.end.r * layout.width + rolled.end.c];
    res.min_visited_goal_distance = res.final_goal_distance;
    for (const Cell& p : res.path)
      res.min_visited_goal_distance =
          std::min(res.min_visited_goal_distance, dist[p.r * layout.width + p.c]);
    out.episodes.push_back(std::move(res));
  }
  out.aggregate = aggregate_metrics(out.episodes, d_th, bucket_width);
  out.summary = {out.aggregate.sr, out.aggregate.spl, out.aggregate.ne, out.aggregate.ndtw,
                 static_cast<int>(out.episodes.size())};
  return out;
}

// ---------------------------------------------------------------------------
// Tabular instances (diagnostic runs and AIRL-TAB)

// Deterministic instance: goal is a landmark cell, start the farthest free
// cell whose expert path (plus a STOP) fits inside the horizon.
inline OracleInstance tabular_instance_from_config(const TrainConfig& tc,
                                                   const EnvConfig& env_cfg) {
  Layout layout = generate_layout(tc.tab_layout_seed, env_cfg);
  int goal_token = tc.tab_goal_token;
  if (goal_token < 0) goal_token = layout.landmarks.begin()->first;
  if (layout.landmarks.find(goal_token) == layout.landmarks.end())
    throw std::invalid_argument("tabular instance: goal token has no landmark");
  Instruction ins;
  ins.tokens = {goal_token};
  ins.goal = layout.landmarks.at(goal_token);
  auto dist = bfs_distances(layout, ins.goal);
  Cell start = ins.goal;
  int best = -1;
  for (const Cell& p : free_cells(layout)) {
    int d = dist[p.r * layout.width + p.c];
    if (d > best && d + 1 <= tc.tab_horizon) {
      best = d;
      start = p;
    }
  }
  if (best < 1) throw std::invalid_argument("tabular instance: no usable start cell");
  return build_oracle_instance(layout, env_cfg, ins, start, tc.tab_horizon);
}

inline Dataset tabular_demo_dataset(const OracleInstance& inst) {
  Dataset d;
  d.trajectories.push_back(
      expert_rollout(inst.layout, inst.instruction, inst.horizon, inst.env_cfg, inst.start));
  return d;
}

inline double tabular_forward_kl(const PolicyModel& model, const OracleInstance& inst,
                                 const OccupancyTable& expert_occ) {
  TabularPolicy lifted = lift_policy(model, inst);
  OccupancyTable occ = occupancy(inst.mdp, lifted, true);
  return forward_kl(expert_occ, occ, true);
}

// Exact reverse KL D(rho_theta || rho_expert) as a graph scalar. Log-masses of
// all tree atoms (plus a logsumexp-pooled terminal atom) are concatenated; the
// self-normalized softmax then recovers the occupancy exactly. Actions that
// merge into the same no-op child have their reach masses pooled.
inline NodePtr reverse_kl_node(const PolicyGraph& g, const OracleInstance& inst,
                               const std::vector<double>& log_expert) {
  const double log_T = std::log(static_cast<double>(inst.mdp.horizon));
  std::vector<std::vector<NodePtr>> incoming(inst.nodes.size());
  std::vector<NodePtr> history(inst.nodes.size());
  std::vector<NodePtr> atoms;
  std::vector<double> refs;
  std::vector<NodePtr> terminal_atoms;
  const int terminal = inst.terminal_state();
  for (std::size_t n = 0; n < inst.nodes.size(); ++n) {
    const auto& node = inst.nodes[n];
    NodePtr h_prev = node.parent < 0 ? leaf(Tensor(1, g.dims.D))
                                     : history[static_cast<std::size_t>(node.parent)];
    Observation obs = make_observation(inst.layout, node.cell, node.heading, inst.env_cfg);
    auto [s, h_next] = encode_state_node(g, inst.instruction.tokens, obs.features, h_prev);
    history[n] = h_next;
    NodePtr lg = action_logits_node(g, s);
    NodePtr lse = logsumexp(lg);
    NodePtr log_p = node.parent < 0 ? leaf(Tensor::scalar(0.0))
                    : incoming[n].size() == 1 ? incoming[n][0]
                                              : logsumexp(concatenate(incoming[n], 0));
    for (int a = 0; a < kNumActions; ++a) {
      NodePtr log_pi = sub(index_select(lg, {static_cast<std::size_t>(a)}), lse);
      NodePtr log_mass = add(log_p, log_pi);
      atoms.push_back(add(log_mass, leaf(Tensor::scalar(-log_T))));
      refs.push_back(log_expert[n * kNumActions + a]);
      if (a == kStop) {
        int dwell = inst.mdp.horizon - 1 - node.t;
        if (dwell > 0)
          terminal_atoms.push_back(
              add(log_mass, leaf(Tensor::scalar(std::log(static_cast<double>(dwell)) - log_T))));
      } else if (node.t + 1 < inst.horizon) {
        int child = inst.mdp.tr(static_cast<int>(n), a);
        if (child != terminal) incoming[child].push_back(log_mass);
      }
    }
  }
  if (!terminal_atoms.empty()) {
    atoms.push_back(logsumexp(concatenate(terminal_atoms, 0)));
    refs.push_back(log_expert[terminal * kNumActions + kStop]);
  }
  NodePtr lvec = concatenate(atoms, 0);
  Tensor ref_t(refs.size(), 1);
  ref_t.data = refs;
  NodePtr diff = sub(lvec, leaf(ref_t));
  return sum(multiply(softmax(lvec), diff));
}

// ---------------------------------------------------------------------------
// Full training loop

struct TrainResult {
  PolicyModel model;
  RunLog log;
};

inline PolicyDims dims_from_config(const TrainConfig& tc, const EnvConfig& env_cfg) {
  PolicyDims dims;
  dims.K = kNumActions;
  dims.D = tc.state_dim;
  dims.D_obs = obs_dim(env_cfg);
  dims.D_emb = tc.emb_dim;
  dims.D_proj = tc.proj_dim;
  dims.vocab = env_cfg.vocab_size;
  return dims;
}

inline TrainResult train(const TrainConfig& tc, const SgldConfig& sgld_cfg,
                         const EnvConfig& env_cfg, const DatasetSplits& data) {
  tc.validate();
  sgld_cfg.validate();
  RngSet rngs = RngSet::from_seed(tc.seed);
  PolicyModel model = PolicyModel::init(dims_from_config(tc, env_cfg), rngs.init);
  RunLog log;

  std::optional<OracleInstance> instance;
  OccupancyTable expert_occ;
  if (tc.tabular) {
    instance = tabular_instance_from_config(tc, env_cfg);
    expert_occ = occupancy(instance->mdp, expert_tabular_policy(*instance), true);
  }

  // Tabular runs train and evaluate on the instance's own demonstration.
  DatasetSplits tab_data;
  const DatasetSplits* splits = &data;
  if (tc.tabular) {
    tab_data.train = tabular_demo_dataset(*instance);
    tab_data.val_seen = tab_data.train;
    tab_data.val_unseen = tab_data.train;
    splits = &tab_data;
  }

  if (tc.method == Method::AIRL_TAB) {
    // smoothed, renormalized expert reference (matches reverse_kl's smoothing)
    std::vector<double> log_expert(expert_occ.v.size());
    double z = 0.0;
    for (double v : expert_occ.v) z += v + kKlSmoothEps;
    for (std::size_t i = 0; i < expert_occ.v.size(); ++i)
      log_expert[i] = std::log(expert_occ.v[i] + kKlSmoothEps) - std::log(z);
    for (int epoch = 0; epoch < tc.epochs; ++epoch) {
      PolicyGraph g = PolicyGraph::from_model(model);
      NodePtr loss = reverse_kl_node(g, *instance, log_expert);
      backward(loss);
      apply_sgd(model, g, tc.lr, tc.grad_clip);
      EpochRecord rec;
      rec.epoch = epoch;
      rec.l_pi = loss->value.data[0];  // reverse-KL objective value
      rec.has_kl = true;
      rec.forward_kl = tabular_forward_kl(model, *instance, expert_occ);
      rec.val_seen = evaluate_split(model, splits->val_seen, env_cfg, tc.max_steps).summary;
      rec.val_unseen = rec.val_seen;
      log.records.push_back(rec);
    }
    return {model, log};
  }

  const Dataset& train_set = splits->train;
  std::vector<Trajectory> dplus;
  std::vector<Layout> train_layouts;
  if (tc.method == Method::DAGGER || tc.method == Method::ENP) {
    std::map<std::uint64_t, bool> seen;
    if (tc.tabular) {
      train_layouts.push_back(instance->layout);
    } else {
      for (const Trajectory& t : train_set.trajectories)
        if (!seen[t.layout_seed]) {
          seen[t.layout_seed] = true;
          train_layouts.push_back(generate_layout(t.layout_seed, env_cfg));
        }
    }
  }

  const bool aggregates =
      (tc.method == Method::DAGGER || tc.method == Method::ENP) && tc.beta > 0.0;
  MarginalStateMemory memory(static_cast<std::size_t>(tc.memory_capacity),
                             tc.memory_reinit_prob);
  for (int epoch = 0; epoch < tc.epochs; ++epoch) {
    if (aggregates && epoch % tc.aggregate_every == 0) {
      std::vector<Trajectory> fresh;
      if (tc.tabular) {
        for (int e = 0; e < tc.aggregate_episodes; ++e) {
          PolicyRunner runner(model, instance->instruction);
          auto sampler = [&](const Observation& obs) { return runner.sample(obs, rngs.env); };
          fresh.push_back(aggregate_episode(instance->layout, instance->instruction, sampler,
                                            tc.max_steps, env_cfg, instance->start));
        }
      } else {
        fresh = aggregate(model, train_layouts, env_cfg, tc.aggregate_episodes, tc.max_steps,
                          rngs.env);
      }
      for (auto& t : fresh) dplus.push_back(std::move(t));
    }

    std::vector<std::size_t> order(train_set.trajectories.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    rngs.shuffle.shuffle(order);

    const bool use_marginal = tc.method == Method::ENP && tc.lambda_s > 0.0;
    SgldConfig sgld = sgld_cfg;
    sgld.clamp = 1.0;  // chains live in the tanh state box
    if (epoch < tc.pretrain_epochs) sgld.iters = tc.sgld_iters_pretrain;

    double l_pi_acc = 0.0, l_s_acc = 0.0;
    std::uint64_t aborts = 0;
    int n_batches = 0;
    for (std::size_t lo = 0; lo < order.size(); lo += tc.batch_size) {
      std::vector<const Trajectory*> batch;
      std::size_t hi = std::min(order.size(), lo + tc.batch_size);
      for (std::size_t i = lo; i < hi; ++i) {
        const Trajectory* t = &train_set.trajectories[order[i]];
        if (aggregates && !dplus.empty() && rngs.shuffle.bernoulli(tc.beta))
          t = &dplus[rngs.shuffle.index(dplus.size())];
        batch.push_back(t);
      }
      StepOutcome oc = train_step(model, batch, memory, sgld, tc.lambda_s, tc.lr,
                                  tc.grad_clip, rngs.sgld, use_marginal);
      l_pi_acc += oc.l_pi;
      l_s_acc += oc.l_s;
      aborts += oc.sgld_aborts;
      ++n_batches;
    }

    EpochRecord rec;
    rec.epoch = epoch;
    rec.l_pi = n_batches ? l_pi_acc / n_batches : 0.0;
    rec.l_s = n_batches ? l_s_acc / n_batches : 0.0;
    rec.sgld_aborts = aborts;
    rec.val_seen = evaluate_split(model, splits->val_seen, env_cfg, tc.max_steps).summary;
    rec.val_unseen = evaluate_split(model, splits->val_unseen, env_cfg, tc.max_steps).summary;
    if (tc.tabular) {
      rec.has_kl = true;
      rec.forward_kl = tabular_forward_kl(model, *instance, expert_occ);
    }
    log.records.push_back(rec);
  }
  return {model, log};
}

}  // namespace enp
