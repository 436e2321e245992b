#pragma once

#include <cmath>
#include <map>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "enp/autodiff.hpp"
#include "enp/checkpoint.hpp"
#include "enp/env.hpp"
#include "enp/rng.hpp"
#include "enp/tensor.hpp"

namespace enp {

// The agent model: a cross-modal state encoder producing s_t in R^{KxD} from
// (instruction, observation, history) and a shared row-wise action scorer.
// Energies are read off the logits: E(s,a_k) = -logit_k, E(s) = -logsumexp.

struct PolicyDims {
  int K = kNumActions;
  int D = 32;       // state width (also history width)
  int D_obs = 28;   // per-candidate observation features
  int D_emb = 16;   // token embedding width
  int D_proj = 16;  // observation projection width
  int vocab = 10;

  int fusion_in() const { return D_emb + D_proj + D; }
};

struct PolicyModel {
  PolicyDims dims;
  Tensor tok_emb;  // vocab x D_emb
  Tensor W_obs;    // D_obs x D_proj
  Tensor b_obs;    // 1 x D_proj
  Tensor W_fuse;   // fusion_in x D
  Tensor b_fuse;   // 1 x D
  Tensor W_hist;   // 2D x D
  Tensor b_hist;   // 1 x D
  Tensor w_act;    // D x 1
  Tensor b_act;    // 1 x 1

  static PolicyModel init(const PolicyDims& dims, RngStream& rng) {
    PolicyModel m;
    m.dims = dims;
    auto u = [&rng](std::size_t r, std::size_t c, double fan_in) {
      Tensor t(r, c);
      double a = 1.0 / std::sqrt(fan_in);
      for (double& v : t.data) v = rng.uniform(-a, a);
      return t;
    };
    m.tok_emb = u(dims.vocab, dims.D_emb, dims.D_emb);
    m.W_obs = u(dims.D_obs, dims.D_proj, dims.D_obs);
    m.b_obs = Tensor(1, dims.D_proj);
    m.W_fuse = u(dims.fusion_in(), dims.D, dims.fusion_in());
    m.b_fuse = Tensor(1, dims.D);
    m.W_hist = u(2 * dims.D, dims.D, 2 * dims.D);
    m.b_hist = Tensor(1, dims.D);
    m.w_act = u(dims.D, 1, dims.D);
    m.b_act = Tensor(1, 1);
    return m;
  }

  std::vector<std::pair<std::string, Tensor*>> params() {
    return {{"tok_emb", &tok_emb}, {"W_obs", &W_obs},   {"b_obs", &b_obs},
            {"W_fuse", &W_fuse},   {"b_fuse", &b_fuse}, {"W_hist", &W_hist},
            {"b_hist", &b_hist},   {"w_act", &w_act},   {"b_act", &b_act}};
  }
  std::vector<std::pair<std::string, const Tensor*>> params() const {
    auto* self = const_cast<PolicyModel*>(this);
    std::vector<std::pair<std::string, const Tensor*>> out;
    for (auto& [n, t] : self->params()) out.emplace_back(n, t);
    return out;
  }
};

struct NavState {
  Tensor matrix;  // K x D
  int step_index = 0;
};

struct HistoryState {
  Tensor vec;  // 1 x D, zero at t = 0
  static HistoryState initial(int D) { return HistoryState{Tensor(1, D)}; }
};

// Graph leaves for one forward/backward pass. Parameter values are copied in,
// so the model stays immutable while the graph is alive.
struct PolicyGraph {
  PolicyDims dims;
  std::map<std::string, NodePtr> leaves;

  static PolicyGraph from_model(const PolicyModel& model) {
    PolicyGraph g;
    g.dims = model.dims;
    for (const auto& [name, t] : model.params()) g.leaves[name] = leaf(*t);
    return g;
  }
  const NodePtr& at(const std::string& name) const { return leaves.at(name); }
};

inline NodePtr tile_rows(const NodePtr& row, int K) {
  return matmul(leaf(ones(K, 1)), row);  // K x cols
}

inline NodePtr instruction_embedding_node(const PolicyGraph& g, const std::vector<int>& tokens) {
  if (tokens.empty()) throw std::invalid_argument("encode_state: empty instruction");
  std::vector<std::size_t> rows;
  for (int t : tokens) {
    if (t < 0 || t >= g.dims.vocab)
      throw std::out_of_range("encode_state: token id " + std::to_string(t) +
                              " out of vocab " + std::to_string(g.dims.vocab));
    rows.push_back(static_cast<std::size_t>(t));
  }
  return mean(index_select(g.at("tok_emb"), rows), 0);  // 1 x D_emb
}

// One encoder step: s_t = tanh([x; proj(O_t); H_t] W_fuse + b), row-wise over
// the K candidates; H_{t+1} = tanh([H_t; mean_rows(s_t)] W_hist + b).
inline std::pair<NodePtr, NodePtr> encode_state_node(const PolicyGraph& g,
                                                     const std::vector<int>& tokens,
                                                     const Tensor& obs_features,
                                                     const NodePtr& history) {
  const PolicyDims& d = g.dims;
  if (static_cast<int>(obs_features.rows()) != d.K ||
      static_cast<int>(obs_features.cols()) != d.D_obs)
    throw std::invalid_argument("encode_state: observation must be K x D_obs, got " +
                                shape_str(obs_features));
  NodePtr x = instruction_embedding_node(g, tokens);
  NodePtr obs = leaf(obs_features);
  NodePtr proj = tanh_op(add(matmul(obs, g.at("W_obs")), tile_rows(g.at("b_obs"), d.K)));
  NodePtr fused = concatenate({tile_rows(x, d.K), proj, tile_rows(history, d.K)}, 1);
  NodePtr s = tanh_op(add(matmul(fused, g.at("W_fuse")), tile_rows(g.at("b_fuse"), d.K)));
  NodePtr pooled = mean(s, 0);  // 1 x D
  NodePtr h_in = concatenate({history, pooled}, 1);
  NodePtr h_next = tanh_op(add(matmul(h_in, g.at("W_hist")), g.at("b_hist")));
  return {s, h_next};
}

inline NodePtr action_logits_node(const PolicyGraph& g, const NodePtr& s) {
  return add(matmul(s, g.at("w_act")), tile_rows(g.at("b_act"), g.dims.K));  // K x 1
}

inline NodePtr state_energy_node(const PolicyGraph& g, const NodePtr& s) {
  return scalar_scale(logsumexp(action_logits_node(g, s)), -1.0);  // 1 x 1
}

// ---------------------------------------------------------------------------
// Value-level interface

inline std::pair<NavState, HistoryState> encode_state(const PolicyModel& model,
                                                      const std::vector<int>& tokens,
                                                      const Observation& obs,
                                                      const HistoryState& history,
                                                      int step_index = 0) {
  PolicyGraph g = PolicyGraph::from_model(model);
  auto [s, h] = encode_state_node(g, tokens, obs.features, leaf(history.vec));
  return {NavState{s->value, step_index}, HistoryState{h->value}};
}

inline std::vector<double> action_logits(const PolicyModel& model, const NavState& s) {
  PolicyGraph g = PolicyGraph::from_model(model);
  return action_logits_node(g, leaf(s.matrix))->value.data;
}

inline std::vector<double> softmax_values(const std::vector<double>& logits) {
  double mx = logits[0];
  for (double v : logits) mx = std::max(mx, v);
  double z = 0.0;
  std::vector<double> p(logits.size());
  for (std::size_t i = 0; i < logits.size(); ++i) z += p[i] = std::exp(logits[i] - mx);
  for (double& v : p) v /= z;
  return p;
}

inline double pair_energy(const PolicyModel& model, const NavState& s, int k) {
  if (k < 0 || k >= model.dims.K) throw std::out_of_range("pair_energy: bad action id");
  return -action_logits(model, s)[k];
}

inline double state_energy(const PolicyModel& model, const NavState& s) {
  PolicyGraph g = PolicyGraph::from_model(model);
  return state_energy_node(g, leaf(s.matrix))->value.data[0];
}

// Energy and its input gradient, as needed by the SGLD transition.
inline std::pair<double, Tensor> state_energy_grad(const PolicyModel& model, const Tensor& s) {
  PolicyGraph g = PolicyGraph::from_model(model);
  NodePtr s_leaf = leaf(s);
  NodePtr e = state_energy_node(g, s_leaf);
  backward(e);
  return {e->value.data[0], s_leaf->grad};
}

// ---------------------------------------------------------------------------
// Checkpoint binding

inline ParamStore to_param_store(const PolicyModel& model, const std::string& meta) {
  ParamStore store;
  store.meta = meta;
  for (const auto& [name, t] : model.params()) store.items.emplace_back(name, *t);
  return store;
}

inline PolicyModel model_from_store(const ParamStore& store, const PolicyDims& dims) {
  PolicyModel m;
  m.dims = dims;
  for (auto& [name, t] : m.params()) {
    const Tensor* src = const_cast<ParamStore&>(store).find(name);
    if (!src) throw std::runtime_error("checkpoint: missing parameter " + name);
    *t = *src;
  }
  return m;
}

}  // namespace enp
