#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <stdexcept>
#include <utility>
#include <vector>

#include "enp/autodiff.hpp"
#include "enp/policy.hpp"
#include "enp/rng.hpp"
#include "enp/tensor.hpp"

namespace enp {

// SGLD sampler over navigation-state space and the persistent Marginal State
// Memory that warm-starts chains (persistent contrastive divergence).

struct SgldConfig {
  double eps = 1.5;         // step size
  double noise_var = 0.01;  // Var(xi); decoupled from eps by default
  int iters = 15;
  bool matched_kernel = false;  // classical coupling: std(xi) = eps
  // Projection bound for the iterates. The trainer samples in the encoder's
  // state box [-1, 1]^{KxD}, where the logit energy is linear and chains would
  // otherwise run away; 0 disables the projection (free-space dynamics).
  double clamp = 0.0;

  double noise_std() const { return matched_kernel ? eps : std::sqrt(noise_var); }
  void validate() const {
    if (eps <= 0.0) throw std::invalid_argument("sgld: eps must be > 0");
    if (noise_var < 0.0) throw std::invalid_argument("sgld: noise variance must be >= 0");
    if (iters < 1) throw std::invalid_argument("sgld: iters must be >= 1");
    if (clamp < 0.0) throw std::invalid_argument("sgld: clamp must be >= 0");
  }
};

// Bounded FIFO ring of detached chain endpoints.
class MarginalStateMemory {
 public:
  explicit MarginalStateMemory(std::size_t capacity = 100, double reinit_prob = 0.05)
      : capacity_(capacity), reinit_prob_(reinit_prob) {}

  std::size_t size() const { return buf_.size(); }
  std::size_t capacity() const { return capacity_; }
  double reinit_prob() const { return reinit_prob_; }
  std::uint64_t rejected_nonfinite() const { return rejected_; }

  // i = 0 is the oldest retained entry.
  const Tensor& at(std::size_t i) const { return buf_[(head_ + i) % buf_.size()]; }

  void store(const Tensor& s) {
    if (!s.finite()) {
      ++rejected_;
      return;
    }
    if (buf_.size() < capacity_) {
      buf_.push_back(s);
    } else {
      buf_[head_] = s;
      head_ = (head_ + 1) % capacity_;
    }
  }

 private:
  std::vector<Tensor> buf_;
  std::size_t capacity_;
  std::size_t head_ = 0;
  double reinit_prob_;
  std::uint64_t rejected_ = 0;
};

inline Tensor uniform_state(std::size_t rows, std::size_t cols, RngStream& rng) {
  Tensor s(rows, cols);
  for (double& v : s.data) v = rng.uniform(-1.0, 1.0);
  return s;
}

// s_hat^0 ~ U union M: a buffer entry with probability 1 - reinit_prob when
// the memory is non-empty, otherwise i.i.d. uniform on [-1, 1].
inline Tensor init_sample(const MarginalStateMemory& memory, RngStream& rng, std::size_t rows,
                          std::size_t cols) {
  bool reinit = rng.bernoulli(memory.reinit_prob());
  if (!reinit && memory.size() > 0) return memory.at(rng.index(memory.size()));
  return uniform_state(rows, cols, rng);
}

// Energy value and input gradient at a state.
using EnergyGradFn = std::function<std::pair<double, Tensor>(const Tensor&)>;

struct SgldResult {
  Tensor state;
  bool aborted = false;  // non-finite gradient; start point returned
};

// Runs exactly cfg.iters transitions s <- s - (eps^2/2) dE/ds + xi. A chain
// that hits a non-finite gradient is abandoned and reports its start point.
inline SgldResult sgld_chain(const EnergyGradFn& energy_grad, const Tensor& s0,
                             const SgldConfig& cfg, RngStream& rng) {
  cfg.validate();
  const double step = 0.5 * cfg.eps * cfg.eps;
  const double sigma = cfg.noise_std();
  Tensor s = s0;
  for (int i = 0; i < cfg.iters; ++i) {
    auto [value, grad] = energy_grad(s);
    (void)value;
    if (!grad.finite()) return {s0, true};
    for (std::size_t j = 0; j < s.size(); ++j) {
      double noise = sigma > 0.0 ? sigma * rng.normal() : 0.0;
      double v = s.data[j] - step * grad.data[j] + noise;
      if (cfg.clamp > 0.0) v = std::clamp(v, -cfg.clamp, cfg.clamp);
      s.data[j] = v;
    }
  }
  return {std::move(s), false};
}

inline SgldResult sgld_chain(const PolicyModel& model, const Tensor& s0, const SgldConfig& cfg,
                             RngStream& rng) {
  return sgld_chain([&model](const Tensor& s) { return state_energy_grad(model, s); }, s0, cfg,
                    rng);
}

// Contrastive surrogate L_S = E(s_data) - E(s_sample). Both states enter as
// fixed values: the log-likelihood gradient identity holds for the energy
// parameters at fixed states, so the theta-gradient is exactly
// grad E(s_data) - grad E(s_sample) over the action head, and nothing flows
// through either state's values.
inline NodePtr marginal_loss(const PolicyGraph& g, const Tensor& s_data, const Tensor& s_sample) {
  NodePtr e_data = state_energy_node(g, leaf(s_data));
  NodePtr e_sample = state_energy_node(g, leaf(s_sample));
  return sub(e_data, e_sample);
}

inline NodePtr marginal_loss(const PolicyGraph& g, const NavState& s_data,
                             const NavState& s_sample) {
  return marginal_loss(g, s_data.matrix, s_sample.matrix);
}

}  // namespace enp
