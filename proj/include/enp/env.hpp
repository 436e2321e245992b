#pragma once

#include <algorithm>
#include <cstdint>
#include <deque>
#include <functional>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "enp/rng.hpp"
#include "enp/tensor.hpp"

namespace enp {

// Procedurally generated partially observable grid mazes with token
// instructions and a shortest-path expert.

struct Cell {
  int r = 0;
  int c = 0;
  bool operator==(const Cell& o) const { return r == o.r && c == o.c; }
  bool operator!=(const Cell& o) const { return !(*this == o); }
  bool operator<(const Cell& o) const { return r != o.r ? r < o.r : c < o.c; }
};

// Action ids are also the expert tie-break order.
enum Action : int { kUp = 0, kRight = 1, kDown = 2, kLeft = 3, kStop = 4 };
constexpr int kNumActions = 5;
constexpr int kNumMoves = 4;

inline Cell move_cell(Cell p, int action) {
  switch (action) {
    case kUp: return {p.r - 1, p.c};
    case kRight: return {p.r, p.c + 1};
    case kDown: return {p.r + 1, p.c};
    case kLeft: return {p.r, p.c - 1};
    default: return p;
  }
}

struct EnvConfig {
  int width = 8;
  int height = 8;
  double wall_density = 0.18;
  int landmark_count = 5;
  int vocab_size = 10;      // landmark token ids are 0..vocab_size-1
  int window_radius = 1;    // egocentric view distance along each direction
  int max_instruction_len = 5;  // hard bound L_max on instruction length
  int gen_instruction_len = 1;  // length used by the dataset sampler
  int max_layout_retries = 200;
};

struct Layout {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> wall;  // height*width, 1 = blocked
  std::map<int, Cell> landmarks;   // token id -> cell
  std::uint64_t seed = 0;

  bool in_bounds(Cell p) const { return p.r >= 0 && p.r < height && p.c >= 0 && p.c < width; }
  bool blocked(Cell p) const { return !in_bounds(p) || wall[p.r * width + p.c] != 0; }
  int landmark_at(Cell p) const {
    for (const auto& [tok, cell] : landmarks)
      if (cell == p) return tok;
    return -1;
  }
};

struct Instruction {
  std::vector<int> tokens;  // landmark subsequence; last token names the goal
  Cell goal;
};

struct Observation {
  Tensor features;  // K x obs_dim
  Cell position;
  int heading = kUp;  // direction of the last successful move
};

struct TrajStep {
  Observation obs;
  int action = kStop;  // label (taken action for expert / rollout trajectories)
  Cell cell;
};

struct Trajectory {
  Instruction instruction;
  std::vector<TrajStep> steps;
  std::uint64_t layout_seed = 0;
  Cell end;  // position after the last step

  Cell start() const { return steps.empty() ? end : steps.front().cell; }
  std::vector<Cell> path_cells() const {
    std::vector<Cell> p;
    for (const auto& s : steps) p.push_back(s.cell);
    if (p.empty() || !(p.back() == end)) p.push_back(end);
    return p;
  }
};

// ---------------------------------------------------------------------------
// Layout generation

inline std::vector<int> bfs_distances(const Layout& layout, Cell from) {
  std::vector<int> dist(static_cast<std::size_t>(layout.width) * layout.height, -1);
  if (layout.blocked(from)) return dist;
  std::deque<Cell> queue{from};
  dist[from.r * layout.width + from.c] = 0;
  while (!queue.empty()) {
    Cell p = queue.front();
    queue.pop_front();
    int d = dist[p.r * layout.width + p.c];
    for (int a = 0; a < kNumMoves; ++a) {
      Cell q = move_cell(p, a);
      if (layout.blocked(q)) continue;
      int& dq = dist[q.r * layout.width + q.c];
      if (dq < 0) {
        dq = d + 1;
        queue.push_back(q);
      }
    }
  }
  return dist;
}

inline std::vector<Cell> free_cells(const Layout& layout) {
  std::vector<Cell> cells;
  for (int r = 0; r < layout.height; ++r)
    for (int c = 0; c < layout.width; ++c)
      if (!layout.wall[r * layout.width + c]) cells.push_back({r, c});
  return cells;
}

inline bool connected(const Layout& layout) {
  auto cells = free_cells(layout);
  if (cells.empty()) return false;
  auto dist = bfs_distances(layout, cells.front());
  for (const Cell& p : cells)
    if (dist[p.r * layout.width + p.c] < 0) return false;
  return true;
}

// Deterministic in seed. Draws walls at the configured density and rejects
// disconnected or landmark-starved layouts, retrying with derived sub-seeds.
inline Layout generate_layout(std::uint64_t seed, const EnvConfig& cfg) {
  if (cfg.wall_density >= 0.4)
    throw std::invalid_argument("generate_layout: wall density must be < 0.4");
  if (cfg.landmark_count > cfg.vocab_size)
    throw std::invalid_argument("generate_layout: landmark count exceeds vocab size");
  for (int attempt = 0; attempt < cfg.max_layout_retries; ++attempt) {
    RngStream rng(derive_seed(seed, 0x4C41594FULL + attempt));
    Layout layout;
    layout.width = cfg.width;
    layout.height = cfg.height;
    layout.seed = seed;
    layout.wall.assign(static_cast<std::size_t>(cfg.width) * cfg.height, 0);
    for (auto& w : layout.wall) w = rng.bernoulli(cfg.wall_density) ? 1 : 0;
    auto cells = free_cells(layout);
    if (static_cast<int>(cells.size()) < cfg.landmark_count + 1) continue;
    if (!connected(layout)) continue;
    // distinct tokens on distinct free cells
    std::vector<int> tokens(cfg.vocab_size);
    for (int i = 0; i < cfg.vocab_size; ++i) tokens[i] = i;
    rng.shuffle(tokens);
    rng.shuffle(cells);
    bool ok = true;
    for (int i = 0; i < cfg.landmark_count; ++i) {
      if (i >= static_cast<int>(cells.size())) {
        ok = false;
        break;
      }
      layout.landmarks[tokens[i]] = cells[i];
    }
    if (ok) return layout;
  }
  throw std::runtime_error("generate_layout: retries exhausted for seed " + std::to_string(seed));
}

// ---------------------------------------------------------------------------
// Expert

// First move of a BFS-shortest path, ties broken by action id order
// (up < right < down < left). STOP exactly at the goal.
inline int expert_action(const Layout& layout, Cell position, Cell goal) {
  if (layout.blocked(position) || layout.blocked(goal))
    throw std::invalid_argument("expert_action: position and goal must be free cells");
  if (position == goal) return kStop;
  auto dist = bfs_distances(layout, goal);
  int d = dist[position.r * layout.width + position.c];
  if (d < 0) throw std::runtime_error("expert_action: goal unreachable");
  for (int a = 0; a < kNumMoves; ++a) {
    Cell q = move_cell(position, a);
    if (!layout.blocked(q) && dist[q.r * layout.width + q.c] == d - 1) return a;
  }
  throw std::runtime_error("expert_action: no descending neighbor");  // unreachable
}

// ---------------------------------------------------------------------------
// Observations

// Row layout per candidate: [candidate one-hot (K)] then window_radius ring
// blocks of [wall, landmark one-hot] along the candidate direction (line of
// sight stops at the first wall; the STOP row carries the current cell in
// ring 0), then a shared block [row_norm, col_norm, heading one-hot,
// current-cell landmark one-hot]. The candidate one-hot is the orientation
// encoding of the panoramic view feature; without it open directions would be
// indistinguishable to the row-wise scorer. Blocked directions keep their row
// with the ring-0 wall bit set rather than being removed.
inline int obs_dim(const EnvConfig& cfg) {
  int per_ring = 1 + cfg.vocab_size;
  return kNumActions + cfg.window_radius * per_ring + 2 + 4 + cfg.vocab_size;
}

inline Observation make_observation(const Layout& layout, Cell pos, int heading,
                                    const EnvConfig& cfg) {
  const int dim = obs_dim(cfg);
  Observation obs;
  obs.position = pos;
  obs.heading = heading;
  obs.features = Tensor(kNumActions, dim);
  const int per_ring = 1 + cfg.vocab_size;
  for (int k = 0; k < kNumActions; ++k) {
    double* row = &obs.features.at(k, 0);
    row[k] = 1.0;
    if (k == kStop) {
      int lm = layout.landmark_at(pos);
      if (lm >= 0) row[kNumActions + 1 + lm] = 1.0;  // ring 0, landmark slot
    } else {
      Cell q = pos;
      for (int ring = 0; ring < cfg.window_radius; ++ring) {
        q = move_cell(q, k);
        double* slot = row + kNumActions + ring * per_ring;
        if (layout.blocked(q)) {
          slot[0] = 1.0;
          break;  // cells behind a wall are not visible
        }
        int lm = layout.landmark_at(q);
        if (lm >= 0) slot[1 + lm] = 1.0;
      }
    }
    double* shared = row + kNumActions + cfg.window_radius * per_ring;
    shared[0] = layout.height > 1 ? static_cast<double>(pos.r) / (layout.height - 1) : 0.0;
    shared[1] = layout.width > 1 ? static_cast<double>(pos.c) / (layout.width - 1) : 0.0;
    shared[2 + heading] = 1.0;
    int cur = layout.landmark_at(pos);
    if (cur >= 0) shared[6 + cur] = 1.0;
  }
  return obs;
}

// ---------------------------------------------------------------------------
// Rollout

using PolicyCallback = std::function<int(const Observation&)>;

// Runs the policy from `start` until STOP or max_steps. The callback sees only
// the Observation. Illegal moves are no-ops that consume a step.
inline Trajectory rollout(const Layout& layout, const Instruction& instruction,
                          const PolicyCallback& policy, int max_steps, const EnvConfig& cfg,
                          Cell start) {
  if (max_steps < 1) throw std::invalid_argument("rollout: max_steps must be >= 1");
  if (layout.blocked(start)) throw std::invalid_argument("rollout: start cell blocked");
  Trajectory traj;
  traj.instruction = instruction;
  traj.layout_seed = layout.seed;
  Cell pos = start;
  int heading = kUp;
  for (int t = 0; t < max_steps; ++t) {
    Observation obs = make_observation(layout, pos, heading, cfg);
    int action = policy(obs);
    if (action < 0 || action >= kNumActions)
      throw std::invalid_argument("rollout: policy returned invalid action");
    traj.steps.push_back({std::move(obs), action, pos});
    if (action == kStop) break;
    Cell next = move_cell(pos, action);
    if (!layout.blocked(next)) {
      pos = next;
      heading = action;
    }
  }
  traj.end = pos;
  return traj;
}

inline Trajectory expert_rollout(const Layout& layout, const Instruction& instruction,
                                 int max_steps, const EnvConfig& cfg, Cell start) {
  auto expert = [&](const Observation& obs) {
    return expert_action(layout, obs.position, instruction.goal);
  };
  return rollout(layout, instruction, expert, max_steps, cfg, start);
}

// ---------------------------------------------------------------------------
// Datasets

struct Dataset {
  std::vector<Trajectory> trajectories;
};

struct DatasetSplits {
  Dataset train;
  Dataset val_seen;
  Dataset val_unseen;
};

struct DatasetGenConfig {
  int train_layouts = 80;
  int unseen_layouts = 20;
  int episodes_per_layout = 3;
  int val_seen_episodes_per_layout = 1;
  int val_unseen_episodes_per_layout = 5;
  std::uint64_t train_seed_lo = 0;    // layout seeds [lo, lo+train_layouts)
  std::uint64_t unseen_seed_lo = 1000000;
  int max_steps = 40;
};

inline Instruction sample_instruction(const Layout& layout, const EnvConfig& cfg,
                                      RngStream& rng) {
  std::vector<int> tokens;
  for (const auto& [tok, cell] : layout.landmarks) tokens.push_back(tok);
  rng.shuffle(tokens);
  int len = 1 + static_cast<int>(rng.index(
                    static_cast<std::size_t>(std::min(cfg.gen_instruction_len,
                                                      static_cast<int>(tokens.size())))));
  len = std::min(len, cfg.max_instruction_len);
  Instruction ins;
  ins.tokens.assign(tokens.begin(), tokens.begin() + len);
  ins.goal = layout.landmarks.at(ins.tokens.back());
  return ins;
}

inline Trajectory sample_episode(const Layout& layout, const EnvConfig& cfg, int max_steps,
                                 RngStream& rng) {
  Instruction ins = sample_instruction(layout, cfg, rng);
  auto cells = free_cells(layout);
  Cell start = cells[rng.index(cells.size())];
  for (int tries = 0; start == ins.goal && tries < 64; ++tries)
    start = cells[rng.index(cells.size())];
  return expert_rollout(layout, ins, max_steps, cfg, start);
}

// val-seen reuses train layouts with fresh instructions; val-unseen uses the
// held-out layout seed range. Seed ranges must be disjoint.
inline DatasetSplits generate_dataset(const EnvConfig& cfg, const DatasetGenConfig& gen,
                                      std::uint64_t master_seed) {
  const std::uint64_t train_hi = gen.train_seed_lo + gen.train_layouts;
  const std::uint64_t unseen_hi = gen.unseen_seed_lo + gen.unseen_layouts;
  if (gen.train_seed_lo < unseen_hi && gen.unseen_seed_lo < train_hi)
    throw std::invalid_argument("generate_dataset: train and unseen layout seed ranges overlap");
  DatasetSplits splits;
  for (int i = 0; i < gen.train_layouts; ++i) {
    std::uint64_t lseed = gen.train_seed_lo + i;
    Layout layout = generate_layout(lseed, cfg);
    RngStream ep_rng(derive_seed(master_seed, 0xD5ULL * lseed + 1));
    for (int e = 0; e < gen.episodes_per_layout; ++e)
      splits.train.trajectories.push_back(sample_episode(layout, cfg, gen.max_steps, ep_rng));
    RngStream vs_rng(derive_seed(master_seed, 0xD5ULL * lseed + 2));
    for (int e = 0; e < gen.val_seen_episodes_per_layout; ++e)
      splits.val_seen.trajectories.push_back(sample_episode(layout, cfg, gen.max_steps, vs_rng));
  }
  for (int i = 0; i < gen.unseen_layouts; ++i) {
    std::uint64_t lseed = gen.unseen_seed_lo + i;
    Layout layout = generate_layout(lseed, cfg);
    RngStream vu_rng(derive_seed(master_seed, 0xD5ULL * lseed + 3));
    for (int e = 0; e < gen.val_unseen_episodes_per_layout; ++e)
      splits.val_unseen.trajectories.push_back(sample_episode(layout, cfg, gen.max_steps, vu_rng));
  }
  return splits;
}

}  // namespace enp
