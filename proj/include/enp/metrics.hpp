#pragma once

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <limits>
#include <map>
#include <stdexcept>
#include <utility>
#include <vector>

#include "enp/env.hpp"

namespace enp {

// Grid-scale analogues of the navigation metrics. Pure functions of
// EpisodeResult; layout-aware quantities (BFS distances to the goal) are
// precomputed by the evaluation harness and carried in the result.

struct EpisodeResult {
  std::vector<Cell> path;       // visited cells, start first
  std::vector<Cell> reference;  // expert path cells
  Cell goal;
  int success_radius = 0;
  int shortest_distance = 0;        // BFS(start, goal)
  int final_goal_distance = 0;      // BFS(final cell, goal)
  int min_visited_goal_distance = 0;  // min over visited cells of BFS(., goal)
};

struct EpisodeMetrics {
  double tl = 0.0;
  double ne = 0.0;
  double sr = 0.0;
  double osr = 0.0;
  double spl = 0.0;
};

inline int manhattan(Cell a, Cell b) { return std::abs(a.r - b.r) + std::abs(a.c - b.c); }

inline EpisodeMetrics episode_metrics(const EpisodeResult& res) {
  if (res.path.empty() || res.reference.empty())
    throw std::invalid_argument("episode_metrics: empty path or reference");
  EpisodeMetrics m;
  for (std::size_t i = 0; i + 1 < res.path.size(); ++i)
    m.tl += manhattan(res.path[i], res.path[i + 1]);  // no-op steps add 0
  m.ne = res.final_goal_distance;
  m.sr = res.final_goal_distance <= res.success_radius ? 1.0 : 0.0;
  m.osr = res.min_visited_goal_distance <= res.success_radius ? 1.0 : 0.0;
  double l = res.shortest_distance;
  m.spl = l == 0.0 ? m.sr : m.sr * l / std::max(m.tl, l);
  return m;
}

// DTW under Manhattan cell distance, full O(nm) dynamic program.
inline double dtw(const std::vector<Cell>& a, const std::vector<Cell>& b) {
  if (a.empty() || b.empty()) throw std::invalid_argument("dtw: empty sequence");
  const std::size_t n = a.size(), m = b.size();
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> prev(m + 1, inf), cur(m + 1, inf);
  prev[0] = 0.0;
  for (std::size_t i = 1; i <= n; ++i) {
    cur[0] = inf;
    for (std::size_t j = 1; j <= m; ++j) {
      double cost = manhattan(a[i - 1], b[j - 1]);
      cur[j] = cost + std::min({prev[j], cur[j - 1], prev[j - 1]});
    }
    prev.swap(cur);
  }
  return prev[m];
}

// exp(-DTW / (|ref| * d_th)); 1 iff the alignment cost is zero.
inline double ndtw(const std::vector<Cell>& path, const std::vector<Cell>& reference,
                   double d_th = 3.0) {
  if (d_th <= 0.0) throw std::invalid_argument("ndtw: d_th must be > 0");
  return std::exp(-dtw(path, reference) / (static_cast<double>(reference.size()) * d_th));
}

inline double sdtw(const EpisodeResult& res, double d_th = 3.0) {
  double sr = res.final_goal_distance <= res.success_radius ? 1.0 : 0.0;
  return sr * ndtw(res.path, res.reference, d_th);
}

struct AggregateMetrics {
  double tl = 0.0, ne = 0.0, sr = 0.0, osr = 0.0, spl = 0.0, ndtw = 0.0, sdtw = 0.0;
  // success rate bucketed by reference path length (edges), bucket width from
  // config; key = bucket lower edge
  std::map<int, std::pair<double, int>> sr_by_length;  // bucket -> (mean sr, count)
};

inline AggregateMetrics aggregate_metrics(const std::vector<EpisodeResult>& results,
                                          double d_th = 3.0, int bucket_width = 4) {
  if (results.empty()) throw std::invalid_argument("aggregate_metrics: no episodes");
  AggregateMetrics agg;
  std::map<int, std::pair<double, int>> buckets;
  for (const auto& res : results) {
    EpisodeMetrics m = episode_metrics(res);
    agg.tl += m.tl;
    agg.ne += m.ne;
    agg.sr += m.sr;
    agg.osr += m.osr;
    agg.spl += m.spl;
    agg.ndtw += ndtw(res.path, res.reference, d_th);
    agg.sdtw += sdtw(res, d_th);
    int ref_len = static_cast<int>(res.reference.size()) - 1;
    int bucket = (ref_len / bucket_width) * bucket_width;
    buckets[bucket].first += m.sr;
    buckets[bucket].second += 1;
  }
  double n = static_cast<double>(results.size());
  agg.tl /= n;
  agg.ne /= n;
  agg.sr /= n;
  agg.osr /= n;
  agg.spl /= n;
  agg.ndtw /= n;
  agg.sdtw /= n;
  for (auto& [b, sc] : buckets) sc.first /= sc.second;
  agg.sr_by_length = std::move(buckets);
  return agg;
}

}  // namespace enp
