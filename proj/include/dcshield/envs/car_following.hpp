#pragma once

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <utility>
#include <vector>

#include "dcshield/mdp.hpp"
#include "dcshield/shield.hpp"
#include "dcshield/value_iteration.hpp"

namespace dcshield::envs {

struct CarFollowConfig {
  double safety_distance = 5.0;   // m; gaps below are collisions
  int distance_bins = 22;         // gap d = 0, 1, ..., 21 m
  double distance_step = 1.0;
  int velocity_bins = 22;         // relative velocity v = v_leader - v_ego
  double velocity_min = -1.0;     // m/s
  double velocity_step = 0.1;
  std::vector<double> ego_accels{-0.5, -0.25, 0.0, 0.25, 0.5};     // m/s^2, the actions
  std::vector<double> leader_accels{-0.2, -0.1, 0.0, 0.1, 0.2};    // uniformly random
  double dt = 1.0;                // s per tick
  int horizon = 100;              // ticks
  double init_distance = 12.0;
  double init_velocity = 0.0;
  /// Task controller: discount, reference gap, and weights of its reward.
  double discount = 0.95;
  double reference_gap = 7.0;
  double proximity_weight = 0.5;
  double collision_penalty = 2.0;
  double velocity_weight = 0.0;
};

/// Discretized longitudinal following: state = (gap bin, relative-velocity bin), index d * V + v.
/// One Euler step per tick; continuous successors are split between the two neighbouring bins
/// by linear interpolation, saturating at the grid edges.
class CarFollowing {
 public:
  explicit CarFollowing(CarFollowConfig cfg = {}) : cfg_(std::move(cfg)) {
    if (cfg_.distance_bins < 2 || cfg_.velocity_bins < 2) throw std::invalid_argument("need at least two bins");
    if (!(cfg_.distance_step > 0.0 && cfg_.velocity_step > 0.0 && cfg_.dt > 0.0))
      throw std::invalid_argument("bin widths and tick must be positive");
    if (cfg_.ego_accels.empty() || cfg_.ego_accels.size() > kMaxActions || cfg_.leader_accels.empty())
      throw std::invalid_argument("acceleration sets must be non-empty");
    const auto zero = std::find(cfg_.ego_accels.begin(), cfg_.ego_accels.end(), 0.0);
    if (zero == cfg_.ego_accels.end()) throw std::invalid_argument("ego accelerations must include 0");
    safe_action_ = static_cast<ActionId>(zero - cfg_.ego_accels.begin());
  }

  const CarFollowConfig& config() const { return cfg_; }
  std::size_t state_count() const {
    return static_cast<std::size_t>(cfg_.distance_bins) * static_cast<std::size_t>(cfg_.velocity_bins);
  }
  std::size_t action_count() const { return cfg_.ego_accels.size(); }
  ActionId safe_action() const { return safe_action_; }

  StateId encode(int d_bin, int v_bin) const { return static_cast<StateId>(d_bin * cfg_.velocity_bins + v_bin); }
  int distance_bin(StateId s) const { return static_cast<int>(s) / cfg_.velocity_bins; }
  int velocity_bin(StateId s) const { return static_cast<int>(s) % cfg_.velocity_bins; }
  double distance(StateId s) const { return distance_bin(s) * cfg_.distance_step; }
  double velocity(StateId s) const { return cfg_.velocity_min + velocity_bin(s) * cfg_.velocity_step; }

  bool unsafe(StateId s) const { return distance(s) < cfg_.safety_distance - 1e-9; }

  /// Neighbouring bins of a continuous value and their interpolation weights.
  static std::vector<std::pair<int, double>> split(double x, double lo, double step, int bins) {
    double pos = (x - lo) / step;
    pos = std::round(pos * 1e9) / 1e9;
    pos = std::clamp(pos, 0.0, static_cast<double>(bins - 1));
    const int i = static_cast<int>(std::floor(pos));
    const double frac = pos - i;
    if (frac <= 0.0 || i + 1 >= bins) return {{i, 1.0}};
    return {{i, 1.0 - frac}, {i + 1, frac}};
  }

  BasicMdp build() const {
    const std::size_t n = state_count();
    const std::size_t m = action_count();
    MdpBuilder b(n, m);
    std::vector<StateId> bad;
    const double pl = 1.0 / static_cast<double>(cfg_.leader_accels.size());
    for (std::size_t i = 0; i < n; ++i) {
      const auto s = static_cast<StateId>(i);
      if (unsafe(s)) {
        bad.push_back(s);
        for (std::size_t a = 0; a < m; ++a) b.add(s, static_cast<ActionId>(a), s, 1.0);
        continue;
      }
      const double d = distance(s);
      const double v = velocity(s);
      const auto dsplit = split(d + v * cfg_.dt, 0.0, cfg_.distance_step, cfg_.distance_bins);
      for (std::size_t a = 0; a < m; ++a) {
        for (double al : cfg_.leader_accels) {
          const double v2 = v + (al - cfg_.ego_accels[a]) * cfg_.dt;
          const auto vsplit = split(v2, cfg_.velocity_min, cfg_.velocity_step, cfg_.velocity_bins);
          for (const auto& [di, dp] : dsplit)
            for (const auto& [vi, vp] : vsplit) b.add(s, static_cast<ActionId>(a), encode(di, vi), pl * dp * vp);
        }
      }
    }
    b.init(encode(split(cfg_.init_distance, 0.0, cfg_.distance_step, cfg_.distance_bins).front().first,
                  split(cfg_.init_velocity, cfg_.velocity_min, cfg_.velocity_step, cfg_.velocity_bins).front().first),
           1.0);
    b.label("unsafe", bad);
    return std::move(b).build();
  }

  /// |difference of ego accelerations|.
  ActionMetric action_metric() const {
    ActionMetric mt;
    mt.action_count = action_count();
    for (double x : cfg_.ego_accels)
      for (double y : cfg_.ego_accels) mt.d.push_back(std::abs(x - y));
    return mt;
  }

  /// Delay-unaware follower: discounted value iteration rewarding a small gap, with a quadratic
  /// penalty below the reference gap and a per-tick penalty once collided.
  Policy task_policy(const BasicMdp& mdp, double tol = 1e-6) const {
    const std::size_t n = mdp.state_count();
    const std::size_t m = mdp.action_count();
    const double dmax = (cfg_.distance_bins - 1) * cfg_.distance_step;
    std::vector<double> r(n);
    for (std::size_t s = 0; s < n; ++s) {
      const auto sid = static_cast<StateId>(s);
      const double d = distance(sid);
      const double short_by = std::max(0.0, cfg_.reference_gap - d);
      const double v = velocity(sid);
      r[s] = unsafe(sid) ? -cfg_.collision_penalty
                         : -(d / dmax) - cfg_.proximity_weight * short_by * short_by - cfg_.velocity_weight * v * v;
    }
    std::vector<double> v(n, 0.0);
    std::vector<double> target(n);
    std::vector<double> q(n * m);
    auto ws = mdp.make_workspace();
    for (std::size_t it = 0;; ++it) {
      if (it > 100000) throw IterationLimitError(it, 0.0);
      for (std::size_t s = 0; s < n; ++s) target[s] = r[s] + cfg_.discount * v[s];
      mdp.backup(target, q, ws);
      double change = 0.0;
      for (std::size_t s = 0; s < n; ++s) {
        double best = q[s * m];
        for (std::size_t a = 1; a < m; ++a) best = std::max(best, q[s * m + a]);
        change = std::max(change, std::abs(best - v[s]));
        v[s] = best;
      }
      if (change < tol) break;
    }
    for (std::size_t s = 0; s < n; ++s) target[s] = r[s] + cfg_.discount * v[s];
    mdp.backup(target, q, ws);
    std::vector<ActionId> act(n, safe_action_);
    for (std::size_t s = 0; s < n; ++s) {
      if (unsafe(static_cast<StateId>(s))) continue;
      std::size_t best = 0;
      for (std::size_t a = 1; a < m; ++a)
        if (q[s * m + a] > q[s * m + best] + 1e-12) best = a;
      act[s] = static_cast<ActionId>(best);
    }
    return Policy(mdp, std::move(act));
  }

 private:
  CarFollowConfig cfg_;
  ActionId safe_action_ = 0;
};

}  // namespace dcshield::envs
