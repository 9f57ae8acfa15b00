#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdlib>
#include <stdexcept>
#include <string>
#include <vector>

#include "dcshield/mdp.hpp"
#include "dcshield/shield.hpp"
#include "dcshield/value_iteration.hpp"

namespace dcshield::envs {

struct Cell {
  int row = 0;
  int col = 0;
  friend bool operator==(const Cell&, const Cell&) = default;
};

struct GridworldConfig {
  int width = 8;
  int height = 8;
  Cell robot_start{0, 0};
  Cell goal{7, 7};
  Cell obstacle_start{4, 4};
  int horizon = 50;
  /// Probabilities of the obstacle's moves, indexed like the robot actions (up, down, left, right, stay).
  std::array<double, 5> obstacle_policy{0.2, 0.2, 0.2, 0.2, 0.2};
  /// Step cost and collision cost of the task controller.
  double step_cost = 1.0;
  double collision_cost = 10.0;
};

/// 8x8 grid: robot driven by the controller, an obstacle moving at random, a goal cell.
/// State = flag * cells^2 + robot * cells + obstacle, cell = row * width + col. Action 0..4 =
/// up, down, left, right, stay ("up" decreases the row). The flag records that the goal was reached.
class Gridworld {
 public:
  static constexpr int kActions = 5;
  static constexpr ActionId kStay = 4;
  static constexpr std::array<int, 5> kDRow{-1, 1, 0, 0, 0};
  static constexpr std::array<int, 5> kDCol{0, 0, -1, 1, 0};

  explicit Gridworld(GridworldConfig cfg = {}) : cfg_(cfg) {
    auto in = [&](Cell c) { return c.row >= 0 && c.row < cfg_.height && c.col >= 0 && c.col < cfg_.width; };
    if (cfg_.width <= 0 || cfg_.height <= 0) throw std::invalid_argument("grid dimensions must be positive");
    if (!in(cfg_.robot_start) || !in(cfg_.goal) || !in(cfg_.obstacle_start))
      throw std::invalid_argument("gridworld cells must lie inside the grid");
    if (cfg_.goal == cfg_.obstacle_start) throw std::invalid_argument("goal must differ from the obstacle start");
    if (cfg_.robot_start == cfg_.obstacle_start) throw std::invalid_argument("robot must not start on the obstacle");
    double sum = 0.0;
    for (double p : cfg_.obstacle_policy) {
      if (p < 0.0) throw std::invalid_argument("obstacle policy has a negative entry");
      sum += p;
    }
    if (std::abs(sum - 1.0) > 1e-9) throw std::invalid_argument("obstacle policy must sum to 1");
  }

  const GridworldConfig& config() const { return cfg_; }
  int cells() const { return cfg_.width * cfg_.height; }
  std::size_t state_count() const { return 2 * static_cast<std::size_t>(cells()) * cells(); }

  int cell_index(Cell c) const { return c.row * cfg_.width + c.col; }
  Cell cell_at(int idx) const { return {idx / cfg_.width, idx % cfg_.width}; }

  StateId encode(Cell robot, Cell obstacle, bool flag) const {
    return static_cast<StateId>((flag ? cells() * cells() : 0) + cell_index(robot) * cells() + cell_index(obstacle));
  }

  struct Decoded {
    Cell robot;
    Cell obstacle;
    bool flag;
  };

  Decoded decode(StateId s) const {
    const int c2 = cells() * cells();
    const int x = static_cast<int>(s);
    return {cell_at((x % c2) / cells()), cell_at(x % cells()), x >= c2};
  }

  bool unsafe(StateId s) const {
    const auto d = decode(s);
    return !d.flag && d.robot == d.obstacle;
  }

  bool goal(StateId s) const {
    const auto d = decode(s);
    return d.flag || (d.robot == cfg_.goal && !(d.robot == d.obstacle));
  }

  Cell move(Cell c, int a) const {
    return {std::clamp(c.row + kDRow[static_cast<std::size_t>(a)], 0, cfg_.height - 1),
            std::clamp(c.col + kDCol[static_cast<std::size_t>(a)], 0, cfg_.width - 1)};
  }

  BasicMdp build() const {
    const std::size_t n = state_count();
    MdpBuilder b(n, kActions);
    std::vector<StateId> unsafe_states;
    std::vector<StateId> goal_states;
    for (std::size_t i = 0; i < n; ++i) {
      const auto s = static_cast<StateId>(i);
      const bool bad = unsafe(s);
      const bool done = goal(s);
      if (bad) unsafe_states.push_back(s);
      if (done) goal_states.push_back(s);
      if (bad || done) {
        for (ActionId a = 0; a < kActions; ++a) b.add(s, a, s, 1.0);
        continue;
      }
      const auto d = decode(s);
      for (ActionId a = 0; a < kActions; ++a) {
        const Cell r = move(d.robot, a);
        for (int k = 0; k < kActions; ++k) {
          const double p = cfg_.obstacle_policy[static_cast<std::size_t>(k)];
          if (p <= 0.0) continue;
          const Cell o = move(d.obstacle, k);
          const bool flag = !(r == o) && r == cfg_.goal;
          b.add(s, a, encode(r, o, flag), p);
        }
      }
    }
    b.init(encode(cfg_.robot_start, cfg_.obstacle_start, false), 1.0);
    b.label("unsafe", unsafe_states);
    b.label("goal", goal_states);
    return std::move(b).build();
  }

  /// Manhattan distance between the displacements of two actions.
  static ActionMetric action_metric() {
    ActionMetric m;
    m.action_count = kActions;
    for (int a = 0; a < kActions; ++a)
      for (int c = 0; c < kActions; ++c)
        m.d.push_back(std::abs(kDRow[a] - kDRow[c]) + std::abs(kDCol[a] - kDCol[c]));
    return m;
  }

  /// Manhattan distance between robot and obstacle.
  double separation(StateId s) const {
    const auto d = decode(s);
    return std::abs(d.robot.row - d.obstacle.row) + std::abs(d.robot.col - d.obstacle.col);
  }

  /// Delay-unaware controller: minimizes expected steps to the goal, a collision costing a fixed
  /// terminal amount. Solved by value iteration on the cost-to-go.
  Policy task_policy(const BasicMdp& mdp, double tol = 1e-6) const {
    const std::size_t n = mdp.state_count();
    std::vector<double> j(n, 0.0);
    std::vector<char> terminal(n, 0);
    for (std::size_t s = 0; s < n; ++s) {
      if (goal(static_cast<StateId>(s))) terminal[s] = 1;
      else if (unsafe(static_cast<StateId>(s))) {
        terminal[s] = 1;
        j[s] = cfg_.collision_cost;
      }
    }
    auto ws = mdp.make_workspace();
    std::vector<double> q(n * kActions);
    for (std::size_t it = 0;; ++it) {
      if (it > 100000) throw IterationLimitError(it, 0.0);
      mdp.backup(j, q, ws);
      double change = 0.0;
      for (std::size_t s = 0; s < n; ++s) {
        if (terminal[s]) continue;
        double best = q[s * kActions];
        for (int a = 1; a < kActions; ++a) best = std::min(best, q[s * kActions + a]);
        const double v = cfg_.step_cost + best;
        change = std::max(change, std::abs(v - j[s]));
        j[s] = v;
      }
      if (change < tol) break;
    }
    mdp.backup(j, q, ws);
    std::vector<ActionId> act(n, kStay);
    for (std::size_t s = 0; s < n; ++s) {
      if (terminal[s]) continue;
      int best = 0;
      for (int a = 1; a < kActions; ++a)
        if (q[s * kActions + a] < q[s * kActions + best] - 1e-12) best = a;
      act[s] = best;
    }
    return Policy(mdp, std::move(act));
  }

 private:
  GridworldConfig cfg_;
};

}  // namespace dcshield::envs
