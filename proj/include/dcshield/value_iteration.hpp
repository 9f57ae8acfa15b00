#pragma once

#include <algorithm>
#include <cmath>
#include <concepts>
#include <deque>
#include <limits>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "dcshield/mdp.hpp"
#include "dcshield/types.hpp"

namespace dcshield {

/// Anything the engine can solve: a finite MDP exposed through a batched Bellman backup.
template <class M>
concept TransitionModel = requires(const M& m, std::span<const double> v, std::span<double> q,
                                   typename M::Workspace& ws, StateId s) {
  { m.state_count() } -> std::convertible_to<std::size_t>;
  { m.action_count() } -> std::convertible_to<std::size_t>;
  { m.enabled(s) } -> std::convertible_to<ActionMask>;
  { m.make_workspace() } -> std::same_as<typename M::Workspace>;
  m.backup(v, q, ws);
};

enum class Mode { min, max, policy };
enum class SpecKind { safety, reach_avoid };

inline const char* to_string(Mode m) {
  switch (m) {
    case Mode::min: return "min";
    case Mode::max: return "max";
    case Mode::policy: return "policy";
  }
  return "?";
}

inline const char* to_string(SpecKind k) { return k == SpecKind::safety ? "safety" : "reach-avoid"; }

/// When value iteration may stop, given a sweep whose sup-norm change fell below tol.
/// residual: stop immediately. error_estimate: additionally require the geometric tail bound
/// change * rho / (1 - rho) < tol, with rho the largest ratio of consecutive changes over the last
/// kContractionWindow sweeps, so slowly
/// contracting problems keep iterating until the remaining error is also below tol.
enum class StopRule { residual, error_estimate };

inline constexpr std::size_t kContractionWindow = 10;
inline constexpr double kRoundingFloor = 16.0 * std::numeric_limits<double>::epsilon();

struct SolveOptions {
  double tol = 1e-6;
  std::size_t max_iterations = 100000;
  StopRule stop = StopRule::error_estimate;
};

struct ValueVector {
  std::vector<double> values;
  Mode mode = Mode::max;
  SpecKind spec = SpecKind::safety;
  /// Sup-norm change of the last sweep.
  double residual = 0.0;
  std::size_t iterations = 0;

  double operator[](std::size_t s) const { return values[s]; }
  std::size_t size() const { return values.size(); }
};

struct QTable {
  std::vector<double> q;  // q[s * action_count + a]
  std::size_t action_count = 0;
  Mode mode = Mode::max;
  SpecKind spec = SpecKind::safety;

  double operator()(StateId s, ActionId a) const { return q[static_cast<std::size_t>(s) * action_count + a]; }
  std::span<const double> row(StateId s) const {
    return {q.data() + static_cast<std::size_t>(s) * action_count, action_count};
  }
};

/// Specification over the labels of a model. `goal` is empty for safety.
struct Objective {
  SpecKind kind = SpecKind::safety;
  StateSet unsafe;
  StateSet goal;
};

template <class Model>
Objective make_objective(const Model& model, SpecKind kind) {
  Objective obj;
  obj.kind = kind;
  obj.unsafe = model.has_label("unsafe") ? model.label("unsafe") : StateSet(model.state_count(), 0);
  if (kind == SpecKind::reach_avoid) {
    if (!model.has_label("goal")) throw std::invalid_argument("reach-avoid objective needs a 'goal' label");
    obj.goal = model.label("goal");
    for (std::size_t s = 0; s < obj.goal.size(); ++s)
      if (obj.goal[s] && obj.unsafe[s])
        throw std::invalid_argument("inconsistent labels: state " + std::to_string(s) + " is both unsafe and goal");
  }
  return obj;
}

/// One reachability problem: probability of eventually hitting `target`, with `avoid` states pinned to 0.
struct ReachQuery {
  const StateSet* target = nullptr;
  const StateSet* avoid = nullptr;
  Mode mode = Mode::max;
  std::span<const ActionId> policy;     // required iff mode == policy
  std::span<const ActionMask> allowed;  // optional per-state restriction of the action sets
  std::span<const double> warm_start;   // optional initial iterate (see solve_reach)
};

namespace detail {

template <class Model>
std::vector<ActionMask> effective_masks(const Model& model, const ReachQuery& rq) {
  const std::size_t n = model.state_count();
  std::vector<ActionMask> masks(n);
  for (std::size_t s = 0; s < n; ++s) {
    const auto sid = static_cast<StateId>(s);
    if (rq.mode == Mode::policy) {
      masks[s] = mask_of(rq.policy[s]);
    } else {
      masks[s] = model.enabled(sid);
      if (!rq.allowed.empty()) masks[s] &= rq.allowed[s];
    }
    if (masks[s] == 0) throw std::invalid_argument("no usable action at state " + std::to_string(s));
  }
  return masks;
}

inline double pick(std::span<const double> q_row, ActionMask mask, bool maximize) {
  double best = maximize ? -1.0 : 2.0;
  for (ActionMask rest = mask; rest; rest &= rest - 1) {
    const double x = q_row[std::countr_zero(rest)];
    best = maximize ? std::max(best, x) : std::min(best, x);
  }
  return best;
}

}  // namespace detail

/// States that reach the target with probability 0 (max/policy: under every choice; min: under some choice).
/// Computed by qualitative backups of indicator vectors, i.e. graph reachability.
template <TransitionModel Model>
StateSet reach_zero_states(const Model& model, const StateSet& target, const StateSet* avoid, Mode mode,
                           std::span<const ActionMask> masks) {
  const std::size_t n = model.state_count();
  const std::size_t m = model.action_count();
  auto ws = model.make_workspace();
  std::vector<double> ind(n, 0.0);
  std::vector<double> q(n * m, 0.0);
  auto pinned = [&](std::size_t s) { return avoid != nullptr && (*avoid)[s] && !target[s]; };

  if (mode != Mode::min) {
    // Least fixed point: states with some positive-probability path into the target.
    StateSet good(n, 0);
    for (std::size_t s = 0; s < n; ++s) good[s] = target[s] ? 1 : 0;
    for (bool changed = true; changed;) {
      changed = false;
      for (std::size_t s = 0; s < n; ++s) ind[s] = good[s] ? 1.0 : 0.0;
      model.backup(ind, q, ws);
      for (std::size_t s = 0; s < n; ++s) {
        if (good[s] || pinned(s)) continue;
        for (ActionMask rest = masks[s]; rest; rest &= rest - 1)
          if (q[s * m + std::countr_zero(rest)] > 0.0) {
            good[s] = 1;
            changed = true;
            break;
          }
      }
    }
    StateSet zero(n, 0);
    for (std::size_t s = 0; s < n; ++s) zero[s] = good[s] ? 0 : 1;
    return zero;
  }

  // Greatest fixed point: states that can keep all mass away from the target forever.
  StateSet zero(n, 0);
  for (std::size_t s = 0; s < n; ++s) zero[s] = target[s] ? 0 : 1;
  for (bool changed = true; changed;) {
    changed = false;
    for (std::size_t s = 0; s < n; ++s) ind[s] = zero[s] ? 0.0 : 1.0;
    model.backup(ind, q, ws);
    for (std::size_t s = 0; s < n; ++s) {
      if (!zero[s] || pinned(s)) continue;
      bool keep = false;
      for (ActionMask rest = masks[s]; rest; rest &= rest - 1)
        if (q[s * m + std::countr_zero(rest)] == 0.0) {
          keep = true;
          break;
        }
      if (!keep) {
        zero[s] = 0;
        changed = true;
      }
    }
  }
  return zero;
}

/// States that reach the target with probability 1 (max/policy: under some choice; min: under every
/// choice), given the probability-0 set of the same query. Graph computation, no arithmetic on values.
template <TransitionModel Model>
StateSet reach_one_states(const Model& model, const StateSet& target, const StateSet* avoid, Mode mode,
                          std::span<const ActionMask> masks, const StateSet& zero) {
  const std::size_t n = model.state_count();
  const std::size_t m = model.action_count();
  auto ws = model.make_workspace();
  std::vector<double> ind(n, 0.0);
  std::vector<double> q(n * m, 0.0);
  auto pinned = [&](std::size_t s) { return avoid != nullptr && (*avoid)[s] && !target[s]; };

  if (mode == Mode::min) {
    // Complement: states from which some choice reaches, with positive probability and without
    // passing the target, a state that can avoid the target forever.
    StateSet bad(n, 0);
    for (std::size_t s = 0; s < n; ++s) bad[s] = !target[s] && (zero[s] || pinned(s)) ? 1 : 0;
    for (bool changed = true; changed;) {
      changed = false;
      for (std::size_t s = 0; s < n; ++s) ind[s] = bad[s] ? 1.0 : 0.0;
      model.backup(ind, q, ws);
      for (std::size_t s = 0; s < n; ++s) {
        if (bad[s] || target[s]) continue;
        for (ActionMask rest = masks[s]; rest; rest &= rest - 1)
          if (q[s * m + std::countr_zero(rest)] > 0.0) {
            bad[s] = 1;
            changed = true;
            break;
          }
      }
    }
    StateSet one(n, 0);
    for (std::size_t s = 0; s < n; ++s) one[s] = bad[s] ? 0 : 1;
    return one;
  }

  // Nested fixed point: U shrinks to the states with a choice that stays inside U surely and keeps
  // a positive-probability path to the target.
  StateSet u(n, 0);
  for (std::size_t s = 0; s < n; ++s) u[s] = target[s] || (!zero[s] && !pinned(s)) ? 1 : 0;
  std::vector<double> out_mass(n * m, 0.0);
  for (bool shrunk = true; shrunk;) {
    for (std::size_t s = 0; s < n; ++s) ind[s] = u[s] ? 0.0 : 1.0;
    model.backup(ind, out_mass, ws);
    StateSet r(n, 0);
    for (std::size_t s = 0; s < n; ++s) r[s] = target[s] ? 1 : 0;
    for (bool grew = true; grew;) {
      grew = false;
      for (std::size_t s = 0; s < n; ++s) ind[s] = r[s] ? 1.0 : 0.0;
      model.backup(ind, q, ws);
      for (std::size_t s = 0; s < n; ++s) {
        if (r[s] || !u[s]) continue;
        for (ActionMask rest = masks[s]; rest; rest &= rest - 1) {
          const int a = std::countr_zero(rest);
          if (out_mass[s * m + a] == 0.0 && q[s * m + a] > 0.0) {
            r[s] = 2;
            grew = true;
            break;
          }
        }
      }
      for (auto& x : r)
        if (x == 2) x = 1;
    }
    shrunk = false;
    for (std::size_t s = 0; s < n; ++s)
      if (u[s] && !r[s]) {
        u[s] = 0;
        shrunk = true;
      }
  }
  return u;
}

/// Reachability probabilities by Jacobi value iteration.
///
/// Target and graph-one states are fixed at 1, avoid and graph-zero states at 0; the rest start from
/// 0 (or the clamped warm start) and are iterated until the sup-norm change drops below tol.
/// A warm start must not exceed the solution in max mode, where the fixed point need not be unique.
template <TransitionModel Model>
ValueVector solve_reach(const Model& model, const ReachQuery& rq, const SolveOptions& opt = {}) {
  const std::size_t n = model.state_count();
  const std::size_t m = model.action_count();
  if (rq.target == nullptr || rq.target->size() != n) throw std::invalid_argument("target set size mismatch");
  if (rq.avoid != nullptr && rq.avoid->size() != n) throw std::invalid_argument("avoid set size mismatch");
  if ((rq.mode == Mode::policy) != !rq.policy.empty())
    throw std::invalid_argument("a policy is required exactly in policy mode");
  if (rq.mode == Mode::policy && rq.policy.size() != n) throw std::invalid_argument("policy size mismatch");
  if (!rq.allowed.empty() && rq.allowed.size() != n) throw std::invalid_argument("allowed-set size mismatch");
  if (!rq.warm_start.empty() && rq.warm_start.size() != n) throw std::invalid_argument("warm start size mismatch");
  if (!(opt.tol > 0.0)) throw std::invalid_argument("tolerance must be positive");

  const StateSet& target = *rq.target;
  const std::vector<ActionMask> masks = detail::effective_masks(model, rq);
  const StateSet zero = reach_zero_states(model, target, rq.avoid, rq.mode, masks);
  const StateSet one = reach_one_states(model, target, rq.avoid, rq.mode, masks, zero);

  // 0 = free, 1 = fixed at 1, 2 = fixed at 0
  std::vector<char> fixed(n, 0);
  for (std::size_t s = 0; s < n; ++s) {
    if (target[s] || one[s]) fixed[s] = 1;
    else if ((rq.avoid != nullptr && (*rq.avoid)[s]) || zero[s]) fixed[s] = 2;
  }

  std::vector<double> v(n, 0.0);
  for (std::size_t s = 0; s < n; ++s) {
    if (fixed[s] == 1) v[s] = 1.0;
    else if (fixed[s] == 0 && !rq.warm_start.empty()) v[s] = std::clamp(rq.warm_start[s], 0.0, 1.0);
  }

  ValueVector out;
  out.mode = rq.mode;
  std::vector<double> next(v);
  std::vector<double> q(n * m, 0.0);
  auto ws = model.make_workspace();
  const bool maximize = rq.mode != Mode::min;
  bool any_free = std::any_of(fixed.begin(), fixed.end(), [](char f) { return f == 0; });
  std::deque<double> recent;  // last changes, for the contraction estimate
  while (any_free) {
    if (out.iterations >= opt.max_iterations) throw IterationLimitError(out.iterations, out.residual);
    model.backup(v, q, ws);
    double residual = 0.0;
    for (std::size_t s = 0; s < n; ++s) {
      if (fixed[s]) continue;
      const double x = std::clamp(detail::pick({q.data() + s * m, m}, masks[s], maximize), 0.0, 1.0);
      residual = std::max(residual, std::abs(x - v[s]));
      next[s] = x;
    }
    v.swap(next);
    ++out.iterations;
    out.residual = residual;
    recent.push_back(residual);
    if (recent.size() > kContractionWindow + 1) recent.pop_front();
    if (residual < opt.tol) {
      // Changes at rounding level carry no contraction information; the iterate is converged.
      if (opt.stop == StopRule::residual || residual <= kRoundingFloor) break;
      double rho = 0.0;
      for (std::size_t i = 1; i < recent.size(); ++i)
        rho = std::max(rho, recent[i - 1] > 0.0 ? recent[i] / recent[i - 1] : 1.0);
      if (recent.size() >= 2 && rho < 1.0 && residual * rho < opt.tol * (1.0 - rho)) break;
    }
  }
  out.values = std::move(v);
  return out;
}

/// Convenience front end: reach probability of `target` under the given mode.
template <TransitionModel Model>
ValueVector compute_reach_values(const Model& model, const StateSet& target, Mode mode,
                                 const Policy* policy = nullptr, const SolveOptions& opt = {}) {
  ReachQuery rq;
  rq.target = &target;
  rq.mode = mode;
  if (policy != nullptr) rq.policy = policy->actions();
  return solve_reach(model, rq, opt);
}

/// Extremal or policy values of the objective: probability of satisfying it.
///
/// Safety is solved through the reach dual: V = 1 - reach(unsafe) with min and max swapped.
/// Reach-avoid is a reach of the goal with unsafe states pinned to 0 (the goal is absorbing for the
/// specification, so no model transform is needed).
template <TransitionModel Model>
ValueVector compute_values(const Model& model, const Objective& obj, Mode mode, std::span<const ActionId> policy = {},
                           std::span<const ActionMask> allowed = {}, std::span<const double> warm_start = {},
                           const SolveOptions& opt = {}) {
  ReachQuery rq;
  rq.policy = policy;
  rq.allowed = allowed;
  if (obj.kind == SpecKind::safety) {
    rq.target = &obj.unsafe;
    rq.mode = mode == Mode::min ? Mode::max : mode == Mode::max ? Mode::min : Mode::policy;
    std::vector<double> warm;
    if (!warm_start.empty()) {
      warm.resize(warm_start.size());
      for (std::size_t s = 0; s < warm.size(); ++s) warm[s] = 1.0 - warm_start[s];
      rq.warm_start = warm;
    }
    ValueVector r = solve_reach(model, rq, opt);
    for (double& x : r.values) x = 1.0 - x;
    r.mode = mode;
    r.spec = SpecKind::safety;
    return r;
  }
  rq.target = &obj.goal;
  rq.avoid = &obj.unsafe;
  rq.mode = mode;
  rq.warm_start = warm_start;
  ValueVector r = solve_reach(model, rq, opt);
  r.spec = SpecKind::reach_avoid;
  return r;
}

/// Safety values of the "unsafe" label: 1 - reach(unsafe), dual mode.
template <TransitionModel Model>
ValueVector compute_safety_values(const Model& model, Mode mode, const Policy* policy = nullptr,
                                  const SolveOptions& opt = {}) {
  if (!model.has_label("unsafe")) throw std::invalid_argument("model has no 'unsafe' label");
  const Objective obj = make_objective(model, SpecKind::safety);
  return compute_values(model, obj, mode, policy != nullptr ? policy->actions() : std::span<const ActionId>{}, {},
                        {}, opt);
}

/// Q(s,a) = sum_{s'} P(s'|s,a) V(s') for every state and action (zero where a is disabled).
template <TransitionModel Model>
QTable compute_q(const Model& model, const ValueVector& values) {
  if (values.size() != model.state_count()) throw std::invalid_argument("value vector size mismatch");
  QTable t;
  t.action_count = model.action_count();
  t.mode = values.mode;
  t.spec = values.spec;
  t.q.assign(model.state_count() * t.action_count, 0.0);
  auto ws = model.make_workspace();
  model.backup(values.values, t.q, ws);
  return t;
}

/// Lowest-index argmax of row over mask.
inline ActionId argmax_action(std::span<const double> row, ActionMask mask) {
  ActionId best = -1;
  double best_q = -1.0;
  for (ActionMask rest = mask; rest; rest &= rest - 1) {
    const auto a = static_cast<ActionId>(std::countr_zero(rest));
    if (row[a] > best_q) {
      best_q = row[a];
      best = a;
    }
  }
  return best;
}

/// Q values within this distance of the row maximum count as tied when picking progress-making actions.
inline constexpr double kTieTolerance = 1e-6;

/// pi_safe(s) = argmax_a Qmax(s,a), lowest index on ties.
///
/// For reach-avoid objectives pass the objective: among (near-)maximal actions the policy then
/// prefers one that makes graph progress toward the goal, so ties never produce a stuck policy
/// whose value is below Vmax.
template <TransitionModel Model>
Policy optimally_safe_policy(const Model& model, const QTable& qmax, const Objective* reach_objective = nullptr,
                             double tie_tolerance = kTieTolerance) {
  const std::size_t n = model.state_count();
  const std::size_t m = model.action_count();
  if (qmax.q.size() != n * m) throw std::invalid_argument("Q table size mismatch");
  if (qmax.mode != Mode::max) throw std::invalid_argument("optimally safe policy needs max-mode Q values");
  std::vector<ActionId> act(n);
  for (std::size_t s = 0; s < n; ++s) act[s] = argmax_action(qmax.row(static_cast<StateId>(s)), model.enabled(s));
  if (reach_objective == nullptr || reach_objective->kind != SpecKind::reach_avoid) return Policy(model, act);

  const StateSet& goal = reach_objective->goal;
  const StateSet& unsafe = reach_objective->unsafe;
  std::vector<ActionMask> near(n, 0);
  for (std::size_t s = 0; s < n; ++s) {
    const auto row = qmax.row(static_cast<StateId>(s));
    const double best = row[act[s]];
    if (best <= 0.0) continue;
    for (ActionMask rest = model.enabled(s); rest; rest &= rest - 1) {
      const int a = std::countr_zero(rest);
      if (row[a] >= best - tie_tolerance) near[s] |= mask_of(a);
    }
  }
  StateSet ranked(n, 0);
  for (std::size_t s = 0; s < n; ++s) ranked[s] = goal[s] ? 1 : 0;
  auto ws = model.make_workspace();
  std::vector<double> ind(n, 0.0);
  std::vector<double> q(n * m, 0.0);
  for (bool changed = true; changed;) {
    changed = false;
    for (std::size_t s = 0; s < n; ++s) ind[s] = ranked[s] ? 1.0 : 0.0;
    model.backup(ind, q, ws);
    for (std::size_t s = 0; s < n; ++s) {
      if (ranked[s] || unsafe[s] || near[s] == 0) continue;
      for (ActionMask rest = near[s]; rest; rest &= rest - 1) {
        const int a = std::countr_zero(rest);
        if (q[s * m + a] > 0.0) {
          act[s] = a;
          ranked[s] = 2;  // joins the attractor after this layer
          break;
        }
      }
    }
    for (std::size_t s = 0; s < n; ++s)
      if (ranked[s] == 2) {
        ranked[s] = 1;
        changed = true;
      }
  }
  return Policy(model, act);
}

/// Checks Q(s,a) against a direct expectation for one (s,a) of an explicit MDP.
inline double expectation(const BasicMdp& mdp, StateId s, ActionId a, std::span<const double> v) {
  double acc = 0.0;
  for (const Transition& t : mdp.row(s, a)) acc += t.prob * v[t.to];
  return acc;
}

}  // namespace dcshield
