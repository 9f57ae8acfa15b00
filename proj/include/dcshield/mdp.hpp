#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "dcshield/types.hpp"

namespace dcshield {

/// Membership vector over states (1 = member).
using StateSet = std::vector<char>;

inline StateSet make_state_set(std::size_t n, std::span<const StateId> members) {
  StateSet set(n, 0);
  for (StateId s : members) {
    if (s >= n) throw std::out_of_range("state " + std::to_string(s) + " outside [0, " + std::to_string(n) + ")");
    set[s] = 1;
  }
  return set;
}

inline bool any_of_set(const StateSet& set) {
  return std::any_of(set.begin(), set.end(), [](char c) { return c != 0; });
}

/// Finite MDP with sparse transitions stored per (state, action) row.
///
/// The enabled action set of a state is the set of actions that have at least one
/// transition entry. The object may hold malformed data (it is what the parser and
/// builders produce before checking); use validate_mdp() to find out.
class BasicMdp {
 public:
  BasicMdp() = default;

  std::size_t state_count() const { return state_count_; }
  std::size_t action_count() const { return action_count_; }

  ActionMask enabled(StateId s) const { return enabled_[s]; }
  bool is_enabled(StateId s, ActionId a) const { return mask_has(enabled_[s], a); }

  std::span<const Transition> row(StateId s, ActionId a) const {
    const std::size_t k = static_cast<std::size_t>(s) * action_count_ + static_cast<std::size_t>(a);
    return {entries_.data() + offsets_[k], offsets_[k + 1] - offsets_[k]};
  }

  std::size_t transition_count() const { return entries_.size(); }

  const std::vector<double>& init() const { return init_; }

  bool has_label(const std::string& name) const { return labels_.contains(name); }

  const StateSet& label(const std::string& name) const {
    auto it = labels_.find(name);
    if (it == labels_.end()) throw std::out_of_range("no label '" + name + "'");
    return it->second;
  }

  const std::map<std::string, StateSet>& labels() const { return labels_; }

  void set_label(const std::string& name, StateSet members) {
    if (members.size() != state_count_) throw std::invalid_argument("label size mismatch for '" + name + "'");
    labels_[name] = std::move(members);
  }

  void set_init(std::vector<double> init) {
    if (init.size() != state_count_) throw std::invalid_argument("init size mismatch");
    init_ = std::move(init);
  }

  /// States with positive initial probability, ascending.
  std::vector<StateId> init_support() const {
    std::vector<StateId> out;
    for (std::size_t s = 0; s < init_.size(); ++s)
      if (init_[s] > 0.0) out.push_back(static_cast<StateId>(s));
    return out;
  }

  struct Workspace {};
  Workspace make_workspace() const { return {}; }

  /// q[s * action_count + a] = sum_{s'} P(s'|s,a) v[s']; zero for disabled actions.
  void backup(std::span<const double> v, std::span<double> q, Workspace&) const {
    const std::size_t rows = state_count_ * action_count_;
    for (std::size_t k = 0; k < rows; ++k) {
      double acc = 0.0;
      for (std::size_t e = offsets_[k]; e < offsets_[k + 1]; ++e) acc += entries_[e].prob * v[entries_[e].to];
      q[k] = acc;
    }
  }

 private:
  friend class MdpBuilder;

  std::size_t state_count_ = 0;
  std::size_t action_count_ = 0;
  std::vector<ActionMask> enabled_;
  std::vector<std::size_t> offsets_;  // (state_count * action_count) + 1 row starts
  std::vector<Transition> entries_;
  std::vector<double> init_;
  std::map<std::string, StateSet> labels_;
};

/// Accumulates transitions and assembles a BasicMdp. Duplicate (s, a, s') entries are summed.
class MdpBuilder {
 public:
  MdpBuilder(std::size_t state_count, std::size_t action_count)
      : n_(state_count), m_(action_count), init_(state_count, 0.0) {
    if (state_count == 0) throw std::invalid_argument("state_count must be positive");
    if (action_count == 0 || action_count > kMaxActions)
      throw std::invalid_argument("action_count must be in [1, 64]");
  }

  MdpBuilder& add(StateId s, ActionId a, StateId to, double p) {
    if (s >= n_) throw std::out_of_range("source state " + std::to_string(s) + " out of range");
    if (a < 0 || static_cast<std::size_t>(a) >= m_)
      throw std::out_of_range("action " + std::to_string(a) + " out of range");
    raw_.push_back({s, a, to, p});
    return *this;
  }

  MdpBuilder& init(StateId s, double p) {
    if (s >= n_) throw std::out_of_range("init state out of range");
    init_[s] += p;
    return *this;
  }

  MdpBuilder& init(std::vector<double> dist) {
    if (dist.size() != n_) throw std::invalid_argument("init size mismatch");
    init_ = std::move(dist);
    return *this;
  }

  MdpBuilder& label(const std::string& name, std::span<const StateId> members) {
    labels_[name] = make_state_set(n_, members);
    return *this;
  }

  MdpBuilder& label(const std::string& name, StateSet members) {
    if (members.size() != n_) throw std::invalid_argument("label size mismatch for '" + name + "'");
    labels_[name] = std::move(members);
    return *this;
  }

  BasicMdp build() && {
    BasicMdp mdp;
    mdp.state_count_ = n_;
    mdp.action_count_ = m_;
    mdp.enabled_.assign(n_, 0);
    mdp.offsets_.assign(n_ * m_ + 1, 0);

    std::sort(raw_.begin(), raw_.end(), [](const Raw& x, const Raw& y) {
      if (x.s != y.s) return x.s < y.s;
      if (x.a != y.a) return x.a < y.a;
      return x.to < y.to;
    });
    mdp.entries_.reserve(raw_.size());
    std::size_t prev_key = static_cast<std::size_t>(-1);
    StateId prev_to = 0;
    for (const Raw& r : raw_) {
      const std::size_t key = static_cast<std::size_t>(r.s) * m_ + static_cast<std::size_t>(r.a);
      if (key == prev_key && r.to == prev_to) {
        mdp.entries_.back().prob += r.p;
        continue;
      }
      mdp.entries_.push_back({r.to, r.p});
      ++mdp.offsets_[key + 1];
      mdp.enabled_[r.s] |= mask_of(r.a);
      prev_key = key;
      prev_to = r.to;
    }
    std::partial_sum(mdp.offsets_.begin(), mdp.offsets_.end(), mdp.offsets_.begin());
    mdp.init_ = std::move(init_);
    mdp.labels_ = std::move(labels_);
    return mdp;
  }

 private:
  struct Raw {
    StateId s;
    ActionId a;
    StateId to;
    double p;
  };

  std::size_t n_;
  std::size_t m_;
  std::vector<Raw> raw_;
  std::vector<double> init_;
  std::map<std::string, StateSet> labels_;
};

inline constexpr double kStochasticTolerance = 1e-9;

/// Lists every violated structural invariant; an empty report means the MDP is well formed.
inline ValidationReport validate_mdp(const BasicMdp& mdp) {
  ValidationReport rep;
  const std::size_t n = mdp.state_count();
  const std::size_t m = mdp.action_count();
  for (std::size_t s = 0; s < n; ++s) {
    const auto sid = static_cast<StateId>(s);
    if (mdp.enabled(sid) == 0) rep.add("empty action set at state " + std::to_string(s));
    for (std::size_t a = 0; a < m; ++a) {
      const auto aid = static_cast<ActionId>(a);
      if (!mdp.is_enabled(sid, aid)) continue;
      double sum = 0.0;
      for (const Transition& t : mdp.row(sid, aid)) {
        if (t.to >= n)
          rep.add("dangling successor " + std::to_string(t.to) + " at (" + std::to_string(s) + "," +
                  std::to_string(a) + ")");
        if (!(t.prob >= 0.0 && t.prob <= 1.0))
          rep.add("probability " + std::to_string(t.prob) + " out of [0,1] at (" + std::to_string(s) + "," +
                  std::to_string(a) + ")");
        sum += t.prob;
      }
      if (std::abs(sum - 1.0) > kStochasticTolerance)
        rep.add("row sum " + std::to_string(sum) + " at (" + std::to_string(s) + "," + std::to_string(a) + ")");
    }
  }
  const auto& init = mdp.init();
  if (init.size() != n) {
    rep.add("init has " + std::to_string(init.size()) + " entries, expected " + std::to_string(n));
  } else {
    double sum = 0.0;
    for (std::size_t s = 0; s < n; ++s) {
      if (!(init[s] >= 0.0 && init[s] <= 1.0)) rep.add("init probability out of [0,1] at state " + std::to_string(s));
      sum += init[s];
    }
    if (std::abs(sum - 1.0) > kStochasticTolerance) rep.add("init sums to " + std::to_string(sum));
  }
  for (const auto& [name, set] : mdp.labels())
    if (set.size() != n) rep.add("label '" + name + "' has wrong size");
  return rep;
}

/// Deterministic memoryless policy. Membership in the enabled set is checked on construction.
class Policy {
 public:
  Policy() = default;

  template <class Model>
  Policy(const Model& model, std::vector<ActionId> actions) : actions_(std::move(actions)) {
    if (actions_.size() != model.state_count())
      throw std::invalid_argument("policy covers " + std::to_string(actions_.size()) + " states, model has " +
                                  std::to_string(model.state_count()));
    for (std::size_t s = 0; s < actions_.size(); ++s)
      if (!mask_has(model.enabled(static_cast<StateId>(s)), actions_[s]))
        throw std::invalid_argument("policy action " + std::to_string(actions_[s]) + " not enabled at state " +
                                    std::to_string(s));
  }

  ActionId operator()(StateId s) const { return actions_[s]; }
  std::size_t size() const { return actions_.size(); }
  std::span<const ActionId> actions() const { return actions_; }

 private:
  std::vector<ActionId> actions_;
};

/// Reach-avoid transform: goal and unsafe states become absorbing with a single self-loop
/// (their lowest enabled action). Maximal reachability of `target` on the result equals
/// the maximal probability of "not unsafe until goal" on the input.
struct ReachAvoidCast {
  BasicMdp mdp;
  StateSet target;
};

inline ReachAvoidCast cast_reach_avoid(const BasicMdp& mdp, const StateSet& unsafe, const StateSet& goal) {
  const std::size_t n = mdp.state_count();
  if (unsafe.size() != n || goal.size() != n) throw std::invalid_argument("label size mismatch");
  for (std::size_t s = 0; s < n; ++s)
    if (unsafe[s] && goal[s]) throw std::invalid_argument("inconsistent labels: state " + std::to_string(s) +
                                                          " is both unsafe and goal");
  MdpBuilder b(n, mdp.action_count());
  for (std::size_t s = 0; s < n; ++s) {
    const auto sid = static_cast<StateId>(s);
    if (unsafe[s] || goal[s]) {
      const ActionId a = mdp.enabled(sid) ? lowest_action(mdp.enabled(sid)) : 0;
      b.add(sid, a, sid, 1.0);
      continue;
    }
    for (std::size_t a = 0; a < mdp.action_count(); ++a) {
      const auto aid = static_cast<ActionId>(a);
      if (!mdp.is_enabled(sid, aid)) continue;
      for (const Transition& t : mdp.row(sid, aid)) b.add(sid, aid, t.to, t.prob);
    }
  }
  b.init(mdp.init());
  for (const auto& [name, set] : mdp.labels()) b.label(name, set);
  return {std::move(b).build(), goal};
}

/// E_{s ~ init}[values(s)].
inline double expected_initial_value(std::span<const double> values, std::span<const double> init) {
  if (values.size() != init.size()) throw std::invalid_argument("values/init size mismatch");
  double acc = 0.0;
  for (std::size_t s = 0; s < values.size(); ++s) acc += init[s] * values[s];
  return acc;
}

/// Sparse form of an initial distribution.
inline double expected_initial_value(std::span<const double> values,
                                     std::span<const std::pair<StateId, double>> init) {
  double acc = 0.0;
  for (const auto& [s, p] : init) acc += p * values[s];
  return acc;
}

}  // namespace dcshield
