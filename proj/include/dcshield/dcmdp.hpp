#pragma once

#include <algorithm>
#include <cstdint>
#include <limits>
#include <map>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "dcshield/delay_model.hpp"
#include "dcshield/mdp.hpp"
#include "dcshield/types.hpp"

namespace dcshield {

/// Information state of the delayed controller: last observed base state, the actions sent since
/// that observation (padded with placeholders to tau_max entries), and the current delay.
struct DcState {
  StateId base = 0;
  std::vector<ActionId> buffer;
  int delay = 0;

  friend bool operator==(const DcState&, const DcState&) = default;
};

enum class DelayKind { random, constant };

/// Sparse distribution over base states, sorted by state.
using SparseDist = std::vector<Transition>;

/// One step of a sparse distribution through the base kernel under action a.
inline SparseDist propagate(const BasicMdp& mdp, const SparseDist& dist, ActionId a) {
  SparseDist out;
  for (const Transition& d : dist)
    for (const Transition& t : mdp.row(d.to, a)) out.push_back({t.to, d.prob * t.prob});
  std::sort(out.begin(), out.end(), [](const Transition& x, const Transition& y) { return x.to < y.to; });
  SparseDist merged;
  for (const Transition& t : out) {
    if (!merged.empty() && merged.back().to == t.to) merged.back().prob += t.prob;
    else merged.push_back(t);
  }
  return merged;
}

/// Multi-step kernel P(. | s, a_0 ... a_k): the actions applied in order starting from s.
inline SparseDist multi_step_kernel(const BasicMdp& mdp, StateId s, std::span<const ActionId> actions) {
  SparseDist dist{{s, 1.0}};
  for (ActionId a : actions) dist = propagate(mdp, dist, a);
  return dist;
}

/// Delayed-communication MDP over a base MDP.
///
/// States are laid out densely. Random delay: blocks by delay tau = 0..top (top is the highest
/// delay reachable from 0), inside a block by base state, then by buffer code (oldest action most
/// significant). Constant delay: by base state, then buffer code over tau_max actions.
///
/// The Bellman backup is evaluated structurally: Q of every (state, action) pair is indexed by
/// (tau, s, buffer + a), and the multi-step kernels factor into repeated one-step applications
/// shared across all buffers with the same suffix. No transition matrix is stored.
class DcMdp {
 public:
  static constexpr std::size_t kMaxStates = std::size_t{1} << 31;

  static DcMdp random_delay(const BasicMdp& base, const DelayModel& delays) {
    const auto rep = validate(delays);
    if (!rep.ok()) throw std::invalid_argument("invalid delay model: " + rep.issues.front());
    DcMdp dc(base, DelayKind::random, delays.tau_max(), -1);
    dc.delays_ = delays;
    dc.top_ = delays.reachable_top();
    dc.finish();
    return dc;
  }

  static DcMdp constant_delay(const BasicMdp& base, int tau_max, ActionId safe_action) {
    if (tau_max < 0) throw std::invalid_argument("tau_max must be non-negative");
    if (safe_action < 0 || static_cast<std::size_t>(safe_action) >= base.action_count())
      throw std::invalid_argument("invalid idle action " + std::to_string(safe_action));
    for (std::size_t s = 0; s < base.state_count(); ++s)
      if (!base.is_enabled(static_cast<StateId>(s), safe_action))
        throw std::invalid_argument("invalid idle action " + std::to_string(safe_action) + ": not enabled at state " +
                                    std::to_string(s));
    DcMdp dc(base, DelayKind::constant, tau_max, safe_action);
    dc.top_ = tau_max;
    dc.finish();
    return dc;
  }

  DelayKind kind() const { return kind_; }
  int tau_max() const { return tau_max_; }
  /// Highest delay present in the state space (equals tau_max unless the channel cannot get there).
  int top_delay() const { return top_; }
  ActionId safe_action() const { return safe_action_; }
  const BasicMdp& base() const { return base_; }
  const DelayModel& delays() const { return delays_; }

  std::size_t state_count() const { return count_; }
  std::size_t action_count() const { return m_; }
  ActionMask enabled(StateId) const { return full_mask(m_); }

  bool has_label(const std::string& name) const { return labels_.contains(name); }
  const StateSet& label(const std::string& name) const {
    auto it = labels_.find(name);
    if (it == labels_.end()) throw std::out_of_range("no label '" + name + "'");
    return it->second;
  }
  const std::map<std::string, StateSet>& labels() const { return labels_; }
  const std::vector<double>& init() const { return init_; }

  /// Base state of index x (the observed state).
  StateId base_of(StateId x) const {
    if (kind_ == DelayKind::constant) return static_cast<StateId>(x / pow_[tau_max_]);
    const int t = delay_of(x);
    return static_cast<StateId>((x - offset_[t]) / pow_[t]);
  }

  int delay_of(StateId x) const {
    if (kind_ == DelayKind::constant) return tau_max_;
    const auto it = std::upper_bound(offset_.begin(), offset_.end(), static_cast<std::size_t>(x));
    return static_cast<int>(it - offset_.begin()) - 1;
  }

  StateId encode(const DcState& st) const {
    if (st.buffer.size() != static_cast<std::size_t>(tau_max_))
      throw std::invalid_argument("not enumerated: buffer must have tau_max entries");
    if (st.base >= n_) throw std::invalid_argument("not enumerated: base state out of range");
    const int len = kind_ == DelayKind::constant ? tau_max_ : st.delay;
    if (kind_ == DelayKind::constant && st.delay != tau_max_)
      throw std::invalid_argument("not enumerated: constant-delay states have delay tau_max");
    if (kind_ == DelayKind::random && (st.delay < 0 || st.delay > top_))
      throw std::invalid_argument("not enumerated: delay " + std::to_string(st.delay));
    std::size_t code = 0;
    for (int i = 0; i < tau_max_; ++i) {
      const ActionId a = st.buffer[static_cast<std::size_t>(i)];
      if (i < len) {
        if (a < 0 || static_cast<std::size_t>(a) >= m_)
          throw std::invalid_argument("not enumerated: buffer entry " + std::to_string(i) + " is not an action");
        code = code * m_ + static_cast<std::size_t>(a);
      } else if (a != kPlaceholder) {
        throw std::invalid_argument("not enumerated: buffer entry " + std::to_string(i) + " must be a placeholder");
      }
    }
    return slot(len, st.base, code);
  }

  DcState decode(StateId x) const {
    if (x >= count_) throw std::out_of_range("state index " + std::to_string(x) + " out of range");
    DcState st;
    st.delay = delay_of(x);
    const int len = kind_ == DelayKind::constant ? tau_max_ : st.delay;
    const std::size_t local = kind_ == DelayKind::constant ? x : x - offset_[st.delay];
    st.base = static_cast<StateId>(local / pow_[len]);
    std::size_t code = local % pow_[len];
    st.buffer.assign(static_cast<std::size_t>(tau_max_), kPlaceholder);
    for (int i = len - 1; i >= 0; --i) {
      st.buffer[static_cast<std::size_t>(i)] = static_cast<ActionId>(code % m_);
      code /= m_;
    }
    return st;
  }

  /// Explicit successor distribution of (x, a), computed by forward propagation of the base kernel.
  /// Sorted by successor; identical successors merged.
  std::vector<Transition> row(StateId x, ActionId a) const {
    if (x >= count_) throw std::out_of_range("state index out of range");
    if (a < 0 || static_cast<std::size_t>(a) >= m_) throw std::out_of_range("action out of range");
    const DcState st = decode(x);
    const int len = kind_ == DelayKind::constant ? tau_max_ : st.delay;
    std::vector<ActionId> w(st.buffer.begin(), st.buffer.begin() + len);
    w.push_back(a);
    std::vector<Transition> out;
    auto code_of = [&](std::size_t from) {
      std::size_t c = 0;
      for (std::size_t i = from; i < w.size(); ++i) c = c * m_ + static_cast<std::size_t>(w[i]);
      return c;
    };

    if (kind_ == DelayKind::constant) {
      const std::size_t c = code_of(1);
      for (const Transition& t : base_.row(st.base, w[0])) out.push_back({slot(tau_max_, t.to, c), t.prob});
    } else {
      const int tau = st.delay;
      if (tau < top_) {
        const double p = delays_(tau, tau + 1);
        if (p > 0.0) out.push_back({slot(tau + 1, st.base, code_of(0)), p});
      }
      SparseDist dist{{st.base, 1.0}};
      for (int k = 1; k <= tau + 1; ++k) {
        dist = propagate(base_, dist, w[static_cast<std::size_t>(k) - 1]);
        const int next_tau = tau + 1 - k;
        const double p = delays_(tau, next_tau);
        if (p <= 0.0) continue;
        const std::size_t c = code_of(static_cast<std::size_t>(k));
        for (const Transition& t : dist) out.push_back({slot(next_tau, t.to, c), p * t.prob});
      }
    }
    std::sort(out.begin(), out.end(), [](const Transition& x1, const Transition& y) { return x1.to < y.to; });
    std::vector<Transition> merged;
    for (const Transition& t : out) {
      if (!merged.empty() && merged.back().to == t.to) merged.back().prob += t.prob;
      else merged.push_back(t);
    }
    return merged;
  }

  struct Workspace {
    std::vector<double> a;
    std::vector<double> b;
  };

  Workspace make_workspace() const {
    Workspace ws;
    const std::size_t cap = n_ * pow_[static_cast<std::size_t>(top_) + 1];
    ws.a.resize(cap);
    ws.b.resize(cap);
    return ws;
  }

  void backup(std::span<const double> v, std::span<double> q, Workspace& ws) const {
    if (kind_ == DelayKind::constant) {
      apply({v.data(), count_}, tau_max_, q.data());
      return;
    }
    std::fill(q.begin(), q.end(), 0.0);
    // Case 1: the observation is delayed one step more; the buffer grows by the chosen action.
    for (int t = 0; t < top_; ++t) {
      const double p = delays_(t, t + 1);
      if (p <= 0.0) continue;
      double* dst = q.data() + offset_[t] * m_;
      const double* src = v.data() + offset_[t + 1];
      const std::size_t len = n_ * pow_[t + 1];
      for (std::size_t i = 0; i < len; ++i) dst[i] += p * src[i];
    }
    // Observation with delay t' after the first L actions of buffer + a were applied (L >= 1).
    for (int tp = 0; tp <= top_; ++tp) {
      int last_needed = -1;
      for (int L = 1; tp + L - 1 <= top_; ++L)
        if (delays_(tp + L - 1, tp) > 0.0) last_needed = L;
      if (last_needed < 0) continue;
      const double* cur = v.data() + offset_[tp];
      double* bufs[2] = {ws.a.data(), ws.b.data()};
      int flip = 0;
      for (int L = 1; L <= last_needed; ++L) {
        double* next = bufs[flip];
        apply({cur, n_ * pow_[tp + L - 1]}, tp + L - 1, next);
        const int t = tp + L - 1;
        const double p = delays_(t, tp);
        if (p > 0.0) {
          double* dst = q.data() + offset_[t] * m_;
          const std::size_t len = n_ * pow_[t + 1];
          for (std::size_t i = 0; i < len; ++i) dst[i] += p * next[i];
        }
        cur = next;
        flip ^= 1;
      }
    }
  }

  /// Delayed states a closed-loop run can be in, found by forward search over explicit rows.
  /// Seeds: every base state with the initial buffer and delay (all_bases) or only the support of Init.
  enum class Seeds { all_bases, init_support };

  StateSet reachable(Seeds seeds = Seeds::all_bases) const {
    StateSet seen(count_, 0);
    std::vector<StateId> queue;
    for (std::size_t s = 0; s < n_; ++s) {
      if (seeds == Seeds::init_support && !(base_.init()[s] > 0.0)) continue;
      const StateId x = initial_index(static_cast<StateId>(s));
      if (!seen[x]) {
        seen[x] = 1;
        queue.push_back(x);
      }
    }
    for (std::size_t head = 0; head < queue.size(); ++head) {
      const StateId x = queue[head];
      for (std::size_t a = 0; a < m_; ++a)
        for (const Transition& t : row(x, static_cast<ActionId>(a)))
          if (t.prob > 0.0 && !seen[t.to]) {
            seen[t.to] = 1;
            queue.push_back(t.to);
          }
    }
    return seen;
  }

  /// Index of the initial information state for base state s.
  StateId initial_index(StateId s) const {
    if (kind_ == DelayKind::random) return slot(0, s, 0);
    std::size_t code = 0;
    for (int i = 0; i < tau_max_; ++i) code = code * m_ + static_cast<std::size_t>(safe_action_);
    return slot(tau_max_, s, code);
  }

  /// Materializes every row (only sensible for small products).
  BasicMdp to_explicit() const {
    MdpBuilder b(count_, m_);
    for (std::size_t x = 0; x < count_; ++x)
      for (std::size_t a = 0; a < m_; ++a)
        for (const Transition& t : row(static_cast<StateId>(x), static_cast<ActionId>(a)))
          b.add(static_cast<StateId>(x), static_cast<ActionId>(a), t.to, t.prob);
    b.init(init_);
    for (const auto& [name, set] : labels_) b.label(name, set);
    return std::move(b).build();
  }

 private:
  DcMdp(const BasicMdp& base, DelayKind kind, int tau_max, ActionId safe_action)
      : base_(base),
        kind_(kind),
        tau_max_(tau_max),
        safe_action_(safe_action),
        n_(base.state_count()),
        m_(base.action_count()) {
    const auto rep = validate_mdp(base);
    if (!rep.ok()) throw std::invalid_argument("invalid base MDP: " + rep.issues.front());
    const ActionMask all = full_mask(m_);
    for (std::size_t s = 0; s < n_; ++s)
      if (base.enabled(static_cast<StateId>(s)) != all)
        throw std::invalid_argument("delayed construction needs every action enabled in every state; state " +
                                    std::to_string(s) + " lacks some");
  }

  void finish() {
    pow_.assign(static_cast<std::size_t>(top_) + 2, 1);
    for (std::size_t k = 1; k < pow_.size(); ++k) {
      if (pow_[k - 1] > kMaxStates / m_) throw std::length_error("delayed state space too large");
      pow_[k] = pow_[k - 1] * m_;
    }
    if (kind_ == DelayKind::constant) {
      offset_ = {0, n_ * pow_[top_]};
    } else {
      offset_.assign(static_cast<std::size_t>(top_) + 2, 0);
      for (int t = 0; t <= top_; ++t) offset_[t + 1] = offset_[t] + n_ * pow_[t];
    }
    count_ = offset_.back();
    if (count_ > kMaxStates || n_ * pow_[top_ + 1] > kMaxStates * 4)
      throw std::length_error("delayed state space too large");

    init_.assign(count_, 0.0);
    for (std::size_t s = 0; s < n_; ++s) init_[initial_index(static_cast<StateId>(s))] = base_.init()[s];
    for (const auto& [name, set] : base_.labels()) {
      StateSet lifted(count_, 0);
      for (std::size_t x = 0; x < count_; ++x) lifted[x] = set[base_of(static_cast<StateId>(x))];
      labels_[name] = std::move(lifted);
    }
  }

  StateId slot(int len, StateId s, std::size_t code) const {
    const std::size_t off = kind_ == DelayKind::constant ? 0 : offset_[len];
    return static_cast<StateId>(off + static_cast<std::size_t>(s) * pow_[len] + code);
  }

  /// next[s][a * m^len + r] = sum_{s1} P(s1 | s, a) cur[s1][r], r < m^len.
  void apply(std::span<const double> cur, int len, double* next) const {
    const std::size_t width = pow_[len];
    for (std::size_t s = 0; s < n_; ++s) {
      for (std::size_t a = 0; a < m_; ++a) {
        double* dst = next + s * width * m_ + a * width;
        std::fill(dst, dst + width, 0.0);
        for (const Transition& t : base_.row(static_cast<StateId>(s), static_cast<ActionId>(a))) {
          const double p = t.prob;
          const double* src = cur.data() + static_cast<std::size_t>(t.to) * width;
          for (std::size_t r = 0; r < width; ++r) dst[r] += p * src[r];
        }
      }
    }
  }

  BasicMdp base_;
  DelayModel delays_;
  DelayKind kind_;
  int tau_max_;
  int top_ = 0;
  ActionId safe_action_;
  std::size_t n_;
  std::size_t m_;
  std::vector<std::size_t> pow_;     // m^k, k = 0..top+1
  std::vector<std::size_t> offset_;  // block starts by delay (random) / {0, count} (constant)
  std::size_t count_ = 0;
  std::vector<double> init_;
  std::map<std::string, StateSet> labels_;
};

inline DcMdp build_random_delay(const BasicMdp& mdp, const DelayModel& delays) {
  return DcMdp::random_delay(mdp, delays);
}

inline DcMdp build_constant_delay(const BasicMdp& mdp, int tau_max, ActionId safe_action) {
  return DcMdp::constant_delay(mdp, tau_max, safe_action);
}

}  // namespace dcshield
