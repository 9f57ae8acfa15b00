#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <functional>
#include <istream>
#include <limits>
#include <optional>
#include <ostream>
#include <sstream>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "dcshield/mdp.hpp"
#include "dcshield/types.hpp"
#include "dcshield/value_iteration.hpp"

namespace dcshield {

enum class Fallback { safest, nearest };
enum class SynthesisMode { with_policy, policy_free };

inline const char* to_string(SynthesisMode m) { return m == SynthesisMode::with_policy ? "with-policy" : "policy-free"; }

/// Symmetric distance between actions, used to pick the replacement closest to a rejected request.
struct ActionMetric {
  std::size_t action_count = 0;
  std::vector<double> d;  // d[a * action_count + b]

  double operator()(ActionId a, ActionId b) const {
    return d[static_cast<std::size_t>(a) * action_count + static_cast<std::size_t>(b)];
  }
};

/// Per-state allowed action sets for a given epsilon, plus the safest action of each state.
class Shield {
 public:
  Shield() = default;

  Shield(double epsilon, std::vector<ActionMask> allowed, std::vector<ActionId> safest)
      : epsilon_(epsilon), allowed_(std::move(allowed)), safest_(std::move(safest)) {
    if (allowed_.size() != safest_.size()) throw std::invalid_argument("shield size mismatch");
    for (std::size_t s = 0; s < allowed_.size(); ++s)
      if (!mask_has(allowed_[s], safest_[s]))
        throw std::invalid_argument("shield: safest action not allowed at state " + std::to_string(s));
  }

  double epsilon() const { return epsilon_; }
  std::size_t state_count() const { return allowed_.size(); }
  ActionMask allowed(StateId s) const { return allowed_[s]; }
  ActionId safest(StateId s) const { return safest_[s]; }
  std::span<const ActionMask> masks() const { return allowed_; }
  std::span<const ActionId> safest_actions() const { return safest_; }

  struct Meta {
    std::string digest;
    double delta = std::numeric_limits<double>::quiet_NaN();
    double achieved = std::numeric_limits<double>::quiet_NaN();
    SynthesisMode mode = SynthesisMode::policy_free;
    SpecKind spec = SpecKind::safety;
    std::size_t action_count = 0;
  };
  Meta meta;

 private:
  double epsilon_ = 0.0;
  std::vector<ActionMask> allowed_;
  std::vector<ActionId> safest_;
};

/// Epsilon-shield over a model from its max-mode values.
///
/// Where Vmax(s) >= epsilon the allowed set is {a : Qmax(s,a) >= epsilon} (always containing the
/// safest action, which guards against rounding); elsewhere, and everywhere at epsilon = 1, it is
/// the safest action alone.
template <TransitionModel Model>
Shield build_shield(const Model& model, const ValueVector& vmax, const QTable& qmax, const Policy& safest,
                    double epsilon) {
  if (!(epsilon >= 0.0 && epsilon <= 1.0)) throw std::invalid_argument("epsilon must lie in [0,1]");
  const std::size_t n = model.state_count();
  if (vmax.size() != n || qmax.q.size() != n * model.action_count() || safest.size() != n)
    throw std::invalid_argument("shield inputs do not match the model");
  std::vector<ActionMask> allowed(n, 0);
  std::vector<ActionId> best(safest.actions().begin(), safest.actions().end());
  for (std::size_t s = 0; s < n; ++s) {
    const auto sid = static_cast<StateId>(s);
    ActionMask mask = mask_of(best[s]);
    if (epsilon < 1.0 && vmax[s] >= epsilon) {
      const auto row = qmax.row(sid);
      for (ActionMask rest = model.enabled(sid); rest; rest &= rest - 1) {
        const int a = std::countr_zero(rest);
        if (row[a] >= epsilon) mask |= mask_of(a);
      }
    }
    allowed[s] = mask;
  }
  Shield sh(epsilon, std::move(allowed), std::move(best));
  sh.meta.action_count = model.action_count();
  sh.meta.spec = vmax.spec;
  return sh;
}

template <TransitionModel Model>
Shield build_shield(const Model& model, const ValueVector& vmax, const QTable& qmax, double epsilon) {
  return build_shield(model, vmax, qmax, optimally_safe_policy(model, qmax), epsilon);
}

struct FilterResult {
  ActionId executed;
  bool overridden;
};

/// Runtime monitor: keep the request when allowed, otherwise substitute an allowed action.
inline FilterResult filter(const Shield& shield, StateId s, ActionId requested, Fallback fallback,
                           const ActionMetric* metric = nullptr) {
  const ActionMask allowed = shield.allowed(s);
  if (mask_has(allowed, requested)) return {requested, false};
  if (fallback == Fallback::safest) return {shield.safest(s), true};
  if (metric == nullptr) throw std::invalid_argument("nearest fallback needs an action metric");
  ActionId best = -1;
  double best_d = std::numeric_limits<double>::infinity();
  for (ActionMask rest = allowed; rest; rest &= rest - 1) {
    const auto a = static_cast<ActionId>(std::countr_zero(rest));
    const double d = (*metric)(requested, a);
    if (d < best_d) {
      best_d = d;
      best = a;
    }
  }
  return {best, true};
}

/// pi_eps(s) = filter(pi(s)) for every state.
inline std::vector<ActionId> modified_policy(const Shield& shield, std::span<const ActionId> policy,
                                             Fallback fallback, const ActionMetric* metric = nullptr) {
  if (policy.size() != shield.state_count()) throw std::invalid_argument("policy/shield size mismatch");
  std::vector<ActionId> out(policy.size());
  for (std::size_t s = 0; s < policy.size(); ++s)
    out[s] = filter(shield, static_cast<StateId>(s), policy[s], fallback, metric).executed;
  return out;
}

/// Vmin of the model restricted to the shield's allowed sets: a lower bound on the value of any
/// controller filtered by the shield.
template <TransitionModel Model>
ValueVector min_safety_under_shield(const Model& model, const Objective& obj, const Shield& shield,
                                    std::span<const double> warm_start = {}, const SolveOptions& opt = {}) {
  if (shield.state_count() != model.state_count()) throw std::invalid_argument("shield/model size mismatch");
  return compute_values(model, obj, Mode::min, {}, shield.masks(), warm_start, opt);
}

/// Sweep grid 0, eta, 2 eta, ..., ending exactly at 1.
inline std::vector<double> epsilon_grid(double eta) {
  if (!(eta > 0.0 && eta <= 1.0)) throw std::invalid_argument("eta must lie in (0,1]");
  std::vector<double> g;
  const auto steps = static_cast<std::size_t>(std::ceil(1.0 / eta - 1e-9));
  for (std::size_t k = 0; k <= steps; ++k) g.push_back(std::min(1.0, static_cast<double>(k) * eta));
  g.back() = 1.0;
  return g;
}

/// Max-mode quantities every synthesis run starts from.
struct SafetyAnalysis {
  Objective objective;
  ValueVector vmax;
  QTable qmax;
  Policy safest;
  double expected_vmax = 0.0;
};

template <TransitionModel Model>
SafetyAnalysis analyze(const Model& model, const Objective& obj, const SolveOptions& opt = {}) {
  SafetyAnalysis a;
  a.objective = obj;
  a.vmax = compute_values(model, obj, Mode::max, {}, {}, {}, opt);
  a.qmax = compute_q(model, a.vmax);
  a.safest = optimally_safe_policy(model, a.qmax, &a.objective);
  a.expected_vmax = expected_initial_value(a.vmax.values, model.init());
  return a;
}

struct SynthesisOptions {
  double delta = 0.95;
  double eta = 0.01;
  SynthesisMode mode = SynthesisMode::with_policy;
  Fallback fallback = Fallback::safest;
  const ActionMetric* metric = nullptr;
  /// Bisection after the sweep, down to this width; 0 disables.
  double refine = 0.0;
  SolveOptions solve;
  /// Called after every evaluated epsilon (progress reporting).
  std::function<void(double, double)> on_step;
};

struct SweepPoint {
  double epsilon;
  double achieved;
};

struct SynthesisResult {
  double epsilon_star = 0.0;
  Shield shield;
  double achieved = 0.0;
  double expected_vmax = 0.0;
  std::vector<SweepPoint> sweep_log;
  /// Values that certify `achieved` (V of the filtered controller, or the restricted Vmin).
  ValueVector certificate;
};

/// Slack for comparing a model-checked value against the target: two solver tolerances.
inline double pass_slack(const SolveOptions& opt) { return 2.0 * opt.tol; }

/// Smallest epsilon on the grid whose shield meets delta.
///
/// With a controller the criterion is E_Init[V^{pi_eps}] (the filtered controller evaluated
/// exactly); without one it is E_Init[Vmin] of the restricted model, which holds for any controller.
template <TransitionModel Model>
SynthesisResult synthesize(const Model& model, const SafetyAnalysis& an, const SynthesisOptions& opt,
                           std::span<const ActionId> policy = {}) {
  if ((opt.mode == SynthesisMode::with_policy) != !policy.empty())
    throw std::invalid_argument("a controller policy is required exactly in with-policy mode");
  if (!policy.empty()) (void)Policy(model, std::vector<ActionId>(policy.begin(), policy.end()));
  if (!(opt.delta >= 0.0 && opt.delta <= 1.0)) throw std::invalid_argument("delta must lie in [0,1]");
  if (opt.delta > an.expected_vmax + 1e-9) throw InfeasibleTargetError(opt.delta, an.expected_vmax);
  const std::vector<double> grid = epsilon_grid(opt.eta);
  const double slack = pass_slack(opt.solve);

  SynthesisResult res;
  res.expected_vmax = an.expected_vmax;
  std::vector<double> warm;
  const bool reach = an.objective.kind == SpecKind::reach_avoid;

  auto evaluate = [&](double eps, bool allow_warm) -> std::pair<Shield, ValueVector> {
    Shield sh = build_shield(model, an.vmax, an.qmax, an.safest, eps);
    const std::span<const double> start = allow_warm ? std::span<const double>(warm) : std::span<const double>{};
    ValueVector v;
    if (opt.mode == SynthesisMode::with_policy) {
      const auto pe = modified_policy(sh, policy, opt.fallback, opt.metric);
      v = compute_values(model, an.objective, Mode::policy, pe, {}, start, opt.solve);
    } else {
      v = min_safety_under_shield(model, an.objective, sh, start, opt.solve);
    }
    return {std::move(sh), std::move(v)};
  };
  // Policy evaluation has a unique fixed point, so any start is sound; for the restricted minimum
  // only starts below the solution are (reach-avoid values grow with epsilon, safety reach duals shrink).
  const bool warm_ok = opt.mode == SynthesisMode::with_policy || reach;

  std::optional<std::size_t> hit;
  for (std::size_t k = 0; k < grid.size(); ++k) {
    auto [sh, v] = evaluate(grid[k], warm_ok && !warm.empty());
    const double achieved = expected_initial_value(v.values, model.init());
    res.sweep_log.push_back({grid[k], achieved});
    if (opt.on_step) opt.on_step(grid[k], achieved);
    if (warm_ok) warm = v.values;
    if (achieved >= opt.delta - slack) {
      res.epsilon_star = grid[k];
      res.achieved = achieved;
      res.shield = std::move(sh);
      res.certificate = std::move(v);
      hit = k;
      break;
    }
  }
  if (!hit) throw std::logic_error("sweep ended without a passing epsilon despite a feasible target");

  if (opt.refine > 0.0 && *hit > 0) {
    double lo = grid[*hit - 1];
    double hi = grid[*hit];
    while (hi - lo > opt.refine) {
      const double mid = 0.5 * (lo + hi);
      auto [sh, v] = evaluate(mid, false);
      const double achieved = expected_initial_value(v.values, model.init());
      res.sweep_log.push_back({mid, achieved});
      if (achieved >= opt.delta - slack) {
        hi = mid;
        res.epsilon_star = mid;
        res.achieved = achieved;
        res.shield = std::move(sh);
        res.certificate = std::move(v);
      } else {
        lo = mid;
      }
    }
  }
  res.shield.meta.delta = opt.delta;
  res.shield.meta.achieved = res.achieved;
  res.shield.meta.mode = opt.mode;
  res.shield.meta.spec = an.objective.kind;
  return res;
}

/// E_Init[Vmin] of the restricted model at every grid point, solved so that consecutive values are
/// ordered: each solve starts from the neighbour whose solution lies below it.
template <TransitionModel Model>
std::vector<SweepPoint> lower_bound_profile(const Model& model, const SafetyAnalysis& an, std::span<const double> grid,
                                            const SolveOptions& opt = {},
                                            std::vector<Shield>* shields_out = nullptr) {
  std::vector<SweepPoint> out(grid.size());
  if (shields_out) shields_out->assign(grid.size(), Shield{});
  const bool reach = an.objective.kind == SpecKind::reach_avoid;
  std::vector<double> warm;
  for (std::size_t i = 0; i < grid.size(); ++i) {
    const std::size_t k = reach ? i : grid.size() - 1 - i;
    Shield sh = build_shield(model, an.vmax, an.qmax, an.safest, grid[k]);
    ValueVector v = min_safety_under_shield(model, an.objective, sh, warm, opt);
    out[k] = {grid[k], expected_initial_value(v.values, model.init())};
    warm = std::move(v.values);
    if (shields_out) (*shields_out)[k] = std::move(sh);
  }
  return out;
}

// Shield file:
//   shield 1
//   epsilon <e>  delta <d>  achieved <v>  mode <with-policy|policy-free>  spec <safety|reach-avoid>
//   digest <hex>
//   states <n> actions <m>
//   then n lines "<allowed mask, hex> <safest action>"

inline void write_shield(std::ostream& out, const Shield& sh) {
  auto num = [](double x) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", x);
    return std::string(buf);
  };
  out << "shield 1\n";
  out << "epsilon " << num(sh.epsilon()) << '\n';
  out << "delta " << num(sh.meta.delta) << '\n';
  out << "achieved " << num(sh.meta.achieved) << '\n';
  out << "mode " << to_string(sh.meta.mode) << '\n';
  out << "spec " << to_string(sh.meta.spec) << '\n';
  out << "digest " << (sh.meta.digest.empty() ? "-" : sh.meta.digest) << '\n';
  out << "states " << sh.state_count() << " actions " << sh.meta.action_count << '\n';
  char buf[40];
  for (std::size_t s = 0; s < sh.state_count(); ++s) {
    std::snprintf(buf, sizeof buf, "%llx %d\n", static_cast<unsigned long long>(sh.allowed(static_cast<StateId>(s))),
                  sh.safest(static_cast<StateId>(s)));
    out << buf;
  }
}

inline Shield read_shield(std::istream& in) {
  std::string line;
  std::size_t lineno = 0;
  auto next = [&]() {
    if (!std::getline(in, line)) throw ParseError(lineno + 1, "unexpected end of shield file");
    ++lineno;
  };
  auto field = [&](const char* key) {
    next();
    std::istringstream ls(line);
    std::string k, v;
    if (!(ls >> k >> v) || k != key) throw ParseError(lineno, std::string("expected '") + key + " <value>'");
    return v;
  };
  auto number = [&](const std::string& v) {
    try {
      return v == "nan" ? std::numeric_limits<double>::quiet_NaN() : std::stod(v);
    } catch (const std::logic_error&) {
      throw ParseError(lineno, "malformed number '" + v + "'");
    }
  };
  if (field("shield") != "1") throw ParseError(lineno, "unsupported shield version");
  const double eps = number(field("epsilon"));
  const double delta = number(field("delta"));
  const double achieved = number(field("achieved"));
  const std::string mode = field("mode");
  const std::string spec = field("spec");
  const std::string digest = field("digest");
  next();
  std::istringstream hs(line);
  std::string k1, k2;
  long long n = -1, m = -1;
  if (!(hs >> k1 >> n >> k2 >> m) || k1 != "states" || k2 != "actions" || n <= 0 || m <= 0 ||
      m > static_cast<long long>(kMaxActions))
    throw ParseError(lineno, "expected 'states <n> actions <m>'");
  if (mode != "with-policy" && mode != "policy-free") throw ParseError(lineno, "unknown mode '" + mode + "'");
  if (spec != "safety" && spec != "reach-avoid") throw ParseError(lineno, "unknown spec '" + spec + "'");
  std::vector<ActionMask> allowed(static_cast<std::size_t>(n));
  std::vector<ActionId> safest(static_cast<std::size_t>(n));
  const ActionMask full = full_mask(static_cast<std::size_t>(m));
  for (long long s = 0; s < n; ++s) {
    next();
    std::istringstream ls(line);
    std::string hex;
    long long best = -1;
    if (!(ls >> hex >> best)) throw ParseError(lineno, "expected '<mask> <safest>'");
    ActionMask mask = 0;
    try {
      std::size_t used = 0;
      mask = std::stoull(hex, &used, 16);
      if (used != hex.size()) throw std::invalid_argument(hex);
    } catch (const std::logic_error&) {
      throw ParseError(lineno, "malformed mask '" + hex + "'");
    }
    if (mask == 0 || (mask & ~full) != 0) throw ParseError(lineno, "allowed set empty or out of range");
    if (best < 0 || best >= m || !mask_has(mask, static_cast<ActionId>(best)))
      throw ParseError(lineno, "safest action not in allowed set");
    allowed[static_cast<std::size_t>(s)] = mask;
    safest[static_cast<std::size_t>(s)] = static_cast<ActionId>(best);
  }
  Shield sh(eps, std::move(allowed), std::move(safest));
  sh.meta.delta = delta;
  sh.meta.achieved = achieved;
  sh.meta.mode = mode == "with-policy" ? SynthesisMode::with_policy : SynthesisMode::policy_free;
  sh.meta.spec = spec == "safety" ? SpecKind::safety : SpecKind::reach_avoid;
  sh.meta.digest = digest == "-" ? "" : digest;
  sh.meta.action_count = static_cast<std::size_t>(m);
  return sh;
}

/// Refuses a shield that was synthesized for a different model.
inline void check_binding(const Shield& sh, const std::string& model_digest, std::size_t state_count) {
  if (sh.meta.digest != model_digest)
    throw ModelMismatchError("digest " + (sh.meta.digest.empty() ? std::string("(none)") : sh.meta.digest) +
                             " does not match model " + model_digest);
  if (sh.state_count() != state_count)
    throw ModelMismatchError("shield covers " + std::to_string(sh.state_count()) + " states, model has " +
                             std::to_string(state_count));
}

}  // namespace dcshield
