#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <deque>
#include <functional>
#include <istream>
#include <limits>
#include <optional>
#include <ostream>
#include <span>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include "json.hpp"

#include "dcshield/dcmdp.hpp"
#include "dcshield/digest.hpp"
#include "dcshield/envs/env_bundle.hpp"
#include "dcshield/rng.hpp"
#include "dcshield/shield.hpp"

namespace dcshield {

enum class Outcome { running, win, loss, draw, safe, violated };

inline const char* to_string(Outcome o) {
  switch (o) {
    case Outcome::running: return "running";
    case Outcome::win: return "win";
    case Outcome::loss: return "loss";
    case Outcome::draw: return "draw";
    case Outcome::safe: return "safe";
    case Outcome::violated: return "violated";
  }
  return "?";
}

/// Win (reach-avoid) or safe (safety): the episode satisfied the specification.
inline bool satisfied(Outcome o) { return o == Outcome::win || o == Outcome::safe; }

/// What the remote controller sees at a tick.
struct Observation {
  StateId observed = 0;          // base state tau ticks ago
  int delay = 0;
  std::vector<ActionId> buffer;  // actions sent since then, oldest first, tau_max entries with placeholders
  StateId dc_index = 0;          // index of this information state in the delayed product
};

struct StepRecord {
  int tick = 0;
  StateId true_state = 0;
  StateId observed = 0;
  int delay = 0;
  StateId dc_index = 0;
  ActionId requested = 0;
  ActionId executed = 0;
  bool overridden = false;
  StateId next_true_state = 0;
};

inline nlohmann::json to_json(const StepRecord& r) {
  return {{"tick", r.tick},         {"true_state", r.true_state}, {"observed", r.observed},
          {"delay", r.delay},       {"dc_index", r.dc_index},     {"requested", r.requested},
          {"executed", r.executed}, {"overridden", r.overridden}, {"next_true_state", r.next_true_state}};
}

inline constexpr std::uint32_t kEnvStream = 0;
inline constexpr std::uint32_t kChannelStream = 1;

/// Ground truth plus delayed channel for one episode; advanced one decision at a time.
///
/// The true trajectory s_0, s_1, ... evolves under the executed actions. With delay tau_t the
/// controller sees s_{t - tau_t} and the actions executed since. Random delay: tau_0 = 0 and
/// tau_{t+1} ~ P(. | tau_t) after each step. Constant delay T: the first T steps execute the idle
/// action before the controller acts, and the view always lags T steps.
class EpisodeRunner {
 public:
  EpisodeRunner(const envs::EnvBundle& env, const DcMdp& dc, const Shield* shield, Fallback fallback,
                std::uint64_t seed)
      : env_(env), dc_(dc), shield_(shield), fallback_(fallback), env_rng_(seed, kEnvStream),
        channel_rng_(seed, kChannelStream) {
    if (dc.base().state_count() != env.mdp.state_count() || dc.action_count() != env.mdp.action_count())
      throw ModelMismatchError("delayed product was not built from this environment");
    if (shield != nullptr && shield->state_count() != dc.state_count())
      throw ModelMismatchError("shield covers " + std::to_string(shield->state_count()) + " states, product has " +
                               std::to_string(dc.state_count()));
    const auto& init = env.mdp.init();
    states_.push_back(static_cast<StateId>(env_rng_.categorical(std::span<const double>(init))));
    if (dc.kind() == DelayKind::constant) {
      delay_ = dc.tau_max();
      for (int i = 0; i < dc.tau_max() && !absorbing(states_.back()); ++i) advance(dc.safe_action());
      // Pad so the view stays (s_0, idle^T) if the warmup stopped early in an absorbing state.
      while (static_cast<int>(actions_.size()) < dc.tau_max()) {
        actions_.push_back(dc.safe_action());
        states_.push_back(states_.back());
      }
    }
    min_separation_ = env.separation(true_state());
    settle();
  }

  bool done() const { return outcome_ != Outcome::running; }
  Outcome outcome() const { return outcome_; }
  int tick() const { return tick_; }
  StateId true_state() const { return states_.back(); }
  const std::vector<StepRecord>& records() const { return records_; }
  void keep_records(bool on) { keep_ = on; }

  Observation observation() const {
    Observation o;
    o.delay = delay_;
    const std::size_t lag = static_cast<std::size_t>(delay_);
    o.observed = states_[states_.size() - 1 - lag];
    o.buffer.assign(static_cast<std::size_t>(dc_.tau_max()), kPlaceholder);
    for (std::size_t i = 0; i < lag; ++i) o.buffer[i] = actions_[actions_.size() - lag + i];
    o.dc_index = dc_.encode({o.observed, o.buffer, o.delay});
    return o;
  }

  ActionMask allowed(const Observation& o) const {
    return shield_ != nullptr ? shield_->allowed(o.dc_index) : dc_.enabled(o.dc_index);
  }

  /// Filters the request through the shield and advances truth and channel by one tick.
  StepRecord step(ActionId requested) {
    if (done()) throw std::logic_error("episode already finished");
    if (requested < 0 || static_cast<std::size_t>(requested) >= dc_.action_count())
      throw std::invalid_argument("action " + std::to_string(requested) + " not available");
    const Observation o = observation();
    StepRecord r;
    r.tick = tick_;
    r.true_state = true_state();
    r.observed = o.observed;
    r.delay = o.delay;
    r.dc_index = o.dc_index;
    r.requested = requested;
    r.executed = requested;
    if (shield_ != nullptr) {
      const FilterResult f = filter(*shield_, o.dc_index, requested, fallback_, &env_.metric);
      r.executed = f.executed;
      r.overridden = f.overridden;
    }
    advance(r.executed);
    if (dc_.kind() == DelayKind::random) {
      const auto row = dc_.delays().row(delay_);
      delay_ = static_cast<int>(channel_rng_.categorical(std::span<const double>(row)));
    }
    ++tick_;
    r.next_true_state = true_state();
    if (r.overridden) ++interventions_;
    separation_sum_ += env_.separation(r.next_true_state);
    min_separation_ = std::min(min_separation_, env_.separation(r.next_true_state));
    if (keep_) records_.push_back(r);
    settle();
    if (!done() && horizon_ > 0 && tick_ >= horizon_) outcome_ = env_.spec == SpecKind::safety ? Outcome::safe : Outcome::draw;
    return r;
  }

  void set_horizon(int h) { horizon_ = h; }
  int interventions() const { return interventions_; }
  double min_separation() const { return min_separation_; }
  double mean_separation() const { return tick_ > 0 ? separation_sum_ / tick_ : env_.separation(true_state()); }

 private:
  bool absorbing(StateId s) const {
    if (env_.mdp.has_label("unsafe") && env_.mdp.label("unsafe")[s]) return true;
    return env_.mdp.has_label("goal") && env_.mdp.label("goal")[s];
  }

  void advance(ActionId a) {
    const StateId s = states_.back();
    const auto row = env_.mdp.row(s, a);
    const std::size_t k = env_rng_.categorical(row, [](const Transition& t) { return t.prob; });
    states_.push_back(row[k].to);
    actions_.push_back(a);
    const std::size_t keep = static_cast<std::size_t>(dc_.tau_max()) + 1;
    while (states_.size() > keep) states_.pop_front();
    while (actions_.size() > keep) actions_.pop_front();
  }

  void settle() {
    const StateId s = true_state();
    if (env_.mdp.has_label("unsafe") && env_.mdp.label("unsafe")[s]) {
      outcome_ = env_.spec == SpecKind::safety ? Outcome::violated : Outcome::loss;
    } else if (env_.spec == SpecKind::reach_avoid && env_.mdp.has_label("goal") && env_.mdp.label("goal")[s]) {
      outcome_ = Outcome::win;
    }
  }

  const envs::EnvBundle& env_;
  const DcMdp& dc_;
  const Shield* shield_;
  Fallback fallback_;
  RandomStream env_rng_;
  RandomStream channel_rng_;
  std::deque<StateId> states_;
  std::deque<ActionId> actions_;
  int delay_ = 0;
  int tick_ = 0;
  int horizon_ = 0;
  Outcome outcome_ = Outcome::running;
  bool keep_ = false;
  std::vector<StepRecord> records_;
  int interventions_ = 0;
  double separation_sum_ = 0.0;
  double min_separation_ = std::numeric_limits<double>::infinity();
};

/// Chooses the requested action from the delayed view.
using Controller = std::function<ActionId(const Observation&)>;

/// The delay-unaware task controller: acts on the observed base state as if it were current.
inline Controller base_controller(const Policy& policy) {
  return [&policy](const Observation& o) { return policy(o.observed); };
}

struct EpisodeResult {
  Outcome outcome = Outcome::running;
  int steps = 0;
  std::vector<StepRecord> records;
  int interventions = 0;
  double min_separation = 0.0;
  double mean_separation = 0.0;
};

struct EpisodeOptions {
  int horizon = 0;  // 0 = the environment's episode length
  Fallback fallback = Fallback::safest;
  bool keep_records = true;
  /// Receives each record as it happens (streamed logs).
  std::function<void(const StepRecord&)> on_step;
};

inline EpisodeResult run_episode(const envs::EnvBundle& env, const DcMdp& dc, const Controller& controller,
                                 const Shield* shield, std::uint64_t seed, const EpisodeOptions& opt = {}) {
  EpisodeRunner run(env, dc, shield, opt.fallback, seed);
  run.set_horizon(opt.horizon > 0 ? opt.horizon : env.horizon);
  run.keep_records(opt.keep_records);
  if (!run.done() && (opt.horizon > 0 ? opt.horizon : env.horizon) <= 0)
    throw std::invalid_argument("horizon must be positive");
  while (!run.done()) {
    const StepRecord r = run.step(controller(run.observation()));
    if (opt.on_step) opt.on_step(r);
  }
  EpisodeResult res;
  res.outcome = run.outcome();
  res.steps = run.tick();
  res.records = run.records();
  res.interventions = run.interventions();
  res.min_separation = run.min_separation();
  res.mean_separation = run.mean_separation();
  return res;
}

/// Wilson score interval for a binomial proportion.
struct Interval {
  double lo = 0.0;
  double hi = 1.0;
};

inline Interval wilson_interval(std::size_t successes, std::size_t n, double z = 1.959963984540054) {
  if (n == 0) return {0.0, 1.0};
  const double nn = static_cast<double>(n);
  const double p = static_cast<double>(successes) / nn;
  const double z2 = z * z;
  const double den = 1.0 + z2 / nn;
  const double centre = (p + z2 / (2.0 * nn)) / den;
  const double half = z * std::sqrt(p * (1.0 - p) / nn + z2 / (4.0 * nn * nn)) / den;
  return {std::max(0.0, centre - half), std::min(1.0, centre + half)};
}

struct MeanStd {
  double mean = 0.0;
  double stddev = 0.0;
  double sum = 0.0;
  double sum_sq = 0.0;
  std::size_t n = 0;

  void add(double x) {
    sum += x;
    sum_sq += x * x;
    ++n;
    mean = sum / static_cast<double>(n);
    stddev = n > 1 ? std::sqrt(std::max(0.0, (sum_sq - sum * sum / static_cast<double>(n)) / static_cast<double>(n - 1)))
                   : 0.0;
  }

  /// 95% normal interval of the mean.
  Interval ci95() const {
    const double h = n > 0 ? 1.959963984540054 * stddev / std::sqrt(static_cast<double>(n)) : 0.0;
    return {mean - h, mean + h};
  }
};

struct AggregateReport {
  std::size_t episodes = 0;
  std::size_t wins = 0, losses = 0, draws = 0, safe = 0, violated = 0;
  std::size_t satisfied = 0;
  double satisfaction_rate = 0.0;
  Interval satisfaction_ci;
  MeanStd steps, interventions, min_separation, mean_separation;

  void add(const EpisodeResult& r) {
    ++episodes;
    switch (r.outcome) {
      case Outcome::win: ++wins; break;
      case Outcome::loss: ++losses; break;
      case Outcome::draw: ++draws; break;
      case Outcome::safe: ++safe; break;
      case Outcome::violated: ++violated; break;
      case Outcome::running: break;
    }
    if (dcshield::satisfied(r.outcome)) ++satisfied;
    steps.add(r.steps);
    interventions.add(r.interventions);
    min_separation.add(r.min_separation);
    mean_separation.add(r.mean_separation);
    satisfaction_rate = static_cast<double>(satisfied) / static_cast<double>(episodes);
    satisfaction_ci = wilson_interval(satisfied, episodes);
  }
};

inline nlohmann::json to_json(const MeanStd& m) { return {{"mean", m.mean}, {"stddev", m.stddev}}; }

inline nlohmann::json to_json(const AggregateReport& a) {
  return {{"episodes", a.episodes},
          {"win", a.wins},
          {"loss", a.losses},
          {"draw", a.draws},
          {"safe", a.safe},
          {"violated", a.violated},
          {"satisfied", a.satisfied},
          {"satisfaction_rate", a.satisfaction_rate},
          {"satisfaction_ci95", {a.satisfaction_ci.lo, a.satisfaction_ci.hi}},
          {"steps", to_json(a.steps)},
          {"interventions", to_json(a.interventions)},
          {"min_separation", to_json(a.min_separation)},
          {"mean_separation", to_json(a.mean_separation)}};
}

/// Worker count from DCSHIELD_WORKERS (default 1).
inline unsigned worker_count() {
  if (const char* w = std::getenv("DCSHIELD_WORKERS")) {
    const long v = std::strtol(w, nullptr, 10);
    if (v >= 1) return static_cast<unsigned>(std::min<long>(v, 256));
  }
  return 1;
}

/// n episodes with seeds seed_base + i. Results are folded in index order, so the report does not
/// depend on the number of workers.
inline AggregateReport run_batch(const envs::EnvBundle& env, const DcMdp& dc, const Controller& controller,
                                 const Shield* shield, std::size_t n, std::uint64_t seed_base, EpisodeOptions opt = {},
                                 unsigned workers = 1,
                                 const std::function<void(std::size_t, const EpisodeResult&)>& on_episode = {}) {
  if (n == 0) throw std::invalid_argument("batch needs at least one episode");
  opt.keep_records = opt.keep_records && static_cast<bool>(on_episode);
  opt.on_step = nullptr;
  std::vector<EpisodeResult> results(n);
  auto work = [&](std::size_t begin, std::size_t stride) {
    for (std::size_t i = begin; i < n; i += stride) results[i] = run_episode(env, dc, controller, shield, seed_base + i, opt);
  };
  workers = std::max(1u, std::min<unsigned>(workers, static_cast<unsigned>(n)));
  if (workers == 1) {
    work(0, 1);
  } else {
    std::vector<std::thread> pool;
    for (unsigned w = 0; w < workers; ++w) pool.emplace_back(work, w, workers);
    for (auto& t : pool) t.join();
  }
  AggregateReport rep;
  for (std::size_t i = 0; i < n; ++i) {
    rep.add(results[i]);
    if (on_episode) on_episode(i, results[i]);
  }
  return rep;
}

// Trajectory log: JSON lines, append-only.
//   {"kind":"step","episode":i, <StepRecord fields>}
//   {"kind":"episode","episode":i,"seed":s,"outcome":o,"steps":n,"interventions":k,"min_separation":x,"mean_separation":y}
//   {"kind":"summary", <AggregateReport fields>}

inline nlohmann::json step_line(std::size_t episode, const StepRecord& r) {
  nlohmann::json j = to_json(r);
  j["kind"] = "step";
  j["episode"] = episode;
  return j;
}

inline nlohmann::json episode_line(std::size_t episode, std::uint64_t seed, const EpisodeResult& r) {
  return {{"kind", "episode"},         {"episode", episode},
          {"seed", seed},              {"outcome", to_string(r.outcome)},
          {"steps", r.steps},          {"interventions", r.interventions},
          {"min_separation", r.min_separation}, {"mean_separation", r.mean_separation}};
}

inline Outcome outcome_from_string(const std::string& s) {
  for (Outcome o : {Outcome::running, Outcome::win, Outcome::loss, Outcome::draw, Outcome::safe, Outcome::violated})
    if (s == to_string(o)) return o;
  throw std::invalid_argument("unknown outcome '" + s + "'");
}

/// Folds the episode records of a log, in file order.
inline AggregateReport aggregate_log(std::istream& in) {
  AggregateReport rep;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(lineno, e.what());
    }
    if (j.value("kind", "") != "episode") continue;
    EpisodeResult r;
    r.outcome = outcome_from_string(j.at("outcome").get<std::string>());
    r.steps = j.at("steps").get<int>();
    r.interventions = j.at("interventions").get<int>();
    r.min_separation = j.at("min_separation").get<double>();
    r.mean_separation = j.at("mean_separation").get<double>();
    rep.add(r);
  }
  return rep;
}

/// Policy on the delayed product that applies the base controller to the observed state.
inline std::vector<ActionId> lift_policy(const DcMdp& dc, const Policy& base_policy) {
  std::vector<ActionId> out(dc.state_count());
  for (std::size_t x = 0; x < out.size(); ++x) out[x] = base_policy(dc.base_of(static_cast<StateId>(x)));
  return out;
}

}  // namespace dcshield
