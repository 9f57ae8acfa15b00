#pragma once

#include <chrono>
#include <cstdint>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

#include "dcshield/dcmdp.hpp"
#include "dcshield/digest.hpp"
#include "dcshield/envs/env_bundle.hpp"
#include "dcshield/shield.hpp"
#include "dcshield/sim.hpp"

namespace dcshield::teleop {

// Wire protocol, version 1. Every message is one JSON object with "v": 1 and "type".
//
// client -> server
//   create  {shield, mode: "turn-based"|"ticked", period_ms?, seed?}
//   act     {session, action}
//   list    {}
// server -> client
//   created    {session, env, shield, mode, period_ms, delay_kind, tau_max, action_names, safe_action, frame}
//   frame      {session, tick, observed, delay, buffer, allowed, q_max, requested, executed, overridden, status}
//   terminated {session, outcome, ticks, seed, transcript}
//   listing    {envs, shields}
//   error      {code, message, session?}
//
// Frames carry only the delayed view; true states appear in the transcript after termination.

inline constexpr int kProtocolVersion = 1;

/// Protocol-level failure, reported to the client as an `error` message.
class ProtocolError : public std::runtime_error {
 public:
  ProtocolError(std::string code, const std::string& message) : std::runtime_error(message), code_(std::move(code)) {}
  const std::string& code() const { return code_; }

 private:
  std::string code_;
};

/// A shield together with everything needed to run sessions against it.
struct CatalogEntry {
  std::string id;
  std::shared_ptr<const envs::EnvBundle> env;
  std::shared_ptr<const DcMdp> dc;
  std::shared_ptr<const Shield> shield;
  std::shared_ptr<const QTable> qmax;
  std::string digest;
};

/// Binds a shield to its environment and channel; refuses mismatched or controller-specific shields.
inline CatalogEntry make_entry(std::string id, std::shared_ptr<const envs::EnvBundle> env,
                               std::shared_ptr<const DcMdp> dc, std::shared_ptr<const Shield> shield,
                               const SolveOptions& opt = {}) {
  CatalogEntry e;
  e.id = std::move(id);
  e.digest = model_digest(*dc);
  check_binding(*shield, e.digest, dc->state_count());
  if (shield->meta.mode != SynthesisMode::policy_free)
    throw ProtocolError("not-policy-free", "shield '" + e.id +
                                               "' was synthesized for a specific controller; operator sessions need "
                                               "a policy-free shield");
  if (!(shield->meta.achieved >= shield->meta.delta - pass_slack(opt)))
    throw ProtocolError("no-guarantee", "shield '" + e.id + "' does not certify its target");
  const Objective obj = make_objective(*dc, env->spec);
  auto vmax = compute_values(*dc, obj, Mode::max, {}, {}, {}, opt);
  e.qmax = std::make_shared<const QTable>(compute_q(*dc, vmax));
  e.env = std::move(env);
  e.dc = std::move(dc);
  e.shield = std::move(shield);
  return e;
}

enum class TickMode { turn_based, ticked };

inline constexpr int kDefaultPeriodMs = 500;

/// One operator session: authoritative truth, channel, and shield filtering (nearest fallback).
class Session {
 public:
  Session(std::string id, const CatalogEntry& entry, TickMode mode, int period_ms, std::uint64_t seed)
      : id_(std::move(id)), entry_(entry), mode_(mode), period_ms_(period_ms), seed_(seed),
        runner_(*entry.env, *entry.dc, entry.shield.get(), Fallback::nearest, seed) {
    runner_.keep_records(true);
    runner_.set_horizon(entry.env->horizon);
  }

  const std::string& id() const { return id_; }
  const CatalogEntry& entry() const { return entry_; }
  TickMode mode() const { return mode_; }
  int period_ms() const { return period_ms_; }
  std::uint64_t seed() const { return seed_; }
  bool done() const { return runner_.done(); }
  Outcome outcome() const { return runner_.outcome(); }
  const std::vector<StepRecord>& transcript() const { return runner_.records(); }

  /// Applies an operator request; rejects actions outside the observed state's action set without advancing.
  nlohmann::json act(ActionId requested) {
    std::lock_guard<std::mutex> lock(mu_);
    if (runner_.done()) throw ProtocolError("terminated", "session " + id_ + " has ended");
    const Observation o = runner_.observation();
    const ActionMask enabled = entry_.dc->enabled(o.dc_index);
    if (requested < 0 || static_cast<std::size_t>(requested) >= entry_.dc->action_count() ||
        !mask_has(enabled, requested))
      throw ProtocolError("bad-action", "action " + std::to_string(requested) + " is not available");
    const StepRecord r = runner_.step(requested);
    return frame(&r);
  }

  /// Ticked mode: the deadline passed without a request, so the idle action is requested.
  nlohmann::json expire() { return act(entry_.env->safe_action); }

  /// Current view without advancing (sent with `created`).
  nlohmann::json frame(const StepRecord* last = nullptr) const {
    const Observation o = runner_.observation();
    const ActionMask allowed = entry_.shield->allowed(o.dc_index);
    nlohmann::json allowed_list = nlohmann::json::array();
    for (ActionMask rest = allowed; rest; rest &= rest - 1) allowed_list.push_back(std::countr_zero(rest));
    const auto qrow = entry_.qmax->row(o.dc_index);
    nlohmann::json f{{"v", kProtocolVersion},
                     {"type", "frame"},
                     {"session", id_},
                     {"tick", runner_.tick()},
                     {"observed", {{"state", o.observed}, {"view", entry_.env->describe(o.observed)}}},
                     {"delay", o.delay},
                     {"buffer", o.buffer},
                     {"allowed", allowed_list},
                     {"q_max", std::vector<double>(qrow.begin(), qrow.end())},
                     {"status", runner_.done() ? to_string(runner_.outcome()) : "live"}};
    if (last != nullptr) {
      f["requested"] = last->requested;
      f["executed"] = last->executed;
      f["overridden"] = last->overridden;
    } else {
      f["requested"] = nullptr;
      f["executed"] = nullptr;
      f["overridden"] = false;
    }
    return f;
  }

  nlohmann::json terminated() const {
    nlohmann::json tr = nlohmann::json::array();
    for (const auto& r : runner_.records()) tr.push_back(to_json(r));
    return {{"v", kProtocolVersion},        {"type", "terminated"},   {"session", id_},
            {"outcome", to_string(outcome())}, {"ticks", runner_.tick()}, {"seed", seed_},
            {"transcript", tr}};
  }

 private:
  std::string id_;
  const CatalogEntry& entry_;
  TickMode mode_;
  int period_ms_;
  std::uint64_t seed_;
  EpisodeRunner runner_;
  mutable std::mutex mu_;
};

inline nlohmann::json error_message(const std::string& code, const std::string& message,
                                    const std::optional<std::string>& session = std::nullopt) {
  nlohmann::json e{{"v", kProtocolVersion}, {"type", "error"}, {"code", code}, {"message", message}};
  if (session) e["session"] = *session;
  return e;
}

/// Catalog plus live sessions; transport-independent message handling.
class Service {
 public:
  void add(CatalogEntry entry) {
    std::lock_guard<std::mutex> lock(mu_);
    const std::string id = entry.id;
    if (catalog_.contains(id)) throw std::invalid_argument("duplicate shield id '" + id + "'");
    catalog_.emplace(id, std::make_unique<CatalogEntry>(std::move(entry)));
  }

  nlohmann::json listing() const {
    std::lock_guard<std::mutex> lock(mu_);
    nlohmann::json envs_j = nlohmann::json::object();
    nlohmann::json shields = nlohmann::json::array();
    for (const auto& [id, e] : catalog_) {
      if (!envs_j.contains(e->env->name))
        envs_j[e->env->name] = {{"spec", to_string(e->env->spec)},
                                {"action_names", e->env->action_names},
                                {"safe_action", e->env->safe_action},
                                {"horizon", e->env->horizon},
                                {"base_digest", sha256_hex(mdp_text(e->env->mdp))}};
      shields.push_back({{"id", id},
                         {"env", e->env->name},
                         {"digest", e->digest},
                         {"delay_kind", e->dc->kind() == DelayKind::random ? "random" : "constant"},
                         {"tau_max", e->dc->tau_max()},
                         {"epsilon", e->shield->epsilon()},
                         {"delta", e->shield->meta.delta},
                         {"achieved", e->shield->meta.achieved},
                         {"states", e->dc->state_count()}});
    }
    return {{"v", kProtocolVersion}, {"type", "listing"}, {"envs", envs_j}, {"shields", shields}};
  }

  /// Handles one client message; returns the replies in order (a step that ends the session is
  /// followed by `terminated`).
  std::vector<nlohmann::json> handle(const nlohmann::json& msg) {
    std::optional<std::string> sid;
    try {
      if (!msg.is_object()) throw ProtocolError("malformed", "message must be a JSON object");
      if (msg.value("v", -1) != kProtocolVersion)
        throw ProtocolError("version", "protocol version " + std::to_string(kProtocolVersion) + " required");
      const std::string type = msg.value("type", "");
      if (msg.contains("session") && msg["session"].is_string()) sid = msg["session"].get<std::string>();
      if (type == "list") return {listing()};
      if (type == "create") return create(msg);
      if (type == "act") {
        if (!msg.contains("action") || !msg["action"].is_number_integer())
          throw ProtocolError("malformed", "act needs an integer 'action'");
        auto s = find(sid);
        const auto action = msg["action"].get<long long>();
        if (action < 0 || action >= static_cast<long long>(kMaxActions))
          throw ProtocolError("bad-action", "action " + std::to_string(action) + " is not available");
        std::vector<nlohmann::json> out{s->act(static_cast<ActionId>(action))};
        finish_if_done(s, out);
        return out;
      }
      throw ProtocolError("unknown-type", "unknown message type '" + type + "'");
    } catch (const ProtocolError& e) {
      return {error_message(e.code(), e.what(), sid)};
    } catch (const nlohmann::json::exception& e) {
      return {error_message("malformed", e.what(), sid)};
    }
  }

  /// Ticked sessions whose deadline passed advance with the idle action.
  std::vector<nlohmann::json> expire(const std::string& session) {
    std::optional<std::string> sid = session;
    try {
      auto s = find(sid);
      if (s->mode() != TickMode::ticked) throw ProtocolError("not-ticked", "session is turn-based");
      std::vector<nlohmann::json> out{s->expire()};
      finish_if_done(s, out);
      return out;
    } catch (const ProtocolError& e) {
      return {error_message(e.code(), e.what(), sid)};
    }
  }

  std::shared_ptr<Session> session(const std::string& id) const {
    std::lock_guard<std::mutex> lock(mu_);
    auto it = sessions_.find(id);
    return it == sessions_.end() ? nullptr : it->second;
  }

  /// Transcripts of ended sessions, kept for inspection.
  std::vector<nlohmann::json> finished() const {
    std::lock_guard<std::mutex> lock(mu_);
    return finished_;
  }

  void drop(const std::string& id) {
    std::lock_guard<std::mutex> lock(mu_);
    sessions_.erase(id);
  }

 private:
  std::vector<nlohmann::json> create(const nlohmann::json& msg) {
    const std::string shield_id = msg.value("shield", "");
    std::lock_guard<std::mutex> lock(mu_);
    auto it = catalog_.find(shield_id);
    if (it == catalog_.end()) throw ProtocolError("unknown-shield", "unknown shield '" + shield_id + "'");
    const CatalogEntry& entry = *it->second;
    const std::string mode_s = msg.value("mode", "turn-based");
    TickMode mode;
    if (mode_s == "turn-based") mode = TickMode::turn_based;
    else if (mode_s == "ticked") mode = TickMode::ticked;
    else throw ProtocolError("malformed", "mode must be turn-based or ticked");
    const int period = msg.value("period_ms", kDefaultPeriodMs);
    if (period <= 0) throw ProtocolError("malformed", "period_ms must be positive");
    const std::uint64_t seed = msg.contains("seed") ? msg["seed"].get<std::uint64_t>() : next_seed_++;
    const std::string id = "s" + std::to_string(++counter_);
    auto s = std::make_shared<Session>(id, entry, mode, period, seed);
    sessions_.emplace(id, s);
    nlohmann::json created{{"v", kProtocolVersion},
                           {"type", "created"},
                           {"session", id},
                           {"env", entry.env->name},
                           {"shield", entry.id},
                           {"digest", entry.digest},
                           {"mode", mode_s},
                           {"period_ms", period},
                           {"seed", seed},
                           {"delay_kind", entry.dc->kind() == DelayKind::random ? "random" : "constant"},
                           {"tau_max", entry.dc->tau_max()},
                           {"action_names", entry.env->action_names},
                           {"safe_action", entry.env->safe_action},
                           {"frame", s->frame()}};
    std::vector<nlohmann::json> out{created};
    if (s->done()) {
      out.push_back(s->terminated());
      finished_.push_back(out.back());
      sessions_.erase(id);
    }
    return out;
  }

  std::shared_ptr<Session> find(const std::optional<std::string>& sid) {
    if (!sid) throw ProtocolError("malformed", "message needs a 'session'");
    auto s = session(*sid);
    if (!s) throw ProtocolError("unknown-session", "unknown session '" + *sid + "'");
    return s;
  }

  void finish_if_done(const std::shared_ptr<Session>& s, std::vector<nlohmann::json>& out) {
    if (!s->done()) return;
    out.push_back(s->terminated());
    std::lock_guard<std::mutex> lock(mu_);
    finished_.push_back(out.back());
    sessions_.erase(s->id());
  }

  mutable std::mutex mu_;
  std::map<std::string, std::unique_ptr<CatalogEntry>> catalog_;
  std::map<std::string, std::shared_ptr<Session>> sessions_;
  std::vector<nlohmann::json> finished_;
  std::uint64_t counter_ = 0;
  std::uint64_t next_seed_ = 1;
};

}  // namespace dcshield::teleop
