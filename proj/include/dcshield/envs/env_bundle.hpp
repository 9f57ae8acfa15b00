#pragma once

#include <array>
#include <cstdio>
#include <functional>
#include <memory>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

#include "dcshield/envs/car_following.hpp"
#include "dcshield/envs/gridworld.hpp"
#include "dcshield/mdp.hpp"
#include "dcshield/shield.hpp"
#include "dcshield/value_iteration.hpp"

namespace dcshield::envs {

/// A built environment with everything the simulator and the session service need.
struct EnvBundle {
  std::string name;
  BasicMdp mdp;
  SpecKind spec = SpecKind::safety;
  ActionId safe_action = 0;
  ActionMetric metric;
  Policy controller;
  std::vector<std::string> action_names;
  int horizon = 0;
  /// Inter-agent distance of a state (robot-obstacle Manhattan distance, or the gap).
  std::function<double(StateId)> separation;
  /// Named scalar description of a state, for logs and client frames.
  std::function<nlohmann::json(StateId)> describe;
  /// Configuration the bundle was built from.
  nlohmann::json config;
};

inline nlohmann::json to_json(const GridworldConfig& c) {
  return {{"width", c.width},
          {"height", c.height},
          {"robot_start", {c.robot_start.row, c.robot_start.col}},
          {"goal", {c.goal.row, c.goal.col}},
          {"obstacle_start", {c.obstacle_start.row, c.obstacle_start.col}},
          {"horizon", c.horizon},
          {"obstacle_policy", c.obstacle_policy},
          {"step_cost", c.step_cost},
          {"collision_cost", c.collision_cost}};
}

inline GridworldConfig gridworld_config_from_json(const nlohmann::json& j) {
  GridworldConfig c;
  auto cell = [](const nlohmann::json& v) { return Cell{v.at(0).get<int>(), v.at(1).get<int>()}; };
  c.width = j.value("width", c.width);
  c.height = j.value("height", c.height);
  if (j.contains("robot_start")) c.robot_start = cell(j["robot_start"]);
  if (j.contains("goal")) c.goal = cell(j["goal"]);
  if (j.contains("obstacle_start")) c.obstacle_start = cell(j["obstacle_start"]);
  c.horizon = j.value("horizon", c.horizon);
  if (j.contains("obstacle_policy")) c.obstacle_policy = j["obstacle_policy"].get<std::array<double, 5>>();
  c.step_cost = j.value("step_cost", c.step_cost);
  c.collision_cost = j.value("collision_cost", c.collision_cost);
  return c;
}

inline nlohmann::json to_json(const CarFollowConfig& c) {
  return {{"safety_distance", c.safety_distance},
          {"distance_bins", c.distance_bins},
          {"distance_step", c.distance_step},
          {"velocity_bins", c.velocity_bins},
          {"velocity_min", c.velocity_min},
          {"velocity_step", c.velocity_step},
          {"ego_accels", c.ego_accels},
          {"leader_accels", c.leader_accels},
          {"dt", c.dt},
          {"horizon", c.horizon},
          {"init_distance", c.init_distance},
          {"init_velocity", c.init_velocity},
          {"discount", c.discount},
          {"reference_gap", c.reference_gap},
          {"proximity_weight", c.proximity_weight},
          {"collision_penalty", c.collision_penalty},
          {"velocity_weight", c.velocity_weight}};
}

inline CarFollowConfig car_config_from_json(const nlohmann::json& j) {
  CarFollowConfig c;
  c.safety_distance = j.value("safety_distance", c.safety_distance);
  c.distance_bins = j.value("distance_bins", c.distance_bins);
  c.distance_step = j.value("distance_step", c.distance_step);
  c.velocity_bins = j.value("velocity_bins", c.velocity_bins);
  c.velocity_min = j.value("velocity_min", c.velocity_min);
  c.velocity_step = j.value("velocity_step", c.velocity_step);
  c.ego_accels = j.value("ego_accels", c.ego_accels);
  c.leader_accels = j.value("leader_accels", c.leader_accels);
  c.dt = j.value("dt", c.dt);
  c.horizon = j.value("horizon", c.horizon);
  c.init_distance = j.value("init_distance", c.init_distance);
  c.init_velocity = j.value("init_velocity", c.init_velocity);
  c.discount = j.value("discount", c.discount);
  c.reference_gap = j.value("reference_gap", c.reference_gap);
  c.proximity_weight = j.value("proximity_weight", c.proximity_weight);
  c.collision_penalty = j.value("collision_penalty", c.collision_penalty);
  c.velocity_weight = j.value("velocity_weight", c.velocity_weight);
  return c;
}

/// Wires the runtime hooks of a bundle for a given configuration; mdp and controller are left to the caller.
inline EnvBundle bundle_shell(const std::string& name, const nlohmann::json& config) {
  EnvBundle e;
  e.name = name;
  if (name == "gridworld") {
    auto g = std::make_shared<Gridworld>(gridworld_config_from_json(config));
    e.spec = SpecKind::reach_avoid;
    e.safe_action = Gridworld::kStay;
    e.metric = Gridworld::action_metric();
    e.action_names = {"up", "down", "left", "right", "stay"};
    e.horizon = g->config().horizon;
    e.separation = [g](StateId s) { return g->separation(s); };
    e.describe = [g](StateId s) {
      const auto d = g->decode(s);
      return nlohmann::json{{"robot", {d.robot.row, d.robot.col}},
                            {"obstacle", {d.obstacle.row, d.obstacle.col}},
                            {"goal_reached", d.flag}};
    };
    e.config = to_json(g->config());
  } else if (name == "car-following") {
    auto c = std::make_shared<CarFollowing>(car_config_from_json(config));
    e.spec = SpecKind::safety;
    e.safe_action = c->safe_action();
    e.metric = c->action_metric();
    for (double a : c->config().ego_accels) {
      char buf[32];
      std::snprintf(buf, sizeof buf, "accel %+.2f", a);
      e.action_names.emplace_back(buf);
    }
    e.horizon = c->config().horizon;
    e.separation = [c](StateId s) { return c->distance(s); };
    e.describe = [c](StateId s) { return nlohmann::json{{"gap", c->distance(s)}, {"rel_velocity", c->velocity(s)}}; };
    e.config = to_json(c->config());
  } else {
    throw std::invalid_argument("unknown environment '" + name + "' (expected gridworld or car-following)");
  }
  return e;
}

/// Builds one of the two reference environments with its task controller.
inline EnvBundle make_env(const std::string& name, const nlohmann::json& config = nlohmann::json::object()) {
  EnvBundle e = bundle_shell(name, config);
  if (name == "gridworld") {
    Gridworld g(gridworld_config_from_json(config));
    e.mdp = g.build();
    e.controller = g.task_policy(e.mdp);
  } else {
    CarFollowing c(car_config_from_json(config));
    e.mdp = c.build();
    e.controller = c.task_policy(e.mdp);
  }
  return e;
}

inline const std::vector<std::string>& env_names() {
  static const std::vector<std::string> names{"gridworld", "car-following"};
  return names;
}

/// Metadata written next to an environment's MDP file.
inline nlohmann::json env_metadata(const EnvBundle& e) {
  nlohmann::json metric = nlohmann::json::array();
  for (std::size_t a = 0; a < e.metric.action_count; ++a) {
    std::vector<double> row;
    for (std::size_t b = 0; b < e.metric.action_count; ++b)
      row.push_back(e.metric(static_cast<ActionId>(a), static_cast<ActionId>(b)));
    metric.push_back(row);
  }
  return {{"env", e.name},
          {"spec", to_string(e.spec)},
          {"labels", [&] {
             std::vector<std::string> names;
             for (const auto& [k, v] : e.mdp.labels()) names.push_back(k);
             return names;
           }()},
          {"safe_action", e.safe_action},
          {"action_names", e.action_names},
          {"action_metric", metric},
          {"horizon", e.horizon},
          {"controller", std::vector<ActionId>(e.controller.actions().begin(), e.controller.actions().end())},
          {"config", e.config}};
}

/// Rebuilds a bundle from an MDP (read from file) and its metadata.
inline EnvBundle env_from_metadata(BasicMdp mdp, const nlohmann::json& meta) {
  EnvBundle e = bundle_shell(meta.at("env").get<std::string>(), meta.value("config", nlohmann::json::object()));
  e.mdp = std::move(mdp);
  e.safe_action = meta.value("safe_action", e.safe_action);
  e.horizon = meta.value("horizon", e.horizon);
  e.controller = Policy(e.mdp, meta.at("controller").get<std::vector<ActionId>>());
  return e;
}

}  // namespace dcshield::envs
