#pragma once

#include <chrono>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

#include "dcshield/digest.hpp"

namespace dcshield {

inline constexpr const char* kToolkitVersion = "0.1.0";

inline std::string file_digest(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return sha256_hex(ss.str());
}

/// Record of one CLI run: what went in, what came out, with content digests.
class RunManifest {
 public:
  explicit RunManifest(std::string subcommand)
      : subcommand_(std::move(subcommand)), start_(std::chrono::steady_clock::now()) {}

  void input(const std::string& path) { inputs_.push_back({path, file_digest(path)}); }
  void output(const std::string& path) { outputs_.push_back(path); }
  nlohmann::json& parameters() { return params_; }
  nlohmann::json& results() { return results_; }

  nlohmann::json to_json() const {
    nlohmann::json in = nlohmann::json::array();
    for (const auto& [p, d] : inputs_) in.push_back({{"path", p}, {"sha256", d}});
    nlohmann::json out = nlohmann::json::array();
    for (const auto& p : outputs_) out.push_back({{"path", p}, {"sha256", file_digest(p)}});
    const double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
    return {{"subcommand", subcommand_}, {"version", kToolkitVersion}, {"parameters", params_},
            {"inputs", in},              {"outputs", out},             {"results", results_},
            {"wall_time_s", wall}};
  }

  void write(const std::string& path) const {
    std::ofstream f(path);
    if (!f) throw std::runtime_error("cannot write " + path);
    f << to_json().dump(2) << '\n';
  }

 private:
  std::string subcommand_;
  std::chrono::steady_clock::time_point start_;
  std::vector<std::pair<std::string, std::string>> inputs_;
  std::vector<std::string> outputs_;
  nlohmann::json params_ = nlohmann::json::object();
  nlohmann::json results_ = nlohmann::json::object();
};

}  // namespace dcshield
