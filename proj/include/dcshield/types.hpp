#pragma once

#include <bit>
#include <cstddef>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace dcshield {

using StateId = std::uint32_t;
using ActionId = std::int32_t;

/// Bitset over action indices. Models are limited to 64 actions.
using ActionMask = std::uint64_t;

inline constexpr std::size_t kMaxActions = 64;

/// Buffer entry that stands for "no action yet" in a delayed-communication state.
inline constexpr ActionId kPlaceholder = -1;

struct Transition {
  StateId to;
  double prob;

  friend bool operator==(const Transition&, const Transition&) = default;
};

inline constexpr ActionMask mask_of(ActionId a) { return ActionMask{1} << static_cast<unsigned>(a); }

inline constexpr bool mask_has(ActionMask m, ActionId a) {
  return a >= 0 && static_cast<std::size_t>(a) < kMaxActions && (m & mask_of(a)) != 0;
}

inline constexpr ActionMask full_mask(std::size_t action_count) {
  return action_count >= kMaxActions ? ~ActionMask{0} : (ActionMask{1} << action_count) - 1;
}

inline constexpr ActionId lowest_action(ActionMask m) { return m == 0 ? -1 : std::countr_zero(m); }

inline int mask_size(ActionMask m) { return std::popcount(m); }

/// Collected invariant violations. Empty means the checked object is well formed.
struct ValidationReport {
  std::vector<std::string> issues;

  bool ok() const { return issues.empty(); }
  void add(std::string msg) { issues.push_back(std::move(msg)); }

  std::string to_string() const {
    std::string out;
    for (const auto& i : issues) {
      out += i;
      out += '\n';
    }
    return out;
  }
};

/// Value iteration hit its iteration cap before the sup-norm change fell below tolerance.
class IterationLimitError : public std::runtime_error {
 public:
  IterationLimitError(std::size_t iterations, double residual)
      : std::runtime_error("iteration limit reached after " + std::to_string(iterations) +
                           " iterations, residual " + std::to_string(residual)),
        iterations_(iterations),
        residual_(residual) {}

  std::size_t iterations() const { return iterations_; }
  double residual() const { return residual_; }

 private:
  std::size_t iterations_;
  double residual_;
};

/// Requested safety probability exceeds what any policy can achieve from Init.
class InfeasibleTargetError : public std::invalid_argument {
 public:
  InfeasibleTargetError(double delta, double bound)
      : std::invalid_argument("infeasible target: delta " + std::to_string(delta) +
                              " exceeds E_Init[Vmax] = " + std::to_string(bound)),
        delta_(delta),
        bound_(bound) {}

  double delta() const { return delta_; }
  double bound() const { return bound_; }

 private:
  double delta_;
  double bound_;
};

/// A shield (or session) was paired with a model it was not synthesized from.
class ModelMismatchError : public std::runtime_error {
 public:
  explicit ModelMismatchError(const std::string& what)
      : std::runtime_error("shield/model mismatch: " + what) {}
};

/// Text input rejected; carries the 1-based line number.
class ParseError : public std::runtime_error {
 public:
  ParseError(std::size_t line, const std::string& what)
      : std::runtime_error("line " + std::to_string(line) + ": " + what), line_(line) {}

  std::size_t line() const { return line_; }

 private:
  std::size_t line_;
};

}  // namespace dcshield
