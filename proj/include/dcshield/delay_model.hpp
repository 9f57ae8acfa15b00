#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <istream>
#include <optional>
#include <ostream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "dcshield/types.hpp"

namespace dcshield {

/// Markov model of the communication delay over {0, ..., tau_max}: p(from, to) = P(tau' = to | tau = from).
/// Delay can grow by at most one step per tick, so p(from, to) = 0 for to > from + 1.
class DelayModel {
 public:
  /// Delay-free channel (tau_max = 0).
  DelayModel() : tau_max_(0), p_{1.0} {}

  /// Unchecked; call validate() before use.
  DelayModel(int tau_max, std::vector<std::vector<double>> rows) : tau_max_(tau_max) {
    if (tau_max < 0) throw std::invalid_argument("tau_max must be non-negative");
    const std::size_t k = static_cast<std::size_t>(tau_max) + 1;
    if (rows.size() != k) throw std::invalid_argument("delay model needs tau_max + 1 rows");
    p_.reserve(k * k);
    for (const auto& r : rows) {
      if (r.size() != k) throw std::invalid_argument("delay model needs tau_max + 1 columns");
      p_.insert(p_.end(), r.begin(), r.end());
    }
  }

  /// Reference channel with every allowed cell positive: from each delay the link recovers to 0
  /// with high probability, degrades by one step with probability `up`, and keeps the rest spread
  /// over the intermediate delays.
  static DelayModel reference(int tau_max, double up = 0.25, double reset = 0.6) {
    if (tau_max < 0) throw std::invalid_argument("tau_max must be non-negative");
    const std::size_t k = static_cast<std::size_t>(tau_max) + 1;
    std::vector<std::vector<double>> rows(k, std::vector<double>(k, 0.0));
    for (int t = 0; t <= tau_max; ++t) {
      auto& r = rows[static_cast<std::size_t>(t)];
      const double climb = t < tau_max ? up : 0.0;
      if (t < tau_max) r[static_cast<std::size_t>(t) + 1] = climb;
      const double rest = 1.0 - climb;
      if (t == 0) {
        r[0] += rest;
        continue;
      }
      const double r0 = t < tau_max ? reset : reset + up;
      r[0] = r0;
      for (int u = 1; u <= t; ++u) r[static_cast<std::size_t>(u)] = (rest - r0) / t;
    }
    return DelayModel(tau_max, std::move(rows));
  }

  int tau_max() const { return tau_max_; }
  std::size_t size() const { return static_cast<std::size_t>(tau_max_) + 1; }

  double operator()(int from, int to) const {
    return p_[static_cast<std::size_t>(from) * size() + static_cast<std::size_t>(to)];
  }
  double& at(int from, int to) { return p_[static_cast<std::size_t>(from) * size() + static_cast<std::size_t>(to)]; }

  std::vector<double> row(int from) const {
    auto b = p_.begin() + static_cast<std::ptrdiff_t>(static_cast<std::size_t>(from) * size());
    return {b, b + static_cast<std::ptrdiff_t>(size())};
  }

  /// Highest delay reachable from delay 0 by repeated +1 steps.
  int reachable_top() const {
    int t = 0;
    while (t < tau_max_ && (*this)(t, t + 1) > 0.0) ++t;
    return t;
  }

  friend bool operator==(const DelayModel&, const DelayModel&) = default;

 private:
  int tau_max_;
  std::vector<double> p_;
};

inline ValidationReport validate(const DelayModel& d) {
  ValidationReport rep;
  for (int t = 0; t <= d.tau_max(); ++t) {
    double sum = 0.0;
    for (int u = 0; u <= d.tau_max(); ++u) {
      const double x = d(t, u);
      if (!(x >= 0.0 && x <= 1.0))
        rep.add("entry (" + std::to_string(t) + "," + std::to_string(u) + ") = " + std::to_string(x) +
                " out of [0,1]");
      if (u > t + 1 && x != 0.0) rep.add("forbidden jump " + std::to_string(t) + "->" + std::to_string(u));
      sum += x;
    }
    if (std::abs(sum - 1.0) > 1e-9) rep.add("row " + std::to_string(t) + " sums to " + std::to_string(sum));
  }
  return rep;
}

struct LatencySample {
  std::int64_t timestamp_ms;
  double delay_ms;
};

using LatencyTrace = std::vector<LatencySample>;

struct EstimateOptions {
  int bin_width_ms = 100;
  /// Defaults to the highest observed bin.
  std::optional<int> tau_max;
  /// Additive smoothing over the allowed cells of each row; 0 disables.
  double smoothing = 0.0;
};

struct DelayEstimate {
  DelayModel model;
  std::size_t transitions = 0;
  /// Observed jumps above +1 that were reassigned to the +1 cell.
  std::size_t clamped = 0;
  /// Rows without observations that received the deterministic fallback.
  std::vector<int> fallback_rows;
};

/// Empirical delay-transition model from latency traces. Pairs never straddle two traces.
inline DelayEstimate estimate_from_traces(const std::vector<LatencyTrace>& traces, const EstimateOptions& opt = {}) {
  if (opt.bin_width_ms <= 0) throw std::invalid_argument("bin width must be positive");
  if (opt.smoothing < 0.0) throw std::invalid_argument("smoothing must be non-negative");
  bool usable = false;
  int top = 0;
  for (const auto& tr : traces) {
    if (tr.size() >= 2) usable = true;
    for (std::size_t i = 0; i < tr.size(); ++i) {
      if (!(tr[i].delay_ms >= 0.0)) throw std::invalid_argument("malformed trace: negative delay");
      if (i > 0 && tr[i].timestamp_ms <= tr[i - 1].timestamp_ms)
        throw std::invalid_argument("malformed trace: timestamps not strictly increasing");
      top = std::max(top, static_cast<int>(std::floor(tr[i].delay_ms / opt.bin_width_ms)));
    }
  }
  if (!usable) throw std::invalid_argument("no data: need a trace with at least two samples");
  const int tau_max = opt.tau_max.value_or(top);
  if (tau_max < 0) throw std::invalid_argument("tau_max must be non-negative");
  const std::size_t k = static_cast<std::size_t>(tau_max) + 1;

  auto bin = [&](double delay) {
    return std::min(tau_max, static_cast<int>(std::floor(delay / opt.bin_width_ms)));
  };
  std::vector<std::vector<double>> counts(k, std::vector<double>(k, 0.0));
  DelayEstimate est;
  for (const auto& tr : traces) {
    for (std::size_t i = 1; i < tr.size(); ++i) {
      const int from = bin(tr[i - 1].delay_ms);
      int to = bin(tr[i].delay_ms);
      if (to > from + 1) {
        to = from + 1;
        ++est.clamped;
      }
      counts[static_cast<std::size_t>(from)][static_cast<std::size_t>(to)] += 1.0;
      ++est.transitions;
    }
  }
  for (int t = 0; t <= tau_max; ++t) {
    auto& r = counts[static_cast<std::size_t>(t)];
    const int last = std::min(t + 1, tau_max);
    if (opt.smoothing > 0.0)
      for (int u = 0; u <= last; ++u) r[static_cast<std::size_t>(u)] += opt.smoothing;
    double total = 0.0;
    for (double c : r) total += c;
    if (total == 0.0) {
      r[static_cast<std::size_t>(last)] = 1.0;
      est.fallback_rows.push_back(t);
      continue;
    }
    for (double& c : r) c /= total;
  }
  est.model = DelayModel(tau_max, std::move(counts));
  return est;
}

/// Reads a `timestamp_ms,delay_ms` CSV (header row required).
inline LatencyTrace read_trace_csv(std::istream& in) {
  LatencyTrace trace;
  std::string line;
  std::size_t lineno = 0;
  bool header = false;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.find_first_not_of(" \t") == std::string::npos) continue;
    if (!header) {
      std::string h;
      for (char c : line)
        if (c != ' ' && c != '\t') h += c;
      if (h != "timestamp_ms,delay_ms") throw ParseError(lineno, "expected header 'timestamp_ms,delay_ms'");
      header = true;
      continue;
    }
    const auto comma = line.find(',');
    if (comma == std::string::npos) throw ParseError(lineno, "expected two comma-separated columns");
    try {
      std::size_t used = 0;
      const std::string ts = line.substr(0, comma);
      const std::string dl = line.substr(comma + 1);
      const long long t = std::stoll(ts, &used);
      if (ts.find_first_not_of(" \t", used) != std::string::npos) throw std::invalid_argument("ts");
      const double d = std::stod(dl, &used);
      if (dl.find_first_not_of(" \t", used) != std::string::npos) throw std::invalid_argument("delay");
      trace.push_back({t, d});
    } catch (const std::logic_error&) {
      throw ParseError(lineno, "malformed number");
    }
  }
  if (!header) throw ParseError(lineno, "missing header");
  return trace;
}

/// Text form: `tau_max K` then K+1 rows of K+1 probabilities. `#` starts a comment line.
inline void write_delay_model(std::ostream& out, const DelayModel& d) {
  out << "tau_max " << d.tau_max() << '\n';
  char buf[32];
  for (int t = 0; t <= d.tau_max(); ++t) {
    for (int u = 0; u <= d.tau_max(); ++u) {
      std::snprintf(buf, sizeof buf, "%.17g", d(t, u));
      out << (u ? " " : "") << buf;
    }
    out << '\n';
  }
}

inline std::string delay_model_text(const DelayModel& d) {
  std::ostringstream os;
  write_delay_model(os, d);
  return os.str();
}

inline DelayModel read_delay_model(std::istream& in) {
  std::string line;
  std::size_t lineno = 0;
  auto next = [&]() -> bool {
    while (std::getline(in, line)) {
      ++lineno;
      const auto p = line.find_first_not_of(" \t\r");
      if (p == std::string::npos || line[p] == '#') continue;
      return true;
    }
    return false;
  };
  if (!next()) throw ParseError(lineno, "empty delay model");
  std::istringstream hs(line);
  std::string kw;
  long long tau = -1;
  if (!(hs >> kw >> tau) || kw != "tau_max" || tau < 0 || tau > 64)
    throw ParseError(lineno, "expected 'tau_max K' with 0 <= K <= 64");
  const auto k = static_cast<std::size_t>(tau) + 1;
  std::vector<std::vector<double>> rows;
  for (std::size_t r = 0; r < k; ++r) {
    if (!next()) throw ParseError(lineno, "missing row " + std::to_string(r));
    std::istringstream ls(line);
    std::vector<double> row;
    double x = 0;
    while (ls >> x) row.push_back(x);
    if (!ls.eof()) throw ParseError(lineno, "malformed number");
    if (row.size() != k) throw ParseError(lineno, "expected " + std::to_string(k) + " entries");
    rows.push_back(std::move(row));
  }
  if (next()) throw ParseError(lineno, "trailing content");
  DelayModel d(static_cast<int>(tau), std::move(rows));
  const auto rep = validate(d);
  if (!rep.ok()) throw ParseError(lineno, "invalid delay model: " + rep.issues.front());
  return d;
}

}  // namespace dcshield
