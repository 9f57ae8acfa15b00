#pragma once

#include <cmath>
#include <cstdio>
#include <istream>
#include <map>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "dcshield/dcmdp.hpp"
#include "dcshield/mdp.hpp"
#include "dcshield/types.hpp"

// Text format (one record per line, '#' starts a comment line):
//
//   mdp <state_count> <action_count>
//   init <k>                      followed by k lines "<state> <prob>"
//   label <name> <k> <s_1> ... <s_k>      (zero or more)
//   transitions                   followed by lines "<s> <a> <s'> <prob>" until end of input
//
// Probabilities are written with 17 significant digits so values round-trip exactly.

namespace dcshield {

namespace detail {

inline std::string fmt_prob(double p) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", p);
  return buf;
}

}  // namespace detail

template <class Model>
void write_mdp(std::ostream& out, const Model& model) {
  const std::size_t n = model.state_count();
  const std::size_t m = model.action_count();
  out << "mdp " << n << ' ' << m << '\n';
  const auto& init = model.init();
  std::size_t k = 0;
  for (double p : init) k += p > 0.0 ? 1 : 0;
  out << "init " << k << '\n';
  for (std::size_t s = 0; s < n; ++s)
    if (init[s] > 0.0) out << s << ' ' << detail::fmt_prob(init[s]) << '\n';
  for (const auto& [name, set] : model.labels()) {
    std::size_t c = 0;
    for (char x : set) c += x ? 1 : 0;
    out << "label " << name << ' ' << c;
    for (std::size_t s = 0; s < n; ++s)
      if (set[s]) out << ' ' << s;
    out << '\n';
  }
  out << "transitions\n";
  for (std::size_t s = 0; s < n; ++s) {
    const auto sid = static_cast<StateId>(s);
    for (std::size_t a = 0; a < m; ++a) {
      const auto aid = static_cast<ActionId>(a);
      if (!mask_has(model.enabled(sid), aid)) continue;
      for (const Transition& t : model.row(sid, aid))
        out << s << ' ' << a << ' ' << t.to << ' ' << detail::fmt_prob(t.prob) << '\n';
    }
  }
}

inline std::string mdp_text(const BasicMdp& mdp) {
  std::ostringstream os;
  write_mdp(os, mdp);
  return os.str();
}

/// Parses the text format; any malformed line or violated invariant raises ParseError with its line.
inline BasicMdp read_mdp(std::istream& in) {
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
  auto fail = [&](const std::string& what) -> ParseError { return ParseError(lineno, what); };

  if (!next()) throw fail("empty input");
  std::istringstream hs(line);
  std::string kw;
  long long n = 0;
  long long m = 0;
  if (!(hs >> kw >> n >> m) || kw != "mdp" || n <= 0 || m <= 0 || m > static_cast<long long>(kMaxActions) ||
      n > (1LL << 31))
    throw fail("expected 'mdp <state_count> <action_count>' with positive counts and at most 64 actions");
  std::string rest;
  if (hs >> rest) throw fail("trailing tokens after header");
  const auto N = static_cast<std::size_t>(n);
  const auto M = static_cast<std::size_t>(m);
  MdpBuilder b(N, M);

  auto read_state = [&](std::istringstream& ls, const char* what) {
    long long s = -1;
    if (!(ls >> s)) throw fail(std::string("expected ") + what);
    if (s < 0 || s >= n) throw fail(std::string(what) + " " + std::to_string(s) + " out of range");
    return static_cast<StateId>(s);
  };
  auto read_prob = [&](std::istringstream& ls) {
    double p = -1;
    if (!(ls >> p)) throw fail("expected probability");
    if (!(p >= 0.0 && p <= 1.0)) throw fail("probability out of [0,1]");
    return p;
  };
  auto expect_end = [&](std::istringstream& ls) {
    std::string extra;
    if (ls >> extra) throw fail("unexpected token '" + extra + "'");
  };

  if (!next()) throw fail("missing init section");
  std::istringstream is(line);
  long long k = -1;
  if (!(is >> kw >> k) || kw != "init" || k <= 0 || k > n) throw fail("expected 'init <count>'");
  const std::size_t init_line = lineno;
  std::vector<double> init(N, 0.0);
  double init_sum = 0.0;
  for (long long i = 0; i < k; ++i) {
    if (!next()) throw fail("missing init entry");
    std::istringstream ls(line);
    const StateId s = read_state(ls, "state");
    const double p = read_prob(ls);
    expect_end(ls);
    init[s] += p;
    init_sum += p;
  }
  if (std::abs(init_sum - 1.0) > kStochasticTolerance)
    throw ParseError(init_line, "init sums to " + std::to_string(init_sum));
  b.init(std::move(init));

  bool have_transitions = false;
  while (next()) {
    std::istringstream ls(line);
    ls >> kw;
    if (kw == "transitions") {
      expect_end(ls);
      have_transitions = true;
      break;
    }
    if (kw != "label") throw fail("expected 'label' or 'transitions'");
    std::string name;
    long long c = -1;
    if (!(ls >> name >> c) || c < 0 || c > n) throw fail("expected 'label <name> <count> <states...>'");
    std::vector<StateId> members;
    for (long long i = 0; i < c; ++i) members.push_back(read_state(ls, "state"));
    expect_end(ls);
    b.label(name, members);
  }
  if (!have_transitions) throw fail("missing transitions section");

  std::map<std::pair<StateId, ActionId>, std::pair<double, std::size_t>> sums;
  std::vector<char> has_action(N, 0);
  while (next()) {
    std::istringstream ls(line);
    const StateId s = read_state(ls, "state");
    long long a = -1;
    if (!(ls >> a)) throw fail("expected action");
    if (a < 0 || a >= m) throw fail("action " + std::to_string(a) + " out of range");
    long long to = -1;
    if (!(ls >> to)) throw fail("expected successor");
    if (to < 0 || to >= n) throw fail("dangling successor " + std::to_string(to));
    const double p = read_prob(ls);
    expect_end(ls);
    b.add(s, static_cast<ActionId>(a), static_cast<StateId>(to), p);
    auto& e = sums[{s, static_cast<ActionId>(a)}];
    e.first += p;
    e.second = lineno;
    has_action[s] = 1;
  }
  for (const auto& [key, e] : sums)
    if (std::abs(e.first - 1.0) > kStochasticTolerance)
      throw ParseError(e.second, "row sum " + std::to_string(e.first) + " at (" + std::to_string(key.first) + "," +
                                     std::to_string(key.second) + ")");
  for (std::size_t s = 0; s < N; ++s)
    if (!has_action[s]) throw ParseError(lineno, "empty action set at state " + std::to_string(s));
  return std::move(b).build();
}

/// Sidecar for a delayed product: "dcmap <count> <tau_max> <random|constant>" then one line per
/// state "<index> <base> <delay> <b_0> ... <b_{tau_max-1}>", placeholders written as '-'.
inline void write_dc_mapping(std::ostream& out, const DcMdp& dc) {
  out << "dcmap " << dc.state_count() << ' ' << dc.tau_max() << ' '
      << (dc.kind() == DelayKind::random ? "random" : "constant") << '\n';
  for (std::size_t x = 0; x < dc.state_count(); ++x) {
    const DcState st = dc.decode(static_cast<StateId>(x));
    out << x << ' ' << st.base << ' ' << st.delay;
    for (ActionId a : st.buffer) {
      if (a == kPlaceholder) out << " -";
      else out << ' ' << a;
    }
    out << '\n';
  }
}

}  // namespace dcshield
