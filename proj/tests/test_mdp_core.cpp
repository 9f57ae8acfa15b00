#include <gtest/gtest.h>

#include <random>
#include <sstream>

#include "dcshield/mdp.hpp"
#include "dcshield/mdp_io.hpp"
#include "dcshield/value_iteration.hpp"
#include "oracle.hpp"

using namespace dcshield;

namespace {

bool mentions(const ValidationReport& r, const std::string& needle) {
  for (const auto& i : r.issues)
    if (i.find(needle) != std::string::npos) return true;
  return false;
}

StateSet set_of(std::size_t n, std::initializer_list<StateId> xs) {
  std::vector<StateId> v(xs);
  return make_state_set(n, v);
}

}  // namespace

TEST(Validate, WellFormedTwoStateModelHasEmptyReport) {
  MdpBuilder b(2, 1);
  b.add(0, 0, 1, 0.3).add(0, 0, 0, 0.7).add(1, 0, 1, 1.0).init(0, 1.0);
  EXPECT_TRUE(validate_mdp(std::move(b).build()).ok());
}

TEST(Validate, RowSumAboveOneIsReported) {
  MdpBuilder b(2, 1);
  b.add(0, 0, 0, 0.5).add(0, 0, 1, 0.6).add(1, 0, 1, 1.0).init(0, 1.0);
  const auto rep = validate_mdp(std::move(b).build());
  ASSERT_FALSE(rep.ok());
  EXPECT_TRUE(mentions(rep, "row sum 1.1")) << rep.to_string();
  EXPECT_TRUE(mentions(rep, "(0,0)"));
}

TEST(Validate, DanglingSuccessorIsReported) {
  MdpBuilder b(2, 1);
  b.add(0, 0, 5, 1.0).add(1, 0, 1, 1.0).init(0, 1.0);
  EXPECT_TRUE(mentions(validate_mdp(std::move(b).build()), "dangling successor"));
}

TEST(Validate, EmptyActionSetAndBadInitAreReported) {
  MdpBuilder b(2, 1);
  b.add(0, 0, 0, 1.0).init(0, 0.5);
  const auto rep = validate_mdp(std::move(b).build());
  EXPECT_TRUE(mentions(rep, "empty action set at state 1"));
  EXPECT_TRUE(mentions(rep, "init sums to"));
}

TEST(Validate, DuplicateEntriesAreSummed) {
  MdpBuilder b(1, 1);
  b.add(0, 0, 0, 0.5).add(0, 0, 0, 0.5).init(0, 1.0);
  const auto mdp = std::move(b).build();
  ASSERT_EQ(mdp.row(0, 0).size(), 1u);
  EXPECT_DOUBLE_EQ(mdp.row(0, 0)[0].prob, 1.0);
}

TEST(Reach, TargetStateHasValueOne) {
  MdpBuilder b(2, 1);
  b.add(0, 0, 0, 1.0).add(1, 0, 1, 1.0).init(0, 1.0);
  const auto mdp = std::move(b).build();
  const auto v = compute_reach_values(mdp, set_of(2, {1}), Mode::max);
  EXPECT_EQ(v[1], 1.0);
  EXPECT_EQ(v[0], 0.0);  // absorbing without a path to the target
}

TEST(Reach, GeometricChainReachesWithProbabilityOne) {
  MdpBuilder b(2, 1);
  b.add(0, 0, 0, 0.5).add(0, 0, 1, 0.5).add(1, 0, 1, 1.0).init(0, 1.0);
  const auto mdp = std::move(b).build();
  const auto v = compute_reach_values(mdp, set_of(2, {1}), Mode::max);
  EXPECT_NEAR(v[0], 1.0, 1e-6);
  EXPECT_LT(v.residual, 1e-6);
}

TEST(Safety, UnsafeStateHasValueZeroAndSelfLoopOne) {
  // 0: self-loop (a0) or step into unsafe (a1); 1: unsafe; 2: safe absorbing.
  MdpBuilder b(3, 2);
  b.add(0, 0, 0, 1.0).add(0, 1, 1, 1.0).add(1, 0, 1, 1.0).add(2, 0, 2, 1.0).init(0, 1.0);
  b.label("unsafe", set_of(3, {1}));
  const auto mdp = std::move(b).build();
  const auto vmax = compute_safety_values(mdp, Mode::max);
  EXPECT_EQ(vmax[1], 0.0);
  EXPECT_EQ(vmax[0], 1.0);
  const auto vmin = compute_safety_values(mdp, Mode::min);
  EXPECT_EQ(vmin[0], 0.0);
}

TEST(Safety, RiskyOnlyActionGivesOneHalf) {
  MdpBuilder b(3, 1);
  b.add(0, 0, 1, 0.5).add(0, 0, 2, 0.5).add(1, 0, 1, 1.0).add(2, 0, 2, 1.0).init(0, 1.0);
  b.label("unsafe", set_of(3, {1}));
  const auto mdp = std::move(b).build();
  EXPECT_NEAR(compute_safety_values(mdp, Mode::max)[0], 0.5, 1e-12);
}

namespace {

/// s0: a0 = {0.5 s1, 0.5 s2}, a1 = s2 surely. s1 unsafe, s2 safe absorbing.
BasicMdp two_action_toy() {
  MdpBuilder b(3, 2);
  b.add(0, 0, 1, 0.5).add(0, 0, 2, 0.5).add(0, 1, 2, 1.0);
  b.add(1, 0, 1, 1.0).add(2, 0, 2, 1.0).init(0, 1.0);
  b.label("unsafe", set_of(3, {1}));
  return std::move(b).build();
}

}  // namespace

TEST(QValues, TwoTermExpectationAndArgmax) {
  const auto mdp = two_action_toy();
  const auto vmax = compute_safety_values(mdp, Mode::max);
  const auto q = compute_q(mdp, vmax);
  EXPECT_NEAR(q(0, 0), 0.5, 1e-12);
  EXPECT_NEAR(q(0, 1), 1.0, 1e-12);
  EXPECT_NEAR(q(2, 0), vmax[2], 0.0);  // deterministic successor
  EXPECT_NEAR(q(0, 0), expectation(mdp, 0, 0, vmax.values), 1e-15);
  EXPECT_EQ(optimally_safe_policy(mdp, q)(0), 1);
}

TEST(QValues, ConstantValuesGiveConstantQ) {
  const auto mdp = two_action_toy();
  ValueVector ones;
  ones.values.assign(3, 1.0);
  const auto q = compute_q(mdp, ones);
  for (StateId s = 0; s < 3; ++s)
    for (ActionId a = 0; a < 2; ++a)
      if (mdp.is_enabled(s, a)) {
        EXPECT_EQ(q(s, a), 1.0);
      }
}

TEST(QValues, TieBreakPrefersLowestIndexAndSingletonIsForced) {
  MdpBuilder b(2, 3);
  b.add(0, 0, 1, 1.0).add(0, 1, 1, 1.0).add(0, 2, 1, 1.0).add(1, 2, 1, 1.0).init(0, 1.0);
  b.label("unsafe", StateSet(2, 0));
  const auto mdp = std::move(b).build();
  const auto q = compute_q(mdp, compute_safety_values(mdp, Mode::max));
  const auto pol = optimally_safe_policy(mdp, q);
  EXPECT_EQ(pol(0), 0);
  EXPECT_EQ(pol(1), 2);
}

TEST(ReachAvoid, LineWithTenPercentRiskGivesPointNine) {
  // start -> {0.9 goal, 0.1 unsafe}
  MdpBuilder b(3, 1);
  b.add(0, 0, 1, 0.9).add(0, 0, 2, 0.1).add(1, 0, 1, 1.0).add(2, 0, 2, 1.0).init(0, 1.0);
  b.label("goal", set_of(3, {1})).label("unsafe", set_of(3, {2}));
  const auto mdp = std::move(b).build();
  const auto obj = make_objective(mdp, SpecKind::reach_avoid);
  const auto v = compute_values(mdp, obj, Mode::max);
  EXPECT_NEAR(v[0], 0.9, 1e-12);
  EXPECT_EQ(v[1], 1.0);
  EXPECT_EQ(v[2], 0.0);
}

TEST(ReachAvoid, InconsistentLabelsAreRejected) {
  MdpBuilder b(1, 1);
  b.add(0, 0, 0, 1.0).init(0, 1.0);
  b.label("goal", set_of(1, {0})).label("unsafe", set_of(1, {0}));
  const auto mdp = std::move(b).build();
  EXPECT_THROW(make_objective(mdp, SpecKind::reach_avoid), std::invalid_argument);
}

TEST(InitialValue, Expectations) {
  const std::vector<double> v{1.0, 0.0};
  EXPECT_EQ(expected_initial_value(v, std::vector<double>{0.0, 1.0}), 0.0);
  EXPECT_EQ(expected_initial_value(v, std::vector<double>{0.5, 0.5}), 0.5);
  EXPECT_EQ(expected_initial_value(std::vector<double>{1.0, 1.0, 0.2}, std::vector<double>{0.5, 0.5, 0.0}), 1.0);
}

namespace {

/// 0 -> {0.9 self, 0.05 target (1), 0.05 sink (2)}: reach value 0.5 approached geometrically.
BasicMdp slow_chain(double stay) {
  MdpBuilder b(3, 1);
  const double out = (1.0 - stay) / 2.0;
  b.add(0, 0, 0, stay).add(0, 0, 1, out).add(0, 0, 2, out).add(1, 0, 1, 1.0).add(2, 0, 2, 1.0).init(0, 1.0);
  return std::move(b).build();
}

}  // namespace

TEST(StoppingRule, IterationCapRaisesWithResidual) {
  const auto mdp = slow_chain(0.99);
  SolveOptions opt;
  opt.max_iterations = 5;
  try {
    compute_reach_values(mdp, set_of(3, {1}), Mode::max, nullptr, opt);
    FAIL() << "expected IterationLimitError";
  } catch (const IterationLimitError& e) {
    EXPECT_EQ(e.iterations(), 5u);
    EXPECT_GT(e.residual(), 1e-6);
  }
}

TEST(StoppingRule, ResidualRuleStopsAtFirstSweepBelowTolerance) {
  const auto mdp = slow_chain(0.9);
  SolveOptions opt;
  opt.stop = StopRule::residual;
  const auto v = compute_reach_values(mdp, set_of(3, {1}), Mode::max, nullptr, opt);
  EXPECT_LT(v.residual, 1e-6);
  // x_k = 0.5 (1 - 0.9^k); the change at sweep k is 0.05 * 0.9^(k-1).
  std::size_t k = 1;
  while (0.05 * std::pow(0.9, static_cast<double>(k - 1)) >= 1e-6) ++k;
  EXPECT_EQ(v.iterations, k);
  EXPECT_NEAR(v[0], 0.5 * (1.0 - std::pow(0.9, static_cast<double>(k))), 1e-12);
  // The residual alone leaves an error of about residual * 9 here.
  EXPECT_GT(0.5 - v[0], 1e-6);
}

TEST(StoppingRule, DefaultRuleAlsoBoundsTheRemainingError) {
  const auto mdp = slow_chain(0.99);
  const auto v = compute_reach_values(mdp, set_of(3, {1}), Mode::max);
  EXPECT_LT(v.residual, 1e-6);
  EXPECT_NEAR(v[0], 0.5, 1e-6);
}

TEST(StoppingRule, DefaultRuleTerminatesWhenChangesAreRoundingNoise) {
  // A cycle 0 -> 3 -> 2 -> 0 whose max value is set by the exit from 0; Jacobi sweeps settle at a
  // fixed point up to a last-bit flicker, where consecutive change ratios stay at 1.
  MdpBuilder b(6, 2);
  b.add(0, 0, 3, 1.0).add(0, 1, 4, 0.891).add(0, 1, 5, 0.109);
  b.add(1, 0, 0, 1.0).add(1, 1, 1, 1.0);
  b.add(2, 0, 0, 1.0).add(2, 1, 0, 0.115).add(2, 1, 2, 0.885);
  b.add(3, 0, 0, 0.145).add(3, 0, 2, 0.855);
  b.add(4, 0, 4, 1.0).add(4, 1, 0, 1.0);
  b.add(5, 0, 2, 1.0).add(5, 1, 0, 0.076).add(5, 1, 1, 0.434).add(5, 1, 3, 0.49);
  b.init(0, 1.0).label("unsafe", std::vector<StateId>{5}).label("goal", std::vector<StateId>{4});
  const auto mdp = std::move(b).build();
  SolveOptions opt;
  opt.max_iterations = 1000;
  const auto v = compute_values(mdp, make_objective(mdp, SpecKind::reach_avoid), Mode::max, {}, {}, {}, opt);
  for (StateId s : {0u, 1u, 2u, 3u}) EXPECT_NEAR(v[s], 0.891, 1e-12);
  EXPECT_LT(v.iterations, 100u);
}

TEST(StoppingRule, GraphOneStatesAreExact) {
  MdpBuilder b(2, 1);
  b.add(0, 0, 0, 0.999).add(0, 0, 1, 0.001).add(1, 0, 1, 1.0).init(0, 1.0);
  const auto mdp = std::move(b).build();
  const auto v = compute_reach_values(mdp, set_of(2, {1}), Mode::max);
  EXPECT_EQ(v[0], 1.0);
  EXPECT_EQ(v.iterations, 0u);
}

TEST(Oracle, TwoHundredRandomMdpsMatchLinearSystems) {
  std::mt19937_64 rng(20240611);
  int checked = 0;
  for (int trial = 0; trial < 200; ++trial) {
    const int n = 2 + trial % 5;  // 2..6 states
    const int m = 1 + trial % 3;
    const auto d = oracle::random_dense(rng, n, m);
    std::vector<char> unsafe(n, 0), goal(n, 0);
    unsafe[n - 1] = 1;
    if (n >= 3) goal[n - 2] = 1;
    std::vector<int> u{n - 1}, g;
    if (n >= 3) g.push_back(n - 2);

    const auto mdp = d.to_mdp(u, g);
    ASSERT_TRUE(validate_mdp(mdp).ok()) << validate_mdp(mdp).to_string();
    for (bool maximize : {true, false}) {
      const Mode mode = maximize ? Mode::max : Mode::min;
      const auto safety = compute_values(mdp, make_objective(mdp, SpecKind::safety), mode);
      const auto ref = oracle::extremal_safety(d, unsafe, maximize);
      EXPECT_LT(safety.residual, 1e-6);
      for (int s = 0; s < n; ++s) EXPECT_NEAR(safety[s], ref[s], 1e-6) << "trial " << trial << " state " << s;
      if (n >= 3) {
        const auto ra = compute_values(mdp, make_objective(mdp, SpecKind::reach_avoid), mode);
        const auto ref_ra = oracle::extremal_reach(d, goal, unsafe, maximize);
        for (int s = 0; s < n; ++s) EXPECT_NEAR(ra[s], ref_ra[s], 1e-6) << "trial " << trial << " state " << s;
      }
    }
    // Policy mode on the lowest enabled action of each state.
    std::vector<int> pol(n);
    std::vector<ActionId> apol(n);
    for (int s = 0; s < n; ++s) {
      int a = 0;
      while (!d.enabled(s, a)) ++a;
      pol[s] = a;
      apol[s] = a;
    }
    const auto vp = compute_values(mdp, make_objective(mdp, SpecKind::safety), Mode::policy, apol);
    auto ref_p = oracle::policy_reach(d, pol, unsafe, std::vector<char>(n, 0));
    for (int s = 0; s < n; ++s) EXPECT_NEAR(vp[s], 1.0 - ref_p[s], 1e-6);
    ++checked;
  }
  EXPECT_EQ(checked, 200);
}

TEST(ReachAvoidCast, MatchesDirectReachAvoid) {
  std::mt19937_64 rng(7);
  for (int trial = 0; trial < 20; ++trial) {
    const auto d = oracle::random_dense(rng, 5, 2);
    const auto mdp = d.to_mdp({4}, {3});
    const auto cast = cast_reach_avoid(mdp, mdp.label("unsafe"), mdp.label("goal"));
    const auto direct = compute_values(mdp, make_objective(mdp, SpecKind::reach_avoid), Mode::max);
    const auto via = compute_reach_values(cast.mdp, cast.target, Mode::max);
    for (std::size_t s = 0; s < 5; ++s) EXPECT_NEAR(direct[s], via[s], 2e-6);
  }
}

TEST(MdpIo, RoundTripIsExact) {
  std::mt19937_64 rng(3);
  const auto d = oracle::random_dense(rng, 6, 3);
  const auto mdp = d.to_mdp({5}, {4});
  std::istringstream in(mdp_text(mdp));
  const auto back = read_mdp(in);
  EXPECT_EQ(mdp_text(back), mdp_text(mdp));
  EXPECT_EQ(back.label("goal"), mdp.label("goal"));
}

TEST(MdpIo, ParserReportsLineNumbers) {
  const std::string text = "mdp 2 1\ninit 1\n0 1\ntransitions\n0 0 1 1\n1 0 7 1\n";
  std::istringstream in(text);
  try {
    read_mdp(in);
    FAIL() << "expected ParseError";
  } catch (const ParseError& e) {
    EXPECT_EQ(e.line(), 6u);
    EXPECT_NE(std::string(e.what()).find("dangling successor"), std::string::npos);
  }
}

TEST(MdpIo, ParserRejectsNonStochasticRows) {
  std::istringstream in("mdp 2 1\ninit 1\n0 1\ntransitions\n0 0 1 0.5\n1 0 1 1\n");
  EXPECT_THROW(read_mdp(in), ParseError);
}
