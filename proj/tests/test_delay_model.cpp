#include <gtest/gtest.h>

#include <random>
#include <sstream>

#include "dcshield/delay_model.hpp"

using namespace dcshield;

namespace {

/// Trace whose samples fall in the given 100 ms bins (mid-bin delays, one sample per 50 ms).
LatencyTrace binned(std::initializer_list<int> bins, std::int64_t t0 = 0) {
  LatencyTrace tr;
  std::int64_t t = t0;
  for (int b : bins) {
    tr.push_back({t, 100.0 * b + 37.5});
    t += 50;
  }
  return tr;
}

bool structural_zeros_hold(const DelayModel& d) {
  for (int t = 0; t <= d.tau_max(); ++t)
    for (int u = t + 2; u <= d.tau_max(); ++u)
      if (d(t, u) != 0.0) return false;
  return true;
}

}  // namespace

TEST(Estimate, SevenSampleTraceReproducesHandCountedRows) {
  // Pairs (0,1) (1,0) (0,0) (0,1) (1,2) (2,0).
  const auto est = estimate_from_traces({binned({0, 1, 0, 0, 1, 2, 0})});
  const auto& d = est.model;
  ASSERT_EQ(d.tau_max(), 2);
  EXPECT_EQ(est.transitions, 6u);
  EXPECT_EQ(est.clamped, 0u);
  EXPECT_DOUBLE_EQ(d(0, 0), 1.0 / 3.0);
  EXPECT_DOUBLE_EQ(d(0, 1), 2.0 / 3.0);
  EXPECT_EQ(d(0, 2), 0.0);
  EXPECT_DOUBLE_EQ(d(1, 0), 0.5);
  EXPECT_EQ(d(1, 1), 0.0);
  EXPECT_DOUBLE_EQ(d(1, 2), 0.5);
  EXPECT_EQ(d(2, 0), 1.0);
  EXPECT_EQ(d(2, 1), 0.0);
  EXPECT_EQ(d(2, 2), 0.0);
  EXPECT_TRUE(validate(d).ok());
}

TEST(Estimate, ConstantZeroTraceGivesIdentityRowZero) {
  EstimateOptions opt;
  opt.tau_max = 2;
  const auto est = estimate_from_traces({binned({0, 0, 0, 0})}, opt);
  EXPECT_EQ(est.model(0, 0), 1.0);
  EXPECT_EQ(est.model(0, 1), 0.0);
  // Unobserved rows fall back to a deterministic step up (capped at tau_max).
  EXPECT_EQ(est.fallback_rows, (std::vector<int>{1, 2}));
  EXPECT_EQ(est.model(1, 2), 1.0);
  EXPECT_EQ(est.model(2, 2), 1.0);
}

TEST(Estimate, JumpAboveOneStepIsClampedAndCounted) {
  EstimateOptions opt;
  opt.tau_max = 3;
  const auto est = estimate_from_traces({binned({0, 3})}, opt);
  EXPECT_EQ(est.clamped, 1u);
  EXPECT_EQ(est.model(0, 1), 1.0);
  EXPECT_EQ(est.model(0, 3), 0.0);
}

TEST(Estimate, DelaysAboveTauMaxLandInTheTopBin) {
  EstimateOptions opt;
  opt.tau_max = 1;
  const auto est = estimate_from_traces({binned({0, 1, 5, 1})}, opt);
  EXPECT_EQ(est.model(1, 1), 1.0);
  EXPECT_EQ(est.model(0, 1), 1.0);
}

TEST(Estimate, PairsNeverStraddleTraces) {
  const auto joined = estimate_from_traces({binned({0, 1, 0, 0, 1, 2, 0})});
  const auto split = estimate_from_traces({binned({0, 1, 0}), binned({0, 1, 2, 0}, 10000)});
  // The split loses the pair (0,0) between the two pieces.
  EXPECT_EQ(split.transitions, 5u);
  EXPECT_DOUBLE_EQ(split.model(0, 1), 1.0);
  EXPECT_DOUBLE_EQ(joined.model(0, 1), 2.0 / 3.0);
}

TEST(Estimate, InvariantToTraceOrder) {
  const std::vector<LatencyTrace> a{binned({0, 1, 2, 2, 0}), binned({1, 0, 0, 1}, 5000), binned({2, 1, 2}, 9000)};
  const std::vector<LatencyTrace> b{a[2], a[0], a[1]};
  EXPECT_EQ(estimate_from_traces(a).model, estimate_from_traces(b).model);
}

TEST(Estimate, RandomTracesAlwaysSatisfyStructuralZeros) {
  std::mt19937_64 rng(11);
  std::uniform_real_distribution<double> delay(0.0, 480.0);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<LatencyTrace> traces(1 + trial % 3);
    std::int64_t t = 0;
    for (auto& tr : traces)
      for (int i = 0; i < 20; ++i) tr.push_back({t += 10, delay(rng)});
    EstimateOptions opt;
    opt.smoothing = trial % 2 ? 0.5 : 0.0;
    const auto est = estimate_from_traces(traces, opt);
    EXPECT_TRUE(validate(est.model).ok()) << validate(est.model).to_string();
    EXPECT_TRUE(structural_zeros_hold(est.model));
  }
}

TEST(Estimate, SmoothingFillsOnlyAllowedCells) {
  EstimateOptions opt;
  opt.smoothing = 1.0;
  const auto est = estimate_from_traces({binned({0, 2, 2})}, opt);
  EXPECT_GT(est.model(0, 0), 0.0);
  EXPECT_GT(est.model(0, 1), 0.0);
  EXPECT_EQ(est.model(0, 2), 0.0);
  EXPECT_GT(est.model(2, 2), 0.0);
}

TEST(Estimate, MalformedInputsAreRejected) {
  EXPECT_THROW(estimate_from_traces({}), std::invalid_argument);
  EXPECT_THROW(estimate_from_traces({binned({0})}), std::invalid_argument);
  EXPECT_THROW(estimate_from_traces({LatencyTrace{{0, 10.0}, {0, 20.0}}}), std::invalid_argument);
  EXPECT_THROW(estimate_from_traces({LatencyTrace{{0, 10.0}, {5, -1.0}}}), std::invalid_argument);
  EstimateOptions bad;
  bad.bin_width_ms = 0;
  EXPECT_THROW(estimate_from_traces({binned({0, 1})}, bad), std::invalid_argument);
}

TEST(Validate, IdentityIsValid) {
  DelayModel d(2, {{1, 0, 0}, {0, 1, 0}, {0, 0, 1}});
  EXPECT_TRUE(validate(d).ok());
}

TEST(Validate, ForbiddenJumpIsReported) {
  DelayModel d(2, {{0.9, 0, 0.1}, {0, 1, 0}, {0, 0, 1}});
  const auto rep = validate(d);
  ASSERT_FALSE(rep.ok());
  EXPECT_NE(rep.to_string().find("forbidden jump 0->2"), std::string::npos);
}

TEST(Validate, RowSumIsReportedWithIndex) {
  DelayModel d(1, {{1, 0}, {0.4, 0.5}});
  EXPECT_NE(validate(d).to_string().find("row 1 sums to"), std::string::npos);
}

TEST(Reference, FullSupportOverAllowedCells) {
  for (int tau = 0; tau <= 4; ++tau) {
    const auto d = DelayModel::reference(tau);
    EXPECT_TRUE(validate(d).ok());
    EXPECT_EQ(d.reachable_top(), tau);
    for (int t = 0; t <= tau; ++t)
      for (int u = 0; u <= std::min(t + 1, tau); ++u) EXPECT_GT(d(t, u), 0.0) << t << "->" << u;
  }
}

TEST(Io, TextRoundTripAndValidationOnRead) {
  const auto d = DelayModel::reference(3);
  std::istringstream in(delay_model_text(d));
  EXPECT_EQ(read_delay_model(in), d);
  std::istringstream bad("tau_max 1\n0 1\n0.5 0.4\n");
  EXPECT_THROW(read_delay_model(bad), ParseError);
}

TEST(Io, TraceCsvParsing) {
  std::istringstream in("timestamp_ms,delay_ms\n0,12.5\n\n100,250\n");
  const auto tr = read_trace_csv(in);
  ASSERT_EQ(tr.size(), 2u);
  EXPECT_EQ(tr[1].timestamp_ms, 100);
  EXPECT_EQ(tr[1].delay_ms, 250.0);
  std::istringstream nohdr("0,1\n");
  EXPECT_THROW(read_trace_csv(nohdr), ParseError);
  std::istringstream junk("timestamp_ms,delay_ms\n0,abc\n");
  try {
    read_trace_csv(junk);
    FAIL();
  } catch (const ParseError& e) {
    EXPECT_EQ(e.line(), 2u);
  }
}
