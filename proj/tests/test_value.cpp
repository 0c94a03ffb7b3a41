#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "maxs/value.hpp"

using namespace maxs;

namespace {

// Reference: two-pass variance in long double.
double ref_variance(const std::vector<double>& xs) {
  if (xs.size() < 2) return 0.0;
  long double m = 0;
  for (double x : xs) m += x;
  m /= xs.size();
  long double s = 0;
  for (double x : xs) s += (x - m) * (x - m);
  return static_cast<double>(s / xs.size());
}

Rollout make_rollout(std::vector<double> g_seq, double candidate_g = -1.0) {
  Rollout r;
  r.candidate = Step::generated(StepKind::Reason, "c", {candidate_g}, 0, 1);
  r.g_seq = std::move(g_seq);
  return r;
}

}  // namespace

TEST(ForesightTest, SingleRolloutMean) {
  const RolloutGroup g{make_rollout({-1, -1})};
  EXPECT_EQ(foresight(g), -1.0);
}

TEST(ForesightTest, TwoLevelMean) {
  const RolloutGroup g{make_rollout({-1, -1}), make_rollout({-3})};
  EXPECT_EQ(foresight(g), -2.0);
}

TEST(ForesightTest, EmptyLookaheadFallsBackToCandidate) {
  const RolloutGroup g{make_rollout({}, -0.5)};
  EXPECT_EQ(foresight(g), -0.5);
}

TEST(ForesightTest, WeightedGroup) {
  auto a = make_rollout({-1});
  auto b = make_rollout({-3});
  a.weight = 0.75;
  b.weight = 0.25;
  const RolloutGroup g{a, b};
  EXPECT_NEAR(foresight(g), -1.5, 1e-15);
}

TEST(AdvantageTest, Examples) {
  auto z = advantage(-1.0, -1.0, 0.6);
  EXPECT_EQ(z.A, 0.0);
  EXPECT_EQ(z.R_adv, 1.0);
  auto up = advantage(-0.5, -1.1, 0.6);
  EXPECT_NEAR(up.A, 0.6, 1e-15);
  EXPECT_NEAR(up.R_adv, 2.718282, 1e-6);
  auto down = advantage(-1.2, -0.6, 0.6);
  EXPECT_NEAR(down.A, -0.6, 1e-15);
  EXPECT_NEAR(down.R_adv, 0.367879, 1e-6);
  EXPECT_THROW(advantage(0, 0, 0), std::invalid_argument);
}

TEST(StepVarianceTest, Examples) {
  EXPECT_EQ(step_variance(std::vector<double>{-1, -1, -1, -1}), 0.0);
  EXPECT_NEAR(step_variance(std::vector<double>{0, -2}), 1.0, 1e-15);
  EXPECT_NEAR(step_variance(std::vector<double>{-1, -2, -3}), 2.0 / 3.0, 1e-15);
  EXPECT_EQ(step_variance(std::vector<double>{-4}), 0.0);
  EXPECT_EQ(step_variance(std::vector<double>{}), 0.0);
}

TEST(SlopeVarianceTest, Examples) {
  EXPECT_NEAR(slope_variance(std::vector<double>{0, -1, -2, -3}), 0.0, 1e-15);
  EXPECT_NEAR(slope_variance(std::vector<double>{0, -1, -3}), 0.25, 1e-15);
  EXPECT_NEAR(slope_variance(std::vector<double>{0, 0, -2, -2}), 8.0 / 9.0, 1e-15);
  EXPECT_EQ(slope_variance(std::vector<double>{0, -5}), 0.0);
}

TEST(NormalizeTest, Examples) {
  const auto sym = normalize(std::vector<double>{3, 3, 3, 3}, 0.6);
  for (double x : sym) EXPECT_NEAR(x, 0.25, 1e-15);
  const auto two = normalize(std::vector<double>{1, 0}, 0.6);
  EXPECT_NEAR(two[0], 0.841131, 1e-6);
  EXPECT_NEAR(two[1], 0.158869, 1e-6);
  EXPECT_EQ(normalize(std::vector<double>{-7}, 0.6), std::vector<double>{1.0});
  EXPECT_THROW(normalize(std::vector<double>{}, 0.6), std::invalid_argument);
}

TEST(NormalizeTest, LargeScoresDoNotOverflow) {
  const auto n = normalize(std::vector<double>{1000, 999}, 0.01);
  EXPECT_TRUE(std::isfinite(n[0]));
  EXPECT_NEAR(n[0] + n[1], 1.0, 1e-12);
}

TEST(CombinedRewardTest, Examples) {
  EXPECT_EQ(combined_reward(0.37, 0.9, 0.1, 0.0, 0.0), 0.37);
  EXPECT_NEAR(combined_reward(0.8, 0.5, 0.5, 0.3, 0.2), 0.65, 1e-15);
  for (double a : {0.0, 0.3, 0.5, 1.0})
    for (double b : {0.0, 0.2, 1.0 - a}) EXPECT_NEAR(combined_reward(0.4, 0.4, 0.4, a, b), 0.4, 1e-15);
}

TEST(EvaluateCandidatesTest, IdenticalGroupsGetHalf) {
  const std::vector<RolloutGroup> groups{{make_rollout({-1, -2})}, {make_rollout({-1, -2})}};
  const auto b = evaluate_candidates(groups, -1.0, SearchConfig{});
  ASSERT_EQ(b.size(), 2u);
  for (const auto& x : b) {
    EXPECT_NEAR(x.norm_adv, 0.5, 1e-15);
    EXPECT_NEAR(x.combined, 0.5, 1e-15);
  }
}

TEST(EvaluateCandidatesTest, HigherForesightWins) {
  const std::vector<RolloutGroup> groups{{make_rollout({-1, -1})}, {make_rollout({-2, -2})}};
  const SearchConfig cfg;
  const auto b = evaluate_candidates(groups, -1.5, cfg);
  EXPECT_GT(b[0].combined, b[1].combined);
  // Hand evaluation: R_adv = exp(±0.5/0.6), variances zero.
  const double r0 = std::exp(0.5 / 0.6), r1 = std::exp(-0.5 / 0.6);
  const double e0 = std::exp(r0 / 0.6), e1 = std::exp(r1 / 0.6);
  const double n0 = e0 / (e0 + e1);
  EXPECT_NEAR(b[0].norm_adv, n0, 1e-12);
  EXPECT_NEAR(b[0].combined, 0.5 * n0 + 0.3 * 0.5 + 0.2 * 0.5, 1e-12);
}

TEST(EvaluateCandidatesTest, SingleCandidateCombinedIsOne) {
  const std::vector<RolloutGroup> groups{{make_rollout({-1, -3, -2})}};
  const auto b = evaluate_candidates(groups, -4.0, SearchConfig{});
  EXPECT_NEAR(b[0].combined, 1.0, 1e-15);
}

TEST(EvaluateCandidatesTest, BreakdownInvariants) {
  std::mt19937_64 gen(5);
  std::uniform_real_distribution<double> u(-5, 0);
  SearchConfig cfg;
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<RolloutGroup> groups(1 + trial % 5);
    for (auto& g : groups)
      for (int r = 0; r < 1 + trial % 3; ++r) {
        std::vector<double> seq(trial % 6);
        for (double& x : seq) x = u(gen);
        g.push_back(make_rollout(seq, u(gen)));
      }
    const double f_prev = u(gen);
    const auto b = evaluate_candidates(groups, f_prev, cfg);
    double sum_adv = 0;
    for (const auto& x : b) {
      EXPECT_EQ(x.A, x.F - f_prev);
      EXPECT_EQ(x.R_adv, std::exp(x.A / cfg.temperature));
      EXPECT_EQ(x.R_step, std::exp(-x.V_step / cfg.temperature));
      EXPECT_EQ(x.R_slope, std::exp(-x.V_slope / cfg.temperature));
      EXPECT_GT(x.R_step, 0.0);
      EXPECT_LE(x.R_step, 1.0);
      EXPECT_LE(x.R_slope, 1.0);
      EXPECT_GE(x.combined, 0.0);
      EXPECT_LE(x.combined, 1.0 + 1e-15);
      sum_adv += x.norm_adv;
    }
    EXPECT_NEAR(sum_adv, 1.0, 1e-12);
  }
}

TEST(ValuePropertyTest, VarianceMatchesTwoPassReference) {
  std::mt19937_64 gen(11);
  std::uniform_real_distribution<double> u(-10, 0);
  for (int i = 0; i < 10000; ++i) {
    std::vector<double> seq(static_cast<std::size_t>(i % 17));
    for (double& x : seq) x = u(gen);
    EXPECT_NEAR(step_variance(seq), ref_variance(seq), 1e-12);
    std::vector<double> slopes;
    for (std::size_t k = 1; k < seq.size(); ++k) slopes.push_back(seq[k] - seq[k - 1]);
    EXPECT_NEAR(slope_variance(seq), slopes.size() < 2 ? 0.0 : ref_variance(slopes), 1e-12);
  }
}

TEST(ValuePropertyTest, SoftmaxShiftInvariance) {
  std::mt19937_64 gen(12);
  std::uniform_real_distribution<double> u(-3, 3);
  for (int i = 0; i < 2000; ++i) {
    std::vector<double> x(1 + i % 6), y;
    for (double& v : x) v = u(gen);
    const double c = 5 * u(gen);
    for (double v : x) y.push_back(v + c);
    const auto a = normalize(x, 0.6), b = normalize(y, 0.6);
    for (std::size_t k = 0; k < x.size(); ++k) EXPECT_NEAR(a[k], b[k], 1e-12);
  }
}

TEST(ValuePropertyTest, RaisingForesightNeverLowersCombined) {
  std::mt19937_64 gen(13);
  std::uniform_real_distribution<double> u(-4, 0);
  for (int i = 0; i < 1000; ++i) {
    std::vector<RolloutGroup> groups(3);
    for (auto& g : groups) g.push_back(make_rollout({u(gen), u(gen), u(gen)}));
    const auto before = evaluate_candidates(groups, -2.0, SearchConfig{});
    // Shift candidate 0 up uniformly: variances unchanged, F rises.
    for (double& x : groups[0][0].g_seq) x += 0.3;
    const auto after = evaluate_candidates(groups, -2.0, SearchConfig{});
    EXPECT_GE(after[0].combined, before[0].combined - 1e-15);
  }
}
