#include <gtest/gtest.h>

#include "maxs/core.hpp"
#include "maxs/errors.hpp"
#include "maxs/rng.hpp"

using namespace maxs;

namespace {

bool has_violation(const SearchConfig& c, const std::string& needle) {
  for (const auto& v : config_violations(c))
    if (v == needle) return true;
  return false;
}

}  // namespace

TEST(SearchConfigTest, DefaultsMatchPublishedSettings) {
  const SearchConfig c;
  EXPECT_EQ(c.beam_width, 1);
  EXPECT_EQ(c.rollouts, 4);
  EXPECT_EQ(c.lookahead, 4);
  EXPECT_EQ(c.temperature, 0.6);
  EXPECT_EQ(c.alpha, 0.3);
  EXPECT_EQ(c.beta, 0.2);
  EXPECT_EQ(c.convergence_threshold, 0.002);
  EXPECT_EQ(c.max_steps, 13);
  EXPECT_EQ(c.top_p, 0.95);
  EXPECT_EQ(c.discount, 1.0);
  EXPECT_NO_THROW(validate_config(c));
}

TEST(SearchConfigTest, WeightSumAboveOneIsNamed) {
  SearchConfig c;
  c.alpha = 0.7;
  c.beta = 0.5;
  EXPECT_TRUE(has_violation(c, "α+β ≤ 1 violated"));
  EXPECT_THROW(validate_config(c), ConfigError);
}

TEST(SearchConfigTest, ZeroTemperatureIsNamed) {
  SearchConfig c;
  c.temperature = 0.0;
  EXPECT_TRUE(has_violation(c, "τ > 0 violated"));
}

TEST(SearchConfigTest, EveryViolationIsReported) {
  SearchConfig c;
  c.beam_width = 0;
  c.rollouts = 0;
  c.lookahead = 0;
  c.max_steps = 0;
  c.top_p = 1.5;
  try {
    validate_config(c);
    FAIL() << "expected ConfigError";
  } catch (const ConfigError& e) {
    EXPECT_EQ(e.violations().size(), 5u);
  }
  c = SearchConfig{};
  c.top_p = 0.0;
  EXPECT_TRUE(has_violation(c, "top_p in (0,1] violated"));
  c.top_p = 1.0;
  EXPECT_TRUE(config_violations(c).empty());
}

TEST(StepTest, GeneratedStepMeanLogprob) {
  const auto s = Step::generated(StepKind::Reason, "x=2", {-0.1, -0.2}, 3, 2);
  EXPECT_NEAR(s.g, -0.15, 1e-15);
  EXPECT_LE(s.g, 0.0);
  EXPECT_THROW(Step::generated(StepKind::Reason, "bad", {0.1}, 0, 1), std::invalid_argument);
  EXPECT_EQ(Step::generated(StepKind::Reason, "none", {}, 0, 0).g, 0.0);
}

TEST(StepTest, ToolResultCarriesInvocationAndZeroG) {
  ToolInvocation ok{ToolKind::Code, "print(4)", "4", 3, ToolStatus::Ok};
  const auto r = Step::tool_result(ok);
  EXPECT_EQ(r.kind, StepKind::ToolResult);
  EXPECT_EQ(r.text, "4");
  EXPECT_EQ(r.g, 0.0);
  ASSERT_TRUE(r.tool);
  ToolInvocation to{ToolKind::Code, "while 1: pass", std::nullopt, 5000, ToolStatus::Timeout};
  EXPECT_EQ(Step::tool_result(to).text, "[tool timed out]");
}

TEST(TrajectoryTest, AppendKeepsIndicesContiguous) {
  Trajectory t("t1", "q");
  t.append(Step::generated(StepKind::Reason, "a", {-1}, 0, 1));
  t.append(Step::generated(StepKind::Reason, "b", {-1}, 0, 1));
  EXPECT_EQ(t.steps()[0].index, 1);
  EXPECT_EQ(t.steps()[1].index, 2);
  auto bad = Step::generated(StepKind::Reason, "c", {-1}, 0, 1);
  bad.index = 7;
  EXPECT_THROW(t.append(bad), std::logic_error);
  bad.index = 3;
  EXPECT_NO_THROW(t.append(bad));
}

TEST(TrajectoryTest, ToolPresenceMatchesKind) {
  Trajectory t("t1", "q");
  EXPECT_THROW(t.append(Step::generated(StepKind::CodeCall, "```\nx\n```", {-1}, 0, 1)), std::logic_error);
  auto reason = Step::generated(StepKind::Reason, "a", {-1}, 0, 1);
  reason.tool = ToolInvocation{};
  EXPECT_THROW(t.append(reason), std::logic_error);
}

TEST(TrajectoryTest, FinalAnswerClosesTrajectory) {
  Trajectory t("t1", "q");
  t.append(Step::generated(StepKind::FinalAnswer, "<answer>1</answer>", {-1}, 0, 1));
  EXPECT_EQ(t.status(), TrajectoryStatus::Answered);
  EXPECT_THROW(t.append(Step::generated(StepKind::Reason, "late", {-1}, 0, 1)), std::logic_error);
  EXPECT_THROW(render_context(t, "sys"), std::logic_error);
}

TEST(RenderContextTest, EmptyTrajectoryHasSystemAndTask) {
  const Trajectory t("t1", "What is 2+2?");
  const auto m = render_context(t, "sys");
  ASSERT_EQ(m.size(), 2u);
  EXPECT_EQ(m[0].role, "system");
  EXPECT_EQ(m[0].content, "sys");
  EXPECT_EQ(m[1].role, "user");
  EXPECT_EQ(m[1].content, "What is 2+2?");
}

TEST(RenderContextTest, ToolResultsUseToolRole) {
  Trajectory t("t1", "q");
  t.append(Step::generated(StepKind::Reason, "Let x=2", {-0.5}, 0, 1));
  t.append(Step::tool_result(ToolInvocation{ToolKind::Code, "print(4)", "4", 1, ToolStatus::Ok}));
  const auto m = render_context(t, "sys");
  ASSERT_EQ(m.size(), 4u);
  EXPECT_EQ(m[2].role, "assistant");
  EXPECT_EQ(m[2].content, "Let x=2");
  EXPECT_EQ(m[3].role, "tool");
  EXPECT_EQ(m[3].content, "4");
  EXPECT_EQ(context_fingerprint(m), "q␞Let x=2␞4");
}

TEST(RenderContextTest, Deterministic) {
  Trajectory t("t1", "q", Attachment{"https://example.org/a.png"});
  t.append(Step::generated(StepKind::Reason, "step", {-0.5}, 0, 1));
  EXPECT_EQ(render_context(t, "sys"), render_context(t, "sys"));
  EXPECT_EQ(render_context(t, "sys")[1].image->data, "https://example.org/a.png");
}

TEST(TokenUsageTest, Arithmetic) {
  TokenUsage a{1, 2, 1}, b{10, 20, 2};
  const auto c = a + b;
  EXPECT_EQ(c, (TokenUsage{11, 22, 3}));
  EXPECT_EQ(c.total(), 33);
}

TEST(EnumNamesTest, RoundTrip) {
  for (auto k : {StepKind::Reason, StepKind::SearchCall, StepKind::CodeCall, StepKind::ToolResult, StepKind::FinalAnswer})
    EXPECT_EQ(step_kind_from_string(to_string(k)), k);
  for (auto s : {TrajectoryStatus::InProgress, TrajectoryStatus::Answered, TrajectoryStatus::Truncated,
                 TrajectoryStatus::Failed})
    EXPECT_EQ(trajectory_status_from_string(to_string(s)), s);
  for (auto s : {ToolStatus::Ok, ToolStatus::Timeout, ToolStatus::Error}) EXPECT_EQ(tool_status_from_string(to_string(s)), s);
  for (auto k : {ToolKind::Search, ToolKind::Code}) EXPECT_EQ(tool_kind_from_string(to_string(k)), k);
}

TEST(RngTest, SplitIgnoresDrawHistory) {
  Rng a(42), b(42);
  for (int i = 0; i < 10; ++i) b.next();
  EXPECT_EQ(a.split(3).next(), b.split(3).next());
  EXPECT_NE(a.split(3).next(), a.split(4).next());
  Rng u(7);
  for (int i = 0; i < 1000; ++i) {
    const double x = u.uniform();
    EXPECT_GE(x, 0.0);
    EXPECT_LT(x, 1.0);
  }
}

TEST(RngTest, CategoricalSkipsZeroWeights) {
  Rng r(1);
  const std::vector<double> w{0.0, 1.0, 0.0};
  for (int i = 0; i < 100; ++i) EXPECT_EQ(r.categorical(w), 1u);
}
