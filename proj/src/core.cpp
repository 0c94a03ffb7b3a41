#include "maxs/core.hpp"

#include <numeric>
#include <stdexcept>

#include "maxs/errors.hpp"

namespace maxs {

namespace {

template <typename Enum, std::size_t N>
Enum parse_enum(std::string_view s, const std::string_view (&names)[N], const char* what) {
  for (std::size_t i = 0; i < N; ++i)
    if (names[i] == s) return static_cast<Enum>(i);
  throw Error(std::string("unknown ") + what + ": " + std::string(s));
}

constexpr std::string_view kStepKinds[] = {"Reason", "SearchCall", "CodeCall", "ToolResult",
                                           "FinalAnswer"};
constexpr std::string_view kToolKinds[] = {"Search", "Code"};
constexpr std::string_view kToolStatuses[] = {"Ok", "Timeout", "Error"};
constexpr std::string_view kTrajectoryStatuses[] = {"InProgress", "Answered", "Truncated",
                                                    "Failed"};

}  // namespace

std::string_view to_string(StepKind kind) { return kStepKinds[static_cast<int>(kind)]; }
std::string_view to_string(ToolKind kind) { return kToolKinds[static_cast<int>(kind)]; }
std::string_view to_string(ToolStatus status) { return kToolStatuses[static_cast<int>(status)]; }
std::string_view to_string(TrajectoryStatus status) {
  return kTrajectoryStatuses[static_cast<int>(status)];
}
StepKind step_kind_from_string(std::string_view s) {
  return parse_enum<StepKind>(s, kStepKinds, "step kind");
}
ToolKind tool_kind_from_string(std::string_view s) {
  return parse_enum<ToolKind>(s, kToolKinds, "tool kind");
}
ToolStatus tool_status_from_string(std::string_view s) {
  return parse_enum<ToolStatus>(s, kToolStatuses, "tool status");
}
TrajectoryStatus trajectory_status_from_string(std::string_view s) {
  return parse_enum<TrajectoryStatus>(s, kTrajectoryStatuses, "trajectory status");
}

double mean_logprob(std::span<const double> token_logprobs) noexcept {
  if (token_logprobs.empty()) return 0.0;
  return std::accumulate(token_logprobs.begin(), token_logprobs.end(), 0.0) /
         static_cast<double>(token_logprobs.size());
}

Step Step::generated(StepKind kind, std::string text, std::vector<double> token_logprobs,
                     std::int64_t input_tokens, std::int64_t output_tokens) {
  if (kind == StepKind::ToolResult) throw std::invalid_argument("ToolResult is not model-generated");
  for (double lp : token_logprobs)
    if (!(lp <= 0.0)) throw std::invalid_argument("token log-probabilities must be <= 0");
  Step step;
  step.kind = kind;
  step.text = std::move(text);
  step.g = mean_logprob(token_logprobs);
  step.token_logprobs = std::move(token_logprobs);
  step.input_tokens = input_tokens;
  step.output_tokens = output_tokens;
  return step;
}

Step Step::tool_result(const ToolInvocation& invocation) {
  Step step;
  step.kind = StepKind::ToolResult;
  if (invocation.response) {
    step.text = *invocation.response;
  } else {
    step.text = invocation.status == ToolStatus::Timeout ? "[tool timed out]" : "[tool error]";
  }
  step.tool = invocation;
  return step;
}

const Step& Trajectory::append(Step step) {
  if (status_ != TrajectoryStatus::InProgress)
    throw std::logic_error("cannot append to a finished trajectory");
  const int next = static_cast<int>(steps_.size()) + 1;
  if (step.index != 0 && step.index != next)
    throw std::logic_error("step index " + std::to_string(step.index) + " breaks contiguity (expected " +
                           std::to_string(next) + ")");
  const bool needs_tool = step.kind == StepKind::SearchCall || step.kind == StepKind::CodeCall ||
                          step.kind == StepKind::ToolResult;
  if (needs_tool != step.tool.has_value())
    throw std::logic_error("tool invocation must be present exactly for tool steps");
  step.index = next;
  steps_.push_back(std::move(step));
  if (steps_.back().kind == StepKind::FinalAnswer) status_ = TrajectoryStatus::Answered;
  return steps_.back();
}

int Trajectory::model_step_count() const noexcept {
  int n = 0;
  for (const auto& s : steps_) n += s.is_model_generated() ? 1 : 0;
  return n;
}

std::vector<std::string> config_violations(const SearchConfig& c) {
  std::vector<std::string> out;
  if (c.beam_width < 1) out.emplace_back("K >= 1 violated");
  if (c.rollouts < 1) out.emplace_back("M >= 1 violated");
  if (c.lookahead < 1) out.emplace_back("N >= 1 violated");
  if (c.max_steps < 1) out.emplace_back("max_steps >= 1 violated");
  if (!(c.temperature > 0.0)) out.emplace_back("τ > 0 violated");
  if (!(c.alpha >= 0.0)) out.emplace_back("α >= 0 violated");
  if (!(c.beta >= 0.0)) out.emplace_back("β >= 0 violated");
  if (!(c.alpha + c.beta <= 1.0)) out.emplace_back("α+β ≤ 1 violated");
  if (!(c.convergence_threshold >= 0.0)) out.emplace_back("δ >= 0 violated");
  if (!(c.top_p > 0.0 && c.top_p <= 1.0)) out.emplace_back("top_p in (0,1] violated");
  if (c.lookahead_top_p && !(*c.lookahead_top_p > 0.0 && *c.lookahead_top_p <= 1.0))
    out.emplace_back("lookahead top_p in (0,1] violated");
  if (!(c.discount > 0.0 && c.discount <= 1.0)) out.emplace_back("γ in (0,1] violated");
  if (c.parallelism < 1) out.emplace_back("parallelism >= 1 violated");
  if (c.best_of_n < 1) out.emplace_back("best_of_n >= 1 violated");
  return out;
}

ValidatedConfig validate_config(const SearchConfig& config) {
  auto violations = config_violations(config);
  if (!violations.empty()) throw ConfigError(std::move(violations));
  return ValidatedConfig(config);
}

PromptMessages render_context(const Trajectory& trajectory, const std::string& system_prompt) {
  if (trajectory.status() != TrajectoryStatus::InProgress)
    throw std::logic_error("render_context requires an in-progress trajectory");
  PromptMessages messages;
  messages.reserve(trajectory.steps().size() + 2);
  messages.push_back({"system", system_prompt, std::nullopt});
  messages.push_back({"user", trajectory.question(), trajectory.image()});
  for (const auto& step : trajectory.steps())
    messages.push_back({step.kind == StepKind::ToolResult ? "tool" : "assistant", step.text,
                        std::nullopt});
  return messages;
}

std::string context_fingerprint(const PromptMessages& messages) {
  std::string out;
  bool first = true;
  for (const auto& m : messages) {
    if (m.role == "system") continue;
    if (!first) out += "␞";
    out += m.content;
    first = false;
  }
  return out;
}

}  // namespace maxs
