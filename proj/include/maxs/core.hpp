#pragma once

// Trajectory data model shared by the decoder, the gateway, the tools and
// the harness.

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace maxs {

enum class StepKind { Reason, SearchCall, CodeCall, ToolResult, FinalAnswer };
enum class ToolKind { Search, Code };
enum class ToolStatus { Ok, Timeout, Error };
enum class TrajectoryStatus { InProgress, Answered, Truncated, Failed };

std::string_view to_string(StepKind kind);
std::string_view to_string(ToolKind kind);
std::string_view to_string(ToolStatus status);
std::string_view to_string(TrajectoryStatus status);
StepKind step_kind_from_string(std::string_view s);
ToolKind tool_kind_from_string(std::string_view s);
ToolStatus tool_status_from_string(std::string_view s);
TrajectoryStatus trajectory_status_from_string(std::string_view s);

/// One search or code execution. `response` is set iff status is Ok.
struct ToolInvocation {
  ToolKind tool_kind = ToolKind::Code;
  std::string request;
  std::optional<std::string> response;
  std::int64_t wall_time_ms = 0;
  ToolStatus status = ToolStatus::Error;

  bool operator==(const ToolInvocation&) const = default;
};

struct TokenUsage {
  std::int64_t input_tokens = 0;
  std::int64_t output_tokens = 0;
  std::int64_t policy_calls = 0;

  std::int64_t total() const noexcept { return input_tokens + output_tokens; }
  TokenUsage& operator+=(const TokenUsage& o) noexcept {
    input_tokens += o.input_tokens;
    output_tokens += o.output_tokens;
    policy_calls += o.policy_calls;
    return *this;
  }
  friend TokenUsage operator+(TokenUsage a, const TokenUsage& b) noexcept { return a += b; }
  bool operator==(const TokenUsage&) const = default;
};

/// Mean of per-token log-probabilities; 0 for an empty sequence.
double mean_logprob(std::span<const double> token_logprobs) noexcept;

struct Step {
  int index = 0;  // 1-based position once committed, 0 while a candidate
  StepKind kind = StepKind::Reason;
  std::string text;
  std::vector<double> token_logprobs;
  double g = 0.0;
  std::int64_t input_tokens = 0;
  std::int64_t output_tokens = 0;
  std::optional<ToolInvocation> tool;

  /// Builds a model-generated step, deriving g from the log-probabilities.
  static Step generated(StepKind kind, std::string text, std::vector<double> token_logprobs,
                        std::int64_t input_tokens, std::int64_t output_tokens);
  /// Builds the ToolResult step that follows a tool call.
  static Step tool_result(const ToolInvocation& invocation);

  bool is_model_generated() const noexcept { return kind != StepKind::ToolResult; }
  bool is_tool_call() const noexcept {
    return kind == StepKind::SearchCall || kind == StepKind::CodeCall;
  }

  bool operator==(const Step&) const = default;
};

/// Opaque image attachment, forwarded to the remote policy untouched.
struct Attachment {
  std::string data;  // URL, data: URI or raw base64
  bool operator==(const Attachment&) const = default;
};

struct Task {
  enum class GradeMode { Exact, Numeric, ChoiceLetter };

  std::string id;
  std::string question;
  std::string gold_answer;
  GradeMode grade_mode = GradeMode::Exact;
  double tolerance = 0.0;  // Numeric only, > 0
  std::optional<Attachment> image;
};

class Trajectory {
 public:
  Trajectory() = default;
  Trajectory(std::string task_id, std::string question, std::optional<Attachment> image = {})
      : task_id_(std::move(task_id)), question_(std::move(question)), image_(std::move(image)) {}
  explicit Trajectory(const Task& task) : Trajectory(task.id, task.question, task.image) {}

  const std::string& task_id() const noexcept { return task_id_; }
  const std::string& question() const noexcept { return question_; }
  const std::optional<Attachment>& image() const noexcept { return image_; }
  const std::vector<Step>& steps() const noexcept { return steps_; }
  TrajectoryStatus status() const noexcept { return status_; }
  const TokenUsage& usage() const noexcept { return usage_; }

  /// Appends a step, assigning the next contiguous index. Throws
  /// std::logic_error if the trajectory is no longer in progress or if
  /// the step's own index is set and is not the next one.
  const Step& append(Step step);

  void set_status(TrajectoryStatus status) noexcept { status_ = status; }
  void add_usage(const TokenUsage& delta) noexcept { usage_ += delta; }
  void set_usage(const TokenUsage& usage) noexcept { usage_ = usage; }

  int model_step_count() const noexcept;

  bool operator==(const Trajectory&) const = default;

 private:
  std::string task_id_;
  std::string question_;
  std::optional<Attachment> image_;
  std::vector<Step> steps_;
  TrajectoryStatus status_ = TrajectoryStatus::InProgress;
  TokenUsage usage_;
};

struct SearchConfig {
  int beam_width = 1;          // K
  int rollouts = 4;            // M
  int lookahead = 4;           // N
  double temperature = 0.6;    // tau
  double alpha = 0.3;          // step-variance weight
  double beta = 0.2;           // slope-variance weight
  double convergence_threshold = 0.002;  // delta
  int max_steps = 13;
  double top_p = 0.95;
  std::uint64_t seed = 0;
  double discount = 1.0;  // gamma, read by the oracle only

  // Engine switches.
  bool use_convergence = true;
  bool greedy = false;
  bool policy_weighted_selection = false;
  bool exhaustive = false;  // enumerate candidates and rollouts when the policy allows it
  std::optional<double> lookahead_top_p;
  int parallelism = 4;
  int best_of_n = 4;

  double rollout_top_p() const noexcept { return lookahead_top_p.value_or(top_p); }
};

/// A SearchConfig whose invariants have been checked. Only validate_config
/// produces one.
class ValidatedConfig {
 public:
  const SearchConfig& get() const noexcept { return config_; }
  const SearchConfig* operator->() const noexcept { return &config_; }

 private:
  friend ValidatedConfig validate_config(const SearchConfig& config);
  explicit ValidatedConfig(SearchConfig config) : config_(std::move(config)) {}
  SearchConfig config_;
};

/// Names every violated invariant; empty when the config is valid.
std::vector<std::string> config_violations(const SearchConfig& config);

/// Throws ConfigError carrying config_violations() when any invariant fails.
ValidatedConfig validate_config(const SearchConfig& config);

struct Message {
  std::string role;  // system | user | assistant | tool
  std::string content;
  std::optional<Attachment> image;

  bool operator==(const Message&) const = default;
};

using PromptMessages = std::vector<Message>;

/// System prompt, task statement, then one message per step in order.
/// Throws std::logic_error unless the trajectory is in progress.
PromptMessages render_context(const Trajectory& trajectory, const std::string& system_prompt);

/// Context fingerprint: every non-system message body joined by U+241E.
std::string context_fingerprint(const PromptMessages& messages);

}  // namespace maxs
