#pragma once

// Task files, grading, run evaluation, paired significance testing and
// report files.

#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "maxs/engine.hpp"
#include "maxs/remote_policy.hpp"
#include "maxs/tools.hpp"

namespace maxs {

/// Line-delimited records {"id", "question", "answer", "grade", "image"}.
/// grade is "exact", "numeric:<tol>" or "choice" and defaults to exact.
/// Throws ParseError (with the line) and DuplicateId.
std::vector<Task> load_tasks(const std::filesystem::path& path);

/// Parses a grade spec into the task's mode and tolerance.
void parse_grade_spec(std::string_view spec, Task& task);

/// Exact: trimmed, case-folded, answer tags stripped. Numeric: relative
/// tolerance with an absolute floor of 1. ChoiceLetter: first letter.
/// Never throws.
bool grade_answer(std::string_view answer, const Task& task);

enum class Method { Maxs, Cot, BestOfN };

std::string_view to_string(Method method);
/// Accepts maxs, cot and bon.
Method method_from_string(std::string_view s);

struct TaskOutcome {
  std::string task_id;
  std::optional<std::string> answer;
  bool correct = false;
  bool failed = false;
  TrajectoryStatus status = TrajectoryStatus::InProgress;
  TokenUsage usage;
  int steps = 0;  // model-generated steps
};

struct RunReport {
  std::string method;
  std::vector<TaskOutcome> outcomes;

  std::size_t correct_count() const noexcept;
  std::size_t failed_count() const noexcept;
  /// Correct over task count; empty when there are no tasks.
  std::optional<double> accuracy() const noexcept;
  TokenUsage total_usage() const noexcept;
  std::int64_t total_tokens() const noexcept { return total_usage().total(); }
  /// Model step count -> number of tasks.
  std::map<int, int> step_histogram() const;
};

struct RunOptions {
  Method method = Method::Maxs;
  int task_parallelism = 1;
  /// One trace file per task (<task id>.jsonl) when set.
  std::optional<std::filesystem::path> trace_dir;
  std::string system_prompt = std::string(kDefaultSystemPrompt);
};

/// Decodes every task and grades its answer. Outcomes keep task order and
/// do not depend on the concurrency bound.
RunReport evaluate_run(std::span<const Task> tasks, StepPolicy& policy, ToolRuntime& tools,
                       const ValidatedConfig& config, const RunOptions& options);

struct McNemarResult {
  int b = 0;  // first correct, second wrong
  int c = 0;  // first wrong, second correct
  double p_value = 1.0;
};

/// Exact two-sided binomial form. Throws std::invalid_argument on no pairs.
McNemarResult mcnemar_test(std::span<const std::pair<bool, bool>> pairs);

/// Pairs two reports by task id. Throws std::invalid_argument when the
/// task sets differ.
McNemarResult mcnemar_test(const RunReport& first, const RunReport& second);

/// Writes report.json, tasks.csv, frontier.csv and steps_histogram.csv.
void emit_reports(std::span<const RunReport> reports, const std::filesystem::path& out_dir,
                  const std::optional<McNemarResult>& comparison = std::nullopt);
void emit_report(const RunReport& report, const std::filesystem::path& out_dir);

/// Everything a CLI run needs besides the task file.
struct RunConfig {
  SearchConfig search;
  std::optional<RemotePolicyConfig> remote;
  SandboxPolicy sandbox;
  std::filesystem::path interpreter = "/usr/bin/python3";
  std::optional<std::filesystem::path> corpus;
  std::optional<std::filesystem::path> scripted_policy;
  std::optional<std::filesystem::path> scripted_tools;
  int task_parallelism = 1;
  std::string system_prompt = std::string(kDefaultSystemPrompt);
};

/// JSON document; unknown keys and ill-typed values raise ConfigError.
RunConfig load_run_config(const std::filesystem::path& path);
RunConfig run_config_from_json(const nlohmann::json& j);

struct RunResources {
  std::unique_ptr<StepPolicy> policy;
  std::unique_ptr<ToolRuntime> tools;
};

/// Scripted policy when one is configured, otherwise the remote endpoint
/// (credential from the environment). Scripted tool tables replace the
/// sandbox and search provider when present; without a corpus, searches go
/// to the remote model. Throws ConfigError when no policy is configured.
RunResources make_resources(const RunConfig& config);

/// Scripted tool tables: {"search": {query: response}, "code": {program: output}}.
void load_scripted_tools(const std::filesystem::path& path, ScriptedToolRuntime& runtime);

}  // namespace maxs
