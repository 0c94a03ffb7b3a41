#pragma once

// Tool directives embedded in step text, the sandboxed code interpreter and
// the search providers.
//
// Directive grammar (one operation per step, the first directive wins):
//   <search>query</search>
//   ```python            (language tag optional)
//   program
//   ```
//   <answer>final answer</answer>

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <string>
#include <vector>

#include "maxs/core.hpp"

namespace maxs {

struct ToolDirective {
  enum class Kind { None, Search, Code, Answer };
  Kind kind = Kind::None;
  std::string payload;

  bool operator==(const ToolDirective&) const = default;
};

/// Throws MalformedDirective when an opening tag or fence is never closed.
ToolDirective parse_directive(std::string_view step_text);

/// Inverse of parse_directive for well-formed payloads.
std::string render_directive(const ToolDirective& directive);

StepKind step_kind_for(const ToolDirective& directive) noexcept;

/// Step kind for raw step text; malformed directives count as plain reasoning.
StepKind classify_step_text(std::string_view step_text);

/// Answer payload of the trajectory's FinalAnswer step, if any.
std::optional<std::string> final_answer(const Trajectory& trajectory);

/// Closing markers that end a step, used as backend stop sequences.
std::vector<std::string> directive_stop_sequences();

struct SandboxPolicy {
  std::int64_t wall_time_ms = 5000;
  std::int64_t memory_bytes = 256LL * 1024 * 1024;
  bool network_access = false;
  std::filesystem::path scratch_root = std::filesystem::temp_directory_path();
};

inline constexpr std::size_t kMaxToolOutputBytes = 4096;
inline constexpr std::string_view kTruncationMarker = "\n[output truncated]";

/// Runs programs through an external interpreter in a throwaway directory
/// with resource limits. Each execution gets its own scratch directory,
/// which is removed afterwards.
class CodeSandbox {
 public:
  /// Throws InterpreterMissing when `interpreter` is not an executable file.
  CodeSandbox(std::filesystem::path interpreter, SandboxPolicy policy);

  ToolInvocation run(const std::string& program) const;

  const SandboxPolicy& policy() const noexcept { return policy_; }
  const std::filesystem::path& interpreter() const noexcept { return interpreter_; }

 private:
  std::filesystem::path interpreter_;
  SandboxPolicy policy_;
};

ToolInvocation run_code(const std::string& program, const CodeSandbox& sandbox);

class SearchProvider {
 public:
  virtual ~SearchProvider() = default;
  /// Never throws for lookup misses; those come back with status Error.
  virtual ToolInvocation search(const std::string& query) = 0;
};

struct CorpusDocument {
  std::string id;
  std::string text;
};

/// Token-set overlap retrieval over an in-memory corpus. Ties go to the
/// lexicographically smallest document id.
class StaticCorpus final : public SearchProvider {
 public:
  explicit StaticCorpus(std::vector<CorpusDocument> documents);
  /// Line-delimited {"id": ..., "text": ...} records.
  static StaticCorpus load(const std::filesystem::path& path);

  ToolInvocation search(const std::string& query) override;
  std::size_t size() const noexcept { return documents_.size(); }

 private:
  std::vector<CorpusDocument> documents_;
};

/// Lowercased alphanumeric tokens.
std::vector<std::string> tokenize_words(std::string_view text);

/// Forwards the query to a single-turn completion function.
class RemoteSearch final : public SearchProvider {
 public:
  using Completion = std::function<std::string(const std::string& prompt)>;
  explicit RemoteSearch(Completion complete) : complete_(std::move(complete)) {}
  ToolInvocation search(const std::string& query) override;

 private:
  Completion complete_;
};

ToolInvocation run_search(const std::string& query, SearchProvider& provider);

/// What the decoder calls to execute a tool directive.
class ToolRuntime {
 public:
  virtual ~ToolRuntime() = default;
  virtual ToolInvocation execute(const ToolDirective& directive) = 0;
  /// A runtime for lookahead branches; nothing it does is committed.
  virtual std::unique_ptr<ToolRuntime> scratch() = 0;
};

/// Code sandbox plus search provider. Search results are cached by query
/// and shared with scratch runtimes, so lookahead searches are answered
/// from the cache when possible.
class StandardToolRuntime final : public ToolRuntime {
 public:
  StandardToolRuntime(std::shared_ptr<const CodeSandbox> sandbox,
                      std::shared_ptr<SearchProvider> search);

  ToolInvocation execute(const ToolDirective& directive) override;
  std::unique_ptr<ToolRuntime> scratch() override;

 private:
  struct SearchCache {
    std::mutex mutex;
    std::map<std::string, ToolInvocation> entries;
  };
  StandardToolRuntime(std::shared_ptr<const CodeSandbox> sandbox,
                      std::shared_ptr<SearchProvider> search, std::shared_ptr<SearchCache> cache);

  std::shared_ptr<const CodeSandbox> sandbox_;
  std::shared_ptr<SearchProvider> search_;
  std::shared_ptr<SearchCache> cache_;
};

/// Tool runtime that answers from fixed tables and logs every call. Used by
/// deterministic runs and by the lookahead-isolation checks.
class ScriptedToolRuntime final : public ToolRuntime {
 public:
  struct CallRecord {
    ToolDirective directive;
    bool committed;
  };

  ScriptedToolRuntime() : log_(std::make_shared<Log>()) {}

  void set_response(ToolDirective::Kind kind, const std::string& request, std::string response);

  ToolInvocation execute(const ToolDirective& directive) override;
  std::unique_ptr<ToolRuntime> scratch() override;

  std::vector<CallRecord> calls() const;
  std::size_t committed_calls() const;

 private:
  struct Log {
    mutable std::mutex mutex;
    std::map<std::pair<int, std::string>, std::string> responses;
    std::vector<CallRecord> calls;
  };
  ScriptedToolRuntime(std::shared_ptr<Log> log, bool committed)
      : log_(std::move(log)), committed_(committed) {}

  std::shared_ptr<Log> log_;
  bool committed_ = true;
};

}  // namespace maxs
