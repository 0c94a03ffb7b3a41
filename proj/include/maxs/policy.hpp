#pragma once

// The step policy contract and its deterministic scripted implementation.

#include <atomic>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "maxs/core.hpp"
#include "maxs/rng.hpp"
#include "maxs/tools.hpp"
#include "maxs/value.hpp"

namespace maxs {

struct PolicyCapabilities {
  bool supports_logprobs = true;
  bool supports_top_p = true;
  bool supports_enumeration = false;
};

struct SampleParams {
  double temperature = 0.6;
  double top_p = 0.95;
  bool greedy = false;
  int max_tokens = 512;
};

struct WeightedStep {
  Step step;
  double probability;
};

/// Abstract step policy. sample() is the counted entry point; every
/// successful response adds its token usage to the gateway counters.
/// Implementations must be safe to call from several threads at once.
class StepPolicy {
 public:
  virtual ~StepPolicy() = default;

  virtual PolicyCapabilities capabilities() const = 0;

  /// One policy call. Throws TransportError, PolicyError or EmptyStep.
  Step sample(const PromptMessages& context, const SampleParams& params, Rng& rng);

  /// Full next-step distribution after nucleus filtering, in the policy's
  /// native order. Only for policies with supports_enumeration; not counted
  /// as a policy call.
  virtual std::vector<WeightedStep> enumerate(const PromptMessages& context, double top_p) const;

  /// Fresh per-step g values for a continuation, when the backend can
  /// re-score text it did not just generate.
  virtual std::optional<std::vector<double>> rescore(const PromptMessages& context,
                                                     const std::vector<Step>& continuation);

  /// Gateway counters: totals over every successful sample() call.
  TokenUsage usage() const noexcept;

 protected:
  virtual Step do_sample(const PromptMessages& context, const SampleParams& params, Rng& rng) = 0;

 private:
  std::atomic<std::int64_t> input_tokens_{0};
  std::atomic<std::int64_t> output_tokens_{0};
  std::atomic<std::int64_t> calls_{0};
};

Step sample_step(StepPolicy& policy, const PromptMessages& context, const SampleParams& params,
                 Rng& rng);

/// Appends a step to a context the way render_context would.
void extend_context(PromptMessages& context, const Step& step);

/// Executes the directive of a tool-call step; malformed directives and a
/// missing runtime come back as status Error.
ToolInvocation execute_step_tool(const Step& step, ToolRuntime* runtime);

/// Extends a candidate with up to `depth` lookahead steps. Tool calls
/// inside the rollout run on `scratch`; the rollout stops early at a
/// FinalAnswer or when the policy has nothing more to say (EmptyStep).
Rollout rollout(StepPolicy& policy, const PromptMessages& context, const Step& candidate, int depth,
                const SampleParams& params, Rng& rng, ToolRuntime* scratch);

inline constexpr std::size_t kMaxEnumeratedPaths = 1'000'000;

/// Every lookahead path of at most `depth` model steps below the candidate,
/// each weighted by its path probability. Throws TreeTooLarge past
/// `max_paths`.
std::vector<Rollout> enumerate_rollouts(const StepPolicy& policy, const PromptMessages& context,
                                        const Step& candidate, int depth, double top_p,
                                        ToolRuntime* scratch,
                                        std::size_t max_paths = kMaxEnumeratedPaths);

/// g value of each model-generated step, from sampling-time log-probs when
/// present and otherwise from the backend. Throws ScoringUnsupported.
std::vector<double> score_continuation(StepPolicy& policy, const PromptMessages& context,
                                       const std::vector<Step>& continuation);

/// Indices kept by nucleus filtering, in original order.
std::vector<std::size_t> nucleus(const std::vector<double>& weights, double top_p);

/// Where a raw completion should be cut to form one step: the end of the
/// first directive when it opens before the delimiter, otherwise the
/// delimiter, otherwise the whole text.
std::size_t step_boundary(std::string_view text, std::string_view delimiter);

// --- scripted policy -------------------------------------------------------

struct ScriptedContinuation {
  std::string text;
  std::vector<double> logprobs;
  double weight = 1.0;
};

/// Finite tree of continuations keyed by context path. A path is the task
/// question followed by the text of every step so far (tool results
/// included).
class ScriptedTree {
 public:
  using Path = std::vector<std::string>;

  /// Throws std::invalid_argument when weights are not positive or do not
  /// sum to 1 within 1e-9, or when a log-probability is positive.
  void add(const Path& path, std::vector<ScriptedContinuation> continuations);

  const std::vector<ScriptedContinuation>* find(const std::string& fingerprint) const;
  std::size_t node_count() const noexcept { return nodes_.size(); }

  static std::string fingerprint(const Path& path);

  /// JSON document {"nodes": [{"path": [...], "continuations": [{"text",
  /// "logprobs", "weight"}]}]}.
  static ScriptedTree load(const std::filesystem::path& file);
  std::string to_json() const;

 private:
  std::map<std::string, std::pair<Path, std::vector<ScriptedContinuation>>> nodes_;
};

/// Deterministic stand-in for a language model. Output tokens are the
/// continuation's log-prob count; input tokens are the whitespace-separated
/// word count of the whole context.
class ScriptedPolicy final : public StepPolicy {
 public:
  explicit ScriptedPolicy(std::shared_ptr<const ScriptedTree> tree) : tree_(std::move(tree)) {}

  PolicyCapabilities capabilities() const override { return {true, true, true}; }
  std::vector<WeightedStep> enumerate(const PromptMessages& context, double top_p) const override;

  const ScriptedTree& tree() const noexcept { return *tree_; }

 protected:
  Step do_sample(const PromptMessages& context, const SampleParams& params, Rng& rng) override;

 private:
  Step make_step(const ScriptedContinuation& c, const PromptMessages& context) const;
  std::shared_ptr<const ScriptedTree> tree_;
};

std::int64_t count_words(const PromptMessages& context);

}  // namespace maxs
