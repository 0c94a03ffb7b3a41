#pragma once

// Lookahead decoding loop and the baseline decoders.

#include <functional>
#include <string>
#include <vector>

#include "maxs/core.hpp"
#include "maxs/policy.hpp"
#include "maxs/rng.hpp"
#include "maxs/tools.hpp"
#include "maxs/value.hpp"

namespace maxs {

enum class DecodeMode { Lookahead, Autoregressive };

std::string_view to_string(DecodeMode mode);
DecodeMode decode_mode_from_string(std::string_view s);

/// One iteration of the decoding loop for one beam.
struct MetaStepRecord {
  std::string task_id;
  int step_index = 0;  // 1-based meta-step number
  int beam = 0;
  std::vector<RolloutGroup> candidates;
  std::vector<ValueBreakdown> breakdowns;  // empty in Autoregressive mode
  std::size_t chosen = 0;
  bool converged = false;
  DecodeMode mode = DecodeMode::Lookahead;
  TokenUsage usage;       // policy usage spent by this meta-step
  Trajectory trajectory;  // snapshot after the commit

  bool operator==(const MetaStepRecord&) const = default;
};

/// Receives records as they are produced.
class TraceSink {
 public:
  virtual ~TraceSink() = default;
  virtual void meta_step(const MetaStepRecord& record) = 0;
  virtual void result(std::string_view method, const Trajectory& trajectory, int runs) = 0;
};

inline constexpr std::string_view kDefaultSystemPrompt =
    "Solve the task step by step, one short step per message.\n"
    "To look something up, write <search>your query</search>.\n"
    "To compute, write a ```python fenced block that prints the result.\n"
    "When you are done, write <answer>final answer</answer>.";

struct DecodeOptions {
  std::string system_prompt = std::string(kDefaultSystemPrompt);
  TraceSink* trace = nullptr;
};

struct DecodeResult {
  Trajectory trajectory;
  std::vector<MetaStepRecord> records;
};

/// True iff the population variance of the rewards is at most delta.
bool check_convergence(std::span<const double> rewards, double delta);

/// Samples an index from softmax(combined / tau); in greedy mode returns the
/// argmax, ties to the lowest index.
std::size_t select_step(std::span<const ValueBreakdown> breakdowns, double tau, Rng& rng,
                        bool greedy = false);

/// Variant that also weights each candidate by its own policy likelihood:
/// log-weight = candidate mean log-prob + combined / tau.
std::size_t select_step_policy_weighted(std::span<const ValueBreakdown> breakdowns,
                                        std::span<const double> candidate_g, double tau, Rng& rng,
                                        bool greedy = false);

/// Root random stream of one task under one config.
Rng task_rng(const SearchConfig& config, const std::string& task_id);

DecodeResult maxs_decode(const Task& task, StepPolicy& policy, ToolRuntime& tools,
                         const ValidatedConfig& config, const DecodeOptions& options = {});

/// One sampled step per iteration, tools executed as encountered.
DecodeResult cot_decode(const Task& task, StepPolicy& policy, ToolRuntime& tools,
                        const ValidatedConfig& config, const DecodeOptions& options = {});

using TrajectoryScorer = std::function<double(const Trajectory&)>;

/// Mean g over the model-generated steps.
double mean_step_logprob(const Trajectory& trajectory);

/// n independent CoT decodes; returns the best-scoring one with the usage of
/// all n runs. Run 0 uses the same random stream as cot_decode.
DecodeResult best_of_n_decode(const Task& task, StepPolicy& policy, ToolRuntime& tools,
                              const ValidatedConfig& config, int n,
                              const TrajectoryScorer& scorer = mean_step_logprob,
                              const DecodeOptions& options = {});

}  // namespace maxs
