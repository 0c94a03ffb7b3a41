#pragma once

// Chat-completions client behind the StepPolicy contract.

#include <chrono>
#include <memory>
#include <mutex>
#include <nlohmann/json.hpp>
#include <string>
#include <vector>

#include "maxs/policy.hpp"

namespace maxs {

/// Environment variable holding the bearer credential.
inline constexpr const char* kApiKeyEnv = "MAXS_API_KEY";

struct RemotePolicyConfig {
  std::string endpoint;  // e.g. http://localhost:8000/v1/chat/completions
  std::string model;
  std::int64_t request_timeout_ms = 120000;
  int max_retries = 2;  // three attempts in total
  std::int64_t initial_backoff_ms = 500;
  std::vector<std::string> stop_sequences;  // empty: delimiter + directive closers
  std::string step_delimiter = "\n\n";
  int max_tokens = 512;
  std::string api_key;  // usually filled from kApiKeyEnv

  /// Reads the credential from the environment when api_key is empty.
  static RemotePolicyConfig with_env_credential(RemotePolicyConfig config);
};

/// Request body for one step. Tool results are sent as user turns because
/// plain chat templates have no free-standing tool role.
nlohmann::json build_chat_request(const PromptMessages& context, const SampleParams& params,
                                  const RemotePolicyConfig& config);

/// Turns a completion into one Step: repairs a closing marker swallowed by
/// the stop sequence, cuts at the step boundary and keeps the log-probs of
/// the surviving tokens. Throws EmptyStep or PolicyError.
Step parse_chat_response(const nlohmann::json& response, const RemotePolicyConfig& config,
                         bool require_logprobs);

class RemotePolicy final : public StepPolicy {
 public:
  /// Throws ConfigError for a missing endpoint/model or a non-positive timeout.
  explicit RemotePolicy(RemotePolicyConfig config);
  ~RemotePolicy() override;

  PolicyCapabilities capabilities() const override { return {true, true, false}; }

  /// Single-turn completion without log-probs, used by the LLM search tool.
  std::string complete_text(const std::string& prompt);

  const RemotePolicyConfig& config() const noexcept { return config_; }

 protected:
  Step do_sample(const PromptMessages& context, const SampleParams& params, Rng& rng) override;

 private:
  nlohmann::json post_with_retry(const nlohmann::json& body);

  RemotePolicyConfig config_;
  std::string base_;  // scheme://host[:port]
  std::string path_;
};

}  // namespace maxs
