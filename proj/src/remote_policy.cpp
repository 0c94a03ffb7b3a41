#define CPPHTTPLIB_OPENSSL_SUPPORT
#include "maxs/remote_policy.hpp"

#include <httplib.h>
#include <spdlog/spdlog.h>

#include <cstdlib>
#include <random>
#include <thread>

#include "maxs/errors.hpp"

namespace maxs {

RemotePolicyConfig RemotePolicyConfig::with_env_credential(RemotePolicyConfig config) {
  if (config.api_key.empty())
    if (const char* key = std::getenv(kApiKeyEnv)) config.api_key = key;
  return config;
}

namespace {

nlohmann::json message_json(const Message& m) {
  if (m.role == "tool") return {{"role", "user"}, {"content", "Tool result:\n" + m.content}};
  if (m.image) {
    std::string url = m.image->data;
    if (url.rfind("http://", 0) != 0 && url.rfind("https://", 0) != 0 && url.rfind("data:", 0) != 0)
      url = "data:image/png;base64," + url;
    return {{"role", m.role},
            {"content", nlohmann::json::array({{{"type", "text"}, {"text", m.content}},
                                               {{"type", "image_url"}, {"image_url", {{"url", url}}}}})}};
  }
  return {{"role", m.role}, {"content", m.content}};
}

std::vector<std::string> effective_stops(const RemotePolicyConfig& config) {
  if (!config.stop_sequences.empty()) return config.stop_sequences;
  std::vector<std::string> stops{config.step_delimiter};
  for (auto& s : directive_stop_sequences()) stops.push_back(std::move(s));
  return stops;
}

// Re-appends the closing marker the backend consumed as a stop sequence.
void repair_closing_marker(std::string& text, const nlohmann::json& choice) {
  if (auto it = choice.find("stop_reason"); it != choice.end() && it->is_string()) {
    const auto reason = it->get<std::string>();
    if (reason == "</search>" || reason == "</answer>") {
      text += reason;
      return;
    }
    if (reason == "\n```\n") {
      text += "\n```";
      return;
    }
  }
  const auto finish = choice.value("finish_reason", std::string());
  if (finish != "stop") return;
  auto unclosed = [&](std::string_view open, std::string_view close) {
    const auto o = text.rfind(open);
    return o != std::string::npos && text.find(close, o) == std::string::npos;
  };
  if (unclosed("<search>", "</search>")) {
    text += "</search>";
  } else if (unclosed("<answer>", "</answer>")) {
    text += "</answer>";
  } else {
    std::size_t fences = 0;
    for (auto p = text.find("```"); p != std::string::npos; p = text.find("```", p + 3)) ++fences;
    if (fences % 2 == 1) text += "\n```";
  }
}

}  // namespace

nlohmann::json build_chat_request(const PromptMessages& context, const SampleParams& params,
                                  const RemotePolicyConfig& config) {
  nlohmann::json messages = nlohmann::json::array();
  for (const auto& m : context) messages.push_back(message_json(m));
  return {{"model", config.model},
          {"messages", std::move(messages)},
          {"temperature", params.greedy ? 0.0 : params.temperature},
          {"top_p", params.greedy ? 1.0 : params.top_p},
          {"logprobs", true},
          {"stop", effective_stops(config)},
          {"max_tokens", std::min(params.max_tokens, config.max_tokens)}};
}

Step parse_chat_response(const nlohmann::json& response, const RemotePolicyConfig& config,
                         bool require_logprobs) {
  try {
    const auto& choices = response.at("choices");
    if (!choices.is_array() || choices.empty()) throw PolicyError("response has no choices");
    const auto& choice = choices.at(0);
    const auto& content = choice.at("message").at("content");
    std::string raw = content.is_string() ? content.get<std::string>() : std::string();

    std::vector<std::string> tokens;
    std::vector<double> logprobs;
    if (auto lp = choice.find("logprobs"); lp != choice.end() && lp->is_object()) {
      if (auto c = lp->find("content"); c != lp->end() && c->is_array()) {
        for (const auto& t : *c) {
          tokens.push_back(t.value("token", std::string()));
          logprobs.push_back(std::min(0.0, t.at("logprob").get<double>()));
        }
      }
    }
    if (raw.empty()) throw EmptyStep("backend returned no tokens");

    std::string text = raw;
    repair_closing_marker(text, choice);
    const auto cut = step_boundary(text, config.step_delimiter);
    text.resize(cut);
    while (!text.empty() && (text.back() == '\n' || text.back() == ' ' || text.back() == '\r'))
      text.pop_back();
    if (text.empty()) throw EmptyStep("backend step is empty after segmentation");

    // Keep the log-probs of tokens that start inside the kept text.
    std::size_t consumed = 0, keep = 0;
    for (; keep < tokens.size() && consumed < std::min(cut, raw.size()); ++keep)
      consumed += tokens[keep].size();
    if (tokens.empty()) keep = logprobs.size();
    logprobs.resize(std::min(keep, logprobs.size()));
    if (require_logprobs && logprobs.empty()) throw PolicyError("response lacks token log-probabilities");

    std::int64_t prompt_tokens = 0, completion_tokens = static_cast<std::int64_t>(logprobs.size());
    if (auto u = response.find("usage"); u != response.end() && u->is_object()) {
      prompt_tokens = u->value("prompt_tokens", std::int64_t{0});
      completion_tokens = u->value("completion_tokens", completion_tokens);
    }
    const auto kind = classify_step_text(text);
    return Step::generated(kind, std::move(text), std::move(logprobs), prompt_tokens, completion_tokens);
  } catch (const nlohmann::json::exception& e) {
    throw PolicyError(std::string("malformed chat-completions response: ") + e.what());
  }
}

RemotePolicy::RemotePolicy(RemotePolicyConfig config) : config_(std::move(config)) {
  std::vector<std::string> problems;
  if (config_.endpoint.empty()) problems.emplace_back("endpoint missing");
  if (config_.model.empty()) problems.emplace_back("model missing");
  if (config_.request_timeout_ms <= 0) problems.emplace_back("timeout > 0 violated");
  if (config_.max_retries < 0) problems.emplace_back("max retries >= 0 violated");
  const auto scheme_end = config_.endpoint.find("://");
  if (scheme_end == std::string::npos) problems.emplace_back("endpoint must be an absolute URL");
  if (!problems.empty()) throw ConfigError(std::move(problems));
  const auto path_at = config_.endpoint.find('/', scheme_end + 3);
  base_ = config_.endpoint.substr(0, path_at);
  path_ = path_at == std::string::npos ? "/v1/chat/completions" : config_.endpoint.substr(path_at);
}

RemotePolicy::~RemotePolicy() = default;

nlohmann::json RemotePolicy::post_with_retry(const nlohmann::json& body) {
  const auto payload = body.dump();
  std::mt19937_64 jitter_rng(std::random_device{}());
  std::string last_error;
  for (int attempt = 0; attempt <= config_.max_retries; ++attempt) {
    if (attempt > 0) {
      const auto base = config_.initial_backoff_ms << (attempt - 1);
      std::uniform_int_distribution<std::int64_t> jitter(0, std::max<std::int64_t>(base, 1));
      std::this_thread::sleep_for(std::chrono::milliseconds(base + jitter(jitter_rng)));
    }
    httplib::Client client(base_);
    const auto timeout = std::chrono::milliseconds(config_.request_timeout_ms);
    client.set_connection_timeout(timeout);
    client.set_read_timeout(timeout);
    client.set_write_timeout(timeout);
    httplib::Headers headers;
    if (!config_.api_key.empty()) headers.emplace("Authorization", "Bearer " + config_.api_key);
    auto res = client.Post(path_, headers, payload, "application/json");
    if (!res) {
      last_error = "transport: " + httplib::to_string(res.error());
      spdlog::warn("policy request failed ({}), attempt {}", last_error, attempt + 1);
      continue;
    }
    if (res->status == 429 || res->status >= 500) {
      last_error = "HTTP " + std::to_string(res->status);
      spdlog::warn("policy request failed ({}), attempt {}", last_error, attempt + 1);
      continue;
    }
    if (res->status != 200)
      throw PolicyError("backend refused request: HTTP " + std::to_string(res->status) + " " + res->body);
    try {
      return nlohmann::json::parse(res->body);
    } catch (const nlohmann::json::exception& e) {
      throw PolicyError(std::string("response is not JSON: ") + e.what());
    }
  }
  throw TransportError("policy endpoint unreachable after " + std::to_string(config_.max_retries + 1) +
                       " attempts: " + last_error);
}

Step RemotePolicy::do_sample(const PromptMessages& context, const SampleParams& params, Rng& rng) {
  auto body = build_chat_request(context, params, config_);
  body["seed"] = rng.next() >> 33;
  return parse_chat_response(post_with_retry(body), config_, true);
}

std::string RemotePolicy::complete_text(const std::string& prompt) {
  nlohmann::json body{{"model", config_.model},
                      {"messages", nlohmann::json::array({{{"role", "user"}, {"content", prompt}}})},
                      {"temperature", 0.0},
                      {"max_tokens", config_.max_tokens}};
  const auto response = post_with_retry(body);
  try {
    const auto& content = response.at("choices").at(0).at("message").at("content");
    return content.is_string() ? content.get<std::string>() : std::string();
  } catch (const nlohmann::json::exception& e) {
    throw PolicyError(std::string("malformed chat-completions response: ") + e.what());
  }
}

}  // namespace maxs
