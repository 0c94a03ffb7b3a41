#include <gtest/gtest.h>
#include <httplib.h>

#include <atomic>
#include <thread>

#include "maxs/errors.hpp"
#include "maxs/remote_policy.hpp"

using namespace maxs;
using nlohmann::json;

namespace {

// Local chat-completions stand-in. The handler decides each response.
class MockServer {
 public:
  using Handler = std::function<void(const httplib::Request&, httplib::Response&)>;

  explicit MockServer(Handler handler) : handler_(std::move(handler)) {
    server_.Post("/v1/chat/completions", [this](const httplib::Request& req, httplib::Response& res) {
      ++hits_;
      last_body_ = req.body;
      last_auth_ = req.get_header_value("Authorization");
      handler_(req, res);
    });
    port_ = server_.bind_to_any_port("127.0.0.1");
    thread_ = std::thread([this] { server_.listen_after_bind(); });
    server_.wait_until_ready();
  }
  ~MockServer() {
    server_.stop();
    thread_.join();
  }

  std::string endpoint() const { return "http://127.0.0.1:" + std::to_string(port_) + "/v1/chat/completions"; }
  int hits() const { return hits_; }
  json last_request() const { return json::parse(last_body_); }
  std::string last_auth() const { return last_auth_; }

 private:
  httplib::Server server_;
  Handler handler_;
  int port_ = 0;
  std::thread thread_;
  std::atomic<int> hits_{0};
  std::string last_body_, last_auth_;
};

json completion(const std::string& content, const std::vector<std::pair<std::string, double>>& tokens,
                json extra = json::object()) {
  json lp = json::array();
  for (const auto& [t, v] : tokens) lp.push_back({{"token", t}, {"logprob", v}});
  json choice{{"index", 0},
              {"message", {{"role", "assistant"}, {"content", content}}},
              {"logprobs", {{"content", lp}}},
              {"finish_reason", "stop"}};
  for (auto& [k, v] : extra.items()) choice[k] = v;
  return {{"choices", json::array({choice})},
          {"usage", {{"prompt_tokens", 17}, {"completion_tokens", tokens.size()}}}};
}

RemotePolicyConfig config_for(const MockServer& s) {
  RemotePolicyConfig c;
  c.endpoint = s.endpoint();
  c.model = "test-model";
  c.initial_backoff_ms = 1;
  c.request_timeout_ms = 5000;
  c.api_key = "secret-token";
  return c;
}

PromptMessages sample_context() {
  return {{"system", "sys", std::nullopt},
          {"user", "What is 2+2?", std::nullopt},
          {"assistant", "```python\nprint(2+2)\n```", std::nullopt},
          {"tool", "4", std::nullopt}};
}

}  // namespace

TEST(RemotePolicyTest, RequestCarriesContractFields) {
  MockServer server([](const httplib::Request&, httplib::Response& res) {
    res.set_content(completion("x=2", {{"x", -0.1}, {"=", -0.2}, {"2", -0.3}}).dump(), "application/json");
  });
  RemotePolicy policy(config_for(server));
  SampleParams params;
  params.temperature = 0.6;
  params.top_p = 0.95;
  Rng rng(1);
  const auto step = policy.sample(sample_context(), params, rng);

  const auto req = server.last_request();
  EXPECT_EQ(req["model"], "test-model");
  EXPECT_EQ(req["temperature"], 0.6);
  EXPECT_EQ(req["top_p"], 0.95);
  EXPECT_EQ(req["logprobs"], true);
  EXPECT_EQ(req["max_tokens"], 512);
  const auto stops = req["stop"].get<std::vector<std::string>>();
  EXPECT_NE(std::find(stops.begin(), stops.end(), "\n\n"), stops.end());
  EXPECT_NE(std::find(stops.begin(), stops.end(), "</search>"), stops.end());
  EXPECT_NE(std::find(stops.begin(), stops.end(), "</answer>"), stops.end());
  ASSERT_EQ(req["messages"].size(), 4u);
  EXPECT_EQ(req["messages"][3]["role"], "user");
  EXPECT_EQ(req["messages"][3]["content"], "Tool result:\n4");
  EXPECT_EQ(server.last_auth(), "Bearer secret-token");

  EXPECT_EQ(step.text, "x=2");
  EXPECT_NEAR(step.g, -0.2, 1e-15);
  EXPECT_EQ(step.input_tokens, 17);
  EXPECT_EQ(step.output_tokens, 3);
  EXPECT_EQ(policy.usage(), (TokenUsage{17, 3, 1}));
}

TEST(RemotePolicyTest, ImagesBecomeContentParts) {
  PromptMessages ctx{{"system", "sys", std::nullopt}, {"user", "Describe", Attachment{"QUJD"}}};
  RemotePolicyConfig c;
  c.model = "m";
  const auto req = build_chat_request(ctx, SampleParams{}, c);
  const auto& content = req["messages"][1]["content"];
  ASSERT_TRUE(content.is_array());
  EXPECT_EQ(content[1]["image_url"]["url"], "data:image/png;base64,QUJD");
}

TEST(RemotePolicyTest, GreedySendsZeroTemperature) {
  RemotePolicyConfig c;
  c.model = "m";
  SampleParams p;
  p.greedy = true;
  EXPECT_EQ(build_chat_request(sample_context(), p, c)["temperature"], 0.0);
}

TEST(RemotePolicyTest, RetriesServiceUnavailable) {
  std::atomic<int> calls{0};
  MockServer server([&](const httplib::Request&, httplib::Response& res) {
    if (calls++ == 0) {
      res.status = 503;
      return;
    }
    res.set_content(completion("ok", {{"ok", -0.5}}).dump(), "application/json");
  });
  RemotePolicy policy(config_for(server));
  Rng rng(1);
  EXPECT_EQ(policy.sample(sample_context(), SampleParams{}, rng).text, "ok");
  EXPECT_EQ(server.hits(), 2);
}

TEST(RemotePolicyTest, GivesUpAfterRetries) {
  MockServer server([](const httplib::Request&, httplib::Response& res) { res.status = 500; });
  RemotePolicy policy(config_for(server));
  Rng rng(1);
  EXPECT_THROW(policy.sample(sample_context(), SampleParams{}, rng), TransportError);
  EXPECT_EQ(server.hits(), 3);
  EXPECT_EQ(policy.usage().policy_calls, 0);
}

TEST(RemotePolicyTest, ClientErrorIsNotRetried) {
  MockServer server([](const httplib::Request&, httplib::Response& res) {
    res.status = 400;
    res.set_content("{\"error\":\"bad\"}", "application/json");
  });
  RemotePolicy policy(config_for(server));
  Rng rng(1);
  EXPECT_THROW(policy.sample(sample_context(), SampleParams{}, rng), PolicyError);
  EXPECT_EQ(server.hits(), 1);
}

TEST(RemotePolicyTest, UnreachableEndpointIsTransportError) {
  RemotePolicyConfig c;
  {
    MockServer probe([](const httplib::Request&, httplib::Response&) {});
    c = config_for(probe);
  }  // server gone, port closed
  c.request_timeout_ms = 500;
  RemotePolicy policy(c);
  Rng rng(1);
  EXPECT_THROW(policy.sample(sample_context(), SampleParams{}, rng), TransportError);
}

TEST(RemotePolicyTest, MissingLogprobsRejected) {
  MockServer server([](const httplib::Request&, httplib::Response& res) {
    json body{{"choices", json::array({{{"message", {{"content", "hi"}}}, {"finish_reason", "stop"}}})}};
    res.set_content(body.dump(), "application/json");
  });
  RemotePolicy policy(config_for(server));
  Rng rng(1);
  EXPECT_THROW(policy.sample(sample_context(), SampleParams{}, rng), PolicyError);
}

TEST(RemotePolicyTest, EmptyCompletionIsEmptyStep) {
  MockServer server([](const httplib::Request&, httplib::Response& res) {
    res.set_content(completion("", {}).dump(), "application/json");
  });
  RemotePolicy policy(config_for(server));
  Rng rng(1);
  EXPECT_THROW(policy.sample(sample_context(), SampleParams{}, rng), EmptyStep);
}

TEST(ParseChatResponseTest, RepairsSwallowedClosingTag) {
  RemotePolicyConfig c;
  const auto r = completion("Let me check. <search>cesium boiling point",
                            {{"Let me check. ", -0.1}, {"<search>", -0.1}, {"cesium boiling point", -0.4}},
                            {{"stop_reason", "</search>"}});
  const auto step = parse_chat_response(r, c, true);
  EXPECT_EQ(step.text, "Let me check. <search>cesium boiling point</search>");
  EXPECT_EQ(step.kind, StepKind::SearchCall);
}

TEST(ParseChatResponseTest, RepairsUnclosedFenceWithoutStopReason) {
  RemotePolicyConfig c;
  const auto r = completion("```python\nprint(6*7)", {{"```python\n", -0.1}, {"print(6*7)", -0.2}});
  const auto step = parse_chat_response(r, c, true);
  EXPECT_EQ(step.text, "```python\nprint(6*7)\n```");
  EXPECT_EQ(step.kind, StepKind::CodeCall);
}

TEST(ParseChatResponseTest, CutsAtDelimiterAndTrimsLogprobs) {
  RemotePolicyConfig c;
  const auto r = completion("first step\n\nsecond step",
                            {{"first", -0.1}, {" step", -0.3}, {"\n\n", -0.5}, {"second", -2.0}, {" step", -2.0}});
  const auto step = parse_chat_response(r, c, true);
  EXPECT_EQ(step.text, "first step");
  EXPECT_EQ(step.token_logprobs, (std::vector<double>{-0.1, -0.3}));
}

TEST(RemotePolicyTest, ConfigValidation) {
  RemotePolicyConfig c;
  EXPECT_THROW(RemotePolicy{c}, ConfigError);
  c.endpoint = "http://localhost:1/v1/chat/completions";
  c.model = "m";
  c.request_timeout_ms = 0;
  EXPECT_THROW(RemotePolicy{c}, ConfigError);
  c.request_timeout_ms = 10;
  EXPECT_NO_THROW(RemotePolicy{c});
}

TEST(RemotePolicyTest, CredentialComesFromEnvironment) {
  ::setenv(kApiKeyEnv, "from-env", 1);
  RemotePolicyConfig c;
  EXPECT_EQ(RemotePolicyConfig::with_env_credential(c).api_key, "from-env");
  c.api_key = "explicit";
  EXPECT_EQ(RemotePolicyConfig::with_env_credential(c).api_key, "explicit");
  ::unsetenv(kApiKeyEnv);
}
