#include <arpa/inet.h>
#include <gtest/gtest.h>
#include <netinet/in.h>
#include <sys/socket.h>
#include <unistd.h>

#include <chrono>
#include <filesystem>
#include <fstream>
#include <random>

#include "maxs/core.hpp"
#include "maxs/errors.hpp"
#include "maxs/tools.hpp"

using namespace maxs;

namespace {

std::shared_ptr<CodeSandbox> sandbox(std::int64_t wall_ms = 5000, bool network = false) {
  SandboxPolicy p;
  p.wall_time_ms = wall_ms;
  p.network_access = network;
  return std::make_shared<CodeSandbox>(MAXS_PYTHON, p);
}

// Listening TCP socket on an ephemeral loopback port.
class Listener {
 public:
  Listener() {
    fd_ = ::socket(AF_INET, SOCK_STREAM, 0);
    sockaddr_in addr{};
    addr.sin_family = AF_INET;
    addr.sin_addr.s_addr = htonl(INADDR_LOOPBACK);
    addr.sin_port = 0;
    if (::bind(fd_, reinterpret_cast<sockaddr*>(&addr), sizeof addr) != 0 || ::listen(fd_, 4) != 0)
      throw std::runtime_error("listener setup failed");
    socklen_t len = sizeof addr;
    ::getsockname(fd_, reinterpret_cast<sockaddr*>(&addr), &len);
    port_ = ntohs(addr.sin_port);
  }
  ~Listener() { ::close(fd_); }
  int port() const { return port_; }

 private:
  int fd_ = -1;
  int port_ = 0;
};

std::string connect_probe(int port) {
  return "import socket\n"
         "s = socket.create_connection(('127.0.0.1', " + std::to_string(port) + "), timeout=2)\n"
         "print('connected')\n";
}

}  // namespace

TEST(DirectiveTest, Search) {
  EXPECT_EQ(parse_directive("Let me look this up. <search>boiling point of cesium</search>"),
            (ToolDirective{ToolDirective::Kind::Search, "boiling point of cesium"}));
}

TEST(DirectiveTest, Answer) {
  EXPECT_EQ(parse_directive("The answer is <answer>42</answer>"), (ToolDirective{ToolDirective::Kind::Answer, "42"}));
}

TEST(DirectiveTest, NoDirective) {
  EXPECT_EQ(parse_directive("Therefore x = 4."), ToolDirective{});
  EXPECT_EQ(classify_step_text("Therefore x = 4."), StepKind::Reason);
}

TEST(DirectiveTest, CodeFenceWithAndWithoutTag) {
  EXPECT_EQ(parse_directive("Compute:\n```python\nprint(2+2)\n```"), (ToolDirective{ToolDirective::Kind::Code, "print(2+2)"}));
  EXPECT_EQ(parse_directive("```\nprint(1)\n```"), (ToolDirective{ToolDirective::Kind::Code, "print(1)"}));
}

TEST(DirectiveTest, FirstDirectiveWins) {
  EXPECT_EQ(parse_directive("<answer>1</answer> then <search>x</search>").kind, ToolDirective::Kind::Answer);
  EXPECT_EQ(parse_directive("<search>x</search> <answer>1</answer>").kind, ToolDirective::Kind::Search);
  // A malformed trailing directive does not spoil the first one.
  EXPECT_EQ(parse_directive("<search>x</search> <answer>oops").payload, "x");
}

TEST(DirectiveTest, UnclosedIsMalformed) {
  EXPECT_THROW(parse_directive("<search>never closed"), MalformedDirective);
  EXPECT_THROW(parse_directive("```python\nprint(1)"), MalformedDirective);
  EXPECT_EQ(classify_step_text("<answer>never closed"), StepKind::Reason);
}

TEST(DirectiveTest, RoundTripProperty) {
  std::mt19937_64 gen(17);
  const std::string alphabet = "abcxyz019 +-*/()=._,:;'\"\t\n#?";
  auto payload = [&](bool trimmed) {
    std::string s;
    const auto len = 1 + gen() % 40;
    for (std::size_t i = 0; i < len; ++i) s += alphabet[gen() % alphabet.size()];
    if (trimmed) {
      const auto b = s.find_first_not_of(" \t\n");
      if (b == std::string::npos) return std::string("x");
      s = s.substr(b, s.find_last_not_of(" \t\n") - b + 1);
    }
    return s;
  };
  for (int i = 0; i < 3000; ++i) {
    for (auto kind : {ToolDirective::Kind::Search, ToolDirective::Kind::Answer, ToolDirective::Kind::Code}) {
      const ToolDirective d{kind, payload(kind != ToolDirective::Kind::Code)};
      EXPECT_EQ(parse_directive(render_directive(d)), d) << render_directive(d);
    }
  }
}

TEST(DirectiveTest, FinalAnswerOfTrajectory) {
  Trajectory t("t", "q");
  EXPECT_FALSE(final_answer(t));
  t.append(Step::generated(StepKind::FinalAnswer, "So <answer> 12 </answer>", {-1}, 0, 1));
  EXPECT_EQ(final_answer(t), "12");
}

TEST(SandboxTest, PrintsResult) {
  const auto inv = run_code("print(2+2)", *sandbox());
  EXPECT_EQ(inv.status, ToolStatus::Ok);
  EXPECT_EQ(inv.response, "4");
  EXPECT_EQ(inv.tool_kind, ToolKind::Code);
}

TEST(SandboxTest, InfiniteLoopTimesOut) {
  const auto start = std::chrono::steady_clock::now();
  const auto inv = run_code("while True:\n    pass\n", *sandbox(1000));
  const auto ms = std::chrono::duration_cast<std::chrono::milliseconds>(std::chrono::steady_clock::now() - start).count();
  EXPECT_EQ(inv.status, ToolStatus::Timeout);
  EXPECT_FALSE(inv.response);
  EXPECT_LT(ms, 1500);
}

TEST(SandboxTest, SleepingChildIsKilledWithGroup) {
  const auto start = std::chrono::steady_clock::now();
  const auto inv = run_code("import subprocess\nsubprocess.Popen(['sleep', '30'])\nimport time\ntime.sleep(30)\n",
                            *sandbox(800));
  const auto ms = std::chrono::duration_cast<std::chrono::milliseconds>(std::chrono::steady_clock::now() - start).count();
  EXPECT_EQ(inv.status, ToolStatus::Timeout);
  EXPECT_LT(ms, 1300);
}

TEST(SandboxTest, NonzeroExitIsError) {
  const auto inv = run_code("import sys\nsys.stderr.write('bad input')\nsys.exit(3)\n", *sandbox());
  EXPECT_EQ(inv.status, ToolStatus::Error);
  EXPECT_FALSE(inv.response);
}

TEST(SandboxTest, OutputIsTruncated) {
  const auto inv = run_code("print('x' * 100000)", *sandbox());
  ASSERT_EQ(inv.status, ToolStatus::Ok);
  EXPECT_EQ(inv.response->size(), kMaxToolOutputBytes);
  EXPECT_TRUE(inv.response->ends_with(kTruncationMarker));
}

TEST(SandboxTest, NetworkDeniedByDefault) {
  Listener listener;
  const auto denied = run_code(connect_probe(listener.port()), *sandbox(5000, false));
  EXPECT_EQ(denied.status, ToolStatus::Error);
  const auto allowed = run_code(connect_probe(listener.port()), *sandbox(5000, true));
  EXPECT_EQ(allowed.status, ToolStatus::Ok);
  EXPECT_EQ(allowed.response, "connected");
}

TEST(SandboxTest, ScratchDirectoryIsPrivateAndRemoved) {
  const auto root = std::filesystem::temp_directory_path() / "maxs_scratch_root";
  std::filesystem::create_directories(root);
  SandboxPolicy p;
  p.scratch_root = root;
  CodeSandbox box(MAXS_PYTHON, p);
  const auto inv = run_code("import os\nopen('f.txt', 'w').write('x')\nprint(os.getcwd())\n", box);
  ASSERT_EQ(inv.status, ToolStatus::Ok);
  EXPECT_TRUE(inv.response->starts_with(root.string()));
  EXPECT_TRUE(std::filesystem::is_empty(root));
  std::filesystem::remove_all(root);
}

TEST(SandboxTest, MemoryLimitStopsHugeAllocation) {
  SandboxPolicy p;
  p.memory_bytes = 128LL << 20;
  CodeSandbox box(MAXS_PYTHON, p);
  EXPECT_EQ(run_code("x = bytearray(1 << 30)\nprint(len(x))\n", box).status, ToolStatus::Error);
}

TEST(SandboxTest, MissingInterpreterReportedUpFront) {
  EXPECT_THROW(CodeSandbox("/nonexistent/python", SandboxPolicy{}), InterpreterMissing);
  EXPECT_THROW(run_code("", *sandbox()), std::invalid_argument);
}

TEST(CorpusTest, HighestOverlapWins) {
  StaticCorpus corpus({{"d1", "cesium boils at 671 °C"}, {"d2", "sodium melts at 98 °C"}});
  const auto inv = run_search("cesium boiling", corpus);
  EXPECT_EQ(inv.status, ToolStatus::Ok);
  EXPECT_EQ(inv.response, "cesium boils at 671 °C");
  EXPECT_EQ(run_search("cesium boiling", corpus), inv);
  EXPECT_THROW(run_search("", corpus), std::invalid_argument);
}

TEST(CorpusTest, TiesGoToSmallestIdAndMissesAreErrors) {
  StaticCorpus corpus({{"b", "alpha beta"}, {"a", "alpha gamma"}});
  EXPECT_EQ(run_search("alpha", corpus).response, "alpha gamma");
  EXPECT_EQ(run_search("omega", corpus).status, ToolStatus::Error);
  StaticCorpus empty({});
  EXPECT_EQ(run_search("alpha", empty).status, ToolStatus::Error);
}

TEST(CorpusTest, LoadsJsonl) {
  const auto file = std::filesystem::temp_directory_path() / "maxs_corpus.jsonl";
  std::ofstream(file) << "{\"id\": \"d1\", \"text\": \"one two\"}\n\n{\"id\": \"d2\", \"text\": \"three\"}\n";
  EXPECT_EQ(StaticCorpus::load(file).size(), 2u);
  std::ofstream(file) << "{\"id\": \"d1\"}\n";
  EXPECT_THROW(StaticCorpus::load(file), ParseError);
  std::filesystem::remove(file);
}

TEST(RemoteSearchTest, ForwardsQuery) {
  std::string seen;
  RemoteSearch search([&](const std::string& prompt) {
    seen = prompt;
    return std::string("671 °C");
  });
  const auto inv = run_search("cesium boiling point", search);
  EXPECT_EQ(inv.response, "671 °C");
  EXPECT_NE(seen.find("cesium boiling point"), std::string::npos);
  RemoteSearch silent([](const std::string&) { return std::string(); });
  EXPECT_EQ(run_search("q", silent).status, ToolStatus::Error);
}

TEST(ToolRuntimeTest, ScriptedRuntimeSeparatesScratchCalls) {
  ScriptedToolRuntime rt;
  rt.set_response(ToolDirective::Kind::Search, "q", "doc");
  auto scratch = rt.scratch();
  EXPECT_EQ(scratch->execute({ToolDirective::Kind::Search, "q"}).response, "doc");
  EXPECT_EQ(rt.committed_calls(), 0u);
  EXPECT_EQ(rt.execute({ToolDirective::Kind::Search, "q"}).response, "doc");
  EXPECT_EQ(rt.committed_calls(), 1u);
  EXPECT_EQ(rt.calls().size(), 2u);
  EXPECT_EQ(rt.execute({ToolDirective::Kind::Search, "unknown"}).status, ToolStatus::Error);
}

TEST(ToolRuntimeTest, StandardRuntimeRunsBothTools) {
  auto corpus = std::make_shared<StaticCorpus>(std::vector<CorpusDocument>{{"d1", "cesium boils at 671 °C"}});
  StandardToolRuntime rt(sandbox(), corpus);
  EXPECT_EQ(rt.execute({ToolDirective::Kind::Code, "print(6*7)"}).response, "42");
  EXPECT_EQ(rt.scratch()->execute({ToolDirective::Kind::Search, "cesium"}).response, "cesium boils at 671 °C");
  StandardToolRuntime none(nullptr, nullptr);
  EXPECT_EQ(none.execute({ToolDirective::Kind::Code, "print(1)"}).status, ToolStatus::Error);
}
