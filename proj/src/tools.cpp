#include "maxs/tools.hpp"

#include <fcntl.h>
#include <linux/audit.h>
#include <linux/filter.h>
#include <linux/seccomp.h>
#include <poll.h>
#include <signal.h>
#include <spdlog/spdlog.h>
#include <sys/prctl.h>
#include <sys/resource.h>
#include <sys/socket.h>
#include <sys/syscall.h>
#include <sys/wait.h>
#include <unistd.h>

#include <algorithm>
#include <cctype>
#include <cerrno>
#include <chrono>
#include <cstddef>
#include <cstring>
#include <fstream>
#include <nlohmann/json.hpp>
#include <set>

#include "maxs/errors.hpp"

namespace maxs {

// --- directives ------------------------------------------------------------

namespace {

constexpr std::string_view kSearchOpen = "<search>";
constexpr std::string_view kSearchClose = "</search>";
constexpr std::string_view kAnswerOpen = "<answer>";
constexpr std::string_view kAnswerClose = "</answer>";
constexpr std::string_view kFence = "```";

std::string trim(std::string_view s) {
  const auto* ws = " \t\r\n";
  const auto b = s.find_first_not_of(ws);
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(ws);
  return std::string(s.substr(b, e - b + 1));
}

struct Located {
  ToolDirective directive;
  std::size_t end = 0;  // one past the closing marker
};

std::optional<Located> parse_tagged(std::string_view text, std::size_t open_at,
                                    std::string_view open, std::string_view close,
                                    ToolDirective::Kind kind) {
  const auto body = open_at + open.size();
  const auto close_at = text.find(close, body);
  if (close_at == std::string_view::npos)
    throw MalformedDirective("unterminated " + std::string(open) + " directive");
  return Located{{kind, trim(text.substr(body, close_at - body))}, close_at + close.size()};
}

std::optional<Located> parse_fence(std::string_view text, std::size_t open_at) {
  auto pos = open_at + kFence.size();
  auto tag_end = pos;
  while (tag_end < text.size() &&
         (std::isalnum(static_cast<unsigned char>(text[tag_end])) || text[tag_end] == '_' ||
          text[tag_end] == '+' || text[tag_end] == '-'))
    ++tag_end;
  if (tag_end < text.size() && text[tag_end] == '\n') {
    pos = tag_end + 1;
  } else if (tag_end < text.size() && text[tag_end] == '\r' && tag_end + 1 < text.size() &&
             text[tag_end + 1] == '\n') {
    pos = tag_end + 2;
  }
  const auto close_at = text.find(kFence, pos);
  if (close_at == std::string_view::npos) throw MalformedDirective("unterminated code fence");
  std::string code(text.substr(pos, close_at - pos));
  if (!code.empty() && code.back() == '\n') code.pop_back();
  if (!code.empty() && code.back() == '\r') code.pop_back();
  return Located{{ToolDirective::Kind::Code, std::move(code)}, close_at + kFence.size()};
}

std::optional<Located> first_directive(std::string_view text, std::size_t from) {
  const auto s = text.find(kSearchOpen, from);
  const auto a = text.find(kAnswerOpen, from);
  const auto c = text.find(kFence, from);
  const auto first = std::min({s, a, c});
  if (first == std::string_view::npos) return std::nullopt;
  if (first == s) return parse_tagged(text, s, kSearchOpen, kSearchClose, ToolDirective::Kind::Search);
  if (first == a) return parse_tagged(text, a, kAnswerOpen, kAnswerClose, ToolDirective::Kind::Answer);
  return parse_fence(text, c);
}

}  // namespace

ToolDirective parse_directive(std::string_view step_text) {
  auto found = first_directive(step_text, 0);
  if (!found) return {};
  try {
    if (first_directive(step_text, found->end))
      spdlog::debug("step carries more than one directive; only the first is used");
  } catch (const MalformedDirective&) {
    spdlog::debug("ignoring malformed trailing directive");
  }
  return std::move(found->directive);
}

std::string render_directive(const ToolDirective& d) {
  switch (d.kind) {
    case ToolDirective::Kind::Search:
      return std::string(kSearchOpen) + d.payload + std::string(kSearchClose);
    case ToolDirective::Kind::Answer:
      return std::string(kAnswerOpen) + d.payload + std::string(kAnswerClose);
    case ToolDirective::Kind::Code:
      return "```python\n" + d.payload + "\n```";
    case ToolDirective::Kind::None:
      break;
  }
  return {};
}

StepKind step_kind_for(const ToolDirective& d) noexcept {
  switch (d.kind) {
    case ToolDirective::Kind::Search:
      return StepKind::SearchCall;
    case ToolDirective::Kind::Code:
      return StepKind::CodeCall;
    case ToolDirective::Kind::Answer:
      return StepKind::FinalAnswer;
    case ToolDirective::Kind::None:
      break;
  }
  return StepKind::Reason;
}

StepKind classify_step_text(std::string_view step_text) {
  try {
    return step_kind_for(parse_directive(step_text));
  } catch (const MalformedDirective& e) {
    spdlog::debug("malformed directive treated as reasoning: {}", e.what());
    return StepKind::Reason;
  }
}

std::optional<std::string> final_answer(const Trajectory& trajectory) {
  if (trajectory.steps().empty() || trajectory.steps().back().kind != StepKind::FinalAnswer)
    return std::nullopt;
  try {
    auto d = parse_directive(trajectory.steps().back().text);
    if (d.kind == ToolDirective::Kind::Answer) return d.payload;
  } catch (const MalformedDirective&) {
  }
  return std::nullopt;
}

std::vector<std::string> directive_stop_sequences() {
  return {std::string(kSearchClose), std::string(kAnswerClose), "\n```\n"};
}

// --- code sandbox ----------------------------------------------------------

namespace {

#if defined(__x86_64__)
constexpr std::uint32_t kAuditArch = AUDIT_ARCH_X86_64;
#elif defined(__aarch64__)
constexpr std::uint32_t kAuditArch = AUDIT_ARCH_AARCH64;
#else
#error "seccomp network filter: unsupported architecture"
#endif

// Denies AF_INET/AF_INET6 sockets and io_uring; everything else passes.
const sock_filter kNoNetworkFilter[] = {
    BPF_STMT(BPF_LD | BPF_W | BPF_ABS, offsetof(seccomp_data, arch)),
    BPF_JUMP(BPF_JMP | BPF_JEQ | BPF_K, kAuditArch, 1, 0),
    BPF_STMT(BPF_RET | BPF_K, SECCOMP_RET_KILL_PROCESS),
    BPF_STMT(BPF_LD | BPF_W | BPF_ABS, offsetof(seccomp_data, nr)),
    BPF_JUMP(BPF_JMP | BPF_JGE | BPF_K, 0x40000000u, 0, 1),  // x32 ABI
    BPF_STMT(BPF_RET | BPF_K, SECCOMP_RET_ERRNO | (EPERM & SECCOMP_RET_DATA)),
    BPF_JUMP(BPF_JMP | BPF_JEQ | BPF_K, __NR_io_uring_setup, 0, 1),
    BPF_STMT(BPF_RET | BPF_K, SECCOMP_RET_ERRNO | (EPERM & SECCOMP_RET_DATA)),
    BPF_JUMP(BPF_JMP | BPF_JEQ | BPF_K, __NR_socket, 0, 4),
    BPF_STMT(BPF_LD | BPF_W | BPF_ABS, offsetof(seccomp_data, args[0])),
    BPF_JUMP(BPF_JMP | BPF_JEQ | BPF_K, AF_INET, 1, 0),
    BPF_JUMP(BPF_JMP | BPF_JEQ | BPF_K, AF_INET6, 0, 1),
    BPF_STMT(BPF_RET | BPF_K, SECCOMP_RET_ERRNO | (EACCES & SECCOMP_RET_DATA)),
    BPF_STMT(BPF_RET | BPF_K, SECCOMP_RET_ALLOW),
};

class ScratchDir {
 public:
  explicit ScratchDir(const std::filesystem::path& root) {
    std::string tmpl = (root / "maxs-sandbox-XXXXXX").string();
    if (!::mkdtemp(tmpl.data())) throw Error("cannot create sandbox directory: " + std::string(std::strerror(errno)));
    path_ = tmpl;
  }
  ~ScratchDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  ScratchDir(const ScratchDir&) = delete;
  ScratchDir& operator=(const ScratchDir&) = delete;
  const std::filesystem::path& path() const noexcept { return path_; }

 private:
  std::filesystem::path path_;
};

class Fd {
 public:
  Fd() = default;
  explicit Fd(int fd) : fd_(fd) {}
  ~Fd() { reset(); }
  Fd(Fd&& o) noexcept : fd_(std::exchange(o.fd_, -1)) {}
  Fd& operator=(Fd&& o) noexcept {
    if (this != &o) {
      reset();
      fd_ = std::exchange(o.fd_, -1);
    }
    return *this;
  }
  int get() const noexcept { return fd_; }
  void reset() noexcept {
    if (fd_ >= 0) ::close(fd_);
    fd_ = -1;
  }

 private:
  int fd_ = -1;
};

struct Pipe {
  Fd read, write;
  Pipe() {
    int fds[2];
    if (::pipe2(fds, O_CLOEXEC) != 0) throw Error("pipe2 failed: " + std::string(std::strerror(errno)));
    read = Fd(fds[0]);
    write = Fd(fds[1]);
  }
};

struct Capture {
  std::string data;
  std::size_t limit;
  bool overflow = false;
  void append(const char* buf, std::size_t n) {
    const auto room = limit > data.size() ? limit - data.size() : 0;
    if (n > room) overflow = true;
    data.append(buf, std::min(n, room));
  }
};

std::string finish_output(Capture& out) {
  std::string text = std::move(out.data);
  if (out.overflow || text.size() > kMaxToolOutputBytes) {
    text.resize(kMaxToolOutputBytes - kTruncationMarker.size());
    text += kTruncationMarker;
    return text;
  }
  while (!text.empty() && std::isspace(static_cast<unsigned char>(text.back()))) text.pop_back();
  return text;
}

}  // namespace

CodeSandbox::CodeSandbox(std::filesystem::path interpreter, SandboxPolicy policy)
    : interpreter_(std::move(interpreter)), policy_(std::move(policy)) {
  if (policy_.wall_time_ms <= 0 || policy_.memory_bytes <= 0)
    throw ConfigError({"sandbox limits must be strictly positive"});
  std::error_code ec;
  if (!std::filesystem::is_regular_file(interpreter_, ec) || ::access(interpreter_.c_str(), X_OK) != 0)
    throw InterpreterMissing("interpreter not found or not executable: " + interpreter_.string());
}

ToolInvocation CodeSandbox::run(const std::string& program) const {
  ToolInvocation inv;
  inv.tool_kind = ToolKind::Code;
  inv.request = program;
  inv.status = ToolStatus::Error;

  const auto started = std::chrono::steady_clock::now();
  ScratchDir dir(policy_.scratch_root);
  const auto program_path = dir.path() / "program";
  {
    std::ofstream f(program_path, std::ios::binary);
    f << program;
    if (!f) throw Error("cannot write program into sandbox directory");
  }

  Pipe out_pipe, err_pipe;
  const std::string interpreter = interpreter_.string();
  const std::string program_arg = program_path.string();
  const std::string dir_str = dir.path().string();
  const std::string home = "HOME=" + dir_str;
  const std::string tmp = "TMPDIR=" + dir_str;
  const char* argv[] = {interpreter.c_str(), program_arg.c_str(), nullptr};
  const char* envp[] = {"PATH=/usr/local/bin:/usr/bin:/bin", home.c_str(), tmp.c_str(),
                        "LC_ALL=C.UTF-8", "PYTHONDONTWRITEBYTECODE=1", nullptr};
  sock_fprog filter_prog{static_cast<unsigned short>(std::size(kNoNetworkFilter)),
                         const_cast<sock_filter*>(kNoNetworkFilter)};
  const rlim_t mem = static_cast<rlim_t>(policy_.memory_bytes);
  const rlim_t cpu = static_cast<rlim_t>(policy_.wall_time_ms / 1000 + 1);
  const bool deny_network = !policy_.network_access;

  const pid_t pid = ::fork();
  if (pid < 0) throw Error("fork failed: " + std::string(std::strerror(errno)));
  if (pid == 0) {
    // Child: async-signal-safe calls only.
    ::setpgid(0, 0);
    const int devnull = ::open("/dev/null", O_RDONLY);
    if (devnull >= 0) ::dup2(devnull, 0);
    ::dup2(out_pipe.write.get(), 1);
    ::dup2(err_pipe.write.get(), 2);
    if (::chdir(dir_str.c_str()) != 0) ::_exit(126);
    rlimit rl{mem, mem};
    ::setrlimit(RLIMIT_AS, &rl);
    rl = {cpu, cpu};
    ::setrlimit(RLIMIT_CPU, &rl);
    rl = {16u << 20, 16u << 20};
    ::setrlimit(RLIMIT_FSIZE, &rl);
    rl = {0, 0};
    ::setrlimit(RLIMIT_CORE, &rl);
    if (::prctl(PR_SET_NO_NEW_PRIVS, 1, 0, 0, 0) != 0) ::_exit(126);
    if (deny_network && ::prctl(PR_SET_SECCOMP, SECCOMP_MODE_FILTER, &filter_prog) != 0) ::_exit(126);
    ::execve(argv[0], const_cast<char* const*>(argv), const_cast<char* const*>(envp));
    ::_exit(127);
  }
  ::setpgid(pid, pid);
  out_pipe.write.reset();
  err_pipe.write.reset();

  Capture out{{}, kMaxToolOutputBytes + 1};
  Capture err{{}, kMaxToolOutputBytes};
  const auto deadline = started + std::chrono::milliseconds(policy_.wall_time_ms);
  bool timed_out = false;
  bool reaped = false;
  int wstatus = 0;
  char buf[8192];

  auto drain = [&](int timeout_ms) {
    pollfd fds[2] = {{out_pipe.read.get(), POLLIN, 0}, {err_pipe.read.get(), POLLIN, 0}};
    const int n = ::poll(fds, 2, timeout_ms);
    if (n <= 0) return;
    for (int i = 0; i < 2; ++i) {
      if (fds[i].fd < 0 || !(fds[i].revents & (POLLIN | POLLHUP | POLLERR))) continue;
      const auto got = ::read(fds[i].fd, buf, sizeof buf);
      if (got > 0) {
        (i == 0 ? out : err).append(buf, static_cast<std::size_t>(got));
      } else if (got == 0 || errno != EINTR) {
        (i == 0 ? out_pipe.read : err_pipe.read).reset();
      }
    }
  };

  while (out_pipe.read.get() >= 0 || err_pipe.read.get() >= 0) {
    const auto now = std::chrono::steady_clock::now();
    if (now >= deadline) {
      timed_out = true;
      break;
    }
    const auto left = std::chrono::duration_cast<std::chrono::milliseconds>(deadline - now).count();
    drain(static_cast<int>(std::min<std::int64_t>(left, 50)));
    if (!reaped && ::waitpid(pid, &wstatus, WNOHANG) == pid) {
      reaped = true;
      // The interpreter is gone; pick up what is still buffered and stop.
      for (int i = 0; i < 4 && (out_pipe.read.get() >= 0 || err_pipe.read.get() >= 0); ++i) drain(0);
      break;
    }
  }
  ::kill(-pid, SIGKILL);
  if (!reaped) {
    if (!timed_out) {
      ::waitpid(pid, &wstatus, 0);
    } else {
      ::kill(pid, SIGKILL);
      ::waitpid(pid, &wstatus, 0);
    }
  }
  inv.wall_time_ms = std::chrono::duration_cast<std::chrono::milliseconds>(
                         std::chrono::steady_clock::now() - started)
                         .count();

  if (timed_out) {
    inv.status = ToolStatus::Timeout;
    spdlog::info("code tool timed out after {} ms", inv.wall_time_ms);
  } else if (WIFEXITED(wstatus) && WEXITSTATUS(wstatus) == 0) {
    inv.status = ToolStatus::Ok;
    inv.response = finish_output(out);
  } else {
    inv.status = ToolStatus::Error;
    if (WIFSIGNALED(wstatus))
      spdlog::info("code tool killed by signal {}: {}", WTERMSIG(wstatus), err.data);
    else
      spdlog::info("code tool exited with {}: {}", WEXITSTATUS(wstatus), err.data);
  }
  return inv;
}

ToolInvocation run_code(const std::string& program, const CodeSandbox& sandbox) {
  if (program.empty()) throw std::invalid_argument("run_code: empty program");
  return sandbox.run(program);
}

// --- search ----------------------------------------------------------------

std::vector<std::string> tokenize_words(std::string_view text) {
  std::vector<std::string> out;
  std::string cur;
  for (unsigned char ch : text) {
    if (ch < 0x80 && std::isalnum(ch)) {
      cur.push_back(static_cast<char>(std::tolower(ch)));
    } else if (!cur.empty()) {
      out.push_back(std::move(cur));
      cur.clear();
    }
  }
  if (!cur.empty()) out.push_back(std::move(cur));
  return out;
}

StaticCorpus::StaticCorpus(std::vector<CorpusDocument> documents) : documents_(std::move(documents)) {
  std::sort(documents_.begin(), documents_.end(),
            [](const CorpusDocument& a, const CorpusDocument& b) { return a.id < b.id; });
}

StaticCorpus StaticCorpus::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open corpus file: " + path.string());
  std::vector<CorpusDocument> docs;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (trim(line).empty()) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      docs.push_back({j.at("id").get<std::string>(), j.at("text").get<std::string>()});
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(std::string("corpus record: ") + e.what(), line_no);
    }
  }
  return StaticCorpus(std::move(docs));
}

ToolInvocation StaticCorpus::search(const std::string& query) {
  ToolInvocation inv;
  inv.tool_kind = ToolKind::Search;
  inv.request = query;
  const auto q = tokenize_words(query);
  const std::set<std::string> query_set(q.begin(), q.end());
  std::size_t best_overlap = 0;
  const CorpusDocument* best = nullptr;
  for (const auto& doc : documents_) {  // sorted by id, so the first maximum wins ties
    const auto words = tokenize_words(doc.text);
    const std::set<std::string> doc_set(words.begin(), words.end());
    std::size_t overlap = 0;
    for (const auto& w : query_set) overlap += doc_set.count(w);
    if (overlap > best_overlap) {
      best_overlap = overlap;
      best = &doc;
    }
  }
  if (best) {
    inv.status = ToolStatus::Ok;
    inv.response = best->text;
  } else {
    inv.status = ToolStatus::Error;
  }
  return inv;
}

ToolInvocation RemoteSearch::search(const std::string& query) {
  ToolInvocation inv;
  inv.tool_kind = ToolKind::Search;
  inv.request = query;
  const auto started = std::chrono::steady_clock::now();
  try {
    auto text = complete_(query);
    if (!trim(text).empty()) {
      inv.status = ToolStatus::Ok;
      inv.response = std::move(text);
    }
  } catch (const std::exception& e) {
    spdlog::warn("remote search failed: {}", e.what());
  }
  inv.wall_time_ms = std::chrono::duration_cast<std::chrono::milliseconds>(
                         std::chrono::steady_clock::now() - started)
                         .count();
  return inv;
}

ToolInvocation run_search(const std::string& query, SearchProvider& provider) {
  if (query.empty()) throw std::invalid_argument("run_search: empty query");
  return provider.search(query);
}

// --- runtimes --------------------------------------------------------------

namespace {

ToolInvocation rejected(ToolDirective::Kind kind, const std::string& request) {
  ToolInvocation inv;
  inv.tool_kind = kind == ToolDirective::Kind::Search ? ToolKind::Search : ToolKind::Code;
  inv.request = request;
  inv.status = ToolStatus::Error;
  return inv;
}

}  // namespace

StandardToolRuntime::StandardToolRuntime(std::shared_ptr<const CodeSandbox> sandbox,
                                         std::shared_ptr<SearchProvider> search)
    : StandardToolRuntime(std::move(sandbox), std::move(search), std::make_shared<SearchCache>()) {}

StandardToolRuntime::StandardToolRuntime(std::shared_ptr<const CodeSandbox> sandbox,
                                         std::shared_ptr<SearchProvider> search,
                                         std::shared_ptr<SearchCache> cache)
    : sandbox_(std::move(sandbox)), search_(std::move(search)), cache_(std::move(cache)) {}

ToolInvocation StandardToolRuntime::execute(const ToolDirective& d) {
  if (d.payload.empty()) return rejected(d.kind, d.payload);
  switch (d.kind) {
    case ToolDirective::Kind::Code:
      if (!sandbox_) return rejected(d.kind, d.payload);
      return run_code(d.payload, *sandbox_);
    case ToolDirective::Kind::Search: {
      if (!search_) return rejected(d.kind, d.payload);
      {
        std::lock_guard lock(cache_->mutex);
        if (auto it = cache_->entries.find(d.payload); it != cache_->entries.end()) return it->second;
      }
      auto inv = run_search(d.payload, *search_);
      std::lock_guard lock(cache_->mutex);
      cache_->entries.emplace(d.payload, inv);
      return inv;
    }
    default:
      throw std::invalid_argument("directive is not a tool call");
  }
}

std::unique_ptr<ToolRuntime> StandardToolRuntime::scratch() {
  return std::unique_ptr<ToolRuntime>(new StandardToolRuntime(sandbox_, search_, cache_));
}

void ScriptedToolRuntime::set_response(ToolDirective::Kind kind, const std::string& request,
                                       std::string response) {
  std::lock_guard lock(log_->mutex);
  log_->responses[{static_cast<int>(kind), request}] = std::move(response);
}

ToolInvocation ScriptedToolRuntime::execute(const ToolDirective& d) {
  std::lock_guard lock(log_->mutex);
  log_->calls.push_back({d, committed_});
  auto inv = rejected(d.kind, d.payload);
  if (auto it = log_->responses.find({static_cast<int>(d.kind), d.payload}); it != log_->responses.end()) {
    inv.status = ToolStatus::Ok;
    inv.response = it->second;
  }
  return inv;
}

std::unique_ptr<ToolRuntime> ScriptedToolRuntime::scratch() {
  return std::unique_ptr<ToolRuntime>(new ScriptedToolRuntime(log_, false));
}

std::vector<ScriptedToolRuntime::CallRecord> ScriptedToolRuntime::calls() const {
  std::lock_guard lock(log_->mutex);
  return log_->calls;
}

std::size_t ScriptedToolRuntime::committed_calls() const {
  std::lock_guard lock(log_->mutex);
  return static_cast<std::size_t>(std::count_if(log_->calls.begin(), log_->calls.end(),
                                                [](const CallRecord& c) { return c.committed; }));
}

}  // namespace maxs
