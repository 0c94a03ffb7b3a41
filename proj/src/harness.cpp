#include "maxs/harness.hpp"

#include <spdlog/spdlog.h>

#include <algorithm>
#include <atomic>
#include <cctype>
#include <cerrno>
#include <charconv>
#include <cmath>
#include <fstream>
#include <set>
#include <system_error>
#include <thread>

#include "maxs/errors.hpp"
#include "maxs/trace.hpp"

namespace maxs {

using nlohmann::json;

namespace {

std::string_view trim(std::string_view s) {
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.front()))) s.remove_prefix(1);
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.back()))) s.remove_suffix(1);
  return s;
}

std::string_view strip_answer_tags(std::string_view s) {
  s = trim(s);
  constexpr std::string_view open = "<answer>", close = "</answer>";
  if (s.size() >= open.size() + close.size() && s.substr(0, open.size()) == open &&
      s.substr(s.size() - close.size()) == close)
    s = trim(s.substr(open.size(), s.size() - open.size() - close.size()));
  return s;
}

std::string fold(std::string_view s) {
  std::string out(s);
  for (char& c : out) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return out;
}

std::optional<double> parse_real(std::string_view s) {
  s = strip_answer_tags(s);
  if (!s.empty() && s.front() == '+') s.remove_prefix(1);
  double v = 0.0;
  const auto [end, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || end != s.data() + s.size() || s.empty() || !std::isfinite(v)) return std::nullopt;
  return v;
}

std::optional<char> first_letter(std::string_view s) {
  for (char c : s)
    if (std::isalpha(static_cast<unsigned char>(c))) return static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return std::nullopt;
}

template <typename Fn>
void bounded_parallel_for(std::size_t n, int bound, Fn&& fn) {
  const auto workers = std::min<std::size_t>(n, static_cast<std::size_t>(std::max(1, bound)));
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::mutex error_mutex;
  std::vector<std::thread> threads;
  for (std::size_t w = 0; w < workers; ++w) {
    threads.emplace_back([&] {
      for (std::size_t i; (i = next.fetch_add(1)) < n;) {
        try {
          fn(i);
        } catch (...) {
          std::lock_guard lock(error_mutex);
          if (!error) error = std::current_exception();
        }
      }
    });
  }
  for (auto& t : threads) t.join();
  if (error) std::rethrow_exception(error);
}

std::string trace_file_name(const std::string& task_id) {
  std::string name;
  for (char c : task_id)
    name += (std::isalnum(static_cast<unsigned char>(c)) || c == '-' || c == '_' || c == '.') ? c : '_';
  return name + ".jsonl";
}

std::string csv_field(std::string_view s) {
  if (s.find_first_of(",\"\n\r") == std::string_view::npos) return std::string(s);
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

std::ofstream open_output(const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::system_error(errno, std::generic_category(), "cannot write " + path.string());
  return out;
}

void close_output(std::ofstream& out, const std::filesystem::path& path) {
  out.close();
  if (!out) throw std::system_error(errno, std::generic_category(), "write failed for " + path.string());
}

std::string format_real(double x) {
  char buf[64];
  const auto [end, ec] = std::to_chars(buf, buf + sizeof buf, x);
  return ec == std::errc() ? std::string(buf, end) : std::string();
}

json report_json(const RunReport& r) {
  json tasks = json::array();
  for (const auto& o : r.outcomes) {
    tasks.push_back({{"id", o.task_id},
                     {"answer", o.answer ? json(*o.answer) : json(nullptr)},
                     {"correct", o.correct},
                     {"failed", o.failed},
                     {"status", to_string(o.status)},
                     {"steps", o.steps},
                     {"input_tokens", o.usage.input_tokens},
                     {"output_tokens", o.usage.output_tokens},
                     {"policy_calls", o.usage.policy_calls}});
  }
  json histogram = json::object();
  for (const auto& [steps, count] : r.step_histogram()) histogram[std::to_string(steps)] = count;
  const auto usage = r.total_usage();
  const auto acc = r.accuracy();
  json j{{"method", r.method},
         {"task_count", r.outcomes.size()},
         {"correct", r.correct_count()},
         {"failed", r.failed_count()},
         {"accuracy", acc ? json(*acc) : json(nullptr)},
         {"total_tokens", usage.total()},
         {"input_tokens", usage.input_tokens},
         {"output_tokens", usage.output_tokens},
         {"policy_calls", usage.policy_calls},
         {"step_histogram", std::move(histogram)},
         {"tasks", std::move(tasks)}};
  j["mean_tokens"] = r.outcomes.empty() ? json(nullptr)
                                        : json(static_cast<double>(usage.total()) /
                                               static_cast<double>(r.outcomes.size()));
  return j;
}

}  // namespace

void parse_grade_spec(std::string_view spec, Task& task) {
  if (spec == "exact") {
    task.grade_mode = Task::GradeMode::Exact;
  } else if (spec == "choice") {
    task.grade_mode = Task::GradeMode::ChoiceLetter;
  } else if (spec.substr(0, 8) == "numeric:") {
    const auto tol_text = spec.substr(8);
    double tol = 0.0;
    const auto [end, ec] = std::from_chars(tol_text.data(), tol_text.data() + tol_text.size(), tol);
    if (ec != std::errc() || end != tol_text.data() + tol_text.size() || !(tol > 0.0) || !std::isfinite(tol))
      throw std::invalid_argument("numeric tolerance must be a positive real: " + std::string(spec));
    task.grade_mode = Task::GradeMode::Numeric;
    task.tolerance = tol;
  } else {
    throw std::invalid_argument("unknown grade '" + std::string(spec) + "'");
  }
}

std::vector<Task> load_tasks(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open task file: " + path.string());
  std::vector<Task> tasks;
  std::set<std::string> seen;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (trim(line).empty()) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::exception& e) {
      throw ParseError(e.what(), line_no);
    }
    if (!j.is_object()) throw ParseError("record is not an object", line_no);
    auto field = [&](const char* name) -> std::string {
      const auto it = j.find(name);
      if (it == j.end()) throw ParseError(std::string("missing field '") + name + "'", line_no);
      if (!it->is_string()) throw ParseError(std::string("field '") + name + "' must be a string", line_no);
      return it->get<std::string>();
    };
    Task t;
    t.id = field("id");
    t.question = field("question");
    t.gold_answer = field("answer");
    if (t.id.empty()) throw ParseError("field 'id' is empty", line_no);
    if (t.question.empty()) throw ParseError("field 'question' is empty", line_no);
    if (j.contains("grade")) {
      try {
        parse_grade_spec(field("grade"), t);
      } catch (const std::invalid_argument& e) {
        throw ParseError(std::string("field 'grade': ") + e.what(), line_no);
      }
    }
    if (auto it = j.find("image"); it != j.end() && !it->is_null()) t.image = Attachment{field("image")};
    if (!seen.insert(t.id).second)
      throw DuplicateId("line " + std::to_string(line_no) + ": duplicate task id '" + t.id + "'");
    tasks.push_back(std::move(t));
  }
  return tasks;
}

bool grade_answer(std::string_view answer, const Task& task) {
  switch (task.grade_mode) {
    case Task::GradeMode::Exact:
      return fold(strip_answer_tags(answer)) == fold(strip_answer_tags(task.gold_answer));
    case Task::GradeMode::Numeric: {
      const auto a = parse_real(answer), g = parse_real(task.gold_answer);
      if (!a || !g) return false;
      return std::abs(*a - *g) <= task.tolerance * std::max(1.0, std::abs(*g));
    }
    case Task::GradeMode::ChoiceLetter: {
      const auto a = first_letter(strip_answer_tags(answer)), g = first_letter(task.gold_answer);
      return a && g && *a == *g;
    }
  }
  return false;
}

std::string_view to_string(Method method) {
  switch (method) {
    case Method::Maxs: return "maxs";
    case Method::Cot: return "cot";
    case Method::BestOfN: return "bon";
  }
  return "?";
}

Method method_from_string(std::string_view s) {
  if (s == "maxs") return Method::Maxs;
  if (s == "cot") return Method::Cot;
  if (s == "bon") return Method::BestOfN;
  throw std::invalid_argument("unknown method '" + std::string(s) + "'");
}

std::size_t RunReport::correct_count() const noexcept {
  return static_cast<std::size_t>(std::count_if(outcomes.begin(), outcomes.end(), [](const auto& o) { return o.correct; }));
}

std::size_t RunReport::failed_count() const noexcept {
  return static_cast<std::size_t>(std::count_if(outcomes.begin(), outcomes.end(), [](const auto& o) { return o.failed; }));
}

std::optional<double> RunReport::accuracy() const noexcept {
  if (outcomes.empty()) return std::nullopt;
  return static_cast<double>(correct_count()) / static_cast<double>(outcomes.size());
}

TokenUsage RunReport::total_usage() const noexcept {
  TokenUsage u;
  for (const auto& o : outcomes) u += o.usage;
  return u;
}

std::map<int, int> RunReport::step_histogram() const {
  std::map<int, int> h;
  for (const auto& o : outcomes) ++h[o.steps];
  return h;
}

RunReport evaluate_run(std::span<const Task> tasks, StepPolicy& policy, ToolRuntime& tools,
                       const ValidatedConfig& config, const RunOptions& options) {
  RunReport report;
  report.method = std::string(to_string(options.method));
  report.outcomes.resize(tasks.size());
  if (options.trace_dir) std::filesystem::create_directories(*options.trace_dir);

  bounded_parallel_for(tasks.size(), options.task_parallelism, [&](std::size_t i) {
    const Task& task = tasks[i];
    std::optional<JsonlTraceWriter> writer;
    if (options.trace_dir) writer.emplace(*options.trace_dir / trace_file_name(task.id), config.get());
    DecodeOptions dopts;
    dopts.system_prompt = options.system_prompt;
    dopts.trace = writer ? &*writer : nullptr;
    DecodeResult result;
    switch (options.method) {
      case Method::Maxs: result = maxs_decode(task, policy, tools, config, dopts); break;
      case Method::Cot: result = cot_decode(task, policy, tools, config, dopts); break;
      case Method::BestOfN:
        result = best_of_n_decode(task, policy, tools, config, config->best_of_n, mean_step_logprob, dopts);
        break;
    }
    const auto& traj = result.trajectory;
    TaskOutcome& o = report.outcomes[i];
    o.task_id = task.id;
    o.answer = final_answer(traj);
    o.status = traj.status();
    o.failed = traj.status() == TrajectoryStatus::Failed;
    o.correct = !o.failed && o.answer && grade_answer(*o.answer, task);
    o.usage = traj.usage();
    o.steps = traj.model_step_count();
    if (o.failed) spdlog::warn("task {} failed", task.id);
  });
  return report;
}

McNemarResult mcnemar_test(std::span<const std::pair<bool, bool>> pairs) {
  if (pairs.empty()) throw std::invalid_argument("mcnemar_test: no pairs");
  McNemarResult r;
  for (const auto& [a, b] : pairs) {
    if (a && !b) ++r.b;
    if (!a && b) ++r.c;
  }
  const int n = r.b + r.c;
  if (n == 0) return r;
  const int k_max = std::min(r.b, r.c);
  // Sum C(n,k)/2^n in log space so large n cannot overflow.
  double tail = 0.0;
  for (int k = 0; k <= k_max; ++k) {
    const double log_term = std::lgamma(n + 1.0) - std::lgamma(k + 1.0) - std::lgamma(n - k + 1.0) -
                            n * std::log(2.0);
    tail += std::exp(log_term);
  }
  r.p_value = std::min(1.0, 2.0 * tail);
  return r;
}

McNemarResult mcnemar_test(const RunReport& first, const RunReport& second) {
  std::map<std::string, bool> by_id;
  for (const auto& o : second.outcomes) by_id[o.task_id] = o.correct;
  if (by_id.size() != first.outcomes.size()) throw std::invalid_argument("reports cover different tasks");
  std::vector<std::pair<bool, bool>> pairs;
  for (const auto& o : first.outcomes) {
    const auto it = by_id.find(o.task_id);
    if (it == by_id.end()) throw std::invalid_argument("task " + o.task_id + " missing from second report");
    pairs.emplace_back(o.correct, it->second);
  }
  return mcnemar_test(pairs);
}

void emit_reports(std::span<const RunReport> reports, const std::filesystem::path& out_dir,
                  const std::optional<McNemarResult>& comparison) {
  std::filesystem::create_directories(out_dir);

  json doc{{"methods", json::array()}};
  for (const auto& r : reports) doc["methods"].push_back(report_json(r));
  if (comparison)
    doc["mcnemar"] = {{"b", comparison->b}, {"c", comparison->c}, {"p_value", comparison->p_value}};
  {
    const auto path = out_dir / "report.json";
    auto out = open_output(path);
    out << doc.dump(2) << '\n';
    close_output(out, path);
  }
  {
    const auto path = out_dir / "tasks.csv";
    auto out = open_output(path);
    out << "method,task_id,correct,failed,status,steps,input_tokens,output_tokens,policy_calls,answer\n";
    for (const auto& r : reports)
      for (const auto& o : r.outcomes)
        out << csv_field(r.method) << ',' << csv_field(o.task_id) << ',' << (o.correct ? 1 : 0) << ','
            << (o.failed ? 1 : 0) << ',' << to_string(o.status) << ',' << o.steps << ','
            << o.usage.input_tokens << ',' << o.usage.output_tokens << ',' << o.usage.policy_calls << ','
            << csv_field(o.answer.value_or("")) << '\n';
    close_output(out, path);
  }
  {
    const auto path = out_dir / "frontier.csv";
    auto out = open_output(path);
    out << "method,total_tokens,accuracy\n";
    for (const auto& r : reports) {
      const auto acc = r.accuracy();
      out << csv_field(r.method) << ',' << r.total_tokens() << ',' << (acc ? format_real(*acc) : "") << '\n';
    }
    close_output(out, path);
  }
  {
    const auto path = out_dir / "steps_histogram.csv";
    auto out = open_output(path);
    out << "method,steps,count\n";
    for (const auto& r : reports)
      for (const auto& [steps, count] : r.step_histogram())
        out << csv_field(r.method) << ',' << steps << ',' << count << '\n';
    close_output(out, path);
  }
}

void emit_report(const RunReport& report, const std::filesystem::path& out_dir) {
  emit_reports(std::span<const RunReport>(&report, 1), out_dir);
}

RunConfig run_config_from_json(const json& j) {
  std::vector<std::string> problems;
  RunConfig rc;
  if (!j.is_object()) throw ConfigError({"config must be a JSON object"});
  static const std::set<std::string> known{"search", "policy", "sandbox", "corpus", "scripted_policy",
                                           "scripted_tools", "task_parallelism", "system_prompt"};
  for (const auto& [key, _] : j.items())
    if (!known.count(key)) problems.push_back("unknown key '" + key + "'");
  try {
    if (auto it = j.find("search"); it != j.end()) {
      static const std::set<std::string> search_keys{
          "K", "M", "N", "tau", "alpha", "beta", "delta", "max_steps", "top_p", "seed", "gamma",
          "use_convergence", "greedy", "policy_weighted_selection", "exhaustive", "parallelism",
          "best_of_n", "lookahead_top_p"};
      for (const auto& [key, _] : it->items())
        if (!search_keys.count(key)) problems.push_back("unknown key 'search." + key + "'");
      rc.search = search_config_from_json(*it);
    }
    if (auto it = j.find("policy"); it != j.end()) {
      RemotePolicyConfig pc;
      pc.endpoint = it->value("endpoint", std::string());
      pc.model = it->value("model", std::string());
      pc.request_timeout_ms = it->value("timeout_ms", pc.request_timeout_ms);
      pc.max_retries = it->value("max_retries", pc.max_retries);
      pc.initial_backoff_ms = it->value("initial_backoff_ms", pc.initial_backoff_ms);
      pc.max_tokens = it->value("max_tokens", pc.max_tokens);
      pc.step_delimiter = it->value("step_delimiter", pc.step_delimiter);
      if (auto s = it->find("stop"); s != it->end()) pc.stop_sequences = s->get<std::vector<std::string>>();
      rc.remote = pc;
    }
    if (auto it = j.find("sandbox"); it != j.end()) {
      rc.sandbox.wall_time_ms = it->value("wall_time_ms", rc.sandbox.wall_time_ms);
      rc.sandbox.memory_bytes = it->value("memory_bytes", rc.sandbox.memory_bytes);
      rc.sandbox.network_access = it->value("network_access", rc.sandbox.network_access);
      if (auto s = it->find("interpreter"); s != it->end()) rc.interpreter = s->get<std::string>();
      if (rc.sandbox.wall_time_ms <= 0) problems.emplace_back("sandbox.wall_time_ms > 0 violated");
      if (rc.sandbox.memory_bytes <= 0) problems.emplace_back("sandbox.memory_bytes > 0 violated");
    }
    if (auto it = j.find("corpus"); it != j.end()) rc.corpus = it->get<std::string>();
    if (auto it = j.find("scripted_policy"); it != j.end()) rc.scripted_policy = it->get<std::string>();
    if (auto it = j.find("scripted_tools"); it != j.end()) rc.scripted_tools = it->get<std::string>();
    rc.task_parallelism = j.value("task_parallelism", rc.task_parallelism);
    rc.system_prompt = j.value("system_prompt", rc.system_prompt);
    if (rc.task_parallelism < 1) problems.emplace_back("task_parallelism >= 1 violated");
  } catch (const json::exception& e) {
    problems.emplace_back(e.what());
  }
  for (auto& v : config_violations(rc.search)) problems.push_back(std::move(v));
  if (!problems.empty()) throw ConfigError(std::move(problems));
  return rc;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError({"cannot open config file " + path.string()});
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw ConfigError({std::string("config is not valid JSON: ") + e.what()});
  }
  return run_config_from_json(j);
}

void load_scripted_tools(const std::filesystem::path& path, ScriptedToolRuntime& runtime) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open tool table " + path.string());
  const auto j = json::parse(in);
  if (auto it = j.find("search"); it != j.end())
    for (const auto& [q, r] : it->items()) runtime.set_response(ToolDirective::Kind::Search, q, r.get<std::string>());
  if (auto it = j.find("code"); it != j.end())
    for (const auto& [p, r] : it->items()) runtime.set_response(ToolDirective::Kind::Code, p, r.get<std::string>());
}

RunResources make_resources(const RunConfig& config) {
  RunResources res;
  std::shared_ptr<RemotePolicy> remote;
  if (config.scripted_policy) {
    res.policy = std::make_unique<ScriptedPolicy>(
        std::make_shared<const ScriptedTree>(ScriptedTree::load(*config.scripted_policy)));
  } else if (config.remote && !config.remote->endpoint.empty()) {
    remote = std::make_shared<RemotePolicy>(RemotePolicyConfig::with_env_credential(*config.remote));
  } else {
    throw ConfigError({"no policy configured: set policy.endpoint (or --endpoint) or a scripted policy"});
  }

  if (config.scripted_tools) {
    auto tools = std::make_unique<ScriptedToolRuntime>();
    load_scripted_tools(*config.scripted_tools, *tools);
    res.tools = std::move(tools);
  } else {
    std::shared_ptr<const CodeSandbox> sandbox;
    try {
      sandbox = std::make_shared<const CodeSandbox>(config.interpreter, config.sandbox);
    } catch (const InterpreterMissing& e) {
      throw ConfigError({e.what()});
    }
    std::shared_ptr<SearchProvider> search;
    if (config.corpus) {
      search = std::make_shared<StaticCorpus>(StaticCorpus::load(*config.corpus));
    } else if (remote) {
      search = std::make_shared<RemoteSearch>([remote](const std::string& prompt) { return remote->complete_text(prompt); });
    }
    res.tools = std::make_unique<StandardToolRuntime>(std::move(sandbox), std::move(search));
  }

  if (remote) {
    // The search provider shares the client; the returned policy owns a
    // separate handle with identical settings.
    res.policy = std::make_unique<RemotePolicy>(remote->config());
  }
  return res;
}

}  // namespace maxs
