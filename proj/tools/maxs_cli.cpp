// Command-line front end: run, compare, verify, replay.

#include <CLI11.hpp>
#include <spdlog/spdlog.h>

#include <iostream>

#include "maxs/errors.hpp"
#include "maxs/harness.hpp"
#include "maxs/oracle.hpp"
#include "maxs/trace.hpp"

namespace {

constexpr int kExitOk = 0;
constexpr int kExitFailedTask = 1;
constexpr int kExitConfig = 2;

struct CommonArgs {
  std::string config;
  std::string tasks;
  std::string endpoint;
  std::string model;
  std::optional<std::uint64_t> seed;
  std::string out = "maxs_out";
  bool no_convergence = false;
  bool greedy = false;
  std::string scripted;
  std::string scripted_tools;
  std::string corpus;
  std::optional<int> parallelism;
};

void add_common(CLI::App* cmd, CommonArgs& a) {
  cmd->add_option("--config", a.config, "JSON run configuration")->check(CLI::ExistingFile);
  cmd->add_option("--tasks", a.tasks, "Task file (JSONL)")->required()->check(CLI::ExistingFile);
  cmd->add_option("--endpoint", a.endpoint, "Chat-completions URL");
  cmd->add_option("--model", a.model, "Model name sent to the endpoint");
  cmd->add_option("--seed", a.seed, "Random seed");
  cmd->add_option("--out", a.out, "Output directory");
  cmd->add_flag("--no-convergence", a.no_convergence, "Never switch to plain decoding");
  cmd->add_flag("--greedy", a.greedy, "Argmax selection and greedy sampling");
  cmd->add_option("--scripted", a.scripted, "Scripted policy tree (JSON)")->check(CLI::ExistingFile);
  cmd->add_option("--scripted-tools", a.scripted_tools, "Scripted tool tables (JSON)")->check(CLI::ExistingFile);
  cmd->add_option("--corpus", a.corpus, "Search corpus (JSONL)")->check(CLI::ExistingFile);
  cmd->add_option("--parallel", a.parallelism, "Tasks decoded concurrently");
}

maxs::RunConfig resolve_config(const CommonArgs& a) {
  maxs::RunConfig rc = a.config.empty() ? maxs::RunConfig{} : maxs::load_run_config(a.config);
  if (!a.endpoint.empty() || !a.model.empty()) {
    auto remote = rc.remote.value_or(maxs::RemotePolicyConfig{});
    if (!a.endpoint.empty()) remote.endpoint = a.endpoint;
    if (!a.model.empty()) remote.model = a.model;
    rc.remote = remote;
  }
  if (a.seed) rc.search.seed = *a.seed;
  if (a.no_convergence) rc.search.use_convergence = false;
  if (a.greedy) rc.search.greedy = true;
  if (!a.scripted.empty()) rc.scripted_policy = a.scripted;
  if (!a.scripted_tools.empty()) rc.scripted_tools = a.scripted_tools;
  if (!a.corpus.empty()) rc.corpus = a.corpus;
  if (a.parallelism) rc.task_parallelism = *a.parallelism;
  return rc;
}

void print_summary(const maxs::RunReport& r) {
  const auto acc = r.accuracy();
  std::cout << r.method << ": " << r.correct_count() << "/" << r.outcomes.size() << " correct";
  if (acc) std::cout << " (accuracy " << *acc << ")";
  std::cout << ", " << r.total_tokens() << " tokens, " << r.total_usage().policy_calls << " policy calls";
  if (r.failed_count()) std::cout << ", " << r.failed_count() << " failed";
  std::cout << "\n";
}

maxs::RunReport run_method(const maxs::RunConfig& rc, const std::vector<maxs::Task>& tasks,
                           maxs::Method method, const std::filesystem::path& out) {
  const auto vc = maxs::validate_config(rc.search);
  auto res = maxs::make_resources(rc);
  maxs::RunOptions opts;
  opts.method = method;
  opts.task_parallelism = rc.task_parallelism;
  opts.trace_dir = out / "traces" / std::string(maxs::to_string(method));
  opts.system_prompt = rc.system_prompt;
  return maxs::evaluate_run(tasks, *res.policy, *res.tools, vc, opts);
}

int cmd_run(const CommonArgs& a, const std::string& method) {
  const auto rc = resolve_config(a);
  const auto tasks = maxs::load_tasks(a.tasks);
  const auto report = run_method(rc, tasks, maxs::method_from_string(method), a.out);
  maxs::emit_report(report, a.out);
  print_summary(report);
  return report.failed_count() ? kExitFailedTask : kExitOk;
}

int cmd_compare(const CommonArgs& a, const std::vector<std::string>& methods) {
  if (methods.size() != 2) throw maxs::ConfigError({"compare needs exactly two --method values"});
  const auto rc = resolve_config(a);
  const auto tasks = maxs::load_tasks(a.tasks);
  std::vector<maxs::RunReport> reports;
  for (const auto& m : methods) reports.push_back(run_method(rc, tasks, maxs::method_from_string(m), a.out));
  std::optional<maxs::McNemarResult> test;
  if (!tasks.empty()) test = maxs::mcnemar_test(reports[0], reports[1]);
  maxs::emit_reports(reports, a.out, test);
  for (const auto& r : reports) print_summary(r);
  if (test)
    std::cout << "McNemar: b=" << test->b << " c=" << test->c << " p=" << test->p_value << "\n";
  bool failed = false;
  for (const auto& r : reports) failed = failed || r.failed_count() > 0;
  return failed ? kExitFailedTask : kExitOk;
}

int cmd_verify(std::uint64_t seed, int sweeps) {
  const auto rows = maxs::oracle::run_verification(seed, sweeps);
  std::cout << maxs::oracle::format_verification(rows);
  for (const auto& r : rows)
    if (!r.passed()) return kExitFailedTask;
  return kExitOk;
}

int cmd_replay(const std::string& path) {
  const auto trace = maxs::read_trace(path);
  const auto report = maxs::replay(trace);
  if (trace.result) {
    const auto& t = *trace.result;
    std::cout << "task " << t.task_id() << " (" << trace.method << ", " << to_string(t.status()) << ")\n";
    std::cout << "Q: " << t.question() << "\n";
  }
  for (const auto& rec : trace.records) {
    std::cout << "meta-step " << rec.step_index << " [" << to_string(rec.mode) << "] beam " << rec.beam
              << ": " << rec.candidates.size() << " candidates, chose " << rec.chosen;
    if (!rec.breakdowns.empty()) std::cout << " (combined " << rec.breakdowns[rec.chosen].combined << ")";
    if (rec.converged) std::cout << " converged";
    std::cout << "\n";
  }
  std::cout << "--- trajectory\n";
  for (const auto& s : report.reconstructed.steps())
    std::cout << s.index << " " << to_string(s.kind) << ": " << s.text << "\n";
  const auto& u = report.reconstructed.usage();
  std::cout << "usage: " << u.input_tokens << " in, " << u.output_tokens << " out, " << u.policy_calls
            << " calls\n";
  for (const auto& p : report.problems) std::cout << "problem: " << p << "\n";
  std::cout << (report.ok() ? "replay ok" : "replay FAILED") << "\n";
  return report.ok() ? kExitOk : kExitFailedTask;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Lookahead step search for tool-using agents"};
  app.require_subcommand(1);
  std::string log_level = "warn";
  app.add_option("--log-level", log_level, "trace|debug|info|warn|error|off");

  CommonArgs run_args;
  std::string run_method_name = "maxs";
  auto* run = app.add_subcommand("run", "Decode a task file with one method");
  add_common(run, run_args);
  run->add_option("--method", run_method_name, "maxs|cot|bon")->check(CLI::IsMember({"maxs", "cot", "bon"}));

  CommonArgs cmp_args;
  std::vector<std::string> cmp_methods;
  auto* compare = app.add_subcommand("compare", "Run two methods and test the paired difference");
  add_common(compare, cmp_args);
  compare->add_option("--method", cmp_methods, "Two of maxs|cot|bon")
      ->required()
      ->check(CLI::IsMember({"maxs", "cot", "bon"}));

  std::uint64_t verify_seed = 0;
  int sweeps = 10000;
  auto* verify = app.add_subcommand("verify", "Run the reference property suite");
  verify->add_option("--seed", verify_seed, "Random seed");
  verify->add_option("--sweeps", sweeps, "Random sequences per bound")->check(CLI::PositiveNumber);

  std::string trace_path;
  auto* replay = app.add_subcommand("replay", "Check and print a trace file");
  replay->add_option("trace", trace_path, "Trace file (JSONL)")->required()->check(CLI::ExistingFile);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitConfig;
  }
  spdlog::set_level(spdlog::level::from_str(log_level));

  try {
    if (*run) return cmd_run(run_args, run_method_name);
    if (*compare) return cmd_compare(cmp_args, cmp_methods);
    if (*verify) return cmd_verify(verify_seed, sweeps);
    if (*replay) return cmd_replay(trace_path);
  } catch (const maxs::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const maxs::ParseError& e) {
    std::cerr << "parse error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const maxs::DuplicateId& e) {
    std::cerr << "task file error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitFailedTask;
  }
  return kExitOk;
}
