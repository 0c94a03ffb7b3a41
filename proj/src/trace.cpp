#include "maxs/trace.hpp"

#include "maxs/errors.hpp"

namespace maxs {

using nlohmann::json;

json to_json(const ToolInvocation& inv) {
  json j{{"tool_kind", to_string(inv.tool_kind)},
         {"request", inv.request},
         {"wall_time_ms", inv.wall_time_ms},
         {"status", to_string(inv.status)}};
  j["response"] = inv.response ? json(*inv.response) : json(nullptr);
  return j;
}

json to_json(const Step& s) {
  json j{{"index", s.index},
         {"kind", to_string(s.kind)},
         {"text", s.text},
         {"token_logprobs", s.token_logprobs},
         {"g", s.g},
         {"input_tokens", s.input_tokens},
         {"output_tokens", s.output_tokens}};
  j["tool"] = s.tool ? to_json(*s.tool) : json(nullptr);
  return j;
}

namespace {

json usage_json(const TokenUsage& u) {
  return {{"input_tokens", u.input_tokens}, {"output_tokens", u.output_tokens}, {"policy_calls", u.policy_calls}};
}

TokenUsage usage_from_json(const json& j) {
  return {j.at("input_tokens").get<std::int64_t>(), j.at("output_tokens").get<std::int64_t>(),
          j.at("policy_calls").get<std::int64_t>()};
}

}  // namespace

json to_json(const Trajectory& t) {
  json steps = json::array();
  for (const auto& s : t.steps()) steps.push_back(to_json(s));
  json j{{"task_id", t.task_id()},
         {"question", t.question()},
         {"status", to_string(t.status())},
         {"usage", usage_json(t.usage())},
         {"steps", std::move(steps)}};
  j["image"] = t.image() ? json(t.image()->data) : json(nullptr);
  return j;
}

json to_json(const Rollout& r) {
  json lookahead = json::array();
  for (const auto& s : r.lookahead) lookahead.push_back(to_json(s));
  return {{"candidate", to_json(r.candidate)},
          {"lookahead", std::move(lookahead)},
          {"g_seq", r.g_seq},
          {"weight", r.weight}};
}

json to_json(const ValueBreakdown& b) {
  return {{"F", b.F},           {"F_prev", b.F_prev},       {"A", b.A},
          {"R_adv", b.R_adv},   {"V_step", b.V_step},       {"R_step", b.R_step},
          {"V_slope", b.V_slope}, {"R_slope", b.R_slope},   {"norm_adv", b.norm_adv},
          {"norm_step", b.norm_step}, {"norm_slope", b.norm_slope}, {"combined", b.combined}};
}

json to_json(const MetaStepRecord& r) {
  json candidates = json::array();
  for (const auto& group : r.candidates) {
    json g = json::array();
    for (const auto& ro : group) g.push_back(to_json(ro));
    candidates.push_back(std::move(g));
  }
  json breakdowns = json::array();
  for (const auto& b : r.breakdowns) breakdowns.push_back(to_json(b));
  return {{"type", "meta_step"},
          {"task_id", r.task_id},
          {"step_index", r.step_index},
          {"beam", r.beam},
          {"mode", to_string(r.mode)},
          {"converged", r.converged},
          {"chosen", r.chosen},
          {"usage", usage_json(r.usage)},
          {"candidates", std::move(candidates)},
          {"breakdowns", std::move(breakdowns)},
          {"trajectory", to_json(r.trajectory)}};
}

json to_json(const SearchConfig& c) {
  json j{{"K", c.beam_width},
         {"M", c.rollouts},
         {"N", c.lookahead},
         {"tau", c.temperature},
         {"alpha", c.alpha},
         {"beta", c.beta},
         {"delta", c.convergence_threshold},
         {"max_steps", c.max_steps},
         {"top_p", c.top_p},
         {"seed", c.seed},
         {"gamma", c.discount},
         {"use_convergence", c.use_convergence},
         {"greedy", c.greedy},
         {"policy_weighted_selection", c.policy_weighted_selection},
         {"exhaustive", c.exhaustive},
         {"parallelism", c.parallelism},
         {"best_of_n", c.best_of_n}};
  j["lookahead_top_p"] = c.lookahead_top_p ? json(*c.lookahead_top_p) : json(nullptr);
  return j;
}

ToolInvocation tool_invocation_from_json(const json& j) {
  ToolInvocation inv;
  inv.tool_kind = tool_kind_from_string(j.at("tool_kind").get<std::string>());
  inv.request = j.at("request").get<std::string>();
  if (!j.at("response").is_null()) inv.response = j.at("response").get<std::string>();
  inv.wall_time_ms = j.at("wall_time_ms").get<std::int64_t>();
  inv.status = tool_status_from_string(j.at("status").get<std::string>());
  return inv;
}

Step step_from_json(const json& j) {
  Step s;
  s.index = j.at("index").get<int>();
  s.kind = step_kind_from_string(j.at("kind").get<std::string>());
  s.text = j.at("text").get<std::string>();
  s.token_logprobs = j.at("token_logprobs").get<std::vector<double>>();
  s.g = j.at("g").get<double>();
  s.input_tokens = j.at("input_tokens").get<std::int64_t>();
  s.output_tokens = j.at("output_tokens").get<std::int64_t>();
  if (!j.at("tool").is_null()) s.tool = tool_invocation_from_json(j.at("tool"));
  return s;
}

Trajectory trajectory_from_json(const json& j) {
  std::optional<Attachment> image;
  if (j.contains("image") && !j.at("image").is_null()) image = Attachment{j.at("image").get<std::string>()};
  Trajectory t(j.at("task_id").get<std::string>(), j.at("question").get<std::string>(), std::move(image));
  for (const auto& s : j.at("steps")) t.append(step_from_json(s));
  t.set_status(trajectory_status_from_string(j.at("status").get<std::string>()));
  t.set_usage(usage_from_json(j.at("usage")));
  return t;
}

Rollout rollout_from_json(const json& j) {
  Rollout r;
  r.candidate = step_from_json(j.at("candidate"));
  for (const auto& s : j.at("lookahead")) r.lookahead.push_back(step_from_json(s));
  r.g_seq = j.at("g_seq").get<std::vector<double>>();
  r.weight = j.at("weight").get<double>();
  return r;
}

ValueBreakdown breakdown_from_json(const json& j) {
  ValueBreakdown b;
  b.F = j.at("F").get<double>();
  b.F_prev = j.at("F_prev").get<double>();
  b.A = j.at("A").get<double>();
  b.R_adv = j.at("R_adv").get<double>();
  b.V_step = j.at("V_step").get<double>();
  b.R_step = j.at("R_step").get<double>();
  b.V_slope = j.at("V_slope").get<double>();
  b.R_slope = j.at("R_slope").get<double>();
  b.norm_adv = j.at("norm_adv").get<double>();
  b.norm_step = j.at("norm_step").get<double>();
  b.norm_slope = j.at("norm_slope").get<double>();
  b.combined = j.at("combined").get<double>();
  return b;
}

MetaStepRecord meta_step_from_json(const json& j) {
  MetaStepRecord r;
  r.task_id = j.at("task_id").get<std::string>();
  r.step_index = j.at("step_index").get<int>();
  r.beam = j.at("beam").get<int>();
  r.mode = decode_mode_from_string(j.at("mode").get<std::string>());
  r.converged = j.at("converged").get<bool>();
  r.chosen = j.at("chosen").get<std::size_t>();
  r.usage = usage_from_json(j.at("usage"));
  for (const auto& g : j.at("candidates")) {
    RolloutGroup group;
    for (const auto& ro : g) group.push_back(rollout_from_json(ro));
    r.candidates.push_back(std::move(group));
  }
  for (const auto& b : j.at("breakdowns")) r.breakdowns.push_back(breakdown_from_json(b));
  r.trajectory = trajectory_from_json(j.at("trajectory"));
  return r;
}

SearchConfig search_config_from_json(const json& j, SearchConfig c) {
  auto get = [&](const char* key, auto& field) {
    if (auto it = j.find(key); it != j.end() && !it->is_null()) field = it->get<std::decay_t<decltype(field)>>();
  };
  get("K", c.beam_width);
  get("M", c.rollouts);
  get("N", c.lookahead);
  get("tau", c.temperature);
  get("alpha", c.alpha);
  get("beta", c.beta);
  get("delta", c.convergence_threshold);
  get("max_steps", c.max_steps);
  get("top_p", c.top_p);
  get("seed", c.seed);
  get("gamma", c.discount);
  get("use_convergence", c.use_convergence);
  get("greedy", c.greedy);
  get("policy_weighted_selection", c.policy_weighted_selection);
  get("exhaustive", c.exhaustive);
  get("parallelism", c.parallelism);
  get("best_of_n", c.best_of_n);
  if (auto it = j.find("lookahead_top_p"); it != j.end() && !it->is_null()) c.lookahead_top_p = it->get<double>();
  return c;
}

JsonlTraceWriter::JsonlTraceWriter(const std::filesystem::path& path, const SearchConfig& config)
    : out_(path, std::ios::binary | std::ios::trunc) {
  if (!out_) throw Error("cannot open trace file: " + path.string());
  write_line(json{{"type", "config"}, {"config", to_json(config)}});
}

void JsonlTraceWriter::write_line(const json& j) {
  std::lock_guard lock(mutex_);
  out_ << j.dump() << '\n';
  out_.flush();
  if (!out_) throw Error("trace write failed");
}

void JsonlTraceWriter::meta_step(const MetaStepRecord& record) { write_line(to_json(record)); }

void JsonlTraceWriter::result(std::string_view method, const Trajectory& trajectory, int runs) {
  write_line(json{{"type", "result"}, {"method", method}, {"runs", runs}, {"trajectory", to_json(trajectory)}});
}

TraceFile read_trace(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open trace file: " + path.string());
  TraceFile trace;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    try {
      const auto j = json::parse(line);
      const auto type = j.at("type").get<std::string>();
      if (type == "config") {
        trace.config = search_config_from_json(j.at("config"));
      } else if (type == "meta_step") {
        trace.records.push_back(meta_step_from_json(j));
      } else if (type == "result") {
        trace.method = j.at("method").get<std::string>();
        trace.runs = j.at("runs").get<int>();
        trace.result = trajectory_from_json(j.at("trajectory"));
      } else {
        throw ParseError("unknown record type " + type, line_no);
      }
    } catch (const json::exception& e) {
      throw ParseError(e.what(), line_no);
    } catch (const std::logic_error& e) {
      throw ParseError(e.what(), line_no);
    }
  }
  return trace;
}

namespace {

bool same_generated(const Step& a, const Step& b) {
  return a.kind == b.kind && a.text == b.text && a.token_logprobs == b.token_logprobs && a.g == b.g &&
         a.input_tokens == b.input_tokens && a.output_tokens == b.output_tokens;
}

bool is_prefix(const std::vector<Step>& prefix, const std::vector<Step>& whole) {
  return prefix.size() <= whole.size() && std::equal(prefix.begin(), prefix.end(), whole.begin());
}

}  // namespace

ReplayReport replay(const TraceFile& trace) {
  ReplayReport report;
  if (!trace.result) {
    report.problems.emplace_back("trace has no result record (run interrupted?)");
    return report;
  }
  const Trajectory& final_traj = *trace.result;

  report.breakdowns_match = true;
  std::map<int, bool> beam_converged;
  for (const auto& rec : trace.records) {
    const auto where = "meta-step " + std::to_string(rec.step_index) + " beam " + std::to_string(rec.beam);
    if (rec.candidates.empty() || rec.chosen >= rec.candidates.size()) {
      report.problems.push_back(where + ": chosen index out of range");
      continue;
    }
    if (beam_converged[rec.beam] && rec.mode != DecodeMode::Autoregressive)
      report.problems.push_back(where + ": lookahead after convergence");
    if (rec.converged) beam_converged[rec.beam] = true;
    if (rec.mode == DecodeMode::Lookahead) {
      if (rec.breakdowns.size() != rec.candidates.size()) {
        report.problems.push_back(where + ": breakdown count mismatch");
        report.breakdowns_match = false;
        continue;
      }
      const auto recomputed = evaluate_candidates(rec.candidates, rec.breakdowns.front().F_prev, trace.config);
      if (recomputed != rec.breakdowns) {
        report.problems.push_back(where + ": re-scored breakdowns differ");
        report.breakdowns_match = false;
      }
    }
  }

  // Rebuild the final trajectory from the commits on its lineage.
  Trajectory rebuilt(final_traj.task_id(), final_traj.question(), final_traj.image());
  TokenUsage usage;
  for (const auto& rec : trace.records) usage += rec.usage;
  for (const auto& rec : trace.records) {
    if (rec.chosen >= rec.candidates.size()) continue;
    const auto& snap = rec.trajectory.steps();
    if (!is_prefix(rebuilt.steps(), snap) || snap.size() <= rebuilt.steps().size() ||
        !is_prefix(snap, final_traj.steps()))
      continue;
    const Step& committed = snap[rebuilt.steps().size()];
    Step cand = rec.candidates[rec.chosen].front().candidate;
    if (!same_generated(cand, committed)) {
      report.problems.push_back("meta-step " + std::to_string(rec.step_index) +
                                ": committed step is not the chosen candidate");
      break;
    }
    cand.index = 0;
    cand.tool = committed.tool;
    rebuilt.append(std::move(cand));
    if (rebuilt.steps().back().is_tool_call()) {
      if (snap.size() <= rebuilt.steps().size()) {
        report.problems.push_back("tool call without a recorded result");
        break;
      }
      rebuilt.append(snap[rebuilt.steps().size()]);
    }
  }
  if (rebuilt.status() == TrajectoryStatus::InProgress) rebuilt.set_status(final_traj.status());
  rebuilt.set_usage(final_traj.usage());
  report.trajectory_matches = rebuilt == final_traj;
  if (!report.trajectory_matches) report.problems.emplace_back("rebuilt trajectory differs from the recorded result");

  // With one run and one beam every policy call is attributed to a record.
  report.usage_matches = usage == final_traj.usage();
  if (trace.runs == 1 && trace.config.beam_width == 1 && !report.usage_matches)
    report.problems.emplace_back("record usage does not sum to the trajectory usage");
  report.reconstructed = std::move(rebuilt);
  return report;
}

}  // namespace maxs
