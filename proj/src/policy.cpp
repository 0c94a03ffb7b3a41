#include "maxs/policy.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <nlohmann/json.hpp>
#include <numeric>
#include <sstream>

#include "maxs/errors.hpp"

namespace maxs {

Step StepPolicy::sample(const PromptMessages& context, const SampleParams& params, Rng& rng) {
  if (context.empty()) throw std::invalid_argument("sample: empty context");
  if (!(params.top_p > 0.0 && params.top_p <= 1.0))
    throw std::invalid_argument("sample: top_p outside (0,1]");
  Step step = do_sample(context, params, rng);
  if (step.text.empty()) throw EmptyStep("policy returned an empty step");
  if (capabilities().supports_logprobs && step.token_logprobs.empty())
    throw PolicyError("policy advertises log-probabilities but returned none");
  input_tokens_ += step.input_tokens;
  output_tokens_ += step.output_tokens;
  calls_ += 1;
  return step;
}

std::vector<WeightedStep> StepPolicy::enumerate(const PromptMessages&, double) const {
  throw PolicyError("policy cannot enumerate its continuations");
}

std::optional<std::vector<double>> StepPolicy::rescore(const PromptMessages&, const std::vector<Step>&) {
  return std::nullopt;
}

TokenUsage StepPolicy::usage() const noexcept {
  return {input_tokens_.load(), output_tokens_.load(), calls_.load()};
}

Step sample_step(StepPolicy& policy, const PromptMessages& context, const SampleParams& params, Rng& rng) {
  return policy.sample(context, params, rng);
}

void extend_context(PromptMessages& context, const Step& step) {
  context.push_back({step.kind == StepKind::ToolResult ? "tool" : "assistant", step.text, std::nullopt});
}

ToolInvocation execute_step_tool(const Step& step, ToolRuntime* runtime) {
  ToolInvocation failed;
  failed.tool_kind = step.kind == StepKind::SearchCall ? ToolKind::Search : ToolKind::Code;
  failed.status = ToolStatus::Error;
  ToolDirective directive;
  try {
    directive = parse_directive(step.text);
  } catch (const MalformedDirective&) {
    return failed;
  }
  failed.request = directive.payload;
  if (!runtime || directive.payload.empty()) return failed;
  return runtime->execute(directive);
}

namespace {

// Attaches the tool result of a tool-call step and returns the ToolResult step.
Step run_tool_for(Step& step, ToolRuntime* runtime) {
  step.tool = execute_step_tool(step, runtime);
  return Step::tool_result(*step.tool);
}

}  // namespace

Rollout rollout(StepPolicy& policy, const PromptMessages& context, const Step& candidate, int depth,
                const SampleParams& params, Rng& rng, ToolRuntime* scratch) {
  if (depth < 1) throw std::invalid_argument("rollout: depth must be >= 1");
  Rollout r;
  r.candidate = candidate;
  PromptMessages ctx = context;
  extend_context(ctx, r.candidate);
  if (r.candidate.is_tool_call()) {
    auto result = run_tool_for(r.candidate, scratch);
    extend_context(ctx, result);
    r.lookahead.push_back(std::move(result));
  }
  if (r.candidate.kind == StepKind::FinalAnswer) return r;

  while (r.depth() < depth) {
    Step next;
    try {
      next = policy.sample(ctx, params, rng);
    } catch (const EmptyStep&) {
      break;
    }
    r.g_seq.push_back(next.g);
    extend_context(ctx, next);
    const bool done = next.kind == StepKind::FinalAnswer;
    if (next.is_tool_call()) {
      auto result = run_tool_for(next, scratch);
      r.lookahead.push_back(std::move(next));
      extend_context(ctx, result);
      r.lookahead.push_back(std::move(result));
    } else {
      r.lookahead.push_back(std::move(next));
    }
    if (done) break;
  }
  return r;
}

namespace {

void enumerate_paths(const StepPolicy& policy, PromptMessages& ctx, Rollout& current, int depth,
                     double top_p, ToolRuntime* scratch, std::size_t max_paths,
                     std::vector<Rollout>& out) {
  const bool finished = !current.lookahead.empty() &&
                        current.lookahead.back().kind == StepKind::FinalAnswer;
  if (current.depth() >= depth || finished) {
    if (out.size() >= max_paths) throw TreeTooLarge("more than " + std::to_string(max_paths) + " rollout paths");
    out.push_back(current);
    return;
  }
  std::vector<WeightedStep> children;
  try {
    children = policy.enumerate(ctx, top_p);
  } catch (const EmptyStep&) {
  }
  if (children.empty()) {
    if (out.size() >= max_paths) throw TreeTooLarge("more than " + std::to_string(max_paths) + " rollout paths");
    out.push_back(current);
    return;
  }
  for (auto& child : children) {
    const auto ctx_size = ctx.size();
    const auto la_size = current.lookahead.size();
    const double weight = current.weight;
    current.weight *= child.probability;
    current.g_seq.push_back(child.step.g);
    extend_context(ctx, child.step);
    if (child.step.is_tool_call()) {
      auto result = run_tool_for(child.step, scratch);
      current.lookahead.push_back(child.step);
      extend_context(ctx, result);
      current.lookahead.push_back(std::move(result));
    } else {
      current.lookahead.push_back(child.step);
    }
    enumerate_paths(policy, ctx, current, depth, top_p, scratch, max_paths, out);
    ctx.resize(ctx_size);
    current.lookahead.resize(la_size);
    current.g_seq.pop_back();
    current.weight = weight;
  }
}

}  // namespace

std::vector<Rollout> enumerate_rollouts(const StepPolicy& policy, const PromptMessages& context,
                                        const Step& candidate, int depth, double top_p,
                                        ToolRuntime* scratch, std::size_t max_paths) {
  if (depth < 1) throw std::invalid_argument("enumerate_rollouts: depth must be >= 1");
  Rollout root;
  root.candidate = candidate;
  PromptMessages ctx = context;
  extend_context(ctx, root.candidate);
  if (root.candidate.is_tool_call()) {
    auto result = run_tool_for(root.candidate, scratch);
    extend_context(ctx, result);
    root.lookahead.push_back(std::move(result));
  }
  std::vector<Rollout> out;
  if (root.candidate.kind == StepKind::FinalAnswer) {
    out.push_back(std::move(root));
    return out;
  }
  enumerate_paths(policy, ctx, root, depth, top_p, scratch, max_paths, out);
  return out;
}

std::vector<double> score_continuation(StepPolicy& policy, const PromptMessages& context,
                                       const std::vector<Step>& continuation) {
  std::vector<double> out;
  bool complete = true;
  for (const auto& s : continuation) {
    if (!s.is_model_generated()) continue;
    if (s.token_logprobs.empty() && s.output_tokens > 0) complete = false;
    out.push_back(s.g);
  }
  if (complete) return out;
  if (auto fresh = policy.rescore(context, continuation)) return *fresh;
  throw ScoringUnsupported("continuation lacks log-probabilities and the backend cannot re-score");
}

std::vector<std::size_t> nucleus(const std::vector<double>& weights, double top_p) {
  std::vector<std::size_t> order(weights.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return weights[a] > weights[b]; });
  const double total = std::accumulate(weights.begin(), weights.end(), 0.0);
  std::vector<std::size_t> kept;
  double cum = 0.0;
  for (auto i : order) {
    kept.push_back(i);
    cum += weights[i];
    if (cum >= top_p * total - 1e-12) break;
  }
  std::sort(kept.begin(), kept.end());
  return kept;
}

std::size_t step_boundary(std::string_view text, std::string_view delimiter) {
  const auto delim_at = delimiter.empty() ? std::string_view::npos : text.find(delimiter);
  const auto s = text.find("<search>");
  const auto a = text.find("<answer>");
  const auto c = text.find("```");
  const auto dir = std::min({s, a, c});
  if (dir != std::string_view::npos && (delim_at == std::string_view::npos || dir < delim_at)) {
    std::string_view close = dir == s ? "</search>" : dir == a ? "</answer>" : "```";
    const auto from = dir + (dir == c ? 3 : 0);
    const auto end = text.find(close, from);
    if (end == std::string_view::npos) return text.size();
    return end + close.size();
  }
  return delim_at == std::string_view::npos ? text.size() : delim_at;
}

// --- scripted policy -------------------------------------------------------

std::string ScriptedTree::fingerprint(const Path& path) {
  std::string out;
  for (std::size_t i = 0; i < path.size(); ++i) {
    if (i) out += "␞";
    out += path[i];
  }
  return out;
}

void ScriptedTree::add(const Path& path, std::vector<ScriptedContinuation> continuations) {
  if (path.empty()) throw std::invalid_argument("scripted path must start with the question");
  if (continuations.empty()) throw std::invalid_argument("scripted node without continuations");
  double sum = 0.0;
  for (const auto& c : continuations) {
    if (!(c.weight > 0.0)) throw std::invalid_argument("scripted weights must be positive");
    for (double lp : c.logprobs)
      if (!(lp <= 0.0)) throw std::invalid_argument("scripted log-probabilities must be <= 0");
    if (c.text.empty() || c.logprobs.empty())
      throw std::invalid_argument("scripted continuation needs text and log-probabilities");
    sum += c.weight;
  }
  if (std::abs(sum - 1.0) > 1e-9) throw std::invalid_argument("scripted weights must sum to 1");
  nodes_[fingerprint(path)] = {path, std::move(continuations)};
}

const std::vector<ScriptedContinuation>* ScriptedTree::find(const std::string& fp) const {
  auto it = nodes_.find(fp);
  return it == nodes_.end() ? nullptr : &it->second.second;
}

ScriptedTree ScriptedTree::load(const std::filesystem::path& file) {
  std::ifstream in(file);
  if (!in) throw Error("cannot open scripted policy file: " + file.string());
  ScriptedTree tree;
  try {
    const auto doc = nlohmann::json::parse(in);
    for (const auto& node : doc.at("nodes")) {
      std::vector<ScriptedContinuation> conts;
      for (const auto& c : node.at("continuations"))
        conts.push_back({c.at("text").get<std::string>(), c.at("logprobs").get<std::vector<double>>(),
                         c.at("weight").get<double>()});
      tree.add(node.at("path").get<Path>(), std::move(conts));
    }
  } catch (const nlohmann::json::exception& e) {
    throw Error("scripted policy file " + file.string() + ": " + e.what());
  }
  return tree;
}

std::string ScriptedTree::to_json() const {
  nlohmann::json nodes = nlohmann::json::array();
  for (const auto& [fp, node] : nodes_) {
    nlohmann::json conts = nlohmann::json::array();
    for (const auto& c : node.second)
      conts.push_back({{"text", c.text}, {"logprobs", c.logprobs}, {"weight", c.weight}});
    nodes.push_back({{"path", node.first}, {"continuations", std::move(conts)}});
  }
  return nlohmann::json{{"nodes", std::move(nodes)}}.dump(2);
}

std::int64_t count_words(const PromptMessages& context) {
  std::int64_t n = 0;
  for (const auto& m : context) {
    std::istringstream ss(m.content);
    std::string w;
    while (ss >> w) ++n;
  }
  return n;
}

Step ScriptedPolicy::make_step(const ScriptedContinuation& c, const PromptMessages& context) const {
  return Step::generated(classify_step_text(c.text), c.text, c.logprobs, count_words(context),
                         static_cast<std::int64_t>(c.logprobs.size()));
}

std::vector<WeightedStep> ScriptedPolicy::enumerate(const PromptMessages& context, double top_p) const {
  const auto* conts = tree_->find(context_fingerprint(context));
  if (!conts) return {};
  std::vector<double> weights;
  for (const auto& c : *conts) weights.push_back(c.weight);
  const auto kept = nucleus(weights, top_p);
  double total = 0.0;
  for (auto i : kept) total += weights[i];
  std::vector<WeightedStep> out;
  for (auto i : kept) out.push_back({make_step((*conts)[i], context), weights[i] / total});
  return out;
}

Step ScriptedPolicy::do_sample(const PromptMessages& context, const SampleParams& params, Rng& rng) {
  const auto* conts = tree_->find(context_fingerprint(context));
  if (!conts) throw EmptyStep("no scripted continuation for this context");
  std::vector<double> weights;
  for (const auto& c : *conts) weights.push_back(c.weight);
  std::size_t pick = 0;
  if (params.greedy) {
    pick = static_cast<std::size_t>(std::max_element(weights.begin(), weights.end()) - weights.begin());
  } else {
    const auto kept = nucleus(weights, params.top_p);
    std::vector<double> kept_w;
    for (auto i : kept) kept_w.push_back(weights[i]);
    pick = kept[rng.categorical(kept_w)];
  }
  return make_step((*conts)[pick], context);
}

}  // namespace maxs
