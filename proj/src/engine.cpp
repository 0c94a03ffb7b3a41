#include "maxs/engine.hpp"

#include <spdlog/spdlog.h>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <exception>
#include <numeric>
#include <thread>

#include "maxs/errors.hpp"

namespace maxs {

std::string_view to_string(DecodeMode mode) {
  return mode == DecodeMode::Lookahead ? "Lookahead" : "Autoregressive";
}

DecodeMode decode_mode_from_string(std::string_view s) {
  if (s == "Lookahead") return DecodeMode::Lookahead;
  if (s == "Autoregressive") return DecodeMode::Autoregressive;
  throw Error("unknown decode mode: " + std::string(s));
}

bool check_convergence(std::span<const double> rewards, double delta) {
  if (rewards.empty()) throw std::invalid_argument("check_convergence: no rewards");
  return population_variance(rewards) <= delta;
}

namespace {

std::size_t argmax_lowest(std::span<const double> xs) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < xs.size(); ++i)
    if (xs[i] > xs[best]) best = i;
  return best;
}

}  // namespace

std::size_t select_step(std::span<const ValueBreakdown> breakdowns, double tau, Rng& rng, bool greedy) {
  if (breakdowns.empty()) throw std::invalid_argument("select_step: no candidates");
  std::vector<double> combined;
  combined.reserve(breakdowns.size());
  for (const auto& b : breakdowns) combined.push_back(b.combined);
  if (greedy) return argmax_lowest(combined);
  return rng.categorical(normalize(combined, tau));
}

std::size_t select_step_policy_weighted(std::span<const ValueBreakdown> breakdowns,
                                        std::span<const double> candidate_g, double tau, Rng& rng,
                                        bool greedy) {
  if (breakdowns.empty() || breakdowns.size() != candidate_g.size())
    throw std::invalid_argument("select_step_policy_weighted: size mismatch");
  std::vector<double> logits(breakdowns.size());
  for (std::size_t i = 0; i < logits.size(); ++i) logits[i] = candidate_g[i] + breakdowns[i].combined / tau;
  if (greedy) return argmax_lowest(logits);
  return rng.categorical(normalize(logits, 1.0));
}

Rng task_rng(const SearchConfig& config, const std::string& task_id) {
  return Rng(config.seed).split(stable_hash(task_id));
}

double mean_step_logprob(const Trajectory& trajectory) {
  double sum = 0.0;
  int n = 0;
  for (const auto& s : trajectory.steps()) {
    if (!s.is_model_generated()) continue;
    sum += s.g;
    ++n;
  }
  return n == 0 ? -std::numeric_limits<double>::infinity() : sum / n;
}

namespace {

constexpr std::uint64_t kSelectStream = 0x5e1ec7ULL;

// Runs fn(i) for i in [0, n) on up to `width` threads; rethrows the first
// failure by index order.
template <typename Fn>
void parallel_for(std::size_t n, int width, Fn&& fn) {
  std::vector<std::exception_ptr> errors(n);
  auto guarded = [&](std::size_t i) {
    try {
      fn(i);
    } catch (...) {
      errors[i] = std::current_exception();
    }
  };
  const auto threads = std::min<std::size_t>(n, static_cast<std::size_t>(std::max(width, 1)));
  if (threads <= 1) {
    for (std::size_t i = 0; i < n; ++i) guarded(i);
  } else {
    std::atomic<std::size_t> next{0};
    std::vector<std::thread> pool;
    pool.reserve(threads);
    for (std::size_t t = 0; t < threads; ++t)
      pool.emplace_back([&] {
        for (std::size_t i = next++; i < n; i = next++) guarded(i);
      });
    for (auto& th : pool) th.join();
  }
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

TokenUsage usage_of(const Step& s) {
  return s.is_model_generated() ? TokenUsage{s.input_tokens, s.output_tokens, 1} : TokenUsage{};
}

TokenUsage sampled_usage(const Rollout& r) {
  TokenUsage u = usage_of(r.candidate);
  for (const auto& s : r.lookahead) u += usage_of(s);
  return u;
}

SampleParams sample_params(const SearchConfig& c, double top_p, bool greedy) {
  SampleParams p;
  p.temperature = c.temperature;
  p.top_p = top_p;
  p.greedy = greedy;
  return p;
}

// Appends the committed step; tool calls run for real on the committed runtime.
void commit_step(Trajectory& traj, Step step, ToolRuntime& tools) {
  step.index = 0;
  step.tool.reset();
  if (step.is_tool_call()) {
    auto inv = execute_step_tool(step, &tools);
    step.tool = inv;
    traj.append(std::move(step));
    traj.append(Step::tool_result(inv));
  } else {
    traj.append(std::move(step));
  }
}

struct Beam {
  Trajectory traj;
  double F_prev = 0.0;
  bool has_F_prev = false;
  bool converged = false;
  double score = 0.0;
  int id = 0;
};

struct Expansion {
  std::vector<RolloutGroup> groups;
  std::vector<ValueBreakdown> breakdowns;
  TokenUsage usage;
  bool converged = false;
};

class MaxsDecoder {
 public:
  MaxsDecoder(const Task& task, StepPolicy& policy, ToolRuntime& tools, const ValidatedConfig& config,
              const DecodeOptions& options)
      : task_(task), policy_(policy), tools_(tools), cfg_(config.get()), options_(options),
        root_(task_rng(cfg_, task.id)) {}

  DecodeResult run() {
    std::vector<Beam> beams;
    beams.push_back(Beam{Trajectory(task_), 0.0, false, false, 0.0, 0});
    int meta = 0;
    while (std::any_of(beams.begin(), beams.end(),
                       [](const Beam& b) { return b.traj.status() == TrajectoryStatus::InProgress; })) {
      ++meta;
      beams = iterate(std::move(beams), meta);
    }
    return finish(std::move(beams));
  }

 private:
  std::vector<Beam> iterate(std::vector<Beam> beams, int meta) {
    std::vector<Beam> next;
    struct Entry {
      std::size_t beam;
      std::size_t cand;
      double combined;
    };
    std::vector<Expansion> expansions(beams.size());
    std::vector<Entry> pool;
    std::size_t advanced = 0;

    for (std::size_t i = 0; i < beams.size(); ++i) {
      Beam& b = beams[i];
      if (b.traj.status() != TrajectoryStatus::InProgress) {
        next.push_back(std::move(b));
        continue;
      }
      if (b.traj.model_step_count() >= cfg_.max_steps) {
        b.traj.set_status(TrajectoryStatus::Truncated);
        next.push_back(std::move(b));
        continue;
      }
      Rng rng = root_.split(static_cast<std::uint64_t>(b.id)).split(static_cast<std::uint64_t>(meta));
      try {
        if (b.converged) {
          advance_autoregressive(b, rng, meta);
          ++advanced;
          next.push_back(std::move(b));
          continue;
        }
        expansions[i] = expand(b, rng);
      } catch (const EmptyStep& e) {
        spdlog::debug("task {}: {}", task_.id, e.what());
        b.traj.set_status(TrajectoryStatus::Truncated);
        next.push_back(std::move(b));
        continue;
      } catch (const PolicyFailure& e) {
        spdlog::warn("task {}: policy exhausted: {}", task_.id, e.what());
        b.traj.set_status(TrajectoryStatus::Failed);
        next.push_back(std::move(b));
        continue;
      }
      total_usage_ += expansions[i].usage;
      if (cfg_.beam_width == 1) {
        Rng sel = rng.split(kSelectStream);
        const auto chosen = choose(expansions[i], sel);
        next.push_back(commit(std::move(b), expansions[i], chosen, meta, true));
      } else {
        for (std::size_t c = 0; c < expansions[i].breakdowns.size(); ++c)
          pool.push_back({i, c, expansions[i].breakdowns[c].combined});
      }
    }

    if (!pool.empty()) {
      std::stable_sort(pool.begin(), pool.end(),
                       [](const Entry& a, const Entry& b) { return a.combined > b.combined; });
      const auto width = static_cast<std::size_t>(cfg_.beam_width);
      const std::size_t slots = std::max<std::size_t>(1, width > advanced ? width - advanced : 0);
      std::vector<bool> usage_reported(beams.size(), false);
      for (std::size_t k = 0; k < std::min(slots, pool.size()); ++k) {
        const auto& e = pool[k];
        Beam child = beams[e.beam];
        if (k > 0) child.id = next_beam_id_++;
        const bool first = !usage_reported[e.beam];
        usage_reported[e.beam] = true;
        next.push_back(commit(std::move(child), expansions[e.beam], e.cand, meta, first));
      }
    }
    return next;
  }

  std::size_t choose(const Expansion& ex, Rng& rng) const {
    if (cfg_.policy_weighted_selection) {
      std::vector<double> g;
      for (const auto& group : ex.groups) g.push_back(group.front().candidate.g);
      return select_step_policy_weighted(ex.breakdowns, g, cfg_.temperature, rng, cfg_.greedy);
    }
    return select_step(ex.breakdowns, cfg_.temperature, rng, cfg_.greedy);
  }

  Expansion expand(Beam& b, Rng& rng) {
    const auto ctx = render_context(b.traj, options_.system_prompt);
    Expansion ex;
    std::vector<Step> candidates;

    if (cfg_.exhaustive) {
      if (!policy_.capabilities().supports_enumeration)
        throw PolicyError("exhaustive mode needs a policy that can enumerate continuations");
      for (auto& ws : policy_.enumerate(ctx, cfg_.top_p)) candidates.push_back(std::move(ws.step));
      if (candidates.empty()) throw EmptyStep("no continuation for this context");
      ex.groups.resize(candidates.size());
      parallel_for(candidates.size(), cfg_.parallelism, [&](std::size_t c) {
        auto scratch = tools_.scratch();
        ex.groups[c] = enumerate_rollouts(policy_, ctx, candidates[c], cfg_.lookahead,
                                          cfg_.rollout_top_p(), scratch.get());
      });
    } else {
      const auto M = static_cast<std::size_t>(cfg_.rollouts);
      std::vector<std::optional<Rollout>> sampled(M);
      const auto cand_params = sample_params(cfg_, cfg_.top_p, false);
      const auto la_params = sample_params(cfg_, cfg_.rollout_top_p(), false);
      parallel_for(M, cfg_.parallelism, [&](std::size_t m) {
        Rng stream = rng.split(m + 1);
        Step cand;
        try {
          cand = policy_.sample(ctx, cand_params, stream);
        } catch (const EmptyStep&) {
          return;
        }
        auto scratch = tools_.scratch();
        sampled[m] = rollout(policy_, ctx, cand, cfg_.lookahead, la_params, stream, scratch.get());
      });
      for (auto& r : sampled) {
        if (!r) continue;
        ex.usage += sampled_usage(*r);
        ex.groups.push_back({std::move(*r)});
      }
      if (ex.groups.empty()) throw EmptyStep("every candidate came back empty");
    }

    if (!b.has_F_prev) {
      double sum = 0.0;
      for (const auto& g : ex.groups) sum += g.front().candidate.g;
      b.F_prev = sum / static_cast<double>(ex.groups.size());
      b.has_F_prev = true;
    }
    ex.breakdowns = evaluate_candidates(ex.groups, b.F_prev, cfg_);
    if (cfg_.use_convergence) {
      std::vector<double> combined;
      for (const auto& bd : ex.breakdowns) combined.push_back(bd.combined);
      ex.converged = check_convergence(combined, cfg_.convergence_threshold);
    }
    return ex;
  }

  Beam commit(Beam b, const Expansion& ex, std::size_t chosen, int meta, bool report_usage) {
    commit_step(b.traj, ex.groups[chosen].front().candidate, tools_);
    b.F_prev = ex.breakdowns[chosen].F;
    b.score = ex.breakdowns[chosen].combined;
    b.converged = ex.converged;
    if (ex.converged) spdlog::debug("task {}: converged at meta-step {}", task_.id, meta);
    MetaStepRecord rec;
    rec.task_id = task_.id;
    rec.step_index = meta;
    rec.beam = b.id;
    rec.candidates = ex.groups;
    rec.breakdowns = ex.breakdowns;
    rec.chosen = chosen;
    rec.converged = ex.converged;
    rec.mode = DecodeMode::Lookahead;
    if (report_usage) rec.usage = ex.usage;
    rec.trajectory = b.traj;
    emit(std::move(rec));
    return b;
  }

  void advance_autoregressive(Beam& b, Rng& rng, int meta) {
    const auto ctx = render_context(b.traj, options_.system_prompt);
    Rng stream = rng.split(1);
    Step step = policy_.sample(ctx, sample_params(cfg_, cfg_.top_p, cfg_.greedy), stream);
    const auto usage = usage_of(step);
    total_usage_ += usage;
    Rollout r;
    r.candidate = step;
    commit_step(b.traj, std::move(step), tools_);
    MetaStepRecord rec;
    rec.task_id = task_.id;
    rec.step_index = meta;
    rec.beam = b.id;
    rec.candidates = {{std::move(r)}};
    rec.chosen = 0;
    rec.converged = true;
    rec.mode = DecodeMode::Autoregressive;
    rec.usage = usage;
    rec.trajectory = b.traj;
    emit(std::move(rec));
  }

  void emit(MetaStepRecord rec) {
    if (options_.trace) options_.trace->meta_step(rec);
    records_.push_back(std::move(rec));
  }

  DecodeResult finish(std::vector<Beam> beams) {
    std::size_t best = 0;
    for (std::size_t i = 1; i < beams.size(); ++i) {
      const bool ai = beams[i].traj.status() == TrajectoryStatus::Answered;
      const bool ab = beams[best].traj.status() == TrajectoryStatus::Answered;
      if ((ai && !ab) || (ai == ab && beams[i].score > beams[best].score)) best = i;
    }
    Trajectory out = std::move(beams[best].traj);
    // The returned trajectory carries the cost of the whole search.
    out.set_usage(total_usage_);
    if (options_.trace) options_.trace->result("maxs", out, 1);
    return {std::move(out), std::move(records_)};
  }

  const Task& task_;
  StepPolicy& policy_;
  ToolRuntime& tools_;
  const SearchConfig& cfg_;
  const DecodeOptions& options_;
  Rng root_;
  int next_beam_id_ = 1;
  TokenUsage total_usage_;
  std::vector<MetaStepRecord> records_;
};

DecodeResult cot_with_rng(const Task& task, StepPolicy& policy, ToolRuntime& tools,
                          const SearchConfig& cfg, const Rng& root, TraceSink* trace,
                          const std::string& system_prompt) {
  DecodeResult result{Trajectory(task), {}};
  auto& traj = result.trajectory;
  int meta = 0;
  while (traj.status() == TrajectoryStatus::InProgress) {
    if (traj.model_step_count() >= cfg.max_steps) {
      traj.set_status(TrajectoryStatus::Truncated);
      break;
    }
    ++meta;
    const auto ctx = render_context(traj, system_prompt);
    Rng stream = root.split(0).split(static_cast<std::uint64_t>(meta)).split(1);
    Step step;
    try {
      step = policy.sample(ctx, sample_params(cfg, cfg.top_p, cfg.greedy), stream);
    } catch (const EmptyStep&) {
      traj.set_status(TrajectoryStatus::Truncated);
      break;
    } catch (const PolicyFailure& e) {
      spdlog::warn("task {}: policy exhausted: {}", task.id, e.what());
      traj.set_status(TrajectoryStatus::Failed);
      break;
    }
    const auto usage = usage_of(step);
    traj.add_usage(usage);
    Rollout r;
    r.candidate = step;
    commit_step(traj, std::move(step), tools);
    MetaStepRecord rec;
    rec.task_id = task.id;
    rec.step_index = meta;
    rec.candidates = {{std::move(r)}};
    rec.mode = DecodeMode::Autoregressive;
    rec.usage = usage;
    rec.trajectory = traj;
    if (trace) trace->meta_step(rec);
    result.records.push_back(std::move(rec));
  }
  return result;
}

}  // namespace

DecodeResult maxs_decode(const Task& task, StepPolicy& policy, ToolRuntime& tools,
                         const ValidatedConfig& config, const DecodeOptions& options) {
  if (task.question.empty()) throw std::invalid_argument("maxs_decode: empty task");
  return MaxsDecoder(task, policy, tools, config, options).run();
}

DecodeResult cot_decode(const Task& task, StepPolicy& policy, ToolRuntime& tools,
                        const ValidatedConfig& config, const DecodeOptions& options) {
  if (task.question.empty()) throw std::invalid_argument("cot_decode: empty task");
  auto result = cot_with_rng(task, policy, tools, config.get(), task_rng(config.get(), task.id),
                             options.trace, options.system_prompt);
  if (options.trace) options.trace->result("cot", result.trajectory, 1);
  return result;
}

DecodeResult best_of_n_decode(const Task& task, StepPolicy& policy, ToolRuntime& tools,
                              const ValidatedConfig& config, int n, const TrajectoryScorer& scorer,
                              const DecodeOptions& options) {
  if (n < 1) throw std::invalid_argument("best_of_n_decode: n must be >= 1");
  if (task.question.empty()) throw std::invalid_argument("best_of_n_decode: empty task");
  const Rng root = task_rng(config.get(), task.id);
  std::vector<DecodeResult> runs;
  TokenUsage total;
  for (int r = 0; r < n; ++r) {
    const Rng run_root = r == 0 ? root : root.split(0xb0b0000ULL + static_cast<std::uint64_t>(r));
    runs.push_back(cot_with_rng(task, policy, tools, config.get(), run_root, nullptr, options.system_prompt));
    total += runs.back().trajectory.usage();
  }
  std::size_t best = 0;
  double best_score = scorer(runs[0].trajectory);
  for (std::size_t r = 1; r < runs.size(); ++r) {
    const double s = scorer(runs[r].trajectory);
    if (s > best_score) {
      best = r;
      best_score = s;
    }
  }
  DecodeResult out = std::move(runs[best]);
  out.trajectory.set_usage(total);
  if (options.trace) {
    for (const auto& rec : out.records) options.trace->meta_step(rec);
    options.trace->result("bon", out.trajectory, n);
  }
  return out;
}

}  // namespace maxs
