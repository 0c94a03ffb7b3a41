#include "maxs/oracle.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <numeric>
#include <stdexcept>

#include "maxs/engine.hpp"
#include "maxs/errors.hpp"
#include "maxs/tools.hpp"

namespace maxs::oracle {

namespace {

constexpr double kBoundTolerance = 1e-12;

// Two-pass population variance, kept separate from the engine's copy.
double two_pass_variance(const std::vector<double>& xs) {
  if (xs.size() < 2) return 0.0;
  long double mean = 0.0L;
  for (double x : xs) mean += x;
  mean /= static_cast<long double>(xs.size());
  long double ss = 0.0L;
  for (double x : xs) ss += (x - mean) * (x - mean);
  return static_cast<double>(ss / static_cast<long double>(xs.size()));
}

std::vector<double> differences(const std::vector<double>& xs) {
  std::vector<double> d;
  for (std::size_t i = 1; i < xs.size(); ++i) d.push_back(xs[i] - xs[i - 1]);
  return d;
}

double tolerance_for(double scale) { return kBoundTolerance * (1.0 + std::abs(scale)); }

std::vector<double> softmax(const std::vector<double>& xs, double tau) {
  double hi = -std::numeric_limits<double>::infinity();
  for (double x : xs) hi = std::max(hi, x);
  std::vector<double> e;
  double z = 0.0;
  for (double x : xs) {
    e.push_back(std::exp((x - hi) / tau));
    z += e.back();
  }
  for (double& v : e) v /= z;
  return e;
}

// Indices of the nucleus in original order, with probabilities renormalized.
std::vector<std::pair<std::size_t, double>> top_p_children(const std::vector<ScriptedContinuation>& conts,
                                                           double top_p) {
  std::vector<std::size_t> order(conts.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return conts[a].weight > conts[b].weight; });
  double total = 0.0;
  for (const auto& c : conts) total += c.weight;
  std::vector<std::size_t> kept;
  double cum = 0.0;
  for (auto i : order) {
    kept.push_back(i);
    cum += conts[i].weight;
    if (cum >= top_p * total) break;
  }
  std::sort(kept.begin(), kept.end());
  double mass = 0.0;
  for (auto i : kept) mass += conts[i].weight;
  std::vector<std::pair<std::size_t, double>> out;
  for (auto i : kept) out.emplace_back(i, conts[i].weight / mass);
  return out;
}

double mean_of(const std::vector<double>& xs) {
  long double s = 0.0L;
  for (double x : xs) s += x;
  return xs.empty() ? 0.0 : static_cast<double>(s / static_cast<long double>(xs.size()));
}

bool is_answer(const std::string& text) { return classify_step_text(text) == StepKind::FinalAnswer; }

void reject_tools(const std::string& text) {
  const auto kind = classify_step_text(text);
  if (kind == StepKind::SearchCall || kind == StepKind::CodeCall)
    throw std::invalid_argument("brute-force oracle does not execute tools: " + text);
}

struct PathStats {
  double weight = 0.0;
  double f = 0.0, v_step = 0.0, v_slope = 0.0;
};

void walk(const ScriptedTree& tree, const std::string& fp, std::vector<double>& g_seq, double weight,
          int depth, double top_p, std::vector<PathStats>& acc, double candidate_g, std::size_t& paths) {
  const auto* conts = depth > 0 ? tree.find(fp) : nullptr;
  const bool stop = depth == 0 || !conts;
  if (stop) {
    if (++paths > kMaxEnumeratedPaths) throw TreeTooLarge("oracle enumeration exceeded 10^6 paths");
    PathStats s;
    s.weight = weight;
    s.f = g_seq.empty() ? candidate_g : mean_of(g_seq);
    s.v_step = two_pass_variance(g_seq);
    s.v_slope = g_seq.size() < 3 ? 0.0 : two_pass_variance(differences(g_seq));
    acc.push_back(s);
    return;
  }
  for (const auto& [i, p] : top_p_children(*conts, top_p)) {
    const auto& c = (*conts)[i];
    reject_tools(c.text);
    g_seq.push_back(mean_of(c.logprobs));
    if (is_answer(c.text)) {
      if (++paths > kMaxEnumeratedPaths) throw TreeTooLarge("oracle enumeration exceeded 10^6 paths");
      acc.push_back({weight * p, mean_of(g_seq), two_pass_variance(g_seq),
                     g_seq.size() < 3 ? 0.0 : two_pass_variance(differences(g_seq))});
    } else {
      walk(tree, fp + "␞" + c.text, g_seq, weight * p, depth - 1, top_p, acc, candidate_g, paths);
    }
    g_seq.pop_back();
  }
}

}  // namespace

void ToyMdp::validate() const {
  if (branching.empty()) throw std::invalid_argument("toy MDP needs a horizon of at least 1");
  if (!(discount >= 0.0 && discount <= 1.0)) throw std::invalid_argument("discount must lie in [0, 1]");
  for (int b : branching)
    if (b < 1) throw std::invalid_argument("every depth needs at least one action");
  std::size_t edges = 0, level = 1;
  for (int b : branching) {
    level *= static_cast<std::size_t>(b);
    edges += level;
  }
  if (reward.size() != edges) throw std::invalid_argument("reward map does not cover every edge exactly once");
  for (const auto& [path, _] : reward) {
    if (path.empty() || path.size() > branching.size()) throw std::invalid_argument("reward path out of range");
    for (std::size_t d = 0; d < path.size(); ++d)
      if (path[d] < 0 || path[d] >= branching[d]) throw std::invalid_argument("reward path names a missing action");
  }
}

double ToyMdp::reward_of(const Path& path) const {
  const auto it = reward.find(path);
  if (it == reward.end()) throw std::invalid_argument("no reward for path");
  return it->second;
}

namespace {

DpResult solve(const ToyMdp& mdp, ToyMdp::Path& prefix) {
  const auto d = prefix.size();
  if (d == mdp.branching.size()) return {0.0, -1};
  DpResult best{-std::numeric_limits<double>::infinity(), 0};
  for (int a = 0; a < mdp.branching[d]; ++a) {
    prefix.push_back(a);
    const double q = mdp.reward_of(prefix) + mdp.discount * solve(mdp, prefix).value;
    prefix.pop_back();
    if (q > best.value) best = {q, a};
  }
  return best;
}

}  // namespace

DpResult dp_value(const ToyMdp& mdp) {
  mdp.validate();
  ToyMdp::Path prefix;
  return solve(mdp, prefix);
}

std::map<ToyMdp::Path, double> value_table(const ToyMdp& mdp) {
  mdp.validate();
  // Nodes by depth, built breadth-first.
  std::vector<std::vector<ToyMdp::Path>> levels{{ToyMdp::Path{}}};
  for (int d = 0; d < mdp.horizon(); ++d) {
    std::vector<ToyMdp::Path> next;
    for (const auto& p : levels.back())
      for (int a = 0; a < mdp.branching[static_cast<std::size_t>(d)]; ++a) {
        auto c = p;
        c.push_back(a);
        next.push_back(std::move(c));
      }
    levels.push_back(std::move(next));
  }
  std::map<ToyMdp::Path, double> v;
  for (const auto& leaf : levels.back()) v[leaf] = 0.0;
  for (int d = mdp.horizon() - 1; d >= 0; --d) {
    for (const auto& node : levels[static_cast<std::size_t>(d)]) {
      double best = -std::numeric_limits<double>::infinity();
      for (int a = 0; a < mdp.branching[static_cast<std::size_t>(d)]; ++a) {
        auto c = node;
        c.push_back(a);
        best = std::max(best, mdp.reward_of(c) + mdp.discount * v.at(c));
      }
      v[node] = best;
    }
  }
  return v;
}

double bellman_residual(const ToyMdp& mdp, const std::map<ToyMdp::Path, double>& table) {
  double worst = 0.0;
  for (const auto& [node, value] : table) {
    if (node.size() == mdp.branching.size()) continue;
    double best = -std::numeric_limits<double>::infinity();
    for (int a = 0; a < mdp.branching[node.size()]; ++a) {
      auto c = node;
      c.push_back(a);
      best = std::max(best, mdp.reward_of(c) + mdp.discount * table.at(c));
    }
    worst = std::max(worst, std::abs(value - best));
  }
  return worst;
}

BehaviorPolicy uniform_policy(const ToyMdp& mdp) {
  const auto branching = mdp.branching;
  return [branching](const ToyMdp::Path& prefix) {
    const int k = branching.at(prefix.size());
    return std::vector<double>(static_cast<std::size_t>(k), 1.0 / k);
  };
}

double mc_value(const ToyMdp& mdp, const BehaviorPolicy& behavior, int m, int n, std::uint64_t seed) {
  mdp.validate();
  if (m < 1) throw std::invalid_argument("mc_value: M must be >= 1");
  if (n < 1 || n > mdp.horizon()) throw std::invalid_argument("mc_value: N must lie in [1, horizon]");
  const Rng root(seed);
  double sum = 0.0;
  for (int r = 0; r < m; ++r) {
    Rng rng = root.split(static_cast<std::uint64_t>(r));
    ToyMdp::Path path;
    double ret = 0.0, disc = 1.0;
    for (int k = 0; k < n; ++k) {
      path.push_back(static_cast<int>(rng.categorical(behavior(path))));
      ret += disc * mdp.reward_of(path);
      disc *= mdp.discount;
    }
    sum += ret;
  }
  return sum / m;
}

namespace {

double expected_from(const ToyMdp& mdp, const BehaviorPolicy& behavior, ToyMdp::Path& path, int left) {
  if (left == 0) return 0.0;
  const auto probs = behavior(path);
  double total = 0.0, e = 0.0;
  for (double p : probs) total += p;
  for (std::size_t a = 0; a < probs.size(); ++a) {
    if (probs[a] <= 0.0) continue;
    path.push_back(static_cast<int>(a));
    e += probs[a] / total * (mdp.reward_of(path) + mdp.discount * expected_from(mdp, behavior, path, left - 1));
    path.pop_back();
  }
  return e;
}

}  // namespace

double expected_return(const ToyMdp& mdp, const BehaviorPolicy& behavior, int n) {
  mdp.validate();
  ToyMdp::Path path;
  return expected_from(mdp, behavior, path, n);
}

BoundCheck check_deviation_bound(const std::vector<double>& g) {
  if (g.empty()) throw std::invalid_argument("check_deviation_bound: empty sequence");
  const double eps = two_pass_variance(g);
  const double mean = mean_of(g);
  double worst = 0.0;
  for (double x : g) worst = std::max(worst, std::abs(x - mean));
  const double bound = std::sqrt(static_cast<double>(g.size()) * eps);
  const double slack = bound - worst;
  return {slack >= -tolerance_for(bound), slack, eps};
}

namespace {

LipschitzCheck lipschitz(const std::vector<double>& g, bool centered) {
  if (g.size() < 3) throw std::invalid_argument("Lipschitz check needs at least 3 values");
  const auto slopes = differences(g);
  const double eps = two_pass_variance(slopes);
  const double mean_slope = mean_of(slopes);
  std::vector<double> seq = g;
  if (centered)
    for (std::size_t i = 0; i < seq.size(); ++i) seq[i] -= static_cast<double>(i) * mean_slope;
  const double drift = centered ? 0.0 : std::abs(mean_slope);
  const double N = static_cast<double>(g.size());
  LipschitzCheck out{true, 0, 1, std::numeric_limits<double>::infinity(), eps, mean_slope};
  for (std::size_t m = 0; m < seq.size(); ++m)
    for (std::size_t n = m + 1; n < seq.size(); ++n) {
      const double gap = static_cast<double>(n - m);
      const double bound = gap * drift + std::sqrt(gap * (N - 1.0) * eps);
      const double slack = bound - std::abs(seq[n] - seq[m]);
      if (slack < out.slack) {
        out.slack = slack;
        out.m = static_cast<int>(m);
        out.n = static_cast<int>(n);
      }
      if (slack < -tolerance_for(bound)) out.holds = false;
    }
  return out;
}

}  // namespace

LipschitzCheck check_lipschitz_bound(const std::vector<double>& g) { return lipschitz(g, false); }

LipschitzCheck check_centered_lipschitz_bound(const std::vector<double>& g) { return lipschitz(g, true); }

BruteForceResult brute_force_best_step(const ScriptedPolicy& policy, const PromptMessages& context,
                                       const SearchConfig& config) {
  const auto& tree = policy.tree();
  const auto root_fp = context_fingerprint(context);
  const auto* roots = tree.find(root_fp);
  if (!roots) throw std::invalid_argument("brute_force_best_step: context not in the scripted tree");

  BruteForceResult out{};
  std::vector<double> cand_g;
  std::vector<std::vector<PathStats>> per_candidate;
  for (const auto& [i, p] : top_p_children(*roots, config.top_p)) {
    const auto& c = (*roots)[i];
    reject_tools(c.text);
    const double g = mean_of(c.logprobs);
    cand_g.push_back(g);
    std::vector<PathStats> acc;
    std::vector<double> g_seq;
    if (is_answer(c.text)) {
      acc.push_back({1.0, g, 0.0, 0.0});
      ++out.paths;
    } else {
      walk(tree, root_fp + "␞" + c.text, g_seq, 1.0, config.lookahead, config.rollout_top_p(), acc, g,
           out.paths);
    }
    per_candidate.push_back(std::move(acc));
  }

  const double f_prev = mean_of(cand_g);
  const double tau = config.temperature;
  std::vector<double> r_adv, r_step, r_slope;
  for (const auto& acc : per_candidate) {
    double w = 0.0, f = 0.0, vs = 0.0, vl = 0.0;
    for (const auto& s : acc) {
      w += s.weight;
      f += s.weight * s.f;
      vs += s.weight * s.v_step;
      vl += s.weight * s.v_slope;
    }
    f /= w;
    vs /= w;
    vl /= w;
    out.foresight.push_back(f);
    out.step_variance.push_back(vs);
    out.slope_variance.push_back(vl);
    r_adv.push_back(std::exp((f - f_prev) / tau));
    r_step.push_back(std::exp(-vs / tau));
    r_slope.push_back(std::exp(-vl / tau));
  }
  const auto na = softmax(r_adv, tau), ns = softmax(r_step, tau), nl = softmax(r_slope, tau);
  out.best = 0;
  for (std::size_t c = 0; c < na.size(); ++c) {
    out.combined.push_back((1.0 - config.alpha - config.beta) * na[c] + config.alpha * ns[c] +
                           config.beta * nl[c]);
    if (out.combined[c] > out.combined[out.best]) out.best = c;
  }
  return out;
}

std::vector<double> random_sequence(Rng& rng, int min_len, int max_len, double lo, double hi) {
  const int len = min_len + static_cast<int>(rng.next() % static_cast<std::uint64_t>(max_len - min_len + 1));
  std::vector<double> out(static_cast<std::size_t>(len));
  // Mix smooth, constant and jumpy sequences.
  const auto shape = rng.next() % 4;
  for (int i = 0; i < len; ++i) {
    const double u = lo + (hi - lo) * rng.uniform();
    if (shape == 0) out[static_cast<std::size_t>(i)] = u;
    else if (shape == 1) out[static_cast<std::size_t>(i)] = lo + (hi - lo) * 0.5;
    else if (shape == 2) out[static_cast<std::size_t>(i)] = hi - 0.3 * i + 0.05 * u;
    else out[static_cast<std::size_t>(i)] = (i % 2 ? lo : hi) + 0.1 * u;
  }
  return out;
}

ToyMdp random_mdp(Rng& rng, int max_depth, int max_branching) {
  ToyMdp mdp;
  const int depth = 1 + static_cast<int>(rng.next() % static_cast<std::uint64_t>(max_depth));
  for (int d = 0; d < depth; ++d)
    mdp.branching.push_back(1 + static_cast<int>(rng.next() % static_cast<std::uint64_t>(max_branching)));
  mdp.discount = 0.5 + 0.5 * rng.uniform();
  std::vector<ToyMdp::Path> frontier{{}};
  for (int d = 0; d < depth; ++d) {
    std::vector<ToyMdp::Path> next;
    for (const auto& p : frontier)
      for (int a = 0; a < mdp.branching[static_cast<std::size_t>(d)]; ++a) {
        auto c = p;
        c.push_back(a);
        mdp.reward[c] = std::round(20.0 * rng.uniform() - 5.0) / 2.0;  // many ties on purpose
        next.push_back(std::move(c));
      }
    frontier = std::move(next);
  }
  return mdp;
}

ToyMdp delayed_reward_mdp(double discount) {
  ToyMdp mdp;
  mdp.branching = {2, 2};
  mdp.discount = discount;
  mdp.reward = {{{0}, 1.0}, {{1}, 0.0}, {{0, 0}, 2.0}, {{0, 1}, 0.0}, {{1, 0}, 5.0}, {{1, 1}, 0.0}};
  return mdp;
}

namespace {

std::vector<ScriptedContinuation> random_children(Rng& rng, int count, int& counter, bool answers) {
  std::vector<ScriptedContinuation> out;
  double sum = 0.0;
  for (int i = 0; i < count; ++i) {
    ScriptedContinuation c;
    const int id = counter++;
    const bool answer = answers || rng.uniform() < 0.15;
    c.text = answer ? "<answer>" + std::to_string(id) + "</answer>" : "step " + std::to_string(id);
    const int tokens = 1 + static_cast<int>(rng.next() % 4);
    for (int t = 0; t < tokens; ++t) c.logprobs.push_back(-3.0 * rng.uniform());
    c.weight = 0.2 + rng.uniform();
    sum += c.weight;
    out.push_back(std::move(c));
  }
  double assigned = 0.0;
  for (std::size_t i = 0; i + 1 < out.size(); ++i) {
    out[i].weight /= sum;
    assigned += out[i].weight;
  }
  out.back().weight = 1.0 - assigned;
  return out;
}

void grow(ScriptedTree& tree, Rng& rng, ScriptedTree::Path& path, int levels_left, int max_children,
          int& counter) {
  const int count = 1 + static_cast<int>(rng.next() % static_cast<std::uint64_t>(max_children));
  auto children = random_children(rng, count, counter, levels_left == 1);
  tree.add(path, children);
  for (const auto& c : children) {
    if (classify_step_text(c.text) == StepKind::FinalAnswer) continue;
    path.push_back(c.text);
    grow(tree, rng, path, levels_left - 1, max_children, counter);
    path.pop_back();
  }
}

}  // namespace

std::pair<ScriptedTree, std::string> random_scripted_tree(Rng& rng, int max_depth, int max_children) {
  ScriptedTree tree;
  const std::string question = "question " + std::to_string(rng.next() % 1000000);
  ScriptedTree::Path path{question};
  int counter = 0;
  // At least two candidates at the root so the choice is not trivial.
  const int depth = 2 + static_cast<int>(rng.next() % static_cast<std::uint64_t>(std::max(1, max_depth - 1)));
  auto roots = random_children(rng, 2 + static_cast<int>(rng.next() % static_cast<std::uint64_t>(max_children)),
                               counter, false);
  tree.add(path, roots);
  for (const auto& c : roots) {
    if (classify_step_text(c.text) == StepKind::FinalAnswer) continue;
    path.push_back(c.text);
    grow(tree, rng, path, depth - 1, max_children, counter);
    path.pop_back();
  }
  return {std::move(tree), question};
}

std::pair<ScriptedTree, std::string> delayed_reward_tree() {
  const std::string q = "Pick a route and report its payoff.";
  ScriptedTree tree;
  tree.add({q}, {{"Take route a, it pays off right away.", {-0.4, -0.6}, 0.6},
                 {"Take route b and wait for the payoff.", {-1.0, -1.4}, 0.4}});
  tree.add({q, "Take route a, it pays off right away."},
           {{"<answer>2</answer>", {-2.5, -3.5}, 0.9}, {"<answer>0</answer>", {-5.0}, 0.1}});
  tree.add({q, "Take route b and wait for the payoff."},
           {{"<answer>5</answer>", {-0.05, -0.15}, 0.9}, {"<answer>0</answer>", {-5.0}, 0.1}});
  return {std::move(tree), q};
}

std::vector<VerifyRow> run_verification(std::uint64_t seed, int sweeps) {
  std::vector<VerifyRow> rows;
  const Rng root(seed);

  {
    VerifyRow row{"deviation bound (random sequences)"};
    row.worst_slack = std::numeric_limits<double>::infinity();
    Rng rng = root.split(1);
    for (int i = 0; i < sweeps; ++i) {
      const auto r = check_deviation_bound(random_sequence(rng, 2, 16));
      ++row.cases;
      row.violations += !r.holds;
      row.worst_slack = std::min(row.worst_slack, r.slack);
    }
    rows.push_back(row);
  }
  {
    VerifyRow full{"slope bound, full form"}, centered{"slope bound, centered form"};
    full.worst_slack = centered.worst_slack = std::numeric_limits<double>::infinity();
    Rng rng = root.split(2);
    for (int i = 0; i < sweeps; ++i) {
      const auto g = random_sequence(rng, 3, 16);
      const auto a = check_lipschitz_bound(g);
      const auto b = check_centered_lipschitz_bound(g);
      ++full.cases;
      ++centered.cases;
      full.violations += !a.holds;
      centered.violations += !b.holds;
      full.worst_slack = std::min(full.worst_slack, a.slack);
      centered.worst_slack = std::min(centered.worst_slack, b.slack);
    }
    rows.push_back(full);
    rows.push_back(centered);
  }
  {
    VerifyRow row{"Bellman identity (100 random MDPs)"};
    Rng rng = root.split(3);
    for (int i = 0; i < 100; ++i) {
      const auto mdp = random_mdp(rng);
      const auto table = value_table(mdp);
      const double residual = bellman_residual(mdp, table);
      const double gap = std::abs(table.at({}) - dp_value(mdp).value);
      ++row.cases;
      row.violations += !(residual <= 1e-12 && gap <= 1e-12);
      row.worst_slack = std::max(row.worst_slack, std::max(residual, gap));
    }
    rows.push_back(row);
  }
  {
    VerifyRow row{"delayed-reward MDP optimum"};
    const auto far = dp_value(delayed_reward_mdp(0.9));
    const auto myopic = dp_value(delayed_reward_mdp(0.0));
    row.cases = 2;
    row.violations = (std::abs(far.value - 4.5) > 1e-12 || far.action != 1) +
                     (std::abs(myopic.value - 1.0) > 1e-12 || myopic.action != 0);
    rows.push_back(row);
  }
  {
    VerifyRow row{"Monte Carlo return (uniform policy)"};
    const auto mdp = delayed_reward_mdp(0.9);
    const auto uniform = uniform_policy(mdp);
    const double exact = expected_return(mdp, uniform, 2);
    const double est = mc_value(mdp, uniform, 100000, 2, seed);
    row.cases = 1;
    row.violations = std::abs(est - exact) > 0.02;
    row.worst_slack = 0.02 - std::abs(est - exact);
    rows.push_back(row);
  }
  {
    VerifyRow row{"engine vs exhaustive best step (50 trees)"};
    Rng rng = root.split(4);
    SearchConfig cfg;
    cfg.exhaustive = true;
    cfg.greedy = true;
    cfg.max_steps = 1;
    const auto vc = validate_config(cfg);
    for (int i = 0; i < 50; ++i) {
      auto [tree, question] = random_scripted_tree(rng);
      ScriptedPolicy policy(std::make_shared<const ScriptedTree>(std::move(tree)));
      Task task{"tree-" + std::to_string(i), question, "", Task::GradeMode::Exact, 0.0, {}};
      ScriptedToolRuntime tools;
      const auto ctx = render_context(Trajectory(task), std::string(kDefaultSystemPrompt));
      const auto expected = brute_force_best_step(policy, ctx, cfg);
      const auto result = maxs_decode(task, policy, tools, vc);
      ++row.cases;
      row.violations += result.records.empty() || result.records.front().chosen != expected.best;
    }
    rows.push_back(row);
  }
  return rows;
}

std::string format_verification(const std::vector<VerifyRow>& rows) {
  std::string out;
  char line[256];
  std::snprintf(line, sizeof line, "%-44s %7s %10s %14s  %s\n", "check", "cases", "violations", "worst slack",
                "result");
  out += line;
  for (const auto& r : rows) {
    std::snprintf(line, sizeof line, "%-44s %7d %10d %14.6g  %s\n", r.name.c_str(), r.cases, r.violations,
                  r.worst_slack, r.passed() ? "PASS" : "FAIL");
    out += line;
  }
  return out;
}

}  // namespace maxs::oracle
