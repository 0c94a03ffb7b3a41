#pragma once

// Independent reference computations: toy MDPs solved by backward
// induction and Monte Carlo, the fluctuation bounds on g sequences, and an
// exhaustive best-step search over scripted trees. Nothing here calls the
// value-estimation code.

#include <functional>
#include <map>
#include <string>
#include <vector>

#include "maxs/core.hpp"
#include "maxs/policy.hpp"
#include "maxs/rng.hpp"

namespace maxs::oracle {

/// Finite decision tree. An action path of length d+1 names the edge taken
/// at depth d; its reward is collected on taking that edge.
struct ToyMdp {
  using Path = std::vector<int>;

  std::vector<int> branching;  // actions available at each depth
  std::map<Path, double> reward;
  double discount = 1.0;

  int horizon() const noexcept { return static_cast<int>(branching.size()); }
  /// Throws std::invalid_argument when an edge has no reward or the shape is
  /// inconsistent.
  void validate() const;
  double reward_of(const Path& path) const;
};

struct DpResult {
  double value;
  int action;  // lowest index among maximizers
};

DpResult dp_value(const ToyMdp& mdp);

/// Optimal value of every node, filled bottom-up.
std::map<ToyMdp::Path, double> value_table(const ToyMdp& mdp);

/// Largest |V(node) - max_a [R(a) + gamma V(child)]| over internal nodes.
double bellman_residual(const ToyMdp& mdp, const std::map<ToyMdp::Path, double>& table);

/// Action probabilities at a node.
using BehaviorPolicy = std::function<std::vector<double>(const ToyMdp::Path& prefix)>;

BehaviorPolicy uniform_policy(const ToyMdp& mdp);

/// Mean discounted return of the first `n` rewards over `m` seeded rollouts
/// from the root.
double mc_value(const ToyMdp& mdp, const BehaviorPolicy& behavior, int m, int n, std::uint64_t seed);

/// Exact expectation of what mc_value estimates.
double expected_return(const ToyMdp& mdp, const BehaviorPolicy& behavior, int n);

struct BoundCheck {
  bool holds;
  double slack;  // bound minus observed; >= 0 iff the bound holds
  double epsilon;
};

/// max |g_n - mean| <= sqrt(N * eps) with eps the population variance.
BoundCheck check_deviation_bound(const std::vector<double>& g_seq);

struct LipschitzCheck {
  bool holds;
  int m, n;  // 0-based pair with the smallest slack
  double slack;
  double epsilon;
  double mean_slope;
};

/// For every m < n: |g_n - g_m| <= (n-m)|mean slope| + sqrt((n-m)(N-1) eps)
/// with eps the population variance of the slopes. Needs N >= 3.
LipschitzCheck check_lipschitz_bound(const std::vector<double>& g_seq);

/// Removes the mean slope and checks |g_n - g_m| <= sqrt((n-m)(N-1) eps).
LipschitzCheck check_centered_lipschitz_bound(const std::vector<double>& g_seq);

struct BruteForceResult {
  std::size_t best;
  std::vector<double> combined;
  std::vector<double> foresight;
  std::vector<double> step_variance;
  std::vector<double> slope_variance;
  std::size_t paths = 0;
};

/// Exhaustive expectation over every lookahead path of at most N model
/// steps below each nucleus candidate, scored as a first meta-step (the
/// previous foresight is the mean candidate g). Throws TreeTooLarge past
/// 10^6 paths and std::invalid_argument on tool directives.
BruteForceResult brute_force_best_step(const ScriptedPolicy& policy, const PromptMessages& context,
                                       const SearchConfig& config);

// --- generators ------------------------------------------------------------

/// Values in [lo, hi], length in [min_len, max_len].
std::vector<double> random_sequence(Rng& rng, int min_len, int max_len, double lo = -6.0, double hi = 0.0);

ToyMdp random_mdp(Rng& rng, int max_depth = 4, int max_branching = 3);

/// The two-step delayed-reward MDP: a pays 1 then {2, 0}, b pays 0 then {5, 0}.
ToyMdp delayed_reward_mdp(double discount);

/// Random scripted tree of answer-terminated chains. Returns the tree and
/// its question.
std::pair<ScriptedTree, std::string> random_scripted_tree(Rng& rng, int max_depth = 3, int max_children = 3);

/// Scripted version of the delayed-reward MDP. The first step "a" is the
/// more likely one; the answers after "b" are far more likely than those
/// after "a".
std::pair<ScriptedTree, std::string> delayed_reward_tree();

// --- suite -----------------------------------------------------------------

struct VerifyRow {
  std::string name;
  int cases = 0;
  int violations = 0;
  double worst_slack = 0.0;
  bool passed() const noexcept { return violations == 0; }
};

std::vector<VerifyRow> run_verification(std::uint64_t seed, int sweeps = 10000);

std::string format_verification(const std::vector<VerifyRow>& rows);

}  // namespace maxs::oracle
