#pragma once

// Composite step value: foresight, advantage, step-level and slope-level
// variance, candidate-axis softmax normalization and the weighted
// combination. Everything here is pure.

#include <algorithm>
#include <cmath>
#include <numeric>
#include <span>
#include <stdexcept>
#include <vector>

#include "maxs/core.hpp"

namespace maxs {

/// A candidate next step, its lookahead continuation, and the g value of
/// every model-generated lookahead step in order. `weight` is the rollout's
/// importance weight inside its candidate group (1 for sampled rollouts,
/// the path probability for enumerated ones).
struct Rollout {
  Step candidate;
  std::vector<Step> lookahead;
  std::vector<double> g_seq;
  double weight = 1.0;

  /// Number of model-generated lookahead steps.
  int depth() const noexcept { return static_cast<int>(g_seq.size()); }

  bool operator==(const Rollout&) const = default;
};

/// All rollouts that share one candidate step.
using RolloutGroup = std::vector<Rollout>;

struct ValueBreakdown {
  double F = 0.0;
  double F_prev = 0.0;
  double A = 0.0;
  double R_adv = 1.0;
  double V_step = 0.0;
  double R_step = 1.0;
  double V_slope = 0.0;
  double R_slope = 1.0;
  double norm_adv = 0.0;
  double norm_step = 0.0;
  double norm_slope = 0.0;
  double combined = 0.0;

  bool operator==(const ValueBreakdown&) const = default;
};

/// Population variance; 0 for fewer than two values.
inline double population_variance(std::span<const double> xs) noexcept {
  if (xs.size() < 2) return 0.0;
  const double n = static_cast<double>(xs.size());
  const double mean = std::accumulate(xs.begin(), xs.end(), 0.0) / n;
  double ss = 0.0;
  for (double x : xs) ss += (x - mean) * (x - mean);
  return ss / n;
}

inline double step_variance(std::span<const double> g_seq) noexcept {
  return population_variance(g_seq);
}

/// Population variance of first differences; 0 for fewer than two slopes.
inline double slope_variance(std::span<const double> g_seq) noexcept {
  if (g_seq.size() < 3) return 0.0;
  std::vector<double> slopes(g_seq.size() - 1);
  for (std::size_t n = 0; n + 1 < g_seq.size(); ++n) slopes[n] = g_seq[n + 1] - g_seq[n];
  return population_variance(slopes);
}

/// Per-rollout foresight: mean lookahead g, or the candidate's own g when
/// the rollout has no lookahead.
inline double rollout_foresight(const Rollout& r) noexcept {
  if (r.g_seq.empty()) return r.candidate.g;
  return std::accumulate(r.g_seq.begin(), r.g_seq.end(), 0.0) / static_cast<double>(r.g_seq.size());
}

namespace detail {

template <typename Fn>
double weighted_mean(std::span<const Rollout> group, Fn&& fn) {
  if (group.empty()) throw std::invalid_argument("empty rollout group");
  double num = 0.0, den = 0.0;
  for (const auto& r : group) {
    num += r.weight * fn(r);
    den += r.weight;
  }
  if (!(den > 0.0)) throw std::invalid_argument("rollout weights must sum to a positive value");
  return num / den;
}

}  // namespace detail

/// Mean over the group's rollouts of each rollout's mean lookahead g.
inline double foresight(std::span<const Rollout> group) {
  return detail::weighted_mean(group, [](const Rollout& r) { return rollout_foresight(r); });
}

struct Advantage {
  double A;
  double R_adv;
};

inline Advantage advantage(double F, double F_prev, double tau) {
  if (!(tau > 0.0)) throw std::invalid_argument("advantage: tau must be positive");
  const double A = F - F_prev;
  return {A, std::exp(A / tau)};
}

/// Temperature softmax, stabilized by subtracting the maximum.
inline std::vector<double> normalize(std::span<const double> scores, double tau) {
  if (scores.empty()) throw std::invalid_argument("normalize: no scores");
  if (!(tau > 0.0)) throw std::invalid_argument("normalize: tau must be positive");
  const double hi = *std::max_element(scores.begin(), scores.end());
  std::vector<double> out(scores.size());
  double sum = 0.0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    out[i] = std::exp((scores[i] - hi) / tau);
    sum += out[i];
  }
  for (double& x : out) x /= sum;
  return out;
}

inline double combined_reward(double norm_adv, double norm_step, double norm_slope, double alpha,
                              double beta) noexcept {
  return (1.0 - alpha - beta) * norm_adv + alpha * norm_step + beta * norm_slope;
}

/// Scores every candidate against its siblings. Variances are the weighted
/// mean of per-rollout variances; the three reward families are normalized
/// across candidates before being combined.
inline std::vector<ValueBreakdown> evaluate_candidates(std::span<const RolloutGroup> groups,
                                                       double F_prev, const SearchConfig& config) {
  if (groups.empty()) throw std::invalid_argument("evaluate_candidates: no candidates");
  const double tau = config.temperature;
  std::vector<ValueBreakdown> out(groups.size());
  std::vector<double> adv(groups.size()), step(groups.size()), slope(groups.size());
  for (std::size_t c = 0; c < groups.size(); ++c) {
    const std::span<const Rollout> group(groups[c]);
    auto& b = out[c];
    b.F = foresight(group);
    b.F_prev = F_prev;
    const auto a = advantage(b.F, F_prev, tau);
    b.A = a.A;
    b.R_adv = a.R_adv;
    b.V_step = detail::weighted_mean(group, [](const Rollout& r) { return step_variance(r.g_seq); });
    b.V_slope = detail::weighted_mean(group, [](const Rollout& r) { return slope_variance(r.g_seq); });
    b.R_step = std::exp(-b.V_step / tau);
    b.R_slope = std::exp(-b.V_slope / tau);
    adv[c] = b.R_adv;
    step[c] = b.R_step;
    slope[c] = b.R_slope;
  }
  const auto n_adv = normalize(adv, tau);
  const auto n_step = normalize(step, tau);
  const auto n_slope = normalize(slope, tau);
  for (std::size_t c = 0; c < groups.size(); ++c) {
    auto& b = out[c];
    b.norm_adv = n_adv[c];
    b.norm_step = n_step[c];
    b.norm_slope = n_slope[c];
    b.combined = combined_reward(b.norm_adv, b.norm_step, b.norm_slope, config.alpha, config.beta);
  }
  return out;
}

}  // namespace maxs
