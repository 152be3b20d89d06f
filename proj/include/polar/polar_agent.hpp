#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "polar/dataset.hpp"
#include "polar/errors.hpp"
#include "polar/metrics.hpp"
#include "polar/nn.hpp"
#include "polar/rng.hpp"

namespace polar {

inline double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

// log(sigmoid(x)) without overflow or cancellation for large |x|.
inline double log_sigmoid(double x) {
  return x >= 0.0 ? -std::log1p(std::exp(-x)) : x - std::log1p(std::exp(x));
}

struct polar_config {
  std::size_t batch_size = 50;  // K masks sampled per step
  int steps = 10;               // T policy updates per round
  double lr = 0.01;             // eta
  double lambda = 10.0;         // weight of the sum of log selection probabilities
  double tau = 0.5;             // final selection threshold on sigmoid(logit)
  double init_logit = 0.0;
  std::size_t eval_subsample = 256;  // 0 = whole backdoor eval set
  bool cache_rewards = false;        // memoise candidate BSR by mask within a round

  void validate() const {
    if (batch_size == 0) throw config_error("attack.polar.K must be positive");
    if (steps < 0) throw config_error("attack.polar.T must be nonnegative");
    if (!(lr >= 0.0) || !std::isfinite(lr)) throw config_error("attack.polar.lr must be a nonnegative finite number");
    if (!(lambda >= 0.0) || !std::isfinite(lambda)) throw config_error("attack.polar.lambda must be nonnegative");
    if (!(tau > 0.0 && tau < 1.0)) throw config_error("attack.polar.tau must lie in (0,1)");
    if (!std::isfinite(init_logit)) throw config_error("attack.polar.init_logit must be finite");
  }
};

struct policy_state {
  std::vector<double> logits;
  int round = 0;

  std::size_t num_layers() const { return logits.size(); }

  std::vector<double> probabilities() const {
    std::vector<double> p(logits.size());
    for (std::size_t l = 0; l < p.size(); ++l) p[l] = sigmoid(logits[l]);
    return p;
  }

  friend bool operator==(const policy_state&, const policy_state&) = default;
};

struct reward_batch {
  std::vector<selection_mask> masks;
  std::vector<double> rewards;
  double baseline_bsr = 0.0;

  std::size_t size() const { return masks.size(); }
};

inline policy_state init_policy(std::size_t num_layers, const polar_config& cfg) {
  if (num_layers == 0) throw config_error("init_policy: at least one layer required");
  return {std::vector<double>(num_layers, cfg.init_logit), 0};
}

// K masks; bit l of every mask is an independent Bernoulli(sigmoid(logit_l)) draw.
inline std::vector<selection_mask> sample_actions(const policy_state& policy, std::size_t k, std::uint64_t seed) {
  if (k == 0) throw config_error("sample_actions: K must be positive");
  const auto p = policy.probabilities();
  rng gen(derive_seed(seed, {0x5a3b}));
  std::vector<selection_mask> out;
  out.reserve(k);
  for (std::size_t s = 0; s < k; ++s) {
    selection_mask m(p.size());
    for (std::size_t l = 0; l < p.size(); ++l) m.set(l, gen.uniform() < p[l]);
    out.push_back(std::move(m));
  }
  return out;
}

// log P(mask) under the factorised Bernoulli policy.
inline double selection_log_prob(const policy_state& policy, const selection_mask& mask) {
  if (mask.size() != policy.num_layers()) throw shape_error("selection_log_prob: mask length does not match policy");
  double s = 0.0;
  for (std::size_t l = 0; l < mask.size(); ++l) {
    s += mask[l] ? log_sigmoid(policy.logits[l]) : log_sigmoid(-policy.logits[l]);
  }
  return s;
}

namespace detail {
inline void check_batch(const policy_state& policy, const reward_batch& batch) {
  if (batch.masks.size() != batch.rewards.size()) throw shape_error("reward batch: masks and rewards differ in count");
  for (const auto& m : batch.masks) {
    if (m.size() != policy.num_layers()) throw shape_error("reward batch: mask length does not match policy");
  }
}
}  // namespace detail

// Reward-weighted negative log-likelihood of the sampled masks plus
// lambda * sum_l log sigmoid(logit_l).
inline double policy_loss(const policy_state& policy, const reward_batch& batch, double lambda) {
  detail::check_batch(policy, batch);
  double loss = 0.0;
  for (std::size_t k = 0; k < batch.size(); ++k) loss -= batch.rewards[k] * selection_log_prob(policy, batch.masks[k]);
  for (double t : policy.logits) loss += lambda * log_sigmoid(t);
  return loss;
}

// dL/dlogit_l = -sum_k r_k (S_k[l] - p_l) + lambda (1 - p_l)
inline std::vector<double> policy_gradient(const policy_state& policy, const reward_batch& batch, double lambda) {
  detail::check_batch(policy, batch);
  const auto p = policy.probabilities();
  std::vector<double> g(p.size(), 0.0);
  for (std::size_t k = 0; k < batch.size(); ++k) {
    const double r = batch.rewards[k];
    const auto& m = batch.masks[k];
    for (std::size_t l = 0; l < g.size(); ++l) g[l] -= r * ((m[l] ? 1.0 : 0.0) - p[l]);
  }
  for (std::size_t l = 0; l < g.size(); ++l) g[l] += lambda * (1.0 - p[l]);
  return g;
}

inline policy_state update_policy(const policy_state& policy, std::span<const double> grad, double eta) {
  if (grad.size() != policy.num_layers()) throw shape_error("update_policy: gradient length does not match policy");
  policy_state next = policy;
  for (std::size_t l = 0; l < grad.size(); ++l) {
    next.logits[l] -= eta * grad[l];
    if (!std::isfinite(next.logits[l])) throw numerical_error("update_policy: non-finite logit for layer " + std::to_string(l));
  }
  return next;
}

// Strict threshold: bit l is set iff sigmoid(logit_l) > tau.
inline selection_mask finalize_selection(const policy_state& policy, double tau) {
  if (!(tau > 0.0 && tau < 1.0)) throw config_error("finalize_selection: tau must lie in (0,1)");
  selection_mask m(policy.num_layers());
  for (std::size_t l = 0; l < m.size(); ++l) m.set(l, sigmoid(policy.logits[l]) > tau);
  return m;
}

// Evaluates each mask with `evaluate(mask) -> reward`, in mask order.
template <typename Evaluate>
reward_batch evaluate_rewards(std::vector<selection_mask> masks, Evaluate&& evaluate, double baseline_bsr = 0.0) {
  reward_batch batch;
  batch.baseline_bsr = baseline_bsr;
  batch.rewards.reserve(masks.size());
  for (const auto& m : masks) batch.rewards.push_back(evaluate(m));
  batch.masks = std::move(masks);
  return batch;
}

// reward_k = BSR(replace_layers(benign, malicious, mask_k)) - baseline_bsr
inline reward_batch compute_rewards(std::vector<selection_mask> masks, const model_params& benign,
                                    const model_params& malicious, const labeled_dataset& eval_set,
                                    double baseline_bsr) {
  if (eval_set.empty()) throw input_error("compute_rewards: empty backdoor evaluation set");
  return evaluate_rewards(
      std::move(masks),
      [&](const selection_mask& m) { return bsr(replace_layers(benign, malicious, m), eval_set) - baseline_bsr; },
      baseline_bsr);
}

struct polar_round_result {
  selection_mask mask;
  policy_state policy;
  bool fallback_used = false;
};

// Top-1 layer by selection probability when the thresholded mask is empty.
inline selection_mask finalize_with_fallback(const policy_state& policy, double tau, bool* fallback = nullptr) {
  selection_mask mask = finalize_selection(policy, tau);
  if (fallback) *fallback = false;
  if (mask.none()) {
    std::size_t best = 0;
    for (std::size_t l = 1; l < policy.num_layers(); ++l) {
      if (policy.logits[l] > policy.logits[best]) best = l;
    }
    mask.set(best, true);
    if (fallback) *fallback = true;
  }
  return mask;
}

// T iterations of sample -> reward -> gradient -> update against an arbitrary
// reward function, starting from `prev` when given.
template <typename RewardFn>
polar_round_result run_polar(std::size_t num_layers, RewardFn&& reward_of, const polar_config& cfg,
                             const std::optional<policy_state>& prev, std::uint64_t seed) {
  cfg.validate();
  policy_state policy = prev ? *prev : init_policy(num_layers, cfg);
  if (policy.num_layers() != num_layers) throw shape_error("run_polar: previous policy has a different layer count");
  for (int t = 0; t < cfg.steps; ++t) {
    auto masks = sample_actions(policy, cfg.batch_size, derive_seed(seed, {static_cast<std::uint64_t>(t)}));
    auto batch = evaluate_rewards(std::move(masks), reward_of);
    policy = update_policy(policy, policy_gradient(policy, batch, cfg.lambda), cfg.lr);
  }
  ++policy.round;
  polar_round_result res;
  res.mask = finalize_with_fallback(policy, cfg.tau, &res.fallback_used);
  res.policy = std::move(policy);
  return res;
}

// One attacker round of layer selection between a benign and a poisoned model.
inline polar_round_result run_polar_round(const model_params& benign, const model_params& malicious,
                                          const labeled_dataset& eval_set, const polar_config& cfg,
                                          const std::optional<policy_state>& prev, std::uint64_t seed) {
  detail::require_same_arch(benign, malicious, "run_polar_round");
  if (eval_set.empty()) throw input_error("run_polar_round: empty backdoor evaluation set");
  const double baseline = bsr(malicious, eval_set);
  std::map<std::uint64_t, double> cache;
  auto reward = [&](const selection_mask& m) {
    if (cfg.cache_rewards) {
      auto it = cache.find(m.to_index());
      if (it != cache.end()) return it->second;
    }
    const double r = bsr(replace_layers(benign, malicious, m), eval_set) - baseline;
    if (cfg.cache_rewards) cache.emplace(m.to_index(), r);
    return r;
  };
  return run_polar(benign.num_layers(), reward, cfg, prev, seed);
}

}  // namespace polar
