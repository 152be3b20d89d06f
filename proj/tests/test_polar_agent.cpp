#include <array>
#include <cmath>
#include <vector>

#include <gtest/gtest.h>

#include "polar/data.hpp"
#include "polar/polar_agent.hpp"

using namespace polar;

namespace {

policy_state with_logits(std::vector<double> t) { return {std::move(t), 0}; }

reward_batch batch_of(std::vector<selection_mask> masks, std::vector<double> rewards) {
  reward_batch b;
  b.masks = std::move(masks);
  b.rewards = std::move(rewards);
  return b;
}

// Tiny pair of models plus a backdoor set so rewards come from real BSR.
struct model_pair {
  model_params benign, malicious;
  labeled_dataset eval;
};

model_pair make_pair_fixture() {
  const std::vector<std::size_t> hidden = {4};
  const auto arch = arch_spec::mlp(30, hidden, 3);
  const auto data = generate_synthetic(3, 30, 40, 0.1, 21);
  const auto trig = trigger_spec::tail_patch(30, 25, 1.0, 0);
  const auto benign = train_local(init_model(arch, 1), data, {5, 0.1, 16}, 2).model;
  const auto malicious = train_local(benign, poison_dataset(data, trig, 0.5, 3), {5, 0.1, 16}, 4).model;
  return {benign, malicious, build_backdoor_testset(data, trig)};
}

}  // namespace

TEST(InitPolicy, Examples) {
  polar_config cfg;
  for (double p : init_policy(5, cfg).probabilities()) EXPECT_EQ(p, 0.5);
  cfg.init_logit = 0.5;
  for (double p : init_policy(3, cfg).probabilities()) EXPECT_NEAR(p, 0.6225, 1e-4);
  EXPECT_THROW(init_policy(0, cfg), config_error);
}

TEST(SampleActions, SaturationAndFrequencies) {
  for (const auto& m : sample_actions(with_logits({50, 50, 50}), 200, 1)) EXPECT_TRUE(m.all());
  for (const auto& m : sample_actions(with_logits({-50, -50}), 200, 1)) EXPECT_TRUE(m.none());

  const auto masks = sample_actions(with_logits({0, 0, 0}), 10000, 7);
  ASSERT_EQ(masks.size(), 10000U);
  std::array<int, 3> bit{};
  std::array<int, 8> joint{};
  for (const auto& m : masks) {
    for (std::size_t l = 0; l < 3; ++l) bit[l] += m[l];
    ++joint[m.to_index()];
  }
  for (int b : bit) {
    EXPECT_GE(b / 10000.0, 0.48);
    EXPECT_LE(b / 10000.0, 0.52);
  }
  for (int j : joint) EXPECT_NEAR(j / 10000.0, 0.125, 0.02);
  EXPECT_EQ(masks, sample_actions(with_logits({0, 0, 0}), 10000, 7));
  EXPECT_THROW(sample_actions(with_logits({0}), 0, 1), config_error);
}

TEST(SelectionLogProb, Examples) {
  EXPECT_NEAR(selection_log_prob(with_logits({0, 0, 0, 0}), selection_mask::from_index(5, 4)), -4 * std::log(2.0), 1e-15);
  EXPECT_NEAR(selection_log_prob(with_logits({50}), selection_mask(1, true)), 0.0, 1e-20);
  const auto pol = with_logits({0.3, -1.7, 2.2, -0.4});
  double total = 0.0;
  for (std::uint64_t c = 0; c < 16; ++c) total += std::exp(selection_log_prob(pol, selection_mask::from_index(c, 4)));
  EXPECT_NEAR(total, 1.0, 1e-10);
  EXPECT_THROW(selection_log_prob(pol, selection_mask(3)), shape_error);
  // Finite even deep in saturation.
  EXPECT_TRUE(std::isfinite(selection_log_prob(with_logits({800}), selection_mask(1, false))));
}

TEST(PolicyLoss, Examples) {
  const auto pol = with_logits({0.4, -0.9});
  const auto m = selection_mask::from_index(2, 2);
  EXPECT_EQ(policy_loss(pol, batch_of({m, m}, {0, 0}), 0.0), 0.0);
  EXPECT_DOUBLE_EQ(policy_loss(pol, batch_of({m}, {0.7}), 0.0), -0.7 * selection_log_prob(pol, m));
  EXPECT_NEAR(policy_loss(with_logits({0, 0}), batch_of({m}, {0}), 10.0), 20 * std::log(0.5), 1e-12);
  EXPECT_NEAR(policy_loss(with_logits({0, 0}), batch_of({m}, {0}), 10.0), -13.8629, 1e-4);
  EXPECT_THROW(policy_loss(pol, batch_of({m}, {1, 2}), 0.0), shape_error);
}

TEST(PolicyGradient, Examples) {
  const auto pol = with_logits({0.2, -0.3, 1.1});
  const auto m = selection_mask::from_index(3, 3);
  for (double g : policy_gradient(pol, batch_of({m, m}, {0, 0}), 0.0)) EXPECT_EQ(g, 0.0);
  const auto g = policy_gradient(with_logits({0}), batch_of({selection_mask(1, true)}, {1.0}), 0.0);
  ASSERT_EQ(g.size(), 1U);
  EXPECT_DOUBLE_EQ(g[0], -0.5);
}

TEST(PolicyGradient, CentralDifferenceOracle) {
  rng gen(99);
  for (int inst = 0; inst < 20; ++inst) {
    const std::size_t n = 1 + gen.below(6);
    std::vector<double> t(n);
    for (double& x : t) x = gen.uniform(-3, 3);
    const auto pol = with_logits(t);
    const std::size_t k = 1 + gen.below(20);
    reward_batch b;
    for (std::size_t s = 0; s < k; ++s) {
      b.masks.push_back(selection_mask::from_index(gen.below(std::uint64_t{1} << n), n));
      b.rewards.push_back(gen.uniform(-1, 1));
    }
    const double lambda = gen.uniform(0, 10);
    const auto g = policy_gradient(pol, b, lambda);
    for (std::size_t l = 0; l < n; ++l) {
      auto up = t, dn = t;
      up[l] += 1e-5;
      dn[l] -= 1e-5;
      const double fd = (policy_loss(with_logits(up), b, lambda) - policy_loss(with_logits(dn), b, lambda)) / 2e-5;
      EXPECT_NEAR(g[l], fd, 1e-6);
    }
  }
}

TEST(UpdatePolicy, Examples) {
  const auto pol = with_logits({0.25, -1.5});
  const std::vector<double> zero = {0, 0}, some = {3, -2};
  EXPECT_EQ(update_policy(pol, zero, 0.5), pol);
  EXPECT_EQ(update_policy(pol, some, 0.0), pol);
  const std::vector<double> g = {-0.5};
  EXPECT_DOUBLE_EQ(update_policy(with_logits({0}), g, 0.01).logits[0], 0.005);
  const std::vector<double> huge = {-1e308};
  EXPECT_THROW(update_policy(with_logits({0}), huge, 1e10), numerical_error);
  EXPECT_THROW(update_policy(pol, g, 0.1), shape_error);
}

TEST(FinalizeSelection, Examples) {
  EXPECT_TRUE(finalize_selection(with_logits({0, 0, 0}), 0.5).none());
  EXPECT_TRUE(finalize_selection(with_logits({50, 50}), 0.999).all());
  EXPECT_EQ(finalize_selection(with_logits({2, -2}), 0.5).to_string(), "10");
  EXPECT_THROW(finalize_selection(with_logits({0}), 1.0), config_error);
  bool fb = false;
  EXPECT_EQ(finalize_with_fallback(with_logits({-3, -1, -2}), 0.5, &fb).to_string(), "010");
  EXPECT_TRUE(fb);
  finalize_with_fallback(with_logits({3, -1}), 0.5, &fb);
  EXPECT_FALSE(fb);
}

TEST(ComputeRewards, AllOnesIsZeroAndAllZerosIsBenignGap) {
  const auto fx = make_pair_fixture();
  const double base = bsr(fx.malicious, fx.eval);
  const std::size_t n = fx.benign.num_layers();
  const auto b = compute_rewards({selection_mask(n, true), selection_mask(n, false)}, fx.benign, fx.malicious, fx.eval, base);
  EXPECT_EQ(b.rewards[0], 0.0);
  EXPECT_EQ(b.rewards[1], bsr(fx.benign, fx.eval) - base);
  EXPECT_EQ(b.baseline_bsr, base);
  EXPECT_THROW(compute_rewards({selection_mask(n)}, fx.benign, fx.malicious, labeled_dataset{}, base), input_error);
}

TEST(RunPolarRound, ZeroStepsKeepsPreviousPolicy) {
  const auto fx = make_pair_fixture();
  polar_config cfg;
  cfg.steps = 0;
  const auto prev = with_logits({2, -2});
  const auto r = run_polar_round(fx.benign, fx.malicious, fx.eval, cfg, prev, 5);
  EXPECT_EQ(r.mask.to_string(), "10");
  EXPECT_EQ(r.policy.logits, prev.logits);
  EXPECT_FALSE(r.fallback_used);
}

TEST(RunPolarRound, DeterministicForFixedSeed) {
  const auto fx = make_pair_fixture();
  polar_config cfg;
  cfg.batch_size = 10;
  cfg.steps = 3;
  const auto a = run_polar_round(fx.benign, fx.malicious, fx.eval, cfg, std::nullopt, 11);
  const auto b = run_polar_round(fx.benign, fx.malicious, fx.eval, cfg, std::nullopt, 11);
  EXPECT_EQ(a.mask, b.mask);
  EXPECT_EQ(a.policy, b.policy);
  EXPECT_EQ(a.policy.round, 1);
  cfg.cache_rewards = true;
  const auto c = run_polar_round(fx.benign, fx.malicious, fx.eval, cfg, std::nullopt, 11);
  EXPECT_EQ(a.policy, c.policy);
}

TEST(RunPolar, PlantedCriticalLayerIsFound) {
  polar_config cfg;
  cfg.batch_size = 50;
  cfg.steps = 200;
  cfg.lambda = 0.0;
  auto reward = [](const selection_mask& m) { return m[3] ? 0.5 : -0.5; };
  int hits = 0;
  for (std::uint64_t seed = 0; seed < 20; ++seed) hits += run_polar(6, reward, cfg, std::nullopt, seed).mask[3];
  EXPECT_GE(hits, 18);
}

TEST(RunPolar, LambdaPushesLogitsDownMonotonically) {
  auto zero = [](const selection_mask&) { return 0.0; };
  polar_config cfg;
  cfg.steps = 50;
  std::vector<double> first;
  for (double lambda : {0.0, 1.0, 10.0, 50.0}) {
    cfg.lambda = lambda;
    const auto r = run_polar(4, zero, cfg, std::nullopt, 3);
    for (double t : r.policy.logits) EXPECT_EQ(t, r.policy.logits[0]);
    first.push_back(r.policy.logits[0]);
  }
  EXPECT_EQ(first[0], 0.0);
  for (std::size_t i = 1; i < first.size(); ++i) EXPECT_LT(first[i], first[i - 1]);
}

TEST(RunPolar, RejectsMismatchedPrevious) {
  auto zero = [](const selection_mask&) { return 0.0; };
  EXPECT_THROW(run_polar(3, zero, polar_config{}, with_logits({0, 0}), 1), shape_error);
  polar_config bad;
  bad.tau = 0.0;
  EXPECT_THROW(run_polar(3, zero, bad, std::nullopt, 1), config_error);
}
