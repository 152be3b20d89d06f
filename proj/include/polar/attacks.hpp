#pragma once

#include <algorithm>
#include <chrono>
#include <cstdint>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "polar/data.hpp"
#include "polar/errors.hpp"
#include "polar/metrics.hpp"
#include "polar/nn.hpp"
#include "polar/polar_agent.hpp"
#include "polar/records.hpp"

namespace polar {

enum class attack_kind { none, polar, lp, badnets, all_layers };

inline std::string to_string(attack_kind k) {
  switch (k) {
    case attack_kind::none: return "none";
    case attack_kind::polar: return "polar";
    case attack_kind::lp: return "lp";
    case attack_kind::badnets: return "badnets";
    case attack_kind::all_layers: return "all_layers";
  }
  return "unknown";
}

inline attack_kind parse_attack_kind(const std::string& s) {
  if (s == "none") return attack_kind::none;
  if (s == "polar") return attack_kind::polar;
  if (s == "lp") return attack_kind::lp;
  if (s == "badnets") return attack_kind::badnets;
  if (s == "all_layers") return attack_kind::all_layers;
  throw config_error("unknown attack kind '" + s + "'");
}

struct attack_strategy {
  attack_kind kind = attack_kind::polar;
  polar_config polar;
  double lp_tau = 0.95;

  bool layer_wise() const {
    return kind == attack_kind::polar || kind == attack_kind::lp || kind == attack_kind::all_layers;
  }

  void validate() const {
    if (kind == attack_kind::polar) polar.validate();
    if (kind == attack_kind::lp && !(lp_tau > 0.0 && lp_tau <= 1.0)) throw config_error("attack.lp_tau must lie in (0,1]");
  }
};

// State shared by all malicious clients of one run.
struct attacker_state {
  std::optional<policy_state> policy;
  std::optional<selection_mask> last_mask;
  int rounds_participated = 0;

  friend bool operator==(const attacker_state&, const attacker_state&) = default;
};

struct malicious_step_result {
  update_vector update;
  attacker_state state;
  std::optional<selection_mask> mask;
  std::optional<double> baseline_bsr;
  double selection_seconds = 0.0;
};

// LP-style rule-based selection. Layers are scored by the BSR lost when the
// poisoned model takes that single layer back from the benign model, then added
// to the benign model in descending score order until the composed model
// reaches tau * BSR(malicious).
inline selection_mask lp_attack_select(const model_params& benign, const model_params& malicious,
                                       const labeled_dataset& eval_set, double tau) {
  detail::require_same_arch(benign, malicious, "lp_attack_select");
  if (!(tau > 0.0 && tau <= 1.0)) throw config_error("lp_attack_select: tau must lie in (0,1]");
  if (eval_set.empty()) throw input_error("lp_attack_select: empty backdoor evaluation set");
  const std::size_t n = benign.num_layers();
  const double full = bsr(malicious, eval_set);

  std::vector<double> score(n);
  for (std::size_t l = 0; l < n; ++l) {
    score[l] = full - bsr(replace_layers(malicious, benign, selection_mask::single(n, l)), eval_set);
  }
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return score[a] > score[b]; });

  if (full <= 0.0) return selection_mask::single(n, order.front());

  selection_mask mask(n);
  for (std::size_t l : order) {
    mask.set(l, true);
    if (bsr(replace_layers(benign, malicious, mask), eval_set) >= tau * full) break;
  }
  return mask;
}

inline update_vector badnets_update(const model_params& global, const labeled_dataset& poisoned, const train_config& train,
                                    std::uint64_t seed) {
  if (poisoned.empty()) throw input_error("badnets_update: empty poisoned dataset");
  auto trained = train_local(global, poisoned, train, derive_seed(seed, {0xbad1}));
  return model_delta(trained.model, global);
}

// Malicious client of one round: benign model from clean data, poisoned model
// trained on from it, layer selection, composed update relative to `global`.
inline malicious_step_result malicious_client_step(const model_params& global, const labeled_dataset& clean,
                                                   const labeled_dataset& poisoned, const labeled_dataset& eval_set,
                                                   const attack_strategy& strat, const attacker_state& state,
                                                   const train_config& train, std::uint64_t seed) {
  strat.validate();
  if (clean.empty() || poisoned.empty()) throw input_error("malicious_client_step: empty local dataset");
  malicious_step_result res;
  res.state = state;
  ++res.state.rounds_participated;

  if (strat.kind == attack_kind::badnets) {
    res.update = badnets_update(global, poisoned, train, seed);
    return res;
  }
  if (strat.kind == attack_kind::none) throw config_error("malicious_client_step: no attack configured");
  if (eval_set.empty()) throw input_error("malicious_client_step: empty backdoor evaluation set");

  const auto benign = train_local(global, clean, train, derive_seed(seed, {0xb0}));
  const auto malicious = train_local(benign.model, poisoned, train, derive_seed(seed, {0xb1}));

  labeled_dataset eval = eval_set;
  const std::size_t sub = strat.polar.eval_subsample;
  if (sub > 0 && sub < eval_set.size()) eval = split_dataset(eval_set, sub, derive_seed(seed, {0xe5})).first;
  res.baseline_bsr = bsr(malicious.model, eval);

  const std::size_t n = global.num_layers();
  selection_mask mask(n, true);
  const auto t0 = std::chrono::steady_clock::now();
  switch (strat.kind) {
    case attack_kind::polar: {
      auto r = run_polar_round(benign.model, malicious.model, eval, strat.polar, state.policy, derive_seed(seed, {0x90}));
      mask = std::move(r.mask);
      res.state.policy = std::move(r.policy);
      break;
    }
    case attack_kind::lp:
      mask = lp_attack_select(benign.model, malicious.model, eval, strat.lp_tau);
      break;
    default:
      break;
  }
  res.selection_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

  res.update = model_delta(replace_layers(benign.model, malicious.model, mask), global);
  res.state.last_mask = mask;
  res.mask = std::move(mask);
  return res;
}

}  // namespace polar
