#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <functional>
#include <numeric>
#include <optional>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include "polar/attacks.hpp"
#include "polar/data.hpp"
#include "polar/defenses.hpp"
#include "polar/errors.hpp"
#include "polar/metrics.hpp"
#include "polar/nn.hpp"
#include "polar/records.hpp"
#include "polar/rng.hpp"

namespace polar {

enum class pool_mode { per_round, fixed_pool };

inline std::string to_string(pool_mode m) { return m == pool_mode::per_round ? "per_round" : "fixed_pool"; }

inline pool_mode parse_pool_mode(const std::string& s) {
  if (s == "per_round") return pool_mode::per_round;
  if (s == "fixed_pool") return pool_mode::fixed_pool;
  throw config_error("unknown pool mode '" + s + "'");
}

struct sim_config {
  std::size_t total_clients = 100;
  std::size_t per_round = 10;
  double malicious_fraction = 0.1;
  int rounds = 30;
  int local_epochs = 2;
  double client_lr = 0.1;
  std::size_t batch_size = 32;
  int attack_interval = 1;
  pool_mode pool = pool_mode::per_round;
  std::optional<int> malicious_epochs;  // attacker-side override of local_epochs
  double poison_fraction = 0.5;
  std::uint64_t seed = 0;

  void validate() const {
    if (total_clients == 0) throw config_error("sim.total_clients must be positive");
    if (per_round == 0 || per_round > total_clients) throw config_error("sim.per_round must lie in [1, total_clients]");
    if (!(malicious_fraction >= 0.0 && malicious_fraction < 0.5)) throw config_error("sim.malicious_fraction must lie in [0, 0.5)");
    if (rounds < 1) throw config_error("sim.rounds must be positive");
    if (local_epochs < 0) throw config_error("sim.local_epochs must be nonnegative");
    if (!(client_lr > 0.0)) throw config_error("sim.client_lr must be positive");
    if (batch_size == 0) throw config_error("sim.batch_size must be positive");
    if (attack_interval < 1) throw config_error("sim.attack_interval must be >= 1");
    if (malicious_epochs && *malicious_epochs < 0) throw config_error("sim.malicious_epochs must be nonnegative");
    if (!(poison_fraction >= 0.0 && poison_fraction <= 1.0)) throw config_error("sim.poison_fraction must lie in [0,1]");
  }

  train_config benign_train() const { return {local_epochs, client_lr, batch_size}; }
  train_config malicious_train() const { return {malicious_epochs.value_or(local_epochs), client_lr, batch_size}; }
  std::size_t malicious_population() const {
    return static_cast<std::size_t>(std::llround(static_cast<double>(total_clients) * malicious_fraction));
  }
  std::size_t malicious_slots() const {
    return static_cast<std::size_t>(std::llround(static_cast<double>(per_round) * malicious_fraction));
  }
};

// Client ids controlled by the attacker for the whole run, ascending.
inline std::vector<client_id> malicious_pool(const sim_config& cfg, std::uint64_t seed) {
  std::vector<client_id> ids(cfg.total_clients);
  std::iota(ids.begin(), ids.end(), client_id{0});
  rng gen(derive_seed(seed, {0x9001}));
  gen.shuffle(std::span<client_id>(ids));
  ids.resize(cfg.malicious_population());
  std::sort(ids.begin(), ids.end());
  return ids;
}

struct schedule {
  std::vector<client_id> benign;
  std::vector<client_id> malicious;
};

// per_round: rounds with r mod F == 0 carry round(n*C) attacker slots, filled
// from the attacker population; the rest of the round is benign.
// fixed_pool: n clients drawn uniformly from everyone; attackers are whoever
// of the fixed pool happens to be drawn.
inline schedule schedule_clients(int round, const sim_config& cfg, std::uint64_t seed) {
  cfg.validate();
  const auto pool = malicious_pool(cfg, seed);
  std::vector<client_id> benign_pop;
  benign_pop.reserve(cfg.total_clients - pool.size());
  for (client_id c = 0; c < cfg.total_clients; ++c) {
    if (!std::binary_search(pool.begin(), pool.end(), c)) benign_pop.push_back(c);
  }
  rng gen(derive_seed(seed, {0x5c4e, static_cast<std::uint64_t>(round)}));
  auto draw = [&gen](std::vector<client_id> from, std::size_t k) {
    k = std::min(k, from.size());
    for (std::size_t i = 0; i < k; ++i) std::swap(from[i], from[i + gen.below(from.size() - i)]);
    from.resize(k);
    std::sort(from.begin(), from.end());
    return from;
  };

  schedule s;
  if (cfg.pool == pool_mode::per_round) {
    std::size_t slots = 0;
    if (round % cfg.attack_interval == 0) slots = std::min(cfg.malicious_slots(), pool.size());
    s.malicious = draw(pool, slots);
    s.benign = draw(benign_pop, cfg.per_round - slots);
  } else {
    std::vector<client_id> all(cfg.total_clients);
    std::iota(all.begin(), all.end(), client_id{0});
    for (client_id c : draw(all, cfg.per_round)) {
      (std::binary_search(pool.begin(), pool.end(), c) ? s.malicious : s.benign).push_back(c);
    }
  }
  return s;
}

struct data_spec {
  std::string source = "synthetic";  // or "csv"
  std::string csv_path;
  int classes = 3;
  std::size_t dim = 64;
  std::size_t per_class = 5000;
  double spread = 0.15;
  double q = 0.5;
  std::size_t test_size = 600;
  std::size_t attacker_val_size = 600;
  std::size_t trigger_size = 25;
  int target_label = 0;
  std::vector<std::size_t> hidden = {32, 32, 16};

  void validate() const {
    if (source != "synthetic" && source != "csv") throw config_error("data.source must be 'synthetic' or 'csv'");
    if (source == "csv" && csv_path.empty()) throw config_error("data.csv_path required for csv source");
    if (classes < 2) throw config_error("data.classes must be >= 2");
    if (!(q > 0.0 && q <= 1.0)) throw config_error("data.q must lie in (0,1]");
    if (target_label < 0 || target_label >= classes) throw config_error("data.target_label outside class range");
    if (test_size == 0) throw config_error("data.test_size must be positive");
    if (attacker_val_size == 0) throw config_error("data.attacker_val_size must be positive");
    if (hidden.empty()) throw config_error("data.hidden must list at least one hidden width");
    for (std::size_t h : hidden) {
      if (h == 0) throw config_error("data.hidden widths must be positive");
    }
  }
};

// Everything a run needs that is fixed across rounds.
struct federation {
  std::shared_ptr<const arch_spec> arch;
  trigger_spec trigger;
  labeled_dataset test;
  labeled_dataset backdoor_test;
  labeled_dataset attacker_eval;  // backdoor set from attacker-held validation data
  labeled_dataset root;           // server-side data for FLTrust
  std::vector<labeled_dataset> clients;
  std::vector<double> data_weights;
};

inline federation build_federation(const sim_config& sim, const defense_config& defense, const data_spec& spec,
                                   std::uint64_t seed) {
  spec.validate();
  sim.validate();
  const std::uint64_t data_seed = derive_seed(seed, {0xd0});
  labeled_dataset full = spec.source == "csv" ? load_csv(spec.csv_path, spec.classes)
                                              : generate_synthetic(spec.classes, spec.dim, spec.per_class, spec.spread,
                                                                   data_seed, spec.trigger_size);
  const std::size_t reserved = spec.test_size + spec.attacker_val_size + defense.fltrust_root_size;
  if (full.size() <= reserved) throw config_error("data: dataset too small for test/validation/root splits");

  federation fed;
  fed.trigger = trigger_spec::tail_patch(full.dim(), spec.trigger_size, 1.0, spec.target_label);
  auto [test, rest] = split_dataset(full, spec.test_size, derive_seed(data_seed, {1}));
  auto [val, rest2] = split_dataset(rest, spec.attacker_val_size, derive_seed(data_seed, {2}));
  auto [root, train] = split_dataset(rest2, defense.fltrust_root_size, derive_seed(data_seed, {3}));
  fed.test = std::move(test);
  fed.root = std::move(root);
  fed.backdoor_test = build_backdoor_testset(fed.test, fed.trigger);
  fed.attacker_eval = build_backdoor_testset(val, fed.trigger);

  const auto plan = partition_noniid(train, sim.total_clients, spec.q, derive_seed(data_seed, {4}));
  fed.data_weights = plan.data_weights();
  fed.clients.reserve(plan.num_clients());
  for (const auto& idx : plan.client_indices) fed.clients.push_back(train.subset(idx));
  fed.arch = std::make_shared<const arch_spec>(
      arch_spec::mlp(full.dim(), spec.hidden, static_cast<std::size_t>(full.num_classes())));
  return fed;
}

namespace detail {

inline std::size_t thread_cap() {
  if (const char* env = std::getenv("POLAR_THREADS")) {
    const long v = std::strtol(env, nullptr, 10);
    if (v >= 1) return static_cast<std::size_t>(v);
  }
  return std::max(1U, std::thread::hardware_concurrency());
}

// Runs fn(i) for i in [0, n); results are written by index so the outcome
// does not depend on scheduling.
template <typename Fn>
void parallel_for(std::size_t n, Fn&& fn) {
  const std::size_t workers = std::min(thread_cap(), n);
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::exception_ptr> errors(n);
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&, w] {
      for (std::size_t i = w; i < n; i += workers) {
        try {
          fn(i);
        } catch (...) {
          errors[i] = std::current_exception();
        }
      }
    });
  }
  for (auto& t : pool) t.join();
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

}  // namespace detail

struct round_outcome {
  model_params global;
  round_record record;
  attacker_state attacker;
};

inline round_outcome run_round(const model_params& global, int round, const sim_config& cfg, const defense_config& defense,
                               const attack_strategy& strat, const attacker_state& state, const federation& fed) {
  const auto t0 = std::chrono::steady_clock::now();
  const std::uint64_t round_seed = derive_seed(cfg.seed, {0x70, static_cast<std::uint64_t>(round)});
  schedule sched = schedule_clients(round, cfg, cfg.seed);
  if (strat.kind == attack_kind::none) {
    // Attacker-controlled clients train honestly when no attack is configured.
    sched.benign.insert(sched.benign.end(), sched.malicious.begin(), sched.malicious.end());
    sched.malicious.clear();
    std::sort(sched.benign.begin(), sched.benign.end());
  }

  round_outcome out{global, {}, state};
  auto& rec = out.record;
  rec.round = round;
  rec.benign_ids = sched.benign;
  rec.malicious_ids = sched.malicious;

  std::vector<client_update> updates(sched.benign.size());
  const auto benign_train = cfg.benign_train();
  try {
    detail::parallel_for(sched.benign.size(), [&](std::size_t k) {
      const client_id id = sched.benign[k];
      auto trained = train_local(global, fed.clients[id], benign_train, derive_seed(round_seed, {id}));
      updates[k] = {id, false, model_delta(trained.model, global)};
    });

    if (!sched.malicious.empty()) {
      std::vector<std::size_t> rows;
      matrix f(0, fed.clients.front().dim());
      std::vector<int> y;
      for (client_id id : sched.malicious) {
        const auto& d = fed.clients[id];
        for (std::size_t i = 0; i < d.size(); ++i) {
          f.append_row(d.features(i));
          y.push_back(d.label(i));
        }
      }
      labeled_dataset clean(std::move(f), std::move(y), fed.clients.front().num_classes());
      const std::uint64_t atk_seed = derive_seed(round_seed, {0xa77ac});
      auto poisoned = poison_dataset(clean, fed.trigger, cfg.poison_fraction, atk_seed);
      auto step = malicious_client_step(global, clean, poisoned, fed.attacker_eval, strat, state, cfg.malicious_train(),
                                        atk_seed);
      for (client_id id : sched.malicious) updates.push_back({id, true, step.update});
      out.attacker = std::move(step.state);
      rec.mask = step.mask;
      rec.attacker_baseline_bsr = step.baseline_bsr;
      rec.attacker_seconds = step.selection_seconds;
      if (out.attacker.policy) rec.policy_logits = out.attacker.policy->logits;
    }

    std::vector<double> weights;
    for (const auto& u : updates) weights.push_back(fed.data_weights[u.id]);
    std::optional<update_vector> server_update;
    if (defense.kind == defense_kind::fltrust) {
      auto trained = train_local(global, fed.root, benign_train, derive_seed(round_seed, {0x5e7e}));
      server_update = model_delta(trained.model, global);
    }
    auto agg = aggregate(defense, updates, weights, server_update, derive_seed(round_seed, {0xa66}));
    out.global = apply_aggregate(global, agg.aggregate);
    rec.accepted_ids = std::move(agg.accepted_ids);
  } catch (const numerical_error& e) {
    throw numerical_error("round " + std::to_string(round) + ": " + e.what());
  }

  rec.accuracy = accuracy(out.global, fed.test);
  rec.bsr = bsr(out.global, fed.backdoor_test);
  rec.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return out;
}

struct experiment_result {
  std::vector<round_record> records;
  metrics_report metrics;
  model_params final_model;
  double wall_seconds = 0.0;
};

inline metrics_report summarize(std::span<const round_record> records, std::size_t window = 10) {
  metrics_report m;
  for (const auto& r : records) m.bsr_trajectory.push_back(r.bsr);
  std::tie(m.absr, m.bbsr) = absr_bbsr(m.bsr_trajectory, window);
  const auto rates = mar_bar(records);
  m.mar = rates.mar;
  m.bar = rates.bar;
  m.acc = records.back().accuracy;
  return m;
}

using round_callback = std::function<void(const round_record&)>;

inline experiment_result run_experiment(const sim_config& cfg, const defense_config& defense, const attack_strategy& strat,
                                        const federation& fed, const round_callback& on_round = {}) {
  cfg.validate();
  defense.validate();
  strat.validate();
  const auto t0 = std::chrono::steady_clock::now();
  experiment_result res;
  model_params global = init_model(*fed.arch, derive_seed(cfg.seed, {0x1417}));
  attacker_state state;
  for (int r = 0; r < cfg.rounds; ++r) {
    auto out = run_round(global, r, cfg, defense, strat, state, fed);
    global = std::move(out.global);
    state = std::move(out.attacker);
    if (on_round) on_round(out.record);
    res.records.push_back(std::move(out.record));
  }
  res.metrics = summarize(res.records);
  res.final_model = std::move(global);
  res.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return res;
}

inline experiment_result run_experiment(const sim_config& cfg, const defense_config& defense, const attack_strategy& strat,
                                        const data_spec& spec, const round_callback& on_round = {}) {
  const auto fed = build_federation(cfg, defense, spec, cfg.seed);
  return run_experiment(cfg, defense, strat, fed, on_round);
}

}  // namespace polar
