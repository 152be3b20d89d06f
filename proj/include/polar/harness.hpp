#pragma once

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <ostream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "polar/attacks.hpp"
#include "polar/defenses.hpp"
#include "polar/errors.hpp"
#include "polar/fl_sim.hpp"
#include "polar/metrics.hpp"

namespace polar {

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

inline constexpr const char* summary_schema = "polar-summary/1";
inline constexpr const char* aggregate_schema = "polar-aggregate/1";
inline constexpr const char* report_schema = "polar-report/1";

struct experiment_config {
  sim_config sim;
  defense_config defense;
  attack_strategy attack;
  data_spec data;
  std::vector<std::uint64_t> seeds = {0, 1, 2, 3, 4};
  std::string output_dir = "runs/default";

  void validate() const {
    sim.validate();
    defense.validate();
    attack.validate();
    data.validate();
    if (seeds.empty()) throw config_error("seeds must not be empty");
    if (std::set<std::uint64_t>(seeds.begin(), seeds.end()).size() != seeds.size()) {
      throw config_error("seeds must not repeat");
    }
    if (output_dir.empty()) throw config_error("output_dir must not be empty");
    if (defense.kind == defense_kind::multikrum) {
      if (sim.per_round < static_cast<std::size_t>(defense.mk_f) + 3) {
        throw config_error("defense.multikrum_f requires sim.per_round >= multikrum_f + 3");
      }
      if (static_cast<std::size_t>(defense.mk_m) > sim.per_round) {
        throw config_error("defense.multikrum_m must not exceed sim.per_round");
      }
    }
    if (defense.kind == defense_kind::flame && static_cast<std::size_t>(defense.flame_min_cluster) > sim.per_round) {
      throw config_error("defense.flame_min_cluster must not exceed sim.per_round");
    }
  }
};

namespace detail {

// Strict reader over one JSON object: every key must be consumed.
class object_reader {
 public:
  object_reader(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw config_error(where("") + "expected an object");
  }

  template <typename Fn>
  void with(const char* key, Fn&& fn) {
    auto it = j_.find(key);
    if (it == j_.end()) return;
    seen_.insert(key);
    fn(*it, key_path(key));
  }

  void real(const char* key, double& out) {
    with(key, [&](const json& v, const std::string& p) {
      if (!v.is_number()) throw config_error(p + ": expected a number");
      out = v.get<double>();
    });
  }

  void integer(const char* key, int& out) {
    with(key, [&](const json& v, const std::string& p) {
      if (!v.is_number_integer()) throw config_error(p + ": expected an integer");
      const auto x = v.get<std::int64_t>();
      if (x < INT32_MIN || x > INT32_MAX) throw config_error(p + ": integer out of range");
      out = static_cast<int>(x);
    });
  }

  void count(const char* key, std::size_t& out) {
    with(key, [&](const json& v, const std::string& p) { out = as_count(v, p); });
  }

  void text(const char* key, std::string& out) {
    with(key, [&](const json& v, const std::string& p) {
      if (!v.is_string()) throw config_error(p + ": expected a string");
      out = v.get<std::string>();
    });
  }

  void flag(const char* key, bool& out) {
    with(key, [&](const json& v, const std::string& p) {
      if (!v.is_boolean()) throw config_error(p + ": expected true or false");
      out = v.get<bool>();
    });
  }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it) {
      if (!seen_.count(it.key())) throw config_error(key_path(it.key()) + ": unknown key");
    }
  }

  std::string key_path(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

  static std::size_t as_count(const json& v, const std::string& p) {
    if (!v.is_number_integer()) throw config_error(p + ": expected a nonnegative integer");
    if (v.is_number_unsigned()) return v.get<std::size_t>();
    const auto x = v.get<std::int64_t>();
    if (x < 0) throw config_error(p + ": expected a nonnegative integer");
    return static_cast<std::size_t>(x);
  }

 private:
  std::string where(const std::string& key) const {
    const auto p = key.empty() ? path_ : key_path(key);
    return p.empty() ? "config: " : p + ": ";
  }

  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

template <typename Parse>
auto parse_enum(const json& v, const std::string& p, Parse&& parse) {
  if (!v.is_string()) throw config_error(p + ": expected a string");
  try {
    return parse(v.get<std::string>());
  } catch (const config_error& e) {
    throw config_error(p + ": " + e.what());
  }
}

}  // namespace detail

inline experiment_config parse_config_json(const json& root) {
  experiment_config cfg;
  detail::object_reader top(root, "");

  top.with("sim", [&](const json& v, const std::string& p) {
    detail::object_reader r(v, p);
    auto& s = cfg.sim;
    r.count("total_clients", s.total_clients);
    r.count("per_round", s.per_round);
    r.real("malicious_fraction", s.malicious_fraction);
    r.integer("rounds", s.rounds);
    r.integer("local_epochs", s.local_epochs);
    r.real("client_lr", s.client_lr);
    r.count("batch_size", s.batch_size);
    r.integer("attack_interval", s.attack_interval);
    r.with("pool", [&](const json& x, const std::string& q) { s.pool = detail::parse_enum(x, q, parse_pool_mode); });
    r.with("malicious_epochs", [&](const json& x, const std::string& q) {
      if (x.is_null()) {
        s.malicious_epochs.reset();
        return;
      }
      if (!x.is_number_integer()) throw config_error(q + ": expected an integer or null");
      s.malicious_epochs = x.get<int>();
    });
    r.real("poison_fraction", s.poison_fraction);
    r.finish();
  });

  top.with("defense", [&](const json& v, const std::string& p) {
    detail::object_reader r(v, p);
    auto& d = cfg.defense;
    r.with("kind", [&](const json& x, const std::string& q) { d.kind = detail::parse_enum(x, q, parse_defense_kind); });
    r.integer("multikrum_f", d.mk_f);
    r.integer("multikrum_m", d.mk_m);
    r.integer("rlr_threshold", d.rlr_threshold);
    r.real("rlr_server_lr", d.rlr_server_lr);
    r.real("flame_noise", d.flame_noise);
    r.integer("flame_min_cluster", d.flame_min_cluster);
    r.count("fltrust_root_size", d.fltrust_root_size);
    r.finish();
  });

  top.with("attack", [&](const json& v, const std::string& p) {
    detail::object_reader r(v, p);
    auto& a = cfg.attack;
    r.with("kind", [&](const json& x, const std::string& q) { a.kind = detail::parse_enum(x, q, parse_attack_kind); });
    r.real("lp_tau", a.lp_tau);
    r.with("polar", [&](const json& x, const std::string& q) {
      detail::object_reader pr(x, q);
      auto& c = a.polar;
      pr.count("K", c.batch_size);
      pr.integer("T", c.steps);
      pr.real("lr", c.lr);
      pr.real("lambda", c.lambda);
      pr.real("tau", c.tau);
      pr.real("init_logit", c.init_logit);
      pr.count("eval_subsample", c.eval_subsample);
      pr.flag("cache_rewards", c.cache_rewards);
      pr.finish();
    });
    r.finish();
  });

  top.with("data", [&](const json& v, const std::string& p) {
    detail::object_reader r(v, p);
    auto& d = cfg.data;
    r.text("source", d.source);
    r.text("csv_path", d.csv_path);
    r.integer("classes", d.classes);
    r.count("dim", d.dim);
    r.count("per_class", d.per_class);
    r.real("spread", d.spread);
    r.real("q", d.q);
    r.count("test_size", d.test_size);
    r.count("attacker_val_size", d.attacker_val_size);
    r.count("trigger_size", d.trigger_size);
    r.integer("target_label", d.target_label);
    r.with("hidden", [&](const json& x, const std::string& q) {
      if (!x.is_array()) throw config_error(q + ": expected an array of widths");
      d.hidden.clear();
      for (std::size_t i = 0; i < x.size(); ++i) {
        d.hidden.push_back(detail::object_reader::as_count(x[i], q + "[" + std::to_string(i) + "]"));
      }
    });
    r.finish();
  });

  top.with("seeds", [&](const json& v, const std::string& p) {
    if (!v.is_array()) throw config_error(p + ": expected an array of integers");
    cfg.seeds.clear();
    for (std::size_t i = 0; i < v.size(); ++i) {
      cfg.seeds.push_back(detail::object_reader::as_count(v[i], p + "[" + std::to_string(i) + "]"));
    }
  });
  top.text("output_dir", cfg.output_dir);
  top.finish();

  cfg.validate();
  return cfg;
}

// An empty (or whitespace-only) file yields the documented defaults.
inline experiment_config parse_config(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw config_error("config: cannot open '" + path.string() + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  const std::string text = ss.str();
  if (text.find_first_not_of(" \t\r\n") == std::string::npos) {
    experiment_config cfg;
    cfg.validate();
    return cfg;
  }
  json root;
  try {
    root = json::parse(text);
  } catch (const json::parse_error& e) {
    throw config_error("config: '" + path.string() + "' is not valid JSON: " + e.what());
  }
  return parse_config_json(root);
}

inline json to_json(const experiment_config& c) {
  json polar_j = {{"K", c.attack.polar.batch_size},   {"T", c.attack.polar.steps},
                  {"lr", c.attack.polar.lr},          {"lambda", c.attack.polar.lambda},
                  {"tau", c.attack.polar.tau},        {"init_logit", c.attack.polar.init_logit},
                  {"eval_subsample", c.attack.polar.eval_subsample},
                  {"cache_rewards", c.attack.polar.cache_rewards}};
  json sim_j = {{"total_clients", c.sim.total_clients},
                {"per_round", c.sim.per_round},
                {"malicious_fraction", c.sim.malicious_fraction},
                {"rounds", c.sim.rounds},
                {"local_epochs", c.sim.local_epochs},
                {"client_lr", c.sim.client_lr},
                {"batch_size", c.sim.batch_size},
                {"attack_interval", c.sim.attack_interval},
                {"pool", to_string(c.sim.pool)},
                {"malicious_epochs", c.sim.malicious_epochs ? json(*c.sim.malicious_epochs) : json(nullptr)},
                {"poison_fraction", c.sim.poison_fraction}};
  return {
      {"sim", sim_j},
      {"defense",
       {{"kind", to_string(c.defense.kind)},
        {"multikrum_f", c.defense.mk_f},
        {"multikrum_m", c.defense.mk_m},
        {"rlr_threshold", c.defense.rlr_threshold},
        {"rlr_server_lr", c.defense.rlr_server_lr},
        {"flame_noise", c.defense.flame_noise},
        {"flame_min_cluster", c.defense.flame_min_cluster},
        {"fltrust_root_size", c.defense.fltrust_root_size}}},
      {"attack", {{"kind", to_string(c.attack.kind)}, {"lp_tau", c.attack.lp_tau}, {"polar", polar_j}}},
      {"data",
       {{"source", c.data.source},
        {"csv_path", c.data.csv_path},
        {"classes", c.data.classes},
        {"dim", c.data.dim},
        {"per_class", c.data.per_class},
        {"spread", c.data.spread},
        {"q", c.data.q},
        {"test_size", c.data.test_size},
        {"attacker_val_size", c.data.attacker_val_size},
        {"trigger_size", c.data.trigger_size},
        {"target_label", c.data.target_label},
        {"hidden", c.data.hidden}}},
      {"seeds", c.seeds},
      {"output_dir", c.output_dir},
  };
}

// ---- number formatting and file output ----

// Shortest text that reads back to the same double.
inline std::string format_real(double v) {
  char buf[64];
  auto [end, ec] = std::to_chars(buf, buf + sizeof buf, v);
  if (ec != std::errc{}) throw numerical_error("format_real: conversion failed");
  return std::string(buf, end);
}

inline double parse_real(const std::string& s) {
  double v = 0.0;
  auto [end, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc{} || end != s.data() + s.size()) throw input_error("cannot parse number '" + s + "'");
  return v;
}

// Write to a sibling temporary then rename, so readers never see a partial file.
inline void write_atomic(const fs::path& path, const std::string& content) {
  fs::create_directories(path.parent_path());
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw input_error("cannot write '" + tmp.string() + "'");
    out << content;
    out.flush();
    if (!out) throw input_error("write failed for '" + tmp.string() + "'");
  }
  fs::rename(tmp, path);
}

inline std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw input_error("cannot open '" + path.string() + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// ---- round logs ----

inline const char* rounds_header =
    "round,accuracy,bsr,scheduled_malicious,accepted_malicious,selected_layers,mask,attacker_baseline_bsr,"
    "benign_ids,malicious_ids,accepted_ids,policy_logits";

namespace detail {

inline std::string join_ids(const std::vector<client_id>& ids) {
  std::string s;
  for (std::size_t i = 0; i < ids.size(); ++i) s += (i ? " " : "") + std::to_string(ids[i]);
  return s;
}

inline std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : s) {
    if (c == sep) {
      out.push_back(cur);
      cur.clear();
    } else {
      cur += c;
    }
  }
  out.push_back(cur);
  return out;
}

inline std::vector<client_id> parse_ids(const std::string& s) {
  std::vector<client_id> ids;
  if (s.empty()) return ids;
  for (const auto& t : split(s, ' ')) {
    client_id v = 0;
    auto [end, ec] = std::from_chars(t.data(), t.data() + t.size(), v);
    if (ec != std::errc{} || end != t.data() + t.size()) throw input_error("bad client id '" + t + "'");
    ids.push_back(v);
  }
  return ids;
}

}  // namespace detail

inline std::string rounds_csv(std::span<const round_record> records) {
  std::ostringstream out;
  out << rounds_header << '\n';
  for (const auto& r : records) {
    out << r.round << ',' << format_real(r.accuracy) << ',' << format_real(r.bsr) << ',' << r.malicious_ids.size() << ','
        << r.accepted_malicious() << ',' << (r.mask ? std::to_string(r.mask->count()) : "") << ','
        << (r.mask ? r.mask->to_string() : "") << ','
        << (r.attacker_baseline_bsr ? format_real(*r.attacker_baseline_bsr) : "") << ','
        << detail::join_ids(r.benign_ids) << ',' << detail::join_ids(r.malicious_ids) << ','
        << detail::join_ids(r.accepted_ids) << ',';
    for (std::size_t i = 0; i < r.policy_logits.size(); ++i) out << (i ? " " : "") << format_real(r.policy_logits[i]);
    out << '\n';
  }
  return out.str();
}

// Reads a round log back into records (timing fields stay zero).
inline std::vector<round_record> parse_rounds_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line) || line != rounds_header) throw input_error("round log: missing or unexpected header");
  std::vector<round_record> out;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    const auto f = detail::split(line, ',');
    if (f.size() != 12) throw input_error("round log: line " + std::to_string(line_no) + ": expected 12 fields");
    try {
      round_record r;
      r.round = std::stoi(f[0]);
      r.accuracy = parse_real(f[1]);
      r.bsr = parse_real(f[2]);
      if (!f[6].empty()) {
        selection_mask m(f[6].size());
        for (std::size_t i = 0; i < f[6].size(); ++i) {
          if (f[6][i] != '0' && f[6][i] != '1') throw input_error("bad mask '" + f[6] + "'");
          m.set(i, f[6][i] == '1');
        }
        r.mask = std::move(m);
      }
      if (!f[7].empty()) r.attacker_baseline_bsr = parse_real(f[7]);
      r.benign_ids = detail::parse_ids(f[8]);
      r.malicious_ids = detail::parse_ids(f[9]);
      r.accepted_ids = detail::parse_ids(f[10]);
      if (!f[11].empty()) {
        for (const auto& t : detail::split(f[11], ' ')) r.policy_logits.push_back(parse_real(t));
      }
      if (std::to_string(r.malicious_ids.size()) != f[3] || std::to_string(r.accepted_malicious()) != f[4]) {
        throw input_error("count columns disagree with id lists");
      }
      out.push_back(std::move(r));
    } catch (const input_error& e) {
      throw input_error("round log: line " + std::to_string(line_no) + ": " + e.what());
    } catch (const std::logic_error&) {
      throw input_error("round log: line " + std::to_string(line_no) + ": malformed field");
    }
  }
  if (out.empty()) throw input_error("round log: no rounds");
  return out;
}

// ---- per-seed summaries ----

struct seed_summary {
  std::uint64_t seed = 0;
  std::string defense;
  std::string attack;
  int rounds = 0;
  metrics_report metrics;

  friend bool operator==(const seed_summary&, const seed_summary&) = default;
};

inline json to_json(const seed_summary& s) {
  const auto& m = s.metrics;
  return {{"schema", summary_schema},
          {"seed", s.seed},
          {"defense", s.defense},
          {"attack", s.attack},
          {"rounds", s.rounds},
          {"acc", m.acc},
          {"absr", m.absr},
          {"bbsr", m.bbsr},
          {"mar", m.mar ? json(*m.mar) : json(nullptr)},
          {"bar", m.bar},
          {"bsr_trajectory", m.bsr_trajectory}};
}

inline seed_summary parse_summary(const std::string& text) {
  seed_summary s;
  try {
    const json j = json::parse(text);
    if (!j.is_object() || j.value("schema", "") != summary_schema) throw input_error("summary: unknown schema");
    s.seed = j.at("seed").get<std::uint64_t>();
    s.defense = j.at("defense").get<std::string>();
    s.attack = j.at("attack").get<std::string>();
    s.rounds = j.at("rounds").get<int>();
    s.metrics.acc = j.at("acc").get<double>();
    s.metrics.absr = j.at("absr").get<double>();
    s.metrics.bbsr = j.at("bbsr").get<double>();
    if (!j.at("mar").is_null()) s.metrics.mar = j.at("mar").get<double>();
    s.metrics.bar = j.at("bar").get<double>();
    s.metrics.bsr_trajectory = j.at("bsr_trajectory").get<std::vector<double>>();
  } catch (const json::exception& e) {
    throw input_error(std::string("summary: ") + e.what());
  }
  return s;
}

// ---- cross-seed aggregation ----

struct mean_std {
  double mean = 0.0;
  double std = 0.0;  // sample standard deviation, 0 for a single value
  std::size_t n = 0;
};

inline std::optional<mean_std> mean_and_std(std::span<const double> xs) {
  if (xs.empty()) return std::nullopt;
  mean_std r;
  r.n = xs.size();
  for (double x : xs) r.mean += x;
  r.mean /= static_cast<double>(r.n);
  if (r.n > 1) {
    double ss = 0.0;
    for (double x : xs) ss += (x - r.mean) * (x - r.mean);
    r.std = std::sqrt(ss / static_cast<double>(r.n - 1));
  }
  return r;
}

inline const std::vector<std::string>& metric_names() {
  static const std::vector<std::string> names = {"bbsr", "absr", "acc", "mar", "bar"};
  return names;
}

inline std::optional<double> metric_value(const metrics_report& m, const std::string& name) {
  if (name == "bbsr") return m.bbsr;
  if (name == "absr") return m.absr;
  if (name == "acc") return m.acc;
  if (name == "mar") return m.mar;
  if (name == "bar") return m.bar;
  throw config_error("unknown metric '" + name + "'");
}

inline json stats_json(std::span<const seed_summary> rows) {
  json out = json::object();
  for (const auto& name : metric_names()) {
    std::vector<double> xs;
    for (const auto& s : rows) {
      if (auto v = metric_value(s.metrics, name)) xs.push_back(*v);
    }
    const auto st = mean_and_std(xs);
    out[name] = st ? json{{"mean", st->mean}, {"std", st->std}, {"n", st->n}} : json(nullptr);
  }
  return out;
}

// ---- run ----

struct seed_failure {
  std::uint64_t seed = 0;
  std::string message;
};

struct run_outcome {
  std::vector<seed_summary> completed;
  std::vector<seed_failure> failures;
  fs::path output_dir;

  bool ok() const { return failures.empty(); }
};

inline fs::path seed_dir(const fs::path& out, std::uint64_t seed) { return out / ("seed_" + std::to_string(seed)); }

// Runs every seed of one experiment. Per seed: rounds.csv and summary.json
// (pure functions of the config) plus timing.json with wall-clock numbers.
// After all seeds: aggregate.json over the seeds that completed.
inline run_outcome run_config(const experiment_config& cfg, std::ostream& log) {
  cfg.validate();
  run_outcome res;
  res.output_dir = cfg.output_dir;
  try {
    fs::create_directories(res.output_dir);
  } catch (const fs::filesystem_error& e) {
    throw config_error("output_dir: cannot create '" + cfg.output_dir + "': " + e.what());
  }
  write_atomic(res.output_dir / "config.json", to_json(cfg).dump(2) + "\n");

  for (std::uint64_t seed : cfg.seeds) {
    sim_config sim = cfg.sim;
    sim.seed = seed;
    try {
      const auto r = run_experiment(sim, cfg.defense, cfg.attack, cfg.data);
      seed_summary s{seed, to_string(cfg.defense.kind), to_string(cfg.attack.kind), sim.rounds, r.metrics};
      const auto dir = seed_dir(res.output_dir, seed);
      write_atomic(dir / "rounds.csv", rounds_csv(r.records));
      json per_round = json::array();
      for (const auto& rec : r.records) {
        per_round.push_back({{"round", rec.round}, {"wall_seconds", rec.wall_seconds}, {"attacker_seconds", rec.attacker_seconds}});
      }
      write_atomic(dir / "timing.json", json{{"wall_seconds", r.wall_seconds}, {"rounds", per_round}}.dump(2) + "\n");
      write_atomic(dir / "summary.json", to_json(s).dump(2) + "\n");
      log << "seed " << seed << ": acc=" << format_real(s.metrics.acc) << " absr=" << format_real(s.metrics.absr)
          << " bbsr=" << format_real(s.metrics.bbsr)
          << " mar=" << (s.metrics.mar ? format_real(*s.metrics.mar) : std::string("n/a"))
          << " bar=" << format_real(s.metrics.bar) << " (" << format_real(std::round(r.wall_seconds * 100) / 100)
          << " s)\n";
      res.completed.push_back(std::move(s));
    } catch (const std::exception& e) {
      log << "seed " << seed << " failed: " << e.what() << "\n";
      res.failures.push_back({seed, e.what()});
    }
  }

  json agg = {{"schema", aggregate_schema},
              {"defense", to_string(cfg.defense.kind)},
              {"attack", to_string(cfg.attack.kind)},
              {"seeds", json::array()},
              {"failed_seeds", json::array()},
              {"metrics", stats_json(res.completed)}};
  for (const auto& s : res.completed) agg["seeds"].push_back(s.seed);
  for (const auto& f : res.failures) agg["failed_seeds"].push_back(f.seed);
  write_atomic(res.output_dir / "aggregate.json", agg.dump(2) + "\n");
  return res;
}

// ---- report ----

struct report_row {
  std::string defense;
  std::string attack;
  std::vector<seed_summary> seeds;
};

struct report_result {
  std::vector<report_row> rows;
  std::vector<std::pair<fs::path, std::string>> bad_files;
};

inline std::string format_cell(const std::optional<mean_std>& st) {
  if (!st) return "-";
  std::ostringstream o;
  o.setf(std::ios::fixed);
  o.precision(2);
  o << st->mean * 100.0 << " ± " << st->std * 100.0;
  return o.str();
}

// Collects every summary.json under run_dir, groups by (defense, attack),
// prints a table of mean ± std in percent and writes report.json.
inline report_result report(const fs::path& run_dir, std::ostream& out) {
  if (!fs::is_directory(run_dir)) throw input_error("report: '" + run_dir.string() + "' is not a directory");
  std::vector<fs::path> files;
  for (const auto& e : fs::recursive_directory_iterator(run_dir)) {
    if (e.is_regular_file() && e.path().filename() == "summary.json") files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());

  report_result res;
  std::map<std::pair<std::string, std::string>, std::vector<seed_summary>> groups;
  for (const auto& f : files) {
    try {
      auto s = parse_summary(read_file(f));
      groups[{s.defense, s.attack}].push_back(std::move(s));
    } catch (const std::exception& e) {
      res.bad_files.emplace_back(f, e.what());
    }
  }
  if (groups.empty()) throw input_error("report: no readable summary.json under '" + run_dir.string() + "'");
  for (auto& [key, rows] : groups) res.rows.push_back({key.first, key.second, std::move(rows)});

  const std::vector<std::string> cols = {"BBSR", "ABSR", "Acc", "MAR", "BAR"};
  std::vector<std::vector<std::string>> table;
  table.push_back({"defense", "attack", "seeds"});
  for (const auto& c : cols) table.back().push_back(c);
  json rows_j = json::array();
  for (const auto& row : res.rows) {
    std::vector<std::string> line = {row.defense, row.attack, std::to_string(row.seeds.size())};
    for (const auto& name : metric_names()) {
      std::vector<double> xs;
      for (const auto& s : row.seeds) {
        if (auto v = metric_value(s.metrics, name)) xs.push_back(*v);
      }
      line.push_back(format_cell(mean_and_std(xs)));
    }
    table.push_back(std::move(line));
    rows_j.push_back({{"defense", row.defense}, {"attack", row.attack}, {"seeds", row.seeds.size()},
                      {"metrics", stats_json(row.seeds)}});
  }

  // Column widths count code points so the ± sign does not skew alignment.
  auto width = [](const std::string& s) {
    std::size_t n = 0;
    for (unsigned char c : s) n += (c & 0xC0) != 0x80;
    return n;
  };
  std::vector<std::size_t> w(table.front().size(), 0);
  for (const auto& line : table) {
    for (std::size_t i = 0; i < line.size(); ++i) w[i] = std::max(w[i], width(line[i]));
  }
  for (std::size_t r = 0; r < table.size(); ++r) {
    for (std::size_t i = 0; i < table[r].size(); ++i) {
      out << table[r][i] << std::string(w[i] - width(table[r][i]) + 2, ' ');
    }
    out << '\n';
    if (r == 0) {
      std::size_t total = 0;
      for (auto x : w) total += x + 2;
      out << std::string(total, '-') << '\n';
    }
  }

  json bad = json::array();
  for (const auto& [p, msg] : res.bad_files) bad.push_back({{"file", p.string()}, {"error", msg}});
  write_atomic(run_dir / "report.json",
               json{{"schema", report_schema}, {"rows", rows_j}, {"unreadable", bad}}.dump(2) + "\n");
  return res;
}

}  // namespace polar
