#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include <gtest/gtest.h>

#include "polar/harness.hpp"

using namespace polar;

namespace {

class TempDir {
 public:
  TempDir() {
    path_ = fs::temp_directory_path() /
            ("polar_harness_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
    fs::remove_all(path_);
    fs::create_directories(path_);
  }
  ~TempDir() { fs::remove_all(path_); }
  const fs::path& path() const { return path_; }
  fs::path write(const std::string& name, const std::string& text) const {
    const auto p = path_ / name;
    std::ofstream(p, std::ios::binary) << text;
    return p;
  }

 private:
  fs::path path_;
};

std::string error_of(const fs::path& p) {
  try {
    parse_config(p);
  } catch (const config_error& e) {
    return e.what();
  }
  return "";
}

// Two-seed, three-round run small enough for a unit test.
std::string small_config(const fs::path& out, const std::string& defense = "multikrum",
                         const std::string& attack = "badnets") {
  return R"({
  "sim": {"total_clients": 20, "per_round": 10, "rounds": 3, "pool": "fixed_pool", "malicious_fraction": 0.2},
  "defense": {"kind": ")" + defense + R"(", "fltrust_root_size": 100},
  "attack": {"kind": ")" + attack + R"(", "polar": {"K": 6, "T": 2}},
  "data": {"dim": 32, "per_class": 600, "test_size": 200, "attacker_val_size": 200, "hidden": [12, 8]},
  "seeds": [0, 1],
  "output_dir": ")" + out.generic_string() + R"("
})";
}

}  // namespace

TEST(ParseConfig, EmptyFileGivesDefaults) {
  TempDir t;
  const auto cfg = parse_config(t.write("empty.json", "  \n"));
  EXPECT_EQ(cfg.sim.total_clients, 100U);
  EXPECT_EQ(cfg.sim.per_round, 10U);
  EXPECT_EQ(cfg.sim.malicious_fraction, 0.1);
  EXPECT_EQ(cfg.sim.local_epochs, 2);
  EXPECT_EQ(cfg.sim.client_lr, 0.1);
  EXPECT_EQ(cfg.attack.polar.lambda, 10.0);
  EXPECT_EQ(cfg.attack.polar.batch_size, 50U);
  EXPECT_EQ(cfg.attack.polar.steps, 10);
  EXPECT_EQ(cfg.attack.polar.lr, 0.01);
  EXPECT_EQ(cfg.seeds, (std::vector<std::uint64_t>{0, 1, 2, 3, 4}));
  EXPECT_EQ(parse_config(t.write("obj.json", "{}")).sim.rounds, cfg.sim.rounds);
}

TEST(ParseConfig, ErrorsNameTheKey) {
  TempDir t;
  EXPECT_NE(error_of(t.write("c.json", R"({"sim": {"malicious_fraction": 0.6}})")).find("malicious_fraction"),
            std::string::npos);
  EXPECT_NE(error_of(t.write("u.json", R"({"foo": 1})")).find("foo"), std::string::npos);
  EXPECT_NE(error_of(t.write("n.json", R"({"attack": {"polar": {"bar": 1}}})")).find("attack.polar.bar"),
            std::string::npos);
  EXPECT_NE(error_of(t.write("ty.json", R"({"sim": {"rounds": "many"}})")).find("sim.rounds"), std::string::npos);
  EXPECT_NE(error_of(t.write("fr.json", R"({"sim": {"rounds": 2.5}})")).find("sim.rounds"), std::string::npos);
  EXPECT_NE(error_of(t.write("neg.json", R"({"sim": {"total_clients": -3}})")).find("sim.total_clients"),
            std::string::npos);
  EXPECT_NE(error_of(t.write("k.json", R"({"defense": {"kind": "krum"}})")).find("krum"), std::string::npos);
  EXPECT_NE(error_of(t.write("bad.json", "{ not json")).find("not valid JSON"), std::string::npos);
  EXPECT_NE(error_of(t.path() / "missing.json").find("cannot open"), std::string::npos);
  EXPECT_FALSE(error_of(t.write("dup.json", R"({"seeds": [1, 1]})")).empty());
  EXPECT_FALSE(error_of(t.write("mk.json", R"({"defense": {"kind": "multikrum", "multikrum_m": 11}})")).empty());
}

TEST(ParseConfig, RoundTripsThroughJson) {
  TempDir t;
  const auto cfg = parse_config(t.write("c.json", small_config(t.path() / "out", "flame", "lp")));
  EXPECT_EQ(cfg.defense.kind, defense_kind::flame);
  EXPECT_EQ(cfg.attack.kind, attack_kind::lp);
  EXPECT_EQ(cfg.attack.polar.batch_size, 6U);
  EXPECT_EQ(cfg.data.hidden, (std::vector<std::size_t>{12, 8}));
  EXPECT_EQ(cfg.sim.pool, pool_mode::fixed_pool);
  const auto again = parse_config(t.write("again.json", to_json(cfg).dump()));
  EXPECT_EQ(to_json(again), to_json(cfg));
}

TEST(Csv, RoundsRoundTrip) {
  round_record a;
  a.round = 0;
  a.benign_ids = {1, 4};
  a.malicious_ids = {7};
  a.accepted_ids = {1, 7};
  a.accuracy = 0.1 + 0.2;
  a.bsr = 1.0 / 3.0;
  a.mask = selection_mask::from_index(5, 4);
  a.policy_logits = {-0.125, 3e-17};
  a.attacker_baseline_bsr = 0.875;
  round_record b;
  b.round = 1;
  b.benign_ids = {2, 3};
  b.accepted_ids = {3};
  b.accuracy = 0.5;
  b.bsr = 0.0;
  const std::vector<round_record> rs = {a, b};
  const auto text = rounds_csv(rs);
  EXPECT_EQ(text.substr(0, text.find('\n')), rounds_header);
  const auto back = parse_rounds_csv(text);
  ASSERT_EQ(back.size(), 2U);
  for (std::size_t i = 0; i < 2; ++i) {
    EXPECT_EQ(back[i].round, rs[i].round);
    EXPECT_EQ(back[i].benign_ids, rs[i].benign_ids);
    EXPECT_EQ(back[i].malicious_ids, rs[i].malicious_ids);
    EXPECT_EQ(back[i].accepted_ids, rs[i].accepted_ids);
    EXPECT_EQ(back[i].accuracy, rs[i].accuracy);
    EXPECT_EQ(back[i].bsr, rs[i].bsr);
    EXPECT_EQ(back[i].mask, rs[i].mask);
    EXPECT_EQ(back[i].policy_logits, rs[i].policy_logits);
    EXPECT_EQ(back[i].attacker_baseline_bsr, rs[i].attacker_baseline_bsr);
  }
  EXPECT_EQ(rounds_csv(back), text);
  EXPECT_THROW(parse_rounds_csv("nope\n"), input_error);
}

TEST(Summary, RoundTripAndStatistics) {
  seed_summary s{3, "flame", "polar", 2, {}};
  s.metrics.acc = 0.9;
  s.metrics.absr = 0.1 + 0.2;
  s.metrics.bbsr = 0.7;
  s.metrics.bar = 2.0 / 3.0;
  s.metrics.bsr_trajectory = {0.1, 0.7};
  EXPECT_EQ(parse_summary(to_json(s).dump(2)), s);
  EXPECT_TRUE(to_json(s)["mar"].is_null());
  s.metrics.mar = 0.25;
  EXPECT_EQ(parse_summary(to_json(s).dump()), s);
  EXPECT_THROW(parse_summary("{}"), input_error);
  EXPECT_THROW(parse_summary("[1"), input_error);

  const std::vector<double> xs = {1, 2, 3, 4};
  const auto st = mean_and_std(xs);
  ASSERT_TRUE(st);
  EXPECT_EQ(st->mean, 2.5);
  EXPECT_NEAR(st->std, std::sqrt(5.0 / 3.0), 1e-15);
  EXPECT_EQ(mean_and_std(std::vector<double>{7})->std, 0.0);
  EXPECT_FALSE(mean_and_std(std::vector<double>{}).has_value());
  EXPECT_EQ(parse_real(format_real(0.1 + 0.2)), 0.1 + 0.2);
}

TEST(RunConfig, WritesArtifactsAndIsByteIdentical) {
  TempDir t;
  auto cfg = parse_config(t.write("c.json", small_config(t.path() / "a")));
  std::ostringstream log;
  const auto res = run_config(cfg, log);
  ASSERT_TRUE(res.ok()) << log.str();
  EXPECT_EQ(res.completed.size(), 2U);
  for (const char* f : {"config.json", "aggregate.json", "seed_0/rounds.csv", "seed_0/summary.json",
                        "seed_0/timing.json", "seed_1/summary.json"}) {
    EXPECT_TRUE(fs::exists(t.path() / "a" / f)) << f;
  }
  EXPECT_FALSE(fs::exists(t.path() / "a" / "seed_0" / "summary.json.tmp"));

  // Summary metrics are recomputable from rounds.csv alone.
  const auto recs = parse_rounds_csv(read_file(t.path() / "a" / "seed_0" / "rounds.csv"));
  EXPECT_EQ(recs.size(), 3U);
  const auto again = summarize(recs);
  const auto s = parse_summary(read_file(t.path() / "a" / "seed_0" / "summary.json"));
  EXPECT_EQ(s.metrics, again);

  cfg.output_dir = (t.path() / "b").string();
  std::ostringstream log2;
  ASSERT_TRUE(run_config(cfg, log2).ok());
  for (const char* f : {"aggregate.json", "seed_0/rounds.csv", "seed_0/summary.json", "seed_1/rounds.csv",
                        "seed_1/summary.json"}) {
    EXPECT_EQ(read_file(t.path() / "a" / f), read_file(t.path() / "b" / f)) << f;
  }
}

TEST(RunConfig, FailedSeedIsRecordedAndRunContinues) {
  TempDir t;
  auto cfg = parse_config(t.write("c.json", small_config(t.path() / "out")));
  cfg.data.source = "csv";
  cfg.data.csv_path = (t.path() / "absent.csv").string();
  std::ostringstream log;
  const auto res = run_config(cfg, log);
  EXPECT_FALSE(res.ok());
  EXPECT_EQ(res.failures.size(), 2U);
  EXPECT_TRUE(res.completed.empty());
  const auto agg = json::parse(read_file(t.path() / "out" / "aggregate.json"));
  EXPECT_EQ(agg["failed_seeds"], json::array({0, 1}));
  EXPECT_NE(log.str().find("failed"), std::string::npos);
}

TEST(RunConfig, UnwritableOutputIsConfigError) {
  TempDir t;
  auto cfg = parse_config(t.write("c.json", small_config(t.path() / "out")));
  t.write("blocker", "x");
  cfg.output_dir = (t.path() / "blocker" / "sub").string();
  std::ostringstream log;
  EXPECT_THROW(run_config(cfg, log), config_error);
}

TEST(Report, GroupsRecomputesAndListsCorruptFiles) {
  TempDir t;
  std::ostringstream log;
  ASSERT_TRUE(run_config(parse_config(t.write("a.json", small_config(t.path() / "runs" / "mk"))), log).ok());
  ASSERT_TRUE(run_config(parse_config(t.write("b.json", small_config(t.path() / "runs" / "fa", "fedavg", "lp"))), log)
                  .ok());
  fs::create_directories(t.path() / "runs" / "junk");
  t.write("runs/junk/summary.json", "{ broken");

  std::ostringstream out;
  const auto res = report(t.path() / "runs", out);
  ASSERT_EQ(res.rows.size(), 2U);
  EXPECT_EQ(res.rows[0].defense, "fedavg");
  EXPECT_EQ(res.rows[0].attack, "lp");
  EXPECT_EQ(res.rows[1].defense, "multikrum");
  EXPECT_EQ(res.rows[1].seeds.size(), 2U);
  ASSERT_EQ(res.bad_files.size(), 1U);
  EXPECT_EQ(res.bad_files[0].first.filename(), "summary.json");
  EXPECT_NE(out.str().find("multikrum"), std::string::npos);
  EXPECT_NE(out.str().find("±"), std::string::npos);

  // Stats in report.json match a direct recomputation from the summaries.
  const auto rep = json::parse(read_file(t.path() / "runs" / "report.json"));
  EXPECT_EQ(rep["unreadable"].size(), 1U);
  const auto& mk = rep["rows"][1]["metrics"]["absr"];
  const double a0 = res.rows[1].seeds[0].metrics.absr, a1 = res.rows[1].seeds[1].metrics.absr;
  EXPECT_NEAR(mk["mean"].get<double>(), (a0 + a1) / 2, 1e-15);
  EXPECT_NEAR(mk["std"].get<double>(), std::abs(a0 - a1) / std::sqrt(2.0), 1e-15);

  EXPECT_THROW(report(t.path() / "nowhere", out), input_error);
  fs::create_directories(t.path() / "empty");
  EXPECT_THROW(report(t.path() / "empty", out), input_error);
}
