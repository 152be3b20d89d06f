#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <vector>

#include <gtest/gtest.h>

#include "polar/data.hpp"
#include "polar/metrics.hpp"
#include "polar/nn.hpp"

using namespace polar;

namespace {

labeled_dataset balanced(int classes, std::size_t per_class, std::size_t dim = 30) {
  matrix f(0, dim);
  std::vector<int> y;
  std::vector<double> row(dim, 0.5);
  for (std::size_t i = 0; i < per_class; ++i) {
    for (int c = 0; c < classes; ++c) {
      f.append_row(row);
      y.push_back(c);
    }
  }
  return {std::move(f), std::move(y), classes};
}

// Group of a client under round-robin assignment.
std::size_t group_of(std::size_t client, int classes) { return client % static_cast<std::size_t>(classes); }

}  // namespace

TEST(Synthetic, ZeroSpreadCollapsesClasses) {
  const auto d = generate_synthetic(2, 30, 20, 0.0, 1);
  for (std::size_t i = 0; i < d.size(); ++i) {
    for (std::size_t j = 0; j < d.size(); ++j) {
      if (d.label(i) != d.label(j)) continue;
      const auto a = d.features(i), b = d.features(j);
      EXPECT_TRUE(std::equal(a.begin(), a.end(), b.begin()));
    }
  }
}

TEST(Synthetic, DeterministicAndBounded) {
  const auto a = generate_synthetic(3, 40, 50, 0.3, 9);
  EXPECT_EQ(a, generate_synthetic(3, 40, 50, 0.3, 9));
  EXPECT_FALSE(a == generate_synthetic(3, 40, 50, 0.3, 10));
  EXPECT_EQ(a.size(), 150U);
  for (double v : a.features().values()) {
    EXPECT_GE(v, 0.0);
    EXPECT_LE(v, 1.0);
  }
}

TEST(Synthetic, RejectsTooFewDimensions) {
  EXPECT_THROW(generate_synthetic(3, 25, 10, 0.1, 1), config_error);
  EXPECT_NO_THROW(generate_synthetic(3, 26, 10, 0.1, 1));
  EXPECT_THROW(generate_synthetic(1, 32, 10, 0.1, 1), config_error);
}

TEST(Synthetic, TwoLayerModelLearnsFixtureTask) {
  const auto full = generate_synthetic(3, 32, 200, 0.1, 3);
  auto [test, train] = split_dataset(full, 150, 4);
  const std::vector<std::size_t> hidden = {16};
  const auto m0 = init_model(arch_spec::mlp(32, hidden, 3), 5);
  const auto trained = train_local(m0, train, {60, 0.2, 16}, 6);
  EXPECT_GE(accuracy(trained.model, test), 0.9);
}

TEST(Partition, UniformQGivesUniformHistograms) {
  const int m = 3;
  const auto data = balanced(m, 3334);
  const auto plan = partition_noniid(data, 30, 1.0 / m, 11);
  // Chi-square over the group x label table against the uniform expectation.
  std::vector<std::vector<double>> table(m, std::vector<double>(m, 0.0));
  for (std::size_t c = 0; c < plan.num_clients(); ++c) {
    for (std::size_t i : plan.client_indices[c]) table[group_of(c, m)][static_cast<std::size_t>(data.label(i))] += 1;
  }
  double chi = 0.0;
  for (int g = 0; g < m; ++g) {
    double row = 0.0;
    for (int l = 0; l < m; ++l) row += table[g][l];
    for (int l = 0; l < m; ++l) {
      const double expect = row / m;
      chi += (table[g][l] - expect) * (table[g][l] - expect) / expect;
    }
  }
  EXPECT_LT(chi, 13.277);  // 99th percentile of chi-square with 4 dof
}

TEST(Partition, FullSkewIsolatesLabels) {
  const auto data = balanced(3, 200);
  const auto plan = partition_noniid(data, 9, 1.0, 12);
  for (std::size_t c = 0; c < plan.num_clients(); ++c) {
    for (std::size_t i : plan.client_indices[c]) EXPECT_EQ(static_cast<std::size_t>(data.label(i)), group_of(c, 3));
  }
}

TEST(Partition, HalfSkewFrequency) {
  const auto data = balanced(3, 3334);
  const auto plan = partition_noniid(data, 30, 0.5, 13);
  std::size_t home = 0, total = 0;
  for (std::size_t c = 0; c < plan.num_clients(); ++c) {
    for (std::size_t i : plan.client_indices[c]) {
      home += static_cast<std::size_t>(data.label(i)) == group_of(c, 3);
      ++total;
    }
  }
  EXPECT_NEAR(static_cast<double>(home) / static_cast<double>(total), 0.5, 0.03);
}

TEST(Partition, DisjointCoveringSweep) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const int m = 2 + static_cast<int>(seed % 4);
    const std::size_t clients = static_cast<std::size_t>(m) + seed % 7;
    const double q = 1.0 / m + (1.0 - 1.0 / m) * static_cast<double>(seed % 5) / 4.0;
    const auto data = balanced(m, 60 + seed);
    const auto plan = partition_noniid(data, clients, q, seed);
    std::vector<int> seen(data.size(), 0);
    for (const auto& idx : plan.client_indices) {
      EXPECT_FALSE(idx.empty());
      for (std::size_t i : idx) ++seen[i];
    }
    for (int s : seen) EXPECT_EQ(s, 1) << "seed " << seed;
    const auto w = plan.data_weights();
    EXPECT_NEAR(std::accumulate(w.begin(), w.end(), 0.0), 1.0, 1e-12);
  }
}

TEST(Partition, RejectsBadArguments) {
  const auto data = balanced(3, 50);
  EXPECT_THROW(partition_noniid(data, 10, 0.2, 1), config_error);
  EXPECT_THROW(partition_noniid(data, 10, 1.1, 1), config_error);
  EXPECT_THROW(partition_noniid(data, 2, 0.5, 1), config_error);
  EXPECT_THROW(partition_noniid(balanced(3, 1), 30, 0.5, 1), input_error);
  EXPECT_EQ(partition_noniid(data, 10, 0.5, 4).client_indices, partition_noniid(data, 10, 0.5, 4).client_indices);
}

TEST(Trigger, ApplyIsIdempotentAndLocal) {
  trigger_spec t;
  for (std::size_t i = 0; i < 25; ++i) t.patch_indices.push_back(i);
  std::vector<double> x(40);
  for (std::size_t i = 0; i < x.size(); ++i) x[i] = 0.01 * static_cast<double>(i);
  const auto once = apply_trigger(x, t);
  EXPECT_EQ(apply_trigger(once, t), once);
  for (std::size_t i = 0; i < 25; ++i) EXPECT_EQ(once[i], 1.0);
  for (std::size_t i = 25; i < 40; ++i) EXPECT_EQ(once[i], x[i]);
}

TEST(Trigger, TailPatchAndValidation) {
  const auto t = trigger_spec::tail_patch(64);
  ASSERT_EQ(t.patch_indices.size(), 25U);
  EXPECT_EQ(t.patch_indices.front(), 39U);
  EXPECT_EQ(t.patch_indices.back(), 63U);
  EXPECT_THROW(trigger_spec::tail_patch(10), config_error);
  trigger_spec dup{{1, 1}, 1.0, 0};
  EXPECT_THROW(dup.validate(10), config_error);
  trigger_spec out{{12}, 1.0, 0};
  EXPECT_THROW(out.validate(10), config_error);
}

TEST(Poison, FractionSemantics) {
  const auto data = generate_synthetic(3, 30, 34, 0.2, 2).subset([] {
    std::vector<std::size_t> idx(100);
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    return idx;
  }());
  const auto trig = trigger_spec::tail_patch(30, 25, 1.0, 0);
  EXPECT_EQ(poison_dataset(data, trig, 0.0, 1), data);
  const auto all = poison_dataset(data, trig, 1.0, 1);
  for (std::size_t i = 0; i < all.size(); ++i) EXPECT_EQ(all.label(i), 0);

  const auto half = poison_dataset(data, trig, 0.5, 1);
  ASSERT_EQ(half.size(), data.size());
  std::size_t changed = 0;
  for (std::size_t i = 0; i < data.size(); ++i) {
    const auto a = data.features(i), b = half.features(i);
    if (std::equal(a.begin(), a.end(), b.begin()) && data.label(i) == half.label(i)) continue;
    ++changed;
    const auto expect = apply_trigger(a, trig);
    EXPECT_TRUE(std::equal(expect.begin(), expect.end(), b.begin()));
    EXPECT_EQ(half.label(i), 0);
  }
  // a triggered row always differs: no synthetic row is 1.0 across the whole patch
  EXPECT_EQ(changed, 50U);
  EXPECT_EQ(half, poison_dataset(data, trig, 0.5, 1));
  EXPECT_THROW(poison_dataset(data, trig, 1.5, 1), config_error);
}

TEST(BackdoorSet, DropsTargetClassAndRelabels) {
  const auto test = generate_synthetic(3, 30, 20, 0.2, 5);
  const auto trig = trigger_spec::tail_patch(30, 25, 1.0, 1);
  const auto bd = build_backdoor_testset(test, trig);
  std::size_t targets = 0;
  for (std::size_t i = 0; i < test.size(); ++i) targets += test.label(i) == 1;
  EXPECT_EQ(bd.size(), test.size() - targets);
  for (std::size_t i = 0; i < bd.size(); ++i) {
    EXPECT_EQ(bd.label(i), 1);
    for (std::size_t j : trig.patch_indices) EXPECT_EQ(bd.features(i)[j], 1.0);
  }
  std::vector<std::size_t> ones;
  for (std::size_t i = 0; i < test.size(); ++i) {
    if (test.label(i) == 1) ones.push_back(i);
  }
  EXPECT_THROW(build_backdoor_testset(test.subset(ones), trig), input_error);
}

TEST(Csv, LoadsAndValidates) {
  const auto dir = std::filesystem::temp_directory_path() / "polar_csv_test";
  std::filesystem::create_directories(dir);
  const auto good = dir / "good.csv";
  std::ofstream(good) << "f0,f1,label\n0.1,0.2,0\n0.3,0.4,2\n";
  const auto d = load_csv(good.string());
  EXPECT_EQ(d.size(), 2U);
  EXPECT_EQ(d.dim(), 2U);
  EXPECT_EQ(d.num_classes(), 3);
  EXPECT_EQ(d.label(1), 2);
  EXPECT_EQ(d.features(1)[0], 0.3);

  const auto bad_range = dir / "range.csv";
  std::ofstream(bad_range) << "f0,label\n1.5,0\n";
  EXPECT_THROW(load_csv(bad_range.string()), input_error);
  const auto ragged = dir / "ragged.csv";
  std::ofstream(ragged) << "f0,f1,label\n0.1,0.2,0\n0.3,1\n";
  EXPECT_THROW(load_csv(ragged.string()), input_error);
  EXPECT_THROW(load_csv((dir / "missing.csv").string()), input_error);
  EXPECT_THROW(load_csv(good.string(), 2), input_error);
  std::filesystem::remove_all(dir);
}
