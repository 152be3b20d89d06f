#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <numeric>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "polar/dataset.hpp"
#include "polar/errors.hpp"
#include "polar/rng.hpp"

namespace polar {

// Backdoor trigger: a fixed set of feature indices overwritten with one value.
struct trigger_spec {
  std::vector<std::size_t> patch_indices;
  double patch_value = 1.0;
  int target_label = 0;

  // The last `size` feature indices, the flat-vector analogue of a corner patch.
  static trigger_spec tail_patch(std::size_t dim, std::size_t size = 25, double value = 1.0, int target = 0) {
    if (size > dim) throw config_error("trigger: patch larger than feature dimension");
    trigger_spec t;
    t.patch_value = value;
    t.target_label = target;
    for (std::size_t i = dim - size; i < dim; ++i) t.patch_indices.push_back(i);
    return t;
  }

  void validate(std::size_t dim) const {
    if (!(patch_value >= 0.0 && patch_value <= 1.0)) throw config_error("trigger: patch_value must lie in [0,1]");
    std::unordered_set<std::size_t> seen;
    for (std::size_t i : patch_indices) {
      if (i >= dim) throw config_error("trigger: patch index outside feature dimension");
      if (!seen.insert(i).second) throw config_error("trigger: duplicate patch index");
    }
  }
};

struct partition_plan {
  std::vector<std::vector<std::size_t>> client_indices;
  double q = 1.0;

  std::size_t num_clients() const { return client_indices.size(); }

  // Relative data sizes p^(i).
  std::vector<double> data_weights() const {
    std::vector<double> w(client_indices.size());
    double total = 0.0;
    for (const auto& c : client_indices) total += static_cast<double>(c.size());
    for (std::size_t i = 0; i < w.size(); ++i) w[i] = static_cast<double>(client_indices[i].size()) / total;
    return w;
  }
};

// Gaussian class blobs clipped to [0,1]^dim. The last `reserved_dims`
// features (where the trigger patch goes) share one background mean across
// classes, so class signal lives only in the leading features.
inline labeled_dataset generate_synthetic(int classes, std::size_t dim, std::size_t per_class, double spread,
                                          std::uint64_t seed, std::size_t reserved_dims = 25) {
  if (classes < 2) throw config_error("generate_synthetic: at least 2 classes required");
  if (dim < reserved_dims + 1) throw config_error("generate_synthetic: dim too small for the configured trigger");
  if (spread < 0.0) throw config_error("generate_synthetic: spread must be nonnegative");

  rng mean_gen(derive_seed(seed, {0xda7a, 0}));
  std::vector<std::vector<double>> means(static_cast<std::size_t>(classes), std::vector<double>(dim));
  for (auto& m : means) {
    for (std::size_t j = 0; j < dim - reserved_dims; ++j) m[j] = mean_gen.uniform(0.2, 0.8);
  }
  for (std::size_t j = dim - reserved_dims; j < dim; ++j) {
    const double background = mean_gen.uniform(0.2, 0.8);
    for (auto& m : means) m[j] = background;
  }

  rng gen(derive_seed(seed, {0xda7a, 1}));
  matrix features(0, dim);
  features.values().reserve(static_cast<std::size_t>(classes) * per_class * dim);
  std::vector<int> labels;
  std::vector<double> row(dim);
  for (std::size_t i = 0; i < per_class; ++i) {
    for (int c = 0; c < classes; ++c) {
      const auto& m = means[static_cast<std::size_t>(c)];
      for (std::size_t j = 0; j < dim; ++j) row[j] = std::clamp(m[j] + spread * gen.normal(), 0.0, 1.0);
      features.append_row(row);
      labels.push_back(c);
    }
  }
  return {std::move(features), std::move(labels), classes};
}

// Shuffles and splits into (first `count` examples, remainder).
inline std::pair<labeled_dataset, labeled_dataset> split_dataset(const labeled_dataset& data, std::size_t count,
                                                                 std::uint64_t seed) {
  if (count > data.size()) throw config_error("split_dataset: count exceeds dataset size");
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  rng gen(derive_seed(seed, {0x5b17}));
  gen.shuffle(std::span<std::size_t>(order));
  std::vector<std::size_t> head(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(count));
  std::vector<std::size_t> tail(order.begin() + static_cast<std::ptrdiff_t>(count), order.end());
  return {data.subset(head), data.subset(tail)};
}

// Label-skew partition: clients form num_classes groups round-robin; a label-l
// example lands in group l with probability q, otherwise in one of the other
// groups uniformly, then in a uniformly chosen client of that group.
inline partition_plan partition_noniid(const labeled_dataset& data, std::size_t clients, double q, std::uint64_t seed) {
  const int m = data.num_classes();
  if (m < 2) throw config_error("partition_noniid: at least 2 classes required");
  const auto groups = static_cast<std::size_t>(m);
  if (clients < groups) throw config_error("partition_noniid: fewer clients than classes");
  if (!(q >= 1.0 / m - 1e-12 && q <= 1.0)) throw config_error("partition_noniid: q must lie in [1/M, 1]");

  std::vector<std::vector<std::size_t>> members(groups);
  for (std::size_t c = 0; c < clients; ++c) members[c % groups].push_back(c);

  partition_plan plan;
  plan.q = q;
  plan.client_indices.resize(clients);
  rng gen(derive_seed(seed, {0x9a27}));
  for (std::size_t i = 0; i < data.size(); ++i) {
    const auto l = static_cast<std::size_t>(data.label(i));
    std::size_t g = l;
    if (!gen.bernoulli(q)) {
      const std::size_t k = static_cast<std::size_t>(gen.below(groups - 1));
      g = k < l ? k : k + 1;
    }
    const auto& grp = members[g];
    plan.client_indices[grp[gen.below(grp.size())]].push_back(i);
  }
  for (std::size_t c = 0; c < clients; ++c) {
    if (plan.client_indices[c].empty()) {
      throw input_error("partition_noniid: client " + std::to_string(c) + " received no data; dataset too small");
    }
  }
  return plan;
}

inline std::vector<double> apply_trigger(std::span<const double> features, const trigger_spec& trig) {
  std::vector<double> out(features.begin(), features.end());
  for (std::size_t i : trig.patch_indices) {
    if (i >= out.size()) throw config_error("apply_trigger: patch index outside feature dimension");
    out[i] = trig.patch_value;
  }
  return out;
}

// Triggers and relabels round(fraction * |data|) examples chosen by seed.
inline labeled_dataset poison_dataset(const labeled_dataset& data, const trigger_spec& trig, double fraction,
                                      std::uint64_t seed) {
  if (!(fraction >= 0.0 && fraction <= 1.0)) throw config_error("poison_dataset: fraction must lie in [0,1]");
  trig.validate(data.dim());
  if (trig.target_label < 0 || trig.target_label >= data.num_classes()) {
    throw config_error("poison_dataset: target label outside class range");
  }
  const auto count = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(data.size())));
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  rng gen(derive_seed(seed, {0xbad0}));
  gen.shuffle(std::span<std::size_t>(order));

  matrix f = data.features();
  std::vector<int> y = data.labels();
  for (std::size_t k = 0; k < count; ++k) {
    const std::size_t i = order[k];
    auto row = f.row(i);
    for (std::size_t j : trig.patch_indices) row[j] = trig.patch_value;
    y[i] = trig.target_label;
  }
  return {std::move(f), std::move(y), data.num_classes()};
}

// Triggered copies of every non-target example, all labelled as the target.
inline labeled_dataset build_backdoor_testset(const labeled_dataset& test, const trigger_spec& trig) {
  if (test.empty()) throw input_error("build_backdoor_testset: empty test set");
  trig.validate(test.dim());
  matrix f(0, test.dim());
  std::vector<int> y;
  for (std::size_t i = 0; i < test.size(); ++i) {
    if (test.label(i) == trig.target_label) continue;
    f.append_row(apply_trigger(test.features(i), trig));
    y.push_back(trig.target_label);
  }
  if (y.empty()) throw input_error("build_backdoor_testset: every example already belongs to the target class");
  return {std::move(f), std::move(y), test.num_classes()};
}

// CSV with a header row, `dim` feature columns and a trailing integer label.
// Feature values must lie in [0,1].
inline labeled_dataset load_csv(const std::string& path, int num_classes = 0) {
  std::ifstream in(path);
  if (!in) throw input_error("load_csv: cannot open '" + path + "'");
  std::string line;
  if (!std::getline(in, line)) throw input_error("load_csv: '" + path + "' is missing its header row");

  matrix f;
  std::vector<int> y;
  std::vector<double> row;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    row.clear();
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) {
      try {
        std::size_t used = 0;
        row.push_back(std::stod(cell, &used));
      } catch (const std::exception&) {
        throw input_error("load_csv: line " + std::to_string(line_no) + ": bad number '" + cell + "'");
      }
    }
    if (row.size() < 2) throw input_error("load_csv: line " + std::to_string(line_no) + ": need features and a label");
    const double label = row.back();
    row.pop_back();
    if (label != std::floor(label) || label < 0) {
      throw input_error("load_csv: line " + std::to_string(line_no) + ": label must be a nonnegative integer");
    }
    for (double v : row) {
      if (!(v >= 0.0 && v <= 1.0)) throw input_error("load_csv: line " + std::to_string(line_no) + ": feature outside [0,1]");
    }
    if (!f.empty() && row.size() != f.cols()) {
      throw input_error("load_csv: line " + std::to_string(line_no) + ": inconsistent column count");
    }
    f.append_row(row);
    y.push_back(static_cast<int>(label));
  }
  if (y.empty()) throw input_error("load_csv: '" + path + "' has no examples");
  const int max_label = *std::max_element(y.begin(), y.end());
  if (num_classes == 0) num_classes = max_label + 1;
  if (max_label >= num_classes) throw input_error("load_csv: label exceeds declared class count");
  return {std::move(f), std::move(y), num_classes};
}

}  // namespace polar
