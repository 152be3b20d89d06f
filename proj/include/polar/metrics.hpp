#pragma once

#include <algorithm>
#include <map>
#include <optional>
#include <span>
#include <utility>
#include <vector>

#include "polar/dataset.hpp"
#include "polar/errors.hpp"
#include "polar/nn.hpp"
#include "polar/records.hpp"

namespace polar {

struct metrics_report {
  double acc = 0.0;
  double absr = 0.0;
  double bbsr = 0.0;
  std::optional<double> mar;  // absent when no round scheduled an attacker
  double bar = 0.0;
  std::vector<double> bsr_trajectory;

  friend bool operator==(const metrics_report&, const metrics_report&) = default;
};

// Fraction of argmax-correct predictions.
inline double accuracy(const model_params& model, const labeled_dataset& test) {
  if (test.empty()) throw input_error("accuracy: empty test set");
  const auto pred = predict(model, test.features());
  std::size_t hit = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) hit += pred[i] == test.label(i);
  return static_cast<double>(hit) / static_cast<double>(pred.size());
}

// Backdoor success rate on a set built by build_backdoor_testset, where every
// label is the target class; this is the same count as accuracy().
inline double bsr(const model_params& model, const labeled_dataset& backdoor_test) {
  if (backdoor_test.empty()) throw input_error("bsr: empty backdoor test set");
  return accuracy(model, backdoor_test);
}

// Mean and max over the last min(window, size) entries.
inline std::pair<double, double> absr_bbsr(std::span<const double> trajectory, std::size_t window = 10) {
  if (trajectory.empty()) throw input_error("absr_bbsr: empty trajectory");
  if (window == 0) throw config_error("absr_bbsr: window must be positive");
  const std::size_t n = std::min(window, trajectory.size());
  auto tail = trajectory.subspan(trajectory.size() - n);
  double sum = 0.0;
  double best = tail.front();
  for (double v : tail) {
    sum += v;
    best = std::max(best, v);
  }
  return {sum / static_cast<double>(n), best};
}

struct acceptance_rates {
  std::optional<double> mar;
  double bar = 0.0;
};

// MAR: attacked rounds where at least one scheduled attacker was accepted,
// over rounds with at least one scheduled attacker. BAR: per benign client,
// accepted rounds over scheduled rounds, averaged across benign clients.
inline acceptance_rates mar_bar(std::span<const round_record> records) {
  if (records.empty()) throw input_error("mar_bar: no round records");
  std::size_t attacked = 0, bypassed = 0;
  std::map<client_id, std::pair<std::size_t, std::size_t>> benign;  // id -> (scheduled, accepted)
  for (const auto& r : records) {
    if (!r.malicious_ids.empty()) {
      ++attacked;
      if (r.accepted_malicious() > 0) ++bypassed;
    }
    for (client_id b : r.benign_ids) {
      auto& [sched, acc] = benign[b];
      ++sched;
      acc += std::find(r.accepted_ids.begin(), r.accepted_ids.end(), b) != r.accepted_ids.end();
    }
  }
  acceptance_rates out;
  if (attacked > 0) out.mar = static_cast<double>(bypassed) / static_cast<double>(attacked);
  if (!benign.empty()) {
    double s = 0.0;
    for (const auto& [id, c] : benign) s += static_cast<double>(c.second) / static_cast<double>(c.first);
    out.bar = s / static_cast<double>(benign.size());
  }
  return out;
}

}  // namespace polar
