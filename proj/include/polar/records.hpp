#pragma once

#include <optional>
#include <string>
#include <vector>

#include "polar/nn.hpp"

namespace polar {

using client_id = std::size_t;

// Model delta submitted by one client in one round.
struct client_update {
  client_id id = 0;
  bool malicious = false;
  update_vector delta;
};

// Log entry of one communication round.
struct round_record {
  int round = 0;
  std::vector<client_id> benign_ids;
  std::vector<client_id> malicious_ids;
  std::vector<client_id> accepted_ids;
  double accuracy = 0.0;
  double bsr = 0.0;
  std::optional<selection_mask> mask;      // layer-wise attacks only
  std::vector<double> policy_logits;       // POLAR only
  std::optional<double> attacker_baseline_bsr;
  double wall_seconds = 0.0;
  double attacker_seconds = 0.0;

  std::size_t accepted_malicious() const {
    std::size_t n = 0;
    for (client_id a : accepted_ids) {
      for (client_id m : malicious_ids) n += (a == m);
    }
    return n;
  }
};

}  // namespace polar
