#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "polar/errors.hpp"
#include "polar/nn.hpp"
#include "polar/records.hpp"
#include "polar/rng.hpp"

namespace polar {

enum class defense_kind { fedavg, multikrum, fltrust, rlr, flame };

inline std::string to_string(defense_kind k) {
  switch (k) {
    case defense_kind::fedavg: return "fedavg";
    case defense_kind::multikrum: return "multikrum";
    case defense_kind::fltrust: return "fltrust";
    case defense_kind::rlr: return "rlr";
    case defense_kind::flame: return "flame";
  }
  return "unknown";
}

inline defense_kind parse_defense_kind(const std::string& s) {
  if (s == "fedavg") return defense_kind::fedavg;
  if (s == "multikrum") return defense_kind::multikrum;
  if (s == "fltrust") return defense_kind::fltrust;
  if (s == "rlr") return defense_kind::rlr;
  if (s == "flame") return defense_kind::flame;
  throw config_error("unknown defense kind '" + s + "'");
}

struct defense_config {
  defense_kind kind = defense_kind::fedavg;
  int mk_f = 2;
  int mk_m = 4;
  int rlr_threshold = 4;
  double rlr_server_lr = 1.0;
  double flame_noise = 0.001;
  int flame_min_cluster = 0;  // 0 = n/2 + 1 for n submitted updates
  std::size_t fltrust_root_size = 300;

  void validate() const {
    if (mk_f < 0) throw config_error("defense.multikrum_f must be nonnegative");
    if (mk_m < 1) throw config_error("defense.multikrum_m must be positive");
    if (rlr_threshold < 0) throw config_error("defense.rlr_threshold must be nonnegative");
    if (!(rlr_server_lr > 0.0)) throw config_error("defense.rlr_server_lr must be positive");
    if (!(flame_noise >= 0.0)) throw config_error("defense.flame_noise must be nonnegative");
    if (flame_min_cluster < 0) throw config_error("defense.flame_min_cluster must be nonnegative");
    if (kind == defense_kind::fltrust && fltrust_root_size == 0) throw config_error("defense.fltrust_root_size must be positive");
  }
};

struct aggregation_result {
  update_vector aggregate;
  std::vector<client_id> accepted_ids;  // ascending
  std::map<client_id, double> per_client_weight;
  bool fallback = false;
};

namespace detail {

// Update indices sorted by client id so that sums do not depend on submission order.
inline std::vector<std::size_t> canonical_order(std::span<const client_update> updates) {
  std::vector<std::size_t> order(updates.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return updates[a].id < updates[b].id; });
  for (std::size_t i = 1; i < order.size(); ++i) {
    if (updates[order[i]].id == updates[order[i - 1]].id) throw input_error("aggregate: duplicate client id");
  }
  return order;
}

inline void check_updates(std::span<const client_update> updates, const char* what) {
  if (updates.empty()) throw input_error(std::string(what) + ": no updates submitted");
  for (const auto& u : updates) require_same_arch(updates.front().delta, u.delta, what);
}

inline double dot(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

inline double squared_distance(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    s += d * d;
  }
  return s;
}

inline double cosine(std::span<const double> a, std::span<const double> b) {
  const double na = std::sqrt(dot(a, a));
  const double nb = std::sqrt(dot(b, b));
  if (na == 0.0 || nb == 0.0) return 0.0;
  return dot(a, b) / (na * nb);
}

inline double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

// Weighted sum over `order` of flattened updates.
inline update_vector weighted_sum(std::span<const client_update> updates, std::span<const std::size_t> order,
                                  std::span<const double> weight_by_index) {
  const auto& arch = updates.front().delta.arch_ptr();
  std::vector<double> acc(arch->parameter_count(), 0.0);
  for (std::size_t i : order) {
    const double w = weight_by_index[i];
    if (w == 0.0) continue;
    const auto flat = updates[i].delta.flatten();
    for (std::size_t d = 0; d < acc.size(); ++d) acc[d] += w * flat[d];
  }
  return update_vector::unflatten(arch, acc);
}

inline aggregation_result finish(std::span<const client_update> updates, std::span<const std::size_t> order,
                                 std::vector<double> weights) {
  aggregation_result res;
  res.aggregate = weighted_sum(updates, order, weights);
  for (std::size_t i : order) {
    res.per_client_weight[updates[i].id] = weights[i];
    if (weights[i] > 0.0) res.accepted_ids.push_back(updates[i].id);
  }
  return res;
}

}  // namespace detail

// Weighted mean with weights normalised to sum to one; every client accepted.
inline aggregation_result fedavg(std::span<const client_update> updates, std::span<const double> data_weights) {
  detail::check_updates(updates, "fedavg");
  if (data_weights.size() != updates.size()) throw shape_error("fedavg: one weight per update required");
  double total = 0.0;
  for (double w : data_weights) {
    if (!(w >= 0.0)) throw config_error("fedavg: weights must be nonnegative");
    total += w;
  }
  if (!(total > 0.0)) throw config_error("fedavg: weights must not all be zero");
  const auto order = detail::canonical_order(updates);
  std::vector<double> w(updates.size());
  for (std::size_t i = 0; i < w.size(); ++i) w[i] = data_weights[i] / total;
  auto res = detail::finish(updates, order, std::move(w));
  res.accepted_ids.clear();
  for (std::size_t i : order) res.accepted_ids.push_back(updates[i].id);
  return res;
}

// Krum score of a client: sum of squared distances to its n - f - 2 nearest
// other updates. The m lowest-scoring clients are averaged.
inline aggregation_result multikrum(std::span<const client_update> updates, int f, int m) {
  detail::check_updates(updates, "multikrum");
  const std::size_t n = updates.size();
  if (f < 0 || n < static_cast<std::size_t>(f) + 3) throw config_error("multikrum: requires n >= f + 3");
  if (m < 1 || static_cast<std::size_t>(m) > n) throw config_error("multikrum: requires 1 <= m <= n");
  const auto order = detail::canonical_order(updates);

  std::vector<std::vector<double>> flat(n);
  for (std::size_t i = 0; i < n; ++i) flat[i] = updates[i].delta.flatten();
  std::vector<std::vector<double>> dist(n, std::vector<double>(n, 0.0));
  for (std::size_t a = 0; a < n; ++a) {
    for (std::size_t b = a + 1; b < n; ++b) dist[a][b] = dist[b][a] = detail::squared_distance(flat[a], flat[b]);
  }
  const std::size_t nearest = n - static_cast<std::size_t>(f) - 2;
  std::vector<double> score(n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<double> d;
    d.reserve(n - 1);
    for (std::size_t j = 0; j < n; ++j) {
      if (j != i) d.push_back(dist[i][j]);
    }
    std::partial_sort(d.begin(), d.begin() + static_cast<std::ptrdiff_t>(nearest), d.end());
    for (std::size_t k = 0; k < nearest; ++k) score[i] += d[k];
  }

  std::vector<std::size_t> ranked = order;
  std::stable_sort(ranked.begin(), ranked.end(), [&](std::size_t a, std::size_t b) { return score[a] < score[b]; });
  std::vector<double> w(n, 0.0);
  for (int k = 0; k < m; ++k) w[ranked[static_cast<std::size_t>(k)]] = 1.0 / m;
  return detail::finish(updates, order, std::move(w));
}

// Trust = max(0, cos(update, server_update)); updates are rescaled to the
// server update's norm and trust-weighted.
inline aggregation_result fltrust(std::span<const client_update> updates, const update_vector& server_update) {
  detail::check_updates(updates, "fltrust");
  detail::require_same_arch(updates.front().delta, server_update, "fltrust");
  const auto ref = server_update.flatten();
  const double ref_norm = std::sqrt(detail::dot(ref, ref));
  if (!(ref_norm > 0.0)) throw config_error("fltrust: server update is zero");
  const auto order = detail::canonical_order(updates);

  const std::size_t n = updates.size();
  std::vector<double> trust(n, 0.0), w(n, 0.0);
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const auto u = updates[i].delta.flatten();
    trust[i] = std::max(0.0, detail::cosine(u, ref));
    total += trust[i];
  }
  aggregation_result res;
  std::vector<double> acc(ref.size(), 0.0);
  for (std::size_t i : order) {
    if (total > 0.0) w[i] = trust[i] / total;
    res.per_client_weight[updates[i].id] = w[i];
    if (w[i] <= 0.0) continue;
    res.accepted_ids.push_back(updates[i].id);
    const auto u = updates[i].delta.flatten();
    const double scale = w[i] * ref_norm / std::sqrt(detail::dot(u, u));
    for (std::size_t d = 0; d < acc.size(); ++d) acc[d] += scale * u[d];
  }
  res.aggregate = update_vector::unflatten(server_update.arch_ptr(), acc);
  return res;
}

// Robust learning rate: per coordinate, if |sum_i sign(u_i[d])| < threshold the
// server learning rate is negated. Clients are never excluded.
inline aggregation_result rlr(std::span<const client_update> updates, int threshold, double server_lr) {
  detail::check_updates(updates, "rlr");
  if (threshold < 0) throw config_error("rlr: threshold must be nonnegative");
  const auto order = detail::canonical_order(updates);
  const std::size_t n = updates.size();
  const auto dims = updates.front().delta.arch().parameter_count();
  std::vector<double> mean(dims, 0.0);
  std::vector<long> signs(dims, 0);
  for (std::size_t i : order) {
    const auto u = updates[i].delta.flatten();
    for (std::size_t d = 0; d < dims; ++d) {
      mean[d] += u[d];
      signs[d] += (u[d] > 0.0) - (u[d] < 0.0);
    }
  }
  for (std::size_t d = 0; d < dims; ++d) {
    const double lr = std::labs(signs[d]) >= threshold ? server_lr : -server_lr;
    mean[d] = lr * mean[d] / static_cast<double>(n);
  }
  aggregation_result res;
  res.aggregate = update_vector::unflatten(updates.front().delta.arch_ptr(), mean);
  for (std::size_t i : order) {
    res.accepted_ids.push_back(updates[i].id);
    res.per_client_weight[updates[i].id] = 1.0 / static_cast<double>(n);
  }
  return res;
}

// Clients retained by FLAME's clustering step. Single linkage under cosine
// distance. With fewer than 2 * min_cluster updates only one component can
// reach min_cluster; it keeps absorbing clients as the linkage distance grows,
// and the dendrogram is cut just below the largest jump in that component's
// merge distances, so late joiners separated by a wide gap are left out.
// Distances within level_tol of each other count as one level (rounding noise
// on parallel updates must not create a cut). Returned as indices into `updates`.
inline std::vector<std::size_t> flame_cluster(std::span<const client_update> updates, std::size_t min_cluster) {
  constexpr double level_tol = 1e-9;
  const std::size_t n = updates.size();
  const auto order = detail::canonical_order(updates);
  if (min_cluster <= 1 || n <= 1) return {order.begin(), order.end()};
  std::vector<std::vector<double>> flat(n);
  for (std::size_t i = 0; i < n; ++i) flat[i] = updates[i].delta.flatten();

  struct edge {
    double d;
    std::size_t a, b;
  };
  std::vector<edge> edges;
  for (std::size_t a = 0; a < n; ++a) {
    for (std::size_t b = a + 1; b < n; ++b) edges.push_back({1.0 - detail::cosine(flat[a], flat[b]), a, b});
  }
  std::stable_sort(edges.begin(), edges.end(), [](const edge& x, const edge& y) { return x.d < y.d; });

  std::vector<std::size_t> parent(n), size(n, 1);
  std::iota(parent.begin(), parent.end(), std::size_t{0});
  auto find = [&](std::size_t x) {
    while (parent[x] != x) x = parent[x] = parent[parent[x]];
    return x;
  };
  auto members_of = [&](std::size_t root) {
    std::vector<std::size_t> m;
    for (std::size_t i : order) {
      if (find(i) == root) m.push_back(i);
    }
    return m;
  };

  // Snapshots of the dominant component each time it grows: (level, members).
  std::vector<std::pair<double, std::vector<std::size_t>>> growth;
  for (std::size_t e = 0; e < edges.size();) {
    // All edges at one level merge together, so ties do not depend on input order.
    const double level = edges[e].d;
    for (; e < edges.size() && edges[e].d <= level + level_tol; ++e) {
      std::size_t ra = find(edges[e].a), rb = find(edges[e].b);
      if (ra == rb) continue;
      if (size[ra] < size[rb]) std::swap(ra, rb);
      parent[rb] = ra;
      size[ra] += size[rb];
    }
    std::optional<std::size_t> best;
    for (std::size_t i : order) {
      const std::size_t r = find(i);
      if (size[r] >= min_cluster && (!best || size[r] > size[*best])) best = r;
    }
    if (best && (growth.empty() || size[*best] > growth.back().second.size())) growth.push_back({level, members_of(*best)});
    if (best && size[*best] == n) break;
  }
  if (growth.empty()) return {};

  std::size_t cut = growth.size() - 1;
  double widest = level_tol;
  for (std::size_t i = 1; i < growth.size(); ++i) {
    const double gap = growth[i].first - growth[i - 1].first;
    if (gap > widest) {
      widest = gap;
      cut = i - 1;
    }
  }
  return growth[cut].second;
}

// Cluster filter, clipping to the median norm of retained updates, mean, and
// Gaussian noise with stddev noise_sigma * median norm drawn from `noise_seed`.
inline aggregation_result flame(std::span<const client_update> updates, int min_cluster, double noise_sigma,
                                std::uint64_t noise_seed) {
  detail::check_updates(updates, "flame");
  const std::size_t n = updates.size();
  const std::size_t mc = min_cluster > 0 ? static_cast<std::size_t>(min_cluster) : n / 2 + 1;
  if (n < mc) throw config_error("flame: fewer updates than the minimal cluster size");
  if (!(noise_sigma >= 0.0)) throw config_error("flame: noise must be nonnegative");
  const auto order = detail::canonical_order(updates);

  aggregation_result res;
  auto kept = flame_cluster(updates, mc);
  if (kept.empty()) {
    kept.assign(order.begin(), order.end());
    res.fallback = true;
  }
  std::vector<double> norms;
  for (std::size_t i : kept) norms.push_back(updates[i].delta.norm());
  const double clip = detail::median(norms);

  const auto dims = updates.front().delta.arch().parameter_count();
  std::vector<double> acc(dims, 0.0);
  std::vector<bool> is_kept(n, false);
  for (std::size_t i : kept) is_kept[i] = true;
  for (std::size_t i : order) {
    const double w = is_kept[i] ? 1.0 / static_cast<double>(kept.size()) : 0.0;
    res.per_client_weight[updates[i].id] = w;
    if (!is_kept[i]) continue;
    res.accepted_ids.push_back(updates[i].id);
    const auto u = updates[i].delta.flatten();
    const double norm = std::sqrt(detail::dot(u, u));
    const double scale = norm > clip && norm > 0.0 ? clip / norm : 1.0;
    for (std::size_t d = 0; d < dims; ++d) acc[d] += w * scale * u[d];
  }
  if (noise_sigma > 0.0) {
    rng gen(derive_seed(noise_seed, {0xf1a3}));
    const double sd = noise_sigma * clip;
    for (double& v : acc) v += gen.normal(0.0, sd);
  }
  res.aggregate = update_vector::unflatten(updates.front().delta.arch_ptr(), acc);
  return res;
}

// Dispatch on the configured defense. `server_update` is required for FLTrust.
inline aggregation_result aggregate(const defense_config& cfg, std::span<const client_update> updates,
                                    std::span<const double> data_weights, const std::optional<update_vector>& server_update,
                                    std::uint64_t round_seed) {
  cfg.validate();
  switch (cfg.kind) {
    case defense_kind::fedavg: return fedavg(updates, data_weights);
    case defense_kind::multikrum: return multikrum(updates, cfg.mk_f, cfg.mk_m);
    case defense_kind::fltrust:
      if (!server_update) throw config_error("fltrust: server update missing");
      return fltrust(updates, *server_update);
    case defense_kind::rlr: return rlr(updates, cfg.rlr_threshold, cfg.rlr_server_lr);
    case defense_kind::flame: return flame(updates, cfg.flame_min_cluster, cfg.flame_noise, round_seed);
  }
  throw config_error("aggregate: unknown defense");
}

}  // namespace polar
