#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <memory>
#include <numeric>
#include <span>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "polar/dataset.hpp"
#include "polar/errors.hpp"
#include "polar/rng.hpp"
#include "polar/tensor.hpp"

namespace polar {

enum class activation { relu, identity, softmax };

struct layer_spec {
  std::string name;
  std::size_t in_dim = 0;
  std::size_t out_dim = 0;
  activation act = activation::relu;

  friend bool operator==(const layer_spec&, const layer_spec&) = default;
};

// Ordered dense layers. A softmax activation is only meaningful on the head:
// forward() emits its pre-softmax scores and the loss applies the softmax.
class arch_spec {
 public:
  arch_spec() = default;
  explicit arch_spec(std::vector<layer_spec> layers) : layers_(std::move(layers)) { validate(); }

  // Builds an MLP in -> hidden... -> classes, layers named fc1..fcN.
  static arch_spec mlp(std::size_t in_dim, std::span<const std::size_t> hidden, std::size_t classes) {
    std::vector<layer_spec> layers;
    std::size_t prev = in_dim;
    for (std::size_t h : hidden) {
      layers.push_back({"fc" + std::to_string(layers.size() + 1), prev, h, activation::relu});
      prev = h;
    }
    layers.push_back({"fc" + std::to_string(layers.size() + 1), prev, classes, activation::softmax});
    return arch_spec(std::move(layers));
  }

  std::size_t num_layers() const { return layers_.size(); }
  const layer_spec& layer(std::size_t i) const { return layers_[i]; }
  const std::vector<layer_spec>& layers() const { return layers_; }
  std::size_t input_dim() const { return layers_.front().in_dim; }
  std::size_t output_dim() const { return layers_.back().out_dim; }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& l : layers_) n += l.out_dim * l.in_dim + l.out_dim;
    return n;
  }

  friend bool operator==(const arch_spec&, const arch_spec&) = default;

 private:
  void validate() const {
    if (layers_.size() < 2) throw config_error("arch: at least 2 layers required");
    std::unordered_set<std::string> names;
    for (std::size_t i = 0; i < layers_.size(); ++i) {
      const auto& l = layers_[i];
      if (l.in_dim == 0 || l.out_dim == 0) throw config_error("arch: layer '" + l.name + "' has a zero dimension");
      if (!names.insert(l.name).second) throw config_error("arch: duplicate layer name '" + l.name + "'");
      if (i + 1 < layers_.size() && l.out_dim != layers_[i + 1].in_dim) {
        throw config_error("arch: out_dim of '" + l.name + "' does not match in_dim of '" + layers_[i + 1].name + "'");
      }
      if (l.act == activation::softmax && i + 1 != layers_.size()) {
        throw config_error("arch: softmax activation only allowed on the last layer");
      }
    }
  }

  std::vector<layer_spec> layers_;
};

// Binary layer-selection vector; bit l set means layer l is taken from the donor.
class selection_mask {
 public:
  selection_mask() = default;
  explicit selection_mask(std::size_t n, bool value = false) : bits_(n, value ? 1 : 0) {}
  explicit selection_mask(std::vector<std::uint8_t> bits) : bits_(std::move(bits)) {
    for (auto& b : bits_) b = b ? 1 : 0;
  }

  static selection_mask from_index(std::uint64_t code, std::size_t n) {
    selection_mask m(n);
    for (std::size_t l = 0; l < n; ++l) m.set(l, (code >> l) & 1U);
    return m;
  }

  static selection_mask single(std::size_t n, std::size_t l) {
    selection_mask m(n);
    m.set(l, true);
    return m;
  }

  std::size_t size() const { return bits_.size(); }
  bool operator[](std::size_t l) const { return bits_[l] != 0; }
  void set(std::size_t l, bool v) { bits_[l] = v ? 1 : 0; }
  std::size_t count() const { return static_cast<std::size_t>(std::count(bits_.begin(), bits_.end(), 1)); }
  bool none() const { return count() == 0; }
  bool all() const { return count() == bits_.size(); }

  // Bit l of the returned code is mask[l]; valid for up to 64 layers.
  std::uint64_t to_index() const {
    std::uint64_t code = 0;
    for (std::size_t l = 0; l < bits_.size() && l < 64; ++l) code |= static_cast<std::uint64_t>(bits_[l]) << l;
    return code;
  }

  std::string to_string() const {
    std::string s;
    for (auto b : bits_) s.push_back(b ? '1' : '0');
    return s;
  }

  friend bool operator==(const selection_mask&, const selection_mask&) = default;

 private:
  std::vector<std::uint8_t> bits_;
};

struct layer_values {
  std::vector<double> weights;  // out_dim x in_dim, row-major
  std::vector<double> bias;     // out_dim

  friend bool operator==(const layer_values&, const layer_values&) = default;
};

namespace detail {
struct model_tag {};
struct update_tag {};
}  // namespace detail

// Per-layer weights and biases bound to an architecture. Instantiated as
// model_params (absolute weights) and update_vector (deltas).
template <typename Tag>
class layered_params {
 public:
  layered_params() = default;
  explicit layered_params(std::shared_ptr<const arch_spec> arch) : arch_(std::move(arch)) {
    if (!arch_) throw config_error("params: null architecture");
    layers_.reserve(arch_->num_layers());
    for (const auto& l : arch_->layers()) {
      layers_.push_back({std::vector<double>(l.out_dim * l.in_dim, 0.0), std::vector<double>(l.out_dim, 0.0)});
    }
  }

  const arch_spec& arch() const { return *arch_; }
  const std::shared_ptr<const arch_spec>& arch_ptr() const { return arch_; }
  std::size_t num_layers() const { return layers_.size(); }
  layer_values& layer(std::size_t l) { return layers_[l]; }
  const layer_values& layer(std::size_t l) const { return layers_[l]; }

  bool same_arch(const arch_spec& other) const { return arch_ && *arch_ == other; }

  // Layer by layer, weights then bias.
  std::vector<double> flatten() const {
    std::vector<double> out;
    out.reserve(arch_->parameter_count());
    for (const auto& l : layers_) {
      out.insert(out.end(), l.weights.begin(), l.weights.end());
      out.insert(out.end(), l.bias.begin(), l.bias.end());
    }
    return out;
  }

  static layered_params unflatten(std::shared_ptr<const arch_spec> arch, std::span<const double> flat) {
    layered_params p(std::move(arch));
    if (flat.size() != p.arch().parameter_count()) throw shape_error("unflatten: length does not match parameter count");
    std::size_t off = 0;
    for (auto& l : p.layers_) {
      std::copy_n(flat.begin() + static_cast<std::ptrdiff_t>(off), l.weights.size(), l.weights.begin());
      off += l.weights.size();
      std::copy_n(flat.begin() + static_cast<std::ptrdiff_t>(off), l.bias.size(), l.bias.begin());
      off += l.bias.size();
    }
    return p;
  }

  bool all_finite() const {
    for (const auto& l : layers_) {
      for (double v : l.weights) if (!std::isfinite(v)) return false;
      for (double v : l.bias) if (!std::isfinite(v)) return false;
    }
    return true;
  }

  double norm() const {
    double s = 0.0;
    for (const auto& l : layers_) {
      for (double v : l.weights) s += v * v;
      for (double v : l.bias) s += v * v;
    }
    return std::sqrt(s);
  }

  friend bool operator==(const layered_params& a, const layered_params& b) {
    return a.arch_ && b.arch_ && *a.arch_ == *b.arch_ && a.layers_ == b.layers_;
  }

 private:
  std::shared_ptr<const arch_spec> arch_;
  std::vector<layer_values> layers_;
};

using model_params = layered_params<detail::model_tag>;
using update_vector = layered_params<detail::update_tag>;

namespace detail {

template <typename A, typename B>
void require_same_arch(const A& a, const B& b, const char* what) {
  if (a.num_layers() == 0 || b.num_layers() == 0 || !(a.arch() == b.arch())) {
    throw shape_error(std::string(what) + ": architectures differ");
  }
}

inline void apply_activation(activation act, std::span<double> v) {
  if (act == activation::relu) {
    for (double& x : v) x = x > 0.0 ? x : 0.0;
  }
}

}  // namespace detail

inline model_params init_model(const arch_spec& arch, std::uint64_t seed) {
  model_params m(std::make_shared<const arch_spec>(arch));
  rng gen(derive_seed(seed, {0x1a17}));
  for (std::size_t l = 0; l < arch.num_layers(); ++l) {
    const auto& spec = arch.layer(l);
    const double limit = std::sqrt(6.0 / static_cast<double>(spec.in_dim + spec.out_dim));
    for (double& w : m.layer(l).weights) w = gen.uniform(-limit, limit);
  }
  return m;
}

// Pre-softmax class scores, one row per input.
inline matrix forward(const model_params& model, const matrix& inputs) {
  const auto& arch = model.arch();
  if (inputs.cols() != arch.input_dim()) throw shape_error("forward: input dimension does not match first layer");
  matrix cur = inputs;
  for (std::size_t l = 0; l < arch.num_layers(); ++l) {
    const auto& spec = arch.layer(l);
    const auto& p = model.layer(l);
    matrix next(cur.rows(), spec.out_dim);
    for (std::size_t r = 0; r < cur.rows(); ++r) {
      auto x = cur.row(r);
      auto y = next.row(r);
      for (std::size_t o = 0; o < spec.out_dim; ++o) {
        const double* w = p.weights.data() + o * spec.in_dim;
        double s = p.bias[o];
        for (std::size_t i = 0; i < spec.in_dim; ++i) s += w[i] * x[i];
        y[o] = s;
      }
      detail::apply_activation(spec.act, y);
    }
    cur = std::move(next);
  }
  return cur;
}

// Index of the largest score; ties go to the lowest class id.
inline int argmax(std::span<const double> scores) {
  std::size_t best = 0;
  for (std::size_t c = 1; c < scores.size(); ++c) {
    if (scores[c] > scores[best]) best = c;
  }
  return static_cast<int>(best);
}

inline std::vector<int> predict(const model_params& model, const matrix& inputs) {
  const matrix scores = forward(model, inputs);
  std::vector<int> out(scores.rows());
  for (std::size_t r = 0; r < scores.rows(); ++r) out[r] = argmax(scores.row(r));
  return out;
}

struct loss_and_gradient {
  double loss = 0.0;
  update_vector gradient;
};

// Mean softmax cross-entropy over the selected rows and its gradient w.r.t. all parameters.
inline loss_and_gradient cross_entropy_gradient(const model_params& model, const labeled_dataset& data,
                                                std::span<const std::size_t> rows) {
  const auto& arch = model.arch();
  const std::size_t nl = arch.num_layers();
  if (data.dim() != arch.input_dim()) throw shape_error("train: feature dimension does not match first layer");
  if (static_cast<std::size_t>(data.num_classes()) > arch.output_dim()) {
    throw shape_error("train: more classes than output units");
  }
  loss_and_gradient out{0.0, update_vector(model.arch_ptr())};
  if (rows.empty()) return out;
  const double inv_b = 1.0 / static_cast<double>(rows.size());

  std::vector<std::vector<double>> acts(nl + 1);
  std::vector<double> delta, prev_delta;
  for (std::size_t r : rows) {
    auto x = data.features(r);
    acts[0].assign(x.begin(), x.end());
    for (std::size_t l = 0; l < nl; ++l) {
      const auto& spec = arch.layer(l);
      const auto& p = model.layer(l);
      auto& y = acts[l + 1];
      y.assign(spec.out_dim, 0.0);
      for (std::size_t o = 0; o < spec.out_dim; ++o) {
        const double* w = p.weights.data() + o * spec.in_dim;
        double s = p.bias[o];
        for (std::size_t i = 0; i < spec.in_dim; ++i) s += w[i] * acts[l][i];
        y[o] = s;
      }
      detail::apply_activation(spec.act, y);
    }

    const auto& logits = acts[nl];
    const double mx = *std::max_element(logits.begin(), logits.end());
    double z = 0.0;
    for (double v : logits) z += std::exp(v - mx);
    const double log_z = mx + std::log(z);
    const int y = data.label(r);
    out.loss += (log_z - logits[static_cast<std::size_t>(y)]) * inv_b;

    delta.resize(logits.size());
    for (std::size_t c = 0; c < logits.size(); ++c) {
      delta[c] = (std::exp(logits[c] - log_z) - (static_cast<int>(c) == y ? 1.0 : 0.0)) * inv_b;
    }
    for (std::size_t l = nl; l-- > 0;) {
      const auto& spec = arch.layer(l);
      const auto& p = model.layer(l);
      auto& g = out.gradient.layer(l);
      const auto& in = acts[l];
      for (std::size_t o = 0; o < spec.out_dim; ++o) {
        g.bias[o] += delta[o];
        double* gw = g.weights.data() + o * spec.in_dim;
        for (std::size_t i = 0; i < spec.in_dim; ++i) gw[i] += delta[o] * in[i];
      }
      if (l == 0) break;
      prev_delta.assign(spec.in_dim, 0.0);
      for (std::size_t o = 0; o < spec.out_dim; ++o) {
        const double* w = p.weights.data() + o * spec.in_dim;
        for (std::size_t i = 0; i < spec.in_dim; ++i) prev_delta[i] += w[i] * delta[o];
      }
      if (arch.layer(l - 1).act == activation::relu) {
        for (std::size_t i = 0; i < spec.in_dim; ++i) {
          if (in[i] <= 0.0) prev_delta[i] = 0.0;
        }
      }
      std::swap(delta, prev_delta);
    }
  }
  return out;
}

inline double cross_entropy_loss(const model_params& model, const labeled_dataset& data) {
  if (data.empty()) throw input_error("loss: empty dataset");
  const matrix scores = forward(model, data.features());
  double total = 0.0;
  for (std::size_t r = 0; r < scores.rows(); ++r) {
    auto s = scores.row(r);
    const double mx = *std::max_element(s.begin(), s.end());
    double z = 0.0;
    for (double v : s) z += std::exp(v - mx);
    total += mx + std::log(z) - s[static_cast<std::size_t>(data.label(r))];
  }
  return total / static_cast<double>(scores.rows());
}

struct train_config {
  int epochs = 2;
  double lr = 0.1;
  std::size_t batch_size = 32;
};

struct train_result {
  model_params model;
  double final_loss = 0.0;
};

// Mini-batch SGD on softmax cross-entropy. The shuffle order of epoch e is a
// function of (seed, e) only.
inline train_result train_local(const model_params& model, const labeled_dataset& data, const train_config& cfg,
                                std::uint64_t seed) {
  if (data.empty()) throw input_error("train_local: empty dataset");
  if (cfg.epochs < 0) throw config_error("train_local: epochs must be nonnegative");
  if (!(cfg.lr > 0.0)) throw config_error("train_local: learning rate must be positive");
  if (cfg.batch_size == 0) throw config_error("train_local: batch size must be positive");
  if (data.dim() != model.arch().input_dim()) throw shape_error("train_local: feature dimension does not match first layer");

  train_result res{model, 0.0};
  std::vector<std::size_t> order(data.size());
  for (int e = 0; e < cfg.epochs; ++e) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    rng gen(derive_seed(seed, {0x7a41, static_cast<std::uint64_t>(e)}));
    gen.shuffle(std::span<std::size_t>(order));

    double epoch_loss = 0.0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t len = std::min(cfg.batch_size, order.size() - start);
      std::span<const std::size_t> batch(order.data() + start, len);
      auto lg = cross_entropy_gradient(res.model, data, batch);
      if (!std::isfinite(lg.loss)) throw numerical_error("train_local: non-finite loss in epoch " + std::to_string(e));
      epoch_loss += lg.loss * static_cast<double>(len);
      for (std::size_t l = 0; l < res.model.num_layers(); ++l) {
        auto& p = res.model.layer(l);
        const auto& g = lg.gradient.layer(l);
        for (std::size_t i = 0; i < p.weights.size(); ++i) p.weights[i] -= cfg.lr * g.weights[i];
        for (std::size_t i = 0; i < p.bias.size(); ++i) p.bias[i] -= cfg.lr * g.bias[i];
      }
    }
    res.final_loss = epoch_loss / static_cast<double>(order.size());
  }
  if (!res.model.all_finite()) throw numerical_error("train_local: parameters became non-finite");
  return res;
}

inline model_params replace_layers(const model_params& base, const model_params& donor, const selection_mask& mask) {
  detail::require_same_arch(base, donor, "replace_layers");
  if (mask.size() != base.num_layers()) throw shape_error("replace_layers: mask length does not match layer count");
  model_params out = base;
  for (std::size_t l = 0; l < mask.size(); ++l) {
    if (mask[l]) out.layer(l) = donor.layer(l);
  }
  return out;
}

inline update_vector model_delta(const model_params& model, const model_params& reference) {
  detail::require_same_arch(model, reference, "model_delta");
  update_vector d(model.arch_ptr());
  for (std::size_t l = 0; l < model.num_layers(); ++l) {
    const auto& a = model.layer(l);
    const auto& b = reference.layer(l);
    auto& o = d.layer(l);
    for (std::size_t i = 0; i < a.weights.size(); ++i) o.weights[i] = a.weights[i] - b.weights[i];
    for (std::size_t i = 0; i < a.bias.size(); ++i) o.bias[i] = a.bias[i] - b.bias[i];
  }
  return d;
}

inline model_params apply_aggregate(const model_params& global, const update_vector& aggregate) {
  detail::require_same_arch(global, aggregate, "apply_aggregate");
  model_params out = global;
  for (std::size_t l = 0; l < out.num_layers(); ++l) {
    auto& p = out.layer(l);
    const auto& u = aggregate.layer(l);
    for (std::size_t i = 0; i < p.weights.size(); ++i) p.weights[i] += u.weights[i];
    for (std::size_t i = 0; i < p.bias.size(); ++i) p.bias[i] += u.bias[i];
  }
  if (!out.all_finite()) throw numerical_error("apply_aggregate: non-finite global model");
  return out;
}

}  // namespace polar
