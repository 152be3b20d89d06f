#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "polar/errors.hpp"
#include "polar/tensor.hpp"

namespace polar {

// Feature vectors with integer class labels in [0, num_classes).
class labeled_dataset {
 public:
  labeled_dataset() = default;
  labeled_dataset(matrix features, std::vector<int> labels, int num_classes)
      : features_(std::move(features)), labels_(std::move(labels)), num_classes_(num_classes) {
    if (features_.rows() != labels_.size()) throw shape_error("dataset: feature rows and labels differ in count");
    if (num_classes_ < 1) throw config_error("dataset: num_classes must be positive");
    for (int y : labels_) {
      if (y < 0 || y >= num_classes_) throw input_error("dataset: label outside [0, num_classes)");
    }
  }

  std::size_t size() const { return labels_.size(); }
  bool empty() const { return labels_.empty(); }
  std::size_t dim() const { return features_.cols(); }
  int num_classes() const { return num_classes_; }

  const matrix& features() const { return features_; }
  const std::vector<int>& labels() const { return labels_; }
  std::span<const double> features(std::size_t i) const { return features_.row(i); }
  int label(std::size_t i) const { return labels_[i]; }

  labeled_dataset subset(std::span<const std::size_t> indices) const {
    matrix f(0, dim());
    std::vector<int> y;
    y.reserve(indices.size());
    f.values().reserve(indices.size() * dim());
    for (std::size_t i : indices) {
      if (i >= size()) throw input_error("dataset: subset index out of range");
      f.append_row(features_.row(i));
      y.push_back(labels_[i]);
    }
    return {std::move(f), std::move(y), num_classes_};
  }

  friend bool operator==(const labeled_dataset&, const labeled_dataset&) = default;

 private:
  matrix features_;
  std::vector<int> labels_;
  int num_classes_ = 1;
};

}  // namespace polar
