#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "mpthcl/tensor.hpp"

namespace mpthcl {

struct Metrics {
  double accuracy = 0.0;
  double weighted_f1 = 0.0;
  std::vector<double> per_class_f1;
  std::vector<std::vector<std::size_t>> confusion;  // [true][predicted]
  std::size_t total = 0;

  bool operator==(const Metrics&) const = default;
};

/// F1 per class is 2PR/(P+R), or 0 when undefined. The weighted average uses
/// true-class support, so classes absent from `labels` weigh nothing.
inline Metrics compute_metrics(std::span<const int> labels, std::span<const int> predicted, std::size_t classes) {
  if (labels.size() != predicted.size())
    throw ShapeError("compute_metrics: " + std::to_string(labels.size()) + " labels vs " +
                     std::to_string(predicted.size()) + " predictions");
  if (labels.empty()) throw ShapeError("compute_metrics: empty evaluation set");
  Metrics m;
  m.total = labels.size();
  m.confusion.assign(classes, std::vector<std::size_t>(classes, 0));
  for (std::size_t i = 0; i < labels.size(); ++i) {
    for (int v : {labels[i], predicted[i]})
      if (v < 0 || static_cast<std::size_t>(v) >= classes)
        throw ShapeError("compute_metrics: class " + std::to_string(v) + " out of range");
    ++m.confusion[labels[i]][predicted[i]];
  }
  std::size_t correct = 0;
  m.per_class_f1.assign(classes, 0.0);
  for (std::size_t c = 0; c < classes; ++c) {
    correct += m.confusion[c][c];
    std::size_t support = 0, predicted_c = 0;
    for (std::size_t k = 0; k < classes; ++k) {
      support += m.confusion[c][k];
      predicted_c += m.confusion[k][c];
    }
    const double tp = static_cast<double>(m.confusion[c][c]);
    const double p = predicted_c ? tp / predicted_c : 0.0;
    const double r = support ? tp / support : 0.0;
    m.per_class_f1[c] = p + r > 0 ? 2 * p * r / (p + r) : 0.0;
    m.weighted_f1 += static_cast<double>(support) / m.total * m.per_class_f1[c];
  }
  m.accuracy = static_cast<double>(correct) / m.total;
  return m;
}

}  // namespace mpthcl
