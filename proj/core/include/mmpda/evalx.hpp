#pragma once

#include <cstddef>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "mmpda/ndgraph.hpp"

namespace mmpda::evalx {

struct Metrics {
  double accuracy = 0.0;
  double f1 = 0.0;
  std::size_t tp = 0;
  std::size_t fp = 0;
  std::size_t tn = 0;
  std::size_t fn = 0;

  std::size_t total() const { return tp + fp + tn + fn; }
};

// F1 is 2 tp / (2 tp + fp + fn), or 0 when that denominator is 0.
Metrics accuracy_f1(const std::vector<int>& predictions,
                    const std::vector<int>& labels, int positive = 1);

// Argmax per row, ties to the lower index.
std::vector<int> argmax_rows(const nd::Tensor& scores);

struct GapMatrix {
  std::vector<std::string> domains;
  std::vector<std::vector<double>> matrix;
};

// Pairwise correlation-alignment distances between domain feature batches,
// in the given order. Symmetric with an exactly zero diagonal.
GapMatrix domain_gap_matrix(
    const std::vector<std::pair<std::string, nd::Tensor>>& feature_sets);

nlohmann::json to_json(const Metrics& m);
nlohmann::json to_json(const GapMatrix& g);

}  // namespace mmpda::evalx
