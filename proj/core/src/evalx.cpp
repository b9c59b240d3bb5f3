#include "mmpda/evalx.hpp"

#include <nlohmann/json.hpp>

#include "mmpda/errors.hpp"
#include "mmpda/losses.hpp"

namespace mmpda::evalx {

Metrics accuracy_f1(const std::vector<int>& predictions,
                    const std::vector<int>& labels, int positive) {
  if (predictions.size() != labels.size()) {
    throw ContractError("accuracy_f1: " + std::to_string(predictions.size()) +
                        " predictions for " + std::to_string(labels.size()) +
                        " labels");
  }
  if (labels.empty()) throw ContractError("accuracy_f1: empty input");
  Metrics m;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const bool pred_pos = predictions[i] == positive;
    const bool true_pos = labels[i] == positive;
    if (pred_pos && true_pos) ++m.tp;
    else if (pred_pos) ++m.fp;
    else if (true_pos) ++m.fn;
    else ++m.tn;
  }
  m.accuracy = static_cast<double>(m.tp + m.tn) / static_cast<double>(m.total());
  const std::size_t denom = 2 * m.tp + m.fp + m.fn;
  m.f1 = denom == 0 ? 0.0 : 2.0 * static_cast<double>(m.tp) / static_cast<double>(denom);
  return m;
}

std::vector<int> argmax_rows(const nd::Tensor& scores) {
  std::vector<int> out(scores.rows());
  for (std::size_t r = 0; r < scores.rows(); ++r) {
    std::size_t best = 0;
    for (std::size_t c = 1; c < scores.cols(); ++c)
      if (scores.at(r, c) > scores.at(r, best)) best = c;
    out[r] = static_cast<int>(best);
  }
  return out;
}

GapMatrix domain_gap_matrix(
    const std::vector<std::pair<std::string, nd::Tensor>>& feature_sets) {
  if (feature_sets.size() < 2) {
    throw ContractError("domain_gap_matrix: need at least two domains");
  }
  const std::size_t width = feature_sets.front().second.cols();
  for (const auto& [id, batch] : feature_sets) {
    if (batch.cols() != width) {
      throw ContractError("domain_gap_matrix: domain '" + id + "' has width " +
                          std::to_string(batch.cols()) + ", expected " +
                          std::to_string(width));
    }
  }
  const std::size_t k = feature_sets.size();
  GapMatrix g;
  g.matrix.assign(k, std::vector<double>(k, 0.0));
  for (const auto& [id, batch] : feature_sets) g.domains.push_back(id);
  for (std::size_t i = 0; i < k; ++i)
    for (std::size_t j = i + 1; j < k; ++j) {
      const double c = losses::coral_value(feature_sets[i].second, feature_sets[j].second);
      g.matrix[i][j] = c;
      g.matrix[j][i] = c;
    }
  return g;
}

nlohmann::json to_json(const Metrics& m) {
  return {{"accuracy", m.accuracy},
          {"f1", m.f1},
          {"confusion", {{"tp", m.tp}, {"fp", m.fp}, {"tn", m.tn}, {"fn", m.fn}}}};
}

nlohmann::json to_json(const GapMatrix& g) {
  return {{"domains", g.domains}, {"matrix", g.matrix}};
}

}  // namespace mmpda::evalx
