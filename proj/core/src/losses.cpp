#include "mmpda/losses.hpp"

#include <algorithm>
#include <cmath>
#include <map>

#include <nlohmann/json.hpp>

#include "mmpda/errors.hpp"

namespace mmpda::losses {

using nd::Graph;
using nd::Shape;
using nd::Tensor;
using nd::Var;

void AdaptWeights::validate() const {
  for (double w : {alpha, beta, gamma, eta, lambda}) {
    if (!std::isfinite(w) || w < 0.0) {
      throw ContractError("adaptation weights must be finite and >= 0");
    }
  }
}

nlohmann::json to_json(const LossBreakdown& b) {
  return {{"task", b.task},       {"coral", b.coral},
          {"mdd", b.mdd},         {"entropy", b.entropy},
          {"adversarial", b.adversarial}, {"total", b.total}};
}

LossBreakdown breakdown_from_json(const nlohmann::json& doc) {
  return {doc.at("task").get<double>(),        doc.at("coral").get<double>(),
          doc.at("mdd").get<double>(),         doc.at("entropy").get<double>(),
          doc.at("adversarial").get<double>(), doc.at("total").get<double>()};
}

namespace {

void check_labels(const std::vector<int>& labels, int classes) {
  for (int y : labels) {
    if (y < 0 || y >= classes) {
      throw ContractError("label " + std::to_string(y) + " outside [0, " +
                          std::to_string(classes) + ")");
    }
  }
}

Tensor shaped_like(const Tensor& like, const std::vector<double>& values) {
  return Tensor(like.shape(), values);
}

}  // namespace

Var bce_task(Var p, const std::vector<int>& labels) {
  if (p.value().size() != labels.size()) {
    throw ContractError("bce_task: " + std::to_string(p.value().size()) +
                        " probabilities for " + std::to_string(labels.size()) +
                        " labels");
  }
  if (labels.empty()) throw ContractError("bce_task: empty batch");
  check_labels(labels, 2);
  Graph& g = p.graph();
  std::vector<double> y(labels.begin(), labels.end());
  std::vector<double> not_y(labels.size());
  for (std::size_t i = 0; i < y.size(); ++i) not_y[i] = 1.0 - y[i];
  Var pc = nd::clamp(p, kProbFloor, 1.0 - kProbFloor);
  Var pos = nd::mul(g.constant(shaped_like(p.value(), y)), nd::log(pc));
  Var neg = nd::mul(g.constant(shaped_like(p.value(), not_y)),
                    nd::log(nd::add_scalar(nd::scale(pc, -1.0), 1.0)));
  return nd::scale(nd::mean(nd::add(pos, neg)), -1.0);
}

Var multitask_loss(const std::vector<Var>& stream_probs,
                   const std::vector<int>& labels,
                   std::size_t expected_streams) {
  if (stream_probs.size() != expected_streams) {
    throw ContractError("multitask_loss: expected " +
                        std::to_string(expected_streams) + " streams, got " +
                        std::to_string(stream_probs.size()));
  }
  Var total;
  for (const Var& probs : stream_probs) {
    const std::size_t classes = probs.cols();
    if (probs.rows() != labels.size()) {
      throw ContractError("multitask_loss: stream batch size differs from labels");
    }
    Var term;
    if (classes == 2) {
      term = bce_task(nd::slice_cols(probs, 1, 1), labels);
    } else {
      check_labels(labels, static_cast<int>(classes));
      Tensor onehot(Shape{labels.size(), classes});
      for (std::size_t i = 0; i < labels.size(); ++i)
        onehot.at(i, static_cast<std::size_t>(labels[i])) = 1.0;
      Var picked = nd::sum_cols(nd::mul(probs.graph().constant(onehot), probs));
      term = nd::scale(
          nd::mean(nd::log(nd::clamp(picked, kProbFloor, 1.0 - kProbFloor))), -1.0);
    }
    total = total.valid() ? nd::add(total, term) : term;
  }
  return total;
}

Var covariance(Var batch) {
  const std::size_t n = batch.rows();
  if (n < 2) {
    throw ContractError("covariance: degenerate batch of " + std::to_string(n) +
                        " rows (need >= 2)");
  }
  const double inv_n = 1.0 / static_cast<double>(n);
  Var col_sums = nd::sum_rows(batch);
  Var gram = nd::matmul(nd::transpose(batch), batch);
  Var mean_part = nd::scale(nd::matmul(nd::transpose(col_sums), col_sums), inv_n);
  return nd::scale(nd::sub(gram, mean_part), inv_n);
}

Var coral(Var source, Var target) {
  if (source.cols() != target.cols()) {
    throw ContractError("coral: feature widths differ (" +
                        std::to_string(source.cols()) + " vs " +
                        std::to_string(target.cols()) + ")");
  }
  const double d = static_cast<double>(source.cols());
  Var diff = nd::sub(covariance(source), covariance(target));
  return nd::scale(nd::frobenius_sq(diff), 1.0 / (4.0 * d * d));
}

std::vector<std::pair<std::size_t, std::size_t>> intra_pairs(
    const std::vector<int>& labels, const std::vector<bool>& include,
    MddPairing pairing, CounterRng* rng) {
  std::map<int, std::vector<std::size_t>> subsets;
  for (std::size_t r = 0; r < labels.size(); ++r) {
    if (!include.empty() && !include[r]) continue;
    subsets[labels[r]].push_back(r);
  }
  std::vector<std::pair<std::size_t, std::size_t>> pairs;
  for (const auto& [label, members] : subsets) {
    const std::size_t m = members.size();
    if (m < 2) continue;
    for (std::size_t k = 0; k < m; ++k) {
      std::size_t partner;
      if (pairing == MddPairing::kShift) {
        partner = members[(k + 1) % m];
      } else {
        if (rng == nullptr) throw ContractError("mdd: random pairing needs an rng");
        const auto offset = 1 + static_cast<std::size_t>(rng->below(m - 1));
        partner = members[(k + offset) % m];
      }
      pairs.emplace_back(members[k], partner);
    }
  }
  return pairs;
}

namespace {

// Mean squared distance over (anchor, partner) rows of one batch; null Var
// when there are no pairs.
Var intra_term(Var batch, const std::vector<std::pair<std::size_t, std::size_t>>& pairs) {
  if (pairs.empty()) return {};
  std::vector<std::size_t> anchors, partners;
  for (auto [a, b] : pairs) {
    anchors.push_back(a);
    partners.push_back(b);
  }
  Var diff = nd::sub(nd::gather_rows(batch, anchors), nd::gather_rows(batch, partners));
  return nd::scale(nd::frobenius_sq(diff), 1.0 / static_cast<double>(pairs.size()));
}

}  // namespace

MddTerms mdd_terms(Var source, Var target, const std::vector<int>& source_labels,
                   const std::vector<int>& target_pseudo,
                   const MddOptions& options) {
  const std::size_t n = source.rows();
  if (target.rows() != n) {
    throw ContractError("mdd: batch sizes differ (" + std::to_string(n) + " vs " +
                        std::to_string(target.rows()) + ")");
  }
  if (source.cols() != target.cols()) {
    throw ContractError("mdd: feature widths differ");
  }
  if (source_labels.size() != n || target_pseudo.size() != n) {
    throw ContractError("mdd: label count differs from batch size");
  }
  if (!options.target_included.empty() && options.target_included.size() != n) {
    throw ContractError("mdd: target mask size differs from batch size");
  }
  MddTerms terms;
  Var inter = nd::scale(nd::frobenius_sq(nd::sub(source, target)),
                        1.0 / static_cast<double>(n));
  terms.inter = inter.item();
  Var total = nd::scale(inter, options.inter_sign);

  const auto source_pairs =
      intra_pairs(source_labels, {}, options.pairing, options.rng);
  if (Var s = intra_term(source, source_pairs); s.valid()) {
    terms.intra_source = s.item();
    total = nd::add(total, s);
  }
  const auto target_pairs = intra_pairs(target_pseudo, options.target_included,
                                        options.pairing, options.rng);
  if (Var t = intra_term(target, target_pairs); t.valid()) {
    terms.intra_target = t.item();
    total = nd::add(total, t);
  }
  terms.total = total;
  return terms;
}

Var mdd(Var source, Var target, const std::vector<int>& source_labels,
        const std::vector<int>& target_pseudo, const MddOptions& options) {
  return mdd_terms(source, target, source_labels, target_pseudo, options).total;
}

Var neg_entropy(Var logits) {
  static const double kLogFloor = std::log(kProbFloor);
  Var p = nd::softmax_rows(logits);
  Var logp = nd::clamp(nd::log_softmax_rows(logits), kLogFloor, 0.0);
  return nd::scale(nd::sum(nd::mul(p, logp)),
                   1.0 / static_cast<double>(logits.rows()));
}

double entropy_weight(std::span<const double> probs, EntropyWeightForm form) {
  if (form == EntropyWeightForm::kLiteral) {
    return 1.0 + std::exp(-*std::max_element(probs.begin(), probs.end()));
  }
  double h = 0.0;
  for (double p : probs)
    if (p > 0.0) h -= p * std::log(p);
  return 1.0 + std::exp(-h);
}

std::vector<double> entropy_weights(const Tensor& probs, EntropyWeightForm form) {
  std::vector<double> w(probs.rows());
  const std::size_t c = probs.cols();
  for (std::size_t r = 0; r < probs.rows(); ++r)
    w[r] = entropy_weight(probs.data().subspan(r * c, c), form);
  return w;
}

namespace {

Tensor normalized_column(const std::vector<double>& w) {
  double total = 0.0;
  for (double v : w) {
    if (!std::isfinite(v) || v <= 0.0) {
      throw ContractError("adversarial_domain_loss: weights must be positive");
    }
    total += v;
  }
  Tensor col(Shape{w.size(), 1});
  for (std::size_t i = 0; i < w.size(); ++i) col[i] = w[i] / total;
  return col;
}

void check_probabilities(const Tensor& d) {
  for (double v : d.data()) {
    if (!std::isfinite(v)) {
      throw NumericError("adversarial_domain_loss: non-finite probability");
    }
  }
}

}  // namespace

Var adversarial_domain_loss(Var d_source, Var d_target,
                            const std::vector<double>& w_source,
                            const std::vector<double>& w_target) {
  if (d_source.value().size() != w_source.size() ||
      d_target.value().size() != w_target.size()) {
    throw ContractError("adversarial_domain_loss: weight count differs from batch");
  }
  if (w_source.empty() || w_target.empty()) {
    throw ContractError("adversarial_domain_loss: empty batch");
  }
  check_probabilities(d_source.value());
  check_probabilities(d_target.value());
  Graph& g = d_source.graph();
  Var ds = nd::clamp(d_source, kProbFloor, 1.0 - kProbFloor);
  Var dt = nd::clamp(d_target, kProbFloor, 1.0 - kProbFloor);
  for (const Var* v : {&ds, &dt}) {
    for (double p : v->value().data()) {
      if (p <= 0.0 || p >= 1.0) {
        throw NumericError("adversarial_domain_loss: probability saturated");
      }
    }
  }
  Tensor ws = normalized_column(w_source);
  Tensor wt = normalized_column(w_target);
  Var src = nd::sum(nd::mul(g.constant(Tensor(ds.shape(), ws.values())), nd::log(ds)));
  Var tgt = nd::sum(nd::mul(g.constant(Tensor(dt.shape(), wt.values())),
                            nd::log(nd::add_scalar(nd::scale(dt, -1.0), 1.0))));
  return nd::scale(nd::add(src, tgt), -0.5);
}

LossBreakdown combine(double task, double coral, double mdd, double entropy,
                      double adversarial, const AdaptWeights& w) {
  LossBreakdown b{task, coral, mdd, entropy, adversarial, 0.0};
  b.total = task + w.lambda * (w.alpha * coral + w.beta * mdd +
                               w.gamma * entropy + w.eta * adversarial);
  return b;
}

double coral_value(const Tensor& source, const Tensor& target) {
  Graph g;
  return coral(g.constant(source), g.constant(target)).item();
}

}  // namespace mmpda::losses
