#pragma once

// Scalar objectives: supervised task loss, its multi-stream sum, and the four
// adaptation losses (correlation alignment, density divergence, negative
// entropy, conditional adversarial), plus their weighted combination.

#include <cstddef>
#include <utility>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "mmpda/ndgraph.hpp"
#include "mmpda/rng.hpp"

namespace mmpda::losses {

// Probabilities are clamped to [kProbFloor, 1 - kProbFloor] before any log.
inline constexpr double kProbFloor = 1e-12;

struct AdaptWeights {
  double alpha = 10.0;   // correlation alignment
  double beta = 0.1;     // density divergence
  double gamma = 10.0;   // negative entropy
  double eta = 0.1;      // adversarial
  double lambda = 10.0;  // overall adaptation strength

  // Throws ContractError unless every weight is finite and >= 0.
  void validate() const;
};

struct LossBreakdown {
  double task = 0.0;
  double coral = 0.0;
  double mdd = 0.0;
  double entropy = 0.0;
  double adversarial = 0.0;
  double total = 0.0;
};

nlohmann::json to_json(const LossBreakdown& b);
LossBreakdown breakdown_from_json(const nlohmann::json& doc);

// Mean binary cross-entropy of positive-class probabilities against {0,1}
// labels. `p` may have any shape with labels.size() elements.
nd::Var bce_task(nd::Var p, const std::vector<int>& labels);

// Sum of the task loss over every stream. Each entry of `stream_probs` is an
// n x C matrix of class probabilities; C = 2 uses bce_task on column 1, larger
// C uses categorical cross-entropy. Labels are class indices.
nd::Var multitask_loss(const std::vector<nd::Var>& stream_probs,
                       const std::vector<int>& labels,
                       std::size_t expected_streams);

// (1/n) (M^T M - (1/n) (1^T M)^T (1^T M)), d x d. Requires n >= 2.
nd::Var covariance(nd::Var batch);

// ||C_S - C_T||_F^2 / (4 d^2).
nd::Var coral(nd::Var source, nd::Var target);

enum class MddPairing { kShift, kRandom };

struct MddOptions {
  MddPairing pairing = MddPairing::kShift;
  // Required for kRandom.
  CounterRng* rng = nullptr;
  // Rows of the target batch excluded from the target intra term (pseudo
  // labels below the confidence threshold). Empty means all included.
  std::vector<bool> target_included;
  // -1 negates the inter-domain term.
  double inter_sign = 1.0;
};

// (anchor, partner) pairs within each label subset. Shift pairing: element k
// of a subset (in batch order) pairs with element (k + 1) mod size. Subsets of
// size < 2 contribute nothing; rows with include[r] == false are skipped.
std::vector<std::pair<std::size_t, std::size_t>> intra_pairs(
    const std::vector<int>& labels, const std::vector<bool>& include,
    MddPairing pairing, CounterRng* rng);

struct MddTerms {
  nd::Var total;
  double inter = 0.0;
  double intra_source = 0.0;
  double intra_target = 0.0;
};

// Inter-domain row-aligned squared distances plus same-label intra terms for
// the source (ground truth) and target (pseudo labels) batches, each a mean
// over its own participating sample count.
MddTerms mdd_terms(nd::Var source, nd::Var target,
                   const std::vector<int>& source_labels,
                   const std::vector<int>& target_pseudo,
                   const MddOptions& options = {});
nd::Var mdd(nd::Var source, nd::Var target,
            const std::vector<int>& source_labels,
            const std::vector<int>& target_pseudo,
            const MddOptions& options = {});

// Mean over rows of sum_c p_c log p_c, p = softmax(logits); in [-log C, 0].
nd::Var neg_entropy(nd::Var logits);

enum class EntropyWeightForm {
  kExpNegEntropy,  // 1 + exp(-H(p))
  kLiteral,        // 1 + exp(-max_c p_c)
};

double entropy_weight(std::span<const double> probs,
                      EntropyWeightForm form = EntropyWeightForm::kExpNegEntropy);
std::vector<double> entropy_weights(
    const nd::Tensor& probs,
    EntropyWeightForm form = EntropyWeightForm::kExpNegEntropy);

// Weighted domain cross-entropy, source labelled 1 and target 0:
// -[sum w_S log d_S / sum w_S + sum w_T log(1 - d_T) / sum w_T] / 2.
nd::Var adversarial_domain_loss(nd::Var d_source, nd::Var d_target,
                                const std::vector<double>& w_source,
                                const std::vector<double>& w_target);

// total = task + lambda (alpha coral + beta mdd + gamma entropy + eta adv).
LossBreakdown combine(double task, double coral, double mdd, double entropy,
                      double adversarial, const AdaptWeights& w);

// Value-only correlation alignment between two plain batches.
double coral_value(const nd::Tensor& source, const nd::Tensor& target);

}  // namespace mmpda::losses
