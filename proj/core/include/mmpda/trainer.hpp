#pragma once

// Progressive multi-source training: paired source/target batching,
// domain-by-domain scheduling, pseudo-labeling, the frozen target branch, the
// gradient-reversal update, and the optimizers.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mmpda/evalx.hpp"
#include "mmpda/losses.hpp"
#include "mmpda/model.hpp"
#include "mmpda/rng.hpp"
#include "mmpda/synthdata.hpp"

namespace mmpda::train {

enum class OptimizerKind { kPlainSgd, kAdamW };

std::string to_string(OptimizerKind kind);
OptimizerKind optimizer_from_string(const std::string& name);

// How the adversarial loss reaches the encoder and fusion parameters.
enum class AdversarialPath {
  kReversed,  // gradient reversal scaled by the progress schedule
  kPlain,     // no reversal: features descend the discriminator loss too
  kDetached,  // features receive nothing from the adversarial loss
};

struct AdaptConfig {
  losses::AdaptWeights weights;
  double lr = 1e-4;
  double weight_decay = 5e-5;
  std::size_t batch_size = 32;
  std::size_t epochs = 20;
  OptimizerKind optimizer = OptimizerKind::kAdamW;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  // Gradients flow into encoders/fusion from the target branch.
  bool target_grad = false;
  // Target rows whose max class probability is below this are left out of
  // the density-divergence target term.
  double pseudo_threshold = 0.0;
  bool grl = true;
  // Global gradient-norm clip; 0 disables.
  double grad_clip = 10.0;
  losses::EntropyWeightForm entropy_weight_form =
      losses::EntropyWeightForm::kExpNegEntropy;
  losses::MddPairing mdd_pairing = losses::MddPairing::kShift;
  bool mdd_flip_inter = false;
  std::uint64_t seed = 0;

  // Throws ContractError on an invalid field.
  void validate() const;
};

nlohmann::json to_json(const AdaptConfig& c);
AdaptConfig adapt_config_from_json(const nlohmann::json& doc);

struct TrainState {
  std::size_t global_step = 0;
  std::size_t total_steps = 0;
  std::size_t epoch = 0;
  std::string current_domain;
  double progress = 0.0;  // global_step / total_steps
};

struct PairedBatch {
  std::vector<std::size_t> source_rows;
  std::vector<std::size_t> target_rows;
  std::vector<nd::Tensor> source_inputs;
  std::vector<int> source_labels;
  std::vector<nd::Tensor> target_inputs;
};

// n rows from each domain: without replacement when the domain holds at
// least n samples, uniformly with replacement otherwise.
std::vector<std::size_t> sample_rows(std::size_t available, std::size_t n,
                                     CounterRng& rng);
PairedBatch sample_paired_batch(const data::DomainDataset& source,
                                const data::DomainDataset& target,
                                std::size_t n, CounterRng& rng);

struct CycleEntry {
  std::size_t domain;  // index into the source list
  std::size_t steps;   // ceil(|domain| / n)
};

// Sources in declared order, each contributing all its steps before the next.
std::vector<CycleEntry> domain_cycle(const std::vector<std::size_t>& domain_sizes,
                                     std::size_t batch_size);

struct PseudoLabels {
  std::vector<int> labels;
  std::vector<bool> included;
};

// Argmax per row (ties to the lower index); rows whose max softmax
// probability is below `threshold` are marked excluded.
PseudoLabels pseudo_label(const nd::Tensor& logits, double threshold);

// Per-parameter moment buffers, matched to parameters by position.
class Optimizer {
 public:
  Optimizer(OptimizerKind kind, const AdaptConfig& config);

  // Decoupled decay: theta *= (1 - lr * wd), then the gradient update.
  void step(const std::vector<model::NamedParam>& params);
  std::size_t steps_taken() const { return t_; }

 private:
  OptimizerKind kind_;
  double lr_, wd_, beta1_, beta2_, eps_;
  std::size_t t_ = 0;
  std::vector<std::vector<double>> m_, v_;
};

struct ObjectiveOptions {
  AdversarialPath adversarial_path = AdversarialPath::kReversed;
  double grl_scale = 0.0;
  bool include_task = true;
  bool include_alignment = true;    // coral, mdd, entropy
  bool include_adversarial = true;
};

struct Objective {
  nd::Var total;  // what backward runs on
  losses::LossBreakdown breakdown;
};

// Builds the full training objective for one paired batch.
// total = task + lambda (alpha coral + beta mdd + gamma entropy)
//       + lambda eta adv, where adv reaches the features through the
// selected adversarial path.
Objective build_objective(nd::Graph& g, model::ModelBundle& model,
                          const PairedBatch& batch, const AdaptConfig& config,
                          const ObjectiveOptions& options, CounterRng* mdd_rng);

class DivergenceError : public std::runtime_error {
 public:
  DivergenceError(std::size_t step, const losses::LossBreakdown& breakdown);

  std::size_t step() const { return step_; }
  const losses::LossBreakdown& breakdown() const { return breakdown_; }

 private:
  std::size_t step_;
  losses::LossBreakdown breakdown_;
};

// One optimizer update at progress state.progress. Throws DivergenceError
// when the objective is not finite.
losses::LossBreakdown train_step(const PairedBatch& batch,
                                 model::ModelBundle& model,
                                 const AdaptConfig& config,
                                 const TrainState& state, Optimizer& optimizer,
                                 CounterRng* mdd_rng = nullptr);

struct EpochRecord {
  std::size_t epoch = 0;
  losses::LossBreakdown mean;
  std::vector<CycleEntry> trace;
};

struct RunReport {
  std::string run_id;
  nlohmann::json config;
  std::vector<EpochRecord> per_epoch;
  bool has_final = false;
  evalx::Metrics final;
  evalx::GapMatrix gap;
  std::uint64_t seed = 0;
  std::vector<std::string> source_ids;
};

nlohmann::json to_json(const RunReport& r);

struct TrainResult {
  model::ModelBundle model;
  RunReport report;
};

// Called after every train_step.
using StepObserver = std::function<void(const TrainState&, const PairedBatch&,
                                        const losses::LossBreakdown&)>;

// epochs x domain_cycle x train_step, fully determined by config.seed.
TrainResult run_training(const std::vector<data::DomainDataset>& sources,
                         const data::DomainDataset& target,
                         const model::ModelDims& dims, const AdaptConfig& config,
                         const std::string& run_id = "run",
                         const StepObserver& observer = {});

// Fused-head class probabilities for every sample of a dataset.
nd::Tensor predict_probabilities(model::ModelBundle& model,
                                 const data::DomainDataset& dataset);
// Fused features M for every sample.
nd::Tensor fused_features(model::ModelBundle& model,
                          const data::DomainDataset& dataset);
evalx::Metrics evaluate(model::ModelBundle& model,
                        const data::DomainDataset& dataset);

}  // namespace mmpda::train
