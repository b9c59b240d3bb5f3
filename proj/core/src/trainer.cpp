#include "mmpda/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <utility>

#include "mmpda/errors.hpp"

namespace mmpda::train {

using losses::LossBreakdown;
using model::ModelBundle;
using model::ParamMode;
using nd::Graph;
using nd::Tensor;
using nd::Var;

std::string to_string(OptimizerKind kind) {
  return kind == OptimizerKind::kPlainSgd ? "plain-sgd" : "adamw";
}

OptimizerKind optimizer_from_string(const std::string& name) {
  if (name == "plain-sgd" || name == "sgd") return OptimizerKind::kPlainSgd;
  if (name == "adamw" || name == "decoupled-adaptive-moment") {
    return OptimizerKind::kAdamW;
  }
  throw ContractError("unknown optimizer '" + name + "'");
}

void AdaptConfig::validate() const {
  weights.validate();
  if (!(lr > 0.0) || !std::isfinite(lr)) throw ContractError("lr must be > 0");
  if (!(weight_decay >= 0.0)) throw ContractError("weight_decay must be >= 0");
  if (batch_size < 2) throw ContractError("batch_size must be >= 2");
  if (epochs < 1) throw ContractError("epochs must be >= 1");
  if (!(pseudo_threshold >= 0.0 && pseudo_threshold < 1.0)) {
    throw ContractError("pseudo_threshold must lie in [0, 1)");
  }
  if (!(grad_clip >= 0.0)) throw ContractError("grad_clip must be >= 0");
}

namespace {

std::string entropy_form_name(losses::EntropyWeightForm f) {
  return f == losses::EntropyWeightForm::kLiteral ? "literal" : "exp-neg-entropy";
}

losses::EntropyWeightForm entropy_form_from(const std::string& s) {
  if (s == "literal") return losses::EntropyWeightForm::kLiteral;
  if (s == "exp-neg-entropy") return losses::EntropyWeightForm::kExpNegEntropy;
  throw ContractError("unknown entropy_weight form '" + s + "'");
}

std::string pairing_name(losses::MddPairing p) {
  return p == losses::MddPairing::kShift ? "shift" : "random";
}

losses::MddPairing pairing_from(const std::string& s) {
  if (s == "shift") return losses::MddPairing::kShift;
  if (s == "random") return losses::MddPairing::kRandom;
  throw ContractError("unknown mdd_pairing '" + s + "'");
}

}  // namespace

nlohmann::json to_json(const AdaptConfig& c) {
  return {
      {"alpha", c.weights.alpha},
      {"beta", c.weights.beta},
      {"gamma", c.weights.gamma},
      {"eta", c.weights.eta},
      {"lambda", c.weights.lambda},
      {"lr", c.lr},
      {"weight_decay", c.weight_decay},
      {"batch_size", c.batch_size},
      {"epochs", c.epochs},
      {"optimizer", to_string(c.optimizer)},
      {"adam_beta1", c.adam_beta1},
      {"adam_beta2", c.adam_beta2},
      {"adam_eps", c.adam_eps},
      {"target_grad", c.target_grad},
      {"pseudo_threshold", c.pseudo_threshold},
      {"grl", c.grl},
      {"grad_clip", c.grad_clip},
      {"entropy_weight", entropy_form_name(c.entropy_weight_form)},
      {"mdd_pairing", pairing_name(c.mdd_pairing)},
      {"mdd_flip_inter", c.mdd_flip_inter},
      {"seed", c.seed},
  };
}

AdaptConfig adapt_config_from_json(const nlohmann::json& doc) {
  AdaptConfig c;
  c.weights.alpha = doc.value("alpha", c.weights.alpha);
  c.weights.beta = doc.value("beta", c.weights.beta);
  c.weights.gamma = doc.value("gamma", c.weights.gamma);
  c.weights.eta = doc.value("eta", c.weights.eta);
  c.weights.lambda = doc.value("lambda", c.weights.lambda);
  c.lr = doc.value("lr", c.lr);
  c.weight_decay = doc.value("weight_decay", c.weight_decay);
  c.batch_size = doc.value("batch_size", c.batch_size);
  c.epochs = doc.value("epochs", c.epochs);
  c.optimizer = optimizer_from_string(doc.value("optimizer", to_string(c.optimizer)));
  c.adam_beta1 = doc.value("adam_beta1", c.adam_beta1);
  c.adam_beta2 = doc.value("adam_beta2", c.adam_beta2);
  c.adam_eps = doc.value("adam_eps", c.adam_eps);
  c.target_grad = doc.value("target_grad", c.target_grad);
  c.pseudo_threshold = doc.value("pseudo_threshold", c.pseudo_threshold);
  c.grl = doc.value("grl", c.grl);
  c.grad_clip = doc.value("grad_clip", c.grad_clip);
  c.entropy_weight_form = entropy_form_from(
      doc.value("entropy_weight", entropy_form_name(c.entropy_weight_form)));
  c.mdd_pairing = pairing_from(doc.value("mdd_pairing", pairing_name(c.mdd_pairing)));
  c.mdd_flip_inter = doc.value("mdd_flip_inter", c.mdd_flip_inter);
  c.seed = doc.value("seed", c.seed);
  return c;
}

// ---- batching and scheduling ----------------------------------------------

std::vector<std::size_t> sample_rows(std::size_t available, std::size_t n,
                                     CounterRng& rng) {
  if (available == 0) throw ContractError("sample_rows: empty dataset");
  std::vector<std::size_t> rows;
  if (available < n) {
    rows.reserve(n);
    for (std::size_t i = 0; i < n; ++i)
      rows.push_back(static_cast<std::size_t>(rng.below(available)));
    return rows;
  }
  // Partial Fisher-Yates: the first n positions form a uniform subset.
  std::vector<std::size_t> pool(available);
  for (std::size_t i = 0; i < available; ++i) pool[i] = i;
  for (std::size_t i = 0; i < n; ++i) {
    const auto j = i + static_cast<std::size_t>(rng.below(available - i));
    std::swap(pool[i], pool[j]);
  }
  pool.resize(n);
  return pool;
}

PairedBatch sample_paired_batch(const data::DomainDataset& source,
                                const data::DomainDataset& target, std::size_t n,
                                CounterRng& rng) {
  if (source.empty() || target.empty()) {
    throw ContractError("sample_paired_batch: empty dataset");
  }
  PairedBatch b;
  b.source_rows = sample_rows(source.size(), n, rng);
  b.target_rows = sample_rows(target.size(), n, rng);
  b.source_inputs = source.modality_batch(b.source_rows);
  b.source_labels = source.training_labels(b.source_rows);
  b.target_inputs = target.modality_batch(b.target_rows);
  return b;
}

std::vector<CycleEntry> domain_cycle(const std::vector<std::size_t>& domain_sizes,
                                     std::size_t batch_size) {
  if (domain_sizes.empty()) throw ContractError("domain_cycle: no source domains");
  if (batch_size == 0) throw ContractError("domain_cycle: batch size must be > 0");
  std::vector<CycleEntry> cycle;
  for (std::size_t d = 0; d < domain_sizes.size(); ++d)
    cycle.push_back({d, (domain_sizes[d] + batch_size - 1) / batch_size});
  return cycle;
}

PseudoLabels pseudo_label(const Tensor& logits, double threshold) {
  PseudoLabels out;
  const std::size_t c = logits.cols();
  for (std::size_t r = 0; r < logits.rows(); ++r) {
    std::size_t best = 0;
    double mx = logits.at(r, 0);
    for (std::size_t k = 1; k < c; ++k) {
      if (logits.at(r, k) > mx) {
        mx = logits.at(r, k);
        best = k;
      }
    }
    double z = 0.0;
    for (std::size_t k = 0; k < c; ++k) z += std::exp(logits.at(r, k) - mx);
    out.labels.push_back(static_cast<int>(best));
    out.included.push_back(1.0 / z >= threshold);
  }
  return out;
}

// ---- optimizers -----------------------------------------------------------

Optimizer::Optimizer(OptimizerKind kind, const AdaptConfig& c)
    : kind_(kind),
      lr_(c.lr),
      wd_(c.weight_decay),
      beta1_(c.adam_beta1),
      beta2_(c.adam_beta2),
      eps_(c.adam_eps) {}

void Optimizer::step(const std::vector<model::NamedParam>& params) {
  ++t_;
  if (kind_ == OptimizerKind::kAdamW && m_.empty()) {
    for (const auto& p : params) {
      m_.emplace_back(p.tensor->size(), 0.0);
      v_.emplace_back(p.tensor->size(), 0.0);
    }
  }
  const double decay = 1.0 - lr_ * wd_;
  const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (std::size_t k = 0; k < params.size(); ++k) {
    Tensor& theta = *params[k].tensor;
    auto grad = theta.grad();
    auto data = theta.data();
    for (std::size_t i = 0; i < data.size(); ++i) {
      if (wd_ != 0.0) data[i] *= decay;
      if (kind_ == OptimizerKind::kPlainSgd) {
        data[i] -= lr_ * grad[i];
      } else {
        double& m = m_[k][i];
        double& v = v_[k][i];
        m = beta1_ * m + (1.0 - beta1_) * grad[i];
        v = beta2_ * v + (1.0 - beta2_) * grad[i] * grad[i];
        data[i] -= lr_ * (m / bc1) / (std::sqrt(v / bc2) + eps_);
      }
    }
  }
}

// ---- objective ------------------------------------------------------------

namespace {

Var accumulate(Var total, Var term) {
  return total.valid() ? nd::add(total, term) : term;
}

Var adversarial_input(Var fused, const ObjectiveOptions& o) {
  switch (o.adversarial_path) {
    case AdversarialPath::kReversed:
      return nd::grad_reverse(fused, o.grl_scale);
    case AdversarialPath::kPlain:
      return fused;
    case AdversarialPath::kDetached:
      return nd::stop_gradient(fused);
  }
  return fused;
}

}  // namespace

Objective build_objective(Graph& g, ModelBundle& model, const PairedBatch& batch,
                          const AdaptConfig& config, const ObjectiveOptions& o,
                          CounterRng* mdd_rng) {
  const auto& w = config.weights;
  const ParamMode target_mode =
      config.target_grad ? ParamMode::kTrainable : ParamMode::kFrozen;
  auto src = model.forward(g, batch.source_inputs, ParamMode::kTrainable);

  std::vector<Var> stream_probs;
  for (const Var& logits : src.logits) stream_probs.push_back(nd::softmax_rows(logits));
  Var task = losses::multitask_loss(stream_probs, batch.source_labels,
                                    model.stream_count());
  double coral_v = 0.0, mdd_v = 0.0, entropy_v = 0.0, adv_v = 0.0;
  Var total;
  if (o.include_task) total = task;

  if (w.lambda > 0.0 && (o.include_alignment || o.include_adversarial)) {
    auto tgt = model.forward(g, batch.target_inputs, target_mode);
    Var src_logits = src.logits.back();
    Var tgt_logits = tgt.logits.back();

    if (o.include_alignment) {
      Var coral = losses::coral(src.fused, tgt.fused);
      PseudoLabels pseudo = pseudo_label(tgt_logits.value(), config.pseudo_threshold);
      losses::MddOptions mo;
      mo.pairing = config.mdd_pairing;
      mo.rng = mdd_rng;
      mo.target_included = pseudo.included;
      mo.inter_sign = config.mdd_flip_inter ? -1.0 : 1.0;
      Var mdd = losses::mdd(src.fused, tgt.fused, batch.source_labels, pseudo.labels, mo);
      Var entropy = losses::neg_entropy(nd::concat_rows({src_logits, tgt_logits}));
      coral_v = coral.item();
      mdd_v = mdd.item();
      entropy_v = entropy.item();
      Var aligned = nd::add(nd::add(nd::scale(coral, w.alpha), nd::scale(mdd, w.beta)),
                            nd::scale(entropy, w.gamma));
      total = accumulate(total, nd::scale(aligned, w.lambda));
    }

    if (o.include_adversarial) {
      Var p_src = nd::stop_gradient(nd::softmax_rows(src_logits));
      Var p_tgt = nd::stop_gradient(nd::softmax_rows(tgt_logits));
      Var h_src = model::conditional_map(adversarial_input(src.fused, o), p_src);
      Var h_tgt = model::conditional_map(adversarial_input(tgt.fused, o), p_tgt);
      Var d_src = model.discriminate(g, h_src);
      Var d_tgt = model.discriminate(g, h_tgt);
      Var adv = losses::adversarial_domain_loss(
          d_src, d_tgt, losses::entropy_weights(p_src.value(), config.entropy_weight_form),
          losses::entropy_weights(p_tgt.value(), config.entropy_weight_form));
      adv_v = adv.item();
      total = accumulate(total, nd::scale(adv, w.lambda * w.eta));
    }
  }
  if (!total.valid()) total = g.constant(Tensor::scalar(0.0));
  return {total, losses::combine(task.item(), coral_v, mdd_v, entropy_v, adv_v, w)};
}

DivergenceError::DivergenceError(std::size_t step, const LossBreakdown& b)
    : std::runtime_error("training diverged at step " + std::to_string(step) +
                         ": total loss " + std::to_string(b.total)),
      step_(step),
      breakdown_(b) {}

namespace {

void clip_gradients(const std::vector<model::NamedParam>& params, double max_norm) {
  double sq = 0.0;
  for (const auto& p : params)
    for (double gv : p.tensor->grad()) sq += gv * gv;
  const double norm = std::sqrt(sq);
  if (norm <= max_norm) return;
  const double factor = max_norm / norm;
  for (const auto& p : params)
    for (double& gv : p.tensor->grad()) gv *= factor;
}

bool finite(const LossBreakdown& b) {
  for (double v : {b.task, b.coral, b.mdd, b.entropy, b.adversarial, b.total})
    if (!std::isfinite(v)) return false;
  return true;
}

}  // namespace

LossBreakdown train_step(const PairedBatch& batch, ModelBundle& model,
                         const AdaptConfig& config, const TrainState& state,
                         Optimizer& optimizer, CounterRng* mdd_rng) {
  model.zero_grad();
  Graph g;
  ObjectiveOptions o;
  o.adversarial_path = config.grl ? AdversarialPath::kReversed : AdversarialPath::kPlain;
  o.grl_scale = model::grl_schedule(state.progress);
  Objective obj;
  try {
    obj = build_objective(g, model, batch, config, o, mdd_rng);
  } catch (const NumericError&) {
    const double nan = std::nan("");
    throw DivergenceError(state.global_step, {nan, nan, nan, nan, nan, nan});
  }
  if (!finite(obj.breakdown) || !std::isfinite(obj.total.item())) {
    throw DivergenceError(state.global_step, obj.breakdown);
  }
  g.backward(obj.total);
  auto params = model.parameters();
  if (config.grad_clip > 0.0) clip_gradients(params, config.grad_clip);
  optimizer.step(params);
  for (const auto& p : params) {
    if (!p.tensor->all_finite()) throw DivergenceError(state.global_step, obj.breakdown);
  }
  return obj.breakdown;
}

// ---- runs -----------------------------------------------------------------

Tensor predict_probabilities(ModelBundle& model, const data::DomainDataset& dataset) {
  Graph g;
  auto r = model.forward(g, dataset.all_inputs(), ParamMode::kFrozen);
  return nd::softmax_rows(r.logits.back()).value();
}

Tensor fused_features(ModelBundle& model, const data::DomainDataset& dataset) {
  Graph g;
  auto r = model.forward(g, dataset.all_inputs(), ParamMode::kFrozen);
  return r.fused.value();
}

evalx::Metrics evaluate(ModelBundle& model, const data::DomainDataset& dataset) {
  if (!dataset.fully_labeled()) {
    throw ContractError("evaluate: dataset '" + dataset.id() + "' has unlabeled rows");
  }
  return evalx::accuracy_f1(evalx::argmax_rows(predict_probabilities(model, dataset)),
                            dataset.evaluation_labels());
}

nlohmann::json to_json(const RunReport& r) {
  nlohmann::json epochs = nlohmann::json::array();
  for (const auto& e : r.per_epoch) {
    nlohmann::json trace = nlohmann::json::array();
    for (const auto& c : e.trace)
      trace.push_back({{"domain", r.source_ids.at(c.domain)}, {"steps", c.steps}});
    epochs.push_back({{"epoch", e.epoch},
                      {"mean", losses::to_json(e.mean)},
                      {"source_domain_trace", std::move(trace)}});
  }
  return {{"run_id", r.run_id},
          {"seed", r.seed},
          {"config", r.config},
          {"per_epoch", std::move(epochs)},
          {"final", r.has_final ? evalx::to_json(r.final) : nlohmann::json(nullptr)},
          {"gap_matrix", evalx::to_json(r.gap)}};
}

TrainResult run_training(const std::vector<data::DomainDataset>& sources,
                         const data::DomainDataset& target,
                         const model::ModelDims& dims, const AdaptConfig& config,
                         const std::string& run_id, const StepObserver& observer) {
  config.validate();
  if (sources.empty()) throw ContractError("run_training: no source domains");
  for (const auto& s : sources) {
    if (s.role() != data::Role::kSource || !s.fully_labeled()) {
      throw ContractError("run_training: source '" + s.id() + "' must be labeled");
    }
    if (s.widths() != dims.modality_inputs) {
      throw ContractError("run_training: source '" + s.id() + "' widths differ from model");
    }
  }
  if (target.empty()) throw ContractError("run_training: empty target domain");
  if (target.widths() != dims.modality_inputs) {
    throw ContractError("run_training: target widths differ from model");
  }

  TrainResult result{ModelBundle(dims, config.seed), {}};
  ModelBundle& model = result.model;
  RunReport& report = result.report;
  report.run_id = run_id;
  report.seed = config.seed;
  report.config = to_json(config);
  for (const auto& s : sources) report.source_ids.push_back(s.id());

  const CounterRng root(config.seed);
  CounterRng sampler = root.fork(1);
  CounterRng mdd_rng = root.fork(2);

  std::vector<std::size_t> sizes;
  for (const auto& s : sources) sizes.push_back(s.size());
  const auto cycle = domain_cycle(sizes, config.batch_size);
  std::size_t per_epoch = 0;
  for (const auto& c : cycle) per_epoch += c.steps;

  TrainState state;
  state.total_steps = per_epoch * config.epochs;
  Optimizer optimizer(config.optimizer, config);

  for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
    state.epoch = epoch;
    LossBreakdown sum;
    for (const auto& entry : cycle) {
      const auto& source = sources[entry.domain];
      state.current_domain = source.id();
      for (std::size_t k = 0; k < entry.steps; ++k) {
        ++state.global_step;
        state.progress = static_cast<double>(state.global_step) /
                         static_cast<double>(state.total_steps);
        auto batch = sample_paired_batch(source, target, config.batch_size, sampler);
        const auto b = train_step(batch, model, config, state, optimizer, &mdd_rng);
        if (observer) observer(state, batch, b);
        sum.task += b.task;
        sum.coral += b.coral;
        sum.mdd += b.mdd;
        sum.entropy += b.entropy;
        sum.adversarial += b.adversarial;
        sum.total += b.total;
      }
    }
    const double inv = 1.0 / static_cast<double>(per_epoch);
    report.per_epoch.push_back(
        {epoch,
         {sum.task * inv, sum.coral * inv, sum.mdd * inv, sum.entropy * inv,
          sum.adversarial * inv, sum.total * inv},
         cycle});
  }

  if (target.fully_labeled()) {
    report.has_final = true;
    report.final = evaluate(model, target);
  }
  std::vector<std::pair<std::string, Tensor>> sets;
  for (const auto& s : sources) sets.emplace_back(s.id(), fused_features(model, s));
  sets.emplace_back(target.id(), fused_features(model, target));
  report.gap = evalx::domain_gap_matrix(sets);
  return result;
}

}  // namespace mmpda::train
