#include "mmpda/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <set>

#include <gtest/gtest.h>
#include <nlohmann/json.hpp>

#include "mmpda/errors.hpp"
#include "toy.hpp"

namespace data = mmpda::data;
namespace model = mmpda::model;
namespace nd = mmpda::nd;
namespace train = mmpda::train;
using mmpda::ContractError;
using mmpda::CounterRng;
using nd::Graph;
using nd::Shape;
using nd::Tensor;

namespace {

data::DomainDataset small_domain(const std::string& id, data::Role role, std::size_t n,
                                 std::uint64_t seed, double offset = 0.0) {
  data::DomainDataset ds(id, role, {1});
  CounterRng rng(seed);
  for (std::size_t i = 0; i < n; ++i) {
    const int y = static_cast<int>(i % 2);
    ds.add({{{rng.normal() * 0.5 + (y ? 1.0 : -1.0) + offset}}, y});
  }
  return ds;
}

train::AdaptConfig quick_config() {
  train::AdaptConfig c;
  c.batch_size = 8;
  c.epochs = 2;
  c.lr = 1e-3;
  c.seed = 3;
  return c;
}

TEST(SampleRows, ExhaustiveDrawIsPermutation) {
  CounterRng rng(1);
  auto rows = train::sample_rows(4, 4, rng);
  std::sort(rows.begin(), rows.end());
  EXPECT_EQ(rows, (std::vector<std::size_t>{0, 1, 2, 3}));
}

TEST(SampleRows, WithReplacementFallback) {
  CounterRng rng(2);
  auto rows = train::sample_rows(2, 4, rng);
  ASSERT_EQ(rows.size(), 4u);
  for (auto r : rows) EXPECT_LT(r, 2u);
}

TEST(SampleRows, DistinctWithoutReplacement) {
  CounterRng rng(3);
  auto rows = train::sample_rows(50, 20, rng);
  EXPECT_EQ(std::set<std::size_t>(rows.begin(), rows.end()).size(), 20u);
}

TEST(SamplePairedBatch, ReproducibleAndShaped) {
  auto s = small_domain("s", data::Role::kSource, 4, 1);
  auto t = small_domain("t", data::Role::kTarget, 2, 2);
  CounterRng a(9), b(9);
  auto x = train::sample_paired_batch(s, t, 4, a);
  auto y = train::sample_paired_batch(s, t, 4, b);
  EXPECT_EQ(x.source_rows, y.source_rows);
  EXPECT_EQ(x.target_rows, y.target_rows);
  EXPECT_EQ(x.source_inputs[0].rows(), 4u);
  EXPECT_EQ(x.target_inputs[0].rows(), 4u);
  EXPECT_EQ(x.source_labels.size(), 4u);
  auto sorted = x.source_rows;
  std::sort(sorted.begin(), sorted.end());
  EXPECT_EQ(sorted, (std::vector<std::size_t>{0, 1, 2, 3}));
  for (auto r : x.target_rows) EXPECT_LT(r, 2u);
}

TEST(SamplePairedBatch, EmptyDataset) {
  auto s = small_domain("s", data::Role::kSource, 4, 1);
  data::DomainDataset empty("t", data::Role::kTarget, {1});
  CounterRng rng(1);
  EXPECT_THROW(train::sample_paired_batch(s, empty, 4, rng), ContractError);
}

TEST(DomainCycle, CeilingArithmeticInDeclaredOrder) {
  auto c = train::domain_cycle({64, 32}, 32);
  ASSERT_EQ(c.size(), 2u);
  EXPECT_EQ(c[0].domain, 0u);
  EXPECT_EQ(c[0].steps, 2u);
  EXPECT_EQ(c[1].domain, 1u);
  EXPECT_EQ(c[1].steps, 1u);
  auto single = train::domain_cycle({33}, 32);
  ASSERT_EQ(single.size(), 1u);
  EXPECT_EQ(single[0].steps, 2u);
  EXPECT_THROW(train::domain_cycle({}, 32), ContractError);
}

TEST(PseudoLabel, ArgmaxTieAndThreshold) {
  auto p = train::pseudo_label(Tensor::matrix({{2, -1}, {0, 0}, {-1, 2}}), 0.0);
  EXPECT_EQ(p.labels, (std::vector<int>{0, 0, 1}));
  EXPECT_EQ(p.included, (std::vector<bool>{true, true, true}));
  const double l = std::log(0.6 / 0.4);
  auto q = train::pseudo_label(Tensor::matrix({{l, 0}, {5, 0}}), 0.9);
  EXPECT_EQ(q.labels, (std::vector<int>{0, 0}));
  EXPECT_EQ(q.included, (std::vector<bool>{false, true}));
}

// A single scalar parameter with dL_task/dtheta = 1 and dL_adv/dtheta = 0.5
// routed through the reversal layer.
double scalar_toy_delta(double progress) {
  Tensor theta = Tensor::scalar(2.0);
  theta.set_requires_grad(true);
  Graph g;
  auto x = g.param(theta);
  auto task = x;
  auto adv = nd::scale(nd::grad_reverse(x, model::grl_schedule(progress)), 0.5);
  g.backward(nd::add(task, adv));
  train::AdaptConfig c;
  c.lr = 0.1;
  c.weight_decay = 0.0;
  train::Optimizer opt(train::OptimizerKind::kPlainSgd, c);
  opt.step({{"theta", &theta}});
  return theta[0] - 2.0;
}

TEST(ReversalUpdate, ScalarToy) {
  EXPECT_NEAR(scalar_toy_delta(0.0), -0.1, 1e-15);
  EXPECT_NEAR(scalar_toy_delta(1.0), -0.1 * (1.0 - 0.5 * model::grl_schedule(1.0)), 1e-15);
  EXPECT_NEAR(scalar_toy_delta(1.0), -0.0500045, 1e-7);
}

TEST(ReversalUpdate, TrainStepMatchesManualTwoGradientUpdate) {
  auto c = toy::sgd_config();
  auto b = toy::batch(6, 4);
  for (double p : {0.0, 0.5, 1.0}) {
    model::ModelBundle m(toy::dims(), 11);
    std::size_t feature_count = 0;
    for (const auto& q : m.feature_parameters()) feature_count += q.tensor->size();
    ASSERT_EQ(feature_count, 10u);
    const auto expected = toy::manual_update(m, b, c, p);
    train::Optimizer opt(c.optimizer, c);
    train::TrainState state;
    state.progress = p;
    train::train_step(b, m, c, state, opt);
    auto params = m.parameters();
    for (std::size_t k = 0; k < params.size(); ++k)
      for (std::size_t i = 0; i < params[k].tensor->size(); ++i)
        EXPECT_NEAR((*params[k].tensor)[i], expected[k][i], 1e-12)
            << params[k].name << " p=" << p;
  }
}

TEST(ReversalUpdate, ReversedFeatureGradientOpposesPlain) {
  auto c = toy::sgd_config();
  c.weights = {0, 0, 0, 1, 1};
  auto b = toy::batch(6, 5);
  model::ModelBundle m(toy::dims(), 3);
  train::ObjectiveOptions rev, plain;
  rev.include_task = plain.include_task = false;
  rev.grl_scale = 1.0;
  plain.adversarial_path = train::AdversarialPath::kPlain;
  const auto g_rev = toy::gradients(m, b, c, rev);
  const auto g_plain = toy::gradients(m, b, c, plain);
  const std::size_t features = m.feature_parameters().size();
  for (std::size_t k = 0; k < g_rev.size(); ++k)
    for (std::size_t i = 0; i < g_rev[k].size(); ++i)
      EXPECT_NEAR(g_rev[k][i], k < features ? -g_plain[k][i] : g_plain[k][i], 1e-14);
}

TEST(Lambda, ZeroMatchesSupervisedUpdate) {
  auto c = toy::sgd_config();
  c.weights.lambda = 0.0;
  auto b = toy::batch(6, 6);
  model::ModelBundle a(toy::dims(), 2), s(toy::dims(), 2);
  train::Optimizer oa(c.optimizer, c), os(c.optimizer, c);
  train::train_step(b, a, c, {}, oa);
  train::ObjectiveOptions task_only;
  task_only.include_alignment = task_only.include_adversarial = false;
  auto g = toy::gradients(s, b, c, task_only);
  auto pa = a.parameters(), ps = s.parameters();
  for (std::size_t k = 0; k < pa.size(); ++k)
    for (std::size_t i = 0; i < pa[k].tensor->size(); ++i)
      EXPECT_NEAR((*pa[k].tensor)[i], (*ps[k].tensor)[i] - c.lr * g[k][i], 1e-12);
}

TEST(Lambda, ZeroGivesTargetNoInfluence) {
  auto c = toy::sgd_config();
  c.weights.lambda = 0.0;
  auto b1 = toy::batch(6, 7);
  auto b2 = b1;
  for (auto& v : b2.target_inputs[0].data()) v = v * -3.0 + 7.0;
  model::ModelBundle m1(toy::dims(), 5), m2(toy::dims(), 5);
  train::ObjectiveOptions o;
  EXPECT_EQ(toy::gradients(m1, b1, c, o), toy::gradients(m2, b2, c, o));
}

TEST(Lambda, PositiveDoesUseTarget) {
  auto c = toy::sgd_config();
  auto b1 = toy::batch(6, 7);
  auto b2 = b1;
  for (auto& v : b2.target_inputs[0].data()) v = v * -3.0 + 7.0;
  model::ModelBundle m1(toy::dims(), 5), m2(toy::dims(), 5);
  train::ObjectiveOptions o;
  EXPECT_NE(toy::gradients(m1, b1, c, o), toy::gradients(m2, b2, c, o));
}

TEST(TargetBranch, FrozenFeaturesIgnoreTargetAlignmentGradients) {
  // With only the entropy term active, feature gradients must come from the
  // source half alone while the frozen target half reaches only the head.
  auto c = toy::sgd_config();
  c.weights = {0, 0, 1, 0, 1};
  auto b = toy::batch(6, 8);
  model::ModelBundle m(toy::dims(), 4);
  train::ObjectiveOptions entropy_only;
  entropy_only.include_task = false;
  entropy_only.include_adversarial = false;
  const auto g1 = toy::gradients(m, b, c, entropy_only);
  auto b2 = b;
  for (auto& v : b2.target_inputs[0].data()) v += 0.75;
  const auto g2 = toy::gradients(m, b2, c, entropy_only);
  const std::size_t features = m.feature_parameters().size();
  for (std::size_t k = 0; k < features; ++k) EXPECT_EQ(g1[k], g2[k]);
  c.target_grad = true;
  EXPECT_NE(toy::gradients(m, b, c, entropy_only)[0], g1[0]);
}

TEST(Optimizer, DecoupledDecayShrinksExactly) {
  for (auto kind : {train::OptimizerKind::kAdamW, train::OptimizerKind::kPlainSgd}) {
    train::AdaptConfig c;
    c.lr = 0.01;
    c.weight_decay = 0.5;
    Tensor t = Tensor::matrix({{1.0, -2.0, 3.5}});
    t.set_requires_grad(true);
    train::Optimizer opt(kind, c);
    const double factor = 1.0 - 0.01 * 0.5;
    opt.step({{"t", &t}});
    EXPECT_EQ(t[0], 1.0 * factor);
    EXPECT_EQ(t[1], -2.0 * factor);
    opt.step({{"t", &t}});
    EXPECT_EQ(t[2], 3.5 * factor * factor);
    EXPECT_EQ(opt.steps_taken(), 2u);
  }
}

TEST(Optimizer, AdamFirstStepMovesByLr) {
  train::AdaptConfig c;
  c.lr = 0.01;
  c.weight_decay = 0.0;
  Tensor t = Tensor::matrix({{1.0, 1.0}});
  t.set_requires_grad(true);
  t.grad()[0] = 3.0;
  t.grad()[1] = -0.2;
  train::Optimizer opt(train::OptimizerKind::kAdamW, c);
  opt.step({{"t", &t}});
  EXPECT_NEAR(t[0], 1.0 - 0.01, 1e-9);
  EXPECT_NEAR(t[1], 1.0 + 0.01, 1e-9);
}

TEST(RunTraining, SingleStepEpoch) {
  auto s = small_domain("s", data::Role::kSource, 8, 1);
  auto t = small_domain("t", data::Role::kTarget, 8, 2, 0.5);
  auto c = quick_config();
  c.epochs = 1;
  std::size_t steps = 0;
  train::run_training({s}, t, toy::dims(), c, "one",
                      [&](const train::TrainState&, const train::PairedBatch&,
                          const mmpda::losses::LossBreakdown&) { ++steps; });
  EXPECT_EQ(steps, 1u);
}

TEST(RunTraining, ProgressScheduleAndDomainOrder) {
  auto a = small_domain("a", data::Role::kSource, 24, 1);
  auto b = small_domain("b", data::Role::kSource, 8, 2);
  auto t = small_domain("t", data::Role::kTarget, 16, 3, 0.5);
  auto c = quick_config();
  c.epochs = 3;
  std::vector<double> progress;
  std::vector<std::string> domains;
  auto result = train::run_training(
      {a, b}, t, toy::dims(), c, "sched",
      [&](const train::TrainState& st, const train::PairedBatch&,
          const mmpda::losses::LossBreakdown&) {
        progress.push_back(st.progress);
        domains.push_back(st.current_domain);
        EXPECT_EQ(st.total_steps, 12u);
      });
  ASSERT_EQ(progress.size(), 12u);
  EXPECT_EQ(progress.back(), 1.0);
  for (std::size_t i = 0; i < progress.size(); ++i)
    EXPECT_NEAR(progress[i] - (i == 0 ? 0.0 : progress[i - 1]), 1.0 / 12.0, 1e-15);
  const std::vector<std::string> epoch = {"a", "a", "a", "b"};
  for (std::size_t i = 0; i < domains.size(); ++i) EXPECT_EQ(domains[i], epoch[i % 4]);
  ASSERT_EQ(result.report.per_epoch.size(), 3u);
  auto doc = train::to_json(result.report);
  EXPECT_EQ(doc["per_epoch"][0]["source_domain_trace"][0]["domain"], "a");
  EXPECT_EQ(doc["per_epoch"][0]["source_domain_trace"][0]["steps"], 3);
  EXPECT_EQ(doc["per_epoch"][0]["source_domain_trace"][1]["steps"], 1);
  EXPECT_TRUE(doc["final"].contains("accuracy"));
  EXPECT_EQ(doc["gap_matrix"]["domains"].size(), 3u);
}

TEST(RunTraining, DeterministicReport) {
  auto s = small_domain("s", data::Role::kSource, 32, 1);
  auto t = small_domain("t", data::Role::kTarget, 32, 2, 0.5);
  auto c = quick_config();
  auto r1 = train::run_training({s}, t, toy::dims(), c, "det");
  auto r2 = train::run_training({s}, t, toy::dims(), c, "det");
  EXPECT_EQ(train::to_json(r1.report).dump(), train::to_json(r2.report).dump());
  c.seed = 4;
  auto r3 = train::run_training({s}, t, toy::dims(), c, "det");
  EXPECT_NE(train::to_json(r1.report).dump(), train::to_json(r3.report).dump());
}

TEST(RunTraining, BaselineReportsZeroAdaptationLosses) {
  auto s = small_domain("s", data::Role::kSource, 16, 1);
  auto t = small_domain("t", data::Role::kTarget, 16, 2, 0.5);
  auto c = quick_config();
  c.weights.lambda = 0.0;
  auto r = train::run_training({s}, t, toy::dims(), c);
  for (const auto& e : r.report.per_epoch) {
    EXPECT_EQ(e.mean.coral, 0.0);
    EXPECT_EQ(e.mean.mdd, 0.0);
    EXPECT_EQ(e.mean.entropy, 0.0);
    EXPECT_EQ(e.mean.adversarial, 0.0);
    EXPECT_EQ(e.mean.total, e.mean.task);
  }
}

TEST(RunTraining, ContractErrors) {
  auto s = small_domain("s", data::Role::kSource, 16, 1);
  auto t = small_domain("t", data::Role::kTarget, 16, 2);
  auto c = quick_config();
  EXPECT_THROW(train::run_training({}, t, toy::dims(), c), ContractError);
  c.batch_size = 1;
  EXPECT_THROW(train::run_training({s}, t, toy::dims(), c), ContractError);
}

TEST(TrainStep, NonFiniteInputDiverges) {
  auto c = toy::sgd_config();
  auto b = toy::batch(6, 9);
  b.source_inputs[0][2] = NAN;
  model::ModelBundle m(toy::dims(), 1);
  train::Optimizer opt(c.optimizer, c);
  train::TrainState st;
  st.global_step = 17;
  try {
    train::train_step(b, m, c, st, opt);
    FAIL() << "expected divergence";
  } catch (const train::DivergenceError& e) {
    EXPECT_EQ(e.step(), 17u);
  }
}

TEST(TrainStep, ExplodingLearningRateDiverges) {
  auto s = small_domain("s", data::Role::kSource, 32, 1);
  auto t = small_domain("t", data::Role::kTarget, 32, 2, 0.5);
  auto c = quick_config();
  c.optimizer = train::OptimizerKind::kPlainSgd;
  c.lr = 1e300;
  c.grad_clip = 0.0;
  c.epochs = 5;
  EXPECT_THROW(train::run_training({s}, t, toy::dims(), c), train::DivergenceError);
}

TEST(AdaptConfig, JsonRoundTripAndValidation) {
  train::AdaptConfig c;
  c.lr = 3e-4;
  c.optimizer = train::OptimizerKind::kPlainSgd;
  c.mdd_pairing = mmpda::losses::MddPairing::kRandom;
  c.grl = false;
  auto back = train::adapt_config_from_json(train::to_json(c));
  EXPECT_EQ(train::to_json(back), train::to_json(c));
  c.lr = 0.0;
  EXPECT_THROW(c.validate(), ContractError);
  c.lr = 1e-3;
  c.pseudo_threshold = 1.0;
  EXPECT_THROW(c.validate(), ContractError);
}

}  // namespace
