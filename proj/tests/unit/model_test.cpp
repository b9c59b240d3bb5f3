#include "mmpda/model.hpp"

#include <cmath>

#include <gtest/gtest.h>
#include <nlohmann/json.hpp>

#include "mmpda/errors.hpp"
#include "oracles.hpp"

namespace nd = mmpda::nd;
namespace model = mmpda::model;
using mmpda::ContractError;
using mmpda::CounterRng;
using nd::Graph;
using nd::Shape;
using nd::Tensor;
using nd::Var;

namespace {

model::ModelDims tiny_dims() {
  model::ModelDims d;
  d.modality_inputs = {2, 2};
  d.unimodal_width = 2;
  d.fused_width = 2;
  d.encoder_hidden = {2};
  d.discriminator_hidden = {};
  return d;
}

void zero(model::Linear& l) {
  for (auto& v : l.weight.data()) v = 0.0;
  for (auto& v : l.bias.data()) v = 0.0;
}

TEST(Encode, ZeroInputThroughZeroFinalLayer) {
  model::ModelBundle m(tiny_dims(), 1);
  zero(m.encoders()[0].back());
  Graph g;
  auto f = m.encode(g, g.constant(Tensor(Shape{3, 2})), 0).value();
  for (double v : f.data()) EXPECT_EQ(v, 0.0);
}

TEST(Encode, Deterministic) {
  model::ModelBundle m(tiny_dims(), 1);
  Graph g;
  Tensor x = Tensor::matrix({{0.3, -0.7}});
  const Tensor first = m.encode(g, g.constant(x), 1).value();
  EXPECT_EQ(m.encode(g, g.constant(x), 1).value(), first);
}

TEST(Encode, HandComputedNetwork) {
  model::ModelBundle m(tiny_dims(), 1);
  auto& l = m.encoders()[0];
  l[0].weight = Tensor::matrix({{0.5, -1.0}, {0.25, 2.0}});
  l[0].bias = Tensor::matrix({{0.1, -0.2}});
  l[1].weight = Tensor::matrix({{1.5, 0.0}, {-0.5, 1.0}});
  l[1].bias = Tensor::matrix({{0.0, 0.3}});
  const double x0 = 0.8, x1 = -0.4;
  const double h0 = std::tanh(x0 * 0.5 + x1 * 0.25 + 0.1);
  const double h1 = std::tanh(x0 * -1.0 + x1 * 2.0 - 0.2);
  const double y0 = h0 * 1.5 + h1 * -0.5 + 0.0;
  const double y1 = h0 * 0.0 + h1 * 1.0 + 0.3;
  Graph g;
  auto y = m.encode(g, g.constant(Tensor::matrix({{x0, x1}})), 0).value();
  EXPECT_NEAR(y.at(0, 0), y0, 1e-12);
  EXPECT_NEAR(y.at(0, 1), y1, 1e-12);
}

TEST(Encode, UnknownModalityAndWidthMismatch) {
  model::ModelBundle m(tiny_dims(), 1);
  Graph g;
  EXPECT_THROW(m.encode(g, g.constant(Tensor(Shape{1, 2})), 2), ContractError);
  EXPECT_THROW(m.encode(g, g.constant(Tensor(Shape{1, 3})), 0), ContractError);
}

TEST(Fuse, SingleModalityIdentityProjection) {
  auto d = tiny_dims();
  d.modality_inputs = {2};
  model::ModelBundle m(d, 2);
  auto& gate = m.fusion_layers()[0];
  auto& proj = m.fusion_layers()[1];
  zero(gate);
  for (auto& b : gate.bias.data()) b = 50.0;  // sigmoid(50) == 1 in double
  zero(proj);
  proj.weight = Tensor::identity(2);
  Graph g;
  Tensor f = Tensor::matrix({{1.25, -3.0}});
  EXPECT_EQ(m.fuse(g, {g.constant(f)}).value(), f);
}

TEST(Fuse, PermutingIdenticalFeatures) {
  model::ModelBundle m(tiny_dims(), 3);
  Graph g;
  Var a = g.constant(Tensor::matrix({{0.4, -0.1}}));
  Var b = g.constant(Tensor::matrix({{0.4, -0.1}}));
  const Tensor ab = m.fuse(g, {a, b}).value();
  EXPECT_EQ(m.fuse(g, {b, a}).value(), ab);
}

TEST(Fuse, HandSetGate) {
  model::ModelBundle m(tiny_dims(), 4);
  auto& gate = m.fusion_layers()[0];
  auto& proj = m.fusion_layers()[1];
  // z = [a0, a1, b0, b1]; gate = sigmoid(z Wg + bg); M = (gate * z) Wp + bp.
  const std::vector<std::vector<double>> wg = {
      {0.1, 0.2, 0.0, -0.3}, {0.0, 0.5, 0.1, 0.0}, {-0.4, 0.0, 0.2, 0.1}, {0.3, 0.1, 0.0, 0.2}};
  const std::vector<double> bg = {0.05, -0.05, 0.1, 0.0};
  const std::vector<std::vector<double>> wp = {{1.0, 0.5}, {-0.5, 0.25}, {0.0, 1.0}, {2.0, -1.0}};
  const std::vector<double> bp = {0.1, -0.1};
  gate.weight = Tensor(Shape{4, 4});
  gate.bias = Tensor(Shape{1, 4});
  proj.weight = Tensor(Shape{4, 2});
  proj.bias = Tensor(Shape{1, 2});
  for (std::size_t i = 0; i < 4; ++i) {
    for (std::size_t j = 0; j < 4; ++j) gate.weight.at(i, j) = wg[i][j];
    for (std::size_t j = 0; j < 2; ++j) proj.weight.at(i, j) = wp[i][j];
    gate.bias[i] = bg[i];
  }
  proj.bias[0] = bp[0];
  proj.bias[1] = bp[1];
  const std::vector<double> z = {0.7, -1.2, 0.3, 0.9};
  std::vector<double> gated(4);
  for (std::size_t j = 0; j < 4; ++j) {
    double s = bg[j];
    for (std::size_t i = 0; i < 4; ++i) s += z[i] * wg[i][j];
    gated[j] = z[j] / (1.0 + std::exp(-s));
  }
  Graph g;
  auto out = m.fuse(g, {g.constant(Tensor::matrix({{z[0], z[1]}})),
                        g.constant(Tensor::matrix({{z[2], z[3]}}))})
                 .value();
  for (std::size_t j = 0; j < 2; ++j) {
    double expected = bp[j];
    for (std::size_t i = 0; i < 4; ++i) expected += gated[i] * wp[i][j];
    EXPECT_NEAR(out.at(0, j), expected, 1e-12);
  }
}

TEST(Fuse, WidthMismatchIsContractError) {
  model::ModelBundle m(tiny_dims(), 1);
  Graph g;
  EXPECT_THROW(m.fuse(g, {g.constant(Tensor(Shape{1, 3})), g.constant(Tensor(Shape{1, 2}))}),
               ContractError);
  EXPECT_THROW(m.fuse(g, {g.constant(Tensor(Shape{1, 2}))}), ContractError);
}

TEST(Fuse, GatedIsContinuous) {
  model::ModelBundle m(tiny_dims(), 6);
  CounterRng rng(2);
  for (int trial = 0; trial < 10; ++trial) {
    Tensor a = oracle::random_tensor(1, 2, rng), b = oracle::random_tensor(1, 2, rng);
    Graph g;
    auto base = m.fuse(g, {g.constant(a), g.constant(b)}).value();
    for (double eps : {1e-3, 1e-5, 1e-7}) {
      Tensor a2 = a;
      a2[0] += eps;
      auto moved = m.fuse(g, {g.constant(a2), g.constant(b)}).value();
      double delta = 0.0;
      for (std::size_t i = 0; i < base.size(); ++i)
        delta = std::max(delta, std::abs(moved[i] - base[i]));
      EXPECT_LT(delta, 10.0 * eps);
    }
  }
}

TEST(Fuse, CrossAttentionShapesAndDeterminism) {
  auto d = tiny_dims();
  d.fusion.kind = model::FusionKind::kCrossAttention;
  d.fusion.heads = 2;
  d.fusion.head_width = 3;
  d.fused_width = 5;
  model::ModelBundle m(d, 9);
  EXPECT_EQ(m.fusion_layers().size(), 2u * 3u + 1u);
  CounterRng rng(1);
  std::vector<Tensor> inputs{oracle::random_tensor(4, 2, rng), oracle::random_tensor(4, 2, rng)};
  Graph g1, g2;
  auto r1 = m.forward(g1, inputs), r2 = m.forward(g2, inputs);
  EXPECT_EQ(r1.fused.rows(), 4u);
  EXPECT_EQ(r1.fused.cols(), 5u);
  EXPECT_EQ(r1.fused.value(), r2.fused.value());
  EXPECT_EQ(r1.logits.size(), 3u);
}

TEST(Predict, ZeroHead) {
  model::ModelBundle m(tiny_dims(), 1);
  zero(m.heads()[2]);
  Graph g;
  auto logits = m.predict(g, g.constant(Tensor::matrix({{1.0, 2.0}})), 2);
  EXPECT_EQ(logits.value(), Tensor::matrix({{0.0, 0.0}}));
  auto p = nd::softmax_rows(logits).value();
  EXPECT_EQ(p, Tensor::matrix({{0.5, 0.5}}));
}

TEST(Predict, IdentityHead) {
  model::ModelBundle m(tiny_dims(), 1);
  zero(m.heads()[0]);
  m.heads()[0].weight = Tensor::identity(2);
  Graph g;
  EXPECT_EQ(m.predict(g, g.constant(Tensor::matrix({{3.0, -1.0}})), 0).value(),
            Tensor::matrix({{3.0, -1.0}}));
}

TEST(Predict, DotProductOracle) {
  auto d = tiny_dims();
  d.unimodal_width = 5;
  d.num_classes = 3;
  model::ModelBundle m(d, 12);
  CounterRng rng(4);
  Tensor f = oracle::random_tensor(3, 5, rng);
  for (auto& b : m.heads()[1].bias.data()) b = rng.uniform(-1, 1);
  const auto& w = m.heads()[1].weight;
  const auto& b = m.heads()[1].bias;
  Graph g;
  auto logits = m.predict(g, g.constant(f), 1).value();
  for (std::size_t r = 0; r < 3; ++r)
    for (std::size_t c = 0; c < 3; ++c) {
      double dot = b[c];
      for (std::size_t k = 0; k < 5; ++k) dot += f.at(r, k) * w.at(k, c);
      EXPECT_NEAR(logits.at(r, c), dot, 1e-12);
    }
}

TEST(Predict, UnknownStream) {
  model::ModelBundle m(tiny_dims(), 1);
  Graph g;
  EXPECT_THROW(m.predict(g, g.constant(Tensor(Shape{1, 2})), 3), ContractError);
}

// h[i * C + c] = M[i] * p[c].
TEST(ConditionalMap, UniformProbabilities) {
  Graph g;
  auto h = model::conditional_map(g.constant(Tensor::matrix({{1.0, 2.0}})),
                                  g.constant(Tensor::matrix({{0.5, 0.5}})));
  EXPECT_EQ(h.value(), Tensor::matrix({{0.5, 0.5, 1.0, 1.0}}));
}

TEST(ConditionalMap, OneHotSelectsBlock) {
  Graph g;
  auto h = model::conditional_map(g.constant(Tensor::matrix({{1.0, 0.0}})),
                                  g.constant(Tensor::matrix({{1.0, 0.0}})));
  EXPECT_EQ(h.value(), Tensor::matrix({{1.0, 0.0, 0.0, 0.0}}));
}

TEST(ConditionalMap, OuterProductOracle) {
  Graph g;
  auto h = model::conditional_map(g.constant(Tensor::matrix({{2.0, 3.0}})),
                                  g.constant(Tensor::matrix({{0.2, 0.8}})))
               .value();
  const std::vector<double> expected = {0.4, 1.6, 0.6, 2.4};
  for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(h[i], expected[i], 1e-15);
}

TEST(ConditionalMap, RejectsUnnormalized) {
  Graph g;
  EXPECT_THROW(model::conditional_map(g.constant(Tensor::matrix({{1.0, 2.0}})),
                                      g.constant(Tensor::matrix({{0.5, 0.6}}))),
               ContractError);
}

TEST(ConditionalMap, LinearInFeatures) {
  CounterRng rng(8);
  for (int trial = 0; trial < 20; ++trial) {
    Tensor m = oracle::random_tensor(3, 4, rng);
    Tensor p(Shape{3, 2});
    for (std::size_t r = 0; r < 3; ++r) {
      p.at(r, 0) = rng.uniform();
      p.at(r, 1) = 1.0 - p.at(r, 0);
    }
    const double a = rng.uniform(-3, 3);
    Tensor am = m;
    for (auto& v : am.data()) v *= a;
    Graph g;
    auto h1 = model::conditional_map(g.constant(am), g.constant(p)).value();
    auto h2 = model::conditional_map(g.constant(m), g.constant(p)).value();
    for (std::size_t i = 0; i < h1.size(); ++i) EXPECT_NEAR(h1[i], a * h2[i], 1e-12);
  }
}

TEST(Discriminate, ZeroInitializedIsHalf) {
  model::ModelBundle m(tiny_dims(), 1);
  for (auto& l : m.discriminator()) zero(l);
  Graph g;
  EXPECT_EQ(m.discriminate(g, g.constant(Tensor::matrix({{5, -3, 2, 8}}))).item(), 0.5);
}

TEST(Discriminate, SaturationIsClamped) {
  model::ModelBundle m(tiny_dims(), 1);
  auto& l = m.discriminator()[0];
  zero(l);
  l.bias[0] = 1e6;
  Graph g;
  const double p = m.discriminate(g, g.constant(Tensor::matrix({{0, 0, 0, 0}}))).item();
  EXPECT_LT(p, 1.0);
  EXPECT_TRUE(std::isfinite(p));
  l.bias[0] = -1e6;
  Graph g2;
  const double q = m.discriminate(g2, g2.constant(Tensor::matrix({{0, 0, 0, 0}}))).item();
  EXPECT_GT(q, 0.0);
}

TEST(Discriminate, HandSetSingleLayer) {
  model::ModelBundle m(tiny_dims(), 1);
  ASSERT_EQ(m.discriminator().size(), 1u);
  auto& l = m.discriminator()[0];
  l.weight = Tensor::matrix({{0.7}, {-2.0}, {3.0}, {1.0}});
  l.bias = Tensor::matrix({{-0.2}});
  Graph g;
  const double p = m.discriminate(g, g.constant(Tensor::matrix({{1, 0, 0, 0}}))).item();
  EXPECT_NEAR(p, 1.0 / (1.0 + std::exp(-(0.7 - 0.2))), 1e-12);
}

TEST(Discriminate, StrictlyInsideUnitInterval) {
  auto d = tiny_dims();
  d.discriminator_hidden = {8};
  model::ModelBundle m(d, 5);
  CounterRng rng(6);
  for (int trial = 0; trial < 200; ++trial) {
    Graph g;
    auto p = m.discriminate(g, g.constant(oracle::random_tensor(4, 4, rng, -1e3, 1e3))).value();
    for (double v : p.data()) {
      EXPECT_GT(v, 0.0);
      EXPECT_LT(v, 1.0);
    }
  }
}

TEST(GrlSchedule, KnownValues) {
  EXPECT_EQ(model::grl_schedule(0.0), 0.0);
  EXPECT_NEAR(model::grl_schedule(0.1), 0.46212, 1e-5);
  EXPECT_NEAR(model::grl_schedule(0.5), 0.98661, 1e-5);
  EXPECT_NEAR(model::grl_schedule(1.0), 0.99991, 1e-5);
}

TEST(GrlSchedule, MonotoneAndBounded) {
  double prev = -1.0;
  for (int i = 0; i <= 1000; ++i) {
    const double s = model::grl_schedule(i / 1000.0);
    EXPECT_GT(s, prev);
    EXPECT_GE(s, 0.0);
    EXPECT_LT(s, 1.0);
    prev = s;
  }
}

TEST(GrlSchedule, OutOfRange) {
  EXPECT_THROW(model::grl_schedule(-0.01), ContractError);
  EXPECT_THROW(model::grl_schedule(1.01), ContractError);
  EXPECT_THROW(model::grl_schedule(NAN), ContractError);
}

TEST(Model, InitializationBoundsAndSeeding) {
  model::ModelDims d;
  d.modality_inputs = {8, 8};
  model::ModelBundle a(d, 7), b(d, 7), c(d, 8);
  bool differs = false;
  auto pa = a.parameters(), pb = b.parameters(), pc = c.parameters();
  for (std::size_t k = 0; k < pa.size(); ++k) {
    EXPECT_EQ(*pa[k].tensor, *pb[k].tensor);
    differs = differs || !(*pa[k].tensor == *pc[k].tensor);
    const auto& t = *pa[k].tensor;
    if (pa[k].name.ends_with(".bias")) {
      for (double v : t.data()) EXPECT_EQ(v, 0.0);
    } else {
      const double limit = std::sqrt(6.0 / static_cast<double>(t.rows() + t.cols()));
      for (double v : t.data()) EXPECT_LE(std::abs(v), limit);
    }
  }
  EXPECT_TRUE(differs);
}

TEST(Model, ParameterNamesAndGroups) {
  model::ModelBundle m(tiny_dims(), 1);
  auto names = [](const std::vector<model::NamedParam>& ps) {
    std::vector<std::string> out;
    for (const auto& p : ps) out.push_back(p.name);
    return out;
  };
  EXPECT_EQ(names(m.feature_parameters()),
            (std::vector<std::string>{
                "encoder.0.layer0.weight", "encoder.0.layer0.bias",
                "encoder.0.layer1.weight", "encoder.0.layer1.bias",
                "encoder.1.layer0.weight", "encoder.1.layer0.bias",
                "encoder.1.layer1.weight", "encoder.1.layer1.bias",
                "fusion.gate.weight", "fusion.gate.bias",
                "fusion.proj.weight", "fusion.proj.bias"}));
  EXPECT_EQ(names(m.head_parameters()),
            (std::vector<std::string>{"head.0.weight", "head.0.bias", "head.1.weight",
                                      "head.1.bias", "head.fused.weight",
                                      "head.fused.bias"}));
  EXPECT_EQ(m.parameters().size(), 12u + 6u + 2u);
}

TEST(Checkpoint, RoundTripsBitExactly) {
  auto d = tiny_dims();
  d.fusion.kind = model::FusionKind::kCrossAttention;
  model::ModelBundle m(d, 31);
  for (auto& p : m.parameters())
    for (auto& v : p.tensor->data()) v += 1e-3 / 3.0;
  const auto doc = model::to_checkpoint(m);
  auto restored = model::from_checkpoint(nlohmann::json::parse(doc.dump()));
  auto a = m.parameters(), b = restored.parameters();
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t k = 0; k < a.size(); ++k) {
    EXPECT_EQ(a[k].name, b[k].name);
    EXPECT_EQ(*a[k].tensor, *b[k].tensor);
  }
  EXPECT_EQ(model::to_checkpoint(restored).dump(), doc.dump());
}

TEST(Checkpoint, RejectsShapeMismatch) {
  model::ModelBundle m(tiny_dims(), 1);
  auto doc = model::to_checkpoint(m);
  doc["params"][0]["values"].erase(0);
  EXPECT_ANY_THROW(model::from_checkpoint(doc));
}

}  // namespace
