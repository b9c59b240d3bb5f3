#include "mmpda/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <functional>

#include "mmpda/losses.hpp"
#include "mmpda/model.hpp"
#include "mmpda/rng.hpp"

namespace mmpda::gradcheck {

using nd::Graph;
using nd::Shape;
using nd::Tensor;
using nd::Var;

namespace {

Tensor random_tensor(std::size_t rows, std::size_t cols, CounterRng& rng,
                     double lo = -1.0, double hi = 1.0) {
  Tensor t(Shape{rows, cols});
  for (auto& v : t.data()) v = rng.uniform(lo, hi);
  return t;
}

std::vector<int> random_labels(std::size_t n, CounterRng& rng) {
  std::vector<int> out(n);
  for (auto& l : out) l = static_cast<int>(rng.below(2));
  return out;
}

std::vector<double> random_weights(std::size_t n, CounterRng& rng) {
  std::vector<double> out(n);
  for (auto& w : out) w = rng.uniform(1.0, 2.0);
  return out;
}

std::vector<Tensor*> tensors_of(const std::vector<model::NamedParam>& params) {
  std::vector<Tensor*> out;
  for (const auto& p : params) out.push_back(p.tensor);
  return out;
}

std::size_t count(const std::vector<Tensor*>& ts) {
  std::size_t n = 0;
  for (auto* t : ts) n += t->size();
  return n;
}

// Max relative error of the reversed gradient against -s times the numeric
// gradient of the un-reversed function.
double reversal_check(const Tensor& x, double s, double h) {
  auto f = [](Graph&, Var v) { return nd::sum(nd::tanh(nd::mul(v, v))); };
  Tensor probe = x;
  probe.set_requires_grad(true);
  {
    Graph g;
    g.backward(f(g, nd::grad_reverse(g.param(probe), s)));
  }
  double worst = 0.0;
  for (std::size_t i = 0; i < probe.size(); ++i) {
    const double saved = probe[i];
    auto eval = [&](double v) {
      probe[i] = v;
      Graph g;
      return f(g, g.constant(probe)).item();
    };
    const double numeric = (eval(saved + h) - eval(saved - h)) / (2.0 * h);
    probe[i] = saved;
    const double expected = -s * numeric;
    worst = std::max(worst, std::abs(probe.grad()[i] - expected) /
                                std::max(1.0, std::abs(expected)));
  }
  return worst;
}

}  // namespace

std::vector<CheckResult> run_gradient_suite(const SuiteOptions& o) {
  CounterRng rng(o.seed);
  const std::size_t n = o.batch, w = o.width;
  std::vector<CheckResult> out;
  auto record = [&](std::string name, double err, std::size_t coords) {
    out.push_back({std::move(name), err, coords});
  };

  // ---- w.r.t. feature inputs ----------------------------------------------
  {
    const Tensor p = random_tensor(n, 1, rng, 0.05, 0.95);
    const auto labels = random_labels(n, rng);
    record("bce_task/input",
           nd::finite_diff_check(
               [&](Graph&, Var v) { return losses::bce_task(v, labels); }, p, o.h),
           p.size());
  }
  {
    const Tensor s = random_tensor(n, w, rng), t = random_tensor(n, w, rng);
    record("coral/source",
           nd::finite_diff_check(
               [&](Graph& g, Var v) { return losses::coral(v, g.constant(t)); }, s,
               o.h),
           s.size());
    record("coral/target",
           nd::finite_diff_check(
               [&](Graph& g, Var v) { return losses::coral(g.constant(s), v); }, t,
               o.h),
           t.size());
  }
  {
    const Tensor s = random_tensor(n, w, rng), t = random_tensor(n, w, rng);
    const std::vector<int> ls{0, 1, 0, 1}, lt{1, 1, 0, 0};
    std::vector<int> src_labels(n), tgt_labels(n);
    for (std::size_t i = 0; i < n; ++i) {
      src_labels[i] = ls[i % ls.size()];
      tgt_labels[i] = lt[i % lt.size()];
    }
    record("mdd/source",
           nd::finite_diff_check(
               [&](Graph& g, Var v) {
                 return losses::mdd(v, g.constant(t), src_labels, tgt_labels);
               },
               s, o.h),
           s.size());
    record("mdd/target",
           nd::finite_diff_check(
               [&](Graph& g, Var v) {
                 return losses::mdd(g.constant(s), v, src_labels, tgt_labels);
               },
               t, o.h),
           t.size());
  }
  {
    const Tensor logits = random_tensor(n, w, rng, -2.0, 2.0);
    record("neg_entropy/logits",
           nd::finite_diff_check(
               [](Graph&, Var v) { return losses::neg_entropy(v); }, logits, o.h),
           logits.size());
  }
  {
    const Tensor ds = random_tensor(n, 1, rng, 0.05, 0.95);
    const Tensor dt = random_tensor(n, 1, rng, 0.05, 0.95);
    const auto ws = random_weights(n, rng), wt = random_weights(n, rng);
    record("adversarial/source",
           nd::finite_diff_check(
               [&](Graph& g, Var v) {
                 return losses::adversarial_domain_loss(v, g.constant(dt), ws, wt);
               },
               ds, o.h),
           ds.size());
    record("adversarial/target",
           nd::finite_diff_check(
               [&](Graph& g, Var v) {
                 return losses::adversarial_domain_loss(g.constant(ds), v, ws, wt);
               },
               dt, o.h),
           dt.size());
  }
  {
    const Tensor x = random_tensor(n, w, rng);
    for (double s : {0.5, 1.0}) {
      record("grad_reverse/s=" + std::string(s == 0.5 ? "0.5" : "1"),
             reversal_check(x, s, o.h), x.size());
    }
  }

  // ---- w.r.t. model parameters --------------------------------------------
  for (auto kind : {model::FusionKind::kGatedConcat, model::FusionKind::kCrossAttention}) {
    model::ModelDims dims;
    dims.modality_inputs = {w, w};
    dims.unimodal_width = 4;
    dims.fused_width = w;
    dims.encoder_hidden = {5};
    dims.discriminator_hidden = {4};
    dims.fusion.kind = kind;
    dims.fusion.heads = 2;
    dims.fusion.head_width = 2;
    model::ModelBundle m(dims, o.seed + 1);
    const std::string tag = "/" + model::to_string(kind) + "/params";

    std::vector<Tensor> xs{random_tensor(n, w, rng), random_tensor(n, w, rng)};
    std::vector<Tensor> xt{random_tensor(n, w, rng, -0.5, 1.5),
                           random_tensor(n, w, rng, -0.5, 1.5)};
    const auto labels = random_labels(n, rng);
    const std::vector<int> pseudo{0, 1, 1, 0};
    std::vector<int> tgt_pseudo(n);
    for (std::size_t i = 0; i < n; ++i) tgt_pseudo[i] = pseudo[i % pseudo.size()];

    const auto features = tensors_of(m.feature_parameters());
    auto with_heads = features;
    for (auto* t : tensors_of(m.head_parameters())) with_heads.push_back(t);
    const auto all = tensors_of(m.parameters());

    record("multitask_loss" + tag,
           nd::finite_diff_check_params(
               [&](Graph& g) {
                 auto r = m.forward(g, xs);
                 std::vector<Var> probs;
                 for (Var l : r.logits) probs.push_back(nd::softmax_rows(l));
                 return losses::multitask_loss(probs, labels, m.stream_count());
               },
               with_heads, o.h),
           count(with_heads));
    record("coral" + tag,
           nd::finite_diff_check_params(
               [&](Graph& g) {
                 return losses::coral(m.forward(g, xs).fused, m.forward(g, xt).fused);
               },
               features, o.h),
           count(features));
    record("mdd" + tag,
           nd::finite_diff_check_params(
               [&](Graph& g) {
                 return losses::mdd(m.forward(g, xs).fused, m.forward(g, xt).fused,
                                    labels, tgt_pseudo);
               },
               features, o.h),
           count(features));
    record("neg_entropy" + tag,
           nd::finite_diff_check_params(
               [&](Graph& g) {
                 auto a = m.forward(g, xs).logits.back();
                 auto b = m.forward(g, xt).logits.back();
                 return losses::neg_entropy(nd::concat_rows({a, b}));
               },
               with_heads, o.h),
           count(with_heads));

    // Class probabilities and entropy weights enter the adversarial loss as
    // constants, so they are fixed from the initial model.
    Tensor ps, pt;
    {
      Graph g;
      ps = nd::softmax_rows(m.forward(g, xs).logits.back()).value();
      pt = nd::softmax_rows(m.forward(g, xt).logits.back()).value();
    }
    const auto ws = losses::entropy_weights(ps), wt = losses::entropy_weights(pt);
    record("adversarial" + tag,
           nd::finite_diff_check_params(
               [&](Graph& g) {
                 Var hs = model::conditional_map(m.forward(g, xs).fused, g.constant(ps));
                 Var ht = model::conditional_map(m.forward(g, xt).fused, g.constant(pt));
                 return losses::adversarial_domain_loss(m.discriminate(g, hs),
                                                        m.discriminate(g, ht), ws, wt);
               },
               all, o.h),
           count(all));
  }
  return out;
}

}  // namespace mmpda::gradcheck
