#include <benchmark/benchmark.h>

#include "mmpda/losses.hpp"
#include "mmpda/model.hpp"
#include "mmpda/ndgraph.hpp"
#include "mmpda/rng.hpp"
#include "mmpda/synthdata.hpp"
#include "mmpda/trainer.hpp"

namespace nd = mmpda::nd;
using mmpda::CounterRng;

namespace {

nd::Tensor random_tensor(std::size_t rows, std::size_t cols, CounterRng& rng) {
  nd::Tensor t(nd::Shape{rows, cols});
  for (auto& v : t.data()) v = rng.uniform(-1.0, 1.0);
  return t;
}

void BM_MatmulBackward(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  CounterRng rng(1);
  nd::Tensor a = random_tensor(n, n, rng), b = random_tensor(n, n, rng);
  a.set_requires_grad(true);
  for (auto _ : state) {
    a.zero_grad();
    nd::Graph g;
    g.backward(nd::sum(nd::matmul(g.param(a), g.constant(b))));
    benchmark::DoNotOptimize(a.grad().data());
  }
  state.SetComplexityN(state.range(0));
}
BENCHMARK(BM_MatmulBackward)->RangeMultiplier(2)->Range(8, 64)->Complexity();

void BM_Coral(benchmark::State& state) {
  CounterRng rng(2);
  nd::Tensor s = random_tensor(32, 16, rng), t = random_tensor(32, 16, rng);
  s.set_requires_grad(true);
  for (auto _ : state) {
    s.zero_grad();
    nd::Graph g;
    g.backward(mmpda::losses::coral(g.param(s), g.constant(t)));
    benchmark::DoNotOptimize(s.grad().data());
  }
}
BENCHMARK(BM_Coral);

void BM_TrainStep(benchmark::State& state) {
  const auto specs = mmpda::data::shift_2s1t(1);
  const auto source = mmpda::data::generate_domain(specs.sources[0]);
  const auto target = mmpda::data::generate_domain(specs.target);
  mmpda::model::ModelDims dims;
  dims.modality_inputs = source.widths();
  mmpda::model::ModelBundle model(dims, 1);
  mmpda::train::AdaptConfig config;
  config.weights.lambda = static_cast<double>(state.range(0));
  mmpda::train::Optimizer optimizer(config.optimizer, config);
  CounterRng rng(3);
  mmpda::train::TrainState st;
  st.progress = 0.5;
  for (auto _ : state) {
    auto batch = mmpda::train::sample_paired_batch(source, target, config.batch_size, rng);
    benchmark::DoNotOptimize(mmpda::train::train_step(batch, model, config, st, optimizer));
  }
}
BENCHMARK(BM_TrainStep)->Arg(0)->Arg(10);

void BM_GenerateDomain(benchmark::State& state) {
  auto spec = mmpda::data::shift_2s1t(4).sources[0];
  spec.count = static_cast<std::size_t>(state.range(0));
  for (auto _ : state) benchmark::DoNotOptimize(mmpda::data::generate_domain(spec));
}
BENCHMARK(BM_GenerateDomain)->Arg(512)->Arg(10000);

}  // namespace

BENCHMARK_MAIN();
