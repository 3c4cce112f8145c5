#include "bm2/approximator.hpp"
#include "bm2/benchmark_oracle.hpp"
#include "bm2/ref_process.hpp"
#include "bm2/sinkhorn_flow.hpp"

#include <benchmark/benchmark.h>

using namespace bm2;

namespace {

Samples normal_batch(Eigen::Index n, int d, std::uint64_t seed) {
  RngStream rng(seed);
  return gaussian_sample(GaussianSpec::isotropic(Vector::Zero(d), 1.0), n, rng);
}

/// Forward pass of both heads; range(0) is the batch, range(1) the width.
void BM_NetForward(benchmark::State& state) {
  const auto n = state.range(0);
  RngStream init(1);
  const DriftNet<float> net(NetShape{2, static_cast<int>(state.range(1)), 3, false}, init);
  const Samples x = normal_batch(n, 2, 2);
  const std::vector<double> t(static_cast<std::size_t>(n), 0.5);
  for (auto _ : state) benchmark::DoNotOptimize(net.forward(x, t));
  state.SetItemsProcessed(state.iterations() * n);
}
BENCHMARK(BM_NetForward)->Args({256, 64})->Args({256, 128})->Args({1000, 768});

void BM_LossAndGrad(benchmark::State& state) {
  const auto n = state.range(0);
  RngStream init(1);
  const DriftNet<float> net(NetShape{2, static_cast<int>(state.range(1)), 3, false}, init);
  RegressionBatch b;
  b.fwd_x = normal_batch(n, 2, 3);
  b.fwd_t.assign(static_cast<std::size_t>(n), 0.3);
  b.fwd_target = normal_batch(n, 2, 4);
  b.bwd_x = normal_batch(n, 2, 5);
  b.bwd_t.assign(static_cast<std::size_t>(n), 0.7);
  b.bwd_target = normal_batch(n, 2, 6);
  for (auto _ : state) benchmark::DoNotOptimize(loss_and_grad(net, b));
  state.SetItemsProcessed(state.iterations() * n);
}
BENCHMARK(BM_LossAndGrad)->Args({256, 64})->Args({256, 128})->Args({1000, 768});

void BM_BridgeSample(benchmark::State& state) {
  const RefDynamics dyn(1.0);
  const Vector x0 = Vector::Zero(2), x1 = Vector::Ones(2);
  RngStream rng(7);
  for (auto _ : state) benchmark::DoNotOptimize(bridge_sample(dyn, x0, x1, 0.4, rng));
}
BENCHMARK(BM_BridgeSample);

void BM_EulerMaruyama(benchmark::State& state) {
  const Samples x = normal_batch(state.range(0), 2, 8);
  const BatchDrift drift = [](const Samples& s, double) { return Samples(-s); };
  const RefDynamics dyn(1.0);
  const TimeGrid grid = TimeGrid::forward(200);
  RngStream rng(9);
  for (auto _ : state) benchmark::DoNotOptimize(euler_maruyama(drift, x, grid, dyn, rng));
  state.SetItemsProcessed(state.iterations() * state.range(0));
}
BENCHMARK(BM_EulerMaruyama)->Arg(1000);

void BM_GridSinkhorn(benchmark::State& state) {
  const GaussianSpec a{Vector::Constant(1, -2.0), Matrix::Constant(1, 1, 1.0)};
  const GaussianSpec b{Vector::Constant(1, 2.0), Matrix::Constant(1, 1, 1.0)};
  for (auto _ : state) benchmark::DoNotOptimize(grid_sinkhorn_gaussian_1d(a, b, 1.0, static_cast<int>(state.range(0))));
}
BENCHMARK(BM_GridSinkhorn)->Arg(200)->Arg(400)->Unit(benchmark::kMillisecond);

void BM_MixtureDrift(benchmark::State& state) {
  const MixtureSbInstance inst = mixture_sb_build(GaussianSpec::isotropic(Vector::Zero(2), 1.0), pentagon_potential(2), 1.0);
  const Samples x = normal_batch(256, 2, 10);
  for (auto _ : state) benchmark::DoNotOptimize(inst.drift(x, 0.5));
  state.SetItemsProcessed(state.iterations() * 256);
}
BENCHMARK(BM_MixtureDrift);

void BM_FlowRhs(benchmark::State& state) {
  const FlowProblem p;
  const GaussFlowState s = p.initial_state();
  for (auto _ : state) benchmark::DoNotOptimize(flow_rhs(s, p));
}
BENCHMARK(BM_FlowRhs);

}  // namespace
BENCHMARK_MAIN();
