// Serial reference vs OpenMP kernel timings.

#include <benchmark/benchmark.h>

#include <random>
#include <vector>

#include "ellipse/augment.hpp"
#include "ellipse/harness.hpp"
#include "ellipse/net.hpp"
#include "ellipse/planner.hpp"

using namespace ellipse;

namespace {

struct LossFixture {
  HeadSpec head{8, 2};
  Mlp net;
  std::vector<Sample> batch;

  LossFixture() {
    const GridConfig grid;
    net = Mlp::random(default_layer_dims(grid.feature_size(), head), 1);
    std::mt19937_64 rng(2);
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    batch.resize(64);
    for (auto& s : batch) {
      s.features.resize(static_cast<std::size_t>(grid.feature_size()));
      for (double& x : s.features) x = u(rng);
      s.targets.resize(16);
      for (double& y : s.targets) y = u(rng);
    }
  }
};

template <bool Parallel>
void BM_LossAndGrad(benchmark::State& state) {
  static const LossFixture f;
  for (auto _ : state) {
    auto lg = Parallel ? loss_and_grad(f.net, f.head, f.batch, kDefaultLambdaReg)
                       : loss_and_grad_serial(f.net, f.head, f.batch, kDefaultLambdaReg);
    benchmark::DoNotOptimize(lg.loss);
  }
  state.SetItemsProcessed(state.iterations() * static_cast<long>(f.batch.size()));
}

template <bool Parallel>
void BM_RenderCloud(benchmark::State& state) {
  const StairWorld world;
  const auto geometry = StairGeometry::from_world(world);
  SensorConfig sensor;
  sensor.azimuth_bins = static_cast<int>(state.range(0));
  const Pose pose{world.start_x() + 1.0, 0.05, 0.55, 0.1, 0.0, 0.0};
  for (auto _ : state) {
    auto cloud = Parallel ? render_cloud(geometry, pose, sensor) : render_cloud_serial(geometry, pose, sensor);
    benchmark::DoNotOptimize(cloud.points.data());
  }
  state.SetItemsProcessed(state.iterations() * sensor.azimuth_bins * sensor.elevation_bins);
}

template <bool Parallel>
void BM_MppiUpdate(benchmark::State& state) {
  MppiConfig cfg;
  cfg.rollouts = static_cast<int>(state.range(0));
  std::vector<WaypointPrediction> preds;
  for (int k = 1; k <= 8; ++k) preds.push_back({{0.3 * k, 0.0}, SpdMatrix::identity(2).scaled(0.01)});
  const auto belief = replace(preds);
  const Corridor corridor{0.0, 0.5};
  const RolloutCost cost = [&](const std::vector<RobotState>& traj, const std::vector<Control>& u) {
    return trajectory_cost(traj, u, belief, corridor, cfg.weights, cfg.confidence_floor);
  };
  const std::vector<Control> nominal(static_cast<std::size_t>(cfg.horizon), Control{0.5, 0.0});
  Rng rng(3);
  for (auto _ : state) {
    auto r = Parallel ? mppi_update(RobotState{}, nominal, cfg, rng, cost)
                      : mppi_update_serial(RobotState{}, nominal, cfg, rng, cost);
    benchmark::DoNotOptimize(r.applied.v);
  }
  state.SetItemsProcessed(state.iterations() * cfg.rollouts);
}

template <bool Parallel>
void BM_OracleTrials(benchmark::State& state) {
  ExperimentConfig cfg;
  cfg.sim.source = WaypointSource::Oracle;
  cfg.trials = static_cast<int>(state.range(0));
  cfg.mppi.rollouts = 64;
  for (auto _ : state) {
    auto out = Parallel ? run_trials(cfg, {}) : run_trials_serial(cfg, {});
    benchmark::DoNotOptimize(out.data());
  }
  state.SetItemsProcessed(state.iterations() * cfg.trials);
}

}  // namespace

BENCHMARK(BM_LossAndGrad<false>)->Name("loss_and_grad/serial")->Unit(benchmark::kMillisecond);
BENCHMARK(BM_LossAndGrad<true>)->Name("loss_and_grad/openmp")->Unit(benchmark::kMillisecond);
BENCHMARK(BM_RenderCloud<false>)->Name("render_cloud/serial")->Arg(64)->Arg(256)->Unit(benchmark::kMicrosecond);
BENCHMARK(BM_RenderCloud<true>)->Name("render_cloud/openmp")->Arg(64)->Arg(256)->Unit(benchmark::kMicrosecond);
BENCHMARK(BM_MppiUpdate<false>)->Name("mppi_update/serial")->Arg(256)->Arg(1024)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_MppiUpdate<true>)->Name("mppi_update/openmp")->Arg(256)->Arg(1024)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_OracleTrials<false>)->Name("trials/serial")->Arg(8)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_OracleTrials<true>)->Name("trials/openmp")->Arg(8)->Unit(benchmark::kMillisecond);

BENCHMARK_MAIN();
