#include <benchmark/benchmark.h>

#include "cubeseg/eval.hpp"
#include "cubeseg/infer.hpp"
#include "cubeseg/model.hpp"
#include "cubeseg/scene.hpp"
#include "cubeseg/train.hpp"

using namespace cubeseg;

namespace {

PointCloud bench_cloud(int points) {
  SceneSpec spec;
  spec.instances_min = spec.instances_max = 4;
  spec.points_min = spec.points_max = points / 4;
  spec.size_min = 0.1;
  spec.size_max = 0.25;
  spec.min_centroid_separation = 0.3;
  spec.background_points = points / 16;
  spec.rng_seed = 99;
  return generate_scene(spec);
}

ModelConfig bench_config(Paradigm paradigm, int n_s) {
  ModelConfig cfg;
  cfg.paradigm = paradigm;
  cfg.n_s = n_s;
  return cfg;
}

void ForwardFlatten(benchmark::State& state) {
  const int n_s = static_cast<int>(state.range(0));
  const PointCloud cloud = bench_cloud(1024);
  const ModelParams params = init_params(bench_config(Paradigm::Flatten, n_s), 1);
  const CubeGrid grid(n_s);
  for (auto _ : state) {
    ForwardOutputs out = forward(params, cloud, grid);
    benchmark::DoNotOptimize(out.category_scores.data().data());
  }
}
BENCHMARK(ForwardFlatten)->Arg(8)->Arg(20);

void ForwardProject(benchmark::State& state) {
  const int n_s = static_cast<int>(state.range(0));
  const PointCloud cloud = bench_cloud(1024);
  const ModelParams params = init_params(bench_config(Paradigm::Project, n_s), 1);
  const CubeGrid grid(n_s);
  for (auto _ : state) {
    ForwardOutputs out = forward(params, cloud, grid);
    benchmark::DoNotOptimize(out.axis_scores_x.data().data());
  }
}
BENCHMARK(ForwardProject)->Arg(8)->Arg(20);

void DecodePair(benchmark::State& state) {
  const int n_s = 8;
  const PointCloud cloud = bench_cloud(1024);
  const CubeGrid grid(n_s);
  const TargetSet flat = build_targets(cloud, grid, Paradigm::Flatten, 0.2);
  Mat category(cloud.size(), grid.cell_count());
  for (std::size_t p = 0; p < cloud.size(); ++p)
    for (int cube : flat.row_columns(static_cast<int>(p))) category(p, cube) = 1.0;
  std::vector<double> scores(flat.score_target.begin(), flat.score_target.end());
  Mat logits(cloud.size(), 2);
  for (auto _ : state) {
    auto preds = decode_flatten(category, scores, logits, InferConfig{});
    benchmark::DoNotOptimize(preds.size());
  }
}
BENCHMARK(DecodePair);

void BuildTargets(benchmark::State& state) {
  const PointCloud cloud = bench_cloud(1024);
  const CubeGrid grid(static_cast<int>(state.range(0)));
  for (auto _ : state) {
    TargetSet t = build_targets(cloud, grid, Paradigm::Flatten, 0.2);
    benchmark::DoNotOptimize(t.n_positive());
  }
}
BENCHMARK(BuildTargets)->Arg(8)->Arg(20);

void TrainStep(benchmark::State& state) {
  std::vector<PointCloud> dataset = {bench_cloud(1024)};
  ModelConfig mcfg = bench_config(Paradigm::Flatten, 8);
  TrainConfig tcfg;
  tcfg.paradigm = Paradigm::Flatten;
  tcfg.n_s = 8;
  tcfg.batch_size = 1;
  tcfg.epochs = 1;
  for (auto _ : state) {
    TrainResult r = train(dataset, mcfg, tcfg);
    benchmark::DoNotOptimize(r.checkpoint.step);
  }
}
BENCHMARK(TrainStep)->Unit(benchmark::kMillisecond);

void MeanShift1k(benchmark::State& state) {
  Rng rng(5);
  Mat embed(1024, 4);
  for (std::size_t p = 0; p < embed.rows(); ++p)
    for (std::size_t c = 0; c < 4; ++c) embed(p, c) = (p % 5) * 3.0 + 0.2 * rng.normal();
  for (auto _ : state) {
    auto labels = mean_shift(embed, 1.0);
    benchmark::DoNotOptimize(labels.data());
  }
}
BENCHMARK(MeanShift1k)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
