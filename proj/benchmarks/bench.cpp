#include "test_support.hpp"

#include "sparsesplat/dataset.hpp"
#include "sparsesplat/deformation.hpp"
#include "sparsesplat/rasterizer.hpp"
#include "sparsesplat/training.hpp"

#include <benchmark/benchmark.h>

using namespace ssplat;

namespace {

GaussianCloud<float> cloud_of(int n) {
    std::mt19937_64 rng(1);
    return testkit::random_cloud(rng, n).cast<float>();
}

void BM_RenderForward(benchmark::State& state) {
    const GaussianCloud<float> cloud = cloud_of(static_cast<int>(state.range(0)));
    const int size = static_cast<int>(state.range(1));
    const CameraView view = testkit::axis_camera(size, size, size);
    RenderSettings settings;
    settings.threads = static_cast<int>(state.range(2));
    for (auto _ : state)
        benchmark::DoNotOptimize(render(cloud, view, settings));
    state.SetItemsProcessed(state.iterations());
}
BENCHMARK(BM_RenderForward)
    ->Args({1000, 128, 1})
    ->Args({10000, 128, 1})
    ->Args({10000, 512, 1})
    ->Args({10000, 512, 4})
    ->Unit(benchmark::kMillisecond);

void BM_RenderBackward(benchmark::State& state) {
    const GaussianCloud<float> cloud = cloud_of(static_cast<int>(state.range(0)));
    const int size = static_cast<int>(state.range(1));
    const CameraView view = testkit::axis_camera(size, size, size);
    const RenderOutput<float> forward = render(cloud, view);
    const ImageF upstream(size, size, 3, 1e-3f);
    for (auto _ : state)
        benchmark::DoNotOptimize(render_backward(cloud, view, forward, {&upstream}));
}
BENCHMARK(BM_RenderBackward)->Args({1000, 128})->Args({10000, 128})->Unit(benchmark::kMillisecond);

void BM_Deformation(benchmark::State& state) {
    const GaussianCloud<float> cloud = cloud_of(static_cast<int>(state.range(0)));
    EncodingConfig enc;
    enc.bounds_min = Vec3<double>(-2, -2, 1);
    enc.bounds_max = Vec3<double>(2, 2, 5);
    const DeformationModel<float> model = DeformationModel<float>::create(enc, HeadConfig{}, 3);
    for (auto _ : state) {
        DeformationCache<float> cache;
        benchmark::DoNotOptimize(apply_deformation(cloud, model, 0.4f, &cache));
    }
}
BENCHMARK(BM_Deformation)->Arg(1000)->Arg(10000)->Unit(benchmark::kMillisecond);

void BM_TrainStep(benchmark::State& state) {
    SynthConfig sc;
    sc.views = 3;
    const SyntheticScene scene = synth_scene(sc);
    TrainConfig cfg;
    cfg.init_gaussians = static_cast<int>(state.range(0));
    cfg.warmup_iters = state.range(1) ? 0 : 1000000;
    cfg.prior_diff = false;
    cfg.prior_geo = false;
    cfg.densify.enabled = false;
    TrainState train = TrainState::create(cfg, scene.bounds);
    TrainingData data;
    data.views = scene.views;
    const DiffusionSchedule schedule = DiffusionSchedule::linear();
    std::size_t view = 0;
    for (auto _ : state)
        benchmark::DoNotOptimize(train_step(train, data, view++ % data.views.size(), nullptr, schedule, cfg));
}
BENCHMARK(BM_TrainStep)
    ->ArgNames({"gaussians", "stage2"})
    ->Args({1000, 0})
    ->Args({1000, 1})
    ->Unit(benchmark::kMillisecond);

} // namespace

BENCHMARK_MAIN();
