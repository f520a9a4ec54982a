// Microbenchmarks for the numeric core: raw gemm throughput, autograd
// transformer layers forward/backward, DDIM sampling with a null predictor,
// and scene generation.

#include <benchmark/benchmark.h>

#include "diffprompt/autograd.hpp"
#include "diffprompt/diffusion.hpp"
#include "diffprompt/nn.hpp"
#include "diffprompt/rng.hpp"
#include "diffprompt/schedule.hpp"
#include "diffprompt/synthdata.hpp"

namespace {

void BM_Gemm(benchmark::State& state) {
    const int64_t n = state.range(0);
    dp::Rng rng(1);
    dp::Tensor a({n, n}), b({n, n}), c({n, n});
    a.fill_normal(rng);
    b.fill_normal(rng);
    for (auto _ : state) {
        dp::gemm(c, a, false, b, false, false);
        benchmark::DoNotOptimize(c.data.data());
    }
    state.SetItemsProcessed(state.iterations() * 2 * n * n * n);
}
BENCHMARK(BM_Gemm)->Arg(64)->Arg(128)->Arg(256);

void BM_TransformerLayerForward(benchmark::State& state) {
    const int64_t n_tok = state.range(0);
    const int64_t width = 64;
    dp::Rng rng(2);
    dp::ParamSetT<float> params;
    dp::TransformerLayerT<float> layer(params, "bench", width, 4, 4 * width, rng);
    params.set_trainable(false);
    dp::Tensor x({n_tok, width});
    x.fill_normal(rng);
    for (auto _ : state) {
        dp::TapeT<float> tape;
        auto out = layer.forward(tape, tape.leaf(x));
        benchmark::DoNotOptimize(out.val().data.data());
    }
}
BENCHMARK(BM_TransformerLayerForward)->Arg(72)->Arg(88);

void BM_TransformerLayerTrainStep(benchmark::State& state) {
    const int64_t n_tok = state.range(0);
    const int64_t width = 64;
    dp::Rng rng(3);
    dp::ParamSetT<float> params;
    dp::TransformerLayerT<float> layer(params, "bench", width, 4, 4 * width, rng);
    dp::Tensor x({n_tok, width});
    x.fill_normal(rng);
    for (auto _ : state) {
        dp::TapeT<float> tape;
        auto out = layer.forward(tape, tape.leaf(x));
        auto loss = dp::mean_all(dp::mul(out, out));
        tape.backward(loss);
        params.zero_grad();
        benchmark::DoNotOptimize(loss.val().data.data());
    }
}
BENCHMARK(BM_TransformerLayerTrainStep)->Arg(72)->Arg(88);

void BM_DdimSample(benchmark::State& state) {
    auto sched = dp::build_cosine_schedule(100);
    dp::Tensor eps({4, 64});
    auto null_model = [&](const dp::Tensor&, int64_t) { return eps; };
    uint64_t seed = 0;
    for (auto _ : state) {
        auto traj = dp::ddim_sample(null_model, dp::fnv1a("bench"), sched, 25, seed++, {4, 64});
        benchmark::DoNotOptimize(traj.latents.back().data.data());
    }
}
BENCHMARK(BM_DdimSample);

void BM_GenerateSample(benchmark::State& state) {
    dp::SceneConfig cfg;
    uint64_t seed = 0;
    for (auto _ : state) {
        auto s = dp::generate_sample(seed++, cfg);
        benchmark::DoNotOptimize(s.image.data.data());
    }
}
BENCHMARK(BM_GenerateSample);

}  // namespace

BENCHMARK_MAIN();
