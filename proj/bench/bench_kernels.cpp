// Serial reference vs OpenMP paths for the hot kernels. Each pair is checked
// for bit-identical output before timing.

#include <cstdlib>
#include <cstdio>

#include <benchmark/benchmark.h>

#include "timeguard/core/kernels.hpp"
#include "timeguard/core/rng.hpp"
#include "timeguard/datagen.hpp"
#include "timeguard/stgat.hpp"

using namespace tg;

namespace {

Mat random_mat(std::size_t r, std::size_t c, std::uint64_t seed) {
    auto rng = make_rng(seed, Stream::diag);
    Mat m(r, c);
    for (double& v : m.data) v = normal_draw(rng);
    return m;
}

template <class T>
void require_same(const T& a, const T& b, const char* what) {
    if (!(a == b)) {
        std::fprintf(stderr, "%s: serial and parallel results differ\n", what);
        std::exit(1);
    }
}

Exec exec_of(const benchmark::State& state) { return state.range(0) ? Exec::parallel : Exec::serial; }

void BM_matmul(benchmark::State& state) {
    const Mat a = random_mat(256, 256, 1), b = random_mat(256, 256, 2);
    require_same(kernels::matmul(a, b, Exec::serial).data, kernels::matmul(a, b, Exec::parallel).data, "matmul");
    for (auto _ : state) benchmark::DoNotOptimize(kernels::matmul(a, b, exec_of(state)));
    state.SetLabel(state.range(0) ? "parallel" : "serial");
}

void BM_softmax(benchmark::State& state) {
    const Mat a = random_mat(512, 512, 3);
    Mat s = a, p = a;
    kernels::softmax_rows(s, Exec::serial);
    kernels::softmax_rows(p, Exec::parallel);
    require_same(s.data, p.data, "softmax_rows");
    for (auto _ : state) {
        Mat m = a;
        kernels::softmax_rows(m, exec_of(state));
        benchmark::DoNotOptimize(m.data.data());
    }
    state.SetLabel(state.range(0) ? "parallel" : "serial");
}

datagen::DatasetConfig bench_config() {
    datagen::DatasetConfig c;
    c.length = 2000;
    return c;
}

void BM_generate(benchmark::State& state) {
    const auto c = bench_config();
    for (auto _ : state) benchmark::DoNotOptimize(datagen::generate_dataset(c, exec_of(state)));
    state.SetLabel(state.range(0) ? "parallel" : "serial");
}

void BM_grad(benchmark::State& state) {
    static const auto ds = datagen::generate_dataset(bench_config());
    stgat::HyperParams h;
    std::vector<stgat::DeviceSeries> series;
    std::vector<const stgat::DeviceSeries*> ptrs;
    for (const auto& t : ds.traces) series.push_back(stgat::prepare_series(t, ds.manifest.normalization, h));
    for (const auto& s : series) ptrs.push_back(&s);
    const auto batch = stgat::make_batch(ptrs, 0, ds.manifest.window, ds.graph);
    const auto params = stgat::init_params(batch.devices.front().x.cols, h);
    require_same(stgat::grad(batch, params, h, Exec::serial).grad, stgat::grad(batch, params, h, Exec::parallel).grad,
                 "grad");
    for (auto _ : state) benchmark::DoNotOptimize(stgat::grad(batch, params, h, exec_of(state)));
    state.SetLabel(state.range(0) ? "parallel" : "serial");
}

}  // namespace

BENCHMARK(BM_matmul)->Arg(0)->Arg(1)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_softmax)->Arg(0)->Arg(1)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_generate)->Arg(0)->Arg(1)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_grad)->Arg(0)->Arg(1)->Unit(benchmark::kMillisecond);

BENCHMARK_MAIN();
