#include <benchmark/benchmark.h>

#include "pliv/kernels.hpp"
#include "pliv/rng.hpp"
#include "pliv/tensor.hpp"

// Serial vs OpenMP kernel comparison on the shapes the denoiser actually
// runs: conv-as-gemm at each UNet scale plus the attention projections.

using namespace pliv;
namespace k = pliv::kernels;

namespace {

struct GemmCase {
    const char* name;
    int m, n, kk;
};

// [Cout, OH*OW, Cin*3*3] per conv; attention projections are [tokens, C, C]
const GemmCase kCases[] = {
    {"conv64x64_c16", 16, 4096, 144},
    {"conv32x32_c32", 32, 1024, 288},
    {"conv16x16_c48", 48, 256, 432},
    {"attn_proj_256tok_c48", 256, 48, 48},
};

void bench_gemm(benchmark::State& state, bool parallel, const GemmCase& c) {
    Rng r(1);
    Tensor A = Tensor::randn({c.m, c.kk}, r);
    Tensor B = Tensor::randn({c.kk, c.n}, r);
    Tensor C({c.m, c.n});
    for (auto _ : state) {
        if (parallel)
            k::par::gemm_nn(c.m, c.n, c.kk, A.data(), B.data(), C.data());
        else
            k::serial::gemm_nn(c.m, c.n, c.kk, A.data(), B.data(), C.data());
        benchmark::DoNotOptimize(C.data());
        benchmark::ClobberMemory();
    }
    state.SetItemsProcessed(int64_t(state.iterations()) * c.m * c.n * c.kk * 2);
}

void bench_im2col(benchmark::State& state, bool parallel) {
    Rng r(2);
    const int c = 32, h = 32, w = 32;
    Tensor x = Tensor::randn({c, h, w}, r);
    Tensor col({c * 9, h * w});
    for (auto _ : state) {
        if (parallel)
            k::par::im2col(x.data(), c, h, w, 3, 3, 1, 1, col.data());
        else
            k::serial::im2col(x.data(), c, h, w, 3, 3, 1, 1, col.data());
        benchmark::DoNotOptimize(col.data());
    }
}

}  // namespace

int main(int argc, char** argv) {
    for (const auto& c : kCases) {
        benchmark::RegisterBenchmark((std::string("serial/") + c.name).c_str(),
                                     [c](benchmark::State& s) { bench_gemm(s, false, c); });
        benchmark::RegisterBenchmark((std::string("omp/") + c.name).c_str(),
                                     [c](benchmark::State& s) { bench_gemm(s, true, c); });
    }
    benchmark::RegisterBenchmark("serial/im2col_32x32_c32", [](benchmark::State& s) { bench_im2col(s, false); });
    benchmark::RegisterBenchmark("omp/im2col_32x32_c32", [](benchmark::State& s) { bench_im2col(s, true); });
    benchmark::Initialize(&argc, argv);
    benchmark::RunSpecifiedBenchmarks();
    return 0;
}
