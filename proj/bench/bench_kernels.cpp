// Serial reference vs OpenMP kernels on model-sized shapes.

#include <benchmark/benchmark.h>

#include <vector>

#include "fdt/kernels.hpp"
#include "fdt/rng.hpp"

namespace k = fdt::kernels;

namespace {

std::vector<double> random_vec(std::size_t n, std::uint64_t seed) {
    fdt::Rng rng(seed);
    std::vector<double> v(n);
    for (auto& x : v) {
        x = rng.normal();
    }
    return v;
}

template <bool Parallel>
void bm_matmul(benchmark::State& state) {
    const auto n = static_cast<std::size_t>(state.range(0));
    const std::size_t d = 64;
    const auto a = random_vec(n * d, 1);
    const auto b = random_vec(d * d, 2);
    std::vector<double> c(n * d);
    for (auto _ : state) {
        if constexpr (Parallel) {
            k::matmul(a.data(), b.data(), c.data(), n, d, d, false);
        } else {
            k::serial::matmul(a.data(), b.data(), c.data(), n, d, d, false);
        }
        benchmark::DoNotOptimize(c.data());
    }
    state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(n * d * d));
}

template <bool Parallel>
void bm_layer_norm(benchmark::State& state) {
    const auto rows = static_cast<std::size_t>(state.range(0));
    const std::size_t d = 32;
    const auto x = random_vec(rows * d, 3);
    const std::vector<double> gamma(d, 1.0);
    const std::vector<double> beta(d, 0.0);
    std::vector<double> y(rows * d);
    std::vector<double> xhat(rows * d);
    std::vector<double> rstd(rows);
    for (auto _ : state) {
        if constexpr (Parallel) {
            k::layer_norm_forward(x.data(), gamma.data(), beta.data(), y.data(), xhat.data(), rstd.data(), rows, d,
                                  1e-5);
        } else {
            k::serial::layer_norm_forward(x.data(), gamma.data(), beta.data(), y.data(), xhat.data(), rstd.data(),
                                          rows, d, 1e-5);
        }
        benchmark::DoNotOptimize(y.data());
    }
}

template <bool Parallel>
void bm_attention(benchmark::State& state) {
    const auto seqs = static_cast<std::size_t>(state.range(0));
    const std::size_t len = 48;
    const std::size_t heads = 2;
    const std::size_t dim = 32;
    const std::size_t rows = seqs * len;
    const auto q = random_vec(rows * dim, 4);
    const auto kk = random_vec(rows * dim, 5);
    const auto v = random_vec(rows * dim, 6);
    std::vector<k::AttentionSegment> segs;
    for (std::size_t s = 0; s < seqs; ++s) {
        segs.push_back({s * len, len, s * len, len});
    }
    k::AttentionGeometry g;
    g.heads = heads;
    g.head_dim = dim / heads;
    g.value_dim = dim / heads;
    g.q_stride = g.k_stride = g.v_stride = g.o_stride = dim;
    g.scale = 0.25;
    g.causal = true;
    const auto offsets = k::attention_prob_offsets(segs, heads);
    std::vector<double> probs(offsets.back());
    std::vector<double> out(rows * dim);
    for (auto _ : state) {
        if constexpr (Parallel) {
            k::attention_forward(g, segs, q.data(), kk.data(), v.data(), out.data(), probs.data());
        } else {
            k::serial::attention_forward(g, segs, q.data(), kk.data(), v.data(), out.data(), probs.data());
        }
        benchmark::DoNotOptimize(out.data());
    }
}

}  // namespace

BENCHMARK(bm_matmul<false>)->Name("matmul/serial")->Arg(256)->Arg(1024);
BENCHMARK(bm_matmul<true>)->Name("matmul/omp")->Arg(256)->Arg(1024);
BENCHMARK(bm_layer_norm<false>)->Name("layer_norm/serial")->Arg(1024);
BENCHMARK(bm_layer_norm<true>)->Name("layer_norm/omp")->Arg(1024);
BENCHMARK(bm_attention<false>)->Name("attention/serial")->Arg(16);
BENCHMARK(bm_attention<true>)->Name("attention/omp")->Arg(16);

BENCHMARK_MAIN();
