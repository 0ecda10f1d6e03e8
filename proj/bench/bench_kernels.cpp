// OpenMP kernels against the serial reference loops, at the toy model's shapes.
// OMP_NUM_THREADS controls the parallel side.

#include <benchmark/benchmark.h>

#include <vector>

#include "futcr/kernels.hpp"
#include "futcr/rng.hpp"

namespace k = futcr::kernels;

namespace {

std::vector<double> noise(std::size_t n, std::uint64_t seed) {
  futcr::Rng rng(seed);
  std::vector<double> v(n);
  for (auto& x : v) x = rng.normal();
  return v;
}

// stage 2 of the backbone at 64×64: 16 → 32 channels, 32×32 → 16×16
k::Conv2dShape stage2() { return {16, 32, 32, 32, 3, 2, 1}; }

template <bool Parallel>
void BM_ConvForward(benchmark::State& st) {
  const auto s = stage2();
  const auto in = noise(static_cast<std::size_t>(s.input_size()), 1);
  const auto w = noise(static_cast<std::size_t>(s.weight_size()), 2);
  const auto b = noise(static_cast<std::size_t>(s.out_channels), 3);
  std::vector<double> out(static_cast<std::size_t>(s.output_size()));
  for (auto _ : st) {
    if constexpr (Parallel) k::conv2d_forward(s, in, w, b, out);
    else k::reference::conv2d_forward(s, in, w, b, out);
    benchmark::DoNotOptimize(out.data());
  }
}

template <bool Parallel>
void BM_ConvBackward(benchmark::State& st) {
  const auto s = stage2();
  const auto in = noise(static_cast<std::size_t>(s.input_size()), 1);
  const auto w = noise(static_cast<std::size_t>(s.weight_size()), 2);
  const auto g = noise(static_cast<std::size_t>(s.output_size()), 4);
  std::vector<double> gin(in.size()), gw(w.size()), gb(static_cast<std::size_t>(s.out_channels));
  for (auto _ : st) {
    if constexpr (Parallel) k::conv2d_backward(s, in, w, g, gin, gw, gb);
    else k::reference::conv2d_backward(s, in, w, g, gin, gw, gb);
    benchmark::DoNotOptimize(gin.data());
  }
}

// mask logits: Q×d times d×H'W'
template <bool Parallel>
void BM_Matmul(benchmark::State& st) {
  const int m = 16, kk = 32, n = static_cast<int>(st.range(0));
  const auto a = noise(static_cast<std::size_t>(m * kk), 5);
  const auto b = noise(static_cast<std::size_t>(kk * n), 6);
  std::vector<double> c(static_cast<std::size_t>(m * n));
  for (auto _ : st) {
    if constexpr (Parallel) k::matmul_ab(a, b, c, m, kk, n);
    else k::reference::matmul_ab(a, b, c, m, kk, n);
    benchmark::DoNotOptimize(c.data());
  }
}

// 16 query masks, 16×16 → 64×64
template <bool Parallel>
void BM_Bilinear(benchmark::State& st) {
  const auto in = noise(16 * 16 * 16, 7);
  std::vector<double> out(16 * 64 * 64);
  for (auto _ : st) {
    if constexpr (Parallel) k::bilinear_resize(in, 16, 16, 16, out, 64, 64);
    else k::reference::bilinear_resize(in, 16, 16, 16, out, 64, 64);
    benchmark::DoNotOptimize(out.data());
  }
}

}  // namespace

BENCHMARK(BM_ConvForward<false>)->Name("conv_forward/reference");
BENCHMARK(BM_ConvForward<true>)->Name("conv_forward/parallel");
BENCHMARK(BM_ConvBackward<false>)->Name("conv_backward/reference");
BENCHMARK(BM_ConvBackward<true>)->Name("conv_backward/parallel");
BENCHMARK(BM_Matmul<false>)->Name("matmul_ab/reference")->Arg(256)->Arg(4096);
BENCHMARK(BM_Matmul<true>)->Name("matmul_ab/parallel")->Arg(256)->Arg(4096);
BENCHMARK(BM_Bilinear<false>)->Name("bilinear/reference");
BENCHMARK(BM_Bilinear<true>)->Name("bilinear/parallel");

BENCHMARK_MAIN();
