#include <benchmark/benchmark.h>

#include <random>
#include <vector>

#include "convprobe/kernels.hpp"

using namespace convprobe;

namespace {

struct Shape {
  std::size_t c_in, c_out, t_in;
};

// Desk-preset critic layers at batch 16: kernel 25, stride 4.
constexpr Shape kShapes[] = {{1, 16, 4096}, {16, 32, 1024}, {32, 64, 256}, {64, 128, 64}};
constexpr std::size_t kBatch = 16, kK = 25, kStride = 4, kPad = 11;

struct Inputs {
  Tensor3 x, w, gy;
  std::vector<float> b;
};

Inputs make(const Shape& s) {
  std::mt19937_64 rng(7);
  std::normal_distribution<float> g(0, 1);
  Inputs in{Tensor3(kBatch, s.c_in, s.t_in), Tensor3(s.c_out, s.c_in, kK), Tensor3(kBatch, s.c_out, s.t_in / kStride),
            std::vector<float>(s.c_out)};
  for (float& v : in.x.flat()) v = g(rng);
  for (float& v : in.w.flat()) v = 0.05f * g(rng);
  for (float& v : in.gy.flat()) v = g(rng);
  for (float& v : in.b) v = g(rng);
  return in;
}

template <bool Fast>
void BM_conv1d(benchmark::State& st) {
  auto in = make(kShapes[st.range(0)]);
  for (auto _ : st) {
    auto y = Fast ? kernels::conv1d<float>(in.x, in.w, in.b, kStride, kPad)
                  : reference::conv1d<float>(in.x, in.w, in.b, kStride, kPad);
    benchmark::DoNotOptimize(y.flat().data());
  }
}

template <bool Fast>
void BM_conv1d_input_grad(benchmark::State& st) {
  const auto& s = kShapes[st.range(0)];
  auto in = make(s);
  for (auto _ : st) {
    auto gx = Fast ? kernels::conv1d_input_grad<float>(in.gy, in.w, kStride, kPad, s.t_in)
                   : reference::conv1d_input_grad<float>(in.gy, in.w, kStride, kPad, s.t_in);
    benchmark::DoNotOptimize(gx.flat().data());
  }
}

template <bool Fast>
void BM_conv1d_weight_grad(benchmark::State& st) {
  auto in = make(kShapes[st.range(0)]);
  Tensor3 gw(in.w.batch(), in.w.channels(), in.w.time());
  for (auto _ : st) {
    if (Fast)
      kernels::conv1d_weight_grad<float>(in.x, in.gy, kStride, kPad, gw);
    else
      reference::conv1d_weight_grad<float>(in.x, in.gy, kStride, kPad, gw);
    benchmark::DoNotOptimize(gw.flat().data());
  }
}

template <bool Fast>
void BM_conv1d_transposed(benchmark::State& st) {
  auto in = make(kShapes[st.range(0)]);
  std::vector<float> b(in.w.channels(), 0.1f);
  for (auto _ : st) {
    auto y = Fast ? kernels::conv1d_transposed<float>(in.gy, in.w, b, kStride, kPad)
                  : reference::conv1d_transposed<float>(in.gy, in.w, b, kStride, kPad);
    benchmark::DoNotOptimize(y.flat().data());
  }
}

}  // namespace

BENCHMARK(BM_conv1d<true>)->DenseRange(0, 3)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_conv1d<false>)->DenseRange(0, 3)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_conv1d_input_grad<true>)->DenseRange(0, 3)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_conv1d_input_grad<false>)->DenseRange(0, 3)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_conv1d_weight_grad<true>)->DenseRange(0, 3)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_conv1d_weight_grad<false>)->DenseRange(0, 3)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_conv1d_transposed<true>)->DenseRange(0, 3)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_conv1d_transposed<false>)->DenseRange(0, 3)->Unit(benchmark::kMillisecond);

BENCHMARK_MAIN();
