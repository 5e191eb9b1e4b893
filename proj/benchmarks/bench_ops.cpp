#include <benchmark/benchmark.h>

#include "nowcast/blocks.hpp"
#include "nowcast/model.hpp"
#include "nowcast/ops.hpp"
#include "nowcast/vq.hpp"

using namespace nowcast;

namespace {

Tensor<float> noise(Shape s, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<float> v(static_cast<std::size_t>(s.numel()));
  for (auto& x : v) x = static_cast<float>(rng.uniform(-1.0, 1.0));
  return Tensor<float>(s, std::move(v));
}

// args: channels, spatial size
void BM_DenseConv3x3(benchmark::State& state) {
  const auto c = state.range(0), s = state.range(1);
  Rng rng(1);
  nn::Conv2d<float> conv(c, c, 3, {.padding = 1}, false, rng);
  const auto x = noise(Shape{1, c, s, s}, 2);
  NoGradScope<float> ng;
  for (auto _ : state) benchmark::DoNotOptimize(conv.forward(x).data().data());
  state.SetItemsProcessed(state.iterations() * c * c * 9 * s * s);
}
BENCHMARK(BM_DenseConv3x3)->Args({16, 64})->Args({64, 32})->Args({128, 18});

void BM_DepthwiseSeparable(benchmark::State& state) {
  const auto c = state.range(0), s = state.range(1);
  Rng rng(1);
  nn::DepthwiseSeparableConv<float> dsc(c, c, 2, rng);
  const auto x = noise(Shape{1, c, s, s}, 2);
  NoGradScope<float> ng;
  for (auto _ : state) benchmark::DoNotOptimize(dsc.forward(x).data().data());
}
BENCHMARK(BM_DepthwiseSeparable)->Args({16, 64})->Args({64, 32})->Args({128, 18});

void BM_MixConv(benchmark::State& state) {
  const auto c = state.range(0), s = state.range(1);
  Rng rng(1);
  nn::MixConv<float> mix(c, c, rng);
  const auto x = noise(Shape{1, c, s, s}, 2);
  NoGradScope<float> ng;
  for (auto _ : state) benchmark::DoNotOptimize(mix.forward(x).data().data());
}
BENCHMARK(BM_MixConv)->Args({16, 64})->Args({64, 32})->Args({128, 18});

void BM_Cbam(benchmark::State& state) {
  const auto c = state.range(0), s = state.range(1);
  Rng rng(1);
  nn::CBAM<float> cbam(c, 16, rng);
  const auto x = noise(Shape{1, c, s, s}, 2);
  NoGradScope<float> ng;
  for (auto _ : state) benchmark::DoNotOptimize(cbam.forward(x).data().data());
}
BENCHMARK(BM_Cbam)->Args({64, 64})->Args({512, 18});

void BM_InferenceQuantize(benchmark::State& state) {
  const auto k = state.range(0);
  Rng rng(3);
  vq::Codebook<float> book(k, 512, rng);
  const auto z = noise(Shape{1, 512, 18, 18}, 4);
  for (auto _ : state) benchmark::DoNotOptimize(vq::inference_quantize(z, book).indices.data());
}
BENCHMARK(BM_InferenceQuantize)->Arg(8)->Arg(32)->Arg(64);

// Whole-model forward and backward at the small training geometry.
void BM_UNetTrainStep(benchmark::State& state) {
  ModelConfig c;
  c.variant = static_cast<Variant>(state.range(0));
  c.input_size = 64;
  c.base_width = 16;
  UNet<float> model(c);
  const auto x = noise(Shape{2, c.in_frames, 64, 64}, 5);
  for (auto _ : state) {
    Tape<float> tape;
    TapeScope<float> scope(tape);
    auto out = model.forward(x, Mode::Train);
    tape.backward(ops::mean(out.prediction));
  }
  state.SetLabel(std::string(variant_name(c.variant)));
}
BENCHMARK(BM_UNetTrainStep)->DenseRange(0, 3)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
