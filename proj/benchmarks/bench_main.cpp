// Micro benchmarks for the hot paths of training and evaluation.
#include <benchmark/benchmark.h>

#include <random>
#include <vector>

#include "dubox/config.hpp"
#include "dubox/dataio.hpp"
#include "dubox/encoding.hpp"
#include "dubox/geometry.hpp"
#include "dubox/inference.hpp"
#include "dubox/network.hpp"
#include "dubox/ops.hpp"
#include "dubox/trainer.hpp"

namespace {

using namespace dubox;

Tensor random_tensor(const Shape& shape, std::mt19937_64& rng) {
  std::uniform_real_distribution<float> d(-1, 1);
  std::vector<float> v(shape_numel(shape));
  for (float& x : v) x = d(rng);
  return Tensor(shape, std::move(v));
}

// 3x3 conv of a [16,C,H,W] batch; range(0) = channels, range(1) = spatial size.
void BM_Conv2dForward(benchmark::State& state) {
  std::mt19937_64 rng(1);
  const auto c = static_cast<std::size_t>(state.range(0));
  const auto hw = static_cast<std::size_t>(state.range(1));
  const Tensor x = random_tensor({16, c, hw, hw}, rng);
  const Tensor w = random_tensor({c, c, 3, 3}, rng);
  const Tensor b = random_tensor({c}, rng);
  for (auto _ : state) benchmark::DoNotOptimize(ops::conv2d(x, w, b, 1, 1));
}
BENCHMARK(BM_Conv2dForward)->Args({16, 64})->Args({32, 16})->Args({64, 8})->Unit(benchmark::kMillisecond);

void BM_Conv2dBackward(benchmark::State& state) {
  std::mt19937_64 rng(2);
  const auto c = static_cast<std::size_t>(state.range(0));
  const auto hw = static_cast<std::size_t>(state.range(1));
  Tensor x = random_tensor({16, c, hw, hw}, rng);
  Tensor w = random_tensor({c, c, 3, 3}, rng);
  Tensor b = random_tensor({c}, rng);
  w.set_requires_grad(true);
  b.set_requires_grad(true);
  for (auto _ : state) {
    Tape<float> tape;
    Tensor loss;
    {
      TapeScope<float> scope(tape);
      loss = ops::sum(ops::conv2d(x, w, b, 1, 1));
    }
    tape.backward(loss);
  }
}
BENCHMARK(BM_Conv2dBackward)->Args({16, 64})->Args({32, 16})->Unit(benchmark::kMillisecond);

void BM_ModelForward(benchmark::State& state) {
  const RunConfig cfg;
  const DuBoxModel<float> model(cfg.model);
  std::mt19937_64 rng(3);
  const Tensor images = random_tensor({static_cast<std::size_t>(state.range(0)), 3, 128, 128}, rng);
  NoGradScope<float> no_grad;
  for (auto _ : state) benchmark::DoNotOptimize(model.forward(images));
}
BENCHMARK(BM_ModelForward)->Arg(1)->Arg(16)->Unit(benchmark::kMillisecond);

void BM_TrainStep(benchmark::State& state) {
  RunConfig cfg;
  cfg.optimizer.iterations = 1 << 30;
  SynthConfig data;
  const std::vector<DatasetRecord> records = generate(data, 64);
  Trainer trainer(cfg, records);
  for (auto _ : state) benchmark::DoNotOptimize(trainer.step());
}
BENCHMARK(BM_TrainStep)->Unit(benchmark::kMillisecond);

void BM_EncodeTargets(benchmark::State& state) {
  SynthConfig data;
  const std::vector<DatasetRecord> records = generate(data, 32);
  const EncoderConfig cfg;
  const HookGrid g1 = HookGrid::for_detector(1, 128, 128), g2 = HookGrid::for_detector(2, 128, 128);
  for (auto _ : state) {
    for (const auto& r : records) {
      benchmark::DoNotOptimize(encode_targets(r.gts, g1, cfg));
      benchmark::DoNotOptimize(encode_targets(r.gts, g2, cfg));
    }
  }
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(records.size()));
}
BENCHMARK(BM_EncodeTargets);

std::vector<Detection> random_detections(std::size_t n, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> pos(0, 112), side(4, 48), score(0, 1);
  std::uniform_int_distribution<int> cls(0, 2);
  std::vector<Detection> out(n);
  for (auto& d : out) {
    const double x = pos(rng), y = pos(rng);
    d = {make_box(x, y, x + side(rng), y + side(rng)), cls(rng), score(rng), 1};
  }
  return out;
}

void BM_Nms(benchmark::State& state) {
  std::mt19937_64 rng(4);
  const auto dets = random_detections(static_cast<std::size_t>(state.range(0)), rng);
  for (auto _ : state) benchmark::DoNotOptimize(nms(dets, 0.5));
}
BENCHMARK(BM_Nms)->Arg(100)->Arg(800);

void BM_AveragePrecision(benchmark::State& state) {
  std::mt19937_64 rng(5);
  std::vector<ImageEval> images(200);
  for (auto& im : images) {
    im.detections = random_detections(50, rng);
    for (const auto& d : random_detections(3, rng)) im.ground_truths.push_back({d.box, d.class_id});
  }
  for (auto _ : state) benchmark::DoNotOptimize(average_precision(images, 0.5));
}
BENCHMARK(BM_AveragePrecision)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
