#include <benchmark/benchmark.h>

#include <vector>

#include "milore/encoder.hpp"
#include "milore/milore_module.hpp"
#include "milore/ops.hpp"
#include "milore/targets.hpp"
#include "milore/trainer.hpp"

using namespace milore;

namespace {

Tensor random_tensor(Shape shape, std::uint64_t seed, bool requires_grad = false) {
  Rng rng(seed);
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = uniform(rng, -1.0, 1.0);
  return Tensor::from(std::move(shape), std::move(v), requires_grad);
}

EncoderConfig bench_encoder() {
  EncoderConfig c;
  c.layers = 2;
  c.d_feat = 16;
  c.d_model = 32;
  c.heads = 4;
  c.d_ffn = 64;
  c.codebook_size = 16;
  c.max_frames = 64;
  c.mask = MaskConfig{5, 0.08};
  return c;
}

std::vector<Utterance> bench_utterances(std::size_t count, std::size_t frames) {
  std::vector<Utterance> out;
  for (std::size_t i = 0; i < count; ++i) {
    out.push_back({"u" + std::to_string(i), "aa", random_tensor({frames, 16}, 100 + i), frames / 50.0, {}});
  }
  return out;
}

void BM_Matmul(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const Tensor a = random_tensor({n, n}, 1), b = random_tensor({n, n}, 2);
  for (auto _ : state) benchmark::DoNotOptimize(matmul(a, b));
  state.SetItemsProcessed(static_cast<std::int64_t>(state.iterations() * 2 * n * n * n));
}
BENCHMARK(BM_Matmul)->Arg(32)->Arg(128)->Arg(256);

void BM_MiLoreForward(benchmark::State& state) {
  const auto experts = static_cast<std::size_t>(state.range(0));
  Rng rng(3);
  const auto m = MiLoreModule::wrap(Linear::create(256, 1024, rng), experts, 12, rng);
  const Tensor h = random_tensor({128, 256}, 4);
  for (auto _ : state) benchmark::DoNotOptimize(m.forward(h));
}
BENCHMARK(BM_MiLoreForward)->Arg(1)->Arg(2)->Arg(4);

void BM_DenseForward(benchmark::State& state) {
  Rng rng(3);
  const Linear l = Linear::create(256, 1024, rng);
  const Tensor h = random_tensor({128, 256}, 4);
  for (auto _ : state) benchmark::DoNotOptimize(l.forward(h));
}
BENCHMARK(BM_DenseForward);

void BM_Encode(benchmark::State& state) {
  Encoder enc(bench_encoder(), 5);
  if (state.range(0) != 0) enc.attach_milore(MiLoreConfig{2, 4, 1.0}, 6);
  std::vector<Tensor> utts;
  for (const auto& u : bench_utterances(8, 64)) utts.push_back(u.frames);
  const FrameBatch batch = make_batch(utts);
  for (auto _ : state) benchmark::DoNotOptimize(enc.encode(batch));
}
BENCHMARK(BM_Encode)->Arg(0)->Arg(1);

void BM_TrainStep(benchmark::State& state) {
  const auto utts = bench_utterances(32, 64);
  TargetSequence targets;
  for (const auto& u : utts) targets.push_back(std::vector<int>(u.length(), 1));
  const TrainingData data = make_training_data(utts, targets, 7);
  TrainState base = init_base_state(bench_encoder(), TrainConfig{8, 64, 8}, ScheduleConfig{1000000, 10, 1e-3});
  TrainState st = state.range(0) == 0 ? std::move(base)
                                      : init_continual_state(base, TrainMode::MiLore, MiLoreConfig{2, 4, 1.0}, 16,
                                                             TrainConfig{8, 64, 9}, ScheduleConfig{1000000, 10, 1e-3});
  for (auto _ : state) benchmark::DoNotOptimize(train_step(st, data));
}
BENCHMARK(BM_TrainStep)->Arg(0)->Arg(1);

void BM_AssignLabels(benchmark::State& state) {
  Codebook cb;
  cb.centroids = random_tensor({100, 39}, 10);
  const Tensor frames = random_tensor({5000, 39}, 11);
  for (auto _ : state) benchmark::DoNotOptimize(assign_labels(cb, frames));
}
BENCHMARK(BM_AssignLabels);

}  // namespace
BENCHMARK_MAIN();
