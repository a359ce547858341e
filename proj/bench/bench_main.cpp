#include <benchmark/benchmark.h>

#include <random>

#include "vap/features.hpp"
#include "vap/kernels.hpp"
#include "vap/net.hpp"
#include "vap/train.hpp"

using namespace vap;

namespace {

template <typename T>
Matrix<T> randn(std::mt19937_64& rng, int rows, int cols) {
  std::normal_distribution<double> n(0.0, 1.0);
  Matrix<T> m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<T>(n(rng));
  return m;
}

Exec exec_of(const benchmark::State& state) { return state.range(1) ? Exec::parallel : Exec::serial; }

// range(0): frames, range(1): parallel
void BM_AttentionForward(benchmark::State& state) {
  const int n = static_cast<int>(state.range(0));
  std::mt19937_64 rng(1);
  const Matrix<float> q = randn<float>(rng, n, 64), k = randn<float>(rng, n, 64), v = randn<float>(rng, n, 64);
  const kernels::KeyValue<float> kv{&k, &v};
  Matrix<float> out;
  for (auto _ : state) {
    kernels::causal_attention<float>(q, std::span(&kv, 1), 4, 0, out, nullptr, exec_of(state));
    benchmark::DoNotOptimize(out.data());
  }
}
BENCHMARK(BM_AttentionForward)->Args({256, 0})->Args({1000, 0})->Args({1000, 1})->Unit(benchmark::kMillisecond);

void BM_AttentionReference(benchmark::State& state) {
  const int n = static_cast<int>(state.range(0));
  std::mt19937_64 rng(1);
  const Matrix<double> q = randn<double>(rng, n, 64), k = randn<double>(rng, n, 64), v = randn<double>(rng, n, 64);
  for (auto _ : state) benchmark::DoNotOptimize(reference::causal_attention(q, {k}, {v}, 4, 0));
}
BENCHMARK(BM_AttentionReference)->Args({256, 0})->Unit(benchmark::kMillisecond);

void BM_AttentionBackward(benchmark::State& state) {
  const int n = static_cast<int>(state.range(0));
  std::mt19937_64 rng(2);
  const Matrix<float> q = randn<float>(rng, n, 64), k = randn<float>(rng, n, 64), v = randn<float>(rng, n, 64);
  const Matrix<float> dout = randn<float>(rng, n, 64);
  const kernels::KeyValue<float> kv{&k, &v};
  kernels::AttentionTape<float> tape;
  Matrix<float> out, dq, dk(n, 64), dv(n, 64);
  kernels::causal_attention<float>(q, std::span(&kv, 1), 4, 0, out, &tape, exec_of(state));
  Matrix<float>* dkp = &dk;
  Matrix<float>* dvp = &dv;
  for (auto _ : state) {
    dk.setZero();
    dv.setZero();
    kernels::causal_attention_backward<float>(q, std::span(&kv, 1), 4, out, dout, tape, dq, std::span(&dkp, 1),
                                              std::span(&dvp, 1), exec_of(state));
    benchmark::DoNotOptimize(dq.data());
  }
}
BENCHMARK(BM_AttentionBackward)->Args({1000, 0})->Args({1000, 1})->Unit(benchmark::kMillisecond);

void BM_LogMel(benchmark::State& state) {
  std::mt19937_64 rng(3);
  std::normal_distribution<double> g(0.0, 3000.0);
  std::vector<std::vector<std::int16_t>> audio(3, std::vector<std::int16_t>(16000 * 20));
  for (auto& ch : audio)
    for (auto& s : ch) s = static_cast<std::int16_t>(std::clamp(g(rng), -32768.0, 32767.0));
  const LogMelExtractor ex{FeatureConfig{}};
  for (auto _ : state) benchmark::DoNotOptimize(extract_features(audio, ex, exec_of(state)));
}
BENCHMARK(BM_LogMel)->Args({0, 0})->Args({0, 1})->Unit(benchmark::kMillisecond);

ModelConfig full_config() {
  ModelConfig c;
  c.dropout = 0.1;
  return c;
}

Example random_example(std::mt19937_64& rng, int frames) {
  Example ex;
  for (int c = 0; c < 3; ++c) ex.features.push_back(randn<float>(rng, frames, 40));
  ex.labels.resize(frames);
  for (auto& l : ex.labels) l = static_cast<StateIndex>(rng() % 64);
  ex.vad_targets = FrameGrid(3, frames);
  return ex;
}

void BM_ForwardBackward(benchmark::State& state) {
  const int n = static_cast<int>(state.range(0));
  std::mt19937_64 rng(4);
  const VapNet<float> net(full_config(), 1);
  const Example ex = random_example(rng, n);
  ForwardTape<float> tape;
  NetParams<float> grad = net.params().zeros_like();
  for (auto _ : state) {
    const ModelOutput<float> out = net.forward_train(ex.features, tape, DropoutPlan{true, 7}, exec_of(state));
    ModelOutput<float> g{Matrix<float>::Constant(out.vap_logits.rows(), out.vap_logits.cols(), 1e-3f),
                         Matrix<float>::Constant(out.vad_logits.rows(), out.vad_logits.cols(), 1e-3f)};
    net.backward(tape, g, grad, exec_of(state));
    benchmark::DoNotOptimize(grad.input.weight.data());
  }
}
BENCHMARK(BM_ForwardBackward)->Args({1000, 0})->Args({1000, 1})->Unit(benchmark::kMillisecond);

void BM_TrainStep(benchmark::State& state) {
  std::mt19937_64 rng(5);
  VapNet<float> net(full_config(), 1);
  std::vector<Example> batch;
  for (int i = 0; i < 8; ++i) batch.push_back(random_example(rng, 1000));
  std::vector<const Example*> ptrs;
  for (const auto& e : batch) ptrs.push_back(&e);
  Trainer trainer(net, TrainConfig{}, exec_of(state));
  std::uint64_t seed = 0;
  for (auto _ : state) benchmark::DoNotOptimize(trainer.step(ptrs, ++seed));
}
BENCHMARK(BM_TrainStep)->Args({8, 0})->Args({8, 1})->Unit(benchmark::kMillisecond)->Iterations(2);

}  // namespace

BENCHMARK_MAIN();
