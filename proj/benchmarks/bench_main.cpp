#include <benchmark/benchmark.h>

#include "kvec/datasets.hpp"
#include "kvec/kvrl.hpp"
#include "kvec/streaming.hpp"

namespace {

using namespace kvec;

const Dataset& dataset() {
  static const Dataset d = [] {
    GeneratorConfig g;
    g.flows = 200;
    return generate_dataset(g);
  }();
  return d;
}

TangledSequence prefix(std::size_t n) {
  const TangledSequence& src = dataset().train.front();
  TangledSequence seq(src.schema());
  for (std::size_t i = 0; i < n && i < src.size(); ++i) seq.ingest(src[i].key, src[i].value);
  return seq;
}

KvecModel model(bool small) {
  const auto& m = dataset().manifest;
  ModelConfig c = small ? ModelConfig::small(m.schema, m.class_names.size())
                        : ModelConfig::tiny(m.schema, m.class_names.size());
  return KvecModel(c, 1);
}

void BM_MaskBuild(benchmark::State& state) {
  const TangledSequence seq = prefix(static_cast<std::size_t>(state.range(0)));
  for (auto _ : state) benchmark::DoNotOptimize(DynamicMask::build(seq, {}));
  state.SetItemsProcessed(state.iterations() * state.range(0));
}
BENCHMARK(BM_MaskBuild)->Arg(128)->Arg(512)->Arg(2000);

void BM_EncoderBatch(benchmark::State& state) {
  const TangledSequence seq = prefix(static_cast<std::size_t>(state.range(0)));
  const KvecModel m = model(true);
  const DynamicMask mask = DynamicMask::build(seq, m.config().mask);
  for (auto _ : state) {
    EncoderTape tape(m, seq, mask);
    tape.compute_all();
    benchmark::DoNotOptimize(tape.column(tape.layers() - 1, seq.size() - 1).data());
  }
  state.SetItemsProcessed(state.iterations() * state.range(0));
}
BENCHMARK(BM_EncoderBatch)->Arg(128)->Arg(500)->Unit(benchmark::kMillisecond);

void BM_StreamEngine(benchmark::State& state) {
  const TangledSequence seq = prefix(static_cast<std::size_t>(state.range(0)));
  const KvecModel m = model(true);
  StreamOptions opt;
  opt.cache_kv = state.range(1) != 0;
  for (auto _ : state) {
    StreamEngine engine(m, opt);
    for (const Item& it : seq.items()) benchmark::DoNotOptimize(engine.step(it.key, it.value));
  }
  state.SetItemsProcessed(state.iterations() * state.range(0));
}
BENCHMARK(BM_StreamEngine)->Args({500, 0})->Args({500, 1})->Unit(benchmark::kMillisecond);

void BM_RecomputeStrawman(benchmark::State& state) {
  const TangledSequence seq = prefix(static_cast<std::size_t>(state.range(0)));
  const KvecModel m = model(true);
  for (auto _ : state) benchmark::DoNotOptimize(recompute_stream(m, seq));
  state.SetItemsProcessed(state.iterations() * state.range(0));
}
BENCHMARK(BM_RecomputeStrawman)->Arg(100)->Arg(250)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
