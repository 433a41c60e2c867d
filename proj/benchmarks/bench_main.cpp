#include <benchmark/benchmark.h>

#include <vector>

#include "scvlm/clips.hpp"
#include "scvlm/contrastive.hpp"
#include "scvlm/encoders.hpp"
#include "scvlm/metrics.hpp"
#include "scvlm/random.hpp"
#include "scvlm/supervised.hpp"
#include "scvlm/synthgen.hpp"

namespace {

scvlm::FrameSequence scene(scvlm::EventType t, std::optional<int> conflict, std::uint64_t seed) {
  scvlm::synth::SceneSpec spec;
  spec.event_type = t;
  spec.conflict_type = conflict;
  spec.seed = seed;
  return scvlm::synth::render_event(spec);
}

void BM_RenderEvent(benchmark::State& state) {
  std::uint64_t seed = 0;
  for (auto _ : state) benchmark::DoNotOptimize(scene(scvlm::EventType::Crash, 3, ++seed));
}
BENCHMARK(BM_RenderEvent)->Unit(benchmark::kMillisecond);

void BM_VideoEncode(benchmark::State& state) {
  scvlm::VideoEncoderConfig cfg;
  cfg.aggregation = state.range(0) ? scvlm::Aggregation::Recurrent : scvlm::Aggregation::Mean;
  const scvlm::SupervisedModel model(cfg, 1);
  const auto clip = scvlm::sample_frames(scene(scvlm::EventType::NearCrash, 5, 9), cfg.frames);
  for (auto _ : state) benchmark::DoNotOptimize(model.encoder().encode(model.params(), clip));
}
BENCHMARK(BM_VideoEncode)->Arg(0)->Arg(1)->Unit(benchmark::kMicrosecond);

void BM_SupervisedBatchStep(benchmark::State& state) {
  scvlm::VideoEncoderConfig cfg;
  const scvlm::SupervisedModel model(cfg, 1);
  std::vector<scvlm::Clip> clips;
  for (int i = 0; i < 16; ++i) {
    const auto t = scvlm::event_type_from_index(i % 4);
    const auto c = scvlm::is_sce(t) ? std::optional<int>(1 + i % 16) : std::nullopt;
    clips.push_back({"e" + std::to_string(i), scvlm::sample_frames(scene(t, c, i), cfg.frames), t, c});
  }
  std::vector<std::size_t> batch(clips.size());
  for (std::size_t i = 0; i < batch.size(); ++i) batch[i] = i;
  for (auto _ : state) {
    auto grads = model.params().zeros_like();
    benchmark::DoNotOptimize(scvlm::supervised_batch_loss(model, clips, batch, &grads, 1));
  }
}
BENCHMARK(BM_SupervisedBatchStep)->Unit(benchmark::kMillisecond);

void BM_Meteor(benchmark::State& state) {
  const std::string cand =
      "Environment: daytime, rain, urban road. The ego vehicle collides with another road user in a rear end "
      "collision while turning left at the intersection.";
  const std::string ref =
      "Environment: daytime, rain, urban road. The ego vehicle nearly collides with another road user during a "
      "left turn across path at the intersection.";
  for (auto _ : state) benchmark::DoNotOptimize(scvlm::meteor(cand, ref));
}
BENCHMARK(BM_Meteor);

void BM_ClassificationReport(benchmark::State& state) {
  const auto n = static_cast<int>(state.range(0));
  scvlm::Rng rng(3);
  Eigen::MatrixXd scores(n, 16);
  std::vector<int> truth(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    truth[static_cast<std::size_t>(i)] = i % 16;
    for (int c = 0; c < 16; ++c) scores(i, c) = rng.uniform();
  }
  for (auto _ : state) benchmark::DoNotOptimize(scvlm::classification_report(truth, scores));
}
BENCHMARK(BM_ClassificationReport)->Arg(256)->Arg(4096);

}  // namespace

BENCHMARK_MAIN();
