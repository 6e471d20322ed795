#include <benchmark/benchmark.h>

#include <random>

#include "capdet/boxes.hpp"
#include "capdet/metrics.hpp"
#include "capdet/model.hpp"

using namespace capdet;

namespace {

std::vector<Detection> random_detections(int n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> pos(0.0, 100.0), size(4.0, 30.0), score(0.0, 1.0);
  std::vector<Detection> out;
  for (int i = 0; i < n; ++i) {
    const double x = pos(rng), y = pos(rng);
    out.push_back({{x, y, x + size(rng), y + size(rng)}, i % 4, score(rng)});
  }
  return out;
}

}  // namespace

static void BM_Nms(benchmark::State& state) {
  const auto dets = random_detections(static_cast<int>(state.range(0)), 1);
  for (auto _ : state) benchmark::DoNotOptimize(nms(dets, 0.5));
  state.SetItemsProcessed(state.iterations() * state.range(0));
}
BENCHMARK(BM_Nms)->Arg(100)->Arg(1000);

static void BM_BackboneForward(benchmark::State& state) {
  torch::set_num_threads(1);
  ModelConfig cfg;
  cfg.backbone.image_size = static_cast<int>(state.range(0));
  auto model = make_model(cfg, 0);
  model->eval();
  torch::NoGradGuard no_grad;
  auto images = torch::rand({1, 3, state.range(0), state.range(0)});
  for (auto _ : state) benchmark::DoNotOptimize(model->features(images).last().tensor);
}
BENCHMARK(BM_BackboneForward)->Arg(64)->Arg(128)->Unit(benchmark::kMillisecond);

static void BM_CaptionMetrics(benchmark::State& state) {
  std::vector<std::string> cands;
  std::vector<std::vector<std::string>> refs;
  for (int i = 0; i < state.range(0); ++i) {
    cands.push_back("a red circle above a blue square");
    refs.push_back({"a red circle above a blue square", "a blue square below a red circle", "two shapes",
                    "a circle and a square", "red and blue shapes"});
  }
  const auto set = metrics::make_caption_eval_set(cands, refs);
  for (auto _ : state) {
    benchmark::DoNotOptimize(metrics::bleu_all(set));
    benchmark::DoNotOptimize(metrics::rouge_l(set));
    benchmark::DoNotOptimize(metrics::cider(set));
  }
}
BENCHMARK(BM_CaptionMetrics)->Arg(100);

static void BM_CocoMap(benchmark::State& state) {
  metrics::DetectionEvalSet set;
  set.num_classes = 4;
  set.image_size = 128;
  for (int i = 0; i < state.range(0); ++i) {
    metrics::DetectionImage img;
    img.detections = random_detections(50, static_cast<std::uint64_t>(i));
    for (int g = 0; g < 5; ++g) img.ground_truth.push_back({img.detections[static_cast<std::size_t>(g)].box, g % 4});
    set.images.push_back(std::move(img));
  }
  for (auto _ : state) benchmark::DoNotOptimize(metrics::coco_map(set));
}
BENCHMARK(BM_CocoMap)->Arg(50);
BENCHMARK_MAIN();
