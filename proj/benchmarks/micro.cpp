#include <benchmark/benchmark.h>

#include <filesystem>
#include <random>
#include <unistd.h>

#include "civiclens/corpus.hpp"
#include "civiclens/imaging.hpp"
#include "civiclens/model.hpp"
#include "civiclens/regions.hpp"
#include "civiclens/service.hpp"

using namespace civiclens;

namespace {

imaging::RasterImage noise_image(int size) {
  imaging::RasterImage img(size, size, 3, imaging::ValueDomain::Unit);
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> u(0, 1);
  for (auto& v : img.pixels) v = u(rng);
  return img;
}

void BM_Preprocess(benchmark::State& state) {
  const auto img = imaging::RasterImage(640, 480, 3, imaging::ValueDomain::Byte, 128.0);
  for (auto _ : state) benchmark::DoNotOptimize(imaging::preprocess(img, 256, 1.0));
}
BENCHMARK(BM_Preprocess)->Unit(benchmark::kMillisecond);

void BM_GaussianBlur(benchmark::State& state) {
  const auto img = noise_image(256);
  const double sigma = static_cast<double>(state.range(0)) / 10.0;
  for (auto _ : state) benchmark::DoNotOptimize(imaging::gaussian_blur(img, sigma));
}
BENCHMARK(BM_GaussianBlur)->Arg(5)->Arg(10)->Arg(30)->Unit(benchmark::kMillisecond);

void BM_ProposeRegions(benchmark::State& state) {
  const auto img =
      corpus::render_scene(IssueClass::WasteDisposal, corpus::SceneConditions::easy(), 256, 3).first;
  for (auto _ : state) benchmark::DoNotOptimize(regions::propose_regions(img));
}
BENCHMARK(BM_ProposeRegions)->Unit(benchmark::kMillisecond);

void BM_ForwardFloat(benchmark::State& state) {
  const auto spec = model::NetworkSpec::reference(static_cast<int>(state.range(0)));
  const auto params = model::he_initialize<float>(spec, 1);
  const auto x = model::to_tensor<float>(noise_image(static_cast<int>(state.range(0))));
  for (auto _ : state) benchmark::DoNotOptimize(model::forward<float>(spec, params, x));
}
BENCHMARK(BM_ForwardFloat)->Arg(32)->Arg(64)->Unit(benchmark::kMicrosecond);

void BM_TrainingStep(benchmark::State& state) {
  const auto spec = model::NetworkSpec::reference(64);
  const auto params = model::he_initialize<float>(spec, 1);
  std::vector<model::LabeledTensor<float>> batch;
  for (int i = 0; i < static_cast<int>(state.range(0)); ++i)
    batch.push_back({model::to_tensor<float>(noise_image(64)), i % 3});
  for (auto _ : state) benchmark::DoNotOptimize(model::loss_and_gradients<float>(spec, params, batch));
  state.SetItemsProcessed(state.iterations() * state.range(0));
}
BENCHMARK(BM_TrainingStep)->Arg(16)->Arg(32)->Unit(benchmark::kMillisecond);

void BM_EventAppend(benchmark::State& state) {
  const auto path = std::filesystem::temp_directory_path() / ("civiclens-bench-" + std::to_string(::getpid()));
  std::filesystem::remove(path);
  {
    service::EventLog log(path, 1, state.range(0) != 0);
    for (auto _ : state) {
      service::Event e;
      e.case_id = "01HZZZZZZZZZZZZZZZZZZZZZZZ";
      e.kind = service::EventKind::Submitted;
      e.at = now_utc();
      e.payload = {{"lat", 44.4268}, {"lon", 26.1025}, {"channel", "mobile_app"}};
      benchmark::DoNotOptimize(log.append(std::move(e)));
    }
  }
  std::filesystem::remove(path);
}
BENCHMARK(BM_EventAppend)->Arg(0)->Arg(1)->Unit(benchmark::kMicrosecond);

}  // namespace

BENCHMARK_MAIN();
