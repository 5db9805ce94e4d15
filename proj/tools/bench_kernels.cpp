// Serial-vs-OpenMP throughput for the hot kernels: convolution, attention,
// and the volume renderer's ray batch.

#include <benchmark/benchmark.h>

#include "field.hpp"
#include "kernels.hpp"
#include "rng.hpp"
#include "scene.hpp"

using namespace mvb;
using namespace mvb::kernels;

namespace {

Tensor rand_t(std::vector<int> shape, uint64_t seed) {
  Rng rng(seed);
  Tensor t(std::move(shape));
  for (int64_t i = 0; i < t.size(); ++i) t[i] = rng.uniform(-1.0, 1.0);
  return t;
}

void bm_conv2d_serial(benchmark::State& state) {
  const int c = 32, h = 32, w = 32;
  const Tensor in = rand_t({c, h, w}, 1), wt = rand_t({c, c, 3, 3}, 2), b = rand_t({c}, 3);
  Tensor out({c, h, w});
  for (auto _ : state) {
    conv2d_forward_serial(in.data(), c, h, w, wt.data(), c, 3, b.data(), 1, 1, out.data());
    benchmark::DoNotOptimize(out.data());
  }
}

void bm_conv2d_omp(benchmark::State& state) {
  const int c = 32, h = 32, w = 32;
  const Tensor in = rand_t({c, h, w}, 1), wt = rand_t({c, c, 3, 3}, 2), b = rand_t({c}, 3);
  Tensor out({c, h, w});
  for (auto _ : state) {
    conv2d_forward(in.data(), c, h, w, wt.data(), c, 3, b.data(), 1, 1, out.data());
    benchmark::DoNotOptimize(out.data());
  }
}

void bm_attention_serial(benchmark::State& state) {
  const int nq = 256, nk = 1280, d = 32;
  const Tensor q = rand_t({nq, d}, 4), k = rand_t({nk, d}, 5), v = rand_t({nk, d}, 6);
  Tensor out({nq, d});
  for (auto _ : state) {
    attention_forward_serial(q.data(), nq, k.data(), v.data(), nk, d, out.data(), nullptr);
    benchmark::DoNotOptimize(out.data());
  }
}

void bm_attention_omp(benchmark::State& state) {
  const int nq = 256, nk = 1280, d = 32;
  const Tensor q = rand_t({nq, d}, 4), k = rand_t({nk, d}, 5), v = rand_t({nk, d}, 6);
  Tensor out({nq, d});
  for (auto _ : state) {
    attention_forward(q.data(), nq, k.data(), v.data(), nk, d, out.data(), nullptr);
    benchmark::DoNotOptimize(out.data());
  }
}

const RadianceField& bench_field() {
  static RadianceField field = [] {
    RadianceField f(FieldConfig{}, 7);
    Rng rng(8);
    for (Param* p : f.parameters()) {
      for (int64_t i = 0; i < p->value.size(); ++i) p->value[i] += 0.2 * rng.normal();
    }
    return f;
  }();
  return field;
}

void bm_render_rays_serial(benchmark::State& state) {
  const RayBatch rays = rays_for_view(pose_from_relative_azimuth(30.0, 10.0, 2.0), 32);
  for (auto _ : state) {
    RenderResult res = render_rays_serial(bench_field(), rays, 32, 1, false);
    benchmark::DoNotOptimize(res.rgb.data());
  }
}

void bm_render_rays_omp(benchmark::State& state) {
  const RayBatch rays = rays_for_view(pose_from_relative_azimuth(30.0, 10.0, 2.0), 32);
  for (auto _ : state) {
    RenderResult res = render_rays(bench_field(), rays, 32, 1, false);
    benchmark::DoNotOptimize(res.rgb.data());
  }
}

void bm_scene_render_serial(benchmark::State& state) {
  const SceneSpec scene = sample_scene(3);
  const CameraPose pose = pose_from_relative_azimuth(40.0, 10.0, 2.0);
  for (auto _ : state) {
    ViewImage v = render_view_serial(scene, pose, 32);
    benchmark::DoNotOptimize(v.rgb.data());
  }
}

void bm_scene_render_omp(benchmark::State& state) {
  const SceneSpec scene = sample_scene(3);
  const CameraPose pose = pose_from_relative_azimuth(40.0, 10.0, 2.0);
  for (auto _ : state) {
    ViewImage v = render_view(scene, pose, 32);
    benchmark::DoNotOptimize(v.rgb.data());
  }
}

BENCHMARK(bm_conv2d_serial);
BENCHMARK(bm_conv2d_omp);
BENCHMARK(bm_attention_serial);
BENCHMARK(bm_attention_omp);
BENCHMARK(bm_render_rays_serial);
BENCHMARK(bm_render_rays_omp);
BENCHMARK(bm_scene_render_serial);
BENCHMARK(bm_scene_render_omp);

}  // namespace

BENCHMARK_MAIN();
