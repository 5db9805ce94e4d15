#include "evaluate.hpp"

#include <filesystem>

#include "doctest.h"
#include "errors.hpp"
#include "image_io.hpp"
#include "test_util.hpp"

using namespace mvb;
namespace fs = std::filesystem;

namespace {

NetworkConfig tiny_net_cfg() {
  NetworkConfig cfg;
  cfg.base_channels = 8;
  cfg.channel_mults = {1, 2};
  cfg.attention_levels = {1};
  cfg.time_embed_width = 32;
  cfg.global_feature_width = 24;
  cfg.resolution = 32;
  return cfg;
}

}  // namespace

TEST_CASE("condition_ring_indices: the documented subsets") {
  CHECK(condition_ring_indices(1) == std::vector<int>{0});
  CHECK(condition_ring_indices(2) == std::vector<int>{0, 8});
  CHECK(condition_ring_indices(4) == std::vector<int>{0, 4, 8, 12});
  CHECK_THROWS_AS(condition_ring_indices(3), InvalidArgument);
}

TEST_CASE("sign_test_p: exact binomial tails") {
  CHECK(sign_test_p(0, 10) == doctest::Approx(1.0));
  CHECK(sign_test_p(10, 10) == doctest::Approx(1.0 / 1024.0));
  CHECK(sign_test_p(9, 10) == doctest::Approx(11.0 / 1024.0));
  CHECK(sign_test_p(8, 10) == doctest::Approx(56.0 / 1024.0));
  CHECK(sign_test_p(5, 5) == doctest::Approx(1.0 / 32.0));
  CHECK_THROWS_AS(sign_test_p(11, 10), InvalidArgument);
}

TEST_CASE("eval_nvs: deterministic, shaped, pure in the seed") {
  const fs::path dir = fs::temp_directory_path() / "mvb_eval_ds";
  fs::remove_all(dir);
  build_dataset(1, 0, 2, 32, dir.string());
  const DatasetManifest manifest = load_manifest((dir / "manifest.json").string());

  ScoreNet net(tiny_net_cfg(), 3);
  const ScoreNetDenoiser denoiser(net);
  const DiffusionSchedule sched = default_schedule();

  NvsConfig cfg;
  cfg.n_condition_views = 2;
  cfg.sampler_steps = 2;
  cfg.seed = 9;
  cfg.max_scenes = 2;

  const NvsTable a = eval_nvs(denoiser, sched, manifest, cfg);
  REQUIRE(a.rows.size() == 2);
  CHECK(a.n_condition_views == 2);
  for (const NvsSceneRow& r : a.rows) {
    CHECK(std::isfinite(r.psnr));
    CHECK(r.ssim <= 1.0);
  }

  const NvsTable b = eval_nvs(denoiser, sched, manifest, cfg);
  CHECK(a.to_json().dump() == b.to_json().dump());
  CHECK(a.to_csv() == b.to_csv());
  CHECK(a.to_markdown().find("n/a") != std::string::npos);  // LPIPS marker

  fs::remove_all(dir);
}

TEST_CASE("held_out_view_psnr: identical geometry scores high") {
  const SceneSpec scene = sample_scene(4);
  const ViewRig rig = orthogonal_rig(0.0, 2.0);
  std::vector<ViewImage> views;
  for (const CameraPose& p : rig.poses) views.push_back(render_view(scene, p, 32));
  RadianceField field = coarse_reconstruct(views, 400, 5);
  const double held = held_out_view_psnr(field, scene, 32, 32);
  CHECK(held > 14.0);
  CHECK(held < 99.0);
}

TEST_CASE("plots: files written and readable") {
  const fs::path dir = fs::temp_directory_path() / "mvb_plots";
  fs::remove_all(dir);
  fs::create_directories(dir);
  plot_lines({{1.0, 0.5, 0.3, 0.2}, {0.9, 0.8, 0.75, 0.7}}, (dir / "lines.png").string());
  plot_bars({20.0, 21.5, 24.0}, {"1", "2", "4"}, (dir / "bars.png").string());
  const Tensor lines = read_png((dir / "lines.png").string());
  CHECK(lines.dim(1) == 320);
  const Tensor bars = read_png((dir / "bars.png").string());
  CHECK(bars.dim(2) == 480);
  fs::remove_all(dir);
}
