#pragma once

#include <string>
#include <vector>

#include "boost.hpp"
#include "json.hpp"
#include "metrics.hpp"
#include "scene.hpp"

namespace mvb {

// Novel-view-synthesis evaluation over the 16-view ring: condition on the
// first n rig views, sample every remaining view from pure noise with the
// deterministic denoiser, and score against the ground-truth renders.
struct NvsConfig {
  int n_condition_views = 4;  // 1, 2 or 4
  int sampler_steps = 25;
  uint64_t seed = 0;
  int max_scenes = 0;  // 0 = every test scene
  bool corrupt_conditions = false;
  AugmentationPolicy corruption_policy;
};

struct NvsSceneRow {
  uint64_t scene_seed = 0;
  double psnr = 0.0;
  double ssim = 0.0;
};

struct NvsTable {
  int n_condition_views = 0;
  std::vector<NvsSceneRow> rows;
  double mean_psnr = 0.0;
  double mean_ssim = 0.0;

  nlohmann::json to_json() const;
  std::string to_csv() const;
  std::string to_markdown() const;
};

// Condition-view subsets per count: 1 -> {0}, 2 -> {0,8} (canonical +
// opposite), 4 -> {0,4,8,12} (the orthogonal rig).
std::vector<int> condition_ring_indices(int n_condition_views);

NvsTable eval_nvs(const Denoiser& denoiser, const DiffusionSchedule& sched,
                  const DatasetManifest& manifest, const NvsConfig& cfg);

// One-sided exact binomial sign test: P(X >= wins) under p = 1/2.
double sign_test_p(int wins, int n);

// Mean PSNR of the field's renders against ground truth over the 12 ring
// views that are not rig azimuths.
double held_out_view_psnr(const RadianceField& field, const SceneSpec& scene, int resolution,
                          int n_samples);

// Minimal raster plots (line series / bars) for the report bundles.
void plot_lines(const std::vector<std::vector<double>>& series, const std::string& path);
void plot_bars(const std::vector<double>& values, const std::vector<std::string>& labels,
               const std::string& path);

}  // namespace mvb
