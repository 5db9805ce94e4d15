#include "evaluate.hpp"

#include <cmath>
#include <sstream>

#include "errors.hpp"
#include "image_io.hpp"

using nlohmann::json;

namespace mvb {

std::vector<int> condition_ring_indices(int n_condition_views) {
  switch (n_condition_views) {
    case 1: return {0};
    case 2: return {0, 8};
    case 4: return {0, 4, 8, 12};
    default:
      throw InvalidArgument("condition_ring_indices: n must be 1, 2 or 4, got " +
                            std::to_string(n_condition_views));
  }
}

json NvsTable::to_json() const {
  json rows_j = json::array();
  for (const NvsSceneRow& r : rows) {
    rows_j.push_back({{"scene_seed", r.scene_seed}, {"psnr", r.psnr}, {"ssim", r.ssim}});
  }
  return json{{"n_condition_views", n_condition_views},
              {"mean_psnr", mean_psnr},
              {"mean_ssim", mean_ssim},
              {"lpips", "n/a (pretrained net out of scope)"},
              {"scenes", rows_j}};
}

std::string NvsTable::to_csv() const {
  std::ostringstream out;
  out << "scene_seed,psnr,ssim\n";
  for (const NvsSceneRow& r : rows) out << r.scene_seed << "," << r.psnr << "," << r.ssim << "\n";
  out << "mean," << mean_psnr << "," << mean_ssim << "\n";
  return out.str();
}

std::string NvsTable::to_markdown() const {
  std::ostringstream out;
  out << "| scene | PSNR | SSIM | LPIPS |\n|---|---|---|---|\n";
  for (const NvsSceneRow& r : rows) {
    out << "| " << r.scene_seed << " | " << r.psnr << " | " << r.ssim << " | n/a |\n";
  }
  out << "| **mean (" << n_condition_views << " views)** | **" << mean_psnr << "** | **"
      << mean_ssim << "** | n/a |\n";
  return out.str();
}

NvsTable eval_nvs(const Denoiser& denoiser, const DiffusionSchedule& sched,
                  const DatasetManifest& manifest, const NvsConfig& cfg) {
  const std::vector<const SceneEntry*> test = manifest.split("test");
  if (test.empty()) throw ConfigError("eval_nvs: manifest has no test split");
  const std::vector<int> cond_idx = condition_ring_indices(cfg.n_condition_views);
  const int res = manifest.resolution;

  NvsTable table;
  table.n_condition_views = cfg.n_condition_views;

  int n_scenes = static_cast<int>(test.size());
  if (cfg.max_scenes > 0) n_scenes = std::min(n_scenes, cfg.max_scenes);

  for (int s = 0; s < n_scenes; ++s) {
    const uint64_t scene_seed = test[static_cast<size_t>(s)]->seed;
    const SceneSpec scene = sample_scene(scene_seed);
    const std::vector<ViewImage> ring = render_eval_rig(scene, res);

    ConditionSet cond;
    std::vector<CameraPose> poses;
    for (int idx : cond_idx) {
      cond.views.push_back(ring[static_cast<size_t>(idx)]);
      cond.labels.push_back(1.0);
      cond.drop_mask.push_back(false);
      poses.push_back(ring[static_cast<size_t>(idx)].pose);
    }
    if (cfg.corrupt_conditions) {
      // Content-only corruption of the non-canonical conditions (labels stay
      // at 1 so both ablation arms see the identical interface).
      std::vector<ViewImage> rig_like;
      for (const ViewImage& v : cond.views) rig_like.push_back(v);
      while (rig_like.size() < 4) rig_like.push_back(cond.views[0]);
      const ConditionSet corrupted = pseudo_views_mode_a(
          rig_like, cfg.corruption_policy, sched, Rng(cfg.seed).derive(scene_seed).seed(), 1.0);
      for (size_t i = 1; i < cond.views.size(); ++i) cond.views[i] = corrupted.views[i];
    }
    const FeatureCache cache = denoiser.extract(cond, poses);

    double psnr_sum = 0.0, ssim_sum = 0.0;
    int count = 0;
    for (int v = 1; v < 16; ++v) {
      const CameraPose& pose = ring[static_cast<size_t>(v)].pose;
      Rng rng = Rng(cfg.seed).derive(scene_seed, static_cast<uint64_t>(v));
      Tensor x({3, res, res});
      for (int64_t i = 0; i < x.size(); ++i) x[i] = rng.normal();
      const ScoreFn model = [&](const Tensor& xt, int t) {
        return denoiser.predict(xt, t, pose, cache);
      };
      const Tensor sampled = multi_step_denoise(model, x, sched.horizon - 1, cfg.sampler_steps,
                                                sched);
      psnr_sum += psnr(sampled, ring[static_cast<size_t>(v)].rgb);
      ssim_sum += ssim(sampled, ring[static_cast<size_t>(v)].rgb);
      ++count;
    }
    table.rows.push_back({scene_seed, psnr_sum / count, ssim_sum / count});
  }

  for (const NvsSceneRow& r : table.rows) {
    table.mean_psnr += r.psnr / static_cast<double>(table.rows.size());
    table.mean_ssim += r.ssim / static_cast<double>(table.rows.size());
  }
  return table;
}

double sign_test_p(int wins, int n) {
  check_arg(wins >= 0 && wins <= n, "sign_test_p: wins outside [0,n]");
  // Exact tail sum of Binomial(n, 1/2) in log space for stability.
  double p = 0.0;
  for (int k = wins; k <= n; ++k) {
    double log_c = 0.0;
    for (int i = 0; i < k; ++i) {
      log_c += std::log(static_cast<double>(n - i)) - std::log(static_cast<double>(i + 1));
    }
    p += std::exp(log_c - n * std::log(2.0));
  }
  return std::min(1.0, p);
}

double held_out_view_psnr(const RadianceField& field, const SceneSpec& scene, int resolution,
                          int n_samples) {
  const ViewRig ring = ring_rig(16, 0.0, 2.0);
  double total = 0.0;
  int count = 0;
  for (int i = 0; i < 16; ++i) {
    if (i % 4 == 0) continue;  // rig azimuths 0/90/180/270
    const ViewImage gt = render_view(scene, ring.poses[static_cast<size_t>(i)], resolution);
    const FullRender render =
        render_field(field, ring.poses[static_cast<size_t>(i)], resolution, n_samples, 0, false);
    total += psnr(render.rgb, gt.rgb);
    ++count;
  }
  return total / count;
}

// ---------------------------------------------------------------------------
// Plotting

namespace {

constexpr int kPlotW = 480, kPlotH = 320, kMargin = 32;

struct Canvas {
  Tensor img;
  Canvas() : img(Tensor::full({3, kPlotH, kPlotW}, 1.0)) {}
  void set(int y, int x, double r, double g, double b) {
    if (y < 0 || y >= kPlotH || x < 0 || x >= kPlotW) return;
    img.at(0, y, x) = r;
    img.at(1, y, x) = g;
    img.at(2, y, x) = b;
  }
  void line(double y0, double x0, double y1, double x1, double r, double g, double b) {
    const int steps = static_cast<int>(std::max(std::abs(y1 - y0), std::abs(x1 - x0))) + 1;
    for (int i = 0; i <= steps; ++i) {
      const double t = static_cast<double>(i) / steps;
      set(static_cast<int>(std::lround(y0 + t * (y1 - y0))),
          static_cast<int>(std::lround(x0 + t * (x1 - x0))), r, g, b);
    }
  }
  void frame() {
    line(kPlotH - kMargin, kMargin, kPlotH - kMargin, kPlotW - kMargin, 0, 0, 0);
    line(kMargin, kMargin, kPlotH - kMargin, kMargin, 0, 0, 0);
  }
};

const double kSeriesColors[4][3] = {
    {0.85, 0.2, 0.2}, {0.2, 0.4, 0.85}, {0.1, 0.6, 0.3}, {0.7, 0.5, 0.1}};

}  // namespace

void plot_lines(const std::vector<std::vector<double>>& series, const std::string& path) {
  Canvas canvas;
  canvas.frame();
  double lo = 1e300, hi = -1e300;
  size_t n = 0;
  for (const auto& s : series) {
    n = std::max(n, s.size());
    for (double v : s) {
      if (std::isfinite(v)) {
        lo = std::min(lo, v);
        hi = std::max(hi, v);
      }
    }
  }
  if (n < 2 || hi <= lo) {
    write_png(path, canvas.img);
    return;
  }
  const double xspan = kPlotW - 2.0 * kMargin;
  const double yspan = kPlotH - 2.0 * kMargin;
  for (size_t si = 0; si < series.size(); ++si) {
    const auto& col = kSeriesColors[si % 4];
    const auto& s = series[si];
    for (size_t i = 1; i < s.size(); ++i) {
      const double x0 = kMargin + xspan * (i - 1) / (n - 1);
      const double x1 = kMargin + xspan * i / (n - 1);
      const double y0 = kPlotH - kMargin - yspan * (s[i - 1] - lo) / (hi - lo);
      const double y1 = kPlotH - kMargin - yspan * (s[i] - lo) / (hi - lo);
      canvas.line(y0, x0, y1, x1, col[0], col[1], col[2]);
    }
  }
  write_png(path, canvas.img);
}

void plot_bars(const std::vector<double>& values, const std::vector<std::string>& labels,
               const std::string& path) {
  (void)labels;  // bars are ordered; the caller records labels in its JSON
  Canvas canvas;
  canvas.frame();
  if (values.empty()) {
    write_png(path, canvas.img);
    return;
  }
  double hi = 0.0;
  for (double v : values) hi = std::max(hi, v);
  if (hi <= 0.0) hi = 1.0;
  const double xspan = kPlotW - 2.0 * kMargin;
  const double yspan = kPlotH - 2.0 * kMargin;
  const double slot = xspan / values.size();
  for (size_t i = 0; i < values.size(); ++i) {
    const auto& col = kSeriesColors[i % 4];
    const int x0 = static_cast<int>(kMargin + slot * i + slot * 0.2);
    const int x1 = static_cast<int>(kMargin + slot * i + slot * 0.8);
    const int ytop = static_cast<int>(kPlotH - kMargin - yspan * values[i] / hi);
    for (int x = x0; x <= x1; ++x) {
      canvas.line(kPlotH - kMargin - 1, x, ytop, x, col[0], col[1], col[2]);
    }
  }
  write_png(path, canvas.img);
}

}  // namespace mvb
