#include "boost.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>

#include "errors.hpp"
#include "image_io.hpp"
#include "json.hpp"
#include "metrics.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace mvb {

Tensor ScoreNetDenoiser::predict(const Tensor& x_t, int t, const CameraPose& pose,
                                 const FeatureCache& cache) const {
  Tensor eps = net_->predict_noise(x_t, t, pose, cache);
  if (guidance_ != 1.0) {
    const FeatureCache null_cache;
    const Tensor eps_null = net_->predict_noise(x_t, t, pose, null_cache);
    for (int64_t i = 0; i < eps.size(); ++i) {
      eps[i] = eps_null[i] + guidance_ * (eps[i] - eps_null[i]);
    }
  }
  return eps;
}

FeatureCache ScoreNetDenoiser::extract(const ConditionSet& cond,
                                       const std::vector<CameraPose>& poses) const {
  return net_->extract_local_features(cond, poses);
}

void BoostConfig::validate() const {
  // The band may collapse to a point (every step then uses that t).
  check_arg(0.0 <= t_lo && t_lo <= t_hi && t_hi <= 1.0, "BoostConfig: need 0 <= t_lo <= t_hi <= 1");
  // Interval 0 disables the refresh entirely.
  check_arg(anchor_update_interval == 0 || anchor_update_interval <= total_steps ||
                total_steps == 0,
            "BoostConfig: anchor interval exceeds total steps");
  check_arg(denoise_steps >= 1, "BoostConfig: denoise_steps must be >= 1");
}

Tensor sds_step_noise(uint64_t step_seed, int c, int h, int w) {
  Rng rng = Rng(step_seed).derive(0x5d5e);
  Tensor eps({c, h, w});
  for (int64_t i = 0; i < eps.size(); ++i) eps[i] = rng.normal();
  return eps;
}

Tensor refresh_anchor_noise(uint64_t seed, int c, int h, int w) {
  Rng rng = Rng(seed).derive(0xa2c1);
  Tensor eps({c, h, w});
  for (int64_t i = 0; i < eps.size(); ++i) eps[i] = rng.normal();
  return eps;
}

CameraPose sds_step_pose(uint64_t step_seed, const BoostConfig& cfg, double rig_elevation,
                         double rig_radius) {
  Rng rng = Rng(step_seed).derive(0x5d5f);
  const double az = rng.uniform(0.0, 360.0);
  const double el = std::clamp(rig_elevation + rng.uniform(-cfg.sds_elevation_band,
                                                           cfg.sds_elevation_band),
                               -kMaxElevationDeg, kMaxElevationDeg);
  return pose_from_relative_azimuth(az, el, rig_radius);
}

SdsStepResult sds_step(RadianceField& field, const Denoiser& denoiser, const FeatureCache& cache,
                       const BoostConfig& cfg, const DiffusionSchedule& sched,
                       double rig_elevation, double rig_radius, uint64_t step_seed) {
  SdsStepResult out;
  const CameraPose pose = sds_step_pose(step_seed, cfg, rig_elevation, rig_radius);
  const int res = 32;

  const RayBatch rays = rays_for_view(pose, res);
  const RenderResult render =
      render_rays(field, rays, cfg.render_samples, Rng(step_seed).derive(0x5d60).seed(), true);

  // Pack into an image tensor (rays are emitted in pixel order).
  Tensor x0({3, res, res});
  for (int r = 0; r < rays.n(); ++r) {
    for (int c = 0; c < 3; ++c) {
      x0[static_cast<int64_t>(c) * res * res + rays.pixel[static_cast<size_t>(r)]] =
          render.rgb[static_cast<size_t>(r) * 3 + c];
    }
  }

  Rng trng = Rng(step_seed).derive(0x5d61);
  const int t_min = static_cast<int>(std::lround(cfg.t_lo * (sched.horizon - 1)));
  const int t_max = static_cast<int>(std::lround(cfg.t_hi * (sched.horizon - 1)));
  const int t = t_min + static_cast<int>(trng.uniform_int(t_max - t_min + 1));
  out.t = t;

  double residual = 0.0;
  if (cfg.sds_weight != 0.0) {
    const Tensor eps = sds_step_noise(step_seed, 3, res, res);
    const Tensor x_t = forward_diffuse(x0, t, eps, sched);
    const Tensor eps_hat = denoiser.predict(x_t, t, pose, cache);

    const double w_t = 1.0 - sched.alpha_bar[static_cast<size_t>(t)];
    const double scale = cfg.sds_weight * w_t / static_cast<double>(res * res);
    Tensor d_rgb({rays.n(), 3});
    for (int r = 0; r < rays.n(); ++r) {
      for (int c = 0; c < 3; ++c) {
        const int64_t px =
            static_cast<int64_t>(c) * res * res + rays.pixel[static_cast<size_t>(r)];
        const double diff = eps_hat[px] - eps[px];
        residual += diff * diff;
        d_rgb[static_cast<size_t>(r) * 3 + c] = scale * diff;
      }
    }
    residual /= static_cast<double>(3 * res * res);
    if (!std::isfinite(residual)) return out;  // skipped, ok stays false
    render_rays_backward(field, rays, render, d_rgb, nullptr);
  }
  if (cfg.orientation_weight > 0.0) {
    out.orientation =
        orientation_loss(field, rays, render, cfg.orientation_weight, 0.01, 1024);
    if (!std::isfinite(out.orientation)) return out;
  }
  out.ok = true;
  out.residual = residual;
  return out;
}

ViewImage refresh_anchor(int idx, const RadianceField& field, const Denoiser& denoiser,
                         const ConditionSet& cond, const std::vector<CameraPose>& poses,
                         const DiffusionSchedule& sched, const BoostConfig& cfg, uint64_t seed) {
  check_arg(idx != 0, "refresh_anchor: the canonical anchor is immutable");
  check_arg(idx > 0 && idx < cond.n_views(), "refresh_anchor: index out of range");

  // Leave-one-out conditioning: drop the refreshed view from the inputs.
  ConditionSet loo = cond;
  loo.drop_mask.assign(cond.views.size(), false);
  loo.drop_mask[static_cast<size_t>(idx)] = true;
  const FeatureCache cache = denoiser.extract(loo, poses);

  const CameraPose& pose = poses[static_cast<size_t>(idx)];
  const int res = cond.views[static_cast<size_t>(idx)].height();
  const FullRender render = render_field(field, pose, res, cfg.render_samples,
                                         Rng(seed).derive(0xa2c0).seed(), false);

  const int t_mid = static_cast<int>(std::lround(0.5 * (cfg.t_lo + cfg.t_hi) *
                                                 (sched.horizon - 1)));
  const Tensor eps = refresh_anchor_noise(seed, 3, res, res);
  const Tensor x_t = forward_diffuse(render.rgb, t_mid, eps, sched);

  const ScoreFn model = [&](const Tensor& x, int t) {
    return denoiser.predict(x, t, pose, cache);
  };
  ViewImage refined;
  refined.rgb = multi_step_denoise(model, x_t, t_mid, cfg.denoise_steps, sched);
  refined.pose = pose;
  refined.role = ViewRole::kAnchor;
  refined.mask = estimate_mask(refined.rgb);
  return refined;
}

namespace {

// Mean-reduced losses on a ray subset; returns the loss and backpropagates.
double masked_view_loss(RadianceField& field, const ViewImage& target, const CameraPose& pose,
                        int rays_n, int n_samples, uint64_t seed, double weight, bool l1) {
  const int res = target.height();
  const RayBatch rays = rays_subset(pose, res, rays_n, seed);
  const RenderResult render = render_rays(field, rays, n_samples, seed ^ 0x9e37, true);

  Tensor d_rgb({rays.n(), 3});
  double loss = 0.0;
  const double inv = 1.0 / (3.0 * rays.n());
  for (int r = 0; r < rays.n(); ++r) {
    const int px = rays.pixel[static_cast<size_t>(r)];
    for (int c = 0; c < 3; ++c) {
      const double got = render.rgb[static_cast<size_t>(r) * 3 + c];
      const double want = target.rgb[static_cast<int64_t>(c) * res * res + px];
      const double diff = got - want;
      if (l1) {
        loss += weight * std::abs(diff) * inv;
        d_rgb[static_cast<size_t>(r) * 3 + c] =
            weight * (diff > 0 ? 1.0 : (diff < 0 ? -1.0 : 0.0)) * inv;
      } else {
        loss += weight * diff * diff * inv;
        d_rgb[static_cast<size_t>(r) * 3 + c] = weight * 2.0 * diff * inv;
      }
    }
  }
  render_rays_backward(field, rays, render, d_rgb, nullptr);
  return loss;
}

double turntable_saturation(const RadianceField& field, int res, int n_samples) {
  double total = 0.0;
  for (int i = 0; i < 8; ++i) {
    const FullRender r =
        render_field(field, pose_from_relative_azimuth(45.0 * i, 0.0, 2.0), res, n_samples, 0,
                     false);
    Tensor mask({res, res});
    for (int y = 0; y < res; ++y) {
      for (int x = 0; x < res; ++x) mask.at(y, x) = r.opacity.at(y, x) > 0.5 ? 1.0 : 0.0;
    }
    total += foreground_saturation(r.rgb, mask);
  }
  return total / 8.0;
}

void write_turntable(const RadianceField& field, const fs::path& dir, const std::string& tag,
                     int res, int n_samples) {
  for (int i = 0; i < 8; ++i) {
    const FullRender r =
        render_field(field, pose_from_relative_azimuth(45.0 * i, 0.0, 2.0), res, n_samples, 0,
                     false);
    write_png((dir / ("turntable_" + tag + "_" + std::to_string(i) + ".png")).string(), r.rgb);
  }
}

}  // namespace

BoostReport boost(RadianceField& field, const ConditionSet& pseudo_views, const BoostConfig& cfg,
                  const Denoiser& denoiser, const DiffusionSchedule& sched,
                  const std::string& out_dir) {
  cfg.validate();
  pseudo_views.validate();
  check_arg(pseudo_views.n_views() == 4, "boost: need the complete four-view rig");
  const int res = pseudo_views.views[0].height();

  std::vector<CameraPose> poses;
  for (const ViewImage& v : pseudo_views.views) poses.push_back(v.pose);
  const double rig_elevation = poses[0].elevation;
  const double rig_radius = poses[0].radius;

  fs::path run_dir(out_dir);
  const bool emit = !out_dir.empty();
  std::ofstream loss_csv;
  if (emit) {
    fs::create_directories(run_dir / "anchors");
    std::ofstream cfg_snap(run_dir / "boost_config.json");
    cfg_snap << json{{"t_lo", cfg.t_lo},
                     {"t_hi", cfg.t_hi},
                     {"total_steps", cfg.total_steps},
                     {"anchor_update_interval", cfg.anchor_update_interval},
                     {"labels", {cfg.label_canonical, cfg.label_others, cfg.label_others,
                                 cfg.label_others}},
                     {"sds_weight", cfg.sds_weight},
                     {"anchor_mse_weight", cfg.anchor_mse_weight},
                     {"first_view_l1_weight", cfg.first_view_l1_weight},
                     {"orientation_weight", cfg.orientation_weight},
                     {"denoise_steps", cfg.denoise_steps},
                     {"field_lr", cfg.field_lr},
                     {"render_samples", cfg.render_samples},
                     {"anchor_rays", cfg.anchor_rays},
                     {"seed", cfg.seed}}
                    .dump(2)
             << "\n";
    loss_csv.open(run_dir / "boost_loss.csv");
    loss_csv << "step,sds,anchor_mse,first_view_l1,orientation\n";
    write_turntable(field, run_dir, "before", res, cfg.render_samples);
  }

  BoostReport report;
  report.saturation_before = turntable_saturation(field, res, cfg.render_samples);

  // Local features are extracted once for the whole optimization; the
  // leave-one-out refresh conditions are likewise fixed up front.
  ConditionSet cond = pseudo_views;
  cond.labels.assign(cond.views.size(), cfg.label_others);
  cond.labels[0] = cfg.label_canonical;
  cond.drop_mask.assign(cond.views.size(), false);
  const FeatureCache cache = denoiser.extract(cond, poses);

  AnchorSet anchors;
  anchors.anchors = cond.views;
  anchors.revision.assign(cond.views.size(), 0);
  if (emit) {
    for (size_t i = 0; i < anchors.anchors.size(); ++i) {
      write_png((run_dir / "anchors" / ("rev0_view" + std::to_string(i) + ".png")).string(),
                anchors.anchors[i].rgb);
    }
  }

  Adam opt(field.parameters(), cfg.field_lr);
  const Rng root(cfg.seed);

  for (int step = 0; step < cfg.total_steps; ++step) {
    const uint64_t step_seed = root.derive(0xb0057, static_cast<uint64_t>(step)).seed();
    opt.zero_grad();

    const SdsStepResult sds =
        sds_step(field, denoiser, cache, cfg, sched, rig_elevation, rig_radius, step_seed);
    if (!sds.ok) {
      ++report.skipped_sds_steps;
      continue;
    }

    double anchor_loss = 0.0;
    if (cfg.anchor_mse_weight > 0.0) {
      for (int a = 1; a < static_cast<int>(anchors.anchors.size()); ++a) {
        anchor_loss += masked_view_loss(
            field, anchors.anchors[static_cast<size_t>(a)], poses[static_cast<size_t>(a)],
            cfg.anchor_rays, cfg.render_samples,
            Rng(step_seed).derive(0xa0c, static_cast<uint64_t>(a)).seed(),
            cfg.anchor_mse_weight, /*l1=*/false);
      }
    }
    double l1_loss = 0.0;
    if (cfg.first_view_l1_weight > 0.0) {
      l1_loss = masked_view_loss(field, anchors.anchors[0], poses[0], cfg.anchor_rays,
                                 cfg.render_samples, Rng(step_seed).derive(0xa0c, 0).seed(),
                                 cfg.first_view_l1_weight, /*l1=*/true);
    }

    opt.step();
    report.loss_rows.push_back({static_cast<double>(step), sds.residual, anchor_loss, l1_loss,
                                sds.orientation});
    if (emit && loss_csv) {
      loss_csv << step << "," << sds.residual << "," << anchor_loss << "," << l1_loss << ","
               << sds.orientation << "\n";
    }

    if (cfg.anchor_update_interval > 0 && (step + 1) % cfg.anchor_update_interval == 0 &&
        step + 1 < cfg.total_steps) {
      for (int a = 1; a < static_cast<int>(anchors.anchors.size()); ++a) {
        anchors.anchors[static_cast<size_t>(a)] = refresh_anchor(
            a, field, denoiser, cond, poses, sched, cfg,
            root.derive(0xafe5, static_cast<uint64_t>(step) * 8 + static_cast<uint64_t>(a))
                .seed());
        anchors.revision[static_cast<size_t>(a)]++;
        if (emit) {
          write_png((run_dir / "anchors" /
                     ("rev" + std::to_string(anchors.revision[static_cast<size_t>(a)]) + "_view" +
                      std::to_string(a) + ".png"))
                        .string(),
                    anchors.anchors[static_cast<size_t>(a)].rgb);
        }
      }
    }
  }
  report.steps = cfg.total_steps;
  report.final_anchors = anchors;
  report.saturation_after = turntable_saturation(field, res, cfg.render_samples);

  if (cfg.total_steps > 0 &&
      report.skipped_sds_steps > std::max(1, cfg.total_steps / 100)) {
    throw InternalError("boost: " + std::to_string(report.skipped_sds_steps) +
                        " non-finite SDS steps out of " + std::to_string(cfg.total_steps));
  }

  if (emit) {
    write_turntable(field, run_dir, "after", res, cfg.render_samples);
    std::ofstream metrics(run_dir / "boost_metrics.json");
    metrics << json{{"steps", report.steps},
                    {"skipped_sds_steps", report.skipped_sds_steps},
                    {"saturation_before", report.saturation_before},
                    {"saturation_after", report.saturation_after},
                    {"anchor_revisions", anchors.revision}}
                   .dump(2)
            << "\n";
  }
  return report;
}

ConditionSet pseudo_views_mode_a(const std::vector<ViewImage>& gt_rig,
                                 const AugmentationPolicy& policy,
                                 const DiffusionSchedule& sched, uint64_t seed,
                                 double label_others) {
  check_arg(gt_rig.size() == 4, "pseudo_views_mode_a: need the four-view rig");
  ConditionSet cond;
  const Rng root(seed);
  for (size_t v = 0; v < gt_rig.size(); ++v) {
    ViewImage view = gt_rig[v];
    if (v > 0) {
      // Content corruptions only: drop would lose an anchor and jitter
      // would falsify the anchor pose.
      Rng rng = root.derive(0x9a0de, static_cast<uint64_t>(v));
      if (rng.bernoulli(policy.corruption_prob)) {
        view = noise_disturb(view, rng.next_u64(), sched, policy.noise_disturb_max_t).first;
      }
      if (rng.bernoulli(policy.corruption_prob)) {
        view = random_scale(view, rng.next_u64(), policy.scale_factors);
      }
      if (rng.bernoulli(policy.corruption_prob)) {
        view = grid_distort(view, rng.next_u64(), policy.grid_strength_px(view.width()));
      }
    }
    view.role = ViewRole::kCondition;
    cond.views.push_back(std::move(view));
    cond.labels.push_back(v == 0 ? 1.0 : label_others);
    cond.drop_mask.push_back(false);
  }
  return cond;
}

ConditionSet pseudo_views_mode_b(const ViewImage& view0, const Denoiser& denoiser,
                                 const DiffusionSchedule& sched, int sampler_steps, uint64_t seed,
                                 double label_others) {
  const int res = view0.height();
  ConditionSet single;
  single.views.push_back(view0);
  single.labels.push_back(1.0);
  single.drop_mask.push_back(false);
  const FeatureCache cache = denoiser.extract(single, {view0.pose});

  ConditionSet cond;
  cond.views.push_back(view0);
  cond.labels.push_back(1.0);
  cond.drop_mask.push_back(false);

  const ViewRig rig = orthogonal_rig(view0.pose.elevation, view0.pose.radius);
  Rng rng = Rng(seed).derive(0x9b0de);
  for (int v = 1; v < 4; ++v) {
    const CameraPose& pose = rig.poses[static_cast<size_t>(v)];
    Tensor x({3, res, res});
    for (int64_t i = 0; i < x.size(); ++i) x[i] = rng.normal();
    const ScoreFn model = [&](const Tensor& xt, int t) {
      return denoiser.predict(xt, t, pose, cache);
    };
    ViewImage sampled;
    sampled.rgb = multi_step_denoise(model, x, sched.horizon - 1, sampler_steps, sched);
    sampled.pose = pose;
    sampled.mask = estimate_mask(sampled.rgb);
    cond.views.push_back(std::move(sampled));
    cond.labels.push_back(label_others);
    cond.drop_mask.push_back(false);
  }
  return cond;
}

}  // namespace mvb
