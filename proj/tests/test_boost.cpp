#include "boost.hpp"

#include <cmath>
#include <filesystem>

#include "doctest.h"
#include "errors.hpp"
#include "metrics.hpp"
#include "scene.hpp"
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

FieldConfig small_field_cfg() {
  FieldConfig cfg;
  cfg.hash_levels = 4;
  cfg.log2_table_size = 10;
  cfg.decoder_hidden = 16;
  return cfg;
}

// Returns the exact eps that sds_step draws for the step, so SDS sits at its
// fixed point; extraction yields an empty cache.
class SdsOracleDenoiser : public Denoiser {
 public:
  explicit SdsOracleDenoiser(uint64_t step_seed) : step_seed_(step_seed) {}
  Tensor predict(const Tensor& x_t, int, const CameraPose&, const FeatureCache&) const override {
    return sds_step_noise(step_seed_, x_t.dim(0), x_t.dim(1), x_t.dim(2));
  }
  FeatureCache extract(const ConditionSet&, const std::vector<CameraPose>&) const override {
    return FeatureCache{};
  }
  uint64_t step_seed_;
};

// Same idea for refresh_anchor: hand back the refresh noise so the denoise
// trajectory recovers the rendered image exactly.
class RefreshOracleDenoiser : public Denoiser {
 public:
  explicit RefreshOracleDenoiser(uint64_t seed) : seed_(seed) {}
  Tensor predict(const Tensor& x_t, int, const CameraPose&, const FeatureCache&) const override {
    return refresh_anchor_noise(seed_, x_t.dim(0), x_t.dim(1), x_t.dim(2));
  }
  FeatureCache extract(const ConditionSet&, const std::vector<CameraPose>&) const override {
    return FeatureCache{};
  }
  uint64_t seed_;
};

ConditionSet rig_condition_from_scene(uint64_t scene_seed, int res, double label_others = 0.5) {
  const SceneSpec scene = sample_scene(scene_seed);
  const ViewRig rig = orthogonal_rig(0.0, 2.0);
  ConditionSet cond;
  for (int i = 0; i < 4; ++i) {
    cond.views.push_back(render_view(scene, rig.poses[static_cast<size_t>(i)], res));
    cond.labels.push_back(i == 0 ? 1.0 : label_others);
    cond.drop_mask.push_back(false);
  }
  return cond;
}

std::vector<CameraPose> rig_poses(const ConditionSet& cond) {
  std::vector<CameraPose> poses;
  for (const ViewImage& v : cond.views) poses.push_back(v.pose);
  return poses;
}

}  // namespace

TEST_CASE("sds_step: oracle score is a fixed point (zero gradient)") {
  RadianceField field(small_field_cfg(), 1);
  {
    Rng rng(2);
    for (Param* p : field.parameters()) {
      for (int64_t i = 0; i < p->value.size(); ++i) p->value[i] += 0.2 * rng.normal();
    }
  }
  BoostConfig cfg;
  cfg.orientation_weight = 0.0;
  const uint64_t step_seed = 42;
  const SdsOracleDenoiser oracle(step_seed);

  for (Param* p : field.parameters()) p->grad.zero();
  const SdsStepResult res =
      sds_step(field, oracle, FeatureCache{}, cfg, default_schedule(), 0.0, 2.0, step_seed);
  CHECK(res.ok);
  CHECK(res.residual == 0.0);
  for (Param* p : field.parameters()) {
    for (int64_t i = 0; i < p->grad.size(); ++i) CHECK(p->grad[i] == 0.0);
  }
}

TEST_CASE("sds_step: collapsed t band pins every step to that t") {
  RadianceField field(small_field_cfg(), 3);
  BoostConfig cfg;
  cfg.t_lo = cfg.t_hi = 0.3;
  cfg.orientation_weight = 0.0;
  const DiffusionSchedule sched = default_schedule();
  const int expect_t = static_cast<int>(std::lround(0.3 * (sched.horizon - 1)));
  for (uint64_t s = 0; s < 5; ++s) {
    const SdsOracleDenoiser oracle(s);
    const SdsStepResult res = sds_step(field, oracle, FeatureCache{}, cfg, sched, 0.0, 2.0, s);
    CHECK(res.t == expect_t);
  }
}

TEST_CASE("sds_step: pose distribution stays in the configured band") {
  BoostConfig cfg;
  double az_lo = 400.0, az_hi = -1.0;
  for (uint64_t s = 0; s < 200; ++s) {
    const CameraPose pose = sds_step_pose(s, cfg, 0.0, 2.0);
    CHECK(pose.elevation >= -cfg.sds_elevation_band - 1e-12);
    CHECK(pose.elevation <= cfg.sds_elevation_band + 1e-12);
    CHECK(pose.radius == 2.0);
    az_lo = std::min(az_lo, pose.rel_azimuth);
    az_hi = std::max(az_hi, pose.rel_azimuth);
  }
  CHECK(az_lo < 30.0);
  CHECK(az_hi > 330.0);
}

TEST_CASE("refresh_anchor: rejects the canonical anchor") {
  RadianceField field(small_field_cfg(), 4);
  const ConditionSet cond = rig_condition_from_scene(1, 32);
  const RefreshOracleDenoiser oracle(7);
  CHECK_THROWS_AS(refresh_anchor(0, field, oracle, cond, rig_poses(cond), default_schedule(),
                                 BoostConfig{}, 7),
                  InvalidArgument);
}

TEST_CASE("refresh_anchor: oracle score returns the rendered view exactly") {
  // Composition contract: with the true eps, the multi-step denoiser recovers
  // whatever the field rendered at the anchor pose.
  const ConditionSet cond = rig_condition_from_scene(2, 32);
  RadianceField field = coarse_reconstruct(cond.views, 300, 5);
  const BoostConfig cfg;
  const uint64_t seed = 11;
  const RefreshOracleDenoiser oracle(seed);

  const ViewImage refined =
      refresh_anchor(2, field, oracle, cond, rig_poses(cond), default_schedule(), cfg, seed);
  const FullRender direct = render_field(field, cond.views[2].pose, 32, cfg.render_samples,
                                         Rng(seed).derive(0xa2c0).seed(), false);
  Tensor clamped = direct.rgb;
  clamped.clamp_(0.0, 1.0);
  CHECK(max_abs_diff(refined.rgb, clamped) < 1e-3);
}

TEST_CASE("refresh_anchor: leave-one-out ignores the refreshed view's content") {
  const ConditionSet cond = rig_condition_from_scene(3, 32);
  RadianceField field(small_field_cfg(), 6);
  ScoreNet net(tiny_net_cfg(), 9);
  {
    // Shake the zero-initialized projections so condition content actually
    // influences the prediction.
    Rng rng(31);
    for (Param* p : net.parameters()) {
      for (int64_t i = 0; i < p->value.size(); ++i) p->value[i] += 0.05 * rng.normal();
    }
  }
  const ScoreNetDenoiser denoiser(net);
  BoostConfig cfg;
  cfg.denoise_steps = 2;

  const ViewImage a = refresh_anchor(1, field, denoiser, cond, rig_poses(cond),
                                     default_schedule(), cfg, 3);

  // Replace view 1's image with garbage; the refresh must not change.
  ConditionSet garbled = cond;
  Rng rng(77);
  for (int64_t i = 0; i < garbled.views[1].rgb.size(); ++i) {
    garbled.views[1].rgb[i] = rng.uniform();
  }
  const ViewImage b = refresh_anchor(1, field, denoiser, garbled, rig_poses(garbled),
                                     default_schedule(), cfg, 3);
  CHECK(max_abs_diff(a.rgb, b.rgb) == 0.0);

  // Garbling a view that stays in the conditioning does change the result.
  ConditionSet garbled3 = cond;
  for (int64_t i = 0; i < garbled3.views[3].rgb.size(); ++i) {
    garbled3.views[3].rgb[i] = rng.uniform();
  }
  const ViewImage c = refresh_anchor(1, field, denoiser, garbled3, rig_poses(garbled3),
                                     default_schedule(), cfg, 3);
  CHECK(max_abs_diff(a.rgb, c.rgb) > 0.0);
}

TEST_CASE("boost: zero steps leave the field and report empty") {
  const ConditionSet cond = rig_condition_from_scene(4, 32);
  RadianceField field(small_field_cfg(), 8);
  std::vector<Tensor> before;
  for (Param* p : field.parameters()) before.push_back(p->value);

  BoostConfig cfg;
  cfg.total_steps = 0;
  const ScoreNet net(tiny_net_cfg(), 10);
  const ScoreNetDenoiser denoiser(net);
  const BoostReport report = boost(field, cond, cfg, denoiser, default_schedule());
  CHECK(report.loss_rows.empty());
  CHECK(report.steps == 0);
  size_t i = 0;
  for (Param* p : field.parameters()) {
    CHECK(max_abs_diff(p->value, before[i]) == 0.0);
    ++i;
  }
}

TEST_CASE("boost: pure first-view L1 converges toward the input image") {
  const ConditionSet cond = rig_condition_from_scene(5, 32);
  BoostConfig cfg;
  cfg.sds_weight = 0.0;
  cfg.anchor_mse_weight = 0.0;
  cfg.orientation_weight = 0.0;
  cfg.first_view_l1_weight = 10.0;
  cfg.anchor_update_interval = 0;
  cfg.field_lr = 1e-2;
  const ScoreNet net(tiny_net_cfg(), 11);
  const ScoreNetDenoiser denoiser(net);
  const DiffusionSchedule sched = default_schedule();

  auto psnr_at = [&](int steps) {
    RadianceField field(small_field_cfg(), 12);
    BoostConfig c = cfg;
    c.total_steps = steps;
    boost(field, cond, c, denoiser, sched);
    const FullRender r = render_field(field, cond.views[0].pose, 32, 32, 0, false);
    return psnr(r.rgb, cond.views[0].rgb);
  };

  const double p0 = psnr_at(0);
  const double p1 = psnr_at(120);
  const double p2 = psnr_at(360);
  CHECK(p1 > p0);
  CHECK(p2 > p1);
}

TEST_CASE("boost: anchor 0 is byte-immutable and never revised") {
  const ConditionSet cond = rig_condition_from_scene(6, 32);
  RadianceField field = coarse_reconstruct(cond.views, 150, 13);
  BoostConfig cfg;
  cfg.total_steps = 30;
  cfg.anchor_update_interval = 10;
  cfg.denoise_steps = 2;
  cfg.orientation_weight = 0.0;
  const ScoreNet net(tiny_net_cfg(), 14);
  const ScoreNetDenoiser denoiser(net);

  const BoostReport report = boost(field, cond, cfg, denoiser, default_schedule());
  CHECK(max_abs_diff(report.final_anchors.anchors[0].rgb, cond.views[0].rgb) == 0.0);
  CHECK(report.final_anchors.revision[0] == 0);
  CHECK(report.final_anchors.revision[1] > 0);
  CHECK(report.skipped_sds_steps == 0);
}

TEST_CASE("boost: oracle score with self-consistent anchors is a no-op") {
  // Anchors that match the field's own renders plus a fixed-point score:
  // every loss starts at zero and stays there.
  RadianceField field = coarse_reconstruct(rig_condition_from_scene(7, 32).views, 150, 15);

  const ViewRig rig = orthogonal_rig(0.0, 2.0);
  ConditionSet self_cond;
  for (int i = 0; i < 4; ++i) {
    const FullRender r = render_field(field, rig.poses[static_cast<size_t>(i)], 32, 32, 0, false);
    ViewImage v;
    v.rgb = r.rgb;
    v.rgb.clamp_(0.0, 1.0);
    v.pose = rig.poses[static_cast<size_t>(i)];
    self_cond.views.push_back(std::move(v));
    self_cond.labels.push_back(i == 0 ? 1.0 : 0.5);
    self_cond.drop_mask.push_back(false);
  }

  class PerStepOracle : public Denoiser {
   public:
    explicit PerStepOracle(uint64_t boost_seed) : root_(boost_seed) {}
    Tensor predict(const Tensor& x_t, int, const CameraPose&,
                   const FeatureCache&) const override {
      return sds_step_noise(root_.derive(0xb0057, static_cast<uint64_t>(step_)).seed(),
                            x_t.dim(0), x_t.dim(1), x_t.dim(2));
    }
    FeatureCache extract(const ConditionSet&, const std::vector<CameraPose>&) const override {
      return FeatureCache{};
    }
    void set_step(int s) const { step_ = s; }
    mutable int step_ = 0;
    Rng root_;
  };

  BoostConfig cfg;
  cfg.total_steps = 40;
  cfg.anchor_update_interval = 0;  // keep the oracle aligned per step
  cfg.orientation_weight = 0.0;
  cfg.seed = 21;

  // The boost loop calls predict exactly once per step (SDS only).
  PerStepOracle oracle(cfg.seed);
  struct CountingOracle : Denoiser {
    const PerStepOracle* inner;
    explicit CountingOracle(const PerStepOracle* o) : inner(o) {}
    Tensor predict(const Tensor& x_t, int t, const CameraPose& p,
                   const FeatureCache& c) const override {
      Tensor out = inner->predict(x_t, t, p, c);
      inner->set_step(inner->step_ + 1);
      return out;
    }
    FeatureCache extract(const ConditionSet& c, const std::vector<CameraPose>& p) const override {
      return inner->extract(c, p);
    }
  } counting(&oracle);

  const BoostReport report = boost(field, self_cond, cfg, counting, default_schedule());
  REQUIRE(!report.loss_rows.empty());
  const double initial_total =
      report.loss_rows.front()[1] + report.loss_rows.front()[2] + report.loss_rows.front()[3];
  const double final_total =
      report.loss_rows.back()[1] + report.loss_rows.back()[2] + report.loss_rows.back()[3];
  CHECK(report.loss_rows.front()[1] == 0.0);  // SDS exactly at its fixed point
  CHECK(final_total <= 2.0 * initial_total + 1e-6);
}

TEST_CASE("boost: run directory artifacts") {
  const fs::path dir = fs::temp_directory_path() / "mvb_boost_run";
  fs::remove_all(dir);
  const ConditionSet cond = rig_condition_from_scene(8, 32);
  RadianceField field(small_field_cfg(), 16);
  BoostConfig cfg;
  cfg.total_steps = 12;
  cfg.anchor_update_interval = 6;
  cfg.denoise_steps = 2;
  cfg.orientation_weight = 0.0;
  const ScoreNet net(tiny_net_cfg(), 17);
  const ScoreNetDenoiser denoiser(net);
  boost(field, cond, cfg, denoiser, default_schedule(), dir.string());

  CHECK(fs::exists(dir / "boost_config.json"));
  CHECK(fs::exists(dir / "boost_loss.csv"));
  CHECK(fs::exists(dir / "boost_metrics.json"));
  CHECK(fs::exists(dir / "anchors" / "rev0_view0.png"));
  CHECK(fs::exists(dir / "anchors" / "rev1_view1.png"));
  CHECK(fs::exists(dir / "turntable_before_0.png"));
  CHECK(fs::exists(dir / "turntable_after_7.png"));
  fs::remove_all(dir);
}

TEST_CASE("pseudo_views_mode_a: canonical view untouched, deterministic") {
  const SceneSpec scene = sample_scene(9);
  const ViewRig rig = orthogonal_rig(0.0, 2.0);
  std::vector<ViewImage> gt;
  for (const CameraPose& p : rig.poses) gt.push_back(render_view(scene, p, 32));

  AugmentationPolicy policy;
  policy.corruption_prob = 1.0;
  const DiffusionSchedule sched = default_schedule();
  const ConditionSet a = pseudo_views_mode_a(gt, policy, sched, 5);
  const ConditionSet b = pseudo_views_mode_a(gt, policy, sched, 5);

  CHECK(max_abs_diff(a.views[0].rgb, gt[0].rgb) == 0.0);
  CHECK(a.labels[0] == 1.0);
  CHECK(a.labels[1] == 0.5);
  double corruption = 0.0;
  for (int v = 1; v < 4; ++v) {
    corruption += max_abs_diff(a.views[static_cast<size_t>(v)].rgb,
                               gt[static_cast<size_t>(v)].rgb);
    CHECK(max_abs_diff(a.views[static_cast<size_t>(v)].rgb,
                       b.views[static_cast<size_t>(v)].rgb) == 0.0);
    CHECK(a.views[static_cast<size_t>(v)].pose.rel_azimuth == 90.0 * v);
  }
  CHECK(corruption > 0.0);
}

TEST_CASE("pseudo_views_mode_b: model-sampled rig has the right shape") {
  const SceneSpec scene = sample_scene(10);
  const ViewImage view0 = render_view(scene, pose_from_relative_azimuth(0.0, 0.0, 2.0), 32);
  const ScoreNet net(tiny_net_cfg(), 19);
  const ScoreNetDenoiser denoiser(net);
  const ConditionSet cond = pseudo_views_mode_b(view0, denoiser, default_schedule(), 2, 3);
  REQUIRE(cond.views.size() == 4);
  CHECK(max_abs_diff(cond.views[0].rgb, view0.rgb) == 0.0);
  for (int v = 1; v < 4; ++v) {
    CHECK(cond.views[static_cast<size_t>(v)].rgb.all_finite());
    CHECK(cond.views[static_cast<size_t>(v)].pose.rel_azimuth == 90.0 * v);
  }
}
