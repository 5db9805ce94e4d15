#pragma once

#include <memory>
#include <string>

#include "augment.hpp"
#include "field.hpp"
#include "schedule.hpp"
#include "score_net.hpp"

namespace mvb {

// Noise-prediction backend for refinement and view sampling. The score net
// is the production implementation; tests inject analytic oracles.
class Denoiser {
 public:
  virtual ~Denoiser() = default;
  virtual Tensor predict(const Tensor& x_t, int t, const CameraPose& pose,
                         const FeatureCache& cache) const = 0;
  virtual FeatureCache extract(const ConditionSet& cond,
                               const std::vector<CameraPose>& poses) const = 0;
};

// Wraps a trained net; guidance_scale != 1 blends with the null-condition
// branch (classifier-free guidance).
class ScoreNetDenoiser : public Denoiser {
 public:
  explicit ScoreNetDenoiser(const ScoreNet& net, double guidance_scale = 1.0)
      : net_(&net), guidance_(guidance_scale) {}
  Tensor predict(const Tensor& x_t, int t, const CameraPose& pose,
                 const FeatureCache& cache) const override;
  FeatureCache extract(const ConditionSet& cond,
                       const std::vector<CameraPose>& poses) const override;

 private:
  const ScoreNet* net_;
  double guidance_;
};

struct BoostConfig {
  double t_lo = 0.02, t_hi = 0.5;  // SDS band, fraction of the horizon
  int total_steps = 2500;
  int anchor_update_interval = 500;
  double label_canonical = 1.0;
  double label_others = 0.5;
  double sds_weight = 1.0;
  double anchor_mse_weight = 1.0;
  double first_view_l1_weight = 10.0;
  double orientation_weight = 0.1;
  int denoise_steps = 10;  // anchor-refresh trajectory length
  double field_lr = 5e-3;
  int render_samples = 32;
  int anchor_rays = 256;        // rays per anchor/first-view loss term
  double sds_elevation_band = 15.0;  // around the rig elevation
  uint64_t seed = 0;

  void validate() const;
};

// The four pseudo views at the rig poses; anchor 0 is the canonical input
// and is never refreshed.
struct AnchorSet {
  std::vector<ViewImage> anchors;
  std::vector<int> revision;
};

struct SdsStepResult {
  bool ok = false;
  int t = 0;
  double residual = 0.0;     // mean squared (eps_hat - eps), the loss proxy
  double orientation = 0.0;  // orientation regularizer value
};

// The deterministic noise streams used by sds_step and refresh_anchor
// (exposed so oracle tests can reproduce the exact eps of a step).
Tensor sds_step_noise(uint64_t step_seed, int c, int h, int w);
Tensor refresh_anchor_noise(uint64_t seed, int c, int h, int w);
CameraPose sds_step_pose(uint64_t step_seed, const BoostConfig& cfg, double rig_elevation,
                         double rig_radius);

// One SDS contribution: render at a random rig-adjacent pose, noise into the
// configured band, and inject sds_weight * (1-alpha_bar[t]) * (eps_hat-eps)
// / n_pixels as the render gradient. Accumulates into the field's grads.
SdsStepResult sds_step(RadianceField& field, const Denoiser& denoiser, const FeatureCache& cache,
                       const BoostConfig& cfg, const DiffusionSchedule& sched,
                       double rig_elevation, double rig_radius, uint64_t step_seed);

// Renders anchor idx, perturbs to the middle of the SDS band, and runs the
// multi-step denoiser conditioned with view idx dropped (leave-one-out).
ViewImage refresh_anchor(int idx, const RadianceField& field, const Denoiser& denoiser,
                         const ConditionSet& cond, const std::vector<CameraPose>& poses,
                         const DiffusionSchedule& sched, const BoostConfig& cfg,
                         uint64_t seed);

struct BoostReport {
  int steps = 0;
  int skipped_sds_steps = 0;
  std::vector<std::array<double, 5>> loss_rows;  // step, sds, anchor, first_l1, orientation
  AnchorSet final_anchors;
  double saturation_before = 0.0, saturation_after = 0.0;
};

// The full refinement loop. pseudo_views must be the complete four-view rig
// (view 0 = the canonical input image). When out_dir is nonempty the run
// writes config snapshot, loss CSV, per-revision anchor images and
// before/after turntable renders there.
BoostReport boost(RadianceField& field, const ConditionSet& pseudo_views, const BoostConfig& cfg,
                  const Denoiser& denoiser, const DiffusionSchedule& sched,
                  const std::string& out_dir = "");

// Mode-A pseudo views: the ground-truth rig content-corrupted by the
// augmentation policy at a fixed seed (no drop, poses stay the rig's).
ConditionSet pseudo_views_mode_a(const std::vector<ViewImage>& gt_rig,
                                 const AugmentationPolicy& policy,
                                 const DiffusionSchedule& sched, uint64_t seed,
                                 double label_others = 0.5);

// Mode-B pseudo views: views 1..3 sampled from the model itself conditioned
// on view 0 only.
ConditionSet pseudo_views_mode_b(const ViewImage& view0, const Denoiser& denoiser,
                                 const DiffusionSchedule& sched, int sampler_steps,
                                 uint64_t seed, double label_others = 0.5);

}  // namespace mvb
