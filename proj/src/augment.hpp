#pragma once

#include <utility>
#include <vector>

#include "schedule.hpp"
#include "score_net.hpp"

namespace mvb {

// Training-time corruption suite for the non-canonical condition views, plus
// the control-label policy tying label value to corruption magnitude.
struct AugmentationPolicy {
  int noise_disturb_max_t = 300;
  std::vector<int> scale_factors = {2, 4};
  double drop_prob = 0.3;
  double grid_distort_strength_frac = 0.08;  // of image width, in pixels
  double jitter_magnitude_deg = 5.0;
  double corruption_prob = 0.5;  // per-corruption application probability
  bool compose = true;           // compose all corruptions vs pick one per view
  double label_floor = 0.1;

  double grid_strength_px(int width) const { return grid_distort_strength_frac * width; }
  // label = 1 - t/max_t, halved when blur corruptions were applied.
  double label_for(int applied_t, bool blurred) const {
    double l = 1.0 - static_cast<double>(applied_t) / noise_disturb_max_t;
    if (blurred) l *= 0.5;
    return std::max(label_floor, l);
  }
};

// Forward-diffuses the view to t ~ Uniform{0..max_t}; returns the corrupted
// view and the applied t for label computation. Output clamped to [0,1].
std::pair<ViewImage, int> noise_disturb(const ViewImage& view, uint64_t seed,
                                        const DiffusionSchedule& sched, int max_t);

// Bilinear downsample by a factor sampled from the set, then upsample back.
ViewImage random_scale(const ViewImage& view, uint64_t seed, const std::vector<int>& factors);

// Warps by a displacement field interpolated from a 5x5 control grid with
// uniform offsets of at most `strength_px` per axis; borders clamped.
ViewImage grid_distort(const ViewImage& view, uint64_t seed, double strength_px);

// Applies the full policy to views 1..n (view 0 exempt): random drop, the
// three content corruptions, pose jitter, and the label map. Target views
// are never passed through here.
std::pair<ConditionSet, std::vector<CameraPose>> apply_policy(
    const ConditionSet& cond, const std::vector<CameraPose>& poses,
    const AugmentationPolicy& policy, const DiffusionSchedule& sched, uint64_t seed);

}  // namespace mvb
