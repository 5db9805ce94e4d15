#include "augment.hpp"

#include <cmath>

#include "errors.hpp"
#include "kernels.hpp"

namespace mvb {

std::pair<ViewImage, int> noise_disturb(const ViewImage& view, uint64_t seed,
                                        const DiffusionSchedule& sched, int max_t) {
  check_arg(max_t >= 0 && max_t < sched.horizon, "noise_disturb: max_t outside schedule");
  Rng rng(seed);
  const int t = static_cast<int>(rng.uniform_int(max_t + 1));
  Tensor eps(view.rgb.shape());
  for (int64_t i = 0; i < eps.size(); ++i) eps[i] = rng.normal();
  ViewImage out = view;
  out.rgb = forward_diffuse(view.rgb, t, eps, sched);
  out.rgb.clamp_(0.0, 1.0);
  return {std::move(out), t};
}

ViewImage random_scale(const ViewImage& view, uint64_t seed, const std::vector<int>& factors) {
  check_arg(!factors.empty(), "random_scale: empty factor set");
  Rng rng(seed);
  const int f = factors[static_cast<size_t>(rng.uniform_int(static_cast<int64_t>(factors.size())))];
  const int h = view.height(), w = view.width();
  check_arg(f >= 1 && h % f == 0 && w % f == 0,
            "random_scale: factor " + std::to_string(f) + " does not divide the image size");
  if (f == 1) return view;
  Tensor small({3, h / f, w / f});
  kernels::resize_bilinear(view.rgb.data(), 3, h, w, h / f, w / f, small.data());
  ViewImage out = view;
  out.rgb = Tensor({3, h, w});
  kernels::resize_bilinear(small.data(), 3, h / f, w / f, h, w, out.rgb.data());
  out.rgb.clamp_(0.0, 1.0);
  return out;
}

namespace {

constexpr int kGrid = 5;

inline double sample_clamped(const double* plane, int h, int w, double fy, double fx) {
  fy = std::clamp(fy, 0.0, static_cast<double>(h - 1));
  fx = std::clamp(fx, 0.0, static_cast<double>(w - 1));
  const int y0 = static_cast<int>(fy);
  const int x0 = static_cast<int>(fx);
  const int y1 = std::min(y0 + 1, h - 1);
  const int x1 = std::min(x0 + 1, w - 1);
  const double wy = fy - y0, wx = fx - x0;
  const double a = plane[y0 * w + x0] * (1 - wx) + plane[y0 * w + x1] * wx;
  const double b = plane[y1 * w + x0] * (1 - wx) + plane[y1 * w + x1] * wx;
  return a * (1 - wy) + b * wy;
}

}  // namespace

ViewImage grid_distort(const ViewImage& view, uint64_t seed, double strength_px) {
  check_arg(strength_px >= 0.0, "grid_distort: negative strength");
  const int h = view.height(), w = view.width();
  Rng rng(seed);
  double dx[kGrid][kGrid], dy[kGrid][kGrid];
  for (int i = 0; i < kGrid; ++i) {
    for (int j = 0; j < kGrid; ++j) {
      dx[i][j] = rng.uniform(-strength_px, strength_px);
      dy[i][j] = rng.uniform(-strength_px, strength_px);
    }
  }

  ViewImage out = view;
  out.rgb = Tensor({3, h, w});
  const double cell_y = static_cast<double>(h - 1) / (kGrid - 1);
  const double cell_x = static_cast<double>(w - 1) / (kGrid - 1);
  for (int y = 0; y < h; ++y) {
    const double gy = y / cell_y;
    const int i0 = std::min(static_cast<int>(gy), kGrid - 2);
    const double ty = gy - i0;
    for (int x = 0; x < w; ++x) {
      const double gx = x / cell_x;
      const int j0 = std::min(static_cast<int>(gx), kGrid - 2);
      const double tx = gx - j0;
      const double off_x = (dx[i0][j0] * (1 - tx) + dx[i0][j0 + 1] * tx) * (1 - ty) +
                           (dx[i0 + 1][j0] * (1 - tx) + dx[i0 + 1][j0 + 1] * tx) * ty;
      const double off_y = (dy[i0][j0] * (1 - tx) + dy[i0][j0 + 1] * tx) * (1 - ty) +
                           (dy[i0 + 1][j0] * (1 - tx) + dy[i0 + 1][j0 + 1] * tx) * ty;
      for (int c = 0; c < 3; ++c) {
        out.rgb.at(c, y, x) = sample_clamped(view.rgb.data() + static_cast<size_t>(c) * h * w, h,
                                             w, y + off_y, x + off_x);
      }
    }
  }
  return out;
}

std::pair<ConditionSet, std::vector<CameraPose>> apply_policy(
    const ConditionSet& cond, const std::vector<CameraPose>& poses,
    const AugmentationPolicy& policy, const DiffusionSchedule& sched, uint64_t seed) {
  cond.validate();
  check_arg(poses.size() == cond.views.size(), "apply_policy: pose/view count mismatch");

  ConditionSet out = cond;
  std::vector<CameraPose> out_poses = poses;
  out.drop_mask.assign(cond.views.size(), false);
  out.labels[0] = 1.0;

  const Rng root(seed);
  for (size_t v = 1; v < cond.views.size(); ++v) {
    Rng rng = root.derive(0xa06, static_cast<uint64_t>(v));
    if (rng.bernoulli(policy.drop_prob)) {
      out.drop_mask[v] = true;
      // Dropped views contribute nothing; label kept at its clean value.
      out.labels[v] = 1.0;
      continue;
    }

    bool do_disturb, do_scale, do_distort;
    if (policy.compose) {
      do_disturb = rng.bernoulli(policy.corruption_prob);
      do_scale = rng.bernoulli(policy.corruption_prob);
      do_distort = rng.bernoulli(policy.corruption_prob);
    } else {
      const int pick = static_cast<int>(rng.uniform_int(3));
      do_disturb = pick == 0;
      do_scale = pick == 1;
      do_distort = pick == 2;
    }

    int applied_t = 0;
    if (do_disturb) {
      auto [corrupted, t] =
          noise_disturb(out.views[v], rng.next_u64(), sched, policy.noise_disturb_max_t);
      out.views[v] = std::move(corrupted);
      applied_t = t;
    }
    if (do_scale) {
      out.views[v] = random_scale(out.views[v], rng.next_u64(), policy.scale_factors);
    }
    if (do_distort) {
      out.views[v] = grid_distort(out.views[v], rng.next_u64(),
                                  policy.grid_strength_px(out.views[v].width()));
    }
    out_poses[v] = jitter_pose(out_poses[v], policy.jitter_magnitude_deg, rng.next_u64());
    out.views[v].pose = out_poses[v];
    out.labels[v] = policy.label_for(applied_t, do_scale || do_distort);
  }
  return {std::move(out), std::move(out_poses)};
}

}  // namespace mvb
