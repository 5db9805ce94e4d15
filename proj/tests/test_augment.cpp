#include "augment.hpp"

#include <cmath>
#include <complex>

#include "doctest.h"
#include "errors.hpp"
#include "test_util.hpp"

using namespace mvb;

namespace {

ViewImage random_view(uint64_t seed, int res, double lo = 0.0, double hi = 1.0) {
  ViewImage v;
  Rng rng(seed);
  v.rgb = test::random_tensor({3, res, res}, rng, lo, hi);
  v.pose = pose_from_relative_azimuth(90.0, 0.0, 2.0);
  return v;
}

// Brute-force DFT power of channel 0 above the |k| > N/8 band (Nyquist/4),
// DC excluded. The spectral oracle for the random-scale blur contract.
double high_band_power(const Tensor& rgb) {
  const int n = rgb.dim(1);
  double power = 0.0;
  for (int ky = 0; ky < n; ++ky) {
    for (int kx = 0; kx < n; ++kx) {
      const int fy = std::min(ky, n - ky);
      const int fx = std::min(kx, n - kx);
      if (std::max(fy, fx) <= n / 8) continue;
      std::complex<double> acc(0, 0);
      for (int y = 0; y < n; ++y) {
        for (int x = 0; x < n; ++x) {
          const double phase = -2.0 * M_PI * (static_cast<double>(ky) * y / n +
                                              static_cast<double>(kx) * x / n);
          acc += rgb.at(0, y, x) * std::complex<double>(std::cos(phase), std::sin(phase));
        }
      }
      power += std::norm(acc);
    }
  }
  return power;
}

AugmentationPolicy identity_policy() {
  AugmentationPolicy p;
  p.drop_prob = 0.0;
  p.corruption_prob = 0.0;
  p.jitter_magnitude_deg = 0.0;
  p.grid_distort_strength_frac = 0.0;
  return p;
}

struct CondFixture {
  ConditionSet cond;
  std::vector<CameraPose> poses;

  explicit CondFixture(int res = 16) {
    const ViewRig rig = orthogonal_rig(0.0, 2.0);
    for (int i = 0; i < 4; ++i) {
      ViewImage v = random_view(50 + static_cast<uint64_t>(i), res, 0.2, 0.8);
      v.pose = rig.poses[static_cast<size_t>(i)];
      cond.views.push_back(std::move(v));
      cond.labels.push_back(1.0);
      cond.drop_mask.push_back(false);
      poses.push_back(rig.poses[static_cast<size_t>(i)]);
    }
  }
};

}  // namespace

TEST_CASE("noise_disturb: max_t zero stays near the input") {
  const DiffusionSchedule sched = default_schedule();
  const ViewImage v = random_view(1, 16, 0.3, 0.7);
  const auto [out, t] = noise_disturb(v, 9, sched, 0);
  CHECK(t == 0);
  // alpha_bar[0] ~ 1, so only the sqrt(beta_0)-scale noise remains.
  CHECK(max_abs_diff(out.rgb, v.rgb) < 0.2);
  CHECK(out.rgb.all_finite());
}

TEST_CASE("noise_disturb: deterministic per seed") {
  const DiffusionSchedule sched = default_schedule();
  const ViewImage v = random_view(2, 16);
  const auto [a, ta] = noise_disturb(v, 1234, sched, 300);
  const auto [b, tb] = noise_disturb(v, 1234, sched, 300);
  CHECK(ta == tb);
  CHECK(max_abs_diff(a.rgb, b.rgb) == 0.0);
}

TEST_CASE("noise_disturb: applied_t uniform over {0..300}") {
  const DiffusionSchedule sched = default_schedule();
  const ViewImage v = random_view(3, 16);
  const int n = 10000;
  std::vector<int> counts(301, 0);
  for (int s = 0; s < n; ++s) {
    const auto [out, t] = noise_disturb(v, static_cast<uint64_t>(s), sched, 300);
    counts[static_cast<size_t>(t)]++;
  }
  const double expected = static_cast<double>(n) / 301.0;
  double stat = 0.0;
  for (int c : counts) {
    const double d = c - expected;
    stat += d * d / expected;
  }
  // 99th percentile of chi-squared with 300 degrees of freedom.
  CHECK(stat < 359.9064259503349);
}

TEST_CASE("random_scale: factor one is the identity") {
  const ViewImage v = random_view(4, 16);
  const ViewImage out = random_scale(v, 7, {1});
  CHECK(max_abs_diff(out.rgb, v.rgb) == 0.0);
}

TEST_CASE("random_scale: constant images are invariant") {
  ViewImage v = random_view(5, 16);
  v.rgb.fill(0.42);
  for (uint64_t seed : {0ull, 1ull, 2ull}) {
    const ViewImage out = random_scale(v, seed, {2, 4});
    CHECK(max_abs_diff(out.rgb, v.rgb) < 1e-12);
  }
}

TEST_CASE("random_scale: rejects non-dividing factors") {
  const ViewImage v = random_view(6, 16);
  CHECK_THROWS_AS(random_scale(v, 0, {5}), InvalidArgument);
}

TEST_CASE("random_scale: factor 4 strips checkerboard high frequencies") {
  ViewImage v;
  v.rgb = Tensor({3, 32, 32});
  for (int y = 0; y < 32; ++y) {
    for (int x = 0; x < 32; ++x) {
      const double val = ((x + y) & 1) ? 1.0 : 0.0;
      for (int c = 0; c < 3; ++c) v.rgb.at(c, y, x) = val;
    }
  }
  const double before = high_band_power(v.rgb);
  const ViewImage out = random_scale(v, 11, {4});
  const double after = high_band_power(out.rgb);
  CHECK(before > 0.0);
  CHECK(after < 0.1 * before);
}

TEST_CASE("grid_distort: zero strength is bit-identical") {
  const ViewImage v = random_view(8, 16);
  const ViewImage out = grid_distort(v, 3, 0.0);
  CHECK(max_abs_diff(out.rgb, v.rgb) == 0.0);
}

TEST_CASE("grid_distort: constant images are invariant") {
  ViewImage v = random_view(9, 16);
  v.rgb.fill(0.37);
  const ViewImage out = grid_distort(v, 5, 3.0);
  CHECK(max_abs_diff(out.rgb, v.rgb) < 1e-12);
}

TEST_CASE("grid_distort: corner displacement bounded by the strength") {
  // Bright dots on black; track each dot's brightest pixel after warping.
  const int res = 32;
  ViewImage v;
  v.rgb = Tensor({3, res, res});
  const std::vector<std::pair<int, int>> dots = {{8, 8},  {8, 16},  {8, 24},  {16, 8}, {16, 24},
                                                 {24, 8}, {24, 16}, {24, 24}, {16, 16}};
  for (auto [y, x] : dots) {
    for (int c = 0; c < 3; ++c) v.rgb.at(c, y, x) = 1.0;
  }

  double total_disp = 0.0;
  int found = 0;
  for (uint64_t seed : {1ull, 2ull, 3ull}) {
    const ViewImage out = grid_distort(v, seed, 2.0);
    for (auto [y, x] : dots) {
      double best = -1.0;
      int by = y, bx = x;
      for (int yy = y - 4; yy <= y + 4; ++yy) {
        for (int xx = x - 4; xx <= x + 4; ++xx) {
          if (out.rgb.at(0, yy, xx) > best) {
            best = out.rgb.at(0, yy, xx);
            by = yy;
            bx = xx;
          }
        }
      }
      if (best < 0.05) continue;  // dot smeared below detection
      total_disp += std::hypot(by - y, bx - x);
      ++found;
    }
  }
  REQUIRE(found > 10);
  const double mean_disp = total_disp / found;
  CHECK(mean_disp > 0.0);
  CHECK(mean_disp <= 2.0 + 1.0);  // strength plus detection quantization
}

TEST_CASE("apply_policy: identity policy changes nothing") {
  const DiffusionSchedule sched = default_schedule();
  CondFixture fx;
  const auto [out, poses] = apply_policy(fx.cond, fx.poses, identity_policy(), sched, 77);
  for (size_t v = 0; v < 4; ++v) {
    CHECK(max_abs_diff(out.views[v].rgb, fx.cond.views[v].rgb) == 0.0);
    CHECK(out.labels[v] == 1.0);
    CHECK_FALSE(out.drop_mask[v]);
    CHECK(poses[v].rel_azimuth == fx.poses[v].rel_azimuth);
    CHECK(poses[v].elevation == fx.poses[v].elevation);
  }
}

TEST_CASE("apply_policy: deterministic per seed") {
  const DiffusionSchedule sched = default_schedule();
  CondFixture fx;
  AugmentationPolicy policy;
  const auto [a, pa] = apply_policy(fx.cond, fx.poses, policy, sched, 5);
  const auto [b, pb] = apply_policy(fx.cond, fx.poses, policy, sched, 5);
  for (size_t v = 0; v < 4; ++v) {
    CHECK(max_abs_diff(a.views[v].rgb, b.views[v].rgb) == 0.0);
    CHECK(a.labels[v] == b.labels[v]);
    CHECK(a.drop_mask[v] == b.drop_mask[v]);
    CHECK(pa[v].rel_azimuth == pb[v].rel_azimuth);
  }
}

TEST_CASE("apply_policy: canonical view exempt from every draw") {
  const DiffusionSchedule sched = default_schedule();
  CondFixture fx;
  AugmentationPolicy policy;
  policy.drop_prob = 0.9;
  for (uint64_t seed = 0; seed < 50; ++seed) {
    const auto [out, poses] = apply_policy(fx.cond, fx.poses, policy, sched, seed);
    CHECK(max_abs_diff(out.views[0].rgb, fx.cond.views[0].rgb) == 0.0);
    CHECK(out.labels[0] == 1.0);
    CHECK_FALSE(out.drop_mask[0]);
    CHECK(poses[0].rel_azimuth == 0.0);
    CHECK(out.n_active() >= 1);
  }
}

TEST_CASE("apply_policy: drop frequency tracks drop_prob") {
  const DiffusionSchedule sched = default_schedule();
  CondFixture fx(16);
  AugmentationPolicy policy;
  policy.corruption_prob = 0.0;  // keep the sweep cheap
  policy.jitter_magnitude_deg = 0.0;
  const int n = 10000;
  int dropped = 0;
  for (int s = 0; s < n; ++s) {
    const auto [out, poses] = apply_policy(fx.cond, fx.poses, policy, sched, static_cast<uint64_t>(s));
    if (out.drop_mask[1]) ++dropped;
  }
  CHECK(std::abs(static_cast<double>(dropped) / n - policy.drop_prob) < 0.02);
}

TEST_CASE("apply_policy: value range and shape preserved") {
  const DiffusionSchedule sched = default_schedule();
  CondFixture fx;
  AugmentationPolicy policy;
  policy.corruption_prob = 1.0;
  for (uint64_t seed = 0; seed < 20; ++seed) {
    const auto [out, poses] = apply_policy(fx.cond, fx.poses, policy, sched, seed);
    for (size_t v = 0; v < 4; ++v) {
      CHECK(out.views[v].rgb.shape() == fx.cond.views[v].rgb.shape());
      double lo = 1e9, hi = -1e9;
      for (int64_t i = 0; i < out.views[v].rgb.size(); ++i) {
        lo = std::min(lo, out.views[v].rgb[i]);
        hi = std::max(hi, out.views[v].rgb[i]);
      }
      CHECK(lo >= 0.0);
      CHECK(hi <= 1.0);
    }
  }
}

TEST_CASE("label policy: formula and monotonicity") {
  AugmentationPolicy policy;
  CHECK(policy.label_for(0, false) == 1.0);
  CHECK(policy.label_for(300, false) == doctest::Approx(policy.label_floor));
  CHECK(policy.label_for(150, false) == doctest::Approx(0.5));
  CHECK(policy.label_for(150, true) == doctest::Approx(0.25));
  CHECK(policy.label_for(300, true) == doctest::Approx(policy.label_floor));
  double prev = 2.0;
  for (int t = 0; t <= 300; t += 10) {
    const double l = policy.label_for(t, false);
    CHECK(l <= prev);
    CHECK(policy.label_for(t, true) <= l);
    prev = l;
  }
}
