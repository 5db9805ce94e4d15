#include "camera.hpp"

#include <cmath>

#include "errors.hpp"

namespace mvb {

CameraPose pose_from_relative_azimuth(double rel_azimuth_deg, double elevation_deg,
                                      double radius) {
  check_arg(std::isfinite(rel_azimuth_deg) && std::isfinite(elevation_deg) &&
                std::isfinite(radius),
            "pose_from_relative_azimuth: non-finite input");
  check_arg(radius > 0.0, "pose_from_relative_azimuth: radius must be > 0");
  check_arg(std::abs(elevation_deg) <= kMaxElevationDeg + 1e-12,
            "pose_from_relative_azimuth: elevation outside [-30,30]");

  CameraPose p;
  p.rel_azimuth = normalize_azimuth(rel_azimuth_deg);
  p.elevation = elevation_deg;
  p.radius = radius;

  const double az = p.rel_azimuth * M_PI / 180.0;
  const double el = elevation_deg * M_PI / 180.0;
  const Eigen::Vector3d center(radius * std::cos(el) * std::cos(az),
                               radius * std::cos(el) * std::sin(az),
                               radius * std::sin(el));

  const Eigen::Vector3d fwd = (-center).normalized();
  const Eigen::Vector3d world_up(0.0, 0.0, 1.0);
  const Eigen::Vector3d right = fwd.cross(world_up).normalized();
  const Eigen::Vector3d down = fwd.cross(right).normalized();

  p.rotation.row(0) = right.transpose();
  p.rotation.row(1) = down.transpose();
  p.rotation.row(2) = fwd.transpose();
  p.translation = -p.rotation * center;
  return p;
}

ViewRig ring_rig(int n_views, double elevation_deg, double radius) {
  check_arg(n_views >= 1, "ring_rig: need at least one view");
  ViewRig rig;
  rig.canonical_index = 0;
  rig.poses.reserve(static_cast<size_t>(n_views));
  for (int i = 0; i < n_views; ++i) {
    rig.poses.push_back(
        pose_from_relative_azimuth(360.0 * i / n_views, elevation_deg, radius));
  }
  return rig;
}

ViewRig orthogonal_rig(double elevation_deg, double radius) {
  return ring_rig(4, elevation_deg, radius);
}

CameraPose jitter_pose(const CameraPose& pose, double magnitude_deg, uint64_t seed) {
  check_arg(magnitude_deg >= 0.0, "jitter_pose: magnitude must be >= 0");
  Rng rng(seed);
  const double daz = rng.uniform(-magnitude_deg, magnitude_deg);
  const double del = rng.uniform(-magnitude_deg, magnitude_deg);
  double el = pose.elevation + del;
  el = std::clamp(el, -kMaxElevationDeg, kMaxElevationDeg);
  return pose_from_relative_azimuth(normalize_azimuth(pose.rel_azimuth + daz), el, pose.radius);
}

std::array<double, 12> pose_vector(const CameraPose& pose) {
  std::array<double, 12> v{};
  for (int r = 0; r < 3; ++r) {
    for (int c = 0; c < 3; ++c) v[static_cast<size_t>(r) * 3 + c] = pose.rotation(r, c);
  }
  for (int i = 0; i < 3; ++i) v[9 + static_cast<size_t>(i)] = pose.translation(i);
  return v;
}

}  // namespace mvb
