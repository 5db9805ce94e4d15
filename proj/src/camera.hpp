#pragma once

#include <Eigen/Dense>
#include <array>
#include <cmath>
#include <vector>

#include "rng.hpp"

namespace mvb {

// Object-centric camera on a sphere around the origin. Azimuth is measured
// counterclockwise (degrees) around +z from the canonical view's axis (+x),
// elevation above the xy-plane. rotation/translation follow the x_cam =
// R * x_world + T convention with camera axes (+x right, +y down, +z forward)
// and are always a pure function of the three angles.
struct CameraPose {
  double rel_azimuth = 0.0;  // degrees, [0,360)
  double elevation = 0.0;    // degrees, [-30,30]
  double radius = 2.0;       // scene units, > 0
  Eigen::Matrix3d rotation = Eigen::Matrix3d::Identity();
  Eigen::Vector3d translation = Eigen::Vector3d::Zero();

  Eigen::Vector3d center() const { return -rotation.transpose() * translation; }
  // Forward axis expressed in world coordinates; points at the origin.
  Eigen::Vector3d forward() const { return rotation.row(2).transpose(); }
};

struct ViewRig {
  std::vector<CameraPose> poses;
  int canonical_index = 0;
};

inline double normalize_azimuth(double deg) {
  double a = std::fmod(deg, 360.0);
  if (a < 0.0) a += 360.0;
  return a;
}

constexpr double kMaxElevationDeg = 30.0;
constexpr double kVerticalFovDeg = 50.0;  // fixed pinhole intrinsics

CameraPose pose_from_relative_azimuth(double rel_azimuth_deg, double elevation_deg,
                                      double radius);

// n poses with azimuths i*360/n at shared elevation/radius; pose 0 is canonical.
ViewRig ring_rig(int n_views, double elevation_deg, double radius);

// The four-view rig at azimuths {0, 90, 180, 270}.
ViewRig orthogonal_rig(double elevation_deg, double radius);

// Uniform +-magnitude perturbation of azimuth and elevation, deterministic in
// the seed. Elevation is clamped back into the valid range.
CameraPose jitter_pose(const CameraPose& pose, double magnitude_deg, uint64_t seed);

// Flattened extrinsics (9 rotation entries row-major, then translation); the
// input to the pose-embedding MLP.
std::array<double, 12> pose_vector(const CameraPose& pose);

// Pixel-center ray generator for the fixed pinhole intrinsics.
struct PinholeCamera {
  Eigen::Vector3d origin;
  Eigen::Matrix3d cam_to_world;
  double tan_half;
  int res;

  PinholeCamera(const CameraPose& pose, int resolution)
      : origin(pose.center()),
        cam_to_world(pose.rotation.transpose()),
        tan_half(std::tan(kVerticalFovDeg * M_PI / 360.0)),
        res(resolution) {}

  Eigen::Vector3d dir(int ix, int iy) const {
    const double u = ((ix + 0.5) / res * 2.0 - 1.0) * tan_half;
    const double v = ((iy + 0.5) / res * 2.0 - 1.0) * tan_half;
    return (cam_to_world * Eigen::Vector3d(u, v, 1.0)).normalized();
  }
};

}  // namespace mvb
