#pragma once

#include <Eigen/Dense>
#include <string>
#include <vector>

#include "camera.hpp"
#include "image.hpp"
#include "rng.hpp"

namespace mvb {

enum class PrimShape { kSphere, kBox, kTorus, kCapsule };
enum class TextureKind { kSolid, kStripes, kChecker };

struct ProceduralTexture {
  TextureKind kind = TextureKind::kSolid;
  Eigen::Vector3d color_a = Eigen::Vector3d::Ones();
  Eigen::Vector3d color_b = Eigen::Vector3d::Zero();
  double frequency = 4.0;
  int axis = 2;
  double phase = 0.0;
};

// size is shape-specific: sphere (radius,-,-), box half-extents,
// torus (major,minor,-), capsule (radius,half_height,-).
struct Primitive {
  PrimShape shape = PrimShape::kSphere;
  Eigen::Vector3d center = Eigen::Vector3d::Zero();
  Eigen::Vector3d size = Eigen::Vector3d::Ones();
  Eigen::Matrix3d orientation = Eigen::Matrix3d::Identity();
  ProceduralTexture texture;

  double bounding_radius() const;
};

struct SceneSpec {
  uint64_t seed = 0;
  std::vector<Primitive> primitives;  // 1..4, all inside the unit sphere
};

SceneSpec sample_scene(uint64_t seed);

// Stable content signature, used by the seed-collision tests.
uint64_t scene_signature(const SceneSpec& scene);

// Analytic ray-traced render over a white background; deterministic, one
// primary ray per pixel, Lambert shading with a fixed directional light.
// Resolution must be 32 or 64. The returned view carries the coverage mask.
ViewImage render_view(const SceneSpec& scene, const CameraPose& pose, int resolution);
ViewImage render_view_serial(const SceneSpec& scene, const CameraPose& pose, int resolution);

// 16 views, azimuths uniform over [0,360) at elevation 0; view 0 is the
// canonical input view of the evaluation protocol.
std::vector<ViewImage> render_eval_rig(const SceneSpec& scene, int resolution);

struct DatasetConfig {
  int resolution = 32;
  double rig_elevation = 0.0;
  double rig_radius = 2.0;
  // Random target views are drawn with azimuth uniform in [0,360) and
  // elevation uniform in +-target_elevation_max at the rig radius.
  double target_elevation_max = 30.0;
  int n_random_targets = 8;
  int schedule_horizon = 1000;  // recorded for disturb-label bookkeeping
};

struct ViewRecord {
  double azimuth = 0.0;
  double elevation = 0.0;
  double radius = 2.0;
  std::string path;  // relative to the manifest directory
};

struct SceneEntry {
  uint64_t seed = 0;
  std::string split;  // train | val | test
  std::vector<ViewRecord> views;
};

struct DatasetManifest {
  int format_version = 1;
  int resolution = 32;
  int schedule_horizon = 1000;
  DatasetConfig config;
  std::vector<SceneEntry> scenes;
  std::string root;  // directory holding the manifest; not serialized

  std::vector<const SceneEntry*> split(const std::string& name) const;
};

// Renders every scene of every split and writes out_dir/manifest.json plus
// out_dir/{split}/{seed}/{view_idx}.png. Views 0..3 are the orthogonal rig,
// the rest random targets. Scene seeds are seed_base + running index, so
// splits are disjoint by construction.
DatasetManifest build_dataset(int n_train, int n_val, int n_test, int resolution,
                              const std::string& out_dir, uint64_t seed_base = 0,
                              DatasetConfig cfg = {});

std::string manifest_to_json(const DatasetManifest& m);
DatasetManifest load_manifest(const std::string& manifest_path);

CameraPose pose_from_record(const ViewRecord& rec);
ViewImage load_view(const DatasetManifest& m, const SceneEntry& scene, int view_idx);

}  // namespace mvb
