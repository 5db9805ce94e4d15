#include "scene.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>

#include "doctest.h"
#include "errors.hpp"
#include "image_io.hpp"
#include "rng.hpp"
#include "test_util.hpp"

using namespace mvb;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const std::string& tag) {
  const fs::path p = fs::temp_directory_path() / ("mvb_test_" + tag);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

bool prim_sizes_ok(const Primitive& p) {
  switch (p.shape) {
    case PrimShape::kSphere: return p.size.x() > 0.05;
    case PrimShape::kBox: return p.size.minCoeff() > 0.05;
    case PrimShape::kTorus: return p.size.x() > 0.05 && p.size.y() > 0.05;
    case PrimShape::kCapsule: return p.size.x() > 0.05 && p.size.y() > 0.05;
  }
  return false;
}

}  // namespace

TEST_CASE("sample_scene: deterministic in the seed") {
  const SceneSpec a = sample_scene(0);
  const SceneSpec b = sample_scene(0);
  CHECK(scene_signature(a) == scene_signature(b));
  REQUIRE(a.primitives.size() == b.primitives.size());
  for (size_t i = 0; i < a.primitives.size(); ++i) {
    CHECK((a.primitives[i].center - b.primitives[i].center).norm() == 0.0);
    CHECK((a.primitives[i].orientation - b.primitives[i].orientation).cwiseAbs().maxCoeff() == 0.0);
  }
}

TEST_CASE("sample_scene: invariants hold across 1000 seeds") {
  for (uint64_t seed = 0; seed < 1000; ++seed) {
    const SceneSpec scene = sample_scene(seed);
    CHECK(scene.primitives.size() >= 1);
    CHECK(scene.primitives.size() <= 4);
    for (const Primitive& p : scene.primitives) {
      CHECK(p.center.norm() + p.bounding_radius() <= 1.0 + 1e-12);
      CHECK(prim_sizes_ok(p));
      const Eigen::Matrix3d gram = p.orientation.transpose() * p.orientation;
      CHECK((gram - Eigen::Matrix3d::Identity()).cwiseAbs().maxCoeff() < 1e-12);
    }
  }
}

TEST_CASE("sample_scene: no signature collisions across 1000 seeds") {
  std::set<uint64_t> sigs;
  for (uint64_t seed = 0; seed < 1000; ++seed) sigs.insert(scene_signature(sample_scene(seed)));
  CHECK(sigs.size() == 1000);
}

TEST_CASE("render_view: deterministic and serial-equivalent") {
  const SceneSpec scene = sample_scene(3);
  const CameraPose pose = pose_from_relative_azimuth(40.0, 10.0, 2.0);
  const ViewImage a = render_view(scene, pose, 32);
  const ViewImage b = render_view(scene, pose, 32);
  CHECK(max_abs_diff(a.rgb, b.rgb) == 0.0);
  const ViewImage c = render_view_serial(scene, pose, 32);
  CHECK(max_abs_diff(a.rgb, c.rgb) == 0.0);
  CHECK(max_abs_diff(*a.mask, *c.mask) == 0.0);
}

TEST_CASE("render_view: background pixels are exactly white where mask is zero") {
  for (uint64_t seed : {1ull, 5ull, 9ull}) {
    const SceneSpec scene = sample_scene(seed);
    const ViewImage img = render_view(scene, pose_from_relative_azimuth(200.0, -10.0, 2.0), 32);
    int bg = 0;
    for (int y = 0; y < 32; ++y) {
      for (int x = 0; x < 32; ++x) {
        if (img.mask->at(y, x) == 0.0) {
          ++bg;
          for (int ch = 0; ch < 3; ++ch) CHECK(img.rgb.at(ch, y, x) == 1.0);
        }
      }
    }
    CHECK(bg > 0);
  }
}

TEST_CASE("render_view: rejects unsupported resolutions") {
  const SceneSpec scene = sample_scene(0);
  const CameraPose pose = pose_from_relative_azimuth(0.0, 0.0, 2.0);
  CHECK_THROWS_AS(render_view(scene, pose, 16), InvalidArgument);
  CHECK_THROWS_AS(render_view(scene, pose, 128), InvalidArgument);
}

TEST_CASE("render_view: sphere mask is a disc matching the pinhole projection") {
  // Analytic oracle: a sphere of radius rho at distance d covers pixels within
  // (N/2) * tan(asin(rho/d)) / tan(fov/2) of the image center.
  SceneSpec scene;
  scene.seed = 0;
  Primitive p;
  p.shape = PrimShape::kSphere;
  p.center = Eigen::Vector3d::Zero();
  p.size = Eigen::Vector3d(0.4, 0, 0);
  scene.primitives.push_back(p);

  for (int res : {32, 64}) {
    const ViewImage img = render_view(scene, pose_from_relative_azimuth(0.0, 0.0, 2.0), res);
    const double rho_pred = (res / 2.0) * std::tan(std::asin(0.4 / 2.0)) /
                            std::tan(kVerticalFovDeg * M_PI / 360.0);
    double rho_max = 0.0;
    int count = 0;
    const double c = (res - 1) / 2.0;
    for (int y = 0; y < res; ++y) {
      for (int x = 0; x < res; ++x) {
        if (img.mask->at(y, x) > 0.0) {
          ++count;
          rho_max = std::max(rho_max, std::hypot(y - c, x - c));
        }
      }
    }
    CHECK(std::abs(rho_max - rho_pred) < 1.0);
    CHECK(std::abs(count - M_PI * rho_pred * rho_pred) < 4.0 * rho_pred);
  }
}

TEST_CASE("render_view: full turn gives the identical image") {
  const SceneSpec scene = sample_scene(12);
  const ViewImage a = render_view(scene, pose_from_relative_azimuth(45.5, 5.0, 2.0), 32);
  const ViewImage b = render_view(scene, pose_from_relative_azimuth(45.5 + 360.0, 5.0, 2.0), 32);
  CHECK(max_abs_diff(a.rgb, b.rgb) == 0.0);
}

TEST_CASE("render_eval_rig: 16 uniformly spaced views, canonical first") {
  const SceneSpec scene = sample_scene(2);
  const auto views = render_eval_rig(scene, 32);
  REQUIRE(views.size() == 16);
  CHECK(views[0].pose.rel_azimuth == 0.0);
  for (size_t i = 0; i < 16; ++i) {
    CHECK(views[i].pose.rel_azimuth == doctest::Approx(22.5 * i));
    CHECK(views[i].pose.elevation == 0.0);
    const Eigen::Matrix3d gram = views[i].pose.rotation.transpose() * views[i].pose.rotation;
    CHECK((gram - Eigen::Matrix3d::Identity()).cwiseAbs().maxCoeff() < 1e-6);
  }
  // Exact 22.5 spacing between consecutive views.
  for (size_t i = 1; i < 16; ++i) {
    CHECK(views[i].pose.rel_azimuth - views[i - 1].pose.rel_azimuth == 22.5);
  }
}

TEST_CASE("png round trip stays within quantization error") {
  const fs::path dir = temp_dir("png");
  Rng rng(8);
  const Tensor img = test::random_tensor({3, 32, 32}, rng, 0.0, 1.0);
  write_png((dir / "x.png").string(), img);
  const Tensor back = read_png((dir / "x.png").string());
  CHECK(max_abs_diff(img, back) <= 0.5 / 255.0 + 1e-12);
  fs::remove_all(dir);
}

TEST_CASE("build_dataset: counting contract and determinism") {
  const fs::path dir1 = temp_dir("ds1");
  const fs::path dir2 = temp_dir("ds2");

  const DatasetManifest m = build_dataset(2, 1, 1, 32, dir1.string());
  CHECK(m.scenes.size() == 4);
  for (const SceneEntry& s : m.scenes) CHECK(s.views.size() == 12);
  CHECK(m.split("train").size() == 2);
  CHECK(m.split("val").size() == 1);
  CHECK(m.split("test").size() == 1);

  // Disjoint seeds between splits.
  std::set<uint64_t> train_seeds, test_seeds;
  for (const SceneEntry* s : m.split("train")) train_seeds.insert(s->seed);
  for (const SceneEntry* s : m.split("test")) test_seeds.insert(s->seed);
  for (uint64_t s : test_seeds) CHECK(train_seeds.count(s) == 0);

  build_dataset(2, 1, 1, 32, dir2.string());
  std::ifstream f1(dir1 / "manifest.json"), f2(dir2 / "manifest.json");
  const std::string j1((std::istreambuf_iterator<char>(f1)), std::istreambuf_iterator<char>());
  const std::string j2((std::istreambuf_iterator<char>(f2)), std::istreambuf_iterator<char>());
  CHECK(j1 == j2);
  CHECK(!j1.empty());

  // Round trip through the loader; image files exist and match resolution.
  const DatasetManifest loaded = load_manifest((dir1 / "manifest.json").string());
  CHECK(loaded.scenes.size() == 4);
  CHECK(loaded.resolution == 32);
  const ViewImage v = load_view(loaded, loaded.scenes[0], 0);
  CHECK(v.height() == 32);
  CHECK(v.pose.rel_azimuth == 0.0);

  // Rig poses are the orthogonal rig.
  for (const SceneEntry& s : loaded.scenes) {
    CHECK(s.views[0].azimuth == 0.0);
    CHECK(s.views[1].azimuth == 90.0);
    CHECK(s.views[2].azimuth == 180.0);
    CHECK(s.views[3].azimuth == 270.0);
  }

  fs::remove_all(dir1);
  fs::remove_all(dir2);
}

TEST_CASE("load_manifest: missing image reported") {
  const fs::path dir = temp_dir("ds3");
  build_dataset(1, 0, 0, 32, dir.string());
  fs::remove(dir / "train" / "0" / "3.png");
  CHECK_THROWS_AS(load_manifest((dir / "manifest.json").string()), IoError);
  fs::remove_all(dir);
}
