#include "scene.hpp"

#include <Eigen/Eigenvalues>
#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>

#include "errors.hpp"
#include "image_io.hpp"
#include "json.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace mvb {

namespace {

constexpr double kAmbient = 0.35;
constexpr double kDiffuse = 0.65;
const Eigen::Vector3d kLightDir = Eigen::Vector3d(1.0, -0.6, 1.2).normalized();

Eigen::Vector3d sample_color(Rng& rng) {
  // HSV with capped value so shaded foreground never reaches the white
  // background level; keeps the coverage mask recoverable from 8-bit files.
  const double h = rng.uniform() * 6.0;
  const double s = rng.uniform(0.45, 1.0);
  const double v = rng.uniform(0.35, 0.93);
  const int i = static_cast<int>(h) % 6;
  const double f = h - std::floor(h);
  const double p = v * (1 - s), q = v * (1 - s * f), t = v * (1 - s * (1 - f));
  switch (i) {
    case 0: return {v, t, p};
    case 1: return {q, v, p};
    case 2: return {p, v, t};
    case 3: return {p, q, v};
    case 4: return {t, p, v};
    default: return {v, p, q};
  }
}

Eigen::Matrix3d sample_rotation(Rng& rng) {
  Eigen::Vector3d a(rng.normal(), rng.normal(), rng.normal());
  Eigen::Vector3d b(rng.normal(), rng.normal(), rng.normal());
  a.normalize();
  b = (b - a.dot(b) * a).normalized();
  Eigen::Matrix3d m;
  m.col(0) = a;
  m.col(1) = b;
  m.col(2) = a.cross(b);
  return m;
}

Eigen::Vector3d texture_color(const ProceduralTexture& tex, const Eigen::Vector3d& p_local) {
  switch (tex.kind) {
    case TextureKind::kSolid:
      return tex.color_a;
    case TextureKind::kStripes: {
      const double t = p_local[tex.axis] * tex.frequency + tex.phase;
      return (t - std::floor(t)) < 0.5 ? tex.color_a : tex.color_b;
    }
    case TextureKind::kChecker: {
      long cells = 0;
      for (int a = 0; a < 3; ++a)
        cells += static_cast<long>(std::floor(p_local[a] * tex.frequency + tex.phase));
      return (cells & 1) == 0 ? tex.color_a : tex.color_b;
    }
  }
  return tex.color_a;
}

struct Hit {
  double t = std::numeric_limits<double>::infinity();
  Eigen::Vector3d normal = Eigen::Vector3d::UnitZ();  // world frame
  Eigen::Vector3d albedo = Eigen::Vector3d::Ones();
};

bool intersect_sphere_local(const Eigen::Vector3d& o, const Eigen::Vector3d& d, double r,
                            double& t_hit) {
  const double b = o.dot(d);
  const double c = o.squaredNorm() - r * r;
  const double disc = b * b - c;
  if (disc < 0.0) return false;
  const double s = std::sqrt(disc);
  double t = -b - s;
  if (t < 1e-9) t = -b + s;
  if (t < 1e-9) return false;
  t_hit = t;
  return true;
}

bool intersect_box_local(const Eigen::Vector3d& o, const Eigen::Vector3d& d,
                         const Eigen::Vector3d& he, double& t_hit, Eigen::Vector3d& n_local) {
  double t0 = -std::numeric_limits<double>::infinity();
  double t1 = std::numeric_limits<double>::infinity();
  int axis0 = -1;
  double sign0 = 1.0;
  for (int a = 0; a < 3; ++a) {
    if (std::abs(d[a]) < 1e-15) {
      if (std::abs(o[a]) > he[a]) return false;
      continue;
    }
    double ta = (-he[a] - o[a]) / d[a];
    double tb = (he[a] - o[a]) / d[a];
    double sgn = -1.0;
    if (ta > tb) {
      std::swap(ta, tb);
      sgn = 1.0;
    }
    if (ta > t0) {
      t0 = ta;
      axis0 = a;
      sign0 = sgn;
    }
    t1 = std::min(t1, tb);
    if (t0 > t1) return false;
  }
  if (t1 < 1e-9 || axis0 < 0) return false;
  if (t0 < 1e-9) return false;  // origin inside; cameras stay outside the scene
  t_hit = t0;
  n_local = Eigen::Vector3d::Zero();
  n_local[axis0] = sign0;
  return true;
}

bool intersect_capsule_local(const Eigen::Vector3d& o, const Eigen::Vector3d& d, double r,
                             double half_h, double& t_hit, Eigen::Vector3d& n_local) {
  double best = std::numeric_limits<double>::infinity();
  // Cylindrical side.
  const double a2 = d.x() * d.x() + d.y() * d.y();
  if (a2 > 1e-15) {
    const double b = (o.x() * d.x() + o.y() * d.y()) / a2;
    const double c = (o.x() * o.x() + o.y() * o.y() - r * r) / a2;
    const double disc = b * b - c;
    if (disc >= 0.0) {
      const double s = std::sqrt(disc);
      for (double t : {-b - s, -b + s}) {
        if (t > 1e-9 && t < best && std::abs(o.z() + t * d.z()) <= half_h) {
          best = t;
          break;
        }
      }
    }
  }
  // Spherical caps.
  for (double zc : {half_h, -half_h}) {
    const Eigen::Vector3d oc = o - Eigen::Vector3d(0, 0, zc);
    double t;
    if (intersect_sphere_local(oc, d, r, t) && t < best) {
      const double z = o.z() + t * d.z();
      if ((zc > 0 && z >= half_h) || (zc < 0 && z <= -half_h)) best = t;
    }
  }
  if (!std::isfinite(best)) return false;
  t_hit = best;
  const Eigen::Vector3d p = o + best * d;
  const double zc = std::clamp(p.z(), -half_h, half_h);
  n_local = (p - Eigen::Vector3d(0, 0, zc)).normalized();
  return true;
}

double torus_implicit(const Eigen::Vector3d& p, double R, double r) {
  const double k = p.squaredNorm() + R * R - r * r;
  return k * k - 4.0 * R * R * (p.x() * p.x() + p.y() * p.y());
}

bool intersect_torus_local(const Eigen::Vector3d& o_in, const Eigen::Vector3d& d, double R,
                           double r, double& t_hit, Eigen::Vector3d& n_local) {
  // Advance the origin to the bounding sphere first; the quartic is far
  // better conditioned with a small |o|.
  double t_off = 0.0;
  Eigen::Vector3d o = o_in;
  {
    double tb;
    const double rb = R + r + 1e-6;
    if (o.norm() > rb) {
      if (!intersect_sphere_local(o, d, rb, tb)) return false;
      t_off = tb;
      o = o_in + tb * d;
    }
  }

  const double B = 2.0 * o.dot(d);
  const double C = o.squaredNorm() + R * R - r * r;
  const double a2 = d.x() * d.x() + d.y() * d.y();
  const double b = o.x() * d.x() + o.y() * d.y();
  const double c = o.x() * o.x() + o.y() * o.y();

  // t^4 + c3 t^3 + c2 t^2 + c1 t + c0 = 0
  const double c3 = 2.0 * B;
  const double c2 = B * B + 2.0 * C - 4.0 * R * R * a2;
  const double c1 = 2.0 * B * C - 8.0 * R * R * b;
  const double c0 = C * C - 4.0 * R * R * c;

  Eigen::Matrix4d companion = Eigen::Matrix4d::Zero();
  companion(0, 3) = -c0;
  companion(1, 3) = -c1;
  companion(2, 3) = -c2;
  companion(3, 3) = -c3;
  companion(1, 0) = companion(2, 1) = companion(3, 2) = 1.0;
  Eigen::EigenSolver<Eigen::Matrix4d> es(companion, false);

  double best = std::numeric_limits<double>::infinity();
  for (int i = 0; i < 4; ++i) {
    const auto root = es.eigenvalues()[i];
    if (std::abs(root.imag()) > 1e-8 * (1.0 + std::abs(root.real()))) continue;
    double t = root.real();
    if (t < 1e-9) continue;
    // Two Newton steps against the quartic tighten the eigenvalue root.
    for (int it = 0; it < 2; ++it) {
      const double f = (((t + c3) * t + c2) * t + c1) * t + c0;
      const double fp = ((4.0 * t + 3.0 * c3) * t + 2.0 * c2) * t + c1;
      if (std::abs(fp) < 1e-30) break;
      t -= f / fp;
    }
    if (t > 1e-9 && t < best) best = t;
  }
  if (!std::isfinite(best)) return false;
  t_hit = best + t_off;
  const Eigen::Vector3d p = o + best * d;
  const double k = p.squaredNorm() + R * R - r * r;
  Eigen::Vector3d grad = 4.0 * k * p - 8.0 * R * R * Eigen::Vector3d(p.x(), p.y(), 0.0);
  n_local = grad.normalized();
  return true;
}

bool intersect_primitive(const Primitive& prim, const Eigen::Vector3d& origin,
                         const Eigen::Vector3d& dir, Hit& hit) {
  const Eigen::Vector3d o = prim.orientation.transpose() * (origin - prim.center);
  const Eigen::Vector3d d = prim.orientation.transpose() * dir;
  double t;
  Eigen::Vector3d n_local;
  bool ok = false;
  switch (prim.shape) {
    case PrimShape::kSphere:
      ok = intersect_sphere_local(o, d, prim.size.x(), t);
      if (ok) n_local = (o + t * d).normalized();
      break;
    case PrimShape::kBox:
      ok = intersect_box_local(o, d, prim.size, t, n_local);
      break;
    case PrimShape::kTorus:
      ok = intersect_torus_local(o, d, prim.size.x(), prim.size.y(), t, n_local);
      break;
    case PrimShape::kCapsule:
      ok = intersect_capsule_local(o, d, prim.size.x(), prim.size.y(), t, n_local);
      break;
  }
  if (!ok || t >= hit.t) return false;
  hit.t = t;
  hit.normal = prim.orientation * n_local;
  hit.albedo = texture_color(prim.texture, o + t * d);
  return true;
}

void shade_pixel(const SceneSpec& scene, const Eigen::Vector3d& origin,
                 const Eigen::Vector3d& dir, double* rgb_out, double* mask_out) {
  Hit hit;
  bool any = false;
  for (const Primitive& prim : scene.primitives) any |= intersect_primitive(prim, origin, dir, hit);
  if (!any) {
    rgb_out[0] = rgb_out[1] = rgb_out[2] = 1.0;
    *mask_out = 0.0;
    return;
  }
  Eigen::Vector3d n = hit.normal;
  if (n.dot(dir) > 0.0) n = -n;
  const double shade = kAmbient + kDiffuse * std::max(0.0, n.dot(kLightDir));
  for (int c = 0; c < 3; ++c) rgb_out[c] = std::clamp(hit.albedo[c] * shade, 0.0, 1.0);
  *mask_out = 1.0;
}

ViewImage render_view_impl(const SceneSpec& scene, const CameraPose& pose, int resolution,
                           bool parallel) {
  check_arg(resolution == 32 || resolution == 64,
            "render_view: unsupported resolution " + std::to_string(resolution));
  ViewImage view;
  view.pose = pose;
  view.rgb = Tensor({3, resolution, resolution});
  view.mask = Tensor({resolution, resolution});
  const PinholeCamera gen(pose, resolution);

  auto row_job = [&](int iy) {
    for (int ix = 0; ix < resolution; ++ix) {
      double rgb[3], m;
      shade_pixel(scene, gen.origin, gen.dir(ix, iy), rgb, &m);
      for (int c = 0; c < 3; ++c) view.rgb.at(c, iy, ix) = rgb[c];
      view.mask->at(iy, ix) = m;
    }
  };
  if (parallel) {
#pragma omp parallel for schedule(static)
    for (int iy = 0; iy < resolution; ++iy) row_job(iy);
  } else {
    for (int iy = 0; iy < resolution; ++iy) row_job(iy);
  }
  return view;
}

}  // namespace

double Primitive::bounding_radius() const {
  switch (shape) {
    case PrimShape::kSphere: return size.x();
    case PrimShape::kBox: return size.norm();
    case PrimShape::kTorus: return size.x() + size.y();
    case PrimShape::kCapsule: return size.x() + size.y();
  }
  return size.norm();
}

SceneSpec sample_scene(uint64_t seed) {
  Rng rng = Rng(seed).derive(0x5ce4e5);
  SceneSpec scene;
  scene.seed = seed;
  const int count = 1 + static_cast<int>(rng.uniform_int(4));
  scene.primitives.reserve(static_cast<size_t>(count));
  for (int i = 0; i < count; ++i) {
    Primitive prim;
    prim.shape = static_cast<PrimShape>(rng.uniform_int(4));
    switch (prim.shape) {
      case PrimShape::kSphere:
        prim.size = Eigen::Vector3d(rng.uniform(0.15, 0.45), 0, 0);
        break;
      case PrimShape::kBox:
        prim.size = Eigen::Vector3d(rng.uniform(0.1, 0.35), rng.uniform(0.1, 0.35),
                                    rng.uniform(0.1, 0.35));
        break;
      case PrimShape::kTorus: {
        const double major = rng.uniform(0.2, 0.4);
        prim.size = Eigen::Vector3d(major, rng.uniform(0.06, std::min(0.15, 0.45 * major)), 0);
        break;
      }
      case PrimShape::kCapsule:
        prim.size = Eigen::Vector3d(rng.uniform(0.08, 0.2), rng.uniform(0.1, 0.35), 0);
        break;
    }
    prim.orientation = sample_rotation(rng);
    const double slack = 1.0 - prim.bounding_radius();
    const double cr = slack * std::cbrt(rng.uniform());
    Eigen::Vector3d dir(rng.normal(), rng.normal(), rng.normal());
    prim.center = cr * dir.normalized();

    prim.texture.kind = static_cast<TextureKind>(rng.uniform_int(3));
    prim.texture.color_a = sample_color(rng);
    prim.texture.color_b = sample_color(rng);
    prim.texture.frequency = rng.uniform(2.0, 7.0);
    prim.texture.axis = static_cast<int>(rng.uniform_int(3));
    prim.texture.phase = rng.uniform();
    scene.primitives.push_back(prim);
  }
  return scene;
}

uint64_t scene_signature(const SceneSpec& scene) {
  uint64_t h = fnv1a(&scene.seed, sizeof(scene.seed));
  for (const Primitive& p : scene.primitives) {
    const int sh = static_cast<int>(p.shape);
    h = fnv1a(&sh, sizeof(sh), h);
    h = fnv1a(p.center.data(), 3 * sizeof(double), h);
    h = fnv1a(p.size.data(), 3 * sizeof(double), h);
    h = fnv1a(p.orientation.data(), 9 * sizeof(double), h);
    h = fnv1a(p.texture.color_a.data(), 3 * sizeof(double), h);
  }
  return h;
}

ViewImage render_view(const SceneSpec& scene, const CameraPose& pose, int resolution) {
  return render_view_impl(scene, pose, resolution, true);
}

ViewImage render_view_serial(const SceneSpec& scene, const CameraPose& pose, int resolution) {
  return render_view_impl(scene, pose, resolution, false);
}

std::vector<ViewImage> render_eval_rig(const SceneSpec& scene, int resolution) {
  const ViewRig rig = ring_rig(16, 0.0, 2.0);
  std::vector<ViewImage> views;
  views.reserve(16);
  for (const CameraPose& pose : rig.poses) views.push_back(render_view(scene, pose, resolution));
  return views;
}

std::vector<const SceneEntry*> DatasetManifest::split(const std::string& name) const {
  std::vector<const SceneEntry*> out;
  for (const SceneEntry& s : scenes) {
    if (s.split == name) out.push_back(&s);
  }
  return out;
}

namespace {

json manifest_json(const DatasetManifest& m) {
  json j;
  j["format_version"] = m.format_version;
  j["resolution"] = m.resolution;
  j["schedule_horizon"] = m.schedule_horizon;
  j["sampling"] = {{"rig_elevation", m.config.rig_elevation},
                   {"rig_radius", m.config.rig_radius},
                   {"target_elevation_max", m.config.target_elevation_max},
                   {"n_random_targets", m.config.n_random_targets}};
  json scenes = json::array();
  for (const SceneEntry& s : m.scenes) {
    json views = json::array();
    for (const ViewRecord& v : s.views) {
      views.push_back({{"azimuth", v.azimuth},
                       {"elevation", v.elevation},
                       {"radius", v.radius},
                       {"path", v.path}});
    }
    scenes.push_back({{"seed", s.seed}, {"split", s.split}, {"views", views}});
  }
  j["scenes"] = scenes;
  return j;
}

}  // namespace

std::string manifest_to_json(const DatasetManifest& m) { return manifest_json(m).dump(2) + "\n"; }

DatasetManifest build_dataset(int n_train, int n_val, int n_test, int resolution,
                              const std::string& out_dir, uint64_t seed_base, DatasetConfig cfg) {
  cfg.resolution = resolution;
  DatasetManifest m;
  m.resolution = resolution;
  m.schedule_horizon = cfg.schedule_horizon;
  m.config = cfg;
  m.root = out_dir;

  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (ec) throw IoError("build_dataset: cannot create " + out_dir);

  struct SplitPlan {
    const char* name;
    int count;
  };
  const SplitPlan plans[] = {{"train", n_train}, {"val", n_val}, {"test", n_test}};

  uint64_t next_seed = seed_base;
  for (const SplitPlan& plan : plans) {
    for (int i = 0; i < plan.count; ++i) {
      const uint64_t scene_seed = next_seed++;
      SceneEntry entry;
      entry.seed = scene_seed;
      entry.split = plan.name;

      const SceneSpec scene = sample_scene(scene_seed);
      const ViewRig rig = orthogonal_rig(cfg.rig_elevation, cfg.rig_radius);
      std::vector<CameraPose> poses = rig.poses;
      Rng rng = Rng(scene_seed).derive(0xda7a5e7);
      for (int k = 0; k < cfg.n_random_targets; ++k) {
        poses.push_back(pose_from_relative_azimuth(
            rng.uniform(0.0, 360.0),
            rng.uniform(-cfg.target_elevation_max, cfg.target_elevation_max), cfg.rig_radius));
      }

      const fs::path scene_dir = fs::path(out_dir) / plan.name / std::to_string(scene_seed);
      fs::create_directories(scene_dir, ec);
      if (ec) throw IoError("build_dataset: cannot create " + scene_dir.string());

      for (size_t v = 0; v < poses.size(); ++v) {
        const ViewImage img = render_view(scene, poses[v], resolution);
        const fs::path rel =
            fs::path(plan.name) / std::to_string(scene_seed) / (std::to_string(v) + ".png");
        try {
          write_png((fs::path(out_dir) / rel).string(), img.rgb);
        } catch (const IoError& e) {
          throw IoError(std::string("build_dataset: ") + e.what());
        }
        entry.views.push_back(
            {poses[v].rel_azimuth, poses[v].elevation, poses[v].radius, rel.generic_string()});
      }
      m.scenes.push_back(std::move(entry));
    }
  }

  const fs::path manifest_path = fs::path(out_dir) / "manifest.json";
  std::ofstream out(manifest_path);
  if (!out) throw IoError("build_dataset: cannot write " + manifest_path.string());
  out << manifest_to_json(m);
  out.close();
  if (!out) throw IoError("build_dataset: failed writing " + manifest_path.string());
  return m;
}

DatasetManifest load_manifest(const std::string& manifest_path) {
  std::ifstream in(manifest_path);
  if (!in) throw IoError("load_manifest: cannot open " + manifest_path);
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw IoError("load_manifest: bad JSON in " + manifest_path + ": " + e.what());
  }

  DatasetManifest m;
  m.format_version = j.at("format_version").get<int>();
  if (m.format_version != 1) {
    throw ConfigError("load_manifest: unsupported format_version " +
                      std::to_string(m.format_version));
  }
  m.resolution = j.at("resolution").get<int>();
  m.schedule_horizon = j.at("schedule_horizon").get<int>();
  const json& s = j.at("sampling");
  m.config.resolution = m.resolution;
  m.config.rig_elevation = s.at("rig_elevation").get<double>();
  m.config.rig_radius = s.at("rig_radius").get<double>();
  m.config.target_elevation_max = s.at("target_elevation_max").get<double>();
  m.config.n_random_targets = s.at("n_random_targets").get<int>();
  m.config.schedule_horizon = m.schedule_horizon;

  for (const json& sj : j.at("scenes")) {
    SceneEntry entry;
    entry.seed = sj.at("seed").get<uint64_t>();
    entry.split = sj.at("split").get<std::string>();
    for (const json& vj : sj.at("views")) {
      entry.views.push_back({vj.at("azimuth").get<double>(), vj.at("elevation").get<double>(),
                             vj.at("radius").get<double>(), vj.at("path").get<std::string>()});
    }
    m.scenes.push_back(std::move(entry));
  }
  m.root = fs::path(manifest_path).parent_path().string();
  for (const SceneEntry& entry : m.scenes) {
    for (const ViewRecord& v : entry.views) {
      if (!fs::exists(fs::path(m.root) / v.path)) {
        throw IoError("load_manifest: missing image " + v.path);
      }
    }
  }
  return m;
}

CameraPose pose_from_record(const ViewRecord& rec) {
  return pose_from_relative_azimuth(rec.azimuth, rec.elevation, rec.radius);
}

ViewImage load_view(const DatasetManifest& m, const SceneEntry& scene, int view_idx) {
  const ViewRecord& rec = scene.views.at(static_cast<size_t>(view_idx));
  ViewImage img;
  img.rgb = read_png((fs::path(m.root) / rec.path).string());
  check_arg(img.rgb.dim(1) == m.resolution && img.rgb.dim(2) == m.resolution,
            "load_view: image resolution does not match manifest");
  img.pose = pose_from_record(rec);
  img.mask = estimate_mask(img.rgb);
  return img;
}

}  // namespace mvb
