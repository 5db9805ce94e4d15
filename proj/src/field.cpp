#include "field.hpp"

#include <cmath>
#include <omp.h>

#include "checkpoint.hpp"
#include "errors.hpp"

namespace mvb {

namespace {

constexpr double kAlphaCap = 1.0 - 1e-10;

inline double softplus(double x) { return x > 30.0 ? x : std::log1p(std::exp(x)); }
inline double softplus_grad(double x) { return 1.0 / (1.0 + std::exp(-x)); }
inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

// InstantNGP-style spatial hash for grid corners.
inline int64_t hash_corner(int64_t x, int64_t y, int64_t z, int64_t mask) {
  return ((x * 1) ^ (y * 2654435761LL) ^ (z * 805459861LL)) & mask;
}

}  // namespace

RadianceField::RadianceField(FieldConfig cfg, uint64_t seed) : cfg_(cfg) {
  Rng rng = Rng(seed).derive(0xf1e1d);
  const int64_t table = int64_t{1} << cfg_.log2_table_size;
  level_res_.resize(static_cast<size_t>(cfg_.hash_levels));
  for (int l = 0; l < cfg_.hash_levels; ++l) {
    level_res_[static_cast<size_t>(l)] =
        std::max(2, static_cast<int>(std::floor(cfg_.base_resolution *
                                                std::pow(cfg_.per_level_scale, l))));
    Param p;
    p.init_shape("grid" + std::to_string(l),
                 {static_cast<int>(table), cfg_.features_per_level});
    for (int64_t i = 0; i < p.value.size(); ++i) p.value[i] = rng.uniform(-0.01, 0.01);
    params_.push_back(std::move(p));
  }

  const int fdim = cfg_.feature_dim();
  const int hid = cfg_.decoder_hidden;
  auto add_matrix = [&](const std::string& name, int rows, int cols, bool zero) {
    Param p;
    p.init_shape(name, {rows, cols});
    if (!zero) kaiming_init(p.value, cols, rng);
    params_.push_back(std::move(p));
  };
  auto add_vec = [&](const std::string& name, int n) {
    Param p;
    p.init_shape(name, {n});
    params_.push_back(std::move(p));
  };
  add_matrix("dec.w1", hid, fdim, false);
  add_vec("dec.b1", hid);
  add_matrix("dec.w2", hid, hid, false);
  add_vec("dec.b2", hid);
  add_matrix("dec.w3", 4, hid, false);
  add_vec("dec.b3", 4);
  // Slightly negative raw density to start from a thin fog.
  params_.back().value[0] = -1.0;
}

ParamRefs RadianceField::parameters() {
  ParamRefs refs;
  for (Param& p : params_) refs.push_back(&p);
  return refs;
}

int64_t RadianceField::param_count() const {
  int64_t n = 0;
  for (const Param& p : params_) n += p.value.size();
  return n;
}

void RadianceField::zero_density() {
  // softplus(-1000) underflows to exactly 0.
  Param& b3 = params_.back();
  b3.value[0] = -1000.0;
}

void RadianceField::gather_features(const Eigen::Vector3d& pos, double* feats,
                                    int64_t* corner_idx, double* corner_w) const {
  const int F = cfg_.features_per_level;
  const int64_t mask = (int64_t{1} << cfg_.log2_table_size) - 1;
  // Normalize to [0,1] over the box.
  const double inv = 1.0 / (2.0 * cfg_.bbox_half);
  const double ux = (pos.x() + cfg_.bbox_half) * inv;
  const double uy = (pos.y() + cfg_.bbox_half) * inv;
  const double uz = (pos.z() + cfg_.bbox_half) * inv;

  for (int l = 0; l < cfg_.hash_levels; ++l) {
    const int res = level_res_[static_cast<size_t>(l)];
    const double fx = ux * res, fy = uy * res, fz = uz * res;
    const int64_t x0 = std::min<int64_t>(static_cast<int64_t>(fx), res - 1);
    const int64_t y0 = std::min<int64_t>(static_cast<int64_t>(fy), res - 1);
    const int64_t z0 = std::min<int64_t>(static_cast<int64_t>(fz), res - 1);
    const double tx = fx - x0, ty = fy - y0, tz = fz - z0;

    const double* tab = params_[static_cast<size_t>(l)].value.data();
    for (int f = 0; f < F; ++f) feats[l * F + f] = 0.0;
    for (int c = 0; c < 8; ++c) {
      const int64_t cx = x0 + (c & 1);
      const int64_t cy = y0 + ((c >> 1) & 1);
      const int64_t cz = z0 + ((c >> 2) & 1);
      const double w = ((c & 1) ? tx : 1.0 - tx) * (((c >> 1) & 1) ? ty : 1.0 - ty) *
                       (((c >> 2) & 1) ? tz : 1.0 - tz);
      const int64_t idx = hash_corner(cx, cy, cz, mask);
      if (corner_idx) {
        corner_idx[l * 8 + c] = idx;
        corner_w[l * 8 + c] = w;
      }
      const double* entry = tab + idx * F;
      for (int f = 0; f < F; ++f) feats[l * F + f] += w * entry[f];
    }
  }
}

namespace {

// Decoder workspace sized for the largest supported config.
struct DecoderScratch {
  double feats[64];
  double pre1[128], act1[128];
  double pre2[128], act2[128];
  double out4[4];
};

}  // namespace

void RadianceField::query(const Eigen::Vector3d& pos, double* sigma, double* rgb) const {
  if (std::abs(pos.x()) > cfg_.bbox_half || std::abs(pos.y()) > cfg_.bbox_half ||
      std::abs(pos.z()) > cfg_.bbox_half) {
    *sigma = 0.0;
    if (rgb) rgb[0] = rgb[1] = rgb[2] = 0.0;
    return;
  }
  DecoderScratch s;
  gather_features(pos, s.feats, nullptr, nullptr);

  const int fdim = cfg_.feature_dim();
  const int hid = cfg_.decoder_hidden;
  const size_t base = static_cast<size_t>(cfg_.hash_levels);
  const double* w1 = params_[base + 0].value.data();
  const double* b1 = params_[base + 1].value.data();
  const double* w2 = params_[base + 2].value.data();
  const double* b2 = params_[base + 3].value.data();
  const double* w3 = params_[base + 4].value.data();
  const double* b3 = params_[base + 5].value.data();

  for (int o = 0; o < hid; ++o) {
    double acc = b1[o];
    const double* wr = w1 + static_cast<size_t>(o) * fdim;
    for (int i = 0; i < fdim; ++i) acc += wr[i] * s.feats[i];
    s.act1[o] = acc > 0.0 ? acc : 0.0;
  }
  for (int o = 0; o < hid; ++o) {
    double acc = b2[o];
    const double* wr = w2 + static_cast<size_t>(o) * hid;
    for (int i = 0; i < hid; ++i) acc += wr[i] * s.act1[i];
    s.act2[o] = acc > 0.0 ? acc : 0.0;
  }
  for (int o = 0; o < 4; ++o) {
    double acc = b3[o];
    const double* wr = w3 + static_cast<size_t>(o) * hid;
    for (int i = 0; i < hid; ++i) acc += wr[i] * s.act2[i];
    s.out4[o] = acc;
  }
  *sigma = softplus(s.out4[0]);
  if (rgb) {
    for (int c = 0; c < 3; ++c) rgb[c] = sigmoid(s.out4[1 + c]);
  }
}

double RadianceField::query_density(const Eigen::Vector3d& pos) const {
  double sigma;
  query(pos, &sigma, nullptr);
  return sigma;
}

std::vector<Tensor> RadianceField::make_grad_buffers() const {
  std::vector<Tensor> bufs;
  bufs.reserve(params_.size());
  for (const Param& p : params_) bufs.emplace_back(p.value.shape());
  return bufs;
}

void RadianceField::reduce_grads(std::vector<std::vector<Tensor>>& per_thread) {
  for (auto& bufs : per_thread) {
    for (size_t i = 0; i < params_.size(); ++i) params_[i].grad.add_(bufs[i]);
  }
}

void RadianceField::query_backward(const Eigen::Vector3d& pos, double d_sigma,
                                   const double* d_rgb, std::vector<Tensor>& grads) const {
  if (std::abs(pos.x()) > cfg_.bbox_half || std::abs(pos.y()) > cfg_.bbox_half ||
      std::abs(pos.z()) > cfg_.bbox_half) {
    return;
  }
  DecoderScratch s;
  int64_t corner_idx[64 * 8];
  double corner_w[64 * 8];
  gather_features(pos, s.feats, corner_idx, corner_w);

  const int fdim = cfg_.feature_dim();
  const int hid = cfg_.decoder_hidden;
  const int F = cfg_.features_per_level;
  const size_t base = static_cast<size_t>(cfg_.hash_levels);
  const double* w1 = params_[base + 0].value.data();
  const double* b1 = params_[base + 1].value.data();
  const double* w2 = params_[base + 2].value.data();
  const double* b2 = params_[base + 3].value.data();
  const double* w3 = params_[base + 4].value.data();
  const double* b3 = params_[base + 5].value.data();

  for (int o = 0; o < hid; ++o) {
    double acc = b1[o];
    const double* wr = w1 + static_cast<size_t>(o) * fdim;
    for (int i = 0; i < fdim; ++i) acc += wr[i] * s.feats[i];
    s.pre1[o] = acc;
    s.act1[o] = acc > 0.0 ? acc : 0.0;
  }
  for (int o = 0; o < hid; ++o) {
    double acc = b2[o];
    const double* wr = w2 + static_cast<size_t>(o) * hid;
    for (int i = 0; i < hid; ++i) acc += wr[i] * s.act1[i];
    s.pre2[o] = acc;
    s.act2[o] = acc > 0.0 ? acc : 0.0;
  }
  for (int o = 0; o < 4; ++o) {
    double acc = b3[o];
    const double* wr = w3 + static_cast<size_t>(o) * hid;
    for (int i = 0; i < hid; ++i) acc += wr[i] * s.act2[i];
    s.out4[o] = acc;
  }

  double dout4[4];
  dout4[0] = d_sigma * softplus_grad(s.out4[0]);
  for (int c = 0; c < 3; ++c) {
    if (d_rgb) {
      const double sg = sigmoid(s.out4[1 + c]);
      dout4[1 + c] = d_rgb[c] * sg * (1.0 - sg);
    } else {
      dout4[1 + c] = 0.0;
    }
  }

  double dact2[128] = {0};
  {
    double* gw3 = grads[base + 4].data();
    double* gb3 = grads[base + 5].data();
    for (int o = 0; o < 4; ++o) {
      gb3[o] += dout4[o];
      const double* wr = w3 + static_cast<size_t>(o) * hid;
      double* gr = gw3 + static_cast<size_t>(o) * hid;
      for (int i = 0; i < hid; ++i) {
        gr[i] += dout4[o] * s.act2[i];
        dact2[i] += dout4[o] * wr[i];
      }
    }
  }
  double dact1[128] = {0};
  {
    double* gw2 = grads[base + 2].data();
    double* gb2 = grads[base + 3].data();
    for (int o = 0; o < hid; ++o) {
      const double dpre = s.pre2[o] > 0.0 ? dact2[o] : 0.0;
      gb2[o] += dpre;
      const double* wr = w2 + static_cast<size_t>(o) * hid;
      double* gr = gw2 + static_cast<size_t>(o) * hid;
      for (int i = 0; i < hid; ++i) {
        gr[i] += dpre * s.act1[i];
        dact1[i] += dpre * wr[i];
      }
    }
  }
  double dfeats[64] = {0};
  {
    double* gw1 = grads[base + 0].data();
    double* gb1 = grads[base + 1].data();
    for (int o = 0; o < hid; ++o) {
      const double dpre = s.pre1[o] > 0.0 ? dact1[o] : 0.0;
      gb1[o] += dpre;
      const double* wr = w1 + static_cast<size_t>(o) * fdim;
      double* gr = gw1 + static_cast<size_t>(o) * fdim;
      for (int i = 0; i < fdim; ++i) {
        gr[i] += dpre * s.feats[i];
        dfeats[i] += dpre * wr[i];
      }
    }
  }
  for (int l = 0; l < cfg_.hash_levels; ++l) {
    double* gtab = grads[static_cast<size_t>(l)].data();
    for (int c = 0; c < 8; ++c) {
      const int64_t idx = corner_idx[l * 8 + c];
      const double w = corner_w[l * 8 + c];
      for (int f = 0; f < F; ++f) gtab[idx * F + f] += w * dfeats[l * F + f];
    }
  }
}

// ---------------------------------------------------------------------------

RayBatch rays_for_view(const CameraPose& pose, int resolution) {
  RayBatch batch;
  const PinholeCamera cam(pose, resolution);
  batch.origins.reserve(static_cast<size_t>(resolution) * resolution);
  for (int y = 0; y < resolution; ++y) {
    for (int x = 0; x < resolution; ++x) {
      batch.origins.push_back(cam.origin);
      batch.dirs.push_back(cam.dir(x, y));
      batch.pixel.push_back(y * resolution + x);
    }
  }
  return batch;
}

RayBatch rays_subset(const CameraPose& pose, int resolution, int count, uint64_t seed) {
  RayBatch batch;
  const PinholeCamera cam(pose, resolution);
  Rng rng = Rng(seed).derive(0x5b5e7);
  for (int i = 0; i < count; ++i) {
    const int p = static_cast<int>(rng.uniform_int(static_cast<int64_t>(resolution) * resolution));
    batch.origins.push_back(cam.origin);
    batch.dirs.push_back(cam.dir(p % resolution, p / resolution));
    batch.pixel.push_back(p);
  }
  return batch;
}

namespace {

bool ray_box(const Eigen::Vector3d& o, const Eigen::Vector3d& d, double h, double* t0,
             double* t1) {
  double lo = 1e-4, hi = std::numeric_limits<double>::infinity();
  for (int a = 0; a < 3; ++a) {
    if (std::abs(d[a]) < 1e-15) {
      if (std::abs(o[a]) > h) return false;
      continue;
    }
    double ta = (-h - o[a]) / d[a];
    double tb = (h - o[a]) / d[a];
    if (ta > tb) std::swap(ta, tb);
    lo = std::max(lo, ta);
    hi = std::min(hi, tb);
  }
  if (lo >= hi) return false;
  *t0 = lo;
  *t1 = hi;
  return true;
}

template <typename Query>
void render_one_ray(const Query& query, double bbox_half, const Eigen::Vector3d& o,
                    const Eigen::Vector3d& d, int n_samples, Rng rng, double* rgb_out,
                    double* opacity_out, std::vector<RenderResult::Sample>* record,
                    double* t_near) {
  double t0, t1;
  if (!ray_box(o, d, bbox_half, &t0, &t1)) {
    rgb_out[0] = rgb_out[1] = rgb_out[2] = 1.0;
    *opacity_out = 0.0;
    *t_near = 0.0;
    return;
  }
  *t_near = t0;
  const double delta = (t1 - t0) / n_samples;
  double transmittance = 1.0;
  double acc[3] = {0, 0, 0};
  for (int i = 0; i < n_samples; ++i) {
    const double t = t0 + delta * (i + rng.uniform());
    double sigma, color[3];
    query(o + t * d, &sigma, color);
    double alpha = 1.0 - std::exp(-sigma * delta);
    if (alpha > kAlphaCap) alpha = kAlphaCap;
    const double w = transmittance * alpha;
    for (int c = 0; c < 3; ++c) acc[c] += w * color[c];
    if (record) {
      record->push_back({t, delta, sigma, alpha, {color[0], color[1], color[2]}});
    }
    transmittance *= 1.0 - alpha;
  }
  for (int c = 0; c < 3; ++c) rgb_out[c] = acc[c] + transmittance;  // white background
  *opacity_out = 1.0 - transmittance;
}

template <typename Query>
RenderResult render_rays_impl(const Query& query, double bbox_half, const RayBatch& rays,
                              int n_samples, uint64_t seed, bool record, bool parallel) {
  RenderResult res;
  const int n = rays.n();
  res.rgb = Tensor({n, 3});
  res.opacity = Tensor({n});
  res.t_near.resize(static_cast<size_t>(n));
  if (record) res.samples.resize(static_cast<size_t>(n));
  const Rng root(seed);

  auto job = [&](int r) {
    render_one_ray(query, bbox_half, rays.origins[static_cast<size_t>(r)],
                   rays.dirs[static_cast<size_t>(r)], n_samples,
                   root.derive(0x2a9, static_cast<uint64_t>(r)),
                   res.rgb.data() + static_cast<size_t>(r) * 3, &res.opacity[r],
                   record ? &res.samples[static_cast<size_t>(r)] : nullptr, &res.t_near[r]);
  };
  if (parallel) {
#pragma omp parallel for schedule(static)
    for (int r = 0; r < n; ++r) job(r);
  } else {
    for (int r = 0; r < n; ++r) job(r);
  }
  return res;
}

struct FieldQuery {
  const RadianceField* field;
  void operator()(const Eigen::Vector3d& p, double* sigma, double* rgb) const {
    field->query(p, sigma, rgb);
  }
};

}  // namespace

RenderResult render_rays(const RadianceField& field, const RayBatch& rays, int n_samples,
                         uint64_t seed, bool record) {
  return render_rays_impl(FieldQuery{&field}, field.config().bbox_half, rays, n_samples, seed,
                          record, true);
}

RenderResult render_rays_serial(const RadianceField& field, const RayBatch& rays, int n_samples,
                                uint64_t seed, bool record) {
  return render_rays_impl(FieldQuery{&field}, field.config().bbox_half, rays, n_samples, seed,
                          record, false);
}

RenderResult render_rays_fn(const FieldQueryFn& query, double bbox_half, const RayBatch& rays,
                            int n_samples, uint64_t seed, bool record) {
  return render_rays_impl(query, bbox_half, rays, n_samples, seed, record, true);
}

void render_rays_backward(RadianceField& field, const RayBatch& rays, const RenderResult& res,
                          const Tensor& d_rgb, const Tensor* d_opacity) {
  check_internal(!res.samples.empty() || rays.n() == 0,
                 "render_rays_backward: render was not recorded");
  const int n = rays.n();
  const int nthreads = omp_get_max_threads();
  std::vector<std::vector<Tensor>> thread_grads(static_cast<size_t>(nthreads));
  for (auto& g : thread_grads) g = field.make_grad_buffers();

#pragma omp parallel for schedule(static)
  for (int r = 0; r < n; ++r) {
    std::vector<Tensor>& grads = thread_grads[static_cast<size_t>(omp_get_thread_num())];
    const auto& samples = res.samples[static_cast<size_t>(r)];
    if (samples.empty()) continue;
    const double* dC = d_rgb.data() + static_cast<size_t>(r) * 3;
    const double dO = d_opacity ? (*d_opacity)[r] : 0.0;

    // Final transmittance and the suffix sum S_k = sum_{i>k} w_i c_i + T_N*bg.
    double t_final = 1.0;
    for (const auto& s : samples) t_final *= 1.0 - s.alpha;
    double suffix[3] = {t_final, t_final, t_final};  // white background
    double trans_suffix = t_final;

    // Walk backwards, reconstructing T_k from the suffix product.
    for (int i = static_cast<int>(samples.size()) - 1; i >= 0; --i) {
      const auto& s = samples[static_cast<size_t>(i)];
      const double one_minus = 1.0 - s.alpha;
      const double t_k = trans_suffix / one_minus;  // transmittance before sample i
      const double w = t_k * s.alpha;

      // d(alpha): direct emission term minus everything it occludes.
      double dalpha = 0.0;
      for (int c = 0; c < 3; ++c) {
        dalpha += dC[c] * (t_k * s.color[c] - suffix[c] / one_minus);
      }
      dalpha += dO * (t_final / one_minus);

      const double dsigma = dalpha * s.delta * (1.0 - s.alpha);
      double drgb_s[3];
      for (int c = 0; c < 3; ++c) drgb_s[c] = dC[c] * w;

      field.query_backward(rays.origins[static_cast<size_t>(r)] +
                               s.t * rays.dirs[static_cast<size_t>(r)],
                           dsigma, drgb_s, grads);

      for (int c = 0; c < 3; ++c) suffix[c] += w * s.color[c];
      trans_suffix = t_k;
    }
  }
  field.reduce_grads(thread_grads);
}

FullRender render_field(const RadianceField& field, const CameraPose& pose, int resolution,
                        int n_samples, uint64_t seed, bool with_normals) {
  check_arg(n_samples >= 16, "render_field: need at least 16 samples per ray");
  const RayBatch rays = rays_for_view(pose, resolution);
  const RenderResult res = render_rays(field, rays, n_samples, seed, with_normals);

  FullRender out;
  out.rgb = Tensor({3, resolution, resolution});
  out.opacity = Tensor({resolution, resolution});
  out.normals = Tensor({3, resolution, resolution});
  for (int r = 0; r < rays.n(); ++r) {
    const int y = rays.pixel[static_cast<size_t>(r)] / resolution;
    const int x = rays.pixel[static_cast<size_t>(r)] % resolution;
    for (int c = 0; c < 3; ++c) out.rgb.at(c, y, x) = res.rgb[static_cast<size_t>(r) * 3 + c];
    out.opacity.at(y, x) = res.opacity[r];
  }

  if (with_normals) {
    const double h = 0.01;
#pragma omp parallel for schedule(static)
    for (int r = 0; r < rays.n(); ++r) {
      const auto& samples = res.samples[static_cast<size_t>(r)];
      if (samples.empty()) continue;
      const int y = rays.pixel[static_cast<size_t>(r)] / resolution;
      const int x = rays.pixel[static_cast<size_t>(r)] % resolution;
      double trans = 1.0;
      Eigen::Vector3d acc = Eigen::Vector3d::Zero();
      for (const auto& s : samples) {
        const double w = trans * s.alpha;
        trans *= 1.0 - s.alpha;
        if (w < 1e-3) continue;
        const Eigen::Vector3d p = rays.origins[static_cast<size_t>(r)] +
                                  s.t * rays.dirs[static_cast<size_t>(r)];
        Eigen::Vector3d g;
        for (int a = 0; a < 3; ++a) {
          Eigen::Vector3d dp = Eigen::Vector3d::Zero();
          dp[a] = h;
          g[a] = (field.query_density(p + dp) - field.query_density(p - dp)) / (2.0 * h);
        }
        const double norm = g.norm();
        if (norm > 1e-9) acc += w * (-g / norm);
      }
      const double n2 = acc.norm();
      if (n2 > 1e-9) acc /= n2;
      for (int c = 0; c < 3; ++c) out.normals.at(c, y, x) = acc[c];
    }
  }
  return out;
}

double orientation_loss(RadianceField& field, const RayBatch& rays, const RenderResult& res,
                        double weight, double fd_step, int max_samples) {
  check_internal(!res.samples.empty() || rays.n() == 0,
                 "orientation_loss: render was not recorded");
  // Collect the high-weight samples first so the cost stays bounded.
  struct Item {
    int ray;
    double t, w;
    Eigen::Vector3d dir;
  };
  std::vector<Item> items;
  for (int r = 0; r < rays.n(); ++r) {
    double trans = 1.0;
    for (const auto& s : res.samples[static_cast<size_t>(r)]) {
      const double w = trans * s.alpha;
      trans *= 1.0 - s.alpha;
      if (w > 0.01) items.push_back({r, s.t, w, rays.dirs[static_cast<size_t>(r)]});
    }
  }
  if (items.size() > static_cast<size_t>(max_samples)) {
    // Deterministic thinning.
    std::vector<Item> kept;
    const double stride = static_cast<double>(items.size()) / max_samples;
    for (int i = 0; i < max_samples; ++i) {
      kept.push_back(items[static_cast<size_t>(i * stride)]);
    }
    items = std::move(kept);
  }
  if (items.empty()) return 0.0;

  const int nthreads = omp_get_max_threads();
  std::vector<std::vector<Tensor>> thread_grads(static_cast<size_t>(nthreads));
  for (auto& g : thread_grads) g = field.make_grad_buffers();
  std::vector<double> losses(items.size(), 0.0);
  const double inv_n = 1.0 / static_cast<double>(items.size());

#pragma omp parallel for schedule(static)
  for (int64_t it = 0; it < static_cast<int64_t>(items.size()); ++it) {
    std::vector<Tensor>& grads = thread_grads[static_cast<size_t>(omp_get_thread_num())];
    const Item& item = items[static_cast<size_t>(it)];
    const Eigen::Vector3d p =
        rays.origins[static_cast<size_t>(item.ray)] + item.t * item.dir;

    Eigen::Vector3d g;
    for (int a = 0; a < 3; ++a) {
      Eigen::Vector3d dp = Eigen::Vector3d::Zero();
      dp[a] = fd_step;
      g[a] = (field.query_density(p + dp) - field.query_density(p - dp)) / (2.0 * fd_step);
    }
    const double gnorm = g.norm();
    if (gnorm < 1e-9) continue;
    const Eigen::Vector3d ghat = g / gnorm;
    const Eigen::Vector3d normal = -ghat;
    const double facing = normal.dot(item.dir);
    if (facing <= 0.0) continue;

    losses[static_cast<size_t>(it)] = weight * item.w * facing * facing * inv_n;
    // dL/dn = 2 * weight * w * facing * dir; back through n = -g/|g|.
    const Eigen::Vector3d dn = 2.0 * weight * item.w * facing * inv_n * item.dir;
    const Eigen::Vector3d dg = -(dn - ghat * ghat.dot(dn)) / gnorm;
    for (int a = 0; a < 3; ++a) {
      Eigen::Vector3d dp = Eigen::Vector3d::Zero();
      dp[a] = fd_step;
      const double scale = dg[a] / (2.0 * fd_step);
      field.query_backward(p + dp, scale, nullptr, grads);
      field.query_backward(p - dp, -scale, nullptr, grads);
    }
  }
  field.reduce_grads(thread_grads);
  double total = 0.0;
  for (double l : losses) total += l;
  return total;
}

// ---------------------------------------------------------------------------

namespace {

struct FieldFitTarget {
  Eigen::Vector3d origin, dir;
  double rgb[3];
  double mask;
};

double field_fit_step(RadianceField& field, Adam& opt, const std::vector<FieldFitTarget>& batch,
                      int n_samples, uint64_t seed) {
  RayBatch rays;
  for (const auto& t : batch) {
    rays.origins.push_back(t.origin);
    rays.dirs.push_back(t.dir);
  }
  RenderResult res = render_rays(field, rays, n_samples, seed, /*record=*/true);

  opt.zero_grad();
  const int n = rays.n();
  Tensor d_rgb({n, 3});
  Tensor d_op({n});
  double loss = 0.0;
  const double inv = 1.0 / (3.0 * n);
  for (int r = 0; r < n; ++r) {
    for (int c = 0; c < 3; ++c) {
      const double diff = res.rgb[static_cast<size_t>(r) * 3 + c] - batch[static_cast<size_t>(r)].rgb[c];
      loss += std::abs(diff) * inv;
      d_rgb[static_cast<size_t>(r) * 3 + c] = (diff > 0 ? 1.0 : (diff < 0 ? -1.0 : 0.0)) * inv;
    }
    const double od = res.opacity[r] - batch[static_cast<size_t>(r)].mask;
    loss += std::abs(od) / n;
    d_op[r] = (od > 0 ? 1.0 : (od < 0 ? -1.0 : 0.0)) / n;
  }
  render_rays_backward(field, rays, res, d_rgb, &d_op);
  opt.step();
  return loss;
}

}  // namespace

RadianceField coarse_reconstruct(const std::vector<ViewImage>& pseudo_views, int steps,
                                 uint64_t seed, FieldConfig cfg) {
  check_arg(pseudo_views.size() >= 2, "coarse_reconstruct: need at least two views");
  RadianceField field(cfg, seed);
  if (steps == 0) return field;

  Adam opt(field.parameters(), 1e-2);
  const int res = pseudo_views[0].height();
  std::vector<PinholeCamera> cams;
  std::vector<Tensor> masks;
  for (const ViewImage& v : pseudo_views) {
    cams.emplace_back(v.pose, res);
    masks.push_back(v.mask ? *v.mask : estimate_mask(v.rgb));
  }

  const Rng root(seed);
  const int rays_per_step = 512;
  for (int step = 0; step < steps; ++step) {
    Rng rng = root.derive(0xc0a25e, static_cast<uint64_t>(step));
    std::vector<FieldFitTarget> batch;
    batch.reserve(rays_per_step);
    for (int i = 0; i < rays_per_step; ++i) {
      const size_t v = static_cast<size_t>(rng.uniform_int(static_cast<int64_t>(pseudo_views.size())));
      const int p = static_cast<int>(rng.uniform_int(static_cast<int64_t>(res) * res));
      FieldFitTarget t;
      t.origin = cams[v].origin;
      t.dir = cams[v].dir(p % res, p / res);
      for (int c = 0; c < 3; ++c) t.rgb[c] = pseudo_views[v].rgb[static_cast<int64_t>(c) * res * res + p];
      t.mask = masks[v][p];
      batch.push_back(t);
    }
    const double loss = field_fit_step(field, opt, batch, 32, rng.next_u64());
    if (!std::isfinite(loss)) {
      throw InternalError("coarse_reconstruct: diverged at step " + std::to_string(step) +
                          " (seed " + std::to_string(seed) + ")");
    }
  }
  return field;
}

RadianceField distill_field(const RadianceField& src, FieldConfig dst_cfg, int steps,
                            uint64_t seed, double* final_loss) {
  RadianceField dst(dst_cfg, seed + 1);
  if (steps == 0) return dst;
  Adam opt(dst.parameters(), 1e-2);
  const Rng root(seed);
  const int rays_per_step = 512;
  const int res = 32;
  double loss_avg = 0.0;
  int loss_count = 0;
  for (int step = 0; step < steps; ++step) {
    Rng rng = root.derive(0xd157, static_cast<uint64_t>(step));
    const CameraPose pose = pose_from_relative_azimuth(
        rng.uniform(0.0, 360.0), rng.uniform(-30.0, 30.0), 2.0);
    RayBatch rays = rays_subset(pose, res, rays_per_step, rng.next_u64());
    const RenderResult src_render = render_rays(src, rays, 32, rng.next_u64(), false);

    std::vector<FieldFitTarget> batch(static_cast<size_t>(rays.n()));
    for (int r = 0; r < rays.n(); ++r) {
      batch[static_cast<size_t>(r)].origin = rays.origins[static_cast<size_t>(r)];
      batch[static_cast<size_t>(r)].dir = rays.dirs[static_cast<size_t>(r)];
      for (int c = 0; c < 3; ++c) {
        batch[static_cast<size_t>(r)].rgb[c] = src_render.rgb[static_cast<size_t>(r) * 3 + c];
      }
      batch[static_cast<size_t>(r)].mask = src_render.opacity[r];
    }
    const double loss = field_fit_step(dst, opt, batch, 32, rng.next_u64());
    if (!std::isfinite(loss)) {
      throw InternalError("distill_field: diverged at step " + std::to_string(step) + " (seed " +
                          std::to_string(seed) + ")");
    }
    if (step >= steps - 50) {
      loss_avg += loss;
      ++loss_count;
    }
  }
  if (final_loss) *final_loss = loss_count ? loss_avg / loss_count : 0.0;
  return dst;
}

// ---------------------------------------------------------------------------

namespace {

nlohmann::json field_config_to_json(const FieldConfig& cfg) {
  return nlohmann::json{{"hash_levels", cfg.hash_levels},
                        {"log2_table_size", cfg.log2_table_size},
                        {"features_per_level", cfg.features_per_level},
                        {"base_resolution", cfg.base_resolution},
                        {"per_level_scale", cfg.per_level_scale},
                        {"decoder_hidden", cfg.decoder_hidden},
                        {"bbox_half", cfg.bbox_half}};
}

FieldConfig field_config_from_json(const nlohmann::json& j) {
  FieldConfig cfg;
  cfg.hash_levels = j.at("hash_levels").get<int>();
  cfg.log2_table_size = j.at("log2_table_size").get<int>();
  cfg.features_per_level = j.at("features_per_level").get<int>();
  cfg.base_resolution = j.at("base_resolution").get<int>();
  cfg.per_level_scale = j.at("per_level_scale").get<double>();
  cfg.decoder_hidden = j.at("decoder_hidden").get<int>();
  cfg.bbox_half = j.at("bbox_half").get<double>();
  return cfg;
}

}  // namespace

void save_field(const std::string& path, RadianceField& field, uint64_t init_seed) {
  CheckpointHeader hdr;
  hdr.kind = "radiance_field";
  hdr.config = field_config_to_json(field.config());
  hdr.seed_lineage = {{"init_seed", init_seed}};
  std::vector<std::pair<std::string, const Tensor*>> tensors;
  for (Param* p : field.parameters()) tensors.emplace_back(p->name, &p->value);
  save_checkpoint(path, hdr, tensors);
}

RadianceField load_field(const std::string& path) {
  Checkpoint ckpt = load_checkpoint(path);
  if (ckpt.header.kind != "radiance_field") {
    throw ConfigError("load_field: " + path + " holds '" + ckpt.header.kind +
                      "', not a radiance_field");
  }
  RadianceField field(field_config_from_json(ckpt.header.config),
                      ckpt.header.seed_lineage.value("init_seed", uint64_t{0}));
  for (Param* p : field.parameters()) {
    const Tensor* t = ckpt.find(p->name);
    if (!t || !t->same_shape(p->value)) {
      throw ConfigError("load_field: checkpoint is missing tensor " + p->name);
    }
    p->value = *t;
  }
  return field;
}

}  // namespace mvb
