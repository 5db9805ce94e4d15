#pragma once

#include <Eigen/Dense>
#include <memory>
#include <vector>

#include "camera.hpp"
#include "image.hpp"
#include "layers.hpp"

namespace mvb {

// Multi-resolution hash grid plus a two-hidden-layer decoder producing
// density (softplus) and RGB (sigmoid). Bounding box is the cube of
// half-extent bbox_half around the origin (the unit sphere's circumscribed
// cube); queries outside return exactly zero density.
struct FieldConfig {
  int hash_levels = 8;
  int log2_table_size = 14;
  int features_per_level = 2;
  int base_resolution = 4;
  double per_level_scale = 1.55;
  int decoder_hidden = 32;
  double bbox_half = 1.0;

  int feature_dim() const { return hash_levels * features_per_level; }
};

class RadianceField {
 public:
  RadianceField(FieldConfig cfg, uint64_t seed);

  const FieldConfig& config() const { return cfg_; }
  ParamRefs parameters();
  int64_t param_count() const;

  // position [3] -> sigma >= 0 and rgb in [0,1].
  void query(const Eigen::Vector3d& pos, double* sigma, double* rgb) const;
  double query_density(const Eigen::Vector3d& pos) const;

  // Re-runs the forward pass internally and accumulates parameter gradients
  // into `grads` (tensor list aligned with parameters()). Pass d_rgb=nullptr
  // for density-only adjoints.
  void query_backward(const Eigen::Vector3d& pos, double d_sigma, const double* d_rgb,
                      std::vector<Tensor>& grads) const;

  std::vector<Tensor> make_grad_buffers() const;
  void reduce_grads(std::vector<std::vector<Tensor>>& per_thread);

  // Sets the raw density bias so the field renders an exactly empty volume.
  void zero_density();

 private:
  FieldConfig cfg_;
  std::vector<Param> params_;  // level tables, then decoder tensors
  std::vector<int> level_res_;

  void gather_features(const Eigen::Vector3d& pos, double* feats, int64_t* corner_idx,
                       double* corner_w) const;
};

// ---------------------------------------------------------------------------
// Volume rendering

struct RayBatch {
  std::vector<Eigen::Vector3d> origins, dirs;  // unit directions
  std::vector<int> pixel;                      // flat pixel index (full renders)
  int n() const { return static_cast<int>(origins.size()); }
};

RayBatch rays_for_view(const CameraPose& pose, int resolution);
// `count` random distinct-ish pixels, deterministic in the seed.
RayBatch rays_subset(const CameraPose& pose, int resolution, int count, uint64_t seed);

struct RenderResult {
  Tensor rgb;      // [N,3]
  Tensor opacity;  // [N]
  // Per-ray sample record for the backward pass / compositing checks.
  struct Sample {
    double t, delta, sigma, alpha;
    double color[3];
  };
  std::vector<std::vector<Sample>> samples;  // empty when record=false
  std::vector<double> t_near;                // box entry per ray (0 when missed)
};

RenderResult render_rays(const RadianceField& field, const RayBatch& rays, int n_samples,
                         uint64_t seed, bool record);
RenderResult render_rays_serial(const RadianceField& field, const RayBatch& rays, int n_samples,
                                uint64_t seed, bool record);

// Same compositing over an arbitrary density/color function (test oracles
// drive this with analytic densities).
using FieldQueryFn = std::function<void(const Eigen::Vector3d&, double* sigma, double* rgb)>;
RenderResult render_rays_fn(const FieldQueryFn& query, double bbox_half, const RayBatch& rays,
                            int n_samples, uint64_t seed, bool record);

// Accumulates field-parameter gradients for d(rgb) and optionally d(opacity).
void render_rays_backward(RadianceField& field, const RayBatch& rays, const RenderResult& res,
                          const Tensor& d_rgb, const Tensor* d_opacity);

// Emission-absorption full-image render; normals come from the negative
// normalized finite-difference density gradient, composited by sample weight.
struct FullRender {
  Tensor rgb;      // [3,H,W]
  Tensor opacity;  // [H,W]
  Tensor normals;  // [3,H,W], zero where nothing was hit
};

FullRender render_field(const RadianceField& field, const CameraPose& pose, int resolution,
                        int n_samples, uint64_t seed = 0, bool with_normals = true);

// Penalizes density normals that face away from the camera along each ray
// (sum of w * max(0, n . dir)^2 over high-weight samples); accumulates the
// gradient through the finite-difference normals. Returns the loss value.
double orientation_loss(RadianceField& field, const RayBatch& rays, const RenderResult& res,
                        double weight, double fd_step = 0.01, int max_samples = 4096);

// ---------------------------------------------------------------------------
// Field construction

// Short low-capacity fit (L1 rgb + L1 opacity-vs-mask) to a handful of
// posed views; the stand-in for a coarse upstream reconstruction.
RadianceField coarse_reconstruct(const std::vector<ViewImage>& pseudo_views, int steps,
                                 uint64_t seed = 0, FieldConfig cfg = [] {
                                   FieldConfig c;
                                   c.hash_levels = 4;
                                   return c;
                                 }());

// Trains dst_cfg on random-pose renders of src (L1 rgb + opacity).
RadianceField distill_field(const RadianceField& src, FieldConfig dst_cfg, int steps = 1000,
                            uint64_t seed = 0, double* final_loss = nullptr);

void save_field(const std::string& path, RadianceField& field, uint64_t init_seed);
RadianceField load_field(const std::string& path);

}  // namespace mvb
