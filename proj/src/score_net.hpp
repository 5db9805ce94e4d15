#pragma once

#include <array>
#include <memory>
#include <optional>
#include <vector>

#include "camera.hpp"
#include "image.hpp"
#include "layers.hpp"

namespace mvb {

struct NetworkConfig {
  int base_channels = 32;
  std::vector<int> channel_mults = {1, 2, 4};
  std::vector<int> attention_levels = {1, 2};
  int time_embed_width = 128;
  int global_feature_width = 128;
  int n_max_condition_views = 4;
  int resolution = 32;
  // Whether condition branches exchange keys/values among themselves during
  // local-feature extraction (joint) or run independently.
  bool cond_joint_attention = true;

  int levels() const { return static_cast<int>(channel_mults.size()); }
  int channels_at(int level) const { return base_channels * channel_mults[level]; }
  bool has_attention(int level) const;
  void validate() const;  // throws ConfigError on an inconsistent config
};

// Ordered condition views; view 0 is the canonical input and is never
// dropped. Labels are per-view control strengths in [0,1].
struct ConditionSet {
  std::vector<ViewImage> views;
  std::vector<double> labels;
  std::vector<bool> drop_mask;

  int n_views() const { return static_cast<int>(views.size()); }
  int n_active() const;
  void validate() const;
};

// Per-view, per-attention-layer key/value token maps extracted once at fixed
// timestep 0, plus the global feature of view 0. Read-only after
// construction; access counters back the leave-one-out tests.
struct FeatureCache {
  struct ViewEntry {
    std::vector<Tensor> k, v;  // per attention layer, [n_tokens, C]
    mutable int64_t access_count = 0;
  };
  std::vector<ViewEntry> views;
  Tensor global_feature;  // [global_feature_width]
  bool has_global = false;
};

class ScoreNet;

// Saved activations for one full training evaluation (condition branches +
// target branch); consumed by ScoreNet::backward. Opaque outside the net.
struct TrainingTape;
struct TrainingTapeDeleter {
  void operator()(TrainingTape*) const;
};
using TrainingTapePtr = std::unique_ptr<TrainingTape, TrainingTapeDeleter>;

class ScoreNet {
 public:
  ScoreNet(NetworkConfig cfg, uint64_t seed);
  ~ScoreNet();
  ScoreNet(ScoreNet&&) noexcept;
  ScoreNet& operator=(ScoreNet&&) noexcept;

  const NetworkConfig& config() const { return cfg_; }
  int64_t param_count() const;
  uint64_t params_checksum() const;
  ParamRefs parameters();

  int n_attention_layers() const { return n_attn_layers_; }

  // --- embeddings -----------------------------------------------------
  Tensor time_embedding(int t) const;  // sinusoidal(t) through the time MLP
  // t_embed + MLP_pose(pose_vec) + MLP_label(label); label omitted for the
  // target branch (pass nullopt).
  Tensor embed_pose_and_label(const std::array<double, 12>& pose_vec, std::optional<double> label,
                              const Tensor& t_embed) const;

  // --- inference ------------------------------------------------------
  Tensor extract_global_feature(const ViewImage& view0) const;
  FeatureCache extract_local_features(const ConditionSet& cond,
                                      const std::vector<CameraPose>& poses) const;
  Tensor predict_noise(const Tensor& x_t, int t, const CameraPose& target_pose,
                       const FeatureCache& cache) const;

  // --- training -------------------------------------------------------
  // Forward through condition branches and the target branch with recorded
  // activations. null_condition drops the entire cache (classifier-free
  // step). The returned tape must be passed to backward().
  Tensor forward_training(const ConditionSet& cond, const std::vector<CameraPose>& poses,
                          const Tensor& x_t, int t, const CameraPose& target_pose,
                          bool null_condition, TrainingTapePtr& tape) const;
  void backward(const Tensor& d_eps, TrainingTape& tape);

 private:
  NetworkConfig cfg_;
  struct Impl;
  std::unique_ptr<Impl> impl_;
  int n_attn_layers_ = 0;
};

}  // namespace mvb
