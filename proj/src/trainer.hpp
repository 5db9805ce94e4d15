#pragma once

#include <string>
#include <vector>

#include "augment.hpp"
#include "checkpoint.hpp"
#include "config.hpp"
#include "scene.hpp"
#include "schedule.hpp"
#include "score_net.hpp"

namespace mvb {

struct TrainConfig {
  std::string data_dir;  // directory containing manifest.json
  std::string out_dir;
  std::string resume;  // optional checkpoint path
  uint64_t seed = 0;
  int steps = 20000;
  int batch_size = 32;
  double lr = 1e-4;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double pose_lr_mult = 10.0;
  int val_interval = 200;
  int checkpoint_interval = 1000;
  double null_cond_prob = 0.1;  // classifier-free condition dropout
  bool augment = true;
  AugmentationPolicy policy;
  NetworkConfig net;  // resolution is overwritten from the manifest
  int horizon = 1000;
  double beta_start = 0.00085;
  double beta_end = 0.012;

  std::string canonical_text;  // canonical key=value form, hashed for resume
  uint64_t config_hash() const { return fnv1a(canonical_text.data(), canonical_text.size()); }
};

// Documented keys only; unknown keys are rejected by the caller via
// cfg.reject_unknown() after this returns.
TrainConfig train_config_from_kv(KvConfig& kv);

// Lazily loads and keeps decoded views per scene.
class DatasetCache {
 public:
  explicit DatasetCache(DatasetManifest manifest) : manifest_(std::move(manifest)) {
    views_.resize(manifest_.scenes.size());
  }
  const DatasetManifest& manifest() const { return manifest_; }
  const std::vector<ViewImage>& views(size_t scene_index);

 private:
  DatasetManifest manifest_;
  std::vector<std::vector<ViewImage>> views_;
};

struct TrainItem {
  ConditionSet cond;
  std::vector<CameraPose> poses;
  Tensor target_rgb;
  CameraPose target_pose;
  bool null_cond = false;
  uint64_t item_seed = 0;
};

// Per item: the scene's orthogonal rig as conditions (augmented when
// requested), one random non-rig view as the untouched target.
std::vector<TrainItem> sample_batch(DatasetCache& data, const std::string& split, int batch_size,
                                    const AugmentationPolicy& policy,
                                    const DiffusionSchedule& sched, uint64_t seed, bool augment,
                                    double null_cond_prob);

struct StepResult {
  double loss = 0.0;
  std::vector<int> sampled_t;
};

double eps_mse(const Tensor& eps_hat, const Tensor& eps);

// One epsilon-prediction MSE step over the batch: forward, backward, Adam
// update. Aborts with diagnostics if the loss goes non-finite.
StepResult training_step(ScoreNet& net, const std::vector<TrainItem>& batch,
                         const DiffusionSchedule& sched, Adam& opt);

// Full loop: dataset load, optional resume (refused if the config hash
// differs), CSV loss log, periodic checkpoints. Returns the final
// checkpoint path.
std::string train(const TrainConfig& cfg);

// --- score-net checkpoint glue ---------------------------------------

nlohmann::json net_config_to_json(const NetworkConfig& cfg);
NetworkConfig net_config_from_json(const nlohmann::json& j);

void save_score_net(const std::string& path, ScoreNet& net, const DiffusionSchedule& sched,
                    int64_t step, uint64_t master_seed, uint64_t init_seed, Adam* opt,
                    const nlohmann::json& extra);

struct LoadedScoreNet {
  ScoreNet net;
  DiffusionSchedule sched;
  int64_t step = 0;
  uint64_t master_seed = 0;
  uint64_t init_seed = 0;
  nlohmann::json extra;
};

LoadedScoreNet load_score_net(const std::string& path);

// Restores optimizer moments saved alongside the parameters; returns false
// when the checkpoint carries no optimizer state.
bool restore_optimizer(const Checkpoint& ckpt, Adam& opt);

}  // namespace mvb
