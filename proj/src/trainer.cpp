#include "trainer.hpp"

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "errors.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace mvb {

TrainConfig train_config_from_kv(KvConfig& kv) {
  TrainConfig cfg;
  cfg.data_dir = kv.require_string("data");
  cfg.out_dir = kv.require_string("out");
  cfg.resume = kv.get_string("resume", "");
  cfg.seed = static_cast<uint64_t>(kv.get_int("seed", 0));
  cfg.steps = static_cast<int>(kv.get_int("steps", 20000));
  cfg.batch_size = static_cast<int>(kv.get_int("batch_size", 32));
  cfg.lr = kv.get_double("lr", 1e-4);
  cfg.adam_beta1 = kv.get_double("adam_beta1", 0.9);
  cfg.adam_beta2 = kv.get_double("adam_beta2", 0.999);
  cfg.pose_lr_mult = kv.get_double("pose_lr_mult", 10.0);
  cfg.val_interval = static_cast<int>(kv.get_int("val_interval", 200));
  cfg.checkpoint_interval = static_cast<int>(kv.get_int("checkpoint_interval", 1000));
  cfg.null_cond_prob = kv.get_double("null_cond_prob", 0.1);
  cfg.augment = kv.get_bool("augment", true);

  cfg.policy.noise_disturb_max_t = static_cast<int>(kv.get_int("aug.noise_max_t", 300));
  cfg.policy.scale_factors = kv.get_int_list("aug.scale_factors", {2, 4});
  cfg.policy.drop_prob = kv.get_double("aug.drop_prob", 0.3);
  cfg.policy.grid_distort_strength_frac = kv.get_double("aug.grid_strength_frac", 0.08);
  cfg.policy.jitter_magnitude_deg = kv.get_double("aug.jitter_deg", 5.0);
  cfg.policy.corruption_prob = kv.get_double("aug.corruption_prob", 0.5);
  cfg.policy.compose = kv.get_bool("aug.compose", true);
  cfg.policy.label_floor = kv.get_double("aug.label_floor", 0.1);

  cfg.net.base_channels = static_cast<int>(kv.get_int("net.base_channels", 32));
  cfg.net.channel_mults = kv.get_int_list("net.channel_mults", {1, 2, 4});
  cfg.net.attention_levels = kv.get_int_list("net.attention_levels", {1, 2});
  cfg.net.time_embed_width = static_cast<int>(kv.get_int("net.time_embed_width", 128));
  cfg.net.global_feature_width = static_cast<int>(kv.get_int("net.global_feature_width", 128));
  cfg.net.cond_joint_attention = kv.get_bool("net.cond_joint_attention", true);

  cfg.horizon = static_cast<int>(kv.get_int("schedule.horizon", 1000));
  cfg.beta_start = kv.get_double("schedule.beta_start", 0.00085);
  cfg.beta_end = kv.get_double("schedule.beta_end", 0.012);

  cfg.canonical_text = kv.canonical();
  return cfg;
}

const std::vector<ViewImage>& DatasetCache::views(size_t scene_index) {
  std::vector<ViewImage>& slot = views_.at(scene_index);
  if (slot.empty()) {
    const SceneEntry& entry = manifest_.scenes[scene_index];
    slot.reserve(entry.views.size());
    for (size_t v = 0; v < entry.views.size(); ++v) {
      slot.push_back(load_view(manifest_, entry, static_cast<int>(v)));
    }
  }
  return slot;
}

std::vector<TrainItem> sample_batch(DatasetCache& data, const std::string& split, int batch_size,
                                    const AugmentationPolicy& policy,
                                    const DiffusionSchedule& sched, uint64_t seed, bool augment,
                                    double null_cond_prob) {
  std::vector<size_t> scene_idx;
  for (size_t i = 0; i < data.manifest().scenes.size(); ++i) {
    if (data.manifest().scenes[i].split == split) scene_idx.push_back(i);
  }
  if (scene_idx.empty()) throw ConfigError("sample_batch: split '" + split + "' is empty");

  std::vector<TrainItem> batch;
  batch.reserve(static_cast<size_t>(batch_size));
  const Rng root(seed);
  for (int b = 0; b < batch_size; ++b) {
    Rng rng = root.derive(0xba7c4, static_cast<uint64_t>(b));
    const size_t scene =
        scene_idx[static_cast<size_t>(rng.uniform_int(static_cast<int64_t>(scene_idx.size())))];
    const std::vector<ViewImage>& views = data.views(scene);
    check_internal(views.size() > 4, "sample_batch: scene has no target pool");

    TrainItem item;
    item.item_seed = rng.next_u64();
    for (int v = 0; v < 4; ++v) {
      item.cond.views.push_back(views[static_cast<size_t>(v)]);
      item.cond.labels.push_back(1.0);
      item.cond.drop_mask.push_back(false);
      item.poses.push_back(views[static_cast<size_t>(v)].pose);
    }
    const int target =
        4 + static_cast<int>(rng.uniform_int(static_cast<int64_t>(views.size()) - 4));
    item.target_rgb = views[static_cast<size_t>(target)].rgb;
    item.target_pose = views[static_cast<size_t>(target)].pose;

    if (augment) {
      auto [aug_cond, aug_poses] = apply_policy(item.cond, item.poses, policy, sched,
                                                rng.next_u64());
      item.cond = std::move(aug_cond);
      item.poses = std::move(aug_poses);
    }
    item.null_cond = rng.bernoulli(null_cond_prob);
    batch.push_back(std::move(item));
  }
  return batch;
}

double eps_mse(const Tensor& eps_hat, const Tensor& eps) {
  check_arg(eps_hat.same_shape(eps), "eps_mse: shape mismatch");
  double acc = 0.0;
  for (int64_t i = 0; i < eps.size(); ++i) {
    const double d = eps_hat[i] - eps[i];
    acc += d * d;
  }
  return acc / static_cast<double>(eps.size());
}

StepResult training_step(ScoreNet& net, const std::vector<TrainItem>& batch,
                         const DiffusionSchedule& sched, Adam& opt) {
  check_arg(!batch.empty(), "training_step: empty batch");
  opt.zero_grad();
  StepResult result;
  const double batch_n = static_cast<double>(batch.size());

  for (const TrainItem& item : batch) {
    Rng rng = Rng(item.item_seed).derive(0x57e9);
    const int t = static_cast<int>(rng.uniform_int(sched.horizon));
    result.sampled_t.push_back(t);
    Tensor eps(item.target_rgb.shape());
    for (int64_t i = 0; i < eps.size(); ++i) eps[i] = rng.normal();
    const Tensor x_t = forward_diffuse(item.target_rgb, t, eps, sched);

    TrainingTapePtr tape;
    const Tensor eps_hat = net.forward_training(item.cond, item.poses, x_t, t, item.target_pose,
                                                item.null_cond, tape);
    result.loss += eps_mse(eps_hat, eps) / batch_n;

    Tensor d_eps(eps.shape());
    const double scale = 2.0 / (static_cast<double>(eps.size()) * batch_n);
    for (int64_t i = 0; i < eps.size(); ++i) d_eps[i] = scale * (eps_hat[i] - eps[i]);
    net.backward(d_eps, *tape);
  }

  if (!std::isfinite(result.loss)) {
    std::string ts;
    for (int t : result.sampled_t) ts += std::to_string(t) + " ";
    throw InternalError("training_step: non-finite loss; item seed " +
                        std::to_string(batch.front().item_seed) + "; t values: " + ts);
  }
  opt.step();
  return result;
}

// --- checkpoints ------------------------------------------------------

json net_config_to_json(const NetworkConfig& cfg) {
  return json{{"base_channels", cfg.base_channels},
              {"channel_mults", cfg.channel_mults},
              {"attention_levels", cfg.attention_levels},
              {"time_embed_width", cfg.time_embed_width},
              {"global_feature_width", cfg.global_feature_width},
              {"n_max_condition_views", cfg.n_max_condition_views},
              {"resolution", cfg.resolution},
              {"cond_joint_attention", cfg.cond_joint_attention}};
}

NetworkConfig net_config_from_json(const json& j) {
  NetworkConfig cfg;
  cfg.base_channels = j.at("base_channels").get<int>();
  cfg.channel_mults = j.at("channel_mults").get<std::vector<int>>();
  cfg.attention_levels = j.at("attention_levels").get<std::vector<int>>();
  cfg.time_embed_width = j.at("time_embed_width").get<int>();
  cfg.global_feature_width = j.at("global_feature_width").get<int>();
  cfg.n_max_condition_views = j.at("n_max_condition_views").get<int>();
  cfg.resolution = j.at("resolution").get<int>();
  cfg.cond_joint_attention = j.at("cond_joint_attention").get<bool>();
  return cfg;
}

void save_score_net(const std::string& path, ScoreNet& net, const DiffusionSchedule& sched,
                    int64_t step, uint64_t master_seed, uint64_t init_seed, Adam* opt,
                    const json& extra) {
  CheckpointHeader hdr;
  hdr.kind = "score_net";
  hdr.config = net_config_to_json(net.config());
  hdr.schedule = {{"horizon", sched.horizon},
                  {"beta_start", sched.beta_start},
                  {"beta_end", sched.beta_end}};
  hdr.seed_lineage = {{"master_seed", master_seed}, {"init_seed", init_seed}};
  hdr.extra = extra;
  hdr.step = step;
  if (opt) hdr.extra["adam_step_count"] = opt->step_count();

  std::vector<std::pair<std::string, const Tensor*>> tensors;
  ParamRefs params = net.parameters();
  for (const Param* p : params) tensors.emplace_back("param." + p->name, &p->value);
  if (opt) {
    for (size_t i = 0; i < params.size(); ++i) {
      tensors.emplace_back("adam.m." + params[i]->name, &opt->moments1()[i]);
      tensors.emplace_back("adam.v." + params[i]->name, &opt->moments2()[i]);
    }
  }
  save_checkpoint(path, hdr, tensors);
}

LoadedScoreNet load_score_net(const std::string& path) {
  Checkpoint ckpt = load_checkpoint(path);
  if (ckpt.header.kind != "score_net") {
    throw ConfigError("load_score_net: " + path + " holds '" + ckpt.header.kind +
                      "', not a score_net");
  }
  const NetworkConfig cfg = net_config_from_json(ckpt.header.config);
  const uint64_t init_seed = ckpt.header.seed_lineage.at("init_seed").get<uint64_t>();

  LoadedScoreNet out{ScoreNet(cfg, init_seed),
                     make_schedule(ckpt.header.schedule.at("horizon").get<int>(),
                                   ckpt.header.schedule.at("beta_start").get<double>(),
                                   ckpt.header.schedule.at("beta_end").get<double>()),
                     ckpt.header.step,
                     ckpt.header.seed_lineage.at("master_seed").get<uint64_t>(),
                     init_seed,
                     ckpt.header.extra};
  for (Param* p : out.net.parameters()) {
    const Tensor* t = ckpt.find("param." + p->name);
    if (!t || !t->same_shape(p->value)) {
      throw ConfigError("load_score_net: checkpoint is missing tensor " + p->name);
    }
    p->value = *t;
  }
  return out;
}

bool restore_optimizer(const Checkpoint& ckpt, Adam& opt) {
  bool any = false;
  size_t i = 0;
  for (const auto& [name, tensor] : ckpt.tensors) {
    if (name.rfind("adam.m.", 0) == 0) {
      any = true;
      break;
    }
    (void)tensor;
    ++i;
  }
  if (!any) return false;
  // Moments were saved in registration order right after the params.
  std::vector<const Tensor*> ms, vs;
  for (const auto& [name, tensor] : ckpt.tensors) {
    if (name.rfind("adam.m.", 0) == 0) ms.push_back(&tensor);
    if (name.rfind("adam.v.", 0) == 0) vs.push_back(&tensor);
  }
  check_internal(ms.size() == opt.moments1().size() && vs.size() == opt.moments2().size(),
                 "restore_optimizer: moment count mismatch");
  for (size_t k = 0; k < ms.size(); ++k) {
    opt.moments1()[k] = *ms[k];
    opt.moments2()[k] = *vs[k];
  }
  opt.set_step_count(ckpt.header.extra.value("adam_step_count", int64_t{0}));
  return true;
}

// --- training loop ------------------------------------------------------

namespace {

double validation_loss(ScoreNet& net, DatasetCache& data, const DiffusionSchedule& sched) {
  std::vector<size_t> val_scenes;
  for (size_t i = 0; i < data.manifest().scenes.size(); ++i) {
    if (data.manifest().scenes[i].split == "val") val_scenes.push_back(i);
    if (val_scenes.size() >= 4) break;
  }
  if (val_scenes.empty()) return std::nan("");

  double total = 0.0;
  int count = 0;
  for (size_t scene : val_scenes) {
    const std::vector<ViewImage>& views = data.views(scene);
    ConditionSet cond;
    std::vector<CameraPose> poses;
    for (int v = 0; v < 4; ++v) {
      cond.views.push_back(views[static_cast<size_t>(v)]);
      cond.labels.push_back(1.0);
      cond.drop_mask.push_back(false);
      poses.push_back(views[static_cast<size_t>(v)].pose);
    }
    const FeatureCache cache = net.extract_local_features(cond, poses);
    const ViewImage& target = views[4];
    for (int t : {100, 400, 700}) {
      Rng rng = Rng(data.manifest().scenes[scene].seed).derive(0x7a1,
                                                               static_cast<uint64_t>(t));
      Tensor eps(target.rgb.shape());
      for (int64_t i = 0; i < eps.size(); ++i) eps[i] = rng.normal();
      const Tensor x_t = forward_diffuse(target.rgb, t, eps, sched);
      const Tensor eps_hat = net.predict_noise(x_t, t, target.pose, cache);
      total += eps_mse(eps_hat, eps);
      ++count;
    }
  }
  return total / count;
}

}  // namespace

std::string train(const TrainConfig& cfg) {
  const fs::path out_dir(cfg.out_dir);
  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (ec) throw IoError("train: cannot create " + cfg.out_dir);

  {
    std::ofstream snap(out_dir / "config_snapshot.cfg");
    snap << cfg.canonical_text;
  }

  DatasetManifest manifest = load_manifest((fs::path(cfg.data_dir) / "manifest.json").string());
  DatasetCache data(std::move(manifest));
  const DiffusionSchedule sched = make_schedule(cfg.horizon, cfg.beta_start, cfg.beta_end);

  NetworkConfig net_cfg = cfg.net;
  net_cfg.resolution = data.manifest().resolution;
  const uint64_t init_seed = Rng(cfg.seed).derive(0x1217).seed();
  ScoreNet net(net_cfg, init_seed);
  Adam opt(net.parameters(), cfg.lr, cfg.adam_beta1, cfg.adam_beta2, 1e-8, cfg.pose_lr_mult);

  int64_t start_step = 0;
  if (!cfg.resume.empty()) {
    Checkpoint ckpt = load_checkpoint(cfg.resume);
    const uint64_t saved_hash = ckpt.header.extra.value("config_hash", uint64_t{0});
    if (saved_hash != cfg.config_hash()) {
      throw ConfigError("train: refusing to resume, config hash mismatch (checkpoint " +
                        std::to_string(saved_hash) + " vs current " +
                        std::to_string(cfg.config_hash()) + ")");
    }
    LoadedScoreNet loaded = load_score_net(cfg.resume);
    ParamRefs params = net.parameters();
    ParamRefs loaded_params = loaded.net.parameters();
    for (size_t i = 0; i < params.size(); ++i) params[i]->value = loaded_params[i]->value;
    restore_optimizer(ckpt, opt);
    start_step = loaded.step;
  }

  const fs::path log_path = out_dir / "train_log.csv";
  std::ofstream log;
  if (start_step == 0) {
    log.open(log_path, std::ios::trunc);
    log << "step,train_loss,val_loss,wall_time\n";
  } else {
    log.open(log_path, std::ios::app);
  }
  if (!log) throw IoError("train: cannot open " + log_path.string());

  const auto t0 = std::chrono::steady_clock::now();
  json extra{{"config_hash", cfg.config_hash()}, {"canonical_config", cfg.canonical_text}};

  auto ckpt_path = [&](const std::string& tag) {
    return (out_dir / ("checkpoint_" + tag + ".mvb")).string();
  };

  for (int64_t step = start_step; step < cfg.steps; ++step) {
    const uint64_t step_seed = Rng(cfg.seed).derive(0xba7c, static_cast<uint64_t>(step)).seed();
    std::vector<TrainItem> batch = sample_batch(data, "train", cfg.batch_size, cfg.policy, sched,
                                                step_seed, cfg.augment, cfg.null_cond_prob);
    StepResult res;
    try {
      res = training_step(net, batch, sched, opt);
    } catch (const InternalError& e) {
      throw InternalError("train: aborted at step " + std::to_string(step) + ": " + e.what());
    }

    const bool do_val = cfg.val_interval > 0 && ((step + 1) % cfg.val_interval == 0 ||
                                                 step + 1 == cfg.steps);
    double val = std::nan("");
    if (do_val) val = validation_loss(net, data, sched);

    const double wall =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    log << (step + 1) << "," << res.loss << ",";
    if (do_val && std::isfinite(val)) log << val;
    log << "," << wall << "\n";
    log.flush();
    if (do_val) {
      std::cerr << "step " << (step + 1) << " train_loss " << res.loss << " val_loss " << val
                << "\n";
    }

    if (cfg.checkpoint_interval > 0 && (step + 1) % cfg.checkpoint_interval == 0 &&
        step + 1 != cfg.steps) {
      save_score_net(ckpt_path(std::to_string(step + 1)), net, sched, step + 1, cfg.seed,
                     init_seed, &opt, extra);
    }
  }

  const std::string final_path = ckpt_path("final");
  save_score_net(final_path, net, sched, cfg.steps, cfg.seed, init_seed, &opt, extra);
  return final_path;
}

}  // namespace mvb
