#include "trainer.hpp"

#include <filesystem>
#include <fstream>
#include <set>

#include "doctest.h"
#include "errors.hpp"
#include "test_util.hpp"

using namespace mvb;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const std::string& tag) {
  const fs::path p = fs::temp_directory_path() / ("mvb_trainer_" + tag);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

// Small dataset + tiny net shared across the trainer tests.
struct TrainFixture {
  fs::path data_dir = temp_dir("data");
  DatasetCache data;

  TrainFixture() : data(build_dataset(3, 1, 1, 32, data_dir.string())) {}
  ~TrainFixture() { fs::remove_all(data_dir); }
};

std::string tiny_train_cfg(const std::string& data, const std::string& out) {
  return "data = " + data + "\nout = " + out + R"(
steps = 3
batch_size = 2
lr = 1e-4
val_interval = 3
checkpoint_interval = 2
net.base_channels = 8
net.channel_mults = 1,2
net.attention_levels = 1
net.time_embed_width = 32
net.global_feature_width = 24
)";
}

}  // namespace

TEST_CASE("config parser: typed getters, overrides, unknown keys") {
  KvConfig kv = KvConfig::parse_string("a = 3\nb = 0.5 # comment\nflag = true\nlist = 1,2,3\n");
  CHECK(kv.get_int("a", 0) == 3);
  CHECK(kv.get_double("b", 0) == 0.5);
  CHECK(kv.get_bool("flag", false));
  CHECK(kv.get_int_list("list", {}) == std::vector<int>{1, 2, 3});
  kv.reject_unknown();

  KvConfig kv2 = KvConfig::parse_string("known = 1\nmystery = 2\n");
  kv2.get_int("known", 0);
  CHECK_THROWS_AS(kv2.reject_unknown(), ConfigError);

  CHECK_THROWS_AS(KvConfig::parse_string("no equals sign"), ConfigError);
  CHECK_THROWS_AS([&] {
    KvConfig bad = KvConfig::parse_string("a = xyz");
    bad.get_int("a", 0);
  }(), ConfigError);
}

TEST_CASE("checkpoint archive: round trip") {
  const fs::path dir = temp_dir("ckpt");
  Rng rng(3);
  Tensor a = test::random_tensor({4, 3}, rng);
  Tensor b = test::random_tensor({7}, rng);

  CheckpointHeader hdr;
  hdr.kind = "score_net";
  hdr.step = 42;
  hdr.config = {{"x", 1}};
  hdr.seed_lineage = {{"master_seed", 9}};
  save_checkpoint((dir / "c.mvb").string(), hdr, {{"a", &a}, {"b", &b}});

  const Checkpoint ckpt = load_checkpoint((dir / "c.mvb").string());
  CHECK(ckpt.header.kind == "score_net");
  CHECK(ckpt.header.step == 42);
  REQUIRE(ckpt.find("a") != nullptr);
  CHECK(max_abs_diff(*ckpt.find("a"), a) == 0.0);
  CHECK(max_abs_diff(*ckpt.find("b"), b) == 0.0);
  CHECK_THROWS_AS(load_checkpoint((dir / "missing.mvb").string()), IoError);
  fs::remove_all(dir);
}

TEST_CASE("adam: pose-encoder group trains at exactly 10x the base rate") {
  NetworkConfig cfg;
  cfg.base_channels = 8;
  cfg.channel_mults = {1};
  cfg.attention_levels = {0};
  cfg.time_embed_width = 16;
  cfg.global_feature_width = 16;
  cfg.resolution = 8;
  ScoreNet net(cfg, 1);
  Adam opt(net.parameters(), 1e-3);
  int pose_params = 0;
  for (const Param* p : net.parameters()) {
    if (p->pose_group) {
      ++pose_params;
      CHECK(opt.lr_for(*p) == 10.0 * opt.lr());
      CHECK(p->name.rfind("pose_mlp", 0) == 0);
    } else {
      CHECK(opt.lr_for(*p) == opt.lr());
    }
  }
  CHECK(pose_params == 4);  // two linear layers
}

TEST_CASE("eps_mse: zero for a perfect prediction") {
  Rng rng(1);
  const Tensor eps = test::random_tensor({3, 8, 8}, rng);
  CHECK(eps_mse(eps, eps) == 0.0);
}

TEST_CASE("sample_batch: shape, determinism, coverage") {
  TrainFixture fx;
  const DiffusionSchedule sched = default_schedule();
  AugmentationPolicy policy;

  auto batch = sample_batch(fx.data, "train", 2, policy, sched, 7, true, 0.1);
  REQUIRE(batch.size() == 2);
  for (const TrainItem& item : batch) {
    CHECK(item.cond.views.size() == 4);
    CHECK(item.cond.n_active() >= 1);
    CHECK(item.cond.n_active() <= 4);
    CHECK(item.target_rgb.dim(1) == 32);
    // The canonical view never jitters; the others stay within the policy.
    CHECK(item.cond.views[0].pose.rel_azimuth == 0.0);
    CHECK(item.poses[2].rel_azimuth >= 180.0 - policy.jitter_magnitude_deg - 1e-9);
    CHECK(item.poses[2].rel_azimuth <= 180.0 + policy.jitter_magnitude_deg + 1e-9);
  }

  // Without augmentation the conditions are exactly the rig.
  for (const TrainItem& item : sample_batch(fx.data, "train", 2, policy, sched, 7, false, 0.0)) {
    CHECK(item.poses[1].rel_azimuth == 90.0);
    CHECK(item.poses[2].rel_azimuth == 180.0);
    CHECK(item.poses[3].rel_azimuth == 270.0);
  }

  auto batch2 = sample_batch(fx.data, "train", 2, policy, sched, 7, true, 0.1);
  for (size_t i = 0; i < batch.size(); ++i) {
    CHECK(max_abs_diff(batch[i].target_rgb, batch2[i].target_rgb) == 0.0);
    CHECK(batch[i].null_cond == batch2[i].null_cond);
    for (int v = 0; v < 4; ++v) {
      CHECK(max_abs_diff(batch[i].cond.views[static_cast<size_t>(v)].rgb,
                         batch2[i].cond.views[static_cast<size_t>(v)].rgb) == 0.0);
    }
  }

  CHECK_THROWS_AS(sample_batch(fx.data, "nope", 1, policy, sched, 0, false, 0.0), ConfigError);

  // Coupon-collector sweep: every train scene sampled at least once.
  std::set<double> seen;
  for (int s = 0; s < 200; ++s) {
    auto b = sample_batch(fx.data, "train", 1, policy, sched, 1000 + static_cast<uint64_t>(s),
                          false, 0.0);
    seen.insert(b[0].cond.views[1].rgb.sum());
  }
  CHECK(seen.size() == 3);
}

TEST_CASE("training_step: initial loss is about unit variance") {
  TrainFixture fx;
  const DiffusionSchedule sched = default_schedule();
  NetworkConfig net_cfg;
  net_cfg.base_channels = 8;
  net_cfg.channel_mults = {1, 2};
  net_cfg.attention_levels = {1};
  net_cfg.time_embed_width = 32;
  net_cfg.global_feature_width = 24;
  net_cfg.resolution = 32;
  ScoreNet net(net_cfg, 5);
  Adam opt(net.parameters(), 1e-4);

  auto batch = sample_batch(fx.data, "train", 2, AugmentationPolicy{}, sched, 3, false, 0.0);
  const StepResult res = training_step(net, batch, sched, opt);
  // Zero-initialized output head predicts 0, so the loss is E[eps^2] ~ 1.
  CHECK(res.loss > 0.8);
  CHECK(res.loss < 1.2);
  CHECK(res.sampled_t.size() == 2);
  CHECK(opt.step_count() == 1);
}

TEST_CASE("train: zero steps returns the untouched initialization") {
  TrainFixture fx;
  const fs::path out = temp_dir("train0");
  KvConfig kv = KvConfig::parse_string(tiny_train_cfg(fx.data_dir.string(), out.string()));
  TrainConfig cfg = train_config_from_kv(kv);
  kv.reject_unknown();
  cfg.steps = 0;

  const std::string path = train(cfg);
  LoadedScoreNet loaded = load_score_net(path);
  CHECK(loaded.step == 0);

  NetworkConfig net_cfg = cfg.net;
  net_cfg.resolution = 32;
  ScoreNet fresh(net_cfg, loaded.init_seed);
  CHECK(fresh.params_checksum() == loaded.net.params_checksum());
  fs::remove_all(out);
}

TEST_CASE("train: resume reproduces the uninterrupted run") {
  TrainFixture fx;
  const fs::path out_a = temp_dir("train_full");
  const fs::path out_b = temp_dir("train_resume");

  KvConfig kv_a = KvConfig::parse_string(tiny_train_cfg(fx.data_dir.string(), out_a.string()));
  TrainConfig cfg_a = train_config_from_kv(kv_a);
  const std::string full_path = train(cfg_a);

  // Interrupted run: 2 steps (checkpoint_interval = 2), then resume to 3.
  KvConfig kv_b = KvConfig::parse_string(tiny_train_cfg(fx.data_dir.string(), out_b.string()));
  TrainConfig cfg_b = train_config_from_kv(kv_b);
  cfg_b.steps = 2;
  cfg_b.canonical_text = cfg_a.canonical_text;  // same logical config
  train(cfg_b);

  TrainConfig cfg_c = cfg_b;
  cfg_c.steps = 3;
  cfg_c.resume = (out_b / "checkpoint_final.mvb").string();
  const std::string resumed_path = train(cfg_c);

  LoadedScoreNet full = load_score_net(full_path);
  LoadedScoreNet resumed = load_score_net(resumed_path);
  ParamRefs pf = full.net.parameters();
  ParamRefs pr = resumed.net.parameters();
  REQUIRE(pf.size() == pr.size());
  double worst = 0.0;
  for (size_t i = 0; i < pf.size(); ++i) worst = std::max(worst, max_abs_diff(pf[i]->value, pr[i]->value));
  CHECK(worst == 0.0);
  fs::remove_all(out_a);
  fs::remove_all(out_b);
}

TEST_CASE("train: refuses to resume on a config mismatch") {
  TrainFixture fx;
  const fs::path out = temp_dir("train_mismatch");
  KvConfig kv = KvConfig::parse_string(tiny_train_cfg(fx.data_dir.string(), out.string()));
  TrainConfig cfg = train_config_from_kv(kv);
  cfg.steps = 1;
  cfg.checkpoint_interval = 1;
  train(cfg);

  TrainConfig changed = cfg;
  changed.canonical_text += "lr = 9e-9\n";
  changed.resume = (out / "checkpoint_final.mvb").string();
  CHECK_THROWS_AS(train(changed), ConfigError);
  fs::remove_all(out);
}

TEST_CASE("train: loss log is written with the documented columns") {
  TrainFixture fx;
  const fs::path out = temp_dir("train_log");
  KvConfig kv = KvConfig::parse_string(tiny_train_cfg(fx.data_dir.string(), out.string()));
  TrainConfig cfg = train_config_from_kv(kv);
  cfg.steps = 2;
  train(cfg);
  std::ifstream log(out / "train_log.csv");
  std::string header;
  std::getline(log, header);
  CHECK(header == "step,train_loss,val_loss,wall_time");
  int rows = 0;
  std::string line;
  while (std::getline(log, line)) {
    if (!line.empty()) ++rows;
  }
  CHECK(rows == 2);
  CHECK(fs::exists(out / "config_snapshot.cfg"));
  fs::remove_all(out);
}
