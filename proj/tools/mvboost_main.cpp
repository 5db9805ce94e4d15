// mvboost: procedural data generation, multi-view conditioned diffusion
// training, novel-view synthesis, and radiance-field boosting in one binary.
//
// Exit codes: 0 success, 2 usage error, 3 config error, 4 I/O error,
// 5 invalid argument, 6 internal error.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <random>

#include "CLI11.hpp"
#include "boost.hpp"
#include "errors.hpp"
#include "evaluate.hpp"
#include "image_io.hpp"
#include "json.hpp"
#include "trainer.hpp"

namespace fs = std::filesystem;
using namespace mvb;
using nlohmann::json;

namespace {

uint64_t resolve_seed(int64_t seed_flag) {
  if (seed_flag >= 0) return static_cast<uint64_t>(seed_flag);
  std::random_device rd;
  const uint64_t seed = (static_cast<uint64_t>(rd()) << 32) ^ rd();
  std::cout << "seed " << seed << "\n";
  return seed;
}

void write_snapshot(const std::string& out_dir, const std::string& name, const json& j) {
  fs::create_directories(out_dir);
  std::ofstream snap(fs::path(out_dir) / name);
  if (!snap) throw IoError("cannot write config snapshot in " + out_dir);
  snap << j.dump(2) << "\n";
}

std::string default_data_root() {
  const char* env = std::getenv("MVBOOST_DATA_ROOT");
  return env ? env : "";
}

// "path@azimuth[@elevation]" entries, comma separated.
std::vector<ViewImage> parse_view_list(const std::string& arg, double elevation, double radius) {
  std::vector<ViewImage> views;
  std::stringstream ss(arg);
  std::string item;
  while (std::getline(ss, item, ',')) {
    const size_t at = item.find('@');
    if (at == std::string::npos) {
      throw InvalidArgument("view list entries must look like path@azimuth: " + item);
    }
    const std::string path = item.substr(0, at);
    std::string rest = item.substr(at + 1);
    double az = 0.0, el = elevation;
    const size_t at2 = rest.find('@');
    try {
      if (at2 == std::string::npos) {
        az = std::stod(rest);
      } else {
        az = std::stod(rest.substr(0, at2));
        el = std::stod(rest.substr(at2 + 1));
      }
    } catch (...) {
      throw InvalidArgument("bad azimuth in view entry: " + item);
    }
    ViewImage v;
    v.rgb = read_png(path);
    v.pose = pose_from_relative_azimuth(az, el, radius);
    v.mask = estimate_mask(v.rgb);
    views.push_back(std::move(v));
  }
  return views;
}

BoostConfig boost_config_from_flags(int steps, int interval, int denoise_steps, double lr,
                                    uint64_t seed) {
  BoostConfig cfg;
  if (steps >= 0) cfg.total_steps = steps;
  if (interval >= 0) cfg.anchor_update_interval = interval;
  if (denoise_steps > 0) cfg.denoise_steps = denoise_steps;
  if (lr > 0) cfg.field_lr = lr;
  cfg.seed = seed;
  return cfg;
}

int run(int argc, char** argv) {
  CLI::App app{"multi-view conditioned diffusion + radiance-field boosting"};
  app.require_subcommand(1);
  app.footer(
      "Exit codes: 0 ok, 2 usage, 3 config-error, 4 io-error, 5 invalid-argument,\n"
      "6 internal-error. MVBOOST_DATA_ROOT provides the default --data.");

  // --- gen-data ---------------------------------------------------------
  auto* gen = app.add_subcommand("gen-data", "render a procedural dataset");
  int gd_scenes = 8, gd_val = -1, gd_test = -1, gd_resolution = 32;
  int64_t gd_seed = -1;
  std::string gd_out;
  gen->add_option("--scenes", gd_scenes, "train scenes")->check(CLI::PositiveNumber);
  gen->add_option("--val-scenes", gd_val, "validation scenes (default scenes/4+1)");
  gen->add_option("--test-scenes", gd_test, "test scenes (default scenes/4+1)");
  gen->add_option("--resolution", gd_resolution, "image resolution (32 or 64)");
  gen->add_option("--out", gd_out, "output directory")->required();
  gen->add_option("--seed", gd_seed, "scene seed base (random when omitted)");

  // --- train -------------------------------------------------------------
  auto* tr = app.add_subcommand("train", "train the score network");
  std::string tr_config, tr_data, tr_out, tr_resume;
  std::vector<std::string> tr_sets;
  tr->add_option("--config", tr_config, "key = value config file");
  tr->add_option("--data", tr_data, "dataset directory (overrides config)");
  tr->add_option("--out", tr_out, "output directory (overrides config)");
  tr->add_option("--resume", tr_resume, "checkpoint to resume from");
  tr->add_option("--set", tr_sets, "extra key=value overrides (repeatable)");

  // --- synth -------------------------------------------------------------
  auto* sy = app.add_subcommand("synth", "sample a novel view from input views");
  std::string sy_ckpt, sy_views, sy_out;
  double sy_azimuth = 90.0, sy_elevation = 0.0, sy_radius = 2.0;
  int sy_steps = 25;
  int64_t sy_seed = -1;
  double sy_guidance = 1.0;
  sy->add_option("--checkpoint", sy_ckpt)->required();
  sy->add_option("--input-views", sy_views, "comma list of path@azimuth")->required();
  sy->add_option("--target-azimuth", sy_azimuth)->required();
  sy->add_option("--target-elevation", sy_elevation);
  sy->add_option("--radius", sy_radius);
  sy->add_option("--steps", sy_steps, "denoiser steps");
  sy->add_option("--guidance", sy_guidance, "classifier-free guidance scale");
  sy->add_option("--out", sy_out, "output PNG path")->required();
  sy->add_option("--seed", sy_seed);

  // --- boost -------------------------------------------------------------
  auto* bo = app.add_subcommand("boost", "refine a coarse field with SDS");
  std::string bo_ckpt, bo_input, bo_views, bo_mode, bo_out, bo_field;
  int64_t bo_scene_seed = -1, bo_seed = -1;
  int bo_steps = -1, bo_interval = -1, bo_denoise = -1, bo_coarse_steps = 1000;
  double bo_lr = -1, bo_guidance = 1.0;
  bo->add_option("--checkpoint", bo_ckpt)->required();
  bo->add_option("--input-image", bo_input, "canonical view PNG (mode B)");
  bo->add_option("--pseudo-views", bo_views, "comma list of path@azimuth (explicit rig)");
  bo->add_option("--pseudo-mode", bo_mode, "A (corrupted GT rig) or B (model samples)");
  bo->add_option("--scene-seed", bo_scene_seed, "scene for mode A / metrics");
  bo->add_option("--field", bo_field, "start from this field checkpoint instead of a coarse fit");
  bo->add_option("--coarse-steps", bo_coarse_steps, "coarse reconstruction steps");
  bo->add_option("--steps", bo_steps, "boost steps");
  bo->add_option("--anchor-interval", bo_interval);
  bo->add_option("--denoise-steps", bo_denoise);
  bo->add_option("--lr", bo_lr);
  bo->add_option("--guidance", bo_guidance);
  bo->add_option("--out", bo_out)->required();
  bo->add_option("--seed", bo_seed);

  // --- eval --------------------------------------------------------------
  auto* ev = app.add_subcommand("eval", "novel-view-synthesis metrics");
  std::string ev_ckpt, ev_data, ev_out;
  int ev_views = 4, ev_steps = 25, ev_max_scenes = 0;
  int64_t ev_seed = -1;
  bool ev_corrupt = false;
  ev->add_option("--checkpoint", ev_ckpt)->required();
  ev->add_option("--data", ev_data, "dataset directory");
  ev->add_option("--views", ev_views, "condition view count: 1, 2 or 4");
  ev->add_option("--sampler-steps", ev_steps);
  ev->add_option("--max-scenes", ev_max_scenes);
  ev->add_flag("--corrupt-conditions", ev_corrupt, "apply mode-A corruption to conditions");
  ev->add_option("--out", ev_out)->required();
  ev->add_option("--seed", ev_seed);

  // --- ablate -------------------------------------------------------------
  auto* ab = app.add_subcommand("ablate", "paired ablation runs");
  std::string ab_config, ab_out;
  ab->add_option("--config", ab_config, "key = value ablation config")->required();
  ab->add_option("--out", ab_out)->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;  // usage error
  }

  if (*gen) {
    const uint64_t seed = resolve_seed(gd_seed);
    if (gd_val < 0) gd_val = gd_scenes / 4 + 1;
    if (gd_test < 0) gd_test = gd_scenes / 4 + 1;
    write_snapshot(gd_out, "config_snapshot.json",
                   {{"command", "gen-data"},
                    {"scenes", gd_scenes},
                    {"val_scenes", gd_val},
                    {"test_scenes", gd_test},
                    {"resolution", gd_resolution},
                    {"seed", seed}});
    const DatasetManifest m =
        build_dataset(gd_scenes, gd_val, gd_test, gd_resolution, gd_out, seed);
    std::cout << "wrote " << m.scenes.size() << " scenes to " << gd_out << "\n";
    return 0;
  }

  if (*tr) {
    KvConfig kv = tr_config.empty() ? KvConfig{} : KvConfig::parse_file(tr_config);
    if (!tr_data.empty()) kv.set("data", tr_data);
    if (tr_data.empty() && !kv.has("data") && !default_data_root().empty()) {
      kv.set("data", default_data_root());
    }
    if (!tr_out.empty()) kv.set("out", tr_out);
    if (!tr_resume.empty()) kv.set("resume", tr_resume);
    for (const std::string& kvpair : tr_sets) {
      const size_t eq = kvpair.find('=');
      if (eq == std::string::npos) throw ConfigError("--set expects key=value, got " + kvpair);
      kv.set(kvpair.substr(0, eq), kvpair.substr(eq + 1));
    }
    const TrainConfig cfg = train_config_from_kv(kv);
    kv.reject_unknown();
    const std::string final_path = train(cfg);
    std::cout << "checkpoint " << final_path << "\n";
    return 0;
  }

  if (*sy) {
    const uint64_t seed = resolve_seed(sy_seed);
    LoadedScoreNet loaded = load_score_net(sy_ckpt);
    const std::vector<ViewImage> views = parse_view_list(sy_views, 0.0, sy_radius);
    check_arg(!views.empty(), "synth: no input views");

    ConditionSet cond;
    std::vector<CameraPose> poses;
    for (const ViewImage& v : views) {
      cond.views.push_back(v);
      cond.labels.push_back(1.0);
      cond.drop_mask.push_back(false);
      poses.push_back(v.pose);
    }
    const ScoreNetDenoiser denoiser(loaded.net, sy_guidance);
    const FeatureCache cache = denoiser.extract(cond, poses);
    const CameraPose target = pose_from_relative_azimuth(sy_azimuth, sy_elevation, sy_radius);

    const int res = loaded.net.config().resolution;
    Rng rng = Rng(seed).derive(0x5a317);
    Tensor x({3, res, res});
    for (int64_t i = 0; i < x.size(); ++i) x[i] = rng.normal();
    const ScoreFn model = [&](const Tensor& xt, int t) {
      return denoiser.predict(xt, t, target, cache);
    };
    const Tensor out = multi_step_denoise(model, x, loaded.sched.horizon - 1, sy_steps,
                                          loaded.sched);
    if (fs::path(sy_out).has_parent_path()) fs::create_directories(fs::path(sy_out).parent_path());
    write_png(sy_out, out);
    std::cout << "wrote " << sy_out << "\n";
    return 0;
  }

  if (*bo) {
    const uint64_t seed = resolve_seed(bo_seed);
    LoadedScoreNet loaded = load_score_net(bo_ckpt);
    const ScoreNetDenoiser denoiser(loaded.net, bo_guidance);
    const int res = loaded.net.config().resolution;

    write_snapshot(bo_out, "config_snapshot.json",
                   {{"command", "boost"},
                    {"checkpoint", bo_ckpt},
                    {"pseudo_mode", bo_mode},
                    {"scene_seed", bo_scene_seed},
                    {"steps", bo_steps},
                    {"coarse_steps", bo_coarse_steps},
                    {"guidance", bo_guidance},
                    {"seed", seed}});

    ConditionSet pseudo;
    if (!bo_views.empty()) {
      const std::vector<ViewImage> views = parse_view_list(bo_views, 0.0, 2.0);
      check_arg(views.size() == 4, "boost: --pseudo-views needs exactly four entries");
      for (size_t i = 0; i < views.size(); ++i) {
        pseudo.views.push_back(views[i]);
        pseudo.labels.push_back(i == 0 ? 1.0 : 0.5);
        pseudo.drop_mask.push_back(false);
      }
    } else if (bo_mode == "A") {
      check_arg(bo_scene_seed >= 0, "boost: --pseudo-mode A needs --scene-seed");
      const SceneSpec scene = sample_scene(static_cast<uint64_t>(bo_scene_seed));
      const ViewRig rig = orthogonal_rig(0.0, 2.0);
      std::vector<ViewImage> gt;
      for (const CameraPose& p : rig.poses) gt.push_back(render_view(scene, p, res));
      pseudo = pseudo_views_mode_a(gt, AugmentationPolicy{}, loaded.sched,
                                   Rng(seed).derive(0xa).seed());
    } else if (bo_mode == "B") {
      check_arg(!bo_input.empty(), "boost: --pseudo-mode B needs --input-image");
      ViewImage v0;
      v0.rgb = read_png(bo_input);
      v0.pose = pose_from_relative_azimuth(0.0, 0.0, 2.0);
      v0.mask = estimate_mask(v0.rgb);
      pseudo = pseudo_views_mode_b(v0, denoiser, loaded.sched, 25, Rng(seed).derive(0xb).seed());
    } else {
      throw ConfigError("boost: provide --pseudo-views or --pseudo-mode A|B");
    }

    RadianceField field = bo_field.empty()
                              ? coarse_reconstruct(pseudo.views, bo_coarse_steps,
                                                   Rng(seed).derive(0xc0a).seed())
                              : load_field(bo_field);
    BoostConfig cfg = boost_config_from_flags(bo_steps, bo_interval, bo_denoise, bo_lr,
                                              Rng(seed).derive(0xb00).seed());
    const BoostReport report = boost(field, pseudo, cfg, denoiser, loaded.sched, bo_out);
    save_field((fs::path(bo_out) / "field_boosted.mvb").string(), field, seed);

    json metrics{{"saturation_before", report.saturation_before},
                 {"saturation_after", report.saturation_after},
                 {"skipped_sds_steps", report.skipped_sds_steps},
                 {"steps", report.steps}};
    if (bo_scene_seed >= 0) {
      const SceneSpec scene = sample_scene(static_cast<uint64_t>(bo_scene_seed));
      metrics["held_out_psnr_after"] = held_out_view_psnr(field, scene, res, cfg.render_samples);
    }
    std::ofstream mfile(fs::path(bo_out) / "metrics.json");
    mfile << metrics.dump(2) << "\n";
    std::cout << "boosted field in " << bo_out << "\n";
    return 0;
  }

  if (*ev) {
    const uint64_t seed = resolve_seed(ev_seed);
    if (ev_data.empty()) ev_data = default_data_root();
    check_arg(!ev_data.empty(), "eval: no --data and MVBOOST_DATA_ROOT is unset");
    write_snapshot(ev_out, "config_snapshot.json",
                   {{"command", "eval"},
                    {"checkpoint", ev_ckpt},
                    {"data", ev_data},
                    {"views", ev_views},
                    {"sampler_steps", ev_steps},
                    {"max_scenes", ev_max_scenes},
                    {"corrupt_conditions", ev_corrupt},
                    {"seed", seed}});

    LoadedScoreNet loaded = load_score_net(ev_ckpt);
    const ScoreNetDenoiser denoiser(loaded.net);
    const DatasetManifest manifest =
        load_manifest((fs::path(ev_data) / "manifest.json").string());

    NvsConfig cfg;
    cfg.n_condition_views = ev_views;
    cfg.sampler_steps = ev_steps;
    cfg.seed = seed;
    cfg.max_scenes = ev_max_scenes;
    cfg.corrupt_conditions = ev_corrupt;
    const NvsTable table = eval_nvs(denoiser, loaded.sched, manifest, cfg);

    std::ofstream csv(fs::path(ev_out) / "nvs_metrics.csv");
    csv << table.to_csv();
    std::ofstream md(fs::path(ev_out) / "nvs_metrics.md");
    md << table.to_markdown();
    std::ofstream js(fs::path(ev_out) / "nvs_metrics.json");
    js << table.to_json().dump(2) << "\n";
    std::cout << "views " << ev_views << " mean_psnr " << table.mean_psnr << " mean_ssim "
              << table.mean_ssim << "\n";
    return 0;
  }

  if (*ab) {
    KvConfig kv = KvConfig::parse_file(ab_config);
    const std::string aug_ckpt = kv.require_string("aug_checkpoint");
    const std::string noaug_ckpt = kv.require_string("noaug_checkpoint");
    const std::string data = kv.get_string("data", default_data_root());
    const uint64_t seed = static_cast<uint64_t>(kv.get_int("seed", 0));
    const int max_scenes = static_cast<int>(kv.get_int("max_scenes", 8));
    const int sampler_steps = static_cast<int>(kv.get_int("sampler_steps", 10));
    const int boost_steps = static_cast<int>(kv.get_int("boost_steps", 400));
    const int boost_scenes = static_cast<int>(kv.get_int("boost_scenes", 6));
    kv.reject_unknown();
    check_arg(!data.empty(), "ablate: no data directory configured");

    write_snapshot(ab_out, "config_snapshot.json",
                   {{"command", "ablate"}, {"config", kv.canonical()}, {"seed", seed}});

    LoadedScoreNet aug = load_score_net(aug_ckpt);
    LoadedScoreNet noaug = load_score_net(noaug_ckpt);
    const ScoreNetDenoiser aug_d(aug.net);
    const ScoreNetDenoiser noaug_d(noaug.net);
    const DatasetManifest manifest = load_manifest((fs::path(data) / "manifest.json").string());

    json report;

    {  // (a) augmentation ablation on corrupted conditions
      NvsConfig cfg;
      cfg.n_condition_views = 4;
      cfg.sampler_steps = sampler_steps;
      cfg.seed = seed;
      cfg.max_scenes = max_scenes;
      cfg.corrupt_conditions = true;
      cfg.corruption_policy.corruption_prob = 1.0;
      const NvsTable with_aug = eval_nvs(aug_d, aug.sched, manifest, cfg);
      const NvsTable without_aug = eval_nvs(noaug_d, noaug.sched, manifest, cfg);
      int wins = 0;
      for (size_t i = 0; i < with_aug.rows.size(); ++i) {
        if (with_aug.rows[i].psnr > without_aug.rows[i].psnr) ++wins;
      }
      report["augmentation"] = {
          {"aug_mean_psnr", with_aug.mean_psnr},
          {"noaug_mean_psnr", without_aug.mean_psnr},
          {"wins", wins},
          {"scenes", with_aug.rows.size()},
          {"sign_test_p", sign_test_p(wins, static_cast<int>(with_aug.rows.size()))}};
    }

    {  // (b) anchor-update ablation: saturation with vs without AIU
      int sat_wins = 0, psnr_reg = 0;
      json rows = json::array();
      const std::vector<const SceneEntry*> test = manifest.split("test");
      const int n = std::min<int>(boost_scenes, static_cast<int>(test.size()));
      for (int s = 0; s < n; ++s) {
        const uint64_t scene_seed = test[static_cast<size_t>(s)]->seed;
        const SceneSpec scene = sample_scene(scene_seed);
        const ViewRig rig = orthogonal_rig(0.0, 2.0);
        std::vector<ViewImage> gt;
        for (const CameraPose& p : rig.poses) {
          gt.push_back(render_view(scene, p, manifest.resolution));
        }
        const ConditionSet pseudo = pseudo_views_mode_a(
            gt, AugmentationPolicy{}, aug.sched, Rng(seed).derive(scene_seed).seed());

        BoostConfig bcfg;
        bcfg.total_steps = boost_steps;
        bcfg.anchor_update_interval = std::max(1, boost_steps / 4);
        bcfg.seed = Rng(seed).derive(0xa1b, scene_seed).seed();
        RadianceField base = coarse_reconstruct(pseudo.views, 600, bcfg.seed);

        RadianceField with_aiu = base;
        const BoostReport r1 = boost(with_aiu, pseudo, bcfg, aug_d, aug.sched);
        BoostConfig no_aiu_cfg = bcfg;
        no_aiu_cfg.anchor_mse_weight = 0.0;
        no_aiu_cfg.anchor_update_interval = 0;
        RadianceField without_aiu = base;
        const BoostReport r2 = boost(without_aiu, pseudo, no_aiu_cfg, aug_d, aug.sched);

        const double p1 = held_out_view_psnr(with_aiu, scene, manifest.resolution, 32);
        const double p2 = held_out_view_psnr(without_aiu, scene, manifest.resolution, 32);
        if (r1.saturation_after <= r2.saturation_after) ++sat_wins;
        if (p1 < p2 - 0.2) ++psnr_reg;
        rows.push_back({{"scene", scene_seed},
                        {"sat_aiu", r1.saturation_after},
                        {"sat_plain", r2.saturation_after},
                        {"psnr_aiu", p1},
                        {"psnr_plain", p2}});
      }
      report["anchor_update"] = {{"rows", rows},
                                 {"saturation_wins", sat_wins},
                                 {"psnr_regressions", psnr_reg},
                                 {"scenes", n}};
    }

    fs::create_directories(ab_out);
    std::ofstream out(fs::path(ab_out) / "ablation_report.json");
    out << report.dump(2) << "\n";
    std::cout << "ablation report in " << ab_out << "\n";
    return 0;
  }

  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run(argc, argv);
  } catch (const ConfigError& e) {
    std::cerr << "error: " << ConfigError::kClass << ": " << e.what() << "\n";
    return 3;
  } catch (const IoError& e) {
    std::cerr << "error: " << IoError::kClass << ": " << e.what() << "\n";
    return 4;
  } catch (const InvalidArgument& e) {
    std::cerr << "error: " << InvalidArgument::kClass << ": " << e.what() << "\n";
    return 5;
  } catch (const std::exception& e) {
    std::cerr << "error: " << InternalError::kClass << ": " << e.what() << "\n";
    return 6;
  }
}
