#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>

#include "tokensplat/config.hpp"
#include "tokensplat/eval.hpp"
#include "tokensplat/model.hpp"
#include "tokensplat/synth.hpp"
#include "tokensplat/train.hpp"

using namespace tokensplat;
namespace fs = std::filesystem;

namespace {

RunConfig tiny_run_config() {
    RunConfig cfg;
    cfg.model.patch_size = 16;
    cfg.model.embed_dim = 16;
    cfg.model.heads = 2;
    cfg.model.encoder_depth = 1;
    cfg.model.decoder_depth = 2;
    cfg.model.image_h = 32;
    cfg.model.image_w = 32;
    cfg.model.pnv = 3;
    cfg.model.epsilon = 0.3f;
    cfg.model.k_per_token = 2;
    cfg.model.sh_degree = 1;
    cfg.model.fuse_dim = 8;
    cfg.n_views = 2;
    cfg.n_targets = 1;
    cfg.gt_gaussians = 12;
    cfg.steps = 3;
    cfg.checkpoint_every = 2;
    cfg.seed = 5;
    return cfg;
}

fs::path fresh_dir(const std::string& name) {
    const fs::path dir = fs::temp_directory_path() / name;
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

bool file_identical(const fs::path& a, const fs::path& b) {
    std::ifstream fa(a, std::ios::binary), fb(b, std::ios::binary);
    std::string ca((std::istreambuf_iterator<char>(fa)), std::istreambuf_iterator<char>());
    std::string cb((std::istreambuf_iterator<char>(fb)), std::istreambuf_iterator<char>());
    return !ca.empty() && ca == cb;
}

}  // namespace

TEST(Config, ParsesFullFileAndRejectsUnknownKeys) {
    const std::string good =
        "[model]\n"
        "embed_dim = 32\n"
        "heads = 4\n"
        "image_h = 64\n"
        "image_w = 64\n"
        "# comment line\n"
        "[train]\n"
        "lr = 0.002\n"
        "steps = 7\n"
        "seed = 42\n"
        "[dataset]\n"
        "n_views = 4\n"
        "[loss]\n"
        "lambda_c = 0.5\n";
    const RunConfig cfg = parse_run_config_text(good);
    EXPECT_EQ(cfg.model.embed_dim, 32);
    EXPECT_EQ(cfg.model.heads, 4);
    EXPECT_FLOAT_EQ(cfg.lr, 0.002f);
    EXPECT_EQ(cfg.steps, 7);
    EXPECT_EQ(cfg.seed, 42u);
    EXPECT_EQ(cfg.n_views, 4);
    EXPECT_FLOAT_EQ(cfg.model.lambda_c, 0.5f);

    EXPECT_THROW(parse_run_config_text("[model]\nnot_a_key = 3\n"), ConfigError);
    EXPECT_THROW(parse_run_config_text("[bogus]\nembed_dim = 3\n"), ConfigError);
    EXPECT_THROW(parse_run_config_text("[model]\nembed_dim = abc\n"), ConfigError);
    EXPECT_THROW(parse_run_config_text("[model]\nembed_dim 32\n"), ConfigError);
}

TEST(Config, WriteThenParseRoundTrip) {
    RunConfig cfg = tiny_run_config();
    const fs::path dir = fresh_dir("ts_cfg_rt");
    const std::string path = (dir / "c.ini").string();
    write_run_config(cfg, path);
    const RunConfig back = parse_run_config(path);
    EXPECT_EQ(back.model.embed_dim, cfg.model.embed_dim);
    EXPECT_EQ(back.steps, cfg.steps);
    EXPECT_EQ(back.n_views, cfg.n_views);
    EXPECT_FLOAT_EQ(back.model.epsilon, cfg.model.epsilon);
    fs::remove_all(dir);
}

TEST(Synth, DeterministicPerSeed) {
    const RunConfig cfg = tiny_run_config();
    const SyntheticScene a = synth_gen(cfg, 9);
    const SyntheticScene b = synth_gen(cfg, 9);
    ASSERT_EQ(a.gt_scene.size(), b.gt_scene.size());
    for (std::size_t i = 0; i < a.gt_scene.size(); ++i) {
        EXPECT_EQ(a.gt_scene.gaussians[i].center, b.gt_scene.gaussians[i].center);
        EXPECT_EQ(a.gt_scene.gaussians[i].sh, b.gt_scene.gaussians[i].sh);
    }
    ASSERT_EQ(a.images.size(), b.images.size());
    for (std::size_t v = 0; v < a.images.size(); ++v)
        for (std::size_t i = 0; i < a.images[v].data.size(); ++i)
            EXPECT_EQ(a.images[v].data[i], b.images[v].data[i]);
}

TEST(Synth, RejectsSingleView) {
    RunConfig cfg = tiny_run_config();
    cfg.n_views = 1;
    EXPECT_THROW(synth_gen(cfg, 1), ConfigError);
    cfg.n_views = 2;
    EXPECT_NO_THROW(synth_gen(cfg, 1));
}

TEST(Synth, GroundTruthSelfCheckHitsPsnrCap) {
    const RunConfig cfg = tiny_run_config();
    const SyntheticScene scene = synth_gen(cfg, 11);
    for (int v = 0; v < scene.total_views(); ++v) {
        const RenderedImage img =
            render(scene.gt_scene, scene.cam_poses[static_cast<std::size_t>(v)],
                   scene.intrinsics);
        EXPECT_DOUBLE_EQ(psnr(img.pixels, scene.images[static_cast<std::size_t>(v)]), 100.0);
    }
}

TEST(Synth, ReferenceViewIsIdentity) {
    const RunConfig cfg = tiny_run_config();
    const SyntheticScene scene = synth_gen(cfg, 13);
    const Trajectory t = scene.trajectory();
    EXPECT_DOUBLE_EQ(t[0].rotation.w, 1.0);
    EXPECT_DOUBLE_EQ(t[0].translation.norm(), 0.0);
}

TEST(Synth, SaveLoadRoundTrip) {
    const RunConfig cfg = tiny_run_config();
    const SyntheticScene scene = synth_gen(cfg, 17);
    const fs::path dir = fresh_dir("ts_scene_rt");
    save_scene(scene, dir.string());
    const SyntheticScene back = load_scene(dir.string());
    EXPECT_EQ(back.n_input_views, scene.n_input_views);
    EXPECT_EQ(back.n_target_views, scene.n_target_views);
    EXPECT_EQ(back.gt_scene.size(), scene.gt_scene.size());
    for (std::size_t v = 0; v < scene.images.size(); ++v)
        for (std::size_t i = 0; i < scene.images[v].data.size(); ++i)
            EXPECT_EQ(back.images[v].data[i], scene.images[v].data[i]);
    for (std::size_t v = 0; v < scene.cam_poses.size(); ++v)
        EXPECT_LT((back.cam_poses[v].translation - scene.cam_poses[v].translation).norm(),
                  1e-15);
    fs::remove_all(dir);
}

TEST(Train, ZeroStepsKeepsInitialization) {
    RunConfig cfg = tiny_run_config();
    cfg.steps = 0;
    const SyntheticScene scene = synth_gen(cfg, 19);
    const fs::path dir = fresh_dir("ts_train0");
    const TrainResult result = train(cfg, scene, dir.string());
    // final checkpoint must equal the step-0 checkpoint bit for bit
    EXPECT_TRUE(file_identical(dir / "checkpoint.bin", dir / "checkpoint_000000.bin"));
    EXPECT_EQ(result.steps_run, 0);
    fs::remove_all(dir);
}

TEST(Train, StepsRunLossesLoggedAndFinite) {
    RunConfig cfg = tiny_run_config();
    const SyntheticScene scene = synth_gen(cfg, 23);
    const fs::path dir = fresh_dir("ts_train3");
    const TrainResult result = train(cfg, scene, dir.string());
    EXPECT_EQ(result.steps_run, cfg.steps);
    ASSERT_EQ(result.records.size(), static_cast<std::size_t>(cfg.steps));
    for (const auto& r : result.records) {
        EXPECT_TRUE(std::isfinite(r.losses.total));
        EXPECT_GE(r.losses.l_render, 0.0);
        EXPECT_GE(r.losses.l_pose, 0.0);
        EXPECT_NO_THROW(r.losses.check_invariant());
    }
    // JSONL log exists with one record per step
    std::ifstream log(result.log_path);
    int lines = 0;
    std::string line;
    while (std::getline(log, line))
        if (!line.empty()) ++lines;
    EXPECT_EQ(lines, cfg.steps);
    fs::remove_all(dir);
}

TEST(Train, GradAuditPassesInDebugMode) {
    RunConfig cfg = tiny_run_config();
    cfg.steps = 1;
    const SyntheticScene scene = synth_gen(cfg, 43);
    const fs::path dir = fresh_dir("ts_audit");
    setenv("TOKENSPLAT_GRAD_AUDIT", "1", 1);
    EXPECT_NO_THROW(train(cfg, scene, dir.string()));
    unsetenv("TOKENSPLAT_GRAD_AUDIT");
    fs::remove_all(dir);
}

TEST(Images, PpmRoundTripWithinQuantization) {
    Rng rng(47);
    Image img(9, 7);
    for (auto& v : img.data) v = rng.uniform01();
    const fs::path dir = fresh_dir("ts_ppm");
    const std::string path = (dir / "img.ppm").string();
    write_ppm(img, path);
    const Image back = read_ppm(path);
    ASSERT_EQ(back.width, img.width);
    ASSERT_EQ(back.height, img.height);
    for (std::size_t i = 0; i < img.data.size(); ++i)
        EXPECT_NEAR(back.data[i], img.data[i], 0.5f / 255.0f + 1e-6f);
    fs::remove_all(dir);
}

TEST(Train, DeterministicAcrossRuns) {
    RunConfig cfg = tiny_run_config();
    const SyntheticScene scene = synth_gen(cfg, 29);
    const fs::path d1 = fresh_dir("ts_det1");
    const fs::path d2 = fresh_dir("ts_det2");
    const TrainResult r1 = train(cfg, scene, d1.string());
    const TrainResult r2 = train(cfg, scene, d2.string());
    ASSERT_EQ(r1.records.size(), r2.records.size());
    for (std::size_t i = 0; i < r1.records.size(); ++i)
        EXPECT_EQ(r1.records[i].losses.total, r2.records[i].losses.total);
    EXPECT_TRUE(file_identical(d1 / "checkpoint.bin", d2 / "checkpoint.bin"));
    fs::remove_all(d1);
    fs::remove_all(d2);
}

TEST(Train, NanLossAbortsWithDiagnosticsAndLastGoodCheckpoint) {
    RunConfig cfg = tiny_run_config();
    // Large enough that the squared pose-translation error overflows float32
    // on the step after the first update.
    cfg.lr = 1e20f;
    cfg.steps = 5;
    cfg.checkpoint_every = 1;
    const SyntheticScene scene = synth_gen(cfg, 53);
    const fs::path dir = fresh_dir("ts_nan");
    EXPECT_THROW(train(cfg, scene, dir.string()), Error);
    EXPECT_TRUE(fs::exists(dir / "nan_abort.json"));
    EXPECT_TRUE(fs::exists(dir / "checkpoint_000000.bin"));
    fs::remove_all(dir);
}

TEST(Eval, GtSceneHitsUpperBounds) {
    const RunConfig cfg = tiny_run_config();
    const SyntheticScene scene = synth_gen(cfg, 31);
    const NvsResult nvs = eval_nvs_gt(scene);
    EXPECT_DOUBLE_EQ(nvs.mean_psnr, 100.0);
    EXPECT_NEAR(nvs.mean_ssim, 1.0, 1e-12);
    const PoseEvalResult pose = eval_pose_gt(scene);
    EXPECT_NEAR(pose.ate_val, 0.0, 1e-12);
    EXPECT_NEAR(pose.rpe_r_deg, 0.0, 1e-9);
}

TEST(Eval, DeterministicAcrossCalls) {
    const RunConfig cfg = tiny_run_config();
    const SyntheticScene scene = synth_gen(cfg, 37);
    TokenSplatModel model(cfg.model, cfg.seed);
    const NvsResult a = eval_nvs(model, scene);
    const NvsResult b = eval_nvs(model, scene);
    EXPECT_EQ(a.mean_psnr, b.mean_psnr);
    EXPECT_EQ(a.mean_ssim, b.mean_ssim);
    const PoseEvalResult pa = eval_pose(model, scene);
    const PoseEvalResult pb = eval_pose(model, scene);
    EXPECT_EQ(pa.rpe_r_deg, pb.rpe_r_deg);
}

TEST(Eval, ExportImportRenderRoundTripBitExact) {
    const RunConfig cfg = tiny_run_config();
    const SyntheticScene scene = synth_gen(cfg, 41);
    TokenSplatModel model(cfg.model, cfg.seed);
    const ModelOutput out = model.forward(scene.input_views());
    const GaussianScene pred = model.materialize_scene(out);

    const fs::path dir = fresh_dir("ts_rt");
    const std::string ply = (dir / "pred.ply").string();
    export_ply(pred, ply);
    const GaussianScene back = import_ply(ply);

    const RenderedImage a = render(pred, scene.cam_poses[1], scene.intrinsics);
    const RenderedImage b = render(back, scene.cam_poses[1], scene.intrinsics);
    ASSERT_EQ(a.pixels.data.size(), b.pixels.data.size());
    for (std::size_t i = 0; i < a.pixels.data.size(); ++i)
        EXPECT_EQ(a.pixels.data[i], b.pixels.data[i]);
    fs::remove_all(dir);
}

TEST(Eval, CountScalingRowsHaveExpectedShape) {
    RunConfig cfg = tiny_run_config();
    cfg.overlap = 0.9f;
    TokenSplatModel model(cfg.model, cfg.seed);
    const CountRow row = count_scaling_row(cfg, model, 3);
    EXPECT_EQ(row.n_views, 3);
    EXPECT_EQ(row.pixel_aligned_gaussians,
              3LL * cfg.model.tokens_per_view() * cfg.model.k_per_token);
    EXPECT_EQ(row.fused_gaussians, row.fused_tokens * cfg.model.k_per_token);
    EXPECT_LE(row.fused_tokens, row.input_tokens);
}

#ifdef TOKENSPLAT_CLI
namespace {

int run_cli(const std::string& args) {
    const std::string cmd = std::string(TOKENSPLAT_CLI) + " " + args + " >/dev/null 2>&1";
    return std::system(cmd.c_str());
}

}  // namespace

TEST(Cli, EndToEndSmoke) {
    const fs::path dir = fresh_dir("ts_cli");
    RunConfig cfg = tiny_run_config();
    const std::string cfg_path = (dir / "run.ini").string();
    write_run_config(cfg, cfg_path);

    ASSERT_EQ(run_cli("synth-gen --config " + cfg_path + " --out " + dir.string()), 0);
    ASSERT_TRUE(fs::exists(dir / "scene" / "manifest.json"));
    ASSERT_EQ(run_cli("train --config " + cfg_path + " --out " + dir.string()), 0);
    ASSERT_TRUE(fs::exists(dir / "checkpoint.bin"));
    ASSERT_EQ(run_cli("eval-nvs --config " + cfg_path + " --scene " + (dir / "scene").string() +
                      " --checkpoint " + (dir / "checkpoint.bin").string() + " --out " +
                      dir.string()),
              0);
    ASSERT_TRUE(fs::exists(dir / "nvs_metrics.csv"));
    ASSERT_EQ(run_cli("eval-pose --config " + cfg_path + " --scene " + (dir / "scene").string() +
                      " --checkpoint " + (dir / "checkpoint.bin").string() + " --out " +
                      dir.string()),
              0);
    ASSERT_EQ(run_cli("render --config " + cfg_path + " --scene " + (dir / "scene").string() +
                      " --checkpoint " + (dir / "checkpoint.bin").string() +
                      " --pose \"1 0 0 0 0 0 0\" --out " + (dir / "novel.ppm").string()),
              0);
    ASSERT_TRUE(fs::exists(dir / "novel.ppm"));
    ASSERT_TRUE(fs::exists(dir / "novel.f32"));
    // scene-level viewpoint: camera pulled far back from the cloud
    ASSERT_EQ(run_cli("render --config " + cfg_path + " --scene " + (dir / "scene").string() +
                      " --checkpoint " + (dir / "checkpoint.bin").string() +
                      " --pose \"1 0 0 0 0 0.5 -3\" --out " + (dir / "pulled_back.ppm").string()),
              0);
    ASSERT_TRUE(fs::exists(dir / "pulled_back.ppm"));
    ASSERT_EQ(run_cli("export-ply --config " + cfg_path + " --scene " + (dir / "scene").string() +
                      " --checkpoint " + (dir / "checkpoint.bin").string() + " --out " +
                      (dir / "pred.ply").string()),
              0);
    ASSERT_TRUE(fs::exists(dir / "pred.ply"));
    fs::remove_all(dir);
}

TEST(Cli, ErrorsExitNonzeroWithReason) {
    const fs::path dir = fresh_dir("ts_cli_err");
    // missing config file
    EXPECT_NE(run_cli("synth-gen --config /nonexistent.ini --out " + dir.string()), 0);
    // bad pose text
    RunConfig cfg = tiny_run_config();
    const std::string cfg_path = (dir / "run.ini").string();
    write_run_config(cfg, cfg_path);
    ASSERT_EQ(run_cli("synth-gen --config " + cfg_path + " --out " + dir.string()), 0);
    ASSERT_EQ(run_cli("train --config " + cfg_path + " --out " + dir.string()), 0);
    EXPECT_NE(run_cli("render --config " + cfg_path + " --scene " + (dir / "scene").string() +
                      " --checkpoint " + (dir / "checkpoint.bin").string() +
                      " --pose \"1 0 junk\" --out " + (dir / "x.ppm").string()),
              0);
    fs::remove_all(dir);
}
#endif
