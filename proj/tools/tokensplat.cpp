// tokensplat command line: synthetic data generation, training, evaluation,
// rendering and PLY export. Every subcommand exits nonzero with a single
// `error: ...` line on stderr when something goes wrong.

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <string>

#include "tokensplat/config.hpp"
#include "tokensplat/eval.hpp"
#include "tokensplat/model.hpp"
#include "tokensplat/synth.hpp"
#include "tokensplat/train.hpp"

namespace fs = std::filesystem;
using namespace tokensplat;

namespace {

struct CommonArgs {
    std::string config_path;
    std::string out_dir = ".";
    std::uint64_t seed = 0;
    bool seed_set = false;
};

RunConfig load_config(const CommonArgs& args) {
    RunConfig cfg = parse_run_config(args.config_path);
    if (args.seed_set) cfg.seed = args.seed;
    return cfg;
}

void add_common(CLI::App* cmd, CommonArgs& args, bool needs_out = true) {
    cmd->add_option("--config", args.config_path, "run configuration file")->required();
    cmd->add_option("--seed", args.seed, "override the config seed")
        ->each([&args](const std::string&) { args.seed_set = true; });
    if (needs_out) cmd->add_option("--out", args.out_dir, "output directory");
}

SyntheticScene obtain_scene(const RunConfig& cfg, const std::string& scene_dir,
                            bool generate_if_missing) {
    if (scene_exists(scene_dir)) return load_scene(scene_dir);
    if (!generate_if_missing) throw Error("no scene found in " + scene_dir);
    SyntheticScene scene = synth_gen(cfg, cfg.seed);
    save_scene(scene, scene_dir);
    return scene;
}

TokenSplatModel load_model(const RunConfig& cfg, const std::string& checkpoint) {
    TokenSplatModel model(cfg.model, cfg.seed);
    model.params().load(checkpoint);
    return model;
}

void print_stats(const ForwardStats& stats) {
    std::printf("stats input_tokens=%d fused_tokens=%d gaussians=%d\n", stats.input_tokens,
                stats.fused_tokens, stats.gaussians);
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"feed-forward pose-free Gaussian splatting pipeline"};
    app.require_subcommand(1);

    CommonArgs synth_args, train_args, nvs_args, pose_args, render_args, export_args;
    std::string scene_dir, checkpoint, pose_line, out_file;
    bool use_gt_scene = false;

    auto* synth_cmd = app.add_subcommand("synth-gen", "generate a synthetic scene");
    add_common(synth_cmd, synth_args);

    auto* train_cmd = app.add_subcommand("train", "train on a synthetic scene");
    add_common(train_cmd, train_args);
    train_cmd->add_option("--scene", scene_dir, "scene directory (default <out>/scene)");

    auto* nvs_cmd = app.add_subcommand("eval-nvs", "novel-view synthesis metrics");
    add_common(nvs_cmd, nvs_args);
    nvs_cmd->add_option("--scene", scene_dir, "scene directory")->required();
    nvs_cmd->add_option("--checkpoint", checkpoint, "model checkpoint");
    nvs_cmd->add_flag("--use-gt-scene", use_gt_scene, "score the ground-truth scene itself");

    auto* pose_cmd = app.add_subcommand("eval-pose", "camera pose metrics");
    add_common(pose_cmd, pose_args);
    pose_cmd->add_option("--scene", scene_dir, "scene directory")->required();
    pose_cmd->add_option("--checkpoint", checkpoint, "model checkpoint");
    pose_cmd->add_flag("--use-gt-scene", use_gt_scene, "score the ground-truth trajectory");

    auto* render_cmd = app.add_subcommand("render", "render a novel viewpoint");
    add_common(render_cmd, render_args, false);
    render_cmd->add_option("--scene", scene_dir, "scene directory")->required();
    render_cmd->add_option("--checkpoint", checkpoint, "model checkpoint")->required();
    render_cmd->add_option("--pose", pose_line, "pose 'qw qx qy qz tx ty tz'")->required();
    render_cmd->add_option("--out", out_file, "output PPM path")->required();

    auto* export_cmd = app.add_subcommand("export-ply", "export the predicted scene");
    add_common(export_cmd, export_args, false);
    export_cmd->add_option("--scene", scene_dir, "scene directory")->required();
    export_cmd->add_option("--checkpoint", checkpoint, "model checkpoint")->required();
    export_cmd->add_option("--out", out_file, "output PLY path")->required();

    CLI11_PARSE(app, argc, argv);

    try {
        if (synth_cmd->parsed()) {
            const RunConfig cfg = load_config(synth_args);
            SyntheticScene scene = synth_gen(cfg, cfg.seed);
            const std::string dir = (fs::path(synth_args.out_dir) / "scene").string();
            save_scene(scene, dir);
            std::printf("scene written to %s (%d input views, %d targets, %d gaussians)\n",
                        dir.c_str(), scene.n_input_views, scene.n_target_views,
                        static_cast<int>(scene.gt_scene.size()));
        } else if (train_cmd->parsed()) {
            const RunConfig cfg = load_config(train_args);
            if (scene_dir.empty()) scene_dir = (fs::path(train_args.out_dir) / "scene").string();
            const SyntheticScene scene = obtain_scene(cfg, scene_dir, true);
            write_run_config(cfg, (fs::path(train_args.out_dir) / "run_config.ini").string());
            const TrainResult result = train(cfg, scene, train_args.out_dir);
            std::printf("trained %d steps; final checkpoint %s\n", result.steps_run,
                        result.final_checkpoint.c_str());
            if (!result.records.empty()) {
                const auto& last = result.records.back();
                std::printf("final losses: render=%.6f pose=%.6f total=%.6f rpe_r=%.4f\n",
                            last.losses.l_render, last.losses.l_pose, last.losses.total,
                            last.rpe_r_deg);
            }
        } else if (nvs_cmd->parsed()) {
            const RunConfig cfg = load_config(nvs_args);
            const SyntheticScene scene = load_scene(scene_dir);
            const std::string csv = (fs::path(nvs_args.out_dir) / "nvs_metrics.csv").string();
            fs::create_directories(nvs_args.out_dir);
            if (use_gt_scene) {
                const NvsResult res = eval_nvs_gt(scene, csv);
                std::printf("gt-scene mean psnr=%.4f ssim=%.6f (%s)\n", res.mean_psnr,
                            res.mean_ssim, csv.c_str());
            } else {
                if (checkpoint.empty()) throw Error("eval-nvs requires --checkpoint");
                TokenSplatModel model = load_model(cfg, checkpoint);
                const NvsResult res = eval_nvs(model, scene, csv);
                print_stats(res.stats);
                const std::string counts_csv =
                    (fs::path(nvs_args.out_dir) / "gaussian_counts.csv").string();
                CountRow row;
                row.n_views = scene.n_input_views;
                row.input_tokens = res.stats.input_tokens;
                row.fused_tokens = res.stats.fused_tokens;
                row.fused_gaussians = res.stats.gaussians;
                row.pixel_aligned_gaussians =
                    static_cast<long long>(scene.n_input_views) *
                    cfg.model.tokens_per_view() * cfg.model.k_per_token;
                write_count_csv({row}, counts_csv);
                std::printf("mean psnr=%.4f ssim=%.6f (%s)\n", res.mean_psnr, res.mean_ssim,
                            csv.c_str());
            }
        } else if (pose_cmd->parsed()) {
            const RunConfig cfg = load_config(pose_args);
            const SyntheticScene scene = load_scene(scene_dir);
            fs::create_directories(pose_args.out_dir);
            const std::string csv = (fs::path(pose_args.out_dir) / "pose_metrics.csv").string();
            PoseEvalResult res;
            if (use_gt_scene) {
                res = eval_pose_gt(scene, csv);
            } else {
                if (checkpoint.empty()) throw Error("eval-pose requires --checkpoint");
                TokenSplatModel model = load_model(cfg, checkpoint);
                res = eval_pose(model, scene, csv);
            }
            std::printf("ate=%.6f rpe_t=%.6f rpe_r=%.4f (%s)\n", res.ate_val, res.rpe_t_val,
                        res.rpe_r_deg, csv.c_str());
        } else if (render_cmd->parsed()) {
            const RunConfig cfg = load_config(render_args);
            const SyntheticScene scene = load_scene(scene_dir);
            TokenSplatModel model = load_model(cfg, checkpoint);
            const Pose pose = parse_pose_line(pose_line);
            const ModelOutput out = model.forward(scene.input_views());
            const GaussianScene pred = model.materialize_scene(out);
            const RenderedImage img = render(pred, pose, scene.intrinsics);
            write_ppm(img.pixels, out_file);
            const std::string raw_path =
                (fs::path(out_file).parent_path() / fs::path(out_file).stem()).string() + ".f32";
            write_raw(img.pixels, raw_path);
            print_stats(out.stats);
            std::printf("rendered %s and %s\n", out_file.c_str(), raw_path.c_str());
        } else if (export_cmd->parsed()) {
            const RunConfig cfg = load_config(export_args);
            const SyntheticScene scene = load_scene(scene_dir);
            TokenSplatModel model = load_model(cfg, checkpoint);
            const ModelOutput out = model.forward(scene.input_views());
            const GaussianScene pred = model.materialize_scene(out);
            export_ply(pred, out_file);
            print_stats(out.stats);
            std::printf("exported %d gaussians to %s\n", static_cast<int>(pred.size()),
                        out_file.c_str());
        }
    } catch (const std::exception& e) {
        std::string msg = e.what();
        for (auto& c : msg)
            if (c == '\n') c = ' ';
        std::fprintf(stderr, "error: %s\n", msg.c_str());
        return 1;
    }
    return 0;
}
