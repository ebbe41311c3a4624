#pragma once

// Training loop: bias-corrected adaptive first-order optimizer with a
// two-tier learning rate (backbone vs heads), per-step JSON-lines logging,
// periodic checkpoints, and a NaN abort that preserves the last good state.

#include <json.hpp>

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "tokensplat/losses.hpp"
#include "tokensplat/model.hpp"
#include "tokensplat/renderer.hpp"
#include "tokensplat/synth.hpp"

namespace tokensplat {

class Adam {
  public:
    Adam(ParameterStore& params, float lr, float backbone_scale)
        : lr_(lr) {
        for (const auto& p : params.items()) {
            states_.push_back({std::vector<float>(p.tensor.numel(), 0.0f),
                               std::vector<float>(p.tensor.numel(), 0.0f)});
            const bool backbone = p.name.rfind("encoder.", 0) == 0 ||
                                  p.name.rfind("decoder.", 0) == 0;
            scales_.push_back(backbone ? backbone_scale : 1.0f);
        }
    }

    void step(ParameterStore& params) {
        ++t_;
        const double bc1 = 1.0 - std::pow(0.9, t_);
        const double bc2 = 1.0 - std::pow(0.999, t_);
        const auto& items = params.items();
        for (std::size_t pi = 0; pi < items.size(); ++pi) {
            Tensor tens = params.get(items[pi].name);
            const auto& grad = tens.grad();
            auto& vals = tens.values_mut();
            auto& st = states_[pi];
            const double step_lr = lr_ * scales_[pi];
            for (std::size_t i = 0; i < vals.size(); ++i) {
                const double g = grad[i];
                st.m[i] = static_cast<float>(0.9 * st.m[i] + 0.1 * g);
                st.v[i] = static_cast<float>(0.999 * st.v[i] + 0.001 * g * g);
                const double mhat = st.m[i] / bc1;
                const double vhat = st.v[i] / bc2;
                vals[i] -= static_cast<float>(step_lr * mhat / (std::sqrt(vhat) + 1e-8));
            }
        }
    }

  private:
    struct State {
        std::vector<float> m, v;
    };
    float lr_;
    int t_ = 0;
    std::vector<State> states_;
    std::vector<float> scales_;
};

struct TrainStepRecord {
    int step = 0;
    LossReport losses;
    double rpe_r_deg = 0.0;
    double ate_val = 0.0;
    double wall_ms = 0.0;
};

struct TrainResult {
    std::string final_checkpoint;
    std::string log_path;
    std::vector<TrainStepRecord> records;
    int steps_run = 0;
};

// One full training step's losses for the given model/scene pair; shared by
// the training loop and the evaluation-time loss probes.
struct StepLosses {
    Tensor total;
    LossReport report;
    ModelOutput output;
};

inline StepLosses compute_losses(const TokenSplatModel& model, const SyntheticScene& scene,
                                 const PerceptualLossFn& perceptual = nullptr) {
    const ModelConfig& mc = model.config();
    const ModelOutput out = model.forward(scene.input_views());

    // Render losses over every supervised view (inputs and held-out targets)
    // at their ground-truth poses relative to the reference view.
    Tensor render_sum = Tensor::scalar(0.0f);
    const int n_sup = scene.total_views();
    for (int v = 0; v < n_sup; ++v) {
        const Pose& pose = scene.cam_poses[static_cast<std::size_t>(v)];
        double raw[7];
        render_detail::pose_to_raw(pose, raw);
        std::vector<float> pose_data(7);
        for (int i = 0; i < 7; ++i) pose_data[static_cast<std::size_t>(i)] =
            static_cast<float>(raw[i]);
        Tensor pose_t = Tensor::from_data({7}, pose_data);
        Tensor pred = render_op(out.scene.centers, out.scene.opacities, out.scene.rotations,
                                out.scene.scales, out.scene.sh, pose_t, scene.intrinsics,
                                mc.sh_degree);
        Tensor gt = Tensor::from_data({scene.intrinsics.height, scene.intrinsics.width, 3},
                                      scene.images[static_cast<std::size_t>(v)].data);
        render_sum = add(render_sum, render_loss(pred, gt, mc.lambda_lpips, perceptual));
    }
    Tensor l_render = scale(render_sum, 1.0f / static_cast<float>(n_sup));

    // Pose losses averaged over the non-reference input views.
    Tensor pose_sum = Tensor::scalar(0.0f);
    Tensor mse_sum = Tensor::scalar(0.0f);
    Tensor align_sum = Tensor::scalar(0.0f);
    const int n_pose = scene.n_input_views - 1;
    for (int v = 1; v < scene.n_input_views; ++v) {
        const PoseLossParts parts = pose_loss_t(out.pose_raw[static_cast<std::size_t>(v - 1)],
                                                scene.cam_poses[static_cast<std::size_t>(v)]);
        pose_sum = add(pose_sum, parts.total);
        mse_sum = add(mse_sum, parts.mse_part);
        align_sum = add(align_sum, parts.align_part);
    }
    Tensor l_pose = scale(pose_sum, 1.0f / static_cast<float>(n_pose));

    StepLosses step;
    step.total = total_loss(l_render, l_pose, mc.lambda_c);
    step.report.l_render = l_render.scalar_value();
    step.report.l_pose = l_pose.scalar_value();
    step.report.l_mse_pose = mse_sum.scalar_value() / n_pose;
    step.report.l_align = align_sum.scalar_value() / n_pose;
    step.report.total = step.total.scalar_value();
    step.report.lambda_lpips = mc.lambda_lpips;
    step.report.lambda_c = mc.lambda_c;
    step.output = out;
    return step;
}

// Debug-mode audit (TOKENSPLAT_GRAD_AUDIT): every parameter group must have
// received some gradient from the step's total loss.
inline void audit_gradient_flow(const ParameterStore& params) {
    const char* groups[] = {"encoder.",      "decoder.canonical", "decoder.adf",
                            "head.coarse",   "head.gaussian",     "head.pose"};
    for (const char* group : groups) {
        bool nonzero = false;
        for (const auto& p : params.items()) {
            if (p.name.rfind(group, 0) != 0) continue;
            for (float g : p.tensor.grad())
                if (g != 0.0f) {
                    nonzero = true;
                    break;
                }
            if (nonzero) break;
        }
        if (!nonzero)
            throw ContractError(std::string("gradient audit: no gradient reached group ") +
                                group);
    }
}

inline TrainResult train(const RunConfig& cfg, const SyntheticScene& scene,
                         const std::string& out_dir,
                         TokenSplatModel* external_model = nullptr,
                         const PerceptualLossFn& perceptual = nullptr) {
    namespace fs = std::filesystem;
    cfg.validate();
    fs::create_directories(out_dir);

    TokenSplatModel owned(cfg.model, cfg.seed);
    TokenSplatModel& model = external_model ? *external_model : owned;
    Adam opt(model.params(), cfg.lr, cfg.backbone_lr_scale);

    TrainResult result;
    result.log_path = (fs::path(out_dir) / "train_log.jsonl").string();
    result.final_checkpoint = (fs::path(out_dir) / "checkpoint.bin").string();
    std::ofstream log(result.log_path);
    if (!log) throw Error("cannot open training log: " + result.log_path);

    const Trajectory gt_inputs = scene.input_trajectory();
    auto checkpoint_at = [&](int step) {
        char name[64];
        std::snprintf(name, sizeof(name), "checkpoint_%06d.bin", step);
        const std::string path = (fs::path(out_dir) / name).string();
        model.params().save(path);
        return path;
    };

    std::string last_good = checkpoint_at(0);
    for (int step = 0; step < cfg.steps; ++step) {
        const auto t0 = std::chrono::steady_clock::now();
        StepLosses losses = compute_losses(model, scene, perceptual);

        if (!std::isfinite(losses.report.total)) {
            // Abort path: dump diagnostics next to the last good checkpoint.
            nlohmann::json diag;
            diag["step"] = step;
            diag["l_render"] = losses.report.l_render;
            diag["l_pose"] = losses.report.l_pose;
            diag["last_good_checkpoint"] = last_good;
            std::ofstream((fs::path(out_dir) / "nan_abort.json").string())
                << diag.dump(2) << "\n";
            throw Error("train: non-finite loss at step " + std::to_string(step) +
                        "; last good checkpoint " + last_good);
        }
        losses.report.check_invariant();

        model.params().zero_grads();
        backward(losses.total);
        if (std::getenv("TOKENSPLAT_GRAD_AUDIT")) audit_gradient_flow(model.params());
        opt.step(model.params());

        TrainStepRecord rec;
        rec.step = step;
        rec.losses = losses.report;
        rec.rpe_r_deg = rpe_r(losses.output.predicted_trajectory, gt_inputs);
        rec.ate_val = ate(losses.output.predicted_trajectory, gt_inputs);
        rec.wall_ms = std::chrono::duration<double, std::milli>(
                          std::chrono::steady_clock::now() - t0)
                          .count();
        result.records.push_back(rec);

        nlohmann::json line;
        line["step"] = rec.step;
        line["l_render"] = rec.losses.l_render;
        line["l_pose"] = rec.losses.l_pose;
        line["l_align"] = rec.losses.l_align;
        line["l_mse_pose"] = rec.losses.l_mse_pose;
        line["total"] = rec.losses.total;
        line["lambda_lpips"] = rec.losses.lambda_lpips;
        line["lambda_c"] = rec.losses.lambda_c;
        line["rpe_r_deg"] = rec.rpe_r_deg;
        line["ate"] = rec.ate_val;
        line["wall_ms"] = rec.wall_ms;
        log << line.dump() << "\n";

        if ((step + 1) % cfg.checkpoint_every == 0) last_good = checkpoint_at(step + 1);
        result.steps_run = step + 1;
    }

    model.params().save(result.final_checkpoint);
    return result;
}

}  // namespace tokensplat
