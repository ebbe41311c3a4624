#pragma once

// Evaluation: novel-view synthesis metrics over the held-out target views,
// trajectory error metrics over the input views, and the fused-vs-pixel-
// aligned Gaussian count comparison used by the scaling analysis.

#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "tokensplat/losses.hpp"
#include "tokensplat/model.hpp"
#include "tokensplat/renderer.hpp"
#include "tokensplat/synth.hpp"

namespace tokensplat {

struct NvsRow {
    int view = 0;
    double psnr_db = 0.0;
    double ssim_val = 0.0;
};

struct NvsResult {
    std::vector<NvsRow> rows;
    double mean_psnr = 0.0;
    double mean_ssim = 0.0;
    ForwardStats stats;
};

struct PoseEvalResult {
    double ate_val = 0.0;
    double rpe_t_val = 0.0;
    double rpe_r_deg = 0.0;
};

namespace eval_detail {

inline void write_nvs_csv(const NvsResult& res, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw Error("cannot open CSV for writing: " + path);
    out << "view,psnr,ssim\n";
    out.precision(10);
    for (const auto& r : res.rows)
        out << r.view << ',' << r.psnr_db << ',' << r.ssim_val << '\n';
    out << "mean," << res.mean_psnr << ',' << res.mean_ssim << '\n';
}

// Renders the given scene at every held-out target pose (falls back to the
// inputs when no targets exist) and scores against the ground-truth images.
inline NvsResult score_scene(const GaussianScene& scene, const SyntheticScene& data) {
    NvsResult res;
    const int begin = data.n_target_views > 0 ? data.n_input_views : 0;
    const int end = data.total_views();
    for (int v = begin; v < end; ++v) {
        const RenderedImage img =
            render(scene, data.cam_poses[static_cast<std::size_t>(v)], data.intrinsics);
        NvsRow row;
        row.view = v;
        row.psnr_db = psnr(img.pixels, data.images[static_cast<std::size_t>(v)]);
        row.ssim_val = ssim(img.pixels, data.images[static_cast<std::size_t>(v)]);
        res.rows.push_back(row);
        res.mean_psnr += row.psnr_db;
        res.mean_ssim += row.ssim_val;
    }
    res.mean_psnr /= static_cast<double>(res.rows.size());
    res.mean_ssim /= static_cast<double>(res.rows.size());
    return res;
}

}  // namespace eval_detail

// Forward pass on the input views, then render the predicted Gaussians at the
// ground-truth target poses (expressed in the predicted reference frame, the
// view-alignment protocol used throughout).
inline NvsResult eval_nvs(const TokenSplatModel& model, const SyntheticScene& data,
                          const std::string& csv_path = "") {
    const ModelOutput out = model.forward(data.input_views());
    const GaussianScene scene = model.materialize_scene(out);
    NvsResult res = eval_detail::score_scene(scene, data);
    res.stats = out.stats;
    if (!csv_path.empty()) eval_detail::write_nvs_csv(res, csv_path);
    return res;
}

// Upper-bound run: scores the ground-truth scene against its own renders.
inline NvsResult eval_nvs_gt(const SyntheticScene& data, const std::string& csv_path = "") {
    NvsResult res = eval_detail::score_scene(data.gt_scene, data);
    if (!csv_path.empty()) eval_detail::write_nvs_csv(res, csv_path);
    return res;
}

inline PoseEvalResult eval_pose(const TokenSplatModel& model, const SyntheticScene& data,
                                const std::string& csv_path = "") {
    const ModelOutput out = model.forward(data.input_views());
    const Trajectory gt = data.input_trajectory();
    PoseEvalResult res;
    res.ate_val = ate(out.predicted_trajectory, gt);
    res.rpe_t_val = rpe_t(out.predicted_trajectory, gt);
    res.rpe_r_deg = rpe_r(out.predicted_trajectory, gt);
    if (!csv_path.empty()) {
        std::ofstream f(csv_path);
        if (!f) throw Error("cannot open CSV for writing: " + csv_path);
        f << "metric,value\n";
        f.precision(10);
        f << "ate," << res.ate_val << "\nrpe_t," << res.rpe_t_val << "\nrpe_r,"
          << res.rpe_r_deg << "\n";
    }
    return res;
}

inline PoseEvalResult eval_pose_gt(const SyntheticScene& data,
                                   const std::string& csv_path = "") {
    const Trajectory gt = data.input_trajectory();
    PoseEvalResult res;
    res.ate_val = ate(gt, gt);
    res.rpe_t_val = rpe_t(gt, gt);
    res.rpe_r_deg = rpe_r(gt, gt);
    if (!csv_path.empty()) {
        std::ofstream f(csv_path);
        f << "metric,value\nate," << res.ate_val << "\nrpe_t," << res.rpe_t_val << "\nrpe_r,"
          << res.rpe_r_deg << "\n";
    }
    return res;
}

// ---------------------------------------------------------------------------
// Gaussian-count scaling
// ---------------------------------------------------------------------------

struct CountRow {
    int n_views = 0;
    int input_tokens = 0;
    int fused_tokens = 0;
    int fused_gaussians = 0;
    long long pixel_aligned_gaussians = 0;  // N * (HW/P^2) * K
};

// Runs the model on a freshly generated overlap scene with `n_views` inputs
// and reports fused vs pixel-aligned Gaussian counts.
inline CountRow count_scaling_row(const RunConfig& base, const TokenSplatModel& model,
                                  int n_views) {
    RunConfig cfg = base;
    cfg.n_views = n_views;
    const SyntheticScene scene = synth_gen(cfg, cfg.seed);
    const ModelOutput out = model.forward(scene.input_views());
    CountRow row;
    row.n_views = n_views;
    row.input_tokens = out.stats.input_tokens;
    row.fused_tokens = out.stats.fused_tokens;
    row.fused_gaussians = out.stats.gaussians;
    row.pixel_aligned_gaussians = static_cast<long long>(n_views) *
                                  cfg.model.tokens_per_view() * cfg.model.k_per_token;
    return row;
}

inline void write_count_csv(const std::vector<CountRow>& rows, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw Error("cannot open CSV for writing: " + path);
    out << "n_views,input_tokens,fused_tokens,fused_gaussians,pixel_aligned_gaussians\n";
    for (const auto& r : rows)
        out << r.n_views << ',' << r.input_tokens << ',' << r.fused_tokens << ','
            << r.fused_gaussians << ',' << r.pixel_aligned_gaussians << '\n';
}

}  // namespace tokensplat
