#pragma once

// Synthetic scene generation and the on-disk run-directory layout. Scenes are
// generated directly in the canonical frame: the first camera sits at the
// origin with the identity orientation, the Gaussian cloud floats at
// camera_distance along its +z axis, and the remaining cameras sweep an arc
// around the cloud. Relative and absolute poses therefore coincide, and the
// ground-truth self-check renders are bit-identical.

#include <json.hpp>

#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "tokensplat/config.hpp"
#include "tokensplat/gaussian.hpp"
#include "tokensplat/geometry.hpp"
#include "tokensplat/image.hpp"
#include "tokensplat/renderer.hpp"
#include "tokensplat/vit.hpp"

namespace tokensplat {

struct SyntheticScene {
    GaussianScene gt_scene;        // canonical frame
    std::vector<Pose> cam_poses;   // camera-to-canonical, inputs then targets
    Intrinsics intrinsics;
    std::vector<Image> images;     // rendered ground truth per view
    int n_input_views = 0;
    int n_target_views = 0;
    std::uint64_t seed = 0;

    int total_views() const { return n_input_views + n_target_views; }

    Trajectory trajectory() const {
        Trajectory t = cam_poses;
        t[0] = Pose::identity();
        return t;
    }

    Trajectory input_trajectory() const {
        Trajectory t(cam_poses.begin(), cam_poses.begin() + n_input_views);
        t[0] = Pose::identity();
        return t;
    }

    std::vector<CameraView> input_views() const {
        std::vector<CameraView> views;
        views.reserve(static_cast<std::size_t>(n_input_views));
        for (int i = 0; i < n_input_views; ++i)
            views.push_back({images[static_cast<std::size_t>(i)], intrinsics,
                             cam_poses[static_cast<std::size_t>(i)]});
        return views;
    }
};

namespace synth_detail {

inline Pose look_at(const Eigen::Vector3d& position, const Eigen::Vector3d& target) {
    const Eigen::Vector3d forward = (target - position).normalized();
    Eigen::Vector3d up(0, 1, 0);
    if (std::fabs(forward.dot(up)) > 0.999) up = Eigen::Vector3d(1, 0, 0);
    const Eigen::Vector3d right = up.cross(forward).normalized();
    const Eigen::Vector3d down = forward.cross(right);
    Eigen::Matrix3d r;
    r.col(0) = right;
    r.col(1) = down;
    r.col(2) = forward;
    return {rotmat_to_quat(r), position};
}

inline GaussianScene random_scene(const RunConfig& cfg, Rng& rng,
                                  const Eigen::Vector3d& center) {
    GaussianScene scene;
    scene.sh_degree = cfg.model.sh_degree;
    const float half = 0.5f * cfg.scene_extent;
    const int n_coeff = sh_coeff_count(cfg.model.sh_degree);
    for (int i = 0; i < cfg.gt_gaussians; ++i) {
        Gaussian3D g;
        g.center = {static_cast<float>(center.x()) + rng.uniform(-half, half),
                    static_cast<float>(center.y()) + rng.uniform(-half, half),
                    static_cast<float>(center.z()) + rng.uniform(-half, half)};
        g.set_opacity(rng.uniform(0.55f, 0.95f));
        Quaternion q{rng.normal(), rng.normal(), rng.normal(), rng.normal()};
        g.set_rotation(q.normalized());
        const float lo = std::log(0.04f * cfg.scene_extent);
        const float hi = std::log(0.12f * cfg.scene_extent);
        g.log_scale = {rng.uniform(lo, hi), rng.uniform(lo, hi), rng.uniform(lo, hi)};
        g.sh.resize(static_cast<std::size_t>(3 * n_coeff), 0.0f);
        for (int ch = 0; ch < 3; ++ch) {
            const float color = rng.uniform(0.15f, 0.9f);
            g.sh[static_cast<std::size_t>(ch) * n_coeff] =
                static_cast<float>((color - 0.5) / sh::kC0);
            for (int m2 = 1; m2 < n_coeff; ++m2)
                g.sh[static_cast<std::size_t>(ch) * n_coeff + m2] = rng.normal(0.0f, 0.08f);
        }
        scene.gaussians.push_back(g);
    }
    return scene;
}

}  // namespace synth_detail

// Deterministic in (config, seed). If a generated configuration leaves any
// view without a drawn splat, regeneration retries with a derived seed and
// records the attempt in the thrown diagnostics.
inline SyntheticScene synth_gen(const RunConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    std::string diagnostics;
    for (int attempt = 0; attempt < 8; ++attempt) {
        const std::uint64_t attempt_seed = seed + 7919ull * static_cast<std::uint64_t>(attempt);
        Rng rng(attempt_seed);

        SyntheticScene out;
        out.seed = seed;
        out.n_input_views = cfg.n_views;
        out.n_target_views = cfg.n_targets;

        const double dist = cfg.camera_distance;
        const Eigen::Vector3d cloud_center(0, 0, dist);
        out.gt_scene = synth_detail::random_scene(cfg, rng, cloud_center);

        Intrinsics k;
        k.width = cfg.model.image_w;
        k.height = cfg.model.image_h;
        const double f =
            cfg.model.image_w / (2.0 * std::tan(cfg.fov_deg * 3.14159265358979323846 / 360.0));
        k.fx = k.fy = f;
        k.cx = k.width / 2.0;
        k.cy = k.height / 2.0;
        out.intrinsics = k;

        const double span = (1.0 - cfg.overlap) * 3.14159265358979323846;
        auto camera_at = [&](double alpha) {
            const Eigen::Vector3d pos =
                cloud_center + dist * Eigen::Vector3d(std::sin(alpha),
                                                      0.08 * std::sin(2.7 * alpha),
                                                      -std::cos(alpha));
            return synth_detail::look_at(pos, cloud_center);
        };
        for (int i = 0; i < cfg.n_views; ++i) {
            const double alpha =
                cfg.n_views == 1 ? 0.0 : span * i / static_cast<double>(cfg.n_views - 1);
            out.cam_poses.push_back(camera_at(alpha));
        }
        out.cam_poses[0] = Pose::identity();  // exact reference-view convention
        for (int j = 0; j < cfg.n_targets; ++j) {
            const double alpha = span * (j + 0.5) / static_cast<double>(std::max(1, cfg.n_targets));
            out.cam_poses.push_back(camera_at(alpha));
        }

        bool all_visible = true;
        for (int v = 0; v < out.total_views(); ++v) {
            RenderStats stats;
            out.images.push_back(
                render(out.gt_scene, out.cam_poses[static_cast<std::size_t>(v)], k, {}, &stats)
                    .pixels);
            if (stats.drawn == 0) {
                all_visible = false;
                diagnostics += "attempt " + std::to_string(attempt) + ": view " +
                               std::to_string(v) + " drew no splats\n";
                break;
            }
        }
        if (all_visible) return out;
    }
    throw Error("synth_gen: could not produce a renderable scene\n" + diagnostics);
}

// ---------------------------------------------------------------------------
// Run-directory persistence
// ---------------------------------------------------------------------------

inline void save_scene(const SyntheticScene& scene, const std::string& dir) {
    namespace fs = std::filesystem;
    fs::create_directories(fs::path(dir) / "views");
    export_ply(scene.gt_scene, (fs::path(dir) / "scene_gt.ply").string());
    save_trajectory(scene.trajectory(), (fs::path(dir) / "trajectory.txt").string());

    nlohmann::json manifest;
    manifest["seed"] = scene.seed;
    manifest["n_input_views"] = scene.n_input_views;
    manifest["n_target_views"] = scene.n_target_views;
    manifest["width"] = scene.intrinsics.width;
    manifest["height"] = scene.intrinsics.height;
    manifest["fx"] = scene.intrinsics.fx;
    manifest["fy"] = scene.intrinsics.fy;
    manifest["cx"] = scene.intrinsics.cx;
    manifest["cy"] = scene.intrinsics.cy;
    std::ofstream((fs::path(dir) / "manifest.json").string()) << manifest.dump(2) << "\n";

    char name[64];
    for (int v = 0; v < scene.total_views(); ++v) {
        std::snprintf(name, sizeof(name), "view_%03d", v);
        const auto base = (fs::path(dir) / "views" / name).string();
        write_ppm(scene.images[static_cast<std::size_t>(v)], base + ".ppm");
        write_raw(scene.images[static_cast<std::size_t>(v)], base + ".f32");
    }
}

inline SyntheticScene load_scene(const std::string& dir) {
    namespace fs = std::filesystem;
    const auto manifest_path = fs::path(dir) / "manifest.json";
    std::ifstream mf(manifest_path);
    if (!mf) throw Error("cannot open scene manifest: " + manifest_path.string());
    nlohmann::json manifest;
    mf >> manifest;

    SyntheticScene out;
    out.seed = manifest.at("seed").get<std::uint64_t>();
    out.n_input_views = manifest.at("n_input_views").get<int>();
    out.n_target_views = manifest.at("n_target_views").get<int>();
    out.intrinsics.width = manifest.at("width").get<int>();
    out.intrinsics.height = manifest.at("height").get<int>();
    out.intrinsics.fx = manifest.at("fx").get<double>();
    out.intrinsics.fy = manifest.at("fy").get<double>();
    out.intrinsics.cx = manifest.at("cx").get<double>();
    out.intrinsics.cy = manifest.at("cy").get<double>();

    out.gt_scene = import_ply((fs::path(dir) / "scene_gt.ply").string());
    out.cam_poses = load_trajectory((fs::path(dir) / "trajectory.txt").string());
    if (static_cast<int>(out.cam_poses.size()) != out.total_views())
        throw Error("scene directory is inconsistent: trajectory length mismatch");

    char name[64];
    for (int v = 0; v < out.total_views(); ++v) {
        std::snprintf(name, sizeof(name), "view_%03d", v);
        const auto base = (fs::path(dir) / "views" / name).string();
        out.images.push_back(
            read_raw(base + ".f32", out.intrinsics.width, out.intrinsics.height));
    }
    return out;
}

inline bool scene_exists(const std::string& dir) {
    return std::filesystem::exists(std::filesystem::path(dir) / "manifest.json");
}

}  // namespace tokensplat
