#pragma once

// The end-to-end feed-forward model: weight-shared ViT encoder per view, the
// canonical scene decoder for the reference view running in lockstep with the
// asymmetric dual-flow decoder for the other views, token fusion, the
// Gaussian prediction head, and the camera pose head.
//
// Multi-scale taps are the decoder stream states at block inputs
// (0, ceil(d/3), ceil(2d/3), d); tap d is the final output. Intrinsic tokens
// ride through attention and are dropped before fusion.

#include <array>
#include <string>
#include <vector>

#include "tokensplat/adf.hpp"
#include "tokensplat/checkpoint.hpp"
#include "tokensplat/config.hpp"
#include "tokensplat/fusion.hpp"
#include "tokensplat/gaussian.hpp"
#include "tokensplat/vit.hpp"

namespace tokensplat {

struct ForwardStats {
    int input_tokens = 0;
    int fused_tokens = 0;
    int gaussians = 0;
};

struct ModelOutput {
    HeadOutput scene;                // tape tensors for rendering/training
    std::vector<Tensor> pose_raw;    // per non-reference view, [1,7]
    Trajectory predicted_trajectory; // identity first, then decoded poses
    ForwardStats stats;
    FusedBundle fused;               // exposed for fusion-level diagnostics
};

inline std::array<int, kNumTapLevels> tap_indices(int decoder_depth) {
    const int d = decoder_depth;
    return {0, (d + 2) / 3, (2 * d + 2) / 3, d};
}

class TokenSplatModel {
  public:
    TokenSplatModel(const ModelConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
        cfg_.validate();
        Rng rng(seed);
        encoder_ = ViTEncoder::make(params_, "encoder", cfg_.embed_dim, cfg_.heads,
                                    cfg_.encoder_depth, cfg_.patch_size, cfg_.image_h,
                                    cfg_.image_w, cfg_.intrinsic_token, rng);
        canonical_ = CanonicalDecoder::make(params_, "decoder.canonical", cfg_.embed_dim,
                                            cfg_.heads, cfg_.decoder_depth, rng);
        adf_ = AdfDecoder::make(params_, "decoder.adf", cfg_.embed_dim, cfg_.heads,
                                cfg_.decoder_depth, rng);
        coarse_ = CoarseHead::make(params_, "head.coarse", cfg_.embed_dim, rng);
        gaussian_head_ = GaussianHead::make(params_, "head.gaussian", cfg_.embed_dim,
                                            cfg_.fuse_dim, cfg_.k_per_token, cfg_.sh_degree,
                                            rng);
        pose_head_ = PoseHead::make(params_, "head.pose", cfg_.embed_dim, rng);
    }

    const ModelConfig& config() const { return cfg_; }
    ParameterStore& params() { return params_; }
    const ParameterStore& params() const { return params_; }
    const ViTEncoder& encoder() const { return encoder_; }
    const CanonicalDecoder& canonical_decoder() const { return canonical_; }
    const AdfDecoder& adf_decoder() const { return adf_; }
    const PoseHead& pose_head() const { return pose_head_; }

    // `detach_modulation` severs the camera-to-image modulation path; used by
    // the gradient-flow diagnostics.
    ModelOutput forward(const std::vector<CameraView>& views,
                        bool detach_modulation = false) const {
        const int n = static_cast<int>(views.size());
        if (n < 2) throw ConfigError("forward: the model requires at least two views");
        for (const auto& v : views) {
            if (v.image.width != cfg_.image_w || v.image.height != cfg_.image_h)
                throw ConfigError("forward: view size does not match the configured size");
        }

        // Per-view encoding, strictly independent across views.
        std::vector<Tensor> encoded;
        encoded.reserve(static_cast<std::size_t>(n));
        for (const auto& v : views) encoded.push_back(encoder_.encode(v));

        // Lockstep decoding. states[0] = reference stream, states[i>=1] = ADF
        // streams; taps capture block-input snapshots at the tap indices.
        const auto tap_at = tap_indices(cfg_.decoder_depth);
        std::vector<std::vector<Tensor>> taps(static_cast<std::size_t>(n));
        Tensor ref_state = encoded[0];
        std::vector<Tensor> img_states(encoded.begin() + 1, encoded.end());
        std::vector<Tensor> cam_tokens = camera_token_init(adf_, n);

        auto record_taps = [&](int level) {
            for (int l = 0; l < kNumTapLevels; ++l) {
                if (tap_at[static_cast<std::size_t>(l)] != level) continue;
                taps[0].push_back(ref_state);
                for (int v = 1; v < n; ++v)
                    taps[static_cast<std::size_t>(v)].push_back(
                        img_states[static_cast<std::size_t>(v - 1)]);
            }
        };

        for (int l = 0; l < cfg_.decoder_depth; ++l) {
            record_taps(l);
            std::vector<Tensor> snapshot;
            snapshot.reserve(static_cast<std::size_t>(n));
            snapshot.push_back(ref_state);
            for (const auto& t : img_states) snapshot.push_back(t);
            std::vector<Tensor> pool(snapshot.begin() + 1, snapshot.end());
            ref_state = canonical_.blocks[static_cast<std::size_t>(l)](
                ref_state, pool.size() == 1 ? pool[0] : concat_rows(pool));
            adf_block_apply(adf_.blocks[static_cast<std::size_t>(l)], img_states, cam_tokens,
                            snapshot, cfg_.pnv, detach_modulation);
        }
        record_taps(cfg_.decoder_depth);

        // Drop intrinsic tokens (appended last) before fusion.
        const int t_img = cfg_.tokens_per_view();
        auto strip = [&](Tensor t) {
            return t.dim(0) == t_img ? t : slice_rows(t, 0, t_img);
        };
        std::vector<Tensor> final_tokens(static_cast<std::size_t>(n));
        final_tokens[0] = strip(ref_state);
        for (int v = 1; v < n; ++v)
            final_tokens[static_cast<std::size_t>(v)] =
                strip(img_states[static_cast<std::size_t>(v - 1)]);

        std::vector<Tensor> pooled_taps;
        for (int l = 0; l < kNumTapLevels; ++l) {
            std::vector<Tensor> parts;
            parts.reserve(static_cast<std::size_t>(n));
            for (int v = 0; v < n; ++v)
                parts.push_back(strip(taps[static_cast<std::size_t>(v)][static_cast<std::size_t>(l)]));
            pooled_taps.push_back(parts.size() == 1 ? parts[0] : concat_rows(parts));
        }
        std::vector<Tensor> pooled_final_parts(final_tokens.begin(), final_tokens.end());
        Tensor pooled_final = concat_rows(pooled_final_parts);

        // Coarse positions + confidence, then voxel grouping and fusion.
        Tensor coarse = coarse_(concat_cols(pooled_taps));
        Tensor positions = slice_cols(coarse, 0, 3);
        Tensor logits = slice_cols(coarse, 3, 4);
        std::vector<std::array<float, 3>> pos_values(positions.numel() / 3);
        for (std::size_t i = 0; i < pos_values.size(); ++i)
            pos_values[i] = {positions.values()[i * 3], positions.values()[i * 3 + 1],
                             positions.values()[i * 3 + 2]};
        const Grouping grouping = group_tokens(pos_values, cfg_.epsilon);
        FusedBundle fused = fuse_groups(grouping, pooled_final, positions, logits, pooled_taps);

        ModelOutput out;
        out.scene = gaussian_head(gaussian_head_, fused);
        out.stats.input_tokens = static_cast<int>(pos_values.size());
        out.stats.fused_tokens = fused.coarse_pos.dim(0);
        out.stats.gaussians = out.scene.centers.dim(0);

        out.predicted_trajectory.push_back(Pose::identity());
        for (int v = 1; v < n; ++v) {
            Tensor p = pose_head_(cam_tokens[static_cast<std::size_t>(v - 1)]);
            out.pose_raw.push_back(p);
            out.predicted_trajectory.push_back(pose_from_head(p.values()));
        }
        out.fused = std::move(fused);
        return out;
    }

    // Value-level scene for export and evaluation. Opacity and scale raw
    // encodings come straight from the head's pre-activation output.
    GaussianScene materialize_scene(const ModelOutput& out) const {
        GaussianScene scene;
        scene.sh_degree = cfg_.sh_degree;
        const int g = out.scene.centers.dim(0);
        const int n_sh = 3 * sh_coeff_count(cfg_.sh_degree);
        scene.gaussians.resize(static_cast<std::size_t>(g));
        const auto& raw = out.scene.raw.values();
        const int pdim = gaussian_param_dim(cfg_.sh_degree);
        for (int i = 0; i < g; ++i) {
            Gaussian3D& gs = scene.gaussians[static_cast<std::size_t>(i)];
            for (int c = 0; c < 3; ++c)
                gs.center[static_cast<std::size_t>(c)] =
                    out.scene.centers.values()[static_cast<std::size_t>(i) * 3 + c];
            const std::size_t base = static_cast<std::size_t>(i) * pdim;
            gs.opacity_logit = raw[base + 3];
            Quaternion q{raw[base + 4], raw[base + 5], raw[base + 6], raw[base + 7]};
            if (q.norm() < 1e-12) q = Quaternion{1, 0, 0, 0};
            gs.set_rotation(q);
            for (int c = 0; c < 3; ++c) {
                // match the head's clamped exp activation in log space
                const float ls = std::clamp(raw[base + 8 + c], std::log(1e-6f), std::log(1e2f));
                gs.log_scale[static_cast<std::size_t>(c)] = ls;
            }
            gs.sh.assign(raw.begin() + static_cast<std::ptrdiff_t>(base + 11),
                         raw.begin() + static_cast<std::ptrdiff_t>(base + 11 + n_sh));
        }
        return scene;
    }

  private:
    ModelConfig cfg_;
    ParameterStore params_;
    ViTEncoder encoder_;
    CanonicalDecoder canonical_;
    AdfDecoder adf_;
    CoarseHead coarse_;
    GaussianHead gaussian_head_;
    PoseHead pose_head_;
};

}  // namespace tokensplat
