#pragma once

// Token-aligned Gaussian prediction: coarse position + confidence per token,
// epsilon-sized voxel grouping, confidence-weighted fusion, the multi-scale
// residual-fusion Gaussian head emitting K Gaussians per fused token, and the
// camera pose head.

#include <array>
#include <cmath>
#include <cstdint>
#include <map>
#include <string>
#include <tuple>
#include <vector>

#include "tokensplat/gaussian.hpp"
#include "tokensplat/geometry.hpp"
#include "tokensplat/nn.hpp"

namespace tokensplat {

inline constexpr int kNumTapLevels = 4;

// ---------------------------------------------------------------------------
// Coarse prediction
// ---------------------------------------------------------------------------

// Reads the concatenation of the four multi-scale tap features per token and
// regresses a free 3D position in the canonical frame plus a confidence
// logit. The position bias starts on the unit-depth axis so early groupings
// do not collapse into a single cell.
struct CoarseHead {
    LayerNormModule ln_in;
    Linear fc1, fc2;

    static CoarseHead make(ParameterStore& ps, const std::string& name, int dim, Rng& rng) {
        CoarseHead h;
        h.ln_in = LayerNormModule::make(ps, name + ".ln_in", kNumTapLevels * dim);
        h.fc1 = Linear::make(ps, name + ".fc1", kNumTapLevels * dim, dim, rng);
        // Wider output init spreads the starting positions across several
        // grouping cells instead of collapsing the whole token set into one.
        h.fc2 = Linear::make(ps, name + ".fc2", dim, 4, rng, 0.15f);
        h.fc2.b.values_mut()[2] = 1.0f;  // +z unit-depth bias
        return h;
    }

    // taps_concat: [T_total, 4D] -> [T_total, 4] (x, y, z, confidence logit)
    Tensor operator()(const Tensor& taps_concat) const {
        return fc2(gelu(fc1(ln_in(taps_concat))));
    }
};

// ---------------------------------------------------------------------------
// Voxel-hash grouping
// ---------------------------------------------------------------------------

struct Grouping {
    // Token indices per group; groups ordered by lexicographic cell
    // coordinates, members by ascending token index. Deterministic in the
    // positions alone.
    std::vector<std::vector<int>> groups;
};

inline Grouping group_tokens(const std::vector<std::array<float, 3>>& positions,
                             float epsilon) {
    if (epsilon <= 0.0f) throw ContractError("group_tokens: epsilon must be positive");
    using Cell = std::tuple<std::int64_t, std::int64_t, std::int64_t>;
    std::map<Cell, std::vector<int>> cells;
    for (std::size_t i = 0; i < positions.size(); ++i) {
        const auto& p = positions[i];
        const Cell c{static_cast<std::int64_t>(std::floor(p[0] / epsilon)),
                     static_cast<std::int64_t>(std::floor(p[1] / epsilon)),
                     static_cast<std::int64_t>(std::floor(p[2] / epsilon))};
        cells[c].push_back(static_cast<int>(i));
    }
    Grouping g;
    g.groups.reserve(cells.size());
    for (auto& [cell, members] : cells) g.groups.push_back(std::move(members));
    return g;
}

// ---------------------------------------------------------------------------
// Confidence-weighted fusion
// ---------------------------------------------------------------------------

struct FusedBundle {
    Tensor features;            // [M, D]
    Tensor coarse_pos;          // [M, 3]
    std::vector<Tensor> taps;   // kNumTapLevels entries of [M, D]
    std::vector<Tensor> group_weights;  // per group, [1, n_members]
    std::vector<int> member_counts;
};

// Weighted sums with softmax-normalized member confidences; the same weights
// fuse the primary features, the coarse positions and every tap level.
inline FusedBundle fuse_groups(const Grouping& grouping, const Tensor& features,
                               const Tensor& coarse_pos, const Tensor& conf_logits,
                               const std::vector<Tensor>& taps) {
    if (static_cast<int>(taps.size()) != kNumTapLevels)
        throw ShapeError("fuse_groups: expected four tap levels");
    std::vector<Tensor> fused_feat, fused_pos;
    std::array<std::vector<Tensor>, kNumTapLevels> fused_taps;
    FusedBundle out;
    for (const auto& members : grouping.groups) {
        if (members.empty()) throw ContractError("fuse_groups: empty group");
        const Tensor logits = transpose(gather_rows(conf_logits, members));  // [1, n]
        const Tensor w = softmax(logits, 1);
        out.group_weights.push_back(w);
        out.member_counts.push_back(static_cast<int>(members.size()));
        fused_feat.push_back(matmul(w, gather_rows(features, members)));
        fused_pos.push_back(matmul(w, gather_rows(coarse_pos, members)));
        for (int l = 0; l < kNumTapLevels; ++l)
            fused_taps[static_cast<std::size_t>(l)].push_back(
                matmul(w, gather_rows(taps[static_cast<std::size_t>(l)], members)));
    }
    out.features = fused_feat.size() == 1 ? fused_feat[0] : concat_rows(fused_feat);
    out.coarse_pos = fused_pos.size() == 1 ? fused_pos[0] : concat_rows(fused_pos);
    for (int l = 0; l < kNumTapLevels; ++l) {
        auto& parts = fused_taps[static_cast<std::size_t>(l)];
        out.taps.push_back(parts.size() == 1 ? parts[0] : concat_rows(parts));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Gaussian prediction head
// ---------------------------------------------------------------------------

inline int gaussian_param_dim(int sh_degree) { return 11 + 3 * sh_coeff_count(sh_degree); }

// Deconvolution along the fused-token axis: [L, C] -> [L*up, C].
inline Tensor token_deconv(const Tensor& x, const Tensor& w, int up) {
    const int l = x.dim(0), c = x.dim(1);
    Tensor t = reshape(transpose(x), {c, 1, l});
    Tensor y = conv_transpose2d(t, w, up);
    return transpose(reshape(y, {c, l * up}));
}

struct ResidualFc {
    Linear fc1, fc2;

    static ResidualFc make(ParameterStore& ps, const std::string& name, int dim, Rng& rng) {
        ResidualFc r;
        r.fc1 = Linear::make(ps, name + ".fc1", dim, dim, rng);
        r.fc2 = Linear::make(ps, name + ".fc2", dim, dim, rng);
        return r;
    }

    Tensor operator()(const Tensor& x) const { return add(x, fc2(gelu(fc1(x)))); }
};

// Channel projection to the fuse width, then token-axis deconvolution by the
// level's upsampling factor, then two fully connected layers.
struct ProjModule {
    Linear channel_proj;
    Tensor deconv_w;  // [C, C, 1, up]
    Linear fc1, fc2;
    int up = 1;

    static ProjModule make(ParameterStore& ps, const std::string& name, int dim, int fuse_dim,
                           int up, Rng& rng) {
        ProjModule p;
        p.up = up;
        p.channel_proj = Linear::make(ps, name + ".channel_proj", dim, fuse_dim, rng);
        p.deconv_w = ps.create_randn(name + ".deconv_w", {fuse_dim, fuse_dim, 1, up}, rng,
                                     0.05f);
        p.fc1 = Linear::make(ps, name + ".fc1", fuse_dim, fuse_dim, rng);
        p.fc2 = Linear::make(ps, name + ".fc2", fuse_dim, fuse_dim, rng);
        return p;
    }

    Tensor operator()(const Tensor& x) const {
        Tensor h = channel_proj(x);
        if (up > 1) h = token_deconv(h, deconv_w, up);
        return fc2(gelu(fc1(h)));
    }
};

// Residual fusion stage: deep feature enters through a residual module, sum
// with this level's projection, another residual module, then deconvolution
// upsampling and a final fully connected layer.
struct RfModule {
    ResidualFc pre;   // applied to the incoming deeper feature
    ResidualFc main;
    Tensor up_w;      // [C, C, 1, 2]
    Linear post_fc;
    bool has_pre = false;

    static RfModule make(ParameterStore& ps, const std::string& name, int fuse_dim, bool has_pre,
                         Rng& rng) {
        RfModule r;
        r.has_pre = has_pre;
        if (has_pre) r.pre = ResidualFc::make(ps, name + ".pre", fuse_dim, rng);
        r.main = ResidualFc::make(ps, name + ".main", fuse_dim, rng);
        r.up_w = ps.create_randn(name + ".up_w", {fuse_dim, fuse_dim, 1, 2}, rng, 0.05f);
        r.post_fc = Linear::make(ps, name + ".post_fc", fuse_dim, fuse_dim, rng);
        return r;
    }

    Tensor operator()(const Tensor& level_feat, const Tensor& deeper) const {
        Tensor h = has_pre ? add(level_feat, pre(deeper)) : level_feat;
        h = main(h);
        return post_fc(token_deconv(h, up_w, 2));
    }
};

struct HeadOutput {
    Tensor centers;    // [G, 3]
    Tensor opacities;  // [G] in (0,1)
    Tensor rotations;  // [G, 4] raw (renderer normalizes)
    Tensor scales;     // [G, 3] positive, clamped to [1e-6, 1e2]
    Tensor sh;         // [G, 3*(k+1)^2] raw coefficients
    Tensor raw;        // [G, gaussian_param_dim] pre-activation
};

struct GaussianHead {
    std::array<ProjModule, kNumTapLevels> proj;   // levels 1..4, shallow..deep
    std::array<RfModule, kNumTapLevels> rf;
    Linear out;  // [2^nl * fuse_dim] -> K * param_dim per fused token
    int k_per_token = 4;
    int fuse_dim = 0;
    int sh_degree = 1;

    static GaussianHead make(ParameterStore& ps, const std::string& name, int dim, int fuse_dim,
                             int k_per_token, int sh_degree, Rng& rng) {
        GaussianHead h;
        h.k_per_token = k_per_token;
        h.fuse_dim = fuse_dim;
        h.sh_degree = sh_degree;
        for (int l = 0; l < kNumTapLevels; ++l) {
            const int up = 1 << (kNumTapLevels - 1 - l);  // 8, 4, 2, 1
            h.proj[static_cast<std::size_t>(l)] = ProjModule::make(
                ps, name + ".proj" + std::to_string(l), dim, fuse_dim, up, rng);
            h.rf[static_cast<std::size_t>(l)] = RfModule::make(
                ps, name + ".rf" + std::to_string(l), fuse_dim, l != kNumTapLevels - 1, rng);
        }
        const int group = 1 << kNumTapLevels;  // positions per fused token after fusion
        const int pdim = gaussian_param_dim(sh_degree);
        h.out = Linear::make(ps, name + ".out", group * fuse_dim, k_per_token * pdim, rng);
        // Per-slot bias: identity-leaning rotation, small initial scale.
        auto& bias = h.out.b.values_mut();
        for (int k = 0; k < k_per_token; ++k) {
            const std::size_t base = static_cast<std::size_t>(k) * pdim;
            bias[base + 4] = 1.0f;                       // rotation w
            for (int c = 0; c < 3; ++c) bias[base + 8 + c] = -3.0f;  // exp(-3) ~ 0.05
        }
        return h;
    }
};

// Emits exactly k_per_token Gaussians per fused token: G = M * K. Centers are
// the fused coarse positions plus predicted offsets; the other attributes go
// through the activation boundary (sigmoid opacity, clamped exp scale, raw
// rotation normalized downstream, raw SH).
inline HeadOutput gaussian_head(const GaussianHead& head, const FusedBundle& fused) {
    const int m = fused.coarse_pos.dim(0);
    const int pdim = gaussian_param_dim(head.sh_degree);
    const int group = 1 << kNumTapLevels;

    // deep-to-shallow residual fusion over the projected levels
    std::array<Tensor, kNumTapLevels> fhat;
    for (int l = 0; l < kNumTapLevels; ++l)
        fhat[static_cast<std::size_t>(l)] =
            head.proj[static_cast<std::size_t>(l)](fused.taps[static_cast<std::size_t>(l)]);
    Tensor fusion = head.rf[kNumTapLevels - 1](fhat[kNumTapLevels - 1], Tensor());
    for (int l = kNumTapLevels - 2; l >= 0; --l)
        fusion = head.rf[static_cast<std::size_t>(l)](fhat[static_cast<std::size_t>(l)], fusion);
    // fusion: [M * 2^nl, fuse_dim]

    Tensor per_token = reshape(fusion, {m, group * head.fuse_dim});
    Tensor raw = reshape(head.out(per_token), {m * head.k_per_token, pdim});

    HeadOutput out;
    out.raw = raw;
    const int n_sh = 3 * sh_coeff_count(head.sh_degree);
    Tensor offsets = slice_cols(raw, 0, 3);
    Tensor centers = add(repeat_interleave_rows(fused.coarse_pos, head.k_per_token), offsets);
    out.centers = centers;
    out.opacities = reshape(sigmoid(slice_cols(raw, 3, 4)), {m * head.k_per_token});
    out.rotations = slice_cols(raw, 4, 8);
    out.scales = clamp(exp(slice_cols(raw, 8, 11)), 1e-6f, 1e2f);
    out.sh = slice_cols(raw, 11, 11 + n_sh);
    return out;
}

// ---------------------------------------------------------------------------
// Pose head
// ---------------------------------------------------------------------------

struct PoseHead {
    Linear fc;  // D -> 7 after a ReLU

    static PoseHead make(ParameterStore& ps, const std::string& name, int dim, Rng& rng) {
        PoseHead h;
        h.fc = Linear::make(ps, name + ".fc", dim, 7, rng);
        return h;
    }

    // camera token [1, D] -> raw (qw qx qy qz tx ty tz) as [1, 7]
    Tensor operator()(const Tensor& camera_token) const { return fc(relu(camera_token)); }
};

inline constexpr float kPoseQuatEps = 1e-6f;

// Raw head output -> pose. The quaternion is normalized after nudging the
// scalar component by epsilon, so an all-zero head output maps to the
// identity rotation instead of NaN.
inline Pose pose_from_head(const std::vector<float>& v7) {
    if (v7.size() != 7) throw ShapeError("pose_from_head: expected 7 values");
    Quaternion q{v7[0] + kPoseQuatEps, v7[1], v7[2], v7[3]};
    const double n = q.norm();
    if (n < 1e-12) {
        q = Quaternion{1, 0, 0, 0};
    } else {
        q = Quaternion{q.w / n, q.x / n, q.y / n, q.z / n};
    }
    return Pose(q, Eigen::Vector3d{v7[4], v7[5], v7[6]});
}

}  // namespace tokensplat
