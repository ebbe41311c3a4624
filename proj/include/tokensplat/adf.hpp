#pragma once

// Asymmetric dual-flow decoder. Per block and per non-reference view:
//
//   pre-modulate -> separate self-attention for image and camera tokens ->
//   post-modulate (gate on the self-attention branch) ->
//   cross-view attention (image) and camera cross-attention (camera), both
//   reading keys/values from the block-INPUT snapshot of all streams ->
//   per-token MLPs. Residual connections wrap every sub-layer.
//
// The directional constraint is structural: camera information reaches image
// tokens only through the modulation parameters predicted from the view's own
// camera token, and the cross-view keys/values are block-input snapshots, so
// within one block the image tokens of view i never see camera token j != i.
//
// The attention ops themselves are bare (projections + scaled-dot softmax,
// heads concatenated, no output projection) so they can be checked against
// direct dense evaluations.

#include <string>
#include <vector>

#include "tokensplat/nn.hpp"

namespace tokensplat {

// ---------------------------------------------------------------------------
// Modulation
// ---------------------------------------------------------------------------

struct ModulationParams {
    Tensor scale;  // [1, D]
    Tensor shift;  // [1, D]
    Tensor gate;   // [1, D]
};

// Two-layer MLP from the camera token; the output layer starts at zero so
// blocks are camera-neutral at initialization.
struct ModulationMlp {
    Linear fc1, fc2;

    static ModulationMlp make(ParameterStore& ps, const std::string& name, int dim, Rng& rng) {
        ModulationMlp m;
        m.fc1 = Linear::make(ps, name + ".fc1", dim, dim, rng);
        m.fc2 = Linear::make_zero(ps, name + ".fc2", dim, 3 * dim);
        return m;
    }

    ModulationParams operator()(const Tensor& camera_token) const {
        const int dim = camera_token.dim(1);
        Tensor out = fc2(gelu(fc1(camera_token)));
        return {slice_cols(out, 0, dim), slice_cols(out, dim, 2 * dim),
                slice_cols(out, 2 * dim, 3 * dim)};
    }
};

// t <- t * (1 + scale) + shift
inline Tensor modulate_pre(const Tensor& tokens, const ModulationParams& p) {
    const int dim = tokens.dim(1);
    Tensor s = reshape(add_scalar(p.scale, 1.0f), {dim});
    Tensor sh = reshape(p.shift, {dim});
    return add_rowvec(mul_rowvec(tokens, s), sh);
}

// t <- (1 + gate) * t
inline Tensor modulate_post(const Tensor& tokens, const ModulationParams& p) {
    const int dim = tokens.dim(1);
    return mul_rowvec(tokens, reshape(add_scalar(p.gate, 1.0f), {dim}));
}

// ---------------------------------------------------------------------------
// Bare attention ops (Q/K/V projections + scaled-dot softmax, no out-proj)
// ---------------------------------------------------------------------------

struct AdfSelfWeights {
    AttentionProj img;  // image-token q/k/v
    Linear cam_q;       // camera-token query over the same k/v

    static AdfSelfWeights make(ParameterStore& ps, const std::string& name, int dim, Rng& rng) {
        AdfSelfWeights w;
        w.img = AttentionProj::make(ps, name + ".img", dim, rng);
        w.cam_q = Linear::make(ps, name + ".cam_q", dim, dim, rng);
        return w;
    }
};

struct AdfSelfResult {
    Tensor image_tokens;
    Tensor camera_token;
};

// Image tokens attend within their own view; the camera token queries the
// same keys/values. The image-token update never reads the camera token.
inline AdfSelfResult adf_self_attention(const Tensor& image_tokens, const Tensor& camera_token,
                                        const AdfSelfWeights& w, int heads) {
    Tensor k = w.img.k(image_tokens);
    Tensor v = w.img.v(image_tokens);
    AdfSelfResult out;
    out.image_tokens = attention_core(w.img.q(image_tokens), k, v, heads);
    out.camera_token = attention_core(w.cam_q(camera_token), k, v, heads);
    return out;
}

// The pnv-window: indices of the views that view `i` may attend to — the
// symmetric window of size pnv around i in the input ordering, clipped at the
// sequence ends, with i itself removed.
inline std::vector<int> pnv_neighbors(int n_views, int i, int pnv) {
    if (n_views < 2) throw ConfigError("pnv_neighbors: need at least two views");
    if (i < 0 || i >= n_views) throw ContractError("pnv_neighbors: view index out of range");
    const int window = std::min(pnv, n_views);
    int start = i - (window - 1) / 2;
    start = std::max(0, std::min(start, n_views - window));
    std::vector<int> out;
    for (int j = start; j < start + window; ++j)
        if (j != i) out.push_back(j);
    return out;
}

// Keys/values are the concatenation of the selected other views' tokens; the
// slot all_image_tokens[view_index] is never read, so the output is invariant
// to arbitrary replacement of the view's own tokens in the pool.
inline Tensor cross_view_attention(const Tensor& query_tokens,
                                   const std::vector<Tensor>& all_image_tokens, int view_index,
                                   int pnv, const AttentionProj& w, int heads) {
    const std::vector<int> neighbors =
        pnv_neighbors(static_cast<int>(all_image_tokens.size()), view_index, pnv);
    std::vector<Tensor> pool;
    pool.reserve(neighbors.size());
    for (int j : neighbors) pool.push_back(all_image_tokens[static_cast<std::size_t>(j)]);
    const Tensor kv = pool.size() == 1 ? pool[0] : concat_rows(pool);
    return attention_core(w.q(query_tokens), w.k(kv), w.v(kv), heads);
}

struct CameraCrossWeights {
    Linear q;        // camera query
    Linear k_img, v_img;
    Linear k_cam, v_cam;

    static CameraCrossWeights make(ParameterStore& ps, const std::string& name, int dim,
                                   Rng& rng) {
        CameraCrossWeights w;
        w.q = Linear::make(ps, name + ".q", dim, dim, rng);
        w.k_img = Linear::make(ps, name + ".k_img", dim, dim, rng);
        w.v_img = Linear::make(ps, name + ".v_img", dim, dim, rng);
        w.k_cam = Linear::make(ps, name + ".k_cam", dim, dim, rng);
        w.v_cam = Linear::make(ps, name + ".v_cam", dim, dim, rng);
        return w;
    }
};

// Combined pool over the other views: each view contributes its image-token
// keys/values, summed elementwise with its camera key/value replicated across
// that view's token slots. Views without a camera token (the reference)
// contribute image keys/values alone.
inline Tensor camera_cross_attention(const Tensor& camera_token,
                                     const std::vector<Tensor>& other_image_tokens,
                                     const std::vector<Tensor>& other_camera_tokens,
                                     const CameraCrossWeights& w, int heads) {
    if (other_image_tokens.empty())
        throw ConfigError("camera_cross_attention: empty source pool");
    if (other_camera_tokens.size() != other_image_tokens.size())
        throw ShapeError("camera_cross_attention: per-view camera slots must align (may be undefined)");
    std::vector<Tensor> ks, vs;
    for (std::size_t j = 0; j < other_image_tokens.size(); ++j) {
        Tensor kj = w.k_img(other_image_tokens[j]);
        Tensor vj = w.v_img(other_image_tokens[j]);
        if (other_camera_tokens[j].defined()) {
            const int t = other_image_tokens[j].dim(0);
            kj = add(kj, repeat_rows(w.k_cam(other_camera_tokens[j]), t));
            vj = add(vj, repeat_rows(w.v_cam(other_camera_tokens[j]), t));
        }
        ks.push_back(kj);
        vs.push_back(vj);
    }
    const Tensor k = ks.size() == 1 ? ks[0] : concat_rows(ks);
    const Tensor v = vs.size() == 1 ? vs[0] : concat_rows(vs);
    return attention_core(w.q(camera_token), k, v, heads);
}

// ---------------------------------------------------------------------------
// Block
// ---------------------------------------------------------------------------

struct AdfBlock {
    ModulationMlp mod_pre, mod_post;
    LayerNormModule ln_img1, ln_cam1;
    AdfSelfWeights self_w;
    Linear img_self_out, cam_self_out;
    LayerNormModule ln_img2, ln_kv_img;
    AttentionProj img_cross;
    Linear img_cross_out;
    LayerNormModule ln_cam2, ln_kv_cam_img, ln_kv_cam_cam;
    CameraCrossWeights cam_cross;
    Linear cam_cross_out;
    LayerNormModule ln_img3, ln_cam3;
    Mlp img_mlp, cam_mlp;
    int heads = 1;

    static AdfBlock make(ParameterStore& ps, const std::string& name, int dim, int heads,
                         Rng& rng) {
        AdfBlock b;
        b.mod_pre = ModulationMlp::make(ps, name + ".mod_pre", dim, rng);
        b.mod_post = ModulationMlp::make(ps, name + ".mod_post", dim, rng);
        b.ln_img1 = LayerNormModule::make(ps, name + ".ln_img1", dim);
        b.ln_cam1 = LayerNormModule::make(ps, name + ".ln_cam1", dim);
        b.self_w = AdfSelfWeights::make(ps, name + ".self", dim, rng);
        b.img_self_out = Linear::make(ps, name + ".self.img_out", dim, dim, rng);
        b.cam_self_out = Linear::make(ps, name + ".self.cam_out", dim, dim, rng);
        b.ln_img2 = LayerNormModule::make(ps, name + ".ln_img2", dim);
        b.ln_kv_img = LayerNormModule::make(ps, name + ".ln_kv_img", dim);
        b.img_cross = AttentionProj::make(ps, name + ".img_cross", dim, rng);
        b.img_cross_out = Linear::make(ps, name + ".img_cross.out", dim, dim, rng);
        b.ln_cam2 = LayerNormModule::make(ps, name + ".ln_cam2", dim);
        b.ln_kv_cam_img = LayerNormModule::make(ps, name + ".ln_kv_cam_img", dim);
        b.ln_kv_cam_cam = LayerNormModule::make(ps, name + ".ln_kv_cam_cam", dim);
        b.cam_cross = CameraCrossWeights::make(ps, name + ".cam_cross", dim, rng);
        b.cam_cross_out = Linear::make(ps, name + ".cam_cross.out", dim, dim, rng);
        b.ln_img3 = LayerNormModule::make(ps, name + ".ln_img3", dim);
        b.ln_cam3 = LayerNormModule::make(ps, name + ".ln_cam3", dim);
        b.img_mlp = Mlp::make(ps, name + ".img_mlp", dim, 4 * dim, rng);
        b.cam_mlp = Mlp::make(ps, name + ".cam_mlp", dim, 4 * dim, rng);
        b.heads = heads;
        return b;
    }
};

// One ADF block over all non-reference streams.
//   image_tokens / camera_tokens: the N-1 non-reference streams (updated).
//   snapshot_all: block-input image tokens of ALL N views in input order
//                 (index 0 = reference; feeds cross-view keys/values).
// Global view index of non-reference stream vi is vi + 1.
inline void adf_block_apply(const AdfBlock& blk, std::vector<Tensor>& image_tokens,
                            std::vector<Tensor>& camera_tokens,
                            const std::vector<Tensor>& snapshot_all, int pnv,
                            bool detach_modulation = false) {
    const std::size_t n_streams = image_tokens.size();
    if (camera_tokens.size() != n_streams)
        throw ShapeError("adf_block_apply: stream count mismatch");
    if (snapshot_all.size() != n_streams + 1)
        throw ShapeError("adf_block_apply: snapshot must cover all views");
    const int n_views = static_cast<int>(snapshot_all.size());
    const std::vector<Tensor> cam_snapshot = camera_tokens;

    // Self-attention stage with pre/post modulation; per view, no cross talk.
    std::vector<Tensor> img_mid(n_streams), cam_mid(n_streams);
    for (std::size_t vi = 0; vi < n_streams; ++vi) {
        const Tensor cam_src =
            detach_modulation ? detach(camera_tokens[vi]) : camera_tokens[vi];
        const ModulationParams pre = blk.mod_pre(cam_src);
        Tensor h = modulate_pre(blk.ln_img1(image_tokens[vi]), pre);
        const AdfSelfResult sa =
            adf_self_attention(h, blk.ln_cam1(camera_tokens[vi]), blk.self_w, blk.heads);
        cam_mid[vi] = add(camera_tokens[vi], blk.cam_self_out(sa.camera_token));
        const Tensor post_src = detach_modulation ? detach(cam_mid[vi]) : cam_mid[vi];
        const ModulationParams post = blk.mod_post(post_src);
        img_mid[vi] = add(image_tokens[vi],
                          modulate_post(blk.img_self_out(sa.image_tokens), post));
    }

    // Cross stage: keys/values come from the block-input snapshots.
    std::vector<Tensor> kv_norm(snapshot_all.size());
    for (std::size_t j = 0; j < snapshot_all.size(); ++j)
        kv_norm[j] = blk.ln_kv_img(snapshot_all[j]);
    std::vector<Tensor> cam_kv_img(snapshot_all.size());
    for (std::size_t j = 0; j < snapshot_all.size(); ++j)
        cam_kv_img[j] = blk.ln_kv_cam_img(snapshot_all[j]);

    for (std::size_t vi = 0; vi < n_streams; ++vi) {
        const int gi = static_cast<int>(vi) + 1;
        // image cross-view attention over the pnv window
        Tensor x2 = add(img_mid[vi],
                        blk.img_cross_out(cross_view_attention(blk.ln_img2(img_mid[vi]),
                                                               kv_norm, gi, pnv,
                                                               blk.img_cross, blk.heads)));

        // camera cross-attention over all other views
        std::vector<Tensor> other_imgs, other_cams;
        for (int j = 0; j < n_views; ++j) {
            if (j == gi) continue;
            other_imgs.push_back(cam_kv_img[static_cast<std::size_t>(j)]);
            if (j == 0) {
                other_cams.emplace_back();  // reference view: no camera token
            } else {
                other_cams.push_back(
                    blk.ln_kv_cam_cam(cam_snapshot[static_cast<std::size_t>(j - 1)]));
            }
        }
        Tensor c2 = add(cam_mid[vi],
                        blk.cam_cross_out(camera_cross_attention(
                            blk.ln_cam2(cam_mid[vi]), other_imgs, other_cams, blk.cam_cross,
                            blk.heads)));

        image_tokens[vi] = add(x2, blk.img_mlp(blk.ln_img3(x2)));
        camera_tokens[vi] = add(c2, blk.cam_mlp(blk.ln_cam3(c2)));
    }
}

// ---------------------------------------------------------------------------
// Decoder
// ---------------------------------------------------------------------------

struct AdfDecoder {
    Tensor camera_embedding;  // [1, D] learnable, duplicated per view
    std::vector<AdfBlock> blocks;

    static AdfDecoder make(ParameterStore& ps, const std::string& name, int dim, int heads,
                           int depth, Rng& rng) {
        AdfDecoder d;
        d.camera_embedding = ps.create_randn(name + ".camera_embedding", {1, dim}, rng, 0.02f);
        for (int i = 0; i < depth; ++i)
            d.blocks.push_back(
                AdfBlock::make(ps, name + ".block" + std::to_string(i), dim, heads, rng));
        return d;
    }
};

// The single learnable embedding, duplicated for the N-1 non-reference views.
inline std::vector<Tensor> camera_token_init(const AdfDecoder& dec, int n_views) {
    if (n_views < 2) throw ConfigError("camera_token_init: the model requires N >= 2 views");
    return std::vector<Tensor>(static_cast<std::size_t>(n_views - 1), dec.camera_embedding);
}

}  // namespace tokensplat
