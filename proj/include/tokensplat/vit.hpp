#pragma once

// Per-view ViT encoder (weight-shared, strictly without cross-view
// interaction), the optional intrinsic token, and the Canonical Scene Decoder
// that cross-attends from the reference view into the other views' tokens.

#include <optional>
#include <string>
#include <vector>

#include "tokensplat/geometry.hpp"
#include "tokensplat/image.hpp"
#include "tokensplat/nn.hpp"

namespace tokensplat {

struct CameraView {
    Image image;
    Intrinsics intrinsics;
    std::optional<Pose> gt_pose;  // supervision and evaluation only
};

// [H,W,3] image -> [T, 3*P*P] patches, row-major patch order; within a patch,
// pixels in (py, px, channel) order. Lossless: unpatchify inverts bit-exactly.
inline Tensor patchify(const Image& img, int patch) {
    if (patch <= 0 || img.height % patch != 0 || img.width % patch != 0)
        throw ConfigError("patchify: image size must be divisible by the patch size");
    const int gh = img.height / patch, gw = img.width / patch;
    const int cols = 3 * patch * patch;
    std::vector<float> data(static_cast<std::size_t>(gh) * gw * cols);
    std::size_t o = 0;
    for (int py = 0; py < gh; ++py)
        for (int px = 0; px < gw; ++px)
            for (int y = 0; y < patch; ++y)
                for (int x = 0; x < patch; ++x)
                    for (int c = 0; c < 3; ++c)
                        data[o++] = img.at(px * patch + x, py * patch + y, c);
    return Tensor::from_data({gh * gw, cols}, std::move(data));
}

inline Image unpatchify(const Tensor& patches, int height, int width, int patch) {
    const int gh = height / patch, gw = width / patch;
    if (patches.ndim() != 2 || patches.dim(0) != gh * gw || patches.dim(1) != 3 * patch * patch)
        throw ShapeError("unpatchify: patch tensor does not match the target size");
    Image img(width, height);
    std::size_t o = 0;
    const auto& v = patches.values();
    for (int py = 0; py < gh; ++py)
        for (int px = 0; px < gw; ++px)
            for (int y = 0; y < patch; ++y)
                for (int x = 0; x < patch; ++x)
                    for (int c = 0; c < 3; ++c)
                        img.at(px * patch + x, py * patch + y, c) = v[o++];
    return img;
}

// Pre-norm transformer block: x += Attn(LN(x)); x += MLP(LN(x)).
struct EncoderBlock {
    LayerNormModule ln1, ln2;
    AttentionProj qkv;
    Linear out_proj;
    Mlp mlp;
    int heads = 1;

    static EncoderBlock make(ParameterStore& ps, const std::string& name, int dim, int heads,
                             Rng& rng) {
        EncoderBlock b;
        b.ln1 = LayerNormModule::make(ps, name + ".ln1", dim);
        b.ln2 = LayerNormModule::make(ps, name + ".ln2", dim);
        b.qkv = AttentionProj::make(ps, name + ".attn", dim, rng);
        b.out_proj = Linear::make(ps, name + ".attn.out", dim, dim, rng);
        b.mlp = Mlp::make(ps, name + ".mlp", dim, 4 * dim, rng);
        b.heads = heads;
        return b;
    }

    Tensor operator()(const Tensor& x) const {
        Tensor h = ln1(x);
        Tensor a = attention_core(qkv.q(h), qkv.k(h), qkv.v(h), heads);
        Tensor x1 = add(x, out_proj(a));
        return add(x1, mlp(ln2(x1)));
    }
};

// Weight-shared per-view encoder. Views never see each other here.
struct ViTEncoder {
    Linear patch_embed;      // 3P^2 -> D
    Linear intrinsic_embed;  // 4 -> D
    Tensor pos;              // [T, D] constant
    std::vector<EncoderBlock> blocks;
    LayerNormModule final_ln;
    int patch = 16;
    int heads = 1;
    bool use_intrinsic_token = true;

    static ViTEncoder make(ParameterStore& ps, const std::string& name, int dim, int heads,
                           int depth, int patch, int image_h, int image_w,
                           bool use_intrinsic_token, Rng& rng) {
        ViTEncoder e;
        e.patch = patch;
        e.heads = heads;
        e.use_intrinsic_token = use_intrinsic_token;
        e.patch_embed = Linear::make(ps, name + ".patch_embed", 3 * patch * patch, dim, rng);
        e.intrinsic_embed = Linear::make(ps, name + ".intrinsic_embed", 4, dim, rng);
        e.pos = sinusoidal_pos_embed(image_h / patch, image_w / patch, dim);
        for (int i = 0; i < depth; ++i)
            e.blocks.push_back(
                EncoderBlock::make(ps, name + ".block" + std::to_string(i), dim, heads, rng));
        e.final_ln = LayerNormModule::make(ps, name + ".final_ln", dim);
        return e;
    }

    // Linear map of the resolution-normalized intrinsics vector.
    Tensor intrinsic_token(const Intrinsics& k) const {
        k.validate();
        Tensor v = Tensor::from_data(
            {1, 4}, {static_cast<float>(k.fx / k.width), static_cast<float>(k.fy / k.height),
                     static_cast<float>(k.cx / k.width), static_cast<float>(k.cy / k.height)});
        return intrinsic_embed(v);
    }

    // [T, D] tokens, or [T+1, D] with the intrinsic token appended last.
    Tensor encode(const CameraView& view) const {
        Tensor x = patch_embed(patchify(view.image, patch));
        if (x.dim(0) != pos.dim(0))
            throw ConfigError("encode: image size does not match the configured grid");
        x = add(x, pos);
        if (use_intrinsic_token)
            x = concat_rows({x, intrinsic_token(view.intrinsics)});
        for (const auto& b : blocks) x = b(x);
        return final_ln(x);
    }
};

// Decoder block with cross-attention into an external token pool:
// x += SelfAttn(LN(x)); x += CrossAttn(LN(x), LN_kv(pool)); x += MLP(LN(x)).
struct CrossBlock {
    LayerNormModule ln1, ln2, ln3, ln_kv;
    AttentionProj self_qkv;
    Linear self_out;
    AttentionProj cross;
    Linear cross_out;
    Mlp mlp;
    int heads = 1;

    static CrossBlock make(ParameterStore& ps, const std::string& name, int dim, int heads,
                           Rng& rng) {
        CrossBlock b;
        b.ln1 = LayerNormModule::make(ps, name + ".ln1", dim);
        b.ln2 = LayerNormModule::make(ps, name + ".ln2", dim);
        b.ln3 = LayerNormModule::make(ps, name + ".ln3", dim);
        b.ln_kv = LayerNormModule::make(ps, name + ".ln_kv", dim);
        b.self_qkv = AttentionProj::make(ps, name + ".self", dim, rng);
        b.self_out = Linear::make(ps, name + ".self.out", dim, dim, rng);
        b.cross = AttentionProj::make(ps, name + ".cross", dim, rng);
        b.cross_out = Linear::make(ps, name + ".cross.out", dim, dim, rng);
        b.mlp = Mlp::make(ps, name + ".mlp", dim, 4 * dim, rng);
        b.heads = heads;
        return b;
    }

    Tensor operator()(const Tensor& x, const Tensor& kv_pool) const {
        Tensor h = ln1(x);
        Tensor x1 = add(x, self_out(attention_core(self_qkv.q(h), self_qkv.k(h),
                                                   self_qkv.v(h), heads)));
        Tensor pool = ln_kv(kv_pool);
        Tensor x2 = add(x1, cross_out(attention_core(cross.q(ln2(x1)), cross.k(pool),
                                                     cross.v(pool), heads)));
        return add(x2, mlp(ln3(x2)));
    }
};

struct CanonicalDecoder {
    std::vector<CrossBlock> blocks;

    static CanonicalDecoder make(ParameterStore& ps, const std::string& name, int dim,
                                 int heads, int depth, Rng& rng) {
        CanonicalDecoder d;
        for (int i = 0; i < depth; ++i)
            d.blocks.push_back(
                CrossBlock::make(ps, name + ".block" + std::to_string(i), dim, heads, rng));
        return d;
    }
};

// Standalone decode of the reference view against a fixed pool of the other
// views' tokens. The source views carry no view-index encoding, so the result
// is invariant to their order. `states`, when given, receives the block-input
// token state at every depth (states[depth] is the final output).
inline Tensor canonical_decode(const CanonicalDecoder& dec, const Tensor& ref_tokens,
                               const std::vector<Tensor>& other_view_tokens,
                               std::vector<Tensor>* states = nullptr) {
    if (other_view_tokens.empty())
        throw ConfigError("canonical_decode: at least one non-reference view is required");
    const Tensor pool = other_view_tokens.size() == 1 ? other_view_tokens[0]
                                                      : concat_rows(other_view_tokens);
    Tensor x = ref_tokens;
    if (states) states->push_back(x);
    for (const auto& b : dec.blocks) {
        x = b(x, pool);
        if (states) states->push_back(x);
    }
    return x;
}

}  // namespace tokensplat
