#pragma once

// Small neural-network building blocks on top of the tensor tape: affine
// layers, layer norm, MLPs, the bare multi-head attention core, and the fixed
// 2D sinusoidal positional embedding.

#include <cmath>
#include <string>
#include <vector>

#include "tokensplat/checkpoint.hpp"
#include "tokensplat/tensor.hpp"

namespace tokensplat {

struct Linear {
    Tensor w;  // [in, out]
    Tensor b;  // [out]

    static Linear make(ParameterStore& ps, const std::string& name, int in, int out, Rng& rng,
                       float w_std = 0.02f) {
        Linear l;
        l.w = ps.create_randn(name + ".w", {in, out}, rng, w_std);
        l.b = ps.create_zeros(name + ".b", {out});
        return l;
    }

    static Linear make_zero(ParameterStore& ps, const std::string& name, int in, int out) {
        Linear l;
        l.w = ps.create_zeros(name + ".w", {in, out});
        l.b = ps.create_zeros(name + ".b", {out});
        return l;
    }

    Tensor operator()(const Tensor& x) const { return linear(x, w, b); }
};

struct LayerNormModule {
    Tensor gain;  // [dim]
    Tensor bias;  // [dim]

    static LayerNormModule make(ParameterStore& ps, const std::string& name, int dim) {
        LayerNormModule ln;
        ln.gain = ps.create(name + ".gain", {dim}, std::vector<float>(static_cast<std::size_t>(dim), 1.0f));
        ln.bias = ps.create_zeros(name + ".bias", {dim});
        return ln;
    }

    Tensor operator()(const Tensor& x) const { return layernorm(x, gain, bias); }
};

struct Mlp {
    Linear fc1, fc2;

    static Mlp make(ParameterStore& ps, const std::string& name, int dim, int hidden, Rng& rng) {
        Mlp m;
        m.fc1 = Linear::make(ps, name + ".fc1", dim, hidden, rng);
        m.fc2 = Linear::make(ps, name + ".fc2", hidden, dim, rng);
        return m;
    }

    Tensor operator()(const Tensor& x) const { return fc2(gelu(fc1(x))); }
};

struct AttentionProj {
    Linear q, k, v;

    static AttentionProj make(ParameterStore& ps, const std::string& name, int dim, Rng& rng) {
        AttentionProj p;
        p.q = Linear::make(ps, name + ".q", dim, dim, rng);
        p.k = Linear::make(ps, name + ".k", dim, dim, rng);
        p.v = Linear::make(ps, name + ".v", dim, dim, rng);
        return p;
    }
};

// softmax(Q K^T / sqrt(d_head)) V per head, heads concatenated. No output
// projection; callers own residuals and projections.
inline Tensor attention_core(const Tensor& q, const Tensor& k, const Tensor& v, int heads) {
    detail::check_2d(q, "attention_core");
    detail::check_2d(k, "attention_core");
    detail::check_2d(v, "attention_core");
    const int dim = q.dim(1);
    if (k.dim(1) != dim || v.dim(1) != dim)
        throw ShapeError("attention_core: q/k/v widths differ");
    if (k.dim(0) != v.dim(0)) throw ShapeError("attention_core: k/v token counts differ");
    if (heads < 1 || dim % heads != 0)
        throw ShapeError("attention_core: width must be divisible by heads");
    const int dh = dim / heads;
    const float inv_sqrt_d = 1.0f / std::sqrt(static_cast<float>(dh));
    std::vector<Tensor> outs;
    outs.reserve(static_cast<std::size_t>(heads));
    for (int h = 0; h < heads; ++h) {
        Tensor qh = slice_cols(q, h * dh, (h + 1) * dh);
        Tensor kh = slice_cols(k, h * dh, (h + 1) * dh);
        Tensor vh = slice_cols(v, h * dh, (h + 1) * dh);
        Tensor scores = scale(matmul(qh, transpose(kh)), inv_sqrt_d);
        Tensor attn = softmax(scores, 1);
        outs.push_back(matmul(attn, vh));
    }
    return heads == 1 ? outs[0] : concat_cols(outs);
}

// Fixed 2D sinusoidal positional embedding over a gh x gw patch grid,
// row-major patch order. Half the channels encode y, half encode x.
inline Tensor sinusoidal_pos_embed(int gh, int gw, int dim) {
    if (dim % 2 != 0) throw ConfigError("positional embedding needs an even width");
    const int half = dim / 2;
    std::vector<float> data(static_cast<std::size_t>(gh) * gw * dim, 0.0f);
    auto fill_axis = [&](int offset, int axis_dim, auto coord_of) {
        const int pairs = axis_dim / 2;
        for (int t = 0; t < gh * gw; ++t) {
            const double pos = coord_of(t);
            for (int i = 0; i < pairs; ++i) {
                const double freq = std::pow(10000.0, -2.0 * i / axis_dim);
                data[static_cast<std::size_t>(t) * dim + offset + 2 * i] =
                    static_cast<float>(std::sin(pos * freq));
                data[static_cast<std::size_t>(t) * dim + offset + 2 * i + 1] =
                    static_cast<float>(std::cos(pos * freq));
            }
        }
    };
    fill_axis(0, half, [&](int t) { return static_cast<double>(t / gw); });
    fill_axis(half, dim - half, [&](int t) { return static_cast<double>(t % gw); });
    return Tensor::from_data({gh * gw, dim}, std::move(data));
}

}  // namespace tokensplat
