#pragma once

// Training losses (render L2 + optional perceptual hook, pose MSE + unit dual
// quaternion alignment, weighted total) and the evaluation metrics PSNR and
// SSIM. Tape versions drive training; the double-precision versions serve
// metrics and tests.

#include <cmath>
#include <functional>
#include <vector>

#include "tokensplat/geometry.hpp"
#include "tokensplat/image.hpp"
#include "tokensplat/tensor.hpp"

namespace tokensplat {

struct LossReport {
    double l_render = 0;
    double l_pose = 0;
    double l_align = 0;
    double l_mse_pose = 0;
    double total = 0;
    double lambda_lpips = 0;
    double lambda_c = 0;

    void check_invariant() const {
        if (l_render < -1e-9 || l_pose < -1e-9 || l_align < -1e-9 || l_mse_pose < -1e-9)
            throw ContractError("loss report: negative loss term");
        const double want = l_render + lambda_c * l_pose;
        if (std::fabs(total - want) > 1e-6 * std::max(1.0, std::fabs(want)))
            throw ContractError("loss report: total != l_render + lambda_c * l_pose");
    }
};

// Optional perceptual term; stays off unless a callback is installed.
using PerceptualLossFn = std::function<Tensor(const Tensor& pred, const Tensor& gt)>;

// Mean squared error plus lambda_lpips times the pluggable perceptual hook.
inline Tensor render_loss(const Tensor& pred, const Tensor& gt, float lambda_lpips = 0.0f,
                          const PerceptualLossFn& perceptual = nullptr) {
    if (pred.shape() != gt.shape()) throw ContractError("render_loss: image shapes differ");
    Tensor loss = mse(pred, gt);
    if (lambda_lpips != 0.0f && perceptual)
        loss = add(loss, scale(perceptual(pred, gt), lambda_lpips));
    return loss;
}

// ---------------------------------------------------------------------------
// Pose loss
// ---------------------------------------------------------------------------

namespace pose_detail {

inline UnitDualQuaternion canonical_dq(const Pose& p) {
    return pose_to_dq(p).canonical();
}

}  // namespace pose_detail

// Value-level name for the loss used in evaluation and as the tape oracle:
// MSE over the canonical 7-vector plus the unit-DQ alignment loss.
inline double pose_loss(const Pose& pred, const Pose& gt) {
    const Quaternion qp = pred.rotation.normalized().canonical();
    const Quaternion qg = gt.rotation.normalized().canonical();
    double mse7 = 0.0;
    mse7 += (qp.w - qg.w) * (qp.w - qg.w);
    mse7 += (qp.x - qg.x) * (qp.x - qg.x);
    mse7 += (qp.y - qg.y) * (qp.y - qg.y);
    mse7 += (qp.z - qg.z) * (qp.z - qg.z);
    mse7 += (pred.translation - gt.translation).squaredNorm();
    mse7 /= 7.0;
    return mse7 + dq_alignment_loss(pose_detail::canonical_dq(pred),
                                    pose_detail::canonical_dq(gt));
}

struct PoseLossParts {
    Tensor total;
    Tensor mse_part;
    Tensor align_part;
};

// Tape pose loss for one non-reference view from the raw [1,7] head output.
// The predicted quaternion is epsilon-normalized (identity at zero input) and
// sign-canonicalized before both terms.
inline PoseLossParts pose_loss_t(const Tensor& head_out, const Pose& gt) {
    if (head_out.ndim() != 2 || head_out.dim(0) != 1 || head_out.dim(1) != 7)
        throw ShapeError("pose_loss_t: head output must be [1,7]");

    Tensor q_raw = slice_cols(head_out, 0, 4);
    Tensor t = slice_cols(head_out, 4, 7);
    Tensor q_eps = add(q_raw, Tensor::from_data({1, 4}, {1e-6f, 0, 0, 0}));
    Tensor q_n = normalize_row(q_eps);
    // Double-cover canonicalization: flip by the sign of w. The sign is a
    // constant of the graph (piecewise constant in the inputs).
    const float sign = q_n.values()[0] >= 0.0f ? 1.0f : -1.0f;
    Tensor q = scale(q_n, sign);

    const Quaternion qg = gt.rotation.normalized().canonical();
    Tensor gt7 = Tensor::from_data(
        {1, 7},
        {static_cast<float>(qg.w), static_cast<float>(qg.x), static_cast<float>(qg.y),
         static_cast<float>(qg.z), static_cast<float>(gt.translation.x()),
         static_cast<float>(gt.translation.y()), static_cast<float>(gt.translation.z())});
    Tensor pred7 = concat_cols({q, t});
    Tensor d7 = sub(pred7, gt7);
    Tensor mse_part = mean(mul(d7, d7));

    // predicted unit DQ: real q, dual 0.5 * t (x) q
    Tensor t_pure = concat_cols({Tensor::zeros({1, 1}), t});
    Tensor qd = scale(quat_mul(t_pure, q), 0.5f);

    const UnitDualQuaternion gdq = pose_detail::canonical_dq(gt);
    Tensor gr = Tensor::from_data({1, 4}, {static_cast<float>(gdq.real.w),
                                           static_cast<float>(gdq.real.x),
                                           static_cast<float>(gdq.real.y),
                                           static_cast<float>(gdq.real.z)});
    Tensor gd = Tensor::from_data({1, 4}, {static_cast<float>(gdq.dual[0]),
                                           static_cast<float>(gdq.dual[1]),
                                           static_cast<float>(gdq.dual[2]),
                                           static_cast<float>(gdq.dual[3])});
    Tensor conj_mask = Tensor::from_data({1, 4}, {1, -1, -1, -1});
    Tensor id_real = Tensor::from_data({1, 4}, {1, 0, 0, 0});
    Tensor id_dual = Tensor::zeros({1, 4});

    auto dq_norm_deficit = [&](const Tensor& ar, const Tensor& ad, const Tensor& br,
                               const Tensor& bd) {
        // || identity - (a (x) conj(b)) || over the 8-vector
        Tensor brc = mul(br, conj_mask);
        Tensor bdc = mul(bd, conj_mask);
        Tensor pr = quat_mul(ar, brc);
        Tensor pd = add(quat_mul(ar, bdc), quat_mul(ad, brc));
        Tensor dr = sub(id_real, pr);
        Tensor dd = sub(id_dual, pd);
        Tensor ss = add(sum(mul(dr, dr)), sum(mul(dd, dd)));
        return tokensplat::sqrt(add_scalar(ss, 1e-12f));
    };

    Tensor align_part = add(dq_norm_deficit(q, qd, gr, gd), dq_norm_deficit(gr, gd, q, qd));

    PoseLossParts out;
    out.mse_part = mse_part;
    out.align_part = align_part;
    out.total = add(mse_part, align_part);
    return out;
}

// total = l_render + lambda_c * l_pose
inline Tensor total_loss(const Tensor& l_render, const Tensor& l_pose, float lambda_c) {
    return add(l_render, scale(l_pose, lambda_c));
}

// ---------------------------------------------------------------------------
// PSNR / SSIM
// ---------------------------------------------------------------------------

inline constexpr double kPsnrCap = 100.0;

inline double psnr(const Image& a, const Image& b) {
    if (a.width != b.width || a.height != b.height)
        throw ContractError("psnr: image shapes differ");
    double acc = 0.0;
    for (std::size_t i = 0; i < a.data.size(); ++i) {
        const double d = static_cast<double>(a.data[i]) - b.data[i];
        acc += d * d;
    }
    const double mse_v = acc / static_cast<double>(a.data.size());
    if (mse_v <= 0.0) return kPsnrCap;
    return std::min(kPsnrCap, 10.0 * std::log10(1.0 / mse_v));
}

namespace ssim_detail {

inline std::vector<double> gaussian_window11() {
    std::vector<double> w(11);
    const double sigma = 1.5;
    double sum = 0.0;
    for (int i = 0; i < 11; ++i) {
        const double x = i - 5;
        w[static_cast<std::size_t>(i)] = std::exp(-x * x / (2.0 * sigma * sigma));
        sum += w[static_cast<std::size_t>(i)];
    }
    for (auto& v : w) v /= sum;
    return w;
}

}  // namespace ssim_detail

// Structural similarity with an 11x11 Gaussian window (sigma 1.5),
// C1=(0.01)^2, C2=(0.03)^2, evaluated on the valid region (no padding) and
// averaged over channels.
inline double ssim(const Image& a, const Image& b) {
    if (a.width != b.width || a.height != b.height)
        throw ContractError("ssim: image shapes differ");
    if (a.width < 11 || a.height < 11)
        throw ContractError("ssim: images must be at least 11x11");
    const std::vector<double> win = ssim_detail::gaussian_window11();
    const double c1 = 0.01 * 0.01, c2 = 0.03 * 0.03;
    const int w = a.width, h = a.height;
    double total = 0.0;
    for (int ch = 0; ch < 3; ++ch) {
        double acc = 0.0;
        int count = 0;
        for (int y = 0; y + 11 <= h; ++y) {
            for (int x = 0; x + 11 <= w; ++x) {
                double mx = 0, my = 0, sxx = 0, syy = 0, sxy = 0;
                for (int dy = 0; dy < 11; ++dy)
                    for (int dx = 0; dx < 11; ++dx) {
                        const double ww = win[static_cast<std::size_t>(dy)] *
                                          win[static_cast<std::size_t>(dx)];
                        const double va = a.at(x + dx, y + dy, ch);
                        const double vb = b.at(x + dx, y + dy, ch);
                        mx += ww * va;
                        my += ww * vb;
                        sxx += ww * va * va;
                        syy += ww * vb * vb;
                        sxy += ww * va * vb;
                    }
                const double vx = sxx - mx * mx;
                const double vy = syy - my * my;
                const double cxy = sxy - mx * my;
                const double num = (2 * mx * my + c1) * (2 * cxy + c2);
                const double den = (mx * mx + my * my + c1) * (vx + vy + c2);
                acc += num / den;
                ++count;
            }
        }
        total += acc / count;
    }
    return total / 3.0;
}

}  // namespace tokensplat
