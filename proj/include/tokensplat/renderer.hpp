#pragma once

// Differentiable forward rasterizer for 3D Gaussian scenes: project every
// Gaussian to an image-space splat, sort front-to-back, alpha-composite per
// pixel. The backward pass is hand-derived and returns gradients for every
// Gaussian attribute and the 7 raw camera pose parameters; it is validated
// against central finite differences by the test suite.
//
// Internals run in double; tensors and images stay float32 at the boundary.
// Pixel (ix, iy) is sampled at (ix + 0.5, iy + 0.5).

#include <Eigen/Dense>
#include <algorithm>
#include <array>
#include <cmath>
#include <numeric>
#include <optional>
#include <vector>

#include "tokensplat/common.hpp"
#include "tokensplat/gaussian.hpp"
#include "tokensplat/geometry.hpp"
#include "tokensplat/image.hpp"
#include "tokensplat/tensor.hpp"

namespace tokensplat {

struct RenderOptions {
    double near_plane = 0.01;
    std::array<float, 3> background{0.0f, 0.0f, 0.0f};
    double alpha_clamp = 0.99;            // per-splat alpha ceiling
    double transmittance_floor = 1e-4;    // early exit once T drops below
    double aa_variance_floor = 0.3;       // px^2 added to the cov2d diagonal
    bool tiled = false;                   // forward-only speedup; truncates at 3-sigma boxes
    int tile_size = 32;
};

struct Splat2D {
    Eigen::Vector2d mean2d;
    Eigen::Matrix2d cov2d;
    double depth = 0.0;
    Eigen::Vector3d rgb;
    double opacity = 0.0;
};

struct RenderStats {
    int total = 0;
    int culled = 0;
    int singular_skipped = 0;
    int drawn = 0;
};

struct RenderedImage {
    Image pixels;
    std::vector<float> alpha;  // H*W accumulated opacity
};

namespace render_detail {

// Read-only SoA view over the Gaussian inputs of one render call.
struct GaussianArrays {
    const float* centers;    // G x 3
    const float* opacities;  // G (activated, in (0,1))
    const float* rotations;  // G x 4 (normalized internally with an epsilon)
    const float* scales;     // G x 3 (positive)
    const float* sh;         // G x 3*n_coeff
    int count = 0;
    int sh_degree = 0;
};

struct CameraSetup {
    double q_raw[4];        // pose quaternion as given
    double q_hat[4];        // epsilon-normalized
    double q_norm_reg;      // sqrt(|q_raw|^2 + eps)
    Eigen::Matrix3d r_c2w;  // camera-to-canonical rotation
    Eigen::Matrix3d w;      // canonical-to-camera rotation (r_c2w^T)
    Eigen::Vector3d t;      // camera center in the canonical frame
};

constexpr double kQuatEps = 1e-12;

inline void eps_normalize4(const double raw[4], double out[4], double& norm_reg) {
    const double n2 = raw[0] * raw[0] + raw[1] * raw[1] + raw[2] * raw[2] + raw[3] * raw[3];
    norm_reg = std::sqrt(n2 + kQuatEps);
    for (int i = 0; i < 4; ++i) out[i] = raw[i] / norm_reg;
}

inline Eigen::Matrix3d rotmat_from_unit(const double q[4]) {
    const double w = q[0], x = q[1], y = q[2], z = q[3];
    Eigen::Matrix3d r;
    r << 1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
         2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
         2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y);
    return r;
}

// Accumulate dL/d(q_hat) -> dL/d(q_raw) through the epsilon normalization.
inline void quat_normalize_backward(const double raw[4], double norm_reg,
                                    const double g_hat[4], double g_raw[4]) {
    double dot = 0.0;
    for (int i = 0; i < 4; ++i) dot += g_hat[i] * raw[i];
    const double s3 = norm_reg * norm_reg * norm_reg;
    for (int i = 0; i < 4; ++i) g_raw[i] += g_hat[i] / norm_reg - dot * raw[i] / s3;
}

// dL/dR -> dL/d(q_hat) for the rotation matrix above (unit quaternion).
inline void rotmat_backward(const double q[4], const Eigen::Matrix3d& g_r, double g_q[4]) {
    const double w = q[0], x = q[1], y = q[2], z = q[3];
    g_q[0] += 2.0 * (g_r(0, 1) * -z + g_r(0, 2) * y + g_r(1, 0) * z + g_r(1, 2) * -x +
                     g_r(2, 0) * -y + g_r(2, 1) * x);
    g_q[1] += 2.0 * (g_r(0, 1) * y + g_r(0, 2) * z + g_r(1, 0) * y + g_r(1, 1) * -2.0 * x +
                     g_r(1, 2) * -w + g_r(2, 0) * z + g_r(2, 1) * w + g_r(2, 2) * -2.0 * x);
    g_q[2] += 2.0 * (g_r(0, 0) * -2.0 * y + g_r(0, 1) * x + g_r(0, 2) * w + g_r(1, 0) * x +
                     g_r(1, 2) * z + g_r(2, 0) * -w + g_r(2, 1) * z + g_r(2, 2) * -2.0 * y);
    g_q[3] += 2.0 * (g_r(0, 0) * -2.0 * z + g_r(0, 1) * -w + g_r(0, 2) * x + g_r(1, 0) * w +
                     g_r(1, 1) * -2.0 * z + g_r(1, 2) * y + g_r(2, 0) * x + g_r(2, 1) * y);
}

inline CameraSetup camera_setup(const double pose_raw[7]) {
    CameraSetup cam;
    for (int i = 0; i < 4; ++i) cam.q_raw[i] = pose_raw[i];
    eps_normalize4(cam.q_raw, cam.q_hat, cam.q_norm_reg);
    cam.r_c2w = rotmat_from_unit(cam.q_hat);
    cam.w = cam.r_c2w.transpose();
    cam.t = Eigen::Vector3d(pose_raw[4], pose_raw[5], pose_raw[6]);
    return cam;
}

// Everything the backward pass needs to replay one splat.
struct Prepared {
    int index = -1;
    double mean_u = 0, mean_v = 0, depth = 0;
    double cov00 = 0, cov01 = 0, cov11 = 0;  // after the AA floor
    double ic00 = 0, ic01 = 0, ic11 = 0;
    double rgb[3] = {0, 0, 0};
    double rgb_raw[3] = {0, 0, 0};  // before the [0,1] clamp
    double opacity = 0;
    double radius = 0;  // 3*sqrt(lambda_max)
    // saved intermediates
    double qg_raw[4] = {1, 0, 0, 0};
    double qg_hat[4] = {1, 0, 0, 0};
    double qg_norm_reg = 1;
    Eigen::Matrix3d r_g;
    Eigen::Vector3d s;
    Eigen::Matrix3d sigma;
    Eigen::Vector3d p_cam;
    Eigen::Matrix<double, 2, 3> j;
    Eigen::Matrix<double, 2, 3> m;       // J * W
    Eigen::Vector3d view_dir;
    double view_norm = 0;
    double basis[16] = {0};
};

enum class PrepareResult { kOk, kCulled, kSingular };

inline PrepareResult prepare_splat(const GaussianArrays& in, int g, const CameraSetup& cam,
                                   const Intrinsics& k, const RenderOptions& opt,
                                   Prepared& out) {
    out.index = g;
    const float* c = in.centers + static_cast<std::size_t>(g) * 3;
    const Eigen::Vector3d mu(c[0], c[1], c[2]);

    const Eigen::Vector3d rel = mu - cam.t;
    out.p_cam = cam.w * rel;
    out.depth = out.p_cam.z();
    if (out.depth <= opt.near_plane) return PrepareResult::kCulled;

    const double x = out.p_cam.x(), y = out.p_cam.y(), z = out.p_cam.z();
    out.mean_u = k.fx * x / z + k.cx;
    out.mean_v = k.fy * y / z + k.cy;

    const float* rr = in.rotations + static_cast<std::size_t>(g) * 4;
    for (int i = 0; i < 4; ++i) out.qg_raw[i] = rr[i];
    eps_normalize4(out.qg_raw, out.qg_hat, out.qg_norm_reg);
    out.r_g = rotmat_from_unit(out.qg_hat);

    const float* sv = in.scales + static_cast<std::size_t>(g) * 3;
    out.s = Eigen::Vector3d(sv[0], sv[1], sv[2]);
    const Eigen::Matrix3d a =
        Eigen::Vector3d(out.s.x() * out.s.x(), out.s.y() * out.s.y(), out.s.z() * out.s.z())
            .asDiagonal();
    out.sigma = out.r_g * a * out.r_g.transpose();

    out.j.setZero();
    out.j(0, 0) = k.fx / z;
    out.j(0, 2) = -k.fx * x / (z * z);
    out.j(1, 1) = k.fy / z;
    out.j(1, 2) = -k.fy * y / (z * z);
    out.m = out.j * cam.w;

    const Eigen::Matrix2d cov2 = out.m * out.sigma * out.m.transpose();
    out.cov00 = cov2(0, 0) + opt.aa_variance_floor;
    out.cov01 = 0.5 * (cov2(0, 1) + cov2(1, 0));
    out.cov11 = cov2(1, 1) + opt.aa_variance_floor;

    const double det = out.cov00 * out.cov11 - out.cov01 * out.cov01;
    if (det <= 0.0 || !std::isfinite(det)) return PrepareResult::kSingular;
    out.ic00 = out.cov11 / det;
    out.ic01 = -out.cov01 / det;
    out.ic11 = out.cov00 / det;

    const double mid = 0.5 * (out.cov00 + out.cov11);
    const double disc = std::sqrt(std::max(0.0, mid * mid - det));
    out.radius = 3.0 * std::sqrt(std::max(1e-12, mid + disc));
    if (out.mean_u + out.radius < 0.0 || out.mean_u - out.radius > k.width ||
        out.mean_v + out.radius < 0.0 || out.mean_v - out.radius > k.height)
        return PrepareResult::kCulled;

    out.view_norm = rel.norm();
    out.view_dir = rel / std::max(out.view_norm, 1e-12);
    sh::basis(in.sh_degree, out.view_dir, out.basis);
    const int n_coeff = sh_coeff_count(in.sh_degree);
    const float* co = in.sh + static_cast<std::size_t>(g) * 3 * n_coeff;
    for (int ch = 0; ch < 3; ++ch) {
        double acc = 0.5;
        for (int mcoef = 0; mcoef < n_coeff; ++mcoef)
            acc += co[ch * n_coeff + mcoef] * out.basis[mcoef];
        out.rgb_raw[ch] = acc;
        out.rgb[ch] = std::clamp(acc, 0.0, 1.0);
    }

    out.opacity = in.opacities[g];
    return PrepareResult::kOk;
}

inline std::vector<Prepared> prepare_all(const GaussianArrays& in, const CameraSetup& cam,
                                         const Intrinsics& k, const RenderOptions& opt,
                                         RenderStats* stats) {
    std::vector<Prepared> splats;
    splats.reserve(static_cast<std::size_t>(in.count));
    RenderStats local;
    local.total = in.count;
    for (int g = 0; g < in.count; ++g) {
        Prepared p;
        switch (prepare_splat(in, g, cam, k, opt, p)) {
            case PrepareResult::kOk:
                splats.push_back(p);
                break;
            case PrepareResult::kCulled:
                ++local.culled;
                break;
            case PrepareResult::kSingular:
                ++local.singular_skipped;
                break;
        }
    }
    // Front-to-back with a stable tie-break on the original index.
    std::sort(splats.begin(), splats.end(), [](const Prepared& a, const Prepared& b) {
        if (a.depth != b.depth) return a.depth < b.depth;
        return a.index < b.index;
    });
    local.drawn = static_cast<int>(splats.size());
    if (stats) *stats = local;
    return splats;
}

// Composites one pixel; returns accumulated alpha. `sink` receives
// (splat position in `splats`, alpha, gaussian weight, d0, d1, T_before,
// clamped) for every included contribution when non-null.
template <typename Sink>
inline double composite_pixel(const std::vector<Prepared>& splats, double px, double py,
                              const RenderOptions& opt, double rgb_out[3], Sink&& sink,
                              const std::vector<int>* subset = nullptr) {
    double t = 1.0;
    double c[3] = {0, 0, 0};
    double a = 0.0;
    const std::size_t n = subset ? subset->size() : splats.size();
    for (std::size_t ii = 0; ii < n; ++ii) {
        const std::size_t si = subset ? static_cast<std::size_t>((*subset)[ii]) : ii;
        const Prepared& sp = splats[si];
        const double d0 = px - sp.mean_u;
        const double d1 = py - sp.mean_v;
        const double maha = sp.ic00 * d0 * d0 + 2.0 * sp.ic01 * d0 * d1 + sp.ic11 * d1 * d1;
        const double gw = std::exp(-0.5 * maha);
        const double alpha_un = sp.opacity * gw;
        const bool clamped = alpha_un > opt.alpha_clamp;
        const double alpha = clamped ? opt.alpha_clamp : alpha_un;
        const double new_t = t * (1.0 - alpha);
        if (new_t < opt.transmittance_floor) break;
        c[0] += t * alpha * sp.rgb[0];
        c[1] += t * alpha * sp.rgb[1];
        c[2] += t * alpha * sp.rgb[2];
        a += t * alpha;
        sink(si, alpha, gw, d0, d1, t, clamped);
        t = new_t;
    }
    rgb_out[0] = c[0] + t * opt.background[0];
    rgb_out[1] = c[1] + t * opt.background[1];
    rgb_out[2] = c[2] + t * opt.background[2];
    return a;
}

struct NullSink {
    void operator()(std::size_t, double, double, double, double, double, bool) const {}
};

inline RenderedImage render_arrays(const GaussianArrays& in, const double pose_raw[7],
                                   const Intrinsics& k, const RenderOptions& opt,
                                   RenderStats* stats) {
    const CameraSetup cam = camera_setup(pose_raw);
    const std::vector<Prepared> splats = prepare_all(in, cam, k, opt, stats);

    RenderedImage out;
    out.pixels = Image(k.width, k.height);
    out.alpha.assign(static_cast<std::size_t>(k.width) * k.height, 0.0f);

    if (!opt.tiled) {
        parallel_for(static_cast<std::size_t>(k.height), [&](std::size_t y0, std::size_t y1, int) {
            for (std::size_t y = y0; y < y1; ++y) {
                for (int x = 0; x < k.width; ++x) {
                    double rgb[3];
                    const double a = composite_pixel(splats, x + 0.5, y + 0.5, opt, rgb,
                                                     NullSink{});
                    const std::size_t pi = y * static_cast<std::size_t>(k.width) + x;
                    out.pixels.data[pi * 3 + 0] = static_cast<float>(rgb[0]);
                    out.pixels.data[pi * 3 + 1] = static_cast<float>(rgb[1]);
                    out.pixels.data[pi * 3 + 2] = static_cast<float>(rgb[2]);
                    out.alpha[pi] = static_cast<float>(a);
                }
            }
        });
        return out;
    }

    // Tiled pass: splats are binned by their 3-sigma boxes, so contributions
    // beyond that extent are dropped. Slightly approximate, forward only.
    const int ts = std::max(1, opt.tile_size);
    const int tiles_x = (k.width + ts - 1) / ts;
    const int tiles_y = (k.height + ts - 1) / ts;
    std::vector<std::vector<int>> bins(static_cast<std::size_t>(tiles_x) * tiles_y);
    for (std::size_t si = 0; si < splats.size(); ++si) {
        const Prepared& sp = splats[si];
        const int x0 = std::clamp(static_cast<int>((sp.mean_u - sp.radius) / ts), 0, tiles_x - 1);
        const int x1 = std::clamp(static_cast<int>((sp.mean_u + sp.radius) / ts), 0, tiles_x - 1);
        const int y0 = std::clamp(static_cast<int>((sp.mean_v - sp.radius) / ts), 0, tiles_y - 1);
        const int y1 = std::clamp(static_cast<int>((sp.mean_v + sp.radius) / ts), 0, tiles_y - 1);
        for (int ty = y0; ty <= y1; ++ty)
            for (int tx = x0; tx <= x1; ++tx)
                bins[static_cast<std::size_t>(ty) * tiles_x + tx].push_back(static_cast<int>(si));
    }
    parallel_for(static_cast<std::size_t>(tiles_y), [&](std::size_t t0, std::size_t t1, int) {
        for (std::size_t ty = t0; ty < t1; ++ty) {
            for (int tx = 0; tx < tiles_x; ++tx) {
                const auto& bin = bins[ty * static_cast<std::size_t>(tiles_x) + tx];
                const int ybeg = static_cast<int>(ty) * ts;
                const int yend = std::min(k.height, ybeg + ts);
                const int xbeg = tx * ts;
                const int xend = std::min(k.width, xbeg + ts);
                for (int y = ybeg; y < yend; ++y)
                    for (int x = xbeg; x < xend; ++x) {
                        double rgb[3];
                        const double a = composite_pixel(splats, x + 0.5, y + 0.5, opt, rgb,
                                                         NullSink{}, &bin);
                        const std::size_t pi =
                            static_cast<std::size_t>(y) * k.width + x;
                        out.pixels.data[pi * 3 + 0] = static_cast<float>(rgb[0]);
                        out.pixels.data[pi * 3 + 1] = static_cast<float>(rgb[1]);
                        out.pixels.data[pi * 3 + 2] = static_cast<float>(rgb[2]);
                        out.alpha[pi] = static_cast<float>(a);
                    }
            }
        }
    });
    return out;
}

// Per-splat gradient accumulators in image space.
struct SplatGrads {
    double mean[2] = {0, 0};
    double icov[4] = {0, 0, 0, 0};  // full 2x2 (00, 01, 10, 11)
    double rgb[3] = {0, 0, 0};
    double opacity = 0;
};

struct ArrayGrads {
    std::vector<double> centers;    // G x 3
    std::vector<double> opacities;  // G
    std::vector<double> rotations;  // G x 4
    std::vector<double> scales;     // G x 3
    std::vector<double> sh;         // G x 3*n_coeff
    double pose[7] = {0, 0, 0, 0, 0, 0, 0};
};

inline ArrayGrads render_backward_arrays(const GaussianArrays& in, const double pose_raw[7],
                                         const Intrinsics& k, const float* pixel_grads,
                                         const RenderOptions& opt) {
    const CameraSetup cam = camera_setup(pose_raw);
    const std::vector<Prepared> splats = prepare_all(in, cam, k, opt, nullptr);
    const int n_coeff = sh_coeff_count(in.sh_degree);

    ArrayGrads out;
    out.centers.assign(static_cast<std::size_t>(in.count) * 3, 0.0);
    out.opacities.assign(static_cast<std::size_t>(in.count), 0.0);
    out.rotations.assign(static_cast<std::size_t>(in.count) * 4, 0.0);
    out.scales.assign(static_cast<std::size_t>(in.count) * 3, 0.0);
    out.sh.assign(static_cast<std::size_t>(in.count) * 3 * n_coeff, 0.0);

    // --- pixel pass: accumulate image-space gradients per splat -----------
    const int workers = worker_count(static_cast<std::size_t>(k.height));
    std::vector<std::vector<SplatGrads>> partial(
        static_cast<std::size_t>(workers), std::vector<SplatGrads>(splats.size()));

    struct Contrib {
        std::size_t si;
        double alpha, gw, d0, d1, t_before;
        bool clamped;
    };

    parallel_for(static_cast<std::size_t>(k.height), [&](std::size_t y0, std::size_t y1, int w) {
        auto& acc = partial[static_cast<std::size_t>(w)];
        std::vector<Contrib> contribs;
        for (std::size_t y = y0; y < y1; ++y) {
            for (int x = 0; x < k.width; ++x) {
                const std::size_t pi = y * static_cast<std::size_t>(k.width) + x;
                const double g_pix[3] = {pixel_grads[pi * 3 + 0], pixel_grads[pi * 3 + 1],
                                         pixel_grads[pi * 3 + 2]};
                if (g_pix[0] == 0.0 && g_pix[1] == 0.0 && g_pix[2] == 0.0) continue;
                contribs.clear();
                double rgb_unused[3];
                composite_pixel(splats, x + 0.5, y + 0.5, opt, rgb_unused,
                                [&](std::size_t si, double alpha, double gw, double d0,
                                    double d1, double t_before, bool clamped) {
                                    contribs.push_back(
                                        {si, alpha, gw, d0, d1, t_before, clamped});
                                });
                // Reverse sweep with the suffix color ("what lies behind").
                double suffix[3] = {opt.background[0], opt.background[1], opt.background[2]};
                for (std::size_t r = contribs.size(); r-- > 0;) {
                    const Contrib& cb = contribs[r];
                    const Prepared& sp = splats[cb.si];
                    SplatGrads& sg = acc[cb.si];
                    double g_alpha = 0.0;
                    for (int ch = 0; ch < 3; ++ch) {
                        sg.rgb[ch] += g_pix[ch] * cb.t_before * cb.alpha;
                        g_alpha += g_pix[ch] * cb.t_before * (sp.rgb[ch] - suffix[ch]);
                    }
                    if (!cb.clamped) {
                        sg.opacity += g_alpha * cb.gw;
                        const double g_maha = g_alpha * sp.opacity * (-0.5) * cb.gw;
                        const double gd0 =
                            g_maha * (2.0 * sp.ic00 * cb.d0 + 2.0 * sp.ic01 * cb.d1);
                        const double gd1 =
                            g_maha * (2.0 * sp.ic11 * cb.d1 + 2.0 * sp.ic01 * cb.d0);
                        sg.mean[0] -= gd0;
                        sg.mean[1] -= gd1;
                        sg.icov[0] += g_maha * cb.d0 * cb.d0;
                        sg.icov[1] += g_maha * cb.d0 * cb.d1;
                        sg.icov[2] += g_maha * cb.d0 * cb.d1;
                        sg.icov[3] += g_maha * cb.d1 * cb.d1;
                    }
                    for (int ch = 0; ch < 3; ++ch)
                        suffix[ch] = cb.alpha * sp.rgb[ch] + (1.0 - cb.alpha) * suffix[ch];
                }
            }
        }
    });

    std::vector<SplatGrads> image_grads(splats.size());
    for (int w = 0; w < workers; ++w)
        for (std::size_t si = 0; si < splats.size(); ++si) {
            for (int i = 0; i < 2; ++i) image_grads[si].mean[i] += partial[w][si].mean[i];
            for (int i = 0; i < 4; ++i) image_grads[si].icov[i] += partial[w][si].icov[i];
            for (int i = 0; i < 3; ++i) image_grads[si].rgb[i] += partial[w][si].rgb[i];
            image_grads[si].opacity += partial[w][si].opacity;
        }

    // --- per-splat pass: chain image-space gradients to 3D attributes -----
    const int sworkers = worker_count(splats.size());
    std::vector<std::array<double, 7>> pose_partial(static_cast<std::size_t>(sworkers),
                                                    {0, 0, 0, 0, 0, 0, 0});
    parallel_for(splats.size(), [&](std::size_t s0, std::size_t s1, int w) {
        double* pose_acc = pose_partial[static_cast<std::size_t>(w)].data();
        for (std::size_t si = s0; si < s1; ++si) {
            const Prepared& sp = splats[si];
            const SplatGrads& sg = image_grads[si];
            const int g = sp.index;

            out.opacities[static_cast<std::size_t>(g)] += sg.opacity;

            Eigen::Vector3d g_mu = Eigen::Vector3d::Zero();
            Eigen::Vector3d g_tc = Eigen::Vector3d::Zero();
            Eigen::Vector3d g_p = Eigen::Vector3d::Zero();
            Eigen::Matrix3d g_w = Eigen::Matrix3d::Zero();

            // (a) color -> SH coefficients and view direction
            {
                Eigen::Vector3d g_dir = Eigen::Vector3d::Zero();
                double bgrad[16][3];
                sh::basis_grad(in.sh_degree, sp.view_dir, bgrad);
                const float* co = in.sh + static_cast<std::size_t>(g) * 3 * n_coeff;
                for (int ch = 0; ch < 3; ++ch) {
                    const bool pass = sp.rgb_raw[ch] > 0.0 && sp.rgb_raw[ch] < 1.0;
                    if (!pass) continue;
                    const double gout = sg.rgb[ch];
                    if (gout == 0.0) continue;
                    for (int mcoef = 0; mcoef < n_coeff; ++mcoef) {
                        out.sh[(static_cast<std::size_t>(g) * 3 + ch) * n_coeff + mcoef] +=
                            gout * sp.basis[mcoef];
                        for (int d = 0; d < 3; ++d)
                            g_dir[d] += gout * co[ch * n_coeff + mcoef] * bgrad[mcoef][d];
                    }
                }
                const double pd = sp.view_dir.dot(g_dir);
                const Eigen::Vector3d g_rel = (g_dir - sp.view_dir * pd) / sp.view_norm;
                g_mu += g_rel;
                g_tc -= g_rel;
            }

            // (c) mean2d -> camera-frame point
            {
                const double x = sp.p_cam.x(), y = sp.p_cam.y(), z = sp.p_cam.z();
                g_p.x() += sg.mean[0] * k.fx / z;
                g_p.y() += sg.mean[1] * k.fy / z;
                g_p.z() += sg.mean[0] * (-k.fx * x / (z * z)) + sg.mean[1] * (-k.fy * y / (z * z));
            }

            // (d) cov2d -> Sigma, J, W, quaternion, scale
            {
                // g_icov -> g_cov = -iC * G * iC
                Eigen::Matrix2d g_ic;
                g_ic << sg.icov[0], sg.icov[1], sg.icov[2], sg.icov[3];
                Eigen::Matrix2d ic;
                ic << sp.ic00, sp.ic01, sp.ic01, sp.ic11;
                const Eigen::Matrix2d g_cov = -ic * g_ic * ic;

                const Eigen::Matrix3d g_sigma = sp.m.transpose() * g_cov * sp.m;
                const Eigen::Matrix<double, 2, 3> g_m =
                    (g_cov + g_cov.transpose()) * sp.m * sp.sigma;

                // Sigma = R A R^T
                const Eigen::Matrix3d a =
                    Eigen::Vector3d(sp.s.x() * sp.s.x(), sp.s.y() * sp.s.y(),
                                    sp.s.z() * sp.s.z())
                        .asDiagonal();
                const Eigen::Matrix3d g_rg = (g_sigma + g_sigma.transpose()) * sp.r_g * a;
                const Eigen::Matrix3d g_a = sp.r_g.transpose() * g_sigma * sp.r_g;
                for (int i = 0; i < 3; ++i)
                    out.scales[static_cast<std::size_t>(g) * 3 + i] +=
                        2.0 * sp.s[i] * g_a(i, i);

                double g_qg_hat[4] = {0, 0, 0, 0};
                rotmat_backward(sp.qg_hat, g_rg, g_qg_hat);
                double g_qg_raw[4] = {0, 0, 0, 0};
                quat_normalize_backward(sp.qg_raw, sp.qg_norm_reg, g_qg_hat, g_qg_raw);
                for (int i = 0; i < 4; ++i)
                    out.rotations[static_cast<std::size_t>(g) * 4 + i] += g_qg_raw[i];

                // M = J W
                const Eigen::Matrix<double, 2, 3> g_j = g_m * cam.w.transpose();
                g_w += sp.j.transpose() * g_m;

                const double x = sp.p_cam.x(), y = sp.p_cam.y(), z = sp.p_cam.z();
                const double z2 = z * z, z3 = z2 * z;
                g_p.x() += g_j(0, 2) * (-k.fx / z2);
                g_p.y() += g_j(1, 2) * (-k.fy / z2);
                g_p.z() += g_j(0, 0) * (-k.fx / z2) + g_j(0, 2) * (2.0 * k.fx * x / z3) +
                           g_j(1, 1) * (-k.fy / z2) + g_j(1, 2) * (2.0 * k.fy * y / z3);
            }

            // (e) p = W (mu - t)
            {
                const Eigen::Vector3d rel = sp.view_dir * sp.view_norm;
                g_mu += cam.w.transpose() * g_p;
                g_tc -= cam.w.transpose() * g_p;
                g_w += g_p * rel.transpose();
            }

            for (int i = 0; i < 3; ++i)
                out.centers[static_cast<std::size_t>(g) * 3 + i] += g_mu[i];

            // (f,g) W = R_c^T -> camera quaternion; translation
            {
                const Eigen::Matrix3d g_rc = g_w.transpose();
                double g_qc_hat[4] = {0, 0, 0, 0};
                rotmat_backward(cam.q_hat, g_rc, g_qc_hat);
                double g_qc_raw[4] = {0, 0, 0, 0};
                quat_normalize_backward(cam.q_raw, cam.q_norm_reg, g_qc_hat, g_qc_raw);
                for (int i = 0; i < 4; ++i) pose_acc[i] += g_qc_raw[i];
                for (int i = 0; i < 3; ++i) pose_acc[4 + i] += g_tc[i];
            }
        }
    });
    for (int w = 0; w < sworkers; ++w)
        for (int i = 0; i < 7; ++i) out.pose[i] += pose_partial[static_cast<std::size_t>(w)][i];
    return out;
}

inline GaussianArrays arrays_from_scene(const GaussianScene& scene, std::vector<float>& centers,
                                        std::vector<float>& opacities,
                                        std::vector<float>& rotations,
                                        std::vector<float>& scales, std::vector<float>& shv) {
    const int n_coeff = sh_coeff_count(scene.sh_degree);
    const int g = static_cast<int>(scene.size());
    centers.resize(static_cast<std::size_t>(g) * 3);
    opacities.resize(static_cast<std::size_t>(g));
    rotations.resize(static_cast<std::size_t>(g) * 4);
    scales.resize(static_cast<std::size_t>(g) * 3);
    shv.resize(static_cast<std::size_t>(g) * 3 * n_coeff);
    for (int i = 0; i < g; ++i) {
        const Gaussian3D& gs = scene.gaussians[static_cast<std::size_t>(i)];
        for (int c = 0; c < 3; ++c) centers[static_cast<std::size_t>(i) * 3 + c] = gs.center[c];
        opacities[static_cast<std::size_t>(i)] = gs.opacity();
        for (int c = 0; c < 4; ++c)
            rotations[static_cast<std::size_t>(i) * 4 + c] = gs.rotation[c];
        const Eigen::Vector3d s = gs.scale();
        for (int c = 0; c < 3; ++c)
            scales[static_cast<std::size_t>(i) * 3 + c] = static_cast<float>(s[c]);
        std::copy(gs.sh.begin(), gs.sh.end(),
                  shv.begin() + static_cast<std::size_t>(i) * 3 * n_coeff);
    }
    GaussianArrays arr;
    arr.centers = centers.data();
    arr.opacities = opacities.data();
    arr.rotations = rotations.data();
    arr.scales = scales.data();
    arr.sh = shv.data();
    arr.count = g;
    arr.sh_degree = scene.sh_degree;
    return arr;
}

inline void pose_to_raw(const Pose& pose, double out[7]) {
    out[0] = pose.rotation.w;
    out[1] = pose.rotation.x;
    out[2] = pose.rotation.y;
    out[3] = pose.rotation.z;
    out[4] = pose.translation.x();
    out[5] = pose.translation.y();
    out[6] = pose.translation.z();
}

}  // namespace render_detail

// ---------------------------------------------------------------------------
// Public API
// ---------------------------------------------------------------------------

// Projects one Gaussian; nullopt when culled (behind the near plane or more
// than its 3-sigma extent outside the image).
inline std::optional<Splat2D> project_gaussian(const Gaussian3D& g, const Pose& pose,
                                               const Intrinsics& k,
                                               const RenderOptions& opt = {}) {
    k.validate();
    GaussianScene one;
    one.sh_degree = 0;
    while (static_cast<int>(g.sh.size()) > 3 * sh_coeff_count(one.sh_degree)) ++one.sh_degree;
    if (static_cast<int>(g.sh.size()) != 3 * sh_coeff_count(one.sh_degree))
        throw ContractError("project_gaussian: SH coefficient count is not 3*(k+1)^2");
    std::vector<float> c, o, r, s, sh;
    one.gaussians.push_back(g);
    const render_detail::GaussianArrays arr =
        render_detail::arrays_from_scene(one, c, o, r, s, sh);
    double raw[7];
    render_detail::pose_to_raw(pose, raw);
    const render_detail::CameraSetup cam = render_detail::camera_setup(raw);
    render_detail::Prepared p;
    if (render_detail::prepare_splat(arr, 0, cam, k, opt, p) != render_detail::PrepareResult::kOk)
        return std::nullopt;
    Splat2D out;
    out.mean2d = {p.mean_u, p.mean_v};
    out.cov2d << p.cov00, p.cov01, p.cov01, p.cov11;
    out.depth = p.depth;
    out.rgb = {p.rgb[0], p.rgb[1], p.rgb[2]};
    out.opacity = p.opacity;
    return out;
}

inline RenderedImage render(const GaussianScene& scene, const Pose& pose, const Intrinsics& k,
                            const RenderOptions& opt = {}, RenderStats* stats = nullptr) {
    k.validate();
    scene.validate();
    std::vector<float> c, o, r, s, sh;
    const render_detail::GaussianArrays arr =
        render_detail::arrays_from_scene(scene, c, o, r, s, sh);
    double raw[7];
    render_detail::pose_to_raw(pose, raw);
    return render_detail::render_arrays(arr, raw, k, opt, stats);
}

// Gradients of a scalar loss with respect to every Gaussian attribute and the
// raw pose parameters, given dL/dpixel for the matching forward render.
struct RenderGrads {
    std::vector<std::array<double, 3>> centers;
    std::vector<double> opacities;                // w.r.t. activated opacity
    std::vector<std::array<double, 4>> rotations; // w.r.t. the stored 4-vector
    std::vector<std::array<double, 3>> scales;    // w.r.t. positive scale
    std::vector<std::vector<double>> sh;
    std::array<double, 7> pose{0, 0, 0, 0, 0, 0, 0};  // qw qx qy qz tx ty tz
};

inline RenderGrads render_backward(const GaussianScene& scene, const Pose& pose,
                                   const Intrinsics& k, const Image& pixel_grads,
                                   const RenderOptions& opt = {}) {
    k.validate();
    scene.validate();
    if (pixel_grads.width != k.width || pixel_grads.height != k.height)
        throw ContractError("render_backward: pixel_grads size does not match intrinsics");
    std::vector<float> c, o, r, s, sh;
    const render_detail::GaussianArrays arr =
        render_detail::arrays_from_scene(scene, c, o, r, s, sh);
    double raw[7];
    render_detail::pose_to_raw(pose, raw);
    const render_detail::ArrayGrads g =
        render_detail::render_backward_arrays(arr, raw, k, pixel_grads.data.data(), opt);

    RenderGrads out;
    const int n = arr.count;
    const int n_coeff = sh_coeff_count(scene.sh_degree);
    out.centers.resize(static_cast<std::size_t>(n));
    out.opacities.resize(static_cast<std::size_t>(n));
    out.rotations.resize(static_cast<std::size_t>(n));
    out.scales.resize(static_cast<std::size_t>(n));
    out.sh.resize(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
        for (int j = 0; j < 3; ++j)
            out.centers[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)] =
                g.centers[static_cast<std::size_t>(i) * 3 + j];
        out.opacities[static_cast<std::size_t>(i)] = g.opacities[static_cast<std::size_t>(i)];
        for (int j = 0; j < 4; ++j)
            out.rotations[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)] =
                g.rotations[static_cast<std::size_t>(i) * 4 + j];
        for (int j = 0; j < 3; ++j)
            out.scales[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)] =
                g.scales[static_cast<std::size_t>(i) * 3 + j];
        out.sh[static_cast<std::size_t>(i)].assign(
            g.sh.begin() + static_cast<std::size_t>(i) * 3 * n_coeff,
            g.sh.begin() + static_cast<std::size_t>(i + 1) * 3 * n_coeff);
    }
    out.pose = {g.pose[0], g.pose[1], g.pose[2], g.pose[3], g.pose[4], g.pose[5], g.pose[6]};
    return out;
}

// Tape-level rendering: one custom node whose backward runs the analytic
// kernel above. Inputs are the activated attribute tensors; `pose7` holds the
// raw camera parameters (may be a constant). Output shape is [H, W, 3].
inline Tensor render_op(const Tensor& centers, const Tensor& opacities, const Tensor& rotations,
                        const Tensor& scales, const Tensor& sh, const Tensor& pose7,
                        const Intrinsics& k, int sh_degree, const RenderOptions& opt = {},
                        RenderStats* stats = nullptr) {
    k.validate();
    const int g = centers.ndim() == 2 ? centers.dim(0) : 0;
    if (centers.ndim() != 2 || centers.dim(1) != 3)
        throw ShapeError("render_op: centers must be [G,3]");
    if (opacities.numel() != static_cast<std::size_t>(g))
        throw ShapeError("render_op: opacities must have G elements");
    if (rotations.ndim() != 2 || rotations.dim(0) != g || rotations.dim(1) != 4)
        throw ShapeError("render_op: rotations must be [G,4]");
    if (scales.ndim() != 2 || scales.dim(0) != g || scales.dim(1) != 3)
        throw ShapeError("render_op: scales must be [G,3]");
    const int n_coeff = sh_coeff_count(sh_degree);
    if (sh.ndim() != 2 || sh.dim(0) != g || sh.dim(1) != 3 * n_coeff)
        throw ShapeError("render_op: sh must be [G,3*(k+1)^2]");
    if (pose7.numel() != 7) throw ShapeError("render_op: pose must have 7 elements");

    render_detail::GaussianArrays arr;
    arr.centers = centers.values().data();
    arr.opacities = opacities.values().data();
    arr.rotations = rotations.values().data();
    arr.scales = scales.values().data();
    arr.sh = sh.values().data();
    arr.count = g;
    arr.sh_degree = sh_degree;
    double raw[7];
    for (int i = 0; i < 7; ++i) raw[i] = pose7.values()[static_cast<std::size_t>(i)];

    const RenderedImage img = render_detail::render_arrays(arr, raw, k, opt, stats);

    auto node = detail::make_op("render", {k.height, k.width, 3},
                                {centers, opacities, rotations, scales, sh, pose7});
    node->value = img.pixels.data;
    if (node->requires_grad) {
        auto cn = centers.node(), on = opacities.node(), rn = rotations.node(),
             sn = scales.node(), shn = sh.node(), pn = pose7.node();
        const Intrinsics kk = k;
        const RenderOptions oo = opt;
        const int degree = sh_degree;
        node->backward_fn = [cn, on, rn, sn, shn, pn, kk, oo, degree,
                             g](detail::TensorNode& self) {
            render_detail::GaussianArrays arr2;
            arr2.centers = cn->value.data();
            arr2.opacities = on->value.data();
            arr2.rotations = rn->value.data();
            arr2.scales = sn->value.data();
            arr2.sh = shn->value.data();
            arr2.count = g;
            arr2.sh_degree = degree;
            double raw2[7];
            for (int i = 0; i < 7; ++i) raw2[i] = pn->value[static_cast<std::size_t>(i)];
            const render_detail::ArrayGrads gr =
                render_detail::render_backward_arrays(arr2, raw2, kk, self.grad.data(), oo);
            auto add_into = [](const std::shared_ptr<detail::TensorNode>& t,
                               const std::vector<double>& src) {
                if (!t->requires_grad) return;
                t->ensure_grad();
                for (std::size_t i = 0; i < src.size(); ++i)
                    t->grad[i] += static_cast<float>(src[i]);
            };
            add_into(cn, gr.centers);
            add_into(on, gr.opacities);
            add_into(rn, gr.rotations);
            add_into(sn, gr.scales);
            add_into(shn, gr.sh);
            if (pn->requires_grad) {
                pn->ensure_grad();
                for (int i = 0; i < 7; ++i)
                    pn->grad[static_cast<std::size_t>(i)] += static_cast<float>(gr.pose[i]);
            }
        };
    }
    return Tensor(node);
}

}  // namespace tokensplat
