#pragma once

// 3D Gaussian primitives, covariance construction, spherical-harmonics color
// and the scene container with PLY import/export.
//
// Storage note: opacity and scale are kept in their raw encodings (pre-sigmoid
// logit, log-scale), exactly as the prediction head emits them and exactly as
// the de-facto splatting PLY layout stores them. That makes file round trips
// bit-exact while the accessors keep the semantic invariants (opacity in
// (0,1), scale > 0) true by construction.

#include <Eigen/Dense>
#include <array>
#include <cmath>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "tokensplat/common.hpp"
#include "tokensplat/geometry.hpp"

namespace tokensplat {

inline int sh_coeff_count(int degree) { return (degree + 1) * (degree + 1); }

struct Gaussian3D {
    std::array<float, 3> center{0, 0, 0};       // scene units, canonical frame
    float opacity_logit = 0.0f;                  // sigmoid(opacity_logit) in (0,1)
    std::array<float, 4> rotation{1, 0, 0, 0};   // unit quaternion (w,x,y,z)
    std::array<float, 3> log_scale{0, 0, 0};     // exp(log_scale) > 0
    std::vector<float> sh;                       // 3*(k+1)^2, channel-major [3][(k+1)^2]

    float opacity() const { return 1.0f / (1.0f + std::exp(-opacity_logit)); }
    void set_opacity(float sigma) {
        if (sigma <= 0.0f || sigma >= 1.0f)
            throw ContractError("opacity must lie strictly inside (0,1)");
        opacity_logit = std::log(sigma / (1.0f - sigma));
    }

    Eigen::Vector3d scale() const {
        return {std::exp(static_cast<double>(log_scale[0])),
                std::exp(static_cast<double>(log_scale[1])),
                std::exp(static_cast<double>(log_scale[2]))};
    }
    void set_scale(const Eigen::Vector3d& s) {
        if (s.x() <= 0 || s.y() <= 0 || s.z() <= 0)
            throw ContractError("scale components must be positive");
        log_scale = {static_cast<float>(std::log(s.x())), static_cast<float>(std::log(s.y())),
                     static_cast<float>(std::log(s.z()))};
    }

    Quaternion rotation_quat() const {
        return Quaternion{rotation[0], rotation[1], rotation[2], rotation[3]};
    }
    void set_rotation(const Quaternion& q) {
        const Quaternion n = q.normalized();
        rotation = {static_cast<float>(n.w), static_cast<float>(n.x), static_cast<float>(n.y),
                    static_cast<float>(n.z)};
    }

    Eigen::Vector3d center_vec() const { return {center[0], center[1], center[2]}; }
};

struct GaussianScene {
    std::vector<Gaussian3D> gaussians;
    int sh_degree = 1;

    std::size_t size() const { return gaussians.size(); }

    void validate() const {
        const int want = 3 * sh_coeff_count(sh_degree);
        for (const auto& g : gaussians)
            if (static_cast<int>(g.sh.size()) != want)
                throw ContractError("gaussian SH coefficient count does not match scene degree");
    }
};

// Sigma = R diag(s)^2 R^T; symmetric positive definite for positive scales.
inline Eigen::Matrix3d covariance(const Quaternion& r, const Eigen::Vector3d& s) {
    if (s.x() <= 0 || s.y() <= 0 || s.z() <= 0)
        throw ContractError("covariance: scale components must be positive");
    const Eigen::Matrix3d rot = quat_to_rotmat(r);
    const Eigen::Matrix3d a = Eigen::Vector3d(s.x() * s.x(), s.y() * s.y(), s.z() * s.z())
                                  .asDiagonal();
    return rot * a * rot.transpose();
}

// ---------------------------------------------------------------------------
// Spherical harmonics (real basis, splatting-lineage sign convention).
// Color = clamp(0.5 + sum_lm c_lm Y_lm(dir), 0, 1) per channel.
// ---------------------------------------------------------------------------

namespace sh {

constexpr double kC0 = 0.28209479177387814;
constexpr double kC1 = 0.4886025119029199;
constexpr double kC2[5] = {1.0925484305920792, -1.0925484305920792, 0.31539156525252005,
                           -1.0925484305920792, 0.5462742152960396};
constexpr double kC3[7] = {-0.5900435899266435, 2.890611442640554, -0.4570457994644658,
                           0.3731763325901154, -0.4570457994644658, 1.445305721320277,
                           -0.5900435899266435};

// Basis values for degree <= 3 at a unit direction, in coefficient order.
inline void basis(int degree, const Eigen::Vector3d& dir, double* out) {
    out[0] = kC0;
    if (degree < 1) return;
    const double x = dir.x(), y = dir.y(), z = dir.z();
    out[1] = -kC1 * y;
    out[2] = kC1 * z;
    out[3] = -kC1 * x;
    if (degree < 2) return;
    const double xx = x * x, yy = y * y, zz = z * z;
    const double xy = x * y, yz = y * z, xz = x * z;
    out[4] = kC2[0] * xy;
    out[5] = kC2[1] * yz;
    out[6] = kC2[2] * (2.0 * zz - xx - yy);
    out[7] = kC2[3] * xz;
    out[8] = kC2[4] * (xx - yy);
    if (degree < 3) return;
    out[9] = kC3[0] * y * (3.0 * xx - yy);
    out[10] = kC3[1] * xy * z;
    out[11] = kC3[2] * y * (4.0 * zz - xx - yy);
    out[12] = kC3[3] * z * (2.0 * zz - 3.0 * xx - 3.0 * yy);
    out[13] = kC3[4] * x * (4.0 * zz - xx - yy);
    out[14] = kC3[5] * z * (xx - yy);
    out[15] = kC3[6] * x * (xx - 3.0 * yy);
}

// d(basis_m)/d(dir) for degree <= 3; grad is [n_coeffs][3].
inline void basis_grad(int degree, const Eigen::Vector3d& dir, double (*grad)[3]) {
    const int n = sh_coeff_count(degree);
    for (int i = 0; i < n; ++i) grad[i][0] = grad[i][1] = grad[i][2] = 0.0;
    if (degree < 1) return;
    const double x = dir.x(), y = dir.y(), z = dir.z();
    grad[1][1] = -kC1;
    grad[2][2] = kC1;
    grad[3][0] = -kC1;
    if (degree < 2) return;
    grad[4][0] = kC2[0] * y;
    grad[4][1] = kC2[0] * x;
    grad[5][1] = kC2[1] * z;
    grad[5][2] = kC2[1] * y;
    grad[6][0] = kC2[2] * (-2.0 * x);
    grad[6][1] = kC2[2] * (-2.0 * y);
    grad[6][2] = kC2[2] * (4.0 * z);
    grad[7][0] = kC2[3] * z;
    grad[7][2] = kC2[3] * x;
    grad[8][0] = kC2[4] * (2.0 * x);
    grad[8][1] = kC2[4] * (-2.0 * y);
    if (degree < 3) return;
    const double xx = x * x, yy = y * y, zz = z * z;
    grad[9][0] = kC3[0] * 6.0 * x * y;
    grad[9][1] = kC3[0] * (3.0 * xx - 3.0 * yy);
    grad[10][0] = kC3[1] * y * z;
    grad[10][1] = kC3[1] * x * z;
    grad[10][2] = kC3[1] * x * y;
    grad[11][0] = kC3[2] * (-2.0 * x * y);
    grad[11][1] = kC3[2] * (4.0 * zz - xx - 3.0 * yy);
    grad[11][2] = kC3[2] * (8.0 * y * z);
    grad[12][0] = kC3[3] * (-6.0 * x * z);
    grad[12][1] = kC3[3] * (-6.0 * y * z);
    grad[12][2] = kC3[3] * (6.0 * zz - 3.0 * xx - 3.0 * yy);
    grad[13][0] = kC3[4] * (4.0 * zz - 3.0 * xx - yy);
    grad[13][1] = kC3[4] * (-2.0 * x * y);
    grad[13][2] = kC3[4] * (8.0 * x * z);
    grad[14][0] = kC3[5] * (2.0 * x * z);
    grad[14][1] = kC3[5] * (-2.0 * y * z);
    grad[14][2] = kC3[5] * (xx - yy);
    grad[15][0] = kC3[6] * (3.0 * xx - 3.0 * yy);
    grad[15][1] = kC3[6] * (-6.0 * x * y);
}

}  // namespace sh

// coeffs: 3*(k+1)^2 channel-major; dir must be unit. Returns clamped rgb.
inline std::array<float, 3> sh_eval(const std::vector<float>& coeffs, int degree,
                                    const Eigen::Vector3d& dir) {
    if (degree < 0 || degree > 3) throw ContractError("sh_eval: degree must be in [0,3]");
    const int n = sh_coeff_count(degree);
    if (static_cast<int>(coeffs.size()) != 3 * n)
        throw ContractError("sh_eval: coefficient count does not match degree");
    double b[16];
    sh::basis(degree, dir, b);
    std::array<float, 3> rgb{};
    for (int ch = 0; ch < 3; ++ch) {
        double acc = 0.5;
        for (int m = 0; m < n; ++m) acc += coeffs[static_cast<std::size_t>(ch) * n + m] * b[m];
        rgb[static_cast<std::size_t>(ch)] =
            static_cast<float>(std::clamp(acc, 0.0, 1.0));
    }
    return rgb;
}

// ---------------------------------------------------------------------------
// PLY: binary_little_endian 1.0 with the de-facto splatting attribute layout
// (x,y,z, nx,ny,nz, f_dc_0..2, f_rest_*, opacity, scale_0..2, rot_0..3).
// f_rest is channel-major; opacity is the raw logit; scales are log-scales.
// ---------------------------------------------------------------------------

inline void export_ply(const GaussianScene& scene, const std::string& path) {
    scene.validate();
    const int n_coeff = sh_coeff_count(scene.sh_degree);
    const int n_rest = n_coeff - 1;
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error("cannot open PLY for writing: " + path);
    std::ostringstream header;
    header << "ply\nformat binary_little_endian 1.0\n";
    header << "element vertex " << scene.size() << "\n";
    const char* base_props[] = {"x", "y", "z", "nx", "ny", "nz", "f_dc_0", "f_dc_1", "f_dc_2"};
    for (const char* p : base_props) header << "property float " << p << "\n";
    for (int i = 0; i < 3 * n_rest; ++i) header << "property float f_rest_" << i << "\n";
    header << "property float opacity\n";
    for (int i = 0; i < 3; ++i) header << "property float scale_" << i << "\n";
    for (int i = 0; i < 4; ++i) header << "property float rot_" << i << "\n";
    header << "end_header\n";
    out << header.str();

    std::vector<float> row(static_cast<std::size_t>(9 + 3 * n_rest + 1 + 3 + 4));
    for (const auto& g : scene.gaussians) {
        std::size_t i = 0;
        row[i++] = g.center[0];
        row[i++] = g.center[1];
        row[i++] = g.center[2];
        row[i++] = 0.0f;
        row[i++] = 0.0f;
        row[i++] = 0.0f;
        for (int ch = 0; ch < 3; ++ch) row[i++] = g.sh[static_cast<std::size_t>(ch) * n_coeff];
        for (int ch = 0; ch < 3; ++ch)
            for (int m = 1; m < n_coeff; ++m)
                row[i++] = g.sh[static_cast<std::size_t>(ch) * n_coeff + m];
        row[i++] = g.opacity_logit;
        for (int c = 0; c < 3; ++c) row[i++] = g.log_scale[static_cast<std::size_t>(c)];
        for (int c = 0; c < 4; ++c) row[i++] = g.rotation[static_cast<std::size_t>(c)];
        out.write(reinterpret_cast<const char*>(row.data()),
                  static_cast<std::streamsize>(row.size() * sizeof(float)));
    }
    if (!out) throw Error("PLY write failed: " + path);
}

inline GaussianScene import_ply(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("cannot open PLY: " + path);

    std::string line;
    std::size_t offset = 0;
    auto next_line = [&]() {
        if (!std::getline(in, line)) throw ParseError("unexpected end of PLY header", offset);
        offset += line.size() + 1;
        if (!line.empty() && line.back() == '\r') line.pop_back();
    };

    next_line();
    if (line != "ply") throw ParseError("missing 'ply' magic", 0);
    next_line();
    if (line != "format binary_little_endian 1.0")
        throw ParseError("unsupported PLY format: " + line, offset - line.size() - 1);

    std::size_t vertex_count = 0;
    std::vector<std::string> props;
    while (true) {
        next_line();
        if (line == "end_header") break;
        std::istringstream ss(line);
        std::string word;
        ss >> word;
        if (word == "comment") continue;
        if (word == "element") {
            std::string name;
            ss >> name >> vertex_count;
            if (name != "vertex")
                throw ParseError("unsupported PLY element: " + name, offset - line.size() - 1);
        } else if (word == "property") {
            std::string type, name;
            ss >> type >> name;
            if (type != "float")
                throw ParseError("unsupported property type: " + type, offset - line.size() - 1);
            props.push_back(name);
        } else {
            throw ParseError("unrecognized header line: " + line, offset - line.size() - 1);
        }
    }

    std::map<std::string, int> prop_index;
    for (std::size_t i = 0; i < props.size(); ++i) prop_index[props[i]] = static_cast<int>(i);
    auto need = [&](const std::string& name) {
        auto it = prop_index.find(name);
        if (it == prop_index.end()) throw ParseError("missing PLY property: " + name, offset);
        return it->second;
    };

    int n_rest = 0;
    while (prop_index.count("f_rest_" + std::to_string(n_rest))) ++n_rest;
    if (n_rest % 3 != 0) throw ParseError("f_rest count is not a multiple of 3", offset);
    const int n_coeff = n_rest / 3 + 1;
    int degree = -1;
    for (int k = 0; k <= 3; ++k)
        if (sh_coeff_count(k) == n_coeff) degree = k;
    if (degree < 0) throw ParseError("f_rest count does not match an SH degree <= 3", offset);

    const int px = need("x"), py = need("y"), pz = need("z");
    const int pdc[3] = {need("f_dc_0"), need("f_dc_1"), need("f_dc_2")};
    const int pop = need("opacity");
    const int psc[3] = {need("scale_0"), need("scale_1"), need("scale_2")};
    const int prt[4] = {need("rot_0"), need("rot_1"), need("rot_2"), need("rot_3")};

    GaussianScene scene;
    scene.sh_degree = degree;
    scene.gaussians.resize(vertex_count);
    std::vector<float> row(props.size());
    for (std::size_t v = 0; v < vertex_count; ++v) {
        in.read(reinterpret_cast<char*>(row.data()),
                static_cast<std::streamsize>(row.size() * sizeof(float)));
        if (!in)
            throw ParseError("truncated PLY payload at vertex " + std::to_string(v),
                             offset + v * row.size() * sizeof(float));
        Gaussian3D& g = scene.gaussians[v];
        g.center = {row[static_cast<std::size_t>(px)], row[static_cast<std::size_t>(py)],
                    row[static_cast<std::size_t>(pz)]};
        g.sh.resize(static_cast<std::size_t>(3 * n_coeff));
        for (int ch = 0; ch < 3; ++ch) {
            g.sh[static_cast<std::size_t>(ch) * n_coeff] =
                row[static_cast<std::size_t>(pdc[ch])];
            for (int m = 1; m < n_coeff; ++m)
                g.sh[static_cast<std::size_t>(ch) * n_coeff + m] = row[static_cast<std::size_t>(
                    need("f_rest_" + std::to_string(ch * (n_coeff - 1) + m - 1)))];
        }
        g.opacity_logit = row[static_cast<std::size_t>(pop)];
        for (int c = 0; c < 3; ++c)
            g.log_scale[static_cast<std::size_t>(c)] = row[static_cast<std::size_t>(psc[c])];
        for (int c = 0; c < 4; ++c)
            g.rotation[static_cast<std::size_t>(c)] = row[static_cast<std::size_t>(prt[c])];
    }
    return scene;
}

}  // namespace tokensplat
