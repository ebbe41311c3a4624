#pragma once

// SE(3) poses, quaternions, unit dual quaternions, pinhole projection and
// trajectory error metrics. Everything here is double precision and pure;
// the learnable pipeline converts to/from float tensors at the boundary.
//
// Conventions:
//  - Quaternions are Hamilton (w, x, y, z); q and -q encode the same rotation.
//  - Pose maps camera coordinates into the canonical frame: x_world = R x + t.
//  - Trajectories are per-view poses relative to the reference view, which is
//    the identity by convention.

#include <Eigen/Dense>
#include <array>
#include <cmath>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "tokensplat/common.hpp"

namespace tokensplat {

struct Quaternion {
    double w = 1.0, x = 0.0, y = 0.0, z = 0.0;

    Quaternion() = default;
    Quaternion(double w_, double x_, double y_, double z_) : w(w_), x(x_), y(y_), z(z_) {}

    double norm() const { return std::sqrt(w * w + x * x + y * y + z * z); }

    Quaternion normalized() const {
        const double n = norm();
        if (n < 1e-12) throw DegenerateInputError("cannot normalize a zero quaternion");
        return {w / n, x / n, y / n, z / n};
    }

    Quaternion conjugate() const { return {w, -x, -y, -z}; }

    Quaternion operator*(const Quaternion& r) const {
        return {w * r.w - x * r.x - y * r.y - z * r.z,
                w * r.x + x * r.w + y * r.z - z * r.y,
                w * r.y - x * r.z + y * r.w + z * r.x,
                w * r.z + x * r.y - y * r.x + z * r.w};
    }

    Quaternion operator-() const { return {-w, -x, -y, -z}; }

    double dot(const Quaternion& r) const { return w * r.w + x * r.x + y * r.y + z * r.z; }

    Eigen::Vector3d rotate(const Eigen::Vector3d& v) const {
        const Quaternion p{0.0, v.x(), v.y(), v.z()};
        const Quaternion r = (*this) * p * conjugate();
        return {r.x, r.y, r.z};
    }

    // Sign-canonical representative of the double cover: w > 0, ties broken
    // by the first nonzero component.
    Quaternion canonical() const {
        if (w > 0.0) return *this;
        if (w < 0.0) return -*this;
        if (x != 0.0) return x > 0.0 ? *this : -*this;
        if (y != 0.0) return y > 0.0 ? *this : -*this;
        return z >= 0.0 ? *this : -*this;
    }

    // Rotation angle in radians, in [0, pi].
    double angle() const {
        const Quaternion q = normalized().canonical();
        const double c = std::clamp(q.w, -1.0, 1.0);
        return 2.0 * std::acos(c);
    }

    static Quaternion from_axis_angle(const Eigen::Vector3d& axis, double angle_rad) {
        const double n = axis.norm();
        if (n < 1e-12) throw DegenerateInputError("axis-angle with zero axis");
        const double h = 0.5 * angle_rad;
        const double s = std::sin(h) / n;
        return {std::cos(h), axis.x() * s, axis.y() * s, axis.z() * s};
    }
};

inline Eigen::Matrix3d quat_to_rotmat(const Quaternion& q_in) {
    const Quaternion q = q_in.normalized();
    const double w = q.w, x = q.x, y = q.y, z = q.z;
    Eigen::Matrix3d r;
    r << 1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
         2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
         2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y);
    return r;
}

inline Quaternion rotmat_to_quat(const Eigen::Matrix3d& m) {
    Quaternion q;
    const double tr = m.trace();
    if (tr > 0.0) {
        const double s = std::sqrt(tr + 1.0) * 2.0;
        q.w = 0.25 * s;
        q.x = (m(2, 1) - m(1, 2)) / s;
        q.y = (m(0, 2) - m(2, 0)) / s;
        q.z = (m(1, 0) - m(0, 1)) / s;
    } else if (m(0, 0) > m(1, 1) && m(0, 0) > m(2, 2)) {
        const double s = std::sqrt(1.0 + m(0, 0) - m(1, 1) - m(2, 2)) * 2.0;
        q.w = (m(2, 1) - m(1, 2)) / s;
        q.x = 0.25 * s;
        q.y = (m(0, 1) + m(1, 0)) / s;
        q.z = (m(0, 2) + m(2, 0)) / s;
    } else if (m(1, 1) > m(2, 2)) {
        const double s = std::sqrt(1.0 + m(1, 1) - m(0, 0) - m(2, 2)) * 2.0;
        q.w = (m(0, 2) - m(2, 0)) / s;
        q.x = (m(0, 1) + m(1, 0)) / s;
        q.y = 0.25 * s;
        q.z = (m(1, 2) + m(2, 1)) / s;
    } else {
        const double s = std::sqrt(1.0 + m(2, 2) - m(0, 0) - m(1, 1)) * 2.0;
        q.w = (m(1, 0) - m(0, 1)) / s;
        q.x = (m(0, 2) + m(2, 0)) / s;
        q.y = (m(1, 2) + m(2, 1)) / s;
        q.z = 0.25 * s;
    }
    return q.normalized();
}

// ---------------------------------------------------------------------------

struct Pose {
    Quaternion rotation;                       // unit
    Eigen::Vector3d translation{0.0, 0.0, 0.0};

    Pose() = default;
    Pose(const Quaternion& q, const Eigen::Vector3d& t) : rotation(q.normalized()), translation(t) {}

    static Pose identity() { return {}; }

    // this ∘ other: apply `other` first, then `this`.
    Pose compose(const Pose& other) const {
        return {rotation * other.rotation, rotation.rotate(other.translation) + translation};
    }

    Pose inverse() const {
        const Quaternion qi = rotation.conjugate();
        return {qi, -qi.rotate(translation)};
    }

    Eigen::Vector3d apply(const Eigen::Vector3d& p) const {
        return rotation.rotate(p) + translation;
    }

    Eigen::Matrix3d rotmat() const { return quat_to_rotmat(rotation); }
};

// ---------------------------------------------------------------------------

struct UnitDualQuaternion {
    Quaternion real;                 // q_r, unit
    std::array<double, 4> dual{0, 0, 0, 0};  // q_d with <q_r, q_d> = 0

    Quaternion dual_quat() const { return {dual[0], dual[1], dual[2], dual[3]}; }

    static UnitDualQuaternion identity() { return {Quaternion{}, {0, 0, 0, 0}}; }

    void validate(double tol = 1e-6) const {
        if (std::abs(real.norm() - 1.0) > tol)
            throw InvalidDqError("dual quaternion real part is not unit");
        const Quaternion d = dual_quat();
        if (std::abs(real.dot(d)) > tol)
            throw InvalidDqError("dual quaternion parts are not orthogonal");
    }

    UnitDualQuaternion operator*(const UnitDualQuaternion& r) const {
        const Quaternion rr = real * r.real;
        const Quaternion d1 = real * r.dual_quat();
        const Quaternion d2 = dual_quat() * r.real;
        return {rr, {d1.w + d2.w, d1.x + d2.x, d1.y + d2.y, d1.z + d2.z}};
    }

    // Quaternion conjugation applied to both parts.
    UnitDualQuaternion conjugate() const {
        return {real.conjugate(), {dual[0], -dual[1], -dual[2], -dual[3]}};
    }

    UnitDualQuaternion negated() const {
        return {-real, {-dual[0], -dual[1], -dual[2], -dual[3]}};
    }

    // Representative with real.w >= 0 (double-cover canonicalization).
    UnitDualQuaternion canonical() const {
        const Quaternion c = real.canonical();
        const bool flipped = (c.w != real.w) || (c.x != real.x) || (c.y != real.y) ||
                             (c.z != real.z);
        return flipped ? negated() : *this;
    }
};

inline UnitDualQuaternion pose_to_dq(const Pose& pose) {
    const Quaternion qr = pose.rotation.normalized();
    const Quaternion t{0.0, pose.translation.x(), pose.translation.y(), pose.translation.z()};
    const Quaternion qd = t * qr;  // then halved
    return {qr, {0.5 * qd.w, 0.5 * qd.x, 0.5 * qd.y, 0.5 * qd.z}};
}

inline Pose dq_to_pose(const UnitDualQuaternion& dq) {
    dq.validate();
    const Quaternion t2 = dq.dual_quat() * dq.real.conjugate();  // (1/2) t as pure quaternion
    return {dq.real, Eigen::Vector3d{2.0 * t2.x, 2.0 * t2.y, 2.0 * t2.z}};
}

// || p_I - p (p_hat)* || + || p_I - p_hat p* || over the 8-vector, after
// canonicalizing both arguments to the real.w >= 0 hemisphere. Zero exactly
// when both encode the same rigid transform.
inline double dq_alignment_loss(const UnitDualQuaternion& p_in,
                                const UnitDualQuaternion& p_hat_in) {
    p_in.validate();
    p_hat_in.validate();
    const UnitDualQuaternion p = p_in.canonical();
    const UnitDualQuaternion p_hat = p_hat_in.canonical();
    const UnitDualQuaternion id = UnitDualQuaternion::identity();
    auto term = [&](const UnitDualQuaternion& a, const UnitDualQuaternion& b) {
        const UnitDualQuaternion prod = a * b.conjugate();
        const double dr[4] = {id.real.w - prod.real.w, id.real.x - prod.real.x,
                              id.real.y - prod.real.y, id.real.z - prod.real.z};
        const double dd[4] = {id.dual[0] - prod.dual[0], id.dual[1] - prod.dual[1],
                              id.dual[2] - prod.dual[2], id.dual[3] - prod.dual[3]};
        double s = 0.0;
        for (double v : dr) s += v * v;
        for (double v : dd) s += v * v;
        return std::sqrt(s);
    };
    return term(p, p_hat) + term(p_hat, p);
}

// ---------------------------------------------------------------------------

struct Intrinsics {
    double fx = 0, fy = 0, cx = 0, cy = 0;
    int width = 0, height = 0;

    void validate() const {
        if (fx <= 0 || fy <= 0) throw ContractError("intrinsics: focal lengths must be positive");
        if (cx < 0 || cx > width || cy < 0 || cy > height)
            throw ContractError("intrinsics: principal point outside image");
        if (width <= 0 || height <= 0) throw ContractError("intrinsics: bad image size");
    }
};

struct Projection {
    double u = 0, v = 0, depth = 0;
    bool behind = false;  // depth <= near plane; caller culls
};

// Pinhole projection of a point given the camera pose (camera-to-canonical).
inline Projection project(const Eigen::Vector3d& point, const Pose& pose, const Intrinsics& k,
                          double near_plane = 1e-4) {
    const Pose w2c = pose.inverse();
    const Eigen::Vector3d p = w2c.apply(point);
    Projection out;
    out.depth = p.z();
    if (p.z() <= near_plane) {
        out.behind = true;
        return out;
    }
    out.u = k.fx * p.x() / p.z() + k.cx;
    out.v = k.fy * p.y() / p.z() + k.cy;
    return out;
}

inline Eigen::Vector3d unproject(double u, double v, double depth, const Pose& pose,
                                 const Intrinsics& k) {
    const Eigen::Vector3d cam{(u - k.cx) / k.fx * depth, (v - k.cy) / k.fy * depth, depth};
    return pose.apply(cam);
}

// ---------------------------------------------------------------------------
// Trajectories and error metrics
// ---------------------------------------------------------------------------

using Trajectory = std::vector<Pose>;

namespace detail {

inline void check_pair(const Trajectory& a, const Trajectory& b) {
    if (a.size() != b.size()) throw ContractError("trajectory length mismatch");
    if (a.size() < 2) throw ContractError("trajectory metrics need at least two poses");
}

// Closed-form SE(3) alignment (no scale) of `src` translations onto `dst`:
// rotation from the SVD of the cross-covariance, translation from centroids.
inline Pose align_se3(const std::vector<Eigen::Vector3d>& src,
                      const std::vector<Eigen::Vector3d>& dst) {
    const std::size_t n = src.size();
    Eigen::Vector3d cs = Eigen::Vector3d::Zero(), cd = Eigen::Vector3d::Zero();
    for (std::size_t i = 0; i < n; ++i) {
        cs += src[i];
        cd += dst[i];
    }
    cs /= static_cast<double>(n);
    cd /= static_cast<double>(n);
    Eigen::Matrix3d h = Eigen::Matrix3d::Zero();
    for (std::size_t i = 0; i < n; ++i) h += (src[i] - cs) * (dst[i] - cd).transpose();
    Eigen::JacobiSVD<Eigen::Matrix3d> svd(h, Eigen::ComputeFullU | Eigen::ComputeFullV);
    Eigen::Matrix3d d = Eigen::Matrix3d::Identity();
    if ((svd.matrixV() * svd.matrixU().transpose()).determinant() < 0.0) d(2, 2) = -1.0;
    const Eigen::Matrix3d r = svd.matrixV() * d * svd.matrixU().transpose();
    return {rotmat_to_quat(r), cd - r * cs};
}

}  // namespace detail

// RMSE of translation residuals after SE(3) alignment of pred onto gt.
inline double ate(const Trajectory& pred, const Trajectory& gt) {
    detail::check_pair(pred, gt);
    std::vector<Eigen::Vector3d> src, dst;
    src.reserve(pred.size());
    dst.reserve(gt.size());
    for (const auto& p : pred) src.push_back(p.translation);
    for (const auto& g : gt) dst.push_back(g.translation);
    const Pose t = detail::align_se3(src, dst);
    double acc = 0.0;
    for (std::size_t i = 0; i < src.size(); ++i)
        acc += (dst[i] - t.apply(src[i])).squaredNorm();
    return std::sqrt(acc / static_cast<double>(src.size()));
}

// RMSE of the translation error of consecutive relative poses.
inline double rpe_t(const Trajectory& pred, const Trajectory& gt) {
    detail::check_pair(pred, gt);
    double acc = 0.0;
    const std::size_t m = pred.size() - 1;
    for (std::size_t i = 0; i < m; ++i) {
        const Pose dp = pred[i].inverse().compose(pred[i + 1]);
        const Pose dg = gt[i].inverse().compose(gt[i + 1]);
        const Pose err = dg.inverse().compose(dp);
        acc += err.translation.squaredNorm();
    }
    return std::sqrt(acc / static_cast<double>(m));
}

// RMSE of the rotation-angle error of consecutive relative poses, in degrees.
inline double rpe_r(const Trajectory& pred, const Trajectory& gt) {
    detail::check_pair(pred, gt);
    double acc = 0.0;
    const std::size_t m = pred.size() - 1;
    for (std::size_t i = 0; i < m; ++i) {
        const Pose dp = pred[i].inverse().compose(pred[i + 1]);
        const Pose dg = gt[i].inverse().compose(gt[i + 1]);
        const double a = (dg.rotation.conjugate() * dp.rotation).angle();
        acc += a * a;
    }
    return std::sqrt(acc / static_cast<double>(m)) * (180.0 / 3.14159265358979323846);
}

// Text format: one line per view, "qw qx qy qz tx ty tz", reference first.
inline void save_trajectory(const Trajectory& traj, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw Error("cannot open trajectory file for writing: " + path);
    out.precision(17);
    for (const auto& p : traj) {
        out << p.rotation.w << ' ' << p.rotation.x << ' ' << p.rotation.y << ' '
            << p.rotation.z << ' ' << p.translation.x() << ' ' << p.translation.y() << ' '
            << p.translation.z() << '\n';
    }
}

inline Pose parse_pose_line(const std::string& line) {
    std::istringstream ss(line);
    double qw, qx, qy, qz, tx, ty, tz;
    if (!(ss >> qw >> qx >> qy >> qz >> tx >> ty >> tz))
        throw ParseError("pose line must be 'qw qx qy qz tx ty tz'", 0);
    std::string extra;
    if (ss >> extra) throw ParseError("trailing tokens after pose line", 0);
    return {Quaternion{qw, qx, qy, qz}, Eigen::Vector3d{tx, ty, tz}};
}

inline Trajectory load_trajectory(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw Error("cannot open trajectory file: " + path);
    Trajectory traj;
    std::string line;
    std::size_t offset = 0;
    while (std::getline(in, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (!line.empty()) {
            try {
                traj.push_back(parse_pose_line(line));
            } catch (const ParseError& e) {
                throw ParseError("bad trajectory line", offset);
            }
        }
        offset += line.size() + 1;
    }
    return traj;
}

}  // namespace tokensplat
