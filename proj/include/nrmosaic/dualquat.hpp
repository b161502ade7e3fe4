#pragma once

#include <cmath>
#include <span>
#include <stdexcept>

#include "nrmosaic/geometry.hpp"

namespace nrmosaic {

/// Reduced dual quaternion for planar rigid motion. A full dual quaternion
/// for a rotation about z plus an in-plane translation has only four nonzero
/// components, which are stored here:
///   real = (w, z) = (cos(angle/2), sin(angle/2))
///   dual = (dx, dy), the nonzero part of 0.5 * t_quat * real
/// The reduced subspace is closed under the dual quaternion product, and the
/// Pluecker orthogonality constraint holds identically, so normalization is
/// just a rescale by the real norm.
///
/// A dual quaternion and its negation encode the same transform (double
/// cover); blending code hemispherizes before summing.
struct DualQuat2 {
    double w = 1.0;   // cos(angle/2)
    double z = 0.0;   // sin(angle/2)
    double dx = 0.0;
    double dy = 0.0;

    static DualQuat2 identity() { return {}; }

    /// Rigid motion x -> R(angle) x + t.
    static DualQuat2 from_rigid(double angle, const Vec2& t) {
        DualQuat2 q;
        q.w = std::cos(0.5 * angle);
        q.z = std::sin(0.5 * angle);
        q.dx = 0.5 * (t.x * q.w + t.y * q.z);
        q.dy = 0.5 * (-t.x * q.z + t.y * q.w);
        return q;
    }

    /// Pure translation (identity rotation).
    static DualQuat2 from_translation(const Vec2& t) {
        return {1.0, 0.0, 0.5 * t.x, 0.5 * t.y};
    }

    double real_norm() const { return std::hypot(w, z); }

    DualQuat2 normalized() const {
        const double n = real_norm();
        if (n < 1e-300)
            throw std::invalid_argument("DualQuat2: degenerate real part");
        return {w / n, z / n, dx / n, dy / n};
    }

    DualQuat2 conjugate() const { return {w, -z, -dx, -dy}; }
    DualQuat2 negated() const { return {-w, -z, -dx, -dy}; }

    double real_dot(const DualQuat2& o) const { return w * o.w + z * o.z; }

    /// Rotation angle in (-pi, pi].
    double angle() const { return 2.0 * std::atan2(z, w); }

    /// Encoded translation t = 2 * dual * conj(real), assuming unit real part.
    Vec2 translation() const {
        return {2.0 * (dx * w - dy * z), 2.0 * (dx * z + dy * w)};
    }

    Mat2 rotation() const {
        // Double-angle form from the half-angle components.
        const double c = w * w - z * z;
        const double s = 2.0 * w * z;
        return {c, -s, s, c};
    }

    /// Applies the rigid motion: R x + t.
    Vec2 apply(const Vec2& p) const {
        const double c = w * w - z * z;
        const double s = 2.0 * w * z;
        return {c * p.x - s * p.y + 2.0 * (dx * w - dy * z),
                s * p.x + c * p.y + 2.0 * (dx * z + dy * w)};
    }
};

/// Dual quaternion product restricted to the reduced subspace.
/// dq_mul(a, b) applies b first: apply(dq_mul(a,b), x) == a.apply(b.apply(x)).
inline DualQuat2 dq_mul(const DualQuat2& a, const DualQuat2& b) {
    DualQuat2 q;
    q.w = a.w * b.w - a.z * b.z;
    q.z = a.w * b.z + a.z * b.w;
    // dual = real_a * dual_b + dual_a * real_b
    q.dx = (a.w * b.dx - a.z * b.dy) + (a.dx * b.w + a.dy * b.z);
    q.dy = (a.w * b.dy + a.z * b.dx) + (-a.dx * b.z + a.dy * b.w);
    return q;
}

/// Per-node warp: x -> scale * (R x + t), with the rigid part stored as a
/// reduced dual quaternion.
struct WarpFunction {
    double scale = 1.0;
    DualQuat2 dq;

    static WarpFunction identity() { return {}; }

    static WarpFunction from_similarity(const Similarity2& s) {
        return {s.scale, DualQuat2::from_rigid(s.angle, s.t / s.scale)};
    }

    Vec2 apply(const Vec2& p) const { return scale * dq.apply(p); }

    Vec2 unapply(const Vec2& q) const {
        if (!(scale > 0.0))
            throw std::invalid_argument("WarpFunction: non-positive scale");
        const Mat2 rt = dq.rotation().transpose();
        return rt * (q / scale - dq.translation());
    }

    /// Analytic inverse: conjugate rotation, reciprocal scale.
    WarpFunction inverse() const {
        if (!(scale > 0.0))
            throw std::invalid_argument("WarpFunction: non-positive scale");
        const DualQuat2 c = dq.conjugate();
        // W^-1(y) = (1/s) (R^T y - s R^T t); conj already carries -R^T t.
        return {1.0 / scale,
                DualQuat2::from_rigid(c.angle(), scale * c.translation())};
    }
};

inline Vec2 warp_apply(const WarpFunction& warp, const Vec2& p) { return warp.apply(p); }
inline Vec2 warp_unapply(const WarpFunction& warp, const Vec2& q) { return warp.unapply(q); }

/// Weighted blend of warps: scalar mean of scales and a hemispherized,
/// renormalized linear combination of the dual quaternions. Weights must be
/// non-negative with at least one positive.
inline WarpFunction dq_blend(std::span<const double> weights,
                             std::span<const DualQuat2> dqs,
                             std::span<const double> scales) {
    const std::size_t n = weights.size();
    if (n == 0 || dqs.size() != n || scales.size() != n)
        throw std::invalid_argument("dq_blend: size mismatch");

    std::size_t ref = n;
    double wsum = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        if (weights[i] > 0.0 && ref == n) ref = i;
        wsum += weights[i];
    }
    if (ref == n) throw std::invalid_argument("dq_blend: no positive weight");

    double sw = 0.0, sz = 0.0, sdx = 0.0, sdy = 0.0, sscale = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double w = weights[i];
        if (w <= 0.0) continue;
        DualQuat2 q = dqs[i];
        if (q.real_dot(dqs[ref]) < 0.0) q = q.negated();
        sw += w * q.w;
        sz += w * q.z;
        sdx += w * q.dx;
        sdy += w * q.dy;
        sscale += w * scales[i];
    }
    const DualQuat2 mean{sw / wsum, sz / wsum, sdx / wsum, sdy / wsum};
    return {sscale / wsum, mean.normalized()};
}

/// Convenience blend over (weight, warp) pairs.
inline WarpFunction blend_warps(std::span<const double> weights,
                                std::span<const WarpFunction> warps) {
    std::vector<DualQuat2> dqs(warps.size());
    std::vector<double> scales(warps.size());
    for (std::size_t i = 0; i < warps.size(); ++i) {
        dqs[i] = warps[i].dq;
        scales[i] = warps[i].scale;
    }
    return dq_blend(weights, dqs, scales);
}

/// Chains a warp increment onto an existing warp so that the result maps the
/// time-0 point directly to the incremented position:
///     result(x0) = delta(old(x0)).
/// The dual quaternion route: a compensating translation absorbs the scale
/// interplay, then the rigid parts compose.
inline WarpFunction warp_update(const WarpFunction& old_warp, const WarpFunction& delta) {
    if (!(old_warp.scale > 0.0))
        throw std::invalid_argument("warp_update: non-positive scale");
    const Vec2 dt = delta.dq.translation();
    const DualQuat2 q1 =
        DualQuat2::from_translation(((1.0 - old_warp.scale) / old_warp.scale) * dt);
    // Applied right-to-left: old rigid part, then delta, then the compensation.
    const DualQuat2 q_new = dq_mul(dq_mul(q1, delta.dq), old_warp.dq);
    return {delta.scale * old_warp.scale, q_new.normalized()};
}

}  // namespace nrmosaic
