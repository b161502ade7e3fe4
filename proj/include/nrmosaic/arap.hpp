#pragma once

#include <cmath>
#include <span>
#include <vector>

#include "nrmosaic/dualquat.hpp"
#include "nrmosaic/geometry.hpp"
#include "nrmosaic/parallel.hpp"

namespace nrmosaic {

constexpr double kArapSigma2 = 100.0;   // fixed variance assigned to the ARAP prior
constexpr int kArapMaxIters = 5;
constexpr double kArapWeightCutoff = 1e-3;  // neighbor columns below this are dropped

struct ArapResult {
    std::vector<WarpFunction> warps;
    std::vector<double> iteration_costs;  // cost after each accepted iteration
};

namespace detail {

struct ArapFit {
    WarpFunction warp;
    bool valid = false;
};

/// Closed-form rigid+scale fit of a node's neighborhood motion: SVD of the
/// weighted offset covariance for the rotation, norm ratio for the scale,
/// weighted average for the translation.
inline ArapFit arap_local_fit(const Vec2& anchor_i, const Vec2& pos_i,
                              std::span<const Vec2> anchors, std::span<const Vec2> positions,
                              std::span<const std::pair<int, double>> neighbors) {
    ArapFit out;
    if (neighbors.empty()) return out;

    Mat2 m{};  // C_t * C_0^T
    double c0_norm2 = 0.0, ct_norm2 = 0.0;
    for (const auto& [j, w] : neighbors) {
        const Vec2 o0 = w * (anchors[j] - anchor_i);
        const Vec2 ot = w * (positions[j] - pos_i);
        m.m00 += ot.x * o0.x; m.m01 += ot.x * o0.y;
        m.m10 += ot.y * o0.x; m.m11 += ot.y * o0.y;
        c0_norm2 += o0.norm2();
        ct_norm2 += ot.norm2();
    }
    if (c0_norm2 < 1e-12 || ct_norm2 < 1e-12) return out;  // coincident neighbors

    const Svd2 svd = svd2(m);
    if (svd.s1 < 1e-12) return out;
    // R = U V^T, reflabeled to a proper rotation if the SVD picked a flip.
    Mat2 r = svd.u * svd.v.transpose();
    if (r.det() < 0.0) {
        const Mat2 u_fix{svd.u.m00, -svd.u.m01, svd.u.m10, -svd.u.m11};
        r = u_fix * svd.v.transpose();
    }
    const double scale = std::sqrt(ct_norm2 / c0_norm2);

    double wsum = 0.0;
    Vec2 t{0, 0};
    for (const auto& [j, w] : neighbors) {
        t += w * (positions[j] / scale - r * anchors[j]);
        wsum += w;
    }
    t = t / wsum;

    const double angle = std::atan2(r.m10, r.m00);
    out.warp = {scale, DualQuat2::from_rigid(angle, t)};
    out.valid = true;
    return out;
}

}  // namespace detail

/// As-rigid-as-possible smoothing of per-node warps. Each iteration fits a
/// closed-form similarity to every node's neighborhood motion, averages it
/// into the merged warp with weight lambda = (1 + sigma_i^2) / (1 +
/// sigma_ARAP^2), and recomputes positions. Terminates early (reverting the
/// last step) if the total cost increases, so the recorded costs are
/// non-increasing.
inline ArapResult arap_smooth(std::span<const Vec2> anchors,
                              std::span<const WarpFunction> merged,
                              std::span<const double> variances, double alpha,
                              int max_iters = kArapMaxIters, int workers = 1) {
    const std::size_t n = anchors.size();
    ArapResult out;
    out.warps.assign(merged.begin(), merged.end());
    if (n < 2) return out;

    // Neighbor lists with Gaussian anchor-distance weights; small columns dropped.
    std::vector<std::vector<std::pair<int, double>>> neighbors(n);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
            if (i == j) continue;
            const double w = std::exp(-alpha * dist2(anchors[i], anchors[j]));
            if (w >= kArapWeightCutoff)
                neighbors[i].emplace_back(static_cast<int>(j), w);
        }
    }

    std::vector<double> lambda(n);
    for (std::size_t i = 0; i < n; ++i)
        lambda[i] = (1.0 + variances[i]) / (1.0 + kArapSigma2);

    std::vector<Vec2> positions(n);
    for (std::size_t i = 0; i < n; ++i) positions[i] = out.warps[i].apply(anchors[i]);

    double prev_cost = std::numeric_limits<double>::max();
    for (int iter = 0; iter < max_iters; ++iter) {
        std::vector<WarpFunction> next(out.warps);
        std::vector<double> costs(n, 0.0);
        parallel_for(n, workers, [&](std::size_t i0, std::size_t i1) {
            for (std::size_t i = i0; i < i1; ++i) {
                const auto fit = detail::arap_local_fit(anchors[i], positions[i],
                                                        anchors, positions, neighbors[i]);
                const Vec2 merged_pt = merged[i].apply(anchors[i]);
                if (!fit.valid) {
                    costs[i] = dist2(merged_pt, next[i].apply(anchors[i]));
                    continue;
                }
                const double w[2] = {1.0, lambda[i]};
                const WarpFunction cand[2] = {merged[i], fit.warp};
                next[i] = blend_warps(w, cand);
                const Vec2 new_pt = next[i].apply(anchors[i]);
                costs[i] = dist2(merged_pt, new_pt) +
                           lambda[i] * dist2(fit.warp.apply(anchors[i]), new_pt);
            }
        });
        double cost = 0.0;
        for (double c : costs) cost += c;

        if (cost > prev_cost) break;  // revert this step, keep previous warps
        out.warps = std::move(next);
        for (std::size_t i = 0; i < n; ++i) positions[i] = out.warps[i].apply(anchors[i]);
        out.iteration_costs.push_back(cost);
        prev_cost = cost;
    }
    return out;
}

}  // namespace nrmosaic
