#pragma once

#include <algorithm>
#include <cstdint>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <vector>

#include "nrmosaic/dualquat.hpp"
#include "nrmosaic/features.hpp"
#include "nrmosaic/geometry.hpp"
#include "nrmosaic/parallel.hpp"

namespace nrmosaic {

struct FieldParams {
    double alpha = 2e-4;            // spatial interpolation kernel coefficient
    double beta = 3e-3;             // uncertainty kernel coefficient
    double inlier_threshold = 5.0;  // px, residual gate (pre-scaled by caller)
    int max_iters = 10;
    double rel_tol = 1e-4;
    int seed_trials = 64;
    int knn = 8;                    // neighbors feeding each local similarity fit
    int blend_support = 16;         // neighbors blended per field query point
    double collinear_tol = 1.0;     // px, degenerate-geometry gate
    std::uint64_t seed = 1234;
    int workers = 1;
};

/// Smooth per-node warp increments estimated from sparse matches, with
/// inlier labels and per-node uncertainties.
struct FieldEstimate {
    std::vector<WarpFunction> node_increments;   // one per node anchor
    std::vector<double> node_uncertainties;      // min_j exp(beta d^2), >= 1
    std::vector<std::uint8_t> inlier_flags;      // one per match
    std::vector<double> match_residuals;         // squared error px^2, per match
    int inlier_count = 0;
};

/// Uncertainty of a field increment at a node: the closer the nearest match
/// inlier, the lower the uncertainty, with exp(0) = 1 as the floor.
inline double node_uncertainty(const Vec2& node_anchor, std::span<const Vec2> inlier_positions,
                               double beta) {
    if (!(beta > 0.0)) throw std::invalid_argument("node_uncertainty: beta must be positive");
    if (inlier_positions.empty())
        throw std::invalid_argument("node_uncertainty: no inlier support");
    double best_d2 = std::numeric_limits<double>::max();
    for (const auto& p : inlier_positions) best_d2 = std::min(best_d2, dist2(node_anchor, p));
    return bounded_exp(beta * best_d2);
}

namespace detail {

/// Indices of the k nearest points to `query` among pts[idx] (excluding
/// `self`), ordered by (distance, index) for determinism.
inline void knn_indices(const std::vector<Vec2>& pts, const std::vector<int>& idx, int self,
                        const Vec2& query, int k, std::vector<int>& out) {
    std::vector<std::pair<double, int>> cand;
    cand.reserve(idx.size());
    for (int j : idx) {
        if (j == self) continue;
        cand.emplace_back(dist2(query, pts[j]), j);
    }
    const std::size_t kk = std::min<std::size_t>(k, cand.size());
    std::partial_sort(cand.begin(), cand.begin() + kk, cand.end());
    out.clear();
    for (std::size_t i = 0; i < kk; ++i) out.push_back(cand[i].second);
}

/// Blend of local transforms at a query point: kernel weights are rescaled
/// by the nearest distance so far-away queries never underflow to zero
/// support.
inline WarpFunction blend_local(const std::vector<WarpFunction>& locals,
                                const std::vector<Vec2>& apts,
                                const std::vector<double>& probs,
                                const std::vector<int>& active, const Vec2& query,
                                double alpha, int support) {
    thread_local std::vector<std::pair<double, int>> cand;
    cand.clear();
    for (int j : active) cand.emplace_back(dist2(query, apts[j]), j);
    const std::size_t kk = std::min<std::size_t>(support, cand.size());
    std::partial_sort(cand.begin(), cand.begin() + kk, cand.end());
    const double d2min = cand.front().first;

    thread_local std::vector<double> w, scales;
    thread_local std::vector<DualQuat2> dqs;
    w.clear(); scales.clear(); dqs.clear();
    for (std::size_t i = 0; i < kk; ++i) {
        const auto& [d2, j] = cand[i];
        w.push_back(std::exp(-alpha * (d2 - d2min)) * std::max(probs[j], 1e-6));
        scales.push_back(locals[j].scale);
        dqs.push_back(locals[j].dq);
    }
    return dq_blend(w, dqs, scales);
}

}  // namespace detail

/// Robust sparse-to-dense estimation: classifies matches into inliers and
/// outliers against a smooth deformation model and emits a per-node warp
/// increment plus uncertainty. Returns nullopt when no self-consistent set
/// of at least 4 inliers exists.
///
/// Internals: consensus seeding over random match triples, then iterate
/// (E) residuals under the leave-one-out blended field -> inlier
/// probabilities, (M) per-match local similarity fits over k nearest inlier
/// neighbors, blended with Gaussian kernels. The returned increments are
/// recomputed from the final inlier set alone, so the output is a function
/// of that set (adding a match classified as outlier changes nothing).
inline std::optional<FieldEstimate> estimate_field(std::span<const MatchPair> matches,
                                                   std::span<const Vec2> node_anchors,
                                                   const FieldParams& params) {
    const int n = static_cast<int>(matches.size());
    if (n < 4 || node_anchors.empty()) return std::nullopt;

    std::vector<Vec2> apts(n), bpts(n);
    for (int i = 0; i < n; ++i) {
        apts[i] = matches[i].point_a;
        bpts[i] = matches[i].point_b;
    }
    if (points_collinear(apts, params.collinear_tol)) return std::nullopt;

    const double tau = params.inlier_threshold;
    const double tau2 = tau * tau;
    const double sigma_em2 = 0.25 * tau2;  // EM residual bandwidth (tau/2)^2

    // --- Consensus seeding over random triples -----------------------------
    std::mt19937_64 rng(params.seed);
    std::uniform_int_distribution<int> pick(0, n - 1);
    double best_score = -1.0;
    Similarity2 seed_sim;
    for (int t = 0; t < params.seed_trials; ++t) {
        int i = pick(rng), j = pick(rng), k = pick(rng);
        if (i == j || j == k || i == k) continue;
        const Vec2 tri_a[3] = {apts[i], apts[j], apts[k]};
        const Vec2 tri_b[3] = {bpts[i], bpts[j], bpts[k]};
        if (points_collinear(tri_a, 0.5)) continue;
        const auto sim = fit_similarity(tri_a, tri_b);
        if (!sim || sim->scale < 0.2 || sim->scale > 5.0) continue;
        double score = 0.0;
        for (int m = 0; m < n; ++m)
            score += std::exp(-dist2(sim->apply(apts[m]), bpts[m]) / (2.0 * sigma_em2));
        if (score > best_score) {
            best_score = score;
            seed_sim = *sim;
        }
    }
    if (best_score < 0.0) return std::nullopt;  // every triple degenerate

    std::vector<double> resid2(n);
    for (int j = 0; j < n; ++j) resid2[j] = dist2(seed_sim.apply(apts[j]), bpts[j]);

    auto gated = [&](double slack) {
        std::vector<int> act;
        for (int j = 0; j < n; ++j)
            if (resid2[j] < tau2 * slack) act.push_back(j);
        return act;
    };

    std::vector<WarpFunction> locals(n, WarpFunction::identity());
    std::vector<double> probs(n, 0.0);
    std::vector<Vec2> prev_pred;  // per-match field action, for convergence test

    // First gate is slack (3x threshold) to let the smooth field pull in
    // inliers the global seed misses under deformation.
    std::vector<int> active = gated(9.0);
    if (static_cast<int>(active.size()) < 4) active = gated(25.0);
    if (static_cast<int>(active.size()) < 4) return std::nullopt;

    for (int iter = 0; iter < params.max_iters; ++iter) {
        for (int j = 0; j < n; ++j) probs[j] = std::exp(-resid2[j] / (2.0 * sigma_em2));

        // M: local similarity per active match from its k nearest active
        // neighbors plus itself.
        parallel_for(active.size(), params.workers, [&](std::size_t i0, std::size_t i1) {
            thread_local std::vector<int> nbrs;
            thread_local std::vector<Vec2> src, dst;
            for (std::size_t ii = i0; ii < i1; ++ii) {
                const int j = active[ii];
                detail::knn_indices(apts, active, j, apts[j], params.knn, nbrs);
                src.clear(); dst.clear();
                src.push_back(apts[j]); dst.push_back(bpts[j]);
                for (int m : nbrs) { src.push_back(apts[m]); dst.push_back(bpts[m]); }
                const auto sim = fit_similarity(src, dst);
                if (sim && sim->scale > 0.05 && sim->scale < 20.0)
                    locals[j] = WarpFunction::from_similarity(*sim);
                else
                    locals[j] = {1.0, DualQuat2::from_translation(bpts[j] - apts[j])};
            }
        }, 8);

        // E: leave-one-out residual of every match under the blended field.
        std::vector<Vec2> pred(n);
        parallel_for(static_cast<std::size_t>(n), params.workers, [&](std::size_t i0, std::size_t i1) {
            thread_local std::vector<int> others;
            for (std::size_t j = i0; j < i1; ++j) {
                others.clear();
                for (int m : active)
                    if (m != static_cast<int>(j)) others.push_back(m);
                if (others.empty()) { pred[j] = bpts[j]; continue; }
                const WarpFunction f = detail::blend_local(locals, apts, probs, others,
                                                           apts[j], params.alpha,
                                                           params.blend_support);
                pred[j] = f.apply(apts[j]);
            }
        }, 16);
        for (int j = 0; j < n; ++j) resid2[j] = dist2(pred[j], bpts[j]);

        std::vector<int> next = gated(1.0);
        if (static_cast<int>(next.size()) >= 4) active = std::move(next);

        if (!prev_pred.empty()) {
            double delta = 0.0, span_sz = 1.0;
            for (int j = 0; j < n; ++j) {
                delta = std::max(delta, dist(pred[j], prev_pred[j]));
                span_sz = std::max(span_sz, dist(pred[j], apts[j]));
            }
            if (delta < params.rel_tol * span_sz) { prev_pred = std::move(pred); break; }
        }
        prev_pred = std::move(pred);
    }

    // --- Final classification and refit from the inlier set ----------------
    FieldEstimate est;
    est.inlier_flags.assign(n, 0);
    est.match_residuals = resid2;
    std::vector<int> inliers;
    for (int j = 0; j < n; ++j) {
        if (resid2[j] < tau2) {
            est.inlier_flags[j] = 1;
            inliers.push_back(j);
        }
    }
    est.inlier_count = static_cast<int>(inliers.size());
    if (est.inlier_count < 4) return std::nullopt;

    for (int j : inliers) probs[j] = std::exp(-resid2[j] / (2.0 * sigma_em2));
    parallel_for(inliers.size(), params.workers, [&](std::size_t i0, std::size_t i1) {
        thread_local std::vector<int> nbrs;
        thread_local std::vector<Vec2> src, dst;
        for (std::size_t ii = i0; ii < i1; ++ii) {
            const int j = inliers[ii];
            detail::knn_indices(apts, inliers, j, apts[j], params.knn, nbrs);
            src.clear(); dst.clear();
            src.push_back(apts[j]); dst.push_back(bpts[j]);
            for (int m : nbrs) { src.push_back(apts[m]); dst.push_back(bpts[m]); }
            const auto sim = fit_similarity(src, dst);
            if (sim && sim->scale > 0.05 && sim->scale < 20.0)
                locals[j] = WarpFunction::from_similarity(*sim);
            else
                locals[j] = {1.0, DualQuat2::from_translation(bpts[j] - apts[j])};
        }
    }, 8);

    const std::size_t nn = node_anchors.size();
    est.node_increments.resize(nn);
    est.node_uncertainties.resize(nn);
    std::vector<Vec2> inlier_pts;
    inlier_pts.reserve(inliers.size());
    for (int j : inliers) inlier_pts.push_back(apts[j]);
    parallel_for(nn, params.workers, [&](std::size_t i0, std::size_t i1) {
        for (std::size_t i = i0; i < i1; ++i) {
            est.node_increments[i] = detail::blend_local(locals, apts, probs, inliers,
                                                         node_anchors[i], params.alpha,
                                                         params.blend_support);
            est.node_uncertainties[i] = node_uncertainty(node_anchors[i], inlier_pts, params.beta);
        }
    }, 8);
    return est;
}

}  // namespace nrmosaic
