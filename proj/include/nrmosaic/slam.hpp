#pragma once

#include <chrono>
#include <cstring>
#include <functional>
#include <optional>
#include <span>
#include <unordered_map>
#include <vector>

#include "nrmosaic/arap.hpp"
#include "nrmosaic/dualquat.hpp"
#include "nrmosaic/features.hpp"
#include "nrmosaic/fieldest.hpp"
#include "nrmosaic/geometry.hpp"
#include "nrmosaic/mosaic.hpp"

namespace nrmosaic {

constexpr double kVarianceMax = 1e12;

struct Node {
    Vec2 anchor;              // position in the reference frame (time 0)
    WarpFunction warp;        // maps anchor -> current position
    double variance = 0.0;
    Vec2 current_position;    // cached warp(anchor)

    void refresh_position() { current_position = warp.apply(anchor); }
};

struct FeatureTrack {
    Vec2 position;            // in the current frame
    double variance = 0.0;
};

/// Stored past frame used for loop closing: detected features plus the node
/// state (positions, warps, variances) of the nodes that existed when the
/// keyframe was created. Node arrays are prefixes of the graph's node list.
struct KeyFrame {
    int frame_index = 0;
    FrameFeatures features;
    std::vector<Vec2> node_positions;
    std::vector<WarpFunction> node_warps;
    std::vector<double> node_variances;
};

struct NodeGraph {
    std::vector<Node> nodes;
    std::vector<FeatureTrack> feature_tracks;
    std::vector<KeyFrame> keyframes;
    double hex_spacing = 60.0;

    std::vector<Vec2> anchors() const {
        std::vector<Vec2> out(nodes.size());
        for (std::size_t i = 0; i < nodes.size(); ++i) out[i] = nodes[i].anchor;
        return out;
    }
    std::vector<Vec2> positions() const {
        std::vector<Vec2> out(nodes.size());
        for (std::size_t i = 0; i < nodes.size(); ++i) out[i] = nodes[i].current_position;
        return out;
    }
    std::vector<WarpFunction> warps() const {
        std::vector<WarpFunction> out(nodes.size());
        for (std::size_t i = 0; i < nodes.size(); ++i) out[i] = nodes[i].warp;
        return out;
    }
};

// ---------------------------------------------------------------------------
// Tracking and uncertainty arithmetic
// ---------------------------------------------------------------------------

struct TrackedState {
    std::vector<WarpFunction> warps;
    std::vector<double> variances;
};

/// Chains the field increment onto every node and propagates variance:
/// sigma^2 <- ds^2 * sigma^2 + dsigma^2.
inline TrackedState track_step(const NodeGraph& graph, const FieldEstimate& field) {
    const std::size_t n = graph.nodes.size();
    if (field.node_increments.size() != n || field.node_uncertainties.size() != n)
        throw std::invalid_argument("track_step: field does not cover all nodes");
    TrackedState out;
    out.warps.resize(n);
    out.variances.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
        const WarpFunction& inc = field.node_increments[i];
        out.warps[i] = warp_update(graph.nodes[i].warp, inc);
        out.variances[i] = std::min(kVarianceMax,
                                    inc.scale * inc.scale * graph.nodes[i].variance +
                                        field.node_uncertainties[i]);
    }
    return out;
}

/// Inlier branch: the feature chained to its predecessor, variance grows by
/// the squared match residual.
inline FeatureTrack propagate_feature_uncertainty(FeatureTrack track, double residual_sq) {
    track.variance = std::min(kVarianceMax, track.variance + residual_sq);
    return track;
}

/// Outlier branch: same propagation form as the node update.
inline FeatureTrack propagate_feature_uncertainty(FeatureTrack track, double delta_scale_sq,
                                                  double delta_sigma_sq) {
    track.variance = std::min(kVarianceMax, delta_scale_sq * track.variance + delta_sigma_sq);
    return track;
}

/// Spatial bound tying node uncertainty to nearby feature tracks:
/// sigma_i^2 <= sigma_j^2 + exp(beta d_ij^2) for every feature j.
inline double clamp_node_variance(double node_variance, std::span<const FeatureTrack> tracks,
                                  const Vec2& node_position, double beta) {
    if (!(beta > 0.0)) throw std::invalid_argument("clamp_node_variance: beta must be positive");
    double bound = node_variance;
    for (const auto& t : tracks) {
        bound = std::min(bound, t.variance + bounded_exp(beta * dist2(node_position, t.position)));
    }
    return bound;
}

// ---------------------------------------------------------------------------
// Keyframes
// ---------------------------------------------------------------------------

/// Mean displacement of the keyframe's nodes from their current positions.
/// Nodes created after the keyframe are excluded.
inline double keyframe_mean_displacement(const KeyFrame& kf, std::span<const Vec2> positions_now) {
    const std::size_t n = std::min(kf.node_positions.size(), positions_now.size());
    if (n == 0) return 0.0;
    double sum = 0.0;
    for (std::size_t i = 0; i < n; ++i) sum += dist(positions_now[i], kf.node_positions[i]);
    return sum / static_cast<double>(n);
}

/// Adds frame t as a keyframe when every stored keyframe is farther than
/// threshold_h in mean node displacement. The first frame is always added.
inline bool maybe_add_keyframe(NodeGraph& graph, int t, double threshold_h,
                               const FrameFeatures& features) {
    const auto positions = graph.positions();
    if (!graph.keyframes.empty()) {
        double best = std::numeric_limits<double>::max();
        for (const auto& kf : graph.keyframes)
            best = std::min(best, keyframe_mean_displacement(kf, positions));
        if (best <= threshold_h) return false;
    }
    KeyFrame kf;
    kf.frame_index = t;
    kf.features = features;
    kf.node_positions = positions;
    kf.node_warps = graph.warps();
    kf.node_variances.resize(graph.nodes.size());
    for (std::size_t i = 0; i < graph.nodes.size(); ++i)
        kf.node_variances[i] = graph.nodes[i].variance;
    graph.keyframes.push_back(std::move(kf));
    return true;
}

// ---------------------------------------------------------------------------
// EKF-style merging of the tracking and loop-closing estimates
// ---------------------------------------------------------------------------

struct MergeResult {
    WarpFunction warp;
    double variance = 0.0;
    bool fallback = false;  // negative weights or singular covariance
};

/// Covariance-weighted fusion of two warp estimates with correlation
/// eta = exp(-gamma ||x_now - x_kf||^2). When the 2x2 covariance turns
/// singular or a weight goes negative, falls back to the smaller-variance
/// sensor with its variance unchanged.
inline MergeResult ekf_merge(const WarpFunction& w_track, double var_track,
                             const WarpFunction& w_loop, double var_loop,
                             const Vec2& node_position_now, const Vec2& node_position_at_keyframe,
                             double gamma) {
    if (!(var_track > 0.0) || !(var_loop > 0.0))
        throw std::invalid_argument("ekf_merge: variances must be positive");

    const double eta = std::exp(-gamma * dist2(node_position_now, node_position_at_keyframe));
    const double cross = eta * std::sqrt(var_track) * std::sqrt(var_loop);
    const double det = var_track * var_loop - cross * cross;

    auto fallback = [&]() -> MergeResult {
        if (var_track <= var_loop) return {w_track, var_track, true};
        return {w_loop, var_loop, true};
    };
    if (det <= 1e-12 * var_track * var_loop) return fallback();

    const double sum_inv = (var_track + var_loop - 2.0 * cross) / det;
    if (sum_inv <= 0.0) return fallback();
    const double var_merge = 1.0 / sum_inv;
    const double w1 = var_merge * (var_loop - cross) / det;
    const double w2 = var_merge * (var_track - cross) / det;
    if (w1 < 0.0 || w2 < 0.0) return fallback();

    const double wts[2] = {w1, w2};
    const WarpFunction cand[2] = {w_track, w_loop};
    return {blend_warps(wts, cand), var_merge, false};
}

// ---------------------------------------------------------------------------
// Node insertion over a hexagonal lattice
// ---------------------------------------------------------------------------

/// Region of the reference frame that must be covered by nodes: either a
/// rectangle or a polygon (the warped footprint of the current frame).
struct CoverageRegion {
    Rect rect;
    std::vector<Vec2> polygon;

    static CoverageRegion from_rect(const Rect& r) { return {r, {}}; }
    static CoverageRegion from_polygon(std::vector<Vec2> poly) {
        CoverageRegion region;
        region.rect = polygon_bbox(poly);
        region.polygon = std::move(poly);
        return region;
    }

    double distance(const Vec2& p) const {
        return polygon.empty() ? rect.distance(p) : polygon_distance(polygon, p);
    }
    Vec2 center() const { return rect.center(); }
};

namespace detail {

inline std::int64_t axial_key(int a, int b) {
    return (static_cast<std::int64_t>(a) << 32) ^ (static_cast<std::int64_t>(b) & 0xffffffffLL);
}

struct HexLattice {
    Vec2 origin;
    double spacing;

    Vec2 anchor(int a, int b) const {
        constexpr double kRoot3Over2 = 0.86602540378443864676;
        return {origin.x + spacing * (a + 0.5 * b), origin.y + spacing * kRoot3Over2 * b};
    }
    std::pair<int, int> cell_of(const Vec2& p) const {
        constexpr double kRoot3Over2 = 0.86602540378443864676;
        const double bf = (p.y - origin.y) / (spacing * kRoot3Over2);
        const double af = (p.x - origin.x) / spacing - 0.5 * bf;
        // Round to the nearest of the candidate cells by actual distance;
        // plain rounding of axial coordinates can misassign near cell edges.
        const int a0 = static_cast<int>(std::floor(af)), b0 = static_cast<int>(std::floor(bf));
        int best_a = a0, best_b = b0;
        double best = std::numeric_limits<double>::max();
        for (int da = 0; da <= 1; ++da)
            for (int db = 0; db <= 1; ++db) {
                const double d = dist2(anchor(a0 + da, b0 + db), p);
                if (d < best) {
                    best = d;
                    best_a = a0 + da;
                    best_b = b0 + db;
                }
            }
        return {best_a, best_b};
    }
};

}  // namespace detail

/// Grows the hexagonal node lattice until the coverage region lies within
/// hex_spacing of a node anchor. An empty graph is seeded at the region
/// center; new node warps and variances are kernel-weighted averages of the
/// nodes existing before the call. Returns the number of nodes added.
inline int insert_nodes(NodeGraph& graph, const CoverageRegion& region, double alpha) {
    const double h = graph.hex_spacing;
    if (!(h > 0.0)) throw std::invalid_argument("insert_nodes: hex_spacing must be positive");

    // Snapshot for initializing new node state.
    const std::size_t n_before = graph.nodes.size();
    std::vector<Vec2> snap_anchors(n_before);
    for (std::size_t i = 0; i < n_before; ++i) snap_anchors[i] = graph.nodes[i].anchor;

    auto init_new_node = [&](const Vec2& anchor) {
        Node node;
        node.anchor = anchor;
        if (n_before > 0) {
            double d2min = std::numeric_limits<double>::max();
            for (const auto& a : snap_anchors) d2min = std::min(d2min, dist2(a, anchor));
            std::vector<double> w(n_before);
            std::vector<WarpFunction> warps(n_before);
            double wsum = 0.0, var = 0.0;
            for (std::size_t i = 0; i < n_before; ++i) {
                w[i] = std::exp(-alpha * (dist2(snap_anchors[i], anchor) - d2min));
                warps[i] = graph.nodes[i].warp;
                var += w[i] * graph.nodes[i].variance;
                wsum += w[i];
            }
            node.warp = blend_warps(w, warps);
            node.variance = var / wsum;
        }
        node.refresh_position();
        return node;
    };

    detail::HexLattice lattice{n_before > 0 ? graph.nodes[0].anchor : region.center(), h};
    std::unordered_map<std::int64_t, bool> occupied;
    std::vector<std::pair<int, int>> queue;
    for (const auto& node : graph.nodes) {
        const auto [a, b] = lattice.cell_of(node.anchor);
        occupied[detail::axial_key(a, b)] = true;
        queue.emplace_back(a, b);
    }

    int added = 0;
    auto add_cell = [&](int a, int b) {
        occupied[detail::axial_key(a, b)] = true;
        graph.nodes.push_back(init_new_node(lattice.anchor(a, b)));
        queue.emplace_back(a, b);
        ++added;
    };

    if (graph.nodes.empty()) add_cell(0, 0);

    static constexpr int kNbr[6][2] = {{1, 0}, {0, 1}, {-1, 1}, {-1, 0}, {0, -1}, {1, -1}};
    auto run_bfs = [&] {
        for (std::size_t head = 0; head < queue.size(); ++head) {
            const auto [a, b] = queue[head];
            for (const auto& d : kNbr) {
                const int na = a + d[0], nb = b + d[1];
                const auto key = detail::axial_key(na, nb);
                if (occupied.count(key)) continue;
                if (region.distance(lattice.anchor(na, nb)) < h)
                    add_cell(na, nb);
                else
                    occupied[key] = false;  // visited, rejected
            }
        }
    };
    run_bfs();

    // The lattice component may not reach regions disconnected from the
    // existing nodes; rescan on a coarse grid and reseed until covered.
    for (int round = 0; round < 8; ++round) {
        const double step = h / 4.0;
        bool reseeded = false;
        for (double y = region.rect.y0; y <= region.rect.y1; y += step) {
            for (double x = region.rect.x0; x <= region.rect.x1; x += step) {
                const Vec2 p{x, y};
                if (region.distance(p) > 0.0) continue;
                double d2min = std::numeric_limits<double>::max();
                for (const auto& node : graph.nodes) d2min = std::min(d2min, dist2(node.anchor, p));
                if (d2min <= 0.64 * h * h) continue;  // within 0.8 h of an anchor
                const auto [a, b] = lattice.cell_of(p);
                if (!occupied.count(detail::axial_key(a, b)) || !occupied[detail::axial_key(a, b)]) {
                    add_cell(a, b);
                    reseeded = true;
                }
            }
        }
        if (!reseeded) break;
        run_bfs();
    }
    return added;
}

/// Node-graph convenience wrapper over the span-based interpolation.
inline std::optional<WarpFunction> pixel_warp(const Vec2& x_ref, const NodeGraph& graph,
                                              double alpha) {
    return pixel_warp(x_ref, graph.anchors(), graph.warps(), alpha);
}

// ---------------------------------------------------------------------------
// Frame pipeline
// ---------------------------------------------------------------------------

enum class FrameStatus { Tracked, LoopClosed, Lost };

inline const char* to_string(FrameStatus s) {
    switch (s) {
        case FrameStatus::Tracked: return "tracked";
        case FrameStatus::LoopClosed: return "loop-closed";
        case FrameStatus::Lost: return "lost";
    }
    return "?";
}

struct FrameReport {
    FrameStatus status = FrameStatus::Lost;
    int frame_index = 0;
    int node_count = 0;
    int match_count = 0;
    int inlier_count = 0;
    int loop_keyframe = -1;      // keyframe index merged/recovered against
    bool keyframe_added = false;
    int nodes_added = 0;
    double mean_variance = 0.0;
    double ms_track = 0.0, ms_loop = 0.0, ms_merge = 0.0, ms_arap = 0.0;
};

/// Online non-rigid tracking state machine: owns the node graph, feature
/// tracks and keyframes; advances one frame at a time.
class Engine {
public:
    struct Params {
        double alpha = 2e-4;
        double beta = 3e-3;
        double gamma = 5e-3;
        int loop_stride = 5;
        double keyframe_threshold = 40.0;
        double hex_spacing = 60.0;
        bool loop_closing = true;
        FieldParams field;
        int workers = 1;
    };

    /// Matches a stored keyframe (a side) against the current frame (b side).
    using LoopMatcher = std::function<std::vector<MatchPair>(const KeyFrame&)>;

    explicit Engine(const Params& params) : params_(params) {
        params_.field.alpha = params.alpha;
        params_.field.beta = params.beta;
        params_.field.workers = params.workers;
        graph_.hex_spacing = params.hex_spacing;
    }

    /// Seeds the node lattice over frame 0 and stores it as the first
    /// keyframe. Frame 0 is the reference: all variances start at zero.
    void initialize(const FrameFeatures& f0, int frame_w, int frame_h) {
        frame_w_ = frame_w;
        frame_h_ = frame_h;
        insert_nodes(graph_, CoverageRegion::from_rect(Rect::of_size(frame_w, frame_h)),
                     params_.alpha);
        graph_.feature_tracks.clear();
        for (const auto& kp : f0.keypoints) graph_.feature_tracks.push_back({kp.position, 0.0});
        maybe_add_keyframe(graph_, 0, params_.keyframe_threshold, f0);
        prev_features_ = f0;
        frame_index_ = 0;
        last_footprint_ = {{0, 0}, {frame_w - 1.0, 0}, {frame_w - 1.0, frame_h - 1.0}, {0, frame_h - 1.0}};
    }

    FrameReport process_frame(const FrameFeatures& cur,
                              const std::vector<MatchPair>& track_matches,
                              const LoopMatcher& loop_matcher) {
        using clock = std::chrono::steady_clock;
        auto ms_since = [](clock::time_point t0) {
            return std::chrono::duration<double, std::milli>(clock::now() - t0).count();
        };

        const int t = ++frame_index_;
        FrameReport report;
        report.frame_index = t;
        report.match_count = static_cast<int>(track_matches.size());

        FieldParams fp = params_.field;
        fp.seed = params_.field.seed + 2ull * static_cast<unsigned long long>(t);

        const auto t_track = clock::now();
        const auto prev_positions = graph_.positions();
        const auto field = estimate_field(track_matches, prev_positions, fp);

        if (!field) {
            report.ms_track = ms_since(t_track);
            last_inlier_flags_.clear();
            return handle_lost(cur, loop_matcher, report);
        }
        report.inlier_count = field->inlier_count;
        last_inlier_flags_ = field->inlier_flags;

        TrackedState tracked = track_step(graph_, *field);
        std::vector<Vec2> track_positions(graph_.nodes.size());
        for (std::size_t i = 0; i < graph_.nodes.size(); ++i)
            track_positions[i] = tracked.warps[i].apply(graph_.nodes[i].anchor);
        report.ms_track = ms_since(t_track);

        // Loop closing + merge on the configured stride.
        const auto t_loop = clock::now();
        std::vector<WarpFunction> merged = tracked.warps;
        std::vector<double> merged_var = tracked.variances;
        if (params_.loop_closing && params_.loop_stride > 0 && t % params_.loop_stride == 0 &&
            !graph_.keyframes.empty()) {
            const int ki = select_keyframe(track_positions);
            const KeyFrame& kf = graph_.keyframes[ki];
            FieldParams lp = params_.field;
            lp.seed = params_.field.seed + 2ull * static_cast<unsigned long long>(t) + 1ull;
            const auto loop_matches = loop_matcher ? loop_matcher(kf) : std::vector<MatchPair>{};
            const auto loop_field = estimate_field(loop_matches, kf.node_positions, lp);
            report.ms_loop = ms_since(t_loop);
            if (loop_field) {
                report.loop_keyframe = ki;
                const auto t_merge = clock::now();
                const std::size_t covered = kf.node_positions.size();
                for (std::size_t i = 0; i < covered && i < graph_.nodes.size(); ++i) {
                    const WarpFunction& inc = loop_field->node_increments[i];
                    const WarpFunction w_loop = warp_update(kf.node_warps[i], inc);
                    const double var_loop =
                        std::min(kVarianceMax, inc.scale * inc.scale * kf.node_variances[i] +
                                                   loop_field->node_uncertainties[i]);
                    const MergeResult m =
                        ekf_merge(tracked.warps[i], tracked.variances[i], w_loop, var_loop,
                                  track_positions[i], kf.node_positions[i], params_.gamma);
                    merged[i] = m.warp;
                    merged_var[i] = m.variance;
                }
                report.ms_merge = ms_since(t_merge);
            }
        } else {
            report.ms_loop = ms_since(t_loop);
        }

        update_feature_tracks(cur, track_matches, *field, prev_positions, merged, merged_var);
        finish_frame(cur, merged, merged_var, report);
        report.status = FrameStatus::Tracked;
        return report;
    }

    const NodeGraph& graph() const { return graph_; }
    NodeGraph& graph() { return graph_; }
    const FrameFeatures& previous_features() const { return prev_features_; }
    int frame_index() const { return frame_index_; }
    const std::vector<Vec2>& last_footprint() const { return last_footprint_; }
    /// Inlier labels of the last tracking-match set (empty after a lost frame).
    const std::vector<std::uint8_t>& last_inlier_flags() const { return last_inlier_flags_; }
    const Params& params() const { return params_; }

private:
    int select_keyframe(std::span<const Vec2> positions_now) const {
        int best = 0;
        double best_d = std::numeric_limits<double>::max();
        for (std::size_t k = 0; k < graph_.keyframes.size(); ++k) {
            const double d = keyframe_mean_displacement(graph_.keyframes[k], positions_now);
            if (d < best_d) {
                best_d = d;
                best = static_cast<int>(k);
            }
        }
        return best;
    }

    /// Tracking failed: brute-force loop closing over keyframes ordered by
    /// stored distance; on success the loop estimate alone replaces
    /// tracking, otherwise the frame is left unprocessed.
    FrameReport handle_lost(const FrameFeatures& cur, const LoopMatcher& loop_matcher,
                            FrameReport report) {
        using clock = std::chrono::steady_clock;
        const auto t0 = clock::now();
        report.status = FrameStatus::Lost;
        report.node_count = static_cast<int>(graph_.nodes.size());
        if (!params_.loop_closing || graph_.keyframes.empty() || !loop_matcher) return report;

        const auto positions = graph_.positions();
        std::vector<std::pair<double, int>> order;
        for (std::size_t k = 0; k < graph_.keyframes.size(); ++k)
            order.emplace_back(keyframe_mean_displacement(graph_.keyframes[k], positions),
                               static_cast<int>(k));
        std::sort(order.begin(), order.end());

        FieldParams lp = params_.field;
        lp.seed = params_.field.seed + 2ull * static_cast<unsigned long long>(frame_index_) + 1ull;
        for (const auto& [d, ki] : order) {
            const KeyFrame& kf = graph_.keyframes[ki];
            const auto matches = loop_matcher(kf);
            const auto loop_field = estimate_field(matches, kf.node_positions, lp);
            if (!loop_field) continue;

            std::vector<WarpFunction> warps = graph_.warps();
            std::vector<double> variances(graph_.nodes.size());
            for (std::size_t i = 0; i < graph_.nodes.size(); ++i)
                variances[i] = graph_.nodes[i].variance;
            const std::size_t covered = kf.node_positions.size();
            for (std::size_t i = 0; i < covered && i < graph_.nodes.size(); ++i) {
                const WarpFunction& inc = loop_field->node_increments[i];
                warps[i] = warp_update(kf.node_warps[i], inc);
                variances[i] =
                    std::min(kVarianceMax, inc.scale * inc.scale * kf.node_variances[i] +
                                               loop_field->node_uncertainties[i]);
            }
            report.loop_keyframe = ki;
            report.inlier_count = loop_field->inlier_count;
            report.ms_loop = std::chrono::duration<double, std::milli>(clock::now() - t0).count();

            // Feature chain broke: restart tracks from the interpolated node
            // uncertainty at each detection.
            graph_.feature_tracks.clear();
            std::vector<Vec2> new_positions(graph_.nodes.size());
            for (std::size_t i = 0; i < graph_.nodes.size(); ++i)
                new_positions[i] = warps[i].apply(graph_.nodes[i].anchor);
            for (const auto& kp : cur.keypoints)
                graph_.feature_tracks.push_back(
                    {kp.position, blended_variance_at(kp.position, new_positions, variances)});

            finish_frame(cur, warps, variances, report);
            report.status = FrameStatus::LoopClosed;
            return report;
        }
        return report;  // unprocessed; prior state retained
    }

    /// Clamp, ARAP, commit node state, keyframe check, node insertion.
    void finish_frame(const FrameFeatures& cur, std::vector<WarpFunction>& warps,
                      std::vector<double>& variances, FrameReport& report) {
        using clock = std::chrono::steady_clock;
        const std::size_t n = graph_.nodes.size();

        std::vector<Vec2> positions(n);
        for (std::size_t i = 0; i < n; ++i) positions[i] = warps[i].apply(graph_.nodes[i].anchor);
        for (std::size_t i = 0; i < n; ++i)
            variances[i] = clamp_node_variance(variances[i], graph_.feature_tracks, positions[i],
                                               params_.beta);

        const auto t_arap = clock::now();
        const auto anchors = graph_.anchors();
        const ArapResult arap =
            arap_smooth(anchors, warps, variances, params_.alpha, kArapMaxIters, params_.workers);
        report.ms_arap =
            std::chrono::duration<double, std::milli>(clock::now() - t_arap).count();

        double var_sum = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            graph_.nodes[i].warp = arap.warps[i];
            graph_.nodes[i].variance = variances[i];
            graph_.nodes[i].refresh_position();
            var_sum += variances[i];
        }
        report.mean_variance = n > 0 ? var_sum / static_cast<double>(n) : 0.0;

        report.keyframe_added =
            maybe_add_keyframe(graph_, frame_index_, params_.keyframe_threshold, cur);

        last_footprint_ = invert_frame_boundary(frame_w_, frame_h_, anchors, arap.warps,
                                                params_.alpha);
        report.nodes_added =
            insert_nodes(graph_, CoverageRegion::from_polygon(last_footprint_), params_.alpha);
        report.node_count = static_cast<int>(graph_.nodes.size());

        prev_features_ = cur;
    }

    /// Eq.-(10)-style per-feature variance chain, aligned with the current
    /// frame's detections: inlier matches inherit and grow by the squared
    /// residual, outlier matches propagate like nodes, fresh detections
    /// start from the interpolated node variance at their position.
    void update_feature_tracks(const FrameFeatures& cur, const std::vector<MatchPair>& matches,
                               const FieldEstimate& field, std::span<const Vec2> prev_positions,
                               std::span<const WarpFunction> merged_warps,
                               std::span<const double> merged_var) {
        auto key_of = [](const Vec2& p) {
            std::uint64_t kx, ky;
            std::memcpy(&kx, &p.x, sizeof kx);
            std::memcpy(&ky, &p.y, sizeof ky);
            return (kx * 1000003ull) ^ ky;
        };
        std::unordered_map<std::uint64_t, double> prev_var;
        prev_var.reserve(graph_.feature_tracks.size());
        for (const auto& tr : graph_.feature_tracks) prev_var[key_of(tr.position)] = tr.variance;

        std::vector<Vec2> inlier_apts;
        for (std::size_t m = 0; m < matches.size(); ++m)
            if (field.inlier_flags[m]) inlier_apts.push_back(matches[m].point_a);

        std::unordered_map<std::uint64_t, FeatureTrack> continued;
        for (std::size_t m = 0; m < matches.size(); ++m) {
            const auto it = prev_var.find(key_of(matches[m].point_a));
            if (it == prev_var.end()) continue;
            FeatureTrack track{matches[m].point_a, it->second};
            if (field.inlier_flags[m]) {
                track = propagate_feature_uncertainty(track, field.match_residuals[m]);
            } else {
                // Nearest node's increment scale; uncertainty kernel at the
                // feature's previous position.
                double d2min = std::numeric_limits<double>::max();
                std::size_t nearest = 0;
                for (std::size_t i = 0; i < prev_positions.size(); ++i) {
                    const double d2 = dist2(prev_positions[i], matches[m].point_a);
                    if (d2 < d2min) {
                        d2min = d2;
                        nearest = i;
                    }
                }
                const double ds = field.node_increments[nearest].scale;
                const double dsig = inlier_apts.empty()
                                        ? 1.0
                                        : node_uncertainty(matches[m].point_a, inlier_apts,
                                                           params_.beta);
                track = propagate_feature_uncertainty(track, ds * ds, dsig);
            }
            track.position = matches[m].point_b;
            continued[key_of(matches[m].point_b)] = track;
        }

        std::vector<Vec2> node_positions(graph_.nodes.size());
        for (std::size_t i = 0; i < graph_.nodes.size(); ++i)
            node_positions[i] = merged_warps[i].apply(graph_.nodes[i].anchor);

        graph_.feature_tracks.clear();
        graph_.feature_tracks.reserve(cur.size());
        for (const auto& kp : cur.keypoints) {
            const auto it = continued.find(key_of(kp.position));
            if (it != continued.end()) {
                graph_.feature_tracks.push_back(it->second);
            } else {
                graph_.feature_tracks.push_back(
                    {kp.position, blended_variance_at(kp.position, node_positions, merged_var)});
            }
        }
    }

    double blended_variance_at(const Vec2& p, std::span<const Vec2> node_positions,
                               std::span<const double> variances) const {
        double d2min = std::numeric_limits<double>::max();
        for (const auto& q : node_positions) d2min = std::min(d2min, dist2(q, p));
        double wsum = 0.0, acc = 0.0;
        for (std::size_t i = 0; i < node_positions.size(); ++i) {
            const double w = std::exp(-params_.alpha * (dist2(node_positions[i], p) - d2min));
            wsum += w;
            acc += w * variances[i];
        }
        return wsum > 0.0 ? acc / wsum : 0.0;
    }

    Params params_;
    NodeGraph graph_;
    FrameFeatures prev_features_;
    std::vector<Vec2> last_footprint_;
    std::vector<std::uint8_t> last_inlier_flags_;
    int frame_w_ = 0, frame_h_ = 0;
    int frame_index_ = 0;
};

}  // namespace nrmosaic
