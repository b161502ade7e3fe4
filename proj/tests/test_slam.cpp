#include <gtest/gtest.h>

#include <cmath>

#include "nrmosaic/config.hpp"
#include "nrmosaic/slam.hpp"
#include "nrmosaic/snapshot.hpp"
#include "nrmosaic/synth.hpp"

using namespace nrmosaic;

namespace {

NodeGraph simple_graph(std::initializer_list<Vec2> anchors, double spacing = 60.0) {
    NodeGraph g;
    g.hex_spacing = spacing;
    for (const Vec2& a : anchors) {
        Node n;
        n.anchor = a;
        n.refresh_position();
        g.nodes.push_back(n);
    }
    return g;
}

FieldEstimate uniform_field(std::size_t n, const WarpFunction& inc, double dsigma) {
    FieldEstimate f;
    f.node_increments.assign(n, inc);
    f.node_uncertainties.assign(n, dsigma);
    return f;
}

}  // namespace

// --- Tracking -------------------------------------------------------------

TEST(TrackStep, IdentityIncrementKeepsWarp) {
    NodeGraph g = simple_graph({{100, 100}});
    const auto out = track_step(g, uniform_field(1, WarpFunction::identity(), 1.0));
    EXPECT_DOUBLE_EQ(out.variances[0], 1.0);
    const Vec2 p = out.warps[0].apply({100, 100});
    EXPECT_NEAR(p.x, 100.0, 1e-12);
    EXPECT_NEAR(p.y, 100.0, 1e-12);
}

TEST(TrackStep, VariancePropagation) {
    NodeGraph g = simple_graph({{0, 0}});
    g.nodes[0].variance = 3.0;
    WarpFunction inc{2.0, DualQuat2::identity()};
    const auto out = track_step(g, uniform_field(1, inc, 1.0));
    EXPECT_DOUBLE_EQ(out.variances[0], 13.0);  // 4 * 3 + 1
}

TEST(TrackStep, ConsecutiveTranslationsCompose) {
    NodeGraph g = simple_graph({{50, 60}});
    const auto s1 = track_step(g, uniform_field(1, {1.0, DualQuat2::from_translation({1, 0})}, 1.0));
    g.nodes[0].warp = s1.warps[0];
    g.nodes[0].variance = s1.variances[0];
    g.nodes[0].refresh_position();
    const auto s2 = track_step(g, uniform_field(1, {1.0, DualQuat2::from_translation({0, 1})}, 1.0));
    const Vec2 p = s2.warps[0].apply({50, 60});
    EXPECT_NEAR(p.x, 51.0, 1e-9);
    EXPECT_NEAR(p.y, 61.0, 1e-9);
}

TEST(TrackStep, FieldMustCoverAllNodes) {
    NodeGraph g = simple_graph({{0, 0}, {10, 0}});
    EXPECT_THROW(track_step(g, uniform_field(1, WarpFunction::identity(), 1.0)),
                 std::invalid_argument);
}

// --- Feature uncertainty ---------------------------------------------------

TEST(FeatureUncertainty, InlierZeroResidualUnchanged) {
    const FeatureTrack t = propagate_feature_uncertainty({{1, 2}, 4.0}, 0.0);
    EXPECT_DOUBLE_EQ(t.variance, 4.0);
}

TEST(FeatureUncertainty, InlierAddsResidual) {
    const FeatureTrack t = propagate_feature_uncertainty({{1, 2}, 1.0}, 0.25);
    EXPECT_DOUBLE_EQ(t.variance, 1.25);
}

TEST(FeatureUncertainty, OutlierUsesNodeForm) {
    const FeatureTrack t = propagate_feature_uncertainty({{1, 2}, 1.0}, 1.0, 2.0);
    EXPECT_DOUBLE_EQ(t.variance, 3.0);
}

// --- Variance clamp ---------------------------------------------------------

TEST(ClampVariance, CoincidentZeroVarianceFeatureBoundsToOne) {
    const std::vector<FeatureTrack> tracks = {{{100, 100}, 0.0}};
    EXPECT_DOUBLE_EQ(clamp_node_variance(50.0, tracks, {100, 100}, 3e-3), 1.0);
}

TEST(ClampVariance, NoClampWhenBoundLooser) {
    const std::vector<FeatureTrack> tracks = {{{100, 100}, 9.0}};
    EXPECT_DOUBLE_EQ(clamp_node_variance(5.0, tracks, {100, 100}, 3e-3), 5.0);
}

TEST(ClampVariance, TightensToFeatureBound) {
    // Distance chosen so exp(beta d^2) = 3.
    const double beta = 3e-3;
    const double d = std::sqrt(std::log(3.0) / beta);
    const std::vector<FeatureTrack> tracks = {{{100 + d, 100}, 2.0}};
    EXPECT_NEAR(clamp_node_variance(50.0, tracks, {100, 100}, beta), 5.0, 1e-12);
}

TEST(ClampVariance, EmptyFeatureListKeepsVariance) {
    EXPECT_DOUBLE_EQ(clamp_node_variance(7.0, {}, {0, 0}, 3e-3), 7.0);
}

TEST(ClampVariance, BoundHoldsForAllFeaturesAfterClamp) {
    std::vector<FeatureTrack> tracks;
    for (int i = 0; i < 30; ++i)
        tracks.push_back({{10.0 * i, 5.0 * (i % 7)}, 0.5 * i});
    const Vec2 node{120, 20};
    const double clamped = clamp_node_variance(1e9, tracks, node, 3e-3);
    for (const auto& t : tracks)
        EXPECT_LE(clamped, t.variance + bounded_exp(3e-3 * dist2(node, t.position)) + 1e-12);
}

// --- Keyframes ---------------------------------------------------------------

TEST(Keyframes, FirstFrameAlwaysAdded) {
    NodeGraph g = simple_graph({{10, 10}, {20, 20}});
    EXPECT_TRUE(maybe_add_keyframe(g, 0, 50.0, FrameFeatures{}));
    EXPECT_EQ(g.keyframes.size(), 1u);
    EXPECT_EQ(g.keyframes[0].node_positions.size(), 2u);
}

TEST(Keyframes, StationaryNodesDoNotAdd) {
    NodeGraph g = simple_graph({{10, 10}, {20, 20}});
    maybe_add_keyframe(g, 0, 50.0, FrameFeatures{});
    EXPECT_FALSE(maybe_add_keyframe(g, 5, 50.0, FrameFeatures{}));
    EXPECT_EQ(g.keyframes.size(), 1u);
}

TEST(Keyframes, DisplacementBeyondThresholdAdds) {
    const double h = 50.0;
    NodeGraph g = simple_graph({{10, 10}, {20, 20}});
    maybe_add_keyframe(g, 0, h, FrameFeatures{});
    for (auto& n : g.nodes) {
        n.warp = {1.0, DualQuat2::from_translation({h + 1.0, 0.0})};
        n.refresh_position();
    }
    EXPECT_TRUE(maybe_add_keyframe(g, 7, h, FrameFeatures{}));
    EXPECT_EQ(g.keyframes.size(), 2u);
}

TEST(Keyframes, NodesAddedLaterExcludedFromMean) {
    NodeGraph g = simple_graph({{0, 0}});
    maybe_add_keyframe(g, 0, 10.0, FrameFeatures{});
    Node extra;
    extra.anchor = {500, 500};
    extra.warp = {1.0, DualQuat2::from_translation({400, 0})};
    extra.refresh_position();
    g.nodes.push_back(extra);
    // Only the first node counts against keyframe 0 and it has not moved.
    EXPECT_DOUBLE_EQ(keyframe_mean_displacement(g.keyframes[0], g.positions()), 0.0);
}

// --- EKF merge ----------------------------------------------------------------

TEST(EkfMerge, UncorrelatedEqualVariances) {
    const WarpFunction track = WarpFunction::identity();
    const WarpFunction loop{1.0, DualQuat2::from_translation({2, 0})};
    // eta = exp(-gamma d^2) == 0 in double precision for d = 2000.
    const auto m = ekf_merge(track, 1.0, loop, 1.0, {2000, 0}, {0, 0}, 5e-3);
    EXPECT_FALSE(m.fallback);
    EXPECT_DOUBLE_EQ(m.variance, 0.5);
    const Vec2 p = m.warp.apply({0, 0});
    EXPECT_NEAR(p.x, 1.0, 1e-12);  // equal weights average the translations
    EXPECT_NEAR(p.y, 0.0, 1e-12);
}

TEST(EkfMerge, InfiniteLoopVarianceKeepsTracking) {
    const WarpFunction track{1.0, DualQuat2::from_translation({5, 5})};
    const WarpFunction loop{1.0, DualQuat2::from_translation({50, -50})};
    const auto m = ekf_merge(track, 2.0, loop, 1e12, {100, 0}, {0, 0}, 5e-3);
    const Vec2 p = m.warp.apply({0, 0});
    EXPECT_NEAR(p.x, 5.0, 1e-3);
    EXPECT_NEAR(p.y, 5.0, 1e-3);
    EXPECT_NEAR(m.variance, 2.0, 1e-6);
}

TEST(EkfMerge, SingularCovarianceFallsBackToSmallerVariance) {
    const WarpFunction track{1.0, DualQuat2::from_translation({1, 0})};
    const WarpFunction loop{1.0, DualQuat2::from_translation({9, 0})};
    // eta = 1 (same position), equal variances: A is singular.
    const auto m = ekf_merge(track, 2.0, loop, 2.0, {0, 0}, {0, 0}, 5e-3);
    EXPECT_TRUE(m.fallback);
    EXPECT_DOUBLE_EQ(m.variance, 2.0);
    const Vec2 p = m.warp.apply({0, 0});
    EXPECT_DOUBLE_EQ(p.x, 1.0);  // tracking side
}

TEST(EkfMerge, MergedVarianceNeverExceedsSmallerInput) {
    std::mt19937_64 rng(51);
    std::uniform_real_distribution<double> var(0.1, 100.0), d(0.0, 60.0);
    for (int i = 0; i < 500; ++i) {
        const double vt = var(rng), vl = var(rng), dist_px = d(rng);
        const auto m = ekf_merge(WarpFunction::identity(), vt, WarpFunction::identity(), vl,
                                 {dist_px, 0}, {0, 0}, 5e-3);
        if (m.fallback)
            EXPECT_DOUBLE_EQ(m.variance, std::min(vt, vl));
        else
            EXPECT_LE(m.variance, std::min(vt, vl) + 1e-12);
    }
}

TEST(EkfMerge, RejectsNonPositiveVariance) {
    EXPECT_THROW(ekf_merge(WarpFunction::identity(), 0.0, WarpFunction::identity(), 1.0,
                           {0, 0}, {0, 0}, 5e-3),
                 std::invalid_argument);
}

// --- Node insertion --------------------------------------------------------------

TEST(InsertNodes, SeedsImageCenterAndCoversRegion) {
    NodeGraph g;
    g.hex_spacing = 60.0;
    const Rect region = Rect::of_size(480, 270);
    const int added = insert_nodes(g, CoverageRegion::from_rect(region), 2e-4);
    ASSERT_GT(added, 0);
    EXPECT_DOUBLE_EQ(g.nodes[0].anchor.x, 240.0);
    EXPECT_DOUBLE_EQ(g.nodes[0].anchor.y, 135.0);
    for (double y = 0; y < 270; y += 3)
        for (double x = 0; x < 480; x += 3) {
            double best = std::numeric_limits<double>::max();
            for (const auto& n : g.nodes) best = std::min(best, dist2(n.anchor, {x, y}));
            EXPECT_LE(std::sqrt(best), g.hex_spacing) << "uncovered pixel " << x << "," << y;
        }
}

TEST(InsertNodes, SecondCallAddsNothing) {
    NodeGraph g;
    g.hex_spacing = 60.0;
    const auto region = CoverageRegion::from_rect(Rect::of_size(480, 270));
    insert_nodes(g, region, 2e-4);
    EXPECT_EQ(insert_nodes(g, region, 2e-4), 0);
}

TEST(InsertNodes, ExpansionBlendsExistingWarps) {
    NodeGraph g;
    g.hex_spacing = 60.0;
    insert_nodes(g, CoverageRegion::from_rect(Rect::of_size(480, 270)), 2e-4);

    // Give existing nodes a smoothly varying warp so the blend is nontrivial.
    for (auto& n : g.nodes) {
        n.warp = {1.0, DualQuat2::from_translation({0.01 * n.anchor.x, 0.005 * n.anchor.y})};
        n.refresh_position();
    }
    const std::size_t n_before = g.nodes.size();
    std::vector<Vec2> snap_anchors;
    std::vector<WarpFunction> snap_warps;
    for (const auto& n : g.nodes) {
        snap_anchors.push_back(n.anchor);
        snap_warps.push_back(n.warp);
    }

    const double alpha = 2e-4;
    const int added = insert_nodes(
        g, CoverageRegion::from_rect({0, 0, 480 + g.hex_spacing, 270}), alpha);
    ASSERT_GT(added, 0);

    for (std::size_t i = n_before; i < g.nodes.size(); ++i) {
        std::vector<double> w(n_before);
        for (std::size_t j = 0; j < n_before; ++j)
            w[j] = std::exp(-alpha * dist2(snap_anchors[j], g.nodes[i].anchor));
        const WarpFunction expected = blend_warps(w, snap_warps);
        const Vec2 got = g.nodes[i].warp.apply(g.nodes[i].anchor);
        const Vec2 want = expected.apply(g.nodes[i].anchor);
        EXPECT_NEAR(got.x, want.x, 1e-9);
        EXPECT_NEAR(got.y, want.y, 1e-9);
    }
}

TEST(InsertNodes, PolygonRegionRespectsBoundary) {
    NodeGraph g;
    g.hex_spacing = 40.0;
    const std::vector<Vec2> tri = {{0, 0}, {400, 0}, {0, 300}};
    insert_nodes(g, CoverageRegion::from_polygon(tri), 2e-4);
    for (const auto& n : g.nodes)
        EXPECT_LT(polygon_distance(tri, n.anchor), g.hex_spacing);
    // every polygon point covered
    for (double y = 0; y < 300; y += 5)
        for (double x = 0; x < 400; x += 5) {
            if (!point_in_polygon(tri, {x, y})) continue;
            double best = std::numeric_limits<double>::max();
            for (const auto& n : g.nodes) best = std::min(best, dist2(n.anchor, {x, y}));
            EXPECT_LE(std::sqrt(best), g.hex_spacing);
        }
}

// --- Engine ------------------------------------------------------------------------

namespace {

struct PipelineFixture {
    SceneSpec spec;
    SyntheticScene scene;
    Config cfg;
    Engine::Params params;
    DetectorConfig detector;

    explicit PipelineFixture(int frames, const std::string& path = "scan", double extent = 60.0)
        : spec(make_spec(frames, path, extent)),
          scene(SyntheticScene::build(spec)),
          cfg(),
          params((cfg.workers = 2, make_engine_params(cfg, spec.width, spec.height))),
          detector(make_detector_config(cfg)) {}

    static SceneSpec make_spec(int frames, const std::string& path, double extent) {
        SceneSpec s;
        s.width = 320;
        s.height = 200;
        s.frames = frames;
        s.path = path;
        s.path_extent = extent;
        s.max_displacement = 8.0;
        return s;
    }

    FrameFeatures features(const ImageU8& im) const {
        return detect_features(to_gray(im), detector);
    }

    FrameReport step(Engine& engine, const ImageU8& frame) const {
        const FrameFeatures cur = features(frame);
        const auto matches =
            match_features(engine.previous_features(), cur, detector.ratio_test, params.workers);
        return engine.process_frame(cur, matches, [&](const KeyFrame& kf) {
            return match_features(kf.features, cur, detector.ratio_test, params.workers);
        });
    }
};

}  // namespace

TEST(Engine, StaticFramesStayPut) {
    PipelineFixture fx(1);
    const ImageU8 frame = fx.scene.render_frame(0, 2);
    Engine engine(fx.params);
    engine.initialize(fx.features(frame), fx.spec.width, fx.spec.height);
    const std::size_t n0 = engine.graph().nodes.size();

    for (int t = 1; t <= 8; ++t) {
        const auto report = fx.step(engine, frame);
        EXPECT_EQ(report.status, FrameStatus::Tracked);
    }
    const auto& tracks = engine.graph().feature_tracks;
    ASSERT_FALSE(tracks.empty());
    for (std::size_t i = 0; i < n0; ++i) {
        const auto& n = engine.graph().nodes[i];
        EXPECT_LT(dist(n.current_position, n.anchor), 0.01);
        // The variance respects the feature-track bound for every feature.
        double bound = std::numeric_limits<double>::max();
        double d2_nearest = std::numeric_limits<double>::max();
        for (const auto& tr : tracks) {
            const double d2 = dist2(n.current_position, tr.position);
            bound = std::min(bound, tr.variance + bounded_exp(fx.params.beta * d2));
            d2_nearest = std::min(d2_nearest, d2);
        }
        EXPECT_LE(n.variance, bound * (1.0 + 1e-9));
        // Nodes sitting on feature-rich texture stay tightly bounded.
        if (d2_nearest < 15.0 * 15.0) {
            EXPECT_LT(n.variance, 40.0);
        }
    }
}

TEST(Engine, SelfLoopClosureMatchesStoredKeyframe) {
    PipelineFixture fx(1);
    const ImageU8 frame = fx.scene.render_frame(0, 2);
    Engine engine(fx.params);
    engine.initialize(fx.features(frame), fx.spec.width, fx.spec.height);

    FrameReport report;
    for (int t = 1; t <= fx.params.loop_stride; ++t) report = fx.step(engine, frame);
    // Loop closing ran against keyframe 0 (the same image): the loop warp is
    // the stored warp composed with a near-identity increment.
    EXPECT_EQ(report.loop_keyframe, 0);
    const auto& kf = engine.graph().keyframes[0];
    for (std::size_t i = 0; i < kf.node_positions.size(); ++i) {
        const auto& n = engine.graph().nodes[i];
        EXPECT_LT(dist(n.current_position, kf.node_positions[i]), 0.05);
    }
}

TEST(Engine, DisjointKeyframeYieldsNoLoop) {
    PipelineFixture fx(1);
    const ImageU8 frame = fx.scene.render_frame(0, 2);
    Engine engine(fx.params);
    engine.initialize(fx.features(frame), fx.spec.width, fx.spec.height);
    FrameReport report;
    for (int t = 1; t <= fx.params.loop_stride; ++t) {
        const FrameFeatures cur = fx.features(frame);
        const auto matches = match_features(engine.previous_features(), cur,
                                            fx.detector.ratio_test, fx.params.workers);
        // Loop matcher simulating zero feature overlap with every keyframe.
        report = engine.process_frame(cur, matches,
                                      [](const KeyFrame&) { return std::vector<MatchPair>{}; });
        EXPECT_EQ(report.status, FrameStatus::Tracked);
    }
    EXPECT_EQ(report.loop_keyframe, -1);
}

TEST(Engine, BlankFrameIsLostAndStateRetained) {
    PipelineFixture fx(1);
    const ImageU8 frame = fx.scene.render_frame(0, 2);
    Engine engine(fx.params);
    engine.initialize(fx.features(frame), fx.spec.width, fx.spec.height);
    fx.step(engine, frame);

    const auto positions_before = engine.graph().positions();
    const ImageU8 blank = ImageU8::make(fx.spec.width, fx.spec.height, 3, 0);
    const auto lost_report = fx.step(engine, blank);
    EXPECT_EQ(lost_report.status, FrameStatus::Lost);
    const auto positions_after = engine.graph().positions();
    ASSERT_EQ(positions_before.size(), positions_after.size());
    for (std::size_t i = 0; i < positions_before.size(); ++i)
        EXPECT_EQ(positions_before[i].x, positions_after[i].x);

    // Recovery: the feature-rich frame matches the retained previous features.
    const auto recovered = fx.step(engine, frame);
    EXPECT_NE(recovered.status, FrameStatus::Lost);
}

TEST(Engine, KeyframesPairwiseSeparated) {
    PipelineFixture fx(40, "scan", 120.0);
    Engine engine(fx.params);
    const ImageU8 f0 = fx.scene.render_frame(0, 2);
    engine.initialize(fx.features(f0), fx.spec.width, fx.spec.height);
    for (int t = 1; t < fx.spec.frames; ++t) fx.step(engine, fx.scene.render_frame(t, 2));

    const auto& kfs = engine.graph().keyframes;
    ASSERT_GE(kfs.size(), 2u);
    for (std::size_t j = 1; j < kfs.size(); ++j) {
        for (std::size_t k = 0; k < j; ++k) {
            const std::size_t shared = std::min(kfs[j].node_positions.size(),
                                                kfs[k].node_positions.size());
            double sum = 0.0;
            for (std::size_t i = 0; i < shared; ++i)
                sum += dist(kfs[j].node_positions[i], kfs[k].node_positions[i]);
            EXPECT_GT(sum / static_cast<double>(shared), fx.params.keyframe_threshold);
        }
    }
}

TEST(Engine, DeterministicAcrossRunsAndWorkerCounts) {
    PipelineFixture fx(8, "scan", 30.0);
    auto run = [&](int workers) {
        Engine::Params p = fx.params;
        p.workers = workers;
        p.field.workers = workers;
        DetectorConfig dc = fx.detector;
        dc.workers = workers;
        Engine engine(p);
        const ImageU8 f0 = fx.scene.render_frame(0, 2);
        engine.initialize(detect_features(to_gray(f0), dc), fx.spec.width, fx.spec.height);
        for (int t = 1; t < fx.spec.frames; ++t) {
            const ImageU8 ft = fx.scene.render_frame(t, 2);
            const FrameFeatures cur = detect_features(to_gray(ft), dc);
            const auto matches =
                match_features(engine.previous_features(), cur, dc.ratio_test, workers);
            engine.process_frame(cur, matches, [&](const KeyFrame& kf) {
                return match_features(kf.features, cur, dc.ratio_test, workers);
            });
        }
        return engine.graph().positions();
    };
    const auto a = run(1);
    const auto b = run(1);
    const auto c = run(4);
    ASSERT_EQ(a.size(), b.size());
    ASSERT_EQ(a.size(), c.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
        EXPECT_EQ(a[i].x, b[i].x);
        EXPECT_EQ(a[i].y, b[i].y);
        EXPECT_EQ(a[i].x, c[i].x);
        EXPECT_EQ(a[i].y, c[i].y);
    }
}

TEST(Snapshot, SerializesGraphState) {
    NodeGraph g = simple_graph({{10, 20}, {30, 40}});
    g.feature_tracks.push_back({{5, 6}, 0.5});
    maybe_add_keyframe(g, 0, 10.0, FrameFeatures{});
    const json j = snapshot_json(g);
    EXPECT_EQ(j.at("nodes").size(), 2u);
    EXPECT_EQ(j.at("keyframes").size(), 1u);
    EXPECT_EQ(j.at("feature_tracks").size(), 1u);
    EXPECT_DOUBLE_EQ(j.at("nodes")[0].at("anchor")[0].get<double>(), 10.0);
}
