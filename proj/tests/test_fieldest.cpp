#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "nrmosaic/fieldest.hpp"

using namespace nrmosaic;

namespace {

std::vector<Vec2> lattice_anchors(int nx, int ny, double w, double h) {
    std::vector<Vec2> out;
    for (int j = 0; j < ny; ++j)
        for (int i = 0; i < nx; ++i)
            out.push_back({w * (i + 0.5) / nx, h * (j + 0.5) / ny});
    return out;
}

/// Smooth synthetic warp used as ground truth: global similarity plus two
/// Gaussian bumps.
struct SmoothWarp {
    Similarity2 global;
    Vec2 c1{150, 100}, c2{330, 180};
    Vec2 d1{8, 3}, d2{-5, 7};
    double rho = 90.0;

    Vec2 apply(const Vec2& p) const {
        Vec2 out = global.apply(p);
        out += std::exp(-dist2(p, c1) / (2 * rho * rho)) * d1;
        out += std::exp(-dist2(p, c2) / (2 * rho * rho)) * d2;
        return out;
    }
};

}  // namespace

TEST(FieldEstimate, GlobalTranslationRecoveredExactly) {
    std::mt19937_64 rng(3);
    std::uniform_real_distribution<double> ux(10, 470), uy(10, 260);
    std::vector<MatchPair> matches;
    for (int i = 0; i < 60; ++i) {
        const Vec2 a{ux(rng), uy(rng)};
        matches.push_back({a, a + Vec2{5, 5}, 1.0});
    }
    const auto anchors = lattice_anchors(5, 4, 480, 270);
    const auto est = estimate_field(matches, anchors, FieldParams{});
    ASSERT_TRUE(est.has_value());
    EXPECT_EQ(est->inlier_count, 60);
    for (std::size_t i = 0; i < anchors.size(); ++i) {
        const WarpFunction& inc = est->node_increments[i];
        EXPECT_NEAR(inc.scale, 1.0, 1e-9);
        const Vec2 moved = inc.apply(anchors[i]);
        EXPECT_NEAR(moved.x, anchors[i].x + 5.0, 1e-6);
        EXPECT_NEAR(moved.y, anchors[i].y + 5.0, 1e-6);
    }
}

TEST(FieldEstimate, PlantedOutliersClassified) {
    std::mt19937_64 rng(17);
    std::uniform_real_distribution<double> ux(10, 470), uy(10, 260);
    SmoothWarp truth;
    truth.global = {1.02, 0.03, {6, -4}};

    std::vector<MatchPair> matches;
    std::vector<bool> is_inlier;
    for (int i = 0; i < 100; ++i) {
        const Vec2 a{ux(rng), uy(rng)};
        matches.push_back({a, truth.apply(a), 1.0});
        is_inlier.push_back(true);
    }
    for (int i = 0; i < 30; ++i) {
        matches.push_back({{ux(rng), uy(rng)}, {ux(rng), uy(rng)}, 1.0});
        is_inlier.push_back(false);
    }

    const auto anchors = lattice_anchors(6, 4, 480, 270);
    const auto est = estimate_field(matches, anchors, FieldParams{});
    ASSERT_TRUE(est.has_value());

    int outliers_caught = 0, inliers_kept = 0, false_inliers = 0;
    for (std::size_t i = 0; i < matches.size(); ++i) {
        if (!is_inlier[i] && !est->inlier_flags[i]) ++outliers_caught;
        if (is_inlier[i] && est->inlier_flags[i]) ++inliers_kept;
        if (!is_inlier[i] && est->inlier_flags[i]) ++false_inliers;
    }
    EXPECT_GE(outliers_caught, static_cast<int>(0.95 * 30));
    EXPECT_GE(inliers_kept, static_cast<int>(0.90 * 100));
    (void)false_inliers;
}

TEST(FieldEstimate, TooFewMatchesFail) {
    std::vector<MatchPair> matches = {{{0, 0}, {1, 1}, 1.0},
                                      {{10, 0}, {11, 1}, 1.0},
                                      {{0, 10}, {1, 11}, 1.0}};
    const std::vector<Vec2> anchors = {{5, 5}};
    EXPECT_FALSE(estimate_field(matches, anchors, FieldParams{}).has_value());
}

TEST(FieldEstimate, CollinearGeometryFails) {
    std::vector<MatchPair> matches;
    for (int i = 0; i < 20; ++i) {
        const Vec2 a{10.0 * i, 50.0};
        matches.push_back({a, a + Vec2{3, 0}, 1.0});
    }
    const std::vector<Vec2> anchors = {{100, 50}};
    EXPECT_FALSE(estimate_field(matches, anchors, FieldParams{}).has_value());
}

TEST(FieldEstimate, RigidMotionAgreesWithGlobalFit) {
    std::mt19937_64 rng(23);
    std::uniform_real_distribution<double> ux(10, 470), uy(10, 260);
    const Similarity2 truth{1.1, 0.35, {24, -13}};
    std::vector<MatchPair> matches;
    for (int i = 0; i < 80; ++i) {
        const Vec2 a{ux(rng), uy(rng)};
        matches.push_back({a, truth.apply(a), 1.0});
    }
    const auto anchors = lattice_anchors(5, 4, 480, 270);
    const auto est = estimate_field(matches, anchors, FieldParams{});
    ASSERT_TRUE(est.has_value());
    for (std::size_t i = 0; i < anchors.size(); ++i) {
        const Vec2 got = est->node_increments[i].apply(anchors[i]);
        const Vec2 want = truth.apply(anchors[i]);
        EXPECT_NEAR(got.x, want.x, 1e-6);
        EXPECT_NEAR(got.y, want.y, 1e-6);
    }
}

TEST(FieldEstimate, OutlierLabeledMatchDoesNotChangeIncrements) {
    std::mt19937_64 rng(29);
    std::uniform_real_distribution<double> ux(10, 470), uy(10, 260);
    std::vector<MatchPair> matches;
    for (int i = 0; i < 50; ++i) {
        const Vec2 a{ux(rng), uy(rng)};
        matches.push_back({a, a + Vec2{4, -2}, 1.0});
    }
    const auto anchors = lattice_anchors(4, 3, 480, 270);
    const auto clean = estimate_field(matches, anchors, FieldParams{});
    ASSERT_TRUE(clean.has_value());

    auto with_outlier = matches;
    with_outlier.push_back({{240, 135}, {100, 260}, 1.0});  // far off the field
    const auto est = estimate_field(with_outlier, anchors, FieldParams{});
    ASSERT_TRUE(est.has_value());
    EXPECT_FALSE(est->inlier_flags.back());
    EXPECT_EQ(est->inlier_count, clean->inlier_count);
    for (std::size_t i = 0; i < anchors.size(); ++i) {
        const Vec2 a = clean->node_increments[i].apply(anchors[i]);
        const Vec2 b = est->node_increments[i].apply(anchors[i]);
        EXPECT_NEAR(a.x, b.x, 1e-9);
        EXPECT_NEAR(a.y, b.y, 1e-9);
    }
}

TEST(FieldEstimate, DeterministicForFixedSeed) {
    std::mt19937_64 rng(31);
    std::uniform_real_distribution<double> ux(10, 470), uy(10, 260);
    SmoothWarp truth;
    truth.global = {1.0, -0.05, {3, 9}};
    std::vector<MatchPair> matches;
    for (int i = 0; i < 70; ++i) {
        const Vec2 a{ux(rng), uy(rng)};
        matches.push_back({a, truth.apply(a), 1.0});
    }
    for (int i = 0; i < 10; ++i) matches.push_back({{ux(rng), uy(rng)}, {ux(rng), uy(rng)}, 1.0});

    const auto anchors = lattice_anchors(5, 4, 480, 270);
    FieldParams params;
    params.workers = 4;
    const auto a = estimate_field(matches, anchors, params);
    const auto b = estimate_field(matches, anchors, params);
    ASSERT_TRUE(a.has_value());
    ASSERT_TRUE(b.has_value());
    EXPECT_EQ(a->inlier_flags, b->inlier_flags);
    for (std::size_t i = 0; i < anchors.size(); ++i) {
        EXPECT_EQ(a->node_increments[i].scale, b->node_increments[i].scale);
        EXPECT_EQ(a->node_increments[i].dq.w, b->node_increments[i].dq.w);
        EXPECT_EQ(a->node_increments[i].dq.dx, b->node_increments[i].dq.dx);
        EXPECT_EQ(a->node_uncertainties[i], b->node_uncertainties[i]);
    }
}

TEST(NodeUncertainty, CoincidentInlierGivesOne) {
    const std::vector<Vec2> inliers = {{100, 100}};
    EXPECT_DOUBLE_EQ(node_uncertainty({100, 100}, inliers, 3e-3), 1.0);
}

TEST(NodeUncertainty, MatchesExponentialAtTenPixels) {
    const std::vector<Vec2> inliers = {{110, 100}};
    const double expected = std::exp(3e-3 * 100.0);  // exp(0.3)
    EXPECT_NEAR(node_uncertainty({100, 100}, inliers, 3e-3), expected, 1e-12);
    EXPECT_NEAR(expected, 1.3498588075760032, 1e-12);
}

TEST(NodeUncertainty, UsesNearestInlier) {
    const std::vector<Vec2> inliers = {{105, 100}, {150, 100}};
    EXPECT_DOUBLE_EQ(node_uncertainty({100, 100}, inliers, 3e-3), std::exp(3e-3 * 25.0));
}

TEST(NodeUncertainty, EmptyInlierListRejected) {
    EXPECT_THROW(node_uncertainty({0, 0}, {}, 3e-3), std::invalid_argument);
}

TEST(NodeUncertainty, NonDecreasingInDistance) {
    const std::vector<Vec2> inliers = {{0, 0}};
    double prev = 0.0;
    for (int d = 0; d <= 400; d += 20) {
        const double u = node_uncertainty({static_cast<double>(d), 0}, inliers, 3e-3);
        EXPECT_GE(u, prev);
        EXPECT_GE(u, 1.0);
        prev = u;
    }
}
