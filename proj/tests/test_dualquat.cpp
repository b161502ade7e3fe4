#include <gtest/gtest.h>

#include <cmath>

#include "nrmosaic/dualquat.hpp"
#include "oracles.hpp"

using namespace nrmosaic;
using test::MatTransform;
using test::RandomGen;

namespace {

constexpr double kPi = 3.14159265358979323846;

void expect_near(const Vec2& a, const Vec2& b, double tol) {
    EXPECT_NEAR(a.x, b.x, tol);
    EXPECT_NEAR(a.y, b.y, tol);
}

}  // namespace

TEST(DualQuat, RigidConstructorIdentity) {
    const DualQuat2 q = DualQuat2::from_rigid(0.0, {0, 0});
    expect_near(q.apply({5, 7}), {5, 7}, 0.0);
}

TEST(DualQuat, RigidConstructorQuarterTurn) {
    const DualQuat2 q = DualQuat2::from_rigid(kPi / 2, {1, 0});
    expect_near(q.apply({1, 0}), {1, 1}, 1e-12);
}

TEST(DualQuat, RigidConstructorHalfTurn) {
    const DualQuat2 q = DualQuat2::from_rigid(kPi, {0, 0});
    expect_near(q.apply({2, 3}), {-2, -3}, 1e-12);
}

TEST(DualQuat, TranslationConstructor) {
    expect_near(DualQuat2::from_translation({0, 0}).apply({1, 2}), {1, 2}, 0.0);
    expect_near(DualQuat2::from_translation({3, -4}).apply({0, 0}), {3, -4}, 0.0);
}

TEST(DualQuat, TranslationComposition) {
    RandomGen gen(11);
    for (int i = 0; i < 100; ++i) {
        const Vec2 t = gen.point(), u = gen.point(), x = gen.point();
        const DualQuat2 q = dq_mul(DualQuat2::from_translation(t),
                                   DualQuat2::from_translation(u));
        expect_near(q.apply(x), x + t + u, 1e-12);
    }
}

TEST(DualQuat, MulIdentityElement) {
    RandomGen gen(12);
    const DualQuat2 q = gen.dq();
    const DualQuat2 r = dq_mul(DualQuat2::identity(), q);
    EXPECT_DOUBLE_EQ(r.w, q.w);
    EXPECT_DOUBLE_EQ(r.z, q.z);
    EXPECT_DOUBLE_EQ(r.dx, q.dx);
    EXPECT_DOUBLE_EQ(r.dy, q.dy);
}

TEST(DualQuat, MulInverse) {
    RandomGen gen(13);
    for (int i = 0; i < 50; ++i) {
        const DualQuat2 q = gen.dq();
        const DualQuat2 id = dq_mul(q, q.conjugate());
        EXPECT_NEAR(id.w, 1.0, 1e-12);
        EXPECT_NEAR(id.z, 0.0, 1e-12);
        EXPECT_NEAR(id.dx, 0.0, 1e-12);
        EXPECT_NEAR(id.dy, 0.0, 1e-12);
    }
}

TEST(DualQuat, MulMatchesMatrixOracle) {
    RandomGen gen(14);
    double max_err = 0.0;
    for (int i = 0; i < 1000; ++i) {
        const double aa = gen.angle(), ab = gen.angle();
        const Vec2 ta = gen.point(100), tb = gen.point(100);
        const DualQuat2 q = dq_mul(DualQuat2::from_rigid(aa, ta),
                                   DualQuat2::from_rigid(ab, tb));
        const MatTransform oa = MatTransform::make(1.0, aa, ta);
        const MatTransform ob = MatTransform::make(1.0, ab, tb);
        const Vec2 x = gen.point();
        const Vec2 got = q.apply(x);
        const Vec2 want = oa.apply(ob.apply(x));
        max_err = std::max(max_err, dist(got, want));
    }
    EXPECT_LT(max_err, 1e-9);
}

TEST(Warp, ApplyIdentity) {
    expect_near(warp_apply(WarpFunction::identity(), {10, 20}), {10, 20}, 0.0);
}

TEST(Warp, ApplyScaleTranslation) {
    const WarpFunction w{2.0, DualQuat2::from_translation({1, 1})};
    expect_near(warp_apply(w, {3, 4}), {8, 10}, 1e-12);
}

TEST(Warp, UnapplyCases) {
    expect_near(warp_unapply(WarpFunction::identity(), {1, 2}), {1, 2}, 0.0);
    const WarpFunction w{2.0, DualQuat2::identity()};
    expect_near(warp_unapply(w, {4, 6}), {2, 3}, 1e-12);
}

TEST(Warp, UnapplyRejectsNonPositiveScale) {
    WarpFunction w;
    w.scale = 0.0;
    EXPECT_THROW(warp_unapply(w, {1, 1}), std::invalid_argument);
}

TEST(Warp, RoundTrip) {
    RandomGen gen(15);
    double max_err = 0.0;
    for (int i = 0; i < 1000; ++i) {
        const WarpFunction w = gen.warp();
        const Vec2 x = gen.point();
        max_err = std::max(max_err, dist(warp_apply(w, warp_unapply(w, x)), x));
        max_err = std::max(max_err, dist(warp_unapply(w, warp_apply(w, x)), x));
    }
    EXPECT_LT(max_err, 1e-9);
}

TEST(Warp, AnalyticInverseMatchesUnapply) {
    RandomGen gen(16);
    for (int i = 0; i < 200; ++i) {
        const WarpFunction w = gen.warp();
        const Vec2 y = gen.point();
        expect_near(warp_apply(w.inverse(), y), warp_unapply(w, y), 1e-9);
    }
}

TEST(Blend, SingleElementPassThrough) {
    const DualQuat2 q = DualQuat2::from_rigid(0.7, {2, 3});
    const double w[] = {1.0};
    const DualQuat2 dqs[] = {q};
    const double s[] = {1.5};
    const WarpFunction out = dq_blend(w, dqs, s);
    EXPECT_DOUBLE_EQ(out.scale, 1.5);
    EXPECT_NEAR(out.dq.w, q.w, 1e-15);
    EXPECT_NEAR(out.dq.z, q.z, 1e-15);
    EXPECT_NEAR(out.dq.dx, q.dx, 1e-15);
    EXPECT_NEAR(out.dq.dy, q.dy, 1e-15);
}

TEST(Blend, IdenticalInputsIdempotent) {
    const DualQuat2 q = DualQuat2::from_rigid(-1.2, {5, -1});
    const double w[] = {0.3, 1.7};
    const DualQuat2 dqs[] = {q, q};
    const double s[] = {2.0, 2.0};
    const WarpFunction out = dq_blend(w, dqs, s);
    EXPECT_NEAR(out.scale, 2.0, 1e-15);
    RandomGen gen(17);
    for (int i = 0; i < 10; ++i) {
        const Vec2 x = gen.point();
        expect_near(out.dq.apply(x), q.apply(x), 1e-12);
    }
}

TEST(Blend, HemispherizationHandlesDoubleCover) {
    const DualQuat2 q = DualQuat2::from_rigid(2.2, {4, -7});
    const double w[] = {0.3, 0.7};
    const DualQuat2 dqs[] = {q, q.negated()};
    const double s[] = {1.0, 1.0};
    const WarpFunction out = dq_blend(w, dqs, s);
    RandomGen gen(18);
    for (int i = 0; i < 10; ++i) {
        const Vec2 x = gen.point();
        expect_near(out.dq.apply(x), q.apply(x), 1e-9);
    }
}

TEST(Blend, AllZeroWeightsRejected) {
    const double w[] = {0.0, 0.0};
    const DualQuat2 dqs[] = {DualQuat2::identity(), DualQuat2::identity()};
    const double s[] = {1.0, 1.0};
    EXPECT_THROW(dq_blend(w, dqs, s), std::invalid_argument);
}

TEST(Blend, InvariantToUniformWeightRescale) {
    RandomGen gen(19);
    for (int trial = 0; trial < 50; ++trial) {
        std::vector<double> w, s, w2;
        std::vector<DualQuat2> dqs;
        const int n = 5;
        for (int i = 0; i < n; ++i) {
            w.push_back(gen.uniform(0.01, 1.0));
            s.push_back(gen.uniform(0.5, 2.0));
            dqs.push_back(gen.dq(20.0));
        }
        const double c = gen.uniform(0.1, 1000.0);
        for (double wi : w) w2.push_back(c * wi);
        const WarpFunction a = dq_blend(w, dqs, s);
        const WarpFunction b = dq_blend(w2, dqs, s);
        EXPECT_NEAR(a.scale, b.scale, 1e-12 * std::abs(a.scale));
        EXPECT_NEAR(a.dq.w, b.dq.w, 1e-12);
        EXPECT_NEAR(a.dq.z, b.dq.z, 1e-12);
        EXPECT_NEAR(a.dq.dx, b.dq.dx, 1e-12 * (1.0 + std::abs(a.dq.dx)));
        EXPECT_NEAR(a.dq.dy, b.dq.dy, 1e-12 * (1.0 + std::abs(a.dq.dy)));
    }
}

TEST(WarpUpdate, IdentityOldGivesDelta) {
    RandomGen gen(20);
    const WarpFunction delta = gen.warp();
    const WarpFunction out = warp_update(WarpFunction::identity(), delta);
    EXPECT_NEAR(out.scale, delta.scale, 1e-15);
    for (int i = 0; i < 5; ++i) {
        const Vec2 x = gen.point();
        expect_near(warp_apply(out, x), warp_apply(delta, x), 1e-10);
    }
}

TEST(WarpUpdate, IdentityDeltaKeepsOld) {
    RandomGen gen(21);
    const WarpFunction old = gen.warp();
    const WarpFunction out = warp_update(old, WarpFunction::identity());
    for (int i = 0; i < 5; ++i) {
        const Vec2 x = gen.point();
        expect_near(warp_apply(out, x), warp_apply(old, x), 1e-10);
    }
}

TEST(WarpUpdate, ChainsThroughOldWarp) {
    RandomGen gen(22);
    for (int trial = 0; trial < 10; ++trial) {
        WarpFunction old{2.0, DualQuat2::from_rigid(gen.angle(), gen.point(50))};
        WarpFunction delta{1.0, DualQuat2::from_rigid(gen.angle(), {1, 0})};
        const WarpFunction out = warp_update(old, delta);
        for (int i = 0; i < 10; ++i) {
            const Vec2 x = gen.point();
            expect_near(warp_apply(out, x), warp_apply(delta, warp_apply(old, x)), 1e-9);
        }
    }
}

TEST(Property, CompositionAssociativity) {
    RandomGen gen(23);
    double max_err = 0.0;
    for (int i = 0; i < 300; ++i) {
        const DualQuat2 a = gen.dq(), b = gen.dq(), c = gen.dq();
        const DualQuat2 lhs = dq_mul(a, dq_mul(b, c));
        const DualQuat2 rhs = dq_mul(dq_mul(a, b), c);
        const Vec2 x = gen.point();
        max_err = std::max(max_err, dist(lhs.apply(x), rhs.apply(x)));
    }
    EXPECT_LT(max_err, 1e-9);
}

TEST(Property, NormalizationIdempotent) {
    RandomGen gen(24);
    for (int i = 0; i < 100; ++i) {
        DualQuat2 q = gen.dq();
        q.w *= 3.7; q.z *= 3.7; q.dx *= 3.7; q.dy *= 3.7;
        const DualQuat2 n1 = q.normalized();
        const DualQuat2 n2 = n1.normalized();
        EXPECT_NEAR(n1.w, n2.w, 1e-15);
        EXPECT_NEAR(n1.z, n2.z, 1e-15);
        EXPECT_NEAR(n1.dx, n2.dx, 1e-15 * (1.0 + std::abs(n1.dx)));
        EXPECT_NEAR(n1.dy, n2.dy, 1e-15 * (1.0 + std::abs(n1.dy)));
    }
}

TEST(Property, WarpUpdateLawTenThousandCases) {
    RandomGen gen(25);
    double max_err = 0.0;
    for (int i = 0; i < 10000; ++i) {
        const WarpFunction old = gen.warp();
        const WarpFunction delta = gen.warp();
        const WarpFunction out = warp_update(old, delta);
        const Vec2 x = gen.point();
        max_err = std::max(max_err, dist(warp_apply(out, x),
                                         warp_apply(delta, warp_apply(old, x))));
    }
    EXPECT_LT(max_err, 1e-9);
}
