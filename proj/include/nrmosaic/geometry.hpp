#pragma once

#include <cmath>
#include <cstddef>
#include <limits>
#include <optional>
#include <span>
#include <vector>

namespace nrmosaic {

struct Vec2 {
    double x = 0.0;
    double y = 0.0;

    Vec2() = default;
    constexpr Vec2(double x_, double y_) : x(x_), y(y_) {}

    Vec2 operator+(const Vec2& o) const { return {x + o.x, y + o.y}; }
    Vec2 operator-(const Vec2& o) const { return {x - o.x, y - o.y}; }
    Vec2 operator*(double s) const { return {x * s, y * s}; }
    Vec2 operator/(double s) const { return {x / s, y / s}; }
    Vec2& operator+=(const Vec2& o) { x += o.x; y += o.y; return *this; }
    Vec2& operator-=(const Vec2& o) { x -= o.x; y -= o.y; return *this; }

    double dot(const Vec2& o) const { return x * o.x + y * o.y; }
    double cross(const Vec2& o) const { return x * o.y - y * o.x; }
    double norm2() const { return x * x + y * y; }
    double norm() const { return std::sqrt(norm2()); }
};

inline Vec2 operator*(double s, const Vec2& v) { return v * s; }

inline double dist2(const Vec2& a, const Vec2& b) { return (a - b).norm2(); }
inline double dist(const Vec2& a, const Vec2& b) { return (a - b).norm(); }

/// 2x2 matrix, row major.
struct Mat2 {
    double m00 = 0.0, m01 = 0.0;
    double m10 = 0.0, m11 = 0.0;

    static Mat2 identity() { return {1.0, 0.0, 0.0, 1.0}; }
    static Mat2 rotation(double angle) {
        const double c = std::cos(angle), s = std::sin(angle);
        return {c, -s, s, c};
    }

    Vec2 operator*(const Vec2& v) const {
        return {m00 * v.x + m01 * v.y, m10 * v.x + m11 * v.y};
    }
    Mat2 operator*(const Mat2& o) const {
        return {m00 * o.m00 + m01 * o.m10, m00 * o.m01 + m01 * o.m11,
                m10 * o.m00 + m11 * o.m10, m10 * o.m01 + m11 * o.m11};
    }
    Mat2 transpose() const { return {m00, m10, m01, m11}; }
    double det() const { return m00 * m11 - m01 * m10; }
};

/// Axis-aligned rectangle, inclusive of x0/y0, exclusive of x1/y1 when used
/// over pixel grids.
struct Rect {
    double x0 = 0.0, y0 = 0.0, x1 = 0.0, y1 = 0.0;

    static Rect of_size(double w, double h) { return {0.0, 0.0, w, h}; }

    double width() const { return x1 - x0; }
    double height() const { return y1 - y0; }
    Vec2 center() const { return {(x0 + x1) * 0.5, (y0 + y1) * 0.5}; }
    bool contains(const Vec2& p) const {
        return p.x >= x0 && p.x < x1 && p.y >= y0 && p.y < y1;
    }
    /// Euclidean distance from p to the rectangle (0 when inside).
    double distance(const Vec2& p) const {
        const double dx = std::max({x0 - p.x, 0.0, p.x - x1});
        const double dy = std::max({y0 - p.y, 0.0, p.y - y1});
        return std::hypot(dx, dy);
    }
    Rect expanded(double margin) const {
        return {x0 - margin, y0 - margin, x1 + margin, y1 + margin};
    }
};

/// exp() with the argument capped so chained uncertainty arithmetic stays
/// finite even for nodes hundreds of pixels from the nearest inlier.
inline double bounded_exp(double arg) {
    constexpr double kMaxArg = 55.0;  // exp(55) ~ 7.7e23
    return std::exp(std::min(arg, kMaxArg));
}

/// Result of a 2x2 singular value decomposition: m = u * diag(s1, s2) * v^T
/// with s1 >= s2 >= 0 and u, v orthogonal.
struct Svd2 {
    Mat2 u;
    Mat2 v;
    double s1 = 0.0;
    double s2 = 0.0;
};

/// Closed-form SVD of a 2x2 matrix via the eigen decomposition of m^T m.
inline Svd2 svd2(const Mat2& m) {
    // m^T m = [a b; b c], symmetric positive semi-definite.
    const double a = m.m00 * m.m00 + m.m10 * m.m10;
    const double b = m.m00 * m.m01 + m.m10 * m.m11;
    const double c = m.m01 * m.m01 + m.m11 * m.m11;

    const double theta = 0.5 * std::atan2(2.0 * b, a - c);
    const Mat2 v = Mat2::rotation(theta);

    const double half_tr = 0.5 * (a + c);
    const double root = std::sqrt(std::max(0.0, 0.25 * (a - c) * (a - c) + b * b));
    Svd2 out;
    out.v = v;
    out.s1 = std::sqrt(std::max(0.0, half_tr + root));
    out.s2 = std::sqrt(std::max(0.0, half_tr - root));

    // Columns of u are m * v_i / s_i; fall back to an orthonormal basis when
    // a singular value vanishes.
    const Vec2 v1{v.m00, v.m10}, v2{v.m01, v.m11};
    Vec2 u1 = m * v1, u2 = m * v2;
    const double eps = 1e-300;
    if (out.s1 > eps) u1 = u1 / out.s1; else u1 = {1.0, 0.0};
    if (out.s2 > eps) u2 = u2 / out.s2; else u2 = {-u1.y, u1.x};
    out.u = {u1.x, u2.x, u1.y, u2.y};
    return out;
}

/// 2D similarity transform y = scale * R(angle) * x + t.
struct Similarity2 {
    double scale = 1.0;
    double angle = 0.0;
    Vec2 t{0.0, 0.0};

    Vec2 apply(const Vec2& p) const {
        return scale * (Mat2::rotation(angle) * p) + t;
    }
};

/// Weighted least-squares similarity fit between point sets. Solves the
/// complex linear regression b ~ c*a + d, which is exact for the
/// scale+rotation+translation model. Returns nullopt when the source points
/// are (nearly) coincident.
inline std::optional<Similarity2> fit_similarity(std::span<const Vec2> src,
                                                 std::span<const Vec2> dst,
                                                 std::span<const double> weights = {}) {
    const std::size_t n = src.size();
    if (n < 2 || dst.size() != n) return std::nullopt;

    double wsum = 0.0;
    Vec2 ca{0, 0}, cb{0, 0};
    for (std::size_t i = 0; i < n; ++i) {
        const double w = weights.empty() ? 1.0 : weights[i];
        wsum += w;
        ca += w * src[i];
        cb += w * dst[i];
    }
    if (wsum <= 0.0) return std::nullopt;
    ca = ca / wsum;
    cb = cb / wsum;

    double denom = 0.0, re = 0.0, im = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double w = weights.empty() ? 1.0 : weights[i];
        const Vec2 pa = src[i] - ca;
        const Vec2 pb = dst[i] - cb;
        denom += w * pa.norm2();
        re += w * pb.dot(pa);
        im += w * pa.cross(pb);
    }
    if (denom < 1e-12) return std::nullopt;

    const double cr = re / denom, ci = im / denom;
    Similarity2 s;
    s.scale = std::hypot(cr, ci);
    if (s.scale < 1e-12) return std::nullopt;
    s.angle = std::atan2(ci, cr);
    s.t = cb - s.scale * (Mat2::rotation(s.angle) * ca);
    return s;
}

inline Rect polygon_bbox(std::span<const Vec2> poly) {
    Rect r{std::numeric_limits<double>::max(), std::numeric_limits<double>::max(),
           std::numeric_limits<double>::lowest(), std::numeric_limits<double>::lowest()};
    for (const auto& p : poly) {
        r.x0 = std::min(r.x0, p.x);
        r.y0 = std::min(r.y0, p.y);
        r.x1 = std::max(r.x1, p.x);
        r.y1 = std::max(r.y1, p.y);
    }
    return r;
}

inline bool point_in_polygon(std::span<const Vec2> poly, const Vec2& p) {
    bool inside = false;
    const std::size_t n = poly.size();
    for (std::size_t i = 0, j = n - 1; i < n; j = i++) {
        const Vec2& a = poly[i];
        const Vec2& b = poly[j];
        if ((a.y > p.y) != (b.y > p.y) &&
            p.x < (b.x - a.x) * (p.y - a.y) / (b.y - a.y) + a.x)
            inside = !inside;
    }
    return inside;
}

/// Distance from p to the polygon boundary edges (0 when p lies inside).
inline double polygon_distance(std::span<const Vec2> poly, const Vec2& p) {
    if (point_in_polygon(poly, p)) return 0.0;
    double best = std::numeric_limits<double>::max();
    const std::size_t n = poly.size();
    for (std::size_t i = 0, j = n - 1; i < n; j = i++) {
        const Vec2 a = poly[j], b = poly[i];
        const Vec2 ab = b - a;
        const double len2 = ab.norm2();
        double t = len2 > 0.0 ? (p - a).dot(ab) / len2 : 0.0;
        t = std::clamp(t, 0.0, 1.0);
        best = std::min(best, dist2(p, a + t * ab));
    }
    return std::sqrt(best);
}

/// True when every point lies within `tol` of a single line.
inline bool points_collinear(std::span<const Vec2> pts, double tol) {
    if (pts.size() < 3) return true;
    Vec2 mean{0, 0};
    for (const auto& p : pts) mean += p;
    mean = mean / static_cast<double>(pts.size());
    double xx = 0, xy = 0, yy = 0;
    for (const auto& p : pts) {
        const Vec2 d = p - mean;
        xx += d.x * d.x;
        xy += d.x * d.y;
        yy += d.y * d.y;
    }
    // Smaller eigenvalue of the scatter matrix = squared thickness * n.
    const double half_tr = 0.5 * (xx + yy);
    const double root = std::sqrt(std::max(0.0, 0.25 * (xx - yy) * (xx - yy) + xy * xy));
    const double lam_min = std::max(0.0, half_tr - root);
    return std::sqrt(lam_min / static_cast<double>(pts.size())) < tol;
}

}  // namespace nrmosaic
