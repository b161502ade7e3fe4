#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "nrmosaic/dualquat.hpp"
#include "nrmosaic/geometry.hpp"
#include "nrmosaic/image.hpp"
#include "nrmosaic/parallel.hpp"

namespace nrmosaic {

constexpr double kPixelWeightCutoff = 1e-6;

/// Interpolates node warps at a reference-frame (time-0) coordinate:
/// Gaussian anchor-distance weights, scalar scale mean, hemispherized dual
/// quaternion sum. Returns nullopt when no node carries weight above the
/// cutoff.
inline std::optional<WarpFunction> pixel_warp(const Vec2& x_ref,
                                              std::span<const Vec2> anchors,
                                              std::span<const WarpFunction> warps,
                                              double alpha) {
    double wsum = 0.0;
    double acc_w = 0.0, acc_z = 0.0, acc_dx = 0.0, acc_dy = 0.0, acc_s = 0.0;
    double ref_w = 0.0, ref_z = 0.0;
    bool have_ref = false;
    for (std::size_t i = 0; i < anchors.size(); ++i) {
        const double w = std::exp(-alpha * dist2(anchors[i], x_ref));
        if (w <= kPixelWeightCutoff) continue;
        DualQuat2 q = warps[i].dq;
        if (!have_ref) {
            ref_w = q.w;
            ref_z = q.z;
            have_ref = true;
        } else if (q.w * ref_w + q.z * ref_z < 0.0) {
            q = q.negated();
        }
        acc_w += w * q.w;
        acc_z += w * q.z;
        acc_dx += w * q.dx;
        acc_dy += w * q.dy;
        acc_s += w * warps[i].scale;
        wsum += w;
    }
    if (!have_ref) return std::nullopt;
    const DualQuat2 mean{acc_w / wsum, acc_z / wsum, acc_dx / wsum, acc_dy / wsum};
    return WarpFunction{acc_s / wsum, mean.normalized()};
}

/// Preimage of the frame boundary under the node-interpolated warp field:
/// for samples along the frame edges (frame-t coordinates), solves
/// pixel_warp(x0)(x0) = y by fixed-point iteration seeded from the nearest
/// node correspondence. Returns the warped boundary polygon in reference
/// coordinates.
inline std::vector<Vec2> invert_frame_boundary(int frame_w, int frame_h,
                                               std::span<const Vec2> anchors,
                                               std::span<const WarpFunction> warps,
                                               double alpha, double step = 8.0) {
    std::vector<Vec2> samples;
    const double w1 = frame_w - 1.0, h1 = frame_h - 1.0;
    for (double x = 0; x < w1; x += step) samples.push_back({x, 0});
    for (double y = 0; y < h1; y += step) samples.push_back({w1, y});
    for (double x = w1; x > 0; x -= step) samples.push_back({x, h1});
    for (double y = h1; y > 0; y -= step) samples.push_back({0, y});

    std::vector<Vec2> positions(anchors.size());
    for (std::size_t i = 0; i < anchors.size(); ++i) positions[i] = warps[i].apply(anchors[i]);

    std::vector<Vec2> poly;
    poly.reserve(samples.size());
    for (const Vec2& y : samples) {
        std::size_t nearest = 0;
        double best = std::numeric_limits<double>::max();
        for (std::size_t i = 0; i < positions.size(); ++i) {
            const double d2 = dist2(positions[i], y);
            if (d2 < best) {
                best = d2;
                nearest = i;
            }
        }
        Vec2 x0 = anchors.empty() ? y : anchors[nearest] + (y - positions[nearest]);
        for (int it = 0; it < 15; ++it) {
            const auto w = pixel_warp(x0, anchors, warps, alpha);
            if (!w) break;
            const Vec2 next = w->unapply(y);
            const double move = dist(next, x0);
            x0 = next;
            if (move < 1e-7) break;
        }
        poly.push_back(x0);
    }
    return poly;
}

/// Growing mosaic: per-pixel color accumulator with a capped integer merge
/// weight. Growth happens in whole tiles and never alters existing pixels.
class Canvas {
public:
    static constexpr int kWeightCap = 30;
    static constexpr int kTile = 256;

    bool empty() const { return width_ == 0; }
    int width() const { return width_; }
    int height() const { return height_; }
    /// Reference-frame coordinate of canvas pixel (0, 0).
    Vec2 origin_offset() const { return origin_; }

    double* color(int x, int y) { return &color_[(static_cast<std::size_t>(y) * width_ + x) * 3]; }
    const double* color(int x, int y) const {
        return &color_[(static_cast<std::size_t>(y) * width_ + x) * 3];
    }
    std::uint8_t weight(int x, int y) const {
        return weight_[static_cast<std::size_t>(y) * width_ + x];
    }
    std::uint8_t& weight_ref(int x, int y) {
        return weight_[static_cast<std::size_t>(y) * width_ + x];
    }
    bool occupied(int x, int y) const { return weight(x, y) > 0; }

    std::int64_t occupied_count() const {
        std::int64_t n = 0;
        for (auto w : weight_) n += w > 0;
        return n;
    }

    /// Grows the canvas (tile-aligned) so that the reference-frame rectangle
    /// fits. Existing pixel values are preserved bit for bit.
    void ensure_contains(const Rect& ref_rect) {
        const long needed_x0 = static_cast<long>(std::floor(ref_rect.x0));
        const long needed_y0 = static_cast<long>(std::floor(ref_rect.y0));
        const long needed_x1 = static_cast<long>(std::ceil(ref_rect.x1)) + 1;
        const long needed_y1 = static_cast<long>(std::ceil(ref_rect.y1)) + 1;

        if (!empty() && needed_x0 >= origin_x_ && needed_y0 >= origin_y_ &&
            needed_x1 <= origin_x_ + width_ && needed_y1 <= origin_y_ + height_)
            return;

        auto align_down = [](long v) { return v >= 0 ? (v / kTile) * kTile : ((v - kTile + 1) / kTile) * kTile; };
        long nx0 = align_down(needed_x0), ny0 = align_down(needed_y0);
        long nx1 = needed_x1, ny1 = needed_y1;
        if (!empty()) {
            nx0 = std::min(nx0, origin_x_);
            ny0 = std::min(ny0, origin_y_);
            nx1 = std::max(nx1, origin_x_ + width_);
            ny1 = std::max(ny1, origin_y_ + height_);
        }
        const int nw = static_cast<int>(((nx1 - nx0 + kTile - 1) / kTile) * kTile);
        const int nh = static_cast<int>(((ny1 - ny0 + kTile - 1) / kTile) * kTile);

        std::vector<double> ncolor(static_cast<std::size_t>(nw) * nh * 3, 0.0);
        std::vector<std::uint8_t> nweight(static_cast<std::size_t>(nw) * nh, 0);
        if (!empty()) {
            const int ox = static_cast<int>(origin_x_ - nx0);
            const int oy = static_cast<int>(origin_y_ - ny0);
            for (int y = 0; y < height_; ++y) {
                std::copy_n(&color_[static_cast<std::size_t>(y) * width_ * 3],
                            static_cast<std::size_t>(width_) * 3,
                            &ncolor[(static_cast<std::size_t>(y + oy) * nw + ox) * 3]);
                std::copy_n(&weight_[static_cast<std::size_t>(y) * width_],
                            static_cast<std::size_t>(width_),
                            &nweight[static_cast<std::size_t>(y + oy) * nw + ox]);
            }
        }
        color_ = std::move(ncolor);
        weight_ = std::move(nweight);
        origin_x_ = nx0;
        origin_y_ = ny0;
        width_ = nw;
        height_ = nh;
        origin_ = {static_cast<double>(nx0), static_cast<double>(ny0)};
    }

private:
    Vec2 origin_{0, 0};
    long origin_x_ = 0, origin_y_ = 0;
    int width_ = 0, height_ = 0;
    std::vector<double> color_;        // rgb in [0,1], 3 per pixel
    std::vector<std::uint8_t> weight_; // capped at kWeightCap
};

struct BlendStats {
    std::int64_t footprint_pixels = 0;
    std::int64_t blended_pixels = 0;
    std::int64_t skipped_no_support = 0;
    std::int64_t skipped_out_of_frame = 0;
};

/// Blends one frame into the canvas. Iterates canvas pixels inside the
/// warped-boundary footprint, maps each through the interpolated warp into
/// frame-t coordinates, bilinearly samples the frame and applies the capped
/// running average. Disjoint row chunks per worker; bitwise identical for
/// any worker count.
inline BlendStats blend_frame(Canvas& canvas, const ImageU8& frame,
                              std::span<const Vec2> anchors,
                              std::span<const WarpFunction> warps, double alpha,
                              std::span<const Vec2> footprint_polygon, int workers) {
    BlendStats stats;
    if (frame.empty() || footprint_polygon.size() < 3) return stats;

    const Rect bbox = polygon_bbox(footprint_polygon).expanded(4.0);
    canvas.ensure_contains(bbox);

    const Vec2 org = canvas.origin_offset();
    const int px0 = static_cast<int>(std::floor(bbox.x0 - org.x));
    const int py0 = static_cast<int>(std::floor(bbox.y0 - org.y));
    const int px1 = static_cast<int>(std::ceil(bbox.x1 - org.x));
    const int py1 = static_cast<int>(std::ceil(bbox.y1 - org.y));
    const int bw = px1 - px0 + 1, bh = py1 - py0 + 1;
    if (bw <= 0 || bh <= 0) return stats;
    stats.footprint_pixels = static_cast<std::int64_t>(bw) * bh;

    // Per-tile-column node subsets: a node can touch a pixel only when the
    // kernel at the closest point of the tile clears the weight cutoff.
    const double max_d2 = -std::log(kPixelWeightCutoff) / alpha;
    const double max_d = std::sqrt(max_d2);
    const int ntx = (bw + Canvas::kTile - 1) / Canvas::kTile;
    std::vector<std::vector<int>> tile_nodes(ntx);
    for (int tx = 0; tx < ntx; ++tx) {
        const Rect tile{org.x + px0 + tx * Canvas::kTile, org.y + py0,
                        org.x + px0 + std::min(bw, (tx + 1) * Canvas::kTile), org.y + py1 + 1.0};
        for (std::size_t i = 0; i < anchors.size(); ++i)
            if (tile.distance(anchors[i]) <= max_d) tile_nodes[tx].push_back(static_cast<int>(i));
    }

    const double fx_max = frame.width - 1.0, fy_max = frame.height - 1.0;
    const std::size_t grain = 8;  // rows per chunk
    const std::size_t nchunks = chunk_count(static_cast<std::size_t>(bh), grain);
    std::vector<BlendStats> partial(nchunks);

    parallel_for_chunks(static_cast<std::size_t>(bh), grain, workers,
                        [&](std::size_t chunk, std::size_t r0, std::size_t r1) {
        BlendStats local;
        for (std::size_t ry = r0; ry < r1; ++ry) {
            const int cy = py0 + static_cast<int>(ry);
            const double ref_y = org.y + cy;
            for (int tx = 0; tx < ntx; ++tx) {
                const auto& nodes = tile_nodes[tx];
                const int cx_end = px0 + std::min(bw, (tx + 1) * Canvas::kTile);
                for (int cx = px0 + tx * Canvas::kTile; cx < cx_end; ++cx) {
                    const Vec2 x_ref{org.x + cx, ref_y};
                    // Inline Gaussian blend over the tile's node subset.
                    double wsum = 0, aw = 0, az = 0, adx = 0, ady = 0, as = 0;
                    double ref_w = 0, ref_z = 0;
                    bool have_ref = false;
                    for (int ni : nodes) {
                        const double w = std::exp(-alpha * dist2(anchors[ni], x_ref));
                        if (w <= kPixelWeightCutoff) continue;
                        DualQuat2 q = warps[ni].dq;
                        if (!have_ref) {
                            ref_w = q.w;
                            ref_z = q.z;
                            have_ref = true;
                        } else if (q.w * ref_w + q.z * ref_z < 0.0) {
                            q = q.negated();
                        }
                        aw += w * q.w; az += w * q.z;
                        adx += w * q.dx; ady += w * q.dy;
                        as += w * warps[ni].scale;
                        wsum += w;
                    }
                    if (!have_ref) {
                        ++local.skipped_no_support;
                        continue;
                    }
                    const DualQuat2 mean{aw / wsum, az / wsum, adx / wsum, ady / wsum};
                    const WarpFunction wp{as / wsum, mean.normalized()};
                    const Vec2 y = wp.apply(x_ref);
                    if (!(y.x >= 0.0 && y.x <= fx_max && y.y >= 0.0 && y.y <= fy_max)) {
                        ++local.skipped_out_of_frame;
                        continue;
                    }
                    const auto rgb = sample_bilinear_rgb(frame, y.x, y.y);
                    double* c = canvas.color(cx, cy);
                    std::uint8_t& wgt = canvas.weight_ref(cx, cy);
                    const double wd = wgt;
                    c[0] = (wd * c[0] + rgb[0] / 255.0) / (wd + 1.0);
                    c[1] = (wd * c[1] + rgb[1] / 255.0) / (wd + 1.0);
                    c[2] = (wd * c[2] + rgb[2] / 255.0) / (wd + 1.0);
                    if (wgt < Canvas::kWeightCap) ++wgt;
                    ++local.blended_pixels;
                }
            }
        }
        partial[chunk] = local;
    });

    for (const auto& p : partial) {
        stats.blended_pixels += p.blended_pixels;
        stats.skipped_no_support += p.skipped_no_support;
        stats.skipped_out_of_frame += p.skipped_out_of_frame;
    }
    return stats;
}

/// Renders the canvas to an RGBA raster (alpha = validity). With crop, the
/// output is the bounding box of occupied pixels and its reference-frame
/// origin is written to crop_origin.
inline ImageU8 render(const Canvas& canvas, bool crop = false, Vec2* crop_origin = nullptr) {
    if (crop_origin) *crop_origin = canvas.origin_offset();
    if (canvas.empty()) return ImageU8{};

    int x0 = 0, y0 = 0, x1 = canvas.width() - 1, y1 = canvas.height() - 1;
    if (crop) {
        x0 = canvas.width(); y0 = canvas.height(); x1 = -1; y1 = -1;
        for (int y = 0; y < canvas.height(); ++y)
            for (int x = 0; x < canvas.width(); ++x)
                if (canvas.occupied(x, y)) {
                    x0 = std::min(x0, x); y0 = std::min(y0, y);
                    x1 = std::max(x1, x); y1 = std::max(y1, y);
                }
        if (x1 < x0) return ImageU8{};  // nothing occupied
        if (crop_origin)
            *crop_origin = canvas.origin_offset() + Vec2{static_cast<double>(x0), static_cast<double>(y0)};
    }

    ImageU8 out = ImageU8::make(x1 - x0 + 1, y1 - y0 + 1, 4);
    for (int y = y0; y <= y1; ++y)
        for (int x = x0; x <= x1; ++x) {
            std::uint8_t* px = &out.at(x - x0, y - y0, 0);
            if (canvas.occupied(x, y)) {
                const double* c = canvas.color(x, y);
                for (int k = 0; k < 3; ++k)
                    px[k] = static_cast<std::uint8_t>(std::lround(std::clamp(c[k], 0.0, 1.0) * 255.0));
                px[3] = 255;
            }
        }
    return out;
}

}  // namespace nrmosaic
