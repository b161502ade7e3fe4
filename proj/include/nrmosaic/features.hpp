#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "nrmosaic/geometry.hpp"
#include "nrmosaic/image.hpp"
#include "nrmosaic/parallel.hpp"

namespace nrmosaic {

struct Keypoint {
    Vec2 position;
    double response = 0.0;
};

struct MatchPair {
    Vec2 point_a;
    Vec2 point_b;
    double score = 0.0;  // descriptor similarity in [0,1]
};

struct DetectorConfig {
    int max_features = 800;
    double quality_level = 0.005;  // fraction of max corner response
    int nms_radius = 4;
    double ratio_test = 0.8;      // nearest / second-nearest descriptor distance
    int workers = 1;
};

/// Keypoints plus their descriptors, row i of `descriptors` matching
/// keypoints[i]. Descriptors are mean-free, L2-normalized 8x8 intensity
/// patches (single scale, no orientation).
struct FrameFeatures {
    static constexpr int kDescriptorDim = 64;
    std::vector<Keypoint> keypoints;
    std::vector<float> descriptors;

    const float* descriptor(std::size_t i) const {
        return descriptors.data() + i * kDescriptorDim;
    }
    std::size_t size() const { return keypoints.size(); }
};

namespace detail {

constexpr int kPatchRadius = 8;   // 16x16 intensity patch
constexpr int kBorderMargin = kPatchRadius + 2;

/// Min-eigenvalue corner response of the 5x5-box-smoothed structure tensor.
inline ImageF corner_response(const ImageF& gray, int workers) {
    const int w = gray.width, h = gray.height;
    ImageF ix = ImageF::make(w, h), iy = ImageF::make(w, h);
    parallel_for(static_cast<std::size_t>(h), workers, [&](std::size_t r0, std::size_t r1) {
        for (std::size_t y = r0; y < r1; ++y) {
            if (y == 0 || y + 1 >= static_cast<std::size_t>(h)) continue;
            for (int x = 1; x + 1 < w; ++x) {
                const int yi = static_cast<int>(y);
                // Sobel
                ix.at(x, yi) = (gray.at(x + 1, yi - 1) - gray.at(x - 1, yi - 1)) +
                               2.f * (gray.at(x + 1, yi) - gray.at(x - 1, yi)) +
                               (gray.at(x + 1, yi + 1) - gray.at(x - 1, yi + 1));
                iy.at(x, yi) = (gray.at(x - 1, yi + 1) - gray.at(x - 1, yi - 1)) +
                               2.f * (gray.at(x, yi + 1) - gray.at(x, yi - 1)) +
                               (gray.at(x + 1, yi + 1) - gray.at(x + 1, yi - 1));
            }
        }
    });

    // Box-summed tensor components over a 5x5 window via row integrals.
    ImageF resp = ImageF::make(w, h);
    constexpr int kSum = 2;
    parallel_for(static_cast<std::size_t>(h), workers, [&](std::size_t r0, std::size_t r1) {
        for (std::size_t yy = r0; yy < r1; ++yy) {
            const int y = static_cast<int>(yy);
            if (y < kSum + 1 || y >= h - kSum - 1) continue;
            for (int x = kSum + 1; x < w - kSum - 1; ++x) {
                float sxx = 0.f, syy = 0.f, sxy = 0.f;
                for (int dy = -kSum; dy <= kSum; ++dy)
                    for (int dx = -kSum; dx <= kSum; ++dx) {
                        const float gx = ix.at(x + dx, y + dy);
                        const float gy = iy.at(x + dx, y + dy);
                        sxx += gx * gx;
                        syy += gy * gy;
                        sxy += gx * gy;
                    }
                const float tr = 0.5f * (sxx + syy);
                const float det = std::sqrt(std::max(0.f, 0.25f * (sxx - syy) * (sxx - syy) + sxy * sxy));
                resp.at(x, y) = tr - det;  // min eigenvalue
            }
        }
    });
    return resp;
}

inline double subpixel_offset(float rm, float r0, float rp) {
    const double denom = static_cast<double>(rm) - 2.0 * r0 + rp;
    if (std::abs(denom) < 1e-20) return 0.0;
    const double off = 0.5 * (static_cast<double>(rm) - rp) / denom;
    return std::clamp(off, -0.5, 0.5);
}

inline void fill_descriptor(const ImageF& gray, int cx, int cy, float* out) {
    // 16x16 patch averaged to 8x8, mean-subtracted, L2-normalized.
    float patch[FrameFeatures::kDescriptorDim];
    float mean = 0.f;
    for (int by = 0; by < 8; ++by)
        for (int bx = 0; bx < 8; ++bx) {
            const int px = cx - kPatchRadius + 2 * bx;
            const int py = cy - kPatchRadius + 2 * by;
            const float v = 0.25f * (gray.at(px, py) + gray.at(px + 1, py) +
                                     gray.at(px, py + 1) + gray.at(px + 1, py + 1));
            patch[by * 8 + bx] = v;
            mean += v;
        }
    mean /= FrameFeatures::kDescriptorDim;
    float norm2 = 0.f;
    for (float& v : patch) {
        v -= mean;
        norm2 += v * v;
    }
    const float norm = std::sqrt(norm2);
    if (norm > 1e-12f)
        for (int i = 0; i < FrameFeatures::kDescriptorDim; ++i) out[i] = patch[i] / norm;
    else
        std::fill(out, out + FrameFeatures::kDescriptorDim, 0.f);
}

}  // namespace detail

/// Single-scale corner detection (no image pyramid) with subpixel refinement.
/// Deterministic for fixed input and config.
inline FrameFeatures detect_features(const ImageF& gray, const DetectorConfig& cfg) {
    FrameFeatures out;
    const int w = gray.width, h = gray.height;
    const int margin = detail::kBorderMargin;
    if (w < 2 * margin + 1 || h < 2 * margin + 1) return out;  // too small: no features

    const ImageF resp = detail::corner_response(gray, cfg.workers);

    float max_resp = 0.f;
    for (float v : resp.data) max_resp = std::max(max_resp, v);
    const float threshold = static_cast<float>(cfg.quality_level) * max_resp;
    if (max_resp <= 0.f) return out;

    // Non-maximum suppression; ties resolved toward the earliest raster index.
    const int r = cfg.nms_radius;
    std::vector<std::vector<Keypoint>> rows(h);
    parallel_for(static_cast<std::size_t>(h), cfg.workers, [&](std::size_t r0, std::size_t r1) {
        for (std::size_t yy = r0; yy < r1; ++yy) {
            const int y = static_cast<int>(yy);
            if (y < margin || y >= h - margin) continue;
            for (int x = margin; x < w - margin; ++x) {
                const float v = resp.at(x, y);
                if (v <= threshold) continue;
                bool is_max = true;
                for (int dy = -r; dy <= r && is_max; ++dy)
                    for (int dx = -r; dx <= r; ++dx) {
                        if (dx == 0 && dy == 0) continue;
                        const float n = resp.at(x + dx, y + dy);
                        const bool earlier = dy < 0 || (dy == 0 && dx < 0);
                        if (n > v || (n == v && earlier)) {
                            is_max = false;
                            break;
                        }
                    }
                if (!is_max) continue;
                Keypoint kp;
                kp.position = {x + detail::subpixel_offset(resp.at(x - 1, y), v, resp.at(x + 1, y)),
                               y + detail::subpixel_offset(resp.at(x, y - 1), v, resp.at(x, y + 1))};
                kp.response = v;
                rows[y].push_back(kp);
            }
        }
    });
    for (auto& row : rows)
        out.keypoints.insert(out.keypoints.end(), row.begin(), row.end());

    std::stable_sort(out.keypoints.begin(), out.keypoints.end(),
                     [](const Keypoint& a, const Keypoint& b) {
                         if (a.response != b.response) return a.response > b.response;
                         if (a.position.y != b.position.y) return a.position.y < b.position.y;
                         return a.position.x < b.position.x;
                     });
    if (static_cast<int>(out.keypoints.size()) > cfg.max_features)
        out.keypoints.resize(cfg.max_features);

    out.descriptors.resize(out.keypoints.size() * FrameFeatures::kDescriptorDim);
    parallel_for(out.keypoints.size(), cfg.workers, [&](std::size_t i0, std::size_t i1) {
        for (std::size_t i = i0; i < i1; ++i) {
            const Vec2 p = out.keypoints[i].position;
            detail::fill_descriptor(gray, static_cast<int>(std::lround(p.x)),
                                    static_cast<int>(std::lround(p.y)),
                                    &out.descriptors[i * FrameFeatures::kDescriptorDim]);
        }
    });
    return out;
}

/// Nearest/second-nearest ratio-test matching from a to b.
inline std::vector<MatchPair> match_features(const FrameFeatures& a, const FrameFeatures& b,
                                             double ratio, int workers) {
    std::vector<MatchPair> out;
    if (a.size() == 0 || b.size() < 2) return out;
    constexpr int dim = FrameFeatures::kDescriptorDim;
    const double ratio_sq = ratio * ratio;

    std::vector<int> best(a.size(), -1);
    std::vector<double> score(a.size(), 0.0);
    parallel_for(a.size(), workers, [&](std::size_t i0, std::size_t i1) {
        for (std::size_t i = i0; i < i1; ++i) {
            const float* da = a.descriptor(i);
            float d1 = std::numeric_limits<float>::max();
            float d2 = std::numeric_limits<float>::max();
            int j1 = -1;
            for (std::size_t j = 0; j < b.size(); ++j) {
                const float* db = b.descriptor(j);
                float ssd = 0.f;
                for (int k = 0; k < dim; k += 8) {
                    for (int u = 0; u < 8; ++u) {
                        const float d = da[k + u] - db[k + u];
                        ssd += d * d;
                    }
                    if (ssd > d2) break;
                }
                if (ssd < d1) {
                    d2 = d1;
                    d1 = ssd;
                    j1 = static_cast<int>(j);
                } else if (ssd < d2) {
                    d2 = ssd;
                }
            }
            if (j1 >= 0 && static_cast<double>(d1) < ratio_sq * static_cast<double>(d2)) {
                best[i] = j1;
                score[i] = 1.0 - std::sqrt(static_cast<double>(d1) /
                                           std::max(static_cast<double>(d2), 1e-30));
            }
        }
    }, 16);

    for (std::size_t i = 0; i < a.size(); ++i) {
        if (best[i] < 0) continue;
        out.push_back({a.keypoints[i].position, b.keypoints[best[i]].position, score[i]});
    }
    return out;
}

/// Detects in both images and matches a -> b. Candidate matches may contain
/// mismatches; the field estimator removes them downstream.
inline std::vector<MatchPair> detect_and_match(const ImageU8& image_a, const ImageU8& image_b,
                                               const DetectorConfig& cfg) {
    if (image_a.channels != image_b.channels)
        throw std::invalid_argument("detect_and_match: mismatched channel layouts");
    const FrameFeatures fa = detect_features(to_gray(image_a), cfg);
    const FrameFeatures fb = detect_features(to_gray(image_b), cfg);
    return match_features(fa, fb, cfg.ratio_test, cfg.workers);
}

// ---------------------------------------------------------------------------
// Match files: one match per line, "ax ay bx by score", '#' comments.
// Coordinates round-trip at full double precision.
// ---------------------------------------------------------------------------

inline void save_matches(const std::string& path, const std::vector<MatchPair>& matches) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write " + path);
    out << "# ax ay bx by score\n";
    char buf[192];
    for (const auto& m : matches) {
        std::snprintf(buf, sizeof buf, "%.17g %.17g %.17g %.17g %.17g\n",
                      m.point_a.x, m.point_a.y, m.point_b.x, m.point_b.y, m.score);
        out << buf;
    }
}

inline std::vector<MatchPair> load_matches(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open " + path);
    std::vector<MatchPair> out;
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        std::size_t i = line.find_first_not_of(" \t\r");
        if (i == std::string::npos || line[i] == '#') continue;
        MatchPair m;
        std::istringstream ss(line);
        double extra;
        if (!(ss >> m.point_a.x >> m.point_a.y >> m.point_b.x >> m.point_b.y >> m.score) ||
            (ss >> extra)) {
            throw std::runtime_error(path + ":" + std::to_string(lineno) +
                                     ": expected 5 fields 'ax ay bx by score'");
        }
        out.push_back(m);
    }
    return out;
}

}  // namespace nrmosaic
