#pragma once

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "nrmosaic/geometry.hpp"
#include "nrmosaic/image.hpp"
#include "nrmosaic/parallel.hpp"

namespace nrmosaic {

/// Scene knobs exposed through the scene config file. Everything else is
/// derived deterministically from the seed.
struct SceneSpec {
    int width = 480;
    int height = 270;
    int frames = 200;
    std::uint64_t seed = 7;
    int num_bumps = 6;
    double max_displacement = 15.0;  // peak per-bump displacement, px
    double bump_radius = 80.0;
    std::string path = "scan";  // "scan" or "outback"
    double path_extent = 240.0; // px of camera travel

    void save(const std::string& file) const {
        std::ofstream out(file);
        if (!out) throw std::runtime_error("cannot write " + file);
        char buf[64];
        auto num = [&buf](double v) {
            std::snprintf(buf, sizeof buf, "%.17g", v);
            return std::string(buf);
        };
        out << "width = " << width << "\n"
            << "height = " << height << "\n"
            << "frames = " << frames << "\n"
            << "seed = " << seed << "\n"
            << "num_bumps = " << num_bumps << "\n"
            << "max_displacement = " << num(max_displacement) << "\n"
            << "bump_radius = " << num(bump_radius) << "\n"
            << "path = " << path << "\n"
            << "path_extent = " << num(path_extent) << "\n";
    }

    static SceneSpec load(const std::string& file) {
        std::ifstream in(file);
        if (!in) throw std::runtime_error("cannot open " + file);
        SceneSpec spec;
        std::string line;
        int lineno = 0;
        while (std::getline(in, line)) {
            ++lineno;
            const auto first = line.find_first_not_of(" \t\r");
            if (first == std::string::npos || line[first] == '#') continue;
            const auto eq = line.find('=');
            if (eq == std::string::npos)
                throw std::runtime_error(file + ":" + std::to_string(lineno) + ": expected key = value");
            auto trim = [](std::string s) {
                const auto b = s.find_first_not_of(" \t\r");
                const auto e = s.find_last_not_of(" \t\r");
                return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
            };
            const std::string key = trim(line.substr(0, eq));
            const std::string value = trim(line.substr(eq + 1));
            if (key == "width") spec.width = std::stoi(value);
            else if (key == "height") spec.height = std::stoi(value);
            else if (key == "frames") spec.frames = std::stoi(value);
            else if (key == "seed") spec.seed = std::stoull(value);
            else if (key == "num_bumps") spec.num_bumps = std::stoi(value);
            else if (key == "max_displacement") spec.max_displacement = std::stod(value);
            else if (key == "bump_radius") spec.bump_radius = std::stod(value);
            else if (key == "path") spec.path = value;
            else if (key == "path_extent") spec.path_extent = std::stod(value);
            else throw std::runtime_error(file + ":" + std::to_string(lineno) + ": unknown key '" + key + "'");
        }
        return spec;
    }
};

struct GaussianBump {
    Vec2 center;      // texture coordinates
    double radius = 80.0;
    Vec2 direction;   // unit displacement direction
    double amplitude = 0.0;
    double omega = 0.0;  // rad per frame, zero phase so t = 0 is undeformed
};

/// Virtual scan of a textured plane under smooth time-varying deformation.
/// The deformation is a backward sampling map in world (texture-aligned)
/// coordinates: D(x, t) = x + sum_m amp_m sin(omega_m t) g_m(x) dir_m, a
/// diffeomorphism by construction (amplitude bound enforced). D(., 0) is the
/// identity, so frame 0 is an undeformed crop.
class SyntheticScene {
public:
    static SyntheticScene build(const SceneSpec& spec) {
        SyntheticScene scene;
        scene.spec_ = spec;
        if (spec.width < 32 || spec.height < 32 || spec.frames < 1)
            throw std::invalid_argument("SyntheticScene: degenerate spec");

        const double margin = spec.max_displacement + 16.0;
        scene.tex_w_ = static_cast<int>(spec.width + std::abs(spec.path_extent) + 2.0 * margin) + 1;
        scene.tex_h_ = static_cast<int>(spec.height + 2.0 * margin) + 1;
        scene.cam_base_ = {margin + std::max(0.0, -spec.path_extent), margin};

        std::mt19937_64 rng(spec.seed);
        auto uni = [&rng](double lo, double hi) {
            return std::uniform_real_distribution<double>(lo, hi)(rng);
        };

        scene.texture_ = make_texture(scene.tex_w_, scene.tex_h_, rng);

        double gradient_budget = 0.0;
        for (int m = 0; m < spec.num_bumps; ++m) {
            GaussianBump b;
            b.center = {uni(margin, scene.tex_w_ - margin), uni(margin, scene.tex_h_ - margin)};
            b.radius = spec.bump_radius * uni(0.8, 1.3);
            const double dir_angle = uni(0.0, 6.283185307179586);
            b.direction = {std::cos(dir_angle), std::sin(dir_angle)};
            b.amplitude = spec.max_displacement * uni(0.5, 1.0);
            b.omega = uni(0.015, 0.06);
            gradient_budget += b.amplitude * 0.60653065971263342 / b.radius;  // exp(-1/2)/rho
            scene.bumps_.push_back(b);
        }
        if (gradient_budget >= 0.9)
            throw std::invalid_argument(
                "SyntheticScene: deformation amplitudes violate the diffeomorphism bound");

        // Texture must cover the viewport under every pose and deformation.
        for (int t = 0; t < spec.frames; ++t) {
            const Similarity2 cam = scene.camera(t);
            const Vec2 corners[4] = {{0, 0},
                                     {spec.width - 1.0, 0},
                                     {spec.width - 1.0, spec.height - 1.0},
                                     {0, spec.height - 1.0}};
            for (const Vec2& c : corners) {
                const Vec2 tex = scene.deform(cam.apply(c), t);
                if (tex.x < 1.0 || tex.y < 1.0 || tex.x > scene.tex_w_ - 2.0 ||
                    tex.y > scene.tex_h_ - 2.0)
                    throw std::invalid_argument("SyntheticScene: texture smaller than viewport");
            }
        }
        return scene;
    }

    const SceneSpec& spec() const { return spec_; }
    const ImageU8& texture() const { return texture_; }

    /// Camera mapping frame pixels to world coordinates at time t.
    Similarity2 camera(int t) const {
        Similarity2 cam;
        const double T = std::max(1, spec_.frames - 1);
        double progress;
        if (spec_.path == "outback")
            progress = std::sin(3.14159265358979323846 * t / T);
        else
            progress = t / T;
        cam.t = cam_base_ + Vec2{spec_.path_extent * progress, 0.0};
        return cam;
    }

    /// Backward sampling map: world position -> texture coordinate at time t.
    Vec2 deform(const Vec2& world, int t) const {
        Vec2 out = world;
        for (const auto& b : bumps_) {
            const double g = std::exp(-dist2(world, b.center) / (2.0 * b.radius * b.radius));
            out += (b.amplitude * std::sin(b.omega * t) * g) * b.direction;
        }
        return out;
    }

    /// Inverse of deform(., t) by fixed-point iteration (the bump field is a
    /// contraction by the construction bound).
    Vec2 invert_deform(const Vec2& tex, int t, double tol = 1e-10) const {
        Vec2 x = tex;
        for (int it = 0; it < 80; ++it) {
            const Vec2 next = tex - (deform(x, t) - x);
            if (dist(next, x) < tol) return next;
            x = next;
        }
        return x;
    }

    /// Texture coordinate seen by a frame pixel: the correspondence map entry.
    Vec2 frame_to_world(const Vec2& frame_px, int t) const {
        return deform(camera(t).apply(frame_px), t);
    }

    /// Ground-truth position in frame t of a reference-frame (frame 0) pixel.
    Vec2 true_position(const Vec2& ref_px, int t) const {
        const Vec2 tex = camera(0).apply(ref_px);  // deform(., 0) is identity
        const Vec2 world = invert_deform(tex, t);
        const Similarity2 cam = camera(t);
        const Mat2 rinv = Mat2::rotation(-cam.angle);
        return rinv * ((world - cam.t) / cam.scale);
    }

    ImageU8 render_frame(int t, int workers = 1) const {
        ImageU8 frame = ImageU8::make(spec_.width, spec_.height, 3);
        const Similarity2 cam = camera(t);
        parallel_for(static_cast<std::size_t>(spec_.height), workers,
                     [&](std::size_t y0, std::size_t y1) {
            for (std::size_t y = y0; y < y1; ++y)
                for (int x = 0; x < spec_.width; ++x) {
                    const Vec2 tex = deform(cam.apply({static_cast<double>(x), static_cast<double>(y)}),
                                            t);
                    const auto rgb = sample_bilinear_rgb(texture_, tex.x, tex.y);
                    for (int c = 0; c < 3; ++c)
                        frame.at(x, static_cast<int>(y), c) =
                            static_cast<std::uint8_t>(std::lround(rgb[c]));
                }
        });
        return frame;
    }

    /// Reference composite: the color the mosaic should hold at a
    /// reference-frame coordinate (which may lie outside the frame-0 bounds).
    bool reference_color(const Vec2& ref_px, double rgb[3]) const {
        const Vec2 tex = camera(0).apply(ref_px);
        if (tex.x < 0.0 || tex.y < 0.0 || tex.x > tex_w_ - 1.0 || tex.y > tex_h_ - 1.0)
            return false;
        const auto c = sample_bilinear_rgb(texture_, tex.x, tex.y);
        rgb[0] = c[0] / 255.0;
        rgb[1] = c[1] / 255.0;
        rgb[2] = c[2] / 255.0;
        return true;
    }

private:
    /// Multi-octave value noise plus geometric decals: feature-dense
    /// everywhere, no external imagery.
    static ImageU8 make_texture(int w, int h, std::mt19937_64& rng) {
        auto uni = [&rng](double lo, double hi) {
            return std::uniform_real_distribution<double>(lo, hi)(rng);
        };
        std::vector<double> acc(static_cast<std::size_t>(w) * h * 3, 0.0);

        const double wavelengths[] = {96, 48, 24, 12, 6};
        const double amps[] = {0.35, 0.25, 0.20, 0.15, 0.08};
        for (int oct = 0; oct < 5; ++oct) {
            const int gw = static_cast<int>(w / wavelengths[oct]) + 3;
            const int gh = static_cast<int>(h / wavelengths[oct]) + 3;
            std::vector<double> grid(static_cast<std::size_t>(gw) * gh * 3);
            for (auto& v : grid) v = uni(-1.0, 1.0);
            const double inv = 1.0 / wavelengths[oct];
            for (int y = 0; y < h; ++y)
                for (int x = 0; x < w; ++x) {
                    const double gx = x * inv, gy = y * inv;
                    const int ix = static_cast<int>(gx), iy = static_cast<int>(gy);
                    const double fx = gx - ix, fy = gy - iy;
                    for (int c = 0; c < 3; ++c) {
                        auto g = [&](int a, int b) {
                            return grid[(static_cast<std::size_t>(b) * gw + a) * 3 + c];
                        };
                        const double v = (g(ix, iy) * (1 - fx) + g(ix + 1, iy) * fx) * (1 - fy) +
                                         (g(ix, iy + 1) * (1 - fx) + g(ix + 1, iy + 1) * fx) * fy;
                        acc[(static_cast<std::size_t>(y) * w + x) * 3 + c] += amps[oct] * v;
                    }
                }
        }

        // Decals: soft-edged discs and bars for strong corners.
        const int n_decals = (w * h) / 4500;
        for (int d = 0; d < n_decals; ++d) {
            const double cx = uni(0, w), cy = uni(0, h);
            const double r = uni(3.0, 10.0);
            const double shade[3] = {uni(-0.35, 0.35), uni(-0.35, 0.35), uni(-0.35, 0.35)};
            const bool bar = uni(0, 1) < 0.4;
            const double ang = uni(0, 3.14159265358979323846);
            const double ca = std::cos(ang), sa = std::sin(ang);
            const int x0 = std::max(0, static_cast<int>(cx - r - 2)),
                      x1 = std::min(w - 1, static_cast<int>(cx + r + 2));
            const int y0 = std::max(0, static_cast<int>(cy - r - 2)),
                      y1 = std::min(h - 1, static_cast<int>(cy + r + 2));
            for (int y = y0; y <= y1; ++y)
                for (int x = x0; x <= x1; ++x) {
                    const double dx = x - cx, dy = y - cy;
                    double inside;
                    if (bar) {
                        const double u = dx * ca + dy * sa, v = -dx * sa + dy * ca;
                        inside = std::max(std::abs(u) - r, std::abs(v) - r * 0.35);
                    } else {
                        inside = std::hypot(dx, dy) - r;
                    }
                    const double cov = std::clamp(0.5 - inside, 0.0, 1.0);  // 1-px soft edge
                    if (cov <= 0.0) continue;
                    for (int c = 0; c < 3; ++c)
                        acc[(static_cast<std::size_t>(y) * w + x) * 3 + c] += cov * shade[c];
                }
        }

        ImageU8 tex = ImageU8::make(w, h, 3);
        for (std::size_t i = 0; i < acc.size(); ++i) {
            const double v = 128.0 + 80.0 * std::clamp(acc[i], -1.2, 1.2);
            tex.data[i] = static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 255.0)));
        }
        return tex;
    }

    SceneSpec spec_;
    ImageU8 texture_;
    std::vector<GaussianBump> bumps_;
    int tex_w_ = 0, tex_h_ = 0;
    Vec2 cam_base_{0, 0};
};

// ---------------------------------------------------------------------------
// Correspondence maps: frame pixel -> world coordinate, 2 x float32 LE per
// pixel after a 16-byte header (8-byte magic, u32 width, u32 height).
// ---------------------------------------------------------------------------

struct CorrespondenceMap {
    int width = 0;
    int height = 0;
    std::vector<float> data;  // x, y interleaved

    Vec2 at(int x, int y) const {
        const std::size_t i = (static_cast<std::size_t>(y) * width + x) * 2;
        return {data[i], data[i + 1]};
    }
};

inline constexpr char kMapMagic[8] = {'N', 'R', 'M', 'C', 'M', 'A', 'P', '1'};

inline CorrespondenceMap compute_map(const SyntheticScene& scene, int t) {
    CorrespondenceMap map;
    map.width = scene.spec().width;
    map.height = scene.spec().height;
    map.data.resize(static_cast<std::size_t>(map.width) * map.height * 2);
    for (int y = 0; y < map.height; ++y)
        for (int x = 0; x < map.width; ++x) {
            const Vec2 w = scene.frame_to_world({static_cast<double>(x), static_cast<double>(y)}, t);
            const std::size_t i = (static_cast<std::size_t>(y) * map.width + x) * 2;
            map.data[i] = static_cast<float>(w.x);
            map.data[i + 1] = static_cast<float>(w.y);
        }
    return map;
}

inline void save_map(const std::string& path, const CorrespondenceMap& map) {
    static_assert(std::endian::native == std::endian::little,
                  "map files are little-endian");
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + path);
    out.write(kMapMagic, 8);
    const std::uint32_t wh[2] = {static_cast<std::uint32_t>(map.width),
                                 static_cast<std::uint32_t>(map.height)};
    out.write(reinterpret_cast<const char*>(wh), 8);
    out.write(reinterpret_cast<const char*>(map.data.data()),
              static_cast<std::streamsize>(map.data.size() * sizeof(float)));
}

inline CorrespondenceMap load_map(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open " + path);
    char magic[8];
    in.read(magic, 8);
    if (in.gcount() != 8 || std::memcmp(magic, kMapMagic, 8) != 0)
        throw std::runtime_error(path + ": not a correspondence map");
    std::uint32_t wh[2];
    in.read(reinterpret_cast<char*>(wh), 8);
    CorrespondenceMap map;
    map.width = static_cast<int>(wh[0]);
    map.height = static_cast<int>(wh[1]);
    map.data.resize(static_cast<std::size_t>(map.width) * map.height * 2);
    in.read(reinterpret_cast<char*>(map.data.data()),
            static_cast<std::streamsize>(map.data.size() * sizeof(float)));
    if (in.gcount() != static_cast<std::streamsize>(map.data.size() * sizeof(float)))
        throw std::runtime_error(path + ": truncated correspondence map");
    return map;
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

struct EvalReport {
    double node_rmse = 0.0;        // px
    double mosaic_rmse = 0.0;      // per channel, [0,1] color units
    double inlier_precision = 0.0;
    double inlier_recall = 0.0;
    double drift = 0.0;            // px, final-frame mean node error
};

/// Per-frame node positions from a run. Anchors are append-only; frame f
/// used the first positions[f].size() anchors.
struct RunTrajectory {
    std::vector<Vec2> anchors;
    std::vector<std::vector<Vec2>> positions;  // indexed by frame
    std::vector<std::string> status;           // per frame
};

/// Logged matches with estimator labels, for precision/recall against the
/// ground-truth correspondence.
struct LoggedMatch {
    int frame = 0;  // matched frame t (a side is frame t-1)
    Vec2 point_a, point_b;
    bool inlier = false;
};

/// Scores node tracking, mosaic color fidelity and (when a match log is
/// given) inlier classification against the synthetic ground truth. Node
/// errors count nodes whose true position falls inside the frame at that
/// time; unobservable nodes are skipped.
inline EvalReport evaluate_run(const RunTrajectory& traj, const ImageU8& mosaic_rgba,
                               const Vec2& mosaic_origin, const SyntheticScene& scene,
                               const std::vector<LoggedMatch>* match_log = nullptr,
                               double match_tol = 3.0) {
    EvalReport report;
    const double w1 = scene.spec().width - 1.0, h1 = scene.spec().height - 1.0;

    double se = 0.0;
    std::int64_t n = 0;
    for (std::size_t f = 0; f < traj.positions.size(); ++f) {
        if (f < traj.status.size() && traj.status[f] == "lost") continue;
        const auto& pos = traj.positions[f];
        for (std::size_t i = 0; i < pos.size() && i < traj.anchors.size(); ++i) {
            const Vec2 truth = scene.true_position(traj.anchors[i], static_cast<int>(f));
            if (truth.x < 0.0 || truth.y < 0.0 || truth.x > w1 || truth.y > h1) continue;
            se += dist2(pos[i], truth);
            ++n;
        }
    }
    report.node_rmse = n > 0 ? std::sqrt(se / static_cast<double>(n)) : 0.0;

    if (!traj.positions.empty()) {
        const int f = static_cast<int>(traj.positions.size()) - 1;
        const auto& pos = traj.positions.back();
        double sum = 0.0;
        std::int64_t m = 0;
        for (std::size_t i = 0; i < pos.size() && i < traj.anchors.size(); ++i) {
            const Vec2 truth = scene.true_position(traj.anchors[i], f);
            if (truth.x < 0.0 || truth.y < 0.0 || truth.x > w1 || truth.y > h1) continue;
            sum += dist(pos[i], truth);
            ++m;
        }
        report.drift = m > 0 ? sum / static_cast<double>(m) : 0.0;
    }

    if (!mosaic_rgba.empty() && mosaic_rgba.channels == 4) {
        double cse = 0.0;
        std::int64_t cn = 0;
        for (int y = 0; y < mosaic_rgba.height; ++y)
            for (int x = 0; x < mosaic_rgba.width; ++x) {
                if (mosaic_rgba.at(x, y, 3) == 0) continue;
                double truth[3];
                if (!scene.reference_color({mosaic_origin.x + x, mosaic_origin.y + y}, truth))
                    continue;
                for (int c = 0; c < 3; ++c) {
                    const double got = mosaic_rgba.at(x, y, c) / 255.0;
                    cse += (got - truth[c]) * (got - truth[c]);
                    ++cn;
                }
            }
        report.mosaic_rmse = cn > 0 ? std::sqrt(cse / static_cast<double>(cn)) : 0.0;
    }

    if (match_log && !match_log->empty()) {
        std::int64_t tp = 0, fp = 0, fn = 0;
        for (const auto& lm : *match_log) {
            const Vec2 wa = scene.frame_to_world(lm.point_a, lm.frame - 1);
            const Vec2 wb = scene.frame_to_world(lm.point_b, lm.frame);
            const bool truly_inlier = dist(wa, wb) < match_tol;
            if (lm.inlier && truly_inlier) ++tp;
            else if (lm.inlier && !truly_inlier) ++fp;
            else if (!lm.inlier && truly_inlier) ++fn;
        }
        report.inlier_precision = tp + fp > 0 ? static_cast<double>(tp) / (tp + fp) : 0.0;
        report.inlier_recall = tp + fn > 0 ? static_cast<double>(tp) / (tp + fn) : 0.0;
    }
    return report;
}

}  // namespace nrmosaic
