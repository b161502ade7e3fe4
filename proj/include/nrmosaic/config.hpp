#pragma once

#include <cstdint>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>

#include "nrmosaic/features.hpp"
#include "nrmosaic/fieldest.hpp"
#include "nrmosaic/slam.hpp"

namespace nrmosaic {

/// Pipeline configuration. Distance-based coefficients (alpha, beta, gamma)
/// and pixel thresholds are stated at the 480x270 reference resolution and
/// rescaled per input size by resolve_scaled_params.
struct Config {
    double alpha = 2e-4;
    double beta = 3e-3;
    double gamma = 5e-3;
    int loop_stride = 5;       // loop closing every K frames
    int blend_stride = 2;      // every Nth frame blended into the mosaic
    double keyframe_h = 40.0;  // px at reference resolution
    double hex_spacing = 60.0; // px at reference resolution
    double inlier_threshold = 5.0;  // px at reference resolution

    int max_features = 800;
    double detector_quality = 0.005;
    double ratio_test = 0.8;
    int em_iters = 10;
    int field_knn = 8;
    int seed_trials = 64;

    bool loop_closing = true;
    int workers = 0;  // 0 = hardware concurrency
    std::uint64_t seed = 1234;

    void save(const std::string& path) const {
        std::ofstream out(path);
        if (!out) throw std::runtime_error("cannot write " + path);
        char buf[64];
        auto num = [&buf](double v) {
            std::snprintf(buf, sizeof buf, "%.17g", v);
            return std::string(buf);
        };
        out << "alpha = " << num(alpha) << "\n"
            << "beta = " << num(beta) << "\n"
            << "gamma = " << num(gamma) << "\n"
            << "loop_stride = " << loop_stride << "\n"
            << "blend_stride = " << blend_stride << "\n"
            << "keyframe_h = " << num(keyframe_h) << "\n"
            << "hex_spacing = " << num(hex_spacing) << "\n"
            << "inlier_threshold = " << num(inlier_threshold) << "\n"
            << "max_features = " << max_features << "\n"
            << "detector_quality = " << num(detector_quality) << "\n"
            << "ratio_test = " << num(ratio_test) << "\n"
            << "em_iters = " << em_iters << "\n"
            << "field_knn = " << field_knn << "\n"
            << "seed_trials = " << seed_trials << "\n"
            << "loop_closing = " << (loop_closing ? 1 : 0) << "\n"
            << "workers = " << workers << "\n"
            << "seed = " << seed << "\n";
    }

    static Config load(const std::string& path) {
        std::ifstream in(path);
        if (!in) throw std::runtime_error("cannot open " + path);
        Config cfg;
        std::string line;
        int lineno = 0;
        while (std::getline(in, line)) {
            ++lineno;
            const auto first = line.find_first_not_of(" \t\r");
            if (first == std::string::npos || line[first] == '#') continue;
            const auto eq = line.find('=');
            if (eq == std::string::npos)
                throw std::runtime_error(path + ":" + std::to_string(lineno) +
                                         ": expected 'key = value'");
            auto trim = [](std::string s) {
                const auto b = s.find_first_not_of(" \t\r");
                const auto e = s.find_last_not_of(" \t\r");
                return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
            };
            const std::string key = trim(line.substr(0, eq));
            const std::string value = trim(line.substr(eq + 1));
            if (!cfg.set(key, value))
                throw std::runtime_error(path + ":" + std::to_string(lineno) + ": unknown key '" +
                                         key + "'");
        }
        cfg.validate(path);
        return cfg;
    }

    bool set(const std::string& key, const std::string& value) {
        auto as_double = [&](double& field) { field = std::stod(value); };
        auto as_int = [&](int& field) { field = std::stoi(value); };
        if (key == "alpha") as_double(alpha);
        else if (key == "beta") as_double(beta);
        else if (key == "gamma") as_double(gamma);
        else if (key == "loop_stride") as_int(loop_stride);
        else if (key == "blend_stride") as_int(blend_stride);
        else if (key == "keyframe_h") as_double(keyframe_h);
        else if (key == "hex_spacing") as_double(hex_spacing);
        else if (key == "inlier_threshold") as_double(inlier_threshold);
        else if (key == "max_features") as_int(max_features);
        else if (key == "detector_quality") as_double(detector_quality);
        else if (key == "ratio_test") as_double(ratio_test);
        else if (key == "em_iters") as_int(em_iters);
        else if (key == "field_knn") as_int(field_knn);
        else if (key == "seed_trials") as_int(seed_trials);
        else if (key == "loop_closing") loop_closing = std::stoi(value) != 0;
        else if (key == "workers") as_int(workers);
        else if (key == "seed") seed = std::stoull(value);
        else return false;
        return true;
    }

    void validate(const std::string& source) const {
        auto fail = [&source](const std::string& field, const std::string& why) {
            throw std::runtime_error(source + ": " + field + ": " + why);
        };
        if (!(alpha > 0)) fail("alpha", "must be positive");
        if (!(beta > 0)) fail("beta", "must be positive");
        if (!(gamma > 0)) fail("gamma", "must be positive");
        if (loop_stride < 1) fail("loop_stride", "must be >= 1");
        if (blend_stride < 1) fail("blend_stride", "must be >= 1");
        if (!(keyframe_h > 0)) fail("keyframe_h", "must be positive");
        if (!(hex_spacing > 0)) fail("hex_spacing", "must be positive");
        if (!(inlier_threshold > 0)) fail("inlier_threshold", "must be positive");
    }
};

/// Parameters after resolution scaling: s = (w/480 + h/270)/2; the squared-
/// distance coefficients scale by 1/s^2, pixel thresholds by s.
struct ScaledParams {
    double s = 1.0;
    double alpha = 0.0, beta = 0.0, gamma = 0.0;
    double keyframe_h = 0.0, hex_spacing = 0.0, inlier_threshold = 0.0;
};

inline ScaledParams resolve_scaled_params(const Config& cfg, int frame_width, int frame_height) {
    if (frame_width <= 0 || frame_height <= 0)
        throw std::invalid_argument("resolve_scaled_params: frame size must be positive");
    ScaledParams out;
    out.s = (frame_width / 480.0 + frame_height / 270.0) / 2.0;
    const double inv_s2 = 1.0 / (out.s * out.s);
    out.alpha = cfg.alpha * inv_s2;
    out.beta = cfg.beta * inv_s2;
    out.gamma = cfg.gamma * inv_s2;
    out.keyframe_h = cfg.keyframe_h * out.s;
    out.hex_spacing = cfg.hex_spacing * out.s;
    out.inlier_threshold = cfg.inlier_threshold * out.s;
    return out;
}

inline Engine::Params make_engine_params(const Config& cfg, int frame_width, int frame_height) {
    const ScaledParams sp = resolve_scaled_params(cfg, frame_width, frame_height);
    Engine::Params p;
    p.alpha = sp.alpha;
    p.beta = sp.beta;
    p.gamma = sp.gamma;
    p.loop_stride = cfg.loop_stride;
    p.keyframe_threshold = sp.keyframe_h;
    p.hex_spacing = sp.hex_spacing;
    p.loop_closing = cfg.loop_closing;
    p.workers = resolve_workers(cfg.workers);
    p.field.alpha = sp.alpha;
    p.field.beta = sp.beta;
    p.field.inlier_threshold = sp.inlier_threshold;
    p.field.max_iters = cfg.em_iters;
    p.field.knn = cfg.field_knn;
    p.field.seed_trials = cfg.seed_trials;
    p.field.seed = cfg.seed;
    p.field.workers = p.workers;
    return p;
}

inline DetectorConfig make_detector_config(const Config& cfg) {
    DetectorConfig d;
    d.max_features = cfg.max_features;
    d.quality_level = cfg.detector_quality;
    d.ratio_test = cfg.ratio_test;
    d.workers = resolve_workers(cfg.workers);
    return d;
}

}  // namespace nrmosaic
