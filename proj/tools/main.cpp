// Command-line driver: online mosaicking of frame sequences, synthetic scene
// generation, run evaluation against ground truth, and match dumping.

#include <CLI11.hpp>

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <string>

#include "nrmosaic/config.hpp"
#include "nrmosaic/mosaic.hpp"
#include "nrmosaic/slam.hpp"
#include "nrmosaic/snapshot.hpp"
#include "nrmosaic/synth.hpp"

namespace fs = std::filesystem;
using namespace nrmosaic;

namespace {

using clock_type = std::chrono::steady_clock;

double ms_since(clock_type::time_point t0) {
    return std::chrono::duration<double, std::milli>(clock_type::now() - t0).count();
}

std::string frame_name(const char* stem, int index, const char* ext) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%s_%05d.%s", stem, index, ext);
    return buf;
}

/// External match manifest: lines of "frame_a frame_b path", '#' comments,
/// paths relative to the manifest location. Frame indices refer to the
/// position of each frame in the numerically sorted input listing.
class MatchManifest {
public:
    static MatchManifest load(const std::string& path) {
        std::ifstream in(path);
        if (!in) throw std::runtime_error("cannot open " + path);
        MatchManifest mf;
        mf.base_ = fs::path(path).parent_path();
        std::string line;
        int lineno = 0;
        while (std::getline(in, line)) {
            ++lineno;
            const auto first = line.find_first_not_of(" \t\r");
            if (first == std::string::npos || line[first] == '#') continue;
            std::istringstream ss(line);
            int a, b;
            std::string file;
            if (!(ss >> a >> b >> file))
                throw std::runtime_error(path + ":" + std::to_string(lineno) +
                                         ": expected 'frame_a frame_b path'");
            mf.entries_[{a, b}] = file;
        }
        return mf;
    }

    std::optional<std::vector<MatchPair>> matches(int a, int b) const {
        const auto it = entries_.find({a, b});
        if (it == entries_.end()) return std::nullopt;
        return load_matches((base_ / it->second).string());
    }

private:
    fs::path base_;
    std::map<std::pair<int, int>, std::string> entries_;
};

FrameFeatures features_from_match_endpoints(const std::vector<MatchPair>& matches) {
    FrameFeatures f;
    for (const auto& m : matches) f.keypoints.push_back({m.point_b, 1.0});
    return f;
}

void draw_node_overlay(ImageU8& rgb, const NodeGraph& graph) {
    auto put = [&rgb](int x, int y, std::uint8_t r, std::uint8_t g, std::uint8_t b) {
        if (x < 0 || y < 0 || x >= rgb.width || y >= rgb.height) return;
        rgb.at(x, y, 0) = r;
        rgb.at(x, y, 1) = g;
        rgb.at(x, y, 2) = b;
    };
    for (const auto& n : graph.nodes) {
        const int cx = static_cast<int>(std::lround(n.current_position.x));
        const int cy = static_cast<int>(std::lround(n.current_position.y));
        const bool uncertain = n.variance > 30.0;
        const std::uint8_t r = uncertain ? 255 : 40;
        const std::uint8_t g = uncertain ? 80 : 230;
        for (int d = -3; d <= 3; ++d) {
            put(cx + d, cy, r, g, 60);
            put(cx, cy + d, r, g, 60);
        }
    }
}

int run_mosaic(const std::string& input_dir, const std::string& config_path,
               const std::string& out_dir, const std::string& manifest_path, bool overlay,
               bool snapshots, bool no_loop, int workers_override, long seed_override,
               int blend_stride_override) {
    Config cfg;
    if (!config_path.empty()) cfg = Config::load(config_path);
    if (no_loop) cfg.loop_closing = false;
    if (workers_override > 0) cfg.workers = workers_override;
    if (seed_override >= 0) cfg.seed = static_cast<std::uint64_t>(seed_override);
    if (blend_stride_override > 0) cfg.blend_stride = blend_stride_override;

    const auto frame_paths = list_frames(input_dir);
    if (frame_paths.size() < 2) {
        std::cerr << "error: " << input_dir << " holds " << frame_paths.size()
                  << " readable frames; need at least 2\n";
        return 1;
    }

    fs::create_directories(out_dir);
    if (overlay) fs::create_directories(fs::path(out_dir) / "overlays");
    if (snapshots) fs::create_directories(fs::path(out_dir) / "snapshots");

    std::optional<MatchManifest> manifest;
    if (!manifest_path.empty()) manifest = MatchManifest::load(manifest_path);

    std::ofstream stats(fs::path(out_dir) / "stats.jsonl");
    std::ofstream match_log(fs::path(out_dir) / "matches.jsonl");
    TrajectoryWriter trajectory((fs::path(out_dir) / "trajectory.jsonl").string());

    const DetectorConfig detector = make_detector_config(cfg);
    const int workers = resolve_workers(cfg.workers);

    std::optional<Engine> engine;
    Canvas canvas;
    int frame_w = 0, frame_h = 0;
    int processed = 0;  // count of successfully processed frames
    int prev_file_index = -1;
    int blended = 0;
    const auto t_start = clock_type::now();

    for (std::size_t fi = 0; fi < frame_paths.size(); ++fi) {
        ImageU8 img;
        try {
            img = load_image(frame_paths[fi]);
        } catch (const std::exception& e) {
            std::cerr << "warning: skipping unreadable frame " << frame_paths[fi] << ": "
                      << e.what() << "\n";
            stats << json{{"file", frame_paths[fi]}, {"status", "skipped"}}.dump() << "\n";
            continue;
        }
        if (engine && (img.width != frame_w || img.height != frame_h)) {
            std::cerr << "warning: skipping " << frame_paths[fi] << ": size " << img.width << "x"
                      << img.height << " != " << frame_w << "x" << frame_h << "\n";
            stats << json{{"file", frame_paths[fi]}, {"status", "skipped"}}.dump() << "\n";
            continue;
        }

        const auto t_detect = clock_type::now();
        FrameFeatures cur;
        std::vector<MatchPair> matches;
        double ms_detect = 0.0, ms_match = 0.0;

        if (!engine) {
            // First readable frame establishes resolution and seeds the engine.
            frame_w = img.width;
            frame_h = img.height;
            const Engine::Params params = make_engine_params(cfg, frame_w, frame_h);
            if (!manifest) cur = detect_features(to_gray(img), detector);
            ms_detect = ms_since(t_detect);
            engine.emplace(params);
            engine->initialize(cur, frame_w, frame_h);
            const auto t_blend = clock_type::now();
            const BlendStats bs =
                blend_frame(canvas, img, engine->graph().anchors(), engine->graph().warps(),
                            params.alpha, engine->last_footprint(), workers);
            ++blended;
            FrameReport report;
            report.status = FrameStatus::Tracked;
            report.frame_index = 0;
            report.node_count = static_cast<int>(engine->graph().nodes.size());
            stats << frame_stats_json(report, ms_detect, 0.0, ms_since(t_blend), &bs).dump()
                  << "\n";
            trajectory.append(0, FrameStatus::Tracked, engine->graph());
            processed = 1;
            prev_file_index = static_cast<int>(fi);
            continue;
        }

        const int t = engine->frame_index() + 1;

        if (manifest) {
            const auto m = manifest->matches(prev_file_index, static_cast<int>(fi));
            if (m) matches = *m;
            cur = features_from_match_endpoints(matches);
            ms_match = ms_since(t_detect);
        } else {
            cur = detect_features(to_gray(img), detector);
            ms_detect = ms_since(t_detect);
            const auto t_match = clock_type::now();
            matches =
                match_features(engine->previous_features(), cur, detector.ratio_test, workers);
            ms_match = ms_since(t_match);
        }

        Engine::LoopMatcher loop_matcher;
        if (manifest) {
            // Keyframe frame_index counts processed frames; the manifest keys
            // on listing positions. They coincide when no frame is skipped.
            loop_matcher = [&](const KeyFrame& kf) {
                const auto m = manifest->matches(kf.frame_index, static_cast<int>(fi));
                return m ? *m : std::vector<MatchPair>{};
            };
        } else {
            loop_matcher = [&](const KeyFrame& kf) {
                return match_features(kf.features, cur, detector.ratio_test, workers);
            };
        }

        const FrameReport report = engine->process_frame(cur, matches, loop_matcher);
        ++processed;

        double ms_blend = 0.0;
        std::optional<BlendStats> bs;
        if (report.status != FrameStatus::Lost) {
            prev_file_index = static_cast<int>(fi);
            if (t % cfg.blend_stride == 0) {
                const auto t_blend = clock_type::now();
                bs = blend_frame(canvas, img, engine->graph().anchors(), engine->graph().warps(),
                                 engine->params().alpha, engine->last_footprint(), workers);
                ms_blend = ms_since(t_blend);
                ++blended;
            }
            match_log << match_log_line(t, matches, engine->last_inlier_flags()).dump() << "\n";
        }

        stats << frame_stats_json(report, ms_detect, ms_match, ms_blend, bs ? &*bs : nullptr)
                     .dump()
              << "\n";
        trajectory.append(t, report.status, engine->graph());

        if (overlay) {
            ImageU8 vis = img;
            if (vis.channels != 3) {
                ImageU8 rgb = ImageU8::make(vis.width, vis.height, 3);
                for (int y = 0; y < vis.height; ++y)
                    for (int x = 0; x < vis.width; ++x)
                        for (int c = 0; c < 3; ++c)
                            rgb.at(x, y, c) = vis.at(x, y, vis.channels == 1 ? 0 : c);
                vis = std::move(rgb);
            }
            draw_node_overlay(vis, engine->graph());
            save_png((fs::path(out_dir) / "overlays" / frame_name("frame", t, "png")).string(),
                     vis);
        }
        if (snapshots)
            write_snapshot(
                (fs::path(out_dir) / "snapshots" / frame_name("frame", t, "json")).string(),
                engine->graph());
    }

    if (processed == 0) {
        std::cerr << "error: no processable frames in " << input_dir << "\n";
        return 1;
    }

    Vec2 origin;
    const ImageU8 out = render(canvas, true, &origin);
    save_png((fs::path(out_dir) / "mosaic.png").string(), out);
    {
        std::ofstream meta(fs::path(out_dir) / "mosaic_meta.json");
        meta << json{{"origin", {origin.x, origin.y}},
                     {"width", out.width},
                     {"height", out.height},
                     {"frames_processed", processed},
                     {"frames_blended", blended}}
                    .dump(2)
             << "\n";
    }
    cfg.save((fs::path(out_dir) / "config.cfg").string());

    const double total_ms = ms_since(t_start);
    std::cout << "processed " << processed << " frames (" << blended << " blended) in "
              << total_ms / 1000.0 << " s (" << 1000.0 * processed / total_ms << " fps); mosaic "
              << out.width << "x" << out.height << " -> " << out_dir << "/mosaic.png\n";
    return 0;
}

int run_synth(const std::string& out_dir, const std::string& scene_config, long seed, int frames,
              int width, int height, const std::string& path_kind, double extent,
              double max_displacement, int bumps, bool maps) {
    SceneSpec spec;
    if (!scene_config.empty()) spec = SceneSpec::load(scene_config);
    if (seed >= 0) spec.seed = static_cast<std::uint64_t>(seed);
    if (frames > 0) spec.frames = frames;
    if (width > 0) spec.width = width;
    if (height > 0) spec.height = height;
    if (!path_kind.empty()) spec.path = path_kind;
    if (extent >= 0) spec.path_extent = extent;
    if (max_displacement >= 0) spec.max_displacement = max_displacement;
    if (bumps >= 0) spec.num_bumps = bumps;

    const auto scene = SyntheticScene::build(spec);
    fs::create_directories(fs::path(out_dir) / "frames");
    if (maps) fs::create_directories(fs::path(out_dir) / "maps");
    spec.save((fs::path(out_dir) / "scene.cfg").string());
    save_png((fs::path(out_dir) / "texture.png").string(), scene.texture());

    const int workers = resolve_workers(0);
    for (int t = 0; t < spec.frames; ++t) {
        save_png((fs::path(out_dir) / "frames" / frame_name("frame", t, "png")).string(),
                 scene.render_frame(t, workers));
        if (maps)
            save_map((fs::path(out_dir) / "maps" / frame_name("map", t, "bin")).string(),
                     compute_map(scene, t));
    }
    std::cout << "wrote " << spec.frames << " frames to " << out_dir << "/frames\n";
    return 0;
}

int run_eval(const std::string& run_dir, const std::string& truth_dir,
             const std::string& report_path, double match_tol) {
    const auto spec = SceneSpec::load((fs::path(truth_dir) / "scene.cfg").string());
    const auto scene = SyntheticScene::build(spec);
    const auto traj = load_trajectory((fs::path(run_dir) / "trajectory.jsonl").string());

    ImageU8 mosaic;
    Vec2 origin{0, 0};
    const fs::path mosaic_path = fs::path(run_dir) / "mosaic.png";
    if (fs::exists(mosaic_path)) {
        mosaic = load_png(mosaic_path.string());
        std::ifstream meta(fs::path(run_dir) / "mosaic_meta.json");
        if (meta) {
            json j;
            meta >> j;
            origin = {j.at("origin")[0].get<double>(), j.at("origin")[1].get<double>()};
        }
    }

    std::vector<LoggedMatch> log;
    const fs::path log_path = fs::path(run_dir) / "matches.jsonl";
    if (fs::exists(log_path)) log = load_match_log(log_path.string());

    const EvalReport report =
        evaluate_run(traj, mosaic, origin, scene, log.empty() ? nullptr : &log, match_tol);
    const json j{{"node_rmse", report.node_rmse},
                 {"mosaic_rmse", report.mosaic_rmse},
                 {"inlier_precision", report.inlier_precision},
                 {"inlier_recall", report.inlier_recall},
                 {"drift", report.drift}};
    std::cout << j.dump(2) << "\n";
    if (!report_path.empty()) {
        std::ofstream out(report_path);
        out << j.dump(2) << "\n";
    }
    return 0;
}

int run_match_dump(const std::string& a_path, const std::string& b_path,
                   const std::string& out_path, double ratio, int max_features) {
    const ImageU8 a = load_image(a_path);
    const ImageU8 b = load_image(b_path);
    DetectorConfig cfg;
    cfg.ratio_test = ratio;
    cfg.max_features = max_features;
    cfg.workers = resolve_workers(0);
    const auto matches = detect_and_match(a, b, cfg);
    if (out_path.empty() || out_path == "-") {
        std::cout << "# ax ay bx by score\n";
        char buf[192];
        for (const auto& m : matches) {
            std::snprintf(buf, sizeof buf, "%.17g %.17g %.17g %.17g %.17g\n", m.point_a.x,
                          m.point_a.y, m.point_b.x, m.point_b.y, m.score);
            std::cout << buf;
        }
    } else {
        save_matches(out_path, matches);
    }
    std::cerr << matches.size() << " matches\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"nrmosaic: real-time non-rigid 2D mosaicking"};
    app.require_subcommand(1);

    // mosaic
    std::string input_dir, config_path, out_dir = "out", manifest_path;
    bool overlay = false, snapshots = false, no_loop = false;
    int workers = 0, blend_stride = 0;
    long seed = -1;
    auto* mosaic_cmd = app.add_subcommand("mosaic", "mosaic a frame sequence");
    mosaic_cmd->add_option("input", input_dir, "directory of frames")->required();
    mosaic_cmd->add_option("-c,--config", config_path, "config file");
    mosaic_cmd->add_option("-o,--output", out_dir, "output directory");
    mosaic_cmd->add_option("--matches", manifest_path, "external match manifest");
    mosaic_cmd->add_flag("--overlay", overlay, "write per-frame node overlays");
    mosaic_cmd->add_flag("--snapshots", snapshots, "write per-frame state snapshots");
    mosaic_cmd->add_flag("--no-loop-closing", no_loop, "disable loop closing");
    mosaic_cmd->add_option("--workers", workers, "worker thread count");
    mosaic_cmd->add_option("--seed", seed, "estimator seed");
    mosaic_cmd->add_option("--blend-stride", blend_stride, "blend every Nth frame");

    // synth
    std::string synth_out = "synth_out", scene_config, path_kind;
    long synth_seed = -1;
    int frames = 0, width = 0, height = 0, bumps = -1;
    double extent = -1, max_disp = -1;
    bool maps = false;
    auto* synth_cmd = app.add_subcommand("synth", "generate a synthetic ground-truth scan");
    synth_cmd->add_option("-o,--output", synth_out, "output directory");
    synth_cmd->add_option("--config", scene_config, "scene config file");
    synth_cmd->add_option("--seed", synth_seed, "scene seed");
    synth_cmd->add_option("--frames", frames, "frame count");
    synth_cmd->add_option("--width", width, "frame width");
    synth_cmd->add_option("--height", height, "frame height");
    synth_cmd->add_option("--path", path_kind, "camera path: scan | outback");
    synth_cmd->add_option("--extent", extent, "camera travel in px");
    synth_cmd->add_option("--max-displacement", max_disp, "peak bump displacement in px");
    synth_cmd->add_option("--bumps", bumps, "number of deformation bumps");
    synth_cmd->add_flag("--maps", maps, "write correspondence maps");

    // eval
    std::string run_dir, truth_dir, report_path;
    double match_tol = 3.0;
    auto* eval_cmd = app.add_subcommand("eval", "score a run against synthetic ground truth");
    eval_cmd->add_option("--run", run_dir, "mosaic output directory")->required();
    eval_cmd->add_option("--truth", truth_dir, "synth output directory")->required();
    eval_cmd->add_option("-o,--output", report_path, "report JSON path");
    eval_cmd->add_option("--match-tol", match_tol, "world-space inlier tolerance, px");

    // match-dump
    std::string img_a, img_b, dump_out;
    double ratio = 0.8;
    int max_features = 800;
    auto* dump_cmd = app.add_subcommand("match-dump", "detect and match two images");
    dump_cmd->add_option("a", img_a, "first image")->required();
    dump_cmd->add_option("b", img_b, "second image")->required();
    dump_cmd->add_option("-o,--output", dump_out, "match file ('-' for stdout)");
    dump_cmd->add_option("--ratio", ratio, "ratio test threshold");
    dump_cmd->add_option("--max-features", max_features, "detector feature cap");

    CLI11_PARSE(app, argc, argv);

    try {
        if (mosaic_cmd->parsed())
            return run_mosaic(input_dir, config_path, out_dir, manifest_path, overlay, snapshots,
                              no_loop, workers, seed, blend_stride);
        if (synth_cmd->parsed())
            return run_synth(synth_out, scene_config, synth_seed, frames, width, height, path_kind,
                             extent, max_disp, bumps, maps);
        if (eval_cmd->parsed()) return run_eval(run_dir, truth_dir, report_path, match_tol);
        if (dump_cmd->parsed()) return run_match_dump(img_a, img_b, dump_out, ratio, max_features);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
    return 2;
}
