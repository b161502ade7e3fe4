#pragma once

#include <fstream>
#include <string>

#include <json.hpp>

#include "nrmosaic/mosaic.hpp"
#include "nrmosaic/slam.hpp"
#include "nrmosaic/synth.hpp"

namespace nrmosaic {

using json = nlohmann::json;

/// Full engine state for debugging and test assertions.
inline json snapshot_json(const NodeGraph& graph) {
    json nodes = json::array();
    for (const auto& n : graph.nodes) {
        nodes.push_back({{"anchor", {n.anchor.x, n.anchor.y}},
                         {"position", {n.current_position.x, n.current_position.y}},
                         {"scale", n.warp.scale},
                         {"dq", {n.warp.dq.w, n.warp.dq.z, n.warp.dq.dx, n.warp.dq.dy}},
                         {"variance", n.variance}});
    }
    json keyframes = json::array();
    for (const auto& kf : graph.keyframes)
        keyframes.push_back({{"frame", kf.frame_index},
                             {"nodes", kf.node_positions.size()},
                             {"features", kf.features.size()}});
    json tracks = json::array();
    for (const auto& t : graph.feature_tracks)
        tracks.push_back({{"position", {t.position.x, t.position.y}}, {"variance", t.variance}});
    return {{"hex_spacing", graph.hex_spacing},
            {"nodes", std::move(nodes)},
            {"keyframes", std::move(keyframes)},
            {"feature_tracks", std::move(tracks)}};
}

inline void write_snapshot(const std::string& path, const NodeGraph& graph) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write " + path);
    out << snapshot_json(graph).dump(2) << "\n";
}

/// One stats line per frame (JSON lines).
inline json frame_stats_json(const FrameReport& report, double ms_detect, double ms_match,
                             double ms_blend, const BlendStats* blend) {
    json j{{"frame", report.frame_index},
           {"status", to_string(report.status)},
           {"nodes", report.node_count},
           {"matches", report.match_count},
           {"inliers", report.inlier_count},
           {"loop_keyframe", report.loop_keyframe},
           {"keyframe_added", report.keyframe_added},
           {"nodes_added", report.nodes_added},
           {"mean_variance", report.mean_variance},
           {"ms",
            {{"detect", ms_detect},
             {"match", ms_match},
             {"track", report.ms_track},
             {"loop", report.ms_loop},
             {"merge", report.ms_merge},
             {"arap", report.ms_arap},
             {"blend", ms_blend}}}};
    if (blend) {
        j["blend"] = {{"footprint_px", blend->footprint_pixels},
                      {"blended_px", blend->blended_pixels},
                      {"skipped_no_support", blend->skipped_no_support},
                      {"skipped_out_of_frame", blend->skipped_out_of_frame}};
    }
    return j;
}

// ---------------------------------------------------------------------------
// Trajectory (JSON lines): per frame, node positions plus the anchors of any
// nodes added that frame. Reader reassembles a RunTrajectory.
// ---------------------------------------------------------------------------

class TrajectoryWriter {
public:
    explicit TrajectoryWriter(const std::string& path) : out_(path) {
        if (!out_) throw std::runtime_error("cannot write " + path);
    }

    void append(int frame, FrameStatus status, const NodeGraph& graph) {
        json positions = json::array();
        for (const auto& n : graph.nodes)
            positions.push_back({n.current_position.x, n.current_position.y});
        json new_anchors = json::array();
        for (std::size_t i = anchors_written_; i < graph.nodes.size(); ++i)
            new_anchors.push_back({graph.nodes[i].anchor.x, graph.nodes[i].anchor.y});
        anchors_written_ = graph.nodes.size();
        out_ << json{{"frame", frame},
                     {"status", to_string(status)},
                     {"new_anchors", std::move(new_anchors)},
                     {"positions", std::move(positions)}}
                    .dump()
             << "\n";
    }

private:
    std::ofstream out_;
    std::size_t anchors_written_ = 0;
};

inline RunTrajectory load_trajectory(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open " + path);
    RunTrajectory traj;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        const json j = json::parse(line);
        for (const auto& a : j.at("new_anchors"))
            traj.anchors.push_back({a[0].get<double>(), a[1].get<double>()});
        std::vector<Vec2> pos;
        for (const auto& p : j.at("positions"))
            pos.push_back({p[0].get<double>(), p[1].get<double>()});
        traj.positions.push_back(std::move(pos));
        traj.status.push_back(j.at("status").get<std::string>());
    }
    return traj;
}

// ---------------------------------------------------------------------------
// Match log (JSON lines): per matched frame, endpoints plus the estimator's
// inlier label, for evaluation against ground truth.
// ---------------------------------------------------------------------------

inline json match_log_line(int frame, const std::vector<MatchPair>& matches,
                           const std::vector<std::uint8_t>& inlier_flags) {
    json arr = json::array();
    for (std::size_t i = 0; i < matches.size(); ++i) {
        arr.push_back({matches[i].point_a.x, matches[i].point_a.y, matches[i].point_b.x,
                       matches[i].point_b.y,
                       i < inlier_flags.size() && inlier_flags[i] ? 1 : 0});
    }
    return {{"frame", frame}, {"matches", std::move(arr)}};
}

inline std::vector<LoggedMatch> load_match_log(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open " + path);
    std::vector<LoggedMatch> out;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        const json j = json::parse(line);
        const int frame = j.at("frame").get<int>();
        for (const auto& m : j.at("matches")) {
            LoggedMatch lm;
            lm.frame = frame;
            lm.point_a = {m[0].get<double>(), m[1].get<double>()};
            lm.point_b = {m[2].get<double>(), m[3].get<double>()};
            lm.inlier = m[4].get<int>() != 0;
            out.push_back(lm);
        }
    }
    return out;
}

}  // namespace nrmosaic
