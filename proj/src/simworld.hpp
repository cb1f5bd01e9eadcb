#pragma once

#include <cstdint>
#include <stdexcept>
#include <vector>

#include "geometry.hpp"

namespace cmflow::sim {

struct InvalidConfig : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct EmptyFrame : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// One radar sweep. rrv is positive for receding points.
struct RadarFrame {
    std::vector<geo::Vec3> coords;
    std::vector<double> rrv;
    std::vector<double> rcs;
    double timestamp = 0.0;

    size_t size() const { return coords.size(); }
};

struct TrackedBox {
    int id = 0;
    geo::Vec3 center = geo::Vec3::Zero();  // radar frame of frame_index
    geo::Vec3 size = geo::Vec3::Zero();    // (l, w, h)
    double yaw = 0.0;                      // about z, radar frame
    int frame_index = 0;
};

bool point_in_box(const geo::Vec3& p, const TrackedBox& box, double margin = 0.0);

// Dense per-pair optical flow map, row-major (v, u, 2).
struct FlowMap {
    int width = 0, height = 0;
    std::vector<float> data;

    FlowMap() = default;
    FlowMap(int w, int h) : width(w), height(h), data(static_cast<size_t>(w) * h * 2, 0.0f) {}

    float u_at(int u, int v) const { return data[2 * (static_cast<size_t>(v) * width + u)]; }
    float v_at(int u, int v) const { return data[2 * (static_cast<size_t>(v) * width + u) + 1]; }
    void set(int u, int v, float fu, float fv) {
        data[2 * (static_cast<size_t>(v) * width + u)] = fu;
        data[2 * (static_cast<size_t>(v) * width + u) + 1] = fv;
    }
};

struct SimConfig {
    int n_frames = 20;
    double dt = 0.1;
    int points_per_frame = 200;  // static surface samples per frame
    int n_movers = 3;
    int mover_points = 15;  // surface samples per mover per frame

    double ego_speed = 5.0;     // m/s along heading
    double ego_yaw_rate = 0.0;  // rad/s

    double mover_speed_min = 1.0;
    double mover_speed_max = 6.0;
    double mover_yaw_rate_max = 0.0;

    double rrv_noise = 0.0;       // sigma, m/s
    double rrv_bias_range = 0.0;  // per-frame beta ~ U(-b, b)
    double box_dropout = 0.0;
    double box_center_noise = 0.0;  // sigma, m
    double flow_noise_px = 0.0;
    double flow_corrupt_frac = 0.0;

    double z_min = -3.0, z_max = 3.0;
    int sample_n = 0;  // if > 0, sample this many points per frame

    double depth_min = 4.0, depth_max = 40.0;  // static sampling range

    geo::Calibration calib;

    SimConfig();
    void validate() const;  // throws InvalidConfig
};

geo::Calibration default_calibration();

// Ground truth for one consecutive frame pair (source = frame k).
struct PairGT {
    geo::RigidTransform ego;  // maps source-frame coords of static points to target-frame coords
    std::vector<geo::RigidTransform> object_transforms;  // per mover, same mapping
    std::vector<geo::Vec3> flow;                         // per source point
    std::vector<char> moving;                            // 5 cm rule
};

struct Sequence {
    SimConfig config;
    geo::Calibration calib;
    double dt = 0.0;
    std::vector<RadarFrame> frames;
    std::vector<std::vector<int>> owners;  // per frame, -1 static else mover index
    std::vector<geo::RigidTransform> odom_poses;  // world-from-radar
    std::vector<std::vector<TrackedBox>> gt_boxes;
    std::vector<std::vector<TrackedBox>> boxes;  // observed (dropout + jitter)
    std::vector<FlowMap> optflow;                // observed, per pair
    std::vector<PairGT> gt;                      // per pair

    size_t n_pairs() const { return gt.size(); }
    void validate() const;  // length consistency + 5 cm rule
};

Sequence generate_sequence(const SimConfig& config, std::uint64_t seed);

// Emulated MOT output: per-frame box dropout and center jitter, ids kept.
std::vector<std::vector<TrackedBox>> mot_observe(const Sequence& seq, double p_dropout,
                                                 double center_noise, std::uint64_t seed);

// Emulated optical-flow network output: exact flow at projected radar
// points, depth-transported flow elsewhere, plus pixel noise and outliers.
std::vector<FlowMap> camera_observe(const Sequence& seq, double flow_noise_px, double corrupt_frac,
                                    std::uint64_t seed);

// Keeps points that project inside the image with positive depth and whose
// z lies in [z_min, z_max]. Throws EmptyFrame when nothing survives.
RadarFrame fov_filter(const RadarFrame& frame, const geo::Calibration& calib, double z_min = -3.0,
                      double z_max = 3.0);

// n draws without replacement when the frame is large enough, with
// replacement otherwise.
RadarFrame sample_points(const RadarFrame& frame, int n, std::uint64_t seed);

}  // namespace cmflow::sim
