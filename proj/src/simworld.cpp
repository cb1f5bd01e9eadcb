#include "simworld.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <string>

#include "rng.hpp"

namespace cmflow::sim {

SimConfig::SimConfig() { calib = default_calibration(); }

geo::Calibration default_calibration() {
    geo::Calibration c;
    c.fx = c.fy = 150.0;
    c.cx = 80.0;
    c.cy = 60.0;
    c.width = 160;
    c.height = 120;
    // radar: x forward, y left, z up; camera: z forward, x right, y down
    c.cam_from_radar.rotation << 0, -1, 0, 0, 0, -1, 1, 0, 0;
    c.cam_from_radar.translation = geo::Vec3::Zero();
    return c;
}

void SimConfig::validate() const {
    auto fail = [](const std::string& msg) { throw InvalidConfig("SimConfig: " + msg); };
    if (n_frames < 2) fail("need at least 2 frames");
    if (dt <= 0.0) fail("dt must be positive");
    if (points_per_frame < 1) fail("points_per_frame must be >= 1");
    if (n_movers < 0) fail("n_movers must be >= 0");
    if (n_movers > 0 && mover_points < 1) fail("mover_points must be >= 1");
    if (ego_speed < 0.0) fail("ego_speed must be >= 0");
    if (mover_speed_min < 0.0 || mover_speed_max < mover_speed_min)
        fail("mover speed range invalid");
    if (mover_yaw_rate_max < 0.0) fail("mover_yaw_rate_max must be >= 0");
    if (rrv_noise < 0.0 || rrv_bias_range < 0.0 || box_center_noise < 0.0 || flow_noise_px < 0.0)
        fail("noise levels must be >= 0");
    if (box_dropout < 0.0 || box_dropout >= 1.0) fail("box_dropout must be in [0, 1)");
    if (flow_corrupt_frac < 0.0 || flow_corrupt_frac > 1.0)
        fail("flow_corrupt_frac must be in [0, 1]");
    if (z_min >= z_max) fail("z range empty");
    if (depth_min <= 0.0 || depth_max <= depth_min) fail("depth range invalid");
    if (sample_n < 0) fail("sample_n must be >= 0");
    if (!calib.is_valid()) fail("calibration invalid");
}

bool point_in_box(const geo::Vec3& p, const TrackedBox& box, double margin) {
    geo::RigidTransform box_pose = geo::rot_z(box.yaw, box.center);
    geo::Vec3 local = geo::invert(box_pose).apply(p);
    return std::abs(local.x()) <= 0.5 * box.size.x() + margin &&
           std::abs(local.y()) <= 0.5 * box.size.y() + margin &&
           std::abs(local.z()) <= 0.5 * box.size.z() + margin;
}

void Sequence::validate() const {
    auto fail = [](const std::string& msg) { throw InvalidConfig("Sequence: " + msg); };
    size_t n = frames.size();
    if (n < 2) fail("need at least 2 frames");
    if (odom_poses.size() != n || owners.size() != n || gt_boxes.size() != n ||
        boxes.size() != n)
        fail("per-frame array length mismatch");
    if (gt.size() != n - 1 || optflow.size() != n - 1) fail("per-pair array length mismatch");
    for (size_t k = 0; k < n; ++k) {
        const RadarFrame& f = frames[k];
        if (f.size() < 1) fail("empty frame");
        if (f.rrv.size() != f.size() || f.rcs.size() != f.size() ||
            owners[k].size() != f.size())
            fail("per-point array length mismatch");
    }
    for (size_t k = 0; k + 1 < n; ++k) {
        const PairGT& pg = gt[k];
        if (pg.flow.size() != frames[k].size() || pg.moving.size() != frames[k].size())
            fail("pair ground truth length mismatch");
        auto ego_flow = geo::rigid_flow(pg.ego, frames[k].coords);
        for (size_t i = 0; i < pg.flow.size(); ++i) {
            bool moving = (pg.flow[i] - ego_flow[i]).norm() > 0.05;
            if (moving != static_cast<bool>(pg.moving[i]))
                fail("moving mask violates the 5 cm rule");
        }
    }
}

namespace {

struct MoverSpec {
    geo::Vec3 size;
    double speed = 0.0;
    double yaw_rate = 0.0;
};

// point just inside the surface of an axis-aligned centered box, face picked
// by area; the slight inset keeps returns strictly within the reported box
// under later coordinate round trips
geo::Vec3 box_surface_point(Rng& rng, const geo::Vec3& size) {
    double l = size.x(), w = size.y(), h = size.z();
    double a_x = w * h, a_y = l * h, a_z = l * w;  // per face
    double pick = rng.uniform(0.0, 2.0 * (a_x + a_y + a_z));
    double u = rng.uniform(-0.5, 0.5), v = rng.uniform(-0.5, 0.5);
    if (pick < 2.0 * a_x) {
        double s = pick < a_x ? 0.5 : -0.5;
        return geo::Vec3(s * l, u * w, v * h) * 0.995;
    }
    pick -= 2.0 * a_x;
    if (pick < 2.0 * a_y) {
        double s = pick < a_y ? 0.5 : -0.5;
        return geo::Vec3(u * l, s * w, v * h) * 0.995;
    }
    pick -= 2.0 * a_y;
    double s = pick < a_z ? 0.5 : -0.5;
    return geo::Vec3(u * l, v * w, s * h) * 0.995;
}

bool in_image(const geo::Pixel& px, const geo::Calibration& c) {
    return px.u >= 0.0 && px.u < c.width && px.v >= 0.0 && px.v < c.height;
}

// sampled indices: without replacement when enough points, with otherwise
std::vector<size_t> sample_indices(size_t n_points, int n, Rng& rng) {
    std::vector<size_t> idx;
    idx.reserve(n);
    if (n_points >= static_cast<size_t>(n)) {
        std::vector<size_t> all(n_points);
        std::iota(all.begin(), all.end(), size_t{0});
        for (int i = 0; i < n; ++i) {
            size_t j = i + rng.uniform_index(all.size() - i);
            std::swap(all[i], all[j]);
            idx.push_back(all[i]);
        }
    } else {
        for (int i = 0; i < n; ++i) idx.push_back(rng.uniform_index(n_points));
    }
    return idx;
}

}  // namespace

Sequence generate_sequence(const SimConfig& config, std::uint64_t seed) {
    config.validate();

    Sequence seq;
    seq.config = config;
    seq.calib = config.calib;
    seq.dt = config.dt;

    // ego trajectory; one extra pose so the last frame still has a forward
    // motion to derive its radial velocities from
    std::vector<geo::RigidTransform> poses;
    {
        geo::Vec3 pos = geo::Vec3::Zero();
        double yaw = 0.0;
        for (int k = 0; k <= config.n_frames; ++k) {
            poses.push_back(geo::rot_z(yaw, pos));
            pos += poses.back().rotation * geo::Vec3(config.ego_speed * config.dt, 0, 0);
            yaw += config.ego_yaw_rate * config.dt;
        }
    }
    seq.odom_poses.assign(poses.begin(), poses.begin() + config.n_frames);

    // movers: rigid boxes with constant speed and yaw rate
    Rng rng_mover(Rng::derive(seed, "movers"));
    std::vector<MoverSpec> movers(config.n_movers);
    std::vector<std::vector<geo::RigidTransform>> mover_poses(config.n_movers);
    for (int j = 0; j < config.n_movers; ++j) {
        MoverSpec& m = movers[j];
        m.size = geo::Vec3(rng_mover.uniform(3.0, 5.0), rng_mover.uniform(1.6, 2.2),
                           rng_mover.uniform(1.4, 1.8));
        m.speed = rng_mover.uniform(config.mover_speed_min, config.mover_speed_max);
        m.yaw_rate = config.mover_yaw_rate_max > 0.0
                         ? rng_mover.uniform(-config.mover_yaw_rate_max, config.mover_yaw_rate_max)
                         : 0.0;
        // spawn ahead of the ego, heading biased forward so boxes stay visible
        geo::Vec3 center(rng_mover.uniform(10.0, 30.0), rng_mover.uniform(-6.0, 6.0), 0.0);
        double heading = rng_mover.uniform(-0.5, 0.5) + (rng_mover.bernoulli(0.5) ? 0.0 : M_PI);
        geo::Vec3 pos = center;
        double yaw = heading;
        for (int k = 0; k <= config.n_frames; ++k) {
            mover_poses[j].push_back(geo::rot_z(yaw, pos));
            pos += mover_poses[j].back().rotation * geo::Vec3(m.speed * config.dt, 0, 0);
            yaw += m.yaw_rate * config.dt;
        }
    }

    Rng rng_bias(Rng::derive(seed, "rrv_bias"));
    Rng rng_rrv(Rng::derive(seed, "rrv_noise"));
    Rng rng_rcs(Rng::derive(seed, "rcs"));

    for (int k = 0; k < config.n_frames; ++k) {
        geo::RigidTransform radar_from_world = geo::invert(poses[k]);

        // ground-truth boxes in this frame's radar coordinates
        std::vector<TrackedBox> frame_boxes;
        for (int j = 0; j < config.n_movers; ++j) {
            geo::RigidTransform bp = geo::compose(radar_from_world, mover_poses[j][k]);
            TrackedBox box;
            box.id = j;
            box.center = bp.translation;
            box.size = movers[j].size;
            box.yaw = std::atan2(bp.rotation(1, 0), bp.rotation(0, 0));
            box.frame_index = k;
            frame_boxes.push_back(box);
        }
        seq.gt_boxes.push_back(frame_boxes);

        // per-pair transforms, source frame k -> target frame k+1
        geo::RigidTransform t_ego = geo::compose(geo::invert(poses[k + 1]), poses[k]);
        std::vector<geo::RigidTransform> obj(config.n_movers);
        for (int j = 0; j < config.n_movers; ++j)
            obj[j] = geo::compose(
                geo::invert(poses[k + 1]),
                geo::compose(mover_poses[j][k + 1],
                             geo::compose(geo::invert(mover_poses[j][k]), poses[k])));

        // static returns: uniform in the camera frustum, outside every box
        std::vector<geo::Vec3> coords;
        std::vector<int> owner;
        Rng rng_static(Rng::derive(seed, "static/" + std::to_string(k)));
        geo::RigidTransform radar_from_cam = geo::invert(config.calib.cam_from_radar);
        int attempts = 0, max_attempts = 200 * config.points_per_frame + 1000;
        while (static_cast<int>(coords.size()) < config.points_per_frame &&
               attempts++ < max_attempts) {
            double u = rng_static.uniform(0.0, config.calib.width);
            double v = rng_static.uniform(0.0, config.calib.height);
            double z = rng_static.uniform(config.depth_min, config.depth_max);
            geo::Vec3 pc((u - config.calib.cx) / config.calib.fx * z,
                         (v - config.calib.cy) / config.calib.fy * z, z);
            geo::Vec3 p = radar_from_cam.apply(pc);
            if (p.z() < config.z_min || p.z() > config.z_max) continue;
            bool inside = false;
            for (const TrackedBox& b : frame_boxes)
                if (point_in_box(p, b, 0.2)) inside = true;
            if (inside) continue;
            coords.push_back(p);
            owner.push_back(-1);
        }
        if (coords.empty()) throw EmptyFrame("generate_sequence: no static points in FoV");

        // mover returns: surface samples, kept only when visible
        Rng rng_obj(Rng::derive(seed, "mover_pts/" + std::to_string(k)));
        for (int j = 0; j < config.n_movers; ++j) {
            geo::RigidTransform bp = geo::compose(radar_from_world, mover_poses[j][k]);
            for (int s = 0; s < config.mover_points; ++s) {
                geo::Vec3 p = bp.apply(box_surface_point(rng_obj, movers[j].size));
                if (p.z() < config.z_min || p.z() > config.z_max) continue;
                auto px = geo::project(p, config.calib);
                if (!px || !in_image(*px, config.calib)) continue;
                coords.push_back(p);
                owner.push_back(j);
            }
        }

        if (config.sample_n > 0) {
            Rng rng_sub(Rng::derive(seed, "subsample/" + std::to_string(k)));
            auto idx = sample_indices(coords.size(), config.sample_n, rng_sub);
            std::vector<geo::Vec3> c2;
            std::vector<int> o2;
            for (size_t i : idx) {
                c2.push_back(coords[i]);
                o2.push_back(owner[i]);
            }
            coords.swap(c2);
            owner.swap(o2);
        }

        // measurements: radial velocity with one global per-frame bias, RCS
        // as class base + incidence falloff + noise
        double beta = config.rrv_bias_range > 0.0
                          ? rng_bias.uniform(-config.rrv_bias_range, config.rrv_bias_range)
                          : 0.0;
        RadarFrame frame;
        frame.timestamp = k * config.dt;
        frame.coords = coords;
        std::vector<geo::Vec3> flows(coords.size());
        for (size_t i = 0; i < coords.size(); ++i) {
            const geo::RigidTransform& t = owner[i] < 0 ? t_ego : obj[owner[i]];
            flows[i] = t.apply(coords[i]) - coords[i];
            geo::Vec3 u = coords[i].normalized();
            double rrv = u.dot(flows[i]) / config.dt + beta;
            if (config.rrv_noise > 0.0) rrv += rng_rrv.normal(0.0, config.rrv_noise);
            frame.rrv.push_back(rrv);
            double base = owner[i] < 0 ? 5.0 : 15.0;
            frame.rcs.push_back(base - 2.0 * std::abs(u.z()) + rng_rcs.normal(0.0, 0.5));
        }
        seq.frames.push_back(std::move(frame));
        seq.owners.push_back(std::move(owner));

        if (k + 1 < config.n_frames) {
            PairGT pg;
            pg.ego = t_ego;
            pg.object_transforms = obj;
            pg.flow = std::move(flows);
            seq.gt.push_back(std::move(pg));
        }
    }

    // 5 cm rule against the ego-induced flow
    for (size_t k = 0; k < seq.gt.size(); ++k) {
        PairGT& pg = seq.gt[k];
        auto ego_flow = geo::rigid_flow(pg.ego, seq.frames[k].coords);
        pg.moving.resize(pg.flow.size());
        for (size_t i = 0; i < pg.flow.size(); ++i)
            pg.moving[i] = (pg.flow[i] - ego_flow[i]).norm() > 0.05 ? 1 : 0;
    }

    seq.boxes = mot_observe(seq, config.box_dropout, config.box_center_noise,
                            Rng::derive(seed, "mot"));
    seq.optflow = camera_observe(seq, config.flow_noise_px, config.flow_corrupt_frac,
                                 Rng::derive(seed, "camera"));
    seq.validate();
    return seq;
}

std::vector<std::vector<TrackedBox>> mot_observe(const Sequence& seq, double p_dropout,
                                                 double center_noise, std::uint64_t seed) {
    if (p_dropout < 0.0 || p_dropout >= 1.0)
        throw InvalidConfig("mot_observe: p_dropout must be in [0, 1)");
    if (center_noise < 0.0) throw InvalidConfig("mot_observe: center_noise must be >= 0");

    Rng rng(seed);
    std::vector<std::vector<TrackedBox>> out;
    out.reserve(seq.gt_boxes.size());
    for (const auto& frame_boxes : seq.gt_boxes) {
        std::vector<TrackedBox> kept;
        for (const TrackedBox& b : frame_boxes) {
            if (p_dropout > 0.0 && rng.bernoulli(p_dropout)) continue;
            TrackedBox obs = b;
            if (center_noise > 0.0)
                obs.center += geo::Vec3(rng.normal(0.0, center_noise),
                                        rng.normal(0.0, center_noise),
                                        rng.normal(0.0, center_noise));
            kept.push_back(obs);
        }
        out.push_back(std::move(kept));
    }
    return out;
}

std::vector<FlowMap> camera_observe(const Sequence& seq, double flow_noise_px, double corrupt_frac,
                                    std::uint64_t seed) {
    if (flow_noise_px < 0.0) throw InvalidConfig("camera_observe: noise must be >= 0");
    if (corrupt_frac < 0.0 || corrupt_frac > 1.0)
        throw InvalidConfig("camera_observe: corrupt_frac must be in [0, 1]");

    const geo::Calibration& calib = seq.calib;
    geo::RigidTransform radar_from_cam = geo::invert(calib.cam_from_radar);
    Rng rng(seed);
    std::vector<FlowMap> maps;

    size_t n_pairs = seq.frames.size() - 1;
    for (size_t k = 0; k < n_pairs; ++k) {
        const RadarFrame& frame = seq.frames[k];
        FlowMap map(calib.width, calib.height);

        // projected source points with camera depth and per-point transform
        std::vector<geo::Pixel> px;
        std::vector<double> depth;
        std::vector<const geo::RigidTransform*> tf;
        for (size_t i = 0; i < frame.size(); ++i) {
            auto p = geo::project(frame.coords[i], calib);
            if (!p) continue;
            px.push_back(*p);
            depth.push_back(calib.cam_from_radar.apply(frame.coords[i]).z());
            int o = seq.owners[k][i];
            tf.push_back(o < 0 ? &seq.gt[k].ego : &seq.gt[k].object_transforms[o]);
        }

        // dense flow: transport each pixel at the depth of its nearest
        // projected radar point and move it by that point's transform
        for (int v = 0; v < calib.height; ++v)
            for (int u = 0; u < calib.width; ++u) {
                if (px.empty()) break;
                int best = 0;
                double best_d = std::numeric_limits<double>::max();
                for (size_t i = 0; i < px.size(); ++i) {
                    double du = px[i].u - (u + 0.5), dv = px[i].v - (v + 0.5);
                    double d = du * du + dv * dv;
                    if (d < best_d) {
                        best_d = d;
                        best = static_cast<int>(i);
                    }
                }
                double z = depth[best];
                geo::Vec3 pc((u + 0.5 - calib.cx) / calib.fx * z,
                             (v + 0.5 - calib.cy) / calib.fy * z, z);
                geo::Vec3 p = radar_from_cam.apply(pc);
                auto p0 = geo::project(p, calib);
                auto q = geo::project(tf[best]->apply(p), calib);
                if (!p0 || !q) continue;
                // difference of two projections so zero motion maps to
                // exactly zero flow
                map.set(u, v, static_cast<float>(q->u - p0->u),
                        static_cast<float>(q->v - p0->v));
            }

        // exact flow at each projected radar point's pixel
        for (size_t i = 0; i < frame.size(); ++i) {
            auto p = geo::project(frame.coords[i], calib);
            if (!p || !in_image(*p, calib)) continue;
            int u = static_cast<int>(std::lround(p->u));
            int v = static_cast<int>(std::lround(p->v));
            if (u < 0 || u >= calib.width || v < 0 || v >= calib.height) continue;
            auto q = geo::project(frame.coords[i] + seq.gt[k].flow[i], calib);
            if (!q) continue;
            map.set(u, v, static_cast<float>(q->u - p->u), static_cast<float>(q->v - p->v));
        }

        if (flow_noise_px > 0.0 || corrupt_frac > 0.0) {
            for (int v = 0; v < calib.height; ++v)
                for (int u = 0; u < calib.width; ++u) {
                    if (corrupt_frac > 0.0 && rng.bernoulli(corrupt_frac)) {
                        map.set(u, v, static_cast<float>(rng.uniform(-50.0, 50.0)),
                                static_cast<float>(rng.uniform(-50.0, 50.0)));
                        continue;
                    }
                    if (flow_noise_px > 0.0)
                        map.set(u, v,
                                map.u_at(u, v) + static_cast<float>(rng.normal(0.0, flow_noise_px)),
                                map.v_at(u, v) +
                                    static_cast<float>(rng.normal(0.0, flow_noise_px)));
                }
        }
        maps.push_back(std::move(map));
    }
    return maps;
}

RadarFrame fov_filter(const RadarFrame& frame, const geo::Calibration& calib, double z_min,
                      double z_max) {
    RadarFrame out;
    out.timestamp = frame.timestamp;
    for (size_t i = 0; i < frame.size(); ++i) {
        const geo::Vec3& p = frame.coords[i];
        if (p.z() < z_min || p.z() > z_max) continue;
        auto px = geo::project(p, calib);
        if (!px || !in_image(*px, calib)) continue;
        out.coords.push_back(p);
        out.rrv.push_back(frame.rrv[i]);
        out.rcs.push_back(frame.rcs[i]);
    }
    if (out.coords.empty()) throw EmptyFrame("fov_filter: no points survive");
    return out;
}

RadarFrame sample_points(const RadarFrame& frame, int n, std::uint64_t seed) {
    if (frame.size() == 0) throw EmptyFrame("sample_points: empty frame");
    if (n < 1) throw InvalidConfig("sample_points: n must be >= 1");
    Rng rng(seed);
    auto idx = sample_indices(frame.size(), n, rng);
    RadarFrame out;
    out.timestamp = frame.timestamp;
    for (size_t i : idx) {
        out.coords.push_back(frame.coords[i]);
        out.rrv.push_back(frame.rrv[i]);
        out.rcs.push_back(frame.rcs[i]);
    }
    return out;
}

}  // namespace cmflow::sim
