#include "supervision.hpp"

#include <algorithm>
#include <cmath>
#include <unordered_map>

namespace cmflow::sup {

void LabelBundle::validate() const {
    size_t n = s_fused.size();
    if (rigid_flow_r.size() != n || s_v.size() != n || s_fg.size() != n || f_fg.size() != n ||
        s_l.size() != n || w_opt.size() != n)
        throw LabelInvariantViolation("LabelBundle: length mismatch");
    for (size_t i = 0; i < n; ++i) {
        if (s_l[i] && !s_fg[i])
            throw LabelInvariantViolation("LabelBundle: distilled point not foreground");
        if (s_l[i] && !s_fused[i])
            throw LabelInvariantViolation("LabelBundle: distilled point not fused moving");
        if (f_fg[i].has_value() && !s_fg[i])
            throw LabelInvariantViolation("LabelBundle: box flow on background point");
    }
}

geo::RigidTransform ego_pseudo_transform(const geo::RigidTransform& odom_prev,
                                         const geo::RigidTransform& odom_next) {
    // O maps target-frame static coordinates back to the source frame; its
    // inverse moves source points forward in time
    geo::RigidTransform o = geo::compose(geo::invert(odom_prev), odom_next);
    return geo::invert(o);
}

RrvLabel rrv_motion_label(const sim::RadarFrame& frame, const geo::RigidTransform& t, double dt,
                          double eta_v, bool bias_aware) {
    if (dt <= 0.0) throw std::invalid_argument("rrv_motion_label: dt must be positive");
    if (eta_v <= 0.0) throw std::invalid_argument("rrv_motion_label: eta_v must be positive");

    size_t n = frame.size();
    RrvLabel out;
    out.delta_v.resize(n);
    out.s_v.resize(n);
    std::vector<double> residual(n);  // signed ego-compensated radial velocity
    for (size_t i = 0; i < n; ++i) {
        const geo::Vec3& c = frame.coords[i];
        double range = c.norm();
        if (range == 0.0) throw ZeroRangePoint("rrv_motion_label: point at the sensor origin");
        geo::Vec3 u = c / range;
        double ego_rrv = u.dot(t.apply(c) - c) / dt;
        residual[i] = frame.rrv[i] - ego_rrv;
        out.delta_v[i] = std::abs(residual[i]);
    }

    // global bias estimate: mean of the residuals near the median, so that
    // moving points do not drag the center away from the static population
    double center = 0.0;
    if (bias_aware && n > 0) {
        std::vector<double> sorted = residual;
        std::nth_element(sorted.begin(), sorted.begin() + n / 2, sorted.end());
        double med = sorted[n / 2];
        double sum = 0.0;
        size_t cnt = 0;
        for (double r : residual) {
            if (std::abs(r - med) > eta_v) continue;
            sum += r;
            ++cnt;
        }
        center = cnt > 0 ? sum / static_cast<double>(cnt) : med;
    }
    for (size_t i = 0; i < n; ++i)
        out.s_v[i] = (bias_aware ? std::abs(residual[i] - center) : out.delta_v[i]) > eta_v;
    return out;
}

MotLabel mot_labels(const sim::RadarFrame& frame, const std::vector<sim::TrackedBox>& boxes_prev,
                    const std::vector<sim::TrackedBox>& boxes_next, double margin) {
    std::unordered_map<int, const sim::TrackedBox*> next_by_id;
    for (const sim::TrackedBox& b : boxes_next) next_by_id[b.id] = &b;

    MotLabel out;
    out.s_fg.assign(frame.size(), 0);
    out.f_fg.assign(frame.size(), std::nullopt);
    for (const sim::TrackedBox& b : boxes_prev) {
        auto it = next_by_id.find(b.id);
        bool matched = it != next_by_id.end();
        geo::RigidTransform obj;
        if (matched) {
            geo::RigidTransform prev_pose = geo::rot_z(b.yaw, b.center);
            geo::RigidTransform next_pose = geo::rot_z(it->second->yaw, it->second->center);
            obj = geo::compose(next_pose, geo::invert(prev_pose));
        }
        for (size_t i = 0; i < frame.size(); ++i) {
            if (!sim::point_in_box(frame.coords[i], b, margin)) continue;
            out.s_fg[i] = 1;
            if (matched) out.f_fg[i] = obj.apply(frame.coords[i]) - frame.coords[i];
        }
    }
    return out;
}

std::vector<char> distill_moving(const std::vector<std::optional<geo::Vec3>>& f_fg,
                                 const std::vector<char>& s_fg,
                                 const std::vector<geo::Vec3>& rigid_flow_r, double eta_l) {
    if (eta_l <= 0.0) throw std::invalid_argument("distill_moving: eta_l must be positive");
    if (f_fg.size() != s_fg.size() || f_fg.size() != rigid_flow_r.size())
        throw std::invalid_argument("distill_moving: length mismatch");
    std::vector<char> s_l(f_fg.size(), 0);
    for (size_t i = 0; i < f_fg.size(); ++i)
        s_l[i] = s_fg[i] && f_fg[i].has_value() && (*f_fg[i] - rigid_flow_r[i]).norm() > eta_l;
    return s_l;
}

std::vector<char> fuse_labels(const std::vector<char>& s_l, const std::vector<char>& s_v) {
    if (s_l.size() != s_v.size()) throw std::invalid_argument("fuse_labels: length mismatch");
    std::vector<char> out(s_l.size());
    for (size_t i = 0; i < s_l.size(); ++i) out[i] = s_l[i] || s_v[i];
    return out;
}

std::vector<std::optional<Vec2>> optical_labels(const sim::RadarFrame& frame,
                                                const sim::FlowMap& flow_map,
                                                const geo::Calibration& calib) {
    std::vector<std::optional<Vec2>> out(frame.size());
    for (size_t i = 0; i < frame.size(); ++i) {
        auto px = geo::project(frame.coords[i], calib);
        if (!px) continue;
        int u = static_cast<int>(std::lround(px->u));
        int v = static_cast<int>(std::lround(px->v));
        if (u < 0 || u >= flow_map.width || v < 0 || v >= flow_map.height) continue;
        out[i] = Vec2(flow_map.u_at(u, v), flow_map.v_at(u, v));
    }
    return out;
}

LabelBundle make_bundle(const sim::RadarFrame& frame, const geo::RigidTransform& odom_prev,
                        const geo::RigidTransform& odom_next,
                        const std::vector<sim::TrackedBox>& boxes_prev,
                        const std::vector<sim::TrackedBox>& boxes_next,
                        const sim::FlowMap& flow_map, const geo::Calibration& calib, double dt,
                        const LabelOptions& opts) {
    LabelBundle b;
    b.pseudo_T = ego_pseudo_transform(odom_prev, odom_next);
    b.rigid_flow_r = geo::rigid_flow(b.pseudo_T, frame.coords);
    RrvLabel rrv = rrv_motion_label(frame, b.pseudo_T, dt, opts.eta_v, opts.bias_aware);
    b.s_v = std::move(rrv.s_v);
    MotLabel mot = mot_labels(frame, boxes_prev, boxes_next, opts.box_margin);
    b.s_fg = std::move(mot.s_fg);
    b.f_fg = std::move(mot.f_fg);
    b.s_l = distill_moving(b.f_fg, b.s_fg, b.rigid_flow_r, opts.eta_l);
    b.s_fused = fuse_labels(b.s_l, b.s_v);
    b.w_opt = optical_labels(frame, flow_map, calib);
    b.validate();
    return b;
}

}  // namespace cmflow::sup
