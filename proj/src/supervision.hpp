#pragma once

#include <Eigen/Core>
#include <optional>
#include <stdexcept>
#include <vector>

#include "geometry.hpp"
#include "simworld.hpp"

namespace cmflow::sup {

struct ZeroRangePoint : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct LabelInvariantViolation : std::runtime_error {
    using std::runtime_error::runtime_error;
};

using Vec2 = Eigen::Vector2d;

// Pseudo labels for one frame pair, all indexed by the source frame points.
struct LabelBundle {
    geo::RigidTransform pseudo_T;          // static-point motion transform
    std::vector<geo::Vec3> rigid_flow_r;   // flow induced by pseudo_T
    std::vector<char> s_v;                 // radial-velocity motion label
    std::vector<char> s_fg;                // box foreground label
    std::vector<std::optional<geo::Vec3>> f_fg;  // per-point box-derived flow
    std::vector<char> s_l;                 // distilled moving label
    std::vector<char> s_fused;             // final motion label
    std::vector<std::optional<Vec2>> w_opt;  // optical-flow anchor, px

    size_t size() const { return s_fused.size(); }
    // s_l implies s_fg and s_fused; f_fg only on foreground points
    void validate() const;
};

// Transform whose induced flow moves a static source point to its position
// in the target frame, derived from the two odometer poses.
geo::RigidTransform ego_pseudo_transform(const geo::RigidTransform& odom_prev,
                                         const geo::RigidTransform& odom_next);

struct RrvLabel {
    std::vector<char> s_v;
    std::vector<double> delta_v;  // |measured rrv - ego-induced rrv|
};

// Motion from the ego-compensated radial velocity. The bias-aware variant
// thresholds the deviation from the frame mean, neutralizing a global
// radial-velocity offset; the direct variant thresholds the residual itself.
RrvLabel rrv_motion_label(const sim::RadarFrame& frame, const geo::RigidTransform& t, double dt,
                          double eta_v = 0.3, bool bias_aware = true);

struct MotLabel {
    std::vector<char> s_fg;
    std::vector<std::optional<geo::Vec3>> f_fg;
};

// Foreground membership from oriented boxes; per-object flow from the rigid
// transform between matched (center, yaw) pairs. Boxes without a match in
// the next frame mark foreground but provide no flow.
MotLabel mot_labels(const sim::RadarFrame& frame, const std::vector<sim::TrackedBox>& boxes_prev,
                    const std::vector<sim::TrackedBox>& boxes_next, double margin = 0.0);

// Foreground points whose box flow deviates from the static-point flow by
// more than eta_l (strictly) are distilled as moving.
std::vector<char> distill_moving(const std::vector<std::optional<geo::Vec3>>& f_fg,
                                 const std::vector<char>& s_fg,
                                 const std::vector<geo::Vec3>& rigid_flow_r, double eta_l = 0.05);

std::vector<char> fuse_labels(const std::vector<char>& s_l, const std::vector<char>& s_v);

// Optical flow at the nearest pixel of each projected point; absent for
// points behind the camera or off the image.
std::vector<std::optional<Vec2>> optical_labels(const sim::RadarFrame& frame,
                                                const sim::FlowMap& flow_map,
                                                const geo::Calibration& calib);

struct LabelOptions {
    double eta_v = 0.3;
    double eta_l = 0.05;
    double box_margin = 0.0;
    bool bias_aware = true;
};

LabelBundle make_bundle(const sim::RadarFrame& frame, const geo::RigidTransform& odom_prev,
                        const geo::RigidTransform& odom_next,
                        const std::vector<sim::TrackedBox>& boxes_prev,
                        const std::vector<sim::TrackedBox>& boxes_next,
                        const sim::FlowMap& flow_map, const geo::Calibration& calib, double dt,
                        const LabelOptions& opts = {});

}  // namespace cmflow::sup
