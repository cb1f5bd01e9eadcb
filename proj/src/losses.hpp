#pragma once

#include <optional>
#include <vector>

#include "diffcore.hpp"
#include "geometry.hpp"
#include "network.hpp"
#include "simworld.hpp"
#include "supervision.hpp"

namespace cmflow::loss {

// mean distance between the per-point motions induced by the estimated and
// target transforms
ad::Value ego_loss(ad::Tape& tape, ad::Value ego_rt, const geo::RigidTransform& target,
                   const std::vector<geo::Vec3>& coords);

// class-balanced binary cross-entropy; a class with no members is skipped.
// Predictions are clamped to [1e-7, 1-1e-7].
ad::Value seg_loss(ad::Tape& tape, ad::Value pred, const std::vector<char>& labels);

// mean flow error over distilled-moving points carrying a box-derived flow
ad::Value mot_loss(ad::Tape& tape, ad::Value flow,
                   const std::vector<std::optional<geo::Vec3>>& f_fg,
                   const std::vector<char>& s_l);

// mean point-to-ray distance of warped moving points against the ray of
// their optically displaced pixel; distances below the deadzone contribute
// zero (value and gradient)
ad::Value opt_loss(ad::Tape& tape, ad::Value flow,
                   const std::vector<std::optional<sup::Vec2>>& w_opt,
                   const std::vector<char>& s_fused, const std::vector<geo::Vec3>& coords,
                   const geo::Calibration& calib, double deadzone = 0.25);

struct SelfWeights {
    double chamfer = 1.0;
    double smooth = 1.0;
    double radial = 1.0;
    int k = 8;  // smoothness neighborhood size
};

// label-free objective: one-sided Chamfer of the warped cloud to the target,
// spatial smoothness of the flow field, and radial consistency against the
// measured radial velocities
ad::Value self_loss(ad::Tape& tape, ad::Value flow, const std::vector<geo::Vec3>& src,
                    const std::vector<geo::Vec3>& tgt, const std::vector<double>& rrv, double dt,
                    const SelfWeights& w = {});

struct LossOptions {
    double lambda_opt = 0.1;
    double deadzone = 0.25;
    SelfWeights self_weights;
    // modality switches; a disabled branch contributes exactly zero
    bool use_odometry = true;
    bool use_labels = true;
    bool use_camera = true;
    bool use_self = true;
};

struct LossValues {
    ad::Value total;
    ad::Value ego, seg, mot, opt, self_;
};

struct LossReport {
    double total = 0, ego = 0, seg = 0, mot = 0, opt = 0, self_ = 0;
    double lambda_opt = 0.1;
};

// composition over one frame pair: ego + seg + (mot + lambda_opt*opt + self)
LossValues total_loss(ad::Tape& tape, const net::ForwardValues& out, const sim::RadarFrame& src,
                      const sim::RadarFrame& tgt, const sup::LabelBundle& bundle,
                      const geo::Calibration& calib, double dt, const LossOptions& opts = {});

LossReport to_report(const ad::Tape& tape, const LossValues& v, double lambda_opt = 0.1);

}  // namespace cmflow::loss
