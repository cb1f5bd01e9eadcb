#pragma once

#include <optional>
#include <vector>

#include "geometry.hpp"

namespace cmflow::met {

struct FlowMetrics {
    double epe = 0;    // mean endpoint error, m
    double acc_s = 0;  // strict accuracy: error < 0.05 m or < 5% relative
    double acc_r = 0;  // relaxed accuracy: error < 0.1 m or < 10% relative
    double rne = 0;    // epe / resolution_ratio
    std::optional<double> mrne;  // rne over moving points (absent when none)
    std::optional<double> srne;  // rne over static points (absent when none)
};

FlowMetrics flow_metrics(const std::vector<geo::Vec3>& pred, const std::vector<geo::Vec3>& gt,
                         const std::vector<char>& moving_gt, double resolution_ratio = 1.0);

struct SegIoU {
    double miou = 0;
    double iou_moving = 0;
    double iou_static = 0;
};

// per-class IoU averaged over the two classes; a class absent from both
// masks scores 1 by convention
SegIoU seg_miou(const std::vector<char>& pred, const std::vector<char>& gt);

// chained ego poses from per-pair point-motion transforms: pose_0 = I,
// pose_k = pose_{k-1} * inverse(T_k)
std::vector<geo::RigidTransform> accumulate_odometry(
    const std::vector<geo::RigidTransform>& pair_transforms);

// per-pose absolute translation error between two equal-length trajectories
std::vector<double> trajectory_ate(const std::vector<geo::RigidTransform>& estimate,
                                   const std::vector<geo::RigidTransform>& truth);

}  // namespace cmflow::met
