#include "metrics.hpp"

#include <stdexcept>

namespace cmflow::met {

FlowMetrics flow_metrics(const std::vector<geo::Vec3>& pred, const std::vector<geo::Vec3>& gt,
                         const std::vector<char>& moving_gt, double resolution_ratio) {
    if (pred.size() != gt.size() || pred.size() != moving_gt.size() || pred.empty())
        throw std::invalid_argument("flow_metrics: mismatched or empty inputs");
    if (resolution_ratio <= 0) throw std::invalid_argument("flow_metrics: ratio must be positive");

    size_t n = pred.size();
    double sum = 0, sum_m = 0, sum_s = 0;
    size_t n_m = 0, n_s = 0, hit_s = 0, hit_r = 0;
    for (size_t i = 0; i < n; ++i) {
        double err = (pred[i] - gt[i]).norm();
        double mag = gt[i].norm();
        sum += err;
        if (moving_gt[i]) {
            sum_m += err;
            ++n_m;
        } else {
            sum_s += err;
            ++n_s;
        }
        bool strict = err < 0.05 || (mag > 0 && err / mag < 0.05);
        bool relaxed = err < 0.1 || (mag > 0 && err / mag < 0.1);
        hit_s += strict;
        hit_r += relaxed;
    }
    FlowMetrics m;
    m.epe = sum / (double)n;
    m.acc_s = (double)hit_s / (double)n;
    m.acc_r = (double)hit_r / (double)n;
    m.rne = m.epe / resolution_ratio;
    if (n_m > 0) m.mrne = sum_m / (double)n_m / resolution_ratio;
    if (n_s > 0) m.srne = sum_s / (double)n_s / resolution_ratio;
    return m;
}

SegIoU seg_miou(const std::vector<char>& pred, const std::vector<char>& gt) {
    if (pred.size() != gt.size()) throw std::invalid_argument("seg_miou: length mismatch");
    size_t inter_m = 0, union_m = 0, inter_s = 0, union_s = 0;
    for (size_t i = 0; i < pred.size(); ++i) {
        bool p = pred[i], g = gt[i];
        inter_m += p && g;
        union_m += p || g;
        inter_s += !p && !g;
        union_s += !p || !g;
    }
    SegIoU r;
    r.iou_moving = union_m == 0 ? 1.0 : (double)inter_m / (double)union_m;
    r.iou_static = union_s == 0 ? 1.0 : (double)inter_s / (double)union_s;
    r.miou = 0.5 * (r.iou_moving + r.iou_static);
    return r;
}

std::vector<geo::RigidTransform> accumulate_odometry(
    const std::vector<geo::RigidTransform>& pair_transforms) {
    if (pair_transforms.empty())
        throw std::invalid_argument("accumulate_odometry: empty transform list");
    std::vector<geo::RigidTransform> poses;
    poses.push_back(geo::RigidTransform::identity());
    for (const auto& t : pair_transforms)
        poses.push_back(geo::compose(poses.back(), geo::invert(t)));
    return poses;
}

std::vector<double> trajectory_ate(const std::vector<geo::RigidTransform>& estimate,
                                   const std::vector<geo::RigidTransform>& truth) {
    if (estimate.size() != truth.size())
        throw std::invalid_argument("trajectory_ate: length mismatch");
    std::vector<double> ate;
    ate.reserve(estimate.size());
    for (size_t i = 0; i < estimate.size(); ++i)
        ate.push_back((estimate[i].translation - truth[i].translation).norm());
    return ate;
}

}  // namespace cmflow::met
