#include "geometry.hpp"

#include <Eigen/Dense>
#include <Eigen/SVD>
#include <algorithm>
#include <cmath>
#include <limits>
#include <unordered_map>

namespace cmflow::geo {

bool RigidTransform::is_valid(double tol) const {
    Mat3 e = rotation.transpose() * rotation - Mat3::Identity();
    if (e.cwiseAbs().maxCoeff() > tol) return false;
    if (std::abs(rotation.determinant() - 1.0) > tol) return false;
    return translation.allFinite();
}

RigidTransform compose(const RigidTransform& a, const RigidTransform& b) {
    RigidTransform out;
    out.rotation = a.rotation * b.rotation;
    out.translation = a.rotation * b.translation + a.translation;
    return out;
}

RigidTransform invert(const RigidTransform& t) {
    RigidTransform out;
    out.rotation = t.rotation.transpose();
    out.translation = -(out.rotation * t.translation);
    return out;
}

RigidTransform rot_z(double angle_rad, const Vec3& translation) {
    RigidTransform out;
    double c = std::cos(angle_rad), s = std::sin(angle_rad);
    out.rotation << c, -s, 0, s, c, 0, 0, 0, 1;
    out.translation = translation;
    return out;
}

std::vector<Vec3> rigid_flow(const RigidTransform& t, const std::vector<Vec3>& coords) {
    std::vector<Vec3> flow(coords.size());
    for (size_t i = 0; i < coords.size(); ++i) flow[i] = t.apply(coords[i]) - coords[i];
    return flow;
}

RigidTransform weighted_kabsch(const std::vector<Vec3>& src, const std::vector<Vec3>& dst,
                               const std::vector<double>& weights) {
    const size_t n = src.size();
    if (n < 3 || dst.size() != n || weights.size() != n)
        throw std::invalid_argument("weighted_kabsch: need N >= 3 matched points and weights");

    double wsum = 0.0;
    for (double w : weights) {
        if (w < 0.0 || !std::isfinite(w))
            throw std::invalid_argument("weighted_kabsch: weights must be finite and nonnegative");
        wsum += w;
    }
    if (wsum <= 0.0) throw std::invalid_argument("weighted_kabsch: weights must sum > 0");

    Vec3 cs = Vec3::Zero(), cd = Vec3::Zero();
    for (size_t i = 0; i < n; ++i) {
        cs += weights[i] * src[i];
        cd += weights[i] * dst[i];
    }
    cs /= wsum;
    cd /= wsum;

    Mat3 h = Mat3::Zero();
    Mat3 scatter = Mat3::Zero();  // weighted source scatter, for rank check
    for (size_t i = 0; i < n; ++i) {
        Vec3 a = src[i] - cs;
        Vec3 b = dst[i] - cd;
        double w = weights[i] / wsum;
        h += w * a * b.transpose();
        scatter += w * a * a.transpose();
    }

    Eigen::SelfAdjointEigenSolver<Mat3> es(scatter);
    Vec3 ev = es.eigenvalues();  // ascending
    // coincident (all ~0) or collinear (only one nonzero direction)
    double scale = std::max(ev(2), 1.0);
    if (ev(1) <= 1e-12 * scale)
        throw DegenerateGeometry("weighted_kabsch: effective point set is rank-deficient");

    Eigen::JacobiSVD<Mat3> svd(h, Eigen::ComputeFullU | Eigen::ComputeFullV);
    Mat3 u = svd.matrixU();
    Mat3 v = svd.matrixV();
    double d = (v * u.transpose()).determinant() < 0.0 ? -1.0 : 1.0;
    Mat3 corr = Mat3::Identity();
    corr(2, 2) = d;

    RigidTransform out;
    out.rotation = v * corr * u.transpose();
    out.translation = cd - out.rotation * cs;
    return out;
}

std::optional<Pixel> project(const Vec3& point, const Calibration& calib) {
    Vec3 pc = calib.cam_from_radar.apply(point);
    if (pc.z() <= 0.0) return std::nullopt;
    return Pixel{calib.fx * pc.x() / pc.z() + calib.cx, calib.fy * pc.y() / pc.z() + calib.cy};
}

Ray pixel_ray(const Pixel& px, const Calibration& calib) {
    RigidTransform radar_from_cam = invert(calib.cam_from_radar);
    Vec3 dir_cam((px.u - calib.cx) / calib.fx, (px.v - calib.cy) / calib.fy, 1.0);
    Ray ray;
    ray.origin = radar_from_cam.translation;
    ray.direction = (radar_from_cam.rotation * dir_cam).normalized();
    return ray;
}

double point_to_ray_distance(const Vec3& point, const Ray& ray) {
    Vec3 rel = point - ray.origin;
    double s = rel.dot(ray.direction);
    if (s <= 0.0) return rel.norm();
    return (rel - s * ray.direction).norm();
}

std::pair<double, double> rte_rae(const RigidTransform& estimate, const RigidTransform& truth) {
    double rte = (estimate.translation - truth.translation).norm();
    Mat3 dr = estimate.rotation * truth.rotation.transpose();
    double c = std::clamp((dr.trace() - 1.0) * 0.5, -1.0, 1.0);
    // sin(angle) from the skew part; atan2 keeps precision near 0 and pi
    // where acos of the trace alone loses ~8 digits
    Vec3 skew(dr(2, 1) - dr(1, 2), dr(0, 2) - dr(2, 0), dr(1, 0) - dr(0, 1));
    double s = 0.5 * skew.norm();
    double rae = std::atan2(s, c) * 180.0 / M_PI;
    return {rte, rae};
}

namespace {

// Uniform hash grid over the destination cloud for nearest-neighbor lookups.
class PointGrid {
public:
    PointGrid(const std::vector<Vec3>& pts, double cell) : pts_(pts), cell_(cell) {
        for (size_t i = 0; i < pts.size(); ++i) cells_[key(pts[i])].push_back(static_cast<int>(i));
    }

    int nearest(const Vec3& q) const {
        Eigen::Vector3i base = coord(q);
        int best = -1;
        double best_d = std::numeric_limits<double>::max();
        for (int ring = 0; ring <= max_ring_; ++ring) {
            // any point in a cell at Chebyshev ring r is at least (r-1)*cell away
            if (best >= 0 && static_cast<double>(ring - 1) * cell_ > best_d) break;
            for (int dx = -ring; dx <= ring; ++dx)
                for (int dy = -ring; dy <= ring; ++dy)
                    for (int dz = -ring; dz <= ring; ++dz) {
                        if (std::max({std::abs(dx), std::abs(dy), std::abs(dz)}) != ring) continue;
                        auto it = cells_.find(pack(base + Eigen::Vector3i(dx, dy, dz)));
                        if (it == cells_.end()) continue;
                        for (int i : it->second) {
                            double d = (pts_[i] - q).norm();
                            if (d < best_d) {
                                best_d = d;
                                best = i;
                            }
                        }
                    }
        }
        if (best < 0) {  // query far outside the grid: fall back to a scan
            for (size_t i = 0; i < pts_.size(); ++i) {
                double d = (pts_[i] - q).norm();
                if (d < best_d) {
                    best_d = d;
                    best = static_cast<int>(i);
                }
            }
        }
        return best;
    }

private:
    Eigen::Vector3i coord(const Vec3& p) const {
        return Eigen::Vector3i(static_cast<int>(std::floor(p.x() / cell_)),
                               static_cast<int>(std::floor(p.y() / cell_)),
                               static_cast<int>(std::floor(p.z() / cell_)));
    }
    static std::int64_t pack(const Eigen::Vector3i& c) {
        auto z = [](int v) { return static_cast<std::int64_t>(v) & 0x1fffff; };
        return (z(c.x()) << 42) | (z(c.y()) << 21) | z(c.z());
    }
    std::int64_t key(const Vec3& p) const { return pack(coord(p)); }

    const std::vector<Vec3>& pts_;
    double cell_;
    int max_ring_ = 64;
    std::unordered_map<std::int64_t, std::vector<int>> cells_;
};

double grid_cell_size(const std::vector<Vec3>& pts) {
    Vec3 lo = pts[0], hi = pts[0];
    for (const Vec3& p : pts) {
        lo = lo.cwiseMin(p);
        hi = hi.cwiseMax(p);
    }
    double extent = std::max((hi - lo).maxCoeff(), 1e-6);
    return std::max(extent / std::cbrt(static_cast<double>(pts.size())), 1e-3);
}

}  // namespace

std::vector<int> nearest_neighbors(const std::vector<Vec3>& queries, const std::vector<Vec3>& pts) {
    if (pts.empty()) throw std::invalid_argument("nearest_neighbors: empty point set");
    PointGrid grid(pts, grid_cell_size(pts));
    std::vector<int> out(queries.size());
    for (size_t i = 0; i < queries.size(); ++i) out[i] = grid.nearest(queries[i]);
    return out;
}

RigidTransform icp_ego(const std::vector<Vec3>& src, const std::vector<Vec3>& dst, int max_iter,
                       double tol) {
    if (src.size() < 3 || dst.size() < 3)
        throw std::invalid_argument("icp_ego: need at least 3 points in each cloud");

    PointGrid grid(dst, grid_cell_size(dst));

    RigidTransform t = RigidTransform::identity();
    std::vector<double> w(src.size(), 1.0);
    double prev_residual = std::numeric_limits<double>::max();
    for (int iter = 0; iter < max_iter; ++iter) {
        std::vector<Vec3> matched(src.size());
        double residual = 0.0;
        for (size_t i = 0; i < src.size(); ++i) {
            Vec3 q = t.apply(src[i]);
            int j = grid.nearest(q);
            matched[i] = dst[j];
            residual += (q - matched[i]).norm();
        }
        residual /= static_cast<double>(src.size());
        t = weighted_kabsch(src, matched, w);
        if (std::abs(prev_residual - residual) < tol) break;
        prev_residual = residual;
    }
    return t;
}

}  // namespace cmflow::geo
