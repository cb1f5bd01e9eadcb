#pragma once

#include <Eigen/Core>
#include <optional>
#include <stdexcept>
#include <utility>
#include <vector>

namespace cmflow::geo {

using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;

// Thrown when a point set is rank-deficient (coincident or collinear) so
// that no unique rigid alignment exists.
struct DegenerateGeometry : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct RigidTransform {
    Mat3 rotation = Mat3::Identity();
    Vec3 translation = Vec3::Zero();

    static RigidTransform identity() { return {}; }

    Vec3 apply(const Vec3& p) const { return rotation * p + translation; }

    // rotation orthonormal with det +1, within tol elementwise
    bool is_valid(double tol = 1e-9) const;
};

RigidTransform compose(const RigidTransform& a, const RigidTransform& b);
RigidTransform invert(const RigidTransform& t);
RigidTransform rot_z(double angle_rad, const Vec3& translation = Vec3::Zero());

// per-point motion induced by a rigid transform: f_i = R c_i + t - c_i
std::vector<Vec3> rigid_flow(const RigidTransform& t, const std::vector<Vec3>& coords);

// Weighted least-squares rigid alignment: argmin_T sum_i w_i |R src_i + t - dst_i|^2.
// Weights are normalized internally; throws DegenerateGeometry when the
// effective (nonzero-weight) source set is coincident or collinear.
RigidTransform weighted_kabsch(const std::vector<Vec3>& src, const std::vector<Vec3>& dst,
                               const std::vector<double>& weights);

struct Calibration {
    double fx = 0, fy = 0;
    double cx = 0, cy = 0;
    int width = 0, height = 0;
    RigidTransform cam_from_radar;

    bool is_valid() const {
        return fx > 0 && fy > 0 && cx >= 0 && cx < width && cy >= 0 && cy < height;
    }
};

struct Pixel {
    double u = 0, v = 0;
};

// Pinhole projection of a radar-frame point; nullopt when the point lies at
// or behind the camera plane (classified outcome, not an error).
std::optional<Pixel> project(const Vec3& point, const Calibration& calib);

struct Ray {
    Vec3 origin;
    Vec3 direction;  // unit
};

// Back-projected ray through the camera center and the pixel, expressed in
// the radar frame.
Ray pixel_ray(const Pixel& px, const Calibration& calib);

// Minimal distance from a point to the half-line origin + s*direction, s >= 0.
double point_to_ray_distance(const Vec3& point, const Ray& ray);

// (RTE [m], RAE [deg])
std::pair<double, double> rte_rae(const RigidTransform& estimate, const RigidTransform& truth);

// Grid-accelerated index of the nearest point in pts for each query.
std::vector<int> nearest_neighbors(const std::vector<Vec3>& queries, const std::vector<Vec3>& pts);

// Point-to-point ICP with uniform-weight Kabsch updates. Nearest neighbors
// via a uniform spatial grid.
RigidTransform icp_ego(const std::vector<Vec3>& src, const std::vector<Vec3>& dst, int max_iter,
                       double tol);

}  // namespace cmflow::geo
