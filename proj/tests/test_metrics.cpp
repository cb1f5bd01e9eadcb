#include "doctest.h"

#include <cmath>

#include "metrics.hpp"
#include "rng.hpp"
#include "simworld.hpp"

using namespace cmflow;
using namespace cmflow::met;

namespace {

std::vector<geo::Vec3> random_flow(Rng& rng, int n, double lo, double hi) {
    std::vector<geo::Vec3> f;
    for (int i = 0; i < n; ++i)
        f.push_back(geo::Vec3(rng.uniform(lo, hi), rng.uniform(lo, hi), rng.uniform(lo, hi)));
    return f;
}

}  // namespace

TEST_CASE("flow_metrics") {
    Rng rng(3);

    SUBCASE("perfect prediction") {
        auto gt = random_flow(rng, 20, -2, 2);
        std::vector<char> moving(20, 0);
        for (int i = 0; i < 7; ++i) moving[i] = 1;
        FlowMetrics m = flow_metrics(gt, gt, moving);
        CHECK(m.epe == 0.0);
        CHECK(m.acc_s == 1.0);
        CHECK(m.acc_r == 1.0);
        CHECK(m.rne == 0.0);
        REQUIRE(m.mrne.has_value());
        REQUIRE(m.srne.has_value());
        CHECK(*m.mrne == 0.0);
        CHECK(*m.srne == 0.0);
    }
    SUBCASE("relative branch rescues large-magnitude flow") {
        // 0.07 m error on 10 m flow: fails the 0.05 m absolute test but
        // passes 0.7% relative
        std::vector<geo::Vec3> gt(8, geo::Vec3(10, 0, 0));
        std::vector<geo::Vec3> pred(8, geo::Vec3(10.07, 0, 0));
        std::vector<char> moving(8, 1);
        FlowMetrics m = flow_metrics(pred, gt, moving);
        CHECK(std::abs(m.epe - 0.07) < 1e-12);
        CHECK(m.acc_s == 1.0);
        CHECK(m.acc_r == 1.0);
    }
    SUBCASE("zero-magnitude ground truth skips the relative branch") {
        std::vector<geo::Vec3> gt(4, geo::Vec3(0, 0, 0));
        std::vector<geo::Vec3> pred(4, geo::Vec3(0.07, 0, 0));
        std::vector<char> moving(4, 0);
        FlowMetrics m = flow_metrics(pred, gt, moving);
        CHECK(m.acc_s == 0.0);  // 0.07 >= 0.05 and no relative rescue
        CHECK(m.acc_r == 1.0);  // 0.07 < 0.1
        CHECK_FALSE(m.mrne.has_value());
    }
    SUBCASE("resolution ratio divides exactly") {
        auto gt = random_flow(rng, 10, -1, 1);
        auto pred = random_flow(rng, 10, -1, 1);
        std::vector<char> moving(10, 0);
        FlowMetrics a = flow_metrics(pred, gt, moving, 1.0);
        FlowMetrics b = flow_metrics(pred, gt, moving, 2.0);
        CHECK(b.rne == a.epe / 2.0);
        CHECK(b.epe == a.epe);
        CHECK(*b.srne == *a.srne / 2.0);
    }
    SUBCASE("permutation invariance") {
        int n = 25;
        auto gt = random_flow(rng, n, -2, 2);
        auto pred = random_flow(rng, n, -2, 2);
        std::vector<char> moving(n);
        for (int i = 0; i < n; ++i) moving[i] = rng.uniform(0, 1) < 0.4;
        FlowMetrics a = flow_metrics(pred, gt, moving);
        std::vector<int> perm(n);
        for (int i = 0; i < n; ++i) perm[i] = (i * 7 + 3) % n;
        std::vector<geo::Vec3> gt2(n), pred2(n);
        std::vector<char> mv2(n);
        for (int i = 0; i < n; ++i) {
            gt2[i] = gt[perm[i]];
            pred2[i] = pred[perm[i]];
            mv2[i] = moving[perm[i]];
        }
        FlowMetrics b = flow_metrics(pred2, gt2, mv2);
        CHECK(std::abs(a.epe - b.epe) < 1e-12);
        CHECK(a.acc_s == b.acc_s);
        CHECK(a.acc_r == b.acc_r);
        CHECK(std::abs(*a.mrne - *b.mrne) < 1e-12);
    }
    SUBCASE("strict accuracy never exceeds relaxed accuracy") {
        Rng r2(7);
        for (int trial = 0; trial < 200; ++trial) {
            int n = 5 + (int)r2.uniform(0, 20);
            auto gt = random_flow(r2, n, -3, 3);
            auto pred = gt;
            for (auto& p : pred)
                p += geo::Vec3(r2.uniform(-0.2, 0.2), r2.uniform(-0.2, 0.2), r2.uniform(-0.2, 0.2));
            std::vector<char> moving(n, 0);
            FlowMetrics m = flow_metrics(pred, gt, moving);
            CHECK(m.acc_s <= m.acc_r);
            CHECK(m.acc_s >= 0.0);
            CHECK(m.acc_r <= 1.0);
        }
    }
}

TEST_CASE("seg_miou") {
    SUBCASE("perfect masks") {
        std::vector<char> gt = {1, 0, 1, 0, 0};
        SegIoU r = seg_miou(gt, gt);
        CHECK(r.miou == 1.0);
        CHECK(r.iou_moving == 1.0);
        CHECK(r.iou_static == 1.0);
    }
    SUBCASE("all-static prediction against half-moving truth") {
        std::vector<char> gt = {1, 1, 0, 0};
        std::vector<char> pred = {0, 0, 0, 0};
        SegIoU r = seg_miou(pred, gt);
        CHECK(r.iou_static == 0.5);
        CHECK(r.iou_moving == 0.0);
        CHECK(r.miou == 0.25);
    }
    SUBCASE("inverted masks score zero") {
        std::vector<char> gt = {1, 0, 1, 0};
        std::vector<char> pred = {0, 1, 0, 1};
        SegIoU r = seg_miou(pred, gt);
        CHECK(r.iou_moving == 0.0);
        CHECK(r.iou_static == 0.0);
        CHECK(r.miou == 0.0);
    }
    SUBCASE("a class absent everywhere scores one") {
        std::vector<char> gt = {0, 0, 0};
        SegIoU r = seg_miou(gt, gt);
        CHECK(r.iou_moving == 1.0);
        CHECK(r.miou == 1.0);
    }
}

TEST_CASE("accumulate_odometry") {
    SUBCASE("identity transforms keep the trajectory at the origin") {
        std::vector<geo::RigidTransform> ts(10);
        auto poses = accumulate_odometry(ts);
        CHECK(poses.size() == 11);
        for (const auto& p : poses) {
            CHECK(p.translation.norm() == 0.0);
            CHECK((p.rotation - geo::Mat3::Identity()).norm() == 0.0);
        }
    }
    SUBCASE("constant step accumulates linearly") {
        geo::RigidTransform t;
        t.translation = geo::Vec3(-1, 0, 0);  // points move back 1 m: ego advances 1 m
        std::vector<geo::RigidTransform> ts(10, t);
        auto poses = accumulate_odometry(ts);
        CHECK(std::abs(poses.back().translation(0) - 10.0) < 1e-12);
    }
    SUBCASE("exact pair transforms reproduce simulator odometry") {
        sim::SimConfig cfg;
        cfg.n_frames = 100;
        cfg.points_per_frame = 30;
        cfg.n_movers = 0;
        cfg.ego_yaw_rate = 0.05;
        sim::Sequence seq = sim::generate_sequence(cfg, 77);
        std::vector<geo::RigidTransform> ts;
        for (const auto& gt : seq.gt) ts.push_back(gt.ego);
        auto poses = accumulate_odometry(ts);
        // both trajectories start at the first odometer pose
        geo::RigidTransform base = seq.odom_poses.front();
        REQUIRE(poses.size() <= seq.odom_poses.size());
        for (size_t k = 0; k < poses.size(); ++k) {
            geo::RigidTransform want = geo::compose(geo::invert(base), seq.odom_poses[k]);
            CHECK((poses[k].translation - want.translation).norm() < 1e-9);
            CHECK((poses[k].rotation - want.rotation).norm() < 1e-9);
        }
    }
    SUBCASE("trajectory ate") {
        geo::RigidTransform a, b;
        b.translation = geo::Vec3(3, 4, 0);
        auto ate = trajectory_ate({a, b}, {a, a});
        CHECK(ate[0] == 0.0);
        CHECK(ate[1] == 5.0);
        CHECK_THROWS_AS(trajectory_ate({a}, {a, b}), std::invalid_argument);
    }
    SUBCASE("input validation") {
        CHECK_THROWS_AS(accumulate_odometry({}), std::invalid_argument);
        std::vector<geo::Vec3> f(2, geo::Vec3(0, 0, 0));
        std::vector<char> m(2, 0);
        CHECK_THROWS_AS(flow_metrics(f, f, m, 0.0), std::invalid_argument);
        CHECK_THROWS_AS(flow_metrics({}, {}, {}, 1.0), std::invalid_argument);
        CHECK_THROWS_AS(seg_miou({1}, {1, 0}), std::invalid_argument);
    }
}
