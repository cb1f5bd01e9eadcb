#include "losses.hpp"

#include <cmath>

namespace cmflow::loss {

using ad::Array;
using ad::Tape;
using ad::Value;

namespace {

Value zero(Tape& tape) { return tape.constant(Array::scalar(0.0)); }

}  // namespace

Value ego_loss(Tape& tape, Value ego_rt, const geo::RigidTransform& target,
               const std::vector<geo::Vec3>& coords) {
    Value pred = ad::rigid_flow_of(ego_rt, Array::from_points(coords));
    Value want = tape.constant(Array::from_points(geo::rigid_flow(target, coords)));
    return ad::mean(ad::rows_norm(ad::sub(pred, want)));
}

Value seg_loss(Tape& tape, Value pred, const std::vector<char>& labels) {
    std::vector<int> moving, still;
    for (size_t i = 0; i < labels.size(); ++i) (labels[i] ? moving : still).push_back((int)i);
    Value p = ad::clamp(pred, 1e-7, 1.0 - 1e-7);
    int classes = 0;
    Value acc = zero(tape);
    if (!moving.empty()) {
        acc = ad::add(acc, ad::mean(ad::log_(ad::gather_rows(p, moving))));
        ++classes;
    }
    if (!still.empty()) {
        Value q = ad::sadd(ad::neg(ad::gather_rows(p, still)), 1.0);
        acc = ad::add(acc, ad::mean(ad::log_(q)));
        ++classes;
    }
    if (classes == 0) return zero(tape);
    return ad::smul(ad::neg(acc), 1.0 / 2.0);
}

Value mot_loss(Tape& tape, Value flow, const std::vector<std::optional<geo::Vec3>>& f_fg,
               const std::vector<char>& s_l) {
    std::vector<int> idx;
    std::vector<geo::Vec3> want;
    for (size_t i = 0; i < s_l.size(); ++i)
        if (s_l[i] && f_fg[i]) {
            idx.push_back((int)i);
            want.push_back(*f_fg[i]);
        }
    if (idx.empty()) return zero(tape);
    Value d = ad::sub(ad::gather_rows(flow, idx), tape.constant(Array::from_points(want)));
    return ad::mean(ad::rows_norm(d));
}

Value opt_loss(Tape& tape, Value flow, const std::vector<std::optional<sup::Vec2>>& w_opt,
               const std::vector<char>& s_fused, const std::vector<geo::Vec3>& coords,
               const geo::Calibration& calib, double deadzone) {
    std::vector<int> idx;
    std::vector<geo::Ray> rays;
    for (size_t i = 0; i < s_fused.size(); ++i) {
        if (!s_fused[i] || !w_opt[i]) continue;
        auto px = geo::project(coords[i], calib);
        if (!px) continue;
        rays.push_back(geo::pixel_ray({px->u + (*w_opt[i])(0), px->v + (*w_opt[i])(1)}, calib));
        idx.push_back((int)i);
    }
    if (idx.empty()) return zero(tape);
    int m = (int)idx.size();

    Array origins({m, 3}), dirs({m, 3}), picked({m, 3});
    for (int r = 0; r < m; ++r)
        for (int c = 0; c < 3; ++c) {
            origins.at(r, c) = rays[r].origin(c);
            dirs.at(r, c) = rays[r].direction(c);
            picked.at(r, c) = coords[idx[r]](c);
        }
    Value warped = ad::add(ad::gather_rows(flow, idx), tape.constant(picked));
    Value d = ad::sub(warped, tape.constant(origins));
    Value dir = tape.constant(dirs);
    Value along = ad::relu(ad::rowwise_sum(ad::mul(d, dir)));
    Value dist = ad::rows_norm(ad::sub(d, ad::mul_rows(dir, along)));

    // residuals inside the deadzone are excluded from value and gradient
    const Array& dv = tape.val(dist);
    std::vector<int> keep;
    for (int r = 0; r < m; ++r)
        if (dv[r] >= deadzone) keep.push_back(r);
    if (keep.empty()) return zero(tape);
    return ad::smul(ad::sum(ad::gather_rows(dist, keep)), 1.0 / m);
}

Value self_loss(Tape& tape, Value flow, const std::vector<geo::Vec3>& src,
                const std::vector<geo::Vec3>& tgt, const std::vector<double>& rrv, double dt,
                const SelfWeights& w) {
    int n = (int)src.size();
    Value total = zero(tape);

    // one-sided Chamfer: warped source against the nearest target point
    Value warped = ad::add(flow, tape.constant(Array::from_points(src)));
    std::vector<int> nn = geo::nearest_neighbors(tape.val(warped).to_points(), tgt);
    std::vector<geo::Vec3> matched(n);
    for (int i = 0; i < n; ++i) matched[i] = tgt[nn[i]];
    Value chamfer = ad::mean(ad::rows_norm(ad::sub(warped, tape.constant(Array::from_points(matched)))));
    total = ad::add(total, ad::smul(chamfer, w.chamfer));

    // smoothness over spatial neighborhoods of the source cloud
    if (n > 1) {
        auto nbrs = net::knn(src, src, std::min(w.k + 1, n));
        std::vector<int> self_idx, nbr_idx;
        for (int i = 0; i < n; ++i) {
            int taken = 0;
            for (int j : nbrs[i]) {
                if (j == i || taken >= w.k) continue;
                self_idx.push_back(i);
                nbr_idx.push_back(j);
                ++taken;
            }
        }
        if (!self_idx.empty()) {
            Value d = ad::sub(ad::gather_rows(flow, self_idx), ad::gather_rows(flow, nbr_idx));
            total = ad::add(total, ad::smul(ad::mean(ad::rows_norm(d)), w.smooth));
        }
    }

    // radial consistency: the flow's radial component matches rrv * dt
    Array units({n, 3}), target({n, 1});
    for (int i = 0; i < n; ++i) {
        geo::Vec3 u = src[i].normalized();
        for (int c = 0; c < 3; ++c) units.at(i, c) = u(c);
        target.at(i, 0) = rrv[i] * dt;
    }
    Value radial = ad::rowwise_sum(ad::mul(flow, tape.constant(units)));
    Value resid = ad::mean(ad::abs_(ad::sub(radial, tape.constant(target))));
    return ad::add(total, ad::smul(resid, w.radial));
}

LossValues total_loss(Tape& tape, const net::ForwardValues& out, const sim::RadarFrame& src,
                      const sim::RadarFrame& tgt, const sup::LabelBundle& bundle,
                      const geo::Calibration& calib, double dt, const LossOptions& opts) {
    LossValues v;
    v.ego = opts.use_odometry ? ego_loss(tape, out.ego_rt, bundle.pseudo_T, src.coords)
                              : zero(tape);
    // without the odometer and the boxes there is no motion label to learn
    v.seg = (opts.use_odometry || opts.use_labels)
                ? seg_loss(tape, out.moving_prob, bundle.s_fused)
                : zero(tape);
    v.mot = opts.use_labels ? mot_loss(tape, out.final_flow, bundle.f_fg, bundle.s_l)
                            : zero(tape);
    v.opt = opts.use_camera ? opt_loss(tape, out.final_flow, bundle.w_opt, bundle.s_fused,
                                       src.coords, calib, opts.deadzone)
                            : zero(tape);
    v.self_ = opts.use_self
                  ? self_loss(tape, out.final_flow, src.coords, tgt.coords, src.rrv, dt,
                              opts.self_weights)
                  : zero(tape);

    Value flow_term = ad::add(v.mot, v.self_);
    if (opts.lambda_opt != 0.0)
        flow_term = ad::add(flow_term, ad::smul(v.opt, opts.lambda_opt));
    v.total = ad::add(v.ego, ad::add(v.seg, flow_term));
    return v;
}

LossReport to_report(const Tape& tape, const LossValues& v, double lambda_opt) {
    LossReport r;
    r.total = tape.val(v.total)[0];
    r.ego = tape.val(v.ego)[0];
    r.seg = tape.val(v.seg)[0];
    r.mot = tape.val(v.mot)[0];
    r.opt = tape.val(v.opt)[0];
    r.self_ = tape.val(v.self_)[0];
    r.lambda_opt = lambda_opt;
    return r;
}

}  // namespace cmflow::loss
