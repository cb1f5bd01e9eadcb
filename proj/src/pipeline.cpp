#include "pipeline.hpp"

#include <chrono>
#include <ctime>

#include "json.hpp"
#include "losses.hpp"
#include "rng.hpp"

namespace cmflow::pipe {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string timestamp_now() {
    auto now = std::chrono::system_clock::now();
    std::time_t t = std::chrono::system_clock::to_time_t(now);
    char buf[32];
    std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&t));
    return buf;
}

void write_manifest(const std::string& command, const std::string& config_echo,
                    std::uint64_t seed, const std::string& input_hash, const fs::path& dir) {
    io::RunManifest m;
    m.command = command;
    m.config_echo = config_echo;
    m.seed = seed;
    m.input_hash = input_hash;
    m.timestamp = timestamp_now();
    io::save_manifest(m, dir);
}

double mean_of(const std::vector<double>& v) {
    double s = 0;
    for (double x : v) s += x;
    return v.empty() ? 0.0 : s / (double)v.size();
}

}  // namespace

void run_simulate(const sim::SimConfig& config, std::uint64_t seed, const fs::path& out) {
    config.validate();
    sim::Sequence seq = sim::generate_sequence(config, seed);
    io::save_sequence(seq, out);
    write_manifest("simulate", json{{"seed", seed}}.dump(), seed, "", out);
}

LabelReport run_labels(const fs::path& seq_dir, const fs::path& out, double eta_v, double eta_l,
                       bool direct_threshold) {
    sim::Sequence seq = io::load_sequence(seq_dir);
    sup::LabelOptions opts;
    opts.eta_v = eta_v;
    opts.eta_l = eta_l;
    opts.bias_aware = !direct_threshold;

    std::vector<sup::LabelBundle> bundles;
    LabelReport report;
    std::vector<double> fused, rrv, aware, direct;
    for (size_t k = 0; k + 1 < seq.frames.size(); ++k) {
        sup::LabelBundle b =
            sup::make_bundle(seq.frames[k], seq.odom_poses[k], seq.odom_poses[k + 1], seq.boxes[k],
                             seq.boxes[k + 1], seq.optflow[k], seq.calib, seq.dt, opts);
        geo::RigidTransform t = b.pseudo_T;
        std::vector<char> s_aware = sup::rrv_motion_label(seq.frames[k], t, seq.dt, eta_v, true).s_v;
        std::vector<char> s_direct =
            sup::rrv_motion_label(seq.frames[k], t, seq.dt, eta_v, false).s_v;

        LabelQuality q;
        q.fused_miou = met::seg_miou(b.s_fused, seq.gt[k].moving).miou;
        q.rrv_miou = met::seg_miou(b.s_v, seq.gt[k].moving).miou;
        q.bias_aware_miou = met::seg_miou(s_aware, seq.gt[k].moving).miou;
        q.direct_miou = met::seg_miou(s_direct, seq.gt[k].moving).miou;
        report.pairs.push_back(q);
        fused.push_back(q.fused_miou);
        rrv.push_back(q.rrv_miou);
        aware.push_back(q.bias_aware_miou);
        direct.push_back(q.direct_miou);
        bundles.push_back(std::move(b));
    }
    report.mean.fused_miou = mean_of(fused);
    report.mean.rrv_miou = mean_of(rrv);
    report.mean.bias_aware_miou = mean_of(aware);
    report.mean.direct_miou = mean_of(direct);

    io::save_labels(bundles, out / "labels.jsonl");
    json rows = json::array();
    for (const auto& q : report.pairs)
        rows.push_back(json{{"fused_miou", q.fused_miou},
                            {"rrv_miou", q.rrv_miou},
                            {"bias_aware_miou", q.bias_aware_miou},
                            {"direct_miou", q.direct_miou}});
    json j{{"pairs", rows},
           {"mean",
            {{"fused_miou", report.mean.fused_miou},
             {"rrv_miou", report.mean.rrv_miou},
             {"bias_aware_miou", report.mean.bias_aware_miou},
             {"direct_miou", report.mean.direct_miou}}}};
    io::write_file_atomic(out / "label_report.json", j.dump(2) + "\n");
    write_manifest("labels",
                   json{{"eta_v", eta_v}, {"eta_l", eta_l}, {"direct", direct_threshold}}.dump(),
                   0, io::content_hash({seq_dir / "meta.json"}), out);
    return report;
}

train::TrainResult run_train(const std::vector<fs::path>& data_dirs,
                             const train::TrainConfig& cfg, const fs::path& out,
                             const fs::path* resume) {
    cfg.validate();
    std::vector<sim::Sequence> seqs;
    for (const auto& d : data_dirs) seqs.push_back(io::load_sequence(d));
    train::Dataset data = train::build_dataset(seqs, cfg);

    train::TrainResult result;
    if (resume) {
        io::Checkpoint ck = io::load_checkpoint(*resume);
        result = train::train(data, cfg, nullptr, &ck.params);
    } else {
        result = train::train(data, cfg, nullptr, nullptr);
    }
    io::save_checkpoint(cfg.net_config(), result.params, out / "model.ckpt");
    io::save_train_log(result.log, out / "train_log.jsonl");
    write_manifest("train",
                   json{{"epochs", cfg.epochs}, {"lr", cfg.lr}, {"scale", cfg.scale}}.dump(),
                   cfg.seed, "", out);
    return result;
}

std::vector<net::ModelOutput> run_infer(const fs::path& ckpt, const fs::path& seq_dir,
                                        const fs::path& out) {
    io::Checkpoint ck = io::load_checkpoint(ckpt);
    sim::Sequence seq = io::load_sequence(seq_dir);
    net::Model model(ck.config, std::move(ck.params));

    std::vector<net::ModelOutput> outputs;
    std::vector<double> hidden;
    for (size_t k = 0; k + 1 < seq.frames.size(); ++k) {
        const std::vector<double>* h =
            (ck.config.use_gru && !hidden.empty()) ? &hidden : nullptr;
        net::ModelOutput o = model.run(seq.frames[k], seq.frames[k + 1], h);
        hidden = o.hidden;
        outputs.push_back(std::move(o));
    }
    io::save_predictions(outputs, out / "pred.jsonl");
    write_manifest("infer", "{}", 0, io::content_hash({ckpt, seq_dir / "meta.json"}), out);
    return outputs;
}

std::vector<io::MetricsRow> run_eval(const fs::path& pred_dir, const fs::path& seq_dir,
                                     double resolution_ratio, const fs::path& out) {
    std::vector<net::ModelOutput> preds = io::load_predictions(pred_dir / "pred.jsonl");
    sim::Sequence seq = io::load_sequence(seq_dir);
    if (preds.size() != seq.n_pairs())
        throw sup::LabelInvariantViolation("eval: prediction count does not match sequence pairs");

    std::vector<io::MetricsRow> rows;
    for (size_t k = 0; k < preds.size(); ++k) {
        const sim::PairGT& gt = seq.gt[k];
        if (preds[k].final_flow.size() != gt.flow.size())
            throw sup::LabelInvariantViolation("eval: point count mismatch at pair " +
                                               std::to_string(k));
        met::FlowMetrics fm =
            met::flow_metrics(preds[k].final_flow, gt.flow, gt.moving, resolution_ratio);
        io::MetricsRow r;
        r.pair = std::to_string(k);
        r.epe = fm.epe;
        r.acc_s = fm.acc_s;
        r.acc_r = fm.acc_r;
        r.rne = fm.rne;
        r.mrne = fm.mrne;
        r.srne = fm.srne;
        r.miou = met::seg_miou(preds[k].moving_mask, gt.moving).miou;
        auto [rte, rae] = geo::rte_rae(preds[k].ego, gt.ego);
        r.rte = rte;
        r.rae = rae;
        rows.push_back(r);
    }
    io::save_metrics_csv(rows, out);
    return rows;
}

OdometryResult run_odometry(const fs::path& pred_dir, const fs::path& seq_dir, bool with_icp,
                            const fs::path& out) {
    std::vector<net::ModelOutput> preds = io::load_predictions(pred_dir / "pred.jsonl");
    sim::Sequence seq = io::load_sequence(seq_dir);
    if (preds.size() != seq.n_pairs())
        throw sup::LabelInvariantViolation("odometry: prediction count mismatch");

    OdometryResult res;
    std::vector<geo::RigidTransform> est, gt, icp;
    for (size_t k = 0; k < preds.size(); ++k) {
        est.push_back(preds[k].ego);
        gt.push_back(seq.gt[k].ego);
        if (with_icp)
            icp.push_back(geo::icp_ego(seq.frames[k].coords, seq.frames[k + 1].coords, 30, 1e-9));
    }
    res.estimate = met::accumulate_odometry(est);
    res.gt = met::accumulate_odometry(gt);
    if (with_icp) res.icp = met::accumulate_odometry(icp);
    res.final_ate_estimate = met::trajectory_ate(res.estimate, res.gt).back();
    if (with_icp) res.final_ate_icp = met::trajectory_ate(res.icp, res.gt).back();

    std::string csv = "k,est_x,est_y,est_z,icp_x,icp_y,icp_z,gt_x,gt_y,gt_z\n";
    for (size_t k = 0; k < res.estimate.size(); ++k) {
        auto cell = [](double v) { return std::to_string(v); };
        const geo::Vec3& e = res.estimate[k].translation;
        const geo::Vec3& g = res.gt[k].translation;
        csv += std::to_string(k) + "," + cell(e(0)) + "," + cell(e(1)) + "," + cell(e(2)) + ",";
        if (with_icp) {
            const geo::Vec3& i = res.icp[k].translation;
            csv += cell(i(0)) + "," + cell(i(1)) + "," + cell(i(2));
        } else {
            csv += ",,";
        }
        csv += "," + cell(g(0)) + "," + cell(g(1)) + "," + cell(g(2)) + "\n";
    }
    io::write_file_atomic(out, csv);
    return res;
}

GradcheckReport run_gradcheck(double scale, std::uint64_t seed, int points, int max_coords) {
    sim::SimConfig scfg;
    scfg.n_frames = 2;
    scfg.points_per_frame = std::max(4, points - 6);
    scfg.n_movers = 2;
    scfg.mover_points = 3;
    scfg.rrv_noise = 0.05;
    scfg.box_center_noise = 0.05;
    scfg.flow_noise_px = 0.5;
    sim::Sequence seq = sim::generate_sequence(scfg, Rng::derive(seed, "gradcheck/sim"));
    sup::LabelBundle bundle =
        sup::make_bundle(seq.frames[0], seq.odom_poses[0], seq.odom_poses[1], seq.boxes[0],
                         seq.boxes[1], seq.optflow[0], seq.calib, seq.dt);

    net::NetConfig ncfg;
    ncfg.scale = scale;
    net::ParamStore params = net::ParamStore::init(ncfg, Rng::derive(seed, "gradcheck/params"));
    net::Model shell(ncfg, net::ParamStore{});

    std::vector<std::string> names;
    std::vector<ad::Array> leaves;
    for (const auto& [name, arr] : params.entries()) {
        names.push_back(name);
        leaves.push_back(arr);
    }

    auto forward_loss = [&](ad::Tape& t, const std::vector<ad::Value>& vals,
                            const std::string& which) {
        net::Lifted p;
        for (size_t i = 0; i < names.size(); ++i) p[names[i]] = vals[i];
        net::ForwardValues fv = shell.forward(t, p, seq.frames[0], seq.frames[1]);
        loss::LossValues lv = loss::total_loss(t, fv, seq.frames[0], seq.frames[1], bundle,
                                               seq.calib, seq.dt);
        if (which == "ego") return lv.ego;
        if (which == "seg") return lv.seg;
        if (which == "mot") return lv.mot;
        if (which == "opt") return lv.opt;
        if (which == "self") return lv.self_;
        return lv.total;
    };

    GradcheckReport report;
    for (const char* which : {"ego", "seg", "mot", "opt", "self", "total"}) {
        double err = ad::gradcheck_multi(
            [&](ad::Tape& t, const std::vector<ad::Value>& vals) {
                return forward_loss(t, vals, which);
            },
            leaves, {1e-6, 1e-5, 1e-4, 1e-3, 1e-2}, max_coords,
            Rng::derive(seed, std::string("gradcheck/") + which));
        report.errors[which] = err;
        report.max_error = std::max(report.max_error, err);
    }
    return report;
}

}  // namespace cmflow::pipe
