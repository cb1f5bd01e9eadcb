#include "cmflow/cmflow.h"

#include <cstring>
#include <exception>
#include <string>
#include <vector>

#include "json.hpp"
#include "pipeline.hpp"

using nlohmann::json;
using namespace cmflow;

namespace {

thread_local std::string g_last_error;

struct ArgumentError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

json parse_object(const char* text, const char* what) {
    if (!text) throw ArgumentError(std::string(what) + ": null config");
    json j = json::parse(text, nullptr, false);
    if (j.is_discarded()) throw ArgumentError(std::string(what) + ": invalid JSON");
    if (!j.is_object()) throw ArgumentError(std::string(what) + ": expected a JSON object");
    return j;
}

// unknown keys are errors so ablation-switch typos fail loudly
void reject_unknown(const json& j, const std::vector<std::string>& known, const char* what) {
    for (const auto& [key, _] : j.items()) {
        bool ok = false;
        for (const auto& k : known)
            if (key == k) ok = true;
        if (!ok) throw ArgumentError(std::string(what) + ": unknown key '" + key + "'");
    }
}

sim::SimConfig parse_sim_config(const char* text) {
    json j = parse_object(text, "simulate config");
    static const std::vector<std::string> known = {
        "n_frames",       "dt",           "points_per_frame",
        "n_movers",       "mover_points", "ego_speed",
        "ego_yaw_rate",   "mover_speed_min", "mover_speed_max",
        "mover_yaw_rate_max", "rrv_noise", "rrv_bias_range",
        "box_dropout",    "box_center_noise", "flow_noise_px",
        "flow_corrupt_frac", "z_min",     "z_max",
        "sample_n",       "depth_min",   "depth_max"};
    reject_unknown(j, known, "simulate config");
    sim::SimConfig c;
    c.n_frames = j.value("n_frames", c.n_frames);
    c.dt = j.value("dt", c.dt);
    c.points_per_frame = j.value("points_per_frame", c.points_per_frame);
    c.n_movers = j.value("n_movers", c.n_movers);
    c.mover_points = j.value("mover_points", c.mover_points);
    c.ego_speed = j.value("ego_speed", c.ego_speed);
    c.ego_yaw_rate = j.value("ego_yaw_rate", c.ego_yaw_rate);
    c.mover_speed_min = j.value("mover_speed_min", c.mover_speed_min);
    c.mover_speed_max = j.value("mover_speed_max", c.mover_speed_max);
    c.mover_yaw_rate_max = j.value("mover_yaw_rate_max", c.mover_yaw_rate_max);
    c.rrv_noise = j.value("rrv_noise", c.rrv_noise);
    c.rrv_bias_range = j.value("rrv_bias_range", c.rrv_bias_range);
    c.box_dropout = j.value("box_dropout", c.box_dropout);
    c.box_center_noise = j.value("box_center_noise", c.box_center_noise);
    c.flow_noise_px = j.value("flow_noise_px", c.flow_noise_px);
    c.flow_corrupt_frac = j.value("flow_corrupt_frac", c.flow_corrupt_frac);
    c.z_min = j.value("z_min", c.z_min);
    c.z_max = j.value("z_max", c.z_max);
    c.sample_n = j.value("sample_n", c.sample_n);
    c.depth_min = j.value("depth_min", c.depth_min);
    c.depth_max = j.value("depth_max", c.depth_max);
    return c;
}

train::TrainConfig parse_train_config(const char* text) {
    json j = parse_object(text, "train config");
    static const std::vector<std::string> known = {
        "lr",         "decay",      "epochs",     "batch_size", "clip_len",
        "seed",       "scale",      "use_gru",    "eta_b",      "eta_v",
        "eta_l",      "lambda_opt", "grad_clip",  "threads",    "odometer",
        "lidar_boxes", "camera"};
    reject_unknown(j, known, "train config");
    train::TrainConfig c;
    c.lr = j.value("lr", c.lr);
    c.decay = j.value("decay", c.decay);
    c.epochs = j.value("epochs", c.epochs);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.clip_len = j.value("clip_len", c.clip_len);
    c.seed = j.value("seed", c.seed);
    c.scale = j.value("scale", c.scale);
    c.use_gru = j.value("use_gru", c.use_gru);
    c.eta_b = j.value("eta_b", c.eta_b);
    c.eta_v = j.value("eta_v", c.eta_v);
    c.eta_l = j.value("eta_l", c.eta_l);
    c.lambda_opt = j.value("lambda_opt", c.lambda_opt);
    c.grad_clip = j.value("grad_clip", c.grad_clip);
    c.threads = j.value("threads", c.threads);
    c.odometer = j.value("odometer", c.odometer);
    c.lidar_boxes = j.value("lidar_boxes", c.lidar_boxes);
    c.camera = j.value("camera", c.camera);
    return c;
}

cmflow_status to_status(const std::exception& e) {
    g_last_error = e.what();
    if (dynamic_cast<const sup::LabelInvariantViolation*>(&e)) return CMFLOW_ERR_INVARIANT;
    if (dynamic_cast<const ArgumentError*>(&e)) return CMFLOW_ERR_ARGUMENT;
    if (dynamic_cast<const sim::InvalidConfig*>(&e)) return CMFLOW_ERR_ARGUMENT;
    if (dynamic_cast<const train::InvalidConfig*>(&e)) return CMFLOW_ERR_ARGUMENT;
    if (dynamic_cast<const io::IoError*>(&e)) return CMFLOW_ERR_ARGUMENT;
    if (dynamic_cast<const std::invalid_argument*>(&e)) return CMFLOW_ERR_ARGUMENT;
    return CMFLOW_ERR_INTERNAL;
}

const char* require(const char* arg, const char* what) {
    if (!arg) throw ArgumentError(std::string(what) + " must not be null");
    return arg;
}

}  // namespace

struct cmflow_result {
    std::string text;
};

extern "C" {

const char* cmflow_version(void) { return io::kVersion; }

const char* cmflow_last_error(void) { return g_last_error.c_str(); }

const char* cmflow_result_json(const cmflow_result* result) {
    return result ? result->text.c_str() : "";
}

void cmflow_result_free(cmflow_result* result) { delete result; }

cmflow_status cmflow_simulate(const char* config_json, uint64_t seed, const char* out_dir,
                              cmflow_result** result) {
    try {
        sim::SimConfig cfg = parse_sim_config(config_json);
        pipe::run_simulate(cfg, seed, require(out_dir, "out_dir"));
        if (result) {
            json j{{"out", out_dir}, {"frames", cfg.n_frames}, {"pairs", cfg.n_frames - 1}};
            *result = new cmflow_result{j.dump()};
        }
        return CMFLOW_OK;
    } catch (const std::exception& e) {
        return to_status(e);
    }
}

cmflow_status cmflow_labels(const char* seq_dir, const char* options_json, const char* out_dir,
                            cmflow_result** result) {
    try {
        json j = parse_object(options_json ? options_json : "{}", "labels options");
        reject_unknown(j, {"eta_v", "eta_l", "direct_threshold"}, "labels options");
        double eta_v = j.value("eta_v", 0.3);
        double eta_l = j.value("eta_l", 0.05);
        bool direct = j.value("direct_threshold", false);
        pipe::LabelReport rep = pipe::run_labels(require(seq_dir, "seq_dir"),
                                                 require(out_dir, "out_dir"), eta_v, eta_l, direct);
        if (result) {
            json pairs = json::array();
            for (const auto& q : rep.pairs)
                pairs.push_back(json{{"fused_miou", q.fused_miou},
                                     {"rrv_miou", q.rrv_miou},
                                     {"bias_aware_miou", q.bias_aware_miou},
                                     {"direct_miou", q.direct_miou}});
            json out{{"pairs", pairs},
                     {"mean",
                      {{"fused_miou", rep.mean.fused_miou},
                       {"rrv_miou", rep.mean.rrv_miou},
                       {"bias_aware_miou", rep.mean.bias_aware_miou},
                       {"direct_miou", rep.mean.direct_miou}}}};
            *result = new cmflow_result{out.dump()};
        }
        return CMFLOW_OK;
    } catch (const std::exception& e) {
        return to_status(e);
    }
}

cmflow_status cmflow_train(const char* const* data_dirs, size_t n_dirs, const char* config_json,
                           const char* out_dir, const char* resume_ckpt, cmflow_result** result) {
    try {
        if (!data_dirs || n_dirs == 0) throw ArgumentError("train: no data directories");
        std::vector<std::filesystem::path> dirs;
        for (size_t i = 0; i < n_dirs; ++i) dirs.emplace_back(require(data_dirs[i], "data_dir"));
        train::TrainConfig cfg = parse_train_config(config_json);
        std::filesystem::path resume_path;
        const std::filesystem::path* resume = nullptr;
        if (resume_ckpt) {
            resume_path = resume_ckpt;
            resume = &resume_path;
        }
        train::TrainResult tr = pipe::run_train(dirs, cfg, require(out_dir, "out_dir"), resume);
        if (result) {
            json j{{"steps", tr.log.size()},
                   {"final_loss", tr.log.empty() ? 0.0 : tr.log.back().report.total},
                   {"out", out_dir}};
            *result = new cmflow_result{j.dump()};
        }
        return CMFLOW_OK;
    } catch (const std::exception& e) {
        return to_status(e);
    }
}

cmflow_status cmflow_infer(const char* ckpt_file, const char* seq_dir, const char* out_dir,
                           cmflow_result** result) {
    try {
        auto outs = pipe::run_infer(require(ckpt_file, "ckpt_file"), require(seq_dir, "seq_dir"),
                                    require(out_dir, "out_dir"));
        if (result) {
            json j{{"pairs", outs.size()}, {"out", out_dir}};
            *result = new cmflow_result{j.dump()};
        }
        return CMFLOW_OK;
    } catch (const std::exception& e) {
        return to_status(e);
    }
}

cmflow_status cmflow_eval(const char* pred_dir, const char* seq_dir, double resolution_ratio,
                          const char* out_csv, cmflow_result** result) {
    try {
        auto rows = pipe::run_eval(require(pred_dir, "pred_dir"), require(seq_dir, "seq_dir"),
                                   resolution_ratio, require(out_csv, "out_csv"));
        if (result) {
            double epe = 0, miou = 0;
            for (const auto& r : rows) {
                epe += r.epe;
                miou += r.miou;
            }
            size_t n = rows.empty() ? 1 : rows.size();
            json j{{"pairs", rows.size()},
                   {"mean_epe", epe / (double)n},
                   {"mean_miou", miou / (double)n},
                   {"out", out_csv}};
            *result = new cmflow_result{j.dump()};
        }
        return CMFLOW_OK;
    } catch (const std::exception& e) {
        return to_status(e);
    }
}

cmflow_status cmflow_odometry(const char* pred_dir, const char* seq_dir, int with_icp,
                              const char* out_csv, cmflow_result** result) {
    try {
        pipe::OdometryResult r =
            pipe::run_odometry(require(pred_dir, "pred_dir"), require(seq_dir, "seq_dir"),
                               with_icp != 0, require(out_csv, "out_csv"));
        if (result) {
            json j{{"poses", r.estimate.size()},
                   {"final_ate_estimate", r.final_ate_estimate},
                   {"final_ate_icp", r.final_ate_icp},
                   {"out", out_csv}};
            *result = new cmflow_result{j.dump()};
        }
        return CMFLOW_OK;
    } catch (const std::exception& e) {
        return to_status(e);
    }
}

cmflow_status cmflow_gradcheck(double scale, uint64_t seed, int points, int max_coords,
                               cmflow_result** result) {
    try {
        if (scale <= 0 || points < 4) throw ArgumentError("gradcheck: bad scale or point count");
        pipe::GradcheckReport rep = pipe::run_gradcheck(scale, seed, points, max_coords);
        if (result) {
            json errors = json::object();
            for (const auto& [k, v] : rep.errors) errors[k] = v;
            json j{{"errors", errors}, {"max_error", rep.max_error}};
            *result = new cmflow_result{j.dump()};
        }
        return CMFLOW_OK;
    } catch (const std::exception& e) {
        return to_status(e);
    }
}

}  // extern "C"
