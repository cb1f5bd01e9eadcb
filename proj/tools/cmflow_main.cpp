// cmflow command-line front end. Talks to the library exclusively through
// the C API so the binary exercises the same surface as external bindings.

#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "cmflow/cmflow.h"
#include "json.hpp"

using nlohmann::json;

namespace {

int exit_code(cmflow_status s) {
    if (s == CMFLOW_OK) return 0;
    if (s == CMFLOW_ERR_INVARIANT) return 2;
    return 1;
}

int finish(cmflow_status s, cmflow_result* r) {
    if (s != CMFLOW_OK) {
        std::fprintf(stderr, "error: %s\n", cmflow_last_error());
        return exit_code(s);
    }
    if (r) {
        std::printf("%s\n", cmflow_result_json(r));
        cmflow_result_free(r);
    }
    return 0;
}

std::string read_config(const std::string& path) {
    if (path.empty()) return "{}";
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        std::fprintf(stderr, "error: cannot read config file %s\n", path.c_str());
        std::exit(1);
    }
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

// merge CLI-level overrides into the config JSON so one --seed / --threads
// governs the whole run
std::string with_overrides(const std::string& text, const std::vector<std::pair<std::string, json>>& kv) {
    json j = json::parse(text, nullptr, false);
    if (j.is_discarded()) return text;  // let the library report the parse error
    for (const auto& [k, v] : kv) j[k] = v;
    return j.dump();
}

int threads_fallback() {
    const char* env = std::getenv("CMFLOW_THREADS");
    return env ? std::atoi(env) : 1;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"cmflow: cross-modal supervised radar scene flow"};
    app.set_version_flag("--version", std::string(cmflow_version()));
    app.require_subcommand(1);

    // simulate
    auto* sim = app.add_subcommand("simulate", "generate a synthetic sequence directory");
    std::string sim_config, sim_out;
    std::uint64_t sim_seed = 0;
    sim->add_option("--config", sim_config, "simulator config JSON file");
    sim->add_option("--seed", sim_seed, "master RNG seed")->required();
    sim->add_option("--out", sim_out, "output directory")->required();

    // labels
    auto* lab = app.add_subcommand("labels", "build pseudo labels and score them against GT");
    std::string lab_seq, lab_out;
    double eta_v = 0.3, eta_l = 0.05;
    bool direct = false;
    lab->add_option("--seq", lab_seq, "sequence directory")->required();
    lab->add_option("--out", lab_out, "output directory")->required();
    lab->add_option("--eta-v", eta_v, "RRV motion threshold (m/s)");
    lab->add_option("--eta-l", eta_l, "box distillation threshold (m)");
    lab->add_flag("--direct-threshold", direct, "disable bias-aware centering");

    // train
    auto* trn = app.add_subcommand("train", "train a model on sequence directories");
    std::vector<std::string> trn_data;
    std::string trn_config, trn_out, trn_resume;
    std::uint64_t trn_seed = 0;
    int trn_threads = threads_fallback();
    bool trn_seed_set = false, trn_threads_set = false;
    trn->add_option("--data", trn_data, "sequence directories")->required()->expected(-1);
    trn->add_option("--config", trn_config, "training config JSON file");
    trn->add_option("--out", trn_out, "output directory")->required();
    trn->add_option("--resume", trn_resume, "checkpoint to resume from");
    trn->add_option("--seed", trn_seed, "master RNG seed (overrides config)")
        ->each([&](const std::string&) { trn_seed_set = true; });
    trn->add_option("--threads", trn_threads, "worker threads; 1 forces the bit-exact path")
        ->each([&](const std::string&) { trn_threads_set = true; });

    // infer
    auto* inf = app.add_subcommand("infer", "run a checkpoint over a sequence");
    std::string inf_ckpt, inf_seq, inf_out;
    inf->add_option("--ckpt", inf_ckpt, "checkpoint file")->required();
    inf->add_option("--seq", inf_seq, "sequence directory")->required();
    inf->add_option("--out", inf_out, "output directory")->required();

    // eval
    auto* evl = app.add_subcommand("eval", "score predictions against ground truth");
    std::string evl_pred, evl_seq, evl_out;
    double ratio = 1.0;
    evl->add_option("--pred", evl_pred, "prediction directory")->required();
    evl->add_option("--seq", evl_seq, "sequence directory")->required();
    evl->add_option("--resolution-ratio", ratio, "resolution ratio for RNE");
    evl->add_option("--out", evl_out, "metrics CSV path")->required();

    // odometry
    auto* odo = app.add_subcommand("odometry", "accumulate trajectories for plotting");
    std::string odo_pred, odo_seq, odo_out, baseline;
    odo->add_option("--pred", odo_pred, "prediction directory")->required();
    odo->add_option("--seq", odo_seq, "sequence directory")->required();
    odo->add_option("--baseline", baseline, "comparison baseline (icp)")
        ->check(CLI::IsMember({"icp"}));
    odo->add_option("--out", odo_out, "trajectory CSV path")->required();

    // gradcheck
    auto* gc = app.add_subcommand("gradcheck", "finite-difference report over all losses");
    double gc_scale = 0.125;
    std::uint64_t gc_seed = 0;
    int gc_points = 32, gc_coords = 4;
    gc->add_option("--scale", gc_scale, "model width factor");
    gc->add_option("--seed", gc_seed, "master RNG seed");
    gc->add_option("--points", gc_points, "points per frame");
    gc->add_option("--max-coords", gc_coords, "sampled coordinates per parameter (0 = all)");

    CLI11_PARSE(app, argc, argv);

    cmflow_result* r = nullptr;
    if (*sim) {
        cmflow_status s = cmflow_simulate(read_config(sim_config).c_str(), sim_seed,
                                          sim_out.c_str(), &r);
        return finish(s, r);
    }
    if (*lab) {
        json opts{{"eta_v", eta_v}, {"eta_l", eta_l}, {"direct_threshold", direct}};
        cmflow_status s =
            cmflow_labels(lab_seq.c_str(), opts.dump().c_str(), lab_out.c_str(), &r);
        return finish(s, r);
    }
    if (*trn) {
        std::vector<std::pair<std::string, json>> overrides;
        if (trn_seed_set) overrides.emplace_back("seed", trn_seed);
        if (trn_threads_set || std::getenv("CMFLOW_THREADS"))
            overrides.emplace_back("threads", trn_threads);
        std::string cfg = with_overrides(read_config(trn_config), overrides);
        std::vector<const char*> dirs;
        for (const auto& d : trn_data) dirs.push_back(d.c_str());
        cmflow_status s = cmflow_train(dirs.data(), dirs.size(), cfg.c_str(), trn_out.c_str(),
                                       trn_resume.empty() ? nullptr : trn_resume.c_str(), &r);
        return finish(s, r);
    }
    if (*inf) {
        cmflow_status s = cmflow_infer(inf_ckpt.c_str(), inf_seq.c_str(), inf_out.c_str(), &r);
        return finish(s, r);
    }
    if (*evl) {
        cmflow_status s =
            cmflow_eval(evl_pred.c_str(), evl_seq.c_str(), ratio, evl_out.c_str(), &r);
        return finish(s, r);
    }
    if (*odo) {
        cmflow_status s = cmflow_odometry(odo_pred.c_str(), odo_seq.c_str(), baseline == "icp",
                                          odo_out.c_str(), &r);
        return finish(s, r);
    }
    if (*gc) {
        cmflow_status s = cmflow_gradcheck(gc_scale, gc_seed, gc_points, gc_coords, &r);
        if (s == CMFLOW_OK && r) {
            json rep = json::parse(cmflow_result_json(r));
            if (rep["max_error"].get<double>() >= 1e-4) {
                std::printf("%s\n", cmflow_result_json(r));
                cmflow_result_free(r);
                std::fprintf(stderr, "error: gradcheck max relative error exceeds 1e-4\n");
                return 1;
            }
        }
        return finish(s, r);
    }
    return 1;
}
