#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "io.hpp"
#include "metrics.hpp"
#include "simworld.hpp"
#include "supervision.hpp"
#include "training.hpp"

namespace cmflow::pipe {

// simulate: write a sequence directory (plus run manifest)
void run_simulate(const sim::SimConfig& config, std::uint64_t seed,
                  const std::filesystem::path& out);

struct LabelQuality {
    double fused_miou = 0;        // fused label vs ground-truth moving
    double rrv_miou = 0;          // configured rrv label vs ground truth
    double bias_aware_miou = 0;   // bias-aware rrv label vs ground truth
    double direct_miou = 0;       // direct-threshold rrv label vs ground truth
};

struct LabelReport {
    std::vector<LabelQuality> pairs;
    LabelQuality mean;
};

// labels: write labels.jsonl and a label-quality report vs ground truth
LabelReport run_labels(const std::filesystem::path& seq_dir, const std::filesystem::path& out,
                       double eta_v = 0.3, double eta_l = 0.05, bool direct_threshold = false);

// train: build datasets from sequence directories, optimize, write
// checkpoint + log
train::TrainResult run_train(const std::vector<std::filesystem::path>& data_dirs,
                             const train::TrainConfig& cfg, const std::filesystem::path& out,
                             const std::filesystem::path* resume = nullptr);

// infer: per-pair model outputs over one sequence, hidden state threaded
// across consecutive pairs when the checkpoint has the temporal module
std::vector<net::ModelOutput> run_infer(const std::filesystem::path& ckpt,
                                        const std::filesystem::path& seq_dir,
                                        const std::filesystem::path& out);

// eval: metrics.csv from saved predictions against sequence ground truth
std::vector<io::MetricsRow> run_eval(const std::filesystem::path& pred_dir,
                                     const std::filesystem::path& seq_dir,
                                     double resolution_ratio, const std::filesystem::path& out);

struct OdometryResult {
    std::vector<geo::RigidTransform> estimate;
    std::vector<geo::RigidTransform> icp;
    std::vector<geo::RigidTransform> gt;
    double final_ate_estimate = 0;
    double final_ate_icp = 0;
};

// odometry: accumulate predicted, ICP-baseline and ground-truth trajectories
OdometryResult run_odometry(const std::filesystem::path& pred_dir,
                            const std::filesystem::path& seq_dir, bool with_icp,
                            const std::filesystem::path& out);

struct GradcheckReport {
    std::map<std::string, double> errors;  // per loss component
    double max_error = 0;
};

// finite-difference verification of all losses through a reduced-scale model
GradcheckReport run_gradcheck(double scale = 0.125, std::uint64_t seed = 0, int points = 32,
                              int max_coords = 4);

}  // namespace cmflow::pipe
