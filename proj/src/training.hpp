#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "losses.hpp"
#include "network.hpp"
#include "simworld.hpp"
#include "supervision.hpp"

namespace cmflow::train {

struct InvalidConfig : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct NonFiniteLoss : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct TrainConfig {
    double lr = 1e-3;
    double decay = 0.9;  // per-epoch learning-rate multiplier
    int epochs = 10;
    int batch_size = 2;  // clips per optimizer step
    int clip_len = 5;
    std::uint64_t seed = 0;
    double scale = 1.0;
    bool use_gru = true;
    double eta_b = 0.5;
    double eta_v = 0.3;
    double eta_l = 0.05;
    double lambda_opt = 0.1;
    loss::SelfWeights self_weights;
    double grad_clip = 10.0;  // global gradient norm cap
    int threads = 1;
    // modality switches: disabling one removes both its labels and its loss
    bool odometer = true;
    bool lidar_boxes = true;
    bool camera = true;

    void validate() const;
    net::NetConfig net_config() const;
    loss::LossOptions loss_options() const;
};

// one training sample: a frame pair with its pseudo labels and nothing
// derived from ground truth
struct PairSample {
    sim::RadarFrame src;
    sim::RadarFrame tgt;
    sup::LabelBundle bundle;
    geo::Calibration calib;
    double dt = 0.1;
};

struct TrainSequence {
    std::vector<PairSample> pairs;
};

using Dataset = std::vector<TrainSequence>;

// labels from the observed (noisy) odometer, boxes and optical flow of each
// sequence; disabled modalities are stripped here as well as in the loss
Dataset build_dataset(const std::vector<sim::Sequence>& seqs, const TrainConfig& cfg);

// held-out pairs carrying ground truth, used only for model selection
struct EvalPair {
    sim::RadarFrame src;
    sim::RadarFrame tgt;
    std::vector<geo::Vec3> gt_flow;
};

// consecutive non-overlapping windows of T pairs; the remainder forms a
// final shorter clip
struct Clip {
    int sequence = 0;
    std::vector<int> pair_indices;
};
std::vector<Clip> split_clips(int n_pairs, int T, int sequence = 0);
std::vector<Clip> split_dataset(const Dataset& data, int T);

struct AdamState {
    std::map<std::string, ad::Array> m;
    std::map<std::string, ad::Array> v;
    long t = 0;
};

// standard Adam with bias correction (beta1 0.9, beta2 0.999, eps 1e-8)
void adam_step(net::ParamStore& params, const std::map<std::string, ad::Array>& grads,
               AdamState& state, double lr);

// scales all gradients by a common factor when the global norm exceeds the
// cap; returns the pre-clip norm
double clip_gradients(std::map<std::string, ad::Array>& grads, double max_norm);

struct StepLog {
    int epoch = 0;
    int step = 0;  // global optimizer step index
    double lr = 0;
    loss::LossReport report;  // mean over the batch
};

struct TrainHooks {
    std::function<void(const StepLog&)> on_step;
    // called with the hidden state at the start of every clip
    std::function<void(const std::vector<double>&)> on_clip_start;
};

struct TrainResult {
    net::ParamStore params;       // final parameters
    net::ParamStore best_params;  // best by validation EPE (== params without val)
    double best_val_epe = -1.0;
    std::vector<StepLog> log;
};

TrainResult train(const Dataset& data, const TrainConfig& cfg,
                  const std::vector<EvalPair>* val = nullptr,
                  const net::ParamStore* resume = nullptr, const TrainHooks& hooks = {});

// mean endpoint error of a model over held-out pairs (stateless forward)
double validation_epe(const net::Model& model, const std::vector<EvalPair>& val);

}  // namespace cmflow::train
