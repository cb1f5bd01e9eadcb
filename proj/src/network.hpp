#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "diffcore.hpp"
#include "geometry.hpp"
#include "simworld.hpp"

namespace cmflow::net {

struct NetConfig {
    double scale = 1.0;  // shrinks every width proportionally for fast tests
    bool use_gru = false;
    std::vector<double> radii = {2.0, 4.0, 8.0, 16.0};
    std::vector<int> nsamples = {4, 8, 16, 32};
    int feat_dim = 2;  // raw per-point features: (rrv, rcs)
    int cv_neighbors = 8;
    double eta_b = 0.5;  // motion classification threshold

    int width(int base) const {
        int w = static_cast<int>(std::lround(base * scale));
        return w < 1 ? 1 : w;
    }
    int hidden_dim() const { return width(256); }
    int embed_dim() const { return 2 * width(256); }
};

// Named parameter arrays; iteration order is the checkpoint order.
class ParamStore {
public:
    static ParamStore init(const NetConfig& cfg, std::uint64_t seed);

    ad::Array& at(const std::string& name);
    const ad::Array& at(const std::string& name) const;
    bool has(const std::string& name) const { return params_.count(name) > 0; }
    void insert(const std::string& name, ad::Array value);

    const std::map<std::string, ad::Array>& entries() const { return params_; }
    std::map<std::string, ad::Array>& entries() { return params_; }
    size_t count() const;  // total scalar parameters

private:
    std::map<std::string, ad::Array> params_;
};

// parameters lifted onto a tape (leaves when trainable, constants otherwise)
using Lifted = std::map<std::string, ad::Value>;
Lifted lift(ad::Tape& tape, const ParamStore& params, bool trainable);

struct ModelOutput {
    std::vector<geo::Vec3> init_flow;
    std::vector<double> moving_prob;
    geo::RigidTransform ego;
    std::vector<char> moving_mask;
    std::vector<geo::Vec3> final_flow;
    std::vector<double> hidden;  // updated GRU hidden state (empty when off)
    bool ego_fallback_uniform = false;
};

// tape handles from one differentiable forward pass
struct ForwardValues {
    ad::Value init_flow;    // N x 3
    ad::Value moving_prob;  // N x 1
    ad::Value ego_rt;       // 4 x 3 (rows 0..2 rotation, row 3 translation)
    ad::Value final_flow;   // N x 3
    ad::Value hidden;       // 1 x H, invalid when the GRU is off
    std::vector<char> moving_mask;
    bool ego_fallback_uniform = false;
};

struct ForwardOptions {
    // pseudo motion label used as the ego-head weight source during
    // training; when null the predicted probabilities are used
    const std::vector<double>* ego_seg = nullptr;
    // previous hidden state (constant on the tape); zeros mark a clip start
    const std::vector<double>* hidden = nullptr;
};

class Model {
public:
    Model(NetConfig cfg, ParamStore params) : cfg_(cfg), params_(std::move(params)) {}

    const NetConfig& config() const { return cfg_; }
    ParamStore& params() { return params_; }
    const ParamStore& params() const { return params_; }

    ForwardValues forward(ad::Tape& tape, const Lifted& p, const sim::RadarFrame& src,
                          const sim::RadarFrame& tgt, const ForwardOptions& opts = {}) const;

    // inference convenience: forward on a private tape with constant params
    ModelOutput run(const sim::RadarFrame& src, const sim::RadarFrame& tgt,
                    const std::vector<double>* hidden = nullptr) const;

    // ---- stages, exposed for direct testing ----
    // multi-scale set conv: ball query + per-scale MLP + max pool, fused.
    // global_fuse additionally feeds the pooled scene feature into the fuse
    // MLP (used by the second stage).
    ad::Value set_conv(ad::Tape& tape, const Lifted& p, const std::string& prefix,
                       const std::vector<geo::Vec3>& coords, ad::Value features,
                       bool global_fuse = false) const;
    // patch-to-patch correlation of target features against source points
    ad::Value cost_volume(ad::Tape& tape, const Lifted& p, const std::vector<geo::Vec3>& src,
                          ad::Value src_feat, const std::vector<geo::Vec3>& tgt,
                          ad::Value tgt_feat) const;
    struct BackboneOut {
        ad::Value embedding;  // N x embed_dim
        ad::Value hidden;     // 1 x hidden_dim (GRU only)
    };
    BackboneOut backbone(ad::Tape& tape, const Lifted& p, const sim::RadarFrame& src,
                         const sim::RadarFrame& tgt,
                         const std::vector<double>* hidden = nullptr) const;
    ad::Value flow_head(ad::Tape& tape, const Lifted& p, ad::Value embedding) const;
    ad::Value seg_head(ad::Tape& tape, const Lifted& p, ad::Value embedding) const;
    // weighted rigid fit with weights 1 - seg; falls back to uniform weights
    // when every point is labeled moving
    ad::Value ego_head(ad::Tape& tape, const std::vector<geo::Vec3>& coords, ad::Value init_flow,
                       ad::Value seg, bool* fallback = nullptr) const;
    struct Refined {
        ad::Value final_flow;
        std::vector<char> moving_mask;
    };
    Refined refine(ad::Tape& tape, const std::vector<geo::Vec3>& coords, ad::Value init_flow,
                   ad::Value moving_prob, ad::Value ego_rt) const;

private:
    NetConfig cfg_;
    ParamStore params_;
};

// up-to-nsamples neighbors within radius, nearest first, self always
// included; short neighborhoods pad by repeating the nearest entry
std::vector<std::vector<int>> ball_query(const std::vector<geo::Vec3>& coords, double radius,
                                         int nsamples);
// k nearest points in pts for each query (k <= |pts|, padded by repetition)
std::vector<std::vector<int>> knn(const std::vector<geo::Vec3>& queries,
                                  const std::vector<geo::Vec3>& pts, int k);

}  // namespace cmflow::net
