#include "network.hpp"

#include <algorithm>
#include <cmath>

#include "rng.hpp"

namespace cmflow::net {

using ad::Array;
using ad::Tape;
using ad::Value;

namespace {

struct LayerSpec {
    std::string name;
    int rows, cols;
};

void push_mlp(std::vector<LayerSpec>& m, const std::string& prefix, int in,
              const std::vector<int>& widths) {
    for (size_t l = 0; l < widths.size(); ++l) {
        m.push_back({prefix + ".w" + std::to_string(l), in, widths[l]});
        m.push_back({prefix + ".b" + std::to_string(l), 1, widths[l]});
        in = widths[l];
    }
}

// the full parameter manifest; checkpoint order is this order
std::vector<LayerSpec> manifest(const NetConfig& c) {
    std::vector<LayerSpec> m;
    int f = c.feat_dim;
    int w64 = c.width(64), w256 = c.width(256);
    int lg = 2 * w256;  // local-global feature width
    for (size_t j = 0; j < c.radii.size(); ++j)
        push_mlp(m, "sc1.s" + std::to_string(j), f + 3,
                 {c.width(32), c.width(32), c.width(64)});
    push_mlp(m, "sc1.fuse", static_cast<int>(c.radii.size()) * w64, {w256});
    push_mlp(m, "cv", 2 * lg + 3, {lg, lg, lg});
    int fe = lg + lg + f;  // correlated + local-global + raw features
    for (size_t j = 0; j < c.radii.size(); ++j)
        push_mlp(m, "sc2.s" + std::to_string(j), fe + 3,
                 {c.width(512), c.width(256), c.width(64)});
    // fuse input: concatenated scales plus their pooled global counterpart
    push_mlp(m, "sc2.fuse", 2 * static_cast<int>(c.radii.size()) * w64, {w256});
    push_mlp(m, "flow", 2 * w256, {w256, c.width(128), w64, 3});
    push_mlp(m, "seg", 2 * w256, {w256, c.width(128), w64, 1});
    if (c.use_gru) {
        int h = c.hidden_dim();
        for (const char* gate : {"z", "r", "h"}) {
            m.push_back({std::string("gru.w") + gate, h, h});
            m.push_back({std::string("gru.u") + gate, h, h});
            m.push_back({std::string("gru.b") + gate, 1, h});
        }
    }
    return m;
}

enum class LastAct { Linear, Relu, Sigmoid };

Value run_mlp(Tape& tape, const Lifted& p, const std::string& prefix, int n_layers, Value x,
              LastAct last) {
    for (int l = 0; l < n_layers; ++l) {
        const std::string idx = std::to_string(l);
        Value w = p.at(prefix + ".w" + idx);
        Value b = p.at(prefix + ".b" + idx);
        int rows = tape.val(x).rows();
        x = ad::add(ad::matmul(x, w), ad::broadcast_rows(b, rows));
        if (l + 1 < n_layers)
            x = ad::relu(x);
        else if (last == LastAct::Relu)
            x = ad::relu(x);
        else if (last == LastAct::Sigmoid)
            x = ad::sigmoid(x);
    }
    return x;
}

Array frame_features(const sim::RadarFrame& frame, int feat_dim) {
    Array out({static_cast<int>(frame.size()), feat_dim});
    for (size_t i = 0; i < frame.size(); ++i) {
        if (feat_dim > 0) out.at(static_cast<int>(i), 0) = frame.rrv[i];
        if (feat_dim > 1) out.at(static_cast<int>(i), 1) = frame.rcs[i];
    }
    return out;
}

std::vector<int> flatten(const std::vector<std::vector<int>>& nbrs) {
    std::vector<int> flat;
    flat.reserve(nbrs.size() * (nbrs.empty() ? 0 : nbrs[0].size()));
    for (const auto& row : nbrs) flat.insert(flat.end(), row.begin(), row.end());
    return flat;
}

Array offsets_of(const std::vector<geo::Vec3>& centers, const std::vector<geo::Vec3>& pts,
                 const std::vector<std::vector<int>>& nbrs) {
    int k = static_cast<int>(nbrs[0].size());
    Array out({static_cast<int>(centers.size()) * k, 3});
    int r = 0;
    for (size_t i = 0; i < centers.size(); ++i)
        for (int j : nbrs[i]) {
            geo::Vec3 d = pts[j] - centers[i];
            out.at(r, 0) = d.x();
            out.at(r, 1) = d.y();
            out.at(r, 2) = d.z();
            ++r;
        }
    return out;
}

// inverse-distance softmax weights per neighborhood, as a column constant
Array softmax_weights(const std::vector<geo::Vec3>& centers, const std::vector<geo::Vec3>& pts,
                      const std::vector<std::vector<int>>& nbrs) {
    int k = static_cast<int>(nbrs[0].size());
    Array out({static_cast<int>(centers.size()) * k, 1});
    for (size_t i = 0; i < centers.size(); ++i) {
        double denom = 0.0;
        std::vector<double> e(k);
        for (int j = 0; j < k; ++j) {
            e[j] = std::exp(-(pts[nbrs[i][j]] - centers[i]).norm());
            denom += e[j];
        }
        for (int j = 0; j < k; ++j) out[i * k + j] = e[j] / denom;
    }
    return out;
}

std::vector<int> repeat_index(int n, int k) {
    std::vector<int> idx(static_cast<size_t>(n) * k);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < k; ++j) idx[static_cast<size_t>(i) * k + j] = i;
    return idx;
}

}  // namespace

std::vector<std::vector<int>> ball_query(const std::vector<geo::Vec3>& coords, double radius,
                                         int nsamples) {
    size_t n = coords.size();
    std::vector<std::vector<int>> out(n);
    double r2 = radius * radius;
    std::vector<std::pair<double, int>> cand;
    for (size_t i = 0; i < n; ++i) {
        cand.clear();
        for (size_t j = 0; j < n; ++j) {
            double d2 = (coords[j] - coords[i]).squaredNorm();
            if (d2 <= r2 || j == i) cand.emplace_back(d2, static_cast<int>(j));
        }
        std::sort(cand.begin(), cand.end());
        size_t take = std::min(cand.size(), static_cast<size_t>(nsamples));
        for (size_t j = 0; j < take; ++j) out[i].push_back(cand[j].second);
        while (out[i].size() < static_cast<size_t>(nsamples)) out[i].push_back(out[i][0]);
    }
    return out;
}

std::vector<std::vector<int>> knn(const std::vector<geo::Vec3>& queries,
                                  const std::vector<geo::Vec3>& pts, int k) {
    std::vector<std::vector<int>> out(queries.size());
    std::vector<std::pair<double, int>> cand(pts.size());
    for (size_t i = 0; i < queries.size(); ++i) {
        for (size_t j = 0; j < pts.size(); ++j)
            cand[j] = {(pts[j] - queries[i]).squaredNorm(), static_cast<int>(j)};
        std::sort(cand.begin(), cand.end());
        size_t take = std::min(cand.size(), static_cast<size_t>(k));
        for (size_t j = 0; j < take; ++j) out[i].push_back(cand[j].second);
        while (out[i].size() < static_cast<size_t>(k)) out[i].push_back(out[i][0]);
    }
    return out;
}

ParamStore ParamStore::init(const NetConfig& cfg, std::uint64_t seed) {
    ParamStore store;
    for (const LayerSpec& spec : manifest(cfg)) {
        Array a({spec.rows, spec.cols});
        // weights get a fan-balanced uniform range; biases get a small
        // nonzero range so no relu pre-activation sits exactly on its kink
        bool is_bias = spec.name.find(".b") != std::string::npos;
        double bound = is_bias ? 0.05 : std::sqrt(6.0 / (spec.rows + spec.cols));
        Rng rng(Rng::derive(seed, "init/" + spec.name));
        for (size_t i = 0; i < a.size(); ++i) a[i] = rng.uniform(-bound, bound);
        store.insert(spec.name, std::move(a));
    }
    return store;
}

ad::Array& ParamStore::at(const std::string& name) {
    auto it = params_.find(name);
    if (it == params_.end()) throw std::out_of_range("ParamStore: unknown parameter " + name);
    return it->second;
}

const ad::Array& ParamStore::at(const std::string& name) const {
    auto it = params_.find(name);
    if (it == params_.end()) throw std::out_of_range("ParamStore: unknown parameter " + name);
    return it->second;
}

void ParamStore::insert(const std::string& name, ad::Array value) {
    if (!params_.emplace(name, std::move(value)).second)
        throw std::invalid_argument("ParamStore: duplicate parameter " + name);
}

size_t ParamStore::count() const {
    size_t n = 0;
    for (const auto& [name, a] : params_) n += a.size();
    return n;
}

Lifted lift(ad::Tape& tape, const ParamStore& params, bool trainable) {
    Lifted lifted;
    for (const auto& [name, a] : params.entries())
        lifted.emplace(name, trainable ? tape.leaf(a) : tape.constant(a));
    return lifted;
}

Value Model::set_conv(Tape& tape, const Lifted& p, const std::string& prefix,
                      const std::vector<geo::Vec3>& coords, Value features,
                      bool global_fuse) const {
    int n = static_cast<int>(coords.size());
    std::vector<Value> scales;
    for (size_t j = 0; j < cfg_.radii.size(); ++j) {
        auto nbrs = ball_query(coords, cfg_.radii[j], cfg_.nsamples[j]);
        int k = cfg_.nsamples[j];
        Value gathered = ad::gather_rows(features, flatten(nbrs));
        Value x = ad::concat_cols({gathered, tape.constant(offsets_of(coords, coords, nbrs))});
        x = run_mlp(tape, p, prefix + ".s" + std::to_string(j), 3, x, LastAct::Relu);
        scales.push_back(ad::group_maxpool(x, n, k));
    }
    Value cat = ad::concat_cols(scales);
    if (global_fuse)
        cat = ad::concat_cols({cat, ad::broadcast_rows(ad::group_maxpool(cat, 1, n), n)});
    return run_mlp(tape, p, prefix + ".fuse", 1, cat, LastAct::Relu);
}

Value Model::cost_volume(Tape& tape, const Lifted& p, const std::vector<geo::Vec3>& src,
                         Value src_feat, const std::vector<geo::Vec3>& tgt,
                         Value tgt_feat) const {
    int n = static_cast<int>(src.size());
    int kt = std::min(cfg_.cv_neighbors, static_cast<int>(tgt.size()));
    auto cross = knn(src, tgt, kt);
    Value tgt_rows = ad::gather_rows(tgt_feat, flatten(cross));
    Value src_rows = ad::gather_rows(src_feat, repeat_index(n, kt));
    Value x = ad::concat_cols({src_rows, tgt_rows, tape.constant(offsets_of(src, tgt, cross))});
    x = run_mlp(tape, p, "cv", 3, x, LastAct::Relu);
    Value direct = ad::group_sum(
        ad::mul_rows(x, tape.constant(softmax_weights(src, tgt, cross))), n, kt);

    // patch-to-patch aggregation over source-side neighborhoods
    int ks = std::min(cfg_.cv_neighbors, n);
    auto patch = knn(src, src, ks);
    Value rows = ad::gather_rows(direct, flatten(patch));
    return ad::group_sum(ad::mul_rows(rows, tape.constant(softmax_weights(src, src, patch))), n,
                         ks);
}

Model::BackboneOut Model::backbone(Tape& tape, const Lifted& p, const sim::RadarFrame& src,
                                   const sim::RadarFrame& tgt,
                                   const std::vector<double>* hidden) const {
    int n = static_cast<int>(src.size());
    int m = static_cast<int>(tgt.size());
    Value fs = tape.constant(frame_features(src, cfg_.feat_dim));
    Value ft = tape.constant(frame_features(tgt, cfg_.feat_dim));

    Value l1s = set_conv(tape, p, "sc1", src.coords, fs);
    Value l1t = set_conv(tape, p, "sc1", tgt.coords, ft);
    Value lgs = ad::concat_cols({l1s, ad::broadcast_rows(ad::group_maxpool(l1s, 1, n), n)});
    Value lgt = ad::concat_cols({l1t, ad::broadcast_rows(ad::group_maxpool(l1t, 1, m), m)});

    Value corr = cost_volume(tape, p, src.coords, lgs, tgt.coords, lgt);
    Value fe = ad::concat_cols({corr, lgs, fs});
    Value local = set_conv(tape, p, "sc2", src.coords, fe, /*global_fuse=*/true);
    Value global = ad::group_maxpool(local, 1, n);

    BackboneOut out;
    if (cfg_.use_gru) {
        int h = cfg_.hidden_dim();
        Array prev({1, h});
        if (hidden) {
            if (static_cast<int>(hidden->size()) != h)
                throw ad::ShapeMismatch("backbone: hidden state width mismatch");
            for (int i = 0; i < h; ++i) prev[i] = (*hidden)[i];
        }
        Value hp = tape.constant(std::move(prev));
        Value z = ad::sigmoid(ad::add(ad::add(ad::matmul(global, p.at("gru.wz")),
                                              ad::matmul(hp, p.at("gru.uz"))),
                                      p.at("gru.bz")));
        Value r = ad::sigmoid(ad::add(ad::add(ad::matmul(global, p.at("gru.wr")),
                                              ad::matmul(hp, p.at("gru.ur"))),
                                      p.at("gru.br")));
        Value cand = ad::tanh_(ad::add(ad::add(ad::matmul(global, p.at("gru.wh")),
                                               ad::matmul(ad::mul(r, hp), p.at("gru.uh"))),
                                       p.at("gru.bh")));
        Value updated = ad::add(ad::mul(ad::sadd(ad::neg(z), 1.0), hp), ad::mul(z, cand));
        out.hidden = updated;
        out.embedding = ad::concat_cols({local, ad::broadcast_rows(updated, n)});
    } else {
        out.embedding = ad::concat_cols({local, ad::broadcast_rows(global, n)});
    }
    return out;
}

Value Model::flow_head(Tape& tape, const Lifted& p, Value embedding) const {
    return run_mlp(tape, p, "flow", 4, embedding, LastAct::Linear);
}

Value Model::seg_head(Tape& tape, const Lifted& p, Value embedding) const {
    return run_mlp(tape, p, "seg", 4, embedding, LastAct::Sigmoid);
}

Value Model::ego_head(Tape& tape, const std::vector<geo::Vec3>& coords, Value init_flow,
                      Value seg, bool* fallback) const {
    Array src = Array::from_points(coords);
    Value warped = ad::add(tape.constant(src), init_flow);
    Value weights = ad::sadd(ad::neg(seg), 1.0);
    const Array& wv = tape.val(weights);
    double total = 0.0;
    for (size_t i = 0; i < wv.size(); ++i) total += wv[i];
    if (fallback) *fallback = false;
    if (total <= 1e-9) {
        // every point labeled moving: no static support, fit all points equally
        weights = tape.constant(Array({static_cast<int>(coords.size()), 1},
                                      std::vector<double>(coords.size(), 1.0)));
        if (fallback) *fallback = true;
    }
    return ad::kabsch_rt(src, warped, weights);
}

Model::Refined Model::refine(Tape& tape, const std::vector<geo::Vec3>& coords, Value init_flow,
                             Value moving_prob, Value ego_rt) const {
    const Array& probs = tape.val(moving_prob);
    std::vector<char> mask(probs.size());
    for (size_t i = 0; i < probs.size(); ++i) mask[i] = probs[i] > cfg_.eta_b;
    Value rigid = ad::rigid_flow_of(ego_rt, Array::from_points(coords));
    Refined out;
    out.final_flow = ad::where_rows(mask, init_flow, rigid);
    out.moving_mask = std::move(mask);
    return out;
}

ForwardValues Model::forward(Tape& tape, const Lifted& p, const sim::RadarFrame& src,
                             const sim::RadarFrame& tgt, const ForwardOptions& opts) const {
    BackboneOut bb = backbone(tape, p, src, tgt, opts.hidden);
    ForwardValues out;
    out.init_flow = flow_head(tape, p, bb.embedding);
    out.moving_prob = seg_head(tape, p, bb.embedding);
    Value seg = out.moving_prob;
    if (opts.ego_seg) {
        if (opts.ego_seg->size() != src.size())
            throw ad::ShapeMismatch("forward: ego_seg length mismatch");
        seg = tape.constant(Array({static_cast<int>(src.size()), 1}, *opts.ego_seg));
    }
    out.ego_rt = ego_head(tape, src.coords, out.init_flow, seg, &out.ego_fallback_uniform);
    Refined r = refine(tape, src.coords, out.init_flow, out.moving_prob, out.ego_rt);
    out.final_flow = r.final_flow;
    out.moving_mask = std::move(r.moving_mask);
    out.hidden = bb.hidden;
    return out;
}

ModelOutput Model::run(const sim::RadarFrame& src, const sim::RadarFrame& tgt,
                       const std::vector<double>* hidden) const {
    Tape tape;
    Lifted p = lift(tape, params_, /*trainable=*/false);
    ForwardOptions opts;
    opts.hidden = hidden;
    ForwardValues fv = forward(tape, p, src, tgt, opts);

    ModelOutput out;
    out.init_flow = tape.val(fv.init_flow).to_points();
    out.final_flow = tape.val(fv.final_flow).to_points();
    const Array& probs = tape.val(fv.moving_prob);
    out.moving_prob.assign(probs.data(), probs.data() + probs.size());
    out.moving_mask = fv.moving_mask;
    out.ego = ad::to_transform(tape.val(fv.ego_rt));
    out.ego_fallback_uniform = fv.ego_fallback_uniform;
    if (cfg_.use_gru) {
        const Array& h = tape.val(fv.hidden);
        out.hidden.assign(h.data(), h.data() + h.size());
    }
    return out;
}

}  // namespace cmflow::net
