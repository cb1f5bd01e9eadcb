#include "training.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <thread>

#include "rng.hpp"

namespace cmflow::train {

using ad::Array;
using ad::Tape;
using ad::Value;

void TrainConfig::validate() const {
    if (lr <= 0) throw InvalidConfig("train: lr must be positive");
    if (decay <= 0 || decay > 1) throw InvalidConfig("train: decay must lie in (0, 1]");
    if (epochs < 1) throw InvalidConfig("train: epochs must be at least 1");
    if (batch_size < 1) throw InvalidConfig("train: batch_size must be at least 1");
    if (clip_len < 1) throw InvalidConfig("train: clip_len must be at least 1");
    if (scale <= 0) throw InvalidConfig("train: scale must be positive");
    if (grad_clip <= 0) throw InvalidConfig("train: grad_clip must be positive");
    if (threads < 1) throw InvalidConfig("train: threads must be at least 1");
}

net::NetConfig TrainConfig::net_config() const {
    net::NetConfig n;
    n.scale = scale;
    n.use_gru = use_gru;
    n.eta_b = eta_b;
    return n;
}

loss::LossOptions TrainConfig::loss_options() const {
    loss::LossOptions o;
    o.lambda_opt = lambda_opt;
    o.self_weights = self_weights;
    o.use_odometry = odometer;
    o.use_labels = lidar_boxes;
    o.use_camera = camera;
    o.use_self = true;
    return o;
}

Dataset build_dataset(const std::vector<sim::Sequence>& seqs, const TrainConfig& cfg) {
    Dataset data;
    for (const auto& seq : seqs) {
        TrainSequence ts;
        for (size_t k = 0; k + 1 < seq.frames.size(); ++k) {
            PairSample s;
            s.src = seq.frames[k];
            s.tgt = seq.frames[k + 1];
            s.calib = seq.calib;
            s.dt = seq.dt;
            size_t n = s.src.size();

            sup::LabelBundle& b = s.bundle;
            if (cfg.odometer) {
                b.pseudo_T = sup::ego_pseudo_transform(seq.odom_poses[k], seq.odom_poses[k + 1]);
                b.rigid_flow_r = geo::rigid_flow(b.pseudo_T, s.src.coords);
                b.s_v = sup::rrv_motion_label(s.src, b.pseudo_T, seq.dt, cfg.eta_v).s_v;
            } else {
                b.pseudo_T = geo::RigidTransform::identity();
                b.rigid_flow_r.assign(n, geo::Vec3::Zero());
                b.s_v.assign(n, 0);
            }
            if (cfg.lidar_boxes) {
                sup::MotLabel mot = sup::mot_labels(s.src, seq.boxes[k], seq.boxes[k + 1]);
                b.s_fg = std::move(mot.s_fg);
                b.f_fg = std::move(mot.f_fg);
                b.s_l = sup::distill_moving(b.f_fg, b.s_fg, b.rigid_flow_r, cfg.eta_l);
            } else {
                b.s_fg.assign(n, 0);
                b.f_fg.assign(n, std::nullopt);
                b.s_l.assign(n, 0);
            }
            b.s_fused = sup::fuse_labels(b.s_l, b.s_v);
            if (cfg.camera)
                b.w_opt = sup::optical_labels(s.src, seq.optflow[k], seq.calib);
            else
                b.w_opt.assign(n, std::nullopt);
            b.validate();
            ts.pairs.push_back(std::move(s));
        }
        data.push_back(std::move(ts));
    }
    return data;
}

std::vector<Clip> split_clips(int n_pairs, int T, int sequence) {
    if (T < 1) throw InvalidConfig("split_clips: T must be at least 1");
    std::vector<Clip> clips;
    for (int start = 0; start < n_pairs; start += T) {
        Clip c;
        c.sequence = sequence;
        for (int i = start; i < std::min(start + T, n_pairs); ++i) c.pair_indices.push_back(i);
        clips.push_back(std::move(c));
    }
    return clips;
}

std::vector<Clip> split_dataset(const Dataset& data, int T) {
    std::vector<Clip> all;
    for (size_t s = 0; s < data.size(); ++s) {
        auto clips = split_clips((int)data[s].pairs.size(), T, (int)s);
        all.insert(all.end(), clips.begin(), clips.end());
    }
    return all;
}

void adam_step(net::ParamStore& params, const std::map<std::string, ad::Array>& grads,
               AdamState& state, double lr) {
    constexpr double b1 = 0.9, b2 = 0.999, eps = 1e-8;
    ++state.t;
    double c1 = 1.0 - std::pow(b1, (double)state.t);
    double c2 = 1.0 - std::pow(b2, (double)state.t);
    for (const auto& [name, g] : grads) {
        Array& p = params.at(name);
        if (!p.same_shape(g)) throw ad::ShapeMismatch("adam_step: gradient shape for " + name);
        auto mi = state.m.find(name);
        if (mi == state.m.end()) {
            mi = state.m.emplace(name, Array::zeros(g.shape())).first;
            state.v.emplace(name, Array::zeros(g.shape()));
        }
        Array& m = mi->second;
        Array& v = state.v.at(name);
        for (size_t i = 0; i < g.size(); ++i) {
            m[i] = b1 * m[i] + (1.0 - b1) * g[i];
            v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
            p[i] -= lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + eps);
        }
    }
}

double clip_gradients(std::map<std::string, ad::Array>& grads, double max_norm) {
    double sq = 0;
    for (const auto& [name, g] : grads)
        for (size_t i = 0; i < g.size(); ++i) sq += g[i] * g[i];
    double norm = std::sqrt(sq);
    if (norm > max_norm && norm > 0) {
        double s = max_norm / norm;
        for (auto& [name, g] : grads)
            for (size_t i = 0; i < g.size(); ++i) g[i] *= s;
    }
    return norm;
}

namespace {

struct PairLossSums {
    double total = 0, ego = 0, seg = 0, mot = 0, opt = 0, self_ = 0;
    int n = 0;
};

struct ClipWork {
    std::map<std::string, Array> grads;
    PairLossSums sums;
};

// forward + backward over one clip, threading the hidden state with a
// detach between consecutive pairs
ClipWork run_clip(const net::Model& shell, const net::ParamStore& params, const TrainConfig& cfg,
                  const TrainSequence& seq, const Clip& clip, const TrainHooks& hooks) {
    ClipWork work;
    std::vector<double> hidden;
    if (cfg.use_gru) hidden.assign(cfg.net_config().hidden_dim(), 0.0);
    if (hooks.on_clip_start) hooks.on_clip_start(hidden);

    loss::LossOptions lopts = cfg.loss_options();
    for (int idx : clip.pair_indices) {
        const PairSample& sample = seq.pairs[idx];
        Tape tape;
        net::Lifted p = net::lift(tape, params, true);
        std::vector<double> ego_seg(sample.bundle.s_fused.begin(), sample.bundle.s_fused.end());
        net::ForwardOptions fopts;
        fopts.ego_seg = &ego_seg;
        if (cfg.use_gru) fopts.hidden = &hidden;
        net::ForwardValues fv = shell.forward(tape, p, sample.src, sample.tgt, fopts);
        loss::LossValues lv = loss::total_loss(tape, fv, sample.src, sample.tgt, sample.bundle,
                                               sample.calib, sample.dt, lopts);
        loss::LossReport r = loss::to_report(tape, lv, cfg.lambda_opt);
        if (!std::isfinite(r.total))
            throw NonFiniteLoss("train: non-finite loss at sequence " +
                                std::to_string(clip.sequence) + " pair " + std::to_string(idx));
        tape.backward(lv.total);
        for (const auto& [name, val] : p) {
            const Array& g = tape.grad(val);
            auto it = work.grads.find(name);
            if (it == work.grads.end())
                work.grads.emplace(name, g);
            else
                for (size_t i = 0; i < g.size(); ++i) it->second[i] += g[i];
        }
        work.sums.total += r.total;
        work.sums.ego += r.ego;
        work.sums.seg += r.seg;
        work.sums.mot += r.mot;
        work.sums.opt += r.opt;
        work.sums.self_ += r.self_;
        ++work.sums.n;
        if (cfg.use_gru) {
            const Array& h = tape.val(fv.hidden);
            hidden.assign(h.data(), h.data() + h.size());
        }
    }
    return work;
}

}  // namespace

double validation_epe(const net::Model& model, const std::vector<EvalPair>& val) {
    double sum = 0;
    for (const auto& pair : val) {
        net::ModelOutput out = model.run(pair.src, pair.tgt);
        double e = 0;
        for (size_t i = 0; i < pair.gt_flow.size(); ++i)
            e += (out.final_flow[i] - pair.gt_flow[i]).norm();
        sum += e / (double)pair.gt_flow.size();
    }
    return val.empty() ? 0.0 : sum / (double)val.size();
}

TrainResult train(const Dataset& data, const TrainConfig& cfg, const std::vector<EvalPair>* val,
                  const net::ParamStore* resume, const TrainHooks& hooks) {
    cfg.validate();
    net::NetConfig ncfg = cfg.net_config();
    net::ParamStore params =
        resume ? *resume : net::ParamStore::init(ncfg, Rng::derive(cfg.seed, "params"));
    net::Model shell(ncfg, net::ParamStore{});

    std::vector<Clip> clips = split_dataset(data, cfg.clip_len);
    AdamState adam;
    TrainResult result;
    int step = 0;

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        double lr_e = cfg.lr * std::pow(cfg.decay, (double)epoch);
        std::vector<int> order(clips.size());
        for (size_t i = 0; i < order.size(); ++i) order[i] = (int)i;
        Rng shuffle = Rng::sub(cfg.seed, "shuffle/" + std::to_string(epoch));
        for (size_t i = order.size(); i > 1; --i)
            std::swap(order[i - 1], order[shuffle.uniform_index(i)]);

        for (size_t b0 = 0; b0 < order.size(); b0 += (size_t)cfg.batch_size) {
            size_t b1 = std::min(b0 + (size_t)cfg.batch_size, order.size());
            std::vector<ClipWork> works(b1 - b0);
            auto run_one = [&](size_t j) {
                const Clip& clip = clips[order[b0 + j]];
                works[j] = run_clip(shell, params, cfg, data[clip.sequence], clip, hooks);
            };
            if (cfg.threads > 1 && b1 - b0 > 1) {
                std::vector<std::thread> pool;
                std::atomic<size_t> next{0};
                int nt = std::min<int>(cfg.threads, (int)(b1 - b0));
                for (int t = 0; t < nt; ++t)
                    pool.emplace_back([&] {
                        for (size_t j = next.fetch_add(1); j < works.size();
                             j = next.fetch_add(1))
                            run_one(j);
                    });
                for (auto& t : pool) t.join();
            } else {
                for (size_t j = 0; j < works.size(); ++j) run_one(j);
            }

            // deterministic reduction in clip-index order
            std::map<std::string, Array> grads;
            PairLossSums sums;
            for (const auto& w : works) {
                for (const auto& [name, g] : w.grads) {
                    auto it = grads.find(name);
                    if (it == grads.end())
                        grads.emplace(name, g);
                    else
                        for (size_t i = 0; i < g.size(); ++i) it->second[i] += g[i];
                }
                sums.total += w.sums.total;
                sums.ego += w.sums.ego;
                sums.seg += w.sums.seg;
                sums.mot += w.sums.mot;
                sums.opt += w.sums.opt;
                sums.self_ += w.sums.self_;
                sums.n += w.sums.n;
            }
            if (sums.n == 0) continue;
            for (auto& [name, g] : grads)
                for (size_t i = 0; i < g.size(); ++i) g[i] /= (double)sums.n;
            clip_gradients(grads, cfg.grad_clip);
            adam_step(params, grads, adam, lr_e);

            StepLog log;
            log.epoch = epoch;
            log.step = step++;
            log.lr = lr_e;
            log.report.total = sums.total / sums.n;
            log.report.ego = sums.ego / sums.n;
            log.report.seg = sums.seg / sums.n;
            log.report.mot = sums.mot / sums.n;
            log.report.opt = sums.opt / sums.n;
            log.report.self_ = sums.self_ / sums.n;
            log.report.lambda_opt = cfg.lambda_opt;
            if (hooks.on_step) hooks.on_step(log);
            result.log.push_back(log);
        }

        if (val && !val->empty()) {
            net::Model current(ncfg, params);
            double epe = validation_epe(current, *val);
            if (result.best_val_epe < 0 || epe < result.best_val_epe) {
                result.best_val_epe = epe;
                result.best_params = params;
            }
        }
    }
    result.params = params;
    if (result.best_val_epe < 0) result.best_params = result.params;
    return result;
}

}  // namespace cmflow::train
