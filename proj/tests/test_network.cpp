#include "doctest.h"

#include <cmath>

#include "network.hpp"
#include "rng.hpp"

using namespace cmflow;
using namespace cmflow::net;
using ad::Array;
using ad::Tape;
using ad::Value;

namespace {

NetConfig test_config() {
    NetConfig c;
    c.scale = 0.125;
    return c;
}

sim::RadarFrame random_frame(Rng& rng, int n) {
    sim::RadarFrame f;
    for (int i = 0; i < n; ++i) {
        f.coords.push_back(geo::Vec3(rng.uniform(5, 25), rng.uniform(-8, 8), rng.uniform(-2, 2)));
        f.rrv.push_back(rng.uniform(-3, 3));
        f.rcs.push_back(rng.uniform(0, 20));
    }
    return f;
}

sim::RadarFrame permuted(const sim::RadarFrame& f, const std::vector<int>& perm) {
    sim::RadarFrame out;
    out.timestamp = f.timestamp;
    for (int i : perm) {
        out.coords.push_back(f.coords[i]);
        out.rrv.push_back(f.rrv[i]);
        out.rcs.push_back(f.rcs[i]);
    }
    return out;
}

}  // namespace

TEST_CASE("parameter store shapes and determinism") {
    NetConfig cfg = test_config();
    ParamStore a = ParamStore::init(cfg, 5);
    ParamStore b = ParamStore::init(cfg, 5);
    CHECK(a.count() == b.count());
    CHECK(a.count() > 1000);
    for (const auto& [name, arr] : a.entries()) {
        const Array& other = b.at(name);
        REQUIRE(arr.size() == other.size());
        for (size_t i = 0; i < arr.size(); ++i) CHECK(arr[i] == other[i]);
    }
    ParamStore c = ParamStore::init(cfg, 6);
    CHECK(c.at("flow.w0")[0] != a.at("flow.w0")[0]);
    CHECK_THROWS_AS(a.at("nonexistent"), std::out_of_range);
}

TEST_CASE("set_conv") {
    NetConfig cfg = test_config();
    Model model(cfg, ParamStore::init(cfg, 11));
    Rng rng(3);

    SUBCASE("an isolated point uses itself and stays finite") {
        sim::RadarFrame f;
        f.coords = {geo::Vec3(100, 100, 0)};
        f.rrv = {1.0};
        f.rcs = {5.0};
        Tape t;
        Lifted p = lift(t, model.params(), false);
        Value feats = t.constant(Array({1, 2}, {1.0, 5.0}));
        Value out = model.set_conv(t, p, "sc1", f.coords, feats);
        const Array& v = t.val(out);
        CHECK(v.rows() == 1);
        for (size_t i = 0; i < v.size(); ++i) CHECK(std::isfinite(v[i]));
    }
    SUBCASE("permuting the points permutes the features") {
        sim::RadarFrame f = random_frame(rng, 12);
        std::vector<int> perm = {5, 0, 11, 3, 7, 1, 9, 2, 10, 4, 8, 6};
        sim::RadarFrame g = permuted(f, perm);

        Tape t;
        Lifted p = lift(t, model.params(), false);
        auto feats = [&](const sim::RadarFrame& fr) {
            Array a({static_cast<int>(fr.size()), 2});
            for (size_t i = 0; i < fr.size(); ++i) {
                a.at(static_cast<int>(i), 0) = fr.rrv[i];
                a.at(static_cast<int>(i), 1) = fr.rcs[i];
            }
            return t.constant(a);
        };
        Array a = t.val(model.set_conv(t, p, "sc1", f.coords, feats(f)));
        Array b = t.val(model.set_conv(t, p, "sc1", g.coords, feats(g)));
        for (size_t i = 0; i < perm.size(); ++i)
            for (int c = 0; c < a.cols(); ++c)
                CHECK(b.at(static_cast<int>(i), c) ==
                      doctest::Approx(a.at(perm[i], c)).epsilon(1e-12));
    }
    SUBCASE("coincident points share features") {
        sim::RadarFrame f = random_frame(rng, 6);
        f.coords[3] = f.coords[1];
        f.rrv[3] = f.rrv[1];
        f.rcs[3] = f.rcs[1];
        Tape t;
        Lifted p = lift(t, model.params(), false);
        Array a({6, 2});
        for (int i = 0; i < 6; ++i) {
            a.at(i, 0) = f.rrv[i];
            a.at(i, 1) = f.rcs[i];
        }
        const Array& v = t.val(model.set_conv(t, p, "sc1", f.coords, t.constant(a)));
        for (int c = 0; c < v.cols(); ++c) CHECK(v.at(1, c) == v.at(3, c));
    }
}

TEST_CASE("cost_volume") {
    NetConfig cfg = test_config();
    Model model(cfg, ParamStore::init(cfg, 13));
    Rng rng(7);
    int lg = 2 * cfg.width(256);

    SUBCASE("joint rigid translation of both clouds leaves the output unchanged") {
        sim::RadarFrame s = random_frame(rng, 10), g = random_frame(rng, 14);
        Array sf({10, lg}), gf({14, lg});
        for (size_t i = 0; i < sf.size(); ++i) sf[i] = rng.uniform(-1, 1);
        for (size_t i = 0; i < gf.size(); ++i) gf[i] = rng.uniform(-1, 1);

        Tape t;
        Lifted p = lift(t, model.params(), false);
        Array a =
            t.val(model.cost_volume(t, p, s.coords, t.constant(sf), g.coords, t.constant(gf)));

        geo::Vec3 shift(3.5, -2.0, 1.0);
        std::vector<geo::Vec3> s2 = s.coords, g2 = g.coords;
        for (auto& c : s2) c += shift;
        for (auto& c : g2) c += shift;
        Array b = t.val(model.cost_volume(t, p, s2, t.constant(sf), g2, t.constant(gf)));
        for (size_t i = 0; i < a.size(); ++i) CHECK(a[i] == doctest::Approx(b[i]).epsilon(1e-9));
    }
    SUBCASE("single-point clouds reduce to one evaluation") {
        Tape t;
        Lifted p = lift(t, model.params(), false);
        Array sf({1, lg}), gf({1, lg});
        for (size_t i = 0; i < sf.size(); ++i) sf[i] = 0.1;
        for (size_t i = 0; i < gf.size(); ++i) gf[i] = -0.2;
        Value out = model.cost_volume(t, p, {geo::Vec3(10, 0, 0)}, t.constant(sf),
                                      {geo::Vec3(10.5, 0, 0)}, t.constant(gf));
        const Array& v = t.val(out);
        CHECK(v.rows() == 1);
        for (size_t i = 0; i < v.size(); ++i) CHECK(std::isfinite(v[i]));
    }
    SUBCASE("permuting the target cloud does not change the output") {
        sim::RadarFrame s = random_frame(rng, 8), g = random_frame(rng, 12);
        Array sf({8, lg}), gf({12, lg});
        for (size_t i = 0; i < sf.size(); ++i) sf[i] = rng.uniform(-1, 1);
        for (size_t i = 0; i < gf.size(); ++i) gf[i] = rng.uniform(-1, 1);
        std::vector<int> perm = {4, 0, 7, 2, 11, 5, 9, 1, 10, 3, 8, 6};
        std::vector<geo::Vec3> g2;
        Array gf2({12, lg});
        for (size_t i = 0; i < perm.size(); ++i) {
            g2.push_back(g.coords[perm[i]]);
            for (int c = 0; c < lg; ++c) gf2.at(static_cast<int>(i), c) = gf.at(perm[i], c);
        }
        Tape t;
        Lifted p = lift(t, model.params(), false);
        Array a =
            t.val(model.cost_volume(t, p, s.coords, t.constant(sf), g.coords, t.constant(gf)));
        Array b =
            t.val(model.cost_volume(t, p, s.coords, t.constant(sf), g2, t.constant(gf2)));
        for (size_t i = 0; i < a.size(); ++i) CHECK(a[i] == doctest::Approx(b[i]).epsilon(1e-12));
    }
}

TEST_CASE("backbone output is per-source-point and deterministic") {
    NetConfig cfg = test_config();
    Model model(cfg, ParamStore::init(cfg, 17));
    Rng rng(19);
    sim::RadarFrame src = random_frame(rng, 9);
    for (int m : {5, 9, 20}) {
        sim::RadarFrame tgt = random_frame(rng, m);
        Tape t;
        Lifted p = lift(t, model.params(), false);
        const Array& e = t.val(model.backbone(t, p, src, tgt).embedding);
        CHECK(e.rows() == 9);
        CHECK(e.cols() == cfg.embed_dim());
    }
    sim::RadarFrame tgt = random_frame(rng, 9);
    Tape t;
    Lifted p = lift(t, model.params(), false);
    Array a = t.val(model.backbone(t, p, src, tgt).embedding);
    Array b = t.val(model.backbone(t, p, src, tgt).embedding);
    for (size_t i = 0; i < a.size(); ++i) CHECK(a[i] == b[i]);
}

TEST_CASE("heads") {
    NetConfig cfg = test_config();
    Model model(cfg, ParamStore::init(cfg, 23));
    Rng rng(29);
    int e = cfg.embed_dim();

    SUBCASE("segmentation output is strictly inside (0,1)") {
        Tape t;
        Lifted p = lift(t, model.params(), false);
        Array emb({7, e});
        for (size_t i = 0; i < emb.size(); ++i) emb[i] = rng.uniform(-30, 30);
        const Array& s = t.val(model.seg_head(t, p, t.constant(emb)));
        for (size_t i = 0; i < s.size(); ++i) {
            CHECK(s[i] > 0.0);
            CHECK(s[i] < 1.0);
        }
    }
    SUBCASE("zeroed flow head replicates its output bias") {
        ParamStore zeroed = ParamStore::init(cfg, 23);
        for (auto& [name, arr] : zeroed.entries())
            if (name.rfind("flow.", 0) == 0)
                for (size_t i = 0; i < arr.size(); ++i) arr[i] = 0.0;
        zeroed.at("flow.b3") = Array({1, 3}, {0.1, -0.2, 0.3});
        Model zm(cfg, std::move(zeroed));
        Tape t;
        Lifted p = lift(t, zm.params(), false);
        Array emb({4, e});
        for (size_t i = 0; i < emb.size(); ++i) emb[i] = rng.uniform(-1, 1);
        const Array& f = t.val(zm.flow_head(t, p, t.constant(emb)));
        for (int r = 0; r < 4; ++r) {
            CHECK(f.at(r, 0) == 0.1);
            CHECK(f.at(r, 1) == -0.2);
            CHECK(f.at(r, 2) == 0.3);
        }
    }
    SUBCASE("gradcheck through both heads") {
        NetConfig tiny = cfg;
        tiny.scale = 1.0 / 16.0;
        Model tm(tiny, ParamStore::init(tiny, 33));
        Rng erng(30);  // chosen to keep relu pre-activations away from zero
        Array emb({5, tiny.embed_dim()});
        for (size_t i = 0; i < emb.size(); ++i) emb[i] = erng.uniform(-1, 1);
        std::vector<Array> leaves;
        std::vector<std::string> names;
        for (const auto& [name, arr] : tm.params().entries())
            if (name.rfind("flow.", 0) == 0 || name.rfind("seg.", 0) == 0) {
                leaves.push_back(arr);
                names.push_back(name);
            }
        double err = ad::gradcheck(
            [&](Tape& t, const std::vector<Value>& vals) {
                Lifted p = lift(t, tm.params(), false);
                for (size_t i = 0; i < names.size(); ++i) p[names[i]] = vals[i];
                Value f = tm.flow_head(t, p, t.constant(emb));
                Value s = tm.seg_head(t, p, t.constant(emb));
                return ad::add(ad::mean(ad::mul(f, f)), ad::mean(s));
            },
            leaves, 1e-5);
        CHECK(err < 1e-6);
    }
}

TEST_CASE("ego_head") {
    NetConfig cfg = test_config();
    Model model(cfg, ParamStore::init(cfg, 37));
    Rng rng(41);
    std::vector<geo::Vec3> coords;
    for (int i = 0; i < 24; ++i)
        coords.push_back(geo::Vec3(rng.uniform(5, 25), rng.uniform(-8, 8), rng.uniform(-2, 2)));
    geo::RigidTransform truth = geo::rot_z(0.04, geo::Vec3(-0.6, 0.05, 0.01));
    auto flow = geo::rigid_flow(truth, coords);

    SUBCASE("recovers the transform from clean flow") {
        Tape t;
        Value f = t.constant(Array::from_points(flow));
        Value seg = t.constant(Array({24, 1}));
        bool fb = true;
        Value rt = model.ego_head(t, coords, f, seg, &fb);
        CHECK_FALSE(fb);
        auto [rte, rae] = geo::rte_rae(ad::to_transform(t.val(rt)), truth);
        CHECK(rte < 1e-9);
        CHECK(rae < 1e-7);
    }
    SUBCASE("fully weighted-out garbage points do not disturb the fit") {
        auto noisy = flow;
        Array seg({24, 1});
        for (int i = 0; i < 12; ++i) {
            noisy[i] += geo::Vec3(rng.uniform(-5, 5), rng.uniform(-5, 5), rng.uniform(-5, 5));
            seg[i] = 1.0;  // weight 1 - seg = 0
        }
        Tape t;
        Value rt = model.ego_head(t, coords, t.constant(Array::from_points(noisy)),
                                  t.constant(seg), nullptr);
        auto [rte, rae] = geo::rte_rae(ad::to_transform(t.val(rt)), truth);
        CHECK(rte < 1e-9);
        CHECK(rae < 1e-7);
    }
    SUBCASE("all-moving segmentation falls back to uniform weights") {
        Tape t;
        Array seg({24, 1});
        for (size_t i = 0; i < seg.size(); ++i) seg[i] = 1.0;
        bool fb = false;
        Value rt = model.ego_head(t, coords, t.constant(Array::from_points(flow)),
                                  t.constant(seg), &fb);
        CHECK(fb);
        auto [rte, rae] = geo::rte_rae(ad::to_transform(t.val(rt)), truth);
        CHECK(rte < 1e-9);  // uniform weights on clean flow still recover it
    }
}

TEST_CASE("refine selects per point by threshold") {
    NetConfig cfg = test_config();
    Model model(cfg, ParamStore::init(cfg, 43));
    Rng rng(47);
    std::vector<geo::Vec3> coords;
    for (int i = 0; i < 10; ++i)
        coords.push_back(geo::Vec3(rng.uniform(5, 25), rng.uniform(-8, 8), rng.uniform(-2, 2)));
    geo::RigidTransform tr = geo::rot_z(0.02, geo::Vec3(-0.4, 0, 0));
    Array rt43({4, 3});
    for (int r = 0; r < 3; ++r)
        for (int c = 0; c < 3; ++c) rt43.at(r, c) = tr.rotation(r, c);
    for (int c = 0; c < 3; ++c) rt43.at(3, c) = tr.translation(c);
    Array init({10, 3});
    for (size_t i = 0; i < init.size(); ++i) init[i] = rng.uniform(-1, 1);
    auto rigid = geo::rigid_flow(tr, coords);

    auto run_case = [&](const std::vector<double>& probs) {
        Tape t;
        auto r = model.refine(t, coords, t.constant(init),
                              t.constant(Array({10, 1}, probs)), t.constant(rt43));
        const Array& f = t.val(r.final_flow);
        for (int i = 0; i < 10; ++i) {
            bool moving = probs[i] > cfg.eta_b;
            CHECK(static_cast<bool>(r.moving_mask[i]) == moving);
            for (int c = 0; c < 3; ++c) {
                double want = moving ? init.at(i, c) : rigid[i](c);
                CHECK(f.at(i, c) == want);  // exact copy of the chosen branch
            }
        }
    };
    run_case(std::vector<double>(10, 0.9));
    run_case(std::vector<double>(10, 0.2));
    std::vector<double> mixed;
    for (int i = 0; i < 10; ++i) mixed.push_back(i % 2 ? 0.8 : 0.3);
    run_case(mixed);
}

TEST_CASE("full forward pass") {
    NetConfig cfg = test_config();
    Model model(cfg, ParamStore::init(cfg, 53));
    Rng rng(59);
    sim::RadarFrame src = random_frame(rng, 16);
    sim::RadarFrame tgt = random_frame(rng, 14);

    SUBCASE("untrained output is finite and satisfies the output invariants") {
        ModelOutput out = model.run(src, tgt);
        REQUIRE(out.init_flow.size() == 16);
        REQUIRE(out.final_flow.size() == 16);
        auto rigid = geo::rigid_flow(out.ego, src.coords);
        for (size_t i = 0; i < 16; ++i) {
            CHECK(out.init_flow[i].allFinite());
            CHECK(out.moving_prob[i] > 0.0);
            CHECK(out.moving_prob[i] < 1.0);
            CHECK(static_cast<bool>(out.moving_mask[i]) == (out.moving_prob[i] > cfg.eta_b));
            if (!out.moving_mask[i])
                for (int c = 0; c < 3; ++c) CHECK(out.final_flow[i](c) == rigid[i](c));
            else
                CHECK(out.final_flow[i] == out.init_flow[i]);
        }
        CHECK(out.ego.is_valid(1e-9));
    }
    SUBCASE("forward is deterministic") {
        ModelOutput a = model.run(src, tgt);
        ModelOutput b = model.run(src, tgt);
        for (size_t i = 0; i < 16; ++i) {
            CHECK(a.final_flow[i] == b.final_flow[i]);
            CHECK(a.moving_prob[i] == b.moving_prob[i]);
        }
    }
    SUBCASE("permutation equivariance of the whole model") {
        std::vector<int> perm = {9, 3, 15, 0, 12, 7, 1, 14, 5, 11, 2, 8, 13, 4, 10, 6};
        sim::RadarFrame src2 = permuted(src, perm);
        ModelOutput a = model.run(src, tgt);
        ModelOutput b = model.run(src2, tgt);
        for (size_t i = 0; i < perm.size(); ++i) {
            CHECK((b.init_flow[i] - a.init_flow[perm[i]]).norm() < 1e-9);
            CHECK(b.moving_prob[i] == doctest::Approx(a.moving_prob[perm[i]]).epsilon(1e-12));
            CHECK((b.final_flow[i] - a.final_flow[perm[i]]).norm() < 1e-9);
        }
        auto [rte, rae] = geo::rte_rae(b.ego, a.ego);
        CHECK(rte < 1e-9);
        CHECK(rae < 1e-7);
    }
}

TEST_CASE("temporal update module") {
    NetConfig cfg = test_config();
    cfg.use_gru = true;
    Model model(cfg, ParamStore::init(cfg, 61));
    Rng rng(67);
    sim::RadarFrame src = random_frame(rng, 12);
    sim::RadarFrame tgt = random_frame(rng, 12);

    SUBCASE("null hidden equals explicit zeros (clip start)") {
        std::vector<double> zeros(cfg.hidden_dim(), 0.0);
        ModelOutput a = model.run(src, tgt);
        ModelOutput b = model.run(src, tgt, &zeros);
        REQUIRE(a.hidden.size() == static_cast<size_t>(cfg.hidden_dim()));
        for (size_t i = 0; i < a.hidden.size(); ++i) CHECK(a.hidden[i] == b.hidden[i]);
    }
    SUBCASE("hidden state changes the prediction and chains across frames") {
        ModelOutput first = model.run(src, tgt);
        ModelOutput chained = model.run(src, tgt, &first.hidden);
        bool differs = false;
        for (size_t i = 0; i < 12; ++i)
            if ((chained.init_flow[i] - first.init_flow[i]).norm() > 1e-12) differs = true;
        CHECK(differs);
        ModelOutput again = model.run(src, tgt, &first.hidden);
        for (size_t i = 0; i < 12; ++i) CHECK(chained.init_flow[i] == again.init_flow[i]);
    }
    SUBCASE("wrong hidden width is rejected") {
        std::vector<double> bad(cfg.hidden_dim() + 1, 0.0);
        CHECK_THROWS_AS(model.run(src, tgt, &bad), ad::ShapeMismatch);
    }
}
