#include "doctest.h"

#include <cmath>

#include "diffcore.hpp"
#include "rng.hpp"

using namespace cmflow;
using namespace cmflow::ad;

namespace {

Array random_array(Rng& rng, std::vector<int> shape, double lo = -1.0, double hi = 1.0) {
    Array a(std::move(shape));
    for (size_t i = 0; i < a.size(); ++i) a[i] = rng.uniform(lo, hi);
    return a;
}

}  // namespace

TEST_CASE("elementwise forward values") {
    Tape t;
    Value x = t.constant(Array({2}, {-2.0, 3.0}));
    CHECK(t.val(relu(x))[0] == 0.0);
    CHECK(t.val(relu(x))[1] == 3.0);

    Value z = t.constant(Array::scalar(0.0));
    CHECK(t.val(sigmoid(z))[0] == doctest::Approx(0.5).epsilon(1e-15));
}

TEST_CASE("matmul forward against hand multiplication") {
    Tape t;
    Value a = t.constant(Array({2, 3}, {1, 2, 3, 4, 5, 6}));
    Value b = t.constant(Array({3, 2}, {7, 8, 9, 10, 11, 12}));
    const Array& c = t.val(matmul(a, b));
    CHECK(c.at(0, 0) == 58);
    CHECK(c.at(0, 1) == 64);
    CHECK(c.at(1, 0) == 139);
    CHECK(c.at(1, 1) == 154);
}

TEST_CASE("backward product rule") {
    Tape t;
    Value x = t.leaf(Array::scalar(2.0));
    Value y = t.leaf(Array::scalar(3.0));
    Value p = mul(x, y);
    t.backward(p);
    CHECK(t.grad(x)[0] == 3.0);
    CHECK(t.grad(y)[0] == 2.0);
}

TEST_CASE("backward sum of relu") {
    Tape t;
    Value x = t.leaf(Array({2}, {-1.0, 2.0}));
    t.backward(sum(relu(x)));
    CHECK(t.grad(x)[0] == 0.0);
    CHECK(t.grad(x)[1] == 1.0);
}

TEST_CASE("gradients of unused leaves are zero") {
    Tape t;
    Value x = t.leaf(Array::scalar(1.5));
    Value unused = t.leaf(Array({3}, {1, 2, 3}));
    t.backward(mul(x, x));
    CHECK(t.grad(x)[0] == 3.0);
    for (int i = 0; i < 3; ++i) CHECK(t.grad(unused)[i] == 0.0);
}

TEST_CASE("two backward passes agree") {
    Rng rng(5);
    Tape t;
    Value w = t.leaf(random_array(rng, {4, 4}));
    Value x = t.constant(random_array(rng, {4, 2}));
    Value out = mean(sigmoid(matmul(w, x)));
    t.backward(out);
    Array g1 = t.grad(w);
    t.backward(out);
    Array g2 = t.grad(w);
    for (size_t i = 0; i < g1.size(); ++i) CHECK(g1[i] == g2[i]);
}

TEST_CASE("non-scalar backward rejected") {
    Tape t;
    Value x = t.leaf(Array({2}, {1.0, 2.0}));
    CHECK_THROWS_AS(t.backward(relu(x)), NonScalarOutput);
}

TEST_CASE("shape mismatch detected") {
    Tape t;
    Value a = t.constant(Array({2, 2}));
    Value b = t.constant(Array({3, 2}));
    CHECK_THROWS_AS(add(a, b), ShapeMismatch);
    CHECK_THROWS_AS(matmul(a, b), ShapeMismatch);
}

TEST_CASE("domain errors") {
    Tape t;
    Value x = t.constant(Array({1}, {-1.0}));
    CHECK_THROWS_AS(log_(x), DomainError);
    CHECK_THROWS_AS(sqrt_(x), DomainError);
}

TEST_CASE("gradcheck mean(sigmoid(Wx)) vs central differences") {
    Rng rng(9);
    Array w = random_array(rng, {4, 4});
    Array x = random_array(rng, {4, 4});
    double err = gradcheck(
        [&](Tape& t, const std::vector<Value>& p) {
            return mean(sigmoid(matmul(p[0], t.constant(x))));
        },
        {w});
    CHECK(err < 1e-6);
}

TEST_CASE("gradcheck exact for linear functions") {
    Rng rng(13);
    Array w = random_array(rng, {5});
    double err = gradcheck(
        [&](Tape& t, const std::vector<Value>& p) { return smul(sum(p[0]), 2.5); }, {w});
    CHECK(err < 1e-10);
}

TEST_CASE("gradcheck flags a wrong gradient") {
    // deliberately wrong vjp: claims d/dx sum(2x) = 1
    Array x({3}, {0.3, -0.7, 1.1});
    double err = gradcheck(
        [&](Tape& t, const std::vector<Value>& p) {
            const Array& v = t.val(p[0]);
            Array out = Array::scalar(0.0);
            for (size_t i = 0; i < v.size(); ++i) out[0] += 2.0 * v[i];
            return make_node(t, std::move(out), {p[0]}, [p](Tape& t, int self) {
                const Array& g = grad_of(t, self);
                Array& ga = grad_of(t, p[0].id);
                for (size_t i = 0; i < ga.size(); ++i) ga[i] += g[0] * 1.0;
            });
        },
        {x});
    CHECK(err > 1e-2);
}

TEST_CASE("gradcheck of composite primitives") {
    Rng rng(17);
    SUBCASE("reductions and row ops") {
        Array x = random_array(rng, {6, 3});
        Array s = random_array(rng, {6, 1}, 0.2, 1.0);
        double err = gradcheck(
            [&](Tape& t, const std::vector<Value>& p) {
                Value n = rows_norm(p[0]);
                Value scaled = mul_rows(p[0], p[1]);
                return add(mean(n), mean(rowwise_sum(mul(scaled, scaled))));
            },
            {x, s});
        CHECK(err < 1e-6);
    }
    SUBCASE("concat, slice, gather, transpose") {
        Array a = random_array(rng, {4, 2});
        Array b = random_array(rng, {4, 3});
        double err = gradcheck(
            [&](Tape& t, const std::vector<Value>& p) {
                Value cat = concat_cols({p[0], p[1]});
                Value g = gather_rows(cat, {3, 0, 0, 2});
                Value s = slice_rows(g, 1, 4);
                return mean(mul(s, s));
            },
            {a, b});
        CHECK(err < 1e-6);
    }
    SUBCASE("nonlinearities") {
        Array x = random_array(rng, {5, 2}, 0.1, 2.0);
        double err = gradcheck(
            [&](Tape& t, const std::vector<Value>& p) {
                return mean(add(log_(p[0]), add(exp_(smul(p[0], 0.3)),
                                                add(sqrt_(p[0]), tanh_(p[0])))));
            },
            {x});
        CHECK(err < 1e-6);
    }
    SUBCASE("group_sum") {
        Array x = random_array(rng, {8, 3});
        double err = gradcheck(
            [&](Tape& t, const std::vector<Value>& p) {
                return mean(mul(group_sum(p[0], 2, 4), group_sum(p[0], 2, 4)));
            },
            {x});
        CHECK(err < 1e-6);
        Tape t;
        Value v = t.constant(Array({4, 1}, {1, 2, 3, 4}));
        const Array& s = t.val(group_sum(v, 2, 2));
        CHECK(s[0] == 3.0);
        CHECK(s[1] == 7.0);
    }
    SUBCASE("broadcast and where") {
        Array a = random_array(rng, {1, 4});
        Array b = random_array(rng, {5, 4});
        std::vector<char> mask = {1, 0, 1, 0, 1};
        double err = gradcheck(
            [&](Tape& t, const std::vector<Value>& p) {
                Value wide = broadcast_rows(p[0], 5);
                return mean(abs_(where_rows(mask, wide, p[1])));
            },
            {a, b});
        CHECK(err < 1e-6);
    }
}

TEST_CASE("group_maxpool routes gradient to argmax, ties to lowest index") {
    Tape t;
    // two groups of three rows, one column; first group has a tie
    Value x = t.leaf(Array({6, 1}, {2.0, 2.0, 1.0, 0.0, 5.0, 3.0}));
    Value pooled = group_maxpool(x, 2, 3);
    CHECK(t.val(pooled)[0] == 2.0);
    CHECK(t.val(pooled)[1] == 5.0);
    t.backward(sum(pooled));
    CHECK(t.grad(x)[0] == 1.0);  // tie broken to index 0
    CHECK(t.grad(x)[1] == 0.0);
    CHECK(t.grad(x)[4] == 1.0);
}

TEST_CASE("kabsch primitive forward matches geometry module") {
    Rng rng(21);
    int n = 10;
    Array src = random_array(rng, {n, 3}, -5, 5);
    Array warped = random_array(rng, {n, 3}, -5, 5);
    Array weights = random_array(rng, {n}, 0.2, 1.0);

    Tape t;
    Value rt = kabsch_rt(src, t.constant(warped), t.constant(weights));
    geo::RigidTransform got = to_transform(t.val(rt));

    std::vector<double> w(weights.data(), weights.data() + weights.size());
    geo::RigidTransform want = geo::weighted_kabsch(src.to_points(), warped.to_points(), w);
    CHECK((got.rotation - want.rotation).cwiseAbs().maxCoeff() < 1e-14);
    CHECK((got.translation - want.translation).norm() < 1e-14);
}

TEST_CASE("kabsch primitive gradcheck through a scalar loss") {
    Rng rng(25);
    int n = 8;
    Array src = random_array(rng, {n, 3}, -5, 5);
    Array warped = random_array(rng, {n, 3}, -5, 5);
    Array weights = random_array(rng, {n}, 0.2, 1.0);
    Array target = random_array(rng, {4, 3});

    SUBCASE("w.r.t. warped coordinates") {
        double err = gradcheck(
            [&](Tape& t, const std::vector<Value>& p) {
                Value rt = kabsch_rt(src, p[0], t.constant(weights));
                Value d = sub(rt, t.constant(target));
                return mean(mul(d, d));
            },
            {warped}, 1e-5);
        CHECK(err < 1e-4);
    }
    SUBCASE("w.r.t. weights") {
        double err = gradcheck(
            [&](Tape& t, const std::vector<Value>& p) {
                Value rt = kabsch_rt(src, t.constant(warped), p[0]);
                Value d = sub(rt, t.constant(target));
                return mean(mul(d, d));
            },
            {weights}, 1e-5);
        CHECK(err < 1e-4);
    }
}

TEST_CASE("rigid_flow_of matches geometry rigid_flow") {
    Rng rng(29);
    Array coords = random_array(rng, {7, 3}, -4, 4);
    geo::RigidTransform tr = geo::rot_z(0.4, geo::Vec3(1, -2, 0.5));
    Array rt43({4, 3});
    for (int r = 0; r < 3; ++r)
        for (int c = 0; c < 3; ++c) rt43.at(r, c) = tr.rotation(r, c);
    for (int c = 0; c < 3; ++c) rt43.at(3, c) = tr.translation(c);

    Tape t;
    Value flow = rigid_flow_of(t.constant(rt43), coords);
    auto want = geo::rigid_flow(tr, coords.to_points());
    auto got = t.val(flow).to_points();
    for (size_t i = 0; i < want.size(); ++i) CHECK(got[i] == want[i]);

    double err = gradcheck(
        [&](Tape& tp, const std::vector<Value>& p) {
            Value f = rigid_flow_of(p[0], coords);
            return mean(mul(f, f));
        },
        {rt43});
    CHECK(err < 1e-6);
}

TEST_CASE("gradcheck coordinate sampling is deterministic") {
    Rng rng(33);
    Array w = random_array(rng, {20, 20});
    auto build = [&](Tape& t, const std::vector<Value>& p) { return mean(mul(p[0], p[0])); };
    double a = gradcheck(build, {w}, 1e-5, 16, 7);
    double b = gradcheck(build, {w}, 1e-5, 16, 7);
    CHECK(a == b);
    CHECK(a < 1e-8);
}
