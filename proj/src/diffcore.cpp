#include "diffcore.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>

#include "rng.hpp"

namespace cmflow::ad {

namespace {

using MatMap = Eigen::Map<Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
using ConstMatMap =
    Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;

ConstMatMap as_mat(const Array& a) { return ConstMatMap(a.data(), a.rows(), a.cols()); }
MatMap as_mat(Array& a) { return MatMap(a.data(), a.rows(), a.cols()); }

void check_same_tape(Value a, Value b) {
    if (a.tape != b.tape) throw std::invalid_argument("values live on different tapes");
}

void require_same_shape(const Array& a, const Array& b, const char* op) {
    if (!a.same_shape(b)) throw ShapeMismatch(std::string(op) + ": shape mismatch");
}

// elementwise unary helper
Value unary(Value a, const std::function<double(double)>& f,
            const std::function<double(double, double)>& dfdx_times_g) {
    const Array& x = a.tape->val(a);
    Array out = x;
    for (size_t i = 0; i < out.size(); ++i) out[i] = f(x[i]);
    return make_node(*a.tape, std::move(out), {a}, [a, dfdx_times_g](Tape& t, int self) {
        const Array& g = val_of(t, self);
        (void)g;
        const Array& gout = grad_of(t, self);
        const Array& x = t.val(a);
        Array& gin = grad_of(t, a.id);
        for (size_t i = 0; i < x.size(); ++i) gin[i] += dfdx_times_g(x[i], gout[i]);
    });
}

}  // namespace

Value Tape::push(Array v, bool req, std::vector<int> inputs, std::function<void(Tape&, int)> vjp) {
    Node n;
    n.value = std::move(v);
    n.requires_grad = req;
    n.inputs = std::move(inputs);
    n.vjp = std::move(vjp);
    nodes_.push_back(std::move(n));
    return Value{this, static_cast<int>(nodes_.size()) - 1};
}

Value make_node(Tape& t, Array v, std::vector<Value> inputs, std::function<void(Tape&, int)> vjp) {
    bool req = false;
    std::vector<int> ids;
    ids.reserve(inputs.size());
    for (Value in : inputs) {
        if (in.tape != &t) throw std::invalid_argument("input from another tape");
        req = req || t.requires_grad(in);
        ids.push_back(in.id);
    }
    return t.push(std::move(v), req, std::move(ids), req ? std::move(vjp) : nullptr);
}

Array& grad_of(Tape& t, int id) { return t.grad_mut(id); }
const Array& val_of(const Tape& t, int id) { return t.nodes_[id].value; }

void Tape::backward(Value output) {
    if (output.tape != this) throw std::invalid_argument("backward: foreign value");
    if (!nodes_[output.id].value.is_scalar()) throw NonScalarOutput("backward: output is not scalar");
    for (Node& n : nodes_) n.grad = Array::zeros(n.value.shape());
    nodes_[output.id].grad[0] = 1.0;
    for (int id = output.id; id >= 0; --id) {
        Node& n = nodes_[id];
        if (n.vjp && n.requires_grad) n.vjp(*this, id);
    }
}

// ---- arithmetic ----

Value add(Value a, Value b) {
    check_same_tape(a, b);
    const Array& x = a.tape->val(a);
    const Array& y = b.tape->val(b);
    require_same_shape(x, y, "add");
    Array out = x;
    for (size_t i = 0; i < out.size(); ++i) out[i] += y[i];
    return make_node(*a.tape, std::move(out), {a, b}, [a, b](Tape& t, int self) {
        const Array& g = grad_of(t, self);
        Array& ga = grad_of(t, a.id);
        Array& gb = grad_of(t, b.id);
        for (size_t i = 0; i < g.size(); ++i) {
            ga[i] += g[i];
            gb[i] += g[i];
        }
    });
}

Value sub(Value a, Value b) {
    check_same_tape(a, b);
    const Array& x = a.tape->val(a);
    const Array& y = b.tape->val(b);
    require_same_shape(x, y, "sub");
    Array out = x;
    for (size_t i = 0; i < out.size(); ++i) out[i] -= y[i];
    return make_node(*a.tape, std::move(out), {a, b}, [a, b](Tape& t, int self) {
        const Array& g = grad_of(t, self);
        Array& ga = grad_of(t, a.id);
        Array& gb = grad_of(t, b.id);
        for (size_t i = 0; i < g.size(); ++i) {
            ga[i] += g[i];
            gb[i] -= g[i];
        }
    });
}

Value mul(Value a, Value b) {
    check_same_tape(a, b);
    const Array& x = a.tape->val(a);
    const Array& y = b.tape->val(b);
    require_same_shape(x, y, "mul");
    Array out = x;
    for (size_t i = 0; i < out.size(); ++i) out[i] *= y[i];
    return make_node(*a.tape, std::move(out), {a, b}, [a, b](Tape& t, int self) {
        const Array& g = grad_of(t, self);
        const Array& x = t.val(a);
        const Array& y = t.val(b);
        Array& ga = grad_of(t, a.id);
        Array& gb = grad_of(t, b.id);
        for (size_t i = 0; i < g.size(); ++i) {
            ga[i] += g[i] * y[i];
            gb[i] += g[i] * x[i];
        }
    });
}

Value smul(Value a, double k) {
    const Array& x = a.tape->val(a);
    Array out = x;
    for (size_t i = 0; i < out.size(); ++i) out[i] *= k;
    return make_node(*a.tape, std::move(out), {a}, [a, k](Tape& t, int self) {
        const Array& g = grad_of(t, self);
        Array& ga = grad_of(t, a.id);
        for (size_t i = 0; i < g.size(); ++i) ga[i] += k * g[i];
    });
}

Value sadd(Value a, double k) {
    const Array& x = a.tape->val(a);
    Array out = x;
    for (size_t i = 0; i < out.size(); ++i) out[i] += k;
    return make_node(*a.tape, std::move(out), {a}, [a](Tape& t, int self) {
        const Array& g = grad_of(t, self);
        Array& ga = grad_of(t, a.id);
        for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    });
}

Value neg(Value a) { return smul(a, -1.0); }

Value matmul(Value a, Value b) {
    check_same_tape(a, b);
    const Array& x = a.tape->val(a);
    const Array& y = b.tape->val(b);
    if (x.cols() != y.rows()) throw ShapeMismatch("matmul: inner dimensions differ");
    Array out({x.rows(), y.cols()});
    as_mat(out) = as_mat(x) * as_mat(y);
    return make_node(*a.tape, std::move(out), {a, b}, [a, b](Tape& t, int self) {
        const Array& g = grad_of(t, self);
        const Array& x = t.val(a);
        const Array& y = t.val(b);
        if (t.requires_grad(a)) as_mat(grad_of(t, a.id)) += as_mat(g) * as_mat(y).transpose();
        if (t.requires_grad(b)) as_mat(grad_of(t, b.id)) += as_mat(x).transpose() * as_mat(g);
    });
}

Value transpose(Value a) {
    const Array& x = a.tape->val(a);
    Array out({x.cols(), x.rows()});
    as_mat(out) = as_mat(x).transpose();
    return make_node(*a.tape, std::move(out), {a}, [a](Tape& t, int self) {
        const Array& g = grad_of(t, self);
        as_mat(grad_of(t, a.id)) += as_mat(g).transpose();
    });
}

Value concat_cols(const std::vector<Value>& parts) {
    if (parts.empty()) throw std::invalid_argument("concat_cols: empty");
    Tape& t = *parts[0].tape;
    int rows = t.val(parts[0]).rows();
    int cols = 0;
    for (Value p : parts) {
        if (t.val(p).rows() != rows) throw ShapeMismatch("concat_cols: row counts differ");
        cols += t.val(p).cols();
    }
    Array out({rows, cols});
    int off = 0;
    for (Value p : parts) {
        const Array& x = t.val(p);
        for (int r = 0; r < rows; ++r)
            for (int c = 0; c < x.cols(); ++c) out.at(r, off + c) = x.at(r, c);
        off += x.cols();
    }
    std::vector<Value> ins = parts;
    return make_node(t, std::move(out), ins, [ins](Tape& t, int self) {
        const Array& g = grad_of(t, self);
        int off = 0;
        for (Value p : ins) {
            Array& gp = grad_of(t, p.id);
            for (int r = 0; r < gp.rows(); ++r)
                for (int c = 0; c < gp.cols(); ++c) gp.at(r, c) += g.at(r, off + c);
            off += gp.cols();
        }
    });
}

Value concat_rows(const std::vector<Value>& parts) {
    if (parts.empty()) throw std::invalid_argument("concat_rows: empty");
    Tape& t = *parts[0].tape;
    int cols = t.val(parts[0]).cols();
    int rows = 0;
    for (Value p : parts) {
        if (t.val(p).cols() != cols) throw ShapeMismatch("concat_rows: column counts differ");
        rows += t.val(p).rows();
    }
    Array out({rows, cols});
    int off = 0;
    for (Value p : parts) {
        const Array& x = t.val(p);
        for (int r = 0; r < x.rows(); ++r)
            for (int c = 0; c < cols; ++c) out.at(off + r, c) = x.at(r, c);
        off += x.rows();
    }
    std::vector<Value> ins = parts;
    return make_node(t, std::move(out), ins, [ins](Tape& t, int self) {
        const Array& g = grad_of(t, self);
        int off = 0;
        for (Value p : ins) {
            Array& gp = grad_of(t, p.id);
            for (int r = 0; r < gp.rows(); ++r)
                for (int c = 0; c < gp.cols(); ++c) gp.at(r, c) += g.at(off + r, c);
            off += gp.rows();
        }
    });
}

Value slice_rows(Value a, int begin, int end) {
    const Array& x = a.tape->val(a);
    if (begin < 0 || end > x.rows() || begin >= end) throw ShapeMismatch("slice_rows: bad range");
    Array out({end - begin, x.cols()});
    for (int r = begin; r < end; ++r)
        for (int c = 0; c < x.cols(); ++c) out.at(r - begin, c) = x.at(r, c);
    return make_node(*a.tape, std::move(out), {a}, [a, begin, end](Tape& t, int self) {
        const Array& g = grad_of(t, self);
        Array& ga = grad_of(t, a.id);
        for (int r = begin; r < end; ++r)
            for (int c = 0; c < g.cols(); ++c) ga.at(r, c) += g.at(r - begin, c);
    });
}

Value gather_rows(Value a, std::vector<int> idx) {
    const Array& x = a.tape->val(a);
    Array out({static_cast<int>(idx.size()), x.cols()});
    for (size_t i = 0; i < idx.size(); ++i) {
        if (idx[i] < 0 || idx[i] >= x.rows()) throw ShapeMismatch("gather_rows: index out of range");
        for (int c = 0; c < x.cols(); ++c) out.at(static_cast<int>(i), c) = x.at(idx[i], c);
    }
    return make_node(*a.tape, std::move(out), {a},
                     [a, idx = std::move(idx)](Tape& t, int self) {
                         const Array& g = grad_of(t, self);
                         Array& ga = grad_of(t, a.id);
                         for (size_t i = 0; i < idx.size(); ++i)
                             for (int c = 0; c < g.cols(); ++c)
                                 ga.at(idx[i], c) += g.at(static_cast<int>(i), c);
                     });
}

// ---- nonlinearities ----

Value relu(Value a) {
    return unary(
        a, [](double x) { return x > 0 ? x : 0.0; },
        [](double x, double g) { return x > 0 ? g : 0.0; });
}

Value sigmoid(Value a) {
    return unary(
        a, [](double x) { return 1.0 / (1.0 + std::exp(-x)); },
        [](double x, double g) {
            double s = 1.0 / (1.0 + std::exp(-x));
            return g * s * (1.0 - s);
        });
}

Value tanh_(Value a) {
    return unary(
        a, [](double x) { return std::tanh(x); },
        [](double x, double g) {
            double th = std::tanh(x);
            return g * (1.0 - th * th);
        });
}

Value log_(Value a) {
    const Array& x = a.tape->val(a);
    for (size_t i = 0; i < x.size(); ++i)
        if (x[i] <= 0.0) throw DomainError("log of non-positive value");
    return unary(
        a, [](double x) { return std::log(x); }, [](double x, double g) { return g / x; });
}

Value exp_(Value a) {
    return unary(
        a, [](double x) { return std::exp(x); },
        [](double x, double g) { return g * std::exp(x); });
}

Value sqrt_(Value a) {
    const Array& x = a.tape->val(a);
    for (size_t i = 0; i < x.size(); ++i)
        if (x[i] < 0.0) throw DomainError("sqrt of negative value");
    return unary(
        a, [](double x) { return std::sqrt(x); },
        [](double x, double g) { return g * 0.5 / std::max(std::sqrt(x), 1e-300); });
}

Value abs_(Value a) {
    return unary(
        a, [](double x) { return std::abs(x); },
        [](double x, double g) { return x > 0 ? g : (x < 0 ? -g : 0.0); });
}

Value clamp(Value a, double lo, double hi) {
    return unary(
        a, [lo, hi](double x) { return std::clamp(x, lo, hi); },
        [lo, hi](double x, double g) { return (x > lo && x < hi) ? g : 0.0; });
}

// ---- reductions ----

Value sum(Value a) {
    const Array& x = a.tape->val(a);
    double s = 0.0;
    for (size_t i = 0; i < x.size(); ++i) s += x[i];
    return make_node(*a.tape, Array::scalar(s), {a}, [a](Tape& t, int self) {
        double g = grad_of(t, self)[0];
        Array& ga = grad_of(t, a.id);
        for (size_t i = 0; i < ga.size(); ++i) ga[i] += g;
    });
}

Value mean(Value a) {
    const Array& x = a.tape->val(a);
    if (x.size() == 0) throw ShapeMismatch("mean of empty array");
    return smul(sum(a), 1.0 / static_cast<double>(x.size()));
}

Value rowwise_sum(Value a) {
    const Array& x = a.tape->val(a);
    Array out({x.rows(), 1});
    for (int r = 0; r < x.rows(); ++r) {
        double s = 0.0;
        for (int c = 0; c < x.cols(); ++c) s += x.at(r, c);
        out[r] = s;
    }
    return make_node(*a.tape, std::move(out), {a}, [a](Tape& t, int self) {
        const Array& g = grad_of(t, self);
        Array& ga = grad_of(t, a.id);
        for (int r = 0; r < ga.rows(); ++r)
            for (int c = 0; c < ga.cols(); ++c) ga.at(r, c) += g[r];
    });
}

Value rows_norm(Value a, double eps) {
    const Array& x = a.tape->val(a);
    Array out({x.rows(), 1});
    for (int r = 0; r < x.rows(); ++r) {
        double s = eps * eps;
        for (int c = 0; c < x.cols(); ++c) s += x.at(r, c) * x.at(r, c);
        out[r] = std::sqrt(s);
    }
    return make_node(*a.tape, std::move(out), {a}, [a](Tape& t, int self) {
        const Array& g = grad_of(t, self);
        const Array& x = t.val(a);
        const Array& n = val_of(t, self);
        Array& ga = grad_of(t, a.id);
        for (int r = 0; r < x.rows(); ++r) {
            double inv = n[r] > 1e-300 ? 1.0 / n[r] : 0.0;
            for (int c = 0; c < x.cols(); ++c) ga.at(r, c) += g[r] * x.at(r, c) * inv;
        }
    });
}

Value mul_rows(Value a, Value s) {
    check_same_tape(a, s);
    const Array& x = a.tape->val(a);
    const Array& y = s.tape->val(s);
    if (y.rows() != x.rows() || y.cols() != 1) throw ShapeMismatch("mul_rows: scale must be N x 1");
    Array out = x;
    for (int r = 0; r < x.rows(); ++r)
        for (int c = 0; c < x.cols(); ++c) out.at(r, c) *= y[r];
    return make_node(*a.tape, std::move(out), {a, s}, [a, s](Tape& t, int self) {
        const Array& g = grad_of(t, self);
        const Array& x = t.val(a);
        const Array& y = t.val(s);
        Array& ga = grad_of(t, a.id);
        Array& gs = grad_of(t, s.id);
        for (int r = 0; r < x.rows(); ++r)
            for (int c = 0; c < x.cols(); ++c) {
                ga.at(r, c) += g.at(r, c) * y[r];
                gs[r] += g.at(r, c) * x.at(r, c);
            }
    });
}

Value group_maxpool(Value a, int groups, int group_size) {
    const Array& x = a.tape->val(a);
    if (x.rows() != groups * group_size) throw ShapeMismatch("group_maxpool: rows != groups*size");
    Array out({groups, x.cols()});
    std::vector<int> arg(static_cast<size_t>(groups) * x.cols());
    for (int n = 0; n < groups; ++n)
        for (int c = 0; c < x.cols(); ++c) {
            double best = x.at(n * group_size, c);
            int bk = 0;
            for (int k = 1; k < group_size; ++k) {
                double v = x.at(n * group_size + k, c);
                if (v > best) {  // strict: ties go to the lowest index
                    best = v;
                    bk = k;
                }
            }
            out.at(n, c) = best;
            arg[static_cast<size_t>(n) * x.cols() + c] = bk;
        }
    return make_node(*a.tape, std::move(out), {a},
                     [a, groups, group_size, arg = std::move(arg)](Tape& t, int self) {
                         const Array& g = grad_of(t, self);
                         Array& ga = grad_of(t, a.id);
                         for (int n = 0; n < groups; ++n)
                             for (int c = 0; c < g.cols(); ++c) {
                                 int k = arg[static_cast<size_t>(n) * g.cols() + c];
                                 ga.at(n * group_size + k, c) += g.at(n, c);
                             }
                     });
}

Value group_sum(Value a, int groups, int group_size) {
    const Array& x = a.tape->val(a);
    if (x.rows() != groups * group_size) throw ShapeMismatch("group_sum: rows != groups*size");
    Array out({groups, x.cols()});
    for (int n = 0; n < groups; ++n)
        for (int k = 0; k < group_size; ++k)
            for (int c = 0; c < x.cols(); ++c) out.at(n, c) += x.at(n * group_size + k, c);
    return make_node(*a.tape, std::move(out), {a}, [a, groups, group_size](Tape& t, int self) {
        const Array& g = grad_of(t, self);
        Array& ga = grad_of(t, a.id);
        int cols = g.cols();
        for (int n = 0; n < groups; ++n)
            for (int k = 0; k < group_size; ++k)
                for (int c = 0; c < cols; ++c) ga.at(n * group_size + k, c) += g.at(n, c);
    });
}

Value broadcast_rows(Value a, int n) {
    const Array& x = a.tape->val(a);
    if (x.rows() != 1) throw ShapeMismatch("broadcast_rows: input must have one row");
    Array out({n, x.cols()});
    for (int r = 0; r < n; ++r)
        for (int c = 0; c < x.cols(); ++c) out.at(r, c) = x.at(0, c);
    return make_node(*a.tape, std::move(out), {a}, [a](Tape& t, int self) {
        const Array& g = grad_of(t, self);
        Array& ga = grad_of(t, a.id);
        for (int r = 0; r < g.rows(); ++r)
            for (int c = 0; c < g.cols(); ++c) ga.at(0, c) += g.at(r, c);
    });
}

Value where_rows(const std::vector<char>& mask, Value a, Value b) {
    check_same_tape(a, b);
    const Array& x = a.tape->val(a);
    const Array& y = b.tape->val(b);
    require_same_shape(x, y, "where_rows");
    if (static_cast<int>(mask.size()) != x.rows()) throw ShapeMismatch("where_rows: mask length");
    Array out = x;
    for (int r = 0; r < x.rows(); ++r)
        if (!mask[r])
            for (int c = 0; c < x.cols(); ++c) out.at(r, c) = y.at(r, c);
    return make_node(*a.tape, std::move(out), {a, b}, [a, b, mask](Tape& t, int self) {
        const Array& g = grad_of(t, self);
        Array& ga = grad_of(t, a.id);
        Array& gb = grad_of(t, b.id);
        for (int r = 0; r < g.rows(); ++r)
            for (int c = 0; c < g.cols(); ++c)
                (mask[r] ? ga : gb).at(r, c) += g.at(r, c);
    });
}

// ---- weighted Kabsch primitive ----

namespace {

Array kabsch_forward(const std::vector<geo::Vec3>& src, const Array& warped, const Array& weights) {
    std::vector<geo::Vec3> dst = warped.to_points();
    std::vector<double> w(weights.data(), weights.data() + weights.size());
    geo::RigidTransform t = geo::weighted_kabsch(src, dst, w);
    Array out({4, 3});
    for (int r = 0; r < 3; ++r)
        for (int c = 0; c < 3; ++c) out.at(r, c) = t.rotation(r, c);
    for (int c = 0; c < 3; ++c) out.at(3, c) = t.translation(c);
    return out;
}

}  // namespace

geo::RigidTransform to_transform(const Array& rt43) {
    if (rt43.rows() != 4 || rt43.cols() != 3) throw ShapeMismatch("to_transform: expected 4 x 3");
    geo::RigidTransform t;
    for (int r = 0; r < 3; ++r)
        for (int c = 0; c < 3; ++c) t.rotation(r, c) = rt43.at(r, c);
    for (int c = 0; c < 3; ++c) t.translation(c) = rt43.at(3, c);
    return t;
}

Value kabsch_rt(const Array& src, Value warped, Value weights, double fd_step) {
    check_same_tape(warped, weights);
    Tape& t = *warped.tape;
    const Array& wp = t.val(warped);
    const Array& wt = t.val(weights);
    if (wp.cols() != 3 || src.rows() != wp.rows() || static_cast<int>(wt.size()) != wp.rows())
        throw ShapeMismatch("kabsch_rt: src/warped must be N x 3, weights length N");

    std::vector<geo::Vec3> src_pts = src.to_points();
    Array out = kabsch_forward(src_pts, wp, wt);

    bool diff_w = t.requires_grad(weights);
    return make_node(
        t, std::move(out), {warped, weights},
        [warped, weights, src_pts = std::move(src_pts), fd_step, diff_w](Tape& t, int self) {
            const Array& g = grad_of(t, self);  // {4,3}
            Array wp = t.val(warped);
            Array wt = t.val(weights);
            auto contract = [&](const Array& plus, const Array& minus) {
                double acc = 0.0;
                for (size_t i = 0; i < plus.size(); ++i)
                    acc += g[i] * (plus[i] - minus[i]) / (2.0 * fd_step);
                return acc;
            };
            if (t.requires_grad(warped)) {
                Array& gw = grad_of(t, warped.id);
                for (size_t i = 0; i < wp.size(); ++i) {
                    double keep = wp[i];
                    wp[i] = keep + fd_step;
                    Array plus = kabsch_forward(src_pts, wp, wt);
                    wp[i] = keep - fd_step;
                    Array minus = kabsch_forward(src_pts, wp, wt);
                    wp[i] = keep;
                    gw[i] += contract(plus, minus);
                }
            }
            if (diff_w) {
                Array& gwt = grad_of(t, weights.id);
                for (size_t i = 0; i < wt.size(); ++i) {
                    double keep = wt[i];
                    wt[i] = keep + fd_step;
                    Array plus = kabsch_forward(src_pts, wp, wt);
                    wt[i] = std::max(keep - fd_step, 0.0);
                    Array minus = kabsch_forward(src_pts, wp, wt);
                    double denom = (keep + fd_step) - wt[i];
                    wt[i] = keep;
                    double acc = 0.0;
                    for (size_t k = 0; k < plus.size(); ++k)
                        acc += g[k] * (plus[k] - minus[k]) / denom;
                    gwt[i] += acc;
                }
            }
        });
}

Value kabsch_rotation(Value rt) { return slice_rows(rt, 0, 3); }
Value kabsch_translation(Value rt) { return slice_rows(rt, 3, 4); }

Value rigid_flow_of(Value rt, const Array& coords) {
    Tape& t = *rt.tape;
    const Array& v = t.val(rt);
    if (v.rows() != 4 || v.cols() != 3) throw ShapeMismatch("rigid_flow_of: transform must be 4x3");
    // forward through the geometry routine itself so the induced flow is
    // bit-identical to a direct rigid_flow evaluation of the same transform
    Array out = Array::from_points(geo::rigid_flow(to_transform(v), coords.to_points()));
    return make_node(t, std::move(out), {rt}, [rt, coords](Tape& t, int self) {
        const Array& g = grad_of(t, self);  // N x 3
        Array& grt = grad_of(t, rt.id);     // 4 x 3
        for (int i = 0; i < coords.rows(); ++i)
            for (int a = 0; a < 3; ++a) {
                for (int b = 0; b < 3; ++b) grt.at(a, b) += g.at(i, a) * coords.at(i, b);
                grt.at(3, a) += g.at(i, a);
            }
    });
}

// ---- gradcheck ----

double gradcheck(const std::function<Value(Tape&, const std::vector<Value>&)>& build,
                 const std::vector<Array>& params, double eps, int max_coords, std::uint64_t seed) {
    return gradcheck_multi(build, params, {eps}, max_coords, seed);
}

double gradcheck_multi(const std::function<Value(Tape&, const std::vector<Value>&)>& build,
                       const std::vector<Array>& params, const std::vector<double>& eps_ladder,
                       int max_coords, std::uint64_t seed) {
    // analytic gradients
    std::vector<Array> analytic;
    {
        Tape tape;
        std::vector<Value> leaves;
        leaves.reserve(params.size());
        for (const Array& p : params) leaves.push_back(tape.leaf(p));
        Value out = build(tape, leaves);
        tape.backward(out);
        for (Value l : leaves) analytic.push_back(tape.grad(l));
    }

    auto eval = [&](const std::vector<Array>& p) {
        Tape tape;
        std::vector<Value> leaves;
        leaves.reserve(p.size());
        for (const Array& a : p) leaves.push_back(tape.leaf(a));
        return tape.val(build(tape, leaves))[0];
    };

    Rng rng(Rng::derive(seed, "gradcheck"));
    std::vector<Array> work = params;
    double max_err = 0.0;
    for (size_t pi = 0; pi < params.size(); ++pi) {
        size_t n = params[pi].size();
        std::vector<size_t> coords;
        if (max_coords > 0 && n > static_cast<size_t>(max_coords)) {
            for (int k = 0; k < max_coords; ++k) coords.push_back(rng.uniform_index(n));
        } else {
            coords.resize(n);
            for (size_t i = 0; i < n; ++i) coords[i] = i;
        }
        for (size_t i : coords) {
            double ana = analytic[pi][i];
            double best = std::numeric_limits<double>::infinity();
            for (double eps : eps_ladder) {
                double keep = work[pi][i];
                work[pi][i] = keep + eps;
                double fp = eval(work);
                work[pi][i] = keep - eps;
                double fm = eval(work);
                work[pi][i] = keep;
                double num = (fp - fm) / (2.0 * eps);
                double err = std::abs(num - ana) / std::max({std::abs(num), std::abs(ana), 1e-8});
                best = std::min(best, err);
                if (best < 1e-6) break;  // confirmed; skip the rest of the ladder
            }
            max_err = std::max(max_err, best);
        }
    }
    return max_err;
}

}  // namespace cmflow::ad
