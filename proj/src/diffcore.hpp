#pragma once

#include <cstdint>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include "geometry.hpp"

namespace cmflow::ad {

struct ShapeMismatch : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct DomainError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct NonScalarOutput : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Dense row-major f64 array.
class Array {
public:
    Array() = default;
    explicit Array(std::vector<int> shape) : shape_(std::move(shape)) {
        data_.assign(count(shape_), 0.0);
    }
    Array(std::vector<int> shape, std::vector<double> data)
        : shape_(std::move(shape)), data_(std::move(data)) {
        if (data_.size() != count(shape_)) throw ShapeMismatch("Array: data length != shape product");
    }

    static Array scalar(double v) { return Array({1}, {v}); }
    static Array zeros(std::vector<int> shape) { return Array(std::move(shape)); }
    static Array from_points(const std::vector<geo::Vec3>& pts) {
        Array a({static_cast<int>(pts.size()), 3});
        for (size_t i = 0; i < pts.size(); ++i)
            for (int j = 0; j < 3; ++j) a.data_[3 * i + j] = pts[i](static_cast<int>(j));
        return a;
    }
    std::vector<geo::Vec3> to_points() const {
        if (cols() != 3) throw ShapeMismatch("to_points: need N x 3");
        std::vector<geo::Vec3> pts(rows());
        for (int i = 0; i < rows(); ++i)
            pts[i] = geo::Vec3(data_[3 * i], data_[3 * i + 1], data_[3 * i + 2]);
        return pts;
    }

    const std::vector<int>& shape() const { return shape_; }
    size_t size() const { return data_.size(); }
    bool is_scalar() const { return data_.size() == 1; }

    // 2D accessors; 1D arrays are treated as a single column
    int rows() const { return shape_.empty() ? 0 : shape_[0]; }
    int cols() const { return shape_.size() < 2 ? (shape_.empty() ? 0 : 1) : shape_[1]; }

    double& operator[](size_t i) { return data_[i]; }
    double operator[](size_t i) const { return data_[i]; }
    double& at(int r, int c) { return data_[static_cast<size_t>(r) * cols() + c]; }
    double at(int r, int c) const { return data_[static_cast<size_t>(r) * cols() + c]; }

    double* data() { return data_.data(); }
    const double* data() const { return data_.data(); }

    bool same_shape(const Array& o) const { return shape_ == o.shape_; }

private:
    static size_t count(const std::vector<int>& s) {
        size_t n = 1;
        for (int e : s) {
            if (e < 0) throw ShapeMismatch("Array: negative extent");
            n *= static_cast<size_t>(e);
        }
        return s.empty() ? 0 : n;
    }
    std::vector<int> shape_;
    std::vector<double> data_;
};

class Tape;

// Handle to a node on a tape.
struct Value {
    Tape* tape = nullptr;
    int id = -1;
    bool valid() const { return tape != nullptr && id >= 0; }
};

class Tape {
public:
    Value constant(Array v) { return push(std::move(v), false, {}, nullptr); }
    Value leaf(Array v) { return push(std::move(v), true, {}, nullptr); }

    const Array& val(Value v) const { return nodes_[v.id].value; }
    const Array& grad(Value v) const { return nodes_[v.id].grad; }
    bool requires_grad(Value v) const { return nodes_[v.id].requires_grad; }

    // reverse accumulation from a scalar output; gradients of unused leaves
    // stay zero
    void backward(Value output);

    size_t num_nodes() const { return nodes_.size(); }

private:
    struct Node {
        Array value;
        Array grad;
        bool requires_grad = false;
        std::vector<int> inputs;
        std::function<void(Tape&, int)> vjp;  // (tape, own id)
    };

    Value push(Array v, bool req, std::vector<int> inputs, std::function<void(Tape&, int)> vjp);

    Array& grad_mut(int id) { return nodes_[id].grad; }
    Node& node(int id) { return nodes_[id]; }

    std::vector<Node> nodes_;

    friend Value make_node(Tape& t, Array v, std::vector<Value> inputs,
                           std::function<void(Tape&, int)> vjp);
    friend Array& grad_of(Tape& t, int id);
    friend const Array& val_of(const Tape& t, int id);
};

// internal helper used by the primitive implementations
Value make_node(Tape& t, Array v, std::vector<Value> inputs, std::function<void(Tape&, int)> vjp);
Array& grad_of(Tape& t, int id);
const Array& val_of(const Tape& t, int id);

// ---- primitives ----
Value add(Value a, Value b);
Value sub(Value a, Value b);
Value mul(Value a, Value b);  // elementwise, same shape
Value smul(Value a, double k);
Value sadd(Value a, double k);
Value neg(Value a);
Value matmul(Value a, Value b);
Value transpose(Value a);
Value concat_cols(const std::vector<Value>& parts);
Value concat_rows(const std::vector<Value>& parts);
Value slice_rows(Value a, int begin, int end);
Value gather_rows(Value a, std::vector<int> idx);
Value relu(Value a);
Value sigmoid(Value a);
Value tanh_(Value a);
Value log_(Value a);
Value exp_(Value a);
Value sqrt_(Value a);
Value abs_(Value a);
Value clamp(Value a, double lo, double hi);
Value sum(Value a);   // -> scalar {1}
Value mean(Value a);  // -> scalar {1}
Value rowwise_sum(Value a);                  // N x F -> N x 1
Value rows_norm(Value a, double eps = 0.0);  // N x F -> N x 1 L2 norms
Value mul_rows(Value a, Value s);            // N x F scaled per row by N x 1
// grouped max over K consecutive rows: (N*K) x F -> N x F; gradient routes
// to the argmax row, ties to the lowest index
Value group_maxpool(Value a, int groups, int group_size);
// grouped sum over K consecutive rows: (N*K) x F -> N x F
Value group_sum(Value a, int groups, int group_size);
Value broadcast_rows(Value a, int n);  // 1 x F -> N x F
// per-row select: out_i = mask[i] ? a_i : b_i
Value where_rows(const std::vector<char>& mask, Value a, Value b);

// Weighted Kabsch as one primitive. Returns a {4,3} value: rows 0..2 the
// rotation, row 3 the translation. The backward pass uses central finite
// differences over warped (and weights, when it is a differentiable node).
Value kabsch_rt(const Array& src, Value warped, Value weights, double fd_step = 1e-6);

// helpers on top of kabsch_rt
Value kabsch_rotation(Value rt);     // {3,3}
Value kabsch_translation(Value rt);  // {1,3}
// flow induced by a {4,3} transform value at constant coords: C R^T + 1 t^T - C
Value rigid_flow_of(Value rt, const Array& coords);

geo::RigidTransform to_transform(const Array& rt43);

// ---- verification ----
// Central-difference check of the gradient of build() w.r.t. every leaf
// coordinate (or a deterministic random subset of max_coords per leaf when
// max_coords > 0). Returns the max relative error with denominator
// max(|analytic|, |numeric|, 1e-8).
double gradcheck(const std::function<Value(Tape&, const std::vector<Value>&)>& build,
                 const std::vector<Array>& params, double eps = 1e-5, int max_coords = -1,
                 std::uint64_t seed = 0);

// Same check over a ladder of step sizes: a coordinate's error is the best
// match across the ladder, since no single step suits both steep coordinates
// (kink-limited, want small steps) and near-zero ones (roundoff-limited,
// want large steps).
double gradcheck_multi(const std::function<Value(Tape&, const std::vector<Value>&)>& build,
                       const std::vector<Array>& params, const std::vector<double>& eps_ladder,
                       int max_coords = -1, std::uint64_t seed = 0);

}  // namespace cmflow::ad
