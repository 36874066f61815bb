#pragma once

#include <functional>
#include <memory>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "cfseq/diffcore/tensor.hpp"

namespace cfseq {

enum class Op {
    leaf,
    add,
    sub,
    mul,
    div,
    matmul,
    transpose,
    concat,
    slice,
    broadcast,
    sum,
    mean,
    exp,
    log,
    sigmoid,
    tanh,
    selu,
    softplus,
    log_sum_exp,
    dot,
    stop_gradient,
    one_hot_gather,
    gather_rows,
    clamp_min,
};

const char* op_name(Op op);

inline constexpr double kSeluLambda = 1.05070098;
inline constexpr double kSeluAlpha = 1.67326324;

struct Node {
    Tensor data;
    Tensor grad;
    Op op = Op::leaf;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backward;
    bool requires_grad = false;
};

/// Handle to a node of the differentiation graph. Copies share the node.
class Value {
public:
    Value() = default;
    explicit Value(std::shared_ptr<Node> node) : node_(std::move(node)) {}

    const Tensor& data() const { return node_->data; }
    /// Mutable access for leaves only (parameters, optimizer updates).
    Tensor& mutable_data();
    const Shape& shape() const { return node_->data.shape; }
    std::size_t size() const { return node_->data.size(); }
    bool requires_grad() const { return node_->requires_grad; }
    Op op() const { return node_->op; }
    double item() const { return node_->data.item(); }
    bool valid() const { return static_cast<bool>(node_); }

    Node* node() const { return node_.get(); }
    const std::shared_ptr<Node>& shared() const { return node_; }

private:
    std::shared_ptr<Node> node_;
};

Value parameter(Tensor t);
Value constant(Tensor t);
Value constant(double v);

/// While alive, newly created nodes record no parents (pure forward passes).
class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool previous_;
};

bool grad_enabled();

/// Extra arguments for the shape-manipulating primitives.
struct OpAttrs {
    int axis = -1;  // -1: reduce over every element
    std::size_t begin = 0;
    std::size_t end = 0;
    Shape shape;
    std::vector<std::size_t> indices;
    bool transpose_b = false;
    double scalar = 0.0;
};

/// Generic entry point; the named helpers below forward here.
Value apply_primitive(Op op, std::span<const Value> inputs, const OpAttrs& attrs = {});

// Elementwise with numpy-style broadcasting (rank <= 3).
Value add(const Value& a, const Value& b);
Value sub(const Value& a, const Value& b);
Value mul(const Value& a, const Value& b);
Value div(const Value& a, const Value& b);

/// a[n x k] * b[k x m], or a * b^T when transpose_b is set (b is [m x k]).
Value matmul(const Value& a, const Value& b, bool transpose_b = false);
Value transpose(const Value& a);
Value concat(std::span<const Value> parts, int axis);
Value concat(std::initializer_list<Value> parts, int axis);
Value slice(const Value& a, int axis, std::size_t begin, std::size_t end);
Value broadcast_to(const Value& a, const Shape& shape);

/// axis = -1 reduces everything to a scalar; otherwise the axis is kept
/// with extent 1.
Value sum(const Value& a, int axis = -1);
Value mean(const Value& a, int axis = -1);
Value log_sum_exp(const Value& a, int axis = -1);

Value exp(const Value& a);
Value log(const Value& a);
Value sigmoid(const Value& a);
Value tanh(const Value& a);
Value selu(const Value& a);
Value softplus(const Value& a);
Value dot(const Value& a, const Value& b);
Value stop_gradient(const Value& a);

/// out[n, 0] = x[n, indices[n]] for x of shape [N x K].
Value one_hot_gather(const Value& x, const std::vector<std::size_t>& indices);
/// out[m, :] = x[indices[m], :].
Value gather_rows(const Value& x, const std::vector<std::size_t>& indices);
/// max(x, floor) elementwise; clamped entries pass no gradient.
Value clamp_min(const Value& x, double floor);

Value operator+(const Value& a, const Value& b);
Value operator-(const Value& a, const Value& b);
Value operator*(const Value& a, const Value& b);
Value operator/(const Value& a, const Value& b);
Value operator-(const Value& a);
Value operator*(const Value& a, double s);
Value operator*(double s, const Value& a);
Value operator+(const Value& a, double s);
Value operator-(const Value& a, double s);
Value operator-(double s, const Value& a);

/// Log-softmax along the last axis of a [N x K] matrix.
Value log_softmax(const Value& logits);

/// d loss / d leaf for every trainable leaf reachable from a loss.
class Gradients {
public:
    /// Zeros when the leaf was not reached (e.g. only behind stop_gradient).
    Tensor of(const Value& leaf) const;
    bool reached(const Value& leaf) const;
    void insert(const Node* leaf, Tensor grad);

private:
    std::unordered_map<const Node*, Tensor> grads_;
};

/// Reverse sweep from a scalar loss.
Gradients backward(const Value& loss);

}  // namespace cfseq
