#include "cfseq/diffcore/value.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <unordered_set>

namespace cfseq {

namespace {

thread_local bool t_grad_enabled = true;

// exp(x) overflows a double beyond this argument.
constexpr double kExpMax = 709.0;

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;

Value make_result(Op op, Tensor data, std::vector<std::shared_ptr<Node>> parents,
                  std::function<void(Node&)> bw) {
    auto node = std::make_shared<Node>();
    node->data = std::move(data);
    node->op = op;
    bool needs = false;
    if (t_grad_enabled) {
        for (const auto& p : parents) needs = needs || p->requires_grad;
    }
    if (needs) {
        node->requires_grad = true;
        node->parents = std::move(parents);
        node->backward = std::move(bw);
    }
    return Value(std::move(node));
}

void ensure_grad(Node& n) {
    if (n.grad.data.size() != n.data.data.size()) n.grad = Tensor(n.data.shape, 0.0);
}

// ---- broadcasting ---------------------------------------------------------

struct Broadcast {
    Shape out_shape;
    std::size_t dims[3] = {1, 1, 1};
    std::size_t sa[3] = {0, 0, 0};
    std::size_t sb[3] = {0, 0, 0};
    bool same = false;
};

void padded(const Shape& s, std::size_t out[3]) {
    std::size_t off = 3 - s.size();
    for (std::size_t i = 0; i < 3; ++i) out[i] = i < off ? 1 : s[i - off];
}

void strides_for(const std::size_t d[3], const std::size_t out[3], std::size_t st[3]) {
    std::size_t stride = 1;
    for (int i = 2; i >= 0; --i) {
        st[i] = (d[i] == 1 && out[i] != 1) ? 0 : stride;
        stride *= d[i];
    }
}

Broadcast make_broadcast(const Shape& a, const Shape& b, const char* what) {
    Broadcast bc;
    if (a == b) {
        bc.out_shape = a;
        bc.same = true;
        return bc;
    }
    if (a.size() > 3 || b.size() > 3) throw ShapeError(std::string(what) + ": rank above 3");
    std::size_t da[3], db[3];
    padded(a, da);
    padded(b, db);
    for (int i = 0; i < 3; ++i) {
        if (da[i] != db[i] && da[i] != 1 && db[i] != 1) {
            throw ShapeError(std::string(what) + ": shapes " + to_string(a) + " and " + to_string(b) +
                             " do not broadcast");
        }
        bc.dims[i] = std::max(da[i], db[i]);
    }
    std::size_t rank = std::max(a.size(), b.size());
    for (std::size_t i = 3 - rank; i < 3; ++i) bc.out_shape.push_back(bc.dims[i]);
    strides_for(da, bc.dims, bc.sa);
    strides_for(db, bc.dims, bc.sb);
    return bc;
}

template <class F>
void for_each_broadcast(const Broadcast& bc, F&& f) {
    std::size_t o = 0;
    for (std::size_t i = 0; i < bc.dims[0]; ++i)
        for (std::size_t j = 0; j < bc.dims[1]; ++j)
            for (std::size_t k = 0; k < bc.dims[2]; ++k, ++o)
                f(o, i * bc.sa[0] + j * bc.sa[1] + k * bc.sa[2], i * bc.sb[0] + j * bc.sb[1] + k * bc.sb[2]);
}

template <class F>
Tensor binary_forward(const Tensor& a, const Tensor& b, const Broadcast& bc, F&& f) {
    Tensor out(bc.out_shape, 0.0);
    if (bc.same) {
        for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] = f(a.data[i], b.data[i]);
    } else {
        for_each_broadcast(bc, [&](std::size_t o, std::size_t ia, std::size_t ib) {
            out.data[o] = f(a.data[ia], b.data[ib]);
        });
    }
    return out;
}

// Accumulate d out/d a (da) and d out/d b (db) scaled by the upstream grad.
template <class DA, class DB>
void binary_backward(Node& self, const Broadcast& bc, DA&& da, DB&& db) {
    Node& a = *self.parents[0];
    Node& b = *self.parents[1];
    const auto& g = self.grad.data;
    if (a.requires_grad) ensure_grad(a);
    if (b.requires_grad) ensure_grad(b);
    if (bc.same) {
        for (std::size_t i = 0; i < g.size(); ++i) {
            if (a.requires_grad) a.grad.data[i] += g[i] * da(a.data.data[i], b.data.data[i], self.data.data[i]);
            if (b.requires_grad) b.grad.data[i] += g[i] * db(a.data.data[i], b.data.data[i], self.data.data[i]);
        }
    } else {
        for_each_broadcast(bc, [&](std::size_t o, std::size_t ia, std::size_t ib) {
            double av = a.data.data[ia], bv = b.data.data[ib], ov = self.data.data[o];
            if (a.requires_grad) a.grad.data[ia] += g[o] * da(av, bv, ov);
            if (b.requires_grad) b.grad.data[ib] += g[o] * db(av, bv, ov);
        });
    }
}

template <class F, class DA, class DB>
Value binary(Op op, const Value& a, const Value& b, F f, DA da, DB db) {
    Broadcast bc = make_broadcast(a.shape(), b.shape(), op_name(op));
    Tensor out = binary_forward(a.data(), b.data(), bc, f);
    return make_result(op, std::move(out), {a.shared(), b.shared()},
                       [bc, da, db](Node& self) { binary_backward(self, bc, da, db); });
}

template <class F, class D>
Value unary(Op op, const Value& a, F f, D d) {
    const Tensor& x = a.data();
    Tensor out(x.shape, 0.0);
    for (std::size_t i = 0; i < x.data.size(); ++i) out.data[i] = f(x.data[i]);
    return make_result(op, std::move(out), {a.shared()}, [d](Node& self) {
        Node& p = *self.parents[0];
        ensure_grad(p);
        for (std::size_t i = 0; i < self.grad.data.size(); ++i)
            p.grad.data[i] += self.grad.data[i] * d(p.data.data[i], self.data.data[i]);
    });
}

// Splits a shape around `axis` into (outer, extent, inner).
struct AxisView {
    std::size_t outer = 1, extent = 1, inner = 1;
    Shape out_shape;
};

AxisView axis_view(const Shape& s, int axis, const char* what) {
    AxisView v;
    if (axis < 0 || static_cast<std::size_t>(axis) >= s.size()) {
        throw ShapeError(std::string(what) + ": axis " + std::to_string(axis) + " out of range for " +
                         to_string(s));
    }
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (static_cast<int>(i) < axis) v.outer *= s[i];
        else if (static_cast<int>(i) == axis) v.extent = s[i];
        else v.inner *= s[i];
    }
    v.out_shape = s;
    v.out_shape[axis] = 1;
    return v;
}

double selu_value(double x) { return x > 0 ? kSeluLambda * x : kSeluLambda * kSeluAlpha * std::expm1(x); }

double stable_sigmoid(double x) {
    if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
    double e = std::exp(x);
    return e / (1.0 + e);
}

void require_same_rank2(const Value& a, const char* what) {
    if (a.shape().size() != 2) throw ShapeError(std::string(what) + ": expected a matrix, got " + to_string(a.shape()));
}

}  // namespace

const char* op_name(Op op) {
    switch (op) {
        case Op::leaf: return "leaf";
        case Op::add: return "add";
        case Op::sub: return "sub";
        case Op::mul: return "mul";
        case Op::div: return "div";
        case Op::matmul: return "matmul";
        case Op::transpose: return "transpose";
        case Op::concat: return "concat";
        case Op::slice: return "slice";
        case Op::broadcast: return "broadcast";
        case Op::sum: return "sum";
        case Op::mean: return "mean";
        case Op::exp: return "exp";
        case Op::log: return "log";
        case Op::sigmoid: return "sigmoid";
        case Op::tanh: return "tanh";
        case Op::selu: return "selu";
        case Op::softplus: return "softplus";
        case Op::log_sum_exp: return "log_sum_exp";
        case Op::dot: return "dot";
        case Op::stop_gradient: return "stop_gradient";
        case Op::one_hot_gather: return "one_hot_gather";
        case Op::gather_rows: return "gather_rows";
        case Op::clamp_min: return "clamp_min";
    }
    return "?";
}

Tensor& Value::mutable_data() {
    if (node_->op != Op::leaf) throw std::logic_error("mutable_data() on a non-leaf node");
    return node_->data;
}

Value parameter(Tensor t) {
    auto node = std::make_shared<Node>();
    node->data = std::move(t);
    node->requires_grad = true;
    return Value(std::move(node));
}

Value constant(Tensor t) {
    auto node = std::make_shared<Node>();
    node->data = std::move(t);
    return Value(std::move(node));
}

Value constant(double v) { return constant(Tensor::scalar(v)); }

NoGradGuard::NoGradGuard() : previous_(t_grad_enabled) { t_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { t_grad_enabled = previous_; }
bool grad_enabled() { return t_grad_enabled; }

// ---- elementwise ----------------------------------------------------------

Value add(const Value& a, const Value& b) {
    return binary(
        Op::add, a, b, [](double x, double y) { return x + y; }, [](double, double, double) { return 1.0; },
        [](double, double, double) { return 1.0; });
}

Value sub(const Value& a, const Value& b) {
    return binary(
        Op::sub, a, b, [](double x, double y) { return x - y; }, [](double, double, double) { return 1.0; },
        [](double, double, double) { return -1.0; });
}

Value mul(const Value& a, const Value& b) {
    return binary(
        Op::mul, a, b, [](double x, double y) { return x * y; }, [](double, double y, double) { return y; },
        [](double x, double, double) { return x; });
}

Value div(const Value& a, const Value& b) {
    for (double v : b.data().data)
        if (v == 0.0) throw DomainError("div: zero denominator");
    return binary(
        Op::div, a, b, [](double x, double y) { return x / y; }, [](double, double y, double) { return 1.0 / y; },
        [](double, double y, double o) { return -o / y; });
}

Value exp(const Value& a) {
    for (double v : a.data().data)
        if (v > kExpMax) throw DomainError("exp: argument " + std::to_string(v) + " overflows");
    return unary(
        Op::exp, a, [](double x) { return std::exp(x); }, [](double, double o) { return o; });
}

Value log(const Value& a) {
    for (double v : a.data().data)
        if (!(v > 0.0)) throw DomainError("log: nonpositive argument " + std::to_string(v));
    return unary(
        Op::log, a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

Value sigmoid(const Value& a) {
    return unary(Op::sigmoid, a, stable_sigmoid, [](double, double o) { return o * (1.0 - o); });
}

Value tanh(const Value& a) {
    return unary(
        Op::tanh, a, [](double x) { return std::tanh(x); }, [](double, double o) { return 1.0 - o * o; });
}

Value selu(const Value& a) {
    return unary(Op::selu, a, selu_value, [](double x, double o) {
        return x > 0 ? kSeluLambda : o + kSeluLambda * kSeluAlpha;
    });
}

Value softplus(const Value& a) {
    return unary(
        Op::softplus, a, [](double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))); },
        [](double x, double) { return stable_sigmoid(x); });
}

Value clamp_min(const Value& a, double floor) {
    return unary(
        Op::clamp_min, a, [floor](double x) { return x < floor ? floor : x; },
        [floor](double x, double) { return x < floor ? 0.0 : 1.0; });
}

Value stop_gradient(const Value& a) { return constant(a.data()); }

// ---- linear algebra -------------------------------------------------------

Value matmul(const Value& a, const Value& b, bool transpose_b) {
    require_same_rank2(a, "matmul");
    require_same_rank2(b, "matmul");
    std::size_t n = a.shape()[0], k = a.shape()[1];
    std::size_t bk = transpose_b ? b.shape()[1] : b.shape()[0];
    std::size_t m = transpose_b ? b.shape()[0] : b.shape()[1];
    if (bk != k) {
        throw ShapeError("matmul: shapes " + to_string(a.shape()) + " and " + to_string(b.shape()) +
                         (transpose_b ? " (b transposed)" : "") + " do not conform");
    }
    Tensor out(Shape{n, m}, 0.0);
    ConstMap A(a.data().data.data(), n, k);
    ConstMap B(b.data().data.data(), b.shape()[0], b.shape()[1]);
    MutMap O(out.data.data(), n, m);
    if (transpose_b) O.noalias() = A * B.transpose();
    else O.noalias() = A * B;
    return make_result(Op::matmul, std::move(out), {a.shared(), b.shared()}, [n, k, m, transpose_b](Node& self) {
        Node& pa = *self.parents[0];
        Node& pb = *self.parents[1];
        ConstMap G(self.grad.data.data(), n, m);
        if (pa.requires_grad) {
            ensure_grad(pa);
            MutMap GA(pa.grad.data.data(), n, k);
            ConstMap B(pb.data.data.data(), pb.data.shape[0], pb.data.shape[1]);
            if (transpose_b) GA.noalias() += G * B;
            else GA.noalias() += G * B.transpose();
        }
        if (pb.requires_grad) {
            ensure_grad(pb);
            ConstMap A(pa.data.data.data(), n, k);
            MutMap GB(pb.grad.data.data(), pb.data.shape[0], pb.data.shape[1]);
            if (transpose_b) GB.noalias() += G.transpose() * A;
            else GB.noalias() += A.transpose() * G;
        }
    });
}

Value transpose(const Value& a) {
    require_same_rank2(a, "transpose");
    std::size_t r = a.shape()[0], c = a.shape()[1];
    Tensor out(Shape{c, r}, 0.0);
    for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) out.data[j * r + i] = a.data().data[i * c + j];
    return make_result(Op::transpose, std::move(out), {a.shared()}, [r, c](Node& self) {
        Node& p = *self.parents[0];
        ensure_grad(p);
        for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < c; ++j) p.grad.data[i * c + j] += self.grad.data[j * r + i];
    });
}

Value dot(const Value& a, const Value& b) {
    if (a.shape().size() != 1 || a.shape() != b.shape()) {
        throw ShapeError("dot: expected equal-length vectors, got " + to_string(a.shape()) + " and " +
                         to_string(b.shape()));
    }
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a.data().data[i] * b.data().data[i];
    return make_result(Op::dot, Tensor::scalar(s), {a.shared(), b.shared()}, [](Node& self) {
        Node& pa = *self.parents[0];
        Node& pb = *self.parents[1];
        double g = self.grad.data[0];
        if (pa.requires_grad) {
            ensure_grad(pa);
            for (std::size_t i = 0; i < pa.data.data.size(); ++i) pa.grad.data[i] += g * pb.data.data[i];
        }
        if (pb.requires_grad) {
            ensure_grad(pb);
            for (std::size_t i = 0; i < pb.data.data.size(); ++i) pb.grad.data[i] += g * pa.data.data[i];
        }
    });
}

// ---- shape manipulation ---------------------------------------------------

Value concat(std::span<const Value> parts, int axis) {
    if (parts.empty()) throw ShapeError("concat: no inputs");
    const Shape& first = parts[0].shape();
    AxisView v0 = axis_view(first, axis, "concat");
    std::vector<std::size_t> extents;
    std::size_t total = 0;
    for (const auto& p : parts) {
        const Shape& s = p.shape();
        bool ok = s.size() == first.size();
        for (std::size_t i = 0; ok && i < s.size(); ++i)
            if (static_cast<int>(i) != axis && s[i] != first[i]) ok = false;
        if (!ok) throw ShapeError("concat: shape " + to_string(s) + " does not match " + to_string(first));
        extents.push_back(s[axis]);
        total += s[axis];
    }
    Shape out_shape = first;
    out_shape[axis] = total;
    Tensor out(out_shape, 0.0);
    const std::size_t outer = v0.outer, inner = v0.inner;
    std::size_t offset = 0;
    std::vector<std::shared_ptr<Node>> parents;
    for (std::size_t p = 0; p < parts.size(); ++p) {
        const auto& src = parts[p].data().data;
        std::size_t e = extents[p];
        for (std::size_t o = 0; o < outer; ++o)
            std::copy_n(src.begin() + o * e * inner, e * inner, out.data.begin() + (o * total + offset) * inner);
        offset += e;
        parents.push_back(parts[p].shared());
    }
    return make_result(Op::concat, std::move(out), std::move(parents), [extents, outer, inner, total](Node& self) {
        std::size_t offset = 0;
        for (std::size_t p = 0; p < self.parents.size(); ++p) {
            Node& par = *self.parents[p];
            std::size_t e = extents[p];
            if (par.requires_grad) {
                ensure_grad(par);
                for (std::size_t o = 0; o < outer; ++o) {
                    const double* g = self.grad.data.data() + (o * total + offset) * inner;
                    double* dst = par.grad.data.data() + o * e * inner;
                    for (std::size_t i = 0; i < e * inner; ++i) dst[i] += g[i];
                }
            }
            offset += e;
        }
    });
}

Value concat(std::initializer_list<Value> parts, int axis) {
    return concat(std::span<const Value>(parts.begin(), parts.size()), axis);
}

Value slice(const Value& a, int axis, std::size_t begin, std::size_t end) {
    AxisView v = axis_view(a.shape(), axis, "slice");
    if (begin >= end || end > v.extent) {
        throw ShapeError("slice: range [" + std::to_string(begin) + ", " + std::to_string(end) +
                         ") invalid for axis of " + to_string(a.shape()));
    }
    Shape out_shape = a.shape();
    out_shape[axis] = end - begin;
    Tensor out(out_shape, 0.0);
    const std::size_t e = end - begin, outer = v.outer, inner = v.inner, extent = v.extent;
    for (std::size_t o = 0; o < outer; ++o)
        std::copy_n(a.data().data.begin() + (o * extent + begin) * inner, e * inner, out.data.begin() + o * e * inner);
    return make_result(Op::slice, std::move(out), {a.shared()}, [=](Node& self) {
        Node& p = *self.parents[0];
        ensure_grad(p);
        for (std::size_t o = 0; o < outer; ++o) {
            const double* g = self.grad.data.data() + o * e * inner;
            double* dst = p.grad.data.data() + (o * extent + begin) * inner;
            for (std::size_t i = 0; i < e * inner; ++i) dst[i] += g[i];
        }
    });
}

Value broadcast_to(const Value& a, const Shape& shape) {
    Broadcast bc = make_broadcast(a.shape(), shape, "broadcast");
    if (bc.out_shape != shape) {
        throw ShapeError("broadcast: " + to_string(a.shape()) + " cannot expand to " + to_string(shape));
    }
    Tensor out(shape, 0.0);
    if (bc.same) out.data = a.data().data;
    else for_each_broadcast(bc, [&](std::size_t o, std::size_t ia, std::size_t) { out.data[o] = a.data().data[ia]; });
    return make_result(Op::broadcast, std::move(out), {a.shared()}, [bc](Node& self) {
        Node& p = *self.parents[0];
        ensure_grad(p);
        if (bc.same) {
            for (std::size_t i = 0; i < self.grad.data.size(); ++i) p.grad.data[i] += self.grad.data[i];
        } else {
            for_each_broadcast(bc, [&](std::size_t o, std::size_t ia, std::size_t) { p.grad.data[ia] += self.grad.data[o]; });
        }
    });
}

// ---- reductions -----------------------------------------------------------

Value sum(const Value& a, int axis) {
    if (axis < 0) {
        double s = 0.0;
        for (double v : a.data().data) s += v;
        return make_result(Op::sum, Tensor::scalar(s), {a.shared()}, [](Node& self) {
            Node& p = *self.parents[0];
            ensure_grad(p);
            double g = self.grad.data[0];
            for (auto& v : p.grad.data) v += g;
        });
    }
    AxisView v = axis_view(a.shape(), axis, "sum");
    Tensor out(v.out_shape, 0.0);
    for (std::size_t o = 0; o < v.outer; ++o)
        for (std::size_t e = 0; e < v.extent; ++e)
            for (std::size_t i = 0; i < v.inner; ++i)
                out.data[o * v.inner + i] += a.data().data[(o * v.extent + e) * v.inner + i];
    return make_result(Op::sum, std::move(out), {a.shared()}, [v](Node& self) {
        Node& p = *self.parents[0];
        ensure_grad(p);
        for (std::size_t o = 0; o < v.outer; ++o)
            for (std::size_t e = 0; e < v.extent; ++e)
                for (std::size_t i = 0; i < v.inner; ++i)
                    p.grad.data[(o * v.extent + e) * v.inner + i] += self.grad.data[o * v.inner + i];
    });
}

Value mean(const Value& a, int axis) {
    std::size_t count = axis < 0 ? a.size() : axis_view(a.shape(), axis, "mean").extent;
    if (count == 0) throw ShapeError("mean: empty input");
    Value s = sum(a, axis);
    return s * (1.0 / static_cast<double>(count));
}

Value log_sum_exp(const Value& a, int axis) {
    AxisView v;
    if (axis < 0) {
        v.extent = a.size();
    } else {
        v = axis_view(a.shape(), axis, "log_sum_exp");
    }
    if (v.extent == 0) throw ShapeError("log_sum_exp: empty input");
    Tensor out(axis < 0 ? Shape{} : v.out_shape, 0.0);
    const auto& x = a.data().data;
    for (std::size_t o = 0; o < v.outer; ++o)
        for (std::size_t i = 0; i < v.inner; ++i) {
            double m = -INFINITY;
            for (std::size_t e = 0; e < v.extent; ++e) m = std::max(m, x[(o * v.extent + e) * v.inner + i]);
            double s = 0.0;
            for (std::size_t e = 0; e < v.extent; ++e) s += std::exp(x[(o * v.extent + e) * v.inner + i] - m);
            out.data[o * v.inner + i] = m + std::log(s);
        }
    return make_result(Op::log_sum_exp, std::move(out), {a.shared()}, [v](Node& self) {
        Node& p = *self.parents[0];
        ensure_grad(p);
        for (std::size_t o = 0; o < v.outer; ++o)
            for (std::size_t i = 0; i < v.inner; ++i) {
                double lse = self.data.data[o * v.inner + i];
                double g = self.grad.data[o * v.inner + i];
                for (std::size_t e = 0; e < v.extent; ++e) {
                    std::size_t idx = (o * v.extent + e) * v.inner + i;
                    p.grad.data[idx] += g * std::exp(p.data.data[idx] - lse);
                }
            }
    });
}

// ---- indexing -------------------------------------------------------------

Value one_hot_gather(const Value& x, const std::vector<std::size_t>& indices) {
    require_same_rank2(x, "one_hot_gather");
    std::size_t n = x.shape()[0], k = x.shape()[1];
    if (indices.size() != n) {
        throw ShapeError("one_hot_gather: " + std::to_string(indices.size()) + " indices for " + to_string(x.shape()));
    }
    Tensor out(Shape{n, 1}, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
        if (indices[i] >= k) throw ShapeError("one_hot_gather: index " + std::to_string(indices[i]) + " >= " + std::to_string(k));
        out.data[i] = x.data().data[i * k + indices[i]];
    }
    return make_result(Op::one_hot_gather, std::move(out), {x.shared()}, [indices, k](Node& self) {
        Node& p = *self.parents[0];
        ensure_grad(p);
        for (std::size_t i = 0; i < indices.size(); ++i) p.grad.data[i * k + indices[i]] += self.grad.data[i];
    });
}

Value gather_rows(const Value& x, const std::vector<std::size_t>& indices) {
    require_same_rank2(x, "gather_rows");
    std::size_t n = x.shape()[0], d = x.shape()[1];
    Tensor out(Shape{indices.size(), d}, 0.0);
    for (std::size_t m = 0; m < indices.size(); ++m) {
        if (indices[m] >= n) throw ShapeError("gather_rows: row " + std::to_string(indices[m]) + " >= " + std::to_string(n));
        std::copy_n(x.data().data.begin() + indices[m] * d, d, out.data.begin() + m * d);
    }
    return make_result(Op::gather_rows, std::move(out), {x.shared()}, [indices, d](Node& self) {
        Node& p = *self.parents[0];
        ensure_grad(p);
        for (std::size_t m = 0; m < indices.size(); ++m)
            for (std::size_t j = 0; j < d; ++j) p.grad.data[indices[m] * d + j] += self.grad.data[m * d + j];
    });
}

// ---- dispatcher -----------------------------------------------------------

Value apply_primitive(Op op, std::span<const Value> in, const OpAttrs& attrs) {
    auto need = [&](std::size_t n) {
        if (in.size() != n) {
            throw ShapeError(std::string(op_name(op)) + ": expected " + std::to_string(n) + " inputs, got " +
                             std::to_string(in.size()));
        }
    };
    switch (op) {
        case Op::add: need(2); return add(in[0], in[1]);
        case Op::sub: need(2); return sub(in[0], in[1]);
        case Op::mul: need(2); return mul(in[0], in[1]);
        case Op::div: need(2); return div(in[0], in[1]);
        case Op::matmul: need(2); return matmul(in[0], in[1], attrs.transpose_b);
        case Op::transpose: need(1); return transpose(in[0]);
        case Op::concat: return concat(in, attrs.axis < 0 ? 0 : attrs.axis);
        case Op::slice: need(1); return slice(in[0], attrs.axis < 0 ? 0 : attrs.axis, attrs.begin, attrs.end);
        case Op::broadcast: need(1); return broadcast_to(in[0], attrs.shape);
        case Op::sum: need(1); return sum(in[0], attrs.axis);
        case Op::mean: need(1); return mean(in[0], attrs.axis);
        case Op::exp: need(1); return exp(in[0]);
        case Op::log: need(1); return log(in[0]);
        case Op::sigmoid: need(1); return sigmoid(in[0]);
        case Op::tanh: need(1); return tanh(in[0]);
        case Op::selu: need(1); return selu(in[0]);
        case Op::softplus: need(1); return softplus(in[0]);
        case Op::log_sum_exp: need(1); return log_sum_exp(in[0], attrs.axis);
        case Op::dot: need(2); return dot(in[0], in[1]);
        case Op::stop_gradient: need(1); return stop_gradient(in[0]);
        case Op::one_hot_gather: need(1); return one_hot_gather(in[0], attrs.indices);
        case Op::gather_rows: need(1); return gather_rows(in[0], attrs.indices);
        case Op::clamp_min: need(1); return clamp_min(in[0], attrs.scalar);
        case Op::leaf: break;
    }
    throw std::invalid_argument(std::string("apply_primitive: unsupported op ") + op_name(op));
}

// ---- operators ------------------------------------------------------------

Value operator+(const Value& a, const Value& b) { return add(a, b); }
Value operator-(const Value& a, const Value& b) { return sub(a, b); }
Value operator*(const Value& a, const Value& b) { return mul(a, b); }
Value operator/(const Value& a, const Value& b) { return div(a, b); }
Value operator-(const Value& a) { return a * -1.0; }
Value operator*(const Value& a, double s) { return mul(a, constant(s)); }
Value operator*(double s, const Value& a) { return mul(constant(s), a); }
Value operator+(const Value& a, double s) { return add(a, constant(s)); }
Value operator-(const Value& a, double s) { return sub(a, constant(s)); }
Value operator-(double s, const Value& a) { return sub(constant(s), a); }

Value log_softmax(const Value& logits) {
    require_same_rank2(logits, "log_softmax");
    return logits - log_sum_exp(logits, 1);
}

// ---- reverse sweep --------------------------------------------------------

Tensor Gradients::of(const Value& leaf) const {
    auto it = grads_.find(leaf.node());
    if (it == grads_.end()) return Tensor(leaf.shape(), 0.0);
    return it->second;
}

bool Gradients::reached(const Value& leaf) const { return grads_.count(leaf.node()) > 0; }

void Gradients::insert(const Node* leaf, Tensor grad) { grads_[leaf] = std::move(grad); }

Gradients backward(const Value& loss) {
    if (!loss.valid()) throw std::invalid_argument("backward: empty value");
    if (loss.size() != 1) throw ShapeError("backward: loss must be scalar, got " + to_string(loss.shape()));
    Gradients out;
    if (!loss.requires_grad()) return out;

    // Iterative post-order DFS; the reversed order is topological.
    std::vector<Node*> order;
    std::unordered_set<Node*> seen;
    std::vector<std::pair<Node*, std::size_t>> stack;
    stack.emplace_back(loss.node(), 0);
    seen.insert(loss.node());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->parents.size()) {
            Node* p = node->parents[next++].get();
            if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }
    for (Node* n : order) n->grad = Tensor(n->data.shape, 0.0);
    loss.node()->grad.data[0] = 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* n = *it;
        if (n->backward) n->backward(*n);
    }
    for (Node* n : order) {
        if (n->op == Op::leaf) out.insert(n, std::move(n->grad));
        n->grad = Tensor();
    }
    return out;
}

}  // namespace cfseq
