#pragma once

// Tape-based reverse-mode differentiation over rank<=2 tensors.
//
// Every backward rule is written in terms of the same recorded ops, so a
// gradient computed with create_graph=true is itself a differentiable
// expression. Differentiating it again yields the second-order terms needed
// for meta-gradients through an inner gradient step.

#include <atomic>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <deque>
#include <initializer_list>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "xvl/error.hpp"
#include "xvl/tensor.hpp"

namespace xvl::ad {

enum class Op : std::uint8_t {
    Leaf,
    Constant,
    MatMul,
    Transpose,
    Add,
    Sub,
    Mul,
    Div,
    Scale,
    Exp,
    Log,
    Tanh,
    Relu,
    Sqrt,
    SumAll,
    SumRows,
    SumCols,
    BroadcastScalar,
    BroadcastRows,
    BroadcastCols,
    Pick,
    Scatter,
};

inline const char* op_name(Op op) {
    switch (op) {
    case Op::Leaf: return "leaf";
    case Op::Constant: return "constant";
    case Op::MatMul: return "matmul";
    case Op::Transpose: return "transpose";
    case Op::Add: return "add";
    case Op::Sub: return "sub";
    case Op::Mul: return "mul";
    case Op::Div: return "div";
    case Op::Scale: return "scale";
    case Op::Exp: return "exp";
    case Op::Log: return "log";
    case Op::Tanh: return "tanh";
    case Op::Relu: return "relu";
    case Op::Sqrt: return "sqrt";
    case Op::SumAll: return "sum";
    case Op::SumRows: return "sum_rows";
    case Op::SumCols: return "sum_cols";
    case Op::BroadcastScalar: return "broadcast_scalar";
    case Op::BroadcastRows: return "broadcast_rows";
    case Op::BroadcastCols: return "broadcast_cols";
    case Op::Pick: return "pick";
    case Op::Scatter: return "scatter";
    }
    return "?";
}

inline std::optional<Op> parse_op(std::string_view name) {
    for (int k = 0; k <= static_cast<int>(Op::Scatter); ++k) {
        const auto op = static_cast<Op>(k);
        if (name == op_name(op)) return op;
    }
    return std::nullopt;
}

class Graph;

/// Handle to a node of a Graph. Cheap to copy; valid as long as the graph lives.
class Var {
public:
    Var() = default;

    bool valid() const { return graph_ != nullptr; }
    Graph* graph() const { return graph_; }
    std::size_t id() const { return id_; }

    const Tensor& value() const;
    bool requires_grad() const;

    std::size_t rows() const { return value().rows(); }
    std::size_t cols() const { return value().cols(); }

private:
    friend class Graph;
    Var(Graph* g, std::size_t id) : graph_(g), id_(id) {}

    Graph* graph_ = nullptr;
    std::size_t id_ = 0;
};

/// One operation record: op kind, input ids, output value and op attributes.
struct Node {
    Op op = Op::Constant;
    std::size_t arity = 0;
    std::size_t inputs[2] = {0, 0};
    Tensor value;
    bool requires_grad = false;
    double attr = 0.0;
    std::vector<std::size_t> index;
};

/// Append-only operation tape. Node ids are insertion order, which is also a
/// topological order. A graph is single-threaded; use one graph per thread.
class Graph {
public:
    Graph() = default;
    Graph(const Graph&) = delete;
    Graph& operator=(const Graph&) = delete;

    /// Differentiable input.
    Var leaf(Tensor value) {
        Node n;
        n.op = Op::Leaf;
        n.value = std::move(value);
        n.requires_grad = true;
        return push(std::move(n));
    }

    Var constant(Tensor value) {
        Node n;
        n.op = Op::Constant;
        n.value = std::move(value);
        return push(std::move(n));
    }

    Var scalar(double v) { return constant(Tensor::scalar(v)); }

    std::size_t size() const { return nodes_.size(); }
    const Node& node(std::size_t id) const { return nodes_.at(id); }

    /// Checked mode scans every new value for NaN/Inf and throws NumericError.
    void set_checked(bool on) { checked_ = on; }
    bool checked() const { return checked_; }

    bool grad_enabled() const { return no_grad_depth_ == 0; }

    Var record(Op op, Tensor value, std::initializer_list<Var> inputs, double attr = 0.0,
               std::vector<std::size_t> index = {}) {
        Node n;
        n.op = op;
        n.value = std::move(value);
        n.attr = attr;
        n.index = std::move(index);
        bool needs = false;
        for (const Var& v : inputs) {
            own(v);
            n.inputs[n.arity++] = v.id();
            needs = needs || nodes_[v.id()].requires_grad;
        }
        n.requires_grad = needs && grad_enabled();
        if (checked_ && !n.value.all_finite()) {
            throw NumericError(std::string("non-finite value produced by ") + op_name(op));
        }
        return push(std::move(n));
    }

    /// Handle for an existing node id.
    Var var(std::size_t id) {
        if (id >= nodes_.size()) throw GraphError("variable id out of range");
        return Var(this, id);
    }

    void own(const Var& v) const {
        if (v.graph() != this) throw GraphError("variable belongs to a different graph");
        if (v.id() >= nodes_.size()) throw GraphError("variable id out of range");
    }

private:
    friend class NoGradGuard;

    Var push(Node n) {
        nodes_.push_back(std::move(n));
        return Var(this, nodes_.size() - 1);
    }

    std::deque<Node> nodes_;
    bool checked_ = false;
    int no_grad_depth_ = 0;
};

/// While alive, every recorded op produces a constant (no gradient tracking).
class NoGradGuard {
public:
    explicit NoGradGuard(Graph& g) : g_(g) { ++g_.no_grad_depth_; }
    ~NoGradGuard() { --g_.no_grad_depth_; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    Graph& g_;
};

inline const Tensor& Var::value() const {
    if (!graph_) throw GraphError("use of an unbound variable");
    return graph_->node(id_).value;
}

inline bool Var::requires_grad() const {
    return graph_ && graph_->node(id_).requires_grad;
}

namespace detail {

inline Graph& same_graph(const Var& a, const Var& b) {
    if (!a.valid() || !b.valid()) throw GraphError("use of an unbound variable");
    if (a.graph() != b.graph()) throw GraphError("operands live on different graphs");
    return *a.graph();
}

inline Graph& graph_of(const Var& a) {
    if (!a.valid()) throw GraphError("use of an unbound variable");
    return *a.graph();
}

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (!a.same_shape(b)) {
        throw ShapeError(std::string(op) + ": shape mismatch " + a.shape_string() + " vs " +
                         b.shape_string());
    }
}

template <class F>
Tensor map(const Tensor& a, F f) {
    Tensor out(a.rows(), a.cols());
    for (std::size_t i = 0; i < a.size(); ++i) out[i] = f(a[i]);
    return out;
}

template <class F>
Tensor zip(const Tensor& a, const Tensor& b, F f) {
    Tensor out(a.rows(), a.cols());
    for (std::size_t i = 0; i < a.size(); ++i) out[i] = f(a[i], b[i]);
    return out;
}

} // namespace detail

// ---------------------------------------------------------------------------
// Primitive ops

inline Var matmul(const Var& a, const Var& b) {
    Graph& g = detail::same_graph(a, b);
    const Tensor& x = a.value();
    const Tensor& y = b.value();
    if (x.cols() != y.rows()) {
        throw ShapeError("matmul: inner dimensions differ " + x.shape_string() + " * " +
                         y.shape_string());
    }
    Tensor out(x.rows(), y.cols());
    const std::size_t n = x.rows(), k = x.cols(), m = y.cols();
    for (std::size_t i = 0; i < n; ++i) {
        double* orow = out.values().data() + i * m;
        for (std::size_t p = 0; p < k; ++p) {
            const double s = x(i, p);
            if (s == 0.0) continue;
            const double* yrow = y.values().data() + p * m;
            for (std::size_t j = 0; j < m; ++j) orow[j] += s * yrow[j];
        }
    }
    return g.record(Op::MatMul, std::move(out), {a, b});
}

inline Var transpose(const Var& a) {
    Graph& g = detail::graph_of(a);
    const Tensor& x = a.value();
    Tensor out(x.cols(), x.rows());
    for (std::size_t i = 0; i < x.rows(); ++i)
        for (std::size_t j = 0; j < x.cols(); ++j) out(j, i) = x(i, j);
    return g.record(Op::Transpose, std::move(out), {a});
}

inline Var add(const Var& a, const Var& b) {
    Graph& g = detail::same_graph(a, b);
    detail::require_same_shape(a.value(), b.value(), "add");
    return g.record(Op::Add, detail::zip(a.value(), b.value(), [](double x, double y) { return x + y; }),
                    {a, b});
}

inline Var sub(const Var& a, const Var& b) {
    Graph& g = detail::same_graph(a, b);
    detail::require_same_shape(a.value(), b.value(), "sub");
    return g.record(Op::Sub, detail::zip(a.value(), b.value(), [](double x, double y) { return x - y; }),
                    {a, b});
}

/// Elementwise product.
inline Var mul(const Var& a, const Var& b) {
    Graph& g = detail::same_graph(a, b);
    detail::require_same_shape(a.value(), b.value(), "mul");
    return g.record(Op::Mul, detail::zip(a.value(), b.value(), [](double x, double y) { return x * y; }),
                    {a, b});
}

inline Var div(const Var& a, const Var& b) {
    Graph& g = detail::same_graph(a, b);
    detail::require_same_shape(a.value(), b.value(), "div");
    return g.record(Op::Div, detail::zip(a.value(), b.value(), [](double x, double y) { return x / y; }),
                    {a, b});
}

inline Var scale(const Var& a, double c) {
    Graph& g = detail::graph_of(a);
    return g.record(Op::Scale, detail::map(a.value(), [c](double x) { return c * x; }), {a}, c);
}

inline Var exp(const Var& a) {
    Graph& g = detail::graph_of(a);
    return g.record(Op::Exp, detail::map(a.value(), [](double x) { return std::exp(x); }), {a});
}

inline Var log(const Var& a) {
    Graph& g = detail::graph_of(a);
    return g.record(Op::Log, detail::map(a.value(), [](double x) { return std::log(x); }), {a});
}

inline Var tanh(const Var& a) {
    Graph& g = detail::graph_of(a);
    return g.record(Op::Tanh, detail::map(a.value(), [](double x) { return std::tanh(x); }), {a});
}

inline Var relu(const Var& a) {
    Graph& g = detail::graph_of(a);
    return g.record(Op::Relu, detail::map(a.value(), [](double x) { return x > 0.0 ? x : 0.0; }), {a});
}

inline Var sqrt(const Var& a) {
    Graph& g = detail::graph_of(a);
    return g.record(Op::Sqrt, detail::map(a.value(), [](double x) { return std::sqrt(x); }), {a});
}

/// Sum of all entries, as a rank-0 tensor.
inline Var sum(const Var& a) {
    Graph& g = detail::graph_of(a);
    double s = 0.0;
    for (double v : a.value().values()) s += v;
    return g.record(Op::SumAll, Tensor::scalar(s), {a});
}

/// N x d -> 1 x d, summing over rows.
inline Var sum_rows(const Var& a) {
    Graph& g = detail::graph_of(a);
    const Tensor& x = a.value();
    Tensor out(1, x.cols());
    for (std::size_t i = 0; i < x.rows(); ++i)
        for (std::size_t j = 0; j < x.cols(); ++j) out(0, j) += x(i, j);
    return g.record(Op::SumRows, std::move(out), {a});
}

/// N x d -> N x 1, summing over columns.
inline Var sum_cols(const Var& a) {
    Graph& g = detail::graph_of(a);
    const Tensor& x = a.value();
    Tensor out(x.rows(), 1);
    for (std::size_t i = 0; i < x.rows(); ++i) {
        double s = 0.0;
        for (std::size_t j = 0; j < x.cols(); ++j) s += x(i, j);
        out(i, 0) = s;
    }
    return g.record(Op::SumCols, std::move(out), {a});
}

/// 1 x 1 -> rows x cols.
inline Var broadcast_scalar(const Var& a, std::size_t rows, std::size_t cols) {
    Graph& g = detail::graph_of(a);
    if (a.value().size() != 1) throw ShapeError("broadcast_scalar: input is not a scalar");
    return g.record(Op::BroadcastScalar, Tensor(rows, cols, a.value()[0]), {a});
}

/// 1 x d -> n x d.
inline Var broadcast_rows(const Var& a, std::size_t n) {
    Graph& g = detail::graph_of(a);
    const Tensor& x = a.value();
    if (x.rows() != 1) throw ShapeError("broadcast_rows: expected a row vector, got " + x.shape_string());
    Tensor out(n, x.cols());
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < x.cols(); ++j) out(i, j) = x(0, j);
    return g.record(Op::BroadcastRows, std::move(out), {a});
}

/// N x 1 -> N x d.
inline Var broadcast_cols(const Var& a, std::size_t d) {
    Graph& g = detail::graph_of(a);
    const Tensor& x = a.value();
    if (x.cols() != 1) throw ShapeError("broadcast_cols: expected a column vector, got " + x.shape_string());
    Tensor out(x.rows(), d);
    for (std::size_t i = 0; i < x.rows(); ++i)
        for (std::size_t j = 0; j < d; ++j) out(i, j) = x(i, 0);
    return g.record(Op::BroadcastCols, std::move(out), {a});
}

/// Gathers one column per row: out(i) = x(i, index[i]).
inline Var pick(const Var& a, std::vector<std::size_t> index) {
    Graph& g = detail::graph_of(a);
    const Tensor& x = a.value();
    if (index.size() != x.rows()) throw ShapeError("pick: one index per row required");
    Tensor out(x.rows(), 1);
    for (std::size_t i = 0; i < x.rows(); ++i) {
        if (index[i] >= x.cols()) throw ShapeError("pick: index out of range");
        out(i, 0) = x(i, index[i]);
    }
    return g.record(Op::Pick, std::move(out), {a}, static_cast<double>(x.cols()), std::move(index));
}

/// Adjoint of pick: N x 1 -> N x cols, zeros except out(i, index[i]) = v(i).
inline Var scatter(const Var& a, std::vector<std::size_t> index, std::size_t cols) {
    Graph& g = detail::graph_of(a);
    const Tensor& v = a.value();
    if (v.cols() != 1 || index.size() != v.rows()) throw ShapeError("scatter: expected N x 1 input");
    Tensor out(v.rows(), cols);
    for (std::size_t i = 0; i < v.rows(); ++i) {
        if (index[i] >= cols) throw ShapeError("scatter: index out of range");
        out(i, index[i]) = v(i, 0);
    }
    return g.record(Op::Scatter, std::move(out), {a}, static_cast<double>(cols), std::move(index));
}

inline Var operator+(const Var& a, const Var& b) { return add(a, b); }
inline Var operator-(const Var& a, const Var& b) { return sub(a, b); }
inline Var operator*(const Var& a, const Var& b) { return mul(a, b); }
inline Var operator/(const Var& a, const Var& b) { return div(a, b); }
inline Var operator-(const Var& a) { return scale(a, -1.0); }
inline Var operator*(double c, const Var& a) { return scale(a, c); }

// ---------------------------------------------------------------------------
// Composites

inline Var mean(const Var& a) {
    const std::size_t n = a.value().size();
    if (n == 0) throw ShapeError("mean of an empty tensor");
    return scale(sum(a), 1.0 / static_cast<double>(n));
}

/// Row-wise log-softmax. The row max is a constant shift, which cancels exactly
/// in the derivative, so it does not need to be tracked.
inline Var log_softmax_rows(const Var& a) {
    Graph& g = detail::graph_of(a);
    const Tensor& x = a.value();
    const std::size_t cols = x.cols();
    Tensor shift(x.rows(), 1);
    for (std::size_t i = 0; i < x.rows(); ++i) {
        double m = -INFINITY;
        for (std::size_t j = 0; j < cols; ++j) m = std::max(m, x(i, j));
        shift(i, 0) = std::isfinite(m) ? m : 0.0;
    }
    Var shifted = a - broadcast_cols(g.constant(std::move(shift)), cols);
    Var lse = log(sum_cols(exp(shifted)));
    return shifted - broadcast_cols(lse, cols);
}

inline Var softmax_rows(const Var& a) { return exp(log_softmax_rows(a)); }

/// Euclidean norm of each row, N x d -> N x 1.
inline Var l2_norm_rows(const Var& a) { return sqrt(sum_cols(a * a)); }

/// Frobenius norm of the whole tensor.
inline Var l2_norm(const Var& a) { return sqrt(sum(a * a)); }

/// x W^T + b with b a 1 x out row vector.
inline Var linear(const Var& x, const Var& weight, const Var& bias) {
    return matmul(x, transpose(weight)) + broadcast_rows(bias, x.value().rows());
}

// ---------------------------------------------------------------------------
// Reverse pass

namespace detail {

// Op whose backward rule is deliberately corrupted; -1 when none. Test hook.
inline std::atomic<int> g_fault_op{-1};

} // namespace detail

/// While alive, the backward rule of `op` returns adjoints scaled by 1.01.
/// Only for exercising gradient checkers.
class ScopedFault {
public:
    explicit ScopedFault(Op op) : previous_(detail::g_fault_op.exchange(static_cast<int>(op))) {}
    ~ScopedFault() { detail::g_fault_op.store(previous_); }
    ScopedFault(const ScopedFault&) = delete;
    ScopedFault& operator=(const ScopedFault&) = delete;

private:
    int previous_;
};

namespace detail {

/// Vector-Jacobian product of node `id` given the adjoint of its output.
/// Returns one adjoint per input, expressed with recorded ops.
inline std::vector<Var> vjp(Graph& g, std::size_t id, const Var& out_grad) {
    const Node& n = g.node(id);
    auto input = [&](std::size_t k) { return g.var(n.inputs[k]); };
    const Var self = g.var(id);
    const Var& gr = out_grad;
    switch (n.op) {
    case Op::MatMul:
        return {matmul(gr, transpose(input(1))), matmul(transpose(input(0)), gr)};
    case Op::Transpose:
        return {transpose(gr)};
    case Op::Add:
        return {gr, gr};
    case Op::Sub:
        return {gr, -gr};
    case Op::Mul:
        return {gr * input(1), gr * input(0)};
    case Op::Div: {
        Var ga = gr / input(1);
        return {ga, -(ga * self)};
    }
    case Op::Scale:
        return {scale(gr, n.attr)};
    case Op::Exp:
        return {gr * self};
    case Op::Log:
        return {gr / input(0)};
    case Op::Tanh:
        return {gr - gr * self * self};
    case Op::Relu: {
        const Tensor& x = g.node(n.inputs[0]).value;
        Var mask = g.constant(map(x, [](double v) { return v > 0.0 ? 1.0 : 0.0; }));
        return {gr * mask};
    }
    case Op::Sqrt:
        return {scale(gr / self, 0.5)};
    case Op::SumAll: {
        const Tensor& x = g.node(n.inputs[0]).value;
        return {broadcast_scalar(gr, x.rows(), x.cols())};
    }
    case Op::SumRows:
        return {broadcast_rows(gr, g.node(n.inputs[0]).value.rows())};
    case Op::SumCols:
        return {broadcast_cols(gr, g.node(n.inputs[0]).value.cols())};
    case Op::BroadcastScalar:
        return {sum(gr)};
    case Op::BroadcastRows:
        return {sum_rows(gr)};
    case Op::BroadcastCols:
        return {sum_cols(gr)};
    case Op::Pick:
        return {scatter(gr, n.index, static_cast<std::size_t>(n.attr))};
    case Op::Scatter:
        return {pick(gr, n.index)};
    case Op::Leaf:
    case Op::Constant:
        return {};
    }
    return {};
}

} // namespace detail

/// Gradients of a scalar `loss` with respect to each variable in `wrt`.
///
/// Variables that do not influence the loss get zero gradients. With
/// create_graph the returned gradients are recorded expressions that can be
/// differentiated again; otherwise they are constants.
inline std::vector<Var> grad(const Var& loss, std::span<const Var> wrt, bool create_graph = false) {
    if (!loss.valid()) throw GraphError("grad: loss is not attached to a graph");
    Graph& g = *loss.graph();
    g.own(loss);
    if (loss.value().size() != 1) {
        throw ShapeError("grad: loss must be scalar, got shape " + loss.value().shape_string());
    }
    for (const Var& w : wrt) g.own(w);

    std::optional<NoGradGuard> guard;
    if (!create_graph) guard.emplace(g);

    std::vector<Var> adjoint(loss.id() + 1);
    {
        const Tensor& lv = loss.value();
        adjoint[loss.id()] = g.constant(Tensor(lv.rows(), lv.cols(), 1.0));
    }
    for (std::size_t i = loss.id() + 1; i-- > 0;) {
        if (!adjoint[i].valid()) continue;
        const Node& n = g.node(i);
        if (!n.requires_grad || n.arity == 0) continue;
        std::vector<Var> parts = detail::vjp(g, i, adjoint[i]);
        if (detail::g_fault_op.load(std::memory_order_relaxed) == static_cast<int>(n.op))
            for (auto& p : parts) p = scale(p, 1.01);
        for (std::size_t k = 0; k < parts.size(); ++k) {
            const std::size_t in = g.node(i).inputs[k];
            if (!g.node(in).requires_grad) continue;
            adjoint[in] = adjoint[in].valid() ? adjoint[in] + parts[k] : parts[k];
        }
    }

    std::vector<Var> out;
    out.reserve(wrt.size());
    for (const Var& w : wrt) {
        if (w.id() < adjoint.size() && adjoint[w.id()].valid()) {
            out.push_back(adjoint[w.id()]);
        } else {
            const Tensor& v = w.value();
            out.push_back(g.constant(Tensor(v.rows(), v.cols(), 0.0)));
        }
    }
    return out;
}

inline std::vector<Var> grad(const Var& loss, std::initializer_list<Var> wrt, bool create_graph = false) {
    return grad(loss, std::span<const Var>(wrt.begin(), wrt.size()), create_graph);
}

} // namespace xvl::ad
