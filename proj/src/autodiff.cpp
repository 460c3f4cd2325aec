#include "fairmeta/autodiff.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>
#include <unordered_set>

namespace fairmeta {

namespace detail {

struct NodeData {
    Tensor value;
    OpKind op = OpKind::leaf;
    std::vector<Node> parents;
    bool requires_grad = false;
    std::uint64_t tape_id = 0;
    OpAttrs attrs;
    std::vector<std::size_t> indices; // argmax positions for max_over_axis
};

} // namespace detail

namespace {

std::atomic<std::uint64_t> next_tape_id{1};
thread_local bool recording = true;

class RecordingGuard {
public:
    explicit RecordingGuard(bool enabled) : previous_(recording) { recording = enabled; }
    ~RecordingGuard() { recording = previous_; }
    RecordingGuard(const RecordingGuard&) = delete;
    RecordingGuard& operator=(const RecordingGuard&) = delete;

private:
    bool previous_;
};

[[noreturn]] void fail(OpKind kind, const std::string& what) {
    throw std::invalid_argument(std::string(op_name(kind)) + ": " + what);
}

struct Dims {
    std::size_t rows;
    std::size_t cols;
};

Dims pad2(const Shape& s) {
    switch (s.size()) {
    case 0: return {1, 1};
    case 1: return {1, s[0]};
    default: return {s[0], s[1]};
    }
}

Shape unpad(Dims d, std::size_t rank) {
    switch (rank) {
    case 0: return {};
    case 1: return {d.cols};
    default: return {d.rows, d.cols};
    }
}

bool broadcastable_to(const Shape& from, const Shape& to) {
    if (from.size() > to.size()) return false;
    const Dims f = pad2(from);
    const Dims t = pad2(to);
    return (f.rows == t.rows || f.rows == 1) && (f.cols == t.cols || f.cols == 1);
}

Shape broadcast_shape(OpKind kind, const Shape& a, const Shape& b) {
    if (a == b) return a;
    const Dims da = pad2(a);
    const Dims db = pad2(b);
    auto merge = [&](std::size_t x, std::size_t y) {
        if (x == y || y == 1) return x;
        if (x == 1) return y;
        fail(kind, "shape mismatch " + shape_string(a) + " vs " + shape_string(b));
    };
    return unpad({merge(da.rows, db.rows), merge(da.cols, db.cols)}, std::max(a.size(), b.size()));
}

// Broadcast-aware elementwise kernel.
template <typename F>
Tensor binary_kernel(const Tensor& a, const Tensor& b, const Shape& out_shape, F f) {
    std::vector<double> out(shape_size(out_shape));
    if (a.shape() == b.shape()) {
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(a[i], b[i]);
        return Tensor(out_shape, std::move(out));
    }
    const Dims o = pad2(out_shape);
    const Dims da = pad2(a.shape());
    const Dims db = pad2(b.shape());
    const std::size_t a_rs = da.rows == 1 ? 0 : da.cols, a_cs = da.cols == 1 ? 0 : 1;
    const std::size_t b_rs = db.rows == 1 ? 0 : db.cols, b_cs = db.cols == 1 ? 0 : 1;
    for (std::size_t r = 0; r < o.rows; ++r) {
        for (std::size_t c = 0; c < o.cols; ++c) {
            out[r * o.cols + c] = f(a[r * a_rs + c * a_cs], b[r * b_rs + c * b_cs]);
        }
    }
    return Tensor(out_shape, std::move(out));
}

template <typename F>
Tensor unary_kernel(const Tensor& x, F f) {
    std::vector<double> out(x.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(x[i]);
    return Tensor(x.shape(), std::move(out));
}

void require_rank2(OpKind kind, const Tensor& x) {
    if (x.rank() != 2) fail(kind, "expects a rank-2 input, got " + shape_string(x.shape()));
}

void require_axis(OpKind kind, std::size_t axis, std::size_t rank) {
    if (axis >= std::max<std::size_t>(rank, 1)) fail(kind, "axis " + std::to_string(axis) + " out of range");
}

} // namespace

struct NodeAccess {
    static const detail::NodeData& data(const Node& n) {
        if (!n.data_) throw std::invalid_argument("autodiff: use of a null node");
        return *n.data_;
    }

    static Node make(Tensor value, OpKind op, std::vector<Node> parents, OpAttrs attrs = {},
                     std::vector<std::size_t> indices = {}) {
        auto d = std::make_shared<detail::NodeData>();
        d->value = std::move(value);
        d->op = op;
        d->attrs = std::move(attrs);
        d->indices = std::move(indices);
        d->tape_id = next_tape_id.fetch_add(1, std::memory_order_relaxed);
        bool needs = false;
        for (const Node& p : parents) needs = needs || data(p).requires_grad;
        d->requires_grad = recording && needs;
        if (d->requires_grad) d->parents = std::move(parents);
        return Node(std::move(d));
    }

    static Node leaf(Tensor value, bool requires_grad) {
        auto d = std::make_shared<detail::NodeData>();
        d->value = std::move(value);
        d->requires_grad = requires_grad;
        d->tape_id = next_tape_id.fetch_add(1, std::memory_order_relaxed);
        return Node(std::move(d));
    }
};

const char* op_name(OpKind kind) {
    switch (kind) {
    case OpKind::leaf: return "leaf";
    case OpKind::add: return "add";
    case OpKind::sub: return "sub";
    case OpKind::mul: return "mul";
    case OpKind::div: return "div";
    case OpKind::matmul: return "matmul";
    case OpKind::transpose: return "transpose";
    case OpKind::relu: return "relu";
    case OpKind::exp: return "exp";
    case OpKind::log: return "log";
    case OpKind::sum: return "sum";
    case OpKind::sum_axis: return "sum_axis";
    case OpKind::mean: return "mean";
    case OpKind::max_over_axis: return "max_over_axis";
    case OpKind::abs: return "abs";
    case OpKind::scale: return "scale";
    case OpKind::concat: return "concat";
    case OpKind::slice: return "slice";
    case OpKind::log_softmax: return "log_softmax";
    case OpKind::square: return "square";
    case OpKind::sqrt: return "sqrt";
    case OpKind::reshape: return "reshape";
    case OpKind::broadcast_to: return "broadcast_to";
    case OpKind::sum_to: return "sum_to";
    }
    return "unknown";
}

// ---------------------------------------------------------------------------
// Node

Node Node::parameter(Tensor value) { return NodeAccess::leaf(std::move(value), true); }
Node Node::constant(Tensor value) { return NodeAccess::leaf(std::move(value), false); }

const Tensor& Node::value() const { return NodeAccess::data(*this).value; }
const Shape& Node::shape() const { return NodeAccess::data(*this).value.shape(); }
OpKind Node::op() const { return NodeAccess::data(*this).op; }
bool Node::requires_grad() const { return NodeAccess::data(*this).requires_grad; }
bool Node::is_leaf() const { return NodeAccess::data(*this).op == OpKind::leaf; }
std::uint64_t Node::tape_id() const { return NodeAccess::data(*this).tape_id; }
std::span<const Node> Node::parents() const { return NodeAccess::data(*this).parents; }
Node Node::detach() const { return constant(value()); }

NoGradGuard::NoGradGuard() : previous_(recording) { recording = false; }
NoGradGuard::~NoGradGuard() { recording = previous_; }

bool grad_recording_enabled() noexcept { return recording; }

// ---------------------------------------------------------------------------
// Forward evaluation

namespace {

Node make_binary(OpKind kind, const Node& a, const Node& b) {
    const Tensor& x = a.value();
    const Tensor& y = b.value();
    const Shape out = broadcast_shape(kind, x.shape(), y.shape());
    Tensor v;
    switch (kind) {
    case OpKind::add: v = binary_kernel(x, y, out, [](double p, double q) { return p + q; }); break;
    case OpKind::sub: v = binary_kernel(x, y, out, [](double p, double q) { return p - q; }); break;
    case OpKind::mul: v = binary_kernel(x, y, out, [](double p, double q) { return p * q; }); break;
    case OpKind::div: v = binary_kernel(x, y, out, [](double p, double q) { return p / q; }); break;
    default: fail(kind, "not a binary op");
    }
    return NodeAccess::make(std::move(v), kind, {a, b});
}

Tensor matmul_kernel(const Tensor& a, const Tensor& b) {
    const std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
    std::vector<double> out(m * n, 0.0);
    const auto ad = a.data();
    const auto bd = b.data();
    for (std::size_t i = 0; i < m; ++i) {
        double* row = out.data() + i * n;
        for (std::size_t p = 0; p < k; ++p) {
            const double aip = ad[i * k + p];
            const double* brow = bd.data() + p * n;
            for (std::size_t j = 0; j < n; ++j) row[j] += aip * brow[j];
        }
    }
    return Tensor({m, n}, std::move(out));
}

Tensor transpose_kernel(const Tensor& x) {
    const std::size_t r = x.shape()[0], c = x.shape()[1];
    std::vector<double> out(r * c);
    for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) out[j * r + i] = x[i * c + j];
    return Tensor({c, r}, std::move(out));
}

Tensor broadcast_kernel(const Tensor& x, const Shape& to) {
    const Tensor zero = Tensor::zeros(to);
    return binary_kernel(x, zero, to, [](double p, double) { return p; });
}

Tensor sum_to_kernel(const Tensor& x, const Shape& to) {
    const Dims from = pad2(x.shape());
    const Dims t = pad2(to);
    std::vector<double> out(shape_size(to), 0.0);
    for (std::size_t r = 0; r < from.rows; ++r) {
        const std::size_t tr = t.rows == 1 ? 0 : r;
        for (std::size_t c = 0; c < from.cols; ++c) {
            const std::size_t tc = t.cols == 1 ? 0 : c;
            out[tr * t.cols + tc] += x[r * from.cols + c];
        }
    }
    return Tensor(to, std::move(out));
}

} // namespace

Node add(const Node& a, const Node& b) { return make_binary(OpKind::add, a, b); }
Node sub(const Node& a, const Node& b) { return make_binary(OpKind::sub, a, b); }
Node mul(const Node& a, const Node& b) { return make_binary(OpKind::mul, a, b); }
Node div(const Node& a, const Node& b) { return make_binary(OpKind::div, a, b); }

Node matmul(const Node& a, const Node& b) {
    const Tensor& x = a.value();
    const Tensor& y = b.value();
    if (x.rank() != 2 || y.rank() != 2 || x.shape()[1] != y.shape()[0]) {
        fail(OpKind::matmul, "shape mismatch " + shape_string(x.shape()) + " x " + shape_string(y.shape()));
    }
    return NodeAccess::make(matmul_kernel(x, y), OpKind::matmul, {a, b});
}

Node transpose(const Node& x) {
    require_rank2(OpKind::transpose, x.value());
    return NodeAccess::make(transpose_kernel(x.value()), OpKind::transpose, {x});
}

Node relu(const Node& x) {
    return NodeAccess::make(unary_kernel(x.value(), [](double v) { return v > 0.0 ? v : 0.0; }), OpKind::relu, {x});
}

Node exp(const Node& x) {
    return NodeAccess::make(unary_kernel(x.value(), [](double v) { return std::exp(v); }), OpKind::exp, {x});
}

Node log(const Node& x) {
    for (double v : x.value().data()) {
        if (v < 0.0 || std::isnan(v)) fail(OpKind::log, "negative input " + std::to_string(v));
    }
    return NodeAccess::make(unary_kernel(x.value(), [](double v) { return std::log(v); }), OpKind::log, {x});
}

Node abs(const Node& x) {
    return NodeAccess::make(unary_kernel(x.value(), [](double v) { return std::fabs(v); }), OpKind::abs, {x});
}

Node square(const Node& x) {
    return NodeAccess::make(unary_kernel(x.value(), [](double v) { return v * v; }), OpKind::square, {x});
}

Node sqrt(const Node& x) {
    for (double v : x.value().data()) {
        if (v < 0.0 || std::isnan(v)) fail(OpKind::sqrt, "negative input " + std::to_string(v));
    }
    return NodeAccess::make(unary_kernel(x.value(), [](double v) { return std::sqrt(v); }), OpKind::sqrt, {x});
}

Node scale(const Node& x, double factor) {
    OpAttrs attrs;
    attrs.factor = factor;
    return NodeAccess::make(unary_kernel(x.value(), [factor](double v) { return factor * v; }), OpKind::scale, {x},
                            attrs);
}

Node neg(const Node& x) { return scale(x, -1.0); }

Node sum(const Node& x) {
    double total = 0.0;
    for (double v : x.value().data()) total += v;
    return NodeAccess::make(Tensor::scalar(total), OpKind::sum, {x});
}

Node mean(const Node& x) {
    const Tensor& t = x.value();
    if (t.size() == 0) fail(OpKind::mean, "empty input");
    double total = 0.0;
    for (double v : t.data()) total += v;
    return NodeAccess::make(Tensor::scalar(total / static_cast<double>(t.size())), OpKind::mean, {x});
}

Node sum_axis(const Node& x, std::size_t axis) {
    const Tensor& t = x.value();
    require_rank2(OpKind::sum_axis, t);
    require_axis(OpKind::sum_axis, axis, 2);
    const std::size_t r = t.shape()[0], c = t.shape()[1];
    Shape out_shape = axis == 0 ? Shape{1, c} : Shape{r, 1};
    std::vector<double> out(shape_size(out_shape), 0.0);
    for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) out[axis == 0 ? j : i] += t[i * c + j];
    OpAttrs attrs;
    attrs.axis = axis;
    return NodeAccess::make(Tensor(std::move(out_shape), std::move(out)), OpKind::sum_axis, {x}, attrs);
}

Node max_over_axis(const Node& x, std::size_t axis) {
    const Tensor& t = x.value();
    require_rank2(OpKind::max_over_axis, t);
    require_axis(OpKind::max_over_axis, axis, 2);
    const std::size_t r = t.shape()[0], c = t.shape()[1];
    if (r == 0 || c == 0) fail(OpKind::max_over_axis, "empty input");
    const std::size_t lanes = axis == 0 ? c : r;
    const std::size_t extent = axis == 0 ? r : c;
    std::vector<double> out(lanes);
    std::vector<std::size_t> flat_index(lanes);
    for (std::size_t l = 0; l < lanes; ++l) {
        std::size_t best = axis == 0 ? l : l * c;
        for (std::size_t e = 1; e < extent; ++e) {
            const std::size_t idx = axis == 0 ? e * c + l : l * c + e;
            if (t[idx] > t[best]) best = idx; // strict: lowest index wins ties
        }
        out[l] = t[best];
        flat_index[l] = best;
    }
    OpAttrs attrs;
    attrs.axis = axis;
    Shape out_shape = axis == 0 ? Shape{1, c} : Shape{r, 1};
    return NodeAccess::make(Tensor(std::move(out_shape), std::move(out)), OpKind::max_over_axis, {x}, attrs,
                            std::move(flat_index));
}

Node concat(std::span<const Node> parts, std::size_t axis) {
    if (parts.empty()) fail(OpKind::concat, "no inputs");
    const Tensor& first = parts[0].value();
    if (first.rank() == 1) {
        if (axis != 0) fail(OpKind::concat, "rank-1 inputs concatenate along axis 0 only");
        std::vector<double> out;
        for (const Node& p : parts) {
            if (p.value().rank() != 1) fail(OpKind::concat, "mixed ranks");
            out.insert(out.end(), p.value().data().begin(), p.value().data().end());
        }
        OpAttrs attrs;
        attrs.axis = axis;
        return NodeAccess::make(Tensor::vector(std::move(out)), OpKind::concat, {parts.begin(), parts.end()}, attrs);
    }
    require_rank2(OpKind::concat, first);
    require_axis(OpKind::concat, axis, 2);
    std::size_t rows = 0, cols = 0;
    for (const Node& p : parts) {
        const Tensor& t = p.value();
        require_rank2(OpKind::concat, t);
        if (axis == 0) {
            if (t.shape()[1] != first.shape()[1]) fail(OpKind::concat, "column count mismatch");
            rows += t.shape()[0];
        } else {
            if (t.shape()[0] != first.shape()[0]) fail(OpKind::concat, "row count mismatch");
            cols += t.shape()[1];
        }
    }
    if (axis == 0) cols = first.shape()[1];
    else rows = first.shape()[0];
    std::vector<double> out(rows * cols);
    std::size_t offset = 0;
    for (const Node& p : parts) {
        const Tensor& t = p.value();
        const std::size_t pr = t.shape()[0], pc = t.shape()[1];
        for (std::size_t i = 0; i < pr; ++i)
            for (std::size_t j = 0; j < pc; ++j) {
                if (axis == 0) out[(offset + i) * cols + j] = t[i * pc + j];
                else out[i * cols + offset + j] = t[i * pc + j];
            }
        offset += axis == 0 ? pr : pc;
    }
    OpAttrs attrs;
    attrs.axis = axis;
    return NodeAccess::make(Tensor({rows, cols}, std::move(out)), OpKind::concat, {parts.begin(), parts.end()},
                            attrs);
}

Node slice(const Node& x, std::size_t axis, std::size_t begin, std::size_t end) {
    const Tensor& t = x.value();
    const Dims d = pad2(t.shape());
    if (t.rank() == 0) fail(OpKind::slice, "cannot slice a scalar");
    require_axis(OpKind::slice, axis, t.rank());
    const bool along_rows = t.rank() == 2 && axis == 0;
    const std::size_t extent = along_rows ? d.rows : d.cols;
    if (begin > end || end > extent) fail(OpKind::slice, "range out of bounds");
    std::vector<double> out;
    Shape out_shape;
    if (along_rows) {
        out.assign(t.data().begin() + static_cast<std::ptrdiff_t>(begin * d.cols),
                   t.data().begin() + static_cast<std::ptrdiff_t>(end * d.cols));
        out_shape = {end - begin, d.cols};
    } else {
        for (std::size_t i = 0; i < d.rows; ++i)
            for (std::size_t j = begin; j < end; ++j) out.push_back(t[i * d.cols + j]);
        out_shape = t.rank() == 1 ? Shape{end - begin} : Shape{d.rows, end - begin};
    }
    OpAttrs attrs;
    attrs.axis = axis;
    attrs.begin = begin;
    attrs.end = end;
    return NodeAccess::make(Tensor(std::move(out_shape), std::move(out)), OpKind::slice, {x}, attrs);
}

Node log_softmax(const Node& x) {
    const Tensor& t = x.value();
    if (t.rank() == 0) fail(OpKind::log_softmax, "expects rank 1 or 2");
    const Dims d = pad2(t.shape());
    if (d.cols == 0) fail(OpKind::log_softmax, "empty rows");
    std::vector<double> out(t.size());
    for (std::size_t i = 0; i < d.rows; ++i) {
        const double* row = t.data().data() + i * d.cols;
        double mx = row[0];
        for (std::size_t j = 1; j < d.cols; ++j) mx = std::max(mx, row[j]);
        double acc = 0.0;
        for (std::size_t j = 0; j < d.cols; ++j) acc += std::exp(row[j] - mx);
        const double lse = mx + std::log(acc);
        for (std::size_t j = 0; j < d.cols; ++j) out[i * d.cols + j] = row[j] - lse;
    }
    return NodeAccess::make(Tensor(t.shape(), std::move(out)), OpKind::log_softmax, {x});
}

Node softmax(const Node& x) { return exp(log_softmax(x)); }

Node reshape(const Node& x, Shape shape) {
    if (shape_size(shape) != x.value().size()) {
        fail(OpKind::reshape, "cannot reshape " + shape_string(x.shape()) + " to " + shape_string(shape));
    }
    if (shape == x.shape()) return x;
    OpAttrs attrs;
    attrs.shape = shape;
    std::vector<double> data(x.value().data().begin(), x.value().data().end());
    return NodeAccess::make(Tensor(std::move(shape), std::move(data)), OpKind::reshape, {x}, attrs);
}

Node broadcast_to(const Node& x, Shape shape) {
    if (x.shape() == shape) return x;
    if (!broadcastable_to(x.shape(), shape)) {
        fail(OpKind::broadcast_to, "cannot broadcast " + shape_string(x.shape()) + " to " + shape_string(shape));
    }
    OpAttrs attrs;
    attrs.shape = shape;
    return NodeAccess::make(broadcast_kernel(x.value(), shape), OpKind::broadcast_to, {x}, attrs);
}

Node sum_to(const Node& x, Shape shape) {
    if (x.shape() == shape) return x;
    if (!broadcastable_to(shape, x.shape())) {
        fail(OpKind::sum_to, "cannot reduce " + shape_string(x.shape()) + " to " + shape_string(shape));
    }
    OpAttrs attrs;
    attrs.shape = shape;
    return NodeAccess::make(sum_to_kernel(x.value(), shape), OpKind::sum_to, {x}, attrs);
}

Node build(OpKind kind, std::span<const Node> inputs, const OpAttrs& attrs) {
    auto arity = [&](std::size_t n) {
        if (inputs.size() != n) {
            fail(kind, "expects " + std::to_string(n) + " inputs, got " + std::to_string(inputs.size()));
        }
    };
    switch (kind) {
    case OpKind::leaf: fail(kind, "leaves are created with Node::parameter or Node::constant");
    case OpKind::add: arity(2); return add(inputs[0], inputs[1]);
    case OpKind::sub: arity(2); return sub(inputs[0], inputs[1]);
    case OpKind::mul: arity(2); return mul(inputs[0], inputs[1]);
    case OpKind::div: arity(2); return div(inputs[0], inputs[1]);
    case OpKind::matmul: arity(2); return matmul(inputs[0], inputs[1]);
    case OpKind::transpose: arity(1); return transpose(inputs[0]);
    case OpKind::relu: arity(1); return relu(inputs[0]);
    case OpKind::exp: arity(1); return exp(inputs[0]);
    case OpKind::log: arity(1); return log(inputs[0]);
    case OpKind::sum: arity(1); return sum(inputs[0]);
    case OpKind::sum_axis: arity(1); return sum_axis(inputs[0], attrs.axis);
    case OpKind::mean: arity(1); return mean(inputs[0]);
    case OpKind::max_over_axis: arity(1); return max_over_axis(inputs[0], attrs.axis);
    case OpKind::abs: arity(1); return abs(inputs[0]);
    case OpKind::scale: arity(1); return scale(inputs[0], attrs.factor);
    case OpKind::concat: return concat(inputs, attrs.axis);
    case OpKind::slice: arity(1); return slice(inputs[0], attrs.axis, attrs.begin, attrs.end);
    case OpKind::log_softmax: arity(1); return log_softmax(inputs[0]);
    case OpKind::square: arity(1); return square(inputs[0]);
    case OpKind::sqrt: arity(1); return sqrt(inputs[0]);
    case OpKind::reshape: arity(1); return reshape(inputs[0], attrs.shape);
    case OpKind::broadcast_to: arity(1); return broadcast_to(inputs[0], attrs.shape);
    case OpKind::sum_to: arity(1); return sum_to(inputs[0], attrs.shape);
    }
    fail(kind, "unknown op");
}

// ---------------------------------------------------------------------------
// Backward rules

namespace {

Node constant_like(const Tensor& pattern, double (*f)(double)) {
    return Node::constant(unary_kernel(pattern, f));
}

// Adjoints of `self`'s parents given the adjoint `g` of `self`. Entries for
// parents that do not need a gradient are left null.
std::vector<Node> vector_jacobian(const Node& self, const detail::NodeData& d, const Node& g) {
    const std::vector<Node>& in = d.parents;
    std::vector<Node> out(in.size());
    auto need = [&](std::size_t i) { return in[i].requires_grad(); };

    switch (d.op) {
    case OpKind::leaf: break;
    case OpKind::add:
        if (need(0)) out[0] = sum_to(g, in[0].shape());
        if (need(1)) out[1] = sum_to(g, in[1].shape());
        break;
    case OpKind::sub:
        if (need(0)) out[0] = sum_to(g, in[0].shape());
        if (need(1)) out[1] = sum_to(neg(g), in[1].shape());
        break;
    case OpKind::mul:
        if (need(0)) out[0] = sum_to(mul(g, in[1]), in[0].shape());
        if (need(1)) out[1] = sum_to(mul(g, in[0]), in[1].shape());
        break;
    case OpKind::div:
        if (need(0)) out[0] = sum_to(div(g, in[1]), in[0].shape());
        if (need(1)) out[1] = sum_to(neg(div(mul(g, self), in[1])), in[1].shape());
        break;
    case OpKind::matmul:
        if (need(0)) out[0] = matmul(g, transpose(in[1]));
        if (need(1)) out[1] = matmul(transpose(in[0]), g);
        break;
    case OpKind::transpose: out[0] = transpose(g); break;
    case OpKind::relu:
        out[0] = mul(g, constant_like(in[0].value(), [](double v) { return v > 0.0 ? 1.0 : 0.0; }));
        break;
    case OpKind::exp: out[0] = mul(g, self); break;
    case OpKind::log: out[0] = div(g, in[0]); break;
    case OpKind::abs:
        // Subgradient 0 at exactly 0.
        out[0] = mul(g, constant_like(in[0].value(), [](double v) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); }));
        break;
    case OpKind::square: out[0] = mul(g, scale(in[0], 2.0)); break;
    case OpKind::sqrt: out[0] = div(g, scale(self, 2.0)); break;
    case OpKind::scale: out[0] = scale(g, d.attrs.factor); break;
    case OpKind::sum: out[0] = broadcast_to(g, in[0].shape()); break;
    case OpKind::mean:
        out[0] = broadcast_to(scale(g, 1.0 / static_cast<double>(in[0].value().size())), in[0].shape());
        break;
    case OpKind::sum_axis: out[0] = broadcast_to(g, in[0].shape()); break;
    case OpKind::max_over_axis: {
        Tensor mask = Tensor::zeros(in[0].shape());
        for (std::size_t idx : d.indices) mask[idx] = 1.0;
        out[0] = mul(broadcast_to(g, in[0].shape()), Node::constant(std::move(mask)));
        break;
    }
    case OpKind::concat: {
        std::size_t offset = 0;
        for (std::size_t i = 0; i < in.size(); ++i) {
            const Shape& s = in[i].shape();
            const std::size_t len = (s.size() == 2 && d.attrs.axis == 1) ? s[1] : s[0];
            if (need(i)) out[i] = slice(g, d.attrs.axis, offset, offset + len);
            offset += len;
        }
        break;
    }
    case OpKind::slice: {
        const Shape& s = in[0].shape();
        const std::size_t axis = d.attrs.axis;
        const bool along_rows = s.size() == 2 && axis == 0;
        const std::size_t extent = along_rows ? s[0] : s.back();
        auto zeros = [&](std::size_t len) {
            Shape zs = s;
            if (along_rows) zs[0] = len;
            else zs.back() = len;
            return Node::constant(Tensor::zeros(zs));
        };
        std::vector<Node> pieces;
        if (d.attrs.begin > 0) pieces.push_back(zeros(d.attrs.begin));
        pieces.push_back(g);
        if (d.attrs.end < extent) pieces.push_back(zeros(extent - d.attrs.end));
        out[0] = pieces.size() == 1 ? g : concat(pieces, axis);
        break;
    }
    case OpKind::log_softmax: {
        const Node row_total = self.value().rank() == 2 ? sum_axis(g, 1) : sum(g);
        out[0] = sub(g, mul(exp(self), row_total));
        break;
    }
    case OpKind::reshape: out[0] = reshape(g, in[0].shape()); break;
    case OpKind::broadcast_to: out[0] = sum_to(g, in[0].shape()); break;
    case OpKind::sum_to: out[0] = broadcast_to(g, in[0].shape()); break;
    }
    return out;
}

GradientMap run_backward(const Node& root, const std::vector<Node>* wrt, bool create_graph) {
    if (!root) throw std::invalid_argument("backward: null root");
    if (root.value().rank() != 0) {
        throw std::invalid_argument("backward: root must be scalar, got shape " + shape_string(root.shape()));
    }
    GradientMap result;
    if (!root.requires_grad()) return result;

    std::unordered_set<const void*> targets;
    if (wrt) {
        for (const Node& w : *wrt) targets.insert(w.id());
    }

    // Collect the requires_grad ancestry, stopping at targets.
    std::vector<Node> order;
    std::unordered_set<const void*> seen;
    std::vector<Node> stack{root};
    seen.insert(root.id());
    while (!stack.empty()) {
        Node n = std::move(stack.back());
        stack.pop_back();
        const bool stop = targets.count(n.id()) > 0;
        for (const Node& p : n.parents()) {
            if (!stop && p.requires_grad() && seen.insert(p.id()).second) stack.push_back(p);
        }
        order.push_back(std::move(n));
    }
    std::sort(order.begin(), order.end(), [](const Node& a, const Node& b) { return a.tape_id() > b.tape_id(); });

    RecordingGuard guard(create_graph);
    std::unordered_map<const void*, Node> adjoint;
    adjoint.emplace(root.id(), Node::constant(Tensor::scalar(1.0)));

    for (const Node& n : order) {
        auto it = adjoint.find(n.id());
        if (it == adjoint.end() || n.is_leaf() || targets.count(n.id())) continue;
        const Node g = it->second;
        const detail::NodeData& d = NodeAccess::data(n);
        std::vector<Node> contributions = vector_jacobian(n, d, g);
        for (std::size_t i = 0; i < contributions.size(); ++i) {
            if (!contributions[i]) continue;
            const Node& parent = d.parents[i];
            auto [slot, inserted] = adjoint.try_emplace(parent.id(), contributions[i]);
            if (!inserted) slot->second = add(slot->second, contributions[i]);
        }
    }

    if (wrt) {
        for (const Node& w : *wrt) {
            auto it = adjoint.find(w.id());
            if (it != adjoint.end()) result.insert(w, it->second);
        }
    } else {
        for (const Node& n : order) {
            if (!n.is_leaf()) continue;
            auto it = adjoint.find(n.id());
            if (it != adjoint.end()) result.insert(n, it->second);
        }
    }
    return result;
}

} // namespace

// ---------------------------------------------------------------------------
// GradientMap

void GradientMap::insert(const Node& key, Node adjoint) {
    if (adjoint.shape() != key.shape()) {
        throw std::invalid_argument("gradient map: adjoint shape " + shape_string(adjoint.shape()) +
                                    " differs from parameter shape " + shape_string(key.shape()));
    }
    entries_.insert_or_assign(key.id(), std::make_pair(key, std::move(adjoint)));
}

bool GradientMap::contains(const Node& key) const { return entries_.count(key.id()) > 0; }

Node GradientMap::find(const Node& key) const {
    auto it = entries_.find(key.id());
    return it == entries_.end() ? Node{} : it->second.second;
}

Tensor GradientMap::value_or_zero(const Node& key) const {
    auto it = entries_.find(key.id());
    return it == entries_.end() ? Tensor::zeros(key.shape()) : it->second.second.value();
}

GradientMap backward(const Node& root, bool create_graph) { return run_backward(root, nullptr, create_graph); }

GradientMap grad(const Node& root, std::span<const Node> wrt, bool create_graph) {
    std::vector<Node> targets(wrt.begin(), wrt.end());
    return run_backward(root, &targets, create_graph);
}

} // namespace fairmeta
