#pragma once

// Reverse-mode automatic differentiation over dense double tensors.
//
// Every backward rule is written in terms of the differentiable operations
// below, so a gradient computed with create_graph = true is itself a graph
// that can be differentiated again (gradient of gradient).

#include "fairmeta/tensor.hpp"

#include <cstdint>
#include <memory>
#include <span>
#include <unordered_map>
#include <utility>
#include <vector>

namespace fairmeta {

enum class OpKind {
    leaf,
    add,
    sub,
    mul,
    div,
    matmul,
    transpose,
    relu,
    exp,
    log,
    sum,
    sum_axis,
    mean,
    max_over_axis,
    abs,
    scale,
    concat,
    slice,
    log_softmax,
    square,
    sqrt,
    reshape,
    broadcast_to,
    sum_to,
};

const char* op_name(OpKind kind);

/// Extra arguments of an operation. Only the fields an op reads matter.
struct OpAttrs {
    double factor = 1.0;     // scale
    std::size_t axis = 0;    // sum_axis, max_over_axis, concat, slice
    std::size_t begin = 0;   // slice
    std::size_t end = 0;     // slice
    Shape shape;             // reshape, broadcast_to, sum_to
};

namespace detail {
struct NodeData;
}

/// Handle to an immutable graph node. Copies share the node.
class Node {
public:
    Node() = default;

    /// Leaf that receives an adjoint.
    static Node parameter(Tensor value);
    /// Leaf that never receives an adjoint.
    static Node constant(Tensor value);

    explicit operator bool() const noexcept { return data_ != nullptr; }

    const Tensor& value() const;
    const Shape& shape() const;
    OpKind op() const;
    bool requires_grad() const;
    bool is_leaf() const;
    std::uint64_t tape_id() const;
    std::span<const Node> parents() const;

    /// Constant leaf holding the same value.
    Node detach() const;

    /// Identity of the underlying node; stable for the node's lifetime.
    const void* id() const noexcept { return data_.get(); }

private:
    friend struct NodeAccess;
    explicit Node(std::shared_ptr<const detail::NodeData> data) : data_(std::move(data)) {}
    std::shared_ptr<const detail::NodeData> data_;
};

/// While alive, newly built nodes do not record their inputs and never
/// require gradients.
class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool previous_;
};

bool grad_recording_enabled() noexcept;

/// Generic constructor used by the named operations below.
Node build(OpKind kind, std::span<const Node> inputs, const OpAttrs& attrs = {});

// Elementwise binary ops broadcast numpy-style over rank <= 2.
Node add(const Node& a, const Node& b);
Node sub(const Node& a, const Node& b);
Node mul(const Node& a, const Node& b);
Node div(const Node& a, const Node& b);

Node matmul(const Node& a, const Node& b);
Node transpose(const Node& x);
Node relu(const Node& x);
Node exp(const Node& x);
Node log(const Node& x);
Node abs(const Node& x);
Node square(const Node& x);
Node sqrt(const Node& x);
Node scale(const Node& x, double factor);
Node neg(const Node& x);

Node sum(const Node& x);
Node mean(const Node& x);
/// Sum of a rank-2 tensor over `axis`, keeping the reduced dimension.
Node sum_axis(const Node& x, std::size_t axis);
/// Max of a rank-2 tensor over `axis`, keeping the reduced dimension.
/// Ties route the gradient to the lowest index.
Node max_over_axis(const Node& x, std::size_t axis);

Node concat(std::span<const Node> parts, std::size_t axis);
Node slice(const Node& x, std::size_t axis, std::size_t begin, std::size_t end);

/// Row-wise log-softmax (last axis), stabilized by max subtraction.
Node log_softmax(const Node& x);
Node softmax(const Node& x);

Node reshape(const Node& x, Shape shape);
Node broadcast_to(const Node& x, Shape shape);
/// Sums a broadcast value back down to `shape`.
Node sum_to(const Node& x, Shape shape);

inline Node operator+(const Node& a, const Node& b) { return add(a, b); }
inline Node operator-(const Node& a, const Node& b) { return sub(a, b); }
inline Node operator*(const Node& a, const Node& b) { return mul(a, b); }
inline Node operator/(const Node& a, const Node& b) { return div(a, b); }
inline Node operator-(const Node& a) { return neg(a); }

/// Adjoints keyed by node identity. A missing entry means zero.
class GradientMap {
public:
    void insert(const Node& key, Node adjoint);

    bool contains(const Node& key) const;
    /// Adjoint node for `key`, or a null Node when absent.
    Node find(const Node& key) const;
    /// Adjoint value for `key`, zeros of the key's shape when absent.
    Tensor value_or_zero(const Node& key) const;

    std::size_t size() const noexcept { return entries_.size(); }
    bool empty() const noexcept { return entries_.empty(); }

private:
    std::unordered_map<const void*, std::pair<Node, Node>> entries_;
};

/// Adjoints of a scalar root with respect to every leaf that requires a
/// gradient. With create_graph set the returned adjoints are differentiable.
GradientMap backward(const Node& root, bool create_graph = false);

/// Adjoints of a scalar root with respect to the given nodes, which need not
/// be leaves.
GradientMap grad(const Node& root, std::span<const Node> wrt, bool create_graph = false);

} // namespace fairmeta
