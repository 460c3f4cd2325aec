#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "fairmeta/autodiff.hpp"
#include "fairmeta/gradcheck.hpp"
#include "fairmeta/parameter_set.hpp"

#include <cmath>
#include <functional>
#include <random>

using namespace fairmeta;

namespace {

Tensor random_tensor(Shape shape, std::mt19937_64& rng, double lo = -2.0, double hi = 2.0) {
    std::uniform_real_distribution<double> u(lo, hi);
    Tensor t = Tensor::zeros(std::move(shape));
    for (auto& v : t.data()) v = u(rng);
    return t;
}

using Builder = std::function<Node(const ParameterSet&)>;

// Relative error between backward() and central differences of the same graph.
double gradient_error(const Builder& f, const ParameterSet& params) {
    const GradientMap analytic = backward(f(params));
    const GradientMap numeric = finite_difference_gradient(
        [&](const ParameterSet& p) {
            NoGradGuard no_grad;
            return f(p).value().item();
        },
        params, 1e-5);
    return relative_error(params, analytic, numeric);
}

// sum(w ∘ y) with fixed random weights, so every output entry matters.
Node weighted_sum(const Node& y, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    return sum(mul(y, Node::constant(random_tensor(y.shape(), rng))));
}

} // namespace

TEST_CASE("elementwise and structural values") {
    const Node x = Node::constant(Tensor::vector({1, 2}));
    const Node y = Node::constant(Tensor::vector({3, 4}));
    const Node inputs[] = {x, y};
    CHECK(build(OpKind::add, inputs).value() == Tensor::vector({4, 6}));
    CHECK(relu(Node::constant(Tensor::vector({-1, 0, 2}))).value() == Tensor::vector({0, 0, 2}));
    const Node a = Node::constant(Tensor::ones({2, 3}));
    const Node b = Node::constant(Tensor::ones({3, 1}));
    CHECK(matmul(a, b).value() == Tensor::matrix(2, 1, {3, 3}));
}

TEST_CASE("shape errors and domain errors are rejected") {
    const Node a = Node::constant(Tensor::ones({2, 3}));
    CHECK_THROWS_AS(matmul(a, a), std::invalid_argument);
    CHECK_THROWS_AS(add(Node::constant(Tensor::ones({3})), Node::constant(Tensor::ones({2}))),
                    std::invalid_argument);
    CHECK_THROWS_AS(log(Node::constant(Tensor::vector({1, -1}))), std::invalid_argument);
    CHECK_THROWS_AS(sqrt(Node::constant(Tensor::vector({-0.5}))), std::invalid_argument);
    CHECK_THROWS_AS(backward(Node::parameter(Tensor::vector({1, 2}))), std::invalid_argument);
}

TEST_CASE("backward of a sum of squares") {
    const Node x = Node::parameter(Tensor::vector({1, 2, 3}));
    const GradientMap g = backward(sum(mul(x, x)));
    CHECK(g.value_or_zero(x) == Tensor::vector({2, 4, 6}));
}

TEST_CASE("constant root gives an empty map") {
    const Node c = Node::constant(Tensor::scalar(3.0));
    CHECK(backward(c).empty());
    const Node k = Node::constant(Tensor::vector({1, 2}));
    CHECK(backward(sum(mul(k, k))).empty());
}

TEST_CASE("second derivative of a cube") {
    const Node x = Node::parameter(Tensor::scalar(2.0));
    const Node f = mul(mul(x, x), x);
    const GradientMap first = backward(f, /*create_graph=*/true);
    const Node df = first.find(x);
    REQUIRE(df);
    CHECK(df.value().item() == doctest::Approx(12.0).epsilon(1e-14));
    const GradientMap second = backward(df);
    const double analytic = second.value_or_zero(x).item();

    const auto fprime = [](double v) {
        const Node p = Node::parameter(Tensor::scalar(v));
        return backward(mul(mul(p, p), p)).value_or_zero(p).item();
    };
    const double h = 1e-4;
    const double numeric = (fprime(2.0 + h) - fprime(2.0 - h)) / (2 * h);
    CHECK(analytic == doctest::Approx(12.0).epsilon(1e-14));
    CHECK(std::fabs(analytic - numeric) < 1e-6);
}

TEST_CASE("finite differences of simple objectives") {
    const ParameterSet p = ParameterSet::from_tensors({{"theta", Tensor::vector({1, -1})}});
    const GradientMap g = finite_difference_gradient(
        [](const ParameterSet& q) {
            const Tensor& t = q[0].node.value();
            return t[0] * t[0] + t[1] * t[1];
        },
        p, 1e-5);
    const Tensor gv = g.value_or_zero(p[0].node);
    CHECK(std::fabs(gv[0] - 2.0) < 1e-8);
    CHECK(std::fabs(gv[1] + 2.0) < 1e-8);

    const GradientMap z = finite_difference_gradient([](const ParameterSet&) { return 4.0; }, p, 1e-5);
    const Tensor zv = z.value_or_zero(p[0].node);
    for (double v : zv.data()) CHECK(std::fabs(v) < 1e-9);
    CHECK_THROWS_AS(finite_difference_gradient([](const ParameterSet&) { return 0.0; }, p, 0.0),
                    std::invalid_argument);
}

TEST_CASE("softmax cross-entropy of a linear model matches central differences") {
    std::mt19937_64 rng(11);
    const ParameterSet p = ParameterSet::from_tensors({{"w", random_tensor({4, 3}, rng)}, {"b", random_tensor({3}, rng)}});
    const Node x = Node::constant(random_tensor({1, 4}, rng));
    const Builder f = [&](const ParameterSet& q) {
        const Node logits = add(matmul(x, q[0].node), q[1].node);
        const Node picked = mul(log_softmax(logits), Node::constant(Tensor::matrix(1, 3, {0, 1, 0})));
        return neg(sum(picked));
    };
    CHECK(gradient_error(f, p) <= 1e-5);
}

TEST_CASE("every op matches central differences on random inputs") {
    using Unary = std::function<Node(const Node&)>;
    struct Case {
        const char* name;
        Shape shape;
        Unary op;
        bool positive = false;
    };
    const std::vector<Case> unary = {
        {"transpose", {3, 2}, [](const Node& x) { return transpose(x); }},
        {"relu", {3, 4}, [](const Node& x) { return relu(x); }},
        {"exp", {5}, [](const Node& x) { return exp(x); }},
        {"log", {5}, [](const Node& x) { return log(x); }, true},
        {"sum", {2, 3}, [](const Node& x) { return sum(x); }},
        {"sum_axis0", {3, 4}, [](const Node& x) { return sum_axis(x, 0); }},
        {"sum_axis1", {3, 4}, [](const Node& x) { return sum_axis(x, 1); }},
        {"mean", {3, 4}, [](const Node& x) { return mean(x); }},
        {"max_axis0", {3, 4}, [](const Node& x) { return max_over_axis(x, 0); }},
        {"max_axis1", {3, 4}, [](const Node& x) { return max_over_axis(x, 1); }},
        {"abs", {6}, [](const Node& x) { return abs(x); }},
        {"scale", {2, 2}, [](const Node& x) { return scale(x, -1.7); }},
        {"slice", {4, 3}, [](const Node& x) { return slice(x, 0, 1, 3); }},
        {"log_softmax", {3, 4}, [](const Node& x) { return log_softmax(x); }},
        {"softmax", {3, 4}, [](const Node& x) { return softmax(x); }},
        {"square", {5}, [](const Node& x) { return square(x); }},
        {"sqrt", {5}, [](const Node& x) { return sqrt(x); }, true},
        {"reshape", {2, 3}, [](const Node& x) { return reshape(x, {3, 2}); }},
        {"broadcast_to", {1, 3}, [](const Node& x) { return broadcast_to(x, {4, 3}); }},
        {"sum_to", {4, 3}, [](const Node& x) { return sum_to(x, {1, 3}); }},
        {"neg", {4}, [](const Node& x) { return neg(x); }},
    };
    using BinaryOp = std::function<Node(const Node&, const Node&)>;
    struct BinaryCase {
        const char* name;
        Shape a, b;
        BinaryOp op;
        bool positive_b = false;
    };
    const std::vector<BinaryCase> binary = {
        {"add", {3, 2}, {3, 2}, [](const Node& a, const Node& b) { return add(a, b); }},
        {"add_broadcast", {3, 2}, {2}, [](const Node& a, const Node& b) { return add(a, b); }},
        {"sub", {3, 2}, {3, 1}, [](const Node& a, const Node& b) { return sub(a, b); }},
        {"mul", {4}, {4}, [](const Node& a, const Node& b) { return mul(a, b); }},
        {"mul_scalar", {2, 3}, {}, [](const Node& a, const Node& b) { return mul(a, b); }},
        {"div", {2, 3}, {1, 3}, [](const Node& a, const Node& b) { return div(a, b); }, true},
        {"matmul", {2, 3}, {3, 4}, [](const Node& a, const Node& b) { return matmul(a, b); }},
        {"concat0", {2, 3}, {1, 3}, [](const Node& a, const Node& b) {
             const Node parts[] = {a, b};
             return concat(parts, 0);
         }},
        {"concat1", {2, 3}, {2, 2}, [](const Node& a, const Node& b) {
             const Node parts[] = {a, b};
             return concat(parts, 1);
         }},
    };

    std::mt19937_64 rng(2024);
    for (int trial = 0; trial < 100; ++trial) {
        for (const Case& c : unary) {
            const Tensor v = c.positive ? random_tensor(c.shape, rng, 0.2, 2.0) : random_tensor(c.shape, rng);
            const ParameterSet p = ParameterSet::from_tensors({{"x", v}});
            const std::uint64_t wseed = rng();
            const double err = gradient_error([&](const ParameterSet& q) { return weighted_sum(c.op(q[0].node), wseed); }, p);
            INFO(c.name << " trial " << trial);
            CHECK(err <= 1e-5);
        }
        for (const BinaryCase& c : binary) {
            const Tensor b = c.positive_b ? random_tensor(c.b, rng, 0.5, 2.0) : random_tensor(c.b, rng);
            const ParameterSet p = ParameterSet::from_tensors({{"a", random_tensor(c.a, rng)}, {"b", b}});
            const std::uint64_t wseed = rng();
            const double err = gradient_error(
                [&](const ParameterSet& q) { return weighted_sum(c.op(q[0].node, q[1].node), wseed); }, p);
            INFO(c.name << " trial " << trial);
            CHECK(err <= 1e-5);
        }
    }
}

TEST_CASE("gradient of the gradient matches differences of the first gradient") {
    using Unary = std::function<Node(const Node&)>;
    const std::vector<Unary> pool = {
        [](const Node& x) { return exp(scale(x, 0.5)); },
        [](const Node& x) { return square(x); },
        [](const Node& x) { return mul(x, exp(scale(x, -0.3))); },
        [](const Node& x) { return log_softmax(reshape(x, {2, 3})); },
        [](const Node& x) { return sqrt(add(square(x), Node::constant(Tensor::scalar(1.0)))); },
        [](const Node& x) { return softmax(reshape(x, {1, 6})); },
    };
    std::mt19937_64 rng(77);
    for (int trial = 0; trial < 40; ++trial) {
        std::uniform_int_distribution<std::size_t> pick(0, pool.size() - 1);
        std::uniform_int_distribution<int> depth_d(1, 4);
        std::vector<std::size_t> chain(static_cast<std::size_t>(depth_d(rng)));
        for (auto& k : chain) k = pick(rng);
        const std::uint64_t wseed = rng();
        const Tensor probe = random_tensor({6}, rng);
        const auto f = [&](const Node& x) {
            Node y = x;
            for (std::size_t k : chain) y = reshape(pool[k](y), {6});
            return weighted_sum(y, wseed);
        };
        // h(x) = <∇f(x), probe>; its gradient is the Hessian-vector product.
        const auto h = [&](const Node& x, bool create) {
            const Node root = f(x);
            const Node wrt[] = {x};
            const GradientMap g = grad(root, wrt, create);
            const Node gx = create ? g.find(x) : Node::constant(g.value_or_zero(x));
            return sum(mul(gx, Node::constant(probe)));
        };
        const ParameterSet p = ParameterSet::from_tensors({{"x", random_tensor({6}, rng, -1.0, 1.0)}});
        const GradientMap analytic = backward(h(p[0].node, true));
        const GradientMap numeric = finite_difference_gradient(
            [&](const ParameterSet& q) { return h(q[0].node, false).value().item(); }, p, 1e-5);
        INFO("trial " << trial);
        CHECK(relative_error(p, analytic, numeric) <= 1e-4);
    }
}

TEST_CASE("identical graphs give bitwise-identical values and adjoints") {
    std::mt19937_64 rng(5);
    const Tensor w = random_tensor({3, 3}, rng), xv = random_tensor({2, 3}, rng);
    const auto run = [&] {
        const Node p = Node::parameter(w);
        const Node root = sum(log_softmax(matmul(Node::constant(xv), p)));
        return std::pair{root.value(), backward(root).value_or_zero(p)};
    };
    const auto a = run(), b = run();
    CHECK(bitwise_equal(a.first, b.first));
    CHECK(bitwise_equal(a.second, b.second));
}

TEST_CASE("backward is linear in the root") {
    std::mt19937_64 rng(8);
    const Node x = Node::parameter(random_tensor({4}, rng));
    const Node f = sum(exp(x));
    const Node g = sum(mul(x, square(x)));
    const double a = 1.3, b = -0.6;
    const Tensor combined = backward(add(scale(f, a), scale(g, b))).value_or_zero(x);
    const Tensor gf = backward(f).value_or_zero(x), gg = backward(g).value_or_zero(x);
    for (std::size_t i = 0; i < 4; ++i) CHECK(std::fabs(combined[i] - (a * gf[i] + b * gg[i])) <= 1e-12);
}

TEST_CASE("abs has zero subgradient at zero") {
    const Node x = Node::parameter(Tensor::vector({0.0, -2.0, 3.0}));
    CHECK(backward(sum(abs(x))).value_or_zero(x) == Tensor::vector({0.0, -1.0, 1.0}));
}

TEST_CASE("max over an axis routes ties to the lowest index") {
    const Node x = Node::parameter(Tensor::matrix(2, 3, {1, 5, 5, 7, 7, 7}));
    const Node m = max_over_axis(x, 1);
    CHECK(m.value() == Tensor::matrix(2, 1, {5, 7}));
    CHECK(backward(sum(m)).value_or_zero(x) == Tensor::matrix(2, 3, {0, 1, 0, 1, 0, 0}));
}

TEST_CASE("log_softmax stays finite for confident logits") {
    const Node x = Node::parameter(Tensor::matrix(1, 2, {1e6, 0}));
    const Node y = log_softmax(x);
    CHECK(y.value().all_finite());
    CHECK(y.value()[0] == 0.0);
    CHECK(y.value()[1] == -1e6);
    CHECK(backward(sum(y)).value_or_zero(x).all_finite());
}

TEST_CASE("tape ids increase and constants get no adjoint") {
    const Node a = Node::parameter(Tensor::vector({1, 2}));
    const Node c = Node::constant(Tensor::vector({3, 4}));
    const Node b = mul(a, c);
    const Node r = sum(b);
    CHECK(a.tape_id() < c.tape_id());
    CHECK(c.tape_id() < b.tape_id());
    CHECK(b.tape_id() < r.tape_id());
    const GradientMap g = backward(r);
    CHECK(g.contains(a));
    CHECK_FALSE(g.contains(c));
    CHECK_FALSE(g.contains(b));
    CHECK(g.value_or_zero(a) == Tensor::vector({3, 4}));
}

TEST_CASE("no-grad scope records nothing") {
    const Node a = Node::parameter(Tensor::vector({1, 2}));
    Node r;
    {
        NoGradGuard guard;
        CHECK_FALSE(grad_recording_enabled());
        r = sum(mul(a, a));
    }
    CHECK(grad_recording_enabled());
    CHECK_FALSE(r.requires_grad());
    CHECK(backward(r).empty());
}

TEST_CASE("grad with respect to an interior node") {
    const Node x = Node::parameter(Tensor::vector({1, 2}));
    const Node y = scale(x, 3.0);
    const Node root = sum(square(y));
    const Node wrt[] = {y};
    const GradientMap g = grad(root, wrt);
    CHECK(g.value_or_zero(y) == Tensor::vector({6, 12}));
    CHECK_FALSE(g.contains(x));
}

TEST_CASE("gradient map rejects shape mismatches") {
    GradientMap g;
    const Node x = Node::parameter(Tensor::vector({1, 2}));
    CHECK_THROWS_AS(g.insert(x, Node::constant(Tensor::vector({1, 2, 3}))), std::invalid_argument);
    CHECK_FALSE(g.find(x));
    CHECK(g.value_or_zero(x) == Tensor::vector({0, 0}));
}
