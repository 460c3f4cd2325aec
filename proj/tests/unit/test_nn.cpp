#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "fairmeta/gradcheck.hpp"
#include "fairmeta/nn.hpp"

#include <cmath>
#include <random>

using namespace fairmeta;

namespace {

MlpSpec small_spec() {
    MlpSpec s;
    s.input_dim = 2;
    s.hidden_dims = {4};
    s.num_classes = 3;
    return s;
}

ParameterSet vector_params(std::vector<double> v) { return ParameterSet::from_tensors({{"theta", Tensor::vector(std::move(v))}}); }

GradientMap gradient_for(const ParameterSet& p, std::vector<double> g) {
    GradientMap m;
    m.insert(p[0].node, Node::constant(Tensor::vector(std::move(g))));
    return m;
}

} // namespace

TEST_CASE("init is deterministic per seed") {
    const ParameterSet a = init_params(small_spec(), 7);
    const ParameterSet b = init_params(small_spec(), 7);
    const ParameterSet c = init_params(small_spec(), 8);
    CHECK(a.same_values(b));
    CHECK_FALSE(a.same_values(c));
    CHECK(a.size() == 4);
    CHECK(a[0].name == "dense0.weight");
    CHECK(a[1].name == "dense0.bias");
}

TEST_CASE("biases start at zero and weights respect the fan bound") {
    MlpSpec s;
    s.input_dim = 5;
    s.hidden_dims = {7, 3};
    s.num_classes = 4;
    const ParameterSet p = init_params(s, 1);
    for (const auto& e : p) {
        const Tensor& t = e.node.value();
        if (t.rank() == 1) {
            for (double v : t.data()) CHECK(v == 0.0);
        } else {
            const double bound = std::sqrt(6.0 / static_cast<double>(t.rows() + t.cols()));
            for (double v : t.data()) CHECK(std::fabs(v) <= bound);
        }
    }
    const ParameterSet q = init_params(small_spec(), 7);
    const double bound0 = std::sqrt(6.0 / (2.0 + 4.0));
    for (double v : q.at("dense0.weight").value().data()) CHECK(std::fabs(v) <= bound0);
    const double bound1 = std::sqrt(6.0 / (4.0 + 3.0));
    for (double v : q.at("dense1.weight").value().data()) CHECK(std::fabs(v) <= bound1);
}

TEST_CASE("spec validation") {
    MlpSpec s = small_spec();
    s.num_classes = 1;
    CHECK_THROWS_AS(s.validate(), std::invalid_argument);
    s = small_spec();
    s.hidden_dims = {0};
    CHECK_THROWS_AS(init_params(s, 0), std::invalid_argument);
}

TEST_CASE("forward shape and simple values") {
    const ParameterSet p = init_params(small_spec(), 3);
    std::vector<Tensor> zeros;
    for (const auto& e : p) zeros.push_back(Tensor::zeros(e.node.value().shape()));
    const Tensor x = Tensor::matrix(5, 2, {1, 2, 3, 4, 5, 6, 7, 8, 9, 10});
    const Node z = forward(p.with_values(zeros), x);
    CHECK(z.shape() == Shape{5, 3});
    for (double v : z.value().data()) CHECK(v == 0.0);
    CHECK(forward(p, x).shape() == Shape{5, 3});

    MlpSpec linear;
    linear.input_dim = 2;
    linear.hidden_dims = {};
    linear.num_classes = 2;
    const ParameterSet lin = init_params(linear, 0).with_values({Tensor::matrix(2, 2, {1, 0, 0, 1}), Tensor::zeros({2})});
    CHECK(forward(lin, Tensor::matrix(1, 2, {2, 3})).value() == Tensor::matrix(1, 2, {2, 3}));
}

TEST_CASE("forward rejects a width mismatch") {
    const ParameterSet p = init_params(small_spec(), 3);
    CHECK_THROWS_AS(forward(p, Tensor::zeros({2, 3})), std::invalid_argument);
    CHECK_THROWS_AS(forward(p, Tensor::zeros({2})), std::invalid_argument);
}

TEST_CASE("cross entropy values") {
    const std::size_t zero[] = {0};
    const std::size_t two[] = {2};
    CHECK(cross_entropy(Node::constant(Tensor::zeros({1, 5})), zero).value().item() ==
          doctest::Approx(std::log(5.0)).epsilon(1e-14));
    CHECK(cross_entropy(Node::constant(Tensor::matrix(1, 2, {1e6, 0})), zero).value().item() ==
          doctest::Approx(0.0));
    const double expected = -std::log(std::exp(3.0) / (std::exp(1.0) + std::exp(2.0) + std::exp(3.0)));
    const double got = cross_entropy(Node::constant(Tensor::matrix(1, 3, {1, 2, 3})), two).value().item();
    CHECK(got == doctest::Approx(expected).epsilon(1e-14));
    CHECK(std::fabs(got - 0.40761) < 1e-5);
    const std::size_t bad[] = {3};
    CHECK_THROWS_AS(cross_entropy(Node::constant(Tensor::zeros({1, 3})), bad), std::invalid_argument);
}

TEST_CASE("cross entropy is never negative and softmax rows are distributions") {
    std::mt19937_64 rng(4);
    std::uniform_real_distribution<double> u(-30.0, 30.0);
    for (int trial = 0; trial < 200; ++trial) {
        Tensor logits = Tensor::zeros({4, 6});
        for (auto& v : logits.data()) v = u(rng);
        std::vector<std::size_t> labels(4);
        for (auto& l : labels) l = rng() % 6;
        CHECK(cross_entropy(Node::constant(logits), labels).value().item() >= 0.0);
        const Tensor p = softmax(Node::constant(logits)).value();
        for (std::size_t r = 0; r < 4; ++r) {
            double total = 0.0;
            for (std::size_t c = 0; c < 6; ++c) {
                CHECK(p.at(r, c) >= 0.0);
                CHECK(p.at(r, c) <= 1.0);
                total += p.at(r, c);
            }
            CHECK(std::fabs(total - 1.0) <= 1e-9);
        }
    }
}

TEST_CASE("cross entropy gradient matches central differences") {
    const ParameterSet p = init_params(small_spec(), 12);
    const Tensor x = Tensor::matrix(3, 2, {0.5, -1, 2, 0.1, -0.3, 0.7});
    const std::vector<std::size_t> y = {0, 2, 1};
    const GradientMap analytic = backward(cross_entropy(forward(p, x), y));
    const GradientMap numeric = finite_difference_gradient(
        [&](const ParameterSet& q) { return cross_entropy(forward(q, x), y).value().item(); }, p, 1e-5);
    CHECK(relative_error(p, analytic, numeric) <= 1e-5);
}

TEST_CASE("sgd step arithmetic") {
    const ParameterSet p = vector_params({1, 2});
    const ParameterSet q = sgd_step(p, gradient_for(p, {1, 1}), 0.5);
    CHECK(q[0].node.value() == Tensor::vector({0.5, 1.5}));
    CHECK(p[0].node.value() == Tensor::vector({1, 2}));
    CHECK(q[0].name == "theta");

    CHECK(sgd_step(p, gradient_for(p, {0, 0}), 0.5).same_values(p));
    CHECK(sgd_step(p, GradientMap{}, 0.5).same_values(p));
    CHECK_THROWS_AS(sgd_step(p, GradientMap{}, 0.0), std::invalid_argument);
}

TEST_CASE("two chained steps on a quadratic") {
    ParameterSet p = vector_params({1});
    for (int k = 0; k < 2; ++k) {
        const Node loss = sum(square(p[0].node));
        p = sgd_step(p, backward(loss), 0.4);
    }
    CHECK(p[0].node.value()[0] == doctest::Approx(0.04).epsilon(1e-14));
}

TEST_CASE("sgd step is affine in the gradient") {
    std::mt19937_64 rng(9);
    std::uniform_real_distribution<double> u(-3, 3);
    for (int trial = 0; trial < 50; ++trial) {
        std::vector<double> t(5), g1(5), g2(5), g12(5);
        for (std::size_t i = 0; i < 5; ++i) {
            t[i] = u(rng);
            g1[i] = u(rng);
            g2[i] = u(rng);
            g12[i] = g1[i] + g2[i];
        }
        const ParameterSet p = vector_params(t);
        const ParameterSet once = sgd_step(p, gradient_for(p, g12), 0.3);
        const ParameterSet first = sgd_step(p, gradient_for(p, g1), 0.3);
        const ParameterSet twice = sgd_step(first, gradient_for(first, g2), 0.3);
        for (std::size_t i = 0; i < 5; ++i) {
            CHECK(std::fabs(once[0].node.value()[i] - twice[0].node.value()[i]) <= 1e-12);
        }
    }
}

TEST_CASE("recorded steps keep the gradient path to the original parameters") {
    const ParameterSet p = vector_params({3});
    const Node wrt[] = {p[0].node};
    // θ' = θ − α·2θ, loss = θ'² → d/dθ = 2θ'(1 − 2α).
    const GradientMap inner = grad(sum(square(p[0].node)), wrt, true);
    const ParameterSet q = sgd_step(p, inner, 0.1, StepMode::recorded);
    const GradientMap outer = grad(sum(square(q[0].node)), wrt);
    const double theta1 = 3.0 * (1 - 0.2);
    CHECK(outer.value_or_zero(p[0].node)[0] == doctest::Approx(2 * theta1 * 0.8).epsilon(1e-14));

    const ParameterSet d = sgd_step(p, inner, 0.1, StepMode::detached);
    CHECK(d[0].node.is_leaf());
    CHECK(d[0].node.requires_grad());
    CHECK(d[0].node.value() == q[0].node.value());
}

TEST_CASE("first adam step moves by about the learning rate") {
    const ParameterSet p = vector_params({0.5});
    auto [q, state] = adam_step(p, gradient_for(p, {1}), AdamState::for_params(p), 0.001);
    // m̂ = 1, v̂ = 1 after bias correction, so the step is lr/(1 + ε).
    CHECK(q[0].node.value()[0] == doctest::Approx(0.5 - 0.001 / (1 + 1e-8)).epsilon(1e-15));
    CHECK(state.step == 1);

    const auto [same, s2] = adam_step(p, gradient_for(p, {0}), AdamState::for_params(p), 0.001);
    CHECK(same.same_values(p));
    CHECK_THROWS_AS(adam_step(p, GradientMap{}, AdamState::for_params(p), 0.0), std::invalid_argument);
}

TEST_CASE("adam trajectories are reproducible") {
    const auto run = [] {
        ParameterSet p = init_params(small_spec(), 21);
        AdamState s = AdamState::for_params(p);
        const Tensor x = Tensor::matrix(2, 2, {1, 2, -1, 0.5});
        const std::vector<std::size_t> y = {1, 2};
        for (int k = 0; k < 10; ++k) {
            auto [next, state] = adam_step(p, backward(cross_entropy(forward(p, x), y)), s, 0.01);
            p = std::move(next);
            s = std::move(state);
        }
        return p;
    };
    CHECK(run().same_values(run()));
}

TEST_CASE("one hot rejects out-of-range labels") {
    const std::size_t labels[] = {0, 2};
    CHECK(one_hot(labels, 3) == Tensor::matrix(2, 3, {1, 0, 0, 0, 0, 1}));
    const std::size_t bad[] = {3};
    CHECK_THROWS_AS(one_hot(bad, 3), std::invalid_argument);
}

TEST_CASE("parameter sets keep names unique and order fixed") {
    CHECK_THROWS_AS(ParameterSet::from_tensors({{"a", Tensor::scalar(1)}, {"a", Tensor::scalar(2)}}),
                    std::invalid_argument);
    const ParameterSet p = init_params(small_spec(), 2);
    const ParameterSet d = p.detached();
    for (std::size_t i = 0; i < p.size(); ++i) {
        CHECK(d[i].name == p[i].name);
        CHECK(d[i].node.id() != p[i].node.id());
    }
    CHECK(d.same_values(p));
    CHECK(p.parameter_count() == 2 * 4 + 4 + 4 * 3 + 3);
}
