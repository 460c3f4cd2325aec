#include "fairmeta/nn.hpp"

#include <cmath>
#include <random>
#include <stdexcept>
#include <string>

namespace fairmeta {

void MlpSpec::validate() const {
    if (input_dim == 0) throw std::invalid_argument("mlp: input_dim must be positive");
    for (std::size_t h : hidden_dims) {
        if (h == 0) throw std::invalid_argument("mlp: hidden widths must be positive");
    }
    if (num_classes < 2) throw std::invalid_argument("mlp: num_classes must be at least 2");
}

ParameterSet init_params(const MlpSpec& spec, std::uint64_t seed) {
    spec.validate();
    std::mt19937_64 rng(seed);
    std::vector<std::size_t> widths{spec.input_dim};
    widths.insert(widths.end(), spec.hidden_dims.begin(), spec.hidden_dims.end());
    widths.push_back(spec.num_classes);

    std::vector<std::pair<std::string, Tensor>> tensors;
    for (std::size_t layer = 0; layer + 1 < widths.size(); ++layer) {
        const std::size_t fan_in = widths[layer], fan_out = widths[layer + 1];
        const double bound = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
        std::uniform_real_distribution<double> dist(-bound, bound);
        std::vector<double> w(fan_in * fan_out);
        for (double& v : w) v = dist(rng);
        const std::string prefix = "dense" + std::to_string(layer);
        tensors.emplace_back(prefix + ".weight", Tensor::matrix(fan_in, fan_out, std::move(w)));
        tensors.emplace_back(prefix + ".bias", Tensor::zeros({fan_out}));
    }
    return ParameterSet::from_tensors(std::move(tensors));
}

Node forward(const ParameterSet& params, const Node& x) {
    if (params.empty() || params.size() % 2 != 0) {
        throw std::invalid_argument("forward: parameter set must hold weight/bias pairs");
    }
    if (x.value().rank() != 2) throw std::invalid_argument("forward: input must be a [batch, features] matrix");
    const std::size_t expected = params[0].node.shape()[0];
    if (x.shape()[1] != expected) {
        throw std::invalid_argument("forward: input has " + std::to_string(x.shape()[1]) + " columns, model expects " +
                                    std::to_string(expected));
    }
    Node h = x;
    const std::size_t layers = params.size() / 2;
    for (std::size_t l = 0; l < layers; ++l) {
        h = add(matmul(h, params[2 * l].node), params[2 * l + 1].node);
        if (l + 1 < layers) h = relu(h);
    }
    return h;
}

Node forward(const ParameterSet& params, const Tensor& x) { return forward(params, Node::constant(x)); }

Tensor one_hot(std::span<const std::size_t> labels, std::size_t num_classes) {
    Tensor out = Tensor::zeros({labels.size(), num_classes});
    for (std::size_t i = 0; i < labels.size(); ++i) {
        if (labels[i] >= num_classes) {
            throw std::invalid_argument("label " + std::to_string(labels[i]) + " out of range [0, " +
                                        std::to_string(num_classes) + ")");
        }
        out[i * num_classes + labels[i]] = 1.0;
    }
    return out;
}

namespace {

Node mean_picked(const Node& log_probs, std::span<const std::size_t> labels) {
    if (log_probs.value().rank() != 2 || log_probs.shape()[0] != labels.size() || labels.empty()) {
        throw std::invalid_argument("cross entropy: expected [batch, classes] with one label per row");
    }
    const Node mask = Node::constant(one_hot(labels, log_probs.shape()[1]));
    return scale(sum(mul(log_probs, mask)), -1.0 / static_cast<double>(labels.size()));
}

} // namespace

Node cross_entropy(const Node& logits, std::span<const std::size_t> labels) {
    if (logits.value().rank() != 2) throw std::invalid_argument("cross entropy: logits must be rank 2");
    return mean_picked(log_softmax(logits), labels);
}

Node nll_from_probabilities(const Node& probabilities, std::span<const std::size_t> labels) {
    if (probabilities.value().rank() != 2) throw std::invalid_argument("nll: probabilities must be rank 2");
    // Validate labels before taking logs of the whole matrix.
    (void)one_hot(labels, probabilities.shape()[1]);
    return mean_picked(log(probabilities), labels);
}

ParameterSet sgd_step(const ParameterSet& params, const GradientMap& grads, double lr, StepMode mode) {
    if (!(lr > 0.0)) throw std::invalid_argument("sgd: learning rate must be positive");
    if (mode == StepMode::recorded) {
        std::vector<ParameterSet::Entry> out;
        out.reserve(params.size());
        for (const auto& e : params) {
            const Node g = grads.find(e.node);
            out.push_back({e.name, g ? sub(e.node, scale(g, lr)) : e.node});
        }
        return ParameterSet(std::move(out));
    }
    std::vector<Tensor> values;
    values.reserve(params.size());
    for (const auto& e : params) {
        Tensor v = e.node.value();
        const Node g = grads.find(e.node);
        if (g) {
            const Tensor& gv = g.value();
            for (std::size_t i = 0; i < v.size(); ++i) v[i] -= lr * gv[i];
        }
        values.push_back(std::move(v));
    }
    return params.with_values(values);
}

AdamState AdamState::for_params(const ParameterSet& params) {
    AdamState s;
    for (const auto& e : params) {
        s.first_moment.push_back(Tensor::zeros(e.node.shape()));
        s.second_moment.push_back(Tensor::zeros(e.node.shape()));
    }
    return s;
}

std::pair<ParameterSet, AdamState> adam_step(const ParameterSet& params, const GradientMap& grads,
                                             const AdamState& state, double lr) {
    if (!(lr > 0.0)) throw std::invalid_argument("adam: learning rate must be positive");
    AdamState next = state.first_moment.empty() ? AdamState::for_params(params) : state;
    if (next.first_moment.size() != params.size()) {
        throw std::invalid_argument("adam: state does not match the parameter set");
    }
    next.step += 1;
    const double t = static_cast<double>(next.step);
    const double correction1 = 1.0 - std::pow(next.beta1, t);
    const double correction2 = 1.0 - std::pow(next.beta2, t);

    std::vector<Tensor> values;
    values.reserve(params.size());
    for (std::size_t p = 0; p < params.size(); ++p) {
        const Tensor g = grads.value_or_zero(params[p].node);
        Tensor v = params[p].node.value();
        Tensor& m = next.first_moment[p];
        Tensor& s = next.second_moment[p];
        for (std::size_t i = 0; i < v.size(); ++i) {
            m[i] = next.beta1 * m[i] + (1.0 - next.beta1) * g[i];
            s[i] = next.beta2 * s[i] + (1.0 - next.beta2) * g[i] * g[i];
            const double m_hat = m[i] / correction1;
            const double s_hat = s[i] / correction2;
            v[i] -= lr * m_hat / (std::sqrt(s_hat) + next.epsilon);
        }
        values.push_back(std::move(v));
    }
    return {params.with_values(values), std::move(next)};
}

} // namespace fairmeta
