#pragma once

#include "fairmeta/parameter_set.hpp"

#include <cstdint>
#include <span>
#include <utility>
#include <vector>

namespace fairmeta {

/// Fully connected ReLU network: input_dim -> hidden_dims... -> num_classes.
/// The last layer is linear. num_classes doubles as the embedding width when
/// the network is used as an embedding.
struct MlpSpec {
    std::size_t input_dim = 2;
    std::vector<std::size_t> hidden_dims{64, 64};
    std::size_t num_classes = 2;

    void validate() const;
};

/// Weights uniform in ±sqrt(6 / (fan_in + fan_out)), biases zero.
/// Parameters are named dense<i>.weight ([in, out]) and dense<i>.bias ([out]).
ParameterSet init_params(const MlpSpec& spec, std::uint64_t seed);

/// Logits of shape [batch, num_classes].
Node forward(const ParameterSet& params, const Node& x);
Node forward(const ParameterSet& params, const Tensor& x);

/// One-hot matrix [labels.size(), num_classes].
Tensor one_hot(std::span<const std::size_t> labels, std::size_t num_classes);

/// Mean over the batch of -log_softmax(logits)[label].
Node cross_entropy(const Node& logits, std::span<const std::size_t> labels);

/// Mean over the batch of -log(probabilities[label]).
Node nll_from_probabilities(const Node& probabilities, std::span<const std::size_t> labels);

enum class StepMode {
    /// Result is a set of fresh leaves; nothing is recorded.
    detached,
    /// The update is recorded on the graph so gradients flow through it.
    recorded,
};

/// θ − lr·g. Missing gradient entries count as zero.
ParameterSet sgd_step(const ParameterSet& params, const GradientMap& grads, double lr,
                      StepMode mode = StepMode::detached);

struct AdamState {
    std::vector<Tensor> first_moment;
    std::vector<Tensor> second_moment;
    std::uint64_t step = 0;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;

    static AdamState for_params(const ParameterSet& params);
};

/// Bias-corrected Adam update. Returns fresh leaves and the advanced state.
std::pair<ParameterSet, AdamState> adam_step(const ParameterSet& params, const GradientMap& grads,
                                             const AdamState& state, double lr);

} // namespace fairmeta
