#pragma once

// Central-difference gradients, used as an independent oracle for backward().

#include "fairmeta/parameter_set.hpp"

#include <functional>

namespace fairmeta {

using ScalarObjective = std::function<double(const ParameterSet&)>;

/// (f(θ + step·e_k) − f(θ − step·e_k)) / (2·step) for every coordinate k,
/// keyed by the nodes of `params`.
GradientMap finite_difference_gradient(const ScalarObjective& f, const ParameterSet& params, double step);

/// ‖a − b‖₂ / max(‖a‖₂, ‖b‖₂); zero when both are zero.
double relative_error(std::span<const double> a, std::span<const double> b);

/// Relative error over all parameters of two gradient maps, flattened in
/// parameter order.
double relative_error(const ParameterSet& params, const GradientMap& a, const GradientMap& b);

} // namespace fairmeta
