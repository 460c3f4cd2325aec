#include "fairmeta/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace fairmeta {

GradientMap finite_difference_gradient(const ScalarObjective& f, const ParameterSet& params, double step) {
    if (!(step > 0.0)) throw std::invalid_argument("finite difference: step must be positive");
    std::vector<Tensor> base = params.values();
    GradientMap out;
    for (std::size_t p = 0; p < base.size(); ++p) {
        Tensor estimate = Tensor::zeros(base[p].shape());
        for (std::size_t k = 0; k < base[p].size(); ++k) {
            const double original = base[p][k];
            base[p][k] = original + step;
            const double up = f(params.with_values(base));
            base[p][k] = original - step;
            const double down = f(params.with_values(base));
            base[p][k] = original;
            estimate[k] = (up - down) / (2.0 * step);
        }
        out.insert(params[p].node, Node::constant(std::move(estimate)));
    }
    return out;
}

double relative_error(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size()) throw std::invalid_argument("relative_error: size mismatch");
    double diff = 0.0, na = 0.0, nb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        diff += (a[i] - b[i]) * (a[i] - b[i]);
        na += a[i] * a[i];
        nb += b[i] * b[i];
    }
    const double denom = std::sqrt(std::max(na, nb));
    return denom == 0.0 ? 0.0 : std::sqrt(diff) / denom;
}

double relative_error(const ParameterSet& params, const GradientMap& a, const GradientMap& b) {
    std::vector<double> fa, fb;
    for (const auto& entry : params) {
        const Tensor ta = a.value_or_zero(entry.node);
        const Tensor tb = b.value_or_zero(entry.node);
        fa.insert(fa.end(), ta.data().begin(), ta.data().end());
        fb.insert(fb.end(), tb.data().begin(), tb.data().end());
    }
    return relative_error(fa, fb);
}

} // namespace fairmeta
