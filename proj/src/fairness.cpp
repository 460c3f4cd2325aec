#include "fairmeta/fairness.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <stdexcept>
#include <string>

namespace fairmeta {

ProtectedVector::ProtectedVector(std::vector<int> values) : values_(std::move(values)) {
    for (std::size_t i = 0; i < values_.size(); ++i) {
        if (values_[i] != 0 && values_[i] != 1) {
            throw std::invalid_argument("protected attribute at index " + std::to_string(i) + " is " +
                                        std::to_string(values_[i]) + ", expected 0 or 1");
        }
    }
}

double ProtectedVector::mean() const {
    if (values_.empty()) throw std::invalid_argument("protected vector: empty set has no mean");
    double total = 0.0;
    for (int v : values_) total += v;
    return total / static_cast<double>(values_.size());
}

ProtectedVector ProtectedVector::relabeled() const {
    std::vector<int> flipped(values_.size());
    std::transform(values_.begin(), values_.end(), flipped.begin(), [](int v) { return 1 - v; });
    return ProtectedVector(std::move(flipped));
}

void FairnessConfig::validate() const {
    if (!(lambda >= 0.0) || !std::isfinite(lambda)) throw std::invalid_argument("lambda must be a finite value >= 0");
    if (!(relaxation >= 0.0) || !std::isfinite(relaxation)) {
        throw std::invalid_argument("relaxation must be a finite value >= 0");
    }
}

namespace {

void check_probability_rows(const Tensor& p) {
    if (p.rank() != 2 || p.shape()[0] == 0 || p.shape()[1] == 0) {
        throw std::invalid_argument("decision distance: expected a non-empty [batch, classes] matrix");
    }
    const std::size_t rows = p.shape()[0], cols = p.shape()[1];
    for (std::size_t i = 0; i < rows; ++i) {
        double total = 0.0;
        for (std::size_t j = 0; j < cols; ++j) {
            const double v = p.at(i, j);
            if (!(v >= -1e-12 && v <= 1.0 + 1e-12)) {
                throw std::invalid_argument("decision distance: row " + std::to_string(i) +
                                            " has an entry outside [0, 1]");
            }
            total += v;
        }
        if (std::fabs(total - 1.0) > 1e-6) {
            throw std::invalid_argument("decision distance: row " + std::to_string(i) + " sums to " +
                                        std::to_string(total));
        }
    }
}

} // namespace

Node decision_distance(const Node& probabilities, DistanceKind kind) {
    const Tensor& p = probabilities.value();
    check_probability_rows(p);
    const std::size_t rows = p.shape()[0], cols = p.shape()[1];
    if (kind == DistanceKind::max_prob) {
        return reshape(max_over_axis(probabilities, 1), {rows});
    }
    if (cols < 2) throw std::invalid_argument("decision distance: signed margin needs at least two classes");
    // The floor keeps underflowed probabilities finite (log 1e-300 ≈ −690.8).
    const Node log_p = log(add(probabilities, Node::constant(Tensor::scalar(1e-300))));
    const Node top = max_over_axis(log_p, 1);
    // Knock the arg-max out of each row, then take the max again.
    Tensor knock_out = Tensor::zeros({rows, cols});
    for (std::size_t i = 0; i < rows; ++i) {
        std::size_t best = 0;
        for (std::size_t j = 1; j < cols; ++j) {
            if (p.at(i, j) > p.at(i, best)) best = j;
        }
        knock_out.at(i, best) = -std::numeric_limits<double>::max();
    }
    const Node runner_up = max_over_axis(add(log_p, Node::constant(std::move(knock_out))), 1);
    return reshape(sub(top, runner_up), {rows});
}

Node dbc(const ProtectedVector& s, const Node& d) {
    const std::size_t h = s.size();
    if (h == 0) throw std::invalid_argument("dbc: empty set");
    if (d.value().size() != h) {
        throw std::invalid_argument("dbc: " + std::to_string(h) + " protected values but " +
                                    std::to_string(d.value().size()) + " distances");
    }
    const double s_bar = s.mean();
    std::vector<double> centered(h);
    for (std::size_t i = 0; i < h; ++i) centered[i] = static_cast<double>(s[i]) - s_bar;
    const Node flat = reshape(d, {h});
    return scale(sum(mul(Node::constant(Tensor::vector(std::move(centered))), flat)), 1.0 / static_cast<double>(h));
}

Node constraint_value(const ProtectedVector& s, const Node& d, const FairnessConfig& cfg) {
    return sub(abs(dbc(s, d)), Node::constant(Tensor::scalar(cfg.relaxation)));
}

Node penalty(const Node& g, const FairnessConfig& cfg) {
    if (!(cfg.lambda >= 0.0)) throw std::invalid_argument("penalty: lambda must be >= 0");
    return cfg.penalty == PenaltyShape::hinge ? scale(relu(g), cfg.lambda) : scale(g, cfg.lambda);
}

DisparateImpact disparate_impact_from_rates(double rate_protected, double rate_unprotected) {
    DisparateImpact out;
    out.rate_protected = rate_protected;
    out.rate_unprotected = rate_unprotected;
    if (rate_protected == 0.0 || rate_unprotected == 0.0) {
        out.value = 0.0;
        out.zero_rate = true;
    } else {
        out.value = std::min(rate_protected / rate_unprotected, rate_unprotected / rate_protected);
    }
    out.eighty_percent_pass = out.value >= 0.8;
    return out;
}

DisparateImpact disparate_impact(const ProtectedVector& s, std::span<const bool> positive) {
    if (positive.size() != s.size()) throw std::invalid_argument("disparate impact: length mismatch");
    std::size_t n1 = 0, n0 = 0, pos1 = 0, pos0 = 0;
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (s[i] == 1) {
            ++n1;
            pos1 += positive[i] ? 1 : 0;
        } else {
            ++n0;
            pos0 += positive[i] ? 1 : 0;
        }
    }
    if (n1 == 0 || n0 == 0) throw std::invalid_argument("disparate impact: both groups must be non-empty");
    if (pos1 + pos0 == 0) throw std::invalid_argument("disparate impact: no positive decisions");
    return disparate_impact_from_rates(static_cast<double>(pos1) / static_cast<double>(n1),
                                       static_cast<double>(pos0) / static_cast<double>(n0));
}

FairnessReport fairness_report(const ProtectedVector& s, const Tensor& probabilities, const FairnessConfig& cfg) {
    NoGradGuard no_grad;
    const Node d = decision_distance(Node::constant(probabilities), cfg.distance);
    FairnessReport r;
    r.dbc = dbc(s, d).value().item();
    r.abs_dbc = std::fabs(r.dbc);
    r.constraint = r.abs_dbc - cfg.relaxation;

    const std::size_t rows = probabilities.shape()[0], cols = probabilities.shape()[1];
    const auto flags = std::make_unique<bool[]>(rows);
    bool any_positive = false, any_protected = false, any_unprotected = false;
    for (std::size_t i = 0; i < rows; ++i) {
        double best = probabilities.at(i, 0);
        for (std::size_t j = 1; j < cols; ++j) best = std::max(best, probabilities.at(i, j));
        flags[i] = best >= positive_probability_threshold;
        any_positive = any_positive || flags[i];
        (s[i] == 1 ? any_protected : any_unprotected) = true;
    }
    if (any_positive && any_protected && any_unprotected) {
        const DisparateImpact di = disparate_impact(s, std::span<const bool>(flags.get(), rows));
        r.disparate_impact = di.value;
        r.eighty_percent_pass = di.eighty_percent_pass;
        r.rate_protected = di.rate_protected;
        r.rate_unprotected = di.rate_unprotected;
        r.disparate_impact_defined = true;
    }
    return r;
}

} // namespace fairmeta
