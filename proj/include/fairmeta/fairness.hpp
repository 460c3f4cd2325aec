#pragma once

// Decision-boundary covariance (DBC), the per-task fairness constraint built
// on it, the penalty that enters the per-task Lagrangian, and the 80%-rule
// disparate impact diagnostic.

#include "fairmeta/autodiff.hpp"

#include <cstdint>
#include <span>
#include <vector>

namespace fairmeta {

/// Binary protected attribute per example of one evaluation set.
class ProtectedVector {
public:
    ProtectedVector() = default;
    explicit ProtectedVector(std::vector<int> values);

    std::size_t size() const noexcept { return values_.size(); }
    int operator[](std::size_t i) const { return values_[i]; }
    std::span<const int> values() const noexcept { return values_; }

    /// Group mean s̄ over this set.
    double mean() const;

    /// 1 − s for every entry.
    ProtectedVector relabeled() const;

private:
    std::vector<int> values_;
};

enum class PenaltyShape { hinge, raw };
enum class DistanceKind { max_prob, signed_margin };

struct FairnessConfig {
    /// When false no penalty node is built at all (plain, unconstrained learner).
    bool enabled = true;
    double lambda = 1.0;
    double relaxation = 0.05;
    PenaltyShape penalty = PenaltyShape::hinge;
    DistanceKind distance = DistanceKind::max_prob;

    void validate() const;
};

/// Per-row proxy for the distance to the decision boundary, shape [batch].
/// max_prob: the largest class probability. signed_margin: largest minus
/// second-largest log-probability. Rows must be probability vectors.
Node decision_distance(const Node& probabilities, DistanceKind kind);

/// (1/h) Σ (s_i − s̄) d_i with s̄ the mean of s over the same set.
Node dbc(const ProtectedVector& s, const Node& d);

/// |dbc(s, d)| − c. Feasible when ≤ 0.
Node constraint_value(const ProtectedVector& s, const Node& d, const FairnessConfig& cfg);

/// hinge: λ·max(0, g). raw: λ·g.
Node penalty(const Node& g, const FairnessConfig& cfg);

struct DisparateImpact {
    double rate_protected = 0.0;   // P(positive | s = 1)
    double rate_unprotected = 0.0; // P(positive | s = 0)
    double value = 0.0;            // min of the two ratios, in [0, 1]
    bool eighty_percent_pass = false;
    /// A denominator rate was zero; value is reported as 0.
    bool zero_rate = false;
};

/// Disparate impact from the two group positive rates.
DisparateImpact disparate_impact_from_rates(double rate_protected, double rate_unprotected);

/// Disparate impact from per-example positive decisions. Both groups must be
/// non-empty and at least one decision must be positive.
DisparateImpact disparate_impact(const ProtectedVector& s, std::span<const bool> positive);

/// Threshold on the max class probability that makes a decision positive
/// for the multi-class disparate impact diagnostic.
inline constexpr double positive_probability_threshold = 0.5;

struct FairnessReport {
    double dbc = 0.0;
    double abs_dbc = 0.0;
    double constraint = 0.0;
    double disparate_impact = 1.0;
    bool eighty_percent_pass = true;
    double rate_protected = 0.0;
    double rate_unprotected = 0.0;
    /// False when a group is empty or nothing was predicted positive; the
    /// disparate impact fields then hold the neutral values above.
    bool disparate_impact_defined = false;
};

/// Value-only fairness summary of one evaluation set.
FairnessReport fairness_report(const ProtectedVector& s, const Tensor& probabilities, const FairnessConfig& cfg);

} // namespace fairmeta
