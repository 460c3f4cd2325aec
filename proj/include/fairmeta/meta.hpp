#pragma once

// Constrained meta-learners. Fair-MAML adapts a shared initialization on each
// task's support set by gradient descent on
//
//     L_j(φ, λ) = CE(support; φ) + penalty(|DBC(support; φ)| − c)
//
// and updates the initialization with the gradient of the summed query
// cross-entropies taken through the adaptation steps. Fair-ProtoNet and the
// simplified Fair-Matching learner have no inner loop; their support-set DBC
// penalty is attached directly to the episode loss.

#include "fairmeta/episodes.hpp"
#include "fairmeta/fairness.hpp"
#include "fairmeta/nn.hpp"

#include <cstdint>
#include <functional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace fairmeta {

enum class LearnerKind { fair_maml, fair_protonet, fair_matching };
enum class OuterOptimizer { adam, sgd };

const char* learner_name(LearnerKind kind);

struct MetaConfig {
    double inner_lr = 0.4;
    double outer_lr = 1e-3;
    std::size_t inner_steps = 1;
    std::size_t meta_batch = 4;
    std::size_t iterations = 1000;
    /// Detach the adapted parameters from φ (first-order MAML).
    bool first_order = false;
    std::size_t eval_inner_steps = 3;
    OuterOptimizer outer_optimizer = OuterOptimizer::adam;
    /// Add λ·penalty(g on the query set) to the meta objective.
    bool meta_fairness = false;
    /// Single-threaded episode processing.
    bool deterministic = true;
    /// Worker threads when not deterministic; 0 picks the hardware count.
    std::size_t threads = 0;
    /// Multiplier on cosine similarities before the matching softmax.
    double matching_scale = 1.0;

    void validate() const;
};

struct EvalResult {
    double accuracy = 0.0;
    double query_loss = 0.0;
    FairnessReport fairness;         // query set
    FairnessReport support_fairness; // support set
};

class NonFiniteLoss : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// Fair-MAML

/// Support cross-entropy plus the fairness penalty (omitted when fairness is
/// disabled).
Node lagrangian_loss(const ParameterSet& params, const LabeledSet& support, const FairnessConfig& cfg);

enum class AdaptMode {
    /// Every inner step stays on the graph; φ_j is differentiable in φ.
    second_order,
    /// φ_j is a fresh set of leaves, detached from φ.
    first_order,
};

/// `steps` plain gradient-descent steps on lagrangian_loss starting from φ.
ParameterSet inner_adapt(const ParameterSet& phi, const LabeledSet& support, double inner_lr, std::size_t steps,
                         const FairnessConfig& fair, AdaptMode mode);

/// Training-time adaptation: meta.inner_steps steps, second order unless
/// meta.first_order is set.
ParameterSet inner_adapt(const ParameterSet& phi, const LabeledSet& support, const MetaConfig& meta,
                         const FairnessConfig& fair);

/// Sum over tasks of the per-task objective gradients, accumulated in episode
/// order, plus per-episode measurements.
struct BatchGradient {
    GradientMap gradient;
    std::vector<EvalResult> results;
    double objective = 0.0;
};

BatchGradient batch_gradient(LearnerKind learner, const ParameterSet& phi, std::span<const Episode> episodes,
                             const MetaConfig& meta, const FairnessConfig& fair);

struct MetaStepResult {
    ParameterSet params;
    AdamState adam;
    std::vector<EvalResult> results;
    GradientMap gradient;
    double objective = 0.0;
};

/// Applies the configured outer optimizer to a gradient keyed by φ's nodes.
MetaStepResult apply_outer_update(const ParameterSet& phi, BatchGradient batch, const MetaConfig& meta,
                                  const AdamState& adam);

/// One Fair-MAML outer iteration over a batch of tasks.
MetaStepResult meta_step(const ParameterSet& phi, std::span<const Episode> episodes, const MetaConfig& meta,
                         const FairnessConfig& fair, const AdamState& adam);

// ---------------------------------------------------------------------------
// Metric-based baselines

/// Per-class mean of the rows of `embeddings` ([n, e]); result [ways, e].
Node class_prototypes(const Node& embeddings, std::span<const std::size_t> labels, std::size_t ways);

/// Pairwise squared Euclidean distances between rows, [a_rows, b_rows].
Node squared_distances(const Node& a, const Node& b);

/// Class probabilities [q, ways] from cosine attention over support rows.
Node matching_probabilities(const Node& query_embeddings, const Node& support_embeddings,
                            std::span<const std::size_t> support_labels, std::size_t ways, double similarity_scale);

struct EpisodeHeadOutput {
    /// Query cross-entropy plus the support-set penalty.
    Node loss;
    Node query_loss;
    Node query_probabilities;
    Node support_probabilities;
};

EpisodeHeadOutput protonet_head(const ParameterSet& embedding, const Episode& episode, const FairnessConfig& fair);
EpisodeHeadOutput matching_head(const ParameterSet& embedding, const Episode& episode, const FairnessConfig& fair,
                                double similarity_scale = 1.0);

Node protonet_episode_loss(const ParameterSet& embedding, const Episode& episode, const FairnessConfig& fair);
Node matching_episode_loss(const ParameterSet& embedding, const Episode& episode, const FairnessConfig& fair,
                           double similarity_scale = 1.0);

// ---------------------------------------------------------------------------
// Evaluation and training

/// Scores one episode. Fair-MAML first adapts for meta.eval_inner_steps steps.
EvalResult evaluate_episode(LearnerKind learner, const ParameterSet& phi, const Episode& episode,
                            const MetaConfig& meta, const FairnessConfig& fair);

struct AggregateEval {
    std::size_t episodes = 0;
    double accuracy_mean = 0.0;
    double accuracy_std = 0.0;
    double query_loss_mean = 0.0;
    double dbc_mean = 0.0;
    double dbc_abs_mean = 0.0;
    double dbc_abs_std = 0.0;
    /// Mean over episodes where it is defined; 1 when none are.
    double disparate_impact = 1.0;
    double constraint_violation_rate = 0.0;
    double support_dbc_abs_mean = 0.0;
    double support_violation_rate = 0.0;
};

AggregateEval aggregate(std::span<const EvalResult> results);

AggregateEval evaluate(LearnerKind learner, const ParameterSet& phi, std::span<const Episode> episodes,
                       const MetaConfig& meta, const FairnessConfig& fair);

enum class Split { train, val, test };
const char* split_name(Split split);

struct MetricsRecord {
    std::size_t iteration = 0;
    Split split = Split::train;
    double loss = 0.0;
    double accuracy = 0.0;
    double dbc_mean = 0.0;
    double dbc_abs_mean = 0.0;
    double disparate_impact = 1.0;
    double constraint_violation_rate = 0.0;
    double wall_time_ms = 0.0;
    double support_dbc_abs_mean = 0.0;
    double support_violation_rate = 0.0;

    friend bool operator==(const MetricsRecord&, const MetricsRecord&) = default;
};

MetricsRecord make_record(std::size_t iteration, Split split, const AggregateEval& eval, double wall_time_ms);

/// Model for a learner: a classifier with `ways` outputs for Fair-MAML, an
/// embedding of width `embedding_dim` for the metric learners.
MlpSpec model_spec(LearnerKind learner, std::size_t input_dim, const std::vector<std::size_t>& hidden,
                   std::size_t ways, std::size_t embedding_dim);

struct TrainHooks {
    /// Called after every outer iteration with the updated parameters.
    std::function<void(std::size_t iteration, const ParameterSet& params, std::vector<MetricsRecord>& history)>
        after_iteration;
};

struct TrainResult {
    ParameterSet params;
    std::vector<MetricsRecord> history;
};

/// meta.iterations outer iterations of: sample meta.meta_batch episodes,
/// update, record a train-split MetricsRecord.
TrainResult train(LearnerKind learner, const EpisodeSampler& source, const EpisodeSpec& spec, const MlpSpec& model,
                  const MetaConfig& meta, const FairnessConfig& fair, std::uint64_t seed,
                  const TrainHooks& hooks = {});

/// Same, starting from given parameters.
TrainResult train_from(LearnerKind learner, ParameterSet init, const EpisodeSampler& source, const EpisodeSpec& spec,
                       const MetaConfig& meta, const FairnessConfig& fair, std::uint64_t seed,
                       const TrainHooks& hooks = {});

} // namespace fairmeta
