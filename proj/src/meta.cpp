#include "fairmeta/meta.hpp"

#include "fairmeta/seeding.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <exception>
#include <stdexcept>
#include <string>
#include <thread>

namespace fairmeta {

const char* learner_name(LearnerKind kind) {
    switch (kind) {
    case LearnerKind::fair_maml: return "fair-maml";
    case LearnerKind::fair_protonet: return "fair-protonet";
    case LearnerKind::fair_matching: return "fair-matching";
    }
    return "unknown";
}

const char* split_name(Split split) {
    switch (split) {
    case Split::train: return "train";
    case Split::val: return "val";
    case Split::test: return "test";
    }
    return "unknown";
}

void MetaConfig::validate() const {
    if (!(inner_lr > 0.0) || !std::isfinite(inner_lr)) throw std::invalid_argument("inner_lr must be > 0");
    if (!(outer_lr > 0.0) || !std::isfinite(outer_lr)) throw std::invalid_argument("outer_lr must be > 0");
    if (meta_batch == 0) throw std::invalid_argument("meta_batch must be >= 1");
    if (iterations == 0) throw std::invalid_argument("iterations must be >= 1");
    if (!(matching_scale > 0.0) || !std::isfinite(matching_scale)) {
        throw std::invalid_argument("matching_scale must be > 0");
    }
}

namespace {

bool fairness_active(const FairnessConfig& fair) { return fair.enabled; }

Node support_penalty(const Node& probabilities, const ProtectedVector& s, const FairnessConfig& fair) {
    return penalty(constraint_value(s, decision_distance(probabilities, fair.distance), fair), fair);
}

double accuracy_of(const Tensor& scores, std::span<const std::size_t> labels) {
    const std::size_t rows = scores.shape()[0], cols = scores.shape()[1];
    std::size_t correct = 0;
    for (std::size_t i = 0; i < rows; ++i) {
        std::size_t best = 0;
        for (std::size_t j = 1; j < cols; ++j) {
            if (scores.at(i, j) > scores.at(i, best)) best = j;
        }
        correct += best == labels[i] ? 1 : 0;
    }
    return rows == 0 ? 0.0 : static_cast<double>(correct) / static_cast<double>(rows);
}

void require_finite(const Node& loss, const char* what) {
    const double v = loss.value().item();
    if (!std::isfinite(v)) throw NonFiniteLoss(std::string(what) + " is not finite (" + std::to_string(v) + ")");
}

Tensor softmax_values(const Tensor& logits) {
    NoGradGuard no_grad;
    return softmax(Node::constant(logits)).value();
}

struct EpisodeOutcome {
    std::vector<Tensor> gradient;
    EvalResult result;
    double objective = 0.0;
};

EpisodeOutcome maml_episode(const ParameterSet& phi, const Episode& episode, const MetaConfig& meta,
                            const FairnessConfig& fair) {
    const LabeledSet support = episode.support_set();
    const LabeledSet query = episode.query_set();
    const AdaptMode mode = meta.first_order ? AdaptMode::first_order : AdaptMode::second_order;
    const ParameterSet adapted = inner_adapt(phi, support, meta.inner_lr, meta.inner_steps, fair, mode);

    const Node logits = forward(adapted, query.features);
    const Node query_ce = cross_entropy(logits, query.labels);
    Node objective = query_ce;
    if (meta.meta_fairness && fairness_active(fair)) {
        objective = add(objective, support_penalty(softmax(logits), query.s, fair));
    }
    require_finite(objective, "meta objective");

    const std::vector<Node> wrt = meta.first_order ? adapted.nodes() : phi.nodes();
    const GradientMap g = grad(objective, wrt);

    EpisodeOutcome out;
    out.gradient.reserve(wrt.size());
    for (const Node& n : wrt) out.gradient.push_back(g.value_or_zero(n));
    out.objective = objective.value().item();

    const Tensor query_p = softmax_values(logits.value());
    out.result.accuracy = accuracy_of(logits.value(), query.labels);
    out.result.query_loss = query_ce.value().item();
    out.result.fairness = fairness_report(query.s, query_p, fair);
    Tensor support_logits;
    {
        NoGradGuard no_grad;
        support_logits = forward(adapted, support.features).value();
    }
    out.result.support_fairness = fairness_report(support.s, softmax_values(support_logits), fair);
    return out;
}

EvalResult head_result(const EpisodeHeadOutput& head, const Episode& episode, const FairnessConfig& fair) {
    const LabeledSet support = episode.support_set();
    const LabeledSet query = episode.query_set();
    EvalResult r;
    r.accuracy = accuracy_of(head.query_probabilities.value(), query.labels);
    r.query_loss = head.query_loss.value().item();
    r.fairness = fairness_report(query.s, head.query_probabilities.value(), fair);
    r.support_fairness = fairness_report(support.s, head.support_probabilities.value(), fair);
    return r;
}

EpisodeHeadOutput run_head(LearnerKind learner, const ParameterSet& phi, const Episode& episode,
                           const MetaConfig& meta, const FairnessConfig& fair) {
    return learner == LearnerKind::fair_protonet ? protonet_head(phi, episode, fair)
                                                 : matching_head(phi, episode, fair, meta.matching_scale);
}

EpisodeOutcome metric_episode(LearnerKind learner, const ParameterSet& phi, const Episode& episode,
                              const MetaConfig& meta, const FairnessConfig& fair) {
    const EpisodeHeadOutput head = run_head(learner, phi, episode, meta, fair);
    require_finite(head.loss, "episode loss");
    const std::vector<Node> wrt = phi.nodes();
    const GradientMap g = grad(head.loss, wrt);
    EpisodeOutcome out;
    for (const Node& n : wrt) out.gradient.push_back(g.value_or_zero(n));
    out.objective = head.loss.value().item();
    out.result = head_result(head, episode, fair);
    return out;
}

template <class F>
void for_each_index(std::size_t n, const MetaConfig& meta, F&& body) {
    std::size_t workers = 1;
    if (!meta.deterministic) {
        workers = meta.threads == 0 ? std::max(1u, std::thread::hardware_concurrency()) : meta.threads;
        workers = std::min(workers, n);
    }
    if (workers <= 1) {
        for (std::size_t i = 0; i < n; ++i) body(i);
        return;
    }
    std::vector<std::exception_ptr> errors(n);
    {
        std::vector<std::jthread> pool;
        for (std::size_t w = 0; w < workers; ++w) {
            pool.emplace_back([&, w] {
                for (std::size_t i = w; i < n; i += workers) {
                    try {
                        body(i);
                    } catch (...) {
                        errors[i] = std::current_exception();
                    }
                }
            });
        }
    }
    for (const auto& e : errors) {
        if (e) std::rethrow_exception(e);
    }
}

double mean_of(const std::vector<double>& v) {
    if (v.empty()) return 0.0;
    double t = 0.0;
    for (double x : v) t += x;
    return t / static_cast<double>(v.size());
}

double std_of(const std::vector<double>& v) {
    if (v.size() < 2) return 0.0;
    const double m = mean_of(v);
    double t = 0.0;
    for (double x : v) t += (x - m) * (x - m);
    return std::sqrt(t / static_cast<double>(v.size() - 1));
}

} // namespace

Node lagrangian_loss(const ParameterSet& params, const LabeledSet& support, const FairnessConfig& cfg) {
    const Node logits = forward(params, support.features);
    const Node ce = cross_entropy(logits, support.labels);
    if (!fairness_active(cfg)) return ce;
    for (double v : logits.value().data()) {
        if (!std::isfinite(v)) throw NonFiniteLoss("support logits are not finite");
    }
    return add(ce, support_penalty(softmax(logits), support.s, cfg));
}

ParameterSet inner_adapt(const ParameterSet& phi, const LabeledSet& support, double inner_lr, std::size_t steps,
                         const FairnessConfig& fair, AdaptMode mode) {
    if (!(inner_lr > 0.0)) throw std::invalid_argument("inner_adapt: inner_lr must be > 0");
    if (mode == AdaptMode::first_order) {
        ParameterSet current = phi.detached();
        for (std::size_t k = 0; k < steps; ++k) {
            const Node loss = lagrangian_loss(current, support, fair);
            require_finite(loss, "inner loss");
            const std::vector<Node> wrt = current.nodes();
            current = sgd_step(current, grad(loss, wrt), inner_lr, StepMode::detached);
        }
        return current;
    }
    ParameterSet current = phi;
    for (std::size_t k = 0; k < steps; ++k) {
        const Node loss = lagrangian_loss(current, support, fair);
        require_finite(loss, "inner loss");
        const std::vector<Node> wrt = current.nodes();
        current = sgd_step(current, grad(loss, wrt, /*create_graph=*/true), inner_lr, StepMode::recorded);
    }
    return current;
}

ParameterSet inner_adapt(const ParameterSet& phi, const LabeledSet& support, const MetaConfig& meta,
                         const FairnessConfig& fair) {
    return inner_adapt(phi, support, meta.inner_lr, meta.inner_steps, fair,
                       meta.first_order ? AdaptMode::first_order : AdaptMode::second_order);
}

BatchGradient batch_gradient(LearnerKind learner, const ParameterSet& phi, std::span<const Episode> episodes,
                             const MetaConfig& meta, const FairnessConfig& fair) {
    if (episodes.empty()) throw std::invalid_argument("batch_gradient: no episodes");
    std::vector<EpisodeOutcome> outcomes(episodes.size());
    for_each_index(episodes.size(), meta, [&](std::size_t i) {
        outcomes[i] = learner == LearnerKind::fair_maml ? maml_episode(phi, episodes[i], meta, fair)
                                                        : metric_episode(learner, phi, episodes[i], meta, fair);
    });

    // Reduce in episode order so the sum does not depend on scheduling.
    std::vector<Tensor> total = outcomes.front().gradient;
    for (std::size_t i = 1; i < outcomes.size(); ++i) {
        for (std::size_t k = 0; k < total.size(); ++k) {
            auto dst = total[k].data();
            const auto src = outcomes[i].gradient[k].data();
            for (std::size_t e = 0; e < dst.size(); ++e) dst[e] += src[e];
        }
    }
    BatchGradient out;
    for (std::size_t k = 0; k < phi.size(); ++k) {
        out.gradient.insert(phi[k].node, Node::constant(std::move(total[k])));
    }
    for (auto& o : outcomes) {
        out.results.push_back(o.result);
        out.objective += o.objective;
    }
    return out;
}

MetaStepResult apply_outer_update(const ParameterSet& phi, BatchGradient batch, const MetaConfig& meta,
                                  const AdamState& adam) {
    MetaStepResult out;
    if (meta.outer_optimizer == OuterOptimizer::adam) {
        auto [params, state] = adam_step(phi, batch.gradient, adam, meta.outer_lr);
        out.params = std::move(params);
        out.adam = std::move(state);
    } else {
        out.params = sgd_step(phi, batch.gradient, meta.outer_lr, StepMode::detached);
        out.adam = adam;
    }
    out.results = std::move(batch.results);
    out.gradient = std::move(batch.gradient);
    out.objective = batch.objective;
    return out;
}

MetaStepResult meta_step(const ParameterSet& phi, std::span<const Episode> episodes, const MetaConfig& meta,
                         const FairnessConfig& fair, const AdamState& adam) {
    return apply_outer_update(phi, batch_gradient(LearnerKind::fair_maml, phi, episodes, meta, fair), meta, adam);
}

Node class_prototypes(const Node& embeddings, std::span<const std::size_t> labels, std::size_t ways) {
    const Tensor& e = embeddings.value();
    if (e.rank() != 2 || e.shape()[0] != labels.size()) {
        throw std::invalid_argument("class_prototypes: expected one embedding row per label");
    }
    std::vector<std::size_t> counts(ways, 0);
    for (std::size_t label : labels) {
        if (label >= ways) throw std::invalid_argument("class_prototypes: label out of range");
        ++counts[label];
    }
    Tensor weights = Tensor::zeros({ways, labels.size()});
    for (std::size_t i = 0; i < labels.size(); ++i) {
        weights.at(labels[i], i) = 1.0 / static_cast<double>(counts[labels[i]]);
    }
    for (std::size_t c = 0; c < ways; ++c) {
        if (counts[c] == 0) throw std::invalid_argument("class_prototypes: class " + std::to_string(c) + " is empty");
    }
    return matmul(Node::constant(std::move(weights)), embeddings);
}

Node squared_distances(const Node& a, const Node& b) {
    const Node a2 = sum_axis(square(a), 1);            // [n, 1]
    const Node b2 = transpose(sum_axis(square(b), 1)); // [1, m]
    return sub(add(a2, b2), scale(matmul(a, transpose(b)), 2.0));
}

namespace {

Node row_normalize(const Node& x, const char* what) {
    const Node norms = sqrt(sum_axis(square(x), 1));
    for (double v : norms.value().data()) {
        if (!(v > 0.0)) throw std::invalid_argument(std::string(what) + ": zero-length embedding");
    }
    return div(x, norms);
}

} // namespace

Node matching_probabilities(const Node& query_embeddings, const Node& support_embeddings,
                            std::span<const std::size_t> support_labels, std::size_t ways, double similarity_scale) {
    if (support_embeddings.value().rank() != 2 || support_embeddings.value().shape()[0] != support_labels.size()) {
        throw std::invalid_argument("matching_probabilities: expected one support row per label");
    }
    const Node q = row_normalize(query_embeddings, "matching_probabilities");
    const Node s = row_normalize(support_embeddings, "matching_probabilities");
    const Node attention = softmax(scale(matmul(q, transpose(s)), similarity_scale));
    return matmul(attention, Node::constant(one_hot(support_labels, ways)));
}

EpisodeHeadOutput protonet_head(const ParameterSet& embedding, const Episode& episode, const FairnessConfig& fair) {
    const LabeledSet support = episode.support_set();
    const LabeledSet query = episode.query_set();
    const std::size_t ways = episode.ways();
    const Node support_emb = forward(embedding, support.features);
    const Node query_emb = forward(embedding, query.features);
    const Node prototypes = class_prototypes(support_emb, support.labels, ways);

    EpisodeHeadOutput out;
    const Node query_scores = neg(squared_distances(query_emb, prototypes));
    out.query_loss = cross_entropy(query_scores, query.labels);
    out.query_probabilities = softmax(query_scores);
    out.support_probabilities = softmax(neg(squared_distances(support_emb, prototypes)));
    out.loss = fairness_active(fair) ? add(out.query_loss, support_penalty(out.support_probabilities, support.s, fair))
                                     : out.query_loss;
    return out;
}

EpisodeHeadOutput matching_head(const ParameterSet& embedding, const Episode& episode, const FairnessConfig& fair,
                                double similarity_scale) {
    const LabeledSet support = episode.support_set();
    const LabeledSet query = episode.query_set();
    const std::size_t ways = episode.ways();
    const Node support_emb = forward(embedding, support.features);
    const Node query_emb = forward(embedding, query.features);

    EpisodeHeadOutput out;
    out.query_probabilities = matching_probabilities(query_emb, support_emb, support.labels, ways, similarity_scale);
    out.query_loss = nll_from_probabilities(out.query_probabilities, query.labels);
    out.support_probabilities =
        matching_probabilities(support_emb, support_emb, support.labels, ways, similarity_scale);
    out.loss = fairness_active(fair) ? add(out.query_loss, support_penalty(out.support_probabilities, support.s, fair))
                                     : out.query_loss;
    return out;
}

Node protonet_episode_loss(const ParameterSet& embedding, const Episode& episode, const FairnessConfig& fair) {
    return protonet_head(embedding, episode, fair).loss;
}

Node matching_episode_loss(const ParameterSet& embedding, const Episode& episode, const FairnessConfig& fair,
                           double similarity_scale) {
    return matching_head(embedding, episode, fair, similarity_scale).loss;
}

EvalResult evaluate_episode(LearnerKind learner, const ParameterSet& phi, const Episode& episode,
                            const MetaConfig& meta, const FairnessConfig& fair) {
    if (learner != LearnerKind::fair_maml) {
        NoGradGuard no_grad;
        return head_result(run_head(learner, phi, episode, meta, fair), episode, fair);
    }
    const LabeledSet support = episode.support_set();
    const LabeledSet query = episode.query_set();
    const ParameterSet adapted =
        inner_adapt(phi, support, meta.inner_lr, meta.eval_inner_steps, fair, AdaptMode::first_order);
    NoGradGuard no_grad;
    const Node logits = forward(adapted, query.features);
    EvalResult r;
    r.accuracy = accuracy_of(logits.value(), query.labels);
    r.query_loss = cross_entropy(logits, query.labels).value().item();
    r.fairness = fairness_report(query.s, softmax(logits).value(), fair);
    r.support_fairness =
        fairness_report(support.s, softmax(forward(adapted, support.features)).value(), fair);
    return r;
}

AggregateEval aggregate(std::span<const EvalResult> results) {
    AggregateEval a;
    a.episodes = results.size();
    if (results.empty()) return a;
    std::vector<double> acc, loss, dbc_v, dbc_abs, di, violated, sup_abs, sup_violated;
    for (const EvalResult& r : results) {
        acc.push_back(r.accuracy);
        loss.push_back(r.query_loss);
        dbc_v.push_back(r.fairness.dbc);
        dbc_abs.push_back(r.fairness.abs_dbc);
        if (r.fairness.disparate_impact_defined) di.push_back(r.fairness.disparate_impact);
        violated.push_back(r.fairness.constraint > 0.0 ? 1.0 : 0.0);
        sup_abs.push_back(r.support_fairness.abs_dbc);
        sup_violated.push_back(r.support_fairness.constraint > 0.0 ? 1.0 : 0.0);
    }
    a.accuracy_mean = mean_of(acc);
    a.accuracy_std = std_of(acc);
    a.query_loss_mean = mean_of(loss);
    a.dbc_mean = mean_of(dbc_v);
    a.dbc_abs_mean = mean_of(dbc_abs);
    a.dbc_abs_std = std_of(dbc_abs);
    a.disparate_impact = di.empty() ? 1.0 : mean_of(di);
    a.constraint_violation_rate = mean_of(violated);
    a.support_dbc_abs_mean = mean_of(sup_abs);
    a.support_violation_rate = mean_of(sup_violated);
    return a;
}

AggregateEval evaluate(LearnerKind learner, const ParameterSet& phi, std::span<const Episode> episodes,
                       const MetaConfig& meta, const FairnessConfig& fair) {
    std::vector<EvalResult> results(episodes.size());
    for_each_index(episodes.size(), meta,
                   [&](std::size_t i) { results[i] = evaluate_episode(learner, phi, episodes[i], meta, fair); });
    return aggregate(results);
}

MetricsRecord make_record(std::size_t iteration, Split split, const AggregateEval& eval, double wall_time_ms) {
    MetricsRecord r;
    r.iteration = iteration;
    r.split = split;
    r.loss = eval.query_loss_mean;
    r.accuracy = eval.accuracy_mean;
    r.dbc_mean = eval.dbc_mean;
    r.dbc_abs_mean = eval.dbc_abs_mean;
    r.disparate_impact = eval.disparate_impact;
    r.constraint_violation_rate = eval.constraint_violation_rate;
    r.wall_time_ms = wall_time_ms;
    r.support_dbc_abs_mean = eval.support_dbc_abs_mean;
    r.support_violation_rate = eval.support_violation_rate;
    return r;
}

MlpSpec model_spec(LearnerKind learner, std::size_t input_dim, const std::vector<std::size_t>& hidden,
                   std::size_t ways, std::size_t embedding_dim) {
    MlpSpec spec;
    spec.input_dim = input_dim;
    spec.hidden_dims = hidden;
    spec.num_classes = learner == LearnerKind::fair_maml ? ways : embedding_dim;
    spec.validate();
    return spec;
}

TrainResult train(LearnerKind learner, const EpisodeSampler& source, const EpisodeSpec& spec, const MlpSpec& model,
                  const MetaConfig& meta, const FairnessConfig& fair, std::uint64_t seed, const TrainHooks& hooks) {
    model.validate();
    if (model.input_dim != source.feature_dim()) {
        throw std::invalid_argument("train: model input width " + std::to_string(model.input_dim) +
                                    " does not match feature width " + std::to_string(source.feature_dim()));
    }
    return train_from(learner, init_params(model, derive_seed(seed, {seed_stream::init})), source, spec, meta, fair,
                      seed, hooks);
}

TrainResult train_from(LearnerKind learner, ParameterSet init, const EpisodeSampler& source, const EpisodeSpec& spec,
                       const MetaConfig& meta, const FairnessConfig& fair, std::uint64_t seed,
                       const TrainHooks& hooks) {
    meta.validate();
    fair.validate();
    spec.validate();
    TrainResult out;
    out.params = std::move(init);
    AdamState adam = AdamState::for_params(out.params);
    for (std::size_t it = 0; it < meta.iterations; ++it) {
        const auto start = std::chrono::steady_clock::now();
        std::vector<Episode> episodes;
        episodes.reserve(meta.meta_batch);
        for (std::size_t j = 0; j < meta.meta_batch; ++j) {
            episodes.push_back(source.sample(spec, derive_seed(seed, {seed_stream::train_episodes, it, j})));
        }
        MetaStepResult step =
            apply_outer_update(out.params, batch_gradient(learner, out.params, episodes, meta, fair), meta, adam);
        out.params = std::move(step.params);
        adam = std::move(step.adam);
        const double ms =
            std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
        out.history.push_back(make_record(it + 1, Split::train, aggregate(step.results), ms));
        if (hooks.after_iteration) hooks.after_iteration(it + 1, out.params, out.history);
    }
    return out;
}

} // namespace fairmeta
