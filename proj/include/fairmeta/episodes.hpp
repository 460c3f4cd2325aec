#pragma once

#include "fairmeta/fairness.hpp"
#include "fairmeta/tensor.hpp"

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <random>
#include <span>
#include <variant>
#include <vector>

namespace fairmeta {

/// One observation. The protected attribute `s` is kept apart from
/// `features` and is never fed to a model.
struct Example {
    std::vector<double> features;
    /// Episode-local class index; 0 for records that are not in an episode.
    std::size_t label = 0;
    std::int64_t class_id = 0;
    int s = 0;
    std::uint64_t uid = 0;

    friend bool operator==(const Example&, const Example&) = default;
};

struct Dataset {
    std::size_t feature_dim = 0;
    std::vector<Example> examples;

    /// Distinct class ids in ascending order.
    std::vector<std::int64_t> class_ids() const;
    /// Throws on non-finite features, wrong widths, bad s or duplicate uids.
    void validate() const;

    friend bool operator==(const Dataset&, const Dataset&) = default;
};

struct EpisodeSpec {
    std::size_t ways = 5;
    std::size_t shots = 1;
    std::size_t query_shots = 15;

    void validate() const;
};

/// Model-ready view of a support or query set.
struct LabeledSet {
    Tensor features; // [size, feature_dim]
    std::vector<std::size_t> labels;
    ProtectedVector s;

    std::size_t size() const noexcept { return labels.size(); }
};

LabeledSet make_labeled_set(std::span<const Example> examples);

struct Episode {
    std::vector<Example> support;
    std::vector<Example> query;
    /// Global class id -> episode label in 0..ways-1.
    std::map<std::int64_t, std::size_t> episode_labels;

    std::size_t ways() const noexcept { return episode_labels.size(); }
    LabeledSet support_set() const { return make_labeled_set(support); }
    LabeledSet query_set() const { return make_labeled_set(query); }
};

/// Gaussian class cluster with a protected-attribute rate and the direction
/// along which members with s = 1 are shifted.
struct ClassDescriptor {
    std::int64_t class_id = 0;
    std::vector<double> mean;
    std::vector<double> shift_direction; // unit length
    double protected_probability = 0.5;
};

struct TaskFamily {
    std::vector<ClassDescriptor> classes;
    std::size_t feature_dim = 0;
    double noise_std = 0.7;
    double bias_strength = 0.0;
    std::uint64_t seed = 0;

    const ClassDescriptor& find(std::int64_t class_id) const;
    /// s ~ Bernoulli(p_c); x = mean + noise_std·z + s·bias_strength·δ.
    Example draw(const ClassDescriptor& cls, std::mt19937_64& rng, std::uint64_t uid) const;
};

/// Per class: mean uniform in [-3, 3]^dim, isotropic noise 0.7, protected
/// probability uniform in [0.5 − 0.4·b, 0.5 + 0.4·b], and a unit shift
/// direction applied with magnitude b to members with s = 1.
TaskFamily generate_synthetic_family(std::size_t num_classes, std::size_t feature_dim, double bias_strength,
                                     std::uint64_t seed);

/// `per_class` draws per class, class-major, uids 0..n-1.
Dataset materialize(const TaskFamily& family, std::size_t per_class, std::uint64_t seed);

/// Uniformly picks `ways` classes from `class_pool` (all classes when empty),
/// then shots + query_shots examples per class without replacement.
Episode sample_episode(const Dataset& dataset, const EpisodeSpec& spec, std::uint64_t seed,
                       std::span<const std::int64_t> class_pool = {});

/// Same, drawing fresh examples from the family's class distributions.
Episode sample_episode(const TaskFamily& family, const EpisodeSpec& spec, std::uint64_t seed,
                       std::span<const std::int64_t> class_pool = {});

/// Disjoint class partitions for meta-train / validation / test.
struct ClassSplit {
    std::vector<std::int64_t> train;
    std::vector<std::int64_t> val;
    std::vector<std::int64_t> test;
};

/// Validation and test each take max(ways, n/5) classes from the end of the
/// sorted id list; the rest is meta-train. Every partition needs >= ways.
ClassSplit split_classes(std::vector<std::int64_t> class_ids, std::size_t ways);

/// A family or a dataset restricted to a pool of classes.
class EpisodeSampler {
public:
    EpisodeSampler(TaskFamily family, std::vector<std::int64_t> class_pool);
    EpisodeSampler(Dataset dataset, std::vector<std::int64_t> class_pool);

    Episode sample(const EpisodeSpec& spec, std::uint64_t seed) const;
    std::size_t feature_dim() const;
    const std::vector<std::int64_t>& class_pool() const noexcept { return pool_; }

private:
    std::variant<TaskFamily, Dataset> source_;
    std::vector<std::int64_t> pool_;
};

// Dataset file: header `#fairmeta-dataset v1 dim=<d>`, then one
// `uid,class_id,s,f1,...,fd` record per line.
void write_dataset(const Dataset& dataset, std::ostream& out);
void write_dataset(const Dataset& dataset, const std::filesystem::path& path);
Dataset read_dataset(std::istream& in);
Dataset read_dataset(const std::filesystem::path& path);

} // namespace fairmeta
