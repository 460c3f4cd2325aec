#pragma once

#include "fairmeta/meta.hpp"

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

namespace fairmeta {

struct SyntheticSource {
    std::size_t classes = 20;
    std::size_t dim = 2;
    double bias_strength = 0.8;
    /// Family seed; derived from the run seed when unset.
    std::optional<std::uint64_t> seed;
};

struct RunConfig {
    LearnerKind learner = LearnerKind::fair_maml;
    MetaConfig meta;
    FairnessConfig fairness;
    EpisodeSpec episode;
    std::vector<std::size_t> hidden_dims{64, 64};
    std::size_t embedding_dim = 64;
    /// Dataset file; a synthetic family is used when empty.
    std::filesystem::path data_path;
    SyntheticSource synthetic;
    std::uint64_t seed = 0;
    std::filesystem::path out_dir = "run";
    std::string preset;
    bool deterministic = false;
    std::size_t eval_every = 50;
    std::size_t eval_episodes = 100;
    std::size_t test_episodes = 200;

    void validate() const;
};

/// Names accepted by `--preset`.
std::vector<std::string> preset_names();

/// Applies a preset's values on top of `cfg`. Throws on an unknown name.
void apply_preset(RunConfig& cfg, const std::string& name);

/// Resolves a configuration from command-line arguments (without the
/// subcommand). `--config FILE` names a JSON object whose keys are the long
/// flag names without dashes. Precedence: flag > file > preset > default.
RunConfig parse_config(const std::vector<std::string>& args);

/// Resolved configuration as a JSON object using the same keys as a config
/// file. Feeding it back through parse_config yields the same RunConfig.
std::string config_to_json(const RunConfig& cfg);

// metrics.csv
extern const std::vector<std::string> metrics_columns;
/// `include_timing = false` writes 0 in the wall_time_ms column.
void write_metrics_csv(const std::vector<MetricsRecord>& history, std::ostream& out, bool include_timing = true);
std::vector<MetricsRecord> read_metrics_csv(std::istream& in);

// params.json
void save_params(const ParameterSet& params, const std::filesystem::path& path);
ParameterSet load_params(const std::filesystem::path& path);

/// Data source and class partition for a configuration.
struct ExperimentData {
    std::size_t feature_dim = 0;
    EpisodeSampler train;
    EpisodeSampler val;
    EpisodeSampler test;
};

ExperimentData prepare_data(const RunConfig& cfg);

/// `count` episodes from `sampler`, seeded by (seed, stream, index).
std::vector<Episode> sample_episodes(const EpisodeSampler& sampler, const EpisodeSpec& spec, std::size_t count,
                                     std::uint64_t seed, std::uint64_t stream);

struct ExperimentResult {
    ParameterSet params;
    std::vector<MetricsRecord> history; // train, val and final test records
    AggregateEval test;
};

/// Trains with periodic validation, then scores the test split. Artifacts
/// (config.resolved, metrics.csv, summary.json, params.json) go to
/// cfg.out_dir when `write_artifacts` is set.
ExperimentResult run_experiment(const RunConfig& cfg, bool write_artifacts = true);

std::string summary_json(const RunConfig& cfg, const AggregateEval& test);

/// Entry point of the `fairmeta` tool: `gen`, `train` or `eval` followed by
/// flags. Returns the process exit status.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

} // namespace fairmeta
