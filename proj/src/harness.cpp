#include "fairmeta/harness.hpp"

#include "fairmeta/seeding.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cmath>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>
#include <stdexcept>

namespace fairmeta {

using json = nlohmann::ordered_json;

namespace {

class ConfigError : public std::invalid_argument {
public:
    ConfigError(const std::string& key, const std::string& what) : std::invalid_argument(key + ": " + what) {}
};

enum class KeyKind { count, real, flag, text, list };

struct KeySpec {
    const char* name;
    KeyKind kind;
    const char* help;
};

// Order here is the order of config.resolved.
constexpr KeySpec config_keys[] = {
    {"preset", KeyKind::text, "omniglot-5way | omniglot-20way | miniimagenet-5way"},
    {"learner", KeyKind::text, "maml | protonet | matching"},
    {"ways", KeyKind::count, "classes per episode"},
    {"shots", KeyKind::count, "support examples per class"},
    {"query-shots", KeyKind::count, "query examples per class"},
    {"inner-lr", KeyKind::real, "inner step size"},
    {"outer-lr", KeyKind::real, "outer step size"},
    {"inner-steps", KeyKind::count, "inner steps during meta-training"},
    {"eval-inner-steps", KeyKind::count, "inner steps at evaluation"},
    {"meta-batch", KeyKind::count, "episodes per outer iteration"},
    {"iterations", KeyKind::count, "outer iterations"},
    {"outer-optimizer", KeyKind::text, "adam | sgd"},
    {"first-order", KeyKind::flag, "detach adapted parameters in the outer gradient"},
    {"meta-fairness", KeyKind::flag, "add the query-set penalty to the meta objective"},
    {"fairness", KeyKind::flag, "fairness penalty on (file key; --no-fairness turns it off)"},
    {"lambda", KeyKind::real, "penalty weight"},
    {"relaxation", KeyKind::real, "constraint slack c"},
    {"penalty", KeyKind::text, "hinge | raw"},
    {"distance", KeyKind::text, "max-prob | signed-margin"},
    {"hidden", KeyKind::list, "hidden layer widths, comma separated"},
    {"embedding-dim", KeyKind::count, "embedding width for protonet/matching"},
    {"matching-scale", KeyKind::real, "cosine similarity multiplier"},
    {"data", KeyKind::text, "dataset file; synthetic family when empty"},
    {"classes", KeyKind::count, "synthetic classes"},
    {"dim", KeyKind::count, "synthetic feature width"},
    {"bias-strength", KeyKind::real, "synthetic bias strength in [0, 1]"},
    {"data-seed", KeyKind::count, "synthetic family seed"},
    {"seed", KeyKind::count, "run seed"},
    {"deterministic", KeyKind::flag, "single-threaded, reproducible metrics.csv"},
    {"threads", KeyKind::count, "worker threads (0 = hardware)"},
    {"eval-every", KeyKind::count, "validation cadence in iterations"},
    {"eval-episodes", KeyKind::count, "validation episodes"},
    {"test-episodes", KeyKind::count, "test episodes"},
    {"out", KeyKind::text, "output directory"},
};

const KeySpec* find_key(const std::string& name) {
    for (const KeySpec& k : config_keys) {
        if (name == k.name) return &k;
    }
    return nullptr;
}

std::uint64_t as_count(const std::string& key, const json& v) {
    if (v.is_number_unsigned()) return v.get<std::uint64_t>();
    if (v.is_number_integer()) {
        if (v.get<std::int64_t>() >= 0) return static_cast<std::uint64_t>(v.get<std::int64_t>());
        throw ConfigError(key, "must be >= 0");
    }
    throw ConfigError(key, "expected a non-negative integer, got " + v.dump());
}

double as_real(const std::string& key, const json& v) {
    if (!v.is_number()) throw ConfigError(key, "expected a number, got " + v.dump());
    const double d = v.get<double>();
    if (!std::isfinite(d)) throw ConfigError(key, "must be finite");
    return d;
}

bool as_flag(const std::string& key, const json& v) {
    if (!v.is_boolean()) throw ConfigError(key, "expected true or false, got " + v.dump());
    return v.get<bool>();
}

std::string as_text(const std::string& key, const json& v) {
    if (!v.is_string()) throw ConfigError(key, "expected a string, got " + v.dump());
    return v.get<std::string>();
}

std::vector<std::size_t> as_list(const std::string& key, const json& v) {
    if (!v.is_array()) throw ConfigError(key, "expected an array of widths, got " + v.dump());
    std::vector<std::size_t> out;
    for (const json& e : v) {
        const std::uint64_t w = as_count(key, e);
        if (w == 0) throw ConfigError(key, "widths must be >= 1");
        out.push_back(static_cast<std::size_t>(w));
    }
    return out;
}

double positive(const std::string& key, double v) {
    if (!(v > 0.0)) throw ConfigError(key, "must be > 0");
    return v;
}

double non_negative(const std::string& key, double v) {
    if (!(v >= 0.0)) throw ConfigError(key, "must be >= 0");
    return v;
}

std::size_t at_least_one(const std::string& key, std::uint64_t v) {
    if (v == 0) throw ConfigError(key, "must be >= 1");
    return static_cast<std::size_t>(v);
}

void apply_key(RunConfig& c, const std::string& key, const json& v) {
    const KeySpec* spec = find_key(key);
    if (spec == nullptr) throw ConfigError(key, "unknown key");
    if (key == "preset") {
        c.preset = as_text(key, v);
    } else if (key == "learner") {
        const std::string s = as_text(key, v);
        if (s == "maml") c.learner = LearnerKind::fair_maml;
        else if (s == "protonet") c.learner = LearnerKind::fair_protonet;
        else if (s == "matching") c.learner = LearnerKind::fair_matching;
        else throw ConfigError(key, "expected maml, protonet or matching, got '" + s + "'");
    } else if (key == "ways") {
        c.episode.ways = at_least_one(key, as_count(key, v));
    } else if (key == "shots") {
        c.episode.shots = at_least_one(key, as_count(key, v));
    } else if (key == "query-shots") {
        c.episode.query_shots = at_least_one(key, as_count(key, v));
    } else if (key == "inner-lr") {
        c.meta.inner_lr = positive(key, as_real(key, v));
    } else if (key == "outer-lr") {
        c.meta.outer_lr = positive(key, as_real(key, v));
    } else if (key == "inner-steps") {
        c.meta.inner_steps = static_cast<std::size_t>(as_count(key, v));
    } else if (key == "eval-inner-steps") {
        c.meta.eval_inner_steps = static_cast<std::size_t>(as_count(key, v));
    } else if (key == "meta-batch") {
        c.meta.meta_batch = at_least_one(key, as_count(key, v));
    } else if (key == "iterations") {
        c.meta.iterations = at_least_one(key, as_count(key, v));
    } else if (key == "outer-optimizer") {
        const std::string s = as_text(key, v);
        if (s == "adam") c.meta.outer_optimizer = OuterOptimizer::adam;
        else if (s == "sgd") c.meta.outer_optimizer = OuterOptimizer::sgd;
        else throw ConfigError(key, "expected adam or sgd, got '" + s + "'");
    } else if (key == "first-order") {
        c.meta.first_order = as_flag(key, v);
    } else if (key == "meta-fairness") {
        c.meta.meta_fairness = as_flag(key, v);
    } else if (key == "fairness") {
        c.fairness.enabled = as_flag(key, v);
    } else if (key == "lambda") {
        c.fairness.lambda = non_negative(key, as_real(key, v));
    } else if (key == "relaxation") {
        c.fairness.relaxation = non_negative(key, as_real(key, v));
    } else if (key == "penalty") {
        const std::string s = as_text(key, v);
        if (s == "hinge") c.fairness.penalty = PenaltyShape::hinge;
        else if (s == "raw") c.fairness.penalty = PenaltyShape::raw;
        else throw ConfigError(key, "expected hinge or raw, got '" + s + "'");
    } else if (key == "distance") {
        const std::string s = as_text(key, v);
        if (s == "max-prob") c.fairness.distance = DistanceKind::max_prob;
        else if (s == "signed-margin") c.fairness.distance = DistanceKind::signed_margin;
        else throw ConfigError(key, "expected max-prob or signed-margin, got '" + s + "'");
    } else if (key == "hidden") {
        c.hidden_dims = as_list(key, v);
    } else if (key == "embedding-dim") {
        c.embedding_dim = at_least_one(key, as_count(key, v));
    } else if (key == "matching-scale") {
        c.meta.matching_scale = positive(key, as_real(key, v));
    } else if (key == "data") {
        c.data_path = as_text(key, v);
    } else if (key == "classes") {
        c.synthetic.classes = static_cast<std::size_t>(as_count(key, v));
    } else if (key == "dim") {
        c.synthetic.dim = static_cast<std::size_t>(as_count(key, v));
    } else if (key == "bias-strength") {
        const double b = as_real(key, v);
        if (!(b >= 0.0 && b <= 1.0)) throw ConfigError(key, "must be in [0, 1]");
        c.synthetic.bias_strength = b;
    } else if (key == "data-seed") {
        if (v.is_null()) c.synthetic.seed.reset();
        else c.synthetic.seed = as_count(key, v);
    } else if (key == "seed") {
        c.seed = as_count(key, v);
    } else if (key == "deterministic") {
        c.deterministic = as_flag(key, v);
    } else if (key == "threads") {
        c.meta.threads = static_cast<std::size_t>(as_count(key, v));
    } else if (key == "eval-every") {
        c.eval_every = static_cast<std::size_t>(as_count(key, v));
    } else if (key == "eval-episodes") {
        c.eval_episodes = static_cast<std::size_t>(as_count(key, v));
    } else if (key == "test-episodes") {
        c.test_episodes = at_least_one(key, as_count(key, v));
    } else if (key == "out") {
        c.out_dir = as_text(key, v);
    }
}

// Converts a command-line string to the JSON value a config file would hold.
json cli_value(const KeySpec& spec, const std::string& raw) {
    const std::string key = spec.name;
    switch (spec.kind) {
    case KeyKind::count: {
        if (!raw.empty() && raw.front() == '-') throw ConfigError(key, "must be >= 0");
        std::uint64_t v = 0;
        const auto [p, ec] = std::from_chars(raw.data(), raw.data() + raw.size(), v);
        if (ec != std::errc() || p != raw.data() + raw.size()) {
            throw ConfigError(key, "expected a non-negative integer, got '" + raw + "'");
        }
        return v;
    }
    case KeyKind::real: {
        double v = 0.0;
        const auto [p, ec] = std::from_chars(raw.data(), raw.data() + raw.size(), v);
        if (ec != std::errc() || p != raw.data() + raw.size()) {
            throw ConfigError(key, "expected a number, got '" + raw + "'");
        }
        return v;
    }
    case KeyKind::flag: return true;
    case KeyKind::text: return raw;
    case KeyKind::list: {
        json arr = json::array();
        std::stringstream ss(raw);
        std::string item;
        while (std::getline(ss, item, ',')) arr.push_back(cli_value({spec.name, KeyKind::count, ""}, item));
        return arr;
    }
    }
    return nullptr;
}

json read_json_file(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open config file " + path.string());
    json j;
    try {
        j = json::parse(in);
    } catch (const json::parse_error& e) {
        throw std::runtime_error("config file " + path.string() + ": " + e.what());
    }
    if (!j.is_object()) throw std::runtime_error("config file " + path.string() + ": expected a JSON object");
    return j;
}

std::string format_double(double v) {
    char buf[64];
    const auto [p, ec] = std::to_chars(buf, buf + sizeof buf, v);
    if (ec != std::errc()) throw std::runtime_error("cannot format number");
    return std::string(buf, p);
}

double parse_double(const std::string& s, std::size_t line, const char* column) {
    double v = 0.0;
    const auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || p != s.data() + s.size()) {
        throw std::runtime_error("metrics line " + std::to_string(line) + ": bad " + column + " '" + s + "'");
    }
    return v;
}

void write_text(const std::filesystem::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out << text;
    if (!out) throw std::runtime_error("write failed for " + path.string());
}

} // namespace

void RunConfig::validate() const {
    meta.validate();
    fairness.validate();
    episode.validate();
    if (data_path.empty()) {
        if (synthetic.classes < 2) throw ConfigError("classes", "must be >= 2");
        if (synthetic.dim < 2) throw ConfigError("dim", "must be >= 2");
    }
    if (test_episodes == 0) throw ConfigError("test-episodes", "must be >= 1");
}

std::vector<std::string> preset_names() { return {"omniglot-5way", "omniglot-20way", "miniimagenet-5way"}; }

void apply_preset(RunConfig& cfg, const std::string& name) {
    if (name == "omniglot-5way") {
        cfg.episode.ways = 5;
        cfg.meta.inner_lr = 0.4;
        cfg.meta.inner_steps = 1;
        cfg.meta.eval_inner_steps = 3;
        cfg.meta.meta_batch = 32;
    } else if (name == "omniglot-20way") {
        cfg.episode.ways = 20;
        cfg.meta.inner_lr = 0.1;
        cfg.meta.inner_steps = 5;
        cfg.meta.eval_inner_steps = 5;
        cfg.meta.meta_batch = 16;
        cfg.synthetic.classes = 100;
    } else if (name == "miniimagenet-5way") {
        cfg.episode.ways = 5;
        cfg.meta.inner_lr = 0.01;
        cfg.meta.inner_steps = 5;
        cfg.meta.eval_inner_steps = 10;
        cfg.meta.meta_batch = 4;
    } else {
        throw ConfigError("preset", "unknown preset '" + name + "'");
    }
    cfg.preset = name;
    cfg.meta.outer_lr = 1e-3;
    cfg.meta.iterations = 60000;
    cfg.episode.query_shots = 15;
}

RunConfig parse_config(const std::vector<std::string>& args) {
    CLI::App app("fairmeta train");
    std::map<std::string, std::string> raw;
    std::map<std::string, CLI::Option*> options;
    std::string config_file;
    app.add_option("--config", config_file, "JSON config file");
    for (const KeySpec& k : config_keys) {
        const std::string flag = std::string("--") + k.name;
        if (k.kind == KeyKind::flag) {
            if (std::string(k.name) == "fairness") continue;
            options[k.name] = app.add_flag(flag, k.help);
        } else {
            options[k.name] = app.add_option(flag, raw[k.name], k.help)->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);
        }
    }
    CLI::Option* no_fairness = app.add_flag("--no-fairness", "plain MAML / baselines without the penalty");

    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);

    json file = json::object();
    if (!config_file.empty()) file = read_json_file(config_file);

    RunConfig cfg;
    std::string preset;
    if (options["preset"]->count() > 0) preset = raw["preset"];
    else if (file.contains("preset")) preset = as_text("preset", file["preset"]);
    if (!preset.empty()) apply_preset(cfg, preset);

    for (const auto& [key, value] : file.items()) apply_key(cfg, key, value);

    bool batch_given = file.contains("meta-batch");
    for (const KeySpec& k : config_keys) {
        const auto it = options.find(k.name);
        if (it == options.end() || it->second->count() == 0) continue;
        apply_key(cfg, k.name, cli_value(k, raw[k.name]));
        if (std::string(k.name) == "meta-batch") batch_given = true;
    }
    if (no_fairness->count() > 0) cfg.fairness.enabled = false;

    // The mini-ImageNet setting halves the task batch for 5-shot episodes.
    if (cfg.preset == "miniimagenet-5way" && !batch_given && cfg.episode.shots >= 5) cfg.meta.meta_batch = 2;

    cfg.validate();
    return cfg;
}

std::string config_to_json(const RunConfig& c) {
    json j = json::object();
    j["preset"] = c.preset;
    j["learner"] = c.learner == LearnerKind::fair_maml       ? "maml"
                   : c.learner == LearnerKind::fair_protonet ? "protonet"
                                                             : "matching";
    j["ways"] = c.episode.ways;
    j["shots"] = c.episode.shots;
    j["query-shots"] = c.episode.query_shots;
    j["inner-lr"] = c.meta.inner_lr;
    j["outer-lr"] = c.meta.outer_lr;
    j["inner-steps"] = c.meta.inner_steps;
    j["eval-inner-steps"] = c.meta.eval_inner_steps;
    j["meta-batch"] = c.meta.meta_batch;
    j["iterations"] = c.meta.iterations;
    j["outer-optimizer"] = c.meta.outer_optimizer == OuterOptimizer::adam ? "adam" : "sgd";
    j["first-order"] = c.meta.first_order;
    j["meta-fairness"] = c.meta.meta_fairness;
    j["fairness"] = c.fairness.enabled;
    j["lambda"] = c.fairness.lambda;
    j["relaxation"] = c.fairness.relaxation;
    j["penalty"] = c.fairness.penalty == PenaltyShape::hinge ? "hinge" : "raw";
    j["distance"] = c.fairness.distance == DistanceKind::max_prob ? "max-prob" : "signed-margin";
    j["hidden"] = c.hidden_dims;
    j["embedding-dim"] = c.embedding_dim;
    j["matching-scale"] = c.meta.matching_scale;
    j["data"] = c.data_path.string();
    j["classes"] = c.synthetic.classes;
    j["dim"] = c.synthetic.dim;
    j["bias-strength"] = c.synthetic.bias_strength;
    j["data-seed"] = c.synthetic.seed ? json(*c.synthetic.seed) : json(nullptr);
    j["seed"] = c.seed;
    j["deterministic"] = c.deterministic;
    j["threads"] = c.meta.threads;
    j["eval-every"] = c.eval_every;
    j["eval-episodes"] = c.eval_episodes;
    j["test-episodes"] = c.test_episodes;
    j["out"] = c.out_dir.string();
    return j.dump(2) + "\n";
}

const std::vector<std::string> metrics_columns = {
    "iteration",        "split",         "loss",
    "accuracy",         "dbc_mean",      "dbc_abs_mean",
    "disparate_impact", "constraint_violation_rate", "wall_time_ms",
    "support_dbc_abs_mean", "support_violation_rate",
};

void write_metrics_csv(const std::vector<MetricsRecord>& history, std::ostream& out, bool include_timing) {
    for (std::size_t i = 0; i < metrics_columns.size(); ++i) out << (i ? "," : "") << metrics_columns[i];
    out << '\n';
    for (const MetricsRecord& r : history) {
        out << r.iteration << ',' << split_name(r.split) << ',' << format_double(r.loss) << ','
            << format_double(r.accuracy) << ',' << format_double(r.dbc_mean) << ',' << format_double(r.dbc_abs_mean)
            << ',' << format_double(r.disparate_impact) << ',' << format_double(r.constraint_violation_rate) << ','
            << format_double(include_timing ? r.wall_time_ms : 0.0) << ',' << format_double(r.support_dbc_abs_mean)
            << ',' << format_double(r.support_violation_rate) << '\n';
    }
}

std::vector<MetricsRecord> read_metrics_csv(std::istream& in) {
    std::string line;
    if (!std::getline(in, line)) throw std::runtime_error("metrics: missing header");
    std::string expected;
    for (std::size_t i = 0; i < metrics_columns.size(); ++i) expected += (i ? "," : "") + metrics_columns[i];
    if (line != expected) throw std::runtime_error("metrics: unexpected header '" + line + "'");
    std::vector<MetricsRecord> out;
    std::size_t line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        std::vector<std::string> f;
        std::stringstream ss(line);
        std::string cell;
        while (std::getline(ss, cell, ',')) f.push_back(cell);
        if (f.size() != metrics_columns.size()) {
            throw std::runtime_error("metrics line " + std::to_string(line_no) + ": expected " +
                                     std::to_string(metrics_columns.size()) + " fields");
        }
        MetricsRecord r;
        std::uint64_t it = 0;
        const auto [p, ec] = std::from_chars(f[0].data(), f[0].data() + f[0].size(), it);
        if (ec != std::errc() || p != f[0].data() + f[0].size()) {
            throw std::runtime_error("metrics line " + std::to_string(line_no) + ": bad iteration");
        }
        r.iteration = static_cast<std::size_t>(it);
        if (f[1] == "train") r.split = Split::train;
        else if (f[1] == "val") r.split = Split::val;
        else if (f[1] == "test") r.split = Split::test;
        else throw std::runtime_error("metrics line " + std::to_string(line_no) + ": bad split '" + f[1] + "'");
        r.loss = parse_double(f[2], line_no, "loss");
        r.accuracy = parse_double(f[3], line_no, "accuracy");
        r.dbc_mean = parse_double(f[4], line_no, "dbc_mean");
        r.dbc_abs_mean = parse_double(f[5], line_no, "dbc_abs_mean");
        r.disparate_impact = parse_double(f[6], line_no, "disparate_impact");
        r.constraint_violation_rate = parse_double(f[7], line_no, "constraint_violation_rate");
        r.wall_time_ms = parse_double(f[8], line_no, "wall_time_ms");
        r.support_dbc_abs_mean = parse_double(f[9], line_no, "support_dbc_abs_mean");
        r.support_violation_rate = parse_double(f[10], line_no, "support_violation_rate");
        out.push_back(r);
    }
    return out;
}

void save_params(const ParameterSet& params, const std::filesystem::path& path) {
    json j = json::object();
    j["format"] = "fairmeta-params v1";
    json list = json::array();
    for (const auto& e : params) {
        const Tensor& t = e.node.value();
        json p = json::object();
        p["name"] = e.name;
        p["shape"] = t.shape();
        p["values"] = std::vector<double>(t.data().begin(), t.data().end());
        list.push_back(std::move(p));
    }
    j["parameters"] = std::move(list);
    write_text(path, j.dump() + "\n");
}

ParameterSet load_params(const std::filesystem::path& path) {
    const json j = read_json_file(path);
    if (j.value("format", "") != "fairmeta-params v1") throw std::runtime_error(path.string() + ": not a params file");
    std::vector<std::pair<std::string, Tensor>> tensors;
    for (const json& p : j.at("parameters")) {
        const auto shape = p.at("shape").get<Shape>();
        const auto values = p.at("values").get<std::vector<double>>();
        if (values.size() != shape_size(shape)) throw std::runtime_error(path.string() + ": size mismatch");
        Tensor t = Tensor::zeros(shape);
        std::copy(values.begin(), values.end(), t.data().begin());
        tensors.emplace_back(p.at("name").get<std::string>(), std::move(t));
    }
    return ParameterSet::from_tensors(std::move(tensors));
}

ExperimentData prepare_data(const RunConfig& cfg) {
    if (!cfg.data_path.empty()) {
        Dataset ds = read_dataset(cfg.data_path);
        const ClassSplit split = split_classes(ds.class_ids(), cfg.episode.ways);
        const std::size_t dim = ds.feature_dim;
        return ExperimentData{dim, EpisodeSampler(ds, split.train), EpisodeSampler(ds, split.val),
                              EpisodeSampler(ds, split.test)};
    }
    const std::uint64_t family_seed = cfg.synthetic.seed.value_or(derive_seed(cfg.seed, {seed_stream::data}));
    TaskFamily family =
        generate_synthetic_family(cfg.synthetic.classes, cfg.synthetic.dim, cfg.synthetic.bias_strength, family_seed);
    std::vector<std::int64_t> ids;
    for (const auto& c : family.classes) ids.push_back(c.class_id);
    const ClassSplit split = split_classes(ids, cfg.episode.ways);
    return ExperimentData{family.feature_dim, EpisodeSampler(family, split.train), EpisodeSampler(family, split.val),
                          EpisodeSampler(family, split.test)};
}

std::vector<Episode> sample_episodes(const EpisodeSampler& sampler, const EpisodeSpec& spec, std::size_t count,
                                     std::uint64_t seed, std::uint64_t stream) {
    std::vector<Episode> out;
    out.reserve(count);
    for (std::size_t i = 0; i < count; ++i) out.push_back(sampler.sample(spec, derive_seed(seed, {stream, i})));
    return out;
}

std::string summary_json(const RunConfig& cfg, const AggregateEval& test) {
    json j = json::object();
    j["learner"] = learner_name(cfg.learner);
    j["seed"] = cfg.seed;
    j["iterations"] = cfg.meta.iterations;
    j["ways"] = cfg.episode.ways;
    j["shots"] = cfg.episode.shots;
    j["lambda"] = cfg.fairness.enabled ? cfg.fairness.lambda : 0.0;
    json t = json::object();
    t["episodes"] = test.episodes;
    t["accuracy_mean"] = test.accuracy_mean;
    t["accuracy_std"] = test.accuracy_std;
    t["dbc_abs_mean"] = test.dbc_abs_mean;
    t["dbc_abs_std"] = test.dbc_abs_std;
    t["dbc_mean"] = test.dbc_mean;
    t["disparate_impact"] = test.disparate_impact;
    t["constraint_violation_rate"] = test.constraint_violation_rate;
    t["query_loss_mean"] = test.query_loss_mean;
    t["support_dbc_abs_mean"] = test.support_dbc_abs_mean;
    t["support_violation_rate"] = test.support_violation_rate;
    j["test"] = std::move(t);
    return j.dump(2) + "\n";
}

ExperimentResult run_experiment(const RunConfig& cfg, bool write_artifacts) {
    cfg.validate();
    if (write_artifacts) {
        std::error_code ec;
        std::filesystem::create_directories(cfg.out_dir, ec);
        if (ec) throw std::runtime_error("cannot create output directory " + cfg.out_dir.string() + ": " + ec.message());
        write_text(cfg.out_dir / "config.resolved", config_to_json(cfg));
    }
    const ExperimentData data = prepare_data(cfg);
    const MlpSpec model =
        model_spec(cfg.learner, data.feature_dim, cfg.hidden_dims, cfg.episode.ways, cfg.embedding_dim);
    MetaConfig meta = cfg.meta;
    meta.deterministic = cfg.deterministic;

    const std::vector<Episode> val_episodes =
        sample_episodes(data.val, cfg.episode, cfg.eval_episodes, cfg.seed, seed_stream::val_episodes);
    TrainHooks hooks;
    hooks.after_iteration = [&](std::size_t it, const ParameterSet& params, std::vector<MetricsRecord>& history) {
        if (cfg.eval_every == 0 || val_episodes.empty()) return;
        if (it % cfg.eval_every != 0 && it != meta.iterations) return;
        const auto start = std::chrono::steady_clock::now();
        const AggregateEval v = evaluate(cfg.learner, params, val_episodes, meta, cfg.fairness);
        const double ms =
            std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
        history.push_back(make_record(it, Split::val, v, ms));
    };
    TrainResult trained = train(cfg.learner, data.train, cfg.episode, model, meta, cfg.fairness, cfg.seed, hooks);

    const auto start = std::chrono::steady_clock::now();
    const std::vector<Episode> test_episodes =
        sample_episodes(data.test, cfg.episode, cfg.test_episodes, cfg.seed, seed_stream::test_episodes);
    ExperimentResult out;
    out.test = evaluate(cfg.learner, trained.params, test_episodes, meta, cfg.fairness);
    const double ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
    out.history = std::move(trained.history);
    out.history.push_back(make_record(meta.iterations, Split::test, out.test, ms));
    out.params = std::move(trained.params);

    if (write_artifacts) {
        std::ostringstream csv;
        write_metrics_csv(out.history, csv, !cfg.deterministic);
        write_text(cfg.out_dir / "metrics.csv", csv.str());
        write_text(cfg.out_dir / "summary.json", summary_json(cfg, out.test));
        save_params(out.params, cfg.out_dir / "params.json");
    }
    return out;
}

namespace {

constexpr const char* usage_text =
    "usage: fairmeta <command> [flags]\n"
    "  gen    write a synthetic dataset file\n"
    "  train  run an experiment (see `fairmeta train --help`)\n"
    "  eval   score a finished run on fresh test episodes\n";

// False when help was requested and printed.
bool parse_subcommand(CLI::App& app, const std::vector<std::string>& args, std::ostream& out) {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    try {
        app.parse(reversed);
    } catch (const CLI::CallForHelp&) {
        out << app.help();
        return false;
    }
    return true;
}

int cmd_gen(const std::vector<std::string>& args, std::ostream& out) {
    CLI::App app("fairmeta gen");
    std::size_t classes = 10, dim = 2, per_class = 40;
    double bias = 0.8;
    std::uint64_t seed = 0;
    std::string path;
    app.add_option("--classes", classes)->check(CLI::Range(std::size_t{2}, std::size_t{1} << 20));
    app.add_option("--dim", dim)->check(CLI::Range(std::size_t{2}, std::size_t{1} << 16));
    app.add_option("--bias-strength", bias)->check(CLI::Range(0.0, 1.0));
    app.add_option("--per-class", per_class)->check(CLI::PositiveNumber);
    app.add_option("--seed", seed);
    app.add_option("--out", path)->required();
    if (!parse_subcommand(app, args, out)) return 0;

    const TaskFamily family = generate_synthetic_family(classes, dim, bias, seed);
    const Dataset ds = materialize(family, per_class, derive_seed(seed, {seed_stream::data}));
    write_dataset(ds, std::filesystem::path(path));
    out << "wrote " << ds.examples.size() << " records to " << path << "\n";
    return 0;
}

int cmd_train(const std::vector<std::string>& args, std::ostream& out) {
    const RunConfig cfg = parse_config(args);
    const ExperimentResult r = run_experiment(cfg, true);
    out << summary_json(cfg, r.test);
    return 0;
}

int cmd_eval(const std::vector<std::string>& args, std::ostream& out) {
    CLI::App app("fairmeta eval");
    std::string run_dir;
    std::size_t episodes = 0;
    std::uint64_t seed = 0;
    app.add_option("--run", run_dir, "directory written by `fairmeta train`")->required();
    CLI::Option* episodes_opt = app.add_option("--episodes", episodes)->check(CLI::PositiveNumber);
    CLI::Option* seed_opt = app.add_option("--seed", seed);
    if (!parse_subcommand(app, args, out)) return 0;

    const std::filesystem::path dir(run_dir);
    RunConfig cfg = parse_config({"--config", (dir / "config.resolved").string()});
    if (episodes_opt->count() > 0) cfg.test_episodes = episodes;
    if (seed_opt->count() > 0) cfg.seed = seed;
    const ParameterSet params = load_params(dir / "params.json");
    const ExperimentData data = prepare_data(cfg);
    MetaConfig meta = cfg.meta;
    meta.deterministic = cfg.deterministic;
    const std::vector<Episode> test =
        sample_episodes(data.test, cfg.episode, cfg.test_episodes, cfg.seed, seed_stream::test_episodes);
    out << summary_json(cfg, evaluate(cfg.learner, params, test, meta, cfg.fairness));
    return 0;
}

} // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    if (args.empty()) {
        err << usage_text;
        return 2;
    }
    const std::string& command = args.front();
    const std::vector<std::string> rest(args.begin() + 1, args.end());
    try {
        if (command == "gen") return cmd_gen(rest, out);
        if (command == "train") return cmd_train(rest, out);
        if (command == "eval") return cmd_eval(rest, out);
        if (command == "--help" || command == "-h" || command == "help") {
            out << usage_text;
            return 0;
        }
        err << "unknown command '" << command << "'\n" << usage_text;
        return 2;
    } catch (const CLI::CallForHelp&) {
        out << "flags for " << command << ":\n";
        for (const KeySpec& k : config_keys) {
            out << "  --" << k.name << (k.kind == KeyKind::flag ? "" : " VALUE") << "  " << k.help << "\n";
        }
        out << "  --no-fairness  disable the fairness penalty\n  --config FILE  JSON config file\n";
        return 0;
    } catch (const CLI::ParseError& e) {
        err << "error: " << e.what() << "\n";
        return 2;
    } catch (const NonFiniteLoss& e) {
        err << "error: training diverged: " << e.what() << "\n";
        return 3;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return 1;
    }
}

} // namespace fairmeta
