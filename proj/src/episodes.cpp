#include "fairmeta/episodes.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>

namespace fairmeta {

std::vector<std::int64_t> Dataset::class_ids() const {
    std::set<std::int64_t> ids;
    for (const Example& e : examples) ids.insert(e.class_id);
    return {ids.begin(), ids.end()};
}

void Dataset::validate() const {
    std::unordered_set<std::uint64_t> uids;
    for (const Example& e : examples) {
        if (e.features.size() != feature_dim) {
            throw std::invalid_argument("dataset: example " + std::to_string(e.uid) + " has " +
                                        std::to_string(e.features.size()) + " features, expected " +
                                        std::to_string(feature_dim));
        }
        for (double v : e.features) {
            if (!std::isfinite(v)) throw std::invalid_argument("dataset: non-finite feature in example " +
                                                               std::to_string(e.uid));
        }
        if (e.s != 0 && e.s != 1) throw std::invalid_argument("dataset: s must be 0 or 1");
        if (!uids.insert(e.uid).second) throw std::invalid_argument("dataset: duplicate uid " + std::to_string(e.uid));
    }
}

void EpisodeSpec::validate() const {
    if (ways < 2) throw std::invalid_argument("episode: ways must be at least 2");
    if (shots < 1) throw std::invalid_argument("episode: shots must be at least 1");
    if (query_shots < 1) throw std::invalid_argument("episode: query_shots must be at least 1");
}

LabeledSet make_labeled_set(std::span<const Example> examples) {
    if (examples.empty()) throw std::invalid_argument("labeled set: no examples");
    const std::size_t dim = examples.front().features.size();
    std::vector<double> features;
    features.reserve(examples.size() * dim);
    std::vector<std::size_t> labels;
    std::vector<int> s;
    for (const Example& e : examples) {
        if (e.features.size() != dim) throw std::invalid_argument("labeled set: ragged features");
        features.insert(features.end(), e.features.begin(), e.features.end());
        labels.push_back(e.label);
        s.push_back(e.s);
    }
    return {Tensor::matrix(examples.size(), dim, std::move(features)), std::move(labels), ProtectedVector(std::move(s))};
}

// ---------------------------------------------------------------------------
// Synthetic families

const ClassDescriptor& TaskFamily::find(std::int64_t class_id) const {
    for (const ClassDescriptor& c : classes) {
        if (c.class_id == class_id) return c;
    }
    throw std::out_of_range("task family: unknown class " + std::to_string(class_id));
}

Example TaskFamily::draw(const ClassDescriptor& cls, std::mt19937_64& rng, std::uint64_t uid) const {
    std::bernoulli_distribution protected_draw(cls.protected_probability);
    std::normal_distribution<double> noise(0.0, noise_std);
    Example e;
    e.class_id = cls.class_id;
    e.uid = uid;
    e.s = protected_draw(rng) ? 1 : 0;
    e.features.resize(feature_dim);
    for (std::size_t k = 0; k < feature_dim; ++k) {
        e.features[k] = cls.mean[k] + noise(rng);
        if (e.s == 1) e.features[k] += bias_strength * cls.shift_direction[k];
    }
    return e;
}

TaskFamily generate_synthetic_family(std::size_t num_classes, std::size_t feature_dim, double bias_strength,
                                     std::uint64_t seed) {
    if (num_classes < 2) throw std::invalid_argument("synthetic family: need at least 2 classes");
    if (feature_dim < 2) throw std::invalid_argument("synthetic family: feature_dim must be at least 2");
    if (!(bias_strength >= 0.0 && bias_strength <= 1.0)) {
        throw std::invalid_argument("synthetic family: bias_strength must lie in [0, 1]");
    }
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> mean_draw(-3.0, 3.0);
    std::uniform_real_distribution<double> rate_draw(0.5 - 0.4 * bias_strength, 0.5 + 0.4 * bias_strength);
    std::normal_distribution<double> direction_draw(0.0, 1.0);

    TaskFamily family;
    family.feature_dim = feature_dim;
    family.bias_strength = bias_strength;
    family.seed = seed;
    for (std::size_t c = 0; c < num_classes; ++c) {
        ClassDescriptor cls;
        cls.class_id = static_cast<std::int64_t>(c);
        cls.mean.resize(feature_dim);
        for (double& m : cls.mean) m = mean_draw(rng);
        cls.protected_probability = bias_strength > 0.0 ? rate_draw(rng) : 0.5;
        double norm = 0.0;
        cls.shift_direction.resize(feature_dim);
        while (norm == 0.0) {
            norm = 0.0;
            for (double& v : cls.shift_direction) {
                v = direction_draw(rng);
                norm += v * v;
            }
        }
        norm = std::sqrt(norm);
        for (double& v : cls.shift_direction) v /= norm;
        family.classes.push_back(std::move(cls));
    }
    return family;
}

Dataset materialize(const TaskFamily& family, std::size_t per_class, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    Dataset out;
    out.feature_dim = family.feature_dim;
    out.examples.reserve(per_class * family.classes.size());
    std::uint64_t uid = 0;
    for (const ClassDescriptor& cls : family.classes) {
        for (std::size_t i = 0; i < per_class; ++i) out.examples.push_back(family.draw(cls, rng, uid++));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Episode sampling

namespace {

// First `count` entries of a Fisher-Yates shuffle of `items`.
template <typename T>
std::vector<T> choose_without_replacement(std::vector<T> items, std::size_t count, std::mt19937_64& rng) {
    for (std::size_t i = 0; i < count; ++i) {
        std::uniform_int_distribution<std::size_t> pick(i, items.size() - 1);
        std::swap(items[i], items[pick(rng)]);
    }
    items.resize(count);
    return items;
}

std::vector<std::int64_t> resolve_pool(std::span<const std::int64_t> class_pool, std::vector<std::int64_t> all,
                                       std::size_t ways) {
    std::vector<std::int64_t> pool = class_pool.empty() ? std::move(all)
                                                        : std::vector<std::int64_t>(class_pool.begin(), class_pool.end());
    if (pool.size() < ways) {
        throw std::invalid_argument("sample_episode: need " + std::to_string(ways) + " classes, only " +
                                    std::to_string(pool.size()) + " available");
    }
    return pool;
}

Episode assemble(const std::vector<std::int64_t>& chosen, std::vector<std::vector<Example>> per_class,
                 std::size_t shots) {
    Episode ep;
    for (std::size_t label = 0; label < chosen.size(); ++label) {
        ep.episode_labels.emplace(chosen[label], label);
        for (std::size_t i = 0; i < per_class[label].size(); ++i) {
            Example e = std::move(per_class[label][i]);
            e.label = label;
            (i < shots ? ep.support : ep.query).push_back(std::move(e));
        }
    }
    return ep;
}

} // namespace

Episode sample_episode(const Dataset& dataset, const EpisodeSpec& spec, std::uint64_t seed,
                       std::span<const std::int64_t> class_pool) {
    spec.validate();
    std::map<std::int64_t, std::vector<std::size_t>> by_class;
    for (std::size_t i = 0; i < dataset.examples.size(); ++i) by_class[dataset.examples[i].class_id].push_back(i);
    const std::vector<std::int64_t> pool = resolve_pool(class_pool, dataset.class_ids(), spec.ways);

    const std::size_t needed = spec.shots + spec.query_shots;
    for (std::int64_t id : pool) {
        auto it = by_class.find(id);
        const std::size_t have = it == by_class.end() ? 0 : it->second.size();
        if (have < needed) {
            throw std::invalid_argument("sample_episode: class " + std::to_string(id) + " has " +
                                        std::to_string(have) + " examples, need " + std::to_string(needed));
        }
    }

    std::mt19937_64 rng(seed);
    const std::vector<std::int64_t> chosen = choose_without_replacement(pool, spec.ways, rng);
    std::vector<std::vector<Example>> per_class;
    for (std::int64_t id : chosen) {
        std::vector<Example> picked;
        for (std::size_t idx : choose_without_replacement(by_class[id], needed, rng)) {
            picked.push_back(dataset.examples[idx]);
        }
        per_class.push_back(std::move(picked));
    }
    return assemble(chosen, std::move(per_class), spec.shots);
}

Episode sample_episode(const TaskFamily& family, const EpisodeSpec& spec, std::uint64_t seed,
                       std::span<const std::int64_t> class_pool) {
    spec.validate();
    std::vector<std::int64_t> all;
    for (const ClassDescriptor& c : family.classes) all.push_back(c.class_id);
    const std::vector<std::int64_t> pool = resolve_pool(class_pool, std::move(all), spec.ways);

    std::mt19937_64 rng(seed);
    const std::vector<std::int64_t> chosen = choose_without_replacement(pool, spec.ways, rng);
    const std::size_t needed = spec.shots + spec.query_shots;
    std::vector<std::vector<Example>> per_class;
    std::uint64_t uid = 0;
    for (std::int64_t id : chosen) {
        const ClassDescriptor& cls = family.find(id);
        std::vector<Example> drawn;
        for (std::size_t i = 0; i < needed; ++i) drawn.push_back(family.draw(cls, rng, uid++));
        per_class.push_back(std::move(drawn));
    }
    return assemble(chosen, std::move(per_class), spec.shots);
}

ClassSplit split_classes(std::vector<std::int64_t> class_ids, std::size_t ways) {
    std::sort(class_ids.begin(), class_ids.end());
    class_ids.erase(std::unique(class_ids.begin(), class_ids.end()), class_ids.end());
    const std::size_t n = class_ids.size();
    const std::size_t held = std::max(ways, n / 5);
    if (n < 2 * held + ways) {
        throw std::invalid_argument("class split: " + std::to_string(n) + " classes cannot give " +
                                    std::to_string(ways) + "-way train/val/test partitions (need " +
                                    std::to_string(2 * held + ways) + ")");
    }
    ClassSplit split;
    const auto train_end = class_ids.begin() + static_cast<std::ptrdiff_t>(n - 2 * held);
    const auto val_end = train_end + static_cast<std::ptrdiff_t>(held);
    split.train.assign(class_ids.begin(), train_end);
    split.val.assign(train_end, val_end);
    split.test.assign(val_end, class_ids.end());
    return split;
}

EpisodeSampler::EpisodeSampler(TaskFamily family, std::vector<std::int64_t> class_pool)
    : source_(std::move(family)), pool_(std::move(class_pool)) {}

EpisodeSampler::EpisodeSampler(Dataset dataset, std::vector<std::int64_t> class_pool)
    : source_(std::move(dataset)), pool_(std::move(class_pool)) {}

Episode EpisodeSampler::sample(const EpisodeSpec& spec, std::uint64_t seed) const {
    return std::visit([&](const auto& src) { return sample_episode(src, spec, seed, pool_); }, source_);
}

std::size_t EpisodeSampler::feature_dim() const {
    return std::visit([](const auto& src) { return src.feature_dim; }, source_);
}

// ---------------------------------------------------------------------------
// Dataset files

namespace {

constexpr std::string_view header_tag = "#fairmeta-dataset v1";

void append_double(std::string& out, double v) {
    char buf[64];
    const auto res = std::to_chars(buf, buf + sizeof buf, v);
    out.append(buf, res.ptr);
}

template <typename T>
T parse_field(std::string_view field, std::size_t line_no, const char* what) {
    T value{};
    const auto res = std::from_chars(field.data(), field.data() + field.size(), value);
    if (res.ec != std::errc{} || res.ptr != field.data() + field.size() || field.empty()) {
        throw std::runtime_error("dataset line " + std::to_string(line_no) + ": malformed " + what + " '" +
                                 std::string(field) + "'");
    }
    return value;
}

} // namespace

void write_dataset(const Dataset& dataset, std::ostream& out) {
    dataset.validate();
    out << header_tag << " dim=" << dataset.feature_dim << '\n';
    std::string line;
    for (const Example& e : dataset.examples) {
        line.clear();
        line += std::to_string(e.uid);
        line += ',';
        line += std::to_string(e.class_id);
        line += ',';
        line += std::to_string(e.s);
        for (double v : e.features) {
            line += ',';
            append_double(line, v);
        }
        line += '\n';
        out << line;
    }
    if (!out) throw std::runtime_error("dataset: write failed");
}

void write_dataset(const Dataset& dataset, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("dataset: cannot open " + path.string() + " for writing");
    write_dataset(dataset, out);
}

Dataset read_dataset(std::istream& in) {
    std::string line;
    if (!std::getline(in, line)) throw std::runtime_error("dataset line 1: missing header");
    if (line.rfind(header_tag, 0) != 0) throw std::runtime_error("dataset line 1: bad header '" + line + "'");

    Dataset ds;
    bool have_dim = false;
    std::istringstream header(line.substr(header_tag.size()));
    std::string token;
    while (header >> token) {
        const auto eq = token.find('=');
        const std::string key = token.substr(0, eq);
        if (key != "dim" || eq == std::string::npos) {
            throw std::runtime_error("dataset line 1: unknown header field '" + token + "'");
        }
        ds.feature_dim = parse_field<std::size_t>(std::string_view(token).substr(eq + 1), 1, "dim");
        have_dim = true;
    }
    if (!have_dim) throw std::runtime_error("dataset line 1: header lacks dim=<d>");

    std::unordered_set<std::uint64_t> uids;
    std::size_t line_no = 1;
    const std::size_t expected_fields = 3 + ds.feature_dim;
    std::vector<std::string_view> fields;
    while (std::getline(in, line)) {
        ++line_no;
        fields.clear();
        std::string_view rest(line);
        while (true) {
            const auto comma = rest.find(',');
            fields.push_back(rest.substr(0, comma));
            if (comma == std::string_view::npos) break;
            rest.remove_prefix(comma + 1);
        }
        if (fields.size() != expected_fields) {
            throw std::runtime_error("dataset line " + std::to_string(line_no) + ": expected " +
                                     std::to_string(expected_fields) + " fields, got " +
                                     std::to_string(fields.size()));
        }
        Example e;
        e.uid = parse_field<std::uint64_t>(fields[0], line_no, "uid");
        e.class_id = parse_field<std::int64_t>(fields[1], line_no, "class_id");
        e.s = parse_field<int>(fields[2], line_no, "s");
        if (e.s != 0 && e.s != 1) {
            throw std::runtime_error("dataset line " + std::to_string(line_no) + ": s must be 0 or 1, got " +
                                     std::string(fields[2]));
        }
        e.features.reserve(ds.feature_dim);
        for (std::size_t k = 0; k < ds.feature_dim; ++k) {
            const double v = parse_field<double>(fields[3 + k], line_no, "feature");
            if (!std::isfinite(v)) {
                throw std::runtime_error("dataset line " + std::to_string(line_no) + ": non-finite feature");
            }
            e.features.push_back(v);
        }
        if (!uids.insert(e.uid).second) {
            throw std::runtime_error("dataset line " + std::to_string(line_no) + ": duplicate uid " +
                                     std::to_string(e.uid));
        }
        ds.examples.push_back(std::move(e));
    }
    return ds;
}

Dataset read_dataset(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("dataset: cannot open " + path.string());
    return read_dataset(in);
}

} // namespace fairmeta
