#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "fairmeta/episodes.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <set>
#include <sstream>

using namespace fairmeta;

namespace {

Dataset tiny_dataset(std::size_t classes, std::size_t per_class) {
    Dataset ds;
    ds.feature_dim = 2;
    std::uint64_t uid = 0;
    for (std::size_t c = 0; c < classes; ++c) {
        for (std::size_t k = 0; k < per_class; ++k) {
            Example e;
            e.features = {static_cast<double>(c), static_cast<double>(k) * 0.5};
            e.class_id = static_cast<std::int64_t>(10 + c);
            e.s = static_cast<int>(k % 2);
            e.uid = uid++;
            ds.examples.push_back(e);
        }
    }
    return ds;
}

std::multiset<std::uint64_t> uids(const Episode& ep) {
    std::multiset<std::uint64_t> out;
    for (const auto& e : ep.support) out.insert(e.uid);
    for (const auto& e : ep.query) out.insert(e.uid);
    return out;
}

} // namespace

TEST_CASE("episode sizes") {
    const TaskFamily family = generate_synthetic_family(10, 3, 0.5, 1);
    const Dataset ds = materialize(family, 30, 2);
    const Episode ep = sample_episode(ds, EpisodeSpec{5, 5, 15}, 3);
    CHECK(ep.support.size() == 25);
    CHECK(ep.query.size() == 75);
    CHECK(ep.ways() == 5);
    const Episode fresh = sample_episode(family, EpisodeSpec{5, 5, 15}, 3);
    CHECK(fresh.support.size() == 25);
    CHECK(fresh.query.size() == 75);
}

TEST_CASE("exhausting a tiny dataset gives the unique partition") {
    const Dataset ds = tiny_dataset(2, 2);
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        const Episode ep = sample_episode(ds, EpisodeSpec{2, 1, 1}, seed);
        CHECK(uids(ep) == std::multiset<std::uint64_t>{0, 1, 2, 3});
        std::set<std::int64_t> support_classes;
        for (const auto& e : ep.support) support_classes.insert(e.class_id);
        CHECK(support_classes.size() == 2);
    }
}

TEST_CASE("sampling is deterministic per seed") {
    const Dataset ds = materialize(generate_synthetic_family(8, 2, 0.3, 5), 20, 6);
    const EpisodeSpec spec{3, 2, 4};
    CHECK(uids(sample_episode(ds, spec, 42)) == uids(sample_episode(ds, spec, 42)));
    CHECK(uids(sample_episode(ds, spec, 42)) != uids(sample_episode(ds, spec, 43)));
    const TaskFamily family = generate_synthetic_family(8, 2, 0.3, 5);
    const Episode a = sample_episode(family, spec, 9), b = sample_episode(family, spec, 9);
    CHECK(a.support == b.support);
    CHECK(a.query == b.query);
}

TEST_CASE("insufficient data is reported with counts") {
    const Dataset ds = tiny_dataset(3, 4);
    CHECK_THROWS_WITH_AS(sample_episode(ds, EpisodeSpec{4, 1, 1}, 0), doctest::Contains("only 3"),
                         std::invalid_argument);
    CHECK_THROWS_WITH_AS(sample_episode(ds, EpisodeSpec{2, 3, 2}, 0), doctest::Contains("has 4"),
                         std::invalid_argument);
    CHECK_THROWS_AS(sample_episode(ds, EpisodeSpec{1, 1, 1}, 0), std::invalid_argument);
    CHECK_THROWS_AS(sample_episode(ds, EpisodeSpec{2, 0, 1}, 0), std::invalid_argument);
}

TEST_CASE("episode structure holds over many samples") {
    const TaskFamily family = generate_synthetic_family(12, 4, 0.8, 17);
    const Dataset ds = materialize(family, 25, 18);
    const EpisodeSpec spec{4, 3, 5};
    for (std::uint64_t seed = 0; seed < 1000; ++seed) {
        const Episode ep = sample_episode(ds, spec, seed);
        std::set<std::uint64_t> support_ids, query_ids;
        std::map<std::int64_t, std::size_t> support_count, query_count;
        for (const auto& e : ep.support) {
            support_ids.insert(e.uid);
            ++support_count[e.class_id];
            CHECK(ep.episode_labels.at(e.class_id) == e.label);
        }
        for (const auto& e : ep.query) {
            query_ids.insert(e.uid);
            ++query_count[e.class_id];
            CHECK(ep.episode_labels.at(e.class_id) == e.label);
        }
        for (std::uint64_t id : support_ids) CHECK(query_ids.count(id) == 0);
        CHECK(support_ids.size() == ep.support.size());
        CHECK(support_count.size() == 4);
        for (const auto& [cls, n] : support_count) CHECK(n == 3);
        for (const auto& [cls, n] : query_count) CHECK(n == 5);
        std::set<std::size_t> labels;
        for (const auto& [cls, label] : ep.episode_labels) labels.insert(label);
        CHECK(labels == std::set<std::size_t>{0, 1, 2, 3});
    }
}

TEST_CASE("synthetic family parameters") {
    const TaskFamily unbiased = generate_synthetic_family(6, 3, 0.0, 2);
    for (const auto& c : unbiased.classes) {
        CHECK(c.protected_probability == 0.5);
        CHECK(c.mean.size() == 3);
        for (double m : c.mean) {
            CHECK(m >= -3.0);
            CHECK(m <= 3.0);
        }
    }
    for (std::uint64_t seed = 0; seed < 200; ++seed) {
        const TaskFamily biased = generate_synthetic_family(2, 2, 1.0, seed);
        for (const auto& c : biased.classes) {
            CHECK(c.protected_probability >= 0.1);
            CHECK(c.protected_probability <= 0.9);
            double norm = 0.0;
            for (double v : c.shift_direction) norm += v * v;
            CHECK(std::fabs(std::sqrt(norm) - 1.0) <= 1e-12);
        }
    }
    const TaskFamily a = generate_synthetic_family(5, 2, 0.4, 77), b = generate_synthetic_family(5, 2, 0.4, 77);
    REQUIRE(a.classes.size() == b.classes.size());
    for (std::size_t i = 0; i < a.classes.size(); ++i) {
        CHECK(a.classes[i].mean == b.classes[i].mean);
        CHECK(a.classes[i].shift_direction == b.classes[i].shift_direction);
        CHECK(a.classes[i].protected_probability == b.classes[i].protected_probability);
    }
    CHECK_THROWS_AS(generate_synthetic_family(1, 2, 0.1, 0), std::invalid_argument);
    CHECK_THROWS_AS(generate_synthetic_family(3, 1, 0.1, 0), std::invalid_argument);
    CHECK_THROWS_AS(generate_synthetic_family(3, 2, 1.5, 0), std::invalid_argument);
}

TEST_CASE("empirical protected rate converges to the class probability") {
    const TaskFamily family = generate_synthetic_family(4, 2, 1.0, 31);
    const std::size_t n = 4000;
    const Dataset ds = materialize(family, n, 32);
    for (const auto& c : family.classes) {
        double hits = 0.0;
        for (const auto& e : ds.examples) {
            if (e.class_id == c.class_id) hits += e.s;
        }
        const double p = c.protected_probability;
        const double se = std::sqrt(p * (1 - p) / static_cast<double>(n));
        CHECK(std::fabs(hits / static_cast<double>(n) - p) <= 3 * se);
    }
}

TEST_CASE("best-response classifier shows no covariance without bias") {
    // Bayes posterior over the episode's classes using the true cluster means.
    const TaskFamily family = generate_synthetic_family(10, 2, 0.0, 4);
    const EpisodeSpec spec{5, 1, 15};
    std::vector<double> values;
    for (std::uint64_t seed = 0; seed < 200; ++seed) {
        const Episode ep = sample_episode(family, spec, seed);
        std::vector<const ClassDescriptor*> by_label(spec.ways);
        for (const auto& [cls, label] : ep.episode_labels) by_label[label] = &family.find(cls);
        double s_mean = 0.0;
        for (const auto& e : ep.query) s_mean += e.s;
        s_mean /= static_cast<double>(ep.query.size());
        double cov = 0.0;
        for (const auto& e : ep.query) {
            std::vector<double> logp(spec.ways);
            for (std::size_t k = 0; k < spec.ways; ++k) {
                double d2 = 0.0;
                for (std::size_t j = 0; j < e.features.size(); ++j) {
                    const double diff = e.features[j] - by_label[k]->mean[j];
                    d2 += diff * diff;
                }
                logp[k] = -d2 / (2 * family.noise_std * family.noise_std);
            }
            const double top = *std::max_element(logp.begin(), logp.end());
            double z = 0.0;
            for (double v : logp) z += std::exp(v - top);
            cov += (e.s - s_mean) * (1.0 / z);
        }
        values.push_back(cov / static_cast<double>(ep.query.size()));
    }
    double mean = 0.0;
    for (double v : values) mean += v;
    mean /= static_cast<double>(values.size());
    double var = 0.0;
    for (double v : values) var += (v - mean) * (v - mean);
    var /= static_cast<double>(values.size() - 1);
    const double se = std::sqrt(var / static_cast<double>(values.size()));
    CHECK(std::fabs(mean) <= 3 * se);
}

TEST_CASE("labeled sets keep s out of the features") {
    const Dataset ds = tiny_dataset(2, 3);
    const LabeledSet set = make_labeled_set(ds.examples);
    CHECK(set.features.shape() == Shape{6, 2});
    CHECK(set.size() == 6);
    CHECK(set.s.size() == 6);
    CHECK(set.s[1] == 1);
}

TEST_CASE("class split") {
    std::vector<std::int64_t> ids(20);
    for (std::size_t i = 0; i < ids.size(); ++i) ids[i] = static_cast<std::int64_t>(i);
    const ClassSplit split = split_classes(ids, 4);
    CHECK(split.val.size() == 4);
    CHECK(split.test.size() == 4);
    CHECK(split.train.size() == 12);
    std::set<std::int64_t> all(split.train.begin(), split.train.end());
    all.insert(split.val.begin(), split.val.end());
    all.insert(split.test.begin(), split.test.end());
    CHECK(all.size() == 20);
    CHECK_THROWS_AS(split_classes({0, 1, 2, 3, 4}, 2), std::invalid_argument);
}

TEST_CASE("sampler restricts classes to its pool") {
    const TaskFamily family = generate_synthetic_family(10, 2, 0.5, 3);
    const EpisodeSampler sampler(family, {0, 1, 2});
    for (std::uint64_t seed = 0; seed < 50; ++seed) {
        const Episode ep = sampler.sample(EpisodeSpec{2, 1, 2}, seed);
        for (const auto& [cls, label] : ep.episode_labels) CHECK(cls <= 2);
    }
    CHECK(sampler.feature_dim() == 2);
}

TEST_CASE("dataset files round-trip") {
    Dataset empty;
    empty.feature_dim = 3;
    std::stringstream a;
    write_dataset(empty, a);
    CHECK(a.str() == "#fairmeta-dataset v1 dim=3\n");
    CHECK(read_dataset(a) == empty);

    Dataset three = tiny_dataset(1, 3);
    three.examples[1].features = {0.1, -1.0 / 3.0};
    three.examples[2].features = {1e-300, 123456789.125};
    std::stringstream b;
    write_dataset(three, b);
    const Dataset back = read_dataset(b);
    CHECK(back == three);

    const Dataset big = materialize(generate_synthetic_family(5, 4, 0.7, 8), 20, 9);
    const auto path = std::filesystem::temp_directory_path() / "fairmeta_roundtrip.csv";
    write_dataset(big, path);
    CHECK(read_dataset(path) == big);
    std::filesystem::remove(path);
}

TEST_CASE("malformed dataset files are rejected with a line number") {
    std::stringstream bad_s("#fairmeta-dataset v1 dim=2\n0,1,0,0.5,0.5\n1,1,2,0.1,0.2\n");
    CHECK_THROWS_WITH(read_dataset(bad_s), doctest::Contains("line 3"));
    std::stringstream short_row("#fairmeta-dataset v1 dim=2\n0,1,0,0.5\n");
    CHECK_THROWS_WITH(read_dataset(short_row), doctest::Contains("line 2"));
    std::stringstream unknown("#fairmeta-dataset v1 dim=2 color=red\n");
    CHECK_THROWS_WITH(read_dataset(unknown), doctest::Contains("color"));
    std::stringstream dup("#fairmeta-dataset v1 dim=2\n0,1,0,0.5,0.5\n0,1,1,0.1,0.2\n");
    CHECK_THROWS_WITH(read_dataset(dup), doctest::Contains("duplicate"));
    std::stringstream nonnum("#fairmeta-dataset v1 dim=2\n0,1,0,abc,0.5\n");
    CHECK_THROWS_WITH(read_dataset(nonnum), doctest::Contains("line 2"));
    std::stringstream noheader("0,1,0,0.5,0.5\n");
    CHECK_THROWS(read_dataset(noheader));
}
