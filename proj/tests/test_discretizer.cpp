#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <random>

#include "flowlm/discretizer.hpp"
#include "flowlm/errors.hpp"
#include "flowlm/synthetic.hpp"
#include "support.hpp"

using namespace flowlm;

namespace {

FlowRecord record(double duration, const std::string& proto = "TCP", const std::string& flags = ".AP.SF") {
    FlowRecord r;
    r.duration = duration;
    r.packets = static_cast<std::uint64_t>(duration);
    r.bytes = static_cast<std::uint64_t>(duration * 10);
    r.src_port = static_cast<std::uint16_t>(duration);
    r.dst_port = static_cast<std::uint16_t>(duration);
    r.proto = proto;
    r.flags = flags;
    return r;
}

// Independent quantile: sorted values, position q*(n-1), linear interpolation.
double oracle_quantile(std::vector<double> v, double q) {
    std::sort(v.begin(), v.end());
    const double pos = q * static_cast<double>(v.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const auto hi = std::min(lo + 1, v.size() - 1);
    return v[lo] + (pos - static_cast<double>(lo)) * (v[hi] - v[lo]);
}

// Brute-force bin: 3 + number of edges strictly below v.
std::int32_t oracle_bucket(const std::vector<double>& edges, double v) {
    std::int32_t id = kFirstDataId;
    for (double e : edges) id += v > e ? 1 : 0;
    return id;
}

}  // namespace

TEST_CASE("quantile edges of 1..8 with four bins") {
    FlowTable t;
    for (int v = 1; v <= 8; ++v) t.records.push_back(record(v));
    const auto m = fit_discretizer(t, {4});
    const auto& edges = m.edges(Feature::duration);
    REQUIRE(edges.size() == 3);
    std::vector<double> values{1, 2, 3, 4, 5, 6, 7, 8};
    CHECK(edges[0] == oracle_quantile(values, 0.25));
    CHECK(edges[1] == oracle_quantile(values, 0.50));
    CHECK(edges[2] == oracle_quantile(values, 0.75));
    CHECK(edges == std::vector<double>{2.75, 4.5, 6.25});
    const std::vector<std::int32_t> expected{3, 3, 4, 4, 5, 5, 6, 6};
    for (int v = 1; v <= 8; ++v) {
        CHECK(transform_flow(record(v), m).ids[static_cast<std::size_t>(Feature::duration)] == expected[v - 1]);
    }
}

TEST_CASE("constant feature collapses to a single data bin") {
    FlowTable t;
    for (int i = 0; i < 10; ++i) t.records.push_back(record(7));
    const auto m = fit_discretizer(t, {16});
    CHECK(m.edges(Feature::duration).empty());
    CHECK(m.vocab_sizes()[static_cast<std::size_t>(Feature::duration)] == 4);
    CHECK(transform_flow(record(7), m).ids[static_cast<std::size_t>(Feature::duration)] == 3);
    CHECK(transform_flow(record(1000), m).ids[static_cast<std::size_t>(Feature::duration)] == 3);
}

TEST_CASE("protoflags enumerate in first-occurrence order with UNK for novelty") {
    FlowTable t;
    t.records = {record(1, "TCP", ".AP.SF"), record(2, "UDP", "......"), record(3, "TCP", ".AP.SF")};
    const auto m = fit_discretizer(t, {2});
    CHECK(m.protoflags() == std::vector<std::string>{"TCP|.AP.SF", "UDP|......"});
    CHECK(m.protoflags_id("TCP|.AP.SF") == 3);
    CHECK(m.protoflags_id("UDP|......") == 4);
    CHECK(m.vocab_sizes()[static_cast<std::size_t>(Feature::protoflags)] == 5);
    CHECK(transform_flow(record(1, "GRE", "......"), m).ids[static_cast<std::size_t>(Feature::protoflags)] == kUnkId);
}

TEST_CASE("fit preconditions") {
    CHECK_THROWS_AS(fit_discretizer(FlowTable{}, {32}), EmptyFitSet);
    FlowTable t;
    t.records.push_back(record(1));
    CHECK_THROWS(fit_discretizer(t, {1}));
}

TEST_CASE("bucketing matches a brute-force loop, ties go low, ids stay in range") {
    std::mt19937_64 rng(9);
    std::vector<double> data;
    std::uniform_real_distribution<double> u(0, 100);
    for (int i = 0; i < 400; ++i) data.push_back(std::round(u(rng)));
    std::sort(data.begin(), data.end());
    std::vector<double> edges;
    for (int k = 1; k < 10; ++k) {
        const double e = interpolated_quantile(data, k / 10.0);
        CHECK(e == doctest::Approx(oracle_quantile(data, k / 10.0)).epsilon(1e-15));
        if (edges.empty() || e > edges.back()) edges.push_back(e);
    }
    for (int i = 0; i < 2000; ++i) {
        const double v = std::round(u(rng) * 1.2 - 10);
        CHECK(bucketize(edges, v) == oracle_bucket(edges, v));
    }
    for (double e : edges) CHECK(bucketize(edges, e) == oracle_bucket(edges, e));
    CHECK(bucketize(edges, -1e9) == kFirstDataId);
}

TEST_CASE("transform is monotone and in range on synthetic traffic") {
    const auto t = synthetic_capture(DomainTag::cidds1_internal,
                                     synthetic_composition(DomainTag::cidds1_internal, 3000), 2);
    const auto m = fit_discretizer(t, {32});
    const auto tokens = transform_table(t, m);
    REQUIRE(tokens.size() == t.size());
    for (std::size_t i = 0; i < t.size(); ++i) {
        CHECK(tokens.flows[i] == transform_flow(t.records[i], m));
        CHECK(tokens.flows[i].order_index == t.records[i].order_index);
        for (std::size_t f = 0; f < kNumFeatures; ++f) {
            CHECK(tokens.flows[i].ids[f] >= kFirstDataId);
            CHECK(tokens.flows[i].ids[f] < m.vocab_sizes()[f]);
        }
    }
    std::vector<std::size_t> idx(t.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    std::sort(idx.begin(), idx.end(), [&](auto a, auto b) { return t.records[a].bytes < t.records[b].bytes; });
    const auto bytes = static_cast<std::size_t>(Feature::bytes);
    for (std::size_t i = 1; i < idx.size(); ++i) {
        CHECK(tokens.flows[idx[i - 1]].ids[bytes] <= tokens.flows[idx[i]].ids[bytes]);
    }
    CHECK(transform_table(FlowTable{}, m).empty());
}

TEST_CASE("save and load reproduce the model and its transforms") {
    testing::TempDir dir("disc");
    const auto t = synthetic_capture(DomainTag::cidds2, synthetic_composition(DomainTag::cidds2, 2000), 4);
    const auto m = fit_discretizer(t, {32});
    const auto path = dir.file("d.json");
    save_discretizer(m, path);
    const auto back = load_discretizer(path);
    CHECK(back == m);
    CHECK(back.fingerprint() == m.fingerprint());
    const auto probe = synthetic_capture(DomainTag::cidds1_internal,
                                         synthetic_composition(DomainTag::cidds1_internal, 1000), 8);
    for (const auto& r : probe.records) CHECK(transform_flow(r, back) == transform_flow(r, m));

    const auto j = nlohmann::json::parse(testing::read_file(path));
    CHECK(j.at("version") == 1);

    const auto text = testing::read_file(path);
    testing::write_file(dir.file("cut.json"), text.substr(0, text.size() / 2));
    CHECK_THROWS_AS(load_discretizer(dir.file("cut.json")), Error);
    auto wrong = j;
    wrong["version"] = 2;
    testing::write_file(dir.file("v2.json"), wrong.dump());
    CHECK_THROWS_AS(load_discretizer(dir.file("v2.json")), FormatVersionMismatch);
    CHECK_THROWS_AS(load_discretizer(dir.file("nope.json")), IoError);
}
