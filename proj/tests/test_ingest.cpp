#include <doctest.h>

#include <algorithm>
#include <map>

#include "flowlm/errors.hpp"
#include "flowlm/ingest.hpp"
#include "flowlm/synthetic.hpp"
#include "support.hpp"

using namespace flowlm;
using testing::cidds_row;

namespace {

FlowRecord parse_one(const std::string& row, DomainTag domain = DomainTag::cidds1_internal) {
    const auto columns = ColumnIndex::resolve(split_csv_line(testing::kCiddsHeader), CsvSchema{});
    return parse_flow_record(split_csv_line(row), columns, 0, domain, 1);
}

}  // namespace

TEST_CASE("byte counts with an M suffix are scaled to whole bytes") {
    const auto r = parse_one(cidds_row("1.5", "TCP  ", "80", "40000", "900", "1.2 M", ".AP.SF", "normal", "---"));
    CHECK(r.bytes == 1200000);
    CHECK(r.proto == "TCP");
    CHECK(r.duration == doctest::Approx(1.5));
}

TEST_CASE("plain numeric fields parse directly") {
    const auto r = parse_one(cidds_row("0.000", "UDP", "53", "5353", "1", "46", "......", "normal", "---"));
    CHECK(r.duration == 0.0);
    CHECK(r.packets == 1);
    CHECK(r.bytes == 46);
    CHECK(r.src_port == 53);
    CHECK(r.dst_port == 5353);
}

TEST_CASE("ICMP type.code ports floor to the integer part") {
    const auto r = parse_one(cidds_row("0.0", "ICMP", "0", "8.0", "1", "84", "......", "attacker", "pingScan"));
    CHECK(r.dst_port == 8);
    CHECK(r.fine_label == "pingScan");
}

TEST_CASE("a header without Dst Pt is rejected as malformed") {
    std::string header = testing::kCiddsHeader;
    header.replace(header.find("Dst Pt"), 6, "Port");
    CHECK_THROWS_AS(ColumnIndex::resolve(split_csv_line(header), CsvSchema{}), MalformedRow);
}

TEST_CASE("unparseable numbers and short rows are malformed") {
    CHECK_THROWS_AS(parse_one(cidds_row("x", "TCP", "1", "2", "1", "40", "......", "normal", "---")), MalformedRow);
    CHECK_THROWS_AS(parse_one(cidds_row("0.1", "TCP", "1", "2", "1.5", "40", "......", "normal", "---")),
                    MalformedRow);
    CHECK_THROWS_AS(parse_one("2017-03-15,0.1,TCP"), MalformedRow);
}

TEST_CASE("quoted CSV fields keep embedded commas") {
    const auto fields = split_csv_line(R"(a,"b,c",  d ,"e""f")");
    REQUIRE(fields.size() == 4);
    CHECK(fields[1] == "b,c");
    CHECK(fields[3] == "e\"f");
}

TEST_CASE("label mapping per domain") {
    CHECK(map_label("normal", "---", DomainTag::cidds1_internal) ==
          std::pair<BinaryLabel, std::string>{BinaryLabel::benign, "normal"});
    CHECK(map_label("suspicious", "", DomainTag::cidds1_external) ==
          std::pair<BinaryLabel, std::string>{BinaryLabel::malicious, "suspicious"});
    CHECK(map_label("unknown", "---", DomainTag::cidds1_external) ==
          std::pair<BinaryLabel, std::string>{BinaryLabel::benign, "unknown"});
    CHECK(map_label("attacker", "dos", DomainTag::cidds1_internal) ==
          std::pair<BinaryLabel, std::string>{BinaryLabel::malicious, "dos"});
    CHECK(map_label("victim", "portScan", DomainTag::cidds2).first == BinaryLabel::malicious);
    CHECK_THROWS_AS(map_label("martian", "---", DomainTag::cidds1_internal), UnknownLabel);
    CHECK_THROWS_AS(map_label("suspicious", "---", DomainTag::cidds1_internal), UnknownLabel);
}

TEST_CASE("loading a file keeps row order and counts skipped rows") {
    testing::TempDir dir("ingest");
    const auto good = dir.file("good.csv");
    testing::write_file(good, std::string(testing::kCiddsHeader) + "\n" +
                                  cidds_row("0.1", "TCP", "1", "80", "3", "120", ".AP.SF", "normal", "---") + "\n" +
                                  cidds_row("0.0", "TCP", "2", "80", "1", "40", "....S.", "attacker", "dos") + "\n" +
                                  cidds_row("0.2", "UDP", "3", "53", "1", "70", "......", "normal", "---") + "\n");
    const auto t = load_flow_table(good, DomainTag::cidds1_internal, true);
    REQUIRE(t.size() == 3);
    for (std::size_t i = 0; i < 3; ++i) CHECK(t.records[i].order_index == static_cast<std::int64_t>(i));
    CHECK(t.records[1].binary_label == BinaryLabel::malicious);

    const auto bad = dir.file("bad.csv");
    testing::write_file(bad, std::string(testing::kCiddsHeader) + "\n" +
                                 cidds_row("0.1", "TCP", "1", "80", "3", "120", ".AP.SF", "normal", "---") + "\n" +
                                 cidds_row("oops", "TCP", "2", "80", "1", "40", "....S.", "attacker", "dos") + "\n" +
                                 cidds_row("0.2", "UDP", "3", "53", "1", "70", "......", "normal", "---") + "\n");
    const auto lenient = load_flow_table(bad, DomainTag::cidds1_internal, false);
    CHECK(lenient.size() == 2);
    CHECK(lenient.skipped_rows == 1);
    CHECK(lenient.records[1].order_index == 1);
    try {
        load_flow_table(bad, DomainTag::cidds1_internal, true);
        FAIL("strict load accepted a bad row");
    } catch (const MalformedRow& e) {
        CHECK(e.row() == 2);
    }

    const auto empty = dir.file("empty.csv");
    testing::write_file(empty, std::string(testing::kCiddsHeader) + "\n");
    CHECK(load_flow_table(empty, DomainTag::cidds1_internal, true).empty());
    CHECK_THROWS_AS(load_flow_table(dir.file("missing.csv"), DomainTag::cidds1_internal, true), IoError);
}

TEST_CASE("dataset statistics") {
    FlowTable empty;
    CHECK(dataset_stats(empty).total == 0);
    CHECK(dataset_stats(empty).counts.empty());

    FlowTable t;
    for (const auto* label : {"normal", "normal", "dos"}) {
        FlowRecord r;
        r.fine_label = label;
        r.binary_label = std::string(label) == "dos" ? BinaryLabel::malicious : BinaryLabel::benign;
        t.records.push_back(r);
    }
    const auto s = dataset_stats(t);
    CHECK(s.total == 3);
    CHECK(s.counts.at("normal") == 2);
    CHECK(s.counts.at("dos") == 1);
    CHECK(s.benign == 2);
    CHECK(s.malicious == 1);
}

TEST_CASE("split presets carry the published compositions") {
    const auto internal = split_preset("cidds1-internal", 0);
    CHECK(internal.set_size() == 20000);
    CHECK(internal.num_sets == 10);
    const std::map<std::string, std::size_t> expected{
        {"normal", 10000}, {"dos", 9000}, {"portScan", 935}, {"pingScan", 45}, {"bruteForce", 20}};
    CHECK(std::map<std::string, std::size_t>(internal.composition.begin(), internal.composition.end()) == expected);
    CHECK(split_preset("cidds1-external", 0).set_size() == 20000);
    CHECK(split_preset("cidds2", 0).set_size() == 20000);
}

TEST_CASE("splits have exact composition, source order, and are seeded") {
    const auto source = synthetic_capture(
        DomainTag::cidds1_internal,
        {{"normal", 600}, {"dos", 300}, {"portScan", 60}, {"pingScan", 10}, {"bruteForce", 8}}, 3);
    SplitSpec spec;
    spec.composition = {{"normal", 100}, {"dos", 90}, {"portScan", 9}, {"pingScan", 2}, {"bruteForce", 4}};
    spec.num_sets = 3;
    spec.seed = 11;
    const auto sets = make_eval_splits(source, spec);
    REQUIRE(sets.size() == 3);
    for (const auto& s : sets) {
        const auto stats = dataset_stats(s);
        for (const auto& [label, count] : spec.composition) CHECK(stats.counts.at(label) == count);
        CHECK(std::is_sorted(s.records.begin(), s.records.end(),
                             [](const auto& a, const auto& b) { return a.order_index < b.order_index; }));
    }
    CHECK(sets[0].records.front().order_index != sets[1].records.front().order_index);
    const auto again = make_eval_splits(source, spec);
    CHECK(again[2].raw_rows == sets[2].raw_rows);

    spec.composition = {{"bruteForce", 50}};
    CHECK_THROWS_AS(make_eval_splits(source, spec), InsufficientLabel);
}

TEST_CASE("split CSVs reload with the same labels") {
    testing::TempDir dir("splitcsv");
    const auto source = synthetic_capture(DomainTag::cidds1_external, {{"unknown", 50}, {"suspicious", 40}}, 5);
    const auto path = dir.file("s.csv");
    write_split_csv(source, path);
    const auto back = load_flow_table(path, DomainTag::cidds1_external, true);
    REQUIRE(back.size() == source.size());
    for (std::size_t i = 0; i < back.size(); ++i) {
        CHECK(back.records[i].binary_label == source.records[i].binary_label);
        CHECK(back.records[i].fine_label == source.records[i].fine_label);
        CHECK(back.records[i].bytes == source.records[i].bytes);
    }
}

TEST_CASE("label totality on synthetic captures") {
    for (auto domain : {DomainTag::cidds1_internal, DomainTag::cidds1_external, DomainTag::cidds2}) {
        const auto t = synthetic_capture(domain, synthetic_composition(domain, 2000), 1);
        const auto s = dataset_stats(t);
        std::size_t sum = 0;
        for (const auto& [label, c] : s.counts) sum += c;
        CHECK(sum == t.size());
        CHECK(s.benign + s.malicious == t.size());
        for (std::size_t i = 0; i < t.size(); ++i) CHECK(t.records[i].order_index == static_cast<std::int64_t>(i));
    }
}
