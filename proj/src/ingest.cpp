#include "flowlm/ingest.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <limits>

#include "flowlm/errors.hpp"
#include "flowlm/random.hpp"

namespace flowlm {

namespace {

std::string_view trim(std::string_view s) {
    const auto* ws = " \t\r\n";
    const auto first = s.find_first_not_of(ws);
    if (first == std::string_view::npos) {
        return {};
    }
    const auto last = s.find_last_not_of(ws);
    return s.substr(first, last - first + 1);
}

std::optional<double> parse_double(std::string_view s) {
    s = trim(s);
    if (s.empty()) {
        return std::nullopt;
    }
    if (s.front() == '+') {
        s.remove_prefix(1);
    }
    double v = 0.0;
    const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc{} || ptr != s.data() + s.size() || !std::isfinite(v)) {
        return std::nullopt;
    }
    return v;
}

// Byte counts in CIDDS exports switch to "<decimal> M" above a million.
std::optional<std::uint64_t> parse_byte_count(std::string_view s) {
    s = trim(s);
    double scale = 1.0;
    if (!s.empty() && (s.back() == 'M' || s.back() == 'm')) {
        scale = 1e6;
        s = trim(s.substr(0, s.size() - 1));
    }
    auto v = parse_double(s);
    if (!v || *v < 0.0) {
        return std::nullopt;
    }
    return static_cast<std::uint64_t>(std::llround(*v * scale));
}

std::optional<std::uint64_t> parse_count(std::string_view s) {
    auto v = parse_double(s);
    if (!v || *v < 0.0 || *v != std::floor(*v)) {
        return std::nullopt;
    }
    return static_cast<std::uint64_t>(*v);
}

// ICMP rows carry "type.code" in the port column, so ports are parsed as reals
// and truncated.
std::optional<std::uint16_t> parse_port(std::string_view s) {
    auto v = parse_double(s);
    if (!v || *v < 0.0 || *v > 65535.0) {
        return std::nullopt;
    }
    return static_cast<std::uint16_t>(std::floor(*v));
}

bool is_no_attack(std::string_view attack_type) {
    return attack_type.empty() || attack_type == "---";
}

std::size_t require_column(const std::vector<std::string>& header, const std::string& name) {
    for (std::size_t i = 0; i < header.size(); ++i) {
        if (trim(header[i]) == name) {
            return i;
        }
    }
    throw MalformedRow(0, "header lacks column '" + name + "'");
}

std::optional<std::size_t> find_column(const std::vector<std::string>& header,
                                       const std::string& name) {
    for (std::size_t i = 0; i < header.size(); ++i) {
        if (trim(header[i]) == name) {
            return i;
        }
    }
    return std::nullopt;
}

}  // namespace

std::string_view to_string(BinaryLabel label) {
    return label == BinaryLabel::benign ? "benign" : "malicious";
}

std::string_view to_string(DomainTag tag) {
    switch (tag) {
        case DomainTag::cidds1_internal: return "cidds1_internal";
        case DomainTag::cidds1_external: return "cidds1_external";
        case DomainTag::cidds2: return "cidds2";
    }
    return "unknown";
}

BinaryLabel parse_binary_label(std::string_view s) {
    s = trim(s);
    if (s == "benign" || s == "0") {
        return BinaryLabel::benign;
    }
    if (s == "malicious" || s == "1") {
        return BinaryLabel::malicious;
    }
    throw UnknownLabel("unrecognised binary label '" + std::string(s) + "'");
}

DomainTag parse_domain_tag(std::string_view s) {
    if (s == "cidds1_internal" || s == "cidds1-internal") return DomainTag::cidds1_internal;
    if (s == "cidds1_external" || s == "cidds1-external") return DomainTag::cidds1_external;
    if (s == "cidds2") return DomainTag::cidds2;
    throw Error(ErrorKind::io, "unknown domain '" + std::string(s) +
                                   "' (expected cidds1_internal, cidds1_external or cidds2)");
}

CsvSchema CsvSchema::from_json(const nlohmann::json& renames) {
    CsvSchema s;
    const auto set = [&](const char* key, std::string& field) {
        if (renames.contains(key)) {
            field = renames.at(key).get<std::string>();
        }
    };
    set("duration", s.duration);
    set("proto", s.proto);
    set("src_port", s.src_port);
    set("dst_port", s.dst_port);
    set("packets", s.packets);
    set("bytes", s.bytes);
    set("flags", s.flags);
    set("class_label", s.class_label);
    set("attack_type", s.attack_type);
    return s;
}

ColumnIndex ColumnIndex::resolve(const std::vector<std::string>& header, const CsvSchema& schema) {
    ColumnIndex c{};
    c.duration = require_column(header, schema.duration);
    c.proto = require_column(header, schema.proto);
    c.src_port = require_column(header, schema.src_port);
    c.dst_port = require_column(header, schema.dst_port);
    c.packets = require_column(header, schema.packets);
    c.bytes = require_column(header, schema.bytes);
    c.flags = require_column(header, schema.flags);
    c.class_label = require_column(header, schema.class_label);
    c.attack_type = require_column(header, schema.attack_type);
    c.binary_label = find_column(header, schema.binary_label);
    c.fine_label = find_column(header, schema.fine_label);
    c.width = std::max({c.duration, c.proto, c.src_port, c.dst_port, c.packets, c.bytes, c.flags,
                        c.class_label, c.attack_type}) + 1;
    if (c.binary_label) c.width = std::max(c.width, *c.binary_label + 1);
    if (c.fine_label) c.width = std::max(c.width, *c.fine_label + 1);
    return c;
}

std::vector<std::string> split_csv_line(std::string_view line) {
    std::vector<std::string> fields;
    std::string current;
    bool quoted = false;
    for (std::size_t i = 0; i < line.size(); ++i) {
        const char ch = line[i];
        if (quoted) {
            if (ch == '"') {
                if (i + 1 < line.size() && line[i + 1] == '"') {
                    current.push_back('"');
                    ++i;
                } else {
                    quoted = false;
                }
            } else {
                current.push_back(ch);
            }
        } else if (ch == '"') {
            quoted = true;
        } else if (ch == ',') {
            fields.push_back(std::move(current));
            current.clear();
        } else if (ch != '\r' && ch != '\n') {
            current.push_back(ch);
        }
    }
    fields.push_back(std::move(current));
    return fields;
}

std::pair<BinaryLabel, std::string> map_label(std::string_view class_label,
                                              std::string_view attack_type, DomainTag domain) {
    class_label = trim(class_label);
    attack_type = trim(attack_type);
    if (class_label.empty()) {
        throw UnknownLabel("empty class label");
    }
    const bool attack_row =
        class_label == "attacker" || class_label == "victim" || !is_no_attack(attack_type);

    if (domain == DomainTag::cidds1_external) {
        if (class_label == "unknown") return {BinaryLabel::benign, "unknown"};
        if (class_label == "suspicious") return {BinaryLabel::malicious, "suspicious"};
        if (class_label == "normal" && !attack_row) return {BinaryLabel::benign, "normal"};
        if (attack_row && !is_no_attack(attack_type)) {
            return {BinaryLabel::malicious, std::string(attack_type)};
        }
        throw UnknownLabel("label '" + std::string(class_label) + "' not expected in " +
                           std::string(to_string(domain)));
    }

    if (class_label == "normal" && !attack_row) {
        return {BinaryLabel::benign, "normal"};
    }
    if (attack_row) {
        // CIDDS-002 contains scan attacks only; its evaluation composition uses the
        // single fine label "scan".
        if (domain == DomainTag::cidds2) {
            return {BinaryLabel::malicious, "scan"};
        }
        if (is_no_attack(attack_type)) {
            throw UnknownLabel("attack row without attack type (class '" +
                               std::string(class_label) + "')");
        }
        return {BinaryLabel::malicious, std::string(attack_type)};
    }
    throw UnknownLabel("label '" + std::string(class_label) + "' not expected in " +
                       std::string(to_string(domain)));
}

FlowRecord parse_flow_record(const std::vector<std::string>& fields, const ColumnIndex& columns,
                             std::int64_t order_index, DomainTag domain, std::size_t row_number) {
    if (fields.size() < columns.width) {
        throw MalformedRow(row_number, "expected at least " + std::to_string(columns.width) +
                                           " columns, found " + std::to_string(fields.size()));
    }
    FlowRecord r;
    r.order_index = order_index;

    const auto src = parse_port(fields[columns.src_port]);
    const auto dst = parse_port(fields[columns.dst_port]);
    if (!src) throw MalformedRow(row_number, "bad source port '" + fields[columns.src_port] + "'");
    if (!dst) throw MalformedRow(row_number, "bad destination port '" + fields[columns.dst_port] + "'");
    r.src_port = *src;
    r.dst_port = *dst;

    const auto packets = parse_count(fields[columns.packets]);
    if (!packets) throw MalformedRow(row_number, "bad packet count '" + fields[columns.packets] + "'");
    r.packets = *packets;

    const auto bytes = parse_byte_count(fields[columns.bytes]);
    if (!bytes) throw MalformedRow(row_number, "bad byte count '" + fields[columns.bytes] + "'");
    r.bytes = *bytes;

    const auto duration = parse_double(fields[columns.duration]);
    if (!duration || *duration < 0.0) {
        throw MalformedRow(row_number, "bad duration '" + fields[columns.duration] + "'");
    }
    r.duration = *duration;

    r.proto = std::string(trim(fields[columns.proto]));
    r.flags = std::string(trim(fields[columns.flags]));
    r.class_label = std::string(trim(fields[columns.class_label]));
    r.attack_type = std::string(trim(fields[columns.attack_type]));
    if (r.proto.empty()) {
        throw MalformedRow(row_number, "empty protocol");
    }

    try {
        if (columns.binary_label && columns.fine_label) {
            r.binary_label = parse_binary_label(fields[*columns.binary_label]);
            r.fine_label = std::string(trim(fields[*columns.fine_label]));
        } else {
            std::tie(r.binary_label, r.fine_label) = map_label(r.class_label, r.attack_type, domain);
        }
    } catch (const UnknownLabel& e) {
        throw MalformedRow(row_number, e.what());
    }
    return r;
}

FlowTable load_flow_table(const std::string& path, DomainTag domain, bool strict,
                          const CsvSchema& schema) {
    std::ifstream in(path);
    if (!in) {
        throw IoError("cannot open '" + path + "'");
    }
    FlowTable table;
    table.domain_tag = domain;
    table.source_path = path;

    if (!std::getline(in, table.header_line)) {
        throw IoError("'" + path + "' has no header row");
    }
    if (!table.header_line.empty() && table.header_line.back() == '\r') {
        table.header_line.pop_back();
    }
    const auto columns = ColumnIndex::resolve(split_csv_line(table.header_line), schema);

    std::string line;
    std::size_t row_number = 0;
    while (std::getline(in, line)) {
        ++row_number;
        if (!line.empty() && line.back() == '\r') {
            line.pop_back();
        }
        if (trim(line).empty()) {
            continue;
        }
        try {
            auto record = parse_flow_record(split_csv_line(line), columns,
                                            static_cast<std::int64_t>(table.records.size()),
                                            domain, row_number);
            table.records.push_back(std::move(record));
            table.raw_rows.push_back(line);
        } catch (const MalformedRow&) {
            if (strict) {
                throw;
            }
            ++table.skipped_rows;
        }
    }
    return table;
}

std::size_t SplitSpec::set_size() const noexcept {
    std::size_t total = 0;
    for (const auto& [label, count] : composition) {
        total += count;
    }
    return total;
}

SplitSpec SplitSpec::from_json(const nlohmann::json& j) {
    SplitSpec spec;
    const auto& comp = j.contains("composition") ? j.at("composition") : j;
    if (comp.is_array()) {
        for (const auto& entry : comp) {
            spec.composition.emplace_back(entry.at(0).get<std::string>(),
                                          entry.at(1).get<std::size_t>());
        }
    } else {
        for (const auto& [label, count] : comp.items()) {
            spec.composition.emplace_back(label, count.get<std::size_t>());
        }
    }
    spec.num_sets = j.value("num_sets", std::size_t{1});
    spec.seed = j.value("seed", std::uint64_t{0});
    if (spec.num_sets < 1) {
        throw Error(ErrorKind::data, "num_sets must be at least 1");
    }
    return spec;
}

nlohmann::json SplitSpec::to_json() const {
    nlohmann::json comp = nlohmann::json::array();
    for (const auto& [label, count] : composition) {
        comp.push_back({label, count});
    }
    return {{"composition", comp}, {"num_sets", num_sets}, {"seed", seed}};
}

SplitSpec split_preset(std::string_view name, std::uint64_t seed) {
    SplitSpec spec;
    spec.num_sets = 10;
    spec.seed = seed;
    if (name == "cidds1-internal") {
        spec.composition = {{"normal", 10000}, {"dos", 9000}, {"portScan", 935},
                            {"pingScan", 45},  {"bruteForce", 20}};
    } else if (name == "cidds1-external") {
        spec.composition = {{"unknown", 10000}, {"suspicious", 10000}};
    } else if (name == "cidds2") {
        spec.composition = {{"normal", 10000}, {"scan", 10000}};
    } else {
        throw Error(ErrorKind::io, "unknown preset '" + std::string(name) +
                                       "' (expected cidds1-internal, cidds1-external or cidds2)");
    }
    return spec;
}

DomainTag preset_domain(std::string_view name) {
    if (name == "cidds1-internal") return DomainTag::cidds1_internal;
    if (name == "cidds1-external") return DomainTag::cidds1_external;
    if (name == "cidds2") return DomainTag::cidds2;
    throw Error(ErrorKind::io, "unknown preset '" + std::string(name) + "'");
}

std::vector<FlowTable> make_eval_splits(const FlowTable& table, const SplitSpec& spec) {
    if (spec.num_sets < 1) {
        throw Error(ErrorKind::data, "num_sets must be at least 1");
    }
    std::map<std::string, std::vector<std::size_t>> by_label;
    for (std::size_t i = 0; i < table.records.size(); ++i) {
        by_label[table.records[i].fine_label].push_back(i);
    }
    for (const auto& [label, count] : spec.composition) {
        const auto it = by_label.find(label);
        const std::size_t available = it == by_label.end() ? 0 : it->second.size();
        if (available < count) {
            throw InsufficientLabel(label, count, available);
        }
    }

    std::vector<FlowTable> sets;
    sets.reserve(spec.num_sets);
    for (std::size_t s = 0; s < spec.num_sets; ++s) {
        Rng rng(child_seed(spec.seed, "split/" + std::to_string(s)));
        std::vector<std::size_t> chosen;
        chosen.reserve(spec.set_size());
        for (const auto& [label, count] : spec.composition) {
            const auto& pool = by_label.at(label);
            std::sample(pool.begin(), pool.end(), std::back_inserter(chosen), count, rng);
        }
        std::sort(chosen.begin(), chosen.end());

        FlowTable out;
        out.domain_tag = table.domain_tag;
        out.source_path = table.source_path;
        out.header_line = table.header_line;
        out.records.reserve(chosen.size());
        for (const auto idx : chosen) {
            out.records.push_back(table.records[idx]);
            if (idx < table.raw_rows.size()) {
                out.raw_rows.push_back(table.raw_rows[idx]);
            }
        }
        sets.push_back(std::move(out));
    }
    return sets;
}

nlohmann::json CompositionReport::to_json() const {
    nlohmann::json comp = nlohmann::json::object();
    for (const auto& [label, count] : counts) {
        comp[label] = count;
    }
    return {{"composition", comp}, {"total", total}, {"benign", benign}, {"malicious", malicious}};
}

CompositionReport dataset_stats(const FlowTable& table) {
    CompositionReport report;
    for (const auto& r : table.records) {
        ++report.counts[r.fine_label];
        ++(r.binary_label == BinaryLabel::benign ? report.benign : report.malicious);
    }
    report.total = table.records.size();
    return report;
}

void write_split_csv(const FlowTable& table, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) {
        throw IoError("cannot write '" + path + "'");
    }
    const auto header = split_csv_line(table.header_line);
    const bool has_labels = find_column(header, "binary_label").has_value();
    const bool raw_available = table.raw_rows.size() == table.records.size() &&
                               !table.header_line.empty();

    if (raw_available) {
        out << table.header_line;
        if (!has_labels) out << ",binary_label,fine_label";
        out << '\n';
        for (std::size_t i = 0; i < table.records.size(); ++i) {
            out << table.raw_rows[i];
            if (!has_labels) {
                out << ',' << to_string(table.records[i].binary_label) << ','
                    << table.records[i].fine_label;
            }
            out << '\n';
        }
    } else {
        // Tables built in memory: emit the minimal CIDDS column set.
        out << "Duration,Proto,Src Pt,Dst Pt,Packets,Bytes,Flags,class,attackType,"
               "binary_label,fine_label\n";
        for (const auto& r : table.records) {
            char duration[64];
            const auto res = std::to_chars(duration, duration + sizeof(duration), r.duration);
            out << std::string_view(duration, static_cast<std::size_t>(res.ptr - duration)) << ','
                << r.proto << ',' << r.src_port << ',' << r.dst_port << ',' << r.packets << ','
                << r.bytes << ',' << r.flags << ',' << r.class_label << ','
                << (r.attack_type.empty() ? "---" : r.attack_type) << ','
                << to_string(r.binary_label) << ',' << r.fine_label << '\n';
        }
    }
    if (!out) {
        throw IoError("failed writing '" + path + "'");
    }
}

}  // namespace flowlm
