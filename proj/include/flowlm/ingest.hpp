#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

namespace flowlm {

enum class BinaryLabel : std::uint8_t { benign = 0, malicious = 1 };

enum class DomainTag { cidds1_internal, cidds1_external, cidds2 };

std::string_view to_string(BinaryLabel label);
std::string_view to_string(DomainTag tag);
BinaryLabel parse_binary_label(std::string_view s);
DomainTag parse_domain_tag(std::string_view s);

struct FlowRecord {
    std::int64_t order_index = 0;
    std::uint16_t src_port = 0;
    std::uint16_t dst_port = 0;
    std::string proto;
    std::string flags;
    std::uint64_t packets = 0;
    std::uint64_t bytes = 0;
    double duration = 0.0;
    std::string class_label;
    std::string attack_type;
    BinaryLabel binary_label = BinaryLabel::benign;
    std::string fine_label;
};

/// Logical column -> header name. Defaults follow the published CIDDS header; any
/// entry may be renamed for files that use different column titles.
struct CsvSchema {
    std::string duration = "Duration";
    std::string proto = "Proto";
    std::string src_port = "Src Pt";
    std::string dst_port = "Dst Pt";
    std::string packets = "Packets";
    std::string bytes = "Bytes";
    std::string flags = "Flags";
    std::string class_label = "class";
    std::string attack_type = "attackType";
    // Present only in split files written by this library.
    std::string binary_label = "binary_label";
    std::string fine_label = "fine_label";

    static CsvSchema from_json(const nlohmann::json& renames);
};

/// Header positions of the schema columns.
struct ColumnIndex {
    std::size_t duration, proto, src_port, dst_port, packets, bytes, flags, class_label,
        attack_type;
    std::optional<std::size_t> binary_label;
    std::optional<std::size_t> fine_label;
    std::size_t width = 0;

    static ColumnIndex resolve(const std::vector<std::string>& header, const CsvSchema& schema);
};

struct FlowTable {
    std::vector<FlowRecord> records;
    DomainTag domain_tag = DomainTag::cidds1_internal;
    std::string source_path;
    // Original header line and raw row text, kept so splits can be re-emitted with
    // the source schema intact.
    std::string header_line;
    std::vector<std::string> raw_rows;
    std::size_t skipped_rows = 0;

    std::size_t size() const noexcept { return records.size(); }
    bool empty() const noexcept { return records.empty(); }
};

/// Splits one CSV line. Double-quoted fields may contain commas and "" escapes.
std::vector<std::string> split_csv_line(std::string_view line);

std::pair<BinaryLabel, std::string> map_label(std::string_view class_label,
                                              std::string_view attack_type, DomainTag domain);

/// Parses one row. `row_number` is only used in error messages (1-based, header = 0).
FlowRecord parse_flow_record(const std::vector<std::string>& fields, const ColumnIndex& columns,
                             std::int64_t order_index, DomainTag domain, std::size_t row_number);

FlowTable load_flow_table(const std::string& path, DomainTag domain, bool strict,
                          const CsvSchema& schema = {});

struct SplitSpec {
    // Ordered so that sampling and reporting are deterministic.
    std::vector<std::pair<std::string, std::size_t>> composition;
    std::size_t num_sets = 1;
    std::uint64_t seed = 0;

    std::size_t set_size() const noexcept;
    static SplitSpec from_json(const nlohmann::json& j);
    nlohmann::json to_json() const;
};

/// Built-in compositions for the three evaluation domains (ten sets each).
SplitSpec split_preset(std::string_view name, std::uint64_t seed);
DomainTag preset_domain(std::string_view name);

std::vector<FlowTable> make_eval_splits(const FlowTable& table, const SplitSpec& spec);

struct CompositionReport {
    std::map<std::string, std::size_t> counts;
    std::size_t total = 0;
    std::size_t benign = 0;
    std::size_t malicious = 0;

    nlohmann::json to_json() const;
};

CompositionReport dataset_stats(const FlowTable& table);

/// Writes the table in its source schema with binary_label/fine_label appended.
void write_split_csv(const FlowTable& table, const std::string& path);

}  // namespace flowlm
