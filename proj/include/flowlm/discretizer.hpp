#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include <nlohmann/json.hpp>

#include "flowlm/ingest.hpp"

namespace flowlm {

inline constexpr std::size_t kNumFeatures = 6;

/// Token ids shared by all six vocabularies.
inline constexpr std::int32_t kPadId = 0;
inline constexpr std::int32_t kMaskId = 1;
inline constexpr std::int32_t kUnkId = 2;
inline constexpr std::int32_t kFirstDataId = 3;

/// Position of each feature inside a token.
enum class Feature : std::size_t {
    src_port = 0,
    dst_port = 1,
    protoflags = 2,
    packets = 3,
    bytes = 4,
    duration = 5,
};

std::string_view feature_name(std::size_t f);

using TokenIds = std::array<std::int32_t, kNumFeatures>;
using VocabSizes = std::array<std::int32_t, kNumFeatures>;

struct TokenizedFlow {
    TokenIds ids{};
    BinaryLabel binary_label = BinaryLabel::benign;
    std::int64_t order_index = -1;

    bool operator==(const TokenizedFlow&) const = default;
};

struct TokenizedTable {
    std::vector<TokenizedFlow> flows;
    // False for tables built without ground truth (e.g. unlabeled pre-training data).
    bool labeled = true;

    std::size_t size() const noexcept { return flows.size(); }
    bool empty() const noexcept { return flows.empty(); }
};

struct DiscretizerConfig {
    int bins = 32;
};

/// "linear" quantile (type 7) of sorted data at probability q.
double interpolated_quantile(std::span<const double> sorted, double q);

/// Numeric bin id for value `v`: first data id plus the number of edges strictly below v.
std::int32_t bucketize(std::span<const double> edges, double v);

std::string protoflags_key(const FlowRecord& record);

class DiscretizerModel {
public:
    static constexpr int kFormatVersion = 1;

    DiscretizerModel() = default;

    /// Edges of a numeric feature (any feature except protoflags).
    const std::vector<double>& edges(Feature f) const;
    const std::vector<std::string>& protoflags() const noexcept { return protoflags_order_; }
    const VocabSizes& vocab_sizes() const noexcept { return vocab_sizes_; }
    int bins() const noexcept { return bins_; }
    const std::string& fit_fingerprint() const noexcept { return fit_fingerprint_; }

    /// Fingerprint of the whole model (edges, categories, sizes).
    std::string fingerprint() const;

    std::int32_t protoflags_id(const std::string& key) const;

    nlohmann::json to_json() const;
    static DiscretizerModel from_json(const nlohmann::json& j);

    bool operator==(const DiscretizerModel& other) const;

private:
    friend DiscretizerModel fit_discretizer(const FlowTable&, const DiscretizerConfig&);
    void finalize();

    int bins_ = 0;
    std::array<std::vector<double>, kNumFeatures> edges_{};  // protoflags slot unused
    std::vector<std::string> protoflags_order_;
    std::unordered_map<std::string, std::int32_t> protoflags_ids_;
    VocabSizes vocab_sizes_{};
    std::string fit_fingerprint_;
};

DiscretizerModel fit_discretizer(const FlowTable& table, const DiscretizerConfig& config);

TokenizedFlow transform_flow(const FlowRecord& record, const DiscretizerModel& model);
TokenizedTable transform_table(const FlowTable& table, const DiscretizerModel& model);

void save_discretizer(const DiscretizerModel& model, const std::string& path);
DiscretizerModel load_discretizer(const std::string& path);

}  // namespace flowlm
