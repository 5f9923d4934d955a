#include "flowlm/discretizer.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include "flowlm/errors.hpp"
#include "flowlm/random.hpp"

namespace flowlm {

namespace {

constexpr std::array<std::string_view, kNumFeatures> kFeatureNames = {
    "src_port", "dst_port", "protoflags", "packets", "bytes", "duration"};

constexpr std::array<Feature, 5> kNumericFeatures = {Feature::src_port, Feature::dst_port,
                                                     Feature::packets, Feature::bytes,
                                                     Feature::duration};

double numeric_value(const FlowRecord& r, Feature f) {
    switch (f) {
        case Feature::src_port: return r.src_port;
        case Feature::dst_port: return r.dst_port;
        case Feature::packets: return static_cast<double>(r.packets);
        case Feature::bytes: return static_cast<double>(r.bytes);
        case Feature::duration: return r.duration;
        case Feature::protoflags: break;
    }
    throw std::logic_error("protoflags is not numeric");
}

std::size_t idx(Feature f) { return static_cast<std::size_t>(f); }

}  // namespace

std::string_view feature_name(std::size_t f) { return kFeatureNames.at(f); }

double interpolated_quantile(std::span<const double> sorted, double q) {
    if (sorted.empty()) {
        throw EmptyFitSet();
    }
    const double pos = q * static_cast<double>(sorted.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const auto hi = std::min(lo + 1, sorted.size() - 1);
    const double frac = pos - static_cast<double>(lo);
    return sorted[lo] + frac * (sorted[hi] - sorted[lo]);
}

std::int32_t bucketize(std::span<const double> edges, double v) {
    const auto below = std::lower_bound(edges.begin(), edges.end(), v) - edges.begin();
    return kFirstDataId + static_cast<std::int32_t>(below);
}

std::string protoflags_key(const FlowRecord& record) { return record.proto + "|" + record.flags; }

const std::vector<double>& DiscretizerModel::edges(Feature f) const {
    if (f == Feature::protoflags) {
        throw std::logic_error("protoflags is categorical");
    }
    return edges_[idx(f)];
}

std::int32_t DiscretizerModel::protoflags_id(const std::string& key) const {
    const auto it = protoflags_ids_.find(key);
    return it == protoflags_ids_.end() ? kUnkId : it->second;
}

void DiscretizerModel::finalize() {
    protoflags_ids_.clear();
    for (std::size_t i = 0; i < protoflags_order_.size(); ++i) {
        protoflags_ids_.emplace(protoflags_order_[i], kFirstDataId + static_cast<std::int32_t>(i));
    }
    for (const auto f : kNumericFeatures) {
        vocab_sizes_[idx(f)] = kFirstDataId + static_cast<std::int32_t>(edges_[idx(f)].size()) + 1;
    }
    vocab_sizes_[idx(Feature::protoflags)] =
        kFirstDataId + static_cast<std::int32_t>(protoflags_order_.size());
}

std::string DiscretizerModel::fingerprint() const {
    return "fnv1a64:" + to_hex(fnv1a(to_json().dump()));
}

nlohmann::json DiscretizerModel::to_json() const {
    nlohmann::json edges = nlohmann::json::object();
    for (const auto f : kNumericFeatures) {
        edges[std::string(kFeatureNames[idx(f)])] = edges_[idx(f)];
    }
    nlohmann::json table = nlohmann::json::object();
    for (std::size_t i = 0; i < protoflags_order_.size(); ++i) {
        table[protoflags_order_[i]] = kFirstDataId + static_cast<std::int32_t>(i);
    }
    return {{"version", kFormatVersion},
            {"bins", bins_},
            {"edges", edges},
            {"protoflags", protoflags_order_},
            {"protoflags_table", table},
            {"vocab_sizes", vocab_sizes_},
            {"feature_order", kFeatureNames},
            {"fit_fingerprint", fit_fingerprint_}};
}

DiscretizerModel DiscretizerModel::from_json(const nlohmann::json& j) {
    if (!j.is_object() || !j.contains("version")) {
        throw FormatVersionMismatch("discretizer artifact has no version field");
    }
    if (j.at("version").get<int>() != kFormatVersion) {
        throw FormatVersionMismatch("unsupported discretizer version " + j.at("version").dump());
    }
    DiscretizerModel m;
    try {
        m.bins_ = j.at("bins").get<int>();
        for (const auto f : kNumericFeatures) {
            m.edges_[idx(f)] =
                j.at("edges").at(std::string(kFeatureNames[idx(f)])).get<std::vector<double>>();
            const auto& e = m.edges_[idx(f)];
            if (std::adjacent_find(e.begin(), e.end(), std::greater_equal<>()) != e.end()) {
                throw FormatVersionMismatch("edges of " + std::string(kFeatureNames[idx(f)]) +
                                            " are not strictly increasing");
            }
        }
        m.protoflags_order_ = j.at("protoflags").get<std::vector<std::string>>();
        m.fit_fingerprint_ = j.value("fit_fingerprint", std::string{});
    } catch (const nlohmann::json::exception& e) {
        throw FormatVersionMismatch(std::string("malformed discretizer artifact: ") + e.what());
    }
    m.finalize();
    if (j.contains("vocab_sizes") && j.at("vocab_sizes").get<VocabSizes>() != m.vocab_sizes_) {
        throw FormatVersionMismatch("stored vocab_sizes disagree with edges/categories");
    }
    return m;
}

bool DiscretizerModel::operator==(const DiscretizerModel& other) const {
    return bins_ == other.bins_ && edges_ == other.edges_ &&
           protoflags_order_ == other.protoflags_order_ && vocab_sizes_ == other.vocab_sizes_ &&
           fit_fingerprint_ == other.fit_fingerprint_;
}

DiscretizerModel fit_discretizer(const FlowTable& table, const DiscretizerConfig& config) {
    if (table.empty()) {
        throw EmptyFitSet();
    }
    if (config.bins < 2) {
        throw Error(ErrorKind::data, "discretizer needs at least 2 bins");
    }
    DiscretizerModel m;
    m.bins_ = config.bins;

    Fnv1a fit_hash;
    std::vector<double> values(table.size());
    for (const auto f : kNumericFeatures) {
        for (std::size_t i = 0; i < table.size(); ++i) {
            values[i] = numeric_value(table.records[i], f);
            fit_hash.update_value(values[i]);
        }
        std::sort(values.begin(), values.end());
        auto& edges = m.edges_[idx(f)];
        edges.clear();
        for (int k = 1; k < config.bins; ++k) {
            const double q = static_cast<double>(k) / config.bins;
            const double e = interpolated_quantile(values, q);
            if (edges.empty() || e > edges.back()) {
                edges.push_back(e);
            }
        }
        // A constant feature has nothing to separate.
        if (values.front() == values.back()) {
            edges.clear();
        }
    }

    std::unordered_map<std::string, bool> seen;
    for (const auto& r : table.records) {
        auto key = protoflags_key(r);
        fit_hash.update(key);
        if (seen.emplace(key, true).second) {
            m.protoflags_order_.push_back(std::move(key));
        }
    }
    m.fit_fingerprint_ = "fnv1a64:" + fit_hash.hex();
    m.finalize();
    return m;
}

TokenizedFlow transform_flow(const FlowRecord& record, const DiscretizerModel& model) {
    TokenizedFlow t;
    for (const auto f : kNumericFeatures) {
        t.ids[idx(f)] = bucketize(model.edges(f), numeric_value(record, f));
    }
    t.ids[idx(Feature::protoflags)] = model.protoflags_id(protoflags_key(record));
    t.binary_label = record.binary_label;
    t.order_index = record.order_index;
    return t;
}

TokenizedTable transform_table(const FlowTable& table, const DiscretizerModel& model) {
    TokenizedTable out;
    out.flows.reserve(table.size());
    for (const auto& r : table.records) {
        out.flows.push_back(transform_flow(r, model));
    }
    return out;
}

void save_discretizer(const DiscretizerModel& model, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) {
        throw IoError("cannot write '" + path + "'");
    }
    out << model.to_json().dump(2) << '\n';
    if (!out) {
        throw IoError("failed writing '" + path + "'");
    }
}

DiscretizerModel load_discretizer(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw IoError("cannot open '" + path + "'");
    }
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(in);
    } catch (const nlohmann::json::parse_error& e) {
        throw FormatVersionMismatch("'" + path + "' is not a valid discretizer artifact: " +
                                    e.what());
    }
    return DiscretizerModel::from_json(j);
}

}  // namespace flowlm
