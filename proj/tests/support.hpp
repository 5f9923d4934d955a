#pragma once

#include <filesystem>
#include <fstream>
#include <random>
#include <string>

#include <unistd.h>

#include "flowlm/discretizer.hpp"
#include "flowlm/model.hpp"

namespace testing {

/// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
public:
    explicit TempDir(const std::string& tag) {
        static int counter = 0;
        path_ = std::filesystem::temp_directory_path() /
                ("flowlm-test-" + tag + "-" + std::to_string(::getpid()) + "-" + std::to_string(counter++));
        std::filesystem::remove_all(path_);
        std::filesystem::create_directories(path_);
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path_, ec);
    }
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;

    std::string file(const std::string& name) const { return (path_ / name).string(); }
    const std::filesystem::path& path() const { return path_; }

private:
    std::filesystem::path path_;
};

inline void write_file(const std::string& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary);
    out << text;
}

inline std::string read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline constexpr const char* kCiddsHeader =
    "Date first seen,Duration,Proto,Src IP Addr,Src Pt,Dst IP Addr,Dst Pt,Packets,Bytes,Flows,"
    "Flags,Tos,class,attackType,attackID,attackDescription";

/// One CIDDS-style row with the columns the library reads filled in.
inline std::string cidds_row(const std::string& duration, const std::string& proto, const std::string& sp,
                             const std::string& dp, const std::string& packets, const std::string& bytes,
                             const std::string& flags, const std::string& cls, const std::string& attack) {
    return "2017-03-15 00:01:02.003," + duration + "," + proto + ",10.0.0.1," + sp + ",10.0.0.2," + dp + "," +
           packets + "," + bytes + ",1," + flags + ",0," + cls + "," + attack + ",---,---";
}

/// Small model shapes used throughout the tests.
inline flowlm::ModelConfig tiny_config(flowlm::VocabSizes vocab = {7, 6, 5, 6, 7, 5}, int per_feature_dim = 4,
                                       int layers = 1, int heads = 2, int ffn_dim = 12, int max_len = 8) {
    flowlm::ModelConfig c;
    c.per_feature_dim = per_feature_dim;
    c.layers = layers;
    c.heads = heads;
    c.ffn_dim = ffn_dim;
    c.max_len = max_len;
    c.dropout = 0.0;
    c.vocab_sizes = vocab;
    return c;
}

/// Random tokenized table with ids inside `vocab`.
inline flowlm::TokenizedTable random_tokens(std::size_t n, const flowlm::VocabSizes& vocab, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    flowlm::TokenizedTable t;
    for (std::size_t i = 0; i < n; ++i) {
        flowlm::TokenizedFlow f;
        for (std::size_t k = 0; k < flowlm::kNumFeatures; ++k) {
            f.ids[k] = std::uniform_int_distribution<int>(flowlm::kFirstDataId, vocab[k] - 1)(rng);
        }
        f.binary_label = (rng() & 1) ? flowlm::BinaryLabel::malicious : flowlm::BinaryLabel::benign;
        f.order_index = static_cast<std::int64_t>(i);
        t.flows.push_back(f);
    }
    return t;
}

}  // namespace testing
