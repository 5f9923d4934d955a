#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "flowlm/checkpoint.hpp"
#include "flowlm/discretizer.hpp"

namespace flowlm {

struct FlowPrediction {
    double p_benign = 0.0;
    double p_malicious = 0.0;
    BinaryLabel predicted = BinaryLabel::benign;
};

/// Higher probability wins; an exact tie counts as malicious.
BinaryLabel decide(double p_benign, double p_malicious);

/// Positive class = malicious.
struct ConfusionMatrix {
    std::size_t tp = 0;
    std::size_t fp = 0;
    std::size_t tn = 0;
    std::size_t fn = 0;

    std::size_t total() const noexcept { return tp + fp + tn + fn; }
    bool operator==(const ConfusionMatrix&) const = default;
};

struct EvalMetrics {
    double accuracy = 0.0;
    double f1 = 0.0;
    ConfusionMatrix confusion;
    std::string set_id;

    nlohmann::json to_json() const;
};

struct MeanStderr {
    double mean = 0.0;
    double se = 0.0;
};

struct AggregateReport {
    MeanStderr accuracy;
    MeanStderr f1;
    std::vector<EvalMetrics> sets;
    std::vector<std::string> warnings;

    nlohmann::json to_json() const;
};

/// Runs the classifier over non-overlapping windows of `set`; exactly one prediction
/// per flow, in table order. The checkpoint must be fine-tuned and, when
/// `discretizer_fingerprint` is non-empty, trained against that discretizer.
template <typename T>
std::vector<FlowPrediction> predict_flows(const ModelCheckpoint<T>& ckpt, const TokenizedTable& set,
                                          int seq_len, const std::string& discretizer_fingerprint,
                                          int batch_size = 64);

ConfusionMatrix confusion(const std::vector<BinaryLabel>& predicted,
                          const std::vector<BinaryLabel>& actual);

EvalMetrics compute_metrics(const ConfusionMatrix& cm, std::string set_id = {});

AggregateReport aggregate_runs(const std::vector<EvalMetrics>& runs);

/// "0.994(0.002)"; a dash for an empty domain.
std::string format_cell(const MeanStderr& v);

/// Domains in display order, each with its aggregate.
using DomainReports = std::vector<std::pair<std::string, AggregateReport>>;

std::string render_report(const DomainReports& reports);
nlohmann::json report_to_json(const DomainReports& reports);
DomainReports report_from_json(const nlohmann::json& j);

/// Display title of a domain key ("cidds1_internal" -> "CIDDS-001 internal").
std::string domain_title(const std::string& key);

}  // namespace flowlm
