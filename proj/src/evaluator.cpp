#include "flowlm/evaluator.hpp"

#include <algorithm>
#include <cmath>

#include <fmt/format.h>

#include "flowlm/errors.hpp"
#include "flowlm/sequencer.hpp"

namespace flowlm {

BinaryLabel decide(double p_benign, double p_malicious) {
    return p_malicious >= p_benign ? BinaryLabel::malicious : BinaryLabel::benign;
}

nlohmann::json EvalMetrics::to_json() const {
    return {{"set_id", set_id},
            {"accuracy", accuracy},
            {"f1", f1},
            {"confusion", {{"tp", confusion.tp}, {"fp", confusion.fp}, {"tn", confusion.tn}, {"fn", confusion.fn}}}};
}

nlohmann::json AggregateReport::to_json() const {
    nlohmann::json s = nlohmann::json::array();
    for (const auto& m : sets) s.push_back(m.to_json());
    return {{"accuracy", {{"mean", accuracy.mean}, {"se", accuracy.se}}},
            {"f1", {{"mean", f1.mean}, {"se", f1.se}}},
            {"sets", s},
            {"warnings", warnings}};
}

template <typename T>
std::vector<FlowPrediction> predict_flows(const ModelCheckpoint<T>& ckpt, const TokenizedTable& set,
                                          int seq_len, const std::string& discretizer_fingerprint,
                                          int batch_size) {
    if (ckpt.metadata.phase != Phase::finetuned) {
        throw ConfigMismatch("evaluation needs a fine-tuned checkpoint");
    }
    if (!discretizer_fingerprint.empty() && !ckpt.metadata.discretizer_fingerprint.empty() &&
        discretizer_fingerprint != ckpt.metadata.discretizer_fingerprint) {
        throw FingerprintMismatch("checkpoint was trained with discretizer " +
                                  ckpt.metadata.discretizer_fingerprint + ", evaluation uses " +
                                  discretizer_fingerprint);
    }
    const auto length = static_cast<std::size_t>(seq_len);
    const auto windows = segment_for_eval(set, length);
    std::vector<FlowPrediction> out;
    out.reserve(set.size());

    const auto per_batch = static_cast<std::size_t>(std::max(batch_size, 1));
    for (std::size_t w0 = 0; w0 < windows.size(); w0 += per_batch) {
        const std::vector<FlowSequence> chunk(
            windows.begin() + static_cast<std::ptrdiff_t>(w0),
            windows.begin() + static_cast<std::ptrdiff_t>(std::min(windows.size(), w0 + per_batch)));
        const Batch batch = collate_batch(chunk, length);
        const auto probs = softmax_rows(ckpt.model.cls_logits(ckpt.model.hidden_states(batch)));
        for (std::size_t p = 0; p < batch.positions(); ++p) {
            if (!batch.pad_mask[p]) continue;
            FlowPrediction pred;
            pred.p_benign = static_cast<double>(probs(static_cast<Eigen::Index>(p), 0));
            pred.p_malicious = static_cast<double>(probs(static_cast<Eigen::Index>(p), 1));
            pred.predicted = decide(pred.p_benign, pred.p_malicious);
            out.push_back(pred);
        }
    }
    return out;
}

ConfusionMatrix confusion(const std::vector<BinaryLabel>& predicted,
                          const std::vector<BinaryLabel>& actual) {
    if (predicted.size() != actual.size()) {
        throw ShapeMismatch("prediction and label vectors differ in length");
    }
    ConfusionMatrix cm;
    for (std::size_t i = 0; i < predicted.size(); ++i) {
        const bool pred_pos = predicted[i] == BinaryLabel::malicious;
        const bool true_pos = actual[i] == BinaryLabel::malicious;
        if (pred_pos && true_pos) ++cm.tp;
        else if (pred_pos) ++cm.fp;
        else if (true_pos) ++cm.fn;
        else ++cm.tn;
    }
    return cm;
}

EvalMetrics compute_metrics(const ConfusionMatrix& cm, std::string set_id) {
    EvalMetrics m;
    m.confusion = cm;
    m.set_id = std::move(set_id);
    const auto total = cm.total();
    m.accuracy = total == 0 ? 0.0 : static_cast<double>(cm.tp + cm.tn) / static_cast<double>(total);
    const auto denom = 2 * cm.tp + cm.fp + cm.fn;
    m.f1 = denom == 0 ? 0.0 : static_cast<double>(2 * cm.tp) / static_cast<double>(denom);
    return m;
}

namespace {

MeanStderr mean_stderr(const std::vector<double>& xs) {
    MeanStderr r;
    if (xs.empty()) return r;
    // Work with offsets from the first value so identical runs give exactly zero spread.
    const double origin = xs.front();
    double shift = 0.0;
    for (const auto x : xs) shift += x - origin;
    shift /= static_cast<double>(xs.size());
    r.mean = origin + shift;
    if (xs.size() < 2) return r;
    double ss = 0.0;
    for (const auto x : xs) ss += (x - origin - shift) * (x - origin - shift);
    const double sd = std::sqrt(ss / static_cast<double>(xs.size() - 1));
    r.se = sd / std::sqrt(static_cast<double>(xs.size()));
    return r;
}

}  // namespace

AggregateReport aggregate_runs(const std::vector<EvalMetrics>& runs) {
    AggregateReport report;
    report.sets = runs;
    std::sort(report.sets.begin(), report.sets.end(),
              [](const EvalMetrics& a, const EvalMetrics& b) { return a.set_id < b.set_id; });
    std::vector<double> acc;
    std::vector<double> f1;
    for (const auto& m : report.sets) {
        acc.push_back(m.accuracy);
        f1.push_back(m.f1);
    }
    report.accuracy = mean_stderr(acc);
    report.f1 = mean_stderr(f1);
    if (runs.size() == 1) {
        report.warnings.push_back("single evaluation set: standard error reported as 0");
    }
    return report;
}

std::string format_cell(const MeanStderr& v) { return fmt::format("{:.3f}({:.3f})", v.mean, v.se); }

std::string domain_title(const std::string& key) {
    if (key == "cidds1_internal") return "CIDDS-001 internal";
    if (key == "cidds1_external") return "CIDDS-001 external";
    if (key == "cidds2") return "CIDDS-002";
    return key;
}

std::string render_report(const DomainReports& reports) {
    constexpr int kCell = 14;
    std::string header1 = fmt::format("{:<12}", "");
    std::string header2 = fmt::format("{:<12}", "Classifier");
    std::string row = fmt::format("{:<12}", "Proposal");
    for (const auto& [domain, agg] : reports) {
        header1 += fmt::format("{:<{}}", "Test " + domain_title(domain), 2 * kCell);
        header2 += fmt::format("{:<{}}{:<{}}", "Accuracy", kCell, "F1 score", kCell);
        if (agg.sets.empty()) {
            row += fmt::format("{:<{}}{:<{}}", "-", kCell, "-", kCell);
        } else {
            row += fmt::format("{:<{}}{:<{}}", format_cell(agg.accuracy), kCell, format_cell(agg.f1), kCell);
        }
    }
    const auto rstrip = [](std::string s) {
        s.erase(s.find_last_not_of(' ') + 1);
        return s;
    };
    return rstrip(header1) + "\n" + rstrip(header2) + "\n" + rstrip(row) + "\n";
}

nlohmann::json report_to_json(const DomainReports& reports) {
    nlohmann::json out = nlohmann::json::object();
    std::size_t position = 0;
    for (const auto& [domain, agg] : reports) {
        out[domain] = agg.to_json();
        out[domain]["position"] = position++;
    }
    return out;
}

DomainReports report_from_json(const nlohmann::json& j) {
    DomainReports out;
    // Non-domain entries (e.g. provenance) carry no accuracy block and are skipped.
    std::vector<std::pair<std::size_t, std::string>> keyed;
    for (const auto& [key, value] : j.items()) {
        if (value.is_object() && value.contains("accuracy")) {
            keyed.emplace_back(value.value("position", keyed.size()), key);
        }
    }
    std::stable_sort(keyed.begin(), keyed.end());
    std::vector<std::string> order;
    for (const auto& [pos, key] : keyed) order.push_back(key);
    const auto& domains = j;
    for (const auto& key : order) {
        const auto& d = domains.at(key);
        AggregateReport agg;
        agg.accuracy = {d.at("accuracy").at("mean").get<double>(), d.at("accuracy").at("se").get<double>()};
        agg.f1 = {d.at("f1").at("mean").get<double>(), d.at("f1").at("se").get<double>()};
        for (const auto& s : d.value("sets", nlohmann::json::array())) {
            EvalMetrics m;
            m.set_id = s.at("set_id").get<std::string>();
            m.accuracy = s.at("accuracy").get<double>();
            m.f1 = s.at("f1").get<double>();
            const auto& c = s.at("confusion");
            m.confusion = {c.at("tp").get<std::size_t>(), c.at("fp").get<std::size_t>(),
                           c.at("tn").get<std::size_t>(), c.at("fn").get<std::size_t>()};
            agg.sets.push_back(m);
        }
        agg.warnings = d.value("warnings", std::vector<std::string>{});
        out.emplace_back(key, std::move(agg));
    }
    return out;
}

template std::vector<FlowPrediction> predict_flows(const ModelCheckpoint<float>&, const TokenizedTable&,
                                                   int, const std::string&, int);
template std::vector<FlowPrediction> predict_flows(const ModelCheckpoint<double>&, const TokenizedTable&,
                                                   int, const std::string&, int);

}  // namespace flowlm
