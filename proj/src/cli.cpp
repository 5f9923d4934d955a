#include "flowlm/cli.hpp"

#include <fnmatch.h>

#include <chrono>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <future>
#include <iostream>
#include <optional>

#include <CLI11.hpp>
#include <fmt/format.h>

#include "flowlm/checkpoint.hpp"
#include "flowlm/discretizer.hpp"
#include "flowlm/errors.hpp"
#include "flowlm/evaluator.hpp"
#include "flowlm/ingest.hpp"
#include "flowlm/synthetic.hpp"
#include "flowlm/trainer.hpp"

namespace flowlm {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

// ---------------------------------------------------------------------------
// Configuration plumbing

template <typename V>
void override(json& section, const char* key, const std::optional<V>& value) {
    if (value) section[key] = *value;
}

json read_json_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) {
        throw IoError("cannot open '" + path + "'");
    }
    try {
        return json::parse(in);
    } catch (const json::parse_error& e) {
        throw Error(ErrorKind::io, "'" + path + "' is not valid JSON: " + e.what());
    }
}

void write_json_file(const json& j, const std::string& path) {
    if (const auto parent = fs::path(path).parent_path(); !parent.empty()) {
        fs::create_directories(parent);
    }
    std::ofstream out(path, std::ios::binary);
    if (!out) {
        throw IoError("cannot write '" + path + "'");
    }
    out << j.dump(2) << '\n';
    if (!out) {
        throw IoError("failed writing '" + path + "'");
    }
}

void write_text_file(const std::string& text, const std::string& path) {
    if (const auto parent = fs::path(path).parent_path(); !parent.empty()) {
        fs::create_directories(parent);
    }
    std::ofstream out(path, std::ios::binary);
    if (!out) {
        throw IoError("cannot write '" + path + "'");
    }
    out << text;
}

/// Recursively overlays `patch` onto `base`.
void merge_into(json& base, const json& patch) {
    for (const auto& [key, value] : patch.items()) {
        if (value.is_object() && base.contains(key) && base[key].is_object()) {
            merge_into(base[key], value);
        } else {
            base[key] = value;
        }
    }
}

/// Relative input paths that do not exist are looked up under FLOWLM_DATA_DIR.
std::string resolve_input(const std::string& path) {
    if (path.empty() || fs::exists(path) || fs::path(path).is_absolute()) {
        return path;
    }
    if (const char* root = std::getenv("FLOWLM_DATA_DIR"); root && *root) {
        const auto candidate = fs::path(root) / path;
        if (fs::exists(candidate)) {
            return candidate.string();
        }
    }
    return path;
}

/// Default artifact location: <FLOWLM_RUN_ROOT|runs>/<timestamp>-seed<seed>/<name>.
std::string default_output(const std::string& name, std::uint64_t seed) {
    const char* root = std::getenv("FLOWLM_RUN_ROOT");
    const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm tm{};
    gmtime_r(&now, &tm);
    char stamp[32];
    std::strftime(stamp, sizeof(stamp), "%Y%m%d-%H%M%S", &tm);
    return (fs::path(root && *root ? root : "runs") / fmt::format("{}-seed{}", stamp, seed) / name)
        .string();
}

std::string basename(const std::string& path) { return fs::path(path).filename().string(); }

void echo_config(const std::string& command, const json& resolved) {
    std::cout << json{{"command", command}, {"resolved_config", resolved}}.dump() << std::endl;
}

/// Expands "dir/pattern*.csv" (pattern only in the final component) into sorted paths.
std::vector<std::string> expand_glob(const std::string& pattern) {
    const auto resolved = resolve_input(pattern);
    if (fs::exists(resolved)) {
        return {resolved};
    }
    fs::path p(pattern);
    fs::path dir = p.parent_path();
    if (dir.empty()) dir = ".";
    if (!fs::exists(dir)) {
        dir = resolve_input(dir.string());
    }
    std::vector<std::string> out;
    if (fs::is_directory(dir)) {
        const auto name_pattern = p.filename().string();
        for (const auto& entry : fs::directory_iterator(dir)) {
            if (entry.is_regular_file() &&
                fnmatch(name_pattern.c_str(), entry.path().filename().c_str(), 0) == 0) {
                out.push_back(entry.path().string());
            }
        }
    }
    std::sort(out.begin(), out.end());
    if (out.empty()) {
        throw IoError("no files match '" + pattern + "'");
    }
    return out;
}

FlowTable load_table(const std::string& path, const std::string& domain, bool strict, const json& cfg) {
    const auto schema = CsvSchema::from_json(cfg.value("schema", json::object()));
    auto table = load_flow_table(resolve_input(path), parse_domain_tag(domain), strict, schema);
    if (table.skipped_rows > 0) {
        std::cerr << fmt::format("warning: skipped {} malformed row(s) in {}\n", table.skipped_rows, path);
    }
    return table;
}

// ---------------------------------------------------------------------------
// Shared option groups

struct CommonOptions {
    std::string config_path;
    std::optional<std::uint64_t> seed;
    bool deterministic = false;

    void attach(CLI::App* cmd) {
        cmd->add_option("--config", config_path, "Experiment configuration (JSON)");
        cmd->add_option("--seed", seed, "Root seed");
        cmd->add_flag("--deterministic", deterministic, "Single-threaded, reproducible execution");
    }

    json load() const {
        json cfg = default_experiment_config();
        if (!config_path.empty()) {
            merge_into(cfg, read_json_file(resolve_input(config_path)));
        }
        return cfg;
    }
};

struct ModelOptions {
    std::optional<int> per_feature_dim, layers, heads, ffn_dim, max_len;
    std::optional<double> dropout;
    std::optional<std::string> precision;

    void attach(CLI::App* cmd) {
        cmd->add_option("--per-feature-dim", per_feature_dim, "Embedding width per feature");
        cmd->add_option("--layers", layers, "Encoder layers");
        cmd->add_option("--heads", heads, "Attention heads");
        cmd->add_option("--ffn-dim", ffn_dim, "Feed-forward width");
        cmd->add_option("--max-len", max_len, "Maximum sequence length");
        cmd->add_option("--dropout", dropout, "Dropout rate");
        cmd->add_option("--precision", precision, "f32 or f64");
    }
    void apply(json& section) const {
        override(section, "per_feature_dim", per_feature_dim);
        override(section, "layers", layers);
        override(section, "heads", heads);
        override(section, "ffn_dim", ffn_dim);
        override(section, "max_len", max_len);
        override(section, "dropout", dropout);
        override(section, "precision", precision);
    }
};

struct TrainOptions {
    std::string train_path;
    std::string domain = "cidds1_internal";
    std::string discretizer_path;
    std::string out;
    std::string init;
    bool strict = false;
    std::optional<std::int64_t> steps, warmup, checkpoint_every, log_every;
    std::optional<int> batch_size, seq_len;
    std::optional<double> lr, mask_rate;

    void attach(CLI::App* cmd, bool pretraining) {
        cmd->add_option("--train", train_path, "Training flow CSV")->required();
        cmd->add_option("--domain", domain, "Label domain of the training CSV");
        cmd->add_option("--discretizer", discretizer_path, "Fitted discretizer JSON")->required();
        cmd->add_option("--out", out, "Checkpoint directory to write");
        cmd->add_option(pretraining ? "--resume" : "--init", init,
                        pretraining ? "Resume from a pre-training checkpoint"
                                    : "Pre-trained (or fine-tuned, to resume) checkpoint");
        cmd->add_flag("--strict", strict, "Abort on malformed rows");
        cmd->add_option("--steps", steps, "Optimisation steps");
        cmd->add_option("--batch-size", batch_size, "Sequences per batch");
        cmd->add_option("--seq-len", seq_len, "Flows per sequence");
        cmd->add_option("--lr", lr, "Peak learning rate");
        cmd->add_option("--warmup", warmup, "Warmup steps");
        cmd->add_option("--checkpoint-every", checkpoint_every, "Intermediate checkpoint interval");
        cmd->add_option("--log-every", log_every, "Progress log interval (0 = silent)");
        if (pretraining) {
            cmd->add_option("--mask-rate", mask_rate, "MLM selection rate");
        }
    }
    void apply(json& section) const {
        override(section, "steps", steps);
        override(section, "warmup_steps", warmup);
        override(section, "checkpoint_every", checkpoint_every);
        override(section, "log_every", log_every);
        override(section, "batch_size", batch_size);
        override(section, "seq_len", seq_len);
        override(section, "learning_rate", lr);
        override(section, "mask_rate", mask_rate);
    }
};

// ---------------------------------------------------------------------------
// Commands

int cmd_ingest(const CommonOptions& common, const std::string& input, const std::string& domain,
               bool strict, std::string out) {
    json cfg = common.load();
    const auto seed = common.seed.value_or(cfg["split"].value("seed", std::uint64_t{0}));
    if (out.empty()) out = default_output("stats.json", seed);
    const auto table = load_table(input, domain, strict, cfg);
    auto stats = dataset_stats(table).to_json();
    stats["source"] = basename(input);
    stats["source_fingerprint"] = file_fingerprint(resolve_input(input));
    stats["domain"] = domain;
    stats["skipped_rows"] = table.skipped_rows;
    write_json_file(stats, out);
    echo_config("ingest", {{"input", input}, {"domain", domain}, {"strict", strict}, {"out", out}});
    return kExitOk;
}

int cmd_make_splits(const CommonOptions& common, const std::string& input,
                    std::optional<std::string> domain, const std::string& preset,
                    const std::string& composition_path, std::optional<std::size_t> num_sets,
                    bool strict, std::string out) {
    json cfg = common.load();
    auto& split = cfg["split"];
    if (!preset.empty()) split["preset"] = preset;
    override(split, "num_sets", num_sets);
    if (common.seed) split["seed"] = *common.seed;
    const auto seed = split.value("seed", std::uint64_t{0});

    SplitSpec spec;
    std::string name;
    if (!composition_path.empty()) {
        auto comp = read_json_file(resolve_input(composition_path));
        spec = SplitSpec::from_json(comp);
        if (!comp.contains("num_sets")) spec.num_sets = split.value("num_sets", std::size_t{10});
        if (num_sets) spec.num_sets = *num_sets;
        spec.seed = seed;
        name = "custom";
        split["composition"] = spec.to_json().at("composition");
    } else if (split.contains("composition") && !split["composition"].is_null() && preset.empty()) {
        spec = SplitSpec::from_json(split);
        spec.seed = seed;
        name = "custom";
    } else {
        name = split.value("preset", std::string{});
        if (name.empty()) {
            throw Error(ErrorKind::io, "make-splits needs --preset or --composition");
        }
        spec = split_preset(name, seed);
        if (split.contains("num_sets")) spec.num_sets = split["num_sets"].get<std::size_t>();
    }
    const std::string domain_name =
        domain ? *domain : (name == "custom" ? "cidds1_internal" : std::string(to_string(preset_domain(name))));
    if (out.empty()) out = default_output("splits-" + name, seed);

    const auto table = load_table(input, domain_name, strict, cfg);
    const auto sets = make_eval_splits(table, spec);
    fs::create_directories(out);
    json manifest = {{"preset", name}, {"domain", domain_name}, {"spec", spec.to_json()},
                     {"source", basename(input)},
                     {"source_fingerprint", file_fingerprint(resolve_input(input))},
                     {"sets", json::array()}};
    for (std::size_t s = 0; s < sets.size(); ++s) {
        const auto file = fmt::format("{}_set{:02d}.csv", name, s);
        const auto path = (fs::path(out) / file).string();
        write_split_csv(sets[s], path);
        manifest["sets"].push_back({{"file", file},
                                    {"fingerprint", file_fingerprint(path)},
                                    {"stats", dataset_stats(sets[s]).to_json()}});
    }
    write_json_file(manifest, (fs::path(out) / "splits.json").string());
    echo_config("make-splits", {{"input", input}, {"domain", domain_name}, {"split", split}, {"out", out}});
    return kExitOk;
}

int cmd_fit_discretizer(const CommonOptions& common, const std::string& input,
                        const std::string& domain, std::optional<int> bins, bool strict,
                        std::string out) {
    json cfg = common.load();
    override(cfg["discretizer"], "bins", bins);
    if (out.empty()) out = default_output("discretizer.json", common.seed.value_or(0));
    const auto table = load_table(input, domain, strict, cfg);
    const auto model = fit_discretizer(table, DiscretizerConfig{cfg["discretizer"].value("bins", 32)});
    if (const auto parent = fs::path(out).parent_path(); !parent.empty()) fs::create_directories(parent);
    save_discretizer(model, out);
    echo_config("fit-discretizer", {{"input", input}, {"domain", domain}, {"discretizer", cfg["discretizer"]},
                                    {"out", out}, {"fingerprint", model.fingerprint()}});
    return kExitOk;
}

template <typename T>
int run_train(TrainPhase phase, const json& cfg, const TrainOptions& opts, bool from_scratch,
              const std::string& out) {
    const auto disc = load_discretizer(resolve_input(opts.discretizer_path));
    const auto table = load_table(opts.train_path, opts.domain, opts.strict, cfg);
    const auto tokens = transform_table(table, disc);

    const char* section = phase == TrainPhase::pretrain ? "pretrain" : "finetune";
    TrainConfig tc = TrainConfig::from_json(cfg[section], phase);
    tc.checkpoint_dir = out;
    tc.from_scratch = from_scratch;
    tc.train_path = opts.train_path;
    tc.discretizer_path = opts.discretizer_path;
    tc.init_checkpoint = opts.init;
    tc.extra_metadata = {
        {"experiment_config", cfg},
        {"inputs",
         {{"train", {{"file", basename(opts.train_path)},
                     {"fingerprint", file_fingerprint(resolve_input(opts.train_path))}}},
          {"discretizer", disc.fingerprint()}}}};

    ModelConfig mc = ModelConfig::from_json(cfg["model"]);
    mc.vocab_sizes = disc.vocab_sizes();

    std::optional<ModelCheckpoint<T>> start;
    if (!opts.init.empty()) {
        start = load_checkpoint<T>(resolve_input(opts.init), &disc);
    }
    const auto result = phase == TrainPhase::pretrain
                            ? pretrain<T>(tc, mc, tokens, disc.fingerprint(), std::move(start))
                            : finetune<T>(tc, mc, tokens, disc.fingerprint(), std::move(start));
    write_json_file(result.report.to_json(), (fs::path(out) / "train_report.json").string());
    result.report.write_loss_csv((fs::path(out) / "loss.csv").string());
    return kExitOk;
}

int cmd_train(TrainPhase phase, const CommonOptions& common, const ModelOptions& model_opts,
              TrainOptions opts, bool from_scratch) {
    json cfg = common.load();
    const char* section = phase == TrainPhase::pretrain ? "pretrain" : "finetune";
    model_opts.apply(cfg["model"]);
    opts.apply(cfg[section]);
    if (common.seed) cfg[section]["seed"] = *common.seed;
    if (common.deterministic) cfg[section]["deterministic"] = true;
    if (phase == TrainPhase::finetune && from_scratch) cfg[section]["from_scratch"] = true;
    from_scratch = cfg[section].value("from_scratch", false);
    if (phase == TrainPhase::finetune && opts.init.empty() && !from_scratch) {
        throw Error(ErrorKind::io, "finetune needs --init <pretrained checkpoint> or --from-scratch");
    }
    if (opts.out.empty()) {
        opts.out = default_output(phase == TrainPhase::pretrain ? "pretrained" : "finetuned",
                                  cfg[section].value("seed", std::uint64_t{0}));
    }
    echo_config(section, {{"train", opts.train_path}, {"discretizer", opts.discretizer_path},
                          {"init", opts.init}, {"out", opts.out}, {"model", cfg["model"]},
                          {section, cfg[section]}});

    const auto precision = parse_precision(cfg["model"].value("precision", std::string("f32")));
    return precision == Precision::f64 ? run_train<double>(phase, cfg, opts, from_scratch, opts.out)
                                       : run_train<float>(phase, cfg, opts, from_scratch, opts.out);
}

template <typename T>
DomainReports run_evaluate(const json& cfg, const std::string& checkpoint,
                           const DiscretizerModel& disc,
                           const std::vector<std::pair<std::string, std::vector<std::string>>>& domains,
                           bool deterministic, json& provenance) {
    const auto ckpt = load_checkpoint<T>(resolve_input(checkpoint), &disc);
    const int seq_len = cfg["eval"].value("seq_len", 32);
    const int batch_size = cfg["eval"].value("batch_size", 64);

    DomainReports reports;
    for (const auto& [domain, files] : domains) {
        DomainTag tag = DomainTag::cidds1_internal;
        try {
            tag = parse_domain_tag(domain);
        } catch (const Error&) {
        }
        auto evaluate_set = [&, tag](const std::string& path) {
            const auto table = load_flow_table(path, tag, false,
                                               CsvSchema::from_json(cfg.value("schema", json::object())));
            const auto tokens = transform_table(table, disc);
            const auto preds = predict_flows(ckpt, tokens, seq_len, disc.fingerprint(), batch_size);
            std::vector<BinaryLabel> predicted;
            std::vector<BinaryLabel> actual;
            for (std::size_t i = 0; i < preds.size(); ++i) {
                predicted.push_back(preds[i].predicted);
                actual.push_back(tokens.flows[i].binary_label);
            }
            return compute_metrics(confusion(predicted, actual), basename(path));
        };

        std::vector<EvalMetrics> metrics;
        if (deterministic) {
            for (const auto& f : files) metrics.push_back(evaluate_set(f));
        } else {
            std::vector<std::future<EvalMetrics>> jobs;
            for (const auto& f : files) jobs.push_back(std::async(std::launch::async, evaluate_set, f));
            for (auto& j : jobs) metrics.push_back(j.get());
        }
        json sets = json::array();
        for (const auto& f : files) {
            sets.push_back({{"file", basename(f)}, {"fingerprint", file_fingerprint(f)}});
        }
        provenance["sets"][domain] = sets;
        reports.emplace_back(domain, aggregate_runs(metrics));
    }
    return reports;
}

int cmd_evaluate(const CommonOptions& common, const std::string& checkpoint,
                 const std::string& discretizer_path, const std::vector<std::string>& set_args,
                 std::optional<int> seq_len, std::optional<int> batch_size, std::string out,
                 std::string text_out) {
    json cfg = common.load();
    override(cfg["eval"], "seq_len", seq_len);
    override(cfg["eval"], "batch_size", batch_size);

    std::vector<std::pair<std::string, std::vector<std::string>>> domains;
    if (!set_args.empty()) {
        for (const auto& arg : set_args) {
            const auto eq = arg.find('=');
            if (eq == std::string::npos) {
                throw Error(ErrorKind::io, "--set expects NAME=GLOB, got '" + arg + "'");
            }
            domains.emplace_back(arg.substr(0, eq), expand_glob(arg.substr(eq + 1)));
        }
    } else if (cfg["eval"].contains("domains")) {
        for (const auto& [name, pattern] : cfg["eval"]["domains"].items()) {
            domains.emplace_back(name, expand_glob(pattern.get<std::string>()));
        }
    }
    if (domains.empty()) {
        throw Error(ErrorKind::io, "evaluate needs at least one --set NAME=GLOB");
    }
    if (out.empty()) out = default_output("report.json", common.seed.value_or(0));
    json resolved_domains = json::object();
    for (const auto& [name, files] : domains) resolved_domains[name] = files;
    echo_config("evaluate", {{"checkpoint", checkpoint}, {"discretizer", discretizer_path},
                             {"eval", cfg["eval"]}, {"domains", resolved_domains}, {"out", out}});

    const auto disc = load_discretizer(resolve_input(discretizer_path));
    const auto manifest = read_manifest(resolve_input(checkpoint));
    const auto precision = parse_precision(manifest.value("dtype", std::string("f32")));

    json provenance = {{"checkpoint", checkpoint_fingerprint(resolve_input(checkpoint))},
                       {"discretizer", disc.fingerprint()},
                       {"eval", cfg["eval"]},
                       {"sets", json::object()}};
    const auto reports = precision == Precision::f64
                             ? run_evaluate<double>(cfg, checkpoint, disc, domains, common.deterministic, provenance)
                             : run_evaluate<float>(cfg, checkpoint, disc, domains, common.deterministic, provenance);

    json report = report_to_json(reports);
    report["provenance"] = provenance;
    write_json_file(report, out);
    const auto text = render_report(reports);
    if (text_out.empty()) {
        text_out = (fs::path(out).parent_path() / (fs::path(out).stem().string() + ".txt")).string();
    }
    write_text_file(text, text_out);
    std::cout << text;
    return kExitOk;
}

int cmd_report(const std::vector<std::string>& inputs, const std::string& format, const std::string& out) {
    DomainReports merged;
    for (const auto& path : inputs) {
        for (auto& entry : report_from_json(read_json_file(resolve_input(path)))) {
            merged.push_back(std::move(entry));
        }
    }
    std::string text;
    if (format == "json") {
        text = report_to_json(merged).dump(2) + "\n";
    } else if (format == "text") {
        text = render_report(merged);
    } else {
        throw Error(ErrorKind::io, "unknown report format '" + format + "'");
    }
    if (!out.empty()) {
        write_text_file(text, out);
    }
    std::cout << text;
    return kExitOk;
}

int cmd_synth(const std::string& domain, std::size_t flows, std::uint64_t seed, const std::string& out) {
    const auto tag = parse_domain_tag(domain);
    const auto table = synthetic_capture(tag, synthetic_composition(tag, flows), seed);
    if (const auto parent = fs::path(out).parent_path(); !parent.empty()) fs::create_directories(parent);
    write_raw_csv(table, out);
    std::cout << dataset_stats(table).to_json().dump() << std::endl;
    return kExitOk;
}

int exit_code_for(ErrorKind kind) {
    switch (kind) {
        case ErrorKind::data: return kExitDataError;
        case ErrorKind::io: return kExitUsageOrIo;
        case ErrorKind::fingerprint: return kExitFingerprint;
    }
    return kExitDataError;
}

}  // namespace

json default_experiment_config() {
    const ModelConfig model;
    TrainConfig pre;
    TrainConfig fine = TrainConfig::from_json(json::object(), TrainPhase::finetune);
    auto model_json = model.to_json();
    model_json.erase("vocab_sizes");
    model_json.erase("token_dim");
    auto train_section = [](const TrainConfig& c) {
        auto j = c.to_json();
        for (const auto* k : {"phase", "train_path", "discretizer_path", "init_checkpoint"}) j.erase(k);
        j["log_every"] = c.log_every;
        return j;
    };
    return {{"split", {{"num_sets", 10}, {"seed", 0}}},
            {"discretizer", {{"bins", 32}}},
            {"model", model_json},
            {"pretrain", train_section(pre)},
            {"finetune", train_section(fine)},
            {"eval", {{"seq_len", 32}, {"batch_size", 64}}},
            {"schema", json::object()}};
}

int run_cli(const std::vector<std::string>& args) {
    CLI::App app{"flowlm: flow sequences as language for intrusion detection"};
    app.require_subcommand(1);

    // ingest
    CommonOptions ingest_common;
    std::string ingest_input, ingest_domain = "cidds1_internal", ingest_out;
    bool ingest_strict = false;
    auto* ingest = app.add_subcommand("ingest", "Parse a flow CSV and write label statistics");
    ingest_common.attach(ingest);
    ingest->add_option("--input", ingest_input, "Flow CSV")->required();
    ingest->add_option("--domain", ingest_domain, "cidds1_internal | cidds1_external | cidds2");
    ingest->add_flag("--strict", ingest_strict, "Abort on the first malformed row");
    ingest->add_option("--out", ingest_out, "Statistics JSON to write");

    // make-splits
    CommonOptions split_common;
    std::string split_input, split_preset_name, split_composition, split_out;
    std::optional<std::string> split_domain;
    std::optional<std::size_t> split_num_sets;
    bool split_strict = false;
    auto* splits = app.add_subcommand("make-splits", "Sample fixed-composition evaluation sets");
    split_common.attach(splits);
    splits->add_option("--input", split_input, "Source flow CSV")->required();
    splits->add_option("--domain", split_domain, "Label domain (defaults to the preset's)");
    splits->add_option("--preset", split_preset_name, "cidds1-internal | cidds1-external | cidds2");
    splits->add_option("--composition", split_composition, "Custom composition JSON");
    splits->add_option("--num-sets", split_num_sets, "Number of sets");
    splits->add_flag("--strict", split_strict, "Abort on malformed rows");
    splits->add_option("--out", split_out, "Output directory");

    // fit-discretizer
    CommonOptions fit_common;
    std::string fit_input, fit_domain = "cidds1_internal", fit_out;
    std::optional<int> fit_bins;
    bool fit_strict = false;
    auto* fit = app.add_subcommand("fit-discretizer", "Fit per-feature bins on a training CSV");
    fit_common.attach(fit);
    fit->add_option("--input", fit_input, "Training flow CSV")->required();
    fit->add_option("--domain", fit_domain, "Label domain");
    fit->add_option("--bins", fit_bins, "Quantile bins per numeric feature");
    fit->add_flag("--strict", fit_strict, "Abort on malformed rows");
    fit->add_option("--out", fit_out, "Discretizer JSON to write");

    // pretrain
    CommonOptions pre_common;
    ModelOptions pre_model;
    TrainOptions pre_train;
    auto* pre = app.add_subcommand("pretrain", "Masked-flow pre-training");
    pre_common.attach(pre);
    pre_model.attach(pre);
    pre_train.attach(pre, true);

    // finetune
    CommonOptions fine_common;
    ModelOptions fine_model;
    TrainOptions fine_train;
    bool fine_scratch = false;
    auto* fine = app.add_subcommand("finetune", "Per-flow classification fine-tuning");
    fine_common.attach(fine);
    fine_model.attach(fine);
    fine_train.attach(fine, false);
    fine->add_flag("--from-scratch", fine_scratch, "Skip pre-training (random initialisation)");

    // evaluate
    CommonOptions eval_common;
    std::string eval_ckpt, eval_disc, eval_out, eval_text;
    std::vector<std::string> eval_sets;
    std::optional<int> eval_seq_len, eval_batch;
    auto* eval = app.add_subcommand("evaluate", "Score evaluation sets and aggregate per domain");
    eval_common.attach(eval);
    eval->add_option("--checkpoint", eval_ckpt, "Fine-tuned checkpoint directory")->required();
    eval->add_option("--discretizer", eval_disc, "Discretizer JSON")->required();
    eval->add_option("--set", eval_sets, "NAME=GLOB evaluation sets (repeatable)");
    eval->add_option("--seq-len", eval_seq_len, "Window length");
    eval->add_option("--batch-size", eval_batch, "Windows per forward pass");
    eval->add_option("--out", eval_out, "Report JSON to write");
    eval->add_option("--text", eval_text, "Text table to write (default: next to the JSON)");

    // report
    std::vector<std::string> report_inputs;
    std::string report_format = "text", report_out;
    auto* report = app.add_subcommand("report", "Render evaluation reports");
    report->add_option("--input", report_inputs, "Report JSON (repeatable)")->required();
    report->add_option("--format", report_format, "text | json");
    report->add_option("--out", report_out, "File to write");

    // synth
    std::string synth_domain = "cidds1_internal", synth_out;
    std::size_t synth_flows = 10000;
    std::uint64_t synth_seed = 0;
    auto* synth = app.add_subcommand("synth", "Write a synthetic CIDDS-style capture");
    synth->add_option("--domain", synth_domain, "Label domain");
    synth->add_option("--flows", synth_flows, "Approximate number of flows");
    synth->add_option("--seed", synth_seed, "Seed");
    synth->add_option("--out", synth_out, "CSV to write")->required();

    try {
        std::vector<std::string> reversed(args.rbegin(), args.rend());
        app.parse(reversed);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? kExitOk : kExitUsageOrIo;
    }

    try {
        if (ingest->parsed()) {
            return cmd_ingest(ingest_common, ingest_input, ingest_domain, ingest_strict, ingest_out);
        }
        if (splits->parsed()) {
            return cmd_make_splits(split_common, split_input, split_domain, split_preset_name,
                                   split_composition, split_num_sets, split_strict, split_out);
        }
        if (fit->parsed()) {
            return cmd_fit_discretizer(fit_common, fit_input, fit_domain, fit_bins, fit_strict, fit_out);
        }
        if (pre->parsed()) {
            return cmd_train(TrainPhase::pretrain, pre_common, pre_model, pre_train, false);
        }
        if (fine->parsed()) {
            return cmd_train(TrainPhase::finetune, fine_common, fine_model, fine_train, fine_scratch);
        }
        if (eval->parsed()) {
            return cmd_evaluate(eval_common, eval_ckpt, eval_disc, eval_sets, eval_seq_len, eval_batch,
                                eval_out, eval_text);
        }
        if (report->parsed()) {
            return cmd_report(report_inputs, report_format, report_out);
        }
        if (synth->parsed()) {
            return cmd_synth(synth_domain, synth_flows, synth_seed, synth_out);
        }
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << '\n';
        return exit_code_for(e.kind());
    } catch (const json::exception& e) {
        std::cerr << "error: bad configuration: " << e.what() << '\n';
        return kExitUsageOrIo;
    } catch (const fs::filesystem_error& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kExitUsageOrIo;
    }
    return kExitUsageOrIo;
}

}  // namespace flowlm
