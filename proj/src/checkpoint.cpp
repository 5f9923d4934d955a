#include "flowlm/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>

#include "flowlm/errors.hpp"
#include "flowlm/random.hpp"

namespace flowlm {

static_assert(std::endian::native == std::endian::little,
              "checkpoint I/O assumes a little-endian host");

namespace fs = std::filesystem;

namespace {

constexpr char kMagic[8] = {'F', 'L', 'O', 'W', 'L', 'M', 'W', '1'};

template <typename T>
constexpr std::string_view dtype_name() {
    return sizeof(T) == 4 ? "f32" : "f64";
}

std::size_t dtype_bytes(std::string_view dtype) {
    if (dtype == "f32") return 4;
    if (dtype == "f64") return 8;
    throw FormatVersionMismatch("unknown tensor dtype '" + std::string(dtype) + "'");
}

template <typename T>
void write_matrix(std::ofstream& out, const Matrix<T>& m) {
    out.write(reinterpret_cast<const char*>(m.data()),
              static_cast<std::streamsize>(static_cast<std::size_t>(m.size()) * sizeof(T)));
}

template <typename Stored, typename T>
void read_into(const std::vector<char>& blob, std::size_t offset, Matrix<T>& dst) {
    std::vector<Stored> tmp(static_cast<std::size_t>(dst.size()));
    std::memcpy(tmp.data(), blob.data() + offset, tmp.size() * sizeof(Stored));
    for (std::size_t i = 0; i < tmp.size(); ++i) {
        dst.data()[i] = static_cast<T>(tmp[i]);
    }
}

}  // namespace

std::string_view to_string(Phase p) { return p == Phase::pretrained ? "pretrained" : "finetuned"; }

Phase parse_phase(std::string_view s) {
    if (s == "pretrained") return Phase::pretrained;
    if (s == "finetuned") return Phase::finetuned;
    throw FormatVersionMismatch("unknown checkpoint phase '" + std::string(s) + "'");
}

nlohmann::json CheckpointMetadata::to_json() const {
    return {{"phase", std::string(to_string(phase))},
            {"step", step},
            {"seed", seed},
            {"discretizer_fingerprint", discretizer_fingerprint},
            {"from_scratch", from_scratch},
            {"extra", extra}};
}

CheckpointMetadata CheckpointMetadata::from_json(const nlohmann::json& j) {
    CheckpointMetadata m;
    m.phase = parse_phase(j.at("phase").get<std::string>());
    m.step = j.value("step", std::int64_t{0});
    m.seed = j.value("seed", std::uint64_t{0});
    m.discretizer_fingerprint = j.value("discretizer_fingerprint", std::string{});
    m.from_scratch = j.value("from_scratch", false);
    m.extra = j.value("extra", nlohmann::json::object());
    return m;
}

template <typename T>
void save_checkpoint(const ModelCheckpoint<T>& ckpt, const std::string& dir) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) {
        throw IoError("cannot create checkpoint directory '" + dir + "': " + ec.message());
    }

    struct Entry {
        std::string name;
        std::string role;
        const Matrix<T>* data;
        std::vector<std::size_t> shape;
    };
    std::vector<Entry> entries;
    const auto& params = ckpt.model.parameters();
    for (const auto& t : params) {
        entries.push_back({t.name, "parameter", &t.value, t.shape});
    }
    if (ckpt.optimizer) {
        for (std::size_t i = 0; i < params.size(); ++i) {
            entries.push_back({"adam.m/" + params[i].name, "adam_m", &ckpt.optimizer->m[i], params[i].shape});
        }
        for (std::size_t i = 0; i < params.size(); ++i) {
            entries.push_back({"adam.v/" + params[i].name, "adam_v", &ckpt.optimizer->v[i], params[i].shape});
        }
    }

    nlohmann::json table = nlohmann::json::array();
    std::size_t offset = kWeightsHeaderBytes;
    for (const auto& e : entries) {
        const std::size_t nbytes = static_cast<std::size_t>(e.data->size()) * sizeof(T);
        table.push_back({{"name", e.name},
                         {"role", e.role},
                         {"shape", e.shape},
                         {"dtype", std::string(dtype_name<T>())},
                         {"offset", offset},
                         {"nbytes", nbytes}});
        offset += nbytes;
    }

    nlohmann::json manifest = {{"format", "flowlm-checkpoint"},
                               {"version", kCheckpointVersion},
                               {"dtype", std::string(dtype_name<T>())},
                               {"config", ckpt.model.config().to_json()},
                               {"metadata", ckpt.metadata.to_json()},
                               {"header_bytes", kWeightsHeaderBytes},
                               {"total_bytes", offset},
                               {"tensors", table}};
    if (ckpt.optimizer) {
        manifest["optimizer"] = {{"type", "adam"}, {"step", ckpt.optimizer->step}};
    }

    const auto weights_path = (fs::path(dir) / "weights.bin").string();
    std::ofstream out(weights_path, std::ios::binary);
    if (!out) {
        throw IoError("cannot write '" + weights_path + "'");
    }
    out.write(kMagic, sizeof(kMagic));
    const std::uint32_t version = kCheckpointVersion;
    const auto count = static_cast<std::uint32_t>(entries.size());
    out.write(reinterpret_cast<const char*>(&version), sizeof(version));
    out.write(reinterpret_cast<const char*>(&count), sizeof(count));
    for (const auto& e : entries) {
        write_matrix(out, *e.data);
    }
    out.close();
    if (!out) {
        throw IoError("failed writing '" + weights_path + "'");
    }

    const auto manifest_path = (fs::path(dir) / "manifest.json").string();
    std::ofstream mout(manifest_path, std::ios::binary);
    if (!mout) {
        throw IoError("cannot write '" + manifest_path + "'");
    }
    mout << manifest.dump(2) << '\n';
    if (!mout) {
        throw IoError("failed writing '" + manifest_path + "'");
    }
}

nlohmann::json read_manifest(const std::string& dir) {
    const auto path = (fs::path(dir) / "manifest.json").string();
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw IoError("cannot open checkpoint manifest '" + path + "'");
    }
    nlohmann::json manifest;
    try {
        manifest = nlohmann::json::parse(in);
    } catch (const nlohmann::json::parse_error& e) {
        throw FormatVersionMismatch("checkpoint manifest '" + path + "' is not valid JSON: " + e.what());
    }
    if (!manifest.is_object() || manifest.value("version", -1) != kCheckpointVersion) {
        throw FormatVersionMismatch("unsupported checkpoint version in '" + path + "'");
    }
    return manifest;
}

std::string checkpoint_fingerprint(const std::string& dir) {
    return file_fingerprint((fs::path(dir) / "weights.bin").string());
}

template <typename T>
ModelCheckpoint<T> load_checkpoint(const std::string& dir, const DiscretizerModel* discretizer) {
    const auto manifest = read_manifest(dir);
    ModelConfig config;
    CheckpointMetadata metadata;
    try {
        config = ModelConfig::from_json(manifest.at("config"));
        metadata = CheckpointMetadata::from_json(manifest.at("metadata"));
    } catch (const nlohmann::json::exception& e) {
        throw FormatVersionMismatch(std::string("malformed checkpoint manifest: ") + e.what());
    }
    if (discretizer && discretizer->vocab_sizes() != config.vocab_sizes) {
        throw ConfigMismatch("checkpoint vocab sizes " + nlohmann::json(config.vocab_sizes).dump() +
                             " disagree with discretizer " +
                             nlohmann::json(discretizer->vocab_sizes()).dump());
    }

    const auto weights_path = (fs::path(dir) / "weights.bin").string();
    std::ifstream in(weights_path, std::ios::binary | std::ios::ate);
    if (!in) {
        throw IoError("cannot open '" + weights_path + "'");
    }
    const auto size = static_cast<std::size_t>(in.tellg());
    const auto expected = manifest.value("total_bytes", std::size_t{0});
    if (size != expected || size < kWeightsHeaderBytes) {
        throw FormatVersionMismatch("'" + weights_path + "' is " + std::to_string(size) +
                                    " bytes, manifest expects " + std::to_string(expected));
    }
    std::vector<char> blob(size);
    in.seekg(0);
    in.read(blob.data(), static_cast<std::streamsize>(size));
    if (!in || std::memcmp(blob.data(), kMagic, sizeof(kMagic)) != 0) {
        throw FormatVersionMismatch("'" + weights_path + "' has a bad header");
    }

    FlowTransformer<T> model(config);
    auto& params = model.parameters();
    std::optional<AdamState<T>> optimizer;
    if (manifest.contains("optimizer")) {
        optimizer = AdamState<T>::zeros_like(params);
        optimizer->step = manifest.at("optimizer").value("step", std::int64_t{0});
    }

    std::size_t assigned = 0;
    for (const auto& entry : manifest.at("tensors")) {
        const auto name = entry.at("name").get<std::string>();
        const auto role = entry.value("role", std::string("parameter"));
        const auto dtype = entry.at("dtype").get<std::string>();
        const auto offset = entry.at("offset").get<std::size_t>();
        const auto nbytes = entry.at("nbytes").get<std::size_t>();
        const auto shape = entry.at("shape").get<std::vector<std::size_t>>();

        std::string param_name = name;
        Matrix<T>* dst = nullptr;
        std::size_t index = 0;
        if (role == "adam_m" || role == "adam_v") {
            param_name = name.substr(name.find('/') + 1);
        }
        for (; index < params.size(); ++index) {
            if (params[index].name == param_name) break;
        }
        if (index == params.size()) {
            throw ConfigMismatch("checkpoint tensor '" + name + "' does not belong to this architecture");
        }
        if (shape != params[index].shape) {
            throw ConfigMismatch("checkpoint tensor '" + name + "' has an unexpected shape");
        }
        if (role == "parameter") {
            dst = &params[index].value;
            ++assigned;
        } else if (optimizer && role == "adam_m") {
            dst = &optimizer->m[index];
        } else if (optimizer && role == "adam_v") {
            dst = &optimizer->v[index];
        } else {
            throw FormatVersionMismatch("unknown tensor role '" + role + "'");
        }
        const std::size_t width = dtype_bytes(dtype);
        if (nbytes != static_cast<std::size_t>(dst->size()) * width || offset + nbytes > size) {
            throw FormatVersionMismatch("tensor '" + name + "' has an inconsistent byte range");
        }
        if (width == 4) {
            read_into<float>(blob, offset, *dst);
        } else {
            read_into<double>(blob, offset, *dst);
        }
    }
    if (assigned != params.size()) {
        throw ConfigMismatch("checkpoint is missing parameter tensors");
    }
    return ModelCheckpoint<T>{std::move(model), std::move(metadata), std::move(optimizer)};
}

template void save_checkpoint(const ModelCheckpoint<float>&, const std::string&);
template void save_checkpoint(const ModelCheckpoint<double>&, const std::string&);
template ModelCheckpoint<float> load_checkpoint(const std::string&, const DiscretizerModel*);
template ModelCheckpoint<double> load_checkpoint(const std::string&, const DiscretizerModel*);

}  // namespace flowlm
