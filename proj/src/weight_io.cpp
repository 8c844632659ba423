#include "ffscope/weight_io.hpp"

#include "ffscope/error.hpp"
#include "ffscope/hash.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <map>
#include <set>

#include <fmt/format.h>

namespace ffscope {

static_assert(std::endian::native == std::endian::little, "the .ffw format assumes a little-endian host");

namespace {

std::size_t align_up(std::size_t value) {
    return (value + kTensorAlignment - 1) / kTensorAlignment * kTensorAlignment;
}

template <typename Enum>
Enum parse_enum(const nlohmann::json& json, const char* field,
                std::initializer_list<std::pair<const char*, Enum>> options) {
    const auto text = json.at(field).get<std::string>();
    for (const auto& [name, value] : options) {
        if (text == name) {
            return value;
        }
    }
    throw Error(ErrorCode::InvalidArgument, fmt::format("unknown {} '{}'", field, text));
}

template <typename T>
void put(std::string& out, T value) {
    char bytes[sizeof(T)];
    std::memcpy(bytes, &value, sizeof(T));
    out.append(bytes, sizeof(T));
}

template <typename T>
T get(const std::vector<char>& in, std::size_t offset) {
    T value;
    std::memcpy(&value, in.data() + offset, sizeof(T));
    return value;
}

nlohmann::json build_header(const ModelConfig& config, const WeightSet& weights,
                            std::size_t& data_bytes) {
    nlohmann::json tensors = nlohmann::json::array();
    std::size_t offset = 0;
    for (const auto& slot : tensor_slots(config, weights)) {
        tensors.push_back({{"name", slot.name},
                           {"dtype", "f32"},
                           {"shape", slot.actual_shape},
                           {"offset", offset}});
        offset = align_up(offset + slot.data.size_bytes());
    }
    data_bytes = offset;
    return {{"config", config_to_json(config)}, {"tensors", tensors}, {"data_bytes", data_bytes}};
}

} // namespace

nlohmann::json config_to_json(const ModelConfig& c) {
    return {{"n_layers", c.n_layers},
            {"d_model", c.d_model},
            {"d_ff", c.d_ff},
            {"vocab_size", c.vocab_size},
            {"n_heads", c.n_heads},
            {"max_seq_len", c.max_seq_len},
            {"nonlinearity", to_string(c.nonlinearity)},
            {"position_encoding", to_string(c.position_encoding)},
            {"norm_placement", to_string(c.norm_placement)},
            {"residual_style", to_string(c.residual_style)},
            {"layer_norm_eps", c.layer_norm_eps}};
}

ModelConfig config_from_json(const nlohmann::json& json) {
    try {
        ModelConfig c;
        c.n_layers = json.at("n_layers").get<std::size_t>();
        c.d_model = json.at("d_model").get<std::size_t>();
        c.d_ff = json.value("d_ff", 4 * c.d_model);
        c.vocab_size = json.at("vocab_size").get<std::size_t>();
        c.n_heads = json.value("n_heads", std::size_t{1});
        c.max_seq_len = json.at("max_seq_len").get<std::size_t>();
        if (json.contains("nonlinearity")) {
            c.nonlinearity = parse_enum<Nonlinearity>(
                json, "nonlinearity", {{"relu", Nonlinearity::relu}, {"gelu", Nonlinearity::gelu}});
        }
        if (json.contains("position_encoding")) {
            c.position_encoding = parse_enum<PositionEncoding>(
                json, "position_encoding",
                {{"learned", PositionEncoding::learned}, {"none", PositionEncoding::none}});
        }
        if (json.contains("norm_placement")) {
            c.norm_placement =
                parse_enum<NormPlacement>(json, "norm_placement", {{"pre_ln", NormPlacement::pre_ln}});
        }
        if (json.contains("residual_style")) {
            c.residual_style = parse_enum<ResidualStyle>(
                json, "residual_style",
                {{"sequential", ResidualStyle::sequential}, {"parallel", ResidualStyle::parallel}});
        }
        c.layer_norm_eps = json.value("layer_norm_eps", 1e-5f);
        c.validate();
        return c;
    } catch (const nlohmann::json::exception& e) {
        throw Error(ErrorCode::InvalidArgument, fmt::format("model config: {}", e.what()));
    }
}

void write_weights(const std::filesystem::path& path, const ModelConfig& config,
                   const WeightSet& weights) {
    std::size_t data_bytes = 0;
    const std::string header = build_header(config, weights, data_bytes).dump();

    std::string prologue(kWeightMagic, sizeof(kWeightMagic));
    put<std::uint32_t>(prologue, kWeightFormatVersion);
    put<std::uint32_t>(prologue, 0);
    put<std::uint64_t>(prologue, header.size());
    prologue += header;
    prologue.resize(align_up(prologue.size()), '\0');

    std::string data(data_bytes, '\0');
    std::size_t offset = 0;
    for (const auto& slot : tensor_slots(config, weights)) {
        if (!slot.data.empty()) {
            std::memcpy(data.data() + offset, slot.data.data(), slot.data.size_bytes());
        }
        offset = align_up(offset + slot.data.size_bytes());
    }

    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) {
        throw Error(ErrorCode::IoFailure, fmt::format("cannot open '{}' for writing", path.string()));
    }
    out.write(prologue.data(), static_cast<std::streamsize>(prologue.size()));
    out.write(data.data(), static_cast<std::streamsize>(data.size()));
    out.flush();
    if (!out) {
        throw Error(ErrorCode::IoFailure, fmt::format("write to '{}' failed", path.string()));
    }
}

LoadedWeights read_weights(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw Error(ErrorCode::IoFailure, fmt::format("cannot open '{}'", path.string()));
    }
    std::vector<char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());

    if (bytes.size() < sizeof(kWeightMagic) ||
        std::memcmp(bytes.data(), kWeightMagic, sizeof(kWeightMagic)) != 0) {
        throw Error(ErrorCode::BadMagic, fmt::format("'{}' is not an .ffw file", path.string()));
    }
    if (bytes.size() < 24) {
        throw Error(ErrorCode::CorruptDirectory, "file ends inside the fixed header");
    }
    const auto version = get<std::uint32_t>(bytes, 8);
    if (version != kWeightFormatVersion) {
        throw Error(ErrorCode::VersionUnsupported, fmt::format("format version {}", version));
    }
    const auto header_length = get<std::uint64_t>(bytes, 16);
    if (header_length > bytes.size() - 24) {
        throw Error(ErrorCode::CorruptDirectory, "header length exceeds file size");
    }

    nlohmann::json header;
    ModelConfig config;
    try {
        header = nlohmann::json::parse(bytes.begin() + 24, bytes.begin() + 24 + header_length);
        config = config_from_json(header.at("config"));
    } catch (const nlohmann::json::exception& e) {
        throw Error(ErrorCode::CorruptDirectory, fmt::format("header: {}", e.what()));
    } catch (const Error& e) {
        throw Error(ErrorCode::CorruptDirectory, e.what());
    }

    const std::size_t data_start = align_up(24 + header_length);
    const std::size_t data_available = bytes.size() >= data_start ? bytes.size() - data_start : 0;

    struct Entry {
        std::vector<std::size_t> shape;
        std::size_t offset;
    };
    std::map<std::string, Entry> directory;
    try {
        for (const auto& t : header.at("tensors")) {
            const auto name = t.at("name").get<std::string>();
            if (t.at("dtype").get<std::string>() != "f32") {
                throw Error(ErrorCode::CorruptDirectory, fmt::format("{}: unsupported dtype", name));
            }
            if (!directory.emplace(name, Entry{t.at("shape").get<std::vector<std::size_t>>(),
                                               t.at("offset").get<std::size_t>()})
                     .second) {
                throw Error(ErrorCode::CorruptDirectory, fmt::format("{}: listed twice", name));
            }
        }
    } catch (const nlohmann::json::exception& e) {
        throw Error(ErrorCode::CorruptDirectory, fmt::format("directory: {}", e.what()));
    }

    const auto expected = tensor_names(config);
    if (directory.size() != expected.size() ||
        !std::all_of(expected.begin(), expected.end(),
                     [&](const std::string& n) { return directory.contains(n); })) {
        throw Error(ErrorCode::CorruptDirectory, "tensor names do not match the model config");
    }

    WeightSet weights = zero_weights(config);
    std::vector<std::pair<std::size_t, std::size_t>> extents;
    for (auto& slot : tensor_slots(config, weights)) {
        const Entry& entry = directory.at(slot.name);
        if (entry.shape != slot.expected_shape) {
            throw Error(ErrorCode::ShapeMismatch, fmt::format("{}: shape in file differs from config",
                                                              slot.label));
        }
        const std::size_t size = slot.data.size_bytes();
        if (entry.offset % kTensorAlignment != 0) {
            throw Error(ErrorCode::CorruptDirectory, fmt::format("{}: misaligned offset", slot.name));
        }
        if (entry.offset > data_available || size > data_available - entry.offset) {
            throw Error(ErrorCode::CorruptDirectory,
                        fmt::format("{}: tensor region lies beyond end of file", slot.name));
        }
        if (size > 0) {
            std::memcpy(slot.data.data(), bytes.data() + data_start + entry.offset, size);
        }
        extents.emplace_back(entry.offset, entry.offset + size);
    }
    std::sort(extents.begin(), extents.end());
    for (std::size_t i = 1; i < extents.size(); ++i) {
        if (extents[i].first < extents[i - 1].second) {
            throw Error(ErrorCode::CorruptDirectory, "tensor regions overlap");
        }
    }
    return {config, std::move(weights)};
}

std::uint64_t weights_hash(const ModelConfig& config, const WeightSet& weights) {
    Fnv1a hash;
    hash.update(config_to_json(config).dump());
    for (const auto& slot : tensor_slots(config, weights)) {
        hash.update(slot.name);
        hash.update(std::as_bytes(slot.data));
    }
    return hash.digest();
}

nlohmann::json detector_spec_to_json(const DetectorSpec& spec) {
    return {{"layer", spec.layer},
            {"key_index", spec.key_index},
            {"detect_token", spec.detect_token},
            {"predict_token", spec.predict_token},
            {"gain", spec.gain}};
}

DetectorSpec detector_spec_from_json(const nlohmann::json& json) {
    try {
        DetectorSpec spec;
        spec.layer = json.at("layer").get<std::size_t>();
        spec.key_index = json.at("key_index").get<std::size_t>();
        spec.detect_token = json.at("detect_token").get<TokenId>();
        spec.predict_token = json.at("predict_token").get<TokenId>();
        spec.gain = json.value("gain", 10.0f);
        return spec;
    } catch (const nlohmann::json::exception& e) {
        throw Error(ErrorCode::InvalidArgument, fmt::format("detector spec: {}", e.what()));
    }
}

} // namespace ffscope
