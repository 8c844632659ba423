#pragma once

#include "ffscope/model.hpp"

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

namespace ffscope {

// .ffw layout (all integers little-endian):
//
//   offset 0   magic "FFSCOPE1"
//   offset 8   u32 format_version
//   offset 12  u32 reserved (0)
//   offset 16  u64 header_length
//   offset 24  header: canonical JSON {"config": {...}, "tensors": [...], "data_bytes": N}
//   ...        zero padding up to the next multiple of 64 (= data section start)
//   data       f32 row-major tensors; each directory offset is relative to the
//              data section start and a multiple of 64.
//
// Each directory entry is {"name", "dtype": "f32", "shape": [...], "offset"}.
inline constexpr char kWeightMagic[8] = {'F', 'F', 'S', 'C', 'O', 'P', 'E', '1'};
inline constexpr std::uint32_t kWeightFormatVersion = 1;
inline constexpr std::size_t kTensorAlignment = 64;

nlohmann::json config_to_json(const ModelConfig& config);
ModelConfig config_from_json(const nlohmann::json& json);

void write_weights(const std::filesystem::path& path, const ModelConfig& config,
                   const WeightSet& weights);

struct LoadedWeights {
    ModelConfig config;
    WeightSet weights;
};

LoadedWeights read_weights(const std::filesystem::path& path);

// Identity of a model for artifact headers: FNV-1a over the canonical config
// JSON followed by every tensor's bytes in directory order.
std::uint64_t weights_hash(const ModelConfig& config, const WeightSet& weights);

struct DetectorSpec {
    std::size_t layer = 1;     // 1-based
    std::size_t key_index = 1; // 1-based
    TokenId detect_token = 0;
    TokenId predict_token = 0;
    float gain = 10.0f;
};

struct DetectorOptions {
    float noise_scale = 0.01f;
    // Residual write of a fully active detector, in units of the predict
    // token's embedding.
    float write_scale = 2.0f;
};

nlohmann::json detector_spec_to_json(const DetectorSpec& spec);
DetectorSpec detector_spec_from_json(const nlohmann::json& json);

// Synthetic model with planted concept detectors.
//
// Construction: detect/predict tokens ("concept tokens") get mutually
// orthogonal, zero-mean embeddings of norm sqrt(d_model); every other token
// embedding, every non-detector key/value row and nothing else lives in the
// orthogonal complement. Attention value/output projections are zero (query
// and key carry only noise), positions are zero, layer norms are set such
// that a zero-mean unit-variance row passes through unchanged, and the output
// embedding is the transposed token embedding. Consequently:
//   - a position holding a detect token feeds exactly its embedding e_d to the
//     detector key k = gain * e_d, giving the coefficient gain * |e_d|^2;
//   - the detector's value row writes write_scale * e_predict into the
//     residual, making predict_token the argmax from that layer on;
//   - background keys are blind to concept tokens, so concept information
//     reaches the output only through the planted keys.
WeightSet build_detector_model(const ModelConfig& config, const std::vector<DetectorSpec>& specs,
                               std::uint64_t seed, const DetectorOptions& options = {});

} // namespace ffscope
