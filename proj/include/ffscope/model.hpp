#pragma once

#include "ffscope/tensor.hpp"

#include <cstddef>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace ffscope {

enum class Nonlinearity { relu, gelu };
enum class PositionEncoding { learned, none };
enum class NormPlacement { pre_ln };
enum class ResidualStyle { sequential, parallel };

struct ModelConfig {
    std::size_t n_layers = 1;
    std::size_t d_model = 8;
    std::size_t d_ff = 32;
    std::size_t vocab_size = 16;
    std::size_t n_heads = 1;
    std::size_t max_seq_len = 16;
    Nonlinearity nonlinearity = Nonlinearity::relu;
    PositionEncoding position_encoding = PositionEncoding::learned;
    NormPlacement norm_placement = NormPlacement::pre_ln;
    ResidualStyle residual_style = ResidualStyle::sequential;
    float layer_norm_eps = 1e-5f;

    [[nodiscard]] std::size_t total_keys() const noexcept { return n_layers * d_ff; }
    [[nodiscard]] std::size_t head_dim() const noexcept { return d_model / n_heads; }

    // Throws InvalidArgument when a dimension is zero or heads do not divide d_model.
    void validate() const;

    bool operator==(const ModelConfig&) const = default;
};

std::string to_string(Nonlinearity value);
std::string to_string(PositionEncoding value);
std::string to_string(NormPlacement value);
std::string to_string(ResidualStyle value);

struct LayerWeights {
    // Projections act on row vectors: out = x * W, each d_model x d_model.
    Matrix attn_query;
    Matrix attn_key;
    Matrix attn_value;
    Matrix attn_output;
    // Row i of ff_keys is key k_i; row i of ff_values is value v_i.
    Matrix ff_keys;
    Matrix ff_values;
    std::vector<float> ln1_gain;
    std::vector<float> ln1_bias;
    std::vector<float> ln2_gain;
    std::vector<float> ln2_bias;
};

struct WeightSet {
    Matrix token_embedding;    // vocab_size x d_model
    Matrix position_embedding; // max_seq_len x d_model, empty when position_encoding == none
    std::vector<LayerWeights> layers;
    std::vector<float> final_norm_gain;
    std::vector<float> final_norm_bias;
    Matrix output_embedding; // d_model x vocab_size
};

// One named tensor of a WeightSet together with the shape the config demands.
// The name is the on-disk identifier; `label` is the human-facing one used
// in error messages ("layer 1 ff_keys").
struct TensorSlot {
    std::string name;
    std::string label;
    std::vector<std::size_t> expected_shape;
    std::vector<std::size_t> actual_shape;
    std::span<float> data;
};

struct ConstTensorSlot {
    std::string name;
    std::string label;
    std::vector<std::size_t> expected_shape;
    std::vector<std::size_t> actual_shape;
    std::span<const float> data;
};

// Canonical, deterministic enumeration of every tensor the config requires.
std::vector<TensorSlot> tensor_slots(const ModelConfig& config, WeightSet& weights);
std::vector<ConstTensorSlot> tensor_slots(const ModelConfig& config, const WeightSet& weights);
std::vector<std::string> tensor_names(const ModelConfig& config);

// Correctly shaped weights: zeros everywhere except unit layer-norm gains.
WeightSet zero_weights(const ModelConfig& config);

// Seeded Gaussian weights with the given standard deviation (layer-norm
// gains stay 1, biases 0). Used by tests and the synth command.
WeightSet random_weights(const ModelConfig& config, std::uint64_t seed, float scale = 0.5f);

struct ForwardTrace {
    Matrix logits;                     // seq_len x vocab_size
    std::vector<Matrix> layer_outputs; // per layer: seq_len x d_model, block output
    std::vector<Matrix> ff_inputs;     // per layer: seq_len x d_model, input to the FF sublayer
    std::vector<Matrix> key_products;  // per layer: seq_len x d_ff, raw x . k_i

    [[nodiscard]] std::size_t seq_len() const noexcept { return logits.rows(); }
};

float activate(float value, Nonlinearity f) noexcept;

std::vector<float> layer_norm(std::span<const float> x, std::span<const float> gain,
                              std::span<const float> bias, float eps);

// f(x K^T) V
std::vector<float> ff_apply(std::span<const float> x, const Matrix& keys, const Matrix& values,
                            Nonlinearity f);

// (optionally final-layer-normed) h * E
std::vector<float> logits_from_hidden(std::span<const float> h, const ModelConfig& config,
                                      const WeightSet& weights, bool apply_final_norm);

// Probabilities in float, normalized with a double accumulator.
std::vector<float> softmax(std::span<const float> logits);

// Index of the largest entry; ties resolve to the lowest index.
TokenId argmax(std::span<const float> values) noexcept;

// Immutable, validated model handle. Copies share the underlying weights and
// are safe to use from many threads at once.
class Model {
public:
    [[nodiscard]] const ModelConfig& config() const noexcept { return state_->config; }
    [[nodiscard]] const WeightSet& weights() const noexcept { return state_->weights; }

    [[nodiscard]] ForwardTrace forward(std::span<const TokenId> tokens) const;

    [[nodiscard]] std::vector<float> logits_from_hidden(std::span<const float> h,
                                                        bool apply_final_norm) const;

private:
    struct State {
        ModelConfig config;
        WeightSet weights;
    };

    explicit Model(std::shared_ptr<const State> state) : state_(std::move(state)) {}
    friend Model build_model(ModelConfig config, WeightSet weights);

    std::shared_ptr<const State> state_;
};

// Validates shapes (ShapeMismatch naming the tensor) and finiteness
// (NonFiniteWeight) before handing out a model.
Model build_model(ModelConfig config, WeightSet weights);

} // namespace ffscope
