#include "ffscope/model.hpp"

#include "ffscope/error.hpp"
#include "ffscope/rng.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include <fmt/format.h>
#include <fmt/ranges.h>

namespace ffscope {

void ModelConfig::validate() const {
    if (n_layers == 0 || d_model == 0 || d_ff == 0 || vocab_size == 0 || n_heads == 0 ||
        max_seq_len == 0) {
        throw Error(ErrorCode::InvalidArgument, "model dimensions must all be >= 1");
    }
    if (d_model % n_heads != 0) {
        throw Error(ErrorCode::InvalidArgument,
                    fmt::format("d_model {} is not divisible by n_heads {}", d_model, n_heads));
    }
    if (!(layer_norm_eps > 0.0f) || !std::isfinite(layer_norm_eps)) {
        throw Error(ErrorCode::InvalidArgument, "layer_norm_eps must be positive and finite");
    }
}

std::string to_string(Nonlinearity value) { return value == Nonlinearity::relu ? "relu" : "gelu"; }
std::string to_string(PositionEncoding value) {
    return value == PositionEncoding::learned ? "learned" : "none";
}
std::string to_string(NormPlacement) { return "pre_ln"; }
std::string to_string(ResidualStyle value) {
    return value == ResidualStyle::sequential ? "sequential" : "parallel";
}

namespace {

std::span<float> as_span(std::vector<float>& v) { return {v.data(), v.size()}; }

TensorSlot matrix_slot(std::string name, std::string label, std::size_t rows, std::size_t cols,
                       Matrix& m) {
    return {std::move(name), std::move(label), {rows, cols}, {m.rows(), m.cols()}, m.values()};
}

TensorSlot vector_slot(std::string name, std::string label, std::size_t n, std::vector<float>& v) {
    return {std::move(name), std::move(label), {n}, {v.size()}, as_span(v)};
}

} // namespace

std::vector<TensorSlot> tensor_slots(const ModelConfig& c, WeightSet& w) {
    std::vector<TensorSlot> slots;
    slots.push_back(matrix_slot("token_embedding", "token_embedding", c.vocab_size, c.d_model,
                                w.token_embedding));
    if (c.position_encoding == PositionEncoding::learned) {
        slots.push_back(matrix_slot("position_embedding", "position_embedding", c.max_seq_len,
                                    c.d_model, w.position_embedding));
    }
    if (w.layers.size() != c.n_layers) {
        throw Error(ErrorCode::ShapeMismatch,
                    fmt::format("layers: expected {}, got {}", c.n_layers, w.layers.size()));
    }
    for (std::size_t l = 0; l < c.n_layers; ++l) {
        LayerWeights& layer = w.layers[l];
        const std::string prefix = fmt::format("layers.{}.", l + 1);
        const std::string label = fmt::format("layer {} ", l + 1);
        auto mat = [&](const char* what, std::size_t rows, std::size_t cols, Matrix& m) {
            slots.push_back(matrix_slot(prefix + what, label + what, rows, cols, m));
        };
        auto vec = [&](const char* what, std::vector<float>& v) {
            slots.push_back(vector_slot(prefix + what, label + what, c.d_model, v));
        };
        vec("ln1_gain", layer.ln1_gain);
        vec("ln1_bias", layer.ln1_bias);
        mat("attn_query", c.d_model, c.d_model, layer.attn_query);
        mat("attn_key", c.d_model, c.d_model, layer.attn_key);
        mat("attn_value", c.d_model, c.d_model, layer.attn_value);
        mat("attn_output", c.d_model, c.d_model, layer.attn_output);
        vec("ln2_gain", layer.ln2_gain);
        vec("ln2_bias", layer.ln2_bias);
        mat("ff_keys", c.d_ff, c.d_model, layer.ff_keys);
        mat("ff_values", c.d_ff, c.d_model, layer.ff_values);
    }
    slots.push_back(vector_slot("final_norm_gain", "final_norm_gain", c.d_model, w.final_norm_gain));
    slots.push_back(vector_slot("final_norm_bias", "final_norm_bias", c.d_model, w.final_norm_bias));
    slots.push_back(matrix_slot("output_embedding", "output_embedding", c.d_model, c.vocab_size,
                                w.output_embedding));
    return slots;
}

std::vector<ConstTensorSlot> tensor_slots(const ModelConfig& config, const WeightSet& weights) {
    std::vector<ConstTensorSlot> out;
    // The mutable enumeration only forms spans; nothing is written through them.
    for (auto& slot : tensor_slots(config, const_cast<WeightSet&>(weights))) {
        out.push_back({std::move(slot.name), std::move(slot.label), std::move(slot.expected_shape),
                       std::move(slot.actual_shape), slot.data});
    }
    return out;
}

std::vector<std::string> tensor_names(const ModelConfig& config) {
    WeightSet scratch;
    scratch.layers.resize(config.n_layers);
    std::vector<std::string> names;
    for (auto& slot : tensor_slots(config, scratch)) {
        names.push_back(slot.name);
    }
    return names;
}

WeightSet zero_weights(const ModelConfig& c) {
    WeightSet w;
    const std::size_t d = c.d_model;
    w.token_embedding = Matrix(c.vocab_size, d);
    if (c.position_encoding == PositionEncoding::learned) {
        w.position_embedding = Matrix(c.max_seq_len, d);
    }
    w.layers.resize(c.n_layers);
    for (auto& layer : w.layers) {
        layer.attn_query = Matrix(d, d);
        layer.attn_key = Matrix(d, d);
        layer.attn_value = Matrix(d, d);
        layer.attn_output = Matrix(d, d);
        layer.ff_keys = Matrix(c.d_ff, d);
        layer.ff_values = Matrix(c.d_ff, d);
        layer.ln1_gain.assign(d, 1.0f);
        layer.ln1_bias.assign(d, 0.0f);
        layer.ln2_gain.assign(d, 1.0f);
        layer.ln2_bias.assign(d, 0.0f);
    }
    w.final_norm_gain.assign(d, 1.0f);
    w.final_norm_bias.assign(d, 0.0f);
    w.output_embedding = Matrix(d, c.vocab_size);
    return w;
}

WeightSet random_weights(const ModelConfig& c, std::uint64_t seed, float scale) {
    c.validate();
    WeightSet w = zero_weights(c);
    Rng rng(seed);
    for (auto& slot : tensor_slots(c, w)) {
        if (slot.name.find("_gain") != std::string::npos || slot.name.find("_bias") != std::string::npos) {
            continue;
        }
        for (float& value : slot.data) {
            value = static_cast<float>(rng.normal() * scale);
        }
    }
    return w;
}

float activate(float value, Nonlinearity f) noexcept {
    if (f == Nonlinearity::relu) {
        return value > 0.0f ? value : 0.0f;
    }
    constexpr float kSqrt2OverPi = 0.7978845608028654f;
    const float inner = kSqrt2OverPi * (value + 0.044715f * value * value * value);
    return 0.5f * value * (1.0f + std::tanh(inner));
}

std::vector<float> layer_norm(std::span<const float> x, std::span<const float> gain,
                              std::span<const float> bias, float eps) {
    const std::size_t n = x.size();
    float mean = 0.0f;
    for (float v : x) {
        mean += v;
    }
    mean /= static_cast<float>(n);
    float var = 0.0f;
    for (float v : x) {
        const float centered = v - mean;
        var += centered * centered;
    }
    var /= static_cast<float>(n);
    const float inv = 1.0f / std::sqrt(var + eps);
    std::vector<float> out(n);
    for (std::size_t i = 0; i < n; ++i) {
        out[i] = (x[i] - mean) * inv * gain[i] + bias[i];
    }
    return out;
}

namespace {

float dot(std::span<const float> a, std::span<const float> b) noexcept {
    float acc = 0.0f;
    for (std::size_t i = 0; i < a.size(); ++i) {
        acc += a[i] * b[i];
    }
    return acc;
}

// out = x * W for a row vector x and W of shape x.size() x out.size().
void vec_mat(std::span<const float> x, const Matrix& w, std::span<float> out) noexcept {
    std::fill(out.begin(), out.end(), 0.0f);
    for (std::size_t i = 0; i < x.size(); ++i) {
        const float xi = x[i];
        const auto wrow = w.row(i);
        for (std::size_t j = 0; j < out.size(); ++j) {
            out[j] += xi * wrow[j];
        }
    }
}

Matrix mat_mul(const Matrix& x, const Matrix& w) {
    Matrix out(x.rows(), w.cols());
    for (std::size_t r = 0; r < x.rows(); ++r) {
        vec_mat(x.row(r), w, out.row(r));
    }
    return out;
}

Matrix norm_rows(const Matrix& h, const std::vector<float>& gain, const std::vector<float>& bias,
                 float eps) {
    Matrix out(h.rows(), h.cols());
    for (std::size_t r = 0; r < h.rows(); ++r) {
        const auto normed = layer_norm(h.row(r), gain, bias, eps);
        std::copy(normed.begin(), normed.end(), out.row(r).begin());
    }
    return out;
}

// Causal multi-head attention. Row p reads only rows <= p.
Matrix attention(const Matrix& normed, const LayerWeights& layer, const ModelConfig& c) {
    const std::size_t n = normed.rows();
    const Matrix q = mat_mul(normed, layer.attn_query);
    const Matrix k = mat_mul(normed, layer.attn_key);
    const Matrix v = mat_mul(normed, layer.attn_value);
    const std::size_t hd = c.head_dim();
    const float scale = 1.0f / std::sqrt(static_cast<float>(hd));

    Matrix context(n, c.d_model);
    std::vector<float> scores(n);
    for (std::size_t head = 0; head < c.n_heads; ++head) {
        const std::size_t off = head * hd;
        for (std::size_t p = 0; p < n; ++p) {
            const auto qp = q.row(p).subspan(off, hd);
            float max_score = -std::numeric_limits<float>::infinity();
            for (std::size_t j = 0; j <= p; ++j) {
                scores[j] = dot(qp, k.row(j).subspan(off, hd)) * scale;
                max_score = std::max(max_score, scores[j]);
            }
            float total = 0.0f;
            for (std::size_t j = 0; j <= p; ++j) {
                scores[j] = std::exp(scores[j] - max_score);
                total += scores[j];
            }
            auto out = context.row(p).subspan(off, hd);
            for (std::size_t j = 0; j <= p; ++j) {
                const float weight = scores[j] / total;
                const auto vj = v.row(j).subspan(off, hd);
                for (std::size_t i = 0; i < hd; ++i) {
                    out[i] += weight * vj[i];
                }
            }
        }
    }
    return mat_mul(context, layer.attn_output);
}

std::string shape_string(const std::vector<std::size_t>& shape) { return fmt::format("{}", fmt::join(shape, "x")); }

} // namespace

std::vector<float> ff_apply(std::span<const float> x, const Matrix& keys, const Matrix& values,
                            Nonlinearity f) {
    if (keys.cols() != x.size() || values.cols() != x.size() || keys.rows() != values.rows()) {
        throw Error(ErrorCode::ShapeMismatch,
                    fmt::format("ff_apply: x has {} entries, keys {}x{}, values {}x{}", x.size(),
                                keys.rows(), keys.cols(), values.rows(), values.cols()));
    }
    std::vector<float> out(x.size(), 0.0f);
    for (std::size_t i = 0; i < keys.rows(); ++i) {
        const float coeff = activate(dot(x, keys.row(i)), f);
        const auto v = values.row(i);
        for (std::size_t j = 0; j < out.size(); ++j) {
            out[j] += coeff * v[j];
        }
    }
    return out;
}

std::vector<float> logits_from_hidden(std::span<const float> h, const ModelConfig& config,
                                      const WeightSet& weights, bool apply_final_norm) {
    if (h.size() != config.d_model || weights.output_embedding.rows() != config.d_model) {
        throw Error(ErrorCode::ShapeMismatch,
                    fmt::format("logits_from_hidden: hidden has {} entries, d_model is {}", h.size(),
                                config.d_model));
    }
    std::vector<float> logits(weights.output_embedding.cols());
    if (apply_final_norm) {
        const auto normed = layer_norm(h, weights.final_norm_gain, weights.final_norm_bias,
                                       config.layer_norm_eps);
        vec_mat(normed, weights.output_embedding, logits);
    } else {
        vec_mat(h, weights.output_embedding, logits);
    }
    return logits;
}

std::vector<float> softmax(std::span<const float> logits) {
    std::vector<float> out(logits.size());
    if (logits.empty()) {
        return out;
    }
    const float max_logit = *std::max_element(logits.begin(), logits.end());
    double total = 0.0;
    std::vector<double> exps(logits.size());
    for (std::size_t i = 0; i < logits.size(); ++i) {
        exps[i] = std::exp(static_cast<double>(logits[i]) - max_logit);
        total += exps[i];
    }
    for (std::size_t i = 0; i < logits.size(); ++i) {
        out[i] = static_cast<float>(exps[i] / total);
    }
    return out;
}

TokenId argmax(std::span<const float> values) noexcept {
    TokenId best = 0;
    for (std::size_t i = 1; i < values.size(); ++i) {
        if (values[i] > values[best]) {
            best = static_cast<TokenId>(i);
        }
    }
    return best;
}

ForwardTrace Model::forward(std::span<const TokenId> tokens) const {
    const ModelConfig& c = config();
    const WeightSet& w = weights();
    const std::size_t n = tokens.size();
    if (n == 0) {
        throw Error(ErrorCode::InvalidArgument, "forward: empty token sequence");
    }
    if (n > c.max_seq_len) {
        throw Error(ErrorCode::SequenceTooLong,
                    fmt::format("sequence of {} tokens exceeds max_seq_len {}", n, c.max_seq_len));
    }
    for (TokenId t : tokens) {
        if (t >= c.vocab_size) {
            throw Error(ErrorCode::TokenOutOfVocab,
                        fmt::format("token id {} >= vocab_size {}", t, c.vocab_size));
        }
    }

    Matrix h(n, c.d_model);
    for (std::size_t p = 0; p < n; ++p) {
        auto row = h.row(p);
        const auto emb = w.token_embedding.row(tokens[p]);
        std::copy(emb.begin(), emb.end(), row.begin());
        if (c.position_encoding == PositionEncoding::learned) {
            const auto pos = w.position_embedding.row(p);
            for (std::size_t i = 0; i < c.d_model; ++i) {
                row[i] += pos[i];
            }
        }
    }

    ForwardTrace trace;
    trace.layer_outputs.reserve(c.n_layers);
    trace.ff_inputs.reserve(c.n_layers);
    trace.key_products.reserve(c.n_layers);
    for (const LayerWeights& layer : w.layers) {
        const Matrix attn = attention(norm_rows(h, layer.ln1_gain, layer.ln1_bias, c.layer_norm_eps),
                                      layer, c);
        Matrix residual = h;
        if (c.residual_style == ResidualStyle::sequential) {
            for (std::size_t i = 0; i < h.size(); ++i) {
                residual.values()[i] += attn.values()[i];
            }
        }
        // Under the parallel style the FF sublayer reads the block input.
        Matrix ff_in = norm_rows(c.residual_style == ResidualStyle::sequential ? residual : h,
                                 layer.ln2_gain, layer.ln2_bias, c.layer_norm_eps);

        Matrix products(n, c.d_ff);
        Matrix ff_out(n, c.d_model);
        for (std::size_t p = 0; p < n; ++p) {
            const auto x = ff_in.row(p);
            auto prod = products.row(p);
            auto out = ff_out.row(p);
            for (std::size_t i = 0; i < c.d_ff; ++i) {
                prod[i] = dot(x, layer.ff_keys.row(i));
                const float coeff = activate(prod[i], c.nonlinearity);
                const auto v = layer.ff_values.row(i);
                for (std::size_t j = 0; j < c.d_model; ++j) {
                    out[j] += coeff * v[j];
                }
            }
        }

        if (c.residual_style == ResidualStyle::parallel) {
            for (std::size_t i = 0; i < h.size(); ++i) {
                residual.values()[i] += attn.values()[i];
            }
        }
        for (std::size_t i = 0; i < h.size(); ++i) {
            residual.values()[i] += ff_out.values()[i];
        }
        h = std::move(residual);

        trace.layer_outputs.push_back(h);
        trace.ff_inputs.push_back(std::move(ff_in));
        trace.key_products.push_back(std::move(products));
    }

    trace.logits = Matrix(n, c.vocab_size);
    for (std::size_t p = 0; p < n; ++p) {
        const auto logits = ffscope::logits_from_hidden(h.row(p), c, w, true);
        std::copy(logits.begin(), logits.end(), trace.logits.row(p).begin());
    }
    return trace;
}

std::vector<float> Model::logits_from_hidden(std::span<const float> h, bool apply_final_norm) const {
    return ffscope::logits_from_hidden(h, config(), weights(), apply_final_norm);
}

Model build_model(ModelConfig config, WeightSet weights) {
    config.validate();
    if (weights.layers.size() != config.n_layers) {
        throw Error(ErrorCode::ShapeMismatch,
                    fmt::format("layers: expected {}, got {}", config.n_layers, weights.layers.size()));
    }
    if (config.position_encoding == PositionEncoding::none && !weights.position_embedding.empty()) {
        throw Error(ErrorCode::ShapeMismatch,
                    "position_embedding: must be empty when position_encoding is none");
    }
    for (const auto& slot : tensor_slots(config, weights)) {
        if (slot.expected_shape != slot.actual_shape) {
            throw Error(ErrorCode::ShapeMismatch,
                        fmt::format("{}: expected {}, got {}", slot.label,
                                    shape_string(slot.expected_shape), shape_string(slot.actual_shape)));
        }
    }
    for (const auto& slot : tensor_slots(config, weights)) {
        const auto bad = std::find_if(slot.data.begin(), slot.data.end(),
                                      [](float v) { return !std::isfinite(v); });
        if (bad != slot.data.end()) {
            throw Error(ErrorCode::NonFiniteWeight,
                        fmt::format("{}[{}] is not finite", slot.label, bad - slot.data.begin()));
        }
    }
    return Model(std::make_shared<const Model::State>(Model::State{config, std::move(weights)}));
}

} // namespace ffscope
