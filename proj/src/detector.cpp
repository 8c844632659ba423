#include "ffscope/error.hpp"
#include "ffscope/rng.hpp"
#include "ffscope/weight_io.hpp"

#include <algorithm>
#include <cmath>
#include <set>
#include <utility>

#include <fmt/format.h>

namespace ffscope {

namespace {

using Vec = std::vector<double>;

double dot(const Vec& a, const Vec& b) {
    double acc = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        acc += a[i] * b[i];
    }
    return acc;
}

void remove_mean(Vec& v) {
    double mean = 0.0;
    for (double x : v) {
        mean += x;
    }
    mean /= static_cast<double>(v.size());
    for (double& x : v) {
        x -= mean;
    }
}

// Projects onto the zero-mean subspace orthogonal to `basis` (orthonormal).
// Two passes of Gram-Schmidt keep the residual overlap near machine precision.
void project_out(Vec& v, const std::vector<Vec>& basis) {
    for (int pass = 0; pass < 2; ++pass) {
        remove_mean(v);
        for (const Vec& b : basis) {
            const double overlap = dot(v, b);
            for (std::size_t i = 0; i < v.size(); ++i) {
                v[i] -= overlap * b[i];
            }
        }
    }
}

Vec gaussian(Rng& rng, std::size_t n) {
    Vec v(n);
    for (double& x : v) {
        x = rng.normal();
    }
    return v;
}

Vec random_direction(Rng& rng, std::size_t n, const std::vector<Vec>& excluded) {
    for (;;) {
        Vec v = gaussian(rng, n);
        project_out(v, excluded);
        const double norm = std::sqrt(dot(v, v));
        if (norm > 1e-6) {
            for (double& x : v) {
                x /= norm;
            }
            return v;
        }
    }
}

void fill_row(std::span<float> row, const Vec& v, double scale) {
    for (std::size_t i = 0; i < row.size(); ++i) {
        row[i] = static_cast<float>(v[i] * scale);
    }
}

void validate_specs(const ModelConfig& config, const std::vector<DetectorSpec>& specs) {
    std::set<std::pair<std::size_t, std::size_t>> seen;
    for (const auto& spec : specs) {
        if (spec.layer < 1 || spec.layer > config.n_layers || spec.key_index < 1 ||
            spec.key_index > config.d_ff) {
            throw Error(ErrorCode::IndexOutOfBounds,
                        fmt::format("detector key ({}, {}) outside {} layers x {} keys", spec.layer,
                                    spec.key_index, config.n_layers, config.d_ff));
        }
        if (spec.detect_token >= config.vocab_size || spec.predict_token >= config.vocab_size) {
            throw Error(ErrorCode::IndexOutOfBounds,
                        fmt::format("detector tokens ({}, {}) outside vocab of {}", spec.detect_token,
                                    spec.predict_token, config.vocab_size));
        }
        if (spec.detect_token == spec.predict_token) {
            throw Error(ErrorCode::InvalidArgument, "detect_token and predict_token must differ");
        }
        if (!(spec.gain > 0.0f) || !std::isfinite(spec.gain)) {
            throw Error(ErrorCode::InvalidArgument, "detector gain must be positive and finite");
        }
        if (!seen.emplace(spec.layer, spec.key_index).second) {
            throw Error(ErrorCode::InvalidArgument,
                        fmt::format("key ({}, {}) planted twice", spec.layer, spec.key_index));
        }
    }
}

} // namespace

WeightSet build_detector_model(const ModelConfig& config, const std::vector<DetectorSpec>& specs,
                               std::uint64_t seed, const DetectorOptions& options) {
    config.validate();
    validate_specs(config, specs);

    std::vector<TokenId> concept_tokens;
    auto note = [&](TokenId t) {
        if (std::find(concept_tokens.begin(), concept_tokens.end(), t) == concept_tokens.end()) {
            concept_tokens.push_back(t);
        }
    };
    for (const auto& spec : specs) {
        note(spec.detect_token);
        note(spec.predict_token);
    }
    const std::size_t d = config.d_model;
    // The zero-mean subspace has d - 1 dimensions; keep at least one for background tokens.
    if (concept_tokens.size() + 2 > d) {
        throw Error(ErrorCode::InvalidArgument,
                    fmt::format("d_model {} too small for {} concept tokens", d, concept_tokens.size()));
    }

    Rng rng(seed);
    std::vector<Vec> concept_basis;
    for (std::size_t j = 0; j < concept_tokens.size(); ++j) {
        concept_basis.push_back(random_direction(rng, d, concept_basis));
    }
    auto concept_slot = [&](TokenId t) -> const Vec* {
        for (std::size_t j = 0; j < concept_tokens.size(); ++j) {
            if (concept_tokens[j] == t) {
                return &concept_basis[j];
            }
        }
        return nullptr;
    };

    const double norm = std::sqrt(static_cast<double>(d));
    WeightSet w = zero_weights(config);
    std::vector<Vec> embedding(config.vocab_size);
    for (TokenId t = 0; t < config.vocab_size; ++t) {
        const Vec* basis = concept_slot(t);
        embedding[t] = basis != nullptr ? *basis : random_direction(rng, d, concept_basis);
        fill_row(w.token_embedding.row(t), embedding[t], norm);
    }
    for (std::size_t i = 0; i < d; ++i) {
        for (TokenId t = 0; t < config.vocab_size; ++t) {
            w.output_embedding(i, t) = w.token_embedding(t, i);
        }
    }

    // A zero-mean row with unit variance leaves layer norm unchanged.
    const auto pass_gain = static_cast<float>(std::sqrt(1.0 + static_cast<double>(config.layer_norm_eps)));
    const double noise = options.noise_scale;

    for (std::size_t l = 0; l < config.n_layers; ++l) {
        LayerWeights& layer = w.layers[l];
        for (float& v : layer.attn_query.values()) {
            v = static_cast<float>(rng.normal() * noise);
        }
        for (float& v : layer.attn_key.values()) {
            v = static_cast<float>(rng.normal() * noise);
        }
        layer.ln2_gain.assign(d, pass_gain);
        for (std::size_t i = 0; i < config.d_ff; ++i) {
            fill_row(layer.ff_keys.row(i), random_direction(rng, d, concept_basis), noise * norm);
            fill_row(layer.ff_values.row(i), random_direction(rng, d, concept_basis), noise * norm);
        }
    }
    w.final_norm_gain.assign(d, pass_gain);

    for (const auto& spec : specs) {
        LayerWeights& layer = w.layers[spec.layer - 1];
        const std::size_t row = spec.key_index - 1;
        fill_row(layer.ff_keys.row(row), embedding[spec.detect_token],
                 static_cast<double>(spec.gain) * norm);
        // Fully active coefficient is gain * d, so this writes write_scale * e_predict.
        const double value_scale = options.write_scale / (static_cast<double>(spec.gain) * static_cast<double>(d));
        fill_row(layer.ff_values.row(row), embedding[spec.predict_token], value_scale * norm);
    }
    return w;
}

} // namespace ffscope
