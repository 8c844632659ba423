#pragma once

// Independent double-precision reference computations for tests. Nothing here
// calls into the library's numeric code paths.

#include "ffscope/corpus.hpp"
#include "ffscope/model.hpp"
#include "ffscope/trigger.hpp"

#include <cstdint>
#include <vector>

namespace ffscope::testing {

using Vec = std::vector<double>;
using Mat = std::vector<Vec>;

struct ReferenceTrace {
    Mat logits;                    // seq x vocab
    std::vector<Mat> layer_outputs; // layer x seq x d
    std::vector<Mat> key_products;  // layer x seq x d_ff
};

// Straight-line double-precision forward pass.
ReferenceTrace reference_forward(const ModelConfig& config, const WeightSet& weights,
                                 const std::vector<TokenId>& tokens);

double reference_activate(double x, Nonlinearity f);
Vec reference_layer_norm(const Vec& x, const std::vector<float>& gain, const std::vector<float>& bias, double eps);
Vec reference_lens(const ModelConfig& config, const WeightSet& weights, const Vec& h, bool apply_final_norm);

// Per flat key, every (prefix, coefficient) pair fully sorted and cut to t.
// Coefficients come from the model's own key products; only the ranking is
// recomputed.
std::vector<std::vector<TriggerStore::Entry>> brute_force_triggers(const Model& model, const Corpus& corpus,
                                                                   std::size_t t);

// Byte-level corpus whose prefixes are exactly `sequences`.
Corpus corpus_from_tokens(const std::vector<std::vector<TokenId>>& sequences, std::size_t max_seq_len,
                          Granularity granularity = Granularity::line);

// n prefixes of uniform random tokens below `vocab`, lengths in [min_len, max_len].
Corpus random_corpus(std::size_t n, std::size_t vocab, std::size_t min_len, std::size_t max_len,
                     std::uint64_t seed);

// Line corpus built from in-memory text with the given tokenizer.
Corpus corpus_from_lines(const std::vector<std::string>& lines, const Tokenizer& tokenizer,
                         std::size_t max_seq_len);

ModelConfig small_config(std::size_t n_layers, std::size_t d_model, std::size_t d_ff, std::size_t vocab,
                         std::size_t max_seq_len = 64);

} // namespace ffscope::testing
