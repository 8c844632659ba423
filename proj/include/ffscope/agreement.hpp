#pragma once

#include "ffscope/corpus.hpp"
#include "ffscope/model.hpp"
#include "ffscope/report.hpp"

#include <filesystem>
#include <iosfwd>
#include <optional>
#include <vector>

namespace ffscope {

struct LayerPrediction {
    std::size_t layer = 0; // 1-based
    TokenId top_token = 0;
    std::vector<float> distribution; // only filled when requested
};

struct LensOptions {
    bool apply_final_norm = true;
    std::size_t threads = 1;
};

// Logit-lens reading of every layer's block output at `position`.
// Throws PositionOutOfRange.
std::vector<LayerPrediction> layer_predictions(const Model& model, std::span<const TokenId> tokens,
                                               std::size_t position, bool apply_final_norm,
                                               bool keep_distribution = false);

// Top token per layer at each position of an existing trace: result[p][l].
std::vector<std::vector<TokenId>> lens_top_tokens(const Model& model, const ForwardTrace& trace,
                                                  bool apply_final_norm);

// Counts of examples whose layer-l top token equals the last layer's.
struct AgreementProfile {
    std::vector<std::size_t> agreeing; // per layer
    std::size_t examples = 0;

    [[nodiscard]] std::size_t n_layers() const noexcept { return agreeing.size(); }
    [[nodiscard]] double rate(std::size_t layer) const; // 1-based layer
};

// Every position of every corpus prefix is one example (the line prefix
// ending there). Throws EmptyCorpus.
AgreementProfile agreement_profile(const Model& model, const Corpus& corpus, const LensOptions& options = {});

// Layers x context sizes 1..C, bucketed by natural prefix length.
struct AgreementMatrix {
    std::size_t n_layers = 0;
    std::size_t max_context = 0;
    std::vector<std::size_t> agreeing; // n_layers x max_context, row-major
    std::vector<std::size_t> examples; // per context size

    [[nodiscard]] std::size_t count(std::size_t layer, std::size_t context) const;
    [[nodiscard]] bool absent(std::size_t context) const { return examples.at(context - 1) == 0; }
    // nullopt for absent columns.
    [[nodiscard]] std::optional<double> rate(std::size_t layer, std::size_t context) const;
};

AgreementMatrix context_sweep(const Model& model, const Corpus& corpus, std::size_t max_context,
                              const LensOptions& options = {});

// CSV: layer,rate,count
void write_profile_csv(std::ostream& out, const AgreementProfile& profile, const Provenance& provenance);
// CSV: layer,context_size,rate,count; absent cells have an empty rate.
void write_matrix_csv(std::ostream& out, const AgreementMatrix& matrix, const Provenance& provenance);

// Standalone SVG heatmap, layers on the y axis and context size (tokens) on x.
void render_heatmap(std::ostream& out, const AgreementMatrix& matrix, const Provenance& provenance);
void render_heatmap(const std::filesystem::path& path, const AgreementMatrix& matrix, const Provenance& provenance);

} // namespace ffscope
