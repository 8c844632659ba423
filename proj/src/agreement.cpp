#include "ffscope/agreement.hpp"

#include "ffscope/error.hpp"
#include "ffscope/parallel.hpp"

#include <cmath>
#include <fstream>
#include <ostream>

#include <fmt/format.h>

namespace ffscope {

std::vector<std::vector<TokenId>> lens_top_tokens(const Model& model, const ForwardTrace& trace,
                                                  bool apply_final_norm) {
    const std::size_t n_layers = model.config().n_layers;
    std::vector<std::vector<TokenId>> top(trace.seq_len(), std::vector<TokenId>(n_layers));
    for (std::size_t p = 0; p < trace.seq_len(); ++p) {
        for (std::size_t l = 0; l < n_layers; ++l) {
            top[p][l] = argmax(model.logits_from_hidden(trace.layer_outputs[l].row(p), apply_final_norm));
        }
    }
    return top;
}

std::vector<LayerPrediction> layer_predictions(const Model& model, std::span<const TokenId> tokens,
                                               std::size_t position, bool apply_final_norm,
                                               bool keep_distribution) {
    if (position >= tokens.size()) {
        throw Error(ErrorCode::PositionOutOfRange,
                    fmt::format("position {} outside a sequence of {} tokens", position, tokens.size()));
    }
    const ForwardTrace trace = model.forward(tokens.first(position + 1));
    std::vector<LayerPrediction> out;
    for (std::size_t l = 0; l < model.config().n_layers; ++l) {
        const auto logits = model.logits_from_hidden(trace.layer_outputs[l].row(position), apply_final_norm);
        LayerPrediction prediction;
        prediction.layer = l + 1;
        prediction.top_token = argmax(logits);
        if (keep_distribution) {
            prediction.distribution = softmax(logits);
        }
        out.push_back(std::move(prediction));
    }
    return out;
}

double AgreementProfile::rate(std::size_t layer) const {
    if (examples == 0) {
        throw Error(ErrorCode::EmptyCorpus, "profile has no examples");
    }
    return static_cast<double>(agreeing.at(layer - 1)) / static_cast<double>(examples);
}

std::size_t AgreementMatrix::count(std::size_t layer, std::size_t context) const {
    return agreeing.at((layer - 1) * max_context + (context - 1));
}

std::optional<double> AgreementMatrix::rate(std::size_t layer, std::size_t context) const {
    if (absent(context)) {
        return std::nullopt;
    }
    return static_cast<double>(count(layer, context)) / static_cast<double>(examples.at(context - 1));
}

AgreementMatrix context_sweep(const Model& model, const Corpus& corpus, std::size_t max_context,
                              const LensOptions& options) {
    if (max_context == 0) {
        throw Error(ErrorCode::InvalidArgument, "maximum context size must be at least 1");
    }
    if (corpus.size() == 0) {
        throw Error(ErrorCode::EmptyCorpus, "cannot sweep an empty corpus");
    }
    const std::size_t n_layers = model.config().n_layers;
    const std::size_t threads = std::max<std::size_t>(1, std::min(options.threads, corpus.size()));
    std::vector<AgreementMatrix> shards(threads);
    for_each_shard(corpus.size(), threads, [&](std::size_t shard, std::size_t begin, std::size_t end) {
        AgreementMatrix& m = shards[shard];
        m.n_layers = n_layers;
        m.max_context = max_context;
        m.agreeing.assign(n_layers * max_context, 0);
        m.examples.assign(max_context, 0);
        for (std::size_t i = begin; i < end; ++i) {
            const auto& tokens = corpus.prefixes[i].tokens;
            const std::size_t length = std::min(tokens.size(), max_context);
            if (length == 0) {
                continue;
            }
            const ForwardTrace trace = model.forward(std::span(tokens).first(length));
            const auto top = lens_top_tokens(model, trace, options.apply_final_norm);
            for (std::size_t p = 0; p < length; ++p) {
                ++m.examples[p];
                const TokenId final_token = top[p][n_layers - 1];
                for (std::size_t l = 0; l < n_layers; ++l) {
                    m.agreeing[l * max_context + p] += top[p][l] == final_token ? 1 : 0;
                }
            }
        }
    });
    AgreementMatrix total = std::move(shards.front());
    for (std::size_t s = 1; s < shards.size(); ++s) {
        for (std::size_t k = 0; k < total.agreeing.size(); ++k) {
            total.agreeing[k] += shards[s].agreeing[k];
        }
        for (std::size_t c = 0; c < max_context; ++c) {
            total.examples[c] += shards[s].examples[c];
        }
    }
    return total;
}

AgreementProfile agreement_profile(const Model& model, const Corpus& corpus, const LensOptions& options) {
    if (corpus.size() == 0) {
        throw Error(ErrorCode::EmptyCorpus, "cannot profile an empty corpus");
    }
    std::size_t longest = 0;
    for (const auto& prefix : corpus.prefixes) {
        longest = std::max(longest, prefix.tokens.size());
    }
    if (longest == 0) {
        throw Error(ErrorCode::EmptyCorpus, "every corpus prefix is empty");
    }
    // The profile is the count-weighted marginal of the full-length sweep.
    const AgreementMatrix matrix = context_sweep(model, corpus, longest, options);
    AgreementProfile profile;
    profile.agreeing.assign(matrix.n_layers, 0);
    for (std::size_t c = 1; c <= longest; ++c) {
        profile.examples += matrix.examples[c - 1];
        for (std::size_t l = 1; l <= matrix.n_layers; ++l) {
            profile.agreeing[l - 1] += matrix.count(l, c);
        }
    }
    return profile;
}

void write_profile_csv(std::ostream& out, const AgreementProfile& profile, const Provenance& provenance) {
    write_csv_provenance(out, provenance);
    out << "layer,rate,count\n";
    for (std::size_t l = 1; l <= profile.n_layers(); ++l) {
        out << fmt::format("{},{:.6f},{}\n", l, profile.rate(l), profile.examples);
    }
}

void write_matrix_csv(std::ostream& out, const AgreementMatrix& matrix, const Provenance& provenance) {
    write_csv_provenance(out, provenance);
    out << "layer,context_size,rate,count\n";
    for (std::size_t l = 1; l <= matrix.n_layers; ++l) {
        for (std::size_t c = 1; c <= matrix.max_context; ++c) {
            const auto rate = matrix.rate(l, c);
            out << fmt::format("{},{},{},{}\n", l, c, rate ? fmt::format("{:.6f}", *rate) : std::string(),
                               matrix.examples[c - 1]);
        }
    }
}

namespace {

constexpr int kCell = 8;
constexpr int kLeft = 56;
constexpr int kTop = 16;
constexpr int kBottom = 48;
constexpr int kRight = 16;

std::string ramp(double rate) {
    // Light gray at 0 to full color at 1.
    constexpr int lo[3] = {230, 230, 230};
    constexpr int hi[3] = {8, 69, 148};
    int c[3];
    for (int i = 0; i < 3; ++i) {
        c[i] = static_cast<int>(std::lround(lo[i] + rate * (hi[i] - lo[i])));
    }
    return fmt::format("#{:02x}{:02x}{:02x}", c[0], c[1], c[2]);
}

std::string xml_escape(std::string_view text) {
    std::string out;
    for (char ch : text) {
        switch (ch) {
        case '&': out += "&amp;"; break;
        case '<': out += "&lt;"; break;
        case '>': out += "&gt;"; break;
        default: out += ch;
        }
    }
    return out;
}

} // namespace

void render_heatmap(std::ostream& out, const AgreementMatrix& matrix, const Provenance& provenance) {
    if (matrix.n_layers == 0 || matrix.max_context == 0) {
        throw Error(ErrorCode::InvalidArgument, "cannot render an empty agreement matrix");
    }
    const int L = static_cast<int>(matrix.n_layers);
    const int C = static_cast<int>(matrix.max_context);
    const int width = kLeft + C * kCell + kRight;
    const int height = kTop + L * kCell + kBottom;
    const int plot_bottom = kTop + L * kCell;

    out << fmt::format(R"(<svg xmlns="http://www.w3.org/2000/svg" width="{}" height="{}" viewBox="0 0 {} {}">)",
                       width, height, width, height)
        << '\n';
    out << "<metadata>" << xml_escape(provenance.to_json().dump()) << "</metadata>\n";
    out << "<defs><pattern id=\"hatch\" width=\"4\" height=\"4\" patternUnits=\"userSpaceOnUse\">"
           "<rect width=\"4\" height=\"4\" fill=\"#ffffff\"/>"
           "<path d=\"M0,4 L4,0\" stroke=\"#999999\" stroke-width=\"1\"/></pattern></defs>\n";
    out << "<g class=\"cells\">\n";
    // Layer 1 sits at the bottom, as in a layers-by-tokens plot.
    for (int l = 1; l <= L; ++l) {
        const int y = plot_bottom - l * kCell;
        for (int c = 1; c <= C; ++c) {
            const int x = kLeft + (c - 1) * kCell;
            const auto rate = matrix.rate(static_cast<std::size_t>(l), static_cast<std::size_t>(c));
            if (rate) {
                out << fmt::format(
                    R"(<rect class="cell" x="{}" y="{}" width="{}" height="{}" fill="{}" data-layer="{}" data-context="{}" data-rate="{:.6f}"/>)",
                    x, y, kCell, kCell, ramp(*rate), l, c, *rate);
            } else {
                out << fmt::format(
                    R"svg(<rect class="cell absent" x="{}" y="{}" width="{}" height="{}" fill="url(#hatch)" data-layer="{}" data-context="{}"/>)svg",
                    x, y, kCell, kCell, l, c);
            }
            out << '\n';
        }
    }
    out << "</g>\n<g class=\"axes\" font-family=\"sans-serif\" font-size=\"10\">\n";
    out << fmt::format(R"(<line x1="{}" y1="{}" x2="{}" y2="{}" stroke="#000000"/>)", kLeft, plot_bottom,
                       kLeft + C * kCell, plot_bottom)
        << '\n';
    out << fmt::format(R"(<line x1="{}" y1="{}" x2="{}" y2="{}" stroke="#000000"/>)", kLeft, kTop, kLeft,
                       plot_bottom)
        << '\n';
    for (int l = 5; l <= L; l += 5) {
        const int y = plot_bottom - l * kCell + kCell / 2;
        out << fmt::format(R"(<line class="tick y-tick" x1="{}" y1="{}" x2="{}" y2="{}" stroke="#000000"/>)",
                           kLeft - 4, y, kLeft, y)
            << fmt::format(R"(<text x="{}" y="{}" text-anchor="end">{}</text>)", kLeft - 6, y + 3, l) << '\n';
    }
    for (int c = 10; c <= C; c += 10) {
        const int x = kLeft + (c - 1) * kCell + kCell / 2;
        out << fmt::format(R"(<line class="tick x-tick" x1="{}" y1="{}" x2="{}" y2="{}" stroke="#000000"/>)", x,
                           plot_bottom, x, plot_bottom + 4)
            << fmt::format(R"(<text x="{}" y="{}" text-anchor="middle">{}</text>)", x, plot_bottom + 14, c)
            << '\n';
    }
    out << fmt::format(R"(<text class="axis-label x-label" x="{}" y="{}" text-anchor="middle">Tokens</text>)",
                       kLeft + C * kCell / 2, plot_bottom + 34)
        << '\n';
    out << fmt::format(
               R"svg(<text class="axis-label y-label" x="{}" y="{}" text-anchor="middle" transform="rotate(-90 {} {})">Layers</text>)svg",
               16, kTop + L * kCell / 2, 16, kTop + L * kCell / 2)
        << '\n';
    out << "</g>\n</svg>\n";
}

void render_heatmap(const std::filesystem::path& path, const AgreementMatrix& matrix, const Provenance& provenance) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) {
        throw Error(ErrorCode::IoFailure, fmt::format("cannot open '{}' for writing", path.string()));
    }
    render_heatmap(out, matrix, provenance);
    out.flush();
    if (!out) {
        throw Error(ErrorCode::IoFailure, fmt::format("write to '{}' failed", path.string()));
    }
}

} // namespace ffscope
