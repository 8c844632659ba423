#include "ffscope/editor.hpp"

#include "ffscope/error.hpp"
#include "ffscope/log.hpp"
#include "ffscope/parallel.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <ostream>
#include <set>

#include <fmt/format.h>

namespace ffscope {

namespace {

struct LineView {
    std::uint32_t file_id;
    std::uint32_t line;
    std::string_view text;
};

// Source lines in corpus order. Line corpora hold one line per prefix; window
// prefixes are split on newlines.
template <typename Fn>
void for_each_line(const Corpus& corpus, Fn&& fn) {
    for (const auto& prefix : corpus.prefixes) {
        if (corpus.granularity == Granularity::line) {
            if (!fn(LineView{prefix.file_id, prefix.line, prefix.text})) {
                return;
            }
            continue;
        }
        std::uint32_t offset = 0;
        for (const auto piece : split_lines(prefix.text)) {
            if (!piece.empty() && !fn(LineView{prefix.file_id, prefix.line + offset, piece})) {
                return;
            }
            ++offset;
        }
    }
}

double round2(double value) { return std::round(value * 100.0) / 100.0; }

} // namespace

nlohmann::json MaskSet::to_json() const {
    nlohmann::json keys_json = nlohmann::json::array();
    for (const auto& key : keys) {
        keys_json.push_back({{"layer", key.layer}, {"index", key.index}});
    }
    return {{"concept", concept_name}, {"keys", keys_json}};
}

MaskSet MaskSet::from_json(const nlohmann::json& json) {
    MaskSet mask;
    try {
        mask.concept_name = json.at("concept").get<std::string>();
        std::set<KeyId> seen;
        for (const auto& entry : json.at("keys")) {
            const KeyId key{entry.at("layer").get<std::uint32_t>(), entry.at("index").get<std::uint32_t>()};
            if (!seen.insert(key).second) {
                throw Error(ErrorCode::InvalidArgument,
                            fmt::format("mask lists key ({}, {}) twice", key.layer, key.index));
            }
            mask.keys.push_back(key);
        }
    } catch (const nlohmann::json::exception& e) {
        throw Error(ErrorCode::InvalidArgument, fmt::format("mask set: {}", e.what()));
    }
    return mask;
}

MaskSet MaskSet::from_file(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) {
        throw Error(ErrorCode::IoFailure, fmt::format("cannot open mask '{}'", path.string()));
    }
    try {
        return from_json(nlohmann::json::parse(in));
    } catch (const nlohmann::json::exception& e) {
        throw Error(ErrorCode::InvalidArgument, fmt::format("mask '{}': {}", path.string(), e.what()));
    }
}

WeightSet mask_keys(const ModelConfig& config, const WeightSet& weights, const MaskSet& mask) {
    for (const auto& key : mask.keys) {
        if (key.layer < 1 || key.layer > config.n_layers || key.index < 1 || key.index > config.d_ff) {
            throw Error(ErrorCode::KeyOutOfBounds, fmt::format("mask key ({}, {}) outside {} layers x {} keys",
                                                               key.layer, key.index, config.n_layers, config.d_ff));
        }
    }
    WeightSet out = weights;
    for (const auto& key : mask.keys) {
        auto row = out.layers.at(key.layer - 1).ff_keys.row(key.index - 1);
        std::fill(row.begin(), row.end(), 0.0f);
    }
    return out;
}

std::vector<EvalCase> build_concept_eval(const Corpus& corpus, const ConceptSpec& concept_spec,
                                         std::size_t max_cases) {
    std::vector<EvalCase> cases;
    for_each_line(corpus, [&](const LineView& line) {
        const std::string text(line.text);
        for (auto it = std::sregex_iterator(text.begin(), text.end(), concept_spec.eval_regex());
             it != std::sregex_iterator(); ++it) {
            if (cases.size() >= max_cases) {
                return false;
            }
            const auto& match = *it;
            if (!match[1].matched || match.length(1) == 0) {
                continue;
            }
            const auto start = static_cast<std::size_t>(match.position(1));
            EvalCase c;
            c.context = corpus.tokenizer.encode(std::string_view(text).substr(0, start));
            c.truth = corpus.tokenizer.encode(match.str(1));
            c.file_id = line.file_id;
            c.line = line.line;
            c.offset = start;
            if (c.context.empty()) {
                continue;
            }
            if (corpus.max_seq_len > 0) {
                if (c.truth.size() >= corpus.max_seq_len) {
                    continue;
                }
                const std::size_t room = corpus.max_seq_len - c.truth.size();
                if (c.context.size() > room) {
                    c.context.erase(c.context.begin(),
                                    c.context.begin() + static_cast<std::ptrdiff_t>(c.context.size() - room));
                }
            }
            cases.push_back(std::move(c));
        }
        return cases.size() < max_cases;
    });
    if (cases.empty()) {
        throw Error(ErrorCode::NoCasesFound,
                    fmt::format("no line matches the eval pattern of concept '{}'", concept_spec.name()));
    }
    return cases;
}

GeneralEval build_general_eval(const Corpus& corpus, const ConceptSpec& exclude, std::size_t budget) {
    if (budget == 0) {
        throw Error(ErrorCode::InvalidArgument, "general eval line budget must be at least 1");
    }
    GeneralEval eval;
    for_each_line(corpus, [&](const LineView& line) {
        if (exclude.matches_trigger(line.text)) {
            return true;
        }
        auto tokens = corpus.tokenizer.encode(line.text);
        if (corpus.max_seq_len > 0 && tokens.size() > corpus.max_seq_len) {
            tokens.resize(corpus.max_seq_len);
        }
        for (std::size_t k = 1; k < tokens.size(); ++k) {
            EvalCase c;
            c.context.assign(tokens.begin(), tokens.begin() + static_cast<std::ptrdiff_t>(k));
            c.truth = {tokens[k]};
            c.file_id = line.file_id;
            c.line = line.line;
            c.offset = corpus.tokenizer.decode(c.context).size();
            eval.cases.push_back(std::move(c));
        }
        return ++eval.lines_used < budget;
    });
    if (eval.lines_used < budget) {
        eval.insufficient_lines = true;
        log::warn(fmt::format("InsufficientLines: only {} concept-free lines for a budget of {}", eval.lines_used,
                              budget));
    }
    return eval;
}

double next_token_accuracy(const Model& model, const std::vector<EvalCase>& cases, std::size_t threads) {
    if (cases.empty()) {
        throw Error(ErrorCode::EmptyCases, "accuracy over zero cases is undefined");
    }
    std::vector<std::size_t> correct(std::max<std::size_t>(1, std::min(threads, cases.size())), 0);
    for_each_shard(cases.size(), correct.size(), [&](std::size_t shard, std::size_t begin, std::size_t end) {
        for (std::size_t c = begin; c < end; ++c) {
            const EvalCase& ec = cases[c];
            // Teacher-forced check of every truth position equals greedy exact match.
            std::vector<TokenId> input = ec.context;
            input.insert(input.end(), ec.truth.begin(), ec.truth.end() - 1);
            const ForwardTrace trace = model.forward(input);
            bool ok = true;
            for (std::size_t j = 0; j < ec.truth.size() && ok; ++j) {
                const std::size_t position = ec.context.size() - 1 + j;
                ok = argmax(trace.logits.row(position)) == ec.truth[j];
            }
            correct[shard] += ok ? 1 : 0;
        }
    });
    const std::size_t total = std::accumulate(correct.begin(), correct.end(), std::size_t{0});
    return 100.0 * static_cast<double>(total) / static_cast<double>(cases.size());
}

EvalReport ablation_report(const Model& baseline, const Model& masked, const std::string& concept_name,
                           const std::vector<EvalCase>& concept_cases, const std::vector<EvalCase>& general_cases,
                           std::size_t threads) {
    EvalReport report;
    report.concept_name = concept_name;
    report.concept_baseline = round2(next_token_accuracy(baseline, concept_cases, threads));
    report.concept_masked = round2(next_token_accuracy(masked, concept_cases, threads));
    report.concept_drop = round2(report.concept_baseline - report.concept_masked);
    report.general_baseline = round2(next_token_accuracy(baseline, general_cases, threads));
    report.general_masked = round2(next_token_accuracy(masked, general_cases, threads));
    report.general_drop = round2(report.general_baseline - report.general_masked);
    report.concept_cases = concept_cases.size();
    report.general_cases = general_cases.size();
    return report;
}

nlohmann::json eval_report_json(const EvalReport& report, const Provenance& provenance) {
    return {{"concept", report.concept_name},
            {"tokenizer", report.tokenizer},
            {"cells",
             {{"concept_baseline", report.concept_baseline},
              {"concept_masked", report.concept_masked},
              {"concept_drop", report.concept_drop},
              {"general_baseline", report.general_baseline},
              {"general_masked", report.general_masked},
              {"general_drop", report.general_drop}}},
            {"counts", {{"concept_cases", report.concept_cases}, {"general_cases", report.general_cases}}},
            {"provenance", provenance.to_json()}};
}

void write_eval_report_csv(std::ostream& out, const EvalReport& report, const Provenance& provenance) {
    write_csv_provenance(out, provenance);
    out << "concept,concept_baseline,concept_masked,concept_drop,general_baseline,general_masked,general_drop,"
           "concept_cases,general_cases\n";
    out << fmt::format("{},{:.2f},{:.2f},{:.2f},{:.2f},{:.2f},{:.2f},{},{}\n", csv_field(report.concept_name),
                       report.concept_baseline, report.concept_masked, report.concept_drop, report.general_baseline,
                       report.general_masked, report.general_drop, report.concept_cases, report.general_cases);
}

} // namespace ffscope
