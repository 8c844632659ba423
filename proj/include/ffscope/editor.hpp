#pragma once

#include "ffscope/concept.hpp"
#include "ffscope/corpus.hpp"
#include "ffscope/model.hpp"
#include "ffscope/report.hpp"
#include "ffscope/trigger.hpp"

#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include <json.hpp>

namespace ffscope {

struct MaskSet {
    std::string concept_name;
    std::vector<KeyId> keys;

    [[nodiscard]] nlohmann::json to_json() const;
    // Throws InvalidArgument on duplicates or malformed JSON.
    static MaskSet from_json(const nlohmann::json& json);
    static MaskSet from_file(const std::filesystem::path& path);
};

// Copy of `weights` with each masked key's ff_keys row zeroed. Throws KeyOutOfBounds.
WeightSet mask_keys(const ModelConfig& config, const WeightSet& weights, const MaskSet& mask);

struct EvalCase {
    std::vector<TokenId> context;
    std::vector<TokenId> truth;
    std::uint32_t file_id = 0;
    std::uint32_t line = 0;   // 1-based
    std::size_t offset = 0;   // byte offset of the truth within the line
};

// Cases in corpus order, one per eval-pattern match, capped at max_cases.
// Contexts longer than max_seq_len - |truth| keep their rightmost tokens.
// Throws NoCasesFound.
std::vector<EvalCase> build_concept_eval(const Corpus& corpus, const ConceptSpec& concept_spec,
                                         std::size_t max_cases);

struct GeneralEval {
    std::vector<EvalCase> cases;
    std::size_t lines_used = 0;
    bool insufficient_lines = false; // fewer clean lines than the budget
};

// The first `budget` lines not matching the concept's trigger pattern; each
// line of n tokens yields the n - 1 next-token cases of its prefixes.
GeneralEval build_general_eval(const Corpus& corpus, const ConceptSpec& exclude, std::size_t budget);

// Percentage of cases whose truth is reproduced exactly by greedy decoding
// from the context. Throws EmptyCases.
double next_token_accuracy(const Model& model, const std::vector<EvalCase>& cases, std::size_t threads = 1);

struct EvalReport {
    std::string concept_name;
    double concept_baseline = 0.0;
    double concept_masked = 0.0;
    double concept_drop = 0.0;
    double general_baseline = 0.0;
    double general_masked = 0.0;
    double general_drop = 0.0;
    std::size_t concept_cases = 0;
    std::size_t general_cases = 0;
    std::string tokenizer;
};

// Accuracies rounded to two decimals; drops are differences of the rounded values.
EvalReport ablation_report(const Model& baseline, const Model& masked, const std::string& concept_name,
                           const std::vector<EvalCase>& concept_cases, const std::vector<EvalCase>& general_cases,
                           std::size_t threads = 1);

nlohmann::json eval_report_json(const EvalReport& report, const Provenance& provenance);
void write_eval_report_csv(std::ostream& out, const EvalReport& report, const Provenance& provenance);

} // namespace ffscope
