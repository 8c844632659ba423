#pragma once

#include "ffscope/corpus.hpp"
#include "ffscope/trigger.hpp"

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <regex>
#include <string>
#include <vector>

#include <json.hpp>

namespace ffscope {

// A concept of interest. The trigger pattern is searched in trigger text; the
// eval pattern's single capture group marks the ground truth of an evaluation
// case, and the context is the line text before that group.
class ConceptSpec {
public:
    ConceptSpec(std::string name, std::string trigger_pattern, std::string eval_pattern);

    [[nodiscard]] const std::string& name() const noexcept { return name_; }
    [[nodiscard]] const std::string& trigger_pattern() const noexcept { return trigger_text_; }
    [[nodiscard]] const std::string& eval_pattern() const noexcept { return eval_text_; }
    [[nodiscard]] const std::regex& trigger_regex() const noexcept { return trigger_; }
    [[nodiscard]] const std::regex& eval_regex() const noexcept { return eval_; }

    [[nodiscard]] bool matches_trigger(std::string_view text) const;

    [[nodiscard]] nlohmann::json to_json() const;
    static ConceptSpec from_json(const nlohmann::json& json);
    static ConceptSpec from_file(const std::filesystem::path& path);

private:
    std::string name_;
    std::string trigger_text_;
    std::string eval_text_;
    std::regex trigger_;
    std::regex eval_;
};

// Throws InvalidPattern.
std::regex compile_pattern(const std::string& pattern);

// numpy, torch, log, time, equals, get
std::vector<ConceptSpec> default_concepts();

struct ConceptKey {
    KeyId key;
    std::size_t frequency = 0;

    bool operator==(const ConceptKey&) const = default;
};

// Keys with at least one top-t trigger matching the trigger pattern, in
// (layer, index) order.
std::vector<ConceptKey> find_concept_keys(const TriggerStore& store, const Corpus& corpus,
                                          const ConceptSpec& concept_spec);

constexpr std::size_t kRangeCount = 5;

// Equal-width closed ranges over [1, t]; t=50 gives 1-10, 11-20, ..., 41-50.
// Throws FrequencyOutOfRange.
std::size_t stratify(std::size_t frequency, std::size_t t);

struct ConceptKeyEntry {
    KeyId key;
    std::size_t frequency = 0;
    std::size_t range = 0;
    bool sampled = false;
    double polysemantic_score = 0.0;
};

struct ConceptKeyReport {
    std::string concept_name;
    std::size_t t = 0;
    std::vector<ConceptKeyEntry> entries;
};

// Up to per_range keys from every (layer, range) cell, uniform without
// replacement; cells with fewer keys are taken whole. Result in key order.
std::vector<KeyId> sample_keys(const ConceptKeyReport& report, std::size_t per_range, std::uint64_t seed);

constexpr double kPolysemanticThreshold = 0.5;

// 1 - (largest fraction of the key's triggers matched by one pattern).
// Throws InvalidArgument for an empty library.
double polysemantic_score(const TriggerStore& store, const Corpus& corpus, KeyId key,
                          const std::vector<std::regex>& library);

ConceptKeyReport build_concept_report(const TriggerStore& store, const Corpus& corpus,
                                      const ConceptSpec& concept_spec, const std::vector<std::regex>& library,
                                      std::size_t per_range, std::uint64_t seed);

// CSV: concept,layer,key_index,frequency,range,sampled,polysemantic_score
void write_concept_report_csv(std::ostream& out, const ConceptKeyReport& report);
ConceptKeyReport read_concept_report_csv(std::istream& in);

} // namespace ffscope
