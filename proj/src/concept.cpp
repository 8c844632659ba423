#include "ffscope/concept.hpp"

#include "ffscope/error.hpp"
#include "ffscope/report.hpp"
#include "ffscope/rng.hpp"

#include <algorithm>
#include <fstream>
#include <istream>
#include <map>
#include <ostream>

#include <fmt/format.h>

namespace ffscope {

std::regex compile_pattern(const std::string& pattern) {
    try {
        return std::regex(pattern, std::regex::ECMAScript);
    } catch (const std::regex_error& e) {
        throw Error(ErrorCode::InvalidPattern, fmt::format("'{}': {}", pattern, e.what()));
    }
}

ConceptSpec::ConceptSpec(std::string name, std::string trigger_pattern, std::string eval_pattern)
    : name_(std::move(name)), trigger_text_(std::move(trigger_pattern)), eval_text_(std::move(eval_pattern)),
      trigger_(compile_pattern(trigger_text_)), eval_(compile_pattern(eval_text_)) {
    if (name_.empty()) {
        throw Error(ErrorCode::InvalidArgument, "concept name is empty");
    }
    if (eval_.mark_count() != 1) {
        throw Error(ErrorCode::InvalidPattern,
                    fmt::format("eval pattern '{}' has {} capture groups, expected 1", eval_text_, eval_.mark_count()));
    }
}

bool ConceptSpec::matches_trigger(std::string_view text) const {
    return std::regex_search(text.begin(), text.end(), trigger_);
}

nlohmann::json ConceptSpec::to_json() const {
    return {{"name", name_}, {"trigger_pattern", trigger_text_}, {"eval_pattern", eval_text_}};
}

ConceptSpec ConceptSpec::from_json(const nlohmann::json& json) {
    try {
        return ConceptSpec(json.at("name").get<std::string>(), json.at("trigger_pattern").get<std::string>(),
                           json.at("eval_pattern").get<std::string>());
    } catch (const nlohmann::json::exception& e) {
        throw Error(ErrorCode::InvalidArgument, fmt::format("concept spec: {}", e.what()));
    }
}

ConceptSpec ConceptSpec::from_file(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) {
        throw Error(ErrorCode::IoFailure, fmt::format("cannot open concept spec '{}'", path.string()));
    }
    try {
        return from_json(nlohmann::json::parse(in));
    } catch (const nlohmann::json::exception& e) {
        throw Error(ErrorCode::InvalidArgument, fmt::format("concept spec '{}': {}", path.string(), e.what()));
    }
}

std::vector<ConceptSpec> default_concepts() {
    auto api = [](const char* name, const std::string& prefix) {
        return ConceptSpec(name, "\\b" + prefix + "\\.", "\\b" + prefix + "\\.([A-Za-z0-9_]+)");
    };
    auto method = [](const char* name, const std::string& call) {
        const std::string escaped = "\\." + call + "\\(";
        return ConceptSpec(name, escaped, "[A-Za-z0-9_)\\]](" + escaped + ")");
    };
    return {api("numpy", "np"),     api("torch", "torch"),   api("log", "log"),
            api("time", "time"),    method("equals", "equals"), method("get", "get")};
}

std::vector<ConceptKey> find_concept_keys(const TriggerStore& store, const Corpus& corpus,
                                          const ConceptSpec& concept_spec) {
    std::vector<ConceptKey> found;
    std::vector<signed char> verdict(corpus.size(), -1); // cached per prefix
    for (std::size_t flat = 0; flat < store.n_layers() * store.d_ff(); ++flat) {
        std::size_t frequency = 0;
        for (const auto& entry : store.sorted_entries(flat)) {
            if (entry.prefix >= corpus.size()) {
                throw Error(ErrorCode::IndexOutOfBounds,
                            fmt::format("prefix {} not present in a corpus of {}", entry.prefix, corpus.size()));
            }
            auto& v = verdict[entry.prefix];
            if (v < 0) {
                v = concept_spec.matches_trigger(corpus.prefixes[entry.prefix].text) ? 1 : 0;
            }
            frequency += static_cast<std::size_t>(v);
        }
        if (frequency > 0) {
            found.push_back({store.key_at(flat), frequency});
        }
    }
    return found;
}

std::size_t stratify(std::size_t frequency, std::size_t t) {
    if (t == 0 || frequency < 1 || frequency > t) {
        throw Error(ErrorCode::FrequencyOutOfRange, fmt::format("frequency {} outside [1, {}]", frequency, t));
    }
    return (kRangeCount * frequency + t - 1) / t;
}

std::vector<KeyId> sample_keys(const ConceptKeyReport& report, std::size_t per_range, std::uint64_t seed) {
    if (per_range == 0) {
        throw Error(ErrorCode::InvalidArgument, "per-range sample count must be at least 1");
    }
    std::map<std::pair<std::uint32_t, std::size_t>, std::vector<KeyId>> cells;
    for (const auto& entry : report.entries) {
        cells[{entry.key.layer, entry.range}].push_back(entry.key);
    }
    Rng rng(seed);
    std::vector<KeyId> sampled;
    for (auto& [cell, keys] : cells) {
        std::sort(keys.begin(), keys.end());
        const std::size_t take = std::min(per_range, keys.size());
        for (std::size_t i = 0; i < take; ++i) {
            std::swap(keys[i], keys[i + rng.below(keys.size() - i)]);
        }
        sampled.insert(sampled.end(), keys.begin(), keys.begin() + static_cast<std::ptrdiff_t>(take));
    }
    std::sort(sampled.begin(), sampled.end());
    return sampled;
}

double polysemantic_score(const TriggerStore& store, const Corpus& corpus, KeyId key,
                          const std::vector<std::regex>& library) {
    if (library.empty()) {
        throw Error(ErrorCode::InvalidArgument, "pattern library is empty");
    }
    const auto records = store.records(key);
    if (records.empty()) {
        return 1.0;
    }
    std::size_t best = 0;
    for (const auto& pattern : library) {
        std::size_t hits = 0;
        for (const auto& record : records) {
            const std::string& text = corpus.prefixes.at(record.prefix).text;
            hits += std::regex_search(text, pattern) ? 1 : 0;
        }
        best = std::max(best, hits);
    }
    return 1.0 - static_cast<double>(best) / static_cast<double>(records.size());
}

ConceptKeyReport build_concept_report(const TriggerStore& store, const Corpus& corpus,
                                      const ConceptSpec& concept_spec, const std::vector<std::regex>& library,
                                      std::size_t per_range, std::uint64_t seed) {
    ConceptKeyReport report;
    report.concept_name = concept_spec.name();
    report.t = store.capacity();
    for (const auto& found : find_concept_keys(store, corpus, concept_spec)) {
        ConceptKeyEntry entry;
        entry.key = found.key;
        entry.frequency = found.frequency;
        entry.range = stratify(found.frequency, store.capacity());
        entry.polysemantic_score = polysemantic_score(store, corpus, found.key, library);
        report.entries.push_back(entry);
    }
    const auto sampled = sample_keys(report, per_range, seed);
    for (auto& entry : report.entries) {
        entry.sampled = std::binary_search(sampled.begin(), sampled.end(), entry.key);
    }
    return report;
}

void write_concept_report_csv(std::ostream& out, const ConceptKeyReport& report) {
    out << "concept,layer,key_index,frequency,range,sampled,polysemantic_score\n";
    for (const auto& e : report.entries) {
        out << fmt::format("{},{},{},{},{},{},{:.4f}\n", csv_field(report.concept_name), e.key.layer, e.key.index,
                           e.frequency, e.range, e.sampled ? 1 : 0, e.polysemantic_score);
    }
}

ConceptKeyReport read_concept_report_csv(std::istream& in) {
    ConceptKeyReport report;
    std::string line;
    bool header_seen = false;
    while (std::getline(in, line)) {
        if (line.empty() || line.front() == '#') {
            continue;
        }
        if (!header_seen) {
            header_seen = true;
            continue;
        }
        const auto fields = split_csv_line(line);
        if (fields.size() != 7) {
            throw Error(ErrorCode::InvalidArgument, fmt::format("concept report row has {} fields", fields.size()));
        }
        try {
            report.concept_name = fields[0];
            ConceptKeyEntry e;
            e.key.layer = static_cast<std::uint32_t>(std::stoul(fields[1]));
            e.key.index = static_cast<std::uint32_t>(std::stoul(fields[2]));
            e.frequency = std::stoul(fields[3]);
            e.range = std::stoul(fields[4]);
            e.sampled = fields[5] == "1";
            e.polysemantic_score = std::stod(fields[6]);
            report.entries.push_back(e);
        } catch (const std::logic_error&) {
            throw Error(ErrorCode::InvalidArgument, fmt::format("malformed concept report row '{}'", line));
        }
    }
    return report;
}

} // namespace ffscope
