#include "ffscope/cli.hpp"

#include "ffscope/agreement.hpp"
#include "ffscope/concept.hpp"
#include "ffscope/corpus.hpp"
#include "ffscope/editor.hpp"
#include "ffscope/error.hpp"
#include "ffscope/log.hpp"
#include "ffscope/parallel.hpp"
#include "ffscope/report.hpp"
#include "ffscope/trigger.hpp"
#include "ffscope/weight_io.hpp"

#include <algorithm>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>

#include <CLI11.hpp>
#include <fmt/format.h>

namespace ffscope {

namespace fs = std::filesystem;

namespace {

struct GlobalArgs {
    std::string out;
    std::uint64_t seed = 0;
    std::size_t threads = 0;
    std::string config;
    bool post_nonlinearity = false;
    bool no_final_norm = false;
    bool last_position = false;
    bool quiet = false;
};

struct CorpusArgs {
    std::string corpus;
    std::vector<std::string> extensions{".py"};
    std::size_t max_files = 0;
    std::string vocab;
    std::size_t max_seq_len = 0;
};

struct Args {
    GlobalArgs global;
    CorpusArgs corpus;
    std::string source;
    std::string model;
    std::string store;
    std::string concept_path;
    std::string report;
    std::string mask;
    std::string mask_out;
    std::string write_model;
    std::string granularity = "window";
    std::size_t t = 50;
    std::size_t k = 10;
    std::uint32_t layer = 0;
    std::uint32_t index = 0;
    std::size_t per_range = 5;
    std::size_t min_frequency = 1;
    std::size_t max_cases = 10000;
    std::size_t general_lines = 10000;
    std::size_t max_context = 0;
    // synth
    std::string kind = "detector";
    std::string model_config;
    std::size_t n_layers = 2;
    std::size_t d_model = 16;
    std::size_t d_ff = 64;
    std::size_t vocab_size = 256;
    std::size_t n_heads = 2;
    std::size_t synth_max_seq_len = 64;
    std::vector<std::string> detectors;
    std::string detectors_file;
    float noise = 0.01f;
    float scale = 0.5f;
};

void write_text(const fs::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) {
        throw Error(ErrorCode::IoFailure, fmt::format("cannot open '{}' for writing", path.string()));
    }
    out << text;
    out.flush();
    if (!out) {
        throw Error(ErrorCode::IoFailure, fmt::format("write to '{}' failed", path.string()));
    }
}

fs::path output_dir(const Args& args) {
    fs::path dir = args.global.out;
    if (dir.empty()) {
        const char* env = std::getenv("FFSCOPE_OUT");
        dir = env != nullptr && *env != '\0' ? fs::path(env) : fs::path(".");
    }
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) {
        throw Error(ErrorCode::IoFailure, fmt::format("cannot create '{}': {}", dir.string(), ec.message()));
    }
    return dir;
}

std::size_t thread_count(const Args& args) {
    return args.global.threads == 0 ? default_thread_count() : args.global.threads;
}

Granularity parse_granularity(const std::string& text) {
    if (text == "window" || text == "file_window") {
        return Granularity::file_window;
    }
    if (text == "line") {
        return Granularity::line;
    }
    throw Error(ErrorCode::InvalidArgument, fmt::format("unknown granularity '{}'", text));
}

struct LoadedModel {
    Model model;
    std::uint64_t hash;
};

LoadedModel load_model(const std::string& path) {
    auto loaded = read_weights(path);
    const auto hash = weights_hash(loaded.config, loaded.weights);
    return {build_model(loaded.config, std::move(loaded.weights)), hash};
}

std::vector<std::string> normalized_extensions(const std::vector<std::string>& raw) {
    std::vector<std::string> out;
    for (const auto& e : raw) {
        out.push_back(!e.empty() && e.front() != '.' ? "." + e : e);
    }
    return out;
}

Tokenizer make_tokenizer(const CorpusArgs& args) {
    return args.vocab.empty() ? Tokenizer::byte_level() : Tokenizer::from_vocab_file(args.vocab);
}

// An ingest output directory is read as is; any other directory is ingested on the fly.
Corpus load_corpus(const CorpusArgs& args, Granularity granularity, std::size_t model_max_seq_len) {
    if (args.corpus.empty()) {
        throw Error(ErrorCode::InvalidArgument, "--corpus is required");
    }
    if (is_corpus_dir(args.corpus)) {
        Corpus corpus = read_corpus(args.corpus, granularity);
        if (model_max_seq_len > 0 && corpus.max_seq_len > model_max_seq_len) {
            throw Error(ErrorCode::InvalidArgument,
                        fmt::format("corpus was cut for max_seq_len {} but the model accepts {}", corpus.max_seq_len,
                                    model_max_seq_len));
        }
        return corpus;
    }
    const Tokenizer tokenizer = make_tokenizer(args);
    const auto manifest = ingest_dir(args.corpus, normalized_extensions(args.extensions), args.max_files);
    const std::size_t max_seq_len =
        args.max_seq_len > 0 ? args.max_seq_len : (model_max_seq_len > 0 ? model_max_seq_len : 2048);
    return build_corpus(load_sources(manifest, tokenizer), tokenizer, granularity, max_seq_len);
}

// The corpus granularity the store was scanned over, found by identity.
Corpus load_corpus_for_store(const CorpusArgs& args, const TriggerStore& store, std::size_t model_max_seq_len) {
    for (const auto g : {Granularity::file_window, Granularity::line}) {
        try {
            Corpus corpus = load_corpus(args, g, model_max_seq_len);
            if (corpus.hash() == store.corpus_hash()) {
                return corpus;
            }
        } catch (const Error& e) {
            if (e.code() != ErrorCode::IoFailure) {
                throw;
            }
        }
    }
    throw Error(ErrorCode::IncompatibleStores, "the trigger store was not scanned over this corpus");
}

nlohmann::json base_flags(const Args& args) {
    return {{"post_nonlinearity", args.global.post_nonlinearity},
            {"final_norm", !args.global.no_final_norm},
            {"last_position", args.global.last_position}};
}

Provenance provenance(const Args& args, std::uint64_t model_hash, std::uint64_t corpus_hash,
                      nlohmann::json extra = nlohmann::json::object()) {
    Provenance p;
    p.model_hash = model_hash;
    p.corpus_hash = corpus_hash;
    p.seed = args.global.seed;
    p.flags = base_flags(args);
    p.flags.update(extra);
    return p;
}

std::string default_store_path(const Args& args, const fs::path& out) {
    return args.store.empty() ? (out / "triggers.store").string() : args.store;
}

ConceptSpec load_concept(const std::string& spec) {
    for (auto& c : default_concepts()) {
        if (c.name() == spec) {
            return c;
        }
    }
    return ConceptSpec::from_file(spec);
}

std::vector<std::regex> pattern_library(const ConceptSpec& concept_spec) {
    std::vector<std::string> patterns;
    for (const auto& c : default_concepts()) {
        patterns.push_back(c.trigger_pattern());
    }
    if (std::find(patterns.begin(), patterns.end(), concept_spec.trigger_pattern()) == patterns.end()) {
        patterns.push_back(concept_spec.trigger_pattern());
    }
    std::vector<std::regex> library;
    for (const auto& p : patterns) {
        library.push_back(compile_pattern(p));
    }
    return library;
}

std::string file_safe(const std::string& name) {
    std::string out;
    for (char c : name) {
        out += std::isalnum(static_cast<unsigned char>(c)) || c == '-' || c == '_' ? c : '_';
    }
    return out;
}

DetectorSpec parse_detector(const std::string& text) {
    std::vector<std::string> parts;
    std::stringstream ss(text);
    for (std::string part; std::getline(ss, part, ':');) {
        parts.push_back(part);
    }
    if (parts.size() != 4 && parts.size() != 5) {
        throw Error(ErrorCode::InvalidArgument,
                    fmt::format("detector '{}' is not layer:key:detect:predict[:gain]", text));
    }
    try {
        DetectorSpec spec;
        spec.layer = std::stoul(parts[0]);
        spec.key_index = std::stoul(parts[1]);
        spec.detect_token = static_cast<TokenId>(std::stoul(parts[2]));
        spec.predict_token = static_cast<TokenId>(std::stoul(parts[3]));
        if (parts.size() == 5) {
            spec.gain = std::stof(parts[4]);
        }
        return spec;
    } catch (const std::logic_error&) {
        throw Error(ErrorCode::InvalidArgument, fmt::format("detector '{}' has a non-numeric field", text));
    }
}

nlohmann::json read_json_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) {
        throw Error(ErrorCode::IoFailure, fmt::format("cannot open '{}'", path));
    }
    try {
        return nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
        throw Error(ErrorCode::InvalidArgument, fmt::format("'{}': {}", path, e.what()));
    }
}

// ---- subcommands ----

int cmd_ingest(const Args& args, std::ostream& out) {
    const fs::path dir = output_dir(args);
    const Tokenizer tokenizer = make_tokenizer(args.corpus);
    const auto manifest = ingest_dir(args.source, normalized_extensions(args.corpus.extensions), args.corpus.max_files);
    const auto sources = load_sources(manifest, tokenizer);
    const std::size_t max_seq_len = args.corpus.max_seq_len > 0 ? args.corpus.max_seq_len : 2048;
    for (const auto g : {Granularity::file_window, Granularity::line}) {
        write_corpus(dir, build_corpus(sources, tokenizer, g, max_seq_len));
    }
    const Corpus lines = read_corpus(dir, Granularity::line);
    out << format_stats(corpus_stats(lines)) << '\n';
    return 0;
}

int cmd_stats(const Args& args, std::ostream& out) {
    const Corpus corpus = load_corpus(args.corpus, Granularity::line, 0);
    const auto stats = corpus_stats(corpus);
    out << format_stats(stats) << '\n';
    if (!args.global.out.empty() || std::getenv("FFSCOPE_OUT") != nullptr) {
        const nlohmann::json j = {{"files", stats.files},
                                  {"lines", stats.lines},
                                  {"tokens", stats.tokens},
                                  {"avg_lines_per_file", stats.avg_lines_per_file},
                                  {"avg_tokens_per_line", stats.avg_tokens_per_line},
                                  {"tokenizer", stats.tokenizer},
                                  {"provenance", provenance(args, 0, corpus.hash()).to_json()}};
        write_text(output_dir(args) / "stats.json", j.dump(2) + "\n");
    }
    return 0;
}

int cmd_scan(const Args& args, std::ostream& out) {
    const fs::path dir = output_dir(args);
    const auto loaded = load_model(args.model);
    const Corpus corpus =
        load_corpus(args.corpus, parse_granularity(args.granularity), loaded.model.config().max_seq_len);
    ScanOptions options;
    options.threads = thread_count(args);
    options.mode.post_nonlinearity = args.global.post_nonlinearity;
    options.mode.last_position_only = args.global.last_position;
    log::info(fmt::format("scanning {} prefixes over {} keys", corpus.size(), loaded.model.config().total_keys()));
    const TriggerStore store = scan(loaded.model, corpus, args.t, options);
    const fs::path path = dir / "triggers.store";
    write_store(path, store);
    out << fmt::format("{} keys x top {} over {} prefixes -> {}\n", loaded.model.config().total_keys(), args.t,
                       corpus.size(), path.string());
    return 0;
}

int cmd_triggers(const Args& args, std::ostream& out) {
    const fs::path dir = output_dir(args);
    const TriggerStore store = read_store(default_store_path(args, dir));
    const Corpus corpus = load_corpus_for_store(args.corpus, store, 0);
    if (args.layer != 0 || args.index != 0) {
        const KeyId key{args.layer, args.index};
        std::size_t rank = 1;
        for (const auto& trigger : top_triggers(store, corpus, key, args.k)) {
            out << fmt::format("{}\t{:.6f}\t{}\n", rank++, trigger.coefficient, trigger.text);
        }
        return 0;
    }
    std::ostringstream jsonl;
    export_triggers_jsonl(jsonl, store, corpus, args.k);
    write_text(dir / "triggers.jsonl", jsonl.str());
    out << (dir / "triggers.jsonl").string() << '\n';
    return 0;
}

ConceptKeyReport concept_report(const Args& args, const TriggerStore& store, const Corpus& corpus,
                                const ConceptSpec& concept_spec) {
    return build_concept_report(store, corpus, concept_spec, pattern_library(concept_spec), args.per_range,
                                args.global.seed);
}

void write_report(const fs::path& path, const ConceptKeyReport& report, const Provenance& p) {
    std::ostringstream csv;
    write_csv_provenance(csv, p);
    write_concept_report_csv(csv, report);
    write_text(path, csv.str());
}

int cmd_concept_keys(const Args& args, std::ostream& out) {
    const fs::path dir = output_dir(args);
    const TriggerStore store = read_store(default_store_path(args, dir));
    const Corpus corpus = load_corpus_for_store(args.corpus, store, 0);
    const ConceptSpec concept_spec = load_concept(args.concept_path);
    const auto report = concept_report(args, store, corpus, concept_spec);
    const fs::path path = dir / fmt::format("concept_keys_{}.csv", file_safe(concept_spec.name()));
    write_report(path, report,
                 provenance(args, store.model_hash(), store.corpus_hash(),
                            {{"concept", concept_spec.to_json()},
                             {"t", store.capacity()},
                             {"per_range", args.per_range},
                             {"polysemantic_threshold", kPolysemanticThreshold}}));
    out << fmt::format("{} keys related to '{}' -> {}\n", report.entries.size(), concept_spec.name(), path.string());
    return 0;
}

int cmd_sample(const Args& args, std::ostream& out) {
    const fs::path dir = output_dir(args);
    std::ifstream in(args.report);
    if (!in) {
        throw Error(ErrorCode::IoFailure, fmt::format("cannot open report '{}'", args.report));
    }
    ConceptKeyReport report = read_concept_report_csv(in);
    const auto sampled = sample_keys(report, args.per_range, args.global.seed);
    for (auto& e : report.entries) {
        e.sampled = std::binary_search(sampled.begin(), sampled.end(), e.key);
    }
    const fs::path path = dir / fmt::format("sample_{}.csv", file_safe(report.concept_name));
    write_report(path, report, provenance(args, 0, 0, {{"per_range", args.per_range}}));
    for (const auto& key : sampled) {
        out << fmt::format("{}\t{}\n", key.layer, key.index);
    }
    return 0;
}

int cmd_mask(const Args& args, std::ostream& out) {
    const fs::path dir = output_dir(args);
    MaskSet mask;
    if (!args.report.empty()) {
        std::ifstream in(args.report);
        if (!in) {
            throw Error(ErrorCode::IoFailure, fmt::format("cannot open report '{}'", args.report));
        }
        const auto report = read_concept_report_csv(in);
        mask.concept_name = report.concept_name;
        for (const auto& e : report.entries) {
            if (e.frequency >= args.min_frequency) {
                mask.keys.push_back(e.key);
            }
        }
    } else {
        const TriggerStore store = read_store(default_store_path(args, dir));
        const Corpus corpus = load_corpus_for_store(args.corpus, store, 0);
        const ConceptSpec concept_spec = load_concept(args.concept_path);
        mask.concept_name = concept_spec.name();
        for (const auto& found : find_concept_keys(store, corpus, concept_spec)) {
            if (found.frequency >= args.min_frequency) {
                mask.keys.push_back(found.key);
            }
        }
    }
    const fs::path path = args.mask_out.empty() ? dir / "mask.json" : fs::path(args.mask_out);
    write_text(path, mask.to_json().dump(2) + "\n");
    if (!args.write_model.empty()) {
        const auto loaded = read_weights(args.model);
        write_weights(args.write_model, loaded.config, mask_keys(loaded.config, loaded.weights, mask));
    }
    out << fmt::format("{} keys masked for '{}' -> {}\n", mask.keys.size(), mask.concept_name, path.string());
    return 0;
}

int cmd_eval(const Args& args, std::ostream& out) {
    const fs::path dir = output_dir(args);
    const auto baseline = load_model(args.model);
    const MaskSet mask = MaskSet::from_file(args.mask);
    const Model masked = build_model(baseline.model.config(),
                                     mask_keys(baseline.model.config(), baseline.model.weights(), mask));
    const ConceptSpec concept_spec = load_concept(args.concept_path);
    const Corpus corpus = load_corpus(args.corpus, Granularity::line, baseline.model.config().max_seq_len);

    const auto concept_cases = build_concept_eval(corpus, concept_spec, args.max_cases);
    const auto general = build_general_eval(corpus, concept_spec, args.general_lines);
    if (general.cases.empty()) {
        throw Error(ErrorCode::EmptyCases, "no concept-free lines to evaluate general performance");
    }
    EvalReport report = ablation_report(baseline.model, masked, concept_spec.name(), concept_cases, general.cases,
                                        thread_count(args));
    report.tokenizer = corpus.tokenizer.identity();
    const auto p = provenance(args, baseline.hash, corpus.hash(),
                              {{"concept", concept_spec.to_json()},
                               {"masked_keys", mask.keys.size()},
                               {"max_cases", args.max_cases},
                               {"general_lines", args.general_lines},
                               {"general_lines_used", general.lines_used},
                               {"insufficient_lines", general.insufficient_lines}});
    write_text(dir / "eval_report.json", eval_report_json(report, p).dump(2) + "\n");
    std::ostringstream csv;
    write_eval_report_csv(csv, report, p);
    write_text(dir / "eval_report.csv", csv.str());
    out << fmt::format("{}: concept {:.2f} -> {:.2f} (drop {:.2f}), general {:.2f} -> {:.2f} (drop {:.2f})\n",
                       report.concept_name, report.concept_baseline, report.concept_masked, report.concept_drop,
                       report.general_baseline, report.general_masked, report.general_drop);
    return 0;
}

int cmd_agree(const Args& args, std::ostream& out) {
    const fs::path dir = output_dir(args);
    const auto loaded = load_model(args.model);
    const Corpus corpus = load_corpus(args.corpus, Granularity::line, loaded.model.config().max_seq_len);
    LensOptions options{!args.global.no_final_norm, thread_count(args)};
    const auto profile = agreement_profile(loaded.model, corpus, options);
    std::ostringstream csv;
    write_profile_csv(csv, profile, provenance(args, loaded.hash, corpus.hash()));
    write_text(dir / "agreement_profile.csv", csv.str());
    for (std::size_t l = 1; l <= profile.n_layers(); ++l) {
        out << fmt::format("layer {}: {:.4f}\n", l, profile.rate(l));
    }
    return 0;
}

int cmd_sweep(const Args& args, std::ostream& out) {
    const fs::path dir = output_dir(args);
    const auto loaded = load_model(args.model);
    const Corpus corpus = load_corpus(args.corpus, Granularity::line, loaded.model.config().max_seq_len);
    std::size_t max_context = args.max_context;
    if (max_context == 0) {
        for (const auto& p : corpus.prefixes) {
            max_context = std::max(max_context, p.tokens.size());
        }
    }
    LensOptions options{!args.global.no_final_norm, thread_count(args)};
    const auto matrix = context_sweep(loaded.model, corpus, max_context, options);
    const auto p = provenance(args, loaded.hash, corpus.hash(), {{"max_context", max_context}});
    std::ostringstream csv;
    write_matrix_csv(csv, matrix, p);
    write_text(dir / "agreement_matrix.csv", csv.str());
    std::ostringstream svg;
    render_heatmap(svg, matrix, p);
    write_text(dir / "agreement_heatmap.svg", svg.str());
    out << fmt::format("{} layers x {} context sizes -> {}\n", matrix.n_layers, matrix.max_context,
                       (dir / "agreement_matrix.csv").string());
    return 0;
}

int cmd_synth(const Args& args, std::ostream& out) {
    const fs::path dir = output_dir(args);
    ModelConfig config;
    if (!args.model_config.empty()) {
        config = config_from_json(read_json_file(args.model_config));
    } else {
        config.n_layers = args.n_layers;
        config.d_model = args.d_model;
        config.d_ff = args.d_ff;
        config.vocab_size = args.vocab_size;
        config.n_heads = args.n_heads;
        config.max_seq_len = args.synth_max_seq_len;
        config.validate();
    }
    WeightSet weights;
    nlohmann::json extra = {{"kind", args.kind}, {"config", config_to_json(config)}};
    if (args.kind == "random") {
        weights = random_weights(config, args.global.seed, args.scale);
        extra["scale"] = args.scale;
    } else if (args.kind == "detector") {
        std::vector<DetectorSpec> specs;
        if (!args.detectors_file.empty()) {
            for (const auto& j : read_json_file(args.detectors_file)) {
                specs.push_back(detector_spec_from_json(j));
            }
        }
        for (const auto& d : args.detectors) {
            specs.push_back(parse_detector(d));
        }
        DetectorOptions options;
        options.noise_scale = args.noise;
        weights = build_detector_model(config, specs, args.global.seed, options);
        nlohmann::json spec_json = nlohmann::json::array();
        for (const auto& s : specs) {
            spec_json.push_back(detector_spec_to_json(s));
        }
        extra["detectors"] = spec_json;
        extra["noise"] = args.noise;
    } else {
        throw Error(ErrorCode::InvalidArgument, fmt::format("unknown model kind '{}'", args.kind));
    }
    const fs::path path = args.write_model.empty() ? dir / "model.ffw" : fs::path(args.write_model);
    write_weights(path, config, weights);
    Provenance p;
    p.model_hash = weights_hash(config, weights);
    p.seed = args.global.seed;
    p.flags = extra;
    write_text(fs::path(path).replace_extension(".json"), p.to_json().dump(2) + "\n");
    out << fmt::format("{} model ({} layers, d_model {}, d_ff {}) -> {}\n", args.kind, config.n_layers,
                       config.d_model, config.d_ff, path.string());
    return 0;
}

// Appends "--key value" for every config entry whose flag is not already on
// the command line.
std::vector<std::string> apply_config(std::vector<std::string> args, const std::vector<std::string>& subcommands) {
    std::string config_path;
    for (std::size_t i = 0; i < args.size(); ++i) {
        if (args[i] == "--config" && i + 1 < args.size()) {
            config_path = args[i + 1];
        } else if (args[i].rfind("--config=", 0) == 0) {
            config_path = args[i].substr(9);
        }
    }
    if (config_path.empty()) {
        return args;
    }
    const nlohmann::json config = read_json_file(config_path);
    if (!config.is_object()) {
        throw Error(ErrorCode::InvalidArgument, "config file must hold a JSON object");
    }
    std::string subcommand;
    for (const auto& a : args) {
        if (std::find(subcommands.begin(), subcommands.end(), a) != subcommands.end()) {
            subcommand = a;
            break;
        }
    }
    auto present = [&](const std::string& flag) {
        return std::any_of(args.begin(), args.end(), [&](const std::string& a) {
            return a == flag || a.rfind(flag + "=", 0) == 0;
        });
    };
    std::vector<std::string> extra;
    auto add = [&](const std::string& key, const nlohmann::json& value) {
        const std::string flag = "--" + key;
        if (key == "config" || present(flag)) {
            return;
        }
        if (value.is_boolean()) {
            if (value.get<bool>()) {
                extra.push_back(flag);
            }
        } else if (value.is_array()) {
            for (const auto& v : value) {
                extra.push_back(flag);
                extra.push_back(v.is_string() ? v.get<std::string>() : v.dump());
            }
        } else {
            extra.push_back(flag);
            extra.push_back(value.is_string() ? value.get<std::string>() : value.dump());
        }
    };
    for (const auto& [key, value] : config.items()) {
        if (!value.is_object()) {
            add(key, value);
        }
    }
    if (!subcommand.empty() && config.contains(subcommand) && config[subcommand].is_object()) {
        for (const auto& [key, value] : config[subcommand].items()) {
            add(key, value);
        }
    }
    args.insert(args.end(), extra.begin(), extra.end());
    return args;
}

} // namespace

int run_cli(const std::vector<std::string>& raw_args, std::ostream& out, std::ostream& err) {
    Args args;
    CLI::App app{"ffscope: feed-forward key-value memory analysis for code language models", "ffscope"};
    app.require_subcommand(1);
    app.fallthrough();
    app.add_option("--out", args.global.out, "Output directory (default: $FFSCOPE_OUT or .)");
    app.add_option("--seed", args.global.seed, "Seed for every random choice");
    app.add_option("--threads", args.global.threads, "Worker threads (0 = available parallelism)");
    app.add_option("--config", args.global.config, "JSON config file; explicit flags win");
    app.add_flag("--post-nonlinearity", args.global.post_nonlinearity,
                 "Rank triggers by f(x.k) instead of the raw product");
    app.add_flag("--no-final-norm", args.global.no_final_norm, "Skip the final layer norm in the logit lens");
    app.add_flag("--last-position", args.global.last_position,
                 "Use the last position's product instead of the max over positions");
    app.add_flag("-q,--quiet", args.global.quiet, "Suppress progress messages");

    auto corpus_options = [&](CLI::App* sub, bool required) {
        auto* opt = sub->add_option("--corpus", args.corpus.corpus, "Ingested corpus directory or source directory");
        if (required) {
            opt->required();
        }
        sub->add_option("--ext", args.corpus.extensions, "File extensions when ingesting on the fly");
        sub->add_option("--max-files", args.corpus.max_files, "Cap on ingested files (0 = all)");
        sub->add_option("--vocab", args.corpus.vocab, "External vocabulary JSON (default: byte-level)");
        sub->add_option("--max-seq-len", args.corpus.max_seq_len, "Prefix length cap when ingesting");
    };

    std::vector<std::pair<CLI::App*, std::function<int(const Args&, std::ostream&)>>> commands;

    auto* ingest = app.add_subcommand("ingest", "Ingest a source tree into a corpus directory");
    ingest->add_option("--source", args.source, "Source directory")->required();
    ingest->add_option("--ext", args.corpus.extensions, "File extensions");
    ingest->add_option("--max-files", args.corpus.max_files, "Cap on files (0 = all)");
    ingest->add_option("--vocab", args.corpus.vocab, "External vocabulary JSON (default: byte-level)");
    ingest->add_option("--max-seq-len", args.corpus.max_seq_len, "Window length and line cap (default 2048)");
    commands.emplace_back(ingest, cmd_ingest);

    auto* stats = app.add_subcommand("stats", "Print corpus statistics");
    corpus_options(stats, true);
    commands.emplace_back(stats, cmd_stats);

    auto* scan_cmd = app.add_subcommand("scan", "Find the top-t trigger prefixes of every key");
    scan_cmd->add_option("--model", args.model, "Model weights (.ffw)")->required();
    corpus_options(scan_cmd, true);
    scan_cmd->add_option("--t", args.t, "Triggers kept per key")->check(CLI::PositiveNumber);
    scan_cmd->add_option("--granularity", args.granularity, "window or line");
    commands.emplace_back(scan_cmd, cmd_scan);

    auto* triggers = app.add_subcommand("triggers", "Export trigger examples");
    triggers->add_option("--store", args.store, "Trigger store (default: <out>/triggers.store)");
    corpus_options(triggers, true);
    triggers->add_option("--k", args.k, "Triggers per key")->check(CLI::PositiveNumber);
    triggers->add_option("--layer", args.layer, "Only this key's layer (with --index)");
    triggers->add_option("--index", args.index, "Only this key's index (with --layer)");
    commands.emplace_back(triggers, cmd_triggers);

    auto* concept_keys = app.add_subcommand("concept-keys", "Find, stratify and sample concept-related keys");
    concept_keys->add_option("--store", args.store, "Trigger store (default: <out>/triggers.store)");
    corpus_options(concept_keys, true);
    concept_keys->add_option("--concept", args.concept_path, "Concept spec JSON or built-in name")->required();
    concept_keys->add_option("--per-range", args.per_range, "Keys sampled per layer and range")
        ->check(CLI::PositiveNumber);
    commands.emplace_back(concept_keys, cmd_concept_keys);

    auto* sample = app.add_subcommand("sample", "Resample keys of a concept report");
    sample->add_option("--report", args.report, "Concept key report CSV")->required();
    sample->add_option("--per-range", args.per_range, "Keys sampled per layer and range")->check(CLI::PositiveNumber);
    commands.emplace_back(sample, cmd_sample);

    auto* mask = app.add_subcommand("mask", "Build a mask set for a concept");
    mask->add_option("--report", args.report, "Concept key report CSV");
    mask->add_option("--store", args.store, "Trigger store (default: <out>/triggers.store)");
    corpus_options(mask, false);
    mask->add_option("--concept", args.concept_path, "Concept spec JSON or built-in name");
    mask->add_option("--min-frequency", args.min_frequency, "Smallest trigger frequency that is masked");
    mask->add_option("--mask-out", args.mask_out, "Mask file (default: <out>/mask.json)");
    mask->add_option("--model", args.model, "Model weights, with --write-model");
    mask->add_option("--write-model", args.write_model, "Also write the masked weights here");
    commands.emplace_back(mask, cmd_mask);

    auto* eval = app.add_subcommand("eval", "Baseline vs masked accuracy on concept and general cases");
    eval->add_option("--model", args.model, "Model weights (.ffw)")->required();
    eval->add_option("--mask", args.mask, "Mask set JSON")->required();
    eval->add_option("--concept", args.concept_path, "Concept spec JSON or built-in name")->required();
    corpus_options(eval, true);
    eval->add_option("--max-cases", args.max_cases, "Concept case cap")->check(CLI::PositiveNumber);
    eval->add_option("--general-lines", args.general_lines, "Concept-free lines for the general eval")
        ->check(CLI::PositiveNumber);
    commands.emplace_back(eval, cmd_eval);

    auto* agree = app.add_subcommand("agree", "Per-layer agreement with the final prediction");
    agree->add_option("--model", args.model, "Model weights (.ffw)")->required();
    corpus_options(agree, true);
    commands.emplace_back(agree, cmd_agree);

    auto* sweep = app.add_subcommand("sweep", "Layer x context-size agreement matrix and heatmap");
    sweep->add_option("--model", args.model, "Model weights (.ffw)")->required();
    corpus_options(sweep, true);
    sweep->add_option("--max-context", args.max_context, "Largest context size (default: longest line)");
    commands.emplace_back(sweep, cmd_sweep);

    auto* synth = app.add_subcommand("synth", "Write a synthetic detector or random model");
    synth->add_option("--kind", args.kind, "detector or random");
    synth->add_option("--model-config", args.model_config, "Model config JSON");
    synth->add_option("--layers", args.n_layers, "Layers");
    synth->add_option("--d-model", args.d_model, "Residual width");
    synth->add_option("--d-ff", args.d_ff, "Keys per layer");
    synth->add_option("--vocab-size", args.vocab_size, "Vocabulary size");
    synth->add_option("--heads", args.n_heads, "Attention heads");
    synth->add_option("--max-seq-len", args.synth_max_seq_len, "Context limit");
    synth->add_option("--detector", args.detectors, "layer:key:detect_token:predict_token[:gain]");
    synth->add_option("--detectors", args.detectors_file, "JSON array of detector specs");
    synth->add_option("--noise", args.noise, "Scale of the non-detector weights");
    synth->add_option("--scale", args.scale, "Weight scale for --kind random");
    synth->add_option("--write-model", args.write_model, "Output path (default: <out>/model.ffw)");
    commands.emplace_back(synth, cmd_synth);

    auto* version = app.add_subcommand("version", "Print the tool version");
    commands.emplace_back(version, [](const Args&, std::ostream& o) {
        o << "ffscope " << tool_version() << '\n';
        return 0;
    });

    std::vector<std::string> names;
    for (const auto& [sub, fn] : commands) {
        names.push_back(sub->get_name());
    }

    try {
        std::vector<std::string> argv = apply_config(raw_args, names);
        std::reverse(argv.begin(), argv.end());
        app.parse(argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e, out, err);
        return code == 0 ? 0 : 1;
    } catch (const Error& e) {
        err << "ffscope: " << e.what() << '\n';
        return 1;
    }

    log::set_level(args.global.quiet ? log::Level::warn : log::Level::info);
    try {
        for (const auto& [sub, fn] : commands) {
            if (sub->parsed()) {
                return fn(args, out);
            }
        }
    } catch (const Error& e) {
        err << "ffscope: " << e.what() << '\n';
        return 2;
    } catch (const std::exception& e) {
        err << "ffscope: " << e.what() << '\n';
        return 2;
    }
    return 1;
}

int run_cli(int argc, char** argv) {
    std::vector<std::string> args(argv + 1, argv + argc);
    return run_cli(args, std::cout, std::cerr);
}

} // namespace ffscope
