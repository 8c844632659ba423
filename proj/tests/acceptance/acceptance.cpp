// Acceptance suite: one PASS/FAIL line per criterion, exit status 1 if any fails.

#include "ffscope/agreement.hpp"
#include "ffscope/cli.hpp"
#include "ffscope/concept.hpp"
#include "ffscope/editor.hpp"
#include "ffscope/error.hpp"
#include "ffscope/log.hpp"
#include "ffscope/model.hpp"
#include "ffscope/rng.hpp"
#include "ffscope/trigger.hpp"
#include "ffscope/weight_io.hpp"

#include "fixtures.hpp"
#include "oracle.hpp"
#include "tempdir.hpp"

#include <fmt/format.h>
#include <json.hpp>

#include <chrono>
#include <cmath>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <regex>
#include <set>
#include <sstream>

using namespace ffscope;
using namespace ffscope::testing;
namespace fs = std::filesystem;

namespace {

struct Outcome {
    bool pass = true;
    std::string detail;

    void require(bool ok, const std::string& what) {
        if (!ok && pass) {
            pass = false;
            detail = what;
        }
    }
};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point start) {
    return std::chrono::duration<double>(Clock::now() - start).count();
}

Outcome trigger_oracle() {
    Outcome o;
    const auto c = small_config(4, 16, 64, 64);
    const Model model = build_model(c, random_weights(c, 101));
    const Corpus corpus = random_corpus(1000, 64, 1, 16, 102);
    const auto start = Clock::now();
    const TriggerStore store = scan(model, corpus, 10);
    const double elapsed = seconds_since(start);
    const auto oracle = brute_force_triggers(model, corpus, 10);
    o.require(oracle.size() == 256, "oracle does not cover 256 keys");
    double worst = 0.0;
    for (std::size_t flat = 0; flat < oracle.size(); ++flat) {
        const auto got = store.sorted_entries(flat);
        o.require(got.size() == oracle[flat].size(), fmt::format("key {} holds {} records", flat, got.size()));
        for (std::size_t i = 0; i < std::min(got.size(), oracle[flat].size()); ++i) {
            o.require(got[i].prefix == oracle[flat][i].prefix, fmt::format("key {} rank {} prefix differs", flat, i));
            worst = std::max(worst, double(std::abs(got[i].coefficient - oracle[flat][i].coefficient)));
        }
    }
    o.require(worst <= 1e-6, fmt::format("coefficient gap {:.3g}", worst));
    // Spot-check stored coefficients against the double-precision forward pass.
    double ref_gap = 0.0;
    for (std::size_t flat = 0; flat < 256; flat += 17) {
        const auto top = store.sorted_entries(flat).front();
        const auto ref = reference_forward(c, model.weights(), corpus.prefixes[top.prefix].tokens);
        double best = -1e300;
        for (const auto& row : ref.key_products[flat / 64]) best = std::max(best, row[flat % 64]);
        ref_gap = std::max(ref_gap, std::abs(best - top.coefficient));
    }
    o.require(ref_gap <= 1e-4, fmt::format("reference coefficient gap {:.3g}", ref_gap));
    o.require(elapsed <= 30.0, fmt::format("scan took {:.2f} s", elapsed));
    if (o.pass) {
        o.detail = fmt::format("256 keys, 1000 prefixes, t=10, max gap {:.1g}, scan {:.2f} s", worst, elapsed);
    }
    return o;
}

Outcome shard_merge() {
    Outcome o;
    const auto c = small_config(4, 16, 64, 64);
    const Model model = build_model(c, random_weights(c, 201));
    const Corpus corpus = random_corpus(1000, 64, 1, 16, 202);
    const TriggerStore whole = scan(model, corpus, 10);
    const PrefixId bounds[5] = {0, 173, 500, 611, 1000};
    TriggerStore merged;
    for (int s = 3; s >= 0; --s) {
        merged = merge(merged, scan_range(model, corpus, 10, bounds[s], bounds[s + 1]));
    }
    o.require(merged == whole, "merged store differs from the whole-corpus scan");
    o.require(scan(model, corpus, 10, {{}, 4}) == whole, "4-thread scan differs");
    if (o.pass) o.detail = "4 uneven shards merged in reverse order, bitwise equal";
    return o;
}

Outcome masking_locality() {
    Outcome o;
    const auto c = small_config(2, 16, 64, 64);
    const auto w = random_weights(c, 301);
    const Model model = build_model(c, w);
    Rng rng(302);
    double worst = 0.0;
    std::size_t inputs = 0;
    for (std::size_t size : {1, 5, 50}) {
        for (int trial = 0; trial < 100; ++trial) {
            std::vector<TokenId> tokens(1 + rng.below(8));
            for (auto& t : tokens) t = static_cast<TokenId>(rng.below(64));
            const auto trace = model.forward(tokens);
            const std::size_t layer = rng.below(2);
            const auto x = trace.ff_inputs[layer].row(rng.below(tokens.size()));

            std::vector<std::uint32_t> pool(64);
            for (std::uint32_t i = 0; i < 64; ++i) pool[i] = i;
            MaskSet mask;
            for (std::size_t i = 0; i < size; ++i) {
                std::swap(pool[i], pool[i + rng.below(64 - i)]);
                mask.keys.push_back({static_cast<std::uint32_t>(layer + 1), pool[i] + 1});
            }
            const auto masked = mask_keys(c, w, mask);
            const auto& lw = w.layers[layer];
            const auto ff = ff_apply(x, lw.ff_keys, lw.ff_values, c.nonlinearity);
            const auto ff_masked = ff_apply(x, masked.layers[layer].ff_keys, lw.ff_values, c.nonlinearity);
            for (std::size_t j = 0; j < c.d_model; ++j) {
                double removed = 0.0;
                for (const auto& key : mask.keys) {
                    double dot = 0.0;
                    for (std::size_t i = 0; i < c.d_model; ++i) dot += double(x[i]) * lw.ff_keys(key.index - 1, i);
                    removed += reference_activate(dot, c.nonlinearity) * lw.ff_values(key.index - 1, j);
                }
                worst = std::max(worst, std::abs(ff_masked[j] - (double(ff[j]) - removed)));
            }
            ++inputs;
        }
    }
    o.require(worst <= 1e-5, fmt::format("max deviation {:.3g}", worst));
    if (o.pass) o.detail = fmt::format("{} inputs, mask sizes 1/5/50, max deviation {:.2g}", inputs, worst);
    return o;
}

Outcome detector_ablation() {
    Outcome o;
    const auto start = Clock::now();
    const auto world = make_concept_world(10);
    const Model model = detector_model(world, 401);
    const TriggerStore store = scan(model, world.corpus, world.t);
    std::vector<std::string> rows;
    for (std::size_t i = 0; i < world.concepts.size(); ++i) {
        const auto& spec = world.concepts[i];
        MaskSet mask{spec.name(), {}};
        for (const auto& k : find_concept_keys(store, world.corpus, spec)) mask.keys.push_back(k.key);
        const Model masked = build_model(world.config, mask_keys(world.config, model.weights(), mask));
        const auto concept_cases = build_concept_eval(world.corpus, spec, 10000);
        const auto general = build_general_eval(world.corpus, spec, 10000);
        const auto r = ablation_report(model, masked, spec.name(), concept_cases, general.cases);
        o.require(r.concept_baseline == 100.0, fmt::format("{} baseline {:.2f}", spec.name(), r.concept_baseline));
        o.require(r.concept_masked == 0.0, fmt::format("{} masked {:.2f}", spec.name(), r.concept_masked));
        o.require(r.general_baseline == r.general_masked,
                  fmt::format("{} general {:.2f} vs {:.2f}", spec.name(), r.general_baseline, r.general_masked));
        rows.push_back(fmt::format("{} {:.2f}->{:.2f} general {:.2f}->{:.2f}", spec.name(), r.concept_baseline,
                                   r.concept_masked, r.general_baseline, r.general_masked));
    }
    const double elapsed = seconds_since(start);
    o.require(elapsed <= 10.0, fmt::format("took {:.2f} s", elapsed));
    if (o.pass) o.detail = fmt::format("{}; {:.2f} s", fmt::join(rows, "; "), elapsed);
    return o;
}

Outcome concept_identification() {
    Outcome o;
    const auto world = make_concept_world(10);
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        const Model model = detector_model(world, 500 + seed);
        const TriggerStore store = scan(model, world.corpus, world.t);
        for (std::size_t i = 0; i < world.concepts.size(); ++i) {
            const auto found = find_concept_keys(store, world.corpus, world.concepts[i]);
            const KeyId planted{static_cast<std::uint32_t>(world.detectors[i].layer),
                                static_cast<std::uint32_t>(world.detectors[i].key_index)};
            const std::vector<ConceptKey> expected{{planted, world.t}};
            o.require(found == expected, fmt::format("seed {} concept {}: {} keys found", seed,
                                                     world.concepts[i].name(), found.size()));
        }
    }
    if (o.pass) o.detail = "3 planted keys recovered at frequency t, no other keys, 10 seeds";
    return o;
}

Outcome agreement_invariants() {
    Outcome o;
    for (std::uint64_t seed = 0; seed < 4; ++seed) {
        const auto c = small_config(2 + seed, 8, 32, 48);
        const Model model = build_model(c, random_weights(c, 600 + seed));
        const Corpus corpus = random_corpus(80, 48, 1, 12, 610 + seed);
        for (bool norm : {true, false}) {
            const auto p = agreement_profile(model, corpus, {norm, 1});
            o.require(p.agreeing.back() == p.examples, fmt::format("seed {} final-layer rate below 1", seed));
        }
    }
    const auto c1 = small_config(1, 8, 32, 48);
    const auto p1 = agreement_profile(build_model(c1, random_weights(c1, 620)), random_corpus(50, 48, 1, 10, 621));
    o.require(p1.n_layers() == 1 && p1.rate(1) == 1.0, "1-layer profile is not [1.0]");

    const auto c4 = small_config(4, 16, 64, 64);
    const Model model = build_model(c4, random_weights(c4, 630));
    const Corpus corpus = random_corpus(200, 64, 1, 12, 631);
    const auto p = agreement_profile(model, corpus);
    std::vector<std::size_t> agree(4, 0);
    std::size_t examples = 0;
    for (const auto& prefix : corpus.prefixes) {
        for (std::size_t pos = 0; pos < prefix.tokens.size(); ++pos) {
            const auto preds = layer_predictions(model, prefix.tokens, pos, true);
            ++examples;
            for (std::size_t l = 0; l < 4; ++l) agree[l] += preds[l].top_token == preds[3].top_token ? 1 : 0;
        }
    }
    o.require(p.examples == examples && p.agreeing == agree, "profile differs from the per-example recount");
    if (o.pass) {
        o.detail = fmt::format("final rate 1 on 8 model/norm pairs; recount {}/{} {}/{} {}/{} {}/{} exact", agree[0],
                               examples, agree[1], examples, agree[2], examples, agree[3], examples);
    }
    return o;
}

Outcome context_sweep_shape() {
    Outcome o;
    const auto c = small_config(4, 16, 64, 64, 16);
    const DetectorSpec spec{3, 11, 50, 51, 10.0f};
    const Model model = build_model(c, build_detector_model(c, {spec}, 701));
    Rng rng(702);
    std::vector<std::vector<TokenId>> seqs;
    for (int i = 0; i < 60; ++i) {
        std::vector<TokenId> s{static_cast<TokenId>(rng.below(48)), spec.detect_token};
        for (std::size_t k = rng.below(6); k > 0; --k) s.push_back(static_cast<TokenId>(rng.below(48)));
        seqs.push_back(std::move(s));
    }
    const std::size_t C = 8;
    const auto m = context_sweep(model, corpus_from_tokens(seqs, 16), C);
    o.require(m.n_layers == 4 && m.max_context == C && m.agreeing.size() == 4 * C, "matrix is not L x C");
    for (std::size_t l = 1; l <= 4; ++l) {
        for (std::size_t col = 1; col <= C; ++col) {
            const auto r = m.rate(l, col);
            o.require(!r || (*r >= 0.0 && *r <= 1.0), "rate outside [0, 1]");
        }
    }
    std::vector<std::string> column;
    for (std::size_t l = 1; l <= 4; ++l) {
        const double r = m.rate(l, 2).value_or(-1.0);
        column.push_back(fmt::format("{:.2f}", r));
        if (l >= 3) {
            o.require(r >= 0.9, fmt::format("layer {} column 2 rate {:.2f} < 0.9", l, r));
        } else {
            o.require(r < 0.5, fmt::format("layer {} column 2 rate {:.2f} >= 0.5", l, r));
        }
    }
    if (o.pass) o.detail = fmt::format("4 x {} matrix, column 2 by layer: {}", C, fmt::join(column, " "));
    return o;
}

Outcome numerical_hygiene() {
    Outcome o;
    Rng rng(801);
    const auto c = small_config(3, 16, 64, 64);
    const auto w = random_weights(c, 802);
    const Model model = build_model(c, w);
    double worst_sum = 0.0, worst_forward = 0.0;
    for (int trial = 0; trial < 20; ++trial) {
        std::vector<TokenId> tokens(1 + rng.below(20));
        for (auto& t : tokens) t = static_cast<TokenId>(rng.below(64));
        const auto trace = model.forward(tokens);
        const auto ref = reference_forward(c, w, tokens);
        for (std::size_t p = 0; p < tokens.size(); ++p) {
            double total = 0.0;
            for (float v : softmax(trace.logits.row(p))) total += v;
            worst_sum = std::max(worst_sum, std::abs(total - 1.0));
            for (std::size_t v = 0; v < c.vocab_size; ++v) {
                worst_forward = std::max(worst_forward, std::abs(trace.logits(p, v) - ref.logits[p][v]));
            }
        }
    }
    for (int trial = 0; trial < 200; ++trial) {
        std::vector<float> logits(1 + rng.below(500));
        for (float& v : logits) v = static_cast<float>(rng.normal() * 30.0);
        double total = 0.0;
        for (float v : softmax(logits)) total += v;
        worst_sum = std::max(worst_sum, std::abs(total - 1.0));
    }
    o.require(worst_sum <= 1e-6, fmt::format("softmax sum off by {:.3g}", worst_sum));
    o.require(worst_forward <= 1e-4, fmt::format("forward off by {:.3g}", worst_forward));
    const auto tok = Tokenizer::byte_level();
    int round_trips = 0;
    for (int i = 0; i < 1000; ++i) {
        std::string s(rng.below(200), '\0');
        for (char& ch : s) ch = static_cast<char>(rng.below(256));
        round_trips += tok.decode(tok.encode(s)) == s ? 1 : 0;
    }
    o.require(round_trips == 1000, fmt::format("{} of 1000 byte strings round-trip", round_trips));
    if (o.pass) {
        o.detail = fmt::format("softmax |sum-1| <= {:.1g}, forward gap {:.1g} on 20 inputs, 1000 round trips",
                               worst_sum, worst_forward);
    }
    return o;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

// Runs synth -> ingest -> scan -> concept-keys -> mask -> eval -> sweep into `out`.
bool run_pipeline(const fs::path& root, const fs::path& out, const std::string& threads, std::string& error) {
    const std::string o = out.string();
    const std::string model = (out / "model.ffw").string();
    const std::string corpus = (out / "corpus").string();
    const std::string concept_file = (root / "npdot.json").string();
    const std::vector<std::vector<std::string>> steps = {
        {"synth", "--out", o, "--seed", "11", "--layers", "3", "--d-model", "16", "--d-ff", "32", "--max-seq-len",
         "64", "--detector", "2:5:46:97"},
        {"ingest", "--out", corpus, "--source", (root / "src").string(), "--max-seq-len", "64"},
        {"scan", "--out", o, "--model", model, "--corpus", corpus, "--t", "10", "--granularity", "line", "--threads",
         threads},
        {"concept-keys", "--out", o, "--corpus", corpus, "--concept", concept_file, "--seed", "11"},
        {"mask", "--out", o, "--report", (out / "concept_keys_npdot.csv").string()},
        {"eval", "--out", o, "--model", model, "--mask", (out / "mask.json").string(), "--concept", concept_file,
         "--corpus", corpus, "--seed", "11", "--threads", threads},
        {"sweep", "--out", o, "--model", model, "--corpus", corpus, "--threads", threads},
    };
    for (auto step : steps) {
        step.push_back("-q");
        std::ostringstream sout, serr;
        if (run_cli(step, sout, serr) != 0) {
            error = fmt::format("'{}' failed: {}", step.front(), serr.str());
            return false;
        }
    }
    return true;
}

struct PipelineRuns {
    TempDir dir;
    bool ok = false;
    std::string error;
};

PipelineRuns& pipeline_runs() {
    static PipelineRuns runs;
    static bool done = false;
    if (!done) {
        done = true;
        const fs::path src = runs.dir / "src";
        fs::create_directories(src);
        std::ofstream a(src / "arrays.py");
        for (int i = 0; i < 15; ++i) a << fmt::format("x{} = np.array(y{})\n", i, i);
        std::ofstream b(src / "plain.py");
        for (int i = 0; i < 40; ++i) b << fmt::format("z{} = foo(w{}) + {}\n", i, i, i * 3);
        a.close();
        b.close();
        std::ofstream(runs.dir / "npdot.json")
            << R"json({"name": "npdot", "trigger_pattern": "np\\.", "eval_pattern": "np\\.(a)"})json";
        runs.ok = run_pipeline(runs.dir.path(), runs.dir / "run1", "1", runs.error) &&
                  run_pipeline(runs.dir.path(), runs.dir / "run2", "4", runs.error);
    }
    return runs;
}

Outcome determinism() {
    Outcome o;
    auto& runs = pipeline_runs();
    o.require(runs.ok, runs.error);
    if (!o.pass) return o;
    std::size_t compared = 0;
    for (const auto& entry : fs::recursive_directory_iterator(runs.dir / "run1")) {
        const auto ext = entry.path().extension();
        if (!entry.is_regular_file() || (ext != ".csv" && ext != ".json" && ext != ".jsonl")) continue;
        const auto rel = fs::relative(entry.path(), runs.dir / "run1");
        const auto other = runs.dir / "run2" / rel;
        o.require(fs::exists(other), fmt::format("{} missing from the second run", rel.string()));
        o.require(slurp(entry.path()) == slurp(other), fmt::format("{} differs", rel.string()));
        ++compared;
    }
    o.require(compared >= 6, fmt::format("only {} artifacts compared", compared));
    o.require(slurp(runs.dir / "run1" / "agreement_heatmap.svg") == slurp(runs.dir / "run2" / "agreement_heatmap.svg"),
              "heatmap differs");
    if (o.pass) o.detail = fmt::format("{} CSV/JSON artifacts byte-identical (threads 1 vs 4)", compared);
    return o;
}

Outcome report_fidelity() {
    Outcome o;
    auto& runs = pipeline_runs();
    o.require(runs.ok, runs.error);
    if (!o.pass) return o;
    const fs::path out = runs.dir / "run1";
    const auto json = nlohmann::json::parse(slurp(out / "eval_report.json"));
    const std::set<std::string> cell_names{"concept_baseline", "concept_masked", "concept_drop",
                                           "general_baseline", "general_masked", "general_drop"};
    std::set<std::string> cells;
    for (const auto& [k, v] : json.at("cells").items()) {
        cells.insert(k);
        o.require(v.is_number(), fmt::format("cell {} is not numeric", k));
    }
    o.require(cells == cell_names, "cells are not the six accuracy cells");
    o.require(json.at("counts").size() == 2, "counts are not the two case counts");
    std::size_t numeric = 0;
    for (const auto& section : {"cells", "counts"}) {
        for (const auto& [k, v] : json.at(section).items()) numeric += v.is_number() ? 1 : 0;
    }
    o.require(numeric == 8, fmt::format("{} numeric cells in JSON", numeric));
    const double drop = json.at("cells").at("concept_drop").get<double>();
    o.require(std::abs(drop - (json.at("cells").at("concept_baseline").get<double>() -
                               json.at("cells").at("concept_masked").get<double>())) < 1e-9,
              "drop is not baseline minus masked");

    std::istringstream csv(slurp(out / "eval_report.csv"));
    std::string provenance_line, header, row;
    std::getline(csv, provenance_line);
    std::getline(csv, header);
    std::getline(csv, row);
    const auto fields = split_csv_line(row);
    o.require(provenance_line.rfind("# {", 0) == 0, "CSV lacks the provenance line");
    o.require(fields.size() == 9, fmt::format("CSV row has {} fields", fields.size()));
    std::size_t csv_numeric = 0;
    for (std::size_t i = 1; i < fields.size(); ++i) {
        try {
            std::size_t used = 0;
            (void)std::stod(fields[i], &used);
            csv_numeric += used == fields[i].size() ? 1 : 0;
        } catch (const std::exception&) {
        }
    }
    o.require(csv_numeric == 8, fmt::format("{} numeric CSV cells", csv_numeric));

    const std::string svg = slurp(out / "agreement_heatmap.svg");
    const auto matrix_rows = [&] {
        std::istringstream m(slurp(out / "agreement_matrix.csv"));
        std::size_t n = 0;
        for (std::string line; std::getline(m, line);) n += line.empty() || line[0] == '#' ? 0 : 1;
        return n - 1;
    }();
    std::size_t cells_drawn = 0;
    std::set<int> layers, contexts;
    const std::regex cell_re("class=\"cell[^\"]*\"[^>]*data-layer=\"(\\d+)\" data-context=\"(\\d+)\"");
    for (auto it = std::sregex_iterator(svg.begin(), svg.end(), cell_re); it != std::sregex_iterator(); ++it) {
        ++cells_drawn;
        layers.insert(std::stoi((*it)[1]));
        contexts.insert(std::stoi((*it)[2]));
    }
    o.require(cells_drawn == matrix_rows, fmt::format("{} SVG cells for {} matrix rows", cells_drawn, matrix_rows));
    o.require(layers.size() == 3, "SVG rows are not the 3 layers");
    o.require(svg.find("y-label") != std::string::npos && svg.find(">Layers</text>") != std::string::npos,
              "y axis is not labeled Layers");
    o.require(svg.find("x-label") != std::string::npos && svg.find(">Tokens</text>") != std::string::npos,
              "x axis is not labeled Tokens");
    if (o.pass) {
        o.detail = fmt::format("6 cells + 2 counts in JSON and CSV; heatmap {} layers x {} tokens, axes Layers/Tokens",
                               layers.size(), contexts.size());
    }
    return o;
}

} // namespace

int main() {
    log::set_level(log::Level::warn);
    const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria = {
        {"trigger oracle equivalence", trigger_oracle},
        {"shard-merge equivalence", shard_merge},
        {"masking locality identity", masking_locality},
        {"end-to-end detector ablation", detector_ablation},
        {"concept identification exactness", concept_identification},
        {"agreement invariants", agreement_invariants},
        {"context-sweep shape and content", context_sweep_shape},
        {"numerical hygiene", numerical_hygiene},
        {"determinism", determinism},
        {"report fidelity", report_fidelity},
    };
    int failures = 0;
    for (std::size_t i = 0; i < criteria.size(); ++i) {
        Outcome o;
        try {
            o = criteria[i].second();
        } catch (const std::exception& e) {
            o.pass = false;
            o.detail = fmt::format("exception: {}", e.what());
        }
        failures += o.pass ? 0 : 1;
        std::cout << fmt::format("criterion {}: {} {} ({})", i + 1, o.pass ? "PASS" : "FAIL", criteria[i].first,
                                 o.detail)
                  << std::endl;
    }
    std::cout << fmt::format("{} of {} criteria passed", criteria.size() - failures, criteria.size()) << std::endl;
    return failures == 0 ? 0 : 1;
}
