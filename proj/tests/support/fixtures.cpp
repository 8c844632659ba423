#include "fixtures.hpp"

#include "oracle.hpp"

#include <fmt/format.h>

namespace ffscope::testing {

ConceptWorld make_concept_world(std::size_t t, std::size_t lines_per_concept) {
    nlohmann::json tokens = nlohmann::json::object();
    TokenId next = 0;
    for (char c = 32; c < 127; ++c) {
        tokens[std::string(1, c)] = next++;
    }
    const std::vector<std::pair<std::string, std::string>> pairs = {
        {"np.", "array"}, {"torch.", "tensor"}, {"log.", "info"}};
    for (const auto& [detect, predict] : pairs) {
        tokens[detect] = next++;
        tokens[predict] = next++;
    }

    ConceptWorld world;
    world.t = t;
    world.tokenizer = Tokenizer::from_vocab_json({{"byte_fallback", false}, {"tokens", tokens}});
    world.config = small_config(3, 16, 32, world.tokenizer.vocab_size(), 128);
    const std::size_t keys[3] = {3, 7, 11};
    for (std::size_t i = 0; i < pairs.size(); ++i) {
        DetectorSpec spec;
        spec.layer = i + 1;
        spec.key_index = keys[i];
        spec.detect_token = *world.tokenizer.piece_id(pairs[i].first);
        spec.predict_token = *world.tokenizer.piece_id(pairs[i].second);
        world.detectors.push_back(spec);
    }
    for (const auto& c : default_concepts()) {
        if (c.name() == "numpy" || c.name() == "torch" || c.name() == "log") {
            world.concepts.push_back(c);
        }
    }

    std::string alphabet;
    for (char c = 32; c < 127; ++c) {
        alphabet += c;
    }
    std::vector<std::string> lines;
    for (std::size_t r = 0; r < t; ++r) {
        lines.push_back(alphabet.substr(r % alphabet.size()) + alphabet.substr(0, r % alphabet.size()));
    }
    for (std::size_t i = 0; i < lines_per_concept; ++i) {
        lines.push_back(fmt::format("a{} = np.array(b{})", i, i));
        lines.push_back(fmt::format("x{} = torch.tensor([{}])", i, i));
        lines.push_back(fmt::format("log.info(\"step {}\")", i));
    }
    for (std::size_t i = 0; i < 3 * lines_per_concept; ++i) {
        lines.push_back(fmt::format("y{} = foo(x{}, {}) + bar[{}]", i, i, i * 7, i % 5));
    }
    world.corpus = corpus_from_lines(lines, world.tokenizer, world.config.max_seq_len);
    return world;
}

Model detector_model(const ConceptWorld& world, std::uint64_t seed) {
    return build_model(world.config, build_detector_model(world.config, world.detectors, seed));
}

} // namespace ffscope::testing
