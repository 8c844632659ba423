#pragma once

#include "ffscope/concept.hpp"
#include "ffscope/corpus.hpp"
#include "ffscope/model.hpp"
#include "ffscope/tokenizer.hpp"
#include "ffscope/trigger.hpp"
#include "ffscope/weight_io.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace ffscope::testing {

// Three API concepts ("np." -> "array", "torch." -> "tensor", "log." -> "info"),
// each with one planted detector key, over a vocabulary of printable ASCII
// characters plus the six concept pieces.
struct ConceptWorld {
    Tokenizer tokenizer;
    ModelConfig config;
    std::vector<DetectorSpec> detectors; // numpy, torch, log
    std::vector<ConceptSpec> concepts;   // same order
    Corpus corpus;                       // line granularity
    std::size_t t = 0;
};

// The corpus opens with t rotations of a line holding every printable
// character, followed by lines_per_concept lines per concept.
ConceptWorld make_concept_world(std::size_t t, std::size_t lines_per_concept = 12);

Model detector_model(const ConceptWorld& world, std::uint64_t seed);

} // namespace ffscope::testing
