#pragma once

#include "ffscope/tensor.hpp"
#include "ffscope/tokenizer.hpp"

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

namespace ffscope {

using PrefixId = std::uint64_t;

struct ManifestEntry {
    std::uint32_t file_id = 0;
    std::string path;
    std::string language;
    std::size_t lines = 0;  // LF-separated lines in the file
    std::size_t tokens = 0; // sum of per-line token counts under the active tokenizer

    bool operator==(const ManifestEntry&) const = default;
};

using Manifest = std::vector<ManifestEntry>;

// Source file contents held in memory; `text` has CRLF already normalized.
struct SourceFile {
    std::string path;
    std::string language;
    std::string text;
};

// file_window: non-overlapping windows of max_seq_len tokens over each file
// (trigger probing). line: one prefix per non-empty source line, truncated to
// max_seq_len tokens (evaluation and agreement experiments).
enum class Granularity { file_window, line };

std::string to_string(Granularity g);

struct CodePrefix {
    PrefixId id = 0;
    std::uint32_t file_id = 0;
    std::uint32_t line = 0; // 1-based line where the prefix starts
    std::vector<TokenId> tokens;
    std::string text; // decode(tokens)
};

struct Corpus {
    std::vector<CodePrefix> prefixes;
    Tokenizer tokenizer;
    Manifest manifest;
    Granularity granularity = Granularity::line;
    std::size_t max_seq_len = 0;

    [[nodiscard]] std::size_t size() const noexcept { return prefixes.size(); }
    [[nodiscard]] std::uint64_t hash() const;
};

struct CorpusStats {
    std::size_t files = 0;
    std::size_t lines = 0;
    std::size_t tokens = 0;
    double avg_lines_per_file = 0.0;
    double avg_tokens_per_line = 0.0;
    std::string tokenizer;
};

std::string language_for_extension(std::string_view extension);

// Lexicographically ordered (by generic path) regular files under root whose
// extension is in `extensions`, truncated to max_files (0 = unlimited).
Manifest ingest_dir(const std::filesystem::path& root, const std::vector<std::string>& extensions,
                    std::size_t max_files);

std::string normalize_newlines(std::string text);
std::vector<std::string_view> split_lines(std::string_view text);
bool is_valid_utf8(std::string_view text) noexcept;

// Reads the manifest's files. Under an external vocabulary, files failing
// UTF-8 validation are skipped with a warning.
std::vector<SourceFile> load_sources(const Manifest& manifest, const Tokenizer& tokenizer);

Corpus build_corpus(const std::vector<SourceFile>& sources, const Tokenizer& tokenizer,
                    Granularity granularity, std::size_t max_seq_len);

// [t0], [t0, t1], ..., [t0 .. t(n-1)]
std::vector<std::vector<TokenId>> line_prefixes(std::span<const TokenId> line);

CorpusStats corpus_stats(const Corpus& corpus);
// "1,493,445 lines, 298.68 avg lines/file, 15.54 avg tokens/line (byte_level)"
std::string format_stats(const CorpusStats& stats);

// On-disk corpus: <dir>/manifest.jsonl, <dir>/corpus.json (tokenizer
// descriptor, max_seq_len) and <dir>/<windows|lines>.tok holding, after the
// magic "FFSCTOK1", a varint prefix count and per prefix the varints
// file_id, line, token count, then the token ids.
void write_corpus(const std::filesystem::path& dir, const Corpus& corpus);
Corpus read_corpus(const std::filesystem::path& dir, Granularity granularity);
bool is_corpus_dir(const std::filesystem::path& dir);

} // namespace ffscope
