#include "ffscope/corpus.hpp"

#include "ffscope/error.hpp"
#include "ffscope/hash.hpp"
#include "ffscope/log.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>

#include <fmt/format.h>
#include <fmt/ranges.h>

namespace ffscope {

namespace fs = std::filesystem;

namespace {

constexpr char kTokenMagic[8] = {'F', 'F', 'S', 'C', 'T', 'O', 'K', '1'};

std::string token_file_name(Granularity g) {
    return g == Granularity::file_window ? "windows.tok" : "lines.tok";
}

void put_varint(std::string& out, std::uint64_t value) {
    while (value >= 0x80) {
        out.push_back(static_cast<char>((value & 0x7f) | 0x80));
        value >>= 7;
    }
    out.push_back(static_cast<char>(value));
}

class VarintReader {
public:
    explicit VarintReader(std::string_view bytes) : bytes_(bytes) {}

    std::uint64_t next() {
        std::uint64_t value = 0;
        for (int shift = 0; shift < 64; shift += 7) {
            if (pos_ >= bytes_.size()) {
                throw Error(ErrorCode::IoFailure, "token file truncated");
            }
            const auto byte = static_cast<unsigned char>(bytes_[pos_++]);
            value |= static_cast<std::uint64_t>(byte & 0x7f) << shift;
            if ((byte & 0x80) == 0) {
                return value;
            }
        }
        throw Error(ErrorCode::IoFailure, "malformed varint in token file");
    }

    [[nodiscard]] bool done() const noexcept { return pos_ == bytes_.size(); }

private:
    std::string_view bytes_;
    std::size_t pos_ = 0;
};

std::string read_file(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw Error(ErrorCode::IoFailure, fmt::format("cannot read '{}'", path.string()));
    }
    std::ostringstream buffer;
    buffer << in.rdbuf();
    return buffer.str();
}

void write_file(const fs::path& path, std::string_view contents) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) {
        throw Error(ErrorCode::IoFailure, fmt::format("cannot write '{}'", path.string()));
    }
    out.write(contents.data(), static_cast<std::streamsize>(contents.size()));
    if (!out) {
        throw Error(ErrorCode::IoFailure, fmt::format("write to '{}' failed", path.string()));
    }
}

} // namespace

std::string to_string(Granularity g) { return g == Granularity::file_window ? "file_window" : "line"; }

std::uint64_t Corpus::hash() const {
    Fnv1a h;
    h.update(tokenizer.identity());
    h.update(to_string(granularity));
    h.update_value(static_cast<std::uint64_t>(prefixes.size()));
    for (const auto& p : prefixes) {
        h.update_value(p.file_id);
        h.update_value(p.line);
        h.update_value(static_cast<std::uint64_t>(p.tokens.size()));
        h.update(std::as_bytes(std::span(p.tokens)));
    }
    return h.digest();
}

std::string language_for_extension(std::string_view extension) {
    static const std::pair<std::string_view, std::string_view> table[] = {
        {".py", "python"}, {".go", "go"},   {".java", "java"}, {".c", "c"},
        {".cc", "cpp"},    {".cpp", "cpp"}, {".h", "c"},       {".hpp", "cpp"},
        {".js", "javascript"}, {".ts", "typescript"}, {".rs", "rust"},
    };
    for (const auto& [ext, lang] : table) {
        if (ext == extension) {
            return std::string(lang);
        }
    }
    return extension.empty() ? "unknown" : std::string(extension.substr(1));
}

Manifest ingest_dir(const fs::path& root, const std::vector<std::string>& extensions,
                    std::size_t max_files) {
    std::error_code ec;
    if (!fs::is_directory(root, ec)) {
        throw Error(ErrorCode::IoFailure, fmt::format("'{}' is not a readable directory", root.string()));
    }
    std::vector<std::string> relative;
    try {
        for (const auto& entry : fs::recursive_directory_iterator(root)) {
            if (!entry.is_regular_file()) {
                continue;
            }
            const auto ext = entry.path().extension().string();
            if (std::find(extensions.begin(), extensions.end(), ext) == extensions.end()) {
                continue;
            }
            relative.push_back(fs::relative(entry.path(), root).generic_string());
        }
    } catch (const fs::filesystem_error& e) {
        throw Error(ErrorCode::IoFailure, e.what());
    }
    if (relative.empty()) {
        throw Error(ErrorCode::NoFilesFound,
                    fmt::format("no files with extension(s) {} under '{}'",
                                fmt::join(extensions, ","), root.string()));
    }
    std::sort(relative.begin(), relative.end());
    if (max_files > 0 && relative.size() > max_files) {
        relative.resize(max_files);
    }
    Manifest manifest;
    manifest.reserve(relative.size());
    for (std::size_t i = 0; i < relative.size(); ++i) {
        ManifestEntry entry;
        entry.file_id = static_cast<std::uint32_t>(i);
        entry.path = (root / relative[i]).generic_string();
        entry.language = language_for_extension(fs::path(relative[i]).extension().string());
        manifest.push_back(std::move(entry));
    }
    return manifest;
}

std::string normalize_newlines(std::string text) {
    std::string out;
    out.reserve(text.size());
    for (std::size_t i = 0; i < text.size(); ++i) {
        if (text[i] == '\r' && i + 1 < text.size() && text[i + 1] == '\n') {
            continue;
        }
        out.push_back(text[i]);
    }
    return out;
}

std::vector<std::string_view> split_lines(std::string_view text) {
    std::vector<std::string_view> lines;
    std::size_t start = 0;
    while (start < text.size()) {
        const auto end = text.find('\n', start);
        if (end == std::string_view::npos) {
            lines.push_back(text.substr(start));
            break;
        }
        lines.push_back(text.substr(start, end - start));
        start = end + 1;
    }
    return lines;
}

bool is_valid_utf8(std::string_view text) noexcept {
    std::size_t i = 0;
    while (i < text.size()) {
        const auto c = static_cast<unsigned char>(text[i]);
        std::size_t extra = 0;
        std::uint32_t cp = 0;
        if (c < 0x80) {
            ++i;
            continue;
        } else if ((c & 0xe0) == 0xc0) {
            extra = 1;
            cp = c & 0x1f;
        } else if ((c & 0xf0) == 0xe0) {
            extra = 2;
            cp = c & 0x0f;
        } else if ((c & 0xf8) == 0xf0) {
            extra = 3;
            cp = c & 0x07;
        } else {
            return false;
        }
        if (i + extra >= text.size()) {
            return false;
        }
        for (std::size_t k = 1; k <= extra; ++k) {
            const auto cc = static_cast<unsigned char>(text[i + k]);
            if ((cc & 0xc0) != 0x80) {
                return false;
            }
            cp = (cp << 6) | (cc & 0x3f);
        }
        static constexpr std::uint32_t min_for_length[] = {0, 0x80, 0x800, 0x10000};
        if (cp < min_for_length[extra] || cp > 0x10ffff || (cp >= 0xd800 && cp <= 0xdfff)) {
            return false;
        }
        i += extra + 1;
    }
    return true;
}

std::vector<SourceFile> load_sources(const Manifest& manifest, const Tokenizer& tokenizer) {
    std::vector<SourceFile> sources;
    sources.reserve(manifest.size());
    for (const auto& entry : manifest) {
        std::string text = normalize_newlines(read_file(entry.path));
        if (!tokenizer.is_byte_level() && !is_valid_utf8(text)) {
            log::warn(fmt::format("skipping '{}': not valid UTF-8", entry.path));
            continue;
        }
        sources.push_back({entry.path, entry.language, std::move(text)});
    }
    return sources;
}

Corpus build_corpus(const std::vector<SourceFile>& sources, const Tokenizer& tokenizer,
                    Granularity granularity, std::size_t max_seq_len) {
    if (max_seq_len == 0) {
        throw Error(ErrorCode::InvalidArgument, "max_seq_len must be >= 1");
    }
    Corpus corpus;
    corpus.tokenizer = tokenizer;
    corpus.granularity = granularity;
    corpus.max_seq_len = max_seq_len;

    auto add_prefix = [&](std::uint32_t file_id, std::size_t line, std::vector<TokenId> tokens) {
        CodePrefix prefix;
        prefix.id = corpus.prefixes.size();
        prefix.file_id = file_id;
        prefix.line = static_cast<std::uint32_t>(line);
        prefix.text = tokenizer.decode(tokens);
        prefix.tokens = std::move(tokens);
        corpus.prefixes.push_back(std::move(prefix));
    };

    for (std::size_t f = 0; f < sources.size(); ++f) {
        const auto file_id = static_cast<std::uint32_t>(f);
        const std::string text = normalize_newlines(sources[f].text);
        const auto lines = split_lines(text);

        ManifestEntry entry;
        entry.file_id = file_id;
        entry.path = sources[f].path;
        entry.language = sources[f].language;
        entry.lines = lines.size();

        for (std::size_t l = 0; l < lines.size(); ++l) {
            auto ids = tokenizer.encode(lines[l]);
            entry.tokens += ids.size();
            if (granularity == Granularity::line && !ids.empty()) {
                if (ids.size() > max_seq_len) {
                    ids.resize(max_seq_len);
                }
                add_prefix(file_id, l + 1, std::move(ids));
            }
        }

        if (granularity == Granularity::file_window) {
            const auto ids = tokenizer.encode(text);
            std::size_t line = 1;
            for (std::size_t start = 0; start < ids.size(); start += max_seq_len) {
                const std::size_t end = std::min(ids.size(), start + max_seq_len);
                std::vector<TokenId> window(ids.begin() + static_cast<std::ptrdiff_t>(start),
                                            ids.begin() + static_cast<std::ptrdiff_t>(end));
                const std::string window_text = tokenizer.decode(window);
                add_prefix(file_id, line, std::move(window));
                line += static_cast<std::size_t>(std::count(window_text.begin(), window_text.end(), '\n'));
            }
        }
        corpus.manifest.push_back(std::move(entry));
    }
    return corpus;
}

std::vector<std::vector<TokenId>> line_prefixes(std::span<const TokenId> line) {
    if (line.empty()) {
        throw Error(ErrorCode::EmptyLine, "cannot take prefixes of an empty line");
    }
    std::vector<std::vector<TokenId>> out;
    out.reserve(line.size());
    for (std::size_t k = 1; k <= line.size(); ++k) {
        out.emplace_back(line.begin(), line.begin() + static_cast<std::ptrdiff_t>(k));
    }
    return out;
}

CorpusStats corpus_stats(const Corpus& corpus) {
    if (corpus.manifest.empty()) {
        throw Error(ErrorCode::EmptyCorpus, "corpus has no files");
    }
    CorpusStats stats;
    stats.files = corpus.manifest.size();
    for (const auto& entry : corpus.manifest) {
        stats.lines += entry.lines;
        stats.tokens += entry.tokens;
    }
    stats.avg_lines_per_file = static_cast<double>(stats.lines) / static_cast<double>(stats.files);
    stats.avg_tokens_per_line =
        stats.lines == 0 ? 0.0 : static_cast<double>(stats.tokens) / static_cast<double>(stats.lines);
    stats.tokenizer = corpus.tokenizer.identity();
    return stats;
}

std::string format_stats(const CorpusStats& stats) {
    std::string grouped = std::to_string(stats.lines);
    for (int i = static_cast<int>(grouped.size()) - 3; i > 0; i -= 3) {
        grouped.insert(static_cast<std::size_t>(i), ",");
    }
    return fmt::format("{} lines, {:.2f} avg lines/file, {:.2f} avg tokens/line ({})", grouped,
                       stats.avg_lines_per_file, stats.avg_tokens_per_line, stats.tokenizer);
}

void write_corpus(const fs::path& dir, const Corpus& corpus) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) {
        throw Error(ErrorCode::IoFailure, fmt::format("cannot create '{}': {}", dir.string(), ec.message()));
    }

    std::string manifest;
    for (const auto& entry : corpus.manifest) {
        manifest += nlohmann::json{{"file_id", entry.file_id},
                                   {"path", entry.path},
                                   {"language", entry.language},
                                   {"lines", entry.lines},
                                   {"tokens", entry.tokens}}
                        .dump();
        manifest += '\n';
    }
    write_file(dir / "manifest.jsonl", manifest);

    const nlohmann::json meta = {{"tokenizer", corpus.tokenizer.descriptor()},
                                 {"max_seq_len", corpus.max_seq_len}};
    write_file(dir / "corpus.json", meta.dump(2) + "\n");

    std::string tokens(kTokenMagic, sizeof(kTokenMagic));
    put_varint(tokens, corpus.prefixes.size());
    for (const auto& p : corpus.prefixes) {
        put_varint(tokens, p.file_id);
        put_varint(tokens, p.line);
        put_varint(tokens, p.tokens.size());
        for (TokenId t : p.tokens) {
            put_varint(tokens, t);
        }
    }
    write_file(dir / token_file_name(corpus.granularity), tokens);
}

bool is_corpus_dir(const fs::path& dir) {
    std::error_code ec;
    return fs::is_regular_file(dir / "corpus.json", ec) && fs::is_regular_file(dir / "manifest.jsonl", ec);
}

Corpus read_corpus(const fs::path& dir, Granularity granularity) {
    Corpus corpus;
    corpus.granularity = granularity;
    try {
        const auto meta = nlohmann::json::parse(read_file(dir / "corpus.json"));
        corpus.tokenizer = Tokenizer::from_descriptor(meta.at("tokenizer"));
        corpus.max_seq_len = meta.at("max_seq_len").get<std::size_t>();

        std::istringstream manifest(read_file(dir / "manifest.jsonl"));
        for (std::string line; std::getline(manifest, line);) {
            if (line.empty()) {
                continue;
            }
            const auto j = nlohmann::json::parse(line);
            corpus.manifest.push_back({j.at("file_id").get<std::uint32_t>(), j.at("path").get<std::string>(),
                                       j.at("language").get<std::string>(), j.value("lines", std::size_t{0}),
                                       j.value("tokens", std::size_t{0})});
        }
    } catch (const nlohmann::json::exception& e) {
        throw Error(ErrorCode::IoFailure, fmt::format("corpus metadata in '{}': {}", dir.string(), e.what()));
    }

    const std::string bytes = read_file(dir / token_file_name(granularity));
    if (bytes.size() < sizeof(kTokenMagic) || bytes.compare(0, sizeof(kTokenMagic), kTokenMagic, sizeof(kTokenMagic)) != 0) {
        throw Error(ErrorCode::BadMagic, "not an ffscope token file");
    }
    VarintReader reader(std::string_view(bytes).substr(sizeof(kTokenMagic)));
    const auto count = reader.next();
    corpus.prefixes.reserve(count);
    for (std::uint64_t i = 0; i < count; ++i) {
        CodePrefix p;
        p.id = i;
        p.file_id = static_cast<std::uint32_t>(reader.next());
        p.line = static_cast<std::uint32_t>(reader.next());
        const auto n = reader.next();
        p.tokens.reserve(n);
        for (std::uint64_t k = 0; k < n; ++k) {
            p.tokens.push_back(static_cast<TokenId>(reader.next()));
        }
        p.text = corpus.tokenizer.decode(p.tokens);
        corpus.prefixes.push_back(std::move(p));
    }
    if (!reader.done()) {
        throw Error(ErrorCode::IoFailure, "trailing bytes in token file");
    }
    return corpus;
}

} // namespace ffscope
