#include "ffscope/tokenizer.hpp"

#include "ffscope/error.hpp"
#include "ffscope/hash.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>

#include <fmt/format.h>

namespace ffscope {

namespace {

std::string fallback_piece(unsigned char byte) { return fmt::format("<0x{:02X}>", byte); }

bool is_fallback_piece(std::string_view piece) {
    return piece.size() == 6 && piece.substr(0, 3) == "<0x" && piece[5] == '>' &&
           std::isxdigit(static_cast<unsigned char>(piece[3])) &&
           std::isxdigit(static_cast<unsigned char>(piece[4]));
}

} // namespace

Tokenizer Tokenizer::byte_level() { return Tokenizer{}; }

Tokenizer Tokenizer::from_vocab_json(const nlohmann::json& vocab) {
    Tokenizer tok;
    tok.byte_level_ = false;
    try {
        if (!vocab.contains("byte_fallback")) {
            throw Error(ErrorCode::InvalidArgument, "vocabulary lacks the required 'byte_fallback' flag");
        }
        tok.byte_fallback_ = vocab.at("byte_fallback").get<bool>();
        for (const auto& [piece, id] : vocab.at("tokens").items()) {
            if (piece.empty()) {
                throw Error(ErrorCode::InvalidArgument, "vocabulary contains an empty piece");
            }
            const auto value = id.get<TokenId>();
            if (!tok.by_id_.emplace(value, piece).second) {
                throw Error(ErrorCode::InvalidArgument, fmt::format("token id {} assigned twice", value));
            }
            tok.pieces_.emplace(piece, value);
            if (!is_fallback_piece(piece)) {
                tok.max_piece_length_ = std::max(tok.max_piece_length_, piece.size());
            }
        }
    } catch (const nlohmann::json::exception& e) {
        throw Error(ErrorCode::InvalidArgument, fmt::format("vocabulary: {}", e.what()));
    }
    return tok;
}

Tokenizer Tokenizer::from_vocab_file(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) {
        throw Error(ErrorCode::IoFailure, fmt::format("cannot open vocabulary '{}'", path.string()));
    }
    try {
        return from_vocab_json(nlohmann::json::parse(in));
    } catch (const nlohmann::json::exception& e) {
        throw Error(ErrorCode::InvalidArgument, fmt::format("vocabulary '{}': {}", path.string(), e.what()));
    }
}

Tokenizer Tokenizer::from_descriptor(const nlohmann::json& descriptor) {
    const auto kind = descriptor.at("kind").get<std::string>();
    if (kind == "byte_level") {
        return byte_level();
    }
    if (kind == "external") {
        return from_vocab_json(descriptor.at("vocabulary"));
    }
    throw Error(ErrorCode::InvalidArgument, fmt::format("unknown tokenizer kind '{}'", kind));
}

std::size_t Tokenizer::vocab_size() const noexcept {
    if (byte_level_) {
        return 256;
    }
    return by_id_.empty() ? 0 : static_cast<std::size_t>(by_id_.rbegin()->first) + 1;
}

nlohmann::json Tokenizer::descriptor() const {
    if (byte_level_) {
        return {{"kind", "byte_level"}};
    }
    nlohmann::json tokens = nlohmann::json::object();
    for (const auto& [piece, id] : pieces_) {
        tokens[piece] = id;
    }
    return {{"kind", "external"}, {"vocabulary", {{"byte_fallback", byte_fallback_}, {"tokens", tokens}}}};
}

std::string Tokenizer::identity() const {
    if (byte_level_) {
        return "byte_level";
    }
    Fnv1a hash;
    hash.update(descriptor().dump());
    return "external:" + hex64(hash.digest());
}

std::optional<TokenId> Tokenizer::piece_id(std::string_view piece) const {
    if (byte_level_) {
        if (piece.size() == 1) {
            return static_cast<unsigned char>(piece[0]);
        }
        return std::nullopt;
    }
    const auto it = pieces_.find(piece);
    if (it == pieces_.end()) {
        return std::nullopt;
    }
    return it->second;
}

std::vector<TokenId> Tokenizer::encode(std::string_view text) const {
    std::vector<TokenId> ids;
    ids.reserve(text.size());
    if (byte_level_) {
        for (char c : text) {
            ids.push_back(static_cast<unsigned char>(c));
        }
        return ids;
    }
    std::size_t pos = 0;
    while (pos < text.size()) {
        bool matched = false;
        for (std::size_t len = std::min(max_piece_length_, text.size() - pos); len > 0; --len) {
            const auto candidate = text.substr(pos, len);
            if (is_fallback_piece(candidate)) {
                continue;
            }
            const auto it = pieces_.find(candidate);
            if (it != pieces_.end()) {
                ids.push_back(it->second);
                pos += len;
                matched = true;
                break;
            }
        }
        if (matched) {
            continue;
        }
        const auto byte = static_cast<unsigned char>(text[pos]);
        const auto it = byte_fallback_ ? pieces_.find(fallback_piece(byte)) : pieces_.end();
        if (it == pieces_.end()) {
            throw Error(ErrorCode::UnknownToken,
                        fmt::format("no vocabulary entry covers byte 0x{:02X} at offset {}", byte, pos));
        }
        ids.push_back(it->second);
        ++pos;
    }
    return ids;
}

std::string Tokenizer::decode(std::span<const TokenId> ids) const {
    std::string text;
    for (TokenId id : ids) {
        if (byte_level_) {
            if (id > 255) {
                throw Error(ErrorCode::UnknownToken, fmt::format("byte-level id {} > 255", id));
            }
            text.push_back(static_cast<char>(id));
            continue;
        }
        const auto it = by_id_.find(id);
        if (it == by_id_.end()) {
            throw Error(ErrorCode::UnknownToken, fmt::format("token id {} not in vocabulary", id));
        }
        if (is_fallback_piece(it->second)) {
            text.push_back(static_cast<char>(std::stoi(it->second.substr(3, 2), nullptr, 16)));
        } else {
            text += it->second;
        }
    }
    return text;
}

} // namespace ffscope
