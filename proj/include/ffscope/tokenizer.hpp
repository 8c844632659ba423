#pragma once

#include "ffscope/tensor.hpp"

#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

namespace ffscope {

// Either byte-level (id = byte value, 256 ids) or an external vocabulary with
// greedy longest-match segmentation.
//
// External vocabulary file: {"byte_fallback": bool, "tokens": {"piece": id, ...}}.
// With byte_fallback, a byte no piece covers maps to the entry "<0xHH>"
// (upper-case hex); those entries never take part in longest-match.
class Tokenizer {
public:
    static Tokenizer byte_level();
    static Tokenizer from_vocab_json(const nlohmann::json& vocab);
    static Tokenizer from_vocab_file(const std::filesystem::path& path);
    // Accepts what descriptor() produces.
    static Tokenizer from_descriptor(const nlohmann::json& descriptor);

    [[nodiscard]] bool is_byte_level() const noexcept { return byte_level_; }
    [[nodiscard]] std::size_t vocab_size() const noexcept;
    // "byte_level" or "external:<hash of vocabulary>"
    [[nodiscard]] std::string identity() const;
    [[nodiscard]] nlohmann::json descriptor() const;

    [[nodiscard]] std::vector<TokenId> encode(std::string_view text) const;
    [[nodiscard]] std::string decode(std::span<const TokenId> ids) const;
    [[nodiscard]] std::optional<TokenId> piece_id(std::string_view piece) const;

private:
    bool byte_level_ = true;
    bool byte_fallback_ = false;
    std::map<std::string, TokenId, std::less<>> pieces_;
    std::map<TokenId, std::string> by_id_;
    std::size_t max_piece_length_ = 0;
};

} // namespace ffscope
