#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

namespace ffscope {

std::string_view tool_version() noexcept;

// Attached to every artifact. Contains nothing time- or host-dependent.
struct Provenance {
    std::uint64_t model_hash = 0;
    std::uint64_t corpus_hash = 0;
    std::uint64_t seed = 0;
    nlohmann::json flags = nlohmann::json::object();

    [[nodiscard]] nlohmann::json to_json() const;
};

// "# {...}" first line of a CSV artifact.
void write_csv_provenance(std::ostream& out, const Provenance& provenance);

// RFC 4180 quoting when the field holds a comma, quote or newline.
std::string csv_field(std::string_view value);
std::vector<std::string> split_csv_line(std::string_view line);

} // namespace ffscope
