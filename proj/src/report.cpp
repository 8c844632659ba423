#include "ffscope/report.hpp"

#include "ffscope/hash.hpp"

#include <ostream>

namespace ffscope {

std::string_view tool_version() noexcept { return "0.1.0"; }

nlohmann::json Provenance::to_json() const {
    return {{"tool_version", tool_version()},
            {"model_hash", hex64(model_hash)},
            {"corpus_hash", hex64(corpus_hash)},
            {"seed", seed},
            {"flags", flags}};
}

void write_csv_provenance(std::ostream& out, const Provenance& provenance) {
    out << "# " << provenance.to_json().dump() << '\n';
}

std::string csv_field(std::string_view value) {
    if (value.find_first_of(",\"\n\r") == std::string_view::npos) {
        return std::string(value);
    }
    std::string quoted = "\"";
    for (char c : value) {
        if (c == '"') {
            quoted += '"';
        }
        quoted += c;
    }
    quoted += '"';
    return quoted;
}

std::vector<std::string> split_csv_line(std::string_view line) {
    std::vector<std::string> fields(1);
    bool quoted = false;
    for (std::size_t i = 0; i < line.size(); ++i) {
        const char c = line[i];
        if (quoted) {
            if (c == '"' && i + 1 < line.size() && line[i + 1] == '"') {
                fields.back() += '"';
                ++i;
            } else if (c == '"') {
                quoted = false;
            } else {
                fields.back() += c;
            }
        } else if (c == '"') {
            quoted = true;
        } else if (c == ',') {
            fields.emplace_back();
        } else {
            fields.back() += c;
        }
    }
    return fields;
}

} // namespace ffscope
