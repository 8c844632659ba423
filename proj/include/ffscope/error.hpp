#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace ffscope {

enum class ErrorCode {
    InvalidArgument,
    ShapeMismatch,
    NonFiniteWeight,
    SequenceTooLong,
    TokenOutOfVocab,
    IoFailure,
    BadMagic,
    VersionUnsupported,
    CorruptDirectory,
    IndexOutOfBounds,
    NoFilesFound,
    UnknownToken,
    EmptyLine,
    EmptyCorpus,
    KeyOutOfBounds,
    IncompatibleStores,
    FrequencyOutOfRange,
    InvalidPattern,
    NoCasesFound,
    EmptyCases,
    PositionOutOfRange,
};

std::string_view to_string(ErrorCode code) noexcept;

// Every failure surfaced by the library carries one of the codes above.
class Error : public std::runtime_error {
public:
    Error(ErrorCode code, const std::string& message);

    [[nodiscard]] ErrorCode code() const noexcept { return code_; }

private:
    ErrorCode code_;
};

} // namespace ffscope
