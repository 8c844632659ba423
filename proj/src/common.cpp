#include "ffscope/error.hpp"
#include "ffscope/hash.hpp"
#include "ffscope/log.hpp"
#include "ffscope/parallel.hpp"
#include "ffscope/tensor.hpp"

#include <atomic>
#include <cstring>
#include <iostream>
#include <mutex>

#include <fmt/format.h>

namespace ffscope {

std::string_view to_string(ErrorCode code) noexcept {
    switch (code) {
    case ErrorCode::InvalidArgument: return "InvalidArgument";
    case ErrorCode::ShapeMismatch: return "ShapeMismatch";
    case ErrorCode::NonFiniteWeight: return "NonFiniteWeight";
    case ErrorCode::SequenceTooLong: return "SequenceTooLong";
    case ErrorCode::TokenOutOfVocab: return "TokenOutOfVocab";
    case ErrorCode::IoFailure: return "IoFailure";
    case ErrorCode::BadMagic: return "BadMagic";
    case ErrorCode::VersionUnsupported: return "VersionUnsupported";
    case ErrorCode::CorruptDirectory: return "CorruptDirectory";
    case ErrorCode::IndexOutOfBounds: return "IndexOutOfBounds";
    case ErrorCode::NoFilesFound: return "NoFilesFound";
    case ErrorCode::UnknownToken: return "UnknownToken";
    case ErrorCode::EmptyLine: return "EmptyLine";
    case ErrorCode::EmptyCorpus: return "EmptyCorpus";
    case ErrorCode::KeyOutOfBounds: return "KeyOutOfBounds";
    case ErrorCode::IncompatibleStores: return "IncompatibleStores";
    case ErrorCode::FrequencyOutOfRange: return "FrequencyOutOfRange";
    case ErrorCode::InvalidPattern: return "InvalidPattern";
    case ErrorCode::NoCasesFound: return "NoCasesFound";
    case ErrorCode::EmptyCases: return "EmptyCases";
    case ErrorCode::PositionOutOfRange: return "PositionOutOfRange";
    }
    return "Unknown";
}

Error::Error(ErrorCode code, const std::string& message)
    : std::runtime_error(fmt::format("{}: {}", to_string(code), message)), code_(code) {}

bool bitwise_equal(std::span<const float> a, std::span<const float> b) noexcept {
    return a.size() == b.size() && (a.empty() || std::memcmp(a.data(), b.data(), a.size_bytes()) == 0);
}

bool bitwise_equal(const Matrix& a, const Matrix& b) noexcept {
    return a.rows() == b.rows() && a.cols() == b.cols() && bitwise_equal(a.values(), b.values());
}

std::string hex64(std::uint64_t value) { return fmt::format("{:016x}", value); }

std::size_t default_thread_count() noexcept {
    const unsigned n = std::thread::hardware_concurrency();
    return n == 0 ? 1 : n;
}

namespace log {
namespace {
std::atomic<Level> g_level{Level::info};
std::mutex g_mutex;
} // namespace

void set_level(Level level) noexcept { g_level = level; }
Level level() noexcept { return g_level; }

void info(std::string_view message) {
    if (g_level.load() >= Level::info) {
        std::lock_guard lock(g_mutex);
        std::cerr << "[ffscope] " << message << '\n';
    }
}

void warn(std::string_view message) {
    if (g_level.load() >= Level::warn) {
        std::lock_guard lock(g_mutex);
        std::cerr << "[ffscope] warning: " << message << '\n';
    }
}
} // namespace log

} // namespace ffscope
