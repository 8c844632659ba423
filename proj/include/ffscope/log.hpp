#pragma once

#include <string_view>

namespace ffscope::log {

enum class Level { quiet, warn, info };

void set_level(Level level) noexcept;
Level level() noexcept;

// Diagnostics go to stderr only; stdout stays machine-parseable.
void info(std::string_view message);
void warn(std::string_view message);

} // namespace ffscope::log
