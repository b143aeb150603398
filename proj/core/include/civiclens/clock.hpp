#pragma once

#include <chrono>
#include <string>

namespace civiclens {

using Timestamp = std::chrono::time_point<std::chrono::system_clock, std::chrono::microseconds>;

Timestamp now_utc() noexcept;

/// "2022-03-01T08:30:00.000000Z"
std::string to_iso8601(Timestamp t);

/// Accepts the format above, with or without fractional seconds.
/// Throws Error(Parse) otherwise.
Timestamp parse_iso8601(const std::string& text);

}  // namespace civiclens
