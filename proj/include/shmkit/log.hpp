#pragma once

#include <functional>
#include <string>

namespace shmkit::log {

enum class Level { debug, info, warning, error };

using Sink = std::function<void(Level, const std::string&)>;

// Replaces the process-wide sink; returns the previous one. The default sink
// writes warnings and errors to stderr.
Sink set_sink(Sink sink);

void write(Level level, const std::string& message);

inline void warn(const std::string& message) { write(Level::warning, message); }
inline void info(const std::string& message) { write(Level::info, message); }

} // namespace shmkit::log
