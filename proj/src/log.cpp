#include "shmkit/log.hpp"

#include <iostream>
#include <mutex>

namespace shmkit::log {
namespace {

std::mutex& sink_mutex()
{
    static std::mutex m;
    return m;
}

void default_sink(Level level, const std::string& message)
{
    if (level < Level::warning) return;
    std::cerr << (level == Level::warning ? "shmkit warning: " : "shmkit error: ") << message << '\n';
}

Sink& current()
{
    static Sink sink = default_sink;
    return sink;
}

} // namespace

Sink set_sink(Sink sink)
{
    std::lock_guard lock(sink_mutex());
    Sink previous = std::move(current());
    current() = sink ? std::move(sink) : Sink(default_sink);
    return previous;
}

void write(Level level, const std::string& message)
{
    std::lock_guard lock(sink_mutex());
    current()(level, message);
}

} // namespace shmkit::log
