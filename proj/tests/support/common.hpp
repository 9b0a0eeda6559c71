#pragma once

#include <atomic>
#include <string>

#include <unistd.h>

#include "shmkit/segment.hpp"

namespace testing {

// Namespace private to this test process.
inline std::string unique_ns(const std::string& tag)
{
    static std::atomic<int> counter{0};
    return tag + "_" + std::to_string(::getpid()) + "_" + std::to_string(counter++);
}

inline std::size_t live_segments(const std::string& ns) { return shmkit::list_segments(ns).size(); }

} // namespace testing
