#pragma once

#include <unistd.h>

#include "shmkit/error.hpp"
#include "shmkit/kernels.hpp"

namespace testing {

// Built-ins plus kernels that misbehave on purpose.
inline const shmkit::KernelTable& test_kernels()
{
    static const shmkit::KernelTable table = [] {
        shmkit::KernelTable t = shmkit::builtin_kernels();
        t.add({"first", {}, [](const shmkit::Slice& s, const shmkit::KernelExtras&) {
                   return std::vector<double>{s.values.empty() ? -1.0 : s.values[0]};
               }});
        t.add({"worker_pid", {}, [](const shmkit::Slice& s, const shmkit::KernelExtras&) {
                   return std::vector<double>{static_cast<double>(::getpid()), s.values[0]};
               }});
        t.add({"fail", {}, [](const shmkit::Slice&, const shmkit::KernelExtras&) -> std::vector<double> {
                   throw shmkit::Error(shmkit::ErrorCode::DomainError, "kernel refused");
               }});
        t.add({"crash", {}, [](const shmkit::Slice& s, const shmkit::KernelExtras&) -> std::vector<double> {
                   if (s.values[0] >= 5.0) ::_exit(3);
                   return {s.values[0]};
               }});
        t.add({"huge", {}, [](const shmkit::Slice&, const shmkit::KernelExtras&) {
                   return std::vector<double>((std::size_t{1} << 20) / 8 + 1, 0.0);
               }});
        return t;
    }();
    return table;
}

} // namespace testing
