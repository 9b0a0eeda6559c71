#pragma once

#include <iosfwd>

namespace shmkit::cli {

// Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
int run(int argc, char** argv);
int run(int argc, char** argv, std::ostream& out, std::ostream& err);

} // namespace shmkit::cli
