#include "shmkit/cli.hpp"

int main(int argc, char** argv) { return shmkit::cli::run(argc, argv); }
